#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "nmim/common.hpp"
#include "nmim/rng.hpp"

namespace nmim {

// Row-major H x W x C pixel buffer, values in [0,1] until normalization.
struct Image {
    int h = 0;
    int w = 0;
    int c = 0;
    std::vector<float> pix;

    Image() = default;
    Image(int height, int width, int channels, float fill = 0.0f)
        : h(height), w(width), c(channels),
          pix(static_cast<size_t>(height) * width * channels, fill) {}

    float& at(int y, int x, int ch) {
        return pix[(static_cast<size_t>(y) * w + static_cast<size_t>(x)) * c + static_cast<size_t>(ch)];
    }
    float at(int y, int x, int ch) const {
        return pix[(static_cast<size_t>(y) * w + static_cast<size_t>(x)) * c + static_cast<size_t>(ch)];
    }

    bool same_shape(const Image& o) const { return h == o.h && w == o.w && c == o.c; }
};

inline float luminance(float r, float g, float b) {
    return 0.299f * r + 0.587f * g + 0.114f * b;
}

inline float pixel_luminance(const Image& img, int y, int x) {
    if (img.c >= 3) {
        return luminance(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
    }
    return img.at(y, x, 0);
}

inline Image crop_image(const Image& img, int y0, int x0, int h, int w) {
    require(h > 0 && w > 0, "crop_image: empty crop ", h, "x", w);
    require(y0 >= 0 && x0 >= 0 && y0 + h <= img.h && x0 + w <= img.w,
            "crop_image: window ", h, "x", w, " at (", y0, ",", x0,
            ") outside image ", img.h, "x", img.w);
    Image out(h, w, img.c);
    for (int y = 0; y < h; ++y) {
        const float* src = img.pix.data() + (static_cast<size_t>(y0 + y) * img.w + x0) * img.c;
        float* dst = out.pix.data() + static_cast<size_t>(y) * w * img.c;
        std::copy(src, src + static_cast<size_t>(w) * img.c, dst);
    }
    return out;
}

// Bilinear resize with the half-pixel center convention:
// src = (dst + 0.5) * scale - 0.5, clamped to the source extent.
inline Image resize_bilinear(const Image& img, int oh, int ow) {
    require(oh > 0 && ow > 0, "resize_bilinear: target ", oh, "x", ow, " invalid");
    if (oh == img.h && ow == img.w) {
        return img;
    }
    Image out(oh, ow, img.c);
    const double sy = static_cast<double>(img.h) / oh;
    const double sx = static_cast<double>(img.w) / ow;
    for (int y = 0; y < oh; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(img.h - 1));
        const int y0 = std::min(static_cast<int>(std::floor(fy)), img.h - 1);
        const int y1 = std::min(y0 + 1, img.h - 1);
        const float wy = static_cast<float>(fy - y0);
        for (int x = 0; x < ow; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(img.w - 1));
            const int x0 = std::min(static_cast<int>(std::floor(fx)), img.w - 1);
            const int x1 = std::min(x0 + 1, img.w - 1);
            const float wx = static_cast<float>(fx - x0);
            for (int ch = 0; ch < img.c; ++ch) {
                const float top = img.at(y0, x0, ch) * (1.0f - wx) + img.at(y0, x1, ch) * wx;
                const float bot = img.at(y1, x0, ch) * (1.0f - wx) + img.at(y1, x1, ch) * wx;
                out.at(y, x, ch) = top * (1.0f - wy) + bot * wy;
            }
        }
    }
    return out;
}

inline Image hflip_image(const Image& img) {
    Image out(img.h, img.w, img.c);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            for (int ch = 0; ch < img.c; ++ch) {
                out.at(y, x, ch) = img.at(y, img.w - 1 - x, ch);
            }
        }
    }
    return out;
}

inline Image vflip_image(const Image& img) {
    Image out(img.h, img.w, img.c);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            for (int ch = 0; ch < img.c; ++ch) {
                out.at(y, x, ch) = img.at(img.h - 1 - y, x, ch);
            }
        }
    }
    return out;
}

inline void clamp_unit(Image& img) {
    for (auto& v : img.pix) {
        v = std::clamp(v, 0.0f, 1.0f);
    }
}

// Brightness, contrast, saturation jitter with factors drawn uniformly from
// [1 - strength, 1 + strength]; pixel values are clamped back to [0,1].
inline Image color_jitter(const Image& img, Rng& rng, double strength) {
    require(strength >= 0.0, "color_jitter: negative strength ", strength);
    if (strength == 0.0) {
        return img;
    }
    const float fb = static_cast<float>(rng.uniform(std::max(0.0, 1.0 - strength), 1.0 + strength));
    const float fc = static_cast<float>(rng.uniform(std::max(0.0, 1.0 - strength), 1.0 + strength));
    const float fs = static_cast<float>(rng.uniform(std::max(0.0, 1.0 - strength), 1.0 + strength));

    Image out = img;
    for (auto& v : out.pix) v *= fb;
    clamp_unit(out);

    double mean_gray = 0.0;
    for (int y = 0; y < out.h; ++y) {
        for (int x = 0; x < out.w; ++x) {
            mean_gray += pixel_luminance(out, y, x);
        }
    }
    mean_gray /= static_cast<double>(out.h) * out.w;
    for (auto& v : out.pix) {
        v = (v - static_cast<float>(mean_gray)) * fc + static_cast<float>(mean_gray);
    }
    clamp_unit(out);

    if (out.c >= 3) {
        for (int y = 0; y < out.h; ++y) {
            for (int x = 0; x < out.w; ++x) {
                const float gray = pixel_luminance(out, y, x);
                for (int ch = 0; ch < 3; ++ch) {
                    out.at(y, x, ch) = (out.at(y, x, ch) - gray) * fs + gray;
                }
            }
        }
        clamp_unit(out);
    }
    return out;
}

// Per-channel standardization (pixel - mean) / std.
inline Image normalize_image(const Image& img, const std::vector<double>& mean,
                             const std::vector<double>& std) {
    require(static_cast<int>(mean.size()) == img.c && static_cast<int>(std.size()) == img.c,
            "normalize: expected ", img.c, " channel statistics, got mean ", mean.size(),
            " std ", std.size());
    for (size_t i = 0; i < std.size(); ++i) {
        require(std[i] > 0.0, "normalize: std[", i, "] must be positive, got ", std[i]);
    }
    Image out = img;
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            for (int ch = 0; ch < img.c; ++ch) {
                out.at(y, x, ch) = static_cast<float>(
                    (img.at(y, x, ch) - mean[static_cast<size_t>(ch)]) / std[static_cast<size_t>(ch)]);
            }
        }
    }
    return out;
}

inline Image denormalize_image(const Image& img, const std::vector<double>& mean,
                               const std::vector<double>& std) {
    require(static_cast<int>(mean.size()) == img.c && static_cast<int>(std.size()) == img.c,
            "denormalize: expected ", img.c, " channel statistics");
    Image out = img;
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            for (int ch = 0; ch < img.c; ++ch) {
                out.at(y, x, ch) = static_cast<float>(
                    img.at(y, x, ch) * std[static_cast<size_t>(ch)] + mean[static_cast<size_t>(ch)]);
            }
        }
    }
    return out;
}

// The standard published ImageNet statistics; the default when a config does
// not override them.
inline const std::vector<double>& imagenet_mean() {
    static const std::vector<double> m{0.485, 0.456, 0.406};
    return m;
}
inline const std::vector<double>& imagenet_std() {
    static const std::vector<double> s{0.229, 0.224, 0.225};
    return s;
}

} // namespace nmim
