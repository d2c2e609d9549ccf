#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include "nmim/common.hpp"
#include "nmim/data.hpp"
#include "nmim/image.hpp"
#include "nmim/rng.hpp"

namespace nmim {

struct TokenGrid {
    int rows = 0;
    int cols = 0;
    std::vector<int> tokens; // row-major

    int at(int r, int c) const {
        return tokens[static_cast<size_t>(r) * cols + static_cast<size_t>(c)];
    }
    int size() const { return rows * cols; }
    void validate(int vocab) const {
        require(static_cast<int>(tokens.size()) == rows * cols, "TokenGrid: ", tokens.size(),
                " tokens for a ", rows, "x", cols, " grid");
        for (int t : tokens) {
            require(t >= 0 && t < vocab, "TokenGrid: token ", t, " outside vocabulary of ", vocab);
        }
    }
};

// K centroids over flattened cell pixels, plus the training trace.
struct Codebook {
    int vocab = 0;
    int dim = 0;
    std::vector<float> centroids; // [vocab, dim] row-major
    int iterations_run = 0;
    std::vector<double> inertia_trace;
    bool fallback_duplicates = false;

    const float* centroid(int k) const {
        return centroids.data() + static_cast<size_t>(k) * dim;
    }
    void validate() const {
        require(vocab >= 1 && dim >= 1, "Codebook: empty codebook");
        require(static_cast<int>(centroids.size()) == vocab * dim, "Codebook: ",
                centroids.size(), " values for ", vocab, " x ", dim);
        for (float v : centroids) {
            require(std::isfinite(v), "Codebook: non-finite centroid value");
        }
    }
};

// One interface over the two bundled tokenizers: the deterministic luminance
// quantizer and the k-means vector quantizer. VQ cells are resized to the
// codebook's native cell resolution before lookup.
struct Tokenizer {
    enum class Kind { Luminance, VQ };
    Kind kind = Kind::Luminance;
    int vocab = 0;
    int cell_px = 0; // VQ native cell edge; dim = cell_px^2 * 3
    Codebook codebook;
};

inline Tokenizer make_luminance_tokenizer(int vocab) {
    require(vocab >= 1, "make_luminance_tokenizer: vocabulary must be >= 1, got ", vocab);
    Tokenizer t;
    t.kind = Tokenizer::Kind::Luminance;
    t.vocab = vocab;
    return t;
}

inline Tokenizer make_vq_tokenizer(Codebook codebook, int cell_px) {
    codebook.validate();
    require(cell_px >= 1 && codebook.dim == cell_px * cell_px * 3,
            "make_vq_tokenizer: cell edge ", cell_px, " does not match centroid dim ",
            codebook.dim);
    Tokenizer t;
    t.kind = Tokenizer::Kind::VQ;
    t.vocab = codebook.vocab;
    t.cell_px = cell_px;
    t.codebook = std::move(codebook);
    return t;
}

namespace detail {

inline int nearest_centroid(const Codebook& cb, const std::vector<float>& v) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k < cb.vocab; ++k) {
        const float* c = cb.centroid(k);
        double d = 0.0;
        for (int i = 0; i < cb.dim; ++i) {
            const double diff = static_cast<double>(v[static_cast<size_t>(i)]) - c[i];
            d += diff * diff;
        }
        if (d < best_d) {
            best_d = d;
            best = k;
        }
    }
    return best;
}

inline std::vector<float> flatten_cell(const Image& cell) {
    return cell.pix;
}

inline int tokenize_cell(const Image& cell, const Tokenizer& tok) {
    if (tok.kind == Tokenizer::Kind::Luminance) {
        double mean = 0.0;
        for (int y = 0; y < cell.h; ++y) {
            for (int x = 0; x < cell.w; ++x) {
                mean += pixel_luminance(cell, y, x);
            }
        }
        mean /= static_cast<double>(cell.h) * cell.w;
        const int t = static_cast<int>(std::floor(mean * tok.vocab));
        return std::clamp(t, 0, tok.vocab - 1);
    }
    Image sized = (cell.h == tok.cell_px && cell.w == tok.cell_px)
                      ? cell
                      : resize_bilinear(cell, tok.cell_px, tok.cell_px);
    return nearest_centroid(tok.codebook, flatten_cell(sized));
}

} // namespace detail

// One token per grid cell; cells are the image split into grid_h x grid_w
// equal rectangles.
inline TokenGrid tokenize_image(const Image& image, int grid_h, int grid_w,
                                const Tokenizer& tok) {
    require(grid_h >= 1 && grid_w >= 1, "tokenize_image: empty grid ", grid_h, "x", grid_w);
    require(image.h % grid_h == 0 && image.w % grid_w == 0, "tokenize_image: image ", image.h,
            "x", image.w, " not divisible into ", grid_h, "x", grid_w, " cells");
    const int ch = image.h / grid_h;
    const int cw = image.w / grid_w;
    TokenGrid out;
    out.rows = grid_h;
    out.cols = grid_w;
    out.tokens.reserve(static_cast<size_t>(grid_h) * grid_w);
    for (int r = 0; r < grid_h; ++r) {
        for (int c = 0; c < grid_w; ++c) {
            const Image cell = crop_image(image, r * ch, c * cw, ch, cw);
            out.tokens.push_back(detail::tokenize_cell(cell, tok));
        }
    }
    return out;
}

// Grid cells of one image as flat vectors at the codebook's native cell
// resolution, matching what nearest-centroid lookups will see at query time.
inline void collect_codebook_cells(const Image& image, int grid_h, int grid_w, int cell_px,
                                   std::vector<std::vector<float>>& out) {
    require(image.h % grid_h == 0 && image.w % grid_w == 0, "collect_codebook_cells: image ",
            image.h, "x", image.w, " not divisible into ", grid_h, "x", grid_w, " cells");
    const int ch = image.h / grid_h;
    const int cw = image.w / grid_w;
    for (int r = 0; r < grid_h; ++r) {
        for (int c = 0; c < grid_w; ++c) {
            Image cell = crop_image(image, r * ch, c * cw, ch, cw);
            if (cell.h != cell_px || cell.w != cell_px) {
                cell = resize_bilinear(cell, cell_px, cell_px);
            }
            out.push_back(detail::flatten_cell(cell));
        }
    }
}

// Bilinear resample of a fractional box region to a fixed output size, with
// the same half-pixel convention as resize_bilinear.
inline Image sample_box_bilinear(const Image& image, const NucleusBox& box, int out_h,
                                 int out_w) {
    NucleusBox b = box;
    b.x_min = std::clamp(b.x_min, 0.0, static_cast<double>(image.w));
    b.x_max = std::clamp(b.x_max, 0.0, static_cast<double>(image.w));
    b.y_min = std::clamp(b.y_min, 0.0, static_cast<double>(image.h));
    b.y_max = std::clamp(b.y_max, 0.0, static_cast<double>(image.h));
    require(b.x_min < b.x_max && b.y_min < b.y_max, "sample_box_bilinear: box [", box.x_min, ",",
            box.y_min, ",", box.x_max, ",", box.y_max, "] is degenerate inside ", image.w, "x",
            image.h);
    Image out(out_h, out_w, image.c);
    const double sx = (b.x_max - b.x_min) / out_w;
    const double sy = (b.y_max - b.y_min) / out_h;
    for (int y = 0; y < out_h; ++y) {
        double fy = b.y_min + (y + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(image.h - 1));
        const int y0 = std::min(static_cast<int>(std::floor(fy)), image.h - 1);
        const int y1 = std::min(y0 + 1, image.h - 1);
        const float wy = static_cast<float>(fy - y0);
        for (int x = 0; x < out_w; ++x) {
            double fx = b.x_min + (x + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(image.w - 1));
            const int x0 = std::min(static_cast<int>(std::floor(fx)), image.w - 1);
            const int x1 = std::min(x0 + 1, image.w - 1);
            const float wx = static_cast<float>(fx - x0);
            for (int ch = 0; ch < image.c; ++ch) {
                const float top = image.at(y0, x0, ch) * (1.0f - wx) + image.at(y0, x1, ch) * wx;
                const float bot = image.at(y1, x0, ch) * (1.0f - wx) + image.at(y1, x1, ch) * wx;
                out.at(y, x, ch) = top * (1.0f - wy) + bot * wy;
            }
        }
    }
    return out;
}

constexpr int kInstanceCropSize = 32;

// Nucleus crops are zoomed to 32 x 32 and tokenized into t x t cells.
inline TokenGrid tokenize_instance(const Image& image, const NucleusBox& box,
                                   const Tokenizer& tok, int t) {
    require(t >= 1 && kInstanceCropSize % t == 0, "tokenize_instance: t must divide ",
            kInstanceCropSize, ", got ", t);
    const Image crop = sample_box_bilinear(image, box, kInstanceCropSize, kInstanceCropSize);
    return tokenize_image(crop, t, t, tok);
}

// Plain k-means with a seeded k-means++ start. The inertia trace records the
// quantization objective after initialization and after every iteration.
inline Codebook train_vq_codebook(const std::vector<std::vector<float>>& samples, int vocab,
                                  int iterations, Rng& rng) {
    require(vocab >= 1, "train_vq_codebook: vocabulary must be >= 1, got ", vocab);
    require(iterations >= 0, "train_vq_codebook: iterations must be >= 0");
    require(!samples.empty(), "train_vq_codebook: no training samples");
    const int dim = static_cast<int>(samples[0].size());
    require(dim >= 1, "train_vq_codebook: zero-dimensional samples");
    for (const auto& s : samples) {
        require(static_cast<int>(s.size()) == dim, "train_vq_codebook: ragged sample of length ",
                s.size(), ", expected ", dim);
    }
    const int n = static_cast<int>(samples.size());

    Codebook cb;
    cb.vocab = vocab;
    cb.dim = dim;
    cb.centroids.resize(static_cast<size_t>(vocab) * dim);

    auto sq_dist = [&](const std::vector<float>& a, const float* b) {
        double d = 0.0;
        for (int i = 0; i < dim; ++i) {
            const double diff = static_cast<double>(a[static_cast<size_t>(i)]) - b[i];
            d += diff * diff;
        }
        return d;
    };
    auto set_centroid = [&](int k, const std::vector<float>& v) {
        std::copy(v.begin(), v.end(), cb.centroids.begin() + static_cast<size_t>(k) * dim);
    };

    if (n < vocab) {
        std::cerr << "train_vq_codebook: only " << n << " samples for " << vocab
                  << " centroids; duplicating samples\n";
        cb.fallback_duplicates = true;
        for (int k = 0; k < vocab; ++k) {
            set_centroid(k, samples[static_cast<size_t>(k % n)]);
        }
    } else {
        // k-means++: first pick uniform, then distance-squared weighted picks.
        std::vector<double> d2(static_cast<size_t>(n), 0.0);
        const int first = static_cast<int>(rng.uniform_int(0, n - 1));
        set_centroid(0, samples[static_cast<size_t>(first)]);
        for (int i = 0; i < n; ++i) {
            d2[static_cast<size_t>(i)] = sq_dist(samples[static_cast<size_t>(i)], cb.centroid(0));
        }
        for (int k = 1; k < vocab; ++k) {
            double total = 0.0;
            for (double d : d2) total += d;
            int pick = -1;
            if (total <= 0.0) {
                pick = static_cast<int>(rng.uniform_int(0, n - 1));
            } else {
                const double target = rng.uniform() * total;
                double acc = 0.0;
                for (int i = 0; i < n; ++i) {
                    acc += d2[static_cast<size_t>(i)];
                    if (d2[static_cast<size_t>(i)] > 0.0 && acc > target) {
                        pick = i;
                        break;
                    }
                }
                if (pick < 0) {
                    for (int i = n - 1; i >= 0; --i) {
                        if (d2[static_cast<size_t>(i)] > 0.0) {
                            pick = i;
                            break;
                        }
                    }
                }
                if (pick < 0) pick = static_cast<int>(rng.uniform_int(0, n - 1));
            }
            set_centroid(k, samples[static_cast<size_t>(pick)]);
            for (int i = 0; i < n; ++i) {
                d2[static_cast<size_t>(i)] = std::min(
                    d2[static_cast<size_t>(i)], sq_dist(samples[static_cast<size_t>(i)], cb.centroid(k)));
            }
        }
    }

    std::vector<int> assign(static_cast<size_t>(n), 0);
    auto assign_all = [&]() {
        double inertia = 0.0;
        for (int i = 0; i < n; ++i) {
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (int k = 0; k < vocab; ++k) {
                const double d = sq_dist(samples[static_cast<size_t>(i)], cb.centroid(k));
                if (d < best_d) {
                    best_d = d;
                    best = k;
                }
            }
            assign[static_cast<size_t>(i)] = best;
            inertia += best_d;
        }
        return inertia;
    };

    cb.inertia_trace.push_back(assign_all());
    for (int it = 0; it < iterations; ++it) {
        std::vector<double> sums(static_cast<size_t>(vocab) * dim, 0.0);
        std::vector<int> counts(static_cast<size_t>(vocab), 0);
        for (int i = 0; i < n; ++i) {
            const int k = assign[static_cast<size_t>(i)];
            counts[static_cast<size_t>(k)] += 1;
            for (int d = 0; d < dim; ++d) {
                sums[static_cast<size_t>(k) * dim + static_cast<size_t>(d)] +=
                    samples[static_cast<size_t>(i)][static_cast<size_t>(d)];
            }
        }
        for (int k = 0; k < vocab; ++k) {
            if (counts[static_cast<size_t>(k)] == 0) continue; // keep empty clusters in place
            for (int d = 0; d < dim; ++d) {
                cb.centroids[static_cast<size_t>(k) * dim + static_cast<size_t>(d)] =
                    static_cast<float>(sums[static_cast<size_t>(k) * dim + static_cast<size_t>(d)] /
                                       counts[static_cast<size_t>(k)]);
            }
        }
        cb.inertia_trace.push_back(assign_all());
        cb.iterations_run = it + 1;
    }
    cb.validate();
    return cb;
}

} // namespace nmim
