#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "nmim/common.hpp"
#include "nmim/data.hpp"
#include "nmim/image.hpp"
#include "nmim/rng.hpp"

namespace nmim {

struct AugmentConfig {
    bool random_resized_crop = false;
    double crop_scale_min = 0.7;
    double crop_scale_max = 1.0;
    double crop_aspect_min = 0.75;
    double crop_aspect_max = 4.0 / 3.0;
    bool hflip = false;
    bool vflip = false;
    double flip_prob = 0.5;
    double color_jitter = 0.0;
    // Output stays at the input size when zero.
    int out_size = 0;
    // Crops below this edge length are rejected as configuration errors.
    int patch_size = 1;
};

inline AugmentConfig identity_augment() { return AugmentConfig{}; }

namespace detail {

// Maps a box through x' = (x - off) * scale, clips to [0, bound], and keeps it
// only if at least `min_area_frac` of the transformed area remains and the
// transformed box center stays inside the window. The center condition keeps
// every surviving box around its nucleus centroid.
inline bool transform_clip_box(const NucleusBox& in, double off_x, double off_y, double scale_x,
                               double scale_y, double bound_w, double bound_h,
                               double min_area_frac, NucleusBox& out) {
    NucleusBox t;
    t.x_min = (in.x_min - off_x) * scale_x;
    t.x_max = (in.x_max - off_x) * scale_x;
    t.y_min = (in.y_min - off_y) * scale_y;
    t.y_max = (in.y_max - off_y) * scale_y;
    t.label = in.label;
    const double cx = 0.5 * (t.x_min + t.x_max);
    const double cy = 0.5 * (t.y_min + t.y_max);
    if (cx < 0.0 || cx > bound_w || cy < 0.0 || cy > bound_h) {
        return false;
    }
    const double full_area = t.area();
    NucleusBox clipped = t;
    clipped.x_min = std::clamp(t.x_min, 0.0, bound_w);
    clipped.x_max = std::clamp(t.x_max, 0.0, bound_w);
    clipped.y_min = std::clamp(t.y_min, 0.0, bound_h);
    clipped.y_max = std::clamp(t.y_max, 0.0, bound_h);
    if (clipped.x_min >= clipped.x_max || clipped.y_min >= clipped.y_max) {
        return false;
    }
    if (full_area <= 0.0 || clipped.area() < min_area_frac * full_area) {
        return false;
    }
    out = clipped;
    return true;
}

constexpr double kBoxSurvivalFrac = 0.25;

} // namespace detail

inline NucleusBox hflip_box(const NucleusBox& b, int img_w) {
    NucleusBox out = b;
    out.x_min = static_cast<double>(img_w) - b.x_max;
    out.x_max = static_cast<double>(img_w) - b.x_min;
    return out;
}

inline NucleusBox vflip_box(const NucleusBox& b, int img_h) {
    NucleusBox out = b;
    out.y_min = static_cast<double>(img_h) - b.y_max;
    out.y_max = static_cast<double>(img_h) - b.y_min;
    return out;
}

// The geometric map an augment call actually applied, for callers that need
// to transform companion coordinates (e.g. ground-truth centroids).
struct AppliedAugment {
    double off_x = 0.0;
    double off_y = 0.0;
    double scale_x = 1.0;
    double scale_y = 1.0;
    bool hflipped = false;
    bool vflipped = false;
    int out_w = 0;
    int out_h = 0;

    void apply(double x, double y, double& tx, double& ty) const {
        tx = (x - off_x) * scale_x;
        ty = (y - off_y) * scale_y;
        if (hflipped) tx = static_cast<double>(out_w) - tx;
        if (vflipped) ty = static_cast<double>(out_h) - ty;
    }
};

// Random resized crop, flips and color jitter; boxes follow the same
// geometric map. The identity config returns the sample untouched.
inline AnnotatedSample augment(const AnnotatedSample& sample, Rng& rng, const AugmentConfig& cfg,
                               AppliedAugment* applied = nullptr) {
    require(cfg.patch_size >= 1, "augment: patch_size must be >= 1, got ", cfg.patch_size);
    AnnotatedSample out = sample;
    AppliedAugment map;
    map.out_w = sample.image.w;
    map.out_h = sample.image.h;

    if (cfg.random_resized_crop) {
        require(cfg.crop_scale_min > 0.0 && cfg.crop_scale_max >= cfg.crop_scale_min &&
                    cfg.crop_scale_max <= 1.0,
                "augment: crop scale range [", cfg.crop_scale_min, ",", cfg.crop_scale_max,
                "] must lie in (0,1]");
        require(cfg.crop_aspect_min > 0.0 && cfg.crop_aspect_max >= cfg.crop_aspect_min,
                "augment: bad crop aspect range [", cfg.crop_aspect_min, ",", cfg.crop_aspect_max,
                "]");
        const int out_h = cfg.out_size > 0 ? cfg.out_size : sample.image.h;
        const int out_w = cfg.out_size > 0 ? cfg.out_size : sample.image.w;
        require(out_h >= cfg.patch_size && out_w >= cfg.patch_size, "augment: crop output ",
                out_h, "x", out_w, " smaller than patch size ", cfg.patch_size);

        const double area = static_cast<double>(sample.image.h) * sample.image.w;
        int ch = sample.image.h;
        int cw = sample.image.w;
        for (int attempt = 0; attempt < 10; ++attempt) {
            const double target = area * rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max);
            const double aspect =
                std::exp(rng.uniform(std::log(cfg.crop_aspect_min), std::log(cfg.crop_aspect_max)));
            const int w = static_cast<int>(std::lround(std::sqrt(target * aspect)));
            const int h = static_cast<int>(std::lround(std::sqrt(target / aspect)));
            if (w >= 1 && h >= 1 && w <= sample.image.w && h <= sample.image.h) {
                cw = w;
                ch = h;
                break;
            }
        }
        require(ch >= cfg.patch_size && cw >= cfg.patch_size, "augment: sampled crop ", ch, "x",
                cw, " smaller than patch size ", cfg.patch_size);
        const int y0 = static_cast<int>(rng.uniform_int(0, sample.image.h - ch));
        const int x0 = static_cast<int>(rng.uniform_int(0, sample.image.w - cw));

        out.image = resize_bilinear(crop_image(out.image, y0, x0, ch, cw), out_h, out_w);
        const double sx = static_cast<double>(out_w) / cw;
        const double sy = static_cast<double>(out_h) / ch;
        std::vector<NucleusBox> kept;
        for (const auto& b : sample.boxes) {
            NucleusBox nb;
            if (detail::transform_clip_box(b, x0, y0, sx, sy, out_w, out_h,
                                           detail::kBoxSurvivalFrac, nb)) {
                kept.push_back(nb);
            }
        }
        out.boxes = std::move(kept);
        map.off_x = x0;
        map.off_y = y0;
        map.scale_x = sx;
        map.scale_y = sy;
        map.out_w = out_w;
        map.out_h = out_h;
    }

    if (cfg.hflip && rng.uniform() < cfg.flip_prob) {
        out.image = hflip_image(out.image);
        for (auto& b : out.boxes) b = hflip_box(b, out.image.w);
        map.hflipped = true;
    }
    if (cfg.vflip && rng.uniform() < cfg.flip_prob) {
        out.image = vflip_image(out.image);
        for (auto& b : out.boxes) b = vflip_box(b, out.image.h);
        map.vflipped = true;
    }
    if (cfg.color_jitter > 0.0) {
        out.image = color_jitter(out.image, rng, cfg.color_jitter);
    }
    if (applied) *applied = map;
    return out;
}

// Assembles four same-sized tiles into a 2x2 mosaic with merged, offset boxes.
inline AnnotatedSample make_mosaic(const std::array<AnnotatedSample, 4>& tiles) {
    const int th = tiles[0].image.h;
    const int tw = tiles[0].image.w;
    for (size_t i = 1; i < 4; ++i) {
        require(tiles[i].image.h == th && tiles[i].image.w == tw &&
                    tiles[i].image.c == tiles[0].image.c,
                "make_mosaic: tile ", i, " size ", tiles[i].image.h, "x", tiles[i].image.w,
                " does not match tile 0 (", th, "x", tw, ")");
    }
    AnnotatedSample mosaic;
    mosaic.source_id = tiles[0].source_id + "+mosaic";
    mosaic.image = Image(2 * th, 2 * tw, tiles[0].image.c);
    for (int t = 0; t < 4; ++t) {
        const int oy = (t / 2) * th;
        const int ox = (t % 2) * tw;
        const auto& tile = tiles[static_cast<size_t>(t)];
        for (int y = 0; y < th; ++y) {
            for (int x = 0; x < tw; ++x) {
                for (int c = 0; c < tile.image.c; ++c) {
                    mosaic.image.at(oy + y, ox + x, c) = tile.image.at(y, x, c);
                }
            }
        }
        for (const auto& b : tile.boxes) {
            NucleusBox nb = b;
            nb.x_min += ox;
            nb.x_max += ox;
            nb.y_min += oy;
            nb.y_max += oy;
            mosaic.boxes.push_back(nb);
        }
    }
    // Nuclei spanning tile seams can be recorded by both neighbours.
    std::vector<NucleusBox> unique;
    for (const auto& b : mosaic.boxes) {
        bool dup = false;
        for (const auto& u : unique) {
            if (u.x_min == b.x_min && u.y_min == b.y_min && u.x_max == b.x_max &&
                u.y_max == b.y_max && u.label == b.label) {
                dup = true;
                break;
            }
        }
        if (!dup) unique.push_back(b);
    }
    mosaic.boxes = std::move(unique);
    return mosaic;
}

// Cuts one crop window out of a mosaic; boxes are clipped with the shared
// survival rule.
inline AnnotatedSample crop_mosaic_window(const AnnotatedSample& mosaic, int y0, int x0,
                                          int size) {
    AnnotatedSample out;
    out.source_id = mosaic.source_id + "+crop";
    out.image = crop_image(mosaic.image, y0, x0, size, size);
    for (const auto& b : mosaic.boxes) {
        NucleusBox nb;
        if (detail::transform_clip_box(b, x0, y0, 1.0, 1.0, size, size,
                                       detail::kBoxSurvivalFrac, nb)) {
            out.boxes.push_back(nb);
        }
    }
    return out;
}

// Pre-training view generation: the four tiles resized to crop_size plus
// crops_per_group windows sampled uniformly inside the 2x2 mosaic.
inline std::vector<AnnotatedSample> pretrain_crop_tiles(const std::array<AnnotatedSample, 4>& tiles,
                                                        int crops_per_group, Rng& rng,
                                                        int crop_size) {
    require(crops_per_group >= 0, "pretrain_crop_tiles: crops_per_group must be >= 0, got ",
            crops_per_group);
    require(crop_size >= 1, "pretrain_crop_tiles: crop_size must be >= 1, got ", crop_size);
    const AnnotatedSample mosaic = make_mosaic(tiles);
    require(crop_size <= mosaic.image.h && crop_size <= mosaic.image.w,
            "pretrain_crop_tiles: crop_size ", crop_size, " exceeds mosaic ", mosaic.image.h, "x",
            mosaic.image.w);

    std::vector<AnnotatedSample> out;
    out.reserve(4 + static_cast<size_t>(crops_per_group));
    for (int t = 0; t < 4; ++t) {
        const auto& tile = tiles[static_cast<size_t>(t)];
        AnnotatedSample resized;
        resized.source_id = tile.source_id;
        resized.image = resize_bilinear(tile.image, crop_size, crop_size);
        const double sx = static_cast<double>(crop_size) / tile.image.w;
        const double sy = static_cast<double>(crop_size) / tile.image.h;
        for (const auto& b : tile.boxes) {
            NucleusBox nb;
            if (detail::transform_clip_box(b, 0.0, 0.0, sx, sy, crop_size, crop_size,
                                           detail::kBoxSurvivalFrac, nb)) {
                resized.boxes.push_back(nb);
            }
        }
        out.push_back(std::move(resized));
    }
    for (int i = 0; i < crops_per_group; ++i) {
        const int y0 = static_cast<int>(rng.uniform_int(0, mosaic.image.h - crop_size));
        const int x0 = static_cast<int>(rng.uniform_int(0, mosaic.image.w - crop_size));
        out.push_back(crop_mosaic_window(mosaic, y0, x0, crop_size));
    }
    return out;
}

struct TileSplit {
    std::array<AnnotatedSample, 4> tiles;
    // Per input nucleus: which tile it was assigned to and the position of its
    // box within that tile's box list.
    std::vector<int> tile_of;
    std::vector<int> index_in_tile;
};

// Four corner-anchored overlapping tiles; each nucleus goes to the tile that
// contains its box center, lowest tile index on ties. Tile order: top-left,
// top-right, bottom-left, bottom-right.
inline TileSplit eval_tile_split(const AnnotatedSample& sample, int tile_size) {
    require(tile_size >= 1 && tile_size <= sample.image.h && tile_size <= sample.image.w,
            "eval_tile_split: tile_size ", tile_size, " must be in [1, min(", sample.image.h, ",",
            sample.image.w, ")]");
    const int H = sample.image.h;
    const int W = sample.image.w;
    const std::array<std::pair<int, int>, 4> origins{{
        {0, 0},
        {0, W - tile_size},
        {H - tile_size, 0},
        {H - tile_size, W - tile_size},
    }};

    TileSplit split;
    for (int t = 0; t < 4; ++t) {
        auto& tile = split.tiles[static_cast<size_t>(t)];
        tile.source_id = sample.source_id + "+tile" + std::to_string(t);
        tile.image = crop_image(sample.image, origins[static_cast<size_t>(t)].first,
                                origins[static_cast<size_t>(t)].second, tile_size, tile_size);
    }

    split.tile_of.resize(sample.boxes.size());
    split.index_in_tile.resize(sample.boxes.size());
    for (size_t i = 0; i < sample.boxes.size(); ++i) {
        const auto& b = sample.boxes[i];
        const double cx = 0.5 * (b.x_min + b.x_max);
        const double cy = 0.5 * (b.y_min + b.y_max);
        int assigned = -1;
        for (int t = 0; t < 4; ++t) {
            const double y0 = origins[static_cast<size_t>(t)].first;
            const double x0 = origins[static_cast<size_t>(t)].second;
            if (cx >= x0 && cx <= x0 + tile_size && cy >= y0 && cy <= y0 + tile_size) {
                assigned = t;
                break;
            }
        }
        require(assigned >= 0, "eval_tile_split: internal error: nucleus center (", cx, ",", cy,
                ") outside all tiles");
        const double x0 = origins[static_cast<size_t>(assigned)].second;
        const double y0 = origins[static_cast<size_t>(assigned)].first;
        NucleusBox nb = b;
        nb.x_min = std::clamp(b.x_min - x0, 0.0, static_cast<double>(tile_size));
        nb.x_max = std::clamp(b.x_max - x0, 0.0, static_cast<double>(tile_size));
        nb.y_min = std::clamp(b.y_min - y0, 0.0, static_cast<double>(tile_size));
        nb.y_max = std::clamp(b.y_max - y0, 0.0, static_cast<double>(tile_size));
        auto& tile = split.tiles[static_cast<size_t>(assigned)];
        split.tile_of[i] = assigned;
        split.index_in_tile[i] = static_cast<int>(tile.boxes.size());
        tile.boxes.push_back(nb);
    }
    return split;
}

} // namespace nmim
