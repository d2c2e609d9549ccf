#pragma once

#include <cmath>
#include <vector>

#include "nmim/common.hpp"
#include "nmim/data.hpp"
#include "nmim/tensor.hpp"

namespace nmim {

// Center plus extent of one token's spatial footprint, normalized to [0,1]
// by the image width and height.
struct PatchGeometry {
    double x = 0.0;
    double y = 0.0;
    double w = 0.0;
    double h = 0.0;
};

inline void validate_geometry(const PatchGeometry& g) {
    require(g.x >= 0.0 && g.x <= 1.0 && g.y >= 0.0 && g.y <= 1.0,
            "encode_position: center (", g.x, ",", g.y, ") outside [0,1]");
    require(g.w > 0.0 && g.w <= 1.0 && g.h > 0.0 && g.h <= 1.0,
            "encode_position: extent (", g.w, ",", g.h, ") outside (0,1]");
}

// gamma(t) = [sin(2^0 pi t), cos(2^0 pi t), ..., sin(2^{D/8-1} pi t),
// cos(2^{D/8-1} pi t)], giving D/4 values.
inline std::vector<double> gamma_encoding(double t, int D) {
    require(D >= 8 && D % 8 == 0, "gamma: D must be a positive multiple of 8, got ", D);
    const int freqs = D / 8;
    std::vector<double> out(static_cast<size_t>(freqs) * 2);
    double scale = M_PI;
    for (int m = 0; m < freqs; ++m) {
        out[static_cast<size_t>(m) * 2] = std::sin(scale * t);
        out[static_cast<size_t>(m) * 2 + 1] = std::cos(scale * t);
        scale *= 2.0;
    }
    return out;
}

// [gamma(x), gamma(y), gamma(w), gamma(h)] — D values per token.
inline std::vector<double> encode_position(const PatchGeometry& g, int D) {
    validate_geometry(g);
    std::vector<double> out;
    out.reserve(static_cast<size_t>(D));
    for (double t : {g.x, g.y, g.w, g.h}) {
        const auto part = gamma_encoding(t, D);
        out.insert(out.end(), part.begin(), part.end());
    }
    return out;
}

// Row-major grid cell geometries: centers ((j+0.5)/gw, (i+0.5)/gh), extents
// (1/gw, 1/gh).
inline std::vector<PatchGeometry> grid_geometries(int grid_h, int grid_w) {
    require(grid_h >= 1 && grid_w >= 1, "grid_geometries: empty grid ", grid_h, "x", grid_w);
    std::vector<PatchGeometry> out;
    out.reserve(static_cast<size_t>(grid_h) * grid_w);
    for (int i = 0; i < grid_h; ++i) {
        for (int j = 0; j < grid_w; ++j) {
            PatchGeometry g;
            g.x = (j + 0.5) / grid_w;
            g.y = (i + 0.5) / grid_h;
            g.w = 1.0 / grid_w;
            g.h = 1.0 / grid_h;
            out.push_back(g);
        }
    }
    return out;
}

// Geometry of a nucleus box after clipping to the image: clipped center and
// clipped extents, normalized.
inline PatchGeometry box_geometry(const NucleusBox& box, int img_w, int img_h) {
    NucleusBox b = box;
    b.x_min = std::clamp(b.x_min, 0.0, static_cast<double>(img_w));
    b.x_max = std::clamp(b.x_max, 0.0, static_cast<double>(img_w));
    b.y_min = std::clamp(b.y_min, 0.0, static_cast<double>(img_h));
    b.y_max = std::clamp(b.y_max, 0.0, static_cast<double>(img_h));
    require(b.x_min < b.x_max && b.y_min < b.y_max, "box_geometry: box [", box.x_min, ",",
            box.y_min, ",", box.x_max, ",", box.y_max, "] has no area inside ", img_w, "x", img_h);
    PatchGeometry g;
    g.x = 0.5 * (b.x_min + b.x_max) / img_w;
    g.y = 0.5 * (b.y_min + b.y_max) / img_h;
    g.w = (b.x_max - b.x_min) / img_w;
    g.h = (b.y_max - b.y_min) / img_h;
    return g;
}

// Adds positional terms to a token sequence laid out as [CLS, tokens...,
// PADs]: CLS gets the learnable vector, each geometry-bearing token gets its
// sinusoidal encoding, PAD rows (anything past the geometries) get nothing.
template <typename S>
Tensor<S> add_positions(const Tensor<S>& h0, const std::vector<PatchGeometry>& geometries,
                        const Tensor<S>& cls_pos) {
    require(h0.ndim() == 2, "add_positions: expected a token matrix, got ",
            shape_str(h0.shape()));
    const int T = h0.dim(0);
    const int D = h0.dim(1);
    require(cls_pos.ndim() == 2 && cls_pos.dim(0) == 1 && cls_pos.dim(1) == D,
            "add_positions: cls_pos must be 1x", D, ", got ", shape_str(cls_pos.shape()));
    require(static_cast<int>(geometries.size()) <= T - 1, "add_positions: ", geometries.size(),
            " geometries for ", T, " tokens (CLS included) do not fit");

    // Constant positional block: zero row for CLS (the learnable vector is
    // added separately, keeping its gradient), encodings for tokens, zero
    // rows for PADs.
    std::vector<S> pos(static_cast<size_t>(T) * D, static_cast<S>(0));
    for (size_t i = 0; i < geometries.size(); ++i) {
        const auto enc = encode_position(geometries[i], D);
        for (int d = 0; d < D; ++d) {
            pos[(i + 1) * static_cast<size_t>(D) + static_cast<size_t>(d)] =
                static_cast<S>(enc[static_cast<size_t>(d)]);
        }
    }
    Tensor<S> pos_t = Tensor<S>::from_data({T, D}, pos, false);
    return ops::add_to_row(ops::add(h0, pos_t), 0, cls_pos);
}

} // namespace nmim
