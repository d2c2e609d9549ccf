#pragma once

#include <vector>

#include "nmim/common.hpp"
#include "nmim/image.hpp"
#include "nmim/tensor.hpp"

namespace nmim {

// Grid of embedded patch features, D per cell, row-major over grid cells.
template <typename S>
struct FeatureMap {
    int grid_h = 0;
    int grid_w = 0;
    Tensor<S> cells; // [grid_h * grid_w, D]

    int length() const { return grid_h * grid_w; }
    int dim() const { return cells.dim(1); }
};

// Row-major patch matrix: L rows of P*P*C values, each patch flattened
// y-then-x-then-channel. The result carries no gradient; pixels are inputs.
template <typename S>
Tensor<S> split_grid(const Image& image, int P) {
    require(P >= 1, "split_grid: patch size must be >= 1, got ", P);
    require(image.h % P == 0 && image.w % P == 0, "split_grid: image ", image.h, "x", image.w,
            " not divisible by patch size ", P);
    const int gh = image.h / P;
    const int gw = image.w / P;
    const int L = gh * gw;
    const int cols = P * P * image.c;
    std::vector<S> data(static_cast<size_t>(L) * cols);
    size_t pos = 0;
    for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
            for (int py = 0; py < P; ++py) {
                for (int px = 0; px < P; ++px) {
                    for (int ch = 0; ch < image.c; ++ch) {
                        data[pos++] = static_cast<S>(image.at(gy * P + py, gx * P + px, ch));
                    }
                }
            }
        }
    }
    return Tensor<S>::from_data({L, cols}, data, false);
}

// Inverse of split_grid for a known grid geometry.
template <typename S>
Image reassemble_grid(const Tensor<S>& patches, int grid_h, int grid_w, int P, int channels) {
    require(patches.ndim() == 2, "reassemble_grid: expected matrix, got ",
            shape_str(patches.shape()));
    require(patches.dim(0) == grid_h * grid_w, "reassemble_grid: ", patches.dim(0),
            " patches cannot fill a ", grid_h, "x", grid_w, " grid");
    require(patches.dim(1) == P * P * channels, "reassemble_grid: patch length ", patches.dim(1),
            " does not match P=", P, ", C=", channels);
    Image img(grid_h * P, grid_w * P, channels);
    const auto& v = patches.values();
    size_t pos = 0;
    for (int gy = 0; gy < grid_h; ++gy) {
        for (int gx = 0; gx < grid_w; ++gx) {
            for (int py = 0; py < P; ++py) {
                for (int px = 0; px < P; ++px) {
                    for (int ch = 0; ch < channels; ++ch) {
                        img.at(gy * P + py, gx * P + px, ch) = static_cast<float>(v[pos++]);
                    }
                }
            }
        }
    }
    return img;
}

// c[i] = patches[i] . E + bias, kept as an L x D matrix with the grid shape
// alongside.
template <typename S>
FeatureMap<S> embed_grid(const Tensor<S>& patches, int grid_h, int grid_w, const Tensor<S>& E,
                         const Tensor<S>& bias) {
    require(patches.ndim() == 2 && patches.dim(0) == grid_h * grid_w,
            "embed_grid: expected ", grid_h * grid_w, " patch rows, got ",
            shape_str(patches.shape()));
    FeatureMap<S> fm;
    fm.grid_h = grid_h;
    fm.grid_w = grid_w;
    fm.cells = ops::linear(patches, E, bias);
    return fm;
}

} // namespace nmim
