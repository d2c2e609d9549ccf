#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "nmim/common.hpp"
#include "nmim/data.hpp"
#include "nmim/masking.hpp"
#include "nmim/patching.hpp"
#include "nmim/tensor.hpp"

namespace nmim {

// Clips a pixel-space box to the image extent implied by the grid, then maps
// it to feature coordinates (divide by P). No quantization anywhere.
inline NucleusBox box_to_feature_coords(const NucleusBox& box, int grid_h, int grid_w, int P) {
    NucleusBox b = box;
    b.x_min = std::clamp(b.x_min, 0.0, static_cast<double>(grid_w) * P);
    b.x_max = std::clamp(b.x_max, 0.0, static_cast<double>(grid_w) * P);
    b.y_min = std::clamp(b.y_min, 0.0, static_cast<double>(grid_h) * P);
    b.y_max = std::clamp(b.y_max, 0.0, static_cast<double>(grid_h) * P);
    require(b.x_min < b.x_max && b.y_min < b.y_max, "roi_align: box [", box.x_min, ",", box.y_min,
            ",", box.x_max, ",", box.y_max, "] has no area inside the ", grid_h * P, "x",
            grid_w * P, " image");
    b.x_min /= P;
    b.x_max /= P;
    b.y_min /= P;
    b.y_max /= P;
    return b;
}

namespace detail {

// Averaging matrix [bins, bins*per_bin]: block-diagonal ones, scaled later.
template <typename S>
Tensor<S> bin_pool_matrix(int bins, int per_bin) {
    std::vector<S> data(static_cast<size_t>(bins) * bins * per_bin, static_cast<S>(0));
    for (int b = 0; b < bins; ++b) {
        for (int s = 0; s < per_bin; ++s) {
            data[static_cast<size_t>(b) * bins * per_bin + static_cast<size_t>(b) * per_bin +
                 static_cast<size_t>(s)] = static_cast<S>(1);
        }
    }
    return Tensor<S>::from_data({bins, bins * per_bin}, data, false);
}

} // namespace detail

// RoI Align over the feature grid. The pixel-space box is mapped to feature
// coordinates by dividing by P, partitioned into k x k equal bins, and each
// bin averages samples_per_bin^2 bilinear samples at regularly spaced
// interior points ((s + 0.5) / samples_per_bin across the bin). Returns a
// (k*k) x D matrix in row-major bin order, differentiable w.r.t. the cells.
template <typename S>
Tensor<S> roi_align(const FeatureMap<S>& c, const NucleusBox& box, int P, int k,
                    int samples_per_bin) {
    require(k >= 1, "roi_align: k must be >= 1, got ", k);
    require(samples_per_bin >= 1, "roi_align: samples_per_bin must be >= 1, got ",
            samples_per_bin);
    require(P >= 1, "roi_align: patch size must be >= 1, got ", P);
    const NucleusBox fb = box_to_feature_coords(box, c.grid_h, c.grid_w, P);
    const double bin_w = (fb.x_max - fb.x_min) / k;
    const double bin_h = (fb.y_max - fb.y_min) / k;

    std::vector<std::pair<double, double>> points;
    points.reserve(static_cast<size_t>(k) * k * samples_per_bin * samples_per_bin);
    for (int by = 0; by < k; ++by) {
        for (int bx = 0; bx < k; ++bx) {
            for (int sy = 0; sy < samples_per_bin; ++sy) {
                for (int sx = 0; sx < samples_per_bin; ++sx) {
                    points.emplace_back(fb.y_min + (by + (sy + 0.5) / samples_per_bin) * bin_h,
                                        fb.x_min + (bx + (sx + 0.5) / samples_per_bin) * bin_w);
                }
            }
        }
    }
    Tensor<S> grid3 = ops::reshape(c.cells, {c.grid_h, c.grid_w, c.dim()});
    Tensor<S> samples = ops::bilinear_gather(grid3, points);
    const int per_bin = samples_per_bin * samples_per_bin;
    Tensor<S> pooled = ops::matmul(detail::bin_pool_matrix<S>(k * k, per_bin), samples);
    return ops::scale(pooled, static_cast<S>(1.0 / per_bin));
}

// Valid convolution of the k x k x D instance patch with a k x k x D x D_out
// kernel; the output is the single vector p as a 1 x D_out matrix.
template <typename S>
Tensor<S> embed_instance(const Tensor<S>& c_ins, int k, const Tensor<S>& kernel,
                         const Tensor<S>& bias) {
    require(c_ins.ndim() == 2 && c_ins.dim(0) == k * k, "embed_instance: expected ", k * k,
            " x D features, got ", shape_str(c_ins.shape()));
    const int D = c_ins.dim(1);
    require(kernel.ndim() == 4 && kernel.dim(0) == k && kernel.dim(1) == k &&
                kernel.dim(2) == D,
            "embed_instance: kernel ", shape_str(kernel.shape()), " does not match k=", k,
            ", D=", D);
    Tensor<S> spatial = ops::reshape(c_ins, {k, k, D});
    Tensor<S> out = ops::conv2d_valid(spatial, kernel, bias);
    return ops::reshape(out, {1, kernel.dim(3)});
}

// Indices of boxes whose open-area overlap with the union of masked patch
// squares is strictly positive; boundary contact does not count.
inline std::vector<int> masked_instance_set(const std::vector<NucleusBox>& boxes,
                                            const MaskSet& m, int grid_h, int grid_w, int P) {
    m.validate(grid_h * grid_w);
    std::vector<int> out;
    for (size_t j = 0; j < boxes.size(); ++j) {
        const auto& b = boxes[j];
        bool hit = false;
        for (int idx : m.indices) {
            const int gy = idx / grid_w;
            const int gx = idx % grid_w;
            const double px_min = static_cast<double>(gx) * P;
            const double px_max = px_min + P;
            const double py_min = static_cast<double>(gy) * P;
            const double py_max = py_min + P;
            const double ox = std::min(b.x_max, px_max) - std::max(b.x_min, px_min);
            const double oy = std::min(b.y_max, py_max) - std::max(b.y_min, py_min);
            if (ox > 0.0 && oy > 0.0) {
                hit = true;
                break;
            }
        }
        if (hit) out.push_back(static_cast<int>(j));
    }
    return out;
}

} // namespace nmim
