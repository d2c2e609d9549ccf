#pragma once

#include <cmath>
#include <vector>

#include "nmim/image.hpp"
#include "nmim/rng.hpp"
#include "nmim/tensor.hpp"

namespace testutil {

inline nmim::Tensor<double> random_tensor(nmim::Shape shape, nmim::Rng& rng,
                                          double scale = 1.0, bool requires_grad = false) {
    auto t = nmim::Tensor<double>::zeros(shape, requires_grad);
    for (auto& v : t.values()) {
        v = rng.uniform(-scale, scale);
    }
    return t;
}

// Scalarizes a tensor with fixed pseudo-random weights so that the gradient
// of the reduction is non-degenerate in every coordinate.
inline nmim::Tensor<double> weighted_sum(const nmim::Tensor<double>& t, uint64_t seed = 7) {
    nmim::Rng rng(seed);
    auto w = nmim::Tensor<double>::zeros(t.shape());
    for (auto& v : w.values()) {
        v = rng.uniform(0.25, 1.75);
    }
    return nmim::ops::sum_all(nmim::ops::mul(t, w));
}

inline float max_image_diff(const nmim::Image& a, const nmim::Image& b) {
    float m = 0.0f;
    for (size_t i = 0; i < a.pix.size(); ++i) {
        m = std::max(m, std::abs(a.pix[i] - b.pix[i]));
    }
    return m;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

} // namespace testutil
