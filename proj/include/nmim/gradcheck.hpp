#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "nmim/common.hpp"
#include "nmim/rng.hpp"
#include "nmim/tensor.hpp"

namespace nmim {

// Compares the analytic gradient of a scalar-valued graph against central
// finite differences. Intended for S = double; finite differences are not
// trustworthy in single precision. Returns the max over checked coordinates
// of |analytic - fd| / max(1, |analytic|).
//
// When max_coords >= 0 and the input is larger, a seeded random subset of
// coordinates is checked; the analytic gradient is still computed in full.
inline double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                         const Tensor<double>& x, double eps,
                         int64_t max_coords = -1, uint64_t coord_seed = 0) {
    require(eps > 0, "grad_check: eps must be positive, got ", eps);

    Tensor<double> probe = Tensor<double>::from_data(x.shape(), x.values(), true);
    Tensor<double> y = f(probe);
    require(y.size() == 1, "grad_check: f must be scalar-valued, got shape ",
            shape_str(y.shape()));
    require(std::isfinite(y.item()), "grad_check: non-finite forward value ", y.item());
    y.backward();
    std::vector<double> analytic = probe.grad();
    if (analytic.empty()) {
        analytic.assign(static_cast<size_t>(x.size()), 0.0);
    }
    for (size_t i = 0; i < analytic.size(); ++i) {
        require(std::isfinite(analytic[i]), "grad_check: non-finite analytic gradient at coordinate ", i);
    }

    std::vector<int64_t> coords(static_cast<size_t>(x.size()));
    std::iota(coords.begin(), coords.end(), 0);
    if (max_coords >= 0 && max_coords < x.size()) {
        Rng rng(coord_seed);
        rng.shuffle(coords);
        coords.resize(static_cast<size_t>(max_coords));
    }

    double max_rel = 0.0;
    std::vector<double> work = x.values();
    for (int64_t c : coords) {
        const double orig = work[static_cast<size_t>(c)];

        work[static_cast<size_t>(c)] = orig + eps;
        Tensor<double> yp;
        {
            NoGradGuard ng;
            yp = f(Tensor<double>::from_data(x.shape(), work));
        }
        work[static_cast<size_t>(c)] = orig - eps;
        Tensor<double> ym;
        {
            NoGradGuard ng;
            ym = f(Tensor<double>::from_data(x.shape(), work));
        }
        work[static_cast<size_t>(c)] = orig;

        const double fd = (yp.item() - ym.item()) / (2.0 * eps);
        require(std::isfinite(fd), "grad_check: non-finite finite difference at coordinate ", c);
        const double a = analytic[static_cast<size_t>(c)];
        const double rel = std::abs(a - fd) / std::max(1.0, std::abs(a));
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

} // namespace nmim
