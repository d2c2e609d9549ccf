#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "nmim/common.hpp"
#include "nmim/patching.hpp"
#include "nmim/rng.hpp"
#include "nmim/tensor.hpp"

namespace nmim {

// Masked grid indices, sorted ascending, unique, all in [0, L).
struct MaskSet {
    std::vector<int> indices;

    int size() const { return static_cast<int>(indices.size()); }
    bool contains(int i) const {
        return std::binary_search(indices.begin(), indices.end(), i);
    }
    void validate(int L) const {
        for (size_t k = 0; k < indices.size(); ++k) {
            require(indices[k] >= 0 && indices[k] < L, "MaskSet: index ", indices[k],
                    " out of range [0,", L, ")");
            if (k > 0) {
                require(indices[k] > indices[k - 1], "MaskSet: indices not strictly ascending at ",
                        indices[k]);
            }
        }
    }
};

// Unions random rectangles until at least ceil(ratio*L) cells are covered.
// Block areas are uniform in [min_block, max_block], aspect ratios log-uniform
// in [0.3, 1/0.3]; a sampled block is shrunk if rounding pushed its area past
// max_block, so the final count never exceeds ceil(ratio*L) + max_block.
struct MaskBlock {
    int y0 = 0;
    int x0 = 0;
    int h = 0;
    int w = 0;
};

inline MaskSet blockwise_mask(int grid_h, int grid_w, double ratio, int min_block, int max_block,
                              Rng& rng, std::vector<MaskBlock>* sampled_blocks = nullptr) {
    require(grid_h >= 1 && grid_w >= 1, "blockwise_mask: empty grid ", grid_h, "x", grid_w);
    const int L = grid_h * grid_w;
    require(ratio >= 0.0 && ratio < 1.0, "blockwise_mask: ratio must be in [0,1), got ", ratio);
    require(min_block >= 1 && min_block <= max_block && max_block <= L,
            "blockwise_mask: need 1 <= min_block <= max_block <= ", L, ", got [", min_block, ",",
            max_block, "]");

    const int target = static_cast<int>(std::ceil(ratio * L));
    std::vector<char> covered(static_cast<size_t>(L), 0);
    int count = 0;
    constexpr double kAspectLo = 0.3;
    while (count < target) {
        const int area = static_cast<int>(rng.uniform_int(min_block, max_block));
        const double aspect = std::exp(rng.uniform(std::log(kAspectLo), std::log(1.0 / kAspectLo)));
        int bh = std::max(1, static_cast<int>(std::lround(std::sqrt(area * aspect))));
        int bw = std::max(1, static_cast<int>(std::lround(std::sqrt(area / aspect))));
        bh = std::min(bh, grid_h);
        bw = std::min(bw, grid_w);
        while (bh * bw > max_block) {
            if (bh >= bw && bh > 1) {
                --bh;
            } else if (bw > 1) {
                --bw;
            } else {
                break;
            }
        }
        const int y0 = static_cast<int>(rng.uniform_int(0, grid_h - bh));
        const int x0 = static_cast<int>(rng.uniform_int(0, grid_w - bw));
        if (sampled_blocks) sampled_blocks->push_back(MaskBlock{y0, x0, bh, bw});
        for (int y = y0; y < y0 + bh; ++y) {
            for (int x = x0; x < x0 + bw; ++x) {
                char& cell = covered[static_cast<size_t>(y) * grid_w + x];
                if (!cell) {
                    cell = 1;
                    ++count;
                }
            }
        }
    }

    MaskSet m;
    m.indices.reserve(static_cast<size_t>(count));
    for (int i = 0; i < L; ++i) {
        if (covered[static_cast<size_t>(i)]) m.indices.push_back(i);
    }
    return m;
}

// Swaps masked cells for the shared learnable token; gradient to the token
// accumulates over every replaced cell.
template <typename S>
FeatureMap<S> apply_mask(const FeatureMap<S>& c, const MaskSet& m, const Tensor<S>& e_mask) {
    m.validate(c.length());
    FeatureMap<S> out;
    out.grid_h = c.grid_h;
    out.grid_w = c.grid_w;
    out.cells = m.indices.empty() ? c.cells : ops::replace_rows(c.cells, m.indices, e_mask);
    return out;
}

} // namespace nmim
