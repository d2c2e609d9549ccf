#pragma once

#include <cstdint>
#include <vector>

#include "nmim/common.hpp"
#include "nmim/masking.hpp"
#include "nmim/tensor.hpp"
#include "nmim/tokenizer.hpp"

namespace nmim {

// Prediction targets for one image: grid tokens for every cell, instance
// token grids for every box that intersects the masked region.
struct MimTargets {
    TokenGrid grid_tokens;
    std::vector<TokenGrid> instance_tokens; // aligned with masked_instances
    MaskSet mask_set;
    std::vector<int> masked_instances;

    void validate(int grid_len, int vocab, int t) const {
        require(grid_tokens.size() == grid_len, "MimTargets: ", grid_tokens.size(),
                " grid tokens for ", grid_len, " cells");
        grid_tokens.validate(vocab);
        mask_set.validate(grid_len);
        require(instance_tokens.size() == masked_instances.size(), "MimTargets: ",
                instance_tokens.size(), " token grids for ", masked_instances.size(),
                " masked instances");
        for (const auto& g : instance_tokens) {
            require(g.rows == t && g.cols == t, "MimTargets: instance grid ", g.rows, "x",
                    g.cols, " vs expected ", t, "x", t);
            g.validate(vocab);
        }
    }
};

// Shared affine map from representations to token logits, one row per input.
template <typename S>
Tensor<S> grid_head(const Tensor<S>& reps, const Tensor<S>& w, const Tensor<S>& b) {
    require(reps.ndim() == 2 && w.ndim() == 2 && reps.dim(1) == w.dim(0),
            "grid_head: input ", shape_str(reps.shape()), " vs weights ", shape_str(w.shape()));
    return ops::linear(reps, w, b);
}

// Affine map D -> t^2 * |V|, laid out as t^2 consecutive logit blocks per
// instance in row-major crop order; output has one row per block.
template <typename S>
Tensor<S> instance_head(const Tensor<S>& reps, const Tensor<S>& w, const Tensor<S>& b, int t,
                        int vocab) {
    require(reps.ndim() == 2 && w.ndim() == 2 && reps.dim(1) == w.dim(0),
            "instance_head: input ", shape_str(reps.shape()), " vs weights ",
            shape_str(w.shape()));
    require(w.dim(1) == t * t * vocab, "instance_head: width ", w.dim(1),
            " does not match t=", t, " with vocabulary ", vocab);
    Tensor<S> flat = ops::linear(reps, w, b); // [n, t^2 V]
    return ops::reshape(flat, {reps.dim(0) * t * t, vocab});
}

template <typename S>
struct MimLoss {
    Tensor<S> total;     // beit + lambda * inst
    Tensor<S> beit_term; // unweighted sum over masked grid cells
    Tensor<S> inst_term; // unweighted sum over masked-instance token cells
};

// Negative log-likelihood over masked grid cells plus the instance term:
// every box touching the mask contributes all of its t^2 token cells.
template <typename S>
MimLoss<S> mim_loss(const Tensor<S>& grid_logits, const Tensor<S>& instance_logits,
                    const MimTargets& targets, S lambda_inst = S(1)) {
    require(grid_logits.ndim() == 2, "mim_loss: grid logits must be a matrix");
    require(instance_logits.ndim() == 2, "mim_loss: instance logits must be a matrix");
    const int vocab = grid_logits.dim(1);
    const int n_mask = targets.mask_set.size();
    require(grid_logits.dim(0) == n_mask, "mim_loss: ", grid_logits.dim(0),
            " grid logit rows for ", n_mask, " masked cells");

    const int n_inst = static_cast<int>(targets.masked_instances.size());
    require(static_cast<int>(targets.instance_tokens.size()) == n_inst,
            "mim_loss: instance token grids vs masked instance count");
    int cells = 0;
    for (const auto& g : targets.instance_tokens) cells += g.size();
    require(instance_logits.dim(0) == cells, "mim_loss: ", instance_logits.dim(0),
            " instance logit rows for ", cells, " token cells");
    require(cells == 0 || instance_logits.dim(1) == vocab,
            "mim_loss: vocabulary mismatch between heads");

    std::vector<int32_t> grid_targets;
    grid_targets.reserve(static_cast<size_t>(n_mask));
    for (int idx : targets.mask_set.indices) {
        grid_targets.push_back(targets.grid_tokens.tokens[static_cast<size_t>(idx)]);
    }
    std::vector<int32_t> inst_targets;
    inst_targets.reserve(static_cast<size_t>(cells));
    for (const auto& g : targets.instance_tokens) {
        for (int tok : g.tokens) inst_targets.push_back(tok);
    }

    MimLoss<S> out;
    out.beit_term = ops::cross_entropy_sum(grid_logits, grid_targets);
    out.inst_term = ops::cross_entropy_sum(instance_logits, inst_targets);
    out.total = ops::add(out.beit_term, ops::scale(out.inst_term, lambda_inst));
    return out;
}

} // namespace nmim
