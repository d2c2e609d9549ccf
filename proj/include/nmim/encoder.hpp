#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "nmim/common.hpp"
#include "nmim/patching.hpp"
#include "nmim/positional.hpp"
#include "nmim/rng.hpp"
#include "nmim/tensor.hpp"

namespace nmim {

struct EncoderShape {
    int dim = 64;
    int layers = 2;
    int heads = 2;
    int patch_dim = 192; // P*P*C
    int k = 3;           // instance reduction kernel edge
    int vocab = 64;
    int t = 2;           // instance token grid edge

    void validate() const {
        require(dim >= 8 && dim % 8 == 0, "EncoderShape: dim ", dim, " must be a multiple of 8");
        require(heads >= 1 && dim % heads == 0, "EncoderShape: dim ", dim,
                " not divisible by ", heads, " heads");
        require(layers >= 0, "EncoderShape: negative layer count");
        require(patch_dim >= 1, "EncoderShape: patch dim must be positive");
        require(k >= 1, "EncoderShape: kernel edge must be positive");
        require(vocab >= 1, "EncoderShape: vocabulary must be positive");
        require(t >= 1, "EncoderShape: instance grid edge must be positive");
    }
};

template <typename S>
struct EncoderBlock {
    Tensor<S> ln1_scale, ln1_shift;
    Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<S> ln2_scale, ln2_shift;
    Tensor<S> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

// Every learnable in the model: the patch projection, the instance reduction
// kernel, special token embeddings, the transformer stack, and the two
// token-prediction heads.
template <typename S>
struct EncoderParams {
    EncoderShape shape;

    Tensor<S> patch_proj_w, patch_proj_b; // [patch_dim, D], [D]
    Tensor<S> inst_kernel, inst_bias;     // [k, k, D, D], [D]
    Tensor<S> cls_embed, pad_embed, mask_embed, cls_pos; // each [1, D]
    std::vector<EncoderBlock<S>> blocks;
    Tensor<S> final_ln_scale, final_ln_shift; // [D]
    Tensor<S> grid_head_w, grid_head_b;   // [D, V], [V]
    Tensor<S> inst_head_w, inst_head_b;   // [D, t^2 V], [t^2 V]

    template <typename F>
    void for_each_param(F&& fn) {
        fn("patch_proj_w", patch_proj_w);
        fn("patch_proj_b", patch_proj_b);
        fn("inst_kernel", inst_kernel);
        fn("inst_bias", inst_bias);
        fn("cls_embed", cls_embed);
        fn("pad_embed", pad_embed);
        fn("mask_embed", mask_embed);
        fn("cls_pos", cls_pos);
        for (size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "blocks." + std::to_string(i) + ".";
            auto& b = blocks[i];
            fn(p + "ln1_scale", b.ln1_scale);
            fn(p + "ln1_shift", b.ln1_shift);
            fn(p + "wq", b.wq);
            fn(p + "bq", b.bq);
            fn(p + "wk", b.wk);
            fn(p + "bk", b.bk);
            fn(p + "wv", b.wv);
            fn(p + "bv", b.bv);
            fn(p + "wo", b.wo);
            fn(p + "bo", b.bo);
            fn(p + "ln2_scale", b.ln2_scale);
            fn(p + "ln2_shift", b.ln2_shift);
            fn(p + "mlp_w1", b.mlp_w1);
            fn(p + "mlp_b1", b.mlp_b1);
            fn(p + "mlp_w2", b.mlp_w2);
            fn(p + "mlp_b2", b.mlp_b2);
        }
        fn("final_ln_scale", final_ln_scale);
        fn("final_ln_shift", final_ln_shift);
        fn("grid_head_w", grid_head_w);
        fn("grid_head_b", grid_head_b);
        fn("inst_head_w", inst_head_w);
        fn("inst_head_b", inst_head_b);
    }

    template <typename F>
    void for_each_param(F&& fn) const {
        const_cast<EncoderParams*>(this)->for_each_param(
            [&](const std::string& name, Tensor<S>& t) {
                fn(name, static_cast<const Tensor<S>&>(t));
            });
    }
};

namespace detail {

template <typename S>
Tensor<S> trunc_normal_tensor(Shape shape, Rng& rng, double stddev) {
    auto t = Tensor<S>::zeros(std::move(shape), /*requires_grad=*/true);
    for (auto& v : t.values()) v = static_cast<S>(rng.trunc_normal(stddev));
    return t;
}

template <typename S>
Tensor<S> const_tensor(Shape shape, S fill) {
    auto t = Tensor<S>::zeros(std::move(shape), /*requires_grad=*/true);
    for (auto& v : t.values()) v = fill;
    return t;
}

} // namespace detail

// Fan-scaled truncated-normal projections (std sqrt(2 / (fan_in + fan_out))),
// zero biases and norm shifts, unit norm scales. Special token embeddings use
// the usual small-embedding scale. Keeping projection variance matched to the
// fans gives attention logits of order one from the first step, which avoids
// the long uniform-attention plateau that tiny fixed-scale init produces on
// small models.
template <typename S>
EncoderParams<S> init_encoder_params(const EncoderShape& shape, Rng& rng) {
    shape.validate();
    const int D = shape.dim;
    constexpr double kEmbedStd = 0.02;
    const auto fan = [](int fan_in, int fan_out) {
        return std::sqrt(2.0 / (fan_in + fan_out));
    };
    EncoderParams<S> p;
    p.shape = shape;
    p.patch_proj_w =
        detail::trunc_normal_tensor<S>({shape.patch_dim, D}, rng, fan(shape.patch_dim, D));
    p.patch_proj_b = detail::const_tensor<S>({D}, S(0));
    p.inst_kernel = detail::trunc_normal_tensor<S>({shape.k, shape.k, D, D}, rng,
                                                   fan(shape.k * shape.k * D, D));
    p.inst_bias = detail::const_tensor<S>({D}, S(0));
    p.cls_embed = detail::trunc_normal_tensor<S>({1, D}, rng, kEmbedStd);
    p.pad_embed = detail::trunc_normal_tensor<S>({1, D}, rng, kEmbedStd);
    p.mask_embed = detail::trunc_normal_tensor<S>({1, D}, rng, kEmbedStd);
    p.cls_pos = detail::trunc_normal_tensor<S>({1, D}, rng, kEmbedStd);
    p.blocks.resize(static_cast<size_t>(shape.layers));
    for (auto& b : p.blocks) {
        b.ln1_scale = detail::const_tensor<S>({D}, S(1));
        b.ln1_shift = detail::const_tensor<S>({D}, S(0));
        b.wq = detail::trunc_normal_tensor<S>({D, D}, rng, fan(D, D));
        b.bq = detail::const_tensor<S>({D}, S(0));
        b.wk = detail::trunc_normal_tensor<S>({D, D}, rng, fan(D, D));
        b.bk = detail::const_tensor<S>({D}, S(0));
        b.wv = detail::trunc_normal_tensor<S>({D, D}, rng, fan(D, D));
        b.bv = detail::const_tensor<S>({D}, S(0));
        b.wo = detail::trunc_normal_tensor<S>({D, D}, rng, fan(D, D));
        b.bo = detail::const_tensor<S>({D}, S(0));
        b.ln2_scale = detail::const_tensor<S>({D}, S(1));
        b.ln2_shift = detail::const_tensor<S>({D}, S(0));
        b.mlp_w1 = detail::trunc_normal_tensor<S>({D, 4 * D}, rng, fan(D, 4 * D));
        b.mlp_b1 = detail::const_tensor<S>({4 * D}, S(0));
        b.mlp_w2 = detail::trunc_normal_tensor<S>({4 * D, D}, rng, fan(4 * D, D));
        b.mlp_b2 = detail::const_tensor<S>({D}, S(0));
    }
    p.final_ln_scale = detail::const_tensor<S>({D}, S(1));
    p.final_ln_shift = detail::const_tensor<S>({D}, S(0));
    p.grid_head_w = detail::trunc_normal_tensor<S>({D, shape.vocab}, rng, fan(D, shape.vocab));
    p.grid_head_b = detail::const_tensor<S>({shape.vocab}, S(0));
    p.inst_head_w = detail::trunc_normal_tensor<S>(
        {D, shape.t * shape.t * shape.vocab}, rng, fan(D, shape.t * shape.t * shape.vocab));
    p.inst_head_b = detail::const_tensor<S>({shape.t * shape.t * shape.vocab}, S(0));
    return p;
}

// Fixed-length token sequence: [CLS, L grid cells row-major, N instances in
// box order, N_max - N PAD slots].
template <typename S>
struct SequenceState {
    Tensor<S> tokens;              // [1 + L + N_max, D]
    std::vector<bool> pad_mask;    // true exactly on PAD slots
    std::vector<PatchGeometry> geometry; // L grid cells then N instances
    int grid_len = 0;
    int n_instances = 0;
    int n_max = 0;

    int total_len() const { return 1 + grid_len + n_max; }
    void validate() const {
        require(tokens.ndim() == 2 && tokens.dim(0) == total_len(), "SequenceState: ",
                shape_str(tokens.shape()), " vs expected length ", total_len());
        require(static_cast<int>(pad_mask.size()) == total_len(),
                "SequenceState: pad mask length mismatch");
        for (int i = 0; i < total_len(); ++i) {
            const bool is_pad = i >= 1 + grid_len + n_instances;
            require(pad_mask[static_cast<size_t>(i)] == is_pad,
                    "SequenceState: pad mask wrong at position ", i);
        }
        require(geometry.empty() ||
                    static_cast<int>(geometry.size()) == grid_len + n_instances,
                "SequenceState: geometry count ", geometry.size(), " vs ",
                grid_len + n_instances, " non-special tokens");
    }
};

template <typename S>
SequenceState<S> assemble_sequence(const FeatureMap<S>& grid,
                                   const std::vector<Tensor<S>>& instances, int n_max,
                                   const Tensor<S>& cls_embed, const Tensor<S>& pad_embed,
                                   std::vector<PatchGeometry> geometry = {}) {
    const int n = static_cast<int>(instances.size());
    require(n <= n_max, "assemble_sequence: ", n, " instances exceed the sequence budget of ",
            n_max, "; raise N_max or subsample boxes");
    const int D = grid.dim();
    require(cls_embed.ndim() == 2 && cls_embed.dim(0) == 1 && cls_embed.dim(1) == D,
            "assemble_sequence: CLS embedding shape ", shape_str(cls_embed.shape()));
    require(pad_embed.ndim() == 2 && pad_embed.dim(0) == 1 && pad_embed.dim(1) == D,
            "assemble_sequence: PAD embedding shape ", shape_str(pad_embed.shape()));

    std::vector<Tensor<S>> parts;
    parts.push_back(cls_embed);
    parts.push_back(grid.cells);
    for (const auto& inst : instances) {
        require(inst.ndim() == 2 && inst.dim(0) == 1 && inst.dim(1) == D,
                "assemble_sequence: instance embedding shape ", shape_str(inst.shape()));
        parts.push_back(inst);
    }
    if (n < n_max) {
        parts.push_back(ops::repeat_row(pad_embed, n_max - n));
    }

    SequenceState<S> seq;
    seq.tokens = ops::concat_rows(parts);
    seq.grid_len = grid.length();
    seq.n_instances = n;
    seq.n_max = n_max;
    seq.pad_mask.assign(static_cast<size_t>(seq.total_len()), false);
    for (int i = 1 + seq.grid_len + n; i < seq.total_len(); ++i) {
        seq.pad_mask[static_cast<size_t>(i)] = true;
    }
    if (!geometry.empty()) {
        require(static_cast<int>(geometry.size()) == seq.grid_len + n,
                "assemble_sequence: ", geometry.size(), " geometries for ", seq.grid_len + n,
                " non-special tokens");
        seq.geometry = std::move(geometry);
    }
    return seq;
}

// Post-softmax attention maps, one [T, T] value matrix per (layer, head).
template <typename S>
struct AttentionTrace {
    int layers = 0;
    int heads = 0;
    int seq_len = 0;
    std::vector<std::vector<S>> maps; // indexed layer * heads + head

    const std::vector<S>& map(int layer, int head) const {
        return maps[static_cast<size_t>(layer) * heads + static_cast<size_t>(head)];
    }
};

// Pre-norm transformer stack. PAD keys carry exactly zero attention weight;
// PAD rows flow through but are never read downstream. An empty stack is the
// identity; otherwise a final layer norm closes the residual stream.
template <typename S>
SequenceState<S> encoder_forward(const SequenceState<S>& seq, const EncoderParams<S>& params,
                                 AttentionTrace<S>* trace = nullptr) {
    seq.validate();
    const int D = params.shape.dim;
    require(seq.tokens.dim(1) == D, "encoder_forward: token width ", seq.tokens.dim(1),
            " vs model dim ", D);
    require(static_cast<int>(params.blocks.size()) == params.shape.layers,
            "encoder_forward: ", params.blocks.size(), " blocks for ", params.shape.layers,
            " configured layers");
    const int heads = params.shape.heads;
    const int dh = D / heads;
    const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

    if (trace) {
        trace->layers = params.shape.layers;
        trace->heads = heads;
        trace->seq_len = seq.total_len();
        trace->maps.clear();
    }

    Tensor<S> h = seq.tokens;
    for (const auto& blk : params.blocks) {
        Tensor<S> x = ops::layer_norm(h, blk.ln1_scale, blk.ln1_shift);
        Tensor<S> q = ops::linear(x, blk.wq, blk.bq);
        Tensor<S> k = ops::linear(x, blk.wk, blk.bk);
        Tensor<S> v = ops::linear(x, blk.wv, blk.bv);
        std::vector<Tensor<S>> ctx;
        ctx.reserve(static_cast<size_t>(heads));
        for (int hd = 0; hd < heads; ++hd) {
            Tensor<S> qh = ops::slice_cols(q, hd * dh, (hd + 1) * dh);
            Tensor<S> kh = ops::slice_cols(k, hd * dh, (hd + 1) * dh);
            Tensor<S> vh = ops::slice_cols(v, hd * dh, (hd + 1) * dh);
            Tensor<S> logits = ops::scale(ops::matmul_nt(qh, kh), inv_sqrt_dh);
            Tensor<S> attn = ops::softmax_rows(logits, seq.pad_mask);
            if (trace) trace->maps.push_back(attn.values());
            ctx.push_back(ops::matmul(attn, vh));
        }
        Tensor<S> merged = heads == 1 ? ctx[0] : ops::concat_cols(ctx);
        h = ops::add(h, ops::linear(merged, blk.wo, blk.bo));
        Tensor<S> y = ops::layer_norm(h, blk.ln2_scale, blk.ln2_shift);
        Tensor<S> hidden = ops::gelu(ops::linear(y, blk.mlp_w1, blk.mlp_b1));
        h = ops::add(h, ops::linear(hidden, blk.mlp_w2, blk.mlp_b2));
    }
    if (!params.blocks.empty()) {
        h = ops::layer_norm(h, params.final_ln_scale, params.final_ln_shift);
    }

    SequenceState<S> out = seq;
    out.tokens = std::move(h);
    return out;
}

template <typename S>
struct EncoderOutputs {
    Tensor<S> h_cls;       // [1, D]
    Tensor<S> grid_reps;   // [L, D]
    Tensor<S> nuclei_reps; // [N, D]; zero rows when N = 0
};

// Drops PAD rows; CLS comes back on its own.
template <typename S>
EncoderOutputs<S> split_outputs(const SequenceState<S>& seq) {
    seq.validate();
    EncoderOutputs<S> out;
    out.h_cls = ops::slice_rows(seq.tokens, 0, 1);
    out.grid_reps = ops::slice_rows(seq.tokens, 1, 1 + seq.grid_len);
    out.nuclei_reps =
        ops::slice_rows(seq.tokens, 1 + seq.grid_len, 1 + seq.grid_len + seq.n_instances);
    return out;
}

} // namespace nmim
