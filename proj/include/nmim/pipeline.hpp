#pragma once

#include <algorithm>
#include <vector>

#include "nmim/augment.hpp"
#include "nmim/config.hpp"
#include "nmim/encoder.hpp"
#include "nmim/gradcheck.hpp"
#include "nmim/masking.hpp"
#include "nmim/objective.hpp"
#include "nmim/patching.hpp"
#include "nmim/positional.hpp"
#include "nmim/roi.hpp"
#include "nmim/tokenizer.hpp"

namespace nmim {

// Per-sample forward pass shared by pretraining, probing, and the exports:
// normalize, embed the patch grid, optionally mask it, pool instance features
// from the (masked) map, assemble the sequence with positions, and encode.
template <typename S>
SequenceState<S> forward_sequence(const Image& image, const std::vector<NucleusBox>& boxes,
                                  EncoderParams<S>& params, const RunConfig& cfg,
                                  const MaskSet* mask, AttentionTrace<S>* trace = nullptr) {
    require(image.h == cfg.model.image_size && image.w == cfg.model.image_size,
            "forward_sequence: image ", image.h, "x", image.w, " vs configured size ",
            cfg.model.image_size);
    require(static_cast<int>(boxes.size()) <= cfg.model.n_max,
            "forward_sequence: ", boxes.size(), " boxes exceed N_max ", cfg.model.n_max);
    const int P = cfg.model.patch;
    const int gh = cfg.grid_edge(), gw = cfg.grid_edge();

    const Image norm = normalize_image(image, imagenet_mean(), imagenet_std());
    Tensor<S> patches = split_grid<S>(norm, P);
    FeatureMap<S> c = embed_grid(patches, gh, gw, params.patch_proj_w, params.patch_proj_b);
    if (mask != nullptr) {
        c = apply_mask(c, *mask, params.mask_embed);
    }

    std::vector<Tensor<S>> instances;
    std::vector<PatchGeometry> geoms = grid_geometries(gh, gw);
    for (const auto& box : boxes) {
        Tensor<S> pooled = roi_align(c, box, P, cfg.model.k, cfg.model.samples_per_bin);
        instances.push_back(embed_instance(pooled, cfg.model.k, params.inst_kernel,
                                           params.inst_bias));
        geoms.push_back(box_geometry(box, image.w, image.h));
    }

    SequenceState<S> seq = assemble_sequence(c, instances, cfg.model.n_max, params.cls_embed,
                                             params.pad_embed, std::move(geoms));
    seq.tokens = add_positions(seq.tokens, seq.geometry, params.cls_pos);
    return encoder_forward(seq, params, trace);
}

template <typename S>
struct MimForward {
    MimLoss<S> loss;
    int n_masked = 0;
    int n_boxes = 0;
    int n_masked_instances = 0;
};

// Keeps the first N_max boxes when an image carries more.
inline std::vector<NucleusBox> budgeted_boxes(const std::vector<NucleusBox>& boxes, int n_max) {
    if (static_cast<int>(boxes.size()) <= n_max) return boxes;
    return std::vector<NucleusBox>(boxes.begin(), boxes.begin() + n_max);
}

// Masked-token prediction loss for one (already augmented) sample, with the
// mask supplied by the caller. Useful when the same mask must be replayed,
// e.g. for finite-difference gradient probes.
template <typename S>
MimForward<S> mim_forward_with_mask(const AnnotatedSample& sample, EncoderParams<S>& params,
                                    const RunConfig& cfg, const Tokenizer& tok,
                                    const MaskSet& mask) {
    const int P = cfg.model.patch;
    const int gh = cfg.grid_edge(), gw = cfg.grid_edge();
    const std::vector<NucleusBox> boxes = budgeted_boxes(sample.boxes, cfg.model.n_max);

    SequenceState<S> state = forward_sequence(sample.image, boxes, params, cfg, &mask);
    EncoderOutputs<S> parts = split_outputs(state);

    MimTargets targets;
    targets.grid_tokens = tokenize_image(sample.image, gh, gw, tok);
    targets.mask_set = mask;
    targets.masked_instances = masked_instance_set(boxes, mask, gh, gw, P);
    for (int j : targets.masked_instances) {
        targets.instance_tokens.push_back(
            tokenize_instance(sample.image, boxes[static_cast<size_t>(j)], tok, cfg.model.t));
    }
    targets.validate(cfg.grid_len(), cfg.model.vocab, cfg.model.t);

    Tensor<S> grid_logits = grid_head(ops::gather_rows(parts.grid_reps, mask.indices),
                                      params.grid_head_w, params.grid_head_b);
    Tensor<S> inst_logits =
        instance_head(ops::gather_rows(parts.nuclei_reps, targets.masked_instances),
                      params.inst_head_w, params.inst_head_b, cfg.model.t, cfg.model.vocab);

    const S lambda = cfg.training.instance_term ? static_cast<S>(cfg.training.lambda_inst)
                                                : S(0);
    MimForward<S> out;
    out.loss = mim_loss(grid_logits, inst_logits, targets, lambda);
    out.n_masked = mask.size();
    out.n_boxes = static_cast<int>(boxes.size());
    out.n_masked_instances = static_cast<int>(targets.masked_instances.size());
    return out;
}

// Masked-token prediction loss for one (already augmented) sample, drawing a
// fresh blockwise mask from the caller's stream.
template <typename S>
MimForward<S> mim_sample_forward(const AnnotatedSample& sample, EncoderParams<S>& params,
                                 const RunConfig& cfg, const Tokenizer& tok, Rng& rng) {
    MaskSet mask = blockwise_mask(cfg.grid_edge(), cfg.grid_edge(), cfg.masking.ratio,
                                  cfg.masking.min_block, cfg.masking.max_block, rng);
    return mim_forward_with_mask(sample, params, cfg, tok, mask);
}

template <typename S>
struct EncodedNuclei {
    Tensor<S> reps;             // [N_total, D], one row per box in order
    std::vector<int> box_index; // original index of each row's box
};

// Unmasked nuclei representations for every box of the sample. Boxes beyond
// the sequence budget are handled in further passes of N_max at a time.
template <typename S>
EncodedNuclei<S> encode_nuclei(const AnnotatedSample& sample, EncoderParams<S>& params,
                               const RunConfig& cfg) {
    EncodedNuclei<S> out;
    const int n = static_cast<int>(sample.boxes.size());
    const int chunk = std::max(1, cfg.model.n_max);
    std::vector<Tensor<S>> rep_parts;
    for (int start = 0; start < n; start += chunk) {
        const int stop = std::min(n, start + chunk);
        std::vector<NucleusBox> boxes(sample.boxes.begin() + start,
                                      sample.boxes.begin() + stop);
        SequenceState<S> state = forward_sequence(sample.image, boxes, params, cfg, nullptr);
        rep_parts.push_back(split_outputs(state).nuclei_reps);
        for (int i = start; i < stop; ++i) out.box_index.push_back(i);
    }
    if (rep_parts.empty()) {
        out.reps = Tensor<S>::zeros({0, cfg.model.dim});
    } else if (rep_parts.size() == 1) {
        out.reps = rep_parts[0];
    } else {
        out.reps = ops::concat_rows(rep_parts);
    }
    return out;
}

struct PipelineGradReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    int params_checked = 0;
    int coords_per_param = 0;
};

// Finite-difference check of the analytic gradient through the whole
// training path: patch embedding, masking, instance pooling, the encoder,
// both prediction heads, and the combined loss. Each parameter tensor is
// probed at a few random coordinates against central differences on the
// scalar loss; the mask is fixed up front so every evaluation sees the same
// objective. Double precision only, since the difference quotient needs it.
inline PipelineGradReport pipeline_grad_check(const AnnotatedSample& sample,
                                              const RunConfig& cfg, const Tokenizer& tok,
                                              int coords_per_param, double fd_eps,
                                              uint64_t seed) {
    require(coords_per_param > 0, "pipeline_grad_check: coords_per_param must be positive, got ",
            coords_per_param);
    Rng init_rng = Rng(cfg.seed).substream("init");
    EncoderParams<double> params =
        init_encoder_params<double>(cfg.encoder_shape(), init_rng);

    Rng mask_rng = Rng(seed).substream("gradcheck-mask");
    const MaskSet mask = blockwise_mask(cfg.grid_edge(), cfg.grid_edge(), cfg.masking.ratio,
                                        cfg.masking.min_block, cfg.masking.max_block, mask_rng);

    PipelineGradReport rep;
    rep.coords_per_param = coords_per_param;
    params.for_each_param([&](const std::string& name, Tensor<double>& slot) {
        const Tensor<double> original = slot;
        auto loss_of = [&](const Tensor<double>& probe) {
            slot = probe;
            return mim_forward_with_mask(sample, params, cfg, tok, mask).loss.total;
        };
        const double err = grad_check(loss_of, original, fd_eps, coords_per_param,
                                      seed + static_cast<uint64_t>(rep.params_checked));
        slot = original;
        if (err > rep.max_rel_error) {
            rep.max_rel_error = err;
            rep.worst_param = name;
        }
        ++rep.params_checked;
    });
    return rep;
}

} // namespace nmim
