#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nmim/metrics.hpp"
#include "nmim/optimizer.hpp"
#include "nmim/pipeline.hpp"

namespace nmim {

// ---------------------------------------------------------------------------
// Loss trace
// ---------------------------------------------------------------------------

struct EpochRecord {
    int epoch = 0;         // 1-based
    double loss = 0.0;     // mean per-image total loss over the epoch
    double beit_term = 0.0; // summed grid term over the epoch
    double inst_term = 0.0; // summed instance term over the epoch
};

inline nlohmann::json epoch_record_to_json(const EpochRecord& r) {
    return nlohmann::json{
        {"epoch", r.epoch}, {"loss", r.loss}, {"beit_term", r.beit_term},
        {"inst_term", r.inst_term}};
}

inline std::string trace_to_json_lines(const std::vector<EpochRecord>& trace) {
    std::ostringstream out;
    for (const auto& r : trace) out << epoch_record_to_json(r).dump() << "\n";
    return out.str();
}

inline void write_trace_file(const std::string& path, const std::vector<EpochRecord>& trace) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "write_trace_file: cannot open '", path, "'");
    out << trace_to_json_lines(trace);
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

// A dataset joins the training pool once the given epoch is reached.
struct ScheduledDataset {
    std::vector<AnnotatedSample> samples;
    int start_epoch = 1;
};

template <typename S>
struct PretrainState {
    EncoderParams<S> params;
    AdamW<S> optimizer;
    std::vector<EpochRecord> trace;
    int epochs_done = 0;
};

// Deep copy: afterwards the two parameter sets share no storage.
template <typename S>
EncoderParams<S> clone_encoder_params(const EncoderParams<S>& src) {
    EncoderParams<S> dst = src;
    dst.for_each_param([](const std::string&, Tensor<S>& t) {
        Tensor<S> copy = Tensor<S>::from_data(t.shape(), t.values(), t.requires_grad());
        t = copy;
    });
    return dst;
}

template <typename S>
bool params_bitwise_equal(const EncoderParams<S>& a, const EncoderParams<S>& b) {
    bool equal = true;
    std::vector<std::pair<std::string, const Tensor<S>*>> lhs;
    a.for_each_param([&](const std::string& name, const Tensor<S>& t) {
        lhs.emplace_back(name, &t);
    });
    size_t i = 0;
    b.for_each_param([&](const std::string& name, const Tensor<S>& t) {
        if (i >= lhs.size() || lhs[i].first != name ||
            lhs[i].second->values() != t.values()) {
            equal = false;
        }
        ++i;
    });
    return equal && i == lhs.size();
}

// Every random stream is derived statelessly from (seed, role, epoch, slot),
// so a resumed run consumes exactly the streams the uninterrupted run would.
inline Rng pretrain_epoch_stream(uint64_t seed, int epoch) {
    return Rng(seed).substream("pretrain").substream(static_cast<uint64_t>(epoch));
}

template <typename S>
EncoderParams<S> init_params_for_config(const RunConfig& cfg) {
    Rng init_rng = Rng(cfg.seed).substream("init");
    return init_encoder_params<S>(cfg.encoder_shape(), init_rng);
}

// Runs epochs resume.epochs_done+1 .. cfg.training.epochs, appending to the
// trace. Pass a default-constructed state (epochs_done = 0) for a fresh run;
// its params/optimizer fields are then initialized from the seed.
template <typename S>
PretrainState<S> pretrain(const std::vector<ScheduledDataset>& schedule, const RunConfig& cfg,
                          const Tokenizer& tok, PretrainState<S> state = {}) {
    cfg.validate();
    require(!schedule.empty(), "pretrain: empty dataset schedule");
    if (state.epochs_done == 0) {
        state.params = init_params_for_config<S>(cfg);
        state.optimizer = AdamW<S>(cfg.optimizer);
        state.trace.clear();
    }
    auto refs = collect_params(state.params);
    const int B = cfg.training.batch;
    require(B >= 1, "pretrain: batch size must be >= 1");

    for (int epoch = state.epochs_done + 1; epoch <= cfg.training.epochs; ++epoch) {
        std::vector<const AnnotatedSample*> pool;
        for (const auto& entry : schedule) {
            if (entry.start_epoch <= epoch) {
                for (const auto& s : entry.samples) pool.push_back(&s);
            }
        }
        require(!pool.empty(), "pretrain: no dataset active at epoch ", epoch,
                "; check schedule start epochs");
        const int n = static_cast<int>(pool.size());

        Rng epoch_rng = pretrain_epoch_stream(cfg.seed, epoch);
        std::vector<int> order(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
        Rng order_rng = epoch_rng.substream("order");
        order_rng.shuffle(order);

        double sum_total = 0.0, sum_beit = 0.0, sum_inst = 0.0;
        for (int start = 0; start < n; start += B) {
            const int stop = std::min(n, start + B);
            AdamW<S>::zero_grads(refs);
            double batch_total = 0.0;
            for (int pos = start; pos < stop; ++pos) {
                Rng sample_rng = epoch_rng.substream(static_cast<uint64_t>(pos));
                const AnnotatedSample& raw = *pool[static_cast<size_t>(order[static_cast<size_t>(pos)])];
                AnnotatedSample aug = augment(raw, sample_rng, cfg.augment);
                MimForward<S> fwd = mim_sample_forward(aug, state.params, cfg, tok, sample_rng);
                Tensor<S> scaled = ops::scale(fwd.loss.total, S(1) / static_cast<S>(stop - start));
                scaled.backward();
                const double total = static_cast<double>(fwd.loss.total.item());
                batch_total += total;
                sum_total += total;
                sum_beit += static_cast<double>(fwd.loss.beit_term.item());
                sum_inst += static_cast<double>(fwd.loss.inst_term.item());
            }
            require(std::isfinite(batch_total), "pretrain: non-finite loss at epoch ", epoch,
                    ", batch starting at sample ", start, " (batch sum = ", batch_total, ")");
            state.optimizer.step(refs);
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.loss = sum_total / n;
        rec.beit_term = sum_beit;
        rec.inst_term = sum_inst;
        state.trace.push_back(rec);
        state.epochs_done = epoch;
    }
    return state;
}

// ---------------------------------------------------------------------------
// Nucleus feature extraction and the linear classifier head
// ---------------------------------------------------------------------------

template <typename S>
struct NucleusTable {
    Tensor<S> feats; // [N_total, D]
    std::vector<int> labels;
    std::vector<std::string> sample_ids;
    std::vector<int> box_indices;
    bool all_labeled = true;
};

template <typename S>
NucleusTable<S> collect_nucleus_features(EncoderParams<S>& params,
                                         const std::vector<AnnotatedSample>& data,
                                         const RunConfig& cfg) {
    NucleusTable<S> out;
    std::vector<Tensor<S>> parts;
    NoGradGuard guard;
    for (const auto& sample : data) {
        EncodedNuclei<S> enc = encode_nuclei(sample, params, cfg);
        if (enc.reps.dim(0) > 0) parts.push_back(enc.reps);
        for (int i : enc.box_index) {
            const auto& box = sample.boxes[static_cast<size_t>(i)];
            out.labels.push_back(box.label.value_or(-1));
            if (!box.label.has_value()) out.all_labeled = false;
            out.sample_ids.push_back(sample.source_id);
            out.box_indices.push_back(i);
        }
    }
    if (parts.empty()) {
        out.feats = Tensor<S>::zeros({0, cfg.model.dim});
    } else if (parts.size() == 1) {
        out.feats = parts[0];
    } else {
        out.feats = ops::concat_rows(parts);
    }
    return out;
}

template <typename S>
struct LinearHead {
    Tensor<S> w; // [D, C]
    Tensor<S> b; // [C]
    std::vector<double> loss_trace; // mean cross-entropy before each step
};

// Sum over rows of class_weight[label] * cross-entropy(row); weight_total
// accumulates the matching sum of weights so callers can normalize.
template <typename S>
Tensor<S> weighted_sum_cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels,
                                     const std::vector<double>& class_weight,
                                     double* weight_total = nullptr) {
    const int n = logits.dim(0);
    std::optional<Tensor<S>> acc;
    double total = 0.0;
    for (size_t c = 0; c < class_weight.size(); ++c) {
        std::vector<int> rows;
        std::vector<int32_t> targets;
        for (int i = 0; i < n; ++i) {
            if (labels[static_cast<size_t>(i)] == static_cast<int>(c)) {
                rows.push_back(i);
                targets.push_back(static_cast<int32_t>(c));
            }
        }
        if (rows.empty()) continue;
        Tensor<S> term = ops::scale(
            ops::cross_entropy_sum(ops::gather_rows(logits, rows), targets),
            static_cast<S>(class_weight[c]));
        acc = acc.has_value() ? ops::add(*acc, term) : term;
        total += class_weight[c] * static_cast<double>(rows.size());
    }
    require(acc.has_value(), "weighted_sum_cross_entropy: no labeled rows");
    if (weight_total != nullptr) *weight_total = total;
    return *acc;
}

template <typename S>
Tensor<S> weighted_mean_cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels,
                                      const std::vector<double>& class_weight) {
    double weight_total = 0.0;
    Tensor<S> sum = weighted_sum_cross_entropy(logits, labels, class_weight, &weight_total);
    return ops::scale(sum, static_cast<S>(1.0 / weight_total));
}

// Full-batch training of a C-way affine classifier on fixed features.
// Weights start at zero, so the first recorded loss is exactly ln C.
template <typename S>
LinearHead<S> train_linear_head(const Tensor<S>& feats, const std::vector<int>& labels,
                                int num_classes, int epochs, double lr,
                                const std::vector<double>& class_weight = {}) {
    const int n = feats.dim(0);
    const int D = feats.dim(1);
    require(n == static_cast<int>(labels.size()), "train_linear_head: ", n, " feature rows vs ",
            labels.size(), " labels");
    require(n > 0, "train_linear_head: no training rows");
    require(num_classes >= 1, "train_linear_head: need at least one class");

    LinearHead<S> head;
    head.w = Tensor<S>::zeros({D, num_classes}, true);
    head.b = Tensor<S>::zeros({num_classes}, true);
    std::vector<ParamRef<S>> refs{{"head.w", head.w}, {"head.b", head.b}};

    OptimizerConfig ocfg;
    ocfg.lr = lr;
    ocfg.weight_decay = 0.0;
    AdamW<S> opt(ocfg);

    std::vector<int32_t> targets(labels.size());
    for (size_t i = 0; i < labels.size(); ++i) {
        require(labels[i] >= 0 && labels[i] < num_classes, "train_linear_head: label ",
                labels[i], " outside [0,", num_classes, ")");
        targets[i] = static_cast<int32_t>(labels[i]);
    }

    for (int e = 0; e < epochs; ++e) {
        AdamW<S>::zero_grads(refs);
        Tensor<S> logits = ops::linear(feats, head.w, head.b);
        Tensor<S> loss = class_weight.empty()
                             ? ops::scale(ops::cross_entropy_sum(logits, targets),
                                          S(1) / static_cast<S>(n))
                             : weighted_mean_cross_entropy(logits, labels, class_weight);
        loss.backward();
        head.loss_trace.push_back(static_cast<double>(loss.item()));
        opt.step(refs);
    }
    return head;
}

template <typename S>
std::vector<int> predict_classes(const Tensor<S>& feats, const LinearHead<S>& head) {
    NoGradGuard guard;
    Tensor<S> logits = ops::linear(feats, head.w, head.b);
    const int n = logits.dim(0), C = logits.dim(1);
    std::vector<int> preds(static_cast<size_t>(n), 0);
    const auto& v = logits.values();
    for (int i = 0; i < n; ++i) {
        int best = 0;
        for (int c = 1; c < C; ++c) {
            if (v[static_cast<size_t>(i * C + c)] > v[static_cast<size_t>(i * C + best)]) best = c;
        }
        preds[static_cast<size_t>(i)] = best;
    }
    return preds;
}

inline std::vector<double> inverse_frequency_weights(const std::vector<int>& labels,
                                                     int num_classes) {
    std::vector<double> counts(static_cast<size_t>(num_classes), 0.0);
    for (int l : labels) counts[static_cast<size_t>(l)] += 1.0;
    std::vector<double> w(static_cast<size_t>(num_classes), 0.0);
    for (int c = 0; c < num_classes; ++c) {
        if (counts[static_cast<size_t>(c)] > 0.0) {
            w[static_cast<size_t>(c)] =
                static_cast<double>(labels.size()) / (num_classes * counts[static_cast<size_t>(c)]);
        }
    }
    return w;
}

inline int deduce_num_classes(const std::vector<int>& a, const std::vector<int>& b) {
    int top = -1;
    for (int l : a) top = std::max(top, l);
    for (int l : b) top = std::max(top, l);
    return top + 1;
}

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

template <typename S>
struct ProbeResult {
    Metrics metrics;
    LinearHead<S> head;
    int num_classes = 0;
};

template <typename S>
ProbeResult<S> linear_probe(EncoderParams<S>& params,
                            const std::vector<AnnotatedSample>& train_set,
                            const std::vector<AnnotatedSample>& eval_set, const RunConfig& cfg) {
    NucleusTable<S> train_tab = collect_nucleus_features(params, train_set, cfg);
    NucleusTable<S> eval_tab = collect_nucleus_features(params, eval_set, cfg);
    require(train_tab.all_labeled && !train_tab.labels.empty(),
            "linear_probe: training dataset without labels");
    require(eval_tab.all_labeled && !eval_tab.labels.empty(),
            "linear_probe: evaluation dataset without labels");
    const int C = deduce_num_classes(train_tab.labels, eval_tab.labels);

    std::vector<double> weights;
    if (cfg.training.class_weights) {
        weights = inverse_frequency_weights(train_tab.labels, C);
    }
    ProbeResult<S> out;
    out.num_classes = C;
    out.head = train_linear_head(train_tab.feats, train_tab.labels, C,
                                 cfg.training.probe_epochs, cfg.training.probe_lr, weights);
    std::vector<int> preds = predict_classes(eval_tab.feats, out.head);
    out.metrics = evaluate_metrics(preds, eval_tab.labels, C);
    out.metrics.train_loss_trace = out.head.loss_trace;
    return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

template <typename S>
struct FinetuneResult {
    Metrics metrics;
    EncoderParams<S> params;
    LinearHead<S> head;
    int num_classes = 0;
};

// Two stages: fit the classifier on frozen features first, then unfreeze the
// whole encoder (token-prediction heads dropped) and train jointly at a lower
// learning rate. Loss per batch is the mean cross-entropy over its nuclei.
template <typename S>
FinetuneResult<S> finetune_classifier(const EncoderParams<S>& pretrained,
                                      const std::vector<AnnotatedSample>& train_set,
                                      const std::vector<AnnotatedSample>& eval_set,
                                      const RunConfig& cfg) {
    FinetuneResult<S> out;
    out.params = clone_encoder_params(pretrained);

    NucleusTable<S> train_tab = collect_nucleus_features(out.params, train_set, cfg);
    require(train_tab.all_labeled && !train_tab.labels.empty(),
            "finetune_classifier: training dataset without labels");
    {
        NucleusTable<S> probe_eval = collect_nucleus_features(out.params, eval_set, cfg);
        require(probe_eval.all_labeled && !probe_eval.labels.empty(),
                "finetune_classifier: evaluation dataset without labels");
        out.num_classes = deduce_num_classes(train_tab.labels, probe_eval.labels);
    }
    std::vector<double> weights;
    if (cfg.training.class_weights) {
        weights = inverse_frequency_weights(train_tab.labels, out.num_classes);
    }
    out.head = train_linear_head(train_tab.feats, train_tab.labels, out.num_classes,
                                 cfg.training.probe_epochs, cfg.training.probe_lr, weights);

    std::vector<ParamRef<S>> refs;
    for (auto& r : collect_params(out.params)) {
        const bool mim_head = r.name.rfind("grid_head", 0) == 0 || r.name.rfind("inst_head", 0) == 0;
        if (!mim_head) refs.push_back(r);
    }
    refs.push_back({"classifier.w", out.head.w});
    refs.push_back({"classifier.b", out.head.b});

    OptimizerConfig ocfg = cfg.optimizer;
    ocfg.lr = cfg.training.finetune_lr;
    ocfg.warmup_steps = 0;
    AdamW<S> opt(ocfg);

    const int n = static_cast<int>(train_set.size());
    const int B = std::max(1, cfg.training.finetune_batch);
    std::vector<double> loss_trace;
    for (int epoch = 1; epoch <= cfg.training.finetune_epochs; ++epoch) {
        Rng epoch_rng = Rng(cfg.seed).substream("finetune").substream(static_cast<uint64_t>(epoch));
        std::vector<int> order(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
        epoch_rng.shuffle(order);

        double epoch_loss = 0.0;
        double epoch_weight = 0.0;
        for (int start = 0; start < n; start += B) {
            const int stop = std::min(n, start + B);
            double batch_weight = 0.0; // plain nucleus count unless reweighting is on
            for (int pos = start; pos < stop; ++pos) {
                const auto& boxes = train_set[static_cast<size_t>(order[static_cast<size_t>(pos)])].boxes;
                for (const auto& box : boxes) {
                    require(box.label.has_value(), "finetune_classifier: unlabeled box in '",
                            train_set[static_cast<size_t>(order[static_cast<size_t>(pos)])].source_id,
                            "'");
                    batch_weight += weights.empty() ? 1.0 : weights[static_cast<size_t>(*box.label)];
                }
            }
            if (batch_weight <= 0.0) continue; // images without nuclei contribute nothing
            AdamW<S>::zero_grads(refs);
            double batch_loss = 0.0;
            for (int pos = start; pos < stop; ++pos) {
                const AnnotatedSample& sample = train_set[static_cast<size_t>(order[static_cast<size_t>(pos)])];
                if (sample.boxes.empty()) continue;
                EncodedNuclei<S> enc = encode_nuclei(sample, out.params, cfg);
                std::vector<int32_t> targets;
                std::vector<int> labels;
                for (int i : enc.box_index) {
                    const auto& box = sample.boxes[static_cast<size_t>(i)];
                    targets.push_back(static_cast<int32_t>(*box.label));
                    labels.push_back(*box.label);
                }
                Tensor<S> logits = ops::linear(enc.reps, out.head.w, out.head.b);
                Tensor<S> ce = weights.empty()
                                   ? ops::cross_entropy_sum(logits, targets)
                                   : weighted_sum_cross_entropy(logits, labels, weights);
                Tensor<S> loss = ops::scale(ce, static_cast<S>(1.0 / batch_weight));
                loss.backward();
                batch_loss += static_cast<double>(loss.item());
            }
            require(std::isfinite(batch_loss), "finetune_classifier: non-finite loss at epoch ",
                    epoch, ", batch starting at image ", start);
            opt.step(refs);
            epoch_loss += batch_loss * batch_weight;
            epoch_weight += batch_weight;
        }
        if (epoch_weight > 0.0) loss_trace.push_back(epoch_loss / epoch_weight);
    }

    NucleusTable<S> eval_tab = collect_nucleus_features(out.params, eval_set, cfg);
    std::vector<int> preds = predict_classes(eval_tab.feats, out.head);
    out.metrics = evaluate_metrics(preds, eval_tab.labels, out.num_classes);
    out.metrics.train_loss_trace = std::move(loss_trace);
    return out;
}

// ---------------------------------------------------------------------------
// Instance-term ablation
// ---------------------------------------------------------------------------

struct AblationSeedRow {
    uint64_t seed = 0;
    double with_accuracy = 0.0;
    double with_macro_f1 = 0.0;
    double without_accuracy = 0.0;
    double without_macro_f1 = 0.0;
    bool init_identical = false;
};

struct AblationReport {
    std::vector<AblationSeedRow> rows;
    double mean_with = 0.0;
    double mean_without = 0.0;
    double delta = 0.0;
};

inline nlohmann::json ablation_report_to_json(const AblationReport& r) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : r.rows) {
        rows.push_back({{"seed", row.seed},
                        {"with_accuracy", row.with_accuracy},
                        {"with_macro_f1", row.with_macro_f1},
                        {"without_accuracy", row.without_accuracy},
                        {"without_macro_f1", row.without_macro_f1},
                        {"init_identical", row.init_identical}});
    }
    return nlohmann::json{{"rows", rows},
                          {"mean_with", r.mean_with},
                          {"mean_without", r.mean_without},
                          {"delta", r.delta}};
}

inline AblationReport ablation_report_from_json(const nlohmann::json& j) {
    AblationReport r;
    for (const auto& row : j.at("rows")) {
        AblationSeedRow s;
        s.seed = row.at("seed").get<uint64_t>();
        s.with_accuracy = row.at("with_accuracy").get<double>();
        s.with_macro_f1 = row.at("with_macro_f1").get<double>();
        s.without_accuracy = row.at("without_accuracy").get<double>();
        s.without_macro_f1 = row.at("without_macro_f1").get<double>();
        s.init_identical = row.at("init_identical").get<bool>();
        r.rows.push_back(s);
    }
    r.mean_with = j.at("mean_with").get<double>();
    r.mean_without = j.at("mean_without").get<double>();
    r.delta = j.at("delta").get<double>();
    return r;
}

// Per seed: two pretraining runs identical except for the instance-term
// switch, each followed by a linear probe on the same labeled split.
template <typename S>
AblationReport ablation_compare(const RunConfig& base, const std::vector<uint64_t>& seeds,
                                const std::vector<ScheduledDataset>& pretrain_data,
                                const std::vector<AnnotatedSample>& probe_train,
                                const std::vector<AnnotatedSample>& probe_eval,
                                const Tokenizer& tok,
                                std::vector<EncoderParams<S>>* with_params_out = nullptr) {
    require(!seeds.empty(), "ablation_compare: need at least one seed");
    AblationReport report;
    for (uint64_t seed : seeds) {
        RunConfig cfg_with = base;
        cfg_with.seed = seed;
        cfg_with.training.instance_term = true;
        RunConfig cfg_without = cfg_with;
        cfg_without.training.instance_term = false;

        AblationSeedRow row;
        row.seed = seed;
        {
            EncoderParams<S> a = init_params_for_config<S>(cfg_with);
            EncoderParams<S> b = init_params_for_config<S>(cfg_without);
            row.init_identical = params_bitwise_equal(a, b);
        }
        PretrainState<S> arm_with = pretrain<S>(pretrain_data, cfg_with, tok);
        PretrainState<S> arm_without = pretrain<S>(pretrain_data, cfg_without, tok);
        ProbeResult<S> probe_with = linear_probe(arm_with.params, probe_train, probe_eval, cfg_with);
        ProbeResult<S> probe_without =
            linear_probe(arm_without.params, probe_train, probe_eval, cfg_without);

        row.with_accuracy = probe_with.metrics.accuracy;
        row.with_macro_f1 = probe_with.metrics.macro_f1;
        row.without_accuracy = probe_without.metrics.accuracy;
        row.without_macro_f1 = probe_without.metrics.macro_f1;
        report.rows.push_back(row);
        if (with_params_out != nullptr) {
            with_params_out->push_back(std::move(arm_with.params));
        }
        report.mean_with += row.with_accuracy;
        report.mean_without += row.without_accuracy;
    }
    report.mean_with /= static_cast<double>(seeds.size());
    report.mean_without /= static_cast<double>(seeds.size());
    report.delta = report.mean_with - report.mean_without;
    return report;
}

// ---------------------------------------------------------------------------
// Exports
// ---------------------------------------------------------------------------

inline std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// CSV with one row per nucleus in dataset order; the label column is left
// empty for unlabeled boxes. Reruns on the same inputs are byte-identical.
template <typename S>
void export_embeddings(EncoderParams<S>& params, const std::vector<AnnotatedSample>& data,
                       const RunConfig& cfg, std::ostream& out) {
    const int D = cfg.model.dim;
    out << "sample_id,box_index,label";
    for (int d = 0; d < D; ++d) out << ",e" << d;
    out << "\n";
    NucleusTable<S> tab = collect_nucleus_features(params, data, cfg);
    const auto& v = tab.feats.values();
    for (size_t row = 0; row < tab.box_indices.size(); ++row) {
        out << tab.sample_ids[row] << "," << tab.box_indices[row] << ",";
        if (tab.labels[row] >= 0) out << tab.labels[row];
        for (int d = 0; d < D; ++d) {
            out << "," << format_real(static_cast<double>(v[row * static_cast<size_t>(D) +
                                                            static_cast<size_t>(d)]));
        }
        out << "\n";
    }
}

enum class AttnQueryKind { Cls, Grid, Instance };

struct AttentionQuery {
    AttnQueryKind kind = AttnQueryKind::Cls;
    int index = 0; // grid cell or instance index; ignored for CLS
};

struct AttentionMapExport {
    int grid_h = 0;
    int grid_w = 0;
    double cls_weight = 0.0;
    std::vector<double> grid;      // length grid_h*grid_w, row-major
    std::vector<double> instances; // length = number of boxes in the sequence
};

// One post-softmax attention row of an unmasked forward pass, split into its
// CLS / grid / instance parts. PAD columns carry exactly zero weight and are
// dropped, so the returned weights still sum to 1.
template <typename S>
AttentionMapExport export_attention(EncoderParams<S>& params, const AnnotatedSample& sample,
                                    const RunConfig& cfg, int layer, int head,
                                    const AttentionQuery& query) {
    require(layer >= 0 && layer < cfg.model.layers, "export_attention: layer ", layer,
            " outside [0,", cfg.model.layers, ")");
    require(head >= 0 && head < cfg.model.heads, "export_attention: head ", head, " outside [0,",
            cfg.model.heads, ")");
    const int L = cfg.grid_len();
    const std::vector<NucleusBox> boxes = budgeted_boxes(sample.boxes, cfg.model.n_max);
    const int N = static_cast<int>(boxes.size());

    int row = 0;
    switch (query.kind) {
    case AttnQueryKind::Cls:
        row = 0;
        break;
    case AttnQueryKind::Grid:
        require(query.index >= 0 && query.index < L, "export_attention: grid index ",
                query.index, " outside [0,", L, ")");
        row = 1 + query.index;
        break;
    case AttnQueryKind::Instance:
        require(query.index >= 0 && query.index < N, "export_attention: instance index ",
                query.index, " outside [0,", N, ")");
        row = 1 + L + query.index;
        break;
    }

    NoGradGuard guard;
    AttentionTrace<S> trace;
    forward_sequence(sample.image, boxes, params, cfg, nullptr, &trace);
    const std::vector<S>& v = trace.map(layer, head);
    const int T = trace.seq_len;
    auto at = [&](int col) {
        return static_cast<double>(v[static_cast<size_t>(row) * static_cast<size_t>(T) +
                                     static_cast<size_t>(col)]);
    };

    AttentionMapExport out;
    out.grid_h = cfg.grid_edge();
    out.grid_w = cfg.grid_edge();
    out.cls_weight = at(0);
    for (int i = 0; i < L; ++i) out.grid.push_back(at(1 + i));
    for (int j = 0; j < N; ++j) out.instances.push_back(at(1 + L + j));
    return out;
}

} // namespace nmim
