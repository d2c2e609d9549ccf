// Command-line workbench around the nuclei masked-image-modelling library:
// synthetic data generation, tokenizer training, pretraining, linear probing,
// fine-tuning, evaluation, the instance-term ablation, embedding/attention
// exports, and a full-pipeline gradient check.
//
// Every subcommand reads one JSON config (--config), and commands that write
// files take a run directory (--out) that receives the resolved config, a
// lock file for the duration of the run, and the command's outputs. Each
// command finishes by printing a one-line JSON summary on stdout.
//
// Exit codes: 0 success, 1 runtime/config error (message on stderr),
// 2 usage error.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "nmim/checkpoint.hpp"
#include "nmim/pipeline.hpp"
#include "nmim/synthetic.hpp"
#include "nmim/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nmim;

namespace {

// ---------------------------------------------------------------------------
// Run directory plumbing
// ---------------------------------------------------------------------------

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    require(out.good(), "cannot write ", path);
}

// Creates the directory, refuses to share it with a live run, and removes
// the lock when the run ends (including on error unwinding).
struct RunDir {
    std::string path;
    std::string lock_path;

    explicit RunDir(const std::string& p) : path(p), lock_path(p + "/.lock") {
        require(!path.empty(), "--out must not be empty");
        fs::create_directories(path);
        require(!fs::exists(lock_path), "run directory ", path,
                " is locked by another run; remove ", lock_path, " if that run is gone");
        write_text(lock_path, "locked\n");
    }
    RunDir(const RunDir&) = delete;
    RunDir& operator=(const RunDir&) = delete;
    ~RunDir() {
        std::error_code ec;
        fs::remove(lock_path, ec);
    }

    std::string file(const std::string& name) const { return path + "/" + name; }
};

void write_resolved_config(const RunDir& rd, const RunConfig& cfg) {
    write_text(rd.file("config.json"), config_to_json(cfg).dump(2) + "\n");
}

void print_summary(const json& j) { std::cout << j.dump() << std::endl; }

// ---------------------------------------------------------------------------
// Shared options
// ---------------------------------------------------------------------------

struct Common {
    std::string config_path;
    std::string out;
    uint64_t seed = 0;
    CLI::Option* seed_opt = nullptr;
};

void add_common(CLI::App* cmd, Common& c, bool needs_out) {
    cmd->add_option("--config", c.config_path, "run configuration (JSON file)")->required();
    c.seed_opt = cmd->add_option("--seed", c.seed, "override the config's seed");
    if (needs_out) {
        cmd->add_option("--out", c.out, "run directory for outputs")->required();
    }
}

RunConfig resolve_config(const Common& c) {
    RunConfig cfg = load_run_config(c.config_path);
    if (c.seed_opt != nullptr && c.seed_opt->count() > 0) {
        cfg.seed = c.seed;
    }
    cfg.validate();
    return cfg;
}

// Dispatch on the configured arithmetic precision.
template <typename F>
int with_precision(const std::string& precision, F&& fn) {
    if (precision == "f32") return fn(static_cast<float*>(nullptr));
    return fn(static_cast<double*>(nullptr));
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

std::string join_under(const std::string& root, const std::string& rel) {
    fs::path p(rel);
    if (p.is_absolute()) return rel;
    return (fs::path(root) / p).string();
}

std::vector<AnnotatedSample> load_split(const RunConfig& cfg, const std::string& split) {
    require(!cfg.data.root.empty(), "config field data.root: required by this command");
    return load_dataset(cfg.data.root, split);
}

// Training pool: the train split joins at epoch 1; schedule entries (paths
// relative to the dataset root) join at their configured epochs.
std::vector<ScheduledDataset> load_training_schedule(const RunConfig& cfg) {
    require(!cfg.data.root.empty(), "config field data.root: required by this command");
    std::vector<ScheduledDataset> out;
    out.push_back({load_dataset(cfg.data.root, cfg.data.train_split), 1});
    for (const auto& e : cfg.data.schedule) {
        out.push_back({load_dataset(join_under(cfg.data.root, e.path)), e.start_epoch});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Classifier persistence (bridges probe/finetune to eval)
// ---------------------------------------------------------------------------

template <typename S>
void save_classifier(const std::string& path, const LinearHead<S>& head, int num_classes,
                     int dim) {
    json j{{"num_classes", num_classes},
           {"dim", dim},
           {"w", std::vector<double>(head.w.values().begin(), head.w.values().end())},
           {"b", std::vector<double>(head.b.values().begin(), head.b.values().end())}};
    write_text(path, j.dump(2) + "\n");
}

template <typename S>
LinearHead<S> load_classifier(const std::string& path, int expect_dim, int* num_classes_out) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "cannot open classifier file '", path, "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        fail("classifier file '", path, "' is not valid JSON: ", e.what());
    }
    const int C = j.at("num_classes").get<int>();
    const int D = j.at("dim").get<int>();
    require(C >= 1, "classifier file '", path, "' declares ", C, " classes");
    require(D == expect_dim, "classifier at '", path, "' was trained for dimension ", D,
            " but the config's model dimension is ", expect_dim);
    std::vector<double> w = j.at("w").get<std::vector<double>>();
    std::vector<double> b = j.at("b").get<std::vector<double>>();
    require(w.size() == static_cast<size_t>(D) * static_cast<size_t>(C),
            "classifier at '", path, "': weight count ", w.size(), " does not match ", D, "x", C);
    require(b.size() == static_cast<size_t>(C), "classifier at '", path, "': bias count ",
            b.size(), " does not match ", C, " classes");
    LinearHead<S> head;
    head.w = Tensor<S>::from_data({D, C}, std::vector<S>(w.begin(), w.end()), false);
    head.b = Tensor<S>::from_data({C}, std::vector<S>(b.begin(), b.end()), false);
    if (num_classes_out != nullptr) *num_classes_out = C;
    return head;
}

void require_same_model(const RunConfig& cfg, const RunConfig& ckpt_cfg,
                        const std::string& ckpt_dir) {
    if (config_to_json(cfg).at("model") != config_to_json(ckpt_cfg).at("model")) {
        fail("checkpoint ", ckpt_dir,
             " was written with a different model section than the given config");
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

SyntheticConfig synthetic_base(const RunConfig& cfg, int num_classes) {
    SyntheticConfig sc;
    sc.image_size = cfg.model.image_size;
    sc.num_classes = num_classes;
    sc.nuclei_max = std::max(1, std::min(8, cfg.model.n_max));
    sc.nuclei_min = std::min(3, sc.nuclei_max);
    sc.radius_max = std::min(6.0, static_cast<double>(cfg.model.image_size) / 8.0);
    sc.radius_min = std::min(3.0, sc.radius_max);
    return sc;
}

int run_gen_data(const Common& c, int images, int eval_images, int classes) {
    RunConfig cfg = resolve_config(c);
    RunDir rd(c.out);
    write_resolved_config(rd, cfg);

    SyntheticConfig sc = synthetic_base(cfg, classes);
    sc.num_images = images;
    SyntheticDataset train = generate_synthetic(sc, Rng(cfg.seed).substream("gen-data-train"));
    sc.num_images = eval_images;
    SyntheticDataset eval = generate_synthetic(sc, Rng(cfg.seed).substream("gen-data-eval"));

    const std::string train_dir = rd.file(cfg.data.train_split.empty() ? "train"
                                                                       : cfg.data.train_split);
    const std::string eval_dir = rd.file(cfg.data.eval_split.empty() ? "test"
                                                                     : cfg.data.eval_split);
    write_synthetic_dataset(train_dir, train, cfg.seed);
    write_synthetic_dataset(eval_dir, eval, cfg.seed);

    print_summary({{"subcommand", "gen-data"},
                   {"train_images", images},
                   {"eval_images", eval_images},
                   {"classes", classes},
                   {"train_dir", train_dir},
                   {"eval_dir", eval_dir}});
    return 0;
}

int run_train_tokenizer(const Common& c, int max_cells) {
    RunConfig cfg = resolve_config(c);
    RunDir rd(c.out);
    write_resolved_config(rd, cfg);

    const std::vector<AnnotatedSample> data = load_split(cfg, cfg.data.train_split);
    require(!data.empty(), "train-tokenizer: the training split is empty");
    const int cell_px = cfg.tokenizer_cell_px();

    std::vector<std::vector<float>> cells;
    for (const auto& s : data) {
        collect_codebook_cells(s.image, cfg.grid_edge(), cfg.grid_edge(), cell_px, cells);
    }
    if (static_cast<int>(cells.size()) > max_cells) {
        Rng pick = Rng(cfg.seed).substream("tokenizer-cells");
        pick.shuffle(cells);
        cells.resize(static_cast<size_t>(max_cells));
    }

    Rng km_rng = Rng(cfg.seed).substream("tokenizer-kmeans");
    Codebook cb = train_vq_codebook(cells, cfg.model.vocab, cfg.tokenizer.train_iterations,
                                    km_rng);
    const std::string cb_path = rd.file("codebook.json");
    save_codebook(cb, cell_px, cb_path);

    json summary{{"subcommand", "train-tokenizer"},
                 {"vocab", cb.vocab},
                 {"cells", cells.size()},
                 {"iterations_run", cb.iterations_run},
                 {"codebook", cb_path}};
    if (!cb.inertia_trace.empty()) summary["final_inertia"] = cb.inertia_trace.back();
    print_summary(summary);
    return 0;
}

int run_pretrain(const Common& c, const std::string& resume) {
    RunConfig cfg = resolve_config(c);
    RunDir rd(c.out);
    write_resolved_config(rd, cfg);

    return with_precision(cfg.precision, [&](auto* tag) -> int {
        using S = std::remove_pointer_t<decltype(tag)>;
        Tokenizer tok = build_tokenizer(cfg);
        std::vector<ScheduledDataset> schedule = load_training_schedule(cfg);

        PretrainState<S> state;
        if (!resume.empty()) {
            LoadedCheckpoint<S> lc = load_checkpoint<S>(resume);
            require_same_model(cfg, lc.config, resume);
            require(lc.has_train_state, "checkpoint ", resume,
                    " carries no training state to resume from");
            state = to_pretrain_state(std::move(lc));
        }
        state = pretrain<S>(schedule, cfg, tok, std::move(state));

        write_trace_file(rd.file("trace.jsonl"), state.trace);
        const std::string ckpt_dir = rd.file("checkpoint");
        save_checkpoint(state, cfg, ckpt_dir);

        json summary{{"subcommand", "pretrain"},
                     {"epochs_done", state.epochs_done},
                     {"checkpoint", ckpt_dir},
                     {"trace", rd.file("trace.jsonl")}};
        if (!state.trace.empty()) {
            summary["first_loss"] = state.trace.front().loss;
            summary["final_loss"] = state.trace.back().loss;
        }
        print_summary(summary);
        return 0;
    });
}

int run_probe(const Common& c, const std::string& checkpoint) {
    RunConfig cfg = resolve_config(c);
    RunDir rd(c.out);
    write_resolved_config(rd, cfg);

    return with_precision(cfg.precision, [&](auto* tag) -> int {
        using S = std::remove_pointer_t<decltype(tag)>;
        LoadedCheckpoint<S> lc = load_checkpoint<S>(checkpoint);
        require_same_model(cfg, lc.config, checkpoint);

        const auto train = load_split(cfg, cfg.data.train_split);
        const auto eval = load_split(cfg, cfg.data.eval_split);
        ProbeResult<S> res = linear_probe(lc.params, train, eval, cfg);

        write_text(rd.file("metrics.json"), metrics_to_json(res.metrics).dump(2) + "\n");
        save_classifier(rd.file("classifier.json"), res.head, res.num_classes, cfg.model.dim);

        print_summary({{"subcommand", "probe"},
                       {"accuracy", res.metrics.accuracy},
                       {"macro_f1", res.metrics.macro_f1},
                       {"num_classes", res.num_classes},
                       {"metrics", rd.file("metrics.json")},
                       {"classifier", rd.file("classifier.json")}});
        return 0;
    });
}

int run_finetune(const Common& c, const std::string& checkpoint) {
    RunConfig cfg = resolve_config(c);
    RunDir rd(c.out);
    write_resolved_config(rd, cfg);

    return with_precision(cfg.precision, [&](auto* tag) -> int {
        using S = std::remove_pointer_t<decltype(tag)>;
        LoadedCheckpoint<S> lc = load_checkpoint<S>(checkpoint);
        require_same_model(cfg, lc.config, checkpoint);

        const auto train = load_split(cfg, cfg.data.train_split);
        const auto eval = load_split(cfg, cfg.data.eval_split);
        FinetuneResult<S> res = finetune_classifier(lc.params, train, eval, cfg);

        write_text(rd.file("metrics.json"), metrics_to_json(res.metrics).dump(2) + "\n");
        save_classifier(rd.file("classifier.json"), res.head, res.num_classes, cfg.model.dim);
        const std::string ckpt_dir = rd.file("checkpoint");
        save_checkpoint(res.params, cfg, ckpt_dir);

        print_summary({{"subcommand", "finetune"},
                       {"accuracy", res.metrics.accuracy},
                       {"macro_f1", res.metrics.macro_f1},
                       {"num_classes", res.num_classes},
                       {"metrics", rd.file("metrics.json")},
                       {"classifier", rd.file("classifier.json")},
                       {"checkpoint", ckpt_dir}});
        return 0;
    });
}

int run_eval(const Common& c, const std::string& checkpoint, const std::string& classifier) {
    RunConfig cfg = resolve_config(c);
    RunDir rd(c.out);
    write_resolved_config(rd, cfg);

    return with_precision(cfg.precision, [&](auto* tag) -> int {
        using S = std::remove_pointer_t<decltype(tag)>;
        LoadedCheckpoint<S> lc = load_checkpoint<S>(checkpoint);
        require_same_model(cfg, lc.config, checkpoint);
        int C = 0;
        LinearHead<S> head = load_classifier<S>(classifier, cfg.model.dim, &C);

        const auto eval = load_split(cfg, cfg.data.eval_split);
        NucleusTable<S> tab = collect_nucleus_features(lc.params, eval, cfg);
        require(tab.all_labeled && !tab.labels.empty(), "eval: evaluation dataset without labels");
        for (int l : tab.labels) {
            require(l < C, "eval: label ", l, " is outside the classifier's ", C, " classes");
        }
        std::vector<int> preds = predict_classes(tab.feats, head);
        Metrics m = evaluate_metrics(preds, tab.labels, C);

        write_text(rd.file("metrics.json"), metrics_to_json(m).dump(2) + "\n");
        print_summary({{"subcommand", "eval"},
                       {"accuracy", m.accuracy},
                       {"macro_f1", m.macro_f1},
                       {"nuclei", m.total},
                       {"metrics", rd.file("metrics.json")}});
        return 0;
    });
}

std::vector<uint64_t> parse_seed_list(const std::string& text, uint64_t base_seed) {
    if (text.empty()) return {base_seed, base_seed + 1, base_seed + 2};
    std::vector<uint64_t> seeds;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            size_t used = 0;
            const uint64_t v = std::stoull(item, &used);
            require(used == item.size(), "trailing characters");
            seeds.push_back(v);
        } catch (const std::exception&) {
            fail("--seeds: expected a comma-separated list of integers, got '", text, "'");
        }
    }
    require(!seeds.empty(), "--seeds: expected at least one seed, got '", text, "'");
    return seeds;
}

int run_ablate(const Common& c, const std::string& seeds_text) {
    RunConfig cfg = resolve_config(c);
    RunDir rd(c.out);
    write_resolved_config(rd, cfg);
    const std::vector<uint64_t> seeds = parse_seed_list(seeds_text, cfg.seed);

    return with_precision(cfg.precision, [&](auto* tag) -> int {
        using S = std::remove_pointer_t<decltype(tag)>;
        Tokenizer tok = build_tokenizer(cfg);
        std::vector<ScheduledDataset> schedule = load_training_schedule(cfg);
        const auto probe_train = load_split(cfg, cfg.data.train_split);
        const auto probe_eval = load_split(cfg, cfg.data.eval_split);

        AblationReport rep =
            ablation_compare<S>(cfg, seeds, schedule, probe_train, probe_eval, tok);

        write_text(rd.file("ablation.json"), ablation_report_to_json(rep).dump(2) + "\n");
        print_summary({{"subcommand", "ablate"},
                       {"seeds", seeds},
                       {"mean_with", rep.mean_with},
                       {"mean_without", rep.mean_without},
                       {"delta", rep.delta},
                       {"report", rd.file("ablation.json")}});
        return 0;
    });
}

int run_export_embeddings(const Common& c, const std::string& checkpoint,
                          const std::string& split_flag) {
    RunConfig cfg = resolve_config(c);
    RunDir rd(c.out);
    write_resolved_config(rd, cfg);

    return with_precision(cfg.precision, [&](auto* tag) -> int {
        using S = std::remove_pointer_t<decltype(tag)>;
        LoadedCheckpoint<S> lc = load_checkpoint<S>(checkpoint);
        require_same_model(cfg, lc.config, checkpoint);

        const std::string split = split_flag.empty() ? cfg.data.eval_split : split_flag;
        const auto data = load_split(cfg, split);

        std::ostringstream buf;
        export_embeddings(lc.params, data, cfg, buf);
        write_text(rd.file("embeddings.csv"), buf.str());

        size_t rows = 0;
        for (const auto& s : data) rows += s.boxes.size();
        print_summary({{"subcommand", "export-embeddings"},
                       {"split", split},
                       {"rows", rows},
                       {"file", rd.file("embeddings.csv")}});
        return 0;
    });
}

AttentionQuery parse_query(const std::string& text) {
    AttentionQuery q;
    if (text == "cls") {
        q.kind = AttnQueryKind::Cls;
        return q;
    }
    const auto colon = text.find(':');
    if (colon != std::string::npos) {
        const std::string kind = text.substr(0, colon);
        const std::string num = text.substr(colon + 1);
        try {
            size_t used = 0;
            q.index = std::stoi(num, &used);
            require(used == num.size(), "trailing characters");
            if (kind == "grid") {
                q.kind = AttnQueryKind::Grid;
                return q;
            }
            if (kind == "inst") {
                q.kind = AttnQueryKind::Instance;
                return q;
            }
        } catch (const std::exception&) {
            // falls through to the shared error below
        }
    }
    fail("--query must be cls, grid:<cell>, or inst:<box>, got '", text, "'");
    return q; // unreachable
}

int run_export_attention(const Common& c, const std::string& checkpoint,
                         const std::string& split_flag, int sample_index, int layer, int head,
                         const std::string& query_text) {
    RunConfig cfg = resolve_config(c);
    RunDir rd(c.out);
    write_resolved_config(rd, cfg);
    const AttentionQuery query = parse_query(query_text);

    return with_precision(cfg.precision, [&](auto* tag) -> int {
        using S = std::remove_pointer_t<decltype(tag)>;
        LoadedCheckpoint<S> lc = load_checkpoint<S>(checkpoint);
        require_same_model(cfg, lc.config, checkpoint);

        const std::string split = split_flag.empty() ? cfg.data.eval_split : split_flag;
        const auto data = load_split(cfg, split);
        require(sample_index >= 0 && sample_index < static_cast<int>(data.size()),
                "--sample index ", sample_index, " outside [0,", data.size(), ")");
        const AnnotatedSample& sample = data[static_cast<size_t>(sample_index)];

        AttentionMapExport m = export_attention(lc.params, sample, cfg, layer, head, query);
        double weight_sum = m.cls_weight;
        weight_sum = std::accumulate(m.grid.begin(), m.grid.end(), weight_sum);
        weight_sum = std::accumulate(m.instances.begin(), m.instances.end(), weight_sum);

        json doc{{"sample_id", sample.source_id},
                 {"layer", layer},
                 {"head", head},
                 {"query", query_text},
                 {"grid_h", m.grid_h},
                 {"grid_w", m.grid_w},
                 {"cls_weight", m.cls_weight},
                 {"grid", m.grid},
                 {"instances", m.instances}};
        write_text(rd.file("attention.json"), doc.dump(2) + "\n");

        print_summary({{"subcommand", "export-attention"},
                       {"sample_id", sample.source_id},
                       {"layer", layer},
                       {"head", head},
                       {"query", query_text},
                       {"weight_sum", weight_sum},
                       {"file", rd.file("attention.json")}});
        return 0;
    });
}

int run_gradcheck(const Common& c, int coords, double eps) {
    RunConfig cfg = resolve_config(c);
    Tokenizer tok = build_tokenizer(cfg);

    SyntheticConfig sc = synthetic_base(cfg, 2);
    sc.num_images = 1;
    sc.nuclei_max = std::max(1, std::min(4, cfg.model.n_max));
    sc.nuclei_min = std::min(2, sc.nuclei_max);
    SyntheticDataset ds = generate_synthetic(sc, Rng(cfg.seed).substream("gradcheck-data"));

    // Finite differences need the wide mantissa, so this always runs in f64.
    PipelineGradReport rep =
        pipeline_grad_check(ds.samples.at(0), cfg, tok, coords, eps, cfg.seed);

    const double threshold = 1e-4;
    const bool pass = rep.max_rel_error < threshold;
    print_summary({{"subcommand", "gradcheck"},
                   {"max_rel_error", rep.max_rel_error},
                   {"worst_param", rep.worst_param},
                   {"params_checked", rep.params_checked},
                   {"coords_per_param", rep.coords_per_param},
                   {"threshold", threshold},
                   {"pass", pass}});
    return pass ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"nuclei masked-image-modelling workbench"};
    app.require_subcommand(1);

    Common gen_c;
    int gen_images = 512, gen_eval_images = 128, gen_classes = 4;
    auto* gen = app.add_subcommand("gen-data", "write a labeled synthetic dataset "
                                               "(train and eval splits under --out)");
    add_common(gen, gen_c, true);
    gen->add_option("--images", gen_images, "training images")->check(CLI::PositiveNumber);
    gen->add_option("--eval-images", gen_eval_images, "evaluation images")
        ->check(CLI::PositiveNumber);
    gen->add_option("--classes", gen_classes, "number of nucleus classes")
        ->check(CLI::PositiveNumber);

    Common tokc;
    int tok_max_cells = 100000;
    auto* tokcmd = app.add_subcommand("train-tokenizer",
                                      "fit the visual-token codebook on the train split");
    add_common(tokcmd, tokc, true);
    tokcmd->add_option("--max-cells", tok_max_cells, "cap on clustered cells")
        ->check(CLI::PositiveNumber);

    Common prec;
    std::string pre_resume;
    auto* pre = app.add_subcommand("pretrain", "masked-token pretraining");
    add_common(pre, prec, true);
    pre->add_option("--resume", pre_resume, "checkpoint directory to continue from");

    Common probec;
    std::string probe_ckpt;
    auto* probe = app.add_subcommand("probe", "linear probe on frozen nucleus features");
    add_common(probe, probec, true);
    probe->add_option("--checkpoint", probe_ckpt, "pretrained checkpoint directory")->required();

    Common ftc;
    std::string ft_ckpt;
    auto* ft = app.add_subcommand("finetune", "classifier fine-tuning of the whole encoder");
    add_common(ft, ftc, true);
    ft->add_option("--checkpoint", ft_ckpt, "pretrained checkpoint directory")->required();

    Common evalc;
    std::string eval_ckpt, eval_classifier;
    auto* ev = app.add_subcommand("eval", "score a saved classifier on the eval split");
    add_common(ev, evalc, true);
    ev->add_option("--checkpoint", eval_ckpt, "encoder checkpoint directory")->required();
    ev->add_option("--classifier", eval_classifier, "classifier.json from probe or finetune")
        ->required();

    Common ablc;
    std::string abl_seeds;
    auto* abl = app.add_subcommand("ablate", "instance-term on/off comparison over seeds");
    add_common(abl, ablc, true);
    abl->add_option("--seeds", abl_seeds, "comma-separated seeds (default: seed..seed+2)");

    Common embc;
    std::string emb_ckpt, emb_split;
    auto* emb = app.add_subcommand("export-embeddings", "per-nucleus feature CSV");
    add_common(emb, embc, true);
    emb->add_option("--checkpoint", emb_ckpt, "encoder checkpoint directory")->required();
    emb->add_option("--split", emb_split, "dataset split (default: the eval split)");

    Common attc;
    std::string att_ckpt, att_split, att_query = "cls";
    int att_sample = 0, att_layer = 0, att_head = 0;
    auto* att = app.add_subcommand("export-attention", "one attention row as JSON");
    add_common(att, attc, true);
    att->add_option("--checkpoint", att_ckpt, "encoder checkpoint directory")->required();
    att->add_option("--split", att_split, "dataset split (default: the eval split)");
    att->add_option("--sample", att_sample, "sample index within the split");
    att->add_option("--layer", att_layer, "encoder layer");
    att->add_option("--head", att_head, "attention head");
    att->add_option("--query", att_query, "cls, grid:<cell>, or inst:<box>");

    Common gcc;
    int gc_coords = 3;
    double gc_eps = 1e-5;
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the whole "
                                               "training pipeline (runs in f64)");
    add_common(gc, gcc, false);
    gc->add_option("--coords", gc_coords, "coordinates probed per parameter")
        ->check(CLI::PositiveNumber);
    gc->add_option("--eps", gc_eps, "central-difference step");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) return run_gen_data(gen_c, gen_images, gen_eval_images, gen_classes);
        if (tokcmd->parsed()) return run_train_tokenizer(tokc, tok_max_cells);
        if (pre->parsed()) return run_pretrain(prec, pre_resume);
        if (probe->parsed()) return run_probe(probec, probe_ckpt);
        if (ft->parsed()) return run_finetune(ftc, ft_ckpt);
        if (ev->parsed()) return run_eval(evalc, eval_ckpt, eval_classifier);
        if (abl->parsed()) return run_ablate(ablc, abl_seeds);
        if (emb->parsed()) return run_export_embeddings(embc, emb_ckpt, emb_split);
        if (att->parsed()) {
            return run_export_attention(attc, att_ckpt, att_split, att_sample, att_layer,
                                        att_head, att_query);
        }
        if (gc->parsed()) return run_gradcheck(gcc, gc_coords, gc_eps);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    std::cerr << "error: no subcommand selected" << std::endl;
    return 2;
}
