#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nmim/train.hpp"

namespace nmim {

inline constexpr int kCheckpointSchemaVersion = 1;

template <typename S>
struct DtypeName;
template <>
struct DtypeName<double> {
    static constexpr const char* value = "f64";
};
template <>
struct DtypeName<float> {
    static constexpr const char* value = "f32";
};

namespace detail {

template <typename S>
void append_le(std::vector<unsigned char>& blob, const std::vector<S>& vals) {
    static_assert(sizeof(S) == 4 || sizeof(S) == 8, "unsupported scalar width");
    using U = std::conditional_t<sizeof(S) == 8, uint64_t, uint32_t>;
    for (S v : vals) {
        U bits;
        std::memcpy(&bits, &v, sizeof(U));
        for (size_t b = 0; b < sizeof(U); ++b) {
            blob.push_back(static_cast<unsigned char>((bits >> (8 * b)) & 0xff));
        }
    }
}

template <typename S>
std::vector<S> read_le(const std::vector<unsigned char>& blob, uint64_t offset, uint64_t count,
                       const std::string& name) {
    using U = std::conditional_t<sizeof(S) == 8, uint64_t, uint32_t>;
    const uint64_t bytes = count * sizeof(U);
    require(offset + bytes <= blob.size(), "checkpoint: truncated array blob; '", name,
            "' needs ", bytes, " bytes at offset ", offset, " but the file holds ", blob.size());
    std::vector<S> out(static_cast<size_t>(count));
    for (uint64_t i = 0; i < count; ++i) {
        U bits = 0;
        for (size_t b = 0; b < sizeof(U); ++b) {
            bits |= static_cast<U>(blob[static_cast<size_t>(offset + i * sizeof(U) + b)])
                    << (8 * b);
        }
        std::memcpy(&out[static_cast<size_t>(i)], &bits, sizeof(U));
    }
    return out;
}

inline std::vector<unsigned char> read_file_bytes(const std::string& path, const char* what) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "checkpoint: cannot open ", what, " '", path, "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    return bytes;
}

} // namespace detail

// Layout on disk: <dir>/manifest.json (schema version, config snapshot, array
// directory) and <dir>/arrays.bin (the concatenated little-endian payload).
// Optimizer moments ride along as "opt.m.<name>" / "opt.v.<name>" arrays when
// a training state is supplied, which is what makes exact resume possible.
template <typename S>
void save_checkpoint(const EncoderParams<S>& params, const RunConfig& cfg,
                     const std::string& dir, const AdamW<S>* optimizer = nullptr,
                     int epochs_done = 0, const std::vector<EpochRecord>* trace = nullptr) {
    std::filesystem::create_directories(dir);
    std::vector<unsigned char> blob;
    nlohmann::json arrays = nlohmann::json::array();
    auto add_array = [&](const std::string& name, const std::vector<int>& shape,
                         const std::vector<S>& vals) {
        arrays.push_back({{"name", name},
                          {"shape", shape},
                          {"dtype", DtypeName<S>::value},
                          {"offset", blob.size()},
                          {"count", vals.size()}});
        detail::append_le(blob, vals);
    };

    params.for_each_param([&](const std::string& name, const Tensor<S>& t) {
        add_array(name, t.shape(), t.values());
    });
    if (optimizer != nullptr) {
        const_cast<AdamW<S>*>(optimizer)->for_each_state(
            [&](const std::string& name, const typename AdamW<S>::Slot& slot) {
                const std::vector<int> shape{static_cast<int>(slot.m.size())};
                add_array("opt.m." + name, shape, slot.m);
                add_array("opt.v." + name, shape, slot.v);
            });
    }

    nlohmann::json manifest{{"schema_version", kCheckpointSchemaVersion},
                            {"dtype", DtypeName<S>::value},
                            {"config", config_to_json(cfg)},
                            {"arrays", arrays}};
    if (optimizer != nullptr) {
        nlohmann::json trace_json = nlohmann::json::array();
        if (trace != nullptr) {
            for (const auto& r : *trace) trace_json.push_back(epoch_record_to_json(r));
        }
        manifest["train_state"] = {{"epochs_done", epochs_done},
                                   {"steps", optimizer->steps()},
                                   {"trace", trace_json}};
    }

    {
        std::ofstream out(dir + "/manifest.json", std::ios::binary);
        require(out.good(), "checkpoint: cannot write manifest in '", dir, "'");
        out << manifest.dump(2) << "\n";
    }
    {
        std::ofstream out(dir + "/arrays.bin", std::ios::binary);
        require(out.good(), "checkpoint: cannot write array blob in '", dir, "'");
        out.write(reinterpret_cast<const char*>(blob.data()),
                  static_cast<std::streamsize>(blob.size()));
        require(out.good(), "checkpoint: short write to array blob in '", dir, "'");
    }
}

template <typename S>
void save_checkpoint(const PretrainState<S>& state, const RunConfig& cfg,
                     const std::string& dir) {
    save_checkpoint(state.params, cfg, dir, &state.optimizer, state.epochs_done, &state.trace);
}

template <typename S>
struct LoadedCheckpoint {
    EncoderParams<S> params;
    RunConfig config;
    bool has_train_state = false;
    AdamW<S> optimizer;
    int epochs_done = 0;
    std::vector<EpochRecord> trace;
};

template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::string& dir) {
    const std::string manifest_path = dir + "/manifest.json";
    const std::vector<unsigned char> manifest_bytes =
        detail::read_file_bytes(manifest_path, "manifest");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(manifest_bytes.begin(), manifest_bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("checkpoint: corrupt manifest '" + manifest_path +
                                 "': " + e.what());
    }

    const int version = manifest.value("schema_version", -1);
    require(version == kCheckpointSchemaVersion, "checkpoint: schema version ", version,
            " in '", manifest_path, "' is not supported; this build reads version ",
            kCheckpointSchemaVersion);
    require(manifest.contains("config") && manifest.contains("arrays"),
            "checkpoint: manifest '", manifest_path, "' lacks config or arrays");

    LoadedCheckpoint<S> out;
    out.config = config_from_json(manifest.at("config"));

    struct Entry {
        std::vector<int> shape;
        uint64_t offset = 0;
        uint64_t count = 0;
    };
    std::map<std::string, Entry> directory;
    for (const auto& a : manifest.at("arrays")) {
        const std::string name = a.at("name").get<std::string>();
        const std::string dtype = a.at("dtype").get<std::string>();
        require(dtype == DtypeName<S>::value, "checkpoint: array '", name, "' has dtype ",
                dtype, " but this build reads ", DtypeName<S>::value);
        Entry e;
        e.shape = a.at("shape").get<std::vector<int>>();
        e.offset = a.at("offset").get<uint64_t>();
        e.count = a.at("count").get<uint64_t>();
        require(directory.emplace(name, e).second, "checkpoint: duplicate array '", name, "'");
    }

    const std::vector<unsigned char> blob = detail::read_file_bytes(dir + "/arrays.bin", "array blob");

    Rng scratch(0);
    out.params = init_encoder_params<S>(out.config.encoder_shape(), scratch);
    out.params.for_each_param([&](const std::string& name, Tensor<S>& t) {
        auto it = directory.find(name);
        require(it != directory.end(), "checkpoint: missing array '", name, "'");
        const Entry& e = it->second;
        require(e.shape == t.shape(), "checkpoint: array '", name, "' has shape ",
                shape_str(e.shape), " but the config implies ", shape_str(t.shape()));
        t = Tensor<S>::from_data(e.shape, detail::read_le<S>(blob, e.offset, e.count, name),
                                 true);
    });

    if (manifest.contains("train_state")) {
        const auto& ts = manifest.at("train_state");
        out.has_train_state = true;
        out.optimizer = AdamW<S>(out.config.optimizer);
        out.optimizer.set_steps(ts.at("steps").get<int64_t>());
        out.epochs_done = ts.at("epochs_done").get<int>();
        for (const auto& r : ts.at("trace")) {
            EpochRecord rec;
            rec.epoch = r.at("epoch").get<int>();
            rec.loss = r.at("loss").get<double>();
            rec.beit_term = r.at("beit_term").get<double>();
            rec.inst_term = r.at("inst_term").get<double>();
            out.trace.push_back(rec);
        }
        for (const auto& [name, e] : directory) {
            if (name.rfind("opt.m.", 0) == 0) {
                out.optimizer.slot(name.substr(6)).m =
                    detail::read_le<S>(blob, e.offset, e.count, name);
            } else if (name.rfind("opt.v.", 0) == 0) {
                out.optimizer.slot(name.substr(6)).v =
                    detail::read_le<S>(blob, e.offset, e.count, name);
            }
        }
    }
    return out;
}

template <typename S>
PretrainState<S> to_pretrain_state(LoadedCheckpoint<S>&& loaded) {
    PretrainState<S> state;
    state.params = std::move(loaded.params);
    state.optimizer = std::move(loaded.optimizer);
    state.epochs_done = loaded.epochs_done;
    state.trace = std::move(loaded.trace);
    return state;
}

// ---------------------------------------------------------------------------
// Codebook persistence (JSON; float values round-trip exactly through double)
// ---------------------------------------------------------------------------

inline void save_codebook(const Codebook& cb, int cell_px, const std::string& path) {
    cb.validate();
    nlohmann::json j{{"vocab", cb.vocab},
                     {"dim", cb.dim},
                     {"cell_px", cell_px},
                     {"centroids", cb.centroids},
                     {"iterations_run", cb.iterations_run},
                     {"inertia_trace", cb.inertia_trace},
                     {"fallback_duplicates", cb.fallback_duplicates}};
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "save_codebook: cannot write '", path, "'");
    out << j.dump(2) << "\n";
}

inline Codebook load_codebook(const std::string& path, int* cell_px_out = nullptr) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "load_codebook: cannot open '", path, "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("load_codebook: corrupt file '" + path + "': " + e.what());
    }
    Codebook cb;
    cb.vocab = j.at("vocab").get<int>();
    cb.dim = j.at("dim").get<int>();
    cb.centroids = j.at("centroids").get<std::vector<float>>();
    cb.iterations_run = j.value("iterations_run", 0);
    cb.inertia_trace = j.value("inertia_trace", std::vector<double>{});
    cb.fallback_duplicates = j.value("fallback_duplicates", false);
    cb.validate();
    if (cell_px_out != nullptr) *cell_px_out = j.at("cell_px").get<int>();
    return cb;
}

// Resolves the tokenizer named by the config: the luminance quantizer needs
// nothing, the VQ variant loads its codebook from disk.
inline Tokenizer build_tokenizer(const RunConfig& cfg) {
    if (cfg.tokenizer.kind == "luminance") {
        return make_luminance_tokenizer(cfg.model.vocab);
    }
    require(cfg.tokenizer.kind == "vq", "build_tokenizer: unknown kind '", cfg.tokenizer.kind,
            "'");
    require(!cfg.tokenizer.codebook_path.empty(),
            "build_tokenizer: tokenizer.codebook_path is required for the vq tokenizer");
    int cell_px = 0;
    Codebook cb = load_codebook(cfg.tokenizer.codebook_path, &cell_px);
    require(cb.vocab == cfg.model.vocab, "build_tokenizer: codebook vocab ", cb.vocab,
            " does not match configured vocab ", cfg.model.vocab);
    return make_vq_tokenizer(cb, cell_px);
}

} // namespace nmim
