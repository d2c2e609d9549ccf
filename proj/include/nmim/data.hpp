#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nmim/common.hpp"
#include "nmim/image.hpp"
#include "nmim/png_io.hpp"

namespace nmim {

// Axis-aligned nucleus bounding box in pixel coordinates; label is absent for
// unannotated pretraining data.
struct NucleusBox {
    double x_min = 0.0;
    double y_min = 0.0;
    double x_max = 0.0;
    double y_max = 0.0;
    std::optional<int> label;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return width() * height(); }
};

struct AnnotatedSample {
    std::string source_id;
    Image image;
    std::vector<NucleusBox> boxes;
};

inline void validate_box(const NucleusBox& b, int img_w, int img_h, const std::string& where) {
    require(std::isfinite(b.x_min) && std::isfinite(b.y_min) && std::isfinite(b.x_max) &&
                std::isfinite(b.y_max),
            where, ": box coordinates must be finite");
    require(b.x_min < b.x_max, where, ": x_min (", b.x_min, ") must be < x_max (", b.x_max, ")");
    require(b.y_min < b.y_max, where, ": y_min (", b.y_min, ") must be < y_max (", b.y_max, ")");
    require(b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_max <= static_cast<double>(img_w) &&
                b.y_max <= static_cast<double>(img_h),
            where, ": box [", b.x_min, ",", b.y_min, ",", b.x_max, ",", b.y_max,
            "] outside image ", img_w, "x", img_h);
}

namespace detail {

inline double box_field(const nlohmann::json& jb, const char* field, const std::string& where) {
    require(jb.contains(field), where, ": missing field \"", field, "\"");
    const auto& v = jb.at(field);
    require(v.is_number(), where, ": field \"", field, "\" must be a number");
    return v.get<double>();
}

} // namespace detail

// Sidecar layout: {"boxes":[{"x_min":..,"y_min":..,"x_max":..,"y_max":..,"label":int|null}]}.
inline std::vector<NucleusBox> load_sidecar(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "load_sidecar: cannot open ", path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        fail("load_sidecar: ", path, " is not valid JSON: ", e.what());
    }
    require(j.is_object(), "load_sidecar: ", path, ": top level must be an object");
    require(j.contains("boxes"), "load_sidecar: ", path, ": missing field \"boxes\"");
    require(j.at("boxes").is_array(), "load_sidecar: ", path, ": field \"boxes\" must be an array");

    std::vector<NucleusBox> boxes;
    int idx = 0;
    for (const auto& jb : j.at("boxes")) {
        const std::string where = "load_sidecar: " + path + ": boxes[" + std::to_string(idx) + "]";
        require(jb.is_object(), where, " must be an object");
        NucleusBox b;
        b.x_min = detail::box_field(jb, "x_min", where);
        b.y_min = detail::box_field(jb, "y_min", where);
        b.x_max = detail::box_field(jb, "x_max", where);
        b.y_max = detail::box_field(jb, "y_max", where);
        if (jb.contains("label") && !jb.at("label").is_null()) {
            require(jb.at("label").is_number_integer(), where,
                    ": field \"label\" must be an integer or null");
            b.label = jb.at("label").get<int>();
        }
        boxes.push_back(b);
        ++idx;
    }
    return boxes;
}

inline void save_sidecar(const std::string& path, const std::vector<NucleusBox>& boxes) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& b : boxes) {
        nlohmann::json jb;
        jb["x_min"] = b.x_min;
        jb["y_min"] = b.y_min;
        jb["x_max"] = b.x_max;
        jb["y_max"] = b.y_max;
        jb["label"] = b.label ? nlohmann::json(*b.label) : nlohmann::json(nullptr);
        arr.push_back(jb);
    }
    nlohmann::json j;
    j["boxes"] = arr;
    std::ofstream out(path);
    require(out.good(), "save_sidecar: cannot open ", path, " for writing");
    out << j.dump(2) << "\n";
    require(out.good(), "save_sidecar: write to ", path, " failed");
}

inline void save_sample(const std::string& dir, const AnnotatedSample& sample) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const fs::path base = fs::path(dir) / sample.source_id;
    write_png(base.string() + ".png", sample.image);
    save_sidecar(base.string() + ".json", sample.boxes);
}

// Loads every .png in the directory together with its JSON sidecar, in
// lexicographic filename order. A PNG without a sidecar is an error; boxes are
// validated against the image extent.
inline std::vector<AnnotatedSample> load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    require(fs::is_directory(dir), "load_dataset: ", dir, " is not a directory");

    std::vector<fs::path> pngs;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const fs::path& p = entry.path();
        if (p.extension() == ".png") {
            pngs.push_back(p);
        } else if (p.extension() == ".json" && p.filename() != "manifest.json") {
            fs::path image = p;
            image.replace_extension(".png");
            require(fs::exists(image), "load_dataset: sidecar ", p.string(),
                    " has no image ", image.string());
        }
    }
    std::sort(pngs.begin(), pngs.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });

    std::vector<AnnotatedSample> out;
    out.reserve(pngs.size());
    for (const auto& p : pngs) {
        fs::path sidecar = p;
        sidecar.replace_extension(".json");
        require(fs::exists(sidecar), "load_dataset: missing sidecar ", sidecar.string(), " for ",
                p.string());
        AnnotatedSample s;
        s.source_id = p.stem().string();
        s.image = read_png(p.string());
        s.boxes = load_sidecar(sidecar.string());
        for (size_t i = 0; i < s.boxes.size(); ++i) {
            validate_box(s.boxes[i], s.image.w, s.image.h,
                         "load_dataset: " + sidecar.string() + ": boxes[" + std::to_string(i) + "]");
        }
        out.push_back(std::move(s));
    }
    return out;
}

// Split names map to subdirectories; an empty split loads the root itself.
inline std::vector<AnnotatedSample> load_dataset(const std::string& root,
                                                 const std::string& split) {
    namespace fs = std::filesystem;
    return load_dataset(split.empty() ? root : (fs::path(root) / split).string());
}

} // namespace nmim
