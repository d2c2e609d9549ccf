#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nmim/common.hpp"
#include "nmim/data.hpp"
#include "nmim/image.hpp"
#include "nmim/rng.hpp"

namespace nmim {

struct SyntheticConfig {
    int num_images = 100;
    int image_size = 64;
    int num_classes = 4;
    int nuclei_min = 3;
    int nuclei_max = 8;
    double radius_min = 3.0;
    double radius_max = 6.0;
    int max_place_retries = 100;
};

struct NucleusTruth {
    double cx = 0.0;
    double cy = 0.0;
    int label = 0;
};

struct SyntheticDataset {
    std::vector<AnnotatedSample> samples;
    std::vector<std::vector<NucleusTruth>> truths;
    SyntheticConfig config;
};

// A class is a rendering recipe: base color, radius sub-range, rim darkness
// and interior stripe frequency. Radius ranges overlap heavily so size alone
// does not identify the class.
struct ClassRecipe {
    std::array<float, 3> base;
    double radius_lo = 0.0;
    double radius_hi = 0.0;
    float boundary_dark = 0.0f;
    float tex_freq = 0.0f;
    float tex_amp = 0.0f;
};

inline std::vector<ClassRecipe> class_recipes(int num_classes, double radius_min,
                                              double radius_max) {
    constexpr int kMaxClasses = 8;
    require(num_classes >= 1 && num_classes <= kMaxClasses,
            "class_recipes: num_classes must be in [1,", kMaxClasses, "], got ", num_classes);
    require(radius_min > 0.0 && radius_max >= radius_min, "class_recipes: bad radius range [",
            radius_min, ",", radius_max, "]");
    static const std::array<std::array<float, 3>, kMaxClasses> bases{{
        {0.44f, 0.26f, 0.54f},
        {0.60f, 0.30f, 0.36f},
        {0.28f, 0.36f, 0.60f},
        {0.40f, 0.50f, 0.32f},
        {0.26f, 0.52f, 0.52f},
        {0.54f, 0.42f, 0.26f},
        {0.58f, 0.28f, 0.54f},
        {0.38f, 0.40f, 0.46f},
    }};
    static const std::array<float, kMaxClasses> darks{0.25f, 0.55f, 0.35f, 0.70f,
                                                      0.45f, 0.60f, 0.30f, 0.50f};
    static const std::array<float, kMaxClasses> freqs{1.0f, 2.0f, 3.0f, 4.0f,
                                                      1.5f, 2.5f, 3.5f, 1.2f};
    static const std::array<float, kMaxClasses> amps{0.04f, 0.06f, 0.08f, 0.10f,
                                                     0.05f, 0.07f, 0.09f, 0.06f};
    const double span = radius_max - radius_min;
    std::vector<ClassRecipe> recipes(static_cast<size_t>(num_classes));
    for (int k = 0; k < num_classes; ++k) {
        ClassRecipe& r = recipes[static_cast<size_t>(k)];
        r.base = bases[static_cast<size_t>(k)];
        const double shift = num_classes > 1 ? 0.1 * span * k / (num_classes - 1) : 0.0;
        r.radius_lo = radius_min + shift;
        r.radius_hi = radius_max - (num_classes > 1 ? 0.1 * span : 0.0) + shift;
        r.boundary_dark = darks[static_cast<size_t>(k)];
        r.tex_freq = freqs[static_cast<size_t>(k)];
        r.tex_amp = amps[static_cast<size_t>(k)];
    }
    return recipes;
}

namespace detail {

struct PlacedNucleus {
    double cx, cy, rx, ry, theta;
    int label;
};

inline double reach(const PlacedNucleus& n) { return std::max(n.rx, n.ry); }

// Tight axis-aligned extent of a rotated ellipse.
inline void ellipse_half_extents(double rx, double ry, double theta, double& half_x,
                                 double& half_y) {
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    half_x = std::sqrt(rx * rx * c * c + ry * ry * s * s);
    half_y = std::sqrt(rx * rx * s * s + ry * ry * c * c);
}

inline void paint_background(Image& img, Rng& rng) {
    const float base_r = 0.88f, base_g = 0.77f, base_b = 0.83f;
    const double ph1 = rng.uniform(0.0, 2.0 * M_PI);
    const double ph2 = rng.uniform(0.0, 2.0 * M_PI);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            const double wave =
                0.025 * std::sin(2.0 * M_PI * x / img.w + ph1) * std::cos(2.0 * M_PI * y / img.h + ph2);
            const float n0 = static_cast<float>(rng.uniform(-0.02, 0.02));
            const float n1 = static_cast<float>(rng.uniform(-0.02, 0.02));
            const float n2 = static_cast<float>(rng.uniform(-0.02, 0.02));
            img.at(y, x, 0) = base_r + static_cast<float>(wave) + n0;
            img.at(y, x, 1) = base_g + static_cast<float>(wave * 0.7) + n1;
            img.at(y, x, 2) = base_b + static_cast<float>(wave * 0.9) + n2;
        }
    }
}

inline void paint_nucleus(Image& img, const PlacedNucleus& n, const ClassRecipe& recipe,
                          double phase, Rng& rng) {
    double half_x = 0.0, half_y = 0.0;
    ellipse_half_extents(n.rx, n.ry, n.theta, half_x, half_y);
    const int y0 = std::max(0, static_cast<int>(std::floor(n.cy - half_y)));
    const int y1 = std::min(img.h - 1, static_cast<int>(std::ceil(n.cy + half_y)));
    const int x0 = std::max(0, static_cast<int>(std::floor(n.cx - half_x)));
    const int x1 = std::min(img.w - 1, static_cast<int>(std::ceil(n.cx + half_x)));
    const double c = std::cos(n.theta);
    const double s = std::sin(n.theta);
    const double edge = 0.75 / std::max(n.rx, n.ry);
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            const double dx = (x + 0.5) - n.cx;
            const double dy = (y + 0.5) - n.cy;
            const double u = c * dx + s * dy;
            const double v = -s * dx + c * dy;
            const double q = std::sqrt((u / n.rx) * (u / n.rx) + (v / n.ry) * (v / n.ry));
            if (q >= 1.0) continue;
            const double cov = std::min(1.0, (1.0 - q) / edge);
            const float stripe =
                recipe.tex_amp *
                static_cast<float>(std::sin(2.0 * M_PI * recipe.tex_freq * u / n.rx + phase));
            const float band = static_cast<float>(std::clamp((q - 0.7) / 0.3, 0.0, 1.0));
            const float rim = 1.0f - recipe.boundary_dark * band;
            for (int ch = 0; ch < 3; ++ch) {
                const float noise = static_cast<float>(rng.uniform(-0.015, 0.015));
                const float body = std::clamp((recipe.base[static_cast<size_t>(ch)] + stripe) * rim + noise,
                                              0.0f, 1.0f);
                const float bg = img.at(y, x, ch);
                img.at(y, x, ch) = bg + static_cast<float>(cov) * (body - bg);
            }
        }
    }
}

} // namespace detail

// Fully seed-deterministic corpus of elliptical nuclei on a textured
// background; per-image streams are derived by index so results do not depend
// on generation order.
inline SyntheticDataset generate_synthetic(const SyntheticConfig& cfg, const Rng& rng) {
    require(cfg.num_images >= 0, "generate_synthetic: num_images must be >= 0");
    require(cfg.image_size >= 8, "generate_synthetic: image_size must be >= 8, got ",
            cfg.image_size);
    require(cfg.nuclei_min >= 0 && cfg.nuclei_max >= cfg.nuclei_min,
            "generate_synthetic: bad nuclei range [", cfg.nuclei_min, ",", cfg.nuclei_max, "]");
    require(cfg.radius_min >= 1.0 && cfg.radius_max >= cfg.radius_min,
            "generate_synthetic: bad radius range [", cfg.radius_min, ",", cfg.radius_max, "]");
    require(cfg.max_place_retries >= 1, "generate_synthetic: max_place_retries must be >= 1");
    const auto recipes = class_recipes(cfg.num_classes, cfg.radius_min, cfg.radius_max);

    SyntheticDataset ds;
    ds.config = cfg;
    ds.samples.reserve(static_cast<size_t>(cfg.num_images));
    ds.truths.reserve(static_cast<size_t>(cfg.num_images));

    const Rng base = rng.substream("synthetic");
    for (int i = 0; i < cfg.num_images; ++i) {
        Rng irng = base.substream(static_cast<uint64_t>(i));
        AnnotatedSample sample;
        {
            std::ostringstream name;
            name << "img_" << std::setw(5) << std::setfill('0') << i;
            sample.source_id = name.str();
        }
        sample.image = Image(cfg.image_size, cfg.image_size, 3);
        detail::paint_background(sample.image, irng);

        const int target =
            static_cast<int>(irng.uniform_int(cfg.nuclei_min, cfg.nuclei_max));
        std::vector<detail::PlacedNucleus> placed;
        int retries = 0;
        while (static_cast<int>(placed.size()) < target) {
            const int label = static_cast<int>(irng.uniform_int(0, cfg.num_classes - 1));
            const ClassRecipe& recipe = recipes[static_cast<size_t>(label)];
            detail::PlacedNucleus n;
            n.label = label;
            n.rx = irng.uniform(recipe.radius_lo, recipe.radius_hi);
            n.ry = n.rx * irng.uniform(0.6, 1.0);
            n.theta = irng.uniform(0.0, M_PI);
            double half_x = 0.0, half_y = 0.0;
            detail::ellipse_half_extents(n.rx, n.ry, n.theta, half_x, half_y);
            const double margin_x = half_x + 0.5;
            const double margin_y = half_y + 0.5;
            require(2.0 * margin_x < cfg.image_size && 2.0 * margin_y < cfg.image_size,
                    "generate_synthetic: radius ", n.rx, " too large for image size ",
                    cfg.image_size);
            n.cx = irng.uniform(margin_x, cfg.image_size - margin_x);
            n.cy = irng.uniform(margin_y, cfg.image_size - margin_y);
            bool ok = true;
            for (const auto& other : placed) {
                const double d = std::hypot(n.cx - other.cx, n.cy - other.cy);
                if (d < detail::reach(n) + detail::reach(other) + 1.0) {
                    ok = false;
                    break;
                }
            }
            if (!ok) {
                ++retries;
                require(retries <= cfg.max_place_retries,
                        "generate_synthetic: nuclei density infeasible: placed ",
                        placed.size(), " of ", target, " nuclei in image ", i, " after ",
                        cfg.max_place_retries, " retries");
                continue;
            }
            placed.push_back(n);
        }

        std::vector<NucleusTruth> truth;
        for (const auto& n : placed) {
            const double phase = irng.uniform(0.0, 2.0 * M_PI);
            detail::paint_nucleus(sample.image, n, recipes[static_cast<size_t>(n.label)], phase,
                                  irng);
            double half_x = 0.0, half_y = 0.0;
            detail::ellipse_half_extents(n.rx, n.ry, n.theta, half_x, half_y);
            NucleusBox b;
            b.x_min = n.cx - half_x;
            b.y_min = n.cy - half_y;
            b.x_max = n.cx + half_x;
            b.y_max = n.cy + half_y;
            b.label = n.label;
            sample.boxes.push_back(b);
            truth.push_back(NucleusTruth{n.cx, n.cy, n.label});
        }
        clamp_unit(sample.image);
        ds.samples.push_back(std::move(sample));
        ds.truths.push_back(std::move(truth));
    }
    return ds;
}

// Writes PNGs, sidecars and a manifest recording per-nucleus ground truth.
inline void write_synthetic_dataset(const std::string& dir, const SyntheticDataset& ds,
                                    uint64_t seed) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json samples = nlohmann::json::array();
    for (size_t i = 0; i < ds.samples.size(); ++i) {
        save_sample(dir, ds.samples[i]);
        nlohmann::json nuclei = nlohmann::json::array();
        for (const auto& t : ds.truths[i]) {
            nuclei.push_back({{"cx", t.cx}, {"cy", t.cy}, {"label", t.label}});
        }
        samples.push_back({{"source_id", ds.samples[i].source_id}, {"nuclei", nuclei}});
    }
    nlohmann::json manifest;
    manifest["seed"] = seed;
    manifest["image_size"] = ds.config.image_size;
    manifest["num_classes"] = ds.config.num_classes;
    manifest["samples"] = samples;
    std::ofstream out(fs::path(dir) / "manifest.json");
    require(out.good(), "write_synthetic_dataset: cannot write manifest in ", dir);
    out << manifest.dump(2) << "\n";
}

inline std::vector<std::vector<NucleusTruth>> load_manifest_truths(const std::string& dir) {
    namespace fs = std::filesystem;
    const std::string path = (fs::path(dir) / "manifest.json").string();
    std::ifstream in(path);
    require(in.good(), "load_manifest_truths: cannot open ", path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        fail("load_manifest_truths: ", path, " is not valid JSON: ", e.what());
    }
    require(j.contains("samples") && j.at("samples").is_array(), "load_manifest_truths: ", path,
            ": missing \"samples\" array");
    std::vector<std::vector<NucleusTruth>> out;
    for (const auto& s : j.at("samples")) {
        std::vector<NucleusTruth> nuclei;
        for (const auto& n : s.at("nuclei")) {
            nuclei.push_back(NucleusTruth{n.at("cx").get<double>(), n.at("cy").get<double>(),
                                          n.at("label").get<int>()});
        }
        out.push_back(std::move(nuclei));
    }
    return out;
}

} // namespace nmim
