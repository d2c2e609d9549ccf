#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <filesystem>
#include <vector>

#include "nmim/synthetic.hpp"

using namespace nmim;

namespace {

std::array<double, 3> box_mean_color(const Image& img, const NucleusBox& b) {
    std::array<double, 3> sum{0.0, 0.0, 0.0};
    int count = 0;
    const int y0 = std::max(0, static_cast<int>(std::floor(b.y_min)));
    const int y1 = std::min(img.h, static_cast<int>(std::ceil(b.y_max)));
    const int x0 = std::max(0, static_cast<int>(std::floor(b.x_min)));
    const int x1 = std::min(img.w, static_cast<int>(std::ceil(b.x_max)));
    for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
            for (int c = 0; c < 3; ++c) sum[static_cast<size_t>(c)] += img.at(y, x, c);
            ++count;
        }
    }
    for (auto& v : sum) v /= std::max(1, count);
    return sum;
}

} // namespace

TEST_CASE("zero nuclei gives background-only samples") {
    SyntheticConfig cfg;
    cfg.num_images = 3;
    cfg.nuclei_min = 0;
    cfg.nuclei_max = 0;
    auto ds = generate_synthetic(cfg, seeded_rng(5));
    REQUIRE(ds.samples.size() == 3);
    for (const auto& s : ds.samples) {
        REQUIRE(s.boxes.empty());
        REQUIRE(s.image.h == cfg.image_size);
        REQUIRE(s.image.w == cfg.image_size);
    }
}

TEST_CASE("same seed gives bitwise-identical images") {
    SyntheticConfig cfg;
    cfg.num_images = 4;
    auto a = generate_synthetic(cfg, seeded_rng(99));
    auto b = generate_synthetic(cfg, seeded_rng(99));
    REQUIRE(a.samples.size() == b.samples.size());
    for (size_t i = 0; i < a.samples.size(); ++i) {
        REQUIRE(a.samples[i].image.pix == b.samples[i].image.pix);
        REQUIRE(a.samples[i].boxes.size() == b.samples[i].boxes.size());
    }
    auto c = generate_synthetic(cfg, seeded_rng(100));
    REQUIRE(a.samples[0].image.pix != c.samples[0].image.pix);
}

TEST_CASE("boxes are valid, tight to the image, and contain their centroid") {
    SyntheticConfig cfg;
    cfg.num_images = 20;
    auto ds = generate_synthetic(cfg, seeded_rng(7));
    for (size_t i = 0; i < ds.samples.size(); ++i) {
        const auto& s = ds.samples[i];
        REQUIRE(ds.truths[i].size() == s.boxes.size());
        for (size_t b = 0; b < s.boxes.size(); ++b) {
            const auto& box = s.boxes[b];
            validate_box(box, s.image.w, s.image.h, "synthetic");
            REQUIRE(box.label.has_value());
            REQUIRE(*box.label == ds.truths[i][b].label);
            const auto& t = ds.truths[i][b];
            REQUIRE(t.cx > box.x_min);
            REQUIRE(t.cx < box.x_max);
            REQUIRE(t.cy > box.y_min);
            REQUIRE(t.cy < box.y_max);
            REQUIRE(t.cx == Catch::Approx(0.5 * (box.x_min + box.x_max)).margin(1e-9));
            REQUIRE(t.cy == Catch::Approx(0.5 * (box.y_min + box.y_max)).margin(1e-9));
        }
    }
}

TEST_CASE("nucleus paint stays inside its box") {
    SyntheticConfig cfg;
    cfg.num_images = 10;
    auto ds = generate_synthetic(cfg, seeded_rng(21));
    // Pixels outside every box must look like background: pale base plus low
    // amplitude waves and noise.
    const std::array<float, 3> base{0.88f, 0.77f, 0.83f};
    for (const auto& s : ds.samples) {
        for (int y = 0; y < s.image.h; ++y) {
            for (int x = 0; x < s.image.w; ++x) {
                const double px = x + 0.5;
                const double py = y + 0.5;
                bool inside = false;
                for (const auto& b : s.boxes) {
                    if (px >= b.x_min - 0.5 && px <= b.x_max + 0.5 && py >= b.y_min - 0.5 &&
                        py <= b.y_max + 0.5) {
                        inside = true;
                        break;
                    }
                }
                if (inside) continue;
                for (int c = 0; c < 3; ++c) {
                    REQUIRE(std::abs(s.image.at(y, x, c) - base[static_cast<size_t>(c)]) < 0.08f);
                }
            }
        }
    }
}

TEST_CASE("mean box color separates the classes well above chance") {
    SyntheticConfig cfg;
    cfg.num_images = 500;
    cfg.num_classes = 4;
    auto ds = generate_synthetic(cfg, seeded_rng(31));

    std::array<std::array<double, 3>, 4> centroid{};
    std::array<int, 4> counts{};
    const size_t train_images = 400;
    for (size_t i = 0; i < train_images; ++i) {
        const auto& s = ds.samples[i];
        for (const auto& b : s.boxes) {
            const auto mean = box_mean_color(s.image, b);
            for (int c = 0; c < 3; ++c) {
                centroid[static_cast<size_t>(*b.label)][static_cast<size_t>(c)] +=
                    mean[static_cast<size_t>(c)];
            }
            counts[static_cast<size_t>(*b.label)] += 1;
        }
    }
    for (int k = 0; k < 4; ++k) {
        REQUIRE(counts[static_cast<size_t>(k)] > 0);
        for (int c = 0; c < 3; ++c) {
            centroid[static_cast<size_t>(k)][static_cast<size_t>(c)] /=
                counts[static_cast<size_t>(k)];
        }
    }

    int correct = 0;
    int total = 0;
    for (size_t i = train_images; i < ds.samples.size(); ++i) {
        const auto& s = ds.samples[i];
        for (const auto& b : s.boxes) {
            const auto mean = box_mean_color(s.image, b);
            int best = -1;
            double best_d = 0.0;
            for (int k = 0; k < 4; ++k) {
                double d = 0.0;
                for (int c = 0; c < 3; ++c) {
                    const double diff = mean[static_cast<size_t>(c)] -
                                        centroid[static_cast<size_t>(k)][static_cast<size_t>(c)];
                    d += diff * diff;
                }
                if (best < 0 || d < best_d) {
                    best = k;
                    best_d = d;
                }
            }
            correct += (best == *b.label) ? 1 : 0;
            ++total;
        }
    }
    REQUIRE(total > 100);
    const double accuracy = static_cast<double>(correct) / total;
    INFO("mean-color classifier accuracy " << accuracy);
    REQUIRE(accuracy > 0.5);
}

TEST_CASE("overlapping radius ranges keep size uninformative") {
    auto recipes = class_recipes(4, 3.0, 6.0);
    for (size_t a = 0; a < recipes.size(); ++a) {
        for (size_t b = 0; b < recipes.size(); ++b) {
            const double lo = std::max(recipes[a].radius_lo, recipes[b].radius_lo);
            const double hi = std::min(recipes[a].radius_hi, recipes[b].radius_hi);
            REQUIRE(hi - lo > 0.5 * (recipes[a].radius_hi - recipes[a].radius_lo));
        }
    }
}

TEST_CASE("infeasible density errors out") {
    SyntheticConfig cfg;
    cfg.num_images = 1;
    cfg.image_size = 24;
    cfg.nuclei_min = 60;
    cfg.nuclei_max = 60;
    cfg.radius_min = 3.0;
    cfg.radius_max = 3.5;
    cfg.max_place_retries = 50;
    REQUIRE_THROWS_WITH(generate_synthetic(cfg, seeded_rng(1)),
                        Catch::Matchers::ContainsSubstring("infeasible"));
}

TEST_CASE("manifest round-trips ground truth centroids") {
    SyntheticConfig cfg;
    cfg.num_images = 6;
    auto ds = generate_synthetic(cfg, seeded_rng(51));
    auto dir = std::filesystem::temp_directory_path() / "nmim_test_manifest";
    std::filesystem::remove_all(dir);
    write_synthetic_dataset(dir.string(), ds, 51);
    auto truths = load_manifest_truths(dir.string());
    REQUIRE(truths.size() == ds.truths.size());
    for (size_t i = 0; i < truths.size(); ++i) {
        REQUIRE(truths[i].size() == ds.truths[i].size());
        for (size_t n = 0; n < truths[i].size(); ++n) {
            REQUIRE(truths[i][n].cx == ds.truths[i][n].cx);
            REQUIRE(truths[i][n].cy == ds.truths[i][n].cy);
            REQUIRE(truths[i][n].label == ds.truths[i][n].label);
        }
    }
    std::filesystem::remove_all(dir);
}
