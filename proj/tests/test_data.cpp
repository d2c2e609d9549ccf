#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "nmim/data.hpp"
#include "nmim/synthetic.hpp"

using namespace nmim;

namespace {

std::string temp_dir(const std::string& tag) {
    auto dir = std::filesystem::temp_directory_path() / ("nmim_test_" + tag);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir.string();
}

AnnotatedSample tiny_sample(const std::string& id, float shade) {
    AnnotatedSample s;
    s.source_id = id;
    s.image = Image(16, 16, 3, shade);
    NucleusBox b;
    b.x_min = 2.0;
    b.y_min = 3.0;
    b.x_max = 9.5;
    b.y_max = 11.25;
    b.label = 1;
    s.boxes.push_back(b);
    return s;
}

} // namespace

TEST_CASE("load_dataset returns samples in name order") {
    const std::string dir = temp_dir("order");
    save_sample(dir, tiny_sample("b_second", 0.25f));
    save_sample(dir, tiny_sample("a_first", 0.75f));

    auto samples = load_dataset(dir);
    REQUIRE(samples.size() == 2);
    REQUIRE(samples[0].source_id == "a_first");
    REQUIRE(samples[1].source_id == "b_second");
    REQUIRE(samples[0].boxes.size() == 1);
    REQUIRE(samples[0].boxes[0].label.has_value());
    REQUIRE(*samples[0].boxes[0].label == 1);
    std::filesystem::remove_all(dir);
}

TEST_CASE("load_dataset rejects inverted boxes naming the file") {
    const std::string dir = temp_dir("inverted");
    AnnotatedSample s = tiny_sample("bad", 0.5f);
    write_png(dir + "/bad.png", s.image);
    {
        std::ofstream out(dir + "/bad.json");
        out << R"({"boxes":[{"x_min":9.0,"y_min":1.0,"x_max":4.0,"y_max":5.0,"label":null}]})";
    }
    REQUIRE_THROWS_WITH(load_dataset(dir),
                        Catch::Matchers::ContainsSubstring("bad.json") &&
                            Catch::Matchers::ContainsSubstring("x_min"));
    std::filesystem::remove_all(dir);
}

TEST_CASE("malformed sidecars name file and field") {
    const std::string dir = temp_dir("malformed");
    AnnotatedSample s = tiny_sample("m", 0.5f);
    write_png(dir + "/m.png", s.image);

    SECTION("missing boxes field") {
        {
            std::ofstream out(dir + "/m.json");
            out << R"({"rects":[]})";
        }
        REQUIRE_THROWS_WITH(load_dataset(dir),
                            Catch::Matchers::ContainsSubstring("m.json") &&
                                Catch::Matchers::ContainsSubstring("boxes"));
    }
    SECTION("missing coordinate field") {
        {
            std::ofstream out(dir + "/m.json");
            out << R"({"boxes":[{"x_min":1.0,"y_min":1.0,"x_max":5.0}]})";
        }
        REQUIRE_THROWS_WITH(load_dataset(dir),
                            Catch::Matchers::ContainsSubstring("m.json") &&
                                Catch::Matchers::ContainsSubstring("y_max"));
    }
    SECTION("non-numeric coordinate") {
        {
            std::ofstream out(dir + "/m.json");
            out << R"({"boxes":[{"x_min":"left","y_min":1.0,"x_max":5.0,"y_max":5.0}]})";
        }
        REQUIRE_THROWS_WITH(load_dataset(dir),
                            Catch::Matchers::ContainsSubstring("x_min") &&
                                Catch::Matchers::ContainsSubstring("number"));
    }
    SECTION("invalid json") {
        {
            std::ofstream out(dir + "/m.json");
            out << "{not json";
        }
        REQUIRE_THROWS_WITH(load_dataset(dir), Catch::Matchers::ContainsSubstring("m.json"));
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("sidecar without image is an error") {
    const std::string dir = temp_dir("orphan");
    {
        std::ofstream out(dir + "/ghost.json");
        out << R"({"boxes":[]})";
    }
    REQUIRE_THROWS_WITH(load_dataset(dir), Catch::Matchers::ContainsSubstring("ghost"));
    std::filesystem::remove_all(dir);
}

TEST_CASE("png without sidecar is an error") {
    const std::string dir = temp_dir("nosidecar");
    write_png(dir + "/lonely.png", Image(8, 8, 3, 0.5f));
    REQUIRE_THROWS_WITH(load_dataset(dir), Catch::Matchers::ContainsSubstring("sidecar"));
    std::filesystem::remove_all(dir);
}

TEST_CASE("split argument selects a subdirectory") {
    const std::string dir = temp_dir("split");
    std::filesystem::create_directories(dir + "/train");
    save_sample(dir + "/train", tiny_sample("only", 0.5f));
    auto samples = load_dataset(dir, "train");
    REQUIRE(samples.size() == 1);
    REQUIRE(samples[0].source_id == "only");
    std::filesystem::remove_all(dir);
}

TEST_CASE("synthetic folder round-trips boxes exactly") {
    SyntheticConfig cfg;
    cfg.num_images = 100;
    cfg.image_size = 48;
    cfg.nuclei_min = 1;
    cfg.nuclei_max = 5;
    auto ds = generate_synthetic(cfg, seeded_rng(777));
    REQUIRE(ds.samples.size() == 100);

    const std::string dir = temp_dir("roundtrip");
    write_synthetic_dataset(dir, ds, 777);
    auto loaded = load_dataset(dir);
    REQUIRE(loaded.size() == ds.samples.size());
    for (size_t i = 0; i < loaded.size(); ++i) {
        REQUIRE(loaded[i].source_id == ds.samples[i].source_id);
        REQUIRE(loaded[i].boxes.size() == ds.samples[i].boxes.size());
        for (size_t b = 0; b < loaded[i].boxes.size(); ++b) {
            REQUIRE(loaded[i].boxes[b].x_min == ds.samples[i].boxes[b].x_min);
            REQUIRE(loaded[i].boxes[b].y_min == ds.samples[i].boxes[b].y_min);
            REQUIRE(loaded[i].boxes[b].x_max == ds.samples[i].boxes[b].x_max);
            REQUIRE(loaded[i].boxes[b].y_max == ds.samples[i].boxes[b].y_max);
            REQUIRE(loaded[i].boxes[b].label == ds.samples[i].boxes[b].label);
        }
    }
    std::filesystem::remove_all(dir);
}
