#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "nmim/gradcheck.hpp"
#include "nmim/positional.hpp"
#include "nmim/rng.hpp"

#include "helpers.hpp"

using namespace nmim;

TEST_CASE("gamma at zero alternates 0 and 1") {
    auto g = gamma_encoding(0.0, 64);
    REQUIRE(g.size() == 16);
    for (size_t i = 0; i < g.size(); i += 2) {
        REQUIRE(g[i] == 0.0);
        REQUIRE(g[i + 1] == 1.0);
    }
}

TEST_CASE("gamma at one matches the integer-argument pattern") {
    auto g = gamma_encoding(1.0, 64);
    REQUIRE(g.size() == 16);
    REQUIRE(g[0] == Catch::Approx(0.0).margin(1e-9));
    REQUIRE(g[1] == Catch::Approx(-1.0).margin(1e-9));
    for (size_t m = 1; m < 8; ++m) {
        REQUIRE(g[m * 2] == Catch::Approx(0.0).margin(1e-9));
        REQUIRE(g[m * 2 + 1] == Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("gamma length tracks D") {
    REQUIRE(gamma_encoding(0.3, 96).size() == 24);
    REQUIRE(gamma_encoding(0.3, 8).size() == 2);
    REQUIRE_THROWS_WITH(gamma_encoding(0.3, 20), Catch::Matchers::ContainsSubstring("multiple of 8"));
    REQUIRE_THROWS(gamma_encoding(0.3, 0));
    REQUIRE_THROWS(gamma_encoding(0.3, -8));
}

TEST_CASE("encode_position concatenates gammas in x,y,w,h order") {
    const int D = 64;
    PatchGeometry g;
    g.x = 0.0;
    g.y = 0.0;
    g.w = 0.125;
    g.h = 0.5;
    auto enc = encode_position(g, D);
    REQUIRE(enc.size() == 64);
    for (size_t i = 0; i < 32; i += 2) {
        REQUIRE(enc[i] == 0.0);
        REQUIRE(enc[i + 1] == 1.0);
    }
    auto gw = gamma_encoding(0.125, D);
    auto gh = gamma_encoding(0.5, D);
    for (size_t i = 0; i < 16; ++i) {
        REQUIRE(enc[32 + i] == gw[i]);
        REQUIRE(enc[48 + i] == gh[i]);
    }
}

TEST_CASE("first cell of the paper grid encodes its normalized geometry") {
    const int D = 64;
    auto cells = grid_geometries(28, 28);
    REQUIRE(cells.size() == 784);
    const auto& g0 = cells[0];
    REQUIRE(g0.x == Catch::Approx(8.0 / 448.0).margin(1e-15));
    REQUIRE(g0.y == Catch::Approx(8.0 / 448.0).margin(1e-15));
    REQUIRE(g0.w == Catch::Approx(16.0 / 448.0).margin(1e-15));
    REQUIRE(g0.h == Catch::Approx(16.0 / 448.0).margin(1e-15));

    auto enc = encode_position(g0, D);
    auto gx = gamma_encoding(g0.x, D);
    auto gy = gamma_encoding(g0.y, D);
    auto gw = gamma_encoding(g0.w, D);
    auto gh = gamma_encoding(g0.h, D);
    for (size_t i = 0; i < 16; ++i) {
        REQUIRE(enc[i] == gx[i]);
        REQUIRE(enc[16 + i] == gy[i]);
        REQUIRE(enc[32 + i] == gw[i]);
        REQUIRE(enc[48 + i] == gh[i]);
    }
}

TEST_CASE("geometry invariants are enforced") {
    PatchGeometry bad;
    bad.x = 1.5;
    bad.y = 0.5;
    bad.w = 0.1;
    bad.h = 0.1;
    REQUIRE_THROWS(encode_position(bad, 64));
    bad.x = 0.5;
    bad.w = 0.0;
    REQUIRE_THROWS(encode_position(bad, 64));
    bad.w = 1.5;
    REQUIRE_THROWS(encode_position(bad, 64));
}

TEST_CASE("grid geometries cover the unit square uniformly") {
    auto one = grid_geometries(1, 1);
    REQUIRE(one.size() == 1);
    REQUIRE(one[0].x == 0.5);
    REQUIRE(one[0].y == 0.5);
    REQUIRE(one[0].w == 1.0);
    REQUIRE(one[0].h == 1.0);

    auto four = grid_geometries(2, 2);
    REQUIRE(four.size() == 4);
    REQUIRE(four[0].x == 0.25);
    REQUIRE(four[0].y == 0.25);
    REQUIRE(four[1].x == 0.75);
    REQUIRE(four[1].y == 0.25);
    REQUIRE(four[2].x == 0.25);
    REQUIRE(four[2].y == 0.75);
    REQUIRE(four[3].x == 0.75);
    REQUIRE(four[3].y == 0.75);

    auto grid = grid_geometries(28, 28);
    for (size_t i = 0; i < grid.size(); ++i) {
        REQUIRE(grid[i].w == Catch::Approx(1.0 / 28).margin(1e-15));
        REQUIRE(grid[i].h == Catch::Approx(1.0 / 28).margin(1e-15));
        const int row = static_cast<int>(i) / 28;
        const int col = static_cast<int>(i) % 28;
        REQUIRE(grid[i].x == Catch::Approx((col + 0.5) / 28).margin(1e-15));
        REQUIRE(grid[i].y == Catch::Approx((row + 0.5) / 28).margin(1e-15));
    }
}

TEST_CASE("encodings are pairwise distinct over the paper grid plus random boxes") {
    const int D = 64;
    std::vector<std::vector<double>> encs;
    for (const auto& g : grid_geometries(28, 28)) {
        encs.push_back(encode_position(g, D));
    }
    Rng rng = seeded_rng(80);
    for (int i = 0; i < 100; ++i) {
        NucleusBox b;
        b.x_min = rng.uniform(0.0, 440.0);
        b.y_min = rng.uniform(0.0, 440.0);
        b.x_max = b.x_min + rng.uniform(2.0, 447.0 - b.x_min);
        b.y_max = b.y_min + rng.uniform(2.0, 447.0 - b.y_min);
        encs.push_back(encode_position(box_geometry(b, 448, 448), D));
    }
    std::sort(encs.begin(), encs.end());
    for (size_t i = 1; i < encs.size(); ++i) {
        REQUIRE(encs[i] != encs[i - 1]);
    }
}

TEST_CASE("box geometry uses clipped extents") {
    NucleusBox b;
    b.x_min = -10.0;
    b.y_min = 20.0;
    b.x_max = 30.0;
    b.y_max = 120.0;
    auto g = box_geometry(b, 100, 100);
    REQUIRE(g.x == Catch::Approx(15.0 / 100.0));
    REQUIRE(g.w == Catch::Approx(30.0 / 100.0));
    REQUIRE(g.y == Catch::Approx(60.0 / 100.0));
    REQUIRE(g.h == Catch::Approx(80.0 / 100.0));

    NucleusBox outside;
    outside.x_min = 200.0;
    outside.y_min = 0.0;
    outside.x_max = 250.0;
    outside.y_max = 50.0;
    REQUIRE_THROWS(box_geometry(outside, 100, 100));
}

TEST_CASE("add_positions with no geometries and zero cls is the identity") {
    Rng rng = seeded_rng(81);
    auto h0 = testutil::random_tensor({5, 8}, rng);
    auto cls = Tensor<double>::zeros({1, 8}, false);
    auto out = add_positions(h0, {}, cls);
    REQUIRE(out.values() == h0.values());
}

TEST_CASE("add_positions on zero input returns the encodings") {
    const int D = 8;
    auto h0 = Tensor<double>::zeros({4, D}, false);
    Rng rng = seeded_rng(82);
    auto cls = testutil::random_tensor({1, D}, rng);
    std::vector<PatchGeometry> geoms = grid_geometries(1, 2);
    auto out = add_positions(h0, geoms, cls);

    for (int d = 0; d < D; ++d) {
        REQUIRE(out.values()[static_cast<size_t>(d)] == cls.values()[static_cast<size_t>(d)]);
    }
    for (size_t i = 0; i < geoms.size(); ++i) {
        auto enc = encode_position(geoms[i], D);
        for (int d = 0; d < D; ++d) {
            REQUIRE(out.values()[(i + 1) * D + static_cast<size_t>(d)] ==
                    Catch::Approx(enc[static_cast<size_t>(d)]).margin(1e-12));
        }
    }
    // Trailing PAD row stays zero.
    for (int d = 0; d < D; ++d) {
        REQUIRE(out.values()[3 * D + static_cast<size_t>(d)] == 0.0);
    }
}

TEST_CASE("add_positions matches the per-token addition oracle") {
    const int D = 16;
    Rng rng = seeded_rng(83);
    auto h0 = testutil::random_tensor({6, D}, rng);
    auto cls = testutil::random_tensor({1, D}, rng);
    std::vector<PatchGeometry> geoms = grid_geometries(2, 2);
    auto out = add_positions(h0, geoms, cls);

    for (int t = 0; t < 6; ++t) {
        for (int d = 0; d < D; ++d) {
            double want = h0.values()[static_cast<size_t>(t) * D + static_cast<size_t>(d)];
            if (t == 0) {
                want += cls.values()[static_cast<size_t>(d)];
            } else if (t <= 4) {
                want += encode_position(geoms[static_cast<size_t>(t - 1)], D)[static_cast<size_t>(d)];
            }
            REQUIRE(out.values()[static_cast<size_t>(t) * D + static_cast<size_t>(d)] ==
                    Catch::Approx(want).margin(1e-12));
        }
    }
}

TEST_CASE("pad rows are bit-identical after position addition") {
    const int D = 8;
    Rng rng = seeded_rng(84);
    auto h0 = testutil::random_tensor({5, D}, rng);
    auto cls = testutil::random_tensor({1, D}, rng);
    std::vector<PatchGeometry> geoms = grid_geometries(1, 2);
    auto out = add_positions(h0, geoms, cls);
    for (int t = 3; t < 5; ++t) {
        for (int d = 0; d < D; ++d) {
            REQUIRE(out.values()[static_cast<size_t>(t) * D + static_cast<size_t>(d)] ==
                    h0.values()[static_cast<size_t>(t) * D + static_cast<size_t>(d)]);
        }
    }
}

TEST_CASE("too many geometries for the sequence is an error") {
    auto h0 = Tensor<double>::zeros({3, 8}, false);
    auto cls = Tensor<double>::zeros({1, 8}, false);
    REQUIRE_THROWS_WITH(add_positions(h0, grid_geometries(1, 3), cls),
                        Catch::Matchers::ContainsSubstring("do not fit"));
}

TEST_CASE("positions are differentiable in the input and the cls vector") {
    const int D = 8;
    Rng rng = seeded_rng(85);
    std::vector<PatchGeometry> geoms = grid_geometries(1, 2);

    auto h0 = testutil::random_tensor({4, D}, rng);
    const double err_h = grad_check(
        [&](const Tensor<double>& h) {
            auto cls = Tensor<double>::zeros({1, D}, false);
            return testutil::weighted_sum(add_positions(h, geoms, cls));
        },
        h0, 1e-5);
    REQUIRE(err_h < 1e-6);

    auto cls0 = testutil::random_tensor({1, D}, rng);
    auto fixed_h = testutil::random_tensor({4, D}, rng);
    const double err_c = grad_check(
        [&](const Tensor<double>& cls) {
            return testutil::weighted_sum(add_positions(fixed_h, geoms, cls));
        },
        cls0, 1e-5);
    REQUIRE(err_c < 1e-6);
}
