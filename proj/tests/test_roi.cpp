#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "nmim/gradcheck.hpp"
#include "nmim/roi.hpp"
#include "nmim/rng.hpp"

#include "helpers.hpp"

using namespace nmim;

namespace {

FeatureMap<double> map_from(const Tensor<double>& cells, int gh, int gw) {
    FeatureMap<double> fm;
    fm.grid_h = gh;
    fm.grid_w = gw;
    fm.cells = cells;
    return fm;
}

// Independent bilinear lookup: cell (i,j) is centered at (i+0.5, j+0.5) and
// values clamp at the border.
double bilinear_at(const std::vector<double>& v, int H, int W, int D, double row, double col,
                   int d) {
    double fy = std::clamp(row - 0.5, 0.0, static_cast<double>(H - 1));
    double fx = std::clamp(col - 0.5, 0.0, static_cast<double>(W - 1));
    const int y0 = std::min(static_cast<int>(std::floor(fy)), H - 1);
    const int x0 = std::min(static_cast<int>(std::floor(fx)), W - 1);
    const int y1 = std::min(y0 + 1, H - 1);
    const int x1 = std::min(x0 + 1, W - 1);
    const double wy = fy - y0;
    const double wx = fx - x0;
    auto at = [&](int y, int x) {
        return v[(static_cast<size_t>(y) * W + static_cast<size_t>(x)) * D +
                 static_cast<size_t>(d)];
    };
    return at(y0, x0) * (1 - wy) * (1 - wx) + at(y0, x1) * (1 - wy) * wx +
           at(y1, x0) * wy * (1 - wx) + at(y1, x1) * wy * wx;
}

// Naive re-derivation of the aligned pooling for one box.
std::vector<double> roi_oracle(const std::vector<double>& cells, int gh, int gw, int D,
                               const NucleusBox& box, int P, int k, int spb) {
    NucleusBox fb = box;
    fb.x_min = std::clamp(fb.x_min, 0.0, static_cast<double>(gw) * P) / P;
    fb.x_max = std::clamp(fb.x_max, 0.0, static_cast<double>(gw) * P) / P;
    fb.y_min = std::clamp(fb.y_min, 0.0, static_cast<double>(gh) * P) / P;
    fb.y_max = std::clamp(fb.y_max, 0.0, static_cast<double>(gh) * P) / P;
    const double bw = (fb.x_max - fb.x_min) / k;
    const double bh = (fb.y_max - fb.y_min) / k;
    std::vector<double> out(static_cast<size_t>(k) * k * D, 0.0);
    for (int by = 0; by < k; ++by) {
        for (int bx = 0; bx < k; ++bx) {
            for (int d = 0; d < D; ++d) {
                double acc = 0.0;
                for (int sy = 0; sy < spb; ++sy) {
                    for (int sx = 0; sx < spb; ++sx) {
                        const double row = fb.y_min + (by + (sy + 0.5) / spb) * bh;
                        const double col = fb.x_min + (bx + (sx + 0.5) / spb) * bw;
                        acc += bilinear_at(cells, gh, gw, D, row, col, d);
                    }
                }
                out[(static_cast<size_t>(by) * k + static_cast<size_t>(bx)) * D +
                    static_cast<size_t>(d)] = acc / (spb * spb);
            }
        }
    }
    return out;
}

NucleusBox make_box(double x0, double y0, double x1, double y1) {
    NucleusBox b;
    b.x_min = x0;
    b.y_min = y0;
    b.x_max = x1;
    b.y_max = y1;
    return b;
}

} // namespace

TEST_CASE("constant feature maps pool to the constant") {
    auto cells = Tensor<double>::full({16, 3}, 0.75, false);
    auto fm = map_from(cells, 4, 4);
    for (int k : {1, 2, 3}) {
        auto out = roi_align(fm, make_box(3.0, 5.0, 21.0, 13.5), 8, k, 2);
        REQUIRE(out.dim(0) == k * k);
        REQUIRE(out.dim(1) == 3);
        for (double v : out.values()) {
            REQUIRE(v == Catch::Approx(0.75).margin(1e-12));
        }
    }
}

TEST_CASE("a box covering one grid cell returns that cell") {
    Rng rng = seeded_rng(70);
    auto cells = testutil::random_tensor({12, 4}, rng);
    auto fm = map_from(cells, 3, 4);
    const int P = 16;
    // Grid cell (row 1, col 2) covers pixels [32,48) x [16,32).
    auto out = roi_align(fm, make_box(32.0, 16.0, 48.0, 32.0), P, 1, 1);
    REQUIRE(out.dim(0) == 1);
    for (int d = 0; d < 4; ++d) {
        REQUIRE(out.values()[static_cast<size_t>(d)] ==
                Catch::Approx(cells.values()[(1 * 4 + 2) * 4 + static_cast<size_t>(d)])
                    .margin(1e-12));
    }
}

TEST_CASE("roi_align matches the dense bilinear oracle") {
    Rng rng = seeded_rng(71);
    auto cells = testutil::random_tensor({16, 2}, rng);
    auto fm = map_from(cells, 4, 4);
    const int P = 8;
    const std::vector<NucleusBox> boxes = {
        make_box(3.0, 2.0, 29.0, 27.0),
        make_box(0.25, 0.5, 10.0, 9.0),
        make_box(12.7, 4.4, 31.9, 30.2),
        make_box(-5.0, -3.0, 20.0, 18.0), // clipped
    };
    for (const auto& box : boxes) {
        for (int spb : {1, 2, 3}) {
            auto got = roi_align(fm, box, P, 3, spb);
            auto want = roi_oracle(cells.values(), 4, 4, 2, box, P, 3, spb);
            REQUIRE(testutil::max_abs_diff(got.values(), want) < 1e-6);
        }
    }
}

TEST_CASE("cells outside the bilinear support do not matter") {
    Rng rng = seeded_rng(72);
    auto cells = testutil::random_tensor({36, 2}, rng);
    auto fm = map_from(cells, 6, 6);
    const int P = 8;
    // Box well inside the top-left 3x3 cells (feature coords ~[0.4, 2.1]).
    const NucleusBox box = make_box(3.5, 3.2, 17.0, 16.5);
    auto base = roi_align(fm, box, P, 3, 2);

    auto perturbed_vals = cells.values();
    // Bottom-right corner cell is far from the box support.
    perturbed_vals[35 * 2] += 100.0;
    perturbed_vals[35 * 2 + 1] -= 50.0;
    auto fm2 = map_from(Tensor<double>::from_data({36, 2}, perturbed_vals, false), 6, 6);
    auto moved = roi_align(fm2, box, P, 3, 2);
    REQUIRE(base.values() == moved.values());
}

TEST_CASE("roi_align gradients match finite differences") {
    Rng rng = seeded_rng(73);
    auto cells0 = testutil::random_tensor({16, 3}, rng);
    const NucleusBox box = make_box(2.5, 1.0, 30.0, 28.0);
    const double err = grad_check(
        [&](const Tensor<double>& cells) {
            auto fm = map_from(cells, 4, 4);
            return testutil::weighted_sum(roi_align(fm, box, 8, 3, 2));
        },
        cells0, 1e-5);
    REQUIRE(err < 1e-5);
}

TEST_CASE("boxes outside the image are rejected") {
    auto cells = Tensor<double>::zeros({16, 2}, false);
    auto fm = map_from(cells, 4, 4);
    REQUIRE_THROWS_WITH(roi_align(fm, make_box(40.0, 2.0, 50.0, 10.0), 8, 3, 2),
                        Catch::Matchers::ContainsSubstring("no area"));
    REQUIRE_THROWS(roi_align(fm, make_box(-10.0, -10.0, 0.0, 0.0), 8, 3, 2));
}

TEST_CASE("center-tap kernel extracts the center vector") {
    Rng rng = seeded_rng(74);
    const int k = 3, D = 5;
    auto c_ins = testutil::random_tensor({k * k, D}, rng);
    auto kernel = Tensor<double>::zeros({k, k, D, D}, false);
    for (int d = 0; d < D; ++d) {
        // Spatial center (1,1), identity over channels.
        kernel.values()[((1 * k + 1) * D + static_cast<size_t>(d)) * D + static_cast<size_t>(d)] =
            1.0;
    }
    auto bias = Tensor<double>::zeros({D}, false);
    auto p = embed_instance(c_ins, k, kernel, bias);
    REQUIRE(p.dim(0) == 1);
    REQUIRE(p.dim(1) == D);
    for (int d = 0; d < D; ++d) {
        REQUIRE(p.values()[static_cast<size_t>(d)] ==
                Catch::Approx(c_ins.values()[static_cast<size_t>(k + 1) * D + static_cast<size_t>(d)])
                    .margin(1e-12));
    }
}

TEST_CASE("zero instance features return the bias") {
    Rng rng = seeded_rng(75);
    const int k = 2, D = 4;
    auto c_ins = Tensor<double>::zeros({k * k, D}, false);
    auto kernel = testutil::random_tensor({k, k, D, D}, rng);
    auto bias = testutil::random_tensor({D}, rng);
    auto p = embed_instance(c_ins, k, kernel, bias);
    for (int d = 0; d < D; ++d) {
        REQUIRE(p.values()[static_cast<size_t>(d)] ==
                Catch::Approx(bias.values()[static_cast<size_t>(d)]).margin(1e-12));
    }
}

TEST_CASE("instance embedding matches the direct summation oracle") {
    Rng rng = seeded_rng(76);
    const int k = 3, D = 4, Dout = 6;
    auto c_ins = testutil::random_tensor({k * k, D}, rng);
    auto kernel = testutil::random_tensor({k, k, D, Dout}, rng);
    auto bias = testutil::random_tensor({Dout}, rng);
    auto p = embed_instance(c_ins, k, kernel, bias);
    for (int o = 0; o < Dout; ++o) {
        double acc = bias.values()[static_cast<size_t>(o)];
        for (int y = 0; y < k; ++y) {
            for (int x = 0; x < k; ++x) {
                for (int d = 0; d < D; ++d) {
                    acc += c_ins.values()[(static_cast<size_t>(y) * k + static_cast<size_t>(x)) * D +
                                          static_cast<size_t>(d)] *
                           kernel.values()[((static_cast<size_t>(y) * k + static_cast<size_t>(x)) * D +
                                            static_cast<size_t>(d)) *
                                               Dout +
                                           static_cast<size_t>(o)];
                }
            }
        }
        REQUIRE(p.values()[static_cast<size_t>(o)] == Catch::Approx(acc).margin(1e-6));
    }
}

TEST_CASE("instance embedding rejects mismatched kernels") {
    auto c_ins = Tensor<double>::zeros({9, 4}, false);
    auto kernel = Tensor<double>::zeros({2, 2, 4, 4}, false);
    auto bias = Tensor<double>::zeros({4}, false);
    REQUIRE_THROWS(embed_instance(c_ins, 3, kernel, bias));
    auto kernel2 = Tensor<double>::zeros({3, 3, 5, 4}, false);
    REQUIRE_THROWS(embed_instance(c_ins, 3, kernel2, bias));
}

TEST_CASE("instance embedding is differentiable in all inputs") {
    Rng rng = seeded_rng(77);
    const int k = 2, D = 3, Dout = 3;
    auto c0 = testutil::random_tensor({k * k, D}, rng);
    auto k0 = testutil::random_tensor({k, k, D, Dout}, rng);
    auto b0 = testutil::random_tensor({Dout}, rng);

    const double err_c = grad_check(
        [&](const Tensor<double>& c) {
            return testutil::weighted_sum(embed_instance(c, k, k0, b0));
        },
        c0, 1e-5);
    REQUIRE(err_c < 1e-6);

    const double err_k = grad_check(
        [&](const Tensor<double>& kk) {
            return testutil::weighted_sum(embed_instance(c0, k, kk, b0));
        },
        k0, 1e-5);
    REQUIRE(err_k < 1e-6);

    const double err_b = grad_check(
        [&](const Tensor<double>& b) {
            return testutil::weighted_sum(embed_instance(c0, k, k0, b));
        },
        b0, 1e-5);
    REQUIRE(err_b < 1e-6);
}

TEST_CASE("masked instance selection follows the strict overlap rule") {
    const int P = 16;
    std::vector<NucleusBox> boxes;
    boxes.push_back(make_box(16.0, 16.0, 32.0, 32.0)); // corner-touches patch (0,0)
    boxes.push_back(make_box(0.0, 0.0, 64.0, 64.0));   // whole image
    boxes.push_back(make_box(40.0, 2.0, 60.0, 12.0));  // inside patch row 0

    SECTION("empty mask selects nothing") {
        MaskSet empty;
        REQUIRE(masked_instance_set(boxes, empty, 4, 4, P).empty());
    }
    SECTION("corner touching does not count") {
        MaskSet m;
        m.indices = {0}; // patch (0,0): pixels [0,16)^2; box 0 meets it at one corner
        auto sel = masked_instance_set(boxes, m, 4, 4, P);
        REQUIRE(sel == std::vector<int>{1});
    }
    SECTION("edge touching does not count either") {
        MaskSet m;
        m.indices = {1}; // patch (0,1): x in [16,32), y in [0,16)
        auto sel = masked_instance_set(boxes, m, 4, 4, P);
        // Box 0 shares only the y=16 edge with patch (0,1).
        REQUIRE(sel == std::vector<int>{1});
    }
    SECTION("a patch under the small box selects it") {
        MaskSet m;
        m.indices = {2}; // patch (0,2): x in [32,48), y in [0,16)
        auto sel = masked_instance_set(boxes, m, 4, 4, P);
        REQUIRE(sel == std::vector<int>{1, 2});
    }
    SECTION("positive overlap counts") {
        MaskSet m;
        m.indices = {5}; // patch (1,1): [16,32) x [16,32)
        auto sel = masked_instance_set(boxes, m, 4, 4, P);
        REQUIRE(sel == std::vector<int>{0, 1});
    }
}

TEST_CASE("masked instance selection agrees with a rasterization oracle") {
    Rng rng = seeded_rng(78);
    const int gh = 4, gw = 4, P = 8;
    const int sub = 16; // sub-pixel sampling resolution
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<NucleusBox> boxes;
        for (int b = 0; b < 6; ++b) {
            // Quarter-pixel coordinates so overlaps are never thinner than 1/4.
            const double x0 = rng.uniform_int(0, 4 * gw * P - 5) / 4.0;
            const double y0 = rng.uniform_int(0, 4 * gh * P - 5) / 4.0;
            const double x1 = x0 + rng.uniform_int(1, 4 * gw * P - static_cast<int>(4 * x0)) / 4.0;
            const double y1 = y0 + rng.uniform_int(1, 4 * gh * P - static_cast<int>(4 * y0)) / 4.0;
            boxes.push_back(make_box(x0, y0, x1, y1));
        }
        MaskSet m;
        for (int i = 0; i < gh * gw; ++i) {
            if (rng.uniform() < 0.3) m.indices.push_back(i);
        }
        auto got = masked_instance_set(boxes, m, gh, gw, P);

        std::vector<int> want;
        for (size_t j = 0; j < boxes.size(); ++j) {
            bool hit = false;
            for (int idx : m.indices) {
                const int gy = idx / gw;
                const int gx = idx % gw;
                for (int sy = 0; sy < P * sub && !hit; ++sy) {
                    for (int sx = 0; sx < P * sub && !hit; ++sx) {
                        const double px = gx * P + (sx + 0.5) / sub;
                        const double py = gy * P + (sy + 0.5) / sub;
                        if (px > boxes[j].x_min && px < boxes[j].x_max && py > boxes[j].y_min &&
                            py < boxes[j].y_max) {
                            hit = true;
                        }
                    }
                }
                if (hit) break;
            }
            if (hit) want.push_back(static_cast<int>(j));
        }
        REQUIRE(got == want);
    }
}
