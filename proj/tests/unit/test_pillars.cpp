#include <catch2/catch_amalgamated.hpp>

#include "bonegraph/pillars.hpp"
#include "support/oracles.hpp"

using namespace bonegraph;

namespace {

FeatureMap random_feature_map(std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t image_h,
                              std::int64_t image_w, Rng& rng, bool requires_grad = false) {
    std::vector<double> v(static_cast<std::size_t>(c * h * w));
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return FeatureMap{Tensor::from_values({c, h, w}, std::move(v), requires_grad), image_h, image_w};
}

}  // namespace

TEST_CASE("position projection") {
    SECTION("floor arithmetic") {
        auto [i, j] = project_position({259, 133}, 16, 32, 32);
        REQUIRE(i == 16);
        REQUIRE(j == 8);
    }
    SECTION("origin maps to origin") {
        auto [i, j] = project_position({0, 0}, 7, 10, 10);
        REQUIRE(i == 0);
        REQUIRE(j == 0);
    }
    SECTION("last pixel of a 512 image lands in the last cell of a 32x32 map") {
        auto [i, j] = project_position({511, 511}, 16, 32, 32);
        REQUIRE(i == 31);
        REQUIRE(j == 31);
    }
    SECTION("out-of-bounds projection reports inconsistency") {
        REQUIRE_THROWS_WITH(project_position({512, 10}, 16, 32, 32),
                            Catch::Matchers::ContainsSubstring("inconsistent"));
    }
}

TEST_CASE("pillar extraction") {
    Rng rng(3);
    SECTION("constant field gives constant rows") {
        FeatureMap fm{Tensor::full({4, 8, 8}, 2.5), 128, 128};
        std::vector<RoiCenter> centers{{0, 0}, {100, 50}, {127, 127}};
        Tensor p = extract_pillars(fm, centers, 16);
        REQUIRE(p.shape() == Shape{3, 4});
        for (double v : p.values()) REQUIRE(v == 2.5);
    }
    SECTION("one-hot field selects exactly one ROI") {
        std::vector<double> v(2 * 4 * 4, 0.0);
        // channel 0, cell (2, 1)
        v[0 * 16 + 2 * 4 + 1] = 7.0;
        FeatureMap fm{Tensor::from_values({2, 4, 4}, std::move(v)), 64, 64};
        std::vector<RoiCenter> centers{{5, 5}, {37, 20}, {60, 60}};  // cells (0,0), (2,1), (3,3)
        Tensor p = extract_pillars(fm, centers, 16);
        REQUIRE(p.at({1, 0}) == 7.0);
        REQUIRE(p.at({0, 0}) == 0.0);
        REQUIRE(p.at({2, 0}) == 0.0);
        REQUIRE(p.at({0, 1}) == 0.0);
    }
    SECTION("random map matches a direct indexing oracle exactly") {
        FeatureMap fm = random_feature_map(6, 8, 8, 128, 128, rng);
        std::vector<RoiCenter> centers;
        for (int k = 0; k < 17; ++k)
            centers.push_back({static_cast<std::int64_t>(rng.next_below(128)),
                               static_cast<std::int64_t>(rng.next_below(128))});
        Tensor p = extract_pillars(fm, centers, 16);
        for (int k = 0; k < 17; ++k) {
            const std::int64_t i = centers[k].row / 16, j = centers[k].col / 16;
            for (std::int64_t c = 0; c < 6; ++c) REQUIRE(p.at({k, c}) == fm.map.at({c, i, j}));
        }
    }
    SECTION("extraction is permutation-equivariant in ROI order") {
        FeatureMap fm = random_feature_map(3, 4, 4, 64, 64, rng);
        std::vector<RoiCenter> centers{{5, 9}, {20, 33}, {50, 1}, {63, 63}};
        std::vector<RoiCenter> permuted{centers[2], centers[0], centers[3], centers[1]};
        Tensor a = extract_pillars(fm, centers, 16);
        Tensor b = extract_pillars(fm, permuted, 16);
        std::vector<int> perm{2, 0, 3, 1};
        for (int k = 0; k < 4; ++k)
            for (std::int64_t c = 0; c < 3; ++c) REQUIRE(b.at({k, c}) == a.at({perm[k], c}));
    }
    SECTION("gradient reaches exactly the selected cells") {
        FeatureMap fm = random_feature_map(3, 4, 4, 64, 64, rng, true);
        // Two ROIs share cell (1,1); one sits at (3,2).
        std::vector<RoiCenter> centers{{17, 18}, {30, 25}, {60, 40}};
        Tensor p = extract_pillars(fm, centers, 16);
        Tensor loss = sum(mul(p, p));
        fm.map.zero_grad();
        loss.backward();
        const auto& g = fm.map.grad();
        for (std::int64_t c = 0; c < 3; ++c)
            for (std::int64_t i = 0; i < 4; ++i)
                for (std::int64_t j = 0; j < 4; ++j) {
                    const bool selected = (i == 1 && j == 1) || (i == 3 && j == 2);
                    const double gv = g[(c * 4 + i) * 4 + j];
                    if (selected)
                        REQUIRE(gv != 0.0);
                    else
                        REQUIRE(gv == 0.0);
                }
    }
}

TEST_CASE("pillar augmentation") {
    Tensor raw = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    SECTION("gender and normalized coordinates are appended") {
        std::vector<RoiCenter> centers{{256, 256}, {0, 0}};
        Tensor x = augment_pillars(raw, 1, centers, 512, 512);
        REQUIRE(x.shape() == Shape{2, 6});
        REQUIRE(x.at({0, 3}) == 1.0);
        REQUIRE(x.at({0, 4}) == 0.5);
        REQUIRE(x.at({0, 5}) == 0.5);
        REQUIRE(x.at({1, 3}) == 1.0);
        REQUIRE(x.at({1, 4}) == 0.0);
        REQUIRE(x.at({1, 5}) == 0.0);
    }
    SECTION("gender zero at the origin appends zeros") {
        std::vector<RoiCenter> centers{{0, 0}, {0, 0}};
        Tensor x = augment_pillars(raw, 0, centers, 512, 512);
        for (std::int64_t r = 0; r < 2; ++r)
            for (std::int64_t c = 3; c < 6; ++c) REQUIRE(x.at({r, c}) == 0.0);
    }
    SECTION("first C columns equal the raw pillars") {
        std::vector<RoiCenter> centers{{10, 20}, {30, 40}};
        Tensor x = augment_pillars(raw, 0, centers, 64, 64);
        for (std::int64_t r = 0; r < 2; ++r)
            for (std::int64_t c = 0; c < 3; ++c) REQUIRE(x.at({r, c}) == raw.at({r, c}));
    }
}
