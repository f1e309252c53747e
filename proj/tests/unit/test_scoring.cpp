#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "bonegraph/roi_graph.hpp"
#include "bonegraph/scoring.hpp"
#include "support/oracles.hpp"

using namespace bonegraph;

namespace {

std::vector<Tensor> head_params(GroupHead& head) {
    std::vector<Tensor> ps;
    collect_params(head, ps);
    return ps;
}

std::int64_t param_count(GroupHead& head) {
    std::int64_t n = 0;
    for (auto& p : head_params(head)) n += p.numel();
    return n;
}

}  // namespace

TEST_CASE("random grouping") {
    SECTION("same seed gives the same assignment") {
        REQUIRE(random_grouping(7, 4, 17) == random_grouping(7, 4, 17));
    }
    SECTION("different seeds differ") {
        REQUIRE(random_grouping(7, 4, 17) != random_grouping(8, 4, 17));
    }
    SECTION("every group is non-empty") {
        auto a = random_grouping(3, 4, 17);
        std::set<int> groups(a.begin(), a.end());
        REQUIRE(groups == std::set<int>{0, 1, 2, 3});
    }
    SECTION("one group shares a single block") {
        auto a = random_grouping(1, 1, 17);
        for (int g : a) REQUIRE(g == 0);
    }
    SECTION("17 groups gives per-ROI blocks") {
        auto a = random_grouping(5, 17, 17);
        std::set<int> groups(a.begin(), a.end());
        REQUIRE(groups.size() == 17);
    }
    SECTION("more groups than ROIs is rejected") {
        REQUIRE_THROWS(random_grouping(1, 18, 17));
    }
}

TEST_CASE("score head forward") {
    RoiSchema schema = RoiSchema::default_schema();
    Rng rng(11);

    SECTION("identical pillars in the same group get identical scores") {
        GroupHead head = make_group_head(schema.group_of, 5, {8}, HeadBnMode::joint, rng, "head");
        // Batch of 2; rows for A1 and A2 are identical within each sample.
        std::vector<double> x(2 * 17 * 5);
        Rng r2(4);
        for (auto& v : x) v = r2.uniform(-1.0, 1.0);
        for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 5; ++c) x[(b * 17 + 1) * 5 + c] = x[(b * 17 + 0) * 5 + c];
        Tensor xs = Tensor::from_values({34, 5}, std::move(x));
        Tensor s = head.forward(xs, 2, true);
        REQUIRE(s.at({0, 0}) == s.at({1, 0}));
        REQUIRE(s.at({17, 0}) == s.at({18, 0}));
    }

    SECTION("single linear block computes w times x") {
        GroupHead head = make_group_head(std::vector<int>(17, 0), 1, {}, HeadBnMode::joint, rng, "head");
        head.blocks[0].out.w.set_values({3.0});
        head.blocks[0].out.b.set_values({0.0});
        std::vector<double> x(17);
        for (int i = 0; i < 17; ++i) x[i] = static_cast<double>(i) - 8.0;
        // Two identical samples so the pipeline-level batch rules hold.
        std::vector<double> xx = x;
        xx.insert(xx.end(), x.begin(), x.end());
        Tensor xs = Tensor::from_values({34, 1}, std::move(xx));
        Tensor s = head.forward(xs, 2, true);
        for (int i = 0; i < 17; ++i) REQUIRE(s.at({i, 0}) == Catch::Approx(3.0 * x[i]).margin(1e-12));
    }

    SECTION("inference matches a plain per-ROI loop oracle") {
        GroupHead head = make_group_head(schema.group_of, 9, {6, 4}, HeadBnMode::joint, rng, "head");
        // Randomize the normally zero-initialized pieces so the oracle is not trivial.
        for (auto& blk : head.blocks) {
            for (auto& states : blk.bn)
                for (auto& st : states) {
                    std::vector<double> g(st.channels()), b(st.channels());
                    for (auto& v : g) v = rng.uniform(0.5, 1.5);
                    for (auto& v : b) v = rng.uniform(-0.5, 0.5);
                    st.gamma.set_values(g);
                    st.beta.set_values(b);
                    for (auto& v : st.running_mean) v = rng.uniform(-0.5, 0.5);
                    for (auto& v : st.running_var) v = rng.uniform(0.5, 2.0);
                }
            std::vector<double> ob(1, rng.uniform(-0.5, 0.5));
            blk.out.b.set_values(ob);
        }
        const std::int64_t f = 9;
        std::vector<double> x(17 * f);
        for (auto& v : x) v = rng.uniform(-1.0, 1.0);
        Tensor xs = Tensor::from_values({17, f}, x);
        Tensor s = head.forward(xs, 1, false);

        // Oracle: run each ROI row through its block with plain loops.
        for (int roi = 0; roi < 17; ++roi) {
            auto& blk = head.blocks[schema.group_of[roi]];
            std::vector<double> h(x.begin() + roi * f, x.begin() + (roi + 1) * f);
            for (std::size_t li = 0; li < blk.hidden.size(); ++li) {
                const auto& w = blk.hidden[li].w;
                const auto& b = blk.hidden[li].b;
                std::vector<double> nh(static_cast<std::size_t>(w.dim(1)), 0.0);
                for (std::int64_t o = 0; o < w.dim(1); ++o) {
                    double acc = b.values()[o];
                    for (std::size_t i = 0; i < h.size(); ++i) acc += h[i] * w.values()[i * w.dim(1) + o];
                    nh[o] = acc;
                }
                const auto& st = blk.bn[li][0];
                for (std::int64_t o = 0; o < w.dim(1); ++o) {
                    const double xh = (nh[o] - st.running_mean[o]) / std::sqrt(st.running_var[o] + st.eps);
                    nh[o] = xh * st.gamma.values()[o] + st.beta.values()[o];
                    if (nh[o] < 0.0) nh[o] = 0.0;
                }
                h = nh;
            }
            double score = blk.out.b.values()[0];
            for (std::size_t i = 0; i < h.size(); ++i) score += h[i] * blk.out.w.values()[i];
            REQUIRE(s.at({roi, 0}) == Catch::Approx(score).margin(1e-10));
        }
    }

    SECTION("width mismatch is rejected") {
        GroupHead head = make_group_head(schema.group_of, 4, {8}, HeadBnMode::joint, rng, "head");
        Tensor xs = Tensor::zeros({17, 5});  // head expects f = whatever it was built with
        REQUIRE_THROWS(head.forward(xs, 1, false));
    }

    SECTION("permuting ROIs within a group permutes scores identically") {
        GroupHead head = make_group_head(schema.group_of, 7, {6}, HeadBnMode::joint, rng, "head");
        const std::int64_t f = 7;
        std::vector<double> x(2 * 17 * f);
        for (auto& v : x) v = rng.uniform(-1.0, 1.0);
        Tensor xs = Tensor::from_values({34, f}, x);
        Tensor s = head.forward(xs, 2, true);
        //

        // Swap B2 and B4 rows (indices 6 and 8) in both samples.
        auto xp = x;
        for (int b = 0; b < 2; ++b)
            for (std::int64_t c = 0; c < f; ++c)
                std::swap(xp[(b * 17 + 6) * f + c], xp[(b * 17 + 8) * f + c]);
        Tensor xsp = Tensor::from_values({34, f}, std::move(xp));
        Tensor sp = head.forward(xsp, 2, true);
        for (int b = 0; b < 2; ++b) {
            REQUIRE(sp.at({b * 17 + 6, 0}) == Catch::Approx(s.at({b * 17 + 8, 0})).margin(1e-12));
            REQUIRE(sp.at({b * 17 + 8, 0}) == Catch::Approx(s.at({b * 17 + 6, 0})).margin(1e-12));
            REQUIRE(sp.at({b * 17 + 0, 0}) == Catch::Approx(s.at({b * 17 + 0, 0})).margin(1e-12));
        }
    }
}

TEST_CASE("head parameter sharing") {
    Rng rng(1);
    RoiSchema schema = RoiSchema::default_schema();

    SECTION("parameter count does not depend on the ROI count") {
        GroupHead h17 = make_group_head(schema.group_of, 4, {32, 16}, HeadBnMode::joint, rng, "head");
        // Hypothetical doubled schema: every ROI appears twice, same 4 groups.
        std::vector<int> doubled = schema.group_of;
        doubled.insert(doubled.end(), schema.group_of.begin(), schema.group_of.end());
        Rng rng2(1);
        GroupHead h34 = make_group_head(doubled, 4, {32, 16}, HeadBnMode::joint, rng2, "head");
        REQUIRE(param_count(h17) == param_count(h34));
    }

    SECTION("per-ROI batch-norm mode shares gamma/beta so counts match joint mode") {
        Rng a(2), b(2);
        GroupHead joint = make_group_head(schema.group_of, 4, {8, 4}, HeadBnMode::joint, a, "head");
        GroupHead per_roi = make_group_head(schema.group_of, 4, {8, 4}, HeadBnMode::per_roi, b, "head");
        REQUIRE(param_count(joint) == param_count(per_roi));
    }

    SECTION("per-ROI mode normalizes each slot over the batch only") {
        Rng r(5);
        GroupHead head = make_group_head(schema.group_of, 6, {4}, HeadBnMode::per_roi, r, "head");
        std::vector<double> x(4 * 17 * 6);
        for (auto& v : x) v = r.uniform(-1.0, 1.0);
        Tensor xs = Tensor::from_values({68, 6}, std::move(x));
        Tensor s = head.forward(xs, 4, true);
        REQUIRE(s.shape() == Shape{68, 1});
        for (double v : s.values()) REQUIRE(std::isfinite(v));
    }
}
