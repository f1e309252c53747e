#include <catch2/catch_amalgamated.hpp>

#include "bonegraph/backbone.hpp"
#include "support/oracles.hpp"

using namespace bonegraph;

namespace {

std::int64_t backbone_param_count(Backbone& bb) {
    std::vector<Tensor> ps;
    bb.collect_params(ps);
    std::int64_t n = 0;
    for (auto& p : ps) n += p.numel();
    return n;
}

Tensor random_images(std::int64_t b, std::int64_t h, std::int64_t w, Rng& rng, bool rg = false) {
    std::vector<double> v(static_cast<std::size_t>(b * h * w));
    for (auto& x : v) x = rng.uniform(0.0, 1.0);
    return Tensor::from_values({b, 1, h, w}, std::move(v), rg);
}

}  // namespace

TEST_CASE("backbone construction") {
    SECTION("same seed gives bit-identical parameters") {
        BackboneConfig cfg;
        cfg.stage_widths = {4, 8, 8, 8};
        cfg.out_channels = 8;
        Rng a(5), b(5);
        Backbone b1 = build_backbone(cfg, a);
        Backbone b2 = build_backbone(cfg, b);
        std::vector<Tensor> p1, p2;
        b1.collect_params(p1);
        b2.collect_params(p2);
        REQUIRE(p1.size() == p2.size());
        for (std::size_t i = 0; i < p1.size(); ++i) REQUIRE(p1[i].values() == p2[i].values());
    }
    SECTION("toy config parameter count equals the closed-form sum") {
        BackboneConfig cfg;
        cfg.stage_widths = {4, 6, 8, 10};
        cfg.out_channels = 16;
        Rng rng(1);
        Backbone bb = build_backbone(cfg, rng);
        // Stages: 9 * in * out conv weights plus 2 * out batch-norm affine.
        std::int64_t expect = 0;
        std::int64_t in = 1;
        for (auto w : cfg.stage_widths) {
            expect += 9 * in * w + 2 * w;
            in = w;
        }
        expect += 16 * 8;   // lat8 1x1: C x stage3 width
        expect += 16 * 10;  // proj16 1x1: C x stage4 width
        expect += 2 * 16;   // output batch norm
        REQUIRE(backbone_param_count(bb) == expect);
    }
    SECTION("structure reports both branches with the pooled topmost path") {
        BackboneConfig cfg;
        Rng rng(2);
        Backbone bb = build_backbone(cfg, rng);
        auto st = bb.describe();
        REQUIRE(st.branches.size() == 2);
        REQUIRE(st.branches[0].stride == 8);
        REQUIRE(st.branches[0].has_avg_pool);
        REQUIRE(st.branches[1].stride == 16);
        REQUIRE_FALSE(st.branches[1].has_avg_pool);
        REQUIRE(st.downsample == 16);
    }
    SECTION("invalid widths are rejected") {
        BackboneConfig cfg;
        cfg.stage_widths = {4, 0, 8, 8};
        Rng rng(3);
        REQUIRE_THROWS(build_backbone(cfg, rng));
    }
}

TEST_CASE("backbone forward") {
    BackboneConfig cfg;
    cfg.stage_widths = {3, 4, 4, 4};
    cfg.out_channels = 4;
    Rng rng(7);
    Backbone bb = build_backbone(cfg, rng);

    SECTION("512 input maps to 32x32") {
        Tensor x = random_images(2, 512, 512, rng);
        Tensor y = bb.forward(x, true);
        REQUIRE(y.shape() == Shape{2, 4, 32, 32});
    }
    SECTION("256 input maps to 16x16") {
        Tensor x = random_images(2, 256, 256, rng);
        Tensor y = bb.forward(x, true);
        REQUIRE(y.shape() == Shape{2, 4, 16, 16});
    }
    SECTION("indivisible input instructs a resize") {
        Tensor x = random_images(2, 100, 96, rng);
        REQUIRE_THROWS_WITH(bb.forward(x, true), Catch::Matchers::ContainsSubstring("resize"));
    }
    SECTION("constant-zero image yields finite output and defined gradients") {
        Tensor x = Tensor::zeros({2, 1, 64, 64});
        Tensor y = bb.forward(x, true);
        for (double v : y.values()) REQUIRE(std::isfinite(v));
        std::vector<Tensor> ps;
        bb.collect_params(ps);
        for (auto& p : ps) p.zero_grad();
        sum(y).backward();
        for (auto& p : ps)
            if (p.has_grad())
                for (double g : p.grad()) REQUIRE(std::isfinite(g));
    }
    SECTION("concat fusion produces the same output shape") {
        BackboneConfig ccfg = cfg;
        ccfg.fusion = FusionMode::concat;
        Rng r2(7);
        Backbone bb2 = build_backbone(ccfg, r2);
        Tensor x = random_images(2, 64, 64, rng);
        REQUIRE(bb2.forward(x, true).shape() == Shape{2, 4, 4, 4});
    }
    SECTION("composed gradient on a 64x64 crop matches finite differences") {
        // Small widths keep the sweep cheap; sampled coordinates across all
        // parameter groups.
        BackboneConfig scfg;
        scfg.stage_widths = {2, 3, 3, 3};
        scfg.out_channels = 3;
        Rng r3(11);
        Backbone sbb = build_backbone(scfg, r3);
        Tensor x = random_images(2, 64, 64, r3, true);
        std::vector<Tensor> leaves{x};
        sbb.collect_params(leaves);
        auto f = [&sbb](std::vector<Tensor>& l) { return mean(sbb.forward(l[0], false)); };
        Rng sampler(13);
        REQUIRE(testsupport::fd_check_sampled(f, leaves, sampler, 4, 1e-5) < 1e-4);
    }
}
