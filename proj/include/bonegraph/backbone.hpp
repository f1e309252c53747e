#pragma once

// Compact multi-scale encoder: four 3x3 stride-2 stages take a 1-channel
// radiograph down to 1/16 resolution. The 8x branch gets a 3x3 average pool
// and is fused (after a further 2x pool) with the 16x branch into the final
// C-channel feature map. Convolutions are bias-free; batch norm supplies the
// affine terms.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "bonegraph/tensor.hpp"

namespace bonegraph {

enum class FusionMode { add, concat };

inline std::string to_string(FusionMode m) { return m == FusionMode::add ? "add" : "concat"; }
inline FusionMode fusion_mode_from_string(const std::string& s) {
    if (s == "add") return FusionMode::add;
    if (s == "concat") return FusionMode::concat;
    throw std::runtime_error("unknown fusion mode '" + s + "' (expected add|concat)");
}

struct BackboneConfig {
    std::vector<std::int64_t> stage_widths{16, 32, 64, 64};
    std::int64_t out_channels = 64;
    FusionMode fusion = FusionMode::add;
    static constexpr std::int64_t downsample = 16;

    void validate() const {
        if (stage_widths.size() != 4) throw std::invalid_argument("backbone: exactly four stage widths required");
        for (auto w : stage_widths)
            if (w <= 0) throw std::invalid_argument("backbone: stage widths must be positive");
        if (out_channels <= 0) throw std::invalid_argument("backbone: output channel count must be positive");
    }
};

struct BranchInfo {
    int stride;
    bool has_avg_pool;
};

struct BackboneStructure {
    std::vector<BranchInfo> branches;
    FusionMode fusion;
    std::int64_t downsample;
};

struct Backbone {
    BackboneConfig cfg;
    std::vector<Tensor> stage_w;            // 4 convolutions, 3x3 stride 2
    std::vector<BatchNormState> stage_bn;   // one per stage
    Tensor lat8_w;                          // 1x1, stage3 width -> C
    Tensor proj16_w;                        // 1x1, stage4 width -> C
    Tensor fuse_w;                          // 1x1, 2C -> C (concat fusion only)
    BatchNormState out_bn;

    BackboneStructure describe() const {
        return {{{8, true}, {16, false}}, cfg.fusion, BackboneConfig::downsample};
    }

    // images: B x 1 x H x W with H, W divisible by 16 -> B x C x H/16 x W/16
    Tensor forward(const Tensor& images, bool training) {
        if (images.rank() != 4 || images.dim(1) != 1)
            op_error("backbone", "input must be B x 1 x H x W, got " + shape_str(images.shape()));
        const std::int64_t H = images.dim(2), W = images.dim(3);
        if (H % BackboneConfig::downsample != 0 || W % BackboneConfig::downsample != 0)
            throw std::runtime_error("backbone: input " + std::to_string(H) + "x" + std::to_string(W) +
                                     " is not divisible by 16; resize the image first");
        Tensor h = images;
        Tensor tap8;
        for (int i = 0; i < 4; ++i) {
            h = conv2d(h, stage_w[i], std::nullopt, 2, 1);
            h = relu(batch_norm(h, stage_bn[i], training));
            if (i == 2) tap8 = h;
        }
        // Topmost (8x) branch: 3x3 average pool, project to C, pool down to 16x.
        Tensor b8 = avg_pool2d(tap8, 3, 1, 1);
        b8 = conv2d(b8, lat8_w, std::nullopt, 1, 0);
        b8 = avg_pool2d(b8, 2, 2, 0);
        Tensor b16 = conv2d(h, proj16_w, std::nullopt, 1, 0);
        Tensor fused = cfg.fusion == FusionMode::add
                           ? add(b8, b16)
                           : conv2d(concat_channels(b8, b16), fuse_w, std::nullopt, 1, 0);
        return relu(batch_norm(fused, out_bn, training));
    }

    void collect_params(std::vector<Tensor>& out) {
        std::unordered_set<const void*> seen;
        auto push = [&](const Tensor& t) {
            if (t.defined() && seen.insert(t.ptr().get()).second) out.push_back(t);
        };
        for (auto& w : stage_w) push(w);
        for (auto& bn : stage_bn) {
            push(bn.gamma);
            push(bn.beta);
        }
        push(lat8_w);
        push(proj16_w);
        push(fuse_w);
        push(out_bn.gamma);
        push(out_bn.beta);
    }
};

inline Backbone build_backbone(const BackboneConfig& cfg, Rng& rng) {
    cfg.validate();
    Backbone bb;
    bb.cfg = cfg;
    std::int64_t in = 1;
    for (int i = 0; i < 4; ++i) {
        const std::int64_t w = cfg.stage_widths[i];
        bb.stage_w.push_back(
            kaiming_uniform({w, in, 3, 3}, in * 9, rng, "backbone/stage" + std::to_string(i) + "/w"));
        bb.stage_bn.emplace_back(w, "backbone/stage" + std::to_string(i) + "/bn");
        in = w;
    }
    const std::int64_t C = cfg.out_channels;
    bb.lat8_w = kaiming_uniform({C, cfg.stage_widths[2], 1, 1}, cfg.stage_widths[2], rng, "backbone/lat8/w");
    bb.proj16_w = kaiming_uniform({C, cfg.stage_widths[3], 1, 1}, cfg.stage_widths[3], rng, "backbone/proj16/w");
    if (cfg.fusion == FusionMode::concat)
        bb.fuse_w = kaiming_uniform({C, 2 * C, 1, 1}, 2 * C, rng, "backbone/fuse/w");
    bb.out_bn = BatchNormState(C, "backbone/out_bn");
    return bb;
}

}  // namespace bonegraph
