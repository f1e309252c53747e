#pragma once

// Anatomy-grouped score head: every anatomy group shares one block of 1x1
// convolutions (affine layers over pillar rows) with batch normalization and
// ReLU, ending in a single affine output per ROI. The random-grouping
// baseline reuses the same machinery with a shuffled assignment.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "bonegraph/tensor.hpp"

namespace bonegraph {

enum class HeadBnMode { joint, per_roi };

inline std::string to_string(HeadBnMode m) { return m == HeadBnMode::joint ? "joint" : "per_roi"; }
inline HeadBnMode head_bn_mode_from_string(const std::string& s) {
    if (s == "joint") return HeadBnMode::joint;
    if (s == "per_roi") return HeadBnMode::per_roi;
    throw std::runtime_error("unknown head bn mode '" + s + "' (expected joint|per_roi)");
}

struct AffineLayer {
    Tensor w;  // in x out
    Tensor b;  // 1 x out
};

inline AffineLayer make_affine(std::int64_t in, std::int64_t out, Rng& rng, const std::string& name) {
    AffineLayer l;
    l.w = kaiming_uniform({in, out}, in, rng, name + "/w");
    l.b = Tensor::zeros({1, out}, true);
    l.b.set_name(name + "/b");
    return l;
}

inline Tensor affine(const Tensor& x, const AffineLayer& l) { return add(matmul(x, l.w), l.b); }

// One scoring block. In joint mode batch norm pools statistics over all rows
// it sees (batch x ROIs-in-group); in per_roi mode each ROI slot keeps its
// own running statistics while sharing the gamma/beta pair.
struct ScoreBlock {
    std::vector<AffineLayer> hidden;
    std::vector<std::vector<BatchNormState>> bn;  // per hidden layer; size 1 or k
    AffineLayer out;
    HeadBnMode bn_mode = HeadBnMode::joint;
    std::int64_t members = 0;  // k, the number of ROIs this block scores

    // x: (B*k) x f stacked sample-major (row b*k + t is sample b, member t).
    Tensor forward(const Tensor& x, bool training) {
        Tensor h = x;
        const std::int64_t rows = x.dim(0);
        if (rows % members != 0) op_error("score_block", "row count is not a multiple of the member count");
        const std::int64_t batch = rows / members;
        for (std::size_t li = 0; li < hidden.size(); ++li) {
            h = affine(h, hidden[li]);
            if (bn_mode == HeadBnMode::joint) {
                h = batch_norm(h, bn[li][0], training);
            } else {
                // Normalize each member slot over the batch only.
                std::vector<Tensor> parts;
                std::vector<std::int64_t> order;
                for (std::int64_t t = 0; t < members; ++t) {
                    std::vector<std::int64_t> idx(static_cast<std::size_t>(batch));
                    for (std::int64_t b = 0; b < batch; ++b) {
                        idx[b] = b * members + t;
                        order.push_back(b * members + t);
                    }
                    parts.push_back(batch_norm(gather_rows(h, idx), bn[li][t], training));
                }
                Tensor stacked = concat_rows(parts);  // grouped by member
                h = scatter_rows(stacked, order, rows);
            }
            h = relu(h);
        }
        return affine(h, out);  // no output activation; scores are free reals
    }
};

inline ScoreBlock make_score_block(std::int64_t f, const std::vector<std::int64_t>& widths, std::int64_t members,
                                   HeadBnMode mode, Rng& rng, const std::string& prefix) {
    ScoreBlock blk;
    blk.bn_mode = mode;
    blk.members = members;
    std::int64_t in = f;
    for (std::size_t i = 0; i < widths.size(); ++i) {
        const std::string lname = prefix + "/h" + std::to_string(i);
        blk.hidden.push_back(make_affine(in, widths[i], rng, lname));
        std::vector<BatchNormState> states;
        BatchNormState base(widths[i], lname + "/bn");
        states.push_back(base);
        if (mode == HeadBnMode::per_roi) {
            for (std::int64_t t = 1; t < members; ++t) {
                BatchNormState st(widths[i], lname + "/bn");
                st.gamma = base.gamma;  // shared affine pair, separate running stats
                st.beta = base.beta;
                states.push_back(st);
            }
        }
        blk.bn.push_back(std::move(states));
        in = widths[i];
    }
    blk.out = make_affine(in, 1, rng, prefix + "/out");
    return blk;
}

// Deterministic random grouping for the ablation baseline: shuffles the ROI
// indices and cuts them into n_groups contiguous chunks, so every group is
// non-empty and the assignment is a pure function of the seed.
inline std::vector<int> random_grouping(std::uint64_t seed, int n_groups, int n_rois) {
    if (n_groups < 1 || n_groups > n_rois)
        throw std::invalid_argument("random_grouping: need 1 <= n_groups <= " + std::to_string(n_rois));
    std::vector<int> order(n_rois);
    for (int i = 0; i < n_rois; ++i) order[i] = i;
    Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
    rng.shuffle(order);
    std::vector<int> assignment(n_rois, 0);
    const int base = n_rois / n_groups;
    const int rem = n_rois % n_groups;
    int pos = 0;
    for (int g = 0; g < n_groups; ++g) {
        const int size = base + (g < rem ? 1 : 0);
        for (int t = 0; t < size; ++t) assignment[order[pos++]] = g;
    }
    return assignment;
}

struct GroupHead {
    std::vector<int> assignment;  // roi index -> block index
    std::vector<ScoreBlock> blocks;
    HeadBnMode bn_mode = HeadBnMode::joint;

    std::int64_t n_rois() const { return static_cast<std::int64_t>(assignment.size()); }

    std::vector<std::vector<std::int64_t>> members_per_block() const {
        std::vector<std::vector<std::int64_t>> m(blocks.size());
        for (std::size_t r = 0; r < assignment.size(); ++r) m[assignment[r]].push_back(static_cast<std::int64_t>(r));
        return m;
    }

    // x_all: (B*N) x f stacked sample-major; returns (B*N) x 1 scores in ROI order.
    Tensor forward(const Tensor& x_all, std::int64_t batch, bool training) {
        const std::int64_t n = n_rois();
        if (x_all.dim(0) != batch * n) op_error("group_head", "stacked row count does not match batch * N");
        auto members = members_per_block();
        Tensor s_all;
        for (std::size_t g = 0; g < blocks.size(); ++g) {
            const auto& rois = members[g];
            std::vector<std::int64_t> idx;
            idx.reserve(static_cast<std::size_t>(batch) * rois.size());
            for (std::int64_t b = 0; b < batch; ++b)
                for (auto r : rois) idx.push_back(b * n + r);
            Tensor xs = gather_rows(x_all, idx);
            Tensor sg = blocks[g].forward(xs, training);
            Tensor placed = scatter_rows(sg, idx, batch * n);
            s_all = s_all.defined() ? add(s_all, placed) : placed;
        }
        return s_all;
    }
};

inline GroupHead make_group_head(const std::vector<int>& assignment, std::int64_t f,
                                 const std::vector<std::int64_t>& widths, HeadBnMode mode, Rng& rng,
                                 const std::string& prefix) {
    int n_blocks = 0;
    for (int g : assignment) n_blocks = std::max(n_blocks, g + 1);
    std::vector<std::int64_t> counts(n_blocks, 0);
    for (int g : assignment) {
        if (g < 0) throw std::invalid_argument("group_head: negative block index");
        counts[g]++;
    }
    for (int g = 0; g < n_blocks; ++g)
        if (counts[g] == 0) throw std::invalid_argument("group_head: empty group " + std::to_string(g));
    GroupHead head;
    head.assignment = assignment;
    head.bn_mode = mode;
    for (int g = 0; g < n_blocks; ++g)
        head.blocks.push_back(make_score_block(f, widths, counts[g], mode, rng, prefix + "/g" + std::to_string(g)));
    return head;
}

// Collects the distinct learnable tensors of a head (shared gamma/beta pairs
// are counted once).
inline void collect_params(GroupHead& head, std::vector<Tensor>& out) {
    std::unordered_set<const void*> seen;
    auto push = [&](const Tensor& t) {
        if (seen.insert(t.ptr().get()).second) out.push_back(t);
    };
    for (auto& blk : head.blocks) {
        for (auto& l : blk.hidden) {
            push(l.w);
            push(l.b);
        }
        for (auto& states : blk.bn)
            for (auto& st : states) {
                push(st.gamma);
                push(st.beta);
            }
        push(blk.out.w);
        push(blk.out.b);
    }
}

}  // namespace bonegraph
