#pragma once

// Dual graph attention: the two-graph GConv operator, the patient-specific
// attention block (N x f, node-averaged so it gates feature channels) and the
// context attention block (N x 1, per-ROI score weights), plus the per-gender
// exponential moving average of context attention used at inference.

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bonegraph/roi_graph.hpp"
#include "bonegraph/tensor.hpp"

namespace bonegraph {

struct GConvLayer {
    Tensor w1, w2;  // f_in x f_out, one weight per graph branch
    std::optional<Tensor> b1, b2;
};

inline GConvLayer make_gconv_layer(std::int64_t f_in, std::int64_t f_out, bool bias, Rng& rng,
                                   const std::string& name) {
    GConvLayer l;
    l.w1 = kaiming_uniform({f_in, f_out}, f_in, rng, name + "/w1");
    l.w2 = kaiming_uniform({f_in, f_out}, f_in, rng, name + "/w2");
    if (bias) {
        l.b1 = Tensor::zeros({1, f_out}, true);
        l.b1->set_name(name + "/b1");
        l.b2 = Tensor::zeros({1, f_out}, true);
        l.b2->set_name(name + "/b2");
    }
    return l;
}

// X' = 1/2 (L1 X W1 + L2 X W2); the propagation matrices are constants.
inline Tensor gconv(const Tensor& x, const Tensor& l1, const Tensor& l2, const GConvLayer& layer) {
    if (x.rank() != 2) op_error("gconv", "node features must be 2-D");
    if (l1.rank() != 2 || l1.dim(0) != l1.dim(1) || l1.shape() != l2.shape())
        op_error("gconv", "propagation matrices must be square and equally sized");
    if (l1.dim(1) != x.dim(0))
        op_error("gconv", "propagation size " + shape_str(l1.shape()) + " does not match node count " +
                              std::to_string(x.dim(0)));
    if (layer.w1.dim(0) != x.dim(1) || layer.w2.dim(0) != x.dim(1) || layer.w1.dim(1) != layer.w2.dim(1))
        op_error("gconv", "weight shapes do not match feature width");
    Tensor br1 = matmul(matmul(l1, x), layer.w1);
    Tensor br2 = matmul(matmul(l2, x), layer.w2);
    if (layer.b1) br1 = add(br1, *layer.b1);
    if (layer.b2) br2 = add(br2, *layer.b2);
    return mul(add(br1, br2), Tensor::scalar(0.5));
}

// Stacked GConvs with ReLU between layers and a bounding sigmoid on the
// output (identity when disabled).
struct AttentionBlock {
    std::vector<GConvLayer> layers;
    bool sigmoid_output = true;

    Tensor forward(const Tensor& x, const Tensor& l1, const Tensor& l2) const {
        Tensor h = x;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            h = gconv(h, l1, l2, layers[i]);
            if (i + 1 < layers.size()) h = relu(h);
        }
        return sigmoid_output ? sigmoid(h) : h;
    }

    std::int64_t output_width() const { return layers.empty() ? 0 : layers.back().w1.dim(1); }
};

inline AttentionBlock make_attention_block(const std::vector<std::int64_t>& widths, bool bias, bool sigmoid_out,
                                           Rng& rng, const std::string& prefix) {
    if (widths.size() < 2) throw std::invalid_argument("attention block needs at least one layer");
    AttentionBlock blk;
    blk.sigmoid_output = sigmoid_out;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i)
        blk.layers.push_back(make_gconv_layer(widths[i], widths[i + 1], bias, rng, prefix + "/gc" + std::to_string(i)));
    return blk;
}

// Patient-specific attention: depth x (f -> f), bounded output of width f.
inline AttentionBlock make_pab(std::int64_t f, std::int64_t depth, bool bias, bool sigmoid_out, Rng& rng) {
    std::vector<std::int64_t> widths(static_cast<std::size_t>(depth) + 1, f);
    return make_attention_block(widths, bias, sigmoid_out, rng, "pab");
}

// Context attention: f -> hidden... -> 1.
inline AttentionBlock make_cab(std::int64_t f, const std::vector<std::int64_t>& hidden, bool bias, bool sigmoid_out,
                               Rng& rng) {
    std::vector<std::int64_t> widths{f};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(1);
    return make_attention_block(widths, bias, sigmoid_out, rng, "cab");
}

// Node-wise average: every output row equals the mean over the N input rows.
inline Tensor node_average(const Tensor& att_x) {
    if (att_x.rank() != 2) op_error("node_average", "expects a 2-D attention map");
    const std::int64_t n = att_x.dim(0);
    Tensor avg = Tensor::full({n, n}, 1.0 / static_cast<double>(n));
    return matmul(avg, att_x);
}

// Constant tensors for the propagation matrices of a dual graph.
inline std::pair<Tensor, Tensor> laplacian_tensors(const DualGraph& g) {
    const std::int64_t n = g.n;
    return {Tensor::from_values({n, n}, g.l1), Tensor::from_values({n, n}, g.l2)};
}

// ---------------------------------------------------------------------------
// Per-gender EMA of the context attention map.

struct EmaState {
    std::int64_t n = 0;
    double theta = 0.01;
    std::array<std::vector<double>, 2> att;
    std::array<bool, 2> initialized{false, false};

    EmaState() = default;
    explicit EmaState(std::int64_t n_rois, double theta_ = 0.01) : n(n_rois), theta(theta_) {
        att[0].assign(static_cast<std::size_t>(n), 0.0);
        att[1].assign(static_cast<std::size_t>(n), 0.0);
    }

    const std::vector<double>& for_gender(int g) const {
        if (g != 0 && g != 1) throw std::invalid_argument("ema: gender must be 0 or 1");
        if (!initialized[g])
            throw std::runtime_error("ema: context attention for gender " + std::to_string(g) +
                                     " was never initialized; train with both genders before inference");
        return att[g];
    }
};

// Updates the gender's map toward the mean of the batch's context attention
// maps; the first update for a gender adopts the batch mean directly.
inline void ema_update(EmaState& st, int gender, const std::vector<std::vector<double>>& batch_atts,
                       bool training) {
    if (!training) throw std::runtime_error("ema_update: attempted in inference mode");
    if (gender != 0 && gender != 1) throw std::invalid_argument("ema_update: gender must be 0 or 1");
    if (batch_atts.empty()) return;  // nothing observed for this gender; skip
    std::vector<double> mean(static_cast<std::size_t>(st.n), 0.0);
    for (const auto& a : batch_atts) {
        if (static_cast<std::int64_t>(a.size()) != st.n)
            throw std::invalid_argument("ema_update: attention size mismatch");
        for (std::int64_t i = 0; i < st.n; ++i) mean[i] += a[i];
    }
    for (auto& v : mean) v /= static_cast<double>(batch_atts.size());
    if (!st.initialized[gender]) {
        st.att[gender] = mean;
        st.initialized[gender] = true;
        return;
    }
    for (std::int64_t i = 0; i < st.n; ++i)
        st.att[gender][i] = (1.0 - st.theta) * st.att[gender][i] + st.theta * mean[i];
}

// X* = att_x_bar (.) X and S* = ctx (.) S.
inline std::pair<Tensor, Tensor> apply_attention(const Tensor& x, const Tensor& s, const Tensor& att_x_bar,
                                                 const Tensor& ctx) {
    if (att_x_bar.shape() != x.shape())
        op_error("apply_attention", "feature attention shape " + shape_str(att_x_bar.shape()) +
                                        " does not match X " + shape_str(x.shape()));
    if (ctx.shape() != s.shape())
        op_error("apply_attention", "context attention shape " + shape_str(ctx.shape()) +
                                        " does not match S " + shape_str(s.shape()));
    return {mul(att_x_bar, x), mul(ctx, s)};
}

}  // namespace bonegraph
