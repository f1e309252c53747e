#pragma once

// End-to-end model: backbone -> feature pillars -> dual-graph attention ->
// grouped score head -> age by score summation. Includes the training loop
// (L1 loss, Adam, staged learning-rate schedule, per-gender EMA updates),
// evaluation (MAD plus per-ROI score rank correlation), the six-row ablation
// runner and checkpoint serialization.

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bonegraph/backbone.hpp"
#include "bonegraph/data.hpp"
#include "bonegraph/dgam.hpp"
#include "bonegraph/pillars.hpp"
#include "bonegraph/roi_graph.hpp"
#include "bonegraph/scoring.hpp"
#include "bonegraph/tensor.hpp"
#include "bonegraph/tensor_archive.hpp"

namespace bonegraph {

enum class GroupingMode { anatomy, random, single };

inline std::string to_string(GroupingMode m) {
    switch (m) {
        case GroupingMode::anatomy: return "anatomy";
        case GroupingMode::random: return "random";
        default: return "single";
    }
}
inline GroupingMode grouping_mode_from_string(const std::string& s) {
    if (s == "anatomy") return GroupingMode::anatomy;
    if (s == "random") return GroupingMode::random;
    if (s == "single") return GroupingMode::single;
    throw std::runtime_error("unknown grouping mode '" + s + "' (expected anatomy|random|single)");
}

struct ModelConfig {
    BackboneConfig backbone;
    std::int64_t pab_depth = 2;
    std::vector<std::int64_t> cab_hidden{32};
    std::vector<std::int64_t> head_widths{32, 16};
    GroupingMode grouping = GroupingMode::anatomy;
    std::uint64_t rg_seed = 0;
    bool use_pa = true;
    bool use_ca = true;
    LaplacianMode laplacian = LaplacianMode::symmetric;
    bool attention_sigmoid = true;
    bool gconv_bias = false;
    HeadBnMode head_bn = HeadBnMode::joint;
    double ema_theta = 0.01;

    std::int64_t feature_width() const { return backbone.out_channels + 3; }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["backbone"] = {{"stage_widths", backbone.stage_widths},
                         {"out_channels", backbone.out_channels},
                         {"fusion", to_string(backbone.fusion)}};
        j["pab_depth"] = pab_depth;
        j["cab_hidden"] = cab_hidden;
        j["head_widths"] = head_widths;
        j["grouping"] = to_string(grouping);
        j["rg_seed"] = rg_seed;
        j["use_pa"] = use_pa;
        j["use_ca"] = use_ca;
        j["laplacian"] = to_string(laplacian);
        j["attention_sigmoid"] = attention_sigmoid;
        j["gconv_bias"] = gconv_bias;
        j["head_bn"] = to_string(head_bn);
        j["ema_theta"] = ema_theta;
        return j;
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        const auto& b = j.at("backbone");
        c.backbone.stage_widths = b.at("stage_widths").get<std::vector<std::int64_t>>();
        c.backbone.out_channels = b.at("out_channels").get<std::int64_t>();
        c.backbone.fusion = fusion_mode_from_string(b.at("fusion").get<std::string>());
        c.pab_depth = j.at("pab_depth").get<std::int64_t>();
        c.cab_hidden = j.at("cab_hidden").get<std::vector<std::int64_t>>();
        c.head_widths = j.at("head_widths").get<std::vector<std::int64_t>>();
        c.grouping = grouping_mode_from_string(j.at("grouping").get<std::string>());
        c.rg_seed = j.at("rg_seed").get<std::uint64_t>();
        c.use_pa = j.at("use_pa").get<bool>();
        c.use_ca = j.at("use_ca").get<bool>();
        c.laplacian = laplacian_mode_from_string(j.at("laplacian").get<std::string>());
        c.attention_sigmoid = j.at("attention_sigmoid").get<bool>();
        c.gconv_bias = j.at("gconv_bias").get<bool>();
        c.head_bn = head_bn_mode_from_string(j.at("head_bn").get<std::string>());
        c.ema_theta = j.at("ema_theta").get<double>();
        return c;
    }
};

struct Model {
    ModelConfig cfg;
    RoiSchema schema;
    DualGraph graphs;
    Tensor l1t, l2t;
    Backbone backbone;
    AttentionBlock pab, cab;
    GroupHead head;
    EmaState ema;
    std::uint64_t init_seed = 0;

    std::vector<Tensor> parameters() {
        std::vector<Tensor> out;
        backbone.collect_params(out);
        auto push_block = [&out](AttentionBlock& blk) {
            for (auto& l : blk.layers) {
                out.push_back(l.w1);
                out.push_back(l.w2);
                if (l.b1) out.push_back(*l.b1);
                if (l.b2) out.push_back(*l.b2);
            }
        };
        push_block(pab);
        push_block(cab);
        collect_params(head, out);
        return out;
    }

    std::vector<BatchNormState*> bn_states() {
        std::vector<BatchNormState*> out;
        for (auto& st : backbone.stage_bn) out.push_back(&st);
        out.push_back(&backbone.out_bn);
        for (auto& blk : head.blocks)
            for (auto& states : blk.bn)
                for (auto& st : states) out.push_back(&st);
        return out;
    }

    std::map<std::string, std::int64_t> param_counts() {
        std::map<std::string, std::int64_t> counts;
        auto tally = [&counts](const std::string& key, const std::vector<Tensor>& ps) {
            std::int64_t n = 0;
            for (const auto& p : ps) n += p.numel();
            counts[key] = n;
        };
        std::vector<Tensor> bb;
        backbone.collect_params(bb);
        tally("backbone", bb);
        std::vector<Tensor> pa;
        for (auto& l : pab.layers) {
            pa.push_back(l.w1);
            pa.push_back(l.w2);
            if (l.b1) pa.push_back(*l.b1);
            if (l.b2) pa.push_back(*l.b2);
        }
        tally("pab", pa);
        std::vector<Tensor> ca;
        for (auto& l : cab.layers) {
            ca.push_back(l.w1);
            ca.push_back(l.w2);
            if (l.b1) ca.push_back(*l.b1);
            if (l.b2) ca.push_back(*l.b2);
        }
        tally("cab", ca);
        std::vector<Tensor> hd;
        collect_params(head, hd);
        tally("head", hd);
        counts["total"] = counts["backbone"] + counts["pab"] + counts["cab"] + counts["head"];
        return counts;
    }
};

inline Model build_model(const RoiSchema& schema, const ModelConfig& cfg, std::uint64_t seed) {
    Model m;
    m.cfg = cfg;
    m.schema = schema;
    m.graphs = build_graphs(schema, cfg.laplacian);
    auto [l1, l2] = laplacian_tensors(m.graphs);
    m.l1t = l1;
    m.l2t = l2;
    m.init_seed = seed;
    Rng rng(seed);
    m.backbone = build_backbone(cfg.backbone, rng);
    const std::int64_t f = cfg.feature_width();
    m.pab = make_pab(f, cfg.pab_depth, cfg.gconv_bias, cfg.attention_sigmoid, rng);
    m.cab = make_cab(f, cfg.cab_hidden, cfg.gconv_bias, cfg.attention_sigmoid, rng);
    std::vector<int> assignment;
    switch (cfg.grouping) {
        case GroupingMode::anatomy: assignment = schema.group_of; break;
        case GroupingMode::random:
            assignment = random_grouping(cfg.rg_seed, RoiSchema::kGroupCount, RoiSchema::kRoiCount);
            break;
        case GroupingMode::single: assignment.assign(RoiSchema::kRoiCount, 0); break;
    }
    m.head = make_group_head(assignment, f, cfg.head_widths, cfg.head_bn, rng, "head");
    m.ema = EmaState(RoiSchema::kRoiCount, cfg.ema_theta);
    return m;
}

// ---------------------------------------------------------------------------
// Forward pass.

struct PredictionRecord {
    std::string id;
    double age_pred = 0.0;
    double age_true = 0.0;
    std::vector<double> scores;           // S, 17
    std::vector<double> weighted_scores;  // S*, 17
    std::vector<double> att_ctx;          // context weights applied (17); empty if CA off
    std::vector<double> att_x_row;        // node-averaged feature attention (f); empty if PA off
};

struct ForwardOutput {
    Tensor preds;  // B x 1
    std::vector<PredictionRecord> records;
    std::vector<int> genders;
    std::vector<std::vector<double>> att_s;  // detached CAB outputs per sample; empty if CA off
};

inline ForwardOutput forward_batch(Model& m, const std::vector<const LoadedSample*>& batch, bool training) {
    if (batch.empty()) throw std::runtime_error("forward: empty batch");
    const int N = RoiSchema::kRoiCount;
    for (const auto* s : batch) {
        if (static_cast<int>(s->centers.size()) != N)
            throw std::runtime_error("forward: sample '" + s->id + "' does not carry " + std::to_string(N) +
                                     " ROI centers");
        if (s->image_backed() != batch[0]->image_backed())
            throw std::runtime_error("forward: batch mixes image-backed and feature-map-backed samples");
    }
    // Batch normalization needs at least two rows in training mode; a lone
    // sample is duplicated and only the first copy is reported.
    std::vector<const LoadedSample*> eff = batch;
    if (training && eff.size() == 1) eff.push_back(eff[0]);
    const std::int64_t B = static_cast<std::int64_t>(eff.size());
    const std::int64_t s_factor = BackboneConfig::downsample;

    Tensor raw;  // (B*N) x C
    std::vector<std::int64_t> img_h(B), img_w(B);
    if (batch[0]->image_backed()) {
        const std::int64_t H = eff[0]->image_h, W = eff[0]->image_w;
        for (const auto* s : eff)
            if (s->image_h != H || s->image_w != W)
                throw std::runtime_error("forward: all images in a batch must share one size");
        std::vector<double> stacked;
        stacked.reserve(static_cast<std::size_t>(B * H * W));
        for (const auto* s : eff) stacked.insert(stacked.end(), s->image.begin(), s->image.end());
        Tensor images = Tensor::from_values({B, 1, H, W}, std::move(stacked));
        Tensor fmap = m.backbone.forward(images, training);
        const std::int64_t fh = fmap.dim(2), fw = fmap.dim(3);
        std::vector<CellIndex> cells;
        cells.reserve(static_cast<std::size_t>(B * N));
        for (std::int64_t b = 0; b < B; ++b) {
            img_h[b] = H;
            img_w[b] = W;
            for (const auto& c : eff[b]->centers) {
                auto [i, j] = project_position(c, s_factor, fh, fw);
                cells.push_back({b, i, j});
            }
        }
        raw = gather_cells(fmap, cells);
    } else {
        std::vector<Tensor> parts;
        for (std::int64_t b = 0; b < B; ++b) {
            const auto* s = eff[b];
            if (s->feature.map.dim(0) != m.cfg.backbone.out_channels)
                throw std::runtime_error("forward: feature map for '" + s->id + "' has " +
                                         std::to_string(s->feature.map.dim(0)) + " channels, model expects " +
                                         std::to_string(m.cfg.backbone.out_channels));
            img_h[b] = s->feature.image_h;
            img_w[b] = s->feature.image_w;
            parts.push_back(extract_pillars(s->feature, s->centers, s_factor));
        }
        raw = concat_rows(parts);
    }

    // Gender bit and normalized original center position per pillar row.
    std::vector<double> extra(static_cast<std::size_t>(B * N * 3));
    for (std::int64_t b = 0; b < B; ++b)
        for (int n = 0; n < N; ++n) {
            const std::size_t off = static_cast<std::size_t>((b * N + n) * 3);
            extra[off] = static_cast<double>(eff[b]->gender);
            extra[off + 1] = static_cast<double>(eff[b]->centers[n].row) / static_cast<double>(img_h[b]);
            extra[off + 2] = static_cast<double>(eff[b]->centers[n].col) / static_cast<double>(img_w[b]);
        }
    Tensor x_all = concat_cols(raw, Tensor::from_values({B * N, 3}, std::move(extra)));

    std::vector<std::int64_t> range(static_cast<std::size_t>(N));
    std::vector<Tensor> x_star_parts, att_s_list, att_bar_list;
    for (std::int64_t b = 0; b < B; ++b) {
        std::iota(range.begin(), range.end(), b * N);
        Tensor x_b = gather_rows(x_all, range);
        if (m.cfg.use_ca) att_s_list.push_back(m.cab.forward(x_b, m.l1t, m.l2t));
        if (m.cfg.use_pa) {
            Tensor att_bar = node_average(m.pab.forward(x_b, m.l1t, m.l2t));
            att_bar_list.push_back(att_bar);
            x_star_parts.push_back(mul(att_bar, x_b));
        }
    }
    Tensor x_star_all = m.cfg.use_pa ? concat_rows(x_star_parts) : x_all;

    Tensor s_all = m.head.forward(x_star_all, B, training);

    std::vector<Tensor> pred_parts;
    ForwardOutput out;
    const std::int64_t B_orig = static_cast<std::int64_t>(batch.size());
    for (std::int64_t b = 0; b < B; ++b) {
        std::iota(range.begin(), range.end(), b * N);
        Tensor s_b = gather_rows(s_all, range);
        Tensor s_star = s_b;
        Tensor ctx;
        if (m.cfg.use_ca) {
            // Training applies the sample's own context attention (the EMA is
            // a side effect); inference applies the stored per-gender map.
            ctx = training ? att_s_list[b]
                           : Tensor::from_values({N, 1}, m.ema.for_gender(eff[b]->gender));
            s_star = mul(ctx, s_b);
        }
        Tensor pred = reshape(sum(s_star), {1, 1});
        pred_parts.push_back(pred);
        if (b < B_orig) {
            PredictionRecord rec;
            rec.id = eff[b]->id;
            rec.age_true = eff[b]->age_months;
            rec.age_pred = pred.scalar_value();
            rec.scores = s_b.values();
            rec.weighted_scores = s_star.values();
            if (m.cfg.use_ca) rec.att_ctx = ctx.values();
            if (m.cfg.use_pa) {
                rec.att_x_row.assign(att_bar_list[b].values().begin(),
                                     att_bar_list[b].values().begin() + m.cfg.feature_width());
            }
            out.records.push_back(std::move(rec));
            out.genders.push_back(eff[b]->gender);
            if (m.cfg.use_ca) out.att_s.push_back(att_s_list[b].values());
        }
    }
    Tensor preds = concat_rows(pred_parts);
    if (B != B_orig) {
        std::vector<std::int64_t> keep(static_cast<std::size_t>(B_orig));
        std::iota(keep.begin(), keep.end(), 0);
        preds = gather_rows(preds, keep);
    }
    out.preds = preds;
    return out;
}

// ---------------------------------------------------------------------------
// Rank correlation (library side; tests check it against a brute-force
// oracle).

inline double spearman_correlation(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) return 0.0;
    auto ranks = [](const std::vector<double>& v) {
        std::vector<std::size_t> order(v.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&v](std::size_t a, std::size_t b) { return v[a] < v[b]; });
        std::vector<double> r(v.size());
        std::size_t i = 0;
        while (i < order.size()) {
            std::size_t j = i;
            while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
            const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    auto rx = ranks(x), ry = ranks(y);
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= static_cast<double>(rx.size());
    my /= static_cast<double>(ry.size());
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// Evaluation.

struct EvalReport {
    double mad = 0.0;
    std::size_t count = 0;
    std::vector<PredictionRecord> records;
    std::vector<double> per_roi_spearman;  // empty without ground-truth scores
    double mean_spearman = 0.0;
    bool has_score_truth = false;
};

inline EvalReport evaluate_model(Model& m, const DatasetView& view, const std::vector<std::size_t>& indices,
                                 std::int64_t batch_size = 32) {
    if (indices.empty()) throw std::runtime_error("evaluate: empty dataset");
    EvalReport rep;
    std::vector<LoadedSample> keep;
    for (std::size_t pos = 0; pos < indices.size(); pos += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(indices.size(), pos + static_cast<std::size_t>(batch_size));
        keep.clear();
        for (std::size_t k = pos; k < end; ++k) keep.push_back(view.load(indices[k]));
        std::vector<const LoadedSample*> ptrs;
        for (auto& s : keep) ptrs.push_back(&s);
        ForwardOutput out = forward_batch(m, ptrs, false);
        for (std::size_t k = 0; k < out.records.size(); ++k) rep.records.push_back(std::move(out.records[k]));
    }
    double acc = 0.0;
    for (const auto& r : rep.records) acc += std::fabs(r.age_pred - r.age_true);
    rep.count = rep.records.size();
    rep.mad = acc / static_cast<double>(rep.count);

    // Per-ROI rank correlation against ground-truth scores where available.
    std::vector<std::size_t> with_scores;
    for (std::size_t k = 0; k < indices.size(); ++k)
        if (view.record(indices[k]).scores) with_scores.push_back(k);
    if (with_scores.size() >= 3) {
        rep.has_score_truth = true;
        const int N = RoiSchema::kRoiCount;
        rep.per_roi_spearman.resize(N);
        double mean = 0.0;
        for (int n = 0; n < N; ++n) {
            std::vector<double> pred, truth;
            for (auto k : with_scores) {
                pred.push_back(rep.records[k].scores[n]);
                truth.push_back((*view.record(indices[k]).scores)[n]);
            }
            rep.per_roi_spearman[n] = spearman_correlation(pred, truth);
            mean += rep.per_roi_spearman[n];
        }
        rep.mean_spearman = mean / static_cast<double>(N);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Training.

struct TrainConfig {
    int epochs = 200;
    int batch_size = 48;
    double lr = 1e-3;
    std::vector<int> decay_epochs{60, 120};
    double decay_factor = 0.1;
    std::uint64_t seed = 0;
    double val_fraction = 0.2;
    bool augment = false;

    void validate() const {
        if (epochs <= 0) throw std::invalid_argument("train: epochs must be positive");
        if (batch_size <= 0) throw std::invalid_argument("train: batch size must be positive");
        for (std::size_t i = 0; i < decay_epochs.size(); ++i) {
            if (decay_epochs[i] >= epochs)
                throw std::invalid_argument("train: decay epoch " + std::to_string(decay_epochs[i]) +
                                            " is not below the epoch count " + std::to_string(epochs));
            if (i > 0 && decay_epochs[i] <= decay_epochs[i - 1])
                throw std::invalid_argument("train: decay epochs must be strictly increasing");
        }
        if (val_fraction < 0.0 || val_fraction >= 1.0)
            throw std::invalid_argument("train: val fraction must lie in [0, 1)");
    }
};

// The learning rate is a pure function of the epoch index.
inline double lr_at_epoch(const TrainConfig& cfg, int epoch) {
    double lr = cfg.lr;
    for (int d : cfg.decay_epochs)
        if (epoch >= d) lr *= cfg.decay_factor;
    return lr;
}

// Seeded 80/20-style split over [0, n).
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n,
                                                                                   double val_fraction,
                                                                                   std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed ^ 0x5eedULL);
    rng.shuffle(idx);
    const std::size_t val_n = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
    std::vector<std::size_t> val(idx.begin(), idx.begin() + val_n);
    std::vector<std::size_t> train(idx.begin() + val_n, idx.end());
    return {train, val};
}

struct TrainLogRow {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_mad = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
    std::vector<TrainLogRow> log;
    bool aborted_nan = false;
    std::string abort_reason;
    int completed_epochs = 0;
};

inline TrainResult train_model(Model& m, const DatasetView& view, const std::vector<std::size_t>& train_idx,
                               const std::vector<std::size_t>& val_idx, const TrainConfig& cfg) {
    cfg.validate();
    if (train_idx.empty()) throw std::runtime_error("train: empty training set");
    if (m.cfg.use_ca) {
        bool g0 = false, g1 = false;
        for (auto i : train_idx) {
            if (view.record(i).gender == 0) g0 = true;
            if (view.record(i).gender == 1) g1 = true;
        }
        if (!g0 || !g1)
            throw std::runtime_error(
                "train: context attention needs both genders in the training set "
                "(per-gender EMA would stay uninitialized)");
    }

    std::vector<Tensor> params = m.parameters();
    AdamState adam;
    TrainResult result;
    Rng shuffle_root(cfg.seed);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at_epoch(cfg, epoch);
        adam.lr = lr;
        std::vector<std::size_t> order = train_idx;
        Rng erng = shuffle_root.child(static_cast<std::uint64_t>(epoch));
        erng.shuffle(order);

        double loss_acc = 0.0;
        std::size_t seen = 0;
        for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), pos + static_cast<std::size_t>(cfg.batch_size));
            std::vector<LoadedSample> keep;
            keep.reserve(end - pos);
            for (std::size_t k = pos; k < end; ++k) {
                LoadedSample s = view.load(order[k]);
                if (cfg.augment && s.image_backed()) {
                    Rng arng = shuffle_root.child(0xA06000ULL + static_cast<std::uint64_t>(epoch) * 1000003ULL +
                                                  order[k]);
                    Augmented aug = augment_sample(s.image, s.image_h, s.image_w, s.centers, arng.next_u64());
                    s.image = std::move(aug.image);
                    s.centers = std::move(aug.centers);
                }
                keep.push_back(std::move(s));
            }
            std::vector<const LoadedSample*> ptrs;
            for (auto& s : keep) ptrs.push_back(&s);

            ForwardOutput out = forward_batch(m, ptrs, true);
            std::vector<double> ages;
            for (auto& s : keep) ages.push_back(s.age_months);
            const std::int64_t n_ages = static_cast<std::int64_t>(ages.size());
            Tensor target = Tensor::from_values({n_ages, 1}, std::move(ages));
            Tensor loss = l1_loss(out.preds, target);
            const double loss_v = loss.scalar_value();
            if (!std::isfinite(loss_v)) {
                result.aborted_nan = true;
                result.abort_reason = "non-finite loss at epoch " + std::to_string(epoch) +
                                      "; returning the last good parameters";
                result.completed_epochs = epoch;
                return result;
            }
            for (auto& p : params) p.zero_grad();
            loss.backward();
            try {
                adam_step(params, adam);
            } catch (const std::runtime_error& e) {
                result.aborted_nan = true;
                result.abort_reason = std::string(e.what()) + "; returning the last good parameters";
                result.completed_epochs = epoch;
                return result;
            }
            if (m.cfg.use_ca) {
                // One EMA update per batch per gender present, after the step.
                for (int g = 0; g < 2; ++g) {
                    std::vector<std::vector<double>> atts;
                    for (std::size_t k = 0; k < out.att_s.size(); ++k)
                        if (out.genders[k] == g) atts.push_back(out.att_s[k]);
                    ema_update(m.ema, g, atts, true);
                }
            }
            loss_acc += loss_v * static_cast<double>(keep.size());
            seen += keep.size();
        }

        TrainLogRow row;
        row.epoch = epoch;
        row.lr = lr;
        row.train_loss = loss_acc / static_cast<double>(seen);
        if (!val_idx.empty()) row.val_mad = evaluate_model(m, view, val_idx).mad;
        result.log.push_back(row);
        result.completed_epochs = epoch + 1;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Checkpointing. A checkpoint is a tensor archive whose metadata carries the
// model config, the full schema (plus hash) and the EMA bookkeeping; the
// payload holds every parameter, the batch-norm running statistics and the
// per-gender EMA maps.

inline std::string schema_hash_hex(const RoiSchema& schema) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(schema.hash()));
    return std::string(buf);
}

inline void save_checkpoint(Model& m, const std::string& path) {
    nlohmann::json meta;
    meta["kind"] = "checkpoint";
    meta["model_config"] = m.cfg.to_json();
    meta["schema"] = m.schema.to_json();
    meta["schema_hash"] = schema_hash_hex(m.schema);
    meta["init_seed"] = m.init_seed;
    meta["ema"] = {{"theta", m.ema.theta},
                   {"initialized", {m.ema.initialized[0], m.ema.initialized[1]}}};
    meta["head_assignment"] = m.head.assignment;

    std::vector<ArchiveTensor> tensors;
    for (auto& p : m.parameters()) tensors.push_back({p.name(), p.shape(), p.values()});
    // Per-ROI head mode has several stat tracks under one batch-norm name;
    // suffix repeats by position to keep archive names unique.
    std::map<std::string, int> name_uses;
    for (auto* bn : m.bn_states()) {
        const int k = name_uses[bn->name]++;
        const std::string base = k == 0 ? bn->name : bn->name + "/slot" + std::to_string(k);
        tensors.push_back({base + "/running_mean", {static_cast<std::int64_t>(bn->running_mean.size())},
                           bn->running_mean});
        tensors.push_back(
            {base + "/running_var", {static_cast<std::int64_t>(bn->running_var.size())}, bn->running_var});
    }
    tensors.push_back({"ema/g0", {static_cast<std::int64_t>(m.ema.att[0].size())}, m.ema.att[0]});
    tensors.push_back({"ema/g1", {static_cast<std::int64_t>(m.ema.att[1].size())}, m.ema.att[1]});
    write_tensor_archive(path, meta, tensors);
}

inline Model load_checkpoint(const std::string& path) {
    TensorArchive ar = read_tensor_archive(path);
    if (ar.meta.value("kind", std::string{}) != "checkpoint")
        throw std::runtime_error("checkpoint: '" + path + "' is not a checkpoint archive");
    RoiSchema schema = RoiSchema::from_json(ar.meta.at("schema"));
    const std::string stored_hash = ar.meta.at("schema_hash").get<std::string>();
    if (schema_hash_hex(schema) != stored_hash)
        throw std::runtime_error("checkpoint: schema hash mismatch in '" + path + "'");
    ModelConfig cfg = ModelConfig::from_json(ar.meta.at("model_config"));
    Model m = build_model(schema, cfg, ar.meta.value("init_seed", 0ULL));
    if (ar.meta.contains("head_assignment")) {
        const auto stored = ar.meta["head_assignment"].get<std::vector<int>>();
        if (stored != m.head.assignment)
            throw std::runtime_error("checkpoint: stored head assignment does not match the rebuilt model");
    }
    for (auto& p : m.parameters()) {
        const ArchiveTensor& t = ar.at(p.name());
        if (t.shape != p.shape())
            throw std::runtime_error("checkpoint: shape mismatch for '" + p.name() + "'");
        p.set_values(t.values);
    }
    std::map<std::string, int> name_uses;
    for (auto* bn : m.bn_states()) {
        const int k = name_uses[bn->name]++;
        const std::string base = k == 0 ? bn->name : bn->name + "/slot" + std::to_string(k);
        bn->running_mean = ar.at(base + "/running_mean").values;
        bn->running_var = ar.at(base + "/running_var").values;
    }
    m.ema.theta = ar.meta.at("ema").at("theta").get<double>();
    m.ema.initialized[0] = ar.meta.at("ema").at("initialized")[0].get<bool>();
    m.ema.initialized[1] = ar.meta.at("ema").at("initialized")[1].get<bool>();
    m.ema.att[0] = ar.at("ema/g0").values;
    m.ema.att[1] = ar.at("ema/g1").values;
    return m;
}

// ---------------------------------------------------------------------------
// Ablation matrix (six configurations).

struct AblationRow {
    std::string name;
    GroupingMode grouping;
    bool use_pa = false;
    bool use_ca = false;
    std::vector<double> mads;  // one per seed
    double mean_mad = 0.0;
};

inline std::vector<AblationRow> ablation_rows() {
    return {
        {"baseline", GroupingMode::single, false, false, {}, 0.0},
        {"ag_conv", GroupingMode::anatomy, false, false, {}, 0.0},
        {"rg_conv", GroupingMode::random, false, false, {}, 0.0},
        {"ag_conv+pa", GroupingMode::anatomy, true, false, {}, 0.0},
        {"ag_conv+ca", GroupingMode::anatomy, false, true, {}, 0.0},
        {"ag_conv+pa+ca", GroupingMode::anatomy, true, true, {}, 0.0},
    };
}

inline std::vector<AblationRow> run_ablation(const RoiSchema& schema, const DatasetView& view,
                                             const std::vector<std::size_t>& train_idx,
                                             const std::vector<std::size_t>& val_idx, const ModelConfig& base_cfg,
                                             const TrainConfig& base_train, const std::vector<std::uint64_t>& seeds,
                                             const std::function<void(const std::string&)>& progress = {}) {
    auto rows = ablation_rows();
    for (auto& row : rows) {
        for (auto seed : seeds) {
            ModelConfig cfg = base_cfg;
            cfg.grouping = row.grouping;
            cfg.use_pa = row.use_pa;
            cfg.use_ca = row.use_ca;
            cfg.rg_seed = seed;
            TrainConfig tc = base_train;
            tc.seed = seed;
            Model model = build_model(schema, cfg, seed);
            if (progress) progress(row.name + " seed " + std::to_string(seed));
            train_model(model, view, train_idx, val_idx, tc);
            row.mads.push_back(evaluate_model(model, view, val_idx).mad);
        }
        double acc = 0.0;
        for (double v : row.mads) acc += v;
        row.mean_mad = acc / static_cast<double>(row.mads.size());
    }
    return rows;
}

}  // namespace bonegraph
