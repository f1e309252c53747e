#pragma once

// Dataset handling: JSON-lines manifests, image/feature-map loading with a
// decoded-image cache, training-time augmentation (flip, small rotation,
// Gaussian blur), and a synthetic generator whose hidden per-ROI scores make
// score recovery measurable under age-only supervision.

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bonegraph/pillars.hpp"
#include "bonegraph/png_io.hpp"
#include "bonegraph/rng.hpp"
#include "bonegraph/roi_graph.hpp"
#include "bonegraph/tensor_archive.hpp"

namespace bonegraph {

struct Sample {
    std::string id;
    std::string image_path;        // relative to the manifest directory
    std::string feature_map_path;  // alternative to image_path
    std::int64_t fm_image_h = 0, fm_image_w = 0;  // original size for feature-map samples
    int gender = 0;
    double age_months = 0.0;
    std::vector<RoiCenter> centers;  // 17, schema order
    std::optional<std::vector<double>> scores;
};

struct Dataset {
    std::vector<Sample> samples;
    std::string base_dir;
};

inline Dataset load_manifest(const std::string& path, double max_age_months = 216.0) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("manifest: cannot open '" + path + "'");
    Dataset ds;
    ds.base_dir = std::filesystem::path(path).parent_path().string();
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw std::runtime_error("manifest: line " + std::to_string(line_no) + " is not valid JSON: " + e.what());
        }
        Sample s;
        s.id = j.value("id", std::string{});
        const std::string where = s.id.empty() ? "line " + std::to_string(line_no) : "record '" + s.id + "'";
        if (s.id.empty()) throw std::runtime_error("manifest: " + where + " is missing 'id'");
        const bool has_image = j.contains("image");
        const bool has_fm = j.contains("feature_map");
        if (has_image == has_fm)
            throw std::runtime_error("manifest: " + where + " needs exactly one of 'image' or 'feature_map'");
        if (has_image) s.image_path = j["image"].get<std::string>();
        if (has_fm) {
            s.feature_map_path = j["feature_map"].get<std::string>();
            if (!j.contains("image_size") || !j["image_size"].is_array() || j["image_size"].size() != 2)
                throw std::runtime_error("manifest: " + where + " with 'feature_map' needs 'image_size' [H, W]");
            s.fm_image_h = j["image_size"][0].get<std::int64_t>();
            s.fm_image_w = j["image_size"][1].get<std::int64_t>();
        }
        if (!j.contains("gender")) throw std::runtime_error("manifest: " + where + " is missing 'gender'");
        s.gender = j["gender"].get<int>();
        if (s.gender != 0 && s.gender != 1)
            throw std::runtime_error("manifest: " + where + " has gender outside {0,1}");
        if (!j.contains("age_months")) throw std::runtime_error("manifest: " + where + " is missing 'age_months'");
        s.age_months = j["age_months"].get<double>();
        if (!(s.age_months >= 0.0) || s.age_months > max_age_months)
            throw std::runtime_error("manifest: " + where + " has age " + std::to_string(s.age_months) +
                                     " outside [0, " + std::to_string(max_age_months) + "] months");
        if (!j.contains("centers") || !j["centers"].is_array() ||
            j["centers"].size() != static_cast<std::size_t>(RoiSchema::kRoiCount))
            throw std::runtime_error("manifest: " + where + " must list exactly " +
                                     std::to_string(RoiSchema::kRoiCount) + " ROI centers");
        for (const auto& c : j["centers"]) {
            if (!c.is_array() || c.size() != 2)
                throw std::runtime_error("manifest: " + where + " has a malformed center (expected [I, J])");
            const std::int64_t I = c[0].get<std::int64_t>();
            const std::int64_t J = c[1].get<std::int64_t>();
            if (I < 0 || J < 0) throw std::runtime_error("manifest: " + where + " has a negative ROI center");
            s.centers.push_back({I, J});
        }
        if (j.contains("scores")) {
            if (!j["scores"].is_array() || j["scores"].size() != static_cast<std::size_t>(RoiSchema::kRoiCount))
                throw std::runtime_error("manifest: " + where + " has a 'scores' array of the wrong length");
            s.scores = j["scores"].get<std::vector<double>>();
        }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

// Joins hidden per-ROI score tables (as written by the synthetic generator)
// onto already-loaded samples.
inline void attach_scores(Dataset& ds, const std::string& scores_path) {
    std::ifstream in(scores_path);
    if (!in) throw std::runtime_error("scores: cannot open '" + scores_path + "'");
    std::string line;
    std::map<std::string, std::vector<double>> table;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        table[j["id"].get<std::string>()] = j["scores"].get<std::vector<double>>();
    }
    for (auto& s : ds.samples) {
        auto it = table.find(s.id);
        if (it != table.end()) {
            if (it->second.size() != static_cast<std::size_t>(RoiSchema::kRoiCount))
                throw std::runtime_error("scores: record '" + s.id + "' has the wrong score count");
            s.scores = it->second;
        }
    }
}

// ---------------------------------------------------------------------------
// Loaded samples and the caching view.

struct LoadedSample {
    std::string id;
    int gender = 0;
    double age_months = 0.0;
    std::vector<RoiCenter> centers;
    std::optional<std::vector<double>> scores;
    // Image-backed samples:
    std::vector<double> image;  // H*W values in [0, 1]
    std::int64_t image_h = 0, image_w = 0;
    // Feature-map-backed samples:
    FeatureMap feature;

    bool image_backed() const { return !image.empty(); }
};

class DatasetView {
public:
    explicit DatasetView(Dataset ds) : ds_(std::move(ds)), cache_(ds_.samples.size()) {}

    std::size_t size() const { return ds_.samples.size(); }
    const Sample& record(std::size_t i) const { return ds_.samples.at(i); }
    const Dataset& dataset() const { return ds_; }

    bool all_image_backed() const {
        for (const auto& s : ds_.samples)
            if (s.image_path.empty()) return false;
        return true;
    }
    bool all_feature_backed() const {
        for (const auto& s : ds_.samples)
            if (s.feature_map_path.empty()) return false;
        return true;
    }

    LoadedSample load(std::size_t i) const {
        const Sample& s = ds_.samples.at(i);
        LoadedSample out;
        out.id = s.id;
        out.gender = s.gender;
        out.age_months = s.age_months;
        out.centers = s.centers;
        out.scores = s.scores;
        if (!s.image_path.empty()) {
            if (!cache_[i]) cache_[i] = read_gray_png(resolve(s.image_path));
            const GrayImage& img = *cache_[i];
            out.image = img.to_unit();
            out.image_h = img.height;
            out.image_w = img.width;
        } else {
            TensorArchive ar = read_tensor_archive(resolve(s.feature_map_path));
            const ArchiveTensor& t = ar.at("feature_map");
            if (t.shape.size() != 3)
                throw std::runtime_error("feature map for '" + s.id + "' must be C x h x w");
            out.feature = FeatureMap{Tensor::from_values(t.shape, t.values), s.fm_image_h, s.fm_image_w};
        }
        return out;
    }

private:
    std::string resolve(const std::string& rel) const {
        std::filesystem::path p(rel);
        if (p.is_absolute() || ds_.base_dir.empty()) return rel;
        return (std::filesystem::path(ds_.base_dir) / p).string();
    }

    Dataset ds_;
    mutable std::vector<std::optional<GrayImage>> cache_;
};

// ---------------------------------------------------------------------------
// Augmentation.

inline void flip_horizontal(std::vector<double>& img, std::int64_t h, std::int64_t w,
                            std::vector<RoiCenter>& centers) {
    for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t c = 0; c < w / 2; ++c) std::swap(img[r * w + c], img[r * w + (w - 1 - c)]);
    for (auto& c : centers) c.col = w - 1 - c.col;
}

// Rotates the image by angle_deg about its center (bilinear resampling, zero
// fill) and applies the same transform to the centers. Returns true when a
// center had to be clamped back into the frame.
inline bool rotate_about_center(std::vector<double>& img, std::int64_t h, std::int64_t w,
                                std::vector<RoiCenter>& centers, double angle_deg) {
    if (angle_deg == 0.0) return false;
    const double rad = angle_deg * 3.14159265358979323846 / 180.0;
    const double cs = std::cos(rad), sn = std::sin(rad);
    const double cr = (static_cast<double>(h) - 1.0) / 2.0;
    const double cc = (static_cast<double>(w) - 1.0) / 2.0;
    std::vector<double> out(img.size(), 0.0);
    for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t c = 0; c < w; ++c) {
            // Inverse map: rotate the destination offset by -angle.
            const double dr = static_cast<double>(r) - cr;
            const double dc = static_cast<double>(c) - cc;
            const double sr = cr + dr * cs + dc * sn;
            const double sc = cc - dr * sn + dc * cs;
            const std::int64_t r0 = static_cast<std::int64_t>(std::floor(sr));
            const std::int64_t c0 = static_cast<std::int64_t>(std::floor(sc));
            const double fr = sr - static_cast<double>(r0);
            const double fc = sc - static_cast<double>(c0);
            double acc = 0.0;
            for (int dy = 0; dy <= 1; ++dy)
                for (int dx = 0; dx <= 1; ++dx) {
                    const std::int64_t rr = r0 + dy, cc2 = c0 + dx;
                    if (rr < 0 || rr >= h || cc2 < 0 || cc2 >= w) continue;
                    const double wgt = (dy ? fr : 1.0 - fr) * (dx ? fc : 1.0 - fc);
                    acc += wgt * img[rr * w + cc2];
                }
            out[r * w + c] = acc;
        }
    img = std::move(out);
    bool clamped = false;
    for (auto& ctr : centers) {
        const double dr = static_cast<double>(ctr.row) - cr;
        const double dc = static_cast<double>(ctr.col) - cc;
        double nr = cr + dr * cs - dc * sn;
        double nc = cc + dr * sn + dc * cs;
        std::int64_t ir = static_cast<std::int64_t>(std::llround(nr));
        std::int64_t ic = static_cast<std::int64_t>(std::llround(nc));
        if (ir < 0 || ir >= h || ic < 0 || ic >= w) {
            clamped = true;
            ir = std::clamp<std::int64_t>(ir, 0, h - 1);
            ic = std::clamp<std::int64_t>(ic, 0, w - 1);
        }
        ctr = {ir, ic};
    }
    return clamped;
}

// Separable Gaussian blur with border renormalization (constants are exact
// fixed points, so the image mean is preserved up to border effects).
inline void gaussian_blur(std::vector<double>& img, std::int64_t h, std::int64_t w, double sigma) {
    if (sigma <= 0.0) return;
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double ksum = 0.0;
    for (int k = -radius; k <= radius; ++k) {
        kernel[k + radius] = std::exp(-0.5 * (k / sigma) * (k / sigma));
        ksum += kernel[k + radius];
    }
    for (auto& v : kernel) v /= ksum;
    std::vector<double> tmp(img.size());
    for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t c = 0; c < w; ++c) {
            double acc = 0.0, wsum = 0.0;
            for (int k = -radius; k <= radius; ++k) {
                const std::int64_t cc = c + k;
                if (cc < 0 || cc >= w) continue;
                acc += kernel[k + radius] * img[r * w + cc];
                wsum += kernel[k + radius];
            }
            tmp[r * w + c] = acc / wsum;
        }
    for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t c = 0; c < w; ++c) {
            double acc = 0.0, wsum = 0.0;
            for (int k = -radius; k <= radius; ++k) {
                const std::int64_t rr = r + k;
                if (rr < 0 || rr >= h) continue;
                acc += kernel[k + radius] * tmp[rr * w + c];
                wsum += kernel[k + radius];
            }
            img[r * w + c] = acc / wsum;
        }
}

struct Augmented {
    std::vector<double> image;
    std::vector<RoiCenter> centers;
    bool clamped = false;
};

// Random flip / rotation in [-5, 5] degrees / Gaussian blur, all driven by
// the seed; never touches gender or age.
inline Augmented augment_sample(const std::vector<double>& image, std::int64_t h, std::int64_t w,
                                const std::vector<RoiCenter>& centers, std::uint64_t seed) {
    Augmented out{image, centers, false};
    Rng rng(seed);
    if (rng.bernoulli(0.5)) flip_horizontal(out.image, h, w, out.centers);
    const double angle = rng.uniform(-5.0, 5.0);
    out.clamped = rotate_about_center(out.image, h, w, out.centers, angle);
    if (rng.bernoulli(0.5)) gaussian_blur(out.image, h, w, rng.uniform(0.5, 1.5));
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic data. Each sample draws a maturity factor u in (0,1); ROI n's
// latent score is a_n * u + b_n * eta_n. The bone age is exactly the
// group-weighted score sum, and every ROI is rendered as a local intensity
// pattern at its (jittered) center whose geometry or contrast encodes the
// score. Group encodings differ on purpose (radius up, contrast up, radius
// down, ring radius) so that grouped score blocks see consistent decoding
// problems while random groupings see conflicting ones. A per-sample "style"
// bit flips the background/polarity, giving the patient-specific attention
// something real to normalize away.

struct SynthConfig {
    int count = 64;
    std::uint64_t seed = 0;
    std::int64_t image_size = 512;
    std::vector<double> group_weights{2.0, 1.6, 1.3, 1.0};  // per anatomy group
    double max_age_months = 210.0;
    double noise_level = 0.22;  // b_n relative to a_n
    double jitter_frac = 0.02;
    double pixel_noise = 0.015;
    bool embed_scores = false;  // write scores into the manifest (off: hidden table only)
    int bit_depth = 8;
};

namespace synth_detail {

struct RoiLayout {
    double fy, fx;  // fractional position in the image
};

inline std::vector<RoiLayout> hand_layout() {
    // Five finger columns and three joint rows plus two carpal sites; the
    // fractions keep every ROI in its own s=16 cell for image sizes >= 96.
    const double cols[5] = {0.09, 0.26, 0.42, 0.59, 0.76};
    std::vector<RoiLayout> out;
    for (double y : {0.09, 0.34, 0.59})
        for (double x : cols) out.push_back({y, x});
    out.push_back({0.84, 0.26});
    out.push_back({0.84, 0.59});
    return out;
}

inline void render_roi(std::vector<double>& img, std::int64_t size, const RoiCenter& center, int group,
                       double s_norm, double polarity) {
    const double k = static_cast<double>(size) / 96.0;
    double radius = 0.0, amp = 0.0, ring = -1.0;
    switch (group) {
        case 0:  // radius grows with the score
            radius = (1.8 + 4.2 * s_norm) * k;
            amp = 0.5;
            break;
        case 1:  // contrast grows with the score
            radius = 3.2 * k;
            amp = 0.12 + 0.6 * s_norm;
            break;
        case 2:  // radius shrinks with the score
            radius = (6.2 - 4.2 * s_norm) * k;
            amp = 0.5;
            break;
        default:  // ring radius grows with the score
            ring = (2.2 + 4.2 * s_norm) * k;
            radius = 1.3 * k;
            amp = 0.55;
            break;
    }
    const double extent = (ring > 0.0 ? ring + 4.0 * radius : 3.0 * radius) + 2.0;
    const std::int64_t r0 = std::max<std::int64_t>(0, center.row - static_cast<std::int64_t>(extent));
    const std::int64_t r1 = std::min<std::int64_t>(size - 1, center.row + static_cast<std::int64_t>(extent));
    const std::int64_t c0 = std::max<std::int64_t>(0, center.col - static_cast<std::int64_t>(extent));
    const std::int64_t c1 = std::min<std::int64_t>(size - 1, center.col + static_cast<std::int64_t>(extent));
    for (std::int64_t r = r0; r <= r1; ++r)
        for (std::int64_t c = c0; c <= c1; ++c) {
            const double dr = static_cast<double>(r - center.row);
            const double dc = static_cast<double>(c - center.col);
            const double d = std::sqrt(dr * dr + dc * dc);
            double v;
            if (ring > 0.0) {
                const double t = (d - ring) / radius;
                v = amp * std::exp(-t * t);
            } else {
                const double t = d / radius;
                v = amp * std::exp(-(t * t) * (t * t));
            }
            img[r * size + c] += polarity * v;
        }
}

}  // namespace synth_detail

struct SynthResult {
    std::string manifest_path;
    std::string hidden_scores_path;
    std::vector<std::vector<double>> scores;  // per sample, 17 entries
};

inline SynthResult synth_generate(const SynthConfig& cfg, const RoiSchema& schema, const std::string& out_dir) {
    if (cfg.count <= 0) throw std::invalid_argument("synth: count must be positive");
    if (cfg.image_size < 96) throw std::invalid_argument("synth: image size must be at least 96");
    if (cfg.group_weights.size() != static_cast<std::size_t>(RoiSchema::kGroupCount))
        throw std::invalid_argument("synth: need one weight per anatomy group");
    // The renderer assumes the default 5/5/5/2 layout.
    const std::vector<std::size_t> sizes{schema.group_members(0).size(), schema.group_members(1).size(),
                                         schema.group_members(2).size(), schema.group_members(3).size()};
    if (sizes != std::vector<std::size_t>{5, 5, 5, 2})
        throw std::invalid_argument("synth: generator requires the default 5/5/5/2 anatomy layout");

    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "images");

    Rng root(cfg.seed);
    Rng amp_rng = root.child(0xA);
    const int N = RoiSchema::kRoiCount;

    // Per-ROI signal and noise amplitudes, normalized so the maximum
    // attainable age equals max_age_months (ages are then exact sums, the
    // clip never engages).
    const double group_base[4] = {10.0, 9.0, 8.0, 7.0};
    std::vector<double> a(N), b(N);
    for (int n = 0; n < N; ++n) {
        a[n] = group_base[schema.group_of[n]] * (0.75 + 0.5 * amp_rng.uniform());
        b[n] = cfg.noise_level * a[n];
    }
    double reach = 0.0;
    for (int n = 0; n < N; ++n) reach += cfg.group_weights[schema.group_of[n]] * (a[n] + b[n]);
    const double scale = cfg.max_age_months / reach;
    for (int n = 0; n < N; ++n) {
        a[n] *= scale;
        b[n] *= scale;
    }

    const auto layout = synth_detail::hand_layout();
    const std::int64_t size = cfg.image_size;
    const double jitter = cfg.jitter_frac * static_cast<double>(size);

    std::ostringstream manifest, hidden;
    SynthResult result;
    for (int i = 0; i < cfg.count; ++i) {
        Rng rng = root.child(static_cast<std::uint64_t>(i) + 1);
        const double u = rng.uniform();
        const int gender = rng.bernoulli(0.5) ? 1 : 0;
        const int style = rng.bernoulli(0.5) ? 1 : 0;
        const double bg = style ? 0.78 : 0.20;
        const double polarity = style ? -1.0 : 1.0;

        std::vector<double> scores(N);
        double age = 0.0;
        for (int n = 0; n < N; ++n) {
            scores[n] = a[n] * u + b[n] * rng.uniform();
            age += cfg.group_weights[schema.group_of[n]] * scores[n];
        }
        age = std::clamp(age, 0.0, cfg.max_age_months);

        std::vector<RoiCenter> centers(N);
        for (int n = 0; n < N; ++n) {
            const double cy = layout[n].fy * static_cast<double>(size) + rng.uniform(-jitter, jitter);
            const double cx = layout[n].fx * static_cast<double>(size) + rng.uniform(-jitter, jitter);
            centers[n] = {std::clamp<std::int64_t>(static_cast<std::int64_t>(std::llround(cy)), 0, size - 1),
                          std::clamp<std::int64_t>(static_cast<std::int64_t>(std::llround(cx)), 0, size - 1)};
        }

        std::vector<double> img(static_cast<std::size_t>(size) * size, bg);
        for (int n = 0; n < N; ++n) {
            const double s_norm = scores[n] / (a[n] + b[n]);
            synth_detail::render_roi(img, size, centers[n], schema.group_of[n], s_norm, polarity);
        }
        for (auto& v : img) {
            v += rng.uniform(-cfg.pixel_noise, cfg.pixel_noise);
            v = std::clamp(v, 0.01, 0.99);
        }

        char name[32];
        std::snprintf(name, sizeof(name), "s%04d", i);
        const std::string rel = std::string("images/") + name + ".png";
        write_gray_png((fs::path(out_dir) / rel).string(), GrayImage::from_unit(img, size, size, cfg.bit_depth));

        nlohmann::json rec;
        rec["id"] = name;
        rec["image"] = rel;
        rec["gender"] = gender;
        rec["age_months"] = age;
        rec["centers"] = nlohmann::json::array();
        for (const auto& c : centers) rec["centers"].push_back({c.row, c.col});
        if (cfg.embed_scores) rec["scores"] = scores;
        manifest << rec.dump() << "\n";

        nlohmann::json hrec;
        hrec["id"] = name;
        hrec["scores"] = scores;
        hrec["maturity"] = u;
        hrec["style"] = style;
        hidden << hrec.dump() << "\n";
        result.scores.push_back(std::move(scores));
    }

    result.manifest_path = (fs::path(out_dir) / "manifest.jsonl").string();
    result.hidden_scores_path = (fs::path(out_dir) / "scores_hidden.jsonl").string();
    std::ofstream(result.manifest_path, std::ios::trunc) << manifest.str();
    std::ofstream(result.hidden_scores_path, std::ios::trunc) << hidden.str();
    return result;
}

}  // namespace bonegraph
