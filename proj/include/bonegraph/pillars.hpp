#pragma once

// Feature-pillar extraction: ROI centers are projected onto the backbone
// feature map by floor division, the channel vector at the projected cell
// becomes the ROI's pillar, and each pillar is augmented with the gender bit
// and the normalized original center position.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bonegraph/tensor.hpp"

namespace bonegraph {

struct RoiCenter {
    std::int64_t row = 0;  // I, vertical pixel coordinate on the original image
    std::int64_t col = 0;  // J, horizontal pixel coordinate
};

// Feature map of one radiograph plus the image size it came from.
struct FeatureMap {
    Tensor map;  // C x h x w
    std::int64_t image_h = 0;
    std::int64_t image_w = 0;
};

inline std::pair<std::int64_t, std::int64_t> project_position(const RoiCenter& c, std::int64_t s,
                                                              std::int64_t fm_h, std::int64_t fm_w) {
    if (s <= 0) throw std::invalid_argument("project_position: downsample factor must be positive");
    if (c.row < 0 || c.col < 0) throw std::invalid_argument("project_position: negative center coordinate");
    const std::int64_t i = c.row / s;
    const std::int64_t j = c.col / s;
    if (i >= fm_h || j >= fm_w)
        throw std::runtime_error("project_position: center (" + std::to_string(c.row) + "," +
                                 std::to_string(c.col) + ") projects to (" + std::to_string(i) + "," +
                                 std::to_string(j) + ") outside the " + std::to_string(fm_h) + "x" +
                                 std::to_string(fm_w) + " feature map; image and centers are inconsistent");
    return {i, j};
}

// Raw pillars for one radiograph: row n is the channel vector of the feature
// map at ROI n's projected cell. Output is N x C.
inline Tensor extract_pillars(const FeatureMap& fm, const std::vector<RoiCenter>& centers, std::int64_t s) {
    if (fm.map.rank() != 3) op_error("extract_pillars", "feature map must be C x h x w");
    const std::int64_t h = fm.map.dim(1), w = fm.map.dim(2);
    Tensor batch = reshape(fm.map, {1, fm.map.dim(0), h, w});
    std::vector<CellIndex> cells;
    cells.reserve(centers.size());
    for (const auto& c : centers) {
        auto [i, j] = project_position(c, s, h, w);
        cells.push_back({0, i, j});
    }
    return gather_cells(batch, cells);
}

// Appends [gender, I/H, J/W] to every pillar row; output is N x (C + 3).
inline Tensor augment_pillars(const Tensor& raw, int gender, const std::vector<RoiCenter>& centers,
                              std::int64_t image_h, std::int64_t image_w) {
    if (raw.rank() != 2) op_error("augment_pillars", "raw pillars must be 2-D");
    if (static_cast<std::size_t>(raw.dim(0)) != centers.size())
        op_error("augment_pillars", "row count does not match center count");
    if (gender != 0 && gender != 1) op_error("augment_pillars", "gender must be 0 or 1");
    const std::int64_t n = raw.dim(0);
    std::vector<double> extra(static_cast<std::size_t>(n * 3));
    for (std::int64_t r = 0; r < n; ++r) {
        extra[r * 3 + 0] = static_cast<double>(gender);
        extra[r * 3 + 1] = static_cast<double>(centers[r].row) / static_cast<double>(image_h);
        extra[r * 3 + 2] = static_cast<double>(centers[r].col) / static_cast<double>(image_w);
    }
    return concat_cols(raw, Tensor::from_values({n, 3}, std::move(extra)));
}

}  // namespace bonegraph
