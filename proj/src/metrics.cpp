#include "sagekeep/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace sagekeep {

namespace {

void require_grid_pair(const Tensor& a, const Tensor& b, const char* what) {
    if (a.rank() != 2 || b.rank() != 2)
        throw DataError(std::string(what) + ": label grids must be rank 2");
    if (a.shape() != b.shape())
        throw DataError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " +
                        b.shape_str());
}

bool is_class(double v, std::size_t cls) {
    return std::nearbyint(v) == static_cast<double>(cls);
}

}  // namespace

ConfusionCounts confusion(const Tensor& pred, const Tensor& gt, std::size_t cls) {
    require_grid_pair(pred, gt, "confusion");
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = is_class(pred[i], cls);
        const bool g = is_class(gt[i], cls);
        if (p && g)
            ++c.tp;
        else if (p && !g)
            ++c.fp;
        else if (!p && g)
            ++c.fn;
        else
            ++c.tn;
    }
    return c;
}

namespace {

double ratio_or_empty(std::uint64_t num, std::uint64_t den, bool both_empty) {
    if (den == 0) return both_empty ? 1.0 : 0.0;
    return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

OverlapMetrics overlap_from_counts(const ConfusionCounts& c) {
    const bool both_empty = (c.tp + c.fp == 0) && (c.tp + c.fn == 0);
    OverlapMetrics m{};
    m.dice = ratio_or_empty(2 * c.tp, 2 * c.tp + c.fp + c.fn, both_empty);
    m.iou = ratio_or_empty(c.tp, c.tp + c.fp + c.fn, both_empty);
    m.acc = ratio_or_empty(c.tp + c.tn, c.total(), both_empty);
    m.pre = ratio_or_empty(c.tp, c.tp + c.fp, both_empty);
    m.sen = ratio_or_empty(c.tp, c.tp + c.fn, both_empty);
    m.spe = ratio_or_empty(c.tn, c.tn + c.fp, both_empty);
    return m;
}

OverlapMetrics overlap_metrics(const Tensor& pred, const Tensor& gt, std::size_t cls) {
    return overlap_from_counts(confusion(pred, gt, cls));
}

Tensor argmax_labels(const Tensor& logits) {
    if (logits.rank() != 3)
        throw DataError("argmax_labels: logits must be KxHxW, got " + logits.shape_str());
    const std::size_t K = logits.shape()[0];
    const std::size_t hw = logits.shape()[1] * logits.shape()[2];
    std::vector<double> out(hw);
    for (std::size_t px = 0; px < hw; ++px) {
        std::size_t best = 0;
        double best_v = logits[px];
        for (std::size_t c = 1; c < K; ++c) {
            const double v = logits[c * hw + px];
            if (v > best_v) {
                best_v = v;
                best = c;
            }
        }
        out[px] = static_cast<double>(best);
    }
    return Tensor::from_data({logits.shape()[1], logits.shape()[2]}, std::move(out));
}

Tensor class_mask(const Tensor& labels, std::size_t cls) {
    if (labels.rank() != 2)
        throw DataError("class_mask: labels must be rank 2, got " + labels.shape_str());
    std::vector<double> out(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) out[i] = is_class(labels[i], cls) ? 1.0 : 0.0;
    return Tensor::from_data(labels.shape(), std::move(out));
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw DataError("percentile: empty sample");
    if (q < 0.0 || q > 1.0) throw DataError("percentile: q outside [0, 1]");
    std::sort(values.begin(), values.end());
    const double rank = q * static_cast<double>(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(rank);
    if (lo + 1 >= values.size()) return values.back();
    const double frac = rank - static_cast<double>(lo);
    return values[lo] + (values[lo + 1] - values[lo]) * frac;
}

namespace {

std::vector<std::pair<std::size_t, std::size_t>> boundary_pixels(const Tensor& mask) {
    const std::size_t h = mask.shape()[0], w = mask.shape()[1];
    std::vector<std::pair<std::size_t, std::size_t>> out;
    auto inside = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
        if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(h) ||
            x >= static_cast<std::ptrdiff_t>(w))
            return false;  // off-grid counts as background
        return mask[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] != 0.0;
    };
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            if (mask[y * w + x] == 0.0) continue;
            const auto sy = static_cast<std::ptrdiff_t>(y), sx = static_cast<std::ptrdiff_t>(x);
            if (!inside(sy - 1, sx) || !inside(sy + 1, sx) || !inside(sy, sx - 1) ||
                !inside(sy, sx + 1))
                out.emplace_back(y, x);
        }
    return out;
}

// Exact 1-D squared Euclidean distance transform (lower envelope of
// parabolas), with anisotropic spacing folded in by the caller.
void edt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<double>& z,
            std::vector<std::size_t>& v) {
    const std::size_t n = f.size();
    v.assign(n, 0);
    z.assign(n + 1, 0.0);
    std::size_t k = 0;
    z[0] = -std::numeric_limits<double>::infinity();
    z[1] = std::numeric_limits<double>::infinity();
    for (std::size_t q = 1; q < n; ++q) {
        const double fq = f[q];
        if (fq == std::numeric_limits<double>::infinity() &&
            f[v[k]] == std::numeric_limits<double>::infinity())
            continue;
        double s;
        while (true) {
            const std::size_t p = v[k];
            if (f[p] == std::numeric_limits<double>::infinity()) {
                s = -std::numeric_limits<double>::infinity();
            } else if (fq == std::numeric_limits<double>::infinity()) {
                s = std::numeric_limits<double>::infinity();
            } else {
                s = ((fq + static_cast<double>(q * q)) - (f[p] + static_cast<double>(p * p))) /
                    (2.0 * static_cast<double>(q) - 2.0 * static_cast<double>(p));
            }
            if (s <= z[k] && k > 0) {
                --k;
            } else {
                break;
            }
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = std::numeric_limits<double>::infinity();
    }
    k = 0;
    for (std::size_t q = 0; q < n; ++q) {
        while (z[k + 1] < static_cast<double>(q)) ++k;
        const std::size_t p = v[k];
        if (f[p] == std::numeric_limits<double>::infinity())
            d[q] = std::numeric_limits<double>::infinity();
        else
            d[q] = (static_cast<double>(q) - static_cast<double>(p)) *
                       (static_cast<double>(q) - static_cast<double>(p)) +
                   f[p];
    }
}

// Squared EDT of a seed set on an h x w grid with anisotropic spacing.
// Spacing is handled by scaling coordinates: distances in row direction get
// sy, columns sx. The two-pass separable transform stays exact because
// squared anisotropic distance is still separable per axis.
std::vector<double> squared_edt(const std::vector<std::pair<std::size_t, std::size_t>>& seeds,
                                std::size_t h, std::size_t w, double sy, double sx) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> grid(h * w, inf);
    for (const auto& [y, x] : seeds) grid[y * w + x] = 0.0;

    // Pass 1: along columns (row coordinate scaled by sy). Transform in index
    // units then scale: EDT over index i of f/sy^2, multiplied back by sy^2.
    std::vector<double> col(h), dcol(h), z;
    std::vector<std::size_t> v;
    for (std::size_t x = 0; x < w; ++x) {
        for (std::size_t y = 0; y < h; ++y)
            col[y] = grid[y * w + x] == inf ? inf : grid[y * w + x] / (sy * sy);
        dcol.assign(h, 0.0);
        edt_1d(col, dcol, z, v);
        for (std::size_t y = 0; y < h; ++y)
            grid[y * w + x] = dcol[y] == inf ? inf : dcol[y] * sy * sy;
    }
    // Pass 2: along rows.
    std::vector<double> row(w), drow(w);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x)
            row[x] = grid[y * w + x] == inf ? inf : grid[y * w + x] / (sx * sx);
        drow.assign(w, 0.0);
        edt_1d(row, drow, z, v);
        for (std::size_t x = 0; x < w; ++x)
            grid[y * w + x] = drow[x] == inf ? inf : drow[x] * sx * sx;
    }
    return grid;
}

}  // namespace

std::optional<SurfaceDistances> surface_distances(const Tensor& pred_mask, const Tensor& gt_mask,
                                                  double spacing_y, double spacing_x) {
    require_grid_pair(pred_mask, gt_mask, "surface_distances");
    if (spacing_y <= 0.0 || spacing_x <= 0.0)
        throw DataError("surface_distances: spacing must be positive");
    const auto pb = boundary_pixels(pred_mask);
    const auto gb = boundary_pixels(gt_mask);
    if (pb.empty() || gb.empty()) return std::nullopt;

    const std::size_t h = pred_mask.shape()[0], w = pred_mask.shape()[1];
    const auto dist_to_g = squared_edt(gb, h, w, spacing_y, spacing_x);
    const auto dist_to_p = squared_edt(pb, h, w, spacing_y, spacing_x);

    std::vector<double> pooled;
    pooled.reserve(pb.size() + gb.size());
    for (const auto& [y, x] : pb) pooled.push_back(std::sqrt(dist_to_g[y * w + x]));
    for (const auto& [y, x] : gb) pooled.push_back(std::sqrt(dist_to_p[y * w + x]));

    SurfaceDistances out{};
    out.hd95 = percentile(pooled, 0.95);
    double sum = 0.0;
    for (double d : pooled) sum += d;
    out.asd = sum / static_cast<double>(pooled.size());
    return out;
}

}  // namespace sagekeep
