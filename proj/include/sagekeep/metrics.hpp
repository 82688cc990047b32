#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "sagekeep/tensor.hpp"

namespace sagekeep {

struct ConfusionCounts {
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
    std::uint64_t total() const { return tp + fp + fn + tn; }
};

/// Per-class pixel counts for pred/gt label grids (equal shapes required).
ConfusionCounts confusion(const Tensor& pred, const Tensor& gt, std::size_t cls);

struct OverlapMetrics {
    double dice, iou, acc, pre, sen, spe;
};

/// Overlap ratios with the empty-denominator convention: when a ratio's
/// denominator is zero the metric is 1 if both pred and gt are empty for the
/// class, 0 otherwise.
OverlapMetrics overlap_metrics(const Tensor& pred, const Tensor& gt, std::size_t cls);
OverlapMetrics overlap_from_counts(const ConfusionCounts& c);

struct SurfaceDistances {
    double hd95;  // 95th percentile of pooled symmetric boundary distances
    double asd;   // mean of the same pooled set
};

/// Boundary pixels are mask pixels with a 4-neighbor outside the mask
/// (off-grid counts as background). Distances are Euclidean with per-axis
/// spacing in mm. Returns nullopt when either mask is empty -- the metric is
/// undefined, never silently zero.
std::optional<SurfaceDistances> surface_distances(const Tensor& pred_mask, const Tensor& gt_mask,
                                                  double spacing_y = 1.0, double spacing_x = 1.0);

/// Argmax over the class axis of KxHxW logits -> HxW label grid.
Tensor argmax_labels(const Tensor& logits);

/// pred == cls binary mask as an HxW tensor of 0/1.
Tensor class_mask(const Tensor& labels, std::size_t cls);

/// Linear-interpolated percentile (q in [0,1]) of an unsorted sample.
double percentile(std::vector<double> values, double q);

}  // namespace sagekeep
