#pragma once

// Test-side oracles and generators shared by the unit and acceptance suites.
// Everything here stays independent of the library's gradient path: numeric
// derivatives come from central differences on plain forward evaluations.

#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <utility>
#include <vector>

#include "sagekeep/metrics.hpp"
#include "sagekeep/oracle.hpp"
#include "sagekeep/rng.hpp"
#include "sagekeep/tensor.hpp"

namespace sktest {

using sagekeep::Tensor;

// Scalar-valued function of a list of input tensors. When `tape` is null the
// evaluation is un-tracked (used for the numeric side).
using LossFn = std::function<sagekeep::Tensor(std::vector<sagekeep::Tensor>& inputs,
                                              sagekeep::Tape* tape)>;

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
};

inline double rel_err(double a, double b) {
    const double scale = std::max({1.0, std::abs(a), std::abs(b)});
    return std::abs(a - b) / scale;
}

// Central-difference gradient check of `fn` at `inputs`, h = 1e-5.
inline GradCheckResult check_gradients(std::vector<Tensor> inputs, const LossFn& fn,
                                       double h = 1e-5) {
    sagekeep::Tape tape;
    std::vector<Tensor> tracked;
    tracked.reserve(inputs.size());
    for (const auto& t : inputs) tracked.push_back(tape.leaf(t));
    Tensor loss = fn(tracked, &tape);
    sagekeep::Gradients grads = backward(tape, loss);

    GradCheckResult result;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Tensor analytic = grads.wrt(tracked[i]);
        for (std::size_t j = 0; j < inputs[i].size(); ++j) {
            std::vector<Tensor> plus = inputs;
            std::vector<Tensor> minus = inputs;
            plus[i][j] += h;
            minus[i][j] -= h;
            const double fp = fn(plus, nullptr).value();
            const double fm = fn(minus, nullptr).value();
            const double numeric = (fp - fm) / (2.0 * h);
            result.max_rel_err = std::max(result.max_rel_err, rel_err(analytic[j], numeric));
            ++result.checked;
        }
    }
    return result;
}

inline Tensor random_tensor(std::vector<std::size_t> shape, sagekeep::Rng& rng, double lo = -2.0,
                            double hi = 2.0) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> data(n);
    for (auto& v : data) v = rng.uniform(lo, hi);
    return Tensor::from_data(std::move(shape), std::move(data));
}

// Keeps values clear of a subgradient kink so finite differences stay valid.
inline void push_away_from(Tensor& t, double kink, double margin) {
    for (std::size_t i = 0; i < t.size(); ++i)
        if (std::abs(t[i] - kink) < margin) t[i] = kink + (t[i] >= kink ? margin : -margin);
}

inline Tensor random_labels(std::size_t h, std::size_t w, std::size_t num_classes,
                            sagekeep::Rng& rng) {
    std::vector<double> data(h * w);
    for (auto& v : data) v = static_cast<double>(rng.uniform_int(num_classes));
    return Tensor::from_data({h, w}, std::move(data));
}

// All-pairs boundary-distance computation: the independent oracle for the
// hd95/asd implementation. Same boundary definition, no distance transform.
struct BruteSurface {
    double hd95, asd;
};

inline std::vector<std::pair<double, double>> brute_boundary(const Tensor& mask, double sy,
                                                             double sx) {
    const std::size_t h = mask.shape()[0], w = mask.shape()[1];
    auto inside = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
        if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(h) ||
            x >= static_cast<std::ptrdiff_t>(w))
            return false;
        return mask[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] != 0.0;
    };
    std::vector<std::pair<double, double>> out;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            if (mask[y * w + x] == 0.0) continue;
            const auto yy = static_cast<std::ptrdiff_t>(y), xx = static_cast<std::ptrdiff_t>(x);
            if (!inside(yy - 1, xx) || !inside(yy + 1, xx) || !inside(yy, xx - 1) ||
                !inside(yy, xx + 1))
                out.emplace_back(static_cast<double>(y) * sy, static_cast<double>(x) * sx);
        }
    return out;
}

inline std::optional<BruteSurface> brute_surface(const Tensor& pred, const Tensor& gt, double sy,
                                                 double sx) {
    const auto pb = brute_boundary(pred, sy, sx);
    const auto gb = brute_boundary(gt, sy, sx);
    if (pb.empty() || gb.empty()) return std::nullopt;
    auto nearest = [](const std::pair<double, double>& a,
                      const std::vector<std::pair<double, double>>& bs) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& b : bs) {
            const double dy = a.first - b.first, dx = a.second - b.second;
            best = std::min(best, dy * dy + dx * dx);
        }
        return std::sqrt(best);
    };
    std::vector<double> pooled;
    pooled.reserve(pb.size() + gb.size());
    for (const auto& p : pb) pooled.push_back(nearest(p, gb));
    for (const auto& g : gb) pooled.push_back(nearest(g, pb));
    BruteSurface out{};
    out.hd95 = sagekeep::percentile(pooled, 0.95);
    double total = 0;
    for (double d : pooled) total += d;
    out.asd = total / static_cast<double>(pooled.size());
    return out;
}

// Spearman rank correlation with average ranks for ties.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    const auto ra = average_ranks(a);
    const auto rb = average_ranks(b);
    const std::size_t n = a.size();
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double cov = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (va == 0.0 || vb == 0.0) return 0.0;
    return cov / std::sqrt(va * vb);
}

// ---- planted-vulnerability construction ----
//
// A handcrafted threshold oracle plus an image with several small blobs, all
// sitting a controlled distance from the decision boundary. Blobs are
// flippable by an epsilon shift and strictly inside distinct tokens, so the
// ground-truth attackability ranking is the blob size ranking.

struct PlantedInstance {
    sagekeep::OracleNet oracle;
    Tensor image;   // 1 x H x W
    Tensor labels;  // H x W, blob pixels are class 1
    std::size_t core_row = 0, core_col = 0;  // token of the largest blob
    std::vector<std::pair<std::size_t, std::size_t>> blob_tokens;  // by descending size
};

// grid x grid tokens of `token` pixels; `blobs` distinct tokens carry square
// blobs of strictly decreasing side. The class-1 logit thresholds the local
// 3x3 mean at theta: background sits 7*eps below it, blobs 0.4*eps above.
// Only pixels whose whole 3x3 patch lies in a blob are predicted foreground,
// so a -eps shift of that blob's token flips (side-2)^2 pixels and nothing
// else in the image moves. Attackability is therefore ranked by blob size.
inline PlantedInstance make_planted(std::uint64_t seed, std::size_t grid = 4,
                                    std::size_t token = 12, double eps = 0.05,
                                    std::size_t blobs = 3) {
    using namespace sagekeep;
    Rng rng(seed);
    const std::size_t size = grid * token;
    const double theta = 0.5;
    const double bg = theta - 7.0 * eps;
    const double blob_level = theta + 0.4 * eps;

    PlantedInstance inst;
    inst.image = Tensor::full({1, size, size}, bg);
    inst.labels = Tensor::zeros({size, size});

    // distinct random tokens
    std::vector<std::size_t> cells(grid * grid);
    std::iota(cells.begin(), cells.end(), 0);
    rng.shuffle(cells);

    // strictly decreasing sides; >= 3 keeps every blob flippable
    const std::size_t interior = token - 4;  // 2px guard band inside the token
    std::vector<std::size_t> sides;
    for (std::size_t b = 0; b < blobs; ++b) {
        const std::size_t side = std::max<std::size_t>(3, interior - 2 * b);
        if (!sides.empty() && side >= sides.back())
            throw sagekeep::DataError("make_planted: token too small for graded blobs");
        sides.push_back(side);
    }

    for (std::size_t b = 0; b < blobs; ++b) {
        const std::size_t cell = cells[b];
        const std::size_t tr = cell / grid, tc = cell % grid;
        const std::size_t side = sides[b];
        const std::size_t max_off = interior - side;
        const std::size_t oy = 2 + (max_off ? rng.uniform_int(max_off + 1) : 0);
        const std::size_t ox = 2 + (max_off ? rng.uniform_int(max_off + 1) : 0);
        for (std::size_t y = 0; y < side; ++y)
            for (std::size_t x = 0; x < side; ++x) {
                const std::size_t py = tr * token + oy + y;
                const std::size_t px = tc * token + ox + x;
                inst.image[py * size + px] = blob_level;
                inst.labels[py * size + px] = 1.0;
            }
        inst.blob_tokens.emplace_back(tr, tc);
        if (b == 0) {
            inst.core_row = tr;
            inst.core_col = tc;
        }
    }

    // class 0: constant zero logit; class 1: 9 * (local mean - theta)
    OracleNet net;
    net.id = "planted";
    net.num_classes = 2;
    LayerSpec spec;
    spec.in_channels = 1;
    spec.out_channels = 2;
    spec.kernel = 3;
    spec.activation = Activation::None;
    net.layers.push_back(spec);
    std::vector<double> w(2 * 1 * 3 * 3, 0.0);
    for (std::size_t i = 9; i < 18; ++i) w[i] = 1.0;  // class-1 plane sums the 3x3 patch
    ConvParams params;
    params.weight = Tensor::from_data({2, 1, 3, 3}, std::move(w));
    params.bias = Tensor::from_data({2}, {0.0, -9.0 * theta});
    net.params.push_back(std::move(params));
    net.frozen = true;
    inst.oracle = std::move(net);
    return inst;
}

}  // namespace sktest
