#include "sagekeep/keep.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sagekeep {

void KeepConfig::validate() const {
    if (tau_core <= 0.0 || tau_core > 1.0) throw DataError("keep: tau_core must be in (0, 1]");
    if (tau_low < 0.0 || tau_low >= 1.0) throw DataError("keep: tau_low must be in [0, 1)");
    if (rho_mask < 0.0 || rho_mask > 1.0) throw DataError("keep: rho_mask must be in [0, 1]");
    if (fill < 0.0 || fill > 1.0) throw DataError("keep: fill must be in [0, 1]");
}

TokenScores pool_scores(const ImportanceMap& map) {
    validate_map(map);
    return TokenScores{map.grid};
}

TokenScores pool_scores_pixel(const Tensor& pixel_map, std::size_t token_size) {
    if (pixel_map.rank() != 2)
        throw DataError("pool_scores: pixel map must be rank 2, got " + pixel_map.shape_str());
    if (token_size < 1) throw DataError("pool_scores: token_size must be >= 1");
    const std::size_t h = pixel_map.shape()[0], w = pixel_map.shape()[1];
    if (h % token_size != 0 || w % token_size != 0)
        throw DataError("pool_scores: pixel map " + pixel_map.shape_str() +
                        " not divisible by token_size " + std::to_string(token_size));
    const std::size_t ht = h / token_size, wt = w / token_size;
    std::vector<double> out(ht * wt, 0.0);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            out[(y / token_size) * wt + x / token_size] += pixel_map[y * w + x];
    const double norm = 1.0 / static_cast<double>(token_size * token_size);
    for (double& v : out) v *= norm;
    return TokenScores{Tensor::from_data({ht, wt}, std::move(out))};
}

Tensor topk_core_mask(const TokenScores& scores, double tau_core) {
    if (tau_core <= 0.0 || tau_core > 1.0)
        throw DataError("topk_core_mask: tau_core must be in (0, 1]");
    const std::size_t n = scores.grid.size();
    const std::size_t k =
        static_cast<std::size_t>(std::ceil(tau_core * static_cast<double>(n)));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores.grid[a] != scores.grid[b]) return scores.grid[a] > scores.grid[b];
        return a < b;  // row-major tie-break
    });
    Tensor mask = Tensor::zeros(scores.grid.shape());
    for (std::size_t i = 0; i < k; ++i) mask[order[i]] = 1.0;
    return mask;
}

namespace {

void require_token_grid(const Tensor& img, const Tensor& grid, std::size_t token_size,
                        const char* what) {
    if (img.rank() != 3) throw DataError(std::string(what) + ": image must be CxHxW");
    if (grid.rank() != 2) throw DataError(std::string(what) + ": mask must be a token grid");
    if (grid.shape()[0] * token_size != img.shape()[1] ||
        grid.shape()[1] * token_size != img.shape()[2])
        throw DataError(std::string(what) + ": token grid " + grid.shape_str() + " x " +
                        std::to_string(token_size) + " does not tile image " + img.shape_str());
}

// Per-pixel select keyed on the token grid; chosen pixels are copied, not
// recomputed, so the restore is bit-exact.
Tensor select_by_tokens(const Tensor& inside, const Tensor& outside, const Tensor& grid,
                        std::size_t token_size) {
    const std::size_t C = inside.shape()[0], H = inside.shape()[1], W = inside.shape()[2];
    const std::size_t wt = grid.shape()[1];
    Tensor out = outside;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y) {
            const std::size_t ty = y / token_size;
            for (std::size_t x = 0; x < W; ++x)
                if (grid[ty * wt + x / token_size] != 0.0)
                    out[(c * H + y) * W + x] = inside[(c * H + y) * W + x];
        }
    return out;
}

}  // namespace

Tensor restore_core(const Tensor& x_aug, const Tensor& x, const Tensor& core_mask,
                    std::size_t token_size) {
    if (x_aug.shape() != x.shape())
        throw DataError("restore_core: shape mismatch " + x_aug.shape_str() + " vs " +
                        x.shape_str());
    require_token_grid(x, core_mask, token_size, "restore_core");
    return select_by_tokens(x, x_aug, core_mask, token_size);
}

Tensor guided_mask(const TokenScores& scores, const Tensor& core_mask, const KeepConfig& cfg,
                   Rng& rng) {
    cfg.validate();
    if (scores.grid.shape() != core_mask.shape())
        throw DataError("guided_mask: score grid " + scores.grid.shape_str() +
                        " vs core mask " + core_mask.shape_str());
    Tensor mask = Tensor::zeros(scores.grid.shape());
    if (cfg.tau_low == 0.0) return mask;  // masking is optional

    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < scores.grid.size(); ++i)
        if (scores.grid[i] < cfg.tau_low && core_mask[i] == 0.0) pool.push_back(i);
    const std::size_t take =
        static_cast<std::size_t>(std::floor(cfg.rho_mask * static_cast<double>(pool.size())));
    // partial Fisher-Yates: the first `take` entries are a uniform subset
    for (std::size_t i = 0; i < take; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(pool.size() - i));
        std::swap(pool[i], pool[j]);
        mask[pool[i]] = 1.0;
    }
    return mask;
}

Tensor apply_context_mask(const Tensor& x, const Tensor& mask, double fill,
                          std::size_t token_size) {
    require_token_grid(x, mask, token_size, "apply_context_mask");
    Tensor filled = Tensor::full(x.shape(), fill);
    return select_by_tokens(filled, x, mask, token_size);
}

KeepResult keep_augment(const Tensor& x, const Tensor& y, const ImportanceMap& map,
                        const AugmentSpec& aug, const KeepConfig& cfg, Rng& rng,
                        const std::optional<Sample>& partner) {
    cfg.validate();
    validate_map(map);
    if (x.rank() != 3) throw DataError("keep_augment: image must be CxHxW, got " + x.shape_str());
    if (map.image_h() != x.shape()[1] || map.image_w() != x.shape()[2])
        throw DataError("keep_augment: map covers " + std::to_string(map.image_h()) + "x" +
                        std::to_string(map.image_w()) + ", image is " + x.shape_str());

    AugmentResult augmented = apply(aug, x, y, rng, partner);
    TokenScores scores = pool_scores(map);
    Tensor core = topk_core_mask(scores, cfg.tau_core);
    Tensor restored = restore_core(augmented.image, x, core, map.token_size);

    // Mixing augmentations may have altered labels; core tokens take back
    // the original ones alongside the restored pixels.
    Tensor labels = augmented.labels;
    if (aug.kind == AugmentKind::Mixup || aug.kind == AugmentKind::Cutmix) {
        const std::size_t H = y.shape()[0], W = y.shape()[1];
        const std::size_t wt = core.shape()[1];
        for (std::size_t yy = 0; yy < H; ++yy) {
            const std::size_t ty = yy / map.token_size;
            for (std::size_t xx = 0; xx < W; ++xx)
                if (core[ty * wt + xx / map.token_size] != 0.0)
                    labels[yy * W + xx] = y[yy * W + xx];
        }
    }

    Tensor context = guided_mask(scores, core, cfg, rng);
    Tensor final_image = apply_context_mask(restored, context, cfg.fill, map.token_size);

    return KeepResult{std::move(final_image), std::move(labels), std::move(core),
                      std::move(context), augmented.mix_weight};
}

std::vector<std::size_t> mask_token_indices(const Tensor& mask) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i] != 0.0) out.push_back(i);
    return out;
}

}  // namespace sagekeep
