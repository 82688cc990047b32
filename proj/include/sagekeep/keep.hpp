#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "sagekeep/augment.hpp"
#include "sagekeep/io.hpp"
#include "sagekeep/rng.hpp"
#include "sagekeep/tensor.hpp"

namespace sagekeep {

/// Online intervention parameters. tau_core selects K = ceil(tau_core * N)
/// tokens to restore; tau_low (0 disables) thresholds the maskable pool;
/// rho_mask is the fraction of that pool actually masked.
struct KeepConfig {
    double tau_core = 0.6;
    double tau_low = 0.0;
    double rho_mask = 0.5;
    double fill = 0.0;
    std::uint64_t seed = 0;

    void validate() const;
};

struct TokenScores {
    Tensor grid;  // H_t x W_t
};

/// Importance maps arrive at token resolution, so pooling is the identity.
TokenScores pool_scores(const ImportanceMap& map);

/// Block-mean pooling for externally supplied pixel-resolution maps.
TokenScores pool_scores_pixel(const Tensor& pixel_map, std::size_t token_size);

/// Binary token grid with exactly ceil(tau_core * num_tokens) ones, selected
/// by descending score; ties break toward the lower row-major index.
Tensor topk_core_mask(const TokenScores& scores, double tau_core);

/// x' = x_aug outside core tokens, x inside -- restored pixels are bit-equal
/// to the originals.
Tensor restore_core(const Tensor& x_aug, const Tensor& x, const Tensor& core_mask,
                    std::size_t token_size);

/// Uniform sample (without replacement) of floor(rho_mask * pool) tokens from
/// the pool {score < tau_low} \ core. tau_low == 0 yields the empty mask.
Tensor guided_mask(const TokenScores& scores, const Tensor& core_mask, const KeepConfig& cfg,
                   Rng& rng);

/// x_final = x' outside masked tokens, fill value inside. Empty mask is the
/// bit-exact identity.
Tensor apply_context_mask(const Tensor& x, const Tensor& mask, double fill,
                          std::size_t token_size);

struct KeepResult {
    Tensor image;        // x_final
    Tensor labels;       // originals restored inside core for mixing kinds
    Tensor core_mask;    // M_core token grid
    Tensor context_mask; // M_mask token grid
    std::optional<double> mix_weight;
};

/// Full pipeline of one sample: augment -> pool -> top-K -> restore ->
/// guided mask -> apply. Token indices of both masks are exposed for audit.
KeepResult keep_augment(const Tensor& x, const Tensor& y, const ImportanceMap& map,
                        const AugmentSpec& aug, const KeepConfig& cfg, Rng& rng,
                        const std::optional<Sample>& partner = std::nullopt);

/// Row-major indices of the set tokens in a binary grid (for the audit
/// side-car files).
std::vector<std::size_t> mask_token_indices(const Tensor& mask);

}  // namespace sagekeep
