#pragma once

#include <cstdint>
#include <string>

#include "sagekeep/io.hpp"
#include "sagekeep/oracle.hpp"
#include "sagekeep/tensor.hpp"

namespace sagekeep {

/// Hyperparameters of the sparse adversarial gating problem. The annealing
/// schedule is expressed through the inverse temperature alpha, increased
/// linearly from alpha_init to alpha_end; the gate temperature is T = 1/alpha.
struct SageConfig {
    double epsilon = 0.05;     // l-inf budget for delta, in [0,1] intensity units
    int steps = 200;           // optimization steps N
    double alpha_init = 0.1;   // inverse-temperature start
    double alpha_end = 10.0;   // inverse-temperature end
    double mu_sparse = 0.01;   // l1 weight on the soft mask
    double beta_delta = 0.01;  // l1 weight on the perturbation
    double lambda_ce = 1.0;
    double lambda_dice = 1.0;
    double lr = 1e-3;          // Adam step size for G and delta
    std::size_t token_size = 16;
    std::uint64_t seed = 0;
};

/// Throws on inconsistent settings (negative weights, alpha_end < alpha_init,
/// non-positive steps...). epsilon == 0 is allowed: the attack is disabled
/// and only sparsity shapes the gate.
void validate_sage_config(const SageConfig& cfg);

/// Live optimization variables of one run.
struct SageState {
    Tensor gate;    // G, H_t x W_t latent gate
    Tensor delta;   // C x H_t x W_t perturbation
    AdamState adam_gate;
    AdamState adam_delta;
    int step = 0;
};

/// Zero-initialized state for an image of the given dimensions.
SageState make_sage_state(std::size_t channels, std::size_t height, std::size_t width,
                          const SageConfig& cfg);

/// Linear schedule in alpha; T(step) = 1 / alpha(step). step is 1-based and
/// must lie in [1, steps]; steps == 1 pins alpha at alpha_end.
double anneal(int step, const SageConfig& cfg);

/// m = sigmoid(G / T), elementwise in (0,1). T must be positive.
Tensor soft_mask(const Tensor& gate, double temperature);

/// x_adv = clamp(x + U(m) (*) U(delta), 0, 1) with nearest-neighbor
/// upsampling U from the token grid to pixel space.
Tensor synthesize_adversarial(const Tensor& x, const Tensor& mask, const Tensor& delta,
                              std::size_t token_size);

/// L = -(lambda_ce*CE + lambda_dice*Dice) + mu*|m|_1 + beta*|delta|_1.
Tensor sage_loss(const OracleNet& oracle, const Tensor& x_adv, const Tensor& y,
                 const Tensor& mask, const Tensor& delta, const SageConfig& cfg);

/// One anneal -> mask -> synthesize -> loss -> backward -> Adam cycle, then
/// the budget clip of delta to [-epsilon, epsilon].
void sage_step(SageState& state, const OracleNet& oracle, const Tensor& x, const Tensor& y,
               const SageConfig& cfg);

/// Full run from a zero-initialized state; returns W = sigmoid(G * alpha_end).
ImportanceMap run_sage(const OracleNet& oracle, const Tensor& x, const Tensor& y,
                       const SageConfig& cfg, const std::string& image_id = "");

/// Independent ground truth for small instances: per token, the worst hard
/// Dice drop over all constant-sign channel shifts of +-epsilon, min-max
/// normalized to [0,1] (all zeros when flat). Guarded to <= 16x16 tokens.
ImportanceMap brute_force_importance(const OracleNet& oracle, const Tensor& x, const Tensor& y,
                                     double epsilon, std::size_t token_size);

}  // namespace sagekeep
