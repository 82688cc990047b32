#include "sagekeep/sage.hpp"

#include <algorithm>
#include <cmath>

#include "sagekeep/metrics.hpp"

namespace sagekeep {

void validate_sage_config(const SageConfig& cfg) {
    if (cfg.epsilon < 0.0) throw DataError("sage: epsilon must be >= 0");
    if (cfg.steps < 1) throw DataError("sage: steps must be >= 1");
    if (cfg.alpha_init <= 0.0 || cfg.alpha_end <= 0.0)
        throw DataError("sage: alpha endpoints must be positive");
    if (cfg.alpha_end < cfg.alpha_init)
        throw DataError("sage: alpha_end must be >= alpha_init (annealing sharpens the gate)");
    if (cfg.mu_sparse < 0.0 || cfg.beta_delta < 0.0 || cfg.lambda_ce < 0.0 ||
        cfg.lambda_dice < 0.0)
        throw DataError("sage: objective weights must be non-negative");
    if (cfg.lr <= 0.0) throw DataError("sage: lr must be positive");
    if (cfg.token_size < 1) throw DataError("sage: token_size must be >= 1");
}

SageState make_sage_state(std::size_t channels, std::size_t height, std::size_t width,
                          const SageConfig& cfg) {
    validate_sage_config(cfg);
    if (height % cfg.token_size != 0 || width % cfg.token_size != 0)
        throw DataError("sage: image " + std::to_string(height) + "x" + std::to_string(width) +
                        " not divisible by token_size " + std::to_string(cfg.token_size));
    const std::size_t ht = height / cfg.token_size, wt = width / cfg.token_size;
    SageState state;
    state.gate = Tensor::zeros({ht, wt});
    state.delta = Tensor::zeros({channels, ht, wt});
    state.adam_gate = AdamState(state.gate.shape(), cfg.lr);
    state.adam_delta = AdamState(state.delta.shape(), cfg.lr);
    return state;
}

double anneal(int step, const SageConfig& cfg) {
    if (step < 1 || step > cfg.steps)
        throw DataError("anneal: step " + std::to_string(step) + " outside [1, " +
                        std::to_string(cfg.steps) + "]");
    const double alpha =
        cfg.steps == 1 ? cfg.alpha_end
                       : cfg.alpha_init + (cfg.alpha_end - cfg.alpha_init) *
                                              static_cast<double>(step - 1) /
                                              static_cast<double>(cfg.steps - 1);
    return 1.0 / alpha;
}

Tensor soft_mask(const Tensor& gate, double temperature) {
    if (!(temperature > 0.0))
        throw DataError("soft_mask: temperature must be positive, got " +
                        std::to_string(temperature));
    return sigmoid(scalar_mul(gate, 1.0 / temperature));
}

Tensor synthesize_adversarial(const Tensor& x, const Tensor& mask, const Tensor& delta,
                              std::size_t token_size) {
    if (x.rank() != 3)
        throw DataError("synthesize_adversarial: x must be CxHxW, got " + x.shape_str());
    if (mask.rank() != 2)
        throw DataError("synthesize_adversarial: mask must be a token grid, got " +
                        mask.shape_str());
    const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    const std::size_t ht = mask.shape()[0], wt = mask.shape()[1];
    if (ht * token_size != H || wt * token_size != W)
        throw DataError("synthesize_adversarial: token grid " + mask.shape_str() + " x " +
                        std::to_string(token_size) + " does not tile image " + x.shape_str());
    if (delta.shape() != std::vector<std::size_t>{C, ht, wt})
        throw DataError("synthesize_adversarial: delta " + delta.shape_str() +
                        " must be CxH_txW_t for image " + x.shape_str());
    Tensor mask_c = repeat_channel(mask, C);
    Tensor up_mask = upsample_nearest(mask_c, token_size, token_size);
    Tensor up_delta = upsample_nearest(delta, token_size, token_size);
    return clamp(add(x, mul(up_mask, up_delta)), 0.0, 1.0);
}

Tensor sage_loss(const OracleNet& oracle, const Tensor& x_adv, const Tensor& y,
                 const Tensor& mask, const Tensor& delta, const SageConfig& cfg) {
    if (!oracle.frozen) throw DataError("sage_loss: oracle must be frozen");
    Tensor logits = forward(oracle, x_adv);
    SegLosses seg = seg_losses(logits, y);
    Tensor attack =
        add(scalar_mul(seg.ce, cfg.lambda_ce), scalar_mul(seg.soft_dice, cfg.lambda_dice));
    Tensor sparse =
        add(scalar_mul(l1_norm(mask), cfg.mu_sparse), scalar_mul(l1_norm(delta), cfg.beta_delta));
    return add(scalar_mul(attack, -1.0), sparse);
}

void sage_step(SageState& state, const OracleNet& oracle, const Tensor& x, const Tensor& y,
               const SageConfig& cfg) {
    validate_sage_config(cfg);
    if (state.step >= cfg.steps)
        throw DataError("sage_step: state already at step " + std::to_string(state.step) +
                        " of " + std::to_string(cfg.steps));
    const int step = state.step + 1;
    const double temperature = anneal(step, cfg);

    Tape tape;
    Tensor gate = tape.leaf(state.gate);
    Tensor delta = tape.leaf(state.delta);
    Tensor mask = soft_mask(gate, temperature);
    Tensor x_adv = synthesize_adversarial(x, mask, delta, cfg.token_size);
    Tensor loss = sage_loss(oracle, x_adv, y, mask, delta, cfg);
    Gradients grads = backward(tape, loss);

    adam_step(state.gate, grads.wrt(gate), state.adam_gate);
    adam_step(state.delta, grads.wrt(delta), state.adam_delta);
    for (std::size_t i = 0; i < state.delta.size(); ++i)
        state.delta[i] = std::clamp(state.delta[i], -cfg.epsilon, cfg.epsilon);
    state.step = step;
}

ImportanceMap run_sage(const OracleNet& oracle, const Tensor& x, const Tensor& y,
                       const SageConfig& cfg, const std::string& image_id) {
    validate_sage_config(cfg);
    validate_oracle(oracle);
    if (x.rank() != 3) throw DataError("run_sage: x must be CxHxW, got " + x.shape_str());
    SageState state = make_sage_state(x.shape()[0], x.shape()[1], x.shape()[2], cfg);
    for (int step = 0; step < cfg.steps; ++step) sage_step(state, oracle, x, y, cfg);

    ImportanceMap map;
    map.grid = sigmoid(scalar_mul(state.gate, cfg.alpha_end));  // sigma(G / T_end)
    map.token_size = cfg.token_size;
    map.source_image_id = image_id;
    map.oracle_id = oracle.id;
    validate_map(map);
    return map;
}

namespace {

// Mean hard Dice over all classes of argmax predictions, with the
// both-empty = 1 convention.
double mean_hard_dice(const OracleNet& oracle, const Tensor& x, const Tensor& y) {
    Tensor logits = forward(oracle, x);
    Tensor pred = argmax_labels(logits);
    double acc = 0.0;
    for (std::size_t k = 0; k < oracle.num_classes; ++k)
        acc += overlap_metrics(pred, y, k).dice;
    return acc / static_cast<double>(oracle.num_classes);
}

}  // namespace

ImportanceMap brute_force_importance(const OracleNet& oracle, const Tensor& x, const Tensor& y,
                                     double epsilon, std::size_t token_size) {
    validate_oracle(oracle);
    if (x.rank() != 3)
        throw DataError("brute_force_importance: x must be CxHxW, got " + x.shape_str());
    if (epsilon < 0.0) throw DataError("brute_force_importance: epsilon must be >= 0");
    const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    if (token_size < 1 || H % token_size != 0 || W % token_size != 0)
        throw DataError("brute_force_importance: token_size " + std::to_string(token_size) +
                        " does not tile " + x.shape_str());
    const std::size_t ht = H / token_size, wt = W / token_size;
    if (ht > 16 || wt > 16)
        throw DataError("brute_force_importance: instance too large (" + std::to_string(ht) +
                        "x" + std::to_string(wt) + " tokens, limit 16x16)");
    if (C > 8) throw DataError("brute_force_importance: too many channels for exhaustive signs");

    const double base = mean_hard_dice(oracle, x, y);
    std::vector<double> scores(ht * wt, 0.0);
    const std::size_t patterns = static_cast<std::size_t>(1) << C;

    for (std::size_t tr = 0; tr < ht; ++tr) {
        for (std::size_t tc = 0; tc < wt; ++tc) {
            double worst = base;
            for (std::size_t bits = 0; bits < patterns; ++bits) {
                Tensor shifted = x;
                for (std::size_t c = 0; c < C; ++c) {
                    const double shift = (bits >> c) & 1 ? epsilon : -epsilon;
                    for (std::size_t dy = 0; dy < token_size; ++dy) {
                        const std::size_t row = tr * token_size + dy;
                        double* px = shifted.data() + (c * H + row) * W + tc * token_size;
                        for (std::size_t dx = 0; dx < token_size; ++dx)
                            px[dx] = std::clamp(px[dx] + shift, 0.0, 1.0);
                    }
                }
                worst = std::min(worst, mean_hard_dice(oracle, shifted, y));
            }
            scores[tr * wt + tc] = base - worst;
        }
    }

    double lo = scores[0], hi = scores[0];
    for (double s : scores) {
        lo = std::min(lo, s);
        hi = std::max(hi, s);
    }
    if (hi - lo > 0.0) {
        for (double& s : scores) s = (s - lo) / (hi - lo);
    } else {
        std::fill(scores.begin(), scores.end(), 0.0);  // flat -> all zeros
    }

    ImportanceMap map;
    map.grid = Tensor::from_data({ht, wt}, std::move(scores));
    map.token_size = token_size;
    map.oracle_id = oracle.id;
    validate_map(map);
    return map;
}

}  // namespace sagekeep
