#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sagekeep/tensor.hpp"

namespace sagekeep {

enum class Activation { Relu, None };

struct LayerSpec {
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 3;
    Activation activation = Activation::Relu;
};

struct ConvParams {
    Tensor weight;  // out x in x k x k
    Tensor bias;    // out
};

/// Frozen segmentation network f(.): a plain stack of same-padded conv
/// layers. Channel counts must chain and the last layer emits one logit
/// plane per class.
struct OracleNet {
    std::string id;
    std::vector<LayerSpec> layers;
    std::vector<ConvParams> params;
    std::size_t num_classes = 2;
    bool frozen = true;
};

/// Validates channel chaining, final out-channels == num_classes, and
/// parameter shapes against the layer specs.
void validate_oracle(const OracleNet& net);

/// Default 4-layer architecture C -> hidden -> hidden -> hidden -> K, 3x3
/// kernels, ReLU between. Weights ~ N(0, sqrt(2/fan_in)), zero bias.
OracleNet make_oracle(const std::string& id, std::size_t in_channels, std::size_t num_classes,
                      std::uint64_t init_seed, std::size_t hidden = 16, std::size_t depth = 4,
                      std::size_t kernel = 3);

/// The two stock variants used for cross-oracle map comparisons.
OracleNet make_default_oracle(char variant, std::size_t in_channels = 1,
                              std::size_t num_classes = 2);

/// Forward pass over the stored (frozen) parameters. If x is tape-tracked
/// the graph reaches back to x only; weights stay constants.
Tensor forward(const OracleNet& net, const Tensor& x);

/// Forward with caller-supplied parameters (e.g. tape leaves during
/// training). Layer specs still come from `net`.
Tensor forward_with_params(const OracleNet& net, const std::vector<ConvParams>& params,
                           const Tensor& x);

struct InputGradient {
    double loss = 0.0;
    Tensor grad_x;
};

/// loss = lambda_ce * CE(f(x), y) + lambda_dice * Dice(f(x), y) and its
/// gradient with respect to x. Requires a frozen net; weights are untouched.
InputGradient input_gradient(const OracleNet& net, const Tensor& x, const Tensor& y,
                             double lambda_ce, double lambda_dice);

/// Weights file: u32 JSON descriptor length, JSON descriptor, then KCT1
/// blobs at the offsets the descriptor lists (relative to the blob area).
void save_weights(const OracleNet& net, const std::string& path);
OracleNet load_weights(const std::string& path);

/// FNV-1a over the raw weight bytes; used to assert freezing.
std::uint64_t weights_hash(const OracleNet& net);

}  // namespace sagekeep
