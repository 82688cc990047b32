#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sagekeep/errors.hpp"

namespace sagekeep {

class Tape;
class Gradients;

/// Dense row-major rank-1..4 tensor of 64-bit floats. Value semantics;
/// construction validates finiteness. A tensor is "tracked" when it was
/// produced on (or registered as a leaf of) a live Tape.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, double value);
    static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data);
    static Tensor scalar(double value);  // shape {1}

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }

    // Scalar accessor; throws unless size() == 1.
    double value() const;

    double at(std::size_t i, std::size_t j) const;
    double at(std::size_t c, std::size_t i, std::size_t j) const;

    bool tracked() const { return tape_ != nullptr && node_ >= 0; }
    Tape* tape() const { return tape_; }
    int node() const { return node_; }

    std::string shape_str() const;

  private:
    friend class Tape;
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
    Tape* tape_ = nullptr;
    int node_ = -1;
};

/// Result of a backward pass: per-node gradient buffers, addressable via the
/// tensors that produced them. Nodes never reached by the root get zeros.
class Gradients {
  public:
    Tensor wrt(const Tensor& t) const;

    // Internal accumulation surface used by op backward closures.
    std::vector<double>& buffer(int node);
    bool has(int node) const;

  private:
    friend Gradients backward(Tape& tape, const Tensor& root);
    Gradients(const Tape* tape, std::size_t num_nodes) : tape_(tape), buffers_(num_nodes) {}
    const Tape* tape_ = nullptr;
    std::vector<std::vector<double>> buffers_;
};

using BackwardFn = std::function<void(const std::vector<double>& upstream, Gradients& sink)>;

/// Per-computation reverse-mode tape. Append-only; node handles reference
/// only earlier entries, so a single reverse sweep visits each node once.
/// A tape belongs to one task and is discarded after backward.
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Register a tracked copy of `t` as a leaf (no inputs, no backward).
    Tensor leaf(const Tensor& t);

    int add_node(std::size_t numel, std::vector<int> inputs, BackwardFn fn);
    std::size_t num_nodes() const { return nodes_.size(); }
    std::size_t numel_of(int node) const { return nodes_[static_cast<std::size_t>(node)].numel; }

    void attach(Tensor& t, int node) {
        t.tape_ = this;
        t.node_ = node;
    }

  private:
    friend Gradients backward(Tape& tape, const Tensor& root);
    struct Node {
        std::size_t numel;
        std::vector<int> inputs;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
};

/// Reverse accumulation from a tracked scalar `root` living on `tape`.
Gradients backward(Tape& tape, const Tensor& root);

// ---- elementwise and shape ops (tape-aware when any input is tracked) ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // Hadamard product
Tensor scalar_add(const Tensor& a, double s);
Tensor scalar_mul(const Tensor& a, double s);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor sum(const Tensor& a);      // scalar
Tensor l1_norm(const Tensor& a);  // scalar; backward uses sign with sign(0)=0

/// Nearest-neighbor upsampling of the trailing two axes by integer factors.
Tensor upsample_nearest(const Tensor& a, std::size_t factor_h, std::size_t factor_w);

/// Replicate an H x W grid across `channels` leading channels; backward sums.
Tensor repeat_channel(const Tensor& a, std::size_t channels);

/// Same-padded stride-1 cross-correlation. input CxHxW, weight OxCxkxk
/// (k odd), bias O -> output OxHxW. Gradients are produced only for
/// tracked inputs, so a frozen-weight forward costs no weight backward.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias);

struct SegLosses {
    Tensor ce;         // mean per-pixel softmax cross-entropy
    Tensor soft_dice;  // 1 - mean over classes of smoothed overlap ratio
};

/// logits KxHxW, labels HxW with integer class ids in [0, K).
SegLosses seg_losses(const Tensor& logits, const Tensor& labels, double smooth = 1.0);

/// Pixel-weighted cross-entropy, (1/HW) * sum_px w_px * ce_px. Training-side
/// plumbing for mixing augmentations where core pixels keep full weight.
Tensor weighted_ce(const Tensor& logits, const Tensor& labels, const Tensor& pixel_weights);

// ---- optimizer ----

struct AdamState {
    Tensor m, v;
    long t = 0;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled; attack variables keep 0

    AdamState() = default;
    AdamState(const std::vector<std::size_t>& shape, double learning_rate);
};

/// Bias-corrected Adam update in place; increments state.t.
void adam_step(Tensor& param, const Tensor& grad, AdamState& state);

// ---- helpers ----

bool all_finite(const Tensor& t);
void require_finite(const Tensor& t, const std::string& what);

}  // namespace sagekeep
