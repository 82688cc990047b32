#include "sagekeep/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>
#include <utility>

namespace sagekeep {

namespace {

std::size_t numel_of_shape(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

void validate_shape(const std::vector<std::size_t>& shape) {
    if (shape.empty() || shape.size() > 4)
        throw DataError("tensor rank must be 1..4, got " + std::to_string(shape.size()));
    for (std::size_t d : shape)
        if (d == 0) throw DataError("tensor extents must be positive");
}

std::string shape_to_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DataError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                        b.shape_str());
}

// Tape shared by the tracked inputs, or nullptr when all inputs are plain data.
Tape* common_tape(const char* op, std::initializer_list<const Tensor*> inputs) {
    Tape* tape = nullptr;
    for (const Tensor* t : inputs) {
        if (!t->tracked()) continue;
        if (tape && tape != t->tape())
            throw DataError(std::string(op) + ": inputs belong to different tapes");
        tape = t->tape();
    }
    return tape;
}

int node_on(const Tensor& t, Tape* tape) {
    return (t.tracked() && t.tape() == tape) ? t.node() : -1;
}

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

// ---- Tensor ----

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    validate_shape(shape);
    Tensor t;
    t.data_.assign(numel_of_shape(shape), 0.0);
    t.shape_ = std::move(shape);
    return t;
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
    validate_shape(shape);
    if (!std::isfinite(value)) throw NumericError("Tensor::full: non-finite fill value");
    Tensor t;
    t.data_.assign(numel_of_shape(shape), value);
    t.shape_ = std::move(shape);
    return t;
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> data) {
    validate_shape(shape);
    if (data.size() != numel_of_shape(shape))
        throw DataError("Tensor::from_data: " + std::to_string(data.size()) +
                        " values for shape " + shape_to_str(shape));
    for (std::size_t i = 0; i < data.size(); ++i)
        if (!std::isfinite(data[i]))
            throw NumericError("Tensor::from_data: non-finite value at index " +
                               std::to_string(i));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
}

Tensor Tensor::scalar(double value) { return full({1}, value); }

double Tensor::value() const {
    if (size() != 1) throw DataError("Tensor::value: tensor " + shape_str() + " is not scalar");
    return data_[0];
}

double Tensor::at(std::size_t i, std::size_t j) const {
    return data_[i * shape_.back() + j];
}

double Tensor::at(std::size_t c, std::size_t i, std::size_t j) const {
    const std::size_t h = shape_[shape_.size() - 2];
    const std::size_t w = shape_.back();
    return data_[(c * h + i) * w + j];
}

std::string Tensor::shape_str() const { return shape_to_str(shape_); }

bool all_finite(const Tensor& t) {
    for (double v : t.values())
        if (!std::isfinite(v)) return false;
    return true;
}

void require_finite(const Tensor& t, const std::string& what) {
    if (!all_finite(t)) throw NumericError(what + ": non-finite values");
}

// ---- Tape / Gradients ----

Tensor Tape::leaf(const Tensor& t) {
    Tensor out = t;
    out.tape_ = this;
    out.node_ = add_node(t.size(), {}, BackwardFn{});
    return out;
}

int Tape::add_node(std::size_t numel, std::vector<int> inputs, BackwardFn fn) {
    const int id = static_cast<int>(nodes_.size());
    for (int in : inputs)
        if (in >= id) throw DataError("tape: node input must precede the node");
    nodes_.push_back(Node{numel, std::move(inputs), std::move(fn)});
    return id;
}

std::vector<double>& Gradients::buffer(int node) {
    auto& buf = buffers_[static_cast<std::size_t>(node)];
    return buf;
}

bool Gradients::has(int node) const {
    return !buffers_[static_cast<std::size_t>(node)].empty();
}

Tensor Gradients::wrt(const Tensor& t) const {
    if (!t.tracked() || t.tape() != tape_)
        throw DataError("Gradients::wrt: tensor is not tracked on this tape");
    const auto& buf = buffers_[static_cast<std::size_t>(t.node())];
    if (buf.empty()) return Tensor::zeros(t.shape());  // disconnected from the root
    return Tensor::from_data(t.shape(), buf);
}

Gradients backward(Tape& tape, const Tensor& root) {
    if (!root.tracked() || root.tape() != &tape)
        throw DataError("backward: root is not a tracked tensor on this tape");
    if (root.size() != 1) throw DataError("backward: root must be scalar");

    Gradients grads(&tape, tape.num_nodes());
    grads.buffer(root.node()).assign(1, 1.0);

    for (int id = root.node(); id >= 0; --id) {
        const auto& node = tape.nodes_[static_cast<std::size_t>(id)];
        if (!grads.has(id) || !node.backward) continue;
        node.backward(grads.buffer(id), grads);
    }
    return grads;
}

namespace {

// Ensure a gradient buffer exists with the node's element count before
// closures accumulate into it.
std::vector<double>& sink_buffer(Gradients& sink, Tape* tape, int node) {
    auto& buf = sink.buffer(node);
    if (buf.empty()) buf.assign(tape->numel_of(node), 0.0);
    return buf;
}

}  // namespace

// ---- elementwise ----

namespace {

template <class Fwd, class MakeBackward>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, MakeBackward make_backward) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = fwd(a[i]);
    Tensor result = Tensor::from_data(a.shape(), std::move(out));
    Tape* tape = common_tape(name, {&a});
    if (!tape) return result;
    const int ia = a.node();
    tape->attach(result, tape->add_node(result.size(), {ia}, make_backward(tape, ia, result)));
    return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    Tensor result = Tensor::from_data(a.shape(), std::move(out));
    Tape* tape = common_tape("add", {&a, &b});
    if (!tape) return result;
    const int ia = node_on(a, tape), ib = node_on(b, tape);
    tape->attach(result, tape->add_node(
        result.size(), {ia, ib},
        [ia, ib, tape](const std::vector<double>& up, Gradients& sink) {
            if (ia >= 0) {
                auto& g = sink_buffer(sink, tape, ia);
                for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i];
            }
            if (ib >= 0) {
                auto& g = sink_buffer(sink, tape, ib);
                for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i];
            }
        }));
    return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    Tensor result = Tensor::from_data(a.shape(), std::move(out));
    Tape* tape = common_tape("sub", {&a, &b});
    if (!tape) return result;
    const int ia = node_on(a, tape), ib = node_on(b, tape);
    tape->attach(result, tape->add_node(
        result.size(), {ia, ib},
        [ia, ib, tape](const std::vector<double>& up, Gradients& sink) {
            if (ia >= 0) {
                auto& g = sink_buffer(sink, tape, ia);
                for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i];
            }
            if (ib >= 0) {
                auto& g = sink_buffer(sink, tape, ib);
                for (std::size_t i = 0; i < up.size(); ++i) g[i] -= up[i];
            }
        }));
    return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    Tensor result = Tensor::from_data(a.shape(), std::move(out));
    Tape* tape = common_tape("mul", {&a, &b});
    if (!tape) return result;
    const int ia = node_on(a, tape), ib = node_on(b, tape);
    std::vector<double> av, bv;
    if (ib >= 0) av = a.values();
    if (ia >= 0) bv = b.values();
    tape->attach(result, tape->add_node(
        result.size(), {ia, ib},
        [ia, ib, tape, av = std::move(av), bv = std::move(bv)](const std::vector<double>& up,
                                                               Gradients& sink) {
            if (ia >= 0) {
                auto& g = sink_buffer(sink, tape, ia);
                for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i] * bv[i];
            }
            if (ib >= 0) {
                auto& g = sink_buffer(sink, tape, ib);
                for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i] * av[i];
            }
        }));
    return result;
}

Tensor scalar_add(const Tensor& a, double s) {
    if (!std::isfinite(s)) throw NumericError("scalar_add: non-finite scalar");
    return unary_op("scalar_add", a, [s](double x) { return x + s; },
                    [](Tape* tape, int ia, const Tensor&) -> BackwardFn {
                        return [ia, tape](const std::vector<double>& up, Gradients& sink) {
                            auto& g = sink_buffer(sink, tape, ia);
                            for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i];
                        };
                    });
}

Tensor scalar_mul(const Tensor& a, double s) {
    if (!std::isfinite(s)) throw NumericError("scalar_mul: non-finite scalar");
    return unary_op("scalar_mul", a, [s](double x) { return x * s; },
                    [s](Tape* tape, int ia, const Tensor&) -> BackwardFn {
                        return [ia, s, tape](const std::vector<double>& up, Gradients& sink) {
                            auto& g = sink_buffer(sink, tape, ia);
                            for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i] * s;
                        };
                    });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op("sigmoid", a, stable_sigmoid,
                    [](Tape* tape, int ia, const Tensor& out) -> BackwardFn {
                        std::vector<double> y = out.values();
                        return [ia, tape, y = std::move(y)](const std::vector<double>& up,
                                                            Gradients& sink) {
                            auto& g = sink_buffer(sink, tape, ia);
                            for (std::size_t i = 0; i < up.size(); ++i)
                                g[i] += up[i] * y[i] * (1.0 - y[i]);
                        };
                    });
}

Tensor relu(const Tensor& a) {
    return unary_op("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
                    [&a](Tape* tape, int ia, const Tensor&) -> BackwardFn {
                        std::vector<double> in = a.values();
                        return [ia, tape, in = std::move(in)](const std::vector<double>& up,
                                                              Gradients& sink) {
                            auto& g = sink_buffer(sink, tape, ia);
                            for (std::size_t i = 0; i < up.size(); ++i)
                                if (in[i] > 0.0) g[i] += up[i];
                        };
                    });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    if (!(lo < hi))
        throw DataError("clamp: lo must be < hi, got [" + std::to_string(lo) + ", " +
                        std::to_string(hi) + "]");
    // Subgradient 1 strictly inside (lo, hi), 0 at and beyond the bounds.
    return unary_op("clamp", a,
                    [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
                    [&a, lo, hi](Tape* tape, int ia, const Tensor&) -> BackwardFn {
                        std::vector<double> in = a.values();
                        return [ia, tape, lo, hi, in = std::move(in)](
                                   const std::vector<double>& up, Gradients& sink) {
                            auto& g = sink_buffer(sink, tape, ia);
                            for (std::size_t i = 0; i < up.size(); ++i)
                                if (in[i] > lo && in[i] < hi) g[i] += up[i];
                        };
                    });
}

Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.values()) total += v;
    Tensor result = Tensor::scalar(total);
    Tape* tape = common_tape("sum", {&a});
    if (!tape) return result;
    const int ia = a.node();
    const std::size_t n = a.size();
    tape->attach(result, tape->add_node(1, {ia},
        [ia, tape, n](const std::vector<double>& up, Gradients& sink) {
            auto& g = sink_buffer(sink, tape, ia);
            for (std::size_t i = 0; i < n; ++i) g[i] += up[0];
        }));
    return result;
}

Tensor l1_norm(const Tensor& a) {
    double total = 0.0;
    for (double v : a.values()) total += std::abs(v);
    Tensor result = Tensor::scalar(total);
    Tape* tape = common_tape("l1_norm", {&a});
    if (!tape) return result;
    const int ia = a.node();
    std::vector<double> in = a.values();
    tape->attach(result, tape->add_node(1, {ia},
        [ia, tape, in = std::move(in)](const std::vector<double>& up, Gradients& sink) {
            auto& g = sink_buffer(sink, tape, ia);
            for (std::size_t i = 0; i < in.size(); ++i) {
                // sign(0) = 0 so exactly-zero entries are never pushed
                if (in[i] > 0.0)
                    g[i] += up[0];
                else if (in[i] < 0.0)
                    g[i] -= up[0];
            }
        }));
    return result;
}

// ---- shape ops ----

Tensor upsample_nearest(const Tensor& a, std::size_t factor_h, std::size_t factor_w) {
    if (factor_h < 1 || factor_w < 1) throw DataError("upsample_nearest: factors must be >= 1");
    if (a.rank() < 2) throw DataError("upsample_nearest: need trailing HxW axes");
    const std::size_t h = a.shape()[a.rank() - 2];
    const std::size_t w = a.shape()[a.rank() - 1];
    std::size_t batch = 1;
    for (std::size_t i = 0; i + 2 < a.rank(); ++i) batch *= a.shape()[i];

    std::vector<std::size_t> out_shape = a.shape();
    out_shape[a.rank() - 2] = h * factor_h;
    out_shape[a.rank() - 1] = w * factor_w;
    const std::size_t oh = h * factor_h, ow = w * factor_w;

    std::vector<double> out(batch * oh * ow);
    for (std::size_t b = 0; b < batch; ++b) {
        const double* src = a.data() + b * h * w;
        double* dst = out.data() + b * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
            const double* srow = src + (y / factor_h) * w;
            double* drow = dst + y * ow;
            for (std::size_t x = 0; x < ow; ++x) drow[x] = srow[x / factor_w];
        }
    }
    Tensor result = Tensor::from_data(std::move(out_shape), std::move(out));
    Tape* tape = common_tape("upsample_nearest", {&a});
    if (!tape) return result;
    const int ia = a.node();
    tape->attach(result, tape->add_node(
        result.size(), {ia},
        [ia, tape, batch, h, w, factor_h, factor_w, oh, ow](const std::vector<double>& up,
                                                            Gradients& sink) {
            auto& g = sink_buffer(sink, tape, ia);
            for (std::size_t b = 0; b < batch; ++b) {
                const double* urow = up.data() + b * oh * ow;
                double* grow = g.data() + b * h * w;
                for (std::size_t y = 0; y < oh; ++y)
                    for (std::size_t x = 0; x < ow; ++x)
                        grow[(y / factor_h) * w + x / factor_w] += urow[y * ow + x];
            }
        }));
    return result;
}

Tensor repeat_channel(const Tensor& a, std::size_t channels) {
    if (a.rank() != 2) throw DataError("repeat_channel: expected HxW grid, got " + a.shape_str());
    if (channels < 1) throw DataError("repeat_channel: channels must be >= 1");
    const std::size_t hw = a.size();
    std::vector<double> out(channels * hw);
    for (std::size_t c = 0; c < channels; ++c)
        std::copy(a.data(), a.data() + hw, out.data() + c * hw);
    Tensor result =
        Tensor::from_data({channels, a.shape()[0], a.shape()[1]}, std::move(out));
    Tape* tape = common_tape("repeat_channel", {&a});
    if (!tape) return result;
    const int ia = a.node();
    tape->attach(result, tape->add_node(
        result.size(), {ia},
        [ia, tape, channels, hw](const std::vector<double>& up, Gradients& sink) {
            auto& g = sink_buffer(sink, tape, ia);
            for (std::size_t c = 0; c < channels; ++c)
                for (std::size_t i = 0; i < hw; ++i) g[i] += up[c * hw + i];
        }));
    return result;
}

// ---- convolution ----

namespace {

// Inner loops run over the valid row span for each kernel offset so the
// zero-padding border needs no per-pixel branch.
void conv2d_forward(const double* in, const double* w, const double* bias, double* out,
                    long C, long H, long W, long O, long k) {
    const long pad = k / 2;
    for (long o = 0; o < O; ++o) {
        double* out_c = out + o * H * W;
        std::fill(out_c, out_c + H * W, bias[o]);
        for (long c = 0; c < C; ++c) {
            const double* in_c = in + c * H * W;
            const double* w_oc = w + (o * C + c) * k * k;
            for (long ky = 0; ky < k; ++ky) {
                const long dy = ky - pad;
                const long y0 = std::max(0l, -dy), y1 = std::min(H, H - dy);
                for (long kx = 0; kx < k; ++kx) {
                    const long dx = kx - pad;
                    const long x0 = std::max(0l, -dx), x1 = std::min(W, W - dx);
                    const double wv = w_oc[ky * k + kx];
                    if (wv == 0.0) continue;
                    for (long y = y0; y < y1; ++y) {
                        double* orow = out_c + y * W;
                        const double* irow = in_c + (y + dy) * W + dx;
                        for (long x = x0; x < x1; ++x) orow[x] += wv * irow[x];
                    }
                }
            }
        }
    }
}

void conv2d_backward_input(const double* up, const double* w, double* gin, long C, long H,
                           long W, long O, long k) {
    const long pad = k / 2;
    for (long o = 0; o < O; ++o) {
        const double* up_c = up + o * H * W;
        for (long c = 0; c < C; ++c) {
            double* gin_c = gin + c * H * W;
            const double* w_oc = w + (o * C + c) * k * k;
            for (long ky = 0; ky < k; ++ky) {
                const long dy = ky - pad;
                const long y0 = std::max(0l, -dy), y1 = std::min(H, H - dy);
                for (long kx = 0; kx < k; ++kx) {
                    const long dx = kx - pad;
                    const long x0 = std::max(0l, -dx), x1 = std::min(W, W - dx);
                    const double wv = w_oc[ky * k + kx];
                    if (wv == 0.0) continue;
                    for (long y = y0; y < y1; ++y) {
                        const double* urow = up_c + y * W;
                        double* grow = gin_c + (y + dy) * W + dx;
                        for (long x = x0; x < x1; ++x) grow[x] += wv * urow[x];
                    }
                }
            }
        }
    }
}

void conv2d_backward_weight(const double* up, const double* in, double* gw, long C, long H,
                            long W, long O, long k) {
    const long pad = k / 2;
    for (long o = 0; o < O; ++o) {
        const double* up_c = up + o * H * W;
        for (long c = 0; c < C; ++c) {
            const double* in_c = in + c * H * W;
            double* gw_oc = gw + (o * C + c) * k * k;
            for (long ky = 0; ky < k; ++ky) {
                const long dy = ky - pad;
                const long y0 = std::max(0l, -dy), y1 = std::min(H, H - dy);
                for (long kx = 0; kx < k; ++kx) {
                    const long dx = kx - pad;
                    const long x0 = std::max(0l, -dx), x1 = std::min(W, W - dx);
                    double acc = 0.0;
                    for (long y = y0; y < y1; ++y) {
                        const double* urow = up_c + y * W;
                        const double* irow = in_c + (y + dy) * W + dx;
                        for (long x = x0; x < x1; ++x) acc += urow[x] * irow[x];
                    }
                    gw_oc[ky * k + kx] += acc;
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    if (input.rank() != 3)
        throw DataError("conv2d: input must be CxHxW, got " + input.shape_str());
    if (weight.rank() != 4)
        throw DataError("conv2d: weight must be OxCxkxk, got " + weight.shape_str());
    if (bias.rank() != 1)
        throw DataError("conv2d: bias must be rank 1, got " + bias.shape_str());
    const std::size_t C = input.shape()[0], H = input.shape()[1], W = input.shape()[2];
    const std::size_t O = weight.shape()[0], k = weight.shape()[2];
    if (weight.shape()[1] != C)
        throw DataError("conv2d: channel mismatch, input has " + std::to_string(C) +
                        " channels, weight expects " + std::to_string(weight.shape()[1]));
    if (weight.shape()[3] != k) throw DataError("conv2d: kernel must be square");
    if (k % 2 == 0) throw DataError("conv2d: kernel size must be odd, got " + std::to_string(k));
    if (bias.shape()[0] != O)
        throw DataError("conv2d: bias size " + std::to_string(bias.shape()[0]) +
                        " != out channels " + std::to_string(O));

    std::vector<double> out(O * H * W);
    conv2d_forward(input.data(), weight.data(), bias.data(), out.data(),
                   static_cast<long>(C), static_cast<long>(H), static_cast<long>(W),
                   static_cast<long>(O), static_cast<long>(k));
    Tensor result = Tensor::from_data({O, H, W}, std::move(out));

    Tape* tape = common_tape("conv2d", {&input, &weight, &bias});
    if (!tape) return result;
    const int ii = node_on(input, tape), iw = node_on(weight, tape), ib = node_on(bias, tape);
    // Save only what the tracked paths need.
    std::vector<double> in_vals, w_vals;
    if (iw >= 0) in_vals = input.values();
    if (ii >= 0) w_vals = weight.values();
    tape->attach(result, tape->add_node(
        result.size(), {ii, iw, ib},
        [ii, iw, ib, tape, C, H, W, O, k, in_vals = std::move(in_vals),
         w_vals = std::move(w_vals)](const std::vector<double>& up, Gradients& sink) {
            const long lC = static_cast<long>(C), lH = static_cast<long>(H),
                       lW = static_cast<long>(W), lO = static_cast<long>(O),
                       lk = static_cast<long>(k);
            if (ii >= 0) {
                auto& g = sink_buffer(sink, tape, ii);
                conv2d_backward_input(up.data(), w_vals.data(), g.data(), lC, lH, lW, lO, lk);
            }
            if (iw >= 0) {
                auto& g = sink_buffer(sink, tape, iw);
                conv2d_backward_weight(up.data(), in_vals.data(), g.data(), lC, lH, lW, lO, lk);
            }
            if (ib >= 0) {
                auto& g = sink_buffer(sink, tape, ib);
                for (std::size_t o = 0; o < O; ++o) {
                    double acc = 0.0;
                    const double* up_c = up.data() + o * H * W;
                    for (std::size_t i = 0; i < H * W; ++i) acc += up_c[i];
                    g[o] += acc;
                }
            }
        }));
    return result;
}

// ---- segmentation losses ----

namespace {

struct SoftmaxStats {
    std::vector<double> probs;      // K x H x W
    std::vector<std::size_t> gt;    // H x W class ids
    std::size_t K, HW;
};

std::shared_ptr<SoftmaxStats> softmax_and_labels(const Tensor& logits, const Tensor& labels) {
    if (logits.rank() != 3)
        throw DataError("seg_losses: logits must be KxHxW, got " + logits.shape_str());
    if (labels.rank() != 2)
        throw DataError("seg_losses: labels must be HxW, got " + labels.shape_str());
    const std::size_t K = logits.shape()[0];
    const std::size_t H = logits.shape()[1], W = logits.shape()[2];
    if (labels.shape()[0] != H || labels.shape()[1] != W)
        throw DataError("seg_losses: label grid " + labels.shape_str() +
                        " does not match logits " + logits.shape_str());
    auto stats = std::make_shared<SoftmaxStats>();
    stats->K = K;
    stats->HW = H * W;
    stats->probs.resize(K * H * W);
    stats->gt.resize(H * W);
    for (std::size_t px = 0; px < H * W; ++px) {
        const double raw = labels[px];
        const double rounded = std::nearbyint(raw);
        if (std::abs(raw - rounded) > 1e-9 || rounded < 0.0 ||
            rounded >= static_cast<double>(K))
            throw DataError("seg_losses: label " + std::to_string(raw) + " at pixel " +
                            std::to_string(px) + " outside [0, " + std::to_string(K) + ")");
        stats->gt[px] = static_cast<std::size_t>(rounded);
        double mx = logits[px];
        for (std::size_t c = 1; c < K; ++c) mx = std::max(mx, logits[c * H * W + px]);
        double denom = 0.0;
        for (std::size_t c = 0; c < K; ++c) {
            const double e = std::exp(logits[c * H * W + px] - mx);
            stats->probs[c * H * W + px] = e;
            denom += e;
        }
        for (std::size_t c = 0; c < K; ++c) stats->probs[c * H * W + px] /= denom;
    }
    return stats;
}

// d(loss)/d(logit) for a per-probability gradient dp, chained through softmax.
void softmax_chain(const SoftmaxStats& s, const std::vector<double>& dp, double scale,
                   std::vector<double>& dz) {
    const std::size_t K = s.K, HW = s.HW;
    for (std::size_t px = 0; px < HW; ++px) {
        double dot = 0.0;
        for (std::size_t c = 0; c < K; ++c) dot += dp[c * HW + px] * s.probs[c * HW + px];
        for (std::size_t c = 0; c < K; ++c)
            dz[c * HW + px] +=
                scale * s.probs[c * HW + px] * (dp[c * HW + px] - dot);
    }
}

}  // namespace

SegLosses seg_losses(const Tensor& logits, const Tensor& labels, double smooth) {
    auto stats = softmax_and_labels(logits, labels);
    const std::size_t K = stats->K, HW = stats->HW;

    // Cross-entropy
    double ce_sum = 0.0;
    for (std::size_t px = 0; px < HW; ++px) {
        const double p = stats->probs[stats->gt[px] * HW + px];
        ce_sum += -std::log(std::max(p, 1e-300));
    }
    const double ce_val = ce_sum / static_cast<double>(HW);

    // Soft Dice over softmax probabilities vs one-hot labels
    std::vector<double> inter(K, 0.0), psum(K, 0.0), gsum(K, 0.0);
    for (std::size_t c = 0; c < K; ++c) {
        const double* pc = stats->probs.data() + c * HW;
        for (std::size_t px = 0; px < HW; ++px) {
            psum[c] += pc[px];
            if (stats->gt[px] == c) {
                inter[c] += pc[px];
                gsum[c] += 1.0;
            }
        }
    }
    double dice_mean = 0.0;
    for (std::size_t c = 0; c < K; ++c)
        dice_mean += (2.0 * inter[c] + smooth) / (psum[c] + gsum[c] + smooth);
    const double dice_val = 1.0 - dice_mean / static_cast<double>(K);

    SegLosses out{Tensor::scalar(ce_val), Tensor::scalar(dice_val)};
    Tape* tape = common_tape("seg_losses", {&logits});
    if (!tape) return out;
    const int il = logits.node();

    tape->attach(out.ce, tape->add_node(1, {il},
        [il, tape, stats](const std::vector<double>& up, Gradients& sink) {
            auto& g = sink_buffer(sink, tape, il);
            const std::size_t K = stats->K, HW = stats->HW;
            const double scale = up[0] / static_cast<double>(HW);
            for (std::size_t c = 0; c < K; ++c) {
                const double* pc = stats->probs.data() + c * HW;
                double* gc = g.data() + c * HW;
                for (std::size_t px = 0; px < HW; ++px)
                    gc[px] += scale * (pc[px] - (stats->gt[px] == c ? 1.0 : 0.0));
            }
        }));

    std::vector<double> numer(K), denom(K);
    for (std::size_t c = 0; c < K; ++c) {
        numer[c] = 2.0 * inter[c] + smooth;
        denom[c] = psum[c] + gsum[c] + smooth;
    }
    tape->attach(out.soft_dice, tape->add_node(1, {il},
        [il, tape, stats, numer = std::move(numer), denom = std::move(denom)](
            const std::vector<double>& up, Gradients& sink) {
            auto& g = sink_buffer(sink, tape, il);
            const std::size_t K = stats->K, HW = stats->HW;
            std::vector<double> dp(K * HW);
            const double kinv = 1.0 / static_cast<double>(K);
            for (std::size_t c = 0; c < K; ++c) {
                const double d2 = denom[c] * denom[c];
                for (std::size_t px = 0; px < HW; ++px) {
                    const double gk = stats->gt[px] == c ? 1.0 : 0.0;
                    dp[c * HW + px] = -kinv * (2.0 * gk * denom[c] - numer[c]) / d2;
                }
            }
            softmax_chain(*stats, dp, up[0], g);
        }));
    return out;
}

Tensor weighted_ce(const Tensor& logits, const Tensor& labels, const Tensor& pixel_weights) {
    auto stats = softmax_and_labels(logits, labels);
    const std::size_t HW = stats->HW;
    if (pixel_weights.size() != HW)
        throw DataError("weighted_ce: weight grid " + pixel_weights.shape_str() +
                        " does not match labels " + labels.shape_str());
    double ce_sum = 0.0;
    for (std::size_t px = 0; px < HW; ++px) {
        const double p = stats->probs[stats->gt[px] * HW + px];
        ce_sum += -pixel_weights[px] * std::log(std::max(p, 1e-300));
    }
    Tensor result = Tensor::scalar(ce_sum / static_cast<double>(HW));
    Tape* tape = common_tape("weighted_ce", {&logits});
    if (!tape) return result;
    const int il = logits.node();
    std::vector<double> wv = pixel_weights.values();
    tape->attach(result, tape->add_node(1, {il},
        [il, tape, stats, wv = std::move(wv)](const std::vector<double>& up, Gradients& sink) {
            auto& g = sink_buffer(sink, tape, il);
            const std::size_t K = stats->K, HW = stats->HW;
            const double scale = up[0] / static_cast<double>(HW);
            for (std::size_t c = 0; c < K; ++c) {
                const double* pc = stats->probs.data() + c * HW;
                double* gc = g.data() + c * HW;
                for (std::size_t px = 0; px < HW; ++px)
                    gc[px] += scale * wv[px] * (pc[px] - (stats->gt[px] == c ? 1.0 : 0.0));
            }
        }));
    return result;
}

// ---- Adam ----

AdamState::AdamState(const std::vector<std::size_t>& shape, double learning_rate)
    : m(Tensor::zeros(shape)), v(Tensor::zeros(shape)), lr(learning_rate) {}

void adam_step(Tensor& param, const Tensor& grad, AdamState& state) {
    if (param.shape() != grad.shape())
        throw DataError("adam_step: param " + param.shape_str() + " vs grad " + grad.shape_str());
    if (state.m.size() == 0) {
        state.m = Tensor::zeros(param.shape());
        state.v = Tensor::zeros(param.shape());
    }
    if (state.m.shape() != param.shape())
        throw DataError("adam_step: state shape " + state.m.shape_str() + " vs param " +
                        param.shape_str());
    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        const double mh = state.m[i] / bc1;
        const double vh = state.v[i] / bc2;
        param[i] -= state.lr * (mh / (std::sqrt(vh) + state.eps) + state.weight_decay * param[i]);
    }
    require_finite(param, "adam_step");
}

}  // namespace sagekeep
