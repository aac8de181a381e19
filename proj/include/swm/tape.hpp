#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "swm/tensor.hpp"

namespace swm {

// Handle to a tracked value on a tape.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

struct Conv2dSpec {
    int in_c = 1, out_c = 1;
    int h = 16, w = 16;
    int k = 4;       // square kernel
    int stride = 2;
    int pad = 1;
    int out_h() const { return (h + 2 * pad - k) / stride + 1; }
    int out_w() const { return (w + 2 * pad - k) / stride + 1; }
};

// Reverse-mode tape over Tensors. Nodes are appended in topological order
// during the forward pass and replayed in reverse by backward(). Single-owner:
// a tape must not be shared between threads while recording.
class Tape {
public:
    // Test-only forward mode: spike() emits a sharp sigmoid instead of a step
    // so end-to-end finite differences are valid. Never used in training.
    bool smooth_spikes = false;
    double smooth_beta = 10.0;

    Var leaf(const Tensor& v);
    Var leaf(Tensor&& v);
    Var scalar(double v) { return leaf(Tensor::scalar(v)); }

    const Tensor& val(Var x) const { return nodes_[check(x)].value; }
    // Gradient of the last backward() target w.r.t. x. Zero tensor if x is
    // unreachable from the loss.
    const Tensor& grad(Var x);

    // ---- primitive ops ----
    Var matmul(Var a, Var b);                 // [m,k]*[k,n] -> [m,n]
    Var linear(Var x, Var w);                 // [B,i] * w[o,i]^T -> [B,o]
    Var add(Var a, Var b);                    // same shape, or b rank-1 broadcast over rows
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);                    // elementwise; b may be scalar or rank-1 over rows
    Var div(Var a, Var b);
    Var scale(Var a, double c) { return affine(a, c, 0.0); }
    Var affine(Var a, double k, double c);    // k*a + c
    Var concat(Var a, Var b);                 // along last dim; equal leading dims
    Var slice(Var a, std::size_t lo, std::size_t hi);  // along last dim
    Var reshape(Var a, Shape s);
    Var sigmoid(Var a);
    Var tanh(Var a);
    Var exp(Var a);
    Var log(Var a);
    Var softplus(Var a);
    Var softmax(Var a);                       // along last dim
    Var log_softmax(Var a);
    Var sum(Var a);                           // -> scalar
    Var mean(Var a);                          // -> scalar
    Var sum_last(Var a);                      // drop last dim
    Var clamp_min(Var a, double lo);
    Var detach(Var a);                        // stop-gradient
    Var conv2d(Var x, Var w, const Conv2dSpec& spec);    // x [B, in_c*h*w], w [out_c, in_c*k*k]
    Var conv2d_t(Var x, Var w, const Conv2dSpec& spec);  // transposed conv, spec of the matching conv2d

    // Heaviside spike with triangular surrogate backward. Spike iff u > v_th
    // strictly. In smooth_spikes mode forward is sigmoid(smooth_beta*(u-v_th))
    // and backward is its exact derivative.
    Var spike(Var u, double v_th, double alpha);

    // Reverse sweep from a scalar loss. Populates grads for every node that
    // reaches the loss; calling twice without reset_backward() is an error.
    void backward(Var loss);
    void reset_backward();

    std::size_t size() const { return nodes_.size(); }

private:
    enum class Op : std::uint8_t {
        Leaf, MatMul, Linear, Add, AddB, Sub, Mul, MulS, MulB, Div, Affine, Concat, Slice,
        Reshape, Sigmoid, Tanh, Exp, Log, Softplus, Softmax, LogSoftmax, Sum,
        Mean, SumLast, ClampMin, Detach, Conv2d, Conv2dT, SpikeHard, SpikeSmooth,
    };

    struct Node {
        Tensor value;
        Tensor grad;  // materialized lazily; empty means all-zero
        int a = -1, b = -1;
        Op op = Op::Leaf;
        double c0 = 0.0, c1 = 0.0;
        Conv2dSpec conv;
    };

    int check(Var x) const {
        if (!x.valid() || x.id >= static_cast<int>(nodes_.size()))
            throw ContractError("invalid Var handle");
        return x.id;
    }
    Var push(Node&& n) {
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }
    Tensor& grad_buf(int id);       // materializes zeros
    void backprop_node(int id);

    std::vector<Node> nodes_;
    bool swept_ = false;
};

// Triangular surrogate of the spike nonlinearity:
//   g'(x) = -alpha^2*|x| + alpha   for |x| <= 1/alpha, else 0.
// Continuous, peak alpha at 0, unit integral.
double surrogate_grad(double x, double alpha);

// Max over parameters of |analytic - central difference| / max(|a|,|n|,1e-8).
// f builds a scalar loss from leaves bound to `params` on a fresh tape.
double grad_check(const std::function<Var(Tape&, const std::vector<Var>&)>& f,
                  const std::vector<Tensor>& params, double eps = 1e-5,
                  bool smooth_spikes = false);

}  // namespace swm
