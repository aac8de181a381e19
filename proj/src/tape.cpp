#include "swm/tape.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace swm {

namespace {

using EigenMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EigenMat>;
using ConstMatMap = Eigen::Map<const EigenMat>;

ConstMatMap as_mat(const Tensor& t, std::size_t r, std::size_t c) {
    return ConstMatMap(t.data.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
MatMap as_mat(Tensor& t, std::size_t r, std::size_t c) {
    return MatMap(t.data.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

void require(bool cond, const char* msg) {
    if (!cond) throw ContractError(msg);
}

double stable_softplus(double x) {
    // log(1 + e^x) without overflow
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

// clamped into the open interval so downstream (0,1) contracts hold even at
// double saturation; the derivative y(1-y) is still accurate at the clamp
double stable_sigmoid(double x) {
    double y;
    if (x >= 0.0) {
        double e = std::exp(-x);
        y = 1.0 / (1.0 + e);
    } else {
        double e = std::exp(x);
        y = e / (1.0 + e);
    }
    constexpr double lo = std::numeric_limits<double>::min();
    const double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2.0;
    return std::min(std::max(y, lo), hi);
}

}  // namespace

double surrogate_grad(double x, double alpha) {
    double ax = std::fabs(x);
    if (ax > 1.0 / alpha) return 0.0;
    return -alpha * alpha * ax + alpha;
}

Var Tape::leaf(const Tensor& v) {
    Node n;
    n.value = v;
    n.op = Op::Leaf;
    return push(std::move(n));
}

Var Tape::leaf(Tensor&& v) {
    Node n;
    n.value = std::move(v);
    n.op = Op::Leaf;
    return push(std::move(n));
}

const Tensor& Tape::grad(Var x) {
    int id = check(x);
    return grad_buf(id);
}

Tensor& Tape::grad_buf(int id) {
    Node& n = nodes_[id];
    if (n.grad.numel() == 0 || n.grad.shape != n.value.shape) n.grad = Tensor::zeros(n.value.shape);
    return n.grad;
}

Var Tape::matmul(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require(ta.shape.rank == 2 && tb.shape.rank == 2, "matmul: rank-2 operands required");
    require(ta.shape.d[1] == tb.shape.d[0], "matmul: inner dimensions differ");
    Node n;
    n.op = Op::MatMul;
    n.a = a.id;
    n.b = b.id;
    n.value = Tensor(Shape(ta.shape.d[0], tb.shape.d[1]));
    as_mat(n.value, ta.shape.d[0], tb.shape.d[1]).noalias() =
        as_mat(ta, ta.shape.d[0], ta.shape.d[1]) * as_mat(tb, tb.shape.d[0], tb.shape.d[1]);
    return push(std::move(n));
}

Var Tape::linear(Var x, Var w) {
    const Tensor& tx = val(x);
    const Tensor& tw = val(w);
    require(tx.shape.rank == 2 && tw.shape.rank == 2, "linear: rank-2 operands required");
    require(tx.shape.d[1] == tw.shape.d[1], "linear: input dim does not match weight fan-in");
    Node n;
    n.op = Op::Linear;
    n.a = x.id;
    n.b = w.id;
    n.value = Tensor(Shape(tx.shape.d[0], tw.shape.d[0]));
    as_mat(n.value, tx.shape.d[0], tw.shape.d[0]).noalias() =
        as_mat(tx, tx.shape.d[0], tx.shape.d[1]) *
        as_mat(tw, tw.shape.d[0], tw.shape.d[1]).transpose();
    return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.shape == tb.shape) {
        Node n;
        n.op = Op::Add;
        n.a = a.id;
        n.b = b.id;
        n.value = ta;
        for (std::size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] += tb.data[i];
        return push(std::move(n));
    }
    // rank-1 bias broadcast over rows
    require(tb.shape.rank == 1 && tb.shape.d[0] == ta.shape.last(),
            "add: shapes must match or b must be rank-1 over the last dim");
    Node n;
    n.op = Op::AddB;
    n.a = a.id;
    n.b = b.id;
    n.value = ta;
    std::size_t rows = ta.shape.rows(), cols = ta.shape.last();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) n.value.data[r * cols + c] += tb.data[c];
    return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require(ta.shape == tb.shape, "sub: shape mismatch");
    Node n;
    n.op = Op::Sub;
    n.a = a.id;
    n.b = b.id;
    n.value = ta;
    for (std::size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] -= tb.data[i];
    return push(std::move(n));
}

Var Tape::mul(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    Node n;
    n.a = a.id;
    n.b = b.id;
    n.value = ta;
    if (ta.shape == tb.shape) {
        n.op = Op::Mul;
        for (std::size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] *= tb.data[i];
    } else if (tb.numel() == 1) {
        n.op = Op::MulS;
        for (double& x : n.value.data) x *= tb.data[0];
    } else if (tb.shape.rank == 1 && tb.shape.d[0] == ta.shape.last()) {
        n.op = Op::MulB;
        std::size_t rows = ta.shape.rows(), cols = ta.shape.last();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) n.value.data[r * cols + c] *= tb.data[c];
    } else {
        throw ContractError("mul: shape mismatch");
    }
    return push(std::move(n));
}

Var Tape::div(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require(ta.shape == tb.shape, "div: shape mismatch");
    Node n;
    n.op = Op::Div;
    n.a = a.id;
    n.b = b.id;
    n.value = ta;
    for (std::size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] /= tb.data[i];
    return push(std::move(n));
}

Var Tape::affine(Var a, double k, double c) {
    Node n;
    n.op = Op::Affine;
    n.a = a.id;
    n.c0 = k;
    n.value = val(a);
    for (double& x : n.value.data) x = k * x + c;
    return push(std::move(n));
}

Var Tape::concat(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require(ta.shape.rank == tb.shape.rank, "concat: rank mismatch");
    require(ta.shape.rows() == tb.shape.rows(), "concat: leading dims differ");
    std::size_t rows = ta.shape.rows(), ca = ta.shape.last(), cb = tb.shape.last();
    Shape s = ta.shape;
    s.d[s.rank - 1] = ca + cb;
    Node n;
    n.op = Op::Concat;
    n.a = a.id;
    n.b = b.id;
    n.value = Tensor(s);
    for (std::size_t r = 0; r < rows; ++r) {
        std::memcpy(&n.value.data[r * (ca + cb)], &ta.data[r * ca], ca * sizeof(double));
        std::memcpy(&n.value.data[r * (ca + cb) + ca], &tb.data[r * cb], cb * sizeof(double));
    }
    return push(std::move(n));
}

Var Tape::slice(Var a, std::size_t lo, std::size_t hi) {
    const Tensor& ta = val(a);
    require(lo < hi && hi <= ta.shape.last(), "slice: bad range");
    std::size_t rows = ta.shape.rows(), cols = ta.shape.last(), w = hi - lo;
    Shape s = ta.shape;
    s.d[std::max(s.rank, 1) - 1] = w;
    Node n;
    n.op = Op::Slice;
    n.a = a.id;
    n.c0 = static_cast<double>(lo);
    n.value = Tensor(s);
    for (std::size_t r = 0; r < rows; ++r)
        std::memcpy(&n.value.data[r * w], &ta.data[r * cols + lo], w * sizeof(double));
    return push(std::move(n));
}

Var Tape::reshape(Var a, Shape s) {
    const Tensor& ta = val(a);
    require(s.numel() == ta.numel(), "reshape: element count differs");
    Node n;
    n.op = Op::Reshape;
    n.a = a.id;
    n.value = ta;
    n.value.shape = s;
    return push(std::move(n));
}

Var Tape::sigmoid(Var a) {
    Node n;
    n.op = Op::Sigmoid;
    n.a = a.id;
    n.value = val(a);
    for (double& x : n.value.data) x = stable_sigmoid(x);
    return push(std::move(n));
}

Var Tape::tanh(Var a) {
    Node n;
    n.op = Op::Tanh;
    n.a = a.id;
    n.value = val(a);
    for (double& x : n.value.data) x = std::tanh(x);
    return push(std::move(n));
}

Var Tape::exp(Var a) {
    Node n;
    n.op = Op::Exp;
    n.a = a.id;
    n.value = val(a);
    for (double& x : n.value.data) x = std::exp(x);
    return push(std::move(n));
}

Var Tape::log(Var a) {
    Node n;
    n.op = Op::Log;
    n.a = a.id;
    n.value = val(a);
    for (double& x : n.value.data) {
        if (x <= 0.0) throw NumericError("log: non-positive input");
        x = std::log(x);
    }
    return push(std::move(n));
}

Var Tape::softplus(Var a) {
    Node n;
    n.op = Op::Softplus;
    n.a = a.id;
    n.value = val(a);
    for (double& x : n.value.data) x = stable_softplus(x);
    return push(std::move(n));
}

Var Tape::softmax(Var a) {
    const Tensor& ta = val(a);
    Node n;
    n.op = Op::Softmax;
    n.a = a.id;
    n.value = ta;
    std::size_t rows = ta.shape.rows(), cols = ta.shape.last();
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = &n.value.data[r * cols];
        double m = row[0];
        for (std::size_t c = 1; c < cols; ++c) m = std::max(m, row[c]);
        if (!std::isfinite(m)) throw NumericError("softmax: non-finite logits");
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            row[c] = std::exp(row[c] - m);
            z += row[c];
        }
        for (std::size_t c = 0; c < cols; ++c) row[c] /= z;
    }
    return push(std::move(n));
}

Var Tape::log_softmax(Var a) {
    const Tensor& ta = val(a);
    Node n;
    n.op = Op::LogSoftmax;
    n.a = a.id;
    n.value = ta;
    std::size_t rows = ta.shape.rows(), cols = ta.shape.last();
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = &n.value.data[r * cols];
        double m = row[0];
        for (std::size_t c = 1; c < cols; ++c) m = std::max(m, row[c]);
        if (!std::isfinite(m)) throw NumericError("log_softmax: non-finite logits");
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) z += std::exp(row[c] - m);
        double lz = m + std::log(z);
        for (std::size_t c = 0; c < cols; ++c) row[c] -= lz;
    }
    return push(std::move(n));
}

Var Tape::sum(Var a) {
    Node n;
    n.op = Op::Sum;
    n.a = a.id;
    double s = 0.0;
    for (double x : val(a).data) s += x;
    n.value = Tensor::scalar(s);
    return push(std::move(n));
}

Var Tape::mean(Var a) {
    Node n;
    n.op = Op::Mean;
    n.a = a.id;
    const Tensor& ta = val(a);
    double s = 0.0;
    for (double x : ta.data) s += x;
    n.value = Tensor::scalar(s / static_cast<double>(ta.numel()));
    return push(std::move(n));
}

Var Tape::sum_last(Var a) {
    const Tensor& ta = val(a);
    require(ta.shape.rank >= 1, "sum_last: rank-0 input");
    Shape s;
    if (ta.shape.rank == 1)
        s = Shape(std::size_t(1));
    else if (ta.shape.rank == 2)
        s = Shape(ta.shape.d[0]);
    else
        s = Shape(ta.shape.d[0], ta.shape.d[1]);
    Node n;
    n.op = Op::SumLast;
    n.a = a.id;
    n.value = Tensor(s);
    std::size_t rows = ta.shape.rows(), cols = ta.shape.last();
    for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) acc += ta.data[r * cols + c];
        n.value.data[r] = acc;
    }
    return push(std::move(n));
}

Var Tape::clamp_min(Var a, double lo) {
    Node n;
    n.op = Op::ClampMin;
    n.a = a.id;
    n.c0 = lo;
    n.value = val(a);
    for (double& x : n.value.data) x = std::max(x, lo);
    return push(std::move(n));
}

Var Tape::detach(Var a) {
    Node n;
    n.op = Op::Detach;
    n.a = a.id;
    n.value = val(a);
    return push(std::move(n));
}

Var Tape::spike(Var u, double v_th, double alpha) {
    if (alpha <= 0.0) throw ParamError("spike: alpha must be positive");
    Node n;
    n.a = u.id;
    n.c0 = v_th;
    n.c1 = alpha;
    n.value = val(u);
    if (smooth_spikes) {
        n.op = Op::SpikeSmooth;
        for (double& x : n.value.data) x = stable_sigmoid(smooth_beta * (x - v_th));
    } else {
        n.op = Op::SpikeHard;
        for (double& x : n.value.data) x = (x > v_th) ? 1.0 : 0.0;
    }
    return push(std::move(n));
}

// x: [B, in_c*h*w], w: [out_c, in_c*k*k] -> [B, out_c*oh*ow]
Var Tape::conv2d(Var x, Var w, const Conv2dSpec& spec) {
    const Tensor& tx = val(x);
    const Tensor& tw = val(w);
    require(tx.shape.rank == 2, "conv2d: rank-2 input required");
    require(tx.shape.d[1] == static_cast<std::size_t>(spec.in_c * spec.h * spec.w),
            "conv2d: input does not match spec");
    require(tw.shape == Shape(static_cast<std::size_t>(spec.out_c),
                              static_cast<std::size_t>(spec.in_c * spec.k * spec.k)),
            "conv2d: weight does not match spec");
    int oh = spec.out_h(), ow = spec.out_w();
    std::size_t batch = tx.shape.d[0];
    Node n;
    n.op = Op::Conv2d;
    n.a = x.id;
    n.b = w.id;
    n.conv = spec;
    n.value = Tensor(Shape(batch, static_cast<std::size_t>(spec.out_c * oh * ow)));
    for (std::size_t bi = 0; bi < batch; ++bi) {
        const double* in = &tx.data[bi * tx.shape.d[1]];
        double* out = &n.value.data[bi * n.value.shape.d[1]];
        for (int oc = 0; oc < spec.out_c; ++oc)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = 0.0;
                    for (int ic = 0; ic < spec.in_c; ++ic)
                        for (int ky = 0; ky < spec.k; ++ky) {
                            int iy = oy * spec.stride + ky - spec.pad;
                            if (iy < 0 || iy >= spec.h) continue;
                            for (int kx = 0; kx < spec.k; ++kx) {
                                int ix = ox * spec.stride + kx - spec.pad;
                                if (ix < 0 || ix >= spec.w) continue;
                                acc += in[(ic * spec.h + iy) * spec.w + ix] *
                                       tw.data[(oc * spec.in_c + ic) * spec.k * spec.k + ky * spec.k + kx];
                            }
                        }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
    }
    return push(std::move(n));
}

// Transposed convolution: maps [B, out_c*oh*ow] back to [B, in_c*h*w] using a
// kernel of the same layout as the matching conv2d.
Var Tape::conv2d_t(Var x, Var w, const Conv2dSpec& spec) {
    const Tensor& tx = val(x);
    const Tensor& tw = val(w);
    int oh = spec.out_h(), ow = spec.out_w();
    require(tx.shape.rank == 2, "conv2d_t: rank-2 input required");
    require(tx.shape.d[1] == static_cast<std::size_t>(spec.out_c * oh * ow),
            "conv2d_t: input does not match spec");
    require(tw.shape == Shape(static_cast<std::size_t>(spec.out_c),
                              static_cast<std::size_t>(spec.in_c * spec.k * spec.k)),
            "conv2d_t: weight does not match spec");
    std::size_t batch = tx.shape.d[0];
    Node n;
    n.op = Op::Conv2dT;
    n.a = x.id;
    n.b = w.id;
    n.conv = spec;
    n.value = Tensor(Shape(batch, static_cast<std::size_t>(spec.in_c * spec.h * spec.w)));
    for (std::size_t bi = 0; bi < batch; ++bi) {
        const double* in = &tx.data[bi * tx.shape.d[1]];
        double* out = &n.value.data[bi * n.value.shape.d[1]];
        for (int oc = 0; oc < spec.out_c; ++oc)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double v = in[(oc * oh + oy) * ow + ox];
                    if (v == 0.0) continue;
                    for (int ic = 0; ic < spec.in_c; ++ic)
                        for (int ky = 0; ky < spec.k; ++ky) {
                            int iy = oy * spec.stride + ky - spec.pad;
                            if (iy < 0 || iy >= spec.h) continue;
                            for (int kx = 0; kx < spec.k; ++kx) {
                                int ix = ox * spec.stride + kx - spec.pad;
                                if (ix < 0 || ix >= spec.w) continue;
                                out[(ic * spec.h + iy) * spec.w + ix] +=
                                    v * tw.data[(oc * spec.in_c + ic) * spec.k * spec.k + ky * spec.k + kx];
                            }
                        }
                }
    }
    return push(std::move(n));
}

void Tape::backward(Var loss) {
    if (swept_) throw ContractError("backward called twice without reset_backward");
    int id = check(loss);
    if (nodes_[id].value.numel() != 1) throw ContractError("backward: loss must be scalar");
    swept_ = true;
    grad_buf(id).data[0] = 1.0;
    for (int i = id; i >= 0; --i) {
        if (nodes_[i].grad.numel() == 0) continue;  // unreachable
        backprop_node(i);
    }
}

void Tape::reset_backward() {
    for (Node& n : nodes_) n.grad = Tensor();
    swept_ = false;
}

void Tape::backprop_node(int id) {
    Node& n = nodes_[id];
    const Tensor& g = n.grad;
    switch (n.op) {
        case Op::Leaf:
            break;
        case Op::MatMul: {
            const Tensor& ta = nodes_[n.a].value;
            const Tensor& tb = nodes_[n.b].value;
            std::size_t m = ta.shape.d[0], k = ta.shape.d[1], c = tb.shape.d[1];
            as_mat(grad_buf(n.a), m, k).noalias() += as_mat(g, m, c) * as_mat(tb, k, c).transpose();
            as_mat(grad_buf(n.b), k, c).noalias() += as_mat(ta, m, k).transpose() * as_mat(g, m, c);
            break;
        }
        case Op::Linear: {
            const Tensor& tx = nodes_[n.a].value;
            const Tensor& tw = nodes_[n.b].value;
            std::size_t bsz = tx.shape.d[0], i = tx.shape.d[1], o = tw.shape.d[0];
            as_mat(grad_buf(n.a), bsz, i).noalias() += as_mat(g, bsz, o) * as_mat(tw, o, i);
            as_mat(grad_buf(n.b), o, i).noalias() +=
                as_mat(g, bsz, o).transpose() * as_mat(tx, bsz, i);
            break;
        }
        case Op::Add: {
            Tensor& ga = grad_buf(n.a);
            Tensor& gb = grad_buf(n.b);
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                ga.data[i] += g.data[i];
                gb.data[i] += g.data[i];
            }
            break;
        }
        case Op::AddB: {
            Tensor& ga = grad_buf(n.a);
            Tensor& gb = grad_buf(n.b);
            std::size_t rows = n.value.shape.rows(), cols = n.value.shape.last();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) {
                    ga.data[r * cols + c] += g.data[r * cols + c];
                    gb.data[c] += g.data[r * cols + c];
                }
            break;
        }
        case Op::Sub: {
            Tensor& ga = grad_buf(n.a);
            Tensor& gb = grad_buf(n.b);
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                ga.data[i] += g.data[i];
                gb.data[i] -= g.data[i];
            }
            break;
        }
        case Op::Mul: {
            Tensor& ga = grad_buf(n.a);
            Tensor& gb = grad_buf(n.b);
            const Tensor& ta = nodes_[n.a].value;
            const Tensor& tb = nodes_[n.b].value;
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                ga.data[i] += g.data[i] * tb.data[i];
                gb.data[i] += g.data[i] * ta.data[i];
            }
            break;
        }
        case Op::MulS: {
            Tensor& ga = grad_buf(n.a);
            Tensor& gb = grad_buf(n.b);
            const Tensor& ta = nodes_[n.a].value;
            const Tensor& tb = nodes_[n.b].value;
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                ga.data[i] += g.data[i] * tb.data[0];
                gb.data[0] += g.data[i] * ta.data[i];
            }
            break;
        }
        case Op::MulB: {
            Tensor& ga = grad_buf(n.a);
            Tensor& gb = grad_buf(n.b);
            const Tensor& ta = nodes_[n.a].value;
            const Tensor& tb = nodes_[n.b].value;
            std::size_t rows = n.value.shape.rows(), cols = n.value.shape.last();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) {
                    ga.data[r * cols + c] += g.data[r * cols + c] * tb.data[c];
                    gb.data[c] += g.data[r * cols + c] * ta.data[r * cols + c];
                }
            break;
        }
        case Op::Div: {
            Tensor& ga = grad_buf(n.a);
            Tensor& gb = grad_buf(n.b);
            const Tensor& ta = nodes_[n.a].value;
            const Tensor& tb = nodes_[n.b].value;
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                ga.data[i] += g.data[i] / tb.data[i];
                gb.data[i] -= g.data[i] * ta.data[i] / (tb.data[i] * tb.data[i]);
            }
            break;
        }
        case Op::Affine: {
            Tensor& ga = grad_buf(n.a);
            for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += n.c0 * g.data[i];
            break;
        }
        case Op::Concat: {
            Tensor& ga = grad_buf(n.a);
            Tensor& gb = grad_buf(n.b);
            std::size_t rows = n.value.shape.rows();
            std::size_t ca = nodes_[n.a].value.shape.last(), cb = nodes_[n.b].value.shape.last();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < ca; ++c) ga.data[r * ca + c] += g.data[r * (ca + cb) + c];
                for (std::size_t c = 0; c < cb; ++c)
                    gb.data[r * cb + c] += g.data[r * (ca + cb) + ca + c];
            }
            break;
        }
        case Op::Slice: {
            Tensor& ga = grad_buf(n.a);
            std::size_t lo = static_cast<std::size_t>(n.c0);
            std::size_t rows = n.value.shape.rows(), w = n.value.shape.last();
            std::size_t cols = nodes_[n.a].value.shape.last();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < w; ++c) ga.data[r * cols + lo + c] += g.data[r * w + c];
            break;
        }
        case Op::Reshape: {
            Tensor& ga = grad_buf(n.a);
            for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
            break;
        }
        case Op::Sigmoid: {
            Tensor& ga = grad_buf(n.a);
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                double y = n.value.data[i];
                ga.data[i] += g.data[i] * y * (1.0 - y);
            }
            break;
        }
        case Op::Tanh: {
            Tensor& ga = grad_buf(n.a);
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                double y = n.value.data[i];
                ga.data[i] += g.data[i] * (1.0 - y * y);
            }
            break;
        }
        case Op::Exp: {
            Tensor& ga = grad_buf(n.a);
            for (std::size_t i = 0; i < g.data.size(); ++i)
                ga.data[i] += g.data[i] * n.value.data[i];
            break;
        }
        case Op::Log: {
            Tensor& ga = grad_buf(n.a);
            const Tensor& ta = nodes_[n.a].value;
            for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] / ta.data[i];
            break;
        }
        case Op::Softplus: {
            Tensor& ga = grad_buf(n.a);
            const Tensor& ta = nodes_[n.a].value;
            for (std::size_t i = 0; i < g.data.size(); ++i)
                ga.data[i] += g.data[i] * stable_sigmoid(ta.data[i]);
            break;
        }
        case Op::Softmax: {
            Tensor& ga = grad_buf(n.a);
            std::size_t rows = n.value.shape.rows(), cols = n.value.shape.last();
            for (std::size_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (std::size_t c = 0; c < cols; ++c)
                    dot += g.data[r * cols + c] * n.value.data[r * cols + c];
                for (std::size_t c = 0; c < cols; ++c)
                    ga.data[r * cols + c] +=
                        n.value.data[r * cols + c] * (g.data[r * cols + c] - dot);
            }
            break;
        }
        case Op::LogSoftmax: {
            Tensor& ga = grad_buf(n.a);
            std::size_t rows = n.value.shape.rows(), cols = n.value.shape.last();
            for (std::size_t r = 0; r < rows; ++r) {
                double gsum = 0.0;
                for (std::size_t c = 0; c < cols; ++c) gsum += g.data[r * cols + c];
                for (std::size_t c = 0; c < cols; ++c)
                    ga.data[r * cols + c] +=
                        g.data[r * cols + c] - std::exp(n.value.data[r * cols + c]) * gsum;
            }
            break;
        }
        case Op::Sum: {
            Tensor& ga = grad_buf(n.a);
            for (double& x : ga.data) x += g.data[0];
            break;
        }
        case Op::Mean: {
            Tensor& ga = grad_buf(n.a);
            double s = g.data[0] / static_cast<double>(ga.numel());
            for (double& x : ga.data) x += s;
            break;
        }
        case Op::SumLast: {
            Tensor& ga = grad_buf(n.a);
            std::size_t rows = nodes_[n.a].value.shape.rows();
            std::size_t cols = nodes_[n.a].value.shape.last();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) ga.data[r * cols + c] += g.data[r];
            break;
        }
        case Op::ClampMin: {
            Tensor& ga = grad_buf(n.a);
            const Tensor& ta = nodes_[n.a].value;
            for (std::size_t i = 0; i < g.data.size(); ++i)
                if (ta.data[i] > n.c0) ga.data[i] += g.data[i];
            break;
        }
        case Op::Detach:
            break;
        case Op::SpikeHard: {
            Tensor& ga = grad_buf(n.a);
            const Tensor& tu = nodes_[n.a].value;
            for (std::size_t i = 0; i < g.data.size(); ++i)
                ga.data[i] += g.data[i] * surrogate_grad(tu.data[i] - n.c0, n.c1);
            break;
        }
        case Op::SpikeSmooth: {
            Tensor& ga = grad_buf(n.a);
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                double y = n.value.data[i];
                ga.data[i] += g.data[i] * smooth_beta * y * (1.0 - y);
            }
            break;
        }
        case Op::Conv2d: {
            Tensor& gx = grad_buf(n.a);
            Tensor& gw = grad_buf(n.b);
            const Tensor& tx = nodes_[n.a].value;
            const Tensor& tw = nodes_[n.b].value;
            const Conv2dSpec& sp = n.conv;
            int oh = sp.out_h(), ow = sp.out_w();
            std::size_t batch = tx.shape.d[0];
            for (std::size_t bi = 0; bi < batch; ++bi) {
                const double* in = &tx.data[bi * tx.shape.d[1]];
                const double* go = &g.data[bi * n.value.shape.d[1]];
                double* gi = &gx.data[bi * tx.shape.d[1]];
                for (int oc = 0; oc < sp.out_c; ++oc)
                    for (int oy = 0; oy < oh; ++oy)
                        for (int ox = 0; ox < ow; ++ox) {
                            double gv = go[(oc * oh + oy) * ow + ox];
                            if (gv == 0.0) continue;
                            for (int ic = 0; ic < sp.in_c; ++ic)
                                for (int ky = 0; ky < sp.k; ++ky) {
                                    int iy = oy * sp.stride + ky - sp.pad;
                                    if (iy < 0 || iy >= sp.h) continue;
                                    for (int kx = 0; kx < sp.k; ++kx) {
                                        int ix = ox * sp.stride + kx - sp.pad;
                                        if (ix < 0 || ix >= sp.w) continue;
                                        std::size_t wi =
                                            (oc * sp.in_c + ic) * sp.k * sp.k + ky * sp.k + kx;
                                        gi[(ic * sp.h + iy) * sp.w + ix] += gv * tw.data[wi];
                                        gw.data[wi] += gv * in[(ic * sp.h + iy) * sp.w + ix];
                                    }
                                }
                        }
            }
            break;
        }
        case Op::Conv2dT: {
            Tensor& gx = grad_buf(n.a);
            Tensor& gw = grad_buf(n.b);
            const Tensor& tx = nodes_[n.a].value;
            const Tensor& tw = nodes_[n.b].value;
            const Conv2dSpec& sp = n.conv;
            int oh = sp.out_h(), ow = sp.out_w();
            std::size_t batch = tx.shape.d[0];
            for (std::size_t bi = 0; bi < batch; ++bi) {
                const double* in = &tx.data[bi * tx.shape.d[1]];
                const double* go = &g.data[bi * n.value.shape.d[1]];
                double* gi = &gx.data[bi * tx.shape.d[1]];
                for (int oc = 0; oc < sp.out_c; ++oc)
                    for (int oy = 0; oy < oh; ++oy)
                        for (int ox = 0; ox < ow; ++ox) {
                            double xv = in[(oc * oh + oy) * ow + ox];
                            double acc = 0.0;
                            for (int ic = 0; ic < sp.in_c; ++ic)
                                for (int ky = 0; ky < sp.k; ++ky) {
                                    int iy = oy * sp.stride + ky - sp.pad;
                                    if (iy < 0 || iy >= sp.h) continue;
                                    for (int kx = 0; kx < sp.k; ++kx) {
                                        int ix = ox * sp.stride + kx - sp.pad;
                                        if (ix < 0 || ix >= sp.w) continue;
                                        std::size_t wi =
                                            (oc * sp.in_c + ic) * sp.k * sp.k + ky * sp.k + kx;
                                        acc += go[(ic * sp.h + iy) * sp.w + ix] * tw.data[wi];
                                        gw.data[wi] += xv * go[(ic * sp.h + iy) * sp.w + ix];
                                    }
                                }
                            gi[(oc * oh + oy) * ow + ox] += acc;
                        }
            }
            break;
        }
    }
}

double grad_check(const std::function<Var(Tape&, const std::vector<Var>&)>& f,
                  const std::vector<Tensor>& params, double eps, bool smooth_spikes) {
    // analytic gradients
    std::vector<Tensor> analytic;
    {
        Tape tape;
        tape.smooth_spikes = smooth_spikes;
        std::vector<Var> vars;
        vars.reserve(params.size());
        for (const Tensor& p : params) vars.push_back(tape.leaf(p));
        Var loss = f(tape, vars);
        tape.backward(loss);
        for (Var v : vars) analytic.push_back(tape.grad(v));
    }
    auto eval = [&](const std::vector<Tensor>& ps) {
        Tape tape;
        tape.smooth_spikes = smooth_spikes;
        std::vector<Var> vars;
        vars.reserve(ps.size());
        for (const Tensor& p : ps) vars.push_back(tape.leaf(p));
        return tape.val(f(tape, vars)).item();
    };
    double worst = 0.0;
    std::vector<Tensor> work = params;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        for (std::size_t i = 0; i < params[pi].numel(); ++i) {
            double orig = work[pi].data[i];
            work[pi].data[i] = orig + eps;
            double up = eval(work);
            work[pi].data[i] = orig - eps;
            double dn = eval(work);
            work[pi].data[i] = orig;
            double numeric = (up - dn) / (2.0 * eps);
            double a = analytic[pi].data[i];
            double rel = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace swm
