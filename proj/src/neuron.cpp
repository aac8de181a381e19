#include "swm/neuron.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace swm {

namespace {

using EigenMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EigenVec = Eigen::VectorXd;

Eigen::Map<const EigenMat> mat(const Tensor& t) {
    return {t.data.data(), static_cast<Eigen::Index>(t.shape.d[0]),
            static_cast<Eigen::Index>(t.shape.d[1])};
}
Eigen::Map<const EigenVec> vec(const Tensor& t) {
    return {t.data.data(), static_cast<Eigen::Index>(t.numel())};
}
Eigen::Map<EigenVec> vec(Tensor& t) {
    return {t.data.data(), static_cast<Eigen::Index>(t.numel())};
}

void require_vec(const Tensor& t, std::size_t n, const char* name) {
    if (t.shape.rank != 1 || t.shape.d[0] != n)
        throw ContractError(std::string(name) + ": expected vector of length " +
                            std::to_string(n) + ", got " + t.shape.str());
    if (!t.finite()) throw NumericError(std::string(name) + ": non-finite values");
}

void require_mat(const Tensor& t, std::size_t r, std::size_t c, const char* name) {
    if (t.shape != Shape(r, c))
        throw ContractError(std::string(name) + ": expected [" + std::to_string(r) + "," +
                            std::to_string(c) + "], got " + t.shape.str());
    if (!t.finite()) throw NumericError(std::string(name) + ": non-finite values");
}

}  // namespace

void NeuronParams::validate() const {
    if (!(tau >= 1.0)) throw ParamError("tau must be >= 1");
    if (!(tau_a >= 1.0)) throw ParamError("tau_a must be >= 1");
    if (!(tau_b >= 1.0)) throw ParamError("tau_b must be >= 1");
    if (!(g_L > 0.0)) throw ParamError("g_L must be positive");
    if (!(g_B >= 0.0)) throw ParamError("g_B must be nonnegative");
    if (!(beta > 0.0)) throw ParamError("beta must be positive");
    if (!(alpha > 0.0)) throw ParamError("alpha must be positive");
    if (!(v_th > v_reset)) throw ParamError("v_th must exceed v_reset");
}

void MCNWeights::validate(std::size_t n_out, std::size_t n_in, std::size_t n_soma_in) const {
    require_mat(w_b, n_out, n_in, "w_b");
    require_mat(w_hb, n_out, n_out, "w_hb");
    require_mat(w_a, n_out, n_in, "w_a");
    require_mat(w_ha, n_out, n_out, "w_ha");
    require_mat(w_s, n_out, n_soma_in, "w_s");
}

MCNCellState MCNCellState::zeros(std::size_t n) {
    MCNCellState st;
    st.v_basal = Tensor::zeros(Shape(n));
    st.v_apical = Tensor::zeros(Shape(n));
    st.u = Tensor::zeros(Shape(n));
    st.s = Tensor::zeros(Shape(n));
    return st;
}

LIFCellState LIFCellState::zeros(std::size_t n) {
    LIFCellState st;
    st.u = Tensor::zeros(Shape(n));
    st.s = Tensor::zeros(Shape(n));
    return st;
}

LIFCellState lif_step(const LIFCellState& state, const Tensor& x, const NeuronParams& params) {
    params.validate();
    std::size_t n = state.u.numel();
    require_vec(state.u, n, "u");
    require_vec(x, n, "x");
    LIFCellState out;
    out.u = Tensor(Shape(n));
    out.s = Tensor(Shape(n));
    double inv_tau = 1.0 / params.tau;
    for (std::size_t i = 0; i < n; ++i) {
        double u1 = state.u.data[i] + (x.data[i] - state.u.data[i]) * inv_tau;
        bool fired = u1 > params.v_th;
        out.s.data[i] = fired ? 1.0 : 0.0;
        out.u.data[i] = fired ? params.v_reset : u1;
    }
    return out;
}

Tensor dendrite_step(const Tensor& v, const Tensor& x, double tau_d) {
    if (!(tau_d >= 1.0)) throw ParamError("tau_d must be >= 1");
    require_vec(v, v.numel(), "v");
    require_vec(x, v.numel(), "x");
    Tensor out(v.shape);
    double inv = 1.0 / tau_d;
    for (std::size_t i = 0; i < v.numel(); ++i)
        out.data[i] = v.data[i] + (x.data[i] - v.data[i]) * inv;
    return out;
}

Tensor gate(const Tensor& v_apical, double beta) {
    if (!(beta > 0.0)) throw ParamError("beta must be positive");
    if (!v_apical.finite()) throw NumericError("gate: non-finite input");
    // the sigmoid saturates to exactly 0 or 1 in doubles around |x| ~ 37;
    // clamp into the open interval so the (0,1) contract holds for all input
    constexpr double lo = std::numeric_limits<double>::min();
    const double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2.0;
    Tensor out(v_apical.shape);
    for (std::size_t i = 0; i < v_apical.numel(); ++i) {
        double x = beta * v_apical.data[i];
        double z = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                            : std::exp(x) / (1.0 + std::exp(x));
        out.data[i] = std::min(std::max(z, lo), hi);
    }
    return out;
}

MCNCellState mcn_step(const MCNCellState& state, const Tensor& s_in, const Tensor& s_h_prev,
                      const Tensor& s_soma_in, const MCNWeights& w, const NeuronParams& params) {
    params.validate();
    std::size_t n = state.u.numel();
    std::size_t n_in = s_in.numel();
    std::size_t n_soma = s_soma_in.numel();
    w.validate(n, n_in, n_soma);
    require_vec(state.v_basal, n, "v_basal");
    require_vec(state.v_apical, n, "v_apical");
    require_vec(state.u, n, "u");
    require_vec(s_in, n_in, "s_in");
    require_vec(s_h_prev, n, "s_h_prev");
    require_vec(s_soma_in, n_soma, "s_soma_in");

    Tensor drive_b{Shape(n)}, drive_a{Shape(n)}, soma_in{Shape(n)};
    vec(drive_b) = mat(w.w_b) * vec(s_in) + mat(w.w_hb) * vec(s_h_prev);
    vec(drive_a) = mat(w.w_a) * vec(s_in) + mat(w.w_ha) * vec(s_h_prev);
    vec(soma_in) = mat(w.w_s) * vec(s_soma_in);

    MCNCellState out;
    out.v_basal = dendrite_step(state.v_basal, drive_b, params.tau_b);
    out.v_apical = dendrite_step(state.v_apical, drive_a, params.tau_a);
    Tensor z = gate(out.v_apical, params.beta);

    out.u = Tensor(Shape(n));
    out.s = Tensor(Shape(n));
    double ratio = params.g_B / params.g_L;
    double inv_tau = 1.0 / params.tau;
    for (std::size_t i = 0; i < n; ++i) {
        double h = ratio * (out.v_basal.data[i] - state.u.data[i]) + soma_in.data[i];
        double u1 = state.u.data[i] + (z.data[i] * h - state.u.data[i]) * inv_tau;
        bool fired = u1 > params.v_th;
        out.s.data[i] = fired ? 1.0 : 0.0;
        out.u.data[i] = u1 * (1.0 - out.s.data[i]);
    }
    return out;
}

}  // namespace swm
