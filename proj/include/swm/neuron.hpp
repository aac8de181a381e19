#pragma once

#include "swm/tensor.hpp"

namespace swm {

// Biophysical constants of one neuron population. Decays are in units of
// simulation steps; tau >= 1 keeps the forward-Euler coefficient 1/tau in (0,1].
struct NeuronParams {
    double tau = 2.0;      // somatic decay
    double tau_a = 2.0;    // apical decay
    double tau_b = 2.0;    // basal decay
    double g_B = 1.0;      // basal conductance
    double g_L = 1.0;      // leak conductance
    double beta = 1.0;     // gate sharpness
    double v_th = 1.0;     // threshold potential
    double v_reset = 0.0;  // reset potential
    double alpha = 2.0;    // surrogate width

    // Rejects invalid settings instead of clamping; a conductance ratio or a
    // decay silently pulled into range would mask configuration bugs.
    void validate() const;
};

// The five synaptic weight matrices of one multi-compartment layer.
struct MCNWeights {
    Tensor w_b;   // [n_out, n_in]      basal input
    Tensor w_hb;  // [n_out, n_out]     basal recurrent
    Tensor w_a;   // [n_out, n_in]      apical input
    Tensor w_ha;  // [n_out, n_out]     apical recurrent
    Tensor w_s;   // [n_out, n_soma_in] somatic input

    void validate(std::size_t n_out, std::size_t n_in, std::size_t n_soma_in) const;
};

// Full recurrent state of a multi-compartment population. s holds the spikes
// emitted by the step that produced this state.
struct MCNCellState {
    Tensor v_basal;
    Tensor v_apical;
    Tensor u;
    Tensor s;

    static MCNCellState zeros(std::size_t n);
};

struct LIFCellState {
    Tensor u;
    Tensor s;

    static LIFCellState zeros(std::size_t n);
};

// One Euler step of the leaky integrator: u' = u + (x - u)/tau, spike iff
// u' > v_th strictly, hard reset to v_reset where spiking. The returned state
// carries post-reset u and this tick's spikes.
LIFCellState lif_step(const LIFCellState& state, const Tensor& x, const NeuronParams& params);

// Shared dendritic relaxation v' = v + (x - v)/tau_d for basal and apical
// branches.
Tensor dendrite_step(const Tensor& v, const Tensor& x, double tau_d);

// Apical gate z = sigmoid(beta * v), strictly inside (0,1) for finite input.
Tensor gate(const Tensor& v_apical, double beta);

// One full multi-compartment step:
//   v_basal'  = dendrite_step(v_basal,  w_b s_in + w_hb s_h_prev, tau_b)
//   v_apical' = dendrite_step(v_apical, w_a s_in + w_ha s_h_prev, tau_a)
//   h  = (g_B/g_L)(v_basal' - u_prev) + w_s s_soma_in
//   z  = gate(v_apical', beta)
//   u' = u_prev + (z*h - u_prev)/tau
//   s  = 1 iff u' > v_th strictly; stored u = u'*(1 - s) (multiplicative reset)
MCNCellState mcn_step(const MCNCellState& state, const Tensor& s_in, const Tensor& s_h_prev,
                      const Tensor& s_soma_in, const MCNWeights& w, const NeuronParams& params);

}  // namespace swm
