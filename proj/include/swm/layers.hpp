#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "swm/neuron.hpp"
#include "swm/optimizer.hpp"
#include "swm/rng.hpp"
#include "swm/tape.hpp"

namespace swm {

// ---- differentiable spiking layers -----------------------------------------
// All layer states live on the tape during a rollout so backpropagation runs
// through time. snapshot()/restore() move state off and back onto a tape
// (detached) to carry it across training windows.

struct LIFState {
    Var u, s;
};

struct LIFStateValue {
    Tensor u, s;
};

class LIFDenseLayer {
public:
    // gain scales the fan-in init so drives reach the spiking regime
    LIFDenseLayer(ParamStore& store, const std::string& name, std::size_t n_in, std::size_t n_out,
                  NeuronParams params, Rng& rng, double gain = 1.0);

    LIFState initial(Tape& t, std::size_t batch) const;
    LIFState restore(Tape& t, const LIFStateValue& v) const;
    static LIFStateValue snapshot(const Tape& t, const LIFState& s);

    // one tick: x [B, n_in] -> state with .s = spikes [B, n_out]
    LIFState step(Tape& t, const Binding& b, const LIFState& st, Var x) const;

    std::size_t in_size() const { return n_in_; }
    std::size_t out_size() const { return n_out_; }
    ParamRef weight() const { return w_; }
    const NeuronParams& params() const { return params_; }

private:
    ParamRef w_;  // [n_out, n_in]
    NeuronParams params_;
    std::size_t n_in_, n_out_;
};

struct MCNState {
    Var v_basal, v_apical, u, s;
};

struct MCNStateValue {
    Tensor v_basal, v_apical, u, s;
};

class MCNLayer {
public:
    // learnable_decay reparameterizes each decay as tau = 1 + softplus(rho)
    // with one unconstrained scalar per decay constant.
    MCNLayer(ParamStore& store, const std::string& name, std::size_t n_in, std::size_t n,
             std::size_t n_soma_in, NeuronParams params, Rng& rng, bool learnable_decay = false,
             double gain = 1.0);

    MCNState initial(Tape& t, std::size_t batch) const;
    MCNState restore(Tape& t, const MCNStateValue& v) const;
    static MCNStateValue snapshot(const Tape& t, const MCNState& s);

    // one tick: s_in [B, n_in], s_soma [B, n_soma_in] -> state with .s [B, n]
    MCNState step(Tape& t, const Binding& b, const MCNState& st, Var s_in, Var s_soma) const;

    // apical gate values of a state (diagnostics, no gradients)
    Tensor gate_values(const Tape& t, const MCNState& st) const;

    std::size_t size() const { return n_; }
    std::size_t in_size() const { return n_in_; }
    std::size_t soma_size() const { return n_soma_; }
    const NeuronParams& params() const { return params_; }
    bool learnable_decay() const { return rho_tau_.valid(); }
    // effective decays under the reparameterization (master values)
    double tau_now(const ParamStore& store) const;

private:
    Var inv_decay(Tape& t, const Binding& b, ParamRef rho, double fixed) const;

    ParamRef w_b_, w_hb_, w_a_, w_ha_, w_s_;
    ParamRef rho_tau_, rho_tau_a_, rho_tau_b_;  // invalid when decays are fixed
    NeuronParams params_;
    std::size_t n_in_, n_, n_soma_;
};

// Non-spiking leaky readout: y' = y + (w*spikes - y)/tau_ro, returns y over
// time; heads consume the final tick.
class ReadoutLayer {
public:
    ReadoutLayer(ParamStore& store, const std::string& name, std::size_t n_in, std::size_t n_out,
                 double tau_ro, Rng& rng);

    Var initial(Tape& t, std::size_t batch) const;
    Var step(Tape& t, const Binding& b, Var y, Var spikes) const;
    // full pass over a tick-major spike list, starting from zero state
    Var forward(Tape& t, const Binding& b, const std::vector<Var>& spikes) const;

    std::size_t out_size() const { return n_out_; }
    ParamRef weight() const { return w_; }

private:
    ParamRef w_;  // [n_out, n_in]
    double tau_ro_;
    std::size_t n_in_, n_out_;
};

// Per-neuron leaky spike trace (identity readout): tr' = tr + (s - tr)/tau.
Var trace_step(Tape& t, Var trace, Var spikes, double tau);

// ---- stochastic latents -----------------------------------------------------

struct LatentSpec {
    std::size_t groups = 8;
    std::size_t classes = 8;
    std::size_t flat() const { return groups * classes; }
};

// Per-group softmax of flat logits [B, groups*classes].
Var latent_probs(Tape& t, Var logits, const LatentSpec& spec);
Var latent_log_probs(Tape& t, Var logits, const LatentSpec& spec);

// One-hot sample per group with straight-through gradients:
// sample = probs + detach(onehot - probs).
Var latent_sample_st(Tape& t, Var logits, const LatentSpec& spec, Rng& rng);

// Same sampler with uniforms keyed by (base, row-content hash, group): rows
// with identical logits draw identical samples, so batch-mean losses are
// invariant under row duplication while distinct rows stay decorrelated.
Var latent_sample_keyed(Tape& t, Var logits, const LatentSpec& spec, std::uint64_t base);

// Argmax one-hot per group, no gradients (deterministic eval).
Tensor latent_mode(const Tensor& probs, const LatentSpec& spec);

// Mean over batch of summed per-group KL(q || p), each group clamped below by
// free_nats when free_nats > 0.
Var kl_categorical(Tape& t, Var q_logits, Var p_logits, const LatentSpec& spec,
                   double free_nats = 0.0);

// Diagonal-Gaussian latent alternative. params [B, 2*dim] = (mean, raw);
// stddev = min_std + softplus(raw). Reparameterized sample.
struct GaussLatent {
    Var sample, mean, stddev;
};
GaussLatent gauss_latent_sample(Tape& t, Var params, std::size_t dim, Rng& rng,
                                double min_std = 0.1);
GaussLatent gauss_latent_sample_keyed(Tape& t, Var params, std::size_t dim, std::uint64_t base,
                                      double min_std = 0.1);
// Mean over batch of KL(q || p) between diagonal Gaussians given (mean, raw)
// parameter blocks; the whole vector counts as one group for the free-bits
// clamp.
Var kl_gaussian_diag(Tape& t, Var q_params, Var p_params, std::size_t dim,
                     double min_std = 0.1, double free_nats = 0.0);

// ---- likelihoods ------------------------------------------------------------

double symlog(double x);
double symexp(double x);

// Bin centers uniform in symlog space covering [lo, hi] in raw values.
struct BinGrid {
    std::vector<double> centers;  // symlog space
    static BinGrid symlog_uniform(int n_bins, double lo, double hi);
};

// Mean over batch of Gaussian NLL with unit variance, summed over features.
Var gaussian_nll(Tape& t, Var mean, const Tensor& target);

// Mean over batch of Bernoulli NLL from logits, summed over features.
Var bernoulli_nll(Tape& t, Var logit, const Tensor& target);

// Target mass split over the two nearest bins in symlog space; out-of-range
// targets clamp to the end bins and bump *clamped when given.
Tensor twohot_encode(const Tensor& targets, const BinGrid& grid, std::size_t* clamped = nullptr);

// Mean over batch of cross-entropy between the twohot target and softmax bins.
Var twohot_nll(Tape& t, Var logits, const Tensor& targets, const BinGrid& grid,
               std::size_t* clamped = nullptr);

// Expected value per row: symexp(sum_k softmax(logits)_k * center_k). Numeric,
// no gradients.
Tensor twohot_decode(const Tensor& logits, const BinGrid& grid);

// ---- initializers -----------------------------------------------------------

// Scaled uniform fan-in init for spiking layers.
Tensor init_uniform(Shape s, std::size_t fan_in, Rng& rng, double gain = 1.0);

}  // namespace swm
