#pragma once

#include <map>
#include <string>
#include <vector>

#include "swm/layers.hpp"
#include "swm/neuron.hpp"
#include "swm/optimizer.hpp"
#include "swm/rng.hpp"
#include "swm/world_model.hpp"

namespace swm {

struct AgentConfig {
    std::size_t feat_dim = 0;  // must match the world model's feature width
    std::size_t act_dim = 1;   // action dims, or number of choices when discrete
    bool discrete = false;
    std::size_t hidden = 48;  // LIF body width
    std::size_t ticks = 4;    // body ticks per decision
    double trace_tau = 2.0;
    double init_gain = 2.0;
    NeuronParams neuron;
    double min_std = 0.1;  // stddev floor before squashing
    double eta = 3e-4;     // entropy bonus weight
    std::size_t horizon = 15;
    double gamma = 0.997;
    double lambda = 0.95;
    double retnorm_decay = 0.99;   // EMA of the return 5th-95th percentile range
    std::size_t imag_starts = 32;  // posterior states sampled per train step
    int value_bins = 41;
    double value_lo = -20.0, value_hi = 20.0;
    AdamConfig actor_opt{.lr = 3e-5};
    AdamConfig critic_opt{.lr = 3e-5};

    void validate() const;
};

struct PolicyOutput {
    Tensor mean, stddev;  // squashed mean and base stddev [B, act_dim]
    Tensor logits;        // [B, act_dim] when discrete
    Tensor action;        // [B, act_dim]: tanh-squashed values, or a one-hot row
    Tensor pre_squash;    // [B, act_dim] pre-tanh sample (continuous only)
    Tensor log_prob;      // [B]
};

// Spiking policy head: LIF body integrating world-model features, leaky
// readout to distribution parameters. Owns its parameters.
class PolicyNet {
public:
    PolicyNet(const AgentConfig& cfg, Rng& rng);

    ParamStore& store() { return store_; }
    const ParamStore& store() const { return store_; }

    // body + readout over a batch of feature rows -> distribution parameters
    // ([B, 2*act_dim] continuous: means then raw stddevs; [B, act_dim] discrete)
    Var params(Tape& t, const Binding& b, Var feat) const;

    PolicyOutput act(const Tensor& feat, bool explore, Rng& rng) const;

    // log-probability [B] and entropy [B] of recorded actions under params;
    // continuous actions are identified by their pre-squash values
    struct Eval {
        Var log_prob, entropy;
    };
    Eval evaluate(Tape& t, Var params, const Tensor& action, const Tensor& pre_squash) const;

    const AgentConfig& config() const { return cfg_; }

private:
    AgentConfig cfg_;
    ParamStore store_;
    LIFDenseLayer body_;
    ReadoutLayer out_;
};

// Spiking value head with twohot discrete regression over a symlog bin grid.
class ValueNet {
public:
    ValueNet(const AgentConfig& cfg, Rng& rng);

    ParamStore& store() { return store_; }
    const ParamStore& store() const { return store_; }
    const BinGrid& grid() const { return grid_; }

    Var logits(Tape& t, const Binding& b, Var feat) const;
    // expected value per row under the bin distribution
    Tensor values(const Tensor& feat) const;

private:
    AgentConfig cfg_;
    BinGrid grid_;
    ParamStore store_;
    LIFDenseLayer body_;
    ReadoutLayer out_;
};

// Trajectory dreamed from posterior start states. rewards/continues hold the
// head outputs for each transition; values come from the critic.
struct ImaginedRollout {
    std::vector<WorldModelState> states;  // H+1
    std::vector<Tensor> actions;          // H, each [N, act_dim]
    std::vector<Tensor> pre_actions;      // H (continuous policies only)
    std::vector<Tensor> rewards;          // H, each [N]
    std::vector<Tensor> continues;        // H, each [N], in [0, 1]
    std::vector<Tensor> values;           // H+1, each [N]

    std::size_t batch() const { return states.empty() ? 0 : states[0].batch(); }
    std::size_t horizon() const { return actions.size(); }
    void validate() const;
};

ImaginedRollout imagine(const PolicyNet& actor, const ValueNet& critic, const WorldModel& wm,
                        const WorldModelState& start, std::size_t H, Rng& rng);

// Backward recursion R^h = r^h + gamma*c^h*((1-lambda)*v^{h+1} + lambda*R^{h+1})
// with boundary R^H = v^H. values has one more entry than rewards/continues.
std::vector<double> lambda_returns(const std::vector<double>& rewards,
                                   const std::vector<double>& continues,
                                   const std::vector<double>& values, double gamma, double lambda);
std::vector<Tensor> lambda_returns(const ImaginedRollout& ro, double gamma, double lambda);

// REINFORCE coefficients w_h * (R^h - v^h) / scale where w is the cumulative
// continue product (w_0 = 1). Signs survive any positive rescaling.
std::vector<Tensor> advantage_coeffs(const ImaginedRollout& ro,
                                     const std::vector<Tensor>& returns, double scale);

struct ActorLossResult {
    Var loss;
    Var entropy_mean;
};
ActorLossResult actor_loss(Tape& t, const Binding& b, const PolicyNet& actor,
                           const ImaginedRollout& ro, const std::vector<Tensor>& returns,
                           double scale, double eta);

// twohot NLL of stop-grad returns, weighted by cumulative continue products.
Var critic_loss(Tape& t, const Binding& b, const ValueNet& critic, const ImaginedRollout& ro,
                const std::vector<Tensor>& returns);

// interpolated percentile of a sample, p in [0, 100]
double percentile(std::vector<double> xs, double p);

// Actor-critic trained purely inside the world model's imagination. Holds its
// own parameter stores and optimizers; never touches world-model parameters.
class Agent {
public:
    Agent(const AgentConfig& cfg, Rng& rng);

    const AgentConfig& config() const { return cfg_; }
    PolicyNet& actor() { return actor_; }
    const PolicyNet& actor() const { return actor_; }
    ValueNet& critic() { return critic_; }
    const ValueNet& critic() const { return critic_; }
    Adam& actor_opt() { return actor_opt_; }
    Adam& critic_opt() { return critic_opt_; }

    double retnorm_ema() const { return retnorm_ema_; }
    void set_retnorm_ema(double v) { retnorm_ema_ = v; }
    double return_scale() const { return retnorm_ema_ < 1.0 ? 1.0 : retnorm_ema_; }

    // posterior unroll over the replay window, imagination from sampled start
    // states, lambda-returns, one actor and one critic update
    std::map<std::string, double> train_step(const WorldModel& wm, const WMBatch& batch, Rng& rng);

private:
    AgentConfig cfg_;
    PolicyNet actor_;
    ValueNet critic_;
    Adam actor_opt_, critic_opt_;
    double retnorm_ema_ = 0.0;
};

}  // namespace swm
