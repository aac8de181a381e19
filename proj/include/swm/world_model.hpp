#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "swm/layers.hpp"
#include "swm/neuron.hpp"
#include "swm/optimizer.hpp"
#include "swm/rng.hpp"

namespace swm {

// Replay window: obs [B,L,obs_dim], actions [B,L,act_dim] (action that led
// INTO each observation; zero at episode start), rewards/continues [B,L]
// aligned the same way, is_first [B,L] flags episode starts.
struct WMBatch {
    Tensor obs, actions, rewards, continues, is_first;

    std::size_t batch() const { return obs.shape.d[0]; }
    std::size_t length() const { return obs.shape.d[1]; }
    void validate(std::size_t obs_dim, std::size_t act_dim) const;
};

struct WMConfig {
    std::size_t obs_dim = 3;
    std::size_t act_dim = 1;
    LatentSpec latent;               // grouped categorical z
    std::string latent_kind = "categorical";  // or "gaussian"
    double latent_min_std = 0.1;
    std::size_t enc_hidden = 32;     // observation encoder LIF size
    std::size_t fuse_hidden = 32;    // (z, action) fusion LIF size
    std::size_t mcn_size = 48;       // recurrent backbone
    std::size_t head_hidden = 32;    // LIF body size of each predictor head
    std::size_t ticks = 8;           // spiking ticks per env step
    std::size_t head_ticks = 4;      // ticks of each head body
    double trace_tau = 2.0;          // leaky trace feeding readouts
    double init_gain = 2.0;          // spiking-layer init scale (keeps drives near threshold)
    NeuronParams neuron;             // backbone biophysics
    bool learnable_decay = false;
    double free_nats = 1.0;          // per latent group
    double dyn_scale = 0.5;          // KL(sg(post) || prior) weight
    double rep_scale = 0.1;          // KL(post || sg(prior)) weight
    bool single_kl = false;          // literal single-KL ablation
    int reward_bins = 41;
    double reward_lo = -20.0, reward_hi = 20.0;

    // 16x16 single-channel image observations through a spiking conv
    // encoder / transposed-conv decoder instead of the dense pipeline
    bool image_mode = false;

    // conv stack in image mode: 1x16x16 -> c1x8x8 -> c2x4x4
    std::size_t conv_c1 = 4, conv_c2 = 8;

    bool categorical() const { return latent_kind == "categorical"; }
    std::size_t latent_param_dim() const {
        return categorical() ? latent.flat() : 2 * latent.flat();
    }
    std::size_t enc_out() const { return image_mode ? conv_c2 * 4 * 4 : enc_hidden; }
    std::size_t feat_dim() const { return mcn_size + latent.flat(); }
    void validate() const;
};

// Numeric (off-tape) recurrent state carried between env steps.
struct WorldModelState {
    MCNStateValue mcn;
    Tensor z;     // [B, groups*classes]; probabilities or a one-hot sample
    Tensor feat;  // [B, feat_dim] features of the step that produced this state
    long long step_index = 0;

    std::size_t batch() const { return z.shape.d[0]; }
};

struct HeadPrediction {
    Tensor reward_logits;  // [B, reward_bins]
    Tensor reward_mean;    // [B]
    Tensor continue_prob;  // [B]
    Tensor obs_mean;       // [B, obs_dim]
};

struct ObserveResult {
    WorldModelState state;
    Tensor post_logits, prior_logits;  // [B, latent_param_dim]
};

class WorldModel {
public:
    WorldModel(const WMConfig& cfg, ParamStore& store, Rng& rng);

    const WMConfig& config() const { return cfg_; }
    const BinGrid& reward_grid() const { return grid_; }
    const ParamStore& store() const { return *store_; }

    WorldModelState initial_state(std::size_t batch) const;

    // numeric API: each call runs a private tape, no gradients kept
    ObserveResult observe_step(const WorldModelState& prev, const Tensor& a_prev,
                               const Tensor& obs, Rng& rng) const;
    // backbone internals at each of the cfg.ticks sub-steps of one observed step;
    // all tensors [B, mcn_size], spike rows are post-reset state
    struct TickTrace {
        Tensor v_basal, v_apical, u, z_gate, spike;
    };
    ObserveResult observe_step_traced(const WorldModelState& prev, const Tensor& a_prev,
                                      const Tensor& obs, Rng& rng,
                                      std::vector<TickTrace>& ticks) const;
    WorldModelState imagine_step(const WorldModelState& state, const Tensor& action,
                                 Rng& rng) const;
    HeadPrediction predict_heads(const WorldModelState& state) const;

    // rewrite rows flagged in first [B] (or [B,1]) back to the initial state
    void apply_first(WorldModelState& s, const Tensor& first) const;

    // spike train emitted by the fusion layer for a (z, action) input
    // (diagnostics; ticks-major list of [B, fuse_hidden] spike tensors)
    std::vector<Tensor> fuse_prev(const Tensor& z_prev, const Tensor& a_prev) const;

    // ---- taped core, shared by the numeric API and the losses ----
    struct TapedState {
        MCNState mcn;
        Var z;
        Var feat;
    };
    TapedState restore(Tape& t, const WorldModelState& s) const;
    WorldModelState snapshot(const Tape& t, const TapedState& s, long long step_index) const;

    TapedState initial_taped(Tape& t, std::size_t batch) const;
    // one env step with an observation; emits posterior/prior logits
    TapedState observe_core(Tape& t, const Binding& b, const TapedState& prev, Var a_prev,
                            Var obs, Rng& rng, Var* post_logits, Var* prior_logits) const;
    // one env step from the prior, no observation
    TapedState imagine_core(Tape& t, const Binding& b, const TapedState& prev, Var action,
                            Rng& rng) const;
    struct TapedHeads {
        Var reward_logits;   // [B, reward_bins]
        Var continue_logit;  // [B, 1]
        Var obs_mean;        // [B, obs_dim]
    };
    TapedHeads heads_core(Tape& t, const Binding& b, Var feat) const;

    struct LossResult {
        Var total;
        std::map<std::string, double> components;
    };
    LossResult wm_loss(Tape& t, const Binding& b, const WMBatch& batch, Rng& rng) const;

    std::map<std::string, double> train_step(ParamStore& store, Adam& opt, const WMBatch& batch,
                                             Rng& rng) const;

private:
    // shared recurrent update: runs the fusion layer, encoder (when observing)
    // and backbone for one env step; logits sampled at the last tick
    struct StepTrace {
        MCNState mcn;
        Var trace_h;  // [B, mcn_size] leaky spike trace of S^h
        Var prior_logits;
        Var post_logits;  // invalid when imagining
    };
    StepTrace step_backbone(Tape& t, const Binding& b, const MCNState& mcn, Var z_prev,
                            Var a_prev, const Var* obs) const;
    Var head_body(Tape& t, const Binding& b, const LIFDenseLayer& body, const ReadoutLayer& ro,
                  Var feat) const;
    Var decode_obs(Tape& t, const Binding& b, Var feat) const;
    TapedState assemble(Tape& t, const StepTrace& st, Var z) const;
    Var sample_latent(Tape& t, Var logits, Rng& rng) const;
    Var kl_latent(Tape& t, Var q_logits, Var p_logits) const;
    Tensor initial_z(std::size_t batch) const;
    TapedState mask_reset(Tape& t, const TapedState& s, const Tensor& first) const;

    WMConfig cfg_;
    BinGrid grid_;
    const ParamStore* store_;
    mutable std::vector<TickTrace>* tick_sink_ = nullptr;  // set only inside observe_step_traced
    std::optional<LIFDenseLayer> enc_;  // dense mode obs -> S^ob
    LIFDenseLayer fuse_;                // (z, a) -> S^in
    MCNLayer mcn_;                      // backbone
    ReadoutLayer prior_head_, post_head_;
    LIFDenseLayer reward_body_, continue_body_;
    ReadoutLayer reward_ro_, continue_ro_;
    std::optional<LIFDenseLayer> obs_body_;  // dense mode decoder
    std::optional<ReadoutLayer> obs_ro_;
    // image mode weights
    ParamRef conv1_, conv2_, dec_lin_, dec_conv1_, dec_conv2_;
    Conv2dSpec enc_spec1_, enc_spec2_;
};

// Assemble a new state whose row i is row picks[i].second of state
// picks[i].first. All source states must share their tensor shapes.
WorldModelState gather_rows(const std::vector<WorldModelState>& states,
                            const std::vector<std::pair<std::size_t, std::size_t>>& picks);

}  // namespace swm
