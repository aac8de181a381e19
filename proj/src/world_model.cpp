#include "swm/world_model.hpp"

#include <cmath>
#include <sstream>
#include <utility>

#include "swm/error.hpp"

namespace swm {

namespace {

NeuronParams plumbing_lif() { return NeuronParams{}; }

Tensor slice_step(const Tensor& x, std::size_t l) {
    // [B, L, D] -> [B, D]
    const std::size_t B = x.shape.d[0], D = x.shape.d[2];
    Tensor out{Shape(B, D)};
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t d = 0; d < D; ++d) out(b, d) = x(b, l, d);
    return out;
}

Tensor slice_col(const Tensor& x, std::size_t l) {
    // [B, L] -> [B]
    const std::size_t B = x.shape.d[0];
    Tensor out{Shape(B)};
    for (std::size_t b = 0; b < B; ++b) out(b) = x(b, l);
    return out;
}

Tensor as_column(const Tensor& v) {
    // [B] -> [B, 1]
    Tensor out{Shape(v.numel(), std::size_t{1})};
    out.data = v.data;
    return out;
}

double sigmoid_value(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// LIF dynamics on a precomputed drive (conv stages have no dense weight)
struct RawLIF {
    Var u, s;
};

RawLIF raw_lif_init(Tape& t, std::size_t batch, std::size_t n) {
    return {t.leaf(Tensor::zeros(Shape(batch, n))), t.leaf(Tensor::zeros(Shape(batch, n)))};
}

RawLIF raw_lif_step(Tape& t, const RawLIF& st, Var drive, const NeuronParams& p) {
    Var u1 = t.add(st.u, t.scale(t.sub(drive, st.u), 1.0 / p.tau));
    Var s = t.spike(u1, p.v_th, p.alpha);
    Var keep = t.mul(u1, t.affine(s, -1.0, 1.0));
    Var u_next = p.v_reset == 0.0 ? keep : t.add(keep, t.scale(s, p.v_reset));
    return {u_next, s};
}

}  // namespace

void WMConfig::validate() const {
    if (obs_dim == 0) throw ParamError("wm: obs_dim must be >= 1");
    if (act_dim == 0) throw ParamError("wm: act_dim must be >= 1");
    if (latent.groups == 0 || latent.classes == 0) throw ParamError("wm: latent groups/classes must be >= 1");
    if (latent_kind != "categorical" && latent_kind != "gaussian")
        throw ParamError("wm: latent_kind must be categorical or gaussian");
    if (latent_min_std <= 0.0) throw ParamError("wm: latent_min_std must be > 0");
    if (enc_hidden == 0 || fuse_hidden == 0 || mcn_size == 0 || head_hidden == 0)
        throw ParamError("wm: layer sizes must be >= 1");
    if (ticks == 0 || head_ticks == 0) throw ParamError("wm: tick counts must be >= 1");
    if (trace_tau < 1.0) throw ParamError("wm: trace_tau must be >= 1");
    if (init_gain <= 0.0) throw ParamError("wm: init_gain must be > 0");
    if (free_nats < 0.0) throw ParamError("wm: free_nats must be >= 0");
    if (dyn_scale < 0.0 || rep_scale < 0.0) throw ParamError("wm: KL scales must be >= 0");
    if (reward_bins < 2) throw ParamError("wm: reward_bins must be >= 2");
    if (!(reward_lo < reward_hi)) throw ParamError("wm: reward_lo must be < reward_hi");
    if (image_mode && obs_dim != 256) throw ParamError("wm: image mode requires obs_dim = 256 (16x16)");
    if (image_mode && (conv_c1 == 0 || conv_c2 == 0)) throw ParamError("wm: conv channels must be >= 1");
    neuron.validate();
}

void WMBatch::validate(std::size_t obs_dim, std::size_t act_dim) const {
    if (obs.shape.rank != 3 || actions.shape.rank != 3)
        throw ContractError("batch: obs and actions must be [B, L, dim]");
    const std::size_t B = obs.shape.d[0], L = obs.shape.d[1];
    if (B == 0) throw ContractError("batch: empty");
    if (L < 2) throw ContractError("batch: sequence length must be >= 2");
    if (obs.shape.d[2] != obs_dim) throw ContractError("batch: obs dim mismatch");
    if (actions.shape.d[0] != B || actions.shape.d[1] != L || actions.shape.d[2] != act_dim)
        throw ContractError("batch: action shape mismatch");
    const Shape bl(B, L);
    if (rewards.shape != bl || continues.shape != bl || is_first.shape != bl)
        throw ContractError("batch: rewards/continues/is_first must be [B, L]");
    if (!obs.finite() || !actions.finite() || !rewards.finite())
        throw NumericError("batch: non-finite values");
    for (double c : continues.data)
        if (c != 0.0 && c != 1.0) throw ContractError("batch: continues must be 0 or 1");
    for (double f : is_first.data)
        if (f != 0.0 && f != 1.0) throw ContractError("batch: is_first must be 0 or 1");
}

namespace {
WMConfig validated(WMConfig c) {
    c.validate();
    return c;
}
}  // namespace

WorldModel::WorldModel(const WMConfig& cfg, ParamStore& store, Rng& rng)
    : cfg_(validated(cfg)),
      grid_(BinGrid::symlog_uniform(cfg_.reward_bins, cfg_.reward_lo, cfg_.reward_hi)),
      store_(&store),
      fuse_(store, "wm.fuse", cfg_.latent.flat() + cfg_.act_dim, cfg_.fuse_hidden, plumbing_lif(),
            rng, cfg_.init_gain),
      mcn_(store, "wm.mcn", cfg_.fuse_hidden, cfg_.mcn_size, cfg_.enc_out(), cfg_.neuron, rng,
           cfg_.learnable_decay, cfg_.init_gain),
      prior_head_(store, "wm.prior", cfg_.mcn_size, cfg_.latent_param_dim(), cfg_.trace_tau, rng),
      post_head_(store, "wm.post", cfg_.enc_out() + cfg_.mcn_size, cfg_.latent_param_dim(),
                 cfg_.trace_tau, rng),
      reward_body_(store, "wm.reward.body", cfg_.feat_dim(), cfg_.head_hidden, plumbing_lif(), rng,
                   cfg_.init_gain),
      continue_body_(store, "wm.continue.body", cfg_.feat_dim(), cfg_.head_hidden, plumbing_lif(),
                     rng, cfg_.init_gain),
      reward_ro_(store, "wm.reward.out", cfg_.head_hidden, std::size_t(cfg_.reward_bins),
                 cfg_.trace_tau, rng),
      continue_ro_(store, "wm.continue.out", cfg_.head_hidden, 1, cfg_.trace_tau, rng) {
    if (cfg_.image_mode) {
        enc_spec1_.in_c = 1;
        enc_spec1_.out_c = int(cfg_.conv_c1);
        enc_spec1_.h = enc_spec1_.w = 16;
        enc_spec2_.in_c = int(cfg_.conv_c1);
        enc_spec2_.out_c = int(cfg_.conv_c2);
        enc_spec2_.h = enc_spec2_.w = 8;
        const std::size_t c1 = cfg_.conv_c1, c2 = cfg_.conv_c2;
        const double g = cfg_.init_gain;
        conv1_ = store.add("wm.enc.conv1", init_uniform(Shape(c1, std::size_t(16)), 16, rng, g));
        conv2_ = store.add("wm.enc.conv2", init_uniform(Shape(c2, c1 * 16), c1 * 16, rng, g));
        dec_lin_ = store.add(
            "wm.dec.lin", init_uniform(Shape(c2 * 16, cfg_.feat_dim()), cfg_.feat_dim(), rng, g));
        dec_conv2_ = store.add("wm.dec.conv2", init_uniform(Shape(c2, c1 * 16), c2 * 16, rng, g));
        dec_conv1_ =
            store.add("wm.dec.conv1", init_uniform(Shape(c1, std::size_t(16)), c1 * 16, rng, g));
    } else {
        enc_.emplace(store, "wm.enc", cfg_.obs_dim, cfg_.enc_hidden, plumbing_lif(), rng,
                     cfg_.init_gain);
        obs_body_.emplace(store, "wm.obs.body", cfg_.feat_dim(), cfg_.head_hidden, plumbing_lif(),
                          rng, cfg_.init_gain);
        obs_ro_.emplace(store, "wm.obs.out", cfg_.head_hidden, cfg_.obs_dim, cfg_.trace_tau, rng);
    }
}

Tensor WorldModel::initial_z(std::size_t batch) const {
    Tensor z{Shape(batch, cfg_.latent.flat())};
    if (cfg_.categorical()) z.fill(1.0 / double(cfg_.latent.classes));
    return z;
}

WorldModelState WorldModel::initial_state(std::size_t batch) const {
    if (batch == 0) throw ContractError("initial_state: batch must be >= 1");
    WorldModelState s;
    s.mcn.v_basal = Tensor::zeros(Shape(batch, cfg_.mcn_size));
    s.mcn.v_apical = s.mcn.v_basal;
    s.mcn.u = s.mcn.v_basal;
    s.mcn.s = s.mcn.v_basal;
    s.z = initial_z(batch);
    Tensor feat{Shape(batch, cfg_.feat_dim())};
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < cfg_.latent.flat(); ++j)
            feat(b, cfg_.mcn_size + j) = s.z(b, j);
    s.feat = std::move(feat);
    s.step_index = 0;
    return s;
}

WorldModel::TapedState WorldModel::restore(Tape& t, const WorldModelState& s) const {
    TapedState out;
    out.mcn = mcn_.restore(t, s.mcn);
    out.z = t.leaf(s.z);
    out.feat = t.leaf(s.feat);
    return out;
}

WorldModelState WorldModel::snapshot(const Tape& t, const TapedState& s,
                                     long long step_index) const {
    WorldModelState out;
    out.mcn = MCNLayer::snapshot(t, s.mcn);
    out.z = t.val(s.z);
    out.feat = t.val(s.feat);
    out.step_index = step_index;
    return out;
}

WorldModel::TapedState WorldModel::initial_taped(Tape& t, std::size_t batch) const {
    return restore(t, initial_state(batch));
}

Var WorldModel::sample_latent(Tape& t, Var logits, Rng& rng) const {
    // content-keyed draws keep batch means invariant under row duplication
    std::uint64_t base = rng.next_u64();
    if (cfg_.categorical()) return latent_sample_keyed(t, logits, cfg_.latent, base);
    return gauss_latent_sample_keyed(t, logits, cfg_.latent.flat(), base, cfg_.latent_min_std)
        .sample;
}

Var WorldModel::kl_latent(Tape& t, Var q_logits, Var p_logits) const {
    if (cfg_.categorical()) return kl_categorical(t, q_logits, p_logits, cfg_.latent, cfg_.free_nats);
    return kl_gaussian_diag(t, q_logits, p_logits, cfg_.latent.flat(), cfg_.latent_min_std,
                            cfg_.free_nats);
}

WorldModel::StepTrace WorldModel::step_backbone(Tape& t, const Binding& b, const MCNState& mcn_in,
                                                Var z_prev, Var a_prev, const Var* obs) const {
    const std::size_t B = t.val(z_prev).shape.d[0];
    const NeuronParams pp = plumbing_lif();
    Var fuse_in = t.concat(z_prev, a_prev);
    LIFState fuse_st = fuse_.initial(t, B);
    MCNState m = mcn_in;
    Var trace_h = t.leaf(Tensor::zeros(Shape(B, cfg_.mcn_size)));
    Var prior_y = prior_head_.initial(t, B);
    Var post_y;

    LIFState enc_st;
    RawLIF e1, e2;
    Var img_drive1;
    Var zero_soma;
    if (obs) {
        post_y = post_head_.initial(t, B);
        if (cfg_.image_mode) {
            e1 = raw_lif_init(t, B, cfg_.conv_c1 * 64);
            e2 = raw_lif_init(t, B, cfg_.conv_c2 * 16);
            img_drive1 = t.conv2d(*obs, b[conv1_], enc_spec1_);
        } else {
            enc_st = enc_->initial(t, B);
        }
    } else {
        zero_soma = t.leaf(Tensor::zeros(Shape(B, cfg_.enc_out())));
    }

    for (std::size_t k = 0; k < cfg_.ticks; ++k) {
        fuse_st = fuse_.step(t, b, fuse_st, fuse_in);
        Var s_ob;
        if (obs) {
            if (cfg_.image_mode) {
                e1 = raw_lif_step(t, e1, img_drive1, pp);
                e2 = raw_lif_step(t, e2, t.conv2d(e1.s, b[conv2_], enc_spec2_), pp);
                s_ob = e2.s;
            } else {
                enc_st = enc_->step(t, b, enc_st, *obs);
                s_ob = enc_st.s;
            }
        } else {
            s_ob = zero_soma;
        }
        m = mcn_.step(t, b, m, fuse_st.s, s_ob);
        if (tick_sink_) {
            TickTrace tk;
            tk.v_basal = t.val(m.v_basal);
            tk.v_apical = t.val(m.v_apical);
            tk.u = t.val(m.u);
            tk.z_gate = mcn_.gate_values(t, m);
            tk.spike = t.val(m.s);
            tick_sink_->push_back(std::move(tk));
        }
        trace_h = trace_step(t, trace_h, m.s, cfg_.trace_tau);
        prior_y = prior_head_.step(t, b, prior_y, m.s);
        if (obs) post_y = post_head_.step(t, b, post_y, t.concat(s_ob, m.s));
    }

    StepTrace out;
    out.mcn = m;
    out.trace_h = trace_h;
    out.prior_logits = prior_y;
    out.post_logits = post_y;
    return out;
}

WorldModel::TapedState WorldModel::assemble(Tape& t, const StepTrace& st, Var z) const {
    TapedState out;
    out.mcn = st.mcn;
    out.z = z;
    out.feat = t.concat(st.trace_h, z);
    return out;
}

WorldModel::TapedState WorldModel::observe_core(Tape& t, const Binding& b, const TapedState& prev,
                                                Var a_prev, Var obs, Rng& rng, Var* post_logits,
                                                Var* prior_logits) const {
    StepTrace st = step_backbone(t, b, prev.mcn, prev.z, a_prev, &obs);
    if (post_logits) *post_logits = st.post_logits;
    if (prior_logits) *prior_logits = st.prior_logits;
    return assemble(t, st, sample_latent(t, st.post_logits, rng));
}

WorldModel::TapedState WorldModel::imagine_core(Tape& t, const Binding& b, const TapedState& prev,
                                                Var action, Rng& rng) const {
    StepTrace st = step_backbone(t, b, prev.mcn, prev.z, action, nullptr);
    return assemble(t, st, sample_latent(t, st.prior_logits, rng));
}

Var WorldModel::head_body(Tape& t, const Binding& b, const LIFDenseLayer& body,
                          const ReadoutLayer& ro, Var feat) const {
    const std::size_t B = t.val(feat).shape.d[0];
    LIFState st = body.initial(t, B);
    Var y = ro.initial(t, B);
    for (std::size_t k = 0; k < cfg_.head_ticks; ++k) {
        st = body.step(t, b, st, feat);
        y = ro.step(t, b, y, st.s);
    }
    return y;
}

Var WorldModel::decode_obs(Tape& t, const Binding& b, Var feat) const {
    if (!cfg_.image_mode) return head_body(t, b, *obs_body_, *obs_ro_, feat);
    const std::size_t B = t.val(feat).shape.d[0];
    const NeuronParams pp = plumbing_lif();
    Var drive1 = t.linear(feat, b[dec_lin_]);  // [B, c2*16]
    RawLIF d1 = raw_lif_init(t, B, cfg_.conv_c2 * 16);
    RawLIF d2 = raw_lif_init(t, B, cfg_.conv_c1 * 64);
    Var px_trace = t.leaf(Tensor::zeros(Shape(B, std::size_t(256))));
    for (std::size_t k = 0; k < cfg_.head_ticks; ++k) {
        d1 = raw_lif_step(t, d1, drive1, pp);
        d2 = raw_lif_step(t, d2, t.conv2d_t(d1.s, b[dec_conv2_], enc_spec2_), pp);
        Var px = t.conv2d_t(d2.s, b[dec_conv1_], enc_spec1_);
        px_trace = trace_step(t, px_trace, px, cfg_.trace_tau);
    }
    return px_trace;
}

WorldModel::TapedHeads WorldModel::heads_core(Tape& t, const Binding& b, Var feat) const {
    TapedHeads out;
    out.reward_logits = head_body(t, b, reward_body_, reward_ro_, feat);
    out.continue_logit = head_body(t, b, continue_body_, continue_ro_, feat);
    out.obs_mean = decode_obs(t, b, feat);
    return out;
}

ObserveResult WorldModel::observe_step(const WorldModelState& prev, const Tensor& a_prev,
                                       const Tensor& obs, Rng& rng) const {
    if (!obs.finite()) throw NumericError("observe_step: non-finite observation");
    if (!a_prev.finite()) throw NumericError("observe_step: non-finite action");
    Tape t;
    Binding b(t, *store_);
    TapedState p = restore(t, prev);
    Var post, prior;
    TapedState next = observe_core(t, b, p, t.leaf(a_prev), t.leaf(obs), rng, &post, &prior);
    ObserveResult r;
    r.state = snapshot(t, next, prev.step_index + 1);
    r.post_logits = t.val(post);
    r.prior_logits = t.val(prior);
    return r;
}

ObserveResult WorldModel::observe_step_traced(const WorldModelState& prev, const Tensor& a_prev,
                                              const Tensor& obs, Rng& rng,
                                              std::vector<TickTrace>& ticks) const {
    tick_sink_ = &ticks;
    try {
        ObserveResult r = observe_step(prev, a_prev, obs, rng);
        tick_sink_ = nullptr;
        return r;
    } catch (...) {
        tick_sink_ = nullptr;
        throw;
    }
}

WorldModelState WorldModel::imagine_step(const WorldModelState& state, const Tensor& action,
                                         Rng& rng) const {
    if (!action.finite()) throw NumericError("imagine_step: non-finite action");
    Tape t;
    Binding b(t, *store_);
    TapedState p = restore(t, state);
    TapedState next = imagine_core(t, b, p, t.leaf(action), rng);
    return snapshot(t, next, state.step_index + 1);
}

HeadPrediction WorldModel::predict_heads(const WorldModelState& state) const {
    Tape t;
    Binding b(t, *store_);
    TapedHeads h = heads_core(t, b, t.leaf(state.feat));
    HeadPrediction out;
    out.reward_logits = t.val(h.reward_logits);
    out.reward_mean = twohot_decode(out.reward_logits, grid_);
    const Tensor& cl = t.val(h.continue_logit);
    Tensor prob{Shape(cl.shape.d[0])};
    for (std::size_t i = 0; i < prob.numel(); ++i) prob(i) = sigmoid_value(cl.data[i]);
    out.continue_prob = std::move(prob);
    out.obs_mean = t.val(h.obs_mean);
    return out;
}

std::vector<Tensor> WorldModel::fuse_prev(const Tensor& z_prev, const Tensor& a_prev) const {
    Tape t;
    Binding b(t, *store_);
    Var in = t.concat(t.leaf(z_prev), t.leaf(a_prev));
    LIFState st = fuse_.initial(t, z_prev.shape.d[0]);
    std::vector<Tensor> out;
    out.reserve(cfg_.ticks);
    for (std::size_t k = 0; k < cfg_.ticks; ++k) {
        st = fuse_.step(t, b, st, in);
        out.push_back(t.val(st.s));
    }
    return out;
}

void WorldModel::apply_first(WorldModelState& s, const Tensor& first) const {
    const std::size_t B = s.batch();
    if (first.numel() != B) throw ContractError("apply_first: flag count != batch");
    WorldModelState init = initial_state(B);
    auto reset_rows = [&](Tensor& dst, const Tensor& src) {
        const std::size_t n = dst.shape.last();
        for (std::size_t b = 0; b < B; ++b) {
            if (first.data[b] == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) dst(b, j) = src(b, j);
        }
    };
    reset_rows(s.mcn.v_basal, init.mcn.v_basal);
    reset_rows(s.mcn.v_apical, init.mcn.v_apical);
    reset_rows(s.mcn.u, init.mcn.u);
    reset_rows(s.mcn.s, init.mcn.s);
    reset_rows(s.z, init.z);
    reset_rows(s.feat, init.feat);
}

WorldModelState gather_rows(const std::vector<WorldModelState>& states,
                            const std::vector<std::pair<std::size_t, std::size_t>>& picks) {
    if (states.empty() || picks.empty()) throw ContractError("gather_rows: nothing to gather");
    const std::size_t N = picks.size();
    auto gather = [&](auto pick_field) {
        const Tensor& proto = pick_field(states[0]);
        Tensor out{Shape(N, proto.shape.last())};
        for (std::size_t i = 0; i < N; ++i) {
            const auto& [si, row] = picks[i];
            const Tensor& src = pick_field(states.at(si));
            if (row >= src.shape.d[0]) throw ContractError("gather_rows: row out of range");
            for (std::size_t j = 0; j < out.shape.last(); ++j) out(i, j) = src(row, j);
        }
        return out;
    };
    WorldModelState out;
    out.mcn.v_basal = gather([](const WorldModelState& s) -> const Tensor& { return s.mcn.v_basal; });
    out.mcn.v_apical = gather([](const WorldModelState& s) -> const Tensor& { return s.mcn.v_apical; });
    out.mcn.u = gather([](const WorldModelState& s) -> const Tensor& { return s.mcn.u; });
    out.mcn.s = gather([](const WorldModelState& s) -> const Tensor& { return s.mcn.s; });
    out.z = gather([](const WorldModelState& s) -> const Tensor& { return s.z; });
    out.feat = gather([](const WorldModelState& s) -> const Tensor& { return s.feat; });
    out.step_index = states[0].step_index;
    return out;
}

WorldModel::TapedState WorldModel::mask_reset(Tape& t, const TapedState& s,
                                              const Tensor& first) const {
    const std::size_t B = first.shape.d[0];
    auto keep_mask = [&](std::size_t n) {
        Tensor m{Shape(B, n)};
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < n; ++j) m(b, j) = 1.0 - first(b);
        return m;
    };
    Var keep_n = t.leaf(keep_mask(cfg_.mcn_size));
    TapedState out;
    out.mcn.v_basal = t.mul(s.mcn.v_basal, keep_n);
    out.mcn.v_apical = t.mul(s.mcn.v_apical, keep_n);
    out.mcn.u = t.mul(s.mcn.u, keep_n);
    out.mcn.s = t.mul(s.mcn.s, keep_n);
    Tensor z0 = initial_z(B);
    Tensor inject{Shape(B, cfg_.latent.flat())};
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < cfg_.latent.flat(); ++j) inject(b, j) = first(b) * z0(b, j);
    out.z = t.add(t.mul(s.z, t.leaf(keep_mask(cfg_.latent.flat()))), t.leaf(std::move(inject)));
    out.feat = s.feat;  // rebuilt by the next step; carried for shape only
    return out;
}

WorldModel::LossResult WorldModel::wm_loss(Tape& t, const Binding& b, const WMBatch& batch,
                                           Rng& rng) const {
    batch.validate(cfg_.obs_dim, cfg_.act_dim);
    const std::size_t B = batch.batch(), L = batch.length();
    TapedState cur = initial_taped(t, B);
    Var obs_sum, rew_sum, cont_sum, dyn_sum, rep_sum;
    for (std::size_t l = 0; l < L; ++l) {
        Tensor obs_l = slice_step(batch.obs, l);
        Tensor act_l = slice_step(batch.actions, l);
        Tensor rew_l = slice_col(batch.rewards, l);
        Tensor cont_l = as_column(slice_col(batch.continues, l));
        Tensor first_l = slice_col(batch.is_first, l);
        bool any_first = false;
        for (double f : first_l.data) any_first = any_first || f != 0.0;
        if (l > 0 && any_first) cur = mask_reset(t, cur, first_l);

        Var post, prior;
        cur = observe_core(t, b, cur, t.leaf(act_l), t.leaf(obs_l), rng, &post, &prior);
        TapedHeads hp = heads_core(t, b, cur.feat);

        Var lo = gaussian_nll(t, hp.obs_mean, obs_l);
        Var lr = twohot_nll(t, hp.reward_logits, rew_l, grid_);
        Var lc = bernoulli_nll(t, hp.continue_logit, cont_l);
        Var dyn, rep;
        if (cfg_.single_kl) {
            dyn = kl_latent(t, post, prior);
            rep = t.scalar(0.0);
        } else {
            dyn = kl_latent(t, t.detach(post), prior);
            rep = kl_latent(t, post, t.detach(prior));
        }
        if (l == 0) {
            obs_sum = lo;
            rew_sum = lr;
            cont_sum = lc;
            dyn_sum = dyn;
            rep_sum = rep;
        } else {
            obs_sum = t.add(obs_sum, lo);
            rew_sum = t.add(rew_sum, lr);
            cont_sum = t.add(cont_sum, lc);
            dyn_sum = t.add(dyn_sum, dyn);
            rep_sum = t.add(rep_sum, rep);
        }
    }
    const double inv_l = 1.0 / double(L);
    Var pred_obs = t.scale(obs_sum, inv_l);
    Var pred_reward = t.scale(rew_sum, inv_l);
    Var pred_continue = t.scale(cont_sum, inv_l);
    Var dyn_kl = t.scale(dyn_sum, inv_l);
    Var rep_kl = t.scale(rep_sum, inv_l);

    Var total = t.add(pred_obs, t.add(pred_reward, pred_continue));
    if (cfg_.single_kl) {
        total = t.add(total, dyn_kl);
    } else {
        total = t.add(total, t.add(t.scale(dyn_kl, cfg_.dyn_scale), t.scale(rep_kl, cfg_.rep_scale)));
    }

    LossResult res;
    res.total = total;
    res.components["pred_obs"] = t.val(pred_obs).item();
    res.components["pred_reward"] = t.val(pred_reward).item();
    res.components["pred_continue"] = t.val(pred_continue).item();
    res.components["dyn_kl"] = t.val(dyn_kl).item();
    res.components["rep_kl"] = t.val(rep_kl).item();
    if (!std::isfinite(t.val(total).item())) {
        std::ostringstream msg;
        msg << "world-model loss non-finite:";
        for (const auto& [k, v] : res.components) msg << ' ' << k << '=' << v;
        throw NumericError(msg.str());
    }
    return res;
}

std::map<std::string, double> WorldModel::train_step(ParamStore& store, Adam& opt,
                                                     const WMBatch& batch, Rng& rng) const {
    if (&store != store_) throw ContractError("train_step: store is not the model's parameter store");
    Tape t;
    Binding b(t, store);
    LossResult res = wm_loss(t, b, batch, rng);
    std::map<std::string, double> metrics = res.components;
    metrics["loss"] = t.val(res.total).item();
    t.backward(res.total);
    opt.step(store, b.grads());
    metrics["grad_norm"] = opt.last_grad_norm();
    return metrics;
}

}  // namespace swm
