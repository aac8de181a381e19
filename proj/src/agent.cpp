#include "swm/agent.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "swm/error.hpp"

namespace swm {

namespace {

constexpr double kSquashEps = 1e-6;
const double kLn2Pi = std::log(2.0 * std::numbers::pi);

AgentConfig validated(AgentConfig c) {
    c.validate();
    return c;
}

std::size_t param_dim(const AgentConfig& c) { return c.discrete ? c.act_dim : 2 * c.act_dim; }

double softplus_value(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

// stable per-row log-normalizer of a logits row
double log_sum_exp(const Tensor& p, std::size_t row, std::size_t n) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) m = std::max(m, p(row, j));
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(p(row, j) - m);
    return m + std::log(s);
}

Tensor stack_rows(const std::vector<Tensor>& parts) {
    const std::size_t H = parts.size();
    const std::size_t N = parts[0].shape.d[0];
    const std::size_t D = parts[0].shape.rank == 2 ? parts[0].shape.last() : 1;
    Tensor out{parts[0].shape.rank == 2 ? Shape(H * N, D) : Shape(H * N)};
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < N * D; ++i) out.data[h * N * D + i] = parts[h].data[i];
    return out;
}

Tensor stack_feats(const ImaginedRollout& ro) {
    std::vector<Tensor> feats;
    feats.reserve(ro.horizon());
    for (std::size_t h = 0; h < ro.horizon(); ++h) feats.push_back(ro.states[h].feat);
    return stack_rows(feats);
}

// w_h = prod_{j<h} continues[j], one row weight per (h, n), stacked h-major
Tensor continue_weights(const ImaginedRollout& ro) {
    const std::size_t H = ro.horizon(), N = ro.batch();
    Tensor out{Shape(H * N)};
    std::vector<double> w(N, 1.0);
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t n = 0; n < N; ++n) {
            out.data[h * N + n] = w[n];
            w[n] *= ro.continues[h](n);
        }
    }
    return out;
}

}  // namespace

void AgentConfig::validate() const {
    if (feat_dim == 0) throw ParamError("agent: feat_dim must be set");
    if (act_dim == 0) throw ParamError("agent: act_dim must be >= 1");
    if (hidden == 0 || ticks == 0) throw ParamError("agent: body size and ticks must be >= 1");
    if (trace_tau < 1.0) throw ParamError("agent: trace_tau must be >= 1");
    if (min_std <= 0.0) throw ParamError("agent: min_std must be positive");
    if (eta < 0.0) throw ParamError("agent: eta must be >= 0");
    if (horizon == 0) throw ParamError("agent: horizon must be >= 1");
    if (gamma <= 0.0 || gamma > 1.0) throw ParamError("agent: gamma must be in (0, 1]");
    if (lambda < 0.0 || lambda > 1.0) throw ParamError("agent: lambda must be in [0, 1]");
    if (retnorm_decay < 0.0 || retnorm_decay >= 1.0)
        throw ParamError("agent: retnorm_decay must be in [0, 1)");
    if (imag_starts == 0) throw ParamError("agent: imag_starts must be >= 1");
    if (value_bins < 2 || value_lo >= value_hi) throw ParamError("agent: bad value bin grid");
    neuron.validate();
}

PolicyNet::PolicyNet(const AgentConfig& cfg, Rng& rng)
    : cfg_(validated(cfg)),
      body_(store_, "actor.body", cfg_.feat_dim, cfg_.hidden, cfg_.neuron, rng, cfg_.init_gain),
      out_(store_, "actor.out", cfg_.hidden, param_dim(cfg_), cfg_.trace_tau, rng) {}

Var PolicyNet::params(Tape& t, const Binding& b, Var feat) const {
    const std::size_t B = t.val(feat).shape.d[0];
    LIFState st = body_.initial(t, B);
    Var y = out_.initial(t, B);
    for (std::size_t k = 0; k < cfg_.ticks; ++k) {
        st = body_.step(t, b, st, feat);
        y = out_.step(t, b, y, st.s);
    }
    return y;
}

PolicyOutput PolicyNet::act(const Tensor& feat, bool explore, Rng& rng) const {
    if (feat.shape.rank != 2 || feat.shape.last() != cfg_.feat_dim)
        throw ContractError("act: feature shape mismatch");
    Tape t;
    Binding b(t, store_);
    Var pv = params(t, b, t.leaf(feat));
    const Tensor& p = t.val(pv);
    const std::size_t B = feat.shape.d[0], A = cfg_.act_dim;

    PolicyOutput out;
    out.action = Tensor{Shape(B, A)};
    out.log_prob = Tensor{Shape(B)};
    if (cfg_.discrete) {
        out.logits = p;
        for (std::size_t i = 0; i < B; ++i) {
            const double lse = log_sum_exp(p, i, A);
            std::size_t pick = A - 1;
            if (explore) {
                double u = rng.uniform(), cum = 0.0;
                for (std::size_t j = 0; j < A; ++j) {
                    cum += std::exp(p(i, j) - lse);
                    if (u < cum) {
                        pick = j;
                        break;
                    }
                }
            } else {
                pick = 0;
                for (std::size_t j = 1; j < A; ++j)
                    if (p(i, j) > p(i, pick)) pick = j;
            }
            out.action(i, pick) = 1.0;
            out.log_prob(i) = p(i, pick) - lse;
        }
        return out;
    }

    out.mean = Tensor{Shape(B, A)};
    out.stddev = Tensor{Shape(B, A)};
    out.pre_squash = Tensor{Shape(B, A)};
    for (std::size_t i = 0; i < B; ++i) {
        double logp = 0.0;
        for (std::size_t j = 0; j < A; ++j) {
            const double mu = p(i, j);
            const double sg = cfg_.min_std + softplus_value(p(i, A + j));
            const double x = explore ? mu + sg * rng.normal() : mu;
            const double a = std::tanh(x);
            out.mean(i, j) = std::tanh(mu);
            out.stddev(i, j) = sg;
            out.pre_squash(i, j) = x;
            out.action(i, j) = a;
            const double zn = (x - mu) / sg;
            logp += -0.5 * zn * zn - std::log(sg) - 0.5 * kLn2Pi - std::log(1.0 - a * a + kSquashEps);
        }
        out.log_prob(i) = logp;
    }
    return out;
}

PolicyNet::Eval PolicyNet::evaluate(Tape& t, Var params, const Tensor& action,
                                    const Tensor& pre_squash) const {
    const std::size_t A = cfg_.act_dim;
    Eval ev;
    if (cfg_.discrete) {
        if (action.shape != t.val(params).shape)
            throw ContractError("evaluate: one-hot action shape mismatch");
        Var lp = t.log_softmax(params);
        ev.log_prob = t.sum_last(t.mul(lp, t.leaf(action)));
        ev.entropy = t.scale(t.sum_last(t.mul(t.softmax(params), lp)), -1.0);
        return ev;
    }
    if (pre_squash.shape.rank != 2 || pre_squash.shape.last() != A)
        throw ContractError("evaluate: pre-squash action shape mismatch");
    Var mu = t.slice(params, 0, A);
    Var sigma = t.affine(t.softplus(t.slice(params, A, 2 * A)), 1.0, cfg_.min_std);
    Var zn = t.div(t.sub(t.leaf(pre_squash), mu), sigma);
    Var quad = t.scale(t.mul(zn, zn), -0.5);
    Var logs = t.log(sigma);
    // per-dim constants: -ln(2*pi)/2 and the tanh change-of-variables term
    Tensor c{pre_squash.shape};
    for (std::size_t k = 0; k < c.numel(); ++k) {
        const double a = std::tanh(pre_squash.data[k]);
        c.data[k] = -0.5 * kLn2Pi - std::log(1.0 - a * a + kSquashEps);
    }
    ev.log_prob = t.sum_last(t.add(t.sub(quad, logs), t.leaf(c)));
    ev.entropy = t.sum_last(t.affine(logs, 1.0, 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e)));
    return ev;
}

ValueNet::ValueNet(const AgentConfig& cfg, Rng& rng)
    : cfg_(validated(cfg)),
      grid_(BinGrid::symlog_uniform(cfg_.value_bins, cfg_.value_lo, cfg_.value_hi)),
      body_(store_, "critic.body", cfg_.feat_dim, cfg_.hidden, cfg_.neuron, rng, cfg_.init_gain),
      out_(store_, "critic.out", cfg_.hidden, std::size_t(cfg_.value_bins), cfg_.trace_tau, rng) {}

Var ValueNet::logits(Tape& t, const Binding& b, Var feat) const {
    const std::size_t B = t.val(feat).shape.d[0];
    LIFState st = body_.initial(t, B);
    Var y = out_.initial(t, B);
    for (std::size_t k = 0; k < cfg_.ticks; ++k) {
        st = body_.step(t, b, st, feat);
        y = out_.step(t, b, y, st.s);
    }
    return y;
}

Tensor ValueNet::values(const Tensor& feat) const {
    Tape t;
    Binding b(t, store_);
    return twohot_decode(t.val(logits(t, b, t.leaf(feat))), grid_);
}

void ImaginedRollout::validate() const {
    const std::size_t H = horizon();
    if (H == 0) throw ContractError("rollout: horizon must be >= 1");
    if (states.size() != H + 1 || rewards.size() != H || continues.size() != H ||
        values.size() != H + 1)
        throw ContractError("rollout: inconsistent lengths");
    for (const Tensor& c : continues)
        for (double v : c.data)
            if (!(v >= 0.0 && v <= 1.0)) throw ContractError("rollout: continue outside [0, 1]");
}

ImaginedRollout imagine(const PolicyNet& actor, const ValueNet& critic, const WorldModel& wm,
                        const WorldModelState& start, std::size_t H, Rng& rng) {
    if (H == 0) throw ParamError("imagine: horizon must be >= 1");
    ImaginedRollout ro;
    ro.states.reserve(H + 1);
    ro.states.push_back(start);
    for (std::size_t h = 0; h < H; ++h) {
        PolicyOutput po = actor.act(ro.states[h].feat, /*explore=*/true, rng);
        WorldModelState next = wm.imagine_step(ro.states[h], po.action, rng);
        HeadPrediction hp = wm.predict_heads(next);
        ro.actions.push_back(std::move(po.action));
        if (!actor.config().discrete) ro.pre_actions.push_back(std::move(po.pre_squash));
        ro.rewards.push_back(std::move(hp.reward_mean));
        ro.continues.push_back(std::move(hp.continue_prob));
        ro.states.push_back(std::move(next));
    }
    ro.values.reserve(H + 1);
    for (const WorldModelState& s : ro.states) ro.values.push_back(critic.values(s.feat));
    ro.validate();
    return ro;
}

std::vector<double> lambda_returns(const std::vector<double>& rewards,
                                   const std::vector<double>& continues,
                                   const std::vector<double>& values, double gamma,
                                   double lambda) {
    if (lambda < 0.0 || lambda > 1.0) throw ParamError("lambda_returns: lambda outside [0, 1]");
    if (gamma <= 0.0 || gamma > 1.0) throw ParamError("lambda_returns: gamma outside (0, 1]");
    const std::size_t H = rewards.size();
    if (H == 0 || continues.size() != H || values.size() != H + 1)
        throw ContractError("lambda_returns: length mismatch");
    std::vector<double> out(H);
    double next = values[H];
    for (std::size_t h = H; h-- > 0;) {
        next = rewards[h] + gamma * continues[h] * ((1.0 - lambda) * values[h + 1] + lambda * next);
        out[h] = next;
    }
    return out;
}

std::vector<Tensor> lambda_returns(const ImaginedRollout& ro, double gamma, double lambda) {
    ro.validate();
    if (lambda < 0.0 || lambda > 1.0) throw ParamError("lambda_returns: lambda outside [0, 1]");
    if (gamma <= 0.0 || gamma > 1.0) throw ParamError("lambda_returns: gamma outside (0, 1]");
    const std::size_t H = ro.horizon(), N = ro.batch();
    std::vector<Tensor> out(H, Tensor{Shape(N)});
    for (std::size_t n = 0; n < N; ++n) {
        double next = ro.values[H](n);
        for (std::size_t h = H; h-- > 0;) {
            next = ro.rewards[h](n) +
                   gamma * ro.continues[h](n) * ((1.0 - lambda) * ro.values[h + 1](n) + lambda * next);
            out[h](n) = next;
        }
    }
    return out;
}

std::vector<Tensor> advantage_coeffs(const ImaginedRollout& ro,
                                     const std::vector<Tensor>& returns, double scale) {
    if (scale <= 0.0) throw ParamError("advantage_coeffs: scale must be positive");
    if (returns.size() != ro.horizon()) throw ContractError("advantage_coeffs: length mismatch");
    const std::size_t H = ro.horizon(), N = ro.batch();
    std::vector<Tensor> out(H, Tensor{Shape(N)});
    std::vector<double> w(N, 1.0);
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t n = 0; n < N; ++n) {
            out[h](n) = w[n] * (returns[h](n) - ro.values[h](n)) / scale;
            w[n] *= ro.continues[h](n);
        }
    }
    return out;
}

ActorLossResult actor_loss(Tape& t, const Binding& b, const PolicyNet& actor,
                           const ImaginedRollout& ro, const std::vector<Tensor>& returns,
                           double scale, double eta) {
    ro.validate();
    Var params = actor.params(t, b, t.leaf(stack_feats(ro)));
    const Tensor actions = stack_rows(ro.actions);
    const Tensor pre =
        actor.config().discrete ? Tensor{} : stack_rows(ro.pre_actions);
    PolicyNet::Eval ev = actor.evaluate(t, params, actions, pre);
    const Tensor coef = stack_rows(advantage_coeffs(ro, returns, scale));
    Var pg = t.mean(t.mul(ev.log_prob, t.leaf(coef)));
    ActorLossResult out;
    out.entropy_mean = t.mean(ev.entropy);
    out.loss = t.add(t.scale(pg, -1.0), t.scale(out.entropy_mean, -eta));
    return out;
}

Var critic_loss(Tape& t, const Binding& b, const ValueNet& critic, const ImaginedRollout& ro,
                const std::vector<Tensor>& returns) {
    ro.validate();
    if (returns.size() != ro.horizon()) throw ContractError("critic_loss: length mismatch");
    Var logits = critic.logits(t, b, t.leaf(stack_feats(ro)));
    const Tensor target = twohot_encode(stack_rows(returns), critic.grid());
    Var nll = t.scale(t.sum_last(t.mul(t.log_softmax(logits), t.leaf(target))), -1.0);
    return t.mean(t.mul(nll, t.leaf(continue_weights(ro))));
}

double percentile(std::vector<double> xs, double p) {
    if (xs.empty()) throw ContractError("percentile of an empty sample");
    p = std::clamp(p, 0.0, 100.0);
    std::sort(xs.begin(), xs.end());
    const double pos = p / 100.0 * double(xs.size() - 1);
    const std::size_t lo = std::size_t(pos);
    if (lo + 1 >= xs.size()) return xs.back();
    const double frac = pos - double(lo);
    return xs[lo] * (1.0 - frac) + xs[lo + 1] * frac;
}

Agent::Agent(const AgentConfig& cfg, Rng& rng)
    : cfg_(validated(cfg)),
      actor_(cfg_, rng),
      critic_(cfg_, rng),
      actor_opt_(cfg_.actor_opt),
      critic_opt_(cfg_.critic_opt) {}

std::map<std::string, double> Agent::train_step(const WorldModel& wm, const WMBatch& batch,
                                                Rng& rng) {
    if (cfg_.feat_dim != wm.config().feat_dim())
        throw ContractError("agent/world-model feature width mismatch");
    batch.validate(wm.config().obs_dim, wm.config().act_dim);
    const std::size_t B = batch.batch(), L = batch.length();
    const std::size_t obs_dim = wm.config().obs_dim, act_dim = wm.config().act_dim;

    // posterior states along the replay window, one per (sequence, step)
    std::vector<WorldModelState> posts;
    posts.reserve(L);
    WorldModelState st = wm.initial_state(B);
    for (std::size_t l = 0; l < L; ++l) {
        if (l > 0) {
            Tensor first{Shape(B)};
            bool any = false;
            for (std::size_t n = 0; n < B; ++n) {
                first(n) = batch.is_first(n, l);
                any = any || first(n) != 0.0;
            }
            if (any) wm.apply_first(st, first);
        }
        Tensor a{Shape(B, act_dim)}, o{Shape(B, obs_dim)};
        for (std::size_t n = 0; n < B; ++n) {
            for (std::size_t j = 0; j < act_dim; ++j) a(n, j) = batch.actions(n, l, j);
            for (std::size_t j = 0; j < obs_dim; ++j) o(n, j) = batch.obs(n, l, j);
        }
        st = wm.observe_step(st, a, o, rng).state;
        posts.push_back(st);
    }

    // imagination starts: all posterior states, subsampled past the budget
    const std::size_t total = B * L;
    std::vector<std::size_t> flat(total);
    for (std::size_t i = 0; i < total; ++i) flat[i] = i;
    std::size_t n_starts = std::min(cfg_.imag_starts, total);
    for (std::size_t i = 0; i < n_starts; ++i)
        std::swap(flat[i], flat[i + rng.below(total - i)]);
    std::vector<std::pair<std::size_t, std::size_t>> picks(n_starts);
    for (std::size_t i = 0; i < n_starts; ++i) picks[i] = {flat[i] / B, flat[i] % B};
    WorldModelState start = gather_rows(posts, picks);

    ImaginedRollout ro = imagine(actor_, critic_, wm, start, cfg_.horizon, rng);
    std::vector<Tensor> returns = lambda_returns(ro, cfg_.gamma, cfg_.lambda);

    std::vector<double> all_returns;
    all_returns.reserve(returns.size() * n_starts);
    double ret_sum = 0.0;
    for (const Tensor& r : returns)
        for (double v : r.data) {
            all_returns.push_back(v);
            ret_sum += v;
        }
    retnorm_ema_ = cfg_.retnorm_decay * retnorm_ema_ +
                   (1.0 - cfg_.retnorm_decay) *
                       (percentile(all_returns, 95.0) - percentile(all_returns, 5.0));

    std::map<std::string, double> metrics;
    metrics["imag_return"] = ret_sum / double(all_returns.size());
    metrics["adv_scale"] = return_scale();
    double vsum = 0.0;
    for (double v : ro.values[0].data) vsum += v;
    metrics["value_mean"] = vsum / double(n_starts);

    {
        Tape t;
        Binding b(t, actor_.store());
        ActorLossResult al = actor_loss(t, b, actor_, ro, returns, return_scale(), cfg_.eta);
        metrics["actor_loss"] = t.val(al.loss).item();
        metrics["entropy"] = t.val(al.entropy_mean).item();
        t.backward(al.loss);
        actor_opt_.step(actor_.store(), b.grads());
        metrics["actor_grad_norm"] = actor_opt_.last_grad_norm();
    }
    {
        Tape t;
        Binding b(t, critic_.store());
        Var cl = critic_loss(t, b, critic_, ro, returns);
        metrics["critic_loss"] = t.val(cl).item();
        t.backward(cl);
        critic_opt_.step(critic_.store(), b.grads());
        metrics["critic_grad_norm"] = critic_opt_.last_grad_norm();
    }
    return metrics;
}

}  // namespace swm
