#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "swm/agent.hpp"
#include "swm/error.hpp"
#include "swm/world_model.hpp"

using namespace swm;

namespace {

AgentConfig tiny_agent(std::size_t feat_dim, std::size_t act_dim, bool discrete) {
    AgentConfig c;
    c.feat_dim = feat_dim;
    c.act_dim = act_dim;
    c.discrete = discrete;
    c.hidden = 6;
    c.ticks = 2;
    c.horizon = 3;
    return c;
}

WMConfig tiny_wm() {
    WMConfig c;
    c.obs_dim = 3;
    c.act_dim = 1;
    c.latent.groups = 2;
    c.latent.classes = 3;
    c.enc_hidden = 6;
    c.fuse_hidden = 6;
    c.mcn_size = 8;
    c.head_hidden = 6;
    c.ticks = 3;
    c.head_ticks = 2;
    return c;
}

// self-consistent rollout with the given feature width; world-model state
// beyond feat is unused by the losses
ImaginedRollout fake_rollout(Rng& rng, std::size_t N, std::size_t H, std::size_t F,
                             std::size_t A, bool discrete, double cont = 1.0) {
    ImaginedRollout ro;
    for (std::size_t h = 0; h <= H; ++h) {
        WorldModelState s;
        s.z = Tensor::zeros(Shape(N, std::size_t(1)));
        s.feat = Tensor{Shape(N, F)};
        for (double& v : s.feat.data) v = rng.uniform(-1.0, 1.0);
        ro.states.push_back(std::move(s));
    }
    for (std::size_t h = 0; h < H; ++h) {
        Tensor a{Shape(N, A)}, pre{Shape(N, A)};
        if (discrete) {
            for (std::size_t n = 0; n < N; ++n) a(n, rng.below(A)) = 1.0;
        } else {
            for (std::size_t k = 0; k < a.numel(); ++k) {
                pre.data[k] = rng.normal();
                a.data[k] = std::tanh(pre.data[k]);
            }
            ro.pre_actions.push_back(pre);
        }
        ro.actions.push_back(a);
        Tensor r{Shape(N)};
        for (double& v : r.data) v = rng.uniform(-2.0, 2.0);
        ro.rewards.push_back(r);
        ro.continues.push_back(Tensor::full(Shape(N), cont));
    }
    for (std::size_t h = 0; h <= H; ++h) {
        Tensor v{Shape(N)};
        for (double& x : v.data) x = rng.uniform(-2.0, 2.0);
        ro.values.push_back(v);
    }
    return ro;
}

// non-recursive lambda-return: weighted sum of n-step bootstrapped returns
double lambda_return_bruteforce(const std::vector<double>& r, const std::vector<double>& c,
                                const std::vector<double>& v, double gamma, double lambda,
                                std::size_t h) {
    const std::size_t H = r.size();
    auto n_step = [&](std::size_t n) {
        double g = 0.0, d = 1.0;
        for (std::size_t k = 0; k < n; ++k) {
            g += d * r[h + k];
            d *= gamma * c[h + k];
        }
        return g + d * v[h + n];
    };
    double out = 0.0, lp = 1.0;
    for (std::size_t n = 1; n + h < H; ++n) {
        out += (1.0 - lambda) * lp * n_step(n);
        lp *= lambda;
    }
    return out + lp * n_step(H - h);
}

double tensor_mean(const Tensor& t) {
    double s = 0.0;
    for (double v : t.data) s += v;
    return s / double(t.numel());
}

}  // namespace

TEST_CASE("lambda returns: hand expansions") {
    SUBCASE("full Monte-Carlo weighting") {
        auto R = lambda_returns({1.0, 1.0}, {1.0, 1.0}, {0.0, 0.0, 3.0}, 1.0, 1.0);
        CHECK(R[0] == doctest::Approx(5.0).epsilon(1e-12));
        CHECK(R[1] == doctest::Approx(4.0).epsilon(1e-12));
    }
    SUBCASE("one-step TD targets") {
        auto R = lambda_returns({1.0, 1.0}, {1.0, 1.0}, {0.0, 2.0, 3.0}, 1.0, 0.0);
        CHECK(R[0] == doctest::Approx(3.0).epsilon(1e-12));
        CHECK(R[1] == doctest::Approx(4.0).epsilon(1e-12));
    }
    SUBCASE("gamma zero collapses to the rewards") {
        Rng rng(4);
        std::vector<double> r(5), c(5), v(6);
        for (auto& x : r) x = rng.uniform(-3.0, 3.0);
        for (auto& x : c) x = rng.uniform();
        for (auto& x : v) x = rng.uniform(-3.0, 3.0);
        auto R = lambda_returns(r, c, v, 1e-300, 0.7);
        for (std::size_t h = 0; h < 5; ++h) CHECK(R[h] == doctest::Approx(r[h]).epsilon(1e-10));
    }
    SUBCASE("length and range validation") {
        CHECK_THROWS_AS(lambda_returns({1.0}, {1.0, 1.0}, {0.0, 0.0}, 1.0, 1.0), ContractError);
        CHECK_THROWS_AS(lambda_returns({1.0}, {1.0}, {0.0}, 1.0, 1.0), ContractError);
        CHECK_THROWS_AS(lambda_returns({1.0}, {1.0}, {0.0, 0.0}, 1.0, 1.5), ParamError);
        CHECK_THROWS_AS(lambda_returns({1.0}, {1.0}, {0.0, 0.0}, 0.0, 0.5), ParamError);
    }
}

TEST_CASE("lambda returns match the non-recursive expansion, 1000 random cases") {
    Rng rng(21);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t H = 1 + rng.below(8);
        std::vector<double> r(H), c(H), v(H + 1);
        for (auto& x : r) x = rng.uniform(-3.0, 3.0);
        for (auto& x : c) x = rng.uniform();
        for (auto& x : v) x = rng.uniform(-3.0, 3.0);
        const double gamma = rng.uniform(0.05, 1.0);
        const double lambda = rng.uniform(0.0, 1.0);
        auto R = lambda_returns(r, c, v, gamma, lambda);
        for (std::size_t h = 0; h < H; ++h) {
            const double want = lambda_return_bruteforce(r, c, v, gamma, lambda, h);
            CHECK(std::fabs(R[h] - want) <= 1e-12);
        }
    }
}

TEST_CASE("lambda=1 with unit continues is discounted Monte-Carlo with bootstrap") {
    Rng rng(22);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t H = 1 + rng.below(8);
        std::vector<double> r(H), c(H, 1.0), v(H + 1);
        for (auto& x : r) x = rng.uniform(-3.0, 3.0);
        for (auto& x : v) x = rng.uniform(-3.0, 3.0);
        const double gamma = rng.uniform(0.05, 1.0);
        auto R = lambda_returns(r, c, v, gamma, 1.0);
        for (std::size_t h = 0; h < H; ++h) {
            double want = 0.0, d = 1.0;
            for (std::size_t k = h; k < H; ++k) {
                want += d * r[k];
                d *= gamma;
            }
            want += d * v[H];
            CHECK(std::fabs(R[h] - want) <= 1e-12);
        }
    }
}

TEST_CASE("policy: zero weights give centered actions at the stddev floor") {
    Rng rng(5);
    AgentConfig cfg = tiny_agent(4, 2, false);
    PolicyNet actor(cfg, rng);
    for (std::size_t i = 0; i < actor.store().size(); ++i) actor.store().value(i).fill(0.0);

    Tensor feat{Shape(std::size_t(3), std::size_t(4))};
    for (double& v : feat.data) v = rng.uniform(-1.0, 1.0);
    PolicyOutput po = actor.act(feat, /*explore=*/false, rng);
    const double floor = cfg.min_std + std::log(2.0);  // softplus(0) on the raw channel
    for (double v : po.action.data) CHECK(v == 0.0);
    for (double v : po.mean.data) CHECK(v == 0.0);
    for (double v : po.stddev.data) CHECK(v == doctest::Approx(floor).epsilon(1e-12));
}

TEST_CASE("policy: greedy is deterministic, samples respect bounds and formulas") {
    Rng rng(6);
    AgentConfig cfg = tiny_agent(5, 3, false);
    PolicyNet actor(cfg, rng);
    Tensor feat{Shape(std::size_t(4), std::size_t(5))};
    for (double& v : feat.data) v = rng.uniform(-1.0, 1.0);

    SUBCASE("greedy twice, different rng states, identical actions") {
        Rng r1(1), r2(999);
        PolicyOutput a = actor.act(feat, false, r1);
        PolicyOutput b = actor.act(feat, false, r2);
        CHECK(max_abs_diff(a.action, b.action) == 0.0);
        CHECK(max_abs_diff(a.log_prob, b.log_prob) == 0.0);
    }
    SUBCASE("10k sampled actions stay inside (-1, 1), stddev positive") {
        Rng r(7);
        for (int rep = 0; rep < 2500; ++rep) {
            PolicyOutput po = actor.act(feat, true, r);
            for (double v : po.action.data) {
                CHECK(std::fabs(v) < 1.0);
                CHECK(std::isfinite(v));
            }
            for (double v : po.stddev.data) CHECK(v > 0.0);
        }
    }
    SUBCASE("sampled log-prob matches the taped evaluation") {
        Rng r(8);
        PolicyOutput po = actor.act(feat, true, r);
        Tape t;
        Binding b(t, actor.store());
        Var params = actor.params(t, b, t.leaf(feat));
        auto ev = actor.evaluate(t, params, po.action, po.pre_squash);
        CHECK(max_abs_diff(t.val(ev.log_prob), po.log_prob) < 1e-9);
        // zero-weight check of the entropy formula: sum of ln(sigma) + c
        Tensor ent = t.val(ev.entropy);
        for (std::size_t n = 0; n < 4; ++n) {
            double want = 0.0;
            for (std::size_t j = 0; j < 3; ++j)
                want += std::log(po.stddev(n, j)) +
                        0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e);
            CHECK(ent(n) == doctest::Approx(want).epsilon(1e-9));
        }
    }
}

TEST_CASE("policy: wider Gaussian has strictly larger entropy") {
    Rng rng(9);
    AgentConfig cfg = tiny_agent(3, 2, false);
    PolicyNet actor(cfg, rng);
    Tape t;
    Tensor narrow{Shape(std::size_t(1), std::size_t(4))};
    Tensor wide = narrow;
    wide(0, 2) = 2.0;
    wide(0, 3) = 2.0;  // raw stddev channels
    Tensor a = Tensor::zeros(Shape(std::size_t(1), std::size_t(2)));
    auto e1 = actor.evaluate(t, t.leaf(narrow), a, a);
    auto e2 = actor.evaluate(t, t.leaf(wide), a, a);
    CHECK(t.val(e2.entropy)(0) > t.val(e1.entropy)(0));
}

TEST_CASE("policy: discrete actions are one-hot with consistent log-probs") {
    Rng rng(10);
    AgentConfig cfg = tiny_agent(4, 3, true);
    PolicyNet actor(cfg, rng);
    Tensor feat{Shape(std::size_t(5), std::size_t(4))};
    for (double& v : feat.data) v = rng.uniform(-1.0, 1.0);

    Rng r(3);
    PolicyOutput po = actor.act(feat, true, r);
    for (std::size_t n = 0; n < 5; ++n) {
        double sum = 0.0;
        for (std::size_t j = 0; j < 3; ++j) {
            CHECK((po.action(n, j) == 0.0 || po.action(n, j) == 1.0));
            sum += po.action(n, j);
        }
        CHECK(sum == 1.0);
        CHECK(po.log_prob(n) <= 0.0);
    }
    Tape t;
    Binding b(t, actor.store());
    auto ev = actor.evaluate(t, actor.params(t, b, t.leaf(feat)), po.action, Tensor{});
    CHECK(max_abs_diff(t.val(ev.log_prob), po.log_prob) < 1e-9);
}

TEST_CASE("value head: uniform logits read zero, saturated logits read a bin center") {
    Rng rng(11);
    AgentConfig cfg = tiny_agent(4, 1, false);
    cfg.value_bins = 5;
    ValueNet critic(cfg, rng);

    SUBCASE("zero weights give uniform logits and value zero on the symmetric grid") {
        for (std::size_t i = 0; i < critic.store().size(); ++i) critic.store().value(i).fill(0.0);
        Tensor feat{Shape(std::size_t(3), std::size_t(4))};
        for (double& v : feat.data) v = rng.uniform(-1.0, 1.0);
        Tensor v = critic.values(feat);
        for (double x : v.data) CHECK(std::fabs(x) < 1e-12);
    }
    SUBCASE("forced saturation at one bin") {
        // body always spikes, readout row 2 dominates: softmax collapses there
        critic.store().value(critic.store().find("critic.body.w")).fill(50.0);
        Tensor& w = critic.store().value(critic.store().find("critic.out.w"));
        for (std::size_t bin = 0; bin < 5; ++bin)
            for (std::size_t j = 0; j < cfg.hidden; ++j) w(bin, j) = bin == 2 ? 100.0 : -100.0;
        Tensor feat = Tensor::full(Shape(std::size_t(2), std::size_t(4)), 1.0);
        Tensor v = critic.values(feat);
        const double center = symexp(critic.grid().centers[2]);
        for (double x : v.data) CHECK(x == doctest::Approx(center).epsilon(1e-9));
    }
    SUBCASE("values finite for 1000 random states") {
        Tensor feat{Shape(std::size_t(1000), std::size_t(4))};
        for (double& v : feat.data) v = rng.uniform(-3.0, 3.0);
        Tensor v = critic.values(feat);
        REQUIRE(v.numel() == 1000);
        CHECK(v.finite());
    }
}

TEST_CASE("imagination records one transition per horizon step") {
    Rng rng(13);
    WMConfig wc = tiny_wm();
    ParamStore ws;
    WorldModel wm(wc, ws, rng);
    AgentConfig ac = tiny_agent(wc.feat_dim(), wc.act_dim, false);
    PolicyNet actor(ac, rng);
    ValueNet critic(ac, rng);

    WorldModelState start = wm.initial_state(4);
    SUBCASE("H=1") {
        Rng r(2);
        ImaginedRollout ro = imagine(actor, critic, wm, start, 1, r);
        CHECK(ro.horizon() == 1);
        CHECK(ro.states.size() == 2);
        CHECK(ro.values.size() == 2);
        CHECK(ro.batch() == 4);
        for (double c : ro.continues[0].data) CHECK((c >= 0.0 && c <= 1.0));
    }
    SUBCASE("H=0 rejected") {
        Rng r(2);
        CHECK_THROWS_AS(imagine(actor, critic, wm, start, 0, r), ParamError);
    }
    SUBCASE("reproducible under a fixed seed") {
        Rng r1(77), r2(77);
        ImaginedRollout a = imagine(actor, critic, wm, start, 4, r1);
        ImaginedRollout b = imagine(actor, critic, wm, start, 4, r2);
        for (std::size_t h = 0; h < 4; ++h) {
            CHECK(max_abs_diff(a.actions[h], b.actions[h]) == 0.0);
            CHECK(max_abs_diff(a.rewards[h], b.rewards[h]) == 0.0);
            CHECK(max_abs_diff(a.states[h + 1].feat, b.states[h + 1].feat) == 0.0);
        }
    }
}

TEST_CASE("vanishing continues reduce lambda-returns to the immediate rewards") {
    Rng rng(14);
    ImaginedRollout ro = fake_rollout(rng, 5, 4, 6, 2, false, /*cont=*/0.0);
    auto R = lambda_returns(ro, 0.997, 0.95);
    for (std::size_t h = 0; h < 4; ++h) CHECK(max_abs_diff(R[h], ro.rewards[h]) == 0.0);
}

TEST_CASE("advantage coefficients: positive rescaling preserves every sign") {
    Rng rng(15);
    ImaginedRollout ro = fake_rollout(rng, 6, 5, 4, 2, false);
    for (Tensor& c : ro.continues)
        for (double& v : c.data) v = rng.uniform();
    auto R = lambda_returns(ro, 0.9, 0.8);
    auto c1 = advantage_coeffs(ro, R, 1.7);

    ImaginedRollout scaled = ro;
    std::vector<Tensor> R2 = R;
    for (Tensor& v : scaled.values)
        for (double& x : v.data) x *= 3.0;
    for (Tensor& v : R2)
        for (double& x : v.data) x *= 3.0;
    auto c2 = advantage_coeffs(scaled, R2, 0.4);
    for (std::size_t h = 0; h < 5; ++h)
        for (std::size_t n = 0; n < 6; ++n) {
            const double a = c1[h](n), b = c2[h](n);
            CHECK(((a > 0 && b > 0) || (a < 0 && b < 0) || (a == 0 && b == 0)));
        }
    CHECK_THROWS_AS(advantage_coeffs(ro, R, 0.0), ParamError);
}

TEST_CASE("actor loss: zero advantages leave only the entropy bonus") {
    Rng rng(16);
    AgentConfig cfg = tiny_agent(4, 2, false);
    PolicyNet actor(cfg, rng);
    ImaginedRollout ro = fake_rollout(rng, 5, 3, 4, 2, false);
    std::vector<Tensor> returns(ro.values.begin(), ro.values.begin() + 3);

    Tape t;
    Binding b(t, actor.store());
    ActorLossResult al = actor_loss(t, b, actor, ro, returns, 2.5, cfg.eta);
    const double loss = t.val(al.loss).item();
    const double ent = t.val(al.entropy_mean).item();
    CHECK(loss == doctest::Approx(-cfg.eta * ent).epsilon(1e-12));

    // and the entropy gradient still flows
    t.backward(al.loss);
    double gnorm = 0.0;
    for (const Tensor& g : b.grads())
        for (double v : g.data) gnorm += v * v;
    CHECK(gnorm > 0.0);
}

TEST_CASE("critic loss: dead continues zero out later steps") {
    Rng rng(17);
    AgentConfig cfg = tiny_agent(4, 2, false);
    ValueNet critic(cfg, rng);
    ImaginedRollout ro = fake_rollout(rng, 4, 4, 4, 2, false);
    for (Tensor& c : ro.continues) c.fill(0.0);  // weights die after step 0
    auto R = lambda_returns(ro, 0.9, 0.9);

    auto eval_loss = [&](const std::vector<Tensor>& returns) {
        Tape t;
        Binding b(t, critic.store());
        return t.val(critic_loss(t, b, critic, ro, returns)).item();
    };
    const double base = eval_loss(R);
    std::vector<Tensor> tampered = R;
    for (std::size_t h = 1; h < 4; ++h)
        for (double& v : tampered[h].data) v += 17.0;  // must not matter
    CHECK(eval_loss(tampered) == doctest::Approx(base).epsilon(1e-12));
    CHECK(std::isfinite(base));
}

TEST_CASE("critic loss: constant target trains down to the twohot floor") {
    Rng rng(18);
    AgentConfig cfg = tiny_agent(4, 1, false);
    cfg.hidden = 8;
    ValueNet critic(cfg, rng);
    // pin the body in the spiking regime so only the readout has to learn
    critic.store().value(critic.store().find("critic.body.w")).fill(3.0);

    ImaginedRollout ro = fake_rollout(rng, 4, 1, 4, 1, false);
    for (double& v : ro.states[0].feat.data) v = std::fabs(v) + 0.5;
    const double target = 1.7;
    std::vector<Tensor> R = {Tensor::full(Shape(std::size_t(4)), target)};

    // the floor is the entropy of the twohot target itself
    Tensor q = twohot_encode(R[0], critic.grid());
    double floor = 0.0;
    for (std::size_t j = 0; j < q.shape.last(); ++j) {
        const double p = q(0, j);
        if (p > 0.0) floor -= p * std::log(p);
    }

    Adam opt{AdamConfig{.lr = 1e-2}};
    double last = 0.0;
    for (int step = 0; step < 500; ++step) {
        Tape t;
        Binding b(t, critic.store());
        Var loss = critic_loss(t, b, critic, ro, R);
        last = t.val(loss).item();
        t.backward(loss);
        opt.step(critic.store(), b.grads());
    }
    CHECK(last - floor < 0.05);
    CHECK(last - floor > -1e-9);  // cross-entropy never beats the target entropy
    CHECK(opt.last_grad_norm() < 0.1);
    Tensor v = critic.values(ro.states[0].feat);
    for (double x : v.data) CHECK(x == doctest::Approx(target).epsilon(0.05));
}

TEST_CASE("agent train step: metrics, no world-model writes, lr=0 freezes parameters") {
    Rng rng(19);
    WMConfig wc = tiny_wm();
    ParamStore ws;
    WorldModel wm(wc, ws, rng);
    AgentConfig ac = tiny_agent(wc.feat_dim(), wc.act_dim, false);
    ac.imag_starts = 6;
    ac.horizon = 3;

    WMBatch batch;
    {
        Rng br(31);
        const std::size_t B = 3, L = 4;
        batch.obs = Tensor{Shape(B, L, wc.obs_dim)};
        for (double& v : batch.obs.data) v = br.uniform(-1.0, 1.0);
        batch.actions = Tensor{Shape(B, L, wc.act_dim)};
        for (double& v : batch.actions.data) v = br.uniform(-1.0, 1.0);
        batch.rewards = Tensor{Shape(B, L)};
        for (double& v : batch.rewards.data) v = br.uniform(-1.0, 1.0);
        batch.continues = Tensor::full(Shape(B, L), 1.0);
        batch.is_first = Tensor::zeros(Shape(B, L));
        batch.is_first(1, 2) = 1.0;  // mid-window episode boundary
    }

    SUBCASE("world-model parameters never move; metrics complete") {
        ac.actor_opt.lr = 1e-3;
        ac.critic_opt.lr = 1e-3;
        Rng ar(1);
        Agent agent(ac, ar);
        std::vector<Tensor> wm_before;
        for (std::size_t i = 0; i < ws.size(); ++i) wm_before.push_back(ws.value(i));
        Tensor actor_before = agent.actor().store().value(std::size_t(0));

        Rng tr(2);
        auto m = agent.train_step(wm, batch, tr);
        for (const char* key : {"actor_loss", "critic_loss", "entropy", "imag_return",
                                "value_mean", "adv_scale", "actor_grad_norm", "critic_grad_norm"})
            CHECK(m.count(key) == 1);
        CHECK(m["actor_grad_norm"] > 0.0);
        CHECK(m["critic_grad_norm"] > 0.0);
        CHECK(m["adv_scale"] >= 1.0);
        CHECK(agent.retnorm_ema() > 0.0);

        for (std::size_t i = 0; i < ws.size(); ++i)
            CHECK(max_abs_diff(ws.value(i), wm_before[i]) == 0.0);
        CHECK(max_abs_diff(agent.actor().store().value(std::size_t(0)), actor_before) > 0.0);
    }
    SUBCASE("zero learning rates freeze both stores") {
        ac.actor_opt.lr = 0.0;
        ac.critic_opt.lr = 0.0;
        Rng ar(1);
        Agent agent(ac, ar);
        std::vector<Tensor> before;
        for (std::size_t i = 0; i < agent.actor().store().size(); ++i)
            before.push_back(agent.actor().store().value(i));
        for (std::size_t i = 0; i < agent.critic().store().size(); ++i)
            before.push_back(agent.critic().store().value(i));

        Rng tr(2);
        agent.train_step(wm, batch, tr);
        std::size_t k = 0;
        for (std::size_t i = 0; i < agent.actor().store().size(); ++i)
            CHECK(max_abs_diff(agent.actor().store().value(i), before[k++]) == 0.0);
        for (std::size_t i = 0; i < agent.critic().store().size(); ++i)
            CHECK(max_abs_diff(agent.critic().store().value(i), before[k++]) == 0.0);
    }
}

TEST_CASE("two-armed bandit: greedy policy finds the better arm within 2k steps") {
    // endless bandit: constant observation, one pull per step, arm 1 pays +1
    // and arm 0 pays -1
    WMConfig wc;
    wc.obs_dim = 1;
    wc.act_dim = 2;
    wc.latent.groups = 2;
    wc.latent.classes = 2;
    wc.enc_hidden = 4;
    wc.fuse_hidden = 8;
    wc.mcn_size = 8;
    wc.head_hidden = 6;
    wc.ticks = 5;
    wc.head_ticks = 2;

    auto make_batch = [&](Rng& r, std::size_t B, std::size_t L) {
        WMBatch w;
        w.obs = Tensor::full(Shape(B, L, std::size_t(1)), 1.0);
        w.actions = Tensor::zeros(Shape(B, L, std::size_t(2)));
        w.rewards = Tensor::zeros(Shape(B, L));
        w.continues = Tensor::full(Shape(B, L), 1.0);
        w.is_first = Tensor::zeros(Shape(B, L));
        for (std::size_t b = 0; b < B; ++b) {
            w.is_first(b, 0) = 1.0;
            for (std::size_t l = 1; l < L; ++l) {
                const std::size_t arm = r.below(2);
                w.actions(b, l, arm) = 1.0;
                w.rewards(b, l) = arm == 1 ? 1.0 : -1.0;
            }
        }
        return w;
    };

    Rng init(42);
    ParamStore ws;
    WorldModel wm(wc, ws, init);
    Adam wopt{AdamConfig{.lr = 1e-2}};
    Rng data(7), wtr(9);
    for (int step = 0; step < 800; ++step) {
        WMBatch b = make_batch(data, 12, 6);
        wm.train_step(ws, wopt, b, wtr);
    }

    // the model must credit the pulled arm before the agent can
    auto pull_prediction = [&](std::size_t arm) {
        double acc = 0.0;
        for (int rep = 0; rep < 8; ++rep) {
            Rng pr(3 + rep);
            WorldModelState st = wm.initial_state(1);
            Tensor obs = Tensor::full(Shape(std::size_t(1), std::size_t(1)), 1.0);
            st = wm.observe_step(st, Tensor::zeros(Shape(std::size_t(1), std::size_t(2))), obs, pr)
                     .state;
            Tensor a = Tensor::zeros(Shape(std::size_t(1), std::size_t(2)));
            a(0, arm) = 1.0;
            st = wm.observe_step(st, a, obs, pr).state;
            acc += wm.predict_heads(st).reward_mean(0);
        }
        return acc / 8.0;
    };
    REQUIRE(pull_prediction(1) > 0.4);
    REQUIRE(pull_prediction(0) < -0.4);

    AgentConfig ac;
    ac.feat_dim = wc.feat_dim();
    ac.act_dim = 2;
    ac.discrete = true;
    ac.hidden = 8;
    ac.ticks = 2;
    ac.horizon = 3;
    ac.gamma = 0.9;
    ac.imag_starts = 24;
    ac.actor_opt.lr = 1e-2;
    ac.critic_opt.lr = 1e-2;
    Rng ar(5);
    Agent agent(ac, ar);

    auto greedy_arm = [&](int salt) {
        Rng pr(100 + salt);
        WorldModelState st = wm.initial_state(1);
        Tensor obs = Tensor::full(Shape(std::size_t(1), std::size_t(1)), 1.0);
        st = wm.observe_step(st, Tensor::zeros(Shape(std::size_t(1), std::size_t(2))), obs, pr).state;
        PolicyOutput po = agent.actor().act(st.feat, /*explore=*/false, pr);
        return po.action(0, 1) == 1.0 ? 1 : 0;
    };

    Rng adata(70), atr(90);
    int converged_at = -1;
    for (int step = 0; step < 2000; ++step) {
        WMBatch b = make_batch(adata, 12, 6);
        agent.train_step(wm, b, atr);
        if (step % 50 == 49) {
            bool all = true;
            for (int probe = 0; probe < 3; ++probe) all = all && greedy_arm(probe) == 1;
            if (all) {
                converged_at = step + 1;
                break;
            }
        }
    }
    REQUIRE(converged_at > 0);
    CHECK(converged_at <= 2000);
}
