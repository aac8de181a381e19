#include "swm/layers.hpp"

#include <cmath>
#include <cstring>

namespace swm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

Tensor zeros_like_batch(std::size_t batch, std::size_t n) { return Tensor::zeros(Shape(batch, n)); }

}  // namespace

Tensor init_uniform(Shape s, std::size_t fan_in, Rng& rng, double gain) {
    double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
    Tensor t(s);
    for (double& x : t.data) x = rng.uniform(-bound, bound);
    return t;
}

// ---- LIF dense --------------------------------------------------------------

LIFDenseLayer::LIFDenseLayer(ParamStore& store, const std::string& name, std::size_t n_in,
                             std::size_t n_out, NeuronParams params, Rng& rng, double gain)
    : params_(params), n_in_(n_in), n_out_(n_out) {
    params_.validate();
    w_ = store.add(name + ".w", init_uniform(Shape(n_out, n_in), n_in, rng, gain));
}

LIFState LIFDenseLayer::initial(Tape& t, std::size_t batch) const {
    return {t.leaf(zeros_like_batch(batch, n_out_)), t.leaf(zeros_like_batch(batch, n_out_))};
}

LIFState LIFDenseLayer::restore(Tape& t, const LIFStateValue& v) const {
    return {t.leaf(v.u), t.leaf(v.s)};
}

LIFStateValue LIFDenseLayer::snapshot(const Tape& t, const LIFState& s) {
    return {t.val(s.u), t.val(s.s)};
}

LIFState LIFDenseLayer::step(Tape& t, const Binding& b, const LIFState& st, Var x) const {
    Var drive = t.linear(x, b[w_]);
    Var u1 = t.add(st.u, t.scale(t.sub(drive, st.u), 1.0 / params_.tau));
    Var s = t.spike(u1, params_.v_th, params_.alpha);
    // hard reset: u1*(1-s) + v_reset*s, differentiable through both factors
    Var keep = t.mul(u1, t.affine(s, -1.0, 1.0));
    Var u_next = params_.v_reset == 0.0 ? keep : t.add(keep, t.scale(s, params_.v_reset));
    return {u_next, s};
}

// ---- MCN --------------------------------------------------------------------

MCNLayer::MCNLayer(ParamStore& store, const std::string& name, std::size_t n_in, std::size_t n,
                   std::size_t n_soma_in, NeuronParams params, Rng& rng, bool learnable_decay,
                   double gain)
    : params_(params), n_in_(n_in), n_(n), n_soma_(n_soma_in) {
    params_.validate();
    // feedforward paths get the gain; recurrent paths stay conservative
    w_b_ = store.add(name + ".w_b", init_uniform(Shape(n, n_in), n_in, rng, gain));
    w_hb_ = store.add(name + ".w_hb", init_uniform(Shape(n, n), n, rng));
    w_a_ = store.add(name + ".w_a", init_uniform(Shape(n, n_in), n_in, rng, gain));
    w_ha_ = store.add(name + ".w_ha", init_uniform(Shape(n, n), n, rng));
    w_s_ = store.add(name + ".w_s", init_uniform(Shape(n, n_soma_in), n_soma_in, rng, gain));
    if (learnable_decay) {
        // rho such that 1 + softplus(rho) equals the configured decay
        auto rho_for = [](double tau) {
            double y = tau - 1.0;
            // inverse softplus; tau >= 1 guarantees y >= 0
            return y > 30.0 ? y : std::log(std::expm1(std::max(y, 1e-12)));
        };
        rho_tau_ = store.add(name + ".rho_tau", Tensor::scalar(rho_for(params_.tau)));
        rho_tau_a_ = store.add(name + ".rho_tau_a", Tensor::scalar(rho_for(params_.tau_a)));
        rho_tau_b_ = store.add(name + ".rho_tau_b", Tensor::scalar(rho_for(params_.tau_b)));
    }
}

MCNState MCNLayer::initial(Tape& t, std::size_t batch) const {
    return {t.leaf(zeros_like_batch(batch, n_)), t.leaf(zeros_like_batch(batch, n_)),
            t.leaf(zeros_like_batch(batch, n_)), t.leaf(zeros_like_batch(batch, n_))};
}

MCNState MCNLayer::restore(Tape& t, const MCNStateValue& v) const {
    return {t.leaf(v.v_basal), t.leaf(v.v_apical), t.leaf(v.u), t.leaf(v.s)};
}

MCNStateValue MCNLayer::snapshot(const Tape& t, const MCNState& s) {
    return {t.val(s.v_basal), t.val(s.v_apical), t.val(s.u), t.val(s.s)};
}

Var MCNLayer::inv_decay(Tape& t, const Binding& b, ParamRef rho, double fixed) const {
    if (!rho.valid()) return t.leaf(Tensor::scalar(1.0 / fixed));
    Var one = t.leaf(Tensor::scalar(1.0));
    Var tau = t.add(one, t.softplus(b[rho]));
    return t.div(one, tau);
}

double MCNLayer::tau_now(const ParamStore& store) const {
    if (!rho_tau_.valid()) return params_.tau;
    double rho = store.value(rho_tau_).data[0];
    double sp = rho > 30.0 ? rho : std::log1p(std::exp(rho));
    return 1.0 + sp;
}

MCNState MCNLayer::step(Tape& t, const Binding& b, const MCNState& st, Var s_in,
                        Var s_soma) const {
    Var drive_b = t.add(t.linear(s_in, b[w_b_]), t.linear(st.s, b[w_hb_]));
    Var drive_a = t.add(t.linear(s_in, b[w_a_]), t.linear(st.s, b[w_ha_]));

    Var inv_b = inv_decay(t, b, rho_tau_b_, params_.tau_b);
    Var inv_a = inv_decay(t, b, rho_tau_a_, params_.tau_a);
    Var inv_u = inv_decay(t, b, rho_tau_, params_.tau);

    Var vb1 = t.add(st.v_basal, t.mul(t.sub(drive_b, st.v_basal), inv_b));
    Var va1 = t.add(st.v_apical, t.mul(t.sub(drive_a, st.v_apical), inv_a));

    Var z = t.sigmoid(t.scale(va1, params_.beta));
    Var soma = t.linear(s_soma, b[w_s_]);
    Var h = t.add(t.scale(t.sub(vb1, st.u), params_.g_B / params_.g_L), soma);

    Var u1 = t.add(st.u, t.mul(t.sub(t.mul(z, h), st.u), inv_u));
    Var s = t.spike(u1, params_.v_th, params_.alpha);
    Var u_next = t.mul(u1, t.affine(s, -1.0, 1.0));  // multiplicative reset
    return {vb1, va1, u_next, s};
}

Tensor MCNLayer::gate_values(const Tape& t, const MCNState& st) const {
    const Tensor& va = t.val(st.v_apical);
    Tensor flat = va;
    flat.shape = Shape(va.numel());
    Tensor z = gate(flat, params_.beta);
    z.shape = va.shape;
    return z;
}

// ---- readout ----------------------------------------------------------------

ReadoutLayer::ReadoutLayer(ParamStore& store, const std::string& name, std::size_t n_in,
                           std::size_t n_out, double tau_ro, Rng& rng)
    : tau_ro_(tau_ro), n_in_(n_in), n_out_(n_out) {
    if (!(tau_ro >= 1.0)) throw ParamError("tau_ro must be >= 1");
    w_ = store.add(name + ".w", init_uniform(Shape(n_out, n_in), n_in, rng));
}

Var ReadoutLayer::initial(Tape& t, std::size_t batch) const {
    return t.leaf(zeros_like_batch(batch, n_out_));
}

Var ReadoutLayer::step(Tape& t, const Binding& b, Var y, Var spikes) const {
    Var drive = t.linear(spikes, b[w_]);
    return t.add(y, t.scale(t.sub(drive, y), 1.0 / tau_ro_));
}

Var ReadoutLayer::forward(Tape& t, const Binding& b, const std::vector<Var>& spikes) const {
    if (spikes.empty()) throw ContractError("readout over an empty spike list");
    Var y = initial(t, t.val(spikes[0]).shape.d[0]);
    for (Var s : spikes) y = step(t, b, y, s);
    return y;
}

Var trace_step(Tape& t, Var trace, Var spikes, double tau) {
    if (!(tau >= 1.0)) throw ParamError("trace tau must be >= 1");
    return t.add(trace, t.scale(t.sub(spikes, trace), 1.0 / tau));
}

// ---- latents ----------------------------------------------------------------

namespace {

Shape grouped(const Shape& s, const LatentSpec& spec) {
    if (s.rank != 2 || s.d[1] != spec.flat())
        throw ContractError("latent logits must be [B, groups*classes]");
    return Shape(s.d[0], spec.groups, spec.classes);
}

}  // namespace

Var latent_probs(Tape& t, Var logits, const LatentSpec& spec) {
    Shape flat = t.val(logits).shape;
    Var g = t.reshape(logits, grouped(flat, spec));
    return t.reshape(t.softmax(g), flat);
}

Var latent_log_probs(Tape& t, Var logits, const LatentSpec& spec) {
    Shape flat = t.val(logits).shape;
    Var g = t.reshape(logits, grouped(flat, spec));
    return t.reshape(t.log_softmax(g), flat);
}

namespace {

// inverse-CDF pick per group; uf(bi, gi) supplies the uniform draw
template <class UniformFn>
Tensor pick_onehot(const Tensor& p, const LatentSpec& spec, UniformFn&& uf) {
    Tensor onehot = Tensor::zeros(p.shape);
    for (std::size_t bi = 0; bi < p.shape.d[0]; ++bi)
        for (std::size_t gi = 0; gi < spec.groups; ++gi) {
            const double* row = &p.data[bi * spec.flat() + gi * spec.classes];
            double u = uf(bi, gi);
            double acc = 0.0;
            std::size_t pick = spec.classes - 1;
            for (std::size_t c = 0; c < spec.classes; ++c) {
                acc += row[c];
                if (u < acc) {
                    pick = c;
                    break;
                }
            }
            onehot.data[bi * spec.flat() + gi * spec.classes + pick] = 1.0;
        }
    return onehot;
}

// value is exactly the one-hot; gradient is the softmax Jacobian
Var assemble_st(Tape& t, Var probs, Tensor onehot) {
    return t.add(t.leaf(std::move(onehot)), t.sub(probs, t.detach(probs)));
}

std::uint64_t row_content_hash(const Tensor& x, std::size_t row) {
    // float-quantized so rows equal up to tiny kernel-order drift hash alike
    const std::size_t n = x.shape.last();
    std::uint64_t h = 0x9e3779b97f4a7c15ULL;
    for (std::size_t j = 0; j < n; ++j) {
        float f = float(x.data[row * n + j]);
        std::uint32_t bits;
        std::memcpy(&bits, &f, sizeof bits);
        h = hash_u64(h, bits);
    }
    return h;
}

// unit interval shifted away from 0 so log(u) stays finite
double hash_unit_open(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d) {
    return double((hash_u64(a, b, c, d) >> 11) + 1) * 0x1.0p-53;
}

double normal_from_hash(std::uint64_t base, std::uint64_t row, std::uint64_t dim) {
    double u1 = hash_unit_open(base, row, dim, 1);
    double u2 = hash_unit_open(base, row, dim, 2);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

}  // namespace

Var latent_sample_st(Tape& t, Var logits, const LatentSpec& spec, Rng& rng) {
    Var probs = latent_probs(t, logits, spec);
    Tensor onehot =
        pick_onehot(t.val(probs), spec, [&](std::size_t, std::size_t) { return rng.uniform(); });
    return assemble_st(t, probs, std::move(onehot));
}

Var latent_sample_keyed(Tape& t, Var logits, const LatentSpec& spec, std::uint64_t base) {
    Var probs = latent_probs(t, logits, spec);
    const Tensor& raw = t.val(logits);
    std::vector<std::uint64_t> rows(raw.shape.d[0]);
    for (std::size_t bi = 0; bi < rows.size(); ++bi) rows[bi] = row_content_hash(raw, bi);
    Tensor onehot = pick_onehot(t.val(probs), spec, [&](std::size_t bi, std::size_t gi) {
        return u64_to_unit(hash_u64(base, rows[bi], gi));
    });
    return assemble_st(t, probs, std::move(onehot));
}

Tensor latent_mode(const Tensor& probs, const LatentSpec& spec) {
    if (probs.shape.rank != 2 || probs.shape.d[1] != spec.flat())
        throw ContractError("latent probs must be [B, groups*classes]");
    Tensor onehot = Tensor::zeros(probs.shape);
    for (std::size_t bi = 0; bi < probs.shape.d[0]; ++bi)
        for (std::size_t gi = 0; gi < spec.groups; ++gi) {
            const double* row = &probs.data[bi * spec.flat() + gi * spec.classes];
            std::size_t best = 0;
            for (std::size_t c = 1; c < spec.classes; ++c)
                if (row[c] > row[best]) best = c;
            onehot.data[bi * spec.flat() + gi * spec.classes + best] = 1.0;
        }
    return onehot;
}

Var kl_categorical(Tape& t, Var q_logits, Var p_logits, const LatentSpec& spec,
                   double free_nats) {
    Shape flat = t.val(q_logits).shape;
    if (t.val(p_logits).shape != flat) throw ContractError("kl: logit shapes differ");
    Shape g3 = grouped(flat, spec);
    Var lq = t.log_softmax(t.reshape(q_logits, g3));
    Var lp = t.log_softmax(t.reshape(p_logits, g3));
    Var q = t.exp(lq);
    Var kl_group = t.sum_last(t.mul(q, t.sub(lq, lp)));  // [B, groups]
    if (free_nats > 0.0) kl_group = t.clamp_min(kl_group, free_nats);
    return t.mean(t.sum_last(kl_group));
}

namespace {

struct GaussParams {
    Var mean, stddev;
};

GaussParams split_gauss(Tape& t, Var params, std::size_t dim, double min_std) {
    const Shape& s = t.val(params).shape;
    if (s.rank != 2 || s.last() != 2 * dim) throw ContractError("gauss latent: params must be [B, 2*dim]");
    Var mean = t.slice(params, 0, dim);
    Var raw = t.slice(params, dim, 2 * dim);
    return {mean, t.affine(t.softplus(raw), 1.0, min_std)};
}

}  // namespace

GaussLatent gauss_latent_sample(Tape& t, Var params, std::size_t dim, Rng& rng, double min_std) {
    GaussParams p = split_gauss(t, params, dim, min_std);
    Tensor eps{t.val(p.mean).shape};
    for (double& e : eps.data) e = rng.normal();
    Var sample = t.add(p.mean, t.mul(p.stddev, t.leaf(std::move(eps))));
    return {sample, p.mean, p.stddev};
}

GaussLatent gauss_latent_sample_keyed(Tape& t, Var params, std::size_t dim, std::uint64_t base,
                                      double min_std) {
    GaussParams p = split_gauss(t, params, dim, min_std);
    const Tensor& raw = t.val(params);
    Tensor eps{t.val(p.mean).shape};
    for (std::size_t bi = 0; bi < eps.shape.d[0]; ++bi) {
        std::uint64_t row = row_content_hash(raw, bi);
        for (std::size_t j = 0; j < dim; ++j)
            eps(bi, j) = normal_from_hash(base, row, j);
    }
    Var sample = t.add(p.mean, t.mul(p.stddev, t.leaf(std::move(eps))));
    return {sample, p.mean, p.stddev};
}

Var kl_gaussian_diag(Tape& t, Var q_params, Var p_params, std::size_t dim, double min_std,
                     double free_nats) {
    GaussParams q = split_gauss(t, q_params, dim, min_std);
    GaussParams p = split_gauss(t, p_params, dim, min_std);
    Var dmu = t.sub(q.mean, p.mean);
    Var vq = t.mul(q.stddev, q.stddev);
    Var vp = t.mul(p.stddev, p.stddev);
    // per-dim: ln(sp/sq) + (sq^2 + dmu^2)/(2 sp^2) - 1/2
    Var kl = t.add(t.log(t.div(p.stddev, q.stddev)),
                   t.affine(t.div(t.add(vq, t.mul(dmu, dmu)), t.scale(vp, 2.0)), 1.0, -0.5));
    Var row = t.sum_last(kl);  // [B]
    if (free_nats > 0.0) row = t.clamp_min(row, free_nats);
    return t.mean(row);
}

// ---- likelihoods ------------------------------------------------------------

double symlog(double x) { return x >= 0.0 ? std::log1p(x) : -std::log1p(-x); }
double symexp(double x) { return x >= 0.0 ? std::expm1(x) : -std::expm1(-x); }

BinGrid BinGrid::symlog_uniform(int n_bins, double lo, double hi) {
    if (n_bins < 2 || !(hi > lo)) throw ParamError("bad bin grid");
    BinGrid g;
    g.centers.resize(n_bins);
    double a = symlog(lo), b = symlog(hi);
    for (int i = 0; i < n_bins; ++i)
        g.centers[i] = a + (b - a) * static_cast<double>(i) / static_cast<double>(n_bins - 1);
    return g;
}

Var gaussian_nll(Tape& t, Var mean, const Tensor& target) {
    if (t.val(mean).shape != target.shape) throw ContractError("gaussian_nll: shape mismatch");
    if (!target.finite()) throw NumericError("gaussian_nll: non-finite target");
    Var diff = t.sub(mean, t.leaf(target));
    Var per = t.affine(t.mul(diff, diff), 0.5, 0.5 * kLog2Pi);
    return t.mean(t.sum_last(per));
}

Var bernoulli_nll(Tape& t, Var logit, const Tensor& target) {
    if (t.val(logit).shape != target.shape) throw ContractError("bernoulli_nll: shape mismatch");
    if (!target.finite()) throw NumericError("bernoulli_nll: non-finite target");
    Var per = t.sub(t.softplus(logit), t.mul(logit, t.leaf(target)));
    return t.mean(t.sum_last(per));
}

Tensor twohot_encode(const Tensor& targets, const BinGrid& grid, std::size_t* clamped) {
    if (!targets.finite()) throw NumericError("twohot: non-finite target");
    std::size_t n = targets.numel();
    std::size_t k = grid.centers.size();
    Tensor out = Tensor::zeros(Shape(n, k));
    for (std::size_t i = 0; i < n; ++i) {
        double y = symlog(targets.data[i]);
        if (y <= grid.centers.front()) {
            out(i, 0) = 1.0;
            if (y < grid.centers.front() && clamped) ++*clamped;
            continue;
        }
        if (y >= grid.centers.back()) {
            out(i, k - 1) = 1.0;
            if (y > grid.centers.back() && clamped) ++*clamped;
            continue;
        }
        std::size_t hi = 1;
        while (grid.centers[hi] < y) ++hi;
        double span = grid.centers[hi] - grid.centers[hi - 1];
        double w_hi = (y - grid.centers[hi - 1]) / span;
        out(i, hi) = w_hi;
        out(i, hi - 1) = 1.0 - w_hi;
    }
    return out;
}

Var twohot_nll(Tape& t, Var logits, const Tensor& targets, const BinGrid& grid,
               std::size_t* clamped) {
    const Shape& ls = t.val(logits).shape;
    if (ls.rank != 2 || ls.d[1] != grid.centers.size())
        throw ContractError("twohot_nll: logits must be [B, n_bins]");
    if (targets.numel() != ls.d[0]) throw ContractError("twohot_nll: target count mismatch");
    Tensor weights = twohot_encode(targets, grid, clamped);
    Var lp = t.log_softmax(logits);
    return t.mean(t.affine(t.sum_last(t.mul(t.leaf(std::move(weights)), lp)), -1.0, 0.0));
}

Tensor twohot_decode(const Tensor& logits, const BinGrid& grid) {
    if (logits.shape.rank != 2 || logits.shape.d[1] != grid.centers.size())
        throw ContractError("twohot_decode: logits must be [B, n_bins]");
    std::size_t batch = logits.shape.d[0], k = grid.centers.size();
    Tensor out{Shape(batch)};
    for (std::size_t i = 0; i < batch; ++i) {
        const double* row = &logits.data[i * k];
        double m = row[0];
        for (std::size_t j = 1; j < k; ++j) m = std::max(m, row[j]);
        double z = 0.0, acc = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - m);
        for (std::size_t j = 0; j < k; ++j) acc += std::exp(row[j] - m) / z * grid.centers[j];
        out.data[i] = symexp(acc);
    }
    return out;
}

}  // namespace swm
