#include "swm/env.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "swm/error.hpp"
#include "swm/io.hpp"

namespace swm {
namespace {

// wraps into (-pi, pi]
double wrap_angle(double x) {
    constexpr double two_pi = 2.0 * std::numbers::pi;
    x = std::fmod(x + std::numbers::pi, two_pi);
    if (x <= 0.0) x += two_pi;
    return x - std::numbers::pi;
}

double clip(double x, double lo, double hi) { return std::min(std::max(x, lo), hi); }

// Clips every component into [-1, 1], counting violations. Also rejects
// wrong-sized or non-finite actions outright.
Tensor clip_action(const Tensor& action, std::size_t act_dim, long long* clipped) {
    if (action.shape.numel() != act_dim)
        throw ContractError("action has " + std::to_string(action.shape.numel()) +
                            " components, env expects " + std::to_string(act_dim));
    if (!action.finite()) throw NumericError("non-finite action component");
    Tensor out = action;
    for (double& a : out.data) {
        if (a < -1.0 || a > 1.0) {
            ++*clipped;
            a = clip(a, -1.0, 1.0);
        }
    }
    return out;
}

}  // namespace

void EnvSpec::validate() const {
    if (obs_dim == 0 || act_dim == 0) throw ParamError("env dimensions must be positive");
    if (max_episode_steps < 2) throw ParamError("max_episode_steps must be at least 2");
}

PendulumLite::PendulumLite(std::size_t max_episode_steps, bool image_obs)
    : image_obs_(image_obs) {
    spec_.obs_dim = image_obs ? 256 : 3;
    spec_.act_dim = 1;
    spec_.max_episode_steps = max_episode_steps;
    spec_.validate();
}

Tensor PendulumLite::observe() const {
    if (!image_obs_) {
        Tensor o{Shape(3)};
        o(0) = std::cos(theta_);
        o(1) = std::sin(theta_);
        o(2) = omega_ / kMaxSpeed;
        return o;
    }
    // 16x16 grayscale rod from the pivot, one pixel wide with anti-aliased
    // edges; row 0 is the top of the image.
    Tensor o{Shape(256)};
    const double cx = 7.5, cy = 7.5, len = 6.0;
    const double ex = cx + len * std::sin(theta_);
    const double ey = cy - len * std::cos(theta_);
    for (int r = 0; r < 16; ++r) {
        for (int c = 0; c < 16; ++c) {
            const double px = c, py = r;
            // distance from the pixel center to the pivot->tip segment
            const double vx = ex - cx, vy = ey - cy;
            const double t = clip(((px - cx) * vx + (py - cy) * vy) / (len * len), 0.0, 1.0);
            const double dx = px - (cx + t * vx), dy = py - (cy + t * vy);
            const double d = std::sqrt(dx * dx + dy * dy);
            o(static_cast<std::size_t>(r * 16 + c)) = clip(1.5 - d, 0.0, 1.0);
        }
    }
    return o;
}

Tensor PendulumLite::reset(std::uint64_t seed) {
    Rng rng(hash_u64(seed, 0x70656e64756c756dULL));
    theta_ = wrap_angle(rng.uniform(-std::numbers::pi, std::numbers::pi));
    omega_ = rng.uniform(-1.0, 1.0);
    steps_ = 0;
    return observe();
}

void PendulumLite::reset_to(double theta, double omega) {
    theta_ = wrap_angle(theta);
    omega_ = clip(omega, -kMaxSpeed, kMaxSpeed);
    steps_ = 0;
}

StepResult PendulumLite::step(const Tensor& action) {
    const Tensor a = clip_action(action, 1, &clipped_);
    const double torque = kMaxTorque * a(0);

    // cost first, from the pre-step state, so the upright fixed point with a
    // zero action scores exactly 0
    const double reward =
        -(theta_ * theta_ + 0.1 * omega_ * omega_ + 0.001 * a(0) * a(0));

    // semi-implicit Euler: velocity first, then position with the new velocity
    const double accel = 3.0 * kGravity / (2.0 * kLength) * std::sin(theta_) +
                         3.0 / (kMass * kLength * kLength) * torque;
    omega_ = clip(omega_ + accel * kDt, -kMaxSpeed, kMaxSpeed);
    theta_ = wrap_angle(theta_ + omega_ * kDt);

    ++steps_;
    StepResult r;
    r.obs = observe();
    r.reward = reward;
    r.cont = steps_ >= spec_.max_episode_steps ? 0.0 : 1.0;
    return r;
}

SparseReacherLite::SparseReacherLite(std::size_t max_episode_steps) {
    spec_.obs_dim = 8;
    spec_.act_dim = 2;
    spec_.max_episode_steps = max_episode_steps;
    spec_.validate();
}

void SparseReacherLite::fingertip(double* x, double* y) const {
    *x = kLink * std::cos(phi1_) + kLink * std::cos(phi1_ + phi2_);
    *y = kLink * std::sin(phi1_) + kLink * std::sin(phi1_ + phi2_);
}

Tensor SparseReacherLite::observe() const {
    double tx, ty;
    fingertip(&tx, &ty);
    Tensor o{Shape(8)};
    o(0) = std::cos(phi1_);
    o(1) = std::sin(phi1_);
    o(2) = std::cos(phi2_);
    o(3) = std::sin(phi2_);
    o(4) = goal_x_;
    o(5) = goal_y_;
    // difference spans at most the workspace diameter of 2
    o(6) = (tx - goal_x_) / 2.0;
    o(7) = (ty - goal_y_) / 2.0;
    return o;
}

Tensor SparseReacherLite::reset(std::uint64_t seed) {
    Rng rng(hash_u64(seed, 0x72656163686572ULL));
    phi1_ = wrap_angle(rng.uniform(-std::numbers::pi, std::numbers::pi));
    phi2_ = wrap_angle(rng.uniform(-std::numbers::pi, std::numbers::pi));
    // goal in an annulus the arm can always reach
    const double radius = rng.uniform(0.3, 0.9);
    const double angle = rng.uniform(-std::numbers::pi, std::numbers::pi);
    goal_x_ = radius * std::cos(angle);
    goal_y_ = radius * std::sin(angle);
    steps_ = 0;
    return observe();
}

void SparseReacherLite::reset_to(double phi1, double phi2, double goal_x, double goal_y) {
    phi1_ = wrap_angle(phi1);
    phi2_ = wrap_angle(phi2);
    goal_x_ = goal_x;
    goal_y_ = goal_y;
    steps_ = 0;
}

StepResult SparseReacherLite::step(const Tensor& action) {
    const Tensor a = clip_action(action, 2, &clipped_);
    phi1_ = wrap_angle(phi1_ + kJointSpeed * a(0) * kDt);
    phi2_ = wrap_angle(phi2_ + kJointSpeed * a(1) * kDt);

    double tx, ty;
    fingertip(&tx, &ty);
    const double dx = tx - goal_x_, dy = ty - goal_y_;
    const double reward = std::sqrt(dx * dx + dy * dy) <= kGoalRadius ? 1.0 : 0.0;

    ++steps_;
    StepResult r;
    r.obs = observe();
    r.reward = reward;
    r.cont = steps_ >= spec_.max_episode_steps ? 0.0 : 1.0;
    return r;
}

std::unique_ptr<Env> make_env(const std::string& name, std::size_t max_episode_steps,
                              bool image_obs) {
    if (name == "pendulum") return std::make_unique<PendulumLite>(max_episode_steps, image_obs);
    if (name == "reacher") {
        if (image_obs) throw ParamError("reacher has no image observations");
        return std::make_unique<SparseReacherLite>(max_episode_steps);
    }
    throw ParamError("unknown env '" + name + "' (try pendulum or reacher)");
}

void Trajectory::validate() const {
    if (obs.empty()) throw ContractError("empty trajectory");
    if (actions.size() != obs.size() || rewards.size() != obs.size() ||
        continues.size() != obs.size())
        throw ContractError("trajectory column lengths disagree");
    for (std::size_t t = 0; t < obs.size(); ++t) {
        if (obs[t].shape != obs[0].shape || actions[t].shape != actions[0].shape)
            throw ContractError("trajectory row shapes disagree");
    }
    if (actions[0].abs_max() != 0.0 || rewards[0] != 0.0)
        throw ContractError("trajectory row 0 must carry a zero action and reward");
}

Trajectory Trajectory::begin(const Tensor& first_obs, std::size_t act_dim) {
    Trajectory tr;
    tr.obs.push_back(first_obs);
    tr.actions.push_back(Tensor{Shape(act_dim)});
    tr.rewards.push_back(0.0);
    tr.continues.push_back(1.0);
    return tr;
}

void Trajectory::push(const Tensor& action, const StepResult& r) {
    obs.push_back(r.obs);
    actions.push_back(action);
    rewards.push_back(r.reward);
    continues.push_back(r.cont);
}

ReplayBuffer::ReplayBuffer(std::size_t capacity_rows) : capacity_(capacity_rows) {
    if (capacity_ == 0) throw ParamError("replay capacity must be positive");
}

void ReplayBuffer::add(Trajectory ep) {
    ep.validate();
    if (ep.rows() > capacity_)
        throw ParamError("episode of " + std::to_string(ep.rows()) +
                         " rows exceeds replay capacity " + std::to_string(capacity_));
    rows_ += ep.rows();
    eps_.push_back(std::move(ep));
    std::size_t drop = 0;
    while (rows_ > capacity_) rows_ -= eps_[drop++].rows();
    if (drop > 0) eps_.erase(eps_.begin(), eps_.begin() + static_cast<std::ptrdiff_t>(drop));
}

WMBatch ReplayBuffer::sample(std::size_t B, std::size_t L, std::uint64_t seed) const {
    if (B == 0 || L == 0) throw ParamError("batch and window sizes must be positive");
    if (eps_.empty()) throw ContractError("sampling from an empty replay buffer");

    // windows of L rows that fit inside one episode
    std::vector<std::size_t> starts_per_ep(eps_.size(), 0);
    std::size_t total = 0;
    for (std::size_t e = 0; e < eps_.size(); ++e) {
        if (eps_[e].rows() >= L) {
            starts_per_ep[e] = eps_[e].rows() - L + 1;
            total += starts_per_ep[e];
        }
    }
    if (total == 0)
        throw ContractError("no stored episode is long enough for a window of " +
                            std::to_string(L) + " rows");

    const std::size_t obs_dim = eps_[0].obs[0].shape.numel();
    const std::size_t act_dim = eps_[0].actions[0].shape.numel();
    WMBatch batch;
    batch.obs = Tensor{Shape(B, L, obs_dim)};
    batch.actions = Tensor{Shape(B, L, act_dim)};
    batch.rewards = Tensor{Shape(B, L)};
    batch.continues = Tensor{Shape(B, L)};
    batch.is_first = Tensor{Shape(B, L)};

    Rng rng(hash_u64(seed, 0x7265706c6179ULL));
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t pick = rng.below(total);
        std::size_t e = 0;
        while (pick >= starts_per_ep[e]) pick -= starts_per_ep[e++];
        const Trajectory& ep = eps_[e];
        for (std::size_t l = 0; l < L; ++l) {
            const std::size_t t = pick + l;
            for (std::size_t d = 0; d < obs_dim; ++d) batch.obs(b, l, d) = ep.obs[t](d);
            for (std::size_t d = 0; d < act_dim; ++d) batch.actions(b, l, d) = ep.actions[t](d);
            batch.rewards(b, l) = ep.rewards[t];
            batch.continues(b, l) = ep.continues[t];
            batch.is_first(b, l) = t == 0 ? 1.0 : 0.0;
        }
    }
    return batch;
}

namespace {
constexpr char kEpisodeMagic[4] = {'S', 'W', 'E', '1'};
}

void save_episodes(const std::string& path, const std::vector<Trajectory>& eps) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    BinWriter w(out);
    w.bytes(kEpisodeMagic, 4);
    w.u32(static_cast<std::uint32_t>(eps.size()));
    for (const Trajectory& ep : eps) {
        ep.validate();
        w.u32(static_cast<std::uint32_t>(ep.obs[0].shape.numel()));
        w.u32(static_cast<std::uint32_t>(ep.actions[0].shape.numel()));
        w.u32(static_cast<std::uint32_t>(ep.rows()));
        for (std::size_t t = 0; t < ep.rows(); ++t) {
            for (double v : ep.obs[t].data) w.f64(v);
            for (double v : ep.actions[t].data) w.f64(v);
            w.f64(ep.rewards[t]);
            w.f64(ep.continues[t]);
        }
    }
    out.flush();
    if (!out) throw IoError("write failed: " + path);
}

std::vector<Trajectory> load_episodes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    BinReader r(in);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kEpisodeMagic, 4) != 0) r.fail("not an episode log (bad magic)");
    const std::uint32_t n_eps = r.u32();
    std::vector<Trajectory> eps;
    eps.reserve(n_eps);
    for (std::uint32_t e = 0; e < n_eps; ++e) {
        const std::uint32_t obs_dim = r.u32();
        const std::uint32_t act_dim = r.u32();
        const std::uint32_t rows = r.u32();
        if (obs_dim == 0 || act_dim == 0) r.fail("episode with zero-sized rows");
        if (rows == 0) r.fail("episode with no rows");
        if (obs_dim > (1u << 20) || act_dim > (1u << 20) || rows > (1u << 24))
            r.fail("implausible episode header");
        Trajectory ep;
        for (std::uint32_t t = 0; t < rows; ++t) {
            Tensor o{Shape(obs_dim)};
            for (double& v : o.data) v = r.f64();
            Tensor a{Shape(act_dim)};
            for (double& v : a.data) v = r.f64();
            ep.obs.push_back(std::move(o));
            ep.actions.push_back(std::move(a));
            ep.rewards.push_back(r.f64());
            ep.continues.push_back(r.f64());
        }
        eps.push_back(std::move(ep));
    }
    if (!r.at_eof()) r.fail("trailing bytes after final episode");
    return eps;
}

}  // namespace swm
