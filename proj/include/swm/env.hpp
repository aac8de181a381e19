#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "swm/rng.hpp"
#include "swm/tensor.hpp"
#include "swm/world_model.hpp"

namespace swm {

// Action space is always [-1, 1] per dimension.
struct EnvSpec {
    std::size_t obs_dim = 0;
    std::size_t act_dim = 0;
    std::size_t max_episode_steps = 0;

    void validate() const;
};

struct StepResult {
    Tensor obs;
    double reward = 0.0;
    double cont = 1.0;  // 0 exactly when the episode has hit its step limit
};

class Env {
public:
    virtual ~Env() = default;
    virtual const EnvSpec& spec() const = 0;
    virtual Tensor reset(std::uint64_t seed) = 0;
    virtual StepResult step(const Tensor& action) = 0;
    // out-of-bounds action components seen so far (they get clipped)
    virtual long long clipped_actions() const = 0;
};

// Torque-controlled rigid pendulum, angle 0 pointing up, wrapped to (-pi, pi].
// Angular velocity is clipped to +-8. Observations are [cos, sin, omega/8], or
// a 16x16 anti-aliased rendering of the rod when image_obs is set.
class PendulumLite : public Env {
public:
    explicit PendulumLite(std::size_t max_episode_steps = 200, bool image_obs = false);

    const EnvSpec& spec() const override { return spec_; }
    Tensor reset(std::uint64_t seed) override;
    StepResult step(const Tensor& action) override;
    long long clipped_actions() const override { return clipped_; }

    // direct state override for experiments; resets the step counter
    void reset_to(double theta, double omega);
    double theta() const { return theta_; }
    double omega() const { return omega_; }

    static constexpr double kGravity = 10.0, kMass = 1.0, kLength = 1.0, kDt = 0.05;
    static constexpr double kMaxSpeed = 8.0, kMaxTorque = 2.0;

private:
    Tensor observe() const;

    EnvSpec spec_;
    bool image_obs_;
    double theta_ = 0.0, omega_ = 0.0;
    std::size_t steps_ = 0;
    long long clipped_ = 0;
};

// Velocity-controlled two-joint planar arm; reward 1 while the fingertip is
// within the goal radius, else 0.
class SparseReacherLite : public Env {
public:
    explicit SparseReacherLite(std::size_t max_episode_steps = 100);

    const EnvSpec& spec() const override { return spec_; }
    Tensor reset(std::uint64_t seed) override;
    StepResult step(const Tensor& action) override;
    long long clipped_actions() const override { return clipped_; }

    void reset_to(double phi1, double phi2, double goal_x, double goal_y);
    void fingertip(double* x, double* y) const;

    static constexpr double kLink = 0.5, kJointSpeed = 2.0, kDt = 0.05;
    static constexpr double kGoalRadius = 0.15;

private:
    Tensor observe() const;

    EnvSpec spec_;
    double phi1_ = 0.0, phi2_ = 0.0, goal_x_ = 0.0, goal_y_ = 0.0;
    std::size_t steps_ = 0;
    long long clipped_ = 0;
};

// names: "pendulum", "reacher"
std::unique_ptr<Env> make_env(const std::string& name, std::size_t max_episode_steps,
                              bool image_obs = false);

// One episode in replay-row form: row 0 is the reset observation with a zero
// action, zero reward and continue 1; row t holds the action that produced
// observation t and the reward that arrived with it.
struct Trajectory {
    std::vector<Tensor> obs;
    std::vector<Tensor> actions;
    std::vector<double> rewards;
    std::vector<double> continues;

    std::size_t rows() const { return obs.size(); }
    void validate() const;

    static Trajectory begin(const Tensor& first_obs, std::size_t act_dim);
    void push(const Tensor& action, const StepResult& r);
};

// Fixed-capacity episode store (capacity counted in rows). Evicts whole
// episodes oldest-first; sampled windows never cross episode boundaries.
class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity_rows);

    void add(Trajectory ep);
    std::size_t rows() const { return rows_; }
    std::size_t episodes() const { return eps_.size(); }
    const Trajectory& episode(std::size_t i) const { return eps_.at(i); }

    // uniform over all (episode, offset) windows of length L; deterministic
    // under the seed
    WMBatch sample(std::size_t B, std::size_t L, std::uint64_t seed) const;

private:
    std::size_t capacity_;
    std::size_t rows_ = 0;
    std::vector<Trajectory> eps_;  // oldest first
};

// episode log container (magic "SWE1"): exact round-trip of trajectories
void save_episodes(const std::string& path, const std::vector<Trajectory>& eps);
std::vector<Trajectory> load_episodes(const std::string& path);

}  // namespace swm
