#pragma once

#include <string>
#include <vector>

#include "swm/tape.hpp"
#include "swm/tensor.hpp"

namespace swm {

// Handle into a ParamStore; stable across the store's lifetime.
struct ParamRef {
    std::size_t idx = static_cast<std::size_t>(-1);
    bool valid() const { return idx != static_cast<std::size_t>(-1); }
};

// Named master copies of all trainable tensors. Registration order is the
// canonical order for gradient flattening and checkpoints.
class ParamStore {
public:
    ParamRef add(const std::string& name, Tensor init);

    std::size_t size() const { return names_.size(); }
    const std::string& name(std::size_t i) const { return names_[i]; }
    Tensor& value(ParamRef r) { return values_[r.idx]; }
    const Tensor& value(ParamRef r) const { return values_[r.idx]; }
    Tensor& value(std::size_t i) { return values_[i]; }
    const Tensor& value(std::size_t i) const { return values_[i]; }

    // index by name; returns an invalid ref when absent
    ParamRef find(const std::string& name) const;

    std::size_t numel() const;

private:
    std::vector<std::string> names_;
    std::vector<Tensor> values_;
};

// Per-forward-pass binding of every parameter as a tape leaf. Layers fetch
// their vars through this; grads() collects gradients in store order after
// backward().
class Binding {
public:
    Binding(Tape& tape, const ParamStore& store);
    // bind pre-made leaves (store order); used by gradient checks
    Binding(Tape& tape, std::vector<Var> vars) : tape_(tape), vars_(std::move(vars)) {}

    Var operator[](ParamRef r) const { return vars_[r.idx]; }
    std::vector<Tensor> grads() const;

private:
    Tape& tape_;
    std::vector<Var> vars_;
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double clip_norm = 100.0;  // global norm, applied before the moment update
};

// Adaptive moment estimation with global-norm clipping. Moments are kept in
// store order; step() mutates the parameter store in place.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(ParamStore& params, const std::vector<Tensor>& grads);

    double last_grad_norm() const { return last_norm_; }
    long long steps() const { return t_; }

    // checkpoint access
    const AdamConfig& config() const { return cfg_; }
    std::vector<Tensor>& moment1() { return m_; }
    std::vector<Tensor>& moment2() { return v_; }
    const std::vector<Tensor>& moment1() const { return m_; }
    const std::vector<Tensor>& moment2() const { return v_; }
    void set_steps(long long t) { t_ = t; }

private:
    AdamConfig cfg_;
    std::vector<Tensor> m_, v_;
    long long t_ = 0;
    double last_norm_ = 0.0;
};

}  // namespace swm
