#include "swm/optimizer.hpp"

#include <cmath>

namespace swm {

ParamRef ParamStore::add(const std::string& name, Tensor init) {
    if (find(name).valid()) throw ContractError("duplicate parameter name: " + name);
    if (!init.finite()) throw NumericError("non-finite init for parameter " + name);
    names_.push_back(name);
    values_.push_back(std::move(init));
    return ParamRef{names_.size() - 1};
}

ParamRef ParamStore::find(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
        if (names_[i] == name) return ParamRef{i};
    return ParamRef{};
}

std::size_t ParamStore::numel() const {
    std::size_t n = 0;
    for (const Tensor& t : values_) n += t.numel();
    return n;
}

Binding::Binding(Tape& tape, const ParamStore& store) : tape_(tape) {
    vars_.reserve(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) vars_.push_back(tape.leaf(store.value(i)));
}

std::vector<Tensor> Binding::grads() const {
    std::vector<Tensor> out;
    out.reserve(vars_.size());
    for (Var v : vars_) out.push_back(tape_.grad(v));
    return out;
}

void Adam::step(ParamStore& params, const std::vector<Tensor>& grads) {
    if (grads.size() != params.size())
        throw ContractError("optimizer: gradient count does not match parameter count");
    if (m_.empty()) {
        m_.reserve(params.size());
        v_.reserve(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_.push_back(Tensor::zeros(params.value(i).shape));
            v_.push_back(Tensor::zeros(params.value(i).shape));
        }
    }

    double sq = 0.0;
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!grads[i].finite())
            throw NumericError("non-finite gradient for parameter " + params.name(i));
        for (double g : grads[i].data) sq += g * g;
    }
    last_norm_ = std::sqrt(sq);
    double scale = (cfg_.clip_norm > 0.0 && last_norm_ > cfg_.clip_norm)
                       ? cfg_.clip_norm / last_norm_
                       : 1.0;

    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < grads.size(); ++i) {
        Tensor& p = params.value(i);
        if (grads[i].shape != p.shape)
            throw ContractError("optimizer: gradient shape mismatch for " + params.name(i));
        for (std::size_t j = 0; j < p.numel(); ++j) {
            double g = grads[i].data[j] * scale;
            m_[i].data[j] = cfg_.beta1 * m_[i].data[j] + (1.0 - cfg_.beta1) * g;
            v_[i].data[j] = cfg_.beta2 * v_[i].data[j] + (1.0 - cfg_.beta2) * g * g;
            double mhat = m_[i].data[j] / bc1;
            double vhat = v_[i].data[j] / bc2;
            p.data[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
        }
        if (!p.finite()) throw NumericError("non-finite parameter after update: " + params.name(i));
    }
}

}  // namespace swm
