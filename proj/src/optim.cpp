#include "npad/optim.hpp"

#include <cmath>

#include "npad/errors.hpp"

namespace npad {

OptimizerKind parse_optimizer(const std::string& name) {
    if (name == "adam") return OptimizerKind::Adam;
    if (name == "sgd" || name == "sgd-momentum") return OptimizerKind::SgdMomentum;
    throw ConfigError("unknown optimizer '" + name + "' (expected adam or sgd)");
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::Adam ? "adam" : "sgd"; }

void Adam::step(ParameterSet& params) {
    if (m_.size() != params.size()) {
        m_.assign(params.size(), {});
        v_.assign(params.size(), {});
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(params[i].value.size(), 0.0);
            v_[i].assign(params[i].value.size(), 0.0);
        }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = params[i];
        if (!p.trainable) continue;
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            const double g = p.grad[j];
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
            p.value[j] -= cfg_.learning_rate * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.epsilon);
        }
    }
}

void SgdMomentum::step(ParameterSet& params) {
    if (velocity_.size() != params.size()) {
        velocity_.assign(params.size(), {});
        for (std::size_t i = 0; i < params.size(); ++i) velocity_[i].assign(params[i].value.size(), 0.0);
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = params[i];
        if (!p.trainable) continue;
        auto& vel = velocity_[i];
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            vel[j] = cfg_.momentum * vel[j] + p.grad[j];
            p.value[j] -= cfg_.learning_rate * vel[j];
        }
    }
}

std::unique_ptr<Optimizer> make_optimizer(const OptimizerConfig& cfg) {
    if (cfg.learning_rate <= 0.0) throw ConfigError("learning rate must be positive");
    if (cfg.kind == OptimizerKind::Adam) return std::make_unique<Adam>(cfg);
    return std::make_unique<SgdMomentum>(cfg);
}

}  // namespace npad
