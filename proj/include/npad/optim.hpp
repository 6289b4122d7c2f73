#pragma once

#include <memory>
#include <string>
#include <vector>

#include "npad/autodiff.hpp"

namespace npad {

enum class OptimizerKind { Adam, SgdMomentum };

OptimizerKind parse_optimizer(const std::string& name);
std::string to_string(OptimizerKind kind);

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::Adam;
    double learning_rate = 1e-4;
    double momentum = 0.9;  // SGD only
    double beta1 = 0.9;     // Adam only
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// First-order update rule over the trainable members of a ParameterSet.
/// State is keyed by parameter position, so the same set must be passed every step.
class Optimizer {
public:
    virtual ~Optimizer() = default;
    virtual void step(ParameterSet& params) = 0;
};

class Adam final : public Optimizer {
public:
    explicit Adam(OptimizerConfig cfg) : cfg_(cfg) {}
    void step(ParameterSet& params) override;

private:
    OptimizerConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

class SgdMomentum final : public Optimizer {
public:
    explicit SgdMomentum(OptimizerConfig cfg) : cfg_(cfg) {}
    void step(ParameterSet& params) override;

private:
    OptimizerConfig cfg_;
    std::vector<std::vector<double>> velocity_;
};

std::unique_ptr<Optimizer> make_optimizer(const OptimizerConfig& cfg);

}  // namespace npad
