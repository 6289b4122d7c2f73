#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "npad/tensor.hpp"

namespace npad {

/// A named trainable tensor with its accumulated gradient.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;
};

/// Ordered collection of parameters. References stay valid as parameters are added.
class ParameterSet {
public:
    Parameter& add(std::string name, Tensor value);
    Parameter& get(const std::string& name);
    const Parameter& get(const std::string& name) const;
    bool contains(const std::string& name) const;

    std::size_t size() const noexcept { return params_.size(); }
    Parameter& operator[](std::size_t i) { return params_[i]; }
    const Parameter& operator[](std::size_t i) const { return params_[i]; }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    void zero_grad();
    void set_trainable(bool trainable);
    std::size_t scalar_count() const;

private:
    std::deque<Parameter> params_;
};

/// Handle to a node of a Graph.
struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
};

struct Conv2dOptions {
    std::size_t stride = 1;
    /// Zero padding on each border; negative selects "same" padding ((k-1)/2).
    int padding = -1;
};

/// Reverse-mode tape over tensor-valued operations.
///
/// Every op evaluates eagerly and records what backward needs. Parameters are
/// leaves: backward() adds their gradient into Parameter::grad (so a parameter
/// used twice accumulates both contributions) and then clears the tape.
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t node)>;

    Var constant(Tensor value);
    Var parameter(Parameter& p);

    Var dense(Var x, Var weights, Var bias);
    Var conv2d(Var x, Var filters, Var bias, Conv2dOptions opts = {});
    Var conv2d(Var x, Var filters, Conv2dOptions opts = {});
    Var relu(Var x);
    Var max_pool2d(Var x, std::size_t window);
    Var flatten(Var x);
    Var softmax_cross_entropy(Var logits, std::span<const int> labels);

    Var add(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double factor);
    Var square(Var a);
    Var sum(Var a);

    /// Node whose value is computed by the caller. `backward` receives the node
    /// id and must push the node's gradient into its inputs via accumulate_grad().
    Var custom(std::vector<Var> inputs, Tensor value, BackwardFn backward);

    const Tensor& value(Var v) const;
    /// Gradient of the last backward pass; only valid inside a custom BackwardFn.
    const Tensor& grad_of(std::size_t node) const;
    const Tensor& value_of(std::size_t node) const;
    const std::vector<std::size_t>& inputs_of(std::size_t node) const;
    bool needs_grad(std::size_t node) const;
    void accumulate_grad(std::size_t node, std::span<const double> g);
    double* grad_buffer(std::size_t node);

    void backward(Var loss);
    void clear();
    std::size_t node_count() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        Parameter* param = nullptr;
        bool requires_grad = false;
        // Op-specific saved state (im2col buffers, argmax indices, softmax).
        std::vector<double> saved;
        std::vector<std::size_t> saved_index;
    };

    Node& node(Var v);
    const Node& node(Var v) const;
    Var push(Node n);
    bool any_requires_grad(std::initializer_list<Var> vs) const;

    std::vector<Node> nodes_;
};

/// Maximum relative error between analytic and central-difference gradients
/// over every trainable scalar of `params`:
///   max |a - n| / max(|a|, |n|, 1e-12).
/// `build` constructs the scalar loss on a fresh graph; it is called once for the
/// analytic pass and twice per scalar for the numeric pass.
double grad_check(ParameterSet& params, const std::function<Var(Graph&)>& build, double eps = 1e-5);

}  // namespace npad
