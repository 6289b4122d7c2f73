#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "npad/autodiff.hpp"
#include "npad/tensor.hpp"

namespace npad {

// ---------------------------------------------------------------------------
// Composite classes

/// Encodes (target, selected bits) as target * 2^n + sum_j bit_j * 2^(n-1-j).
int composite_class_id(int target_bit, std::span<const int> selected_bits);
/// Inverse of composite_class_id: returns {target, bit_0, ..., bit_{n-1}}.
std::vector<int> composite_class_bits(int class_id, std::size_t n_selected);
/// Sorted distinct ids, i.e. the combinations that actually occur.
std::vector<int> active_classes(std::span<const int> class_ids);

// ---------------------------------------------------------------------------
// Moving cluster statistics

struct ClassSummary {
    std::vector<double> mean;  // Z_p, feature dimension
    double std = 0.0;          // population std over every scalar entry of the class rows
    std::size_t count = 0;
};

struct BatchClassSummary {
    std::size_t dim = 0;
    std::map<int, ClassSummary> classes;
};

BatchClassSummary batch_summarize(const Tensor& features, std::span<const int> class_ids);

double scalar_mean(std::span<const double> v);

/// Pooled mean of a running mean (prev_count rows) and a batch mean (batch_count rows).
std::vector<double> update_moving_mean(std::span<const double> prev_mean, std::size_t prev_count,
                                       std::span<const double> batch_mean, std::size_t batch_count);

/// Pooled standard deviation; `merged_scalar_mean` is the scalar mean of the merged
/// moving mean and enters both terms.
double update_moving_std(double prev_std, double prev_scalar_mean, std::size_t prev_count, double batch_std,
                         double batch_scalar_mean, std::size_t batch_count, double merged_scalar_mean);

struct ClassMoments {
    std::vector<double> mean;  // M_p
    double std = 0.0;          // V_p
    std::size_t count = 0;     // r_p
};

/// Per-composite-class running moments for one epoch.
class ClusterState {
public:
    ClusterState() = default;
    explicit ClusterState(std::size_t dim) : dim_(dim) {}

    void merge(const BatchClassSummary& batch);
    void reset();

    std::size_t dim() const noexcept { return dim_; }
    long iteration() const noexcept { return iteration_; }
    const std::map<int, ClassMoments>& classes() const noexcept { return classes_; }
    std::vector<int> active() const;
    const ClassMoments* find(int class_id) const;

    /// Mean Euclidean distance between centroids over unordered active pairs (0 if < 2).
    double mean_centroid_distance() const;
    std::string digest() const;

    nlohmann::json to_json() const;
    static ClusterState from_json(const nlohmann::json& j);

    friend bool operator==(const ClusterState&, const ClusterState&) = default;

private:
    std::size_t dim_ = 0;
    long iteration_ = 0;
    std::map<int, ClassMoments> classes_;
};

bool operator==(const ClassMoments& a, const ClassMoments& b);

/// Cluster loss over every active class of `state`:
///   sum over ordered pairs p != q of V_p V_q / max(|M_p - M_q|^2, eps_dist).
/// Empty when fewer than two classes are active.
std::optional<double> dacl(const ClusterState& state, double eps_dist = 1e-8);

struct DaclStep {
    bool skipped = false;  // fewer than two active classes after the merge
    double loss = 0.0;
    ClusterState merged;
    /// d loss / d features, [batch x dim]; prior state is treated as constant.
    std::vector<double> feature_grad;
};

DaclStep dacl_step(const Tensor& features, std::span<const int> class_ids, const ClusterState& prior,
                   double eps_dist = 1e-8, bool want_grad = true);

/// Records the cluster loss of `features` on the tape. The merged state is written
/// to `merged` so the caller can commit it after the optimizer step.
Var dacl_loss(Graph& g, Var features, std::span<const int> class_ids, const ClusterState& prior,
              double eps_dist, DaclStep& merged);

// ---------------------------------------------------------------------------
// Filter redundancy

/// Convolution weights of one layer, laid out [filters x channels x height x width].
class FilterBank {
public:
    explicit FilterBank(Tensor weights);

    std::size_t count() const { return weights_.dim(0); }
    std::size_t channels() const { return weights_.dim(1); }
    std::size_t height() const { return weights_.dim(2); }
    std::size_t width() const { return weights_.dim(3); }
    std::size_t filter_size() const { return channels() * height() * width(); }

    std::span<const double> filter(std::size_t i) const;
    double magnitude(std::size_t i) const;
    /// Indices of the k largest-magnitude filters, descending; ties keep the lower index first.
    std::vector<std::size_t> top_k(std::size_t k) const;
    const Tensor& weights() const noexcept { return weights_; }

private:
    Tensor weights_;
};

/// Subtracts each channel's own mean. Input is one filter, [channels x height x width].
Tensor mean_normalize_filter(const Tensor& filter);

double frl(const FilterBank& bank, std::size_t top_k);
/// Gradient of frl() w.r.t. every weight; the top-k selection is held fixed.
Tensor frl_gradient(const FilterBank& bank, std::size_t top_k);
Var frl_loss(Graph& g, Var filters, std::size_t top_k);

// ---------------------------------------------------------------------------

struct LossConfig {
    double lambda_dacl = 0.5;
    double lambda_frl = 0.5;
    std::size_t top_k = 8;
    double eps_dist = 1e-8;

    void validate(std::size_t filter_count) const;
};

double combined_loss(double dacl_value, double frl_value, const LossConfig& cfg);

}  // namespace npad
