#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "npad/data.hpp"

namespace npad {

/// Accuracy within grouping class 0 and class 1. `attribute` only labels errors.
std::pair<double, double> per_class_accuracy(std::span<const int> predictions, std::span<const int> labels,
                                             std::span<const int> grouping, const std::string& attribute = "");

/// Population standard deviation of two accuracies, i.e. half their absolute difference.
double disparity(double accuracy0, double accuracy1);

struct DisparityEntry {
    std::string attribute;
    double disparity = 0.0;
    double accuracy0 = 0.0;
    double accuracy1 = 0.0;
};

struct DisparitySet {
    std::string target;
    std::vector<DisparityEntry> entries;  // attribute order of the view
    std::vector<DisparityEntry> sorted;   // descending disparity, ties by name
    std::vector<std::string> warnings;

    nlohmann::json to_json() const;
};

/// One disparity per non-protected attribute other than `target`.
DisparitySet build_disparity_set(std::span<const int> predictions, const TrainingView& eval_split,
                                 const std::string& target);
/// Orders entries by disparity descending, then attribute name.
std::vector<DisparityEntry> sort_disparities(std::vector<DisparityEntry> entries);

/// Counts {{n00, n01}, {n10, n11}}: rows are the first variable, columns the second.
using Contingency = std::array<std::array<double, 2>, 2>;
Contingency contingency(std::span<const int> a, std::span<const int> b);

struct ChiSquare {
    double statistic = 0.0;
    double p_value = 1.0;
};

/// Pearson statistic without continuity correction, p-value at one degree of freedom.
ChiSquare chi_square_independence(const Contingency& table);
double cramers_v(const Contingency& table);
/// Survival function of the chi-square distribution with one degree of freedom.
double chi_square_sf_df1(double x);

struct SelectionResult {
    std::string target;
    std::vector<std::string> selected;
    std::vector<double> disparities;  // of the selected attributes
    std::size_t requested = 0;
    double alpha = 0.05;
    bool independence_gate = true;
    /// Pairwise tests among the selected attributes, in selection order.
    std::vector<std::vector<ChiSquare>> independence_report;
    std::vector<std::string> warnings;

    std::size_t n() const noexcept { return selected.size(); }
    nlohmann::json to_json(const DisparitySet* disparities_used = nullptr) const;
    static SelectionResult from_json(const nlohmann::json& j);
};

/// Greedy walk down the sorted disparity set. With the gate on, a candidate is
/// accepted only if its p-value against every selected attribute exceeds alpha.
SelectionResult select_attributes(const DisparitySet& disparities, const TrainingView& table, std::size_t n,
                                  double alpha = 0.05, bool independence_gate = true);

}  // namespace npad
