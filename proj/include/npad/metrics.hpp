#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace npad {

/// Per-subgroup confusion counts. "hat" counts are predictions; tp and tn are
/// the ground-truth positive and negative totals.
struct SubgroupConfusion {
    std::string label;
    long tp = 0;
    long tp_hat = 0;
    long fp_hat = 0;
    long fn_hat = 0;
    long tn = 0;
    long tn_hat = 0;
    long total = 0;

    static SubgroupConfusion from_cells(std::string label, long tp_hat, long fn_hat, long fp_hat, long tn_hat);
    /// Throws ParseError if the count identities do not hold.
    void validate() const;
    double accuracy() const;

    nlohmann::json to_json() const;
    static SubgroupConfusion from_json(const nlohmann::json& j);
    friend bool operator==(const SubgroupConfusion&, const SubgroupConfusion&) = default;
};

/// `subgroup[i]` indexes `labels_of_groups`; empty groups are kept with zero counts.
std::vector<SubgroupConfusion> confusion_by_subgroup(std::span<const int> predictions, std::span<const int> labels,
                                                     std::span<const int> subgroup,
                                                     const std::vector<std::string>& group_names,
                                                     std::vector<std::string>* warnings = nullptr);

double overall_performance(const SubgroupConfusion& c);
double ope(const SubgroupConfusion& a, const SubgroupConfusion& b);
/// Population standard deviation; units follow the input.
double dob(std::span<const double> accuracies);
double deo(const SubgroupConfusion& a, const SubgroupConfusion& b);
double ppv_parity(const SubgroupConfusion& a, const SubgroupConfusion& b);

/// Same as above, but empty when a denominator vanishes.
std::optional<double> try_deo(const SubgroupConfusion& a, const SubgroupConfusion& b);
std::optional<double> try_ppv_parity(const SubgroupConfusion& a, const SubgroupConfusion& b);

struct ProtectedColumn {
    std::string name;
    std::vector<int> values;
};

struct ProtectedBreakdown {
    std::string attribute;
    std::vector<SubgroupConfusion> groups;  // value 0, value 1
    std::optional<double> dob;
    std::optional<double> ope;
    std::optional<double> deo;
    std::optional<double> ppv_parity;
};

struct IntersectionalReport {
    std::string first, second;
    std::vector<SubgroupConfusion> cells;  // index 2*first + second
    std::vector<std::optional<double>> op;
    std::vector<std::vector<std::optional<double>>> ope_matrix;
    std::size_t pairs = 0;
    std::optional<double> aggregate;
};

IntersectionalReport intersectional_report(std::span<const int> predictions, std::span<const int> labels,
                                           const ProtectedColumn& first, const ProtectedColumn& second,
                                           std::vector<std::string>* warnings = nullptr);
/// Recomputes the derived fields of an intersectional report from its cells.
IntersectionalReport intersectional_from_cells(std::string first, std::string second,
                                               std::vector<SubgroupConfusion> cells,
                                               std::vector<std::string>* warnings = nullptr);

struct MetricsReport {
    std::string split;
    std::string model_hash;
    long samples = 0;
    double overall_accuracy = 0.0;
    std::vector<ProtectedBreakdown> attributes;
    std::optional<IntersectionalReport> intersectional;
    std::vector<std::string> warnings;

    nlohmann::json to_json() const;
    /// Reads the embedded confusions and recomputes every metric from them.
    static MetricsReport from_json(const nlohmann::json& j);
    /// Ground-truth rows by predicted columns, one block per subgroup.
    std::string confusions_csv() const;
};

ProtectedBreakdown breakdown_from_confusions(std::string attribute, std::vector<SubgroupConfusion> groups,
                                             std::vector<std::string>* warnings = nullptr);

/// Builds a report from confusions only. Overall accuracy comes from the first attribute.
MetricsReport report_from_confusions(std::vector<ProtectedBreakdown> attributes,
                                     std::optional<IntersectionalReport> intersectional = std::nullopt);

/// Full evaluation. With two protected columns the intersectional section is filled.
MetricsReport evaluate_predictions(std::span<const int> predictions, std::span<const int> labels,
                                   const std::vector<ProtectedColumn>& protected_columns, std::string split = "test",
                                   std::string model_hash = "");

/// Percent with two decimals, or "undefined".
std::string format_percent(std::optional<double> fraction);

}  // namespace npad
