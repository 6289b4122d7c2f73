#include "npad/select.hpp"

#include <algorithm>
#include <cmath>

#include "npad/errors.hpp"

namespace npad {

std::pair<double, double> per_class_accuracy(std::span<const int> predictions, std::span<const int> labels,
                                             std::span<const int> grouping, const std::string& attribute) {
    if (predictions.size() != labels.size() || labels.size() != grouping.size()) {
        throw DimensionError("per_class_accuracy: vectors differ in length");
    }
    std::array<long, 2> correct{}, total{};
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int g = grouping[i] != 0;
        ++total[g];
        correct[g] += (predictions[i] != 0) == (labels[i] != 0);
    }
    for (int g = 0; g < 2; ++g) {
        if (total[g] == 0) {
            throw DegenerateError("attribute '" + attribute + "' has no samples in class " + std::to_string(g));
        }
    }
    return {static_cast<double>(correct[0]) / static_cast<double>(total[0]),
            static_cast<double>(correct[1]) / static_cast<double>(total[1])};
}

double disparity(double accuracy0, double accuracy1) { return std::abs(accuracy0 - accuracy1) / 2.0; }

std::vector<DisparityEntry> sort_disparities(std::vector<DisparityEntry> entries) {
    std::sort(entries.begin(), entries.end(), [](const DisparityEntry& a, const DisparityEntry& b) {
        if (a.disparity != b.disparity) return a.disparity > b.disparity;
        return a.attribute < b.attribute;
    });
    return entries;
}

DisparitySet build_disparity_set(std::span<const int> predictions, const TrainingView& eval_split,
                                 const std::string& target) {
    if (!eval_split.contains(target)) throw ConfigError("target '" + target + "' is not a readable attribute");
    DisparitySet set;
    set.target = target;
    const auto labels = eval_split.column(target);
    for (const auto& name : eval_split.names()) {
        if (name == target) continue;
        const auto grouping = eval_split.column(name);
        try {
            auto [a0, a1] = per_class_accuracy(predictions, labels, grouping, name);
            set.entries.push_back({name, disparity(a0, a1), a0, a1});
        } catch (const DegenerateError& e) {
            set.warnings.push_back(std::string("excluded: ") + e.what());
        }
    }
    set.sorted = sort_disparities(set.entries);
    return set;
}

nlohmann::json DisparitySet::to_json() const {
    auto entry = [](const DisparityEntry& e) {
        return nlohmann::json{
            {"attribute", e.attribute}, {"disparity", e.disparity}, {"accuracy0", e.accuracy0}, {"accuracy1", e.accuracy1}};
    };
    nlohmann::json j;
    j["target"] = target;
    j["entries"] = nlohmann::json::array();
    for (const auto& e : entries) j["entries"].push_back(entry(e));
    j["sorted"] = nlohmann::json::array();
    for (const auto& e : sorted) j["sorted"].push_back(e.attribute);
    j["warnings"] = warnings;
    return j;
}

Contingency contingency(std::span<const int> a, std::span<const int> b) {
    if (a.size() != b.size()) throw DimensionError("contingency: columns differ in length");
    Contingency t{};
    for (std::size_t i = 0; i < a.size(); ++i) t[a[i] != 0][b[i] != 0] += 1;
    return t;
}

double chi_square_sf_df1(double x) {
    if (x <= 0.0) return 1.0;
    return std::erfc(std::sqrt(x / 2.0));
}

ChiSquare chi_square_independence(const Contingency& t) {
    const double a = t[0][0], b = t[0][1], c = t[1][0], d = t[1][1];
    const double r0 = a + b, r1 = c + d, c0 = a + c, c1 = b + d;
    if (r0 <= 0 || r1 <= 0 || c0 <= 0 || c1 <= 0) {
        throw DegenerateError("chi-square test undefined: contingency table has a zero marginal");
    }
    const double n = r0 + r1;
    const double diff = a * d - b * c;
    const double stat = n * diff * diff / (r0 * r1 * c0 * c1);
    return {stat, chi_square_sf_df1(stat)};
}

double cramers_v(const Contingency& t) {
    const double n = t[0][0] + t[0][1] + t[1][0] + t[1][1];
    const double v = std::sqrt(chi_square_independence(t).statistic / n);
    return std::min(v, 1.0);
}

SelectionResult select_attributes(const DisparitySet& disparities, const TrainingView& table, std::size_t n,
                                  double alpha, bool independence_gate) {
    if (n == 0) throw ConfigError("requested attribute count must be at least 1");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
    if (disparities.sorted.empty()) throw SelectionError("disparity set for '" + disparities.target + "' is empty");

    SelectionResult r;
    r.target = disparities.target;
    r.requested = n;
    r.alpha = alpha;
    r.independence_gate = independence_gate;

    std::vector<std::vector<int>> columns;
    for (const auto& cand : disparities.sorted) {
        if (r.selected.size() == n) break;
        auto col = table.column(cand.attribute);
        if (independence_gate && !r.selected.empty()) {
            bool ok = true;
            for (std::size_t k = 0; k < columns.size(); ++k) {
                try {
                    if (chi_square_independence(contingency(columns[k], col)).p_value <= alpha) {
                        ok = false;
                        break;
                    }
                } catch (const DegenerateError&) {
                    r.warnings.push_back("skipped '" + cand.attribute + "': constant column, independence undefined");
                    ok = false;
                    break;
                }
            }
            if (!ok) continue;
        }
        r.selected.push_back(cand.attribute);
        r.disparities.push_back(cand.disparity);
        columns.push_back(std::move(col));
    }
    if (r.selected.size() < n) {
        r.warnings.push_back("only " + std::to_string(r.selected.size()) + " of " + std::to_string(n) +
                             " attributes could be selected; candidate list exhausted");
    }

    r.independence_report.assign(columns.size(), std::vector<ChiSquare>(columns.size()));
    for (std::size_t i = 0; i < columns.size(); ++i) {
        for (std::size_t j = 0; j < columns.size(); ++j) {
            if (i == j) continue;
            try {
                r.independence_report[i][j] = chi_square_independence(contingency(columns[i], columns[j]));
            } catch (const DegenerateError&) {
                r.independence_report[i][j] = {std::nan(""), std::nan("")};
            }
        }
    }
    return r;
}

nlohmann::json SelectionResult::to_json(const DisparitySet* disparities_used) const {
    nlohmann::json j;
    j["target"] = target;
    j["selected"] = selected;
    j["disparities"] = disparities;
    j["n"] = n();
    j["requested"] = requested;
    j["alpha"] = alpha;
    j["independence_gate"] = independence_gate ? "enabled" : "disabled";
    nlohmann::json stats = nlohmann::json::array(), pvals = nlohmann::json::array();
    for (const auto& row : independence_report) {
        nlohmann::json s = nlohmann::json::array(), p = nlohmann::json::array();
        for (const auto& c : row) {
            s.push_back(std::isnan(c.statistic) ? nlohmann::json(nullptr) : nlohmann::json(c.statistic));
            p.push_back(std::isnan(c.p_value) ? nlohmann::json(nullptr) : nlohmann::json(c.p_value));
        }
        stats.push_back(s);
        pvals.push_back(p);
    }
    j["chi_square"] = stats;
    j["p_values"] = pvals;
    j["warnings"] = warnings;
    if (disparities_used) j["disparity_set"] = disparities_used->to_json();
    return j;
}

SelectionResult SelectionResult::from_json(const nlohmann::json& j) {
    SelectionResult r;
    try {
        r.target = j.at("target").get<std::string>();
        r.selected = j.at("selected").get<std::vector<std::string>>();
        r.disparities = j.at("disparities").get<std::vector<double>>();
        r.requested = j.value("requested", r.selected.size());
        r.alpha = j.value("alpha", 0.05);
        r.independence_gate = j.value("independence_gate", "enabled") == "enabled";
        r.warnings = j.value("warnings", std::vector<std::string>{});
        const auto& s = j.at("chi_square");
        const auto& p = j.at("p_values");
        r.independence_report.assign(s.size(), std::vector<ChiSquare>(s.size()));
        for (std::size_t a = 0; a < s.size(); ++a) {
            for (std::size_t b = 0; b < s.size(); ++b) {
                r.independence_report[a][b] = {s[a][b].is_null() ? std::nan("") : s[a][b].get<double>(),
                                               p[a][b].is_null() ? std::nan("") : p[a][b].get<double>()};
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("selection: ") + e.what());
    }
    return r;
}

}  // namespace npad
