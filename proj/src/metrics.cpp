#include "npad/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "npad/errors.hpp"

namespace npad {

SubgroupConfusion SubgroupConfusion::from_cells(std::string label, long tp_hat, long fn_hat, long fp_hat,
                                                long tn_hat) {
    SubgroupConfusion c;
    c.label = std::move(label);
    c.tp_hat = tp_hat;
    c.fn_hat = fn_hat;
    c.fp_hat = fp_hat;
    c.tn_hat = tn_hat;
    c.tp = tp_hat + fn_hat;
    c.tn = tn_hat + fp_hat;
    c.total = c.tp + c.tn;
    c.validate();
    return c;
}

void SubgroupConfusion::validate() const {
    if (tp < 0 || tp_hat < 0 || fp_hat < 0 || fn_hat < 0 || tn < 0 || tn_hat < 0) {
        throw ParseError("confusion '" + label + "': negative count");
    }
    if (tp != tp_hat + fn_hat || tn != tn_hat + fp_hat || total != tp + tn) {
        throw ParseError("confusion '" + label + "': counts are inconsistent");
    }
}

double SubgroupConfusion::accuracy() const {
    if (total == 0) throw DegenerateError("subgroup '" + label + "' is empty");
    return static_cast<double>(tp_hat + tn_hat) / static_cast<double>(total);
}

nlohmann::json SubgroupConfusion::to_json() const {
    return {{"label", label}, {"tp", tp},         {"tp_hat", tp_hat}, {"fp_hat", fp_hat},
            {"fn_hat", fn_hat}, {"tn", tn},       {"tn_hat", tn_hat}, {"total", total}};
}

SubgroupConfusion SubgroupConfusion::from_json(const nlohmann::json& j) {
    SubgroupConfusion c;
    c.label = j.value("label", "");
    c.tp_hat = j.at("tp_hat").get<long>();
    c.fn_hat = j.at("fn_hat").get<long>();
    c.fp_hat = j.at("fp_hat").get<long>();
    c.tn_hat = j.at("tn_hat").get<long>();
    c.tp = j.value("tp", c.tp_hat + c.fn_hat);
    c.tn = j.value("tn", c.tn_hat + c.fp_hat);
    c.total = j.value("total", c.tp + c.tn);
    c.validate();
    return c;
}

std::vector<SubgroupConfusion> confusion_by_subgroup(std::span<const int> predictions, std::span<const int> labels,
                                                     std::span<const int> subgroup,
                                                     const std::vector<std::string>& group_names,
                                                     std::vector<std::string>* warnings) {
    if (predictions.size() != labels.size() || labels.size() != subgroup.size()) {
        throw DimensionError("confusion_by_subgroup: predictions, labels and subgroups differ in length");
    }
    std::vector<SubgroupConfusion> out(group_names.size());
    for (std::size_t g = 0; g < out.size(); ++g) out[g].label = group_names[g];
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (subgroup[i] < 0 || static_cast<std::size_t>(subgroup[i]) >= out.size()) {
            throw IndexError("sample " + std::to_string(i) + " has subgroup " + std::to_string(subgroup[i]));
        }
        SubgroupConfusion& c = out[subgroup[i]];
        const bool truth = labels[i] != 0, pred = predictions[i] != 0;
        if (truth) {
            ++c.tp;
            ++(pred ? c.tp_hat : c.fn_hat);
        } else {
            ++c.tn;
            ++(pred ? c.fp_hat : c.tn_hat);
        }
        ++c.total;
    }
    for (const auto& c : out) {
        if (c.total == 0 && warnings) warnings->push_back("subgroup '" + c.label + "' is empty");
    }
    return out;
}

double overall_performance(const SubgroupConfusion& c) {
    if (c.total == 0) throw DegenerateError("overall performance undefined for empty subgroup '" + c.label + "'");
    const double err = static_cast<double>(std::labs(c.tp - c.tp_hat) + c.fp_hat + c.fn_hat + std::labs(c.tn - c.tn_hat));
    return err / (2.0 * static_cast<double>(c.total));
}

double ope(const SubgroupConfusion& a, const SubgroupConfusion& b) {
    return std::abs(overall_performance(a) - overall_performance(b));
}

double dob(std::span<const double> accuracies) {
    if (accuracies.size() < 2) throw DegenerateError("DoB needs at least two subgroups");
    // Shift by the first value so equal inputs give exactly zero.
    const double shift = accuracies[0];
    double mean = 0.0;
    for (double a : accuracies) mean += a - shift;
    mean /= static_cast<double>(accuracies.size());
    double var = 0.0;
    for (double a : accuracies) var += (a - shift - mean) * (a - shift - mean);
    return std::sqrt(var / static_cast<double>(accuracies.size()));
}

std::optional<double> try_deo(const SubgroupConfusion& a, const SubgroupConfusion& b) {
    if (a.tp == 0 || b.tp == 0) return std::nullopt;
    return std::abs(static_cast<double>(a.fn_hat) / static_cast<double>(a.tp) -
                    static_cast<double>(b.fn_hat) / static_cast<double>(b.tp));
}

std::optional<double> try_ppv_parity(const SubgroupConfusion& a, const SubgroupConfusion& b) {
    const long pa = a.tp_hat + a.fp_hat, pb = b.tp_hat + b.fp_hat;
    if (pa == 0 || pb == 0) return std::nullopt;
    return std::abs(static_cast<double>(a.tp_hat) / static_cast<double>(pa) -
                    static_cast<double>(b.tp_hat) / static_cast<double>(pb));
}

double deo(const SubgroupConfusion& a, const SubgroupConfusion& b) {
    auto v = try_deo(a, b);
    if (!v) throw DegenerateError("DEO undefined: a subgroup has no ground-truth positives");
    return *v;
}

double ppv_parity(const SubgroupConfusion& a, const SubgroupConfusion& b) {
    auto v = try_ppv_parity(a, b);
    if (!v) throw DegenerateError("PPV parity undefined: a subgroup has no predicted positives");
    return *v;
}

ProtectedBreakdown breakdown_from_confusions(std::string attribute, std::vector<SubgroupConfusion> groups,
                                             std::vector<std::string>* warnings) {
    ProtectedBreakdown b;
    b.attribute = std::move(attribute);
    b.groups = std::move(groups);
    std::vector<double> acc;
    std::vector<const SubgroupConfusion*> present;
    for (const auto& g : b.groups) {
        if (g.total > 0) {
            acc.push_back(g.accuracy());
            present.push_back(&g);
        }
    }
    if (acc.size() >= 2) b.dob = dob(acc);
    if (present.size() == 2) {
        b.ope = ope(*present[0], *present[1]);
        b.deo = try_deo(*present[0], *present[1]);
        b.ppv_parity = try_ppv_parity(*present[0], *present[1]);
    }
    if (warnings) {
        if (present.size() < 2) warnings->push_back(b.attribute + ": fewer than two non-empty subgroups");
        if (present.size() == 2 && !b.deo) warnings->push_back(b.attribute + ": DEO undefined (no positives)");
        if (present.size() == 2 && !b.ppv_parity) {
            warnings->push_back(b.attribute + ": PPV parity undefined (no predicted positives)");
        }
    }
    return b;
}

IntersectionalReport intersectional_from_cells(std::string first, std::string second,
                                               std::vector<SubgroupConfusion> cells,
                                               std::vector<std::string>* warnings) {
    IntersectionalReport r;
    r.first = std::move(first);
    r.second = std::move(second);
    r.cells = std::move(cells);
    const std::size_t n = r.cells.size();
    r.op.assign(n, std::nullopt);
    r.ope_matrix.assign(n, std::vector<std::optional<double>>(n));
    for (std::size_t i = 0; i < n; ++i) {
        if (r.cells[i].total > 0) {
            r.op[i] = overall_performance(r.cells[i]);
        } else if (warnings) {
            warnings->push_back("intersectional cell '" + r.cells[i].label + "' is empty; excluded from pairs");
        }
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (!r.op[i] || !r.op[j]) continue;
            r.ope_matrix[i][j] = std::abs(*r.op[i] - *r.op[j]);
            if (i < j) {
                sum += *r.ope_matrix[i][j];
                ++r.pairs;
            }
        }
    }
    if (r.pairs > 0) r.aggregate = sum / static_cast<double>(r.pairs);
    return r;
}

IntersectionalReport intersectional_report(std::span<const int> predictions, std::span<const int> labels,
                                           const ProtectedColumn& first, const ProtectedColumn& second,
                                           std::vector<std::string>* warnings) {
    if (first.values.size() != labels.size() || second.values.size() != labels.size()) {
        throw DimensionError("intersectional_report: protected columns differ in length from labels");
    }
    std::vector<int> cell(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) cell[i] = 2 * (first.values[i] != 0) + (second.values[i] != 0);
    std::vector<std::string> names;
    for (int a = 0; a < 2; ++a) {
        for (int b = 0; b < 2; ++b) {
            names.push_back(first.name + "=" + std::to_string(a) + "," + second.name + "=" + std::to_string(b));
        }
    }
    return intersectional_from_cells(first.name, second.name,
                                     confusion_by_subgroup(predictions, labels, cell, names, nullptr), warnings);
}

MetricsReport report_from_confusions(std::vector<ProtectedBreakdown> attributes,
                                     std::optional<IntersectionalReport> intersectional) {
    if (attributes.empty()) throw ConfigError("a metrics report needs at least one protected attribute");
    MetricsReport r;
    r.attributes = std::move(attributes);
    r.intersectional = std::move(intersectional);
    long correct = 0;
    for (const auto& g : r.attributes.front().groups) {
        correct += g.tp_hat + g.tn_hat;
        r.samples += g.total;
    }
    if (r.samples == 0) throw DegenerateError("metrics report over zero samples");
    r.overall_accuracy = static_cast<double>(correct) / static_cast<double>(r.samples);
    return r;
}

MetricsReport evaluate_predictions(std::span<const int> predictions, std::span<const int> labels,
                                   const std::vector<ProtectedColumn>& protected_columns, std::string split,
                                   std::string model_hash) {
    if (protected_columns.empty()) throw ConfigError("evaluation needs at least one protected attribute");
    std::vector<std::string> warnings;
    std::vector<ProtectedBreakdown> attrs;
    for (const auto& col : protected_columns) {
        auto groups = confusion_by_subgroup(predictions, labels, col.values,
                                            {col.name + "=0", col.name + "=1"}, &warnings);
        attrs.push_back(breakdown_from_confusions(col.name, std::move(groups), &warnings));
    }
    std::optional<IntersectionalReport> inter;
    if (protected_columns.size() >= 2) {
        inter = intersectional_report(predictions, labels, protected_columns[0], protected_columns[1], &warnings);
    }
    MetricsReport r = report_from_confusions(std::move(attrs), std::move(inter));
    r.split = std::move(split);
    r.model_hash = std::move(model_hash);
    r.warnings = std::move(warnings);
    return r;
}

std::string format_percent(std::optional<double> fraction) {
    if (!fraction) return "undefined";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", *fraction * 100.0);
    return buf;
}

namespace {

nlohmann::json optional_number(std::optional<double> v) { return v ? nlohmann::json(*v) : nlohmann::json("undefined"); }

}  // namespace

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json j;
    j["split"] = split;
    j["model_hash"] = model_hash;
    j["samples"] = samples;
    j["overall_accuracy"] = overall_accuracy;
    j["overall_accuracy_pct"] = format_percent(overall_accuracy);
    j["protected"] = nlohmann::json::array();
    for (const auto& a : attributes) {
        nlohmann::json groups = nlohmann::json::array();
        for (const auto& g : a.groups) {
            nlohmann::json gj = g.to_json();
            gj["accuracy"] = g.total > 0 ? nlohmann::json(g.accuracy()) : nlohmann::json("undefined");
            gj["op"] = g.total > 0 ? nlohmann::json(overall_performance(g)) : nlohmann::json("undefined");
            groups.push_back(gj);
        }
        j["protected"].push_back({{"attribute", a.attribute},
                                  {"subgroups", groups},
                                  {"dob", optional_number(a.dob)},
                                  {"ope", optional_number(a.ope)},
                                  {"deo", optional_number(a.deo)},
                                  {"ppv_parity", optional_number(a.ppv_parity)},
                                  {"pct",
                                   {{"dob", format_percent(a.dob)},
                                    {"ope", format_percent(a.ope)},
                                    {"deo", format_percent(a.deo)},
                                    {"ppv_parity", format_percent(a.ppv_parity)}}}});
    }
    if (intersectional) {
        const auto& in = *intersectional;
        nlohmann::json cells = nlohmann::json::array();
        for (std::size_t i = 0; i < in.cells.size(); ++i) {
            nlohmann::json c = in.cells[i].to_json();
            c["op"] = optional_number(in.op[i]);
            cells.push_back(c);
        }
        nlohmann::json matrix = nlohmann::json::array();
        for (const auto& row : in.ope_matrix) {
            nlohmann::json r = nlohmann::json::array();
            for (const auto& v : row) r.push_back(optional_number(v));
            matrix.push_back(r);
        }
        j["intersectional"] = {{"attributes", {in.first, in.second}},
                               {"cells", cells},
                               {"ope_matrix", matrix},
                               {"pairs", in.pairs},
                               {"mean_ope", optional_number(in.aggregate)},
                               {"mean_ope_pct", format_percent(in.aggregate)}};
    }
    j["warnings"] = warnings;
    return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
    std::vector<ProtectedBreakdown> attrs;
    for (const auto& a : j.at("protected")) {
        std::vector<SubgroupConfusion> groups;
        for (const auto& g : a.at("subgroups")) groups.push_back(SubgroupConfusion::from_json(g));
        attrs.push_back(breakdown_from_confusions(a.at("attribute").get<std::string>(), std::move(groups)));
    }
    std::optional<IntersectionalReport> inter;
    if (j.contains("intersectional")) {
        const auto& in = j.at("intersectional");
        std::vector<SubgroupConfusion> cells;
        for (const auto& c : in.at("cells")) cells.push_back(SubgroupConfusion::from_json(c));
        inter = intersectional_from_cells(in.at("attributes").at(0).get<std::string>(),
                                          in.at("attributes").at(1).get<std::string>(), std::move(cells));
    }
    MetricsReport r = report_from_confusions(std::move(attrs), std::move(inter));
    r.split = j.value("split", "");
    r.model_hash = j.value("model_hash", "");
    r.warnings = j.value("warnings", std::vector<std::string>{});
    return r;
}

std::string MetricsReport::confusions_csv() const {
    std::ostringstream out;
    out << "attribute,subgroup,ground_truth,predicted_positive,predicted_negative\n";
    for (const auto& a : attributes) {
        for (const auto& g : a.groups) {
            out << a.attribute << ',' << g.label << ",positive," << g.tp_hat << ',' << g.fn_hat << '\n';
            out << a.attribute << ',' << g.label << ",negative," << g.fp_hat << ',' << g.tn_hat << '\n';
        }
    }
    return out.str();
}

}  // namespace npad
