#include <algorithm>
#include <atomic>
#include <cstdio>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "lab.hpp"
#include "npad/checkpoint.hpp"
#include "npad/errors.hpp"
#include "npad/hash.hpp"
#include "npad/metrics.hpp"
#include "npad/runtime.hpp"

namespace npad::lab {

namespace fs = std::filesystem;

namespace {

constexpr const char* kToolVersion = "0.1.0";

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

nlohmann::json read_json(const fs::path& path) {
    if (!fs::exists(path)) throw ConfigError("missing file: " + path.string());
    try {
        return nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

nlohmann::json provenance(const std::string& command, const RunConfig& cfg, nlohmann::json inputs) {
    return {{"command", command},
            {"tool_version", kToolVersion},
            {"config_hash", cfg.hash},
            {"config", cfg.resolved},
            {"inputs", std::move(inputs)}};
}

struct LoadedData {
    Manifest manifest;
    std::string manifest_hash;
    ExperimentData splits;
};

LoadedData load_data(const fs::path& dir) {
    LoadedData d;
    const std::string text = read_text(dir / "manifest.json");
    try {
        d.manifest = Manifest::from_json(nlohmann::json::parse(text));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError((dir / "manifest.json").string() + ": " + e.what());
    }
    d.manifest_hash = fnv1a_hex(text);
    d.splits = render_experiment(d.manifest);
    return d;
}

void require_target(const Manifest& m, const std::string& target) {
    const auto& names = m.attribute_names;
    if (std::find(names.begin(), names.end(), target) == names.end()) {
        throw ConfigError("target attribute '" + target + "' is not in the attribute table");
    }
    const auto& prot = m.protected_names;
    if (std::find(prot.begin(), prot.end(), target) != prot.end()) {
        throw ConfigError("target attribute '" + target + "' is protected");
    }
}

std::vector<std::pair<std::string, nlohmann::json>> experiment_flags(const std::optional<std::string>& target,
                                                                     const std::optional<std::uint64_t>& seed) {
    std::vector<std::pair<std::string, nlohmann::json>> f;
    if (target) f.emplace_back("target", *target);
    if (seed) f.emplace_back("seed", *seed);
    return f;
}

std::string file_hash(const fs::path& p) { return fnv1a_hex(read_text(p)); }

void write_report_outputs(const fs::path& out, const MetricsReport& report, const nlohmann::json& prov) {
    write_json(out / "report.json", report.to_json());
    write_text(out / "confusions.csv", report.confusions_csv());
    std::vector<std::string> labels;
    std::vector<std::optional<double>> dob, ope;
    for (const auto& a : report.attributes) {
        labels.push_back(a.attribute);
        dob.push_back(a.dob ? std::optional<double>(*a.dob * 100.0) : std::nullopt);
        ope.push_back(a.ope ? std::optional<double>(*a.ope * 100.0) : std::nullopt);
    }
    write_text(out / "charts" / "dob.svg", bar_chart_svg("DoB per protected attribute", labels, dob, "DoB (%)"));
    write_text(out / "charts" / "ope.svg", bar_chart_svg("OPE per protected attribute", labels, ope, "OPE (%)"));
    write_json(out / "provenance.json", prov);
}

void write_variant_run(const fs::path& out, const VariantResult& r, const RunConfig& cfg,
                       const nlohmann::json& inputs) {
    fs::create_directories(out);
    r.model.save(out / "model.ckpt");
    write_text(out / "log.jsonl", r.model.log_jsonl());
    if (r.selection) write_json(out / "selection.json", r.selection->to_json(r.disparities ? &*r.disparities : nullptr));
    nlohmann::json prov = provenance("train", cfg, inputs);
    prov["variant"] = r.model.config.at("variant");
    prov["target"] = r.model.config.at("target");
    prov["seed"] = r.model.seed;
    prov["model_config_hash"] = r.model.config_hash;
    prov["checkpoint_hash"] = file_hash(out / "model.ckpt");
    prov["warnings"] = r.warnings;
    write_report_outputs(out, r.report, prov);
}

std::string pct(std::optional<double> fraction) {
    const std::string s = format_percent(fraction);
    return fraction ? s + "%" : s;
}

std::string csv_number(std::optional<double> v) {
    if (!v) return "undefined";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", *v);
    return buf;
}

}  // namespace

// ---------------------------------------------------------------------------

int cmd_generate(const GenerateOptions& o) {
    std::vector<std::pair<std::string, nlohmann::json>> flags;
    if (o.seed) flags.emplace_back("data.seed", *o.seed);
    const RunConfig cfg = resolve_config(o.spec, o.sets, flags);
    const Manifest m = generate_dataset(cfg.data);
    fs::create_directories(o.out);
    write_json(o.out / "manifest.json", m.to_json());
    for (Split s : {Split::Train, Split::Val, Split::Test}) {
        write_text(o.out / ("attributes_" + to_string(s) + ".csv"), attribute_table_csv(m.table(s)));
    }
    nlohmann::json prov = provenance("generate", cfg, nlohmann::json::object());
    prov["seed"] = cfg.data.seed;
    prov["samples"] = m.records.size();
    prov["manifest_hash"] = file_hash(o.out / "manifest.json");
    write_json(o.out / "provenance.json", prov);
    if (o.export_ppm) {
        fs::create_directories(o.out / "ppm");
        for (const auto& r : m.records) write_ppm(o.out / "ppm" / (r.id + ".ppm"), render_sample(r, m));
    }
    std::cout << "wrote " << m.records.size() << " samples to " << o.out.string() << " (config " << cfg.hash << ")\n";
    return 0;
}

int cmd_select(const SelectOptions& o) {
    std::vector<std::pair<std::string, nlohmann::json>> flags = experiment_flags(o.target, o.seed);
    if (o.alpha) flags.emplace_back("alpha", *o.alpha);
    const RunConfig cfg = resolve_config(o.config, o.sets, flags);
    if (o.n == 0) throw ConfigError("--n must be at least 1");
    const LoadedData d = load_data(o.data);
    require_target(d.manifest, cfg.experiment.target);
    fs::create_directories(o.out);

    ExperimentConfig bmt = cfg.experiment;
    bmt.variant = Variant::BMT;
    TrainedModel baseline;
    nlohmann::json inputs = {{"manifest_hash", d.manifest_hash}};
    if (o.baseline) {
        baseline = TrainedModel::load(*o.baseline);
        inputs["baseline_hash"] = file_hash(*o.baseline);
    } else {
        baseline = train_bmt(bmt, d.splits.train.images, d.splits.train.table.training_view());
        baseline.save(o.out / "baseline.ckpt");
        inputs["baseline_hash"] = file_hash(o.out / "baseline.ckpt");
    }
    const SplitData* eval = &d.splits.val;
    std::vector<std::string> warnings;
    if (eval->table.rows() == 0) {
        warnings.push_back("validation split is empty; disparities computed on the training split");
        eval = &d.splits.train;
    }
    const Prediction pred = predict(baseline.model, eval->images);
    const DisparitySet disp = build_disparity_set(pred.labels, eval->table.training_view(), cfg.experiment.target);
    const SelectionResult sel = select_attributes(disp, d.splits.train.table.training_view(), o.n,
                                                  cfg.experiment.alpha, !o.no_independence);
    nlohmann::json j = sel.to_json(&disp);
    j["config_hash"] = cfg.hash;
    j["inputs"] = inputs;
    for (const auto& w : warnings) j["warnings"].push_back(w);
    write_json(o.out / "selection.json", j);
    std::cout << "selected:";
    for (const auto& s : sel.selected) std::cout << ' ' << s;
    std::cout << " (independence gate " << (sel.independence_gate ? "enabled" : "disabled") << ")\n";
    for (const auto& w : sel.warnings) std::cerr << "warning: " << w << '\n';
    return 0;
}

int cmd_train(const TrainOptions& o) {
    auto flags = experiment_flags(o.target, o.seed);
    flags.emplace_back("variant", o.variant);
    const RunConfig cfg = resolve_config(o.config, o.sets, flags);
    const LoadedData d = load_data(o.data);
    require_target(d.manifest, cfg.experiment.target);
    nlohmann::json inputs = {{"manifest_hash", d.manifest_hash}};
    std::optional<TrainedModel> baseline;
    if (o.baseline) {
        baseline = TrainedModel::load(*o.baseline);
        inputs["baseline_hash"] = file_hash(*o.baseline);
    }
    const VariantResult r = run_variant(cfg.experiment, d.splits, baseline ? &*baseline : nullptr);
    write_variant_run(o.out, r, cfg, inputs);
    if (r.baseline && !o.baseline) r.baseline->save(o.out / "baseline.ckpt");
    for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
    const auto& a = r.report.attributes.front();
    std::cout << to_string(cfg.experiment.variant) << ": accuracy " << pct(r.report.overall_accuracy)
              << ", DoB(" << a.attribute << ") " << pct(a.dob) << " (config " << cfg.hash << ")\n";
    return 0;
}

int cmd_evaluate(const EvaluateOptions& o) {
    if (o.from_confusions) {
        if (o.model) throw ConfigError("--from-confusions and --model are exclusive");
        const MetricsReport report = MetricsReport::from_json(read_json(*o.from_confusions));
        const nlohmann::json prov = {{"command", "evaluate"},
                                     {"tool_version", kToolVersion},
                                     {"inputs", {{"confusions_hash", file_hash(*o.from_confusions)}}}};
        write_report_outputs(o.out, report, prov);
        for (const auto& a : report.attributes) {
            std::cout << a.attribute << ": OPE " << pct(a.ope) << ", DoB " << pct(a.dob)
                      << ", DEO " << pct(a.deo) << ", PPV parity " << pct(a.ppv_parity) << '\n';
        }
        return 0;
    }
    if (!o.model || !o.data) throw ConfigError("evaluate needs --model and --data, or --from-confusions");
    TrainedModel t = TrainedModel::load(*o.model);
    const LoadedData d = load_data(*o.data);
    const std::string target = t.config.value("target", std::string(kTargetName));
    const Split split = parse_split(o.split);
    const SplitData& s = split == Split::Train ? d.splits.train : split == Split::Val ? d.splits.val : d.splits.test;
    const auto view = s.table.evaluation_view();
    std::vector<std::string> names = o.protected_attributes;
    if (names.empty()) names = d.manifest.protected_names;
    if (names.empty()) throw ConfigError("no protected attribute to evaluate against");
    if (names.size() > 2) throw ConfigError("at most two protected attributes are supported");
    std::vector<ProtectedColumn> cols;
    for (const auto& n : names) {
        if (!s.table.has_attribute(n)) throw ConfigError("protected attribute '" + n + "' is not in the table");
        cols.push_back({n, view.column(n)});
    }
    const std::string model_hash = file_hash(*o.model);
    const Prediction pred = predict(t.model, s.images);
    const MetricsReport report =
        evaluate_predictions(pred.labels, view.column(target), cols, to_string(split), model_hash);
    nlohmann::json prov = {{"command", "evaluate"},
                           {"tool_version", kToolVersion},
                           {"variant", t.config.value("variant", "")},
                           {"target", target},
                           {"seed", t.seed},
                           {"config_hash", t.config_hash},
                           {"inputs", {{"manifest_hash", d.manifest_hash}, {"checkpoint_hash", model_hash}}}};
    write_report_outputs(o.out, report, prov);
    std::cout << "accuracy " << pct(report.overall_accuracy);
    for (const auto& a : report.attributes) std::cout << ", DoB(" << a.attribute << ") " << pct(a.dob);
    std::cout << '\n';
    return 0;
}

int cmd_compare(const CompareOptions& o) {
    if (o.runs.size() < 2) throw ConfigError("compare needs at least two runs");
    struct Row {
        std::string variant;
        std::size_t runs = 0;
        double accuracy = 0.0;
        std::vector<std::vector<double>> dob, ope;
    };
    std::vector<Row> rows;
    std::vector<std::string> attributes;
    std::optional<std::string> target;
    for (const auto& dir : o.runs) {
        const MetricsReport report = MetricsReport::from_json(read_json(dir / "report.json"));
        const nlohmann::json prov = read_json(dir / "provenance.json");
        const std::string t = prov.value("target", "");
        if (target && *target != t) {
            throw ConfigError("runs have different targets ('" + *target + "' and '" + t + "')");
        }
        target = t;
        std::vector<std::string> names;
        for (const auto& a : report.attributes) names.push_back(a.attribute);
        if (attributes.empty()) attributes = names;
        if (names != attributes) throw ConfigError("runs were evaluated against different protected attributes");
        const std::string variant = prov.value("variant", dir.filename().string());
        auto it = std::find_if(rows.begin(), rows.end(), [&](const Row& r) { return r.variant == variant; });
        if (it == rows.end()) {
            rows.push_back({variant, 0, 0.0, std::vector<std::vector<double>>(names.size()),
                            std::vector<std::vector<double>>(names.size())});
            it = rows.end() - 1;
        }
        it->runs += 1;
        it->accuracy += report.overall_accuracy;
        for (std::size_t i = 0; i < names.size(); ++i) {
            if (report.attributes[i].dob) it->dob[i].push_back(*report.attributes[i].dob);
            if (report.attributes[i].ope) it->ope[i].push_back(*report.attributes[i].ope);
        }
    }
    auto mean = [](const std::vector<double>& v) -> std::optional<double> {
        if (v.empty()) return std::nullopt;
        double s = 0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };

    // Column order: accuracy, then dob/ope per attribute. Accuracy is best when highest, the rest when lowest.
    std::vector<std::string> columns = {"accuracy"};
    for (const auto& a : attributes) {
        columns.push_back("dob_" + a);
        columns.push_back("ope_" + a);
    }
    std::vector<std::vector<std::optional<double>>> table;
    for (auto& r : rows) {
        std::vector<std::optional<double>> v = {r.accuracy / static_cast<double>(r.runs)};
        for (std::size_t i = 0; i < attributes.size(); ++i) {
            v.push_back(mean(r.dob[i]));
            v.push_back(mean(r.ope[i]));
        }
        table.push_back(std::move(v));
    }
    std::vector<std::set<std::string>> best(rows.size());
    for (std::size_t c = 0; c < columns.size(); ++c) {
        std::optional<double> top;
        for (const auto& v : table) {
            if (!v[c]) continue;
            if (!top || (c == 0 ? *v[c] > *top : *v[c] < *top)) top = v[c];
        }
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (top && table[r][c] && *table[r][c] == *top) best[r].insert(columns[c]);
        }
    }

    std::ostringstream csv;
    csv << "variant,runs";
    for (const auto& c : columns) csv << ',' << c;
    csv << ",best\n";
    nlohmann::json summary = nlohmann::json::array();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        csv << rows[r].variant << ',' << rows[r].runs;
        nlohmann::json jr = {{"variant", rows[r].variant}, {"runs", rows[r].runs}};
        for (std::size_t c = 0; c < columns.size(); ++c) {
            csv << ',' << csv_number(table[r][c]);
            jr[columns[c]] = table[r][c] ? nlohmann::json(*table[r][c]) : nlohmann::json("undefined");
        }
        std::string marks;
        for (const auto& c : columns) {
            if (best[r].count(c)) marks += (marks.empty() ? "" : ";") + c;
        }
        csv << ',' << marks << '\n';
        jr["best"] = std::vector<std::string>(best[r].begin(), best[r].end());
        summary.push_back(jr);
    }
    fs::create_directories(o.out);
    write_text(o.out / "comparison.csv", csv.str());
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& d : o.runs) runs.push_back(d.string());
    write_json(o.out / "comparison.json", {{"target", *target}, {"rows", summary}, {"runs", runs}});

    std::vector<std::string> labels;
    std::vector<std::optional<double>> acc;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        labels.push_back(rows[r].variant);
        acc.push_back(*table[r][0] * 100.0);
    }
    write_text(o.out / "charts" / "accuracy.svg", bar_chart_svg("Mean overall accuracy", labels, acc, "accuracy (%)"));
    for (std::size_t i = 0; i < attributes.size(); ++i) {
        std::vector<std::optional<double>> dob, ope;
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const auto d = table[r][1 + 2 * i], p = table[r][2 + 2 * i];
            dob.push_back(d ? std::optional<double>(*d * 100.0) : std::nullopt);
            ope.push_back(p ? std::optional<double>(*p * 100.0) : std::nullopt);
        }
        const std::string suffix = attributes.size() > 1 ? "_" + attributes[i] : "";
        write_text(o.out / "charts" / ("dob" + suffix + ".svg"),
                   bar_chart_svg("Mean DoB (" + attributes[i] + ")", labels, dob, "DoB (%)"));
        write_text(o.out / "charts" / ("ope" + suffix + ".svg"),
                   bar_chart_svg("Mean OPE (" + attributes[i] + ")", labels, ope, "OPE (%)"));
    }
    std::cout << csv.str();
    return 0;
}

int cmd_experiment(const ExperimentOptions& o) {
    const RunConfig cfg = resolve_config(o.config, o.sets);
    const auto seeds = parse_seed_list(o.seeds);
    std::vector<Variant> variants;
    for (const auto& v : o.variants) variants.push_back(parse_variant(v));
    if (variants.empty()) variants = {Variant::BMT, Variant::NPAD1};
    const std::size_t threads = std::min(threads_from_env(), seeds.size());

    std::vector<std::vector<fs::path>> dirs(seeds.size());
    std::vector<std::exception_ptr> errors(seeds.size());
    std::atomic<std::size_t> next{0};
    std::mutex print;
    auto worker = [&]() {
        for (std::size_t i = next++; i < seeds.size(); i = next++) {
            try {
                RunConfig run = cfg;
                run.data.seed = seeds[i];
                run.experiment.seed = seeds[i];
                run.resolved = {{"experiment", run.experiment.to_json()}, {"data", run.data.to_json()}};
                run.hash = fnv1a_hex(run.resolved.dump());
                const Manifest m = generate_dataset(run.data);
                const std::string manifest_hash = fnv1a_hex(m.to_json().dump(2) + "\n");
                const ExperimentData data = render_experiment(m);
                const auto results = run_suite(run.experiment, data, variants);
                for (std::size_t k = 0; k < results.size(); ++k) {
                    const fs::path dir = o.out / ("seed-" + std::to_string(seeds[i])) / to_string(variants[k]);
                    write_variant_run(dir, results[k], run, {{"manifest_hash", manifest_hash}});
                    dirs[i].push_back(dir);
                    std::lock_guard<std::mutex> lock(print);
                    const auto& a = results[k].report.attributes.front();
                    std::cout << "seed " << seeds[i] << ' ' << to_string(variants[k]) << ": accuracy "
                              << pct(results[k].report.overall_accuracy) << ", DoB " << pct(a.dob)
                              << '\n';
                }
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    std::vector<fs::path> all;
    for (const auto& d : dirs) all.insert(all.end(), d.begin(), d.end());
    if (all.size() >= 2) return cmd_compare({all, o.out});
    return 0;
}

}  // namespace npad::lab
