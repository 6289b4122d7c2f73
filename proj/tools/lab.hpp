#pragma once

#include <cstdint>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "npad/data.hpp"
#include "npad/train.hpp"

namespace npad::lab {

/// Resolved configuration of one command: config file, then --set overrides, then
/// dedicated flags. Experiment keys sit at the top level, dataset keys under `data`.
struct RunConfig {
    ExperimentConfig experiment;
    DatasetSpec data;
    nlohmann::json resolved;
    std::string hash;
};

/// TOML, or JSON when the extension is .json. ConfigError/ParseError on failure.
nlohmann::json read_config_file(const std::filesystem::path& path);

/// Sets a dotted key; `raw` is read as a TOML value and falls back to a plain string.
void set_dotted(nlohmann::json& j, const std::string& key, const std::string& raw);
void set_dotted(nlohmann::json& j, const std::string& key, nlohmann::json value);

RunConfig resolve_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& sets,
                         const std::vector<std::pair<std::string, nlohmann::json>>& flags = {});

/// Vertical bar chart; undefined values are drawn as a gap labelled "n/a".
std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& labels,
                          const std::vector<std::optional<double>>& values, const std::string& unit);

/// 0 success, 2 configuration or validation error, 3 runtime or numeric failure.
int exit_code_for(const std::exception& e);

/// "1-10", "3" or "1,4,7".
std::vector<std::uint64_t> parse_seed_list(const std::string& s);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Commands. Each returns the process exit code; errors propagate as exceptions.

struct GenerateOptions {
    std::optional<std::filesystem::path> spec;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::filesystem::path out;
    bool export_ppm = false;
};
int cmd_generate(const GenerateOptions& o);

struct SelectOptions {
    std::filesystem::path data;
    std::optional<std::filesystem::path> config;
    std::vector<std::string> sets;
    std::optional<std::string> target;
    std::size_t n = 1;
    std::optional<double> alpha;
    bool no_independence = false;
    std::optional<std::uint64_t> seed;
    std::optional<std::filesystem::path> baseline;
    std::filesystem::path out;
};
int cmd_select(const SelectOptions& o);

struct TrainOptions {
    std::string variant;
    std::filesystem::path data;
    std::optional<std::filesystem::path> config;
    std::vector<std::string> sets;
    std::optional<std::string> target;
    std::optional<std::uint64_t> seed;
    std::optional<std::filesystem::path> baseline;
    std::filesystem::path out;
};
int cmd_train(const TrainOptions& o);

struct EvaluateOptions {
    std::optional<std::filesystem::path> model;
    std::optional<std::filesystem::path> data;
    std::vector<std::string> protected_attributes;
    std::string split = "test";
    std::optional<std::filesystem::path> from_confusions;
    std::filesystem::path out;
};
int cmd_evaluate(const EvaluateOptions& o);

struct CompareOptions {
    std::vector<std::filesystem::path> runs;
    std::filesystem::path out;
};
int cmd_compare(const CompareOptions& o);

struct ExperimentOptions {
    std::optional<std::filesystem::path> config;
    std::vector<std::string> sets;
    std::vector<std::string> variants;
    std::string seeds = "1";
    std::filesystem::path out;
};
int cmd_experiment(const ExperimentOptions& o);

}  // namespace npad::lab
