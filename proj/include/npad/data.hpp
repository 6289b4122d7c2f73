#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "npad/tensor.hpp"

namespace npad {

class TrainingView;
class EvaluationView;

/// Binary attribute annotations, one row per sample. Protected columns are only
/// reachable through evaluation_view().
class AttributeTable {
public:
    /// Called on every column read with the column name and whether it is protected.
    using ReadObserver = std::function<void(const std::string& column, bool is_protected)>;

    AttributeTable() = default;
    AttributeTable(std::vector<std::string> sample_ids, std::vector<std::string> attribute_names,
                   std::vector<std::uint8_t> values, std::vector<std::string> protected_names);

    std::size_t rows() const noexcept { return sample_ids_.size(); }
    std::size_t cols() const noexcept { return attribute_names_.size(); }
    const std::vector<std::string>& sample_ids() const noexcept { return sample_ids_; }
    const std::vector<std::string>& attribute_names() const noexcept { return attribute_names_; }
    const std::vector<std::string>& protected_names() const noexcept { return protected_names_; }
    bool is_protected(const std::string& name) const;
    bool has_attribute(const std::string& name) const;

    TrainingView training_view() const;
    EvaluationView evaluation_view() const;

    AttributeTable subset(std::span<const std::size_t> rows) const;

    void set_read_observer(ReadObserver observer) const { observer_ = std::move(observer); }

private:
    friend class TrainingView;
    friend class EvaluationView;

    std::size_t column_index(const std::string& name) const;
    std::vector<int> read_column(std::size_t col) const;

    std::vector<std::string> sample_ids_;
    std::vector<std::string> attribute_names_;
    std::vector<std::uint8_t> values_;  // rows x cols
    std::vector<std::string> protected_names_;
    mutable ReadObserver observer_;
};

/// Training-time projection: protected columns are absent.
class TrainingView {
public:
    explicit TrainingView(const AttributeTable& table) : table_(&table) {}

    std::size_t rows() const noexcept { return table_->rows(); }
    std::vector<std::string> names() const;
    bool contains(const std::string& name) const;
    /// FirewallError for a protected column, ConfigError for an unknown one.
    std::vector<int> column(const std::string& name) const;

private:
    const AttributeTable* table_;
};

/// Evaluation-time access to every column, protected ones included.
class EvaluationView {
public:
    explicit EvaluationView(const AttributeTable& table) : table_(&table) {}

    std::size_t rows() const noexcept { return table_->rows(); }
    const std::vector<std::string>& protected_names() const noexcept { return table_->protected_names(); }
    std::vector<int> column(const std::string& name) const;

private:
    const AttributeTable* table_;
};

/// CSV with header `id,<attr>,...`; cells in {-1,0,1} with -1 and 0 both mapping to 0.
AttributeTable load_attribute_table(const std::filesystem::path& path, const std::vector<std::string>& protected_names);
AttributeTable parse_attribute_table(const std::string& csv, const std::vector<std::string>& protected_names);
std::string attribute_table_csv(const AttributeTable& table);

// ---------------------------------------------------------------------------
// Synthetic shapes

inline constexpr const char* kTargetName = "shape";
inline constexpr const char* kColorName = "color";
inline constexpr const char* kSizeName = "size";
inline constexpr std::array<const char*, 3> kCueNames = {"fill", "border", "marker"};

struct DatasetSpec {
    std::size_t image_size = 32;
    std::size_t n_train = 5000;
    std::size_t n_val = 1000;
    std::size_t n_test = 2000;
    /// phi between shape and color on the train and val splits.
    double target_protected_correlation = 0.8;
    /// phi between each non-protected cue and color, in cue order.
    std::vector<double> nonprotected_protected_correlations = {0.95, 0.0};
    std::size_t n_nonprotected = 2;
    /// P(shape = 1) on the train and val splits.
    double target_rate = 0.55;
    /// Adds "size" as a second protected attribute, independent of everything else.
    bool second_protected = false;
    double pixel_noise = 0.25;
    std::uint64_t seed = 1;

    /// SpecError naming the parameter or the violated cell probability.
    void validate() const;
    nlohmann::json to_json() const;
    static DatasetSpec from_json(const nlohmann::json& j);
};

/// Joint cell probabilities {p11, p10, p01, p00} of two binary variables with
/// marginals pa, pb and correlation phi. Throws SpecError if a cell leaves [0, 1].
std::array<double, 4> phi_cells(double phi, double pa, double pb, const std::string& what);

enum class Split { Train, Val, Test };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct SampleRecord {
    std::string id;
    Split split = Split::Train;
    std::vector<int> values;  // Manifest::attribute_names order
    std::uint64_t render_seed = 0;
};

struct Manifest {
    DatasetSpec spec;
    std::vector<std::string> attribute_names;
    std::vector<std::string> protected_names;
    std::vector<SampleRecord> records;

    std::size_t attribute_index(const std::string& name) const;
    std::vector<std::size_t> indices(Split s) const;
    /// Attribute table over the given records (all records when `rows` is empty).
    AttributeTable table(std::span<const std::size_t> rows = {}) const;
    AttributeTable table(Split s) const;

    nlohmann::json to_json() const;
    static Manifest from_json(const nlohmann::json& j);
};

Manifest generate_dataset(const DatasetSpec& spec);

/// [3 x H x W] image centred on zero (background is 0).
Tensor render_sample(const SampleRecord& record, const Manifest& manifest);
/// Renders the records into one [N x 3 x H x W] tensor.
Tensor render_batch(const Manifest& manifest, std::span<const std::size_t> rows);

void write_ppm(const std::filesystem::path& path, const Tensor& image);

struct Partition {
    std::vector<std::size_t> train, val, test;
};

/// Stratified by target x first protected attribute; deterministic in `seed`.
Partition split(const AttributeTable& table, const std::string& target, std::array<double, 3> fractions,
                std::uint64_t seed);
Partition split(const Manifest& manifest, std::array<double, 3> fractions, std::uint64_t seed);

/// Pearson correlation of two binary columns (0 when either is constant).
double phi_coefficient(std::span<const int> a, std::span<const int> b);

}  // namespace npad
