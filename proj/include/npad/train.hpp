#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "npad/autodiff.hpp"
#include "npad/data.hpp"
#include "npad/losses.hpp"
#include "npad/metrics.hpp"
#include "npad/optim.hpp"
#include "npad/select.hpp"

namespace npad {

struct ConvBlock {
    std::size_t channels = 8;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t pool = 2;
};

struct ModelSpec {
    std::size_t in_channels = 3;
    std::size_t image_size = 32;
    std::vector<ConvBlock> blocks = {{8}, {16}, {32}};
    std::vector<std::size_t> head = {128, 64};
    std::size_t outputs = 2;

    /// Flattened size of the last block's output.
    std::size_t feature_dim() const;
    void validate() const;
    nlohmann::json to_json() const;
    static ModelSpec from_json(const nlohmann::json& j);
};

/// Convolutional feature extractor plus dense head. Parameter names are
/// conv<i>.w / conv<i>.b and head<i>.w / head<i>.b.
class Model {
public:
    Model() = default;
    Model(ModelSpec spec, std::uint64_t seed);
    Model(ModelSpec spec, ParameterSet params);

    const ModelSpec& spec() const noexcept { return spec_; }
    ParameterSet& params() noexcept { return params_; }
    const ParameterSet& params() const noexcept { return params_; }

    Var features(Graph& g, Var images);
    Var logits_from_features(Graph& g, Var features);
    Var logits(Graph& g, Var images);

    /// Weights of the last convolution, the layer the filter loss targets.
    Parameter& last_conv();
    void set_extractor_trainable(bool trainable);
    void set_head_trainable(bool trainable);
    bool is_extractor_param(const std::string& name) const;
    /// Copies every extractor parameter from `other`.
    void copy_extractor(const Model& other);

    /// Forward-only feature extraction in chunks.
    Tensor extract(const Tensor& images, std::size_t chunk = 250);
    /// Forward-only logits in chunks.
    Tensor predict_logits(const Tensor& images, std::size_t chunk = 250);

private:
    ModelSpec spec_;
    ParameterSet params_;
};

enum class Variant { BMT, PAD, NPAD1, NPAD2, DaclOnly, FrlOnly, NpadDependent };
std::string to_string(Variant v);
Variant parse_variant(const std::string& s);
/// Number of non-protected attributes the variant selects (0 for BMT and PAD).
std::size_t selection_count(Variant v);

enum class Stage1Init { Random, Baseline };
std::string to_string(Stage1Init s);
Stage1Init parse_stage1_init(const std::string& s);

struct StageConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 50;
    OptimizerConfig optimizer;
};

struct ExperimentConfig {
    Variant variant = Variant::BMT;
    std::string target = kTargetName;
    /// Protected attribute used as grouping by PAD.
    std::string protected_attribute = kColorName;
    ModelSpec model;
    /// Cross-entropy recipe of the baseline model.
    StageConfig baseline{10, 50, {OptimizerKind::SgdMomentum, 1e-3, 0.9}};
    StageConfig stage1{10, 200, {OptimizerKind::Adam, 1e-4}};
    StageConfig stage2{10, 50, {OptimizerKind::SgdMomentum, 1e-3, 0.9}};
    LossConfig loss;
    double alpha = 0.05;
    bool freeze_extractor = true;
    Stage1Init stage1_init = Stage1Init::Random;
    std::uint64_t seed = 1;

    /// Applies the variant's loss weights (DACL-only, FRL-only) on top of `loss`.
    LossConfig effective_loss() const;
    void validate() const;
    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    std::string hash() const;
};

struct TrainedModel {
    Model model;
    std::string stage;  // "bmt", "stage1" or "stage2"
    nlohmann::json config;
    std::string config_hash;
    std::uint64_t seed = 0;
    /// One record per epoch.
    std::vector<nlohmann::json> log;
    /// Cluster state at the end of every stage-1 epoch.
    std::vector<ClusterState> snapshots;
    /// Composite class of every training sample (stage 1 only).
    std::vector<int> class_ids;

    nlohmann::json metadata() const;
    void save(const std::filesystem::path& path) const;
    static TrainedModel load(const std::filesystem::path& path);
    std::string log_jsonl() const;
};

/// Training split for one run. `images` rows align with `table` rows.
struct SplitData {
    Tensor images;
    AttributeTable table;
};

struct ExperimentData {
    SplitData train, val, test;
};

/// Renders every split of a manifest.
ExperimentData render_experiment(const Manifest& manifest);

TrainedModel train_bmt(const ExperimentConfig& config, const Tensor& images, const TrainingView& view);

/// `grouping` holds one binary column per grouping attribute, aligned with `view`.
TrainedModel train_stage1(const ExperimentConfig& config, const Tensor& images, const TrainingView& view,
                          const std::vector<std::vector<int>>& grouping, const Model* init = nullptr);

TrainedModel train_stage2(const TrainedModel& stage1, const ExperimentConfig& config, const Tensor& images,
                          const TrainingView& view);

struct Prediction {
    std::vector<int> labels;
    Tensor scores;  // [N x outputs] logits
};

/// Argmax of the head output; ties go to the lower class index.
Prediction predict(Model& model, const Tensor& images);
std::vector<int> argmax_rows(const Tensor& logits);

struct VariantResult {
    TrainedModel model;
    MetricsReport report;
    std::optional<TrainedModel> baseline;
    std::optional<DisparitySet> disparities;
    std::optional<SelectionResult> selection;
    std::vector<std::string> warnings;
    nlohmann::json to_json() const;
};

/// Evaluates on the test split with every protected attribute of its table.
MetricsReport evaluate_model(Model& model, const SplitData& test, const std::string& target,
                             const std::string& model_hash);

/// `baseline`, when given, replaces the BMT model the variant would otherwise train.
VariantResult run_variant(const ExperimentConfig& config, const ExperimentData& data,
                          const TrainedModel* baseline = nullptr);

/// Runs `variants` on one dataset. BMT is trained once from `base` (with its variant
/// replaced) and reused as the baseline of every other variant; it is returned
/// only when listed. Results follow the order of `variants`.
std::vector<VariantResult> run_suite(const ExperimentConfig& base, const ExperimentData& data,
                                     const std::vector<Variant>& variants);

/// Runs independent configurations on up to `threads` worker threads. Results
/// keep the input order and do not depend on the thread count.
std::vector<VariantResult> run_variants(const std::vector<ExperimentConfig>& configs, const ExperimentData& data,
                                        std::size_t threads = 1);

}  // namespace npad
