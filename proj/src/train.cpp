#include "npad/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <set>
#include <sstream>
#include <thread>

#include "npad/checkpoint.hpp"
#include "npad/errors.hpp"
#include "npad/hash.hpp"
#include "npad/random.hpp"

namespace npad {

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose, std::uint64_t index = 0) {
    Fnv1a h;
    h.update(seed);
    h.update(purpose);
    h.update(index);
    return h.value();
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::string_view stage, std::size_t epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, stage, epoch));
    rng.shuffle(order);
    return order;
}

/// Rows of `src` (first axis) at `idx`.
Tensor gather_rows(const Tensor& src, std::span<const std::size_t> idx) {
    Shape shape = src.shape();
    const std::size_t per = src.size() / shape[0];
    shape[0] = idx.size();
    Tensor out(shape);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::copy_n(src.raw() + idx[i] * per, per, out.raw() + i * per);
    }
    return out;
}

template <class T>
std::vector<T> gather(const std::vector<T>& src, std::span<const std::size_t> idx) {
    std::vector<T> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = src[idx[i]];
    return out;
}

void require_finite(double v, const std::string& stage, std::size_t epoch, const std::vector<nlohmann::json>& log) {
    if (std::isfinite(v)) return;
    std::string last = "none";
    if (!log.empty()) last = std::to_string(log.back().at("epoch").get<std::size_t>());
    throw NumericError(stage + ": non-finite loss in epoch " + std::to_string(epoch) + " (last finite epoch: " + last +
                       ")");
}

nlohmann::json optimizer_json(const OptimizerConfig& o) {
    return {{"optimizer", to_string(o.kind)},
            {"learning_rate", o.learning_rate},
            {"momentum", o.momentum},
            {"beta1", o.beta1},
            {"beta2", o.beta2},
            {"epsilon", o.epsilon}};
}

nlohmann::json stage_json(const StageConfig& s) {
    nlohmann::json j = optimizer_json(s.optimizer);
    j["epochs"] = s.epochs;
    j["batch_size"] = s.batch_size;
    return j;
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
    for (const auto& [k, v] : j.items()) {
        if (!known.count(k)) throw ConfigError("unknown configuration key '" + where + k + "'");
    }
}

StageConfig stage_from_json(const nlohmann::json& j, StageConfig s, const std::string& where) {
    reject_unknown(j, {"optimizer", "learning_rate", "momentum", "beta1", "beta2", "epsilon", "epochs", "batch_size"},
                   where + ".");
    if (j.contains("optimizer")) s.optimizer.kind = parse_optimizer(j.at("optimizer").get<std::string>());
    s.optimizer.learning_rate = j.value("learning_rate", s.optimizer.learning_rate);
    s.optimizer.momentum = j.value("momentum", s.optimizer.momentum);
    s.optimizer.beta1 = j.value("beta1", s.optimizer.beta1);
    s.optimizer.beta2 = j.value("beta2", s.optimizer.beta2);
    s.optimizer.epsilon = j.value("epsilon", s.optimizer.epsilon);
    s.epochs = j.value("epochs", s.epochs);
    s.batch_size = j.value("batch_size", s.batch_size);
    return s;
}

void validate_stage(const StageConfig& s, const std::string& name) {
    if (s.batch_size == 0) throw ConfigError(name + ".batch_size must be positive");
    if (!(s.optimizer.learning_rate > 0.0)) throw ConfigError(name + ".learning_rate must be positive");
    if (s.optimizer.momentum < 0.0 || s.optimizer.momentum >= 1.0) throw ConfigError(name + ".momentum must lie in [0, 1)");
}

}  // namespace

// ---------------------------------------------------------------------------
// ModelSpec and Model

std::size_t ModelSpec::feature_dim() const {
    std::size_t size = image_size;
    for (const auto& b : blocks) {
        const std::size_t pad = (b.kernel - 1) / 2;
        size = (size + 2 * pad - b.kernel) / b.stride + 1;
        if (b.pool > 1) size /= b.pool;
    }
    return blocks.empty() ? in_channels * image_size * image_size : blocks.back().channels * size * size;
}

void ModelSpec::validate() const {
    if (blocks.empty()) throw ConfigError("model needs at least one convolution block");
    std::size_t size = image_size;
    for (const auto& b : blocks) {
        if (b.channels == 0 || b.kernel == 0 || b.stride == 0) throw ConfigError("convolution block sizes must be positive");
        const std::size_t pad = (b.kernel - 1) / 2;
        if (b.kernel > size + 2 * pad) throw DimensionError("convolution kernel exceeds padded input");
        size = (size + 2 * pad - b.kernel) / b.stride + 1;
        if (b.pool > 1) {
            if (b.pool > size) throw DimensionError("pooling window exceeds feature map");
            size /= b.pool;
        }
    }
    if (outputs < 2) throw ConfigError("model needs at least two outputs");
}

nlohmann::json ModelSpec::to_json() const {
    nlohmann::json blocks_json = nlohmann::json::array();
    for (const auto& b : blocks) {
        blocks_json.push_back({{"channels", b.channels}, {"kernel", b.kernel}, {"stride", b.stride}, {"pool", b.pool}});
    }
    return {{"in_channels", in_channels}, {"image_size", image_size}, {"blocks", blocks_json},
            {"head", head},               {"outputs", outputs}};
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
    reject_unknown(j, {"in_channels", "image_size", "blocks", "head", "outputs"}, "model.");
    ModelSpec s;
    s.in_channels = j.value("in_channels", s.in_channels);
    s.image_size = j.value("image_size", s.image_size);
    if (j.contains("blocks")) {
        s.blocks.clear();
        for (const auto& b : j.at("blocks")) {
            ConvBlock c;
            c.channels = b.value("channels", c.channels);
            c.kernel = b.value("kernel", c.kernel);
            c.stride = b.value("stride", c.stride);
            c.pool = b.value("pool", c.pool);
            s.blocks.push_back(c);
        }
    }
    s.head = j.value("head", s.head);
    s.outputs = j.value("outputs", s.outputs);
    return s;
}

Model::Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    Rng rng(derive_seed(seed, "init"));
    auto he = [&](Shape shape, std::size_t fan_in) {
        Tensor t(std::move(shape));
        const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (double& v : t.data()) v = rng.normal(0.0, sd);
        return t;
    };
    std::size_t in = spec_.in_channels;
    for (std::size_t i = 0; i < spec_.blocks.size(); ++i) {
        const auto& b = spec_.blocks[i];
        params_.add("conv" + std::to_string(i) + ".w", he({b.channels, in, b.kernel, b.kernel}, in * b.kernel * b.kernel));
        params_.add("conv" + std::to_string(i) + ".b", Tensor({b.channels}, 0.0));
        in = b.channels;
    }
    std::size_t width = spec_.feature_dim();
    std::vector<std::size_t> sizes = spec_.head;
    sizes.push_back(spec_.outputs);
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        params_.add("head" + std::to_string(i) + ".w", he({width, sizes[i]}, width));
        params_.add("head" + std::to_string(i) + ".b", Tensor({sizes[i]}, 0.0));
        width = sizes[i];
    }
}

Model::Model(ModelSpec spec, ParameterSet params) : spec_(std::move(spec)), params_(std::move(params)) {
    Model reference(spec_, 0);
    for (const auto& p : reference.params()) {
        if (!params_.contains(p.name)) throw ParseError("checkpoint lacks parameter '" + p.name + "'");
        if (params_.get(p.name).value.shape() != p.value.shape()) {
            throw DimensionError("checkpoint parameter '" + p.name + "' has shape " +
                                 shape_to_string(params_.get(p.name).value.shape()) + ", expected " +
                                 shape_to_string(p.value.shape()));
        }
    }
}

Var Model::features(Graph& g, Var x) {
    for (std::size_t i = 0; i < spec_.blocks.size(); ++i) {
        const auto& b = spec_.blocks[i];
        const std::string n = "conv" + std::to_string(i);
        x = g.conv2d(x, g.parameter(params_.get(n + ".w")), g.parameter(params_.get(n + ".b")),
                     Conv2dOptions{b.stride, -1});
        x = g.relu(x);
        if (b.pool > 1) x = g.max_pool2d(x, b.pool);
    }
    return g.flatten(x);
}

Var Model::logits_from_features(Graph& g, Var h) {
    const std::size_t layers = spec_.head.size() + 1;
    const std::size_t in = g.value(h).dim(1);
    if (in != spec_.feature_dim()) {
        throw DimensionError("head expects " + std::to_string(spec_.feature_dim()) + " features, got " +
                             std::to_string(in));
    }
    for (std::size_t i = 0; i < layers; ++i) {
        const std::string n = "head" + std::to_string(i);
        h = g.dense(h, g.parameter(params_.get(n + ".w")), g.parameter(params_.get(n + ".b")));
        if (i + 1 < layers) h = g.relu(h);
    }
    return h;
}

Var Model::logits(Graph& g, Var images) { return logits_from_features(g, features(g, images)); }

Parameter& Model::last_conv() { return params_.get("conv" + std::to_string(spec_.blocks.size() - 1) + ".w"); }

bool Model::is_extractor_param(const std::string& name) const { return name.rfind("conv", 0) == 0; }

void Model::set_extractor_trainable(bool trainable) {
    for (auto& p : params_) {
        if (is_extractor_param(p.name)) p.trainable = trainable;
    }
}

void Model::set_head_trainable(bool trainable) {
    for (auto& p : params_) {
        if (!is_extractor_param(p.name)) p.trainable = trainable;
    }
}

void Model::copy_extractor(const Model& other) {
    for (auto& p : params_) {
        if (!is_extractor_param(p.name)) continue;
        const Parameter& src = other.params().get(p.name);
        if (src.value.shape() != p.value.shape()) throw DimensionError("extractor shapes differ for '" + p.name + "'");
        p.value = src.value;
    }
}

namespace {

template <class Fn>
Tensor forward_chunks(const Tensor& images, std::size_t chunk, Fn fn) {
    if (images.rank() != 4) throw DimensionError("expected images [N x C x H x W], got " + shape_to_string(images.shape()));
    const std::size_t n = images.dim(0);
    Tensor out;
    std::size_t width = 0;
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t stop = std::min(n, start + chunk);
        std::vector<std::size_t> idx(stop - start);
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
        Graph g;
        const Tensor& v = g.value(fn(g, g.constant(gather_rows(images, idx))));
        if (start == 0) {
            width = v.dim(1);
            out = Tensor({n, width});
        }
        std::copy(v.data().begin(), v.data().end(), out.raw() + start * width);
    }
    return out;
}

}  // namespace

Tensor Model::extract(const Tensor& images, std::size_t chunk) {
    return forward_chunks(images, chunk, [&](Graph& g, Var x) { return features(g, x); });
}

Tensor Model::predict_logits(const Tensor& images, std::size_t chunk) {
    return forward_chunks(images, chunk, [&](Graph& g, Var x) { return logits(g, x); });
}

// ---------------------------------------------------------------------------
// Configuration

std::string to_string(Variant v) {
    switch (v) {
        case Variant::BMT: return "bmt";
        case Variant::PAD: return "pad";
        case Variant::NPAD1: return "npad1";
        case Variant::NPAD2: return "npad2";
        case Variant::DaclOnly: return "dacl-only";
        case Variant::FrlOnly: return "frl-only";
        case Variant::NpadDependent: return "npad-dependent";
    }
    return "?";
}

Variant parse_variant(const std::string& s) {
    for (Variant v : {Variant::BMT, Variant::PAD, Variant::NPAD1, Variant::NPAD2, Variant::DaclOnly, Variant::FrlOnly,
                      Variant::NpadDependent}) {
        if (to_string(v) == s) return v;
    }
    throw ConfigError("unknown variant '" + s + "' (bmt, pad, npad1, npad2, dacl-only, frl-only, npad-dependent)");
}

std::size_t selection_count(Variant v) {
    switch (v) {
        case Variant::BMT:
        case Variant::PAD: return 0;
        case Variant::NPAD1:
        case Variant::DaclOnly:
        case Variant::FrlOnly: return 1;
        case Variant::NPAD2:
        case Variant::NpadDependent: return 2;
    }
    return 0;
}

std::string to_string(Stage1Init s) { return s == Stage1Init::Random ? "random" : "baseline"; }

Stage1Init parse_stage1_init(const std::string& s) {
    if (s == "random") return Stage1Init::Random;
    if (s == "baseline") return Stage1Init::Baseline;
    throw ConfigError("unknown stage1 init '" + s + "' (random, baseline)");
}

LossConfig ExperimentConfig::effective_loss() const {
    LossConfig l = loss;
    if (variant == Variant::DaclOnly) l.lambda_frl = 0.0;
    if (variant == Variant::FrlOnly) l.lambda_dacl = 0.0;
    return l;
}

void ExperimentConfig::validate() const {
    model.validate();
    if (target.empty()) throw ConfigError("target attribute must be named");
    validate_stage(baseline, "baseline");
    validate_stage(stage1, "stage1");
    validate_stage(stage2, "stage2");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
    if (variant != Variant::BMT) effective_loss().validate(model.blocks.back().channels);
}

nlohmann::json ExperimentConfig::to_json() const {
    return {{"variant", to_string(variant)},
            {"target", target},
            {"protected_attribute", protected_attribute},
            {"model", model.to_json()},
            {"baseline", stage_json(baseline)},
            {"stage1", stage_json(stage1)},
            {"stage2", stage_json(stage2)},
            {"loss",
             {{"lambda_dacl", loss.lambda_dacl},
              {"lambda_frl", loss.lambda_frl},
              {"top_k", loss.top_k},
              {"eps_dist", loss.eps_dist}}},
            {"alpha", alpha},
            {"freeze_extractor", freeze_extractor},
            {"stage1_init", to_string(stage1_init)},
            {"seed", seed}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    reject_unknown(j,
                   {"variant", "target", "protected_attribute", "model", "baseline", "stage1", "stage2", "loss", "alpha",
                    "freeze_extractor", "stage1_init", "seed"},
                   "");
    ExperimentConfig c;
    try {
        if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
        c.target = j.value("target", c.target);
        c.protected_attribute = j.value("protected_attribute", c.protected_attribute);
        if (j.contains("model")) c.model = ModelSpec::from_json(j.at("model"));
        if (j.contains("baseline")) c.baseline = stage_from_json(j.at("baseline"), c.baseline, "baseline");
        if (j.contains("stage1")) c.stage1 = stage_from_json(j.at("stage1"), c.stage1, "stage1");
        if (j.contains("stage2")) c.stage2 = stage_from_json(j.at("stage2"), c.stage2, "stage2");
        if (j.contains("loss")) {
            const auto& l = j.at("loss");
            reject_unknown(l, {"lambda_dacl", "lambda_frl", "top_k", "eps_dist"}, "loss.");
            c.loss.lambda_dacl = l.value("lambda_dacl", c.loss.lambda_dacl);
            c.loss.lambda_frl = l.value("lambda_frl", c.loss.lambda_frl);
            c.loss.top_k = l.value("top_k", c.loss.top_k);
            c.loss.eps_dist = l.value("eps_dist", c.loss.eps_dist);
        }
        c.alpha = j.value("alpha", c.alpha);
        c.freeze_extractor = j.value("freeze_extractor", c.freeze_extractor);
        if (j.contains("stage1_init")) c.stage1_init = parse_stage1_init(j.at("stage1_init").get<std::string>());
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("experiment config: ") + e.what());
    }
    return c;
}

std::string ExperimentConfig::hash() const { return fnv1a_hex(to_json().dump()); }

// ---------------------------------------------------------------------------
// TrainedModel

nlohmann::json TrainedModel::metadata() const {
    return {{"stage", stage},
            {"config", config},
            {"config_hash", config_hash},
            {"seed", seed},
            {"model_spec", model.spec().to_json()}};
}

void TrainedModel::save(const std::filesystem::path& path) const { save_checkpoint(path, model.params(), metadata()); }

TrainedModel TrainedModel::load(const std::filesystem::path& path) {
    Checkpoint ck = load_checkpoint(path);
    TrainedModel t;
    try {
        t.model = Model(ModelSpec::from_json(ck.metadata.at("model_spec")), std::move(ck.params));
        t.stage = ck.metadata.value("stage", "");
        t.config = ck.metadata.value("config", nlohmann::json::object());
        t.config_hash = ck.metadata.value("config_hash", "");
        t.seed = ck.metadata.value("seed", std::uint64_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("checkpoint metadata: ") + e.what());
    }
    return t;
}

std::string TrainedModel::log_jsonl() const {
    std::string out;
    for (const auto& r : log) out += r.dump() + "\n";
    return out;
}

// ---------------------------------------------------------------------------
// Stages

ExperimentData render_experiment(const Manifest& manifest) {
    ExperimentData d;
    auto make = [&](Split s) {
        const auto idx = manifest.indices(s);
        SplitData sd;
        sd.images = idx.empty() ? Tensor({0, 3, manifest.spec.image_size, manifest.spec.image_size})
                                : render_batch(manifest, idx);
        sd.table = manifest.table(s);
        return sd;
    };
    d.train = make(Split::Train);
    d.val = make(Split::Val);
    d.test = make(Split::Test);
    return d;
}

namespace {

void check_rows(const Tensor& images, const TrainingView& view) {
    if (images.rank() != 4) throw DimensionError("expected images [N x C x H x W], got " + shape_to_string(images.shape()));
    if (images.dim(0) != view.rows()) {
        throw DimensionError("images have " + std::to_string(images.dim(0)) + " rows, attribute table " +
                             std::to_string(view.rows()));
    }
    if (images.dim(0) == 0) throw ConfigError("training split is empty");
}

/// Cross-entropy training over `inputs` (images or frozen features).
void train_cross_entropy(Model& model, const StageConfig& stage, const Tensor& inputs, const std::vector<int>& labels,
                         bool inputs_are_features, std::uint64_t seed, const std::string& name,
                         std::vector<nlohmann::json>& log) {
    auto opt = make_optimizer(stage.optimizer);
    const std::size_t n = inputs.dim(0);
    for (std::size_t epoch = 0; epoch < stage.epochs; ++epoch) {
        const auto order = epoch_order(n, seed, name, epoch);
        double loss_sum = 0.0;
        std::size_t correct = 0, batches = 0;
        for (std::size_t start = 0; start < n; start += stage.batch_size) {
            const std::span<const std::size_t> idx(order.data() + start, std::min(stage.batch_size, n - start));
            const std::vector<int> y = gather(labels, idx);
            Graph g;
            Var x = g.constant(gather_rows(inputs, idx));
            Var logits = inputs_are_features ? model.logits_from_features(g, x) : model.logits(g, x);
            const auto pred = argmax_rows(g.value(logits));
            for (std::size_t i = 0; i < y.size(); ++i) correct += pred[i] == y[i];
            Var loss = g.softmax_cross_entropy(logits, y);
            const double value = g.value(loss)[0];
            require_finite(value, name, epoch, log);
            model.params().zero_grad();
            g.backward(loss);
            opt->step(model.params());
            loss_sum += value;
            ++batches;
        }
        log.push_back({{"stage", name},
                       {"epoch", epoch},
                       {"loss", loss_sum / static_cast<double>(batches)},
                       {"train_accuracy", static_cast<double>(correct) / static_cast<double>(n)}});
    }
}

}  // namespace

TrainedModel train_bmt(const ExperimentConfig& config, const Tensor& images, const TrainingView& view) {
    config.validate();
    check_rows(images, view);
    TrainedModel t;
    t.stage = "bmt";
    t.config = config.to_json();
    t.config_hash = config.hash();
    t.seed = config.seed;
    t.model = Model(config.model, config.seed);
    const auto labels = view.column(config.target);
    train_cross_entropy(t.model, config.baseline, images, labels, false, config.seed, "bmt", t.log);
    return t;
}

TrainedModel train_stage1(const ExperimentConfig& config, const Tensor& images, const TrainingView& view,
                          const std::vector<std::vector<int>>& grouping, const Model* init) {
    config.validate();
    check_rows(images, view);
    const LossConfig loss = config.effective_loss();
    loss.validate(config.model.blocks.back().channels);

    TrainedModel t;
    t.stage = "stage1";
    t.config = config.to_json();
    t.config_hash = config.hash();
    t.seed = config.seed;
    t.model = Model(config.model, config.seed);
    if (init) t.model.copy_extractor(*init);
    t.model.set_head_trainable(false);

    const auto labels = view.column(config.target);
    const std::size_t n = labels.size();
    for (const auto& col : grouping) {
        if (col.size() != n) throw DimensionError("grouping column length differs from the training split");
    }
    t.class_ids.resize(n);
    std::vector<int> bits(grouping.size());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < grouping.size(); ++j) bits[j] = grouping[j][i];
        t.class_ids[i] = composite_class_id(labels[i], bits);
    }
    const auto active = active_classes(t.class_ids);
    if (active.size() < 2) {
        throw ConfigError("stage 1 needs at least two active composite classes, found " + std::to_string(active.size()));
    }

    auto opt = make_optimizer(config.stage1.optimizer);
    const std::size_t dim = config.model.feature_dim();
    for (std::size_t epoch = 0; epoch < config.stage1.epochs; ++epoch) {
        const auto order = epoch_order(n, config.seed, "stage1", epoch);
        ClusterState state(dim);
        double total_sum = 0.0, dacl_sum = 0.0, frl_sum = 0.0;
        std::size_t batches = 0, dacl_batches = 0, skipped = 0;
        for (std::size_t start = 0; start < n; start += config.stage1.batch_size) {
            const std::span<const std::size_t> idx(order.data() + start,
                                                   std::min(config.stage1.batch_size, n - start));
            Graph g;
            std::vector<Var> terms;
            DaclStep step;
            bool have_dacl = false;
            if (loss.lambda_dacl > 0.0) {
                const std::vector<int> ids = gather(t.class_ids, idx);
                Var f = t.model.features(g, g.constant(gather_rows(images, idx)));
                Var lc = dacl_loss(g, f, ids, state, loss.eps_dist, step);
                if (step.skipped) {
                    ++skipped;
                } else {
                    have_dacl = true;
                    dacl_sum += step.loss;
                    ++dacl_batches;
                    terms.push_back(g.scale(lc, loss.lambda_dacl));
                }
            }
            if (loss.lambda_frl > 0.0) {
                Var lf = frl_loss(g, g.parameter(t.model.last_conv()), loss.top_k);
                frl_sum += g.value(lf)[0];
                terms.push_back(g.scale(lf, loss.lambda_frl));
            }
            ++batches;
            if (terms.empty()) continue;
            Var total = terms[0];
            for (std::size_t k = 1; k < terms.size(); ++k) total = g.add(total, terms[k]);
            const double value = g.value(total)[0];
            require_finite(value, "stage1", epoch, t.log);
            total_sum += value;
            t.model.params().zero_grad();
            g.backward(total);
            opt->step(t.model.params());
            // The merged statistics become the prior only after the update.
            if (have_dacl) state = std::move(step.merged);
        }
        nlohmann::json rec = {{"stage", "stage1"},
                              {"epoch", epoch},
                              {"loss", total_sum / static_cast<double>(batches)},
                              {"frl", loss.lambda_frl > 0.0 ? nlohmann::json(frl_sum / static_cast<double>(batches))
                                                            : nlohmann::json(nullptr)},
                              {"dacl", dacl_batches ? nlohmann::json(dacl_sum / static_cast<double>(dacl_batches))
                                                    : nlohmann::json(nullptr)},
                              {"skipped_batches", skipped},
                              {"composite_classes", active.size()}};
        if (loss.lambda_dacl > 0.0) {
            rec["active_classes"] = state.active().size();
            rec["cluster_digest"] = state.digest();
            rec["centroid_distance"] = state.mean_centroid_distance();
        }
        t.log.push_back(std::move(rec));
        t.snapshots.push_back(std::move(state));
    }
    return t;
}

TrainedModel train_stage2(const TrainedModel& stage1, const ExperimentConfig& config, const Tensor& images,
                          const TrainingView& view) {
    config.validate();
    check_rows(images, view);
    TrainedModel t;
    t.stage = "stage2";
    t.config = config.to_json();
    t.config_hash = config.hash();
    t.seed = config.seed;
    t.model = Model(config.model, config.seed);
    t.model.copy_extractor(stage1.model);
    t.class_ids = stage1.class_ids;
    t.snapshots = stage1.snapshots;

    const auto labels = view.column(config.target);
    if (config.freeze_extractor) {
        t.model.set_extractor_trainable(false);
        const Tensor features = t.model.extract(images);
        train_cross_entropy(t.model, config.stage2, features, labels, true, config.seed, "stage2", t.log);
    } else {
        train_cross_entropy(t.model, config.stage2, images, labels, false, config.seed, "stage2", t.log);
    }
    t.model.params().set_trainable(true);
    std::vector<nlohmann::json> log = stage1.log;
    log.insert(log.end(), t.log.begin(), t.log.end());
    t.log = std::move(log);
    return t;
}

std::vector<int> argmax_rows(const Tensor& logits) {
    if (logits.rank() != 2) throw DimensionError("argmax_rows expects [N x classes]");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    std::vector<int> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = logits.raw() + i * k;
        out[i] = static_cast<int>(std::max_element(row, row + k) - row);
    }
    return out;
}

Prediction predict(Model& model, const Tensor& images) {
    Prediction p;
    p.scores = model.predict_logits(images);
    p.labels = argmax_rows(p.scores);
    return p;
}

// ---------------------------------------------------------------------------
// Variants

MetricsReport evaluate_model(Model& model, const SplitData& test, const std::string& target,
                             const std::string& model_hash) {
    const auto pred = predict(model, test.images);
    const auto view = test.table.evaluation_view();
    const auto labels = view.column(target);
    std::vector<ProtectedColumn> cols;
    for (const auto& name : view.protected_names()) cols.push_back({name, view.column(name)});
    return evaluate_predictions(pred.labels, labels, cols, "test", model_hash);
}

nlohmann::json VariantResult::to_json() const {
    nlohmann::json j;
    j["variant"] = model.config.value("variant", "");
    j["config"] = model.config;
    j["config_hash"] = model.config_hash;
    j["seed"] = model.seed;
    j["report"] = report.to_json();
    if (selection) {
        j["selection"] = selection->to_json(disparities ? &*disparities : nullptr);
        j["independence_gate"] = selection->independence_gate ? "enabled" : "disabled";
    }
    j["warnings"] = warnings;
    return j;
}

VariantResult run_variant(const ExperimentConfig& config, const ExperimentData& data, const TrainedModel* baseline) {
    config.validate();
    VariantResult r;
    const auto train_view = data.train.table.training_view();

    ExperimentConfig bmt_config = config;
    bmt_config.variant = Variant::BMT;
    auto bmt = [&]() -> const TrainedModel& {
        if (!r.baseline) {
            r.baseline = baseline ? *baseline : train_bmt(bmt_config, data.train.images, train_view);
        }
        return *r.baseline;
    };

    if (config.variant == Variant::BMT) {
        r.model = train_bmt(config, data.train.images, train_view);
        r.report = evaluate_model(r.model.model, data.test, config.target, r.model.config_hash);
        r.warnings = r.report.warnings;
        return r;
    }

    std::vector<std::vector<int>> grouping;
    if (config.variant == Variant::PAD) {
        if (!data.train.table.is_protected(config.protected_attribute)) {
            throw ConfigError("PAD needs protected attribute '" + config.protected_attribute +
                              "' in the evaluation view");
        }
        grouping.push_back(data.train.table.evaluation_view().column(config.protected_attribute));
    } else {
        const SplitData* eval = &data.val;
        if (data.val.table.rows() == 0) {
            r.warnings.push_back("validation split is empty; disparities computed on the training split");
            eval = &data.train;
        }
        Model phi = bmt().model;
        const auto pred = predict(phi, eval->images);
        r.disparities = build_disparity_set(pred.labels, eval->table.training_view(), config.target);
        for (const auto& w : r.disparities->warnings) r.warnings.push_back(w);
        const std::size_t n = selection_count(config.variant);
        r.selection = select_attributes(*r.disparities, train_view, n, config.alpha,
                                        config.variant != Variant::NpadDependent);
        for (const auto& w : r.selection->warnings) r.warnings.push_back(w);
        for (const auto& name : r.selection->selected) grouping.push_back(train_view.column(name));
    }

    const Model* init = config.stage1_init == Stage1Init::Baseline ? &bmt().model : nullptr;
    const TrainedModel s1 = train_stage1(config, data.train.images, train_view, grouping, init);
    r.model = train_stage2(s1, config, data.train.images, train_view);
    r.report = evaluate_model(r.model.model, data.test, config.target, r.model.config_hash);
    for (const auto& w : r.report.warnings) r.warnings.push_back(w);
    return r;
}

std::vector<VariantResult> run_suite(const ExperimentConfig& base, const ExperimentData& data,
                                     const std::vector<Variant>& variants) {
    ExperimentConfig bmt_config = base;
    bmt_config.variant = Variant::BMT;
    const VariantResult bmt = run_variant(bmt_config, data);
    std::vector<VariantResult> out;
    for (Variant v : variants) {
        if (v == Variant::BMT) {
            out.push_back(bmt);
            continue;
        }
        ExperimentConfig c = base;
        c.variant = v;
        out.push_back(run_variant(c, data, &bmt.model));
    }
    return out;
}

std::vector<VariantResult> run_variants(const std::vector<ExperimentConfig>& configs, const ExperimentData& data,
                                        std::size_t threads) {
    std::vector<VariantResult> out(configs.size());
    std::vector<std::exception_ptr> errors(configs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (std::size_t i = next++; i < configs.size(); i = next++) {
            try {
                out[i] = run_variant(configs[i], data);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    threads = std::max<std::size_t>(1, std::min(threads, configs.size()));
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return out;
}

}  // namespace npad
