#include "npad/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "npad/errors.hpp"
#include "npad/hash.hpp"

namespace npad {

// ---------------------------------------------------------------------------
// Composite classes

int composite_class_id(int target_bit, std::span<const int> selected_bits) {
    if (target_bit != 0 && target_bit != 1) throw ConfigError("composite_class_id: target bit must be 0 or 1");
    int id = target_bit;
    for (int b : selected_bits) {
        if (b != 0 && b != 1) throw ConfigError("composite_class_id: attribute bits must be 0 or 1");
        id = id * 2 + b;
    }
    return id;
}

std::vector<int> composite_class_bits(int class_id, std::size_t n_selected) {
    if (class_id < 0 || class_id >= (1 << (n_selected + 1))) {
        throw IndexError("composite class " + std::to_string(class_id) + " out of range for n=" +
                         std::to_string(n_selected));
    }
    std::vector<int> bits(n_selected + 1);
    for (std::size_t i = n_selected + 1; i-- > 0;) {
        bits[i] = class_id & 1;
        class_id >>= 1;
    }
    return bits;
}

std::vector<int> active_classes(std::span<const int> class_ids) {
    std::set<int> uniq(class_ids.begin(), class_ids.end());
    return {uniq.begin(), uniq.end()};
}

// ---------------------------------------------------------------------------
// Moving statistics

double scalar_mean(std::span<const double> v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

BatchClassSummary batch_summarize(const Tensor& features, std::span<const int> class_ids) {
    if (features.rank() != 2) throw DimensionError("batch_summarize expects features[batch x dim]");
    const std::size_t batch = features.dim(0), dim = features.dim(1);
    if (class_ids.size() != batch) throw DimensionError("batch_summarize: one class id per row required");

    BatchClassSummary out;
    out.dim = dim;
    for (std::size_t r = 0; r < batch; ++r) {
        ClassSummary& s = out.classes[class_ids[r]];
        if (s.mean.empty()) s.mean.assign(dim, 0.0);
        const double* row = features.raw() + r * dim;
        for (std::size_t k = 0; k < dim; ++k) s.mean[k] += row[k];
        ++s.count;
    }
    for (auto& [id, s] : out.classes) {
        for (double& v : s.mean) v /= static_cast<double>(s.count);
    }
    std::map<int, double> sq;
    for (std::size_t r = 0; r < batch; ++r) {
        const ClassSummary& s = out.classes[class_ids[r]];
        const double z = scalar_mean(s.mean);
        const double* row = features.raw() + r * dim;
        double acc = 0.0;
        for (std::size_t k = 0; k < dim; ++k) acc += (row[k] - z) * (row[k] - z);
        sq[class_ids[r]] += acc;
    }
    for (auto& [id, s] : out.classes) {
        s.std = std::sqrt(sq[id] / static_cast<double>(s.count * dim));
    }
    return out;
}

std::vector<double> update_moving_mean(std::span<const double> prev_mean, std::size_t prev_count,
                                       std::span<const double> batch_mean, std::size_t batch_count) {
    if (batch_count == 0) return {prev_mean.begin(), prev_mean.end()};
    if (prev_count == 0) return {batch_mean.begin(), batch_mean.end()};
    if (prev_mean.size() != batch_mean.size()) throw DimensionError("update_moving_mean: dimension mismatch");
    const double n = static_cast<double>(prev_count + batch_count);
    std::vector<double> out(batch_mean.size());
    for (std::size_t k = 0; k < out.size(); ++k) {
        out[k] = (static_cast<double>(batch_count) * batch_mean[k] + static_cast<double>(prev_count) * prev_mean[k]) / n;
    }
    return out;
}

double update_moving_std(double prev_std, double prev_scalar_mean, std::size_t prev_count, double batch_std,
                         double batch_scalar_mean, std::size_t batch_count, double merged_scalar_mean) {
    if (batch_count + prev_count == 0) return prev_std;
    const double r = static_cast<double>(batch_count);
    const double rp = static_cast<double>(prev_count);
    const double db = batch_scalar_mean - merged_scalar_mean;
    const double dp = prev_scalar_mean - merged_scalar_mean;
    const double var = (r * (batch_std * batch_std + db * db) + rp * (prev_std * prev_std + dp * dp)) / (r + rp);
    return std::sqrt(std::max(var, 0.0));
}

bool operator==(const ClassMoments& a, const ClassMoments& b) {
    return a.mean == b.mean && a.std == b.std && a.count == b.count;
}

void ClusterState::merge(const BatchClassSummary& batch) {
    if (dim_ == 0) dim_ = batch.dim;
    if (batch.dim != dim_) throw DimensionError("cluster state: feature dimension changed");
    for (const auto& [id, s] : batch.classes) {
        ClassMoments& c = classes_[id];
        const double z_prev = scalar_mean(c.mean);
        std::vector<double> merged = update_moving_mean(c.mean, c.count, s.mean, s.count);
        const double m = scalar_mean(merged);
        c.std = update_moving_std(c.std, z_prev, c.count, s.std, scalar_mean(s.mean), s.count, m);
        c.mean = std::move(merged);
        c.count += s.count;
    }
    ++iteration_;
}

void ClusterState::reset() {
    classes_.clear();
    iteration_ = 0;
}

std::vector<int> ClusterState::active() const {
    std::vector<int> out;
    for (const auto& [id, c] : classes_) {
        if (c.count > 0) out.push_back(id);
    }
    return out;
}

const ClassMoments* ClusterState::find(int class_id) const {
    auto it = classes_.find(class_id);
    return it == classes_.end() ? nullptr : &it->second;
}

double ClusterState::mean_centroid_distance() const {
    const auto ids = active();
    if (ids.size() < 2) return 0.0;
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < ids.size(); ++a) {
        for (std::size_t b = a + 1; b < ids.size(); ++b) {
            const auto& ma = classes_.at(ids[a]).mean;
            const auto& mb = classes_.at(ids[b]).mean;
            double d2 = 0.0;
            for (std::size_t k = 0; k < ma.size(); ++k) d2 += (ma[k] - mb[k]) * (ma[k] - mb[k]);
            total += std::sqrt(d2);
            ++pairs;
        }
    }
    return total / static_cast<double>(pairs);
}

std::string ClusterState::digest() const {
    Fnv1a h;
    h.update(static_cast<std::uint64_t>(dim_));
    h.update(static_cast<std::uint64_t>(iteration_));
    for (const auto& [id, c] : classes_) {
        h.update(static_cast<std::uint64_t>(id));
        h.update(static_cast<std::uint64_t>(c.count));
        h.update(c.std);
        h.update(std::span<const double>(c.mean));
    }
    return h.hex();
}

nlohmann::json ClusterState::to_json() const {
    nlohmann::json j;
    j["dim"] = dim_;
    j["iteration"] = iteration_;
    j["classes"] = nlohmann::json::array();
    for (const auto& [id, c] : classes_) {
        j["classes"].push_back({{"id", id}, {"count", c.count}, {"std", c.std}, {"mean", c.mean}});
    }
    return j;
}

ClusterState ClusterState::from_json(const nlohmann::json& j) {
    ClusterState s(j.at("dim").get<std::size_t>());
    s.iteration_ = j.at("iteration").get<long>();
    for (const auto& c : j.at("classes")) {
        ClassMoments m;
        m.count = c.at("count").get<std::size_t>();
        m.std = c.at("std").get<double>();
        m.mean = c.at("mean").get<std::vector<double>>();
        if (m.mean.size() != s.dim_) throw ParseError("cluster snapshot: mean length differs from dim");
        s.classes_[c.at("id").get<int>()] = std::move(m);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Cluster loss

namespace {

double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) d += (a[k] - b[k]) * (a[k] - b[k]);
    return d;
}

}  // namespace

std::optional<double> dacl(const ClusterState& state, double eps_dist) {
    const auto ids = state.active();
    if (ids.size() < 2) return std::nullopt;
    double loss = 0.0;
    for (int p : ids) {
        for (int q : ids) {
            if (p == q) continue;
            const auto& cp = *state.find(p);
            const auto& cq = *state.find(q);
            loss += cp.std * cq.std / std::max(squared_distance(cp.mean, cq.mean), eps_dist);
        }
    }
    return loss;
}

DaclStep dacl_step(const Tensor& features, std::span<const int> class_ids, const ClusterState& prior,
                   double eps_dist, bool want_grad) {
    const BatchClassSummary summary = batch_summarize(features, class_ids);
    DaclStep step;
    step.merged = prior;
    step.merged.merge(summary);

    const auto value = dacl(step.merged, eps_dist);
    if (!value) {
        step.skipped = true;
        if (want_grad) step.feature_grad.assign(features.size(), 0.0);
        return step;
    }
    step.loss = *value;
    if (!want_grad) return step;

    const std::size_t batch = features.dim(0), dim = features.dim(1);
    const auto ids = step.merged.active();

    // Gradients w.r.t. the merged V_p and M_p of classes present in the batch.
    std::map<int, double> grad_std;
    std::map<int, std::vector<double>> grad_mean;
    for (const auto& [p, unused] : summary.classes) {
        const ClassMoments& cp = *step.merged.find(p);
        double gv = 0.0;
        std::vector<double> gm(dim, 0.0);
        for (int q : ids) {
            if (q == p) continue;
            const ClassMoments& cq = *step.merged.find(q);
            const double d2 = squared_distance(cp.mean, cq.mean);
            const double denom = std::max(d2, eps_dist);
            gv += 2.0 * cq.std / denom;
            if (d2 > eps_dist) {
                const double coef = -4.0 * cp.std * cq.std / (d2 * d2);
                for (std::size_t k = 0; k < dim; ++k) gm[k] += coef * (cp.mean[k] - cq.mean[k]);
            }
        }
        grad_std[p] = gv;
        grad_mean[p] = std::move(gm);
    }

    // M_p = (r Z_p + r' M'_p) / n, and V_p^2 is the pooled variance of all entries
    // around m_p, so dV_p/dx = (x - m_p) / (n d V_p) and dM_p/dx_row = 1/n.
    step.feature_grad.assign(batch * dim, 0.0);
    for (std::size_t r = 0; r < batch; ++r) {
        const int p = class_ids[r];
        const ClassMoments& cp = *step.merged.find(p);
        const double n = static_cast<double>(cp.count);
        const double m = scalar_mean(cp.mean);
        const double gv = grad_std[p];
        const auto& gm = grad_mean[p];
        const double v_coef = cp.std > 0.0 ? gv / (n * static_cast<double>(dim) * cp.std) : 0.0;
        const double* row = features.raw() + r * dim;
        double* out = step.feature_grad.data() + r * dim;
        for (std::size_t k = 0; k < dim; ++k) out[k] = v_coef * (row[k] - m) + gm[k] / n;
    }
    return step;
}

Var dacl_loss(Graph& g, Var features, std::span<const int> class_ids, const ClusterState& prior, double eps_dist,
              DaclStep& merged) {
    merged = dacl_step(g.value(features), class_ids, prior, eps_dist, true);
    auto grad = std::make_shared<std::vector<double>>(std::move(merged.feature_grad));
    merged.feature_grad.clear();
    return g.custom({features}, Tensor::scalar(merged.loss), [grad](Graph& graph, std::size_t id) {
        const double upstream = graph.grad_of(id)[0];
        const std::size_t in = graph.inputs_of(id)[0];
        if (!graph.needs_grad(in)) return;
        double* gx = graph.grad_buffer(in);
        for (std::size_t i = 0; i < grad->size(); ++i) gx[i] += upstream * (*grad)[i];
    });
}

// ---------------------------------------------------------------------------
// Filter redundancy

FilterBank::FilterBank(Tensor weights) : weights_(std::move(weights)) {
    if (weights_.rank() != 4) {
        throw DimensionError("filter bank must be [filters x channels x height x width], got " +
                             shape_to_string(weights_.shape()));
    }
}

std::span<const double> FilterBank::filter(std::size_t i) const {
    if (i >= count()) throw IndexError("filter index " + std::to_string(i) + " out of range");
    return weights_.data().subspan(i * filter_size(), filter_size());
}

double FilterBank::magnitude(std::size_t i) const {
    double s = 0.0;
    for (double v : filter(i)) s += v * v;
    return std::sqrt(s);
}

std::vector<std::size_t> FilterBank::top_k(std::size_t k) const {
    if (k == 0 || k > count()) {
        throw ConfigError("top_k = " + std::to_string(k) + " must lie in [1, " + std::to_string(count()) + "]");
    }
    std::vector<std::size_t> idx(count());
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<double> mag(count());
    for (std::size_t i = 0; i < count(); ++i) mag[i] = magnitude(i);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return mag[a] > mag[b]; });
    idx.resize(k);
    return idx;
}

Tensor mean_normalize_filter(const Tensor& filter) {
    if (filter.rank() != 3) throw DimensionError("mean_normalize_filter expects [channels x height x width]");
    Tensor out = filter;
    const std::size_t area = filter.dim(1) * filter.dim(2);
    for (std::size_t c = 0; c < filter.dim(0); ++c) {
        double* ch = out.raw() + c * area;
        const double mean = scalar_mean(std::span<const double>(ch, area));
        for (std::size_t i = 0; i < area; ++i) ch[i] -= mean;
    }
    return out;
}

namespace {

// Per selected filter: normalized channels and the pairwise dot products.
struct NormalizedFilter {
    Tensor channels;
    std::vector<double> dots;  // C x C
};

NormalizedFilter normalize_and_correlate(const FilterBank& bank, std::size_t f) {
    const std::size_t c = bank.channels(), area = bank.height() * bank.width();
    auto raw = bank.filter(f);
    NormalizedFilter nf{mean_normalize_filter(Tensor({c, bank.height(), bank.width()}, {raw.begin(), raw.end()})),
                        std::vector<double>(c * c, 0.0)};
    for (std::size_t a = 0; a < c; ++a) {
        for (std::size_t b = a + 1; b < c; ++b) {
            double d = 0.0;
            for (std::size_t i = 0; i < area; ++i) d += nf.channels[a * area + i] * nf.channels[b * area + i];
            nf.dots[a * c + b] = nf.dots[b * c + a] = d;
        }
    }
    return nf;
}

void require_channels(const FilterBank& bank) {
    if (bank.channels() < 2) {
        throw ConfigError("filter redundancy loss needs at least 2 channels per filter, got " +
                          std::to_string(bank.channels()));
    }
}

}  // namespace

double frl(const FilterBank& bank, std::size_t top_k) {
    require_channels(bank);
    const auto selected = bank.top_k(top_k);
    const std::size_t c = bank.channels();
    const double pairs = static_cast<double>(c * (c - 1));
    double total = 0.0;
    for (std::size_t f : selected) {
        const auto nf = normalize_and_correlate(bank, f);
        double s = 0.0;
        for (std::size_t a = 0; a < c; ++a) {
            for (std::size_t b = 0; b < c; ++b) {
                if (a != b) s += std::abs(nf.dots[a * c + b]);
            }
        }
        total += s / pairs;
    }
    return total / static_cast<double>(selected.size());
}

Tensor frl_gradient(const FilterBank& bank, std::size_t top_k) {
    require_channels(bank);
    const auto selected = bank.top_k(top_k);
    const std::size_t c = bank.channels(), area = bank.height() * bank.width();
    const double scale = 2.0 / (static_cast<double>(c * (c - 1)) * static_cast<double>(selected.size()));
    Tensor grad(bank.weights().shape(), 0.0);
    for (std::size_t f : selected) {
        const auto nf = normalize_and_correlate(bank, f);
        double* gf = grad.raw() + f * bank.filter_size();
        // Each normalized channel is zero-mean, so the projection through the mean
        // subtraction leaves this sum unchanged.
        for (std::size_t a = 0; a < c; ++a) {
            for (std::size_t b = 0; b < c; ++b) {
                if (a == b) continue;
                const double d = nf.dots[a * c + b];
                const double sign = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                if (sign == 0.0) continue;
                for (std::size_t i = 0; i < area; ++i) gf[a * area + i] += scale * sign * nf.channels[b * area + i];
            }
        }
    }
    return grad;
}

Var frl_loss(Graph& g, Var filters, std::size_t top_k) {
    FilterBank bank(g.value(filters));
    const double value = frl(bank, top_k);
    auto grad = std::make_shared<Tensor>(frl_gradient(bank, top_k));
    return g.custom({filters}, Tensor::scalar(value), [grad](Graph& graph, std::size_t id) {
        const double upstream = graph.grad_of(id)[0];
        const std::size_t in = graph.inputs_of(id)[0];
        if (!graph.needs_grad(in)) return;
        double* gx = graph.grad_buffer(in);
        for (std::size_t i = 0; i < grad->size(); ++i) gx[i] += upstream * (*grad)[i];
    });
}

// ---------------------------------------------------------------------------

void LossConfig::validate(std::size_t filter_count) const {
    if (lambda_dacl < 0.0 || lambda_frl < 0.0) throw ConfigError("loss weights must be non-negative");
    if (lambda_dacl + lambda_frl <= 0.0) throw ConfigError("at least one loss weight must be positive");
    if (top_k == 0 || top_k > filter_count) {
        throw ConfigError("top_k = " + std::to_string(top_k) + " must lie in [1, " + std::to_string(filter_count) + "]");
    }
    if (eps_dist <= 0.0) throw ConfigError("eps_dist must be positive");
}

double combined_loss(double dacl_value, double frl_value, const LossConfig& cfg) {
    return cfg.lambda_dacl * dacl_value + cfg.lambda_frl * frl_value;
}

}  // namespace npad
