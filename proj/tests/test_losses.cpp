#include <doctest.h>

#include <cmath>
#include <random>

#include "npad/errors.hpp"
#include "npad/losses.hpp"

using namespace npad;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = n(rng);
    return t;
}

double rel_err(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-12}); }

}  // namespace

TEST_CASE("composite class ids") {
    CHECK(composite_class_id(1, {}) == 1);
    const int bits[] = {0, 1};
    CHECK(composite_class_id(1, bits) == 5);
    CHECK(composite_class_bits(5, 2) == std::vector<int>{1, 0, 1});
    for (int id = 0; id < 16; ++id) {
        auto b = composite_class_bits(id, 3);
        CHECK(composite_class_id(b[0], std::span<const int>(b).subspan(1)) == id);
    }
    const int ids[] = {composite_class_id(0, std::vector<int>{0}), composite_class_id(0, std::vector<int>{1}),
                       composite_class_id(1, std::vector<int>{1}), composite_class_id(1, std::vector<int>{1})};
    CHECK(active_classes(ids).size() == 3);
    const int bad[] = {2};
    CHECK_THROWS_AS(composite_class_id(0, bad), ConfigError);
}

TEST_CASE("batch summaries") {
    const int one[] = {0};
    auto s = batch_summarize(Tensor::matrix({{1, 3}}), one);
    CHECK(s.classes.at(0).mean == std::vector<double>{1, 3});
    CHECK(s.classes.at(0).std == doctest::Approx(1.0));
    CHECK(s.classes.at(0).count == 1);

    const int two[] = {4, 4};
    auto d = batch_summarize(Tensor::matrix({{1, 2, 6}, {1, 2, 6}}), two);
    auto single = batch_summarize(Tensor::matrix({{1, 2, 6}}), one);
    CHECK(d.classes.at(4).std == doctest::Approx(single.classes.at(0).std));

    const int ab[] = {0, 1, 0};
    const int ba[] = {0, 0, 1};
    auto x = batch_summarize(Tensor::matrix({{1, 2}, {5, 5}, {3, 0}}), ab);
    auto y = batch_summarize(Tensor::matrix({{3, 0}, {1, 2}, {5, 5}}), ba);
    for (int c : {0, 1}) {
        CHECK(x.classes.at(c).mean == y.classes.at(c).mean);
        CHECK(x.classes.at(c).std == doctest::Approx(y.classes.at(c).std));
    }
}

TEST_CASE("moving statistics") {
    CHECK(update_moving_mean({}, 0, std::vector<double>{1.5, 2}, 3) == std::vector<double>{1.5, 2});
    CHECK(update_moving_mean(std::vector<double>{2.0}, 4, std::vector<double>{4.0}, 4)[0] == doctest::Approx(3.0));
    CHECK(update_moving_mean(std::vector<double>{2.5}, 4, std::vector<double>{2.5}, 9)[0] == doctest::Approx(2.5));

    CHECK(update_moving_std(0.0, 0.0, 0, 1.7, 0.3, 5, 0.3) == doctest::Approx(1.7));
    // {1,3} then {5,7}, one entry per row, two rows each.
    CHECK(update_moving_std(1.0, 2.0, 2, 1.0, 6.0, 2, 4.0) == doctest::Approx(std::sqrt(5.0)));
    CHECK(update_moving_std(0.8, 1.2, 3, 0.8, 1.2, 3, 1.2) == doctest::Approx(0.8));
}

TEST_CASE("cluster state matches brute force") {
    std::mt19937_64 rng(21);
    const std::size_t dim = 4;
    ClusterState state(dim);
    std::map<int, std::vector<std::vector<double>>> seen;
    for (int step = 0; step < 6; ++step) {
        const std::size_t batch = 3 + step;
        Tensor f = random_tensor({batch, dim}, rng, 1.0 + step);
        std::vector<int> ids(batch);
        for (std::size_t r = 0; r < batch; ++r) {
            ids[r] = static_cast<int>(rng() % 3);
            seen[ids[r]].emplace_back(f.raw() + r * dim, f.raw() + (r + 1) * dim);
        }
        state.merge(batch_summarize(f, ids));
    }
    for (const auto& [id, rows] : seen) {
        const ClassMoments& m = *state.find(id);
        REQUIRE(m.count == rows.size());
        std::vector<double> mean(dim, 0.0);
        for (const auto& r : rows)
            for (std::size_t k = 0; k < dim; ++k) mean[k] += r[k] / rows.size();
        double mbar = 0.0;
        for (double v : mean) mbar += v / dim;
        double var = 0.0;
        for (const auto& r : rows)
            for (double v : r) var += (v - mbar) * (v - mbar);
        var /= static_cast<double>(rows.size() * dim);
        for (std::size_t k = 0; k < dim; ++k) CHECK(std::abs(m.mean[k] - mean[k]) < 1e-9);
        CHECK(std::abs(m.std - std::sqrt(var)) < 1e-9);
    }
    CHECK(state.iteration() == 6);
    auto copy = ClusterState::from_json(state.to_json());
    CHECK(copy == state);
    CHECK(copy.digest() == state.digest());
    state.reset();
    CHECK(state.active().empty());
}

TEST_CASE("dacl values") {
    ClusterState zero(2);
    const int ids[] = {0, 1};
    zero.merge(batch_summarize(Tensor::matrix({{1, 1}, {3, 3}}), ids));
    CHECK(*dacl(zero) == 0.0);

    // V = (1, 2), squared centroid distance 4.
    ClusterState s(2);
    const int four[] = {0, 0, 1, 1};
    s.merge(batch_summarize(Tensor::matrix({{0, 2}, {0, 2}, {2, 2}, {-2, -2}}), four));
    CHECK(s.find(0)->std == doctest::Approx(1.0));
    CHECK(s.find(1)->std == doctest::Approx(2.0));
    CHECK(*dacl(s) == doctest::Approx(1.0));

    ClusterState same(1);
    const int sid[] = {0, 0, 1, 1};
    same.merge(batch_summarize(Tensor::matrix({{1}, {3}, {0}, {4}}), sid));
    CHECK(std::isfinite(*dacl(same)));
    CHECK(*dacl(same) == doctest::Approx(2.0 * 1.0 * 2.0 / 1e-8));

    ClusterState lone(2);
    const int one[] = {3, 3};
    lone.merge(batch_summarize(Tensor::matrix({{1, 2}, {3, 4}}), one));
    CHECK_FALSE(dacl(lone).has_value());
    CHECK(dacl_step(Tensor::matrix({{1, 2}}), std::vector<int>{3}, ClusterState(2)).skipped);
}

TEST_CASE("dacl is label-permutation invariant") {
    std::mt19937_64 rng(8);
    Tensor f = random_tensor({12, 3}, rng);
    std::vector<int> a(12), b(12);
    for (int i = 0; i < 12; ++i) {
        a[i] = i % 3;
        b[i] = (a[i] + 1) % 3 + 5;
    }
    CHECK(dacl_step(f, a, ClusterState(3)).loss == doctest::Approx(dacl_step(f, b, ClusterState(3)).loss));
}

TEST_CASE("dacl gradient matches finite differences") {
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t dim = 5, batch = 8;
        ClusterState prior(dim);
        std::vector<int> pids(6);
        for (std::size_t i = 0; i < pids.size(); ++i) pids[i] = static_cast<int>(i % 3);
        if (trial % 2) prior.merge(batch_summarize(random_tensor({6, dim}, rng), pids));
        Tensor f = random_tensor({batch, dim}, rng);
        std::vector<int> ids(batch);
        for (std::size_t r = 0; r < batch; ++r) ids[r] = static_cast<int>(r % 2 + (trial % 3 == 0 ? 2 * (r % 4 / 2) : 0));
        auto step = dacl_step(f, ids, prior);
        double worst = 0.0;
        for (std::size_t i = 0; i < f.size(); ++i) {
            Tensor up = f, dn = f;
            up[i] += 1e-5;
            dn[i] -= 1e-5;
            const double num =
                (dacl_step(up, ids, prior, 1e-8, false).loss - dacl_step(dn, ids, prior, 1e-8, false).loss) / 2e-5;
            worst = std::max(worst, rel_err(step.feature_grad[i], num));
        }
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("dacl on the tape") {
    std::mt19937_64 rng(31);
    ParameterSet ps;
    auto& w = ps.add("w", random_tensor({3, 4}, rng));
    Tensor x = random_tensor({10, 3}, rng);
    std::vector<int> ids(10);
    for (int i = 0; i < 10; ++i) ids[i] = i % 3;
    ClusterState prior(4);
    DaclStep merged;
    auto build = [&](Graph& g) {
        return dacl_loss(g, g.dense(g.constant(x), g.parameter(w), g.constant(Tensor({4}))), ids, prior, 1e-8, merged);
    };
    CHECK(grad_check(ps, build) < 1e-4);
    CHECK(merged.merged.active().size() == 3);
}

TEST_CASE("filter normalization and redundancy") {
    Tensor c = mean_normalize_filter(Tensor({1, 2, 2}, std::vector<double>{1, 2, 3, 4}));
    CHECK(c == Tensor({1, 2, 2}, std::vector<double>{-1.5, -0.5, 0.5, 1.5}));
    CHECK(mean_normalize_filter(Tensor({2, 2, 2}, 3.0)) == Tensor({2, 2, 2}, 0.0));
    Tensor zm({1, 2, 2}, std::vector<double>{1, -1, 1, -1});
    CHECK(mean_normalize_filter(zm) == zm);

    FilterBank dup(Tensor({1, 2, 2, 2}, std::vector<double>{1, -1, 1, -1, 1, -1, 1, -1}));
    CHECK(frl(dup, 1) == doctest::Approx(4.0));
    FilterBank orth(Tensor({1, 2, 2, 2}, std::vector<double>{1, -1, 1, -1, 1, 1, -1, -1}));
    CHECK(frl(orth, 1) == 0.0);
    FilterBank flat(Tensor({2, 3, 2, 2}, 1.0));
    CHECK(frl(flat, 2) == 0.0);
    CHECK_THROWS_AS(frl(FilterBank(Tensor({2, 1, 3, 3}, 1.0)), 1), ConfigError);
    CHECK_THROWS_AS(dup.top_k(2), ConfigError);
    CHECK_THROWS_AS(FilterBank(Tensor({2, 3})), DimensionError);
}

TEST_CASE("top-k ties keep lower index") {
    Tensor w({4, 2, 1, 1}, std::vector<double>{1, 0, 3, 0, 0, 1, 0, 3});
    FilterBank bank(w);
    CHECK(bank.top_k(4) == std::vector<std::size_t>{1, 3, 0, 2});
}

TEST_CASE("frl invariances") {
    std::mt19937_64 rng(13);
    Tensor w = random_tensor({4, 3, 3, 3}, rng);
    const double base = frl(FilterBank(w), 4);
    Tensor shifted = w;
    for (std::size_t i = 0; i < 9; ++i) shifted[1 * 27 + 2 * 9 + i] += 5.0;
    // Shifting changes magnitudes, so compare with every filter selected.
    CHECK(frl(FilterBank(shifted), 4) == doctest::Approx(base));
    Tensor swapped = w;
    for (std::size_t i = 0; i < 9; ++i) std::swap(swapped[0 * 27 + i], swapped[0 * 27 + 18 + i]);
    CHECK(frl(FilterBank(swapped), 4) == doctest::Approx(base));
    Tensor reordered = w;
    for (std::size_t i = 0; i < 27; ++i) std::swap(reordered[i], reordered[81 + i]);
    CHECK(frl(FilterBank(reordered), 4) == doctest::Approx(base));
}

TEST_CASE("frl gradient matches finite differences") {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor w = random_tensor({6, 3, 3, 3}, rng);
        FilterBank bank(w);
        Tensor grad = frl_gradient(bank, 3);
        double worst = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            Tensor up = w, dn = w;
            up[i] += 1e-5;
            dn[i] -= 1e-5;
            const double num = (frl(FilterBank(up), 3) - frl(FilterBank(dn), 3)) / 2e-5;
            worst = std::max(worst, rel_err(grad[i], num));
        }
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("loss config and combination") {
    LossConfig cfg;
    CHECK(combined_loss(1.0, 4.0, cfg) == doctest::Approx(2.5));
    cfg.lambda_frl = 0.0;
    CHECK(combined_loss(1.0, 4.0, cfg) == doctest::Approx(0.5));
    cfg = LossConfig{0.0, 0.5};
    CHECK(combined_loss(1.0, 4.0, cfg) == doctest::Approx(2.0));
    CHECK_NOTHROW(LossConfig{}.validate(32));
    CHECK_THROWS_AS(LossConfig{}.validate(4), ConfigError);
    CHECK_THROWS_AS((LossConfig{0.0, 0.0}.validate(32)), ConfigError);
}
