#include <doctest.h>

#include <cmath>
#include <random>

#include "npad/errors.hpp"
#include "npad/metrics.hpp"

using namespace npad;

namespace {

// PAPER: published bangs-by-gender confusion cells (tp_hat, fn_hat, fp_hat, tn_hat).
SubgroupConfusion bmt_m() { return SubgroupConfusion::from_cells("M", 0, 766, 0, 4654); }
SubgroupConfusion bmt_nm() { return SubgroupConfusion::from_cells("NM", 0, 363, 0, 1097); }
SubgroupConfusion two_m() { return SubgroupConfusion::from_cells("M", 511, 255, 202, 4452); }
SubgroupConfusion two_nm() { return SubgroupConfusion::from_cells("NM", 289, 74, 48, 1049); }

}  // namespace

TEST_CASE("confusion counts") {
    auto c = bmt_m();
    CHECK(c.tp == 766);
    CHECK(c.tp_hat == 0);
    CHECK(c.fn_hat == 766);
    CHECK(c.tn == 4654);
    CHECK(c.tn_hat == 4654);
    CHECK(c.fp_hat == 0);
    CHECK(c.total == 5420);

    const int labels[] = {1, 0, 1, 0};
    const int groups[] = {0, 0, 1, 1};
    auto perfect = confusion_by_subgroup(labels, labels, groups, {"a", "b"});
    for (const auto& g : perfect) {
        CHECK(g.fn_hat == 0);
        CHECK(g.fp_hat == 0);
    }
    std::vector<std::string> warnings;
    auto with_empty = confusion_by_subgroup(labels, labels, groups, {"a", "b", "c"}, &warnings);
    CHECK(with_empty[2].total == 0);
    CHECK(warnings.size() == 1);
}

TEST_CASE("confusion matches brute-force recount") {
    std::mt19937_64 rng(4);
    std::vector<int> p(100), y(100), s(100);
    for (int i = 0; i < 100; ++i) {
        p[i] = rng() % 2;
        y[i] = rng() % 2;
        s[i] = rng() % 3;
    }
    auto cs = confusion_by_subgroup(p, y, s, {"x", "y", "z"});
    for (int g = 0; g < 3; ++g) {
        long tp = 0, fn = 0, fp = 0, tn = 0;
        for (int i = 0; i < 100; ++i) {
            if (s[i] != g) continue;
            tp += y[i] && p[i];
            fn += y[i] && !p[i];
            fp += !y[i] && p[i];
            tn += !y[i] && !p[i];
        }
        CHECK(cs[g].tp_hat == tp);
        CHECK(cs[g].fn_hat == fn);
        CHECK(cs[g].fp_hat == fp);
        CHECK(cs[g].tn_hat == tn);
    }
}

TEST_CASE("overall performance and OPE on the published confusions") {
    CHECK(overall_performance(bmt_m()) == doctest::Approx(1532.0 / 10840.0));
    CHECK(overall_performance(bmt_nm()) == doctest::Approx(726.0 / 2920.0));
    CHECK(overall_performance(SubgroupConfusion::from_cells("p", 5, 0, 0, 7)) == 0.0);
    CHECK(std::abs(ope(bmt_m(), bmt_nm()) * 100 - 10.73) <= 0.01);
    CHECK(std::abs(ope(two_m(), two_nm()) * 100 - 0.08) <= 0.01);
    CHECK(ope(two_m(), two_m()) == 0.0);
    CHECK_THROWS_AS(overall_performance(SubgroupConfusion{}), DegenerateError);
}

TEST_CASE("DEO and PPV parity") {
    CHECK(std::abs(deo(two_m(), two_nm()) * 100 - 12.90) <= 0.01);
    CHECK(deo(bmt_m(), bmt_nm()) == 0.0);
    CHECK(std::abs(ppv_parity(two_m(), two_nm()) * 100 - 14.09) <= 0.01);
    CHECK(ppv_parity(two_m(), two_nm()) == doctest::Approx(std::abs(511.0 / 713.0 - 289.0 / 337.0)));
    CHECK(ppv_parity(two_nm(), two_nm()) == 0.0);
    CHECK_FALSE(try_ppv_parity(bmt_m(), bmt_nm()).has_value());
    CHECK_THROWS_AS(ppv_parity(bmt_m(), bmt_nm()), DegenerateError);
    CHECK_THROWS_AS(deo(SubgroupConfusion::from_cells("n", 0, 0, 1, 1), two_m()), DegenerateError);
}

TEST_CASE("degree of bias") {
    const double big_nose[] = {77.93, 75.21};
    CHECK(std::abs(dob(big_nose) - 1.36) <= 0.005);
    const double same[] = {0.8, 0.8, 0.8};
    CHECK(dob(same) == 0.0);
    const double wide[] = {90, 70};
    CHECK(dob(wide) == doctest::Approx(10.0));
    const double shifted[] = {95, 75};
    CHECK(dob(shifted) == doctest::Approx(dob(wide)));
    const double one[] = {0.5};
    CHECK_THROWS_AS(dob(one), DegenerateError);
}

TEST_CASE("degenerate all-negative predictor separates DEO and OPE") {
    auto b = breakdown_from_confusions("gender", {bmt_m(), bmt_nm()});
    REQUIRE(b.deo.has_value());
    CHECK(*b.deo == 0.0);
    CHECK(*b.ope > 0.0);
    CHECK_FALSE(b.ppv_parity.has_value());
    CHECK(format_percent(b.ppv_parity) == "undefined");
    CHECK(format_percent(b.ope) == "10.73");
}

TEST_CASE("intersectional report") {
    std::mt19937_64 rng(12);
    const std::size_t n = 400;
    std::vector<int> p(n), y(n);
    ProtectedColumn a{"sex", std::vector<int>(n)}, b{"age", std::vector<int>(n)};
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = rng() % 2;
        p[i] = rng() % 4 == 0 ? 1 - y[i] : y[i];
        a.values[i] = rng() % 2;
        b.values[i] = rng() % 2;
    }
    auto r = intersectional_report(p, y, a, b);
    CHECK(r.pairs == 6);
    double sum = 0.0;
    for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j) sum += std::abs(*r.op[i] - *r.op[j]);
    CHECK(*r.aggregate == doctest::Approx(sum / 6));

    auto perfect = intersectional_report(y, y, a, b);
    CHECK(*perfect.aggregate == 0.0);

    for (std::size_t i = 0; i < n; ++i)
        if (a.values[i] == 1 && b.values[i] == 1) b.values[i] = 0;
    std::vector<std::string> warnings;
    auto missing = intersectional_report(p, y, a, b, &warnings);
    CHECK(missing.pairs == 3);
    CHECK(warnings.size() == 1);
}

TEST_CASE("report round trip is bit-stable") {
    std::mt19937_64 rng(3);
    const std::size_t n = 300;
    std::vector<int> p(n), y(n);
    std::vector<ProtectedColumn> cols{{"color", std::vector<int>(n)}, {"size", std::vector<int>(n)}};
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = rng() % 2;
        p[i] = rng() % 3 == 0 ? 1 - y[i] : y[i];
        cols[0].values[i] = rng() % 2;
        cols[1].values[i] = rng() % 2;
    }
    auto r = evaluate_predictions(p, y, cols, "test", "abc");
    auto j = r.to_json();
    auto back = MetricsReport::from_json(nlohmann::json::parse(j.dump()));
    CHECK(back.to_json() == j);

    // Overall accuracy is the sample-weighted subgroup mean.
    double weighted = 0.0;
    for (const auto& g : r.attributes[1].groups) weighted += g.accuracy() * g.total;
    CHECK(r.overall_accuracy == doctest::Approx(weighted / n));
    CHECK(r.intersectional.has_value());
    CHECK(r.confusions_csv().find("color,color=1,negative,") != std::string::npos);
}
