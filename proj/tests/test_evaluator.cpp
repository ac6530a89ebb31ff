#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "doctest.h"
#include "nep/error.hpp"
#include "nep/evaluator.hpp"
#include "nep/rng.hpp"
#include "oracles.hpp"

using namespace nep;

namespace {

// Two Gaussian blobs in 3-d, overlapping.
LabeledDataset blobs(int n, double shift, std::uint64_t seed) {
    Rng rng(seed);
    LabeledDataset d;
    d.features.resize(n, 3);
    for (int i = 0; i < n; ++i) {
        const int y = i % 3 == 0 ? 1 : 0;
        d.labels.push_back(y);
        d.patient_ids.push_back("p" + std::to_string(i));
        for (int j = 0; j < 3; ++j) d.features(i, j) = rng.normal() + (j == 0 ? shift * y : 0.0);
    }
    return d;
}

LabeledDataset survival_set(int n, std::uint64_t seed) {
    Rng rng(seed);
    LabeledDataset d;
    d.kind = TaskKind::survival;
    d.features.resize(n, 2);
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        d.features(i, 0) = x;
        d.features(i, 1) = rng.normal();
        const double t = rng.exponential(std::exp(x) / 400.0);
        d.times.push_back(std::min(std::ceil(t), 1000.0));
        d.events.push_back(t < 1000.0 ? 1 : 0);
        d.patient_ids.push_back("s" + std::to_string(i));
    }
    return d;
}

}  // namespace

TEST_CASE("AUROC on a textbook example") {
    const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
    const std::vector<int> y{0, 0, 1, 1};
    CHECK(auroc(s, y) == 0.75);
    const std::vector<double> tied{0.5, 0.5};
    const std::vector<int> yt{0, 1};
    CHECK(auroc(tied, yt) == 0.5);
    const std::vector<int> one_class{1, 1};
    CHECK_THROWS_AS(auroc(tied, one_class), ValidationError);
}

TEST_CASE("C-index on a textbook example") {
    const std::vector<double> risk{3, 1, 2}, t{1, 2, 3};
    const std::vector<int> e{1, 1, 0};
    CHECK(c_index(risk, t, e) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    // Only censored subjects: nothing is comparable.
    const std::vector<int> none{0, 0, 0};
    CHECK_THROWS_AS(c_index(risk, t, none), ValidationError);
    // Equal times are not comparable.
    const std::vector<double> same{5, 5};
    const std::vector<double> r2{1, 2};
    const std::vector<int> e2{1, 1};
    CHECK_THROWS_AS(c_index(r2, same, e2), ValidationError);
}

TEST_CASE("metrics equal brute-force pair enumeration") {
    Rng rng(12);
    for (int trial = 0; trial < 200; ++trial) {
        const auto n = static_cast<std::size_t>(2 + rng.below(199));
        std::vector<double> s(n), t(n);
        std::vector<int> y(n), e(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = static_cast<double>(rng.below(trial % 2 ? 5 : 1000));  // coarse scores force ties
            t[i] = static_cast<double>(1 + rng.below(trial % 3 ? 20 : 500));
            y[i] = static_cast<int>(rng.below(2));
            e[i] = rng.uniform() < 0.6 ? 1 : 0;
        }
        y[0] = 0;
        y[1] = 1;
        e[0] = 1;
        t[0] = 0.5;  // guarantees a comparable pair
        CHECK(auroc(s, y) == oracle::auroc_pairs(s, y));
        CHECK(c_index(s, t, e) == oracle::cindex_pairs(s, t, e));
    }
}

TEST_CASE("metrics ignore monotone transforms of the scores") {
    Rng rng(5);
    std::vector<double> s(100), t(100), g(100);
    std::vector<int> y(100), e(100);
    for (std::size_t i = 0; i < 100; ++i) {
        s[i] = rng.normal();
        g[i] = std::exp(3.0 * s[i]) + 7.0;
        t[i] = 1.0 + static_cast<double>(rng.below(50));
        y[i] = static_cast<int>(i % 2);
        e[i] = static_cast<int>(rng.below(2));
    }
    e[0] = 1;
    CHECK(auroc(s, y) == auroc(g, y));
    CHECK(c_index(s, t, e) == c_index(g, t, e));
}

TEST_CASE("logistic regression reaches a stationary point") {
    const auto d = blobs(300, 1.5, 1);
    LogisticConfig cfg;
    cfg.l2 = 0.05;
    cfg.tol = 1e-9;
    const auto m = train_logistic(d.features, d.labels, cfg);
    const Eigen::MatrixXd x = m.transform(d.features);
    const double h = 1e-6;
    for (int j = 0; j < 3; ++j) {
        Eigen::VectorXd up = m.weights, down = m.weights;
        up[j] += h;
        down[j] -= h;
        const double g = (logistic_objective(x, d.labels, cfg.l2, up, m.bias) - logistic_objective(x, d.labels, cfg.l2, down, m.bias)) / (2 * h);
        CHECK(std::abs(g) < 1e-6);
    }
    const double gb = (logistic_objective(x, d.labels, cfg.l2, m.weights, m.bias + h) -
                       logistic_objective(x, d.labels, cfg.l2, m.weights, m.bias - h)) / (2 * h);
    CHECK(std::abs(gb) < 1e-6);
    CHECK(m.weights[0] > 0.5);
    const Eigen::VectorXd z = m.decision(d.features);
    CHECK(auroc(std::span<const double>(z.data(), static_cast<std::size_t>(z.size())), d.labels) > 0.8);
}

TEST_CASE("logistic edge cases") {
    Eigen::MatrixXd two(2, 1);
    two << -1, 1;
    const std::vector<int> y{0, 1};
    const auto sep = train_logistic(two, y);
    const auto p = sep.predict_proba(two);
    CHECK(p[0] < 0.5);
    CHECK(p[1] > 0.5);
    CHECK(sep.weights.allFinite());

    // Heavy shrinkage leaves only the intercept: the class prior.
    const auto d = blobs(90, 2.0, 2);
    LogisticConfig strong;
    strong.l2 = 1e8;
    const auto prior = train_logistic(d.features, d.labels, strong).predict_proba(d.features);
    CHECK((prior.array() - 1.0 / 3.0).abs().maxCoeff() < 1e-4);

    // Unpenalized fits do not care about feature scale.
    LogisticConfig free;
    free.l2 = 0.0;
    free.tol = 1e-10;
    const auto a = train_logistic(d.features, d.labels, free).predict_proba(d.features);
    const auto b = train_logistic(d.features * 25.0, d.labels, free).predict_proba(d.features * 25.0);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-5);

    const std::vector<int> single{1, 1};
    CHECK_THROWS_AS(train_logistic(two, single), ValidationError);
}

TEST_CASE("horizon labels") {
    const std::vector<double> t{100, 400, 200, 365};
    const std::vector<int> e{1, 0, 0, 1};
    CHECK(horizon_labels(t, e, 365) == std::vector<int>{1, 0, -1, 1});
}

TEST_CASE("folds partition the rows deterministically") {
    const auto d = blobs(103, 1.0, 3);
    const auto a = assign_folds(d, 5, 9);
    CHECK(a.stratified);
    CHECK(a.fold == assign_folds(d, 5, 9).fold);
    CHECK(a.fold != assign_folds(d, 5, 10).fold);
    std::vector<int> size(5, 0), pos(5, 0);
    for (std::size_t i = 0; i < d.size(); ++i) {
        REQUIRE(a.fold[i] >= 0);
        REQUIRE(a.fold[i] < 5);
        ++size[static_cast<std::size_t>(a.fold[i])];
        pos[static_cast<std::size_t>(a.fold[i])] += d.labels[i];
    }
    CHECK(*std::max_element(size.begin(), size.end()) - *std::min_element(size.begin(), size.end()) <= 2);
    CHECK(*std::max_element(pos.begin(), pos.end()) - *std::min_element(pos.begin(), pos.end()) <= 1);

    auto rare = blobs(40, 1.0, 4);
    std::fill(rare.labels.begin(), rare.labels.end(), 0);
    rare.labels[0] = rare.labels[1] = rare.labels[2] = 1;
    CHECK_FALSE(assign_folds(rare, 5, 1).stratified);
}

TEST_CASE("median") {
    CHECK(median_of({3, 1, 2}) == 2);
    CHECK(median_of({4, 1, 3, 2}) == 2.5);
    CHECK(std::isnan(median_of({})));
}

TEST_CASE("cross-validation reports are reproducible and self-consistent") {
    const auto d = blobs(200, 1.5, 6);
    CvConfig cfg;
    cfg.n_bootstrap = 200;
    cfg.seed = 3;
    const auto r = cross_validate(d, cfg, "blobs");
    CHECK(r.metric == "auroc");
    CHECK(r.folds.size() == 5);
    CHECK(r.median == median_of(r.folds));
    CHECK(r.ci_lo <= r.point);
    CHECK(r.point <= r.ci_hi);
    CHECK(r.point > 0.75);
    cfg.threads = 3;
    const auto again = cross_validate(d, cfg, "blobs");
    CHECK(again.folds == r.folds);
    CHECK(again.ci_lo == r.ci_lo);
    CHECK(r.to_json().at("feature_source") == "blobs");

    const auto s = cross_validate(survival_set(300, 7), cfg, "surv");
    CHECK(s.metric == "c_index");
    CHECK(s.median > 0.6);
}

TEST_CASE("label-efficiency sweep") {
    std::vector<FeatureSource> src{{"good", blobs(250, 2.0, 8)}, {"noise", blobs(250, 0.0, 8)}};
    CvConfig cfg;
    cfg.n_bootstrap = 50;
    const std::vector<std::int64_t> sizes{20, 60, 180};
    const auto rows = label_efficiency_sweep(src, sizes, cfg);
    REQUIRE(rows.size() == 6);
    for (const auto& row : rows) CHECK(row.report.train_size == row.size);
    // Training subsets are nested, so the biggest size sees the most signal.
    CHECK(rows[2].report.median >= rows[0].report.median - 0.05);
    CHECK(rows[2].report.median > rows[5].report.median);

    std::ostringstream csv;
    write_sweep_csv(csv, rows);
    std::istringstream lines(csv.str());
    std::string line;
    std::getline(lines, line);
    CHECK(line == "feature_source,size,metric,median,ci_lo,ci_hi");
    int n = 0;
    while (std::getline(lines, line)) {
        CHECK(std::count(line.begin(), line.end(), ',') == 5);
        ++n;
    }
    CHECK(n == 6);

    const std::vector<std::int64_t> too_big{240};
    CHECK_THROWS_AS(label_efficiency_sweep(src, too_big, cfg), ValidationError);
}

TEST_CASE("bag-of-events counts vocabulary events only") {
    const EventVocabulary v({{EventType::lab, "a"}, {EventType::lab, "b"}, {EventType::vital, "c"}});
    PatientRecord r;
    r.patient_id = "x";
    r.events = {{EventType::lab, "a", 0}, {EventType::lab, "a", 1}, {EventType::vital, "c", 2}, {EventType::lab, "<unk>", 3}};
    const auto m = bag_of_events_baseline(std::vector{r}, v);
    REQUIRE(m.cols() == 3);
    CHECK(m(0, 0) == doctest::Approx(std::log1p(2.0)));
    CHECK(m(0, 1) == 0.0);
    CHECK(m(0, 2) == doctest::Approx(std::log1p(1.0)));
}
