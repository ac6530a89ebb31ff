#include "nep/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <thread>

#include "nep/error.hpp"
#include "nep/hash.hpp"
#include "nep/rng.hpp"

namespace nep {

namespace {

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }
double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// Runs f(0..n-1) on up to `threads` workers. Each job writes only its own slot.
template <class F>
void parallel_for(std::size_t n, unsigned threads, F&& f) {
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t)
        pool.emplace_back([&, t] {
            for (std::size_t i = t; i < n; i += threads) {
                try {
                    f(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& x, std::span<const std::size_t> rows) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
    return out;
}

template <class T>
std::vector<T> take(std::span<const T> v, std::span<const std::size_t> rows) {
    std::vector<T> out;
    out.reserve(rows.size());
    for (auto r : rows) out.push_back(v[r]);
    return out;
}

// Metric of the task on a subset of rows; nullopt when undefined there.
std::optional<double> task_metric(const LabeledDataset& data, std::span<const double> scores,
                                  std::span<const std::size_t> rows) {
    const auto s = take(scores, rows);
    if (data.kind == TaskKind::binary) {
        const auto y = take(std::span<const int>(data.labels), rows);
        const auto pos = std::count(y.begin(), y.end(), 1);
        if (pos == 0 || pos == static_cast<long>(y.size())) return std::nullopt;
        return auroc(s, y);
    }
    const auto t = take(std::span<const double>(data.times), rows);
    const auto e = take(std::span<const int>(data.events), rows);
    try {
        return c_index(s, t, e);
    } catch (const ValidationError&) {
        return std::nullopt;
    }
}

double quantile(std::vector<double> sorted, double q) {
    std::sort(sorted.begin(), sorted.end());
    const double h = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace

void LabeledDataset::validate() const {
    const auto n = size();
    if (n == 0) throw ValidationError("dataset is empty");
    if (!patient_ids.empty() && patient_ids.size() != n) throw ValidationError("dataset ids do not match feature rows");
    if (!features.allFinite()) throw ValidationError("dataset features contain NaN or Inf");
    if (kind == TaskKind::binary) {
        if (labels.size() != n) throw ValidationError("label count does not match feature rows");
        for (int y : labels)
            if (y != 0 && y != 1) throw ValidationError("binary labels must be 0 or 1");
    } else {
        if (times.size() != n || events.size() != n) throw ValidationError("survival label count does not match feature rows");
        for (std::size_t i = 0; i < n; ++i) {
            if (!(times[i] > 0.0)) throw ValidationError("survival times must be > 0");
            if (events[i] != 0 && events[i] != 1) throw ValidationError("event indicators must be 0 or 1");
        }
    }
}

LabeledDataset make_dataset(const Eigen::MatrixXd& features, std::span<const PatientRecord> records, const std::string& task) {
    if (static_cast<std::size_t>(features.rows()) != records.size())
        throw ValidationError("feature rows do not match the number of records");
    LabeledDataset d;
    d.features = features;
    bool first = true;
    for (const auto& r : records) {
        const auto it = r.outcomes.find(task);
        if (it == r.outcomes.end()) throw ValidationError("patient '" + r.patient_id + "' has no outcome '" + task + "'");
        const TaskKind kind = std::holds_alternative<BinaryOutcome>(it->second) ? TaskKind::binary : TaskKind::survival;
        if (first) d.kind = kind;
        else if (kind != d.kind) throw ValidationError("outcome '" + task + "' mixes binary and survival labels");
        first = false;
        if (kind == TaskKind::binary) {
            d.labels.push_back(std::get<BinaryOutcome>(it->second).label);
        } else {
            const auto& s = std::get<SurvivalOutcome>(it->second);
            d.times.push_back(s.time);
            d.events.push_back(s.event);
        }
        d.patient_ids.push_back(r.patient_id);
    }
    d.validate();
    return d;
}

Eigen::MatrixXd LogisticModel::transform(const Eigen::MatrixXd& x) const {
    return (x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
}

Eigen::VectorXd LogisticModel::decision(const Eigen::MatrixXd& x) const {
    return (transform(x) * weights).array() + bias;
}

Eigen::VectorXd LogisticModel::predict_proba(const Eigen::MatrixXd& x) const {
    return decision(x).unaryExpr([](double z) { return sigmoid(z); });
}

double logistic_objective(const Eigen::MatrixXd& x, std::span<const int> y, double l2, const Eigen::VectorXd& w, double b) {
    const Eigen::VectorXd z = (x * w).array() + b;
    double loss = 0.0;
    for (Eigen::Index i = 0; i < z.size(); ++i) loss += softplus(z(i)) - y[static_cast<std::size_t>(i)] * z(i);
    return loss / static_cast<double>(z.size()) + 0.5 * l2 * w.squaredNorm();
}

LogisticModel train_logistic(const Eigen::MatrixXd& x_raw, std::span<const int> y, const LogisticConfig& config) {
    const auto n = x_raw.rows(), d = x_raw.cols();
    if (static_cast<std::size_t>(n) != y.size()) throw ValidationError("logistic: label count does not match rows");
    if (n == 0) throw ValidationError("logistic: no training rows");
    const auto pos = std::count(y.begin(), y.end(), 1);
    if (pos == 0 || pos == n) throw ValidationError("logistic: training labels contain a single class");
    if (config.l2 < 0) throw ConfigError("logistic: l2 must be >= 0");

    LogisticModel m;
    m.mean = Eigen::VectorXd::Zero(d);
    m.scale = Eigen::VectorXd::Ones(d);
    if (config.standardize) {
        m.mean = x_raw.colwise().mean().transpose();
        for (Eigen::Index c = 0; c < d; ++c) {
            const double sd = std::sqrt((x_raw.col(c).array() - m.mean(c)).square().mean());
            m.scale(c) = sd > 1e-12 ? sd : 1.0;
        }
    }
    const Eigen::MatrixXd x = m.transform(x_raw);
    Eigen::VectorXd yv(n);
    for (Eigen::Index i = 0; i < n; ++i) yv(i) = y[static_cast<std::size_t>(i)];

    Eigen::VectorXd w = Eigen::VectorXd::Zero(d);
    double b = 0.0;
    const double inv_n = 1.0 / static_cast<double>(n);
    const auto objective = [&](const Eigen::VectorXd& ww, double bb) { return logistic_objective(x, y, config.l2, ww, bb); };
    double f = objective(w, b);
    int it = 0;
    for (;; ++it) {
        const Eigen::VectorXd z = (x * w).array() + b;
        const Eigen::VectorXd p = z.unaryExpr([](double v) { return sigmoid(v); });
        const Eigen::VectorXd r = p - yv;
        // Gradient and Hessian over (w, b); the bias is not penalized.
        Eigen::VectorXd g(d + 1);
        g.head(d) = x.transpose() * r * inv_n + config.l2 * w;
        g(d) = r.sum() * inv_n;
        m.grad_norm = g.norm();
        if (m.grad_norm < config.tol || it >= config.max_iter) break;
        const Eigen::VectorXd s = (p.array() * (1.0 - p.array())).matrix() * inv_n;
        Eigen::MatrixXd h(d + 1, d + 1);
        h.topLeftCorner(d, d) = x.transpose() * s.asDiagonal() * x;
        h.topLeftCorner(d, d).diagonal().array() += config.l2;
        h.block(0, d, d, 1) = x.transpose() * s;
        h.block(d, 0, 1, d) = h.block(0, d, d, 1).transpose();
        h(d, d) = s.sum();
        h.diagonal().array() += 1e-10;  // keeps separable problems solvable
        Eigen::VectorXd step = h.ldlt().solve(g);
        if (!step.allFinite() || step.dot(g) <= 0.0) step = g;
        // Armijo backtracking from the full Newton step.
        double t = 1.0;
        for (;;) {
            const Eigen::VectorXd w_new = w - t * step.head(d);
            const double b_new = b - t * step(d);
            const double f_new = objective(w_new, b_new);
            if (f_new <= f - 1e-4 * t * step.dot(g) || t < 1e-20) {
                w = w_new;
                b = b_new;
                f = f_new;
                break;
            }
            t *= 0.5;
        }
    }
    m.weights = w;
    m.bias = b;
    m.iterations = it;
    return m;
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw ValidationError("auroc: scores and labels differ in length");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // Sum of positive midranks, doubled to stay integral: midrank*2 = first + last + 2 for 0-based ranks.
    std::int64_t rank_sum2 = 0, n_pos = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const auto mid2 = static_cast<std::int64_t>(i + j + 2);
        for (std::size_t k = i; k <= j; ++k)
            if (labels[order[k]] == 1) {
                rank_sum2 += mid2;
                ++n_pos;
            }
        i = j + 1;
    }
    for (int y : labels)
        if (y != 0 && y != 1) throw ValidationError("auroc: labels must be 0 or 1");
    const std::int64_t n_neg = static_cast<std::int64_t>(n) - n_pos;
    if (n_pos == 0 || n_neg == 0) throw ValidationError("auroc: both classes are required");
    // 2U = rank_sum2 - n_pos (n_pos + 1); U counts ties as one half.
    const std::int64_t u2 = rank_sum2 - n_pos * (n_pos + 1);
    return (static_cast<double>(u2 / 2) + 0.5 * static_cast<double>(u2 % 2)) /
           (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double c_index(std::span<const double> risk, std::span<const double> times, std::span<const int> events) {
    const std::size_t n = risk.size();
    if (times.size() != n || events.size() != n) throw ValidationError("c_index: input lengths differ");
    // Risk ranks for the Fenwick tree.
    std::vector<double> uniq(risk.begin(), risk.end());
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    const auto rank_of = [&](double r) {
        return static_cast<std::size_t>(std::lower_bound(uniq.begin(), uniq.end(), r) - uniq.begin()) + 1;
    };
    std::vector<std::int64_t> tree(uniq.size() + 1, 0);
    const auto add = [&](std::size_t i) {
        for (; i < tree.size(); i += i & (~i + 1)) ++tree[i];
    };
    const auto prefix = [&](std::size_t i) {
        std::int64_t s = 0;
        for (; i > 0; i -= i & (~i + 1)) s += tree[i];
        return s;
    };

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] > times[b]; });
    std::int64_t concordant = 0, tied = 0, comparable = 0, inserted = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && times[order[j + 1]] == times[order[i]]) ++j;
        // Tree holds exactly the subjects with strictly later times.
        for (std::size_t k = i; k <= j; ++k) {
            const std::size_t s = order[k];
            if (events[s] != 1) continue;
            const std::size_t r = rank_of(risk[s]);
            const std::int64_t below = prefix(r - 1), at = prefix(r) - below;
            concordant += below;
            tied += at;
            comparable += inserted;
        }
        for (std::size_t k = i; k <= j; ++k) add(rank_of(risk[order[k]]));
        inserted += static_cast<std::int64_t>(j - i + 1);
        i = j + 1;
    }
    if (comparable == 0) throw ValidationError("c_index: no comparable pairs");
    return (static_cast<double>(concordant) + 0.5 * static_cast<double>(tied)) / static_cast<double>(comparable);
}

std::vector<int> horizon_labels(std::span<const double> times, std::span<const int> events, double horizon_days) {
    std::vector<int> y(times.size());
    for (std::size_t i = 0; i < times.size(); ++i) {
        if (times[i] <= horizon_days) y[i] = events[i] == 1 ? 1 : -1;
        else y[i] = 0;
    }
    return y;
}

FoldAssignment assign_folds(const LabeledDataset& data, int k, std::uint64_t seed) {
    const std::size_t n = data.size();
    if (k < 2) throw ConfigError("cross-validation needs k >= 2");
    if (n < static_cast<std::size_t>(k)) throw ValidationError("cross-validation needs at least k rows");
    const auto& strata = data.kind == TaskKind::binary ? data.labels : data.events;
    FoldAssignment fa;
    fa.fold.assign(n, 0);
    const auto minority = std::min(std::count(strata.begin(), strata.end(), 1), std::count(strata.begin(), strata.end(), 0));
    fa.stratified = minority >= k;
    Rng rng(seed);
    std::size_t next = 0;  // continues across strata so fold sizes stay balanced
    for (int s = fa.stratified ? 0 : -1; s <= (fa.stratified ? 1 : -1); ++s) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < n; ++i)
            if (s < 0 || strata[i] == s) idx.push_back(i);
        rng.shuffle(idx);
        for (auto i : idx) fa.fold[i] = static_cast<int>(next++ % static_cast<std::size_t>(k));
    }
    return fa;
}

double median_of(std::vector<double> values) {
    std::erase_if(values, [](double v) { return !std::isfinite(v); });
    if (values.empty()) return std::nan("");
    std::sort(values.begin(), values.end());
    const std::size_t m = values.size() / 2;
    return values.size() % 2 ? values[m] : 0.5 * (values[m - 1] + values[m]);
}

nlohmann::ordered_json MetricReport::to_json() const {
    nlohmann::ordered_json j;
    j["metric"] = metric;
    j["feature_source"] = feature_source;
    j["point"] = point;
    j["folds"] = folds;
    j["median"] = median;
    j["ci_lo"] = ci_lo;
    j["ci_hi"] = ci_hi;
    j["k"] = k;
    j["n_bootstrap"] = n_bootstrap;
    j["train_size"] = train_size;
    j["stratification_fallback"] = stratification_fallback;
    j["config_hash"] = config_hash;
    return j;
}

MetricReport cross_validate(const LabeledDataset& data, const CvConfig& config, const std::string& feature_source,
                            std::int64_t train_size) {
    data.validate();
    const std::size_t n = data.size();
    const int k = config.k;
    const auto folds = assign_folds(data, k, config.seed);

    std::vector<std::vector<std::size_t>> train_rows(static_cast<std::size_t>(k)), test_rows(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < n; ++i)
        for (int f = 0; f < k; ++f) (folds.fold[i] == f ? test_rows : train_rows)[static_cast<std::size_t>(f)].push_back(i);
    for (int f = 0; f < k; ++f) {
        auto& rows = train_rows[static_cast<std::size_t>(f)];
        Rng rng(stage_seed(config.seed, 100 + static_cast<std::uint64_t>(f)));
        rng.shuffle(rows);
        if (train_size >= 0) {
            if (static_cast<std::size_t>(train_size) > rows.size())
                throw ValidationError("training size " + std::to_string(train_size) + " exceeds the " +
                                      std::to_string(rows.size()) + " rows of training fold " + std::to_string(f));
            rows.resize(static_cast<std::size_t>(train_size));
        }
    }

    std::vector<int> head_labels =
        data.kind == TaskKind::binary ? data.labels : horizon_labels(data.times, data.events, config.head.horizon_days);
    std::vector<double> scores(n, 0.0);
    MetricReport rep;
    rep.folds.assign(static_cast<std::size_t>(k), std::nan(""));
    parallel_for(static_cast<std::size_t>(k), config.threads, [&](std::size_t f) {
        std::vector<std::size_t> fit_rows;
        for (auto r : train_rows[f])
            if (head_labels[r] >= 0) fit_rows.push_back(r);
        const auto model = train_logistic(take_rows(data.features, fit_rows),
                                          take(std::span<const int>(head_labels), fit_rows), config.head.logistic);
        const Eigen::VectorXd s = model.decision(take_rows(data.features, test_rows[f]));
        for (std::size_t i = 0; i < test_rows[f].size(); ++i) scores[test_rows[f][i]] = s(static_cast<Eigen::Index>(i));
        if (const auto v = task_metric(data, scores, test_rows[f])) rep.folds[f] = *v;
    });

    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    const auto point = task_metric(data, scores, all);
    if (!point) throw ValidationError("metric is undefined on the pooled predictions");
    rep.metric = data.kind == TaskKind::binary ? "auroc" : "c_index";
    rep.feature_source = feature_source;
    rep.point = *point;
    rep.median = median_of(rep.folds);
    rep.k = k;
    rep.n_bootstrap = config.n_bootstrap;
    rep.train_size = train_size;
    rep.stratification_fallback = !folds.stratified;

    std::vector<double> boot(static_cast<std::size_t>(std::max(0, config.n_bootstrap)), std::nan(""));
    parallel_for(boot.size(), config.threads, [&](std::size_t b) {
        Rng rng(stage_seed(config.seed, 10000 + b));
        std::vector<std::size_t> rows(n);
        for (auto& r : rows) r = static_cast<std::size_t>(rng.below(n));
        if (const auto v = task_metric(data, scores, rows)) boot[b] = *v;
    });
    std::erase_if(boot, [](double v) { return !std::isfinite(v); });
    if (boot.empty()) {
        rep.ci_lo = rep.ci_hi = rep.point;
    } else {
        // Percentile interval, widened to cover the point estimate when resampling skew pushes it out.
        rep.ci_lo = std::min(quantile(boot, 0.025), rep.point);
        rep.ci_hi = std::max(quantile(boot, 0.975), rep.point);
    }

    nlohmann::json cfg{{"k", k},
                       {"seed", config.seed},
                       {"n_bootstrap", config.n_bootstrap},
                       {"l2", config.head.logistic.l2},
                       {"tol", config.head.logistic.tol},
                       {"max_iter", config.head.logistic.max_iter},
                       {"standardize", config.head.logistic.standardize},
                       {"horizon_days", config.head.horizon_days},
                       {"train_size", train_size},
                       {"feature_source", feature_source},
                       {"n", n},
                       {"width", data.features.cols()}};
    rep.config_hash = hex64(fnv1a(cfg.dump()));
    return rep;
}

std::vector<SweepRow> label_efficiency_sweep(std::span<const FeatureSource> sources, std::span<const std::int64_t> sizes,
                                             const CvConfig& config) {
    std::vector<SweepRow> rows;
    for (const auto& src : sources) {
        const std::size_t n = src.data.size();
        const std::size_t min_train = n - (n + static_cast<std::size_t>(config.k) - 1) / static_cast<std::size_t>(config.k);
        for (auto s : sizes)
            if (s < 1 || static_cast<std::size_t>(s) > min_train)
                throw ValidationError("sweep size " + std::to_string(s) + " exceeds the smallest training split (" +
                                      std::to_string(min_train) + " rows) of '" + src.name + "'");
        for (auto s : sizes) rows.push_back({src.name, s, cross_validate(src.data, config, src.name, s)});
    }
    return rows;
}

void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows) {
    out << "feature_source,size,metric,median,ci_lo,ci_hi\n";
    char buf[128];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, ",%lld,%s,%.6f,%.6f,%.6f\n", static_cast<long long>(r.size), r.report.metric.c_str(),
                      r.report.median, r.report.ci_lo, r.report.ci_hi);
        out << r.feature_source << buf;
    }
}

void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepRow> rows) {
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot write " + path.string());
    write_sweep_csv(out, rows);
}

Eigen::MatrixXd bag_of_events_baseline(std::span<const PatientRecord> records, const EventVocabulary& vocab) {
    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(records.size()),
                                              static_cast<Eigen::Index>(vocab.n_events()));
    for (std::size_t i = 0; i < records.size(); ++i)
        for (const auto& e : records[i].events) {
            const TokenId id = vocab.encode(e);
            if (vocab.is_event(id)) x(static_cast<Eigen::Index>(i), id - special::kCount) += 1.0;
        }
    return x.array().log1p().matrix();
}

}  // namespace nep
