#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "nep/event_model.hpp"

namespace nep {

enum class TaskKind { binary, survival };

// One row of features per patient plus either binary labels or (time, event) pairs.
struct LabeledDataset {
    Eigen::MatrixXd features;
    TaskKind kind = TaskKind::binary;
    std::vector<int> labels;      // binary tasks
    std::vector<double> times;    // survival tasks, days
    std::vector<int> events;      // survival tasks, 1 = event observed
    std::vector<std::string> patient_ids;

    std::size_t size() const { return static_cast<std::size_t>(features.rows()); }
    void validate() const;
};

// Features in patient_ids order; outcomes looked up by task name on each record.
LabeledDataset make_dataset(const Eigen::MatrixXd& features, std::span<const PatientRecord> records,
                            const std::string& task);

struct LogisticConfig {
    double l2 = 1e-2;
    double tol = 1e-6;
    int max_iter = 200;
    bool standardize = true;
};

struct LogisticModel {
    Eigen::VectorXd weights;  // on standardized features
    double bias = 0.0;
    Eigen::VectorXd mean, scale;  // column standardization (identity when disabled)
    int iterations = 0;
    double grad_norm = 0.0;

    Eigen::MatrixXd transform(const Eigen::MatrixXd& x) const;
    Eigen::VectorXd decision(const Eigen::MatrixXd& x) const;
    Eigen::VectorXd predict_proba(const Eigen::MatrixXd& x) const;
};

// Objective (1/n) sum log(1 + e^z) - y z + l2/2 |w|^2 with z = x w + b; x already transformed.
double logistic_objective(const Eigen::MatrixXd& x, std::span<const int> y, double l2, const Eigen::VectorXd& w, double b);

// Full-batch gradient descent with Armijo backtracking. Throws ValidationError on single-class labels.
LogisticModel train_logistic(const Eigen::MatrixXd& x, std::span<const int> y, const LogisticConfig& config = {});

// Mann-Whitney with midranks. Ties count one half.
double auroc(std::span<const double> scores, std::span<const int> labels);

// Harrell's C. Pairs with equal times are not comparable; equal risks earn one half.
double c_index(std::span<const double> risk, std::span<const double> times, std::span<const int> events);

struct HeadConfig {
    LogisticConfig logistic;
    double horizon_days = 365.0;  // survival tasks train on mortality within this horizon
};

// Binary training labels for a survival head: 1 = event by the horizon, 0 = known alive past it,
// -1 = censored before the horizon (dropped from head training).
std::vector<int> horizon_labels(std::span<const double> times, std::span<const int> events, double horizon_days);

struct FoldAssignment {
    std::vector<int> fold;  // fold index per row
    bool stratified = true;
};

FoldAssignment assign_folds(const LabeledDataset& data, int k, std::uint64_t seed);

struct MetricReport {
    std::string metric;  // "auroc" or "c_index"
    std::string feature_source;
    double point = 0.0;  // metric on pooled out-of-fold scores
    std::vector<double> folds;
    double median = 0.0;
    double ci_lo = 0.0, ci_hi = 0.0;
    int k = 5;
    int n_bootstrap = 1000;
    std::int64_t train_size = -1;  // -1 = full training folds
    bool stratification_fallback = false;
    std::string config_hash;

    nlohmann::ordered_json to_json() const;
};

struct CvConfig {
    int k = 5;
    std::uint64_t seed = 0;
    int n_bootstrap = 1000;
    unsigned threads = 1;
    HeadConfig head;
};

double median_of(std::vector<double> values);

// Fold i trains on the other folds (optionally on the first train_size rows of a fixed
// per-fold permutation) and scores fold i.
MetricReport cross_validate(const LabeledDataset& data, const CvConfig& config, const std::string& feature_source = "",
                            std::int64_t train_size = -1);

struct SweepRow {
    std::string feature_source;
    std::int64_t size = 0;
    MetricReport report;
};

struct FeatureSource {
    std::string name;
    LabeledDataset data;
};

// Throws ValidationError when a size exceeds the smallest training split.
std::vector<SweepRow> label_efficiency_sweep(std::span<const FeatureSource> sources, std::span<const std::int64_t> sizes,
                                             const CvConfig& config);
void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepRow> rows);
void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows);

// log1p counts of every event token; columns follow vocabulary order, UNK not counted.
Eigen::MatrixXd bag_of_events_baseline(std::span<const PatientRecord> records, const EventVocabulary& vocab);

}  // namespace nep
