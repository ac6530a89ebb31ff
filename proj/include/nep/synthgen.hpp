#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "nep/error.hpp"
#include "nep/event_model.hpp"

namespace nep {

// Parameters of a synthetic cohort. When `transitions` is empty the chain is
// built from permutation mixtures: every group shares the permutations in
// `shared_weights` and owns one extra permutation weighted by `group_weight`,
// then a uniform `smoothing` floor is mixed in. All such matrices are doubly
// stochastic, so every group has the same uniform stationary law and only the
// ordering of events separates the groups.
struct CohortSpec {
    std::int64_t n_patients = 2000;
    std::string id_prefix = "P";
    std::map<EventType, int> values_per_type = {{EventType::lab, 18},
                                                {EventType::vital, 12},
                                                {EventType::medication, 10},
                                                {EventType::diagnosis, 6},
                                                {EventType::procedure, 4}};
    int n_risk_groups = 2;
    std::vector<double> group_probs;  // empty = uniform
    std::vector<double> shared_weights = {0.25, 0.15};
    double group_weight = 0.60;
    double smoothing = 0.05;
    std::uint64_t structure_seed = 7;
    std::vector<Eigen::MatrixXd> transitions;  // explicit per-group override
    std::vector<double> initial;               // explicit override, empty = uniform
    std::vector<double> hazards = {1.0 / 900.0, 1.0 / 150.0};  // 1/days, per group
    std::map<EventType, double> mean_gap_days = {{EventType::lab, 3.0},
                                                 {EventType::vital, 1.0},
                                                 {EventType::medication, 14.0},
                                                 {EventType::diagnosis, 30.0},
                                                 {EventType::procedure, 60.0}};
    int min_length = 30;
    int max_length = 70;
    double censor_horizon_days = 1825.0;
    std::uint64_t seed = 42;
};

// Ground-truth generative process behind a synthetic cohort.
struct MarkovOracle {
    std::vector<EventKey> tokens;              // chain state j <-> event
    std::vector<double> initial;               // pi
    std::vector<Eigen::MatrixXd> transitions;  // row-stochastic, one per group
    std::vector<double> group_probs;
    std::vector<double> hazards;
    std::map<EventType, double> mean_gap_days;
    std::map<std::string, int> assignments;  // patient_id -> group

    std::size_t n_tokens() const { return tokens.size(); }
    std::size_t n_groups() const { return transitions.size(); }
    // Throws ValidationError for events outside the chain.
    int token_index(const ClinicalEvent& event) const;
    int group_of(const std::string& patient_id) const;

    nlohmann::json to_json() const;
    static MarkovOracle from_json(const nlohmann::json& j);
};

struct SyntheticCohort {
    std::vector<PatientRecord> records;
    MarkovOracle oracle;
};

inline constexpr std::string_view kHighRiskTask = "high_risk";
inline constexpr std::string_view kSurvivalTask = "survival";

// Throws ValidationError describing the first invalid field.
void validate_spec(const CohortSpec& spec);

MarkovOracle build_oracle(const CohortSpec& spec);

// Deterministic given spec.seed. Patient i draws from its own stream seeded
// with seed XOR i, so any partition of patients over `threads` workers gives
// the same cohort.
SyntheticCohort generate_cohort(const CohortSpec& spec, unsigned threads = 1);

// p(e_{t+1} | e_1..e_t) under the given group: the transition row of the last event.
std::vector<double> oracle_next_event_dist(const MarkovOracle& oracle, int group,
                                           std::span<const ClinicalEvent> history);
std::vector<double> oracle_next_event_dist(const MarkovOracle& oracle, const std::string& patient_id,
                                           std::span<const ClinicalEvent> history);

// Same quantity when the group is unknown: the group posterior given the
// history (first event under pi, then transitions) mixes the group rows.
std::vector<double> oracle_predictive_dist(const MarkovOracle& oracle,
                                           std::span<const ClinicalEvent> history);

class NonErgodicChain : public Error {
public:
    NonErgodicChain(int group, std::vector<double> component_entropies);
    int group() const noexcept { return group_; }
    // Stationary-weighted entropy of each closed communicating class.
    const std::vector<double>& component_entropies() const noexcept { return entropies_; }

private:
    int group_;
    std::vector<double> entropies_;
};

// Stationary law of a row-stochastic matrix by power iteration on the lazy
// chain (I + T) / 2, to an L1 change below `tol`.
Eigen::VectorXd stationary_distribution(const Eigen::MatrixXd& transition, double tol = 1e-10);

// Sum_g w_g Sum_j mu_j H(T_g[j, .]) in nats. Throws NonErgodicChain when a
// group chain has more than one closed class.
double oracle_conditional_entropy(const MarkovOracle& oracle);

void write_oracle(const std::filesystem::path& path, const MarkovOracle& oracle);
MarkovOracle read_oracle(const std::filesystem::path& path);

}  // namespace nep
