#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nep/event_model.hpp"

namespace nep {

struct SamplingConfig {
    double alpha = 0.5;
    std::int64_t n_instances = 1;
    std::uint64_t seed = 0;
};

// Temperature-flattened type law p_i = f_i^alpha / sum_j f_j^alpha.
struct SamplingDistribution {
    std::vector<EventType> types;
    std::vector<double> p;

    double prob(EventType type) const;
};

SamplingDistribution type_distribution(const FrequencyTable& freqs, double alpha);

struct TargetSelection {
    std::string patient_id;
    std::size_t patient_index = 0;  // position of the record in the cohort
    std::size_t target_index = 0;   // event index within the record, >= 1
    EventType event_type = EventType::diagnosis;

    bool operator==(const TargetSelection&) const = default;
};

// Each draw picks a type from `dist`, then a target uniformly among all
// eligible events of that type cohort-wide (events with at least one
// predecessor). Types with mass but no eligible event are dropped and the
// remaining mass renormalized. Draws are with replacement.
std::vector<TargetSelection> sample_training_positions(std::span<const PatientRecord> records,
                                                       const SamplingDistribution& dist,
                                                       const SamplingConfig& config);

void write_selections(const std::filesystem::path& path, std::span<const TargetSelection> selections);
std::vector<TargetSelection> read_selections(const std::filesystem::path& path,
                                             std::span<const PatientRecord> records);

}  // namespace nep
