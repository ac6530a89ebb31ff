#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "nep/event_model.hpp"
#include "nep/sampler.hpp"

namespace nep {

struct WindowConfig {
    int w = 32;
    int max_tokens = 512;
    int stride = 1;
    // Exhaustive enumeration also emits targets 1..w-1, whose context is shorter than w.
    bool include_short_history = true;
    // Move the gap-to-target bucket from the last context line into the response.
    bool predict_time = false;
};

void validate_window(const WindowConfig& config);
std::uint64_t serializer_config_hash(const WindowConfig& config);
nlohmann::json to_json(const WindowConfig& config);

// Gap buckets in days: {0}, {1}, [2,3], [4,7], [8,30], [31,90], [91,inf).
int time_bucket(std::int64_t delta_days);
std::string_view bucket_glyph(int bucket);

// Structural ids per prompt: BOS, header, footer.
inline constexpr int kStructuralTokens = 3;

// Prompt grammar, one line per event:
//
//   PATIENT HISTORY:
//   [<gap>] <TYPE>: <value>
//   ...
//   PREDICT NEXT EVENT:
//
// <gap> is the bucketed number of days from that event to the event that
// follows it; for the last context line that is the target. The response
// is "<TYPE>: <value>".
inline constexpr std::string_view kHeaderText = "PATIENT HISTORY:\n";
inline constexpr std::string_view kFooterText = "PREDICT NEXT EVENT:\n";

struct TrainingInstance {
    std::vector<TokenId> context_tokens;
    std::vector<TokenId> response_tokens;
    std::vector<std::uint8_t> loss_mask;  // over context ++ response; set on response only
    std::string patient_id;
    std::size_t target_index = 0;

    std::size_t size() const { return context_tokens.size() + response_tokens.size(); }
    bool operator==(const TrainingInstance&) const = default;
};

std::vector<TokenId> tokenize(std::string_view text, const EventVocabulary& vocab);
std::vector<TokenId> tokenize(const ClinicalEvent& event, const EventVocabulary& vocab);
std::string detokenize(std::span<const TokenId> ids, const EventVocabulary& vocab);

// Prompt text without the leading BOS.
std::string render_prompt(const TrainingInstance& instance, const EventVocabulary& vocab);
std::string render_response(const TrainingInstance& instance, const EventVocabulary& vocab);

TrainingInstance build_instance(const PatientRecord& record, std::size_t target_index,
                                const EventVocabulary& vocab, const WindowConfig& config);

// Instances for the selections that reference `record`.
std::vector<TrainingInstance> build_instances(const PatientRecord& record, const EventVocabulary& vocab,
                                              const WindowConfig& config,
                                              std::span<const TargetSelection> selections);
std::vector<TrainingInstance> build_all_instances(std::span<const PatientRecord> records,
                                                  const EventVocabulary& vocab, const WindowConfig& config,
                                                  std::span<const TargetSelection> selections);

// Every target of a sliding window with the configured stride: max(0, n - w)
// full windows, plus the short-history targets 1..w-1 when enabled.
std::vector<std::size_t> exhaustive_targets(std::size_t n_events, const WindowConfig& config);

// Prompt for embedding the most recent `w_embed` events: the same grammar
// with the last line's gap measured to the last event itself (bucket 0).
std::vector<TokenId> build_embedding_prompt(const PatientRecord& record, const EventVocabulary& vocab,
                                            int w_embed, int max_tokens);

void write_instances(const std::filesystem::path& path, std::span<const TrainingInstance> instances);
std::vector<TrainingInstance> read_instances(const std::filesystem::path& path);

}  // namespace nep
