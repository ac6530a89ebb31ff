#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"

namespace nep {

enum class EventType : std::uint8_t { diagnosis, medication, lab, vital, procedure, death };

inline constexpr std::array<EventType, 6> kAllEventTypes = {
    EventType::diagnosis, EventType::medication, EventType::lab,
    EventType::vital,     EventType::procedure,  EventType::death};

// Lower-case name used in cohort files ("lab").
std::string_view to_string(EventType type);
// Upper-case label used in rendered prompts ("LAB").
std::string_view type_label(EventType type);
EventType parse_event_type(std::string_view name);

// Value carried by events whose code was removed by the rare-code filter.
inline constexpr std::string_view kUnkValue = "<unk>";

struct ClinicalEvent {
    EventType type = EventType::diagnosis;
    std::string value;
    std::int64_t ts = 0;  // days since cohort epoch

    bool operator==(const ClinicalEvent&) const = default;
};

struct BinaryOutcome {
    int label = 0;
    bool operator==(const BinaryOutcome&) const = default;
};

struct SurvivalOutcome {
    double time = 0.0;  // days, > 0
    int event = 0;      // 1 observed, 0 censored
    bool operator==(const SurvivalOutcome&) const = default;
};

using Outcome = std::variant<BinaryOutcome, SurvivalOutcome>;

struct PatientRecord {
    std::string patient_id;
    std::vector<ClinicalEvent> events;
    std::map<std::string, Outcome> outcomes;

    bool operator==(const PatientRecord&) const = default;
};

// True when the value can be rendered by the serializer without ambiguity.
bool is_valid_value(std::string_view value);

// Throws ValidationError naming the patient when an invariant is broken.
void validate_record(const PatientRecord& record);

using TokenId = std::int32_t;

// Reserved prefix of the vocabulary. Bucket tokens follow the structural ones.
namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kMask = 4;
inline constexpr TokenId kSep = 5;
inline constexpr TokenId kHeader = 6;
inline constexpr TokenId kFooter = 7;
inline constexpr TokenId kFirstBucket = 8;
inline constexpr int kNumBuckets = 7;
inline constexpr TokenId kCount = kFirstBucket + kNumBuckets;
}  // namespace special

struct EventKey {
    EventType type = EventType::diagnosis;
    std::string value;

    auto operator<=>(const EventKey&) const = default;
};

// Bijection between event tokens and (type, value) pairs. Event ids are
// assigned in sorted key order after the reserved special prefix.
class EventVocabulary {
public:
    EventVocabulary() = default;
    explicit EventVocabulary(std::vector<EventKey> keys);

    // Id of the pair, or UNK when it is not in the vocabulary.
    TokenId encode(EventType type, std::string_view value) const;
    TokenId encode(const ClinicalEvent& event) const { return encode(event.type, event.value); }
    std::optional<TokenId> find(EventType type, std::string_view value) const;

    // Throws std::out_of_range for special ids.
    const EventKey& decode(TokenId id) const;

    bool is_event(TokenId id) const { return id >= special::kCount && id < size(); }
    static bool is_bucket(TokenId id) {
        return id >= special::kFirstBucket && id < special::kFirstBucket + special::kNumBuckets;
    }
    static TokenId bucket_token(int bucket) { return special::kFirstBucket + bucket; }

    TokenId size() const { return special::kCount + static_cast<TokenId>(keys_.size()); }
    std::size_t n_events() const { return keys_.size(); }
    const std::vector<EventKey>& keys() const { return keys_; }

    nlohmann::json to_json() const;
    static EventVocabulary from_json(const nlohmann::json& j);

    bool operator==(const EventVocabulary& other) const { return keys_ == other.keys_; }

private:
    std::vector<EventKey> keys_;
    std::map<EventKey, TokenId> index_;
};

struct FrequencyTable {
    std::vector<EventType> types;      // types present, in enum order
    std::vector<std::int64_t> counts;  // f_i >= 1

    std::size_t k() const { return types.size(); }
    std::int64_t total() const;
    std::int64_t count(EventType type) const;
};

struct Cohort {
    std::vector<PatientRecord> records;
    EventVocabulary vocab;
};

// Parses the line-delimited cohort format and validates each record.
std::vector<PatientRecord> parse_cohort(std::istream& in);
PatientRecord parse_record(const nlohmann::json& line, std::size_t line_no);
nlohmann::ordered_json record_to_json(const PatientRecord& record);

// Replaces (type, value) pairs seen fewer than min_count times with UNK and
// builds the vocabulary over the survivors.
Cohort build_cohort(std::vector<PatientRecord> records, std::int64_t min_count);
Cohort load_cohort(const std::filesystem::path& path, std::int64_t min_count);

void write_cohort(std::ostream& out, std::span<const PatientRecord> records);
void write_cohort(const std::filesystem::path& path, std::span<const PatientRecord> records);

FrequencyTable event_type_frequencies(std::span<const PatientRecord> records);

}  // namespace nep
