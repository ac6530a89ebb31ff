#include "nep/event_model.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <stdexcept>

#include "nep/error.hpp"

namespace nep {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, 6> kTypeNames = {"diagnosis", "medication", "lab",
                                                         "vital",     "procedure",  "death"};
constexpr std::array<std::string_view, 6> kTypeLabels = {"DIAGNOSIS", "MEDICATION", "LAB",
                                                         "VITAL",     "PROCEDURE",  "DEATH"};

void require_keys(const json& obj, std::initializer_list<std::string_view> allowed,
                  std::string_view what, std::size_t line_no) {
    if (!obj.is_object()) throw ParseError(std::string(what) + " must be an object", line_no);
    for (const auto& [key, _] : obj.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw ParseError("unknown field '" + key + "' in " + std::string(what), line_no);
    }
}

}  // namespace

std::string_view to_string(EventType type) { return kTypeNames[static_cast<std::size_t>(type)]; }

std::string_view type_label(EventType type) { return kTypeLabels[static_cast<std::size_t>(type)]; }

EventType parse_event_type(std::string_view name) {
    for (std::size_t i = 0; i < kTypeNames.size(); ++i)
        if (kTypeNames[i] == name) return static_cast<EventType>(i);
    throw std::invalid_argument("unknown event type '" + std::string(name) + "'");
}

bool is_valid_value(std::string_view value) {
    if (value == kUnkValue) return true;
    if (value.empty()) return false;
    for (unsigned char c : value) {
        if (c < 0x20 || c == 0x7f) return false;
        if (c == '[' || c == ']' || c == ':' || c == '<' || c == '>') return false;
    }
    // Leading/trailing blanks would not survive the "TYPE: value" line grammar.
    return value.front() != ' ' && value.back() != ' ';
}

void validate_record(const PatientRecord& record) {
    const auto fail = [&](const std::string& msg) {
        throw ValidationError("patient '" + record.patient_id + "': " + msg);
    };
    if (record.patient_id.empty()) throw ValidationError("record with empty patient_id");
    std::int64_t prev = 0;
    for (std::size_t i = 0; i < record.events.size(); ++i) {
        const auto& e = record.events[i];
        if (e.ts < 0) fail("event " + std::to_string(i) + " has negative timestamp");
        if (!is_valid_value(e.value))
            fail("event " + std::to_string(i) + " has invalid value '" + e.value + "'");
        if (i > 0 && e.ts < prev)
            fail("timestamps out of order at event " + std::to_string(i) + " (" +
                 std::to_string(prev) + " then " + std::to_string(e.ts) + ")");
        if (e.type == EventType::death && i + 1 != record.events.size())
            fail("death event is not the last event");
        prev = e.ts;
    }
    for (const auto& [task, outcome] : record.outcomes) {
        if (const auto* s = std::get_if<SurvivalOutcome>(&outcome)) {
            if (!(s->time > 0.0)) fail("survival time for task '" + task + "' must be > 0");
            if (s->event != 0 && s->event != 1) fail("survival event indicator must be 0 or 1");
        } else {
            const int label = std::get<BinaryOutcome>(outcome).label;
            if (label != 0 && label != 1) fail("binary label for task '" + task + "' must be 0 or 1");
        }
    }
}

EventVocabulary::EventVocabulary(std::vector<EventKey> keys) : keys_(std::move(keys)) {
    std::sort(keys_.begin(), keys_.end());
    keys_.erase(std::unique(keys_.begin(), keys_.end()), keys_.end());
    keys_.erase(std::remove_if(keys_.begin(), keys_.end(),
                               [](const EventKey& k) { return k.value == kUnkValue; }),
                keys_.end());
    for (std::size_t i = 0; i < keys_.size(); ++i)
        index_.emplace(keys_[i], special::kCount + static_cast<TokenId>(i));
}

std::optional<TokenId> EventVocabulary::find(EventType type, std::string_view value) const {
    const auto it = index_.find(EventKey{type, std::string(value)});
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

TokenId EventVocabulary::encode(EventType type, std::string_view value) const {
    return find(type, value).value_or(special::kUnk);
}

const EventKey& EventVocabulary::decode(TokenId id) const {
    if (!is_event(id)) throw std::out_of_range("token " + std::to_string(id) + " is not an event token");
    return keys_[static_cast<std::size_t>(id - special::kCount)];
}

json EventVocabulary::to_json() const {
    json events = json::array();
    for (const auto& k : keys_) events.push_back({std::string(to_string(k.type)), k.value});
    return json{{"n_special", special::kCount}, {"events", std::move(events)}};
}

EventVocabulary EventVocabulary::from_json(const json& j) {
    if (j.at("n_special").get<int>() != special::kCount)
        throw ValidationError("vocabulary was built with a different special-token layout");
    std::vector<EventKey> keys;
    for (const auto& e : j.at("events"))
        keys.push_back({parse_event_type(e.at(0).get<std::string>()), e.at(1).get<std::string>()});
    EventVocabulary vocab(keys);
    if (vocab.keys_.size() != keys.size()) throw ValidationError("vocabulary file has duplicate events");
    return vocab;
}

std::int64_t FrequencyTable::total() const {
    std::int64_t t = 0;
    for (auto c : counts) t += c;
    return t;
}

std::int64_t FrequencyTable::count(EventType type) const {
    for (std::size_t i = 0; i < types.size(); ++i)
        if (types[i] == type) return counts[i];
    return 0;
}

PatientRecord parse_record(const json& j, std::size_t line_no) {
    require_keys(j, {"patient_id", "events", "outcomes"}, "record", line_no);
    PatientRecord rec;
    try {
        rec.patient_id = j.at("patient_id").get<std::string>();
        for (const auto& e : j.at("events")) {
            require_keys(e, {"type", "value", "ts"}, "event", line_no);
            ClinicalEvent ev;
            ev.type = parse_event_type(e.at("type").get<std::string>());
            ev.value = e.at("value").get<std::string>();
            ev.ts = e.at("ts").get<std::int64_t>();
            rec.events.push_back(std::move(ev));
        }
        if (j.contains("outcomes")) {
            for (const auto& [task, o] : j.at("outcomes").items()) {
                require_keys(o, {"label", "time", "event"}, "outcome", line_no);
                if (o.contains("label")) {
                    if (o.size() != 1) throw ParseError("outcome '" + task + "' mixes label and survival fields", line_no);
                    rec.outcomes.emplace(task, BinaryOutcome{o.at("label").get<int>()});
                } else {
                    rec.outcomes.emplace(task, SurvivalOutcome{o.at("time").get<double>(), o.at("event").get<int>()});
                }
            }
        }
    } catch (const json::exception& ex) {
        throw ParseError(ex.what(), line_no);
    } catch (const std::invalid_argument& ex) {
        throw ParseError(ex.what(), line_no);
    }
    validate_record(rec);
    return rec;
}

std::vector<PatientRecord> parse_cohort(std::istream& in) {
    std::vector<PatientRecord> records;
    std::set<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& ex) {
            throw ParseError(std::string("malformed line: ") + ex.what(), line_no);
        }
        auto rec = parse_record(j, line_no);
        if (!seen.insert(rec.patient_id).second)
            throw ValidationError("duplicate patient_id '" + rec.patient_id + "' at line " +
                                  std::to_string(line_no));
        records.push_back(std::move(rec));
    }
    return records;
}

nlohmann::ordered_json record_to_json(const PatientRecord& record) {
    nlohmann::ordered_json j;
    j["patient_id"] = record.patient_id;
    j["events"] = nlohmann::ordered_json::array();
    for (const auto& e : record.events) {
        nlohmann::ordered_json ej;
        ej["type"] = to_string(e.type);
        ej["value"] = e.value;
        ej["ts"] = e.ts;
        j["events"].push_back(std::move(ej));
    }
    nlohmann::ordered_json outcomes = nlohmann::ordered_json::object();
    for (const auto& [task, o] : record.outcomes) {
        nlohmann::ordered_json oj;
        if (const auto* s = std::get_if<SurvivalOutcome>(&o)) {
            oj["time"] = s->time;
            oj["event"] = s->event;
        } else {
            oj["label"] = std::get<BinaryOutcome>(o).label;
        }
        outcomes[task] = std::move(oj);
    }
    j["outcomes"] = std::move(outcomes);
    return j;
}

Cohort build_cohort(std::vector<PatientRecord> records, std::int64_t min_count) {
    if (records.empty()) throw ValidationError("empty cohort");
    std::map<EventKey, std::int64_t> counts;
    for (const auto& r : records)
        for (const auto& e : r.events) ++counts[EventKey{e.type, e.value}];

    std::vector<EventKey> survivors;
    for (const auto& [key, n] : counts)
        if (n >= min_count && key.value != kUnkValue) survivors.push_back(key);

    for (auto& r : records)
        for (auto& e : r.events)
            if (counts[EventKey{e.type, e.value}] < min_count) e.value = std::string(kUnkValue);

    return Cohort{std::move(records), EventVocabulary(std::move(survivors))};
}

Cohort load_cohort(const std::filesystem::path& path, std::int64_t min_count) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open cohort file " + path.string());
    return build_cohort(parse_cohort(in), min_count);
}

void write_cohort(std::ostream& out, std::span<const PatientRecord> records) {
    for (const auto& r : records) out << record_to_json(r).dump() << '\n';
}

void write_cohort(const std::filesystem::path& path, std::span<const PatientRecord> records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write cohort file " + path.string());
    write_cohort(out, records);
}

FrequencyTable event_type_frequencies(std::span<const PatientRecord> records) {
    if (records.empty()) throw ValidationError("empty cohort");
    std::array<std::int64_t, kAllEventTypes.size()> counts{};
    for (const auto& r : records)
        for (const auto& e : r.events) ++counts[static_cast<std::size_t>(e.type)];
    FrequencyTable table;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        if (counts[i] == 0) continue;
        table.types.push_back(static_cast<EventType>(i));
        table.counts.push_back(counts[i]);
    }
    if (table.types.empty()) throw ValidationError("cohort contains no events");
    return table;
}

}  // namespace nep
