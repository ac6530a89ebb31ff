#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "doctest.h"
#include "nep/error.hpp"
#include "nep/event_model.hpp"
#include "nep/rng.hpp"

using namespace nep;

namespace {

PatientRecord make_record(std::string id, std::vector<std::pair<EventType, std::string>> evs) {
    PatientRecord r;
    r.patient_id = std::move(id);
    std::int64_t ts = 0;
    for (auto& [t, v] : evs) r.events.push_back({t, v, ts++});
    return r;
}

std::string line(const std::string& id, const std::string& events, const std::string& outcomes = "{}") {
    return R"({"patient_id":")" + id + R"(","events":)" + events + R"(,"outcomes":)" + outcomes + "}\n";
}

}  // namespace

TEST_CASE("rare codes become UNK before the vocabulary is built") {
    std::vector<PatientRecord> recs{
        make_record("p1", {{EventType::diagnosis, "A"}, {EventType::diagnosis, "A"}, {EventType::diagnosis, "B"}}),
        make_record("p2", {{EventType::diagnosis, "A"}})};
    const auto c = build_cohort(recs, 2);
    CHECK(c.vocab.n_events() == 1);
    CHECK(c.vocab.find(EventType::diagnosis, "A").has_value());
    CHECK_FALSE(c.vocab.find(EventType::diagnosis, "B").has_value());
    CHECK(c.records[0].events[2].value == kUnkValue);
    CHECK(c.vocab.encode(c.records[0].events[2]) == special::kUnk);
    // UNK keeps its type.
    CHECK(c.records[0].events[2].type == EventType::diagnosis);
}

TEST_CASE("out-of-order timestamps are rejected naming the patient") {
    std::istringstream in(line("late", R"([{"type":"lab","value":"x","ts":5},{"type":"lab","value":"y","ts":3}])"));
    try {
        parse_cohort(in);
        FAIL("expected a validation error");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("late") != std::string::npos);
    }
}

TEST_CASE("malformed lines report their line number") {
    std::istringstream in(line("a", "[]") + "{not json\n");
    try {
        parse_cohort(in);
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
    }
}

TEST_CASE("duplicate ids, unknown fields and empty cohorts are errors") {
    std::istringstream dup(line("a", "[]") + line("a", "[]"));
    CHECK_THROWS_AS(parse_cohort(dup), ValidationError);
    std::istringstream extra(R"({"patient_id":"a","events":[],"outcomes":{},"age":3})" "\n");
    CHECK_THROWS_AS(parse_cohort(extra), ParseError);
    CHECK_THROWS_AS(build_cohort({}, 1), ValidationError);
}

TEST_CASE("death must be the last event") {
    auto r = make_record("d", {{EventType::death, "death"}, {EventType::lab, "x"}});
    CHECK_THROWS_AS(validate_record(r), ValidationError);
    std::swap(r.events[0].type, r.events[1].type);
    std::swap(r.events[0].value, r.events[1].value);
    CHECK_NOTHROW(validate_record(r));
}

TEST_CASE("values that would break the line grammar are invalid") {
    CHECK(is_valid_value("E11.9"));
    CHECK(is_valid_value("metformin 500 mg"));
    CHECK(is_valid_value(kUnkValue));
    for (const char* bad : {"", "a:b", "[x]", "tab\there", " lead", "trail ", "a<b"}) CHECK_FALSE(is_valid_value(bad));
}

TEST_CASE("event type frequencies count every event") {
    std::vector<PatientRecord> recs{
        make_record("p1", {{EventType::lab, "a"}, {EventType::lab, "b"}, {EventType::diagnosis, "c"}}),
        make_record("p2", {{EventType::lab, "a"}})};
    const auto f = event_type_frequencies(recs);
    CHECK(f.k() == 2);
    CHECK(f.count(EventType::lab) == 3);
    CHECK(f.count(EventType::diagnosis) == 1);
    CHECK(f.total() == 4);

    const auto single = event_type_frequencies(std::vector{make_record("s", {{EventType::vital, "hr"}})});
    CHECK(single.k() == 1);
}

TEST_CASE("vocabulary is a bijection on random pairs") {
    Rng rng(11);
    std::vector<EventKey> keys;
    const EventType types[] = {EventType::diagnosis, EventType::medication, EventType::lab, EventType::vital,
                               EventType::procedure, EventType::death};
    for (int i = 0; i < 10000; ++i)
        keys.push_back({types[rng.below(6)], "v" + std::to_string(rng.below(5000))});
    const EventVocabulary vocab(keys);
    for (const auto& k : keys) {
        const TokenId id = vocab.encode(k.type, k.value);
        REQUIRE(vocab.is_event(id));
        CHECK(vocab.decode(id) == k);
    }
    for (TokenId id = special::kCount; id < vocab.size(); ++id) {
        const auto& k = vocab.decode(id);
        CHECK(vocab.encode(k.type, k.value) == id);
    }
    CHECK_THROWS_AS(vocab.decode(special::kBos), std::out_of_range);
    CHECK(vocab.encode(EventType::lab, "never-seen") == special::kUnk);
    CHECK(EventVocabulary::from_json(vocab.to_json()) == vocab);
}

TEST_CASE("write then load is a fixed point") {
    const auto dir = std::filesystem::temp_directory_path() / "nep_event_model_test";
    std::filesystem::create_directories(dir);
    std::vector<PatientRecord> recs{
        make_record("p1", {{EventType::lab, "glucose"}, {EventType::medication, "insulin"}}),
        make_record("p2", {{EventType::vital, "hr"}, {EventType::death, "death"}})};
    recs[0].outcomes["high_risk"] = BinaryOutcome{1};
    recs[1].outcomes["survival"] = SurvivalOutcome{12.0, 1};
    write_cohort(dir / "a.jsonl", recs);
    const auto first = load_cohort(dir / "a.jsonl", 1);
    write_cohort(dir / "b.jsonl", first.records);
    const auto second = load_cohort(dir / "b.jsonl", 1);
    write_cohort(dir / "c.jsonl", second.records);
    const auto slurp = [](const std::filesystem::path& p) {
        std::ifstream in(p);
        return std::string(std::istreambuf_iterator<char>(in), {});
    };
    CHECK(slurp(dir / "b.jsonl") == slurp(dir / "c.jsonl"));
    CHECK(first.records == recs);
    std::filesystem::remove_all(dir);
}
