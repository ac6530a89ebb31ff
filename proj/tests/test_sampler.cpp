#include <cmath>
#include <filesystem>
#include <map>

#include "doctest.h"
#include "nep/error.hpp"
#include "nep/sampler.hpp"

using namespace nep;

namespace {

FrequencyTable table(std::vector<std::pair<EventType, std::int64_t>> rows) {
    FrequencyTable t;
    for (auto [type, n] : rows) {
        t.types.push_back(type);
        t.counts.push_back(n);
    }
    return t;
}

PatientRecord record(std::string id, std::vector<EventType> types) {
    PatientRecord r;
    r.patient_id = std::move(id);
    std::int64_t ts = 0;
    for (auto t : types) r.events.push_back({t, "x", ts++});
    return r;
}

}  // namespace

TEST_CASE("square-root flattening of two types") {
    const auto d = type_distribution(table({{EventType::diagnosis, 100}, {EventType::lab, 1}}), 0.5);
    CHECK(d.p[0] == doctest::Approx(10.0 / 11.0).epsilon(1e-14));
    CHECK(d.p[1] == doctest::Approx(1.0 / 11.0).epsilon(1e-14));
}

TEST_CASE("alpha 0 is uniform and alpha 1 is the raw law, exactly") {
    const auto t = table({{EventType::diagnosis, 7}, {EventType::medication, 300}, {EventType::lab, 41}, {EventType::vital, 2}});
    const auto uni = type_distribution(t, 0.0);
    const auto raw = type_distribution(t, 1.0);
    const double total = 7 + 300 + 41 + 2;
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(std::abs(uni.p[i] - 0.25) <= 1e-12);
        CHECK(std::abs(raw.p[i] - static_cast<double>(t.counts[i]) / total) <= 1e-12);
    }
    CHECK_THROWS_AS(type_distribution(t, -1.0), ValidationError);
    CHECK_THROWS_AS(type_distribution(FrequencyTable{}, 0.5), ValidationError);
}

TEST_CASE("single type gets all the mass") {
    const auto d = type_distribution(table({{EventType::vital, 9}}), 0.5);
    REQUIRE(d.p.size() == 1);
    CHECK(d.p[0] == 1.0);
}

TEST_CASE("draws follow the flattened type law") {
    std::vector<PatientRecord> recs;
    for (int p = 0; p < 20; ++p) {
        std::vector<EventType> types;
        for (int i = 0; i < 40; ++i) types.push_back(EventType::diagnosis);
        for (int i = 0; i < 9; ++i) types.push_back(EventType::lab);
        types.push_back(EventType::vital);
        recs.push_back(record("p" + std::to_string(p), types));
    }
    const auto freqs = event_type_frequencies(recs);
    const auto dist = type_distribution(freqs, 0.5);
    SamplingConfig cfg;
    cfg.n_instances = 100'000;
    cfg.seed = 3;
    const auto sel = sample_training_positions(recs, dist, cfg);
    REQUIRE(sel.size() == 100'000);
    std::map<EventType, double> seen;
    for (const auto& s : sel) {
        CHECK(s.target_index >= 1);
        CHECK(recs[s.patient_index].events[s.target_index].type == s.event_type);
        seen[s.event_type] += 1.0;
    }
    // Every type has eligible targets, so the law is unchanged.
    double l1 = 0.0;
    for (std::size_t i = 0; i < dist.types.size(); ++i) l1 += std::abs(seen[dist.types[i]] / 1e5 - dist.p[i]);
    CHECK(l1 < 0.01);
}

TEST_CASE("the first event of a record is never a target") {
    std::vector<PatientRecord> recs{record("a", {EventType::lab, EventType::diagnosis}),
                                    record("b", {EventType::lab, EventType::diagnosis, EventType::diagnosis})};
    const auto dist = type_distribution(event_type_frequencies(recs), 1.0);
    SamplingConfig cfg;
    cfg.n_instances = 2000;
    for (const auto& s : sample_training_positions(recs, dist, cfg)) {
        CHECK(s.target_index > 0);
        CHECK(s.event_type == EventType::diagnosis);
    }
}

TEST_CASE("a single candidate is always chosen") {
    std::vector<PatientRecord> recs{record("only", {EventType::vital, EventType::vital})};
    const auto dist = type_distribution(event_type_frequencies(recs), 0.5);
    SamplingConfig cfg;
    cfg.n_instances = 50;
    for (const auto& s : sample_training_positions(recs, dist, cfg)) {
        CHECK(s.patient_id == "only");
        CHECK(s.target_index == 1);
    }
}

TEST_CASE("types without eligible targets are dropped and the rest renormalized") {
    // Labs only ever open a record, so none can be a target.
    std::vector<PatientRecord> recs{record("a", {EventType::lab, EventType::diagnosis}),
                                    record("b", {EventType::lab, EventType::medication})};
    const auto dist = type_distribution(event_type_frequencies(recs), 0.0);
    SamplingConfig cfg;
    cfg.n_instances = 20'000;
    std::map<EventType, double> seen;
    for (const auto& s : sample_training_positions(recs, dist, cfg)) seen[s.event_type] += 1.0;
    CHECK(seen.count(EventType::lab) == 0);
    CHECK(seen[EventType::diagnosis] / 2e4 == doctest::Approx(0.5).epsilon(0.05));

    std::vector<PatientRecord> none{record("c", {EventType::lab})};
    CHECK_THROWS_AS(sample_training_positions(none, type_distribution(event_type_frequencies(none), 0.5), cfg),
                    ValidationError);
    cfg.n_instances = 0;
    CHECK_THROWS_AS(sample_training_positions(recs, dist, cfg), ValidationError);
}

TEST_CASE("selections are deterministic and survive a round trip") {
    std::vector<PatientRecord> recs;
    for (int p = 0; p < 5; ++p)
        recs.push_back(record("p" + std::to_string(p), {EventType::lab, EventType::diagnosis, EventType::vital,
                                                         EventType::lab, EventType::medication}));
    const auto dist = type_distribution(event_type_frequencies(recs), 0.5);
    SamplingConfig cfg;
    cfg.n_instances = 300;
    cfg.seed = 17;
    const auto a = sample_training_positions(recs, dist, cfg);
    CHECK(a == sample_training_positions(recs, dist, cfg));
    cfg.seed = 18;
    CHECK(a != sample_training_positions(recs, dist, cfg));

    const auto path = std::filesystem::temp_directory_path() / "nep_selections_test.jsonl";
    write_selections(path, a);
    CHECK(read_selections(path, recs) == a);
    std::filesystem::remove(path);
}
