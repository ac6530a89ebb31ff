#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "nep/error.hpp"
#include "nep/rng.hpp"
#include "nep/serializer.hpp"

using namespace nep;

namespace {

PatientRecord record(std::vector<std::tuple<EventType, std::string, std::int64_t>> evs) {
    PatientRecord r;
    r.patient_id = "p";
    for (auto& [t, v, ts] : evs) r.events.push_back({t, v, ts});
    return r;
}

PatientRecord linear(std::size_t n) {
    PatientRecord r;
    r.patient_id = "lin";
    for (std::size_t i = 0; i < n; ++i) r.events.push_back({EventType::lab, "v" + std::to_string(i % 7), static_cast<std::int64_t>(3 * i)});
    return r;
}

EventVocabulary vocab_of(const PatientRecord& r) {
    std::vector<EventKey> keys;
    for (const auto& e : r.events) keys.push_back({e.type, e.value});
    return EventVocabulary(keys);
}

}  // namespace

TEST_CASE("time bucket boundaries") {
    CHECK(time_bucket(0) == 0);
    CHECK(time_bucket(1) == 1);
    CHECK(time_bucket(2) == 2);
    CHECK(time_bucket(3) == 2);
    CHECK(time_bucket(4) == 3);
    CHECK(time_bucket(7) == 3);
    CHECK(time_bucket(8) == 4);
    CHECK(time_bucket(30) == 4);
    CHECK(time_bucket(31) == 5);
    CHECK(time_bucket(90) == 5);
    CHECK(time_bucket(91) == 6);
    CHECK(time_bucket(1'000'000) == 6);
    for (std::int64_t d = 1; d < 400; ++d) CHECK(time_bucket(d) >= time_bucket(d - 1));
    CHECK_THROWS_AS(time_bucket(-1), ValidationError);
}

TEST_CASE("exhaustive windows give n - w full-context targets") {
    WindowConfig c;
    c.w = 3;
    c.include_short_history = false;
    const auto five = exhaustive_targets(5, c);
    CHECK(five == std::vector<std::size_t>{3, 4});
    for (std::size_t n = 0; n < 60; ++n)
        for (int w = 1; w < 10; ++w) {
            c.w = w;
            c.include_short_history = false;
            CHECK(exhaustive_targets(n, c).size() == (n > static_cast<std::size_t>(w) ? n - w : 0));
            c.include_short_history = true;
            CHECK(exhaustive_targets(n, c).size() == (n > 0 ? n - 1 : 0));
        }
}

TEST_CASE("target index 1 sees exactly the first event") {
    const auto r = linear(10);
    const auto v = vocab_of(r);
    WindowConfig c;
    c.w = 4;
    const auto inst = build_instance(r, 1, v, c);
    CHECK(inst.context_tokens == std::vector<TokenId>{special::kBos, special::kHeader,
                                                      EventVocabulary::bucket_token(time_bucket(3)),
                                                      v.encode(r.events[0]), special::kFooter});
    CHECK(inst.response_tokens == std::vector<TokenId>{v.encode(r.events[1])});
    CHECK_THROWS_AS(build_instance(r, 0, v, c), ValidationError);
    CHECK_THROWS_AS(build_instance(r, 10, v, c), ValidationError);
}

TEST_CASE("rendered instance matches the golden file") {
    const auto r = record({{EventType::diagnosis, "E11.9", 0},
                           {EventType::medication, "metformin 500 mg", 1},
                           {EventType::lab, "glucose", 5}});
    const auto v = vocab_of(r);
    WindowConfig c;
    c.w = 2;
    const auto inst = build_instance(r, 2, v, c);
    std::ifstream in(std::string(NEP_FIXTURES) + "/template_golden.txt", std::ios::binary);
    REQUIRE(in);
    const std::string golden(std::istreambuf_iterator<char>(in), {});
    CHECK(render_prompt(inst, v) + render_response(inst, v) == golden);
}

TEST_CASE("a w-event context has 2w + 3 ids and the loss mask covers the response") {
    const auto r = linear(40);
    const auto v = vocab_of(r);
    WindowConfig c;
    c.w = 8;
    for (std::size_t t = 8; t < 40; ++t) {
        const auto inst = build_instance(r, t, v, c);
        CHECK(inst.context_tokens.size() == static_cast<std::size_t>(2 * c.w + kStructuralTokens));
        CHECK(inst.loss_mask.size() == inst.size());
        for (std::size_t i = 0; i < inst.size(); ++i) CHECK(inst.loss_mask[i] == (i >= inst.context_tokens.size() ? 1 : 0));
    }
}

TEST_CASE("truncation drops the oldest events and keeps the response") {
    const auto r = linear(30);
    const auto v = vocab_of(r);
    WindowConfig c;
    c.w = 20;
    c.max_tokens = 40;
    const auto inst = build_instance(r, 25, v, c);
    CHECK(static_cast<int>(inst.size()) <= c.max_tokens);
    CHECK(inst.response_tokens == std::vector<TokenId>{v.encode(r.events[25])});
    // The newest context event is still the one right before the target.
    CHECK(inst.context_tokens[inst.context_tokens.size() - 2] == v.encode(r.events[24]));
    const auto kept = (inst.context_tokens.size() - kStructuralTokens) / 2;
    CHECK(kept == 18);
    CHECK(inst.context_tokens[3] == v.encode(r.events[25 - kept]));
}

TEST_CASE("time prediction moves the last gap into the response") {
    const auto r = linear(6);
    const auto v = vocab_of(r);
    WindowConfig c;
    c.w = 3;
    c.predict_time = true;
    const auto inst = build_instance(r, 4, v, c);
    CHECK(inst.response_tokens == std::vector<TokenId>{EventVocabulary::bucket_token(time_bucket(3)), v.encode(r.events[4])});
    CHECK(inst.context_tokens[inst.context_tokens.size() - 3] == special::kMask);
    CHECK(serializer_config_hash(c) != serializer_config_hash(WindowConfig{}));
}

TEST_CASE("tokenize and detokenize are inverse over 10^4 events") {
    Rng rng(4);
    std::vector<EventKey> keys;
    for (int i = 0; i < 300; ++i)
        keys.push_back({kAllEventTypes[rng.below(kAllEventTypes.size())], "code " + std::to_string(i) + (i % 3 ? ".1" : "")});
    const EventVocabulary v(keys);
    std::string text(kHeaderText);
    std::vector<TokenId> ids{special::kHeader};
    for (int i = 0; i < 10'000; ++i) {
        const auto& k = keys[rng.below(keys.size())];
        const int bucket = static_cast<int>(rng.below(special::kNumBuckets));
        text += "[" + std::string(bucket_glyph(bucket)) + "] " + std::string(type_label(k.type)) + ": " + k.value + "\n";
        ids.push_back(EventVocabulary::bucket_token(bucket));
        ids.push_back(v.encode(k.type, k.value));
    }
    text += kFooterText;
    ids.push_back(special::kFooter);
    CHECK(tokenize(text, v) == ids);
    CHECK(detokenize(tokenize(text, v), v) == text);
    CHECK(tokenize(detokenize(ids, v), v) == ids);
}

TEST_CASE("unknown codes map to UNK and render as its glyph") {
    const EventVocabulary v({{EventType::lab, "known"}});
    const ClinicalEvent unseen{EventType::lab, "mystery", 0};
    CHECK(tokenize(unseen, v) == std::vector<TokenId>{special::kUnk});
    CHECK(tokenize("LAB: mystery\n", v) == std::vector<TokenId>{special::kUnk});
    CHECK(detokenize(std::vector<TokenId>{special::kUnk}, v) == "<unk>\n");
    CHECK_THROWS_AS(tokenize("[5d] LAB: known\n", v), ValidationError);
    CHECK_THROWS_AS(tokenize("SURGERY: x\n", v), ValidationError);
    CHECK_THROWS_AS(detokenize(std::vector<TokenId>{999}, v), ValidationError);
}

TEST_CASE("embedding prompt ends on the last event with a same-day gap") {
    const auto r = linear(12);
    const auto v = vocab_of(r);
    const auto ids = build_embedding_prompt(r, v, 5, 512);
    CHECK(ids.size() == 2 * 5 + kStructuralTokens);
    CHECK(ids[ids.size() - 3] == EventVocabulary::bucket_token(0));
    CHECK(ids[ids.size() - 2] == v.encode(r.events[11]));
    CHECK(ids[3] == v.encode(r.events[7]));
    PatientRecord empty;
    empty.patient_id = "e";
    CHECK_THROWS_AS(build_embedding_prompt(empty, v, 5, 512), ValidationError);
}

TEST_CASE("instances survive a file round trip") {
    const auto r = linear(15);
    const auto v = vocab_of(r);
    WindowConfig c;
    c.w = 4;
    std::vector<TrainingInstance> all;
    for (auto t : exhaustive_targets(r.events.size(), c)) all.push_back(build_instance(r, t, v, c));
    const auto path = std::filesystem::temp_directory_path() / "nep_instances_test.jsonl";
    write_instances(path, all);
    CHECK(read_instances(path) == all);
    std::filesystem::remove(path);

    WindowConfig bad;
    bad.w = 0;
    CHECK_THROWS_AS(validate_window(bad), ConfigError);
}
