#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include "doctest.h"
#include "nep/error.hpp"
#include "nep/pipeline.hpp"

using namespace nep;
namespace fs = std::filesystem;

namespace {

const std::string kTiny = std::string(NEP_FIXTURES) + "/tiny.json";

int nep_cli(const std::string& args) {
    const std::string cmd = std::string(NEP_CLI) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

fs::path fresh_dir(const std::string& name) {
    const auto d = fs::temp_directory_path() / name;
    fs::remove_all(d);
    return d;
}

}  // namespace

TEST_CASE("config parsing is strict and overrides apply") {
    CHECK_NOTHROW(parse_run_config(nlohmann::json::object()));
    try {
        parse_run_config(nlohmann::json{{"train", {{"peak_lrr", 1.0}}}});
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("train.peak_lrr") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_run_config(nlohmann::json{{"model", {{"d_model", "big"}}}}), ConfigError);
    CHECK_THROWS_AS(parse_run_config(nlohmann::json{{"train", {{"peak_lr", -1.0}}}}), ConfigError);

    nlohmann::json doc = nlohmann::json::object();
    apply_override(doc, "train.peak_lr=0.001");
    apply_override(doc, "embed.pooling=last");
    const auto c = parse_run_config(doc);
    CHECK(c.train.peak_lr == 0.001);
    CHECK(c.embed.pooling == Pooling::last);
    CHECK_THROWS_AS(apply_override(doc, "no_equals_sign"), ConfigError);

    // The output directory does not change the hash; anything else does.
    auto a = parse_run_config(nlohmann::json{{"out", "x"}});
    auto b = parse_run_config(nlohmann::json{{"out", "y"}});
    CHECK(config_hash(a) == config_hash(b));
    b.train.total_steps += 1;
    CHECK(config_hash(a) != config_hash(b));
    CHECK(parse_run_config(nlohmann::json(to_json(a))).train.total_steps == a.train.total_steps);
}

TEST_CASE("the command line runs the whole pipeline") {
    const auto dir = fresh_dir("nep_pipeline_a");
    const std::string base = "-c " + kTiny + " -o " + dir.string() + " ";
    REQUIRE(nep_cli(base + "synth") == 0);
    REQUIRE(nep_cli(base + "prep") == 0);
    REQUIRE(nep_cli(base + "train") == 0);
    REQUIRE(nep_cli(base + "embed") == 0);
    REQUIRE(nep_cli(base + "eval") == 0);
    REQUIRE(nep_cli(base + "sweep") == 0);
    REQUIRE(nep_cli(base + "report") == 0);
    for (const char* f : {artifacts::kConfig, artifacts::kCohort, artifacts::kOracle, artifacts::kDownstream,
                          artifacts::kVocab, artifacts::kSelections, artifacts::kInstances, artifacts::kHeldOut,
                          artifacts::kInitCheckpoint, artifacts::kCheckpoint, artifacts::kLossCurve, artifacts::kEval,
                          artifacts::kSweepCsv, artifacts::kSweep, artifacts::kReport, "embeddings.csv"})
        CHECK_MESSAGE(fs::exists(dir / f), f);

    const auto eval = nlohmann::json::parse(slurp(dir / artifacts::kEval));
    CHECK(eval.dump().find("bag_of_events") != std::string::npos);
    const auto csv = slurp(dir / artifacts::kSweepCsv);
    CHECK(csv.rfind("feature_source,size,metric,median,ci_lo,ci_hi\n", 0) == 0);

    {  // prep is byte-reproducible
        const auto other = fresh_dir("nep_pipeline_b");
        const std::string b = "-c " + kTiny + " -o " + other.string() + " ";
        REQUIRE(nep_cli(b + "synth") == 0);
        REQUIRE(nep_cli(b + "prep") == 0);
        for (const char* f : {artifacts::kCohort, artifacts::kSelections, artifacts::kInstances, artifacts::kHeldOut})
            CHECK(slurp(dir / f) == slurp(other / f));
        fs::remove_all(other);
    }
    {  // embeddings from another serializer are refused
        CHECK(nep_cli(base + "--set serializer.w=5 eval --embeddings " + (dir / "embeddings.csv").string()) == 3);
        CHECK(nep_cli(base + "--set serializer.w=5 embed") == 3);
    }
    {  // stages refuse inputs from a different configuration
        CHECK(nep_cli(base + "--set sampling.alpha=0.9 train") == 3);
    }
}

TEST_CASE("exit codes") {
    const auto dir = fresh_dir("nep_pipeline_c");
    const std::string base = "-c " + kTiny + " -o " + dir.string() + " ";
    CHECK(nep_cli(base + "--set train.bogus=1 synth") == 2);
    CHECK(nep_cli("--no-such-flag synth") == 2);
    CHECK(nep_cli("-c /nonexistent/config.json synth") == 2);
    CHECK(nep_cli(base + "prep") == 3);  // nothing synthesized yet
    REQUIRE(nep_cli(base + "synth") == 0);
    const std::string hot = base + "--set train.peak_lr=10000 --set train.grad_clip=0 --set train.weight_decay=0 "
                                   "--set train.divergence_window=3 --set train.total_steps=200 ";
    REQUIRE(nep_cli(hot + "prep") == 0);
    CHECK(nep_cli(hot + "train") == 4);
    fs::remove_all(dir);
}
