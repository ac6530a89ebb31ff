// nep: command-line driver for the next-event-prediction pipeline.

#include <cstdlib>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "nep/error.hpp"
#include "nep/pipeline.hpp"

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kValidation = 3, kDivergence = 4 };

struct GlobalOptions {
    std::string config;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::string out;
};

nep::RunConfig resolve(const GlobalOptions& g) {
    nlohmann::json doc = nlohmann::json::object();
    if (!g.config.empty()) {
        std::ifstream in(g.config);
        if (!in) throw nep::ConfigError("cannot open config file " + g.config);
        try {
            doc = nlohmann::json::parse(in);
        } catch (const nlohmann::json::parse_error& ex) {
            throw nep::ConfigError(g.config + ": " + ex.what());
        }
    }
    for (const auto& o : g.overrides) nep::apply_override(doc, o);
    if (g.seed) doc["seed"] = *g.seed;
    if (!g.out.empty()) doc["out"] = g.out;
    auto cfg = nep::parse_run_config(doc);
    // Relative output directories live under $NEP_OUT_ROOT when it is set.
    if (const char* root = std::getenv("NEP_OUT_ROOT"); root && *root && cfg.out.is_relative()) cfg.out = std::filesystem::path(root) / cfg.out;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Next-event-prediction pipeline: synthetic cohorts, training, embeddings, evaluation"};
    app.require_subcommand(1);
    GlobalOptions g;
    app.add_option("-c,--config", g.config, "JSON run configuration");
    app.add_option("--set", g.overrides, "Override a field, e.g. --set train.peak_lr=1e-3 (repeatable)");
    app.add_option("--seed", g.seed, "Global seed");
    app.add_option("-o,--out", g.out, "Run directory");

    auto* synth = app.add_subcommand("synth", "Generate the synthetic cohorts and their oracle files");
    auto* prep = app.add_subcommand("prep", "Sample targets and serialize training and held-out instances");
    auto* train = app.add_subcommand("train", "Train the model; writes init and trained checkpoints and the loss curve");
    auto* embed = app.add_subcommand("embed", "Embed the downstream cohort with a frozen checkpoint");
    std::string checkpoint, emb_out, embeddings, run_dir;
    embed->add_option("--checkpoint", checkpoint, "Checkpoint (default: <out>/checkpoint.bin)");
    embed->add_option("--output", emb_out, "Embedding file (default: <out>/embeddings.csv or .bin)");
    auto* eval = app.add_subcommand("eval", "Cross-validated downstream metrics for an embedding file");
    eval->add_option("--embeddings", embeddings, "Embedding file (default: <out>/embeddings.csv or .bin)");
    auto* sweep = app.add_subcommand("sweep", "Label-efficiency sweep: trained vs untrained vs bag-of-events");
    auto* report = app.add_subcommand("report", "Summarize a run directory into report.md");
    report->add_option("run_dir", run_dir, "Run directory (default: the configured output directory)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    try {
        const auto cfg = resolve(g);
        auto& log = std::cout;
        if (synth->parsed()) nep::cmd_synth(cfg, log);
        else if (prep->parsed()) nep::cmd_prep(cfg, log);
        else if (train->parsed()) nep::cmd_train(cfg, log);
        else if (embed->parsed()) nep::cmd_embed(cfg, log, checkpoint, emb_out);
        else if (eval->parsed()) nep::cmd_eval(cfg, log, embeddings);
        else if (sweep->parsed()) nep::cmd_sweep(cfg, log);
        else if (report->parsed()) nep::cmd_report(run_dir.empty() ? cfg.out : std::filesystem::path(run_dir), log);
        return kOk;
    } catch (const nep::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const nep::DivergenceError& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return kDivergence;
    } catch (const nep::ProvenanceError& e) {
        std::cerr << "provenance error: " << e.what() << "\n";
        return kValidation;
    } catch (const nep::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return kOther;
    }
}
