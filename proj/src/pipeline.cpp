#include "nep/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "nep/error.hpp"
#include "nep/evaluator.hpp"
#include "nep/hash.hpp"
#include "nep/rng.hpp"
#include "nep/sampler.hpp"

namespace nep {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

// Strict reader over one config object: remembers which keys were consumed so
// leftovers can be reported with their full path.
class Fields {
public:
    Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + " must be an object");
    }

    template <class T>
    void read(const std::string& key, T& dst) {
        seen_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end()) return;
        const std::string p = join(key);
        if constexpr (std::is_same_v<T, bool>) {
            if (!it->is_boolean()) bad(p, "a boolean");
            dst = it->template get<bool>();
        } else if constexpr (std::is_integral_v<T>) {
            if (!it->is_number_integer()) bad(p, "an integer");
            if (std::is_unsigned_v<T> && !it->is_number_unsigned()) bad(p, "a non-negative integer");
            dst = it->template get<T>();
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!it->is_number()) bad(p, "a number");
            dst = it->template get<T>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!it->is_string()) bad(p, "a string");
            dst = it->template get<std::string>();
        } else {
            try {
                dst = it->template get<T>();
            } catch (const json::exception&) {
                bad(p, "a list of the right element type");
            }
        }
    }

    const json* child(const std::string& key) {
        seen_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw ConfigError("unknown config key '" + join(k) + "'");
    }

private:
    [[noreturn]] static void bad(const std::string& path, const char* expected) {
        throw ConfigError("config field '" + path + "' must be " + expected);
    }
    std::string where() const { return path_.empty() ? "config" : "config section '" + path_ + "'"; }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

template <class V>
void read_type_map(Fields& parent, const std::string& key, std::map<EventType, V>& dst) {
    const json* j = parent.child(key);
    if (!j) return;
    Fields f(*j, parent.join(key));
    std::map<EventType, V> out;
    for (const auto& [name, value] : j->items()) {
        EventType type;
        try {
            type = parse_event_type(name);
        } catch (const std::exception&) {
            throw ConfigError("unknown event type '" + parent.join(key) + "." + name + "'");
        }
        V v{};
        f.read(name, v);
        out[type] = v;
    }
    f.finish();
    dst = std::move(out);
}

template <class F>
void section(Fields& top, const std::string& name, F&& body) {
    if (const json* j = top.child(name)) {
        Fields f(*j, name);
        body(f);
        f.finish();
    }
}

// Module validators throw their own error kinds; at config time they are all config errors.
template <class F>
void check(const std::string& where, F&& f) {
    try {
        f();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& ex) {
        throw ConfigError(where + ": " + ex.what());
    }
}

ojson synth_json(const RunConfig& c) {
    const auto& s = c.synth.cohort;
    ojson j;
    j["n_patients"] = s.n_patients;
    j["downstream_patients"] = c.synth.downstream_patients;
    j["id_prefix"] = s.id_prefix;
    ojson vpt = ojson::object();
    for (const auto& [t, n] : s.values_per_type) vpt[std::string(to_string(t))] = n;
    j["values_per_type"] = vpt;
    j["n_risk_groups"] = s.n_risk_groups;
    j["group_probs"] = s.group_probs;
    j["shared_weights"] = s.shared_weights;
    j["group_weight"] = s.group_weight;
    j["smoothing"] = s.smoothing;
    j["hazards"] = s.hazards;
    ojson gaps = ojson::object();
    for (const auto& [t, g] : s.mean_gap_days) gaps[std::string(to_string(t))] = g;
    j["mean_gap_days"] = gaps;
    j["min_length"] = s.min_length;
    j["max_length"] = s.max_length;
    j["censor_horizon_days"] = s.censor_horizon_days;
    return j;
}

ojson stage_json(const RunConfig& c, int upto) {
    ojson j;
    j["seed"] = c.seed;
    j["synth"] = synth_json(c);
    if (upto >= 1) {
        j["sampling"] = {{"alpha", c.sampling.alpha},
                         {"n_instances", c.sampling.n_instances},
                         {"held_out_fraction", c.sampling.held_out_fraction},
                         {"min_count", c.sampling.min_count}};
        j["serializer"] = to_json(c.serializer);
    }
    if (upto >= 2) {
        j["model"] = {{"d_model", c.model.d_model},
                      {"n_layers", c.model.n_layers},
                      {"n_heads", c.model.n_heads},
                      {"init_std", c.model.init_std}};
        json t = lm::to_json(c.train);
        t.erase("seed");
        t["mode"] = std::string(lm::to_string(c.mode));
        j["train"] = t;
    }
    if (upto >= 3) {
        j["embed"] = {{"pooling", std::string(to_string(c.embed.pooling))},
                      {"w_embed", c.embed.w_embed},
                      {"threads", c.embed.threads},
                      {"format", c.embed.format}};
        j["eval"] = {{"tasks", c.eval.tasks},
                     {"k", c.eval.k},
                     {"n_bootstrap", c.eval.n_bootstrap},
                     {"l2", c.eval.l2},
                     {"horizon_days", c.eval.horizon_days},
                     {"sweep_sizes", c.eval.sweep_sizes},
                     {"sweep_task", c.eval.sweep_task},
                     {"threads", c.eval.threads}};
    }
    return j;
}

// Hash of everything a stage's outputs depend on: 0 synth, 1 prep, 2 train, 3 embed/eval.
std::string stage_hash(const RunConfig& c, int stage) { return hex64(fnv1a(stage_json(c, stage).dump())); }

void write_json(const fs::path& path, const ojson& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& ex) {
        throw ValidationError(path.string() + ": " + ex.what());
    }
}

// Upstream manifest of `command`, checked against the current config.
json require_stage(const RunConfig& c, const std::string& command, int stage) {
    const fs::path path = c.out / (command + ".json");
    if (!fs::exists(path))
        throw ProvenanceError("missing " + path.string() + "; run 'nep " + command + "' first");
    json m = read_json(path);
    const std::string want = stage_hash(c, stage);
    if (m.value("stage_hash", "") != want)
        throw ProvenanceError(path.string() + " was produced with a different configuration (stage hash " +
                              m.value("stage_hash", "?") + ", current " + want + "); rerun 'nep " + command + "'");
    return m;
}

ojson manifest(const RunConfig& c, const std::string& command, int stage) {
    ojson m;
    m["command"] = command;
    m["config_hash"] = config_hash(c);
    m["stage_hash"] = stage_hash(c, stage);
    m["seed"] = c.seed;
    return m;
}

std::vector<PatientRecord> read_records(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open cohort file " + path.string());
    return parse_cohort(in);
}

EventVocabulary read_vocab(const RunConfig& c) { return EventVocabulary::from_json(read_json(c.out / artifacts::kVocab)); }

std::string serializer_hash(const RunConfig& c) { return hex64(serializer_config_hash(c.serializer)); }

EmbedConfig embed_config(const RunConfig& c) {
    EmbedConfig e;
    e.pooling = c.embed.pooling;
    // Default: the window the model was trained on.
    e.w_embed = c.embed.w_embed > 0 ? c.embed.w_embed : c.serializer.w;
    e.threads = c.embed.threads;
    return e;
}

EmbeddingMatrix embed_with(const RunConfig& c, const fs::path& checkpoint, std::span<const PatientRecord> records,
                           const EventVocabulary& vocab) {
    if (!fs::exists(checkpoint)) throw ProvenanceError("missing checkpoint " + checkpoint.string() + "; run 'nep train' first");
    json prov;
    const auto model = lm::load_checkpoint(checkpoint, &prov);
    if (prov.value("serializer_hash", "") != serializer_hash(c))
        throw ProvenanceError("checkpoint " + checkpoint.string() + " was trained with serializer hash " +
                              prov.value("serializer_hash", "?") + ", config has " + serializer_hash(c));
    if (model.config.vocab_size != vocab.size())
        throw ProvenanceError("checkpoint vocabulary size does not match " + std::string(artifacts::kVocab));
    EmbeddingProvenance p{hex64(lm::checkpoint_id(checkpoint)), std::string(to_string(c.embed.pooling)), serializer_hash(c)};
    return embed_cohort(model, vocab, records, embed_config(c), p);
}

Eigen::MatrixXd aligned_features(const EmbeddingMatrix& m, std::span<const PatientRecord> records) {
    Eigen::MatrixXd x(static_cast<Eigen::Index>(records.size()), m.values.cols());
    std::map<std::string, std::size_t> rows;
    for (std::size_t i = 0; i < m.patient_ids.size(); ++i) rows[m.patient_ids[i]] = i;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto it = rows.find(records[i].patient_id);
        if (it == rows.end()) throw ProvenanceError("embeddings lack patient '" + records[i].patient_id + "'");
        x.row(static_cast<Eigen::Index>(i)) = m.values.row(static_cast<Eigen::Index>(it->second)).cast<double>();
    }
    return x;
}

CvConfig cv_config(const RunConfig& c) {
    CvConfig cv;
    cv.k = c.eval.k;
    cv.seed = stage_seed(c.seed, kStageEval);
    cv.n_bootstrap = c.eval.n_bootstrap;
    cv.threads = c.eval.threads;
    cv.head.logistic.l2 = c.eval.l2;
    cv.head.horizon_days = c.eval.horizon_days;
    return cv;
}

std::string fmt(double v, int prec = 4) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(prec) << v;
    return s.str();
}

}  // namespace

RunConfig parse_run_config(const json& j) {
    RunConfig c;
    Fields top(j, "");
    top.read("seed", c.seed);
    std::string out = c.out.string();
    top.read("out", out);
    c.out = out;

    section(top, "synth", [&](Fields& f) {
        auto& s = c.synth.cohort;
        f.read("n_patients", s.n_patients);
        f.read("downstream_patients", c.synth.downstream_patients);
        f.read("id_prefix", s.id_prefix);
        read_type_map(f, "values_per_type", s.values_per_type);
        f.read("n_risk_groups", s.n_risk_groups);
        f.read("group_probs", s.group_probs);
        f.read("shared_weights", s.shared_weights);
        f.read("group_weight", s.group_weight);
        f.read("smoothing", s.smoothing);
        f.read("hazards", s.hazards);
        read_type_map(f, "mean_gap_days", s.mean_gap_days);
        f.read("min_length", s.min_length);
        f.read("max_length", s.max_length);
        f.read("censor_horizon_days", s.censor_horizon_days);
    });
    section(top, "sampling", [&](Fields& f) {
        f.read("alpha", c.sampling.alpha);
        f.read("n_instances", c.sampling.n_instances);
        f.read("held_out_fraction", c.sampling.held_out_fraction);
        f.read("min_count", c.sampling.min_count);
    });
    section(top, "serializer", [&](Fields& f) {
        f.read("w", c.serializer.w);
        f.read("max_tokens", c.serializer.max_tokens);
        f.read("stride", c.serializer.stride);
        f.read("include_short_history", c.serializer.include_short_history);
        f.read("predict_time", c.serializer.predict_time);
    });
    section(top, "model", [&](Fields& f) {
        f.read("d_model", c.model.d_model);
        f.read("n_layers", c.model.n_layers);
        f.read("n_heads", c.model.n_heads);
        f.read("init_std", c.model.init_std);
    });
    section(top, "train", [&](Fields& f) {
        auto& t = c.train;
        f.read("peak_lr", t.peak_lr);
        f.read("warmup_fraction", t.warmup_fraction);
        f.read("total_steps", t.total_steps);
        f.read("global_batch", t.global_batch);
        f.read("micro_batch", t.micro_batch);
        f.read("adapter_rank", t.adapter_rank);
        f.read("weight_decay", t.weight_decay);
        f.read("beta1", t.beta1);
        f.read("beta2", t.beta2);
        f.read("epsilon", t.epsilon);
        f.read("grad_clip", t.grad_clip);
        f.read("mlm_rate", t.mlm_rate);
        f.read("threads", t.threads);
        f.read("divergence_window", t.divergence_window);
        std::string mode(lm::to_string(c.mode));
        f.read("mode", mode);
        try {
            c.mode = lm::parse_mask_mode(mode);
        } catch (const std::exception&) {
            throw ConfigError("config field 'train.mode' must be 'causal' or 'bidirectional_mlm'");
        }
    });
    section(top, "embed", [&](Fields& f) {
        std::string pooling(to_string(c.embed.pooling));
        f.read("pooling", pooling);
        c.embed.pooling = parse_pooling(pooling);
        f.read("w_embed", c.embed.w_embed);
        f.read("threads", c.embed.threads);
        f.read("format", c.embed.format);
    });
    section(top, "eval", [&](Fields& f) {
        f.read("tasks", c.eval.tasks);
        f.read("k", c.eval.k);
        f.read("n_bootstrap", c.eval.n_bootstrap);
        f.read("l2", c.eval.l2);
        f.read("horizon_days", c.eval.horizon_days);
        f.read("sweep_sizes", c.eval.sweep_sizes);
        f.read("sweep_task", c.eval.sweep_task);
        f.read("threads", c.eval.threads);
    });
    top.finish();

    // Derived fields, then every module precondition.
    c.model.max_tokens = c.serializer.max_tokens;
    c.model.vocab_size = special::kCount + 1;  // placeholder until the vocabulary exists
    c.train.seed = stage_seed(c.seed, kStageTrain);
    if (c.sampling.n_instances == 0) c.sampling.n_instances = c.train.total_steps * c.train.global_batch;

    check("synth", [&] { validate_spec(nep_cohort_spec(c)); });
    if (c.synth.downstream_patients < 1) throw ConfigError("synth.downstream_patients must be >= 1");
    if (c.sampling.alpha < 0) throw ConfigError("sampling.alpha must be >= 0");
    if (c.sampling.n_instances < 1) throw ConfigError("sampling.n_instances must be >= 1");
    if (!(c.sampling.held_out_fraction >= 0 && c.sampling.held_out_fraction < 1))
        throw ConfigError("sampling.held_out_fraction must lie in [0, 1)");
    if (c.sampling.min_count < 1) throw ConfigError("sampling.min_count must be >= 1");
    check("serializer", [&] { validate_window(c.serializer); });
    check("model", [&] { lm::validate(c.model); });
    check("train", [&] { lm::validate(c.train); });
    if (c.embed.w_embed < 0) throw ConfigError("embed.w_embed must be >= 0");
    if (c.embed.threads < 1) throw ConfigError("embed.threads must be >= 1");
    if (c.embed.format != "csv" && c.embed.format != "binary") throw ConfigError("embed.format must be 'csv' or 'binary'");
    if (c.eval.k < 2) throw ConfigError("eval.k must be >= 2");
    if (c.eval.n_bootstrap < 0) throw ConfigError("eval.n_bootstrap must be >= 0");
    if (c.eval.l2 < 0) throw ConfigError("eval.l2 must be >= 0");
    if (!(c.eval.horizon_days > 0)) throw ConfigError("eval.horizon_days must be > 0");
    if (c.eval.threads < 1) throw ConfigError("eval.threads must be >= 1");
    for (const auto& t : c.eval.tasks)
        if (t != kHighRiskTask && t != kSurvivalTask) throw ConfigError("eval.tasks: unknown task '" + t + "'");
    if (c.eval.sweep_task != kHighRiskTask && c.eval.sweep_task != kSurvivalTask)
        throw ConfigError("eval.sweep_task: unknown task '" + c.eval.sweep_task + "'");
    for (auto s : c.eval.sweep_sizes)
        if (s < 1) throw ConfigError("eval.sweep_sizes must be positive");
    return c;
}

ojson to_json(const RunConfig& c) {
    ojson j = stage_json(c, 3);
    j["out"] = c.out.string();
    return j;
}

std::string config_hash(const RunConfig& c) { return stage_hash(c, 3); }

void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form path=value");
    const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::parse_error&) {
        value = text;
    }
    json* node = &doc;
    std::size_t start = 0;
    for (;;) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot - start);
        if (key.empty()) throw ConfigError("override path '" + path + "' has an empty component");
        if (!node->is_object()) throw ConfigError("override path '" + path + "' descends into a non-object");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        if (node->is_null()) *node = json::object();
        start = dot + 1;
    }
}

CohortSpec nep_cohort_spec(const RunConfig& c) {
    CohortSpec s = c.synth.cohort;
    s.structure_seed = stage_seed(c.seed, kStageStructure);
    s.seed = stage_seed(c.seed, kStageCohort);
    return s;
}

CohortSpec downstream_cohort_spec(const RunConfig& c) {
    CohortSpec s = nep_cohort_spec(c);
    s.n_patients = c.synth.downstream_patients;
    s.id_prefix = "D" + s.id_prefix;
    s.seed = stage_seed(c.seed, kStageDownstream);
    return s;
}

void cmd_synth(const RunConfig& c, std::ostream& log) {
    fs::create_directories(c.out);
    write_json(c.out / artifacts::kConfig, to_json(c));
    const auto nep = generate_cohort(nep_cohort_spec(c));
    const auto down = generate_cohort(downstream_cohort_spec(c));
    write_cohort(c.out / artifacts::kCohort, nep.records);
    write_oracle(c.out / artifacts::kOracle, nep.oracle);
    write_cohort(c.out / artifacts::kDownstream, down.records);
    write_oracle(c.out / artifacts::kDownstreamOracle, down.oracle);

    std::int64_t n_events = 0;
    for (const auto& r : nep.records) n_events += static_cast<std::int64_t>(r.events.size());
    double entropy = 0.0;
    try {
        entropy = oracle_conditional_entropy(nep.oracle);
    } catch (const NonErgodicChain&) {
        entropy = std::nan("");
    }
    auto m = manifest(c, "synth", 0);
    m["patients"] = nep.records.size();
    m["events"] = n_events;
    m["downstream_patients"] = down.records.size();
    m["oracle_entropy"] = entropy;
    write_json(c.out / "synth.json", m);
    log << "synth: " << nep.records.size() << " patients, " << n_events << " events, oracle entropy " << fmt(entropy)
        << " nats; downstream cohort " << down.records.size() << " patients\n";
}

void cmd_prep(const RunConfig& c, std::ostream& log) {
    require_stage(c, "synth", 0);
    auto cohort = load_cohort(c.out / artifacts::kCohort, c.sampling.min_count);
    const std::size_t n = cohort.records.size();

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng split_rng(stage_seed(c.seed, kStageSplit));
    split_rng.shuffle(order);
    const auto n_held = static_cast<std::size_t>(std::llround(c.sampling.held_out_fraction * static_cast<double>(n)));
    if (n_held >= n) throw ValidationError("held-out split leaves no training patients");
    std::vector<bool> held(n, false);
    for (std::size_t i = 0; i < n_held; ++i) held[order[i]] = true;
    std::vector<PatientRecord> train_records, held_records;
    for (std::size_t i = 0; i < n; ++i) (held[i] ? held_records : train_records).push_back(cohort.records[i]);

    const auto dist = type_distribution(event_type_frequencies(train_records), c.sampling.alpha);
    SamplingConfig sc{c.sampling.alpha, c.sampling.n_instances, stage_seed(c.seed, kStageSampling)};
    const auto selections = sample_training_positions(train_records, dist, sc);
    const auto instances = build_all_instances(train_records, cohort.vocab, c.serializer, selections);
    std::vector<TrainingInstance> held_out;
    for (const auto& r : held_records)
        for (auto t : exhaustive_targets(r.events.size(), c.serializer)) held_out.push_back(build_instance(r, t, cohort.vocab, c.serializer));

    write_json(c.out / artifacts::kVocab, cohort.vocab.to_json());
    write_selections(c.out / artifacts::kSelections, selections);
    write_instances(c.out / artifacts::kInstances, instances);
    write_instances(c.out / artifacts::kHeldOut, held_out);

    auto m = manifest(c, "prep", 1);
    m["serializer_hash"] = serializer_hash(c);
    m["vocab_size"] = cohort.vocab.size();
    m["train_patients"] = train_records.size();
    m["held_out_patients"] = held_records.size();
    m["instances"] = instances.size();
    m["held_out_instances"] = held_out.size();
    ojson law = ojson::object();
    for (std::size_t i = 0; i < dist.types.size(); ++i) law[std::string(to_string(dist.types[i]))] = dist.p[i];
    m["type_law"] = law;
    write_json(c.out / "prep.json", m);
    log << "prep: vocabulary " << cohort.vocab.size() << " tokens, " << instances.size() << " training instances from "
        << train_records.size() << " patients, " << held_out.size() << " held-out instances from " << held_records.size()
        << " patients\n";
}

void cmd_train(const RunConfig& c, std::ostream& log) {
    require_stage(c, "prep", 1);
    const auto vocab = read_vocab(c);
    const auto instances = read_instances(c.out / artifacts::kInstances);
    const auto held_out = read_instances(c.out / artifacts::kHeldOut);

    lm::ModelConfig mc = c.model;
    mc.vocab_size = vocab.size();
    mc.seed = stage_seed(c.seed, kStageInit);
    auto model = lm::Model<float>::init(mc);
    if (c.train.adapter_rank > 0) model.attach_adapters(c.train.adapter_rank, stage_seed(c.seed, kStageInit) + 1);
    json prov{{"config_hash", config_hash(c)},
              {"stage_hash", stage_hash(c, 2)},
              {"seed", c.seed},
              {"serializer_hash", serializer_hash(c)},
              {"vocab_hash", hex64(fnv1a(vocab.to_json().dump()))}};
    prov["state"] = "init";
    lm::save_checkpoint(c.out / artifacts::kInitCheckpoint, model, prov);

    const auto t0 = std::chrono::steady_clock::now();
    const std::int64_t every = std::max<std::int64_t>(1, c.train.total_steps / 10);
    const auto result = lm::train<float>(
        model, instances, c.train, c.mode,
        [&](std::int64_t step, const lm::Model<float>&) { log << "  step " << step << "/" << c.train.total_steps << "\n"; },
        every);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    prov["state"] = "trained";
    lm::save_checkpoint(c.out / artifacts::kCheckpoint, model, prov);
    lm::write_loss_curve(c.out / artifacts::kLossCurve, result.curve);

    auto m = manifest(c, "train", 2);
    m["mode"] = std::string(lm::to_string(c.mode));
    m["steps"] = c.train.total_steps;
    m["parameter_checksum"] = hex64(lm::parameter_checksum(model));
    m["checkpoint_id"] = hex64(lm::checkpoint_id(c.out / artifacts::kCheckpoint));
    m["init_checkpoint_id"] = hex64(lm::checkpoint_id(c.out / artifacts::kInitCheckpoint));
    double tail = 0.0;
    const std::size_t tail_n = std::min<std::size_t>(result.curve.size(), 100);
    for (std::size_t i = result.curve.size() - tail_n; i < result.curve.size(); ++i) tail += result.curve[i].loss;
    m["final_train_loss"] = tail / static_cast<double>(tail_n);
    log << "train: " << c.train.total_steps << " steps in " << fmt(secs, 1) << " s, mean loss over the last " << tail_n
        << " steps " << fmt(tail / static_cast<double>(tail_n)) << "\n";
    if (c.mode == lm::MaskMode::causal && !held_out.empty()) {
        const double ce = lm::evaluate_loss(model, held_out);
        m["held_out_ce"] = ce;
        log << "train: held-out response cross-entropy " << fmt(ce) << " nats";
        const fs::path oracle_path = c.out / artifacts::kOracle;
        if (fs::exists(oracle_path)) {
            try {
                const double h = oracle_conditional_entropy(read_oracle(oracle_path));
                m["oracle_entropy"] = h;
                m["gap_to_oracle"] = ce - h;
                log << " (oracle entropy " << fmt(h) << ", gap " << fmt(ce - h) << ")";
            } catch (const NonErgodicChain&) {
            }
        }
        log << "\n";
    }
    write_json(c.out / "train.json", m);
}

void cmd_embed(const RunConfig& c, std::ostream& log, fs::path checkpoint, fs::path output) {
    require_stage(c, "prep", 1);
    if (checkpoint.empty()) checkpoint = c.out / artifacts::kCheckpoint;
    if (output.empty()) output = c.out / (c.embed.format == "csv" ? "embeddings.csv" : "embeddings.bin");
    const auto vocab = read_vocab(c);
    const auto records = read_records(c.out / artifacts::kDownstream);
    const auto m = embed_with(c, checkpoint, records, vocab);
    if (c.embed.format == "csv") write_embeddings_csv(output, m);
    else write_embeddings_binary(output, m);

    auto man = manifest(c, "embed", 3);
    man["checkpoint"] = checkpoint.string();
    man["checkpoint_id"] = m.provenance.checkpoint_id;
    man["serializer_hash"] = m.provenance.serializer_hash;
    man["pooling"] = m.provenance.pooling;
    man["rows"] = m.values.rows();
    man["d_model"] = m.values.cols();
    write_json(fs::path(output.string() + ".json"), man);
    log << "embed: " << m.values.rows() << " x " << m.values.cols() << " embeddings from " << checkpoint.filename().string()
        << " -> " << output.string() << "\n";
}

void cmd_eval(const RunConfig& c, std::ostream& log, fs::path embeddings) {
    require_stage(c, "prep", 1);
    if (embeddings.empty()) embeddings = c.out / (c.embed.format == "csv" ? "embeddings.csv" : "embeddings.bin");
    if (!fs::exists(embeddings)) throw ProvenanceError("missing " + embeddings.string() + "; run 'nep embed' first");
    const auto emb = read_embeddings(embeddings);
    if (emb.provenance.serializer_hash != serializer_hash(c))
        throw ProvenanceError("embeddings " + embeddings.string() + " carry serializer hash " + emb.provenance.serializer_hash +
                              " but the eval config has " + serializer_hash(c));
    const auto vocab = read_vocab(c);
    const auto records = read_records(c.out / artifacts::kDownstream);
    const Eigen::MatrixXd x = aligned_features(emb, records);
    const Eigen::MatrixXd bag = bag_of_events_baseline(records, vocab);
    const auto cv = cv_config(c);

    auto m = manifest(c, "eval", 3);
    m["embeddings"] = embeddings.string();
    m["checkpoint_id"] = emb.provenance.checkpoint_id;
    m["serializer_hash"] = emb.provenance.serializer_hash;
    ojson reports = ojson::array();
    for (const auto& task : c.eval.tasks) {
        for (const auto& [name, feats] : {std::pair<std::string, const Eigen::MatrixXd*>{"embeddings", &x}, {"bag_of_events", &bag}}) {
            const auto rep = cross_validate(make_dataset(*feats, records, task), cv, name);
            auto r = rep.to_json();
            r["task"] = task;
            reports.push_back(r);
            log << "eval: " << task << " " << name << " " << rep.metric << " median " << fmt(rep.median) << " (pooled "
                << fmt(rep.point) << ", 95% CI " << fmt(rep.ci_lo) << "-" << fmt(rep.ci_hi) << ")"
                << (rep.stratification_fallback ? " [unstratified folds]" : "") << "\n";
        }
    }
    m["reports"] = reports;
    write_json(c.out / artifacts::kEval, m);
}

void cmd_sweep(const RunConfig& c, std::ostream& log) {
    require_stage(c, "train", 2);
    const auto vocab = read_vocab(c);
    const auto records = read_records(c.out / artifacts::kDownstream);
    const auto nep = embed_with(c, c.out / artifacts::kCheckpoint, records, vocab);
    const auto init = embed_with(c, c.out / artifacts::kInitCheckpoint, records, vocab);
    const std::string& task = c.eval.sweep_task;
    std::vector<FeatureSource> sources{{"nep", make_dataset(aligned_features(nep, records), records, task)},
                                       {"untrained", make_dataset(aligned_features(init, records), records, task)},
                                       {"bag_of_events", make_dataset(bag_of_events_baseline(records, vocab), records, task)}};
    const auto rows = label_efficiency_sweep(sources, c.eval.sweep_sizes, cv_config(c));
    write_sweep_csv(c.out / artifacts::kSweepCsv, rows);

    auto m = manifest(c, "sweep", 3);
    m["task"] = task;
    m["checkpoint_id"] = nep.provenance.checkpoint_id;
    m["init_checkpoint_id"] = init.provenance.checkpoint_id;
    ojson out_rows = ojson::array();
    for (const auto& r : rows) {
        auto j = r.report.to_json();
        j["size"] = r.size;
        out_rows.push_back(j);
    }
    m["rows"] = out_rows;
    ojson dom = ojson::array();
    bool all = true;
    for (auto s : c.eval.sweep_sizes) {
        double a = 0, b = 0;
        for (const auto& r : rows) {
            if (r.size != s) continue;
            if (r.feature_source == "nep") a = r.report.median;
            if (r.feature_source == "untrained") b = r.report.median;
        }
        dom.push_back({{"size", s}, {"nep", a}, {"untrained", b}, {"nep_dominates", a > b}});
        all = all && a > b;
        log << "sweep: size " << s << " nep " << fmt(a) << " vs untrained " << fmt(b) << (a > b ? "" : "  (not dominating)") << "\n";
    }
    m["dominance"] = dom;
    m["nep_dominates_everywhere"] = all;
    write_json(c.out / artifacts::kSweep, m);
    log << "sweep: wrote " << (c.out / artifacts::kSweepCsv).string() << "\n";
}

void cmd_report(const fs::path& dir, std::ostream& log) {
    if (!fs::exists(dir / artifacts::kConfig)) throw ProvenanceError("no run found in " + dir.string());
    const json config = read_json(dir / artifacts::kConfig);
    std::ostringstream md;
    md << "# Run report\n\n";
    md << "- run directory: `" << dir.string() << "`\n";
    md << "- seed: " << config.value("seed", 0ULL) << "\n\n";

    const auto load = [&](const char* name) -> std::optional<json> {
        const fs::path p = dir / name;
        if (!fs::exists(p)) return std::nullopt;
        return read_json(p);
    };
    const auto header = [&](const json& m, const char* title) {
        md << "## " << title << "\n\n";
        md << "- config hash: `" << m.value("config_hash", "") << "`, stage hash: `" << m.value("stage_hash", "") << "`\n";
    };
    if (auto m = load("synth.json")) {
        header(*m, "Cohort");
        md << "- patients: " << (*m)["patients"] << ", events: " << (*m)["events"] << ", downstream patients: "
           << (*m)["downstream_patients"] << "\n";
        md << "- oracle conditional entropy: " << fmt((*m)["oracle_entropy"].get<double>()) << " nats\n\n";
    }
    if (auto m = load("prep.json")) {
        header(*m, "Training data");
        md << "- serializer hash: `" << (*m)["serializer_hash"].get<std::string>() << "`\n";
        md << "- vocabulary: " << (*m)["vocab_size"] << " tokens; instances: " << (*m)["instances"]
           << "; held-out instances: " << (*m)["held_out_instances"] << "\n\n";
    }
    if (auto m = load("train.json")) {
        header(*m, "Training");
        md << "- mode: " << (*m)["mode"].get<std::string>() << ", steps: " << (*m)["steps"] << "\n";
        md << "- checkpoint: `" << (*m)["checkpoint_id"].get<std::string>() << "` (init `"
           << (*m)["init_checkpoint_id"].get<std::string>() << "`)\n";
        md << "- final training loss: " << fmt((*m)["final_train_loss"].get<double>()) << "\n";
        if (m->contains("held_out_ce")) md << "- held-out cross-entropy: " << fmt((*m)["held_out_ce"].get<double>()) << " nats\n";
        if (m->contains("gap_to_oracle")) md << "- gap to oracle entropy: " << fmt((*m)["gap_to_oracle"].get<double>()) << " nats\n";
        md << "\n";
    }
    if (auto m = load("eval.json")) {
        header(*m, "Downstream evaluation");
        md << "\n| task | features | metric | median | pooled | 95% CI | folds |\n|---|---|---|---|---|---|---|\n";
        for (const auto& r : (*m)["reports"]) {
            std::string folds;
            for (const auto& f : r["folds"]) folds += (folds.empty() ? "" : " ") + fmt(f.is_number() ? f.get<double>() : std::nan(""), 3);
            md << "| " << r["task"].get<std::string>() << " | " << r["feature_source"].get<std::string>() << " | "
               << r["metric"].get<std::string>() << " | " << fmt(r["median"].get<double>()) << " | "
               << fmt(r["point"].get<double>()) << " | " << fmt(r["ci_lo"].get<double>()) << "-"
               << fmt(r["ci_hi"].get<double>()) << " | " << folds << " |\n";
        }
        md << "\n";
    }
    if (auto m = load("sweep.json")) {
        header(*m, "Label efficiency");
        md << "- task: " << (*m)["task"].get<std::string>() << "\n\n| features | size | metric | median | 95% CI |\n|---|---|---|---|---|\n";
        for (const auto& r : (*m)["rows"])
            md << "| " << r["feature_source"].get<std::string>() << " | " << r["size"] << " | " << r["metric"].get<std::string>()
               << " | " << fmt(r["median"].get<double>()) << " | " << fmt(r["ci_lo"].get<double>()) << "-"
               << fmt(r["ci_hi"].get<double>()) << " |\n";
        md << "\n- NEP features dominate untrained features at every size: "
           << ((*m)["nep_dominates_everywhere"].get<bool>() ? "yes" : "no") << "\n";
    }
    std::ofstream out(dir / artifacts::kReport, std::ios::binary);
    if (!out) throw ValidationError("cannot write report");
    out << md.str();
    log << "report: wrote " << (dir / artifacts::kReport).string() << "\n";
}

}  // namespace nep
