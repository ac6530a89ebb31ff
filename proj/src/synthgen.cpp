#include "nep/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <thread>

#include "nep/rng.hpp"

namespace nep {

using nlohmann::json;

namespace {

std::string token_value(EventType type, int index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%02d", index);
    return std::string(to_string(type)) + "_" + buf;
}

bool sums_to_one(std::span<const double> p) {
    double s = 0.0;
    for (double x : p) {
        if (!(x >= 0.0) || !std::isfinite(x)) return false;
        s += x;
    }
    return std::abs(s - 1.0) <= 1e-12;
}

// Permutation with perm[j] distinct from every taken[.][j].
std::vector<int> sample_permutation(Rng& rng, int n, const std::vector<std::vector<int>>& taken) {
    std::vector<int> perm(static_cast<std::size_t>(n));
    for (int attempt = 0; attempt < 100000; ++attempt) {
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm);
        const bool clash = std::any_of(taken.begin(), taken.end(), [&](const std::vector<int>& t) {
            for (int j = 0; j < n; ++j)
                if (t[static_cast<std::size_t>(j)] == perm[static_cast<std::size_t>(j)]) return true;
            return false;
        });
        if (!clash || n < 2 * static_cast<int>(taken.size()) + 2) return perm;
    }
    return perm;
}

double row_entropy(const Eigen::MatrixXd& t, Eigen::Index row) {
    double h = 0.0;
    for (Eigen::Index j = 0; j < t.cols(); ++j) {
        const double p = t(row, j);
        if (p > 0.0) h -= p * std::log(p);
    }
    return h;
}

// Closed communicating classes of the support graph.
std::vector<std::vector<int>> closed_classes(const Eigen::MatrixXd& t) {
    const int n = static_cast<int>(t.rows());
    std::vector<std::vector<char>> reach(static_cast<std::size_t>(n), std::vector<char>(static_cast<std::size_t>(n), 0));
    for (int s = 0; s < n; ++s) {
        std::vector<int> stack = {s};
        reach[s][s] = 1;
        while (!stack.empty()) {
            const int u = stack.back();
            stack.pop_back();
            for (int v = 0; v < n; ++v)
                if (t(u, v) > 0.0 && !reach[s][v]) {
                    reach[s][v] = 1;
                    stack.push_back(v);
                }
        }
    }
    std::vector<std::vector<int>> classes;
    std::vector<char> assigned(static_cast<std::size_t>(n), 0);
    for (int s = 0; s < n; ++s) {
        if (assigned[s]) continue;
        std::vector<int> cls;
        for (int v = 0; v < n; ++v)
            if (reach[s][v] && reach[v][s]) cls.push_back(v);
        for (int v : cls) assigned[v] = 1;
        bool closed = true;
        for (int u : cls)
            for (int v = 0; v < n && closed; ++v)
                if (t(u, v) > 0.0 && !(reach[s][v] && reach[v][s])) closed = false;
        if (closed) classes.push_back(std::move(cls));
    }
    return classes;
}

double group_entropy(const Eigen::MatrixXd& t, const Eigen::VectorXd& mu) {
    double h = 0.0;
    for (Eigen::Index j = 0; j < t.rows(); ++j)
        if (mu(j) > 0.0) h += mu(j) * row_entropy(t, j);
    return h;
}

PatientRecord generate_patient(const CohortSpec& spec, const MarkovOracle& oracle, std::int64_t index,
                               int& group_out) {
    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(index)));
    const int group = static_cast<int>(rng.categorical(oracle.group_probs));
    const auto span = static_cast<std::uint64_t>(spec.max_length - spec.min_length + 1);
    const int length = spec.min_length + static_cast<int>(rng.below(span));

    char id[32];
    std::snprintf(id, sizeof id, "%06lld", static_cast<long long>(index));
    PatientRecord rec;
    rec.patient_id = spec.id_prefix + id;
    rec.events.reserve(static_cast<std::size_t>(length));

    const auto& t = oracle.transitions[static_cast<std::size_t>(group)];
    std::vector<double> row(oracle.n_tokens());
    std::int64_t ts = static_cast<std::int64_t>(rng.below(365));
    std::size_t state = rng.categorical(oracle.initial);
    for (int i = 0; i < length; ++i) {
        if (i > 0) {
            const auto& prev = oracle.tokens[state];
            const double mean_gap = oracle.mean_gap_days.at(prev.type);
            ts += rng.geometric(1.0 / (1.0 + mean_gap));
            for (std::size_t j = 0; j < row.size(); ++j) row[j] = t(static_cast<Eigen::Index>(state), static_cast<Eigen::Index>(j));
            state = rng.categorical(row);
        }
        const auto& key = oracle.tokens[state];
        rec.events.push_back(ClinicalEvent{key.type, key.value, ts});
    }

    const double survival = rng.exponential(oracle.hazards[static_cast<std::size_t>(group)]);
    SurvivalOutcome outcome;
    if (survival > spec.censor_horizon_days) {
        outcome = {spec.censor_horizon_days, 0};
    } else {
        outcome = {std::max(1.0, std::ceil(survival)), 1};
    }
    rec.outcomes.emplace(std::string(kHighRiskTask), BinaryOutcome{group > 0 ? 1 : 0});
    rec.outcomes.emplace(std::string(kSurvivalTask), outcome);
    group_out = group;
    return rec;
}

}  // namespace

NonErgodicChain::NonErgodicChain(int group, std::vector<double> component_entropies)
    : Error("transition matrix of group " + std::to_string(group) +
            " has more than one closed class; see component entropies"),
      group_(group),
      entropies_(std::move(component_entropies)) {}

int MarkovOracle::token_index(const ClinicalEvent& event) const {
    for (std::size_t j = 0; j < tokens.size(); ++j)
        if (tokens[j].type == event.type && tokens[j].value == event.value) return static_cast<int>(j);
    throw ValidationError("event '" + std::string(to_string(event.type)) + ":" + event.value +
                          "' is not a state of the oracle chain");
}

int MarkovOracle::group_of(const std::string& patient_id) const {
    const auto it = assignments.find(patient_id);
    if (it == assignments.end()) throw ValidationError("patient '" + patient_id + "' has no group assignment");
    return it->second;
}

void validate_spec(const CohortSpec& spec) {
    const auto fail = [](const std::string& msg) { throw ValidationError("cohort spec: " + msg); };
    if (spec.n_patients < 1) fail("n_patients must be >= 1");
    if (spec.n_risk_groups < 1) fail("n_risk_groups must be >= 1");
    if (spec.min_length < 1 || spec.min_length > spec.max_length) fail("need 1 <= min_length <= max_length");
    if (!(spec.censor_horizon_days > 0.0)) fail("censor_horizon_days must be > 0");
    if (static_cast<int>(spec.hazards.size()) != spec.n_risk_groups) fail("one hazard per risk group required");
    for (double h : spec.hazards)
        if (!(h > 0.0) || !std::isfinite(h)) fail("hazards must be positive");
    if (!spec.group_probs.empty()) {
        if (static_cast<int>(spec.group_probs.size()) != spec.n_risk_groups || !sums_to_one(spec.group_probs))
            fail("group_probs must be a distribution over the risk groups");
    }
    int n_tokens = 0;
    for (const auto& [type, n] : spec.values_per_type) {
        if (n < 0) fail("values_per_type must be non-negative");
        if (type == EventType::death && n > 0) fail("death is an outcome, not a chain state");
        if (n > 0 && !spec.mean_gap_days.contains(type)) fail("missing mean_gap_days for " + std::string(to_string(type)));
        n_tokens += n;
    }
    if (n_tokens < 1) fail("at least one event value is required");
    for (const auto& [type, g] : spec.mean_gap_days)
        if (!(g >= 0.0) || !std::isfinite(g)) fail("mean_gap_days must be >= 0");
    if (!spec.initial.empty() && (static_cast<int>(spec.initial.size()) != n_tokens || !sums_to_one(spec.initial)))
        fail("initial must be a distribution over the chain states");
    if (!spec.transitions.empty()) {
        if (static_cast<int>(spec.transitions.size()) != spec.n_risk_groups) fail("one transition matrix per group required");
        for (const auto& t : spec.transitions) {
            if (t.rows() != n_tokens || t.cols() != n_tokens) fail("transition matrix has the wrong shape");
            for (Eigen::Index i = 0; i < t.rows(); ++i) {
                double s = 0.0;
                for (Eigen::Index j = 0; j < t.cols(); ++j) {
                    if (!(t(i, j) >= 0.0)) fail("transition probabilities must be non-negative");
                    s += t(i, j);
                }
                if (std::abs(s - 1.0) > 1e-12) fail("transition rows must sum to 1");
            }
        }
    } else {
        double s = spec.group_weight;
        for (double w : spec.shared_weights) {
            if (!(w >= 0.0)) fail("shared_weights must be non-negative");
            s += w;
        }
        if (!(spec.group_weight >= 0.0) || std::abs(s - 1.0) > 1e-12)
            fail("shared_weights and group_weight must sum to 1");
        if (!(spec.smoothing >= 0.0 && spec.smoothing <= 1.0)) fail("smoothing must lie in [0, 1]");
    }
}

MarkovOracle build_oracle(const CohortSpec& spec) {
    validate_spec(spec);
    MarkovOracle oracle;
    for (const auto& [type, n] : spec.values_per_type)
        for (int i = 0; i < n; ++i) oracle.tokens.push_back({type, token_value(type, i)});
    const int k = static_cast<int>(oracle.tokens.size());

    oracle.initial = spec.initial.empty() ? std::vector<double>(static_cast<std::size_t>(k), 1.0 / k) : spec.initial;
    oracle.group_probs = spec.group_probs.empty()
                             ? std::vector<double>(static_cast<std::size_t>(spec.n_risk_groups), 1.0 / spec.n_risk_groups)
                             : spec.group_probs;
    oracle.hazards = spec.hazards;
    for (const auto& [type, n] : spec.values_per_type)
        if (n > 0) oracle.mean_gap_days[type] = spec.mean_gap_days.at(type);

    if (!spec.transitions.empty()) {
        oracle.transitions = spec.transitions;
        return oracle;
    }

    Rng rng(spec.structure_seed);
    std::vector<std::vector<int>> taken;
    for (std::size_t m = 0; m < spec.shared_weights.size(); ++m) taken.push_back(sample_permutation(rng, k, taken));
    const std::size_t n_shared = taken.size();
    for (int g = 0; g < spec.n_risk_groups; ++g) taken.push_back(sample_permutation(rng, k, taken));

    const double floor = spec.smoothing / k;
    for (int g = 0; g < spec.n_risk_groups; ++g) {
        Eigen::MatrixXd t = Eigen::MatrixXd::Constant(k, k, floor);
        const double keep = 1.0 - spec.smoothing;
        for (int j = 0; j < k; ++j) {
            for (std::size_t m = 0; m < n_shared; ++m) t(j, taken[m][j]) += keep * spec.shared_weights[m];
            t(j, taken[n_shared + g][j]) += keep * spec.group_weight;
        }
        // Renormalize rows so they sum to one to the last ulp.
        for (int j = 0; j < k; ++j) t.row(j) /= t.row(j).sum();
        oracle.transitions.push_back(std::move(t));
    }
    return oracle;
}

SyntheticCohort generate_cohort(const CohortSpec& spec, unsigned threads) {
    SyntheticCohort out;
    out.oracle = build_oracle(spec);
    const auto n = static_cast<std::size_t>(spec.n_patients);
    out.records.resize(n);
    std::vector<int> groups(n, 0);

    const auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i)
            out.records[i] = generate_patient(spec, out.oracle, static_cast<std::int64_t>(i), groups[i]);
    };
    threads = std::max(1u, threads);
    if (threads == 1) {
        work(0, n);
    } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (n + threads - 1) / threads;
        for (unsigned w = 0; w < threads; ++w) {
            const std::size_t b = std::min(n, w * chunk), e = std::min(n, b + chunk);
            pool.emplace_back(work, b, e);
        }
        for (auto& th : pool) th.join();
    }
    for (std::size_t i = 0; i < n; ++i) out.oracle.assignments[out.records[i].patient_id] = groups[i];
    return out;
}

std::vector<double> oracle_next_event_dist(const MarkovOracle& oracle, int group,
                                           std::span<const ClinicalEvent> history) {
    if (history.empty()) throw ValidationError("oracle_next_event_dist needs a non-empty history");
    if (group < 0 || group >= static_cast<int>(oracle.n_groups())) throw ValidationError("group out of range");
    const int last = oracle.token_index(history.back());
    const auto& t = oracle.transitions[static_cast<std::size_t>(group)];
    std::vector<double> p(oracle.n_tokens());
    for (std::size_t j = 0; j < p.size(); ++j) p[j] = t(last, static_cast<Eigen::Index>(j));
    return p;
}

std::vector<double> oracle_next_event_dist(const MarkovOracle& oracle, const std::string& patient_id,
                                           std::span<const ClinicalEvent> history) {
    return oracle_next_event_dist(oracle, oracle.group_of(patient_id), history);
}

std::vector<double> oracle_predictive_dist(const MarkovOracle& oracle, std::span<const ClinicalEvent> history) {
    if (history.empty()) throw ValidationError("oracle_predictive_dist needs a non-empty history");
    const std::size_t g_count = oracle.n_groups();
    std::vector<int> states;
    for (const auto& e : history) states.push_back(oracle.token_index(e));

    std::vector<double> log_post(g_count);
    for (std::size_t g = 0; g < g_count; ++g) {
        double lp = std::log(oracle.group_probs[g]) + std::log(oracle.initial[static_cast<std::size_t>(states[0])]);
        for (std::size_t i = 1; i < states.size(); ++i) lp += std::log(oracle.transitions[g](states[i - 1], states[i]));
        log_post[g] = lp;
    }
    const double mx = *std::max_element(log_post.begin(), log_post.end());
    double z = 0.0;
    for (auto& lp : log_post) z += (lp = std::exp(lp - mx));
    std::vector<double> p(oracle.n_tokens(), 0.0);
    for (std::size_t g = 0; g < g_count; ++g) {
        const double w = log_post[g] / z;
        for (std::size_t j = 0; j < p.size(); ++j) p[j] += w * oracle.transitions[g](states.back(), static_cast<Eigen::Index>(j));
    }
    return p;
}

Eigen::VectorXd stationary_distribution(const Eigen::MatrixXd& transition, double tol) {
    const Eigen::Index n = transition.rows();
    Eigen::RowVectorXd mu = Eigen::RowVectorXd::Constant(n, 1.0 / static_cast<double>(n));
    const Eigen::MatrixXd lazy = 0.5 * (Eigen::MatrixXd::Identity(n, n) + transition);
    for (int it = 0; it < 10'000'000; ++it) {
        Eigen::RowVectorXd next = mu * lazy;
        next /= next.sum();
        const double change = (next - mu).lpNorm<1>();
        mu = std::move(next);
        if (change < tol) break;
    }
    return mu.transpose();
}

double oracle_conditional_entropy(const MarkovOracle& oracle) {
    double h = 0.0;
    for (std::size_t g = 0; g < oracle.n_groups(); ++g) {
        const auto& t = oracle.transitions[g];
        const auto classes = closed_classes(t);
        if (classes.size() > 1) {
            std::vector<double> per_component;
            for (const auto& cls : classes) {
                const auto n = static_cast<Eigen::Index>(cls.size());
                Eigen::MatrixXd sub(n, n);
                for (Eigen::Index a = 0; a < n; ++a)
                    for (Eigen::Index b = 0; b < n; ++b) sub(a, b) = t(cls[a], cls[b]);
                const Eigen::VectorXd mu = stationary_distribution(sub);
                double hc = 0.0;
                for (Eigen::Index a = 0; a < n; ++a) hc += mu(a) * row_entropy(t, cls[a]);
                per_component.push_back(hc);
            }
            throw NonErgodicChain(static_cast<int>(g), std::move(per_component));
        }
        h += oracle.group_probs[g] * group_entropy(t, stationary_distribution(t));
    }
    return h;
}

json MarkovOracle::to_json() const {
    json j;
    j["tokens"] = json::array();
    for (const auto& t : tokens) j["tokens"].push_back({std::string(to_string(t.type)), t.value});
    j["initial"] = initial;
    j["transitions"] = json::array();
    for (const auto& t : transitions) {
        json rows = json::array();
        for (Eigen::Index r = 0; r < t.rows(); ++r) {
            std::vector<double> row(static_cast<std::size_t>(t.cols()));
            for (Eigen::Index c = 0; c < t.cols(); ++c) row[static_cast<std::size_t>(c)] = t(r, c);
            rows.push_back(row);
        }
        j["transitions"].push_back(std::move(rows));
    }
    j["group_probs"] = group_probs;
    j["hazards"] = hazards;
    json gaps = json::object();
    for (const auto& [type, g] : mean_gap_days) gaps[std::string(to_string(type))] = g;
    j["mean_gap_days"] = gaps;
    j["assignments"] = assignments;
    return j;
}

MarkovOracle MarkovOracle::from_json(const json& j) {
    MarkovOracle o;
    for (const auto& t : j.at("tokens")) o.tokens.push_back({parse_event_type(t.at(0).get<std::string>()), t.at(1).get<std::string>()});
    o.initial = j.at("initial").get<std::vector<double>>();
    for (const auto& rows : j.at("transitions")) {
        const auto n = static_cast<Eigen::Index>(rows.size());
        Eigen::MatrixXd t(n, n);
        for (Eigen::Index r = 0; r < n; ++r)
            for (Eigen::Index c = 0; c < n; ++c) t(r, c) = rows.at(static_cast<std::size_t>(r)).at(static_cast<std::size_t>(c)).get<double>();
        o.transitions.push_back(std::move(t));
    }
    o.group_probs = j.at("group_probs").get<std::vector<double>>();
    o.hazards = j.at("hazards").get<std::vector<double>>();
    for (const auto& [name, g] : j.at("mean_gap_days").items()) o.mean_gap_days[parse_event_type(name)] = g.get<double>();
    o.assignments = j.at("assignments").get<std::map<std::string, int>>();
    return o;
}

void write_oracle(const std::filesystem::path& path, const MarkovOracle& oracle) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write oracle file " + path.string());
    out << oracle.to_json().dump(1) << '\n';
}

MarkovOracle read_oracle(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open oracle file " + path.string());
    return MarkovOracle::from_json(json::parse(in));
}

}  // namespace nep
