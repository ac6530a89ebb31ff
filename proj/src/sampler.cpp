#include "nep/sampler.hpp"

#include <cmath>
#include <fstream>
#include <map>

#include "nep/error.hpp"
#include "nep/rng.hpp"

namespace nep {

double SamplingDistribution::prob(EventType type) const {
    for (std::size_t i = 0; i < types.size(); ++i)
        if (types[i] == type) return p[i];
    return 0.0;
}

SamplingDistribution type_distribution(const FrequencyTable& freqs, double alpha) {
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ValidationError("sampling alpha must be finite and >= 0");
    if (freqs.k() == 0) throw ValidationError("frequency table is empty");
    SamplingDistribution dist;
    dist.types = freqs.types;
    dist.p.resize(freqs.k());
    double z = 0.0;
    for (std::size_t i = 0; i < freqs.k(); ++i) {
        if (freqs.counts[i] < 1) throw ValidationError("frequency table counts must be >= 1");
        dist.p[i] = std::pow(static_cast<double>(freqs.counts[i]), alpha);
        z += dist.p[i];
    }
    for (auto& x : dist.p) x /= z;
    return dist;
}

std::vector<TargetSelection> sample_training_positions(std::span<const PatientRecord> records,
                                                       const SamplingDistribution& dist,
                                                       const SamplingConfig& config) {
    if (config.n_instances < 1) throw ValidationError("n_instances must be >= 1");

    struct Candidate {
        std::size_t patient;
        std::size_t event;
    };
    std::map<EventType, std::vector<Candidate>> pools;
    for (std::size_t r = 0; r < records.size(); ++r)
        for (std::size_t i = 1; i < records[r].events.size(); ++i) pools[records[r].events[i].type].push_back({r, i});

    std::vector<EventType> types;
    std::vector<double> weights;
    for (std::size_t i = 0; i < dist.types.size(); ++i) {
        const auto it = pools.find(dist.types[i]);
        if (dist.p[i] > 0.0 && it != pools.end() && !it->second.empty()) {
            types.push_back(dist.types[i]);
            weights.push_back(dist.p[i]);
        }
    }
    if (types.empty()) throw ValidationError("no event type with sampling mass has an eligible target");

    Rng rng(config.seed);
    std::vector<TargetSelection> out;
    out.reserve(static_cast<std::size_t>(config.n_instances));
    for (std::int64_t d = 0; d < config.n_instances; ++d) {
        const EventType type = types[rng.categorical(weights)];
        const auto& pool = pools[type];
        const Candidate c = pool[static_cast<std::size_t>(rng.below(pool.size()))];
        out.push_back({records[c.patient].patient_id, c.patient, c.event, type});
    }
    return out;
}

void write_selections(const std::filesystem::path& path, std::span<const TargetSelection> selections) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write selections file " + path.string());
    for (const auto& s : selections) {
        nlohmann::ordered_json j;
        j["patient_id"] = s.patient_id;
        j["target_index"] = s.target_index;
        j["event_type"] = to_string(s.event_type);
        out << j.dump() << '\n';
    }
}

std::vector<TargetSelection> read_selections(const std::filesystem::path& path,
                                             std::span<const PatientRecord> records) {
    std::map<std::string, std::size_t> index;
    for (std::size_t r = 0; r < records.size(); ++r) index.emplace(records[r].patient_id, r);
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open selections file " + path.string());
    std::vector<TargetSelection> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            TargetSelection s;
            s.patient_id = j.at("patient_id").get<std::string>();
            s.target_index = j.at("target_index").get<std::size_t>();
            s.event_type = parse_event_type(j.at("event_type").get<std::string>());
            const auto it = index.find(s.patient_id);
            if (it == index.end()) throw ValidationError("unknown patient '" + s.patient_id + "'");
            s.patient_index = it->second;
            const auto& events = records[it->second].events;
            if (s.target_index < 1 || s.target_index >= events.size() || events[s.target_index].type != s.event_type)
                throw ValidationError("selection does not match the cohort");
            out.push_back(std::move(s));
        } catch (const nlohmann::json::exception& ex) {
            throw ParseError(ex.what(), line_no);
        } catch (const std::invalid_argument& ex) {
            throw ParseError(ex.what(), line_no);
        } catch (const ValidationError& ex) {
            throw ParseError(ex.what(), line_no);
        }
    }
    return out;
}

}  // namespace nep
