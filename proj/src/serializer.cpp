#include "nep/serializer.hpp"

#include <algorithm>
#include <array>
#include <fstream>

#include "nep/error.hpp"
#include "nep/hash.hpp"

namespace nep {

namespace {

constexpr std::array<std::string_view, special::kNumBuckets> kBucketGlyphs = {"0d",     "1d",     "2-3d", "4-7d",
                                                                             "8-30d", "31-90d", "91d+"};

struct Piece {
    TokenId id;
    std::string_view text;
};

constexpr std::array<Piece, 8> kFixedPieces = {{{special::kHeader, kHeaderText},
                                                {special::kFooter, kFooterText},
                                                {special::kUnk, "<unk>\n"},
                                                {special::kBos, "<bos>"},
                                                {special::kEos, "<eos>\n"},
                                                {special::kPad, "<pad>"},
                                                {special::kMask, "<mask>"},
                                                {special::kSep, "<sep>\n"}}};

std::string event_text(TokenId id, const EventVocabulary& vocab) {
    const auto& key = vocab.decode(id);
    std::string s(type_label(key.type));
    s += ": ";
    s += key.value;
    s += '\n';
    return s;
}

// Token sequence for events [first, last] of the record, last line's gap
// measured to `next_ts`.
void append_event_lines(std::vector<TokenId>& out, const PatientRecord& record, std::size_t first, std::size_t last,
                        std::int64_t next_ts, const EventVocabulary& vocab) {
    for (std::size_t i = first; i <= last; ++i) {
        const std::int64_t following = (i == last) ? next_ts : record.events[i + 1].ts;
        out.push_back(EventVocabulary::bucket_token(time_bucket(following - record.events[i].ts)));
        out.push_back(vocab.encode(record.events[i]));
    }
}

}  // namespace

void validate_window(const WindowConfig& config) {
    if (config.w < 1) throw ConfigError("serializer.w must be >= 1");
    if (config.stride < 1) throw ConfigError("serializer.stride must be >= 1");
    if (config.max_tokens < 2 * config.w) throw ConfigError("serializer.max_tokens must be >= 2 * w");
    if (config.max_tokens < kStructuralTokens + 4) throw ConfigError("serializer.max_tokens too small for one event");
}

nlohmann::json to_json(const WindowConfig& c) {
    return nlohmann::json{{"w", c.w},
                          {"max_tokens", c.max_tokens},
                          {"stride", c.stride},
                          {"include_short_history", c.include_short_history},
                          {"predict_time", c.predict_time}};
}

std::uint64_t serializer_config_hash(const WindowConfig& config) {
    // Bumping the prefix invalidates artifacts built with an older grammar.
    return fnv1a("nep-template-v1|" + to_json(config).dump());
}

int time_bucket(std::int64_t delta_days) {
    if (delta_days < 0) throw ValidationError("time_bucket: negative gap " + std::to_string(delta_days));
    if (delta_days == 0) return 0;
    if (delta_days == 1) return 1;
    if (delta_days <= 3) return 2;
    if (delta_days <= 7) return 3;
    if (delta_days <= 30) return 4;
    if (delta_days <= 90) return 5;
    return 6;
}

std::string_view bucket_glyph(int bucket) { return kBucketGlyphs.at(static_cast<std::size_t>(bucket)); }

std::string detokenize(std::span<const TokenId> ids, const EventVocabulary& vocab) {
    std::string out;
    for (TokenId id : ids) {
        if (EventVocabulary::is_bucket(id)) {
            out += '[';
            out += bucket_glyph(id - special::kFirstBucket);
            out += "] ";
        } else if (vocab.is_event(id)) {
            out += event_text(id, vocab);
        } else {
            const auto it = std::find_if(kFixedPieces.begin(), kFixedPieces.end(),
                                         [id](const Piece& p) { return p.id == id; });
            if (it == kFixedPieces.end()) throw ValidationError("detokenize: token " + std::to_string(id) + " out of range");
            out += it->text;
        }
    }
    return out;
}

std::vector<TokenId> tokenize(std::string_view text, const EventVocabulary& vocab) {
    std::vector<TokenId> ids;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const std::string_view rest = text.substr(pos);
        const auto fixed = std::find_if(kFixedPieces.begin(), kFixedPieces.end(),
                                        [&](const Piece& p) { return rest.starts_with(p.text); });
        if (fixed != kFixedPieces.end()) {
            ids.push_back(fixed->id);
            pos += fixed->text.size();
            continue;
        }
        if (rest.front() == '[') {
            const auto close = rest.find("] ");
            if (close == std::string_view::npos) throw ValidationError("tokenize: unterminated time bucket");
            const auto glyph = rest.substr(1, close - 1);
            const auto it = std::find(kBucketGlyphs.begin(), kBucketGlyphs.end(), glyph);
            if (it == kBucketGlyphs.end()) throw ValidationError("tokenize: unknown time bucket '" + std::string(glyph) + "'");
            ids.push_back(EventVocabulary::bucket_token(static_cast<int>(it - kBucketGlyphs.begin())));
            pos += close + 2;
            continue;
        }
        const auto eol = rest.find('\n');
        if (eol == std::string_view::npos) throw ValidationError("tokenize: event line without newline");
        const auto line = rest.substr(0, eol);
        const auto colon = line.find(": ");
        if (colon == std::string_view::npos) throw ValidationError("tokenize: unrecognized line '" + std::string(line) + "'");
        const auto label = line.substr(0, colon);
        const auto type_it = std::find_if(kAllEventTypes.begin(), kAllEventTypes.end(),
                                          [&](EventType t) { return type_label(t) == label; });
        if (type_it == kAllEventTypes.end()) throw ValidationError("tokenize: unknown event type '" + std::string(label) + "'");
        ids.push_back(vocab.encode(*type_it, line.substr(colon + 2)));
        pos += eol + 1;
    }
    return ids;
}

std::vector<TokenId> tokenize(const ClinicalEvent& event, const EventVocabulary& vocab) {
    return {vocab.encode(event)};
}

std::string render_prompt(const TrainingInstance& instance, const EventVocabulary& vocab) {
    auto ctx = std::span<const TokenId>(instance.context_tokens);
    if (!ctx.empty() && ctx.front() == special::kBos) ctx = ctx.subspan(1);
    return detokenize(ctx, vocab);
}

std::string render_response(const TrainingInstance& instance, const EventVocabulary& vocab) {
    return detokenize(instance.response_tokens, vocab);
}

TrainingInstance build_instance(const PatientRecord& record, std::size_t target_index, const EventVocabulary& vocab,
                                const WindowConfig& config) {
    if (target_index < 1 || target_index >= record.events.size())
        throw ValidationError("patient '" + record.patient_id + "': target index " + std::to_string(target_index) +
                              " has no history or is out of range");
    const auto& target = record.events[target_index];

    TrainingInstance inst;
    inst.patient_id = record.patient_id;
    inst.target_index = target_index;
    if (config.predict_time) {
        const auto gap = target.ts - record.events[target_index - 1].ts;
        inst.response_tokens = {EventVocabulary::bucket_token(time_bucket(gap)), vocab.encode(target)};
    } else {
        inst.response_tokens = {vocab.encode(target)};
    }

    const auto response_len = static_cast<int>(inst.response_tokens.size());
    std::size_t n_ctx = std::min<std::size_t>(target_index, static_cast<std::size_t>(config.w));
    // Oldest events go first when the token cap is hit.
    while (n_ctx > 1 && static_cast<int>(2 * n_ctx) + kStructuralTokens + response_len > config.max_tokens) --n_ctx;
    const std::size_t first = target_index - n_ctx;

    inst.context_tokens.reserve(2 * n_ctx + kStructuralTokens);
    inst.context_tokens.push_back(special::kBos);
    inst.context_tokens.push_back(special::kHeader);
    append_event_lines(inst.context_tokens, record, first, target_index - 1, target.ts, vocab);
    if (config.predict_time) inst.context_tokens[inst.context_tokens.size() - 2] = special::kMask;
    inst.context_tokens.push_back(special::kFooter);

    inst.loss_mask.assign(inst.size(), 0);
    std::fill(inst.loss_mask.begin() + static_cast<std::ptrdiff_t>(inst.context_tokens.size()), inst.loss_mask.end(), 1);
    return inst;
}

std::vector<TrainingInstance> build_instances(const PatientRecord& record, const EventVocabulary& vocab,
                                              const WindowConfig& config, std::span<const TargetSelection> selections) {
    std::vector<TrainingInstance> out;
    for (const auto& s : selections)
        if (s.patient_id == record.patient_id) out.push_back(build_instance(record, s.target_index, vocab, config));
    return out;
}

std::vector<TrainingInstance> build_all_instances(std::span<const PatientRecord> records, const EventVocabulary& vocab,
                                                  const WindowConfig& config,
                                                  std::span<const TargetSelection> selections) {
    std::vector<TrainingInstance> out;
    out.reserve(selections.size());
    for (const auto& s : selections) {
        if (s.patient_index >= records.size() || records[s.patient_index].patient_id != s.patient_id)
            throw ValidationError("selection for '" + s.patient_id + "' does not match the cohort order");
        out.push_back(build_instance(records[s.patient_index], s.target_index, vocab, config));
    }
    return out;
}

std::vector<std::size_t> exhaustive_targets(std::size_t n_events, const WindowConfig& config) {
    std::vector<std::size_t> out;
    const auto w = static_cast<std::size_t>(config.w);
    const std::size_t start = config.include_short_history ? 1 : w;
    for (std::size_t t = start; t < n_events; t += static_cast<std::size_t>(config.stride)) out.push_back(t);
    return out;
}

std::vector<TokenId> build_embedding_prompt(const PatientRecord& record, const EventVocabulary& vocab, int w_embed,
                                            int max_tokens) {
    if (record.events.empty()) throw ValidationError("patient '" + record.patient_id + "' has no events to embed");
    std::size_t n_ctx = std::min<std::size_t>(record.events.size(), static_cast<std::size_t>(std::max(1, w_embed)));
    while (n_ctx > 1 && static_cast<int>(2 * n_ctx) + kStructuralTokens > max_tokens) --n_ctx;
    const std::size_t last = record.events.size() - 1;
    std::vector<TokenId> ids = {special::kBos, special::kHeader};
    append_event_lines(ids, record, last + 1 - n_ctx, last, record.events[last].ts, vocab);
    ids.push_back(special::kFooter);
    return ids;
}

void write_instances(const std::filesystem::path& path, std::span<const TrainingInstance> instances) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write instances file " + path.string());
    for (const auto& inst : instances) {
        nlohmann::ordered_json j;
        j["patient_id"] = inst.patient_id;
        j["target_index"] = inst.target_index;
        j["context_tokens"] = inst.context_tokens;
        j["response_tokens"] = inst.response_tokens;
        out << j.dump() << '\n';
    }
}

std::vector<TrainingInstance> read_instances(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open instances file " + path.string());
    std::vector<TrainingInstance> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            TrainingInstance inst;
            inst.patient_id = j.at("patient_id").get<std::string>();
            inst.target_index = j.at("target_index").get<std::size_t>();
            inst.context_tokens = j.at("context_tokens").get<std::vector<TokenId>>();
            inst.response_tokens = j.at("response_tokens").get<std::vector<TokenId>>();
            if (inst.response_tokens.empty()) throw ParseError("instance has no response tokens", line_no);
            inst.loss_mask.assign(inst.size(), 0);
            std::fill(inst.loss_mask.begin() + static_cast<std::ptrdiff_t>(inst.context_tokens.size()),
                      inst.loss_mask.end(), 1);
            out.push_back(std::move(inst));
        } catch (const nlohmann::json::exception& ex) {
            throw ParseError(ex.what(), line_no);
        }
    }
    return out;
}

}  // namespace nep
