#include "nep/embedder.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "nep/error.hpp"
#include "nep/serializer.hpp"

namespace nep {

namespace {

constexpr char kBinaryMagic[8] = {'N', 'E', 'P', 'E', 'M', 'B', '0', '1'};
constexpr std::string_view kCsvMagic = "# nep-embeddings v1";

void check_finite(const EmbeddingMatrix& m) {
    if (!m.values.allFinite()) throw ValidationError("embedding matrix contains NaN or Inf");
    if (static_cast<std::size_t>(m.values.rows()) != m.patient_ids.size())
        throw ValidationError("embedding matrix row count does not match its patient ids");
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, sep)) out.push_back(item);
    return out;
}

}  // namespace

std::string_view to_string(Pooling pooling) { return pooling == Pooling::mean ? "mean" : "last"; }

Pooling parse_pooling(std::string_view name) {
    if (name == "mean") return Pooling::mean;
    if (name == "last") return Pooling::last;
    throw ConfigError("unknown pooling '" + std::string(name) + "'");
}

std::size_t EmbeddingMatrix::row_of(const std::string& patient_id) const {
    for (std::size_t i = 0; i < patient_ids.size(); ++i)
        if (patient_ids[i] == patient_id) return i;
    throw ValidationError("no embedding for patient '" + patient_id + "'");
}

Eigen::VectorXf pool_hidden_states(const lm::Mat<float>& hidden, std::span<const TokenId> tokens, Pooling pooling) {
    Eigen::VectorXf out = Eigen::VectorXf::Zero(hidden.cols());
    if (pooling == Pooling::last) {
        for (std::size_t t = tokens.size(); t-- > 0;)
            if (tokens[t] != special::kPad) return hidden.row(static_cast<Eigen::Index>(t)).transpose();
        throw ValidationError("pooling: every position is PAD");
    }
    // Double accumulator; the sum order is fixed by position.
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(hidden.cols());
    std::size_t n = 0;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (tokens[t] == special::kPad) continue;
        acc += hidden.row(static_cast<Eigen::Index>(t)).transpose().cast<double>();
        ++n;
    }
    if (n == 0) throw ValidationError("pooling: every position is PAD");
    out = (acc / static_cast<double>(n)).cast<float>();
    return out;
}

Eigen::VectorXf embed_tokens(const lm::Model<float>& model, std::span<const TokenId> tokens, Pooling pooling) {
    const auto fr = lm::forward(model, tokens, lm::MaskMode::causal, false);
    return pool_hidden_states(fr.hidden, tokens, pooling);
}

Eigen::VectorXf embed_patient(const lm::Model<float>& model, const EventVocabulary& vocab, const PatientRecord& record,
                              const EmbedConfig& config) {
    if (record.events.empty()) throw ValidationError("patient '" + record.patient_id + "' has no events to embed");
    const int max_tokens = model.config.max_tokens;
    const int fit = (max_tokens - kStructuralTokens) / 2;
    const int w = config.w_embed > 0 ? std::min(config.w_embed, fit) : fit;
    const auto tokens = build_embedding_prompt(record, vocab, w, max_tokens);
    return embed_tokens(model, tokens, config.pooling);
}

EmbeddingMatrix embed_cohort(const lm::Model<float>& model, const EventVocabulary& vocab,
                             std::span<const PatientRecord> records, const EmbedConfig& config,
                             EmbeddingProvenance provenance) {
    EmbeddingMatrix m;
    const auto n = static_cast<Eigen::Index>(records.size());
    m.values.resize(n, model.config.d_model);
    m.provenance = std::move(provenance);
    m.provenance.pooling = std::string(to_string(config.pooling));
    for (const auto& r : records) m.patient_ids.push_back(r.patient_id);

    std::vector<std::string> errors(records.size());
    const auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            try {
                m.values.row(static_cast<Eigen::Index>(i)) = embed_patient(model, vocab, records[i], config).transpose();
            } catch (const std::exception& ex) {
                errors[i] = ex.what();
            }
        }
    };
    const unsigned threads = std::max(1u, config.threads);
    if (threads == 1) {
        work(0, records.size());
    } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (records.size() + threads - 1) / threads;
        for (unsigned t = 0; t < threads; ++t) {
            const std::size_t b = std::min(records.size(), t * chunk), e = std::min(records.size(), b + chunk);
            pool.emplace_back(work, b, e);
        }
        for (auto& th : pool) th.join();
    }
    for (std::size_t i = 0; i < errors.size(); ++i)
        if (!errors[i].empty()) throw ValidationError("embedding patient '" + records[i].patient_id + "': " + errors[i]);
    check_finite(m);
    return m;
}

void write_embeddings_csv(const std::filesystem::path& path, const EmbeddingMatrix& m) {
    check_finite(m);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write embeddings " + path.string());
    out << kCsvMagic << '\n';
    out << "# d_model=" << m.values.cols() << ",count=" << m.values.rows() << ",checkpoint=" << m.provenance.checkpoint_id
        << ",pooling=" << m.provenance.pooling << ",serializer_hash=" << m.provenance.serializer_hash << '\n';
    out << "patient_id";
    for (Eigen::Index c = 0; c < m.values.cols(); ++c) out << ",e" << c;
    out << '\n';
    char buf[32];
    for (Eigen::Index r = 0; r < m.values.rows(); ++r) {
        out << m.patient_ids[static_cast<std::size_t>(r)];
        for (Eigen::Index c = 0; c < m.values.cols(); ++c) {
            std::snprintf(buf, sizeof buf, ",%.9g", static_cast<double>(m.values(r, c)));
            out << buf;
        }
        out << '\n';
    }
}

EmbeddingMatrix read_embeddings_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open embeddings " + path.string());
    std::string line;
    std::getline(in, line);
    if (line != kCsvMagic) throw ValidationError("not an embeddings CSV: " + path.string());
    std::getline(in, line);
    if (!line.starts_with("# ")) throw ValidationError("embeddings CSV is missing its header line");
    EmbeddingMatrix m;
    Eigen::Index d = -1, count = -1;
    for (const auto& field : split(line.substr(2), ',')) {
        const auto eq = field.find('=');
        if (eq == std::string::npos) throw ValidationError("malformed embeddings header field '" + field + "'");
        const auto key = field.substr(0, eq), value = field.substr(eq + 1);
        if (key == "d_model") d = std::stol(value);
        else if (key == "count") count = std::stol(value);
        else if (key == "checkpoint") m.provenance.checkpoint_id = value;
        else if (key == "pooling") m.provenance.pooling = value;
        else if (key == "serializer_hash") m.provenance.serializer_hash = value;
    }
    if (d < 1 || count < 0) throw ValidationError("embeddings header lacks d_model/count");
    std::getline(in, line);  // column names
    m.values.resize(count, d);
    for (Eigen::Index r = 0; r < count; ++r) {
        if (!std::getline(in, line)) throw ValidationError("embeddings CSV truncated");
        const auto cells = split(line, ',');
        if (static_cast<Eigen::Index>(cells.size()) != d + 1) throw ParseError("wrong number of embedding columns", static_cast<std::size_t>(r + 4));
        m.patient_ids.push_back(cells[0]);
        for (Eigen::Index c = 0; c < d; ++c) m.values(r, c) = std::stof(cells[static_cast<std::size_t>(c + 1)]);
    }
    check_finite(m);
    return m;
}

void write_embeddings_binary(const std::filesystem::path& path, const EmbeddingMatrix& m) {
    check_finite(m);
    nlohmann::json header{{"d_model", m.values.cols()},
                          {"count", m.values.rows()},
                          {"checkpoint", m.provenance.checkpoint_id},
                          {"pooling", m.provenance.pooling},
                          {"serializer_hash", m.provenance.serializer_hash},
                          {"patient_ids", m.patient_ids}};
    const std::string text = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write embeddings " + path.string());
    out.write(kBinaryMagic, sizeof kBinaryMagic);
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(len));
    // values is column-major; rows are written one at a time.
    for (Eigen::Index r = 0; r < m.values.rows(); ++r)
        for (Eigen::Index c = 0; c < m.values.cols(); ++c) {
            const float v = m.values(r, c);
            out.write(reinterpret_cast<const char*>(&v), sizeof v);
        }
}

EmbeddingMatrix read_embeddings_binary(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open embeddings " + path.string());
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kBinaryMagic, sizeof magic) != 0) throw ValidationError("not a binary embeddings file: " + path.string());
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    const auto header = nlohmann::json::parse(text);
    EmbeddingMatrix m;
    m.provenance.checkpoint_id = header.at("checkpoint").get<std::string>();
    m.provenance.pooling = header.at("pooling").get<std::string>();
    m.provenance.serializer_hash = header.at("serializer_hash").get<std::string>();
    m.patient_ids = header.at("patient_ids").get<std::vector<std::string>>();
    const auto d = header.at("d_model").get<Eigen::Index>(), count = header.at("count").get<Eigen::Index>();
    m.values.resize(count, d);
    for (Eigen::Index r = 0; r < count; ++r)
        for (Eigen::Index c = 0; c < d; ++c) {
            float v;
            in.read(reinterpret_cast<char*>(&v), sizeof v);
            m.values(r, c) = v;
        }
    if (!in) throw ValidationError("binary embeddings file truncated");
    check_finite(m);
    return m;
}

EmbeddingMatrix read_embeddings(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open embeddings " + path.string());
    char magic[8] = {};
    in.read(magic, sizeof magic);
    if (std::memcmp(magic, kBinaryMagic, sizeof magic) == 0) return read_embeddings_binary(path);
    return read_embeddings_csv(path);
}

}  // namespace nep
