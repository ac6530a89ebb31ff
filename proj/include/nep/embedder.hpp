#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nep/event_model.hpp"
#include "nep/nanolm.hpp"

namespace nep {

enum class Pooling { mean, last };

std::string_view to_string(Pooling pooling);
Pooling parse_pooling(std::string_view name);

struct EmbedConfig {
    int w_embed = 0;  // events per prompt; 0 = as many as fit in the model's max_tokens
    Pooling pooling = Pooling::mean;
    unsigned threads = 1;
};

struct EmbeddingProvenance {
    std::string checkpoint_id;
    std::string pooling = "mean";
    std::string serializer_hash;

    bool operator==(const EmbeddingProvenance&) const = default;
};

struct EmbeddingMatrix {
    Eigen::MatrixXf values;  // one row per patient
    std::vector<std::string> patient_ids;
    EmbeddingProvenance provenance;

    std::size_t row_of(const std::string& patient_id) const;
};

// Pools final hidden states over the non-PAD positions of `tokens`.
Eigen::VectorXf pool_hidden_states(const lm::Mat<float>& hidden, std::span<const TokenId> tokens, Pooling pooling);

// Causal forward over `tokens`, then pooling. The model is only read.
Eigen::VectorXf embed_tokens(const lm::Model<float>& model, std::span<const TokenId> tokens, Pooling pooling);

// Prompt over the most recent events of the record, embedded with embed_tokens.
Eigen::VectorXf embed_patient(const lm::Model<float>& model, const EventVocabulary& vocab, const PatientRecord& record,
                              const EmbedConfig& config = {});

// Row i is embed_patient(records[i]); worker threads split rows only.
EmbeddingMatrix embed_cohort(const lm::Model<float>& model, const EventVocabulary& vocab,
                             std::span<const PatientRecord> records, const EmbedConfig& config,
                             EmbeddingProvenance provenance);

// CSV with a two-line '#' header, or packed little-endian float32 with a JSON header.
void write_embeddings_csv(const std::filesystem::path& path, const EmbeddingMatrix& m);
void write_embeddings_binary(const std::filesystem::path& path, const EmbeddingMatrix& m);
EmbeddingMatrix read_embeddings_csv(const std::filesystem::path& path);
EmbeddingMatrix read_embeddings_binary(const std::filesystem::path& path);
// Dispatches on the file's leading bytes.
EmbeddingMatrix read_embeddings(const std::filesystem::path& path);

}  // namespace nep
