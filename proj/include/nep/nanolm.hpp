#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "nep/event_model.hpp"
#include "nep/serializer.hpp"

namespace nep::lm {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class MaskMode { causal, bidirectional_mlm };

std::string_view to_string(MaskMode mode);
MaskMode parse_mask_mode(std::string_view name);

struct ModelConfig {
    int vocab_size = 0;
    int d_model = 128;
    int n_layers = 2;
    int n_heads = 4;
    int max_tokens = 512;
    double init_std = 0.02;
    std::uint64_t seed = 0;

    int head_dim() const { return d_model / n_heads; }
    bool operator==(const ModelConfig&) const = default;
};

void validate(const ModelConfig& config);
nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

template <class S>
struct LayerParams {
    Mat<S> ln1_g, ln1_b;
    Mat<S> wq, wk, wv, wo;  // d x d, applied as x * W
    Mat<S> ln2_g, ln2_b;
    Mat<S> w1, b1;  // d x 4d, 1 x 4d
    Mat<S> w2, b2;  // 4d x d, 1 x d
};

// Pre-norm decoder weights. The token table doubles as the output projection.
template <class S>
struct Params {
    Mat<S> tok_emb;  // vocab x d
    Mat<S> pos_emb;  // max_tokens x d
    std::vector<LayerParams<S>> layers;
    Mat<S> lnf_g, lnf_b;

    std::vector<std::pair<std::string, Mat<S>*>> tensors();
    std::vector<std::pair<std::string, const Mat<S>*>> tensors() const;
};

// Low-rank update W + s * A * B on the query and value maps of every layer.
template <class S>
struct AdapterSet {
    struct Pair {
        Mat<S> a;  // d x r
        Mat<S> b;  // r x d
    };
    int rank = 0;
    double alpha = 0.0;  // scaling s = alpha / rank
    std::vector<Pair> query, value;

    double scaling() const { return alpha / rank; }
    std::vector<std::pair<std::string, Mat<S>*>> tensors();
    std::vector<std::pair<std::string, const Mat<S>*>> tensors() const;
};

template <class S>
struct Model {
    ModelConfig config;
    Params<S> params;
    std::optional<AdapterSet<S>> adapters;
    // Fingerprints of adapter sets already folded into the base weights.
    std::vector<std::uint64_t> merged_adapters;

    static Model init(const ModelConfig& config);
    // Attaches rank-r adapters with A ~ N(0, 1/d) and B = 0, alpha = 2r.
    void attach_adapters(int rank, std::uint64_t seed);

    template <class T>
    Model<T> cast() const;
};

template <class S>
std::uint64_t adapter_fingerprint(const AdapterSet<S>& adapters);

// Bytes of every base tensor hashed in a fixed order.
template <class S>
std::uint64_t parameter_checksum(const Model<S>& model);

template <class S>
struct ForwardResult {
    Mat<S> logits;  // len x vocab
    Mat<S> hidden;  // len x d, after the final layer norm
    std::vector<std::vector<Mat<S>>> attention;  // [layer][head] len x len
};

// Position t may attend to key j when j <= t (causal) or always
// (bidirectional); keys holding PAD are never attended to.
template <class S>
ForwardResult<S> forward(const Model<S>& model, std::span<const TokenId> tokens, MaskMode mode,
                         bool keep_attention = true);

// Next-token supervision aligned with model inputs: position p predicts targets[p].
struct Example {
    std::vector<TokenId> input;
    std::vector<TokenId> targets;
    std::vector<std::uint8_t> mask;

    std::size_t n_masked() const;
};

// input = (context ++ response)[:-1], loss on the response positions.
Example make_causal_example(const TrainingInstance& instance);
// Masked-token objective over the context: ~rate of the context positions
// after BOS (at least one) are replaced by MASK and predicted in place.
Example make_mlm_example(const TrainingInstance& instance, std::uint64_t seed, double rate = 0.15);

// Mean negative log-likelihood over masked rows. Throws on an all-false mask.
template <class S>
double loss(const Mat<S>& logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask);

template <class S>
struct Gradients {
    Params<S> base;
    std::optional<AdapterSet<S>> adapters;

    static Gradients zeros_like(const Model<S>& model);
    void set_zero();
    void add(const Gradients& other);
    std::vector<std::pair<std::string, Mat<S>*>> tensors(bool include_base);
};

struct BackwardOptions {
    bool base_trainable = true;
    // Test hook: negates the analytic gradient of the named tensor.
    std::string corrupt_tensor;
};

// Adds scale * d(sum of masked NLL)/d(theta) into `grads`; returns that NLL sum.
template <class S>
double loss_and_grad(const Model<S>& model, const Example& example, MaskMode mode, S scale, Gradients<S>& grads,
                     const BackwardOptions& options = {});
// Same for several examples packed into one pass; equals the sum of the
// single-example calls up to rounding.
template <class S>
double loss_and_grad(const Model<S>& model, std::span<const Example> examples, MaskMode mode, S scale,
                     Gradients<S>& grads, const BackwardOptions& options = {});

// Linear warm-up over warmup_fraction * total_steps, then cosine decay to 0.
double lr_at(std::int64_t step, double peak_lr, double warmup_fraction, std::int64_t total_steps);

struct TrainConfig {
    double peak_lr = 3e-4;
    double warmup_fraction = 0.10;
    std::int64_t total_steps = 1000;
    int global_batch = 64;
    int micro_batch = 16;
    int adapter_rank = 0;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double grad_clip = 1.0;  // global norm, 0 = off
    double mlm_rate = 0.15;
    std::uint64_t seed = 0;
    unsigned threads = 1;
    std::int64_t divergence_window = 100;
};

void validate(const TrainConfig& config);
nlohmann::json to_json(const TrainConfig& config);

struct LossPoint {
    std::int64_t step;
    double loss;
    double lr;
};

struct TrainResult {
    std::vector<LossPoint> curve;
};

using EvalHook = std::function<void(std::int64_t step, const Model<float>& model)>;

// AdamW with the warm-up/cosine schedule. Each step accumulates micro-batch
// gradients in micro-batch order; with threads > 1 micro-batches run
// concurrently and are reduced in the same order, so results do not depend
// on the thread count. With adapter_rank > 0 only the adapters train.
// Throws DivergenceError on a non-finite loss or parameter, or when the loss
// stays above twice its initial value for divergence_window steps.
template <class S>
TrainResult train(Model<S>& model, std::span<const TrainingInstance> instances, const TrainConfig& config,
                  MaskMode mode, const std::function<void(std::int64_t, const Model<S>&)>& hook = {},
                  std::int64_t eval_every = 0);

// Mean response NLL (nats) of a causal model over the instances.
template <class S>
double evaluate_loss(const Model<S>& model, std::span<const TrainingInstance> instances);

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
    std::vector<std::string> groups;  // tensors that received at least one coordinate
};

// Central finite differences against the analytic gradient of the mean
// response NLL on `coordinates` sampled coordinates, at least one per tensor.
GradCheckResult grad_check(const Model<double>& model, const TrainingInstance& instance, double epsilon = 1e-5,
                           std::size_t coordinates = 200, std::uint64_t seed = 0,
                           const BackwardOptions& options = {}, MaskMode mode = MaskMode::causal);

// Folds the attached adapters into the base weights. Throws when the adapter
// shapes disagree with their rank or when this set was already merged.
template <class S>
Model<S> adapter_merge(const Model<S>& model);
template <class S>
Model<S> adapter_merge(const Model<S>& base, const AdapterSet<S>& adapters);

struct AttentionDump {
    std::vector<TokenId> tokens;
    MaskMode mode = MaskMode::causal;
    std::vector<std::vector<Mat<double>>> layers;  // [layer][head]
};

template <class S>
AttentionDump export_attention(const Model<S>& model, std::span<const TokenId> tokens,
                               MaskMode mode = MaskMode::causal);
void write_attention(const std::filesystem::path& path, const AttentionDump& dump);
AttentionDump read_attention(const std::filesystem::path& path);

// Versioned binary checkpoint: magic, version, JSON header with config and
// tensor shapes, then little-endian tensor data in header order.
template <class S>
void save_checkpoint(const std::filesystem::path& path, const Model<S>& model, const nlohmann::json& provenance = {});
Model<float> load_checkpoint(const std::filesystem::path& path, nlohmann::json* provenance = nullptr);
std::uint64_t checkpoint_id(const std::filesystem::path& path);

void write_loss_curve(const std::filesystem::path& path, std::span<const LossPoint> curve);

}  // namespace nep::lm
