#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include "nep/error.hpp"
#include "nep/nanolm.hpp"
#include "nep/rng.hpp"

namespace nep::lm {

using nlohmann::json;

double lr_at(std::int64_t step, double peak_lr, double warmup_fraction, std::int64_t total_steps) {
    const double total = static_cast<double>(total_steps);
    const double warmup_end = warmup_fraction * total;
    const double s = static_cast<double>(step);
    if (s < warmup_end) return peak_lr * s / warmup_end;
    if (total <= warmup_end) return peak_lr;
    const double progress = (s - warmup_end) / (total - warmup_end);
    return peak_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

void validate(const TrainConfig& c) {
    if (!(c.peak_lr > 0.0)) throw ConfigError("train.peak_lr must be > 0");
    if (!(c.warmup_fraction > 0.0 && c.warmup_fraction < 1.0)) throw ConfigError("train.warmup_fraction must lie in (0, 1)");
    if (c.total_steps < 1) throw ConfigError("train.total_steps must be >= 1");
    if (c.global_batch < 1 || c.micro_batch < 1) throw ConfigError("train.global_batch and train.micro_batch must be >= 1");
    if (c.adapter_rank < 0) throw ConfigError("train.adapter_rank must be >= 0");
    if (c.weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
    if (!(c.beta1 >= 0.0 && c.beta1 < 1.0 && c.beta2 >= 0.0 && c.beta2 < 1.0)) throw ConfigError("train.betas must lie in [0, 1)");
    if (!(c.epsilon > 0.0)) throw ConfigError("train.epsilon must be > 0");
    if (c.grad_clip < 0.0) throw ConfigError("train.grad_clip must be >= 0");
    if (!(c.mlm_rate > 0.0 && c.mlm_rate < 1.0)) throw ConfigError("train.mlm_rate must lie in (0, 1)");
    if (c.threads < 1) throw ConfigError("train.threads must be >= 1");
    if (c.divergence_window < 1) throw ConfigError("train.divergence_window must be >= 1");
}

json to_json(const TrainConfig& c) {
    return json{{"peak_lr", c.peak_lr},         {"warmup_fraction", c.warmup_fraction},
                {"total_steps", c.total_steps}, {"global_batch", c.global_batch},
                {"micro_batch", c.micro_batch}, {"adapter_rank", c.adapter_rank},
                {"weight_decay", c.weight_decay}, {"beta1", c.beta1},
                {"beta2", c.beta2},             {"epsilon", c.epsilon},
                {"grad_clip", c.grad_clip},     {"mlm_rate", c.mlm_rate},
                {"seed", c.seed}};
}

template <class S>
TrainResult train(Model<S>& model, std::span<const TrainingInstance> instances, const TrainConfig& cfg, MaskMode mode,
                  const std::function<void(std::int64_t, const Model<S>&)>& hook, std::int64_t eval_every) {
    validate(cfg);
    if (instances.empty()) throw ValidationError("train: no instances");
    if (cfg.adapter_rank > 0) {
        if (!model.adapters) model.attach_adapters(cfg.adapter_rank, derive_seed(cfg.seed, 0xada97e5ULL));
        if (model.adapters->rank != cfg.adapter_rank) throw ConfigError("train.adapter_rank disagrees with the attached adapters");
    }
    const bool base_trainable = cfg.adapter_rank == 0;
    BackwardOptions options;
    options.base_trainable = base_trainable;

    // Parameters updated by the optimizer, paired with their gradient slots.
    auto params = base_trainable ? model.params.tensors() : std::vector<std::pair<std::string, Mat<S>*>>{};
    if (model.adapters && !base_trainable) {
        auto ad = model.adapters->tensors();
        params.insert(params.end(), ad.begin(), ad.end());
    }
    auto acc = Gradients<S>::zeros_like(model);
    auto acc_list = acc.tensors(base_trainable);
    if (model.adapters && base_trainable) acc_list.resize(params.size());  // adapters frozen alongside a trainable base

    std::vector<Mat<S>> m1, m2;
    for (const auto& [name, p] : params) {
        m1.push_back(Mat<S>::Zero(p->rows(), p->cols()));
        m2.push_back(Mat<S>::Zero(p->rows(), p->cols()));
    }

    const int n_micro = (cfg.global_batch + cfg.micro_batch - 1) / cfg.micro_batch;
    std::vector<Gradients<S>> micro(static_cast<std::size_t>(n_micro), acc);
    std::vector<double> micro_nll(static_cast<std::size_t>(n_micro));
    std::vector<std::size_t> micro_count(static_cast<std::size_t>(n_micro));

    std::vector<std::size_t> order(instances.size());
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng(cfg.seed);
    order_rng.shuffle(order);
    std::size_t cursor = 0;

    TrainResult result;
    double initial_loss = 0.0;
    std::int64_t above = 0;
    std::vector<std::size_t> batch(static_cast<std::size_t>(cfg.global_batch));

    for (std::int64_t step = 0; step < cfg.total_steps; ++step) {
        for (auto& b : batch) {
            if (cursor == order.size()) {
                order_rng.shuffle(order);
                cursor = 0;
            }
            b = order[cursor++];
        }

        const auto run_micro = [&](int m) {
            auto& g = micro[static_cast<std::size_t>(m)];
            g.set_zero();
            std::size_t count = 0;
            const int begin = m * cfg.micro_batch;
            const int end = std::min(cfg.global_batch, begin + cfg.micro_batch);
            std::vector<Example> exs;
            for (int i = begin; i < end; ++i) {
                const auto& inst = instances[batch[static_cast<std::size_t>(i)]];
                exs.push_back(mode == MaskMode::causal
                                  ? make_causal_example(inst)
                                  : make_mlm_example(inst, derive_seed(cfg.seed, static_cast<std::uint64_t>(step * cfg.global_batch + i) + 1),
                                                     cfg.mlm_rate));
                count += exs.back().n_masked();
            }
            // Small packs keep the activations cache-resident.
            constexpr std::size_t kPack = 4;
            double nll = 0.0;
            for (std::size_t i = 0; i < exs.size(); i += kPack)
                nll += loss_and_grad(model, std::span<const Example>(exs).subspan(i, std::min(kPack, exs.size() - i)), mode, S(1), g, options);
            micro_nll[static_cast<std::size_t>(m)] = nll;
            micro_count[static_cast<std::size_t>(m)] = count;
        };
        if (cfg.threads <= 1) {
            for (int m = 0; m < n_micro; ++m) run_micro(m);
        } else {
            for (int wave = 0; wave < n_micro; wave += static_cast<int>(cfg.threads)) {
                std::vector<std::thread> pool;
                for (int m = wave; m < std::min(n_micro, wave + static_cast<int>(cfg.threads)); ++m) pool.emplace_back(run_micro, m);
                for (auto& t : pool) t.join();
            }
        }

        acc.set_zero();
        double nll = 0.0;
        std::size_t count = 0;
        for (int m = 0; m < n_micro; ++m) {
            acc.add(micro[static_cast<std::size_t>(m)]);
            nll += micro_nll[static_cast<std::size_t>(m)];
            count += micro_count[static_cast<std::size_t>(m)];
        }
        const double batch_loss = nll / static_cast<double>(count);
        const S inv = static_cast<S>(1.0 / static_cast<double>(count));
        double norm_sq = 0.0;
        for (auto& [name, g] : acc_list) {
            *g *= inv;
            norm_sq += static_cast<double>(g->squaredNorm());
        }
        S clip = S(1);
        if (cfg.grad_clip > 0.0 && std::sqrt(norm_sq) > cfg.grad_clip)
            clip = static_cast<S>(cfg.grad_clip / std::sqrt(norm_sq));

        const double lr = lr_at(step, cfg.peak_lr, cfg.warmup_fraction, cfg.total_steps);
        const double t = static_cast<double>(step + 1);
        const S bc1 = static_cast<S>(1.0 - std::pow(cfg.beta1, t));
        const S bc2 = static_cast<S>(1.0 - std::pow(cfg.beta2, t));
        const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
        const S eps = static_cast<S>(cfg.epsilon), slr = static_cast<S>(lr);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = *params[i].second;
            const auto g = (*acc_list[i].second * clip).array();
            m1[i].array() = b1 * m1[i].array() + (S(1) - b1) * g;
            m2[i].array() = b2 * m2[i].array() + (S(1) - b2) * g.square();
            // Decoupled decay on matrices only; gains and biases are 1 x d.
            if (cfg.weight_decay > 0.0 && p.rows() > 1) p *= S(1) - slr * static_cast<S>(cfg.weight_decay);
            p.array() -= slr * (m1[i].array() / bc1) / ((m2[i].array() / bc2).sqrt() + eps);
        }

        result.curve.push_back({step, batch_loss, lr});
        if (!std::isfinite(batch_loss)) {
            std::ostringstream msg;
            msg << "training diverged: non-finite loss at step " << step;
            throw DivergenceError(msg.str());
        }
        for (const auto& [name, p] : params)
            if (!p->allFinite()) throw DivergenceError("training diverged: non-finite values in " + name + " after step " + std::to_string(step));
        if (step == 0) initial_loss = batch_loss;
        above = batch_loss > 2.0 * initial_loss ? above + 1 : 0;
        if (above >= cfg.divergence_window) {
            std::ostringstream msg;
            msg << "training diverged: loss above 2x the initial " << initial_loss << " for " << above
                << " consecutive steps (step " << step << ", loss " << batch_loss << ", lr " << lr << ")";
            throw DivergenceError(msg.str());
        }
        if (hook && eval_every > 0 && ((step + 1) % eval_every == 0 || step + 1 == cfg.total_steps)) hook(step + 1, model);
    }
    return result;
}

void write_loss_curve(const std::filesystem::path& path, std::span<const LossPoint> curve) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write loss curve " + path.string());
    out << "step,loss,lr\n";
    out.precision(17);
    for (const auto& p : curve) out << p.step << ',' << p.loss << ',' << p.lr << '\n';
}

template TrainResult train(Model<float>&, std::span<const TrainingInstance>, const TrainConfig&, MaskMode,
                           const std::function<void(std::int64_t, const Model<float>&)>&, std::int64_t);
template TrainResult train(Model<double>&, std::span<const TrainingInstance>, const TrainConfig&, MaskMode,
                           const std::function<void(std::int64_t, const Model<double>&)>&, std::int64_t);

}  // namespace nep::lm
