#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "nep/error.hpp"
#include "nep/nanolm.hpp"
#include "nep/rng.hpp"

using namespace nep;
using namespace nep::lm;

namespace {

ModelConfig small(int vocab = 30) {
    ModelConfig c;
    c.vocab_size = vocab;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_layers = 2;
    c.max_tokens = 32;
    c.seed = 7;
    return c;
}

std::vector<TokenId> random_tokens(Rng& rng, std::size_t n, int vocab) {
    std::vector<TokenId> t(n);
    for (auto& x : t) x = static_cast<TokenId>(1 + rng.below(static_cast<std::uint64_t>(vocab - 1)));
    return t;
}

TrainingInstance instance(std::vector<TokenId> context, std::vector<TokenId> response) {
    TrainingInstance inst;
    inst.context_tokens = std::move(context);
    inst.response_tokens = std::move(response);
    inst.loss_mask.assign(inst.size(), 0);
    std::fill(inst.loss_mask.begin() + static_cast<std::ptrdiff_t>(inst.context_tokens.size()), inst.loss_mask.end(), 1);
    return inst;
}

std::vector<TrainingInstance> corpus(int n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<TrainingInstance> out;
    for (int i = 0; i < n; ++i) {
        auto ctx = random_tokens(rng, 6 + rng.below(6), 30);
        ctx[0] = special::kBos;
        // Response repeats the last context token: learnable.
        out.push_back(instance(ctx, {ctx.back()}));
    }
    return out;
}

}  // namespace

TEST_CASE("future tokens never change past logits") {
    const auto m = Model<double>::init(small());
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        auto a = random_tokens(rng, 20, 30);
        const auto t = static_cast<Eigen::Index>(rng.below(19));
        auto b = a;
        for (std::size_t i = static_cast<std::size_t>(t) + 1; i < b.size(); ++i) b[i] = static_cast<TokenId>(1 + rng.below(29));
        const auto fa = forward(m, a, MaskMode::causal, false), fb = forward(m, b, MaskMode::causal, false);
        CHECK((fa.logits.topRows(t + 1) - fb.logits.topRows(t + 1)).cwiseAbs().maxCoeff() < 1e-6);
    }
    // The bidirectional mode does look ahead.
    auto a = random_tokens(rng, 10, 30), b = a;
    b[9] = b[9] == 5 ? 6 : 5;
    CHECK((forward(m, a, MaskMode::bidirectional_mlm).logits.row(0) - forward(m, b, MaskMode::bidirectional_mlm).logits.row(0))
              .cwiseAbs()
              .maxCoeff() > 1e-9);
}

TEST_CASE("attention rows are distributions and skip PAD") {
    const auto m = Model<double>::init(small());
    std::vector<TokenId> toks{1, 9, 0, 12, 14, 0, 20};
    const auto f = forward(m, toks, MaskMode::causal);
    for (const auto& layer : f.attention)
        for (const auto& head : layer)
            for (Eigen::Index r = 0; r < head.rows(); ++r) {
                CHECK(std::abs(head.row(r).sum() - 1.0) < 1e-12);
                CHECK(head(r, 2) == 0.0);
                CHECK(head(r, 5) == 0.0);
                for (Eigen::Index c = r + 1; c < head.cols(); ++c) CHECK(head(r, c) == 0.0);
            }
    const std::vector<TokenId> one{1};
    const auto s = forward(m, one, MaskMode::causal);
    CHECK(s.logits.rows() == 1);
    CHECK(s.attention[0][0](0, 0) == doctest::Approx(1.0));
}

TEST_CASE("loss on a hand example") {
    Mat<double> logits(2, 4);
    logits << std::log(3.0), 0, 0, 0, 0, 0, 0, 0;
    const std::vector<TokenId> targets{0, 2};
    const std::vector<std::uint8_t> mask{1, 1};
    CHECK(loss(logits, targets, mask) == doctest::Approx(-(std::log(0.5) + std::log(0.25)) / 2).epsilon(1e-14));
    const std::vector<std::uint8_t> first{1, 0};
    CHECK(loss(logits, targets, first) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
    const std::vector<std::uint8_t> none{0, 0};
    CHECK_THROWS(loss(logits, targets, none));
    // Uniform logits over k classes cost ln k.
    Mat<double> flat = Mat<double>::Zero(3, 17);
    const std::vector<TokenId> t3{4, 0, 16};
    const std::vector<std::uint8_t> m3{1, 1, 1};
    CHECK(loss(flat, t3, m3) == doctest::Approx(std::log(17.0)).epsilon(1e-14));
}

TEST_CASE("warm-up then cosine schedule") {
    const double peak = 3e-4;
    CHECK(lr_at(0, peak, 0.1, 1000) == 0.0);
    CHECK(std::abs(lr_at(50, peak, 0.1, 1000) - peak / 2) < 1e-12);
    CHECK(std::abs(lr_at(100, peak, 0.1, 1000) - peak) < 1e-12);
    CHECK(std::abs(lr_at(550, peak, 0.1, 1000) - peak / 2) < 1e-12);
    CHECK(std::abs(lr_at(1000, peak, 0.1, 1000)) < 1e-12);
    for (std::int64_t s = 101; s <= 1000; ++s) CHECK(lr_at(s, peak, 0.1, 1000) <= lr_at(s - 1, peak, 0.1, 1000));
}

TEST_CASE("analytic gradients agree with finite differences") {
    auto m = Model<double>::init(small());
    const auto inst = instance({1, 6, 9, 12, 3, 7}, {20, 21});
    const auto r = grad_check(m, inst, 1e-5, 200, 3);
    CHECK(r.coordinates >= 200);
    CHECK(r.groups.size() == m.params.tensors().size());
    CHECK(r.max_rel_error < 1e-4);

    BackwardOptions bad;
    bad.corrupt_tensor = "layers.0.attn.wv";
    CHECK(grad_check(m, inst, 1e-5, 200, 3, bad).max_rel_error > 0.1);

    // Adapter-only gradients with the base frozen.
    m.attach_adapters(4, 9);
    for (auto& [name, t] : m.adapters->tensors()) t->setRandom();
    BackwardOptions frozen;
    frozen.base_trainable = false;
    const auto ra = grad_check(m, inst, 1e-5, 50, 4, frozen);
    CHECK(ra.max_rel_error < 1e-4);
    CHECK(ra.groups.size() == m.adapters->tensors().size());
}

TEST_CASE("a packed batch equals the sum of single examples") {
    auto m = Model<double>::init(small());
    m.attach_adapters(2, 5);
    for (auto& [name, t] : m.adapters->tensors()) t->setRandom();
    const auto insts = corpus(6, 21);
    for (const auto mode : {MaskMode::causal, MaskMode::bidirectional_mlm}) {
        std::vector<Example> exs;
        for (std::size_t i = 0; i < insts.size(); ++i)
            exs.push_back(mode == MaskMode::causal ? make_causal_example(insts[i]) : make_mlm_example(insts[i], i, 0.3));
        auto one = Gradients<double>::zeros_like(m);
        double nll_one = 0.0;
        for (const auto& ex : exs) nll_one += loss_and_grad(m, ex, mode, 0.5, one);
        auto packed = Gradients<double>::zeros_like(m);
        const double nll_packed = loss_and_grad(m, std::span<const Example>(exs), mode, 0.5, packed);
        CHECK(nll_packed == doctest::Approx(nll_one).epsilon(1e-12));
        auto a = one.tensors(true);
        auto b = packed.tensors(true);
        for (std::size_t i = 0; i < a.size(); ++i) CHECK_MESSAGE((*a[i].second - *b[i].second).cwiseAbs().maxCoeff() < 1e-12, a[i].first);
    }
    // Masked-token objective: interior rows are supervised.
    const auto r = grad_check(Model<double>::init(small()), insts[0], 1e-5, 200, 8, {}, MaskMode::bidirectional_mlm);
    CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("padding keys get no gradient and change nothing") {
    const auto m = Model<double>::init(small());
    const auto a = forward(m, std::vector<TokenId>{1, 5, 8, 0, 0}, MaskMode::causal, false);
    const auto b = forward(m, std::vector<TokenId>{1, 5, 8}, MaskMode::causal, false);
    CHECK((a.logits.topRows(3) - b.logits).cwiseAbs().maxCoeff() < 1e-12);

    // Unused embedding rows receive exactly zero gradient.
    auto g = Gradients<double>::zeros_like(m);
    loss_and_grad(m, make_causal_example(instance({1, 5, 8}, {9})), MaskMode::causal, 1.0, g);
    CHECK(g.base.tok_emb.row(25).cwiseAbs().maxCoeff() > 0.0);  // output side touches every row
    CHECK(g.base.pos_emb.row(10).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("a single instance can be memorized") {
    auto m = Model<float>::init(small());
    const std::vector<TrainingInstance> one{instance({1, 6, 9, 12, 3, 7}, {20})};
    TrainConfig tc;
    tc.peak_lr = 1e-2;
    tc.total_steps = 500;
    tc.global_batch = 1;
    tc.micro_batch = 1;
    tc.weight_decay = 0.0;
    train(m, one, tc, MaskMode::causal);
    CHECK(evaluate_loss(m, one) < 0.01);
}

TEST_CASE("training is deterministic and thread-count independent") {
    const auto data = corpus(64, 2);
    TrainConfig tc;
    tc.peak_lr = 3e-3;
    tc.total_steps = 30;
    tc.global_batch = 8;
    tc.micro_batch = 2;
    tc.seed = 11;
    auto a = Model<float>::init(small()), b = a, c = a;
    const auto ra = train(a, data, tc, MaskMode::causal);
    train(b, data, tc, MaskMode::causal);
    tc.threads = 3;
    const auto rc = train(c, data, tc, MaskMode::causal);
    CHECK(parameter_checksum(a) == parameter_checksum(b));
    CHECK(parameter_checksum(a) == parameter_checksum(c));
    REQUIRE(ra.curve.size() == 30);
    for (std::size_t i = 0; i < 30; ++i) CHECK(ra.curve[i].loss == rc.curve[i].loss);
    CHECK(ra.curve.back().loss < ra.curve.front().loss);

    auto d = Model<float>::init(small());
    TrainConfig mlm = tc;
    mlm.threads = 1;
    CHECK_NOTHROW(train(d, data, mlm, MaskMode::bidirectional_mlm));
}

TEST_CASE("a runaway learning rate is reported as divergence") {
    auto m = Model<float>::init(small());
    TrainConfig tc;
    tc.peak_lr = 1e4;
    tc.total_steps = 400;
    tc.global_batch = 4;
    tc.micro_batch = 4;
    tc.grad_clip = 0.0;
    tc.weight_decay = 0.0;
    tc.divergence_window = 5;
    CHECK_THROWS_AS(train(m, corpus(16, 3), tc, MaskMode::causal), DivergenceError);
}

TEST_CASE("adapters merge into the same function and leave the base untouched") {
    auto base = Model<double>::init(small());
    auto m = base;
    m.attach_adapters(4, 5);
    for (auto& [name, t] : m.adapters->tensors()) *t = Mat<double>::Random(t->rows(), t->cols()) * 0.3;
    const auto merged = adapter_merge(m);
    Rng rng(8);
    for (int probe = 0; probe < 100; ++probe) {
        const auto toks = random_tokens(rng, 1 + rng.below(20), 30);
        const auto a = forward(m, toks, MaskMode::causal, false), b = forward(merged, toks, MaskMode::causal, false);
        CHECK((a.logits - b.logits).cwiseAbs().maxCoeff() < 1e-6);
    }
    CHECK((forward(m, std::vector<TokenId>{1, 2, 3}, MaskMode::causal).logits -
           forward(base, std::vector<TokenId>{1, 2, 3}, MaskMode::causal).logits)
              .cwiseAbs()
              .maxCoeff() > 1e-6);
    CHECK_THROWS_AS(adapter_merge(merged, *m.adapters), ValidationError);
    CHECK_THROWS_AS(adapter_merge(base), ValidationError);

    auto bad = *m.adapters;
    bad.query[0].a = Mat<double>::Zero(16, 3);
    CHECK_THROWS_AS(adapter_merge(base, bad), ValidationError);

    // Adapter training moves only the adapters.
    auto f = Model<float>::init(small());
    const auto before = parameter_checksum(f);
    TrainConfig tc;
    tc.adapter_rank = 4;
    tc.total_steps = 20;
    tc.global_batch = 4;
    tc.micro_batch = 4;
    tc.peak_lr = 1e-2;
    train(f, corpus(16, 4), tc, MaskMode::causal);
    CHECK(parameter_checksum(f) == before);
    CHECK(f.adapters->value[0].b.cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("checkpoints and attention dumps round-trip") {
    const auto dir = std::filesystem::temp_directory_path() / "nep_nanolm_test";
    std::filesystem::create_directories(dir);
    auto m = Model<float>::init(small());
    m.attach_adapters(2, 3);
    save_checkpoint(dir / "m.bin", m, nlohmann::json{{"note", "x"}});
    nlohmann::json prov;
    const auto back = load_checkpoint(dir / "m.bin", &prov);
    CHECK(back.config == m.config);
    CHECK(parameter_checksum(back) == parameter_checksum(m));
    REQUIRE(back.adapters.has_value());
    CHECK(back.adapters->query[1].a == m.adapters->query[1].a);
    CHECK(prov.at("note") == "x");
    CHECK(checkpoint_id(dir / "m.bin") == checkpoint_id(dir / "m.bin"));

    const std::vector<TokenId> toks{1, 6, 9, 12};
    const auto dump = export_attention(m, toks);
    write_attention(dir / "a.json", dump);
    const auto read = read_attention(dir / "a.json");
    CHECK(read.tokens == toks);
    REQUIRE(read.layers.size() == 2);
    CHECK((read.layers[1][1] - dump.layers[1][1]).cwiseAbs().maxCoeff() < 1e-12);

    {
        std::ofstream junk(dir / "junk.bin");
        junk << "not a checkpoint";
    }
    CHECK_THROWS(load_checkpoint(dir / "junk.bin"));
    std::filesystem::remove_all(dir);
}
