#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <unsupported/Eigen/SpecialFunctions>

#include "nep/error.hpp"
#include "nep/hash.hpp"
#include "nep/nanolm.hpp"
#include "nep/rng.hpp"

namespace nep::lm {

using nlohmann::json;

namespace {

constexpr double kLnEps = 1e-5;

template <class S>
using ColVec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <class S>
Mat<S> normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
    Mat<S> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(stddev * rng.normal());
    return m;
}

template <class S>
struct LnCache {
    Mat<S> xhat;
    ColVec<S> rstd;
};

template <class S>
Mat<S> layer_norm(const Mat<S>& x, const Mat<S>& g, const Mat<S>& b, LnCache<S>& cache) {
    const auto rows = x.rows();
    cache.xhat.resize(rows, x.cols());
    cache.rstd.resize(rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const S mean = x.row(r).mean();
        auto centered = (x.row(r).array() - mean).eval();
        const S var = centered.square().mean();
        const S rstd = S(1) / std::sqrt(var + static_cast<S>(kLnEps));
        cache.rstd(r) = rstd;
        cache.xhat.row(r) = centered * rstd;
    }
    Mat<S> y = (cache.xhat.array().rowwise() * g.row(0).array()).matrix();
    y.rowwise() += b.row(0);
    return y;
}

// Returns dx; accumulates dg, db when they are non-null.
template <class S>
Mat<S> layer_norm_backward(const Mat<S>& dy, const Mat<S>& g, const LnCache<S>& cache, Mat<S>* dg, Mat<S>* db) {
    if (dg) dg->row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
    if (db) db->row(0) += dy.colwise().sum();
    const Mat<S> dxhat = (dy.array().rowwise() * g.row(0).array()).matrix();
    Mat<S> dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        const S m1 = dxhat.row(r).mean();
        const S m2 = (dxhat.row(r).array() * cache.xhat.row(r).array()).mean();
        dx.row(r) = cache.rstd(r) * (dxhat.row(r).array() - m1 - cache.xhat.row(r).array() * m2);
    }
    return dx;
}

template <class S>
struct LayerCache {
    std::vector<Eigen::Index> rows;  // query rows kept; empty means all
    std::vector<Eigen::Index> qseg;  // per-sequence offsets into the query rows
    LnCache<S> ln1;
    Mat<S> a, ar, q, k, v;
    Mat<S> aq, av;  // a * A for the adapters
    std::vector<Mat<S>> p;  // [head * n_seq + seq]
    Mat<S> o, h;
    LnCache<S> ln2;
    Mat<S> bn, u, cdf, g;  // g = gelu(u) = u * cdf
};

// Several sequences are packed one after another into the same rows; they
// only meet in the attention step, which runs per sequence.
template <class S>
struct Cache {
    std::vector<TokenId> tokens;
    std::vector<Eigen::Index> seg;  // sequence starts, plus the total length
    MaskMode mode = MaskMode::causal;
    std::vector<LayerCache<S>> layers;
    LnCache<S> lnf;
    Mat<S> f;  // final hidden states, one per kept row
    std::vector<Eigen::Index> rows;

    std::size_t n_seq() const { return seg.size() - 1; }
    std::span<const TokenId> seq(std::size_t s) const {
        return std::span<const TokenId>(tokens).subspan(static_cast<std::size_t>(seg[s]), static_cast<std::size_t>(seg[s + 1] - seg[s]));
    }
};

bool key_allowed(std::span<const TokenId> tokens, MaskMode mode, Eigen::Index query, Eigen::Index key) {
    if (tokens[static_cast<std::size_t>(key)] == special::kPad) return false;
    return mode == MaskMode::bidirectional_mlm || key <= query;
}

template <class S>
void check_input(const Model<S>& model, std::span<const TokenId> tokens) {
    if (tokens.empty()) throw ValidationError("forward: empty input");
    if (static_cast<int>(tokens.size()) > model.config.max_tokens)
        throw ValidationError("forward: input of " + std::to_string(tokens.size()) + " tokens exceeds max_tokens " +
                              std::to_string(model.config.max_tokens));
    for (TokenId t : tokens)
        if (t < 0 || t >= model.config.vocab_size) throw ValidationError("forward: token id " + std::to_string(t) + " out of range");
    if (tokens.front() == special::kPad) throw ValidationError("forward: input may not start with PAD");
}

template <class S>
Mat<S> gather_rows(const Mat<S>& m, const std::vector<Eigen::Index>& rows) {
    Mat<S> out(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
    return out;
}

// seqs are packed into one cache. keep (optional, over the packed rows) marks
// the rows whose final states are needed; the last layer then only computes
// queries and the MLP for those rows.
template <class S>
void forward_impl(const Model<S>& model, std::span<const std::span<const TokenId>> seqs, MaskMode mode,
                  Cache<S>& cache, std::span<const std::uint8_t> keep = {}) {
    const auto& cfg = model.config;
    const auto& P = model.params;
    cache.tokens.clear();
    cache.seg.assign(1, 0);
    for (const auto& t : seqs) {
        check_input(model, t);
        cache.tokens.insert(cache.tokens.end(), t.begin(), t.end());
        cache.seg.push_back(static_cast<Eigen::Index>(cache.tokens.size()));
    }
    if (seqs.empty()) throw ValidationError("forward: empty input");
    const auto len = static_cast<Eigen::Index>(cache.tokens.size());
    const std::size_t n_seq = cache.n_seq();
    const int dh = cfg.head_dim();
    const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    const S s = model.adapters ? static_cast<S>(model.adapters->scaling()) : S(0);

    cache.mode = mode;
    cache.layers.resize(P.layers.size());
    cache.rows.clear();
    for (std::size_t i = 0; i < keep.size(); ++i)
        if (keep[i]) cache.rows.push_back(static_cast<Eigen::Index>(i));

    Mat<S> x(len, cfg.d_model);
    for (std::size_t q = 0; q < n_seq; ++q)
        for (Eigen::Index t = cache.seg[q]; t < cache.seg[q + 1]; ++t)
            x.row(t) = P.tok_emb.row(cache.tokens[static_cast<std::size_t>(t)]) + P.pos_emb.row(t - cache.seg[q]);

    for (std::size_t l = 0; l < P.layers.size(); ++l) {
        const auto& L = P.layers[l];
        auto& c = cache.layers[l];
        const bool last = l + 1 == P.layers.size();
        c.rows = last ? cache.rows : std::vector<Eigen::Index>{};
        const bool pruned = !c.rows.empty();
        if (pruned) {
            c.qseg.assign(n_seq + 1, 0);
            std::size_t i = 0;
            for (std::size_t q = 0; q < n_seq; ++q) {
                while (i < c.rows.size() && c.rows[i] < cache.seg[q + 1]) ++i;
                c.qseg[q + 1] = static_cast<Eigen::Index>(i);
            }
        } else {
            c.qseg = cache.seg;
        }
        c.a = layer_norm(x, L.ln1_g, L.ln1_b, c.ln1);
        if (pruned) c.ar = gather_rows(c.a, c.rows);
        const Mat<S>& qa = pruned ? c.ar : c.a;
        c.q.noalias() = qa * L.wq;
        c.k.noalias() = c.a * L.wk;
        c.v.noalias() = c.a * L.wv;
        if (model.adapters) {
            const auto& ad = *model.adapters;
            c.aq.noalias() = qa * ad.query[l].a;
            c.av.noalias() = c.a * ad.value[l].a;
            c.q.noalias() += s * (c.aq * ad.query[l].b);
            c.v.noalias() += s * (c.av * ad.value[l].b);
        }
        c.p.resize(static_cast<std::size_t>(cfg.n_heads) * n_seq);
        c.o.resize(qa.rows(), cfg.d_model);
        for (std::size_t q = 0; q < n_seq; ++q) {
            const auto toks = cache.seq(q);
            const Eigen::Index k0 = cache.seg[q], nk = cache.seg[q + 1] - k0;
            const Eigen::Index q0 = c.qseg[q], nq = c.qseg[q + 1] - q0;
            const auto allowed = [&](Eigen::Index i, Eigen::Index j) {
                return key_allowed(toks, mode, pruned ? c.rows[static_cast<std::size_t>(q0 + i)] - k0 : i, j);
            };
            for (int h = 0; h < cfg.n_heads; ++h) {
                Mat<S> sc = (c.q.block(q0, h * dh, nq, dh) * c.k.block(k0, h * dh, nk, dh).transpose()) * inv_sqrt;
                for (Eigen::Index i = 0; i < nq; ++i)
                    for (Eigen::Index j = 0; j < nk; ++j)
                        if (!allowed(i, j)) sc(i, j) = -std::numeric_limits<S>::infinity();
                const ColVec<S> mx = sc.rowwise().maxCoeff();
                sc = (sc.colwise() - mx).array().exp().matrix();
                // exp(-inf) is not exactly 0 in the vectorized path.
                for (Eigen::Index i = 0; i < nq; ++i)
                    for (Eigen::Index j = 0; j < nk; ++j)
                        if (!allowed(i, j)) sc(i, j) = S(0);
                sc.array().colwise() /= sc.rowwise().sum().array();
                c.o.block(q0, h * dh, nq, dh).noalias() = sc * c.v.block(k0, h * dh, nk, dh);
                c.p[static_cast<std::size_t>(h) * n_seq + q] = std::move(sc);
            }
        }
        c.h = pruned ? gather_rows(x, c.rows) : x;
        c.h.noalias() += c.o * L.wo;
        c.bn = layer_norm(c.h, L.ln2_g, L.ln2_b, c.ln2);
        c.u.noalias() = c.bn * L.w1;
        c.u.rowwise() += L.b1.row(0);
        c.cdf = (S(0.5) * (S(1) + (c.u.array() * static_cast<S>(M_SQRT1_2)).erf())).matrix();
        c.g = (c.u.array() * c.cdf.array()).matrix();
        x = c.h;
        x.noalias() += c.g * L.w2;
        x.rowwise() += L.b2.row(0);
    }
    cache.f = layer_norm(x, P.lnf_g, P.lnf_b, cache.lnf);
}

template <class S>
void forward_impl(const Model<S>& model, std::span<const TokenId> tokens, MaskMode mode, Cache<S>& cache,
                  std::span<const std::uint8_t> keep = {}) {
    const std::span<const TokenId> one[] = {tokens};
    forward_impl(model, std::span<const std::span<const TokenId>>(one), mode, cache, keep);
}

template <class S>
Mat<S>* find_tensor(std::vector<std::pair<std::string, Mat<S>*>>& list, const std::string& name) {
    for (auto& [n, m] : list)
        if (n == name) return m;
    return nullptr;
}

// Backpropagates dF (gradient w.r.t. the final hidden states) through the
// cached forward pass into grads.
template <class S>
void backward_impl(const Model<S>& model, const Cache<S>& cache, const Mat<S>& df, Gradients<S>& grads,
                   bool base_trainable) {
    const auto& cfg = model.config;
    const auto& P = model.params;
    auto& G = grads.base;
    const auto len = static_cast<Eigen::Index>(cache.tokens.size());
    const std::size_t n_seq = cache.n_seq();
    const int dh = cfg.head_dim();
    const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    const S s = model.adapters ? static_cast<S>(model.adapters->scaling()) : S(0);
    const bool bt = base_trainable;

    Mat<S> dx = layer_norm_backward(df, P.lnf_g, cache.lnf, bt ? &G.lnf_g : nullptr, bt ? &G.lnf_b : nullptr);

    for (std::size_t l = P.layers.size(); l-- > 0;) {
        const auto& L = P.layers[l];
        auto& GL = G.layers[l];
        const auto& c = cache.layers[l];
        const bool pruned = !c.rows.empty();
        const Mat<S>& qa = pruned ? c.ar : c.a;

        // x_out = h + gelu(bn * w1 + b1) * w2 + b2
        if (bt) {
            GL.w2.noalias() += c.g.transpose() * dx;
            GL.b2.row(0) += dx.colwise().sum();
        }
        Mat<S> du = dx * L.w2.transpose();
        du.array() *= c.cdf.array() + c.u.array() * (static_cast<S>(-0.5) * c.u.array().square()).exp() * static_cast<S>(0.3989422804014327);
        if (bt) {
            GL.w1.noalias() += c.bn.transpose() * du;
            GL.b1.row(0) += du.colwise().sum();
        }
        const Mat<S> dbn = du * L.w1.transpose();
        Mat<S> dh_res = dx + layer_norm_backward(dbn, L.ln2_g, c.ln2, bt ? &GL.ln2_g : nullptr, bt ? &GL.ln2_b : nullptr);

        // h = x_in + o * wo
        if (bt) GL.wo.noalias() += c.o.transpose() * dh_res;
        const Mat<S> d_o = dh_res * L.wo.transpose();

        Mat<S> dq(c.q.rows(), cfg.d_model), dk(len, cfg.d_model), dv(len, cfg.d_model);
        for (std::size_t q = 0; q < n_seq; ++q) {
            const Eigen::Index k0 = cache.seg[q], nk = cache.seg[q + 1] - k0;
            const Eigen::Index q0 = c.qseg[q], nq = c.qseg[q + 1] - q0;
            if (nq == 0) {
                dk.middleRows(k0, nk).setZero();
                dv.middleRows(k0, nk).setZero();
                continue;
            }
            for (int h = 0; h < cfg.n_heads; ++h) {
                const auto& p = c.p[static_cast<std::size_t>(h) * n_seq + q];
                const auto doh = d_o.block(q0, h * dh, nq, dh);
                Mat<S> dp = doh * c.v.block(k0, h * dh, nk, dh).transpose();
                dv.block(k0, h * dh, nk, dh).noalias() = p.transpose() * doh;
                // Softmax Jacobian row by row; masked entries have p = 0.
                for (Eigen::Index i = 0; i < nq; ++i) {
                    const S dot = p.row(i).dot(dp.row(i));
                    dp.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix();
                }
                dp *= inv_sqrt;
                dq.block(q0, h * dh, nq, dh).noalias() = dp * c.k.block(k0, h * dh, nk, dh);
                dk.block(k0, h * dh, nk, dh).noalias() = dp.transpose() * c.q.block(q0, h * dh, nq, dh);
            }
        }

        Mat<S> da = dk * L.wk.transpose();
        da.noalias() += dv * L.wv.transpose();
        Mat<S> daq_rows = dq * L.wq.transpose();
        if (bt) {
            GL.wq.noalias() += qa.transpose() * dq;
            GL.wk.noalias() += c.a.transpose() * dk;
            GL.wv.noalias() += c.a.transpose() * dv;
        }
        if (model.adapters) {
            const auto& ad = *model.adapters;
            auto& gad = *grads.adapters;
            // q += s * (a * A) * B
            gad.query[l].b.noalias() += s * (c.aq.transpose() * dq);
            const Mat<S> daq = s * (dq * ad.query[l].b.transpose());
            gad.query[l].a.noalias() += qa.transpose() * daq;
            daq_rows.noalias() += daq * ad.query[l].a.transpose();
            gad.value[l].b.noalias() += s * (c.av.transpose() * dv);
            const Mat<S> dav = s * (dv * ad.value[l].b.transpose());
            gad.value[l].a.noalias() += c.a.transpose() * dav;
            da.noalias() += dav * ad.value[l].a.transpose();
        }
        Mat<S> dres = dh_res;
        if (pruned) {
            dres.setZero(len, cfg.d_model);
            for (std::size_t i = 0; i < c.rows.size(); ++i) {
                const auto r = static_cast<Eigen::Index>(i);
                da.row(c.rows[i]) += daq_rows.row(r);
                dres.row(c.rows[i]) = dh_res.row(r);
            }
        } else {
            da += daq_rows;
        }
        dx = dres + layer_norm_backward(da, L.ln1_g, c.ln1, bt ? &GL.ln1_g : nullptr, bt ? &GL.ln1_b : nullptr);
    }

    if (bt) {
        for (std::size_t q = 0; q < n_seq; ++q)
            for (Eigen::Index t = cache.seg[q]; t < cache.seg[q + 1]; ++t) {
                G.tok_emb.row(cache.tokens[static_cast<std::size_t>(t)]) += dx.row(t);
                G.pos_emb.row(t - cache.seg[q]) += dx.row(t);
            }
    }
}

template <class S, class Self>
auto collect_params(Self& p) {
    using Ptr = std::conditional_t<std::is_const_v<Self>, const Mat<S>*, Mat<S>*>;
    std::vector<std::pair<std::string, Ptr>> out;
    out.emplace_back("tok_emb", &p.tok_emb);
    out.emplace_back("pos_emb", &p.pos_emb);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        auto& L = p.layers[l];
        const std::string pre = "layers." + std::to_string(l) + ".";
        out.emplace_back(pre + "ln1.g", &L.ln1_g);
        out.emplace_back(pre + "ln1.b", &L.ln1_b);
        out.emplace_back(pre + "attn.wq", &L.wq);
        out.emplace_back(pre + "attn.wk", &L.wk);
        out.emplace_back(pre + "attn.wv", &L.wv);
        out.emplace_back(pre + "attn.wo", &L.wo);
        out.emplace_back(pre + "ln2.g", &L.ln2_g);
        out.emplace_back(pre + "ln2.b", &L.ln2_b);
        out.emplace_back(pre + "mlp.w1", &L.w1);
        out.emplace_back(pre + "mlp.b1", &L.b1);
        out.emplace_back(pre + "mlp.w2", &L.w2);
        out.emplace_back(pre + "mlp.b2", &L.b2);
    }
    out.emplace_back("ln_f.g", &p.lnf_g);
    out.emplace_back("ln_f.b", &p.lnf_b);
    return out;
}

template <class S, class Self>
auto collect_adapters(Self& a) {
    using Ptr = std::conditional_t<std::is_const_v<Self>, const Mat<S>*, Mat<S>*>;
    std::vector<std::pair<std::string, Ptr>> out;
    for (std::size_t l = 0; l < a.query.size(); ++l) {
        const std::string pre = "layers." + std::to_string(l) + ".attn.";
        out.emplace_back(pre + "wq.lora_a", &a.query[l].a);
        out.emplace_back(pre + "wq.lora_b", &a.query[l].b);
        out.emplace_back(pre + "wv.lora_a", &a.value[l].a);
        out.emplace_back(pre + "wv.lora_b", &a.value[l].b);
    }
    return out;
}

template <class S>
Params<S> zeros_like(const Params<S>& p) {
    Params<S> z = p;
    for (auto& [name, m] : z.tensors()) m->setZero();
    return z;
}

template <class S>
void pack(std::span<const Example> exs, std::vector<std::span<const TokenId>>& seqs, std::vector<std::uint8_t>& keep) {
    seqs.clear();
    keep.clear();
    for (const auto& ex : exs) {
        if (ex.mask.size() != ex.input.size() || ex.targets.size() != ex.input.size())
            throw ValidationError("example: input, targets and mask disagree in length");
        seqs.emplace_back(ex.input);
        keep.insert(keep.end(), ex.mask.begin(), ex.mask.end());
    }
}

// Sum of masked NLL over the examples.
template <class S>
double masked_nll(const Model<S>& model, std::span<const Example> exs, MaskMode mode) {
    std::vector<std::span<const TokenId>> seqs;
    std::vector<std::uint8_t> keep;
    pack<S>(exs, seqs, keep);
    Cache<S> cache;
    forward_impl(model, std::span<const std::span<const TokenId>>(seqs), mode, cache, keep);
    if (cache.rows.empty()) return 0.0;
    const Mat<S> logits = cache.f * model.params.tok_emb.transpose();
    double total = 0.0;
    Eigen::Index k = 0;
    for (const auto& ex : exs)
        for (std::size_t r = 0; r < ex.mask.size(); ++r) {
            if (!ex.mask[r]) continue;
            const auto row = logits.row(k++);
            const S mx = row.maxCoeff();
            const double lse = static_cast<double>(mx) + std::log(static_cast<double>((row.array() - mx).exp().sum()));
            total += lse - static_cast<double>(row(ex.targets[r]));
        }
    return total;
}

template <class S>
double masked_nll(const Model<S>& model, const Example& ex, MaskMode mode) {
    return masked_nll(model, std::span<const Example>(&ex, 1), mode);
}

}  // namespace

std::string_view to_string(MaskMode mode) { return mode == MaskMode::causal ? "causal" : "bidirectional_mlm"; }

MaskMode parse_mask_mode(std::string_view name) {
    if (name == "causal") return MaskMode::causal;
    if (name == "bidirectional_mlm") return MaskMode::bidirectional_mlm;
    throw ConfigError("unknown mask mode '" + std::string(name) + "'");
}

void validate(const ModelConfig& c) {
    if (c.vocab_size <= special::kCount) throw ConfigError("model.vocab_size must exceed the special-token prefix");
    if (c.d_model < 1 || c.n_heads < 1 || c.n_layers < 1) throw ConfigError("model dimensions must be positive");
    if (c.d_model % c.n_heads != 0) throw ConfigError("model.d_model must be divisible by model.n_heads");
    if (c.max_tokens < 1) throw ConfigError("model.max_tokens must be >= 1");
    if (!(c.init_std > 0.0)) throw ConfigError("model.init_std must be > 0");
}

json to_json(const ModelConfig& c) {
    return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model}, {"n_layers", c.n_layers}, {"n_heads", c.n_heads},
                {"max_tokens", c.max_tokens}, {"init_std", c.init_std},   {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.max_tokens = j.at("max_tokens").get<int>();
    c.init_std = j.at("init_std").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

template <class S>
std::vector<std::pair<std::string, Mat<S>*>> Params<S>::tensors() {
    return collect_params<S>(*this);
}
template <class S>
std::vector<std::pair<std::string, const Mat<S>*>> Params<S>::tensors() const {
    return collect_params<S>(*this);
}
template <class S>
std::vector<std::pair<std::string, Mat<S>*>> AdapterSet<S>::tensors() {
    return collect_adapters<S>(*this);
}
template <class S>
std::vector<std::pair<std::string, const Mat<S>*>> AdapterSet<S>::tensors() const {
    return collect_adapters<S>(*this);
}

template <class S>
Model<S> Model<S>::init(const ModelConfig& config) {
    validate(config);
    Model<S> m;
    m.config = config;
    Rng rng(config.seed);
    const int d = config.d_model;
    const double std = config.init_std;
    // Residual output maps are shrunk with depth.
    const double proj_std = std / std::sqrt(2.0 * config.n_layers);
    auto& P = m.params;
    P.tok_emb = normal_matrix<S>(config.vocab_size, d, std, rng);
    P.pos_emb = normal_matrix<S>(config.max_tokens, d, std, rng);
    for (int l = 0; l < config.n_layers; ++l) {
        LayerParams<S> L;
        L.ln1_g = Mat<S>::Ones(1, d);
        L.ln1_b = Mat<S>::Zero(1, d);
        L.wq = normal_matrix<S>(d, d, std, rng);
        L.wk = normal_matrix<S>(d, d, std, rng);
        L.wv = normal_matrix<S>(d, d, std, rng);
        L.wo = normal_matrix<S>(d, d, proj_std, rng);
        L.ln2_g = Mat<S>::Ones(1, d);
        L.ln2_b = Mat<S>::Zero(1, d);
        L.w1 = normal_matrix<S>(d, 4 * d, std, rng);
        L.b1 = Mat<S>::Zero(1, 4 * d);
        L.w2 = normal_matrix<S>(4 * d, d, proj_std, rng);
        L.b2 = Mat<S>::Zero(1, d);
        P.layers.push_back(std::move(L));
    }
    P.lnf_g = Mat<S>::Ones(1, d);
    P.lnf_b = Mat<S>::Zero(1, d);
    return m;
}

template <class S>
void Model<S>::attach_adapters(int rank, std::uint64_t seed) {
    if (rank < 1) throw ConfigError("adapter rank must be >= 1");
    Rng rng(seed);
    AdapterSet<S> ad;
    ad.rank = rank;
    ad.alpha = 2.0 * rank;
    const int d = config.d_model;
    const double a_std = 1.0 / std::sqrt(static_cast<double>(d));
    for (int l = 0; l < config.n_layers; ++l) {
        ad.query.push_back({normal_matrix<S>(d, rank, a_std, rng), Mat<S>::Zero(rank, d)});
        ad.value.push_back({normal_matrix<S>(d, rank, a_std, rng), Mat<S>::Zero(rank, d)});
    }
    adapters = std::move(ad);
}

template <class S>
template <class T>
Model<T> Model<S>::cast() const {
    Model<T> out;
    out.config = config;
    out.merged_adapters = merged_adapters;
    out.params = Model<T>::init(config).params;
    auto dst = out.params.tensors();
    const auto src = params.tensors();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<T>();
    if (adapters) {
        AdapterSet<T> ad;
        ad.rank = adapters->rank;
        ad.alpha = adapters->alpha;
        for (const auto& p : adapters->query) ad.query.push_back({p.a.template cast<T>(), p.b.template cast<T>()});
        for (const auto& p : adapters->value) ad.value.push_back({p.a.template cast<T>(), p.b.template cast<T>()});
        out.adapters = std::move(ad);
    }
    return out;
}

template <class S>
std::uint64_t adapter_fingerprint(const AdapterSet<S>& adapters) {
    Fnv1a h;
    h.update(&adapters.rank, sizeof adapters.rank);
    h.update(&adapters.alpha, sizeof adapters.alpha);
    for (const auto& [name, m] : adapters.tensors()) h.update(m->data(), sizeof(S) * static_cast<std::size_t>(m->size()));
    return h.digest();
}

template <class S>
std::uint64_t parameter_checksum(const Model<S>& model) {
    Fnv1a h;
    for (const auto& [name, m] : model.params.tensors()) {
        h.update(name);
        h.update(m->data(), sizeof(S) * static_cast<std::size_t>(m->size()));
    }
    return h.digest();
}

template <class S>
ForwardResult<S> forward(const Model<S>& model, std::span<const TokenId> tokens, MaskMode mode, bool keep_attention) {
    Cache<S> cache;
    forward_impl(model, tokens, mode, cache);
    ForwardResult<S> out;
    out.logits.noalias() = cache.f * model.params.tok_emb.transpose();
    out.hidden = std::move(cache.f);
    if (keep_attention)
        for (auto& c : cache.layers) out.attention.push_back(std::move(c.p));
    return out;
}

std::size_t Example::n_masked() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }

Example make_causal_example(const TrainingInstance& instance) {
    std::vector<TokenId> full = instance.context_tokens;
    full.insert(full.end(), instance.response_tokens.begin(), instance.response_tokens.end());
    if (full.size() < 2) throw ValidationError("instance too short for next-token supervision");
    Example ex;
    ex.input.assign(full.begin(), full.end() - 1);
    ex.targets.assign(full.begin() + 1, full.end());
    ex.mask.assign(instance.loss_mask.begin() + 1, instance.loss_mask.end());
    return ex;
}

Example make_mlm_example(const TrainingInstance& instance, std::uint64_t seed, double rate) {
    const auto& ctx = instance.context_tokens;
    if (ctx.size() < 2) throw ValidationError("context too short for masked-token prediction");
    Rng rng(seed);
    Example ex;
    ex.input = ctx;
    ex.targets.assign(ctx.size(), special::kPad);
    ex.mask.assign(ctx.size(), 0);
    for (std::size_t i = 1; i < ctx.size(); ++i) {
        if (rng.uniform() < rate) ex.mask[i] = 1;
    }
    if (ex.n_masked() == 0) ex.mask[1 + static_cast<std::size_t>(rng.below(ctx.size() - 1))] = 1;
    for (std::size_t i = 0; i < ctx.size(); ++i) {
        if (!ex.mask[i]) continue;
        ex.targets[i] = ctx[i];
        ex.input[i] = special::kMask;
    }
    return ex;
}

template <class S>
double loss(const Mat<S>& logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask) {
    if (static_cast<std::size_t>(logits.rows()) != targets.size() || targets.size() != mask.size())
        throw ValidationError("loss: logits, targets and mask disagree in length");
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t r = 0; r < mask.size(); ++r) {
        if (!mask[r]) continue;
        const auto row = logits.row(static_cast<Eigen::Index>(r)).template cast<double>();
        const double mx = row.maxCoeff();
        const double lse = mx + std::log((row.array() - mx).exp().sum());
        total += lse - row(targets[r]);
        ++n;
    }
    if (n == 0) throw ValidationError("loss: mask selects no positions");
    return total / static_cast<double>(n);
}

template <class S>
Gradients<S> Gradients<S>::zeros_like(const Model<S>& model) {
    Gradients<S> g;
    g.base = lm::zeros_like(model.params);
    if (model.adapters) {
        g.adapters = *model.adapters;
        for (auto& [name, m] : g.adapters->tensors()) m->setZero();
    }
    return g;
}

template <class S>
void Gradients<S>::set_zero() {
    for (auto& [name, m] : tensors(true)) m->setZero();
}

template <class S>
void Gradients<S>::add(const Gradients& other) {
    auto mine = tensors(true);
    auto theirs = const_cast<Gradients&>(other).tensors(true);
    for (std::size_t i = 0; i < mine.size(); ++i) *mine[i].second += *theirs[i].second;
}

template <class S>
std::vector<std::pair<std::string, Mat<S>*>> Gradients<S>::tensors(bool include_base) {
    std::vector<std::pair<std::string, Mat<S>*>> out;
    if (include_base) out = base.tensors();
    if (adapters) {
        auto ad = adapters->tensors();
        out.insert(out.end(), ad.begin(), ad.end());
    }
    return out;
}

template <class S>
double loss_and_grad(const Model<S>& model, std::span<const Example> exs, MaskMode mode, S scale, Gradients<S>& grads,
                     const BackwardOptions& options) {
    if (!options.corrupt_tensor.empty()) {
        auto local = Gradients<S>::zeros_like(model);
        BackwardOptions plain = options;
        plain.corrupt_tensor.clear();
        const double nll = loss_and_grad(model, exs, mode, scale, local, plain);
        auto list = local.tensors(true);
        Mat<S>* target = find_tensor(list, options.corrupt_tensor);
        if (!target) throw ValidationError("corrupt_tensor: no tensor named '" + options.corrupt_tensor + "'");
        *target = -*target;
        grads.add(local);
        return nll;
    }

    std::size_t n = 0;
    for (const auto& ex : exs) n += ex.n_masked();
    if (n == 0) throw ValidationError("loss_and_grad: mask selects no positions");
    std::vector<std::span<const TokenId>> seqs;
    std::vector<std::uint8_t> keep;
    pack<S>(exs, seqs, keep);
    Cache<S> cache;
    forward_impl(model, std::span<const std::span<const TokenId>>(seqs), mode, cache, keep);
    const auto& emb = model.params.tok_emb;
    // Softmax over the vocabulary for every kept row at once.
    Mat<S> dlogits = cache.f * emb.transpose();
    double nll = 0.0;
    Eigen::Index k = 0;
    for (const auto& ex : exs)
        for (std::size_t r = 0; r < ex.mask.size(); ++r) {
            if (!ex.mask[r]) continue;
            auto row = dlogits.row(k++);
            const S mx = row.maxCoeff();
            const double target_logit = static_cast<double>(row(ex.targets[r]));
            row.array() = (row.array() - mx).exp();
            const S z = row.sum();
            nll += static_cast<double>(mx) + std::log(static_cast<double>(z)) - target_logit;
            row /= z;
            row(ex.targets[r]) -= S(1);
        }
    dlogits *= scale;
    const Mat<S> df = dlogits * emb;
    if (options.base_trainable) grads.base.tok_emb.noalias() += dlogits.transpose() * cache.f;
    backward_impl(model, cache, df, grads, options.base_trainable);
    return nll;
}

template <class S>
double loss_and_grad(const Model<S>& model, const Example& ex, MaskMode mode, S scale, Gradients<S>& grads,
                     const BackwardOptions& options) {
    return loss_and_grad(model, std::span<const Example>(&ex, 1), mode, scale, grads, options);
}

template <class S>
double evaluate_loss(const Model<S>& model, std::span<const TrainingInstance> instances) {
    if (instances.empty()) throw ValidationError("evaluate_loss: no instances");
    constexpr std::size_t kChunk = 64;
    double total = 0.0;
    std::size_t n = 0;
    std::vector<Example> exs;
    for (std::size_t i = 0; i < instances.size(); i += kChunk) {
        exs.clear();
        for (std::size_t j = i; j < std::min(instances.size(), i + kChunk); ++j) {
            exs.push_back(make_causal_example(instances[j]));
            n += exs.back().n_masked();
        }
        total += masked_nll(model, std::span<const Example>(exs), MaskMode::causal);
    }
    return total / static_cast<double>(n);
}

GradCheckResult grad_check(const Model<double>& model, const TrainingInstance& instance, double epsilon,
                           std::size_t coordinates, std::uint64_t seed, const BackwardOptions& options,
                           MaskMode mode) {
    const Example ex =
        mode == MaskMode::causal ? make_causal_example(instance) : make_mlm_example(instance, seed, 0.15);
    const double inv_n = 1.0 / static_cast<double>(ex.n_masked());

    auto analytic = Gradients<double>::zeros_like(model);
    loss_and_grad(model, ex, mode, inv_n, analytic, options);

    Model<double> probe = model;
    auto params = probe.params.tensors();
    auto grads = analytic.tensors(true);
    if (probe.adapters) {
        auto ad = probe.adapters->tensors();
        params.insert(params.end(), ad.begin(), ad.end());
    }
    // Frozen base tensors are not probed; their analytic gradient is not computed.
    if (!options.base_trainable) {
        const auto n_base = probe.params.tensors().size();
        params.erase(params.begin(), params.begin() + static_cast<std::ptrdiff_t>(n_base));
        grads.erase(grads.begin(), grads.begin() + static_cast<std::ptrdiff_t>(n_base));
    }
    if (params.empty()) throw ValidationError("grad_check: no trainable tensors");

    Rng rng(seed);
    std::vector<std::pair<std::size_t, Eigen::Index>> coords;
    std::size_t total_size = 0;
    for (std::size_t t = 0; t < params.size(); ++t) {
        total_size += static_cast<std::size_t>(params[t].second->size());
        coords.emplace_back(t, static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(params[t].second->size()))));
    }
    while (coords.size() < coordinates) {
        std::uint64_t flat = rng.below(total_size);
        std::size_t t = 0;
        while (flat >= static_cast<std::uint64_t>(params[t].second->size())) flat -= static_cast<std::uint64_t>(params[t++].second->size());
        coords.emplace_back(t, static_cast<Eigen::Index>(flat));
    }

    GradCheckResult result;
    for (const auto& [t, idx] : coords) {
        double& w = params[t].second->data()[idx];
        const double saved = w;
        w = saved + epsilon;
        const double up = masked_nll(probe, ex, mode) * inv_n;
        w = saved - epsilon;
        const double down = masked_nll(probe, ex, mode) * inv_n;
        w = saved;
        const double numeric = (up - down) / (2.0 * epsilon);
        const double a = grads[t].second->data()[idx];
        const double denom = std::max(std::abs(a) + std::abs(numeric), 1e-8);
        result.max_rel_error = std::max(result.max_rel_error, std::abs(a - numeric) / denom);
        ++result.coordinates;
        if (std::find(result.groups.begin(), result.groups.end(), params[t].first) == result.groups.end())
            result.groups.push_back(params[t].first);
    }
    return result;
}

template <class S>
Model<S> adapter_merge(const Model<S>& base, const AdapterSet<S>& ad) {
    Model<S> out = base;
    out.adapters.reset();
    if (ad.rank == 0 && ad.query.empty() && ad.value.empty()) return out;
    const int d = base.config.d_model;
    const auto n_layers = static_cast<std::size_t>(base.config.n_layers);
    if (ad.rank < 1 || ad.query.size() != n_layers || ad.value.size() != n_layers)
        throw ValidationError("adapter_merge: adapter set does not match the model layers");
    for (const auto* list : {&ad.query, &ad.value})
        for (const auto& p : *list)
            if (p.a.rows() != d || p.a.cols() != ad.rank || p.b.rows() != ad.rank || p.b.cols() != d)
                throw ValidationError("adapter_merge: rank mismatch (expected rank " + std::to_string(ad.rank) + ")");
    const std::uint64_t fp = adapter_fingerprint(ad);
    if (std::find(base.merged_adapters.begin(), base.merged_adapters.end(), fp) != base.merged_adapters.end())
        throw ValidationError("adapter_merge: this adapter set is already merged into the weights");
    const S s = static_cast<S>(ad.scaling());
    for (std::size_t l = 0; l < n_layers; ++l) {
        out.params.layers[l].wq.noalias() += s * (ad.query[l].a * ad.query[l].b);
        out.params.layers[l].wv.noalias() += s * (ad.value[l].a * ad.value[l].b);
    }
    out.merged_adapters.push_back(fp);
    return out;
}

template <class S>
Model<S> adapter_merge(const Model<S>& model) {
    if (!model.adapters) throw ValidationError("adapter_merge: model has no adapters attached");
    Model<S> base = model;
    base.adapters.reset();
    return adapter_merge(base, *model.adapters);
}

template <class S>
AttentionDump export_attention(const Model<S>& model, std::span<const TokenId> tokens, MaskMode mode) {
    auto fr = forward(model, tokens, mode, true);
    AttentionDump dump;
    dump.tokens.assign(tokens.begin(), tokens.end());
    dump.mode = mode;
    for (const auto& layer : fr.attention) {
        std::vector<Mat<double>> heads;
        for (const auto& p : layer) heads.push_back(p.template cast<double>());
        dump.layers.push_back(std::move(heads));
    }
    return dump;
}

void write_attention(const std::filesystem::path& path, const AttentionDump& dump) {
    json j;
    j["format"] = "nep-attention-v1";
    j["tokens"] = dump.tokens;
    j["mask_mode"] = to_string(dump.mode);
    j["layers"] = json::array();
    for (const auto& layer : dump.layers) {
        json heads = json::array();
        for (const auto& m : layer) {
            json rows = json::array();
            for (Eigen::Index r = 0; r < m.rows(); ++r)
                rows.push_back(std::vector<double>(m.row(r).data(), m.row(r).data() + m.cols()));
            heads.push_back(std::move(rows));
        }
        j["layers"].push_back(std::move(heads));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write attention dump " + path.string());
    out << j.dump() << '\n';
}

AttentionDump read_attention(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open attention dump " + path.string());
    const json j = json::parse(in);
    if (j.at("format") != "nep-attention-v1") throw ValidationError("not an attention dump");
    AttentionDump dump;
    dump.tokens = j.at("tokens").get<std::vector<TokenId>>();
    dump.mode = parse_mask_mode(j.at("mask_mode").get<std::string>());
    for (const auto& heads : j.at("layers")) {
        std::vector<Mat<double>> layer;
        for (const auto& rows : heads) {
            const auto n = static_cast<Eigen::Index>(rows.size());
            Mat<double> m(n, n);
            for (Eigen::Index r = 0; r < n; ++r)
                for (Eigen::Index c = 0; c < n; ++c) m(r, c) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].get<double>();
            layer.push_back(std::move(m));
        }
        dump.layers.push_back(std::move(layer));
    }
    return dump;
}

namespace {

constexpr char kMagic[8] = {'N', 'E', 'P', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void write_le(std::ostream& out, T value) {
    static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");
    out.write(reinterpret_cast<const char*>(&value), sizeof value);
}

template <class T>
T read_le(std::istream& in) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof value);
    if (!in) throw ValidationError("checkpoint truncated");
    return value;
}

}  // namespace

template <class S>
void save_checkpoint(const std::filesystem::path& path, const Model<S>& model, const json& provenance) {
    json header;
    header["config"] = to_json(model.config);
    header["dtype"] = sizeof(S) == 4 ? "f32" : "f64";
    header["merged_adapters"] = model.merged_adapters;
    header["provenance"] = provenance;
    auto tensors = model.params.tensors();
    if (model.adapters) {
        header["adapters"] = {{"rank", model.adapters->rank}, {"alpha", model.adapters->alpha}};
        auto ad = model.adapters->tensors();
        tensors.insert(tensors.end(), ad.begin(), ad.end());
    } else {
        header["adapters"] = nullptr;
    }
    header["tensors"] = json::array();
    for (const auto& [name, m] : tensors) header["tensors"].push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}});
    const std::string text = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof kMagic);
    write_le<std::uint32_t>(out, kCheckpointVersion);
    write_le<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, m] : tensors)
        out.write(reinterpret_cast<const char*>(m->data()), static_cast<std::streamsize>(sizeof(S) * static_cast<std::size_t>(m->size())));
    if (!out) throw ValidationError("failed writing checkpoint " + path.string());
}

Model<float> load_checkpoint(const std::filesystem::path& path, json* provenance) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw ValidationError("not a checkpoint: " + path.string());
    const auto version = read_le<std::uint32_t>(in);
    if (version != kCheckpointVersion) throw ValidationError("unsupported checkpoint version " + std::to_string(version));
    const auto header_len = read_le<std::uint64_t>(in);
    std::string text(header_len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(header_len));
    const json header = json::parse(text);
    const bool f64 = header.at("dtype") == "f64";

    auto model = Model<float>::init(model_config_from_json(header.at("config")));
    model.merged_adapters = header.at("merged_adapters").get<std::vector<std::uint64_t>>();
    if (!header.at("adapters").is_null()) {
        model.attach_adapters(header["adapters"].at("rank").get<int>(), 0);
        model.adapters->alpha = header["adapters"].at("alpha").get<double>();
    }
    auto tensors = model.params.tensors();
    if (model.adapters) {
        auto ad = model.adapters->tensors();
        tensors.insert(tensors.end(), ad.begin(), ad.end());
    }
    const auto& listed = header.at("tensors");
    if (listed.size() != tensors.size()) throw ValidationError("checkpoint tensor count does not match its config");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        auto& m = *tensors[i].second;
        if (listed[i].at("name") != tensors[i].first || listed[i].at("rows").get<Eigen::Index>() != m.rows() ||
            listed[i].at("cols").get<Eigen::Index>() != m.cols())
            throw ValidationError("checkpoint tensor '" + tensors[i].first + "' has an unexpected name or shape");
        for (Eigen::Index k = 0; k < m.size(); ++k)
            m.data()[k] = f64 ? static_cast<float>(read_le<double>(in)) : read_le<float>(in);
    }
    if (provenance) *provenance = header.at("provenance");
    return model;
}

std::uint64_t checkpoint_id(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open checkpoint " + path.string());
    Fnv1a h;
    char buf[1 << 16];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) h.update(buf, static_cast<std::size_t>(in.gcount()));
    return h.digest();
}

#define NEP_INSTANTIATE(S)                                                                                       \
    template struct Params<S>;                                                                                   \
    template struct AdapterSet<S>;                                                                               \
    template struct Model<S>;                                                                                    \
    template struct Gradients<S>;                                                                                \
    template Model<float> Model<S>::cast<float>() const;                                                         \
    template Model<double> Model<S>::cast<double>() const;                                                       \
    template std::uint64_t adapter_fingerprint(const AdapterSet<S>&);                                            \
    template std::uint64_t parameter_checksum(const Model<S>&);                                                  \
    template ForwardResult<S> forward(const Model<S>&, std::span<const TokenId>, MaskMode, bool);                \
    template double loss<S>(const Mat<S>&, std::span<const TokenId>, std::span<const std::uint8_t>);             \
    template double loss_and_grad(const Model<S>&, const Example&, MaskMode, S, Gradients<S>&,                   \
                                  const BackwardOptions&);                                                       \
    template double loss_and_grad(const Model<S>&, std::span<const Example>, MaskMode, S, Gradients<S>&,         \
                                  const BackwardOptions&);                                                       \
    template double evaluate_loss(const Model<S>&, std::span<const TrainingInstance>);                           \
    template Model<S> adapter_merge(const Model<S>&);                                                            \
    template Model<S> adapter_merge(const Model<S>&, const AdapterSet<S>&);                                      \
    template AttentionDump export_attention(const Model<S>&, std::span<const TokenId>, MaskMode);                \
    template void save_checkpoint(const std::filesystem::path&, const Model<S>&, const json&);

NEP_INSTANTIATE(float)
NEP_INSTANTIATE(double)

#undef NEP_INSTANTIATE

}  // namespace nep::lm
