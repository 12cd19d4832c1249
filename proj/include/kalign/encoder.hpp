#pragma once
// Small causal transformer over dense Eigen matrices, templated on the
// scalar type: float for training, double for the finite-difference test
// harness. Pre-norm blocks (RMSNorm), learned positional embeddings,
// SwiGLU feed-forward, weight-tied output projection.
//
// Gradients come from explicit reverse passes against a per-sequence
// activation trace; there is no autograd graph. Low-rank adapters can be
// attached to the feed-forward and/or attention projections; with adapters
// active the base weights are frozen and only adapter tensors train.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kalign/common.hpp"
#include "kalign/text_pipeline.hpp"

namespace kalign {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Row = Eigen::Matrix<S, 1, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
    std::int32_t n_layers = 4;
    std::int32_t d_model = 128;
    std::int32_t n_heads = 4;
    std::int32_t d_ffn = 512;
    std::int32_t max_seq_len = 256;
    std::int32_t vocab_size = 0;
    std::uint64_t seed = 0;

    void validate() const {
        require(n_layers >= 1 && d_model >= 1 && n_heads >= 1 && d_ffn >= 1 && max_seq_len >= 3,
                "ModelConfig: all dimensions must be positive");
        require(d_model % n_heads == 0, "ModelConfig: d_model must be divisible by n_heads");
        require(vocab_size >= Vocab::kNumSpecials, "ModelConfig: vocab_size too small");
    }
    bool operator==(const ModelConfig&) const = default;
};

enum class AdapterTarget { Ffn, Att, AttFfn };

inline const char* adapter_target_name(AdapterTarget t) {
    switch (t) {
        case AdapterTarget::Ffn: return "ffn";
        case AdapterTarget::Att: return "att";
        default: return "att-ffn";
    }
}

inline AdapterTarget adapter_target_from_name(const std::string& s) {
    if (s == "ffn") return AdapterTarget::Ffn;
    if (s == "att") return AdapterTarget::Att;
    if (s == "att-ffn") return AdapterTarget::AttFfn;
    fail("unknown adapter target '" + s + "' (expected ffn, att, or att-ffn)");
}

struct AdapterConfig {
    std::int32_t rank = 8;
    double alpha = 16.0;
    double dropout = 0.05;
    AdapterTarget target = AdapterTarget::Ffn;

    void validate() const {
        require(rank >= 1, "AdapterConfig: rank must be >= 1");
        require(dropout >= 0.0 && dropout < 1.0, "AdapterConfig: dropout must be in [0,1)");
    }
    bool operator==(const AdapterConfig&) const = default;
};

template <typename S>
struct ParamRef {
    std::string name;
    Mat<S>* value;
    Mat<S>* grad;
};

namespace nn {

template <typename S>
struct LoraPair {
    Mat<S> a, b;    // a: r x in (small random), b: out x r (zero)
    Mat<S> ga, gb;  // gradients
    S scale = 0;    // alpha / rank
    S dropout = 0;
};

template <typename S>
struct Linear {
    std::string name;
    Mat<S> w, g;  // out x in
    std::optional<LoraPair<S>> lora;

    std::int32_t fan_out() const { return static_cast<std::int32_t>(w.rows()); }
    std::int32_t fan_in() const { return static_cast<std::int32_t>(w.cols()); }
};

template <typename S>
struct LinTrace {
    Mat<S> z;     // x_drop * A^T, empty when no adapter
    Mat<S> mask;  // inverted-dropout mask, empty when dropout inactive
};

// y = x * W^T (+ adapter path when attached). drop_rng enables the adapter
// dropout; pass nullptr outside training.
template <typename S>
Mat<S> linear_forward(const Linear<S>& lin, const Mat<S>& x, LinTrace<S>* trace, Rng* drop_rng) {
    Mat<S> y = x * lin.w.transpose();
    if (lin.lora) {
        const auto& l = *lin.lora;
        Mat<S> z;
        if (drop_rng != nullptr && l.dropout > S(0)) {
            Mat<S> mask(x.rows(), x.cols());
            S keep = S(1) - l.dropout;
            for (Eigen::Index i = 0; i < mask.rows(); ++i)
                for (Eigen::Index j = 0; j < mask.cols(); ++j)
                    mask(i, j) = uniform_real(*drop_rng) < static_cast<double>(l.dropout)
                                     ? S(0)
                                     : S(1) / keep;
            z = (x.cwiseProduct(mask)) * l.a.transpose();
            if (trace) trace->mask = std::move(mask);
        } else {
            z = x * l.a.transpose();
        }
        y.noalias() += l.scale * (z * l.b.transpose());
        if (trace) trace->z = std::move(z);
    }
    return y;
}

// Accumulates parameter grads and returns dx. Base weight grads are skipped
// when the base is frozen (adapters active).
template <typename S>
Mat<S> linear_backward(Linear<S>& lin, const Mat<S>& x, const Mat<S>& dy, const LinTrace<S>& trace,
                       bool base_trainable) {
    Mat<S> dx = dy * lin.w;
    if (base_trainable) lin.g.noalias() += dy.transpose() * x;
    if (lin.lora) {
        auto& l = *lin.lora;
        Mat<S> dz = l.scale * (dy * l.b);
        l.gb.noalias() += l.scale * (dy.transpose() * trace.z);
        if (trace.mask.size() > 0) {
            Mat<S> x_drop = x.cwiseProduct(trace.mask);
            l.ga.noalias() += dz.transpose() * x_drop;
            dx.noalias() += (dz * l.a).cwiseProduct(trace.mask);
        } else {
            l.ga.noalias() += dz.transpose() * x;
            dx.noalias() += dz * l.a;
        }
    }
    return dx;
}

template <typename S>
struct RmsNorm {
    std::string name;
    Mat<S> gain, g;  // 1 x d

    static constexpr S eps() { return S(1e-6); }

    Mat<S> forward(const Mat<S>& x, Mat<S>& inv_rms) const {
        const auto d = x.cols();
        inv_rms.resize(x.rows(), 1);
        Mat<S> y(x.rows(), d);
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            S ms = x.row(i).squaredNorm() / static_cast<S>(d);
            S inv = S(1) / std::sqrt(ms + eps());
            inv_rms(i, 0) = inv;
            y.row(i) = (x.row(i) * inv).cwiseProduct(gain.row(0));
        }
        return y;
    }

    Mat<S> backward(const Mat<S>& x, const Mat<S>& inv_rms, const Mat<S>& dy, bool trainable) {
        const auto d = x.cols();
        Mat<S> dx(x.rows(), d);
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            S inv = inv_rms(i, 0);
            Row<S> u = x.row(i) * inv;
            Row<S> du = dy.row(i).cwiseProduct(gain.row(0));
            S proj = u.cwiseProduct(du).sum() / static_cast<S>(d);
            dx.row(i) = (du - u * proj) * inv;
            if (trainable) g.row(0) += dy.row(i).cwiseProduct(u);
        }
        return dx;
    }
};

}  // namespace nn

// Per-sequence activation trace consumed by the reverse pass.
// block_outputs[0] is the embedded input; block_outputs[l+1] the residual
// stream after block l.
template <typename S>
struct ForwardTrace {
    TokenSeq tokens;
    std::vector<Mat<S>> block_outputs;
    struct Layer {
        Mat<S> inv_rms1, n1;
        Mat<S> q, k, v;
        std::vector<Mat<S>> probs;  // per-head causal softmax, L x L
        Mat<S> attn_concat;
        Mat<S> x_mid;
        Mat<S> inv_rms2, n2;
        Mat<S> gate_pre, up_pre, act;
        nn::LinTrace<S> tq, tk, tv, to, tg, tu, td;
    };
    std::vector<Layer> layers;
    Mat<S> inv_rms_final;
    Mat<S> xf;  // final-normed hidden states, L x d

    Eigen::Index seq_len() const { return xf.rows(); }
};

template <typename S>
class Model {
public:
    Model() = default;

    explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(derive_seed(cfg.seed, "init"));
        constexpr double kStd = 0.02;
        init_matrix(tok_emb_, cfg.vocab_size, cfg.d_model, kStd, rng);
        init_matrix(pos_emb_, cfg.max_seq_len, cfg.d_model, kStd, rng);
        tok_g_ = Mat<S>::Zero(cfg.vocab_size, cfg.d_model);
        pos_g_ = Mat<S>::Zero(cfg.max_seq_len, cfg.d_model);
        layers_.resize(static_cast<std::size_t>(cfg.n_layers));
        for (std::int32_t l = 0; l < cfg.n_layers; ++l) {
            auto& L = layers_[static_cast<std::size_t>(l)];
            std::string p = "layer" + std::to_string(l) + ".";
            auto init_lin = [&](nn::Linear<S>& lin, const char* nm, std::int32_t out, std::int32_t in) {
                lin.name = p + nm;
                init_matrix(lin.w, out, in, kStd, rng);
                lin.g = Mat<S>::Zero(out, in);
            };
            init_lin(L.wq, "wq", cfg.d_model, cfg.d_model);
            init_lin(L.wk, "wk", cfg.d_model, cfg.d_model);
            init_lin(L.wv, "wv", cfg.d_model, cfg.d_model);
            init_lin(L.wo, "wo", cfg.d_model, cfg.d_model);
            init_lin(L.wgate, "wgate", cfg.d_ffn, cfg.d_model);
            init_lin(L.wup, "wup", cfg.d_ffn, cfg.d_model);
            init_lin(L.wdown, "wdown", cfg.d_model, cfg.d_ffn);
            init_norm(L.norm1, p + "norm1");
            init_norm(L.norm2, p + "norm2");
        }
        init_norm(norm_final_, "norm_final");
    }

    const ModelConfig& config() const { return cfg_; }
    bool adapters_active() const { return adapters_active_; }
    const AdapterConfig& adapter_config() const { return adapter_cfg_; }
    std::int64_t forward_count() const { return forward_count_; }

    // --- forward -------------------------------------------------------

    ForwardTrace<S> forward(const TokenSeq& tokens, bool training = false,
                            Rng* drop_rng = nullptr) const {
        require(!tokens.empty(), "forward: empty sequence");
        require(static_cast<std::int32_t>(tokens.size()) <= cfg_.max_seq_len,
                "forward: sequence length " + std::to_string(tokens.size()) +
                    " exceeds max sequence length " + std::to_string(cfg_.max_seq_len));
        for (TokenId t : tokens)
            require(t >= 0 && t < cfg_.vocab_size, "forward: token id out of range");
        ++forward_count_;

        const Eigen::Index L = static_cast<Eigen::Index>(tokens.size());
        const std::int32_t H = cfg_.n_heads;
        const Eigen::Index dh = cfg_.d_model / H;
        const S inv_sqrt_dh = S(1) / std::sqrt(static_cast<S>(dh));

        ForwardTrace<S> tr;
        tr.tokens = tokens;
        Mat<S> x(L, cfg_.d_model);
        for (Eigen::Index p = 0; p < L; ++p)
            x.row(p) = tok_emb_.row(tokens[static_cast<std::size_t>(p)]) + pos_emb_.row(p);

        tr.layers.resize(layers_.size());
        tr.block_outputs.reserve(layers_.size() + 1);
        tr.block_outputs.push_back(x);

        Rng* dr = training ? drop_rng : nullptr;
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const auto& P = layers_[l];
            auto& T = tr.layers[l];
            T.n1 = P.norm1.forward(x, T.inv_rms1);
            T.q = nn::linear_forward(P.wq, T.n1, &T.tq, dr);
            T.k = nn::linear_forward(P.wk, T.n1, &T.tk, dr);
            T.v = nn::linear_forward(P.wv, T.n1, &T.tv, dr);
            T.probs.resize(static_cast<std::size_t>(H));
            T.attn_concat.resize(L, cfg_.d_model);
            for (std::int32_t h = 0; h < H; ++h) {
                auto qh = T.q.middleCols(h * dh, dh);
                auto kh = T.k.middleCols(h * dh, dh);
                auto vh = T.v.middleCols(h * dh, dh);
                Mat<S> scores = (qh * kh.transpose()) * inv_sqrt_dh;
                Mat<S>& probs = T.probs[static_cast<std::size_t>(h)];
                probs.setZero(L, L);
                for (Eigen::Index i = 0; i < L; ++i) {
                    S mx = scores(i, 0);
                    for (Eigen::Index j = 1; j <= i; ++j) mx = std::max(mx, scores(i, j));
                    S denom = S(0);
                    for (Eigen::Index j = 0; j <= i; ++j) {
                        S e = std::exp(scores(i, j) - mx);
                        probs(i, j) = e;
                        denom += e;
                    }
                    for (Eigen::Index j = 0; j <= i; ++j) probs(i, j) /= denom;
                }
                T.attn_concat.middleCols(h * dh, dh).noalias() = probs * vh;
            }
            Mat<S> attn_out = nn::linear_forward(P.wo, T.attn_concat, &T.to, dr);
            T.x_mid = x + attn_out;

            T.n2 = P.norm2.forward(T.x_mid, T.inv_rms2);
            T.gate_pre = nn::linear_forward(P.wgate, T.n2, &T.tg, dr);
            T.up_pre = nn::linear_forward(P.wup, T.n2, &T.tu, dr);
            T.act.resize(L, cfg_.d_ffn);
            for (Eigen::Index i = 0; i < L; ++i)
                for (Eigen::Index j = 0; j < cfg_.d_ffn; ++j) {
                    S g = T.gate_pre(i, j);
                    S sig = S(1) / (S(1) + std::exp(-g));
                    T.act(i, j) = g * sig * T.up_pre(i, j);
                }
            Mat<S> ffn_out = nn::linear_forward(P.wdown, T.act, &T.td, dr);
            x = T.x_mid + ffn_out;
            tr.block_outputs.push_back(x);
        }
        tr.xf = norm_final_.forward(x, tr.inv_rms_final);
        return tr;
    }

    Mat<S> logits(const Mat<S>& xf) const { return xf * tok_emb_.transpose(); }

    // Unit-norm pooled embedding: final-layer hidden state at the view's
    // terminal marker.
    Row<S> embed(const TokenSeq& tokens) const {
        require(!tokens.empty() && (tokens.back() == Vocab::kEosHr || tokens.back() == Vocab::kEosT),
                "embed: sequence must end with a view eos marker");
        ForwardTrace<S> tr = forward(tokens);
        return pooled_embedding(tr);
    }

    Row<S> pooled_embedding(const ForwardTrace<S>& tr) const {
        Row<S> v = tr.xf.row(tr.xf.rows() - 1);
        S n = v.norm();
        require(n > S(0), "embed: zero-norm hidden state");
        return v / n;
    }

    // Residual-stream hidden at the final position for each block output,
    // L2-normalized. The last entry uses the final norm, i.e. it equals the
    // pooled embedding space.
    std::vector<Row<S>> eos_hidden_per_layer(const TokenSeq& tokens) const {
        ForwardTrace<S> tr = forward(tokens);
        std::vector<Row<S>> out;
        out.reserve(layers_.size());
        Eigen::Index last = tr.xf.rows() - 1;
        for (std::size_t l = 1; l < tr.block_outputs.size(); ++l) {
            Row<S> v = (l + 1 == tr.block_outputs.size()) ? Row<S>(tr.xf.row(last))
                                                          : Row<S>(tr.block_outputs[l].row(last));
            S n = v.norm();
            out.push_back(n > S(0) ? Row<S>((v / n).eval()) : v);
        }
        return out;
    }

    // --- backward ------------------------------------------------------

    // dxf: gradient w.r.t. the final-normed hidden states (L x d).
    void backward(const ForwardTrace<S>& tr, const Mat<S>& dxf) {
        bool base = !adapters_active_;
        Mat<S> dx =
            norm_final_.backward(tr.block_outputs.back(), tr.inv_rms_final, dxf, base);
        for (std::int32_t l = cfg_.n_layers - 1; l >= 0; --l) {
            auto idx = static_cast<std::size_t>(l);
            dx = layer_backward(layers_[idx], tr.layers[idx], tr.block_outputs[idx], dx, base);
        }
        if (base) {
            for (Eigen::Index p = 0; p < dx.rows(); ++p) {
                tok_g_.row(tr.tokens[static_cast<std::size_t>(p)]) += dx.row(p);
                pos_g_.row(p) += dx.row(p);
            }
        }
    }

    // LM head: accumulates the tied-embedding gradient, then the trunk pass.
    // dlogits is L x vocab.
    void lm_backward(const ForwardTrace<S>& tr, const Mat<S>& dlogits) {
        Mat<S> dxf = dlogits * tok_emb_;
        if (!adapters_active_) tok_g_.noalias() += dlogits.transpose() * tr.xf;
        backward(tr, dxf);
    }

    // --- adapters --------------------------------------------------------

    void attach_adapters(const AdapterConfig& acfg) {
        acfg.validate();
        require(!adapters_active_, "attach_adapters: adapters already attached");
        Rng rng(derive_seed(cfg_.seed, "lora"));
        for (auto& L : layers_) {
            for (nn::Linear<S>* lin : targeted_linears(L, acfg.target)) {
                require(acfg.rank <= std::min(lin->fan_in(), lin->fan_out()),
                        "attach_adapters: rank exceeds smallest dimension of " + lin->name);
                nn::LoraPair<S> lp;
                init_matrix(lp.a, acfg.rank, lin->fan_in(), 0.02, rng);
                lp.b = Mat<S>::Zero(lin->fan_out(), acfg.rank);
                lp.ga = Mat<S>::Zero(acfg.rank, lin->fan_in());
                lp.gb = Mat<S>::Zero(lin->fan_out(), acfg.rank);
                lp.scale = static_cast<S>(acfg.alpha / acfg.rank);
                lp.dropout = static_cast<S>(acfg.dropout);
                lin->lora = std::move(lp);
            }
        }
        adapter_cfg_ = acfg;
        adapters_active_ = true;
    }

    // Folds (alpha/rank) * B * A into the base weights and removes the
    // adapters; forward outputs are preserved.
    void merge_adapters() {
        require(adapters_active_, "merge_adapters: no adapters attached");
        for (auto& L : layers_) {
            for (nn::Linear<S>* lin : mutable_linears(L)) {
                if (lin->lora) {
                    lin->w.noalias() += lin->lora->scale * (lin->lora->b * lin->lora->a);
                    lin->lora.reset();
                }
            }
        }
        adapters_active_ = false;
    }

    std::int64_t adapter_parameter_count() const {
        std::int64_t n = 0;
        for (const auto& L : layers_)
            for (const nn::Linear<S>* lin :
                 {&L.wq, &L.wk, &L.wv, &L.wo, &L.wgate, &L.wup, &L.wdown})
                if (lin->lora) n += lin->lora->a.size() + lin->lora->b.size();
        return n;
    }

    // --- parameter enumeration -------------------------------------------

    // Trainable tensors in a fixed order; with adapters active only the
    // adapter tensors appear.
    std::vector<ParamRef<S>> trainable_params() {
        std::vector<ParamRef<S>> out;
        for (auto& p : all_params())
            if (adapters_active_ ? is_adapter_tensor(p.name) : true) out.push_back(p);
        return out;
    }

    // Every tensor, including frozen ones (checkpointing, checksums).
    std::vector<ParamRef<S>> all_params() {
        std::vector<ParamRef<S>> out;
        out.push_back({"tok_emb", &tok_emb_, &tok_g_});
        out.push_back({"pos_emb", &pos_emb_, &pos_g_});
        for (auto& L : layers_) {
            for (nn::Linear<S>* lin : mutable_linears(L)) {
                out.push_back({lin->name, &lin->w, &lin->g});
                if (lin->lora) {
                    out.push_back({lin->name + ".lora_a", &lin->lora->a, &lin->lora->ga});
                    out.push_back({lin->name + ".lora_b", &lin->lora->b, &lin->lora->gb});
                }
            }
            out.push_back({L.norm1.name, &L.norm1.gain, &L.norm1.g});
            out.push_back({L.norm2.name, &L.norm2.gain, &L.norm2.g});
        }
        out.push_back({norm_final_.name, &norm_final_.gain, &norm_final_.g});
        return out;
    }

    void zero_grads() {
        for (auto& p : all_params()) p.grad->setZero();
    }

    std::int64_t trainable_parameter_count() {
        std::int64_t n = 0;
        for (auto& p : trainable_params()) n += p.value->size();
        return n;
    }

    static bool is_adapter_tensor(const std::string& name) {
        return name.find(".lora_") != std::string::npos;
    }

private:
    struct LayerParams {
        nn::Linear<S> wq, wk, wv, wo, wgate, wup, wdown;
        nn::RmsNorm<S> norm1, norm2;
    };

    static void init_matrix(Mat<S>& m, Eigen::Index r, Eigen::Index c, double std, Rng& rng) {
        m.resize(r, c);
        for (Eigen::Index i = 0; i < r; ++i)
            for (Eigen::Index j = 0; j < c; ++j) m(i, j) = static_cast<S>(normal(rng) * std);
    }

    void init_norm(nn::RmsNorm<S>& n, const std::string& name) {
        n.name = name;
        n.gain = Mat<S>::Ones(1, cfg_.d_model);
        n.g = Mat<S>::Zero(1, cfg_.d_model);
    }

    static std::vector<nn::Linear<S>*> mutable_linears(LayerParams& L) {
        return {&L.wq, &L.wk, &L.wv, &L.wo, &L.wgate, &L.wup, &L.wdown};
    }

    static std::vector<nn::Linear<S>*> targeted_linears(LayerParams& L, AdapterTarget t) {
        std::vector<nn::Linear<S>*> out;
        if (t == AdapterTarget::Att || t == AdapterTarget::AttFfn)
            out.insert(out.end(), {&L.wq, &L.wk, &L.wv, &L.wo});
        if (t == AdapterTarget::Ffn || t == AdapterTarget::AttFfn)
            out.insert(out.end(), {&L.wgate, &L.wup, &L.wdown});
        return out;
    }

    Mat<S> layer_backward(LayerParams& P, const typename ForwardTrace<S>::Layer& T,
                          const Mat<S>& x_in, const Mat<S>& dout, bool base) {
        const Eigen::Index L = dout.rows();
        const std::int32_t H = cfg_.n_heads;
        const Eigen::Index dh = cfg_.d_model / H;
        const S inv_sqrt_dh = S(1) / std::sqrt(static_cast<S>(dh));

        // FFN branch: x_out = x_mid + wdown(silu(gate) .* up)
        Mat<S> dact = nn::linear_backward(P.wdown, T.act, dout, T.td, base);
        Mat<S> dgate(L, cfg_.d_ffn), dup(L, cfg_.d_ffn);
        for (Eigen::Index i = 0; i < L; ++i)
            for (Eigen::Index j = 0; j < cfg_.d_ffn; ++j) {
                S g = T.gate_pre(i, j);
                S sig = S(1) / (S(1) + std::exp(-g));
                S dsilu = sig * (S(1) + g * (S(1) - sig));
                dgate(i, j) = dact(i, j) * T.up_pre(i, j) * dsilu;
                dup(i, j) = dact(i, j) * g * sig;
            }
        Mat<S> dn2 = nn::linear_backward(P.wgate, T.n2, dgate, T.tg, base);
        dn2.noalias() += nn::linear_backward(P.wup, T.n2, dup, T.tu, base);
        Mat<S> dx_mid = dout;  // residual
        dx_mid.noalias() += P.norm2.backward(T.x_mid, T.inv_rms2, dn2, base);

        // Attention branch: x_mid = x_in + wo(concat_h(P_h V_h))
        Mat<S> dconcat = nn::linear_backward(P.wo, T.attn_concat, dx_mid, T.to, base);
        Mat<S> dq(L, cfg_.d_model), dk(L, cfg_.d_model), dv(L, cfg_.d_model);
        for (std::int32_t h = 0; h < H; ++h) {
            auto qh = T.q.middleCols(h * dh, dh);
            auto kh = T.k.middleCols(h * dh, dh);
            auto vh = T.v.middleCols(h * dh, dh);
            const Mat<S>& probs = T.probs[static_cast<std::size_t>(h)];
            auto doh = dconcat.middleCols(h * dh, dh);
            Mat<S> dprobs = doh * vh.transpose();
            dv.middleCols(h * dh, dh).noalias() = probs.transpose() * doh;
            Mat<S> dscores(L, L);
            for (Eigen::Index i = 0; i < L; ++i) {
                S acc = S(0);
                for (Eigen::Index j = 0; j <= i; ++j) acc += dprobs(i, j) * probs(i, j);
                for (Eigen::Index j = 0; j <= i; ++j)
                    dscores(i, j) = probs(i, j) * (dprobs(i, j) - acc);
                for (Eigen::Index j = i + 1; j < L; ++j) dscores(i, j) = S(0);
            }
            dq.middleCols(h * dh, dh).noalias() = (dscores * kh) * inv_sqrt_dh;
            dk.middleCols(h * dh, dh).noalias() = (dscores.transpose() * qh) * inv_sqrt_dh;
        }
        Mat<S> dn1 = nn::linear_backward(P.wq, T.n1, dq, T.tq, base);
        dn1.noalias() += nn::linear_backward(P.wk, T.n1, dk, T.tk, base);
        dn1.noalias() += nn::linear_backward(P.wv, T.n1, dv, T.tv, base);
        Mat<S> dx_in = dx_mid;
        dx_in.noalias() += P.norm1.backward(x_in, T.inv_rms1, dn1, base);
        return dx_in;
    }

    ModelConfig cfg_;
    Mat<S> tok_emb_, tok_g_;
    Mat<S> pos_emb_, pos_g_;
    std::vector<LayerParams> layers_;
    nn::RmsNorm<S> norm_final_;
    bool adapters_active_ = false;
    AdapterConfig adapter_cfg_;
    mutable std::int64_t forward_count_ = 0;
};

// Gradient of the L2-normalization: given the raw vector and the upstream
// gradient on v/|v|, returns the gradient on the raw vector.
template <typename S>
Row<S> normalize_backward(const Row<S>& raw, const Row<S>& dunit) {
    S n = raw.norm();
    Row<S> unit = raw / n;
    return (dunit - unit * unit.dot(dunit)) / n;
}

}  // namespace kalign
