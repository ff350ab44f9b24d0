#pragma once

#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "circle/common.hpp"
#include "circle/tokenizer.hpp"

namespace circle {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::RowVectorXd;

// ---------------------------------------------------------------------------
// Configuration and checkpoint.
// ---------------------------------------------------------------------------

struct ModelConfig {
    int layers = 2;
    int heads = 2;
    int d_model = 32;
    int d_ff = 64;
    double dropout = 0.1;
    int max_positions = 512;
    int vocab_size = 0;

    void validate() const {
        if (layers < 1 || heads < 1 || d_model < 1 || d_ff < 1 || vocab_size < 1)
            throw ConfigError("model config: all dimensions must be positive");
        if (d_model % heads != 0) throw ConfigError("model config: d_model must be divisible by heads");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model config: dropout must be in [0,1)");
        if (max_positions < 1) throw ConfigError("model config: max_positions must be >= 1");
    }

    bool operator==(const ModelConfig&) const = default;
};

// Flat-parameter layout. Everything EWC and the optimizer touch is a slice of
// one vector, in the fixed order below:
//   token embedding [V x D]
//   encoder / decoder position embeddings [P x D] each
//   per encoder layer: ln1(g,b), self-attn (Wq,bq,Wk,bk,Wv,bv,Wo,bo), ln2(g,b),
//                      ffn (W1[D x F], b1, W2[F x D], b2)
//   encoder final layernorm (g,b)
//   per decoder layer: ln1(g,b), self-attn, ln2(g,b), cross-attn, ln3(g,b), ffn
//   decoder final layernorm (g,b)
//   output head W[D x V], b[V]
struct ParamLayout {
    struct Seg {
        std::size_t off = 0, rows = 0, cols = 0;
        std::size_t count() const { return rows * cols; }
    };
    struct AttnSegs {
        Seg wq, bq, wk, bk, wv, bv, wo, bo;
    };
    struct LayerSegs {
        Seg ln1_g, ln1_b;
        AttnSegs self_attn;
        Seg ln2_g, ln2_b;
        AttnSegs cross_attn;  // decoder only
        Seg ln3_g, ln3_b;     // decoder only
        Seg w1, b1, w2, b2;
    };

    Seg tok_emb, pos_enc, pos_dec;
    std::vector<LayerSegs> enc, dec;
    Seg enc_ln_g, enc_ln_b, dec_ln_g, dec_ln_b;
    Seg head_w, head_b;
    std::size_t total = 0;

    explicit ParamLayout(const ModelConfig& cfg) {
        const std::size_t D = static_cast<std::size_t>(cfg.d_model);
        const std::size_t F = static_cast<std::size_t>(cfg.d_ff);
        const std::size_t V = static_cast<std::size_t>(cfg.vocab_size);
        const std::size_t P = static_cast<std::size_t>(cfg.max_positions);
        std::size_t cur = 0;
        auto seg = [&cur](std::size_t r, std::size_t c) {
            Seg s{cur, r, c};
            cur += r * c;
            return s;
        };
        auto attn = [&] {
            AttnSegs a;
            a.wq = seg(D, D), a.bq = seg(1, D);
            a.wk = seg(D, D), a.bk = seg(1, D);
            a.wv = seg(D, D), a.bv = seg(1, D);
            a.wo = seg(D, D), a.bo = seg(1, D);
            return a;
        };
        tok_emb = seg(V, D);
        pos_enc = seg(P, D);
        pos_dec = seg(P, D);
        for (int l = 0; l < cfg.layers; ++l) {
            LayerSegs L;
            L.ln1_g = seg(1, D), L.ln1_b = seg(1, D);
            L.self_attn = attn();
            L.ln2_g = seg(1, D), L.ln2_b = seg(1, D);
            L.w1 = seg(D, F), L.b1 = seg(1, F);
            L.w2 = seg(F, D), L.b2 = seg(1, D);
            enc.push_back(L);
        }
        enc_ln_g = seg(1, D), enc_ln_b = seg(1, D);
        for (int l = 0; l < cfg.layers; ++l) {
            LayerSegs L;
            L.ln1_g = seg(1, D), L.ln1_b = seg(1, D);
            L.self_attn = attn();
            L.ln2_g = seg(1, D), L.ln2_b = seg(1, D);
            L.cross_attn = attn();
            L.ln3_g = seg(1, D), L.ln3_b = seg(1, D);
            L.w1 = seg(D, F), L.b1 = seg(1, F);
            L.w2 = seg(F, D), L.b2 = seg(1, D);
            dec.push_back(L);
        }
        dec_ln_g = seg(1, D), dec_ln_b = seg(1, D);
        head_w = seg(D, V);
        head_b = seg(1, V);
        total = cur;
    }
};

inline std::size_t param_count(const ModelConfig& cfg) { return ParamLayout(cfg).total; }

struct Checkpoint {
    ModelConfig config;
    std::uint64_t vocab_hash = 0;
    int task_id = 0;
    std::vector<double> params;  // every value is exactly float32-representable

    void validate() const {
        config.validate();
        if (params.size() != param_count(config))
            throw CompatibilityError("checkpoint params length " + std::to_string(params.size()) +
                                     " does not match config-derived count " +
                                     std::to_string(param_count(config)));
    }
};

// Parameters live on disk as float32; keeping the in-memory doubles rounded to
// float32 after every update makes save/load bit-exact.
inline double round_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

inline Checkpoint init_checkpoint(const ModelConfig& cfg, std::uint64_t vocab_hash,
                                  std::uint64_t seed) {
    cfg.validate();
    ParamLayout layout(cfg);
    Checkpoint ckpt;
    ckpt.config = cfg;
    ckpt.vocab_hash = vocab_hash;
    ckpt.task_id = 0;
    ckpt.params.assign(layout.total, 0.0);
    Rng rng(derive_seed(seed, "model-init"));
    auto fill_normal = [&](const ParamLayout::Seg& s) {
        for (std::size_t i = 0; i < s.count(); ++i)
            ckpt.params[s.off + i] = round_f32(0.02 * rng.next_normal());
    };
    auto fill_ones = [&](const ParamLayout::Seg& s) {
        for (std::size_t i = 0; i < s.count(); ++i) ckpt.params[s.off + i] = 1.0;
    };
    fill_normal(layout.tok_emb);
    fill_normal(layout.pos_enc);
    fill_normal(layout.pos_dec);
    auto init_attn = [&](const ParamLayout::AttnSegs& a) {
        fill_normal(a.wq), fill_normal(a.wk), fill_normal(a.wv), fill_normal(a.wo);
    };
    for (const auto& L : layout.enc) {
        fill_ones(L.ln1_g), fill_ones(L.ln2_g);
        init_attn(L.self_attn);
        fill_normal(L.w1), fill_normal(L.w2);
    }
    fill_ones(layout.enc_ln_g);
    for (const auto& L : layout.dec) {
        fill_ones(L.ln1_g), fill_ones(L.ln2_g), fill_ones(L.ln3_g);
        init_attn(L.self_attn);
        init_attn(L.cross_attn);
        fill_normal(L.w1), fill_normal(L.w2);
    }
    fill_ones(layout.dec_ln_g);
    fill_normal(layout.head_w);
    return ckpt;
}

// ---------------------------------------------------------------------------
// Forward / backward.
// ---------------------------------------------------------------------------

namespace nn {

constexpr double kLnEps = 1e-5;
constexpr double kMaskNegInf = -1e30;

inline Eigen::Map<const Mat> mat(const std::vector<double>& p, const ParamLayout::Seg& s) {
    return {p.data() + s.off, static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols)};
}
inline Eigen::Map<Mat> mat(std::vector<double>& p, const ParamLayout::Seg& s) {
    return {p.data() + s.off, static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols)};
}
inline Eigen::Map<const RowVec> vec(const std::vector<double>& p, const ParamLayout::Seg& s) {
    return {p.data() + s.off, static_cast<Eigen::Index>(s.count())};
}
inline Eigen::Map<RowVec> vec(std::vector<double>& p, const ParamLayout::Seg& s) {
    return {p.data() + s.off, static_cast<Eigen::Index>(s.count())};
}

struct LnCache {
    Mat xhat;
    Eigen::VectorXd rstd;
};

inline Mat layernorm_forward(const Mat& x, const RowVec& gamma, const RowVec& beta, LnCache& c) {
    c.xhat.resize(x.rows(), x.cols());
    c.rstd.resize(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        double mu = x.row(r).mean();
        double var = (x.row(r).array() - mu).square().mean();
        double rstd = 1.0 / std::sqrt(var + kLnEps);
        c.xhat.row(r) = (x.row(r).array() - mu) * rstd;
        c.rstd(r) = rstd;
    }
    Mat y = c.xhat;
    y.array().rowwise() *= gamma.array();
    y.array().rowwise() += beta.array();
    return y;
}

inline Mat layernorm_backward(const Mat& dy, const LnCache& c, const RowVec& gamma,
                              std::vector<double>& grad, const ParamLayout::Seg& gseg,
                              const ParamLayout::Seg& bseg) {
    vec(grad, gseg) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    vec(grad, bseg) += dy.colwise().sum();
    Mat dxhat = dy;
    dxhat.array().rowwise() *= gamma.array();
    Mat dx(dy.rows(), dy.cols());
    const double n = static_cast<double>(dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        double m1 = dxhat.row(r).sum() / n;
        double m2 = (dxhat.row(r).array() * c.xhat.row(r).array()).sum() / n;
        dx.row(r) = c.rstd(r) * (dxhat.row(r).array() - m1 - c.xhat.row(r).array() * m2);
    }
    return dx;
}

struct AttnCache {
    Mat q_in, kv_in;          // sublayer inputs (post-layernorm)
    Mat q, k, v;              // projected
    std::vector<Mat> probs;   // per-head softmax rows
    Mat concat;               // pre-output-projection
};

inline Mat attention_forward(const Mat& q_in, const Mat& kv_in, const std::vector<double>& params,
                             const ParamLayout::AttnSegs& a, int heads, bool causal, AttnCache& c) {
    const Eigen::Index D = q_in.cols();
    const Eigen::Index dh = D / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    c.q_in = q_in;
    c.kv_in = kv_in;
    c.q = (q_in * mat(params, a.wq)).rowwise() + vec(params, a.bq);
    c.k = (kv_in * mat(params, a.wk)).rowwise() + vec(params, a.bk);
    c.v = (kv_in * mat(params, a.wv)).rowwise() + vec(params, a.bv);
    c.probs.assign(static_cast<std::size_t>(heads), Mat());
    c.concat.resize(q_in.rows(), D);
    for (int h = 0; h < heads; ++h) {
        auto qh = c.q.block(0, h * dh, c.q.rows(), dh);
        auto kh = c.k.block(0, h * dh, c.k.rows(), dh);
        auto vh = c.v.block(0, h * dh, c.v.rows(), dh);
        Mat scores = scale * (qh * kh.transpose());
        if (causal) {
            for (Eigen::Index i = 0; i < scores.rows(); ++i)
                for (Eigen::Index j = i + 1; j < scores.cols(); ++j) scores(i, j) = kMaskNegInf;
        }
        Mat& p = c.probs[static_cast<std::size_t>(h)];
        p.resize(scores.rows(), scores.cols());
        for (Eigen::Index i = 0; i < scores.rows(); ++i) {
            double mx = scores.row(i).maxCoeff();
            p.row(i) = (scores.row(i).array() - mx).exp();
            p.row(i) /= p.row(i).sum();
        }
        c.concat.block(0, h * dh, c.concat.rows(), dh) = p * vh;
    }
    return (c.concat * mat(params, a.wo)).rowwise() + vec(params, a.bo);
}

// Returns d(q_in); adds d(kv_in) into dkv_in (the two may alias distinct mats).
inline Mat attention_backward(const Mat& dout, const AttnCache& c, const std::vector<double>& params,
                              const ParamLayout::AttnSegs& a, int heads, std::vector<double>& grad,
                              Mat& dkv_in) {
    const Eigen::Index D = c.q_in.cols();
    const Eigen::Index dh = D / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    mat(grad, a.wo) += c.concat.transpose() * dout;
    vec(grad, a.bo) += dout.colwise().sum();
    Mat dconcat = dout * mat(params, a.wo).transpose();
    Mat dq = Mat::Zero(c.q.rows(), D);
    Mat dk = Mat::Zero(c.k.rows(), D);
    Mat dv = Mat::Zero(c.v.rows(), D);
    for (int h = 0; h < heads; ++h) {
        const Mat& p = c.probs[static_cast<std::size_t>(h)];
        auto vh = c.v.block(0, h * dh, c.v.rows(), dh);
        auto qh = c.q.block(0, h * dh, c.q.rows(), dh);
        auto kh = c.k.block(0, h * dh, c.k.rows(), dh);
        Mat doh = dconcat.block(0, h * dh, dconcat.rows(), dh);
        Mat dp = doh * vh.transpose();
        dv.block(0, h * dh, dv.rows(), dh) = p.transpose() * doh;
        // softmax backward, rowwise; masked cells have p == 0 so they stay 0
        Mat ds(p.rows(), p.cols());
        for (Eigen::Index i = 0; i < p.rows(); ++i) {
            double dot = (dp.row(i).array() * p.row(i).array()).sum();
            ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
        }
        dq.block(0, h * dh, dq.rows(), dh) = scale * (ds * kh);
        dk.block(0, h * dh, dk.rows(), dh) = scale * (ds.transpose() * qh);
    }
    mat(grad, a.wq) += c.q_in.transpose() * dq;
    vec(grad, a.bq) += dq.colwise().sum();
    mat(grad, a.wk) += c.kv_in.transpose() * dk;
    vec(grad, a.bk) += dk.colwise().sum();
    mat(grad, a.wv) += c.kv_in.transpose() * dv;
    vec(grad, a.bv) += dv.colwise().sum();
    dkv_in += dk * mat(params, a.wk).transpose() + dv * mat(params, a.wv).transpose();
    return dq * mat(params, a.wq).transpose();
}

struct FfnCache {
    Mat x, h1;  // input and pre-activation
};

inline Mat ffn_forward(const Mat& x, const std::vector<double>& params, const ParamLayout::LayerSegs& L,
                       FfnCache& c) {
    c.x = x;
    c.h1 = (x * mat(params, L.w1)).rowwise() + vec(params, L.b1);
    Mat a = c.h1.cwiseMax(0.0);
    return (a * mat(params, L.w2)).rowwise() + vec(params, L.b2);
}

inline Mat ffn_backward(const Mat& dy, const FfnCache& c, const std::vector<double>& params,
                        const ParamLayout::LayerSegs& L, std::vector<double>& grad) {
    Mat a = c.h1.cwiseMax(0.0);
    mat(grad, L.w2) += a.transpose() * dy;
    vec(grad, L.b2) += dy.colwise().sum();
    Mat da = dy * mat(params, L.w2).transpose();
    Mat dh1 = (c.h1.array() > 0.0).select(da, 0.0);
    mat(grad, L.w1) += c.x.transpose() * dh1;
    vec(grad, L.b1) += dh1.colwise().sum();
    return dh1 * mat(params, L.w1).transpose();
}

struct DropCache {
    bool active = false;
    Mat mask;
};

inline void dropout_forward(Mat& x, double p, Rng* rng, DropCache& c) {
    c.active = rng != nullptr && p > 0.0;
    if (!c.active) return;
    const double keep = 1.0 - p;
    c.mask.resize(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = 0; j < x.cols(); ++j)
            c.mask(i, j) = rng->next_double() < keep ? 1.0 / keep : 0.0;
    x.array() *= c.mask.array();
}

inline void dropout_backward(Mat& dy, const DropCache& c) {
    if (c.active) dy.array() *= c.mask.array();
}

}  // namespace nn

// Teacher-forced sample, already tokenized. `tgt` includes the trailing eos;
// the decoder input is [bos] + tgt[:-1].
struct EncodedExample {
    std::vector<int> src;
    std::vector<int> tgt;
};

namespace detail {

struct EncLayerCache {
    nn::LnCache ln1, ln2;
    nn::AttnCache attn;
    nn::FfnCache ffn;
    nn::DropCache drop1, drop2;
};

struct DecLayerCache {
    nn::LnCache ln1, ln2, ln3;
    nn::AttnCache self_attn, cross_attn;
    nn::FfnCache ffn;
    nn::DropCache drop1, drop2, drop3;
};

struct ForwardCache {
    std::vector<int> src, dec_in;
    Mat enc_x0, dec_x0;                 // embedding outputs
    std::vector<EncLayerCache> enc_layers;
    std::vector<DecLayerCache> dec_layers;
    nn::LnCache enc_ln, dec_ln;
    Mat enc_out, dec_out;               // post final layernorm
    Mat logits;
};

inline Mat embed(const std::vector<double>& params, const ParamLayout::Seg& tok,
                 const ParamLayout::Seg& pos, const std::vector<int>& ids, int vocab_size) {
    Mat x(static_cast<Eigen::Index>(ids.size()), static_cast<Eigen::Index>(tok.cols));
    auto te = nn::mat(params, tok);
    auto pe = nn::mat(params, pos);
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || ids[t] >= vocab_size)
            throw InputError("token id out of range: " + std::to_string(ids[t]));
        x.row(static_cast<Eigen::Index>(t)) =
            te.row(ids[t]) + pe.row(static_cast<Eigen::Index>(t));
    }
    return x;
}

// Runs the full teacher-forced pass. `rng` enables dropout (training mode).
inline void run_forward(const Checkpoint& ckpt, const ParamLayout& layout,
                        const std::vector<int>& src, const std::vector<int>& dec_in,
                        Rng* rng, ForwardCache& fc) {
    const ModelConfig& cfg = ckpt.config;
    if (src.empty() || dec_in.empty()) throw InputError("model input must be nonempty");
    if (src.size() > static_cast<std::size_t>(cfg.max_positions) ||
        dec_in.size() > static_cast<std::size_t>(cfg.max_positions))
        throw InputError("sequence length exceeds max_positions");
    const std::vector<double>& P = ckpt.params;
    fc.src = src;
    fc.dec_in = dec_in;

    // encoder
    fc.enc_x0 = embed(P, layout.tok_emb, layout.pos_enc, src, cfg.vocab_size);
    Mat x = fc.enc_x0;
    fc.enc_layers.assign(layout.enc.size(), {});
    for (std::size_t l = 0; l < layout.enc.size(); ++l) {
        const auto& L = layout.enc[l];
        auto& c = fc.enc_layers[l];
        Mat h = nn::layernorm_forward(x, nn::vec(P, L.ln1_g), nn::vec(P, L.ln1_b), c.ln1);
        Mat a = nn::attention_forward(h, h, P, L.self_attn, cfg.heads, false, c.attn);
        nn::dropout_forward(a, cfg.dropout, rng, c.drop1);
        x += a;
        Mat h2 = nn::layernorm_forward(x, nn::vec(P, L.ln2_g), nn::vec(P, L.ln2_b), c.ln2);
        Mat f = nn::ffn_forward(h2, P, L, c.ffn);
        nn::dropout_forward(f, cfg.dropout, rng, c.drop2);
        x += f;
    }
    fc.enc_out = nn::layernorm_forward(x, nn::vec(P, layout.enc_ln_g), nn::vec(P, layout.enc_ln_b),
                                       fc.enc_ln);

    // decoder
    fc.dec_x0 = embed(P, layout.tok_emb, layout.pos_dec, dec_in, cfg.vocab_size);
    Mat y = fc.dec_x0;
    fc.dec_layers.assign(layout.dec.size(), {});
    for (std::size_t l = 0; l < layout.dec.size(); ++l) {
        const auto& L = layout.dec[l];
        auto& c = fc.dec_layers[l];
        Mat h = nn::layernorm_forward(y, nn::vec(P, L.ln1_g), nn::vec(P, L.ln1_b), c.ln1);
        Mat a = nn::attention_forward(h, h, P, L.self_attn, cfg.heads, true, c.self_attn);
        nn::dropout_forward(a, cfg.dropout, rng, c.drop1);
        y += a;
        Mat h2 = nn::layernorm_forward(y, nn::vec(P, L.ln2_g), nn::vec(P, L.ln2_b), c.ln2);
        Mat ca = nn::attention_forward(h2, fc.enc_out, P, L.cross_attn, cfg.heads, false, c.cross_attn);
        nn::dropout_forward(ca, cfg.dropout, rng, c.drop2);
        y += ca;
        Mat h3 = nn::layernorm_forward(y, nn::vec(P, L.ln3_g), nn::vec(P, L.ln3_b), c.ln3);
        Mat f = nn::ffn_forward(h3, P, L, c.ffn);
        nn::dropout_forward(f, cfg.dropout, rng, c.drop3);
        y += f;
    }
    fc.dec_out = nn::layernorm_forward(y, nn::vec(P, layout.dec_ln_g), nn::vec(P, layout.dec_ln_b),
                                       fc.dec_ln);
    fc.logits = (fc.dec_out * nn::mat(P, layout.head_w)).rowwise() + nn::vec(P, layout.head_b);
}

// Backward from d(logits); accumulates into `grad` (same layout as params).
inline void run_backward(const Checkpoint& ckpt, const ParamLayout& layout, const ForwardCache& fc,
                         const Mat& dlogits, std::vector<double>& grad) {
    const ModelConfig& cfg = ckpt.config;
    const std::vector<double>& P = ckpt.params;

    nn::mat(grad, layout.head_w) += fc.dec_out.transpose() * dlogits;
    nn::vec(grad, layout.head_b) += dlogits.colwise().sum();
    Mat dy = dlogits * nn::mat(P, layout.head_w).transpose();
    dy = nn::layernorm_backward(dy, fc.dec_ln, nn::vec(P, layout.dec_ln_g), grad,
                                layout.dec_ln_g, layout.dec_ln_b);

    Mat denc_out = Mat::Zero(fc.enc_out.rows(), fc.enc_out.cols());
    for (std::size_t li = layout.dec.size(); li-- > 0;) {
        const auto& L = layout.dec[li];
        const auto& c = fc.dec_layers[li];
        Mat df = dy;
        nn::dropout_backward(df, c.drop3);
        Mat dh3 = nn::ffn_backward(df, c.ffn, P, L, grad);
        dy += nn::layernorm_backward(dh3, c.ln3, nn::vec(P, L.ln3_g), grad, L.ln3_g, L.ln3_b);

        Mat dca = dy;
        nn::dropout_backward(dca, c.drop2);
        Mat dh2 = nn::attention_backward(dca, c.cross_attn, P, L.cross_attn, cfg.heads, grad, denc_out);
        dy += nn::layernorm_backward(dh2, c.ln2, nn::vec(P, L.ln2_g), grad, L.ln2_g, L.ln2_b);

        Mat da = dy;
        nn::dropout_backward(da, c.drop1);
        Mat dself = Mat::Zero(dy.rows(), dy.cols());
        Mat dh = nn::attention_backward(da, c.self_attn, P, L.self_attn, cfg.heads, grad, dself);
        dh += dself;
        dy += nn::layernorm_backward(dh, c.ln1, nn::vec(P, L.ln1_g), grad, L.ln1_g, L.ln1_b);
    }
    {  // decoder embeddings
        auto te = nn::mat(grad, layout.tok_emb);
        auto pe = nn::mat(grad, layout.pos_dec);
        for (std::size_t t = 0; t < fc.dec_in.size(); ++t) {
            te.row(fc.dec_in[t]) += dy.row(static_cast<Eigen::Index>(t));
            pe.row(static_cast<Eigen::Index>(t)) += dy.row(static_cast<Eigen::Index>(t));
        }
    }

    Mat dx = nn::layernorm_backward(denc_out, fc.enc_ln, nn::vec(P, layout.enc_ln_g), grad,
                                    layout.enc_ln_g, layout.enc_ln_b);
    for (std::size_t li = layout.enc.size(); li-- > 0;) {
        const auto& L = layout.enc[li];
        const auto& c = fc.enc_layers[li];
        Mat df = dx;
        nn::dropout_backward(df, c.drop2);
        Mat dh2 = nn::ffn_backward(df, c.ffn, P, L, grad);
        dx += nn::layernorm_backward(dh2, c.ln2, nn::vec(P, L.ln2_g), grad, L.ln2_g, L.ln2_b);

        Mat da = dx;
        nn::dropout_backward(da, c.drop1);
        Mat dself = Mat::Zero(dx.rows(), dx.cols());
        Mat dh = nn::attention_backward(da, c.attn, P, L.self_attn, cfg.heads, grad, dself);
        dh += dself;
        dx += nn::layernorm_backward(dh, c.ln1, nn::vec(P, L.ln1_g), grad, L.ln1_g, L.ln1_b);
    }
    {  // encoder embeddings
        auto te = nn::mat(grad, layout.tok_emb);
        auto pe = nn::mat(grad, layout.pos_enc);
        for (std::size_t t = 0; t < fc.src.size(); ++t) {
            te.row(fc.src[t]) += dx.row(static_cast<Eigen::Index>(t));
            pe.row(static_cast<Eigen::Index>(t)) += dx.row(static_cast<Eigen::Index>(t));
        }
    }
}

inline std::vector<int> decoder_input_for(const std::vector<int>& tgt) {
    std::vector<int> dec_in;
    dec_in.reserve(tgt.size());
    dec_in.push_back(Vocabulary::kBos);
    dec_in.insert(dec_in.end(), tgt.begin(), tgt.end() - 1);
    return dec_in;
}

}  // namespace detail

// Teacher-forced logits: row t depends only on src and tgt_prefix[0..t].
inline Mat forward(const Checkpoint& ckpt, const std::vector<int>& src,
                   const std::vector<int>& tgt_prefix, bool train_mode = false,
                   Rng* dropout_rng = nullptr) {
    ckpt.validate();
    ParamLayout layout(ckpt.config);
    detail::ForwardCache fc;
    detail::run_forward(ckpt, layout, src, tgt_prefix, train_mode ? dropout_rng : nullptr, fc);
    return fc.logits;
}

// Summed token-level cross entropy (no length normalization here; difficulty
// scoring divides by the target length).
inline double loss(const Checkpoint& ckpt, const EncodedExample& ex) {
    if (ex.tgt.empty()) throw InputError("loss: target must be nonempty");
    ParamLayout layout(ckpt.config);
    detail::ForwardCache fc;
    detail::run_forward(ckpt, layout, ex.src, detail::decoder_input_for(ex.tgt), nullptr, fc);
    double total = 0.0;
    for (Eigen::Index t = 0; t < fc.logits.rows(); ++t) {
        const auto row = fc.logits.row(t);
        double mx = row.maxCoeff();
        double lse = mx + std::log((row.array() - mx).exp().sum());
        total += lse - row(ex.tgt[static_cast<std::size_t>(t)]);
    }
    return total;
}

// Loss plus gradient accumulation (grad must have param_count entries).
inline double loss_with_grad(const Checkpoint& ckpt, const EncodedExample& ex,
                             std::vector<double>& grad, Rng* dropout_rng = nullptr) {
    if (ex.tgt.empty()) throw InputError("loss: target must be nonempty");
    ParamLayout layout(ckpt.config);
    if (grad.size() != layout.total) throw CompatibilityError("gradient buffer has wrong length");
    detail::ForwardCache fc;
    detail::run_forward(ckpt, layout, ex.src, detail::decoder_input_for(ex.tgt), dropout_rng, fc);
    double total = 0.0;
    Mat dlogits(fc.logits.rows(), fc.logits.cols());
    for (Eigen::Index t = 0; t < fc.logits.rows(); ++t) {
        const auto row = fc.logits.row(t);
        double mx = row.maxCoeff();
        Eigen::ArrayXd e = (row.array() - mx).exp().transpose();
        double z = e.sum();
        total += mx + std::log(z) - row(ex.tgt[static_cast<std::size_t>(t)]);
        dlogits.row(t) = (e / z).matrix().transpose();
        dlogits(t, ex.tgt[static_cast<std::size_t>(t)]) -= 1.0;
    }
    detail::run_backward(ckpt, layout, fc, dlogits, grad);
    return total;
}

// Generation-side helpers: encode the source once, then query last-position
// logits for growing target prefixes.
inline Mat encode_source(const Checkpoint& ckpt, const std::vector<int>& src) {
    ParamLayout layout(ckpt.config);
    detail::ForwardCache fc;
    // A one-token probe target is enough to run the encoder; decoder output is ignored.
    detail::run_forward(ckpt, layout, src, {Vocabulary::kBos}, nullptr, fc);
    return fc.enc_out;
}

inline RowVec next_token_logits(const Checkpoint& ckpt, const Mat& enc_out,
                                const std::vector<int>& dec_in) {
    const ModelConfig& cfg = ckpt.config;
    if (dec_in.size() > static_cast<std::size_t>(cfg.max_positions))
        throw InputError("decoder prefix exceeds max_positions");
    ParamLayout layout(cfg);
    const std::vector<double>& P = ckpt.params;
    Mat y = detail::embed(P, layout.tok_emb, layout.pos_dec, dec_in, cfg.vocab_size);
    for (std::size_t l = 0; l < layout.dec.size(); ++l) {
        const auto& L = layout.dec[l];
        detail::DecLayerCache c;
        Mat h = nn::layernorm_forward(y, nn::vec(P, L.ln1_g), nn::vec(P, L.ln1_b), c.ln1);
        Mat a = nn::attention_forward(h, h, P, L.self_attn, cfg.heads, true, c.self_attn);
        y += a;
        Mat h2 = nn::layernorm_forward(y, nn::vec(P, L.ln2_g), nn::vec(P, L.ln2_b), c.ln2);
        Mat ca = nn::attention_forward(h2, enc_out, P, L.cross_attn, cfg.heads, false, c.cross_attn);
        y += ca;
        Mat h3 = nn::layernorm_forward(y, nn::vec(P, L.ln3_g), nn::vec(P, L.ln3_b), c.ln3);
        Mat f = nn::ffn_forward(h3, P, L, c.ffn);
        y += f;
    }
    nn::LnCache lnc;
    Mat out = nn::layernorm_forward(y, nn::vec(P, layout.dec_ln_g), nn::vec(P, layout.dec_ln_b), lnc);
    RowVec last = out.row(out.rows() - 1);
    return (last * nn::mat(P, layout.head_w)) + nn::vec(P, layout.head_b);
}

// ---------------------------------------------------------------------------
// Checkpoint files: text header (config, vocab hash, task id) followed by raw
// little-endian float32 parameters.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    ckpt.validate();
    nlohmann::ordered_json header;
    header["format"] = "circle-checkpoint";
    header["version"] = 1;
    header["config"] = {
        {"layers", ckpt.config.layers},       {"heads", ckpt.config.heads},
        {"d_model", ckpt.config.d_model},     {"d_ff", ckpt.config.d_ff},
        {"dropout", ckpt.config.dropout},     {"max_positions", ckpt.config.max_positions},
        {"vocab_size", ckpt.config.vocab_size},
    };
    char hash_hex[17];
    std::snprintf(hash_hex, sizeof(hash_hex), "%016llx",
                  static_cast<unsigned long long>(ckpt.vocab_hash));
    header["vocab_hash"] = hash_hex;
    header["task_id"] = ckpt.task_id;
    header["param_count"] = ckpt.params.size();
    std::string out = header.dump();
    out += '\n';
    std::vector<float> f32(ckpt.params.size());
    for (std::size_t i = 0; i < ckpt.params.size(); ++i)
        f32[i] = static_cast<float>(ckpt.params[i]);
    out.append(reinterpret_cast<const char*>(f32.data()), f32.size() * sizeof(float));
    write_file(path, out);
}

inline Checkpoint load_checkpoint_raw(const std::string& path) {
    std::string content = read_file(path);
    std::size_t nl = content.find('\n');
    if (nl == std::string::npos) throw ParseError("checkpoint: missing header line");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(content.substr(0, nl));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("checkpoint header: ") + e.what());
    }
    if (header.value("format", "") != "circle-checkpoint")
        throw ParseError("not a circle checkpoint file");
    Checkpoint ckpt;
    const auto& c = header.at("config");
    ckpt.config.layers = c.at("layers").get<int>();
    ckpt.config.heads = c.at("heads").get<int>();
    ckpt.config.d_model = c.at("d_model").get<int>();
    ckpt.config.d_ff = c.at("d_ff").get<int>();
    ckpt.config.dropout = c.at("dropout").get<double>();
    ckpt.config.max_positions = c.at("max_positions").get<int>();
    ckpt.config.vocab_size = c.at("vocab_size").get<int>();
    ckpt.vocab_hash = std::stoull(header.at("vocab_hash").get<std::string>(), nullptr, 16);
    ckpt.task_id = header.at("task_id").get<int>();
    std::size_t count = header.at("param_count").get<std::size_t>();
    std::size_t expected_bytes = count * sizeof(float);
    if (content.size() - nl - 1 != expected_bytes)
        throw ParseError("checkpoint: parameter payload has wrong size");
    ckpt.params.resize(count);
    std::vector<float> f32(count);
    std::memcpy(f32.data(), content.data() + nl + 1, expected_bytes);
    for (std::size_t i = 0; i < count; ++i) ckpt.params[i] = static_cast<double>(f32[i]);
    ckpt.validate();
    return ckpt;
}

inline Checkpoint load_checkpoint(const std::string& path, const Vocabulary& vocab) {
    Checkpoint ckpt = load_checkpoint_raw(path);
    if (ckpt.vocab_hash != vocab.hash())
        throw CompatibilityError("checkpoint was saved with a different vocabulary");
    return ckpt;
}

}  // namespace circle
