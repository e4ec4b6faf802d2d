#pragma once

// Toy conditional score network s(X_t | c, t).
//
// Frames are processed as rows: X (F per frame) -> input projection (h),
// plus content, speaker and time embeddings, then `blocks` residual blocks of
// single-head self-attention over time and a SiLU feed-forward, then an
// output projection back to F.
//
// Inputs and outputs are preconditioned per noise level: with lambda_t,
// sigma_t and data scale sd, the network sees x_t / sqrt(D) where
// D = sigma_t^2 + lambda_t sd^2, and its output F enters the clean-mel
// estimate x0_hat = (sd^2 sqrt(lambda_t) x_t + sigma_t sd sqrt(D) F) / D.
// The returned score is -(x_t - sqrt(lambda_t) x0_hat) / sigma_t^2
//   = -x_t / D + sqrt(lambda_t) sd / (sigma_t sqrt(D)) F.
//
// Each attention block has two linear layers, a fused q/k/v projection
// (3h×h) and an output projection (h×h). These are the adapter injection
// sites, in the order qkv0, out0, qkv1, out1, ...

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nanovoice/adapter_bank.hpp"
#include "nanovoice/container.hpp"
#include "nanovoice/diffusion.hpp"
#include "nanovoice/rng.hpp"
#include "nanovoice/tensor.hpp"

namespace nanovoice {

struct ScoreNetConfig {
    std::size_t mel_bins = 16;       // F
    std::size_t hidden = 32;         // h
    std::size_t ff_hidden = 64;
    std::size_t blocks = 2;
    std::size_t content_codes = 8;
    std::size_t train_speakers = 8;  // rows of the pretraining speaker-embedding table
    std::size_t time_features = 16;
    double data_std = 1.0;           // per-element scale of clean mels, for preconditioning
    NoiseSchedule schedule{};

    bool operator==(const ScoreNetConfig& o) const {
        return mel_bins == o.mel_bins && hidden == o.hidden && ff_hidden == o.ff_hidden && blocks == o.blocks &&
               content_codes == o.content_codes && train_speakers == o.train_speakers &&
               time_features == o.time_features && data_std == o.data_std && schedule.beta0 == o.schedule.beta0 &&
               schedule.beta1 == o.schedule.beta1;
    }
};

struct AttentionBlock {
    Tensor w_qkv;  // 3h×h
    Tensor w_out;  // h×h
    Tensor w_ff1;  // ff×h
    Tensor b_ff1;  // ff
    Tensor w_ff2;  // h×ff
    Tensor b_ff2;  // h
};

struct ScoreNet {
    ScoreNetConfig config;
    Tensor w_in, b_in;        // h×F, h
    Tensor content_emb;       // codes×h
    Tensor speaker_emb;       // train_speakers×h
    Tensor w_t1, b_t1;        // h×time_features, h
    Tensor w_t2, b_t2;        // h×h, h
    std::vector<AttentionBlock> blocks;
    Tensor w_out, b_out;      // F×h, F

    /// Frozen weights of the adapter injection sites, in site order.
    std::vector<Tensor> adapted_base_weights() const {
        std::vector<Tensor> out;
        for (const auto& b : blocks) {
            out.push_back(b.w_qkv);
            out.push_back(b.w_out);
        }
        return out;
    }

    /// Every base parameter with a stable name, in serialization order.
    std::vector<std::pair<std::string, Tensor*>> named_params() {
        std::vector<std::pair<std::string, Tensor*>> out{{"w_in", &w_in},
                                                         {"b_in", &b_in},
                                                         {"content_emb", &content_emb},
                                                         {"speaker_emb", &speaker_emb},
                                                         {"w_t1", &w_t1},
                                                         {"b_t1", &b_t1},
                                                         {"w_t2", &w_t2},
                                                         {"b_t2", &b_t2}};
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            auto& b = blocks[i];
            const std::string p = "block" + std::to_string(i) + ".";
            out.insert(out.end(), {{p + "w_qkv", &b.w_qkv},
                                   {p + "w_out", &b.w_out},
                                   {p + "w_ff1", &b.w_ff1},
                                   {p + "b_ff1", &b.b_ff1},
                                   {p + "w_ff2", &b.w_ff2},
                                   {p + "b_ff2", &b.b_ff2}});
        }
        out.emplace_back("w_out", &w_out);
        out.emplace_back("b_out", &b_out);
        return out;
    }

    std::vector<std::pair<std::string, const Tensor*>> named_params() const {
        std::vector<std::pair<std::string, const Tensor*>> out;
        for (auto& [n, p] : const_cast<ScoreNet*>(this)->named_params()) out.emplace_back(n, p);
        return out;
    }

    bool operator==(const ScoreNet& o) const {
        if (!(config == o.config)) return false;
        auto a = named_params();
        auto b = o.named_params();
        for (std::size_t i = 0; i < a.size(); ++i)
            if (!(*a[i].second == *b[i].second)) return false;
        return true;
    }
};

/// Random initialization; fan-in scaled Gaussian weights, zero biases.
inline ScoreNet make_score_net(const ScoreNetConfig& cfg, RngStream& stream) {
    cfg.schedule.validate();
    auto lin = [&](std::size_t out, std::size_t in, double gain = 1.0) {
        return randn(stream, {out, in}) * (gain / std::sqrt(static_cast<double>(in)));
    };
    const std::size_t F = cfg.mel_bins, h = cfg.hidden;
    ScoreNet net;
    net.config = cfg;
    net.w_in = lin(h, F);
    net.b_in = Tensor({h});
    net.content_emb = randn(stream, {cfg.content_codes, h}) * 0.5;
    net.speaker_emb = randn(stream, {cfg.train_speakers, h}) * 0.5;
    net.w_t1 = lin(h, cfg.time_features);
    net.b_t1 = Tensor({h});
    net.w_t2 = lin(h, h);
    net.b_t2 = Tensor({h});
    for (std::size_t i = 0; i < cfg.blocks; ++i) {
        AttentionBlock b;
        b.w_qkv = lin(3 * h, h);
        b.w_out = lin(h, h, 0.5);
        b.w_ff1 = lin(cfg.ff_hidden, h);
        b.b_ff1 = Tensor({cfg.ff_hidden});
        b.w_ff2 = lin(h, cfg.ff_hidden, 0.5);
        b.b_ff2 = Tensor({h});
        net.blocks.push_back(std::move(b));
    }
    net.w_out = lin(F, h, 0.5);
    net.b_out = Tensor({F});
    return net;
}

/// Sinusoidal features of t in [0, 1].
inline std::vector<double> time_features(double t, std::size_t dims) {
    std::vector<double> out(dims);
    const std::size_t half = dims / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(1000.0) * static_cast<double>(i) / static_cast<double>(half));
        const double arg = 100.0 * t * freq;
        out[i] = std::sin(arg);
        out[half + i] = std::cos(arg);
    }
    return out;
}

inline double silu(double z) { return z / (1.0 + std::exp(-z)); }
inline double silu_grad(double z) {
    const double s = 1.0 / (1.0 + std::exp(-z));
    return s * (1.0 + z * (1.0 - s));
}

/// Conditioning for one forward pass over N references.
struct ScoreInput {
    Tensor x_t;                              // N×F×L
    std::vector<double> t;                   // per reference
    const std::vector<std::vector<int>>* content = nullptr;  // N×L
    const Tensor* mask = nullptr;            // N×1×L
    /// Pretraining speaker index per reference, -1 (or empty) for none.
    std::vector<int> speaker;
};

struct BlockCache {
    Tensor h_in;                  // (N·L)×h, block input
    Tensor qkv;                   // (N·L)×3h
    Tensor probs;                 // N×L×L attention weights
    Tensor attn;                  // (N·L)×h, P·v
    Tensor h_mid;                 // after attention residual
    Tensor z1;                    // ff pre-activation
    Tensor f1;                    // silu(z1)
    std::vector<MergedWeight> merged_qkv, merged_out;
};

struct ForwardCache {
    std::size_t N = 0, L = 0;
    std::vector<double> in_gain;    // 1/sqrt(D) per reference
    std::vector<double> skip_gain;  // -1/D
    std::vector<double> out_gain;   // sqrt(lambda) sd / (sigma sqrt(D))
    std::vector<std::size_t> lengths;
    Tensor frames;                // (N·L)×F input frames
    Tensor tf;                    // N×time_features
    Tensor tz1;                   // N×h, time MLP pre-activation
    Tensor ta1;                   // N×h
    std::vector<BlockCache> blocks;
    Tensor h_final;               // (N·L)×h
    Tensor row_mask;              // N·L
};

namespace detail {

// rows×d = X (rows×k) · W^T + bias (bias may be empty)
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    Tensor y({x.dim(0), w.dim(0)});
    gemm_nt(x.data(), w.data(), y.data(), x.dim(0), x.dim(1), w.dim(0), false);
    if (!bias.empty())
        for (std::size_t i = 0; i < y.dim(0); ++i)
            for (std::size_t j = 0; j < y.dim(1); ++j) y(i, j) += bias[j];
    return y;
}

inline void linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor* dx, Tensor* dw, Tensor* db) {
    if (dx) {
        *dx = Tensor({x.dim(0), x.dim(1)});
        gemm_nn(dy.data(), w.data(), dx->data(), dy.dim(0), dy.dim(1), w.dim(1), false);
    }
    if (dw) gemm_tn(dy.data(), x.data(), dw->data(), dy.dim(0), dy.dim(1), x.dim(1), true);
    if (db)
        for (std::size_t i = 0; i < dy.dim(0); ++i)
            for (std::size_t j = 0; j < dy.dim(1); ++j) (*db)[j] += dy(i, j);
}

// Adapter site forward: frozen weight over all rows, or per-speaker merges.
inline Tensor site_forward(const Tensor& x, const Tensor& w0, const std::vector<MergedWeight>* merged, std::size_t N,
                           std::size_t L) {
    if (!merged) return linear(x, w0, Tensor{});
    const Tensor x3 = x.reshaped({N, L, x.dim(1)});
    return adapted_forward(*merged, x3).reshaped({N * L, w0.dim(0)});
}

}  // namespace detail

/// Forward pass. With a bank, the attention projections use each reference's
/// merged adapter weight; the bank's N must equal the batch size.
inline Tensor score_forward(const ScoreNet& net, const AdapterBank* bank, const ScoreInput& in,
                            ForwardCache* cache_out = nullptr) {
    const auto& cfg = net.config;
    require_rank(in.x_t, 3, "score_forward");
    const std::size_t N = in.x_t.dim(0), F = in.x_t.dim(1), L = in.x_t.dim(2), h = cfg.hidden;
    if (F != cfg.mel_bins) throw DimensionError("score_forward: mel bins " + std::to_string(F) + " vs net F=" +
                                                std::to_string(cfg.mel_bins));
    if (in.t.size() != N) throw DimensionError("score_forward: need one t per reference");
    if (!in.content || in.content->size() != N) throw DimensionError("score_forward: need content codes per reference");
    if (!in.mask || in.mask->shape() != Shape{N, 1, L}) throw DimensionError("score_forward: mask must be N×1×L");
    if (bank) {
        if (bank->num_speakers() != N)
            throw CompatibilityError("adapter bank holds N=" + std::to_string(bank->num_speakers()) +
                                     " speakers but the batch has " + std::to_string(N));
        if (bank->layers.size() != 2 * cfg.blocks)
            throw CompatibilityError("adapter bank has " + std::to_string(bank->layers.size()) +
                                     " layers, network has " + std::to_string(2 * cfg.blocks) + " sites");
    }

    ForwardCache local;
    ForwardCache& c = cache_out ? *cache_out : local;
    c = ForwardCache{};
    c.N = N;
    c.L = L;
    c.row_mask = Tensor({N * L});
    c.lengths.assign(N, 0);
    for (std::size_t n = 0; n < N; ++n) {
        require_unit_time(in.t[n], "score_forward");
        const double sigma = sigma_of(cfg.schedule, in.t[n]), lambda = lambda_of(cfg.schedule, in.t[n]);
        if (!(sigma > 0.0)) throw DomainError("score_forward: t=0 has no defined score");
        const double D = sigma * sigma + lambda * cfg.data_std * cfg.data_std;
        c.in_gain.push_back(1.0 / std::sqrt(D));
        c.skip_gain.push_back(-1.0 / D);
        c.out_gain.push_back(std::sqrt(lambda) * cfg.data_std / (sigma * std::sqrt(D)));
        for (std::size_t j = 0; j < L; ++j) {
            c.row_mask[n * L + j] = (*in.mask)(n, 0, j);
            if ((*in.mask)(n, 0, j) != 0.0) c.lengths[n] = j + 1;
        }
    }

    // frames: (N·L)×F
    c.frames = Tensor({N * L, F});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t j = 0; j < L; ++j) c.frames(n * L + j, f) = c.in_gain[n] * in.x_t(n, f, j);

    // time MLP, one row per reference
    c.tf = Tensor({N, cfg.time_features});
    for (std::size_t n = 0; n < N; ++n) {
        const auto feats = time_features(in.t[n], cfg.time_features);
        std::copy(feats.begin(), feats.end(), c.tf.data() + n * cfg.time_features);
    }
    c.tz1 = detail::linear(c.tf, net.w_t1, net.b_t1);
    c.ta1 = Tensor(c.tz1.shape());
    for (std::size_t i = 0; i < c.tz1.size(); ++i) c.ta1[i] = silu(c.tz1[i]);
    const Tensor temb = detail::linear(c.ta1, net.w_t2, net.b_t2);

    Tensor hs = detail::linear(c.frames, net.w_in, net.b_in);
    for (std::size_t n = 0; n < N; ++n) {
        const int spk = in.speaker.empty() ? -1 : in.speaker.at(n);
        if (spk >= static_cast<int>(cfg.train_speakers))
            throw DomainError("score_forward: speaker index " + std::to_string(spk) + " out of range");
        for (std::size_t j = 0; j < L; ++j) {
            const int code = (*in.content)[n].at(j);
            if (code < 0 || static_cast<std::size_t>(code) >= cfg.content_codes)
                throw DomainError("score_forward: content code " + std::to_string(code) + " out of range");
            double* row = hs.data() + (n * L + j) * h;
            for (std::size_t e = 0; e < h; ++e) {
                row[e] += net.content_emb(static_cast<std::size_t>(code), e) + temb(n, e);
                if (spk >= 0) row[e] += net.speaker_emb(static_cast<std::size_t>(spk), e);
            }
        }
    }

    const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(h));
    c.blocks.resize(cfg.blocks);
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
        const AttentionBlock& blk = net.blocks[b];
        BlockCache& bc = c.blocks[b];
        bc.h_in = hs;
        if (bank) {
            bc.merged_qkv = merge_all(*bank, 2 * b);
            bc.merged_out = merge_all(*bank, 2 * b + 1);
        }
        bc.qkv = detail::site_forward(hs, blk.w_qkv, bank ? &bc.merged_qkv : nullptr, N, L);

        bc.probs = Tensor({N, L, L});
        bc.attn = Tensor({N * L, h});
        for (std::size_t n = 0; n < N; ++n) {
            const std::size_t len = c.lengths[n];
            for (std::size_t i = 0; i < L; ++i) {
                const double* q = bc.qkv.data() + (n * L + i) * 3 * h;
                double* p = bc.probs.data() + (n * L + i) * L;
                double mx = -INFINITY;
                for (std::size_t j = 0; j < len; ++j) {
                    const double* k = bc.qkv.data() + (n * L + j) * 3 * h + h;
                    double s = 0.0;
                    for (std::size_t e = 0; e < h; ++e) s += q[e] * k[e];
                    p[j] = s * inv_sqrt_h;
                    mx = std::max(mx, p[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < len; ++j) z += (p[j] = std::exp(p[j] - mx));
                for (std::size_t j = 0; j < len; ++j) p[j] /= z;
                double* o = bc.attn.data() + (n * L + i) * h;
                for (std::size_t j = 0; j < len; ++j) {
                    const double* v = bc.qkv.data() + (n * L + j) * 3 * h + 2 * h;
                    for (std::size_t e = 0; e < h; ++e) o[e] += p[j] * v[e];
                }
            }
        }
        const Tensor proj = detail::site_forward(bc.attn, blk.w_out, bank ? &bc.merged_out : nullptr, N, L);
        hs += proj;
        bc.h_mid = hs;
        bc.z1 = detail::linear(hs, blk.w_ff1, blk.b_ff1);
        bc.f1 = Tensor(bc.z1.shape());
        for (std::size_t i = 0; i < bc.z1.size(); ++i) bc.f1[i] = silu(bc.z1[i]);
        hs += detail::linear(bc.f1, blk.w_ff2, blk.b_ff2);
    }
    c.h_final = hs;
    const Tensor out = detail::linear(hs, net.w_out, net.b_out);

    Tensor score({N, F, L});
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t j = 0; j < L; ++j) {
            if (c.row_mask[n * L + j] == 0.0) continue;
            for (std::size_t f = 0; f < F; ++f)
                score(n, f, j) = c.skip_gain[n] * in.x_t(n, f, j) + c.out_gain[n] * out(n * L + j, f);
        }
    }
    check_finite(score, "score_forward");
    return score;
}

/// Gradients of the base parameters, laid out like ScoreNet::named_params.
struct NetGradients {
    std::vector<Tensor> grads;
};

inline NetGradients zero_net_gradients(const ScoreNet& net) {
    NetGradients g;
    for (auto& [name, p] : net.named_params()) g.grads.emplace_back(p->shape());
    return g;
}

/// Backward pass for upstream dL/dscore (N×F×L). Fills adapter gradients when
/// `bank_grads` is given (requires the bank used in forward) and base-parameter
/// gradients when `net_grads` is given; both accumulate.
inline void score_backward(const ScoreNet& net, const AdapterBank* bank, const ScoreInput& in, const ForwardCache& c,
                           const Tensor& d_score, BankGradients* bank_grads, NetGradients* net_grads) {
    const auto& cfg = net.config;
    const std::size_t N = c.N, L = c.L, F = cfg.mel_bins, h = cfg.hidden;
    if (d_score.shape() != Shape{N, F, L}) throw DimensionError("score_backward: upstream shape mismatch");
    if (bank_grads && !bank) throw ConfigError("score_backward: adapter gradients requested without a bank");

    // Slots into net_grads->grads in named_params order.
    auto slot = [&](std::size_t i) -> Tensor* { return net_grads ? &net_grads->grads[i] : nullptr; };
    constexpr std::size_t kWin = 0, kBin = 1, kContent = 2, kSpeaker = 3, kWt1 = 4, kBt1 = 5, kWt2 = 6, kBt2 = 7;
    auto block_slot = [&](std::size_t b, std::size_t j) { return slot(8 + 6 * b + j); };
    const std::size_t kWout = 8 + 6 * cfg.blocks, kBout = kWout + 1;

    Tensor d_out({N * L, F});
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t j = 0; j < L; ++j) {
            if (c.row_mask[n * L + j] == 0.0) continue;
            for (std::size_t f = 0; f < F; ++f) d_out(n * L + j, f) = c.out_gain[n] * d_score(n, f, j);
        }
    }
    Tensor dh;
    detail::linear_backward(c.h_final, net.w_out, d_out, &dh, slot(kWout), slot(kBout));

    const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(h));
    for (std::size_t bi = cfg.blocks; bi-- > 0;) {
        const AttentionBlock& blk = net.blocks[bi];
        const BlockCache& bc = c.blocks[bi];
        // feed-forward residual
        Tensor df1;
        detail::linear_backward(bc.f1, blk.w_ff2, dh, &df1, block_slot(bi, 4), block_slot(bi, 5));
        for (std::size_t i = 0; i < df1.size(); ++i) df1[i] *= silu_grad(bc.z1[i]);
        Tensor dh_ff;
        detail::linear_backward(bc.h_mid, blk.w_ff1, df1, &dh_ff, block_slot(bi, 2), block_slot(bi, 3));
        dh += dh_ff;

        // output projection
        Tensor d_attn;
        if (bank) {
            auto [g, dx] = adapted_backward(*bank, 2 * bi + 1, bc.merged_out, bc.attn.reshaped({N, L, h}),
                                            dh.reshaped({N, L, h}));
            if (bank_grads) {
                auto& dst = (*bank_grads)[2 * bi + 1];
                if (!g.dB.empty()) dst.dB += g.dB;
                dst.dA += g.dA;
                if (!g.dm.empty()) dst.dm += g.dm;
            }
            d_attn = dx.reshaped({N * L, h});
            if (net_grads) detail::gemm_tn(dh.data(), bc.attn.data(), block_slot(bi, 1)->data(), N * L, h, h, true);
        } else {
            detail::linear_backward(bc.attn, blk.w_out, dh, &d_attn, block_slot(bi, 1), nullptr);
        }

        // attention
        Tensor d_qkv({N * L, 3 * h});
        std::vector<double> dp(L);
        for (std::size_t n = 0; n < N; ++n) {
            const std::size_t len = c.lengths[n];
            for (std::size_t i = 0; i < L; ++i) {
                const double* p = bc.probs.data() + (n * L + i) * L;
                const double* go = d_attn.data() + (n * L + i) * h;
                double dot_pd = 0.0;
                for (std::size_t j = 0; j < len; ++j) {
                    const double* v = bc.qkv.data() + (n * L + j) * 3 * h + 2 * h;
                    double* dv = d_qkv.data() + (n * L + j) * 3 * h + 2 * h;
                    double s = 0.0;
                    for (std::size_t e = 0; e < h; ++e) {
                        s += go[e] * v[e];
                        dv[e] += p[j] * go[e];
                    }
                    dp[j] = s;
                    dot_pd += p[j] * s;
                }
                const double* q = bc.qkv.data() + (n * L + i) * 3 * h;
                double* dq = d_qkv.data() + (n * L + i) * 3 * h;
                for (std::size_t j = 0; j < len; ++j) {
                    const double ds = p[j] * (dp[j] - dot_pd) * inv_sqrt_h;
                    if (ds == 0.0) continue;
                    const double* k = bc.qkv.data() + (n * L + j) * 3 * h + h;
                    double* dk = d_qkv.data() + (n * L + j) * 3 * h + h;
                    for (std::size_t e = 0; e < h; ++e) {
                        dq[e] += ds * k[e];
                        dk[e] += ds * q[e];
                    }
                }
            }
        }

        // qkv projection
        Tensor d_hin;
        if (bank) {
            auto [g, dx] = adapted_backward(*bank, 2 * bi, bc.merged_qkv, bc.h_in.reshaped({N, L, h}),
                                            d_qkv.reshaped({N, L, 3 * h}));
            if (bank_grads) {
                auto& dst = (*bank_grads)[2 * bi];
                if (!g.dB.empty()) dst.dB += g.dB;
                dst.dA += g.dA;
                if (!g.dm.empty()) dst.dm += g.dm;
            }
            d_hin = dx.reshaped({N * L, h});
            if (net_grads) detail::gemm_tn(d_qkv.data(), bc.h_in.data(), block_slot(bi, 0)->data(), N * L, 3 * h, h, true);
        } else {
            detail::linear_backward(bc.h_in, blk.w_qkv, d_qkv, &d_hin, block_slot(bi, 0), nullptr);
        }
        dh += d_hin;
    }

    if (!net_grads) return;
    // Embeddings and input projection.
    detail::linear_backward(c.frames, net.w_in, dh, nullptr, slot(kWin), slot(kBin));
    Tensor d_temb({N, h});
    for (std::size_t n = 0; n < N; ++n) {
        const int spk = in.speaker.empty() ? -1 : in.speaker[n];
        for (std::size_t j = 0; j < L; ++j) {
            const auto code = static_cast<std::size_t>((*in.content)[n][j]);
            const double* row = dh.data() + (n * L + j) * h;
            for (std::size_t e = 0; e < h; ++e) {
                (*slot(kContent))(code, e) += row[e];
                d_temb(n, e) += row[e];
                if (spk >= 0) (*slot(kSpeaker))(static_cast<std::size_t>(spk), e) += row[e];
            }
        }
    }
    Tensor d_ta1;
    detail::linear_backward(c.ta1, net.w_t2, d_temb, &d_ta1, slot(kWt2), slot(kBt2));
    for (std::size_t i = 0; i < d_ta1.size(); ++i) d_ta1[i] *= silu_grad(c.tz1[i]);
    detail::linear_backward(c.tf, net.w_t1, d_ta1, nullptr, slot(kWt1), slot(kBt1));
}

// ---------------------------------------------------------------------------
// Checkpoint ("NVSN")

inline constexpr char kNetMagic[] = "NVSN";

inline std::vector<unsigned char> serialize_net(const ScoreNet& net) {
    const auto& c = net.config;
    ByteWriter w(kNetMagic);
    for (std::size_t v : {c.mel_bins, c.hidden, c.ff_hidden, c.blocks, c.content_codes, c.train_speakers,
                          c.time_features})
        w.u32(static_cast<std::uint32_t>(v));
    w.f64(c.data_std);
    w.f64(c.schedule.beta0);
    w.f64(c.schedule.beta1);
    const auto params = net.named_params();
    w.u32(static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, t] : params) w.tensor(*t);
    return w.finish();
}

inline void save_net(const ScoreNet& net, const std::filesystem::path& path) {
    write_file_atomic(path, serialize_net(net));
}

inline ScoreNet deserialize_net(std::vector<unsigned char> bytes) {
    ByteReader in(std::move(bytes), std::string_view(kNetMagic, 4));
    ScoreNetConfig c;
    for (std::size_t* v : {&c.mel_bins, &c.hidden, &c.ff_hidden, &c.blocks, &c.content_codes, &c.train_speakers,
                           &c.time_features}) {
        const std::size_t at = in.offset();
        *v = in.u32();
        if (*v == 0 || *v > 65536) throw FormatError("bad network dimension", at);
    }
    std::size_t at = in.offset();
    c.data_std = in.f64();
    if (!(c.data_std > 0.0) || !std::isfinite(c.data_std)) throw FormatError("bad data scale", at);
    at = in.offset();
    c.schedule.beta0 = in.f64();
    c.schedule.beta1 = in.f64();
    try {
        c.schedule.validate();
    } catch (const ConfigError& e) {
        throw FormatError(e.what(), at);
    }
    // Shapes come from a freshly built net of the same config.
    RngStream dummy{0, 0, 0};
    ScoreNet net = make_score_net(c, dummy);
    auto params = net.named_params();
    at = in.offset();
    if (in.u32() != params.size()) throw FormatError("parameter count does not match the network layout", at);
    for (auto& [name, t] : params) *t = in.tensor(t->shape());
    in.expect_end();
    return net;
}

inline ScoreNet load_net(const std::filesystem::path& path) { return deserialize_net(read_file_bytes(path)); }

}  // namespace nanovoice
