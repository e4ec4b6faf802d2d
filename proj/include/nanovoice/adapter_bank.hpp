#pragma once

// Multi-speaker low-rank adapters for a set of frozen linear layers.
//
// For speaker n and layer W0 (d×k) the merged weight is built from
//   V_n = W0 + alpha * B_n * A_n
// and, depending on the configuration,
//   W_n = V_n                        (plain)
//   W_n = m_n ⊙ V_n                   (scale only)
//   W_n = m_n ⊙ V_n / ||V_n||_c       (scale + column normalization)
// where m_n is a 1×k row broadcast over the d rows. B_n and A_n resolve to
// a single shared tensor in the modes that share them.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "nanovoice/container.hpp"
#include "nanovoice/errors.hpp"
#include "nanovoice/rng.hpp"
#include "nanovoice/tensor.hpp"

namespace nanovoice {

enum class SharingMode : std::uint8_t { batchwise = 0, shared_B = 1, shared_A = 2, shared_both = 3 };

inline bool shares_B(SharingMode m) { return m == SharingMode::shared_B || m == SharingMode::shared_both; }
inline bool shares_A(SharingMode m) { return m == SharingMode::shared_A || m == SharingMode::shared_both; }

inline std::string to_string(SharingMode m) {
    switch (m) {
        case SharingMode::batchwise: return "batchwise";
        case SharingMode::shared_B: return "shared-b";
        case SharingMode::shared_A: return "shared-a";
        case SharingMode::shared_both: return "shared-both";
    }
    return "?";
}

inline SharingMode parse_sharing_mode(const std::string& s) {
    if (s == "batchwise") return SharingMode::batchwise;
    if (s == "shared-b" || s == "shared_B" || s == "shared_b") return SharingMode::shared_B;
    if (s == "shared-a" || s == "shared_A" || s == "shared_a") return SharingMode::shared_A;
    if (s == "shared-both" || s == "shared_both") return SharingMode::shared_both;
    throw ConfigError("unknown sharing mode '" + s + "'");
}

struct AdapterConfig {
    int rank = 2;
    double alpha = 8.0;
    SharingMode mode = SharingMode::shared_B;
    bool scale_enabled = true;
    bool normalization_enabled = true;
    int num_speakers = 1;
    bool freeze_B = false;
    /// Treat ||V||_c as a constant in the backward pass (off by default).
    bool detach_norm = false;

    void validate() const {
        if (rank < 1) throw ConfigError("adapter rank must be >= 1");
        if (!(alpha > 0.0)) throw ConfigError("adapter alpha must be > 0");
        if (num_speakers < 1) throw ConfigError("adapter bank needs at least one speaker");
        if (normalization_enabled && !scale_enabled)
            throw ConfigError("column normalization requires the scale matrix to be enabled");
    }

    bool operator==(const AdapterConfig&) const = default;
};

struct AdaptedLayer {
    Tensor W0;  // d×k, frozen
    Tensor B;   // d×r when shared, N×d×r otherwise
    Tensor A;   // r×k when shared, N×r×k otherwise
    Tensor m;   // N×1×k, empty when the scale matrix is disabled

    std::size_t d() const { return W0.dim(0); }
    std::size_t k() const { return W0.dim(1); }
};

struct AdapterBank {
    AdapterConfig config;
    std::vector<AdaptedLayer> layers;
    /// Speaker id of each batch slot; keys the per-speaker init streams.
    std::vector<std::uint64_t> speaker_ids;

    std::size_t num_speakers() const { return static_cast<std::size_t>(config.num_speakers); }
    std::size_t rank() const { return static_cast<std::size_t>(config.rank); }
};

struct LayerGradients {
    Tensor dB;  // empty when B is frozen
    Tensor dA;
    Tensor dm;  // empty when the scale matrix is disabled
};

using BankGradients = std::vector<LayerGradients>;

namespace detail {

inline std::span<const double> speaker_view(const Tensor& t, std::size_t n) {
    return t.rank() == 3 ? t.slice_view(n) : t.values();
}
inline std::span<double> speaker_view(Tensor& t, std::size_t n) {
    return t.rank() == 3 ? t.slice_view(n) : t.values();
}

inline void check_speaker(const AdapterBank& bank, std::size_t n) {
    if (n >= bank.num_speakers())
        throw DimensionError("speaker index " + std::to_string(n) + " out of range for N=" +
                             std::to_string(bank.num_speakers()));
}

inline const AdaptedLayer& layer_at(const AdapterBank& bank, std::size_t l) {
    if (l >= bank.layers.size())
        throw DimensionError("layer index " + std::to_string(l) + " out of range (" +
                             std::to_string(bank.layers.size()) + " layers)");
    return bank.layers[l];
}

// Stream that draws speaker `id`'s batched B slices, independent of batch composition.
inline RngStream speaker_init_stream(const RngStream& base, std::uint64_t id) {
    RngStream s = base.derive(0x42u);
    s.stream_id = id;
    return s;
}

}  // namespace detail

/// Fresh bank: B ~ N(0, 1/d), A = 0, m = ||W0||_c for every speaker (ones when the
/// scale is used without normalization).
inline AdapterBank init_bank(const AdapterConfig& config, const std::vector<Tensor>& base_layers, RngStream& stream,
                             std::vector<std::uint64_t> speaker_ids = {}) {
    config.validate();
    if (base_layers.empty()) throw ConfigError("init_bank: no layers to adapt");
    const std::size_t N = static_cast<std::size_t>(config.num_speakers);
    const std::size_t r = static_cast<std::size_t>(config.rank);
    if (speaker_ids.empty()) {
        speaker_ids.resize(N);
        std::iota(speaker_ids.begin(), speaker_ids.end(), std::uint64_t{0});
    }
    if (speaker_ids.size() != N) throw ConfigError("init_bank: speaker id count differs from N");

    AdapterBank bank{config, {}, speaker_ids};
    std::vector<RngStream> per_speaker;
    for (auto id : speaker_ids) per_speaker.push_back(detail::speaker_init_stream(stream, id));

    for (const Tensor& w0 : base_layers) {
        if (w0.rank() != 2) throw DimensionError("init_bank: base weight must be 2-D, got " + shape_str(w0.shape()));
        check_finite(w0, "init_bank");
        const std::size_t d = w0.dim(0), k = w0.dim(1);
        const double std_b = 1.0 / std::sqrt(static_cast<double>(d));
        AdaptedLayer layer;
        layer.W0 = w0;
        if (shares_B(config.mode)) {
            layer.B = randn(stream, {d, r}) * std_b;
        } else {
            layer.B = Tensor({N, d, r});
            for (std::size_t n = 0; n < N; ++n) layer.B.set_slice(n, randn(per_speaker[n], {d, r}) * std_b);
        }
        layer.A = shares_A(config.mode) ? Tensor({r, k}) : Tensor({N, r, k});
        if (config.scale_enabled) {
            // Without normalization the scale multiplies V directly, so unit gains preserve W0.
            Tensor init({1, k});
            if (config.normalization_enabled)
                init = column_norms(w0);
            else
                init.fill(1.0);
            layer.m = Tensor({N, 1, k});
            for (std::size_t n = 0; n < N; ++n) layer.m.set_slice(n, init);
        }
        bank.layers.push_back(std::move(layer));
    }
    return bank;
}

/// Cached intermediates of one speaker's merge, reused by the backward pass.
struct MergedWeight {
    Tensor V;      // d×k, W0 + alpha B A
    Tensor norms;  // 1×k, ||V||_c (only with normalization)
    Tensor W;      // d×k, final merged weight
};

inline MergedWeight merge_speaker(const AdapterBank& bank, std::size_t l, std::size_t n) {
    const AdaptedLayer& layer = detail::layer_at(bank, l);
    detail::check_speaker(bank, n);
    const auto& cfg = bank.config;
    const std::size_t d = layer.d(), k = layer.k(), r = bank.rank();
    MergedWeight mw;
    mw.V = layer.W0;
    const auto b = detail::speaker_view(layer.B, n);
    const auto a = detail::speaker_view(layer.A, n);
    // V += alpha * B_n (d×r) * A_n (r×k)
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t p = 0; p < r; ++p) {
            const double bip = cfg.alpha * b[i * r + p];
            if (bip == 0.0) continue;
            double* vi = mw.V.data() + i * k;
            const double* ap = a.data() + p * k;
            for (std::size_t j = 0; j < k; ++j) vi[j] += bip * ap[j];
        }
    check_finite(mw.V, "merged_weight");
    if (!cfg.scale_enabled) {
        mw.W = mw.V;
        return mw;
    }
    const auto m = layer.m.slice_view(n);
    mw.W = Tensor({d, k});
    if (cfg.normalization_enabled) {
        mw.norms = column_norms(mw.V);
        for (std::size_t j = 0; j < k; ++j)
            if (mw.norms[j] == 0.0)
                throw SingularColumnError("merged weight of layer " + std::to_string(l) + ", speaker " +
                                          std::to_string(n) + " has a zero column " + std::to_string(j));
        // m_j / c_j is exactly 1 at init, which keeps the merge bit-identical to W0.
        std::vector<double> ratio(k);
        for (std::size_t j = 0; j < k; ++j) ratio[j] = m[j] / mw.norms[j];
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < k; ++j) mw.W(i, j) = ratio[j] * mw.V(i, j);
    } else {
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < k; ++j) mw.W(i, j) = m[j] * mw.V(i, j);
    }
    check_finite(mw.W, "merged_weight");
    return mw;
}

/// Effective d×k weight of speaker n in layer l.
inline Tensor merged_weight(const AdapterBank& bank, std::size_t layer, std::size_t n) {
    return merge_speaker(bank, layer, n).W;
}

/// All speakers' merges for one layer, in speaker order.
inline std::vector<MergedWeight> merge_all(const AdapterBank& bank, std::size_t layer) {
    std::vector<MergedWeight> out;
    out.reserve(bank.num_speakers());
    for (std::size_t n = 0; n < bank.num_speakers(); ++n) out.push_back(merge_speaker(bank, layer, n));
    return out;
}

inline void check_adapted_input(const AdapterBank& bank, std::size_t l, const Tensor& x, const char* op) {
    const AdaptedLayer& layer = detail::layer_at(bank, l);
    require_rank(x, 3, op);
    if (x.dim(0) != bank.num_speakers())
        throw DimensionError(std::string(op) + ": batch of " + std::to_string(x.dim(0)) + " vs bank N=" +
                             std::to_string(bank.num_speakers()));
    if (x.dim(2) != layer.k())
        throw DimensionError(std::string(op) + ": input features " + std::to_string(x.dim(2)) + " vs k=" +
                             std::to_string(layer.k()));
}

/// out[n] = x[n] · W_n^T with precomputed merges.
inline Tensor adapted_forward(const std::vector<MergedWeight>& merged, const Tensor& x) {
    const std::size_t N = x.dim(0), T = x.dim(1), k = x.dim(2), d = merged.at(0).W.dim(0);
    Tensor out({N, T, d});
    for (std::size_t n = 0; n < N; ++n)
        detail::gemm_nt(x.data() + n * T * k, merged[n].W.data(), out.data() + n * T * d, T, k, d, false);
    check_finite(out, "adapted_forward");
    return out;
}

/// x: N×T×k → N×T×d, each speaker through its own merged weight.
inline Tensor adapted_forward(const AdapterBank& bank, std::size_t layer, const Tensor& x) {
    check_adapted_input(bank, layer, x, "adapted_forward");
    return adapted_forward(merge_all(bank, layer), x);
}

/// Maps dL/dW_n for every speaker to gradients of the layer's trainable tensors.
/// Shared tensors accumulate contributions in speaker order.
inline LayerGradients merge_backward(const AdapterBank& bank, std::size_t l, const std::vector<MergedWeight>& merged,
                                     const std::vector<Tensor>& dW) {
    const AdaptedLayer& layer = detail::layer_at(bank, l);
    const auto& cfg = bank.config;
    const std::size_t N = bank.num_speakers(), d = layer.d(), k = layer.k(), r = bank.rank();
    LayerGradients g;
    if (!cfg.freeze_B) g.dB = Tensor(layer.B.shape());
    g.dA = Tensor(layer.A.shape());
    if (cfg.scale_enabled) g.dm = Tensor(layer.m.shape());

    Tensor dV({d, k});
    for (std::size_t n = 0; n < N; ++n) {
        const Tensor& G = dW.at(n);
        const MergedWeight& mw = merged.at(n);
        if (!cfg.scale_enabled) {
            dV = G;
        } else {
            const auto m = layer.m.slice_view(n);
            auto dm = g.dm.slice_view(n);
            if (cfg.normalization_enabled) {
                for (std::size_t j = 0; j < k; ++j) {
                    const double c = mw.norms[j];
                    double gv = 0.0;  // G_j · v̂_j
                    for (std::size_t i = 0; i < d; ++i) gv += G(i, j) * mw.V(i, j);
                    gv /= c;
                    dm[j] = gv;
                    const double s = m[j] / c;
                    for (std::size_t i = 0; i < d; ++i)
                        dV(i, j) = cfg.detach_norm ? s * G(i, j) : s * (G(i, j) - gv * mw.V(i, j) / c);
                }
            } else {
                for (std::size_t j = 0; j < k; ++j) {
                    double gv = 0.0;
                    for (std::size_t i = 0; i < d; ++i) gv += G(i, j) * mw.V(i, j);
                    dm[j] = gv;
                    for (std::size_t i = 0; i < d; ++i) dV(i, j) = m[j] * G(i, j);
                }
            }
        }
        const auto b = detail::speaker_view(layer.B, n);
        const auto a = detail::speaker_view(layer.A, n);
        // dA_n += alpha B_n^T dV ; dB_n += alpha dV A_n^T
        auto dA = detail::speaker_view(g.dA, n);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t p = 0; p < r; ++p) {
                const double bip = cfg.alpha * b[i * r + p];
                const double* dvi = dV.data() + i * k;
                double* dap = dA.data() + p * k;
                for (std::size_t j = 0; j < k; ++j) dap[j] += bip * dvi[j];
            }
        if (!cfg.freeze_B) {
            auto dB = detail::speaker_view(g.dB, n);
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t p = 0; p < r; ++p) {
                    const double* dvi = dV.data() + i * k;
                    const double* ap = a.data() + p * k;
                    double s = 0.0;
                    for (std::size_t j = 0; j < k; ++j) s += dvi[j] * ap[j];
                    dB[i * r + p] += cfg.alpha * s;
                }
        }
    }
    return g;
}

/// Backward of adapted_forward given cached merges: parameter gradients and dL/dx.
inline std::pair<LayerGradients, Tensor> adapted_backward(const AdapterBank& bank, std::size_t l,
                                                          const std::vector<MergedWeight>& merged, const Tensor& x,
                                                          const Tensor& upstream) {
    const std::size_t N = x.dim(0), T = x.dim(1), k = x.dim(2), d = merged.at(0).W.dim(0);
    if (upstream.shape() != Shape{N, T, d})
        throw DimensionError("adapted_backward: upstream " + shape_str(upstream.shape()) + " vs output " +
                             shape_str(Shape{N, T, d}));
    Tensor dx({N, T, k});
    std::vector<Tensor> dW;
    dW.reserve(N);
    for (std::size_t n = 0; n < N; ++n) {
        const double* gy = upstream.data() + n * T * d;
        const double* xn = x.data() + n * T * k;
        Tensor G({d, k});
        detail::gemm_tn(gy, xn, G.data(), T, d, k, false);
        detail::gemm_nn(gy, merged[n].W.data(), dx.data() + n * T * k, T, d, k, false);
        dW.push_back(std::move(G));
    }
    return {merge_backward(bank, l, merged, dW), std::move(dx)};
}

inline std::pair<LayerGradients, Tensor> adapted_backward(const AdapterBank& bank, std::size_t layer, const Tensor& x,
                                                          const Tensor& upstream) {
    check_adapted_input(bank, layer, x, "adapted_backward");
    return adapted_backward(bank, layer, merge_all(bank, layer), x, upstream);
}

// ---------------------------------------------------------------------------
// Trainable-parameter views, shared by the optimizer and gradient checks.

struct ParamRef {
    std::string name;
    Tensor* value;
    bool shared;  // one tensor serving every speaker
};

inline std::vector<ParamRef> trainable_params(AdapterBank& bank) {
    std::vector<ParamRef> out;
    for (std::size_t l = 0; l < bank.layers.size(); ++l) {
        auto& layer = bank.layers[l];
        const std::string p = "layer" + std::to_string(l) + ".";
        if (!bank.config.freeze_B) out.push_back({p + "B", &layer.B, shares_B(bank.config.mode)});
        out.push_back({p + "A", &layer.A, shares_A(bank.config.mode)});
        if (bank.config.scale_enabled) out.push_back({p + "m", &layer.m, false});
    }
    return out;
}

/// Gradients flattened in the same order as trainable_params.
inline std::vector<Tensor*> gradient_list(const AdapterBank& bank, BankGradients& grads) {
    std::vector<Tensor*> out;
    for (auto& g : grads) {
        if (!bank.config.freeze_B) out.push_back(&g.dB);
        out.push_back(&g.dA);
        if (bank.config.scale_enabled) out.push_back(&g.dm);
    }
    return out;
}

inline BankGradients zero_gradients(const AdapterBank& bank) {
    BankGradients grads;
    for (const auto& layer : bank.layers) {
        LayerGradients g;
        if (!bank.config.freeze_B) g.dB = Tensor(layer.B.shape());
        g.dA = Tensor(layer.A.shape());
        if (bank.config.scale_enabled) g.dm = Tensor(layer.m.shape());
        grads.push_back(std::move(g));
    }
    return grads;
}

// ---------------------------------------------------------------------------
// Parameter accounting

/// Exact non-negative rational, always in lowest terms.
struct Rational {
    std::int64_t num = 0;
    std::int64_t den = 1;

    Rational() = default;
    Rational(std::int64_t n, std::int64_t d = 1) : num(n), den(d) {
        if (den == 0) throw DomainError("rational with zero denominator");
        if (den < 0) num = -num, den = -den;
        const std::int64_t g = std::gcd(num < 0 ? -num : num, den);
        if (g > 1) num /= g, den /= g;
    }

    friend Rational operator+(Rational a, Rational b) { return Rational(a.num * b.den + b.num * a.den, a.den * b.den); }
    friend Rational operator-(Rational a, Rational b) { return Rational(a.num * b.den - b.num * a.den, a.den * b.den); }
    friend Rational operator*(Rational a, Rational b) { return Rational(a.num * b.num, a.den * b.den); }
    friend Rational operator/(Rational a, Rational b) { return Rational(a.num * b.den, a.den * b.num); }
    bool operator==(const Rational&) const = default;
    friend bool operator<(Rational a, Rational b) { return a.num * b.den < b.num * a.den; }

    double value() const { return static_cast<double>(num) / static_cast<double>(den); }
    std::int64_t rounded() const { return static_cast<std::int64_t>(std::llround(value())); }
    std::string str() const { return den == 1 ? std::to_string(num) : std::to_string(num) + "/" + std::to_string(den); }
};

struct LayerDims {
    std::int64_t d = 0;
    std::int64_t k = 0;
};

/// Trainable entries per speaker; shared tensors count 1/N each.
inline Rational param_count(const AdapterConfig& config, const std::vector<LayerDims>& dims) {
    if (dims.empty()) throw ConfigError("param_count: no layers");
    const std::int64_t r = config.rank, N = config.num_speakers;
    auto share = [N](std::int64_t x, bool shared) { return shared ? Rational(x, N) : Rational(x); };
    Rational total;
    for (const auto& l : dims) {
        if (!config.freeze_B) total = total + share(r * l.d, shares_B(config.mode));
        total = total + share(r * l.k, shares_A(config.mode));
        if (config.scale_enabled) total = total + Rational(l.k);
    }
    return total;
}

inline std::vector<LayerDims> layer_dims(const AdapterBank& bank) {
    std::vector<LayerDims> out;
    for (const auto& l : bank.layers)
        out.push_back({static_cast<std::int64_t>(l.d()), static_cast<std::int64_t>(l.k())});
    return out;
}

/// Independent count: every trainable entry the bank actually holds, divided by N.
inline Rational enumerate_trainable(AdapterBank& bank) {
    const auto N = static_cast<std::int64_t>(bank.num_speakers());
    std::int64_t entries = 0;
    for (const auto& p : trainable_params(bank)) entries += static_cast<std::int64_t>(p.value->size());
    return Rational(entries, N);
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kBankMagic[] = "NVBK";

namespace detail {
inline std::uint8_t bank_flags(const AdapterConfig& c) {
    return static_cast<std::uint8_t>((c.scale_enabled ? 1 : 0) | (c.normalization_enabled ? 2 : 0) |
                                     (c.freeze_B ? 4 : 0) | (c.detach_norm ? 8 : 0));
}
}  // namespace detail

inline std::vector<unsigned char> serialize_bank(const AdapterBank& bank) {
    const auto& c = bank.config;
    ByteWriter w(kBankMagic);
    w.u32(static_cast<std::uint32_t>(c.rank));
    w.f64(c.alpha);
    w.u8(static_cast<std::uint8_t>(c.mode));
    w.u8(detail::bank_flags(c));
    w.u32(static_cast<std::uint32_t>(c.num_speakers));
    for (auto id : bank.speaker_ids) w.u64(id);
    w.u32(static_cast<std::uint32_t>(bank.layers.size()));
    for (const auto& l : bank.layers) {
        w.u32(static_cast<std::uint32_t>(l.d()));
        w.u32(static_cast<std::uint32_t>(l.k()));
    }
    for (const auto& l : bank.layers) {
        w.f64s(l.B.values());
        w.f64s(l.A.values());
        if (c.scale_enabled) w.f64s(l.m.values());
    }
    return w.finish();
}

inline void save_bank(const AdapterBank& bank, const std::filesystem::path& path) {
    write_file_atomic(path, serialize_bank(bank));
}

/// Parses a bank image. Base weights are not stored in the file; they are
/// attached from `base_layers`, whose shapes must match the layer table.
inline AdapterBank deserialize_bank(std::vector<unsigned char> bytes, const std::vector<Tensor>& base_layers) {
    ByteReader in(std::move(bytes), std::string_view(kBankMagic, 4));
    AdapterConfig c;
    std::size_t at = in.offset();
    const auto rank = in.u32();
    if (rank == 0 || rank > 4096) throw FormatError("bad adapter rank", at);
    c.rank = static_cast<int>(rank);
    at = in.offset();
    c.alpha = in.f64();
    if (!(c.alpha > 0.0) || !std::isfinite(c.alpha)) throw FormatError("bad alpha", at);
    at = in.offset();
    const auto mode = in.u8();
    if (mode > 3) throw FormatError("bad sharing mode " + std::to_string(mode), at);
    c.mode = static_cast<SharingMode>(mode);
    at = in.offset();
    const auto flags = in.u8();
    if (flags > 15) throw FormatError("bad flag byte", at);
    c.scale_enabled = flags & 1;
    c.normalization_enabled = flags & 2;
    c.freeze_B = flags & 4;
    c.detach_norm = flags & 8;
    at = in.offset();
    const auto N = in.u32();
    if (N == 0 || N > (1u << 20)) throw FormatError("bad speaker count", at);
    c.num_speakers = static_cast<int>(N);
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("inconsistent config: ") + e.what(), at);
    }
    AdapterBank bank{c, {}, {}};
    for (std::uint32_t n = 0; n < N; ++n) bank.speaker_ids.push_back(in.u64());
    at = in.offset();
    const auto L = in.u32();
    if (L == 0 || L > 4096) throw FormatError("bad layer count", at);
    std::vector<LayerDims> dims(L);
    for (auto& ld : dims) {
        ld.d = in.u32();
        ld.k = in.u32();
        if (ld.d == 0 || ld.k == 0) throw FormatError("zero layer dimension", in.offset() - 8);
    }
    if (base_layers.size() != L)
        throw CompatibilityError("bank has " + std::to_string(L) + " layers, model has " +
                                 std::to_string(base_layers.size()));
    const std::size_t r = rank;
    for (std::uint32_t l = 0; l < L; ++l) {
        const auto d = static_cast<std::size_t>(dims[l].d), k = static_cast<std::size_t>(dims[l].k);
        if (base_layers[l].shape() != Shape{d, k})
            throw CompatibilityError("bank layer " + std::to_string(l) + " is " + shape_str({d, k}) +
                                     ", model layer is " + shape_str(base_layers[l].shape()));
        AdaptedLayer layer;
        layer.W0 = base_layers[l];
        layer.B = shares_B(c.mode) ? Tensor({d, r}) : Tensor({N, d, r});
        layer.A = shares_A(c.mode) ? Tensor({r, k}) : Tensor({N, r, k});
        in.f64s(layer.B.values());
        in.f64s(layer.A.values());
        if (c.scale_enabled) {
            layer.m = Tensor({N, 1, k});
            in.f64s(layer.m.values());
        }
        bank.layers.push_back(std::move(layer));
    }
    in.expect_end();
    return bank;
}

/// Loads a bank; `expected_speakers` guards against attaching it to a session of a different size.
inline AdapterBank load_bank(const std::filesystem::path& path, const std::vector<Tensor>& base_layers,
                             std::optional<int> expected_speakers = std::nullopt) {
    AdapterBank bank = deserialize_bank(read_file_bytes(path), base_layers);
    if (expected_speakers && *expected_speakers != bank.config.num_speakers)
        throw CompatibilityError("bank was trained for N=" + std::to_string(bank.config.num_speakers) +
                                 " speakers but the session has N=" + std::to_string(*expected_speakers));
    return bank;
}

}  // namespace nanovoice
