#pragma once

// Synthetic multi-speaker "mel" generator and the signature-cosine metric
// that stands in for speaker-encoder similarity.
//
// A frame of speaker s with content code c is
//   gain * signature_s ⊙ envelope(c) + modulation_s(j) + noise
// so the time average of a rendering points along signature_s ⊙ mean envelope.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "nanovoice/container.hpp"
#include "nanovoice/errors.hpp"
#include "nanovoice/rng.hpp"
#include "nanovoice/tensor.hpp"

namespace nanovoice {

struct ToyTaskConfig {
    std::size_t mel_bins = 16;       // F
    std::size_t content_codes = 8;   // vocabulary of frame-level content labels
    double gain = 4.0;               // signature is unit-norm; gain sets per-bin amplitude
    double noise_sigma = 0.05;
    double max_cosine = 0.9;         // pairwise signature separation
    std::size_t min_length = 24;
    std::size_t max_length = 48;
    std::size_t voice_factors = 2;   // dimension of the shared speaker space
    double voice_residual = 0.25;    // weight of each speaker's isotropic component
    std::uint64_t voice_seed = 0x5EEDull;  // basis of the shared speaker space
};

struct ToySpeaker {
    std::uint64_t speaker_id = 0;
    std::vector<double> signature;  // unit norm, F entries
    double mod_amplitude = 0.0;
    double mod_frequency = 0.0;     // radians per frame
    double mod_phase = 0.0;
    std::uint64_t seed = 0;

    bool operator==(const ToySpeaker&) const = default;
};

struct SpeakerBatch {
    Tensor x0;                                // N×F×L
    std::vector<std::size_t> lengths;         // per reference
    Tensor mask;                              // N×1×L
    std::vector<std::vector<int>> content;    // N×L, zero-padded
    std::vector<std::uint64_t> speaker_ids;

    std::size_t size() const { return lengths.size(); }
    std::size_t max_length() const { return x0.empty() ? 0 : x0.dim(2); }
};

inline double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

/// Cosine similarity of two non-zero vectors.
inline double similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("similarity: length mismatch");
    const double na = l2_norm(a), nb = l2_norm(b);
    if (na == 0.0 || nb == 0.0) throw DegenerateInputError("similarity: zero vector");
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

/// Spectral envelope of a content code; positive, shared by all speakers.
inline std::vector<double> content_envelope(const ToyTaskConfig& cfg, int code) {
    std::vector<double> env(cfg.mel_bins);
    const double F = static_cast<double>(cfg.mel_bins);
    for (std::size_t f = 0; f < cfg.mel_bins; ++f) {
        const double x = (static_cast<double>(f) + 0.5) / F;
        env[f] = 1.0 + 0.5 * std::sin(2.0 * std::numbers::pi * (code + 1) * x * 0.5 + 0.7 * code);
    }
    return env;
}

/// Orthonormal voice-factor basis (voice_factors × mel_bins) common to all speakers.
inline std::vector<std::vector<double>> voice_basis(const ToyTaskConfig& cfg) {
    std::vector<std::vector<double>> basis;
    RngStream s{cfg.voice_seed, 0, 0};
    for (std::size_t k = 0; k < cfg.voice_factors; ++k) {
        const Tensor raw = randn(s, {cfg.mel_bins});
        std::vector<double> v(raw.values().begin(), raw.values().end());
        for (const auto& b : basis) {
            const double p = dot(v, b);
            for (std::size_t f = 0; f < v.size(); ++f) v[f] -= p * b[f];
        }
        const double n = l2_norm(v);
        for (double& x : v) x /= n;
        basis.push_back(std::move(v));
    }
    return basis;
}

inline ToySpeaker make_speaker(const ToyTaskConfig& cfg, std::uint64_t id, std::uint64_t seed,
                               std::span<const double> center = {}, double spread = 1.0) {
    RngStream s{seed, id, 0};
    ToySpeaker sp;
    sp.speaker_id = id;
    sp.seed = seed;
    const Tensor coords = randn(s, {cfg.voice_factors});
    const Tensor raw = randn(s, {cfg.mel_bins});
    std::vector<double> sig(cfg.mel_bins, 0.0);
    const auto basis = voice_basis(cfg);
    const double iso = cfg.voice_factors == 0 ? 1.0 : cfg.voice_residual / std::sqrt(static_cast<double>(cfg.mel_bins));
    for (std::size_t f = 0; f < cfg.mel_bins; ++f) {
        sig[f] = iso * raw[f];
        for (std::size_t k = 0; k < cfg.voice_factors; ++k) sig[f] += coords[k] * basis[k][f] / std::sqrt(double(cfg.voice_factors));
    }
    if (!center.empty()) {
        const double n = l2_norm(sig);
        for (std::size_t f = 0; f < sig.size(); ++f) sig[f] = center[f] + spread * sig[f] / n;
    }
    const double n = l2_norm(sig);
    for (double& v : sig) v /= n;
    sp.signature = std::move(sig);
    sp.mod_amplitude = 0.1 + 0.2 * s.uniform();
    sp.mod_frequency = 0.3 + 0.5 * s.uniform();
    sp.mod_phase = 2.0 * std::numbers::pi * s.uniform();
    return sp;
}

namespace detail {
inline bool separated(const ToyTaskConfig& cfg, const std::vector<ToySpeaker>& have, const ToySpeaker& sp) {
    for (const auto& o : have)
        if (similarity(o.signature, sp.signature) >= cfg.max_cosine) return false;
    return true;
}
}  // namespace detail

/// `count` speakers with ids first_id, first_id+1, ...; a candidate whose
/// signature is too close to an earlier one is redrawn under a fresh seed tag.
inline std::vector<ToySpeaker> gen_speakers(const ToyTaskConfig& cfg, std::size_t count, std::uint64_t seed,
                                            std::uint64_t first_id = 0) {
    if (count < 1) throw ConfigError("gen_speakers: count must be >= 1");
    std::vector<ToySpeaker> out;
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint64_t id = first_id + i;
        ToySpeaker sp = make_speaker(cfg, id, seed);
        for (std::uint64_t retry = 1; !detail::separated(cfg, out, sp); ++retry)
            sp = make_speaker(cfg, id, seed + 0x100000000ull * retry);
        out.push_back(std::move(sp));
    }
    return out;
}

/// Speakers drawn around `clusters` random voices (toy analog of a shared
/// attribute such as gender). Speaker i belongs to cluster i % clusters.
inline std::vector<ToySpeaker> gen_clustered_speakers(const ToyTaskConfig& cfg, std::size_t count,
                                                      std::size_t clusters, std::uint64_t seed,
                                                      std::uint64_t first_id = 0, double spread = 0.9) {
    if (count < 1 || clusters < 1) throw ConfigError("gen_clustered_speakers: empty request");
    std::vector<std::vector<double>> centers;
    for (std::size_t c = 0; c < clusters; ++c) centers.push_back(make_speaker(cfg, c, seed ^ 0xC1u).signature);
    std::vector<ToySpeaker> out;
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint64_t id = first_id + i;
        const auto& center = centers[i % clusters];
        ToySpeaker sp = make_speaker(cfg, id, seed, center, spread);
        for (std::uint64_t retry = 1; !detail::separated(cfg, out, sp); ++retry)
            sp = make_speaker(cfg, id, seed + 0x100000000ull * retry, center, spread);
        out.push_back(std::move(sp));
    }
    return out;
}

/// Phoneme-like piecewise-constant content labels: runs of 3-6 frames.
inline std::vector<int> gen_content(const ToyTaskConfig& cfg, std::size_t length, RngStream& stream) {
    std::vector<int> codes;
    codes.reserve(length);
    while (codes.size() < length) {
        const int code = static_cast<int>(stream.below(cfg.content_codes));
        const std::size_t run = 3 + stream.below(4);
        for (std::size_t i = 0; i < run && codes.size() < length; ++i) codes.push_back(code);
    }
    return codes;
}

/// F×length rendering of `content` in the speaker's voice.
inline Tensor render(const ToyTaskConfig& cfg, const ToySpeaker& sp, std::size_t length, const std::vector<int>& content,
                     RngStream& stream, std::optional<double> noise_sigma = std::nullopt) {
    if (length < 4) throw DomainError("render: length must be >= 4");
    if (content.size() < length) throw DimensionError("render: fewer content codes than frames");
    const double sigma = noise_sigma.value_or(cfg.noise_sigma);
    const std::size_t F = cfg.mel_bins;
    std::vector<std::vector<double>> envs;
    for (std::size_t c = 0; c < cfg.content_codes; ++c) envs.push_back(content_envelope(cfg, static_cast<int>(c)));
    Tensor mel({F, length});
    for (std::size_t j = 0; j < length; ++j) {
        const int c = content[j];
        if (c < 0 || static_cast<std::size_t>(c) >= cfg.content_codes)
            throw DomainError("render: content code " + std::to_string(c) + " out of range");
        for (std::size_t f = 0; f < F; ++f) {
            const double mod = sp.mod_amplitude *
                               std::sin(sp.mod_frequency * static_cast<double>(j) + sp.mod_phase +
                                        std::numbers::pi * static_cast<double>(f) / static_cast<double>(F));
            mel(f, j) = cfg.gain * sp.signature[f] * envs[c][f] + mod;
        }
    }
    if (sigma > 0.0) {
        const Tensor z = randn(stream, {F, length});
        axpy(sigma, z, mel);
    }
    return mel;
}

/// Expected time-averaged direction of a speaker's renderings for given content.
inline std::vector<double> expected_signature(const ToyTaskConfig& cfg, const ToySpeaker& sp,
                                              const std::vector<int>& content) {
    std::vector<double> mean_env(cfg.mel_bins, 0.0);
    for (int c : content) {
        const auto env = content_envelope(cfg, c);
        for (std::size_t f = 0; f < cfg.mel_bins; ++f) mean_env[f] += env[f];
    }
    std::vector<double> out(cfg.mel_bins);
    for (std::size_t f = 0; f < cfg.mel_bins; ++f) out[f] = sp.signature[f] * mean_env[f];
    const double n = l2_norm(out);
    for (double& v : out) v /= n;
    return out;
}

/// Masked time average of an F×T mel, normalized to unit length.
inline std::vector<double> signature_of(const Tensor& mel, std::span<const double> mask) {
    require_rank(mel, 2, "signature_of");
    const std::size_t F = mel.dim(0), T = mel.dim(1);
    if (mask.size() != T) throw DimensionError("signature_of: mask length differs from frame count");
    std::vector<double> acc(F, 0.0);
    std::size_t active = 0;
    for (std::size_t j = 0; j < T; ++j) {
        if (mask[j] == 0.0) continue;
        ++active;
        for (std::size_t f = 0; f < F; ++f) acc[f] += mel(f, j);
    }
    if (active == 0) throw DegenerateInputError("signature_of: every frame is masked");
    const double n = l2_norm(acc);
    if (n == 0.0) throw DegenerateInputError("signature_of: zero mean spectrum");
    for (double& v : acc) v /= n;
    return acc;
}

inline std::vector<double> signature_of(const Tensor& mel) {
    return signature_of(mel, std::vector<double>(mel.dim(1), 1.0));
}

/// Stream that renders speaker `id`'s reference; independent of batch composition.
inline RngStream reference_stream(std::uint64_t seed, std::uint64_t id) { return RngStream{seed ^ 0x5EEDull, id, 0}; }

/// Renders one reference per speaker and pads them to a common length.
inline SpeakerBatch make_reference_batch(const ToyTaskConfig& cfg, const std::vector<ToySpeaker>& speakers,
                                         const std::vector<std::size_t>& lengths, std::uint64_t seed) {
    if (speakers.empty()) throw ConfigError("make_reference_batch: no speakers");
    if (lengths.size() != speakers.size())
        throw DimensionError("make_reference_batch: need one length per speaker");
    const std::size_t N = speakers.size(), F = cfg.mel_bins;
    const std::size_t L = *std::max_element(lengths.begin(), lengths.end());
    SpeakerBatch batch;
    batch.x0 = Tensor({N, F, L});
    batch.mask = Tensor({N, 1, L});
    batch.lengths = lengths;
    for (std::size_t n = 0; n < N; ++n) {
        RngStream s = reference_stream(seed, speakers[n].speaker_id);
        std::vector<int> codes = gen_content(cfg, lengths[n], s);
        const Tensor mel = render(cfg, speakers[n], lengths[n], codes, s);
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t j = 0; j < lengths[n]; ++j) batch.x0(n, f, j) = mel(f, j);
        for (std::size_t j = 0; j < lengths[n]; ++j) batch.mask(n, 0, j) = 1.0;
        codes.resize(L, 0);
        batch.content.push_back(std::move(codes));
        batch.speaker_ids.push_back(speakers[n].speaker_id);
    }
    return batch;
}

/// Sub-batch holding the given slots, padded to their own maximum length.
inline SpeakerBatch select(const SpeakerBatch& batch, const std::vector<std::size_t>& slots) {
    if (slots.empty()) throw ConfigError("select: no slots");
    std::size_t L = 0;
    for (auto s : slots) L = std::max(L, batch.lengths.at(s));
    const std::size_t F = batch.x0.dim(1);
    SpeakerBatch out;
    out.x0 = Tensor({slots.size(), F, L});
    out.mask = Tensor({slots.size(), 1, L});
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const std::size_t s = slots[i], len = batch.lengths[s];
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t j = 0; j < len; ++j) out.x0(i, f, j) = batch.x0(s, f, j);
        for (std::size_t j = 0; j < len; ++j) out.mask(i, 0, j) = 1.0;
        out.lengths.push_back(len);
        std::vector<int> codes(batch.content[s].begin(), batch.content[s].begin() + static_cast<std::ptrdiff_t>(len));
        codes.resize(L, 0);
        out.content.push_back(std::move(codes));
        out.speaker_ids.push_back(batch.speaker_ids[s]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset dump: one "NVDS" file per speaker.

inline constexpr char kDatasetMagic[] = "NVDS";

inline void save_speaker_sample(const ToySpeaker& sp, const Tensor& mel, const std::vector<int>& content,
                                const std::filesystem::path& path) {
    ByteWriter w(kDatasetMagic);
    w.u64(sp.speaker_id);
    w.u64(sp.seed);
    w.f64(sp.mod_amplitude);
    w.f64(sp.mod_frequency);
    w.f64(sp.mod_phase);
    w.u32(static_cast<std::uint32_t>(sp.signature.size()));
    w.f64s(sp.signature);
    w.tensor(mel);
    w.u32(static_cast<std::uint32_t>(content.size()));
    for (int c : content) w.u32(static_cast<std::uint32_t>(c));
    write_file_atomic(path, w.finish());
}

struct SpeakerSample {
    ToySpeaker speaker;
    Tensor mel;
    std::vector<int> content;
};

inline SpeakerSample load_speaker_sample(const std::filesystem::path& path) {
    ByteReader in(read_file_bytes(path), std::string_view(kDatasetMagic, 4));
    SpeakerSample s;
    s.speaker.speaker_id = in.u64();
    s.speaker.seed = in.u64();
    s.speaker.mod_amplitude = in.f64();
    s.speaker.mod_frequency = in.f64();
    s.speaker.mod_phase = in.f64();
    const auto F = in.u32();
    if (F == 0 || F > 4096) throw FormatError("bad signature length", in.offset() - 4);
    s.speaker.signature.resize(F);
    in.f64s(s.speaker.signature);
    s.mel = in.tensor();
    const auto T = in.u32();
    if (T != s.mel.dim(1)) throw FormatError("content length differs from frame count", in.offset() - 4);
    for (std::uint32_t j = 0; j < T; ++j) s.content.push_back(static_cast<int>(in.u32()));
    in.expect_end();
    return s;
}

}  // namespace nanovoice
