#pragma once

// Generation with an (optionally adapted) network and toy speaker similarity.

#include <cstdint>
#include <vector>

#include "nanovoice/diffusion.hpp"
#include "nanovoice/score_net.hpp"
#include "nanovoice/toy_task.hpp"

namespace nanovoice {

struct SampleRequest {
    std::vector<std::vector<int>> content;  // N×L, zero-padded
    std::vector<std::size_t> lengths;
    Tensor mask;                            // N×1×L
};

/// Fresh content ("transcripts") for generation, one per reference, with the
/// reference lengths. Keyed by speaker id so it is independent of batch layout.
inline SampleRequest make_sample_request(const ToyTaskConfig& task, const std::vector<std::size_t>& lengths,
                                         const std::vector<std::uint64_t>& speaker_ids, std::uint64_t seed) {
    SampleRequest req;
    req.lengths = lengths;
    const std::size_t N = lengths.size();
    if (speaker_ids.size() != N) throw DimensionError("make_sample_request: one speaker id per length");
    const std::size_t L = *std::max_element(lengths.begin(), lengths.end());
    req.mask = Tensor({N, 1, L});
    for (std::size_t n = 0; n < N; ++n) {
        RngStream s{seed ^ 0x7E47ull, speaker_ids[n], 0};
        auto codes = gen_content(task, lengths[n], s);
        codes.resize(L, 0);
        req.content.push_back(std::move(codes));
        for (std::size_t j = 0; j < lengths[n]; ++j) req.mask(n, 0, j) = 1.0;
    }
    return req;
}

/// Reverse-diffusion sampling for every request slot; bank may be null.
/// Slot n draws its initial noise and per-step noise from streams[n] over its
/// own F×length_n frames, so a speaker's sample does not depend on which other
/// speakers share the batch.
inline Tensor generate(const ScoreNet& net, const AdapterBank* bank, const SampleRequest& req, int steps,
                       std::vector<RngStream> streams) {
    if (steps < 1) throw DomainError("generate: steps must be >= 1");
    const std::size_t N = req.lengths.size(), L = req.mask.dim(2), F = net.config.mel_bins;
    if (streams.size() != N) throw DimensionError("generate: need one stream per slot");
    const auto& schedule = net.config.schedule;
    auto draw = [&](Tensor& dst) {
        dst.fill(0.0);
        for (std::size_t n = 0; n < N; ++n) {
            const Tensor z = randn(streams[n], {F, req.lengths[n]});
            for (std::size_t f = 0; f < F; ++f)
                for (std::size_t j = 0; j < req.lengths[n]; ++j) dst(n, f, j) = z(f, j);
        }
    };
    ScoreInput in;
    in.content = &req.content;
    in.mask = &req.mask;
    in.x_t = Tensor({N, F, L});
    draw(in.x_t);
    Tensor z({N, F, L});
    const double dt = 1.0 / steps;
    for (int i = 0; i < steps; ++i) {
        const double t = 1.0 - i * dt;
        in.t.assign(N, t);
        const Tensor s = score_forward(net, bank, in);
        if (i + 1 < steps)
            draw(z);
        else
            z.fill(0.0);
        in.x_t = reverse_step(schedule, in.x_t, s, t, dt, z);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t f = 0; f < F; ++f)
                for (std::size_t j = req.lengths[n]; j < L; ++j) in.x_t(n, f, j) = 0.0;
    }
    return in.x_t;
}

/// Per-slot generation streams keyed by speaker id.
inline std::vector<RngStream> generation_streams(const std::vector<std::uint64_t>& speaker_ids, std::uint64_t seed,
                                                 int draw) {
    std::vector<RngStream> out;
    for (auto id : speaker_ids)
        out.push_back(RngStream{seed ^ 0x5A3Dull ^ (static_cast<std::uint64_t>(draw) << 40), id, 0});
    return out;
}

inline std::vector<double> mask_row(const Tensor& mask, std::size_t n) {
    const auto v = mask.slice_view(n);
    return {v.begin(), v.end()};
}

/// Signature cosine between each generated slot and its reference.
inline std::vector<double> batch_similarity(const Tensor& generated, const Tensor& gen_mask, const SpeakerBatch& ref) {
    std::vector<double> out;
    for (std::size_t n = 0; n < ref.size(); ++n) {
        const auto g = signature_of(generated.slice(n), mask_row(gen_mask, n));
        const auto r = signature_of(ref.x0.slice(n), mask_row(ref.mask, n));
        out.push_back(similarity(g, r));
    }
    return out;
}

/// Mean per-speaker similarity over `draws` independent generations.
inline std::vector<double> evaluate_similarity(const ScoreNet& net, const AdapterBank* bank, const SpeakerBatch& ref,
                                               const ToyTaskConfig& task, int steps, int draws, std::uint64_t seed) {
    const SampleRequest req = make_sample_request(task, ref.lengths, ref.speaker_ids, seed);
    std::vector<double> acc(ref.size(), 0.0);
    for (int d = 0; d < draws; ++d) {
        const Tensor gen = generate(net, bank, req, steps, generation_streams(ref.speaker_ids, seed, d));
        const auto sims = batch_similarity(gen, req.mask, ref);
        for (std::size_t n = 0; n < acc.size(); ++n) acc[n] += sims[n] / draws;
    }
    return acc;
}

}  // namespace nanovoice
