#pragma once

// Batch-wise adapter fine-tuning and its sequential baseline.
//
// Each iteration draws one (t, eps) per reference from a stream keyed by the
// reference's speaker id, so a speaker sees the same noise whether it is
// trained alone or inside any batch. The objective is the SUM of the
// per-reference masked losses; with no shared tensors this makes every
// speaker's gradient (and thus its Adam trajectory) identical to a
// single-speaker run.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "nanovoice/adam.hpp"
#include "nanovoice/adapter_bank.hpp"
#include "nanovoice/diffusion.hpp"
#include "nanovoice/score_net.hpp"
#include "nanovoice/toy_task.hpp"

namespace nanovoice {

struct AdaptOptions {
    int iterations = 500;
    double lr = 1e-4;
    std::uint64_t seed = 0;
    double t_min = kTrainTMin;
};

struct RunReport {
    AdapterConfig config;
    AdaptOptions options;
    std::vector<std::uint64_t> speaker_ids;
    std::vector<std::vector<double>> losses;  // iterations × N
    double wall_seconds = 0.0;
    Rational per_speaker_params;
    Rational enumerated_params;

    double mean_loss(std::size_t iter) const {
        double s = 0.0;
        for (double v : losses.at(iter)) s += v;
        return s / static_cast<double>(losses.at(iter).size());
    }

    /// Mean per-speaker loss over the last `window` iterations.
    double tail_loss(std::size_t window) const {
        window = std::min(window, losses.size());
        double s = 0.0;
        for (std::size_t i = losses.size() - window; i < losses.size(); ++i) s += mean_loss(i);
        return s / static_cast<double>(window);
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["config"] = {{"rank", config.rank},
                       {"alpha", config.alpha},
                       {"sharing_mode", to_string(config.mode)},
                       {"scale", config.scale_enabled},
                       {"normalization", config.normalization_enabled},
                       {"freeze_b", config.freeze_B},
                       {"detach_norm", config.detach_norm},
                       {"speakers", config.num_speakers}};
        j["options"] = {{"iterations", options.iterations},
                        {"lr", options.lr},
                        {"seed", options.seed},
                        {"t_min", options.t_min}};
        j["speaker_ids"] = speaker_ids;
        j["losses"] = losses;
        j["wall_seconds"] = wall_seconds;
        j["per_speaker_params"] = {{"exact", per_speaker_params.str()},
                                   {"rounded", per_speaker_params.rounded()},
                                   {"enumerated", enumerated_params.str()}};
        return j;
    }
};

struct AdaptResult {
    AdapterBank bank;
    RunReport report;
};

/// Noise stream of one reference at one iteration.
inline RngStream adapt_noise_stream(std::uint64_t seed, std::uint64_t speaker_id, int iteration) {
    return RngStream{seed ^ 0xADA9700Dull, speaker_id, static_cast<std::uint64_t>(iteration) << 24};
}

/// Stream used to initialize adapter banks for a given run seed.
inline RngStream adapt_init_stream(std::uint64_t seed) { return RngStream{seed ^ 0x1B17ull, 0, 0}; }

/// One (t, eps) draw for a reference of `length` frames; eps is F×L, zero past `length`.
inline std::pair<double, Tensor> draw_noise(RngStream stream, std::size_t F, std::size_t length, std::size_t L,
                                            double t_min) {
    const double t = t_min + (1.0 - t_min) * stream.uniform();
    const Tensor z = randn(stream, {F, length});
    Tensor eps({F, L});
    for (std::size_t f = 0; f < F; ++f)
        for (std::size_t j = 0; j < length; ++j) eps(f, j) = z(f, j);
    return {t, eps};
}

/// Returns B to the trainer frozen; only valid for a shared-B configuration.
inline AdapterConfig freeze_shared_B(AdapterConfig config) {
    if (config.mode != SharingMode::shared_B)
        throw ConfigError("freeze_shared_B requires sharing mode shared-b, got " + to_string(config.mode));
    config.freeze_B = true;
    return config;
}

/// Loss of every reference plus dL/dscore for the summed objective.
struct BatchLoss {
    std::vector<double> per_reference;
    Tensor d_score;
};

inline BatchLoss batch_score_loss(const Tensor& score, const Tensor& eps, const std::vector<double>& sigma,
                                  const Tensor& mask) {
    const std::size_t N = score.dim(0), F = score.dim(1), L = score.dim(2);
    BatchLoss out;
    out.d_score = Tensor(score.shape());
    Tensor full_mask({F, L});
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t j = 0; j < L; ++j) full_mask(f, j) = mask(n, 0, j);
        const Tensor s = score.slice(n), e = eps.slice(n);
        out.per_reference.push_back(score_loss_sigma(s, e, sigma[n], full_mask));
        out.d_score.set_slice(n, score_loss_grad_sigma(s, e, sigma[n], full_mask));
    }
    return out;
}

/// Throws a training error naming the first reference whose loss is not finite.
inline void require_finite_losses(const std::vector<double>& losses, const std::vector<std::uint64_t>& speaker_ids,
                                  int iteration) {
    for (std::size_t n = 0; n < losses.size(); ++n)
        if (!std::isfinite(losses[n]))
            throw TrainingError("non-finite loss at iteration " + std::to_string(iteration) + " for speaker " +
                                std::to_string(speaker_ids.at(n)));
}

/// Fine-tunes every adapter in `bank` on its reference in one batched pass per iteration.
inline AdaptResult adapt_batched(const ScoreNet& net, AdapterBank bank, const SpeakerBatch& batch,
                                 const AdaptOptions& opt) {
    const std::size_t N = batch.size(), F = net.config.mel_bins, L = batch.max_length();
    if (bank.num_speakers() != N)
        throw CompatibilityError("adapter bank holds N=" + std::to_string(bank.num_speakers()) +
                                 " speakers but the reference batch has " + std::to_string(N));
    if (opt.iterations < 0) throw ConfigError("iterations must be >= 0");

    RunReport report;
    report.config = bank.config;
    report.options = opt;
    report.speaker_ids = batch.speaker_ids;
    report.per_speaker_params = param_count(bank.config, layer_dims(bank));
    report.enumerated_params = enumerate_trainable(bank);

    auto params = trainable_params(bank);
    std::vector<Tensor*> values;
    for (auto& p : params) values.push_back(p.value);
    AdamState adam(AdamHyper{opt.lr}, values);

    ScoreInput in;
    in.content = &batch.content;
    in.mask = &batch.mask;
    in.t.resize(N);
    ForwardCache cache;
    const auto start = std::chrono::steady_clock::now();
    for (int it = 0; it < opt.iterations; ++it) {
        Tensor eps({N, F, L});
        for (std::size_t n = 0; n < N; ++n) {
            auto [t, e] = draw_noise(adapt_noise_stream(opt.seed, batch.speaker_ids[n], it), F, batch.lengths[n], L,
                                     opt.t_min);
            in.t[n] = t;
            eps.set_slice(n, e);
        }
        in.x_t = Tensor({N, F, L});
        std::vector<double> sigma(N);
        for (std::size_t n = 0; n < N; ++n) {
            in.x_t.set_slice(n, corrupt_with_lambda(batch.x0.slice(n), lambda_of(net.config.schedule, in.t[n]),
                                                    eps.slice(n)));
            sigma[n] = sigma_of(net.config.schedule, in.t[n]);
        }
        try {
            const Tensor score = score_forward(net, &bank, in, &cache);
            BatchLoss loss = batch_score_loss(score, eps, sigma, batch.mask);
            require_finite_losses(loss.per_reference, batch.speaker_ids, it);
            report.losses.push_back(loss.per_reference);

            BankGradients grads = zero_gradients(bank);
            score_backward(net, &bank, in, cache, loss.d_score, &grads, nullptr);
            adam_step(values, gradient_list(bank, grads), adam);
        } catch (const NonFiniteError& e) {
            throw TrainingError("non-finite values at iteration " + std::to_string(it) + ": " + e.what());
        }
    }
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return {std::move(bank), std::move(report)};
}

/// Bank for `batch` under `config` (N taken from the batch), initialized from the run seed.
inline AdapterBank make_bank_for(const ScoreNet& net, AdapterConfig config, const SpeakerBatch& batch,
                                 std::uint64_t seed) {
    config.num_speakers = static_cast<int>(batch.size());
    RngStream init = adapt_init_stream(seed);
    return init_bank(config, net.adapted_base_weights(), init, batch.speaker_ids);
}

struct SequentialResult {
    std::vector<AdapterBank> banks;
    std::vector<RunReport> reports;
    double wall_seconds = 0.0;
};

/// N single-speaker jobs, one after another, each with the noise and init
/// streams it would receive inside a batch.
inline SequentialResult adapt_sequential(const ScoreNet& net, const SpeakerBatch& batch, const AdapterConfig& config,
                                         const AdaptOptions& opt) {
    SequentialResult out;
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t n = 0; n < batch.size(); ++n) {
        const SpeakerBatch one = select(batch, {n});
        AdaptResult r = adapt_batched(net, make_bank_for(net, config, one, opt.seed), one, opt);
        out.banks.push_back(std::move(r.bank));
        out.reports.push_back(std::move(r.report));
    }
    out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return out;
}

}  // namespace nanovoice
