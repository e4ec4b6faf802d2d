#pragma once

// Multi-speaker pretraining of the toy score network's base parameters.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "nanovoice/adam.hpp"
#include "nanovoice/score_net.hpp"
#include "nanovoice/toy_task.hpp"
#include "nanovoice/trainer.hpp"

namespace nanovoice {

struct PretrainOptions {
    int iterations = 2000;
    std::size_t batch = 8;
    double lr = 2e-3;
    /// Probability of zeroing the speaker embedding of an item, so the
    /// embedding-free network (used during adaptation) models the speaker mix.
    double speaker_dropout = 0.3;
    std::uint64_t seed = 0;
    double t_min = kTrainTMin;
    double smoothing = 0.98;  // EMA factor of the reported curve
    /// Weight averaging; the returned net holds the averaged parameters. 0 disables.
    double weight_ema = 0.999;
};

struct PretrainResult {
    std::vector<double> losses;
    std::vector<double> smoothed;
};

/// Draws a fresh padded training batch of `opt.batch` renderings.
inline SpeakerBatch draw_training_batch(const ToyTaskConfig& task, const std::vector<ToySpeaker>& speakers,
                                        std::size_t items, RngStream& stream, std::vector<int>& speaker_index) {
    std::vector<ToySpeaker> chosen;
    std::vector<std::size_t> lengths;
    speaker_index.clear();
    for (std::size_t b = 0; b < items; ++b) {
        const auto s = static_cast<std::size_t>(stream.below(speakers.size()));
        speaker_index.push_back(static_cast<int>(s));
        ToySpeaker sp = speakers[s];
        sp.speaker_id = stream.next_block()[0];  // fresh rendering stream per item
        chosen.push_back(std::move(sp));
        lengths.push_back(task.min_length + stream.below(task.max_length - task.min_length + 1));
    }
    return make_reference_batch(task, chosen, lengths, stream.next_block()[1]);
}

/// Adam on the mean per-item score-matching loss over random (speaker, t, eps).
inline PretrainResult pretrain(ScoreNet& net, const ToyTaskConfig& task, const std::vector<ToySpeaker>& speakers,
                               const PretrainOptions& opt) {
    if (speakers.empty()) throw ConfigError("pretrain: empty dataset");
    if (speakers.size() > net.config.train_speakers)
        throw ConfigError("pretrain: more speakers than embedding rows");
    auto named = net.named_params();
    std::vector<Tensor*> values;
    for (auto& [n, p] : named) values.push_back(p);
    AdamState adam(AdamHyper{opt.lr}, values);
    std::vector<Tensor> averaged;
    for (const Tensor* v : values) averaged.push_back(*v);
    RngStream stream{opt.seed ^ 0x97E7ull, 0, 0};
    const std::size_t F = net.config.mel_bins;

    PretrainResult out;
    double ema = 0.0;
    for (int it = 0; it < opt.iterations; ++it) {
        std::vector<int> spk;
        const SpeakerBatch batch = draw_training_batch(task, speakers, opt.batch, stream, spk);
        const std::size_t N = batch.size(), L = batch.max_length();
        for (auto& s : spk)
            if (stream.uniform() < opt.speaker_dropout) s = -1;

        ScoreInput in;
        in.content = &batch.content;
        in.mask = &batch.mask;
        in.speaker = spk;
        in.x_t = Tensor({N, F, L});
        Tensor eps({N, F, L});
        std::vector<double> sigma(N);
        for (std::size_t n = 0; n < N; ++n) {
            auto [t, e] = draw_noise(stream.derive(static_cast<std::uint64_t>(it) * 64 + n), F, batch.lengths[n], L,
                                     opt.t_min);
            in.t.push_back(t);
            eps.set_slice(n, e);
            in.x_t.set_slice(n, corrupt_with_lambda(batch.x0.slice(n), lambda_of(net.config.schedule, t), e));
            sigma[n] = sigma_of(net.config.schedule, t);
        }
        ForwardCache cache;
        const Tensor score = score_forward(net, nullptr, in, &cache);
        BatchLoss loss = batch_score_loss(score, eps, sigma, batch.mask);
        double mean = 0.0;
        for (double v : loss.per_reference) mean += v;
        mean /= static_cast<double>(N);
        if (!std::isfinite(mean)) throw TrainingError("pretraining diverged at iteration " + std::to_string(it));
        loss.d_score *= 1.0 / static_cast<double>(N);

        NetGradients grads = zero_net_gradients(net);
        score_backward(net, nullptr, in, cache, loss.d_score, nullptr, &grads);
        std::vector<const Tensor*> gptr;
        for (auto& g : grads.grads) gptr.push_back(&g);
        adam_step(values, gptr, adam);
        if (opt.weight_ema > 0.0) {
            const double d = std::min(opt.weight_ema, (1.0 + it) / (10.0 + it));
            for (std::size_t i = 0; i < values.size(); ++i) {
                averaged[i] *= d;
                axpy(1.0 - d, *values[i], averaged[i]);
            }
        }

        out.losses.push_back(mean);
        ema = it == 0 ? mean : opt.smoothing * ema + (1.0 - opt.smoothing) * mean;
        out.smoothed.push_back(ema);
    }
    if (opt.weight_ema > 0.0 && opt.iterations > 0)
        for (std::size_t i = 0; i < values.size(); ++i) *values[i] = averaged[i];
    return out;
}

}  // namespace nanovoice
