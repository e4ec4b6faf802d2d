#pragma once

// Central finite-difference checks of the analytic adapter gradients, at the
// adapted-layer level and end to end through the score network.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nanovoice/adapter_bank.hpp"
#include "nanovoice/score_net.hpp"
#include "nanovoice/trainer.hpp"

namespace nanovoice {

struct GradCheckOptions {
    int instances = 20;         // random layer-level instances per configuration
    int network_instances = 2;  // end-to-end instances per configuration
    double step = 1e-5;
    double tolerance = 1e-4;
    std::uint64_t seed = 0;
    /// Test hook: flip the sign of every dm before comparison.
    bool inject_dm_sign_error = false;
    /// Also run detached-norm configurations, reported as informational.
    bool include_detached = true;
};

struct GradCheckCase {
    std::string config;        // e.g. "shared-b/scale+norm/freeze-b"
    std::string level;         // "layer" or "network"
    int instance = 0;
    std::string param;         // worst parameter tensor, e.g. "layer0.m"
    double max_rel_error = 0.0;
    bool informational = false;
    bool passed = true;
};

struct GradCheckReport {
    std::vector<GradCheckCase> cases;

    bool passed() const {
        return std::all_of(cases.begin(), cases.end(), [](const auto& c) { return c.informational || c.passed; });
    }
    std::vector<GradCheckCase> failures() const {
        std::vector<GradCheckCase> out;
        for (const auto& c : cases)
            if (!c.informational && !c.passed) out.push_back(c);
        return out;
    }
};

/// Relative error with a floor tied to the tensor's gradient scale, so entries
/// that are zero up to rounding do not produce spurious ratios.
inline double relative_error(double analytic, double numeric, double scale) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-4 * scale, 1e-12});
    return std::abs(analytic - numeric) / denom;
}

inline std::string config_label(const AdapterConfig& c) {
    std::string s = to_string(c.mode) + "/";
    s += !c.scale_enabled ? "plain" : c.normalization_enabled ? "scale+norm" : "scale";
    if (c.freeze_B) s += "/freeze-b";
    if (c.detach_norm) s += "/detached";
    return s;
}

/// Every valid flag combination: 4 modes × {plain, scale, scale+norm} × {B trainable, frozen}.
inline std::vector<AdapterConfig> gradcheck_configs(bool include_detached) {
    std::vector<AdapterConfig> out;
    for (auto mode : {SharingMode::batchwise, SharingMode::shared_B, SharingMode::shared_A, SharingMode::shared_both})
        for (int flags = 0; flags < 3; ++flags)
            for (bool freeze : {false, true}) {
                AdapterConfig c;
                c.mode = mode;
                c.scale_enabled = flags >= 1;
                c.normalization_enabled = flags == 2;
                c.freeze_B = freeze;
                out.push_back(c);
                if (include_detached && flags == 2 && !freeze) {
                    c.detach_norm = true;
                    out.push_back(c);
                }
            }
    return out;
}

namespace detail {

// Moves every trainable tensor away from its init so no gradient is trivially zero.
inline void randomize_bank(AdapterBank& bank, RngStream& s, double a_scale) {
    for (auto& layer : bank.layers) {
        layer.A = randn(s, layer.A.shape()) * a_scale;
        layer.B = randn(s, layer.B.shape()) * (1.0 / std::sqrt(static_cast<double>(layer.d())));
        if (!layer.m.empty())
            for (double& v : layer.m.values()) v *= 1.0 + 0.2 * s.normal();
    }
}

// Compares analytic gradients with central differences of `loss` for every trainable tensor.
inline GradCheckCase compare(AdapterBank& bank, BankGradients& grads, const std::function<double()>& loss,
                             const GradCheckOptions& opt) {
    GradCheckCase out;
    auto params = trainable_params(bank);
    auto analytic = gradient_list(bank, grads);
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& value = *params[p].value;
        Tensor numeric(value.shape());
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double keep = value[i];
            value[i] = keep + opt.step;
            const double up = loss();
            value[i] = keep - opt.step;
            const double down = loss();
            value[i] = keep;
            numeric[i] = (up - down) / (2.0 * opt.step);
        }
        const double scale = max_abs(numeric);
        if (out.param.empty()) out.param = params[p].name;
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double rel = relative_error((*analytic[p])[i], numeric[i], scale);
            if (rel > out.max_rel_error) {
                out.max_rel_error = rel;
                out.param = params[p].name;
            }
        }
    }
    out.passed = out.max_rel_error <= opt.tolerance;
    return out;
}

inline void maybe_inject(BankGradients& grads, const GradCheckOptions& opt) {
    if (!opt.inject_dm_sign_error) return;
    for (auto& g : grads)
        if (!g.dm.empty()) g.dm *= -1.0;
}

}  // namespace detail

/// One random adapted-layer instance: L = sum(c ⊙ y) + 0.5 sum(y²) with y = adapted_forward(x).
inline GradCheckCase check_layer_instance(AdapterConfig config, RngStream& s, const GradCheckOptions& opt) {
    const std::size_t d = 2 + s.below(5), k = 2 + s.below(5), T = 1 + s.below(4);
    config.rank = 1 + static_cast<int>(s.below(3));
    config.num_speakers = 1 + static_cast<int>(s.below(4));
    const std::size_t N = static_cast<std::size_t>(config.num_speakers);
    RngStream init = s.derive(s.next_block()[0]);
    AdapterBank bank = init_bank(config, {randn(s, {d, k})}, init);
    detail::randomize_bank(bank, s, 0.5);
    const Tensor x = randn(s, {N, T, k}), c = randn(s, {N, T, d});

    auto loss = [&] {
        const Tensor y = adapted_forward(bank, 0, x);
        double acc = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) acc += c[i] * y[i] + 0.5 * y[i] * y[i];
        return acc;
    };
    const Tensor y = adapted_forward(bank, 0, x);
    auto [g, dx] = adapted_backward(bank, 0, x, c + y);
    BankGradients grads{std::move(g)};
    detail::maybe_inject(grads, opt);
    GradCheckCase out = detail::compare(bank, grads, loss, opt);
    out.level = "layer";
    return out;
}

/// Tiny network used by the end-to-end checks.
inline ScoreNetConfig gradcheck_net_config() {
    ScoreNetConfig c;
    c.mel_bins = 4;
    c.hidden = 6;
    c.ff_hidden = 8;
    c.blocks = 2;
    c.content_codes = 3;
    c.train_speakers = 2;
    c.time_features = 4;
    return c;
}

/// One random end-to-end instance: summed masked score loss through the network.
inline GradCheckCase check_network_instance(AdapterConfig config, RngStream& s, const GradCheckOptions& opt) {
    const ScoreNetConfig nc = gradcheck_net_config();
    RngStream net_stream = s.derive(s.next_block()[0]);
    const ScoreNet net = make_score_net(nc, net_stream);
    const std::size_t N = 1 + s.below(3), L = 3 + s.below(3), F = nc.mel_bins;
    config.num_speakers = static_cast<int>(N);
    RngStream init = s.derive(s.next_block()[1]);
    AdapterBank bank = init_bank(config, net.adapted_base_weights(), init);
    detail::randomize_bank(bank, s, 0.1);

    ScoreInput in;
    std::vector<std::vector<int>> content(N, std::vector<int>(L, 0));
    Tensor mask({N, 1, L});
    std::vector<double> sigma;
    for (std::size_t n = 0; n < N; ++n) {
        const std::size_t len = n == 0 ? L : 1 + s.below(L);
        for (std::size_t j = 0; j < L; ++j) {
            content[n][j] = static_cast<int>(s.below(nc.content_codes));
            mask(n, 0, j) = j < len ? 1.0 : 0.0;
        }
        in.t.push_back(0.05 + 0.9 * s.uniform());
        sigma.push_back(sigma_of(nc.schedule, in.t.back()));
    }
    in.content = &content;
    in.mask = &mask;
    in.x_t = randn(s, {N, F, L});
    const Tensor eps = randn(s, {N, F, L});

    auto loss = [&] {
        const BatchLoss bl = batch_score_loss(score_forward(net, &bank, in), eps, sigma, mask);
        double acc = 0.0;
        for (double v : bl.per_reference) acc += v;
        return acc;
    };
    ForwardCache cache;
    const Tensor score = score_forward(net, &bank, in, &cache);
    const BatchLoss bl = batch_score_loss(score, eps, sigma, mask);
    BankGradients grads = zero_gradients(bank);
    score_backward(net, &bank, in, cache, bl.d_score, &grads, nullptr);
    detail::maybe_inject(grads, opt);
    GradCheckCase out = detail::compare(bank, grads, loss, opt);
    out.level = "network";
    return out;
}

/// Full suite over every configuration. Detached-norm cases are expected to
/// disagree with differences of the full function and are informational.
inline GradCheckReport run_gradcheck(const GradCheckOptions& opt) {
    GradCheckReport report;
    std::uint64_t tag = 0;
    for (const AdapterConfig& config : gradcheck_configs(opt.include_detached)) {
        auto record = [&](GradCheckCase c, int instance) {
            c.config = config_label(config);
            c.instance = instance;
            c.informational = config.detach_norm;
            report.cases.push_back(std::move(c));
        };
        for (int i = 0; i < opt.instances; ++i) {
            RngStream s{opt.seed ^ 0x6C4Bull, tag++, 0};
            record(check_layer_instance(config, s, opt), i);
        }
        for (int i = 0; i < opt.network_instances; ++i) {
            RngStream s{opt.seed ^ 0x6C4Eull, tag++, 0};
            record(check_network_instance(config, s, opt), i);
        }
    }
    return report;
}

}  // namespace nanovoice
