#pragma once

// Variance-preserving diffusion with a linear beta schedule: forward
// corruption, the masked score-matching loss and the Euler-Maruyama reverse
// sampler.

#include <cmath>
#include <functional>
#include <string>

#include "nanovoice/errors.hpp"
#include "nanovoice/rng.hpp"
#include "nanovoice/tensor.hpp"

namespace nanovoice {

/// beta_t = beta0 + (beta1 - beta0) t on [0, 1].
struct NoiseSchedule {
    double beta0 = 0.05;
    double beta1 = 20.0;

    void validate() const {
        if (!(beta0 > 0.0) || !(beta1 >= beta0))
            throw ConfigError("noise schedule requires 0 < beta0 <= beta1 (got " + std::to_string(beta0) +
                              ", " + std::to_string(beta1) + ")");
    }

    double beta(double t) const { return beta0 + (beta1 - beta0) * t; }

    /// Integral of beta over [0, t].
    double integral(double t) const { return beta0 * t + 0.5 * (beta1 - beta0) * t * t; }
};

/// Smallest t drawn during training; keeps 1/sqrt(1 - lambda_t) bounded.
inline constexpr double kTrainTMin = 1e-4;

inline void require_unit_time(double t, const char* op) {
    if (!(t >= 0.0 && t <= 1.0))
        throw DomainError(std::string(op) + ": t=" + std::to_string(t) + " outside [0, 1]");
}

inline double lambda_of(const NoiseSchedule& schedule, double t) {
    require_unit_time(t, "lambda_of");
    return std::exp(-schedule.integral(t));
}

/// Standard deviation of the noise component at time t.
inline double sigma_of(const NoiseSchedule& schedule, double t) {
    return std::sqrt(-std::expm1(-schedule.integral(t)));
}

struct CorruptionSample {
    Tensor x_t;
    Tensor eps;
    double t = 0.0;
};

/// x_t = sqrt(lambda) x0 + sqrt(1 - lambda) eps for an explicit lambda.
inline Tensor corrupt_with_lambda(const Tensor& x0, double lambda, const Tensor& eps) {
    require_same_shape(x0, eps, "corrupt");
    const double a = std::sqrt(lambda), b = std::sqrt(1.0 - lambda);
    Tensor x(x0.shape());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = a * x0[i] + b * eps[i];
    check_finite(x, "corrupt");
    return x;
}

inline CorruptionSample corrupt(const NoiseSchedule& schedule, const Tensor& x0, double t, const Tensor& eps) {
    require_same_shape(x0, eps, "corrupt");
    const double lam = lambda_of(schedule, t);
    return {corrupt_with_lambda(x0, lam, eps), eps, t};
}

/// Mean over mask=1 elements of (sigma_t s + eps)^2 with an explicit sigma_t.
inline double score_loss_sigma(const Tensor& s_out, const Tensor& eps, double sigma, const Tensor& mask) {
    require_same_shape(s_out, eps, "score_loss");
    require_same_shape(s_out, mask, "score_loss");
    double acc = 0.0, count = 0.0;
    for (std::size_t i = 0; i < s_out.size(); ++i) {
        if (mask[i] == 0.0) continue;
        const double r = sigma * s_out[i] + eps[i];
        acc += r * r;
        count += 1.0;
    }
    if (count == 0.0) throw DegenerateInputError("score_loss: mask has no active element");
    const double loss = acc / count;
    if (!std::isfinite(loss)) throw NonFiniteError("score_loss: non-finite loss");
    return loss;
}

inline double score_loss(const NoiseSchedule& schedule, const Tensor& s_out, const Tensor& eps, double t,
                         const Tensor& mask) {
    require_unit_time(t, "score_loss");
    return score_loss_sigma(s_out, eps, sigma_of(schedule, t), mask);
}

/// d(score_loss)/d(s_out).
inline Tensor score_loss_grad_sigma(const Tensor& s_out, const Tensor& eps, double sigma, const Tensor& mask) {
    require_same_shape(s_out, eps, "score_loss_grad");
    require_same_shape(s_out, mask, "score_loss_grad");
    double count = 0.0;
    for (double m : mask.values()) count += (m != 0.0);
    if (count == 0.0) throw DegenerateInputError("score_loss_grad: mask has no active element");
    Tensor g(s_out.shape());
    for (std::size_t i = 0; i < g.size(); ++i)
        if (mask[i] != 0.0) g[i] = 2.0 * sigma * (sigma * s_out[i] + eps[i]) / count;
    return g;
}

/// One Euler-Maruyama step of the reverse SDE with a given beta_t.
inline Tensor reverse_step_beta(const Tensor& x_t, const Tensor& s, double beta_t, double dt, const Tensor& z) {
    require_same_shape(x_t, s, "reverse_step");
    require_same_shape(x_t, z, "reverse_step");
    const double noise = std::sqrt(beta_t * dt);
    Tensor out(x_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = x_t[i] + beta_t * (0.5 * x_t[i] + s[i]) * dt + noise * z[i];
    check_finite(out, "reverse_step");
    return out;
}

inline Tensor reverse_step(const NoiseSchedule& schedule, const Tensor& x_t, const Tensor& s, double t, double dt,
                           const Tensor& z) {
    require_unit_time(t, "reverse_step");
    if (!(dt > 0.0) || dt > t + 1e-12)
        throw DomainError("reverse_step: dt=" + std::to_string(dt) + " must satisfy 0 < dt <= t=" +
                          std::to_string(t));
    return reverse_step_beta(x_t, s, schedule.beta(t), dt, z);
}

using ScoreFn = std::function<Tensor(const Tensor& x_t, double t)>;

/// Iterates the reverse step from X_1 ~ N(0, I) over t = 1, 1 - dt, ..., dt.
/// The last step adds no noise.
inline Tensor sample(const NoiseSchedule& schedule, const Shape& shape, const ScoreFn& score_fn, int steps,
                     RngStream& stream) {
    if (steps < 1) throw DomainError("sample: steps must be >= 1");
    const double dt = 1.0 / steps;
    Tensor x = randn(stream, shape);
    const Tensor zero(shape);
    for (int i = 0; i < steps; ++i) {
        const double t = 1.0 - i * dt;
        const Tensor s = score_fn(x, t);
        if (i + 1 < steps) {
            const Tensor z = randn(stream, shape);
            x = reverse_step(schedule, x, s, t, dt, z);
        } else {
            x = reverse_step(schedule, x, s, t, dt, zero);
        }
    }
    return x;
}

}  // namespace nanovoice
