#pragma once

#include <cmath>
#include <vector>

#include "nanovoice/errors.hpp"
#include "nanovoice/tensor.hpp"

namespace nanovoice {

struct AdamHyper {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Moments for a fixed list of parameter tensors.
struct AdamState {
    AdamHyper hyper;
    std::vector<Tensor> first;
    std::vector<Tensor> second;
    long step = 0;

    AdamState() = default;
    AdamState(AdamHyper h, const std::vector<Tensor*>& params) : hyper(h) {
        for (const Tensor* p : params) {
            first.emplace_back(p->shape());
            second.emplace_back(p->shape());
        }
    }
};

/// Bias-corrected Adam update applied in place. Each element is updated
/// independently, so disjoint slices of one tensor evolve independently.
inline void adam_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads, AdamState& state) {
    if (params.size() != grads.size() || params.size() != state.first.size())
        throw DimensionError("adam_step: parameter, gradient and state counts differ");
    for (std::size_t i = 0; i < params.size(); ++i) {
        require_same_shape(*params[i], *grads[i], "adam_step");
        require_same_shape(*params[i], state.first[i], "adam_step");
    }
    ++state.step;
    const auto& h = state.hyper;
    const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        double* p = params[i]->data();
        const double* g = grads[i]->data();
        double* m = state.first[i].data();
        double* v = state.second[i].data();
        for (std::size_t j = 0; j < params[i]->size(); ++j) {
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
            const double mhat = m[j] / c1;
            const double vhat = v[j] / c2;
            p[j] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
        }
    }
}

inline void adam_step(const std::vector<Tensor*>& params, const std::vector<Tensor*>& grads, AdamState& state) {
    adam_step(params, std::vector<const Tensor*>(grads.begin(), grads.end()), state);
}

}  // namespace nanovoice
