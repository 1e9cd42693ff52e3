#pragma once

#include <cmath>
#include <map>
#include <string>

#include "askbuild/tensor.hpp"

namespace askbuild {

using ParamMap = std::map<std::string, Tensor>;

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
};

struct AdamState {
    ParamMap first_moment;
    ParamMap second_moment;
    std::size_t step = 0;
};

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// left untouched.
inline void adam_step(ParamMap& params, const ParamMap& grads, AdamState& state, const AdamConfig& cfg) {
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double correct1 = 1.0 - std::pow(cfg.beta1, t);
    const double correct2 = 1.0 - std::pow(cfg.beta2, t);
    for (auto& [name, p] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) continue;
        const Tensor& g = git->second;
        if (g.shape() != p.shape()) {
            throw DimensionError("adam: gradient for " + name + " has shape " + shape_str(g.shape()) +
                                 ", parameter has " + shape_str(p.shape()));
        }
        auto [mit, m_new] = state.first_moment.try_emplace(name, p.shape(), 0.0);
        auto [vit, v_new] = state.second_moment.try_emplace(name, p.shape(), 0.0);
        Tensor& m = mit->second;
        Tensor& v = vit->second;
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            double mhat = m[i] / correct1;
            double vhat = v[i] / correct2;
            p[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_global_norm(ParamMap& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& [_, g] : grads)
        for (double v : g.data()) sq += v * v;
    double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        double s = max_norm / norm;
        for (auto& [_, g] : grads)
            for (double& v : g.data()) v *= s;
    }
    return norm;
}

}  // namespace askbuild
