#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "askbuild/autograd.hpp"

namespace askbuild::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = d(rng);
    return t;
}

/// Random values in [-1, -margin] ∪ [margin, 1], away from kinks at 0.
inline Tensor random_away_from_zero(Shape shape, std::mt19937_64& rng, double margin = 0.05) {
    std::uniform_real_distribution<double> d(margin, 1.0);
    std::bernoulli_distribution sign(0.5);
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = sign(rng) ? d(rng) : -d(rng);
    return t;
}

struct GradCheck {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::string worst;
};

/// |a - n| / max(|a|, |n|, floor)
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

using Builder = std::function<Var(Graph&, const std::vector<Var>&)>;

/// Compares backward() against central differences for every entry of
/// every input. `build` must return a scalar. Every graph is created with
/// the same (training, seed), so dropout masks repeat across evaluations.
inline GradCheck check_gradients(std::vector<Tensor> inputs, const Builder& build, double h = 1e-5,
                                 bool training = false, std::uint64_t seed = 0) {
    auto eval = [&](const std::vector<Tensor>& xs) {
        Graph g(training, seed);
        std::vector<Var> vs;
        for (const auto& x : xs) vs.push_back(g.constant(x));
        return build(g, vs).value()[0];
    };
    Graph g(training, seed);
    std::vector<Var> vars;
    for (const auto& x : inputs) vars.push_back(g.variable(x));
    Var loss = build(g, vars);
    g.backward(loss);
    GradCheck r;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        Tensor analytic = g.grad(vars[k]);
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            double saved = inputs[k][i];
            inputs[k][i] = saved + h;
            double up = eval(inputs);
            inputs[k][i] = saved - h;
            double down = eval(inputs);
            inputs[k][i] = saved;
            double numeric = (up - down) / (2.0 * h);
            double e = rel_error(analytic[i], numeric);
            ++r.checked;
            if (e > r.max_rel_error) {
                r.max_rel_error = e;
                r.worst = "input " + std::to_string(k) + "[" + std::to_string(i) + "] analytic " +
                          std::to_string(analytic[i]) + " numeric " + std::to_string(numeric);
            }
        }
    }
    return r;
}

/// sum(x ⊙ w) for a fixed random w, so every output entry matters.
inline Var weighted_sum(Var x, std::uint64_t seed = 99) {
    std::mt19937_64 rng(seed);
    Graph& g = *x.graph;
    return ag::sum(ag::mul(x, g.constant(random_tensor(x.value().shape(), rng))));
}

}  // namespace askbuild::testing
