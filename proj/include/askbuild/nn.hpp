#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "askbuild/autograd.hpp"

namespace askbuild {

struct AttentionConfig {
    std::size_t num_heads = 1;
    std::size_t model_dim = 1;
    double dropout_rate = 0.0;

    void validate() const {
        if (num_heads == 0 || model_dim == 0) throw ConfigError("attention heads and model_dim must be positive");
        if (model_dim % num_heads != 0) {
            throw ConfigError("model_dim " + std::to_string(model_dim) + " is not divisible by " +
                              std::to_string(num_heads) + " heads");
        }
        if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("attention dropout must lie in [0, 1)");
    }
    std::size_t head_dim() const { return model_dim / num_heads; }
};

/// Projections of one attention sub-layer. Query rows have width model_dim,
/// context rows may have any width d_ctx.
///   wq [model×model], wk/wv [d_ctx×model], wo [model×model], biases [model].
struct AttentionWeights {
    Var wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Stacked gate weights in (reset, update, candidate) order.
///   w_input [d_in×3h], w_hidden [h×3h], b_input/b_hidden [3h].
struct GruWeights {
    Var w_input, w_hidden, b_input, b_hidden;
};

/// Linear → dropout → residual add → layer norm.
struct FeedForwardWeights {
    Var w, b, gain, beta;
};

inline Var linear(Var x, Var w, Var b) { return ag::add_bias(ag::matmul(x, w), b); }

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
inline Tensor xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    return Tensor::uniform(std::move(shape), bound, rng);
}

/// One GRU update from already projected input gates xi = x·W_i + b_i [1×3h].
inline Var gru_step_projected(Var xi, Var h_prev, const GruWeights& w) {
    std::size_t h = h_prev.value().cols();
    if (xi.value().cols() != 3 * h) throw DimensionError("gru_step: input projection width must be 3×hidden");
    Var hh = linear(h_prev, w.w_hidden, w.b_hidden);
    Var r = ag::sigmoid(ag::add(ag::slice_cols(xi, 0, h), ag::slice_cols(hh, 0, h)));
    Var z = ag::sigmoid(ag::add(ag::slice_cols(xi, h, 2 * h), ag::slice_cols(hh, h, 2 * h)));
    Var n = ag::tanh(ag::add(ag::slice_cols(xi, 2 * h, 3 * h), ag::mul(r, ag::slice_cols(hh, 2 * h, 3 * h))));
    // h' = (1 − z)·n + z·h = n + z·(h − n)
    return ag::add(n, ag::mul(z, ag::sub(h_prev, n)));
}

/// x_t [1×d_in], h_prev [1×h] -> h_t [1×h]
inline Var gru_step(Var x, Var h_prev, const GruWeights& w) {
    const Tensor& wi = w.w_input.value();
    const Tensor& wh = w.w_hidden.value();
    std::size_t h = h_prev.value().cols();
    if (x.value().rank() != 2 || x.value().dim(0) != 1 || h_prev.value().rank() != 2 || h_prev.value().dim(0) != 1) {
        throw DimensionError("gru_step: x and h_prev must be single rows");
    }
    if (wi.rank() != 2 || wi.dim(0) != x.value().cols() || wi.dim(1) != 3 * h || wh.rank() != 2 ||
        wh.dim(0) != h || wh.dim(1) != 3 * h) {
        throw DimensionError("gru_step: weights " + shape_str(wi.shape()) + "/" + shape_str(wh.shape()) +
                             " inconsistent with input width " + std::to_string(x.value().cols()) +
                             " and hidden width " + std::to_string(h));
    }
    return gru_step_projected(linear(x, w.w_input, w.b_input), h_prev, w);
}

/// Multi-head scaled dot-product attention.
///
/// query [n_q×model_dim], context [n_c×d_ctx]. `key_keep` (one flag per
/// context row) removes context rows from every query's distribution. When
/// `probe` is given it receives the per-head weight matrices [n_q×n_c].
inline Var multi_head_attention(Var query, Var context, const AttentionWeights& w, const AttentionConfig& cfg,
                                const KeepMask& key_keep = {}, std::vector<Tensor>* probe = nullptr) {
    cfg.validate();
    const Tensor& qv = query.value();
    if (qv.rank() != 2 || qv.dim(1) != cfg.model_dim) {
        throw DimensionError("attention: query " + shape_str(qv.shape()) + " does not match model_dim " +
                             std::to_string(cfg.model_dim));
    }
    if (!key_keep.empty() && key_keep.size() != context.value().dim(0)) {
        throw DimensionError("attention: key mask length does not match context rows");
    }
    std::size_t hd = cfg.head_dim();
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    Var q = linear(query, w.wq, w.bq);
    Var k = linear(context, w.wk, w.bk);
    Var v = linear(context, w.wv, w.bv);
    std::vector<Var> heads;
    if (probe) probe->clear();
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
        Var qh = q, kh = k, vh = v;
        if (cfg.num_heads > 1) {
            qh = ag::slice_cols(q, h * hd, (h + 1) * hd);
            kh = ag::slice_cols(k, h * hd, (h + 1) * hd);
            vh = ag::slice_cols(v, h * hd, (h + 1) * hd);
        }
        Var scores = ag::scale(ag::matmul_nt(qh, kh), inv_sqrt);
        Var weights = ag::softmax(scores, key_keep);
        if (probe) probe->push_back(weights.value());
        if (cfg.dropout_rate > 0.0) weights = ag::dropout(weights, cfg.dropout_rate);
        heads.push_back(ag::matmul(weights, vh));
    }
    Var joined = heads.size() == 1 ? heads.front() : ag::concat_cols(heads);
    return linear(joined, w.wo, w.bo);
}

inline Var feed_forward(Var x, const FeedForwardWeights& w, double dropout_rate) {
    Var y = ag::dropout(linear(x, w.w, w.b), dropout_rate);
    return ag::layer_norm(ag::add(x, y), w.gain, w.beta);
}

}  // namespace askbuild
