#pragma once

// The builder network: recurrent dialogue encoder, 3D-convolutional world
// encoder, interleaved single/cross-modality fusion, and the slot decoder.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "askbuild/autograd.hpp"
#include "askbuild/checkpoint.hpp"
#include "askbuild/corpus.hpp"
#include "askbuild/nn.hpp"
#include "askbuild/optim.hpp"
#include "askbuild/task.hpp"
#include "askbuild/world.hpp"

namespace askbuild {

struct ModelConfig {
    std::size_t d_w = 300;             // word embedding / text stream width
    std::size_t d_c = 300;             // grid feature width before the last-action concat
    std::size_t k = 3;                 // 3×3×3 conv layers
    std::size_t n_text = 2;            // text cross-modality layers (N_T)
    std::size_t n_grid = 4;            // grid cross-modality layers (N_G)
    std::size_t context_length = 100;  // s
    std::size_t heads_text = 2;
    std::size_t heads_grid = 1;
    double dropout = 0.2;
    std::size_t num_action_types = 3;  // d_a
    std::size_t vocab_size = 4;
    /// Learned per-cell embedding added to the grid stream. Without it the
    /// convolution cannot tell interior cells of an empty region apart.
    bool grid_position_embedding = true;
    /// Average U over non-padding positions only. False averages all s rows.
    bool mean_excludes_padding = true;
    /// Run the grid stream on feasible cells only. Numerically the same as
    /// masking inside every attention, much cheaper.
    bool compact_grid = true;
    /// Add the query back onto the attention output, as in BERT-style
    /// attention blocks. Without it every grid row becomes the same average.
    bool attention_residual = true;

    std::size_t grid_dim() const { return d_c + kLastActionDims; }

    void validate() const {
        if (d_w == 0 || d_c == 0 || k == 0 || context_length == 0 || num_action_types == 0) {
            throw ConfigError("model dimensions must be positive");
        }
        if (n_text < 1 || n_grid < n_text) throw ConfigError("need n_grid >= n_text >= 1");
        if (vocab_size < 4) throw ConfigError("vocab_size must cover the reserved tokens");
        AttentionConfig{heads_text, d_w, 0.0}.validate();
        AttentionConfig{heads_grid, grid_dim(), 0.0}.validate();
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
    }

    nlohmann::json to_json() const {
        return {{"d_w", d_w},
                {"d_c", d_c},
                {"k", k},
                {"n_text", n_text},
                {"n_grid", n_grid},
                {"context_length", context_length},
                {"heads_text", heads_text},
                {"heads_grid", heads_grid},
                {"dropout", dropout},
                {"num_action_types", num_action_types},
                {"vocab_size", vocab_size},
                {"grid_position_embedding", grid_position_embedding},
                {"mean_excludes_padding", mean_excludes_padding},
                {"compact_grid", compact_grid},
                {"attention_residual", attention_residual}};
    }

    /// Missing fields keep their defaults; unknown fields are rejected.
    static ModelConfig from_json(const nlohmann::json& j) { return from_json(j, ModelConfig()); }

    static ModelConfig from_json(const nlohmann::json& j, ModelConfig base) {
        if (!j.is_object()) throw ConfigError("model config must be a JSON object");
        static const std::vector<std::string> known = {
            "d_w",       "d_c",      "k",          "n_text",           "n_grid",     "context_length",
            "heads_text", "heads_grid", "dropout", "num_action_types", "vocab_size", "grid_position_embedding",
            "mean_excludes_padding", "compact_grid", "attention_residual"};
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
                throw ConfigError("unknown model config field " + it.key());
            }
        }
        ModelConfig c = base;
        try {
            c.d_w = j.value("d_w", c.d_w);
            c.d_c = j.value("d_c", c.d_c);
            c.k = j.value("k", c.k);
            c.n_text = j.value("n_text", c.n_text);
            c.n_grid = j.value("n_grid", c.n_grid);
            c.context_length = j.value("context_length", c.context_length);
            c.heads_text = j.value("heads_text", c.heads_text);
            c.heads_grid = j.value("heads_grid", c.heads_grid);
            c.dropout = j.value("dropout", c.dropout);
            c.num_action_types = j.value("num_action_types", c.num_action_types);
            c.vocab_size = j.value("vocab_size", c.vocab_size);
            c.grid_position_embedding = j.value("grid_position_embedding", c.grid_position_embedding);
            c.mean_excludes_padding = j.value("mean_excludes_padding", c.mean_excludes_padding);
            c.compact_grid = j.value("compact_grid", c.compact_grid);
            c.attention_residual = j.value("attention_residual", c.attention_residual);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("model config: ") + e.what());
        }
        return c;
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Every trainable tensor, keyed by a unique name.
using ModelParams = ParamMap;

namespace names {

inline std::string f1(std::size_t i) { return "conv.f1." + std::to_string(i); }
inline std::string f2(std::size_t i) { return "conv.f2." + std::to_string(i); }
inline std::string text_single(std::size_t n) { return "text_single." + std::to_string(n); }
inline std::string grid_single(std::size_t m) { return "grid_single." + std::to_string(m); }
inline std::string text_cross(std::size_t n) { return "text_cross." + std::to_string(n); }
inline std::string grid_cross(std::size_t m) { return "grid_cross." + std::to_string(m); }

}  // namespace names

namespace detail {

struct ParamInit {
    ModelParams& params;
    std::mt19937_64& rng;

    void weight(const std::string& name, Shape shape, std::size_t fan_in, std::size_t fan_out) {
        params.emplace(name, xavier_uniform(std::move(shape), fan_in, fan_out, rng));
    }
    void zeros(const std::string& name, Shape shape) { params.emplace(name, Tensor(std::move(shape), 0.0)); }
    void ones(const std::string& name, Shape shape) { params.emplace(name, Tensor(std::move(shape), 1.0)); }
    void table(const std::string& name, std::size_t rows, std::size_t cols) {
        params.emplace(name, Tensor::uniform({rows, cols}, std::sqrt(3.0 / static_cast<double>(cols)), rng));
    }

    void attention(const std::string& prefix, std::size_t model, std::size_t ctx) {
        weight(prefix + ".attn.wq", {model, model}, model, model);
        zeros(prefix + ".attn.bq", {model});
        weight(prefix + ".attn.wk", {ctx, model}, ctx, model);
        zeros(prefix + ".attn.bk", {model});
        weight(prefix + ".attn.wv", {ctx, model}, ctx, model);
        zeros(prefix + ".attn.bv", {model});
        weight(prefix + ".attn.wo", {model, model}, model, model);
        zeros(prefix + ".attn.bo", {model});
    }

    void feed_forward(const std::string& prefix, std::size_t dim) {
        weight(prefix + ".ff.w", {dim, dim}, dim, dim);
        zeros(prefix + ".ff.b", {dim});
        ones(prefix + ".ff.gain", {dim});
        zeros(prefix + ".ff.beta", {dim});
    }
};

}  // namespace detail

inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelParams p;
    std::mt19937_64 rng(seed);
    detail::ParamInit init{p, rng};
    const std::size_t dw = cfg.d_w, dc = cfg.d_c, dg = cfg.grid_dim();

    init.table("embedding", cfg.vocab_size, dw);
    init.weight("gru.w_input", {dw, 3 * dw}, dw, 3 * dw);
    init.weight("gru.w_hidden", {dw, 3 * dw}, dw, 3 * dw);
    init.zeros("gru.b_input", {3 * dw});
    init.zeros("gru.b_hidden", {3 * dw});

    for (std::size_t i = 0; i < cfg.k; ++i) {
        std::size_t cin = i == 0 ? kWorldChannels : dc;
        init.weight(names::f1(i) + ".weight", {dc, cin, 3, 3, 3}, cin * 27, dc * 27);
        init.zeros(names::f1(i) + ".bias", {dc});
        if (i + 1 < cfg.k) {
            init.weight(names::f2(i) + ".weight", {dc, dc, 1, 1, 1}, dc, dc);
            init.zeros(names::f2(i) + ".bias", {dc});
        }
    }
    if (cfg.grid_position_embedding) init.table("grid.position", kNumCells, dg);

    for (std::size_t n = 0; n <= cfg.n_text; ++n) {
        init.attention(names::text_single(n), dw, dw);
        init.feed_forward(names::text_single(n), dw);
    }
    for (std::size_t m = 0; m <= cfg.n_grid; ++m) {
        init.attention(names::grid_single(m), dg, dg);
        init.feed_forward(names::grid_single(m), dg);
    }
    for (std::size_t n = 0; n < cfg.n_text; ++n) {
        init.attention(names::text_cross(n), dw, dg);
        init.feed_forward(names::text_cross(n), dw);
    }
    for (std::size_t m = 0; m < cfg.n_grid; ++m) {
        init.attention(names::grid_cross(m), dg, dw);
        init.feed_forward(names::grid_cross(m), dg);
    }

    init.weight("decoder.location", {dg}, dg, 1);
    init.weight("decoder.color", {kNumColors, dw}, dw, kNumColors);
    init.weight("decoder.type", {cfg.num_action_types, dw}, dw, cfg.num_action_types);
    return p;
}

inline std::size_t parameter_count(const ModelParams& p) {
    std::size_t n = 0;
    for (const auto& [_, t] : p) n += t.size();
    return n;
}

/// Binds named parameters into one graph, once each.
class ParamBinder {
public:
    ParamBinder(Graph& g, const ModelParams& params, bool requires_grad = true)
        : graph_(g), params_(params), requires_grad_(requires_grad) {}

    Var operator()(const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        auto p = params_.find(name);
        if (p == params_.end()) throw ConfigError("model has no parameter named " + name);
        Var v = graph_.parameter(p->second, requires_grad_);
        bound_.emplace(name, v);
        return v;
    }

    AttentionWeights attention(const std::string& prefix) {
        auto a = [&](const char* s) { return (*this)(prefix + ".attn." + s); };
        return {a("wq"), a("bq"), a("wk"), a("bk"), a("wv"), a("bv"), a("wo"), a("bo")};
    }

    FeedForwardWeights feed_forward(const std::string& prefix) {
        auto f = [&](const char* s) { return (*this)(prefix + ".ff." + s); };
        return {f("w"), f("b"), f("gain"), f("beta")};
    }

    Graph& graph() { return graph_; }
    const std::map<std::string, Var>& bound() const { return bound_; }

private:
    Graph& graph_;
    const ModelParams& params_;
    bool requires_grad_;
    std::map<std::string, Var> bound_;
};

/// Everything forward needs, precomputed from a dialogue and a world.
struct ModelInputs {
    std::vector<int> tokens;  // length s
    KeepMask token_keep;      // 1 for non-padding positions
    Tensor world;             // [8×11×9×11]
    Tensor last_action;       // [11]
    KeepMask feasible;        // [1089], placements ∪ removals
};

inline KeepMask token_keep_mask(const std::vector<int>& tokens) {
    KeepMask keep(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) keep[i] = tokens[i] != kPadId;
    return keep;
}

inline ModelInputs prepare_inputs(const Dialogue& dialogue, const WorldState& w, const Vocabulary& vocab,
                                  const ModelConfig& cfg) {
    ModelInputs in;
    in.tokens = vocab.encode(flatten_dialogue(dialogue, cfg.context_length));
    in.token_keep = token_keep_mask(in.tokens);
    in.world = encode_world(w);
    in.last_action = encode_last_action(w);
    in.feasible = feasibility_mask(w);
    return in;
}

/// Per-token hidden states U [s×d_w] of a unidirectional GRU over the embeddings.
inline Var encode_dialogue(ParamBinder& P, const std::vector<int>& tokens, const ModelConfig& cfg) {
    if (tokens.size() != cfg.context_length) {
        throw DimensionError("encode_dialogue: expected " + std::to_string(cfg.context_length) + " tokens, got " +
                             std::to_string(tokens.size()));
    }
    Graph& g = P.graph();
    GruWeights gru{P("gru.w_input"), P("gru.w_hidden"), P("gru.b_input"), P("gru.b_hidden")};
    Var emb = ag::embedding(P("embedding"), tokens);
    Var projected = linear(emb, gru.w_input, gru.b_input);
    Var h = g.constant(Tensor({1, cfg.d_w}, 0.0));
    std::vector<Var> states;
    states.reserve(tokens.size());
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        h = gru_step_projected(ag::gather_rows(projected, {t}), h, gru);
        states.push_back(h);
    }
    return ag::concat_rows(states);
}

/// W' [d_c'×1089]: conv stack over the raw world, then the last-action
/// vector appended to every cell.
inline Var encode_world_features(ParamBinder& P, const Tensor& raw, const Tensor& last_action, const ModelConfig& cfg) {
    if (raw.shape() != Shape{kWorldChannels, kSizeX, kSizeY, kSizeZ}) {
        throw DimensionError("encode_world: raw world must be 8x11x9x11, got " + shape_str(raw.shape()));
    }
    if (last_action.shape() != Shape{kLastActionDims}) {
        throw DimensionError("encode_world: last action must have 11 entries, got " + shape_str(last_action.shape()));
    }
    Graph& g = P.graph();
    Var x = g.constant(raw);
    for (std::size_t i = 0; i + 1 < cfg.k; ++i) {
        x = ag::relu(ag::conv3d(x, P(names::f1(i) + ".weight"), P(names::f1(i) + ".bias"), 1));
        x = ag::relu(ag::conv3d(x, P(names::f2(i) + ".weight"), P(names::f2(i) + ".bias"), 0));
    }
    x = ag::relu(ag::conv3d(x, P(names::f1(cfg.k - 1) + ".weight"), P(names::f1(cfg.k - 1) + ".bias"), 1));
    Var flat = ag::reshape(x, {cfg.d_c, kNumCells});
    Tensor tail({kLastActionDims, kNumCells});
    for (std::size_t r = 0; r < kLastActionDims; ++r)
        for (std::size_t c = 0; c < kNumCells; ++c) tail[r * kNumCells + c] = last_action[r];
    return ag::concat_rows({flat, g.constant(std::move(tail))});
}

/// Observations recorded during fusion, for tests and diagnostics.
struct FusionProbe {
    /// Per grid single-modality layer, per head: attention weights with one
    /// row per grid query and one column per cell (1089).
    std::vector<std::vector<Tensor>> grid_self_weights;
    /// Grid rows that were queries in grid_self_weights, in row order.
    std::vector<std::size_t> grid_query_cells;
    /// For each grid cross layer: 1-based index of the text single-modality
    /// layer whose output served as context.
    std::vector<std::size_t> grid_cross_text_source;
    /// For each text cross layer: 1-based index of the grid single-modality layer used.
    std::vector<std::size_t> text_cross_grid_source;
};

struct FusionOutput {
    Var text;  // U^{N_T} [s×d_w]
    Var grid;  // W^{N_G} [1089×d_c']
};

/// Interleaved single/cross-modality fusion. Infeasible cells never act as
/// keys, and their rows are zero after every grid layer. The stream with
/// more layers keeps using the other stream's last single-modality output.
inline FusionOutput fuse(ParamBinder& P, Var text0, Var grid0, const KeepMask& token_keep, const KeepMask& feasible,
                         const ModelConfig& cfg, FusionProbe* probe = nullptr) {
    const std::size_t dg = cfg.grid_dim();
    if (feasible.size() != kNumCells) throw DimensionError("fuse: feasibility mask must cover 1089 cells");
    if (grid0.value().shape() != Shape{dg, kNumCells}) {
        throw DimensionError("fuse: grid features must be " + shape_str({dg, kNumCells}) + ", got " +
                             shape_str(grid0.value().shape()));
    }
    if (text0.value().shape() != Shape{cfg.context_length, cfg.d_w}) {
        throw DimensionError("fuse: text features must be " + shape_str({cfg.context_length, cfg.d_w}));
    }
    std::vector<std::size_t> cells;
    for (std::size_t i = 0; i < kNumCells; ++i) {
        if (feasible[i]) cells.push_back(i);
    }
    if (cells.empty()) throw DimensionError("fuse: every grid cell is infeasible");

    KeepMask text_keep = token_keep;
    if (std::none_of(text_keep.begin(), text_keep.end(), [](auto k) { return k != 0; })) text_keep.assign(text_keep.size(), 1);

    AttentionConfig text_attn{cfg.heads_text, cfg.d_w, 0.0};
    AttentionConfig grid_attn{cfg.heads_grid, dg, 0.0};

    Var grid = ag::transpose(grid0);
    if (cfg.grid_position_embedding) grid = ag::add(grid, P("grid.position"));

    KeepMask grid_keep;              // keys mask over grid rows
    std::vector<double> row_factor;  // zeroes infeasible rows (dense path only)
    if (cfg.compact_grid) {
        grid = ag::gather_rows(grid, cells);
    } else {
        grid_keep = feasible;
        row_factor.resize(kNumCells);
        for (std::size_t i = 0; i < kNumCells; ++i) row_factor[i] = feasible[i] ? 1.0 : 0.0;
    }
    auto settle = [&](Var x) { return cfg.compact_grid ? x : ag::scale_rows(x, row_factor); };

    if (probe) {
        *probe = {};
        probe->grid_query_cells = cfg.compact_grid ? cells : [] {
            std::vector<std::size_t> all(kNumCells);
            std::iota(all.begin(), all.end(), std::size_t{0});
            return all;
        }();
    }

    auto single = [&](const std::string& prefix, Var x, const AttentionConfig& ac, const KeepMask& keep,
                      std::vector<Tensor>* weights) {
        Var a = multi_head_attention(x, x, P.attention(prefix), ac, keep, weights);
        if (cfg.attention_residual) a = ag::add(x, a);
        return feed_forward(a, P.feed_forward(prefix), cfg.dropout);
    };
    auto cross = [&](const std::string& prefix, Var q, Var ctx, const AttentionConfig& ac, const KeepMask& keep) {
        Var a = multi_head_attention(q, ctx, P.attention(prefix), ac, keep);
        if (cfg.attention_residual) a = ag::add(q, a);
        return feed_forward(a, P.feed_forward(prefix), cfg.dropout);
    };

    Var text = text0;
    Var text_hat = text0, grid_hat = grid;
    const std::size_t steps = cfg.n_grid + 1;
    for (std::size_t i = 0; i < steps; ++i) {
        if (i <= cfg.n_text) text_hat = single(names::text_single(i), text, text_attn, text_keep, nullptr);
        std::vector<Tensor> weights;
        grid_hat = settle(single(names::grid_single(i), grid, grid_attn, grid_keep, probe ? &weights : nullptr));
        if (probe) {
            if (cfg.compact_grid) {
                // widen to one column per cell
                for (auto& w : weights) {
                    Tensor full({w.dim(0), kNumCells}, 0.0);
                    for (std::size_t r = 0; r < w.dim(0); ++r)
                        for (std::size_t c = 0; c < cells.size(); ++c) full[r * kNumCells + cells[c]] = w[r * cells.size() + c];
                    w = std::move(full);
                }
            }
            probe->grid_self_weights.push_back(std::move(weights));
        }
        if (i == cfg.n_grid) break;  // last grid single layer: no cross layer follows
        // Text consumes the current grid single output; grid consumes the
        // latest text single output (the final one once text has run out).
        Var text_ctx = text_hat;
        if (i < cfg.n_text) {
            Var next_text = cross(names::text_cross(i), text_hat, grid_hat, text_attn, grid_keep);
            if (probe) probe->text_cross_grid_source.push_back(i + 1);
            text = next_text;
        }
        grid = settle(cross(names::grid_cross(i), grid_hat, text_ctx, grid_attn, text_keep));
        if (probe) probe->grid_cross_text_source.push_back(std::min(i, cfg.n_text) + 1);
    }

    Var grid_out = cfg.compact_grid ? ag::scatter_rows(grid_hat, cells, kNumCells) : grid_hat;
    return {text_hat, grid_out};
}

struct SlotVars {
    Var location;  // [1089]
    Var color;     // [6]
    Var type;      // [d_a]
};

struct SlotPrediction {
    Tensor location_probs;
    Tensor color_probs;
    Tensor type_probs;

    friend bool operator==(const SlotPrediction&, const SlotPrediction&) = default;
};

inline SlotVars decode_slots(ParamBinder& P, Var text, Var grid, const KeepMask& token_keep, const ModelConfig& cfg) {
    Var u = ag::mean_rows(text, cfg.mean_excludes_padding ? token_keep : KeepMask{});
    return {ag::softmax(ag::matvec(grid, P("decoder.location"))), ag::softmax(ag::matvec(P("decoder.color"), u)),
            ag::softmax(ag::matvec(P("decoder.type"), u))};
}

inline SlotVars forward(ParamBinder& P, const ModelInputs& in, const ModelConfig& cfg, FusionProbe* probe = nullptr) {
    Var text = encode_dialogue(P, in.tokens, cfg);
    Var grid = encode_world_features(P, in.world, in.last_action, cfg);
    FusionOutput fused = fuse(P, text, grid, in.token_keep, in.feasible, cfg, probe);
    return decode_slots(P, fused.text, fused.grid, in.token_keep, cfg);
}

/// A model bundle: hyperparameters, weights, vocabulary and task.
struct BuilderModel {
    ModelConfig config;
    TaskSpec task = TaskSpec::building();
    Vocabulary vocab;
    ModelParams params;

    static BuilderModel create(ModelConfig cfg, TaskSpec task, Vocabulary vocab, std::uint64_t seed) {
        cfg.vocab_size = vocab.size();
        cfg.num_action_types = task.num_classes();
        cfg.validate();
        BuilderModel m{cfg, std::move(task), std::move(vocab), {}};
        m.params = init_params(m.config, seed);
        return m;
    }

    ModelInputs inputs(const Dialogue& d, const WorldState& w) const { return prepare_inputs(d, w, vocab, config); }

    /// Eval-mode forward without gradient bookkeeping.
    SlotPrediction predict(const ModelInputs& in) const {
        Graph g(false);
        ParamBinder P(g, params, false);
        SlotVars out = forward(P, in, config);
        return {out.location.value(), out.color.value(), out.type.value()};
    }

    SlotPrediction predict(const Dialogue& d, const WorldState& w) const { return predict(inputs(d, w)); }

    Checkpoint to_checkpoint() const {
        Checkpoint c;
        c.hyperparameters = {{"model", config.to_json()}, {"task", task.to_json()}};
        c.metadata = {{"vocabulary", vocab.tokens()}};
        for (const auto& [name, t] : params) c.tensors.emplace_back(name, t);
        return c;
    }

    static BuilderModel from_checkpoint(const Checkpoint& c) {
        BuilderModel m;
        try {
            m.config = ModelConfig::from_json(c.hyperparameters.at("model"));
            m.task = TaskSpec::from_json(c.hyperparameters.at("task"));
            m.vocab = Vocabulary::from_tokens(c.metadata.at("vocabulary").get<std::vector<std::string>>());
        } catch (const nlohmann::json::exception& e) {
            throw DataError(std::string("checkpoint header: ") + e.what());
        }
        if (m.vocab.size() != m.config.vocab_size) throw DataError("checkpoint vocabulary size disagrees with its config");
        if (m.task.num_classes() != m.config.num_action_types) {
            throw DataError("checkpoint task classes disagree with num_action_types");
        }
        ModelParams expected = init_params(m.config, 0);
        for (const auto& [name, t] : c.tensors) {
            auto it = expected.find(name);
            if (it == expected.end()) throw DataError("checkpoint tensor " + name + " is not part of this model");
            if (it->second.shape() != t.shape()) {
                throw DataError("checkpoint tensor " + name + " has shape " + shape_str(t.shape()) + ", expected " +
                                shape_str(it->second.shape()));
            }
            m.params.emplace(name, t);
        }
        if (m.params.size() != expected.size()) throw DataError("checkpoint is missing parameters");
        return m;
    }

    void save(const std::string& path) const { save_checkpoint(path, to_checkpoint()); }
    static BuilderModel load(const std::string& path) { return from_checkpoint(load_checkpoint(path)); }
};

}  // namespace askbuild
