#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "askbuild/agent.hpp"
#include "askbuild/corpus.hpp"
#include "askbuild/evaluation.hpp"
#include "askbuild/model.hpp"
#include "askbuild/optim.hpp"
#include "askbuild/task.hpp"

namespace askbuild {

struct TrainConfig {
    AdamConfig adam;  // lr 1e-3 at desk scale
    std::size_t batch_size = 50;
    std::size_t epochs = 50;
    std::uint64_t seed = 0;
    bool balance_classes = false;
    double clip_norm = 5.0;
    /// Run validation every n epochs (the last epoch is always validated).
    std::size_t eval_every = 1;
    std::size_t rollout_max_steps = kDefaultMaxSteps;
    bool skip_illegal_gold = true;

    /// Settings stated for the full corpus.
    static TrainConfig paper() {
        TrainConfig c;
        c.adam.lr = 1e-6;
        return c;
    }

    void validate() const {
        if (adam.lr <= 0 || batch_size == 0 || epochs == 0 || eval_every == 0 || rollout_max_steps == 0) {
            throw ConfigError("training config values must be positive");
        }
        if (adam.beta1 < 0 || adam.beta1 >= 1 || adam.beta2 < 0 || adam.beta2 >= 1) {
            throw ConfigError("adam betas must lie in [0, 1)");
        }
    }

    nlohmann::json to_json() const {
        return {{"lr", adam.lr},
                {"beta1", adam.beta1},
                {"beta2", adam.beta2},
                {"eps", adam.eps},
                {"batch_size", batch_size},
                {"epochs", epochs},
                {"seed", seed},
                {"balance_classes", balance_classes},
                {"clip_norm", clip_norm},
                {"eval_every", eval_every},
                {"rollout_max_steps", rollout_max_steps},
                {"skip_illegal_gold", skip_illegal_gold}};
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        try {
            c.adam.lr = j.value("lr", c.adam.lr);
            c.adam.beta1 = j.value("beta1", c.adam.beta1);
            c.adam.beta2 = j.value("beta2", c.adam.beta2);
            c.adam.eps = j.value("eps", c.adam.eps);
            c.batch_size = j.value("batch_size", c.batch_size);
            c.epochs = j.value("epochs", c.epochs);
            c.seed = j.value("seed", c.seed);
            c.balance_classes = j.value("balance_classes", c.balance_classes);
            c.clip_norm = j.value("clip_norm", c.clip_norm);
            c.eval_every = j.value("eval_every", c.eval_every);
            c.rollout_max_steps = j.value("rollout_max_steps", c.rollout_max_steps);
            c.skip_illegal_gold = j.value("skip_illegal_gold", c.skip_illegal_gold);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("training config: ") + e.what());
        }
        c.validate();
        return c;
    }
};

/// One teacher-forced supervision target.
struct LabeledStep {
    std::size_t sample = 0;  // index into the sample list
    WorldState world;        // gold world before this step
    TypeClass type = TypeClass::Stop;
    std::optional<std::size_t> location;
    std::optional<Color> color;
};

/// Supervised steps for one sample. Execution samples yield one step per
/// gold action, each seeing the world after replaying the earlier gold
/// actions. The building task ignores ask/others samples. Human gold
/// sequences can contain illegal steps; those are skipped or rejected.
inline std::vector<LabeledStep> expand_steps(const Sample& s, std::size_t index, const TaskSpec& spec,
                                             bool skip_illegal = true, std::vector<std::string>* warnings = nullptr) {
    std::vector<LabeledStep> out;
    if (spec.task == TaskKind::Ask) {
        TypeClass c = s.label == ActionTypeLabel::Execution ? TypeClass::Execution
                      : s.label == ActionTypeLabel::Ask     ? TypeClass::Ask
                                                            : TypeClass::Others;
        out.push_back({index, s.world, c, std::nullopt, std::nullopt});
        return out;
    }
    if (s.label != ActionTypeLabel::Execution) {
        if (spec.task == TaskKind::Joint) {
            out.push_back({index, s.world, s.label == ActionTypeLabel::Ask ? TypeClass::Ask : TypeClass::Others,
                           std::nullopt, std::nullopt});
        }
        return out;
    }
    WorldState w = s.world;
    for (std::size_t i = 0; i < s.gold_actions.size(); ++i) {
        const BuildAction& a = s.gold_actions[i];
        if (auto why = legality_violation(w, a)) {
            std::string msg = "sample " + s.id + ": gold action " + std::to_string(i) + " is illegal: " + *why;
            if (!skip_illegal) throw DataError(msg);
            if (warnings) warnings->push_back(msg + " (skipped)");
            continue;
        }
        LabeledStep st{index, w, type_class_of(a.kind), std::nullopt, std::nullopt};
        if (a.location) st.location = a.location->index();
        st.color = a.color;
        out.push_back(std::move(st));
        if (a.kind == ActionKind::Stop) break;
        w = apply_action(w, a);
    }
    return out;
}

inline std::vector<LabeledStep> expand_all(const std::vector<Sample>& samples, const TaskSpec& spec) {
    std::vector<LabeledStep> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        auto st = expand_steps(samples[i], i, spec);
        out.insert(out.end(), st.begin(), st.end());
    }
    return out;
}

struct LossComponents {
    double location = 0.0;  // unweighted cross entropies; 0 when masked
    double color = 0.0;
    double type = 0.0;

    LossComponents& operator+=(const LossComponents& o) {
        location += o.location;
        color += o.color;
        type += o.type;
        return *this;
    }
};

struct StepLoss {
    Var total;
    LossComponents components;
};

namespace detail {

inline void check_step(const LabeledStep& step, const TaskSpec& spec) {
    if (!spec.index_of(step.type)) {
        throw DataError("gold type " + std::string(to_string(step.type)) + " is not a " + std::string(to_string(spec.task)) +
                        " class");
    }
    bool needs_location = step.type == TypeClass::Placement || step.type == TypeClass::Removal;
    if (needs_location && !step.location) throw DataError("gold location missing for a " + std::string(to_string(step.type)));
    if (step.type == TypeClass::Placement && !step.color) throw DataError("gold color missing for a placement");
}

}  // namespace detail

/// Weighted sum of the slot cross entropies. Location counts only for
/// placement/removal and color only for placement; masked terms are left
/// out of the graph entirely.
inline StepLoss step_loss(const SlotVars& out, const LabeledStep& step, const TaskSpec& spec) {
    detail::check_step(step, spec);
    StepLoss r;
    Var type_ce = ag::cross_entropy(out.type, *spec.index_of(step.type));
    r.components.type = type_ce.value()[0];
    r.total = ag::scale(type_ce, spec.weights.type);
    if (step.type == TypeClass::Placement || step.type == TypeClass::Removal) {
        Var loc = ag::cross_entropy(out.location, *step.location);
        r.components.location = loc.value()[0];
        r.total = ag::add(r.total, ag::scale(loc, spec.weights.location));
    }
    if (step.type == TypeClass::Placement) {
        Var col = ag::cross_entropy(out.color, static_cast<std::size_t>(*step.color));
        r.components.color = col.value()[0];
        r.total = ag::add(r.total, ag::scale(col, spec.weights.color));
    }
    return r;
}

/// Graph-free loss value, same rules.
inline double step_loss_value(const SlotPrediction& p, const LabeledStep& step, const TaskSpec& spec,
                              LossComponents* components = nullptr) {
    detail::check_step(step, spec);
    auto ce = [](const Tensor& probs, std::size_t t) { return -std::log(std::max(probs[t], ag::kProbFloor)); };
    LossComponents c;
    c.type = ce(p.type_probs, *spec.index_of(step.type));
    double total = spec.weights.type * c.type;
    if (step.type == TypeClass::Placement || step.type == TypeClass::Removal) {
        c.location = ce(p.location_probs, *step.location);
        total += spec.weights.location * c.location;
    }
    if (step.type == TypeClass::Placement) {
        c.color = ce(p.color_probs, static_cast<std::size_t>(*step.color));
        total += spec.weights.color * c.color;
    }
    if (components) *components = c;
    return total;
}

/// Whether greedy decoding of `p` reproduces the gold step.
inline bool step_correct(const SlotPrediction& p, const LabeledStep& step, const TaskSpec& spec) {
    DecodedStep d = decode_action(p, step.world, spec);
    if (d.type != step.type) return false;
    if (!is_build_class(step.type)) return true;
    if (!d.action) return false;
    if (step.type == TypeClass::Stop) return d.action->kind == ActionKind::Stop;
    Coord at = Coord::from_index(*step.location);
    BuildAction gold = step.type == TypeClass::Placement ? BuildAction::place(*step.color, at) : BuildAction::remove(at);
    return *d.action == gold;
}

struct EpochLog {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    LossComponents components;  // mean unweighted cross entropies
    std::size_t steps = 0;
    std::optional<double> val_metric;
    std::array<std::size_t, 3> class_draws{};  // samples drawn per label this epoch

    nlohmann::json to_json() const {
        nlohmann::json j = {{"epoch", epoch},
                            {"train_loss", train_loss},
                            {"components", {{"location", components.location}, {"color", components.color}, {"type", components.type}}},
                            {"steps", steps},
                            {"class_draws", {{"execution", class_draws[0]}, {"ask", class_draws[1]}, {"others", class_draws[2]}}}};
        j["val_metric"] = val_metric ? nlohmann::json(*val_metric) : nlohmann::json(nullptr);
        return j;
    }
};

/// Teacher-forced per-step accuracy.
inline double step_accuracy(const BuilderModel& m, const std::vector<Sample>& samples) {
    auto steps = expand_all(samples, m.task);
    if (steps.empty()) return 0.0;
    std::size_t ok = 0;
    for (const auto& st : steps) ok += step_correct(m.predict(samples[st.sample].dialogue, st.world), st, m.task);
    return static_cast<double>(ok) / static_cast<double>(steps.size());
}

struct EvalOptions {
    std::size_t max_steps = kDefaultMaxSteps;
    bool with_step_accuracy = false;
};

/// Runs the agent over every sample. Ask/joint decide the type from the
/// first step; building always rolls out.
inline std::vector<PredictionRecord> predict_samples(const BuilderModel& m, const std::vector<Sample>& samples,
                                                     std::size_t max_steps = kDefaultMaxSteps) {
    Predictor p = predictor_for(m);
    std::vector<PredictionRecord> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        if (m.task.task == TaskKind::Building && s.label != ActionTypeLabel::Execution) continue;
        PredictionRecord r;
        r.sample_id = s.id;
        r.gold_label = s.label;
        r.initial_world = s.world;
        r.gold_actions = s.gold_actions;
        DecodedStep first = decode_action(p.predict(s.dialogue, s.world), s.world, m.task);
        r.predicted_type = std::string(to_string(first.type));
        r.predicted_label = label_group(first.type);
        if (m.task.task == TaskKind::Building || (m.task.predicts_actions() && r.predicted_label == ActionTypeLabel::Execution)) {
            r.actions = rollout(p, s.world, s.dialogue, max_steps).actions;
        }
        out.push_back(std::move(r));
    }
    return out;
}

inline EvalReport evaluate_model(const BuilderModel& m, const std::vector<Sample>& samples, const EvalOptions& opt = {},
                                 std::vector<PredictionRecord>* log = nullptr) {
    auto records = predict_samples(m, samples, opt.max_steps);
    EvalReport rep = score_records(records, std::string(to_string(m.task.task)));
    if (opt.with_step_accuracy) rep.step_accuracy = step_accuracy(m, samples);
    if (log) *log = std::move(records);
    return rep;
}

/// Model-selection metric: F1 for building/joint, accuracy for ask.
inline double selection_metric(const EvalReport& r, TaskKind task) {
    if (task == TaskKind::Ask) return r.confusion ? r.confusion->accuracy() : 0.0;
    return r.building ? r.building->f1() : 0.0;
}

struct TrainResult {
    BuilderModel best;
    BuilderModel last;
    std::size_t best_epoch = 0;  // 1-based
    double best_metric = 0.0;
    std::vector<EpochLog> log;
    std::vector<std::string> warnings;  // skipped illegal gold steps
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace detail

/// Accumulates gradients of the mean step loss over `steps`; returns the
/// mean loss and mean components.
inline double batch_gradients(const BuilderModel& m, const std::vector<Sample>& samples,
                              const std::vector<LabeledStep>& steps, std::uint64_t seed, ParamMap& grads,
                              LossComponents& components) {
    grads.clear();
    components = {};
    double total = 0.0;
    const double inv = 1.0 / static_cast<double>(steps.size());
    for (std::size_t i = 0; i < steps.size(); ++i) {
        const LabeledStep& st = steps[i];
        Graph g(true, detail::mix_seed(seed, i));
        ParamBinder P(g, m.params);
        SlotVars out = forward(P, m.inputs(samples[st.sample].dialogue, st.world), m.config);
        StepLoss loss = step_loss(out, st, m.task);
        total += loss.total.value()[0];
        components += loss.components;
        g.backward(loss.total);
        for (const auto& [name, v] : P.bound()) {
            if (!g.has_grad(v.id)) continue;
            const Tensor& gv = g.grad(v);
            auto [it, fresh] = grads.try_emplace(name, gv.shape(), 0.0);
            double* dst = it->second.ptr();
            const double* src = gv.ptr();
            for (std::size_t k = 0; k < gv.size(); ++k) dst[k] += inv * src[k];
        }
    }
    components.location *= inv;
    components.color *= inv;
    components.type *= inv;
    return total * inv;
}

using StopPredicate = std::function<bool(const EpochLog&, const BuilderModel&)>;

/// The best-by-validation model is kept (earliest epoch on ties).
/// Starts from `model` as given (e.g. with pre-trained embeddings loaded).
/// `stop_when` is asked after every epoch and ends training early.
inline TrainResult train_from(BuilderModel model, const std::vector<Sample>& train_set, const std::vector<Sample>& valid_set,
                              const TrainConfig& tc, const std::function<void(const EpochLog&)>& on_epoch = {},
                              const StopPredicate& stop_when = {}) {
    tc.validate();
    const TaskSpec& spec = model.task;
    spec.validate();
    if (train_set.empty()) throw ConfigError("train: empty training split");
    if (valid_set.empty()) throw ConfigError("train: empty validation split");

    std::vector<ActionTypeLabel> labels;
    for (const auto& s : train_set) labels.push_back(s.label);
    const bool balance = tc.balance_classes && spec.task != TaskKind::Building;
    BatchSampler sampler(labels, tc.batch_size, balance, detail::mix_seed(tc.seed, 1));

    std::vector<std::string> result_warnings;
    std::vector<std::vector<LabeledStep>> per_sample(train_set.size());
    std::size_t total_steps = 0;
    for (std::size_t i = 0; i < train_set.size(); ++i) {
        per_sample[i] = expand_steps(train_set[i], i, spec, tc.skip_illegal_gold, &result_warnings);
        total_steps += per_sample[i].size();
    }
    if (total_steps == 0) throw ConfigError("train: no supervised steps for task " + std::string(to_string(spec.task)));

    AdamState adam;
    TrainResult result{model, model, 0, -1.0, {}, std::move(result_warnings)};
    ParamMap grads;
    for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
        EpochLog log;
        log.epoch = epoch;
        auto batches = sampler.next_epoch();
        double loss_sum = 0.0;
        for (std::size_t b = 0; b < batches.size(); ++b) {
            std::vector<LabeledStep> steps;
            for (std::size_t idx : batches[b]) {
                ++log.class_draws[static_cast<std::size_t>(train_set[idx].label)];
                steps.insert(steps.end(), per_sample[idx].begin(), per_sample[idx].end());
            }
            if (steps.empty()) continue;
            LossComponents comp;
            double loss = batch_gradients(model, train_set, steps, detail::mix_seed(tc.seed, epoch * 1000003 + b), grads, comp);
            if (!std::isfinite(loss)) {
                throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b + 1));
            }
            clip_global_norm(grads, tc.clip_norm);
            adam_step(model.params, grads, adam, tc.adam);
            const double n = static_cast<double>(steps.size());
            loss_sum += loss * n;
            log.components.location += comp.location * n;
            log.components.color += comp.color * n;
            log.components.type += comp.type * n;
            log.steps += steps.size();
        }
        if (log.steps > 0) {
            const double n = static_cast<double>(log.steps);
            log.train_loss = loss_sum / n;
            log.components.location /= n;
            log.components.color /= n;
            log.components.type /= n;
        }
        if (epoch % tc.eval_every == 0 || epoch == tc.epochs) {
            EvalOptions opt;
            opt.max_steps = tc.rollout_max_steps;
            double metric = selection_metric(evaluate_model(model, valid_set, opt), spec.task);
            log.val_metric = metric;
            if (metric > result.best_metric) {
                result.best_metric = metric;
                result.best_epoch = epoch;
                result.best = model;
            }
        }
        result.log.push_back(log);
        if (on_epoch) on_epoch(log);
        if (stop_when && stop_when(log, model)) break;
    }
    result.last = std::move(model);
    return result;
}

inline TrainResult train(const std::vector<Sample>& train_set, const std::vector<Sample>& valid_set, const TaskSpec& spec,
                         const TrainConfig& tc, const ModelConfig& mc, const Vocabulary& vocab,
                         const std::function<void(const EpochLog&)>& on_epoch = {}, const StopPredicate& stop_when = {}) {
    return train_from(BuilderModel::create(mc, spec, vocab, tc.seed), train_set, valid_set, tc, on_epoch, stop_when);
}

}  // namespace askbuild
