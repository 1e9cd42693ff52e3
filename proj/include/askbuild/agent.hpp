#pragma once

// Turning slot distributions into actions: type first, then a location
// restricted to the type's feasible cells, then a color.

#include <algorithm>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "askbuild/corpus.hpp"
#include "askbuild/model.hpp"
#include "askbuild/task.hpp"
#include "askbuild/world.hpp"

namespace askbuild {

inline constexpr std::size_t kDefaultMaxSteps = 40;

/// Anything that maps (dialogue, world) to slot distributions.
struct Predictor {
    TaskSpec task;
    std::function<SlotPrediction(const Dialogue&, const WorldState&)> predict;
};

/// Shares the model's parameters read-only; the model must outlive it.
inline Predictor predictor_for(const BuilderModel& model) {
    return {model.task, [&model](const Dialogue& d, const WorldState& w) { return model.predict(d, w); }};
}

struct DecodedStep {
    TypeClass type = TypeClass::Stop;
    double type_prob = 0.0;
    std::optional<BuildAction> action;  // set for build classes
    /// Classes passed over because their feasible set was empty.
    std::vector<TypeClass> fallbacks;
};

namespace detail {

/// Index of the largest value among `candidates`; lowest index wins ties.
inline std::size_t argmax_over(const Tensor& probs, const std::vector<Coord>& candidates) {
    std::size_t best = candidates.front().index();
    for (const auto& c : candidates) {
        std::size_t i = c.index();
        if (probs[i] > probs[best] || (probs[i] == probs[best] && i < best)) best = i;
    }
    return best;
}

inline std::size_t argmax(const Tensor& probs) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < probs.size(); ++i) {
        if (probs[i] > probs[best]) best = i;
    }
    return best;
}

inline void check_prediction(const SlotPrediction& p, const TaskSpec& task) {
    if (p.location_probs.size() != kNumCells || p.color_probs.size() != kNumColors ||
        p.type_probs.size() != task.num_classes()) {
        throw DimensionError("decode_action: prediction sizes " + std::to_string(p.location_probs.size()) + "/" +
                             std::to_string(p.color_probs.size()) + "/" + std::to_string(p.type_probs.size()) +
                             " do not match 1089/6/" + std::to_string(task.num_classes()));
    }
}

}  // namespace detail

/// Picks the most probable type whose feasible set is non-empty. With
/// `build_only`, non-build classes (ask, others, execution) are never chosen.
inline DecodedStep decode_action(const SlotPrediction& pred, const WorldState& w, const TaskSpec& task,
                                 bool build_only = false) {
    detail::check_prediction(pred, task);
    std::vector<std::size_t> order(task.num_classes());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return pred.type_probs[a] > pred.type_probs[b]; });
    DecodedStep out;
    for (std::size_t idx : order) {
        TypeClass c = task.classes[idx];
        if (build_only && !is_build_class(c)) continue;
        out.type = c;
        out.type_prob = pred.type_probs[idx];
        switch (c) {
            case TypeClass::Placement: {
                auto cells = feasible_placements(w);
                if (cells.empty()) break;
                Coord at = Coord::from_index(detail::argmax_over(pred.location_probs, cells));
                out.action = BuildAction::place(kAllColors[detail::argmax(pred.color_probs)], at);
                return out;
            }
            case TypeClass::Removal: {
                auto cells = feasible_removals(w);
                if (cells.empty()) break;
                out.action = BuildAction::remove(Coord::from_index(detail::argmax_over(pred.location_probs, cells)));
                return out;
            }
            case TypeClass::Stop: out.action = BuildAction::stop(); return out;
            default: return out;
        }
        out.fallbacks.push_back(c);
    }
    // Only reachable with build_only on a task that has no usable build class.
    out.type = TypeClass::Stop;
    out.type_prob = 0.0;
    out.action = BuildAction::stop();
    return out;
}

struct Rollout {
    std::vector<BuildAction> actions;  // always ends with stop
    WorldState final_world;
    std::size_t fallbacks = 0;
};

/// Greedy decoding through the transition function until stop or
/// `max_steps` build actions (then a stop is appended).
inline Rollout rollout(const Predictor& p, const WorldState& w0, const Dialogue& dialogue,
                       std::size_t max_steps = kDefaultMaxSteps,
                       const std::function<void(const BuildAction&, const WorldState&)>& on_action = {}) {
    if (max_steps < 1) throw ConfigError("rollout: max_steps must be at least 1");
    Rollout r{{}, w0, 0};
    for (std::size_t step = 0; step < max_steps; ++step) {
        DecodedStep d = decode_action(p.predict(dialogue, r.final_world), r.final_world, p.task, true);
        r.fallbacks += d.fallbacks.size();
        const BuildAction& a = *d.action;
        if (a.kind == ActionKind::Stop) break;
        r.final_world = apply_action(r.final_world, a);
        r.actions.push_back(a);
        if (on_action) on_action(a, r.final_world);
    }
    r.actions.push_back(BuildAction::stop());
    return r;
}

struct AgentDecision {
    enum class Kind : std::uint8_t { Execute, Ask, Others };
    Kind kind = Kind::Execute;
    double confidence = 0.0;
    TypeClass type = TypeClass::Stop;  // the type-slot class behind the decision
    std::vector<BuildAction> actions;  // stop-terminated; [stop] unless executing
};

inline std::string_view to_string(AgentDecision::Kind k) {
    switch (k) {
        case AgentDecision::Kind::Execute: return "execute";
        case AgentDecision::Kind::Ask: return "ask";
        case AgentDecision::Kind::Others: return "others";
    }
    return "?";
}

struct AgentState {
    Dialogue dialogue;
    WorldState world;
};

/// One decision per incoming architect utterance. Execution rolls out and
/// updates the state's world; ask/others leave the world alone.
inline AgentDecision turn(const Predictor& p, AgentState& state, const std::string& utterance,
                          std::size_t max_steps = kDefaultMaxSteps,
                          const std::function<void(const BuildAction&, const WorldState&)>& on_action = {}) {
    state.dialogue.push_back({Speaker::Architect, utterance, std::nullopt, std::nullopt});
    SlotPrediction pred = p.predict(state.dialogue, state.world);
    DecodedStep first = decode_action(pred, state.world, p.task);
    AgentDecision d;
    d.type = first.type;
    d.confidence = first.type_prob;
    ActionTypeLabel group = label_group(first.type);
    if (group == ActionTypeLabel::Ask || group == ActionTypeLabel::Others) {
        d.kind = group == ActionTypeLabel::Ask ? AgentDecision::Kind::Ask : AgentDecision::Kind::Others;
        d.actions = {BuildAction::stop()};
        return d;
    }
    d.kind = AgentDecision::Kind::Execute;
    if (!p.task.predicts_actions()) {
        d.actions = {BuildAction::stop()};
        return d;
    }
    Rollout r = rollout(p, state.world, state.dialogue, max_steps, on_action);
    state.world = r.final_world;
    d.actions = std::move(r.actions);
    return d;
}

}  // namespace askbuild
