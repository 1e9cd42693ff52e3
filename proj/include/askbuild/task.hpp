#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "askbuild/error.hpp"
#include "askbuild/world.hpp"

namespace askbuild {

enum class TaskKind : std::uint8_t { Building = 0, Ask, Joint };

inline std::string_view to_string(TaskKind t) {
    switch (t) {
        case TaskKind::Building: return "building";
        case TaskKind::Ask: return "ask";
        case TaskKind::Joint: return "joint";
    }
    return "?";
}

inline std::optional<TaskKind> parse_task(std::string_view s) {
    if (s == "building") return TaskKind::Building;
    if (s == "ask") return TaskKind::Ask;
    if (s == "joint") return TaskKind::Joint;
    return std::nullopt;
}

/// Action-type slot values shared by all tasks; each task uses a subset.
enum class TypeClass : std::uint8_t { Placement, Removal, Stop, Execution, Ask, Others };

inline std::string_view to_string(TypeClass c) {
    switch (c) {
        case TypeClass::Placement: return "placement";
        case TypeClass::Removal: return "removal";
        case TypeClass::Stop: return "stop";
        case TypeClass::Execution: return "execution";
        case TypeClass::Ask: return "ask";
        case TypeClass::Others: return "others";
    }
    return "?";
}

inline bool is_build_class(TypeClass c) {
    return c == TypeClass::Placement || c == TypeClass::Removal || c == TypeClass::Stop;
}

inline TypeClass type_class_of(ActionKind k) {
    switch (k) {
        case ActionKind::Placement: return TypeClass::Placement;
        case ActionKind::Removal: return TypeClass::Removal;
        case ActionKind::Stop: return TypeClass::Stop;
    }
    return TypeClass::Stop;
}

/// Collapses a type-slot value onto the three-way utterance-level label.
inline ActionTypeLabel label_group(TypeClass c) {
    if (c == TypeClass::Ask) return ActionTypeLabel::Ask;
    if (c == TypeClass::Others) return ActionTypeLabel::Others;
    return ActionTypeLabel::Execution;
}

struct LossWeights {
    double location = 1.0;
    double color = 1.0;
    double type = 1.0;
};

struct TaskSpec {
    TaskKind task = TaskKind::Building;
    std::vector<TypeClass> classes;
    LossWeights weights;

    static TaskSpec building() {
        return {TaskKind::Building, {TypeClass::Placement, TypeClass::Removal, TypeClass::Stop}, {1.0, 1.0, 1.0}};
    }
    static TaskSpec ask() {
        return {TaskKind::Ask, {TypeClass::Execution, TypeClass::Ask, TypeClass::Others}, {0.0, 0.0, 1.0}};
    }
    static TaskSpec joint() {
        return {TaskKind::Joint,
                {TypeClass::Placement, TypeClass::Removal, TypeClass::Stop, TypeClass::Ask, TypeClass::Others},
                {0.1, 0.1, 0.8}};
    }
    static TaskSpec of(TaskKind k) {
        switch (k) {
            case TaskKind::Building: return building();
            case TaskKind::Ask: return ask();
            case TaskKind::Joint: return joint();
        }
        throw ConfigError("unknown task");
    }

    std::size_t num_classes() const { return classes.size(); }

    std::optional<std::size_t> index_of(TypeClass c) const {
        for (std::size_t i = 0; i < classes.size(); ++i) {
            if (classes[i] == c) return i;
        }
        return std::nullopt;
    }

    bool predicts_actions() const { return task != TaskKind::Ask; }

    void validate() const {
        if (classes.empty()) throw ConfigError("task has no action-type classes");
        if (weights.location < 0 || weights.color < 0 || weights.type < 0) throw ConfigError("loss weights must be non-negative");
    }

    nlohmann::json to_json() const {
        nlohmann::json cls = nlohmann::json::array();
        for (auto c : classes) cls.push_back(to_string(c));
        return {{"task", to_string(task)},
                {"classes", cls},
                {"loss_weights", {{"location", weights.location}, {"color", weights.color}, {"type", weights.type}}}};
    }

    static TaskSpec from_json(const nlohmann::json& j) {
        auto k = parse_task(j.at("task").get<std::string>());
        if (!k) throw DataError("unknown task " + j.at("task").dump());
        TaskSpec t = of(*k);
        if (j.contains("loss_weights")) {
            const auto& w = j["loss_weights"];
            t.weights = {w.value("location", t.weights.location), w.value("color", t.weights.color),
                         w.value("type", t.weights.type)};
        }
        t.validate();
        return t;
    }
};

}  // namespace askbuild
