#pragma once

#include <array>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "askbuild/error.hpp"
#include "askbuild/world.hpp"

namespace askbuild {

/// Micro-averaged precision / recall / F1 over net cell changes. Zero
/// denominators give 0.
struct F1Report {
    std::size_t matched = 0;
    std::size_t predicted = 0;
    std::size_t gold = 0;
    std::size_t illegal_skipped = 0;

    double precision() const { return predicted == 0 ? 0.0 : static_cast<double>(matched) / static_cast<double>(predicted); }
    double recall() const { return gold == 0 ? 0.0 : static_cast<double>(matched) / static_cast<double>(gold); }
    double f1() const {
        double p = precision(), r = recall();
        return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
    }

    F1Report& operator+=(const F1Report& o) {
        matched += o.matched;
        predicted += o.predicted;
        gold += o.gold;
        illegal_skipped += o.illegal_skipped;
        return *this;
    }

    nlohmann::json to_json() const {
        return {{"precision", precision()}, {"recall", recall()},   {"f1", f1()},
                {"matched", matched},       {"predicted", predicted}, {"gold", gold},
                {"illegal_skipped", illegal_skipped}, {"averaging", "micro"}};
    }
};

/// Replays `actions` from `w`, skipping illegal steps and stopping at the
/// first stop. Returns the final world and the number of skipped steps.
inline std::pair<WorldState, std::size_t> replay_skipping_illegal(WorldState w, const std::vector<BuildAction>& actions) {
    std::size_t skipped = 0;
    for (const auto& a : actions) {
        if (a.kind == ActionKind::Stop) break;
        if (!is_legal(w, a)) {
            ++skipped;
            continue;
        }
        w = apply_action(w, a);
    }
    return {w, skipped};
}

/// Precision, recall and F1 of the predicted net change against the gold one.
inline F1Report net_change_f1(const std::vector<BuildAction>& gold_actions, const std::vector<BuildAction>& predicted_actions,
                              const WorldState& initial) {
    // noisy human gold sequences are replayed with the same skipping rule
    auto gold_world = replay_skipping_illegal(initial, gold_actions).first;
    auto [pred_world, skipped] = replay_skipping_illegal(initial, predicted_actions);
    auto gold = net_diff(initial, gold_world);
    auto pred = net_diff(initial, pred_world);
    F1Report r;
    r.gold = gold.size();
    r.predicted = pred.size();
    r.illegal_skipped = skipped;
    // both lists are in cell order, removals before additions
    std::size_t i = 0, j = 0;
    while (i < gold.size() && j < pred.size()) {
        if (gold[i] == pred[j]) {
            ++r.matched;
            ++i;
            ++j;
        } else if (gold[i] < pred[j]) {
            ++i;
        } else {
            ++j;
        }
    }
    return r;
}

/// Gold × predicted counts over {execution, ask, others}.
struct ConfusionMatrix {
    std::array<std::array<std::size_t, 3>, 3> counts{};

    void add(ActionTypeLabel gold, ActionTypeLabel predicted) {
        ++counts[static_cast<std::size_t>(gold)][static_cast<std::size_t>(predicted)];
    }

    std::size_t row_sum(ActionTypeLabel gold) const {
        const auto& row = counts[static_cast<std::size_t>(gold)];
        return row[0] + row[1] + row[2];
    }

    std::size_t total() const { return row_sum(ActionTypeLabel::Execution) + row_sum(ActionTypeLabel::Ask) + row_sum(ActionTypeLabel::Others); }

    std::size_t correct() const { return counts[0][0] + counts[1][1] + counts[2][2]; }

    double accuracy() const { return total() == 0 ? 0.0 : static_cast<double>(correct()) / static_cast<double>(total()); }

    /// Fraction of gold class `gold` predicted as `predicted`.
    double rate(ActionTypeLabel gold, ActionTypeLabel predicted) const {
        std::size_t n = row_sum(gold);
        return n == 0 ? 0.0
                      : static_cast<double>(counts[static_cast<std::size_t>(gold)][static_cast<std::size_t>(predicted)]) /
                            static_cast<double>(n);
    }

    double class_accuracy(ActionTypeLabel c) const { return rate(c, c); }

    nlohmann::json to_json() const {
        nlohmann::json rows = nlohmann::json::object();
        for (std::size_t g = 0; g < 3; ++g) {
            auto gl = static_cast<ActionTypeLabel>(g);
            nlohmann::json row = nlohmann::json::object();
            for (std::size_t p = 0; p < 3; ++p) row[std::string(kLabelNames[p])] = counts[g][p];
            rows[std::string(kLabelNames[g])] = {{"counts", row}, {"size", row_sum(gl)}, {"accuracy", class_accuracy(gl)}};
        }
        return {{"matrix", rows}, {"overall_accuracy", accuracy()}, {"total", total()}};
    }
};

inline ConfusionMatrix ask_metrics(const std::vector<ActionTypeLabel>& gold, const std::vector<ActionTypeLabel>& predicted) {
    if (gold.size() != predicted.size()) {
        throw DimensionError("ask_metrics: " + std::to_string(gold.size()) + " gold labels but " +
                             std::to_string(predicted.size()) + " predictions");
    }
    ConfusionMatrix m;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        for (auto l : {gold[i], predicted[i]}) {
            if (static_cast<std::size_t>(l) >= 3) throw DataError("ask_metrics: label outside {execution, ask, others}");
        }
        m.add(gold[i], predicted[i]);
    }
    return m;
}

/// String-label form; rejects names outside the class set.
inline ConfusionMatrix ask_metrics(const std::vector<std::string>& gold, const std::vector<std::string>& predicted) {
    auto convert = [](const std::vector<std::string>& names) {
        std::vector<ActionTypeLabel> out;
        for (const auto& n : names) {
            auto l = parse_label(n);
            if (!l) throw DataError("ask_metrics: unknown label '" + n + "'");
            out.push_back(*l);
        }
        return out;
    };
    return ask_metrics(convert(gold), convert(predicted));
}

/// One evaluated sample, as written to the prediction log.
struct PredictionRecord {
    std::string sample_id;
    ActionTypeLabel gold_label = ActionTypeLabel::Execution;
    /// Type-slot class name chosen at the first step (e.g. "placement", "ask").
    std::string predicted_type;
    ActionTypeLabel predicted_label = ActionTypeLabel::Execution;
    WorldState initial_world;
    std::vector<BuildAction> gold_actions;
    std::vector<BuildAction> actions;  // rollout output, empty unless executed

    nlohmann::json to_json() const {
        nlohmann::json g = nlohmann::json::array(), p = nlohmann::json::array(), hist = nlohmann::json::array();
        for (const auto& a : gold_actions) g.push_back(action_to_json(a));
        for (const auto& a : actions) p.push_back(action_to_json(a));
        for (const auto& a : initial_world.history()) hist.push_back(action_to_json(a));
        return {{"sample_id", sample_id},
                {"gold_label", to_string(gold_label)},
                {"predicted_type", predicted_type},
                {"predicted_label", to_string(predicted_label)},
                {"initial_world", {{"blocks", blocks_to_json(initial_world)}, {"action_history", hist}}},
                {"gold_actions", g},
                {"actions", p}};
    }

    static PredictionRecord from_json(const nlohmann::json& j) {
        PredictionRecord r;
        try {
            r.sample_id = j.at("sample_id").get<std::string>();
            auto gl = parse_label(j.at("gold_label").get<std::string>());
            auto pl = parse_label(j.at("predicted_label").get<std::string>());
            if (!gl || !pl) throw DataError("prediction log: unknown label in record " + r.sample_id);
            r.gold_label = *gl;
            r.predicted_label = *pl;
            r.predicted_type = j.at("predicted_type").get<std::string>();
            std::vector<BuildAction> hist;
            const auto& iw = j.at("initial_world");
            if (iw.contains("action_history")) {
                for (const auto& a : iw["action_history"]) hist.push_back(action_from_json(a));
            }
            r.initial_world = world_from_json(iw, hist);
            for (const auto& a : j.at("gold_actions")) r.gold_actions.push_back(action_from_json(a));
            for (const auto& a : j.at("actions")) r.actions.push_back(action_from_json(a));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(std::string("prediction log: ") + e.what());
        }
        return r;
    }
};

/// Aggregate report. Which parts are meaningful depends on the task.
struct EvalReport {
    std::string task;
    std::size_t samples = 0;
    std::optional<F1Report> building;         // over gold-execution samples
    std::optional<ConfusionMatrix> confusion;  // ask and joint tasks
    std::optional<double> step_accuracy;       // teacher-forced, when computed

    nlohmann::json to_json() const {
        nlohmann::json j = {{"task", task}, {"samples", samples}};
        if (building) j["building"] = building->to_json();
        if (confusion) j["action_type"] = confusion->to_json();
        if (step_accuracy) j["step_accuracy"] = *step_accuracy;
        return j;
    }
};

/// Recomputes the report from logged predictions alone.
inline EvalReport score_records(const std::vector<PredictionRecord>& records, const std::string& task) {
    EvalReport rep;
    rep.task = task;
    rep.samples = records.size();
    const bool building = task != "ask";
    const bool typed = task != "building";
    if (building) rep.building = F1Report{};
    if (typed) rep.confusion = ConfusionMatrix{};
    for (const auto& r : records) {
        if (typed) rep.confusion->add(r.gold_label, r.predicted_label);
        if (building && r.gold_label == ActionTypeLabel::Execution) {
            *rep.building += net_change_f1(r.gold_actions, r.actions, r.initial_world);
        }
    }
    return rep;
}

inline std::vector<PredictionRecord> read_prediction_log(std::istream& in) {
    std::vector<PredictionRecord> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(PredictionRecord::from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError("prediction log line " + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

namespace detail {

inline std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v * 100.0);
    return buf;
}

inline std::string pad(const std::string& s, std::size_t w, bool right = true) {
    if (s.size() >= w) return s;
    return right ? std::string(w - s.size(), ' ') + s : s + std::string(w - s.size(), ' ');
}

}  // namespace detail

/// F1 / Recall / Precision block.
inline std::string format_f1_table(const F1Report& r, const std::string& row_name = "model") {
    using detail::pad;
    std::ostringstream o;
    o << pad("", 12, false) << pad("F1", 10) << pad("Recall", 10) << pad("Precision", 11) << "\n";
    o << pad(row_name, 12, false) << pad(detail::pct(r.f1()), 10) << pad(detail::pct(r.recall()), 10)
      << pad(detail::pct(r.precision()), 11) << "\n";
    o << "(micro-averaged over " << r.gold << " gold / " << r.predicted << " predicted net changes, " << r.matched
      << " matched)\n";
    return o.str();
}

/// Row-normalized confusion table with class sizes and overall accuracy.
inline std::string format_confusion_table(const ConfusionMatrix& m) {
    using detail::pad;
    static const std::array<std::string, 3> rows = {"Execution", "Ask", "Others"};
    std::ostringstream o;
    o << pad("Accuracy(%)", 12, false) << pad("Execute", 10) << pad("Ask", 10) << pad("Others", 10) << pad("Size", 8)
      << "\n";
    for (std::size_t g = 0; g < 3; ++g) {
        auto gl = static_cast<ActionTypeLabel>(g);
        o << pad(rows[g], 12, false);
        for (std::size_t p = 0; p < 3; ++p) o << pad(detail::pct(m.rate(gl, static_cast<ActionTypeLabel>(p))), 10);
        o << pad(std::to_string(m.row_sum(gl)), 8) << "\n";
    }
    o << pad("Overall", 12, false) << pad(detail::pct(m.accuracy()), 30) << pad(std::to_string(m.total()), 8) << "\n";
    return o.str();
}

inline std::string format_report(const EvalReport& r) {
    std::ostringstream o;
    o << "task: " << r.task << "  samples: " << r.samples << "\n";
    if (r.confusion) o << "\n" << format_confusion_table(*r.confusion);
    if (r.building) o << "\n" << format_f1_table(*r.building);
    if (r.step_accuracy) o << "\nstep-level action accuracy: " << detail::pct(*r.step_accuracy) << "%\n";
    return o.str();
}

}  // namespace askbuild
