#pragma once

// Templated architect instructions with programmatically correct gold
// actions, standing in for the human corpus at desk scale.

#include <array>
#include <random>
#include <string>
#include <vector>

#include "askbuild/corpus.hpp"
#include "askbuild/world.hpp"

namespace askbuild {

struct GrammarConfig {
    /// Relative frequency of execution / ask / others samples.
    std::array<double, 3> label_mix = {0.6, 0.2, 0.2};
    /// Cycle deterministically through the labels with non-zero weight
    /// instead of drawing them.
    bool round_robin_labels = false;
    std::size_t max_initial_blocks = 3;
    std::size_t max_run_length = 4;
    bool allow_removal = true;
    bool allow_rows = true;
    bool allow_towers = true;
    /// Probability of a greeting exchange before the final instruction.
    double prior_turn_prob = 0.3;
    /// Train / valid / test fractions.
    std::array<double, 3> split_fractions = {0.8, 0.1, 0.1};
};

namespace detail {

inline const std::vector<std::string>& greetings() {
    static const std::vector<std::string> g = {"hello",     "hi there",    "hello builder", "good job",
                                               "thanks !",  "nice work",   "ready ?",       "hi , how are you ?"};
    return g;
}

inline const std::vector<std::string>& builder_greetings() {
    static const std::vector<std::string> g = {"hi !", "hello", "ready when you are", "hey there"};
    return g;
}

inline std::string coord_text(Coord c) {
    return std::to_string(c.x) + " " + std::to_string(c.y) + " " + std::to_string(c.z);
}

class SynthGenerator {
public:
    SynthGenerator(std::uint64_t seed, GrammarConfig cfg) : rng_(seed), cfg_(cfg) {}

    Sample make(std::size_t index, std::uint64_t seed, ActionTypeLabel label) {
        Sample s;
        s.id = "synth-" + std::to_string(seed) + "-" + std::to_string(index);
        s.split = draw_split();
        s.world = initial_world();
        s.label = label;
        if (uniform() < cfg_.prior_turn_prob) {
            s.dialogue.push_back({Speaker::Architect, pick(greetings()), std::nullopt, s.id + "-u0"});
            s.dialogue.push_back({Speaker::Builder, pick(builder_greetings()), BuilderCategory::Greeting, s.id + "-u1"});
        }
        std::string text;
        switch (label) {
            case ActionTypeLabel::Execution: text = execution(s.world, s.gold_actions); break;
            case ActionTypeLabel::Ask: text = ask(); break;
            case ActionTypeLabel::Others: text = pick(greetings()); break;
        }
        s.dialogue.push_back({Speaker::Architect, text, std::nullopt, s.id + "-u" + std::to_string(s.dialogue.size())});
        return s;
    }

    ActionTypeLabel draw_label(std::size_t index) {
        if (cfg_.round_robin_labels) {
            std::vector<ActionTypeLabel> active;
            for (std::size_t i = 0; i < 3; ++i) {
                if (cfg_.label_mix[i] > 0.0) active.push_back(static_cast<ActionTypeLabel>(i));
            }
            if (active.empty()) throw ConfigError("label_mix has no positive weight");
            return active[index % active.size()];
        }
        std::discrete_distribution<int> d(cfg_.label_mix.begin(), cfg_.label_mix.end());
        return static_cast<ActionTypeLabel>(d(rng_));
    }

private:
    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_); }

    std::size_t below(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }

    template <typename T>
    const T& pick(const std::vector<T>& v) {
        return v[below(v.size())];
    }

    Color color() { return kAllColors[below(kNumColors)]; }

    Split draw_split() {
        std::discrete_distribution<int> d(cfg_.split_fractions.begin(), cfg_.split_fractions.end());
        return static_cast<Split>(d(rng_));
    }

    WorldState initial_world() {
        WorldState w;
        std::size_t n = below(cfg_.max_initial_blocks + 1);
        for (std::size_t i = 0; i < n; ++i) w = apply_action(w, BuildAction::place(color(), pick(feasible_placements(w))));
        return w;
    }

    std::string execution(const WorldState& w, std::vector<BuildAction>& gold) {
        std::vector<int> kinds = {0};
        if (cfg_.allow_removal && w.block_count() > 0) kinds.push_back(1);
        if (cfg_.allow_towers && cfg_.max_run_length >= 2) kinds.push_back(2);
        if (cfg_.allow_rows && cfg_.max_run_length >= 2) kinds.push_back(3);
        for (int attempt = 0; attempt < 64; ++attempt) {
            gold.clear();
            int kind = pick(kinds);
            Color c = color();
            if (kind == 0) {
                Coord p = pick(feasible_placements(w));
                gold = {BuildAction::place(c, p), BuildAction::stop()};
                return "place a " + std::string(to_string(c)) + " block at " + coord_text(p);
            }
            if (kind == 1) {
                Coord p = pick(feasible_removals(w));
                gold = {BuildAction::remove(p), BuildAction::stop()};
                return "remove the block at " + coord_text(p);
            }
            std::size_t len = 2 + below(cfg_.max_run_length - 1);
            Coord start = pick(feasible_placements(w));
            bool along_x = below(2) == 0;
            std::array<int, 3> dir = kind == 2 ? std::array<int, 3>{0, 1, 0}
                                               : (along_x ? std::array<int, 3>{1, 0, 0} : std::array<int, 3>{0, 0, 1});
            WorldState sim = w;
            bool ok = true;
            for (std::size_t k = 0; k < len && ok; ++k) {
                Coord p{start.x + dir[0] * static_cast<int>(k), start.y + dir[1] * static_cast<int>(k),
                        start.z + dir[2] * static_cast<int>(k)};
                BuildAction a = BuildAction::place(c, p);
                if (!is_legal(sim, a)) {
                    ok = false;
                    break;
                }
                sim = apply_action(sim, a);
                gold.push_back(a);
            }
            if (!ok) continue;
            gold.push_back(BuildAction::stop());
            std::string n = std::to_string(len), col(to_string(c));
            if (kind == 2) return "build a tower of " + n + " " + col + " blocks at " + coord_text(start);
            return "build a row of " + n + " " + col + " blocks from " + coord_text(start) + " along " +
                   (along_x ? "x" : "z");
        }
        Coord p = pick(feasible_placements(w));
        Color c = color();
        gold = {BuildAction::place(c, p), BuildAction::stop()};
        return "place a " + std::string(to_string(c)) + " block at " + coord_text(p);
    }

    std::string ask() {
        Coord p{static_cast<int>(below(kSizeX)), 0, static_cast<int>(below(kSizeZ))};
        std::string col(to_string(color()));
        switch (below(3)) {
            case 0: return "place a block at " + coord_text(p);
            case 1: return "place a " + col + " block";
            default: return "build a tower of " + std::to_string(2 + below(3)) + " blocks";
        }
    }

    std::mt19937_64 rng_;
    GrammarConfig cfg_;
};

}  // namespace detail

/// Deterministic under `seed`.
inline std::vector<Sample> synth_generate(std::size_t n, std::uint64_t seed, const GrammarConfig& cfg = {}) {
    if (n == 0) throw ConfigError("synth_generate needs n > 0");
    detail::SynthGenerator gen(seed, cfg);
    std::vector<Sample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(gen.make(i, seed, gen.draw_label(i)));
    return out;
}

}  // namespace askbuild
