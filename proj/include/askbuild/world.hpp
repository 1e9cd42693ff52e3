#pragma once

#include <algorithm>
#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "askbuild/autograd.hpp"
#include "askbuild/error.hpp"
#include "askbuild/tensor.hpp"

namespace askbuild {

enum class Color : std::uint8_t { Red = 0, Orange, Yellow, Green, Blue, Purple };

inline constexpr std::size_t kNumColors = 6;
inline constexpr std::array<std::string_view, kNumColors> kColorNames = {"red",  "orange", "yellow",
                                                                         "green", "blue", "purple"};
inline constexpr std::array<Color, kNumColors> kAllColors = {Color::Red,   Color::Orange, Color::Yellow,
                                                             Color::Green, Color::Blue,   Color::Purple};

inline std::string_view to_string(Color c) { return kColorNames[static_cast<std::size_t>(c)]; }

inline std::optional<Color> parse_color(std::string_view name) {
    for (std::size_t i = 0; i < kNumColors; ++i) {
        if (kColorNames[i] == name) return static_cast<Color>(i);
    }
    return std::nullopt;
}

inline constexpr int kSizeX = 11;
inline constexpr int kSizeY = 9;  // vertical, y = 0 is the ground layer
inline constexpr int kSizeZ = 11;
inline constexpr std::size_t kNumCells = kSizeX * kSizeY * kSizeZ;  // 1089

/// Per-color block budget. Exceeding it is reported, never refused.
inline constexpr std::size_t kInventoryPerColor = 120;

struct Coord {
    int x = 0;
    int y = 0;
    int z = 0;

    bool in_region() const { return x >= 0 && x < kSizeX && y >= 0 && y < kSizeY && z >= 0 && z < kSizeZ; }

    /// x·99 + y·11 + z, matching the row-major layout of an [11×9×11] grid.
    std::size_t index() const {
        return static_cast<std::size_t>(x) * (kSizeY * kSizeZ) + static_cast<std::size_t>(y) * kSizeZ +
               static_cast<std::size_t>(z);
    }

    static Coord from_index(std::size_t i) {
        return Coord{static_cast<int>(i / (kSizeY * kSizeZ)), static_cast<int>((i / kSizeZ) % kSizeY),
                     static_cast<int>(i % kSizeZ)};
    }

    std::string str() const {
        return "(" + std::to_string(x) + "," + std::to_string(y) + "," + std::to_string(z) + ")";
    }

    friend auto operator<=>(const Coord&, const Coord&) = default;
};

/// Maps the corpus's centered frame (x, z ∈ [−5, 5], y ∈ [1, 9]) to internal indices.
inline Coord from_centered(int cx, int cy, int cz) { return Coord{cx + 5, cy - 1, cz + 5}; }

enum class ActionKind : std::uint8_t { Placement = 0, Removal, Stop };

inline std::string_view to_string(ActionKind k) {
    switch (k) {
        case ActionKind::Placement: return "placement";
        case ActionKind::Removal: return "removal";
        case ActionKind::Stop: return "stop";
    }
    return "?";
}

inline std::optional<ActionKind> parse_action_kind(std::string_view s) {
    if (s == "placement") return ActionKind::Placement;
    if (s == "removal") return ActionKind::Removal;
    if (s == "stop") return ActionKind::Stop;
    return std::nullopt;
}

struct BuildAction {
    ActionKind kind = ActionKind::Stop;
    std::optional<Coord> location;
    std::optional<Color> color;

    static BuildAction place(Color c, Coord at) { return {ActionKind::Placement, at, c}; }
    static BuildAction remove(Coord at) { return {ActionKind::Removal, at, std::nullopt}; }
    static BuildAction stop() { return {}; }

    /// Payload presence must match the kind.
    void validate() const {
        switch (kind) {
            case ActionKind::Placement:
                if (!location || !color) throw LegalityError("placement needs both a location and a color");
                break;
            case ActionKind::Removal:
                if (!location || color) throw LegalityError("removal needs a location and no color");
                break;
            case ActionKind::Stop:
                if (location || color) throw LegalityError("stop carries no payload");
                break;
        }
        if (location && !location->in_region()) {
            throw LegalityError("location " + location->str() + " lies outside the 11x9x11 build region");
        }
    }

    std::string str() const {
        std::string s(to_string(kind));
        if (color) s += " " + std::string(to_string(*color));
        if (location) s += " " + location->str();
        return s;
    }

    friend bool operator==(const BuildAction&, const BuildAction&) = default;
};

enum class ActionTypeLabel : std::uint8_t { Execution = 0, Ask, Others };

inline constexpr std::array<std::string_view, 3> kLabelNames = {"execution", "ask", "others"};

inline std::string_view to_string(ActionTypeLabel l) { return kLabelNames[static_cast<std::size_t>(l)]; }

inline std::optional<ActionTypeLabel> parse_label(std::string_view s) {
    for (std::size_t i = 0; i < kLabelNames.size(); ++i) {
        if (kLabelNames[i] == s) return static_cast<ActionTypeLabel>(i);
    }
    return std::nullopt;
}

/// The build region plus the most recent build actions. An immutable value:
/// the only way to a different world is apply_action.
class WorldState {
public:
    static constexpr std::size_t kHistoryLimit = 5;

    WorldState() { cells_.fill(kEmpty); }

    /// Validates region bounds and duplicate cells.
    static WorldState from_blocks(std::span<const std::pair<Coord, Color>> blocks,
                                  std::vector<BuildAction> history = {}) {
        WorldState w;
        for (const auto& [c, color] : blocks) {
            if (!c.in_region()) throw LegalityError("block " + c.str() + " lies outside the build region");
            if (w.cells_[c.index()] != kEmpty) throw LegalityError("two blocks share cell " + c.str());
            w.cells_[c.index()] = static_cast<std::int8_t>(color);
        }
        return w.with_history(std::move(history));
    }

    WorldState with_history(std::vector<BuildAction> history) const {
        WorldState w = *this;
        for (const auto& a : history) {
            a.validate();
            if (a.kind == ActionKind::Stop) throw LegalityError("action history cannot contain stop");
        }
        if (history.size() > kHistoryLimit) {
            history.erase(history.begin(), history.end() - static_cast<std::ptrdiff_t>(kHistoryLimit));
        }
        w.history_ = std::move(history);
        return w;
    }

    std::optional<Color> at(Coord c) const {
        if (!c.in_region()) return std::nullopt;
        auto v = cells_[c.index()];
        if (v == kEmpty) return std::nullopt;
        return static_cast<Color>(v);
    }
    bool occupied(Coord c) const { return at(c).has_value(); }
    bool occupied_index(std::size_t i) const { return cells_[i] != kEmpty; }

    std::size_t block_count() const {
        return static_cast<std::size_t>(std::count_if(cells_.begin(), cells_.end(), [](auto v) { return v != kEmpty; }));
    }

    /// Occupied cells in flat-index order.
    std::vector<std::pair<Coord, Color>> blocks() const {
        std::vector<std::pair<Coord, Color>> out;
        for (std::size_t i = 0; i < kNumCells; ++i) {
            if (cells_[i] != kEmpty) out.emplace_back(Coord::from_index(i), static_cast<Color>(cells_[i]));
        }
        return out;
    }

    std::array<std::size_t, kNumColors> color_counts() const {
        std::array<std::size_t, kNumColors> counts{};
        for (auto v : cells_) {
            if (v != kEmpty) ++counts[static_cast<std::size_t>(v)];
        }
        return counts;
    }

    const std::vector<BuildAction>& history() const { return history_; }

    bool same_cells(const WorldState& other) const { return cells_ == other.cells_; }

    friend bool operator==(const WorldState&, const WorldState&) = default;

private:
    static constexpr std::int8_t kEmpty = -1;

    friend WorldState apply_action(const WorldState& w, const BuildAction& a);

    std::array<std::int8_t, kNumCells> cells_{};
    std::vector<BuildAction> history_;
};

/// Ground contact or at least one occupied face neighbor.
inline bool has_support(const WorldState& w, Coord c) {
    if (c.y == 0) return true;
    static constexpr std::array<std::array<int, 3>, 6> kFaces = {
        {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};
    for (const auto& d : kFaces) {
        if (w.occupied(Coord{c.x + d[0], c.y + d[1], c.z + d[2]})) return true;
    }
    return false;
}

/// Why `a` is illegal in `w`, or nullopt if it is legal.
inline std::optional<std::string> legality_violation(const WorldState& w, const BuildAction& a) {
    try {
        a.validate();
    } catch (const LegalityError& e) {
        return e.what();
    }
    switch (a.kind) {
        case ActionKind::Stop: return std::nullopt;
        case ActionKind::Placement:
            if (w.occupied(*a.location)) return "placement on occupied cell " + a.location->str();
            if (!has_support(w, *a.location)) {
                return "no support: " + a.location->str() + " touches neither the ground nor another block";
            }
            return std::nullopt;
        case ActionKind::Removal:
            if (!w.occupied(*a.location)) return "removal of empty cell " + a.location->str();
            return std::nullopt;
    }
    return "unknown action kind";
}

inline bool is_legal(const WorldState& w, const BuildAction& a) { return !legality_violation(w, a).has_value(); }

/// The transition function. Throws LegalityError naming the violated rule.
inline WorldState apply_action(const WorldState& w, const BuildAction& a) {
    if (auto why = legality_violation(w, a)) throw LegalityError(*why);
    if (a.kind == ActionKind::Stop) return w;
    WorldState next = w;
    next.cells_[a.location->index()] =
        a.kind == ActionKind::Placement ? static_cast<std::int8_t>(*a.color) : WorldState::kEmpty;
    next.history_.push_back(a);
    if (next.history_.size() > WorldState::kHistoryLimit) next.history_.erase(next.history_.begin());
    return next;
}

inline WorldState apply_sequence(WorldState w, std::span<const BuildAction> actions) {
    for (const auto& a : actions) w = apply_action(w, a);
    return w;
}

/// Empty cells a block may be placed in, flat-index order.
inline std::vector<Coord> feasible_placements(const WorldState& w) {
    std::vector<Coord> out;
    for (std::size_t i = 0; i < kNumCells; ++i) {
        if (w.occupied_index(i)) continue;
        Coord c = Coord::from_index(i);
        if (has_support(w, c)) out.push_back(c);
    }
    return out;
}

/// Every occupied cell; removals may leave floating blocks.
inline std::vector<Coord> feasible_removals(const WorldState& w) {
    std::vector<Coord> out;
    for (std::size_t i = 0; i < kNumCells; ++i) {
        if (w.occupied_index(i)) out.push_back(Coord::from_index(i));
    }
    return out;
}

/// One flag per cell: 1 if the next build action may target it.
inline KeepMask feasibility_mask(const WorldState& w) {
    KeepMask mask(kNumCells, 0);
    for (auto c : feasible_placements(w)) mask[c.index()] = 1;
    for (auto c : feasible_removals(w)) mask[c.index()] = 1;
    return mask;
}

/// Colors whose placed count exceeds the per-color budget.
inline std::vector<Color> inventory_overdrawn(const WorldState& w) {
    std::vector<Color> out;
    auto counts = w.color_counts();
    for (std::size_t i = 0; i < kNumColors; ++i) {
        if (counts[i] > kInventoryPerColor) out.push_back(static_cast<Color>(i));
    }
    return out;
}

inline constexpr std::size_t kWorldChannels = 8;
inline constexpr std::size_t kLastActionDims = 11;

/// [8×11×9×11]: channels 0–6 one-hot (0 = empty, 1–6 = colors); channel 7
/// holds recency weights 1..5 (newest = 5) at the cells of the retained
/// history, newest winning on collisions.
inline Tensor encode_world(const WorldState& w) {
    Tensor t({kWorldChannels, kSizeX, kSizeY, kSizeZ});
    for (std::size_t i = 0; i < kNumCells; ++i) {
        auto c = w.at(Coord::from_index(i));
        std::size_t channel = c ? 1 + static_cast<std::size_t>(*c) : 0;
        t[channel * kNumCells + i] = 1.0;
    }
    const auto& h = w.history();
    std::size_t offset = WorldState::kHistoryLimit - h.size();
    for (std::size_t k = 0; k < h.size(); ++k) {
        t[7 * kNumCells + h[k].location->index()] = static_cast<double>(offset + k + 1);
    }
    return t;
}

/// [11]: placement/removal one-hot, color one-hot, then x/10, y/8, z/10.
/// All zeros without history.
inline Tensor encode_last_action(const WorldState& w) {
    Tensor t({kLastActionDims});
    if (w.history().empty()) return t;
    const BuildAction& a = w.history().back();
    t[a.kind == ActionKind::Placement ? 0 : 1] = 1.0;
    if (a.color) t[2 + static_cast<std::size_t>(*a.color)] = 1.0;
    t[8] = a.location->x / static_cast<double>(kSizeX - 1);
    t[9] = a.location->y / static_cast<double>(kSizeY - 1);
    t[10] = a.location->z / static_cast<double>(kSizeZ - 1);
    return t;
}

struct CellChange {
    enum class Kind : std::uint8_t { Removed = 0, Added };

    Coord cell;
    Kind kind = Kind::Added;
    std::optional<Color> color;  // set for additions

    friend auto operator<=>(const CellChange&, const CellChange&) = default;
};

/// Minimal per-cell difference from `before` to `after`. A recolored cell
/// yields a removal and an addition.
inline std::vector<CellChange> net_diff(const WorldState& before, const WorldState& after) {
    std::vector<CellChange> out;
    for (std::size_t i = 0; i < kNumCells; ++i) {
        Coord c = Coord::from_index(i);
        auto a = before.at(c);
        auto b = after.at(c);
        if (a == b) continue;
        if (a) out.push_back({c, CellChange::Kind::Removed, std::nullopt});
        if (b) out.push_back({c, CellChange::Kind::Added, b});
    }
    return out;
}

// JSON forms shared by the corpus, the evaluation logs and the play service.

inline nlohmann::json action_to_json(const BuildAction& a) {
    nlohmann::json j = {{"kind", to_string(a.kind)}};
    if (a.location) {
        j["x"] = a.location->x;
        j["y"] = a.location->y;
        j["z"] = a.location->z;
    }
    if (a.color) j["color"] = to_string(*a.color);
    return j;
}

inline BuildAction action_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw DataError("action must be an object");
    if (!j.contains("kind") || !j["kind"].is_string()) throw DataError("action.kind missing");
    auto kind = parse_action_kind(j["kind"].get<std::string>());
    if (!kind) throw DataError("action.kind: unknown value " + j["kind"].dump());
    BuildAction a;
    a.kind = *kind;
    bool has_any = j.contains("x") || j.contains("y") || j.contains("z");
    if (has_any) {
        for (const char* f : {"x", "y", "z"}) {
            if (!j.contains(f) || !j[f].is_number_integer()) throw DataError(std::string("action.") + f + " missing or not an integer");
        }
        a.location = Coord{j["x"].get<int>(), j["y"].get<int>(), j["z"].get<int>()};
    }
    if (j.contains("color")) {
        if (!j["color"].is_string()) throw DataError("action.color must be a string");
        auto c = parse_color(j["color"].get<std::string>());
        if (!c) throw DataError("action.color: unknown color " + j["color"].dump());
        a.color = c;
    }
    try {
        a.validate();
    } catch (const LegalityError& e) {
        throw DataError(std::string("action: ") + e.what());
    }
    return a;
}

inline nlohmann::json blocks_to_json(const WorldState& w) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [c, color] : w.blocks()) {
        arr.push_back({{"x", c.x}, {"y", c.y}, {"z", c.z}, {"color", to_string(color)}});
    }
    return arr;
}

inline nlohmann::json world_to_json(const WorldState& w) { return {{"blocks", blocks_to_json(w)}}; }

inline std::vector<std::pair<Coord, Color>> blocks_from_json(const nlohmann::json& arr) {
    if (!arr.is_array()) throw DataError("blocks must be an array");
    std::vector<std::pair<Coord, Color>> out;
    for (const auto& b : arr) {
        if (!b.is_object()) throw DataError("block must be an object");
        for (const char* f : {"x", "y", "z"}) {
            if (!b.contains(f) || !b[f].is_number_integer()) throw DataError(std::string("block.") + f + " missing or not an integer");
        }
        if (!b.contains("color") || !b["color"].is_string()) throw DataError("block.color missing");
        auto color = parse_color(b["color"].get<std::string>());
        if (!color) throw DataError("block.color: unknown color " + b["color"].dump());
        Coord c{b["x"].get<int>(), b["y"].get<int>(), b["z"].get<int>()};
        if (!c.in_region()) throw DataError("block " + c.str() + " lies outside the build region");
        out.emplace_back(c, *color);
    }
    return out;
}

inline WorldState world_from_json(const nlohmann::json& j, std::vector<BuildAction> history = {}) {
    if (!j.is_object() || !j.contains("blocks")) throw DataError("world must be an object with a blocks array");
    auto blocks = blocks_from_json(j["blocks"]);
    try {
        return WorldState::from_blocks(blocks, std::move(history));
    } catch (const LegalityError& e) {
        throw DataError(std::string("world: ") + e.what());
    }
}

}  // namespace askbuild
