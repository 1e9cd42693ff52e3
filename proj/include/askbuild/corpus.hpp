#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "askbuild/error.hpp"
#include "askbuild/world.hpp"

namespace askbuild {

enum class Speaker : std::uint8_t { Architect = 0, Builder };

inline std::string_view to_string(Speaker s) { return s == Speaker::Architect ? "architect" : "builder"; }

/// Builder utterance taxonomy. The first two are clarification questions.
enum class BuilderCategory : std::uint8_t {
    InstructionLevelQuestion = 0,
    TaskLevelQuestion,
    VerificationQuestion,
    Greeting,
    Suggestion,
    DisplayUnderstanding,
    StatusUpdate,
    Others,
};

inline constexpr std::size_t kNumBuilderCategories = 8;

inline constexpr std::array<std::string_view, kNumBuilderCategories> kCategoryKeys = {
    "instruction_level_question", "task_level_question", "verification_question", "greeting",
    "suggestion",                 "display_understanding", "status_update",       "others"};

inline constexpr std::array<std::string_view, kNumBuilderCategories> kCategoryTitles = {
    "Instruction-level Questions", "Task-level Questions",  "Verification Questions", "Greeting",
    "Suggestions",                 "Display Understanding", "Status Update",          "Others"};

inline std::string_view to_string(BuilderCategory c) { return kCategoryKeys[static_cast<std::size_t>(c)]; }

inline std::optional<BuilderCategory> parse_category(std::string_view s) {
    for (std::size_t i = 0; i < kCategoryKeys.size(); ++i) {
        if (kCategoryKeys[i] == s) return static_cast<BuilderCategory>(i);
    }
    return std::nullopt;
}

inline bool is_clarification(BuilderCategory c) {
    return c == BuilderCategory::InstructionLevelQuestion || c == BuilderCategory::TaskLevelQuestion;
}

enum class Split : std::uint8_t { Train = 0, Valid, Test };

inline constexpr std::array<std::string_view, 3> kSplitNames = {"train", "valid", "test"};

inline std::string_view to_string(Split s) { return kSplitNames[static_cast<std::size_t>(s)]; }

inline std::optional<Split> parse_split(std::string_view s) {
    for (std::size_t i = 0; i < kSplitNames.size(); ++i) {
        if (kSplitNames[i] == s) return static_cast<Split>(i);
    }
    return std::nullopt;
}

struct Utterance {
    Speaker speaker = Speaker::Architect;
    std::string text;
    std::optional<BuilderCategory> builder_category;
    // Stable identity of the utterance inside its source dialogue. Samples
    // share dialogue prefixes, so statistics deduplicate on this when set.
    std::optional<std::string> id;

    friend bool operator==(const Utterance&, const Utterance&) = default;
};

using Dialogue = std::vector<Utterance>;

struct Sample {
    std::string id;
    Split split = Split::Train;
    Dialogue dialogue;
    WorldState world;  // initial world, including its action history
    ActionTypeLabel label = ActionTypeLabel::Execution;
    std::vector<BuildAction> gold_actions;  // stop-terminated iff label == Execution

    friend bool operator==(const Sample&, const Sample&) = default;
};

// ---------------------------------------------------------------- JSONL schema

namespace detail {

[[noreturn]] inline void record_error(const std::string& id, const std::string& field, const std::string& what) {
    throw DataError("record " + id + ": field " + field + ": " + what);
}

}  // namespace detail

inline nlohmann::json sample_to_json(const Sample& s) {
    nlohmann::json dialogue = nlohmann::json::array();
    for (const auto& u : s.dialogue) {
        nlohmann::json j = {{"speaker", to_string(u.speaker)}, {"text", u.text}};
        if (u.builder_category) j["builder_category"] = to_string(*u.builder_category);
        if (u.id) j["id"] = *u.id;
        dialogue.push_back(std::move(j));
    }
    nlohmann::json history = nlohmann::json::array();
    for (const auto& a : s.world.history()) history.push_back(action_to_json(a));
    nlohmann::json j = {{"id", s.id},
                        {"split", to_string(s.split)},
                        {"dialogue", std::move(dialogue)},
                        {"world", world_to_json(s.world)},
                        {"action_history", std::move(history)},
                        {"label", to_string(s.label)}};
    if (s.label == ActionTypeLabel::Execution) {
        nlohmann::json gold = nlohmann::json::array();
        for (const auto& a : s.gold_actions) gold.push_back(action_to_json(a));
        j["gold_actions"] = std::move(gold);
    }
    return j;
}

/// Validates one record: region bounds, enumerations, label/payload consistency.
inline Sample sample_from_json(const nlohmann::json& j, std::size_t line_number = 0) {
    std::string id = "#" + std::to_string(line_number);
    if (!j.is_object()) detail::record_error(id, "<record>", "not a JSON object");
    if (!j.contains("id") || !j["id"].is_string()) detail::record_error(id, "id", "missing or not a string");
    Sample s;
    s.id = j["id"].get<std::string>();
    id = s.id;

    auto need_string = [&](const char* field) -> std::string {
        if (!j.contains(field) || !j[field].is_string()) detail::record_error(id, field, "missing or not a string");
        return j[field].get<std::string>();
    };

    auto split = parse_split(need_string("split"));
    if (!split) detail::record_error(id, "split", "expected train|valid|test");
    s.split = *split;

    auto label = parse_label(need_string("label"));
    if (!label) detail::record_error(id, "label", "expected execution|ask|others");
    s.label = *label;

    if (!j.contains("dialogue") || !j["dialogue"].is_array()) detail::record_error(id, "dialogue", "missing or not an array");
    for (std::size_t i = 0; i < j["dialogue"].size(); ++i) {
        const auto& u = j["dialogue"][i];
        std::string f = "dialogue[" + std::to_string(i) + "]";
        if (!u.is_object()) detail::record_error(id, f, "not an object");
        Utterance utt;
        if (!u.contains("speaker") || !u["speaker"].is_string()) detail::record_error(id, f + ".speaker", "missing");
        auto sp = u["speaker"].get<std::string>();
        if (sp == "architect") utt.speaker = Speaker::Architect;
        else if (sp == "builder") utt.speaker = Speaker::Builder;
        else detail::record_error(id, f + ".speaker", "expected architect|builder");
        if (!u.contains("text") || !u["text"].is_string()) detail::record_error(id, f + ".text", "missing or not a string");
        utt.text = u["text"].get<std::string>();
        if (u.contains("builder_category") && !u["builder_category"].is_null()) {
            if (utt.speaker != Speaker::Builder) detail::record_error(id, f + ".builder_category", "only builder utterances are categorized");
            if (!u["builder_category"].is_string()) detail::record_error(id, f + ".builder_category", "not a string");
            auto c = parse_category(u["builder_category"].get<std::string>());
            if (!c) detail::record_error(id, f + ".builder_category", "unknown category " + u["builder_category"].dump());
            utt.builder_category = c;
        }
        if (u.contains("id")) {
            if (!u["id"].is_string()) detail::record_error(id, f + ".id", "not a string");
            utt.id = u["id"].get<std::string>();
        }
        s.dialogue.push_back(std::move(utt));
    }

    std::vector<BuildAction> history;
    if (j.contains("action_history")) {
        if (!j["action_history"].is_array()) detail::record_error(id, "action_history", "not an array");
        for (std::size_t i = 0; i < j["action_history"].size(); ++i) {
            try {
                history.push_back(action_from_json(j["action_history"][i]));
            } catch (const DataError& e) {
                detail::record_error(id, "action_history[" + std::to_string(i) + "]", e.what());
            }
            if (history.back().kind == ActionKind::Stop) {
                detail::record_error(id, "action_history[" + std::to_string(i) + "]", "stop is not a build action");
            }
        }
    }
    if (!j.contains("world")) detail::record_error(id, "world", "missing");
    try {
        s.world = world_from_json(j["world"], std::move(history));
    } catch (const DataError& e) {
        detail::record_error(id, "world", e.what());
    }

    bool has_gold = j.contains("gold_actions") && !j["gold_actions"].is_null();
    if (s.label == ActionTypeLabel::Execution) {
        if (!has_gold || !j["gold_actions"].is_array() || j["gold_actions"].empty()) {
            detail::record_error(id, "gold_actions", "execution samples need a non-empty action list");
        }
        const auto& gold = j["gold_actions"];
        for (std::size_t i = 0; i < gold.size(); ++i) {
            std::string f = "gold_actions[" + std::to_string(i) + "]";
            try {
                s.gold_actions.push_back(action_from_json(gold[i]));
            } catch (const DataError& e) {
                detail::record_error(id, f, e.what());
            }
            bool last = i + 1 == gold.size();
            bool is_stop = s.gold_actions.back().kind == ActionKind::Stop;
            if (last && !is_stop) detail::record_error(id, f, "sequence must end with stop");
            if (!last && is_stop) detail::record_error(id, f, "stop before the end of the sequence");
        }
    } else if (has_gold && !(j["gold_actions"].is_array() && j["gold_actions"].empty())) {
        detail::record_error(id, "gold_actions", "only execution samples carry gold actions");
    }
    return s;
}

inline std::vector<Sample> parse_jsonl(std::istream& in) {
    std::vector<Sample> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError("line " + std::to_string(n) + ": invalid JSON: " + e.what());
        }
        out.push_back(sample_from_json(j, n));
    }
    return out;
}

/// Reads a .jsonl file, or every *.jsonl file of a directory in name order.
inline std::vector<Sample> parse_corpus(const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    std::vector<fs::path> files;
    if (fs::is_directory(path)) {
        for (const auto& e : fs::directory_iterator(path)) {
            if (e.is_regular_file() && e.path().extension() == ".jsonl") files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
    } else {
        files.push_back(path);
    }
    std::vector<Sample> out;
    for (const auto& f : files) {
        std::ifstream in(f);
        if (!in) throw DataError("cannot open corpus file " + f.string());
        auto part = parse_jsonl(in);
        out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
    return out;
}

inline std::string serialize_jsonl(const std::vector<Sample>& samples) {
    std::string out;
    for (const auto& s : samples) {
        out += sample_to_json(s).dump();
        out += '\n';
    }
    return out;
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<Sample>& samples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path.string() + " for writing");
    out << serialize_jsonl(samples);
}

/// Replays gold actions from the sample's initial world; one message per
/// illegal step (the step is skipped and replay continues).
inline std::vector<std::string> audit_replay(const Sample& s) {
    std::vector<std::string> problems;
    WorldState w = s.world;
    for (std::size_t i = 0; i < s.gold_actions.size(); ++i) {
        if (auto why = legality_violation(w, s.gold_actions[i])) {
            problems.push_back(s.id + " step " + std::to_string(i) + ": " + *why);
            continue;
        }
        w = apply_action(w, s.gold_actions[i]);
    }
    return problems;
}

// ---------------------------------------------------------------- tokens

inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kArchitectToken = "<architect>";
inline constexpr std::string_view kBuilderToken = "<builder>";

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;

/// Lowercases, splits on whitespace, and emits each ASCII punctuation mark
/// as its own token.
inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) out.push_back(std::move(cur));
        cur.clear();
    };
    for (unsigned char c : text) {
        if (std::isspace(c)) {
            flush();
        } else if (c < 128 && std::ispunct(c)) {
            flush();
            out.emplace_back(1, static_cast<char>(c));
        } else {
            cur.push_back(static_cast<char>(c < 128 ? std::tolower(c) : c));
        }
    }
    flush();
    return out;
}

/// Speaker-tagged concatenation of the dialogue. Keeps the most recent
/// `length` tokens and right-pads to exactly `length`.
inline std::vector<std::string> flatten_dialogue(const Dialogue& dialogue, std::size_t length = 100) {
    std::vector<std::string> all;
    for (const auto& u : dialogue) {
        all.emplace_back(u.speaker == Speaker::Architect ? kArchitectToken : kBuilderToken);
        auto toks = tokenize(u.text);
        all.insert(all.end(), toks.begin(), toks.end());
    }
    if (all.size() > length) all.erase(all.begin(), all.end() - static_cast<std::ptrdiff_t>(length));
    all.resize(length, std::string(kPadToken));
    return all;
}

class Vocabulary {
public:
    Vocabulary() {
        for (auto t : {kPadToken, kUnkToken, kArchitectToken, kBuilderToken}) add(std::string(t));
    }

    static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
        Vocabulary v;
        for (std::size_t i = 0; i < 4 && i < tokens.size(); ++i) {
            if (tokens[i] != v.tokens_[i]) throw DataError("vocabulary does not start with the reserved tokens");
        }
        for (std::size_t i = 4; i < tokens.size(); ++i) {
            if (v.ids_.contains(tokens[i])) throw DataError("duplicate vocabulary token " + tokens[i]);
            v.add(tokens[i]);
        }
        return v;
    }

    int add(const std::string& token) {
        auto [it, inserted] = ids_.try_emplace(token, static_cast<int>(tokens_.size()));
        if (inserted) tokens_.push_back(token);
        return it->second;
    }

    int id(std::string_view token) const {
        auto it = ids_.find(std::string(token));
        return it == ids_.end() ? kUnkId : it->second;
    }

    bool contains(std::string_view token) const { return ids_.contains(std::string(token)); }

    const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    std::vector<int> encode(const std::vector<std::string>& tokens) const {
        std::vector<int> out;
        out.reserve(tokens.size());
        for (const auto& t : tokens) out.push_back(id(t));
        return out;
    }

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
};

/// Token frequencies over the dialogues of training-split samples.
inline std::map<std::string, std::size_t> token_counts(const std::vector<Sample>& samples) {
    std::map<std::string, std::size_t> counts;
    for (const auto& s : samples) {
        if (s.split != Split::Train) continue;
        for (const auto& u : s.dialogue)
            for (auto& t : tokenize(u.text)) ++counts[t];
    }
    return counts;
}

/// Reserved tokens plus every training token seen at least min_count times,
/// ordered by descending frequency, then lexicographically.
inline Vocabulary build_vocab(const std::vector<Sample>& samples, std::size_t min_count = 2) {
    auto counts = token_counts(samples);
    std::vector<std::pair<std::string, std::size_t>> kept;
    for (auto& [t, c] : counts) {
        if (c >= min_count) kept.emplace_back(t, c);
    }
    std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary v;
    for (auto& [t, _] : kept) v.add(t);
    return v;
}

/// Reads whitespace-separated embedding rows ("token v1 … vd") into the rows
/// of `table` whose tokens appear in `vocab`. Returns how many rows were set.
inline std::size_t load_embeddings(std::istream& in, const Vocabulary& vocab, Tensor& table) {
    if (table.rank() != 2 || table.dim(0) != vocab.size()) {
        throw DimensionError("embedding table " + shape_str(table.shape()) + " does not match vocabulary size " +
                             std::to_string(vocab.size()));
    }
    const std::size_t d = table.dim(1);
    std::size_t found = 0, line_no = 0;
    std::string line;
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream ls(line);
        std::string token;
        if (!(ls >> token)) continue;
        if (!vocab.contains(token)) continue;
        std::vector<double> values;
        double v;
        while (ls >> v) values.push_back(v);
        if (values.size() != d) {
            throw DataError("embedding line " + std::to_string(line_no) + " has " + std::to_string(values.size()) +
                            " values, expected " + std::to_string(d));
        }
        std::copy(values.begin(), values.end(), table.ptr() + static_cast<std::size_t>(vocab.id(token)) * d);
        ++found;
    }
    return found;
}

// ---------------------------------------------------------------- batching

/// Epoch-wise shuffled batches of sample indices. With balancing, every
/// class contributes as many draws as the largest class: each member of a
/// smaller class is repeated floor(max/size) times and the remainder is
/// drawn without replacement.
class BatchSampler {
public:
    BatchSampler(std::vector<ActionTypeLabel> labels, std::size_t batch_size, bool balance, std::uint64_t seed)
        : labels_(std::move(labels)), batch_size_(batch_size), balance_(balance), rng_(seed) {
        if (batch_size_ == 0) throw ConfigError("batch_size must be positive");
        if (labels_.empty()) throw ConfigError("no samples to batch");
        if (balance_) {
            for (std::size_t i = 0; i < labels_.size(); ++i) by_class_[static_cast<std::size_t>(labels_[i])].push_back(i);
            for (std::size_t c = 0; c < by_class_.size(); ++c) {
                if (by_class_[c].empty()) {
                    throw ConfigError("cannot balance: class " + std::string(kLabelNames[c]) + " has no samples");
                }
            }
        }
    }

    std::vector<std::size_t> epoch_order() {
        std::vector<std::size_t> order;
        if (!balance_) {
            order.resize(labels_.size());
            std::iota(order.begin(), order.end(), std::size_t{0});
        } else {
            std::size_t target = 0;
            for (const auto& members : by_class_) target = std::max(target, members.size());
            for (const auto& members : by_class_) {
                std::size_t copies = target / members.size();
                for (std::size_t k = 0; k < copies; ++k) order.insert(order.end(), members.begin(), members.end());
                std::vector<std::size_t> rest = members;
                std::shuffle(rest.begin(), rest.end(), rng_);
                order.insert(order.end(), rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(target % members.size()));
            }
        }
        std::shuffle(order.begin(), order.end(), rng_);
        return order;
    }

    std::vector<std::vector<std::size_t>> next_epoch() {
        auto order = epoch_order();
        std::vector<std::vector<std::size_t>> batches;
        for (std::size_t i = 0; i < order.size(); i += batch_size_) {
            std::size_t end = std::min(order.size(), i + batch_size_);
            batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
        }
        return batches;
    }

private:
    std::vector<ActionTypeLabel> labels_;
    std::size_t batch_size_;
    bool balance_;
    std::mt19937_64 rng_;
    std::array<std::vector<std::size_t>, 3> by_class_;
};

inline BatchSampler balanced_batches(const std::vector<Sample>& samples, std::size_t batch_size, std::uint64_t seed) {
    std::vector<ActionTypeLabel> labels;
    for (const auto& s : samples) labels.push_back(s.label);
    return BatchSampler(std::move(labels), batch_size, true, seed);
}

// ---------------------------------------------------------------- statistics

struct TaxonomyStats {
    std::array<std::size_t, kNumBuilderCategories> counts{};
    std::size_t total = 0;

    double percentage(BuilderCategory c) const {
        return total == 0 ? 0.0 : 100.0 * static_cast<double>(counts[static_cast<std::size_t>(c)]) / static_cast<double>(total);
    }
};

/// Counts annotated builder utterances per category. Utterances carrying an
/// id are counted once however many samples repeat them.
inline TaxonomyStats taxonomy_stats(const std::vector<Sample>& samples) {
    TaxonomyStats st;
    std::unordered_map<std::string, bool> seen;
    for (const auto& s : samples) {
        for (const auto& u : s.dialogue) {
            if (u.speaker != Speaker::Builder || !u.builder_category) continue;
            if (u.id && !seen.try_emplace(*u.id, true).second) continue;
            ++st.counts[static_cast<std::size_t>(*u.builder_category)];
            ++st.total;
        }
    }
    return st;
}

/// counts[label][split]
struct SplitStats {
    std::array<std::array<std::size_t, 3>, 3> counts{};

    std::size_t total(Split s) const {
        std::size_t t = 0;
        for (const auto& row : counts) t += row[static_cast<std::size_t>(s)];
        return t;
    }
};

inline SplitStats split_stats(const std::vector<Sample>& samples) {
    SplitStats st;
    for (const auto& s : samples) ++st.counts[static_cast<std::size_t>(s.label)][static_cast<std::size_t>(s.split)];
    return st;
}

inline nlohmann::json taxonomy_to_json(const TaxonomyStats& st) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < kNumBuilderCategories; ++i) {
        auto c = static_cast<BuilderCategory>(i);
        rows.push_back({{"category", kCategoryKeys[i]}, {"amount", st.counts[i]}, {"percentage", st.percentage(c)}});
    }
    return {{"categories", rows}, {"total", st.total}};
}

inline nlohmann::json splits_to_json(const SplitStats& st) {
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t l = 0; l < 3; ++l) {
        nlohmann::json row = nlohmann::json::object();
        for (std::size_t s = 0; s < 3; ++s) row[std::string(kSplitNames[s])] = st.counts[l][s];
        j[std::string(kLabelNames[l])] = row;
    }
    nlohmann::json total = nlohmann::json::object();
    for (std::size_t s = 0; s < 3; ++s) total[std::string(kSplitNames[s])] = st.total(static_cast<Split>(s));
    j["total"] = total;
    return j;
}

/// Category / Amount / Percentage table.
inline std::string format_taxonomy_table(const TaxonomyStats& st) {
    std::ostringstream o;
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-30s %8s %11s\n", "Category", "Amount", "Percentage");
    o << buf;
    for (std::size_t i = 0; i < kNumBuilderCategories; ++i) {
        std::snprintf(buf, sizeof buf, "%-30s %8zu %10.2f%%\n", std::string(kCategoryTitles[i]).c_str(), st.counts[i],
                      st.percentage(static_cast<BuilderCategory>(i)));
        o << buf;
    }
    std::snprintf(buf, sizeof buf, "%-30s %8zu\n", "Total", st.total);
    o << buf;
    return o.str();
}

/// Label rows by train / valid / test columns.
inline std::string format_split_table(const SplitStats& st) {
    static constexpr std::array<const char*, 3> rows = {"Execution (Original)", "Ask for clarifications", "Others"};
    std::ostringstream o;
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-24s %8s %8s %8s\n", "", "Train", "Valid", "Test");
    o << buf;
    for (std::size_t l = 0; l < 3; ++l) {
        std::snprintf(buf, sizeof buf, "%-24s %8zu %8zu %8zu\n", rows[l], st.counts[l][0], st.counts[l][1], st.counts[l][2]);
        o << buf;
    }
    std::snprintf(buf, sizeof buf, "%-24s %8zu %8zu %8zu\n", "Total", st.total(Split::Train), st.total(Split::Valid),
                  st.total(Split::Test));
    o << buf;
    return o.str();
}

}  // namespace askbuild
