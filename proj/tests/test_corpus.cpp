#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "askbuild/corpus.hpp"
#include "askbuild/synth.hpp"

using namespace askbuild;

namespace {

nlohmann::json execution_record() {
    return {{"id", "r1"},
            {"split", "train"},
            {"label", "execution"},
            {"dialogue", {{{"speaker", "architect"}, {"text", "place a red block at 5 0 5"}}}},
            {"world", {{"blocks", nlohmann::json::array()}}},
            {"gold_actions", {{{"kind", "placement"}, {"x", 5}, {"y", 0}, {"z", 5}, {"color", "red"}}, {{"kind", "stop"}}}}};
}

std::string expect_data_error(const nlohmann::json& rec) {
    try {
        sample_from_json(rec, 1);
    } catch (const DataError& e) {
        return e.what();
    }
    ADD_FAILURE() << "expected DataError for " << rec.dump();
    return {};
}

Sample labeled(ActionTypeLabel l, std::size_t i) {
    Sample s;
    s.id = "s" + std::to_string(i);
    s.label = l;
    if (l == ActionTypeLabel::Execution) s.gold_actions = {BuildAction::stop()};
    return s;
}

}  // namespace

TEST(Parse, ValidRecordRoundTrips) {
    Sample s = sample_from_json(execution_record());
    EXPECT_EQ(s.id, "r1");
    EXPECT_EQ(s.label, ActionTypeLabel::Execution);
    ASSERT_EQ(s.gold_actions.size(), 2u);
    EXPECT_EQ(s.gold_actions[0], BuildAction::place(Color::Red, {5, 0, 5}));
    EXPECT_EQ(sample_from_json(sample_to_json(s)), s);
}

TEST(Parse, EmptyStreamGivesNoSamples) {
    std::istringstream in("");
    EXPECT_TRUE(parse_jsonl(in).empty());
    std::istringstream blank("\n  \n");
    EXPECT_TRUE(parse_jsonl(blank).empty());
}

TEST(Parse, ErrorsNameRecordAndField) {
    auto rec = execution_record();
    rec["gold_actions"][0]["y"] = 9;
    std::string msg = expect_data_error(rec);
    EXPECT_NE(msg.find("r1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("gold_actions[0]"), std::string::npos) << msg;

    rec = execution_record();
    rec["world"]["blocks"] = {{{"x", 0}, {"y", 9}, {"z", 0}, {"color", "red"}}};
    msg = expect_data_error(rec);
    EXPECT_NE(msg.find("world"), std::string::npos) << msg;

    rec = execution_record();
    rec["gold_actions"].erase(1);
    msg = expect_data_error(rec);
    EXPECT_NE(msg.find("end with stop"), std::string::npos) << msg;

    rec = execution_record();
    rec["label"] = "ask";
    msg = expect_data_error(rec);
    EXPECT_NE(msg.find("gold_actions"), std::string::npos) << msg;

    rec = execution_record();
    rec["split"] = "dev";
    expect_data_error(rec);

    rec = execution_record();
    rec["dialogue"][0]["builder_category"] = "greeting";
    expect_data_error(rec);
}

TEST(Parse, MalformedJsonLineIsDataError) {
    std::istringstream in(execution_record().dump() + "\n{not json\n");
    EXPECT_THROW(parse_jsonl(in), DataError);
}

TEST(Parse, DirectoryIsReadInFileOrder) {
    namespace fs = std::filesystem;
    fs::path dir = fs::path(::testing::TempDir()) / "askbuild_corpus_dir";
    fs::remove_all(dir);
    fs::create_directories(dir);
    auto samples = synth_generate(6, 9);
    std::vector<Sample> a(samples.begin(), samples.begin() + 3), b(samples.begin() + 3, samples.end());
    write_jsonl(dir / "b.jsonl", b);
    write_jsonl(dir / "a.jsonl", a);
    EXPECT_EQ(parse_corpus(dir), samples);
    EXPECT_EQ(parse_corpus(dir / "a.jsonl"), a);
    fs::remove_all(dir);
}

TEST(Tokens, Tokenize) {
    EXPECT_EQ(tokenize("Place a RED block, now!"),
              (std::vector<std::string>{"place", "a", "red", "block", ",", "now", "!"}));
}

TEST(Tokens, FlattenPadsAndTags) {
    auto empty = flatten_dialogue({});
    EXPECT_EQ(empty.size(), 100u);
    for (const auto& t : empty) EXPECT_EQ(t, kPadToken);

    auto f = flatten_dialogue({{Speaker::Architect, "place red", std::nullopt, std::nullopt}});
    ASSERT_EQ(f.size(), 100u);
    EXPECT_EQ(f[0], kArchitectToken);
    EXPECT_EQ(f[1], "place");
    EXPECT_EQ(f[2], "red");
    for (std::size_t i = 3; i < 100; ++i) EXPECT_EQ(f[i], kPadToken);
}

TEST(Tokens, FlattenKeepsMostRecent) {
    // 3 utterances of 49 words: 150 tokens including tags.
    Dialogue d;
    std::vector<std::string> expected_all;
    for (int u = 0; u < 3; ++u) {
        std::string text;
        Speaker sp = u % 2 ? Speaker::Builder : Speaker::Architect;
        expected_all.emplace_back(sp == Speaker::Architect ? kArchitectToken : kBuilderToken);
        for (int w = 0; w < 49; ++w) {
            std::string tok = "w" + std::to_string(u) + "x" + std::to_string(w);
            text += tok + " ";
            expected_all.push_back(tok);
        }
        d.push_back({sp, text, std::nullopt, std::nullopt});
    }
    ASSERT_EQ(expected_all.size(), 150u);
    auto f = flatten_dialogue(d);
    EXPECT_EQ(f, std::vector<std::string>(expected_all.begin() + 50, expected_all.end()));
}

TEST(Vocab, MinCount) {
    Sample s;
    s.dialogue = {{Speaker::Architect, "a a b", std::nullopt, std::nullopt}};
    Vocabulary v2 = build_vocab({s}, 2);
    EXPECT_EQ(v2.size(), 5u);
    EXPECT_TRUE(v2.contains("a"));
    EXPECT_FALSE(v2.contains("b"));
    EXPECT_EQ(v2.id("b"), kUnkId);
    Vocabulary v1 = build_vocab({s}, 1);
    EXPECT_TRUE(v1.contains("b"));
}

TEST(Vocab, ReservedIdsAndRoundTrip) {
    Vocabulary v = build_vocab(synth_generate(50, 4), 1);
    EXPECT_EQ(v.id(kPadToken), kPadId);
    EXPECT_EQ(v.id(kUnkToken), kUnkId);
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(v.id(v.token(static_cast<int>(i))), static_cast<int>(i));
    EXPECT_EQ(Vocabulary::from_tokens(v.tokens()), v);
}

TEST(Vocab, SizeMatchesIndependentWordCount) {
    auto samples = synth_generate(300, 5);
    std::map<std::string, int> counts;
    for (const auto& s : samples) {
        if (s.split != Split::Train) continue;
        for (const auto& u : s.dialogue) {
            // Independent split: the synthetic grammar only uses spaces and
            // standalone punctuation, so whitespace splitting suffices.
            std::istringstream is(u.text);
            std::string w;
            while (is >> w) ++counts[w];
        }
    }
    std::size_t expect = 4;
    for (auto& [_, c] : counts) expect += c >= 2;
    EXPECT_EQ(build_vocab(samples, 2).size(), expect);
}

TEST(Vocab, IgnoresNonTrainSplits) {
    Sample a, b;
    a.dialogue = {{Speaker::Architect, "alpha", std::nullopt, std::nullopt}};
    b = a;
    b.split = Split::Test;
    b.dialogue[0].text = "beta";
    Vocabulary v = build_vocab({a, b}, 1);
    EXPECT_TRUE(v.contains("alpha"));
    EXPECT_FALSE(v.contains("beta"));
}

TEST(Embeddings, LoadsKnownTokensOnly) {
    Sample s;
    s.dialogue = {{Speaker::Architect, "red blue", std::nullopt, std::nullopt}};
    Vocabulary v = build_vocab({s}, 1);
    Tensor table({v.size(), 3}, 0.0);
    std::istringstream in("red 1 2 3\ngreen 4 5 6\nblue 7 8 9\n");
    EXPECT_EQ(load_embeddings(in, v, table), 2u);
    EXPECT_EQ(table.at(static_cast<std::size_t>(v.id("red")), 1), 2.0);
    EXPECT_EQ(table.at(static_cast<std::size_t>(v.id("blue")), 2), 9.0);
    std::istringstream bad("red 1 2\n");
    EXPECT_THROW(load_embeddings(bad, v, table), DataError);
}

TEST(Balancing, ClassesOf100And10And10) {
    std::vector<Sample> samples;
    for (std::size_t i = 0; i < 100; ++i) samples.push_back(labeled(ActionTypeLabel::Execution, i));
    for (std::size_t i = 0; i < 10; ++i) samples.push_back(labeled(ActionTypeLabel::Ask, 100 + i));
    for (std::size_t i = 0; i < 10; ++i) samples.push_back(labeled(ActionTypeLabel::Others, 110 + i));
    BatchSampler sampler = balanced_batches(samples, 50, 7);
    auto batches = sampler.next_epoch();
    std::array<std::size_t, 3> draws{};
    std::size_t total = 0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
        if (b + 1 < batches.size()) {
            EXPECT_EQ(batches[b].size(), 50u);
        }
        for (auto i : batches[b]) {
            ++draws[static_cast<std::size_t>(samples[i].label)];
            ++total;
        }
    }
    EXPECT_EQ(total, 300u);
    for (auto d : draws) EXPECT_NEAR(static_cast<double>(d), 100.0, 5.0);

    BatchSampler again = balanced_batches(samples, 50, 7);
    EXPECT_EQ(again.next_epoch(), batches);
}

TEST(Balancing, UnevenRemainderDrawsWithoutRepeats) {
    std::vector<Sample> samples;
    for (std::size_t i = 0; i < 25; ++i) samples.push_back(labeled(ActionTypeLabel::Execution, i));
    for (std::size_t i = 0; i < 7; ++i) samples.push_back(labeled(ActionTypeLabel::Ask, 25 + i));
    for (std::size_t i = 0; i < 25; ++i) samples.push_back(labeled(ActionTypeLabel::Others, 32 + i));
    BatchSampler sampler = balanced_batches(samples, 8, 3);
    std::map<std::size_t, int> seen;
    for (auto i : sampler.epoch_order()) ++seen[i];
    for (std::size_t i = 25; i < 32; ++i) {
        EXPECT_GE(seen[i], 3);
        EXPECT_LE(seen[i], 4);
    }
    int ask_total = 0;
    for (std::size_t i = 25; i < 32; ++i) ask_total += seen[i];
    EXPECT_EQ(ask_total, 25);
}

TEST(Balancing, AlreadyBalancedIsAPermutation) {
    std::vector<Sample> samples;
    for (std::size_t i = 0; i < 12; ++i) samples.push_back(labeled(static_cast<ActionTypeLabel>(i % 3), i));
    BatchSampler sampler = balanced_batches(samples, 5, 1);
    auto order = sampler.epoch_order();
    std::sort(order.begin(), order.end());
    std::vector<std::size_t> all(12);
    std::iota(all.begin(), all.end(), 0u);
    EXPECT_EQ(order, all);
}

TEST(Balancing, EmptyClassIsConfigError) {
    std::vector<Sample> samples{labeled(ActionTypeLabel::Execution, 0), labeled(ActionTypeLabel::Ask, 1)};
    EXPECT_THROW(balanced_batches(samples, 2, 0), ConfigError);
    EXPECT_NO_THROW(BatchSampler({ActionTypeLabel::Execution}, 2, false, 0));
}

TEST(Stats, TaxonomyTallyDeduplicatesUtteranceIds) {
    Sample a;
    a.dialogue = {{Speaker::Builder, "where ?", BuilderCategory::InstructionLevelQuestion, "d1-3"},
                  {Speaker::Builder, "hi", BuilderCategory::Greeting, "d1-4"},
                  {Speaker::Builder, "unlabeled", std::nullopt, std::nullopt}};
    Sample b = a;
    b.dialogue.push_back({Speaker::Builder, "done", BuilderCategory::StatusUpdate, std::nullopt});
    auto st = taxonomy_stats({a, b});
    EXPECT_EQ(st.total, 3u);
    EXPECT_EQ(st.counts[static_cast<std::size_t>(BuilderCategory::InstructionLevelQuestion)], 1u);
    EXPECT_EQ(st.counts[static_cast<std::size_t>(BuilderCategory::StatusUpdate)], 1u);
    EXPECT_NEAR(st.percentage(BuilderCategory::Greeting), 100.0 / 3.0, 1e-12);
}

TEST(Stats, TaxonomyPercentagesFromPublishedCounts) {
    // Published per-category counts; percentages are recomputed from them.
    const std::array<std::size_t, 8> counts = {914, 252, 1021, 808, 59, 1296, 101, 453};
    TaxonomyStats st;
    st.counts = counts;
    st.total = 4904;
    EXPECT_EQ(std::accumulate(counts.begin(), counts.end(), std::size_t{0}), 4904u);
    EXPECT_NEAR(st.percentage(BuilderCategory::InstructionLevelQuestion), 18.64, 0.005);
    EXPECT_NEAR(st.percentage(BuilderCategory::DisplayUnderstanding), 26.43, 0.005);
    EXPECT_NEAR(st.percentage(BuilderCategory::Suggestion), 1.20, 0.005);
    std::string table = format_taxonomy_table(st);
    EXPECT_NE(table.find("Instruction-level Questions"), std::string::npos);
    EXPECT_NE(table.find("4904"), std::string::npos);
}

TEST(Stats, SplitCounts) {
    auto samples = synth_generate(200, 11);
    auto st = split_stats(samples);
    std::size_t sum = 0;
    for (std::size_t s = 0; s < 3; ++s) sum += st.total(static_cast<Split>(s));
    EXPECT_EQ(sum, 200u);
    std::size_t exec_train = 0;
    for (const auto& s : samples) exec_train += s.label == ActionTypeLabel::Execution && s.split == Split::Train;
    EXPECT_EQ(st.counts[0][0], exec_train);
    auto j = splits_to_json(st);
    EXPECT_EQ(j["execution"]["train"].get<std::size_t>(), exec_train);
    EXPECT_NE(format_split_table(st).find("Ask for clarifications"), std::string::npos);
}

TEST(Audit, ReplayFlagsIllegalGold) {
    Sample s = sample_from_json(execution_record());
    EXPECT_TRUE(audit_replay(s).empty());
    s.gold_actions.insert(s.gold_actions.begin(), BuildAction::remove({1, 0, 1}));
    EXPECT_EQ(audit_replay(s).size(), 1u);
}
