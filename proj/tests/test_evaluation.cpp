#include <gtest/gtest.h>

#include <array>
#include <random>
#include <sstream>

#include "askbuild/evaluation.hpp"
#include "askbuild/training.hpp"
#include "fixtures.hpp"

using namespace askbuild;

namespace {

// Independent scorer: its own replay over a flat color array and a
// cell-by-cell comparison of the three grids.
using Cells = std::array<int, kNumCells>;  // -1 empty, else color index

Cells cells_of(const WorldState& w) {
    Cells c;
    c.fill(-1);
    for (const auto& [at, color] : w.blocks()) c[at.index()] = static_cast<int>(color);
    return c;
}

bool supported(const Cells& c, Coord p) {
    if (p.y == 0) return true;
    const int d[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
    for (const auto& o : d) {
        Coord q{p.x + o[0], p.y + o[1], p.z + o[2]};
        if (q.x < 0 || q.y < 0 || q.z < 0 || q.x >= 11 || q.y >= 9 || q.z >= 11) continue;
        if (c[q.index()] >= 0) return true;
    }
    return false;
}

Cells brute_replay(Cells c, const std::vector<BuildAction>& actions) {
    for (const auto& a : actions) {
        if (a.kind == ActionKind::Stop) break;
        std::size_t i = a.location->index();
        if (a.kind == ActionKind::Placement) {
            if (c[i] < 0 && supported(c, *a.location)) c[i] = static_cast<int>(*a.color);
        } else if (c[i] >= 0) {
            c[i] = -1;
        }
    }
    return c;
}

struct Counts {
    std::size_t matched = 0, predicted = 0, gold = 0;
};

Counts brute_score(const WorldState& w0, const std::vector<BuildAction>& gold, const std::vector<BuildAction>& pred) {
    Cells init = cells_of(w0), g = brute_replay(init, gold), p = brute_replay(init, pred);
    Counts r;
    for (std::size_t i = 0; i < kNumCells; ++i) {
        bool g_removed = init[i] >= 0 && g[i] != init[i];
        bool p_removed = init[i] >= 0 && p[i] != init[i];
        int g_added = g[i] >= 0 && g[i] != init[i] ? g[i] : -1;
        int p_added = p[i] >= 0 && p[i] != init[i] ? p[i] : -1;
        r.gold += g_removed + (g_added >= 0);
        r.predicted += p_removed + (p_added >= 0);
        r.matched += (g_removed && p_removed) + (g_added >= 0 && g_added == p_added);
    }
    return r;
}

WorldState random_initial(std::mt19937_64& rng) {
    WorldState w;
    std::uniform_int_distribution<int> n(0, 8);
    for (int k = n(rng); k > 0; --k) {
        auto cells = feasible_placements(w);
        w = apply_action(w, BuildAction::place(static_cast<Color>(rng() % 6), cells[rng() % cells.size()]));
    }
    return w;
}

/// Mostly legal moves (with place/remove churn on the same cells) plus
/// occasional arbitrary ones.
std::vector<BuildAction> random_sequence(const WorldState& w0, std::mt19937_64& rng) {
    std::vector<BuildAction> out;
    WorldState w = w0;
    std::uniform_int_distribution<int> len(0, 10);
    for (int k = len(rng); k > 0; --k) {
        int r = static_cast<int>(rng() % 10);
        BuildAction a = BuildAction::stop();
        if (r < 1) {
            Coord c{static_cast<int>(rng() % 11), static_cast<int>(rng() % 9), static_cast<int>(rng() % 11)};
            a = rng() % 2 ? BuildAction::remove(c) : BuildAction::place(static_cast<Color>(rng() % 6), c);
        } else if (r < 4 && !w.blocks().empty()) {
            auto rem = feasible_removals(w);
            a = BuildAction::remove(rem[rng() % rem.size()]);
        } else {
            // stay near the middle so sequences overlap
            auto cells = feasible_placements(w);
            std::vector<Coord> near;
            for (auto c : cells)
                if (std::abs(c.x - 5) <= 2 && std::abs(c.z - 5) <= 2 && c.y <= 2) near.push_back(c);
            const auto& pool = near.empty() ? cells : near;
            a = BuildAction::place(static_cast<Color>(rng() % 3), pool[rng() % pool.size()]);
        }
        out.push_back(a);
        if (is_legal(w, a)) w = apply_action(w, a);
    }
    out.push_back(BuildAction::stop());
    return out;
}

}  // namespace

TEST(NetChangeF1, HandCase) {
    Coord a{5, 0, 5}, b{6, 0, 5};
    F1Report r = net_change_f1({BuildAction::place(Color::Red, a), BuildAction::place(Color::Blue, b), BuildAction::stop()},
                               {BuildAction::place(Color::Red, a), BuildAction::stop()}, WorldState{});
    EXPECT_EQ(r.precision(), 1.0);
    EXPECT_EQ(r.recall(), 0.5);
    EXPECT_EQ(r.f1(), 2.0 / 3.0);
}

TEST(NetChangeF1, IdenticalSequencesScoreOne) {
    std::vector<BuildAction> g = {BuildAction::place(Color::Red, {5, 0, 5}), BuildAction::place(Color::Red, {5, 1, 5}),
                                  BuildAction::stop()};
    F1Report r = net_change_f1(g, g, WorldState{});
    EXPECT_EQ(r.f1(), 1.0);
    EXPECT_EQ(r.precision(), 1.0);
    EXPECT_EQ(r.recall(), 1.0);
}

TEST(NetChangeF1, ZeroConventions) {
    std::vector<BuildAction> g = {BuildAction::place(Color::Red, {5, 0, 5}), BuildAction::stop()};
    F1Report empty_pred = net_change_f1(g, {BuildAction::stop()}, WorldState{});
    EXPECT_EQ(empty_pred.recall(), 0.0);
    EXPECT_EQ(empty_pred.precision(), 0.0);
    EXPECT_EQ(empty_pred.f1(), 0.0);
    F1Report nothing = net_change_f1({BuildAction::stop()}, {BuildAction::stop()}, WorldState{});
    EXPECT_EQ(nothing.f1(), 0.0);
}

TEST(NetChangeF1, ColorMismatchAndRecolor) {
    WorldState w = apply_action(WorldState{}, BuildAction::place(Color::Red, {5, 0, 5}));
    // gold recolors red to blue: one removal plus one addition
    std::vector<BuildAction> g = {BuildAction::remove({5, 0, 5}), BuildAction::place(Color::Blue, {5, 0, 5}),
                                  BuildAction::stop()};
    std::vector<BuildAction> p = {BuildAction::remove({5, 0, 5}), BuildAction::place(Color::Green, {5, 0, 5}),
                                  BuildAction::stop()};
    F1Report r = net_change_f1(g, p, w);
    EXPECT_EQ(r.gold, 2u);
    EXPECT_EQ(r.predicted, 2u);
    EXPECT_EQ(r.matched, 1u);
}

TEST(NetChangeF1, IllegalPredictedStepsAreSkippedAndCounted) {
    std::vector<BuildAction> g = {BuildAction::place(Color::Red, {5, 0, 5}), BuildAction::stop()};
    std::vector<BuildAction> p = {BuildAction::place(Color::Red, {5, 3, 5}), BuildAction::remove({1, 0, 1}),
                                  BuildAction::place(Color::Red, {5, 0, 5}), BuildAction::stop()};
    F1Report r = net_change_f1(g, p, WorldState{});
    EXPECT_EQ(r.illegal_skipped, 2u);
    EXPECT_EQ(r.f1(), 1.0);
}

TEST(NetChangeF1, MatchesBruteForceOnRandomPairs) {
    std::mt19937_64 rng(2024);
    std::size_t nontrivial = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        WorldState w0 = random_initial(rng);
        auto gold = random_sequence(w0, rng);
        // half the time the prediction is an edit of the gold sequence
        auto pred = random_sequence(w0, rng);
        if (trial % 2 == 0 && gold.size() > 1) {
            pred = gold;
            pred.erase(pred.begin() + static_cast<std::ptrdiff_t>(rng() % (pred.size() - 1)));
        }
        F1Report r = net_change_f1(gold, pred, w0);
        Counts b = brute_score(w0, gold, pred);
        ASSERT_EQ(r.matched, b.matched) << "trial " << trial;
        ASSERT_EQ(r.predicted, b.predicted) << "trial " << trial;
        ASSERT_EQ(r.gold, b.gold) << "trial " << trial;
        nontrivial += r.matched > 0 && r.matched < r.gold;
    }
    EXPECT_GT(nontrivial, 50u);
}

TEST(NetChangeF1, OrderInsideASequenceDoesNotMatter) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 300; ++trial) {
        WorldState w0 = random_initial(rng);
        auto gold = random_sequence(w0, rng);
        auto pred = random_sequence(w0, rng);
        auto shuffled = pred;
        std::shuffle(shuffled.begin(), shuffled.end() - 1, rng);
        // only compare when both orders replay without skips
        if (replay_skipping_illegal(w0, pred).second != 0 || replay_skipping_illegal(w0, shuffled).second != 0) continue;
        EXPECT_EQ(net_change_f1(gold, pred, w0).f1(), net_change_f1(gold, shuffled, w0).f1());
    }
}

TEST(NetChangeF1, PlaceThenRemoveCancels) {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 300; ++trial) {
        WorldState w0 = random_initial(rng);
        auto gold = random_sequence(w0, rng);
        auto pred = random_sequence(w0, rng);
        WorldState end = replay_skipping_illegal(w0, pred).first;
        auto cells = feasible_placements(end);
        Coord p = cells[rng() % cells.size()];
        auto extended = pred;
        extended.insert(extended.end() - 1, {BuildAction::place(Color::Purple, p), BuildAction::remove(p)});
        F1Report a = net_change_f1(gold, pred, w0), b = net_change_f1(gold, extended, w0);
        EXPECT_EQ(a.f1(), b.f1());
        EXPECT_EQ(a.matched, b.matched);
        EXPECT_EQ(a.predicted, b.predicted);
    }
}

TEST(AskMetrics, HandTally) {
    using L = ActionTypeLabel;
    ConfusionMatrix m = ask_metrics(std::vector<L>{L::Execution, L::Ask, L::Others, L::Ask},
                                    std::vector<L>{L::Execution, L::Execution, L::Others, L::Ask});
    EXPECT_EQ(m.counts[0][0], 1u);
    EXPECT_EQ(m.counts[1][0], 1u);
    EXPECT_EQ(m.counts[1][1], 1u);
    EXPECT_EQ(m.counts[2][2], 1u);
    EXPECT_EQ(m.accuracy(), 0.75);
    EXPECT_EQ(m.class_accuracy(L::Ask), 0.5);
    EXPECT_EQ(m.row_sum(L::Ask), 2u);
}

TEST(AskMetrics, AllCorrectIsIdentityPatterned) {
    auto m = ask_metrics(std::vector<std::string>{"execution", "ask", "others"},
                         std::vector<std::string>{"execution", "ask", "others"});
    for (std::size_t g = 0; g < 3; ++g)
        for (std::size_t p = 0; p < 3; ++p) EXPECT_EQ(m.counts[g][p], g == p ? 1u : 0u);
    EXPECT_EQ(m.accuracy(), 1.0);
}

TEST(AskMetrics, RowSumsIgnorePredictions) {
    using L = ActionTypeLabel;
    std::mt19937_64 rng(8);
    std::vector<L> gold(200);
    for (auto& g : gold) g = static_cast<L>(rng() % 3);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<L> pred(200);
        for (auto& p : pred) p = static_cast<L>(rng() % 3);
        ConfusionMatrix m = ask_metrics(gold, pred);
        for (L l : {L::Execution, L::Ask, L::Others}) {
            EXPECT_EQ(m.row_sum(l), static_cast<std::size_t>(std::count(gold.begin(), gold.end(), l)));
        }
    }
}

TEST(AskMetrics, Errors) {
    EXPECT_THROW(ask_metrics(std::vector<std::string>{"ask"}, std::vector<std::string>{"maybe"}), DataError);
    EXPECT_THROW(ask_metrics(std::vector<std::string>{"ask"}, std::vector<std::string>{}), DimensionError);
}

TEST(Report, OracleRecordsScorePerfectly) {
    auto samples = synth_generate(30, 4);
    std::vector<PredictionRecord> recs;
    for (const auto& s : samples) {
        PredictionRecord r;
        r.sample_id = s.id;
        r.gold_label = r.predicted_label = s.label;
        r.initial_world = s.world;
        r.gold_actions = r.actions = s.gold_actions;
        recs.push_back(r);
    }
    EvalReport rep = score_records(recs, "joint");
    EXPECT_EQ(rep.confusion->accuracy(), 1.0);
    EXPECT_EQ(rep.building->f1(), 1.0);
    std::string table = format_report(rep);
    EXPECT_NE(table.find("Precision"), std::string::npos);
    EXPECT_NE(table.find("Overall"), std::string::npos);
    EXPECT_NE(table.find("100.00"), std::string::npos);
}

TEST(Report, DumpedLogRescoresIdentically) {
    // Random joint model on synthetic samples; the dumped log is re-read
    // and scored by the brute-force scorer straight from its JSON.
    auto samples = synth_generate(10, 11);
    BuilderModel m = BuilderModel::create(askbuild::testing::tiny_config(), TaskSpec::joint(),
                                          askbuild::testing::synth_vocab(), 3);
    std::vector<PredictionRecord> log;
    EvalReport rep = evaluate_model(m, samples, {8, false}, &log);
    ASSERT_EQ(log.size(), 10u);

    std::stringstream dumped;
    for (const auto& r : log) dumped << r.to_json().dump() << "\n";
    std::string text = dumped.str();
    auto back = read_prediction_log(dumped);
    EXPECT_EQ(score_records(back, "joint").to_json(), rep.to_json());

    std::istringstream lines(text);
    std::string line;
    Counts total;
    std::size_t agree = 0, n = 0;
    while (std::getline(lines, line)) {
        auto j = nlohmann::json::parse(line);
        ++n;
        agree += j["gold_label"] == j["predicted_label"];
        if (j["gold_label"] != "execution") continue;
        std::vector<BuildAction> hist;
        for (const auto& a : j["initial_world"]["action_history"]) hist.push_back(action_from_json(a));
        WorldState w0 = world_from_json(j["initial_world"], hist);
        std::vector<BuildAction> g, p;
        for (const auto& a : j["gold_actions"]) g.push_back(action_from_json(a));
        for (const auto& a : j["actions"]) p.push_back(action_from_json(a));
        Counts c = brute_score(w0, g, p);
        total.matched += c.matched;
        total.predicted += c.predicted;
        total.gold += c.gold;
    }
    EXPECT_EQ(rep.building->matched, total.matched);
    EXPECT_EQ(rep.building->predicted, total.predicted);
    EXPECT_EQ(rep.building->gold, total.gold);
    EXPECT_EQ(rep.confusion->accuracy(), static_cast<double>(agree) / static_cast<double>(n));
}

TEST(Report, MalformedLogIsDataError) {
    std::istringstream in("{\"sample_id\": \"x\"}\n");
    EXPECT_THROW(read_prediction_log(in), DataError);
    std::istringstream junk("not json\n");
    EXPECT_THROW(read_prediction_log(junk), DataError);
}
