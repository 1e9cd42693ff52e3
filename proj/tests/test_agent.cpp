#include <gtest/gtest.h>

#include <random>
#include <thread>

#include "askbuild/agent.hpp"
#include "askbuild/training.hpp"
#include "fixtures.hpp"
#include "testing.hpp"

using namespace askbuild;

namespace {

SlotPrediction uniform_prediction(std::size_t types) {
    return {Tensor({kNumCells}, 1.0 / kNumCells), Tensor({kNumColors}, 1.0 / kNumColors), Tensor({types}, 1.0 / types)};
}

SlotPrediction peaked_type(const TaskSpec& task, TypeClass c) {
    SlotPrediction p = uniform_prediction(task.num_classes());
    p.type_probs = Tensor({task.num_classes()}, 0.0);
    p.type_probs[*task.index_of(c)] = 1.0;
    return p;
}

SlotPrediction random_prediction(std::size_t types, std::mt19937_64& rng) {
    auto normalized = [&](std::size_t n) {
        Tensor t = askbuild::testing::random_tensor({n}, rng, 0.0, 1.0);
        double s = 0;
        for (double v : t.data()) s += v;
        for (double& v : t.data()) v /= s;
        return t;
    };
    return {normalized(kNumCells), normalized(kNumColors), normalized(types)};
}

WorldState random_world(std::mt19937_64& rng, int max_blocks = 15) {
    WorldState w;
    for (int k = static_cast<int>(rng() % (max_blocks + 1)); k > 0; --k) {
        auto cells = feasible_placements(w);
        w = apply_action(w, BuildAction::place(static_cast<Color>(rng() % 6), cells[rng() % cells.size()]));
    }
    return w;
}

// Exhaustive oracle: scan every cell and every class with is_legal.
std::optional<BuildAction> oracle_decode(const SlotPrediction& p, const WorldState& w, const TaskSpec& task) {
    std::vector<std::size_t> order(task.num_classes());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return p.type_probs[a] > p.type_probs[b]; });
    std::size_t color = 0;
    for (std::size_t c = 1; c < kNumColors; ++c)
        if (p.color_probs[c] > p.color_probs[color]) color = c;
    for (std::size_t idx : order) {
        TypeClass t = task.classes[idx];
        if (t == TypeClass::Stop) return BuildAction::stop();
        if (!is_build_class(t)) return std::nullopt;
        std::optional<std::size_t> best;
        for (std::size_t i = 0; i < kNumCells; ++i) {
            Coord at = Coord::from_index(i);
            BuildAction a = t == TypeClass::Placement ? BuildAction::place(static_cast<Color>(color), at) : BuildAction::remove(at);
            if (!is_legal(w, a)) continue;
            if (!best || p.location_probs[i] > p.location_probs[*best]) best = i;
        }
        if (!best) continue;
        Coord at = Coord::from_index(*best);
        return t == TypeClass::Placement ? BuildAction::place(static_cast<Color>(color), at) : BuildAction::remove(at);
    }
    return std::nullopt;
}

Predictor constant_predictor(const TaskSpec& task, SlotPrediction p) {
    return {task, [p](const Dialogue&, const WorldState&) { return p; }};
}

}  // namespace

TEST(Decode, PeakedStopGivesStop) {
    TaskSpec t = TaskSpec::building();
    DecodedStep d = decode_action(peaked_type(t, TypeClass::Stop), WorldState{}, t);
    EXPECT_EQ(d.type, TypeClass::Stop);
    EXPECT_EQ(*d.action, BuildAction::stop());
    EXPECT_EQ(d.type_prob, 1.0);
}

TEST(Decode, InfeasibleTopLocationIsPassedOver) {
    TaskSpec t = TaskSpec::building();
    SlotPrediction p = peaked_type(t, TypeClass::Placement);
    Coord floating{3, 4, 3}, ground{7, 0, 2};
    p.location_probs[floating.index()] = 0.5;
    p.location_probs[ground.index()] = 0.2;
    p.color_probs[static_cast<std::size_t>(Color::Purple)] = 0.9;
    DecodedStep d = decode_action(p, WorldState{}, t);
    EXPECT_EQ(*d.action, BuildAction::place(Color::Purple, ground));
}

TEST(Decode, TiesGoToTheLowestFlatIndex) {
    TaskSpec t = TaskSpec::building();
    SlotPrediction p = peaked_type(t, TypeClass::Placement);
    DecodedStep d = decode_action(p, WorldState{}, t);
    EXPECT_EQ(d.action->location->index(), feasible_placements(WorldState{}).front().index());
    EXPECT_EQ(d.action->color, Color::Red);
}

TEST(Decode, EmptyFeasibleSetFallsBackToNextType) {
    TaskSpec t = TaskSpec::building();
    SlotPrediction p = uniform_prediction(3);
    p.type_probs[*t.index_of(TypeClass::Removal)] = 0.6;
    p.type_probs[*t.index_of(TypeClass::Placement)] = 0.3;
    p.type_probs[*t.index_of(TypeClass::Stop)] = 0.1;
    DecodedStep d = decode_action(p, WorldState{}, t);
    EXPECT_EQ(d.type, TypeClass::Placement);
    ASSERT_EQ(d.fallbacks.size(), 1u);
    EXPECT_EQ(d.fallbacks[0], TypeClass::Removal);
}

TEST(Decode, MatchesExhaustiveOracleOnRandomInputs) {
    std::mt19937_64 rng(31);
    for (const TaskSpec& t : {TaskSpec::building(), TaskSpec::joint()}) {
        for (int trial = 0; trial < 300; ++trial) {
            WorldState w = random_world(rng);
            SlotPrediction p = random_prediction(t.num_classes(), rng);
            DecodedStep d = decode_action(p, w, t);
            auto expect = oracle_decode(p, w, t);
            if (expect) {
                ASSERT_TRUE(d.action) << trial;
                EXPECT_EQ(*d.action, *expect) << trial;
            } else {
                EXPECT_FALSE(is_build_class(d.type));
                EXPECT_FALSE(d.action);
            }
            DecodedStep again = decode_action(p, w, t);
            EXPECT_EQ(again.action, d.action);
            EXPECT_EQ(again.type, d.type);
        }
    }
}

TEST(Decode, WrongSizesAreDimensionErrors) {
    EXPECT_THROW(decode_action(uniform_prediction(5), WorldState{}, TaskSpec::building()), DimensionError);
}

TEST(Rollout, StopModelBuildsNothing) {
    TaskSpec t = TaskSpec::building();
    Rollout r = rollout(constant_predictor(t, peaked_type(t, TypeClass::Stop)), WorldState{}, {});
    EXPECT_EQ(r.actions, (std::vector<BuildAction>{BuildAction::stop()}));
    EXPECT_EQ(r.final_world, WorldState{});
}

TEST(Rollout, CapAppendsStop) {
    TaskSpec t = TaskSpec::building();
    Rollout r = rollout(constant_predictor(t, peaked_type(t, TypeClass::Placement)), WorldState{}, {}, 3);
    ASSERT_EQ(r.actions.size(), 4u);
    EXPECT_EQ(r.actions.back(), BuildAction::stop());
    EXPECT_EQ(r.final_world.blocks().size(), 3u);
    EXPECT_THROW(rollout(constant_predictor(t, peaked_type(t, TypeClass::Placement)), WorldState{}, {}, 0), ConfigError);
}

TEST(Rollout, RandomModelsStayLegalAndBounded) {
    std::mt19937_64 rng(41);
    for (const TaskSpec& t : {TaskSpec::building(), TaskSpec::joint()}) {
        for (int trial = 0; trial < 100; ++trial) {
            WorldState w0 = random_world(rng);
            std::size_t cap = 1 + rng() % 12;
            std::vector<WorldState> seen;
            Predictor p{t, [&](const Dialogue&, const WorldState& w) {
                            seen.push_back(w);
                            return random_prediction(t.num_classes(), rng);
                        }};
            Rollout r = rollout(p, w0, {}, cap);
            ASSERT_LE(r.actions.size(), cap + 1);
            EXPECT_EQ(r.actions.back(), BuildAction::stop());
            // replay through the transition function; throws if illegal
            EXPECT_EQ(apply_sequence(w0, r.actions), r.final_world);
            // each step sees the world produced by the previous actions
            WorldState w = w0;
            for (std::size_t i = 0; i + 1 < r.actions.size(); ++i) {
                EXPECT_EQ(seen[i], w);
                w = apply_action(w, r.actions[i]);
            }
        }
    }
}

TEST(Turn, AskTaskReportsCategoryWithoutBuilding) {
    TaskSpec t = TaskSpec::ask();
    AgentState st;
    AgentDecision d = turn(constant_predictor(t, peaked_type(t, TypeClass::Execution)), st, "place a red block");
    EXPECT_EQ(d.kind, AgentDecision::Kind::Execute);
    EXPECT_EQ(d.actions, (std::vector<BuildAction>{BuildAction::stop()}));
    EXPECT_EQ(st.dialogue.size(), 1u);
    d = turn(constant_predictor(t, peaked_type(t, TypeClass::Ask)), st, "place a block");
    EXPECT_EQ(d.kind, AgentDecision::Kind::Ask);
    EXPECT_EQ(st.dialogue.size(), 2u);
}

// A joint model memorizes twelve samples; decisions on them are then checked.
class OverfitJoint : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        data_ = askbuild::testing::balanced_set(4, 77);
        for (auto& s : data_) {
            if (s.label == ActionTypeLabel::Others) s.dialogue.back().text = "hello";
        }
        Sample red;
        red.id = "red";
        red.dialogue = {{Speaker::Architect, "place a red block at 5 0 5", std::nullopt, std::nullopt}};
        red.gold_actions = {BuildAction::place(Color::Red, {5, 0, 5}), BuildAction::stop()};
        data_.push_back(red);
        TrainConfig tc = askbuild::testing::overfit_train_config(60, 3);
        tc.balance_classes = true;
        tc.eval_every = 20;
        auto r = train(data_, data_, TaskSpec::joint(), tc, askbuild::testing::tiny_config(), build_vocab(data_, 1));
        model_ = std::make_unique<BuilderModel>(r.last);
    }
    static void TearDownTestSuite() { model_.reset(); }

    static AgentDecision decide(const Sample& s, AgentState& st) {
        st.world = s.world;
        st.dialogue.assign(s.dialogue.begin(), s.dialogue.end() - 1);
        return turn(predictor_for(*model_), st, s.dialogue.back().text);
    }

    static inline std::vector<Sample> data_;
    static inline std::unique_ptr<BuilderModel> model_;
};

TEST_F(OverfitJoint, DecisionsFollowTheUtteranceKind) {
    for (const auto& s : data_) {
        AgentState st;
        AgentDecision d = decide(s, st);
        switch (s.label) {
            case ActionTypeLabel::Ask:
                EXPECT_EQ(d.kind, AgentDecision::Kind::Ask) << s.dialogue.back().text;
                EXPECT_EQ(st.world, s.world);
                break;
            case ActionTypeLabel::Others:
                EXPECT_EQ(d.kind, AgentDecision::Kind::Others) << s.dialogue.back().text;
                EXPECT_EQ(st.world, s.world);
                break;
            case ActionTypeLabel::Execution:
                EXPECT_EQ(d.kind, AgentDecision::Kind::Execute) << s.dialogue.back().text;
                EXPECT_GT(d.actions.size(), 1u);
                EXPECT_EQ(st.world, apply_sequence(s.world, d.actions));
                break;
        }
        EXPECT_GT(d.confidence, 0.5);
    }
}

TEST_F(OverfitJoint, RedBlockRolloutReproducesGoldChange) {
    const Sample& red = data_.back();
    AgentState st;
    AgentDecision d = decide(red, st);
    ASSERT_EQ(d.kind, AgentDecision::Kind::Execute);
    EXPECT_EQ(net_diff(red.world, st.world), net_diff(red.world, apply_sequence(red.world, red.gold_actions)));
}

TEST_F(OverfitJoint, SharedParametersAcrossThreads) {
    std::vector<SlotPrediction> results(4);
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < 4; ++i) {
        threads.emplace_back([&, i] { results[i] = model_->predict(data_[i].dialogue, data_[i].world); });
    }
    for (auto& t : threads) t.join();
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(results[i], model_->predict(data_[i].dialogue, data_[i].world));
}
