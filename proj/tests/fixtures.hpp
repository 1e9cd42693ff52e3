#pragma once

// Small configurations and synthetic corpora shared by the slower tests
// and the acceptance runner.

#include <vector>

#include "askbuild/corpus.hpp"
#include "askbuild/model.hpp"
#include "askbuild/synth.hpp"
#include "askbuild/training.hpp"

namespace askbuild::testing {

/// Small enough to memorize a few dozen samples in well under a minute.
inline ModelConfig tiny_config() {
    ModelConfig c;
    c.d_w = 16;
    c.d_c = 8;
    c.k = 2;
    c.n_text = 1;
    c.n_grid = 2;
    c.context_length = 24;
    c.dropout = 0.0;
    return c;
}

inline TrainConfig overfit_train_config(std::size_t epochs, std::uint64_t seed = 1) {
    TrainConfig t;
    t.adam.lr = 3e-3;
    t.batch_size = 2;
    t.epochs = epochs;
    t.seed = seed;
    return t;
}

/// `n` execution samples, all marked train.
inline std::vector<Sample> execution_set(std::size_t n, std::uint64_t seed) {
    GrammarConfig g;
    g.label_mix = {1, 0, 0};
    g.prior_turn_prob = 0.0;
    auto s = synth_generate(n, seed, g);
    for (auto& x : s) x.split = Split::Train;
    return s;
}

/// `per_class` samples of each label, all marked train.
inline std::vector<Sample> balanced_set(std::size_t per_class, std::uint64_t seed) {
    GrammarConfig g;
    g.round_robin_labels = true;
    g.prior_turn_prob = 0.0;
    auto s = synth_generate(3 * per_class, seed, g);
    for (auto& x : s) x.split = Split::Train;
    return s;
}

/// Covers every word the grammar can produce.
inline Vocabulary synth_vocab() {
    auto s = synth_generate(300, 0);
    for (auto& x : s) x.split = Split::Train;
    return build_vocab(s, 1);
}

}  // namespace askbuild::testing
