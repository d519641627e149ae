#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "alora/rng.hpp"
#include "alora/transformer.hpp"

namespace alora {

enum class TaskKind { copy, reverse, modular_add };

struct TaskSpec {
    TaskKind kind = TaskKind::copy;
    int64_t vocab = 32;
    int64_t seq_len = 24;
    int64_t train_size = 4608;
    int64_t val_size = 512;
    int64_t test_size = 256;
    uint64_t seed = 0;

    void validate() const;
};

struct Dataset {
    TaskSpec spec;
    Batch train;
    Batch val;
    Batch test;
};

// Deterministic prompt/target sequences. Layout (SEP = vocab-1, payload
// tokens below it):
//   copy:        [x_1..x_n, SEP, x_1..x_n]
//   reverse:     [x_1..x_n, SEP, x_n..x_1]
//   modular_add: [x digits, SEP, y digits, SEP, (x+y) mod base^k digits]
// Loss/EM run on the region after the last separator only. Splits come from
// distinct seeded streams, so they are disjoint by construction.
Dataset gen_task(const TaskSpec& spec);

// Random batch (with replacement) from a split; seeded and reproducible.
Batch sample_batch(const Batch& split, int64_t size, Rng& rng);

}  // namespace alora
