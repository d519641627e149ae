#include "alora/task.hpp"

#include "alora/errors.hpp"

namespace alora {

namespace {

int64_t payload_len(const TaskSpec& spec) {
    switch (spec.kind) {
        case TaskKind::copy:
        case TaskKind::reverse:
            // n payload + SEP + n target
            return (spec.seq_len - 1) / 2;
        case TaskKind::modular_add:
            // k + SEP + k + SEP + k
            return (spec.seq_len - 2) / 3;
    }
    return 0;
}

int64_t used_len(const TaskSpec& spec, int64_t n) {
    return spec.kind == TaskKind::modular_add ? 3 * n + 2 : 2 * n + 1;
}

Sequence gen_sequence(const TaskSpec& spec, Rng& rng) {
    const int sep = static_cast<int>(spec.vocab - 1);
    const int64_t n = payload_len(spec);
    Sequence s;
    s.tokens.reserve(static_cast<size_t>(spec.seq_len));
    s.target_mask.assign(static_cast<size_t>(used_len(spec, n)), 0.0);

    if (spec.kind == TaskKind::modular_add) {
        const int64_t base = spec.vocab - 1;  // digits 0..base-1, SEP on top
        std::vector<int> x(static_cast<size_t>(n)), y(static_cast<size_t>(n));
        for (auto& d : x) d = static_cast<int>(rng.uniform_int(0, base - 1));
        for (auto& d : y) d = static_cast<int>(rng.uniform_int(0, base - 1));
        // Big-endian digit addition of (X + Y) mod base^n.
        std::vector<int> z(static_cast<size_t>(n));
        int carry = 0;
        for (int64_t i = n - 1; i >= 0; --i) {
            int v = x[static_cast<size_t>(i)] + y[static_cast<size_t>(i)] + carry;
            z[static_cast<size_t>(i)] = v % static_cast<int>(base);
            carry = v / static_cast<int>(base);
        }
        for (int d : x) s.tokens.push_back(d);
        s.tokens.push_back(sep);
        for (int d : y) s.tokens.push_back(d);
        s.tokens.push_back(sep);
        for (int d : z) s.tokens.push_back(d);
    } else {
        std::vector<int> x(static_cast<size_t>(n));
        for (auto& d : x) d = static_cast<int>(rng.uniform_int(0, spec.vocab - 2));
        for (int d : x) s.tokens.push_back(d);
        s.tokens.push_back(sep);
        if (spec.kind == TaskKind::copy) {
            for (int d : x) s.tokens.push_back(d);
        } else {
            for (auto it = x.rbegin(); it != x.rend(); ++it) s.tokens.push_back(*it);
        }
    }
    // Target region: everything after the last separator.
    for (size_t t = s.tokens.size() - static_cast<size_t>(n); t < s.tokens.size();
         ++t) {
        s.target_mask[t] = 1.0;
    }
    return s;
}

Batch gen_split(const TaskSpec& spec, int64_t count, const std::string& tag) {
    Rng rng = Rng::derive(spec.seed, "task." + tag);
    Batch out;
    out.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) out.push_back(gen_sequence(spec, rng));
    return out;
}

}  // namespace

void TaskSpec::validate() const {
    if (vocab < 4) throw ConfigError("TaskSpec.vocab must be >= 4");
    if (payload_len(*this) < 1) {
        throw ConfigError("TaskSpec.seq_len " + std::to_string(seq_len) +
                          " too short for this task kind");
    }
    if (train_size < 1 || val_size < 1 || test_size < 1) {
        throw ConfigError("TaskSpec split sizes must be positive");
    }
}

Dataset gen_task(const TaskSpec& spec) {
    spec.validate();
    Dataset d;
    d.spec = spec;
    d.train = gen_split(spec, spec.train_size, "train");
    d.val = gen_split(spec, spec.val_size, "val");
    d.test = gen_split(spec, spec.test_size, "test");
    return d;
}

Batch sample_batch(const Batch& split, int64_t size, Rng& rng) {
    if (split.empty()) throw ContractError("sample_batch: empty split");
    Batch out;
    out.reserve(static_cast<size_t>(size));
    for (int64_t i = 0; i < size; ++i) {
        out.push_back(split[static_cast<size_t>(
            rng.uniform_int(0, static_cast<int64_t>(split.size()) - 1))]);
    }
    return out;
}

}  // namespace alora
