#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "alora/autodiff.hpp"
#include "alora/checkpoint.hpp"
#include "alora/harness.hpp"
#include "alora/ops.hpp"

using namespace alora;
namespace fs = std::filesystem;

namespace {

struct PrecisionF64 {
    PrecisionF64() { set_precision(Precision::f64); }
};

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("alora_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

RunConfig small_config(const fs::path& out) {
    RunConfig c;
    c.model.layers = 1;
    c.model.d = 16;
    c.model.heads = 2;
    c.model.d_ff = 32;
    c.model.vocab = 8;
    c.model.max_seq_len = 10;
    c.task.vocab = 8;
    c.task.seq_len = 9;
    c.task.train_size = 64;
    c.task.val_size = 32;
    c.task.test_size = 16;
    c.allocator.r_target = 12;
    c.allocator.k1 = 1;
    c.allocator.k2 = 1;
    c.allocator.n_a = 1;
    c.allocator.r1 = 1;
    c.allocator.val_batch_size = 8;
    c.batch_size = 8;
    c.ga.mode = GAMode::off;
    c.precision = Precision::f64;
    c.seed = 11;
    c.out_dir = out.string();
    return c;
}

}  // namespace

TEST_CASE_FIXTURE(PrecisionF64, "task generation is deterministic and well-formed") {
    TaskSpec spec;
    spec.vocab = 16;
    spec.seq_len = 11;
    spec.train_size = 8;
    spec.val_size = 8;
    spec.test_size = 8;
    spec.seed = 42;
    Dataset a = gen_task(spec);
    Dataset b = gen_task(spec);
    for (size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train[i].tokens == b.train[i].tokens);
        CHECK(a.train[i].target_mask == b.train[i].target_mask);
    }
    spec.seed = 43;
    Dataset c = gen_task(spec);
    CHECK(a.train[0].tokens != c.train[0].tokens);

    // copy layout: [x, SEP, x] with SEP = vocab-1 and loss on the echo
    const int sep = 15;
    for (const Sequence& s : a.train) {
        const size_t n = (s.tokens.size() - 1) / 2;
        CHECK(s.tokens[n] == sep);
        for (size_t t = 0; t < n; ++t) {
            CHECK(s.tokens[t] == s.tokens[n + 1 + t]);
            CHECK(s.tokens[t] < sep);
            CHECK(s.target_mask[t] == 0.0);
            CHECK(s.target_mask[n + 1 + t] == 1.0);
        }
        CHECK(s.target_mask[n] == 0.0);
    }

    spec.kind = TaskKind::reverse;
    Dataset r = gen_task(spec);
    for (const Sequence& s : r.train) {
        const size_t n = (s.tokens.size() - 1) / 2;
        for (size_t t = 0; t < n; ++t) {
            CHECK(s.tokens[t] == s.tokens[s.tokens.size() - 1 - t]);
        }
    }

    spec.kind = TaskKind::modular_add;
    Dataset msum = gen_task(spec);
    for (const Sequence& s : msum.train) {
        // [x digits, SEP, y digits, SEP, (x+y) mod base^k digits], big-endian
        const size_t k = (s.tokens.size() - 2) / 3;
        const int base = 15;
        CHECK(s.tokens[k] == sep);
        CHECK(s.tokens[2 * k + 1] == sep);
        long long x = 0, y = 0, z = 0, mod = 1;
        for (size_t i = 0; i < k; ++i) {
            x = x * base + s.tokens[i];
            y = y * base + s.tokens[k + 1 + i];
            z = z * base + s.tokens[2 * k + 2 + i];
            mod *= base;
        }
        CHECK(z == (x + y) % mod);
    }
}

TEST_CASE_FIXTURE(PrecisionF64, "task spec rejection") {
    TaskSpec spec;
    spec.vocab = 3;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    spec = TaskSpec{};
    spec.seq_len = 2;  // no room for payload + separator + payload
    CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE_FIXTURE(PrecisionF64, "run config rejection names the offending field") {
    TempDir tmp;
    RunConfig c = small_config(tmp.path);
    c.task.vocab = 16;  // mismatch with model.vocab = 8
    try {
        c.validate();
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("vocab") != std::string::npos);
    }
    c = small_config(tmp.path);
    c.warmup_fraction = 2.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_config(tmp.path);
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE_FIXTURE(PrecisionF64, "config file loading rejects unknown fields") {
    TempDir tmp;
    fs::path cfg = tmp.path / "run.json";
    {
        std::ofstream f(cfg);
        f << R"({"task": {"kind": "copy"}, "seed": 3})";
    }
    RunConfig c = load_run_config(cfg.string());
    CHECK(c.seed == 3);
    CHECK(c.task.seed == 3);  // run seed drives the task streams
    {
        std::ofstream f(cfg);
        f << R"({"task": {"knd": "copy"}})";
    }
    try {
        load_run_config(cfg.string());
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("task.knd") != std::string::npos);
    }
    {
        std::ofstream f(cfg);
        f << R"({"precision": "f16"})";
    }
    CHECK_THROWS_AS(load_run_config(cfg.string()), ConfigError);
    CHECK_THROWS_AS(load_run_config((tmp.path / "missing.json").string()), IoError);
}

TEST_CASE_FIXTURE(PrecisionF64, "checkpoint round-trip is bitwise") {
    TempDir tmp;
    Rng rng(77);
    ModelConfig mc;
    mc.layers = 1;
    mc.d = 16;
    mc.heads = 2;
    mc.d_ff = 32;
    mc.vocab = 8;
    mc.max_seq_len = 10;
    SuperNetwork model = build_supernetwork(mc, 12, rng);
    for (auto* a : model.all_adapters()) {
        for (auto& v : a->w_b.mutable_data()) v = rng.normal(0.0, 0.3);
        for (auto& v : a->gate_logits.mutable_data()) v = rng.normal(0.0, 0.2);
    }
    prune_rank(*model.find_adapter("b0.wq"), 1);

    fs::path ckpt = tmp.path / "model.bin";
    save_checkpoint(ckpt.string(), model);
    SuperNetwork loaded = load_checkpoint(ckpt.string());

    CHECK(loaded.config.d == 16);
    CHECK(loaded.total_active_ranks() == model.total_active_ranks());
    CHECK(loaded.find_adapter("b0.wq")->gate_state[1] == GateState::Pruned);

    TaskSpec spec;
    spec.vocab = 8;
    spec.seq_len = 9;
    spec.train_size = 4;
    spec.val_size = 4;
    spec.test_size = 8;
    spec.seed = 5;
    Batch test = gen_task(spec).test;
    NoGradGuard ng;
    Tensor a = model.forward_logits(test);
    Tensor b = loaded.forward_logits(test);
    for (int64_t i = 0; i < a.size(); ++i) {
        CHECK(a.data()[static_cast<size_t>(i)] ==
              b.data()[static_cast<size_t>(i)]);  // bitwise
    }
    CHECK_THROWS_AS(load_checkpoint((tmp.path / "nope.bin").string()), IoError);
}

TEST_CASE_FIXTURE(PrecisionF64, "train_eval writes every artifact and is deterministic") {
    TempDir tmp1, tmp2;
    RunConfig c = small_config(tmp1.path);
    RunReport r1 = train_eval(c);
    CHECK(fs::exists(r1.checkpoint_path));
    CHECK(fs::exists(r1.history_json_path));
    CHECK(fs::exists(r1.history_csv_path));
    CHECK(fs::exists(r1.metrics_csv_path));
    CHECK(fs::exists(tmp1.path / "report.json"));
    CHECK(r1.active_rank_total <= 12);
    CHECK(r1.rank_map.size() == 6);

    c.out_dir = tmp2.path.string();
    RunReport r2 = train_eval(c);
    CHECK(r1.test_ce == r2.test_ce);  // bitwise rerun determinism
    CHECK(r1.test_exact_match == r2.test_exact_match);
    CHECK(r1.rank_map == r2.rank_map);

    // eval on the saved checkpoint reproduces the in-memory metrics
    RunReport ev = eval_checkpoint(r1.checkpoint_path, c);
    CHECK(ev.test_ce == r1.test_ce);
    CHECK(ev.test_exact_match == r1.test_exact_match);
}

TEST_CASE_FIXTURE(PrecisionF64, "allocate resumes a checkpoint for extra rounds") {
    TempDir tmp1, tmp2;
    RunConfig c = small_config(tmp1.path);
    RunReport r1 = train_eval(c);
    c.out_dir = tmp2.path.string();
    c.allocator.n_a = 1;
    RunReport r2 = allocate_resume(r1.checkpoint_path, c, 2);
    CHECK(fs::exists(r2.checkpoint_path));
    CHECK(r2.active_rank_total <= 12);
    std::ifstream f(r2.history_json_path);
    std::string json((std::istreambuf_iterator<char>(f)),
                     std::istreambuf_iterator<char>());
    CHECK(json.find("\"rounds\"") != std::string::npos);
    CHECK_THROWS_AS(allocate_resume(r1.checkpoint_path, c, 0), ConfigError);
}

TEST_CASE_FIXTURE(PrecisionF64, "report renders allocation tables and histograms") {
    TempDir tmp;
    RunConfig c = small_config(tmp.path);
    c.allocator.n_a = 4;
    c.allocator.r_target = 12;
    c.allocator.r1 = 1;
    RunReport r = train_eval(c);
    std::string tables = report_tables(r.history_json_path, r.metrics_csv_path);
    // 4-round history: init + 4 allocation snapshot lines
    size_t lines = 0;
    std::istringstream is(tables.substr(0, tables.find("importance")));
    std::string line;
    while (std::getline(is, line)) {
        if (line.find("init") == 0 || line.find("   ") == 0) {
        }
        if (!line.empty()) ++lines;
    }
    CHECK(tables.find("init") != std::string::npos);
    CHECK(tables.find("b0.wq") != std::string::npos);
    CHECK(tables.find("importance score distribution") != std::string::npos);
    CHECK(tables.find("gradient angle histogram") != std::string::npos);
    CHECK_THROWS_AS(report_tables((tmp.path / "missing.json").string()), IoError);

    // empty history: initial allocation only
    fs::path empty = tmp.path / "empty.json";
    {
        std::ofstream f(empty);
        f << R"({"initial_rank_per_module": 2, "modules": ["b0.wq"], "rounds": []})";
    }
    std::string t2 = report_tables(empty.string());
    CHECK(t2.find("init") != std::string::npos);
    CHECK(t2.find("b0.wq") != std::string::npos);
}

TEST_CASE_FIXTURE(PrecisionF64, "selftest suite passes") {
    std::ostringstream os;
    CHECK(run_selftest(os) == 0);
    CHECK(os.str().find("[FAIL]") == std::string::npos);
}
