#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "circle/config.hpp"
#include "circle/trainer.hpp"

using namespace circle;

namespace {

struct Env {
    TaskDataset task;
    Vocabulary vocab;
    Checkpoint ckpt;

    explicit Env(std::size_t n = 60, std::uint64_t seed = 2, int d_model = 16) {
        task = generate_synthetic_corpus(Lang::Python, seed, n);
        std::vector<std::string> corpus;
        and_build(corpus);
        ModelConfig cfg;
        cfg.layers = 1;
        cfg.heads = 2;
        cfg.d_model = d_model;
        cfg.d_ff = 2 * d_model;
        cfg.dropout = 0.0;
        cfg.max_positions = 192;
        cfg.vocab_size = vocab.size();
        ckpt = init_checkpoint(cfg, vocab.hash(), seed + 7);
    }

    void and_build(std::vector<std::string>& corpus) {
        for (const auto& p : task.train) {
            PromptedExample pe = render_prompt(p);
            corpus.push_back(pe.source_text);
            corpus.push_back(pe.target_text);
        }
        vocab = build_vocab(corpus, 240);
    }

    TrainConfig cfg() const {
        TrainConfig tc;
        tc.max_epochs = 3;
        tc.patience = 2;
        tc.lr = 1e-3;
        tc.batch_size = 8;
        tc.n_per_task = 10;
        tc.total_cap = 40;
        tc.m = 5;
        tc.lambda = 10.0;
        tc.seed = 11;
        return tc;
    }
};

GenConfig tiny_gen() {
    GenConfig g;
    g.beam = 1;
    g.max_candidates = 1;
    g.max_len = 10;
    g.top_k = 3;
    g.top_p = 0.95;
    return g;
}

}  // namespace

TEST_CASE("lr=0 training is a parameter no-op") {
    Env env(30);
    TrainConfig tc = env.cfg();
    tc.lr = 0.0;
    tc.max_epochs = 1;
    tc.patience = 1;
    tc.continual_enabled = false;
    TrainTaskResult r = train_task(env.ckpt, env.task, {}, {}, env.vocab, tc);
    CHECK(r.checkpoint.params == env.ckpt.params);
}

TEST_CASE("continual off keeps the store empty and produces no snapshot") {
    Env env(40);
    TrainConfig tc = env.cfg();
    tc.continual_enabled = false;
    TrainTaskResult r = train_task(env.ckpt, env.task, {}, {}, env.vocab, tc);
    CHECK(r.store.sets.empty());
    CHECK(r.snapshots.empty());
}

TEST_CASE("continual on selects examples and refreshes the fisher anchor") {
    Env env(40);
    TrainConfig tc = env.cfg();
    TrainTaskResult r = train_task(env.ckpt, env.task, {}, {}, env.vocab, tc);
    REQUIRE(r.store.sets.size() == 1);
    CHECK(r.store.sets[0].entries.size() == tc.n_per_task);
    REQUIRE(r.snapshots.size() == 1);
    CHECK(r.snapshots[0].theta_ref == r.checkpoint.params);
    CHECK(r.snapshots[0].lambda == tc.lambda);
    for (double f : r.snapshots[0].fisher) REQUIRE(f >= 0.0);
}

TEST_CASE("empty training split is a configuration error") {
    Env env(20);
    TaskDataset empty = env.task;
    empty.train.clear();
    CHECK_THROWS_AS(train_task(env.ckpt, empty, {}, {}, env.vocab, env.cfg()), ConfigError);
}

TEST_CASE("early stopping restores a checkpoint at least as good as the start") {
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        Env env(80, seed);
        TrainConfig tc = env.cfg();
        tc.max_epochs = 6;
        tc.patience = 3;
        tc.seed = seed;
        tc.continual_enabled = false;
        double initial_val =
            circle::detail::validation_loss(env.ckpt, env.task, env.vocab, tc.prompt_enabled);
        TrainTaskResult r = train_task(env.ckpt, env.task, {}, {}, env.vocab, tc);
        double restored_val =
            circle::detail::validation_loss(r.checkpoint, env.task, env.vocab, tc.prompt_enabled);
        REQUIRE(restored_val <= initial_val + 1e-9);
        // restored equals the best recorded epoch
        double best = 1e300;
        for (const auto& e : r.epochs) best = std::min(best, e.val_loss);
        CHECK(restored_val == Catch::Approx(best).margin(1e-9));
    }
}

TEST_CASE("task 1 training is bitwise independent of the continual flag") {
    Env env(50);
    TrainConfig on = env.cfg();
    on.continual_enabled = true;
    TrainConfig off = env.cfg();
    off.continual_enabled = false;
    TrainTaskResult r_on = train_task(env.ckpt, env.task, {}, {}, env.vocab, on);
    TrainTaskResult r_off = train_task(env.ckpt, env.task, {}, {}, env.vocab, off);
    REQUIRE(r_on.checkpoint.params == r_off.checkpoint.params);
}

TEST_CASE("a single-task stream reduces to one eval row") {
    Env env(40);
    TaskStream stream;
    stream.tasks.push_back(env.task);
    ModelConfig mc = env.ckpt.config;
    mc.vocab_size = 240;
    TrainConfig tc = env.cfg();
    StreamRunResult r = run_stream(stream, mc, tc, tiny_gen(), true);
    REQUIRE(r.matrix.rows.size() == 1);
    CHECK(r.matrix.rows[0].after_task == 1);
    REQUIRE(r.matrix.rows[0].cells.size() == 1);
    CHECK(r.matrix.rows[0].cells[0].total == static_cast<int>(env.task.test.size()));
    CHECK(r.checkpoints.size() == 1);
}

TEST_CASE("a 4-task synthetic stream produces a lower-triangular matrix") {
    TaskStream stream;
    int id = 1;
    for (Lang lang : default_task_order())
        stream.tasks.push_back(generate_synthetic_corpus(lang, 31 + id, 40, id)), ++id;
    ModelConfig mc;
    mc.layers = 1;
    mc.heads = 2;
    mc.d_model = 16;
    mc.d_ff = 32;
    mc.dropout = 0.0;
    mc.max_positions = 192;
    mc.vocab_size = 240;
    TrainConfig tc;
    tc.max_epochs = 1;
    tc.patience = 1;
    tc.batch_size = 8;
    tc.n_per_task = 5;
    tc.total_cap = 20;
    tc.m = 3;
    tc.lambda = 1.0;
    tc.seed = 4;
    StreamRunResult r = run_stream(stream, mc, tc, tiny_gen(), true);
    REQUIRE(r.matrix.rows.size() == 4);
    for (int t = 1; t <= 4; ++t) {
        REQUIRE(r.matrix.rows[static_cast<std::size_t>(t - 1)].cells.size() ==
                static_cast<std::size_t>(t));
        for (int b = 1; b <= t; ++b) REQUIRE(r.matrix.cell(t, b) != nullptr);
        for (int b = t + 1; b <= 4; ++b) REQUIRE(r.matrix.cell(t, b) == nullptr);
    }
    // the replay store never exceeds its cap
    CHECK(r.store.total_entries() <= tc.total_cap);
}

TEST_CASE("identical config and seed reproduce the eval matrix exactly") {
    TaskStream stream;
    stream.tasks.push_back(generate_synthetic_corpus(Lang::Python, 51, 40, 1));
    stream.tasks.push_back(generate_synthetic_corpus(Lang::Java, 52, 40, 2));
    ModelConfig mc;
    mc.layers = 1;
    mc.heads = 2;
    mc.d_model = 16;
    mc.d_ff = 32;
    mc.dropout = 0.1;  // dropout must be seeded too
    mc.max_positions = 192;
    mc.vocab_size = 240;
    TrainConfig tc;
    tc.max_epochs = 2;
    tc.patience = 2;
    tc.batch_size = 8;
    tc.n_per_task = 6;
    tc.total_cap = 20;
    tc.m = 4;
    tc.lambda = 5.0;
    tc.seed = 99;
    StreamRunResult a = run_stream(stream, mc, tc, tiny_gen(), true);
    StreamRunResult b = run_stream(stream, mc, tc, tiny_gen(), true);
    CHECK(eval_matrix_to_json(a.matrix).dump() == eval_matrix_to_json(b.matrix).dump());
    REQUIRE(a.checkpoints.size() == b.checkpoints.size());
    for (std::size_t i = 0; i < a.checkpoints.size(); ++i)
        CHECK(a.checkpoints[i].params == b.checkpoints[i].params);
}

TEST_CASE("run_stream persists the documented artifact layout") {
    auto dir = std::filesystem::temp_directory_path() / "circle_trainer_tests" / "run";
    std::filesystem::remove_all(dir);
    TaskStream stream;
    stream.tasks.push_back(generate_synthetic_corpus(Lang::Python, 61, 40, 1));
    stream.tasks.push_back(generate_synthetic_corpus(Lang::Java, 62, 40, 2));
    ModelConfig mc;
    mc.layers = 1;
    mc.heads = 2;
    mc.d_model = 16;
    mc.d_ff = 32;
    mc.dropout = 0.0;
    mc.max_positions = 192;
    mc.vocab_size = 240;
    TrainConfig tc;
    tc.max_epochs = 1;
    tc.patience = 1;
    tc.batch_size = 8;
    tc.n_per_task = 5;
    tc.total_cap = 20;
    tc.m = 3;
    tc.lambda = 1.0;
    tc.seed = 7;
    run_stream(stream, mc, tc, tiny_gen(), true, dir.string());
    for (const char* f :
         {"vocab.txt", "eval_matrix.json", "eval_matrix.csv", "task_1/checkpoint.bin",
          "task_1/epochs.csv", "task_1/replay.jsonl", "task_1/replay.sidecar.jsonl",
          "task_1/fisher.bin", "task_1/candidates_task1.jsonl", "task_2/checkpoint.bin",
          "task_2/candidates_task1.jsonl", "task_2/candidates_task2.jsonl"}) {
        CAPTURE(f);
        REQUIRE(std::filesystem::exists(dir / f));
    }
    // checkpoint loads back against the persisted vocabulary
    Vocabulary v = Vocabulary::load((dir / "vocab.txt").string());
    Checkpoint c = load_checkpoint((dir / "task_2" / "checkpoint.bin").string(), v);
    CHECK(c.task_id == 2);
}

TEST_CASE("run config parsing and validation") {
    nlohmann::json j;
    j["seed"] = 3;
    j["model"] = {{"layers", 1}, {"heads", 2}, {"d_model", 16}, {"d_ff", 32},
                  {"dropout", 0.0}, {"max_positions", 128}, {"vocab_size", 200}};
    j["train"] = {{"max_epochs", 2}, {"batch_size", 4}};
    j["stream"] = nlohmann::json::array(
        {{{"task_id", 1}, {"lang", "python"}, {"generator", {{"seed", 1}, {"n", 30}}}}});
    RunConfig rc = parse_run_config(j);
    CHECK(rc.train.max_epochs == 2);
    CHECK(rc.model.d_model == 16);
    CHECK(rc.stream.size() == 1);

    SECTION("continual off forbids replay caps") {
        j["train"]["continual"] = false;
        j["train"]["n_per_task"] = 10;
        CHECK_THROWS_AS(parse_run_config(j), ValidationError);
    }
    SECTION("task ids must be 1..k") {
        j["stream"][0]["task_id"] = 2;
        CHECK_THROWS_AS(parse_run_config(j), ValidationError);
    }
    SECTION("stream tasks need a source") {
        j["stream"][0].erase("generator");
        CHECK_THROWS_AS(parse_run_config(j), ValidationError);
    }
}
