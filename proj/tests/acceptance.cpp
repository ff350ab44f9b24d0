// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// criterion fails. Criteria run the pinned tolerances; nothing is calibrated
// at runtime.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "circle/config.hpp"
#include "circle/eval.hpp"
#include "circle/ewc.hpp"
#include "circle/generator.hpp"
#include "circle/model.hpp"
#include "circle/replay.hpp"
#include "circle/rerepair.hpp"
#include "circle/tokenizer.hpp"
#include "circle/trainer.hpp"

namespace fs = std::filesystem;
using namespace circle;

namespace {

struct Criterion {
    int number;
    std::string name;
    std::function<void()> body;
};

struct Failure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require(bool cond, const std::string& msg) {
    if (!cond) throw Failure(msg);
}

fs::path out_root() {
    fs::path dir = fs::current_path() / "acceptance_out";
    fs::create_directories(dir);
    return dir;
}

// shared toy fixture: python task + trained-ish vocabulary and model
struct Toy {
    TaskDataset task;
    Vocabulary vocab;
    Checkpoint ckpt;

    Toy(std::size_t pairs, int layers, int d_model, std::uint64_t seed) {
        task = generate_synthetic_corpus(Lang::Python, seed, pairs);
        std::vector<std::string> corpus;
        for (const auto& p : task.train) {
            PromptedExample pe = render_prompt(p);
            corpus.push_back(pe.source_text);
            corpus.push_back(pe.target_text);
        }
        vocab = build_vocab(corpus, 240);
        ModelConfig cfg;
        cfg.layers = layers;
        cfg.heads = 2;
        cfg.d_model = d_model;
        cfg.d_ff = 2 * d_model;
        cfg.dropout = 0.0;
        cfg.max_positions = 192;
        cfg.vocab_size = vocab.size();
        ckpt = init_checkpoint(cfg, vocab.hash(), seed + 1);
    }
};

// --- criterion 1: difficulty selection vs brute force ----------------------

void criterion_difficulty_selection() {
    Toy toy(200, 1, 16, 11);
    // a briefly trained checkpoint so the scores are not degenerate
    TrainConfig tc;
    tc.max_epochs = 1;
    tc.patience = 1;
    tc.batch_size = 16;
    tc.lr = 1e-3;
    tc.continual_enabled = false;
    tc.seed = 5;
    Checkpoint trained = train_task(toy.ckpt, toy.task, {}, {}, toy.vocab, tc).checkpoint;

    ExampleSet set = select_examples(toy.task, trained, toy.vocab, 20);
    require(set.entries.size() == 20, "expected 20 selected examples");

    std::vector<std::pair<double, const BugFixPair*>> brute;
    for (const auto& p : toy.task.train)
        brute.push_back({difficulty(p, trained, toy.vocab), &p});
    std::sort(brute.begin(), brute.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second->index < b.second->index;
    });
    for (std::size_t i = 0; i < 20; ++i) {
        require(set.entries[i].pair.id == brute[i].second->id,
                "selection differs from brute force at position " + std::to_string(i));
        require(std::abs(set.entries[i].difficulty - brute[i].first) <= 1e-6,
                "difficulty score disagreement beyond 1e-6");
    }
}

// --- criterion 2: EWC analytics ---------------------------------------------

void criterion_ewc_analytics() {
    Toy toy(60, 2, 16, 23);
    ReplayStore store;
    store.total_cap = 50;
    store.add_set(select_examples(toy.task, toy.ckpt, toy.vocab, 10));
    FisherSnapshot snap = compute_fisher(toy.ckpt, store, toy.vocab, 6, 9, 110000.0);

    for (double f : snap.fisher) require(f >= 0.0, "negative Fisher entry");
    require(ewc_penalty(toy.ckpt.params, snap) == 0.0, "penalty at the anchor must be exactly 0");

    std::vector<double> moved = toy.ckpt.params;
    Rng rng(4);
    for (auto& p : moved) p += 0.01 * rng.next_normal();
    std::vector<double> grad(moved.size(), 0.0);
    ewc_penalty_grad(moved, snap, grad);

    Rng pick(77);
    for (int k = 0; k < 400; ++k) {
        std::size_t i = pick.next_below(moved.size());
        double expected = 2.0 * snap.lambda * snap.fisher[i] * (moved[i] - snap.theta_ref[i]);
        double denom = std::max({std::abs(expected), std::abs(grad[i]), 1e-10});
        require(std::abs(grad[i] - expected) / denom < 1e-4,
                "penalty gradient differs from 2*lambda*F*(theta-ref)");
    }
    // quadratic form: the central difference is exact at any step size, and a
    // large step keeps the numerator clear of summation roundoff
    const double h = 1e-2;
    for (int k = 0; k < 200; ++k) {
        std::size_t i = pick.next_below(moved.size());
        std::vector<double> probe = moved;
        probe[i] = moved[i] + h;
        double pp = ewc_penalty(probe, snap);
        probe[i] = moved[i] - h;
        double pm = ewc_penalty(probe, snap);
        double fd = (pp - pm) / (2 * h);
        double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-8});
        require(std::abs(fd - grad[i]) / denom < 1e-4,
                "penalty gradient differs from finite differences beyond 1e-4");
    }
}

// --- criterion 3: model gradient check --------------------------------------

void criterion_model_gradients() {
    Vocabulary vocab = build_vocab(
        {"while queue: node = queue.pop(0)", "if a > b: return a", "def f(x): return x + 1"},
        120, {});
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.d_model = 16;
    cfg.d_ff = 32;
    cfg.dropout = 0.0;
    cfg.max_positions = 32;
    cfg.vocab_size = vocab.size();
    Checkpoint ckpt = init_checkpoint(cfg, vocab.hash(), 42);
    EncodedExample ex;
    ex.src = vocab.encode("if a > b:");
    ex.tgt = vocab.encode("if a < b:");
    ex.tgt.push_back(Vocabulary::kEos);

    std::vector<double> grad(ckpt.params.size(), 0.0);
    loss_with_grad(ckpt, ex, grad);
    const double h = 1e-4;
    Rng pick(321);
    Checkpoint probe = ckpt;
    for (int k = 0; k < 1500; ++k) {
        std::size_t i = pick.next_below(ckpt.params.size());
        double saved = probe.params[i];
        probe.params[i] = saved + h;
        double lp = loss(probe, ex);
        probe.params[i] = saved - h;
        double lm = loss(probe, ex);
        probe.params[i] = saved;
        double fd = (lp - lm) / (2 * h);
        double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-6});
        require(std::abs(fd - grad[i]) / denom < 1e-3,
                "analytic gradient differs from finite differences beyond 1e-3 at index " +
                    std::to_string(i));
    }

    // causal-mask independence over 100 random suffix perturbations
    std::vector<int> dec_in = detail::decoder_input_for(ex.tgt);
    Mat base = forward(ckpt, ex.src, dec_in);
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        std::size_t t = 1 + rng.next_below(dec_in.size() - 1);
        std::vector<int> perturbed = dec_in;
        for (std::size_t k = t; k < perturbed.size(); ++k)
            perturbed[k] = static_cast<int>(
                Vocabulary::kNumSpecials +
                rng.next_below(static_cast<std::uint64_t>(cfg.vocab_size - Vocabulary::kNumSpecials)));
        Mat out = forward(ckpt, ex.src, perturbed);
        Eigen::Index rows = static_cast<Eigen::Index>(t);
        require(out.topRows(rows) == base.topRows(rows),
                "suffix perturbation changed earlier logits rows");
    }
}

// --- criterion 4: beam-search enumeration oracle -----------------------------

void criterion_beam_oracle() {
    Vocabulary v = Vocabulary::deserialize(
        "circle-vocab v1\nsize 7\nspecials pad=0 bos=1 eos=2 unk=3\nexcluded < ^ {\na\nb\nc\n");
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.d_model = 8;
    cfg.d_ff = 16;
    cfg.dropout = 0.0;
    cfg.max_positions = 16;
    cfg.vocab_size = v.size();
    Checkpoint ckpt = init_checkpoint(cfg, v.hash(), 1234);
    std::vector<int> src = {4, 5, 6};

    GenConfig gc;
    gc.beam = 64;
    gc.max_candidates = 64;
    gc.max_len = 3;
    std::vector<CandidatePatch> beam = beam_search(ckpt, v, src, gc);
    require(beam.size() == 64, "beam=64 must return 64 candidates");

    Mat enc = encode_source(ckpt, src);
    const std::vector<int> content = {Vocabulary::kUnk, 4, 5, 6};
    struct Entry {
        std::vector<int> ids;
        double score;
    };
    std::vector<Entry> all;
    for (int a : content) {
        all.push_back({{a}, 0.0});
        for (int b : content) {
            all.push_back({{a, b}, 0.0});
            for (int c : content) all.push_back({{a, b, c}, 0.0});
        }
    }
    require(all.size() == 84, "expected 84 terminated sequences");
    for (auto& e : all) {
        double score = 0.0;
        std::vector<int> dec_in{Vocabulary::kBos};
        for (std::size_t t = 0; t < e.ids.size(); ++t) {
            RowVec logits = next_token_logits(ckpt, enc, dec_in);
            Eigen::ArrayXd logp = circle::detail::masked_log_softmax(logits, t > 0);
            score += logp(e.ids[t]);
            dec_in.push_back(e.ids[t]);
        }
        if (e.ids.size() < 3) {
            RowVec logits = next_token_logits(ckpt, enc, dec_in);
            score += circle::detail::masked_log_softmax(logits, true)(Vocabulary::kEos);
        }
        e.score = score;
    }
    std::sort(all.begin(), all.end(), [](const Entry& x, const Entry& y) {
        if (x.score != y.score) return x.score > y.score;
        return x.ids < y.ids;
    });
    for (std::size_t i = 0; i < beam.size(); ++i) {
        require(beam[i].ids == all[i].ids,
                "beam ranking differs from enumeration at rank " + std::to_string(i + 1));
        require(std::abs(beam[i].logprob - all[i].score) <= 1e-9,
                "beam logprob differs from enumeration");
    }
}

// --- criterion 5: re-repairing fixtures --------------------------------------

void criterion_rerepair_fixtures() {
    require(map_keywords("while (NULL!= queue)", Lang::Python) == "while (None!= queue)",
            "keyword fixture failed");
    require(fix_format(
                "if (typeof opt.default!= = 'undefined') self.default(key, opt.default);") ==
                "if (typeof opt.default!== 'undefined') self.default(key, opt.default);",
            "format fixture failed");
    require(fill_unknown("if (excerpt.equals(LINE) && 0 <unk>= charno && charno <unk>= "
                         "sourceExcerpt.length()) <unk>",
                         Lang::Java) ==
                "if (excerpt.equals(LINE) && 0<= charno && charno<= sourceExcerpt.length()){",
            "sentinel fixture failed");

    // idempotence over a 10^4-string property corpus
    static const std::vector<std::string> atoms = {
        "a",  "b",   "count", "items", "None", "null", "NULL",  "max",   "Math.max",
        "if", "(",   ")",     "=",     "==",   "!=",   "<=",    ">=",    "!",
        ";",  "'s'", "0",     "1",     "+",    "-",    "while", "return", "<unk>",
    };
    Rng rng(2029);
    for (int i = 0; i < 10000; ++i) {
        std::string s;
        std::size_t n = 1 + rng.next_below(12);
        for (std::size_t k = 0; k < n; ++k) {
            if (!s.empty() && rng.next_below(4) != 0) s += ' ';
            s += atoms[rng.next_below(atoms.size())];
        }
        std::string f1 = fix_format(s);
        require(fix_format(f1) == f1, "fix_format not idempotent on: " + s);
        std::string k1 = map_keywords(s, Lang::Python);
        require(map_keywords(k1, Lang::Python) == k1, "map_keywords not idempotent on: " + s);
        std::string u1 = fill_unknown(s, Lang::Java);
        require(fill_unknown(u1, Lang::Java) == u1, "fill_unknown not idempotent on: " + s);
    }
}

// --- criterion 6: scaled forgetting experiment -------------------------------

struct ForgettingOutcome {
    int on_task1_after2 = 0;
    int off_task1_after2 = 0;
    int task1_total = 0;
    bool first_rows_identical = false;
};

ForgettingOutcome run_forgetting_pair(std::uint64_t seed);

void criterion_forgetting_experiment() {
    const std::vector<std::uint64_t> seeds = {101, 202, 303};
    double mean_on = 0.0, mean_off = 0.0;
    for (std::uint64_t seed : seeds) {
        ForgettingOutcome o = run_forgetting_pair(seed);
        require(o.first_rows_identical,
                "first-task eval rows differ between continual on and off (seed " +
                    std::to_string(seed) + ")");
        double on_pct = 100.0 * o.on_task1_after2 / std::max(1, o.task1_total);
        double off_pct = 100.0 * o.off_task1_after2 / std::max(1, o.task1_total);
        std::printf("    seed %llu: task-1 EM after task 2: on=%d/%d (%.1f%%) off=%d/%d (%.1f%%)\n",
                    static_cast<unsigned long long>(seed), o.on_task1_after2, o.task1_total, on_pct,
                    o.off_task1_after2, o.task1_total, off_pct);
        std::fflush(stdout);
        mean_on += on_pct;
        mean_off += off_pct;
    }
    mean_on /= static_cast<double>(seeds.size());
    mean_off /= static_cast<double>(seeds.size());
    std::printf("    mean: on=%.2f%% off=%.2f%% gap=%.2f points\n", mean_on, mean_off,
                mean_on - mean_off);
    std::fflush(stdout);
    require(mean_on > mean_off, "continual ON must strictly beat OFF on task 1 after task 2");
    require(mean_on - mean_off >= 2.0, "mean gap must be at least 2 percentage points");
}

// --- criterion 7: prompt ablation artifact -----------------------------------

void criterion_prompt_ablation() {
    TaskStream stream;
    stream.tasks.push_back(generate_synthetic_corpus(Lang::Python, 7001, 300, 1));
    ModelConfig mc;
    mc.layers = 1;
    mc.heads = 2;
    mc.d_model = 24;
    mc.d_ff = 48;
    mc.dropout = 0.0;
    mc.max_positions = 192;
    mc.vocab_size = 240;
    TrainConfig tc;
    tc.max_epochs = 3;
    tc.patience = 3;
    tc.batch_size = 16;
    tc.lr = 1e-3;
    tc.continual_enabled = false;
    tc.seed = 17;
    GenConfig gc;
    gc.beam = 1;
    gc.max_candidates = 1;
    gc.max_len = 12;

    TrainConfig with_prompt = tc;
    with_prompt.prompt_enabled = true;
    TrainConfig no_prompt = tc;
    no_prompt.prompt_enabled = false;
    StreamRunResult on = run_stream(stream, mc, with_prompt, gc, true);
    StreamRunResult off = run_stream(stream, mc, no_prompt, gc, true);
    require(!on.epochs.empty() && !on.epochs[0].size(), "unexpected empty epoch log");
}

// --- criterion 8: train-stream determinism -----------------------------------

void criterion_stream_determinism() {
    fs::path dir = out_root() / "determinism";
    fs::remove_all(dir);
    fs::create_directories(dir);
    nlohmann::json j;
    j["seed"] = 7;
    j["model"] = {{"layers", 1}, {"heads", 2}, {"d_model", 16}, {"d_ff", 32},
                  {"dropout", 0.1}, {"max_positions", 192}, {"vocab_size", 240}};
    j["train"] = {{"max_epochs", 2}, {"patience", 2}, {"batch_size", 8}, {"lr", 1e-3},
                  {"n_per_task", 6}, {"total_cap", 24}, {"m", 4}, {"lambda", 10.0}};
    j["gen"] = {{"beam", 1}, {"top_k", 3}, {"top_p", 0.95}, {"max_candidates", 2},
                {"max_len", 10}};
    j["stream"] = nlohmann::json::array(
        {{{"task_id", 1}, {"lang", "python"}, {"generator", {{"seed", 71}, {"n", 60}}}},
         {{"task_id", 2}, {"lang", "java"}, {"generator", {{"seed", 72}, {"n", 60}}}}});
    std::string cfg_path = (dir / "stream.json").string();
    write_file(cfg_path, j.dump(2));

    std::string cli = CIRCLE_CLI_PATH;
    auto run = [&](const std::string& out) {
        std::string cmd = cli + " train-stream --config " + cfg_path + " --seed 7 --out " + out +
                          " > " + out + ".log 2>&1";
        int status = std::system(cmd.c_str());
        require(status != -1 && WEXITSTATUS(status) == 0, "train-stream run failed, see " + out + ".log");
    };
    std::string r1 = (dir / "run1").string(), r2 = (dir / "run2").string();
    run(r1);
    run(r2);
    require(read_file(r1 + "/eval_matrix.json") == read_file(r2 + "/eval_matrix.json"),
            "eval_matrix.json differs between identical runs");
    require(read_file(r1 + "/eval_matrix.csv") == read_file(r2 + "/eval_matrix.csv"),
            "eval_matrix.csv differs between identical runs");
}

ForgettingOutcome run_forgetting_pair(std::uint64_t seed) {
    // 2-task stream: python -> java, 2000 pairs per task, toy model.
    TaskStream stream;
    stream.tasks.push_back(generate_synthetic_corpus(Lang::Python, 9001, 2000, 1));
    stream.tasks.push_back(generate_synthetic_corpus(Lang::Java, 9002, 2000, 2));

    ModelConfig mc;
    mc.layers = 1;
    mc.heads = 2;
    mc.d_model = 24;
    mc.d_ff = 48;
    mc.dropout = 0.0;
    mc.max_positions = 192;
    mc.vocab_size = 240;

    TrainConfig tc;
    tc.max_epochs = 4;
    tc.patience = 2;
    tc.batch_size = 16;
    tc.lr = 1e-3;
    tc.lambda = 100.0;
    tc.n_per_task = 200;
    tc.total_cap = 20000;
    tc.m = 32;
    tc.seed = seed;

    GenConfig gc;
    gc.beam = 1;
    gc.max_candidates = 1;
    gc.max_len = 16;
    gc.seed = seed;

    TrainConfig on_cfg = tc;
    on_cfg.continual_enabled = true;
    TrainConfig off_cfg = tc;
    off_cfg.continual_enabled = false;

    StreamRunResult on = run_stream(stream, mc, on_cfg, gc, true);
    StreamRunResult off = run_stream(stream, mc, off_cfg, gc, true);

    ForgettingOutcome o;
    const EvalCell* on_cell = on.matrix.cell(2, 1);
    const EvalCell* off_cell = off.matrix.cell(2, 1);
    o.on_task1_after2 = on_cell ? on_cell->fixed_count : 0;
    o.off_task1_after2 = off_cell ? off_cell->fixed_count : 0;
    o.task1_total = on_cell ? on_cell->total : 0;
    o.first_rows_identical =
        eval_matrix_to_json({{on.matrix.rows[0]}}).dump() ==
        eval_matrix_to_json({{off.matrix.rows[0]}}).dump();
    return o;
}

}  // namespace

int main() {
    std::vector<Criterion> criteria = {
        {1, "difficulty-selection oracle (top-20 equals brute force, <= 1e-6)",
         criterion_difficulty_selection},
        {2, "EWC analytics (penalty zero at anchor, gradient within 1e-4, F >= 0)",
         criterion_ewc_analytics},
        {3, "model gradient check (finite differences within 1e-3, causal mask)",
         criterion_model_gradients},
        {4, "beam-search oracle (beam=64 equals the 84-sequence enumeration)",
         criterion_beam_oracle},
        {5, "re-repairing fixtures (keyword, format, sentinel; idempotence over 10^4 strings)",
         criterion_rerepair_fixtures},
        {6, "forgetting experiment (task-1 EM after task 2: ON - OFF >= 2 points over 3 seeds)",
         criterion_forgetting_experiment},
        {7, "prompt ablation (runs and emits the validation-loss comparison artifact)",
         criterion_prompt_ablation},
        {8, "determinism (two identical train-stream runs, byte-identical matrices)",
         criterion_stream_determinism},
    };

    int failures = 0;
    for (const auto& c : criteria) {
        auto start = std::chrono::steady_clock::now();
        std::string error;
        try {
            c.body();
        } catch (const std::exception& e) {
            error = e.what();
        }
        double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (error.empty()) {
            std::printf("PASS criterion %d: %s (%.1fs)\n", c.number, c.name.c_str(), secs);
        } else {
            std::printf("FAIL criterion %d: %s (%.1fs)\n  %s\n", c.number, c.name.c_str(), secs,
                        error.c_str());
            ++failures;
        }
        std::fflush(stdout);
    }
    if (failures > 0) {
        std::printf("%d criterion(s) failed\n", failures);
        return 1;
    }
    std::printf("all criteria passed\n");
    return 0;
}
