// circle: continual program-repair pipeline CLI.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "circle/config.hpp"
#include "circle/corpus.hpp"
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

// Repair inputs follow the corpus record format; `fixed` is optional because
// the ground truth may be unknown at repair time.
std::vector<BugFixPair> load_bugs(const std::string& path) {
    std::vector<BugFixPair> bugs;
    auto lines = split_lines(read_file(path));
    for (std::size_t ln = 0; ln < lines.size(); ++ln) {
        if (lines[ln].empty()) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(lines[ln]);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path + ":" + std::to_string(ln + 1) + ": " + e.what());
        }
        BugFixPair p;
        p.id = rec.at("id").get<std::string>();
        p.lang = parse_lang(rec.at("lang").get<std::string>());
        p.buggy = rec.at("buggy").get<std::string>();
        p.context = rec.value("context", std::string());
        p.fixed = rec.value("fixed", std::string());
        p.index = bugs.size();
        bugs.push_back(std::move(p));
    }
    return bugs;
}

std::string now_iso8601() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%FT%TZ", std::gmtime(&t));
    return buf;
}

struct GenFlags {
    std::optional<int> beam, top_k, max_candidates, max_len;
    std::optional<double> top_p;
    void apply(GenConfig& cfg) const {
        if (beam) cfg.beam = *beam;
        if (top_k) cfg.top_k = *top_k;
        if (top_p) cfg.top_p = *top_p;
        if (max_candidates) cfg.max_candidates = *max_candidates;
        if (max_len) cfg.max_len = *max_len;
    }
    void add_to(CLI::App* cmd) {
        cmd->add_option("--beam", beam, "beam width");
        cmd->add_option("--top-k", top_k, "top-k filter size");
        cmd->add_option("--top-p", top_p, "nucleus mass");
        cmd->add_option("--max-candidates", max_candidates, "candidate cap");
        cmd->add_option("--max-len", max_len, "max generated tokens");
    }
};

RerepairTables tables_or_default(const std::optional<std::string>& path) {
    if (path) return load_rerepair_tables(*path);
    return {default_keyword_map(), default_fill_rules()};
}

int cmd_generate_corpus(const std::string& lang_str, std::uint64_t seed, std::size_t n,
                        const std::string& out) {
    TaskDataset ds = generate_synthetic_corpus(parse_lang(lang_str), seed, n);
    save_corpus(ds, out);
    std::cout << "wrote " << ds.size() << " pairs to " << out << "\n";
    return 0;
}

int cmd_generate_corpus_config(const std::string& config_path, const std::string& out_dir) {
    RunConfig rc = load_run_config(config_path);
    fs::create_directories(out_dir);
    for (const auto& spec : rc.stream) {
        if (!spec.uses_generator()) continue;
        TaskDataset ds = generate_synthetic_corpus(spec.lang, spec.gen_seed, spec.gen_n, spec.task_id);
        std::string path = out_dir + "/task_" + std::to_string(spec.task_id) + "_" +
                           to_string(spec.lang) + ".jsonl";
        save_corpus(ds, path);
        std::cout << "wrote " << ds.size() << " pairs to " << path << "\n";
    }
    return 0;
}

int cmd_train_stream(const std::string& config_path, std::optional<std::uint64_t> seed,
                     std::optional<std::string> out_dir, bool no_continual, bool no_prompt,
                     bool no_rerepair) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(config_path));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(config_path + ": " + e.what());
    }
    if (seed) j["seed"] = *seed;
    if (no_continual) j["train"]["continual"] = false;
    if (no_prompt) j["train"]["prompt"] = false;
    if (no_rerepair) j["rerepair"] = false;
    RunConfig rc = parse_run_config(j);
    if (out_dir) rc.out_dir = *out_dir;
    if (const char* env = std::getenv("CIRCLE_OUT_DIR")) rc.out_dir = env;
    if (rc.out_dir.empty()) throw ConfigError("train-stream: no output directory (config out_dir, --out, or CIRCLE_OUT_DIR)");
    check_paths_resolvable(rc);

    TaskStream stream = build_task_stream(rc);
    StreamRunResult result =
        run_stream(stream, rc.model, rc.train, rc.gen, rc.rerepair_on, rc.out_dir);

    nlohmann::ordered_json meta;
    meta["finished_at"] = now_iso8601();
    meta["config"] = j;
    meta["tasks"] = result.checkpoints.size();
    write_file(rc.out_dir + "/run_meta.json", meta.dump(2) + "\n");

    ForgettingReport report = forgetting_report(result.matrix);
    std::cout << render_report_table(result.matrix, &report);
    std::cout << "run directory: " << rc.out_dir << "\n";
    return 0;
}

int cmd_repair(const std::string& ckpt_path, const std::string& vocab_path,
               const std::string& input_path, const std::string& out_path, const GenFlags& flags,
               std::uint64_t seed, bool no_rerepair, bool no_prompt,
               const std::optional<std::string>& tables_path) {
    Vocabulary vocab = Vocabulary::load(vocab_path);
    Checkpoint ckpt = load_checkpoint(ckpt_path, vocab);
    std::vector<BugFixPair> bugs = load_bugs(input_path);
    RerepairTables tables = tables_or_default(tables_path);
    GenConfig cfg;
    flags.apply(cfg);
    cfg.validate();
    std::vector<CandidateLogEntry> log;
    for (const auto& bug : bugs) {
        GenConfig per_bug = cfg;
        per_bug.seed = derive_seed(seed, "repair-bug", fnv1a(bug.id));
        std::vector<CandidatePatch> candidates =
            generate_patches(ckpt, vocab, bug, per_bug, !no_prompt);
        for (const auto& c : candidates) {
            CandidateLogEntry e;
            e.bug_id = bug.id;
            e.truth = bug.fixed;
            e.rank = c.rank;
            e.source = c.source;
            e.logprob = c.logprob;
            e.raw_text = c.text;
            e.text = no_rerepair ? c.text
                                 : rerepair(c.text, bug.lang, tables.keyword_map, tables.fill_rules);
            log.push_back(std::move(e));
        }
    }
    write_file(out_path, candidate_log_to_jsonl(log));
    std::cout << "wrote " << log.size() << " candidates for " << bugs.size() << " bugs to "
              << out_path << "\n";
    return 0;
}

int cmd_evaluate(const std::string& ckpt_path, const std::string& vocab_path,
                 const std::vector<std::string>& bench_paths, const std::string& out_dir,
                 const GenFlags& flags, std::uint64_t seed, bool no_rerepair, bool no_prompt,
                 const std::optional<std::string>& tables_path) {
    Vocabulary vocab = Vocabulary::load(vocab_path);
    Checkpoint ckpt = load_checkpoint(ckpt_path, vocab);
    RerepairTables tables = tables_or_default(tables_path);
    std::vector<TaskDataset> datasets;
    for (std::size_t i = 0; i < bench_paths.size(); ++i)
        datasets.push_back(load_corpus(bench_paths[i], static_cast<int>(i) + 1));
    std::vector<const TaskDataset*> benchmarks;
    for (const auto& d : datasets) benchmarks.push_back(&d);
    GenConfig cfg;
    flags.apply(cfg);
    cfg.seed = seed;
    cfg.validate();
    std::vector<std::vector<CandidateLogEntry>> logs;
    EvalRow row = evaluate_checkpoint(ckpt, vocab, benchmarks, cfg, !no_rerepair, !no_prompt, &logs,
                                      tables.keyword_map, tables.fill_rules);
    fs::create_directories(out_dir);
    EvalMatrix matrix;
    matrix.rows.push_back(row);
    write_file(out_dir + "/eval_matrix.json", eval_matrix_to_json(matrix).dump(2) + "\n");
    write_file(out_dir + "/eval_matrix.csv", eval_matrix_to_csv(matrix));
    for (std::size_t b = 0; b < benchmarks.size(); ++b)
        write_file(out_dir + "/candidates_task" + std::to_string(benchmarks[b]->task_id) + ".jsonl",
                   candidate_log_to_jsonl(logs[b]));
    std::cout << render_report_table(matrix);
    return 0;
}

int cmd_select_examples(const std::string& ckpt_path, const std::string& vocab_path,
                        const std::string& corpus_path, std::size_t n, bool no_prompt,
                        const std::string& out_records, const std::string& out_sidecar) {
    Vocabulary vocab = Vocabulary::load(vocab_path);
    Checkpoint ckpt = load_checkpoint(ckpt_path, vocab);
    TaskDataset ds = load_corpus(corpus_path);
    ExampleSet set = select_examples(ds, ckpt, vocab, n, !no_prompt);
    ReplayStore store;
    store.total_cap = n == 0 ? 1 : n;
    store.sets.push_back(std::move(set));
    save_replay_store(store, out_records, out_sidecar);
    std::cout << "selected " << store.sets[0].entries.size() << " examples\n";
    return 0;
}

int cmd_compute_fisher(const std::string& ckpt_path, const std::string& vocab_path,
                       const std::string& records_path, const std::string& sidecar_path,
                       std::size_t m, std::uint64_t seed, double lambda, bool no_prompt,
                       const std::string& out_path) {
    Vocabulary vocab = Vocabulary::load(vocab_path);
    Checkpoint ckpt = load_checkpoint(ckpt_path, vocab);
    ReplayStore store = load_replay_store(records_path, sidecar_path, 1ull << 40);
    FisherSnapshot snap = compute_fisher(ckpt, store, vocab, m, seed, lambda, !no_prompt);
    save_fisher(snap, out_path);
    std::cout << "fisher snapshot over " << snap.sample_ids.size() << " samples written to "
              << out_path << "\n";
    return 0;
}

int cmd_report(const std::string& run_dir, const std::optional<std::string>& baseline_dir,
               const std::optional<std::string>& out_dir) {
    EvalMatrix matrix = eval_matrix_from_json(
        nlohmann::json::parse(read_file(run_dir + "/eval_matrix.json")));
    std::optional<EvalMatrix> baseline;
    if (baseline_dir)
        baseline = eval_matrix_from_json(
            nlohmann::json::parse(read_file(*baseline_dir + "/eval_matrix.json")));
    ForgettingReport report = forgetting_report(matrix, baseline ? &*baseline : nullptr);
    std::string dir = out_dir.value_or(run_dir);
    fs::create_directories(dir);
    write_file(dir + "/forgetting.json", forgetting_report_to_json(report).dump(2) + "\n");
    write_file(dir + "/forgetting.csv", forgetting_report_to_csv(report));
    std::cout << render_report_table(matrix, &report);
    if (report.total_delta)
        std::cout << "total delta vs baseline: " << *report.total_delta << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"circle: continual multi-language program repair at desk scale"};
    app.require_subcommand(1);

    // generate-corpus
    auto* gen = app.add_subcommand("generate-corpus", "generate a synthetic bug-fix corpus");
    std::string gen_lang, gen_out, gen_config, gen_out_dir;
    std::uint64_t gen_seed = 0;
    std::size_t gen_n = 1000;
    gen->add_option("--lang", gen_lang, "language tag");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--n", gen_n, "number of pairs");
    gen->add_option("--out", gen_out, "output corpus file");
    gen->add_option("--config", gen_config, "run config (generates every generator task)");
    gen->add_option("--out-dir", gen_out_dir, "output directory for config mode");

    // train-stream
    auto* ts = app.add_subcommand("train-stream", "train the task stream and evaluate after each task");
    std::string ts_config;
    std::optional<std::uint64_t> ts_seed;
    std::optional<std::string> ts_out;
    bool ts_no_continual = false, ts_no_prompt = false, ts_no_rerepair = false;
    ts->add_option("--config", ts_config, "run config file")->required();
    ts->add_option("--seed", ts_seed, "override config seed");
    ts->add_option("--out", ts_out, "override output directory");
    ts->add_flag("--no-continual", ts_no_continual, "finetuning baseline: no replay, no EWC");
    ts->add_flag("--no-prompt", ts_no_prompt, "plain concatenated input, no prompt markers");
    ts->add_flag("--no-rerepair", ts_no_rerepair, "skip re-repairing during evaluation");

    // repair
    auto* rp = app.add_subcommand("repair", "generate candidate patches for a bug file");
    std::string rp_ckpt, rp_vocab, rp_input, rp_out;
    std::uint64_t rp_seed = 0;
    bool rp_no_rerepair = false, rp_no_prompt = false;
    std::optional<std::string> rp_tables;
    GenFlags rp_flags;
    rp->add_option("--checkpoint", rp_ckpt, "checkpoint file")->required();
    rp->add_option("--vocab", rp_vocab, "vocabulary file")->required();
    rp->add_option("--input", rp_input, "bugs file (corpus records, fixed optional)")->required();
    rp->add_option("--out", rp_out, "candidate log output")->required();
    rp->add_option("--seed", rp_seed, "sampling seed");
    rp->add_option("--tables", rp_tables, "re-repair tables file");
    rp->add_flag("--no-rerepair", rp_no_rerepair, "emit raw candidates only");
    rp->add_flag("--no-prompt", rp_no_prompt, "plain concatenated input");
    rp_flags.add_to(rp);

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "score a checkpoint on benchmark corpora");
    std::string ev_ckpt, ev_vocab, ev_out;
    std::vector<std::string> ev_bench;
    std::uint64_t ev_seed = 0;
    bool ev_no_rerepair = false, ev_no_prompt = false;
    std::optional<std::string> ev_tables;
    GenFlags ev_flags;
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
    ev->add_option("--vocab", ev_vocab, "vocabulary file")->required();
    ev->add_option("--bench", ev_bench, "benchmark corpus file (repeatable)")->required();
    ev->add_option("--out", ev_out, "output directory")->required();
    ev->add_option("--seed", ev_seed, "sampling seed");
    ev->add_option("--tables", ev_tables, "re-repair tables file");
    ev->add_flag("--no-rerepair", ev_no_rerepair, "score raw candidates");
    ev->add_flag("--no-prompt", ev_no_prompt, "plain concatenated input");
    ev_flags.add_to(ev);

    // select-examples
    auto* se = app.add_subcommand("select-examples", "difficulty-based example selection");
    std::string se_ckpt, se_vocab, se_corpus, se_records, se_sidecar;
    std::size_t se_n = 0;
    bool se_no_prompt = false;
    se->add_option("--checkpoint", se_ckpt)->required();
    se->add_option("--vocab", se_vocab)->required();
    se->add_option("--corpus", se_corpus)->required();
    se->add_option("--n", se_n, "examples to keep")->required();
    se->add_option("--out-records", se_records)->required();
    se->add_option("--out-sidecar", se_sidecar)->required();
    se->add_flag("--no-prompt", se_no_prompt);

    // compute-fisher
    auto* cf = app.add_subcommand("compute-fisher", "diagonal Fisher over a replay store sample");
    std::string cf_ckpt, cf_vocab, cf_records, cf_sidecar, cf_out;
    std::size_t cf_m = 32;
    std::uint64_t cf_seed = 0;
    double cf_lambda = 110000.0;
    bool cf_no_prompt = false;
    cf->add_option("--checkpoint", cf_ckpt)->required();
    cf->add_option("--vocab", cf_vocab)->required();
    cf->add_option("--replay-records", cf_records)->required();
    cf->add_option("--replay-sidecar", cf_sidecar)->required();
    cf->add_option("--m", cf_m, "sample budget");
    cf->add_option("--seed", cf_seed, "sampling seed");
    cf->add_option("--lambda", cf_lambda, "EWC strength");
    cf->add_option("--out", cf_out)->required();
    cf->add_flag("--no-prompt", cf_no_prompt);

    // report
    auto* rep = app.add_subcommand("report", "task-progress table and forgetting report");
    std::string rep_run;
    std::optional<std::string> rep_baseline, rep_out;
    rep->add_option("--run-dir", rep_run)->required();
    rep->add_option("--baseline", rep_baseline, "baseline run directory for the joint upperbound");
    rep->add_option("--out", rep_out, "output directory (defaults to run dir)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            if (!gen_config.empty()) {
                if (gen_out_dir.empty())
                    throw ConfigError("generate-corpus: --out-dir required with --config");
                return cmd_generate_corpus_config(gen_config, gen_out_dir);
            }
            if (gen_lang.empty() || gen_out.empty())
                throw ConfigError("generate-corpus: --lang and --out required (or use --config)");
            return cmd_generate_corpus(gen_lang, gen_seed, gen_n, gen_out);
        }
        if (ts->parsed())
            return cmd_train_stream(ts_config, ts_seed, ts_out, ts_no_continual, ts_no_prompt,
                                    ts_no_rerepair);
        if (rp->parsed())
            return cmd_repair(rp_ckpt, rp_vocab, rp_input, rp_out, rp_flags, rp_seed,
                              rp_no_rerepair, rp_no_prompt, rp_tables);
        if (ev->parsed())
            return cmd_evaluate(ev_ckpt, ev_vocab, ev_bench, ev_out, ev_flags, ev_seed,
                                ev_no_rerepair, ev_no_prompt, ev_tables);
        if (se->parsed())
            return cmd_select_examples(se_ckpt, se_vocab, se_corpus, se_n, se_no_prompt, se_records,
                                       se_sidecar);
        if (cf->parsed())
            return cmd_compute_fisher(cf_ckpt, cf_vocab, cf_records, cf_sidecar, cf_m, cf_seed,
                                      cf_lambda, cf_no_prompt, cf_out);
        if (rep->parsed()) return cmd_report(rep_run, rep_baseline, rep_out);
    } catch (const Error& e) {
        std::cerr << "error: " << e.category() << ": " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
