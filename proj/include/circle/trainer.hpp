#pragma once

#include <cstdio>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "circle/common.hpp"
#include "circle/corpus.hpp"
#include "circle/eval.hpp"
#include "circle/ewc.hpp"
#include "circle/generator.hpp"
#include "circle/model.hpp"
#include "circle/replay.hpp"
#include "circle/tokenizer.hpp"

namespace circle {

struct TrainConfig {
    int max_epochs = 20;
    int patience = 3;
    double lr = 3e-4;
    int batch_size = 16;        // paper setting: 64
    double weight_decay = 0.01;
    double lambda = 110000.0;
    std::size_t n_per_task = 200;
    std::size_t total_cap = 20000;
    std::size_t m = 32;         // Fisher sample budget
    std::uint64_t seed = 0;
    bool prompt_enabled = true;
    bool continual_enabled = true;
    bool ewc_accumulate = false;  // penalize against every past anchor, not just the latest
    int replay_oversample = 1;    // duplicates of each replayed example in the merged multiset

    void validate() const {
        if (max_epochs < 1) throw ConfigError("train config: max_epochs must be >= 1");
        if (patience < 1 || patience > max_epochs)
            throw ConfigError("train config: patience must be in [1, max_epochs]");
        if (lr < 0.0) throw ConfigError("train config: lr must be >= 0");
        if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
        if (lambda < 0.0) throw ConfigError("train config: lambda must be >= 0");
        if (replay_oversample < 1) throw ConfigError("train config: replay_oversample must be >= 1");
    }
};

struct EpochRecord {
    int epoch = 0;
    double train_objective = 0.0;  // mean per-example objective incl. EWC share
    double val_loss = 0.0;         // mean per-token cross entropy, penalty excluded
    bool improved = false;
};

struct TrainTaskResult {
    Checkpoint checkpoint;
    ReplayStore store;
    std::vector<FisherSnapshot> snapshots;  // active anchors after this task
    std::vector<EpochRecord> epochs;
};

namespace detail {

class AdamW {
public:
    AdamW(std::size_t n, double lr, double weight_decay)
        : lr_(lr), wd_(weight_decay), m_(n, 0.0), v_(n, 0.0) {}

    void step(std::vector<double>& params, const std::vector<double>& grad) {
        ++t_;
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        const double bc1 = 1.0 - std::pow(b1, t_);
        const double bc2 = 1.0 - std::pow(b2, t_);
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i] = b1 * m_[i] + (1.0 - b1) * grad[i];
            v_[i] = b2 * v_[i] + (1.0 - b2) * grad[i] * grad[i];
            double mhat = m_[i] / bc1;
            double vhat = v_[i] / bc2;
            double p = params[i];
            p -= lr_ * mhat / (std::sqrt(vhat) + eps);
            p -= lr_ * wd_ * p;  // decoupled weight decay
            params[i] = round_f32(p);
        }
    }

private:
    double lr_, wd_;
    int t_ = 0;
    std::vector<double> m_, v_;
};

inline double validation_loss(const Checkpoint& ckpt, const TaskDataset& task,
                              const Vocabulary& vocab, bool prompt_enabled) {
    if (task.val.empty()) return 0.0;
    double total = 0.0;
    std::size_t tokens = 0;
    for (const auto& p : task.val) {
        EncodedExample ex = encode_example(p, vocab, ckpt.config, prompt_enabled);
        total += loss(ckpt, ex);
        tokens += ex.tgt.size();
    }
    return total / static_cast<double>(tokens);
}

}  // namespace detail

// One task of the stream protocol: optimize the combined objective with early
// stopping, then select the difficulty set and refresh the Fisher anchor.
inline TrainTaskResult train_task(const Checkpoint& start, const TaskDataset& task,
                                  const ReplayStore& store,
                                  const std::vector<FisherSnapshot>& snapshots,
                                  const Vocabulary& vocab, const TrainConfig& cfg) {
    cfg.validate();
    if (task.train.empty()) throw ConfigError("train_task: training split is empty");

    TrainTaskResult result;
    result.checkpoint = start;
    result.checkpoint.task_id = task.task_id;
    result.store = store;

    std::vector<BugFixPair> merged;
    if (cfg.continual_enabled) {
        merged = merge_training_set(task, store);
        if (cfg.replay_oversample > 1) {
            for (const auto& set : store.sets)
                for (const auto& e : set.entries)
                    for (int r = 1; r < cfg.replay_oversample; ++r) merged.push_back(e.pair);
        }
    } else {
        merged = task.train;
    }

    // pre-encode once; training revisits every example each epoch
    std::vector<EncodedExample> encoded;
    encoded.reserve(merged.size());
    for (const auto& p : merged)
        encoded.push_back(encode_example(p, vocab, start.config, cfg.prompt_enabled));

    std::vector<double>& params = result.checkpoint.params;
    detail::AdamW opt(params.size(), cfg.lr, cfg.weight_decay);
    std::vector<double> grad(params.size());

    const std::vector<FisherSnapshot>* active = cfg.continual_enabled ? &snapshots : nullptr;

    double best_val = std::numeric_limits<double>::infinity();
    std::vector<double> best_params = params;
    int stale_epochs = 0;
    const bool use_early_stop = !task.val.empty();

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::vector<std::size_t> order(encoded.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(derive_seed(cfg.seed, "train-shuffle",
                                    static_cast<std::uint64_t>(task.task_id) * 100000 +
                                        static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);
        Rng dropout_rng(derive_seed(cfg.seed, "train-dropout",
                                    static_cast<std::uint64_t>(task.task_id) * 100000 +
                                        static_cast<std::uint64_t>(epoch)));
        Rng* drop = start.config.dropout > 0.0 ? &dropout_rng : nullptr;

        double epoch_objective = 0.0;
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
            std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
            std::fill(grad.begin(), grad.end(), 0.0);
            double batch_loss = 0.0;
            for (std::size_t k = b; k < end; ++k)
                batch_loss += loss_with_grad(result.checkpoint, encoded[order[k]], grad, drop);
            double objective = batch_loss;
            if (active) {
                for (const auto& snap : *active) {
                    objective += ewc_penalty(params, snap);
                    ewc_penalty_grad(params, snap, grad);
                }
            }
            epoch_objective += objective;
            opt.step(params, grad);
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_objective = epoch_objective / static_cast<double>(encoded.size());
        rec.val_loss = detail::validation_loss(result.checkpoint, task, vocab, cfg.prompt_enabled);
        rec.improved = use_early_stop && rec.val_loss < best_val;
        if (!use_early_stop) {
            result.epochs.push_back(rec);
            continue;
        }
        if (rec.val_loss < best_val) {
            best_val = rec.val_loss;
            best_params = params;
            stale_epochs = 0;
        } else {
            ++stale_epochs;
        }
        result.epochs.push_back(rec);
        if (stale_epochs >= cfg.patience) break;
    }
    if (use_early_stop) params = best_params;

    if (cfg.continual_enabled) {
        ExampleSet set = select_examples(task, result.checkpoint, vocab, cfg.n_per_task,
                                         cfg.prompt_enabled);
        result.store.total_cap = cfg.total_cap;
        result.store.add_set(std::move(set));
        FisherSnapshot snap = compute_fisher(
            result.checkpoint, result.store, vocab, cfg.m,
            derive_seed(cfg.seed, "fisher", static_cast<std::uint64_t>(task.task_id)), cfg.lambda,
            cfg.prompt_enabled);
        if (cfg.ewc_accumulate) {
            result.snapshots = snapshots;
            result.snapshots.push_back(std::move(snap));
        } else {
            result.snapshots = {std::move(snap)};
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Stream protocol: train tasks in order, evaluate on all seen test splits
// after each task, persist artifacts per task.
// ---------------------------------------------------------------------------

struct StreamRunResult {
    Vocabulary vocab;
    std::vector<Checkpoint> checkpoints;  // one per task
    std::vector<std::vector<EpochRecord>> epochs;
    EvalMatrix matrix;
    ReplayStore store;
};

namespace detail {

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string epochs_to_csv(const std::vector<EpochRecord>& epochs) {
    std::string out = "epoch,train_objective,val_loss,improved\n";
    for (const auto& e : epochs)
        out += std::to_string(e.epoch) + "," + format_double(e.train_objective) + "," +
               format_double(e.val_loss) + "," + (e.improved ? "1" : "0") + "\n";
    return out;
}

}  // namespace detail

inline StreamRunResult run_stream(const TaskStream& stream, const ModelConfig& model_cfg,
                                  const TrainConfig& train_cfg, const GenConfig& gen_cfg,
                                  bool rerepair_on, const std::string& run_dir = "") {
    if (stream.tasks.empty()) throw ConfigError("run_stream: stream is empty");
    train_cfg.validate();
    for (std::size_t i = 0; i < stream.tasks.size(); ++i) {
        if (stream.tasks[i].task_id != static_cast<int>(i) + 1)
            throw ValidationError("run_stream: task ids must increase strictly from 1");
    }

    namespace fs = std::filesystem;
    const bool persist = !run_dir.empty();
    if (persist) fs::create_directories(run_dir);

    // Vocabulary: learned on the first task only, then frozen.
    std::vector<std::string> vocab_corpus;
    for (const auto& p : stream.tasks[0].train) {
        PromptedExample pe = render(p, train_cfg.prompt_enabled);
        vocab_corpus.push_back(pe.source_text);
        vocab_corpus.push_back(pe.target_text);
    }
    StreamRunResult result;
    result.vocab = build_vocab(vocab_corpus, static_cast<std::size_t>(model_cfg.vocab_size));
    if (persist) result.vocab.save(run_dir + "/vocab.txt");

    ModelConfig cfg = model_cfg;
    cfg.vocab_size = result.vocab.size();
    Checkpoint ckpt = init_checkpoint(cfg, result.vocab.hash(), train_cfg.seed);

    ReplayStore store;
    store.total_cap = train_cfg.total_cap;
    std::vector<FisherSnapshot> snapshots;
    result.store = store;

    for (const auto& task : stream.tasks) {
        TrainTaskResult tr = train_task(ckpt, task, store, snapshots, result.vocab, train_cfg);
        ckpt = tr.checkpoint;
        store = tr.store;
        snapshots = tr.snapshots;
        result.checkpoints.push_back(ckpt);
        result.epochs.push_back(tr.epochs);
        result.store = store;

        std::vector<const TaskDataset*> benchmarks;
        for (const auto& seen : stream.tasks) {
            benchmarks.push_back(&seen);
            if (seen.task_id == task.task_id) break;
        }
        std::vector<std::vector<CandidateLogEntry>> logs;
        EvalRow row = evaluate_checkpoint(ckpt, result.vocab, benchmarks, gen_cfg, rerepair_on,
                                          train_cfg.prompt_enabled, &logs);
        result.matrix.rows.push_back(row);

        if (persist) {
            std::string task_dir = run_dir + "/task_" + std::to_string(task.task_id);
            fs::create_directories(task_dir);
            save_checkpoint(ckpt, task_dir + "/checkpoint.bin");
            write_file(task_dir + "/epochs.csv", detail::epochs_to_csv(tr.epochs));
            if (train_cfg.continual_enabled) {
                save_replay_store(store, task_dir + "/replay.jsonl",
                                  task_dir + "/replay.sidecar.jsonl");
                if (!snapshots.empty())
                    save_fisher(snapshots.back(), task_dir + "/fisher.bin");
            }
            for (std::size_t b = 0; b < benchmarks.size(); ++b)
                write_file(task_dir + "/candidates_task" + std::to_string(benchmarks[b]->task_id) +
                               ".jsonl",
                           candidate_log_to_jsonl(logs[b]));
            write_file(run_dir + "/eval_matrix.json", eval_matrix_to_json(result.matrix).dump(2) + "\n");
            write_file(run_dir + "/eval_matrix.csv", eval_matrix_to_csv(result.matrix));
        }
    }
    return result;
}

}  // namespace circle
