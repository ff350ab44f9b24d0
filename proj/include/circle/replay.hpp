#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "circle/common.hpp"
#include "circle/corpus.hpp"
#include "circle/model.hpp"
#include "circle/prompt.hpp"
#include "circle/tokenizer.hpp"

namespace circle {

// ---------------------------------------------------------------------------
// Encoding an example for the model. One place defines how prompts become
// token ids so that training, difficulty scoring and the Fisher estimate all
// agree: source truncated to max_positions, target gets a trailing eos and
// must leave room for the bos shift.
// ---------------------------------------------------------------------------

inline EncodedExample encode_example(const BugFixPair& pair, const Vocabulary& vocab,
                                     const ModelConfig& cfg, bool prompt_enabled) {
    PromptedExample pe = render(pair, prompt_enabled);
    EncodedExample ex;
    ex.src = truncate_tokens(vocab.encode(pe.source_text),
                             static_cast<std::size_t>(cfg.max_positions));
    std::vector<int> tgt = truncate_tokens(vocab.encode(pe.target_text),
                                           static_cast<std::size_t>(cfg.max_positions) - 1);
    if (tgt.empty()) throw InputError("pair " + pair.id + ": target encodes to zero tokens");
    tgt.push_back(Vocabulary::kEos);
    ex.tgt = tgt;
    return ex;
}

// ---------------------------------------------------------------------------
// Difficulty scoring and top-N selection.
// ---------------------------------------------------------------------------

struct ScoredPair {
    BugFixPair pair;
    double difficulty = 0.0;
};

struct ExampleSet {
    int task_id = 0;
    std::vector<ScoredPair> entries;  // nonincreasing difficulty, ties by dataset index
    std::size_t capacity = 0;
};

struct ReplayStore {
    std::vector<ExampleSet> sets;  // one per completed task, ordered by task_id
    std::size_t total_cap = 20000;

    std::size_t total_entries() const {
        std::size_t n = 0;
        for (const auto& s : sets) n += s.entries.size();
        return n;
    }

    // Equal split of the global cap across tasks seen so far; earlier sets
    // lose their lowest-difficulty tail when a new task arrives.
    void add_set(ExampleSet set) {
        sets.push_back(std::move(set));
        std::size_t allowance = std::max<std::size_t>(1, total_cap / sets.size());
        for (auto& s : sets) {
            if (s.entries.size() > allowance) s.entries.resize(allowance);
            s.capacity = allowance;
        }
        while (total_entries() > total_cap) {  // only when total_cap < number of sets
            for (auto& s : sets)
                if (total_entries() > total_cap && !s.entries.empty()) s.entries.pop_back();
        }
    }
};

// Per-token mean loss at a fixed checkpoint (Eq. 1): summed cross entropy over
// the target positions (eos included) divided by the number of positions.
inline double difficulty(const BugFixPair& pair, const Checkpoint& ckpt, const Vocabulary& vocab,
                         bool prompt_enabled = true) {
    EncodedExample ex = encode_example(pair, vocab, ckpt.config, prompt_enabled);
    return loss(ckpt, ex) / static_cast<double>(ex.tgt.size());
}

inline ExampleSet select_examples(const TaskDataset& dataset, const Checkpoint& ckpt,
                                  const Vocabulary& vocab, std::size_t n,
                                  bool prompt_enabled = true) {
    ExampleSet set;
    set.task_id = dataset.task_id;
    set.capacity = n;
    std::vector<ScoredPair> scored;
    scored.reserve(dataset.train.size());
    for (const auto& p : dataset.train) scored.push_back({p, difficulty(p, ckpt, vocab, prompt_enabled)});
    std::stable_sort(scored.begin(), scored.end(), [](const ScoredPair& a, const ScoredPair& b) {
        if (a.difficulty != b.difficulty) return a.difficulty > b.difficulty;
        return a.pair.index < b.pair.index;
    });
    if (scored.size() > n) scored.resize(n);
    set.entries = std::move(scored);
    return set;
}

// D_{t+1} ∪ E_{1:t}: current training split first, then stored sets by task
// id, entries in rank order. Replayed pairs keep their original language tags.
inline std::vector<BugFixPair> merge_training_set(const TaskDataset& current,
                                                  const ReplayStore& store) {
    std::vector<BugFixPair> merged = current.train;
    for (const auto& set : store.sets)
        for (const auto& e : set.entries) merged.push_back(e.pair);
    return merged;
}

// ---------------------------------------------------------------------------
// Persistence: corpus-format records plus a sidecar of (task_id, difficulty,
// rank), aligned line by line.
// ---------------------------------------------------------------------------

inline void save_replay_store(const ReplayStore& store, const std::string& records_path,
                              const std::string& sidecar_path) {
    std::string records, sidecar;
    for (const auto& set : store.sets) {
        for (std::size_t rank = 0; rank < set.entries.size(); ++rank) {
            const auto& e = set.entries[rank];
            records += pair_to_json(e.pair).dump();
            records += '\n';
            nlohmann::ordered_json meta;
            meta["id"] = e.pair.id;
            meta["task_id"] = set.task_id;
            meta["difficulty"] = e.difficulty;
            meta["rank"] = rank;
            meta["index"] = e.pair.index;
            sidecar += meta.dump();
            sidecar += '\n';
        }
    }
    write_file(records_path, records);
    write_file(sidecar_path, sidecar);
}

inline ReplayStore load_replay_store(const std::string& records_path,
                                     const std::string& sidecar_path, std::size_t total_cap) {
    ReplayStore store;
    store.total_cap = total_cap;
    auto rec_lines = split_lines(read_file(records_path));
    auto meta_lines = split_lines(read_file(sidecar_path));
    if (rec_lines.size() != meta_lines.size())
        throw ParseError("replay store: records and sidecar line counts differ");
    for (std::size_t i = 0; i < rec_lines.size(); ++i) {
        if (rec_lines[i].empty()) continue;
        nlohmann::json rec, meta;
        try {
            rec = nlohmann::json::parse(rec_lines[i]);
            meta = nlohmann::json::parse(meta_lines[i]);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(records_path + ":" + std::to_string(i + 1) + ": " + e.what());
        }
        ScoredPair sp;
        sp.pair.id = rec.at("id").get<std::string>();
        sp.pair.lang = parse_lang(rec.at("lang").get<std::string>());
        sp.pair.buggy = rec.at("buggy").get<std::string>();
        sp.pair.context = rec.at("context").get<std::string>();
        sp.pair.fixed = rec.at("fixed").get<std::string>();
        sp.pair.index = meta.at("index").get<std::size_t>();
        sp.difficulty = meta.at("difficulty").get<double>();
        int task_id = meta.at("task_id").get<int>();
        if (store.sets.empty() || store.sets.back().task_id != task_id) {
            ExampleSet set;
            set.task_id = task_id;
            store.sets.push_back(set);
        }
        store.sets.back().entries.push_back(std::move(sp));
    }
    for (auto& s : store.sets) s.capacity = s.entries.size();
    return store;
}

}  // namespace circle
