#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "circle/common.hpp"
#include "circle/corpus.hpp"
#include "circle/generator.hpp"
#include "circle/model.hpp"
#include "circle/trainer.hpp"

namespace circle {

// Declarative run configuration: one JSON file defines the stream, the model,
// the training and generation settings, and the ablation flags; command-line
// flags override individual fields.

struct TaskSpec {
    int task_id = 1;
    Lang lang = Lang::Python;
    std::optional<std::string> corpus_path;  // either a corpus file...
    std::uint64_t gen_seed = 0;              // ...or a generator spec
    std::size_t gen_n = 0;

    bool uses_generator() const { return !corpus_path.has_value(); }
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string out_dir;
    ModelConfig model;
    TrainConfig train;
    GenConfig gen;
    bool rerepair_on = true;
    std::optional<std::string> rerepair_tables_path;
    std::vector<TaskSpec> stream;

    void validate() const {
        model.validate();
        train.validate();
        gen.validate();
        if (stream.empty()) throw ValidationError("run config: stream must list at least one task");
        for (std::size_t i = 0; i < stream.size(); ++i) {
            if (stream[i].task_id != static_cast<int>(i) + 1)
                throw ValidationError("run config: task ids must increase strictly from 1");
            if (!stream[i].uses_generator() && stream[i].gen_n > 0)
                throw ValidationError("run config: task " + std::to_string(stream[i].task_id) +
                                      " sets both corpus path and generator spec");
        }
    }
};

inline RunConfig parse_run_config(const nlohmann::json& j) {
    RunConfig rc;
    rc.seed = j.value("seed", 0ULL);
    rc.out_dir = j.value("out_dir", std::string());
    if (j.contains("model")) {
        const auto& m = j.at("model");
        rc.model.layers = m.value("layers", rc.model.layers);
        rc.model.heads = m.value("heads", rc.model.heads);
        rc.model.d_model = m.value("d_model", rc.model.d_model);
        rc.model.d_ff = m.value("d_ff", rc.model.d_ff);
        rc.model.dropout = m.value("dropout", rc.model.dropout);
        rc.model.max_positions = m.value("max_positions", rc.model.max_positions);
        rc.model.vocab_size = m.value("vocab_size", 512);
    } else {
        rc.model.vocab_size = 512;
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        rc.train.max_epochs = t.value("max_epochs", rc.train.max_epochs);
        rc.train.patience = t.contains("patience")
                                ? t.at("patience").get<int>()
                                : std::min(rc.train.patience, rc.train.max_epochs);
        rc.train.lr = t.value("lr", rc.train.lr);
        rc.train.batch_size = t.value("batch_size", rc.train.batch_size);
        rc.train.weight_decay = t.value("weight_decay", rc.train.weight_decay);
        rc.train.lambda = t.value("lambda", rc.train.lambda);
        rc.train.n_per_task = t.value("n_per_task", rc.train.n_per_task);
        rc.train.total_cap = t.value("total_cap", rc.train.total_cap);
        rc.train.m = t.value("m", rc.train.m);
        rc.train.prompt_enabled = t.value("prompt", rc.train.prompt_enabled);
        rc.train.continual_enabled = t.value("continual", rc.train.continual_enabled);
        rc.train.ewc_accumulate = t.value("ewc_accumulate", rc.train.ewc_accumulate);
        rc.train.replay_oversample = t.value("replay_oversample", rc.train.replay_oversample);
        if (!rc.train.continual_enabled &&
            (t.contains("n_per_task") || t.contains("total_cap") || t.contains("m") ||
             t.contains("lambda")))
            throw ValidationError(
                "run config: continual learning is off, replay/EWC settings are not allowed");
    }
    rc.train.seed = rc.seed;
    if (j.contains("gen")) {
        const auto& g = j.at("gen");
        rc.gen.beam = g.value("beam", rc.gen.beam);
        rc.gen.top_k = g.value("top_k", rc.gen.top_k);
        rc.gen.top_p = g.value("top_p", rc.gen.top_p);
        rc.gen.max_candidates = g.value("max_candidates", rc.gen.max_candidates);
        rc.gen.max_len = g.value("max_len", rc.gen.max_len);
    }
    rc.gen.seed = rc.seed;
    rc.rerepair_on = j.value("rerepair", true);
    if (j.contains("rerepair_tables"))
        rc.rerepair_tables_path = j.at("rerepair_tables").get<std::string>();
    if (!j.contains("stream")) throw ValidationError("run config: missing stream definition");
    for (const auto& tj : j.at("stream")) {
        TaskSpec spec;
        spec.task_id = tj.at("task_id").get<int>();
        spec.lang = parse_lang(tj.at("lang").get<std::string>());
        if (tj.contains("corpus")) {
            spec.corpus_path = tj.at("corpus").get<std::string>();
        } else if (tj.contains("generator")) {
            spec.gen_seed = tj.at("generator").value("seed", 0ULL);
            spec.gen_n = tj.at("generator").at("n").get<std::size_t>();
        } else {
            throw ValidationError("run config: task " + std::to_string(spec.task_id) +
                                  " needs a corpus path or a generator spec");
        }
        rc.stream.push_back(std::move(spec));
    }
    rc.validate();
    return rc;
}

inline RunConfig load_run_config(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    try {
        return parse_run_config(j);
    } catch (const Error& e) {
        throw ValidationError(path + ": " + e.what());
    }
}

// Referenced corpus files must resolve before any artifact is written.
inline void check_paths_resolvable(const RunConfig& rc) {
    for (const auto& spec : rc.stream) {
        if (spec.corpus_path && !std::filesystem::exists(*spec.corpus_path))
            throw ValidationError("run config: corpus file not found: " + *spec.corpus_path);
    }
    if (rc.rerepair_tables_path && !std::filesystem::exists(*rc.rerepair_tables_path))
        throw ValidationError("run config: rerepair tables not found: " + *rc.rerepair_tables_path);
}

inline TaskStream build_task_stream(const RunConfig& rc) {
    TaskStream stream;
    for (const auto& spec : rc.stream) {
        if (spec.uses_generator()) {
            stream.tasks.push_back(
                generate_synthetic_corpus(spec.lang, spec.gen_seed, spec.gen_n, spec.task_id));
        } else {
            TaskDataset ds = load_corpus(*spec.corpus_path, spec.task_id);
            if (ds.size() > 0 && ds.lang != spec.lang)
                throw ValidationError("run config: corpus language does not match task " +
                                      std::to_string(spec.task_id));
            ds.lang = spec.lang;
            stream.tasks.push_back(std::move(ds));
        }
    }
    return stream;
}

// The default stream from the language-popularity ordering.
inline std::vector<Lang> default_task_order() {
    return {Lang::Javascript, Lang::Python, Lang::Java, Lang::C};
}

}  // namespace circle
