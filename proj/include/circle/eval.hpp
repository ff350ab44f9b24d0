#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "circle/common.hpp"
#include "circle/corpus.hpp"
#include "circle/generator.hpp"
#include "circle/rerepair.hpp"

namespace circle {

// ---------------------------------------------------------------------------
// Exact match: whitespace-normalized token equality. Patches are lexed into
// identifier/number runs and single symbol characters, so spacing differences
// like "(def &(def - 1))" vs "(def & (def - 1))" do not matter but any token
// difference does.
// ---------------------------------------------------------------------------

inline std::vector<std::string> lex_patch(const std::string& text) {
    std::vector<std::string> tokens;
    std::size_t i = 0;
    while (i < text.size()) {
        char c = text[i];
        if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
            ++i;
            continue;
        }
        if (is_ident_char(c)) {
            std::size_t j = i;
            while (j < text.size() && is_ident_char(text[j])) ++j;
            tokens.push_back(text.substr(i, j - i));
            i = j;
        } else {
            tokens.push_back(std::string(1, c));
            ++i;
        }
    }
    return tokens;
}

struct MatchResult {
    bool matched = false;
    std::optional<int> rank;
};

inline MatchResult exact_match(const std::vector<CandidatePatch>& candidates,
                               const std::string& truth) {
    const std::vector<std::string> truth_tokens = lex_patch(truth);
    for (const auto& c : candidates) {
        if (lex_patch(c.text) == truth_tokens) return {true, c.rank};
    }
    return {false, std::nullopt};
}

// ---------------------------------------------------------------------------
// Task-progress matrix.
// ---------------------------------------------------------------------------

struct BugOutcome {
    std::string bug_id;
    bool matched = false;
    std::optional<int> rank;
};

struct EvalCell {
    int benchmark_task = 0;
    Lang lang = Lang::Python;
    int fixed_count = 0;
    int total = 0;
    std::vector<BugOutcome> bugs;
};

struct EvalRow {
    int after_task = 0;  // checkpoint trained through this task
    std::vector<EvalCell> cells;
};

struct EvalMatrix {
    std::vector<EvalRow> rows;

    const EvalCell* cell(int after_task, int benchmark_task) const {
        for (const auto& r : rows) {
            if (r.after_task != after_task) continue;
            for (const auto& c : r.cells)
                if (c.benchmark_task == benchmark_task) return &c;
        }
        return nullptr;
    }
};

// Per-candidate log record for one bug; persisted so every matrix cell can be
// recounted offline.
struct CandidateLogEntry {
    std::string bug_id;
    std::string truth;
    int rank = 0;
    CandidateSource source = CandidateSource::Beam;
    double logprob = 0.0;
    std::string raw_text;   // as decoded from the model
    std::string text;       // after optional re-repairing
};

inline std::string candidate_log_to_jsonl(const std::vector<CandidateLogEntry>& entries) {
    std::string out;
    for (const auto& e : entries) {
        nlohmann::ordered_json rec;
        rec["bug_id"] = e.bug_id;
        rec["truth"] = e.truth;
        rec["rank"] = e.rank;
        rec["source"] = to_string(e.source);
        rec["logprob"] = e.logprob;
        rec["raw_text"] = e.raw_text;
        rec["text"] = e.text;
        out += rec.dump();
        out += '\n';
    }
    return out;
}

inline std::vector<CandidateLogEntry> candidate_log_from_jsonl(const std::string& content) {
    std::vector<CandidateLogEntry> entries;
    auto lines = split_lines(content);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(lines[i]);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("candidate log line " + std::to_string(i + 1) + ": " + e.what());
        }
        CandidateLogEntry e;
        e.bug_id = rec.at("bug_id").get<std::string>();
        e.truth = rec.at("truth").get<std::string>();
        e.rank = rec.at("rank").get<int>();
        e.source = rec.at("source").get<std::string>() == "beam" ? CandidateSource::Beam
                                                                 : CandidateSource::Sample;
        e.logprob = rec.at("logprob").get<double>();
        e.raw_text = rec.at("raw_text").get<std::string>();
        e.text = rec.at("text").get<std::string>();
        entries.push_back(std::move(e));
    }
    return entries;
}

// Evaluates one checkpoint against the test splits of the given benchmarks.
// Per bug: generate candidates, optionally re-repair, score exact match.
// Candidate logs (one vector per benchmark, aligned with `benchmarks`) are
// returned for persistence when requested.
inline EvalRow evaluate_checkpoint(const Checkpoint& ckpt, const Vocabulary& vocab,
                                   const std::vector<const TaskDataset*>& benchmarks,
                                   const GenConfig& gen_cfg, bool rerepair_on,
                                   bool prompt_enabled = true,
                                   std::vector<std::vector<CandidateLogEntry>>* logs = nullptr,
                                   const KeywordMap& kw_map = default_keyword_map(),
                                   const std::vector<FillRule>& fill_rules = default_fill_rules()) {
    if (ckpt.vocab_hash != vocab.hash())
        throw CompatibilityError("evaluate_checkpoint: checkpoint/vocabulary mismatch");
    EvalRow row;
    row.after_task = ckpt.task_id;
    if (logs) logs->assign(benchmarks.size(), {});
    for (std::size_t b = 0; b < benchmarks.size(); ++b) {
        const TaskDataset& bench = *benchmarks[b];
        EvalCell cell;
        cell.benchmark_task = bench.task_id;
        cell.lang = bench.lang;
        cell.total = static_cast<int>(bench.test.size());
        for (std::size_t bi = 0; bi < bench.test.size(); ++bi) {
            const BugFixPair& bug = bench.test[bi];
            GenConfig per_bug = gen_cfg;
            per_bug.seed = derive_seed(gen_cfg.seed, "eval-bug",
                                       fnv1a(bug.id, static_cast<std::uint64_t>(ckpt.task_id) + 0x9e37));
            std::vector<CandidatePatch> candidates =
                generate_patches(ckpt, vocab, bug, per_bug, prompt_enabled);
            std::vector<CandidatePatch> scored = candidates;
            if (rerepair_on)
                for (auto& c : scored) c.text = rerepair(c.text, bug.lang, kw_map, fill_rules);
            MatchResult m = exact_match(scored, bug.fixed);
            cell.bugs.push_back({bug.id, m.matched, m.rank});
            if (m.matched) ++cell.fixed_count;
            if (logs) {
                for (std::size_t ci = 0; ci < candidates.size(); ++ci) {
                    CandidateLogEntry e;
                    e.bug_id = bug.id;
                    e.truth = bug.fixed;
                    e.rank = candidates[ci].rank;
                    e.source = candidates[ci].source;
                    e.logprob = candidates[ci].logprob;
                    e.raw_text = candidates[ci].text;
                    e.text = scored[ci].text;
                    (*logs)[b].push_back(std::move(e));
                }
            }
        }
        row.cells.push_back(std::move(cell));
    }
    return row;
}

// ---------------------------------------------------------------------------
// Forgetting report: per-benchmark running maxima (joint with a baseline when
// supplied), per-task drops, and CIRCLE − baseline deltas.
// ---------------------------------------------------------------------------

struct ForgettingEntry {
    int benchmark_task = 0;
    int after_task = 0;
    int current = 0;
    int best_so_far = 0;   // running max of this matrix's own column
    int upperbound = 0;    // joint running max when a baseline is present
    int drop = 0;          // best_so_far − current, >= 0
    std::optional<int> baseline_current;
};

struct ForgettingReport {
    std::vector<ForgettingEntry> entries;
    std::optional<int> total_delta;  // Σ (CIRCLE − baseline) over shared cells
};

inline ForgettingReport forgetting_report(const EvalMatrix& matrix,
                                          const EvalMatrix* baseline = nullptr) {
    ForgettingReport report;
    if (baseline && baseline->rows.size() != matrix.rows.size())
        throw CompatibilityError("forgetting_report: matrices cover different streams");
    int delta_sum = 0;
    bool have_delta = baseline != nullptr;
    // iterate benchmarks in first-seen order
    std::vector<int> benchmarks;
    for (const auto& r : matrix.rows)
        for (const auto& c : r.cells)
            if (std::find(benchmarks.begin(), benchmarks.end(), c.benchmark_task) == benchmarks.end())
                benchmarks.push_back(c.benchmark_task);
    for (int bench : benchmarks) {
        int best = 0, joint = 0;
        for (const auto& r : matrix.rows) {
            const EvalCell* cell = matrix.cell(r.after_task, bench);
            if (!cell) continue;
            const EvalCell* base_cell =
                baseline ? baseline->cell(r.after_task, bench) : nullptr;
            if (baseline && !base_cell)
                throw CompatibilityError("forgetting_report: baseline matrix missing cell (task " +
                                         std::to_string(r.after_task) + ", benchmark " +
                                         std::to_string(bench) + ")");
            best = std::max(best, cell->fixed_count);
            joint = std::max({joint, cell->fixed_count,
                              base_cell ? base_cell->fixed_count : 0});
            ForgettingEntry e;
            e.benchmark_task = bench;
            e.after_task = r.after_task;
            e.current = cell->fixed_count;
            e.best_so_far = best;
            e.upperbound = joint;
            e.drop = best - cell->fixed_count;
            if (base_cell) {
                e.baseline_current = base_cell->fixed_count;
                delta_sum += cell->fixed_count - base_cell->fixed_count;
            }
            report.entries.push_back(e);
        }
    }
    if (have_delta) report.total_delta = delta_sum;
    return report;
}

// ---------------------------------------------------------------------------
// Serialization: JSON and CSV for the matrix and the report, plus the
// plain-text task-progress table.
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json eval_matrix_to_json(const EvalMatrix& m) {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& r : m.rows) {
        nlohmann::ordered_json row;
        row["after_task"] = r.after_task;
        nlohmann::ordered_json cells = nlohmann::ordered_json::array();
        for (const auto& c : r.cells) {
            nlohmann::ordered_json cell;
            cell["benchmark_task"] = c.benchmark_task;
            cell["lang"] = to_string(c.lang);
            cell["fixed"] = c.fixed_count;
            cell["total"] = c.total;
            nlohmann::ordered_json bugs = nlohmann::ordered_json::array();
            for (const auto& b : c.bugs) {
                nlohmann::ordered_json bug;
                bug["id"] = b.bug_id;
                bug["matched"] = b.matched;
                if (b.rank) bug["rank"] = *b.rank;
                bugs.push_back(bug);
            }
            cell["bugs"] = bugs;
            cells.push_back(cell);
        }
        row["cells"] = cells;
        rows.push_back(row);
    }
    nlohmann::ordered_json out;
    out["format"] = "circle-eval-matrix";
    out["rows"] = rows;
    return out;
}

inline EvalMatrix eval_matrix_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "circle-eval-matrix")
        throw ParseError("not a circle eval matrix");
    EvalMatrix m;
    for (const auto& rj : j.at("rows")) {
        EvalRow r;
        r.after_task = rj.at("after_task").get<int>();
        for (const auto& cj : rj.at("cells")) {
            EvalCell c;
            c.benchmark_task = cj.at("benchmark_task").get<int>();
            c.lang = parse_lang(cj.at("lang").get<std::string>());
            c.fixed_count = cj.at("fixed").get<int>();
            c.total = cj.at("total").get<int>();
            for (const auto& bj : cj.at("bugs")) {
                BugOutcome b;
                b.bug_id = bj.at("id").get<std::string>();
                b.matched = bj.at("matched").get<bool>();
                if (bj.contains("rank")) b.rank = bj.at("rank").get<int>();
                c.bugs.push_back(std::move(b));
            }
            r.cells.push_back(std::move(c));
        }
        m.rows.push_back(std::move(r));
    }
    return m;
}

inline std::string eval_matrix_to_csv(const EvalMatrix& m) {
    std::string out = "after_task,benchmark_task,lang,fixed,total\n";
    for (const auto& r : m.rows)
        for (const auto& c : r.cells)
            out += std::to_string(r.after_task) + "," + std::to_string(c.benchmark_task) + "," +
                   to_string(c.lang) + "," + std::to_string(c.fixed_count) + "," +
                   std::to_string(c.total) + "\n";
    return out;
}

inline nlohmann::ordered_json forgetting_report_to_json(const ForgettingReport& r) {
    nlohmann::ordered_json entries = nlohmann::ordered_json::array();
    for (const auto& e : r.entries) {
        nlohmann::ordered_json ej;
        ej["benchmark_task"] = e.benchmark_task;
        ej["after_task"] = e.after_task;
        ej["current"] = e.current;
        ej["best_so_far"] = e.best_so_far;
        ej["upperbound"] = e.upperbound;
        ej["drop"] = e.drop;
        if (e.baseline_current) ej["baseline_current"] = *e.baseline_current;
        entries.push_back(ej);
    }
    nlohmann::ordered_json out;
    out["format"] = "circle-forgetting-report";
    out["entries"] = entries;
    if (r.total_delta) out["total_delta"] = *r.total_delta;
    return out;
}

inline std::string forgetting_report_to_csv(const ForgettingReport& r) {
    std::string out = "benchmark_task,after_task,current,best_so_far,upperbound,drop,baseline_current\n";
    for (const auto& e : r.entries) {
        out += std::to_string(e.benchmark_task) + "," + std::to_string(e.after_task) + "," +
               std::to_string(e.current) + "," + std::to_string(e.best_so_far) + "," +
               std::to_string(e.upperbound) + "," + std::to_string(e.drop) + ",";
        out += e.baseline_current ? std::to_string(*e.baseline_current) : std::string("");
        out += "\n";
    }
    return out;
}

// Plain-text task-progress table: one row per checkpoint, one column per
// benchmark, cells "fixed/total", with a per-row sum.
inline std::string render_report_table(const EvalMatrix& m, const ForgettingReport* report = nullptr) {
    std::vector<int> benchmarks;
    for (const auto& r : m.rows)
        for (const auto& c : r.cells)
            if (std::find(benchmarks.begin(), benchmarks.end(), c.benchmark_task) == benchmarks.end())
                benchmarks.push_back(c.benchmark_task);
    std::string out = "task-progress (exact match)\n";
    out += "checkpoint";
    for (int b : benchmarks) out += "\ttask" + std::to_string(b);
    out += "\tsum\n";
    for (const auto& r : m.rows) {
        out += "after_task" + std::to_string(r.after_task);
        int sum = 0;
        for (int b : benchmarks) {
            const EvalCell* c = m.cell(r.after_task, b);
            out += "\t";
            if (c) {
                out += std::to_string(c->fixed_count) + "/" + std::to_string(c->total);
                sum += c->fixed_count;
            } else {
                out += "-";
            }
        }
        out += "\t" + std::to_string(sum) + "\n";
    }
    if (report) {
        out += "upperbound\n";
        for (int b : benchmarks) {
            out += "task" + std::to_string(b) + ":";
            for (const auto& e : report->entries)
                if (e.benchmark_task == b)
                    out += "\t" + std::to_string(e.upperbound);
            out += "\n";
        }
    }
    return out;
}

}  // namespace circle
