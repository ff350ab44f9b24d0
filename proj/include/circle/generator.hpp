#pragma once

#include <set>
#include <string>
#include <vector>

#include "circle/common.hpp"
#include "circle/corpus.hpp"
#include "circle/model.hpp"
#include "circle/prompt.hpp"
#include "circle/replay.hpp"
#include "circle/tokenizer.hpp"

namespace circle {

struct GenConfig {
    int beam = 8;              // paper setting: 250
    int top_k = 20;
    double top_p = 0.95;
    int max_candidates = 32;   // paper setting: 1000
    int max_len = 48;
    std::uint64_t seed = 0;

    void validate() const {
        if (beam < 1) throw ConfigError("gen config: beam must be >= 1");
        if (top_k < 1) throw ConfigError("gen config: top_k must be >= 1");
        if (top_p <= 0.0 || top_p > 1.0) throw ConfigError("gen config: top_p must be in (0,1]");
        if (max_candidates < beam) throw ConfigError("gen config: max_candidates must be >= beam");
        if (max_len < 1) throw ConfigError("gen config: max_len must be >= 1");
    }
};

enum class CandidateSource { Beam, Sample };

inline const char* to_string(CandidateSource s) {
    return s == CandidateSource::Beam ? "beam" : "sample";
}

struct CandidatePatch {
    std::string text;
    std::vector<int> ids;  // content tokens, no specials
    double logprob = 0.0;
    int rank = 0;  // 1-based within a result list
    CandidateSource source = CandidateSource::Beam;
};

namespace detail {

// Next-token log-probabilities with pad and bos masked out; eos is also
// masked while the content is empty so candidates are never blank.
inline Eigen::ArrayXd masked_log_softmax(const RowVec& logits, bool allow_eos) {
    Eigen::ArrayXd a = logits.transpose().array();
    a(Vocabulary::kPad) = nn::kMaskNegInf;
    a(Vocabulary::kBos) = nn::kMaskNegInf;
    if (!allow_eos) a(Vocabulary::kEos) = nn::kMaskNegInf;
    double mx = a.maxCoeff();
    double lse = mx + std::log((a - mx).exp().sum());
    return a - lse;
}

struct Hyp {
    std::vector<int> ids;
    double score = 0.0;
};

inline bool hyp_better(const Hyp& a, const Hyp& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.ids < b.ids;  // deterministic tie-break
}

}  // namespace detail

// Length-bounded beam search with eos termination. Each step ranks every
// (hypothesis, token) continuation and keeps the best `beam` of them; an eos
// continuation that wins a slot completes its hypothesis (log-probability of
// eos included), and survivors at max_len complete without a stop term. With
// beam=1 this follows the greedy argmax chain exactly. Returns at most `beam`
// completed sequences sorted by total log-probability; fully deterministic.
inline std::vector<CandidatePatch> beam_search(const Checkpoint& ckpt, const Vocabulary& vocab,
                                               const std::vector<int>& src, const GenConfig& cfg) {
    cfg.validate();
    Mat enc_out = encode_source(ckpt, src);
    const std::size_t beam = static_cast<std::size_t>(cfg.beam);

    std::vector<detail::Hyp> live{{{}, 0.0}};
    std::vector<detail::Hyp> completed;

    auto keep_best = [](std::vector<detail::Hyp>& v, std::size_t n) {
        std::sort(v.begin(), v.end(), detail::hyp_better);
        if (v.size() > n) v.resize(n);
    };

    for (int step = 0; step < cfg.max_len && !live.empty(); ++step) {
        struct Continuation {
            detail::Hyp result;  // content ids after the step (eos not appended)
            bool is_eos;
        };
        std::vector<Continuation> candidates;
        for (const auto& hyp : live) {
            std::vector<int> dec_in;
            dec_in.push_back(Vocabulary::kBos);
            dec_in.insert(dec_in.end(), hyp.ids.begin(), hyp.ids.end());
            RowVec logits = next_token_logits(ckpt, enc_out, dec_in);
            Eigen::ArrayXd logp = detail::masked_log_softmax(logits, !hyp.ids.empty());
            for (int tok = 0; tok < ckpt.config.vocab_size; ++tok) {
                if (tok == Vocabulary::kPad || tok == Vocabulary::kBos) continue;
                if (tok == Vocabulary::kEos) {
                    if (hyp.ids.empty()) continue;
                    candidates.push_back({{hyp.ids, hyp.score + logp(tok)}, true});
                    continue;
                }
                detail::Hyp next = hyp;
                next.ids.push_back(tok);
                next.score += logp(tok);
                candidates.push_back({{std::move(next.ids), next.score}, false});
            }
        }
        std::sort(candidates.begin(), candidates.end(),
                  [](const Continuation& a, const Continuation& b) {
                      if (a.result.score != b.result.score) return a.result.score > b.result.score;
                      if (a.result.ids != b.result.ids) return a.result.ids < b.result.ids;
                      return a.is_eos && !b.is_eos;
                  });
        if (candidates.size() > beam) candidates.resize(beam);
        live.clear();
        for (auto& c : candidates) {
            if (c.is_eos || step + 1 == cfg.max_len)
                completed.push_back(std::move(c.result));
            else
                live.push_back(std::move(c.result));
        }
        keep_best(completed, beam);
    }
    keep_best(completed, beam);

    std::vector<CandidatePatch> out;
    out.reserve(completed.size());
    for (std::size_t i = 0; i < completed.size(); ++i) {
        CandidatePatch c;
        c.ids = completed[i].ids;
        c.text = vocab.decode(c.ids);
        c.logprob = completed[i].score;
        c.rank = static_cast<int>(i) + 1;
        c.source = CandidateSource::Beam;
        out.push_back(std::move(c));
    }
    return out;
}

namespace detail {

// The top-k and nucleus sets are both prefixes of the probability-sorted
// token order, so their intersection is the shorter prefix.
struct FilterStep {
    std::vector<int> allowed;       // token ids inside the filter set
    std::vector<double> probs;      // renormalized probabilities, same order
    int chosen = -1;
};

inline FilterStep filter_distribution(const Eigen::ArrayXd& logp, int top_k, double top_p) {
    std::vector<int> order;
    order.reserve(static_cast<std::size_t>(logp.size()));
    for (int i = 0; i < logp.size(); ++i)
        if (logp(i) > nn::kMaskNegInf / 2) order.push_back(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (logp(a) != logp(b)) return logp(a) > logp(b);
        return a < b;
    });
    std::size_t k = std::min<std::size_t>(order.size(), static_cast<std::size_t>(top_k));
    std::size_t nucleus = order.size();
    if (top_p < 1.0) {
        double acc = 0.0;
        for (std::size_t i = 0; i < order.size(); ++i) {
            acc += std::exp(logp(order[i]));
            if (acc >= top_p) {
                nucleus = i + 1;
                break;
            }
        }
    }
    std::size_t keep = std::min(k, nucleus);
    FilterStep fs;
    double z = 0.0;
    for (std::size_t i = 0; i < keep; ++i) {
        fs.allowed.push_back(order[i]);
        double p = std::exp(logp(order[i]));
        fs.probs.push_back(p);
        z += p;
    }
    for (double& p : fs.probs) p /= z;
    return fs;
}

}  // namespace detail

// n sequences sampled step-wise from the top-k ∩ top-p filtered, renormalized
// next-token distribution. Seeded and reproducible. When `trace` is given,
// every step's filter set and chosen token are recorded.
inline std::vector<CandidatePatch> filtered_sample(const Checkpoint& ckpt, const Vocabulary& vocab,
                                                   const std::vector<int>& src, const GenConfig& cfg,
                                                   std::size_t n,
                                                   std::vector<detail::FilterStep>* trace = nullptr) {
    cfg.validate();
    if (n == 0) return {};
    Mat enc_out = encode_source(ckpt, src);
    std::vector<CandidatePatch> out;
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(cfg.seed, "filtered-sample", i));
        std::vector<int> ids;
        double logprob = 0.0;
        for (int step = 0; step < cfg.max_len; ++step) {
            std::vector<int> dec_in;
            dec_in.push_back(Vocabulary::kBos);
            dec_in.insert(dec_in.end(), ids.begin(), ids.end());
            RowVec logits = next_token_logits(ckpt, enc_out, dec_in);
            Eigen::ArrayXd logp = detail::masked_log_softmax(logits, !ids.empty());
            detail::FilterStep fs = detail::filter_distribution(logp, cfg.top_k, cfg.top_p);
            double u = rng.next_double();
            double acc = 0.0;
            int chosen = fs.allowed.back();
            for (std::size_t j = 0; j < fs.allowed.size(); ++j) {
                acc += fs.probs[j];
                if (u < acc) {
                    chosen = fs.allowed[j];
                    break;
                }
            }
            fs.chosen = chosen;
            if (trace) trace->push_back(fs);
            logprob += logp(chosen);
            if (chosen == Vocabulary::kEos) break;
            ids.push_back(chosen);
        }
        CandidatePatch c;
        c.ids = ids;
        c.text = vocab.decode(ids);
        c.logprob = logprob;
        c.source = CandidateSource::Sample;
        out.push_back(std::move(c));
    }
    return out;
}

// Beam candidates first, then sampled candidates by descending log-probability,
// text-level deduplicated and capped. Ranks are reassigned 1..n.
inline std::vector<CandidatePatch> merge_candidates(std::vector<CandidatePatch> beam_results,
                                                    std::vector<CandidatePatch> sampled,
                                                    std::size_t max_candidates) {
    std::vector<CandidatePatch> out;
    std::set<std::string> seen;
    auto push = [&](CandidatePatch&& c) {
        if (out.size() >= max_candidates) return;
        if (!seen.insert(c.text).second) return;
        c.rank = static_cast<int>(out.size()) + 1;
        out.push_back(std::move(c));
    };
    for (auto& c : beam_results) push(std::move(c));
    std::stable_sort(sampled.begin(), sampled.end(),
                     [](const CandidatePatch& a, const CandidatePatch& b) {
                         return a.logprob > b.logprob;
                     });
    for (auto& c : sampled) push(std::move(c));
    return out;
}

// Full candidate generation for one bug: prompt, beam search, then sampling
// top-up until the candidate cap (bounded retries in case of duplicates).
inline std::vector<CandidatePatch> generate_patches(const Checkpoint& ckpt, const Vocabulary& vocab,
                                                    const BugFixPair& pair, const GenConfig& cfg,
                                                    bool prompt_enabled = true) {
    cfg.validate();
    PromptedExample pe = render(pair, prompt_enabled);
    std::vector<int> src = truncate_tokens(vocab.encode(pe.source_text),
                                           static_cast<std::size_t>(ckpt.config.max_positions));
    std::vector<CandidatePatch> beam_results = beam_search(ckpt, vocab, src, cfg);
    std::size_t cap = static_cast<std::size_t>(cfg.max_candidates);
    std::vector<CandidatePatch> merged = merge_candidates(beam_results, {}, cap);
    if (merged.size() < cap) {
        std::size_t need = cap - merged.size();
        GenConfig sample_cfg = cfg;
        for (int round = 0; round < 4 && merged.size() < cap; ++round) {
            sample_cfg.seed = derive_seed(cfg.seed, "sample-round", static_cast<std::uint64_t>(round));
            std::vector<CandidatePatch> sampled =
                filtered_sample(ckpt, vocab, src, sample_cfg, need * 2);
            merged = merge_candidates(std::move(merged), std::move(sampled), cap);
            need = cap - merged.size();
        }
    }
    return merged;
}

}  // namespace circle
