#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "circle/common.hpp"
#include "circle/model.hpp"
#include "circle/replay.hpp"

namespace circle {

// Elastic weight consolidation on a sample of replayed examples. F is the
// empirical diagonal Fisher (mean squared loss gradient), which is the usual
// EWC estimator and keeps every entry nonnegative.

struct FisherSnapshot {
    std::vector<double> fisher;     // F_i >= 0, same indexing as Checkpoint.params
    std::vector<double> theta_ref;  // anchor parameters
    double lambda = 110000.0;
    std::vector<std::string> sample_ids;
    std::size_t sample_budget = 0;  // requested M
    std::uint64_t seed = 0;
};

inline FisherSnapshot compute_fisher(const Checkpoint& ckpt, const ReplayStore& store,
                                     const Vocabulary& vocab, std::size_t m, std::uint64_t seed,
                                     double lambda, bool prompt_enabled = true) {
    if (store.sets.empty() || store.total_entries() == 0)
        throw PreconditionError("compute_fisher: replay store is empty");
    if (m < 1) throw PreconditionError("compute_fisher: M must be >= 1");

    std::vector<const ScoredPair*> pool;
    for (const auto& set : store.sets)
        for (const auto& e : set.entries) pool.push_back(&e);

    Rng rng(derive_seed(seed, "fisher-sample"));
    std::vector<std::size_t> picks = rng.sample_without_replacement(pool.size(), m);

    FisherSnapshot snap;
    snap.lambda = lambda;
    snap.sample_budget = m;
    snap.seed = seed;
    snap.theta_ref = ckpt.params;
    snap.fisher.assign(ckpt.params.size(), 0.0);

    std::vector<double> grad(ckpt.params.size());
    for (std::size_t idx : picks) {
        const BugFixPair& pair = pool[idx]->pair;
        snap.sample_ids.push_back(pair.id);
        std::fill(grad.begin(), grad.end(), 0.0);
        EncodedExample ex = encode_example(pair, vocab, ckpt.config, prompt_enabled);
        loss_with_grad(ckpt, ex, grad);
        for (std::size_t i = 0; i < grad.size(); ++i) snap.fisher[i] += grad[i] * grad[i];
    }
    const double inv = 1.0 / static_cast<double>(picks.size());
    for (double& f : snap.fisher) f *= inv;
    return snap;
}

// EWC(θ) = λ · Σ_i F_i (θ_i − θ_ref_i)²
inline double ewc_penalty(const std::vector<double>& params, const FisherSnapshot& snap) {
    if (params.size() != snap.fisher.size() || params.size() != snap.theta_ref.size())
        throw CompatibilityError("ewc_penalty: parameter index maps do not match");
    double acc = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        double d = params[i] - snap.theta_ref[i];
        acc += snap.fisher[i] * d * d;
    }
    return snap.lambda * acc;
}

// d/dθ of the penalty: 2λ F ⊙ (θ − θ_ref), accumulated into grad.
inline void ewc_penalty_grad(const std::vector<double>& params, const FisherSnapshot& snap,
                             std::vector<double>& grad) {
    if (params.size() != snap.fisher.size() || grad.size() != params.size())
        throw CompatibilityError("ewc_penalty_grad: parameter index maps do not match");
    for (std::size_t i = 0; i < params.size(); ++i)
        grad[i] += 2.0 * snap.lambda * snap.fisher[i] * (params[i] - snap.theta_ref[i]);
}

// Eq. 5: batch loss plus the penalty; without a snapshot (task 1) it is the
// plain loss.
inline double total_objective(double batch_loss, const std::vector<double>& params,
                              const FisherSnapshot* snap) {
    if (snap == nullptr) return batch_loss;
    return batch_loss + ewc_penalty(params, *snap);
}

// ---------------------------------------------------------------------------
// Persistence: header (λ, M, seed, sample ids) + two float32 vectors.
// ---------------------------------------------------------------------------

inline void save_fisher(const FisherSnapshot& snap, const std::string& path) {
    nlohmann::ordered_json header;
    header["format"] = "circle-fisher";
    header["version"] = 1;
    header["lambda"] = snap.lambda;
    header["m"] = snap.sample_budget;
    header["seed"] = snap.seed;
    header["sample_ids"] = snap.sample_ids;
    header["count"] = snap.fisher.size();
    std::string out = header.dump();
    out += '\n';
    auto append_f32 = [&out](const std::vector<double>& v) {
        std::vector<float> f32(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) f32[i] = static_cast<float>(v[i]);
        out.append(reinterpret_cast<const char*>(f32.data()), f32.size() * sizeof(float));
    };
    append_f32(snap.fisher);
    append_f32(snap.theta_ref);
    write_file(path, out);
}

inline FisherSnapshot load_fisher(const std::string& path) {
    std::string content = read_file(path);
    std::size_t nl = content.find('\n');
    if (nl == std::string::npos) throw ParseError("fisher snapshot: missing header line");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(content.substr(0, nl));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("fisher header: ") + e.what());
    }
    if (header.value("format", "") != "circle-fisher")
        throw ParseError("not a circle fisher snapshot");
    FisherSnapshot snap;
    snap.lambda = header.at("lambda").get<double>();
    snap.sample_budget = header.at("m").get<std::size_t>();
    snap.seed = header.at("seed").get<std::uint64_t>();
    snap.sample_ids = header.at("sample_ids").get<std::vector<std::string>>();
    std::size_t count = header.at("count").get<std::size_t>();
    if (content.size() - nl - 1 != 2 * count * sizeof(float))
        throw ParseError("fisher snapshot: payload has wrong size");
    std::vector<float> f32(2 * count);
    std::memcpy(f32.data(), content.data() + nl + 1, 2 * count * sizeof(float));
    snap.fisher.resize(count);
    snap.theta_ref.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        snap.fisher[i] = static_cast<double>(f32[i]);
        snap.theta_ref[i] = static_cast<double>(f32[count + i]);
    }
    return snap;
}

}  // namespace circle
