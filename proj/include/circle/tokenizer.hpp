#pragma once

#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "circle/common.hpp"

namespace circle {

// Build-once subword vocabulary. Learned on the first task's corpus only and
// frozen afterwards; the excluded symbols reproduce the rare-symbol OOV
// condition ("<", "^", "{" by default), so they always encode as unk and the
// re-repair fill path stays exercisable end to end.

inline const std::vector<std::string>& default_excluded_symbols() {
    static const std::vector<std::string> symbols = {"<", "^", "{"};
    return symbols;
}

inline constexpr const char* kUnkSentinel = "<unk>";

class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;
    static constexpr int kNumSpecials = 4;

    const std::vector<std::string>& tokens() const { return tokens_; }
    int size() const { return static_cast<int>(tokens_.size()); }
    const std::vector<std::string>& excluded_symbols() const { return excluded_; }
    bool is_special(int id) const { return id >= 0 && id < kNumSpecials; }

    // FNV hash of the canonical serialization; checkpoints store it so an
    // incompatible vocabulary is caught at load time.
    std::uint64_t hash() const { return fnv1a(serialize()); }

    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;

    std::string serialize() const;
    static Vocabulary deserialize(const std::string& content);
    void save(const std::string& path) const { write_file(path, serialize()); }
    static Vocabulary load(const std::string& path) { return deserialize(read_file(path)); }

    friend Vocabulary build_vocab(const std::vector<std::string>& corpus, std::size_t size,
                                  const std::vector<std::string>& excluded);

private:
    std::vector<std::string> tokens_;    // index = id; first four are specials
    std::vector<std::string> excluded_;  // single-byte symbols banned from the alphabet
    std::size_t max_token_len_ = 1;
    std::unordered_set<std::string> token_set_;  // non-special tokens, for longest match

    void finalize() {
        token_set_.clear();
        max_token_len_ = 1;
        for (std::size_t i = kNumSpecials; i < tokens_.size(); ++i) {
            token_set_.insert(tokens_[i]);
            max_token_len_ = std::max(max_token_len_, tokens_[i].size());
        }
        id_of_.clear();
        for (std::size_t i = kNumSpecials; i < tokens_.size(); ++i)
            id_of_[tokens_[i]] = static_cast<int>(i);
    }
    std::unordered_map<std::string, int> id_of_;
};

namespace detail {

inline std::string escape_token(const std::string& t) {
    std::string out;
    for (char c : t) {
        switch (c) {
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\t': out += "\\t"; break;
            case ' ': out += "\\s"; break;
            case '\r': out += "\\r"; break;
            default: out += c;
        }
    }
    return out;
}

inline std::string unescape_token(const std::string& t) {
    std::string out;
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i] == '\\' && i + 1 < t.size()) {
            switch (t[++i]) {
                case '\\': out += '\\'; break;
                case 'n': out += '\n'; break;
                case 't': out += '\t'; break;
                case 's': out += ' '; break;
                case 'r': out += '\r'; break;
                default: throw ParseError("bad escape in vocabulary token");
            }
        } else {
            out += t[i];
        }
    }
    return out;
}

}  // namespace detail

// Greedy byte-pair-merge vocabulary. The base alphabet is printable ASCII
// plus tab/newline plus any other byte present in the corpus, minus the
// excluded symbols. Merges never cross whitespace or excluded symbols; the
// most frequent adjacent pair wins, ties broken by lexicographic pair order.
inline Vocabulary build_vocab(const std::vector<std::string>& corpus, std::size_t size,
                              const std::vector<std::string>& excluded = default_excluded_symbols()) {
    if (size < 64) throw ConfigError("build_vocab: size must be >= 64");
    if (corpus.empty()) throw ConfigError("build_vocab: corpus must be nonempty");

    std::set<char> banned;
    for (const auto& sym : excluded) {
        if (sym.size() != 1)
            throw ConfigError("build_vocab: excluded symbols must be single characters");
        banned.insert(sym[0]);
    }

    std::set<char> alphabet;
    for (char c = 0x20; c < 0x7f; ++c) alphabet.insert(c);
    alphabet.insert('\n');
    alphabet.insert('\t');
    for (const auto& s : corpus)
        for (char c : s) alphabet.insert(c);
    for (char c : banned) alphabet.erase(c);

    Vocabulary v;
    v.tokens_ = {"<pad>", "<bos>", "<eos>", kUnkSentinel};
    v.excluded_ = excluded;
    if (size < v.tokens_.size() + alphabet.size())
        throw ConfigError("build_vocab: size " + std::to_string(size) +
                          " too small to cover " + std::to_string(alphabet.size()) +
                          " base characters plus specials");
    for (char c : alphabet) v.tokens_.push_back(std::string(1, c));

    // Word histogram: split on whitespace, then split words at excluded
    // characters (those positions always encode as unk anyway).
    std::map<std::vector<std::string>, long> words;
    for (const auto& s : corpus) {
        std::vector<std::string> fragment;
        auto flush = [&]() {
            if (!fragment.empty()) {
                ++words[fragment];
                fragment.clear();
            }
        };
        for (char c : s) {
            if (c == ' ' || c == '\n' || c == '\t' || c == '\r' || banned.count(c)) {
                flush();
                continue;
            }
            fragment.emplace_back(1, c);
        }
        flush();
    }

    while (v.tokens_.size() < size) {
        std::map<std::pair<std::string, std::string>, long> pair_counts;
        for (const auto& [word, count] : words)
            for (std::size_t i = 0; i + 1 < word.size(); ++i)
                pair_counts[{word[i], word[i + 1]}] += count;
        std::pair<std::string, std::string> best;
        long best_count = 0;
        for (const auto& [pq, count] : pair_counts) {
            if (count > best_count) {
                best = pq;
                best_count = count;
            }
        }
        if (best_count < 2) break;  // nothing left that repeats
        std::string merged = best.first + best.second;
        v.tokens_.push_back(merged);
        std::map<std::vector<std::string>, long> next;
        for (const auto& [word, count] : words) {
            std::vector<std::string> w;
            w.reserve(word.size());
            for (std::size_t i = 0; i < word.size(); ++i) {
                if (i + 1 < word.size() && word[i] == best.first && word[i + 1] == best.second) {
                    w.push_back(merged);
                    ++i;
                } else {
                    w.push_back(word[i]);
                }
            }
            next[w] += count;
        }
        words = std::move(next);
    }

    v.finalize();
    return v;
}

// Greedy longest-match segmentation; unseen characters map to unk.
inline std::vector<int> Vocabulary::encode(const std::string& text) const {
    std::vector<int> ids;
    std::size_t i = 0;
    while (i < text.size()) {
        std::size_t best_len = 0;
        int best_id = kUnk;
        std::size_t cap = std::min(max_token_len_, text.size() - i);
        for (std::size_t len = cap; len >= 1; --len) {
            auto it = id_of_.find(text.substr(i, len));
            if (it != id_of_.end()) {
                best_len = len;
                best_id = it->second;
                break;
            }
        }
        if (best_len == 0) {
            ids.push_back(kUnk);
            i += 1;
        } else {
            ids.push_back(best_id);
            i += best_len;
        }
    }
    return ids;
}

inline std::string Vocabulary::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        if (id < 0 || id >= size())
            throw DecodeError("token id " + std::to_string(id) + " out of range");
        if (id == kUnk) {
            out += kUnkSentinel;
        } else if (id < kNumSpecials) {
            // pad/bos/eos render as nothing
        } else {
            out += tokens_[static_cast<std::size_t>(id)];
        }
    }
    return out;
}

inline std::string Vocabulary::serialize() const {
    std::string out = "circle-vocab v1\n";
    out += "size " + std::to_string(tokens_.size()) + "\n";
    out += "specials pad=0 bos=1 eos=2 unk=3\n";
    out += "excluded";
    for (const auto& sym : excluded_) out += " " + detail::escape_token(sym);
    out += "\n";
    for (std::size_t i = kNumSpecials; i < tokens_.size(); ++i)
        out += detail::escape_token(tokens_[i]) + "\n";
    return out;
}

inline Vocabulary Vocabulary::deserialize(const std::string& content) {
    auto lines = split_lines(content);
    if (lines.size() < 4 || lines[0] != "circle-vocab v1")
        throw ParseError("not a circle vocabulary file");
    if (lines[1].rfind("size ", 0) != 0) throw ParseError("vocabulary: missing size header");
    std::size_t size = std::stoul(lines[1].substr(5));
    if (lines[2] != "specials pad=0 bos=1 eos=2 unk=3")
        throw ParseError("vocabulary: unsupported specials layout");
    if (lines[3].rfind("excluded", 0) != 0) throw ParseError("vocabulary: missing exclusions header");
    Vocabulary v;
    std::string excl = lines[3].substr(8);
    std::size_t pos = 0;
    while (pos < excl.size()) {
        if (excl[pos] == ' ') { ++pos; continue; }
        std::size_t end = excl.find(' ', pos);
        if (end == std::string::npos) end = excl.size();
        v.excluded_.push_back(detail::unescape_token(excl.substr(pos, end - pos)));
        pos = end;
    }
    v.tokens_ = {"<pad>", "<bos>", "<eos>", kUnkSentinel};
    for (std::size_t i = 4; i < lines.size(); ++i) {
        if (lines[i].empty() && i + 1 == lines.size()) break;
        v.tokens_.push_back(detail::unescape_token(lines[i]));
    }
    if (v.tokens_.size() != size)
        throw ParseError("vocabulary: token count " + std::to_string(v.tokens_.size()) +
                         " does not match declared size " + std::to_string(size));
    v.finalize();
    return v;
}

}  // namespace circle
