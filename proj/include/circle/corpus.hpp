#pragma once

#include <array>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "circle/common.hpp"

namespace circle {

// ---------------------------------------------------------------------------
// Languages and bug-fix pairs.
// ---------------------------------------------------------------------------

enum class Lang { Javascript, Python, Java, C };

inline const char* to_string(Lang l) {
    switch (l) {
        case Lang::Javascript: return "javascript";
        case Lang::Python: return "python";
        case Lang::Java: return "java";
        case Lang::C: return "c";
    }
    return "?";
}

inline Lang parse_lang(std::string_view s) {
    if (s == "javascript") return Lang::Javascript;
    if (s == "python") return Lang::Python;
    if (s == "java") return Lang::Java;
    if (s == "c") return Lang::C;
    throw ConfigError("unsupported language tag: " + std::string(s));
}

constexpr std::array<Lang, 4> kAllLangs = {Lang::Javascript, Lang::Python, Lang::Java, Lang::C};

// One training/eval sample. `index` is the position within its dataset file
// and is the tie-break key for difficulty selection.
struct BugFixPair {
    std::string id;
    Lang lang = Lang::Python;
    std::string buggy;    // one buggy line
    std::string context;  // surrounding code, possibly empty
    std::string fixed;    // ground-truth repaired line
    std::size_t index = 0;

    void validate() const {
        if (buggy == fixed)
            throw ValidationError("pair " + id + ": buggy equals fixed");
        if (id.empty()) throw ValidationError("pair with empty id");
    }
};

struct TaskDataset {
    int task_id = 1;
    Lang lang = Lang::Python;
    std::vector<BugFixPair> train;
    std::vector<BugFixPair> val;
    std::vector<BugFixPair> test;

    std::size_t size() const { return train.size() + val.size() + test.size(); }
};

struct TaskStream {
    std::vector<TaskDataset> tasks;  // task_ids strictly increasing from 1
};

// ---------------------------------------------------------------------------
// Split policy: 80/10/10 by hash of id. Stable across runs and loads.
// ---------------------------------------------------------------------------

enum class Split { Train, Val, Test };

inline Split split_of_id(const std::string& id) {
    std::uint64_t bucket = fnv1a(id) % 10;
    if (bucket < 8) return Split::Train;
    if (bucket == 8) return Split::Val;
    return Split::Test;
}

namespace detail {

inline TaskDataset assemble_dataset(int task_id, Lang lang, std::vector<BugFixPair> pairs) {
    TaskDataset ds;
    ds.task_id = task_id;
    ds.lang = lang;
    std::set<std::string> seen;
    std::vector<std::string> dup_ids;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        pairs[i].index = i;
        pairs[i].validate();
        if (pairs[i].lang != lang)
            throw ValidationError("pair " + pairs[i].id + ": language " +
                                  to_string(pairs[i].lang) + " does not match dataset language " +
                                  to_string(lang));
        if (!seen.insert(pairs[i].id).second) dup_ids.push_back(pairs[i].id);
    }
    if (!dup_ids.empty()) {
        std::string msg = "duplicate ids:";
        for (const auto& d : dup_ids) msg += " " + d;
        throw ValidationError(msg);
    }
    for (auto& p : pairs) {
        switch (split_of_id(p.id)) {
            case Split::Train: ds.train.push_back(p); break;
            case Split::Val: ds.val.push_back(p); break;
            case Split::Test: ds.test.push_back(p); break;
        }
    }
    return ds;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Synthetic corpus generator. A template bank of small correct snippets per
// language; one mutation operator applied to a designated line produces the
// buggy variant. The context shows the snippet as found, i.e. with the buggy
// line in place.
// ---------------------------------------------------------------------------

enum class Mutation {
    ComparisonFlip,
    OffByOne,
    BoolNegation,
    KeywordSwap,
    IdentifierTypo,
    DropConditionClause,
};

constexpr std::array<Mutation, 6> kAllMutations = {
    Mutation::ComparisonFlip,   Mutation::OffByOne,       Mutation::BoolNegation,
    Mutation::KeywordSwap,      Mutation::IdentifierTypo, Mutation::DropConditionClause,
};

// A correct snippet plus the index of the line the mutator targets.
struct SnippetTemplate {
    std::vector<std::string> lines;
    std::size_t target_line;
};

namespace detail {

// 20+ snippets per language, kept short so prompts stay cheap to encode.
inline const std::vector<SnippetTemplate>& templates_for(Lang lang) {
    static const std::vector<SnippetTemplate> python = {
        // breadth-first search loop; comparison flip yields "while True:"
        {{"def bfs(start):", "queue = [start]", "while queue:", "node = queue.pop(0)", "visit(node)"}, 2},
        {{"def bitcount(public):", "count = 0", "while public:", "public &= public - 1", "count += 1", "return count"}, 3},
        {{"def get_max(a, b):", "if a > b:", "return a", "return b"}, 1},
        {{"def get_min(a, b):", "if a < b:", "return a", "return b"}, 1},
        {{"def find(items, key):", "for i in range(len(items)):", "if items[i] == key:", "return i", "return -1"}, 2},
        {{"def is_empty(seq):", "return len(seq) == 0"}, 1},
        {{"def last(items):", "return items[len(items) - 1]"}, 1},
        {{"def clamp(x, lo, hi):", "if x < lo:", "return lo", "if x > hi:", "return hi", "return x"}, 3},
        {{"def total(values):", "acc = 0", "for v in values:", "acc += v", "return acc"}, 3},
        {{"def lookup(table, key):", "if key in table:", "return table[key]", "return None"}, 3},
        {{"def is_even(n):", "return n % 2 == 0"}, 1},
        {{"def count_down(n):", "while n > 0:", "emit(n)", "n -= 1"}, 1},
        {{"def head(items, default):", "if items:", "return items[0]", "return default"}, 1},
        {{"def absolute(x):", "if x < 0:", "return -x", "return x"}, 1},
        {{"def both(a, b):", "return a and b"}, 1},
        {{"def valid_index(items, i):", "return 0 <= i and i < len(items)"}, 1},
        {{"def first_match(rows, flag):", "for row in rows:", "if row.flag == flag:", "return row", "return None"}, 2},
        {{"def average(values):", "if len(values) == 0:", "return 0", "return sum(values) / len(values)"}, 1},
        {{"def strip_last(text):", "return text[0:len(text) - 1]"}, 1},
        {{"def pick(flag, a, b):", "if flag:", "return a", "return b"}, 1},
        {{"def gcd(a, b):", "while b != 0:", "a, b = b, a % b", "return a"}, 1},
        {{"def repeat(word, n):", "out = ''", "for i in range(n):", "out += word", "return out"}, 2},
    };
    static const std::vector<SnippetTemplate> java = {
        {{"public class Bits {", "public static int bitcount(int def) {", "int count = 0;", "while (def != 0) {", "def = (def & (def - 1));", "count++;", "}", "return count;", "}", "}"}, 4},
        {{"int getMax(int a, int b) {", "if (a > b) {", "return a;", "}", "return b;", "}"}, 1},
        {{"int getMin(int a, int b) {", "if (a < b) {", "return a;", "}", "return b;", "}"}, 1},
        {{"int find(int[] items, int key) {", "for (int i = 0; i < items.length; i++) {", "if (items[i] == key) {", "return i;", "}", "}", "return -1;", "}"}, 2},
        {{"boolean isEmpty(String s) {", "return s.length() == 0;", "}"}, 1},
        {{"char last(String s) {", "return s.charAt(s.length() - 1);", "}"}, 1},
        {{"int clamp(int x, int lo, int hi) {", "if (x < lo) {", "return lo;", "}", "if (x > hi) {", "return hi;", "}", "return x;", "}"}, 4},
        {{"int total(int[] values) {", "int acc = 0;", "for (int v : values) {", "acc += v;", "}", "return acc;", "}"}, 3},
        {{"String lookup(Map<String, String> t, String k) {", "if (t.containsKey(k)) {", "return t.get(k);", "}", "return null;", "}"}, 4},
        {{"boolean isEven(int n) {", "return n % 2 == 0;", "}"}, 1},
        {{"void countDown(int n) {", "while (n > 0) {", "emit(n);", "n--;", "}", "}"}, 1},
        {{"int head(int[] items, int fallback) {", "if (items.length > 0) {", "return items[0];", "}", "return fallback;", "}"}, 1},
        {{"int absolute(int x) {", "if (x < 0) {", "return -x;", "}", "return x;", "}"}, 1},
        {{"boolean both(boolean a, boolean b) {", "return a && b;", "}"}, 1},
        {{"boolean validIndex(int[] items, int i) {", "return 0 <= i && i < items.length;", "}"}, 1},
        {{"boolean inRange(int endIndex, int startIndex) {", "if ((endIndex < 0) || (endIndex < startIndex)) {", "return false;", "}", "return true;", "}"}, 1},
        {{"int average(int[] values) {", "if (values.length == 0) {", "return 0;", "}", "return total(values) / values.length;", "}"}, 1},
        {{"String stripLast(String s) {", "return s.substring(0, s.length() - 1);", "}"}, 1},
        {{"int pick(boolean flag, int a, int b) {", "if (flag) {", "return a;", "}", "return b;", "}"}, 1},
        {{"int gcd(int a, int b) {", "while (b != 0) {", "int t = b;", "b = a % b;", "a = t;", "}", "return a;", "}"}, 1},
        {{"boolean sameSign(int a, int b) {", "return (a >= 0) == (b >= 0);", "}"}, 1},
    };
    static const std::vector<SnippetTemplate> javascript = {
        {{"function getDefault(self, key, opt) {", "if (typeof opt.default !== 'undefined') self.default(key, opt.default);", "}"}, 1},
        {{"function getMax(a, b) {", "if (a > b) {", "return a;", "}", "return b;", "}"}, 1},
        {{"function getMin(a, b) {", "if (a < b) {", "return a;", "}", "return b;", "}"}, 1},
        {{"function find(items, key) {", "for (let i = 0; i < items.length; i++) {", "if (items[i] === key) {", "return i;", "}", "}", "return -1;", "}"}, 2},
        {{"function isEmpty(s) {", "return s.length === 0;", "}"}, 1},
        {{"function last(items) {", "return items[items.length - 1];", "}"}, 1},
        {{"function clamp(x, lo, hi) {", "if (x < lo) {", "return lo;", "}", "if (x > hi) {", "return hi;", "}", "return x;", "}"}, 4},
        {{"function total(values) {", "let acc = 0;", "for (const v of values) {", "acc += v;", "}", "return acc;", "}"}, 3},
        {{"function lookup(table, key) {", "if (key in table) {", "return table[key];", "}", "return null;", "}"}, 4},
        {{"function isEven(n) {", "return n % 2 === 0;", "}"}, 1},
        {{"function countDown(n) {", "while (n > 0) {", "emit(n);", "n--;", "}", "}"}, 1},
        {{"function head(items, fallback) {", "if (items.length > 0) {", "return items[0];", "}", "return fallback;", "}"}, 1},
        {{"function absolute(x) {", "if (x < 0) {", "return -x;", "}", "return x;", "}"}, 1},
        {{"function both(a, b) {", "return a && b;", "}"}, 1},
        {{"function validIndex(items, i) {", "return 0 <= i && i < items.length;", "}"}, 1},
        {{"function firstMatch(rows, flag) {", "for (const row of rows) {", "if (row.flag === flag) {", "return row;", "}", "}", "return null;", "}"}, 2},
        {{"function average(values) {", "if (values.length === 0) {", "return 0;", "}", "return total(values) / values.length;", "}"}, 1},
        {{"function stripLast(text) {", "return text.slice(0, text.length - 1);", "}"}, 1},
        {{"function pick(flag, a, b) {", "if (flag) {", "return a;", "}", "return b;", "}"}, 1},
        {{"function gcd(a, b) {", "while (b !== 0) {", "const t = b;", "b = a % b;", "a = t;", "}", "return a;", "}"}, 1},
        {{"function bitcount(n) {", "let count = 0;", "while (n !== 0) {", "n = (n & (n - 1));", "count++;", "}", "return count;", "}"}, 3},
    };
    static const std::vector<SnippetTemplate> c = {
        {{"int bitcount(int n) {", "int count = 0;", "while (n != 0) {", "n = (n & (n - 1));", "count++;", "}", "return count;", "}"}, 3},
        {{"int get_max(int a, int b) {", "if (a > b) {", "return a;", "}", "return b;", "}"}, 1},
        {{"int get_min(int a, int b) {", "if (a < b) {", "return a;", "}", "return b;", "}"}, 1},
        {{"int find(int *items, int n, int key) {", "for (int i = 0; i < n; i++) {", "if (items[i] == key) {", "return i;", "}", "}", "return -1;", "}"}, 2},
        {{"int is_empty(const char *s) {", "return s[0] == '\\0';", "}"}, 1},
        {{"char last(const char *s, int n) {", "return s[n - 1];", "}"}, 1},
        {{"int clamp(int x, int lo, int hi) {", "if (x < lo) {", "return lo;", "}", "if (x > hi) {", "return hi;", "}", "return x;", "}"}, 4},
        {{"int total(const int *values, int n) {", "int acc = 0;", "for (int i = 0; i < n; i++) {", "acc += values[i];", "}", "return acc;", "}"}, 3},
        {{"const char *lookup(struct table *t, int key) {", "if (has_key(t, key)) {", "return get(t, key);", "}", "return NULL;", "}"}, 4},
        {{"int is_even(int n) {", "return n % 2 == 0;", "}"}, 1},
        {{"void count_down(int n) {", "while (n > 0) {", "emit(n);", "n--;", "}", "}"}, 1},
        {{"int head(const int *items, int n, int fallback) {", "if (n > 0) {", "return items[0];", "}", "return fallback;", "}"}, 1},
        {{"int absolute(int x) {", "if (x < 0) {", "return -x;", "}", "return x;", "}"}, 1},
        {{"int both(int a, int b) {", "return a && b;", "}"}, 1},
        {{"int valid_index(int n, int i) {", "return 0 <= i && i < n;", "}"}, 1},
        {{"int in_range(int end_index, int start_index) {", "if ((end_index < 0) || (end_index < start_index)) {", "return 0;", "}", "return 1;", "}"}, 1},
        {{"int average(const int *values, int n) {", "if (n == 0) {", "return 0;", "}", "return total(values, n) / n;", "}"}, 1},
        {{"void strip_last(char *s, int n) {", "s[n - 1] = '\\0';", "}"}, 1},
        {{"int pick(int flag, int a, int b) {", "if (flag) {", "return a;", "}", "return b;", "}"}, 1},
        {{"int gcd(int a, int b) {", "while (b != 0) {", "int t = b;", "b = a % b;", "a = t;", "}", "return a;", "}"}, 1},
        {{"int same_sign(int a, int b) {", "return (a >= 0) == (b >= 0);", "}"}, 1},
    };
    switch (lang) {
        case Lang::Python: return python;
        case Lang::Java: return java;
        case Lang::Javascript: return javascript;
        case Lang::C: return c;
    }
    return python;
}

// --- mutation operators -----------------------------------------------------
// Each returns the mutated line or nullopt when the operator does not apply.
// All choices are drawn from `rng` so generation is reproducible.

inline bool in_string_at(const std::string& s, std::size_t pos) {
    char quote = 0;
    for (std::size_t i = 0; i < pos && i < s.size(); ++i) {
        char c = s[i];
        if (quote != 0) {
            if (c == '\\') { ++i; continue; }
            if (c == quote) quote = 0;
        } else if (c == '"' || c == '\'') {
            quote = c;
        }
    }
    return quote != 0;
}

inline std::optional<std::string> mutate_comparison_flip(const std::string& line, Lang lang, Rng& rng) {
    // Degenerate-loop rewrite: "while <name>:" -> "while True:" and friends.
    static const std::vector<std::pair<std::string, std::string>> ops = {
        {"==", "!="}, {"!=", "=="}, {"<=", "<"}, {">=", ">"}, {"<", "<="}, {">", ">="},
    };
    struct Site { std::size_t pos; std::size_t len; std::string repl; };
    std::vector<Site> sites;

    auto add_loop_degeneration = [&]() {
        if (lang == Lang::Python) {
            if (line.rfind("while ", 0) == 0 && line.back() == ':' && line != "while True:") {
                std::string cond = line.substr(6, line.size() - 7);
                bool simple = !cond.empty();
                for (char ch : cond) simple = simple && is_ident_char(ch);
                if (simple) sites.push_back({6, cond.size(), "True"});
            }
        } else {
            const std::string t = lang == Lang::C ? "1" : "true";
            std::size_t p = line.find("while (");
            if (p != std::string::npos) {
                std::size_t close = line.find(')', p);
                std::string cond = line.substr(p + 7, close - p - 7);
                bool simple = !cond.empty();
                for (char ch : cond) simple = simple && is_ident_char(ch);
                if (simple && close != std::string::npos) sites.push_back({p + 7, cond.size(), t});
            }
        }
    };
    add_loop_degeneration();

    for (const auto& [op, repl] : ops) {
        std::size_t pos = 0;
        while ((pos = line.find(op, pos)) != std::string::npos) {
            // Skip if part of a longer operator (e.g. "<" inside "<=", "==" inside "===").
            char before = pos > 0 ? line[pos - 1] : ' ';
            char after = pos + op.size() < line.size() ? line[pos + op.size()] : ' ';
            bool embedded = before == '<' || before == '>' || before == '=' || before == '!' ||
                            after == '=' || after == '<' || after == '>';
            if (!embedded && !in_string_at(line, pos)) sites.push_back({pos, op.size(), repl});
            pos += op.size();
        }
    }
    if (sites.empty()) return std::nullopt;
    const Site& s = sites[rng.next_below(sites.size())];
    std::string out = line;
    out.replace(s.pos, s.len, s.repl);
    return out;
}

inline std::optional<std::string> mutate_off_by_one(const std::string& line, Lang, Rng& rng) {
    struct Site { std::size_t pos; std::size_t len; std::string repl; };
    std::vector<Site> sites;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] >= '0' && line[i] <= '9' && (i == 0 || !is_ident_char(line[i - 1]))) {
            std::size_t j = i;
            while (j < line.size() && line[j] >= '0' && line[j] <= '9') ++j;
            if (j < line.size() && is_ident_char(line[j])) { i = j; continue; }
            if (in_string_at(line, i)) { i = j; continue; }
            long v = std::stol(line.substr(i, j - i));
            sites.push_back({i, j - i, std::to_string(v + 1)});
            if (v > 0) sites.push_back({i, j - i, std::to_string(v - 1)});
            i = j;
        }
    }
    // Boundary relaxation also counts as off-by-one.
    std::size_t pos = 0;
    while ((pos = line.find(" < ", pos)) != std::string::npos) {
        if (!in_string_at(line, pos)) sites.push_back({pos, 3, " <= "});
        pos += 3;
    }
    if (sites.empty()) return std::nullopt;
    const Site& s = sites[rng.next_below(sites.size())];
    std::string out = line;
    out.replace(s.pos, s.len, s.repl);
    return out;
}

inline std::optional<std::string> mutate_bool_negation(const std::string& line, Lang lang, Rng& rng) {
    struct Site { std::size_t pos; std::size_t len; std::string repl; };
    std::vector<Site> sites;
    auto add_word = [&](const std::string& from, const std::string& to) {
        std::size_t pos = 0;
        while ((pos = line.find(from, pos)) != std::string::npos) {
            bool lb = pos == 0 || !is_ident_char(line[pos - 1]);
            bool rb = pos + from.size() >= line.size() || !is_ident_char(line[pos + from.size()]);
            if (lb && rb && !in_string_at(line, pos)) sites.push_back({pos, from.size(), to});
            pos += from.size();
        }
    };
    if (lang == Lang::Python) {
        add_word("True", "False");
        add_word("False", "True");
        add_word("and", "or");
        add_word("or", "and");
    } else {
        add_word("true", "false");
        add_word("false", "true");
        std::size_t pos = 0;
        while ((pos = line.find("&&", pos)) != std::string::npos) {
            if (!in_string_at(line, pos)) sites.push_back({pos, 2, "||"});
            pos += 2;
        }
        pos = 0;
        while ((pos = line.find("||", pos)) != std::string::npos) {
            if (!in_string_at(line, pos)) sites.push_back({pos, 2, "&&"});
            pos += 2;
        }
    }
    if (sites.empty()) return std::nullopt;
    const Site& s = sites[rng.next_below(sites.size())];
    std::string out = line;
    out.replace(s.pos, s.len, s.repl);
    return out;
}

inline std::optional<std::string> mutate_keyword_swap(const std::string& line, Lang lang, Rng& rng) {
    // Swap a native keyword for a cross-language sibling; mirrors the
    // keyword-mismatch failure mode the re-repair table undoes.
    struct Swap { std::string native; std::vector<std::string> foreign; };
    std::vector<Swap> swaps;
    switch (lang) {
        case Lang::Python:
            swaps = {{"None", {"NULL", "null"}}, {"True", {"true"}}, {"False", {"false"}}, {"max", {"Math.max"}}, {"min", {"Math.min"}}};
            break;
        case Lang::C:
            swaps = {{"NULL", {"null", "None"}}, {"max", {"Math.max"}}, {"min", {"Math.min"}}};
            break;
        case Lang::Java:
        case Lang::Javascript:
            swaps = {{"null", {"NULL", "None"}}, {"true", {"True"}}, {"false", {"False"}}, {"Math.max", {"max"}}, {"Math.min", {"min"}}};
            break;
    }
    struct Site { std::size_t pos; std::size_t len; std::string repl; };
    std::vector<Site> sites;
    for (const auto& sw : swaps) {
        std::size_t pos = 0;
        while ((pos = line.find(sw.native, pos)) != std::string::npos) {
            bool lb = pos == 0 || (!is_ident_char(line[pos - 1]) && line[pos - 1] != '.');
            std::size_t end = pos + sw.native.size();
            bool rb = end >= line.size() || (!is_ident_char(line[end]) && line[end] != '.');
            if (lb && rb && !in_string_at(line, pos)) {
                for (const auto& f : sw.foreign) sites.push_back({pos, sw.native.size(), f});
            }
            pos += sw.native.size();
        }
    }
    if (sites.empty()) return std::nullopt;
    const Site& s = sites[rng.next_below(sites.size())];
    std::string out = line;
    out.replace(s.pos, s.len, s.repl);
    return out;
}

inline std::optional<std::string> mutate_identifier_typo(const std::string& line, Lang lang, Rng& rng) {
    static const std::set<std::string> reserved = {
        "if", "else", "for", "while", "return", "def", "int", "char", "const", "void",
        "let", "var", "function", "public", "static", "class", "boolean", "struct",
        "True", "False", "None", "true", "false", "null", "NULL", "and", "or", "not",
        "in", "new", "typeof", "range", "len", "String", "Map", "final",
    };
    (void)lang;
    struct Ident { std::size_t pos; std::size_t len; };
    std::vector<Ident> idents;
    std::size_t i = 0;
    while (i < line.size()) {
        if ((line[i] >= 'a' && line[i] <= 'z') || (line[i] >= 'A' && line[i] <= 'Z') || line[i] == '_') {
            std::size_t j = i;
            while (j < line.size() && is_ident_char(line[j])) ++j;
            std::string word = line.substr(i, j - i);
            if (word.size() >= 3 && !reserved.count(word) && !in_string_at(line, i))
                idents.push_back({i, j - i});
            i = j;
        } else {
            ++i;
        }
    }
    if (idents.empty()) return std::nullopt;
    const Ident& id = idents[rng.next_below(idents.size())];
    std::string word = line.substr(id.pos, id.len);
    if (word.size() >= 4 && rng.next_below(2) == 0) {
        // transpose two adjacent distinct characters
        std::size_t start = rng.next_below(word.size() - 1);
        for (std::size_t k = 0; k + 1 < word.size(); ++k) {
            std::size_t a = (start + k) % (word.size() - 1);
            if (word[a] != word[a + 1]) {
                std::swap(word[a], word[a + 1]);
                break;
            }
        }
    } else {
        word.erase(rng.next_below(word.size()), 1);
    }
    if (word == line.substr(id.pos, id.len) || word.empty()) return std::nullopt;
    std::string out = line;
    out.replace(id.pos, id.len, word);
    return out;
}

inline std::optional<std::string> mutate_drop_condition_clause(const std::string& line, Lang lang, Rng& rng) {
    const std::vector<std::string> conns =
        lang == Lang::Python ? std::vector<std::string>{" and ", " or "}
                             : std::vector<std::string>{" && ", " || "};
    struct Site { std::size_t pos; std::size_t len; };
    std::vector<Site> sites;
    for (const auto& conn : conns) {
        std::size_t pos = 0;
        while ((pos = line.find(conn, pos)) != std::string::npos) {
            if (!in_string_at(line, pos)) sites.push_back({pos, conn.size()});
            pos += conn.size();
        }
    }
    if (sites.empty()) return std::nullopt;
    const Site& s = sites[rng.next_below(sites.size())];
    // Drop everything from the connective to the end of the condition. For a
    // parenthesised condition keep the closing run; for Python keep the colon.
    std::string head = line.substr(0, s.pos);
    std::string tail = line.substr(s.pos + s.len);
    std::string keep;
    for (char c : tail) {
        if (c == ')' || c == ':' || c == '{' || c == ';' || c == ' ') keep += c;
    }
    // Trim leading spaces accumulated from the dropped clause.
    std::size_t k = keep.find_first_not_of(' ');
    keep = k == std::string::npos ? "" : keep.substr(k);
    // Balance parentheses: drop surplus closers that belonged to the clause.
    int open = 0;
    for (char c : head) {
        if (c == '(') ++open;
        else if (c == ')') --open;
    }
    std::string balanced;
    for (char c : keep) {
        if (c == ')') {
            if (open <= 0) continue;
            --open;
        }
        balanced += c;
    }
    (void)rng;
    std::string out = head + balanced;
    if (out == line || out.empty()) return std::nullopt;
    return out;
}

inline std::optional<std::string> apply_mutation(Mutation m, const std::string& line, Lang lang, Rng& rng) {
    switch (m) {
        case Mutation::ComparisonFlip: return mutate_comparison_flip(line, lang, rng);
        case Mutation::OffByOne: return mutate_off_by_one(line, lang, rng);
        case Mutation::BoolNegation: return mutate_bool_negation(line, lang, rng);
        case Mutation::KeywordSwap: return mutate_keyword_swap(line, lang, rng);
        case Mutation::IdentifierTypo: return mutate_identifier_typo(line, lang, rng);
        case Mutation::DropConditionClause: return mutate_drop_condition_clause(line, lang, rng);
    }
    return std::nullopt;
}

inline std::string flatten_snippet(const std::vector<std::string>& lines) {
    std::string out;
    for (const auto& l : lines) {
        if (!out.empty()) out += ' ';
        out += l;
    }
    return out;
}

}  // namespace detail

inline TaskDataset generate_synthetic_corpus(Lang lang, std::uint64_t seed, std::size_t n, int task_id = 1) {
    if (n < 1) throw ConfigError("generate_synthetic_corpus: n must be >= 1");
    const auto& bank = detail::templates_for(lang);
    Rng rng(derive_seed(seed, "corpus", static_cast<std::uint64_t>(lang)));
    std::vector<BugFixPair> pairs;
    pairs.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const SnippetTemplate& tpl = bank[rng.next_below(bank.size())];
        const std::string& fixed = tpl.lines[tpl.target_line];
        // Try mutation operators in a seeded random order until one changes
        // the line; every template admits at least one operator.
        std::vector<Mutation> order(kAllMutations.begin(), kAllMutations.end());
        rng.shuffle(order);
        std::optional<std::string> buggy;
        for (Mutation m : order) {
            buggy = detail::apply_mutation(m, fixed, lang, rng);
            if (buggy && *buggy != fixed) break;
            buggy.reset();
        }
        if (!buggy) continue;  // template/operator mismatch; skip without consuming an id
        BugFixPair p;
        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "%s-%05zu", to_string(lang), pairs.size());
        p.id = idbuf;
        p.lang = lang;
        p.fixed = fixed;
        p.buggy = *buggy;
        std::vector<std::string> ctx_lines = tpl.lines;
        ctx_lines[tpl.target_line] = *buggy;
        p.context = detail::flatten_snippet(ctx_lines);
        pairs.push_back(std::move(p));
    }
    // Top up in case any draw was skipped; reuse the same stream.
    std::size_t attempts = 0;
    while (pairs.size() < n) {
        if (++attempts > 1000 * n + 1000)
            throw ConfigError("generate_synthetic_corpus: template bank cannot produce enough pairs");
        const SnippetTemplate& tpl = bank[rng.next_below(bank.size())];
        const std::string& fixed = tpl.lines[tpl.target_line];
        auto buggy = detail::mutate_identifier_typo(fixed, lang, rng);
        if (!buggy || *buggy == fixed) continue;
        BugFixPair p;
        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "%s-%05zu", to_string(lang), pairs.size());
        p.id = idbuf;
        p.lang = lang;
        p.fixed = fixed;
        p.buggy = *buggy;
        std::vector<std::string> ctx_lines = tpl.lines;
        ctx_lines[tpl.target_line] = *buggy;
        p.context = detail::flatten_snippet(ctx_lines);
        pairs.push_back(std::move(p));
    }
    return detail::assemble_dataset(task_id, lang, std::move(pairs));
}

// ---------------------------------------------------------------------------
// Corpus files: UTF-8, one flat JSON object per line with string fields
// id, lang, buggy, context, fixed.
// ---------------------------------------------------------------------------

inline TaskDataset load_corpus(const std::string& path, int task_id = 1) {
    std::string text = read_file(path);
    std::vector<BugFixPair> pairs;
    std::optional<Lang> lang;
    auto lines = split_lines(text);
    for (std::size_t ln = 0; ln < lines.size(); ++ln) {
        const std::string& line = lines[ln];
        if (line.empty()) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path + ":" + std::to_string(ln + 1) + ": " + e.what());
        }
        for (const char* field : {"id", "lang", "buggy", "context", "fixed"}) {
            if (!rec.contains(field) || !rec[field].is_string())
                throw ParseError(path + ":" + std::to_string(ln + 1) +
                                 ": missing or non-string field '" + field + "'");
        }
        BugFixPair p;
        p.id = rec["id"].get<std::string>();
        try {
            p.lang = parse_lang(rec["lang"].get<std::string>());
        } catch (const ConfigError& e) {
            throw ParseError(path + ":" + std::to_string(ln + 1) + ": " + e.what());
        }
        p.buggy = rec["buggy"].get<std::string>();
        p.context = rec["context"].get<std::string>();
        p.fixed = rec["fixed"].get<std::string>();
        if (!lang) lang = p.lang;
        pairs.push_back(std::move(p));
    }
    if (pairs.empty()) {
        TaskDataset ds;
        ds.task_id = task_id;
        return ds;
    }
    return detail::assemble_dataset(task_id, *lang, std::move(pairs));
}

inline nlohmann::ordered_json pair_to_json(const BugFixPair& p) {
    nlohmann::ordered_json rec;
    rec["id"] = p.id;
    rec["lang"] = to_string(p.lang);
    rec["buggy"] = p.buggy;
    rec["context"] = p.context;
    rec["fixed"] = p.fixed;
    return rec;
}

// Writes records in original dataset order (splits are reassembled by index).
inline void save_corpus(const TaskDataset& ds, const std::string& path) {
    std::vector<const BugFixPair*> all;
    for (const auto& p : ds.train) all.push_back(&p);
    for (const auto& p : ds.val) all.push_back(&p);
    for (const auto& p : ds.test) all.push_back(&p);
    std::sort(all.begin(), all.end(),
              [](const BugFixPair* a, const BugFixPair* b) { return a->index < b->index; });
    std::string out;
    for (const BugFixPair* p : all) {
        out += pair_to_json(*p).dump();
        out += '\n';
    }
    write_file(path, out);
}

// ---------------------------------------------------------------------------
// Token truncation (keeps the head: the prompt places the buggy line first).
// ---------------------------------------------------------------------------

inline std::vector<int> truncate_tokens(const std::vector<int>& ids, std::size_t max_len = 512) {
    if (max_len < 1) throw ConfigError("truncate_tokens: max_len must be >= 1");
    if (ids.size() <= max_len) return ids;
    return std::vector<int>(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(max_len));
}

}  // namespace circle
