#pragma once

#include <array>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "circle/common.hpp"
#include "circle/corpus.hpp"
#include "circle/tokenizer.hpp"

namespace circle {

// Rule-based post-processing of generated patches: cross-language keyword
// mapping, whitespace-format repair, and rare-symbol unknown-token fill.

// ---------------------------------------------------------------------------
// Keyword map. One row per semantic group with a spelling per language; a row
// may be disabled (the member-access row is context-sensitive and unsafe as a
// plain substitution, so it ships disabled).
// ---------------------------------------------------------------------------

struct KeywordRow {
    std::array<std::string, 4> spelling;  // indexed by Lang order: javascript, python, java, c
    bool enabled = true;

    const std::string& of(Lang lang) const {
        switch (lang) {
            case Lang::Javascript: return spelling[0];
            case Lang::Python: return spelling[1];
            case Lang::Java: return spelling[2];
            case Lang::C: return spelling[3];
        }
        return spelling[0];
    }
    std::string& of(Lang lang) {
        return const_cast<std::string&>(static_cast<const KeywordRow*>(this)->of(lang));
    }
};

struct KeywordMap {
    std::vector<KeywordRow> rows;
};

inline KeywordMap default_keyword_map() {
    KeywordMap m;
    auto row = [](std::string js, std::string py, std::string java, std::string c, bool enabled = true) {
        KeywordRow r;
        r.spelling = {std::move(js), std::move(py), std::move(java), std::move(c)};
        r.enabled = enabled;
        return r;
    };
    m.rows.push_back(row("null", "None", "null", "NULL"));
    m.rows.push_back(row("Math.max", "max", "Math.max", "max"));
    m.rows.push_back(row("Math.min", "min", "Math.min", "min"));
    // boolean literals have no safe C spelling (0/1 would hit numerics)
    m.rows.push_back(row("true", "True", "true", ""));
    m.rows.push_back(row("false", "False", "false", ""));
    // member access: "." vs "->"; disabled by default, see the rules file
    m.rows.push_back(row(".", ".", ".", "->", false));
    return m;
}

namespace detail {

// Tracks single- and double-quoted string literals with backslash escapes.
class QuoteScanner {
public:
    bool inside() const { return quote_ != 0; }
    void feed(char c) {
        if (escaped_) {
            escaped_ = false;
            return;
        }
        if (quote_ != 0) {
            if (c == '\\') escaped_ = true;
            else if (c == quote_) quote_ = 0;
        } else if (c == '"' || c == '\'') {
            quote_ = c;
        }
    }

private:
    char quote_ = 0;
    bool escaped_ = false;
};

inline bool boundary_before(const std::string& s, std::size_t pos) {
    return pos == 0 || (!is_ident_char(s[pos - 1]) && s[pos - 1] != '.');
}
inline bool boundary_after(const std::string& s, std::size_t end) {
    return end >= s.size() || (!is_ident_char(s[end]) && s[end] != '.');
}

}  // namespace detail

// Rewrites every token-boundary occurrence of a foreign spelling to the target
// language's spelling; string literals are left untouched. Longer spellings
// match first so "Math.max" is never re-entered at its inner "max".
inline std::string map_keywords(const std::string& patch, Lang target_lang,
                                const KeywordMap& map = default_keyword_map()) {
    struct Entry {
        const std::string* from;
        const std::string* to;
    };
    std::vector<Entry> entries;
    for (const auto& row : map.rows) {
        if (!row.enabled) continue;
        const std::string& target = row.of(target_lang);
        if (target.empty()) continue;  // no spelling in the target dialect
        for (Lang l : kAllLangs) {
            const std::string& sp = row.of(l);
            if (!sp.empty()) entries.push_back({&sp, &target});
        }
    }
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
        if (a.from->size() != b.from->size()) return a.from->size() > b.from->size();
        return *a.from < *b.from;
    });

    std::string out;
    detail::QuoteScanner quotes;
    std::size_t i = 0;
    while (i < patch.size()) {
        if (!quotes.inside()) {
            const Entry* hit = nullptr;
            for (const auto& e : entries) {
                if (patch.compare(i, e.from->size(), *e.from) != 0) continue;
                // token boundaries only matter at identifier-shaped edges
                bool need_before = is_ident_char(e.from->front());
                bool need_after = is_ident_char(e.from->back());
                if (need_before && !detail::boundary_before(patch, i)) continue;
                if (need_after && !detail::boundary_after(patch, i + e.from->size())) continue;
                hit = &e;
                break;
            }
            if (hit) {
                out += *hit->to;
                i += hit->from->size();
                continue;
            }
        }
        quotes.feed(patch[i]);
        out += patch[i];
        ++i;
    }
    return out;
}

// Collapses whitespace that splits a multi-character comparison operator
// ("= =" -> "==", "! =" -> "!=", "!= =" -> "!==", ...) and leaves every other
// whitespace intact. Only runs of the operator characters = ! < > qualify, and
// only when the joined run is one of the known operators.
inline std::string fix_format(const std::string& patch) {
    static const std::set<std::string> operators = {"==", "!=", "<=", ">=", "!==", "==="};
    auto is_op_char = [](char c) { return c == '=' || c == '!' || c == '<' || c == '>'; };

    std::string out;
    detail::QuoteScanner quotes;
    std::size_t i = 0;
    while (i < patch.size()) {
        if (!quotes.inside() && is_op_char(patch[i])) {
            // scan the run: operator chars possibly separated by spaces/tabs
            std::size_t j = i;
            std::string joined;
            bool internal_space = false;
            std::size_t end = i;
            while (j < patch.size()) {
                if (is_op_char(patch[j])) {
                    joined += patch[j];
                    end = ++j;
                } else if (patch[j] == ' ' || patch[j] == '\t') {
                    std::size_t k = j;
                    while (k < patch.size() && (patch[k] == ' ' || patch[k] == '\t')) ++k;
                    if (k < patch.size() && is_op_char(patch[k])) {
                        internal_space = true;
                        j = k;
                    } else {
                        break;
                    }
                } else {
                    break;
                }
            }
            if (internal_space && operators.count(joined)) {
                out += joined;
                i = end;
                continue;
            }
            // not a collapsible run: copy the raw span through
            for (std::size_t k = i; k < end; ++k) {
                quotes.feed(patch[k]);
                out += patch[k];
            }
            i = end;
            continue;
        }
        quotes.feed(patch[i]);
        out += patch[i];
        ++i;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Unknown-token fill. A rule matches text around a sentinel occurrence:
// literal prefix and suffix with the sentinel between them, optionally
// anchored to end-of-text with a trailing '$'. Whitespace immediately before
// the sentinel is absorbed, matching how the repaired operators glue to the
// preceding token ("0 <unk>= charno" -> "0<= charno").
// ---------------------------------------------------------------------------

struct FillRule {
    std::string pattern;  // contains kUnkSentinel exactly once; may end in '$'
    std::string symbol;   // one of "<", "^", "{"
    std::vector<Lang> langs;  // empty = applies to every language

    void validate() const {
        std::size_t first = pattern.find(kUnkSentinel);
        if (first == std::string::npos ||
            pattern.find(kUnkSentinel, first + 1) != std::string::npos)
            throw ValidationError("fill rule pattern must contain the sentinel exactly once: " +
                                  pattern);
        if (symbol != "<" && symbol != "^" && symbol != "{")
            throw ValidationError("fill rule symbol must be one of < ^ {");
    }

    bool applies_to(Lang lang) const {
        if (langs.empty()) return true;
        for (Lang l : langs)
            if (l == lang) return true;
        return false;
    }
};

inline std::vector<FillRule> default_fill_rules() {
    // Derived from the rare-symbol patch examples: "<unk>=" is a squeezed
    // "<="; a sentinel after ")" at line end is an opening brace. The "^"
    // fallback between identifiers is context-sensitive and ships disabled
    // (it can be enabled through a rules file).
    std::vector<FillRule> rules;
    rules.push_back({std::string(kUnkSentinel) + "=", "<", {}});
    rules.push_back({std::string(")") + kUnkSentinel + "$", "{", {}});
    for (auto& r : rules) r.validate();
    return rules;
}

// Replaces each sentinel matched by the highest-priority applicable rule with
// the rule's symbol; unmatched sentinels remain in place.
inline std::string fill_unknown(const std::string& patch, Lang lang,
                                const std::vector<FillRule>& rules = default_fill_rules()) {
    const std::string sentinel = kUnkSentinel;
    std::string text = patch;
    std::size_t search_from = 0;
    while (true) {
        std::size_t pos = text.find(sentinel, search_from);
        if (pos == std::string::npos) break;
        // absorb horizontal whitespace immediately before the sentinel
        std::size_t ws_start = pos;
        while (ws_start > 0 && (text[ws_start - 1] == ' ' || text[ws_start - 1] == '\t')) --ws_start;
        std::size_t after = pos + sentinel.size();

        const FillRule* hit = nullptr;
        for (const auto& rule : rules) {
            if (!rule.applies_to(lang)) continue;
            std::string pat = rule.pattern;
            bool anchored = !pat.empty() && pat.back() == '$';
            if (anchored) pat.pop_back();
            std::size_t mark = pat.find(sentinel);
            std::string prefix = pat.substr(0, mark);
            std::string suffix = pat.substr(mark + sentinel.size());
            if (prefix.size() > ws_start) continue;
            if (text.compare(ws_start - prefix.size(), prefix.size(), prefix) != 0) continue;
            if (text.compare(after, suffix.size(), suffix) != 0) continue;
            if (anchored && after + suffix.size() != text.size()) continue;
            hit = &rule;
            break;
        }
        if (hit) {
            text = text.substr(0, ws_start) + hit->symbol + text.substr(after);
            search_from = ws_start + hit->symbol.size();
        } else {
            search_from = after;
        }
    }
    return text;
}

// Composition used after generation: keywords, then operator format, then
// sentinel fill (filling can create operators that must not be re-split).
inline std::string rerepair(const std::string& patch, Lang lang,
                            const KeywordMap& map = default_keyword_map(),
                            const std::vector<FillRule>& rules = default_fill_rules()) {
    return fill_unknown(fix_format(map_keywords(patch, lang, map)), lang, rules);
}

// ---------------------------------------------------------------------------
// Human-editable table file. Line formats:
//   keyword javascript=null python=None java=null c=NULL [off]
//   rule <pattern> => <symbol> [lang lang ...]
// '#' starts a comment. Patterns with spaces may be double-quoted.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_ws(const std::string& line) {
    std::vector<std::string> parts;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
        if (i >= line.size()) break;
        if (line[i] == '"') {
            std::size_t end = line.find('"', i + 1);
            if (end == std::string::npos) throw ParseError("unterminated quote in table line");
            parts.push_back(line.substr(i + 1, end - i - 1));
            i = end + 1;
        } else {
            std::size_t end = i;
            while (end < line.size() && line[end] != ' ' && line[end] != '\t') ++end;
            parts.push_back(line.substr(i, end - i));
            i = end;
        }
    }
    return parts;
}

}  // namespace detail

struct RerepairTables {
    KeywordMap keyword_map;
    std::vector<FillRule> fill_rules;
};

inline RerepairTables load_rerepair_tables(const std::string& path) {
    RerepairTables t;
    auto lines = split_lines(read_file(path));
    for (std::size_t ln = 0; ln < lines.size(); ++ln) {
        std::string line = lines[ln];
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto parts = detail::split_ws(line);
        if (parts.empty()) continue;
        try {
            if (parts[0] == "keyword") {
                KeywordRow row;
                row.spelling = {"", "", "", ""};
                for (std::size_t i = 1; i < parts.size(); ++i) {
                    if (parts[i] == "off") {
                        row.enabled = false;
                        continue;
                    }
                    std::size_t eq = parts[i].find('=');
                    if (eq == std::string::npos) throw ParseError("expected lang=spelling");
                    row.of(parse_lang(parts[i].substr(0, eq))) = parts[i].substr(eq + 1);
                }
                int covered = 0;
                for (Lang l : kAllLangs)
                    if (!row.of(l).empty()) ++covered;
                if (covered < 2) throw ValidationError("keyword row must cover >= 2 languages");
                t.keyword_map.rows.push_back(std::move(row));
            } else if (parts[0] == "rule") {
                if (parts.size() < 4 || parts[2] != "=>")
                    throw ParseError("expected: rule <pattern> => <symbol> [langs]");
                FillRule rule;
                rule.pattern = parts[1];
                rule.symbol = parts[3];
                for (std::size_t i = 4; i < parts.size(); ++i)
                    rule.langs.push_back(parse_lang(parts[i]));
                rule.validate();
                t.fill_rules.push_back(std::move(rule));
            } else {
                throw ParseError("unknown table directive '" + parts[0] + "'");
            }
        } catch (const Error& e) {
            throw ParseError(path + ":" + std::to_string(ln + 1) + ": " + e.what());
        }
    }
    return t;
}

inline std::string default_rerepair_table_text() {
    return
        "# Re-repair tables: keyword rows and unknown-token fill rules.\n"
        "keyword javascript=null python=None java=null c=NULL\n"
        "keyword javascript=Math.max python=max java=Math.max c=max\n"
        "keyword javascript=Math.min python=min java=Math.min c=min\n"
        "keyword javascript=true python=True java=true\n"
        "keyword javascript=false python=False java=false\n"
        "# member access is context-sensitive; shipped disabled\n"
        "keyword javascript=. python=. java=. c=-> off\n"
        "rule <unk>= => < \n"
        "rule )<unk>$ => { \n"
        "# optional: sentinel between identifiers as xor\n"
        "# rule <unk> => ^\n";
}

}  // namespace circle
