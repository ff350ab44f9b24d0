#pragma once

#include <string>
#include <utility>

#include "circle/common.hpp"
#include "circle/corpus.hpp"

namespace circle {

// Fill-in-the-blank rendering. The three markers and the single-space joins
// are frozen byte-for-byte; tests compare rendered text exactly.

inline constexpr const char* kBuggyMarker = "Buggy line:";
inline constexpr const char* kContextMarker = "Context:";
inline constexpr const char* kFixedMarker = "The fixed code is:";

struct PromptedExample {
    std::string source_text;
    std::string target_text;
    Lang lang = Lang::Python;
    std::string origin_id;
};

inline PromptedExample render_prompt(const BugFixPair& pair) {
    PromptedExample ex;
    ex.source_text = std::string(kBuggyMarker) + " " + pair.buggy + " " + kContextMarker + " " +
                     pair.context + " " + kFixedMarker;
    ex.target_text = pair.fixed;
    ex.lang = pair.lang;
    ex.origin_id = pair.id;
    return ex;
}

// No-prompt ablation: plain concatenation, no markers.
inline PromptedExample render_plain(const BugFixPair& pair) {
    PromptedExample ex;
    ex.source_text = pair.buggy + " " + pair.context;
    ex.target_text = pair.fixed;
    ex.lang = pair.lang;
    ex.origin_id = pair.id;
    return ex;
}

inline PromptedExample render(const BugFixPair& pair, bool prompt_enabled) {
    return prompt_enabled ? render_prompt(pair) : render_plain(pair);
}

namespace detail {
inline std::size_t count_occurrences(const std::string& s, const std::string& needle) {
    std::size_t n = 0, pos = 0;
    while ((pos = s.find(needle, pos)) != std::string::npos) {
        ++n;
        pos += 1;
    }
    return n;
}
}  // namespace detail

// Inverse of render_prompt for source text whose payload contains no marker
// substrings. Missing or duplicated markers raise a format error.
inline std::pair<std::string, std::string> strip_prompt(const std::string& source_text) {
    for (const char* marker : {kBuggyMarker, kContextMarker, kFixedMarker}) {
        std::size_t n = detail::count_occurrences(source_text, marker);
        if (n == 0) throw FormatError(std::string("missing marker \"") + marker + "\"");
        if (n > 1) throw FormatError(std::string("duplicated marker \"") + marker + "\"");
    }
    const std::string buggy_prefix = std::string(kBuggyMarker) + " ";
    const std::string context_sep = std::string(" ") + kContextMarker + " ";
    const std::string fixed_suffix = std::string(" ") + kFixedMarker;
    if (source_text.rfind(buggy_prefix, 0) != 0)
        throw FormatError("source does not start with the buggy-line marker");
    if (source_text.size() < fixed_suffix.size() ||
        source_text.compare(source_text.size() - fixed_suffix.size(), fixed_suffix.size(),
                            fixed_suffix) != 0)
        throw FormatError("source does not end with the fixed-code marker");
    std::string middle = source_text.substr(
        buggy_prefix.size(), source_text.size() - buggy_prefix.size() - fixed_suffix.size());
    std::size_t sep = middle.find(context_sep);
    if (sep == std::string::npos) throw FormatError("context marker not in expected position");
    return {middle.substr(0, sep), middle.substr(sep + context_sep.size())};
}

}  // namespace circle
