#pragma once

// Patch-based entity update. The extractor emits, per string field, a block
//
//     <<<< SEARCH
//     text to find
//     ====
//     replacement
//     >>>> REPLACE
//
// which is spliced into the stored field at the span of minimum Levenshtein
// distance to the SEARCH text. No LLM call is involved.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "membase/error.hpp"
#include "membase/schema.hpp"
#include "membase/text.hpp"

namespace membase {

inline constexpr std::string_view kSearchDelimiter = "<<<< SEARCH";
inline constexpr std::string_view kDividerDelimiter = "====";
inline constexpr std::string_view kReplaceDelimiter = ">>>> REPLACE";

struct Patch {
    std::string search;
    std::string replace;

    bool operator==(const Patch&) const = default;
};

// Half-open [start, end) span of the haystack and its edit distance to the needle.
struct SpanMatch {
    std::size_t start = 0;
    std::size_t end = 0;
    std::size_t distance = 0;

    bool operator==(const SpanMatch&) const = default;
};

inline Patch parse_patch(std::string_view block) {
    const std::string normalized = text::replace_all(std::string(block), "\r\n", "\n");
    struct Line {
        std::string_view text;
        std::size_t offset;
    };
    std::vector<Line> lines;
    {
        std::string_view rest = normalized;
        std::size_t offset = 0;
        while (true) {
            const auto nl = rest.find('\n');
            lines.push_back({rest.substr(0, nl), offset});
            if (nl == std::string_view::npos) break;
            rest.remove_prefix(nl + 1);
            offset += nl + 1;
        }
    }
    auto find_unique = [&](std::string_view delim) -> std::size_t {
        std::size_t found = lines.size();
        for (std::size_t i = 0; i < lines.size(); ++i) {
            if (lines[i].text != delim) continue;
            if (found != lines.size())
                throw Error(ErrorCode::patch_parse, "duplicated delimiter '" + std::string(delim) + "'", {}, {},
                            lines[i].offset);
            found = i;
        }
        if (found == lines.size())
            throw Error(ErrorCode::patch_parse, "missing delimiter '" + std::string(delim) + "'", {}, {}, normalized.size());
        return found;
    };
    const auto s = find_unique(kSearchDelimiter);
    const auto d = find_unique(kDividerDelimiter);
    const auto r = find_unique(kReplaceDelimiter);
    if (!(s < d && d < r))
        throw Error(ErrorCode::patch_parse, "delimiters out of order", {}, {}, lines[std::min({s, d, r})].offset);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if ((i < s || i > r) && !text::trim(lines[i].text).empty())
            throw Error(ErrorCode::patch_parse, "text outside the patch block", {}, {}, lines[i].offset);
    }
    auto join = [&](std::size_t from, std::size_t to) {
        std::string out;
        for (std::size_t i = from; i < to; ++i) {
            if (i > from) out += "\n";
            out += lines[i].text;
        }
        return out;
    };
    return {join(s + 1, d), join(d + 1, r)};
}

inline std::string format_patch(const Patch& p) {
    std::string out(kSearchDelimiter);
    out += "\n";
    if (!p.search.empty()) out += p.search + "\n";
    out += std::string(kDividerDelimiter) + "\n";
    if (!p.replace.empty()) out += p.replace + "\n";
    out += kReplaceDelimiter;
    return out;
}

// Approximate substring search over an arbitrary symbol sequence.
//
// Cell (i, j) holds the lexicographically smallest (cost, start) over all
// alignments of needle[0:i] against a haystack substring ending at j, with
// free starting position (row 0 is zero). Since costs add along a path and the
// start is inherited, the per-cell lexicographic minimum is also the minimum
// over whole alignments, so the last row directly yields the smallest start
// for every end position. The result minimizes (distance, start, length).
template <class T>
SpanMatch best_approx_span(std::span<const T> haystack, std::span<const T> needle) {
    if (needle.empty()) throw Error(ErrorCode::empty_needle, "needle is empty");
    const std::size_t n = haystack.size();
    const std::size_t m = needle.size();

    struct Cell {
        std::size_t cost;
        std::size_t start;
    };
    auto better = [](const Cell& a, const Cell& b) {
        return a.cost < b.cost || (a.cost == b.cost && a.start < b.start);
    };

    std::vector<Cell> prev(n + 1), cur(n + 1);
    for (std::size_t j = 0; j <= n; ++j) prev[j] = {0, j};
    for (std::size_t i = 1; i <= m; ++i) {
        cur[0] = {i, 0};
        for (std::size_t j = 1; j <= n; ++j) {
            Cell best{prev[j - 1].cost + (needle[i - 1] == haystack[j - 1] ? 0 : 1), prev[j - 1].start};
            const Cell del{prev[j].cost + 1, prev[j].start};
            const Cell ins{cur[j - 1].cost + 1, cur[j - 1].start};
            if (better(del, best)) best = del;
            if (better(ins, best)) best = ins;
            cur[j] = best;
        }
        std::swap(prev, cur);
    }
    SpanMatch out{0, 0, m + 1};
    for (std::size_t j = 0; j <= n; ++j) {
        const auto& c = prev[j];
        const SpanMatch cand{c.start, j, c.cost};
        if (cand.distance < out.distance || (cand.distance == out.distance && cand.start < out.start) ||
            (cand.distance == out.distance && cand.start == out.start && cand.end < out.end)) {
            out = cand;
        }
    }
    return out;
}

// Byte-level search. An exact occurrence short-circuits to the leftmost match.
inline SpanMatch best_approx_span(std::string_view haystack, std::string_view needle) {
    if (needle.empty()) throw Error(ErrorCode::empty_needle, "needle is empty");
    if (const auto pos = haystack.find(needle); pos != std::string_view::npos) return {pos, pos + needle.size(), 0};
    return best_approx_span<char>(std::span<const char>(haystack.data(), haystack.size()),
                                  std::span<const char>(needle.data(), needle.size()));
}

struct PatchOptions {
    // Patches whose best span is farther than ceil(ratio * |search|) edits are
    // rejected as probable hallucinations.
    double max_distance_ratio = 0.5;
};

struct PatchOutcome {
    std::string text;
    bool applied = false;
    std::optional<SpanMatch> match;  // in bytes of the old text
    std::string warning;
};

// Code-point-level search when both sides are valid UTF-8 so splices never cut
// a multi-byte sequence; byte-level otherwise. Offsets are returned in bytes.
inline SpanMatch locate_span(std::string_view haystack, std::string_view needle) {
    if (needle.empty()) throw Error(ErrorCode::empty_needle, "needle is empty");
    if (const auto pos = haystack.find(needle); pos != std::string_view::npos) return {pos, pos + needle.size(), 0};
    std::vector<char32_t> hcp, ncp;
    std::vector<std::size_t> hoff, noff;
    const bool ascii = std::all_of(haystack.begin(), haystack.end(), [](char c) { return (c & 0x80) == 0; }) &&
                       std::all_of(needle.begin(), needle.end(), [](char c) { return (c & 0x80) == 0; });
    if (!ascii && text::decode_utf8(haystack, hcp, hoff) && text::decode_utf8(needle, ncp, noff)) {
        auto m = best_approx_span<char32_t>(hcp, ncp);
        return {hoff[m.start], hoff[m.end], m.distance};
    }
    return best_approx_span(haystack, needle);
}

inline PatchOutcome apply_patch_detailed(std::string_view old, const Patch& p, const PatchOptions& opts = {}) {
    if (p.search.empty()) {
        if (old.empty()) return {p.replace, true, std::nullopt, {}};
        return {std::string(old), false, std::nullopt, {}};
    }
    const auto m = locate_span(old, p.search);
    const auto limit = static_cast<std::size_t>(std::ceil(opts.max_distance_ratio * static_cast<double>(p.search.size())));
    if (m.distance > limit) {
        return {std::string(old), false, m,
                "patch rejected: best span distance " + std::to_string(m.distance) + " exceeds " + std::to_string(limit)};
    }
    std::string out;
    out.reserve(old.size() - (m.end - m.start) + p.replace.size());
    out.append(old.substr(0, m.start));
    out.append(p.replace);
    out.append(old.substr(m.end));
    return {std::move(out), true, m, {}};
}

// Total: never throws, never grows the text beyond |old| + |replace|.
inline std::string apply_patch(std::string_view old, const Patch& p, const PatchOptions& opts = {}) {
    return apply_patch_detailed(old, p, opts).text;
}

struct FieldPatch {
    std::string field;
    Patch patch;
};

struct PatchReport {
    EntityInstance entity;
    std::vector<std::string> warnings;
};

// Applies field patches to an entity. Fields are processed in schema order;
// several patches on one field apply in the order given. Unknown or
// non-string fields reject the whole call and leave `entity` untouched.
inline PatchReport apply_patches(const EntityInstance& entity, const std::vector<FieldPatch>& patches,
                                 const EntityTypeDef& def, EpochMs now, const PatchOptions& opts = {}) {
    for (const auto& fp : patches) {
        const auto* p = def.find(fp.field);
        if (p == nullptr)
            throw Error(ErrorCode::unknown_field, "unknown field '" + fp.field + "' on " + def.entity_type, fp.field);
        if (p->def.type != PropertyType::string)
            throw Error(ErrorCode::unknown_field, "field '" + fp.field + "' is not a string field", fp.field);
    }
    PatchReport out{entity, {}};
    for (const auto& prop : def.properties) {
        for (const auto& fp : patches) {
            if (fp.field != prop.def.name) continue;
            std::string current;
            if (auto it = out.entity.properties.find(fp.field); it != out.entity.properties.end()) current = render(it->second);
            auto res = apply_patch_detailed(current, fp.patch, opts);
            if (!res.warning.empty()) out.warnings.push_back(fp.field + ": " + res.warning);
            out.entity.properties[fp.field] = std::move(res.text);
        }
    }
    out.entity.version += 1;
    out.entity.updated_at = now;
    return out;
}

}  // namespace membase
