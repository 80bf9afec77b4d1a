#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace membase::text {

inline std::string_view trim(std::string_view s) {
    auto issp = [](unsigned char c) { return std::isspace(c) != 0; };
    while (!s.empty() && issp(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && issp(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

inline std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

// Whitespace-delimited token count. This is the token accounting unit of the
// mock provider and of the storage/retention measurements.
inline std::size_t count_whitespace_tokens(std::string_view s) {
    std::size_t n = 0;
    bool in_token = false;
    for (char c : s) {
        const bool sp = std::isspace(static_cast<unsigned char>(c)) != 0;
        if (!sp && !in_token) ++n;
        in_token = !sp;
    }
    return n;
}

// Lowercased, punctuation-stripped token stream. Bytes >= 0x80 are kept so
// UTF-8 words survive intact.
inline std::vector<std::string> tokenize(std::string_view s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        const auto c = static_cast<unsigned char>(ch);
        if (c >= 0x80 || std::isalnum(c)) {
            cur.push_back(static_cast<char>(c >= 0x80 ? c : std::tolower(c)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

inline const std::unordered_set<std::string>& stopwords() {
    static const std::unordered_set<std::string> words = {
        "a",      "about", "above", "after",  "again", "all",   "also",  "am",     "an",
        "and",    "any",   "are",   "as",     "at",    "be",    "been",  "before", "being",
        "below",  "but",   "by",    "can",    "could", "did",   "do",    "does",   "doing",
        "done",   "down",  "during", "each",  "few",   "for",   "from",  "further", "get",
        "got",    "had",   "has",   "have",   "having", "he",   "her",   "here",   "hers",
        "him",    "his",   "how",   "i",      "if",    "in",    "into",  "is",     "it",
        "its",    "just",  "let",   "like",   "me",    "more",  "most",  "my",     "no",
        "nor",    "not",   "now",   "of",     "off",   "ok",    "okay",  "on",     "once",
        "only",   "or",    "other", "our",    "ours",  "out",   "over",  "own",    "please",
        "same",   "she",   "should", "so",    "some",  "such",  "than",  "thanks", "that",
        "the",    "their", "them",  "then",   "there", "these", "they",  "this",   "those",
        "through", "to",   "too",   "under",  "until", "up",    "us",    "very",   "was",
        "we",     "were",  "what",  "when",   "where", "which", "while", "who",    "whom",
        "why",    "will",  "with",  "would",  "yes",   "you",   "your",  "yours",  "user",
        "assistant", "system", "tool", "true", "false",
    };
    return words;
}

// Keyword candidates: non-stopword tokens of length >= 3 that are not pure digits.
inline std::vector<std::string> keywords(std::string_view s) {
    std::vector<std::string> out;
    for (auto& t : tokenize(s)) {
        if (t.size() < 3 || stopwords().count(t) != 0) continue;
        if (std::all_of(t.begin(), t.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }))
            continue;
        if (std::find(out.begin(), out.end(), t) == out.end()) out.push_back(std::move(t));
    }
    return out;
}

// FNV-1a, 64 bit. Stable across platforms; used for hashing embedders and ids.
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t seed = 14695981039346656037ULL) {
    std::uint64_t h = seed;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return out;
}

// Decodes UTF-8 into code points, recording the byte offset of each. Returns
// false on malformed input, in which case the outputs are unspecified.
inline bool decode_utf8(std::string_view s, std::vector<char32_t>& cps, std::vector<std::size_t>& offsets) {
    cps.clear();
    offsets.clear();
    std::size_t i = 0;
    while (i < s.size()) {
        const auto c = static_cast<unsigned char>(s[i]);
        std::size_t len = 0;
        char32_t cp = 0;
        if (c < 0x80) {
            len = 1;
            cp = c;
        } else if ((c & 0xE0) == 0xC0) {
            len = 2;
            cp = c & 0x1F;
        } else if ((c & 0xF0) == 0xE0) {
            len = 3;
            cp = c & 0x0F;
        } else if ((c & 0xF8) == 0xF0) {
            len = 4;
            cp = c & 0x07;
        } else {
            return false;
        }
        if (i + len > s.size()) return false;
        for (std::size_t k = 1; k < len; ++k) {
            const auto cc = static_cast<unsigned char>(s[i + k]);
            if ((cc & 0xC0) != 0x80) return false;
            cp = (cp << 6) | (cc & 0x3F);
        }
        cps.push_back(cp);
        offsets.push_back(i);
        i += len;
    }
    offsets.push_back(s.size());
    return true;
}

inline std::string replace_all(std::string s, std::string_view from, std::string_view to) {
    if (from.empty()) return s;
    std::size_t pos = 0;
    while ((pos = s.find(from, pos)) != std::string::npos) {
        s.replace(pos, from.size(), to);
        pos += to.size();
    }
    return s;
}

inline std::string base64_encode(std::string_view in) {
    static constexpr char table[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((in.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < in.size(); i += 3) {
        const std::uint32_t v = (static_cast<unsigned char>(in[i]) << 16) | (static_cast<unsigned char>(in[i + 1]) << 8) |
                                static_cast<unsigned char>(in[i + 2]);
        out += table[(v >> 18) & 63];
        out += table[(v >> 12) & 63];
        out += table[(v >> 6) & 63];
        out += table[v & 63];
    }
    if (i < in.size()) {
        std::uint32_t v = static_cast<unsigned char>(in[i]) << 16;
        if (i + 1 < in.size()) v |= static_cast<unsigned char>(in[i + 1]) << 8;
        out += table[(v >> 18) & 63];
        out += table[(v >> 12) & 63];
        out += (i + 1 < in.size()) ? table[(v >> 6) & 63] : '=';
        out += '=';
    }
    return out;
}

// Returns false on characters outside the alphabet or a bad length.
inline bool base64_decode(std::string_view in, std::string& out) {
    out.clear();
    if (in.size() % 4 != 0) return false;
    auto val = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    for (std::size_t i = 0; i < in.size(); i += 4) {
        int v[4];
        int pad = 0;
        for (int k = 0; k < 4; ++k) {
            const char c = in[i + static_cast<std::size_t>(k)];
            if (c == '=' && i + 4 == in.size() && k >= 2) {
                v[k] = 0;
                ++pad;
            } else {
                v[k] = val(c);
                if (v[k] < 0 || pad > 0) return false;
            }
        }
        const std::uint32_t w = (static_cast<std::uint32_t>(v[0]) << 18) | (static_cast<std::uint32_t>(v[1]) << 12) |
                                (static_cast<std::uint32_t>(v[2]) << 6) | static_cast<std::uint32_t>(v[3]);
        out += static_cast<char>((w >> 16) & 0xFF);
        if (pad < 2) out += static_cast<char>((w >> 8) & 0xFF);
        if (pad < 1) out += static_cast<char>(w & 0xFF);
    }
    return true;
}

}  // namespace membase::text
