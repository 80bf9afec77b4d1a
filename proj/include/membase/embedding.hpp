#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "membase/text.hpp"

namespace membase {

using Vector = std::vector<float>;

inline double dot(std::span<const float> a, std::span<const float> b) {
    double s = 0.0;
    const std::size_t n = std::min(a.size(), b.size());
    for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return s;
}

inline double l2_norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

inline void normalize_in_place(Vector& v) {
    const double n = l2_norm(v);
    if (n == 0.0) return;
    for (auto& x : v) x = static_cast<float>(x / n);
}

inline bool is_unit(std::span<const float> v, double tol = 1e-6) {
    return !v.empty() && std::fabs(l2_norm(v) - 1.0) <= tol;
}

class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual std::size_t dim() const = 0;
    // Unit-norm document/query vector.
    virtual Vector embed_dense(std::string_view text) const = 0;
    // Unit-norm per-token vectors for late interaction.
    virtual std::vector<Vector> embed_tokens(std::string_view text) const = 0;
};

// Deterministic test embedder: hashed bag-of-words into `dim` buckets, L2
// normalized. Token vectors put weight 1 on the token's bucket and
// `context_weight` on each neighbour's bucket, so they are contextualized but
// still a pure function of the text.
class HashEmbedder final : public EmbeddingProvider {
public:
    explicit HashEmbedder(std::size_t dim = 256, std::size_t max_tokens = 64, float context_weight = 0.35F)
        : dim_(dim), max_tokens_(max_tokens), context_weight_(context_weight) {}

    std::size_t dim() const override { return dim_; }
    std::size_t max_tokens() const { return max_tokens_; }

    std::size_t bucket(std::string_view token) const { return text::fnv1a(token) % dim_; }

    Vector embed_dense(std::string_view s) const override {
        Vector v(dim_, 0.0F);
        for (const auto& t : text::tokenize(s)) v[bucket(t)] += 1.0F;
        if (l2_norm(v) == 0.0) v[0] = 1.0F;
        normalize_in_place(v);
        return v;
    }

    std::vector<Vector> embed_tokens(std::string_view s) const override {
        const auto toks = text::tokenize(s);
        const std::size_t n = std::min(toks.size(), max_tokens_);
        std::vector<Vector> out;
        out.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            Vector v(dim_, 0.0F);
            v[bucket(toks[i])] += 1.0F;
            if (i > 0) v[bucket(toks[i - 1])] += context_weight_;
            if (i + 1 < toks.size()) v[bucket(toks[i + 1])] += context_weight_;
            normalize_in_place(v);
            out.push_back(std::move(v));
        }
        return out;
    }

private:
    std::size_t dim_;
    std::size_t max_tokens_;
    float context_weight_;
};

}  // namespace membase
