#pragma once

// Multi-vector late interaction: MaxSim scoring plus the two compressions used
// for stored token vectors (consecutive token merge, 8-bit scalar quantization).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#if defined(__x86_64__) && defined(__GNUC__)
#include <immintrin.h>
#define MEMBASE_X86_DISPATCH 1
#endif

#include "membase/embedding.hpp"
#include "membase/error.hpp"

namespace membase {

// code[i] = round(v[i] / scale), scale = max|v[i]| / 127.
struct QuantizedVector {
    double scale = 0.0;
    std::vector<std::int8_t> codes;

    bool operator==(const QuantizedVector&) const = default;
};

using QuantizedTokens = std::vector<QuantizedVector>;

inline QuantizedVector quantize(std::span<const float> v) {
    QuantizedVector q;
    double max_abs = 0.0;
    for (float x : v) max_abs = std::max(max_abs, std::fabs(static_cast<double>(x)));
    q.scale = max_abs / 127.0;
    q.codes.resize(v.size(), 0);
    if (q.scale == 0.0) return q;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const auto c = std::lround(static_cast<double>(v[i]) / q.scale);
        q.codes[i] = static_cast<std::int8_t>(std::clamp<long>(c, -127, 127));
    }
    return q;
}

inline Vector dequantize(const QuantizedVector& q) {
    Vector v(q.codes.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(q.codes[i] * q.scale);
    return v;
}

inline QuantizedTokens quantize_tokens(const std::vector<Vector>& tokens) {
    QuantizedTokens out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(quantize(t));
    return out;
}

// Runs of consecutive tokens whose neighbouring cosine exceeds `threshold`
// collapse into their renormalized mean.
inline std::vector<Vector> merge_tokens(const std::vector<Vector>& tokens, double threshold) {
    std::vector<Vector> out;
    std::vector<double> acc;
    std::size_t run = 0;
    auto flush = [&] {
        if (run == 0) return;
        double norm = 0.0;
        for (double x : acc) norm += x * x;
        norm = std::sqrt(norm);
        Vector v(acc.size());
        for (std::size_t i = 0; i < acc.size(); ++i) v[i] = static_cast<float>(norm > 0 ? acc[i] / norm : 0.0);
        out.push_back(std::move(v));
        run = 0;
    };
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (run > 0 && dot(tokens[t - 1], tokens[t]) <= threshold) flush();
        if (run == 0) acc.assign(tokens[t].size(), 0.0);
        for (std::size_t i = 0; i < tokens[t].size(); ++i) acc[i] += tokens[t][i];
        ++run;
    }
    flush();
    return out;
}

inline QuantizedTokens compress_tokens(const std::vector<Vector>& tokens, double merge_threshold) {
    return quantize_tokens(merge_tokens(tokens, merge_threshold));
}

// Sum over query tokens of the best dot product against any document token.
inline double maxsim(const std::vector<Vector>& q, const std::vector<Vector>& d) {
    if (q.empty() || d.empty()) throw Error(ErrorCode::invalid_argument, "maxsim needs non-empty token lists");
    double total = 0.0;
    for (const auto& qt : q) {
        double best = -std::numeric_limits<double>::infinity();
        for (const auto& dt : d) best = std::max(best, dot(qt, dt));
        total += best;
    }
    return total;
}

namespace detail {

inline std::int32_t dot_codes_scalar(const std::int8_t* a, const std::int8_t* b, std::size_t n) {
    std::int32_t s = 0;
    for (std::size_t i = 0; i < n; ++i) s += static_cast<std::int32_t>(a[i]) * static_cast<std::int32_t>(b[i]);
    return s;
}

#ifdef MEMBASE_X86_DISPATCH
// Widens 16 codes at a time to int16 and pair-sums the products into int32
// lanes; |pair sum| <= 2 * 127 * 127, so every step stays exact.
__attribute__((target("avx2"))) inline std::int32_t dot_codes_avx2(const std::int8_t* a, const std::int8_t* b,
                                                                    std::size_t n) {
    __m256i acc = _mm256_setzero_si256();
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16) {
        const __m256i va = _mm256_cvtepi8_epi16(_mm_loadu_si128(reinterpret_cast<const __m128i*>(a + i)));
        const __m256i vb = _mm256_cvtepi8_epi16(_mm_loadu_si128(reinterpret_cast<const __m128i*>(b + i)));
        acc = _mm256_add_epi32(acc, _mm256_madd_epi16(va, vb));
    }
    __m128i s = _mm_add_epi32(_mm256_castsi256_si128(acc), _mm256_extracti128_si256(acc, 1));
    s = _mm_add_epi32(s, _mm_shuffle_epi32(s, 0x4E));
    s = _mm_add_epi32(s, _mm_shuffle_epi32(s, 0xB1));
    return _mm_cvtsi128_si32(s) + dot_codes_scalar(a + i, b + i, n - i);
}
#endif

}  // namespace detail

inline std::int32_t dot_codes(const std::int8_t* a, const std::int8_t* b, std::size_t n) {
#ifdef MEMBASE_X86_DISPATCH
    static const bool avx2 = __builtin_cpu_supports("avx2");
    if (avx2) return detail::dot_codes_avx2(a, b, n);
#endif
    return detail::dot_codes_scalar(a, b, n);
}

// MaxSim over quantized tokens on both sides. Integer accumulation is exact,
// so the only error is the quantization itself.
inline double maxsim_quantized(const QuantizedTokens& q, const QuantizedTokens& d) {
    if (q.empty() || d.empty()) throw Error(ErrorCode::invalid_argument, "maxsim needs non-empty token lists");
    double total = 0.0;
    for (const auto& qt : q) {
        double best = -std::numeric_limits<double>::infinity();
        for (const auto& dt : d) {
            const auto n = std::min(qt.codes.size(), dt.codes.size());
            const double s = static_cast<double>(dot_codes(qt.codes.data(), dt.codes.data(), n)) * qt.scale * dt.scale;
            best = std::max(best, s);
        }
        total += best;
    }
    return total;
}

}  // namespace membase
