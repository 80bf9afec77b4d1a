#pragma once

// Two-path recall (hybrid primary path plus keyword-graph path) with time and
// business fusion, quota merge, and late-interaction reranking.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "membase/embedding.hpp"
#include "membase/error.hpp"
#include "membase/late_interaction.hpp"
#include "membase/store.hpp"
#include "membase/value.hpp"

namespace membase {

struct RerankConfig {
    bool enabled = true;
    std::size_t candidate_cap = 100;
    bool quantized = true;
    double token_merge_threshold = 0.95;
};

struct RecallConfig {
    double w_time = 0.2;
    double w_busi = 0.1;
    EpochMs freshness_window = kDayMs;
    EpochMs decay_half_life = 7 * kDayMs;
    std::map<std::string, double> type_weights;
    std::size_t quota_primary = 8;
    std::size_t quota_keyword = 2;
    std::size_t final_k = 10;
    std::size_t pool_factor = 4;  // each path ranks quota * pool_factor candidates
    RerankConfig rerank;
    HybridOptions hybrid;
    KeywordOptions keyword;

    void validate() const {
        auto unit = [](double x) { return x >= 0.0 && x <= 1.0; };
        if (!unit(w_time)) throw Error(ErrorCode::invalid_argument, "w_time must be in [0,1]", "w_time");
        if (!unit(w_busi)) throw Error(ErrorCode::invalid_argument, "w_busi must be in [0,1]", "w_busi");
        if (w_time + w_busi > 1.0 + 1e-12)
            throw Error(ErrorCode::invalid_argument, "w_time + w_busi must not exceed 1", "w_time");
        if (freshness_window < 0) throw Error(ErrorCode::invalid_argument, "freshness_window must be >= 0", "freshness_window");
        if (decay_half_life <= 0) throw Error(ErrorCode::invalid_argument, "decay_half_life must be > 0", "decay_half_life");
        for (const auto& [t, w] : type_weights)
            if (!unit(w)) throw Error(ErrorCode::invalid_argument, "type weight must be in [0,1]", "type_weights." + t);
        if (pool_factor == 0) throw Error(ErrorCode::invalid_argument, "pool_factor must be >= 1", "pool_factor");
        if (!unit(hybrid.alpha)) throw Error(ErrorCode::invalid_argument, "alpha must be in [0,1]", "hybrid.alpha");
    }
};

inline Json to_json(const RecallConfig& c) {
    return {{"w_time", c.w_time},
            {"w_busi", c.w_busi},
            {"freshness_window", c.freshness_window},
            {"decay_half_life", c.decay_half_life},
            {"type_weights", c.type_weights},
            {"quota_primary", c.quota_primary},
            {"quota_keyword", c.quota_keyword},
            {"final_k", c.final_k},
            {"pool_factor", c.pool_factor},
            {"rerank",
             {{"enabled", c.rerank.enabled},
              {"candidate_cap", c.rerank.candidate_cap},
              {"quantized", c.rerank.quantized},
              {"token_merge_threshold", c.rerank.token_merge_threshold}}},
            {"hybrid", {{"alpha", c.hybrid.alpha}, {"fanout", c.hybrid.fanout}, {"dense_floor", c.hybrid.dense_floor}}},
            {"keyword", {{"floor", c.keyword.floor}, {"max_nodes", c.keyword.max_nodes}}}};
}

// Overlays the keys present in `j` onto `base`; absent keys keep their value.
inline RecallConfig recall_config_from_json(const Json& j, RecallConfig base = {}) {
    auto get = [&](const Json& obj, const char* key, auto& field) {
        if (obj.contains(key)) field = obj.at(key).get<std::decay_t<decltype(field)>>();
    };
    try {
        get(j, "w_time", base.w_time);
        get(j, "w_busi", base.w_busi);
        get(j, "freshness_window", base.freshness_window);
        get(j, "decay_half_life", base.decay_half_life);
        get(j, "type_weights", base.type_weights);
        get(j, "quota_primary", base.quota_primary);
        get(j, "quota_keyword", base.quota_keyword);
        get(j, "final_k", base.final_k);
        get(j, "pool_factor", base.pool_factor);
        if (j.contains("rerank")) {
            const auto& r = j.at("rerank");
            get(r, "enabled", base.rerank.enabled);
            get(r, "candidate_cap", base.rerank.candidate_cap);
            get(r, "quantized", base.rerank.quantized);
            get(r, "token_merge_threshold", base.rerank.token_merge_threshold);
        }
        if (j.contains("hybrid")) {
            const auto& h = j.at("hybrid");
            get(h, "alpha", base.hybrid.alpha);
            get(h, "fanout", base.hybrid.fanout);
            get(h, "dense_floor", base.hybrid.dense_floor);
        }
        if (j.contains("keyword")) {
            get(j.at("keyword"), "floor", base.keyword.floor);
            get(j.at("keyword"), "max_nodes", base.keyword.max_nodes);
        }
    } catch (const Json::exception& e) {
        throw Error(ErrorCode::invalid_argument, std::string("bad recall config: ") + e.what());
    }
    base.validate();
    return base;
}

enum class RecallPath { primary, keyword };

inline const char* to_string(RecallPath p) { return p == RecallPath::primary ? "primary" : "keyword"; }

struct ScoredMemory {
    std::string id;
    double s_origin = 0.0;
    double s_time = 0.0;
    double s_busi = 0.0;
    double s_final = 0.0;
    RecallPath path = RecallPath::primary;
    std::optional<double> rerank_score;
};

inline Json to_json(const ScoredMemory& m) {
    Json j{{"id", m.id},
           {"s_origin", m.s_origin},
           {"s_time", m.s_time},
           {"s_busi", m.s_busi},
           {"s_final", m.s_final},
           {"path", to_string(m.path)}};
    if (m.rerank_score) j["rerank_score"] = *m.rerank_score;
    return j;
}

inline double time_score(EpochMs age, const RecallConfig& cfg) {
    if (age <= cfg.freshness_window) return 1.0;
    const double excess = static_cast<double>(age - cfg.freshness_window);
    return std::exp2(-excess / static_cast<double>(cfg.decay_half_life));
}

inline double business_score(const MemoryRecord& r, const RecallConfig& cfg) {
    if (r.metadata.instance_weight) return std::clamp(*r.metadata.instance_weight, 0.0, 1.0);
    if (auto it = cfg.type_weights.find(r.metadata.type); it != cfg.type_weights.end()) return it->second;
    return 0.5;
}

// Accumulates in extended precision so decimal weights round once, e.g.
// 0.5*0.8 + 0.3*1.0 + 0.2*0.5 lands on the double nearest 0.8.
inline double fuse(double s_origin, double s_time, double s_busi, const RecallConfig& cfg) {
    using L = long double;
    const L w_origin = 1.0L - (L(cfg.w_time) + L(cfg.w_busi));
    const L f = w_origin * s_origin + L(cfg.w_time) * s_time + L(cfg.w_busi) * s_busi;
    return std::clamp(static_cast<double>(f), 0.0, 1.0);
}

namespace detail {

inline ScoredMemory score_memory(const MemoryRecord& r, double s_origin, RecallPath path, EpochMs now,
                                 const RecallConfig& cfg) {
    ScoredMemory m;
    m.id = r.id;
    m.path = path;
    m.s_origin = std::clamp(s_origin, 0.0, 1.0);
    m.s_time = time_score(std::max<EpochMs>(0, now - r.metadata.timestamp), cfg);
    m.s_busi = business_score(r, cfg);
    m.s_final = fuse(m.s_origin, m.s_time, m.s_busi, cfg);
    return m;
}

// S_final descending, then newer record, then id.
inline void sort_by_final(std::vector<ScoredMemory>& xs, const std::unordered_map<std::string, EpochMs>& ts) {
    std::stable_sort(xs.begin(), xs.end(), [&](const ScoredMemory& a, const ScoredMemory& b) {
        if (a.s_final != b.s_final) return a.s_final > b.s_final;
        const auto ta = ts.at(a.id), tb = ts.at(b.id);
        if (ta != tb) return ta > tb;
        return a.id < b.id;
    });
}

}  // namespace detail

// Ranks each path independently, keeps its quota, then merges. A record found
// by both paths keeps its higher S_final.
inline std::vector<ScoredMemory> recall(std::string_view query, const RecallConfig& cfg, const Store& store,
                                        const EmbeddingProvider& embedder, EpochMs now, const SearchFilter& filter = {}) {
    cfg.validate();
    std::unordered_map<std::string, EpochMs> ts;
    auto fused_path = [&](std::vector<std::pair<std::string, double>> hits, RecallPath path, std::size_t quota) {
        std::vector<ScoredMemory> out;
        for (const auto& [id, s] : hits) {
            auto r = store.get_record(id);
            if (!r) continue;  // removed between search and fetch
            ts[id] = r->metadata.timestamp;
            out.push_back(detail::score_memory(*r, s, path, now, cfg));
        }
        detail::sort_by_final(out, ts);
        if (out.size() > quota) out.resize(quota);
        return out;
    };

    std::vector<ScoredMemory> primary, keyword;
    if (cfg.quota_primary > 0) {
        std::vector<std::pair<std::string, double>> hits;
        for (const auto& h : store.hybrid_search(query, cfg.quota_primary * cfg.pool_factor, filter, embedder, cfg.hybrid))
            hits.emplace_back(h.id, h.s_origin);
        primary = fused_path(std::move(hits), RecallPath::primary, cfg.quota_primary);
    }
    if (cfg.quota_keyword > 0) {
        auto kw = store.keyword_search(query, cfg.quota_keyword * cfg.pool_factor, embedder, filter, cfg.keyword);
        min_max_normalize(kw);
        std::vector<std::pair<std::string, double>> hits;
        for (const auto& h : kw) hits.emplace_back(h.id, h.score);
        keyword = fused_path(std::move(hits), RecallPath::keyword, cfg.quota_keyword);
    }

    std::map<std::string, ScoredMemory> merged;
    for (auto* list : {&primary, &keyword}) {
        for (auto& m : *list) {
            auto [it, inserted] = merged.emplace(m.id, m);
            if (!inserted && m.s_final > it->second.s_final) it->second = m;
        }
    }
    std::vector<ScoredMemory> out;
    for (auto& [_, m] : merged) out.push_back(std::move(m));
    detail::sort_by_final(out, ts);
    return out;
}

// Rescores candidates by MaxSim against the query's token vectors. Candidates
// without token vectors follow the reranked ones in their incoming order.
inline std::vector<ScoredMemory> rerank(std::string_view query, std::vector<ScoredMemory> candidates, const Store& store,
                                        const EmbeddingProvider& embedder, const RecallConfig& cfg) {
    if (!cfg.rerank.enabled) {
        if (candidates.size() > cfg.final_k) candidates.resize(cfg.final_k);
        return candidates;
    }
    if (candidates.size() > cfg.rerank.candidate_cap) candidates.resize(cfg.rerank.candidate_cap);
    const auto q_tokens = embedder.embed_tokens(query);
    const bool sidecar = cfg.rerank.token_merge_threshold == store.token_merge_threshold();
    const auto q_quant = quantize_tokens(q_tokens);

    std::vector<ScoredMemory> scored, plain;
    for (auto& c : candidates) {
        if (q_tokens.empty()) {
            plain.push_back(std::move(c));
            continue;
        }
        if (cfg.rerank.quantized) {
            std::optional<QuantizedTokens> d;
            if (sidecar) {
                d = store.compressed_tokens(c.id);
            } else if (auto r = store.get_record(c.id)) {
                d = compress_tokens(r->tokens, cfg.rerank.token_merge_threshold);
            }
            if (d && !d->empty()) c.rerank_score = maxsim_quantized(q_quant, *d);
        } else if (auto r = store.get_record(c.id); r && !r->tokens.empty()) {
            c.rerank_score = maxsim(q_tokens, r->tokens);
        }
        (c.rerank_score ? scored : plain).push_back(std::move(c));
    }
    std::stable_sort(scored.begin(), scored.end(), [](const ScoredMemory& a, const ScoredMemory& b) {
        if (*a.rerank_score != *b.rerank_score) return *a.rerank_score > *b.rerank_score;
        return a.s_final > b.s_final;
    });
    scored.insert(scored.end(), std::make_move_iterator(plain.begin()), std::make_move_iterator(plain.end()));
    if (scored.size() > cfg.final_k) scored.resize(cfg.final_k);
    return scored;
}

}  // namespace membase
