#pragma once

// Embedded memory store: records with dense, sparse and token vectors, the
// event/entity tables, keyword graph, topic timelines, consolidation queue and
// installed schemas. Durability comes from an append-only operation log plus
// periodic snapshots; restore replays the log over the latest snapshot.
//
// Files inside the data directory:
//   snapshot.mbs  "MBS1" | u32 version | u64 last_seq | entries... | end entry
//                 entry = u8 tag | u32 length | payload (CBOR op) | u32 crc32(payload)
//   wal.log       one entry per line: "<crc32 as 8 hex digits> <json op>\n"

#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "membase/embedding.hpp"
#include "membase/error.hpp"
#include "membase/late_interaction.hpp"
#include "membase/schema.hpp"
#include "membase/text.hpp"
#include "membase/timeline.hpp"
#include "membase/value.hpp"

namespace membase {

static_assert(std::endian::native == std::endian::little, "store encoding assumes a little-endian host");

enum class RecordKind { event, entity, summary };

inline const char* to_string(RecordKind k) {
    switch (k) {
        case RecordKind::event: return "event";
        case RecordKind::entity: return "entity";
        case RecordKind::summary: return "summary";
    }
    return "event";
}

inline std::optional<RecordKind> record_kind_from_string(std::string_view s) {
    if (s == "event") return RecordKind::event;
    if (s == "entity") return RecordKind::entity;
    if (s == "summary") return RecordKind::summary;
    return std::nullopt;
}

using SparseVector = std::map<std::string, float>;

struct RecordMetadata {
    std::string type;  // event_type, entity_type or summarized timeline key
    EpochMs timestamp = 0;
    std::string user;
    std::string topic;
    std::string session;
    std::optional<double> instance_weight;

    bool operator==(const RecordMetadata&) const = default;
};

struct MemoryRecord {
    std::string id;
    RecordKind kind = RecordKind::event;
    std::string text;
    Vector dense;
    SparseVector sparse;
    std::vector<Vector> tokens;
    RecordMetadata metadata;
    std::optional<EpochMs> ttl_deadline;
    std::optional<std::string> summary_id;  // covering summary, once summarized
    bool reinforced = false;

    bool operator==(const MemoryRecord&) const = default;
};

// Term-frequency weights over the normalized token stream.
inline SparseVector sparse_vector(std::string_view s) {
    SparseVector v;
    for (auto& t : text::tokenize(s)) v[t] += 1.0F;
    return v;
}

inline MemoryRecord make_record(std::string id, RecordKind kind, std::string body, RecordMetadata meta,
                                const EmbeddingProvider& embedder) {
    MemoryRecord r;
    r.id = std::move(id);
    r.kind = kind;
    r.dense = embedder.embed_dense(body);
    r.sparse = sparse_vector(body);
    r.tokens = embedder.embed_tokens(body);
    r.text = std::move(body);
    r.metadata = std::move(meta);
    return r;
}

inline void check_record(const MemoryRecord& r) {
    if (r.id.empty()) throw Error(ErrorCode::invalid_record, "record id is empty");
    if (!is_unit(r.dense)) throw Error(ErrorCode::invalid_record, "dense vector is not unit norm", r.id);
    for (const auto& [t, w] : r.sparse) {
        if (!(w > 0.0F)) throw Error(ErrorCode::invalid_record, "sparse weight must be positive", r.id + ":" + t);
    }
    for (std::size_t i = 0; i < r.tokens.size(); ++i) {
        if (!is_unit(r.tokens[i])) throw Error(ErrorCode::invalid_record, "token vector is not unit norm", r.id);
        if (r.tokens[i].size() != r.dense.size())
            throw Error(ErrorCode::invalid_record, "token vector dimension mismatch", r.id);
    }
}

struct SearchFilter {
    std::optional<RecordKind> kind;
    std::optional<std::string> user;
    std::optional<std::string> type;
    std::optional<std::string> topic;

    bool matches(const MemoryRecord& r) const {
        if (kind && r.kind != *kind) return false;
        if (user && r.metadata.user != *user) return false;
        if (type && r.metadata.type != *type) return false;
        if (topic && r.metadata.topic != *topic) return false;
        return true;
    }
};

struct ScoredRecord {
    std::string id;
    double score = 0.0;

    bool operator==(const ScoredRecord&) const = default;
};

struct HybridHit {
    std::string id;
    double s_origin = 0.0;
    double dense = 0.0;   // min-max normalized within the dense list, 0 if absent
    double sparse = 0.0;  // min-max normalized within the sparse list, 0 if absent
};

struct HybridOptions {
    double alpha = 0.7;        // dense weight
    std::size_t fanout = 4;    // each path fetches k * fanout
    double dense_floor = 0.2;  // dense hits at or below this cosine are dropped
};

struct KeywordOptions {
    double floor = 0.1;         // nodes must score strictly above this
    std::size_t max_nodes = 8;  // nodes expanded per query
};

struct KeywordNode {
    std::string keyword;
    Vector embedding;
    std::set<std::string> linked_records;

    std::size_t count() const { return linked_records.size(); }
};

// Rescales scores to [0,1] by min-max; a constant list maps to 1.
inline void min_max_normalize(std::vector<ScoredRecord>& xs) {
    if (xs.empty()) return;
    auto [lo, hi] = std::minmax_element(xs.begin(), xs.end(), [](const auto& a, const auto& b) { return a.score < b.score; });
    const double mn = lo->score, mx = hi->score;
    for (auto& x : xs) x.score = (mx > mn) ? (x.score - mn) / (mx - mn) : 1.0;
}

// ---------------------------------------------------------------------------
// Encoding helpers

namespace detail {

inline std::string encode_floats(const Vector& v) {
    return text::base64_encode(std::string_view(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float)));
}

inline Vector decode_floats(const std::string& s) {
    std::string raw;
    if (!text::base64_decode(s, raw) || raw.size() % sizeof(float) != 0)
        throw Error(ErrorCode::corrupt, "bad vector encoding");
    Vector v(raw.size() / sizeof(float));
    std::memcpy(v.data(), raw.data(), raw.size());
    return v;
}

inline std::uint32_t crc32_of(std::string_view s) {
    return static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size())));
}

inline std::string hex32(std::uint32_t v) {
    char buf[9];
    std::snprintf(buf, sizeof(buf), "%08x", v);
    return buf;
}

template <class T>
void put_le(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <class T>
bool get_le(std::string_view in, std::size_t& pos, T& v) {
    if (pos + sizeof(T) > in.size()) return false;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return true;
}

}  // namespace detail

inline Json to_json(const MemoryRecord& r) {
    Json meta{{"type", r.metadata.type},
              {"timestamp", r.metadata.timestamp},
              {"user", r.metadata.user},
              {"topic", r.metadata.topic},
              {"session", r.metadata.session}};
    if (r.metadata.instance_weight) meta["instance_weight"] = *r.metadata.instance_weight;
    Json sparse = Json::object();
    for (const auto& [t, w] : r.sparse) sparse[t] = w;
    Json tokens = Json::array();
    for (const auto& t : r.tokens) tokens.push_back(detail::encode_floats(t));
    Json j{{"id", r.id},         {"kind", to_string(r.kind)}, {"text", r.text},
           {"dense", detail::encode_floats(r.dense)},          {"sparse", sparse},
           {"tokens", tokens},   {"metadata", meta},          {"reinforced", r.reinforced}};
    if (r.ttl_deadline) j["ttl_deadline"] = *r.ttl_deadline;
    if (r.summary_id) j["summary_id"] = *r.summary_id;
    return j;
}

inline MemoryRecord record_from_json(const Json& j) {
    MemoryRecord r;
    r.id = j.at("id").get<std::string>();
    auto kind = record_kind_from_string(j.at("kind").get<std::string>());
    if (!kind) throw Error(ErrorCode::corrupt, "unknown record kind", r.id);
    r.kind = *kind;
    r.text = j.at("text").get<std::string>();
    r.dense = detail::decode_floats(j.at("dense").get<std::string>());
    for (auto it = j.at("sparse").begin(); it != j.at("sparse").end(); ++it) r.sparse[it.key()] = it.value().get<float>();
    for (const auto& t : j.at("tokens")) r.tokens.push_back(detail::decode_floats(t.get<std::string>()));
    const auto& m = j.at("metadata");
    r.metadata.type = m.at("type").get<std::string>();
    r.metadata.timestamp = m.at("timestamp").get<EpochMs>();
    r.metadata.user = m.at("user").get<std::string>();
    r.metadata.topic = m.at("topic").get<std::string>();
    r.metadata.session = m.at("session").get<std::string>();
    if (m.contains("instance_weight")) r.metadata.instance_weight = m.at("instance_weight").get<double>();
    r.reinforced = j.value("reinforced", false);
    if (j.contains("ttl_deadline")) r.ttl_deadline = j.at("ttl_deadline").get<EpochMs>();
    if (j.contains("summary_id")) r.summary_id = j.at("summary_id").get<std::string>();
    return r;
}

struct StoreOptions {
    bool sync_writes = false;           // fsync after every log append
    double token_merge_threshold = 0.95;  // for the compressed token sidecar
};

class Store {
public:
    Store() = default;

    // Opens (restoring if present) a durable store rooted at `dir`.
    explicit Store(const std::filesystem::path& dir, StoreOptions opts = {}) : opts_(opts) { restore(dir); }

    ~Store() { close_log(); }

    Store(const Store&) = delete;
    Store& operator=(const Store&) = delete;

    // --- records ----------------------------------------------------------

    std::string upsert_record(const MemoryRecord& r) {
        check_record(r);
        std::lock_guard writer(writer_mu_);
        std::unique_lock lock(mu_);
        if (auto it = records_.find(r.id); it != records_.end() && it->second == r) return r.id;
        log_op({{"op", "put_record"}, {"record", to_json(r)}});
        put_record(r);
        return r.id;
    }

    // Merged and quantized token vectors, computed when the record is stored.
    std::optional<QuantizedTokens> compressed_tokens(const std::string& id) const {
        std::shared_lock lock(mu_);
        auto it = compressed_.find(id);
        if (it == compressed_.end()) return std::nullopt;
        return it->second;
    }

    double token_merge_threshold() const { return opts_.token_merge_threshold; }

    std::optional<MemoryRecord> get_record(const std::string& id) const {
        std::shared_lock lock(mu_);
        auto it = records_.find(id);
        if (it == records_.end()) return std::nullopt;
        return it->second;
    }

    bool remove_record(const std::string& id) {
        std::lock_guard writer(writer_mu_);
        std::unique_lock lock(mu_);
        if (records_.count(id) == 0) return false;
        log_op({{"op", "del_record"}, {"id", id}});
        erase_record(id);
        return true;
    }

    std::size_t record_count() const {
        std::shared_lock lock(mu_);
        return records_.size();
    }

    std::vector<std::string> record_ids() const {
        std::shared_lock lock(mu_);
        std::vector<std::string> out;
        out.reserve(records_.size());
        for (const auto& [id, _] : records_) out.push_back(id);
        std::sort(out.begin(), out.end());
        return out;
    }

    // Exact cosine scan (dot product of unit vectors).
    std::vector<ScoredRecord> dense_search(std::span<const float> q, std::size_t k, const SearchFilter& filter = {}) const {
        std::shared_lock lock(mu_);
        std::vector<ScoredRecord> hits;
        for (const auto& [id, r] : records_) {
            if (!filter.matches(r)) continue;
            hits.push_back({id, dot(q, r.dense)});
        }
        return top_k(std::move(hits), k);
    }

    std::vector<ScoredRecord> sparse_search(const SparseVector& q, std::size_t k, const SearchFilter& filter = {}) const {
        std::shared_lock lock(mu_);
        std::unordered_map<std::string, double> acc;
        for (const auto& [term, qw] : q) {
            auto it = postings_.find(term);
            if (it == postings_.end()) continue;
            for (const auto& id : it->second) {
                const auto& r = records_.at(id);
                if (!filter.matches(r)) continue;
                acc[id] += static_cast<double>(qw) * static_cast<double>(r.sparse.at(term));
            }
        }
        std::vector<ScoredRecord> hits;
        for (const auto& [id, s] : acc)
            if (s > 0.0) hits.push_back({id, s});
        return top_k(std::move(hits), k);
    }

    // Dense and sparse lists (k * fanout each), each min-max normalized, fused as
    // alpha * dense + (1 - alpha) * sparse.
    std::vector<HybridHit> hybrid_search(std::string_view query, std::size_t k, const SearchFilter& filter,
                                         const EmbeddingProvider& embedder, const HybridOptions& opts = {}) const {
        const auto q = embedder.embed_dense(query);
        auto dense = dense_search(q, k * opts.fanout, filter);
        std::erase_if(dense, [&](const ScoredRecord& s) { return s.score <= opts.dense_floor; });
        auto sparse = sparse_search(sparse_vector(query), k * opts.fanout, filter);
        min_max_normalize(dense);
        min_max_normalize(sparse);
        std::map<std::string, HybridHit> fused;
        for (const auto& d : dense) fused[d.id].dense = d.score;
        for (const auto& s : sparse) fused[s.id].sparse = s.score;
        std::vector<ScoredRecord> ranked;
        for (auto& [id, h] : fused) {
            h.id = id;
            h.s_origin = opts.alpha * h.dense + (1.0 - opts.alpha) * h.sparse;
            ranked.push_back({id, h.s_origin});
        }
        std::shared_lock lock(mu_);
        ranked = top_k(std::move(ranked), k);
        std::vector<HybridHit> out;
        for (const auto& r : ranked) out.push_back(fused.at(r.id));
        return out;
    }

    // --- keyword graph ----------------------------------------------------

    void keyword_update(const std::string& record_id, const std::vector<std::string>& keywords) {
        std::lock_guard writer(writer_mu_);
        std::unique_lock lock(mu_);
        if (records_.count(record_id) == 0) throw Error(ErrorCode::not_found, "unknown record", record_id);
        std::vector<std::string> fresh;
        for (const auto& raw : keywords) {
            auto kw = text::lower(text::trim(raw));
            if (kw.empty()) continue;
            auto it = nodes_.find(kw);
            if (it != nodes_.end() && it->second.linked_records.count(record_id) != 0) continue;
            if (std::find(fresh.begin(), fresh.end(), kw) == fresh.end()) fresh.push_back(std::move(kw));
        }
        if (fresh.empty()) return;
        log_op({{"op", "kw_link"}, {"record", record_id}, {"keywords", fresh}});
        link_keywords(record_id, fresh);
    }

    std::optional<KeywordNode> keyword_node(const std::string& keyword) const {
        std::shared_lock lock(mu_);
        auto it = nodes_.find(keyword);
        if (it == nodes_.end()) return std::nullopt;
        return it->second;
    }

    std::size_t keyword_count() const {
        std::shared_lock lock(mu_);
        return nodes_.size();
    }

    // Scores keyword nodes against the query; each linked record inherits the
    // best score among its matching nodes.
    std::vector<ScoredRecord> keyword_search(std::string_view query, std::size_t k, const EmbeddingProvider& embedder,
                                             const SearchFilter& filter = {}, const KeywordOptions& opts = {}) const {
        const auto q = embedder.embed_dense(query);
        std::shared_lock lock(mu_);
        std::vector<std::pair<double, const KeywordNode*>> scored;
        for (const auto& [kw, node] : nodes_) {
            const double s = dot(q, node.embedding);
            if (s > opts.floor) scored.emplace_back(s, &node);
        }
        std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
            return a.first > b.first || (a.first == b.first && a.second->keyword < b.second->keyword);
        });
        if (scored.size() > opts.max_nodes) scored.resize(opts.max_nodes);
        std::unordered_map<std::string, double> best;
        for (const auto& [s, node] : scored) {
            for (const auto& id : node->linked_records) {
                if (!filter.matches(records_.at(id))) continue;
                auto [it, inserted] = best.emplace(id, s);
                if (!inserted) it->second = std::max(it->second, s);
            }
        }
        std::vector<ScoredRecord> hits;
        for (const auto& [id, s] : best) hits.push_back({id, s});
        return top_k(std::move(hits), k);
    }

    // --- events, entities -------------------------------------------------

    void put_event(const EventInstance& e) {
        std::lock_guard writer(writer_mu_);
        std::unique_lock lock(mu_);
        if (auto it = events_.find(e.id); it != events_.end() && it->second == e) return;
        log_op({{"op", "put_event"}, {"event", to_json(e)}});
        events_[e.id] = e;
    }

    std::optional<EventInstance> get_event(const std::string& id) const {
        std::shared_lock lock(mu_);
        auto it = events_.find(id);
        if (it == events_.end()) return std::nullopt;
        return it->second;
    }

    std::vector<EventInstance> events() const {
        std::shared_lock lock(mu_);
        std::vector<EventInstance> out;
        for (const auto& [_, e] : events_) out.push_back(e);
        return out;
    }

    void put_entity(const EntityInstance& e) {
        std::lock_guard writer(writer_mu_);
        std::unique_lock lock(mu_);
        if (auto it = entities_.find(e.id); it != entities_.end() && it->second == e) return;
        log_op({{"op", "put_entity"}, {"entity", to_json(e)}});
        entities_[e.id] = e;
    }

    std::optional<EntityInstance> get_entity(const std::string& id) const {
        std::shared_lock lock(mu_);
        auto it = entities_.find(id);
        if (it == entities_.end()) return std::nullopt;
        return it->second;
    }

    std::optional<EntityInstance> get_entity(const std::string& type, const std::string& group_key) const {
        return get_entity(entity_id(type, group_key));
    }

    std::vector<EntityInstance> entities() const {
        std::shared_lock lock(mu_);
        std::vector<EntityInstance> out;
        for (const auto& [_, e] : entities_) out.push_back(e);
        return out;
    }

    // --- timelines --------------------------------------------------------

    void put_timeline(const TopicTimeline& t) {
        std::lock_guard writer(writer_mu_);
        std::unique_lock lock(mu_);
        if (auto it = timelines_.find(t.key); it != timelines_.end() && it->second == t) return;
        log_op({{"op", "put_timeline"}, {"timeline", to_json(t)}});
        timelines_[t.key] = t;
    }

    std::optional<TopicTimeline> get_timeline(const std::string& key) const {
        std::shared_lock lock(mu_);
        auto it = timelines_.find(key);
        if (it == timelines_.end()) return std::nullopt;
        return it->second;
    }

    std::vector<TopicTimeline> timelines() const {
        std::shared_lock lock(mu_);
        std::vector<TopicTimeline> out;
        for (const auto& [_, t] : timelines_) out.push_back(t);
        return out;
    }

    // --- consolidation queue ---------------------------------------------

    std::uint64_t queue_push(QueueEntry e) {
        std::lock_guard writer(writer_mu_);
        std::unique_lock lock(mu_);
        e.id = next_queue_id_;
        log_op({{"op", "queue_push"}, {"entry", to_json(e)}});
        queue_[e.id] = e;
        next_queue_id_ = e.id + 1;
        return e.id;
    }

    void queue_update(const QueueEntry& e) {
        std::lock_guard writer(writer_mu_);
        std::unique_lock lock(mu_);
        if (queue_.count(e.id) == 0) throw Error(ErrorCode::not_found, "unknown queue entry", std::to_string(e.id));
        log_op({{"op", "queue_update"}, {"entry", to_json(e)}});
        queue_[e.id] = e;
    }

    void queue_pop(std::uint64_t id) {
        std::lock_guard writer(writer_mu_);
        std::unique_lock lock(mu_);
        if (queue_.count(id) == 0) return;
        log_op({{"op", "queue_pop"}, {"id", id}});
        queue_.erase(id);
    }

    std::vector<QueueEntry> queue() const {
        std::shared_lock lock(mu_);
        std::vector<QueueEntry> out;
        for (const auto& [_, e] : queue_) out.push_back(e);
        return out;
    }

    std::size_t queue_depth() const {
        std::shared_lock lock(mu_);
        return queue_.size();
    }

    // --- schemas and extraction markers -----------------------------------

    void put_schema(const MemorySchema& s) {
        std::lock_guard writer(writer_mu_);
        std::unique_lock lock(mu_);
        log_op({{"op", "put_schema"}, {"schema", Json::parse(serialize_schema(s))}});
        schemas_[s.version] = s;
    }

    std::optional<MemorySchema> latest_schema() const {
        std::shared_lock lock(mu_);
        if (schemas_.empty()) return std::nullopt;
        return schemas_.rbegin()->second;
    }

    std::optional<MemorySchema> schema_version(std::int64_t v) const {
        std::shared_lock lock(mu_);
        auto it = schemas_.find(v);
        if (it == schemas_.end()) return std::nullopt;
        return it->second;
    }

    void mark_extraction(const std::string& id, const Json& summary) {
        std::lock_guard writer(writer_mu_);
        std::unique_lock lock(mu_);
        log_op({{"op", "extraction"}, {"id", id}, {"summary", summary}});
        extractions_[id] = summary;
    }

    std::optional<Json> find_extraction(const std::string& id) const {
        std::shared_lock lock(mu_);
        auto it = extractions_.find(id);
        if (it == extractions_.end()) return std::nullopt;
        return it->second;
    }

    // --- TTL ----------------------------------------------------------------

    void set_summary(const std::string& record_id, const std::string& summary_id, EpochMs ttl_deadline) {
        std::lock_guard writer(writer_mu_);
        std::unique_lock lock(mu_);
        if (records_.count(record_id) == 0) throw Error(ErrorCode::not_found, "unknown record", record_id);
        log_op({{"op", "summarized"}, {"id", record_id}, {"summary", summary_id}, {"ttl", ttl_deadline}});
        apply_summarized(record_id, summary_id, ttl_deadline);
    }

    // Clears a pending TTL and pins the record against expiry.
    void reinforce(const std::string& record_id) {
        std::lock_guard writer(writer_mu_);
        std::unique_lock lock(mu_);
        auto it = records_.find(record_id);
        if (it == records_.end()) throw Error(ErrorCode::not_found, "unknown record", record_id);
        if (it->second.reinforced && !it->second.ttl_deadline) return;
        log_op({{"op", "reinforce"}, {"id", record_id}});
        apply_reinforce(record_id);
    }

    // Prunes records whose TTL passed, whose covering summary still exists and
    // which were never reinforced.
    std::vector<std::string> expire(EpochMs now) {
        std::lock_guard writer(writer_mu_);
        std::unique_lock lock(mu_);
        auto victims = expiry_candidates(now);
        if (victims.empty()) return victims;
        log_op({{"op", "expire"}, {"now", now}});
        apply_expire(now);
        return victims;
    }

    // --- batches ----------------------------------------------------------

    // Groups every write made while it is open into one log entry, so a crash
    // persists either all of them or none. Other writers wait until commit.
    class Batch {
    public:
        explicit Batch(Store& s) : store_(s), lock_(s.writer_mu_) {
            std::unique_lock state(store_.mu_);
            ++store_.batch_depth_;
        }
        ~Batch() {
            try {
                commit();
            } catch (...) {
            }
        }
        Batch(const Batch&) = delete;
        Batch& operator=(const Batch&) = delete;

        void commit() {
            if (done_) return;
            done_ = true;
            std::unique_lock state(store_.mu_);
            if (--store_.batch_depth_ > 0) return;
            Json ops = std::move(store_.pending_);
            store_.pending_ = Json::array();
            if (!ops.empty()) store_.log_op({{"op", "batch"}, {"ops", std::move(ops)}});
        }

    private:
        Store& store_;
        std::unique_lock<std::recursive_mutex> lock_;
        bool done_ = false;
    };

    // --- durability -------------------------------------------------------

    // Writes a snapshot of the whole state and truncates the log. Readers keep
    // running; writers wait until the log has been reset.
    void snapshot() {
        std::lock_guard writer(writer_mu_);
        std::shared_lock lock(mu_);
        if (dir_.empty()) throw Error(ErrorCode::io, "store has no data directory");
        write_snapshot(dir_ / "snapshot.mbs");
        close_log();
        std::ofstream(dir_ / "wal.log", std::ios::binary | std::ios::trunc);
        open_log();
    }

    // Replaces the state with the snapshot and log found in `dir` (empty or
    // missing directory gives an empty store) and logs future writes there.
    void restore(const std::filesystem::path& dir) {
        std::lock_guard writer(writer_mu_);
        std::unique_lock lock(mu_);
        close_log();
        clear();
        warnings_.clear();
        dir_ = dir;
        std::filesystem::create_directories(dir_);
        const auto snap = dir_ / "snapshot.mbs";
        if (std::filesystem::exists(snap)) load_snapshot(snap);
        const auto log = dir_ / "wal.log";
        if (std::filesystem::exists(log)) replay_log(log);
        open_log();
    }

    const std::vector<std::string>& restore_warnings() const { return warnings_; }

    const std::filesystem::path& data_dir() const { return dir_; }

    std::uint64_t last_seq() const {
        std::shared_lock lock(mu_);
        return seq_;
    }

    // Every structural invariant; returns human-readable failures.
    std::vector<std::string> check_invariants() const {
        std::shared_lock lock(mu_);
        std::vector<std::string> bad;
        for (const auto& [id, r] : records_) {
            try {
                check_record(r);
            } catch (const Error& e) {
                bad.push_back(id + ": " + e.what());
            }
            for (const auto& [t, _] : r.sparse) {
                auto it = postings_.find(t);
                if (it == postings_.end() || it->second.count(id) == 0) bad.push_back(id + ": missing posting " + t);
            }
        }
        for (const auto& [t, ids] : postings_)
            for (const auto& id : ids)
                if (records_.count(id) == 0) bad.push_back("posting " + t + " -> dangling " + id);
        for (const auto& [kw, node] : nodes_) {
            if (node.linked_records.empty()) bad.push_back("keyword " + kw + " has no records");
            for (const auto& id : node.linked_records)
                if (records_.count(id) == 0) bad.push_back("keyword " + kw + " -> dangling " + id);
            if (!node.linked_records.empty()) {
                const auto expect = mean_embedding(node);
                for (std::size_t i = 0; i < expect.size(); ++i)
                    if (std::fabs(expect[i] - node.embedding[i]) > 1e-6) {
                        bad.push_back("keyword " + kw + " embedding stale");
                        break;
                    }
            }
        }
        for (const auto& [id, e] : entities_) {
            for (const auto& [field, acc] : e.accumulators) {
                if (acc.count <= 0) continue;
                auto it = e.properties.find(field);
                auto v = it == e.properties.end() ? std::nullopt : as_number(it->second);
                if (!v || std::fabs(*v - acc.sum / static_cast<double>(acc.count)) > 1e-9)
                    bad.push_back(id + ": AVG field " + field + " disagrees with accumulator");
            }
        }
        return bad;
    }

    // Canonical JSON of all tables, for equality checks across restarts.
    Json dump_state() const {
        std::shared_lock lock(mu_);
        Json j;
        std::map<std::string, Json> recs;
        for (const auto& [id, r] : records_) recs[id] = to_json(r);
        j["records"] = recs;
        Json nodes = Json::object();
        for (const auto& [kw, n] : nodes_) nodes[kw] = {{"records", n.linked_records}, {"embedding", detail::encode_floats(n.embedding)}};
        j["keywords"] = nodes;
        Json evs = Json::object();
        for (const auto& [id, e] : events_) evs[id] = to_json(e);
        j["events"] = evs;
        Json ents = Json::object();
        for (const auto& [id, e] : entities_) ents[id] = to_json(e);
        j["entities"] = ents;
        Json tls = Json::object();
        for (const auto& [k, t] : timelines_) tls[k] = to_json(t);
        j["timelines"] = tls;
        Json q = Json::array();
        for (const auto& [_, e] : queue_) q.push_back(to_json(e));
        j["queue"] = q;
        j["next_queue_id"] = next_queue_id_;
        Json sch = Json::object();
        for (const auto& [v, s] : schemas_) sch[std::to_string(v)] = Json::parse(serialize_schema(s));
        j["schemas"] = sch;
        j["extractions"] = extractions_;
        return j;
    }

private:
    // --- state mutation (caller holds the write lock) ----------------------

    void put_record(const MemoryRecord& r) {
        if (records_.count(r.id) != 0) unindex_terms(records_.at(r.id));
        records_[r.id] = r;
        compressed_[r.id] = compress_tokens(r.tokens, opts_.token_merge_threshold);
        for (const auto& [t, _] : r.sparse) postings_[t].insert(r.id);
        if (auto it = record_keywords_.find(r.id); it != record_keywords_.end()) {
            for (const auto& kw : it->second) refresh_node(nodes_.at(kw));
        }
    }

    void erase_record(const std::string& id) {
        auto it = records_.find(id);
        if (it == records_.end()) return;
        unindex_terms(it->second);
        records_.erase(it);
        compressed_.erase(id);
        events_.erase(id);
        if (auto kw = record_keywords_.find(id); kw != record_keywords_.end()) {
            for (const auto& k : kw->second) {
                auto& node = nodes_.at(k);
                node.linked_records.erase(id);
                if (node.linked_records.empty()) {
                    nodes_.erase(k);
                } else {
                    refresh_node(node);
                }
            }
            record_keywords_.erase(kw);
        }
        for (auto& [_, t] : timelines_) {
            std::erase_if(t.events, [&](const TimelineEntry& e) { return e.event_id == id; });
        }
    }

    void unindex_terms(const MemoryRecord& r) {
        for (const auto& [t, _] : r.sparse) {
            auto it = postings_.find(t);
            if (it == postings_.end()) continue;
            it->second.erase(r.id);
            if (it->second.empty()) postings_.erase(it);
        }
    }

    void link_keywords(const std::string& record_id, const std::vector<std::string>& keywords) {
        for (const auto& kw : keywords) {
            auto& node = nodes_[kw];
            node.keyword = kw;
            node.linked_records.insert(record_id);
            record_keywords_[record_id].insert(kw);
            refresh_node(node);
        }
    }

    // Renormalized mean of contributor vectors, summed in id order so the
    // result does not depend on insertion order.
    Vector mean_embedding(const KeywordNode& node) const {
        std::vector<double> acc;
        for (const auto& id : node.linked_records) {
            const auto& d = records_.at(id).dense;
            if (acc.empty()) acc.assign(d.size(), 0.0);
            for (std::size_t i = 0; i < d.size(); ++i) acc[i] += d[i];
        }
        double norm = 0.0;
        for (auto& x : acc) {
            x /= static_cast<double>(node.linked_records.size());
            norm += x * x;
        }
        norm = std::sqrt(norm);
        Vector out(acc.size());
        for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(norm > 0 ? acc[i] / norm : 0.0);
        return out;
    }

    void refresh_node(KeywordNode& node) { node.embedding = mean_embedding(node); }

    void apply_summarized(const std::string& id, const std::string& summary_id, EpochMs ttl) {
        auto& r = records_.at(id);
        r.summary_id = summary_id;
        if (!r.reinforced) r.ttl_deadline = ttl;
        if (auto e = events_.find(id); e != events_.end() && !r.reinforced) e->second.ttl_deadline = ttl;
    }

    void apply_reinforce(const std::string& id) {
        auto& r = records_.at(id);
        r.ttl_deadline.reset();
        r.reinforced = true;
        if (auto e = events_.find(id); e != events_.end()) e->second.ttl_deadline.reset();
    }

    std::vector<std::string> expiry_candidates(EpochMs now) const {
        std::vector<std::string> out;
        for (const auto& [id, r] : records_) {
            if (r.reinforced || !r.ttl_deadline || *r.ttl_deadline >= now) continue;
            if (!r.summary_id || records_.count(*r.summary_id) == 0) continue;
            out.push_back(id);
        }
        std::sort(out.begin(), out.end());
        return out;
    }

    void apply_expire(EpochMs now) {
        for (const auto& id : expiry_candidates(now)) erase_record(id);
    }

    void clear() {
        records_.clear();
        compressed_.clear();
        postings_.clear();
        nodes_.clear();
        record_keywords_.clear();
        events_.clear();
        entities_.clear();
        timelines_.clear();
        queue_.clear();
        next_queue_id_ = 1;
        schemas_.clear();
        extractions_.clear();
        seq_ = 0;
    }

    // Applies one logged operation. Used for both snapshot load and log replay.
    void apply(const Json& op) {
        const auto& name = op.at("op").get_ref<const std::string&>();
        if (name == "put_record") {
            put_record(record_from_json(op.at("record")));
        } else if (name == "del_record") {
            erase_record(op.at("id").get<std::string>());
        } else if (name == "kw_link") {
            link_keywords(op.at("record").get<std::string>(), op.at("keywords").get<std::vector<std::string>>());
        } else if (name == "batch") {
            for (const auto& inner : op.at("ops")) apply(inner);
        } else if (name == "put_event") {
            auto e = event_from_json(op.at("event"));
            events_[e.id] = e;
        } else if (name == "put_entity") {
            auto e = entity_from_json(op.at("entity"));
            entities_[e.id] = e;
        } else if (name == "put_timeline") {
            auto t = timeline_from_json(op.at("timeline"));
            timelines_[t.key] = t;
        } else if (name == "queue_push" || name == "queue_update") {
            auto e = queue_entry_from_json(op.at("entry"));
            queue_[e.id] = e;
            next_queue_id_ = std::max(next_queue_id_, e.id + 1);
        } else if (name == "queue_pop") {
            queue_.erase(op.at("id").get<std::uint64_t>());
        } else if (name == "queue_next") {
            next_queue_id_ = op.at("id").get<std::uint64_t>();
        } else if (name == "put_schema") {
            auto s = schema_from_json(op.at("schema"));
            schemas_[s.version] = s;
        } else if (name == "extraction") {
            extractions_[op.at("id").get<std::string>()] = op.at("summary");
        } else if (name == "summarized") {
            apply_summarized(op.at("id").get<std::string>(), op.at("summary").get<std::string>(), op.at("ttl").get<EpochMs>());
        } else if (name == "reinforce") {
            apply_reinforce(op.at("id").get<std::string>());
        } else if (name == "expire") {
            apply_expire(op.at("now").get<EpochMs>());
        } else {
            throw Error(ErrorCode::corrupt, "unknown log operation '" + name + "'");
        }
    }

    // --- log --------------------------------------------------------------

    void open_log() {
        if (dir_.empty()) return;
        log_ = std::fopen((dir_ / "wal.log").c_str(), "ab");
        if (log_ == nullptr) throw Error(ErrorCode::io, "cannot open log", (dir_ / "wal.log").string());
    }

    void close_log() {
        if (log_ != nullptr) std::fclose(log_);
        log_ = nullptr;
    }

    void log_op(Json op) {
        if (log_ == nullptr) return;
        if (batch_depth_ > 0) {
            pending_.push_back(std::move(op));
            return;
        }
        op["seq"] = seq_ + 1;
        const auto body = op.dump();
        const auto line = detail::hex32(detail::crc32_of(body)) + " " + body + "\n";
        if (std::fwrite(line.data(), 1, line.size(), log_) != line.size() || std::fflush(log_) != 0)
            throw Error(ErrorCode::io, "log append failed", (dir_ / "wal.log").string());
        if (opts_.sync_writes) ::fsync(::fileno(log_));
        ++seq_;
    }

    void replay_log(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        std::size_t pos = 0;
        while (pos < data.size()) {
            const auto nl = data.find('\n', pos);
            if (nl == std::string::npos) {
                warnings_.push_back("truncated log tail at offset " + std::to_string(pos) + " (" +
                                    std::to_string(data.size() - pos) + " bytes dropped)");
                std::filesystem::resize_file(path, pos);
                break;
            }
            const std::string_view line(data.data() + pos, nl - pos);
            if (line.size() < 10 || line[8] != ' ')
                throw Error(ErrorCode::corrupt, "malformed log entry", path.string(), {}, pos);
            const auto body = line.substr(9);
            if (detail::hex32(detail::crc32_of(body)) != line.substr(0, 8))
                throw Error(ErrorCode::corrupt, "log checksum mismatch", path.string(), {}, pos);
            Json op;
            try {
                op = Json::parse(body);
            } catch (const Json::parse_error&) {
                throw Error(ErrorCode::corrupt, "unparseable log entry", path.string(), {}, pos);
            }
            const auto seq = op.at("seq").get<std::uint64_t>();
            if (seq > seq_) {
                apply(op);
                seq_ = seq;
            }
            pos = nl + 1;
        }
    }

    // --- snapshot ---------------------------------------------------------

    void write_snapshot(const std::filesystem::path& path) const {
        std::string buf("MBS1", 4);
        detail::put_le<std::uint32_t>(buf, 1);
        detail::put_le<std::uint64_t>(buf, seq_);
        auto emit = [&](std::uint8_t tag, const Json& op) {
            const auto payload = Json::to_cbor(op);
            const std::string_view p(reinterpret_cast<const char*>(payload.data()), payload.size());
            detail::put_le<std::uint8_t>(buf, tag);
            detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(p.size()));
            buf.append(p);
            detail::put_le<std::uint32_t>(buf, detail::crc32_of(p));
        };
        for (const auto& [v, s] : schemas_) emit(7, {{"op", "put_schema"}, {"schema", Json::parse(serialize_schema(s))}});
        std::vector<std::string> ids;
        for (const auto& [id, _] : records_) ids.push_back(id);
        std::sort(ids.begin(), ids.end());
        for (const auto& id : ids) emit(1, {{"op", "put_record"}, {"record", to_json(records_.at(id))}});
        std::map<std::string, std::vector<std::string>> by_record;
        for (const auto& [kw, node] : nodes_)
            for (const auto& id : node.linked_records) by_record[id].push_back(kw);
        for (const auto& [id, kws] : by_record) emit(4, {{"op", "kw_link"}, {"record", id}, {"keywords", kws}});
        for (const auto& [_, e] : events_) emit(2, {{"op", "put_event"}, {"event", to_json(e)}});
        for (const auto& [_, e] : entities_) emit(3, {{"op", "put_entity"}, {"entity", to_json(e)}});
        for (const auto& [_, t] : timelines_) emit(5, {{"op", "put_timeline"}, {"timeline", to_json(t)}});
        for (const auto& [_, q] : queue_) emit(6, {{"op", "queue_push"}, {"entry", to_json(q)}});
        emit(6, {{"op", "queue_next"}, {"id", next_queue_id_}});
        for (const auto& [id, s] : extractions_) emit(8, {{"op", "extraction"}, {"id", id}, {"summary", s}});
        detail::put_le<std::uint8_t>(buf, 0xFF);
        detail::put_le<std::uint32_t>(buf, 0);
        detail::put_le<std::uint32_t>(buf, detail::crc32_of({}));

        const auto tmp = path.string() + ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
            if (!out) throw Error(ErrorCode::io, "snapshot write failed", tmp);
        }
        std::filesystem::rename(tmp, path);
    }

    void load_snapshot(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        if (data.size() < 16 || data.compare(0, 4, "MBS1") != 0)
            throw Error(ErrorCode::corrupt, "bad snapshot header", path.string(), {}, 0);
        std::size_t pos = 4;
        std::uint32_t version = 0;
        std::uint64_t seq = 0;
        detail::get_le(data, pos, version);
        detail::get_le(data, pos, seq);
        if (version != 1) throw Error(ErrorCode::corrupt, "unsupported snapshot version", path.string(), {}, 4);
        while (true) {
            const std::size_t at = pos;
            std::uint8_t tag = 0;
            std::uint32_t len = 0, crc = 0;
            if (!detail::get_le(data, pos, tag) || !detail::get_le(data, pos, len) || pos + len + 4 > data.size())
                throw Error(ErrorCode::corrupt, "truncated snapshot entry", path.string(), {}, at);
            const std::string_view payload(data.data() + pos, len);
            pos += len;
            detail::get_le(data, pos, crc);
            if (crc != detail::crc32_of(payload))
                throw Error(ErrorCode::corrupt, "snapshot checksum mismatch", path.string(), {}, at);
            if (tag == 0xFF) break;
            try {
                apply(Json::from_cbor(payload.begin(), payload.end()));
            } catch (const Json::exception& e) {
                throw Error(ErrorCode::corrupt, std::string("bad snapshot payload: ") + e.what(), path.string(), {}, at);
            }
        }
        seq_ = seq;
    }

    static std::vector<ScoredRecord> top_k_sorted(std::vector<ScoredRecord> hits, std::size_t k,
                                                  const std::unordered_map<std::string, MemoryRecord>& recs) {
        auto cmp = [&](const ScoredRecord& a, const ScoredRecord& b) {
            if (a.score != b.score) return a.score > b.score;
            const auto ta = recs.at(a.id).metadata.timestamp, tb = recs.at(b.id).metadata.timestamp;
            if (ta != tb) return ta > tb;
            return a.id < b.id;
        };
        if (hits.size() > k) {
            std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end(), cmp);
            hits.resize(k);
        } else {
            std::sort(hits.begin(), hits.end(), cmp);
        }
        return hits;
    }

    // Orders by score, then recency (newer first), then id.
    std::vector<ScoredRecord> top_k(std::vector<ScoredRecord> hits, std::size_t k) const {
        return top_k_sorted(std::move(hits), k, records_);
    }

    StoreOptions opts_;
    mutable std::shared_mutex mu_;
    std::recursive_mutex writer_mu_;  // serializes writers; held across a batch
    int batch_depth_ = 0;
    Json pending_ = Json::array();
    std::unordered_map<std::string, MemoryRecord> records_;
    std::unordered_map<std::string, QuantizedTokens> compressed_;
    std::unordered_map<std::string, std::set<std::string>> postings_;
    std::map<std::string, KeywordNode> nodes_;
    std::unordered_map<std::string, std::set<std::string>> record_keywords_;
    std::map<std::string, EventInstance> events_;
    std::map<std::string, EntityInstance> entities_;
    std::map<std::string, TopicTimeline> timelines_;
    std::map<std::uint64_t, QueueEntry> queue_;
    std::uint64_t next_queue_id_ = 1;
    std::map<std::int64_t, MemorySchema> schemas_;
    std::map<std::string, Json> extractions_;

    std::filesystem::path dir_;
    std::FILE* log_ = nullptr;
    std::uint64_t seq_ = 0;
    std::vector<std::string> warnings_;
};

}  // namespace membase
