#pragma once

// End-to-end pipeline: session buffers -> segmentation -> one-pass extraction
// -> event storage, materialization and entity patches -> recall.

#include <atomic>
#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include "membase/embedding.hpp"
#include "membase/error.hpp"
#include "membase/eua.hpp"
#include "membase/extraction.hpp"
#include "membase/llm.hpp"
#include "membase/operators.hpp"
#include "membase/retrieval.hpp"
#include "membase/schema.hpp"
#include "membase/store.hpp"

namespace membase {

inline constexpr std::string_view kVersion = "0.1.0";

struct EngineConfig {
    std::size_t flush_threshold = 20;
    EpochMs idle_timeout = 30 * kMinuteMs;
    bool entity_patches = true;  // apply SEARCH/REPLACE patches from the extraction reply
    RecallConfig recall;
    CompressionConfig compression;
    ExtractionOptions extraction;
    ConsolidationOptions consolidation;
    std::string compress_template{kDefaultCompressTemplate};
    PatchOptions patch;
};

struct FlushResult {
    std::string session_id;
    std::string extraction_id;
    bool replayed = false;
    std::vector<std::string> event_ids;
    std::vector<std::string> patched_entities;
    MaterializeReport materialized;
    std::vector<std::string> warnings;
    std::size_t segments = 0;
    std::size_t segmentation_prompt_tokens = 0;
    std::size_t extraction_prompt_tokens = 0;
};

inline Json to_json(const FlushResult& r) {
    return {{"session_id", r.session_id},
            {"extraction_id", r.extraction_id},
            {"replayed", r.replayed},
            {"events", r.event_ids.size()},
            {"event_ids", r.event_ids},
            {"patched_entities", r.patched_entities},
            {"materialized", to_json(r.materialized)},
            {"warnings", r.warnings},
            {"segments", r.segments},
            {"tokens", {{"segmentation_prompt", r.segmentation_prompt_tokens}, {"extraction_prompt", r.extraction_prompt_tokens}}}};
}

inline FlushResult flush_result_from_json(const Json& j) {
    FlushResult r;
    r.session_id = j.value("session_id", "");
    r.extraction_id = j.value("extraction_id", "");
    r.event_ids = j.value("event_ids", std::vector<std::string>{});
    r.patched_entities = j.value("patched_entities", std::vector<std::string>{});
    r.warnings = j.value("warnings", std::vector<std::string>{});
    r.segments = j.value("segments", std::size_t{0});
    if (j.contains("materialized")) {
        const auto& m = j.at("materialized");
        r.materialized.created = m.value("created", std::vector<std::string>{});
        r.materialized.updated = m.value("updated", std::vector<std::string>{});
        r.materialized.queued = m.value("queued", std::size_t{0});
        r.materialized.errors = m.value("errors", std::vector<std::string>{});
    }
    return r;
}

struct AppendResult {
    AppendStatus status = AppendStatus::buffered;
    std::size_t index = 0;
    std::optional<FlushResult> flush;
};

struct SearchHit {
    ScoredMemory score;
    MemoryRecord record;
};

inline Json to_json(const SearchHit& h) {
    auto j = to_json(h.score);
    j["kind"] = to_string(h.record.kind);
    j["text"] = h.record.text;
    j["type"] = h.record.metadata.type;
    j["timestamp"] = h.record.metadata.timestamp;
    j["user"] = h.record.metadata.user;
    j["topic"] = h.record.metadata.topic;
    return j;
}

inline std::string extraction_id(const std::string& session_id, std::size_t message_count) {
    return "x-" + text::hex64(text::fnv1a(session_id + "|" + std::to_string(message_count)));
}

// Keywords linked in the graph for an event: heuristic terms of its text plus
// any "keywords" property (comma separated).
inline std::vector<std::string> event_keywords(const EventInstance& ev, const EventTypeDef* def) {
    auto out = text::keywords(event_text(ev, def));
    if (auto it = ev.properties.find("keywords"); it != ev.properties.end()) {
        std::string raw = render(it->second);
        std::size_t pos = 0;
        while (pos <= raw.size()) {
            auto comma = raw.find(',', pos);
            if (comma == std::string::npos) comma = raw.size();
            auto kw = text::lower(text::trim(std::string_view(raw).substr(pos, comma - pos)));
            if (!kw.empty() && std::find(out.begin(), out.end(), kw) == out.end()) out.push_back(kw);
            pos = comma + 1;
        }
    }
    return out;
}

inline MemoryRecord event_record(const EventInstance& ev, const EventTypeDef* def, const EmbeddingProvider& embedder) {
    RecordMetadata meta;
    meta.type = ev.event_type;
    meta.timestamp = ev.timestamp;
    meta.user = ev.user;
    meta.topic = ev.topic.value_or("");
    meta.session = ev.source_session;
    if (def != nullptr && def->instance_weight_field) {
        if (auto it = ev.properties.find(*def->instance_weight_field); it != ev.properties.end())
            meta.instance_weight = as_number(it->second);
    }
    return make_record(ev.id, RecordKind::event, event_text(ev, def), std::move(meta), embedder);
}

class Engine {
public:
    using Clock = std::function<EpochMs()>;

    static EpochMs system_now() {
        return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
            .count();
    }

    Engine(Store& store, LlmProvider& llm, const EmbeddingProvider& embedder, EngineConfig cfg = {},
           Clock clock = &Engine::system_now)
        : store_(store),
          llm_(llm),
          embedder_(embedder),
          cfg_(std::move(cfg)),
          clock_(std::move(clock)),
          worker_(store_, llm_, [this] { return schema(); }, &embedder_, clock_, cfg_.consolidation) {
        cfg_.recall.validate();
        if (auto s = store_.latest_schema()) schema_ = std::make_shared<const MemorySchema>(std::move(*s));
    }

    ~Engine() { worker_.stop(); }

    Engine(const Engine&) = delete;
    Engine& operator=(const Engine&) = delete;

    const EngineConfig& config() const { return cfg_; }
    Store& store() { return store_; }
    EpochMs now() const { return clock_(); }

    // --- schema -------------------------------------------------------------

    std::shared_ptr<const MemorySchema> schema() const { return std::atomic_load(&schema_); }

    // Validates and installs a schema. The version becomes max(document
    // version, current + 1). Throws validation with the report in detail().
    std::int64_t install_schema(MemorySchema s) {
        const auto report = validate_schema(s);
        if (!report.ok()) {
            Json v = Json::array();
            std::string first;
            for (const auto& x : report.violations) {
                if (x.severity != Severity::error) continue;
                if (first.empty()) first = x.path;
                v.push_back({{"path", x.path}, {"message", x.message}});
            }
            throw Error(ErrorCode::validation, "schema has " + std::to_string(report.error_count()) + " violation(s)",
                        first, v.dump());
        }
        std::lock_guard lock(schema_mu_);
        if (auto cur = schema()) s.version = std::max(s.version, cur->version + 1);
        store_.put_schema(s);
        std::atomic_store(&schema_, std::make_shared<const MemorySchema>(std::move(s)));
        return schema()->version;
    }

    // --- sessions -----------------------------------------------------------

    AppendResult append_message(const std::string& session_id, const std::string& user, Role role, std::string content,
                                std::optional<EpochMs> timestamp = std::nullopt) {
        auto state = session_state(session_id, true);
        std::unique_lock lock(state->mu, std::try_to_lock);
        if (!lock.owns_lock()) throw Error(ErrorCode::conflict, "session is being flushed", session_id);
        if (state->buffer.session.user.empty()) state->buffer.session.user = user;
        Message m;
        m.index = state->buffer.session.messages.size();
        m.role = role;
        m.content = std::move(content);
        m.timestamp = timestamp.value_or(clock_());
        AppendResult out;
        out.index = state->base + m.index;
        out.status = buffer_append(state->buffer, std::move(m));
        if (out.status == AppendStatus::flush_triggered) out.flush = flush_locked(*state);
        return out;
    }

    FlushResult flush(const std::string& session_id) {
        auto state = session_state(session_id, false);
        if (!state) throw Error(ErrorCode::not_found, "unknown session", session_id);
        std::unique_lock lock(state->mu, std::try_to_lock);
        if (!lock.owns_lock()) throw Error(ErrorCode::conflict, "flush already running for session", session_id);
        return flush_locked(*state);
    }

    // Offline path: runs the whole pipeline on a complete session.
    FlushResult ingest(Session session) {
        check_session(session);
        auto state = session_state(session.id, true);
        std::unique_lock lock(state->mu, std::try_to_lock);
        if (!lock.owns_lock()) throw Error(ErrorCode::conflict, "flush already running for session", session.id);
        const EpochMs now = clock_();
        for (auto& m : session.messages)
            if (m.timestamp <= 0) m.timestamp = now;
        state->buffer.session = std::move(session);
        state->base = 0;
        return flush_locked(*state);
    }

    // Flushes every session idle for longer than the configured timeout.
    std::vector<FlushResult> flush_idle() {
        std::vector<std::string> ids;
        {
            std::lock_guard lock(sessions_mu_);
            for (const auto& [id, _] : sessions_) ids.push_back(id);
        }
        std::vector<FlushResult> out;
        const EpochMs now = clock_();
        for (const auto& id : ids) {
            auto state = session_state(id, false);
            std::unique_lock lock(state->mu, std::try_to_lock);
            if (!lock.owns_lock() || !buffer_idle(state->buffer, now, cfg_.idle_timeout)) continue;
            try {
                out.push_back(flush_locked(*state));
            } catch (const Error&) {
                // the buffer is kept and retried on the next tick
            }
        }
        return out;
    }

    std::size_t buffered_messages(const std::string& session_id) const {
        std::lock_guard lock(sessions_mu_);
        auto it = sessions_.find(session_id);
        return it == sessions_.end() ? 0 : it->second->buffer.session.messages.size();
    }

    // --- reads --------------------------------------------------------------

    std::vector<SearchHit> search(std::string_view query, const RecallConfig& cfg, const SearchFilter& filter = {},
                                  bool reinforce_hits = true) {
        const EpochMs now = clock_();
        auto ranked = rerank(query, recall(query, cfg, store_, embedder_, now, filter), store_, embedder_, cfg);
        std::vector<SearchHit> out;
        for (auto& m : ranked) {
            auto r = store_.get_record(m.id);
            if (!r) continue;
            if (reinforce_hits && r->kind == RecordKind::event && r->summary_id && r->ttl_deadline)
                reinforce_event(store_, r->id, now);
            out.push_back({std::move(m), std::move(*r)});
        }
        return out;
    }

    std::vector<SearchHit> search(std::string_view query) { return search(query, cfg_.recall); }

    std::optional<EntityInstance> entity(const std::string& type, const std::string& group_key) const {
        return store_.get_entity(type, group_key);
    }

    // --- maintenance --------------------------------------------------------

    CompressReport compress() {
        return compress_timelines(store_, llm_, clock_(), cfg_.compression, embedder_, cfg_.compress_template);
    }

    std::vector<std::string> expire() { return store_.expire(clock_()); }

    DrainReport drain_queue() { return worker_.drain(); }
    void start_worker() { worker_.start(); }
    void stop_worker() { worker_.stop(); }

    Json health() const {
        auto s = schema();
        std::size_t sessions = 0;
        {
            std::lock_guard lock(sessions_mu_);
            sessions = sessions_.size();
        }
        return {{"status", "ok"},
                {"build", {{"name", "membase"}, {"version", kVersion}}},
                {"schema_version", s ? Json(s->version) : Json(nullptr)},
                {"records", store_.record_count()},
                {"events", store_.events().size()},
                {"entities", store_.entities().size()},
                {"keywords", store_.keyword_count()},
                {"queue_depth", store_.queue_depth()},
                {"sessions", sessions}};
    }

private:
    struct SessionState {
        std::mutex mu;
        SessionBuffer buffer;
        std::size_t base = 0;  // messages flushed before the current buffer
    };

    std::shared_ptr<SessionState> session_state(const std::string& id, bool create) {
        std::lock_guard lock(sessions_mu_);
        auto it = sessions_.find(id);
        if (it != sessions_.end()) return it->second;
        if (!create) return nullptr;
        auto st = std::make_shared<SessionState>();
        st->buffer.session.id = id;
        st->buffer.flush_threshold = cfg_.flush_threshold;
        sessions_.emplace(id, st);
        return st;
    }

    // Caller holds state.mu.
    FlushResult flush_locked(SessionState& state) {
        auto& session = state.buffer.session;
        FlushResult result;
        result.session_id = session.id;
        if (session.messages.empty()) return result;
        const auto count = state.base + session.messages.size();
        result.extraction_id = extraction_id(session.id, count);
        if (auto done = store_.find_extraction(result.extraction_id)) {
            result = flush_result_from_json(*done);
            result.replayed = true;
            reset_buffer(state, count);
            return result;
        }
        const auto schema_ptr = schema();
        if (!schema_ptr) throw Error(ErrorCode::not_found, "no schema installed");
        const auto& schema = *schema_ptr;

        auto extracted = extract_one_pass(session, schema, store_, llm_, embedder_, cfg_.extraction);
        result.segments = extracted.segments.size();
        result.segmentation_prompt_tokens = extracted.segmentation_prompt_tokens;
        result.extraction_prompt_tokens = extracted.extraction_prompt_tokens;
        result.warnings = extracted.warnings;
        const EpochMs now = clock_();

        std::set<std::tuple<std::string, std::string, std::string>> patched_fields;
        if (cfg_.entity_patches)
            for (const auto& p : extracted.entity_patches) patched_fields.insert({p.entity_type, p.group_key, p.field});

        {
            Store::Batch batch(store_);
            std::vector<RoutingBinding> bindings;
            for (const auto& ev : extracted.events) {
                const auto* def = schema.find_event(ev.event_type);
                const bool known = store_.get_event(ev.id).has_value();
                store_.put_event(ev);
                store_.upsert_record(event_record(ev, def, embedder_));
                store_.keyword_update(ev.id, event_keywords(ev, def));
                result.event_ids.push_back(ev.id);
                if (known) continue;  // already materialized by an earlier flush
                for (auto& b : route_event(ev, schema)) {
                    // A patch from the same reply already covers this LLM_MERGE field.
                    if (b.op == OperatorKind::LLM_MERGE && patched_fields.count({b.entity_type, b.group_key, b.field})) continue;
                    bindings.push_back(std::move(b));
                }
            }
            result.materialized = materialize(bindings, store_, schema, now, &embedder_);
            if (cfg_.entity_patches) apply_entity_patches(extracted.entity_patches, schema, now, result);
            store_.mark_extraction(result.extraction_id, to_json(result));
        }
        if (result.materialized.queued > 0) worker_.notify();
        reset_buffer(state, count);
        return result;
    }

    void apply_entity_patches(const std::vector<EntityPatch>& patches, const MemorySchema& schema, EpochMs now,
                              FlushResult& result) {
        std::map<std::pair<std::string, std::string>, std::vector<FieldPatch>> grouped;
        for (const auto& p : patches) grouped[{p.entity_type, p.group_key}].push_back({p.field, p.patch});
        for (const auto& [key, fps] : grouped) {
            const auto* def = schema.find_entity(key.first);
            if (def == nullptr) continue;
            auto existing = store_.get_entity(key.first, key.second);
            const auto base = existing ? *existing : new_entity(*def, key.second, now);
            try {
                auto rep = apply_patches(base, fps, *def, now, cfg_.patch);
                for (auto& w : rep.warnings) result.warnings.push_back(base.id + "." + w);
                store_.put_entity(rep.entity);
                index_entity(store_, rep.entity, embedder_);
                result.patched_entities.push_back(rep.entity.id);
            } catch (const Error& e) {
                result.warnings.push_back(base.id + ": " + e.what());
            }
        }
    }

    void reset_buffer(SessionState& state, std::size_t count) {
        state.base = count;
        state.buffer.session.messages.clear();
        state.buffer.last_flush_at = clock_();
    }

    Store& store_;
    LlmProvider& llm_;
    const EmbeddingProvider& embedder_;
    EngineConfig cfg_;
    Clock clock_;

    std::mutex schema_mu_;
    std::shared_ptr<const MemorySchema> schema_;

    mutable std::mutex sessions_mu_;
    std::map<std::string, std::shared_ptr<SessionState>> sessions_;

    ConsolidationWorker worker_;
};

}  // namespace membase
