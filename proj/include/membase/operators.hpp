#pragma once

// Event -> entity materialization. Each AggregateExpression is a small
// parametric query, SELECT op(prop) FROM events WHERE filters GROUP BY keys,
// maintained incrementally. Statistical folds run inline; LLM_MERGE and
// TIME_COMPRESS go through the persisted consolidation queue.

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "membase/embedding.hpp"
#include "membase/error.hpp"
#include "membase/llm.hpp"
#include "membase/schema.hpp"
#include "membase/store.hpp"
#include "membase/text.hpp"
#include "membase/timeline.hpp"

namespace membase {

struct RoutingBinding {
    std::string entity_type;
    std::string group_key;
    std::string field;
    OperatorKind op = OperatorKind::COUNT;
    Value source_value;
    std::string event_id;
    EpochMs timestamp = 0;

    bool operator==(const RoutingBinding&) const = default;
};

namespace detail {

// Builtin keys resolve to event envelope fields, anything else to a property.
inline std::optional<Value> lookup_key(const EventInstance& ev, const std::string& key) {
    if (auto it = ev.properties.find(key); it != ev.properties.end()) return it->second;
    if (key == "user") return Value{ev.user};
    if (key == "topic") return Value{ev.topic.value_or("")};
    if (key == "session") return Value{ev.source_session};
    if (key == "event_type") return Value{ev.event_type};
    return std::nullopt;
}

inline bool values_equal(const Value& a, const Value& b) {
    const auto na = as_number(a), nb = as_number(b);
    if (is_numeric(a) && is_numeric(b) && na && nb) return *na == *nb;
    return render(a) == render(b);
}

inline bool passes_filters(const EventInstance& ev, const FilterSpec& f) {
    if (f.from && ev.timestamp < *f.from) return false;
    if (f.to && ev.timestamp >= *f.to) return false;
    for (const auto& [key, expect] : f.equals) {
        auto v = lookup_key(ev, key);
        if (!v || !values_equal(*v, expect)) return false;
    }
    return true;
}

}  // namespace detail

// Sorted "key=value" pairs joined by '|'.
inline std::string canonical_group_key(const EventInstance& ev, const std::vector<std::string>& keys) {
    std::vector<std::string> sorted(keys);
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    std::string out;
    for (const auto& k : sorted) {
        if (!out.empty()) out += "|";
        auto v = detail::lookup_key(ev, k);
        out += k + "=" + (v ? render(*v) : std::string());
    }
    return out;
}

inline std::vector<RoutingBinding> route_event(const EventInstance& ev, const MemorySchema& schema) {
    std::vector<RoutingBinding> out;
    for (const auto& ent : schema.entities) {
        for (const auto& prop : ent.properties) {
            const auto& agg = prop.aggregate;
            if (agg.source_event_type != ev.event_type) continue;
            if (!detail::passes_filters(ev, agg.filters)) continue;
            auto src = ev.properties.find(agg.source_property);
            if (src == ev.properties.end()) continue;
            out.push_back({ent.entity_type, canonical_group_key(ev, agg.group_by), prop.def.name, agg.op, src->second,
                           ev.id, ev.timestamp});
        }
    }
    return out;
}

namespace detail {

inline void store_number(EntityInstance& e, const std::string& field, double v, PropertyType type) {
    if (type == PropertyType::integer || type == PropertyType::timestamp) {
        e.properties[field] = static_cast<std::int64_t>(std::llround(v));
    } else {
        e.properties[field] = v;
    }
}

}  // namespace detail

// SUM adds, COUNT adds one, MAX keeps the maximum, AVG folds into the
// (sum, count) accumulator and stores the quotient.
inline EntityInstance apply_statistical(OperatorKind op, EntityInstance e, const std::string& field, double value,
                                        PropertyType type = PropertyType::number) {
    const auto cur_it = e.properties.find(field);
    const auto current = cur_it == e.properties.end() ? std::nullopt : as_number(cur_it->second);
    switch (op) {
        case OperatorKind::SUM:
            detail::store_number(e, field, current.value_or(0.0) + value, type);
            break;
        case OperatorKind::COUNT:
            detail::store_number(e, field, current.value_or(0.0) + 1.0, type);
            break;
        case OperatorKind::MAX:
            detail::store_number(e, field, current ? std::max(*current, value) : value, type);
            break;
        case OperatorKind::AVG: {
            auto& acc = e.accumulators[field];
            acc.sum += value;
            acc.count += 1;
            e.properties[field] = acc.sum / static_cast<double>(acc.count);
            break;
        }
        default:
            throw Error(ErrorCode::invalid_argument, std::string(to_string(op)) + " is not a statistical operator", field);
    }
    e.version += 1;
    return e;
}

inline EntityInstance apply_statistical(OperatorKind op, EntityInstance e, const std::string& field, const Value& value,
                                        PropertyType type = PropertyType::number) {
    if (op == OperatorKind::COUNT) return apply_statistical(op, std::move(e), field, 0.0, type);
    auto n = as_number(value);
    if (!is_numeric(value) || !n)
        throw Error(ErrorCode::type_mismatch, std::string(to_string(op)) + " needs a numeric value, got '" + render(value) + "'",
                    field);
    return apply_statistical(op, std::move(e), field, *n, type);
}

// ---------------------------------------------------------------------------
// LLM_MERGE

inline constexpr std::string_view kDefaultMergeTemplate =
    R"(### TASK: MEMORY MERGE
You maintain one field of a long-lived memory record. Fold the new items into the existing text.

Think step by step before answering:
1. List the facts in the existing text.
2. For each new item, decide whether it repeats a fact (drop it), refines a fact (rewrite that fact) or contradicts a fact (keep the newer item, which wins).
3. Write the merged text: concise, no duplicates, no commentary.

Example
Existing text: lives in Lyon; enjoys cycling
New items:
- moved to Paris last month
- enjoys cycling on weekends
Reasoning: "moved to Paris" contradicts "lives in Lyon" and is newer, so it wins. The cycling item refines the existing fact.
FINAL: lives in Paris; enjoys cycling on weekends

Now the real input.
Existing text: {existing}
New items:
{new_items}

Give your reasoning, then the merged text on a single line starting with "FINAL:". If you give no reasoning, reply with the merged text alone.
)";

inline std::string compile_merge_prompt(std::string_view old_text, const std::vector<std::string>& items,
                                        std::string_view tmpl = kDefaultMergeTemplate) {
    std::string list;
    for (const auto& it : items) list += "- " + it + "\n";
    if (!list.empty()) list.pop_back();
    auto out = text::replace_all(std::string(tmpl), "{new_items}", list);
    return text::replace_all(std::move(out), "{existing}", old_text.empty() ? "(empty)" : old_text);
}

// Text after the last "FINAL:" marker, or the whole reply when there is none.
inline std::string extract_final_answer(std::string_view reply) {
    const auto pos = reply.rfind("FINAL:");
    if (pos == std::string_view::npos) return std::string(text::trim(reply));
    return std::string(text::trim(reply.substr(pos + 6)));
}

// One provider call. Provider failures propagate; the caller keeps the old text.
inline std::string llm_merge(std::string_view old_text, const std::vector<std::string>& items, LlmProvider& llm,
                             std::string_view tmpl = kDefaultMergeTemplate) {
    const auto c = llm.complete(compile_merge_prompt(old_text, items, tmpl), {"merge"});
    return extract_final_answer(c.text);
}

// ---------------------------------------------------------------------------
// TIME_COMPRESS

inline constexpr std::string_view kDefaultCompressTemplate =
    R"(### TASK: TIMELINE SUMMARY
Summarize the events below from one topic timeline into a short paragraph that keeps every durable fact (names, numbers, decisions, outcomes) and drops chatter.

Topic: {topic}
Window: {window}
Events (oldest first):
{events}

Reply with the summary text only.
)";

// Windows are aligned to Monday 1970-01-05 00:00 UTC for every window length.
inline constexpr EpochMs kWindowOrigin = 4 * kDayMs;

inline EpochMs window_start(EpochMs ts, EpochMs window) {
    const EpochMs rel = ts - kWindowOrigin;
    EpochMs q = rel / window;
    if (rel % window != 0 && rel < 0) --q;
    return kWindowOrigin + q * window;
}

inline std::string format_date(EpochMs ms) {
    using namespace std::chrono;
    const auto day = floor<days>(sys_time<milliseconds>(milliseconds(ms)));
    const year_month_day ymd(day);
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u", static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                  static_cast<unsigned>(ymd.day()));
    return buf;
}

inline std::string window_label(EpochMs start, EpochMs window) {
    return format_date(start) + ".." + format_date(start + window - 1);
}

inline std::string compile_compress_prompt(const TopicTimeline& t, std::string_view label,
                                           const std::vector<const TimelineEntry*>& events,
                                           std::string_view tmpl = kDefaultCompressTemplate) {
    std::string list;
    for (const auto* e : events) list += "- [" + format_date(e->timestamp) + "] " + e->text + "\n";
    if (!list.empty()) list.pop_back();
    auto out = text::replace_all(std::string(tmpl), "{events}", list);
    out = text::replace_all(std::move(out), "{window}", label);
    return text::replace_all(std::move(out), "{topic}", t.topic);
}

struct TtlAssignment {
    std::string event_id;
    std::string summary_id;
    EpochMs ttl_deadline = 0;
};

struct CompressResult {
    TopicTimeline timeline;
    std::vector<WindowSummary> summaries;
    std::vector<TtlAssignment> ttls;

    bool changed() const { return !summaries.empty(); }
};

// Summarizes every closed window of an inactive timeline. All provider calls
// happen before anything is committed, so a failure leaves the input intact.
inline CompressResult time_compress_tick(const TopicTimeline& t, EpochMs now, const CompressionConfig& cfg, LlmProvider& llm,
                                         std::string_view tmpl = kDefaultCompressTemplate) {
    if (!cfg.valid()) throw Error(ErrorCode::invalid_argument, "compression durations must be positive");
    CompressResult out{t, {}, {}};
    if (t.events.empty() || now - t.last_active <= cfg.inactivity_threshold) return out;

    const EpochMs current = window_start(now, cfg.window);
    std::map<EpochMs, std::vector<const TimelineEntry*>> groups;
    for (const auto& e : t.events) {
        if (e.summary_id || e.timestamp >= current) continue;
        groups[window_start(e.timestamp, cfg.window)].push_back(&e);
    }
    for (const auto& [start, events] : groups) {
        const auto label = window_label(start, cfg.window);
        const auto reply = llm.complete(compile_compress_prompt(t, label, events, tmpl), {"compress"});
        WindowSummary s;
        s.window_label = label;
        s.window_start = start;
        s.text = std::string(text::trim(reply.text));
        s.created_at = now;
        std::string seed = t.key + "|" + std::to_string(start);
        for (const auto* e : events) {
            s.event_ids.push_back(e->event_id);
            seed += "|" + e->event_id;
        }
        s.id = "sum-" + text::hex64(text::fnv1a(seed));
        out.summaries.push_back(std::move(s));
    }
    const EpochMs ttl = now + cfg.ttl_after_summary;
    for (const auto& s : out.summaries) {
        for (const auto& id : s.event_ids) {
            auto it = std::find_if(out.timeline.events.begin(), out.timeline.events.end(),
                                   [&](const TimelineEntry& e) { return e.event_id == id; });
            it->summary_id = s.id;
            if (!it->reinforced) {
                it->ttl_deadline = ttl;
                out.ttls.push_back({id, s.id, ttl});
            }
        }
        out.timeline.summaries.push_back(s);
    }
    return out;
}

// A recall touched `event_id`: its pending TTL is cleared and the timeline
// counts as active again.
inline TopicTimeline reinforce(TopicTimeline t, const std::string& event_id, EpochMs now) {
    auto it = std::find_if(t.events.begin(), t.events.end(), [&](const TimelineEntry& e) { return e.event_id == event_id; });
    if (it == t.events.end()) throw Error(ErrorCode::not_found, "event not in timeline", event_id);
    if (it->ttl_deadline) {
        it->ttl_deadline.reset();
        it->reinforced = true;
    }
    t.last_active = std::max(t.last_active, now);
    return t;
}

inline std::string timeline_key(const std::string& entity_type, const std::string& group_key, const std::string& field) {
    return entity_type + "|" + group_key + "|" + field;
}

// Field value for a TIME_COMPRESS property: window summaries, then the
// events that are not summarized yet.
inline std::string timeline_digest(const TopicTimeline& t) {
    std::string out;
    auto line = [&](const std::string& s) {
        if (!out.empty()) out += "\n";
        out += s;
    };
    for (const auto& s : t.summaries) line("[" + s.window_label + "] " + s.text);
    for (const auto& e : t.events)
        if (!e.summary_id) line("[" + format_date(e.timestamp) + "] " + e.text);
    return out;
}

// Inserts entries keeping timestamp order; an event id already present is skipped.
inline void timeline_append(TopicTimeline& t, const std::vector<TimelineEntry>& entries) {
    for (const auto& e : entries) {
        if (t.find(e.event_id) != nullptr) continue;
        auto pos = std::upper_bound(t.events.begin(), t.events.end(), e, [](const TimelineEntry& a, const TimelineEntry& b) {
            return a.timestamp < b.timestamp || (a.timestamp == b.timestamp && a.event_id < b.event_id);
        });
        t.events.insert(pos, e);
        t.last_active = std::max(t.last_active, e.timestamp);
    }
}

// ---------------------------------------------------------------------------
// Materialization

// Mirrors an entity into a searchable record so it can be found as an update
// candidate and by recall.
inline void index_entity(Store& store, const EntityInstance& e, const EmbeddingProvider& embedder) {
    RecordMetadata meta;
    meta.type = e.entity_type;
    meta.timestamp = e.updated_at;
    meta.topic = e.group_key;
    const auto pos = e.group_key.find("user=");
    if (pos != std::string::npos) {
        const auto end = e.group_key.find('|', pos);
        meta.user = e.group_key.substr(pos + 5, end == std::string::npos ? std::string::npos : end - pos - 5);
    }
    store.upsert_record(make_record(e.id, RecordKind::entity, entity_text(e), std::move(meta), embedder));
}

inline EntityInstance new_entity(const EntityTypeDef& def, const std::string& group_key, EpochMs now) {
    EntityInstance e;
    e.id = entity_id(def.entity_type, group_key);
    e.entity_type = def.entity_type;
    e.group_key = group_key;
    e.updated_at = now;
    for (const auto& p : def.properties) {
        switch (p.aggregate.op) {
            case OperatorKind::SUM:
            case OperatorKind::COUNT: detail::store_number(e, p.def.name, 0.0, p.def.type); break;
            case OperatorKind::LLM_MERGE:
            case OperatorKind::TIME_COMPRESS: e.properties[p.def.name] = std::string(); break;
            default: break;  // MAX and AVG stay absent until the first value
        }
    }
    return e;
}

struct MaterializeReport {
    std::vector<std::string> created;
    std::vector<std::string> updated;
    std::size_t queued = 0;
    std::vector<std::string> errors;
};

inline Json to_json(const MaterializeReport& r) {
    return {{"created", r.created}, {"updated", r.updated}, {"queued", r.queued}, {"errors", r.errors}};
}

// Groups bindings per entity, applies statistical folds in (timestamp, event)
// order and enqueues one consolidation entry per LLM-backed field.
inline MaterializeReport materialize(const std::vector<RoutingBinding>& bindings, Store& store, const MemorySchema& schema,
                                     EpochMs now, const EmbeddingProvider* embedder = nullptr) {
    MaterializeReport report;
    std::map<std::pair<std::string, std::string>, std::vector<const RoutingBinding*>> groups;
    for (const auto& b : bindings) groups[{b.entity_type, b.group_key}].push_back(&b);

    for (auto& [key, list] : groups) {
        const auto* def = schema.find_entity(key.first);
        if (def == nullptr) {
            report.errors.push_back("unknown entity type '" + key.first + "'");
            continue;
        }
        std::stable_sort(list.begin(), list.end(), [](const RoutingBinding* a, const RoutingBinding* b) {
            return a->timestamp < b->timestamp || (a->timestamp == b->timestamp && a->event_id < b->event_id);
        });
        auto existing = store.get_entity(key.first, key.second);
        const bool created = !existing;
        EntityInstance e = existing ? *existing : new_entity(*def, key.second, now);
        const auto before = e;

        std::map<std::string, QueueEntry> pending;
        for (const auto* b : list) {
            const auto* prop = def->find(b->field);
            if (prop == nullptr) {
                report.errors.push_back("unknown field '" + b->field + "' on " + def->entity_type);
                continue;
            }
            if (is_statistical(b->op)) {
                try {
                    e = apply_statistical(b->op, e, b->field, b->source_value, prop->def.type);  // copy: a throw must leave e intact
                } catch (const Error& err) {
                    report.errors.push_back(b->event_id + ": " + err.what());
                }
                continue;
            }
            auto& q = pending[b->field];
            q.kind = b->op == OperatorKind::LLM_MERGE ? QueueKind::llm_merge : QueueKind::time_compress;
            q.entity_type = b->entity_type;
            q.group_key = b->group_key;
            q.field = b->field;
            q.items.push_back(render(b->source_value));
            q.event_ids.push_back(b->event_id);
            q.timestamps.push_back(b->timestamp);
        }
        if (created || !(e == before)) {
            e.updated_at = now;
            store.put_entity(e);
            if (embedder != nullptr) index_entity(store, e, *embedder);
            (created ? report.created : report.updated).push_back(e.id);
        }
        for (auto& [_, q] : pending) {
            store.queue_push(std::move(q));
            ++report.queued;
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Consolidation queue consumer

struct ConsolidationOptions {
    int max_attempts = 5;
    std::string merge_template{kDefaultMergeTemplate};
    std::chrono::milliseconds poll_interval{200};
};

struct DrainReport {
    std::size_t processed = 0;
    std::size_t failed = 0;
};

// Single consumer of the consolidation queue. drain() runs synchronously;
// start() runs it on a background thread until stop().
class ConsolidationWorker {
public:
    using Clock = std::function<EpochMs()>;

    ConsolidationWorker(Store& store, LlmProvider& llm, std::function<std::shared_ptr<const MemorySchema>()> schema,
                        const EmbeddingProvider* embedder, Clock clock, ConsolidationOptions opts = {})
        : store_(store),
          llm_(llm),
          schema_(std::move(schema)),
          embedder_(embedder),
          clock_(std::move(clock)),
          opts_(std::move(opts)) {}

    ~ConsolidationWorker() { stop(); }

    ConsolidationWorker(const ConsolidationWorker&) = delete;
    ConsolidationWorker& operator=(const ConsolidationWorker&) = delete;

    DrainReport drain() {
        std::lock_guard lock(drain_mu_);
        DrainReport r;
        for (auto entry : store_.queue()) {
            if (entry.attempts >= opts_.max_attempts) continue;
            try {
                process(entry);
                store_.queue_pop(entry.id);
                ++r.processed;
            } catch (const Error& e) {
                entry.attempts += 1;
                entry.last_error = e.what();
                store_.queue_update(entry);
                ++r.failed;
            }
        }
        return r;
    }

    void start() {
        std::lock_guard lock(mu_);
        if (thread_.joinable()) return;
        stopping_ = false;
        thread_ = std::thread([this] { loop(); });
    }

    void stop() {
        {
            std::lock_guard lock(mu_);
            stopping_ = true;
        }
        cv_.notify_all();
        if (thread_.joinable()) thread_.join();
    }

    void notify() { cv_.notify_all(); }

private:
    void loop() {
        std::unique_lock lock(mu_);
        while (!stopping_) {
            lock.unlock();
            try {
                drain();
            } catch (const std::exception&) {
                // store failures surface again on the next request path
            }
            lock.lock();
            cv_.wait_for(lock, opts_.poll_interval, [this] { return stopping_; });
        }
    }

    void process(const QueueEntry& q) {
        const auto schema = schema_();
        if (!schema) throw Error(ErrorCode::not_found, "no schema installed");
        const auto* def = schema->find_entity(q.entity_type);
        if (def == nullptr) throw Error(ErrorCode::not_found, "unknown entity type", q.entity_type);
        const EpochMs now = clock_();
        auto existing = store_.get_entity(q.entity_type, q.group_key);
        EntityInstance e = existing ? *existing : new_entity(*def, q.group_key, now);

        if (q.kind == QueueKind::llm_merge) {
            std::string old;
            if (auto it = e.properties.find(q.field); it != e.properties.end()) old = render(it->second);
            e.properties[q.field] = llm_merge(old, q.items, llm_, opts_.merge_template);
        } else {
            const auto key = timeline_key(q.entity_type, q.group_key, q.field);
            auto t = store_.get_timeline(key).value_or(TopicTimeline{key, q.group_key, {}, 0, {}});
            std::vector<TimelineEntry> entries;
            for (std::size_t i = 0; i < q.items.size(); ++i)
                entries.push_back({q.event_ids.at(i), q.timestamps.at(i), q.items[i], std::nullopt, std::nullopt, false});
            timeline_append(t, entries);
            store_.put_timeline(t);
            e.properties[q.field] = timeline_digest(t);
        }
        e.version += 1;
        e.updated_at = now;
        store_.put_entity(e);
        if (embedder_ != nullptr) index_entity(store_, e, *embedder_);
    }

    Store& store_;
    LlmProvider& llm_;
    std::function<std::shared_ptr<const MemorySchema>()> schema_;
    const EmbeddingProvider* embedder_;
    Clock clock_;
    ConsolidationOptions opts_;

    std::mutex drain_mu_;
    std::mutex mu_;
    std::condition_variable cv_;
    bool stopping_ = false;
    std::thread thread_;
};

struct CompressReport {
    std::size_t timelines = 0;
    std::size_t summaries = 0;
    std::size_t ttl_assigned = 0;
    std::vector<std::string> errors;
};

inline Json to_json(const CompressReport& r) {
    return {{"timelines", r.timelines}, {"summaries", r.summaries}, {"ttl_assigned", r.ttl_assigned}, {"errors", r.errors}};
}

// Runs time_compress_tick over every stored timeline and commits the results:
// summary records, TTLs on the covered event records, refreshed entity fields.
inline CompressReport compress_timelines(Store& store, LlmProvider& llm, EpochMs now, const CompressionConfig& cfg,
                                         const EmbeddingProvider& embedder,
                                         std::string_view tmpl = kDefaultCompressTemplate) {
    CompressReport report;
    for (const auto& t : store.timelines()) {
        ++report.timelines;
        CompressResult res;
        try {
            res = time_compress_tick(t, now, cfg, llm, tmpl);
        } catch (const Error& e) {
            report.errors.push_back(t.key + ": " + e.what());
            continue;
        }
        if (!res.changed()) continue;
        const auto first_bar = t.key.find('|');
        const auto entity_type = t.key.substr(0, first_bar);
        for (const auto& s : res.summaries) {
            RecordMetadata meta;
            meta.type = entity_type;
            meta.timestamp = s.created_at;
            meta.topic = t.topic;
            if (!s.event_ids.empty())
                if (auto r = store.get_record(s.event_ids.front())) meta.user = r->metadata.user;
            store.upsert_record(make_record(s.id, RecordKind::summary, s.text, std::move(meta), embedder));
            ++report.summaries;
        }
        store.put_timeline(res.timeline);
        for (const auto& a : res.ttls) {
            if (store.get_record(a.event_id)) store.set_summary(a.event_id, a.summary_id, a.ttl_deadline);
            ++report.ttl_assigned;
        }
        const auto last_bar = t.key.rfind('|');
        if (first_bar != std::string::npos && last_bar > first_bar) {
            const auto group_key = t.key.substr(first_bar + 1, last_bar - first_bar - 1);
            const auto field = t.key.substr(last_bar + 1);
            if (auto e = store.get_entity(entity_type, group_key)) {
                e->properties[field] = timeline_digest(res.timeline);
                e->version += 1;
                e->updated_at = now;
                store.put_entity(*e);
                index_entity(store, *e, embedder);
            }
        }
    }
    return report;
}

// Reinforces every timeline entry and stored record for a recalled event.
inline void reinforce_event(Store& store, const std::string& event_id, EpochMs now) {
    if (auto r = store.get_record(event_id); r && r->kind == RecordKind::event && r->summary_id) store.reinforce(event_id);
    for (const auto& t : store.timelines()) {
        if (t.find(event_id) == nullptr) continue;
        store.put_timeline(reinforce(t, event_id, now));
    }
}

}  // namespace membase
