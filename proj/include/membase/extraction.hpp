#pragma once

// Session buffering and one-pass extraction: every configured memory type is
// extracted from the segmented session with a single completion call whose
// reply carries both new events and SEARCH/REPLACE patches for entities.

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "membase/embedding.hpp"
#include "membase/error.hpp"
#include "membase/eua.hpp"
#include "membase/llm.hpp"
#include "membase/schema.hpp"
#include "membase/segmentation.hpp"
#include "membase/store.hpp"
#include "membase/text.hpp"

namespace membase {

// ---------------------------------------------------------------------------
// Session buffer

struct SessionBuffer {
    Session session;
    std::size_t flush_threshold = 20;
    EpochMs last_flush_at = 0;
    EpochMs last_append_at = 0;
};

enum class AppendStatus { buffered, flush_triggered };

inline const char* to_string(AppendStatus s) { return s == AppendStatus::buffered ? "buffered" : "flushed"; }

inline AppendStatus buffer_append(SessionBuffer& buf, Message msg) {
    const auto expected = buf.session.messages.size();
    if (msg.index != expected)
        throw Error(ErrorCode::index_gap,
                    "message index " + std::to_string(msg.index) + " but buffer holds " + std::to_string(expected),
                    buf.session.id);
    buf.last_append_at = std::max(buf.last_append_at, msg.timestamp);
    buf.session.messages.push_back(std::move(msg));
    return buf.session.messages.size() >= buf.flush_threshold ? AppendStatus::flush_triggered : AppendStatus::buffered;
}

// True when a non-empty buffer has seen no message for `idle_timeout`.
inline bool buffer_idle(const SessionBuffer& buf, EpochMs now, EpochMs idle_timeout) {
    return !buf.session.messages.empty() && now - buf.last_append_at >= idle_timeout;
}

// ---------------------------------------------------------------------------
// Prompt compilation

inline constexpr std::string_view kNoExistingEntities = "(no existing entities)";

inline constexpr std::string_view kDefaultExtractionTemplate =
    R"(### TASK: ONE-PASS MEMORY EXTRACTION
Read the conversation segments and extract every memory type defined below in a single answer.
Only record information that is stated in the segments. Do not invent values.

## MEMORY DEFINITIONS
{definitions}

## OUTPUT FORMAT
{output_format}

## SEGMENTS
{segments}

## EXISTING ENTITIES
{existing_entities}
)";

inline constexpr std::string_view kExtractionOutputFormat =
    R"(Reply with one JSON object and nothing else:
{"events": [{"event_type": "<event type>", "topic": "<segment topic>", "properties": {"<property>": <value>, ...}}],
 "entity_updates": [{"entity_type": "<entity type>", "group_key": "<key>=<value>", "field": "<text property>", "patch": "<patch block>"}]}
- Every event lists all properties of its type with values of the declared types.
- group_key is the sorted key=value pairs of the entity's group-by keys, joined by "|".
- Entity text fields change only through patch blocks of exactly this form, one per update:
<<<< SEARCH
exact text currently in the field (leave empty to fill an empty field)
====
replacement text
>>>> REPLACE
- Use {"events": [], "entity_updates": []} when nothing qualifies.)";

inline std::string render_definitions(const MemorySchema& schema) {
    std::string out;
    auto line = [&](const std::string& s) {
        out += s;
        out += "\n";
    };
    for (const auto& ev : schema.events) {
        line("Event type: " + ev.event_type);
        line("  description: " + ev.description);
        line("  properties:");
        for (const auto& p : ev.properties)
            line("  - " + p.name + " (" + to_string(p.type) + "): " + p.description);
    }
    for (const auto& ent : schema.entities) {
        line("Entity type: " + ent.entity_type);
        line("  description: " + ent.description);
        line("  properties:");
        for (const auto& p : ent.properties) {
            std::string keys;
            for (const auto& k : p.aggregate.group_by) keys += (keys.empty() ? "" : ", ") + k;
            line("  - " + p.def.name + " (" + to_string(p.def.type) + ", " + to_string(p.aggregate.op) +
                 " of source property: " + p.aggregate.source_property + ", grouped by: " + keys + "): " + p.def.description);
        }
    }
    if (!out.empty()) out.pop_back();
    return out;
}

inline std::string render_segments(const std::vector<Segment>& segments) {
    std::string out;
    for (std::size_t i = 0; i < segments.size(); ++i) {
        if (i > 0) out += "\n\n";
        out += "### Segment " + std::to_string(i + 1) + " (topic: " + segments[i].topic + ")\n" + segments[i].text;
    }
    return out;
}

inline std::string render_candidates(const std::vector<EntityInstance>& candidates) {
    if (candidates.empty()) return std::string(kNoExistingEntities);
    std::string out;
    for (const auto& e : candidates) {
        if (!out.empty()) out += "\n\n";
        out += "- entity_type: " + e.entity_type + ", group_key: " + e.group_key;
        for (const auto& [k, v] : e.properties) out += "\n  " + k + ": " + render(v);
    }
    return out;
}

// Layout: instructions, definitions, output format, segments, existing
// entities. Everything before the segments depends on the schema alone, so a
// provider-side prefix cache can reuse it across sessions.
inline std::string compile_one_pass_prompt(const MemorySchema& schema, const std::vector<Segment>& segments,
                                           const std::vector<EntityInstance>& candidates,
                                           std::string_view tmpl = kDefaultExtractionTemplate) {
    std::string out(tmpl);
    // Filled in layout order so text inside a segment is never re-expanded.
    out = text::replace_all(std::move(out), "{definitions}", render_definitions(schema));
    out = text::replace_all(std::move(out), "{output_format}", kExtractionOutputFormat);
    const auto seg_pos = out.find("{segments}");
    const auto ent_pos = out.find("{existing_entities}");
    if (seg_pos == std::string::npos || ent_pos == std::string::npos || ent_pos < seg_pos)
        throw Error(ErrorCode::invalid_argument, "extraction template needs {segments} before {existing_entities}");
    std::string tail = out.substr(seg_pos + 10);
    tail = text::replace_all(std::move(tail), "{existing_entities}", render_candidates(candidates));
    return out.substr(0, seg_pos) + render_segments(segments) + tail;
}

// ---------------------------------------------------------------------------
// Reply parsing

struct EntityPatch {
    std::string entity_type;
    std::string group_key;
    std::string field;
    Patch patch;

    bool operator==(const EntityPatch&) const = default;
};

struct ExtractionResult {
    std::vector<EventInstance> events;
    std::vector<EntityPatch> entity_patches;
    std::string raw_reply;
    std::vector<std::string> warnings;
    std::vector<Segment> segments;
    std::size_t segmentation_prompt_tokens = 0;
    std::size_t extraction_prompt_tokens = 0;
    std::size_t extraction_calls = 0;
};

// Where the extracted events came from.
struct ExtractionContext {
    std::string session_id;
    std::string user;
    std::int64_t schema_version = 0;
    std::map<std::string, EpochMs> topic_times;  // latest message time per segment topic
};

inline void assign_event_id(EventInstance& ev) {
    ev.id = "ev-" + text::hex64(text::fnv1a(ev.user + "|" + ev.source_session + "|" + ev.event_type + "|" +
                                            std::to_string(ev.timestamp) + "|" + properties_json_dump(ev.properties)));
}

// Item-level problems are skipped with a warning; only a reply that is not an
// object at all fails the whole extraction.
inline ExtractionResult parse_extraction_reply(const std::string& reply, const MemorySchema& schema, EpochMs ts,
                                               const ExtractionContext& ctx = {}) {
    ExtractionResult out;
    out.raw_reply = reply;
    Json j;
    try {
        j = Json::parse(repair_structured_reply(reply));
    } catch (const Json::parse_error& e) {
        throw Error(ErrorCode::extraction_failed, std::string("unparseable extraction reply: ") + e.what(), "$", reply);
    }
    if (!j.is_object()) throw Error(ErrorCode::extraction_failed, "extraction reply must be an object", "$", reply);

    auto array_at = [&](const char* key) -> const Json* {
        auto it = j.find(key);
        if (it == j.end()) return nullptr;
        if (!it->is_array()) throw Error(ErrorCode::extraction_failed, std::string("'") + key + "' must be an array", "$", reply);
        return &*it;
    };

    if (const auto* events = array_at("events")) {
        for (std::size_t i = 0; i < events->size(); ++i) {
            const auto& item = (*events)[i];
            const auto where = "events[" + std::to_string(i) + "]";
            if (!item.is_object() || !item.contains("event_type") || !item.at("event_type").is_string()) {
                out.warnings.push_back(where + ": missing event_type");
                continue;
            }
            const auto type = item.at("event_type").get<std::string>();
            const auto* def = schema.find_event(type);
            if (def == nullptr) {
                out.warnings.push_back(where + ": unknown event type '" + type + "'");
                continue;
            }
            std::optional<std::string> topic;
            if (auto t = item.find("topic"); t != item.end() && t->is_string()) topic = t->get<std::string>();
            EpochMs when = ts;
            if (topic) {
                if (auto it = ctx.topic_times.find(*topic); it != ctx.topic_times.end()) when = it->second;
            }
            try {
                auto ev = conform_event(item.value("properties", Json::object()), *def, when, &out.warnings);
                ev.topic = topic;
                ev.user = ctx.user;
                ev.source_session = ctx.session_id;
                ev.schema_version = ctx.schema_version;
                assign_event_id(ev);
                out.events.push_back(std::move(ev));
            } catch (const Error& e) {
                out.warnings.push_back(where + ": " + e.what());
            }
        }
    }

    if (const auto* updates = array_at("entity_updates")) {
        for (std::size_t i = 0; i < updates->size(); ++i) {
            const auto& item = (*updates)[i];
            const auto where = "entity_updates[" + std::to_string(i) + "]";
            auto str = [&](const char* key) -> std::optional<std::string> {
                if (!item.is_object()) return std::nullopt;
                auto it = item.find(key);
                if (it == item.end() || !it->is_string()) return std::nullopt;
                return it->get<std::string>();
            };
            const auto type = str("entity_type"), key = str("group_key"), field = str("field"), patch = str("patch");
            if (!type || !key || !field || !patch) {
                out.warnings.push_back(where + ": needs entity_type, group_key, field and patch strings");
                continue;
            }
            const auto* def = schema.find_entity(*type);
            if (def == nullptr) {
                out.warnings.push_back(where + ": unknown entity type '" + *type + "'");
                continue;
            }
            const auto* prop = def->find(*field);
            if (prop == nullptr || prop->def.type != PropertyType::string) {
                out.warnings.push_back(where + ": '" + *field + "' is not a text field of " + *type);
                continue;
            }
            try {
                out.entity_patches.push_back({*type, *key, *field, parse_patch(*patch)});
            } catch (const Error& e) {
                out.warnings.push_back(where + ": " + e.what());
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Deduplication

inline constexpr std::string_view kDefaultDedupTemplate =
    R"(### TASK: MEMORY DEDUPLICATION
The two records below describe the same {event_type} event. Merge them into one record that keeps every distinct detail and, where they conflict, the more specific value.

Record A: {first}
Record B: {second}

Reply with the merged properties as one JSON object and nothing else.
)";

struct DedupOptions {
    double threshold = 0.9;  // cosine on rendered event text, strictly above merges
    std::string prompt_template{kDefaultDedupTemplate};
};

namespace detail {

inline EventInstance resolve_duplicate(const EventInstance& a, const EventInstance& b, const EventTypeDef* def,
                                       LlmProvider* llm, const DedupOptions& opts) {
    if (llm != nullptr && def != nullptr && a.event_type == b.event_type) {
        auto prompt = text::replace_all(opts.prompt_template, "{event_type}", a.event_type);
        prompt = text::replace_all(std::move(prompt), "{first}", properties_json_dump(a.properties));
        prompt = text::replace_all(std::move(prompt), "{second}", properties_json_dump(b.properties));
        try {
            const auto reply = llm->complete(prompt, {"dedup"});
            auto merged = conform_event(Json::parse(repair_structured_reply(reply.text)), *def, std::max(a.timestamp, b.timestamp));
            merged.user = a.user;
            merged.source_session = a.source_session;
            merged.topic = a.topic;
            merged.schema_version = a.schema_version;
            assign_event_id(merged);
            return merged;
        } catch (const std::exception&) {
            // fall back to the offline rule
        }
    }
    return event_text(b, def).size() > event_text(a, def).size() ? b : a;
}

}  // namespace detail

// Merges pairs whose rendered texts are more similar than the threshold until
// no such pair remains. The survivor takes the earlier position.
inline std::vector<EventInstance> deduplicate_events(std::vector<EventInstance> events, const EmbeddingProvider& embedder,
                                                     const MemorySchema* schema = nullptr, LlmProvider* llm = nullptr,
                                                     const DedupOptions& opts = {}) {
    auto def_of = [&](const EventInstance& e) { return schema ? schema->find_event(e.event_type) : nullptr; };
    std::vector<Vector> vecs;
    for (const auto& e : events) vecs.push_back(embedder.embed_dense(event_text(e, def_of(e))));
    bool changed = true;
    while (changed) {
        changed = false;
        for (std::size_t i = 0; i < events.size() && !changed; ++i) {
            for (std::size_t k = i + 1; k < events.size(); ++k) {
                if (dot(vecs[i], vecs[k]) <= opts.threshold) continue;
                events[i] = detail::resolve_duplicate(events[i], events[k], def_of(events[i]), llm, opts);
                vecs[i] = embedder.embed_dense(event_text(events[i], def_of(events[i])));
                events.erase(events.begin() + static_cast<std::ptrdiff_t>(k));
                vecs.erase(vecs.begin() + static_cast<std::ptrdiff_t>(k));
                changed = true;
                break;
            }
        }
    }
    return events;
}

// ---------------------------------------------------------------------------
// Pipeline

struct ExtractionOptions {
    SegmentationOptions segmentation;
    std::string prompt_template{kDefaultExtractionTemplate};
    std::size_t candidate_cap = 5;
    bool deduplicate = true;
    bool llm_dedup = false;
    DedupOptions dedup;
};

inline std::map<std::string, EpochMs> topic_times(const Session& session, const SegmentPlan& plan) {
    std::map<std::string, EpochMs> out;
    for (const auto& t : plan.topics) {
        EpochMs latest = 0;
        for (const auto& sp : t.spans)
            for (std::size_t i = sp.start; i <= sp.end && i < session.messages.size(); ++i)
                latest = std::max(latest, session.messages[i].timestamp);
        if (latest > 0) out[t.label] = latest;
    }
    return out;
}

// Entities most similar to the segment text, at most `cap`.
inline std::vector<EntityInstance> candidate_entities(const std::vector<Segment>& segments, const Store& store,
                                                      const EmbeddingProvider& embedder, std::size_t cap) {
    std::string query;
    for (const auto& s : segments) query += s.text + "\n";
    SearchFilter filter;
    filter.kind = RecordKind::entity;
    std::vector<EntityInstance> out;
    for (const auto& hit : store.dense_search(embedder.embed_dense(query), cap, filter)) {
        if (auto e = store.get_entity(hit.id)) out.push_back(std::move(*e));
    }
    return out;
}

// Segmentation call, then exactly one extraction call (none when nothing is
// salient), then parsing and deduplication.
inline ExtractionResult extract_one_pass(const Session& session, const MemorySchema& schema, const Store& store,
                                         LlmProvider& llm, const EmbeddingProvider& embedder,
                                         const ExtractionOptions& opts = {}) {
    const auto* recorder = dynamic_cast<RecordingProvider*>(&llm);
    const std::size_t seg_tokens_before = recorder ? recorder->meter().prompt_tokens() : 0;
    const auto plan = plan_segments(session, llm, opts.segmentation);
    const std::size_t seg_tokens = recorder ? recorder->meter().prompt_tokens() - seg_tokens_before : 0;
    auto segments = apply_segment_plan(session, plan);
    if (segments.empty()) {
        ExtractionResult empty;
        empty.segmentation_prompt_tokens = seg_tokens;
        return empty;
    }
    const auto candidates = candidate_entities(segments, store, embedder, opts.candidate_cap);
    const auto prompt = compile_one_pass_prompt(schema, segments, candidates, opts.prompt_template);
    const auto reply = llm.complete(prompt, {"extraction"});

    EpochMs fallback = 0;
    for (const auto& m : session.messages) fallback = std::max(fallback, m.timestamp);
    ExtractionContext ctx{session.id, session.user, schema.version, topic_times(session, plan)};
    auto result = parse_extraction_reply(reply.text, schema, fallback, ctx);
    if (opts.deduplicate)
        result.events = deduplicate_events(std::move(result.events), embedder, &schema, opts.llm_dedup ? &llm : nullptr, opts.dedup);
    result.segments = std::move(segments);
    result.segmentation_prompt_tokens = seg_tokens;
    result.extraction_prompt_tokens = reply.usage.prompt_tokens;
    result.extraction_calls = 1;
    return result;
}

}  // namespace membase
