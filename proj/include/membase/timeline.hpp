#pragma once

// Topic timelines and consolidation-queue entries. These are owned by the
// operators but persisted by the store, so they live in their own header.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "membase/value.hpp"

namespace membase {

struct TimelineEntry {
    std::string event_id;
    EpochMs timestamp = 0;
    std::string text;
    std::optional<EpochMs> ttl_deadline;
    std::optional<std::string> summary_id;
    bool reinforced = false;

    bool operator==(const TimelineEntry&) const = default;
};

struct WindowSummary {
    std::string id;
    std::string window_label;
    EpochMs window_start = 0;
    std::string text;
    EpochMs created_at = 0;
    std::vector<std::string> event_ids;

    bool operator==(const WindowSummary&) const = default;
};

struct TopicTimeline {
    std::string key;    // entity_type|group_key|field
    std::string topic;  // human label, the group key
    std::vector<TimelineEntry> events;  // sorted by timestamp
    EpochMs last_active = 0;
    std::vector<WindowSummary> summaries;

    const TimelineEntry* find(std::string_view event_id) const {
        for (const auto& e : events)
            if (e.event_id == event_id) return &e;
        return nullptr;
    }

    bool operator==(const TopicTimeline&) const = default;
};

struct CompressionConfig {
    EpochMs window = kWeekMs;
    EpochMs inactivity_threshold = kWeekMs;   // default: one window
    EpochMs ttl_after_summary = 4 * kWeekMs;  // default: four windows

    bool valid() const { return window > 0 && inactivity_threshold > 0 && ttl_after_summary > 0; }
};

enum class QueueKind { llm_merge, time_compress };

// Deferred LLM-side work produced by materialization.
struct QueueEntry {
    std::uint64_t id = 0;
    QueueKind kind = QueueKind::llm_merge;
    std::string entity_type;
    std::string group_key;
    std::string field;
    std::vector<std::string> items;
    std::vector<std::string> event_ids;
    std::vector<EpochMs> timestamps;
    int attempts = 0;
    std::string last_error;

    bool operator==(const QueueEntry&) const = default;
};

inline Json to_json(const TopicTimeline& t) {
    Json events = Json::array();
    for (const auto& e : t.events) {
        Json j{{"event_id", e.event_id}, {"timestamp", e.timestamp}, {"text", e.text}, {"reinforced", e.reinforced}};
        if (e.ttl_deadline) j["ttl_deadline"] = *e.ttl_deadline;
        if (e.summary_id) j["summary_id"] = *e.summary_id;
        events.push_back(std::move(j));
    }
    Json summaries = Json::array();
    for (const auto& s : t.summaries) {
        summaries.push_back({{"id", s.id},
                             {"window_label", s.window_label},
                             {"window_start", s.window_start},
                             {"text", s.text},
                             {"created_at", s.created_at},
                             {"event_ids", s.event_ids}});
    }
    return {{"key", t.key}, {"topic", t.topic}, {"events", events}, {"last_active", t.last_active}, {"summaries", summaries}};
}

inline TopicTimeline timeline_from_json(const Json& j) {
    TopicTimeline t;
    t.key = j.at("key").get<std::string>();
    t.topic = j.at("topic").get<std::string>();
    t.last_active = j.at("last_active").get<EpochMs>();
    for (const auto& e : j.at("events")) {
        TimelineEntry te;
        te.event_id = e.at("event_id").get<std::string>();
        te.timestamp = e.at("timestamp").get<EpochMs>();
        te.text = e.at("text").get<std::string>();
        te.reinforced = e.value("reinforced", false);
        if (e.contains("ttl_deadline")) te.ttl_deadline = e.at("ttl_deadline").get<EpochMs>();
        if (e.contains("summary_id")) te.summary_id = e.at("summary_id").get<std::string>();
        t.events.push_back(std::move(te));
    }
    for (const auto& s : j.at("summaries")) {
        t.summaries.push_back({s.at("id").get<std::string>(), s.at("window_label").get<std::string>(),
                               s.at("window_start").get<EpochMs>(), s.at("text").get<std::string>(),
                               s.at("created_at").get<EpochMs>(), s.at("event_ids").get<std::vector<std::string>>()});
    }
    return t;
}

inline Json to_json(const QueueEntry& q) {
    return {{"id", q.id},
            {"kind", q.kind == QueueKind::llm_merge ? "llm_merge" : "time_compress"},
            {"entity_type", q.entity_type},
            {"group_key", q.group_key},
            {"field", q.field},
            {"items", q.items},
            {"event_ids", q.event_ids},
            {"timestamps", q.timestamps},
            {"attempts", q.attempts},
            {"last_error", q.last_error}};
}

inline QueueEntry queue_entry_from_json(const Json& j) {
    QueueEntry q;
    q.id = j.at("id").get<std::uint64_t>();
    q.kind = j.at("kind").get<std::string>() == "llm_merge" ? QueueKind::llm_merge : QueueKind::time_compress;
    q.entity_type = j.at("entity_type").get<std::string>();
    q.group_key = j.at("group_key").get<std::string>();
    q.field = j.at("field").get<std::string>();
    q.items = j.at("items").get<std::vector<std::string>>();
    q.event_ids = j.at("event_ids").get<std::vector<std::string>>();
    q.timestamps = j.at("timestamps").get<std::vector<EpochMs>>();
    q.attempts = j.at("attempts").get<int>();
    q.last_error = j.at("last_error").get<std::string>();
    return q;
}

}  // namespace membase
