#pragma once

// Two-phase memory segmentation: one LLM call filters non-salient messages and
// partitions the rest into topics, each a sorted list of inclusive
// (start, end) message-index spans. Spans of one topic need not be contiguous,
// so a topic interrupted by another is still recovered as a single segment.

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "membase/error.hpp"
#include "membase/llm.hpp"
#include "membase/schema.hpp"
#include "membase/text.hpp"
#include "membase/value.hpp"

namespace membase {

enum class Role { user, assistant, system, tool };

inline const char* to_string(Role r) {
    switch (r) {
        case Role::user: return "user";
        case Role::assistant: return "assistant";
        case Role::system: return "system";
        case Role::tool: return "tool";
    }
    return "user";
}

inline std::optional<Role> role_from_string(std::string_view s) {
    if (s == "user") return Role::user;
    if (s == "assistant") return Role::assistant;
    if (s == "system") return Role::system;
    if (s == "tool") return Role::tool;
    return std::nullopt;
}

struct Message {
    std::size_t index = 0;
    Role role = Role::user;
    std::string content;
    EpochMs timestamp = 0;

    bool operator==(const Message&) const = default;
};

struct Session {
    std::string id;
    std::string user;
    std::vector<Message> messages;

    bool operator==(const Session&) const = default;
};

// Inclusive message-index range.
struct Span {
    std::size_t start = 0;
    std::size_t end = 0;

    bool operator==(const Span&) const = default;
};

struct TopicSpan {
    std::string label;
    std::vector<Span> spans;

    bool operator==(const TopicSpan&) const = default;
};

struct SegmentPlan {
    std::vector<TopicSpan> topics;

    bool operator==(const SegmentPlan&) const = default;
};

struct Segment {
    std::string topic;
    std::string text;
    std::vector<Span> source_spans;
    std::string session_id;

    bool operator==(const Segment&) const = default;
};

// Marker line placed between non-adjacent spans of one topic.
inline constexpr std::string_view kElisionMarker = "…";

inline std::string render_message(const Message& m) { return std::string(to_string(m.role)) + ": " + m.content; }

inline std::string session_text(const Session& s) {
    std::string out;
    for (const auto& m : s.messages) {
        if (!out.empty()) out += "\n";
        out += render_message(m);
    }
    return out;
}

inline void check_session(const Session& s) {
    for (std::size_t i = 0; i < s.messages.size(); ++i) {
        const auto& m = s.messages[i];
        if (m.index != i)
            throw Error(ErrorCode::index_gap, "message index " + std::to_string(m.index) + " at position " + std::to_string(i),
                        s.id);
        if (m.content.empty() && m.role != Role::system)
            throw Error(ErrorCode::invalid_argument, "empty content on non-system message", s.id + "[" + std::to_string(i) + "]");
    }
}

inline std::vector<Violation> validate_plan(const Session& session, const SegmentPlan& plan) {
    std::vector<Violation> out;
    const std::size_t n = session.messages.size();
    std::vector<int> owner(n, -1);
    for (std::size_t t = 0; t < plan.topics.size(); ++t) {
        const auto& topic = plan.topics[t];
        for (std::size_t k = 0; k < topic.spans.size(); ++k) {
            const auto& sp = topic.spans[k];
            const auto path = "topics[" + std::to_string(t) + "].spans[" + std::to_string(k) + "]";
            const auto tuple = "(" + std::to_string(sp.start) + "," + std::to_string(sp.end) + ")";
            if (sp.start > sp.end) {
                out.push_back({path, "start>end in span " + tuple});
                continue;
            }
            if (sp.end >= n) {
                out.push_back({path, "span " + tuple + " out of range for session of length " + std::to_string(n)});
                continue;
            }
            if (k > 0 && topic.spans[k - 1].start > sp.start) {
                out.push_back({path, "spans not sorted ascending at " + tuple});
            }
            for (std::size_t i = sp.start; i <= sp.end; ++i) {
                if (owner[i] >= 0) {
                    out.push_back({path, "overlap at index " + std::to_string(i)});
                    break;
                }
                owner[i] = static_cast<int>(t);
            }
        }
    }
    return out;
}

inline std::vector<Segment> apply_segment_plan(const Session& session, const SegmentPlan& plan) {
    if (auto v = validate_plan(session, plan); !v.empty()) {
        throw Error(ErrorCode::validation, "segment plan invalid: " + v.front().message, v.front().path);
    }
    std::vector<Segment> out;
    for (const auto& topic : plan.topics) {
        if (topic.spans.empty()) continue;
        Segment seg;
        seg.topic = topic.label;
        seg.session_id = session.id;
        seg.source_spans = topic.spans;
        std::optional<std::size_t> prev_end;
        for (const auto& sp : topic.spans) {
            if (prev_end && sp.start != *prev_end + 1) seg.text += "\n" + std::string(kElisionMarker);
            for (std::size_t i = sp.start; i <= sp.end; ++i) {
                if (!seg.text.empty()) seg.text += "\n";
                seg.text += render_message(session.messages[i]);
            }
            prev_end = sp.end;
        }
        out.push_back(std::move(seg));
    }
    return out;
}

inline constexpr std::string_view kDefaultSegmentationTemplate =
    R"(### TASK: MEMORY SEGMENTATION
You split a conversation into memory-worthy topics in two phases.
Phase 1, saliency filtering: skip messages with no lasting information, such as greetings, thanks, filler and small talk.
Phase 2, event-centric partitioning: group the remaining messages by the topic or event they discuss. A topic may resume after an interruption; list every stretch that belongs to it.

Conversation (one message per line, "[index] role: content"):
{session_transcript}

{format_instructions}
)";

inline constexpr std::string_view kSegmentationFormatInstructions =
    R"(Reply with JSON only: {"topics": [{"label": "<short topic name>", "spans": [[start, end], ...]}]}
- start and end are inclusive message indices.
- spans of a topic are sorted ascending and no two spans overlap, within or across topics.
- leave non-salient messages out; reply {"topics": []} when nothing is worth remembering.)";

struct SegmentationOptions {
    std::string prompt_template{kDefaultSegmentationTemplate};
    int max_retries = 2;
};

inline std::string compile_segmentation_prompt(const Session& session, const std::string& tmpl) {
    std::string transcript;
    for (const auto& m : session.messages) {
        if (!transcript.empty()) transcript += "\n";
        transcript += "[" + std::to_string(m.index) + "] " + render_message(m);
    }
    auto out = text::replace_all(tmpl, "{format_instructions}", kSegmentationFormatInstructions);
    return text::replace_all(std::move(out), "{session_transcript}", transcript);
}

// Parses a provider reply into a plan. Throws segmentation_failed if the
// (repaired) reply is not in the expected shape.
inline SegmentPlan parse_segment_reply(const std::string& raw) {
    Json j;
    try {
        j = Json::parse(repair_structured_reply(raw));
    } catch (const Json::parse_error& e) {
        throw Error(ErrorCode::segmentation_failed, std::string("unparseable segmentation reply: ") + e.what(), "$", raw);
    }
    const Json* topics = &j;
    if (j.is_object()) {
        auto it = j.find("topics");
        if (it == j.end()) throw Error(ErrorCode::segmentation_failed, "reply lacks 'topics'", "$", raw);
        topics = &*it;
    }
    if (!topics->is_array()) throw Error(ErrorCode::segmentation_failed, "'topics' must be an array", "$.topics", raw);
    SegmentPlan plan;
    for (std::size_t t = 0; t < topics->size(); ++t) {
        const auto& tj = (*topics)[t];
        const auto path = "$.topics[" + std::to_string(t) + "]";
        if (!tj.is_object() || !tj.contains("spans") || !tj.at("spans").is_array())
            throw Error(ErrorCode::segmentation_failed, "topic needs a 'spans' array", path, raw);
        TopicSpan topic;
        topic.label = tj.value("label", "topic-" + std::to_string(t));
        for (const auto& sj : tj.at("spans")) {
            if (!sj.is_array() || sj.size() != 2 || !sj[0].is_number_unsigned() || !sj[1].is_number_unsigned())
                throw Error(ErrorCode::segmentation_failed, "span must be a [start, end] pair of indices", path, raw);
            topic.spans.push_back({sj[0].get<std::size_t>(), sj[1].get<std::size_t>()});
        }
        plan.topics.push_back(std::move(topic));
    }
    return plan;
}

// Runs the segmentation prompt. Invalid or unparseable replies are retried
// with the problems appended to the prompt, up to `max_retries` times.
inline SegmentPlan plan_segments(const Session& session, LlmProvider& llm, const SegmentationOptions& opts = {}) {
    if (session.messages.empty()) throw Error(ErrorCode::invalid_argument, "session is empty", session.id);
    check_session(session);
    const auto base_prompt = compile_segmentation_prompt(session, opts.prompt_template);
    std::string prompt = base_prompt;
    std::string last_reply;
    std::string last_problem;
    for (int attempt = 0; attempt <= opts.max_retries; ++attempt) {
        Completion c;
        try {
            c = llm.complete(prompt, {"segmentation"});
        } catch (const ProviderError& e) {
            if (attempt == opts.max_retries)
                throw ProviderError(std::string("segmentation provider failed: ") + e.what(), attempt + 1);
            continue;
        }
        last_reply = c.text;
        try {
            auto plan = parse_segment_reply(c.text);
            auto violations = validate_plan(session, plan);
            if (violations.empty()) return plan;
            last_problem.clear();
            for (const auto& v : violations) last_problem += "- " + v.path + ": " + v.message + "\n";
        } catch (const Error& e) {
            last_problem = std::string("- ") + e.what() + "\n";
        }
        prompt = base_prompt + "\nYour previous reply was rejected:\n" + last_problem +
                 "Reply again, fixing these problems.\n";
    }
    throw Error(ErrorCode::segmentation_failed, "segmentation failed: " + std::string(text::trim(last_problem)), session.id,
                last_reply);
}

inline Json to_json(const Session& s) {
    Json msgs = Json::array();
    for (const auto& m : s.messages)
        msgs.push_back({{"index", m.index}, {"role", to_string(m.role)}, {"content", m.content}, {"timestamp", m.timestamp}});
    return {{"id", s.id}, {"user", s.user}, {"messages", msgs}};
}

// Session file: {"id", "user", "messages": [{"role", "content", "timestamp", "index"?}]}.
inline Session session_from_json(const Json& j) {
    Session s;
    s.id = j.at("id").get<std::string>();
    s.user = j.value("user", "");
    const auto& msgs = j.at("messages");
    for (std::size_t i = 0; i < msgs.size(); ++i) {
        const auto& m = msgs[i];
        Message msg;
        msg.index = m.value("index", i);
        const auto role = m.value("role", "user");
        auto r = role_from_string(role);
        if (!r) throw Error(ErrorCode::syntax, "unknown role '" + role + "'", "$.messages[" + std::to_string(i) + "].role");
        msg.role = *r;
        msg.content = m.value("content", "");
        msg.timestamp = m.value("timestamp", EpochMs{0});
        s.messages.push_back(std::move(msg));
    }
    return s;
}

inline Json to_json(const SegmentPlan& p) {
    Json topics = Json::array();
    for (const auto& t : p.topics) {
        Json spans = Json::array();
        for (const auto& sp : t.spans) spans.push_back({sp.start, sp.end});
        topics.push_back({{"label", t.label}, {"spans", spans}});
    }
    return {{"topics", topics}};
}

}  // namespace membase
