#pragma once

// LLM provider contract. Every call reports token usage; the mock counts tokens
// by whitespace splitting so token-efficiency measurements are deterministic.

#include <atomic>
#include <cstddef>
#include <fstream>
#include <functional>
#include <mutex>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "membase/error.hpp"
#include "membase/text.hpp"
#include "membase/value.hpp"

namespace membase {

struct TokenUsage {
    std::size_t prompt_tokens = 0;
    std::size_t completion_tokens = 0;
};

struct Completion {
    std::string text;
    TokenUsage usage;
};

struct CompletionParams {
    std::string task;  // "segmentation", "extraction", "merge", "compress", "dedup"
    double temperature = 0.0;
    int max_tokens = 2048;
};

class LlmProvider {
public:
    virtual ~LlmProvider() = default;
    virtual Completion complete(const std::string& prompt, const CompletionParams& params) = 0;
};

// Running totals over all calls, safe to bump from concurrent sessions.
class UsageMeter {
public:
    void record(const TokenUsage& u) {
        calls_.fetch_add(1, std::memory_order_relaxed);
        prompt_.fetch_add(u.prompt_tokens, std::memory_order_relaxed);
        completion_.fetch_add(u.completion_tokens, std::memory_order_relaxed);
    }
    std::size_t calls() const { return calls_.load(); }
    std::size_t prompt_tokens() const { return prompt_.load(); }
    std::size_t completion_tokens() const { return completion_.load(); }

private:
    std::atomic<std::size_t> calls_{0};
    std::atomic<std::size_t> prompt_{0};
    std::atomic<std::size_t> completion_{0};
};

struct CallRecord {
    std::string task;
    std::string prompt;
    std::string reply;
    TokenUsage usage;
};

// Base for in-process providers: whitespace token accounting plus a call log.
class RecordingProvider : public LlmProvider {
public:
    Completion complete(const std::string& prompt, const CompletionParams& params) override {
        std::string reply = respond(prompt, params);
        Completion c{std::move(reply), {text::count_whitespace_tokens(prompt), 0}};
        c.usage.completion_tokens = text::count_whitespace_tokens(c.text);
        meter_.record(c.usage);
        std::lock_guard lock(mu_);
        calls_.push_back({params.task, prompt, c.text, c.usage});
        return c;
    }

    const UsageMeter& meter() const { return meter_; }

    std::vector<CallRecord> calls() const {
        std::lock_guard lock(mu_);
        return calls_;
    }

    std::vector<CallRecord> calls_for(const std::string& task) const {
        std::lock_guard lock(mu_);
        std::vector<CallRecord> out;
        for (const auto& c : calls_)
            if (c.task == task) out.push_back(c);
        return out;
    }

protected:
    virtual std::string respond(const std::string& prompt, const CompletionParams& params) = 0;

private:
    UsageMeter meter_;
    mutable std::mutex mu_;
    std::vector<CallRecord> calls_;
};

struct ScriptEntry {
    std::string match;  // substring of the prompt; empty matches anything
    std::string reply;
};

// Replays scripted replies: the first entry whose `match` occurs in the prompt wins.
class MockLlmProvider final : public RecordingProvider {
public:
    explicit MockLlmProvider(std::vector<ScriptEntry> script) : script_(std::move(script)) {}
    MockLlmProvider(std::initializer_list<ScriptEntry> script) : script_(script) {}

    // Script file format: [{"match": "...", "reply": "..."}, ...]
    static std::vector<ScriptEntry> parse_script(const Json& j) {
        if (!j.is_array()) throw Error(ErrorCode::syntax, "mock script must be an array", "$");
        std::vector<ScriptEntry> out;
        for (std::size_t i = 0; i < j.size(); ++i) {
            const auto& e = j[i];
            const auto path = "$[" + std::to_string(i) + "]";
            if (!e.is_object() || !e.contains("match") || !e.contains("reply"))
                throw Error(ErrorCode::syntax, "script entry needs 'match' and 'reply'", path);
            const auto& reply = e.at("reply");
            out.push_back({e.at("match").get<std::string>(), reply.is_string() ? reply.get<std::string>() : reply.dump()});
        }
        return out;
    }

    static std::vector<ScriptEntry> load_script(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw Error(ErrorCode::io, "cannot open mock script", path);
        std::stringstream ss;
        ss << in.rdbuf();
        try {
            return parse_script(Json::parse(ss.str()));
        } catch (const Json::parse_error& e) {
            throw Error(ErrorCode::syntax, e.what(), path, {}, e.byte);
        }
    }

protected:
    std::string respond(const std::string& prompt, const CompletionParams&) override {
        for (const auto& e : script_) {
            if (e.match.empty() || prompt.find(e.match) != std::string::npos) return e.reply;
        }
        throw ProviderError("mock provider has no scripted reply for prompt");
    }

private:
    std::vector<ScriptEntry> script_;
};

// Provider backed by a callable; handy for tests that compute replies.
class FunctionLlmProvider final : public RecordingProvider {
public:
    using Fn = std::function<std::string(const std::string&, const CompletionParams&)>;
    explicit FunctionLlmProvider(Fn fn) : fn_(std::move(fn)) {}

protected:
    std::string respond(const std::string& prompt, const CompletionParams& params) override {
        return fn_(prompt, params);
    }

private:
    Fn fn_;
};

// Strips a ``` fence (optionally tagged) and trailing commas before ] or }.
// Anything else malformed is left for the JSON parser to reject.
inline std::string repair_structured_reply(std::string_view raw) {
    std::string s(text::trim(raw));
    if (s.rfind("```", 0) == 0) {
        const auto nl = s.find('\n');
        const auto close = s.rfind("```");
        if (nl != std::string::npos && close != std::string::npos && close > nl) {
            s = std::string(text::trim(std::string_view(s).substr(nl + 1, close - nl - 1)));
        }
    }
    std::string out;
    out.reserve(s.size());
    bool in_string = false;
    bool escape = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const char c = s[i];
        if (in_string) {
            out.push_back(c);
            if (escape) {
                escape = false;
            } else if (c == '\\') {
                escape = true;
            } else if (c == '"') {
                in_string = false;
            }
            continue;
        }
        if (c == '"') {
            in_string = true;
        } else if (c == ',') {
            std::size_t j = i + 1;
            while (j < s.size() && std::isspace(static_cast<unsigned char>(s[j]))) ++j;
            if (j < s.size() && (s[j] == ']' || s[j] == '}')) continue;
        }
        out.push_back(c);
    }
    return out;
}

}  // namespace membase
