#pragma once

// Provider for OpenAI-compatible chat-completion endpoints over plain HTTP.
// Kept out of the other headers so only binaries that need it pull in httplib.

#include <httplib.h>

#include <chrono>
#include <string>
#include <thread>

#include "membase/config.hpp"
#include "membase/llm.hpp"

namespace membase {

struct Endpoint {
    std::string host;
    int port = 80;
    std::string path = "/v1/chat/completions";
};

inline Endpoint parse_endpoint(const std::string& url) {
    constexpr std::string_view scheme = "http://";
    if (url.rfind(scheme, 0) != 0) throw Error(ErrorCode::invalid_argument, "endpoint must start with http://", url);
    Endpoint e;
    auto rest = url.substr(scheme.size());
    const auto slash = rest.find('/');
    if (slash != std::string::npos) {
        e.path = rest.substr(slash);
        rest = rest.substr(0, slash);
    }
    const auto colon = rest.rfind(':');
    if (colon != std::string::npos) {
        try {
            e.port = std::stoi(rest.substr(colon + 1));
        } catch (const std::exception&) {
            throw Error(ErrorCode::invalid_argument, "bad port in endpoint", url);
        }
        rest = rest.substr(0, colon);
    }
    if (rest.empty()) throw Error(ErrorCode::invalid_argument, "endpoint has no host", url);
    e.host = rest;
    return e;
}

class HttpLlmProvider final : public LlmProvider {
public:
    explicit HttpLlmProvider(ProviderConfig cfg) : cfg_(std::move(cfg)), endpoint_(parse_endpoint(cfg_.endpoint)) {}

    Completion complete(const std::string& prompt, const CompletionParams& params) override {
        Json body{{"model", cfg_.model},
                  {"messages", Json::array({{{"role", "user"}, {"content", prompt}}})},
                  {"temperature", params.temperature},
                  {"max_tokens", params.max_tokens}};
        const auto payload = body.dump();
        std::string last_error;
        for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
            if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(200 << (attempt - 1)));
            httplib::Client client(endpoint_.host, endpoint_.port);
            const auto timeout = std::chrono::milliseconds(cfg_.timeout_ms);
            client.set_connection_timeout(timeout);
            client.set_read_timeout(timeout);
            httplib::Headers headers;
            if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);
            auto res = client.Post(endpoint_.path, headers, payload, "application/json");
            if (!res) {
                last_error = "transport error: " + httplib::to_string(res.error());
                continue;
            }
            if (res->status >= 500 || res->status == 429) {
                last_error = "HTTP " + std::to_string(res->status);
                continue;
            }
            if (res->status != 200) throw ProviderError("HTTP " + std::to_string(res->status) + ": " + res->body, attempt + 1);
            try {
                const auto j = Json::parse(res->body);
                Completion c;
                c.text = j.at("choices").at(0).at("message").at("content").get<std::string>();
                if (j.contains("usage")) {
                    c.usage.prompt_tokens = j["usage"].value("prompt_tokens", std::size_t{0});
                    c.usage.completion_tokens = j["usage"].value("completion_tokens", std::size_t{0});
                } else {
                    c.usage.prompt_tokens = text::count_whitespace_tokens(prompt);
                    c.usage.completion_tokens = text::count_whitespace_tokens(c.text);
                }
                meter_.record(c.usage);
                return c;
            } catch (const Json::exception& e) {
                throw ProviderError(std::string("malformed completion response: ") + e.what(), attempt + 1);
            }
        }
        throw ProviderError("provider unavailable: " + last_error, cfg_.max_retries + 1);
    }

    const UsageMeter& meter() const { return meter_; }

private:
    ProviderConfig cfg_;
    Endpoint endpoint_;
    UsageMeter meter_;
};

}  // namespace membase
