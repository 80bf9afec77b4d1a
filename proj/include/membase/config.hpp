#pragma once

// Service configuration: a JSON file overlaid by MEMBASE_* environment
// variables. Every leaf key has an override named MEMBASE_ followed by its
// path joined with '_' and upper-cased, e.g. MEMBASE_LISTEN_PORT or
// MEMBASE_RECALL_W_TIME. Values parse as JSON when possible, else as strings.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>

#include "membase/engine.hpp"
#include "membase/error.hpp"
#include "membase/value.hpp"

namespace membase {

enum class ProviderMode { mock, http_llm };

struct ProviderConfig {
    ProviderMode mode = ProviderMode::mock;
    std::string script;    // mock: script file
    std::string endpoint;  // http-llm: http://host:port/path of an OpenAI-compatible chat endpoint
    std::string model;
    std::string api_key;
    int timeout_ms = 30000;
    int max_retries = 2;
};

struct PromptPaths {
    std::string segmentation;
    std::string extraction;
    std::string merge;
    std::string compress;
    std::string dedup;
};

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string data_dir = "./membase-data";
    std::size_t flush_threshold = 20;
    EpochMs idle_timeout_ms = 30 * kMinuteMs;
    RecallConfig recall;
    CompressionConfig compression;
    ProviderConfig provider;
    PromptPaths prompts;
    std::string auth_token;  // empty: no auth
    std::size_t embedding_dim = 256;
    bool sync_writes = false;
};

inline Json to_json(const ServiceConfig& c) {
    return {{"listen", {{"host", c.host}, {"port", c.port}}},
            {"data_dir", c.data_dir},
            {"flush_threshold", c.flush_threshold},
            {"idle_timeout_ms", c.idle_timeout_ms},
            {"recall", to_json(c.recall)},
            {"compression",
             {{"window_ms", c.compression.window},
              {"inactivity_threshold_ms", c.compression.inactivity_threshold},
              {"ttl_after_summary_ms", c.compression.ttl_after_summary}}},
            {"provider",
             {{"mode", c.provider.mode == ProviderMode::mock ? "mock" : "http-llm"},
              {"script", c.provider.script},
              {"endpoint", c.provider.endpoint},
              {"model", c.provider.model},
              {"api_key", c.provider.api_key},
              {"timeout_ms", c.provider.timeout_ms},
              {"max_retries", c.provider.max_retries}}},
            {"prompts",
             {{"segmentation", c.prompts.segmentation},
              {"extraction", c.prompts.extraction},
              {"merge", c.prompts.merge},
              {"compress", c.prompts.compress},
              {"dedup", c.prompts.dedup}}},
            {"auth_token", c.auth_token},
            {"embedding_dim", c.embedding_dim},
            {"sync_writes", c.sync_writes}};
}

namespace detail {

inline void merge_json(Json& base, const Json& overlay, const std::string& path) {
    if (!overlay.is_object()) throw Error(ErrorCode::syntax, "config section must be an object", path);
    for (auto it = overlay.begin(); it != overlay.end(); ++it) {
        const auto sub = path + "." + it.key();
        if (!base.contains(it.key())) throw Error(ErrorCode::unknown_key, "unknown config key", sub);
        auto& slot = base[it.key()];
        // type_weights is a free-form map; everything else merges key by key
        if (slot.is_object() && it.key() != "type_weights") {
            merge_json(slot, it.value(), sub);
        } else {
            slot = it.value();
        }
    }
}

inline std::string env_name(const std::string& path) {
    std::string out = "MEMBASE";
    for (char c : path) out += c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return out;
}

inline void apply_env(Json& node, const std::string& path, const std::function<const char*(const char*)>& getenv_fn) {
    for (auto it = node.begin(); it != node.end(); ++it) {
        const auto sub = path + "." + it.key();
        if (it->is_object() && it.key() != "type_weights") {
            apply_env(*it, sub, getenv_fn);
            continue;
        }
        const char* raw = getenv_fn(env_name(sub).c_str());
        if (raw == nullptr) continue;
        try {
            *it = Json::parse(raw);
        } catch (const Json::parse_error&) {
            *it = std::string(raw);
        }
    }
}

}  // namespace detail

inline ServiceConfig service_config_from_json(const Json& j) {
    ServiceConfig c;
    try {
        c.host = j.at("listen").at("host").get<std::string>();
        c.port = j.at("listen").at("port").get<int>();
        c.data_dir = j.at("data_dir").get<std::string>();
        c.flush_threshold = j.at("flush_threshold").get<std::size_t>();
        c.idle_timeout_ms = j.at("idle_timeout_ms").get<EpochMs>();
        c.recall = recall_config_from_json(j.at("recall"));
        const auto& comp = j.at("compression");
        c.compression.window = comp.at("window_ms").get<EpochMs>();
        c.compression.inactivity_threshold = comp.at("inactivity_threshold_ms").get<EpochMs>();
        c.compression.ttl_after_summary = comp.at("ttl_after_summary_ms").get<EpochMs>();
        const auto& p = j.at("provider");
        const auto mode = p.at("mode").get<std::string>();
        if (mode == "mock") {
            c.provider.mode = ProviderMode::mock;
        } else if (mode == "http-llm") {
            c.provider.mode = ProviderMode::http_llm;
        } else {
            throw Error(ErrorCode::invalid_argument, "provider.mode must be 'mock' or 'http-llm'", "$.provider.mode");
        }
        c.provider.script = p.at("script").get<std::string>();
        c.provider.endpoint = p.at("endpoint").get<std::string>();
        c.provider.model = p.at("model").get<std::string>();
        c.provider.api_key = p.at("api_key").get<std::string>();
        c.provider.timeout_ms = p.at("timeout_ms").get<int>();
        c.provider.max_retries = p.at("max_retries").get<int>();
        const auto& pr = j.at("prompts");
        c.prompts.segmentation = pr.at("segmentation").get<std::string>();
        c.prompts.extraction = pr.at("extraction").get<std::string>();
        c.prompts.merge = pr.at("merge").get<std::string>();
        c.prompts.compress = pr.at("compress").get<std::string>();
        c.prompts.dedup = pr.at("dedup").get<std::string>();
        c.auth_token = j.at("auth_token").get<std::string>();
        c.embedding_dim = j.at("embedding_dim").get<std::size_t>();
        c.sync_writes = j.at("sync_writes").get<bool>();
    } catch (const Json::exception& e) {
        throw Error(ErrorCode::syntax, std::string("bad config value: ") + e.what());
    }
    return c;
}

// Defaults <- file (if given) <- environment, then validated.
inline ServiceConfig load_service_config(const std::string& path,
                                         const std::function<const char*(const char*)>& getenv_fn = [](const char* k) {
                                             return std::getenv(k);
                                         }) {
    Json merged = to_json(ServiceConfig{});
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw Error(ErrorCode::io, "cannot open config", path);
        std::stringstream ss;
        ss << in.rdbuf();
        Json file;
        try {
            file = Json::parse(ss.str());
        } catch (const Json::parse_error& e) {
            throw Error(ErrorCode::syntax, e.what(), path, {}, e.byte);
        }
        detail::merge_json(merged, file, "$");
    }
    detail::apply_env(merged, "", getenv_fn);
    return service_config_from_json(merged);
}

inline void validate_service_config(const ServiceConfig& c) {
    c.recall.validate();
    if (!c.compression.valid()) throw Error(ErrorCode::invalid_argument, "compression durations must be positive", "compression");
    if (c.flush_threshold == 0) throw Error(ErrorCode::invalid_argument, "flush_threshold must be positive", "flush_threshold");
    if (c.provider.mode == ProviderMode::mock && c.provider.script.empty())
        throw Error(ErrorCode::invalid_argument, "mock provider needs a script file", "provider.script");
    if (c.provider.mode == ProviderMode::http_llm && c.provider.endpoint.empty())
        throw Error(ErrorCode::invalid_argument, "http-llm provider needs an endpoint", "provider.endpoint");
    std::error_code ec;
    std::filesystem::create_directories(c.data_dir, ec);
    const auto probe = std::filesystem::path(c.data_dir) / ".write-probe";
    {
        std::ofstream out(probe);
        if (!out) throw Error(ErrorCode::io, "data directory is not writable", c.data_dir);
    }
    std::filesystem::remove(probe, ec);
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io, "cannot open file", path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Engine settings derived from the service config, with prompt templates
// loaded from disk where paths are given.
inline EngineConfig engine_config(const ServiceConfig& c) {
    EngineConfig e;
    e.flush_threshold = c.flush_threshold;
    e.idle_timeout = c.idle_timeout_ms;
    e.recall = c.recall;
    e.compression = c.compression;
    if (!c.prompts.segmentation.empty()) e.extraction.segmentation.prompt_template = read_text_file(c.prompts.segmentation);
    if (!c.prompts.extraction.empty()) e.extraction.prompt_template = read_text_file(c.prompts.extraction);
    if (!c.prompts.merge.empty()) e.consolidation.merge_template = read_text_file(c.prompts.merge);
    if (!c.prompts.compress.empty()) e.compress_template = read_text_file(c.prompts.compress);
    if (!c.prompts.dedup.empty()) e.extraction.dedup.prompt_template = read_text_file(c.prompts.dedup);
    return e;
}

}  // namespace membase
