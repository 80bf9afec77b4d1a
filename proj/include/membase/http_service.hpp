#pragma once

// HTTP front end over an Engine. Bodies are JSON; failures are problem-detail
// objects {code, message, path}.

#include <httplib.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <mutex>
#include <string>
#include <thread>

#include "membase/engine.hpp"
#include "membase/error.hpp"

namespace membase {

inline int http_status(ErrorCode c) {
    switch (c) {
        case ErrorCode::not_found: return 404;
        case ErrorCode::conflict: return 409;
        case ErrorCode::provider:
        case ErrorCode::segmentation_failed:
        case ErrorCode::extraction_failed: return 502;
        case ErrorCode::io:
        case ErrorCode::corrupt: return 500;
        default: return 422;
    }
}

inline Json problem_detail(const Error& e) {
    Json j{{"code", to_string(e.code())}, {"message", e.what()}, {"path", e.path()}};
    if (e.code() == ErrorCode::validation && !e.detail().empty()) {
        try {
            j["violations"] = Json::parse(e.detail());
        } catch (const Json::parse_error&) {
        }
    }
    return j;
}

// Search parameters as the query API accepts them, on top of `base`.
inline RecallConfig recall_from_params(const httplib::Request& req, RecallConfig base) {
    auto num = [&](const char* key, auto& field) {
        if (!req.has_param(key)) return;
        const auto raw = req.get_param_value(key);
        try {
            std::size_t used = 0;
            if constexpr (std::is_floating_point_v<std::decay_t<decltype(field)>>) {
                field = std::stod(raw, &used);
            } else {
                field = static_cast<std::decay_t<decltype(field)>>(std::stoll(raw, &used));
            }
            if (used != raw.size()) throw std::invalid_argument(raw);
        } catch (const std::exception&) {
            throw Error(ErrorCode::invalid_argument, "bad numeric parameter", key);
        }
    };
    auto flag = [&](const char* key, bool& field) {
        if (!req.has_param(key)) return;
        const auto raw = req.get_param_value(key);
        if (raw == "true" || raw == "1") {
            field = true;
        } else if (raw == "false" || raw == "0") {
            field = false;
        } else {
            throw Error(ErrorCode::invalid_argument, "bad boolean parameter", key);
        }
    };
    num("k", base.final_k);
    num("w_time", base.w_time);
    num("w_busi", base.w_busi);
    num("freshness_window", base.freshness_window);
    num("decay_half_life", base.decay_half_life);
    num("quota_primary", base.quota_primary);
    num("quota_keyword", base.quota_keyword);
    num("final_k", base.final_k);
    num("candidate_cap", base.rerank.candidate_cap);
    num("token_merge_threshold", base.rerank.token_merge_threshold);
    num("alpha", base.hybrid.alpha);
    flag("rerank", base.rerank.enabled);
    flag("quantized", base.rerank.quantized);
    if (req.has_param("type_weights")) {
        try {
            base.type_weights = Json::parse(req.get_param_value("type_weights")).get<std::map<std::string, double>>();
        } catch (const Json::exception&) {
            throw Error(ErrorCode::invalid_argument, "type_weights must be a JSON object of numbers", "type_weights");
        }
    }
    base.validate();
    return base;
}

class HttpService {
public:
    HttpService(Engine& engine, std::string auth_token = {}) : engine_(engine), auth_token_(std::move(auth_token)) {
        routes();
    }

    ~HttpService() { stop(); }

    HttpService(const HttpService&) = delete;
    HttpService& operator=(const HttpService&) = delete;

    // Binds (port 0 picks a free port) and serves on a background thread.
    int start(const std::string& host = "127.0.0.1", int port = 0) {
        port_ = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
        if (port_ < 0) throw Error(ErrorCode::io, "cannot bind " + host + ":" + std::to_string(port));
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
        return port_;
    }

    // Serves on the calling thread until stop() is called from elsewhere.
    void run(const std::string& host, int port) {
        if (!server_.listen(host, port)) throw Error(ErrorCode::io, "cannot listen on " + host + ":" + std::to_string(port));
    }

    void stop() {
        server_.stop();
        if (thread_.joinable()) thread_.join();
    }

    int port() const { return port_; }

private:
    template <class Fn>
    httplib::Server::Handler wrap(Fn fn) {
        return [this, fn](const httplib::Request& req, httplib::Response& res) {
            if (!auth_token_.empty() && req.get_header_value("Authorization") != "Bearer " + auth_token_) {
                reply(res, 401, {{"code", "unauthorized"}, {"message", "missing or wrong bearer token"}, {"path", req.path}});
                return;
            }
            try {
                reply(res, 200, fn(req));
            } catch (const Error& e) {
                reply(res, http_status(e.code()), problem_detail(e));
            } catch (const Json::exception& e) {
                reply(res, 422, {{"code", "syntax"}, {"message", e.what()}, {"path", "$"}});
            } catch (const std::exception& e) {
                reply(res, 500, {{"code", "internal"}, {"message", e.what()}, {"path", req.path}});
            }
        };
    }

    static void reply(httplib::Response& res, int status, const Json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    static Json body_json(const httplib::Request& req) {
        try {
            return Json::parse(req.body);
        } catch (const Json::parse_error& e) {
            throw Error(ErrorCode::syntax, e.what(), "$", {}, e.byte);
        }
    }

    void routes() {
        server_.Put("/v1/schemas", wrap([this](const httplib::Request& req) {
                        const auto v = engine_.install_schema(parse_schema(req.body));
                        return Json{{"version", v}};
                    }));

        server_.Post(R"(/v1/sessions/([^/]+)/messages)", wrap([this](const httplib::Request& req) {
                         const auto sid = req.matches[1].str();
                         const auto body = body_json(req);
                         const auto role_name = body.value("role", "user");
                         const auto role = role_from_string(role_name);
                         if (!role) throw Error(ErrorCode::invalid_argument, "unknown role '" + role_name + "'", "$.role");
                         if (!body.contains("content") || !body.at("content").is_string())
                             throw Error(ErrorCode::missing_property, "message needs a 'content' string", "$.content");
                         std::optional<EpochMs> ts;
                         if (body.contains("timestamp")) ts = body.at("timestamp").get<EpochMs>();
                         auto r = engine_.append_message(sid, body.value("user", ""), *role, body.at("content").get<std::string>(), ts);
                         Json out{{"status", to_string(r.status)}, {"index", r.index}};
                         if (r.flush) {
                             out["events"] = r.flush->event_ids.size();
                             out["flush"] = to_json(*r.flush);
                         }
                         return out;
                     }));

        server_.Post(R"(/v1/sessions/([^/]+)/flush)",
                     wrap([this](const httplib::Request& req) { return to_json(engine_.flush(req.matches[1].str())); }));

        server_.Get("/v1/memories/search", wrap([this](const httplib::Request& req) {
                        if (!req.has_param("q")) throw Error(ErrorCode::missing_property, "query parameter 'q' is required", "q");
                        const auto cfg = recall_from_params(req, engine_.config().recall);
                        SearchFilter filter;
                        if (req.has_param("user")) filter.user = req.get_param_value("user");
                        if (req.has_param("type")) filter.type = req.get_param_value("type");
                        if (req.has_param("topic")) filter.topic = req.get_param_value("topic");
                        if (req.has_param("kind")) {
                            filter.kind = record_kind_from_string(req.get_param_value("kind"));
                            if (!filter.kind) throw Error(ErrorCode::invalid_argument, "unknown record kind", "kind");
                        }
                        Json results = Json::array();
                        for (const auto& h : engine_.search(req.get_param_value("q"), cfg, filter)) results.push_back(to_json(h));
                        return Json{{"results", results}};
                    }));

        server_.Get(R"(/v1/entities/([^/]+)/([^/]+))", wrap([this](const httplib::Request& req) {
                        const auto type = req.matches[1].str();
                        const auto key = req.matches[2].str();
                        auto e = engine_.entity(type, key);
                        if (!e) throw Error(ErrorCode::not_found, "unknown entity", type + "/" + key);
                        return to_json(*e);
                    }));

        server_.Post("/v1/admin/compress", wrap([this](const httplib::Request&) { return to_json(engine_.compress()); }));

        server_.Post("/v1/admin/expire",
                     wrap([this](const httplib::Request&) { return Json{{"pruned", engine_.expire()}}; }));

        server_.Get("/v1/healthz", wrap([this](const httplib::Request&) { return engine_.health(); }));
    }

    Engine& engine_;
    std::string auth_token_;
    httplib::Server server_;
    std::thread thread_;
    int port_ = -1;
};

// Background upkeep for a running service: flushes idle sessions. The
// consolidation queue has its own worker inside the engine.
class IdleFlusher {
public:
    IdleFlusher(Engine& engine, std::chrono::milliseconds interval) : engine_(engine), interval_(interval) {
        thread_ = std::thread([this] { loop(); });
    }

    ~IdleFlusher() {
        {
            std::lock_guard lock(mu_);
            stopping_ = true;
        }
        cv_.notify_all();
        thread_.join();
    }

    IdleFlusher(const IdleFlusher&) = delete;
    IdleFlusher& operator=(const IdleFlusher&) = delete;

private:
    void loop() {
        std::unique_lock lock(mu_);
        while (!cv_.wait_for(lock, interval_, [this] { return stopping_; })) {
            lock.unlock();
            engine_.flush_idle();
            lock.lock();
        }
    }

    Engine& engine_;
    std::chrono::milliseconds interval_;
    std::mutex mu_;
    std::condition_variable cv_;
    bool stopping_ = false;
    std::thread thread_;
};

}  // namespace membase
