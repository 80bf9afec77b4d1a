// membase command-line tool: serve, schema validation, offline ingest, query,
// rerank benchmark, snapshot and restore.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <csignal>
#include <iostream>
#include <memory>
#include <random>

#include "membase/config.hpp"
#include "membase/engine.hpp"
#include "membase/http_llm.hpp"
#include "membase/http_service.hpp"

namespace {

using namespace membase;

int fail(const Error& e) {
    std::cerr << problem_detail(e).dump(2) << "\n";
    return e.code() == ErrorCode::validation ? 1 : 2;
}

MemorySchema load_schema_file(const std::string& path) { return parse_schema(read_text_file(path)); }

std::unique_ptr<Store> open_store(const std::string& data_dir) {
    if (data_dir.empty()) return std::make_unique<Store>();
    auto store = std::make_unique<Store>(data_dir);
    for (const auto& w : store->restore_warnings()) std::cerr << "warning: " << w << "\n";
    return store;
}

int cmd_schema_validate(const std::string& file) {
    const auto schema = load_schema_file(file);
    const auto report = validate_schema(schema);
    Json out{{"ok", report.ok()}, {"violations", Json::array()}};
    for (const auto& v : report.violations)
        out["violations"].push_back(
            {{"path", v.path}, {"message", v.message}, {"severity", v.severity == Severity::error ? "error" : "info"}});
    (report.ok() ? std::cout : std::cerr) << out.dump(2) << "\n";
    return report.ok() ? 0 : 1;
}

int cmd_ingest(const std::string& session_file, const std::string& schema_file, const std::string& script,
               const std::string& data_dir) {
    auto store = open_store(data_dir);
    MockLlmProvider llm(MockLlmProvider::load_script(script));
    HashEmbedder embedder;
    Engine engine(*store, llm, embedder);
    engine.install_schema(load_schema_file(schema_file));
    auto session = session_from_json(Json::parse(read_text_file(session_file)));
    const auto result = engine.ingest(std::move(session));
    const auto drained = engine.drain_queue();
    Json events = Json::array();
    for (const auto& id : result.event_ids)
        if (auto ev = store->get_event(id)) events.push_back(to_json(*ev));
    Json entities = Json::array();
    for (const auto& e : store->entities()) entities.push_back(to_json(e));
    std::cout << Json{{"result", to_json(result)},
                      {"events", events},
                      {"entities", entities},
                      {"consolidation", {{"processed", drained.processed}, {"failed", drained.failed}}},
                      {"llm_calls", llm.meter().calls()}}
                     .dump(2)
              << "\n";
    return 0;
}

int cmd_query(const std::string& text, std::size_t k, std::optional<double> w_time, std::optional<double> w_busi,
              const std::string& data_dir) {
    auto store = open_store(data_dir);
    MockLlmProvider llm({});
    HashEmbedder embedder;
    Engine engine(*store, llm, embedder);
    auto cfg = engine.config().recall;
    cfg.final_k = k;
    if (w_time) cfg.w_time = *w_time;
    if (w_busi) cfg.w_busi = *w_busi;
    Json results = Json::array();
    for (const auto& h : engine.search(text, cfg)) results.push_back(to_json(h));
    std::cout << Json{{"results", results}}.dump(2) << "\n";
    return 0;
}

std::vector<Vector> random_tokens(std::mt19937_64& rng, std::size_t n, std::size_t dim) {
    std::normal_distribution<float> gauss;
    std::vector<Vector> out(n, Vector(dim));
    for (auto& v : out) {
        for (auto& x : v) x = gauss(rng);
        normalize_in_place(v);
    }
    return out;
}

int cmd_bench_rerank(std::size_t candidates, std::size_t tokens, std::size_t dim, std::size_t iterations, bool exact,
                     std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const auto query = random_tokens(rng, tokens, dim);
    const auto query_q = quantize_tokens(query);
    std::vector<std::vector<Vector>> docs;
    std::vector<QuantizedTokens> docs_q;
    for (std::size_t i = 0; i < candidates; ++i) {
        docs.push_back(random_tokens(rng, tokens, dim));
        docs_q.push_back(quantize_tokens(docs.back()));
    }
    std::vector<double> ms;
    double sink = 0.0;
    for (std::size_t it = 0; it < iterations; ++it) {
        const auto t0 = std::chrono::steady_clock::now();
        for (std::size_t i = 0; i < candidates; ++i)
            sink += exact ? maxsim(query, docs[i]) : maxsim_quantized(query_q, docs_q[i]);
        ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    std::sort(ms.begin(), ms.end());
    auto pct = [&](double p) { return ms[std::min(ms.size() - 1, static_cast<std::size_t>(p * static_cast<double>(ms.size())))]; };
    std::cout << Json{{"candidates", candidates},
                      {"tokens", tokens},
                      {"dim", dim},
                      {"iterations", iterations},
                      {"mode", exact ? "exact" : "quantized"},
                      {"p50_ms", pct(0.50)},
                      {"p95_ms", pct(0.95)},
                      {"checksum", sink}}
                     .dump(2)
              << "\n";
    return 0;
}

int cmd_snapshot(const std::string& data_dir) {
    Store store(data_dir);
    store.snapshot();
    std::cout << Json{{"snapshot", (std::filesystem::path(data_dir) / "snapshot.mbs").string()},
                      {"last_seq", store.last_seq()},
                      {"records", store.record_count()}}
                     .dump(2)
              << "\n";
    return 0;
}

// Restores the store in `path`, checks its invariants and reports its contents.
int cmd_restore(const std::string& path) {
    Store store(path);
    const auto bad = store.check_invariants();
    std::cout << Json{{"path", path},
                      {"last_seq", store.last_seq()},
                      {"records", store.record_count()},
                      {"events", store.events().size()},
                      {"entities", store.entities().size()},
                      {"queue_depth", store.queue_depth()},
                      {"warnings", store.restore_warnings()},
                      {"invariant_violations", bad}}
                     .dump(2)
              << "\n";
    return bad.empty() ? 0 : 1;
}

std::atomic<bool> g_stop{false};

int cmd_serve(const std::string& config_path) {
    const auto cfg = load_service_config(config_path);
    validate_service_config(cfg);
    Store store(cfg.data_dir, {cfg.sync_writes, cfg.recall.rerank.token_merge_threshold});
    for (const auto& w : store.restore_warnings()) std::cerr << "warning: " << w << "\n";
    std::unique_ptr<LlmProvider> llm;
    if (cfg.provider.mode == ProviderMode::mock) {
        llm = std::make_unique<MockLlmProvider>(MockLlmProvider::load_script(cfg.provider.script));
    } else {
        llm = std::make_unique<HttpLlmProvider>(cfg.provider);
    }
    HashEmbedder embedder(cfg.embedding_dim);
    Engine engine(store, *llm, embedder, engine_config(cfg));
    engine.start_worker();
    IdleFlusher idle(engine, std::chrono::seconds(5));
    HttpService service(engine, cfg.auth_token);
    const int port = service.start(cfg.host, cfg.port);
    std::cerr << "membase listening on " << cfg.host << ":" << port << "\n";
    std::signal(SIGINT, [](int) { g_stop = true; });
    std::signal(SIGTERM, [](int) { g_stop = true; });
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    service.stop();
    engine.stop_worker();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"membase: schema-driven long-term memory engine"};
    app.require_subcommand(1);

    std::string config_path;
    auto* serve = app.add_subcommand("serve", "run the HTTP service");
    serve->add_option("--config", config_path, "service config file (JSON)");

    auto* schema = app.add_subcommand("schema", "schema tools");
    schema->require_subcommand(1);
    std::string schema_file;
    auto* validate = schema->add_subcommand("validate", "validate a schema file");
    validate->add_option("file", schema_file)->required();

    std::string session_file, ingest_schema, script, data_dir;
    auto* ingest = app.add_subcommand("ingest", "run the offline pipeline on a session file");
    ingest->add_option("session", session_file)->required();
    ingest->add_option("--schema", ingest_schema)->required();
    ingest->add_option("--mock-script", script)->required();
    ingest->add_option("--data-dir", data_dir, "persist into this store directory");

    std::string query_text;
    std::size_t k = 10;
    std::optional<double> w_time, w_busi;
    auto* query = app.add_subcommand("query", "search a store");
    query->add_option("text", query_text)->required();
    query->add_option("--k", k);
    query->add_option("--w-time", w_time);
    query->add_option("--w-busi", w_busi);
    query->add_option("--data-dir", data_dir);

    auto* bench = app.add_subcommand("bench", "benchmarks");
    bench->require_subcommand(1);
    std::size_t candidates = 1000, tokens = 32, dim = 256, iterations = 50;
    std::uint64_t seed = 7;
    bool exact = false;
    auto* bench_rerank = bench->add_subcommand("rerank", "time MaxSim scoring of a candidate set");
    bench_rerank->add_option("--candidates", candidates);
    bench_rerank->add_option("--tokens", tokens);
    bench_rerank->add_option("--dim", dim);
    bench_rerank->add_option("--iterations", iterations)->check(CLI::PositiveNumber);
    bench_rerank->add_option("--seed", seed);
    bench_rerank->add_flag("--exact", exact, "score with float vectors instead of int8 codes");

    auto* snapshot = app.add_subcommand("snapshot", "write a snapshot and truncate the log");
    snapshot->add_option("--data-dir", data_dir)->required();

    std::string restore_path;
    auto* restore = app.add_subcommand("restore", "restore a store directory and check it");
    restore->add_option("path", restore_path)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*serve) return cmd_serve(config_path);
        if (*validate) return cmd_schema_validate(schema_file);
        if (*ingest) return cmd_ingest(session_file, ingest_schema, script, data_dir);
        if (*query) return cmd_query(query_text, k, w_time, w_busi, data_dir);
        if (*bench_rerank) return cmd_bench_rerank(candidates, tokens, dim, iterations, exact, seed);
        if (*snapshot) return cmd_snapshot(data_dir);
        if (*restore) return cmd_restore(restore_path);
    } catch (const Error& e) {
        return fail(e);
    } catch (const std::exception& e) {
        std::cerr << Json{{"code", "internal"}, {"message", e.what()}, {"path", ""}}.dump(2) << "\n";
        return 2;
    }
    return 0;
}
