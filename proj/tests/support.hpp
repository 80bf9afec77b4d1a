#pragma once

// Shared helpers for the test binaries: scratch directories, sample paths,
// independent oracles and small generators.

#include <array>
#include <cstdio>
#include <filesystem>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "membase/config.hpp"
#include "membase/engine.hpp"

namespace membase::testing {

inline std::string sample(const std::string& name) { return std::string(MEMBASE_SOURCE_DIR) + "/samples/" + name; }
inline std::string prompt_file(const std::string& name) { return std::string(MEMBASE_SOURCE_DIR) + "/prompts/" + name; }

inline MemorySchema load_sample_schema(const std::string& name) { return parse_schema(read_text_file(sample(name))); }

class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("membase-test-" + std::to_string(rd()) + "-" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::string str() const { return path_.string(); }

private:
    std::filesystem::path path_;
};

struct CommandResult {
    int status = -1;
    std::string out;
};

// Runs a shell command, capturing stdout (stderr is folded in when asked).
inline CommandResult run_command(const std::string& cmd, bool merge_stderr = false) {
    CommandResult r;
    FILE* p = ::popen((cmd + (merge_stderr ? " 2>&1" : " 2>/dev/null")).c_str(), "r");
    if (p == nullptr) return r;
    std::array<char, 4096> buf{};
    std::size_t n;
    while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
    const int st = ::pclose(p);
    r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    return r;
}

inline CommandResult run_cli(const std::string& args, bool merge_stderr = false) {
    return run_command(std::string("cd ") + MEMBASE_SOURCE_DIR + " && " + MEMBASE_CLI + " " + args, merge_stderr);
}

// Textbook Levenshtein distance with a full table.
inline std::size_t levenshtein(std::string_view a, std::string_view b) {
    std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
    for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
    for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i)
        for (std::size_t j = 1; j <= b.size(); ++j)
            d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    return d[a.size()][b.size()];
}

// Minimum over every substring haystack[i, j), scanned in (start, length)
// order so the first strict improvement is the tie-break winner. One
// Levenshtein row per start keeps it O(n^2 m) rather than O(n^3 m).
inline SpanMatch brute_force_span(std::string_view h, std::string_view n) {
    SpanMatch best{0, 0, std::numeric_limits<std::size_t>::max()};
    const std::size_t m = n.size();
    for (std::size_t i = 0; i <= h.size(); ++i) {
        // col[k] = distance(n[0:k], h[i:j]) for the current j
        std::vector<std::size_t> col(m + 1), next(m + 1);
        for (std::size_t k = 0; k <= m; ++k) col[k] = k;
        if (col[m] < best.distance) best = {i, i, col[m]};
        for (std::size_t j = i + 1; j <= h.size(); ++j) {
            next[0] = j - i;
            for (std::size_t k = 1; k <= m; ++k)
                next[k] = std::min({col[k] + 1, next[k - 1] + 1, col[k - 1] + (h[j - 1] == n[k - 1] ? 0 : 1)});
            std::swap(col, next);
            if (col[m] < best.distance) best = {i, j, col[m]};
        }
    }
    return best;
}

inline std::string random_string(std::mt19937_64& rng, std::size_t len, std::string_view alphabet) {
    std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1);
    std::string s;
    for (std::size_t i = 0; i < len; ++i) s += alphabet[pick(rng)];
    return s;
}

inline Message msg(std::size_t index, Role role, std::string content, EpochMs ts) {
    return Message{index, role, std::move(content), ts};
}

inline Session make_session(std::string id, std::string user, const std::vector<std::string>& contents, EpochMs t0,
                            EpochMs step = kSecondMs) {
    Session s{std::move(id), std::move(user), {}};
    for (std::size_t i = 0; i < contents.size(); ++i)
        s.messages.push_back(msg(i, i % 2 == 0 ? Role::user : Role::assistant, contents[i], t0 + static_cast<EpochMs>(i) * step));
    return s;
}

inline std::string reply_json(const Json& j) { return j.dump(); }

// One event memory and two entity memories over it.
inline MemorySchema three_type_schema() {
    return parse_schema(R"({
  "tenant": "support",
  "events": [{"EventType": "SupportTicket", "Description": "a customer problem report",
    "Properties": [
      {"PropertyName": "product", "PropertyType": "string", "Description": "affected product"},
      {"PropertyName": "issue", "PropertyType": "string", "Description": "what went wrong"},
      {"PropertyName": "severity", "PropertyType": "number", "Description": "1 low to 5 critical"}]}],
  "entities": [
    {"EntityType": "CustomerProfile", "Description": "what we know about the customer",
     "Properties": [{"PropertyName": "known_issues", "PropertyType": "string", "Description": "recurring problems",
                     "AggregateExpression": {"EventType": "SupportTicket", "PropertyName": "issue", "Op": "LLM_MERGE"}}]},
    {"EntityType": "ProductHealth", "Description": "per-product severity",
     "Properties": [{"PropertyName": "peak_severity", "PropertyType": "number", "Description": "worst reported severity",
                     "AggregateExpression": {"EventType": "SupportTicket", "PropertyName": "severity", "Op": "MAX",
                                             "GroupBy": ["product"]}}]}]
})");
}

// One schema per memory type, for the per-type (multi-pass) comparator.
inline std::vector<MemorySchema> per_type_schemas(const MemorySchema& s) {
    std::vector<MemorySchema> out;
    for (const auto& e : s.events) out.push_back({s.tenant, s.version, {e}, {}});
    for (const auto& e : s.entities) out.push_back({s.tenant, s.version, {}, {e}});
    return out;
}

// Multi-pass comparator: the full pipeline (segmentation plus extraction) once
// per memory type, the way a per-type extractor would run. Returns the prompt
// tokens billed by `llm` across all passes.
inline std::size_t multi_pass_prompt_tokens(const Session& session, const MemorySchema& schema, const Store& store,
                                            RecordingProvider& llm, const EmbeddingProvider& embedder) {
    const auto before = llm.meter().prompt_tokens();
    for (const auto& single : per_type_schemas(schema)) extract_one_pass(session, single, store, llm, embedder);
    return llm.meter().prompt_tokens() - before;
}

inline std::size_t one_pass_prompt_tokens(const Session& session, const MemorySchema& schema, const Store& store,
                                          RecordingProvider& llm, const EmbeddingProvider& embedder) {
    const auto before = llm.meter().prompt_tokens();
    extract_one_pass(session, schema, store, llm, embedder);
    return llm.meter().prompt_tokens() - before;
}

// Provider that marks every message salient under one topic and extracts nothing.
inline FunctionLlmProvider whole_session_provider() {
    return FunctionLlmProvider([](const std::string& prompt, const CompletionParams& p) -> std::string {
        if (p.task == "segmentation") {
            // the transcript lists "[i] role: ..." lines; cover up to the last index
            std::size_t last = 0;
            for (std::size_t pos = prompt.find("\n["); pos != std::string::npos; pos = prompt.find("\n[", pos + 1)) {
                const auto close = prompt.find(']', pos);
                try {
                    last = std::max<std::size_t>(last, std::stoul(prompt.substr(pos + 2, close - pos - 2)));
                } catch (const std::exception&) {
                }
            }
            return Json{{"topics", {{{"label", "all"}, {"spans", {{0, last}}}}}}}.dump();
        }
        return "{}";
    });
}

// One pseudo-random store mutation drawn from `rng`. The draw sequence depends
// only on the seed and the store contents, so replaying the same seed on a
// fresh store reproduces the same state. Returns false for a snapshot step,
// which changes no state.
inline bool random_store_op(Store& store, std::mt19937_64& rng, const EmbeddingProvider& embedder, bool allow_snapshot) {
    static const std::vector<std::string> words{"alpha", "beta", "gamma", "delta", "tea", "coffee", "chess", "recursion",
                                                "paris", "train", "budget", "deadline", "python", "garden", "piano"};
    auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng() % n); };
    auto id = [&] { return "r" + std::to_string(pick(24)); };
    auto sentence = [&] {
        std::string s;
        const auto n = 2 + pick(6);
        for (std::size_t i = 0; i < n; ++i) s += (i ? " " : "") + words[pick(words.size())];
        return s;
    };
    const auto kind = pick(allow_snapshot ? 12 : 11);
    try {
        switch (kind) {
            case 0:
            case 1:
            case 2: {
                RecordMetadata meta{"Note", static_cast<EpochMs>(1000 + pick(5000)), "u" + std::to_string(pick(3)),
                                    words[pick(4)], "s1", std::nullopt};
                store.upsert_record(make_record(id(), RecordKind::event, sentence(), meta, embedder));
                break;
            }
            case 3: store.remove_record(id()); break;
            case 4: store.keyword_update(id(), {words[pick(words.size())], words[pick(words.size())]}); break;
            case 5: {
                EventInstance e{"ev" + std::to_string(pick(10)), "Note", static_cast<EpochMs>(pick(9000)),
                                {{"text", Value{sentence()}}}, "s1", "u1", std::nullopt, std::nullopt, 1};
                store.put_event(e);
                break;
            }
            case 6: {
                EntityInstance e{entity_id("Profile", "u" + std::to_string(pick(3))), "Profile", "u1", {}, {}, 1,
                                 static_cast<EpochMs>(pick(9000))};
                const double x = static_cast<double>(pick(100)) / 10.0;
                e.properties["avg"] = Value{x};
                e.accumulators["avg"] = {x, 1};
                store.put_entity(e);
                break;
            }
            case 7: {
                QueueEntry q;
                q.entity_type = "Profile";
                q.group_key = "u" + std::to_string(pick(3));
                q.field = "notes";
                q.items = {sentence()};
                store.queue_push(q);
                break;
            }
            case 8: {
                const auto q = store.queue();
                if (!q.empty()) store.queue_pop(q[pick(q.size())].id);
                break;
            }
            case 9: {
                const auto target = id(), summary = id();
                if (pick(2) == 0) {
                    store.set_summary(target, summary, static_cast<EpochMs>(pick(9000)));
                } else {
                    store.reinforce(target);
                }
                break;
            }
            case 10: {
                Store::Batch batch(store);
                const auto n = 1 + pick(4);
                for (std::size_t i = 0; i < n; ++i) {
                    RecordMetadata meta{"Note", static_cast<EpochMs>(1000 + pick(5000)), "u1", "batch", "s2", std::nullopt};
                    store.upsert_record(make_record(id(), RecordKind::event, sentence(), meta, embedder));
                }
                if (pick(2) == 0) store.expire(static_cast<EpochMs>(pick(9000)));
                batch.commit();
                break;
            }
            default: store.snapshot(); return false;
        }
    } catch (const Error& e) {
        if (e.code() != ErrorCode::not_found) throw;
    }
    return true;
}

// "What is my nickname?" fixture. The target record never uses the word, so
// its direct similarity to the query is near zero; it is reachable only
// through the keyword node it shares with a record that does.
inline const std::string kNicknameQuery = "What is my nickname?";

struct NicknameFixture {
    std::string target;
    std::vector<std::string> distractors;
};

inline NicknameFixture seed_nickname_fixture(Store& store, const EmbeddingProvider& embedder, EpochMs now) {
    NicknameFixture f;
    auto add = [&](const std::string& id, const std::string& body, EpochMs age, std::vector<std::string> extra) {
        store.upsert_record(make_record(id, RecordKind::event, body, {"Note", now - age, "u1", "", "s1", std::nullopt}, embedder));
        auto kws = text::keywords(body);
        kws.insert(kws.end(), extra.begin(), extra.end());
        if (!kws.empty()) store.keyword_update(id, kws);
    };
    const std::vector<std::string> topics{"flight number for the trip to lisbon next week",
                                          "dentist appointment time on the second floor clinic",
                                          "wifi password for the guest network downstairs",
                                          "monthly budget limit for groceries and transport",
                                          "favourite colour according to the survey answers",
                                          "home address written on the parcel label",
                                          "shoe size for the hiking boots order",
                                          "blood type listed in the medical record",
                                          "library card number for the city branch",
                                          "train platform for the early commuter service",
                                          "parking spot number in the office garage",
                                          "gym locker combination near the pool entrance"};
    for (std::size_t i = 0; i < topics.size(); ++i) {
        const auto id = "what-" + std::to_string(i);
        add(id, "what is my " + topics[i], static_cast<EpochMs>(i + 1) * kHourMs, {});
        f.distractors.push_back(id);
    }
    const std::vector<std::string> filler{"booked a table for friday dinner", "the garden needs watering",
                                          "learning piano scales slowly", "read a novel about sailing"};
    for (std::size_t i = 0; i < filler.size(); ++i) add("filler-" + std::to_string(i), filler[i], kDayMs, {});
    add("nickname-ask", "what is my nickname", 3 * kDayMs, {});
    add("nickname-ctx", "my nickname", 2 * kDayMs, {});
    f.target = "call-me-ace";
    add(f.target, "Call me Ace from now on", kHourMs / 2, {"nickname"});
    return f;
}

// 1-based rank of `id` in `hits`, or 0 when absent.
template <typename Hits>
std::size_t rank_of(const Hits& hits, const std::string& id) {
    for (std::size_t i = 0; i < hits.size(); ++i)
        if (hits[i].id == id) return i + 1;
    return 0;
}

// --- materialized-view harness ----------------------------------------------

inline MemorySchema stats_schema() {
    return parse_schema(R"({
  "events": [{"EventType": "Txn", "Description": "a ledger movement",
    "Properties": [{"PropertyName": "amount", "PropertyType": "number", "Description": "signed amount"}]}],
  "entities": [{"EntityType": "Account", "Description": "per-user totals", "Properties": [
    {"PropertyName": "total", "PropertyType": "number", "Description": "sum",
     "AggregateExpression": {"EventType": "Txn", "PropertyName": "amount", "Op": "SUM"}},
    {"PropertyName": "n", "PropertyType": "integer", "Description": "count",
     "AggregateExpression": {"EventType": "Txn", "PropertyName": "amount", "Op": "COUNT"}},
    {"PropertyName": "peak", "PropertyType": "number", "Description": "max",
     "AggregateExpression": {"EventType": "Txn", "PropertyName": "amount", "Op": "MAX"}},
    {"PropertyName": "mean", "PropertyType": "number", "Description": "avg",
     "AggregateExpression": {"EventType": "Txn", "PropertyName": "amount", "Op": "AVG"}}]}]
})");
}

// Amounts are multiples of 1/4, so every partial sum is exact in binary and
// SUM can be compared bit-for-bit regardless of fold order.
inline std::vector<EventInstance> random_txn_log(std::mt19937_64& rng, std::size_t n) {
    std::vector<EventInstance> log;
    for (std::size_t i = 0; i < n; ++i) {
        EventInstance e;
        e.id = "t" + std::to_string(i);
        e.event_type = "Txn";
        e.timestamp = static_cast<EpochMs>(1'000'000 + rng() % 100'000);
        e.user = "u" + std::to_string(rng() % 5);
        e.properties["amount"] = Value{static_cast<double>(static_cast<int>(rng() % 801) - 400) / 4.0};
        log.push_back(std::move(e));
    }
    return log;
}

struct AccountOracle {
    double total = 0.0;
    std::int64_t n = 0;
    double peak = -std::numeric_limits<double>::infinity();
    double sum = 0.0;
};

// From-scratch recomputation by plain arithmetic over the whole log.
inline std::map<std::string, AccountOracle> recompute_accounts(const std::vector<EventInstance>& log) {
    std::map<std::string, AccountOracle> out;
    for (const auto& e : log) {
        auto& a = out["user=" + e.user];
        const double v = std::get<double>(e.properties.at("amount"));
        a.total += v;
        a.n += 1;
        a.peak = std::max(a.peak, v);
        a.sum += v;
    }
    return out;
}

// Feeds the log in a shuffled arrival order and random batch sizes.
inline void materialize_incrementally(std::vector<EventInstance> log, Store& store, const MemorySchema& schema,
                                      std::mt19937_64& rng) {
    std::shuffle(log.begin(), log.end(), rng);
    std::size_t i = 0;
    while (i < log.size()) {
        const std::size_t n = std::min<std::size_t>(1 + rng() % 50, log.size() - i);
        std::vector<RoutingBinding> bindings;
        for (std::size_t j = i; j < i + n; ++j) {
            auto b = route_event(log[j], schema);
            bindings.insert(bindings.end(), b.begin(), b.end());
        }
        materialize(bindings, store, schema, 2'000'000);
        i += n;
    }
}

// Empty string when the store agrees with the oracle, else the first mismatch.
inline std::string compare_accounts(const Store& store, const std::map<std::string, AccountOracle>& oracle) {
    if (store.entities().size() != oracle.size()) return "entity count differs";
    for (const auto& [group, want] : oracle) {
        const auto e = store.get_entity("Account", group);
        if (!e) return "missing " + group;
        const auto num = [&](const char* f) { return as_number(e->properties.at(f)).value_or(std::nan("")); };
        if (num("total") != want.total) return group + " total " + format_number(num("total"));
        if (std::get<std::int64_t>(e->properties.at("n")) != want.n) return group + " count";
        if (num("peak") != want.peak) return group + " peak";
        if (std::fabs(num("mean") - want.sum / static_cast<double>(want.n)) > 1e-12) return group + " mean";
    }
    return {};
}

// --- TIME_COMPRESS harness ---------------------------------------------------

inline constexpr EpochMs kMonday = 1'699'833'600'000;  // 2023-11-13 00:00 UTC

struct CompressRun {
    std::size_t events = 0;
    std::size_t summaries = 0;
    std::size_t pruned = 0;
    std::size_t reinforced_after_summary = 0;
    std::vector<std::string> violations;
};

// Simulates five weeks of one timeline whose events fall in its first three
// weekly windows. Every simulated day may append events, reinforce some,
// run compression (with occasional provider failures) and expire. After each
// day it checks that every event is either unsummarized or covered by exactly
// one summary, and that no event reinforced after its summary was pruned.
inline CompressRun run_compress_simulation(std::uint64_t seed, std::size_t n_events, const EmbeddingProvider& embedder) {
    std::mt19937_64 rng(seed);
    CompressRun run;
    run.events = n_events;
    Store store;
    const std::string key = timeline_key("Diary", "user=u1", "log");
    store.put_timeline({key, "user=u1", {}, 0, {}});
    std::map<EpochMs, std::vector<std::string>> schedule;
    std::map<std::string, EpochMs> ts;
    for (std::size_t i = 0; i < n_events; ++i) {
        const auto t = kMonday + static_cast<EpochMs>(rng() % static_cast<std::uint64_t>(3 * kWeekMs));
        const auto id = "e" + std::to_string(i);
        ts[id] = t;
        schedule[t].push_back(id);
    }
    FunctionLlmProvider llm([&](const std::string&, const CompletionParams&) -> std::string {
        if (rng() % 10 == 0) throw ProviderError("scripted outage");
        return "window summary";
    });
    const CompressionConfig cfg{kWeekMs, kDayMs + static_cast<EpochMs>(rng() % 3) * kDayMs, kWeekMs};
    std::set<std::string> pinned, seen, gone;
    auto it = schedule.begin();
    for (EpochMs now = kMonday + kDayMs; now <= kMonday + 5 * kWeekMs; now += kDayMs) {
        std::vector<TimelineEntry> fresh;
        for (; it != schedule.end() && it->first <= now; ++it)
            for (const auto& id : it->second) {
                store.upsert_record(make_record(id, RecordKind::event, "diary entry " + id,
                                                {"Diary", it->first, "u1", "user=u1", "s1", std::nullopt}, embedder));
                fresh.push_back({id, it->first, "diary entry " + id, std::nullopt, std::nullopt, false});
                seen.insert(id);
            }
        if (!fresh.empty()) {
            auto t = *store.get_timeline(key);
            timeline_append(t, fresh);
            store.put_timeline(t);
        }
        for (const auto& id : seen) {
            if (gone.count(id) || rng() % 12 != 0) continue;
            const auto r = store.get_record(id);
            if (r && r->summary_id) pinned.insert(id);
            reinforce_event(store, id, now);
        }
        compress_timelines(store, llm, now, cfg, embedder);
        for (const auto& id : store.expire(now)) {
            gone.insert(id);
            ++run.pruned;
            if (pinned.count(id)) run.violations.push_back("reinforced event " + id + " pruned");
        }
        const auto t = *store.get_timeline(key);
        std::map<std::string, int> cover;
        for (const auto& s : t.summaries)
            for (const auto& id : s.event_ids) cover[id] += 1;
        for (const auto& id : seen) {
            const auto* e = t.find(id);
            const int c = cover.count(id) ? cover.at(id) : 0;
            if (c > 1) run.violations.push_back(id + " summarized twice");
            if (e == nullptr) {
                if (!gone.count(id)) run.violations.push_back(id + " vanished without expiry");
                if (c != 1) run.violations.push_back(id + " pruned without a summary");
                continue;
            }
            if (e->summary_id.has_value() != (c == 1)) run.violations.push_back(id + " coverage disagrees with its entry");
            if (e->summary_id) {
                const auto s = std::find_if(t.summaries.begin(), t.summaries.end(),
                                            [&](const WindowSummary& w) { return w.id == *e->summary_id; });
                if (s == t.summaries.end() || std::find(s->event_ids.begin(), s->event_ids.end(), id) == s->event_ids.end())
                    run.violations.push_back(id + " points at the wrong summary");
                if (!e->reinforced && !e->ttl_deadline) run.violations.push_back(id + " summarized without a TTL");
            }
        }
        run.summaries = t.summaries.size();
    }
    run.reinforced_after_summary = pinned.size();
    return run;
}

}  // namespace membase::testing
