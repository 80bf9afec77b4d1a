#include <gtest/gtest.h>

#include <fstream>

#include "support.hpp"

using namespace membase;
using namespace membase::testing;

namespace {

const HashEmbedder kEmbed(64);

MemoryRecord rec(const std::string& id, const std::string& text, EpochMs ts = 1000, const std::string& user = "u1") {
    return make_record(id, RecordKind::event, text, {"Note", ts, user, "", "s1", std::nullopt}, kEmbed);
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& p, const std::string& data) {
    std::ofstream(p, std::ios::binary | std::ios::trunc) << data;
}

std::vector<Vector> random_unit_tokens(std::mt19937_64& rng, std::size_t n, std::size_t dim) {
    std::normal_distribution<float> g;
    std::vector<Vector> out(n, Vector(dim));
    for (auto& v : out) {
        for (auto& x : v) x = g(rng);
        normalize_in_place(v);
    }
    return out;
}

}  // namespace

TEST(Store, UpsertGetRemove) {
    Store s;
    s.upsert_record(rec("a", "green tea every morning"));
    ASSERT_TRUE(s.get_record("a"));
    EXPECT_EQ(s.get_record("a")->text, "green tea every morning");
    EXPECT_EQ(s.record_count(), 1u);
    EXPECT_TRUE(s.remove_record("a"));
    EXPECT_FALSE(s.remove_record("a"));
    EXPECT_FALSE(s.get_record("a"));
    EXPECT_TRUE(s.check_invariants().empty());
}

TEST(Store, RejectsMalformedRecords) {
    Store s;
    auto r = rec("a", "text");
    r.dense[0] += 0.5F;
    EXPECT_THROW(s.upsert_record(r), Error);
    auto r2 = rec("", "text");
    EXPECT_THROW(s.upsert_record(r2), Error);
    auto r3 = rec("c", "text");
    r3.sparse["x"] = 0.0F;
    EXPECT_THROW(s.upsert_record(r3), Error);
}

TEST(Store, KeywordUpdateUnknownRecord) {
    Store s;
    try {
        s.keyword_update("missing", {"tea"});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::not_found);
    }
}

TEST(Store, DenseTiesBreakByRecencyThenId) {
    Store s;
    s.upsert_record(rec("b", "same words", 100));
    s.upsert_record(rec("a", "same words", 100));
    s.upsert_record(rec("c", "same words", 200));
    const auto hits = s.dense_search(kEmbed.embed_dense("same words"), 3);
    ASSERT_EQ(hits.size(), 3u);
    EXPECT_EQ(hits[0].id, "c");
    EXPECT_EQ(hits[1].id, "a");
    EXPECT_EQ(hits[2].id, "b");
}

TEST(Store, FilterRestrictsSearch) {
    Store s;
    s.upsert_record(rec("a", "tea", 1, "u1"));
    s.upsert_record(rec("b", "tea", 1, "u2"));
    SearchFilter f;
    f.user = "u2";
    const auto hits = s.sparse_search(sparse_vector("tea"), 10, f);
    ASSERT_EQ(hits.size(), 1u);
    EXPECT_EQ(hits[0].id, "b");
}

TEST(Store, RestoreReproducesState) {
    TempDir dir;
    Json before;
    {
        Store s(dir.path());
        std::mt19937_64 rng(21);
        for (int i = 0; i < 300; ++i) random_store_op(s, rng, kEmbed, false);
        before = s.dump_state();
        ASSERT_TRUE(s.check_invariants().empty());
    }
    Store again(dir.path());
    EXPECT_EQ(again.dump_state(), before);
    EXPECT_TRUE(again.check_invariants().empty());
    EXPECT_TRUE(again.restore_warnings().empty());
}

TEST(Store, SnapshotThenLog) {
    TempDir dir;
    Json before;
    std::uint64_t seq = 0;
    {
        Store s(dir.path());
        std::mt19937_64 rng(22);
        for (int i = 0; i < 150; ++i) random_store_op(s, rng, kEmbed, false);
        s.snapshot();
        EXPECT_EQ(std::filesystem::file_size(dir.path() / "wal.log"), 0u);
        for (int i = 0; i < 150; ++i) random_store_op(s, rng, kEmbed, true);
        before = s.dump_state();
        seq = s.last_seq();
    }
    Store again(dir.path());
    EXPECT_EQ(again.dump_state(), before);
    EXPECT_EQ(again.last_seq(), seq);
    EXPECT_TRUE(again.check_invariants().empty());
}

TEST(Store, InMemoryMatchesDurable) {
    TempDir dir;
    Store durable(dir.path());
    Store memory;
    std::mt19937_64 a(23), b(23);
    for (int i = 0; i < 200; ++i) {
        random_store_op(durable, a, kEmbed, false);
        random_store_op(memory, b, kEmbed, false);
    }
    EXPECT_EQ(durable.dump_state(), memory.dump_state());
}

// Cutting the log at any byte keeps exactly the complete lines before the cut.
TEST(Store, EveryTruncationRestoresAPrefix) {
    TempDir dir;
    std::vector<Json> states;
    {
        Store s(dir.path());
        states.push_back(s.dump_state());
        std::mt19937_64 rng(24);
        while (states.size() < 16) {
            const auto seq = s.last_seq();
            random_store_op(s, rng, kEmbed, false);
            if (s.last_seq() != seq) states.push_back(s.dump_state());
        }
    }
    const auto log = read_file(dir.path() / "wal.log");
    ASSERT_EQ(static_cast<std::size_t>(std::count(log.begin(), log.end(), '\n')), states.size() - 1);
    for (std::size_t cut = 0; cut <= log.size(); ++cut) {
        TempDir copy;
        write_file(copy.path() / "wal.log", log.substr(0, cut));
        Store s(copy.path());
        const auto lines = static_cast<std::size_t>(std::count(log.begin(), log.begin() + static_cast<std::ptrdiff_t>(cut), '\n'));
        ASSERT_EQ(s.dump_state(), states[lines]) << "cut at " << cut;
        ASSERT_EQ(s.last_seq(), lines);
        const bool torn = cut > 0 && log[cut - 1] != '\n';
        ASSERT_EQ(s.restore_warnings().size(), torn ? 1u : 0u) << "cut at " << cut;
        ASSERT_TRUE(s.check_invariants().empty());
    }
}

TEST(Store, TornTailIsDroppedFromDisk) {
    TempDir dir;
    {
        Store s(dir.path());
        s.upsert_record(rec("a", "tea"));
    }
    const auto good = read_file(dir.path() / "wal.log");
    write_file(dir.path() / "wal.log", good + "0badc0de {\"op\":\"put_rec");
    {
        Store s(dir.path());
        ASSERT_EQ(s.restore_warnings().size(), 1u);
        EXPECT_NE(s.restore_warnings()[0].find("offset " + std::to_string(good.size())), std::string::npos);
        s.upsert_record(rec("b", "coffee"));
    }
    Store s(dir.path());
    EXPECT_TRUE(s.restore_warnings().empty());
    EXPECT_EQ(s.record_count(), 2u);
}

TEST(Store, ChecksumMismatchReportsOffset) {
    TempDir dir;
    {
        Store s(dir.path());
        s.upsert_record(rec("a", "tea"));
        s.upsert_record(rec("b", "coffee"));
        s.upsert_record(rec("c", "chess"));
    }
    auto log = read_file(dir.path() / "wal.log");
    const auto second = log.find('\n') + 1;
    const auto flip = log.find("coffee", second);
    ASSERT_NE(flip, std::string::npos);
    log[flip] = 'C';
    write_file(dir.path() / "wal.log", log);
    try {
        Store s(dir.path());
        FAIL() << "expected corrupt";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::corrupt);
        EXPECT_EQ(e.offset(), second);
    }
}

TEST(Store, CorruptSnapshotIsRejected) {
    TempDir dir;
    {
        Store s(dir.path());
        for (int i = 0; i < 5; ++i) s.upsert_record(rec("r" + std::to_string(i), "word " + std::to_string(i)));
        s.snapshot();
    }
    auto snap = read_file(dir.path() / "snapshot.mbs");
    snap[snap.size() / 2] ^= 0x5A;
    write_file(dir.path() / "snapshot.mbs", snap);
    try {
        Store s(dir.path());
        FAIL() << "expected corrupt";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::corrupt);
    }
}

TEST(Store, BatchIsOneLogEntry) {
    TempDir dir;
    {
        Store s(dir.path());
        Store::Batch batch(s);
        s.upsert_record(rec("a", "tea"));
        s.upsert_record(rec("b", "coffee"));
        s.keyword_update("a", {"drinks"});
        batch.commit();
    }
    const auto log = read_file(dir.path() / "wal.log");
    EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 1);
    // dropping the last byte tears the whole batch
    write_file(dir.path() / "wal.log", log.substr(0, log.size() - 1));
    Store s(dir.path());
    EXPECT_EQ(s.record_count(), 0u);
    EXPECT_EQ(s.keyword_count(), 0u);
}

TEST(Store, NestedBatchesCommitOnce) {
    TempDir dir;
    {
        Store s(dir.path());
        Store::Batch outer(s);
        s.upsert_record(rec("a", "tea"));
        {
            Store::Batch inner(s);
            s.upsert_record(rec("b", "coffee"));
        }
        s.upsert_record(rec("c", "chess"));
    }
    const auto log = read_file(dir.path() / "wal.log");
    EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 1);
    Store s(dir.path());
    EXPECT_EQ(s.record_count(), 3u);
}

// --- keyword graph ---------------------------------------------------------

TEST(KeywordGraph, NodeEmbeddingIsMeanOfLinkedRecords) {
    const std::vector<std::pair<std::string, std::string>> docs{
        {"a", "green tea before work"}, {"b", "jasmine tea at night"}, {"c", "tea ceremony in kyoto"}};
    std::vector<std::size_t> order{0, 1, 2};
    std::optional<Vector> first;
    do {
        Store s;
        for (auto i : order) s.upsert_record(rec(docs[i].first, docs[i].second));
        for (auto i : order) s.keyword_update(docs[i].first, {"Tea"});
        const auto node = s.keyword_node("tea");
        ASSERT_TRUE(node);
        EXPECT_EQ(node->count(), 3u);
        // oracle: plain mean then normalize
        std::vector<double> mean(kEmbed.dim(), 0.0);
        for (const auto& [_, text] : docs) {
            const auto d = kEmbed.embed_dense(text);
            for (std::size_t i = 0; i < d.size(); ++i) mean[i] += d[i];
        }
        double n = 0;
        for (auto& x : mean) {
            x /= 3.0;
            n += x * x;
        }
        n = std::sqrt(n);
        for (std::size_t i = 0; i < mean.size(); ++i)
            ASSERT_NEAR(node->embedding[i], static_cast<float>(mean[i] / n), 1e-9);
        if (!first) first = node->embedding;
        EXPECT_EQ(node->embedding, *first) << "embedding depends on insertion order";
    } while (std::next_permutation(order.begin(), order.end()));
}

TEST(KeywordGraph, NodesTrackRecordChanges) {
    Store s;
    s.upsert_record(rec("a", "green tea"));
    s.upsert_record(rec("b", "black tea"));
    s.keyword_update("a", {"tea"});
    s.keyword_update("b", {"tea", "  "});
    EXPECT_EQ(s.keyword_count(), 1u);
    s.upsert_record(rec("a", "oolong tea leaves"));
    EXPECT_TRUE(s.check_invariants().empty());
    s.remove_record("b");
    EXPECT_EQ(s.keyword_node("tea")->count(), 1u);
    s.remove_record("a");
    EXPECT_FALSE(s.keyword_node("tea"));
    EXPECT_TRUE(s.check_invariants().empty());
}

TEST(KeywordGraph, SearchExpandsMatchingNodes) {
    Store s;
    s.upsert_record(rec("a", "met him at the station"));
    s.upsert_record(rec("b", "grocery list"));
    s.upsert_record(rec("c", "bob said hello"));
    s.keyword_update("a", {"bob"});
    s.keyword_update("c", {"bob"});
    const auto hits = s.keyword_search("bob", 5, kEmbed);
    ASSERT_EQ(hits.size(), 2u);
    // both inherit the node score; equal scores fall back to id order
    EXPECT_EQ(hits[0].id, "a");
    EXPECT_EQ(hits[1].id, "c");
    EXPECT_DOUBLE_EQ(hits[0].score, dot(kEmbed.embed_dense("bob"), s.keyword_node("bob")->embedding));
    EXPECT_TRUE(s.keyword_search("unrelated zebra", 5, kEmbed).empty());
}

TEST(KeywordGraph, DuplicateLinksCollapseToMaxScore) {
    Store s;
    s.upsert_record(rec("a", "robert station"));
    s.upsert_record(rec("b", "robert"));
    s.upsert_record(rec("c", "station"));
    s.keyword_update("a", {"robert", "station"});
    s.keyword_update("b", {"robert"});
    s.keyword_update("c", {"station"});
    const auto q = kEmbed.embed_dense("robert");
    const double s_robert = dot(q, s.keyword_node("robert")->embedding);
    const double s_station = dot(q, s.keyword_node("station")->embedding);
    ASSERT_GT(s_station, 0.1);
    const auto hits = s.keyword_search("robert", 5, kEmbed);
    ASSERT_EQ(std::count_if(hits.begin(), hits.end(), [](const auto& h) { return h.id == "a"; }), 1);
    const auto a = std::find_if(hits.begin(), hits.end(), [](const auto& h) { return h.id == "a"; });
    EXPECT_DOUBLE_EQ(a->score, std::max(s_robert, s_station));
}

// --- hybrid search -----------------------------------------------------------

namespace {

struct OracleHit {
    std::string id;
    double score;
};

// Independent recomputation of hybrid scoring straight from stored vectors.
std::vector<OracleHit> hybrid_oracle(const Store& s, const std::string& query, std::size_t k, const HybridOptions& o) {
    const auto q = kEmbed.embed_dense(query);
    const auto qs = sparse_vector(query);
    struct Row {
        std::string id;
        EpochMs ts;
        double v;
    };
    auto order = [](const Row& a, const Row& b) {
        if (a.v != b.v) return a.v > b.v;
        if (a.ts != b.ts) return a.ts > b.ts;
        return a.id < b.id;
    };
    std::vector<Row> dense, sparse;
    for (const auto& id : s.record_ids()) {
        const auto r = *s.get_record(id);
        double d = 0;
        for (std::size_t i = 0; i < q.size(); ++i) d += static_cast<double>(q[i]) * r.dense[i];
        dense.push_back({id, r.metadata.timestamp, d});
        double sp = 0;
        for (const auto& [t, w] : qs)
            if (r.sparse.count(t)) sp += static_cast<double>(w) * r.sparse.at(t);
        if (sp > 0) sparse.push_back({id, r.metadata.timestamp, sp});
    }
    auto prepare = [&](std::vector<Row>& rows) {
        std::sort(rows.begin(), rows.end(), order);
        if (rows.size() > k * o.fanout) rows.resize(k * o.fanout);
    };
    prepare(dense);
    std::erase_if(dense, [&](const Row& r) { return r.v <= o.dense_floor; });
    prepare(sparse);
    auto norm = [](std::vector<Row>& rows) {
        if (rows.empty()) return;
        double lo = rows[0].v, hi = rows[0].v;
        for (const auto& r : rows) lo = std::min(lo, r.v), hi = std::max(hi, r.v);
        for (auto& r : rows) r.v = hi > lo ? (r.v - lo) / (hi - lo) : 1.0;
    };
    norm(dense);
    norm(sparse);
    std::map<std::string, std::pair<double, double>> both;
    std::map<std::string, EpochMs> ts;
    for (const auto& r : dense) both[r.id].first = r.v, ts[r.id] = r.ts;
    for (const auto& r : sparse) both[r.id].second = r.v, ts[r.id] = r.ts;
    std::vector<Row> fused;
    for (const auto& [id, p] : both) fused.push_back({id, ts[id], o.alpha * p.first + (1 - o.alpha) * p.second});
    std::sort(fused.begin(), fused.end(), order);
    if (fused.size() > k) fused.resize(k);
    std::vector<OracleHit> out;
    for (const auto& r : fused) out.push_back({r.id, r.v});
    return out;
}

}  // namespace

TEST(HybridSearch, MatchesIndependentRecomputation) {
    std::mt19937_64 rng(31);
    for (int round = 0; round < 40; ++round) {
        Store s;
        for (int i = 0; i < 80; ++i) random_store_op(s, rng, kEmbed, false);
        const std::vector<std::string> queries{"tea coffee", "chess recursion python", "paris train budget", "garden"};
        for (const auto& q : queries) {
            for (double alpha : {0.0, 0.7, 1.0}) {
                HybridOptions o;
                o.alpha = alpha;
                const auto got = s.hybrid_search(q, 5, {}, kEmbed, o);
                const auto want = hybrid_oracle(s, q, 5, o);
                ASSERT_EQ(got.size(), want.size()) << q;
                for (std::size_t i = 0; i < got.size(); ++i) {
                    ASSERT_EQ(got[i].id, want[i].id) << q << " alpha " << alpha << " rank " << i;
                    ASSERT_NEAR(got[i].s_origin, want[i].score, 1e-12);
                    ASSERT_NEAR(got[i].s_origin, alpha * got[i].dense + (1 - alpha) * got[i].sparse, 1e-12);
                }
            }
        }
    }
}

TEST(HybridSearch, DenseFloorDropsWeakMatches) {
    Store s;
    s.upsert_record(rec("a", "green tea"));
    s.upsert_record(rec("b", "chess opening theory"));
    const auto hits = s.hybrid_search("quantum chromodynamics", 5, {}, kEmbed);
    EXPECT_TRUE(hits.empty());
}

// --- late interaction ----------------------------------------------------

TEST(LateInteraction, QuantizeCodesAndScale) {
    const Vector v{0.5F, -1.0F, 0.25F, 0.0F};
    const auto q = quantize(v);
    EXPECT_DOUBLE_EQ(q.scale, 1.0 / 127.0);
    EXPECT_EQ(q.codes, (std::vector<std::int8_t>{64, -127, 32, 0}));
    const auto zero = quantize(Vector(4, 0.0F));
    EXPECT_EQ(zero.scale, 0.0);
    EXPECT_EQ(dequantize(zero), Vector(4, 0.0F));
}

TEST(LateInteraction, MaxSimDefinition) {
    const std::vector<Vector> q{{1, 0}, {0, 1}};
    const std::vector<Vector> d{{0.6F, 0.8F}, {1, 0}};
    EXPECT_NEAR(maxsim(q, d), 1.0 + 0.8, 1e-7);
    EXPECT_THROW(maxsim(q, {}), Error);
}

TEST(LateInteraction, MergeTokens) {
    const Vector x{1, 0, 0}, y{0, 1, 0};
    const auto merged = merge_tokens({x, x, x, y, y, x}, 0.95);
    ASSERT_EQ(merged.size(), 3u);
    EXPECT_EQ(merged[0], x);
    EXPECT_EQ(merged[1], y);
    EXPECT_EQ(merged[2], x);
    // a threshold of 1 never merges unit vectors
    EXPECT_EQ(merge_tokens({x, x}, 1.0).size(), 2u);
    EXPECT_TRUE(merge_tokens({}, 0.5).empty());
}

// |exact - quantized| <= sum over query tokens of max_d (|q|_1 s_d/2 + |d~|_1 s_q/2)
TEST(LateInteraction, QuantizationErrorBound) {
    std::mt19937_64 rng(41);
    for (int c = 0; c < 1000; ++c) {
        const std::size_t dim = 8 + rng() % 120, nq = 1 + rng() % 12, nd = 1 + rng() % 24;
        const auto q = random_unit_tokens(rng, nq, dim);
        const auto d = random_unit_tokens(rng, nd, dim);
        const auto qq = quantize_tokens(q), dq = quantize_tokens(d);
        double eps = 0.0;
        for (std::size_t i = 0; i < nq; ++i) {
            double l1q = 0;
            for (float x : q[i]) l1q += std::fabs(x);
            double worst = 0.0;
            for (std::size_t j = 0; j < nd; ++j) {
                double l1d = 0;
                for (auto code : dq[j].codes) l1d += std::abs(code) * dq[j].scale;
                worst = std::max(worst, l1q * dq[j].scale / 2 + l1d * qq[i].scale / 2);
            }
            eps += worst;
        }
        const double err = std::fabs(maxsim(q, d) - maxsim_quantized(qq, dq));
        ASSERT_LE(err, eps + 1e-9) << "case " << c;
    }
}

TEST(LateInteraction, StoreKeepsCompressedTokens) {
    Store s;
    s.upsert_record(rec("a", "tea tea tea tea coffee"));
    const auto ct = s.compressed_tokens("a");
    ASSERT_TRUE(ct);
    const auto raw = s.get_record("a")->tokens;
    EXPECT_LE(ct->size(), raw.size());
    EXPECT_EQ(*ct, compress_tokens(raw, s.token_merge_threshold()));
    EXPECT_FALSE(s.compressed_tokens("zzz"));
}

// --- TTL -------------------------------------------------------------------

TEST(Ttl, ExpireNeedsDeadlineSummaryAndNoReinforcement) {
    Store s;
    for (auto id : {"e1", "e2", "e3", "e4", "sum"}) s.upsert_record(rec(id, std::string("text ") + id));
    s.set_summary("e1", "sum", 100);
    s.set_summary("e2", "sum", 100);
    s.set_summary("e3", "gone", 100);
    s.set_summary("e4", "sum", 500);
    s.reinforce("e2");
    EXPECT_TRUE(s.expire(100).empty());  // deadline is inclusive
    EXPECT_EQ(s.expire(101), std::vector<std::string>{"e1"});
    EXPECT_TRUE(s.get_record("e2"));
    EXPECT_FALSE(s.get_record("e2")->ttl_deadline);
    EXPECT_TRUE(s.get_record("e3"));
    EXPECT_TRUE(s.get_record("e4"));
    EXPECT_EQ(s.expire(1000), std::vector<std::string>{"e4"});
    EXPECT_TRUE(s.check_invariants().empty());
}

TEST(Ttl, ReinforcedRecordIgnoresLaterSummary) {
    Store s;
    s.upsert_record(rec("e1", "text"));
    s.upsert_record(rec("sum", "summary"));
    s.reinforce("e1");
    s.set_summary("e1", "sum", 10);
    EXPECT_FALSE(s.get_record("e1")->ttl_deadline);
    EXPECT_TRUE(s.expire(1000).empty());
    EXPECT_THROW(s.reinforce("nope"), Error);
}
