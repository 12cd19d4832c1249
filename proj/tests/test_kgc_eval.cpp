#include <catch2/catch_amalgamated.hpp>

#include "kalign/kgc_eval.hpp"
#include "kalign/synthetic.hpp"
#include "oracles.hpp"
#include "test_helpers.hpp"

using namespace kalign;

namespace {

Mat<float> unit_rows(Rng& rng, Eigen::Index n, Eigen::Index d) {
    Mat<float> m(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < d; ++j) m(i, j) = static_cast<float>(normal(rng));
        m.row(i) /= m.row(i).norm();
    }
    return m;
}

// 5 entities, 1 relation. Train: (e0,r,e1), (e0,r,e2). Test: (e0,r,e3).
// Embeddings arranged so the query for (e0, r) scores e1 > e2 > e3 > e4 > e0,
// making the ranks hand-computable: unfiltered 3, filtered 1.
struct HandFixture {
    KnowledgeGraph kg;
    Mat<float> table;
    Mat<float> query;

    HandFixture() {
        for (int i = 0; i < 5; ++i) {
            Entity e;
            e.key = "e" + std::to_string(i);
            e.name = e.key;
            kg.entity_by_key.emplace(e.key, static_cast<EntityId>(i));
            kg.entities.push_back(e);
        }
        Relation r;
        r.key = "r";
        r.name = "r";
        kg.relation_by_key.emplace("r", 0);
        kg.relations.push_back(r);
        kg.n_original_relations = 1;
        kg.split(Split::Train) = {{0, 0, 1}, {0, 0, 2}};
        kg.split(Split::Valid) = {};
        kg.split(Split::Test) = {{0, 0, 3}};

        query.resize(1, 2);
        query << 1.0f, 0.0f;
        table.resize(5, 2);
        auto dir = [](double deg) {
            return std::pair<float, float>(static_cast<float>(std::cos(deg * 3.14159265 / 180.0)),
                                           static_cast<float>(std::sin(deg * 3.14159265 / 180.0)));
        };
        auto [c1, s1] = dir(10);   // e1: best
        auto [c2, s2] = dir(20);   // e2
        auto [c3, s3] = dir(30);   // e3: gold
        auto [c4, s4] = dir(50);   // e4
        auto [c0, s0] = dir(170);  // e0: worst
        table << c0, s0, c1, s1, c2, s2, c3, s3, c4, s4;
    }
};

}  // namespace

TEST_CASE("rank_gold basics and filtering semantics", "[kgc]") {
    Row<float> scores(5);
    scores << 0.1f, 0.9f, 0.5f, 0.8f, 0.2f;

    CHECK(rank_gold(scores, 1, {}) == 1);          // strictly highest
    CHECK(rank_gold(scores, 3, {}) == 2);          // e1 outscores
    CHECK(rank_gold(scores, 3, {1}) == 1);         // filtering removes the winner
    CHECK_THROWS(rank_gold(scores, 3, {3}));       // gold inside its own filter

    Row<float> tied(3);
    tied << 0.5f, 0.5f, 0.1f;
    CHECK(rank_gold(tied, 1, {}) == 1);                          // optimistic on ties
    CHECK(rank_gold(tied, 1, {}, /*pessimistic=*/true) == 2);    // pessimistic counts ties
}

TEST_CASE("rank_gold matches the full-sort oracle on random instances", "[kgc][oracle]") {
    Rng rng(101);
    for (int rep = 0; rep < 120; ++rep) {
        const std::size_t n_entities = 50;
        Row<float> scores(static_cast<Eigen::Index>(n_entities));
        std::vector<double> scores_d(n_entities);
        for (std::size_t e = 0; e < n_entities; ++e) {
            // coarse grid of scores so ties actually happen
            double v = static_cast<double>(uniform_index(rng, 8)) / 8.0;
            scores(static_cast<Eigen::Index>(e)) = static_cast<float>(v);
            scores_d[e] = static_cast<float>(v);
        }
        EntityId gold = static_cast<EntityId>(uniform_index(rng, n_entities));
        std::vector<EntityId> filter;
        for (std::size_t e = 0; e < n_entities; ++e)
            if (static_cast<EntityId>(e) != gold && uniform_real(rng) < 0.2)
                filter.push_back(static_cast<EntityId>(e));
        bool pessimistic = rep % 2 == 1;
        std::int64_t got = rank_gold(scores, gold, filter, pessimistic);
        long want = oracles::rank(scores_d, gold, filter, pessimistic);
        CHECK(got == want);
        // filtered rank can never exceed the unfiltered rank
        CHECK(rank_gold(scores, gold, filter, pessimistic) <=
              rank_gold(scores, gold, {}, pessimistic));
    }
}

TEST_CASE("hand-built 5-entity fixture: filtered vs unfiltered ranks", "[kgc]") {
    HandFixture fx;
    FilterIndex filter(fx.kg);
    Row<float> scores = score_against_table(fx.table, Row<float>(fx.query.row(0)), 2);

    // hand-computed: e1, e2 outscore the gold e3 but are known train triples
    CHECK(rank_gold(scores, 3, {}) == 3);
    std::vector<EntityId> excl;
    for (EntityId e : *filter.completions(0, 0))
        if (e != 3) excl.push_back(e);
    CHECK(rank_gold(scores, 3, excl) == 1);
}

TEST_CASE("embed_all_entities is index-aligned, unit-norm, deterministic", "[kgc]") {
    KnowledgeGraph kg = load_kg(test_helpers::write_toy_kg("kgc_embed"));
    std::vector<std::string> corpus;
    for (EntityId e = 0; e < kg.num_entities(); ++e) corpus.push_back(kg.entity_text(e));
    Vocab vocab = build_vocab(corpus, 512);
    ModelConfig mc;
    mc.n_layers = 2;
    mc.d_model = 32;
    mc.n_heads = 2;
    mc.d_ffn = 64;
    mc.max_seq_len = 64;
    mc.vocab_size = vocab.size();
    Model<float> model(mc);

    Mat<float> table = embed_all_entities(kg, model, vocab, 50);
    CHECK(table.rows() == 5);
    for (Eigen::Index i = 0; i < 5; ++i) CHECK(std::abs(table.row(i).norm() - 1.0f) < 1e-5f);

    Mat<float> again = embed_all_entities(kg, model, vocab, 50);
    CHECK((table - again).cwiseAbs().maxCoeff() == 0.0f);

    for (EntityId e = 0; e < 5; ++e) {
        Row<float> direct = model.embed(encode_view(kg.entity_text(e), View::T, vocab, 50));
        CHECK((table.row(e) - direct).cwiseAbs().maxCoeff() < 1e-5f);
    }
}

TEST_CASE("oracle-encoder rankings produce perfect metrics", "[kgc]") {
    KnowledgeGraph kg = augment_inverse(make_synthetic_kg());
    const auto& test = kg.split(Split::Test);
    Rng rng(103);
    Mat<float> table = unit_rows(rng, kg.num_entities(), 16);
    Mat<float> queries(static_cast<Eigen::Index>(test.size()), 16);
    for (std::size_t i = 0; i < test.size(); ++i)
        queries.row(static_cast<Eigen::Index>(i)) = table.row(test[i].tail);

    FilterIndex filter(kg);
    auto ranks = rank_queries(queries, table, test, filter);
    KgcMetrics m = metrics_from_ranks(ranks);
    CHECK(m.mr == 1.0);
    CHECK(m.mrr == 1.0);
    CHECK(m.hits1 == 1.0);
    CHECK(m.hits10 == 1.0);
}

TEST_CASE("random scoring lands near the null-model mean rank", "[kgc]") {
    KnowledgeGraph kg = augment_inverse(make_synthetic_kg());
    const auto& test = kg.split(Split::Test);
    FilterIndex filter(kg);
    std::vector<double> mrs;
    for (std::uint64_t seed : {11ull, 22ull, 33ull}) {
        Rng rng(seed);
        Mat<float> table = unit_rows(rng, kg.num_entities(), 24);
        Mat<float> queries = unit_rows(rng, static_cast<Eigen::Index>(test.size()), 24);
        KgcMetrics m = metrics_from_ranks(rank_queries(queries, table, test, filter));
        mrs.push_back(m.mr);
        CHECK(m.hits1 <= m.hits3);
        CHECK(m.hits3 <= m.hits10);
    }
    std::sort(mrs.begin(), mrs.end());
    double expected = static_cast<double>(kg.num_entities()) / 2.0;
    CHECK(mrs[1] > expected * 0.8);
    CHECK(mrs[1] < expected * 1.2);
}

TEST_CASE("evaluate_kgc aggregates per-direction and matches the reciprocal mean", "[kgc]") {
    KnowledgeGraph kg = augment_inverse(load_kg(test_helpers::write_toy_kg("kgc_eval")));
    std::vector<std::string> corpus;
    for (EntityId e = 0; e < kg.num_entities(); ++e) corpus.push_back(kg.entity_text(e));
    for (RelationId r = 0; r < kg.num_relations(); ++r) corpus.push_back(kg.relation_text(r));
    Vocab vocab = build_vocab(corpus, 512);
    ModelConfig mc;
    mc.n_layers = 2;
    mc.d_model = 32;
    mc.n_heads = 2;
    mc.d_ffn = 64;
    mc.max_seq_len = 64;
    mc.vocab_size = vocab.size();
    Model<float> model(mc);

    std::vector<QueryRecord> records;
    KgcEvalOptions opts;
    opts.records = &records;
    KgcMetrics m = evaluate_kgc(kg, model, vocab, Split::Test, opts);
    REQUIRE(records.size() == 4);  // 2 test triples, both directions

    // MRR equals the mean of per-query reciprocals
    KahanSum recip;
    for (const auto& r : records) recip.add(1.0 / static_cast<double>(r.rank));
    CHECK(m.mrr == Catch::Approx(recip.value() / 4.0).margin(1e-9));

    // direction decomposition: overall metrics equal the mean of the
    // per-direction metric sets (equal counts by construction)
    std::vector<std::int64_t> tail_ranks, head_ranks;
    for (const auto& r : records) (r.head_direction ? head_ranks : tail_ranks).push_back(r.rank);
    REQUIRE(tail_ranks.size() == head_ranks.size());
    KgcMetrics mt = metrics_from_ranks(tail_ranks);
    KgcMetrics mh = metrics_from_ranks(head_ranks);
    CHECK(m.mr == Catch::Approx((mt.mr + mh.mr) / 2.0).margin(1e-9));
    CHECK(m.mrr == Catch::Approx((mt.mrr + mh.mrr) / 2.0).margin(1e-9));
    CHECK(m.hits10 == Catch::Approx((mt.hits10 + mh.hits10) / 2.0).margin(1e-9));
}

TEST_CASE("evaluate_kgc requires an augmented graph and a non-empty split", "[kgc]") {
    KnowledgeGraph kg = load_kg(test_helpers::write_toy_kg("kgc_plain"));
    Vocab vocab = build_vocab({"a b c"}, 64);
    ModelConfig mc;
    mc.n_layers = 1;
    mc.d_model = 16;
    mc.n_heads = 2;
    mc.d_ffn = 32;
    mc.max_seq_len = 32;
    mc.vocab_size = vocab.size();
    Model<float> model(mc);
    CHECK_THROWS_WITH(evaluate_kgc(kg, model, vocab, Split::Test),
                      Catch::Matchers::ContainsSubstring("augmented"));

    KnowledgeGraph aug = augment_inverse(kg);
    aug.split(Split::Test).clear();
    CHECK_THROWS_WITH(evaluate_kgc(aug, model, vocab, Split::Test),
                      Catch::Matchers::ContainsSubstring("empty"));
}
