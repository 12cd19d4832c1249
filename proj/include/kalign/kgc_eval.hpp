#pragma once
// Embedding-based knowledge graph completion under the filtered setting.
// Every entity is scored as a candidate tail; head-direction queries are
// tail-direction queries over the inverse-augmented triples, so one pass
// over the augmented test split covers both directions.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "kalign/common.hpp"
#include "kalign/encoder.hpp"
#include "kalign/kg_store.hpp"
#include "kalign/text_pipeline.hpp"

namespace kalign {

struct KgcMetrics {
    double mr = 0.0;
    double mrr = 0.0;
    double hits1 = 0.0;
    double hits3 = 0.0;
    double hits10 = 0.0;
    std::int64_t query_count = 0;

    void validate() const {
        require(query_count > 0, "KgcMetrics: no queries");
        require(mr >= 1.0, "KgcMetrics: MR must be >= 1");
        require(mrr > 0.0 && mrr <= 1.0, "KgcMetrics: MRR must be in (0,1]");
        require(hits1 <= hits3 + 1e-12 && hits3 <= hits10 + 1e-12 && hits10 <= 1.0 + 1e-12,
                "KgcMetrics: Hits@k must be monotone");
    }
};

struct QueryRecord {
    Triple triple;      // in augmented-relation terms
    bool head_direction = false;
    std::int64_t rank = 0;
};

// (entity, augmented relation) -> all true completions across splits.
class FilterIndex {
public:
    explicit FilterIndex(const KnowledgeGraph& kg) {
        for (const auto& split : kg.splits)
            for (const Triple& t : split) map_[key(t.head, t.relation)].push_back(t.tail);
    }

    const std::vector<EntityId>* completions(EntityId e, RelationId r) const {
        auto it = map_.find(key(e, r));
        return it == map_.end() ? nullptr : &it->second;
    }

private:
    static std::uint64_t key(EntityId e, RelationId r) {
        return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(e)) << 32) |
               static_cast<std::uint32_t>(r);
    }
    std::unordered_map<std::uint64_t, std::vector<EntityId>> map_;
};

// Tail-view embeddings for every entity, index-aligned with entity ids.
template <typename S>
Mat<S> embed_all_entities(const KnowledgeGraph& kg, const Model<S>& model, const Vocab& vocab,
                          std::int32_t max_len) {
    Mat<S> table(kg.num_entities(), model.config().d_model);
    for (EntityId e = 0; e < kg.num_entities(); ++e)
        table.row(e) = model.embed(encode_view(kg.entity_text(e), View::T, vocab, max_len));
    return table;
}

// 1-based filtered rank of the gold entity. Optimistic ties by default:
// only strictly higher scores push the gold down; pessimistic mode also
// counts ties.
template <typename S>
std::int64_t rank_gold(const Row<S>& scores, EntityId gold, const std::vector<EntityId>& filter,
                       bool pessimistic = false) {
    for (EntityId f : filter)
        require(f != gold, "rank_gold: gold entity present in its own filter set");
    std::vector<char> filtered(static_cast<std::size_t>(scores.size()), 0);
    for (EntityId f : filter) filtered[static_cast<std::size_t>(f)] = 1;
    const S gold_score = scores(gold);
    std::int64_t higher = 0;
    for (Eigen::Index e = 0; e < scores.size(); ++e) {
        if (e == gold || filtered[static_cast<std::size_t>(e)]) continue;
        if (scores(e) > gold_score || (pessimistic && scores(e) == gold_score)) ++higher;
    }
    return 1 + higher;
}

struct KgcEvalOptions {
    std::int32_t max_desc_len = 50;
    bool pessimistic_ties = false;
    std::int32_t block_size = 4096;      // entity-table scoring block
    std::int64_t max_queries = 0;        // 0 = all (prefix of the split otherwise)
    std::vector<QueryRecord>* records = nullptr;
};

template <typename S>
Row<S> score_against_table(const Mat<S>& table, const Row<S>& query, std::int32_t block_size) {
    Row<S> scores(table.rows());
    const Eigen::Index block = std::max<Eigen::Index>(1, block_size);
    for (Eigen::Index start = 0; start < table.rows(); start += block) {
        Eigen::Index n = std::min(block, table.rows() - start);
        scores.segment(start, n).noalias() = query * table.middleRows(start, n).transpose();
    }
    return scores;
}

// Metrics from a list of precomputed ranks.
inline KgcMetrics metrics_from_ranks(const std::vector<std::int64_t>& ranks) {
    require(!ranks.empty(), "metrics_from_ranks: no queries");
    KahanSum mr, mrr, h1, h3, h10;
    for (std::int64_t rk : ranks) {
        mr.add(static_cast<double>(rk));
        mrr.add(1.0 / static_cast<double>(rk));
        h1.add(rk <= 1 ? 1.0 : 0.0);
        h3.add(rk <= 3 ? 1.0 : 0.0);
        h10.add(rk <= 10 ? 1.0 : 0.0);
    }
    const double n = static_cast<double>(ranks.size());
    KgcMetrics m;
    m.query_count = static_cast<std::int64_t>(ranks.size());
    m.mr = mr.value() / n;
    m.mrr = mrr.value() / n;
    m.hits1 = h1.value() / n;
    m.hits3 = h3.value() / n;
    m.hits10 = h10.value() / n;
    m.validate();
    return m;
}

// Ranking core over precomputed embeddings: one query row per triple,
// scored against the full entity table under the filtered setting.
template <typename S>
std::vector<std::int64_t> rank_queries(const Mat<S>& queries, const Mat<S>& table,
                                       const std::vector<Triple>& triples,
                                       const FilterIndex& filter, const KgcEvalOptions& opts = {}) {
    require(queries.rows() == static_cast<Eigen::Index>(triples.size()),
            "rank_queries: query/triple count mismatch");
    std::vector<std::int64_t> ranks;
    ranks.reserve(triples.size());
    for (std::size_t qi = 0; qi < triples.size(); ++qi) {
        const Triple& t = triples[qi];
        Row<S> query = queries.row(static_cast<Eigen::Index>(qi));
        Row<S> scores = score_against_table(table, query, opts.block_size);
        std::vector<EntityId> excl;
        if (const auto* known = filter.completions(t.head, t.relation))
            for (EntityId e : *known)
                if (e != t.tail) excl.push_back(e);
        ranks.push_back(rank_gold(scores, t.tail, excl, opts.pessimistic_ties));
    }
    return ranks;
}

template <typename S>
KgcMetrics evaluate_kgc(const KnowledgeGraph& kg, const Model<S>& model, const Vocab& vocab,
                        Split split, const KgcEvalOptions& opts = {}) {
    require(kg.inverse_augmented, "evaluate_kgc: graph must be inverse-augmented");
    const auto& all_triples = kg.split(split);
    require(!all_triples.empty(), "evaluate_kgc: empty evaluation split");

    std::int64_t n = static_cast<std::int64_t>(all_triples.size());
    if (opts.max_queries > 0) n = std::min<std::int64_t>(n, opts.max_queries);
    std::vector<Triple> triples(all_triples.begin(), all_triples.begin() + n);
    const std::int64_t half = static_cast<std::int64_t>(all_triples.size()) / 2;

    Mat<S> table = embed_all_entities(kg, model, vocab, opts.max_desc_len);
    Mat<S> queries(n, model.config().d_model);
    for (std::int64_t qi = 0; qi < n; ++qi) {
        const Triple& t = triples[static_cast<std::size_t>(qi)];
        std::string hr_text = kg.entity_text(t.head) + " " + kg.relation_text(t.relation);
        queries.row(qi) = model.embed(encode_view(hr_text, View::HR, vocab, opts.max_desc_len));
    }

    FilterIndex filter(kg);
    std::vector<std::int64_t> ranks = rank_queries(queries, table, triples, filter, opts);
    if (opts.records)
        for (std::int64_t qi = 0; qi < n; ++qi)
            opts.records->push_back({triples[static_cast<std::size_t>(qi)], qi >= half,
                                     ranks[static_cast<std::size_t>(qi)]});
    return metrics_from_ranks(ranks);
}

}  // namespace kalign
