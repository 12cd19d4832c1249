#pragma once
// Synthetic knowledge graphs with compositional regularities. Entities are
// a grid of (group, member) cells named by two word lists; each relation k
// maps e(g, m) -> e(g + k mod G, m + s_k mod M) for a fixed member stride
// s_k != 0, so every relation is a total bijection the encoder can learn
// compositionally. Held-out triples are novel (head, relation) combinations
// whose group/member displacements were seen elsewhere in training.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "kalign/common.hpp"
#include "kalign/kg_store.hpp"

namespace kalign {

struct SyntheticKgOptions {
    std::int32_t n_groups = 20;
    std::int32_t group_size = 10;
    std::int32_t n_relations = 8;
    std::int32_t n_valid = 50;
    std::int32_t n_test = 50;
    std::uint64_t seed = 7;
};

namespace synth_detail {

inline const std::vector<std::string>& group_words() {
    static const std::vector<std::string> w = {
        "amber",  "basalt", "cedar",  "dune",   "ember",   "fjord",  "garnet", "heath",
        "iris",   "jasper", "krill",  "lichen", "marble",  "nectar", "onyx",   "pumice",
        "quartz", "reef",   "sage",   "tundra", "umber",   "vellum", "willow", "zephyr"};
    return w;
}

inline const std::vector<std::string>& member_words() {
    static const std::vector<std::string> w = {"one", "two",   "three", "four", "five", "six",
                                               "seven", "eight", "nine",  "ten",  "eleven",
                                               "twelve"};
    return w;
}

inline const std::vector<std::string>& relation_words() {
    static const std::vector<std::string> w = {"alpha",  "bravo", "charlie", "delta",
                                               "echo",   "foxtrot", "golf",  "hotel",
                                               "india",  "juliett"};
    return w;
}

}  // namespace synth_detail

inline KnowledgeGraph make_synthetic_kg(const SyntheticKgOptions& opts = {}) {
    const auto& gw = synth_detail::group_words();
    const auto& mw = synth_detail::member_words();
    const auto& rw = synth_detail::relation_words();
    require(opts.n_groups >= 2 && static_cast<std::size_t>(opts.n_groups) <= gw.size(),
            "make_synthetic_kg: unsupported group count");
    require(opts.group_size >= 2 && static_cast<std::size_t>(opts.group_size) <= mw.size(),
            "make_synthetic_kg: unsupported group size");
    require(opts.n_relations >= 1 && static_cast<std::size_t>(opts.n_relations) <= rw.size() &&
                opts.n_relations < opts.n_groups,
            "make_synthetic_kg: unsupported relation count");

    KnowledgeGraph kg;
    for (std::int32_t g = 0; g < opts.n_groups; ++g)
        for (std::int32_t m = 0; m < opts.group_size; ++m) {
            Entity e;
            e.key = "e" + std::to_string(g) + "_" + std::to_string(m);
            e.name = gw[static_cast<std::size_t>(g)] + " " + mw[static_cast<std::size_t>(m)];
            e.description = e.name;
            kg.entity_by_key.emplace(e.key, static_cast<EntityId>(kg.entities.size()));
            kg.entities.push_back(std::move(e));
        }
    for (std::int32_t r = 0; r < opts.n_relations; ++r) {
        Relation rel;
        rel.key = rw[static_cast<std::size_t>(r)];
        rel.name = rel.key;
        rel.description = rel.key + " link";
        kg.relation_by_key.emplace(rel.key, static_cast<RelationId>(kg.relations.size()));
        kg.relations.push_back(std::move(rel));
    }
    kg.n_original_relations = opts.n_relations;

    // member stride per relation, never zero so no relation is an identity
    auto member_stride = [&](std::int32_t r) {
        std::int32_t s = static_cast<std::int32_t>((3 * (r + 1)) % opts.group_size);
        return s == 0 ? 1 : s;
    };
    std::vector<Triple> all;
    for (std::int32_t r = 0; r < opts.n_relations; ++r)
        for (std::int32_t g = 0; g < opts.n_groups; ++g)
            for (std::int32_t m = 0; m < opts.group_size; ++m) {
                std::int32_t tg = (g + r + 1) % opts.n_groups;
                std::int32_t tm = (m + member_stride(r)) % opts.group_size;
                Triple t;
                t.head = g * opts.group_size + m;
                t.relation = r;
                t.tail = tg * opts.group_size + tm;
                all.push_back(t);
            }

    Rng rng(derive_seed(opts.seed, "synth_split"));
    shuffle_deterministic(all, rng);
    std::size_t n_holdout = static_cast<std::size_t>(opts.n_valid + opts.n_test);
    require(all.size() > n_holdout, "make_synthetic_kg: holdout larger than triple universe");
    for (std::size_t i = 0; i < all.size(); ++i) {
        if (i < static_cast<std::size_t>(opts.n_valid))
            kg.split(Split::Valid).push_back(all[i]);
        else if (i < n_holdout)
            kg.split(Split::Test).push_back(all[i]);
        else
            kg.split(Split::Train).push_back(all[i]);
    }
    return kg;
}

// Word-salad sentences over the generator's lexicon; used as an in-vocab
// probe corpus and as the fixed description corpus for the asymptotics
// harness.
inline std::vector<std::string> make_probe_sentences(std::int32_t n, std::int32_t min_words,
                                                     std::int32_t max_words, std::uint64_t seed) {
    require(n >= 1 && min_words >= 1 && max_words >= min_words, "make_probe_sentences: bad sizes");
    std::vector<std::string> lexicon;
    for (const auto& w : synth_detail::group_words()) lexicon.push_back(w);
    for (const auto& w : synth_detail::member_words()) lexicon.push_back(w);
    for (const auto& w : synth_detail::relation_words()) lexicon.push_back(w);

    Rng rng(derive_seed(seed, "probe"));
    std::vector<std::string> out;
    out.reserve(static_cast<std::size_t>(n));
    for (std::int32_t i = 0; i < n; ++i) {
        std::int32_t len = min_words + static_cast<std::int32_t>(uniform_index(
                                           rng, static_cast<std::uint64_t>(max_words - min_words + 1)));
        std::string s;
        for (std::int32_t w = 0; w < len; ++w) {
            if (w > 0) s += " ";
            s += lexicon[static_cast<std::size_t>(uniform_index(rng, lexicon.size()))];
        }
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace kalign
