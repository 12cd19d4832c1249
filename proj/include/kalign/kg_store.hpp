#pragma once
// Knowledge graph storage: TSV loading/validation, inverse-relation
// augmentation, and the paired-view training corpus.
//
// On-disk layout of a dataset directory:
//   entities.tsv   entity_key <TAB> display_name <TAB> description
//   relations.tsv  relation_key <TAB> description
//   train.tsv / valid.tsv / test.tsv
//                  head_key <TAB> relation_key <TAB> tail_key
// UTF-8, LF line endings, no header row. Ids are assigned in file order.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "kalign/common.hpp"

namespace kalign {

using EntityId = std::int32_t;
using RelationId = std::int32_t;

struct Entity {
    std::string key;
    std::string name;
    std::string description;  // may be empty; callers fall back to name
};

struct Relation {
    std::string key;
    std::string name;
    std::string description;
};

struct Triple {
    EntityId head = 0;
    RelationId relation = 0;
    EntityId tail = 0;

    bool operator==(const Triple&) const = default;
};

enum class Split { Train = 0, Valid = 1, Test = 2 };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Valid: return "valid";
        default: return "test";
    }
}

struct KnowledgeGraph {
    std::vector<Entity> entities;
    std::vector<Relation> relations;  // originals first, then inverses once augmented
    std::int32_t n_original_relations = 0;
    std::array<std::vector<Triple>, 3> splits;
    bool inverse_augmented = false;

    std::unordered_map<std::string, EntityId> entity_by_key;
    std::unordered_map<std::string, RelationId> relation_by_key;

    const std::vector<Triple>& split(Split s) const { return splits[static_cast<int>(s)]; }
    std::vector<Triple>& split(Split s) { return splits[static_cast<int>(s)]; }

    std::int32_t num_entities() const { return static_cast<std::int32_t>(entities.size()); }
    std::int32_t num_relations() const { return static_cast<std::int32_t>(relations.size()); }

    // Effective texts: empty description falls back to the display name.
    const std::string& entity_text(EntityId e) const {
        const Entity& ent = entities.at(static_cast<std::size_t>(e));
        return ent.description.empty() ? ent.name : ent.description;
    }
    const std::string& relation_text(RelationId r) const {
        const Relation& rel = relations.at(static_cast<std::size_t>(r));
        return rel.description.empty() ? rel.name : rel.description;
    }

    RelationId inverse_of(RelationId r) const {
        require(inverse_augmented, "inverse_of: graph is not inverse-augmented");
        if (r < n_original_relations) return r + n_original_relations;
        return r - n_original_relations;
    }
};

// The two textual views of one fact: head+relation text vs tail text.
struct KnowledgePair {
    std::string hr_text;
    std::string t_text;
    Triple source;
};

namespace detail {

inline std::vector<std::string> read_lines(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    require(in.good(), "load error: missing or unreadable file " + file.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

// Splits into at most `max_fields` fields; the last field keeps any
// remaining tabs (descriptions may contain them).
inline std::vector<std::string> split_tsv(const std::string& line, std::size_t max_fields) {
    std::vector<std::string> fields;
    std::size_t pos = 0;
    while (fields.size() + 1 < max_fields) {
        std::size_t tab = line.find('\t', pos);
        if (tab == std::string::npos) break;
        fields.push_back(line.substr(pos, tab - pos));
        pos = tab + 1;
    }
    fields.push_back(line.substr(pos));
    return fields;
}

}  // namespace detail

inline KnowledgeGraph load_kg(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    KnowledgeGraph kg;

    auto entity_lines = detail::read_lines(dir / "entities.tsv");
    for (std::size_t i = 0; i < entity_lines.size(); ++i) {
        if (entity_lines[i].empty()) continue;
        auto f = detail::split_tsv(entity_lines[i], 3);
        require(f.size() == 3, "validation error: entities.tsv line " + std::to_string(i + 1) +
                                   ": expected 3 tab-separated fields");
        require(!f[0].empty() && !f[1].empty(), "validation error: entities.tsv line " +
                                                    std::to_string(i + 1) +
                                                    ": empty key or display name");
        require(!kg.entity_by_key.count(f[0]), "validation error: entities.tsv line " +
                                                   std::to_string(i + 1) + ": duplicate key " + f[0]);
        kg.entity_by_key.emplace(f[0], static_cast<EntityId>(kg.entities.size()));
        kg.entities.push_back(Entity{f[0], f[1], f[2]});
    }
    require(!kg.entities.empty(), "validation error: entities.tsv has no entities");

    auto relation_lines = detail::read_lines(dir / "relations.tsv");
    for (std::size_t i = 0; i < relation_lines.size(); ++i) {
        if (relation_lines[i].empty()) continue;
        auto f = detail::split_tsv(relation_lines[i], 2);
        require(f.size() == 2, "validation error: relations.tsv line " + std::to_string(i + 1) +
                                   ": expected 2 tab-separated fields");
        require(!f[0].empty(), "validation error: relations.tsv line " + std::to_string(i + 1) +
                                   ": empty key");
        require(!kg.relation_by_key.count(f[0]), "validation error: relations.tsv line " +
                                                     std::to_string(i + 1) + ": duplicate key " + f[0]);
        kg.relation_by_key.emplace(f[0], static_cast<RelationId>(kg.relations.size()));
        kg.relations.push_back(Relation{f[0], f[0], f[1]});
    }
    require(!kg.relations.empty(), "validation error: relations.tsv has no relations");
    kg.n_original_relations = kg.num_relations();

    for (Split s : {Split::Train, Split::Valid, Split::Test}) {
        std::string fname = std::string(split_name(s)) + ".tsv";
        auto lines = detail::read_lines(dir / fname);
        std::unordered_set<std::uint64_t> seen;
        auto& out = kg.split(s);
        for (std::size_t i = 0; i < lines.size(); ++i) {
            if (lines[i].empty()) continue;
            auto f = detail::split_tsv(lines[i], 3);
            require(f.size() == 3, "validation error: " + fname + " line " + std::to_string(i + 1) +
                                       ": expected 3 tab-separated fields");
            auto he = kg.entity_by_key.find(f[0]);
            require(he != kg.entity_by_key.end(), "validation error: " + fname + " line " +
                                                      std::to_string(i + 1) + ": unknown head entity " + f[0]);
            auto re = kg.relation_by_key.find(f[1]);
            require(re != kg.relation_by_key.end(), "validation error: " + fname + " line " +
                                                        std::to_string(i + 1) + ": unknown relation " + f[1]);
            auto te = kg.entity_by_key.find(f[2]);
            require(te != kg.entity_by_key.end(), "validation error: " + fname + " line " +
                                                      std::to_string(i + 1) + ": unknown tail entity " + f[2]);
            Triple t{he->second, re->second, te->second};
            std::uint64_t code = (static_cast<std::uint64_t>(t.head) << 40) ^
                                 (static_cast<std::uint64_t>(t.relation) << 20) ^
                                 static_cast<std::uint64_t>(t.tail);
            require(seen.insert(code).second, "validation error: " + fname + " line " +
                                                  std::to_string(i + 1) + ": duplicate triple");
            out.push_back(t);
        }
    }
    return kg;
}

// Canonical writer (current id order). Defined for unaugmented graphs only,
// so load -> save round-trips to the original files.
inline void save_kg(const KnowledgeGraph& kg, const std::filesystem::path& dir) {
    require(!kg.inverse_augmented, "save_kg: refusing to persist an inverse-augmented graph");
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    {
        std::ofstream out(dir / "entities.tsv", std::ios::binary);
        require(out.good(), "save_kg: cannot write " + (dir / "entities.tsv").string());
        for (const auto& e : kg.entities) out << e.key << '\t' << e.name << '\t' << e.description << '\n';
    }
    {
        std::ofstream out(dir / "relations.tsv", std::ios::binary);
        require(out.good(), "save_kg: cannot write " + (dir / "relations.tsv").string());
        for (const auto& r : kg.relations) out << r.key << '\t' << r.description << '\n';
    }
    for (Split s : {Split::Train, Split::Valid, Split::Test}) {
        std::string fname = std::string(split_name(s)) + ".tsv";
        std::ofstream out(dir / fname, std::ios::binary);
        require(out.good(), "save_kg: cannot write " + (dir / fname).string());
        for (const auto& t : kg.split(s))
            out << kg.entities[static_cast<std::size_t>(t.head)].key << '\t'
                << kg.relations[static_cast<std::size_t>(t.relation)].key << '\t'
                << kg.entities[static_cast<std::size_t>(t.tail)].key << '\n';
    }
}

// Adds (t, r_inv, h) for every (h, r, t). Inverse relation ids are the
// original id shifted by |R_orig|; their texts carry the "inverse " prefix.
inline KnowledgeGraph augment_inverse(const KnowledgeGraph& kg) {
    require(!kg.inverse_augmented, "augment_inverse: graph is already augmented");
    KnowledgeGraph out = kg;
    out.inverse_augmented = true;
    std::int32_t n_rel = kg.n_original_relations;
    for (std::int32_t r = 0; r < n_rel; ++r) {
        const Relation& orig = kg.relations[static_cast<std::size_t>(r)];
        Relation inv;
        inv.key = "inverse_" + orig.key;
        inv.name = "inverse " + orig.name;
        inv.description = "inverse " + kg.relation_text(r);
        require(!out.relation_by_key.count(inv.key),
                "augment_inverse: relation key collision on " + inv.key);
        out.relation_by_key.emplace(inv.key, static_cast<RelationId>(out.relations.size()));
        out.relations.push_back(std::move(inv));
    }
    for (auto& split : out.splits) {
        std::size_t n = split.size();
        split.reserve(2 * n);
        for (std::size_t i = 0; i < n; ++i) {
            const Triple& t = split[i];
            split.push_back(Triple{t.tail, t.relation + n_rel, t.head});
        }
    }
    return out;
}

// hr_text is head text, a single space, then relation text.
inline KnowledgePair make_pair(const Triple& t, const KnowledgeGraph& kg) {
    KnowledgePair p;
    p.hr_text = kg.entity_text(t.head) + " " + kg.relation_text(t.relation);
    p.t_text = kg.entity_text(t.tail);
    p.source = t;
    return p;
}

inline std::vector<KnowledgePair> make_pairs(const std::vector<Triple>& triples,
                                             const KnowledgeGraph& kg) {
    std::vector<KnowledgePair> pairs;
    pairs.reserve(triples.size());
    for (const Triple& t : triples) pairs.push_back(make_pair(t, kg));
    return pairs;
}

}  // namespace kalign
