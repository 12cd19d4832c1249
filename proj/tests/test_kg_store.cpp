#include <catch2/catch_amalgamated.hpp>

#include "kalign/kg_store.hpp"
#include "kalign/synthetic.hpp"
#include "test_helpers.hpp"

using namespace kalign;
namespace fs = std::filesystem;

TEST_CASE("load_kg resolves ids and counts", "[kg_store]") {
    auto dir = test_helpers::write_toy_kg();
    KnowledgeGraph kg = load_kg(dir);
    CHECK(kg.num_entities() == 5);
    CHECK(kg.num_relations() == 2);
    CHECK(kg.split(Split::Train).size() == 6);
    CHECK(kg.split(Split::Valid).size() == 2);
    CHECK(kg.split(Split::Test).size() == 2);
    CHECK_FALSE(kg.inverse_augmented);

    const Triple& t = kg.split(Split::Train)[0];
    CHECK(kg.entities[static_cast<std::size_t>(t.head)].key == "salviniaceae");
    CHECK(kg.relations[static_cast<std::size_t>(t.relation)].key == "member_meronym");
    CHECK(kg.entities[static_cast<std::size_t>(t.tail)].key == "salvinia");
}

TEST_CASE("load_kg errors name the offending file and line", "[kg_store]") {
    SECTION("missing file") {
        auto dir = test_helpers::fresh_dir("missing");
        CHECK_THROWS_WITH(load_kg(dir), Catch::Matchers::ContainsSubstring("entities.tsv"));
    }
    SECTION("dangling id") {
        auto dir = test_helpers::write_toy_kg("dangling");
        test_helpers::write_file(dir / "test.tsv", "appliance\thypernym\tnot_an_entity\n");
        CHECK_THROWS_WITH(load_kg(dir), Catch::Matchers::ContainsSubstring("test.tsv line 1"));
    }
    SECTION("duplicate triple in a split") {
        auto dir = test_helpers::write_toy_kg("dup");
        test_helpers::write_file(dir / "valid.tsv",
                                 "refrigerator\thypernym\twhite_goods\n"
                                 "refrigerator\thypernym\twhite_goods\n");
        CHECK_THROWS_WITH(load_kg(dir), Catch::Matchers::ContainsSubstring("duplicate triple"));
    }
}

TEST_CASE("save/load round-trips byte-identically", "[kg_store]") {
    auto dir = test_helpers::write_toy_kg("roundtrip_src");
    KnowledgeGraph kg = load_kg(dir);
    auto dir2 = test_helpers::fresh_dir("roundtrip_dst");
    save_kg(kg, dir2);
    for (const char* f : {"entities.tsv", "relations.tsv", "train.tsv", "valid.tsv", "test.tsv"}) {
        std::ifstream a(dir / f, std::ios::binary), b(dir2 / f, std::ios::binary);
        std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
        std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
        CHECK(sa == sb);
    }
}

TEST_CASE("augment_inverse doubles relations and triples", "[kg_store]") {
    KnowledgeGraph kg = load_kg(test_helpers::write_toy_kg("aug"));
    KnowledgeGraph aug = augment_inverse(kg);
    CHECK(aug.inverse_augmented);
    CHECK(aug.num_relations() == 4);
    CHECK(aug.split(Split::Train).size() == 12);
    CHECK(aug.split(Split::Valid).size() == 4);
    CHECK(aug.split(Split::Test).size() == 4);

    // description carries the "inverse " prefix
    RelationId hyper = aug.relation_by_key.at("hypernym");
    RelationId inv = aug.inverse_of(hyper);
    CHECK(aug.relations[static_cast<std::size_t>(inv)].description == "inverse hypernym");
    CHECK(aug.inverse_of(inv) == hyper);

    // every companion (t, r_inv, h) exists in the same split as (h, r, t)
    for (int s = 0; s < 3; ++s) {
        const auto& split = aug.splits[static_cast<std::size_t>(s)];
        std::size_t n = split.size() / 2;
        for (std::size_t i = 0; i < n; ++i) {
            const Triple& orig = split[i];
            const Triple& comp = split[i + n];
            CHECK(comp.head == orig.tail);
            CHECK(comp.tail == orig.head);
            CHECK(comp.relation == aug.inverse_of(orig.relation));
        }
    }

    CHECK_THROWS_WITH(augment_inverse(aug), Catch::Matchers::ContainsSubstring("already augmented"));
}

TEST_CASE("make_pairs applies the concatenation and fallback rules", "[kg_store]") {
    KnowledgeGraph kg = load_kg(test_helpers::write_toy_kg("pairs"));
    auto pairs = make_pairs(kg.split(Split::Train), kg);
    REQUIRE(pairs.size() == 6);

    // (salviniaceae, member meronym, salvinia)
    CHECK(pairs[0].hr_text ==
          "aquatic ferns of the family salviniaceae member meronym");
    CHECK(pairs[0].t_text == "type genus of the salviniaceae");

    // white_goods has an empty description: display-name fallback
    CHECK(pairs[1].t_text == "white goods");

    CHECK(make_pairs({}, kg).empty());

    // pairs sharing one tail produce identical t_text
    std::vector<Triple> shared = {kg.split(Split::Train)[2], kg.split(Split::Train)[3],
                                  kg.split(Split::Train)[5]};
    auto sp = make_pairs(shared, kg);
    CHECK(sp[0].t_text == sp[1].t_text);
    CHECK(sp[1].t_text == sp[2].t_text);
}

TEST_CASE("make_pairs length equals input length on random toy KGs", "[kg_store][property]") {
    Rng rng(123);
    KnowledgeGraph kg = make_synthetic_kg();
    const auto& train = kg.split(Split::Train);
    for (int rep = 0; rep < 20; ++rep) {
        std::size_t n = uniform_index(rng, train.size());
        std::vector<Triple> subset(train.begin(), train.begin() + static_cast<std::ptrdiff_t>(n));
        CHECK(make_pairs(subset, kg).size() == subset.size());
    }
}

TEST_CASE("synthetic KG has the advertised shape", "[kg_store]") {
    KnowledgeGraph kg = make_synthetic_kg();
    CHECK(kg.num_entities() == 200);
    CHECK(kg.num_relations() == 8);
    CHECK(kg.split(Split::Train).size() == 1500);
    CHECK(kg.split(Split::Valid).size() == 50);
    CHECK(kg.split(Split::Test).size() == 50);
}
