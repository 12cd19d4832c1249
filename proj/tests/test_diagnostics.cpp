#include <catch2/catch_amalgamated.hpp>

#include "kalign/diagnostics.hpp"
#include "kalign/synthetic.hpp"
#include "oracles.hpp"
#include "test_helpers.hpp"

using namespace kalign;

namespace {

MatD random_unit_rows(Rng& rng, Eigen::Index n, Eigen::Index d) {
    MatD m(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < d; ++j) m(i, j) = normal(rng);
        m.row(i) /= m.row(i).norm();
    }
    return m;
}

MatD orthonormal_rows(Eigen::Index n) {
    MatD m = MatD::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

}  // namespace

TEST_CASE("alignment_metric frozen values and oracle", "[diagnostics]") {
    MatD v(1, 3);
    v << 1, 0, 0;
    CHECK(alignment_metric(v, v, 2.0) == 0.0);

    MatD anti = -v;
    CHECK(alignment_metric(v, anti, 2.0) == Catch::Approx(4.0).margin(1e-12));

    Rng rng(61);
    MatD a = random_unit_rows(rng, 16, 8), b = random_unit_rows(rng, 16, 8);
    CHECK(oracles::rel_err(alignment_metric(a, b, 2.0), oracles::alignment(a, b, 2.0)) < 1e-6);

    CHECK_THROWS(alignment_metric(MatD(0, 3), MatD(0, 3), 2.0));
    CHECK_THROWS(alignment_metric(a, b, 0.0));
}

TEST_CASE("uniformity_metric frozen values and oracle", "[diagnostics]") {
    MatD same(3, 2);
    same << 1, 0, 1, 0, 1, 0;
    CHECK(uniformity_metric(same, 2.0) == Catch::Approx(0.0).margin(1e-12));

    MatD anti(2, 2);
    anti << 1, 0, -1, 0;
    CHECK(uniformity_metric(anti, 2.0) == Catch::Approx(-8.0).margin(1e-9));

    Rng rng(67);
    MatD e = random_unit_rows(rng, 32, 8);
    CHECK(oracles::rel_err(uniformity_metric(e, 2.0), oracles::uniformity(e, 2.0)) < 1e-6);

    CHECK_THROWS(uniformity_metric(MatD(1, 4), 2.0));
    CHECK_THROWS(uniformity_metric(e, 0.0));
}

TEST_CASE("uniformity improves from a clustered set to an orthonormal set", "[diagnostics]") {
    Rng rng(71);
    Eigen::Index n = 8;
    MatD clustered(n, n);
    MatD anchor = random_unit_rows(rng, 1, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        clustered.row(i) = anchor.row(0);
        for (Eigen::Index j = 0; j < n; ++j) clustered(i, j) += 0.05 * normal(rng);
        clustered.row(i) /= clustered.row(i).norm();
    }
    CHECK(uniformity_metric(orthonormal_rows(n), 2.0) < uniformity_metric(clustered, 2.0));
}

TEST_CASE("anisotropy frozen values and oracle", "[diagnostics]") {
    MatD same(5, 3);
    for (Eigen::Index i = 0; i < 5; ++i) same.row(i) << 0, 1, 0;
    CHECK(anisotropy(same) == Catch::Approx(1.0).margin(1e-9));

    CHECK(anisotropy(orthonormal_rows(6)) == Catch::Approx(0.0).margin(1e-12));

    Rng rng(73);
    MatD e = random_unit_rows(rng, 24, 10);
    CHECK(oracles::rel_err(anisotropy(e) + 2.0, oracles::anisotropy(e) + 2.0) < 1e-9);

    CHECK_THROWS(anisotropy(MatD(1, 4)));
}

TEST_CASE("anisotropy is invariant to permutation and rotation", "[diagnostics][property]") {
    Rng rng(79);
    MatD e = random_unit_rows(rng, 12, 6);
    double base = anisotropy(e);

    MatD perm = e;
    perm.row(0).swap(perm.row(7));
    perm.row(3).swap(perm.row(11));
    CHECK(anisotropy(perm) == Catch::Approx(base).margin(1e-9));

    // Householder reflection: orthogonal map preserving dot products
    MatD u = random_unit_rows(rng, 1, 6);
    MatD rot = MatD::Identity(6, 6) - 2.0 * (u.transpose() * u);
    MatD rotated = e * rot;
    CHECK(anisotropy(rotated) == Catch::Approx(base).margin(1e-6));
}

TEST_CASE("anisotropy_bound_check equality and random slack", "[diagnostics][theorem2]") {
    SECTION("identical vectors are exactly tight") {
        MatD same(7, 4);
        for (Eigen::Index i = 0; i < 7; ++i) same.row(i) << 0.5, 0.5, 0.5, 0.5;
        for (double tau : {0.05, 0.5, 1.0}) {
            TheoremCheck c = anisotropy_bound_check(same, tau);
            CHECK(std::abs(c.lhs - 1.0 / tau) < 1e-9);
            CHECK(std::abs(c.slack) < 1e-9);
        }
    }
    SECTION("orthonormal set: lhs = log((N-1+e)/N) >= 1/N at tau=1") {
        Eigen::Index n = 10;
        TheoremCheck c = anisotropy_bound_check(orthonormal_rows(n), 1.0);
        double expected_lhs = std::log((static_cast<double>(n) - 1.0 + std::exp(1.0)) /
                                       static_cast<double>(n));
        CHECK(c.lhs == Catch::Approx(expected_lhs).margin(1e-9));
        CHECK(c.rhs == Catch::Approx(1.0 / static_cast<double>(n)).margin(1e-12));
        CHECK(c.slack >= 0.0);
    }
    SECTION("slack is never negative on random sets") {
        Rng rng(83);
        for (int rep = 0; rep < 200; ++rep) {
            Eigen::Index n = 2 + static_cast<Eigen::Index>(uniform_index(rng, 127));
            Eigen::Index d = 2 + static_cast<Eigen::Index>(uniform_index(rng, 24));
            MatD e = random_unit_rows(rng, n, d);
            double tau = (rep % 3 == 0) ? 0.05 : (rep % 3 == 1 ? 0.5 : 1.0);
            TheoremCheck c = anisotropy_bound_check(e, tau);
            CHECK(c.slack >= -1e-6);
        }
    }
}

TEST_CASE("asymptotic_gap degenerate encoder matches the closed form", "[diagnostics][theorem1]") {
    // every description maps to one vector: gap(N) = log(1+N) - log N, limit = 0
    Eigen::Index d = 6;
    MatD one(1, d);
    one.setZero();
    one(0, 0) = 1.0;
    MatD pairs_hr = one.replicate(5, 1), pairs_t = one.replicate(5, 1);
    MatD corpus = one.replicate(9, 1);
    double tau = 0.5;
    auto series = asymptotic_gap(pairs_hr, pairs_t, corpus, tau, {1, 2, 4, 8, 32}, 200, 3);
    CHECK(std::abs(series.limit) < 1e-9);
    for (const auto& p : series.points) {
        double closed = std::log(1.0 + static_cast<double>(p.n_negatives)) -
                        std::log(static_cast<double>(p.n_negatives));
        CHECK(p.gap == Catch::Approx(closed).margin(1e-6));
    }
}

TEST_CASE("asymptotic_gap converges toward the limit as N grows", "[diagnostics][theorem1]") {
    Rng rng(89);
    MatD hr = random_unit_rows(rng, 64, 12);
    MatD t = random_unit_rows(rng, 64, 12);
    MatD corpus = random_unit_rows(rng, 256, 12);
    for (double tau : {1.0, 0.1}) {
        std::vector<double> first_err, last_err;
        for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
            auto series = asymptotic_gap(hr, t, corpus, tau, {4, 256}, 4000, seed);
            first_err.push_back(std::abs(series.points.front().gap - series.limit));
            last_err.push_back(std::abs(series.points.back().gap - series.limit));
        }
        std::sort(first_err.begin(), first_err.end());
        std::sort(last_err.begin(), last_err.end());
        CHECK(last_err[1] < first_err[1]);  // medians over 3 seeds
    }
}

TEST_CASE("asymptotic_gap without replacement rejects oversized N", "[diagnostics]") {
    Rng rng(97);
    MatD hr = random_unit_rows(rng, 4, 6), t = random_unit_rows(rng, 4, 6);
    MatD corpus = random_unit_rows(rng, 8, 6);
    CHECK_THROWS(asymptotic_gap(hr, t, corpus, 1.0, {16}, 10, 0, /*with_replacement=*/false));
    CHECK_NOTHROW(asymptotic_gap(hr, t, corpus, 1.0, {8}, 10, 0, /*with_replacement=*/false));
}

TEST_CASE("export_similarity_matrix writes labeled CSV", "[diagnostics]") {
    KnowledgeGraph kg = load_kg(test_helpers::write_toy_kg("simexp"));
    auto pairs = make_pairs(kg.split(Split::Train), kg);
    pairs.resize(2);
    pairs[1] = pairs[0];  // two identical pairs: all entries 1 +- 1e-5

    std::vector<std::string> corpus;
    for (const auto& p : make_pairs(kg.split(Split::Train), kg)) {
        corpus.push_back(p.hr_text);
        corpus.push_back(p.t_text);
    }
    Vocab vocab = build_vocab(corpus, 512);
    ModelConfig mc;
    mc.n_layers = 2;
    mc.d_model = 32;
    mc.n_heads = 2;
    mc.d_ffn = 64;
    mc.max_seq_len = 64;
    mc.vocab_size = vocab.size();
    Model<float> model(mc);

    auto dir = test_helpers::fresh_dir("simcsv");
    auto ex = export_similarity_matrix(pairs, model, vocab, 50, dir / "sim.csv");
    CHECK(ex.matrix.rows() == 2);
    // a duplicated pair makes the matrix constant: every entry is the one
    // hr/t cosine, and a perfectly aligned encoder would push it to 1
    double expected = static_cast<double>(
        model.embed(encode_view(pairs[0].hr_text, View::HR, vocab, 50))
            .dot(model.embed(encode_view(pairs[0].t_text, View::T, vocab, 50))));
    for (Eigen::Index i = 0; i < 2; ++i)
        for (Eigen::Index j = 0; j < 2; ++j) CHECK(std::abs(ex.matrix(i, j) - expected) < 1e-5);
    CHECK(std::abs(ex.diag_mean - ex.offdiag_mean) < 1e-6);

    std::ifstream in(dir / "sim.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header.find("t:") != std::string::npos);
    std::string row;
    std::getline(in, row);
    CHECK(row.find("hr:") != std::string::npos);
}

TEST_CASE("anisotropy_per_layer yields one value per block", "[diagnostics]") {
    auto sentences = make_probe_sentences(12, 3, 6, 5);
    Vocab vocab = build_vocab(sentences, 512);
    ModelConfig mc;
    mc.n_layers = 4;
    mc.d_model = 32;
    mc.n_heads = 2;
    mc.d_ffn = 64;
    mc.max_seq_len = 32;
    mc.vocab_size = vocab.size();
    Model<float> model(mc);

    auto values = anisotropy_per_layer(model, vocab, sentences, View::T, 16);
    REQUIRE(values.size() == 4);
    for (double v : values) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
    CHECK_THROWS(anisotropy_per_layer(model, vocab, {"just one"}, View::T, 16));
}
