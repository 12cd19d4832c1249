#pragma once
// Numerical realizations of the representation-quality diagnostics:
// alignment / uniformity metrics, sentence-level anisotropy, the
// large-batch asymptotics of the contrastive objective, the anisotropy
// upper bound, and CSV exports for similarity matrices and layer/epoch
// anisotropy curves.
//
// All reductions run in double with compensated summation so results do
// not depend on evaluation order. Embedding inputs are rows of unit-norm
// vectors.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "kalign/alignment_losses.hpp"
#include "kalign/common.hpp"
#include "kalign/encoder.hpp"
#include "kalign/kg_store.hpp"

namespace kalign {

using MatD = Mat<double>;

// Mean over positive pairs of |e_hr - e_t|^alpha.
inline double alignment_metric(const MatD& e_hr, const MatD& e_t, double alpha) {
    require(e_hr.rows() == e_t.rows() && e_hr.cols() == e_t.cols(),
            "alignment_metric: pair shapes differ");
    require(e_hr.rows() >= 1, "alignment_metric: empty pair set");
    require(alpha > 0.0, "alignment_metric: alpha must be positive");
    KahanSum acc;
    for (Eigen::Index i = 0; i < e_hr.rows(); ++i)
        acc.add(std::pow((e_hr.row(i) - e_t.row(i)).norm(), alpha));
    return acc.value() / static_cast<double>(e_hr.rows());
}

// log of the mean Gaussian potential over ordered distinct pairs.
inline double uniformity_metric(const MatD& e, double t) {
    require(e.rows() >= 2, "uniformity_metric: need at least two samples");
    require(t > 0.0, "uniformity_metric: t must be positive");
    const Eigen::Index n = e.rows();
    KahanSum acc;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) {
            if (i == j) continue;
            acc.add(std::exp(-t * (e.row(i) - e.row(j)).squaredNorm()));
        }
    return std::log(acc.value() / static_cast<double>(n * (n - 1)));
}

// Mean off-diagonal pairwise dot product.
inline double anisotropy(const MatD& e) {
    require(e.rows() >= 2, "anisotropy: need at least two embeddings");
    const Eigen::Index n = e.rows();
    Row<double> total = Row<double>::Zero(e.cols());
    for (Eigen::Index i = 0; i < n; ++i) total += e.row(i);
    KahanSum diag;
    for (Eigen::Index i = 0; i < n; ++i) diag.add(e.row(i).squaredNorm());
    double all_pairs = total.squaredNorm();
    return (all_pairs - diag.value()) / static_cast<double>(n) / static_cast<double>(n - 1);
}

struct TheoremCheck {
    std::string name;
    double lhs = 0.0;
    double rhs = 0.0;
    double slack = 0.0;  // lhs - rhs
    std::string params;
};

// lhs = E_i[ log E_j[ exp(e_j . e_i / tau) ] ] over the finite uniform
// corpus (the inner expectation includes j = i, matching the finite-sample
// derivation, which makes the identical-vector case exactly tight);
// rhs = (N-1)/(tau N) * anisotropy + 1/(tau N).
inline TheoremCheck anisotropy_bound_check(const MatD& e, double tau) {
    require(e.rows() >= 2, "anisotropy_bound_check: need at least two embeddings");
    require(tau > 0.0, "anisotropy_bound_check: tau must be positive");
    const Eigen::Index n = e.rows();
    MatD gram = e * e.transpose();
    KahanSum outer;
    for (Eigen::Index i = 0; i < n; ++i) {
        double mx = gram.row(i).maxCoeff();
        KahanSum inner;
        for (Eigen::Index j = 0; j < n; ++j) inner.add(std::exp((gram(j, i) - mx) / tau));
        outer.add(mx / tau + std::log(inner.value() / static_cast<double>(n)));
    }
    TheoremCheck c;
    c.name = "anisotropy_upper_bound";
    c.lhs = outer.value() / static_cast<double>(n);
    double aniso = anisotropy(e);
    c.rhs = (static_cast<double>(n - 1) / (tau * static_cast<double>(n))) * aniso +
            1.0 / (tau * static_cast<double>(n));
    c.slack = c.lhs - c.rhs;
    c.params = "tau=" + std::to_string(tau) + ";N=" + std::to_string(n);
    return c;
}

struct AsymptoticGapPoint {
    std::int32_t n_negatives = 0;
    double gap = 0.0;  // Monte-Carlo estimate of L_exp(f; tau, N) - log N
};

struct AsymptoticGapSeries {
    double limit = 0.0;  // two-term large-N limit estimated on the same corpus
    std::vector<AsymptoticGapPoint> points;
};

// Monte-Carlo estimate of the reformulated contrastive loss minus log N for
// each N in the schedule, against its large-N limit:
//   -1/tau * E_pos[ e_hr . e_t ] + E_i[ log E_j[ exp(e_j . e_i / tau) ] ].
// Pairs are rows of (hr_pairs, t_pairs); negatives are drawn i.i.d. from
// the corpus rows (with replacement by default).
inline AsymptoticGapSeries asymptotic_gap(const MatD& hr_pairs, const MatD& t_pairs,
                                          const MatD& corpus, double tau,
                                          const std::vector<std::int32_t>& schedule,
                                          std::int32_t n_samples, std::uint64_t seed,
                                          bool with_replacement = true) {
    require(hr_pairs.rows() == t_pairs.rows() && hr_pairs.rows() >= 1,
            "asymptotic_gap: invalid pair set");
    require(corpus.rows() >= 1, "asymptotic_gap: empty corpus");
    require(tau > 0.0, "asymptotic_gap: tau must be positive");
    require(n_samples >= 1, "asymptotic_gap: need at least one sample");

    const Eigen::Index P = hr_pairs.rows();
    const Eigen::Index C = corpus.rows();

    AsymptoticGapSeries out;
    {
        KahanSum pos;
        for (Eigen::Index i = 0; i < P; ++i) pos.add(hr_pairs.row(i).dot(t_pairs.row(i)));
        double term1 = -pos.value() / static_cast<double>(P) / tau;
        MatD gram = corpus * corpus.transpose();
        KahanSum outer;
        for (Eigen::Index i = 0; i < C; ++i) {
            double mx = gram.col(i).maxCoeff();
            KahanSum inner;
            for (Eigen::Index j = 0; j < C; ++j) inner.add(std::exp((gram(j, i) - mx) / tau));
            outer.add(mx / tau + std::log(inner.value() / static_cast<double>(C)));
        }
        out.limit = term1 + outer.value() / static_cast<double>(C);
    }

    MatD cross = hr_pairs * corpus.transpose();  // P x C
    std::vector<double> pos_sims(static_cast<std::size_t>(P));
    for (Eigen::Index i = 0; i < P; ++i)
        pos_sims[static_cast<std::size_t>(i)] = hr_pairs.row(i).dot(t_pairs.row(i));

    for (std::int32_t n_neg : schedule) {
        require(n_neg >= 1, "asymptotic_gap: schedule entries must be >= 1");
        require(with_replacement || n_neg <= static_cast<std::int32_t>(C),
                "asymptotic_gap: N exceeds corpus size under sampling without replacement");
        Rng rng(derive_seed(seed, "asymgap", static_cast<std::uint64_t>(n_neg)));
        KahanSum acc;
        std::vector<Eigen::Index> pool;
        if (!with_replacement) {
            pool.resize(static_cast<std::size_t>(C));
            for (Eigen::Index j = 0; j < C; ++j) pool[static_cast<std::size_t>(j)] = j;
        }
        for (std::int32_t s = 0; s < n_samples; ++s) {
            Eigen::Index pi = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(P)));
            double zpos = pos_sims[static_cast<std::size_t>(pi)] / tau;
            double mx = zpos;
            std::vector<double> zneg(static_cast<std::size_t>(n_neg));
            if (!with_replacement) {
                for (std::int32_t k = 0; k < n_neg; ++k) {
                    auto r = static_cast<std::size_t>(
                        uniform_index(rng, static_cast<std::uint64_t>(C - k)) + static_cast<std::uint64_t>(k));
                    std::swap(pool[static_cast<std::size_t>(k)], pool[r]);
                    zneg[static_cast<std::size_t>(k)] = cross(pi, pool[static_cast<std::size_t>(k)]) / tau;
                }
            } else {
                for (std::int32_t k = 0; k < n_neg; ++k) {
                    auto j = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(C)));
                    zneg[static_cast<std::size_t>(k)] = cross(pi, j) / tau;
                }
            }
            for (double z : zneg) mx = std::max(mx, z);
            double denom = std::exp(zpos - mx);
            for (double z : zneg) denom += std::exp(z - mx);
            acc.add(mx + std::log(denom) - zpos);
        }
        out.points.push_back(
            {n_neg, acc.value() / static_cast<double>(n_samples) - std::log(static_cast<double>(n_neg))});
    }
    return out;
}

// --- encoder-coupled helpers -------------------------------------------

template <typename S>
MatD embed_batch(const Model<S>& model, const Vocab& vocab, const std::vector<std::string>& texts,
                 View view, std::int32_t max_len) {
    require(!texts.empty(), "embed_batch: empty text list");
    MatD out(static_cast<Eigen::Index>(texts.size()), model.config().d_model);
    for (std::size_t i = 0; i < texts.size(); ++i) {
        Row<S> e = model.embed(encode_view(texts[i], view, vocab, max_len));
        out.row(static_cast<Eigen::Index>(i)) = e.template cast<double>();
    }
    return out;
}

struct SimilarityExport {
    MatD matrix;
    double diag_mean = 0.0;
    double offdiag_mean = 0.0;
};

// B x B cosine matrix over a batch of pairs; rows are hr views, columns
// tail views. Written as CSV with triple labels.
template <typename S>
SimilarityExport export_similarity_matrix(const std::vector<KnowledgePair>& pairs,
                                          const Model<S>& model, const Vocab& vocab,
                                          std::int32_t max_len, const std::filesystem::path& path) {
    require(pairs.size() >= 2, "export_similarity_matrix: need a batch of at least 2 pairs");
    std::vector<std::string> hr_texts, t_texts;
    for (const auto& p : pairs) {
        hr_texts.push_back(p.hr_text);
        t_texts.push_back(p.t_text);
    }
    MatD e_hr = embed_batch(model, vocab, hr_texts, View::HR, max_len);
    MatD e_t = embed_batch(model, vocab, t_texts, View::T, max_len);

    SimilarityExport ex;
    ex.matrix = similarity_matrix(e_hr, e_t);
    KahanSum diag, off;
    const Eigen::Index b = ex.matrix.rows();
    for (Eigen::Index i = 0; i < b; ++i)
        for (Eigen::Index j = 0; j < b; ++j)
            (i == j ? diag : off).add(ex.matrix(i, j));
    ex.diag_mean = diag.value() / static_cast<double>(b);
    ex.offdiag_mean = b > 1 ? off.value() / static_cast<double>(b * (b - 1)) : 0.0;

    if (!path.empty()) {
        std::ofstream out(path, std::ios::binary);
        require(out.good(), "export_similarity_matrix: cannot write " + path.string());
        out << "hr_view";
        for (Eigen::Index j = 0; j < b; ++j) out << ",t:" << t_texts[static_cast<std::size_t>(j)];
        out << "\n";
        out.precision(9);
        for (Eigen::Index i = 0; i < b; ++i) {
            out << "hr:" << hr_texts[static_cast<std::size_t>(i)];
            for (Eigen::Index j = 0; j < b; ++j) out << "," << ex.matrix(i, j);
            out << "\n";
        }
    }
    return ex;
}

// Per-layer anisotropy of a text corpus under one encoder. Index l in the
// result corresponds to block l+1's output; the last entry is the pooled
// embedding space.
template <typename S>
std::vector<double> anisotropy_per_layer(const Model<S>& model, const Vocab& vocab,
                                         const std::vector<std::string>& corpus, View view,
                                         std::int32_t max_len) {
    require(corpus.size() >= 2, "anisotropy_per_layer: corpus must have at least 2 sentences");
    const auto n_layers = static_cast<std::size_t>(model.config().n_layers);
    std::vector<MatD> per_layer(n_layers);
    for (auto& m : per_layer)
        m.resize(static_cast<Eigen::Index>(corpus.size()), model.config().d_model);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        auto rows = model.eos_hidden_per_layer(encode_view(corpus[i], view, vocab, max_len));
        for (std::size_t l = 0; l < n_layers; ++l)
            per_layer[l].row(static_cast<Eigen::Index>(i)) = rows[l].template cast<double>();
    }
    std::vector<double> out(n_layers);
    for (std::size_t l = 0; l < n_layers; ++l) out[l] = anisotropy(per_layer[l]);
    return out;
}

struct LayerCurveRow {
    std::string checkpoint;
    std::int32_t layer = 0;  // 1-based block index
    double value = 0.0;
};

inline void write_layer_curves_csv(const std::vector<LayerCurveRow>& rows,
                                   const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "write_layer_curves_csv: cannot write " + path.string());
    out << "checkpoint,layer,value\n";
    out.precision(9);
    for (const auto& r : rows) out << r.checkpoint << "," << r.layer << "," << r.value << "\n";
}

inline void write_theorem_checks_csv(const std::vector<TheoremCheck>& checks,
                                     const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "write_theorem_checks_csv: cannot write " + path.string());
    out << "name,lhs,rhs,slack,params\n";
    out.precision(12);
    for (const auto& c : checks)
        out << c.name << "," << c.lhs << "," << c.rhs << "," << c.slack << "," << c.params << "\n";
}

}  // namespace kalign
