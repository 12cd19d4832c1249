#pragma once
// Dual-view contrastive objective (row + column InfoNCE with additive
// margin and trainable temperature), triple-completion language-modeling
// loss, and their weighted combination. All functions are pure; gradient
// variants return the loss together with input-side gradients.

#include <cmath>
#include <cstdint>
#include <vector>

#include "kalign/common.hpp"
#include "kalign/encoder.hpp"
#include "kalign/text_pipeline.hpp"

namespace kalign {

struct ExplicitLossConfig {
    double tau_init = 0.05;  // temperature, trained through its log
    double margin = 0.02;    // subtracted from the diagonal (positive) score
    std::int32_t batch_size = 24;
};

struct ImplicitLossConfig {
    std::int32_t batch_size = 4;
};

struct JointLossConfig {
    double lambda = 0.1;

    void validate() const {
        require(std::isfinite(lambda) && lambda >= 0.0, "JointLossConfig: lambda must be finite and >= 0");
    }
};

// S[i][j] = e_hr_i . e_t_j; rows are hr views, columns tail views. Inputs
// are rows of unit-norm embeddings.
template <typename S>
Mat<S> similarity_matrix(const Mat<S>& e_hr, const Mat<S>& e_t) {
    require(e_hr.rows() == e_t.rows(), "similarity_matrix: row/column batch sizes differ");
    require(e_hr.cols() == e_t.cols(), "similarity_matrix: embedding dimensions differ");
    require(e_hr.rows() >= 1, "similarity_matrix: empty batch");
    return e_hr * e_t.transpose();
}

template <typename S>
struct ExplicitLossResult {
    S loss = S(0);
    Mat<S> d_sim;       // dL/dS
    S d_log_tau = S(0);  // dL/d log(tau)
};

// Mean over the batch of (row + column) InfoNCE halves. Per row i the
// positive logit is (S[i][i] - margin) / tau and the B-1 in-batch negatives
// are S[i][j] / tau; columns are treated symmetrically.
template <typename S>
ExplicitLossResult<S> explicit_loss_with_grad(const Mat<S>& sim, S margin, S tau) {
    require(sim.rows() == sim.cols(), "explicit_loss: similarity matrix must be square");
    require(sim.rows() >= 1, "explicit_loss: empty batch");
    require(tau > S(0), "explicit_loss: temperature must be positive");

    const Eigen::Index B = sim.rows();
    ExplicitLossResult<S> out;
    out.d_sim = Mat<S>::Zero(B, B);
    const S mult = S(1) / (S(2) * static_cast<S>(B));

    std::vector<S> z(static_cast<std::size_t>(B));
    std::vector<S> p(static_cast<std::size_t>(B));
    auto one_direction = [&](bool row_dir) {
        for (Eigen::Index i = 0; i < B; ++i) {
            for (Eigen::Index j = 0; j < B; ++j) {
                S s = row_dir ? sim(i, j) : sim(j, i);
                if (j == i) s -= margin;
                z[static_cast<std::size_t>(j)] = s / tau;
            }
            S mx = z[0];
            for (Eigen::Index j = 1; j < B; ++j) mx = std::max(mx, z[static_cast<std::size_t>(j)]);
            S denom = S(0);
            for (Eigen::Index j = 0; j < B; ++j) denom += std::exp(z[static_cast<std::size_t>(j)] - mx);
            S lse = mx + std::log(denom);
            out.loss += mult * (lse - z[static_cast<std::size_t>(i)]);

            S z_dot_p = S(0);
            for (Eigen::Index j = 0; j < B; ++j) {
                p[static_cast<std::size_t>(j)] = std::exp(z[static_cast<std::size_t>(j)] - lse);
                z_dot_p += p[static_cast<std::size_t>(j)] * z[static_cast<std::size_t>(j)];
            }
            // d loss / dz_j = p_j - [j == i]; z_j = c_j/tau with c the margin-
            // shifted similarity, so dz_j/d log(tau) = -z_j.
            out.d_log_tau += mult * (z[static_cast<std::size_t>(i)] - z_dot_p);
            for (Eigen::Index j = 0; j < B; ++j) {
                S dz = p[static_cast<std::size_t>(j)] - (j == i ? S(1) : S(0));
                if (row_dir)
                    out.d_sim(i, j) += mult * dz / tau;
                else
                    out.d_sim(j, i) += mult * dz / tau;
            }
        }
    };
    one_direction(true);
    one_direction(false);
    return out;
}

template <typename S>
S explicit_loss(const Mat<S>& sim, S margin, S tau) {
    return explicit_loss_with_grad(sim, margin, tau).loss;
}

// Chain rule from dL/dS back to the unit-norm embedding batches.
template <typename S>
void similarity_backward(const Mat<S>& d_sim, const Mat<S>& e_hr, const Mat<S>& e_t,
                         Mat<S>& d_e_hr, Mat<S>& d_e_t) {
    d_e_hr.noalias() = d_sim * e_t;
    d_e_t.noalias() = d_sim.transpose() * e_hr;
}

template <typename S>
struct ImplicitLossResult {
    S loss = S(0);
    std::vector<Mat<S>> d_logits;  // per sample, aligned with the input logits
};

// Mean over samples of the length-normalized negative log-likelihood over
// masked (target) positions. logits[s] has one row per token of the full
// prompt+target sequence; the token at position p is scored by row p-1.
template <typename S>
ImplicitLossResult<S> implicit_loss_with_grad(const std::vector<Mat<S>>& logits,
                                              const std::vector<InstructionSample>& batch,
                                              bool with_grad = true) {
    require(!batch.empty(), "implicit_loss: empty batch");
    require(logits.size() == batch.size(), "implicit_loss: logits/sample count mismatch");

    const S inv_m = S(1) / static_cast<S>(batch.size());
    ImplicitLossResult<S> out;
    if (with_grad) out.d_logits.resize(batch.size());

    for (std::size_t s = 0; s < batch.size(); ++s) {
        const InstructionSample& sample = batch[s];
        TokenSeq full = sample.full();
        const auto len = static_cast<Eigen::Index>(full.size());
        require(logits[s].rows() == len, "implicit_loss: logits rows do not match sample length");

        Eigen::Index n_masked = 0;
        for (std::size_t p = 0; p < sample.loss_mask.size(); ++p)
            if (sample.loss_mask[p]) ++n_masked;
        require(n_masked > 0, "implicit_loss: sample has an empty loss mask");
        require(!sample.loss_mask[0], "implicit_loss: first position cannot carry loss");

        const S w = inv_m / static_cast<S>(n_masked);
        Mat<S>* dl = nullptr;
        if (with_grad) {
            out.d_logits[s] = Mat<S>::Zero(len, logits[s].cols());
            dl = &out.d_logits[s];
        }
        for (Eigen::Index p = 1; p < len; ++p) {
            if (!sample.loss_mask[static_cast<std::size_t>(p)]) continue;
            const auto row = logits[s].row(p - 1);
            S mx = row.maxCoeff();
            S denom = S(0);
            for (Eigen::Index v = 0; v < row.size(); ++v) denom += std::exp(row(v) - mx);
            S lse = mx + std::log(denom);
            TokenId gold = full[static_cast<std::size_t>(p)];
            out.loss += w * (lse - row(gold));
            if (dl) {
                for (Eigen::Index v = 0; v < row.size(); ++v)
                    (*dl)(p - 1, v) += w * std::exp(row(v) - lse);
                (*dl)(p - 1, gold) -= w;
            }
        }
    }
    return out;
}

template <typename S>
S implicit_loss(const std::vector<Mat<S>>& logits, const std::vector<InstructionSample>& batch) {
    return implicit_loss_with_grad(logits, batch, /*with_grad=*/false).loss;
}

template <typename S>
S joint_loss(S l_exp, S l_imp, const JointLossConfig& cfg) {
    cfg.validate();
    require(std::isfinite(static_cast<double>(l_exp)) && std::isfinite(static_cast<double>(l_imp)),
            "joint_loss: non-finite component");
    return l_exp + static_cast<S>(cfg.lambda) * l_imp;
}

}  // namespace kalign
