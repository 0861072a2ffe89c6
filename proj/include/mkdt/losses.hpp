#pragma once

#include <cstdint>
#include <vector>

#include "mkdt/models.hpp"
#include "mkdt/tensor.hpp"

namespace mkdt {

/// Second-moment summary of a batch under augmentation.
///   m:       average of v v^T over every augmented view v
///   m_prime: average of x̄ x̄^T over per-example mean views x̄
/// The analytic constructor is the infinite-augmentation limit with vanishing
/// augmentation noise, in which both matrices coincide exactly.
struct SecondMoment {
  Tensor m;
  Tensor m_prime;
};

SecondMoment second_moment_sampled(const Tensor& batch, std::size_t views, double sigma_aug,
                                   std::uint64_t seed);
SecondMoment second_moment_analytic(const Tensor& batch);

// ---------------------------------------------------------------------------
// Supervised MSE against one-hot class targets.
// ---------------------------------------------------------------------------

/// (1/|B|) sum_i |f(x_i) - e_{y_i}|^2. Exactly invariant under batch
/// reordering (per-example terms are reduced in sorted order).
double supervised_mse(const Encoder& encoder, const Tensor& inputs,
                      const std::vector<std::uint32_t>& labels);

/// Closed-form parameter gradient of supervised_mse for a bias-free linear
/// encoder W: (2/|B|) sum_i (W x_i - e_{y_i}) x_i^T.
Tensor supervised_mse_grad_linear(const Tensor& w, const Tensor& inputs,
                                  const std::vector<std::uint32_t>& labels);

// ---------------------------------------------------------------------------
// Spectral contrastive loss, sampled form and matrix form.
// ---------------------------------------------------------------------------

/// Monte-Carlo estimate over `views` sampled augmentations per example:
/// attraction over distinct view pairs of the same example, repulsion over
/// all ordered pairs of views in the batch (the same-view pairs contribute a
/// vanishing O(1/(b*views)) bias, documented so the estimator is fixed).
double spectral_contrastive(const Encoder& encoder, const Tensor& batch, std::size_t views,
                            double sigma_aug, std::uint64_t seed);

/// The same estimator as an op expression over stacked view representations
/// (row v*i+a is view a of example i). Differentiable when reps is tracked.
Tensor spectral_loss_from_reps(const Tensor& reps, std::size_t batch_size, std::size_t views);

/// dL/dreps of spectral_loss_from_reps as a first-order op expression, so
/// SGD steps on this loss can live inside a differentiated unroll.
Tensor spectral_d_reps(const Tensor& reps, std::size_t batch_size, std::size_t views);

/// Population (matrix) form for a linear encoder W:
///   -2 tr(W M' W^T) + tr(M W^T W M W^T W).
double spectral_matrix_loss(const Tensor& w, const SecondMoment& moments);
Tensor spectral_matrix_loss_expr(const Tensor& w, const SecondMoment& moments);

/// Closed-form gradient -4 W M + 4 W M W^T W M; valid only when the two
/// moment matrices coincide (analytic mode), and checked.
Tensor spectral_grad_closed_form(const Tensor& w, const SecondMoment& moments);

// ---------------------------------------------------------------------------
// Barlow Twins.
// ---------------------------------------------------------------------------

struct BarlowTwinsConfig {
  double lambda = 5e-3;   // off-diagonal weight
  double sigma_aug = 0.1; // augmentation noise for the two views
  std::uint64_t seed = 0;
};

/// Embeddings of two augmented views are batch-normalized per dimension
/// (zero mean, unit variance with the 1/b convention, so a perfectly aligned
/// pair reaches F = I); F is their cross-correlation. Loss:
///   sum_i (1 - F_ii)^2 + lambda * sum_{i != j} F_ij^2.
double barlow_twins(const Encoder& encoder, const Tensor& batch, const BarlowTwinsConfig& cfg);

/// Test/bench hook that injects the two embedding matrices directly.
double barlow_twins_from_embeddings(const Tensor& z1, const Tensor& z2, double lambda);

/// Expression form; differentiable when the embeddings are tracked.
/// Throws (naming the dimension) when a dimension has zero variance.
Tensor barlow_twins_expr(const Tensor& z1, const Tensor& z2, double lambda);

// ---------------------------------------------------------------------------
// Knowledge-distillation MSE against stored teacher representations.
// ---------------------------------------------------------------------------

/// Mean over the batch of |f_S(x_i) - Z_i|^2 where Z holds one teacher
/// representation per dataset row. Exactly invariant under batch reordering.
double kd_mse(const Encoder& student, const Tensor& inputs, const Tensor& teacher_reps,
              const std::vector<std::size_t>& batch_indices);

/// Expression form over already-computed student representations (row order
/// fixed by the caller).
Tensor kd_mse_expr(const Tensor& student_reps, const Tensor& target_reps);

// ---------------------------------------------------------------------------
// Trajectory-matching loss.
// ---------------------------------------------------------------------------

/// |theta_student_end - theta_expert_target|^2 / |theta_expert_start -
/// theta_expert_target|^2. Throws on manifest mismatch and on a degenerate
/// (zero-length) expert segment.
double mtt_loss(const FlatParams& student_end, const FlatParams& expert_start,
                const FlatParams& expert_target);

/// Expression form over flat parameter vectors (the student end point may be
/// a tracked expression; the expert vectors are constants).
Tensor mtt_loss_expr(const Tensor& student_end, const Tensor& expert_start,
                     const Tensor& expert_target);

}  // namespace mkdt
