#include "mkdt/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "mkdt/autodiff.hpp"
#include "mkdt/rng.hpp"

namespace mkdt {

namespace {

void require_matrix(const char* op, const Tensor& t) {
  if (t.rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected a matrix, got shape " +
                                shape_str(t.shape));
  }
}

/// Sum of per-example terms in ascending order, making the reduction
/// independent of how the batch was ordered.
double sorted_sum(std::vector<double> terms) {
  std::sort(terms.begin(), terms.end());
  double acc = 0.0;
  for (double t : terms) acc += t;
  return acc;
}

/// Stacks `views` augmentations of every batch row (example-major order).
Tensor stack_views(const Tensor& batch, std::size_t views, double sigma_aug, Rng& rng) {
  const std::size_t b = batch.rows(), d = batch.cols();
  Tensor stacked = Tensor::zeros({b * views, d});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t v = 0; v < views; ++v)
      for (std::size_t j = 0; j < d; ++j)
        stacked.data[(i * views + v) * d + j] = batch.data[i * d + j] + rng.normal(0.0, sigma_aug);
  return stacked;
}

/// Pairing matrix for the attraction term: block-diagonal, one block per
/// example, selecting distinct view pairs (or the view itself when views=1).
Tensor pairing_matrix(std::size_t batch_size, std::size_t views) {
  const std::size_t total = batch_size * views;
  Tensor p = Tensor::zeros({total, total});
  for (std::size_t i = 0; i < batch_size; ++i)
    for (std::size_t a = 0; a < views; ++a)
      for (std::size_t a2 = 0; a2 < views; ++a2) {
        if (views > 1 && a == a2) continue;
        p.at(i * views + a, i * views + a2) = 1.0;
      }
  return p;
}

double attraction_normalizer(std::size_t batch_size, std::size_t views) {
  const double pairs = views > 1 ? static_cast<double>(views * (views - 1)) : 1.0;
  return static_cast<double>(batch_size) * pairs;
}

}  // namespace

// ---------------------------------------------------------------------------
// Second moments
// ---------------------------------------------------------------------------

SecondMoment second_moment_sampled(const Tensor& batch, std::size_t views, double sigma_aug,
                                   std::uint64_t seed) {
  require_matrix("second_moment_sampled", batch);
  if (views == 0) throw std::invalid_argument("second_moment_sampled: need at least one view");
  const std::size_t b = batch.rows(), d = batch.cols();

  Rng rng(derive_seed(seed, 0));
  Tensor stacked = stack_views(batch, views, sigma_aug, rng);

  Tensor means = Tensor::zeros({b, d});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t v = 0; v < views; ++v)
      for (std::size_t j = 0; j < d; ++j)
        means.data[i * d + j] += stacked.data[(i * views + v) * d + j] / static_cast<double>(views);

  SecondMoment out;
  out.m = scalar_mul(1.0 / static_cast<double>(b * views), matmul(transpose(stacked), stacked));
  out.m_prime = scalar_mul(1.0 / static_cast<double>(b), matmul(transpose(means), means));
  return out;
}

SecondMoment second_moment_analytic(const Tensor& batch) {
  require_matrix("second_moment_analytic", batch);
  Tensor m = scalar_mul(1.0 / static_cast<double>(batch.rows()),
                        matmul(transpose(batch), batch));
  return SecondMoment{m, m};
}

// ---------------------------------------------------------------------------
// Supervised MSE
// ---------------------------------------------------------------------------

double supervised_mse(const Encoder& encoder, const Tensor& inputs,
                      const std::vector<std::uint32_t>& labels) {
  require_matrix("supervised_mse", inputs);
  if (labels.size() != inputs.rows()) {
    throw std::invalid_argument("supervised_mse: " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(inputs.rows()) + " examples");
  }
  Tensor reps = forward(encoder, inputs);
  const std::size_t r = reps.cols();
  std::vector<double> terms(inputs.rows());
  for (std::size_t i = 0; i < inputs.rows(); ++i) {
    if (labels[i] >= r) {
      throw std::invalid_argument("supervised_mse: label " + std::to_string(labels[i]) +
                                  " has no coordinate in a " + std::to_string(r) +
                                  "-dimensional output");
    }
    double term = 0.0;
    for (std::size_t j = 0; j < r; ++j) {
      const double diff = reps.at(i, j) - (j == labels[i] ? 1.0 : 0.0);
      term += diff * diff;
    }
    terms[i] = term;
  }
  return sorted_sum(std::move(terms)) / static_cast<double>(inputs.rows());
}

Tensor supervised_mse_grad_linear(const Tensor& w, const Tensor& inputs,
                                  const std::vector<std::uint32_t>& labels) {
  require_matrix("supervised_mse_grad_linear", w);
  require_matrix("supervised_mse_grad_linear", inputs);
  if (labels.size() != inputs.rows()) {
    throw std::invalid_argument("supervised_mse_grad_linear: label count mismatch");
  }
  // residual R = X W^T - E (one-hot targets), gradient (2/b) R^T X.
  Tensor reps = matmul(inputs, transpose(w));
  Tensor residual = reps;
  for (std::size_t i = 0; i < inputs.rows(); ++i) {
    if (labels[i] >= reps.cols()) {
      throw std::invalid_argument("supervised_mse_grad_linear: label out of range");
    }
    residual.at(i, labels[i]) -= 1.0;
  }
  return scalar_mul(2.0 / static_cast<double>(inputs.rows()),
                    matmul(transpose(residual), inputs));
}

// ---------------------------------------------------------------------------
// Spectral contrastive loss
// ---------------------------------------------------------------------------

Tensor spectral_loss_from_reps(const Tensor& reps, std::size_t batch_size, std::size_t views) {
  require_matrix("spectral_loss_from_reps", reps);
  if (reps.rows() != batch_size * views) {
    throw std::invalid_argument("spectral_loss_from_reps: " + std::to_string(reps.rows()) +
                                " rows cannot hold " + std::to_string(batch_size) + "x" +
                                std::to_string(views) + " views");
  }
  Tensor gram = matmul(reps, transpose(reps));  // (b*views)^2 inner products
  Tensor attract = sum(mul(pairing_matrix(batch_size, views), gram));
  const double v2 = static_cast<double>(batch_size * views) * static_cast<double>(batch_size * views);
  Tensor repulse = scalar_mul(1.0 / v2, squared_frobenius_norm(gram));
  return add(scalar_mul(-2.0 / attraction_normalizer(batch_size, views), attract), repulse);
}

Tensor spectral_d_reps(const Tensor& reps, std::size_t batch_size, std::size_t views) {
  require_matrix("spectral_d_reps", reps);
  if (reps.rows() != batch_size * views) {
    throw std::invalid_argument("spectral_d_reps: row count does not match batch * views");
  }
  Tensor gram = matmul(reps, transpose(reps));
  // d/dY of -c * sum(P o YY^T) is -2c P Y for symmetric P.
  Tensor d_attract = scalar_mul(-4.0 / attraction_normalizer(batch_size, views),
                                matmul(pairing_matrix(batch_size, views), reps));
  const double v2 = static_cast<double>(batch_size * views) * static_cast<double>(batch_size * views);
  // d/dY of |YY^T|^2/V^2 is 4 (YY^T) Y / V^2.
  Tensor d_repulse = scalar_mul(4.0 / v2, matmul(gram, reps));
  return add(d_attract, d_repulse);
}

double spectral_contrastive(const Encoder& encoder, const Tensor& batch, std::size_t views,
                            double sigma_aug, std::uint64_t seed) {
  require_matrix("spectral_contrastive", batch);
  if (views == 0) throw std::invalid_argument("spectral_contrastive: need at least one view");
  Rng rng(derive_seed(seed, 0));
  Tensor stacked = stack_views(batch, views, sigma_aug, rng);
  Tensor reps = forward(encoder, stacked);

  // Same estimator as spectral_loss_from_reps, evaluated without the
  // (b*views)^2 inner-product table so large view counts stay cheap.
  const std::size_t b = batch.rows(), r = reps.cols();
  double attract = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<double> view_sum(r, 0.0);
    double sum_sq = 0.0;
    for (std::size_t a = 0; a < views; ++a) {
      const double* row = reps.data.data() + (i * views + a) * r;
      for (std::size_t j = 0; j < r; ++j) {
        view_sum[j] += row[j];
        sum_sq += row[j] * row[j];
      }
    }
    double sum_norm = 0.0;
    for (double v : view_sum) sum_norm += v * v;
    // sum over distinct view pairs equals |sum_a y_a|^2 - sum_a |y_a|^2;
    // with a single view the estimator pairs the view with itself.
    attract += views > 1 ? sum_norm - sum_sq : sum_sq;
  }
  const double term1 = -2.0 * attract / attraction_normalizer(b, views);

  // |Y Y^T|_F = |Y^T Y|_F, and the right-hand table is only r x r.
  Tensor small_gram = matmul(transpose(reps), reps);
  const double total_views = static_cast<double>(b * views);
  const double term2 =
      squared_frobenius_norm(small_gram).item() / (total_views * total_views);
  return term1 + term2;
}

double spectral_matrix_loss(const Tensor& w, const SecondMoment& moments) {
  return spectral_matrix_loss_expr(w, moments).item();
}

Tensor spectral_matrix_loss_expr(const Tensor& w, const SecondMoment& moments) {
  require_matrix("spectral_matrix_loss", w);
  require_matrix("spectral_matrix_loss", moments.m);
  if (moments.m.cols() != w.cols() || !shapes_equal(moments.m.shape, moments.m_prime.shape)) {
    throw std::invalid_argument("spectral_matrix_loss: moment shape " + shape_str(moments.m.shape) +
                                " does not match encoder input width " + std::to_string(w.cols()));
  }
  Tensor attract = trace(matmul(matmul(w, moments.m_prime), transpose(w)));
  Tensor mwtw = matmul(moments.m, matmul(transpose(w), w));
  Tensor repulse = trace(matmul(mwtw, mwtw));
  return add(scalar_mul(-2.0, attract), repulse);
}

Tensor spectral_grad_closed_form(const Tensor& w, const SecondMoment& moments) {
  require_matrix("spectral_grad_closed_form", w);
  require_matrix("spectral_grad_closed_form", moments.m);
  if (moments.m.cols() != w.cols()) {
    throw std::invalid_argument("spectral_grad_closed_form: moment shape mismatch");
  }
  if (max_abs_diff(moments.m, moments.m_prime) > 1e-12) {
    throw std::invalid_argument(
        "spectral_grad_closed_form: requires matched moment matrices (analytic mode)");
  }
  const Tensor& m = moments.m;
  Tensor wm = matmul(w, m);
  return add(scalar_mul(-4.0, wm), scalar_mul(4.0, matmul(matmul(wm, transpose(w)), wm)));
}

// ---------------------------------------------------------------------------
// Barlow Twins
// ---------------------------------------------------------------------------

namespace {

/// Batch-normalizes each column (1/b variance convention); throws with the
/// offending dimension when a column is (numerically) constant.
Tensor normalize_embeddings(const Tensor& z, const char* which) {
  const std::size_t b = z.rows(), r = z.cols();
  if (b < 2) {
    throw std::invalid_argument("barlow twins: need at least two examples to normalize, got " +
                                std::to_string(b));
  }
  Tensor mean_row = scalar_mul(1.0 / static_cast<double>(b),
                               matmul(Tensor::ones({1, b}), z));          // 1 x r
  Tensor centered = sub(z, matmul(Tensor::ones({b, 1}), mean_row));       // b x r
  Tensor var_row = scalar_mul(1.0 / static_cast<double>(b),
                              matmul(Tensor::ones({1, b}), mul(centered, centered)));
  for (std::size_t j = 0; j < r; ++j) {
    const double mu = mean_row.data[j];
    if (var_row.data[j] <= 1e-15 * (1.0 + mu * mu)) {
      throw std::invalid_argument("barlow twins: embedding dimension " + std::to_string(j) +
                                  " of " + which + " has zero variance across the batch");
    }
  }
  Tensor inv_std = reciprocal(sqrt_op(var_row));                          // 1 x r
  return mul(centered, matmul(Tensor::ones({b, 1}), inv_std));
}

}  // namespace

Tensor barlow_twins_expr(const Tensor& z1, const Tensor& z2, double lambda) {
  require_matrix("barlow_twins", z1);
  require_matrix("barlow_twins", z2);
  if (!shapes_equal(z1.shape, z2.shape)) {
    throw std::invalid_argument("barlow twins: view embeddings have different shapes " +
                                shape_str(z1.shape) + " and " + shape_str(z2.shape));
  }
  if (lambda <= 0) throw std::invalid_argument("barlow twins: lambda must be positive");

  const std::size_t b = z1.rows(), r = z1.cols();
  Tensor n1 = normalize_embeddings(z1, "the first view");
  Tensor n2 = normalize_embeddings(z2, "the second view");
  Tensor f = scalar_mul(1.0 / static_cast<double>(b), matmul(transpose(n1), n2));  // r x r

  Tensor eye = Tensor::identity(r);
  Tensor off_mask = sub(Tensor::ones({r, r}), Tensor::identity(r));
  Tensor diag_term = squared_frobenius_norm(sub(mul(eye, f), eye));
  Tensor off_term = squared_frobenius_norm(mul(off_mask, f));
  return add(diag_term, scalar_mul(lambda, off_term));
}

double barlow_twins_from_embeddings(const Tensor& z1, const Tensor& z2, double lambda) {
  return barlow_twins_expr(z1, z2, lambda).item();
}

double barlow_twins(const Encoder& encoder, const Tensor& batch, const BarlowTwinsConfig& cfg) {
  require_matrix("barlow_twins", batch);
  Rng rng(derive_seed(cfg.seed, 0));
  const std::size_t b = batch.rows(), d = batch.cols();
  Tensor v1 = Tensor::zeros({b, d});
  Tensor v2 = Tensor::zeros({b, d});
  // Per example: first the view-1 noise, then the view-2 noise, so the draw
  // order is stable under batch-size changes elsewhere.
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < d; ++j) v1.data[i * d + j] = batch.data[i * d + j] + rng.normal(0.0, cfg.sigma_aug);
    for (std::size_t j = 0; j < d; ++j) v2.data[i * d + j] = batch.data[i * d + j] + rng.normal(0.0, cfg.sigma_aug);
  }
  return barlow_twins_from_embeddings(forward(encoder, v1), forward(encoder, v2), cfg.lambda);
}

// ---------------------------------------------------------------------------
// KD-MSE
// ---------------------------------------------------------------------------

double kd_mse(const Encoder& student, const Tensor& inputs, const Tensor& teacher_reps,
              const std::vector<std::size_t>& batch_indices) {
  require_matrix("kd_mse", inputs);
  require_matrix("kd_mse", teacher_reps);
  if (batch_indices.empty()) throw std::invalid_argument("kd_mse: empty batch");
  for (std::size_t idx : batch_indices) {
    if (idx >= inputs.rows() || idx >= teacher_reps.rows()) {
      throw std::out_of_range("kd_mse: index " + std::to_string(idx) +
                              " outside the stored representations");
    }
  }
  Tensor batch = gather_rows(inputs, batch_indices);
  Tensor reps = forward(student, batch);
  if (reps.cols() != teacher_reps.cols()) {
    throw std::invalid_argument("kd_mse: student produces " + std::to_string(reps.cols()) +
                                "-dimensional representations, teacher stored " +
                                std::to_string(teacher_reps.cols()));
  }
  std::vector<double> terms(batch_indices.size());
  for (std::size_t i = 0; i < batch_indices.size(); ++i) {
    double term = 0.0;
    for (std::size_t j = 0; j < reps.cols(); ++j) {
      const double diff = reps.at(i, j) - teacher_reps.at(batch_indices[i], j);
      term += diff * diff;
    }
    terms[i] = term;
  }
  return sorted_sum(std::move(terms)) / static_cast<double>(batch_indices.size());
}

Tensor kd_mse_expr(const Tensor& student_reps, const Tensor& target_reps) {
  require_matrix("kd_mse_expr", student_reps);
  if (!shapes_equal(student_reps.shape, target_reps.shape)) {
    throw std::invalid_argument("kd_mse_expr: representation shapes " +
                                shape_str(student_reps.shape) + " and " +
                                shape_str(target_reps.shape) + " differ");
  }
  return scalar_mul(1.0 / static_cast<double>(student_reps.rows()),
                    squared_frobenius_norm(sub(student_reps, target_reps)));
}

// ---------------------------------------------------------------------------
// Trajectory-matching loss
// ---------------------------------------------------------------------------

namespace {
void require_same_manifest(const FlatParams& a, const FlatParams& b) {
  if (a.manifest.size() != b.manifest.size()) {
    throw std::invalid_argument("trajectory loss: parameter manifests differ");
  }
  for (std::size_t i = 0; i < a.manifest.size(); ++i) {
    if (!shapes_equal(a.manifest[i], b.manifest[i])) {
      throw std::invalid_argument("trajectory loss: parameter manifests differ at entry " +
                                  std::to_string(i));
    }
  }
}
}  // namespace

Tensor mtt_loss_expr(const Tensor& student_end, const Tensor& expert_start,
                     const Tensor& expert_target) {
  if (!shapes_equal(expert_start.shape, expert_target.shape) ||
      !shapes_equal(student_end.shape, expert_target.shape)) {
    throw std::invalid_argument("trajectory loss: flat parameter lengths differ");
  }
  double denom = 0.0;
  for (std::size_t i = 0; i < expert_start.size(); ++i) {
    const double diff = expert_start.data[i] - expert_target.data[i];
    denom += diff * diff;
  }
  if (denom == 0.0) {
    throw std::domain_error(
        "trajectory loss: degenerate expert segment (start equals target, zero denominator)");
  }
  return scalar_mul(1.0 / denom, squared_frobenius_norm(sub(student_end, expert_target)));
}

double mtt_loss(const FlatParams& student_end, const FlatParams& expert_start,
                const FlatParams& expert_target) {
  require_same_manifest(student_end, expert_start);
  require_same_manifest(student_end, expert_target);
  return mtt_loss_expr(student_end.values, expert_start.values, expert_target.values).item();
}

}  // namespace mkdt
