#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mkdt/datagen.hpp"
#include "mkdt/distill.hpp"
#include "mkdt/models.hpp"
#include "mkdt/tensor.hpp"

namespace mkdt {

// ---------------------------------------------------------------------------
// Probe configuration and result.
// ---------------------------------------------------------------------------

struct ProbeConfig {
  double l2_weight = 1e-3;        // penalty on the classifier weights only
  double label_fraction = 1.0;    // share of each class's train split labeled
  double holdout_fraction = 0.2;  // share of each class held out for scoring
  std::size_t max_iterations = 100;
  double grad_tolerance = 1e-7;  // Euclidean full-gradient norm stop
  std::uint64_t seed = 0;        // drives the split and the label sample
};

/// Throws std::invalid_argument on any out-of-range field.
void validate(const ProbeConfig& cfg);

struct ProbeResult {
  double accuracy = 0.0;
  double err = 1.0;  // always exactly 1.0 - accuracy
  // Holdout accuracy per class; NaN for a class index with no holdout rows.
  std::vector<double> per_class_accuracy;
  std::size_t train_labeled = 0;
  std::size_t holdout_size = 0;
  std::size_t iterations = 0;  // optimizer iterations actually used
  double grad_norm = 0.0;      // gradient norm at the stopping point
  ProbeConfig config;
};

// ---------------------------------------------------------------------------
// The convex classifier under the probe.
// ---------------------------------------------------------------------------

struct LogisticModel {
  Tensor w;  // num_classes x feature_dim
  Tensor b;  // 1 x num_classes, never regularized
};

/// L2-regularized multinomial logistic regression, fit full-batch until the
/// gradient norm drops below `grad_tolerance` or the iteration budget runs
/// out. The objective is convex, so any such optimizer lands on the same
/// answer; this one is a small limited-memory quasi-Newton loop with a
/// backtracking line search. Reports where it stopped through the optional
/// out-parameters.
LogisticModel fit_multinomial_logistic(const Tensor& features,
                                       const std::vector<std::uint32_t>& labels,
                                       std::size_t num_classes, double l2_weight,
                                       std::size_t max_iterations, double grad_tolerance,
                                       std::size_t* iterations_out = nullptr,
                                       double* grad_norm_out = nullptr);

/// Argmax class per row; ties resolve to the lowest class index.
std::vector<std::uint32_t> predict(const LogisticModel& model, const Tensor& features);

// ---------------------------------------------------------------------------
// Pre-training on distilled (or subset) data.
// ---------------------------------------------------------------------------

/// Re-packages a real-data subset in the synthetic-dataset container so the
/// subset baselines run through the same pre-training routine, just with a
/// fixed step size instead of a learned one.
SyntheticDataset subset_as_synthetic(const LabeledDataset& dataset, const Tensor& teacher_reps,
                                     const std::vector<std::size_t>& indices, double alpha = 0.1);

/// Fits a freshly initialized encoder to the synthetic targets: one full-data
/// gradient step on the distillation loss per epoch, step size alpha_syn.
/// Deterministic per seed; zero epochs returns the seeded initialization.
Encoder pretrain_on_synthetic(const SyntheticDataset& syn, const EncoderSpec& arch,
                              std::size_t epochs, std::uint64_t seed);

// ---------------------------------------------------------------------------
// The probe itself and the method comparison harness.
// ---------------------------------------------------------------------------

/// Freezes the encoder, splits every class `holdout_fraction` / rest, labels
/// a stratified `label_fraction` of the train side, fits the probe on those
/// frozen representations and scores the holdout split.
ProbeResult linear_probe(const Encoder& encoder, const LabeledDataset& dataset,
                         const ProbeConfig& cfg);

struct MethodSpec {
  std::string name;
  // Called once per evaluation seed; must be safe to call from worker threads.
  std::function<Encoder(std::uint64_t seed)> make_encoder;
};

struct MethodReport {
  std::string method;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;  // sample standard deviation over seeds
  std::vector<ProbeResult> per_seed;
};

/// Runs every method over `n_seeds` evaluation seeds (seed s derives the
/// encoder and the probe split alike) and reports mean and spread. Probes
/// are independent, so they spread across `n_threads` workers; results are
/// identical to the sequential order regardless.
std::vector<MethodReport> compare_methods(const LabeledDataset& dataset,
                                          const std::vector<MethodSpec>& methods,
                                          const ProbeConfig& probe_cfg, std::size_t n_seeds,
                                          std::size_t n_threads = 1);

/// CSV with columns: method,seed,label_fraction,accuracy,err — one row per
/// (method, seed ordinal) pair.
void write_compare_csv(const std::string& path, const std::vector<MethodReport>& reports);

}  // namespace mkdt
