#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mkdt/datagen.hpp"
#include "mkdt/models.hpp"
#include "mkdt/tensor.hpp"

namespace mkdt {

enum class LossKind { kSupervised, kSelfSupervised, kKnowledgeDistillation };
std::string loss_kind_name(LossKind kind);

/// Scalar variance estimate Var = E[|X - E[X]|^2] over flattened samples,
/// with the unbiased 1/(n-1) convention and a two-pass reduction.
struct VarianceReport {
  double estimate = 0.0;
  double standard_error = 0.0;
  std::size_t n_samples = 0;
  std::string config_echo;
};

/// Two-pass variance of a set of equally-shaped samples; the building block
/// every experiment below reduces through (exposed for oracle tests).
VarianceReport scalar_variance(const std::vector<Tensor>& samples);

// ---------------------------------------------------------------------------
// Minibatch gradient variance at a fixed evaluation point (identity weights).
//
// The supervised gradient is the closed-form MSE gradient; the
// self-supervised gradient is the closed-form spectral gradient at the
// batch's analytic (infinite-augmentation) moments, so each batch maps to
// one deterministic gradient and the measured variance isolates batch
// composition.
// ---------------------------------------------------------------------------

VarianceReport grad_variance_mc(LossKind kind, const LabeledDataset& dataset,
                                std::size_t batch_size, std::size_t n_samples,
                                std::uint64_t seed);

/// Exact population variance over every size-`batch_size` subset; intended
/// for small n (the subset count grows combinatorially) and used as the
/// reference the Monte-Carlo estimate is checked against.
VarianceReport grad_variance_exact(LossKind kind, const LabeledDataset& dataset,
                                   std::size_t batch_size);

// ---------------------------------------------------------------------------
// Partition experiments: one synchronous parallel epoch
//   theta' = theta - lr * sum over batches of grad L(batch),
// every batch gradient evaluated at the same starting theta.
// ---------------------------------------------------------------------------

/// Starting point is the identity matrix (the theory setting's linear model).
Tensor parallel_sgd_epoch(LossKind kind, const LabeledDataset& dataset,
                          const Partition& partition, double lr, const Tensor& w0);

VarianceReport partition_variance(LossKind kind, const LabeledDataset& dataset,
                                  std::size_t batch_size, std::size_t n_partitions, double lr,
                                  std::uint64_t seed);

/// The two hand-built partitions from the zero-variance argument: one mixes
/// the classes evenly inside every batch, the other keeps each batch inside
/// a single class. Dataset must be class-major (as generated).
Partition class_interleaved_partition(const LabeledDataset& dataset, std::size_t batch_size);
Partition class_blocked_partition(const LabeledDataset& dataset, std::size_t batch_size);

// ---------------------------------------------------------------------------
// End-of-trajectory weight variance versus trajectory length.
// ---------------------------------------------------------------------------

struct TrajectoryTrainConfig {
  std::size_t batch_size = 8;
  double lr = 0.05;
  std::size_t views = 2;      // self-supervised views per example
  double sigma_aug = 0.1;     // self-supervised augmentation noise
  Tensor teacher_reps;        // targets for the distillation kind
};

/// Trains n_runs students from the shared `init`, all differing only in the
/// run seed (batch order and, for the self-supervised kind, augmentation
/// draws), and reports end-weight variance at each requested length.
/// One training pass per run covers all lengths: the run is snapshotted at
/// every length in `lengths` (ascending), which is equivalent to separate
/// runs because the first `L` epochs of a run depend only on its seed.
std::vector<VarianceReport> trajectory_variance(LossKind kind, const LabeledDataset& dataset,
                                                const Encoder& init, std::size_t n_runs,
                                                const std::vector<std::size_t>& lengths,
                                                const TrajectoryTrainConfig& cfg,
                                                std::uint64_t seed);

// ---------------------------------------------------------------------------
// CSV report
// ---------------------------------------------------------------------------

struct VarianceCsvRow {
  std::string experiment;
  std::string loss_kind;
  std::string param;
  double value = 0.0;
  double estimate = 0.0;
  double standard_error = 0.0;
  std::size_t n_samples = 0;
};

/// Columns: experiment,loss_kind,param,value,estimate,stderr,n_samples.
void write_variance_csv(const std::string& path, const std::vector<VarianceCsvRow>& rows);

}  // namespace mkdt
