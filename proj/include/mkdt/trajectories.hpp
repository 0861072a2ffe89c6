#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mkdt/datagen.hpp"
#include "mkdt/models.hpp"
#include "mkdt/tensor.hpp"

namespace mkdt {

enum class Optimizer { kSgd, kAdam };

/// Teacher pre-training run: minibatch redundancy-reduction training over
/// two sampled views per example. Plain SGD by default; Adam is available
/// behind the config for runs that want it.
struct SslTrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 16;  // must be >= 2 (the loss normalizes per batch)
  double lr = 0.05;
  double lambda = 5e-3;   // off-diagonal weight of the redundancy term
  double sigma_aug = 0.1;
  Optimizer optimizer = Optimizer::kSgd;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct TeacherRun {
  Encoder encoder;
  std::vector<double> loss_log;  // mean minibatch loss per epoch, in order
};

/// Deterministic per seed; labels are ignored. Zero epochs returns the
/// seeded initialization unchanged (with an empty log).
TeacherRun train_teacher_ssl(const LabeledDataset& dataset, const EncoderSpec& teacher_arch,
                             const SslTrainConfig& cfg, std::uint64_t seed);

/// Frozen-teacher representations of the whole dataset, one row per example
/// in dataset index order, computed without any augmentation.
struct TeacherRepresentations {
  Tensor z;                        // n x r
  std::uint64_t teacher_hash = 0;  // content hash of the producing encoder
};

TeacherRepresentations compute_teacher_reps(const Encoder& teacher,
                                            const LabeledDataset& dataset);

/// Expert training: SGD with momentum and weight decay on the mean squared
/// distance between student outputs and the teacher rows.
struct KdTrainConfig {
  std::size_t epochs = 20;  // must be >= 1 (a trajectory has >= 2 checkpoints)
  std::size_t batch_size = 16;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  InitScheme init = InitScheme::kFanIn;
};

struct ExpertTrajectory {
  EncoderSpec student;
  KdTrainConfig cfg;
  std::uint64_t seed = 0;
  std::vector<FlatParams> checkpoints;  // epochs+1 entries; [0] is the init
  std::vector<double> loss_log;         // full-data loss at each checkpoint

  std::size_t epoch_count() const { return checkpoints.size() - 1; }
};

/// Deterministic per seed: the seed derives independent streams for the
/// initialization and the batch order. No input augmentation is applied.
ExpertTrajectory train_expert_kd(const LabeledDataset& dataset, const Tensor& teacher_reps,
                                 const EncoderSpec& student_arch, const KdTrainConfig& cfg,
                                 std::uint64_t seed);

/// K experts with per-expert derived seeds. Experts are independent, so they
/// may be trained on up to n_threads worker threads; the result is identical
/// to the sequential order regardless of thread count.
std::vector<ExpertTrajectory> train_experts(const LabeledDataset& dataset,
                                            const Tensor& teacher_reps,
                                            const EncoderSpec& student_arch,
                                            const KdTrainConfig& cfg, std::size_t k,
                                            std::uint64_t base_seed, std::size_t n_threads = 1);

/// Self-supervised expert training for the naive baseline: plain SGD on the
/// sampled spectral objective with fresh views per batch.
struct SslExpertConfig {
  std::size_t epochs = 20;  // must be >= 1
  std::size_t batch_size = 16;
  double lr = 0.05;
  std::size_t views = 2;  // must be >= 2
  double sigma_aug = 0.1;
  InitScheme init = InitScheme::kFanIn;
};

/// Same checkpoint schedule as the distillation experts; the stored config
/// records the SGD settings (momentum and weight decay are zero here). The
/// loss log holds a fixed-seed sampled evaluation at every checkpoint so it
/// can be recomputed from the checkpoint alone.
ExpertTrajectory train_expert_ssl(const LabeledDataset& dataset, const EncoderSpec& student_arch,
                                  const SslExpertConfig& cfg, std::uint64_t seed);

std::vector<ExpertTrajectory> train_experts_ssl(const LabeledDataset& dataset,
                                                const EncoderSpec& student_arch,
                                                const SslExpertConfig& cfg, std::size_t k,
                                                std::uint64_t base_seed,
                                                std::size_t n_threads = 1);

/// Single-trajectory container: an 8-byte magic and version, a length-
/// prefixed JSON blob with the run configuration and loss log, the
/// checkpoint count, then one flattened-parameter tensor per checkpoint in
/// epoch order. Round trips are bit-exact.
void save_trajectory(const std::string& path, const ExpertTrajectory& trajectory);
ExpertTrajectory load_trajectory(const std::string& path);

/// Standalone encoder container: the spec as JSON, then layer 0 weight,
/// layer 0 bias, layer 1 weight, ... in flatten order.
void save_encoder(const std::string& path, const Encoder& encoder);
Encoder load_encoder(const std::string& path);

/// Teacher representation container: the teacher's content hash, then the
/// n x r representation matrix.
void save_teacher_reps(const std::string& path, const TeacherRepresentations& reps);
TeacherRepresentations load_teacher_reps(const std::string& path);

}  // namespace mkdt
