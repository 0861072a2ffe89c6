#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mkdt/datagen.hpp"
#include "mkdt/models.hpp"
#include "mkdt/rng.hpp"
#include "mkdt/tensor.hpp"
#include "mkdt/trajectories.hpp"

namespace mkdt {

/// The learnable distillation state: synthetic inputs, frozen target
/// representations, and a learnable positive scalar step size the synthetic
/// students train with. z_syn is set at construction and never modified by
/// the optimization.
struct SyntheticDataset {
  Tensor d_syn;                           // s x d, learnable
  Tensor z_syn;                           // s x r, frozen
  double alpha_syn = 0.1;                 // > 0
  std::vector<std::size_t> init_indices;  // provenance: source rows in the real set

  std::size_t size() const { return d_syn.rows(); }
};

enum class DistillMode {
  kMkdt,      // inner loop distills toward the frozen targets
  kNaiveSsl,  // inner loop minimizes the sampled self-supervised loss
};

struct DistillConfig {
  std::size_t steps = 300;          // outer distillation steps (S)
  std::size_t inner_steps = 10;     // student updates per outer step (N)
  std::size_t expert_epochs = 2;    // matched expert segment length (M)
  std::size_t max_start_epoch = 2;  // start epoch drawn from {0..max_start_epoch}
  double pixel_lr = 0.05;           // outer step size for the synthetic inputs
  double alpha_lr = 1e-3;           // outer step size for alpha_syn
  double alpha_init = 0.1;          // starting alpha_syn
  std::size_t batch_size = 5;       // synthetic minibatch size in the unroll
  std::size_t ssl_views = 2;        // naive mode: sampled views per example
  double ssl_sigma_aug = 0.1;       // naive mode: augmentation noise
  double outer_momentum = 0.5;      // momentum of the outer optimizer
  double alpha_floor = 1e-6;        // alpha_syn is clamped to >= this
  std::uint64_t seed = 0;
};

/// Throws std::invalid_argument on a malformed config. The requirement that
/// the expert trajectories cover max_start_epoch + expert_epochs epochs is
/// checked against the experts where they are supplied.
void validate(const DistillConfig& cfg);

// ---------------------------------------------------------------------------
// Subset selection for the synthetic initialization.
// ---------------------------------------------------------------------------

/// Ranks examples by their distillation loss at each expert's epoch-1
/// checkpoint, averaged across experts, and returns the `size` hardest in
/// descending-loss order (ties broken by ascending index).
std::vector<std::size_t> select_high_loss_init(const LabeledDataset& dataset,
                                               const std::vector<ExpertTrajectory>& experts,
                                               const Tensor& teacher_reps, std::size_t size);

/// Uniform without-replacement baseline for the same job.
std::vector<std::size_t> select_random_init(std::size_t n, std::size_t size,
                                            std::uint64_t seed);

// ---------------------------------------------------------------------------
// The differentiable unroll.
// ---------------------------------------------------------------------------

/// Everything random about one outer step, fixed up front so the same step
/// can be replayed exactly (the finite-difference oracles depend on this):
/// the start epoch, the synthetic minibatch of every inner step, and (naive
/// mode) the per-step augmentation noise.
struct UnrollPlan {
  DistillMode mode = DistillMode::kMkdt;
  std::size_t start_epoch = 0;
  std::size_t segment_epochs = 1;  // expert epochs matched against
  std::vector<std::vector<std::size_t>> batches;  // one per inner step
  std::vector<Tensor> view_noise;  // naive mode: (batch*views) x d per step
};

/// Serves synthetic minibatches as without-replacement passes in seeded
/// order, reshuffling whenever a pass is exhausted. A trailing batch may be
/// smaller than batch_size so passes never blend.
class SyntheticBatchStream {
 public:
  SyntheticBatchStream(std::size_t set_size, std::size_t batch_size, std::uint64_t seed);
  std::vector<std::size_t> next();

 private:
  std::size_t batch_size_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// Draws the plan for one outer step: the start epoch from rng, minibatches
/// from the stream, and (naive mode) the augmentation noise from rng.
/// input_dim is the synthetic input width (the noise tensors need it).
UnrollPlan make_unroll_plan(DistillMode mode, const DistillConfig& cfg, std::size_t input_dim,
                            Rng& rng, SyntheticBatchStream& stream);

/// Runs the student from the expert's start checkpoint through the planned
/// inner steps on the synthetic data and returns the normalized
/// trajectory-matching loss against the expert's end checkpoint.
double unroll_match_loss(const Tensor& d_syn, const Tensor& z_syn, double alpha,
                         const ExpertTrajectory& expert, const UnrollPlan& plan);

struct UnrollGradients {
  double loss = 0.0;
  Tensor d_pixels;      // dLoss/dD_syn, same shape as d_syn
  double d_alpha = 0.0; // dLoss/dalpha through every inner step
};

/// Same computation with the synthetic inputs and alpha tracked, so the
/// matching loss differentiates through the entire unroll.
UnrollGradients unroll_match_gradients(const Tensor& d_syn, const Tensor& z_syn, double alpha,
                                       const ExpertTrajectory& expert, const UnrollPlan& plan);

// ---------------------------------------------------------------------------
// The outer optimization.
// ---------------------------------------------------------------------------

/// Momentum buffers of the outer optimizer, owned by the loop so individual
/// steps stay composable.
struct OuterState {
  Tensor pixel_velocity;  // zeros like d_syn until the first step
  double alpha_velocity = 0.0;
};

struct StepOutcome {
  double mtt_loss = 0.0;
  std::size_t start_epoch = 0;
  bool skipped = false;  // degenerate expert segment; nothing was updated
};

/// One outer step: plan, differentiate through the unroll, and apply the
/// momentum updates to the synthetic inputs and alpha (clamped to the
/// positive floor). A degenerate expert segment (start equals target) skips
/// the update and reports it instead of aborting.
StepOutcome distill_step(SyntheticDataset& syn, const ExpertTrajectory& expert,
                         const DistillConfig& cfg, DistillMode mode, Rng& rng,
                         SyntheticBatchStream& stream, OuterState& state);

struct DistillLogRow {
  std::size_t step = 0;
  std::size_t expert_id = 0;
  std::size_t start_epoch = 0;
  double mtt_loss = 0.0;
  double alpha_syn = 0.0;
  double pixel_change = 0.0;
};

struct DistillResult {
  SyntheticDataset syn;
  std::vector<DistillLogRow> log;     // one row per executed step
  std::vector<std::string> warnings;  // skipped steps, one line each
};

/// The full optimization: synthetic inputs start as real rows at
/// init_indices with matching frozen teacher rows, then `steps` outer steps
/// against uniformly sampled experts. Deterministic per config.
DistillResult distill(const std::vector<ExpertTrajectory>& experts,
                      const std::vector<std::size_t>& init_indices,
                      const LabeledDataset& dataset, const Tensor& teacher_reps,
                      const DistillConfig& cfg);

/// The baseline with the sampled self-supervised objective in the inner
/// loop and self-supervised expert trajectories; there are no target
/// representations (z_syn is a zero matrix and stays unused).
DistillResult naive_mtt_ssl(const std::vector<ExpertTrajectory>& experts_ssl,
                            const std::vector<std::size_t>& init_indices,
                            const LabeledDataset& dataset, const DistillConfig& cfg);

/// Mean absolute entry-wise drift of the synthetic inputs from a snapshot.
double pixel_change_metric(const Tensor& current, const Tensor& init_snapshot);

// ---------------------------------------------------------------------------
// Persistence.
// ---------------------------------------------------------------------------

/// Container layout: 8-byte magic and version, provenance index array,
/// synthetic input record, target record, then alpha as one f64.
void save_synthetic(const std::string& path, const SyntheticDataset& syn);
SyntheticDataset load_synthetic(const std::string& path);

/// Columns: step,expert_id,start_epoch,mtt_loss,alpha_syn,pixel_change.
void write_distill_log(const std::string& path, const std::vector<DistillLogRow>& rows);

}  // namespace mkdt
