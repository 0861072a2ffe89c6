#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "doctest.h"
#include "mkdt/autodiff.hpp"
#include "mkdt/datagen.hpp"
#include "mkdt/distill.hpp"
#include "mkdt/losses.hpp"
#include "mkdt/serialize.hpp"
#include "mkdt/trajectories.hpp"

using namespace mkdt;

namespace {

LabeledDataset small_dataset(std::size_t d = 4, std::size_t n = 20, std::uint64_t seed = 3) {
  SparseCodingConfig cfg;
  cfg.d = d;
  cfg.num_classes = 2;
  cfg.n = n;
  cfg.sigma_noise = 0.1;
  cfg.seed = seed;
  return generate_sparse_coding(cfg);
}

// A ready-made small world: identity teacher (reps = inputs), two linear
// experts trained for four epochs.
struct LinearWorld {
  LabeledDataset data = small_dataset();
  TeacherRepresentations reps;
  std::vector<ExpertTrajectory> experts;

  LinearWorld() {
    const Encoder teacher = init_encoder(linear_spec(4, 4), InitScheme::kIdentity, 0);
    reps = compute_teacher_reps(teacher, data);
    KdTrainConfig cfg;
    cfg.epochs = 4;
    cfg.batch_size = 4;
    experts = train_experts(data, reps.z, linear_spec(4, 4), cfg, 2, 99);
  }
};

DistillConfig tiny_config() {
  DistillConfig cfg;
  cfg.steps = 5;
  cfg.inner_steps = 3;
  cfg.expert_epochs = 1;
  cfg.max_start_epoch = 2;
  cfg.pixel_lr = 0.01;
  cfg.alpha_lr = 1e-3;
  cfg.alpha_init = 0.1;
  cfg.batch_size = 2;
  cfg.seed = 12;
  return cfg;
}

}  // namespace

TEST_CASE("config validation rejects out-of-range fields") {
  DistillConfig cfg = tiny_config();
  CHECK_NOTHROW(validate(cfg));
  cfg.inner_steps = 0;
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
  cfg = tiny_config();
  cfg.pixel_lr = 0.0;
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
  cfg = tiny_config();
  cfg.alpha_init = -1.0;
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
  cfg = tiny_config();
  cfg.outer_momentum = 1.0;
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
  cfg = tiny_config();
  cfg.ssl_views = 1;
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
}

TEST_CASE("high-loss selection ranks by mean expert loss with ascending ties") {
  const LinearWorld world;
  const std::size_t n = world.data.size();

  const std::vector<std::size_t> all =
      select_high_loss_init(world.data, world.experts, world.reps.z, n);
  REQUIRE(all.size() == n);
  CHECK(std::set<std::size_t>(all.begin(), all.end()).size() == n);

  // Recompute the ranking criterion independently: mean over experts of the
  // per-example squared distance at the epoch-1 checkpoint.
  std::vector<double> loss(n, 0.0);
  for (const ExpertTrajectory& expert : world.experts) {
    const Encoder enc = unflatten(expert.student, expert.checkpoints[1]);
    const Tensor reps = forward(enc, world.data.inputs);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < reps.cols(); ++j) {
        const double diff = reps.at(i, j) - world.reps.z.at(i, j);
        loss[i] += diff * diff / static_cast<double>(world.experts.size());
      }
    }
  }
  for (std::size_t k = 1; k < n; ++k) {
    const bool descending = loss[all[k - 1]] > loss[all[k]];
    const bool tie_ascending = loss[all[k - 1]] == loss[all[k]] && all[k - 1] < all[k];
    CHECK((descending || tie_ascending));
  }

  // The selected subset's mean loss dominates the full-data mean.
  const std::vector<std::size_t> top =
      select_high_loss_init(world.data, world.experts, world.reps.z, n / 10);
  double top_mean = 0.0;
  for (std::size_t i : top) top_mean += loss[i] / static_cast<double>(top.size());
  double full_mean = 0.0;
  for (double l : loss) full_mean += l / static_cast<double>(n);
  CHECK(top_mean >= full_mean);

  CHECK_THROWS_AS(select_high_loss_init(world.data, world.experts, world.reps.z, n + 1),
                  std::invalid_argument);
}

TEST_CASE("a planted high-noise example surfaces in the selected subset") {
  LabeledDataset data = small_dataset(4, 40, 8);
  // Quadruple the noise of one example, keeping it on its class template.
  const std::size_t planted = 7;
  {
    Rng rng(123);
    for (std::size_t j = 0; j < data.dim(); ++j) {
      data.inputs.at(planted, j) = (data.labels[planted] == j ? 1.0 : 0.0) + rng.normal(0, 0.4);
    }
  }
  const Encoder teacher = init_encoder(linear_spec(4, 4), InitScheme::kIdentity, 0);
  const TeacherRepresentations reps = compute_teacher_reps(teacher, data);
  KdTrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  const auto experts = train_experts(data, reps.z, linear_spec(4, 4), cfg, 3, 5);

  const std::vector<std::size_t> top = select_high_loss_init(data, experts, reps.z, 4);
  CHECK(std::find(top.begin(), top.end(), planted) != top.end());
}

TEST_CASE("random selection is a deterministic subset without repeats") {
  const std::vector<std::size_t> a = select_random_init(20, 5, 4);
  const std::vector<std::size_t> b = select_random_init(20, 5, 4);
  const std::vector<std::size_t> c = select_random_init(20, 5, 5);
  CHECK(a == b);
  CHECK(a != c);
  CHECK(std::set<std::size_t>(a.begin(), a.end()).size() == 5);
  for (std::size_t i : a) CHECK(i < 20);
  CHECK_THROWS_AS(select_random_init(4, 5, 0), std::invalid_argument);
}

TEST_CASE("the batch stream makes clean without-replacement passes") {
  SyntheticBatchStream stream(5, 2, 31);
  std::vector<std::size_t> pass;
  std::vector<std::size_t> sizes;
  for (int i = 0; i < 3; ++i) {
    const auto batch = stream.next();
    sizes.push_back(batch.size());
    pass.insert(pass.end(), batch.begin(), batch.end());
  }
  CHECK(sizes == std::vector<std::size_t>{2, 2, 1});  // passes never blend
  std::sort(pass.begin(), pass.end());
  CHECK(pass == std::vector<std::size_t>{0, 1, 2, 3, 4});

  SyntheticBatchStream again(5, 2, 31);
  CHECK(again.next() == SyntheticBatchStream(5, 2, 31).next());
}

TEST_CASE("exact replay of an expert segment gives zero matching loss") {
  // One example, full-batch schedules on both sides, plain SGD with the
  // expert's own learning rate: the unrolled student retraces the expert
  // bit for bit, so the numerator vanishes exactly.
  SparseCodingConfig dcfg;
  dcfg.d = 4;
  dcfg.num_classes = 1;
  dcfg.n = 1;
  dcfg.sigma_noise = 0.1;
  dcfg.seed = 2;
  const LabeledDataset data = generate_sparse_coding(dcfg);
  const Encoder teacher = init_encoder(linear_spec(4, 4), InitScheme::kIdentity, 0);
  const TeacherRepresentations reps = compute_teacher_reps(teacher, data);

  KdTrainConfig kd;
  kd.epochs = 4;
  kd.batch_size = 1;
  kd.momentum = 0.0;
  kd.weight_decay = 0.0;
  const ExpertTrajectory expert = train_expert_kd(data, reps.z, linear_spec(4, 4), kd, 6);

  UnrollPlan plan;
  plan.mode = DistillMode::kMkdt;
  plan.start_epoch = 1;
  plan.segment_epochs = 2;
  plan.batches = {{0}, {0}};  // two inner steps, one epoch each

  const Tensor d_syn = data.inputs;
  const Tensor z_syn = reps.z;
  const double loss = unroll_match_loss(d_syn, z_syn, kd.lr, expert, plan);
  CHECK(loss == 0.0);

  // Perturbing alpha breaks the replay, so the loss must move away from 0.
  CHECK(unroll_match_loss(d_syn, z_syn, kd.lr * 1.5, expert, plan) > 0.0);
}

TEST_CASE("unroll gradients match the closed-form chain rule for one inner step") {
  const LinearWorld world;
  const ExpertTrajectory& expert = world.experts[0];
  const std::vector<std::size_t> init = {0, 5, 10, 15};
  const Tensor d_syn = gather_rows(world.data.inputs, init);
  const Tensor z_syn = gather_rows(world.reps.z, init);
  const double alpha = 0.07;

  UnrollPlan plan;
  plan.mode = DistillMode::kMkdt;
  plan.start_epoch = 1;
  plan.segment_epochs = 1;
  plan.batches = {{0, 1, 2, 3}};  // one full-batch inner step

  const UnrollGradients engine = unroll_match_gradients(d_syn, z_syn, alpha, expert, plan);

  // Hand-derived: W1 = W0 - alpha*G with G = (2/b)(X W0^T - Z)^T X,
  //   L = |W1 - T|^2 / |W0 - T|^2,
  //   dL/dX = (2/b) (X M^T W0 + X W0^T M - Z M) with M = -alpha * 2(W1-T)/den.
  const Encoder start = unflatten(expert.student, expert.checkpoints[1]);
  const Tensor w0 = start.weights[0];
  const Tensor t_end = unflatten(expert.student, expert.checkpoints[2]).weights[0];
  const double b = 4.0;

  const Tensor residual = sub(matmul(d_syn, transpose(w0)), z_syn);
  const Tensor g = scalar_mul(2.0 / b, matmul(transpose(residual), d_syn));
  const Tensor w1 = sub(w0, scalar_mul(alpha, g));
  double den = 0.0;
  double num = 0.0;
  for (std::size_t j = 0; j < w0.size(); ++j) {
    den += (w0.data[j] - t_end.data[j]) * (w0.data[j] - t_end.data[j]);
    num += (w1.data[j] - t_end.data[j]) * (w1.data[j] - t_end.data[j]);
  }
  CHECK(engine.loss == doctest::Approx(num / den).epsilon(1e-12));

  const Tensor m = scalar_mul(-alpha * 2.0 / den, sub(w1, t_end));
  const Tensor d_pixels = scalar_mul(
      2.0 / b, sub(add(matmul(d_syn, matmul(transpose(m), w0)), matmul(d_syn, matmul(transpose(w0), m))),
                   matmul(z_syn, m)));
  REQUIRE(shapes_equal(engine.d_pixels.shape, d_pixels.shape));
  CHECK(max_abs_diff(engine.d_pixels, d_pixels) <= 1e-8);

  // dL/dalpha = <2(W1-T)/den, -G>.
  double d_alpha = 0.0;
  for (std::size_t j = 0; j < w0.size(); ++j) {
    d_alpha += 2.0 * (w1.data[j] - t_end.data[j]) / den * -g.data[j];
  }
  CHECK(engine.d_alpha == doctest::Approx(d_alpha).epsilon(1e-8));
}

TEST_CASE("unroll pixel and alpha gradients survive a finite-difference audit") {
  // A nonlinear student over several inner steps, both modes.
  const LabeledDataset data = small_dataset(4, 20, 9);
  const Encoder teacher = init_encoder(teacher_spec(4, 3), InitScheme::kFanIn, 2);
  const TeacherRepresentations reps = compute_teacher_reps(teacher, data);
  KdTrainConfig kd;
  kd.epochs = 3;
  kd.batch_size = 4;
  const ExpertTrajectory kd_expert = train_expert_kd(data, reps.z, student_spec(4, 3), kd, 21);

  SslExpertConfig ssl;
  ssl.epochs = 3;
  ssl.batch_size = 4;
  const ExpertTrajectory ssl_expert = train_expert_ssl(data, student_spec(4, 3), ssl, 22);

  const std::vector<std::size_t> init = {1, 4, 9, 16};
  const Tensor d_syn = gather_rows(data.inputs, init);
  const Tensor z_syn = gather_rows(reps.z, init);
  const double alpha = 0.05;

  for (DistillMode mode : {DistillMode::kMkdt, DistillMode::kNaiveSsl}) {
    const int mode_id = static_cast<int>(mode);
    CAPTURE(mode_id);
    const ExpertTrajectory& expert = mode == DistillMode::kMkdt ? kd_expert : ssl_expert;

    UnrollPlan plan;
    plan.mode = mode;
    plan.start_epoch = 0;
    plan.segment_epochs = 2;
    plan.batches = {{2, 0}, {1, 3}, {0, 3}};
    if (mode == DistillMode::kNaiveSsl) {
      Rng noise_rng(77);
      for (int s = 0; s < 3; ++s) {
        plan.view_noise.push_back(noise_rng.normal_tensor({4, 4}, 0.0, 0.1));
      }
    }

    const UnrollGradients engine = unroll_match_gradients(d_syn, z_syn, alpha, expert, plan);
    CHECK(std::isfinite(engine.loss));

    Rng pick(5);
    const double h = 1e-5;
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t j = pick.below(d_syn.size());
      Tensor plus = d_syn;
      Tensor minus = d_syn;
      plus.data[j] += h;
      minus.data[j] -= h;
      const double fd = (unroll_match_loss(plus, z_syn, alpha, expert, plan) -
                         unroll_match_loss(minus, z_syn, alpha, expert, plan)) /
                        (2.0 * h);
      CHECK(std::abs(engine.d_pixels.data[j] - fd) <= 1e-4 * std::max(1.0, std::abs(fd)));
    }

    const double fd_alpha = (unroll_match_loss(d_syn, z_syn, alpha + h, expert, plan) -
                             unroll_match_loss(d_syn, z_syn, alpha - h, expert, plan)) /
                            (2.0 * h);
    CHECK(std::abs(engine.d_alpha - fd_alpha) <= 1e-4 * std::max(1.0, std::abs(fd_alpha)));
  }
}

TEST_CASE("zero outer learning rates leave the synthetic set untouched") {
  const LinearWorld world;
  DistillConfig cfg = tiny_config();
  cfg.pixel_lr = 0.0;  // distill_step applies whatever rates it is handed
  cfg.alpha_lr = 0.0;

  SyntheticDataset syn;
  syn.init_indices = {0, 1, 2};
  syn.d_syn = gather_rows(world.data.inputs, syn.init_indices);
  syn.z_syn = gather_rows(world.reps.z, syn.init_indices);
  syn.alpha_syn = cfg.alpha_init;
  const Tensor before = syn.d_syn;

  Rng rng(3);
  SyntheticBatchStream stream(3, 2, 4);
  OuterState state;
  const StepOutcome outcome =
      distill_step(syn, world.experts[0], cfg, DistillMode::kMkdt, rng, stream, state);

  CHECK_FALSE(outcome.skipped);
  CHECK(std::isfinite(outcome.mtt_loss));
  CHECK(outcome.mtt_loss > 0.0);
  CHECK(tensors_equal(syn.d_syn, before));
  CHECK(syn.alpha_syn == cfg.alpha_init);
}

TEST_CASE("the learning-rate floor keeps alpha positive under violent updates") {
  const LinearWorld world;
  DistillConfig cfg = tiny_config();
  cfg.alpha_lr = 1e9;  // guarantees the raw update overshoots the floor

  SyntheticDataset syn;
  syn.init_indices = {0, 1, 2};
  syn.d_syn = gather_rows(world.data.inputs, syn.init_indices);
  syn.z_syn = gather_rows(world.reps.z, syn.init_indices);
  syn.alpha_syn = cfg.alpha_init;

  Rng rng(3);
  SyntheticBatchStream stream(3, 2, 4);
  OuterState state;
  for (int i = 0; i < 3; ++i) {
    distill_step(syn, world.experts[0], cfg, DistillMode::kMkdt, rng, stream, state);
    CHECK(syn.alpha_syn >= cfg.alpha_floor);
  }
}

TEST_CASE("a degenerate expert segment is skipped and reported") {
  const LinearWorld world;
  ExpertTrajectory flat = world.experts[0];
  for (FlatParams& checkpoint : flat.checkpoints) {
    checkpoint = flat.checkpoints.front();  // constant trajectory
  }
  DistillConfig cfg = tiny_config();
  cfg.steps = 3;
  const DistillResult result =
      distill({flat}, {0, 1, 2}, world.data, world.reps.z, cfg);
  CHECK(result.log.empty());
  CHECK(result.warnings.size() == 3);
  CHECK(result.warnings.front().find("degenerate") != std::string::npos);
  // The synthetic set never moved.
  CHECK(tensors_equal(result.syn.d_syn, gather_rows(world.data.inputs, {0, 1, 2})));
}

TEST_CASE("distillation initializes from the real rows and freezes the targets") {
  const LinearWorld world;
  DistillConfig cfg = tiny_config();
  cfg.steps = 0;
  const std::vector<std::size_t> init = {2, 7, 11};
  const DistillResult zero = distill(world.experts, init, world.data, world.reps.z, cfg);
  CHECK(tensors_equal(zero.syn.d_syn, gather_rows(world.data.inputs, init)));
  CHECK(tensors_equal(zero.syn.z_syn, gather_rows(world.reps.z, init)));
  CHECK(zero.syn.alpha_syn == cfg.alpha_init);
  CHECK(zero.log.empty());

  cfg.steps = 6;
  const DistillResult run = distill(world.experts, init, world.data, world.reps.z, cfg);
  // Pixels moved, targets did not.
  CHECK(pixel_change_metric(run.syn.d_syn, zero.syn.d_syn) > 0.0);
  CHECK(tensors_equal(run.syn.z_syn, zero.syn.z_syn));
  CHECK(run.syn.alpha_syn > 0.0);
  REQUIRE(run.log.size() == 6);
  for (const DistillLogRow& row : run.log) {
    CHECK(std::isfinite(row.mtt_loss));
    CHECK(row.alpha_syn > 0.0);
    CHECK(row.expert_id < world.experts.size());
    CHECK(row.start_epoch <= cfg.max_start_epoch);
  }

  // Bitwise determinism of the whole run.
  const DistillResult again = distill(world.experts, init, world.data, world.reps.z, cfg);
  CHECK(tensors_equal(again.syn.d_syn, run.syn.d_syn));
  CHECK(again.syn.alpha_syn == run.syn.alpha_syn);
  REQUIRE(again.log.size() == run.log.size());
  for (std::size_t i = 0; i < run.log.size(); ++i) {
    CHECK(again.log[i].mtt_loss == run.log[i].mtt_loss);
    CHECK(again.log[i].pixel_change == run.log[i].pixel_change);
  }
}

TEST_CASE("distillation validates experts, indices and teacher alignment") {
  const LinearWorld world;
  DistillConfig cfg = tiny_config();

  CHECK_THROWS_AS(distill({}, {0}, world.data, world.reps.z, cfg), std::invalid_argument);
  CHECK_THROWS_AS(distill(world.experts, {0, 0}, world.data, world.reps.z, cfg),
                  std::invalid_argument);
  CHECK_THROWS_AS(distill(world.experts, {world.data.size()}, world.data, world.reps.z, cfg),
                  std::invalid_argument);
  CHECK_THROWS_AS(distill(world.experts, {}, world.data, world.reps.z, cfg),
                  std::invalid_argument);

  // Experts must cover max_start_epoch + expert_epochs.
  cfg.max_start_epoch = 4;
  CHECK_THROWS_AS(distill(world.experts, {0}, world.data, world.reps.z, cfg),
                  std::invalid_argument);
  cfg = tiny_config();

  // Misaligned teacher representations.
  CHECK_THROWS_AS(distill(world.experts, {0}, world.data,
                          slice_rows(world.reps.z, 0, world.data.size() - 1), cfg),
                  std::invalid_argument);
}

TEST_CASE("the naive self-supervised mode runs the same loop without targets") {
  const LabeledDataset data = small_dataset(4, 20, 9);
  SslExpertConfig ssl;
  ssl.epochs = 3;
  ssl.batch_size = 4;
  const auto experts = train_experts_ssl(data, student_spec(4, 3), ssl, 2, 41);

  DistillConfig cfg = tiny_config();
  cfg.steps = 4;
  cfg.max_start_epoch = 1;
  const std::vector<std::size_t> init = {0, 3, 6};
  const DistillResult result = naive_mtt_ssl(experts, init, data, cfg);

  CHECK(tensors_equal(result.syn.z_syn, Tensor::zeros({3, 3})));
  REQUIRE(result.log.size() == 4);
  for (const DistillLogRow& row : result.log) CHECK(std::isfinite(row.mtt_loss));

  const DistillResult again = naive_mtt_ssl(experts, init, data, cfg);
  CHECK(tensors_equal(again.syn.d_syn, result.syn.d_syn));
}

TEST_CASE("pixel change metric is a plain mean absolute difference") {
  const Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(pixel_change_metric(a, a) == 0.0);

  Tensor shifted = a;
  for (double& v : shifted.data) v += 0.5;
  CHECK(pixel_change_metric(shifted, a) == doctest::Approx(0.5).epsilon(1e-15));

  Rng rng(8);
  Tensor perturbed = a;
  double expected = 0.0;
  for (std::size_t j = 0; j < perturbed.size(); ++j) {
    const double delta = rng.normal();
    perturbed.data[j] += delta;
    expected += std::abs(perturbed.data[j] - a.data[j]) / static_cast<double>(a.size());
  }
  CHECK(pixel_change_metric(perturbed, a) == doctest::Approx(expected).epsilon(1e-12));

  CHECK_THROWS_AS(pixel_change_metric(a, Tensor::zeros({3, 2})), std::invalid_argument);
}

TEST_CASE("synthetic datasets round-trip bit-exactly and reject damage") {
  const LinearWorld world;
  DistillConfig cfg = tiny_config();
  cfg.steps = 2;
  const DistillResult result = distill(world.experts, {1, 3, 5}, world.data, world.reps.z, cfg);

  const std::string path = "synthetic_test.bin";
  save_synthetic(path, result.syn);
  const SyntheticDataset loaded = load_synthetic(path);
  CHECK(tensors_equal(loaded.d_syn, result.syn.d_syn));
  CHECK(tensors_equal(loaded.z_syn, result.syn.z_syn));
  CHECK(loaded.alpha_syn == result.syn.alpha_syn);
  CHECK(loaded.init_indices == result.syn.init_indices);

  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "WRONGMAG and then some";
  }
  CHECK_THROWS_AS(load_synthetic(path), io::BadMagicError);
  std::remove(path.c_str());

  SyntheticDataset bad = result.syn;
  bad.alpha_syn = 0.0;
  CHECK_THROWS_AS(save_synthetic(path, bad), std::invalid_argument);
}

TEST_CASE("distillation log files carry the documented columns") {
  const std::string path = "distill_log_test.csv";
  std::vector<DistillLogRow> rows(1);
  rows[0].step = 3;
  rows[0].expert_id = 1;
  rows[0].start_epoch = 2;
  rows[0].mtt_loss = 0.75;
  rows[0].alpha_syn = 0.125;
  rows[0].pixel_change = 0.25;
  write_distill_log(path, rows);

  std::ifstream in(path);
  std::string header;
  std::string line;
  std::getline(in, header);
  std::getline(in, line);
  CHECK(header == "step,expert_id,start_epoch,mtt_loss,alpha_syn,pixel_change");
  CHECK(line == "3,1,2,0.75,0.125,0.25");
  std::remove(path.c_str());
}
