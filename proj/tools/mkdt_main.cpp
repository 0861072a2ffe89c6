// mkdt — command-line driver for the desk-scale distillation laboratory.
//
// Every subcommand is a pure function of (config file, input files, seed):
// it loads its inputs, runs one pipeline stage, writes the outputs, and
// drops a manifest recording content hashes of everything it touched, so a
// rerun can be checked for byte identity. Failures print one machine-
// readable JSON record to stderr and exit nonzero.
//
// The environment variable MKDT_SEED, when set, overrides every seed field
// in the loaded config (and the --seed flag of select-init).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mkdt/datagen.hpp"
#include "mkdt/distill.hpp"
#include "mkdt/eval.hpp"
#include "mkdt/manifest.hpp"
#include "mkdt/models.hpp"
#include "mkdt/rng.hpp"
#include "mkdt/trajectories.hpp"
#include "mkdt/variance_lab.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config loading with schema validation.
// ---------------------------------------------------------------------------

enum class FieldType { kUnsigned, kNumber, kString, kBool, kArray, kObject };

struct Field {
  const char* key;
  FieldType type;
  bool required;
};

const char* type_name(FieldType t) {
  switch (t) {
    case FieldType::kUnsigned: return "unsigned integer";
    case FieldType::kNumber: return "number";
    case FieldType::kString: return "string";
    case FieldType::kBool: return "bool";
    case FieldType::kArray: return "array";
    case FieldType::kObject: return "object";
  }
  return "?";
}

bool type_matches(const json& v, FieldType t) {
  switch (t) {
    case FieldType::kUnsigned:
      return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
    case FieldType::kNumber: return v.is_number();
    case FieldType::kString: return v.is_string();
    case FieldType::kBool: return v.is_boolean();
    case FieldType::kArray: return v.is_array();
    case FieldType::kObject: return v.is_object();
  }
  return false;
}

/// Carries the full machine-readable record for a config that failed its
/// schema: which keys are missing, unknown, or of the wrong type.
struct SchemaError : std::runtime_error {
  json record;
  explicit SchemaError(json r) : std::runtime_error(r.dump()), record(std::move(r)) {}
};

json check_schema(const json& config, const std::string& where, const std::vector<Field>& schema) {
  if (!config.is_object()) {
    throw SchemaError(json{{"error", "config schema"}, {"where", where},
                           {"detail", "top level must be a JSON object"}});
  }
  json missing = json::array();
  json unknown = json::array();
  json wrong_type = json::array();
  for (const Field& field : schema) {
    if (!config.contains(field.key)) {
      if (field.required) missing.push_back(field.key);
      continue;
    }
    if (!type_matches(config.at(field.key), field.type)) {
      wrong_type.push_back(std::string(field.key) + " (expected " + type_name(field.type) + ")");
    }
  }
  for (const auto& item : config.items()) {
    bool known = false;
    for (const Field& field : schema) {
      if (item.key() == field.key) {
        known = true;
        break;
      }
    }
    if (!known) unknown.push_back(item.key());
  }
  if (!missing.empty() || !unknown.empty() || !wrong_type.empty()) {
    throw SchemaError(json{{"error", "config schema"},
                           {"where", where},
                           {"missing_keys", missing},
                           {"unknown_keys", unknown},
                           {"wrong_type_keys", wrong_type}});
  }
  return config;
}

json load_config(const std::string& path, const std::string& command,
                 const std::vector<Field>& schema) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open config file '" + path + "'");
  }
  json config;
  try {
    config = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("config '" + path + "' is not valid JSON: " + e.what());
  }
  return check_schema(config, command, schema);
}

/// MKDT_SEED overrides every seed-like key the config actually has.
void apply_seed_override(json& config) {
  const char* env = std::getenv("MKDT_SEED");
  if (env == nullptr) return;
  std::uint64_t seed = 0;
  try {
    seed = std::stoull(env);
  } catch (const std::exception&) {
    throw std::runtime_error(std::string("MKDT_SEED is not an unsigned integer: '") + env + "'");
  }
  for (const char* key : {"seed", "base_seed", "init_seed"}) {
    if (config.contains(key)) config[key] = seed;
  }
}

std::uint64_t seed_flag_override(std::uint64_t flag_value) {
  const char* env = std::getenv("MKDT_SEED");
  if (env == nullptr) return flag_value;
  return std::stoull(env);
}

template <typename T>
T get_or(const json& config, const char* key, T fallback) {
  if (!config.contains(key)) return fallback;
  return config.at(key).get<T>();
}

// ---------------------------------------------------------------------------
// Run manifests.
// ---------------------------------------------------------------------------

struct RunManifest {
  std::string command;
  std::string config_path;  // empty when the command takes no config
  std::uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();

  json file_record(const std::string& path) const {
    const mkdt::ManifestEntry entry = mkdt::manifest_entry_for(path);
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(entry.content_hash));
    return json{{"path", path}, {"hash", hex}, {"bytes", entry.bytes}};
  }

  void write(const std::string& path) const {
    const auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(
        std::chrono::steady_clock::now() - started);
    json doc;
    doc["command"] = command;
    doc["config"] = config_path;
    doc["seed"] = seed;
    doc["wall_clock_ms"] = elapsed.count();
    doc["inputs"] = json::array();
    for (const std::string& p : inputs) doc["inputs"].push_back(file_record(p));
    doc["outputs"] = json::array();
    for (const std::string& p : outputs) doc["outputs"].push_back(file_record(p));
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open manifest '" + path + "' for writing");
    out << doc.dump(2) << '\n';
    if (!out.flush()) throw std::runtime_error("failed while writing manifest '" + path + "'");
  }
};

std::string default_manifest_path(const std::string& first_output) {
  return first_output + ".manifest.json";
}

// ---------------------------------------------------------------------------
// Shared loading helpers.
// ---------------------------------------------------------------------------

std::vector<mkdt::ExpertTrajectory> load_expert_dir(const std::string& dir,
                                                    std::vector<std::string>* paths_out) {
  std::vector<std::string> paths;
  if (!fs::is_directory(dir)) {
    throw std::runtime_error("expert directory '" + dir + "' does not exist");
  }
  for (const fs::directory_entry& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".traj") {
      paths.push_back(entry.path().string());
    }
  }
  if (paths.empty()) {
    throw std::runtime_error("expert directory '" + dir + "' holds no .traj files");
  }
  std::sort(paths.begin(), paths.end());
  std::vector<mkdt::ExpertTrajectory> experts;
  for (const std::string& path : paths) experts.push_back(mkdt::load_trajectory(path));
  if (paths_out != nullptr) *paths_out = std::move(paths);
  return experts;
}

std::vector<std::size_t> load_init_indices(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open init file '" + path + "'");
  json doc;
  try {
    doc = json::parse(in);
    return doc.at("indices").get<std::vector<std::size_t>>();
  } catch (const json::exception& e) {
    throw std::runtime_error("init file '" + path + "' is malformed: " + e.what());
  }
}

mkdt::LossKind loss_kind_from_name(const std::string& name) {
  if (name == "sl") return mkdt::LossKind::kSupervised;
  if (name == "ssl") return mkdt::LossKind::kSelfSupervised;
  if (name == "kd") return mkdt::LossKind::kKnowledgeDistillation;
  throw std::runtime_error("unknown loss kind '" + name + "' (expected sl, ssl or kd)");
}

// ---------------------------------------------------------------------------
// Subcommand implementations. Each returns the manifest it filled.
// ---------------------------------------------------------------------------

void run_gen_data(const std::string& config_path, const std::string& out,
                  const std::string& manifest_path) {
  static const std::vector<Field> schema = {
      {"d", FieldType::kUnsigned, true},           {"num_classes", FieldType::kUnsigned, true},
      {"n", FieldType::kUnsigned, true},           {"sigma_noise", FieldType::kNumber, true},
      {"seed", FieldType::kUnsigned, false},
  };
  json config = load_config(config_path, "gen-data", schema);
  apply_seed_override(config);

  mkdt::SparseCodingConfig cfg;
  cfg.d = config.at("d").get<std::size_t>();
  cfg.num_classes = config.at("num_classes").get<std::size_t>();
  cfg.n = config.at("n").get<std::size_t>();
  cfg.sigma_noise = config.at("sigma_noise").get<double>();
  cfg.seed = get_or<std::uint64_t>(config, "seed", 0);

  RunManifest manifest{"gen-data", config_path, cfg.seed, {config_path}, {out}};
  mkdt::save_dataset(out, mkdt::generate_sparse_coding(cfg));
  manifest.write(manifest_path.empty() ? default_manifest_path(out) : manifest_path);
}

void run_train_teacher(const std::string& config_path, const std::string& data_path,
                       const std::string& out, const std::string& manifest_path) {
  static const std::vector<Field> schema = {
      {"r", FieldType::kUnsigned, true},        {"epochs", FieldType::kUnsigned, false},
      {"batch_size", FieldType::kUnsigned, false}, {"lr", FieldType::kNumber, false},
      {"lambda", FieldType::kNumber, false},    {"sigma_aug", FieldType::kNumber, false},
      {"optimizer", FieldType::kString, false}, {"seed", FieldType::kUnsigned, false},
  };
  json config = load_config(config_path, "train-teacher", schema);
  apply_seed_override(config);

  const mkdt::LabeledDataset data = mkdt::load_dataset(data_path);
  mkdt::SslTrainConfig cfg;
  cfg.epochs = get_or<std::size_t>(config, "epochs", cfg.epochs);
  cfg.batch_size = get_or<std::size_t>(config, "batch_size", cfg.batch_size);
  cfg.lr = get_or<double>(config, "lr", cfg.lr);
  cfg.lambda = get_or<double>(config, "lambda", cfg.lambda);
  cfg.sigma_aug = get_or<double>(config, "sigma_aug", cfg.sigma_aug);
  const std::string optimizer = get_or<std::string>(config, "optimizer", "sgd");
  if (optimizer == "adam") {
    cfg.optimizer = mkdt::Optimizer::kAdam;
  } else if (optimizer != "sgd") {
    throw std::runtime_error("unknown optimizer '" + optimizer + "' (expected sgd or adam)");
  }
  const std::uint64_t seed = get_or<std::uint64_t>(config, "seed", 0);

  RunManifest manifest{"train-teacher", config_path, seed, {config_path, data_path}, {out}};
  const mkdt::TeacherRun run = mkdt::train_teacher_ssl(
      data, mkdt::teacher_spec(data.dim(), config.at("r").get<std::size_t>()), cfg, seed);
  mkdt::save_encoder(out, run.encoder);
  manifest.write(manifest_path.empty() ? default_manifest_path(out) : manifest_path);
}

void run_teacher_reps(const std::string& teacher_path, const std::string& data_path,
                      const std::string& out, const std::string& manifest_path) {
  const mkdt::Encoder teacher = mkdt::load_encoder(teacher_path);
  const mkdt::LabeledDataset data = mkdt::load_dataset(data_path);
  RunManifest manifest{"teacher-reps", "", 0, {teacher_path, data_path}, {out}};
  mkdt::save_teacher_reps(out, mkdt::compute_teacher_reps(teacher, data));
  manifest.write(manifest_path.empty() ? default_manifest_path(out) : manifest_path);
}

void run_train_experts(const std::string& config_path, const std::string& data_path,
                       const std::string& reps_path, const std::string& out_dir,
                       const std::string& mode, std::size_t k, std::size_t threads,
                       const std::string& manifest_path) {
  json config;
  if (mode == "kd") {
    static const std::vector<Field> schema = {
        {"r", FieldType::kUnsigned, true},
        {"epochs", FieldType::kUnsigned, false},
        {"batch_size", FieldType::kUnsigned, false},
        {"lr", FieldType::kNumber, false},
        {"momentum", FieldType::kNumber, false},
        {"weight_decay", FieldType::kNumber, false},
        {"init", FieldType::kString, false},
        {"base_seed", FieldType::kUnsigned, false},
    };
    config = load_config(config_path, "train-experts", schema);
  } else if (mode == "ssl") {
    static const std::vector<Field> schema = {
        {"r", FieldType::kUnsigned, true},
        {"epochs", FieldType::kUnsigned, false},
        {"batch_size", FieldType::kUnsigned, false},
        {"lr", FieldType::kNumber, false},
        {"views", FieldType::kUnsigned, false},
        {"sigma_aug", FieldType::kNumber, false},
        {"init", FieldType::kString, false},
        {"base_seed", FieldType::kUnsigned, false},
    };
    config = load_config(config_path, "train-experts", schema);
  } else {
    throw std::runtime_error("unknown expert mode '" + mode + "' (expected kd or ssl)");
  }
  apply_seed_override(config);
  if (k == 0) throw std::runtime_error("--k must be >= 1");

  const mkdt::LabeledDataset data = mkdt::load_dataset(data_path);
  const std::size_t r = config.at("r").get<std::size_t>();
  const std::uint64_t base_seed = get_or<std::uint64_t>(config, "base_seed", 0);
  const std::string init = get_or<std::string>(config, "init", "fan_in");
  if (init != "fan_in" && init != "identity") {
    throw std::runtime_error("unknown init '" + init + "' (expected fan_in or identity)");
  }

  RunManifest manifest{"train-experts", config_path, base_seed, {config_path, data_path}, {}};
  std::vector<mkdt::ExpertTrajectory> experts;
  if (mode == "kd") {
    if (reps_path.empty()) throw std::runtime_error("--reps is required in kd mode");
    manifest.inputs.push_back(reps_path);
    const mkdt::TeacherRepresentations reps = mkdt::load_teacher_reps(reps_path);
    mkdt::KdTrainConfig cfg;
    cfg.epochs = get_or<std::size_t>(config, "epochs", cfg.epochs);
    cfg.batch_size = get_or<std::size_t>(config, "batch_size", cfg.batch_size);
    cfg.lr = get_or<double>(config, "lr", cfg.lr);
    cfg.momentum = get_or<double>(config, "momentum", cfg.momentum);
    cfg.weight_decay = get_or<double>(config, "weight_decay", cfg.weight_decay);
    cfg.init = init == "identity" ? mkdt::InitScheme::kIdentity : mkdt::InitScheme::kFanIn;
    experts = mkdt::train_experts(data, reps.z, mkdt::student_spec(data.dim(), r), cfg, k,
                                  base_seed, threads);
  } else {
    mkdt::SslExpertConfig cfg;
    cfg.epochs = get_or<std::size_t>(config, "epochs", cfg.epochs);
    cfg.batch_size = get_or<std::size_t>(config, "batch_size", cfg.batch_size);
    cfg.lr = get_or<double>(config, "lr", cfg.lr);
    cfg.views = get_or<std::size_t>(config, "views", cfg.views);
    cfg.sigma_aug = get_or<double>(config, "sigma_aug", cfg.sigma_aug);
    cfg.init = init == "identity" ? mkdt::InitScheme::kIdentity : mkdt::InitScheme::kFanIn;
    experts = mkdt::train_experts_ssl(data, mkdt::student_spec(data.dim(), r), cfg, k,
                                      base_seed, threads);
  }

  fs::create_directories(out_dir);
  for (std::size_t i = 0; i < experts.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "expert_%03zu.traj", i);
    const std::string path = (fs::path(out_dir) / name).string();
    mkdt::save_trajectory(path, experts[i]);
    manifest.outputs.push_back(path);
  }
  manifest.write(manifest_path.empty() ? (fs::path(out_dir) / "manifest.json").string()
                                       : manifest_path);
}

void run_select_init(const std::string& mode, std::size_t size, const std::string& data_path,
                     const std::string& experts_dir, const std::string& reps_path,
                     std::uint64_t seed, const std::string& out,
                     const std::string& manifest_path) {
  const mkdt::LabeledDataset data = mkdt::load_dataset(data_path);
  RunManifest manifest{"select-init", "", seed, {data_path}, {out}};

  std::vector<std::size_t> indices;
  if (mode == "random") {
    indices = mkdt::select_random_init(data.size(), size, seed);
  } else if (mode == "high-loss") {
    if (experts_dir.empty() || reps_path.empty()) {
      throw std::runtime_error("high-loss mode needs --experts-dir and --reps");
    }
    std::vector<std::string> expert_paths;
    const auto experts = load_expert_dir(experts_dir, &expert_paths);
    manifest.inputs.insert(manifest.inputs.end(), expert_paths.begin(), expert_paths.end());
    manifest.inputs.push_back(reps_path);
    const mkdt::TeacherRepresentations reps = mkdt::load_teacher_reps(reps_path);
    indices = mkdt::select_high_loss_init(data, experts, reps.z, size);
  } else {
    throw std::runtime_error("unknown init mode '" + mode + "' (expected random or high-loss)");
  }

  json doc{{"mode", mode}, {"size", size}, {"indices", indices}};
  std::ofstream file(out, std::ios::trunc);
  if (!file) throw std::runtime_error("cannot open '" + out + "' for writing");
  file << doc.dump(2) << '\n';
  if (!file.flush()) throw std::runtime_error("failed while writing '" + out + "'");
  manifest.write(manifest_path.empty() ? default_manifest_path(out) : manifest_path);
}

void run_distill(const std::string& config_path, const std::string& data_path,
                 const std::string& experts_dir, const std::string& reps_path,
                 const std::string& init_path, const std::string& mode, const std::string& out,
                 const std::string& log_path, const std::string& manifest_path) {
  static const std::vector<Field> schema = {
      {"steps", FieldType::kUnsigned, false},
      {"inner_steps", FieldType::kUnsigned, false},
      {"expert_epochs", FieldType::kUnsigned, false},
      {"max_start_epoch", FieldType::kUnsigned, false},
      {"pixel_lr", FieldType::kNumber, false},
      {"alpha_lr", FieldType::kNumber, false},
      {"alpha_init", FieldType::kNumber, false},
      {"batch_size", FieldType::kUnsigned, false},
      {"ssl_views", FieldType::kUnsigned, false},
      {"ssl_sigma_aug", FieldType::kNumber, false},
      {"outer_momentum", FieldType::kNumber, false},
      {"seed", FieldType::kUnsigned, false},
  };
  json config = load_config(config_path, "distill", schema);
  apply_seed_override(config);

  mkdt::DistillConfig cfg;
  cfg.steps = get_or<std::size_t>(config, "steps", cfg.steps);
  cfg.inner_steps = get_or<std::size_t>(config, "inner_steps", cfg.inner_steps);
  cfg.expert_epochs = get_or<std::size_t>(config, "expert_epochs", cfg.expert_epochs);
  cfg.max_start_epoch = get_or<std::size_t>(config, "max_start_epoch", cfg.max_start_epoch);
  cfg.pixel_lr = get_or<double>(config, "pixel_lr", cfg.pixel_lr);
  cfg.alpha_lr = get_or<double>(config, "alpha_lr", cfg.alpha_lr);
  cfg.alpha_init = get_or<double>(config, "alpha_init", cfg.alpha_init);
  cfg.batch_size = get_or<std::size_t>(config, "batch_size", cfg.batch_size);
  cfg.ssl_views = get_or<std::size_t>(config, "ssl_views", cfg.ssl_views);
  cfg.ssl_sigma_aug = get_or<double>(config, "ssl_sigma_aug", cfg.ssl_sigma_aug);
  cfg.outer_momentum = get_or<double>(config, "outer_momentum", cfg.outer_momentum);
  cfg.seed = get_or<std::uint64_t>(config, "seed", cfg.seed);

  const mkdt::LabeledDataset data = mkdt::load_dataset(data_path);
  std::vector<std::string> expert_paths;
  const auto experts = load_expert_dir(experts_dir, &expert_paths);
  const std::vector<std::size_t> init = load_init_indices(init_path);

  RunManifest manifest{"distill", config_path, cfg.seed,
                       {config_path, data_path, init_path}, {out, log_path}};
  manifest.inputs.insert(manifest.inputs.end(), expert_paths.begin(), expert_paths.end());

  mkdt::DistillResult result;
  if (mode == "mkdt") {
    if (reps_path.empty()) throw std::runtime_error("--reps is required in mkdt mode");
    manifest.inputs.push_back(reps_path);
    const mkdt::TeacherRepresentations reps = mkdt::load_teacher_reps(reps_path);
    result = mkdt::distill(experts, init, data, reps.z, cfg);
  } else if (mode == "naive-ssl") {
    result = mkdt::naive_mtt_ssl(experts, init, data, cfg);
  } else {
    throw std::runtime_error("unknown distill mode '" + mode + "' (expected mkdt or naive-ssl)");
  }

  mkdt::save_synthetic(out, result.syn);
  mkdt::write_distill_log(log_path, result.log);
  for (const std::string& warning : result.warnings) std::cerr << warning << '\n';
  manifest.write(manifest_path.empty() ? default_manifest_path(out) : manifest_path);
}

void run_pretrain(const std::string& config_path, const std::string& syn_path,
                  const std::string& out, const std::string& manifest_path) {
  static const std::vector<Field> schema = {
      {"r", FieldType::kUnsigned, true},
      {"epochs", FieldType::kUnsigned, false},
      {"seed", FieldType::kUnsigned, false},
  };
  json config = load_config(config_path, "pretrain", schema);
  apply_seed_override(config);

  const mkdt::SyntheticDataset syn = mkdt::load_synthetic(syn_path);
  const std::size_t r = config.at("r").get<std::size_t>();
  const std::size_t epochs = get_or<std::size_t>(config, "epochs", 20);
  const std::uint64_t seed = get_or<std::uint64_t>(config, "seed", 0);

  RunManifest manifest{"pretrain", config_path, seed, {config_path, syn_path}, {out}};
  mkdt::save_encoder(out, mkdt::pretrain_on_synthetic(
                              syn, mkdt::student_spec(syn.d_syn.cols(), r), epochs, seed));
  manifest.write(manifest_path.empty() ? default_manifest_path(out) : manifest_path);
}

json probe_result_json(const mkdt::ProbeResult& result) {
  json per_class = json::array();
  for (double a : result.per_class_accuracy) {
    if (std::isnan(a)) {
      per_class.push_back(nullptr);
    } else {
      per_class.push_back(a);
    }
  }
  return json{{"accuracy", result.accuracy},
              {"err", result.err},
              {"per_class_accuracy", per_class},
              {"train_labeled", result.train_labeled},
              {"holdout_size", result.holdout_size},
              {"iterations", result.iterations},
              {"grad_norm", result.grad_norm}};
}

mkdt::ProbeConfig probe_config_from_json(const json& config) {
  mkdt::ProbeConfig cfg;
  cfg.l2_weight = get_or<double>(config, "l2_weight", cfg.l2_weight);
  cfg.label_fraction = get_or<double>(config, "label_fraction", cfg.label_fraction);
  cfg.holdout_fraction = get_or<double>(config, "holdout_fraction", cfg.holdout_fraction);
  cfg.max_iterations = get_or<std::size_t>(config, "max_iterations", cfg.max_iterations);
  cfg.grad_tolerance = get_or<double>(config, "grad_tolerance", cfg.grad_tolerance);
  cfg.seed = get_or<std::uint64_t>(config, "seed", cfg.seed);
  return cfg;
}

const std::vector<Field>& probe_schema() {
  static const std::vector<Field> schema = {
      {"l2_weight", FieldType::kNumber, false},
      {"label_fraction", FieldType::kNumber, false},
      {"holdout_fraction", FieldType::kNumber, false},
      {"max_iterations", FieldType::kUnsigned, false},
      {"grad_tolerance", FieldType::kNumber, false},
      {"seed", FieldType::kUnsigned, false},
  };
  return schema;
}

void run_probe(const std::string& config_path, const std::string& encoder_path,
               const std::string& data_path, const std::string& out,
               const std::string& manifest_path) {
  json config = load_config(config_path, "probe", probe_schema());
  apply_seed_override(config);
  const mkdt::ProbeConfig cfg = probe_config_from_json(config);

  const mkdt::Encoder encoder = mkdt::load_encoder(encoder_path);
  const mkdt::LabeledDataset data = mkdt::load_dataset(data_path);

  RunManifest manifest{"probe", config_path, cfg.seed, {config_path, encoder_path, data_path},
                       {out}};
  const mkdt::ProbeResult result = mkdt::linear_probe(encoder, data, cfg);
  std::ofstream file(out, std::ios::trunc);
  if (!file) throw std::runtime_error("cannot open '" + out + "' for writing");
  file << probe_result_json(result).dump(2) << '\n';
  if (!file.flush()) throw std::runtime_error("failed while writing '" + out + "'");
  manifest.write(manifest_path.empty() ? default_manifest_path(out) : manifest_path);
}

void run_compare(const std::string& config_path, const std::string& data_path,
                 const std::string& out, const std::string& manifest_path) {
  static const std::vector<Field> schema = {
      {"methods", FieldType::kArray, true},
      {"probe", FieldType::kObject, false},
      {"n_seeds", FieldType::kUnsigned, false},
      {"threads", FieldType::kUnsigned, false},
  };
  const json config = load_config(config_path, "compare", schema);

  json probe_json = config.contains("probe") ? config.at("probe") : json::object();
  check_schema(probe_json, "compare.probe", probe_schema());
  apply_seed_override(probe_json);
  const mkdt::ProbeConfig probe_cfg = probe_config_from_json(probe_json);

  const mkdt::LabeledDataset data = mkdt::load_dataset(data_path);
  RunManifest manifest{"compare", config_path, probe_cfg.seed, {config_path, data_path}, {out}};

  // Method kinds mirror the report rows: a fresh encoder, a stored synthetic
  // set, or a per-seed real-data subset pre-trained at a fixed step size.
  static const std::vector<Field> method_schema = {
      {"name", FieldType::kString, true},   {"kind", FieldType::kString, true},
      {"r", FieldType::kUnsigned, true},    {"path", FieldType::kString, false},
      {"reps", FieldType::kString, false},  {"experts_dir", FieldType::kString, false},
      {"size", FieldType::kUnsigned, false}, {"alpha", FieldType::kNumber, false},
      {"epochs", FieldType::kUnsigned, false},
  };
  std::vector<mkdt::MethodSpec> methods;
  for (const json& entry : config.at("methods")) {
    check_schema(entry, "compare.methods[]", method_schema);
    const std::string name = entry.at("name").get<std::string>();
    const std::string kind = entry.at("kind").get<std::string>();
    const std::size_t r = entry.at("r").get<std::size_t>();
    const std::size_t epochs = get_or<std::size_t>(entry, "epochs", 20);
    const double alpha = get_or<double>(entry, "alpha", 0.1);
    const mkdt::EncoderSpec arch = mkdt::student_spec(data.dim(), r);

    if (kind == "init") {
      methods.push_back({name, [arch](std::uint64_t seed) {
                           return mkdt::init_encoder(arch, mkdt::InitScheme::kFanIn, seed);
                         }});
    } else if (kind == "synthetic") {
      if (!entry.contains("path")) throw std::runtime_error("method '" + name + "' needs path");
      const std::string path = entry.at("path").get<std::string>();
      manifest.inputs.push_back(path);
      const mkdt::SyntheticDataset syn = mkdt::load_synthetic(path);
      methods.push_back({name, [syn, arch, epochs](std::uint64_t seed) {
                           return mkdt::pretrain_on_synthetic(syn, arch, epochs, seed);
                         }});
    } else if (kind == "random_subset" || kind == "high_loss_subset") {
      if (!entry.contains("reps") || !entry.contains("size")) {
        throw std::runtime_error("method '" + name + "' needs reps and size");
      }
      const std::string reps_path = entry.at("reps").get<std::string>();
      manifest.inputs.push_back(reps_path);
      const mkdt::TeacherRepresentations reps = mkdt::load_teacher_reps(reps_path);
      const std::size_t size = entry.at("size").get<std::size_t>();
      if (kind == "random_subset") {
        // The subset is redrawn per evaluation seed; the high-loss subset is
        // a fixed function of the experts, so it is computed once.
        methods.push_back({name, [&data, reps, arch, size, alpha, epochs](std::uint64_t seed) {
                             const auto subset =
                                 mkdt::select_random_init(data.size(), size, seed);
                             return mkdt::pretrain_on_synthetic(
                                 mkdt::subset_as_synthetic(data, reps.z, subset, alpha), arch,
                                 epochs, seed);
                           }});
      } else {
        if (!entry.contains("experts_dir")) {
          throw std::runtime_error("method '" + name + "' needs experts_dir");
        }
        std::vector<std::string> expert_paths;
        const auto experts =
            load_expert_dir(entry.at("experts_dir").get<std::string>(), &expert_paths);
        manifest.inputs.insert(manifest.inputs.end(), expert_paths.begin(), expert_paths.end());
        const auto subset = mkdt::select_high_loss_init(data, experts, reps.z, size);
        const mkdt::SyntheticDataset syn =
            mkdt::subset_as_synthetic(data, reps.z, subset, alpha);
        methods.push_back({name, [syn, arch, epochs](std::uint64_t seed) {
                             return mkdt::pretrain_on_synthetic(syn, arch, epochs, seed);
                           }});
      }
    } else {
      throw std::runtime_error("unknown method kind '" + kind +
                               "' (expected init, synthetic, random_subset or high_loss_subset)");
    }
  }

  const auto reports =
      mkdt::compare_methods(data, methods, probe_cfg, get_or<std::size_t>(config, "n_seeds", 5),
                            get_or<std::size_t>(config, "threads", 1));
  mkdt::write_compare_csv(out, reports);
  manifest.write(manifest_path.empty() ? default_manifest_path(out) : manifest_path);
}

void run_variance(const std::string& config_path, const std::string& experiment,
                  const std::string& data_path, const std::string& out,
                  const std::string& manifest_path) {
  const mkdt::LabeledDataset data = mkdt::load_dataset(data_path);
  std::vector<mkdt::VarianceCsvRow> rows;
  RunManifest manifest{"variance", config_path, 0, {config_path, data_path}, {out}};

  const auto kind_list = [](const json& config) {
    std::vector<std::string> kinds = get_or(config, "kinds", std::vector<std::string>{"sl",
                                                                                      "ssl"});
    return kinds;
  };

  if (experiment == "grad") {
    static const std::vector<Field> schema = {
        {"kinds", FieldType::kArray, false},    {"batch_size", FieldType::kUnsigned, true},
        {"n_samples", FieldType::kUnsigned, true}, {"seed", FieldType::kUnsigned, false},
        {"exact", FieldType::kBool, false},
    };
    json config = load_config(config_path, "variance", schema);
    apply_seed_override(config);
    manifest.seed = get_or<std::uint64_t>(config, "seed", 0);
    const std::size_t batch = config.at("batch_size").get<std::size_t>();
    for (const std::string& kind_name : kind_list(config)) {
      const mkdt::LossKind kind = loss_kind_from_name(kind_name);
      const mkdt::VarianceReport mc = mkdt::grad_variance_mc(
          kind, data, batch, config.at("n_samples").get<std::size_t>(), manifest.seed);
      rows.push_back({"grad", kind_name, "batch_size", static_cast<double>(batch), mc.estimate,
                      mc.standard_error, mc.n_samples});
      if (get_or<bool>(config, "exact", false)) {
        const mkdt::VarianceReport exact = mkdt::grad_variance_exact(kind, data, batch);
        rows.push_back({"grad_exact", kind_name, "batch_size", static_cast<double>(batch),
                        exact.estimate, exact.standard_error, exact.n_samples});
      }
    }
  } else if (experiment == "partition") {
    static const std::vector<Field> schema = {
        {"kinds", FieldType::kArray, false},  {"batch_size", FieldType::kUnsigned, true},
        {"n_partitions", FieldType::kUnsigned, true}, {"lr", FieldType::kNumber, true},
        {"seed", FieldType::kUnsigned, false},
    };
    json config = load_config(config_path, "variance", schema);
    apply_seed_override(config);
    manifest.seed = get_or<std::uint64_t>(config, "seed", 0);
    for (const std::string& kind_name : kind_list(config)) {
      const mkdt::VarianceReport report = mkdt::partition_variance(
          loss_kind_from_name(kind_name), data, config.at("batch_size").get<std::size_t>(),
          config.at("n_partitions").get<std::size_t>(), config.at("lr").get<double>(),
          manifest.seed);
      rows.push_back({"partition", kind_name, "n_partitions",
                      static_cast<double>(config.at("n_partitions").get<std::size_t>()),
                      report.estimate, report.standard_error, report.n_samples});
    }
  } else if (experiment == "trajectory") {
    static const std::vector<Field> schema = {
        {"kinds", FieldType::kArray, false},   {"lengths", FieldType::kArray, true},
        {"n_runs", FieldType::kUnsigned, true}, {"r", FieldType::kUnsigned, true},
        {"batch_size", FieldType::kUnsigned, false}, {"lr", FieldType::kNumber, false},
        {"views", FieldType::kUnsigned, false}, {"sigma_aug", FieldType::kNumber, false},
        {"reps", FieldType::kString, false},   {"init_seed", FieldType::kUnsigned, false},
        {"seed", FieldType::kUnsigned, false},
    };
    json config = load_config(config_path, "variance", schema);
    apply_seed_override(config);
    manifest.seed = get_or<std::uint64_t>(config, "seed", 0);
    const auto lengths = config.at("lengths").get<std::vector<std::size_t>>();
    mkdt::TrajectoryTrainConfig cfg;
    cfg.batch_size = get_or<std::size_t>(config, "batch_size", cfg.batch_size);
    cfg.lr = get_or<double>(config, "lr", cfg.lr);
    cfg.views = get_or<std::size_t>(config, "views", cfg.views);
    cfg.sigma_aug = get_or<double>(config, "sigma_aug", cfg.sigma_aug);
    if (config.contains("reps")) {
      const std::string reps_path = config.at("reps").get<std::string>();
      manifest.inputs.push_back(reps_path);
      cfg.teacher_reps = mkdt::load_teacher_reps(reps_path).z;
    }
    const mkdt::Encoder init = mkdt::init_encoder(
        mkdt::student_spec(data.dim(), config.at("r").get<std::size_t>()),
        mkdt::InitScheme::kFanIn, get_or<std::uint64_t>(config, "init_seed", 0));
    for (const std::string& kind_name : kind_list(config)) {
      const auto reports =
          mkdt::trajectory_variance(loss_kind_from_name(kind_name), data, init,
                                    config.at("n_runs").get<std::size_t>(), lengths, cfg,
                                    manifest.seed);
      for (std::size_t i = 0; i < reports.size(); ++i) {
        rows.push_back({"trajectory", kind_name, "length", static_cast<double>(lengths[i]),
                        reports[i].estimate, reports[i].standard_error, reports[i].n_samples});
      }
    }
  } else {
    throw std::runtime_error("unknown experiment '" + experiment +
                             "' (expected grad, partition or trajectory)");
  }

  mkdt::write_variance_csv(out, rows);
  manifest.write(manifest_path.empty() ? default_manifest_path(out) : manifest_path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mkdt — desk-scale laboratory for distilling self-supervised datasets"};
  app.require_subcommand(1);

  std::string config_path;
  std::string data_path;
  std::string teacher_path;
  std::string reps_path;
  std::string experts_dir;
  std::string init_path;
  std::string encoder_path;
  std::string syn_path;
  std::string out_path;
  std::string out_dir;
  std::string log_path;
  std::string manifest_path;
  std::string expert_mode = "kd";
  std::string init_mode;
  std::string distill_mode = "mkdt";
  std::string experiment;
  std::size_t k = 1;
  std::size_t threads = 1;
  std::size_t size = 0;
  std::uint64_t seed = 0;

  CLI::App* gen = app.add_subcommand("gen-data", "Generate a sparse-coding dataset");
  gen->add_option("--config", config_path, "JSON config")->required();
  gen->add_option("--out", out_path, "Output dataset file")->required();
  gen->add_option("--manifest", manifest_path, "Manifest path override");

  CLI::App* teach = app.add_subcommand("train-teacher", "Train the self-supervised teacher");
  teach->add_option("--config", config_path, "JSON config")->required();
  teach->add_option("--data", data_path, "Dataset file")->required();
  teach->add_option("--out", out_path, "Output encoder file")->required();
  teach->add_option("--manifest", manifest_path, "Manifest path override");

  CLI::App* reps = app.add_subcommand("teacher-reps", "Freeze teacher representations");
  reps->add_option("--teacher", teacher_path, "Teacher encoder file")->required();
  reps->add_option("--data", data_path, "Dataset file")->required();
  reps->add_option("--out", out_path, "Output representations file")->required();
  reps->add_option("--manifest", manifest_path, "Manifest path override");

  CLI::App* experts = app.add_subcommand("train-experts", "Train expert trajectories");
  experts->add_option("--config", config_path, "JSON config")->required();
  experts->add_option("--data", data_path, "Dataset file")->required();
  experts->add_option("--reps", reps_path, "Teacher representations (kd mode)");
  experts->add_option("--out-dir", out_dir, "Directory for expert files")->required();
  experts->add_option("--k", k, "Number of experts")->required();
  experts->add_option("--threads", threads, "Worker threads");
  experts->add_option("--mode", expert_mode, "kd (default) or ssl");
  experts->add_option("--manifest", manifest_path, "Manifest path override");

  CLI::App* select = app.add_subcommand("select-init", "Choose synthetic initialization rows");
  select->add_option("--mode", init_mode, "random or high-loss")->required();
  select->add_option("--size", size, "Subset size")->required();
  select->add_option("--data", data_path, "Dataset file")->required();
  select->add_option("--experts-dir", experts_dir, "Expert directory (high-loss)");
  select->add_option("--reps", reps_path, "Teacher representations (high-loss)");
  select->add_option("--seed", seed, "Seed (random mode)");
  select->add_option("--out", out_path, "Output JSON index file")->required();
  select->add_option("--manifest", manifest_path, "Manifest path override");

  CLI::App* dist = app.add_subcommand("distill", "Distill a synthetic dataset");
  dist->add_option("--config", config_path, "JSON config")->required();
  dist->add_option("--data", data_path, "Dataset file")->required();
  dist->add_option("--experts-dir", experts_dir, "Expert directory")->required();
  dist->add_option("--reps", reps_path, "Teacher representations (mkdt mode)");
  dist->add_option("--init", init_path, "Init index JSON from select-init")->required();
  dist->add_option("--mode", distill_mode, "mkdt (default) or naive-ssl");
  dist->add_option("--out", out_path, "Output synthetic dataset file")->required();
  dist->add_option("--log", log_path, "Output step log CSV")->required();
  dist->add_option("--manifest", manifest_path, "Manifest path override");

  CLI::App* pre = app.add_subcommand("pretrain", "Pre-train an encoder on synthetic data");
  pre->add_option("--config", config_path, "JSON config")->required();
  pre->add_option("--syn", syn_path, "Synthetic dataset file")->required();
  pre->add_option("--out", out_path, "Output encoder file")->required();
  pre->add_option("--manifest", manifest_path, "Manifest path override");

  CLI::App* probe = app.add_subcommand("probe", "Linear-probe a frozen encoder");
  probe->add_option("--config", config_path, "JSON config")->required();
  probe->add_option("--encoder", encoder_path, "Encoder file")->required();
  probe->add_option("--data", data_path, "Dataset file")->required();
  probe->add_option("--out", out_path, "Output JSON result")->required();
  probe->add_option("--manifest", manifest_path, "Manifest path override");

  CLI::App* compare = app.add_subcommand("compare", "Compare pre-training methods by probe");
  compare->add_option("--config", config_path, "JSON config")->required();
  compare->add_option("--data", data_path, "Dataset file")->required();
  compare->add_option("--out", out_path, "Output CSV report")->required();
  compare->add_option("--manifest", manifest_path, "Manifest path override");

  CLI::App* var = app.add_subcommand("variance", "Run a gradient/partition/trajectory study");
  var->add_option("--experiment", experiment, "grad, partition or trajectory")->required();
  var->add_option("--config", config_path, "JSON config")->required();
  var->add_option("--data", data_path, "Dataset file")->required();
  var->add_option("--out", out_path, "Output CSV report")->required();
  var->add_option("--manifest", manifest_path, "Manifest path override");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << json{{"error", "argument parsing"}, {"detail", e.what()}}.dump() << '\n';
    return app.exit(e, std::cout, std::cerr);
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (*gen) {
      run_gen_data(config_path, out_path, manifest_path);
    } else if (*teach) {
      run_train_teacher(config_path, data_path, out_path, manifest_path);
    } else if (*reps) {
      run_teacher_reps(teacher_path, data_path, out_path, manifest_path);
    } else if (*experts) {
      run_train_experts(config_path, data_path, reps_path, out_dir, expert_mode, k, threads,
                        manifest_path);
    } else if (*select) {
      run_select_init(init_mode, size, data_path, experts_dir, reps_path,
                      seed_flag_override(seed), out_path, manifest_path);
    } else if (*dist) {
      run_distill(config_path, data_path, experts_dir, reps_path, init_path, distill_mode,
                  out_path, log_path, manifest_path);
    } else if (*pre) {
      run_pretrain(config_path, syn_path, out_path, manifest_path);
    } else if (*probe) {
      run_probe(config_path, encoder_path, data_path, out_path, manifest_path);
    } else if (*compare) {
      run_compare(config_path, data_path, out_path, manifest_path);
    } else if (*var) {
      run_variance(config_path, experiment, data_path, out_path, manifest_path);
    }
  } catch (const SchemaError& e) {
    json record = e.record;
    record["command"] = command;
    std::cerr << record.dump() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << json{{"command", command}, {"error", e.what()}}.dump() << '\n';
    return 1;
  }
  return 0;
}
