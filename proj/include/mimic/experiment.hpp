#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mimic/evaluation.hpp"
#include "mimic/training.hpp"

// Experiment plumbing shared by the command-line runner and the acceptance
// binary: one configuration document, seed sub-streams, a cached pretrained
// base, and the fit / evaluate steps of the desk experiment.
namespace mimic::experiment {

constexpr int kSchemaVersion = 1;
std::string version_string();

struct TaskConfig {
  tasks::Family family = tasks::Family::modular_offset;
  std::size_t n_train = 200;
  std::size_t n_val = 100;
  std::size_t n_test = 200;
  std::size_t eval_shots = 8;
  tasks::IcdStrategy eval_strategy = tasks::IcdStrategy::random;
  std::size_t extraction_prompts = 16;  // task / function vector extraction
};

void to_json(nlohmann::json& j, const TaskConfig& c);
void from_json(const nlohmann::json& j, TaskConfig& c);

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "desk";
  model::ModelConfig model;
  training::PretrainConfig pretrain;
  training::TrainConfig train;
  TaskConfig task;

  // The toy setup the acceptance run uses.
  static ExperimentConfig desk();
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
// Unknown keys are rejected at every level; absent keys keep desk() values.
void from_json(const nlohmann::json& j, ExperimentConfig& c);

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Reads a JSON document; any parse or schema problem becomes a ConfigError.
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(const nlohmann::json& j);

// 16 hex digits of FNV-1a over the canonical JSON dump.
std::string hash_json(const nlohmann::json& j);
std::string config_hash(const ExperimentConfig& c);
// Depends only on what determines the pretrained weights.
std::string base_hash(const ExperimentConfig& c);

// Named sub-stream of the root seed ("task", "train", "eval", ...).
std::uint64_t sub_seed(std::uint64_t root, std::string_view stream);

// Output root: $MIMIC_OUTPUT_ROOT, else ./runs.
std::filesystem::path output_root();
std::filesystem::path output_dir(const ExperimentConfig& c);

// Header line stamped on every CSV and JSON-lines artifact.
std::string provenance_line(const ExperimentConfig& c, std::uint64_t seed);

// Loads base-<hash>.json from cache_dir or pretrains and stores it there,
// with the pretraining wall-clock time in a .meta.json sidecar.
model::Model load_or_pretrain(const ExperimentConfig& c, const std::filesystem::path& cache_dir,
                              std::ostream* log = nullptr, bool* from_cache = nullptr,
                              double* pretrain_seconds = nullptr);

// c.train with the training and variant-initialisation seeds drawn from the
// root seed.
training::TrainConfig seeded_train_config(const ExperimentConfig& c);

// One fixed mapping drawn from the pretraining distribution and its splits.
struct TaskData {
  tasks::MappingTask task;
  std::vector<tasks::Sample> train, val, test;
};
TaskData make_task_data(const ExperimentConfig& c, std::uint64_t seed);

struct FitResult {
  training::TrainResult train;
  std::optional<tasks::PatchSweep> sweep;  // patching variants
  double seconds = 0.0;
};

// Trains (or extracts, for patching variants) `variant` on data.train with
// validation accuracy on data.val selecting the best epoch.
FitResult fit_variant(const model::Model& base, variants::Variant& variant, const TaskData& data,
                      const training::TrainConfig& cfg, std::size_t extraction_prompts = 16,
                      std::ostream* log = nullptr);

// Accuracy on data.test plus, when `distances`, per-layer distances to the
// k-shot ICL run. Demonstrations come from data.train.
tasks::EvalReport evaluate(const model::Model& base, const tasks::Runner& runner,
                           const TaskData& data, const ExperimentConfig& c, std::uint64_t seed,
                           bool distances);

// The suites behind `verify`. corrupt_op scales that op's adjoint by 1.5.
struct SuiteResult {
  std::string name;
  bool passed = false;
  std::size_t cases = 0;
  double max_error = 0.0;
  double tolerance = 0.0;
  std::vector<std::string> failures;
};

struct VerifyReport {
  std::vector<SuiteResult> suites;
  bool passed() const;
  nlohmann::json to_json() const;
};

SuiteResult verify_decomposition(std::uint64_t seed, std::size_t instances = 100);
SuiteResult verify_mu_contract(std::uint64_t seed, std::size_t instances = 100);
SuiteResult verify_neutral_init(std::uint64_t seed);
// Per-op derivative checks; failures name the op.
SuiteResult verify_op_gradients(std::uint64_t seed);
// Every trainable variant at `points` random parameter states.
SuiteResult verify_variant_gradients(std::uint64_t seed, std::size_t points = 20);
VerifyReport run_verify(std::uint64_t seed, const std::optional<std::string>& corrupt_op = {});

}  // namespace mimic::experiment
