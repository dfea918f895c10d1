#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mimic/model.hpp"
#include "mimic/optim.hpp"

// Every mechanism that turns a frozen base model plus a few trainable (or
// extracted) tensors into a zero-shot predictor.
namespace mimic::variants {

using model::Tensor;

enum class VariantKind {
  mimic,
  head_sharing_mu,
  query_sharing_mu,
  linear_shift,
  live_style,
  task_vector,
  function_vector,
  lora,
  mimic_plus_lora,
};
VariantKind parse_kind(const std::string& name);
std::string to_string(VariantKind kind);
std::vector<VariantKind> all_kinds();

bool uses_lora(VariantKind kind);
bool uses_patch(VariantKind kind);  // task_vector, function_vector
bool is_trainable(VariantKind kind);

struct LoraSettings {
  std::size_t rank = 2;
  double alpha = 4.0;  // scaling alpha / rank
  double dropout = 0.05;
};

// A (layer, head) pair.
using HeadIndex = std::pair<std::size_t, std::size_t>;

struct PatchSettings {
  std::size_t layer = 0;
  std::vector<HeadIndex> heads;  // function_vector only
};

struct VariantConfig {
  VariantKind kind = VariantKind::mimic;
  std::optional<LoraSettings> lora;
  std::optional<PatchSettings> patch;
  std::optional<double> live_scale_init;
  std::optional<double> gate_bias_init;  // linear_shift
  std::uint64_t seed = 0;                // random initialisation of A matrices and h maps

  // Fills the kind-specific parameters that are required and absent.
  static VariantConfig defaults(VariantKind kind);
  // Kind-specific parameters must be present exactly when the kind needs them.
  void validate(const model::ModelConfig& base) const;
};

void to_json(nlohmann::json& j, const VariantConfig& c);
// Unknown keys and parameters foreign to the kind are rejected; required ones
// missing from the document take their defaults.
void from_json(const nlohmann::json& j, VariantConfig& c);

// Per-step knobs a forward may need.
struct RunOptions {
  model::AlignPoint align_point = model::AlignPoint::after_ffn;
  std::mt19937_64* dropout_rng = nullptr;  // enables adapter dropout (training)
  std::vector<attention::AttentionProbe>* probes = nullptr;
};

// The trainable state of a variant, bound to a base model configuration.
class Variant {
 public:
  Variant(VariantConfig config, const model::ModelConfig& base);

  const VariantConfig& config() const { return config_; }
  VariantKind kind() const { return config_.kind; }

  // Trainable tensors in a fixed order; empty for task_vector/function_vector.
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  // Optimizer groups with per-kind learning-rate multipliers.
  std::vector<training::ParamGroup> param_groups(double weight_decay) const;
  void set_trainable(bool trainable);

  // Student run over the query tokens alone.
  model::LayerTrace forward(const model::Model& base, const std::vector<int>& query_tokens,
                            const RunOptions& options = {}) const;

  // Shift tensors, exposed for tests and instrumentation.
  std::vector<attention::LayerShift>& shifts() { return shifts_; }
  const std::vector<attention::LayerShift>& shifts() const { return shifts_; }
  std::vector<attention::LayerAdapters>& adapters() { return adapters_; }
  std::vector<Tensor>& live_vectors() { return live_vectors_; }
  std::vector<Tensor>& live_scales() { return live_scales_; }
  // Extracted activation for the patching variants (d entries).
  Tensor& patch_vector() { return patch_vector_; }
  const Tensor& patch_vector() const { return patch_vector_; }
  void set_patch(PatchSettings patch, Tensor vector);

  nlohmann::json to_json() const;
  static Variant from_json(const nlohmann::json& j, const model::ModelConfig& base);
  void save(const std::filesystem::path& path, const model::Model& base) const;
  // Refuses a checkpoint trained against a different base model.
  static Variant load(const std::filesystem::path& path, const model::Model& base);

 private:
  std::vector<model::LayerHooks> hooks() const;

  VariantConfig config_;
  model::ModelConfig base_;
  std::vector<attention::LayerShift> shifts_;
  std::vector<attention::LayerAdapters> adapters_;
  std::vector<Tensor> live_vectors_, live_scales_;
  Tensor patch_vector_;
};

// Equivalent to Variant(config, base) after config.validate(base).
Variant build_variant(const VariantConfig& config, const model::Model& base);

// Mean hidden state at `layer` on the last demonstration token (the final
// separator) over a set of prompts.
Tensor tv_extract(const model::Model& base, const std::vector<model::PromptContext>& prompts,
                  std::size_t layer);

// Mean per-head attention outputs (through that head's slice of W_o) at the
// last demonstration token, summed over `heads`.
Tensor fv_extract(const model::Model& base, const std::vector<model::PromptContext>& prompts,
                  const std::vector<HeadIndex>& heads);

// Adds `vector` to the last query row at `layer`.
model::LayerTrace patched_forward(const model::Model& base, const std::vector<int>& query_tokens,
                                  std::size_t layer, const Tensor& vector,
                                  model::AlignPoint align_point = model::AlignPoint::after_ffn);

}  // namespace mimic::variants
