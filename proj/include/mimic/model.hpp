#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "mimic/attention.hpp"

namespace mimic::model {

using num::Tensor;

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 64;
  std::size_t vocab_size = 64;
  std::size_t max_len = 96;
  std::size_t ffn_mult = 4;
  std::uint64_t seed = 0;
  double rope_base = 10000.0;

  std::size_t d_head() const { return d_model / n_heads; }
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

enum class AlignPoint { after_sa, after_ffn };
AlignPoint parse_align_point(const std::string& name);
std::string to_string(AlignPoint p);

// k demonstration blocks followed by the query. answer_span indexes into the
// query tokens; the span's tokens are the supervised targets.
struct PromptContext {
  std::vector<std::vector<int>> icd_tokens;
  std::vector<int> query_tokens;
  std::size_t answer_begin = 0;
  std::size_t answer_end = 0;

  std::size_t demo_length() const;
  std::vector<int> tokens() const;
  void validate() const;
};

// Hidden states captured per layer plus the final logits.
struct LayerTrace {
  std::vector<Tensor> hidden;  // [layer] -> rows x d
  Tensor logits;               // rows x vocab

  std::size_t rows() const { return logits.rows(); }
  // Rows [start, start + count) of every entry.
  LayerTrace slice(std::size_t start, std::size_t count) const;
  LayerTrace detached() const;
};

// What a variant may attach to a layer. Null members mean "unmodified".
struct LayerHooks {
  const attention::LayerShift* shift = nullptr;
  const attention::LayerAdapters* adapters = nullptr;
  // Added to every row after the FFN residual: scale * vector.
  std::optional<Tensor> post_ffn_vector;
  std::optional<Tensor> post_ffn_scale;
};

// Adds vector to one row of a layer's output (after the FFN residual).
struct Intervention {
  std::size_t layer = 0;
  std::size_t row = 0;
  Tensor vector;
};

struct ForwardOptions {
  AlignPoint align_point = AlignPoint::after_ffn;
  const std::vector<LayerHooks>* hooks = nullptr;
  std::vector<Intervention> interventions;
  std::size_t first_position = 0;
  std::mt19937_64* dropout_rng = nullptr;
  std::vector<attention::AttentionProbe>* probes = nullptr;  // resized to n_layers
};

struct LayerWeights {
  Tensor ln1_g, ln1_b;
  attention::AttentionWeights attn;
  Tensor ln2_g, ln2_b;
  Tensor w1, b1, w2, b2;
};

// Pre-norm decoder-only transformer with rotary positions.
class Model {
 public:
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  std::vector<Tensor> parameters() const;
  void set_trainable(bool trainable);
  std::size_t parameter_count() const;
  // FNV-1a over the raw bytes of every base weight.
  std::uint64_t checksum() const;

  LayerTrace forward_with_trace(const std::vector<int>& tokens,
                                const ForwardOptions& options = {}) const;
  // Frozen-model run over [X_D; X]; returns only the query rows, re-indexed.
  LayerTrace icl_forward(const PromptContext& ctx,
                         AlignPoint align_point = AlignPoint::after_ffn) const;
  // Query-only run with a learned shift on every head of every layer.
  LayerTrace mimic_forward(const std::vector<int>& query_tokens,
                           const std::vector<attention::LayerShift>& shifts,
                           AlignPoint align_point = AlignPoint::after_ffn) const;

  nlohmann::json to_json() const;
  static Model from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);

  const std::vector<LayerWeights>& layers() const { return layers_; }
  const Tensor& embedding() const { return embedding_; }
  const Tensor& unembedding() const { return unembedding_; }

 private:
  ModelConfig config_;
  Tensor embedding_;
  std::vector<LayerWeights> layers_;
  Tensor lnf_g_, lnf_b_;
  Tensor unembedding_;
};

nlohmann::json tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const nlohmann::json& j);

}  // namespace mimic::model
