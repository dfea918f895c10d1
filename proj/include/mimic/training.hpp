#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mimic/model.hpp"
#include "mimic/optim.hpp"
#include "mimic/tasks.hpp"
#include "mimic/variants.hpp"

// Dual-forward distillation: a frozen teacher run over [demos; query] and a
// student run over the query alone, tied by a per-layer alignment loss and a
// ground-truth loss on the answer span.
namespace mimic::training {

enum class AlignKind { l2, kl };
AlignKind parse_align_kind(const std::string& name);
std::string to_string(AlignKind kind);

struct TrainConfig {
  std::size_t k_shots = 8;
  double lambda = 0.5;
  double lr = 5e-3;
  double warmup_ratio = 0.1;
  double weight_decay = 1e-3;
  std::size_t batch = 2;
  std::size_t grad_accum = 2;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  model::AlignPoint align_point = model::AlignPoint::after_ffn;
  AlignKind align_kind = AlignKind::l2;
  tasks::IcdStrategy icd_strategy = tasks::IcdStrategy::random;
  variants::VariantConfig variant;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct LossBreakdown {
  double align = 0.0;
  double gt = 0.0;
  double total = 0.0;
};

struct EpisodeIndices {
  std::vector<std::size_t> icds;
  std::size_t query = 0;
};

// k + 1 distinct dataset indices: a uniformly drawn query and k demonstrations
// in random order.
EpisodeIndices sample_episode(std::size_t dataset_size, std::size_t k, std::mt19937_64& rng);

// (1/N) sum over layers and query rows of squared L2 distance. The teacher is
// treated as a constant.
num::Tensor alignment_loss(const model::LayerTrace& student, const model::LayerTrace& teacher);

// Mean over `rows` of KL(teacher || student) on softmaxed logits.
num::Tensor kl_alignment_loss(const num::Tensor& student_logits,
                              const num::Tensor& teacher_logits,
                              const std::vector<std::size_t>& rows);

// Rows whose logits predict the answer span of a query-only context.
std::vector<std::size_t> answer_rows(const model::PromptContext& ctx);

// Mean cross-entropy of the answer-span tokens; logits cover the query rows.
num::Tensor ground_truth_loss(const num::Tensor& logits, const model::PromptContext& ctx);

num::Tensor total_loss(const num::Tensor& align, const num::Tensor& gt, double lambda);

// Raised when a loss turns non-finite; carries a JSON diagnostic.
class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, nlohmann::json diagnostic)
      : std::runtime_error(what), diagnostic_(std::move(diagnostic)) {}
  const nlohmann::json& diagnostic() const { return diagnostic_; }

 private:
  nlohmann::json diagnostic_;
};

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  LossBreakdown loss;
};

void to_json(nlohmann::json& j, const StepRecord& r);

struct TrainResult {
  std::vector<StepRecord> log;
  std::size_t steps = 0;
  std::size_t best_epoch = 0;          // 1-based; 0 when no validation ran
  double best_score = 0.0;
  std::vector<double> epoch_scores;
};

struct TrainHooks {
  // Called after each epoch; higher is better. The best epoch's parameters are
  // restored at the end.
  std::function<double(std::size_t epoch)> validate;
  std::ostream* log_sink = nullptr;  // JSON lines, one per optimizer step
};

// Losses of one episode for the current variant state. Records on the active
// tape when one is present.
struct EpisodeLoss {
  num::Tensor total;
  LossBreakdown values;
};
EpisodeLoss episode_loss(const model::Model& base, const variants::Variant& variant,
                         const model::PromptContext& ctx, const TrainConfig& cfg,
                         std::mt19937_64* dropout_rng = nullptr);

// Builds the teacher prompt for dataset[indices.query] with the given demos.
model::PromptContext episode_context(const std::vector<tasks::Sample>& dataset,
                                     const std::vector<tasks::Sample>& demos,
                                     std::size_t query);

TrainResult train_loop(const model::Model& base, variants::Variant& variant,
                       const std::vector<tasks::Sample>& dataset, const TrainConfig& cfg,
                       const TrainHooks& hooks = {});

// Episode-stream pretraining of the base model itself.
struct PretrainConfig {
  std::size_t steps = 3000;
  std::size_t batch = 16;
  double lr = 3e-3;
  double warmup_ratio = 0.05;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  tasks::StreamConfig stream{{tasks::Family::modular_offset}, 16, 1, 8,
                            tasks::QueryPlacement::disjoint, 4};
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

struct PretrainRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

// Supervises every answer whose symbol was already demonstrated earlier in the
// episode (all answers for modular families) plus the query answer.
std::vector<PretrainRecord> pretrain(model::Model& m, const PretrainConfig& cfg,
                                     std::ostream* log_sink = nullptr,
                                     std::size_t log_every = 100);

}  // namespace mimic::training
