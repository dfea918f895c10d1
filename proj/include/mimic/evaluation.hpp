#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "mimic/model.hpp"
#include "mimic/tasks.hpp"
#include "mimic/variants.hpp"

// Accuracy, representation distances to k-shot ICL, latency, and the layer /
// head sweeps that configure the patching baselines.
namespace mimic::tasks {

// A way of answering a query, optionally reading demonstrations. Inference
// queries are the single token [x]; the answer is read off the last row.
struct Runner {
  std::string name;
  bool uses_demos = false;
  std::function<model::LayerTrace(const Sample& query, const std::vector<Sample>& demos)> run;
};

Runner zero_shot_runner(const model::Model& base);
Runner icl_runner(const model::Model& base);
Runner variant_runner(const model::Model& base, const variants::Variant& variant);

// Where evaluation demonstrations come from.
struct DemoSource {
  const std::vector<Sample>* pool = nullptr;
  IcdStrategy strategy = IcdStrategy::random;
  std::size_t shots = 0;
  const model::Tensor* embedding = nullptr;  // needed by `nearest`

  std::vector<Sample> select(const Sample& query, std::mt19937_64& rng) const;
};

struct EvalReport {
  std::string mode;
  std::size_t shots = 0;
  std::uint64_t seed = 0;
  std::size_t n = 0;
  double accuracy = 0.0;
  std::vector<double> l2_per_layer;      // empty unless distances were computed
  std::vector<double> cosine_per_layer;
  double mean_latency_seconds = 0.0;
  double tokens_per_query = 0.0;

  double mean_l2() const;
  double mean_cosine() const;
};

// Greedy argmax of the first answer token; exact match.
int predict(const model::LayerTrace& trace);
EvalReport evaluate_accuracy(const Runner& runner, const std::vector<Sample>& samples,
                             const DemoSource& demos, std::mt19937_64& rng);

// 8-shot style ICL accuracy on fresh episodes from the pretraining stream.
double stream_icl_accuracy(const model::Model& base, const StreamConfig& stream, std::size_t shots,
                           std::size_t n, std::uint64_t seed);

// Per-layer L2 distance and cosine similarity between the runner's and the
// k-shot ICL run's hidden states at the row that predicts the first answer
// token, averaged over samples. Both runs see the same demonstrations.
EvalReport alignment_distance_report(const model::Model& base, const Runner& runner,
                                     const std::vector<Sample>& samples, const DemoSource& demos,
                                     std::mt19937_64& rng);

// Token count a runner processes for one query.
std::size_t tokens_processed(const Runner& runner, const Sample& query,
                             const std::vector<Sample>& demos);

struct LatencyReport {
  std::string mode;
  std::size_t shots = 0;
  std::size_t n = 0;
  double mean_seconds = 0.0;
  std::size_t tokens_per_query = 0;
};
LatencyReport latency_bench(const Runner& runner, const std::vector<Sample>& samples,
                            const DemoSource& demos, std::size_t n, std::mt19937_64& rng);

// Fraction of queries whose k-shot prediction changes when the demonstration
// order is reversed.
double order_sensitivity(const model::Model& base, const std::vector<Sample>& samples,
                         const DemoSource& demos, std::mt19937_64& rng);

struct PatchSweepEntry {
  std::size_t layer = 0;
  std::size_t heads = 0;  // 0 for task vectors
  double accuracy = 0.0;
  double mean_log_prob = 0.0;
};

struct PatchSweep {
  variants::PatchSettings best;
  model::Tensor vector;
  double best_accuracy = 0.0;
  std::vector<PatchSweepEntry> table;
};

// k-shot prompts built from the pool for activation extraction.
std::vector<model::PromptContext> extraction_prompts(const std::vector<Sample>& pool,
                                                     std::size_t shots, std::size_t count,
                                                     std::mt19937_64& rng);

// Tries every layer and keeps the best validation accuracy.
PatchSweep sweep_task_vector(const model::Model& base,
                             const std::vector<model::PromptContext>& prompts,
                             const std::vector<Sample>& validation);

// Ranks heads by the validation log-probability of the answer when their mean
// output alone is patched into their own layer, then tries every layer with the
// top 1, 2, 4, ... heads.
PatchSweep sweep_function_vector(const model::Model& base,
                                 const std::vector<model::PromptContext>& prompts,
                                 const std::vector<Sample>& validation);

// Columns: mode, k, seed, accuracy, mean_l2, mean_cosine, latency_s, tokens,
// then per-layer L2 and cosine when any report carries them.
void write_reports_csv(std::ostream& out, const std::vector<EvalReport>& reports);
void write_latency_csv(std::ostream& out, const std::vector<LatencyReport>& reports);

}  // namespace mimic::tasks
