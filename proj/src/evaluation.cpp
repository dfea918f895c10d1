#include "mimic/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace mimic::tasks {

namespace {

std::vector<int> query_tokens(const Sample& q) { return {q.x}; }

std::vector<int> prompt_tokens(const Sample& query, const std::vector<Sample>& demos) {
  Episode e{demos, query};
  return render(e, false).tokens();
}

double answer_log_prob(const model::LayerTrace& trace, int answer) {
  const auto r = trace.logits.rows() - 1;
  std::vector<double> row(trace.logits.cols());
  for (std::size_t j = 0; j < row.size(); ++j) row[j] = trace.logits.at(r, j);
  return row.at(static_cast<std::size_t>(answer)) - num::log_sum_exp(row);
}

struct PatchScore {
  double accuracy = 0.0;
  double mean_log_prob = 0.0;
};

PatchScore score_patch(const model::Model& base, const std::vector<Sample>& validation,
                       std::size_t layer, const model::Tensor& vector) {
  if (validation.empty()) throw std::invalid_argument("patch sweep: empty validation set");
  num::NoGradScope no_grad;
  PatchScore s;
  for (const auto& q : validation) {
    const auto trace = variants::patched_forward(base, query_tokens(q), layer, vector);
    s.accuracy += predict(trace) == q.y ? 1.0 : 0.0;
    s.mean_log_prob += answer_log_prob(trace, q.y);
  }
  s.accuracy /= static_cast<double>(validation.size());
  s.mean_log_prob /= static_cast<double>(validation.size());
  return s;
}

bool better(const PatchScore& a, const PatchScore& b) {
  if (a.accuracy != b.accuracy) return a.accuracy > b.accuracy;
  return a.mean_log_prob > b.mean_log_prob;
}

}  // namespace

Runner zero_shot_runner(const model::Model& base) {
  return {"zero_shot", false, [&base](const Sample& q, const std::vector<Sample>&) {
            return base.forward_with_trace(query_tokens(q));
          }};
}

Runner icl_runner(const model::Model& base) {
  return {"icl", true, [&base](const Sample& q, const std::vector<Sample>& demos) {
            Episode e{demos, q};
            const auto ctx = render(e, false);
            return base.forward_with_trace(ctx.tokens()).slice(ctx.demo_length(), 1);
          }};
}

Runner variant_runner(const model::Model& base, const variants::Variant& variant) {
  return {variants::to_string(variant.kind()), false,
          [&base, &variant](const Sample& q, const std::vector<Sample>&) {
            return variant.forward(base, query_tokens(q));
          }};
}

std::vector<Sample> DemoSource::select(const Sample& query, std::mt19937_64& rng) const {
  if (shots == 0) return {};
  if (!pool) throw std::invalid_argument("demo source: no pool for " + std::to_string(shots) + "-shot runs");
  if (strategy == IcdStrategy::nearest && !embedding) {
    throw std::invalid_argument("demo source: nearest selection needs the embedding table");
  }
  static const model::Tensor empty;
  return icd_selection(strategy, *pool, query, shots, embedding ? *embedding : empty, rng);
}

double EvalReport::mean_l2() const {
  if (l2_per_layer.empty()) return 0.0;
  return std::accumulate(l2_per_layer.begin(), l2_per_layer.end(), 0.0) /
         static_cast<double>(l2_per_layer.size());
}

double EvalReport::mean_cosine() const {
  if (cosine_per_layer.empty()) return 0.0;
  return std::accumulate(cosine_per_layer.begin(), cosine_per_layer.end(), 0.0) /
         static_cast<double>(cosine_per_layer.size());
}

int predict(const model::LayerTrace& trace) {
  const auto& logits = trace.logits;
  if (logits.rows() == 0) throw std::invalid_argument("predict: empty trace");
  const auto r = logits.rows() - 1;
  std::size_t best = 0;
  for (std::size_t j = 1; j < logits.cols(); ++j) {
    if (logits.at(r, j) > logits.at(r, best)) best = j;
  }
  return static_cast<int>(best);
}

EvalReport evaluate_accuracy(const Runner& runner, const std::vector<Sample>& samples,
                             const DemoSource& demos, std::mt19937_64& rng) {
  if (samples.empty()) throw std::invalid_argument("evaluate_accuracy: no samples");
  num::NoGradScope no_grad;
  EvalReport report;
  report.mode = runner.uses_demos ? std::to_string(demos.shots) + "_shot_icl" : runner.name;
  report.shots = runner.uses_demos ? demos.shots : 0;
  report.n = samples.size();
  std::size_t correct = 0, tokens = 0;
  double seconds = 0.0;
  for (const auto& q : samples) {
    const auto chosen = runner.uses_demos ? demos.select(q, rng) : std::vector<Sample>{};
    const auto t0 = std::chrono::steady_clock::now();
    const auto trace = runner.run(q, chosen);
    seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    correct += predict(trace) == q.y ? 1 : 0;
    tokens += tokens_processed(runner, q, chosen);
  }
  const double n = static_cast<double>(samples.size());
  report.accuracy = static_cast<double>(correct) / n;
  report.mean_latency_seconds = seconds / n;
  report.tokens_per_query = static_cast<double>(tokens) / n;
  return report;
}

double stream_icl_accuracy(const model::Model& base, const StreamConfig& stream, std::size_t shots,
                           std::size_t n, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("stream_icl_accuracy: n must be positive");
  StreamConfig cfg = stream;
  cfg.min_shots = cfg.max_shots = shots;
  PretrainingStream episodes(cfg, seed);
  num::NoGradScope no_grad;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto ep = episodes.next();
    correct += predict(base.forward_with_trace(render(ep, false).tokens())) == ep.query.y ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

EvalReport alignment_distance_report(const model::Model& base, const Runner& runner,
                                     const std::vector<Sample>& samples, const DemoSource& demos,
                                     std::mt19937_64& rng) {
  if (samples.empty()) throw std::invalid_argument("alignment_distance_report: no samples");
  if (demos.shots == 0) throw std::invalid_argument("alignment_distance_report: need k >= 1 shots");
  num::NoGradScope no_grad;
  const auto teacher = icl_runner(base);
  const auto n_layers = base.config().n_layers;
  EvalReport report;
  report.mode = runner.uses_demos ? std::to_string(demos.shots) + "_shot_icl" : runner.name;
  report.shots = demos.shots;
  report.n = samples.size();
  report.l2_per_layer.assign(n_layers, 0.0);
  report.cosine_per_layer.assign(n_layers, 0.0);
  std::size_t correct = 0;
  for (const auto& q : samples) {
    const auto chosen = demos.select(q, rng);
    const auto ref = teacher.run(q, chosen);
    const auto got = runner.run(q, chosen);
    correct += predict(got) == q.y ? 1 : 0;
    for (std::size_t l = 0; l < n_layers; ++l) {
      const auto& a = got.hidden[l];
      const auto& b = ref.hidden[l];
      const auto ra = a.rows() - 1, rb = b.rows() - 1;
      double sq = 0.0, dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t c = 0; c < a.cols(); ++c) {
        const double x = a.at(ra, c), y = b.at(rb, c);
        sq += (x - y) * (x - y);
        dot += x * y;
        na += x * x;
        nb += y * y;
      }
      report.l2_per_layer[l] += std::sqrt(sq);
      report.cosine_per_layer[l] += na > 0.0 && nb > 0.0 ? dot / std::sqrt(na * nb) : 0.0;
    }
  }
  const double n = static_cast<double>(samples.size());
  for (auto& v : report.l2_per_layer) v /= n;
  for (auto& v : report.cosine_per_layer) v = std::clamp(v / n, -1.0, 1.0);
  report.accuracy = static_cast<double>(correct) / n;
  return report;
}

std::size_t tokens_processed(const Runner& runner, const Sample& query,
                             const std::vector<Sample>& demos) {
  return runner.uses_demos ? prompt_tokens(query, demos).size() : query_tokens(query).size();
}

LatencyReport latency_bench(const Runner& runner, const std::vector<Sample>& samples,
                            const DemoSource& demos, std::size_t n, std::mt19937_64& rng) {
  if (samples.empty() || n == 0) throw std::invalid_argument("latency_bench: nothing to time");
  num::NoGradScope no_grad;
  LatencyReport report;
  report.mode = runner.uses_demos ? std::to_string(demos.shots) + "_shot_icl" : runner.name;
  report.shots = runner.uses_demos ? demos.shots : 0;
  report.n = n;
  // Demonstrations are chosen outside the timed region.
  std::vector<std::vector<Sample>> chosen;
  for (std::size_t i = 0; i < n; ++i) {
    chosen.push_back(runner.uses_demos ? demos.select(samples[i % samples.size()], rng)
                                       : std::vector<Sample>{});
  }
  report.tokens_per_query = tokens_processed(runner, samples[0], chosen[0]);
  runner.run(samples[0], chosen[0]);  // warm-up
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < n; ++i) predict(runner.run(samples[i % samples.size()], chosen[i]));
  const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report.mean_seconds = total / static_cast<double>(n);
  return report;
}

double order_sensitivity(const model::Model& base, const std::vector<Sample>& samples,
                         const DemoSource& demos, std::mt19937_64& rng) {
  if (samples.empty()) throw std::invalid_argument("order_sensitivity: no samples");
  num::NoGradScope no_grad;
  const auto icl = icl_runner(base);
  std::size_t changed = 0;
  for (const auto& q : samples) {
    auto chosen = demos.select(q, rng);
    const int before = predict(icl.run(q, chosen));
    std::reverse(chosen.begin(), chosen.end());
    changed += predict(icl.run(q, chosen)) != before ? 1 : 0;
  }
  return static_cast<double>(changed) / static_cast<double>(samples.size());
}

std::vector<model::PromptContext> extraction_prompts(const std::vector<Sample>& pool,
                                                     std::size_t shots, std::size_t count,
                                                     std::mt19937_64& rng) {
  if (pool.size() < shots + 1) {
    throw std::invalid_argument("extraction_prompts: pool of " + std::to_string(pool.size()) +
                                " is too small for " + std::to_string(shots) + " shots");
  }
  std::vector<model::PromptContext> out;
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<std::size_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    Episode e;
    for (std::size_t s = 0; s < shots; ++s) e.demos.push_back(pool[idx[s]]);
    e.query = pool[idx[shots]];
    out.push_back(render(e, false));
  }
  return out;
}

PatchSweep sweep_task_vector(const model::Model& base,
                             const std::vector<model::PromptContext>& prompts,
                             const std::vector<Sample>& validation) {
  PatchSweep sweep;
  PatchScore best;
  for (std::size_t l = 0; l < base.config().n_layers; ++l) {
    const auto vec = variants::tv_extract(base, prompts, l);
    const auto s = score_patch(base, validation, l, vec);
    sweep.table.push_back({l, 0, s.accuracy, s.mean_log_prob});
    if (l == 0 || better(s, best)) {
      best = s;
      sweep.best = {l, {}};
      sweep.vector = vec;
    }
  }
  sweep.best_accuracy = best.accuracy;
  return sweep;
}

PatchSweep sweep_function_vector(const model::Model& base,
                                 const std::vector<model::PromptContext>& prompts,
                                 const std::vector<Sample>& validation) {
  const auto& cfg = base.config();
  std::vector<std::pair<double, variants::HeadIndex>> ranked;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const auto vec = variants::fv_extract(base, prompts, {{l, h}});
      ranked.push_back({score_patch(base, validation, l, vec).mean_log_prob, {l, h}});
    }
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });

  PatchSweep sweep;
  PatchScore best;
  bool first = true;
  for (std::size_t top = 1; top <= ranked.size(); top *= 2) {
    std::vector<variants::HeadIndex> heads;
    for (std::size_t i = 0; i < top; ++i) heads.push_back(ranked[i].second);
    const auto vec = variants::fv_extract(base, prompts, heads);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const auto s = score_patch(base, validation, l, vec);
      sweep.table.push_back({l, top, s.accuracy, s.mean_log_prob});
      if (first || better(s, best)) {
        first = false;
        best = s;
        sweep.best = {l, heads};
        sweep.vector = vec;
      }
    }
  }
  sweep.best_accuracy = best.accuracy;
  return sweep;
}

void write_reports_csv(std::ostream& out, const std::vector<EvalReport>& reports) {
  std::size_t layers = 0;
  for (const auto& r : reports) layers = std::max(layers, r.l2_per_layer.size());
  out << "mode,k,seed,accuracy,mean_l2,mean_cosine,latency_s,tokens";
  for (std::size_t l = 0; l < layers; ++l) out << ",l2_layer" << l;
  for (std::size_t l = 0; l < layers; ++l) out << ",cosine_layer" << l;
  out << '\n' << std::setprecision(10);
  for (const auto& r : reports) {
    out << r.mode << ',' << r.shots << ',' << r.seed << ',' << r.accuracy << ',' << r.mean_l2()
        << ',' << r.mean_cosine() << ',' << r.mean_latency_seconds << ',' << r.tokens_per_query;
    for (std::size_t l = 0; l < layers; ++l) {
      out << ',';
      if (l < r.l2_per_layer.size()) out << r.l2_per_layer[l];
    }
    for (std::size_t l = 0; l < layers; ++l) {
      out << ',';
      if (l < r.cosine_per_layer.size()) out << r.cosine_per_layer[l];
    }
    out << '\n';
  }
}

void write_latency_csv(std::ostream& out, const std::vector<LatencyReport>& reports) {
  out << "mode,shots,n,mean_seconds,tokens_per_query\n" << std::setprecision(10);
  for (const auto& r : reports) {
    out << r.mode << ',' << r.shots << ',' << r.n << ',' << r.mean_seconds << ','
        << r.tokens_per_query << '\n';
  }
}

}  // namespace mimic::tasks
