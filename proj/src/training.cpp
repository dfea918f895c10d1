#include "mimic/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace mimic::training {

namespace {

using num::Tensor;

std::mt19937_64 substream(std::uint64_t seed, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag)};
  return std::mt19937_64(seq);
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& keys,
                    const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!keys.count(key)) throw std::invalid_argument(where + ": unknown key '" + key + "'");
  }
}

bool finite(const LossBreakdown& l) {
  return std::isfinite(l.align) && std::isfinite(l.gt) && std::isfinite(l.total);
}

}  // namespace

AlignKind parse_align_kind(const std::string& name) {
  if (name == "l2") return AlignKind::l2;
  if (name == "kl") return AlignKind::kl;
  throw std::invalid_argument("unknown alignment kind '" + name + "' (expected l2 or kl)");
}

std::string to_string(AlignKind kind) { return kind == AlignKind::l2 ? "l2" : "kl"; }

void TrainConfig::validate() const {
  if (k_shots < 1) throw std::invalid_argument("train config: k_shots must be at least 1");
  if (!(lambda >= 0.0)) throw std::invalid_argument("train config: lambda must be non-negative");
  if (!(lr > 0.0)) throw std::invalid_argument("train config: lr must be positive");
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) {
    throw std::invalid_argument("train config: warmup_ratio must lie in [0, 1)");
  }
  if (weight_decay < 0.0) throw std::invalid_argument("train config: weight_decay must be >= 0");
  if (batch < 1 || grad_accum < 1) {
    throw std::invalid_argument("train config: batch and grad_accum must be at least 1");
  }
  if (epochs < 1) throw std::invalid_argument("train config: epochs must be at least 1");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"k_shots", c.k_shots},
                     {"lambda", c.lambda},
                     {"lr", c.lr},
                     {"warmup_ratio", c.warmup_ratio},
                     {"weight_decay", c.weight_decay},
                     {"batch", c.batch},
                     {"grad_accum", c.grad_accum},
                     {"epochs", c.epochs},
                     {"seed", c.seed},
                     {"align_point", model::to_string(c.align_point)},
                     {"align_kind", to_string(c.align_kind)},
                     {"icd_strategy", tasks::to_string(c.icd_strategy)},
                     {"variant", c.variant}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  reject_unknown(j,
                 {"k_shots", "lambda", "lr", "warmup_ratio", "weight_decay", "batch", "grad_accum",
                  "epochs", "seed", "align_point", "align_kind", "icd_strategy", "variant"},
                 "train config");
  TrainConfig d;
  c.k_shots = j.value("k_shots", d.k_shots);
  c.lambda = j.value("lambda", d.lambda);
  c.lr = j.value("lr", d.lr);
  c.warmup_ratio = j.value("warmup_ratio", d.warmup_ratio);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.batch = j.value("batch", d.batch);
  c.grad_accum = j.value("grad_accum", d.grad_accum);
  c.epochs = j.value("epochs", d.epochs);
  c.seed = j.value("seed", d.seed);
  c.align_point = model::parse_align_point(j.value("align_point", model::to_string(d.align_point)));
  c.align_kind = parse_align_kind(j.value("align_kind", to_string(d.align_kind)));
  c.icd_strategy = tasks::parse_icd_strategy(j.value("icd_strategy", tasks::to_string(d.icd_strategy)));
  c.variant = j.contains("variant") ? j["variant"].get<variants::VariantConfig>()
                                    : variants::VariantConfig::defaults(variants::VariantKind::mimic);
  c.validate();
}

EpisodeIndices sample_episode(std::size_t dataset_size, std::size_t k, std::mt19937_64& rng) {
  if (dataset_size < k + 1) {
    throw std::invalid_argument("sample_episode: dataset of " + std::to_string(dataset_size) +
                                " samples cannot supply " + std::to_string(k) +
                                " demonstrations plus a query");
  }
  // Partial Fisher-Yates over the index range.
  std::vector<std::size_t> idx(dataset_size);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i <= k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, dataset_size - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  EpisodeIndices e;
  e.query = idx[0];
  e.icds.assign(idx.begin() + 1, idx.begin() + static_cast<std::ptrdiff_t>(k + 1));
  return e;
}

Tensor alignment_loss(const model::LayerTrace& student, const model::LayerTrace& teacher) {
  if (student.hidden.size() != teacher.hidden.size() || student.hidden.empty()) {
    throw num::DimensionError("alignment_loss: student has " +
                              std::to_string(student.hidden.size()) + " layers, teacher " +
                              std::to_string(teacher.hidden.size()));
  }
  Tensor acc;
  for (std::size_t l = 0; l < student.hidden.size(); ++l) {
    if (student.hidden[l].shape() != teacher.hidden[l].shape()) {
      throw num::DimensionError("alignment_loss: layer " + std::to_string(l) + " student " +
                                num::shape_str(student.hidden[l].shape()) + " vs teacher " +
                                num::shape_str(teacher.hidden[l].shape()));
    }
    const Tensor term = num::squared_distance(student.hidden[l], teacher.hidden[l].detach());
    acc = l == 0 ? term : num::add(acc, term);
  }
  return num::scale(acc, 1.0 / static_cast<double>(student.hidden.size()));
}

Tensor kl_alignment_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                         const std::vector<std::size_t>& rows) {
  return num::kl_divergence_rows(student_logits, teacher_logits.detach(), rows);
}

std::vector<std::size_t> answer_rows(const model::PromptContext& ctx) {
  if (ctx.answer_end <= ctx.answer_begin) {
    throw std::invalid_argument("answer span is empty");
  }
  if (ctx.answer_begin == 0) {
    throw std::invalid_argument("answer span starts at the first query token; nothing predicts it");
  }
  if (ctx.answer_end > ctx.query_tokens.size()) {
    throw std::out_of_range("answer span ends past the query");
  }
  std::vector<std::size_t> rows;
  for (auto p = ctx.answer_begin; p < ctx.answer_end; ++p) rows.push_back(p - 1);
  return rows;
}

Tensor ground_truth_loss(const Tensor& logits, const model::PromptContext& ctx) {
  const auto rows = answer_rows(ctx);
  if (logits.rows() != ctx.query_tokens.size()) {
    throw num::DimensionError("ground_truth_loss: logits have " + std::to_string(logits.rows()) +
                              " rows for a " + std::to_string(ctx.query_tokens.size()) +
                              "-token query");
  }
  std::vector<int> targets;
  for (auto p = ctx.answer_begin; p < ctx.answer_end; ++p) targets.push_back(ctx.query_tokens[p]);
  return num::cross_entropy(logits, rows, targets);
}

Tensor total_loss(const Tensor& align, const Tensor& gt, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("total_loss: lambda must be non-negative");
  return num::add(align, num::scale(gt, lambda));
}

void to_json(nlohmann::json& j, const StepRecord& r) {
  j = nlohmann::json{{"step", r.step},
                     {"lr", r.lr},
                     {"align", r.loss.align},
                     {"gt", r.loss.gt},
                     {"total", r.loss.total}};
}

model::PromptContext episode_context(const std::vector<tasks::Sample>& dataset,
                                     const std::vector<tasks::Sample>& demos, std::size_t query) {
  tasks::Episode e;
  e.demos = demos;
  e.query = dataset.at(query);
  return tasks::render(e, true);
}

EpisodeLoss episode_loss(const model::Model& base, const variants::Variant& variant,
                         const model::PromptContext& ctx, const TrainConfig& cfg,
                         std::mt19937_64* dropout_rng) {
  const auto teacher = base.icl_forward(ctx, cfg.align_point);
  variants::RunOptions ro;
  ro.align_point = cfg.align_point;
  ro.dropout_rng = dropout_rng;
  const auto student = variant.forward(base, ctx.query_tokens, ro);
  model::PromptContext query_only;
  query_only.query_tokens = ctx.query_tokens;
  query_only.answer_begin = ctx.answer_begin;
  query_only.answer_end = ctx.answer_end;
  const Tensor gt = ground_truth_loss(student.logits, query_only);
  const Tensor align = cfg.align_kind == AlignKind::l2
                           ? alignment_loss(student, teacher)
                           : kl_alignment_loss(student.logits, teacher.logits, answer_rows(query_only));
  EpisodeLoss out;
  out.total = total_loss(align, gt, cfg.lambda);
  out.values = {align.item(), gt.item(), out.total.item()};
  return out;
}

TrainResult train_loop(const model::Model& base, variants::Variant& variant,
                       const std::vector<tasks::Sample>& dataset, const TrainConfig& cfg,
                       const TrainHooks& hooks) {
  cfg.validate();
  if (!variants::is_trainable(variant.kind())) {
    throw std::invalid_argument("train_loop: " + variants::to_string(variant.kind()) +
                                " has no trainable parameters");
  }
  if (dataset.size() < cfg.k_shots + 1) {
    throw std::invalid_argument("train_loop: dataset of " + std::to_string(dataset.size()) +
                                " samples is too small for " + std::to_string(cfg.k_shots) +
                                "-shot episodes");
  }
  // The teacher is frozen; only variant tensors may collect gradients.
  for (auto p : base.parameters()) p.set_requires_grad(false);
  variant.set_trainable(true);

  auto order_rng = substream(cfg.seed, 1);
  auto icd_rng = substream(cfg.seed, 2);
  auto dropout_rng = substream(cfg.seed, 3);
  AdamW opt(variant.param_groups(cfg.weight_decay));

  const std::size_t per_step = cfg.batch * cfg.grad_accum;
  const std::size_t steps_per_epoch = (dataset.size() + per_step - 1) / per_step;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  auto params = variant.parameters();
  std::vector<std::vector<double>> best_values;

  TrainResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), order_rng);
    std::size_t cursor = 0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
      const double lr = lr_schedule(step, total_steps, cfg.lr, cfg.warmup_ratio);
      opt.zero_grad();
      LossBreakdown sum;
      std::size_t episodes = 0;
      for (std::size_t e = 0; e < per_step && cursor < order.size(); ++e, ++cursor) {
        const auto q = order[cursor];
        std::vector<tasks::Sample> pool;
        pool.reserve(dataset.size() - 1);
        for (std::size_t i = 0; i < dataset.size(); ++i) {
          if (i != q) pool.push_back(dataset[i]);
        }
        const auto demos = tasks::icd_selection(cfg.icd_strategy, pool, dataset[q], cfg.k_shots,
                                                base.embedding(), icd_rng);
        const auto ctx = episode_context(dataset, demos, q);
        num::Tape tape;
        num::TapeScope scope(tape);
        const auto loss = episode_loss(base, variant, ctx, cfg, &dropout_rng);
        if (!finite(loss.values)) {
          nlohmann::json diag{{"step", step},       {"epoch", epoch},
                              {"query", q},         {"lr", lr},
                              {"align", loss.values.align}, {"gt", loss.values.gt},
                              {"total", loss.values.total}, {"tokens", ctx.tokens()}};
          throw TrainingAborted("non-finite loss at step " + std::to_string(step), diag);
        }
        tape.backward(loss.total);
        sum.align += loss.values.align;
        sum.gt += loss.values.gt;
        sum.total += loss.values.total;
        ++episodes;
      }
      if (episodes == 0) continue;
      const double n = static_cast<double>(episodes);
      opt.step(lr, n);
      StepRecord rec{step, lr, {sum.align / n, sum.gt / n, sum.total / n}};
      if (hooks.log_sink) *hooks.log_sink << nlohmann::json(rec).dump() << '\n';
      result.log.push_back(rec);
    }
    if (hooks.validate) {
      const double score = hooks.validate(epoch);
      result.epoch_scores.push_back(score);
      if (result.best_epoch == 0 || score > result.best_score) {
        result.best_epoch = epoch;
        result.best_score = score;
        best_values.clear();
        for (const auto& p : params) best_values.push_back(p.values());
      }
    }
  }
  if (!best_values.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      std::copy(best_values[i].begin(), best_values[i].end(), params[i].mutable_data().begin());
    }
  }
  result.steps = step;
  return result;
}

void to_json(nlohmann::json& j, const PretrainConfig& c) {
  std::vector<std::string> families;
  for (auto f : c.stream.families) families.push_back(tasks::to_string(f));
  j = nlohmann::json{{"steps", c.steps},
                     {"batch", c.batch},
                     {"lr", c.lr},
                     {"warmup_ratio", c.warmup_ratio},
                     {"weight_decay", c.weight_decay},
                     {"seed", c.seed},
                     {"families", families},
                     {"alphabet", c.stream.alphabet},
                     {"min_shots", c.stream.min_shots},
                     {"max_shots", c.stream.max_shots},
                     {"placement", tasks::to_string(c.stream.placement)},
                     {"max_offset", c.stream.max_offset}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
  reject_unknown(j,
                 {"steps", "batch", "lr", "warmup_ratio", "weight_decay", "seed", "families",
                  "alphabet", "min_shots", "max_shots", "placement", "max_offset"},
                 "pretrain config");
  PretrainConfig d;
  c.steps = j.value("steps", d.steps);
  c.batch = j.value("batch", d.batch);
  c.lr = j.value("lr", d.lr);
  c.warmup_ratio = j.value("warmup_ratio", d.warmup_ratio);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.seed = j.value("seed", d.seed);
  c.stream = d.stream;
  if (j.contains("families")) {
    c.stream.families.clear();
    for (const auto& f : j["families"]) c.stream.families.push_back(tasks::parse_family(f.get<std::string>()));
  }
  c.stream.alphabet = j.value("alphabet", d.stream.alphabet);
  c.stream.min_shots = j.value("min_shots", d.stream.min_shots);
  c.stream.max_shots = j.value("max_shots", d.stream.max_shots);
  c.stream.max_offset = j.value("max_offset", d.stream.max_offset);
  c.stream.placement =
      tasks::parse_query_placement(j.value("placement", tasks::to_string(d.stream.placement)));
  if (c.steps == 0 || c.batch == 0) throw std::invalid_argument("pretrain config: steps and batch must be positive");
  if (c.stream.families.empty()) throw std::invalid_argument("pretrain config: no task families");
}

std::vector<PretrainRecord> pretrain(model::Model& m, const PretrainConfig& cfg,
                                     std::ostream* log_sink, std::size_t log_every) {
  const auto& mc = m.config();
  const std::size_t longest = 3 * cfg.stream.max_shots + 2;
  if (longest > mc.max_len) {
    throw std::invalid_argument("pretrain: " + std::to_string(cfg.stream.max_shots) +
                                "-shot episodes exceed max_len " + std::to_string(mc.max_len));
  }
  if (tasks::symbol_token(cfg.stream.alphabet - 1) >= static_cast<int>(mc.vocab_size)) {
    throw std::invalid_argument("pretrain: alphabet of " + std::to_string(cfg.stream.alphabet) +
                                " does not fit the vocabulary");
  }
  m.set_trainable(true);
  AdamW opt({{m.parameters(), 1.0, cfg.weight_decay}});
  tasks::PretrainingStream stream(cfg.stream, cfg.seed);
  std::vector<PretrainRecord> records;
  double running = 0.0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double lr = lr_schedule(step, cfg.steps, cfg.lr, cfg.warmup_ratio);
    opt.zero_grad();
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const auto ep = stream.next();
      const bool every_answer = stream.last_task().family() == tasks::Family::modular_offset;
      std::vector<std::size_t> rows;
      std::vector<int> targets;
      for (std::size_t i = 1; i < ep.demos.size(); ++i) {
        bool seen = every_answer;
        for (std::size_t j = 0; j < i && !seen; ++j) seen = ep.demos[j].x == ep.demos[i].x;
        if (!seen) continue;
        rows.push_back(3 * i);
        targets.push_back(ep.demos[i].y);
      }
      rows.push_back(3 * ep.demos.size());
      targets.push_back(ep.query.y);
      num::Tape tape;
      num::TapeScope scope(tape);
      const auto trace = m.forward_with_trace(tasks::render(ep, true).tokens());
      const auto loss = num::cross_entropy(trace.logits, rows, targets);
      if (!std::isfinite(loss.item())) {
        m.set_trainable(false);
        throw TrainingAborted("pretrain: non-finite loss at step " + std::to_string(step),
                              {{"step", step}, {"lr", lr}, {"loss", loss.item()}});
      }
      loss_sum += loss.item();
      tape.backward(loss);
    }
    opt.step(lr, static_cast<double>(cfg.batch));
    const double mean = loss_sum / static_cast<double>(cfg.batch);
    running = step == 0 ? mean : 0.95 * running + 0.05 * mean;
    if (step % log_every == 0 || step + 1 == cfg.steps) {
      PretrainRecord r{step, lr, running};
      records.push_back(r);
      if (log_sink) {
        *log_sink << nlohmann::json{{"step", r.step}, {"lr", r.lr}, {"loss", r.loss}}.dump() << '\n';
      }
    }
  }
  m.set_trainable(false);
  return records;
}

}  // namespace mimic::training
