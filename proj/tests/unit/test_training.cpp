#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "mimic/training.hpp"
#include "oracles.hpp"

using namespace mimic;
using namespace mimic::training;
using model::LayerTrace;
using model::Model;
using model::ModelConfig;
using num::Shape;
using num::Tensor;

namespace {

ModelConfig small(std::size_t layers = 2) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = 2;
  c.d_model = 8;
  c.vocab_size = 12;
  c.max_len = 40;
  c.ffn_mult = 2;
  c.seed = 11;
  return c;
}

std::vector<tasks::Sample> offset_dataset(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto task = tasks::MappingTask::modular_offset(8, 3);
  std::vector<std::size_t> domain(8);
  std::iota(domain.begin(), domain.end(), 0);
  return tasks::generate_task_dataset(task, n, domain, rng);
}

TrainConfig quick_config(variants::VariantKind kind = variants::VariantKind::mimic) {
  TrainConfig c;
  c.k_shots = 3;
  c.epochs = 2;
  c.seed = 4;
  c.variant = variants::VariantConfig::defaults(kind);
  return c;
}

LayerTrace trace_of(std::vector<Tensor> hidden) {
  LayerTrace t;
  t.hidden = std::move(hidden);
  t.logits = Tensor::zeros(Shape{t.hidden[0].rows(), 2});
  return t;
}

}  // namespace

TEST_CASE("alignment loss") {
  const auto h = Tensor::matrix(1, 2, {1, 2});
  CHECK(alignment_loss(trace_of({h}), trace_of({h})).item() == 0.0);
  CHECK(alignment_loss(trace_of({h}), trace_of({Tensor::matrix(1, 2, {1, 0})})).item() == doctest::Approx(4.0));
  // per-layer squared distances of 1 and 3
  const auto two = alignment_loss(
      trace_of({Tensor::matrix(1, 2, {1, 0}), Tensor::matrix(1, 3, {1, 1, 1})}),
      trace_of({Tensor::matrix(1, 2, {0, 0}), Tensor::matrix(1, 3, {0, 0, 0})}));
  CHECK(two.item() == doctest::Approx(2.0));

  CHECK_THROWS_AS(alignment_loss(trace_of({h}), trace_of({h, h})), num::DimensionError);
  CHECK_THROWS_AS(alignment_loss(trace_of({h}), trace_of({Tensor::matrix(2, 1, {1, 2})})), num::DimensionError);

  std::mt19937_64 rng(1);
  const auto s = oracle::random_matrix(3, 4, rng), t = oracle::random_matrix(3, 4, rng);
  double naive = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) naive += (s[i] - t[i]) * (s[i] - t[i]);
  CHECK(alignment_loss(trace_of({s, s}), trace_of({t, t})).item() == doctest::Approx(naive).epsilon(1e-13));

  SUBCASE("the teacher receives no gradient") {
    auto student = oracle::random_matrix(2, 3, rng);
    auto teacher = oracle::random_matrix(2, 3, rng);
    student.set_requires_grad(true);
    teacher.set_requires_grad(true);
    num::Tape tape;
    num::TapeScope scope(tape);
    tape.backward(alignment_loss(trace_of({student}), trace_of({teacher})));
    CHECK(student.has_grad());
    CHECK_FALSE(teacher.has_grad());
  }
}

TEST_CASE("kl alignment loss") {
  const auto same = Tensor::matrix(2, 3, {0.1, 2, -1, 4, 0, 0});
  CHECK(kl_alignment_loss(same, same, {0, 1}).item() == doctest::Approx(0.0).epsilon(1e-15));
  const auto teacher = Tensor::matrix(1, 2, {0, -1e4});
  const auto student = Tensor::matrix(1, 2, {0, 0});
  CHECK(kl_alignment_loss(student, teacher, {0}).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  std::mt19937_64 rng(2);
  for (int i = 0; i < 50; ++i) {
    const auto a = oracle::random_matrix(3, 5, rng, 2.0), b = oracle::random_matrix(3, 5, rng, 2.0);
    CHECK(kl_alignment_loss(a, b, {0, 2}).item() >= 0.0);
  }
  CHECK_THROWS(kl_alignment_loss(Tensor::zeros(Shape{2, 3}), Tensor::zeros(Shape{2, 4}), {0}));
}

TEST_CASE("ground truth loss") {
  const model::PromptContext ctx{{}, {5, 7, 2}, 1, 3};
  CHECK(answer_rows(ctx) == std::vector<std::size_t>{0, 1});
  CHECK(ground_truth_loss(Tensor::zeros(Shape{3, 64}), ctx).item() == doctest::Approx(std::log(64.0)).epsilon(1e-14));

  std::vector<double> forcing(3 * 12, 0.0);
  forcing[0 * 12 + 7] = 60.0;
  forcing[1 * 12 + 2] = 60.0;
  CHECK(ground_truth_loss(Tensor::matrix(3, 12, forcing), ctx).item() < 1e-20);

  std::mt19937_64 rng(3);
  const auto logits = oracle::random_matrix(3, 12, rng, 2.0);
  double naive = 0.0;
  for (std::size_t r : {0u, 1u}) {
    const int target = ctx.query_tokens[r + 1];
    double z = 0.0;
    for (std::size_t c = 0; c < 12; ++c) z += std::exp(logits.at(r, c));
    naive += -std::log(std::exp(logits.at(r, static_cast<std::size_t>(target))) / z);
  }
  CHECK(ground_truth_loss(logits, ctx).item() == doctest::Approx(naive / 2.0).epsilon(1e-13));

  CHECK_THROWS_AS(ground_truth_loss(logits, {{}, {5, 7, 2}, 2, 2}), std::invalid_argument);
  CHECK_THROWS_AS(ground_truth_loss(logits, {{}, {5, 7, 2}, 0, 1}), std::invalid_argument);
  CHECK_THROWS_AS(ground_truth_loss(oracle::random_matrix(2, 12, rng), ctx), num::DimensionError);
}

TEST_CASE("total loss") {
  const auto four = Tensor::scalar(4.0), two = Tensor::scalar(2.0);
  CHECK(total_loss(four, two, 0.5).item() == 5.0);
  CHECK(total_loss(four, two, 0.0).item() == 4.0);
  CHECK(total_loss(four, Tensor::scalar(0.0), 0.5).item() == 4.0);
  CHECK_THROWS_AS(total_loss(four, two, -1.0), std::invalid_argument);
}

TEST_CASE("learning-rate schedule") {
  CHECK(lr_schedule(0, 100, 1.0, 0.1) < 1.0);
  CHECK(lr_schedule(10, 100, 1.0, 0.1) == doctest::Approx(1.0));
  CHECK(lr_schedule(100, 100, 1.0, 0.1) == doctest::Approx(0.0).epsilon(1e-15));
  const double progress = (55.0 - 10.0) / 90.0;
  CHECK(lr_schedule(55, 100, 2e-3, 0.1) == doctest::Approx(0.5 * (1.0 + std::cos(M_PI * progress)) * 2e-3));
  double last = 2.0;
  for (std::size_t s = 10; s <= 100; ++s) {
    const double lr = lr_schedule(s, 100, 1.0, 0.1);
    CHECK(lr <= last);
    last = lr;
  }
}

TEST_CASE("episode sampling") {
  std::mt19937_64 rng(5);
  const auto e = sample_episode(10, 3, rng);
  CHECK(e.icds.size() == 3);
  std::set<std::size_t> all(e.icds.begin(), e.icds.end());
  all.insert(e.query);
  CHECK(all.size() == 4);
  for (auto i : all) CHECK(i < 10);

  std::mt19937_64 a(9), b(9);
  for (int i = 0; i < 20; ++i) {
    const auto x = sample_episode(30, 5, a), y = sample_episode(30, 5, b);
    CHECK(x.icds == y.icds);
    CHECK(x.query == y.query);
  }
  CHECK_THROWS_AS(sample_episode(3, 3, rng), std::invalid_argument);

  SUBCASE("queries are uniform") {
    const std::size_t n = 10, draws = 10000;
    std::vector<double> counts(n, 0.0);
    for (std::size_t i = 0; i < draws; ++i) counts[sample_episode(n, 4, rng).query] += 1.0;
    const double expected = static_cast<double>(draws) / n;
    const double sigma = std::sqrt(draws * (1.0 / n) * (1.0 - 1.0 / n));
    double chi2 = 0.0;
    for (double c : counts) {
      CHECK(std::abs(c - expected) <= 3.0 * sigma);
      chi2 += (c - expected) * (c - expected) / expected;
    }
    CHECK(chi2 < 27.88);  // 0.999 quantile at 9 degrees of freedom
  }
}

TEST_CASE("train config") {
  CHECK_NOTHROW(TrainConfig{}.validate());
  const TrainConfig d;
  CHECK(d.lambda == 0.5);
  CHECK(d.lr == 5e-3);
  CHECK(d.warmup_ratio == 0.1);
  CHECK(d.weight_decay == 1e-3);
  CHECK(d.batch == 2);
  CHECK(d.grad_accum == 2);

  auto bad = d;
  bad.lambda = -0.1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = d;
  bad.k_shots = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = d;
  bad.warmup_ratio = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  const nlohmann::json j = quick_config(variants::VariantKind::lora);
  const auto back = j.get<TrainConfig>();
  CHECK(nlohmann::json(back) == j);
  auto extra = j;
  extra["momentum"] = 0.9;
  CHECK_THROWS_WITH_AS(extra.get<TrainConfig>(), doctest::Contains("momentum"), std::invalid_argument);
  CHECK(parse_align_kind("kl") == AlignKind::kl);
  CHECK_THROWS_AS(parse_align_kind("cosine"), std::invalid_argument);
}

TEST_CASE("shift that reproduces the demonstrations gives zero alignment loss") {
  // One layer, one query token: setting f to the teacher's log Z1 and v to the
  // difference of the two attention terms makes the student exact.
  const Model base(small(1));
  const model::PromptContext ctx{{{3, 6, 0}, {4, 7, 0}}, {5}, 0, 0};
  const auto tokens = ctx.tokens();
  const auto& w = base.layers()[0];
  oracle::Rows x;
  for (int t : tokens) {
    x.emplace_back(8);
    for (std::size_t c = 0; c < 8; ++c) x.back()[c] = base.embedding().at(static_cast<std::size_t>(t), c);
  }
  const auto xn = oracle::layer_norm(x, w.ln1_g, w.ln1_b);
  const auto q = oracle::rotate(oracle::naive_matmul(xn, w.attn.w_q), 2, 0);
  const auto k = oracle::rotate(oracle::naive_matmul(xn, w.attn.w_k), 2, 0);
  const auto v = oracle::naive_matmul(xn, w.attn.w_v);
  const std::size_t last = tokens.size() - 1, dh = 4;

  auto variant = variants::build_variant(variants::VariantConfig::defaults(variants::VariantKind::mimic), base);
  for (std::size_t h = 0; h < 2; ++h) {
    auto head = [&](const oracle::Rows& m, std::size_t r) {
      return std::vector<double>(m[r].begin() + h * dh, m[r].begin() + (h + 1) * dh);
    };
    const auto qh = head(q, last);
    oracle::Rows kd, vd;
    double z1 = 0.0;
    for (std::size_t r = 0; r < last; ++r) {
      kd.push_back(head(k, r));
      vd.push_back(head(v, r));
      double s = 0.0;
      for (std::size_t c = 0; c < dh; ++c) s += qh[c] * kd.back()[c];
      z1 += std::exp(s / 2.0);
    }
    const auto sa_d = oracle::naive_sa(qh, kd, vd);
    const auto sa_q = head(v, last);
    auto& p = variant.shifts()[0].heads[h];
    p.f_b.mutable_data()[0] = std::log(z1);
    for (std::size_t c = 0; c < dh; ++c) p.v.mutable_data()[c] = sa_d[c] - sa_q[c];
  }
  const auto teacher = base.icl_forward(ctx);
  const auto student = variant.forward(base, ctx.query_tokens);
  CHECK(alignment_loss(student, teacher).item() <= 1e-20);
  const auto zero_shot = base.forward_with_trace(ctx.query_tokens);
  CHECK(alignment_loss(zero_shot, teacher).item() > 1e-3);
}

TEST_CASE("episode loss") {
  const Model base(small());
  const auto data = offset_dataset(12, 1);
  auto cfg = quick_config();
  auto variant = variants::build_variant(cfg.variant, base);
  const auto ctx = episode_context(data, {data[1], data[2], data[3]}, 0);
  CHECK(ctx.query_tokens == std::vector<int>{data[0].x, data[0].y});
  CHECK(ctx.answer_begin == 1);

  const auto l = episode_loss(base, variant, ctx, cfg);
  CHECK(l.values.total == doctest::Approx(l.values.align + 0.5 * l.values.gt).epsilon(1e-14));
  CHECK(l.values.align > 0.0);

  cfg.align_kind = AlignKind::kl;
  const auto kl = episode_loss(base, variant, ctx, cfg);
  CHECK(kl.values.gt == l.values.gt);
  CHECK(kl.values.align != l.values.align);

  SUBCASE("one small step lowers the loss on the same episode") {
    cfg.align_kind = AlignKind::l2;
    std::mt19937_64 rng(2);
    std::normal_distribution<double> d(0.0, 0.1);
    for (auto p : variant.parameters())
      for (auto& x : p.mutable_data()) x = d(rng);
    variant.set_trainable(true);
    const double before = episode_loss(base, variant, ctx, cfg).values.total;
    AdamW opt(variant.param_groups(0.0));
    {
      num::Tape tape;
      num::TapeScope scope(tape);
      tape.backward(episode_loss(base, variant, ctx, cfg).total);
    }
    opt.step(1e-3);
    CHECK(episode_loss(base, variant, ctx, cfg).values.total < before);
  }
}

TEST_CASE("training loop") {
  const Model base(small());
  const auto data = offset_dataset(12, 2);

  SUBCASE("logs are reproducible and consistent") {
    auto run = [&] {
      const auto cfg = quick_config();
      auto v = variants::build_variant(cfg.variant, base);
      std::ostringstream sink;
      TrainHooks hooks;
      hooks.log_sink = &sink;
      train_loop(base, v, data, cfg, hooks);
      return std::make_pair(sink.str(), v.to_json());
    };
    const auto a = run(), b = run();
    CHECK(a.first == b.first);
    CHECK(a.second == b.second);
    std::istringstream lines(a.first);
    std::string line;
    std::size_t n = 0;
    while (std::getline(lines, line)) {
      const auto j = nlohmann::json::parse(line);
      CHECK(j.at("step").get<std::size_t>() == n++);
      CHECK(j.at("total").get<double>() ==
            doctest::Approx(j.at("align").get<double>() + 0.5 * j.at("gt").get<double>()).epsilon(1e-12));
    }
    // 12 samples in steps of 2 x 2 episodes over 2 epochs
    CHECK(n == 6);
  }
  SUBCASE("base weights collect no gradient") {
    const auto cfg = quick_config(variants::VariantKind::mimic_plus_lora);
    auto v = variants::build_variant(cfg.variant, base);
    const auto sum = base.checksum();
    train_loop(base, v, data, cfg);
    CHECK(base.checksum() == sum);
    for (const auto& p : base.parameters()) CHECK_FALSE(p.has_grad());
  }
  SUBCASE("with no ground truth and frozen shift vectors the alignment loss is constant") {
    auto cfg = quick_config();
    cfg.lambda = 0.0;
    auto v = variants::build_variant(cfg.variant, base);
    std::vector<Tensor> gates;
    for (const auto& s : v.shifts())
      for (auto h : s.heads) {
        h.f_w.set_requires_grad(true);
        h.f_b.set_requires_grad(true);
        gates.push_back(h.f_w);
        gates.push_back(h.f_b);
      }
    AdamW opt({{gates, 1.0, 1e-3}});
    const auto ctx = episode_context(data, {data[1], data[2], data[3]}, 0);
    std::vector<double> losses;
    for (int step = 0; step < 5; ++step) {
      num::Tape tape;
      num::TapeScope scope(tape);
      const auto l = episode_loss(base, v, ctx, cfg);
      losses.push_back(l.values.align);
      tape.backward(l.total);
      opt.step(1e-2);
      opt.zero_grad();
    }
    for (double l : losses) CHECK(l == losses[0]);
  }
  SUBCASE("best epoch parameters are restored") {
    auto cfg = quick_config();
    cfg.epochs = 3;
    auto v = variants::build_variant(cfg.variant, base);
    std::vector<nlohmann::json> snapshots;
    TrainHooks hooks;
    hooks.validate = [&](std::size_t epoch) {
      snapshots.push_back(v.to_json());
      return epoch == 2 ? 1.0 : 0.0;
    };
    const auto result = train_loop(base, v, data, cfg, hooks);
    CHECK(result.best_epoch == 2);
    CHECK(result.epoch_scores == std::vector<double>{0.0, 1.0, 0.0});
    CHECK(v.to_json() == snapshots[1]);
  }
  SUBCASE("errors") {
    auto cfg = quick_config(variants::VariantKind::task_vector);
    auto tv = variants::build_variant(cfg.variant, base);
    CHECK_THROWS_AS(train_loop(base, tv, data, cfg), std::invalid_argument);
    cfg = quick_config();
    auto v = variants::build_variant(cfg.variant, base);
    CHECK_THROWS_AS(train_loop(base, v, {data.begin(), data.begin() + 3}, cfg), std::invalid_argument);
  }
}
