#include <doctest.h>

#include <numeric>
#include <sstream>

#include "mimic/evaluation.hpp"
#include "oracles.hpp"

using namespace mimic;
using namespace mimic::tasks;

namespace {

model::ModelConfig small() {
  model::ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.vocab_size = 20;
  c.max_len = 40;
  c.ffn_mult = 2;
  c.seed = 2;
  return c;
}

std::vector<std::size_t> domain(std::size_t m) {
  std::vector<std::size_t> d(m);
  std::iota(d.begin(), d.end(), 0);
  return d;
}

// Puts all mass on the true answer.
Runner label_oracle(std::size_t vocab) {
  return {"oracle", false, [vocab](const Sample& q, const std::vector<Sample>&) {
            model::LayerTrace t;
            std::vector<double> row(vocab, 0.0);
            row[static_cast<std::size_t>(q.y)] = 1.0;
            t.logits = num::Tensor::matrix(1, vocab, row);
            return t;
          }};
}

}  // namespace

TEST_CASE("predict reads the last row") {
  model::LayerTrace t;
  t.logits = num::Tensor::matrix(2, 3, {9, 0, 0, 0, 1, 5});
  CHECK(predict(t) == 2);
  t.logits = num::Tensor::zeros(num::Shape{0, 3});
  CHECK_THROWS_AS(predict(t), std::invalid_argument);
}

TEST_CASE("accuracy") {
  std::mt19937_64 rng(1);
  const auto task = MappingTask::sample(Family::permutation, 16, rng);
  const auto samples = generate_task_dataset(task, 50, domain(16), rng);
  const DemoSource none;
  const auto perfect = evaluate_accuracy(label_oracle(20), samples, none, rng);
  CHECK(perfect.accuracy == 1.0);
  CHECK(perfect.n == 50);
  CHECK(perfect.tokens_per_query == 1.0);
  CHECK_THROWS_AS(evaluate_accuracy(label_oracle(20), {}, none, rng), std::invalid_argument);

  SUBCASE("an untrained model is at most at chance") {
    const model::Model base(small());
    const auto zs = zero_shot_runner(base);
    double total = 0.0;
    const std::size_t tasks_n = 100, m = 16;
    for (std::size_t t = 0; t < tasks_n; ++t) {
      const auto task_t = MappingTask::sample(Family::permutation, m, rng);
      total += evaluate_accuracy(zs, generate_task_dataset(task_t, 16, domain(m), rng), none, rng).accuracy;
    }
    const double mean = total / tasks_n;
    const double sigma = std::sqrt((1.0 / m) * (1.0 - 1.0 / m) / (tasks_n * 16.0));
    CHECK(mean <= 1.0 / m + 4.0 * sigma);
  }
}

TEST_CASE("runners and token counts") {
  const model::Model base(small());
  std::mt19937_64 rng(2);
  const auto task = MappingTask::sample(Family::permutation, 16, rng);
  const auto pool = generate_task_dataset(task, 40, domain(16), rng);
  const DemoSource demos{&pool, IcdStrategy::random, 4, &base.embedding()};
  const auto q = pool[0];
  const auto chosen = demos.select(q, rng);
  CHECK(chosen.size() == 4);

  auto variant = variants::build_variant(variants::VariantConfig::defaults(variants::VariantKind::mimic), base);
  const auto zs = zero_shot_runner(base), icl = icl_runner(base), mv = variant_runner(base, variant);
  CHECK(tokens_processed(zs, q, chosen) == 1);
  CHECK(tokens_processed(mv, q, chosen) == tokens_processed(zs, q, chosen));
  CHECK(tokens_processed(icl, q, chosen) == 4 * 3 + 1);
  CHECK(icl.uses_demos);
  CHECK_FALSE(mv.uses_demos);

  // The ICL runner returns the query row of the full prompt.
  Episode e{chosen, q};
  const auto full = base.forward_with_trace(render(e, false).tokens());
  const auto got = icl.run(q, chosen);
  CHECK(got.rows() == 1);
  for (std::size_t c = 0; c < 20; ++c) CHECK(got.logits.at(0, c) == full.logits.at(12, c));
  CHECK(mv.run(q, {}).logits.values() == zs.run(q, {}).logits.values());

  const auto lat_icl = latency_bench(icl, pool, demos, 5, rng);
  const auto lat_zs = latency_bench(zs, pool, demos, 5, rng);
  CHECK(lat_icl.tokens_per_query == 13);
  CHECK(lat_zs.tokens_per_query == 1);
  CHECK(lat_icl.mean_seconds > 0.0);
  CHECK(lat_icl.mode == "4_shot_icl");
  CHECK_THROWS_AS(latency_bench(zs, pool, demos, 0, rng), std::invalid_argument);
}

TEST_CASE("alignment distances") {
  const model::Model base(small());
  std::mt19937_64 rng(3);
  const auto task = MappingTask::sample(Family::permutation, 16, rng);
  const auto pool = generate_task_dataset(task, 40, domain(16), rng);
  const DemoSource demos{&pool, IcdStrategy::random, 3, &base.embedding()};
  const auto samples = std::vector<Sample>(pool.begin(), pool.begin() + 10);

  const auto self = alignment_distance_report(base, icl_runner(base), samples, demos, rng);
  REQUIRE(self.l2_per_layer.size() == 2);
  for (double d : self.l2_per_layer) CHECK(d == 0.0);
  for (double c : self.cosine_per_layer) CHECK(c == doctest::Approx(1.0).epsilon(1e-12));

  const auto zs = alignment_distance_report(base, zero_shot_runner(base), samples, demos, rng);
  CHECK(zs.mean_l2() > 0.0);
  for (double c : zs.cosine_per_layer) CHECK((c >= -1.0 && c <= 1.0));
  CHECK(zs.shots == 3);
  CHECK_THROWS_AS(alignment_distance_report(base, zero_shot_runner(base), samples, DemoSource{&pool}, rng),
                  std::invalid_argument);
}

TEST_CASE("order sensitivity") {
  const model::Model base(small());
  std::mt19937_64 rng(4);
  const auto task = MappingTask::sample(Family::permutation, 16, rng);
  const auto pool = generate_task_dataset(task, 40, domain(16), rng);
  const auto samples = std::vector<Sample>(pool.begin(), pool.begin() + 20);
  CHECK(order_sensitivity(base, samples, {&pool, IcdStrategy::random, 1, &base.embedding()}, rng) == 0.0);
  const double s = order_sensitivity(base, samples, {&pool, IcdStrategy::random, 6, &base.embedding()}, rng);
  CHECK((s >= 0.0 && s <= 1.0));
}

TEST_CASE("patching sweeps") {
  const model::Model base(small());
  std::mt19937_64 rng(5);
  const auto task = MappingTask::sample(Family::permutation, 16, rng);
  const auto pool = generate_task_dataset(task, 40, domain(16), rng);
  const auto prompts = extraction_prompts(pool, 4, 6, rng);
  REQUIRE(prompts.size() == 6);
  CHECK(prompts[0].icd_tokens.size() == 4);
  CHECK(prompts[0].query_tokens.size() == 1);
  CHECK_THROWS_AS(extraction_prompts(pool, 40, 1, rng), std::invalid_argument);
  const auto validation = std::vector<Sample>(pool.begin(), pool.begin() + 10);

  const auto tv = sweep_task_vector(base, prompts, validation);
  CHECK(tv.table.size() == 2);
  double best = 0.0;
  for (const auto& e : tv.table) best = std::max(best, e.accuracy);
  CHECK(tv.best_accuracy == best);
  const auto at_best = variants::tv_extract(base, prompts, tv.best.layer);
  CHECK(tv.vector.values() == at_best.values());

  const auto fv = sweep_function_vector(base, prompts, validation);
  // head counts 1, 2, 4 at each of 2 layers
  CHECK(fv.table.size() == 6);
  CHECK_FALSE(fv.best.heads.empty());
  CHECK(fv.vector.values() == variants::fv_extract(base, prompts, fv.best.heads).values());
}

TEST_CASE("report csv") {
  EvalReport a;
  a.mode = "mimic";
  a.shots = 8;
  a.seed = 3;
  a.n = 10;
  a.accuracy = 0.5;
  a.l2_per_layer = {1.0, 3.0};
  a.cosine_per_layer = {0.5, 0.7};
  a.tokens_per_query = 1;
  CHECK(a.mean_l2() == 2.0);
  CHECK(a.mean_cosine() == doctest::Approx(0.6));
  std::ostringstream out;
  write_reports_csv(out, {a});
  std::istringstream lines(out.str());
  std::string header, row;
  std::getline(lines, header);
  std::getline(lines, row);
  CHECK(header == "mode,k,seed,accuracy,mean_l2,mean_cosine,latency_s,tokens,l2_layer0,l2_layer1,cosine_layer0,cosine_layer1");
  CHECK(row == "mimic,8,3,0.5,2,0.6,0,1,1,3,0.5,0.7");

  std::ostringstream lat;
  write_latency_csv(lat, {{"zero_shot", 0, 4, 0.25, 1}});
  CHECK(lat.str() == "mode,shots,n,mean_seconds,tokens_per_query\nzero_shot,0,4,0.25,1\n");
}
