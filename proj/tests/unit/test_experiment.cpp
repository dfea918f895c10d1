#include <doctest.h>

#include <filesystem>
#include <set>

#include "mimic/experiment.hpp"

using namespace mimic;
using namespace mimic::experiment;

namespace {

// Small enough to pretrain in well under a second.
ExperimentConfig tiny() {
  auto c = ExperimentConfig::desk();
  c.model.n_layers = 1;
  c.model.n_heads = 2;
  c.model.d_model = 8;
  c.model.vocab_size = 12;
  c.model.max_len = 32;
  c.model.ffn_mult = 2;
  c.pretrain.steps = 3;
  c.pretrain.batch = 2;
  c.pretrain.stream.alphabet = 8;
  c.pretrain.stream.max_shots = 4;
  c.train.k_shots = 2;
  c.train.epochs = 2;
  c.task.n_train = 12;
  c.task.n_val = 6;
  c.task.n_test = 10;
  c.task.eval_shots = 2;
  c.task.extraction_prompts = 3;
  return c;
}

}  // namespace

TEST_CASE("experiment configuration") {
  const auto desk = ExperimentConfig::desk();
  CHECK_NOTHROW(desk.validate());
  CHECK(desk.train.lr == 2e-2);
  CHECK(desk.pretrain.stream.max_offset == 4);

  SUBCASE("json round trip") {
    nlohmann::json j = desk;
    CHECK(j["schema"] == kSchemaVersion);
    const auto back = parse_config(j);
    CHECK(nlohmann::json(back) == j);
  }
  SUBCASE("partial documents keep the desk values") {
    const auto c = parse_config({{"seed", 4}, {"train", {{"epochs", 3}}}, {"task", {{"n_test", 50}}}});
    CHECK(c.seed == 4);
    CHECK(c.train.epochs == 3);
    CHECK(c.train.lr == desk.train.lr);
    CHECK(c.task.n_test == 50);
    CHECK(c.task.n_train == desk.task.n_train);
    const auto lora = parse_config({{"train", {{"variant", {{"kind", "lora"}}}}}});
    CHECK(lora.train.variant.kind == variants::VariantKind::lora);
    CHECK(lora.train.variant.lora.has_value());
  }
  SUBCASE("unknown keys are rejected at every level") {
    CHECK_THROWS_AS(parse_config({{"sede", 1}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"train", {{"momentum", 0.9}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"model", {{"depth", 2}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"task", {{"shots", 2}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"pretrain", {{"epochs", 2}}}}), ConfigError);
  }
  SUBCASE("invalid values") {
    CHECK_THROWS_AS(parse_config({{"schema", 2}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"task", {{"family", "permutation"}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"train", {{"k_shots", 40}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"train", {{"lr", "fast"}}}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"train", 3}}), ConfigError);
    CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
  }
  SUBCASE("hashes") {
    auto other = desk;
    other.seed = 9;
    CHECK(config_hash(desk) != config_hash(other));
    CHECK(base_hash(desk) == base_hash(other));
    other.output_dir = "elsewhere";
    other.seed = desk.seed;
    CHECK(config_hash(desk) == config_hash(other));
    other.pretrain.steps = 10;
    CHECK(base_hash(desk) != base_hash(other));
    CHECK(config_hash(desk).size() == 16);
    CHECK(provenance_line(desk, 3).find("seed=3") != std::string::npos);
  }
}

TEST_CASE("seed sub-streams") {
  CHECK(sub_seed(1, "train") == sub_seed(1, "train"));
  std::set<std::uint64_t> seen;
  for (const char* name : {"task", "train", "eval", "pretrain"})
    for (std::uint64_t root : {0, 1, 2}) seen.insert(sub_seed(root, name));
  CHECK(seen.size() == 12);
}

TEST_CASE("task data") {
  const auto c = ExperimentConfig::desk();
  const auto a = make_task_data(c, 3), b = make_task_data(c, 3);
  CHECK(a.task.id() == b.task.id());
  CHECK(a.train.size() == 200);
  CHECK(a.val.size() == 100);
  CHECK(a.test.size() == 200);
  for (std::size_t i = 0; i < a.test.size(); ++i) CHECK(a.test[i].x == b.test[i].x);
  std::set<std::size_t> offsets;
  for (std::uint64_t s = 0; s < 40; ++s) offsets.insert(make_task_data(c, s).task.table()[0]);
  CHECK(offsets == std::set<std::size_t>{1, 2, 3, 4});
}

TEST_CASE("pipeline on a tiny model") {
  const auto c = tiny();
  REQUIRE_NOTHROW(c.validate());
  const auto cache = std::filesystem::temp_directory_path() / "mimic_test_cache";
  std::filesystem::remove_all(cache);
  bool cached = true;
  const auto base = load_or_pretrain(c, cache, nullptr, &cached);
  CHECK_FALSE(cached);
  const auto again = load_or_pretrain(c, cache, nullptr, &cached);
  CHECK(cached);
  CHECK(again.checksum() == base.checksum());
  std::filesystem::remove_all(cache);

  const auto data = make_task_data(c, 1);
  SUBCASE("zero-initialised mimic evaluates like zero-shot") {
    auto v = variants::build_variant(c.train.variant, base);
    const auto zs = evaluate(base, tasks::zero_shot_runner(base), data, c, 1, true);
    const auto mv = evaluate(base, tasks::variant_runner(base, v), data, c, 1, true);
    CHECK(mv.accuracy == zs.accuracy);
    CHECK(mv.l2_per_layer == zs.l2_per_layer);
    CHECK(mv.tokens_per_query == 1.0);
    const auto icl = evaluate(base, tasks::icl_runner(base), data, c, 1, true);
    CHECK(icl.tokens_per_query == 3.0 * c.task.eval_shots + 1.0);
    for (double d : icl.l2_per_layer) CHECK(d == 0.0);
  }
  SUBCASE("fitting is reproducible") {
    auto a = variants::build_variant(c.train.variant, base);
    auto b = variants::build_variant(c.train.variant, base);
    const auto ra = fit_variant(base, a, data, c.train);
    const auto rb = fit_variant(base, b, data, c.train);
    CHECK(ra.train.epoch_scores.size() == 2);
    CHECK(ra.train.epoch_scores == rb.train.epoch_scores);
    CHECK(a.parameters()[0].values() == b.parameters()[0].values());
  }
  SUBCASE("patching variants are extracted, not trained") {
    auto v = variants::build_variant(variants::VariantConfig::defaults(variants::VariantKind::task_vector), base);
    const auto r = fit_variant(base, v, data, c.train, c.task.extraction_prompts);
    REQUIRE(r.sweep.has_value());
    CHECK(r.train.steps == 0);
    CHECK(v.patch_vector().values() == r.sweep->vector.values());
  }
}

TEST_CASE("verification suites") {
  const auto dec = verify_decomposition(11);
  CHECK(dec.passed);
  CHECK(dec.cases == 100);
  CHECK(dec.max_error <= 1e-9);
  CHECK(verify_mu_contract(12).passed);
  const auto neutral = verify_neutral_init(13);
  CHECK(neutral.passed);
  CHECK(neutral.max_error <= 1e-12);
  CHECK(verify_op_gradients(14).passed);
  CHECK(verify_variant_gradients(15, 2).passed);

  SUBCASE("a corrupted adjoint is reported by name") {
    const auto report = run_verify(1, std::string("softmax_rows"));
    CHECK_FALSE(report.passed());
    const auto j = report.to_json();
    bool named = false;
    for (const auto& s : j["suites"]) {
      if (s["name"] != "op_gradients") continue;
      CHECK(s["passed"] == false);
      for (const auto& f : s["failures"]) named = named || f.get<std::string>().rfind("softmax_rows:", 0) == 0;
    }
    CHECK(named);
    // the fault does not outlive the run
    CHECK(verify_op_gradients(14).passed);
  }
  CHECK_THROWS_AS(run_verify(1, std::string("no_such_op")), std::invalid_argument);
}
