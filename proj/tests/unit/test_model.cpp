#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "mimic/model.hpp"
#include "mimic/numerics/grad_check.hpp"
#include "oracles.hpp"

using namespace mimic;
using namespace mimic::model;

namespace {

ModelConfig tiny(std::uint64_t seed = 3) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.vocab_size = 12;
  c.max_len = 16;
  c.ffn_mult = 2;
  c.seed = seed;
  return c;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mimic_test_" + name);
}

}  // namespace

TEST_CASE("model config validation") {
  CHECK_NOTHROW(ModelConfig{}.validate());
  auto c = tiny();
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny();
  c.d_model = 6;
  c.n_heads = 2;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("even"), std::invalid_argument);
  c = tiny();
  c.vocab_size = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);

  const nlohmann::json j = tiny();
  CHECK(j.get<ModelConfig>().d_model == 8);
  auto bad = j;
  bad["depth"] = 3;
  CHECK_THROWS_WITH_AS(bad.get<ModelConfig>(), doctest::Contains("depth"), std::invalid_argument);
  CHECK(ModelConfig{}.d_head() == 16);
}

TEST_CASE("prompt context") {
  PromptContext ctx{{{2, 3, 0}, {4, 5, 0}}, {6, 7}, 1, 2};
  CHECK(ctx.demo_length() == 6);
  CHECK(ctx.tokens() == std::vector<int>{2, 3, 0, 4, 5, 0, 6, 7});
  CHECK_NOTHROW(ctx.validate());
  ctx.answer_end = 3;
  CHECK_THROWS_AS(ctx.validate(), std::invalid_argument);
  ctx.query_tokens.clear();
  CHECK_THROWS_AS(ctx.validate(), std::invalid_argument);
}

TEST_CASE("forward matches the loop reference") {
  const Model m(tiny());
  const std::vector<int> tokens{2, 5, 0, 7, 11, 0, 3};
  const auto trace = m.forward_with_trace(tokens);
  CHECK(trace.hidden.size() == 2);
  CHECK(trace.logits.shape() == num::Shape{7, 12});
  const auto want = oracle::model_logits(m, tokens);
  double worst = 0.0;
  for (std::size_t r = 0; r < 7; ++r)
    for (std::size_t c = 0; c < 12; ++c) worst = std::max(worst, std::abs(trace.logits.at(r, c) - want[r][c]));
  CHECK(worst <= 1e-10);
}

TEST_CASE("forward properties") {
  const Model m(tiny());
  const std::vector<int> tokens{1, 4, 0, 9, 2, 0, 6, 8};
  const auto full = m.forward_with_trace(tokens);

  SUBCASE("prefix rows do not depend on later tokens") {
    for (std::size_t n = 1; n < tokens.size(); ++n) {
      const auto prefix = m.forward_with_trace({tokens.begin(), tokens.begin() + static_cast<long>(n)});
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < 12; ++c)
          CHECK(std::abs(prefix.logits.at(r, c) - full.logits.at(r, c)) <= 1e-12);
    }
  }
  SUBCASE("icl_forward returns the query rows of the full run") {
    PromptContext ctx{{{1, 4, 0}, {9, 2, 0}}, {6, 8}, 1, 2};
    const auto q = m.icl_forward(ctx);
    CHECK(q.rows() == 2);
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t c = 0; c < 8; ++c) CHECK(q.hidden[l].at(r, c) == full.hidden[l].at(6 + r, c));
    CHECK_FALSE(q.logits.requires_grad());
  }
  SUBCASE("zero shifts leave the query-only run unchanged") {
    std::vector<attention::LayerShift> shifts(2);
    for (auto& s : shifts) {
      s.kind = attention::ShiftKind::mimic;
      for (int h = 0; h < 2; ++h) s.heads.push_back(attention::MimicHeadParams::zeros(4));
    }
    const std::vector<int> query{6, 8};
    CHECK(m.mimic_forward(query, shifts).logits.values() == m.forward_with_trace(query).logits.values());
    CHECK_THROWS_AS(m.mimic_forward(query, {shifts[0]}), std::invalid_argument);
  }
  SUBCASE("intervention touches one row and later rows only") {
    ForwardOptions opts;
    // Not a constant vector: layer norm would erase a uniform offset.
    const auto delta = num::Tensor::vector({0.5, -0.5, 1, 0, 0.25, -1, 2, 0});
    opts.interventions.push_back({0, 3, delta});
    const auto patched = m.forward_with_trace(tokens, opts);
    for (std::size_t c = 0; c < 8; ++c) {
      CHECK(patched.hidden[0].at(3, c) == doctest::Approx(full.hidden[0].at(3, c) + delta[c]).epsilon(1e-14));
      CHECK(patched.hidden[1].at(2, c) == full.hidden[1].at(2, c));
    }
    CHECK(patched.hidden[1].at(5, 0) != full.hidden[1].at(5, 0));
  }
  SUBCASE("align points capture different states") {
    ForwardOptions opts;
    opts.align_point = AlignPoint::after_sa;
    const auto sa = m.forward_with_trace(tokens, opts);
    CHECK(sa.logits.values() == full.logits.values());
    CHECK(sa.hidden[0].values() != full.hidden[0].values());
    CHECK(parse_align_point(to_string(AlignPoint::after_sa)) == AlignPoint::after_sa);
    CHECK_THROWS_AS(parse_align_point("middle"), std::invalid_argument);
  }
  SUBCASE("input errors") {
    CHECK_THROWS_AS(m.forward_with_trace({}), std::invalid_argument);
    CHECK_THROWS_AS(m.forward_with_trace(std::vector<int>(17, 1)), std::length_error);
    ForwardOptions opts;
    opts.first_position = 10;
    CHECK_THROWS_AS(m.forward_with_trace(std::vector<int>(7, 1), opts), std::length_error);
  }
}

TEST_CASE("initialisation is seeded") {
  CHECK(Model(tiny(3)).checksum() == Model(tiny(3)).checksum());
  CHECK(Model(tiny(3)).checksum() != Model(tiny(4)).checksum());
  const Model m(tiny());
  std::size_t total = 0;
  for (const auto& p : m.parameters()) total += p.size();
  CHECK(m.parameter_count() == total);
}

TEST_CASE("checkpoint round trip") {
  const Model m(tiny());
  const auto path = temp_file("model.json");
  m.save(path);
  const auto loaded = Model::load(path);
  CHECK(loaded.checksum() == m.checksum());
  CHECK(loaded.forward_with_trace({3, 4, 5}).logits.values() == m.forward_with_trace({3, 4, 5}).logits.values());

  CHECK_THROWS_WITH_AS(Model::load(temp_file("missing.json")), doctest::Contains("not found"),
                       std::runtime_error);
  auto j = m.to_json();
  j["tensors"].erase(0);
  CHECK_THROWS_WITH_AS(Model::from_json(j), doctest::Contains("tensors"), std::runtime_error);
  j = m.to_json();
  j["format"] = "other";
  CHECK_THROWS_AS(Model::from_json(j), std::runtime_error);
  std::filesystem::remove(path);
}

TEST_CASE("gradients through the whole model") {
  auto c = tiny();
  c.n_layers = 1;
  Model m(c);
  m.set_trainable(true);
  std::mt19937_64 rng(9);
  const auto w = oracle::random_matrix(4, 12, rng);
  const std::vector<int> tokens{2, 3, 0, 5};
  const double err = num::grad_check_params(
      [&] { return num::sum(num::mul(m.forward_with_trace(tokens).logits, w)); }, m.parameters(), 1e-5);
  CHECK(err <= 1e-4);
}
