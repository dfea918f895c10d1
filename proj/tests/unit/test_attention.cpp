#include <doctest.h>

#include <cmath>
#include <complex>
#include <random>

#include "mimic/attention.hpp"
#include "mimic/numerics/grad_check.hpp"
#include "oracles.hpp"

using namespace mimic;
using namespace mimic::attention;
using num::Shape;

namespace {

using namespace oracle;

AttentionWeights random_weights(std::size_t d, std::size_t heads, std::mt19937_64& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  return {random_matrix(d, d, rng, s), random_matrix(d, d, rng, s), random_matrix(d, d, rng, s),
          random_matrix(d, d, rng, s), heads};
}

}  // namespace

TEST_CASE("scaled_scores") {
  CHECK(scaled_scores(Tensor::vector({0, 0}), Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6})).values() ==
        std::vector<double>{0, 0, 0});
  CHECK(scaled_scores(Tensor::vector({2}), Tensor::matrix(1, 1, {3})).values() ==
        std::vector<double>{6.0});
  std::mt19937_64 rng(1);
  const auto q = random_vector(8, rng);
  const auto k = random_matrix(5, 8, rng);
  const auto base = scaled_scores(q, k).values();
  const auto scaled = scaled_scores(num::scale(q, -2.5), k).values();
  for (std::size_t i = 0; i < base.size(); ++i) CHECK(scaled[i] == doctest::Approx(-2.5 * base[i]));
  CHECK_THROWS_AS(scaled_scores(q, Tensor::zeros(Shape{0, 8})), num::DimensionError);
}

TEST_CASE("standard_sa") {
  const auto v = Tensor::matrix(3, 2, {1, 4, 2, 5, 6, 0});
  const auto uniform = standard_sa(Tensor::vector({0, 0}), Tensor::matrix(3, 2, {1, 1, 2, 2, 3, 3}), v);
  CHECK(uniform[0] == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(uniform[1] == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(standard_sa(Tensor::vector({0.3, -1}), Tensor::matrix(1, 2, {2, 2}), Tensor::matrix(1, 2, {7, -7})).values() ==
        std::vector<double>{7, -7});
  CHECK_THROWS_AS(standard_sa(Tensor::vector({0, 0}), Tensor::matrix(2, 2, {1, 1, 1, 1}), v),
                  num::DimensionError);
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto q = random_vector(6, rng), k = random_matrix(7, 6, rng), vv = random_matrix(7, 6, rng);
    const auto got = standard_sa(q, k, vv).values();
    const auto want = naive_sa(q.values(), rows_of(k), rows_of(vv));
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) <= 1e-12);
  }
}

TEST_CASE("partition_terms and mu") {
  const auto q = Tensor::vector({0, 0});
  const auto kd = Tensor::matrix(2, 2, {1, 2, 3, 4});
  const auto k = Tensor::matrix(3, 2, {5, 6, 7, 8, 9, 1});
  const auto t = partition_terms(q, kd, k);
  REQUIRE(t.log_z1.has_value());
  CHECK(*t.log_z1 == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(t.log_z2 == doctest::Approx(std::log(3.0)).epsilon(1e-15));
  CHECK(mu(q, kd, k) == doctest::Approx(0.4).epsilon(1e-15));

  const auto none = partition_terms(q, Tensor::zeros(Shape{0, 2}), k);
  CHECK_FALSE(none.log_z1.has_value());
  CHECK(mu(q, Tensor::zeros(Shape{0, 2}), k) == 0.0);

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto qq = random_vector(4, rng), d = random_matrix(5, 4, rng), kk = random_matrix(3, 4, rng);
    const auto p = partition_terms(qq, d, kk);
    double naive = 0.0;
    for (const auto& keys : {d, kk}) {
      const auto scores = scaled_scores(qq, keys);
      for (double s : scores.values()) naive += std::exp(s);
    }
    CHECK(std::exp(*p.log_z1) + std::exp(p.log_z2) == doctest::Approx(naive).epsilon(1e-12));
  }
}

TEST_CASE("decomposed_icl_sa") {
  SUBCASE("hand example") {
    const auto r = decomposed_icl_sa(Tensor::vector({0}), Tensor::matrix(2, 1, {0, 0}),
                                     Tensor::matrix(2, 1, {4, 2}), Tensor::matrix(1, 1, {0}),
                                     Tensor::matrix(1, 1, {0}));
    CHECK(r.mu == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(r.sa_icd[0] == doctest::Approx(3.0).epsilon(1e-15));
    CHECK(r.sa_query[0] == 0.0);
    CHECK(r.combined[0] == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(r.full_reference[0] == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(r.max_abs_diff <= 1e-15);
  }
  SUBCASE("no demonstrations") {
    std::mt19937_64 rng(4);
    const auto q = random_vector(4, rng), k = random_matrix(3, 4, rng), v = random_matrix(3, 4, rng);
    const auto r = decomposed_icl_sa(q, Tensor::zeros(Shape{0, 4}), Tensor::zeros(Shape{0, 4}), k, v);
    CHECK(r.mu == 0.0);
    CHECK(r.combined == r.sa_query);
    CHECK(r.full_reference == r.sa_query);
  }
  SUBCASE("random instances against the concatenated-attention oracle") {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<std::size_t> ld(1, 16), lq(1, 8), dh(1, 32);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const auto d = dh(rng), nd = ld(rng), nq = lq(rng);
      const auto q = random_vector(d, rng, 2.0);
      const auto kd = random_matrix(nd, d, rng), vd = random_matrix(nd, d, rng);
      const auto k = random_matrix(nq, d, rng), v = random_matrix(nq, d, rng);
      const auto r = decomposed_icl_sa(q, kd, vd, k, v);
      auto all_k = rows_of(kd), all_v = rows_of(vd);
      for (const auto& row : rows_of(k)) all_k.push_back(row);
      for (const auto& row : rows_of(v)) all_v.push_back(row);
      const auto oracle = naive_sa(q.values(), all_k, all_v);
      for (std::size_t i = 0; i < d; ++i) worst = std::max(worst, std::abs(r.combined[i] - oracle[i]));
      CHECK(r.mu > 0.0);
      CHECK(r.mu < 1.0);
    }
    CHECK(worst <= 1e-9);
  }
}

TEST_CASE("mu properties") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const auto q = random_vector(8, rng), kd = random_matrix(6, 8, rng), k = random_matrix(4, 8, rng);
    const double m0 = mu(q, kd, k);
    // Moving every demonstration key along q raises each demonstration score uniformly.
    const double delta = 0.1 + 0.5 * trial / 50.0;
    const double qq = num::sum(num::mul(q, q)).item();
    const auto boost = num::scale(q, delta * std::sqrt(8.0) / qq);
    std::vector<Tensor> rows;
    for (std::size_t i = 0; i < kd.rows(); ++i) rows.push_back(num::add(num::slice_rows(kd, i, 1), num::reshape(boost, Shape{1, 8})));
    CHECK(mu(q, num::concat_rows(rows), k) > m0);

    // Permuting demonstration rows leaves mu and the full output unchanged.
    std::vector<std::size_t> perm(kd.rows());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto vd = random_matrix(6, 8, rng), v = random_matrix(4, 8, rng);
    std::vector<Tensor> pk, pv;
    for (auto i : perm) {
      pk.push_back(num::slice_rows(kd, i, 1));
      pv.push_back(num::slice_rows(vd, i, 1));
    }
    const auto a = decomposed_icl_sa(q, kd, vd, k, v);
    const auto b = decomposed_icl_sa(q, num::concat_rows(pk), num::concat_rows(pv), k, v);
    CHECK(a.mu == doctest::Approx(b.mu).epsilon(1e-14));
    for (std::size_t i = 0; i < 8; ++i) CHECK(a.combined[i] == doctest::Approx(b.combined[i]).epsilon(1e-12));
  }
}

TEST_CASE("mimic_sa") {
  std::mt19937_64 rng(7);
  const auto q = random_vector(4, rng), k = random_matrix(3, 4, rng), v = random_matrix(3, 4, rng);
  SUBCASE("zero shift reduces to standard attention") {
    auto p = MimicHeadParams::zeros(4, false);
    p.f_w = random_vector(4, rng);
    CHECK(mimic_sa(q, k, v, p).values() == standard_sa(q, k, v).values());
  }
  SUBCASE("f equal to log Z2 gives half magnitude") {
    const auto kk = Tensor::matrix(2, 1, {1.0, -0.5});
    const auto zero_v = Tensor::matrix(2, 1, {0.0, 0.0});
    const auto qq = Tensor::vector({0.8});
    MimicHeadParams p = MimicHeadParams::zeros(1, false);
    p.f_b = Tensor::vector({partition_terms(qq, Tensor::zeros(Shape{0, 1}), kk).log_z2});
    p.v = Tensor::vector({2.0});
    CHECK(mimic_mu(qq, kk, p).item() == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(mimic_sa(qq, kk, zero_v, p)[0] == doctest::Approx(1.0).epsilon(1e-15));
  }
  SUBCASE("saturated gate") {
    auto p = MimicHeadParams::zeros(4, false);
    p.f_b = Tensor::vector({-50.0});
    p.v = random_vector(4, rng);
    CHECK(mimic_mu(q, k, p).item() < 1e-20);
    const auto got = mimic_sa(q, k, v, p).values();
    const auto want = standard_sa(q, k, v).values();
    for (std::size_t i = 0; i < 4; ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-15));
  }
  SUBCASE("magnitude increases with f_b") {
    auto p = MimicHeadParams::zeros(4, false);
    p.f_w = random_vector(4, rng);
    double last = -1.0;
    for (double b = -6.0; b <= 6.0; b += 0.5) {
      p.f_b = Tensor::vector({b});
      const double m = mimic_mu(q, k, p).item();
      CHECK(m > last);
      last = m;
    }
  }
  SUBCASE("gradients of f_w, f_b, v") {
    auto p = MimicHeadParams::zeros(4, true);
    std::normal_distribution<double> d(0.0, 1.0);
    for (int point = 0; point < 20; ++point) {
      for (auto t : p.parameters())
        for (auto& x : t.mutable_data()) x = d(rng);
      const auto w = random_vector(4, rng);
      const double err = num::grad_check_params(
          [&] { return num::sum(num::mul(mimic_sa(q, k, v, p), w)); }, p.parameters(), 1e-5);
      CHECK(err <= 1e-4);
    }
  }
  CHECK(MimicHeadParams::zeros(16).parameter_count() == 33);
}

TEST_CASE("multi_head_forward") {
  std::mt19937_64 rng(8);
  SUBCASE("single head with identity projection equals standard attention rows") {
    const std::size_t d = 4;
    auto w = random_weights(d, 1, rng);
    w.w_o = Tensor::matrix(4, 4, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
    const auto x = random_matrix(5, d, rng);
    const auto out = multi_head_forward(x, w);
    const auto q = num::rotary(num::matmul(x, w.w_q), 1, 0);
    const auto k = num::rotary(num::matmul(x, w.w_k), 1, 0);
    const auto v = num::matmul(x, w.w_v);
    for (std::size_t r = 0; r < 5; ++r) {
      const auto row = standard_sa(num::reshape(num::slice_rows(q, r, 1), Shape{d}),
                                   num::slice_rows(k, 0, r + 1), num::slice_rows(v, 0, r + 1));
      for (std::size_t c = 0; c < d; ++c) CHECK(out.at(r, c) == doctest::Approx(row[c]).epsilon(1e-12));
    }
  }
  SUBCASE("random two-head case matches the per-head oracle") {
    for (std::size_t first : {0, 7}) {
      auto w = random_weights(8, 2, rng);
      const auto x = random_matrix(6, 8, rng);
      AttentionOptions opts;
      opts.first_position = first;
      const auto out = multi_head_forward(x, w, opts);
      const auto want = multi_head_oracle(x, w, first);
      for (std::size_t r = 0; r < 6; ++r)
        for (std::size_t c = 0; c < 8; ++c) CHECK(std::abs(out.at(r, c) - want[r][c]) <= 1e-12);
    }
  }
  SUBCASE("zero shift vectors reproduce the plain forward") {
    auto w = random_weights(8, 2, rng);
    const auto x = random_matrix(5, 8, rng);
    LayerShift shift;
    shift.kind = ShiftKind::mimic;
    for (int h = 0; h < 2; ++h) {
      auto p = MimicHeadParams::zeros(4, false);
      p.f_w = random_vector(4, rng);
      p.f_b = random_vector(1, rng);
      shift.heads.push_back(p);
    }
    AttentionOptions opts;
    opts.shift = &shift;
    CHECK(multi_head_forward(x, w, opts).values() == multi_head_forward(x, w).values());
  }
  SUBCASE("causality") {
    auto w = random_weights(8, 2, rng);
    auto x = random_matrix(6, 8, rng);
    const auto before = multi_head_forward(x, w);
    for (std::size_t t = 0; t < 6; ++t) {
      auto changed = x.clone();
      for (std::size_t c = 0; c < 8; ++c) changed.mutable_data()[t * 8 + c] += 3.0;
      const auto after = multi_head_forward(changed, w);
      for (std::size_t r = 0; r < t; ++r)
        for (std::size_t c = 0; c < 8; ++c) CHECK(after.at(r, c) == before.at(r, c));
    }
  }
  SUBCASE("head-sharing reports one magnitude per layer") {
    auto w = random_weights(8, 2, rng);
    const auto x = random_matrix(5, 8, rng);
    LayerShift shift;
    shift.kind = ShiftKind::head_sharing;
    for (int h = 0; h < 2; ++h) shift.heads.push_back(MimicHeadParams::zeros(4, false));
    shift.gate_w = random_vector(8, rng);
    shift.gate_b = Tensor::vector({0.3});
    AttentionProbe probe;
    AttentionOptions opts;
    opts.shift = &shift;
    opts.probe = &probe;
    multi_head_forward(x, w, opts);
    REQUIRE(probe.shift_magnitude.size() == 2);
    CHECK(probe.shift_magnitude[0] == probe.shift_magnitude[1]);
  }
  SUBCASE("dimension errors") {
    auto w = random_weights(8, 3, rng);
    CHECK_THROWS_AS(multi_head_forward(random_matrix(2, 8, rng), w), num::DimensionError);
    auto ok = random_weights(8, 2, rng);
    CHECK_THROWS_AS(multi_head_forward(random_matrix(2, 6, rng), ok), num::DimensionError);
  }
}
