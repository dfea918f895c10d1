#include "mimic/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace mimic::attention {

using num::DimensionError;
using num::Shape;

namespace {

Tensor as_row(const Tensor& v) { return num::reshape(v, Shape{1, v.size()}); }
Tensor as_column(const Tensor& v) { return num::reshape(v, Shape{v.size(), 1}); }

std::vector<double> to_vector(const Tensor& t) { return t.values(); }

void require_keys(const Tensor& q, const Tensor& keys, const char* op) {
  if (keys.rank() != 2 || keys.rows() == 0) {
    throw DimensionError(std::string(op) + ": key matrix is empty");
  }
  if (keys.cols() != q.size()) {
    throw DimensionError(std::string(op) + ": query of size " + std::to_string(q.size()) +
                         " does not match keys " + num::shape_str(keys.shape()));
  }
}

}  // namespace

MimicHeadParams MimicHeadParams::zeros(std::size_t d_head, bool trainable) {
  return {Tensor::zeros(Shape{d_head}, trainable), Tensor::zeros(Shape{1}, trainable),
          Tensor::zeros(Shape{d_head}, trainable)};
}

Tensor scaled_scores(const Tensor& q, const Tensor& keys) {
  require_keys(q, keys, "scaled_scores");
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.size()));
  return num::reshape(num::scale(num::matmul_nt(as_row(q), keys), inv_sqrt),
                      Shape{keys.rows()});
}

Tensor standard_sa(const Tensor& q, const Tensor& keys, const Tensor& values) {
  require_keys(q, keys, "standard_sa");
  if (values.rows() != keys.rows()) {
    throw DimensionError("standard_sa: " + std::to_string(keys.rows()) + " keys but " +
                         std::to_string(values.rows()) + " values");
  }
  const Tensor weights = num::softmax_rows(as_row(scaled_scores(q, keys)));
  return num::reshape(num::matmul(weights, values), Shape{values.cols()});
}

PartitionTerms partition_terms(const Tensor& q, const Tensor& demo_keys, const Tensor& keys) {
  num::NoGradScope no_grad;
  PartitionTerms terms;
  terms.log_z2 = num::log_sum_exp(scaled_scores(q, keys).data());
  if (demo_keys.size() > 0) {
    terms.log_z1 = num::log_sum_exp(scaled_scores(q, demo_keys).data());
  }
  return terms;
}

double mu(const Tensor& q, const Tensor& demo_keys, const Tensor& keys) {
  const auto terms = partition_terms(q, demo_keys, keys);
  if (!terms.log_z1) return 0.0;
  const double gap = *terms.log_z1 - terms.log_z2;
  // logistic(gap) = Z1 / (Z1 + Z2)
  if (gap >= 0) return 1.0 / (1.0 + std::exp(-gap));
  const double e = std::exp(gap);
  return e / (1.0 + e);
}

DecompositionReport decomposed_icl_sa(const Tensor& q, const Tensor& demo_keys,
                                      const Tensor& demo_values, const Tensor& keys,
                                      const Tensor& values) {
  if (demo_values.rows() != demo_keys.rows() && demo_keys.size() > 0) {
    throw DimensionError("decomposed_icl_sa: demonstration keys and values differ in length");
  }
  num::NoGradScope no_grad;
  DecompositionReport report;
  report.mu = mu(q, demo_keys, keys);
  report.sa_query = to_vector(standard_sa(q, keys, values));
  report.combined = report.sa_query;
  if (demo_keys.size() > 0) {
    report.sa_icd = to_vector(standard_sa(q, demo_keys, demo_values));
    for (std::size_t i = 0; i < report.combined.size(); ++i) {
      report.combined[i] = (1.0 - report.mu) * report.sa_query[i] + report.mu * report.sa_icd[i];
    }
    report.full_reference = to_vector(standard_sa(q, num::concat_rows({demo_keys, keys}),
                                                  num::concat_rows({demo_values, values})));
  } else {
    report.full_reference = report.sa_query;
  }
  for (std::size_t i = 0; i < report.combined.size(); ++i) {
    report.max_abs_diff =
        std::max(report.max_abs_diff, std::abs(report.combined[i] - report.full_reference[i]));
  }
  return report;
}

Tensor mimic_mu(const Tensor& q, const Tensor& keys, const MimicHeadParams& params) {
  require_keys(q, keys, "mimic_mu");
  if (params.f_w.size() != q.size()) {
    throw DimensionError("mimic_mu: f_w has " + std::to_string(params.f_w.size()) +
                         " entries for a query of size " + std::to_string(q.size()));
  }
  const Tensor log_z2 = num::logsumexp_rows(as_row(scaled_scores(q, keys)));
  const Tensor f = num::add_scalar_tensor(num::matmul(as_row(q), as_column(params.f_w)),
                                          params.f_b);
  return num::sigmoid(num::sub(f, log_z2));
}

Tensor mimic_sa(const Tensor& q, const Tensor& keys, const Tensor& values,
                const MimicHeadParams& params) {
  const Tensor sa = standard_sa(q, keys, values);
  if (params.v.size() != sa.size()) {
    throw DimensionError("mimic_sa: shift vector has " + std::to_string(params.v.size()) +
                         " entries, head output has " + std::to_string(sa.size()));
  }
  const Tensor magnitude = mimic_mu(q, keys, params);
  return num::add(sa, num::reshape(num::matmul(magnitude, as_row(params.v)), Shape{sa.size()}));
}

namespace {

Tensor project(const Tensor& x, const Tensor& w, const std::optional<LoraPair>& lora,
               const AttentionOptions& options) {
  Tensor out = num::matmul(x, w);
  if (!lora) return out;
  Tensor input = x;
  if (options.dropout_rng && options.adapters && options.adapters->dropout > 0.0) {
    input = num::dropout(x, options.adapters->dropout, *options.dropout_rng);
  }
  const Tensor delta = num::matmul(num::matmul(input, lora->a), lora->b);
  return num::add(out, num::scale(delta, lora->scaling));
}

const std::optional<LoraPair>& pick(const LayerAdapters* adapters,
                                    std::optional<LoraPair> LayerAdapters::*member) {
  static const std::optional<LoraPair> none;
  return adapters ? adapters->*member : none;
}

void validate_shift(const LayerShift& shift, std::size_t n_heads, std::size_t d_head,
                    std::size_t d_model) {
  if (shift.kind == ShiftKind::none) return;
  if (shift.heads.size() != n_heads) {
    throw DimensionError("layer shift has " + std::to_string(shift.heads.size()) +
                         " heads, attention has " + std::to_string(n_heads));
  }
  for (const auto& h : shift.heads) {
    if (h.v.size() != d_head && shift.kind != ShiftKind::linear_shift) {
      throw DimensionError("shift vector size differs from head dimension");
    }
  }
  if (shift.kind == ShiftKind::head_sharing && shift.gate_w.size() != d_model) {
    throw DimensionError("head-sharing gate must read the full " + std::to_string(d_model) +
                         "-wide query");
  }
  if (shift.kind == ShiftKind::query_sharing && shift.coefficients.size() != n_heads) {
    throw DimensionError("query-sharing needs one coefficient per head");
  }
  if (shift.kind == ShiftKind::linear_shift &&
      (shift.h_w.size() != n_heads || shift.h_b.size() != n_heads)) {
    throw DimensionError("linear shift needs one map per head");
  }
}

}  // namespace

Tensor multi_head_forward(const Tensor& x, const AttentionWeights& weights,
                          const AttentionOptions& options) {
  const auto d = weights.d_model();
  const auto n_heads = weights.n_heads;
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("multi_head_forward: d_model " + std::to_string(d) +
                         " is not divisible by " + std::to_string(n_heads) + " heads");
  }
  if (x.cols() != d) {
    throw DimensionError("multi_head_forward: input " + num::shape_str(x.shape()) +
                         " does not match d_model " + std::to_string(d));
  }
  const auto dh = d / n_heads;
  const auto rows = x.rows();
  const LayerShift* shift =
      options.shift && options.shift->kind != ShiftKind::none ? options.shift : nullptr;
  if (shift) validate_shift(*shift, n_heads, dh, d);

  const auto* adapters = options.adapters;
  Tensor q = project(x, weights.w_q, pick(adapters, &LayerAdapters::q), options);
  Tensor k = project(x, weights.w_k, pick(adapters, &LayerAdapters::k), options);
  const Tensor v = project(x, weights.w_v, pick(adapters, &LayerAdapters::v), options);
  q = num::rotary(q, n_heads, options.first_position);
  k = num::rotary(k, n_heads, options.first_position);

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> q_heads, outputs, log_z2;
  for (std::size_t h = 0; h < n_heads; ++h) {
    const Tensor qh = num::slice_cols(q, h * dh, dh);
    const Tensor kh = num::slice_cols(k, h * dh, dh);
    const Tensor vh = num::slice_cols(v, h * dh, dh);
    const Tensor scores = num::causal_mask(num::scale(num::matmul_nt(qh, kh), inv_sqrt));
    outputs.push_back(num::matmul(num::softmax_rows(scores), vh));
    if (shift) log_z2.push_back(num::logsumexp_rows(scores));
    q_heads.push_back(qh);
  }

  std::vector<Tensor> magnitudes(n_heads);
  if (shift) {
    switch (shift->kind) {
      case ShiftKind::mimic:
      case ShiftKind::linear_shift:
        for (std::size_t h = 0; h < n_heads; ++h) {
          const auto& p = shift->heads[h];
          const Tensor f = num::add_scalar_tensor(num::matmul(q_heads[h], as_column(p.f_w)), p.f_b);
          magnitudes[h] = num::sigmoid(num::sub(f, log_z2[h]));
        }
        break;
      case ShiftKind::head_sharing: {
        Tensor mean_log_z2 = log_z2[0];
        for (std::size_t h = 1; h < n_heads; ++h) mean_log_z2 = num::add(mean_log_z2, log_z2[h]);
        mean_log_z2 = num::scale(mean_log_z2, 1.0 / static_cast<double>(n_heads));
        const Tensor g =
            num::add_scalar_tensor(num::matmul(q, as_column(shift->gate_w)), shift->gate_b);
        const Tensor shared = num::sigmoid(num::sub(g, mean_log_z2));
        for (auto& m : magnitudes) m = shared;
        break;
      }
      case ShiftKind::query_sharing:
        for (std::size_t h = 0; h < n_heads; ++h) {
          magnitudes[h] = num::mul_scalar_tensor(Tensor::full(Shape{rows, 1}, 1.0),
                                                 shift->coefficients[h]);
        }
        break;
      case ShiftKind::none:
        break;
    }
    for (std::size_t h = 0; h < n_heads; ++h) {
      if (shift->kind == ShiftKind::linear_shift) {
        const Tensor mapped = num::add_row(num::matmul(q_heads[h], shift->h_w[h]), shift->h_b[h]);
        const Tensor keep = num::add_scalar(num::scale(magnitudes[h], -1.0), 1.0);
        outputs[h] =
            num::add(num::scale_rows(outputs[h], keep), num::scale_rows(mapped, magnitudes[h]));
      } else {
        outputs[h] =
            num::add(outputs[h], num::matmul(magnitudes[h], as_row(shift->heads[h].v)));
      }
    }
  }

  if (options.probe) {
    auto& probe = *options.probe;
    probe.head_outputs.clear();
    probe.shift_magnitude.clear();
    for (std::size_t h = 0; h < n_heads; ++h) {
      probe.head_outputs.push_back(outputs[h].detach());
      if (shift) probe.shift_magnitude.push_back(magnitudes[h].values());
    }
  }

  const Tensor merged = num::concat_cols(outputs);
  return project(merged, weights.w_o, pick(adapters, &LayerAdapters::o), options);
}

}  // namespace mimic::attention
