#pragma once

#include <optional>
#include <random>
#include <vector>

#include "mimic/numerics/ops.hpp"
#include "mimic/numerics/tensor.hpp"

// Single-head attention over a segmented context, the exact split of
// full-context attention into query-only attention plus a demonstration
// shift, and the learned-shift head that replaces the demonstration term.
namespace mimic::attention {

using num::Tensor;

// f(q) = q . f_w + f_b estimates log Z1; v is the head's shift direction.
struct MimicHeadParams {
  Tensor f_w;  // [d_h]
  Tensor f_b;  // [1]
  Tensor v;    // [d_h]

  static MimicHeadParams zeros(std::size_t d_head, bool trainable = true);
  std::size_t head_dim() const { return v.size(); }
  std::size_t parameter_count() const { return f_w.size() + f_b.size() + v.size(); }
  std::vector<Tensor> parameters() const { return {f_w, f_b, v}; }
};

struct PartitionTerms {
  std::optional<double> log_z1;  // absent when there are no demonstration keys
  double log_z2 = 0.0;
};

struct DecompositionReport {
  double mu = 0.0;
  std::vector<double> sa_query;
  std::vector<double> sa_icd;  // empty when there are no demonstrations
  std::vector<double> combined;
  std::vector<double> full_reference;
  double max_abs_diff = 0.0;
};

// q is [d_h]; K, V are [rows x d_h]. Scores carry the 1/sqrt(d_h) factor.
Tensor scaled_scores(const Tensor& q, const Tensor& keys);
Tensor standard_sa(const Tensor& q, const Tensor& keys, const Tensor& values);
PartitionTerms partition_terms(const Tensor& q, const Tensor& demo_keys, const Tensor& keys);
double mu(const Tensor& q, const Tensor& demo_keys, const Tensor& keys);
DecompositionReport decomposed_icl_sa(const Tensor& q, const Tensor& demo_keys,
                                      const Tensor& demo_values, const Tensor& keys,
                                      const Tensor& values);
// Differentiable in q, K, V and every head parameter.
Tensor mimic_sa(const Tensor& q, const Tensor& keys, const Tensor& values,
                const MimicHeadParams& params);
// logistic(f(q) - log Z2), the learned shift magnitude.
Tensor mimic_mu(const Tensor& q, const Tensor& keys, const MimicHeadParams& params);

// Projection matrices for one layer. w_q/w_k/w_v are [d x d], the column block
// [h*d_h, (h+1)*d_h) being head h's d x d_h matrix; w_o is [d x d].
struct AttentionWeights {
  Tensor w_q, w_k, w_v, w_o;
  std::size_t n_heads = 1;

  std::size_t d_model() const { return w_q.rows(); }
  std::size_t head_dim() const { return w_q.cols() / n_heads; }
};

enum class ShiftKind { none, mimic, head_sharing, query_sharing, linear_shift };

// Per-layer attention modification. Which members are populated depends on kind:
//   mimic:         heads (f_w, f_b, v)
//   head_sharing:  heads[*].v plus gate_w [d], gate_b [1] shared by the layer
//   query_sharing: heads[*].v plus one coefficient [1] per head
//   linear_shift:  heads[*].f_w/f_b plus h_w [d_h x d_h], h_b [d_h] per head
struct LayerShift {
  ShiftKind kind = ShiftKind::none;
  std::vector<MimicHeadParams> heads;
  Tensor gate_w, gate_b;
  std::vector<Tensor> coefficients;
  std::vector<Tensor> h_w, h_b;
};

// Low-rank update W + scaling * A B, with A [d x r] and B [r x d].
struct LoraPair {
  Tensor a, b;
  double scaling = 1.0;
};

struct LayerAdapters {
  std::optional<LoraPair> q, k, v, o;
  double dropout = 0.0;
};

// Instrumentation filled by multi_head_forward when requested.
struct AttentionProbe {
  std::vector<std::vector<double>> shift_magnitude;  // [head][row]; empty without a shift
  std::vector<Tensor> head_outputs;                  // [head] -> rows x d_h constants
};

struct AttentionOptions {
  std::size_t first_position = 0;  // rotary position of row 0
  const LayerShift* shift = nullptr;
  const LayerAdapters* adapters = nullptr;
  std::mt19937_64* dropout_rng = nullptr;  // adapter dropout is active only when set
  AttentionProbe* probe = nullptr;
};

// Causal multi-head self-attention over x [rows x d] with rotary positions.
Tensor multi_head_forward(const Tensor& x, const AttentionWeights& weights,
                          const AttentionOptions& options = {});

}  // namespace mimic::attention
