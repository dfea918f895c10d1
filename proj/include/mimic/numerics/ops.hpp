#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "mimic/numerics/tensor.hpp"

// Differentiable primitives. Every op records its adjoint on the active tape
// when at least one input requires a gradient; otherwise the result is a
// constant. Matrices are rank-2; a rank-1 tensor is treated as a 1 x n row.
namespace mimic::num {

Tensor matmul(const Tensor& a, const Tensor& b);
// a * b^T without materialising the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

// Broadcasts: row is a length-cols vector added to every row.
Tensor add_row(const Tensor& a, const Tensor& row);
// s is a single-element tensor.
Tensor add_scalar_tensor(const Tensor& a, const Tensor& s);
Tensor mul_scalar_tensor(const Tensor& a, const Tensor& s);
// Multiplies row i of a by column[i].
Tensor scale_rows(const Tensor& a, const Tensor& column);
// Adds vec to a single row.
Tensor add_to_row(const Tensor& a, std::size_t row, const Tensor& vec);

Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);

Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);
// rows x 1 column of per-row log-sum-exp. Entries equal to -inf are allowed
// as long as each row keeps one finite entry.
Tensor logsumexp_rows(const Tensor& x);
// Scalar log-sum-exp of all entries.
Tensor log_sum_exp(const Tensor& x);
double log_sum_exp(std::span<const double> x);

// Keeps entry (i, j) iff j <= i + offset; the rest become -inf.
Tensor causal_mask(const Tensor& scores, std::size_t offset = 0);

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor reshape(const Tensor& a, Shape shape);

Tensor gather_rows(const Tensor& table, const std::vector<int>& indices);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// Rotary position encoding applied independently inside each head's slice;
// row r is at absolute position first_position + r.
Tensor rotary(const Tensor& x, std::size_t n_heads, std::size_t first_position,
              double base = 10000.0);
Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// sum((a - b)^2)
Tensor squared_distance(const Tensor& a, const Tensor& b);
// Mean token cross-entropy over the listed rows of logits.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& rows,
                     const std::vector<int>& targets);
// Mean over the listed rows of KL(softmax(teacher) || softmax(student)).
// The teacher is a constant.
Tensor kl_divergence_rows(const Tensor& student_logits, const Tensor& teacher_logits,
                          const std::vector<std::size_t>& rows);

}  // namespace mimic::num
