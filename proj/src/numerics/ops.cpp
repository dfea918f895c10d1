#include "mimic/numerics/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace mimic::num {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using StoragePtr = std::shared_ptr<detail::Storage>;

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::size_t rows_of(const detail::Storage& s) { return s.shape.size() == 1 ? 1 : s.shape[0]; }
std::size_t cols_of(const detail::Storage& s) {
  return s.shape.size() == 1 ? s.shape[0] : s.shape[1];
}

ConstMap cmap(const std::vector<double>& v, const detail::Storage& s) {
  return ConstMap(v.data(), static_cast<Eigen::Index>(rows_of(s)),
                  static_cast<Eigen::Index>(cols_of(s)));
}
MutMap mmap(std::vector<double>& v, const detail::Storage& s) {
  return MutMap(v.data(), static_cast<Eigen::Index>(rows_of(s)),
                static_cast<Eigen::Index>(cols_of(s)));
}

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!active_tape()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

// Gradient buffer of the output, or nullptr when nothing flowed into it.
const std::vector<double>* upstream(const StoragePtr& out) {
  return out->grad.empty() ? nullptr : &out->grad;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}


template <class Adjoint>
void record(Adjoint&& adjoint) {
  active_tape()->record(std::forward<Adjoint>(adjoint));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const auto m = a.rows(), n = b.cols();
  std::vector<double> out(m * n);
  {
    const auto& sa = *a.storage();
    const auto& sb = *b.storage();
    MutMap(out.data(), m, n).noalias() = cmap(sa.data, sa) * cmap(sb.data, sb);
  }
  const bool track = tracking({&a, &b});
  Tensor result(Shape{m, n}, std::move(out), track);
  if (track) {
    record([sa = a.storage(), sb = b.storage(), so = result.storage()] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor("matmul");
      auto G = cmap(*g, *so);
      if (sa->requires_grad) {
        mmap(sa->grad_buffer(), *sa).noalias() += k * (G * cmap(sb->data, *sb).transpose());
      }
      if (sb->requires_grad) {
        mmap(sb->grad_buffer(), *sb).noalias() += k * (cmap(sa->data, *sa).transpose() * G);
      }
    });
  }
  return result;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: column counts differ for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const auto m = a.rows(), n = b.rows();
  std::vector<double> out(m * n);
  {
    const auto& sa = *a.storage();
    const auto& sb = *b.storage();
    MutMap(out.data(), m, n).noalias() = cmap(sa.data, sa) * cmap(sb.data, sb).transpose();
  }
  const bool track = tracking({&a, &b});
  Tensor result(Shape{m, n}, std::move(out), track);
  if (track) {
    record([sa = a.storage(), sb = b.storage(), so = result.storage()] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor("matmul_nt");
      auto G = cmap(*g, *so);
      if (sa->requires_grad) {
        mmap(sa->grad_buffer(), *sa).noalias() += k * (G * cmap(sb->data, *sb));
      }
      if (sb->requires_grad) {
        mmap(sb->grad_buffer(), *sb).noalias() += k * (G.transpose() * cmap(sa->data, *sa));
      }
    });
  }
  return result;
}

namespace {

// Shared implementation for same-shape binary ops with elementwise partials.
template <class Fwd, class DA, class DB>
Tensor elementwise(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, DA da, DB db) {
  require_same_shape(a, b, name);
  std::vector<double> out(a.size());
  const auto& x = a.values();
  const auto& y = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i], y[i]);
  const bool track = tracking({&a, &b});
  Tensor result(a.shape(), std::move(out), track);
  if (track) {
    record([sa = a.storage(), sb = b.storage(), so = result.storage(), name, da, db] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor(name);
      const auto& x = sa->data;
      const auto& y = sb->data;
      if (sa->requires_grad) {
        auto& ga = sa->grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += k * (*g)[i] * da(x[i], y[i]);
      }
      if (sb->requires_grad) {
        auto& gb = sb->grad_buffer();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += k * (*g)[i] * db(x[i], y[i]);
      }
    });
  }
  return result;
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, const char* name, Fwd fwd, Deriv deriv) {
  std::vector<double> out(a.size());
  const auto& x = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  const bool track = tracking({&a});
  Tensor result(a.shape(), std::move(out), track);
  if (track) {
    record([sa = a.storage(), so = result.storage(), name, deriv] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor(name);
      auto& ga = sa->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) {
        ga[i] += k * (*g)[i] * deriv(sa->data[i], so->data[i]);
      }
    });
  }
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  // Ties route the gradient to a.
  return elementwise(
      a, b, "maximum", [](double x, double y) { return x >= y ? x : y; },
      [](double x, double y) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, "scale", [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(
      a, "add_scalar", [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k3 = 0.044715;
  return unary(
      a, "gelu",
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k3 * x * x * x))); },
      [](double x, double) {
        const double t = std::tanh(c * (x + k3 * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * k3 * x * x);
      });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  const auto m = a.rows(), n = a.cols();
  if (row.size() != n) {
    throw DimensionError("add_row: row " + shape_str(row.shape()) + " does not fit " +
                         shape_str(a.shape()));
  }
  std::vector<double> out(a.values());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += row[j];
  const bool track = tracking({&a, &row});
  Tensor result(a.shape(), std::move(out), track);
  if (track) {
    record([sa = a.storage(), sr = row.storage(), so = result.storage(), m, n] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor("add_row");
      if (sa->requires_grad) {
        auto& ga = sa->grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += k * (*g)[i];
      }
      if (sr->requires_grad) {
        auto& gr = sr->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gr[j] += k * (*g)[i * n + j];
      }
    });
  }
  return result;
}

Tensor add_scalar_tensor(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw DimensionError("add_scalar_tensor: s must hold one value");
  const double v = s[0];
  std::vector<double> out(a.values());
  for (auto& x : out) x += v;
  const bool track = tracking({&a, &s});
  Tensor result(a.shape(), std::move(out), track);
  if (track) {
    record([sa = a.storage(), ss = s.storage(), so = result.storage()] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor("add_scalar_tensor");
      if (sa->requires_grad) {
        auto& ga = sa->grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += k * (*g)[i];
      }
      if (ss->requires_grad) {
        ss->grad_buffer()[0] += k * std::accumulate(g->begin(), g->end(), 0.0);
      }
    });
  }
  return result;
}

Tensor mul_scalar_tensor(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw DimensionError("mul_scalar_tensor: s must hold one value");
  const double v = s[0];
  std::vector<double> out(a.values());
  for (auto& x : out) x *= v;
  const bool track = tracking({&a, &s});
  Tensor result(a.shape(), std::move(out), track);
  if (track) {
    record([sa = a.storage(), ss = s.storage(), so = result.storage()] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor("mul_scalar_tensor");
      const double v = ss->data[0];
      if (sa->requires_grad) {
        auto& ga = sa->grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += k * (*g)[i] * v;
      }
      if (ss->requires_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g->size(); ++i) acc += (*g)[i] * sa->data[i];
        ss->grad_buffer()[0] += k * acc;
      }
    });
  }
  return result;
}

Tensor scale_rows(const Tensor& a, const Tensor& column) {
  const auto m = a.rows(), n = a.cols();
  if (column.size() != m) {
    throw DimensionError("scale_rows: column " + shape_str(column.shape()) + " does not fit " +
                         shape_str(a.shape()));
  }
  std::vector<double> out(a.values());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= column[i];
  const bool track = tracking({&a, &column});
  Tensor result(a.shape(), std::move(out), track);
  if (track) {
    record([sa = a.storage(), sc = column.storage(), so = result.storage(), m, n] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor("scale_rows");
      if (sa->requires_grad) {
        auto& ga = sa->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += k * (*g)[i * n + j] * sc->data[i];
      }
      if (sc->requires_grad) {
        auto& gc = sc->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += (*g)[i * n + j] * sa->data[i * n + j];
          gc[i] += k * acc;
        }
      }
    });
  }
  return result;
}

Tensor add_to_row(const Tensor& a, std::size_t row, const Tensor& vec) {
  const auto n = a.cols();
  if (row >= a.rows() || vec.size() != n) {
    throw DimensionError("add_to_row: cannot add " + shape_str(vec.shape()) + " to row " +
                         std::to_string(row) + " of " + shape_str(a.shape()));
  }
  std::vector<double> out(a.values());
  for (std::size_t j = 0; j < n; ++j) out[row * n + j] += vec[j];
  const bool track = tracking({&a, &vec});
  Tensor result(a.shape(), std::move(out), track);
  if (track) {
    record([sa = a.storage(), sv = vec.storage(), so = result.storage(), row, n] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor("add_to_row");
      if (sa->requires_grad) {
        auto& ga = sa->grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += k * (*g)[i];
      }
      if (sv->requires_grad) {
        auto& gv = sv->grad_buffer();
        for (std::size_t j = 0; j < n; ++j) gv[j] += k * (*g)[row * n + j];
      }
    });
  }
  return result;
}

namespace {

// Row-wise softmax of a raw buffer; rows with every entry -inf are rejected.
void softmax_into(const std::vector<double>& x, std::size_t m, std::size_t n,
                  std::vector<double>& out, std::vector<double>* lse) {
  out.resize(m * n);
  if (lse) lse->resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    if (!std::isfinite(mx)) {
      throw std::domain_error("softmax: row " + std::to_string(i) + " has no finite entry");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = std::exp(row[j] - mx);
      out[i * n + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
    if (lse) (*lse)[i] = mx + std::log(z);
  }
}

}  // namespace

Tensor softmax_rows(const Tensor& x) {
  const auto m = x.rows(), n = x.cols();
  if (n == 0) throw DimensionError("softmax_rows: empty row dimension");
  std::vector<double> out;
  softmax_into(x.values(), m, n, out, nullptr);
  const bool track = tracking({&x});
  Tensor result(x.shape(), std::move(out), track);
  if (track) {
    record([sx = x.storage(), so = result.storage(), m, n] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor("softmax_rows");
      auto& gx = sx->grad_buffer();
      const auto& y = so->data;
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += (*g)[i * n + j] * y[i * n + j];
        for (std::size_t j = 0; j < n; ++j) {
          gx[i * n + j] += k * y[i * n + j] * ((*g)[i * n + j] - dot);
        }
      }
    });
  }
  return result;
}

Tensor log_softmax_rows(const Tensor& x) {
  const auto m = x.rows(), n = x.cols();
  if (n == 0) throw DimensionError("log_softmax_rows: empty row dimension");
  std::vector<double> probs, lse;
  softmax_into(x.values(), m, n, probs, &lse);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] - lse[i];
  const bool track = tracking({&x});
  Tensor result(x.shape(), std::move(out), track);
  if (track) {
    record([sx = x.storage(), so = result.storage(), probs = std::move(probs), m, n] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor("log_softmax_rows");
      auto& gx = sx->grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) total += (*g)[i * n + j];
        for (std::size_t j = 0; j < n; ++j) {
          gx[i * n + j] += k * ((*g)[i * n + j] - probs[i * n + j] * total);
        }
      }
    });
  }
  return result;
}

Tensor logsumexp_rows(const Tensor& x) {
  const auto m = x.rows(), n = x.cols();
  if (n == 0) throw DimensionError("logsumexp_rows: empty row dimension");
  std::vector<double> probs, lse;
  softmax_into(x.values(), m, n, probs, &lse);
  const bool track = tracking({&x});
  Tensor result(Shape{m, 1}, std::move(lse), track);
  if (track) {
    record([sx = x.storage(), so = result.storage(), probs = std::move(probs), m, n] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor("logsumexp_rows");
      auto& gx = sx->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += k * (*g)[i] * probs[i * n + j];
    });
  }
  return result;
}

double log_sum_exp(std::span<const double> x) {
  if (x.empty()) throw DimensionError("log_sum_exp: empty input");
  const double mx = *std::max_element(x.begin(), x.end());
  if (!std::isfinite(mx)) {
    if (mx == kNegInf) return kNegInf;
    throw std::domain_error("log_sum_exp: non-finite input");
  }
  double z = 0.0;
  for (double v : x) z += std::exp(v - mx);
  return mx + std::log(z);
}

Tensor log_sum_exp(const Tensor& x) {
  if (x.size() == 0) throw DimensionError("log_sum_exp: empty input");
  return reshape(logsumexp_rows(reshape(x, Shape{1, x.size()})), Shape{1});
}

Tensor causal_mask(const Tensor& scores, std::size_t offset) {
  const auto m = scores.rows(), n = scores.cols();
  std::vector<double> out(scores.values());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + offset + 1; j < n; ++j) out[i * n + j] = kNegInf;
  const bool track = tracking({&scores});
  Tensor result(scores.shape(), std::move(out), track);
  if (track) {
    record([ss = scores.storage(), so = result.storage(), m, n, offset] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor("causal_mask");
      auto& gs = ss->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < std::min(n, i + offset + 1); ++j) {
          gs[i * n + j] += k * (*g)[i * n + j];
        }
    });
  }
  return result;
}

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  const auto n = a.cols();
  if (start + count > a.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of " + shape_str(a.shape()));
  }
  std::vector<double> out(a.values().begin() + static_cast<std::ptrdiff_t>(start * n),
                          a.values().begin() + static_cast<std::ptrdiff_t>((start + count) * n));
  const bool track = tracking({&a});
  Tensor result(Shape{count, n}, std::move(out), track);
  if (track) {
    record([sa = a.storage(), so = result.storage(), start, n] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor("slice_rows");
      auto& ga = sa->grad_buffer();
      for (std::size_t i = 0; i < g->size(); ++i) ga[start * n + i] += k * (*g)[i];
    });
  }
  return result;
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  const auto m = a.rows(), n = a.cols();
  if (start + count > n) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of " + shape_str(a.shape()));
  }
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(a.values().begin() + static_cast<std::ptrdiff_t>(i * n + start), count,
                out.begin() + static_cast<std::ptrdiff_t>(i * count));
  const bool track = tracking({&a});
  Tensor result(Shape{m, count}, std::move(out), track);
  if (track) {
    record([sa = a.storage(), so = result.storage(), start, count, m, n] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor("slice_cols");
      auto& ga = sa->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) ga[i * n + start + j] += k * (*g)[i * count + j];
    });
  }
  return result;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  const auto m = parts.front().rows();
  std::size_t n = 0;
  bool track = false;
  for (const auto& p : parts) {
    if (p.rows() != m) throw DimensionError("concat_cols: row counts differ");
    n += p.cols();
    track = track || p.requires_grad();
  }
  track = track && active_tape();
  std::vector<double> out(m * n);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const auto pc = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(p.values().begin() + static_cast<std::ptrdiff_t>(i * pc), pc,
                  out.begin() + static_cast<std::ptrdiff_t>(i * n + off));
    off += pc;
  }
  Tensor result(Shape{m, n}, std::move(out), track);
  if (track) {
    std::vector<StoragePtr> storages;
    for (const auto& p : parts) storages.push_back(p.storage());
    record([storages = std::move(storages), offsets = std::move(offsets), so = result.storage(),
            m, n] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor("concat_cols");
      for (std::size_t p = 0; p < storages.size(); ++p) {
        auto& sp = storages[p];
        if (!sp->requires_grad) continue;
        auto& gp = sp->grad_buffer();
        const auto pc = cols_of(*sp);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < pc; ++j) gp[i * pc + j] += k * (*g)[i * n + offsets[p] + j];
      }
    });
  }
  return result;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  const auto n = parts.front().cols();
  std::size_t m = 0;
  bool track = false;
  std::vector<double> out;
  for (const auto& p : parts) {
    if (p.cols() != n) throw DimensionError("concat_rows: column counts differ");
    m += p.rows();
    track = track || p.requires_grad();
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  track = track && active_tape();
  Tensor result(Shape{m, n}, std::move(out), track);
  if (track) {
    std::vector<StoragePtr> storages;
    for (const auto& p : parts) storages.push_back(p.storage());
    record([storages = std::move(storages), so = result.storage()] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor("concat_rows");
      std::size_t off = 0;
      for (const auto& sp : storages) {
        const auto len = sp->data.size();
        if (sp->requires_grad) {
          auto& gp = sp->grad_buffer();
          for (std::size_t i = 0; i < len; ++i) gp[i] += k * (*g)[off + i];
        }
        off += len;
      }
    });
  }
  return result;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  }
  const bool track = tracking({&a});
  Tensor result(std::move(shape), a.values(), track);
  if (track) {
    record([sa = a.storage(), so = result.storage()] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor("reshape");
      auto& ga = sa->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += k * (*g)[i];
    });
  }
  return result;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& indices) {
  const auto v = table.rows(), n = table.cols();
  std::vector<double> out(indices.size() * n);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const int id = indices[r];
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw DimensionError("gather_rows: index " + std::to_string(id) + " outside table of " +
                           std::to_string(v) + " rows");
    }
    std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(id * n), n,
                out.begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  const bool track = tracking({&table});
  Tensor result(Shape{indices.size(), n}, std::move(out), track);
  if (track) {
    record([st = table.storage(), so = result.storage(), indices, n] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor("gather_rows");
      auto& gt = st->grad_buffer();
      for (std::size_t r = 0; r < indices.size(); ++r)
        for (std::size_t j = 0; j < n; ++j)
          gt[static_cast<std::size_t>(indices[r]) * n + j] += k * (*g)[r * n + j];
    });
  }
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const auto m = x.rows(), n = x.cols();
  if (gain.size() != n || bias.size() != n) {
    throw DimensionError("layer_norm: gain/bias must have " + std::to_string(n) + " entries");
  }
  std::vector<double> xhat(m * n), inv_std(m), out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.values().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mu) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gain[j] + bias[j];
    }
  }
  const bool track = tracking({&x, &gain, &bias});
  Tensor result(x.shape(), std::move(out), track);
  if (track) {
    record([sx = x.storage(), sg = gain.storage(), sb = bias.storage(), so = result.storage(),
            xhat = std::move(xhat), inv_std = std::move(inv_std), m, n] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor("layer_norm");
      const auto& gamma = sg->data;
      if (sg->requires_grad) {
        auto& gg = sg->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gg[j] += k * (*g)[i * n + j] * xhat[i * n + j];
      }
      if (sb->requires_grad) {
        auto& gb = sb->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += k * (*g)[i * n + j];
      }
      if (sx->requires_grad) {
        auto& gx = sx->grad_buffer();
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < m; ++i) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double d = (*g)[i * n + j] * gamma[j];
            mean_d += d;
            mean_dx += d * xhat[i * n + j];
          }
          mean_d *= inv_n;
          mean_dx *= inv_n;
          for (std::size_t j = 0; j < n; ++j) {
            const double d = (*g)[i * n + j] * gamma[j];
            gx[i * n + j] += k * inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
          }
        }
      }
    });
  }
  return result;
}

Tensor rotary(const Tensor& x, std::size_t n_heads, std::size_t first_position, double base) {
  const auto m = x.rows(), n = x.cols();
  if (n_heads == 0 || n % n_heads != 0 || (n / n_heads) % 2 != 0) {
    throw DimensionError("rotary: width " + std::to_string(n) + " cannot be split into " +
                         std::to_string(n_heads) + " heads of even size");
  }
  const auto dh = n / n_heads, half = dh / 2;
  std::vector<double> cosv(m * half), sinv(m * half);
  for (std::size_t r = 0; r < m; ++r) {
    const double pos = static_cast<double>(first_position + r);
    for (std::size_t i = 0; i < half; ++i) {
      const double freq =
          std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      cosv[r * half + i] = std::cos(pos * freq);
      sinv[r * half + i] = std::sin(pos * freq);
    }
  }
  std::vector<double> out(m * n);
  const auto& in = x.values();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t h = 0; h < n_heads; ++h)
      for (std::size_t i = 0; i < half; ++i) {
        const auto a = r * n + h * dh + i, b = a + half;
        const double c = cosv[r * half + i], s = sinv[r * half + i];
        out[a] = in[a] * c - in[b] * s;
        out[b] = in[a] * s + in[b] * c;
      }
  const bool track = tracking({&x});
  Tensor result(x.shape(), std::move(out), track);
  if (track) {
    record([sx = x.storage(), so = result.storage(), cosv = std::move(cosv),
            sinv = std::move(sinv), m, n, n_heads, dh, half] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor("rotary");
      auto& gx = sx->grad_buffer();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t h = 0; h < n_heads; ++h)
          for (std::size_t i = 0; i < half; ++i) {
            const auto a = r * n + h * dh + i, b = a + half;
            const double c = cosv[r * half + i], s = sinv[r * half + i];
            gx[a] += k * ((*g)[a] * c + (*g)[b] * s);
            gx[b] += k * (-(*g)[a] * s + (*g)[b] * c);
          }
    });
  }
  return result;
}

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  const double inv = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.size());
  for (auto& v : mask) v = keep(rng) ? inv : 0.0;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

Tensor sum(const Tensor& a) {
  const double total = std::accumulate(a.values().begin(), a.values().end(), 0.0);
  const bool track = tracking({&a});
  Tensor result(Shape{1}, {total}, track);
  if (track) {
    record([sa = a.storage(), so = result.storage()] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor("sum");
      auto& ga = sa->grad_buffer();
      for (auto& v : ga) v += k * (*g)[0];
    });
  }
  return result;
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor squared_distance(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "squared_distance");
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += (a[i] - b[i]) * (a[i] - b[i]);
  const bool track = tracking({&a, &b});
  Tensor result(Shape{1}, {total}, track);
  if (track) {
    record([sa = a.storage(), sb = b.storage(), so = result.storage()] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor("squared_distance") * 2.0 * (*g)[0];
      if (sa->requires_grad) {
        auto& ga = sa->grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += k * (sa->data[i] - sb->data[i]);
      }
      if (sb->requires_grad) {
        auto& gb = sb->grad_buffer();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= k * (sa->data[i] - sb->data[i]);
      }
    });
  }
  return result;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& rows,
                     const std::vector<int>& targets) {
  if (rows.empty()) throw std::invalid_argument("cross_entropy: no target rows");
  if (rows.size() != targets.size()) {
    throw DimensionError("cross_entropy: rows and targets differ in length");
  }
  const auto m = logits.rows(), n = logits.cols();
  for (std::size_t t = 0; t < rows.size(); ++t) {
    if (rows[t] >= m || targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= n) {
      throw DimensionError("cross_entropy: target (" + std::to_string(rows[t]) + ", " +
                           std::to_string(targets[t]) + ") outside logits " +
                           shape_str(logits.shape()));
    }
  }
  std::vector<double> probs, lse;
  softmax_into(logits.values(), m, n, probs, &lse);
  double total = 0.0;
  for (std::size_t t = 0; t < rows.size(); ++t) {
    total += lse[rows[t]] - logits[rows[t] * n + static_cast<std::size_t>(targets[t])];
  }
  const double count = static_cast<double>(rows.size());
  const bool track = tracking({&logits});
  Tensor result(Shape{1}, {total / count}, track);
  if (track) {
    record([sl = logits.storage(), so = result.storage(), probs = std::move(probs), rows, targets,
            n, count] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor("cross_entropy") * (*g)[0] / count;
      auto& gl = sl->grad_buffer();
      for (std::size_t t = 0; t < rows.size(); ++t) {
        const auto r = rows[t];
        for (std::size_t j = 0; j < n; ++j) gl[r * n + j] += k * probs[r * n + j];
        gl[r * n + static_cast<std::size_t>(targets[t])] -= k;
      }
    });
  }
  return result;
}

Tensor kl_divergence_rows(const Tensor& student_logits, const Tensor& teacher_logits,
                          const std::vector<std::size_t>& rows) {
  if (student_logits.cols() != teacher_logits.cols()) {
    throw DimensionError("kl_divergence_rows: vocabulary sizes differ " +
                         shape_str(student_logits.shape()) + " vs " +
                         shape_str(teacher_logits.shape()));
  }
  if (rows.empty()) throw std::invalid_argument("kl_divergence_rows: no rows");
  const auto n = student_logits.cols();
  for (auto r : rows) {
    if (r >= student_logits.rows() || r >= teacher_logits.rows()) {
      throw DimensionError("kl_divergence_rows: row " + std::to_string(r) + " out of range");
    }
  }
  std::vector<double> ps, lse_s, pt, lse_t;
  softmax_into(student_logits.values(), student_logits.rows(), n, ps, &lse_s);
  softmax_into(teacher_logits.values(), teacher_logits.rows(), n, pt, &lse_t);
  double total = 0.0;
  for (auto r : rows) {
    for (std::size_t j = 0; j < n; ++j) {
      const double p = pt[r * n + j];
      if (p == 0.0) continue;  // 0 log 0 := 0
      const double log_pt = teacher_logits[r * n + j] - lse_t[r];
      const double log_ps = student_logits[r * n + j] - lse_s[r];
      total += p * (log_pt - log_ps);
    }
  }
  const double count = static_cast<double>(rows.size());
  const bool track = tracking({&student_logits});
  Tensor result(Shape{1}, {total / count}, track);
  if (track) {
    record([ss = student_logits.storage(), so = result.storage(), ps = std::move(ps),
            pt = std::move(pt), rows, n, count] {
      const auto* g = upstream(so);
      if (!g) return;
      const double k = adjoint_fault_factor("kl_divergence_rows") * (*g)[0] / count;
      auto& gs = ss->grad_buffer();
      for (auto r : rows)
        for (std::size_t j = 0; j < n; ++j) gs[r * n + j] += k * (ps[r * n + j] - pt[r * n + j]);
    });
  }
  return result;
}

}  // namespace mimic::num
