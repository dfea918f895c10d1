#include "mimic/numerics/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace mimic::num {

namespace {

double finite_value(const Tensor& t, const char* what) {
  const double v = t.item();
  if (!std::isfinite(v)) throw std::domain_error(std::string("grad_check: non-finite ") + what);
  return v;
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

}  // namespace

double grad_check(const ScalarFn& fn, const Tensor& at, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
  Tensor x = at.clone();
  x.set_requires_grad(true);
  x.zero_grad();
  std::vector<double> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = fn(x);
    finite_value(y, "function value");
    tape.backward(y);
    analytic = x.grad();
  }
  double worst = 0.0;
  NoGradScope no_grad;
  auto data = x.mutable_data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double saved = data[i];
    data[i] = saved + eps;
    const double up = finite_value(fn(x), "perturbed value");
    data[i] = saved - eps;
    const double down = finite_value(fn(x), "perturbed value");
    data[i] = saved;
    if (!std::isfinite(analytic[i])) throw std::domain_error("grad_check: non-finite gradient");
    worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * eps)));
  }
  return worst;
}

double grad_check_params(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                         double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
  std::vector<bool> saved_flags;
  for (auto& p : params) {
    saved_flags.push_back(p.requires_grad());
    p.set_requires_grad(true);
    p.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = loss_fn();
    finite_value(y, "function value");
    tape.backward(y);
    for (auto& p : params) analytic.push_back(p.grad());
  }
  double worst = 0.0;
  {
    NoGradScope no_grad;
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto data = params[k].mutable_data();
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double saved = data[i];
        data[i] = saved + eps;
        const double up = finite_value(loss_fn(), "perturbed value");
        data[i] = saved - eps;
        const double down = finite_value(loss_fn(), "perturbed value");
        data[i] = saved;
        if (!std::isfinite(analytic[k][i])) {
          throw std::domain_error("grad_check: non-finite gradient");
        }
        worst = std::max(worst, relative_error(analytic[k][i], (up - down) / (2.0 * eps)));
      }
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    params[k].zero_grad();
    params[k].set_requires_grad(saved_flags[k]);
  }
  return worst;
}

std::string to_csv(const Tensor& t) {
  std::ostringstream os;
  os.precision(17);
  os << t.rows() << ',' << t.cols() << '\n';
  for (std::size_t i = 0; i < t.rows(); ++i) {
    for (std::size_t j = 0; j < t.cols(); ++j) {
      if (j) os << ',';
      os << t.at(i, j);
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace mimic::num
