#pragma once

#include <functional>
#include <string>

#include "mimic/numerics/tensor.hpp"

namespace mimic::num {

using ScalarFn = std::function<Tensor(const Tensor&)>;

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// fn must be deterministic and build its result from the tensor it is given.
double grad_check(const ScalarFn& fn, const Tensor& at, double eps = 1e-5);

// Same check for a function of several parameter tensors, perturbing each
// parameter in place. Returns the worst relative error over all of them.
double grad_check_params(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                         double eps = 1e-5);

// Writes "rows,cols" then one line per row; used for debugging dumps.
std::string to_csv(const Tensor& t);

}  // namespace mimic::num
