#pragma once

#include <cstddef>
#include <vector>

#include "mimic/numerics/tensor.hpp"

namespace mimic::training {

using num::Tensor;

struct ParamGroup {
  std::vector<Tensor> params;
  double lr_scale = 1.0;  // multiplies the scheduled learning rate
  double weight_decay = 0.0;
};

// Adam with decoupled weight decay.
class AdamW {
 public:
  explicit AdamW(std::vector<ParamGroup> groups, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8);

  // Consumes accumulated gradients (divided by grad_divisor) and updates in place.
  void step(double lr, double grad_divisor = 1.0);
  void zero_grad();
  std::size_t steps_taken() const { return t_; }
  std::size_t parameter_count() const;

 private:
  std::vector<ParamGroup> groups_;
  std::vector<std::vector<std::vector<double>>> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

// Linear warmup over warmup_ratio * total_steps to peak, then cosine decay to 0.
double lr_schedule(std::size_t step, std::size_t total_steps, double peak_lr,
                   double warmup_ratio);

}  // namespace mimic::training
