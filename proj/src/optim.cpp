#include "mimic/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mimic::training {

AdamW::AdamW(std::vector<ParamGroup> groups, double beta1, double beta2, double eps)
    : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& g : groups_) {
    m_.emplace_back();
    v_.emplace_back();
    for (const auto& p : g.params) {
      m_.back().emplace_back(p.size(), 0.0);
      v_.back().emplace_back(p.size(), 0.0);
    }
  }
}

void AdamW::step(double lr, double grad_divisor) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    auto& group = groups_[gi];
    const double group_lr = lr * group.lr_scale;
    for (std::size_t pi = 0; pi < group.params.size(); ++pi) {
      auto& p = group.params[pi];
      auto data = p.mutable_data();
      const auto& grad = p.storage()->grad;
      auto& m = m_[gi][pi];
      auto& v = v_[gi][pi];
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double g = grad.empty() ? 0.0 : grad[i] / grad_divisor;
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
        const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
        data[i] -= group_lr * (update + group.weight_decay * data[i]);
      }
    }
  }
}

void AdamW::zero_grad() {
  for (auto& g : groups_)
    for (auto& p : g.params) p.zero_grad();
}

std::size_t AdamW::parameter_count() const {
  std::size_t n = 0;
  for (const auto& g : groups_)
    for (const auto& p : g.params) n += p.size();
  return n;
}

double lr_schedule(std::size_t step, std::size_t total_steps, double peak_lr,
                   double warmup_ratio) {
  if (total_steps == 0) throw std::invalid_argument("lr_schedule: total_steps must be positive");
  if (warmup_ratio < 0.0 || warmup_ratio >= 1.0) {
    throw std::invalid_argument("lr_schedule: warmup_ratio must lie in [0, 1)");
  }
  const double warmup = warmup_ratio * static_cast<double>(total_steps);
  const double s = static_cast<double>(std::min(step, total_steps));
  if (s < warmup) return peak_lr * s / warmup;
  const double span = static_cast<double>(total_steps) - warmup;
  const double progress = span > 0.0 ? (s - warmup) / span : 1.0;
  return 0.5 * peak_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace mimic::training
