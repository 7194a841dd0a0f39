// SPDX-License-Identifier: Apache-2.0
#include "voxformer/optim.hpp"

#include <algorithm>
#include <cmath>

namespace voxformer {

template <class T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v, std::int64_t step,
                  const AdamWHyper& h) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw ShapeError("adamw: parameter, gradient and moment sizes differ");
  }
  if (step < 1) throw ConfigError("adamw: step must be >= 1");
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = h.beta1 * m[i] + (1.0 - h.beta1) * g;
    const double vi = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double theta = param[i];
    const double update = (mi / c1) / (std::sqrt(vi / c2) + h.eps);
    param[i] = static_cast<T>(theta - h.lr * update - h.lr * h.weight_decay * theta);
  }
}

template void adamw_update<float>(std::span<float>, std::span<const float>, std::span<float>, std::span<float>,
                                  std::int64_t, const AdamWHyper&);
template void adamw_update<double>(std::span<double>, std::span<const double>, std::span<double>,
                                   std::span<double>, std::int64_t, const AdamWHyper&);

AdamW::AdamW(std::vector<nn::NamedTensor> params, const AdamWHyper& hyper)
    : params_(std::move(params)), hyper_(hyper) {
  if (!(hyper.lr >= 0.0) || !(hyper.weight_decay >= 0.0)) throw ConfigError("adamw: lr and weight decay must be >= 0");
  if (!(hyper.beta1 >= 0.0 && hyper.beta1 < 1.0 && hyper.beta2 >= 0.0 && hyper.beta2 < 1.0)) {
    throw ConfigError("adamw: betas must lie in [0, 1)");
  }
  if (!(hyper.eps > 0.0)) throw ConfigError("adamw: eps must be positive");
  for (const auto& [_, p] : params_) {
    m_.push_back(Tensor::zeros(p.shape(), p.dtype()));
    v_.push_back(Tensor::zeros(p.shape(), p.dtype()));
  }
}

void AdamW::step() {
  for (const auto& [name, p] : params_) {
    if (!p.has_grad()) throw NumericError("adamw: parameter '" + name + "' has no gradient");
    const bool finite = dispatch(p.dtype(), [&]<typename T>() {
      for (T g : p.grad().template data<T>()) {
        if (!std::isfinite(g)) return false;
      }
      return true;
    });
    if (!finite) throw NumericError("adamw: non-finite gradient for parameter '" + name + "'");
  }
  ++t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].second;
    dispatch(p.dtype(), [&]<typename T>() {
      adamw_update<T>(p.mutable_data<T>(), p.grad().template data<T>(), m_[i].mutable_data<T>(),
                      v_[i].mutable_data<T>(), t_, hyper_);
    });
  }
}

void AdamW::zero_grad() {
  for (auto& [_, p] : params_) p.zero_grad();
}

void ScheduleConfig::validate() const {
  if (!(base_lr >= 0.0)) throw ConfigError("schedule: base lr must be >= 0");
  if (warmup_multiplier != 1.0) {
    throw ConfigError("schedule: only warmup multiplier 1 is supported, got " + std::to_string(warmup_multiplier));
  }
  if (warmup_epochs < 0 || warmup_epochs > total_epochs) {
    throw ConfigError("schedule: warmup epochs must lie in [0, total epochs]");
  }
  if (step_size < 1) throw ConfigError("schedule: step size must be >= 1");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("schedule: gamma must lie in (0, 1]");
  if (total_epochs < 1) throw ConfigError("schedule: total epochs must be >= 1");
}

double lr_at(std::int64_t epoch, const ScheduleConfig& s) {
  s.validate();
  if (epoch < 0 || epoch >= s.total_epochs) {
    throw ConfigError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(s.total_epochs) +
                      ")");
  }
  if (epoch < s.warmup_epochs) {
    return s.base_lr * (static_cast<double>(epoch + 1) / static_cast<double>(s.warmup_epochs));
  }
  const auto decays = (epoch - s.warmup_epochs) / s.step_size;
  return s.base_lr * std::pow(s.gamma, static_cast<double>(decays));
}

ScheduleConfig TrainConfig::schedule() const {
  ScheduleConfig s;
  s.base_lr = lr;
  s.warmup_epochs = warmup_epochs;
  s.step_size = step_size;
  s.gamma = gamma;
  s.total_epochs = std::max<std::int64_t>(100, epochs);
  return s;
}

std::vector<TrainConfig> grid_enumerate(const GridSpec& grid, const TrainConfig& base) {
  std::vector<TrainConfig> out;
  out.reserve(grid.lr.size() * grid.weight_decay.size() * grid.step_size.size() * grid.gamma.size());
  for (double lr : grid.lr) {
    for (double wd : grid.weight_decay) {
      for (auto step : grid.step_size) {
        for (double gamma : grid.gamma) {
          TrainConfig c = base;
          c.lr = lr;
          c.weight_decay = wd;
          c.step_size = step;
          c.gamma = gamma;
          out.push_back(c);
        }
      }
    }
  }
  return out;
}

}  // namespace voxformer
