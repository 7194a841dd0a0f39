// SPDX-License-Identifier: Apache-2.0
//
// AdamW with decoupled weight decay, warmup + step-decay learning-rate
// schedule, and hyper-parameter grid enumeration.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "voxformer/nn/layers.hpp"

namespace voxformer {

struct AdamWHyper {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One update of a single parameter. `step` is the 1-based count after this
/// update. Moments are updated in place.
template <class T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v, std::int64_t step,
                  const AdamWHyper& hyper);

class AdamW {
 public:
  AdamW(std::vector<nn::NamedTensor> params, const AdamWHyper& hyper);

  /// Applies one update to every parameter from its accumulated gradient.
  /// Throws NumericError naming the first parameter with a missing or
  /// non-finite gradient; no parameter is modified in that case.
  void step();
  void zero_grad();

  void set_lr(double lr) { hyper_.lr = lr; }
  [[nodiscard]] const AdamWHyper& hyper() const noexcept { return hyper_; }
  [[nodiscard]] std::int64_t step_count() const noexcept { return t_; }
  [[nodiscard]] const std::vector<Tensor>& first_moments() const noexcept { return m_; }
  [[nodiscard]] const std::vector<Tensor>& second_moments() const noexcept { return v_; }

 private:
  std::vector<nn::NamedTensor> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  AdamWHyper hyper_;
  std::int64_t t_ = 0;
};

struct ScheduleConfig {
  double base_lr = 0.01;
  double warmup_multiplier = 1.0;
  std::int64_t warmup_epochs = 10;
  std::int64_t step_size = 25;
  double gamma = 0.3;
  std::int64_t total_epochs = 100;

  void validate() const;
};

/// Linear ramp base * (epoch + 1) / warmup during warmup, then
/// base * gamma^floor((epoch - warmup) / step_size).
double lr_at(std::int64_t epoch, const ScheduleConfig& schedule);

struct TrainConfig {
  double lr = 0.01;
  double weight_decay = 0.001;
  std::int64_t step_size = 25;
  double gamma = 0.3;
  std::int64_t epochs = 100;
  std::int64_t batch_size = 1;
  std::int64_t embed_dim = 512;
  std::int64_t warmup_epochs = 10;

  [[nodiscard]] ScheduleConfig schedule() const;
};

struct GridSpec {
  std::vector<double> lr{0.01, 0.001, 0.0001};
  std::vector<double> weight_decay{0.001, 0.0};
  std::vector<std::int64_t> step_size{25, 40, 80};
  std::vector<double> gamma{0.3, 0.5, 0.9};
};

/// Cartesian product, lr outermost, then weight decay, step size, gamma.
/// Each entry carries `base` for the fields the grid does not vary.
std::vector<TrainConfig> grid_enumerate(const GridSpec& grid, const TrainConfig& base = {});

}  // namespace voxformer
