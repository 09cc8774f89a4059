// Copyright 2026 The SSM Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "ssm/numerics/tensor.hpp"

namespace ssm {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-4;
};

struct AdamMoments {
  Tensor first;
  Tensor second;
  std::size_t steps = 0;
};

/// One AdamW update of `w` in place. `step` is 1-based.
///
/// Decay is decoupled: w <- w - lr*wd*w, applied before the moment-based
/// step and never routed through the gradient.
inline void adamw_update(Tensor& w, const Tensor& grad, AdamMoments& moments, double lr,
                         const AdamWConfig& config, std::size_t step) {
  if (!(lr > 0.0)) throw InvalidArgument("learning rate must be positive, got " + std::to_string(lr));
  if (step == 0) throw InvalidArgument("adamw step count is 1-based");
  if (moments.first.empty()) {
    moments.first = Tensor(w.shape());
    moments.second = Tensor(w.shape());
  }
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double g = grad[i];
    double& m = moments.first[i];
    double& v = moments.second[i];
    m = config.beta1 * m + (1.0 - config.beta1) * g;
    v = config.beta2 * v + (1.0 - config.beta2) * g * g;
    w[i] -= lr * config.weight_decay * w[i];
    w[i] -= lr * (m / bc1) / (std::sqrt(v / bc2) + config.epsilon);
  }
}

/// Per-group learning rates.
struct GroupRates {
  double encoder = 0.0;
  double head = 0.0;

  double of(ParamGroup g) const { return g == ParamGroup::encoder ? encoder : head; }
};

/// AdamW over a fixed set of parameters. Frozen parameters, groups whose rate
/// is zero, and parameters no backward pass reached are skipped entirely, so
/// they see neither a moment update nor weight decay. Bias correction uses a
/// per-parameter step count.
class AdamW {
 public:
  AdamW(std::vector<Parameter*> params, AdamWConfig config) : params_(std::move(params)), config_(config) {
    moments_.resize(params_.size());
  }

  void step(const GroupRates& rates) {
    ++step_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter& p = *params_[i];
      const double lr = rates.of(p.group);
      if (!p.trainable || lr == 0.0 || !p.has_grad) continue;
      AdamMoments& mom = moments_[i];
      adamw_update(p.value, p.grad, mom, lr, config_, ++mom.steps);
    }
  }

  std::size_t step_count() const noexcept { return step_; }
  const std::vector<Parameter*>& parameters() const noexcept { return params_; }
  const std::vector<AdamMoments>& moments() const noexcept { return moments_; }
  std::vector<AdamMoments>& moments() noexcept { return moments_; }
  const AdamWConfig& config() const noexcept { return config_; }

 private:
  std::vector<Parameter*> params_;
  AdamWConfig config_;
  std::vector<AdamMoments> moments_;
  std::size_t step_ = 0;
};

}  // namespace ssm
