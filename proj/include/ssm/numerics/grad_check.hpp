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

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "ssm/numerics/tape.hpp"

namespace ssm {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Coordinates probed per parameter, evenly strided; 0 probes all.
  std::size_t max_coordinates = 0;
};

struct ParameterGradError {
  std::string name;
  std::size_t count = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<ParameterGradError> parameters;
  double max_rel_error = 0.0;
  std::string worst_parameter;
  double tolerance = 0.0;

  bool passed() const { return max_rel_error <= tolerance; }
};

using ScalarFunction = std::function<Var(Tape&)>;

/// Compares tape gradients of a scalar function against central
/// differences, coordinate by coordinate, for every trainable parameter.
///
/// Relative error is |analytic - numeric| / max(1, |numeric|). The function
/// is evaluated twice up front; differing results raise DeterminismError.
inline GradCheckReport grad_check(const ScalarFunction& f, const std::vector<Parameter*>& params,
                                  GradCheckOptions options = {}) {
  if (!(options.step >= 1e-6 && options.step <= 1e-4)) {
    throw InvalidArgument("grad_check step must lie in [1e-6, 1e-4]");
  }
  auto evaluate = [&f] {
    Tape tape;
    return f(tape).value()[0];
  };

  const double first = evaluate();
  const double second = evaluate();
  if (std::memcmp(&first, &second, sizeof(double)) != 0) {
    throw DeterminismError("function under grad_check is not deterministic: " + std::to_string(first) +
                           " vs " + std::to_string(second));
  }

  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = f(tape);
    tape.backward(loss);
  }

  GradCheckReport report;
  report.tolerance = options.tolerance;
  const double h = options.step;
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    ParameterGradError entry;
    entry.name = p->name;
    const Tensor analytic = p->grad;
    const std::size_t size = p->value.size();
    const std::size_t stride =
        options.max_coordinates == 0 ? 1 : std::max<std::size_t>(1, (size + options.max_coordinates - 1) / options.max_coordinates);
    for (std::size_t i = 0; i < size; i += stride) {
      ++entry.count;
      const double saved = p->value[i];
      p->value[i] = saved + h;
      const double up = evaluate();
      p->value[i] = saved - h;
      const double down = evaluate();
      p->value[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
      if (err > entry.max_rel_error || i == 0) {
        entry.max_rel_error = std::max(entry.max_rel_error, err);
        entry.worst_index = i;
        entry.analytic = analytic[i];
        entry.numeric = numeric;
      }
    }
    if (entry.max_rel_error >= report.max_rel_error) {
      report.max_rel_error = entry.max_rel_error;
      report.worst_parameter = entry.name;
    }
    report.parameters.push_back(std::move(entry));
  }
  return report;
}

}  // namespace ssm
