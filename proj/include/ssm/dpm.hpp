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

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ssm/numerics/ops.hpp"
#include "ssm/numerics/rng.hpp"

// Dynamic prior mapping between expression and AU prototype spaces.

namespace ssm::dpm {

enum class Mode { learnable_dual, frozen, transpose_tied, linear, mlp, none };
enum class Init { prior, random, identity };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::learnable_dual: return "learnable-dual";
    case Mode::frozen: return "frozen";
    case Mode::transpose_tied: return "transpose-tied";
    case Mode::linear: return "linear";
    case Mode::mlp: return "mlp";
    case Mode::none: return "none";
  }
  return "none";
}

inline Mode parse_mode(std::string_view s) {
  if (s == "learnable-dual") return Mode::learnable_dual;
  if (s == "frozen") return Mode::frozen;
  if (s == "transpose-tied") return Mode::transpose_tied;
  if (s == "linear") return Mode::linear;
  if (s == "mlp") return Mode::mlp;
  if (s == "none") return Mode::none;
  throw ConfigError("unknown dpm mode '" + std::string(s) + "'");
}

inline std::string to_string(Init i) {
  switch (i) {
    case Init::prior: return "prior";
    case Init::random: return "random";
    case Init::identity: return "identity";
  }
  return "prior";
}

inline Init parse_init(std::string_view s) {
  if (s == "prior") return Init::prior;
  if (s == "random") return Init::random;
  if (s == "identity") return Init::identity;
  throw ConfigError("unknown dpm init '" + std::string(s) + "'");
}

struct DpmConfig {
  Mode mode = Mode::learnable_dual;
  Init init = Init::prior;
  double tau_m = 0.01;
  double alpha0 = 0.1;
  double beta0 = 0.1;
  double random_std = 0.02;
};

/// T~exp = softmax_row(W_ae / tau_m) T_au and T~au = softmax_row(W_ea / tau_m) T_exp.
inline std::pair<Var, Var> map_prototypes(Var w_ae, Var w_ea, Var t_exp, Var t_au, double tau_m) {
  return {matmul(row_softmax(w_ae, tau_m), t_au), matmul(row_softmax(w_ea, tau_m), t_exp)};
}

/// Residual enhancement T + coeff * T_mapped, recomputed from fresh base
/// prototypes on every forward pass.
inline Var enhance(Var t, Var t_mapped, Var coeff) { return add(t, scale_by(t_mapped, coeff)); }

/// Holds the mapping parameters for one of the DPM variants.
class DpmModule {
 public:
  /// `prior_w0` is the row-normalized K x M prior; it is used for prior
  /// initialization and otherwise only supplies (K, M).
  DpmModule(const Tensor& prior_w0, const DpmConfig& config, std::uint64_t seed)
      : config_(config), k_(prior_w0.rows()), m_(prior_w0.cols()) {
    if (!(config.tau_m > 0.0)) throw ConfigError("tau_m must be positive");
    Rng rng(seed, "dpm");
    alpha_ = Parameter("dpm.alpha", Tensor::scalar(config.alpha0), ParamGroup::head);
    beta_ = Parameter("dpm.beta", Tensor::scalar(config.beta0), ParamGroup::head);

    auto initial = [&](bool reverse) {
      switch (config.init) {
        case Init::prior: return reverse ? prior_w0.transposed() : prior_w0;
        case Init::random: return reverse ? rng.normal_matrix(m_, k_, config.random_std)
                                          : rng.normal_matrix(k_, m_, config.random_std);
        case Init::identity: {
          Tensor eye = reverse ? Tensor::matrix(m_, k_) : Tensor::matrix(k_, m_);
          for (std::size_t i = 0; i < std::min(k_, m_); ++i) eye(i, i) = 1.0;
          return eye;
        }
      }
      return prior_w0;
    };

    switch (config.mode) {
      case Mode::learnable_dual:
      case Mode::frozen:
      case Mode::transpose_tied:
      case Mode::linear: {
        const bool trainable = config.mode != Mode::frozen;
        const std::string prefix = config.mode == Mode::linear ? "dpm.linear." : "dpm.";
        w_ae_ = Parameter(prefix + "w_au_to_exp", initial(false), ParamGroup::head, trainable);
        if (config.mode != Mode::transpose_tied) {
          w_ea_ = Parameter(prefix + "w_exp_to_au", initial(true), ParamGroup::head, trainable);
        }
        break;
      }
      case Mode::mlp: {
        const std::size_t h = std::max(k_, m_);
        auto layer = [&](const std::string& name, std::size_t rows, std::size_t cols) {
          return Parameter(name, rng.normal_matrix(rows, cols, 1.0 / std::sqrt(static_cast<double>(cols))),
                           ParamGroup::head);
        };
        mlp_ = {layer("dpm.mlp.ae.w1", h, m_), Parameter("dpm.mlp.ae.b1", Tensor::matrix(h, 1), ParamGroup::head),
                layer("dpm.mlp.ae.w2", k_, h), Parameter("dpm.mlp.ae.b2", Tensor::matrix(k_, 1), ParamGroup::head),
                layer("dpm.mlp.ea.w1", h, k_), Parameter("dpm.mlp.ea.b1", Tensor::matrix(h, 1), ParamGroup::head),
                layer("dpm.mlp.ea.w2", m_, h), Parameter("dpm.mlp.ea.b2", Tensor::matrix(m_, 1), ParamGroup::head)};
        break;
      }
      case Mode::none: break;
    }
  }

  DpmModule(const DpmModule&) = delete;
  DpmModule& operator=(const DpmModule&) = delete;

  const DpmConfig& config() const noexcept { return config_; }
  Mode mode() const noexcept { return config_.mode; }

  /// Mapped prototypes (T~exp, T~au) before the residual step. Mode none
  /// yields zero matrices.
  std::pair<Var, Var> mapped(Tape& tape, Var t_exp, Var t_au) {
    check_shapes(t_exp, t_au);
    switch (config_.mode) {
      case Mode::learnable_dual:
      case Mode::frozen:
        return map_prototypes(tape.param(w_ae_), tape.param(w_ea_), t_exp, t_au, config_.tau_m);
      case Mode::transpose_tied: {
        Var w = tape.param(w_ae_);
        return map_prototypes(w, transpose(w), t_exp, t_au, config_.tau_m);
      }
      case Mode::linear:
        return {matmul(tape.param(w_ae_), t_au), matmul(tape.param(w_ea_), t_exp)};
      case Mode::mlp: {
        auto two_layer = [&](std::size_t base, Var src) {
          Var hidden = gelu(add_col(matmul(tape.param(mlp_[base]), src), tape.param(mlp_[base + 1])));
          return add_col(matmul(tape.param(mlp_[base + 2]), hidden), tape.param(mlp_[base + 3]));
        };
        return {two_layer(0, t_au), two_layer(4, t_exp)};
      }
      case Mode::none:
        return {tape.constant(Tensor(t_exp.value().shape())), tape.constant(Tensor(t_au.value().shape()))};
    }
    throw ConfigError("unhandled dpm mode");
  }

  /// Enhanced prototypes T + alpha T~exp and T + beta T~au. Mode none
  /// returns the base prototypes untouched.
  std::pair<Var, Var> forward(Tape& tape, Var t_exp, Var t_au) {
    if (config_.mode == Mode::none) {
      check_shapes(t_exp, t_au);
      return {t_exp, t_au};
    }
    auto [mapped_exp, mapped_au] = mapped(tape, t_exp, t_au);
    return {enhance(t_exp, mapped_exp, tape.param(alpha_)), enhance(t_au, mapped_au, tape.param(beta_))};
  }

  /// Raw AU->expression matrix (K x M).
  const Tensor& w_au_to_exp() const { return w_ae_.value; }
  /// Raw expression->AU matrix (M x K); the transpose in tied mode.
  Tensor w_exp_to_au() const {
    return config_.mode == Mode::transpose_tied ? w_ae_.value.transposed() : w_ea_.value;
  }

  bool has_mapping_matrices() const {
    return config_.mode == Mode::learnable_dual || config_.mode == Mode::frozen ||
           config_.mode == Mode::transpose_tied;
  }

  /// Mixing weights the model actually applies: row_softmax(W / tau_m).
  Tensor au_to_exp_mixing() const { return row_softmax(w_au_to_exp(), config_.tau_m); }
  Tensor exp_to_au_mixing() const { return row_softmax(w_exp_to_au(), config_.tau_m); }

  Parameter& alpha() { return alpha_; }
  Parameter& beta() { return beta_; }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    switch (config_.mode) {
      case Mode::none: return out;
      case Mode::mlp:
        for (auto& p : mlp_) out.push_back(&p);
        break;
      case Mode::transpose_tied: out.push_back(&w_ae_); break;
      default:
        out.push_back(&w_ae_);
        out.push_back(&w_ea_);
    }
    out.push_back(&alpha_);
    out.push_back(&beta_);
    return out;
  }

 private:
  void check_shapes(Var t_exp, Var t_au) const {
    if (t_exp.rows() != k_ || t_au.rows() != m_ || t_exp.cols() != t_au.cols()) {
      throw ConfigError("dpm expects " + std::to_string(k_) + " expression and " + std::to_string(m_) +
                        " AU prototypes of equal width");
    }
  }

  DpmConfig config_;
  std::size_t k_;
  std::size_t m_;
  Parameter w_ae_;
  Parameter w_ea_;
  Parameter alpha_;
  Parameter beta_;
  std::vector<Parameter> mlp_;
};

/// Prior initialization: W_ae = W0, W_ea = W0^T, learnable in both directions.
inline DpmConfig prior_config(double tau_m = 0.01) { return DpmConfig{Mode::learnable_dual, Init::prior, tau_m}; }

/// Learnable-dual state from a normalized prior whose shape must equal the
/// configured (K, M).
inline std::unique_ptr<DpmModule> init_prior(const Tensor& w0, std::size_t k, std::size_t m,
                                             DpmConfig config = prior_config()) {
  if (w0.rank() != 2 || w0.rows() != k || w0.cols() != m) {
    throw ConfigError("prior matrix has shape " + shape_string(w0.shape()) + ", expected [" + std::to_string(k) +
                      "," + std::to_string(m) + "]");
  }
  config.init = Init::prior;
  return std::make_unique<DpmModule>(w0, config, 0);
}

/// Independent Gaussian draws for both matrices.
inline std::unique_ptr<DpmModule> init_random(std::uint64_t seed, std::size_t k, std::size_t m,
                                              DpmConfig config = prior_config()) {
  config.init = Init::random;
  return std::make_unique<DpmModule>(Tensor::matrix(k, m), config, seed);
}

}  // namespace ssm::dpm
