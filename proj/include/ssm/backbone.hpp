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
#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "ssm/numerics/ops.hpp"
#include "ssm/numerics/rng.hpp"

namespace ssm::backbone {

enum class TaskKind { expression, au };

inline std::string to_string(TaskKind t) { return t == TaskKind::expression ? "expression" : "au"; }

/// A batch of clips. Frames are stored as (B * n) x d_raw, clip-major.
struct ClipBatch {
  Tensor frames;
  std::size_t frames_per_clip = 0;
  TaskKind task = TaskKind::expression;
  Tensor labels;  // B x K one-hot or B x M binary
  int domain_id = 0;

  std::size_t size() const { return frames_per_clip ? frames.rows() / frames_per_clip : 0; }
};

struct BackboneConfig {
  std::size_t d_raw = 32;
  std::size_t d = 64;
  std::size_t d_hidden = 32;  // expert hidden width
  std::size_t experts = 4;
  std::size_t top_k = 2;
  std::size_t temporal_hidden = 64;
  bool positional = true;
};

/// Affine expert E(x) = W2 (W1 x + b1) + b2, applied to the rows of x.
struct Expert {
  Parameter w1, b1, w2, b2;

  Expert() = default;
  Expert(const std::string& prefix, std::size_t d, std::size_t hidden, Rng& rng, ParamGroup group, bool trainable)
      : w1(prefix + ".w1", rng.normal_matrix(hidden, d, 1.0 / std::sqrt(static_cast<double>(d))), group, trainable),
        b1(prefix + ".b1", Tensor::matrix(1, hidden), group, trainable),
        w2(prefix + ".w2", rng.normal_matrix(d, hidden, 1.0 / std::sqrt(static_cast<double>(hidden))), group,
           trainable),
        b2(prefix + ".b2", Tensor::matrix(1, d), group, trainable) {}

  Var operator()(Tape& tape, Var x) {
    Var h = add_row(matmul_nt(x, tape.param(w1)), tape.param(b1));
    return add_row(matmul_nt(h, tape.param(w2)), tape.param(b2));
  }

  std::vector<Parameter*> parameters() { return {&w1, &b1, &w2, &b2}; }
};

/// Keeps the top_k entries of each gate row (ties go to the lower index)
/// and renormalizes them to sum to one; all other entries become zero.
inline Var topk_renormalize(Var gates, std::size_t top_k, std::vector<std::vector<std::size_t>>* selected = nullptr) {
  const Tensor& G = gates.value();
  const std::size_t t = G.rows(), m = G.cols();
  if (top_k == 0 || top_k > m) throw InvalidArgument("top_k must lie in [1, experts]");
  Tensor out = Tensor::matrix(t, m);
  std::vector<std::size_t> choice(t * top_k);
  std::vector<std::size_t> order(m);
  for (std::size_t i = 0; i < t; ++i) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return G(i, a) > G(i, b); });
    double s = 0.0;
    for (std::size_t r = 0; r < top_k; ++r) s += G(i, order[r]);
    for (std::size_t r = 0; r < top_k; ++r) {
      choice[i * top_k + r] = order[r];
      out(i, order[r]) = G(i, order[r]) / s;
    }
  }
  if (selected) {
    selected->assign(m, {});
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t r = 0; r < top_k; ++r) (*selected)[choice[i * top_k + r]].push_back(i);
  }
  return gates.tape()->record(
      std::move(out), {gates}, [gates, choice = std::move(choice), top_k](Tape& tp, const Tensor& g, const Tensor&) {
        Tensor* gg = tp.grad_buffer(gates);
        if (!gg) return;
        const Tensor& G = gates.value();
        for (std::size_t i = 0; i < G.rows(); ++i) {
          double s = 0.0, weighted = 0.0;
          for (std::size_t r = 0; r < top_k; ++r) s += G(i, choice[i * top_k + r]);
          for (std::size_t r = 0; r < top_k; ++r) {
            const std::size_t j = choice[i * top_k + r];
            weighted += g(i, j) * G(i, j);
          }
          for (std::size_t r = 0; r < top_k; ++r) {
            const std::size_t j = choice[i * top_k + r];
            (*gg)(i, j) += (g(i, j) - weighted / s) / s;
          }
        }
      });
}

/// Counts private-expert evaluations; every token should account for
/// exactly top_k of them.
struct MoeStats {
  std::size_t tokens = 0;
  std::vector<std::size_t> expert_tokens;
  std::size_t max_experts_per_token = 0;
  std::size_t min_experts_per_token = 0;

  std::size_t total_evaluations() const {
    return std::accumulate(expert_tokens.begin(), expert_tokens.end(), std::size_t{0});
  }
};

/// Mixture-of-experts feed-forward: a frozen shared expert plus gated
/// private experts scaled by a learnable vector gamma (initially zero).
class MoeLayer {
 public:
  MoeLayer(const BackboneConfig& config, Rng& rng, const std::string& prefix = "moe")
      : MoeLayer(config, rng, rng, prefix) {}

  /// The frozen shared expert draws from `frozen_rng`, everything trainable
  /// from `trainable_rng`.
  MoeLayer(const BackboneConfig& config, Rng& frozen_rng, Rng& trainable_rng, const std::string& prefix)
      : top_k_(config.top_k),
        router_(prefix + ".router", trainable_rng.normal_matrix(config.experts, config.d, 0.02), ParamGroup::encoder),
        shared_(prefix + ".shared", config.d, config.d_hidden, frozen_rng, ParamGroup::encoder, false),
        gamma_(prefix + ".gamma", Tensor::matrix(1, config.d), ParamGroup::encoder) {
    if (config.top_k == 0 || config.top_k > config.experts) throw ConfigError("moe top_k must lie in [1, experts]");
    for (std::size_t j = 0; j < config.experts; ++j) {
      private_.emplace_back(prefix + ".expert" + std::to_string(j), config.d, config.d_hidden, trainable_rng,
                            ParamGroup::encoder, true);
    }
    stats_.expert_tokens.assign(config.experts, 0);
  }

  /// y = E_s(LN(x)) + gamma * sum_{j in top_k} g_j E_j(LN(x)), row by row.
  /// The residual connection belongs to the caller.
  Var forward(Tape& tape, Var x) {
    Var xt = layer_norm_rows(x);
    Var gates = row_softmax(matmul_nt(xt, tape.param(router_)), 1.0);
    std::vector<std::vector<std::size_t>> selected;
    Var weights = topk_renormalize(gates, top_k_, &selected);
    const std::size_t t = x.rows();

    std::vector<std::size_t> per_token(t, 0);
    Var mixed;
    for (std::size_t j = 0; j < private_.size(); ++j) {
      const auto& rows = selected[j];
      stats_.expert_tokens[j] += rows.size();
      for (std::size_t r : rows) ++per_token[r];
      if (rows.empty()) continue;
      Var yj = private_[j](tape, gather_rows(xt, rows));
      yj = mul_col(yj, gather_column(weights, rows, j));
      Var placed = scatter_rows(yj, rows, t);
      mixed = mixed.valid() ? add(mixed, placed) : placed;
    }
    stats_.tokens += t;
    if (t) {
      const auto [lo, hi] = std::minmax_element(per_token.begin(), per_token.end());
      stats_.min_experts_per_token = stats_.tokens == t ? *lo : std::min(stats_.min_experts_per_token, *lo);
      stats_.max_experts_per_token = std::max(stats_.max_experts_per_token, *hi);
    }
    Var shared = shared_(tape, xt);
    if (!mixed.valid()) return shared;  // empty batch
    return add(shared, mul_row(mixed, tape.param(gamma_)));
  }

  const MoeStats& stats() const noexcept { return stats_; }
  void reset_stats() {
    stats_ = MoeStats{};
    stats_.expert_tokens.assign(private_.size(), 0);
  }

  Parameter& router() { return router_; }
  Parameter& gamma() { return gamma_; }
  Expert& shared_expert() { return shared_; }
  std::vector<Expert>& private_experts() { return private_; }
  std::size_t top_k() const noexcept { return top_k_; }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out{&router_};
    for (auto* p : shared_.parameters()) out.push_back(p);
    for (auto& e : private_)
      for (auto* p : e.parameters()) out.push_back(p);
    out.push_back(&gamma_);
    return out;
  }

 private:
  std::size_t top_k_;
  Parameter router_;
  Expert shared_;
  std::vector<Expert> private_;
  Parameter gamma_;
  MoeStats stats_;
};

/// Shared visual trunk: frozen affine lift d_raw -> d followed by one
/// MoE-augmented residual block.
class FrameEncoder {
 public:
  FrameEncoder(const BackboneConfig& config, std::uint64_t seed) : FrameEncoder(config, seed, seed) {}

  /// `frozen_seed` fixes the pretrained stand-in (lift and shared expert);
  /// `trainable_seed` initializes the router, private experts and gamma.
  FrameEncoder(const BackboneConfig& config, std::uint64_t frozen_seed, std::uint64_t trainable_seed)
      : config_(config) {
    Rng frozen(frozen_seed, "frame-encoder");
    Rng trainable(trainable_seed, "frame-encoder.moe");
    input_ = Parameter("encoder.input.w", frozen.normal_matrix(config.d, config.d_raw, 1.0 / std::sqrt(double(config.d_raw))),
                       ParamGroup::encoder, false);
    input_bias_ = Parameter("encoder.input.b", frozen.normal_matrix(1, config.d, 0.1), ParamGroup::encoder, false);
    moe_ = std::make_unique<MoeLayer>(config, frozen, trainable, "encoder.moe");
  }

  /// (B * n) x d features, one row per frame, order preserved.
  Var encode(Tape& tape, const Tensor& frames) {
    if (frames.cols() != config_.d_raw) {
      throw ConfigError("frame width " + std::to_string(frames.cols()) + " does not match d_raw " +
                        std::to_string(config_.d_raw));
    }
    Var lifted = add_row(matmul_nt(tape.constant(frames), tape.param(input_)), tape.param(input_bias_));
    return add(lifted, moe_->forward(tape, lifted));
  }

  /// Lifted features without the MoE block's private experts (gamma = 0 view).
  Var encode_shared_only(Tape& tape, const Tensor& frames) {
    Var lifted = add_row(matmul_nt(tape.constant(frames), tape.param(input_)), tape.param(input_bias_));
    return add(lifted, moe_->shared_expert()(tape, layer_norm_rows(lifted)));
  }

  MoeLayer& moe() { return *moe_; }
  const Parameter& lift() const noexcept { return input_; }
  const BackboneConfig& config() const noexcept { return config_; }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out{&input_, &input_bias_};
    for (auto* p : moe_->parameters()) out.push_back(p);
    return out;
  }

 private:
  BackboneConfig config_;
  Parameter input_;
  Parameter input_bias_;
  std::unique_ptr<MoeLayer> moe_;
};

/// Fixed sinusoidal positions, n x d.
inline Tensor sinusoidal_positions(std::size_t n, std::size_t d) {
  Tensor pe = Tensor::matrix(n, d);
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      pe(pos, i) = (i % 2 == 0) ? std::sin(static_cast<double>(pos) * freq) : std::cos(static_cast<double>(pos) * freq);
    }
  }
  return pe;
}

/// 0-based index of the center frame, floor(n / 2).
inline std::size_t center_index(std::size_t n) { return n / 2; }

/// Single-head, single-layer Transformer block with residual attention and
/// feed-forward sublayers.
class TemporalBlock {
 public:
  TemporalBlock(const BackboneConfig& config, const std::string& prefix, std::uint64_t seed) : config_(config) {
    Rng rng(seed, prefix);
    const double s = 1.0 / std::sqrt(static_cast<double>(config.d));
    const double sh = 1.0 / std::sqrt(static_cast<double>(config.temporal_hidden));
    wq_ = Parameter(prefix + ".wq", rng.normal_matrix(config.d, config.d, s), ParamGroup::head);
    wk_ = Parameter(prefix + ".wk", rng.normal_matrix(config.d, config.d, s), ParamGroup::head);
    wv_ = Parameter(prefix + ".wv", rng.normal_matrix(config.d, config.d, s), ParamGroup::head);
    wo_ = Parameter(prefix + ".wo", rng.normal_matrix(config.d, config.d, 0.5 * s), ParamGroup::head);
    w1_ = Parameter(prefix + ".ffn.w1", rng.normal_matrix(config.temporal_hidden, config.d, s), ParamGroup::head);
    b1_ = Parameter(prefix + ".ffn.b1", Tensor::matrix(1, config.temporal_hidden), ParamGroup::head);
    w2_ = Parameter(prefix + ".ffn.w2", rng.normal_matrix(config.d, config.temporal_hidden, 0.5 * sh), ParamGroup::head);
    b2_ = Parameter(prefix + ".ffn.b2", Tensor::matrix(1, config.d), ParamGroup::head);
  }

  /// Clip-level vector per clip: attended frames mean-pooled (B x d).
  Var pooled(Tape& tape, Var features, std::size_t n) {
    Var h = with_positions(tape, features, n);
    Var out = block(tape, h, h, n, n);
    return segment_mean_rows(out, n);
  }

  /// Temporally enhanced center frame per clip (B x d). Only the center
  /// query is evaluated; keys and values cover the whole clip.
  Var center(Tape& tape, Var features, std::size_t n) {
    Var h = with_positions(tape, features, n);
    const std::size_t clips = features.rows() / n;
    std::vector<std::size_t> rows(clips);
    for (std::size_t b = 0; b < clips; ++b) rows[b] = b * n + center_index(n);
    return block(tape, gather_rows(h, rows), h, 1, n);
  }

  /// All n enhanced frames per clip ((B * n) x d).
  Var sequence(Tape& tape, Var features, std::size_t n) {
    Var h = with_positions(tape, features, n);
    return block(tape, h, h, n, n);
  }

  std::vector<Parameter*> parameters() { return {&wq_, &wk_, &wv_, &wo_, &w1_, &b1_, &w2_, &b2_}; }

 private:
  Var with_positions(Tape& tape, Var features, std::size_t n) {
    if (n == 0 || features.rows() % n != 0) throw InvalidArgument("feature rows are not a multiple of the clip length");
    if (!config_.positional) return features;
    const Tensor pe = sinusoidal_positions(n, config_.d);
    Tensor tiled = Tensor::matrix(features.rows(), config_.d);
    for (std::size_t r = 0; r < tiled.rows(); ++r) std::copy_n(pe.data() + (r % n) * config_.d, config_.d, tiled.data() + r * config_.d);
    return add(features, tape.constant(std::move(tiled)));
  }

  Var block(Tape& tape, Var queries, Var context, std::size_t q_per_clip, std::size_t n) {
    Var q = matmul_nt(queries, tape.param(wq_));
    Var k = matmul_nt(context, tape.param(wk_));
    Var v = matmul_nt(context, tape.param(wv_));
    Var attended = matmul_nt(grouped_attention(q, k, v, q_per_clip, n), tape.param(wo_));
    Var h1 = add(queries, attended);
    Var hidden = gelu(add_row(matmul_nt(h1, tape.param(w1_)), tape.param(b1_)));
    Var ffn = add_row(matmul_nt(hidden, tape.param(w2_)), tape.param(b2_));
    return add(h1, ffn);
  }

  BackboneConfig config_;
  Parameter wq_, wk_, wv_, wo_, w1_, b1_, w2_, b2_;
};

}  // namespace ssm::backbone
