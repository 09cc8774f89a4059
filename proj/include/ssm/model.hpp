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

#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ssm/backbone.hpp"
#include "ssm/dpm.hpp"
#include "ssm/facs.hpp"
#include "ssm/objective.hpp"
#include "ssm/tsp.hpp"

namespace ssm::model {

/// Model families compared in the component study.
///   stl       separate trunks per task, linear heads
///   baseline  shared trunk, linear heads
///   tsp       shared trunk, text prototypes
///   ssm       shared trunk, text prototypes and prior mapping
enum class Variant { stl, baseline, tsp, ssm };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::stl: return "stl";
    case Variant::baseline: return "baseline";
    case Variant::tsp: return "tsp";
    case Variant::ssm: return "ssm";
  }
  return "ssm";
}

inline Variant parse_variant(std::string_view s) {
  if (s == "stl") return Variant::stl;
  if (s == "baseline") return Variant::baseline;
  if (s == "tsp") return Variant::tsp;
  if (s == "ssm") return Variant::ssm;
  throw ConfigError("unknown model variant '" + std::string(s) + "'");
}

struct ModelConfig {
  Variant variant = Variant::ssm;
  backbone::BackboneConfig backbone{};
  tsp::TspConfig tsp{};
  dpm::DpmConfig dpm{};
  double tau = 0.01;
  std::vector<std::string> expressions = facs::basic_expressions();
  std::vector<int> aus = facs::bp4d_aus();
  /// Seeds the frozen stand-ins for pretrained weights (input lift, shared
  /// expert, token table, text encoder). It stays fixed while run seeds vary.
  std::uint64_t pretrained_seed = 7;
};

/// Named intermediate values of a forward pass, in evaluation order.
using Trace = std::vector<std::pair<std::string, Var>>;

struct Prototypes {
  Var expression;  // K x d
  Var au;          // M x d
};

inline std::shared_ptr<const tsp::TextEncoderProvider> default_text_encoder(const ModelConfig& config) {
  return std::make_shared<tsp::SurrogateTextEncoder>(derive_seed(config.pretrained_seed, "text-encoder"),
                                                     config.tsp.token_dim, config.backbone.d);
}

/// The frozen pieces every run of a config shares: the trunk's input lift
/// (d x d_raw) and context-free text prototypes for both label sets.
struct PretrainedView {
  Tensor lift;
  Tensor au_text;
  Tensor expression_text;
};

inline PretrainedView pretrained_view(const ModelConfig& config, const facs::FacsTable& table) {
  const backbone::FrameEncoder trunk(config.backbone, derive_seed(config.pretrained_seed, "trunk"), 0);
  tsp::TspConfig plain = config.tsp;
  plain.context_length = 0;
  plain.style = tsp::DescriptionStyle::compound;
  const tsp::PromptBank bank(table, config.expressions, config.aus, default_text_encoder(config), plain, 0,
                             derive_seed(config.pretrained_seed, "token-embedding"));
  Tape tape;
  return {trunk.lift().value, bank.au_prototypes(tape).value(), bank.expression_prototypes(tape).value()};
}

class Model {
 public:
  Model(const ModelConfig& config, const facs::FacsTable& table, std::uint64_t seed,
        std::shared_ptr<const tsp::TextEncoderProvider> text_encoder = nullptr)
      : config_(config) {
    if (!(config.tau > 0.0)) throw ConfigError("tau must be positive");
    if (config.expressions.empty() || config.aus.empty()) throw ConfigError("label sets must be non-empty");
    const std::size_t d = config.backbone.d;
    const std::uint64_t frozen = derive_seed(config.pretrained_seed, "trunk");
    encoder_ = std::make_unique<backbone::FrameEncoder>(config.backbone, frozen, derive_seed(seed, "trunk"));
    if (config.variant == Variant::stl) {
      au_encoder_ = std::make_unique<backbone::FrameEncoder>(config.backbone, frozen, derive_seed(seed, "trunk"));
      for (Parameter* p : au_encoder_->parameters()) p->name = "au." + p->name;
    }
    exp_block_ = std::make_unique<backbone::TemporalBlock>(config.backbone, "temporal.exp", derive_seed(seed, "temporal"));
    au_block_ = std::make_unique<backbone::TemporalBlock>(config.backbone, "temporal.au", derive_seed(seed, "temporal"));

    if (uses_prototypes()) {
      if (!text_encoder) text_encoder = default_text_encoder(config);
      if (text_encoder->dim() != d) throw ConfigError("text encoder width does not match feature width");
      prompts_ = std::make_unique<tsp::PromptBank>(table, config.expressions, config.aus, std::move(text_encoder),
                                                   config.tsp, derive_seed(seed, "prompts"),
                                                   derive_seed(config.pretrained_seed, "token-embedding"));
      dpm::DpmConfig dc = config.dpm;
      if (config.variant == Variant::tsp) dc.mode = dpm::Mode::none;
      const Tensor w0 = facs::normalize_rows(facs::build_prior_matrix(table, config.expressions, config.aus));
      dpm_ = std::make_unique<dpm::DpmModule>(w0, dc, derive_seed(seed, "dpm"));
    } else {
      Rng rng(seed, "linear-heads");
      exp_head_ = objective::LinearHead("head.exp", config.expressions.size(), d, rng);
      au_head_ = objective::LinearHead("head.au", config.aus.size(), d, rng);
    }
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const noexcept { return config_; }
  bool uses_prototypes() const noexcept {
    return config_.variant == Variant::tsp || config_.variant == Variant::ssm;
  }
  std::size_t num_expressions() const noexcept { return config_.expressions.size(); }
  std::size_t num_aus() const noexcept { return config_.aus.size(); }

  /// Enhanced prototypes for both tasks; computed once per step.
  Prototypes prototypes(Tape& tape, Trace* trace = nullptr) {
    if (!uses_prototypes()) throw ConfigError("variant " + to_string(config_.variant) + " has no prototypes");
    Var t_exp = prompts_->expression_prototypes(tape);
    Var t_au = prompts_->au_prototypes(tape);
    note(trace, "prototypes.expression", t_exp);
    note(trace, "prototypes.au", t_au);
    auto [e, a] = dpm_->forward(tape, t_exp, t_au);
    note(trace, "prototypes.expression.enhanced", e);
    note(trace, "prototypes.au.enhanced", a);
    return {e, a};
  }

  /// B x K expression scores (cosine / tau, or linear logits).
  Var expression_scores(Tape& tape, const Tensor& frames, std::size_t n, const Prototypes* protos,
                        Trace* trace = nullptr) {
    Var f = encoder_->encode(tape, frames);
    note(trace, "features.expression", f);
    Var z = exp_block_->pooled(tape, f, n);
    note(trace, "clip.expression", z);
    Var s = head(tape, z, protos ? protos->expression : Var{}, exp_head_);
    note(trace, "scores.expression", s);
    return s;
  }

  /// B x M AU scores for the center frame of each clip.
  Var au_scores(Tape& tape, const Tensor& frames, std::size_t n, const Prototypes* protos, Trace* trace = nullptr) {
    Var f = (au_encoder_ ? *au_encoder_ : *encoder_).encode(tape, frames);
    note(trace, "features.au", f);
    Var z = au_block_->center(tape, f, n);
    note(trace, "clip.au", z);
    Var s = head(tape, z, protos ? protos->au : Var{}, au_head_);
    note(trace, "scores.au", s);
    return s;
  }

  /// Forward-only scoring of a whole dataset split, in chunks of clips.
  Tensor score(const backbone::ClipBatch& batch, std::size_t chunk_clips = 256) {
    const std::size_t n = batch.frames_per_clip;
    const std::size_t clips = batch.size();
    const std::size_t c = batch.task == backbone::TaskKind::expression ? num_expressions() : num_aus();
    Tensor out = Tensor::matrix(clips, c);
    for (std::size_t start = 0; start < clips; start += chunk_clips) {
      const std::size_t count = std::min(chunk_clips, clips - start);
      Tensor frames = Tensor::matrix(count * n, batch.frames.cols());
      std::copy_n(batch.frames.data() + start * n * frames.cols(), frames.size(), frames.data());
      Tape tape;
      Prototypes protos;
      if (uses_prototypes()) protos = prototypes(tape);
      const Prototypes* pp = uses_prototypes() ? &protos : nullptr;
      Var s = batch.task == backbone::TaskKind::expression ? expression_scores(tape, frames, n, pp)
                                                           : au_scores(tape, frames, n, pp);
      std::copy_n(s.value().data(), s.value().size(), out.data() + start * c);
    }
    return out;
  }

  backbone::FrameEncoder& encoder() { return *encoder_; }
  backbone::FrameEncoder& au_encoder() { return au_encoder_ ? *au_encoder_ : *encoder_; }
  backbone::TemporalBlock& expression_block() { return *exp_block_; }
  backbone::TemporalBlock& au_block() { return *au_block_; }
  tsp::PromptBank* prompts() { return prompts_.get(); }
  dpm::DpmModule* mapping() { return dpm_.get(); }
  objective::LinearHead& expression_head() { return exp_head_; }
  objective::LinearHead& au_head() { return au_head_; }

  /// Every parameter, frozen ones included, in a stable order.
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    auto take = [&](std::vector<Parameter*> ps) { out.insert(out.end(), ps.begin(), ps.end()); };
    take(encoder_->parameters());
    if (au_encoder_) take(au_encoder_->parameters());
    take(exp_block_->parameters());
    take(au_block_->parameters());
    if (uses_prototypes()) {
      take(prompts_->parameters());
      take(dpm_->parameters());
    } else {
      take(exp_head_.parameters());
      take(au_head_.parameters());
    }
    return out;
  }

  std::vector<Parameter*> trainable_parameters() {
    std::vector<Parameter*> out;
    for (Parameter* p : parameters())
      if (p->trainable) out.push_back(p);
    return out;
  }

  Parameter* find(std::string_view name) {
    for (Parameter* p : parameters())
      if (p->name == name) return p;
    return nullptr;
  }

 private:
  static void note(Trace* trace, const char* name, Var v) {
    if (trace) trace->emplace_back(name, v);
  }

  Var head(Tape& tape, Var z, Var prototypes, objective::LinearHead& linear) {
    if (uses_prototypes()) return objective::similarity_scores(z, prototypes, config_.tau);
    return objective::baseline_heads(z, tape.param(linear.weight), tape.param(linear.bias));
  }

  ModelConfig config_;
  std::unique_ptr<backbone::FrameEncoder> encoder_;
  std::unique_ptr<backbone::FrameEncoder> au_encoder_;
  std::unique_ptr<backbone::TemporalBlock> exp_block_;
  std::unique_ptr<backbone::TemporalBlock> au_block_;
  std::unique_ptr<tsp::PromptBank> prompts_;
  std::unique_ptr<dpm::DpmModule> dpm_;
  objective::LinearHead exp_head_;
  objective::LinearHead au_head_;
};

}  // namespace ssm::model
