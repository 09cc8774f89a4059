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
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssm/error.hpp"
#include "ssm/model.hpp"
#include "ssm/numerics/adamw.hpp"
#include "ssm/trainer/world.hpp"

namespace ssm::trainer {

/// Named learning-rate pairs (encoder, heads).
inline GroupRates preset_rates(std::string_view name) {
  if (name == "desk-rates") return {1e-3, 1e-2};
  if (name == "paper-rates") return {1e-6, 1e-4};
  throw ConfigError("unknown rate preset '" + std::string(name) + "' (expected desk-rates or paper-rates)");
}

/// Step decay: base * factor^floor(epoch / every), per group.
inline GroupRates lr_schedule(std::size_t epoch, const GroupRates& base, std::size_t every = 10,
                              double factor = 0.1) {
  const double scale = std::pow(factor, static_cast<double>(epoch / every));
  return {base.encoder * scale, base.head * scale};
}

struct ExperimentConfig {
  model::ModelConfig model{};
  double lambda = 2.0;

  std::string rate_preset = "desk-rates";
  GroupRates rates = preset_rates("desk-rates");
  AdamWConfig optimizer{};

  std::size_t epochs = 30;
  std::size_t decay_every = 10;
  double decay_factor = 0.1;
  std::size_t batch_dfer = 12;
  std::size_t batch_au = 128;

  std::uint64_t seed = 1;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  double fraction_expression = 1.0;
  double fraction_au = 1.0;

  SyntheticWorldSpec world{};
  std::uint64_t world_seed = 2026;

  std::size_t num_expressions() const { return model.expressions.size(); }
  std::size_t num_aus() const { return model.aus.size(); }

  /// The world spec with label sets and width taken from the model, and
  /// anchors derived from the model's frozen components.
  SyntheticWorldSpec resolved_world() const;
};

/// Raw-frame directions whose lifted image best matches each AU's centered
/// text prototype (least squares through the frozen lift).
inline Tensor pretrained_anchors(const model::ModelConfig& config) {
  const model::PretrainedView view = model::pretrained_view(config, facs::builtin_facs_table());
  Eigen::MatrixXd targets = view.au_text.mat().transpose();  // d x M
  targets.colwise() -= targets.rowwise().mean();
  const Eigen::MatrixXd raw = view.lift.mat().colPivHouseholderQr().solve(targets);  // d_raw x M
  Tensor out = Tensor::matrix(static_cast<std::size_t>(raw.rows()), static_cast<std::size_t>(raw.cols()));
  out.mat() = raw;
  return out;
}

inline SyntheticWorldSpec ExperimentConfig::resolved_world() const {
  SyntheticWorldSpec w = world;
  w.expressions = model.expressions;
  w.aus = model.aus;
  w.d_raw = model.backbone.d_raw;
  if (w.alignment > 0.0 && w.anchors.empty()) w.anchors = pretrained_anchors(model);
  return w;
}

// ---------------------------------------------------------------------------
// JSON

namespace detail {

/// 1-based line of the value for a dotted key path inside `text`, found by
/// scanning for each quoted segment in turn; 0 when not located.
inline std::size_t key_line(std::string_view text, const std::vector<std::string>& path) {
  std::size_t pos = 0;
  for (const auto& seg : path) {
    const std::string quoted = "\"" + seg + "\"";
    for (;;) {
      pos = text.find(quoted, pos);
      if (pos == std::string_view::npos) return 0;
      std::size_t after = pos + quoted.size();
      while (after < text.size() && std::isspace(static_cast<unsigned char>(text[after]))) ++after;
      if (after < text.size() && text[after] == ':') break;
      pos += quoted.size();
    }
  }
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(pos), '\n'));
}

inline std::size_t offset_line(std::string_view text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

/// Walks a parsed object and reports problems with their dotted key and
/// source line.
class Reader {
 public:
  Reader(std::string_view text, const nlohmann::json& root) : text_(text), root_(root) {}

  [[noreturn]] void fail(const std::vector<std::string>& path, const std::string& what) const {
    std::string dotted;
    for (const auto& p : path) dotted += (dotted.empty() ? "" : ".") + p;
    const std::size_t line = key_line(text_, path);
    throw ConfigError("config key '" + dotted + "'" + (line ? " (line " + std::to_string(line) + ")" : "") + ": " +
                      what);
  }

  /// Rejects keys of the object at `path` that are not in `allowed`.
  void only(const std::vector<std::string>& path, std::initializer_list<std::string_view> allowed) const {
    const nlohmann::json* obj = at(path);
    if (!obj) return;
    if (!obj->is_object()) fail(path, "expected an object");
    for (auto it = obj->begin(); it != obj->end(); ++it) {
      bool ok = false;
      for (auto a : allowed) ok = ok || it.key() == a;
      if (!ok) {
        auto p = path;
        p.push_back(it.key());
        fail(p, "unknown key");
      }
    }
  }

  const nlohmann::json* at(const std::vector<std::string>& path) const {
    const nlohmann::json* cur = &root_;
    for (const auto& seg : path) {
      if (!cur->is_object() || !cur->contains(seg)) return nullptr;
      cur = &(*cur)[seg];
    }
    return cur;
  }

  void number(const std::vector<std::string>& path, double& out) const {
    if (const auto* v = at(path)) {
      if (!v->is_number()) fail(path, "expected a number");
      out = v->get<double>();
    }
  }

  template <typename Int>
  void count(const std::vector<std::string>& path, Int& out) const {
    if (const auto* v = at(path)) {
      if (!v->is_number_unsigned()) fail(path, "expected a non-negative integer");
      out = v->get<Int>();
    }
  }

  void boolean(const std::vector<std::string>& path, bool& out) const {
    if (const auto* v = at(path)) {
      if (!v->is_boolean()) fail(path, "expected true or false");
      out = v->get<bool>();
    }
  }

  void string(const std::vector<std::string>& path, std::string& out) const {
    if (const auto* v = at(path)) {
      if (!v->is_string()) fail(path, "expected a string");
      out = v->get<std::string>();
    }
  }

  template <typename T>
  void list(const std::vector<std::string>& path, std::vector<T>& out) const {
    if (const auto* v = at(path)) {
      if (!v->is_array()) fail(path, "expected an array");
      try {
        out = v->get<std::vector<T>>();
      } catch (const nlohmann::json::exception&) {
        fail(path, "array has elements of the wrong type");
      }
    }
  }

  /// Parses a string-valued enum with `parse`, reporting failures at `path`.
  template <typename E, typename Parse>
  void choice(const std::vector<std::string>& path, E& out, Parse parse) const {
    std::string s;
    string(path, s);
    if (s.empty()) return;
    try {
      out = parse(s);
    } catch (const Error& e) {
      fail(path, e.what());
    }
  }

 private:
  std::string_view text_;
  const nlohmann::json& root_;
};

}  // namespace detail

/// Full configuration as JSON with every default materialized.
inline nlohmann::json to_json(const ExperimentConfig& c) {
  using nlohmann::json;
  const auto& b = c.model.backbone;
  const auto& w = c.world;
  json world{{"seed", c.world_seed},
             {"frames", w.frames},
             {"au_samples", w.au_samples},
             {"fe_samples", w.fe_samples},
             {"train_fraction", w.train_fraction},
             {"support_probability", w.support_probability},
             {"background_probability", w.background_probability},
             {"prevalence", w.prevalence},
             {"off_prior_mass", w.off_prior_mass},
             {"neutral_bias", w.neutral_bias},
             {"label_noise", w.label_noise},
             {"signal", w.signal},
             {"domain_shift", w.domain_shift},
             {"subject_noise", w.subject_noise},
             {"frame_noise", w.frame_noise},
             {"alignment", w.alignment}};
  return json{
      {"variant", model::to_string(c.model.variant)},
      {"seed", c.seed},
      {"seeds", c.seeds},
      {"pretrained_seed", c.model.pretrained_seed},
      {"expressions", c.model.expressions},
      {"aus", c.model.aus},
      {"lambda", c.lambda},
      {"tau", c.model.tau},
      {"tsp",
       {{"context_length", c.model.tsp.context_length},
        {"style", tsp::to_string(c.model.tsp.style)},
        {"token_dim", c.model.tsp.token_dim},
        {"context_std", c.model.tsp.context_std}}},
      {"dpm",
       {{"mode", dpm::to_string(c.model.dpm.mode)},
        {"init", dpm::to_string(c.model.dpm.init)},
        {"tau_m", c.model.dpm.tau_m},
        {"alpha0", c.model.dpm.alpha0},
        {"beta0", c.model.dpm.beta0},
        {"random_std", c.model.dpm.random_std}}},
      {"moe",
       {{"d_raw", b.d_raw},
        {"d", b.d},
        {"d_hidden", b.d_hidden},
        {"experts", b.experts},
        {"top_k", b.top_k},
        {"temporal_hidden", b.temporal_hidden},
        {"positional", b.positional}}},
      {"optimizer",
       {{"rate_preset", c.rate_preset},
        {"lr_encoder", c.rates.encoder},
        {"lr_heads", c.rates.head},
        {"weight_decay", c.optimizer.weight_decay},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"epsilon", c.optimizer.epsilon}}},
      {"schedule",
       {{"epochs", c.epochs},
        {"decay_every", c.decay_every},
        {"decay_factor", c.decay_factor},
        {"batch_dfer", c.batch_dfer},
        {"batch_au", c.batch_au}}},
      {"data_fraction", {{"expression", c.fraction_expression}, {"au", c.fraction_au}}},
      {"world", world},
  };
}

/// Parses a config document. Absent keys keep their defaults; unknown keys,
/// wrong types, and out-of-range values raise ConfigError naming the key and
/// its line.
inline ExperimentConfig parse_config(std::string_view text) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config is not valid JSON (line " + std::to_string(detail::offset_line(text, e.byte)) +
                      "): " + e.what());
  }
  if (!root.is_object()) throw ConfigError("config must be a JSON object");
  const detail::Reader r(text, root);
  r.only({}, {"variant", "seed", "seeds", "pretrained_seed", "expressions", "aus", "lambda", "tau", "tsp", "dpm", "moe", "optimizer",
              "schedule", "data_fraction", "world"});
  r.only({"tsp"}, {"context_length", "style", "token_dim", "context_std"});
  r.only({"dpm"}, {"mode", "init", "tau_m", "alpha0", "beta0", "random_std"});
  r.only({"moe"}, {"d_raw", "d", "d_hidden", "experts", "top_k", "temporal_hidden", "positional"});
  r.only({"optimizer"}, {"rate_preset", "lr_encoder", "lr_heads", "weight_decay", "beta1", "beta2", "epsilon"});
  r.only({"schedule"}, {"epochs", "decay_every", "decay_factor", "batch_dfer", "batch_au"});
  r.only({"data_fraction"}, {"expression", "au"});
  r.only({"world"}, {"seed", "frames", "au_samples", "fe_samples", "train_fraction", "support_probability",
                     "background_probability", "prevalence", "off_prior_mass", "neutral_bias", "label_noise",
                     "signal", "domain_shift", "subject_noise", "frame_noise", "alignment"});

  ExperimentConfig c;
  auto& m = c.model;
  r.choice({"variant"}, m.variant, model::parse_variant);
  r.count({"seed"}, c.seed);
  r.list({"seeds"}, c.seeds);
  r.count({"pretrained_seed"}, m.pretrained_seed);
  r.list({"expressions"}, m.expressions);
  r.list({"aus"}, m.aus);
  r.number({"lambda"}, c.lambda);
  r.number({"tau"}, m.tau);

  r.count({"tsp", "context_length"}, m.tsp.context_length);
  r.choice({"tsp", "style"}, m.tsp.style, tsp::parse_style);
  r.count({"tsp", "token_dim"}, m.tsp.token_dim);
  r.number({"tsp", "context_std"}, m.tsp.context_std);

  r.choice({"dpm", "mode"}, m.dpm.mode, dpm::parse_mode);
  r.choice({"dpm", "init"}, m.dpm.init, dpm::parse_init);
  r.number({"dpm", "tau_m"}, m.dpm.tau_m);
  r.number({"dpm", "alpha0"}, m.dpm.alpha0);
  r.number({"dpm", "beta0"}, m.dpm.beta0);
  r.number({"dpm", "random_std"}, m.dpm.random_std);

  auto& b = m.backbone;
  r.count({"moe", "d_raw"}, b.d_raw);
  r.count({"moe", "d"}, b.d);
  r.count({"moe", "d_hidden"}, b.d_hidden);
  r.count({"moe", "experts"}, b.experts);
  r.count({"moe", "top_k"}, b.top_k);
  r.count({"moe", "temporal_hidden"}, b.temporal_hidden);
  r.boolean({"moe", "positional"}, b.positional);

  r.string({"optimizer", "rate_preset"}, c.rate_preset);
  try {
    c.rates = preset_rates(c.rate_preset);
  } catch (const ConfigError& e) {
    r.fail({"optimizer", "rate_preset"}, e.what());
  }
  r.number({"optimizer", "lr_encoder"}, c.rates.encoder);
  r.number({"optimizer", "lr_heads"}, c.rates.head);
  r.number({"optimizer", "weight_decay"}, c.optimizer.weight_decay);
  r.number({"optimizer", "beta1"}, c.optimizer.beta1);
  r.number({"optimizer", "beta2"}, c.optimizer.beta2);
  r.number({"optimizer", "epsilon"}, c.optimizer.epsilon);

  r.count({"schedule", "epochs"}, c.epochs);
  r.count({"schedule", "decay_every"}, c.decay_every);
  r.number({"schedule", "decay_factor"}, c.decay_factor);
  r.count({"schedule", "batch_dfer"}, c.batch_dfer);
  r.count({"schedule", "batch_au"}, c.batch_au);

  r.number({"data_fraction", "expression"}, c.fraction_expression);
  r.number({"data_fraction", "au"}, c.fraction_au);

  auto& w = c.world;
  r.count({"world", "seed"}, c.world_seed);
  r.count({"world", "frames"}, w.frames);
  r.count({"world", "au_samples"}, w.au_samples);
  r.count({"world", "fe_samples"}, w.fe_samples);
  r.number({"world", "train_fraction"}, w.train_fraction);
  r.number({"world", "support_probability"}, w.support_probability);
  r.number({"world", "background_probability"}, w.background_probability);
  r.list({"world", "prevalence"}, w.prevalence);
  r.number({"world", "off_prior_mass"}, w.off_prior_mass);
  r.number({"world", "neutral_bias"}, w.neutral_bias);
  r.number({"world", "label_noise"}, w.label_noise);
  r.number({"world", "signal"}, w.signal);
  r.number({"world", "domain_shift"}, w.domain_shift);
  r.number({"world", "subject_noise"}, w.subject_noise);
  r.number({"world", "frame_noise"}, w.frame_noise);
  r.number({"world", "alignment"}, w.alignment);

  // Range checks, reported against the key that carries the value.
  auto positive = [&](std::vector<std::string> path, double v) {
    if (!(v > 0.0) || !std::isfinite(v)) r.fail(path, "must be positive");
  };
  auto non_negative = [&](std::vector<std::string> path, double v) {
    if (!(v >= 0.0) || !std::isfinite(v)) r.fail(path, "must be non-negative");
  };
  auto fraction = [&](std::vector<std::string> path, double v) {
    if (!(v > 0.0 && v <= 1.0)) r.fail(path, "must lie in (0, 1]");
  };
  positive({"tau"}, m.tau);
  positive({"dpm", "tau_m"}, m.dpm.tau_m);
  non_negative({"lambda"}, c.lambda);
  non_negative({"optimizer", "lr_encoder"}, c.rates.encoder);
  non_negative({"optimizer", "lr_heads"}, c.rates.head);
  non_negative({"optimizer", "weight_decay"}, c.optimizer.weight_decay);
  positive({"optimizer", "epsilon"}, c.optimizer.epsilon);
  if (!(c.optimizer.beta1 >= 0.0 && c.optimizer.beta1 < 1.0)) r.fail({"optimizer", "beta1"}, "must lie in [0, 1)");
  if (!(c.optimizer.beta2 >= 0.0 && c.optimizer.beta2 < 1.0)) r.fail({"optimizer", "beta2"}, "must lie in [0, 1)");
  if (c.decay_every == 0) r.fail({"schedule", "decay_every"}, "must be at least 1");
  fraction({"schedule", "decay_factor"}, c.decay_factor);
  if (c.batch_dfer == 0) r.fail({"schedule", "batch_dfer"}, "must be at least 1");
  if (c.batch_au == 0) r.fail({"schedule", "batch_au"}, "must be at least 1");
  fraction({"data_fraction", "expression"}, c.fraction_expression);
  fraction({"data_fraction", "au"}, c.fraction_au);
  if (c.seeds.empty()) r.fail({"seeds"}, "must list at least one seed");
  if (m.expressions.empty()) r.fail({"expressions"}, "must not be empty");
  if (m.aus.empty()) r.fail({"aus"}, "must not be empty");
  if (b.top_k == 0 || b.top_k > b.experts) r.fail({"moe", "top_k"}, "must lie in [1, experts]");
  for (auto [key, v] : {std::pair{"d_raw", b.d_raw}, {"d", b.d}, {"d_hidden", b.d_hidden}, {"experts", b.experts},
                        {"temporal_hidden", b.temporal_hidden}}) {
    if (v == 0) r.fail({"moe", key}, "must be at least 1");
  }
  if (m.tsp.token_dim == 0) r.fail({"tsp", "token_dim"}, "must be at least 1");
  if (w.frames == 0) r.fail({"world", "frames"}, "must be at least 1");
  return c;
}

inline ExperimentConfig default_config() { return ExperimentConfig{}; }

}  // namespace ssm::trainer
