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
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ssm/model.hpp"
#include "ssm/numerics/adamw.hpp"
#include "ssm/numerics/grad_check.hpp"
#include "ssm/objective.hpp"
#include "ssm/trainer/config.hpp"
#include "ssm/trainer/container.hpp"
#include "ssm/trainer/world.hpp"

namespace ssm::trainer {

struct EpochLoss {
  double total = 0.0;
  double expression = 0.0;
  double au = 0.0;
};

/// Raw mapping matrices at one point of the run; epoch 0 is the
/// initialization, epoch e the state after e epochs.
struct MappingSnapshot {
  std::size_t epoch = 0;
  Tensor w_au_to_exp;  // K x M
  Tensor w_exp_to_au;  // M x K
};

struct StepCounters {
  std::size_t steps = 0;
  std::size_t expression_batches = 0;
  std::size_t au_batches = 0;
};

struct RunState {
  ExperimentConfig config;
  std::unique_ptr<model::Model> model;
  std::unique_ptr<AdamW> optimizer;
  std::vector<EpochLoss> curve;
  std::vector<MappingSnapshot> snapshots;
  objective::MetricsReport expression_metrics;
  objective::MetricsReport au_metrics;
  StepCounters counters;
};

struct TrainOptions {
  bool evaluate = true;
  /// Called after each epoch with the epoch index and its mean losses.
  std::function<void(std::size_t, const EpochLoss&)> on_epoch;
};

/// Builds the model a config describes, seeded by `config.seed`.
inline std::unique_ptr<model::Model> build_model(const ExperimentConfig& config) {
  return std::make_unique<model::Model>(config.model, facs::builtin_facs_table(), config.seed);
}

/// Fraction-limited training subset: the first ceil(f * N) clips.
inline Dataset training_subset(const Dataset& train, double fraction) {
  const auto n = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(train.size()) - 1e-9));
  return train.head(std::max<std::size_t>(1, n));
}

/// Cycles through a dataset in reshuffled passes. Batches may straddle a
/// pass boundary, so every batch holds exactly `batch` clips.
class BatchCursor {
 public:
  BatchCursor(std::size_t size, std::size_t batch, Rng rng) : batch_(batch), rng_(std::move(rng)) {
    order_.resize(size);
    for (std::size_t i = 0; i < size; ++i) order_[i] = i;
    rng_.shuffle(order_);
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    out.reserve(batch_);
    while (out.size() < batch_) {
      if (pos_ == order_.size()) {
        rng_.shuffle(order_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

  /// Batches per full pass, rounded up.
  std::size_t batches_per_pass() const { return (order_.size() + batch_ - 1) / batch_; }

 private:
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  std::size_t batch_;
  Rng rng_;
};

namespace detail {

inline std::string first_non_finite(const model::Trace& trace) {
  for (const auto& [name, v] : trace)
    if (!v.value().all_finite()) return name;
  return {};
}

inline void snapshot(RunState& s, std::size_t epoch) {
  dpm::DpmModule* m = s.model->mapping();
  if (!m || !m->has_mapping_matrices()) return;
  s.snapshots.push_back({epoch, m->w_au_to_exp(), m->w_exp_to_au()});
}

}  // namespace detail

/// Test-split metrics for both tasks.
inline void evaluate(RunState& state, const World& world) {
  state.expression_metrics = objective::expression_report(state.model->score(world.fe_test.all()), world.fe_test.labels);
  state.au_metrics = objective::au_report(state.model->score(world.au_test.all()), world.au_test.labels);
}

struct StepLoss {
  Var expression;
  Var au;
  Var total;
};

/// Loss weights for one step: unit weights for single-task learning, the
/// lambda split otherwise.
inline std::pair<double, double> step_weights(const ExperimentConfig& config) {
  if (config.model.variant == model::Variant::stl) return {1.0, 1.0};
  return objective::task_weights(config.lambda);
}

/// Forward pass of one training step on a pair of batches. Every named
/// intermediate goes into `trace`; when an op rejects non-finite input the
/// error names the traced tensor where the values first went bad.
inline StepLoss step_loss(model::Model& net, const ExperimentConfig& config, const backbone::ClipBatch& fe_batch,
                          const backbone::ClipBatch& au_batch, Tape& tape, model::Trace& trace) {
  StepLoss out;
  try {
    model::Prototypes protos;
    const model::Prototypes* pp = nullptr;
    if (net.uses_prototypes()) {
      protos = net.prototypes(tape, &trace);
      pp = &protos;
    }
    out.expression = objective::dfer_loss(
        net.expression_scores(tape, fe_batch.frames, fe_batch.frames_per_clip, pp, &trace), fe_batch.labels);
    out.au = objective::au_loss(net.au_scores(tape, au_batch.frames, au_batch.frames_per_clip, pp, &trace),
                                au_batch.labels);
  } catch (const Error& e) {
    if (const std::string bad = detail::first_non_finite(trace); !bad.empty()) {
      throw NumericError("non-finite values in '" + bad + "' (" + e.what() + ")");
    }
    throw;
  }
  trace.emplace_back("loss.expression", out.expression);
  trace.emplace_back("loss.au", out.au);

  // A zero task weight drops that loss from the graph, so parameters only it
  // reaches get no gradient and are skipped by the optimizer.
  const auto [w_exp, w_au] = step_weights(config);
  if (w_au == 0.0) {
    out.total = scale(out.expression, w_exp);
  } else if (w_exp == 0.0) {
    out.total = scale(out.au, w_au);
  } else {
    out.total = add(scale(out.expression, w_exp), scale(out.au, w_au));
  }
  trace.emplace_back("loss.total", out.total);
  return out;
}

/// Finite-difference check of the full training loss with respect to every
/// trainable parameter of a freshly built model, on the first `clips` clips
/// of each training set.
inline GradCheckReport model_grad_check(const ExperimentConfig& config, const World& world, std::size_t clips = 2,
                                        GradCheckOptions options = {}) {
  auto net = build_model(config);
  const backbone::ClipBatch fe = world.fe_train.head(clips).all();
  const backbone::ClipBatch au = world.au_train.head(clips).all();
  const ScalarFunction f = [&](Tape& tape) {
    model::Trace trace;
    return step_loss(*net, config, fe, au, tape, trace).total;
  };
  return grad_check(f, net->trainable_parameters(), options);
}

/// Runs the configured number of epochs. Each step draws one expression
/// batch and one AU batch, forms the weighted total loss and takes a single
/// optimizer step over every trainable parameter. An epoch is one pass over
/// the training set with fewer clips; the other one cycles.
inline RunState train(const ExperimentConfig& config, const World& world, const TrainOptions& options = {}) {
  RunState s;
  s.config = config;
  s.model = build_model(config);
  s.optimizer = std::make_unique<AdamW>(s.model->trainable_parameters(), config.optimizer);
  model::Model& net = *s.model;

  const Dataset fe = training_subset(world.fe_train, config.fraction_expression);
  const Dataset au = training_subset(world.au_train, config.fraction_au);
  BatchCursor fe_cursor(fe.size(), config.batch_dfer, Rng(config.seed, "batches.expression"));
  BatchCursor au_cursor(au.size(), config.batch_au, Rng(config.seed, "batches.au"));
  const std::size_t steps_per_epoch =
      fe.size() <= au.size() ? fe_cursor.batches_per_pass() : au_cursor.batches_per_pass();

  detail::snapshot(s, 0);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const GroupRates rates = lr_schedule(epoch, config.rates, config.decay_every, config.decay_factor);
    EpochLoss sum;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      const backbone::ClipBatch fe_batch = fe.gather(fe_cursor.next());
      const backbone::ClipBatch au_batch = au.gather(au_cursor.next());
      for (Parameter* p : s.optimizer->parameters()) p->zero_grad();
      const std::string where = " at epoch " + std::to_string(epoch) + ", step " + std::to_string(step);

      Tape tape;
      model::Trace trace;
      StepLoss loss;
      try {
        loss = step_loss(net, config, fe_batch, au_batch, tape, trace);
      } catch (const NumericError& e) {
        throw NumericError(e.what() + where);
      }
      if (const std::string bad = detail::first_non_finite(trace); !bad.empty()) {
        throw NumericError("non-finite values in '" + bad + "'" + where);
      }
      tape.backward(loss.total);
      for (Parameter* p : s.optimizer->parameters()) {
        if (p->has_grad && !p->grad.all_finite()) {
          throw NumericError("non-finite gradient for '" + p->name + "'" + where);
        }
      }
      s.optimizer->step(rates);

      ++s.counters.steps;
      ++s.counters.expression_batches;
      ++s.counters.au_batches;
      sum.total += loss.total.value()[0];
      sum.expression += loss.expression.value()[0];
      sum.au += loss.au.value()[0];
    }
    const double denom = static_cast<double>(std::max<std::size_t>(1, steps_per_epoch));
    const EpochLoss mean{sum.total / denom, sum.expression / denom, sum.au / denom};
    s.curve.push_back(mean);
    detail::snapshot(s, epoch + 1);
    if (options.on_epoch) options.on_epoch(epoch, mean);
  }
  if (options.evaluate) evaluate(s, world);
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Every parameter (frozen ones included), optimizer moments with their step
/// counts, loss curves, mapping snapshots and step counters.
inline std::vector<io::NamedTensor> checkpoint_blobs(const RunState& s) {
  std::vector<io::NamedTensor> out;
  for (Parameter* p : s.model->parameters()) out.push_back({p->name, p->value});
  const auto& params = s.optimizer->parameters();
  const auto& moments = s.optimizer->moments();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const AdamMoments& m = moments[i];
    out.push_back({"adam.step/" + params[i]->name, Tensor::scalar(static_cast<double>(m.steps))});
    if (m.steps == 0) continue;
    out.push_back({"adam.m/" + params[i]->name, m.first});
    out.push_back({"adam.v/" + params[i]->name, m.second});
  }
  const std::size_t e = s.curve.size();
  Tensor curve = Tensor::matrix(e, 3);
  for (std::size_t i = 0; i < e; ++i) {
    curve(i, 0) = s.curve[i].total;
    curve(i, 1) = s.curve[i].expression;
    curve(i, 2) = s.curve[i].au;
  }
  out.push_back({"run.loss_curve", curve});
  out.push_back({"run.counters", Tensor::row({static_cast<double>(s.counters.steps),
                                              static_cast<double>(s.counters.expression_batches),
                                              static_cast<double>(s.counters.au_batches)})});
  for (const auto& snap : s.snapshots) {
    out.push_back({"snapshot." + std::to_string(snap.epoch) + ".w_au_to_exp", snap.w_au_to_exp});
    out.push_back({"snapshot." + std::to_string(snap.epoch) + ".w_exp_to_au", snap.w_exp_to_au});
  }
  return out;
}

inline std::string encode_checkpoint(const RunState& s) {
  return io::encode_container(io::kCheckpointMagic, checkpoint_blobs(s));
}

inline void save_checkpoint(const RunState& s, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_checkpoint(s));
}

/// Rebuilds a RunState for `config` and overwrites its parameters, moments,
/// curves and counters from a checkpoint. Metrics are not stored and are
/// left empty.
inline RunState load_checkpoint(const ExperimentConfig& config, const std::filesystem::path& path) {
  const auto blobs = io::read_container(path, io::kCheckpointMagic);
  RunState s;
  s.config = config;
  s.model = build_model(config);
  s.optimizer = std::make_unique<AdamW>(s.model->trainable_parameters(), config.optimizer);
  for (Parameter* p : s.model->parameters()) {
    const Tensor& v = io::find_blob(blobs, p->name);
    if (v.shape() != p->value.shape()) {
      throw IoError("checkpoint blob '" + p->name + "' has shape " + shape_string(v.shape()) + ", model expects " +
                    shape_string(p->value.shape()));
    }
    p->value = v;
  }
  const auto& params = s.optimizer->parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    AdamMoments& m = s.optimizer->moments()[i];
    m.steps = static_cast<std::size_t>(io::find_blob(blobs, "adam.step/" + params[i]->name)[0]);
    if (m.steps == 0) continue;
    m.first = io::find_blob(blobs, "adam.m/" + params[i]->name);
    m.second = io::find_blob(blobs, "adam.v/" + params[i]->name);
  }
  const Tensor& curve = io::find_blob(blobs, "run.loss_curve");
  for (std::size_t i = 0; i < curve.rows(); ++i) s.curve.push_back({curve(i, 0), curve(i, 1), curve(i, 2)});
  const Tensor& c = io::find_blob(blobs, "run.counters");
  s.counters = {static_cast<std::size_t>(c[0]), static_cast<std::size_t>(c[1]), static_cast<std::size_t>(c[2])};
  for (const auto& b : blobs) {
    const std::string prefix = "snapshot.", suffix = ".w_au_to_exp";
    if (b.name.rfind(prefix, 0) != 0 || b.name.size() < suffix.size() ||
        b.name.compare(b.name.size() - suffix.size(), suffix.size(), suffix) != 0) {
      continue;
    }
    const std::string epoch = b.name.substr(prefix.size(), b.name.size() - prefix.size() - suffix.size());
    s.snapshots.push_back({static_cast<std::size_t>(std::stoull(epoch)), b.value,
                           io::find_blob(blobs, prefix + epoch + ".w_exp_to_au")});
  }
  return s;
}

// ---------------------------------------------------------------------------
// Dataset files

inline std::vector<io::NamedTensor> dataset_blobs(const World& w) {
  std::vector<io::NamedTensor> out;
  out.push_back({"world.generator", w.generator});
  out.push_back({"world.label_bias", Tensor::row(w.label_bias)});
  out.push_back({"world.map_au", w.map_au});
  out.push_back({"world.map_fe", w.map_fe});
  out.push_back({"world.frames_per_clip", Tensor::scalar(static_cast<double>(w.spec.frames))});
  auto add = [&](const std::string& name, const Dataset& d) {
    out.push_back({name + ".frames", d.frames});
    out.push_back({name + ".labels", d.labels});
    out.push_back({name + ".latents", d.latents});
  };
  add("au_train", w.au_train);
  add("au_test", w.au_test);
  add("fe_train", w.fe_train);
  add("fe_test", w.fe_test);
  return out;
}

inline void save_world(const World& w, const std::filesystem::path& path) {
  io::write_container(path, io::kDatasetMagic, dataset_blobs(w));
}

/// Reads a dataset file written by save_world. `spec` supplies the label
/// sets and knobs, which the file does not carry.
inline World load_world(const SyntheticWorldSpec& spec, const std::filesystem::path& path) {
  const auto blobs = io::read_container(path, io::kDatasetMagic);
  World w;
  w.spec = spec;
  w.spec.frames = static_cast<std::size_t>(io::find_blob(blobs, "world.frames_per_clip")[0]);
  w.generator = io::find_blob(blobs, "world.generator");
  const auto bias = io::find_blob(blobs, "world.label_bias").values();
  w.label_bias.assign(bias.begin(), bias.end());
  w.map_au = io::find_blob(blobs, "world.map_au");
  w.map_fe = io::find_blob(blobs, "world.map_fe");
  auto get = [&](const std::string& name, backbone::TaskKind task, int domain) {
    Dataset d;
    d.task = task;
    d.domain_id = domain;
    d.frames_per_clip = w.spec.frames;
    d.frames = io::find_blob(blobs, name + ".frames");
    d.labels = io::find_blob(blobs, name + ".labels");
    d.latents = io::find_blob(blobs, name + ".latents");
    return d;
  };
  w.au_train = get("au_train", backbone::TaskKind::au, 0);
  w.au_test = get("au_test", backbone::TaskKind::au, 0);
  w.fe_train = get("fe_train", backbone::TaskKind::expression, 1);
  w.fe_test = get("fe_test", backbone::TaskKind::expression, 1);
  check_label_consistency(w);
  return w;
}

}  // namespace ssm::trainer
