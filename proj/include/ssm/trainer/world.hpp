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
#include <string>
#include <vector>

#include "ssm/backbone.hpp"
#include "ssm/error.hpp"
#include "ssm/facs.hpp"
#include "ssm/numerics/rng.hpp"
#include "ssm/numerics/tensor.hpp"

namespace ssm::trainer {

/// Knobs of the synthetic heterogeneous world. Each clip is driven by a
/// latent binary AU vector `a`. AU clips are labeled with `a` directly;
/// expression clips are labeled argmax_k(G_k . a + bias_k + u_k) with
/// u_k ~ U(-label_noise, label_noise), where G is the generator matrix and
/// only Neutral carries a bias.
struct SyntheticWorldSpec {
  std::vector<std::string> expressions = facs::basic_expressions();
  std::vector<int> aus = facs::bp4d_aus();
  std::size_t d_raw = 32;
  std::size_t frames = 16;

  std::size_t au_samples = 1024;
  std::size_t fe_samples = 480;
  double train_fraction = 0.5;

  /// Latents are drawn around a uniformly chosen hidden expression: AUs on
  /// its prior support fire with `support_probability`, the rest with their
  /// prevalence entry (or `background_probability` when the vector is empty).
  double support_probability = 0.85;
  double background_probability = 0.08;
  std::vector<double> prevalence;

  /// Share of every generator row placed off the prior support.
  double off_prior_mass = 0.1;
  double neutral_bias = 0.3;
  double label_noise = 0.05;

  /// Observation model: x_t = A_dom (a * amp * env_t) + b_dom + s + noise.
  double signal = 1.0;
  double domain_shift = 0.5;
  double subject_noise = 0.5;
  double frame_noise = 0.5;

  /// Optional K x M generator override; empty means prior plus off-prior noise.
  Tensor generator;

  /// Optional d_raw x M directions tied to the frozen text prototypes. The
  /// shared AU signatures blend them in with weight `alignment`, standing in
  /// for a vision encoder pretrained jointly with its text encoder.
  Tensor anchors;
  double alignment = 0.5;
};

/// One split of one synthetic dataset.
struct Dataset {
  backbone::TaskKind task = backbone::TaskKind::au;
  std::size_t frames_per_clip = 0;
  int domain_id = 0;
  Tensor frames;   // (N * n) x d_raw
  Tensor labels;   // N x M binary, or N x K one-hot
  Tensor latents;  // N x M latent activations behind each clip

  std::size_t size() const { return frames_per_clip ? frames.rows() / frames_per_clip : 0; }

  backbone::ClipBatch gather(const std::vector<std::size_t>& clips) const {
    backbone::ClipBatch b;
    b.frames_per_clip = frames_per_clip;
    b.task = task;
    b.domain_id = domain_id;
    const std::size_t w = frames.cols(), n = frames_per_clip;
    b.frames = Tensor::matrix(clips.size() * n, w);
    b.labels = Tensor::matrix(clips.size(), labels.cols());
    for (std::size_t i = 0; i < clips.size(); ++i) {
      std::copy_n(frames.data() + clips[i] * n * w, n * w, b.frames.data() + i * n * w);
      std::copy_n(labels.data() + clips[i] * labels.cols(), labels.cols(), b.labels.data() + i * labels.cols());
    }
    return b;
  }

  backbone::ClipBatch all() const {
    return backbone::ClipBatch{frames, frames_per_clip, task, labels, domain_id};
  }

  /// The first `count` clips.
  Dataset head(std::size_t count) const {
    count = std::min(count, size());
    Dataset d = *this;
    auto cut = [](const Tensor& t, std::size_t rows) {
      Tensor out = Tensor::matrix(rows, t.cols());
      std::copy_n(t.data(), out.size(), out.data());
      return out;
    };
    d.frames = cut(frames, count * frames_per_clip);
    d.labels = cut(labels, count);
    d.latents = cut(latents, count);
    return d;
  }
};

struct World {
  SyntheticWorldSpec spec;
  Tensor generator;              // K x M
  std::vector<double> label_bias;  // K
  Tensor map_au;                 // d_raw x M, domain A
  Tensor map_fe;                 // d_raw x M, domain B
  Dataset au_train, au_test;
  Dataset fe_train, fe_test;
};

inline std::size_t neutral_index(const std::vector<std::string>& expressions) {
  const auto it = std::find(expressions.begin(), expressions.end(), "Neutral");
  return it == expressions.end() ? expressions.size() : static_cast<std::size_t>(it - expressions.begin());
}

/// Rows of the prior placed at weight 1 - off_prior_mass, with the remaining
/// mass spread at random over the AUs outside each row's support.
inline Tensor default_generator(const facs::PriorMatrix& prior, double off_prior_mass, Rng& rng) {
  const Tensor w0 = facs::normalize_rows(prior);
  Tensor g = Tensor::matrix(w0.rows(), w0.cols());
  for (std::size_t k = 0; k < w0.rows(); ++k) {
    std::vector<double> off(w0.cols(), 0.0);
    double off_sum = 0.0, on_sum = 0.0;
    for (std::size_t m = 0; m < w0.cols(); ++m) {
      on_sum += w0(k, m);
      if (prior.P(k, m) == 0.0) off_sum += off[m] = rng.uniform(0.05, 1.0);
    }
    const double on_share = on_sum > 0.0 ? 1.0 - off_prior_mass : 0.0;
    for (std::size_t m = 0; m < w0.cols(); ++m) {
      g(k, m) = on_share * w0(k, m) + (off_sum > 0.0 ? off_prior_mass * off[m] / off_sum : 0.0);
    }
  }
  return g;
}

inline void validate(const SyntheticWorldSpec& spec, const Tensor& generator) {
  const std::size_t k = spec.expressions.size(), m = spec.aus.size();
  if (k == 0 || m == 0) throw SpecError("world needs at least one expression and one AU");
  if (spec.frames == 0 || spec.d_raw == 0) throw SpecError("world frames and d_raw must be positive");
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) throw SpecError("train_fraction must lie in (0,1)");
  const auto train_count = [&](std::size_t n) { return static_cast<std::size_t>(std::llround(n * spec.train_fraction)); };
  for (std::size_t n : {spec.au_samples, spec.fe_samples}) {
    if (train_count(n) == 0 || train_count(n) == n) throw SpecError("every split needs at least one clip");
  }
  for (double p : {spec.support_probability, spec.background_probability, spec.off_prior_mass}) {
    if (!(p >= 0.0 && p <= 1.0)) throw SpecError("probabilities must lie in [0,1]");
  }
  if (!spec.prevalence.empty() && spec.prevalence.size() != m) throw SpecError("prevalence needs one entry per AU");
  if (spec.label_noise < 0.0 || spec.frame_noise < 0.0 || spec.subject_noise < 0.0 || spec.domain_shift < 0.0) {
    throw SpecError("noise levels must be non-negative");
  }
  if (!(spec.alignment >= 0.0 && spec.alignment <= 1.0)) throw SpecError("alignment must lie in [0,1]");
  if (!spec.anchors.empty() && spec.anchors.shape() != Shape{spec.d_raw, m}) {
    throw SpecError("anchors have shape " + shape_string(spec.anchors.shape()) + ", expected [" +
                    std::to_string(spec.d_raw) + "," + std::to_string(m) + "]");
  }
  if (generator.shape() != Shape{k, m}) {
    throw SpecError("generator has shape " + shape_string(generator.shape()) + ", expected [" + std::to_string(k) +
                    "," + std::to_string(m) + "]");
  }
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i + 1; j < k; ++j) {
      bool same = true;
      for (std::size_t c = 0; c < m && same; ++c) same = generator(i, c) == generator(j, c);
      if (same) {
        throw SpecError("degenerate generator: rows for " + spec.expressions[i] + " and " + spec.expressions[j] +
                        " are identical");
      }
    }
  }
}

/// Noise-free class scores G a + bias for one latent vector.
inline std::vector<double> generator_scores(const Tensor& generator, const std::vector<double>& bias,
                                            std::span<const double> latent) {
  std::vector<double> s(generator.rows());
  for (std::size_t k = 0; k < generator.rows(); ++k) {
    double acc = bias[k];
    for (std::size_t m = 0; m < generator.cols(); ++m) acc += generator(k, m) * latent[m];
    s[k] = acc;
  }
  return s;
}

/// Brute-force consistency check of every expression label against its
/// latent AUs. With bounded noise the labeled class must be within twice
/// the noise bound of the best score; without noise it must be the argmax
/// (lowest index on ties).
inline void check_label_consistency(const World& world) {
  const double slack = 2.0 * world.spec.label_noise;
  for (const Dataset* d : {&world.fe_train, &world.fe_test}) {
    for (std::size_t i = 0; i < d->size(); ++i) {
      const auto s = generator_scores(world.generator, world.label_bias, d->latents.row_span(i));
      std::size_t label = 0;
      while (d->labels(i, label) != 1.0) ++label;
      const auto best = static_cast<std::size_t>(std::max_element(s.begin(), s.end()) - s.begin());
      const bool ok = slack == 0.0 ? label == best : s[label] + slack >= s[best];
      if (!ok) throw SpecError("expression label of clip " + std::to_string(i) + " contradicts its latent AUs");
    }
  }
}

namespace detail {

/// Shared AU signatures, d_raw x M, each column of norm sqrt(d_raw): random
/// directions, blended with the anchors when the spec provides them.
inline Tensor shared_signatures(const SyntheticWorldSpec& spec, Rng& rng) {
  const std::size_t d = spec.d_raw, m = spec.aus.size();
  Tensor out = rng.normal_matrix(d, m, 1.0);
  const double target = std::sqrt(static_cast<double>(d));
  auto unit_column = [&](const Tensor& t, std::size_t j) {
    std::vector<double> col(d);
    double norm = 0.0;
    for (std::size_t r = 0; r < d; ++r) norm += t(r, j) * t(r, j);
    norm = std::sqrt(norm);
    if (norm == 0.0) throw SpecError("anchor column " + std::to_string(j) + " is zero");
    for (std::size_t r = 0; r < d; ++r) col[r] = t(r, j) / norm;
    return col;
  };
  for (std::size_t j = 0; j < m; ++j) {
    std::vector<double> col = unit_column(out, j);
    if (!spec.anchors.empty()) {
      const std::vector<double> anchor = unit_column(spec.anchors, j);
      const double a = std::sqrt(spec.alignment), b = std::sqrt(1.0 - spec.alignment);
      for (std::size_t r = 0; r < d; ++r) col[r] = a * anchor[r] + b * col[r];
      double norm = 0.0;
      for (double v : col) norm += v * v;
      for (double& v : col) v /= std::sqrt(norm);
    }
    for (std::size_t r = 0; r < d; ++r) out(r, j) = target * col[r];
  }
  return out;
}

inline Tensor domain_map(const Tensor& shared, double shift, double signal, Rng& rng) {
  Tensor map = shared;
  const double scale = signal / std::sqrt(static_cast<double>(shared.rows()));
  for (double& v : map.values()) v = scale * (v + shift * rng.normal());
  return map;
}

inline Dataset sample_clips(const World& w, backbone::TaskKind task, std::size_t count, const Tensor& map, int domain,
                            Rng& rng) {
  const SyntheticWorldSpec& spec = w.spec;
  const std::size_t k = spec.expressions.size(), m = spec.aus.size(), n = spec.frames, d = spec.d_raw;
  const facs::PriorMatrix prior = facs::build_prior_matrix(facs::builtin_facs_table(), spec.expressions, spec.aus);

  Tensor bias(Shape{d});
  for (double& v : bias.values()) v = spec.domain_shift * rng.normal();

  Dataset out;
  out.task = task;
  out.frames_per_clip = n;
  out.domain_id = domain;
  out.frames = Tensor::matrix(count * n, d);
  out.labels = Tensor::matrix(count, task == backbone::TaskKind::au ? m : k);
  out.latents = Tensor::matrix(count, m);

  const double center = static_cast<double>(backbone::center_index(n));
  const double width = std::max(1.0, static_cast<double>(n) / 4.0);
  std::vector<double> drive(m), subject(d);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t hidden = rng.index(k);
    for (std::size_t j = 0; j < m; ++j) {
      const double p = prior.P(hidden, j) != 0.0 ? spec.support_probability
                       : spec.prevalence.empty() ? spec.background_probability
                                                 : spec.prevalence[j];
      out.latents(i, j) = rng.bernoulli(p) ? 1.0 : 0.0;
      drive[j] = out.latents(i, j) * rng.uniform(0.6, 1.4);
    }
    if (task == backbone::TaskKind::au) {
      for (std::size_t j = 0; j < m; ++j) out.labels(i, j) = out.latents(i, j);
    } else {
      auto s = generator_scores(w.generator, w.label_bias, out.latents.row_span(i));
      for (double& v : s) v += rng.uniform(-spec.label_noise, spec.label_noise);
      out.labels(i, static_cast<std::size_t>(std::max_element(s.begin(), s.end()) - s.begin())) = 1.0;
    }
    for (double& v : subject) v = spec.subject_noise * rng.normal();
    for (std::size_t t = 0; t < n; ++t) {
      const double dt = (static_cast<double>(t) - center) / width;
      const double env = std::exp(-0.5 * dt * dt);
      auto row = out.frames.row_span(i * n + t);
      for (std::size_t c = 0; c < d; ++c) {
        double acc = bias[c] + subject[c] + spec.frame_noise * rng.normal();
        for (std::size_t j = 0; j < m; ++j) acc += map(c, j) * drive[j] * env;
        row[c] = acc;
      }
    }
  }
  return out;
}

inline std::pair<Dataset, Dataset> split(const Dataset& all, double train_fraction) {
  const std::size_t n_train = static_cast<std::size_t>(std::llround(all.size() * train_fraction));
  Dataset train = all.head(n_train);
  Dataset test = all;
  const std::size_t n_test = all.size() - n_train, f = all.frames_per_clip;
  auto tail = [&](const Tensor& t, std::size_t rows_per_clip) {
    Tensor out = Tensor::matrix(n_test * rows_per_clip, t.cols());
    std::copy_n(t.data() + n_train * rows_per_clip * t.cols(), out.size(), out.data());
    return out;
  };
  test.frames = tail(all.frames, f);
  test.labels = tail(all.labels, 1);
  test.latents = tail(all.latents, 1);
  return {std::move(train), std::move(test)};
}

}  // namespace detail

/// Builds the AU dataset (domain A) and the expression dataset (domain B)
/// from disjoint latent draws, then verifies every expression label.
inline World generate_synthetic_world(const SyntheticWorldSpec& spec, std::uint64_t seed) {
  World w;
  w.spec = spec;
  const facs::PriorMatrix prior = facs::build_prior_matrix(facs::builtin_facs_table(), spec.expressions, spec.aus);
  Rng gen_rng(seed, "world.generator");
  w.generator = spec.generator.empty() ? default_generator(prior, spec.off_prior_mass, gen_rng) : spec.generator;
  validate(spec, w.generator);

  w.label_bias.assign(spec.expressions.size(), 0.0);
  if (const std::size_t nk = neutral_index(spec.expressions); nk < spec.expressions.size()) {
    w.label_bias[nk] = spec.neutral_bias;
  }

  Rng map_rng(seed, "world.maps");
  const Tensor shared = detail::shared_signatures(spec, map_rng);
  w.map_au = detail::domain_map(shared, spec.domain_shift, spec.signal, map_rng);
  w.map_fe = detail::domain_map(shared, spec.domain_shift, spec.signal, map_rng);

  Rng au_rng(seed, "world.au");
  Rng fe_rng(seed, "world.fe");
  const Dataset au = detail::sample_clips(w, backbone::TaskKind::au, spec.au_samples, w.map_au, 0, au_rng);
  const Dataset fe = detail::sample_clips(w, backbone::TaskKind::expression, spec.fe_samples, w.map_fe, 1, fe_rng);
  std::tie(w.au_train, w.au_test) = detail::split(au, spec.train_fraction);
  std::tie(w.fe_train, w.fe_test) = detail::split(fe, spec.train_fraction);
  check_label_consistency(w);
  return w;
}

}  // namespace ssm::trainer
