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
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssm/numerics/ops.hpp"
#include "ssm/numerics/rng.hpp"

namespace ssm::objective {

/// Cosine similarities between the rows of Z (B x d) and T (C x d), scaled
/// by 1 / tau. Both sides are L2-normalized first.
inline Var similarity_scores(Var z, Var t, double tau) {
  if (!(tau > 0.0)) throw InvalidArgument("temperature must be positive");
  return scale(matmul_nt(l2_normalize_rows(z), l2_normalize_rows(t)), 1.0 / tau);
}

inline Tensor similarity_scores(const Tensor& z, const Tensor& t, double tau) {
  Tape tape;
  return similarity_scores(tape.constant(z), tape.constant(t), tau).value();
}

/// Mean softmax cross-entropy over the batch; `labels` is B x K one-hot.
inline Var dfer_loss(Var scores, const Tensor& labels) { return softmax_cross_entropy(scores, labels); }

/// Mean binary cross-entropy over all B x M entries.
inline Var au_loss(Var scores, const Tensor& labels) { return binary_cross_entropy_with_logits(scores, labels); }

/// Weights (1 / (1 + lambda), lambda / (1 + lambda)).
inline std::pair<double, double> task_weights(double lambda) {
  if (!(lambda >= 0.0)) throw InvalidArgument("lambda must be non-negative");
  if (std::isinf(lambda)) return {0.0, 1.0};
  return {1.0 / (1.0 + lambda), lambda / (1.0 + lambda)};
}

inline double total_loss(double l_dfe, double l_au, double lambda) {
  const auto [a, b] = task_weights(lambda);
  return a * l_dfe + b * l_au;
}

inline Var total_loss(Var l_dfe, Var l_au, double lambda) {
  const auto [a, b] = task_weights(lambda);
  return weighted_sum({l_dfe, l_au}, {a, b});
}

/// Affine classifier used by the Baseline and STL variants.
struct LinearHead {
  Parameter weight;  // C x d
  Parameter bias;    // 1 x C

  LinearHead() = default;
  LinearHead(const std::string& prefix, std::size_t classes, std::size_t d, Rng& rng)
      : weight(prefix + ".w", rng.normal_matrix(classes, d, 1.0 / std::sqrt(static_cast<double>(d))), ParamGroup::head),
        bias(prefix + ".b", Tensor::matrix(1, classes), ParamGroup::head) {}

  std::vector<Parameter*> parameters() { return {&weight, &bias}; }
};

/// logits = Z W^T + b.
inline Var baseline_heads(Var z, Var w, Var b) {
  if (z.cols() != w.cols() || b.cols() != w.rows()) throw ConfigError("head dimensions do not match features");
  return add_row(matmul_nt(z, w), b);
}

inline Var baseline_dfer_loss(Var logits, const Tensor& labels) { return softmax_cross_entropy(logits, labels); }
inline Var baseline_au_loss(Var logits, const Tensor& labels) { return binary_cross_entropy_with_logits(logits, labels); }

// ---------------------------------------------------------------------------
// Predictions

/// Row-wise argmax; ties resolve to the lowest index.
inline std::vector<std::size_t> predict_expression(const Tensor& scores) {
  std::vector<std::size_t> out(scores.rows());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    const auto row = scores.row_span(i);
    out[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

/// sigmoid(score) > 0.5, which is score > 0.
inline Tensor predict_au(const Tensor& scores) {
  Tensor out(scores.shape());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] > 0.0 ? 1.0 : 0.0;
  return out;
}

/// Class index of each one-hot label row.
inline std::vector<std::size_t> label_indices(const Tensor& one_hot) { return predict_expression(one_hot); }

// ---------------------------------------------------------------------------
// Metrics

struct F1Result {
  std::vector<double> per_au;
  double average = 0.0;
  /// Columns with no positives in either truth or prediction (scored 0).
  std::vector<std::size_t> undefined;
};

inline F1Result f1_scores(const Tensor& pred, const Tensor& truth) {
  if (pred.shape() != truth.shape() || pred.rank() != 2) throw InvalidArgument("f1_scores: shape mismatch");
  const std::size_t n = pred.rows(), m = pred.cols();
  F1Result r;
  r.per_au.assign(m, 0.0);
  for (std::size_t j = 0; j < m; ++j) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool p = pred(i, j) > 0.5, t = truth(i, j) > 0.5;
      tp += p && t;
      fp += p && !t;
      fn += !p && t;
    }
    const std::size_t denom = 2 * tp + fp + fn;
    if (denom == 0) {
      r.undefined.push_back(j);
    } else {
      r.per_au[j] = 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
    }
  }
  double s = 0.0;
  for (double v : r.per_au) s += v;
  r.average = m ? s / static_cast<double>(m) : 0.0;
  return r;
}

using Confusion = std::vector<std::vector<std::size_t>>;

/// confusion[truth][pred] counts.
inline Confusion confusion_matrix(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& truth,
                                  std::size_t k) {
  if (pred.size() != truth.size()) throw InvalidArgument("confusion_matrix: length mismatch");
  Confusion c(k, std::vector<std::size_t>(k, 0));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] >= k || truth[i] >= k) throw InvalidArgument("class id out of range");
    ++c[truth[i]][pred[i]];
  }
  return c;
}

struct RecallSummary {
  double uar = 0.0;
  double war = 0.0;
};

inline RecallSummary uar_war(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& truth,
                             std::size_t k) {
  const Confusion c = confusion_matrix(pred, truth, k);
  double recall_sum = 0.0;
  std::size_t classes = 0, correct = 0, total = 0;
  for (std::size_t a = 0; a < k; ++a) {
    std::size_t support = 0;
    for (std::size_t b = 0; b < k; ++b) support += c[a][b];
    correct += c[a][a];
    total += support;
    if (support == 0) continue;
    recall_sum += static_cast<double>(c[a][a]) / static_cast<double>(support);
    ++classes;
  }
  if (classes == 0) throw UndefinedMetric("UAR is undefined when no class has support");
  return {recall_sum / static_cast<double>(classes), static_cast<double>(correct) / static_cast<double>(total)};
}

/// Evaluation summary. Fields that do not apply to a task are left empty
/// and serialize as null.
struct MetricsReport {
  std::vector<double> per_au_f1;
  std::optional<double> avg_f1;
  std::optional<double> uar;
  std::optional<double> war;
  Confusion confusion;
};

inline void to_json(nlohmann::json& j, const MetricsReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  j = nlohmann::json{{"per_au_f1", r.per_au_f1},
                     {"avg_f1", opt(r.avg_f1)},
                     {"uar", opt(r.uar)},
                     {"war", opt(r.war)},
                     {"confusion", r.confusion}};
}

inline void from_json(const nlohmann::json& j, MetricsReport& r) {
  auto opt = [&](const char* key) -> std::optional<double> {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<double>();
  };
  r.per_au_f1 = j.at("per_au_f1").get<std::vector<double>>();
  r.avg_f1 = opt("avg_f1");
  r.uar = opt("uar");
  r.war = opt("war");
  r.confusion = j.at("confusion").get<Confusion>();
}

inline MetricsReport au_report(const Tensor& scores, const Tensor& truth) {
  const F1Result f1 = f1_scores(predict_au(scores), truth);
  MetricsReport r;
  r.per_au_f1 = f1.per_au;
  r.avg_f1 = f1.average;
  return r;
}

inline MetricsReport expression_report(const Tensor& scores, const Tensor& one_hot) {
  const auto pred = predict_expression(scores);
  const auto truth = label_indices(one_hot);
  const RecallSummary rw = uar_war(pred, truth, scores.cols());
  MetricsReport r;
  r.uar = rw.uar;
  r.war = rw.war;
  r.confusion = confusion_matrix(pred, truth, scores.cols());
  return r;
}

/// Column correspondence between two AU label sets, in source order.
struct SharedAus {
  std::vector<int> ids;
  std::vector<std::size_t> source_columns;
  std::vector<std::size_t> target_columns;
};

inline SharedAus shared_aus(const std::vector<int>& source, const std::vector<int>& target) {
  SharedAus s;
  for (std::size_t i = 0; i < source.size(); ++i) {
    const auto it = std::find(target.begin(), target.end(), source[i]);
    if (it == target.end()) continue;
    s.ids.push_back(source[i]);
    s.source_columns.push_back(i);
    s.target_columns.push_back(static_cast<std::size_t>(it - target.begin()));
  }
  if (s.ids.empty()) throw ConfigError("source and target AU sets share no AU");
  return s;
}

inline Tensor select_columns(const Tensor& m, const std::vector<std::size_t>& cols) {
  Tensor out = Tensor::matrix(m.rows(), cols.size());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j) out(i, j) = m(i, cols[j]);
  return out;
}

/// Scores a model trained on `source_aus` against labels over `target_aus`,
/// restricted to the AUs both sets contain.
inline MetricsReport subset_eval(const Tensor& source_scores, const std::vector<int>& source_aus,
                                 const Tensor& target_truth, const std::vector<int>& target_aus) {
  const SharedAus s = shared_aus(source_aus, target_aus);
  return au_report(select_columns(source_scores, s.source_columns), select_columns(target_truth, s.target_columns));
}

}  // namespace ssm::objective
