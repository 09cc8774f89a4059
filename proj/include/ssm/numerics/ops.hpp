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
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "ssm/numerics/tape.hpp"

// Differentiable primitives. Every op computes its forward value eagerly and
// records the adjoint formula; matrices are rank-2 row-major tensors.

namespace ssm {

inline constexpr double kNormEpsilon = 1e-12;
inline constexpr double kVarianceFloor = 1e-6;

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw InvalidArgument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()));
  }
}

inline void require_positive_tau(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw InvalidArgument("temperature must be positive, got " + std::to_string(tau));
  }
}

/// Writes softmax(row / tau) for every row of `in` into `out`.
inline void softmax_rows(const Tensor& in, double tau, Tensor& out) {
  const std::size_t r = in.rows(), c = in.cols();
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = in.data() + i * c;
    double* y = out.data() + i * c;
    double mx = x[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      y[j] = std::exp((x[j] - mx) / tau);
      s += y[j];
    }
    for (std::size_t j = 0; j < c; ++j) y[j] /= s;
  }
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }
inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Plain (tape-free) numerics.

/// Row-wise softmax of m / tau with max subtraction.
inline Tensor row_softmax(const Tensor& m, double tau) {
  detail::require_positive_tau(tau);
  Tensor out(m.shape());
  detail::softmax_rows(m, tau, out);
  return out;
}

/// Unit vector in the direction of v. Inputs already unit length (to
/// within 1e-14) are returned unchanged, which makes the map idempotent.
inline std::vector<double> l2_normalize(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  const double norm = std::sqrt(s);
  if (!(norm > kNormEpsilon)) throw DegenerateVector("cannot normalize a vector with norm " + std::to_string(norm));
  std::vector<double> out(v.begin(), v.end());
  if (std::abs(norm - 1.0) <= 1e-14) return out;
  for (double& x : out) x /= norm;
  return out;
}

/// Standardizes v to zero mean and unit (population) variance. The
/// variance is floored at 1e-6, so constant inputs map to zeros.
inline std::vector<double> layer_norm(std::span<const double> v) {
  if (v.size() < 2) throw InvalidArgument("layer_norm needs at least two elements");
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  const double inv = 1.0 / std::sqrt(std::max(var, kVarianceFloor));
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - mean) * inv;
  return out;
}

// ---------------------------------------------------------------------------
// Tape ops.

inline Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != B.rows()) {
    throw InvalidArgument("matmul: inner dimension mismatch " + shape_string(A.shape()) + " x " +
                          shape_string(B.shape()));
  }
  Tensor out = Tensor::matrix(A.rows(), B.cols());
  out.mat().noalias() = A.mat() * B.mat();
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    if (Tensor* ga = t.grad_buffer(a)) ga->mat().noalias() += g.mat() * b.value().mat().transpose();
    if (Tensor* gb = t.grad_buffer(b)) gb->mat().noalias() += a.value().mat().transpose() * g.mat();
  });
}

/// a * b^T.
inline Var matmul_nt(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != B.cols()) {
    throw InvalidArgument("matmul_nt: inner dimension mismatch " + shape_string(A.shape()) + " x " +
                          shape_string(B.shape()) + "^T");
  }
  Tensor out = Tensor::matrix(A.rows(), B.rows());
  out.mat().noalias() = A.mat() * B.mat().transpose();
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    if (Tensor* ga = t.grad_buffer(a)) ga->mat().noalias() += g.mat() * b.value().mat();
    if (Tensor* gb = t.grad_buffer(b)) gb->mat().noalias() += g.mat().transpose() * a.value().mat();
  });
}

inline Var transpose(Var a) {
  return a.tape()->record(a.value().transposed(), {a}, [a](Tape& t, const Tensor& g, const Tensor&) {
    t.accumulate(a, g.transposed());
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out.mat() += b.value().mat();
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  out.mat() -= b.value().mat();
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    t.accumulate(a, g);
    if (Tensor* gb = t.grad_buffer(b)) gb->mat() -= g.mat();
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b.value()[i];
    if (Tensor* gb = t.grad_buffer(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a.value()[i];
  });
}

/// a + bias broadcast over rows; bias is 1 x cols.
inline Var add_row(Var a, Var bias) {
  const Tensor& A = a.value();
  const Tensor& bv = bias.value();
  if (bv.size() != A.cols()) throw InvalidArgument("add_row: bias width mismatch");
  Tensor out = A;
  for (std::size_t i = 0; i < A.rows(); ++i) {
    double* r = out.data() + i * A.cols();
    for (std::size_t j = 0; j < A.cols(); ++j) r[j] += bv[j];
  }
  return a.tape()->record(std::move(out), {a, bias}, [a, bias](Tape& t, const Tensor& g, const Tensor&) {
    t.accumulate(a, g);
    if (Tensor* gb = t.grad_buffer(bias)) {
      const std::size_t c = g.cols();
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < c; ++j) (*gb)[j] += g(i, j);
    }
  });
}

/// a + bias broadcast over columns; bias is rows x 1.
inline Var add_col(Var a, Var bias) {
  const Tensor& A = a.value();
  const Tensor& bv = bias.value();
  if (bv.size() != A.rows()) throw InvalidArgument("add_col: bias height mismatch");
  Tensor out = A;
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < A.cols(); ++j) out(i, j) += bv[i];
  return a.tape()->record(std::move(out), {a, bias}, [a, bias](Tape& t, const Tensor& g, const Tensor&) {
    t.accumulate(a, g);
    if (Tensor* gb = t.grad_buffer(bias)) {
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) (*gb)[i] += g(i, j);
    }
  });
}

/// Each row of a multiplied elementwise by v (1 x cols).
inline Var mul_row(Var a, Var v) {
  const Tensor& A = a.value();
  const Tensor& V = v.value();
  if (V.size() != A.cols()) throw InvalidArgument("mul_row: vector width mismatch");
  Tensor out = A;
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < A.cols(); ++j) out(i, j) *= V[j];
  return a.tape()->record(std::move(out), {a, v}, [a, v](Tape& t, const Tensor& g, const Tensor&) {
    const Tensor& A = a.value();
    const Tensor& V = v.value();
    if (Tensor* ga = t.grad_buffer(a)) {
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) (*ga)(i, j) += g(i, j) * V[j];
    }
    if (Tensor* gv = t.grad_buffer(v)) {
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) (*gv)[j] += g(i, j) * A(i, j);
    }
  });
}

/// Each row i of a scaled by w[i] (w is rows x 1).
inline Var mul_col(Var a, Var w) {
  const Tensor& A = a.value();
  const Tensor& W = w.value();
  if (W.size() != A.rows()) throw InvalidArgument("mul_col: weight height mismatch");
  Tensor out = A;
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < A.cols(); ++j) out(i, j) *= W[i];
  return a.tape()->record(std::move(out), {a, w}, [a, w](Tape& t, const Tensor& g, const Tensor&) {
    const Tensor& A = a.value();
    const Tensor& W = w.value();
    if (Tensor* ga = t.grad_buffer(a)) {
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) (*ga)(i, j) += g(i, j) * W[i];
    }
    if (Tensor* gw = t.grad_buffer(w)) {
      for (std::size_t i = 0; i < g.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < g.cols(); ++j) s += g(i, j) * A(i, j);
        (*gw)[i] += s;
      }
    }
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& x : out.values()) x *= s;
  return a.tape()->record(std::move(out), {a}, [a, s](Tape& t, const Tensor& g, const Tensor&) {
    if (Tensor* ga = t.grad_buffer(a)) ga->mat() += s * g.mat();
  });
}

/// s * a for a 1 x 1 variable s.
inline Var scale_by(Var a, Var s) {
  if (s.value().size() != 1) throw InvalidArgument("scale_by: scale must be a scalar");
  const double sv = s.value()[0];
  Tensor out = a.value();
  for (double& x : out.values()) x *= sv;
  return a.tape()->record(std::move(out), {a, s}, [a, s](Tape& t, const Tensor& g, const Tensor&) {
    if (Tensor* ga = t.grad_buffer(a)) ga->mat() += s.value()[0] * g.mat();
    if (Tensor* gs = t.grad_buffer(s)) {
      const Tensor& A = a.value();
      double acc = 0.0;
      for (std::size_t i = 0; i < A.size(); ++i) acc += g[i] * A[i];
      (*gs)[0] += acc;
    }
  });
}

inline Var tanh(Var a) {
  Tensor out = a.value();
  for (double& x : out.values()) x = std::tanh(x);
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Tensor& g, const Tensor& y) {
    if (Tensor* ga = t.grad_buffer(a)) {
      for (std::size_t i = 0; i < y.size(); ++i) (*ga)[i] += g[i] * (1.0 - y[i] * y[i]);
    }
  });
}

inline Var gelu(Var a) {
  Tensor out = a.value();
  for (double& x : out.values()) x = detail::gelu(x);
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Tensor& g, const Tensor&) {
    if (Tensor* ga = t.grad_buffer(a)) {
      const Tensor& x = a.value();
      for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += g[i] * detail::gelu_grad(x[i]);
    }
  });
}

/// Row-wise softmax(a / tau).
inline Var row_softmax(Var a, double tau) {
  return a.tape()->record(ssm::row_softmax(a.value(), tau), {a}, [a, tau](Tape& t, const Tensor& g, const Tensor& p) {
    Tensor* ga = t.grad_buffer(a);
    if (!ga) return;
    const std::size_t r = p.rows(), c = p.cols();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g(i, j) * p(i, j);
      for (std::size_t j = 0; j < c; ++j) (*ga)(i, j) += p(i, j) * (g(i, j) - dot) / tau;
    }
  });
}

/// Per-row standardization with variance floor; no affine terms.
inline Var layer_norm_rows(Var a) {
  const Tensor& A = a.value();
  const std::size_t r = A.rows(), c = A.cols();
  if (c < 2) throw InvalidArgument("layer_norm needs at least two columns");
  Tensor out(A.shape());
  std::vector<double> inv_std(r);
  std::vector<char> floored(r);
  for (std::size_t i = 0; i < r; ++i) {
    const auto x = A.row_span(i);
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(c);
    floored[i] = var < kVarianceFloor;
    inv_std[i] = 1.0 / std::sqrt(std::max(var, kVarianceFloor));
    for (std::size_t j = 0; j < c; ++j) out(i, j) = (x[j] - mean) * inv_std[i];
  }
  return a.tape()->record(std::move(out), {a}, [a, inv_std, floored](Tape& t, const Tensor& g, const Tensor& xh) {
    Tensor* ga = t.grad_buffer(a);
    if (!ga) return;
    const std::size_t r = xh.rows(), c = xh.cols();
    const double n = static_cast<double>(c);
    for (std::size_t i = 0; i < r; ++i) {
      double gsum = 0.0, gxh = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        gsum += g(i, j);
        gxh += g(i, j) * xh(i, j);
      }
      for (std::size_t j = 0; j < c; ++j) {
        // With the floor active the denominator is constant.
        const double curv = floored[i] ? 0.0 : xh(i, j) * gxh / n;
        (*ga)(i, j) += inv_std[i] * (g(i, j) - gsum / n - curv);
      }
    }
  });
}

/// Per-row L2 normalization; throws DegenerateVector on a near-zero row.
inline Var l2_normalize_rows(Var a) {
  const Tensor& A = a.value();
  const std::size_t r = A.rows(), c = A.cols();
  Tensor out(A.shape());
  std::vector<double> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (double v : A.row_span(i)) s += v * v;
    norms[i] = std::sqrt(s);
    if (!(norms[i] > kNormEpsilon)) {
      throw DegenerateVector("row " + std::to_string(i) + " has norm " + std::to_string(norms[i]));
    }
    const double div = std::abs(norms[i] - 1.0) <= 1e-14 ? 1.0 : norms[i];
    for (std::size_t j = 0; j < c; ++j) out(i, j) = A(i, j) / div;
  }
  return a.tape()->record(std::move(out), {a}, [a, norms](Tape& t, const Tensor& g, const Tensor& u) {
    Tensor* ga = t.grad_buffer(a);
    if (!ga) return;
    for (std::size_t i = 0; i < u.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < u.cols(); ++j) dot += g(i, j) * u(i, j);
      for (std::size_t j = 0; j < u.cols(); ++j) (*ga)(i, j) += (g(i, j) - dot * u(i, j)) / norms[i];
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_rows: nothing to concatenate");
  const std::size_t c = parts.front().cols();
  std::size_t r = 0;
  for (const Var& p : parts) {
    if (p.cols() != c) throw InvalidArgument("concat_rows: column mismatch");
    r += p.rows();
  }
  Tensor out = Tensor::matrix(r, c);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + offset * c);
    offset += p.rows();
  }
  return parts.front().tape()->record(std::move(out), parts, [parts](Tape& t, const Tensor& g, const Tensor&) {
    std::size_t offset = 0;
    const std::size_t c = g.cols();
    for (const Var& p : parts) {
      if (Tensor* gp = t.grad_buffer(p)) {
        for (std::size_t k = 0; k < gp->size(); ++k) (*gp)[k] += g[offset * c + k];
      }
      offset += p.rows();
    }
  });
}

/// Mean over consecutive groups of `group` rows: (rows/group) x cols.
inline Var segment_mean_rows(Var a, std::size_t group) {
  const Tensor& A = a.value();
  if (group == 0 || A.rows() % group != 0) throw InvalidArgument("segment_mean_rows: bad group size");
  const std::size_t n = A.rows() / group, c = A.cols();
  Tensor out = Tensor::matrix(n, c);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t k = 0; k < group; ++k)
      for (std::size_t j = 0; j < c; ++j) out(s, j) += A(s * group + k, j);
  for (double& v : out.values()) v /= static_cast<double>(group);
  return a.tape()->record(std::move(out), {a}, [a, group](Tape& t, const Tensor& g, const Tensor&) {
    Tensor* ga = t.grad_buffer(a);
    if (!ga) return;
    const double w = 1.0 / static_cast<double>(group);
    for (std::size_t i = 0; i < ga->rows(); ++i)
      for (std::size_t j = 0; j < ga->cols(); ++j) (*ga)(i, j) += g(i / group, j) * w;
  });
}

inline Var mean_rows(Var a) { return segment_mean_rows(a, a.rows()); }

inline Var gather_rows(Var a, std::vector<std::size_t> index) {
  const Tensor& A = a.value();
  const std::size_t c = A.cols();
  Tensor out = Tensor::matrix(index.size(), c);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= A.rows()) throw InvalidArgument("gather_rows: index out of range");
    std::copy_n(A.data() + index[i] * c, c, out.data() + i * c);
  }
  return a.tape()->record(std::move(out), {a}, [a, index = std::move(index)](Tape& t, const Tensor& g, const Tensor&) {
    Tensor* ga = t.grad_buffer(a);
    if (!ga) return;
    const std::size_t c = g.cols();
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) (*ga)(index[i], j) += g(i, j);
  });
}

/// Places row i of a at row index[i] of a zero matrix with `rows` rows
/// (repeated indices add up).
inline Var scatter_rows(Var a, std::vector<std::size_t> index, std::size_t rows) {
  const Tensor& A = a.value();
  if (index.size() != A.rows()) throw InvalidArgument("scatter_rows: index count mismatch");
  const std::size_t c = A.cols();
  Tensor out = Tensor::matrix(rows, c);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) throw InvalidArgument("scatter_rows: index out of range");
    for (std::size_t j = 0; j < c; ++j) out(index[i], j) += A(i, j);
  }
  return a.tape()->record(std::move(out), {a}, [a, index = std::move(index)](Tape& t, const Tensor& g, const Tensor&) {
    Tensor* ga = t.grad_buffer(a);
    if (!ga) return;
    const std::size_t c = g.cols();
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) (*ga)(i, j) += g(index[i], j);
  });
}

/// Entries a[rows[i], col] as a column vector.
inline Var gather_column(Var a, std::vector<std::size_t> rows, std::size_t col) {
  const Tensor& A = a.value();
  Tensor out = Tensor::matrix(rows.size(), 1);
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = A(rows[i], col);
  return a.tape()->record(std::move(out), {a}, [a, rows = std::move(rows), col](Tape& t, const Tensor& g, const Tensor&) {
    Tensor* ga = t.grad_buffer(a);
    if (!ga) return;
    for (std::size_t i = 0; i < rows.size(); ++i) (*ga)(rows[i], col) += g[i];
  });
}

inline Var sum_all(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape()->record(Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g, const Tensor&) {
    if (Tensor* ga = t.grad_buffer(a))
      for (double& v : ga->values()) v += g[0];
  });
}

/// Weighted sum of scalars: sum_i w_i * s_i.
inline Var weighted_sum(const std::vector<Var>& scalars, std::vector<double> weights) {
  if (scalars.size() != weights.size() || scalars.empty()) throw InvalidArgument("weighted_sum: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < scalars.size(); ++i) s += weights[i] * scalars[i].value()[0];
  return scalars.front().tape()->record(
      Tensor::scalar(s), scalars, [scalars, weights = std::move(weights)](Tape& t, const Tensor& g, const Tensor&) {
        for (std::size_t i = 0; i < scalars.size(); ++i) {
          if (Tensor* gs = t.grad_buffer(scalars[i])) (*gs)[0] += weights[i] * g[0];
        }
      });
}

/// Mean over rows of softmax cross-entropy; `targets` rows are one-hot.
inline Var softmax_cross_entropy(Var logits, const Tensor& targets) {
  const Tensor& L = logits.value();
  detail::require_same_shape(L, targets, "softmax_cross_entropy");
  const std::size_t b = L.rows(), k = L.cols();
  Tensor p(L.shape());
  detail::softmax_rows(L, 1.0, p);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const auto x = L.row_span(i);
    const double mx = *std::max_element(x.begin(), x.end());
    double s = 0.0;
    for (double v : x) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < k; ++j) loss -= targets(i, j) * (x[j] - lse);
  }
  loss /= static_cast<double>(b);
  return logits.tape()->record(Tensor::scalar(loss), {logits},
                               [logits, p = std::move(p), targets](Tape& t, const Tensor& g, const Tensor&) {
                                 Tensor* gl = t.grad_buffer(logits);
                                 if (!gl) return;
                                 const double w = g[0] / static_cast<double>(p.rows());
                                 for (std::size_t i = 0; i < p.size(); ++i) (*gl)[i] += w * (p[i] - targets[i]);
                               });
}

/// Mean over all entries of binary cross-entropy on sigmoid(logits).
inline Var binary_cross_entropy_with_logits(Var logits, const Tensor& targets) {
  const Tensor& L = logits.value();
  detail::require_same_shape(L, targets, "binary_cross_entropy_with_logits");
  double loss = 0.0;
  for (std::size_t i = 0; i < L.size(); ++i) {
    const double x = L[i];
    loss += std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
  }
  loss /= static_cast<double>(L.size());
  return logits.tape()->record(Tensor::scalar(loss), {logits}, [logits, targets](Tape& t, const Tensor& g, const Tensor&) {
    Tensor* gl = t.grad_buffer(logits);
    if (!gl) return;
    const Tensor& L = logits.value();
    const double w = g[0] / static_cast<double>(L.size());
    for (std::size_t i = 0; i < L.size(); ++i) {
      const double x = L[i];
      const double sig = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      (*gl)[i] += w * (sig - targets[i]);
    }
  });
}

/// Grouped scaled dot-product attention.
///
/// Queries are laid out as `groups` consecutive blocks of `q_per_group`
/// rows; keys and values as `groups` blocks of `kv_per_group` rows. Each
/// query attends only within its own group.
inline Var grouped_attention(Var q, Var k, Var v, std::size_t q_per_group, std::size_t kv_per_group) {
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  if (q_per_group == 0 || kv_per_group == 0 || Q.rows() % q_per_group != 0) {
    throw InvalidArgument("grouped_attention: bad group sizes");
  }
  const std::size_t groups = Q.rows() / q_per_group;
  if (K.rows() != groups * kv_per_group || V.rows() != K.rows() || Q.cols() != K.cols()) {
    throw InvalidArgument("grouped_attention: shape mismatch");
  }
  const double sc = 1.0 / std::sqrt(static_cast<double>(Q.cols()));
  Tensor probs = Tensor::matrix(Q.rows(), kv_per_group);
  Tensor out = Tensor::matrix(Q.rows(), V.cols());
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const auto qb = Q.mat().middleRows(gi * q_per_group, q_per_group);
    const auto kb = K.mat().middleRows(gi * kv_per_group, kv_per_group);
    const auto vb = V.mat().middleRows(gi * kv_per_group, kv_per_group);
    auto pb = probs.mat().middleRows(gi * q_per_group, q_per_group);
    pb.noalias() = sc * qb * kb.transpose();
    for (Eigen::Index r = 0; r < pb.rows(); ++r) {
      const double mx = pb.row(r).maxCoeff();
      pb.row(r) = (pb.row(r).array() - mx).exp();
      pb.row(r) /= pb.row(r).sum();
    }
    out.mat().middleRows(gi * q_per_group, q_per_group).noalias() = pb * vb;
  }
  return q.tape()->record(
      std::move(out), {q, k, v},
      [q, k, v, probs = std::move(probs), q_per_group, kv_per_group, groups, sc](Tape& t, const Tensor& g, const Tensor&) {
        Tensor* gq = t.grad_buffer(q);
        Tensor* gk = t.grad_buffer(k);
        Tensor* gv = t.grad_buffer(v);
        const Tensor& Q = q.value();
        const Tensor& K = k.value();
        const Tensor& V = v.value();
        RowMatrix dp, ds;
        for (std::size_t gi = 0; gi < groups; ++gi) {
          const auto pb = probs.mat().middleRows(gi * q_per_group, q_per_group);
          const auto gb = g.mat().middleRows(gi * q_per_group, q_per_group);
          const auto vb = V.mat().middleRows(gi * kv_per_group, kv_per_group);
          if (gv) gv->mat().middleRows(gi * kv_per_group, kv_per_group).noalias() += pb.transpose() * gb;
          if (!gq && !gk) continue;
          dp.noalias() = gb * vb.transpose();
          ds.resize(dp.rows(), dp.cols());
          for (Eigen::Index r = 0; r < dp.rows(); ++r) {
            const double dot = dp.row(r).dot(pb.row(r));
            ds.row(r) = pb.row(r).array() * (dp.row(r).array() - dot) * sc;
          }
          if (gq) {
            gq->mat().middleRows(gi * q_per_group, q_per_group).noalias() +=
                ds * K.mat().middleRows(gi * kv_per_group, kv_per_group);
          }
          if (gk) {
            gk->mat().middleRows(gi * kv_per_group, kv_per_group).noalias() +=
                ds.transpose() * Q.mat().middleRows(gi * q_per_group, q_per_group);
          }
        }
      });
}

}  // namespace ssm
