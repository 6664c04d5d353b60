#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "persona/diff/graph.hpp"
#include "persona/diff/tensor.hpp"
#include "persona/error.hpp"
#include "persona/util/rng.hpp"

// Differentiable operations. Each op computes its value eagerly and, when
// any input needs gradient, records the rule that pushes the output
// gradient back to its inputs.
namespace persona::diff {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

inline ConstMatMap as_matrix(const Tensor& t) {
  return {t.raw(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

inline MatMap as_matrix(Tensor& t) {
  return {t.raw(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

inline MatMap as_matrix(Buffer& g, std::size_t rows, std::size_t cols) {
  return {g.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

inline void require_same_graph(const Var& a, const Var& b, const char* op) {
  if (a.graph != b.graph || a.graph == nullptr) {
    throw ContractError(std::string(op) + ": operands belong to different graphs");
  }
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

inline void require_matrix(const Var& a, const char* op) {
  if (a.value().rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " + to_string(a.shape()));
  }
}

inline void add_into(Buffer& dst, std::span<const double> src, double scale = 1.0) {
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dst[i] += scale * src[i];
  }
}

}  // namespace detail

// C = A B for A [m x k], B [k x n].
inline Var matmul(Var a, Var b) {
  detail::require_same_graph(a, b, "matmul");
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const auto m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  Tensor out({m, n});
  detail::as_matrix(out).noalias() = detail::as_matrix(a.value()) * detail::as_matrix(b.value());
  return a.graph->record(std::move(out), {a.id, b.id}, [m, k, n](Graph& g, int self) {
    const auto pa = g.parents(self)[0], pb = g.parents(self)[1];
    auto dc = detail::as_matrix(g.grad(self), m, n);
    if (g.needs_grad(pa)) {
      detail::as_matrix(g.grad(pa), m, k).noalias() += dc * detail::as_matrix(g.value(pb)).transpose();
    }
    if (g.needs_grad(pb)) {
      detail::as_matrix(g.grad(pb), k, n).noalias() += detail::as_matrix(g.value(pa)).transpose() * dc;
    }
  });
}

// C = A B^T for A [m x k], B [n x k]; used for tied output projections.
inline Var matmul_nt(Var a, Var b) {
  detail::require_same_graph(a, b, "matmul_nt");
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const auto m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions differ, " + to_string(a.shape()) + " x " +
                         to_string(b.shape()) + "^T");
  }
  Tensor out({m, n});
  detail::as_matrix(out).noalias() = detail::as_matrix(a.value()) * detail::as_matrix(b.value()).transpose();
  return a.graph->record(std::move(out), {a.id, b.id}, [m, k, n](Graph& g, int self) {
    const auto pa = g.parents(self)[0], pb = g.parents(self)[1];
    auto dc = detail::as_matrix(g.grad(self), m, n);
    if (g.needs_grad(pa)) {
      detail::as_matrix(g.grad(pa), m, k).noalias() += dc * detail::as_matrix(g.value(pb));
    }
    if (g.needs_grad(pb)) {
      detail::as_matrix(g.grad(pb), n, k).noalias() += dc.transpose() * detail::as_matrix(g.value(pa));
    }
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_graph(a, b, "add");
  detail::require_same_shape(a, b, "add");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] += bv[i];
  }
  return a.graph->record(std::move(out), {a.id, b.id}, [](Graph& g, int self) {
    for (int p : g.parents(self)) {
      if (g.needs_grad(p)) {
        detail::add_into(g.grad(p), g.grad(self));
      }
    }
  });
}

// x [... x n] plus bias [n] broadcast over the leading axes.
inline Var add_bias(Var x, Var bias) {
  detail::require_same_graph(x, bias, "add_bias");
  const std::size_t n = x.cols();
  if (bias.value().size() != n) {
    throw DimensionError("add_bias: bias shape " + to_string(bias.shape()) + " does not fit " + to_string(x.shape()));
  }
  Tensor out = x.value();
  const std::size_t rows = out.rows();
  const double* b = bias.value().raw();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.raw() + r * n;
    for (std::size_t c = 0; c < n; ++c) {
      row[c] += b[c];
    }
  }
  return x.graph->record(std::move(out), {x.id, bias.id}, [rows, n](Graph& g, int self) {
    const auto px = g.parents(self)[0], pb = g.parents(self)[1];
    const auto& dy = g.grad(self);
    if (g.needs_grad(px)) {
      detail::add_into(g.grad(px), dy);
    }
    if (g.needs_grad(pb)) {
      auto& db = g.grad(pb);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
          db[c] += dy[r * n + c];
        }
      }
    }
  });
}

inline Var scale(Var x, double factor) {
  Tensor out = x.value();
  for (double& v : out.data()) {
    v *= factor;
  }
  return x.graph->record(std::move(out), {x.id}, [factor](Graph& g, int self) {
    detail::add_into(g.grad(g.parents(self)[0]), g.grad(self), factor);
  });
}

// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same_graph(a, b, "mul");
  detail::require_same_shape(a, b, "mul");
  Tensor out = a.value();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] *= bv[i];
  }
  return a.graph->record(std::move(out), {a.id, b.id}, [](Graph& g, int self) {
    const auto pa = g.parents(self)[0], pb = g.parents(self)[1];
    const auto& dy = g.grad(self);
    if (g.needs_grad(pa)) {
      auto& da = g.grad(pa);
      auto bv = g.value(pb).data();
      for (std::size_t i = 0; i < da.size(); ++i) {
        da[i] += dy[i] * bv[i];
      }
    }
    if (g.needs_grad(pb)) {
      auto& db = g.grad(pb);
      auto av = g.value(pa).data();
      for (std::size_t i = 0; i < db.size(); ++i) {
        db[i] += dy[i] * av[i];
      }
    }
  });
}

inline Var sum(Var x) {
  double total = 0.0;
  for (double v : x.value().data()) {
    total += v;
  }
  return x.graph->record(Tensor::scalar(total), {x.id}, [](Graph& g, int self) {
    const double d = g.grad(self)[0];
    for (double& v : g.grad(g.parents(self)[0])) {
      v += d;
    }
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

// Sum of scalar losses, each scaled by `weights[i]`.
inline Var weighted_sum(std::span<const Var> terms, std::span<const double> weights) {
  if (terms.empty() || terms.size() != weights.size()) {
    throw ContractError("weighted_sum: need one weight per term and at least one term");
  }
  Graph* graph = terms[0].graph;
  double total = 0.0;
  std::vector<int> ids;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].graph != graph) {
      throw ContractError("weighted_sum: operands belong to different graphs");
    }
    total += weights[i] * terms[i].item();
    ids.push_back(terms[i].id);
  }
  std::vector<double> w(weights.begin(), weights.end());
  return graph->record(Tensor::scalar(total), std::move(ids), [w](Graph& g, int self) {
    const double d = g.grad(self)[0];
    auto parents = g.parents(self);
    for (std::size_t i = 0; i < parents.size(); ++i) {
      if (g.needs_grad(parents[i])) {
        g.grad(parents[i])[0] += w[i] * d;
      }
    }
  });
}

// GELU, tanh approximation. tanh(u) is evaluated as 1 - 2 / (1 + e^{2u})
// with Eigen's vectorized exp.
inline Var gelu(Var x) {
  static constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  static constexpr double kA = 0.044715;
  const auto n = static_cast<Eigen::Index>(x.value().size());
  Eigen::Map<const Eigen::ArrayXd> xv(x.value().raw(), n);
  auto t = std::make_shared<Eigen::ArrayXd>(1.0 - 2.0 / (1.0 + (2.0 * kC * (xv + kA * xv.cube())).exp()));
  Tensor out(x.shape());
  Eigen::Map<Eigen::ArrayXd>(out.raw(), n) = 0.5 * xv * (1.0 + *t);
  return x.graph->record(std::move(out), {x.id}, [t, n](Graph& g, int self) {
    const int p = g.parents(self)[0];
    Eigen::Map<const Eigen::ArrayXd> xv(g.value(p).raw(), n);
    Eigen::Map<const Eigen::ArrayXd> dy(g.grad(self).data(), n);
    Eigen::Map<Eigen::ArrayXd> dx(g.grad(p).data(), n);
    const auto dt = (1.0 - t->square()) * kC * (1.0 + 3.0 * kA * xv.square());
    dx += dy * (0.5 * (1.0 + *t) + 0.5 * xv * dt);
  });
}

// Softmax along the last axis, max-subtracted.
inline Var softmax(Var x) {
  Tensor out = x.value();
  const std::size_t n = out.cols(), rows = out.rows();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.raw() + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      row[c] = std::exp(row[c] - mx);
      z += row[c];
    }
    for (std::size_t c = 0; c < n; ++c) {
      row[c] /= z;
    }
  }
  return x.graph->record(std::move(out), {x.id}, [rows, n](Graph& g, int self) {
    const auto y = g.value(self).data();
    const auto& dy = g.grad(self);
    auto& dx = g.grad(g.parents(self)[0]);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        dot += dy[r * n + c] * y[r * n + c];
      }
      for (std::size_t c = 0; c < n; ++c) {
        dx[r * n + c] += y[r * n + c] * (dy[r * n + c] - dot);
      }
    }
  });
}

// Per-row normalization to mean 0 / variance 1, then gamma * xhat + beta.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  detail::require_same_graph(x, gamma, "layer_norm");
  detail::require_same_graph(x, beta, "layer_norm");
  const std::size_t d = x.cols(), rows = x.rows();
  if (gamma.value().size() != d || beta.value().size() != d) {
    throw DimensionError("layer_norm: gamma/beta must have " + std::to_string(d) + " entries");
  }
  if (eps < 0.0) {
    throw ContractError("layer_norm: eps must be non-negative");
  }
  Tensor out(x.shape());
  auto xhat = std::make_shared<Buffer>(x.value().size());
  auto inv_std = std::make_shared<Buffer>(rows);
  const double* xv = x.value().raw();
  const double* gv = gamma.value().raw();
  const double* bv = beta.value().raw();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      mu += row[c];
    }
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      var += (row[c] - mu) * (row[c] - mu);
    }
    var /= static_cast<double>(d);
    if (var + eps <= 0.0) {
      throw ContractError("layer_norm: zero variance with eps = 0");
    }
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (row[c] - mu) * inv;
      (*xhat)[r * d + c] = h;
      out[r * d + c] = gv[c] * h + bv[c];
    }
  }
  return x.graph->record(std::move(out), {x.id, gamma.id, beta.id}, [xhat, inv_std, rows, d](Graph& g, int self) {
    const auto px = g.parents(self)[0], pg = g.parents(self)[1], pb = g.parents(self)[2];
    const auto& dy = g.grad(self);
    if (g.needs_grad(pg)) {
      auto& dg = g.grad(pg);
      for (std::size_t i = 0; i < dy.size(); ++i) {
        dg[i % d] += dy[i] * (*xhat)[i];
      }
    }
    if (g.needs_grad(pb)) {
      auto& db = g.grad(pb);
      for (std::size_t i = 0; i < dy.size(); ++i) {
        db[i % d] += dy[i];
      }
    }
    if (g.needs_grad(px)) {
      const double* gv = g.value(pg).raw();
      auto& dx = g.grad(px);
      Buffer dh(d);
      for (std::size_t r = 0; r < rows; ++r) {
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          dh[c] = dy[r * d + c] * gv[c];
          mean_dh += dh[c];
          mean_dh_h += dh[c] * (*xhat)[r * d + c];
        }
        mean_dh /= static_cast<double>(d);
        mean_dh_h /= static_cast<double>(d);
        const double inv = (*inv_std)[r];
        for (std::size_t c = 0; c < d; ++c) {
          dx[r * d + c] += inv * (dh[c] - mean_dh - (*xhat)[r * d + c] * mean_dh_h);
        }
      }
    }
  });
}

// Mean negative log-likelihood of `gold` under row-wise softmax(logits),
// skipping positions equal to `ignore_id`.
inline Var cross_entropy(Var logits, std::span<const int> gold, int ignore_id) {
  detail::require_matrix(logits, "cross_entropy");
  const std::size_t t = logits.rows(), v = logits.cols();
  if (gold.size() != t) {
    throw DimensionError("cross_entropy: " + std::to_string(gold.size()) + " gold ids for " + std::to_string(t) +
                         " positions");
  }
  std::size_t count = 0;
  for (int id : gold) {
    if (id == ignore_id) {
      continue;
    }
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw ContractError("cross_entropy: gold id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(v));
    }
    ++count;
  }
  if (count == 0) {
    throw ContractError("cross_entropy: every position is ignored, mean is undefined");
  }
  auto probs = std::make_shared<Buffer>(t * v);
  const double* lv = logits.value().raw();
  double total = 0.0;
  for (std::size_t r = 0; r < t; ++r) {
    const double* row = lv + r * v;
    Eigen::Map<const Eigen::ArrayXd> in(row, static_cast<Eigen::Index>(v));
    Eigen::Map<Eigen::ArrayXd> pr(probs->data() + r * v, static_cast<Eigen::Index>(v));
    const double mx = in.maxCoeff();
    pr = (in - mx).exp();
    const double z = pr.sum();
    pr /= z;
    if (gold[r] != ignore_id) {
      total += std::log(z) + mx - row[gold[r]];
    }
  }
  const double inv_count = 1.0 / static_cast<double>(count);
  std::vector<int> targets(gold.begin(), gold.end());
  return logits.graph->record(
      Tensor::scalar(total * inv_count), {logits.id},
      [probs, targets = std::move(targets), ignore_id, inv_count, t, v](Graph& g, int self) {
        const double d = g.grad(self)[0] * inv_count;
        auto& dx = g.grad(g.parents(self)[0]);
        for (std::size_t r = 0; r < t; ++r) {
          if (targets[r] == ignore_id) {
            continue;
          }
          for (std::size_t c = 0; c < v; ++c) {
            dx[r * v + c] += d * (*probs)[r * v + c];
          }
          dx[r * v + static_cast<std::size_t>(targets[r])] -= d;
        }
      });
}

// a.b / (max(|a|, eps) max(|b|, eps)).
inline Var cosine_similarity(Var a, Var b, double eps = 1e-8) {
  detail::require_same_graph(a, b, "cosine_similarity");
  detail::require_same_shape(a, b, "cosine_similarity");
  const auto av = a.value().data(), bv = b.value().data();
  double dot = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    dot += av[i] * bv[i];
    aa += av[i] * av[i];
    bb += bv[i] * bv[i];
  }
  const double na = std::sqrt(aa), nb = std::sqrt(bb);
  const double da = std::max(na, eps), db = std::max(nb, eps);
  const double s = dot / (da * db);
  return a.graph->record(Tensor::scalar(s), {a.id, b.id}, [na, nb, da, db, s, eps](Graph& g, int self) {
    const auto pa = g.parents(self)[0], pb = g.parents(self)[1];
    const double d = g.grad(self)[0];
    const auto av = g.value(pa).data(), bv = g.value(pb).data();
    // d s / d a = b / (da db) - s a / |a|^2 when |a| > eps (the norm is clamped otherwise).
    if (g.needs_grad(pa)) {
      auto& ga = g.grad(pa);
      const double self_term = na > eps ? s / (na * na) : 0.0;
      for (std::size_t i = 0; i < ga.size(); ++i) {
        ga[i] += d * (bv[i] / (da * db) - self_term * av[i]);
      }
    }
    if (g.needs_grad(pb)) {
      auto& gb = g.grad(pb);
      const double self_term = nb > eps ? s / (nb * nb) : 0.0;
      for (std::size_t i = 0; i < gb.size(); ++i) {
        gb[i] += d * (av[i] / (da * db) - self_term * bv[i]);
      }
    }
  });
}

// Rows of `table` [V x d] selected by `ids`, giving [t x d].
inline Var embedding(Var table, std::span<const int> ids) {
  detail::require_matrix(table, "embedding");
  if (ids.empty()) {
    throw ContractError("embedding: empty id sequence");
  }
  const std::size_t vocab = table.rows(), d = table.cols();
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ContractError("embedding: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(vocab));
    }
    const auto src = table.value().row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  std::vector<int> rows(ids.begin(), ids.end());
  return table.graph->record(std::move(out), {table.id}, [rows = std::move(rows), d](Graph& g, int self) {
    const auto& dy = g.grad(self);
    auto& dt = g.grad(g.parents(self)[0]);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const std::size_t base = static_cast<std::size_t>(rows[i]) * d;
      for (std::size_t c = 0; c < d; ++c) {
        dt[base + c] += dy[i * d + c];
      }
    }
  });
}

// Multi-head scaled dot-product attention. q [tq x d], k and v [tk x d];
// heads split the model dimension. With `causal`, query i only sees keys
// j <= i + (tk - tq).
inline Var attention(Var q, Var k, Var v, std::size_t n_heads, bool causal) {
  detail::require_same_graph(q, k, "attention");
  detail::require_same_graph(q, v, "attention");
  detail::require_matrix(q, "attention");
  detail::require_matrix(k, "attention");
  detail::require_matrix(v, "attention");
  detail::require_same_shape(k, v, "attention");
  const std::size_t tq = q.rows(), tk = k.rows(), d = q.cols();
  if (k.cols() != d) {
    throw DimensionError("attention: query width " + std::to_string(d) + " vs key width " + std::to_string(k.cols()));
  }
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(n_heads) +
                         " heads");
  }
  if (causal && tk < tq) {
    throw DimensionError("attention: causal mask needs at least as many keys as queries");
  }
  const std::size_t dh = d / n_heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));
  const long offset = static_cast<long>(tk) - static_cast<long>(tq);
  const auto D = static_cast<Eigen::Index>(d), TQ = static_cast<Eigen::Index>(tq), TK = static_cast<Eigen::Index>(tk),
             DH = static_cast<Eigen::Index>(dh);
  auto probs = std::make_shared<std::vector<detail::RowMat>>(n_heads);
  Tensor out({tq, d});
  for (std::size_t h = 0; h < n_heads; ++h) {
    const auto col = static_cast<Eigen::Index>(h * dh);
    detail::ConstStridedMap qh(q.value().raw() + col, TQ, DH, Eigen::OuterStride<>(D));
    detail::ConstStridedMap kh(k.value().raw() + col, TK, DH, Eigen::OuterStride<>(D));
    detail::ConstStridedMap vh(v.value().raw() + col, TK, DH, Eigen::OuterStride<>(D));
    detail::RowMat s = (qh * kh.transpose()) * scale_factor;
    for (Eigen::Index i = 0; i < TQ; ++i) {
      const Eigen::Index visible = causal ? std::min<Eigen::Index>(TK, i + offset + 1) : TK;
      auto seen = s.row(i).head(visible).array();
      seen = (seen - seen.maxCoeff()).exp();
      seen /= seen.sum();
      s.row(i).tail(TK - visible).setZero();
    }
    detail::StridedMap oh(out.raw() + col, TQ, DH, Eigen::OuterStride<>(D));
    oh.noalias() = s * vh;
    (*probs)[h] = std::move(s);
  }
  return q.graph->record(std::move(out), {q.id, k.id, v.id}, [probs, n_heads, D, TQ, TK, DH, scale_factor](Graph& g, int self) {
    const auto pq = g.parents(self)[0], pk = g.parents(self)[1], pv = g.parents(self)[2];
    const bool want_q = g.needs_grad(pq), want_k = g.needs_grad(pk), want_v = g.needs_grad(pv);
    Buffer& dout = g.grad(self);
    double* dq = want_q ? g.grad(pq).data() : nullptr;
    double* dk = want_k ? g.grad(pk).data() : nullptr;
    double* dv = want_v ? g.grad(pv).data() : nullptr;
    for (std::size_t h = 0; h < n_heads; ++h) {
      const auto col = static_cast<Eigen::Index>(h * static_cast<std::size_t>(DH));
      const detail::RowMat& p = (*probs)[h];
      detail::ConstStridedMap qh(g.value(pq).raw() + col, TQ, DH, Eigen::OuterStride<>(D));
      detail::ConstStridedMap kh(g.value(pk).raw() + col, TK, DH, Eigen::OuterStride<>(D));
      detail::ConstStridedMap vh(g.value(pv).raw() + col, TK, DH, Eigen::OuterStride<>(D));
      detail::ConstStridedMap doh(dout.data() + col, TQ, DH, Eigen::OuterStride<>(D));
      if (want_v) {
        detail::StridedMap dvh(dv + col, TK, DH, Eigen::OuterStride<>(D));
        dvh.noalias() += p.transpose() * doh;
      }
      if (!want_q && !want_k) {
        continue;
      }
      detail::RowMat dp = doh * vh.transpose();
      // Row-wise softmax backward; masked entries have p = 0 and stay 0.
      const Eigen::VectorXd rowdot = (dp.array() * p.array()).rowwise().sum();
      detail::RowMat ds = (p.array() * (dp.array().colwise() - rowdot.array())).matrix() * scale_factor;
      if (want_q) {
        detail::StridedMap dqh(dq + col, TQ, DH, Eigen::OuterStride<>(D));
        dqh.noalias() += ds * kh;
      }
      if (want_k) {
        detail::StridedMap dkh(dk + col, TK, DH, Eigen::OuterStride<>(D));
        dkh.noalias() += ds.transpose() * qh;
      }
    }
  });
}

// Stacks [r_i x d] (or [d]) inputs into [sum r_i x d].
inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) {
    throw ContractError("concat_rows: nothing to concatenate");
  }
  Graph* graph = parts[0].graph;
  const std::size_t d = parts[0].cols();
  std::size_t rows = 0;
  std::vector<int> ids;
  for (const Var& p : parts) {
    if (p.graph != graph) {
      throw ContractError("concat_rows: operands belong to different graphs");
    }
    if (p.cols() != d) {
      throw DimensionError("concat_rows: width " + std::to_string(p.cols()) + " vs " + std::to_string(d));
    }
    rows += p.rows();
    ids.push_back(p.id);
  }
  Tensor out({rows, d});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const auto src = p.value().data();
    std::copy(src.begin(), src.end(), out.raw() + offset);
    offset += src.size();
  }
  return graph->record(std::move(out), std::move(ids), [](Graph& g, int self) {
    const auto& dy = g.grad(self);
    std::size_t offset = 0;
    for (int p : g.parents(self)) {
      const std::size_t n = g.value(p).size();
      if (g.needs_grad(p)) {
        auto& dp = g.grad(p);
        for (std::size_t i = 0; i < n; ++i) {
          dp[i] += dy[offset + i];
        }
      }
      offset += n;
    }
  });
}

// Row `r` of a matrix as a vector [d].
inline Var select_row(Var x, std::size_t r) {
  if (r >= x.rows()) {
    throw DimensionError("select_row: row " + std::to_string(r) + " of " + to_string(x.shape()));
  }
  const std::size_t d = x.cols();
  const auto src = x.value().row(r);
  Tensor out({d}, std::vector<double>(src.begin(), src.end()));
  return x.graph->record(std::move(out), {x.id}, [r, d](Graph& g, int self) {
    const auto& dy = g.grad(self);
    auto& dx = g.grad(g.parents(self)[0]);
    for (std::size_t c = 0; c < d; ++c) {
      dx[r * d + c] += dy[c];
    }
  });
}

// Reinterprets the buffer with a new shape of equal element count.
inline Var reshape(Var x, Shape shape) {
  Tensor out(std::move(shape), std::vector<double>(x.value().data().begin(), x.value().data().end()));
  return x.graph->record(std::move(out), {x.id}, [](Graph& g, int self) {
    detail::add_into(g.grad(g.parents(self)[0]), g.grad(self));
  });
}

// Inverted dropout; identity when p == 0.
inline Var dropout(Var x, double p, Rng& rng) {
  if (p <= 0.0) {
    return x;
  }
  if (p >= 1.0) {
    throw ContractError("dropout: rate must be below 1");
  }
  auto mask = std::make_shared<Buffer>(x.value().size());
  Tensor out = x.value();
  const double keep = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng.uniform() < p ? 0.0 : keep;
    out[i] *= (*mask)[i];
  }
  return x.graph->record(std::move(out), {x.id}, [mask](Graph& g, int self) {
    const auto& dy = g.grad(self);
    auto& dx = g.grad(g.parents(self)[0]);
    for (std::size_t i = 0; i < dx.size(); ++i) {
      dx[i] += dy[i] * (*mask)[i];
    }
  });
}

// Same value, no gradient flow.
inline Var detach(Var x) { return x.graph->constant(x.value()); }

}  // namespace persona::diff
