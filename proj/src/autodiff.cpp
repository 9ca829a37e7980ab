// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "forgetlab/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "forgetlab/error.hpp"

namespace forgetlab::ad {

namespace kernel {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
          const double* b, double* c, bool accumulate) {
  if (m == 0 || n == 0) return;
  Eigen::Map<RowMat> out(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  if (k == 0) {
    if (!accumulate) out.setZero();
    return;
  }
  const auto mi = static_cast<Eigen::Index>(m);
  const auto ni = static_cast<Eigen::Index>(n);
  const auto ki = static_cast<Eigen::Index>(k);
  ConstMap lhs(a, trans_a ? ki : mi, trans_a ? mi : ki);
  ConstMap rhs(b, trans_b ? ni : ki, trans_b ? ki : ni);
  auto run = [&](const auto& l, const auto& r) {
    if (accumulate) {
      out.noalias() += l * r;
    } else {
      out.noalias() = l * r;
    }
  };
  if (!trans_a && !trans_b) run(lhs, rhs);
  if (!trans_a && trans_b) run(lhs, rhs.transpose());
  if (trans_a && !trans_b) run(lhs.transpose(), rhs);
  if (trans_a && trans_b) run(lhs.transpose(), rhs.transpose());
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, Backward backward) {
  bool needs = false;
  for (const Var& in : inputs) {
    require(in.valid() && &in.tape() == this, ErrorCode::input, "op input belongs to another tape");
    needs = needs || nodes_[in.id()].requires_grad;
  }
  Node node{std::move(value), {}, {}, needs};
  if (needs) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var root) {
  require(!backward_done_, ErrorCode::runtime, "backward already ran on this tape");
  require(root.valid() && &root.tape() == this, ErrorCode::input, "backward root not on tape");
  require(value(root).size() == 1, ErrorCode::shape, "backward root must be a scalar");
  backward_done_ = true;
  grad_buffer(root)[0] = 1.0;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || node.grad.empty() || !node.backward) continue;
    node.backward(*this, node.grad);
  }
}

const Tensor& Tape::grad(Var v) { return grad_buffer(v); }

Tensor& Tape::grad_buffer(Var v) {
  Node& node = nodes_[v.id()];
  if (node.grad.empty() && !node.value.empty()) node.grad = Tensor(node.value.shape(), 0.0);
  return node.grad;
}

// ---------------------------------------------------------------------------
// Ops

namespace {

void same_shape(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), ErrorCode::shape,
          std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
              shape_string(b.shape()));
}

void accumulate(Tape& tape, Var target, std::span<const double> g, double factor = 1.0) {
  if (!tape.requires_grad(target)) return;
  auto dst = tape.grad_buffer(target).data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += factor * g[i];
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Var add(Var a, Var b) {
  same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    accumulate(t, a, g.data());
    accumulate(t, b, g.data());
  });
}

Var sub(Var a, Var b) {
  same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    accumulate(t, a, g.data());
    accumulate(t, b, g.data(), -1.0);
  });
}

Var mul(Var a, Var b) {
  same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (t.requires_grad(a)) {
      auto da = t.grad_buffer(a).data();
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      auto db = t.grad_buffer(b).data();
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  vec::scale(factor, out.data());
  return a.tape().record(std::move(out), {a}, [a, factor](Tape& t, const Tensor& g) {
    accumulate(t, a, g.data(), factor);
  });
}

Var sum(Var a) {
  const auto& x = a.value().storage();
  const double s = std::accumulate(x.begin(), x.end(), 0.0);
  return a.tape().record(Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g) {
    auto da = t.grad_buffer(a).data();
    for (double& d : da) d += g[0];
  });
}

Var mean(Var a) {
  require(a.value().size() > 0, ErrorCode::shape, "mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var dot(Var a, Var b) {
  same_shape(a, b, "dot");
  const double s = vec::dot(a.value().data(), b.value().data());
  return a.tape().record(Tensor::scalar(s), {a, b}, [a, b](Tape& t, const Tensor& g) {
    accumulate(t, a, b.value().data(), g[0]);
    accumulate(t, b, a.value().data(), g[0]);
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    accumulate(t, a, g.data());
  });
}

Var matmul(Var x, Var w) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require(wv.rank() == 2, ErrorCode::shape, "matmul: weight must be rank 2");
  const std::size_t k = wv.dim(0);
  const std::size_t n = wv.dim(1);
  require(xv.rank() >= 1 && xv.cols() == k, ErrorCode::shape,
          "matmul: inner dimension mismatch " + shape_string(xv.shape()) + " x " +
              shape_string(wv.shape()));
  const std::size_t rows = xv.rows();
  Shape out_shape = xv.shape();
  out_shape.back() = n;
  Tensor out(out_shape, 0.0);
  kernel::gemm(false, false, rows, n, k, xv.data().data(), wv.data().data(), out.data().data(), false);
  return x.tape().record(std::move(out), {x, w}, [x, w, rows, n, k](Tape& t, const Tensor& g) {
    if (t.requires_grad(x)) {
      kernel::gemm(false, true, rows, k, n, g.data().data(), w.value().data().data(),
                   t.grad_buffer(x).data().data(), true);
    }
    if (t.requires_grad(w)) {
      kernel::gemm(true, false, k, n, rows, x.value().data().data(), g.data().data(),
                   t.grad_buffer(w).data().data(), true);
    }
  });
}

Var add_bias(Var x, Var b) {
  const Tensor& xv = x.value();
  const std::size_t n = b.value().size();
  require(b.value().rank() == 1 && xv.cols() == n, ErrorCode::shape, "add_bias: width mismatch");
  Tensor out = xv;
  const std::size_t rows = xv.rows();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += b.value()[j];
  return x.tape().record(std::move(out), {x, b}, [x, b, rows, n](Tape& t, const Tensor& g) {
    accumulate(t, x, g.data());
    if (t.requires_grad(b)) {
      auto db = t.grad_buffer(b).data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) db[j] += g[r * n + j];
    }
  });
}

Var embedding(std::span<const std::int32_t> tokens, std::size_t batch, std::size_t seq, Var table,
              Var positions) {
  const Tensor& tv = table.value();
  const Tensor& pv = positions.value();
  require(tokens.size() == batch * seq, ErrorCode::shape, "embedding: token count mismatch");
  require(tv.rank() == 2 && pv.rank() == 2 && tv.dim(1) == pv.dim(1) && seq <= pv.dim(0),
          ErrorCode::shape, "embedding: table shapes");
  const std::size_t d = tv.dim(1);
  const std::size_t vocab = tv.dim(0);
  Tensor out({batch, seq, d}, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t s = 0; s < seq; ++s) {
      const auto tok = tokens[b * seq + s];
      require(tok >= 0 && static_cast<std::size_t>(tok) < vocab, ErrorCode::input,
              "embedding: token id out of range");
      double* row = &out[(b * seq + s) * d];
      const double* te = &tv[static_cast<std::size_t>(tok) * d];
      const double* pe = &pv[s * d];
      for (std::size_t j = 0; j < d; ++j) row[j] = te[j] + pe[j];
    }
  }
  std::vector<std::int32_t> ids(tokens.begin(), tokens.end());
  return table.tape().record(
      std::move(out), {table, positions},
      [table, positions, ids = std::move(ids), batch, seq, d](Tape& t, const Tensor& g) {
        if (t.requires_grad(table)) {
          auto dt = t.grad_buffer(table).data();
          for (std::size_t r = 0; r < batch * seq; ++r) {
            double* dst = &dt[static_cast<std::size_t>(ids[r]) * d];
            for (std::size_t j = 0; j < d; ++j) dst[j] += g[r * d + j];
          }
        }
        if (t.requires_grad(positions)) {
          auto dp = t.grad_buffer(positions).data();
          for (std::size_t r = 0; r < batch * seq; ++r) {
            double* dst = &dp[(r % seq) * d];
            for (std::size_t j = 0; j < d; ++j) dst[j] += g[r * d + j];
          }
        }
      });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols();
  require(gain.value().size() == d && bias.value().size() == d, ErrorCode::shape,
          "layer_norm: parameter width mismatch");
  const std::size_t rows = xv.rows();
  Tensor out(xv.shape(), 0.0);
  std::vector<double> xhat(xv.size());
  std::vector<double> rstd(rows);
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = &xv[r * d];
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mu) * rs;
      xhat[r * d + j] = xh;
      out[r * d + j] = gv[j] * xh + bv[j];
    }
  }
  return x.tape().record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t,
                                                                             const Tensor& g) {
        const auto& gv = gain.value();
        if (t.requires_grad(gain) || t.requires_grad(bias)) {
          const bool want_g = t.requires_grad(gain);
          const bool want_b = t.requires_grad(bias);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
              if (want_g) t.grad_buffer(gain)[j] += g[r * d + j] * xhat[r * d + j];
              if (want_b) t.grad_buffer(bias)[j] += g[r * d + j];
            }
          }
        }
        if (!t.requires_grad(x)) return;
        auto dx = t.grad_buffer(x).data();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_dxh = 0.0;
          double mean_dxh_xh = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = g[r * d + j] * gv[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xhat[r * d + j];
          }
          mean_dxh *= inv_d;
          mean_dxh_xh *= inv_d;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = g[r * d + j] * gv[j];
            dx[r * d + j] += rstd[r] * (dxh - mean_dxh - xhat[r * d + j] * mean_dxh_xh);
          }
        }
      });
}

Var swiglu(Var x) {
  const Tensor& xv = x.value();
  const std::size_t width = xv.cols();
  require(width % 2 == 0, ErrorCode::shape, "swiglu: last axis must be even");
  const std::size_t f = width / 2;
  const std::size_t rows = xv.rows();
  Shape shape = xv.shape();
  shape.back() = f;
  Tensor out(shape, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < f; ++j) {
      const double a = xv[r * width + j];
      const double b = xv[r * width + f + j];
      out[r * f + j] = a * sigmoid(a) * b;
    }
  }
  return x.tape().record(std::move(out), {x}, [x, rows, f, width](Tape& t, const Tensor& g) {
    const auto& xv = x.value();
    auto dx = t.grad_buffer(x).data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < f; ++j) {
        const double a = xv[r * width + j];
        const double b = xv[r * width + f + j];
        const double s = sigmoid(a);
        const double silu = a * s;
        const double dsilu = s * (1.0 + a * (1.0 - s));
        dx[r * width + j] += g[r * f + j] * b * dsilu;
        dx[r * width + f + j] += g[r * f + j] * silu;
      }
    }
  });
}

Var gelu(Var x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double a3 = 0.044715;
  Tensor out = x.value();
  for (double& v : out.data()) {
    const double u = c * (v + a3 * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(u));
  }
  return x.tape().record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    const auto& xv = x.value();
    auto dx = t.grad_buffer(x).data();
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double v = xv[i];
      const double u = c * (v + a3 * v * v * v);
      const double th = std::tanh(u);
      const double du = c * (1.0 + 3.0 * a3 * v * v);
      dx[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
    }
  });
}

AttentionResult causal_attention(Var q, Var k, Var v, std::size_t n_heads,
                                 std::span<const bool> head_enabled) {
  same_shape(q, k, "attention");
  same_shape(q, v, "attention");
  const Tensor& qv = q.value();
  require(qv.rank() == 3, ErrorCode::shape, "attention expects [B, T, D]");
  const std::size_t B = qv.dim(0);
  const std::size_t T = qv.dim(1);
  const std::size_t D = qv.dim(2);
  require(n_heads > 0 && D % n_heads == 0, ErrorCode::shape, "attention: heads must divide width");
  require(head_enabled.size() == n_heads, ErrorCode::shape, "attention: head flag count");
  const std::size_t dh = D / n_heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();

  Tensor probs({B, n_heads, T, T}, 0.0);
  Tensor ctx({B, T, D}, 0.0);
  std::vector<double> scores(T);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      double* P = &probs[((b * n_heads + h) * T) * T];
      for (std::size_t i = 0; i < T; ++i) {
        const double* qi = &qv[(b * T + i) * D + h * dh];
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const double* kj = &kv[(b * T + j) * D + h * dh];
          double s = 0.0;
          for (std::size_t e = 0; e < dh; ++e) s += qi[e] * kj[e];
          scores[j] = s * scl;
          mx = std::max(mx, scores[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          z += scores[j];
        }
        for (std::size_t j = 0; j <= i; ++j) P[i * T + j] = scores[j] / z;
        if (!head_enabled[h]) continue;
        double* ci = &ctx[(b * T + i) * D + h * dh];
        for (std::size_t j = 0; j <= i; ++j) {
          const double p = P[i * T + j];
          const double* vj = &vv[(b * T + j) * D + h * dh];
          for (std::size_t e = 0; e < dh; ++e) ci[e] += p * vj[e];
        }
      }
    }
  }

  std::vector<bool> enabled(head_enabled.begin(), head_enabled.end());
  AttentionResult result;
  result.probs = probs;
  result.context = q.tape().record(
      std::move(ctx), {q, k, v},
      [q, k, v, B, T, D, n_heads, dh, scl, enabled = std::move(enabled),
       probs = std::move(probs)](Tape& t, const Tensor& g) {
        const auto& qv = q.value();
        const auto& kv = k.value();
        const auto& vv = v.value();
        const bool want_q = t.requires_grad(q);
        const bool want_k = t.requires_grad(k);
        const bool want_v = t.requires_grad(v);
        double* dq = want_q ? t.grad_buffer(q).data().data() : nullptr;
        double* dk = want_k ? t.grad_buffer(k).data().data() : nullptr;
        double* dv = want_v ? t.grad_buffer(v).data().data() : nullptr;
        std::vector<double> dP(T);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < n_heads; ++h) {
            if (!enabled[h]) continue;
            const double* P = &probs[((b * n_heads + h) * T) * T];
            for (std::size_t i = 0; i < T; ++i) {
              const double* gi = &g[(b * T + i) * D + h * dh];
              double row_dot = 0.0;
              for (std::size_t j = 0; j <= i; ++j) {
                const double* vj = &vv[(b * T + j) * D + h * dh];
                double s = 0.0;
                for (std::size_t e = 0; e < dh; ++e) s += gi[e] * vj[e];
                dP[j] = s;
                row_dot += P[i * T + j] * s;
                if (dv) {
                  double* dvj = &dv[(b * T + j) * D + h * dh];
                  const double p = P[i * T + j];
                  for (std::size_t e = 0; e < dh; ++e) dvj[e] += p * gi[e];
                }
              }
              if (!dq && !dk) continue;
              const double* qi = &qv[(b * T + i) * D + h * dh];
              for (std::size_t j = 0; j <= i; ++j) {
                const double ds = P[i * T + j] * (dP[j] - row_dot) * scl;
                const double* kj = &kv[(b * T + j) * D + h * dh];
                if (dq) {
                  double* dqi = &dq[(b * T + i) * D + h * dh];
                  for (std::size_t e = 0; e < dh; ++e) dqi[e] += ds * kj[e];
                }
                if (dk) {
                  double* dkj = &dk[(b * T + j) * D + h * dh];
                  for (std::size_t e = 0; e < dh; ++e) dkj[e] += ds * qi[e];
                }
              }
            }
          }
        }
      });
  return result;
}

Var last_position(Var x) {
  const Tensor& xv = x.value();
  require(xv.rank() == 3, ErrorCode::shape, "last_position expects [B, T, D]");
  const std::size_t B = xv.dim(0), T = xv.dim(1), D = xv.dim(2);
  Tensor out({B, D}, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    std::copy_n(&xv[(b * T + T - 1) * D], D, &out[b * D]);
  return x.tape().record(std::move(out), {x}, [x, B, T, D](Tape& t, const Tensor& g) {
    auto dx = t.grad_buffer(x).data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < D; ++j) dx[(b * T + T - 1) * D + j] += g[b * D + j];
  });
}

Var cross_entropy(Var logits, std::span<const std::int32_t> labels) {
  const Tensor& lv = logits.value();
  require(lv.rank() == 2 && lv.dim(0) == labels.size(), ErrorCode::shape,
          "cross_entropy: logits/labels mismatch");
  const std::size_t B = lv.dim(0), C = lv.dim(1);
  require(B > 0, ErrorCode::input, "cross_entropy: empty batch");
  std::vector<double> soft(lv.size());
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const auto y = labels[b];
    require(y >= 0 && static_cast<std::size_t>(y) < C, ErrorCode::input,
            "cross_entropy: label out of range");
    const double* row = &lv[b * C];
    const double mx = *std::max_element(row, row + C);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      soft[b * C + c] = std::exp(row[c] - mx);
      z += soft[b * C + c];
    }
    for (std::size_t c = 0; c < C; ++c) soft[b * C + c] /= z;
    total += (mx + std::log(z)) - row[y];
  }
  std::vector<std::int32_t> ys(labels.begin(), labels.end());
  return logits.tape().record(
      Tensor::scalar(total / static_cast<double>(B)), {logits},
      [logits, B, C, soft = std::move(soft), ys = std::move(ys)](Tape& t, const Tensor& g) {
        auto dl = t.grad_buffer(logits).data();
        const double f = g[0] / static_cast<double>(B);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t c = 0; c < C; ++c) {
            const double target = static_cast<std::size_t>(ys[b]) == c ? 1.0 : 0.0;
            dl[b * C + c] += f * (soft[b * C + c] - target);
          }
        }
      });
}

GateResult topk_gating(Var logits, std::size_t k) {
  const Tensor& lv = logits.value();
  require(lv.rank() == 2, ErrorCode::shape, "topk_gating expects [N, E]");
  const std::size_t N = lv.dim(0), E = lv.dim(1);
  require(k >= 1 && k <= E, ErrorCode::config, "topk_gating: k out of range");
  Tensor gates({N, E}, 0.0);
  GateResult result;
  result.top.resize(N * k);
  std::vector<std::size_t> order(E);
  for (std::size_t n = 0; n < N; ++n) {
    const double* row = &lv[n * E];
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [row](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    // Renormalized top-k of a softmax equals a softmax over the kept logits.
    const double mx = row[order[0]];
    double z = 0.0;
    for (std::size_t i = 0; i < k; ++i) z += std::exp(row[order[i]] - mx);
    for (std::size_t i = 0; i < k; ++i) {
      gates[n * E + order[i]] = std::exp(row[order[i]] - mx) / z;
      result.top[n * k + i] = static_cast<std::int32_t>(order[i]);
    }
  }
  std::vector<std::int32_t> top = result.top;
  result.gates = logits.tape().record(
      std::move(gates), {logits}, [logits, N, E, k, top = std::move(top)](Tape& t, const Tensor& g) {
        // Recompute the kept softmax from the logits.
        const auto& lv = logits.value();
        auto dl = t.grad_buffer(logits).data();
        std::vector<double> p(k);
        for (std::size_t n = 0; n < N; ++n) {
          const double* row = &lv[n * E];
          const double mx = row[top[n * k]];
          double z = 0.0;
          for (std::size_t i = 0; i < k; ++i) {
            p[i] = std::exp(row[top[n * k + i]] - mx);
            z += p[i];
          }
          double inner = 0.0;
          for (std::size_t i = 0; i < k; ++i) {
            p[i] /= z;
            inner += p[i] * g[n * E + static_cast<std::size_t>(top[n * k + i])];
          }
          for (std::size_t i = 0; i < k; ++i) {
            const auto e = static_cast<std::size_t>(top[n * k + i]);
            dl[n * E + e] += p[i] * (g[n * E + e] - inner);
          }
        }
      });
  return result;
}

Var scale_rows(Var x, Var gates, std::size_t column) {
  const Tensor& xv = x.value();
  const Tensor& gv = gates.value();
  require(gv.rank() == 2 && column < gv.dim(1) && xv.rows() == gv.dim(0), ErrorCode::shape,
          "scale_rows: shape mismatch");
  const std::size_t N = xv.rows(), D = xv.cols(), E = gv.dim(1);
  Tensor out = xv;
  for (std::size_t n = 0; n < N; ++n) {
    const double s = gv[n * E + column];
    for (std::size_t j = 0; j < D; ++j) out[n * D + j] *= s;
  }
  return x.tape().record(std::move(out), {x, gates}, [x, gates, column, N, D, E](Tape& t, const Tensor& g) {
    const auto& xv = x.value();
    const auto& gv = gates.value();
    if (t.requires_grad(x)) {
      auto dx = t.grad_buffer(x).data();
      for (std::size_t n = 0; n < N; ++n) {
        const double s = gv[n * E + column];
        for (std::size_t j = 0; j < D; ++j) dx[n * D + j] += g[n * D + j] * s;
      }
    }
    if (t.requires_grad(gates)) {
      auto dg = t.grad_buffer(gates).data();
      for (std::size_t n = 0; n < N; ++n) {
        double s = 0.0;
        for (std::size_t j = 0; j < D; ++j) s += g[n * D + j] * xv[n * D + j];
        dg[n * E + column] += s;
      }
    }
  });
}

}  // namespace forgetlab::ad
