#pragma once

#include "msvad/numcore/matrix.hpp"
#include "msvad/rng.hpp"

#include <cassert>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace msvad {

/// A named learnable parameter with its gradient accumulator.
struct Param {
  std::string name;
  Matrix value;
  Matrix grad;  // same shape as value once allocated

  void zero_grad() {
    if (grad.rows != value.rows || grad.cols != value.cols) {
      grad = Matrix(value.rows, value.cols);
    } else {
      std::fill(grad.d.begin(), grad.d.end(), 0.0);
    }
  }
};

/// Ordered collection of parameters; iteration order is creation order,
/// which fixes optimizer and checkpoint traversal order.
class ParamStore {
 public:
  Param& create(const std::string& name, int rows, int cols) {
    if (index_.count(name)) throw std::invalid_argument("param exists: " + name);
    auto p = std::make_unique<Param>();
    p->name = name;
    p->value = Matrix(rows, cols);
    index_[name] = items_.size();
    items_.push_back(std::move(p));
    return *items_.back();
  }

  Param* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : items_[it->second].get();
  }
  const Param* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : items_[it->second].get();
  }

  Param& at(const std::string& name) {
    Param* p = find(name);
    if (!p) throw std::out_of_range("no such param: " + name);
    return *p;
  }
  const Param& at(const std::string& name) const {
    const Param* p = find(name);
    if (!p) throw std::out_of_range("no such param: " + name);
    return *p;
  }

  std::size_t size() const { return items_.size(); }
  Param& operator[](std::size_t i) { return *items_[i]; }
  const Param& operator[](std::size_t i) const { return *items_[i]; }

  void zero_grads() {
    for (auto& p : items_) p->zero_grad();
  }

  std::size_t value_count() const {
    std::size_t n = 0;
    for (auto& p : items_) n += p->value.size();
    return n;
  }

  /// Deep copy (values only; grads reset).
  ParamStore clone_values() const {
    ParamStore out;
    for (auto& p : items_) {
      Param& q = out.create(p->name, p->value.rows, p->value.cols);
      q.value = p->value;
    }
    return out;
  }

 private:
  std::vector<std::unique_ptr<Param>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Var {
  int i = -1;
  bool valid() const { return i >= 0; }
};

/// Reverse-mode tape. Records primitive ops in execution order; backward()
/// walks them in exact reverse order. Single-threaded by construction;
/// independent tapes may run on separate threads.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const Matrix& val(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.i)];
    return n.param ? n.param->value : n.value;
  }

  /// Gradient buffer of a node; allocated (zeros) on first access.
  Matrix& grad(Var v) {
    Node& n = nodes_[static_cast<std::size_t>(v.i)];
    const Matrix& m = n.param ? n.param->value : n.value;
    if (n.grad.rows != m.rows || n.grad.cols != m.cols) n.grad = Matrix(m.rows, m.cols);
    return n.grad;
  }

  bool has_grad(Var v) const {
    return !nodes_[static_cast<std::size_t>(v.i)].grad.empty();
  }

  Var constant(Matrix m) { return push(std::move(m), nullptr, {}); }

  /// Binds an external parameter as a leaf; memoized per tape so repeated
  /// uses share one node. Backward adds into param.grad.
  Var use(Param& p) {
    auto it = leaves_.find(&p);
    if (it != leaves_.end()) return it->second;
    Var v = push(Matrix(), &p, {});
    Var copy = v;
    nodes_[static_cast<std::size_t>(v.i)].back = [copy](Tape& t) {
      Node& n = t.nodes_[static_cast<std::size_t>(copy.i)];
      if (n.grad.empty()) return;
      if (n.param->grad.empty()) n.param->zero_grad();
      axpy(n.param->grad, 1.0, n.grad);
    };
    leaves_[&p] = v;
    return v;
  }

  // ---- primitive ops ----

  Var matmul(Var a, Var b) {
    const Matrix& A = val(a);
    const Matrix& B = val(b);
    return push(mm(A, B), nullptr, [a, b](Tape& t, Var self) {
      const Matrix& g = t.grad(self);
      mm_nt_acc(t.grad(a), g, t.val(b));
      mm_tn_acc(t.grad(b), t.val(a), g);
    });
  }

  /// C = A * B^T
  Var matmul_nt(Var a, Var b) {
    const Matrix& A = val(a);
    const Matrix& B = val(b);
    return push(mm_nt(A, B), nullptr, [a, b](Tape& t, Var self) {
      const Matrix& g = t.grad(self);
      mm_acc(t.grad(a), g, t.val(b));
      mm_tn_acc(t.grad(b), g, t.val(a));
    });
  }

  Var add(Var a, Var b) {
    const Matrix& A = val(a);
    const Matrix& B = val(b);
    check_shape(A.same_shape(B), "add");
    Matrix c = A;
    axpy(c, 1.0, B);
    return push(std::move(c), nullptr, [a, b](Tape& t, Var self) {
      const Matrix& g = t.grad(self);
      axpy(t.grad(a), 1.0, g);
      axpy(t.grad(b), 1.0, g);
    });
  }

  Var sub(Var a, Var b) {
    const Matrix& A = val(a);
    const Matrix& B = val(b);
    check_shape(A.same_shape(B), "sub");
    Matrix c = A;
    axpy(c, -1.0, B);
    return push(std::move(c), nullptr, [a, b](Tape& t, Var self) {
      const Matrix& g = t.grad(self);
      axpy(t.grad(a), 1.0, g);
      axpy(t.grad(b), -1.0, g);
    });
  }

  Var hadamard(Var a, Var b) {
    const Matrix& A = val(a);
    const Matrix& B = val(b);
    check_shape(A.same_shape(B), "hadamard");
    Matrix c = A;
    for (std::size_t i = 0; i < c.d.size(); ++i) c.d[i] *= B.d[i];
    return push(std::move(c), nullptr, [a, b](Tape& t, Var self) {
      const Matrix& g = t.grad(self);
      const Matrix& A2 = t.val(a);
      const Matrix& B2 = t.val(b);
      Matrix& ga = t.grad(a);
      Matrix& gb = t.grad(b);
      for (std::size_t i = 0; i < g.d.size(); ++i) {
        ga.d[i] += g.d[i] * B2.d[i];
        gb.d[i] += g.d[i] * A2.d[i];
      }
    });
  }

  Var scale(Var a, double s) {
    Matrix c = val(a);
    for (double& v : c.d) v *= s;
    return push(std::move(c), nullptr, [a, s](Tape& t, Var self) {
      axpy(t.grad(a), s, t.grad(self));
    });
  }

  /// Adds a 1 x n row vector to every row of a (m x n).
  Var add_rowvec(Var a, Var v) {
    const Matrix& A = val(a);
    const Matrix& V = val(v);
    check_shape(V.rows == 1 && V.cols == A.cols, "add_rowvec");
    Matrix c = A;
    for (int r = 0; r < c.rows; ++r) {
      double* p = c.row_ptr(r);
      for (int j = 0; j < c.cols; ++j) p[j] += V.d[static_cast<std::size_t>(j)];
    }
    return push(std::move(c), nullptr, [a, v](Tape& t, Var self) {
      const Matrix& g = t.grad(self);
      axpy(t.grad(a), 1.0, g);
      Matrix& gv = t.grad(v);
      for (int r = 0; r < g.rows; ++r) {
        const double* p = g.row_ptr(r);
        for (int j = 0; j < g.cols; ++j) gv.d[static_cast<std::size_t>(j)] += p[j];
      }
    });
  }

  Var relu(Var a) {
    Matrix c = val(a);
    for (double& v : c.d) v = v > 0.0 ? v : 0.0;
    return push(std::move(c), nullptr, [a](Tape& t, Var self) {
      const Matrix& g = t.grad(self);
      const Matrix& A2 = t.val(a);
      Matrix& ga = t.grad(a);
      for (std::size_t i = 0; i < g.d.size(); ++i)
        if (A2.d[i] > 0.0) ga.d[i] += g.d[i];
    });
  }

  Var sigmoid(Var a) {
    Matrix c = val(a);
    for (double& v : c.d) v = 1.0 / (1.0 + std::exp(-v));
    return push(std::move(c), nullptr, [a](Tape& t, Var self) {
      const Matrix& g = t.grad(self);
      const Matrix& Y = t.val(self);
      Matrix& ga = t.grad(a);
      for (std::size_t i = 0; i < g.d.size(); ++i)
        ga.d[i] += g.d[i] * Y.d[i] * (1.0 - Y.d[i]);
    });
  }

  /// Row softmax with max subtraction. mask (same shape, 1 = keep) forces
  /// masked entries to probability exactly 0; a fully-masked row throws.
  Var softmax_rows(Var a, const Matrix* mask = nullptr) {
    const Matrix& A = val(a);
    if (mask) check_shape(mask->rows == A.rows && mask->cols == A.cols, "softmax mask");
    Matrix c(A.rows, A.cols);
    for (int r = 0; r < A.rows; ++r) {
      const double* x = A.row_ptr(r);
      double* y = c.row_ptr(r);
      const double* m = mask ? mask->row_ptr(r) : nullptr;
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < A.cols; ++j)
        if (!m || m[j] != 0.0) mx = std::max(mx, x[j]);
      if (!std::isfinite(mx)) throw std::invalid_argument("softmax_rows: fully masked row");
      double z = 0.0;
      for (int j = 0; j < A.cols; ++j) {
        y[j] = (!m || m[j] != 0.0) ? std::exp(x[j] - mx) : 0.0;
        z += y[j];
      }
      for (int j = 0; j < A.cols; ++j) y[j] /= z;
    }
    return push(std::move(c), nullptr, [a](Tape& t, Var self) {
      const Matrix& g = t.grad(self);
      const Matrix& Y = t.val(self);
      Matrix& ga = t.grad(a);
      for (int r = 0; r < g.rows; ++r) {
        const double* gr = g.row_ptr(r);
        const double* yr = Y.row_ptr(r);
        double* gar = ga.row_ptr(r);
        double dot = 0.0;
        for (int j = 0; j < g.cols; ++j) dot += gr[j] * yr[j];
        for (int j = 0; j < g.cols; ++j) gar[j] += (gr[j] - dot) * yr[j];
      }
    });
  }

  /// Row-wise layer normalization with affine gain/bias (both 1 x n).
  Var layernorm(Var x, Var gain, Var bias, double eps = 1e-5) {
    const Matrix& X = val(x);
    const Matrix& G = val(gain);
    const Matrix& B = val(bias);
    check_shape(G.rows == 1 && B.rows == 1 && G.cols == X.cols && B.cols == X.cols,
                "layernorm affine");
    Matrix c(X.rows, X.cols);
    for (int r = 0; r < X.rows; ++r) {
      const double* p = X.row_ptr(r);
      double* y = c.row_ptr(r);
      const int n = X.cols;
      double mu = 0.0;
      for (int j = 0; j < n; ++j) mu += p[j];
      mu /= n;
      double var = 0.0;
      for (int j = 0; j < n; ++j) var += (p[j] - mu) * (p[j] - mu);
      var /= n;
      const double inv = 1.0 / std::sqrt(var + eps);
      for (int j = 0; j < n; ++j)
        y[j] = (p[j] - mu) * inv * G.d[static_cast<std::size_t>(j)] +
               B.d[static_cast<std::size_t>(j)];
    }
    return push(std::move(c), nullptr, [x, gain, bias, eps](Tape& t, Var self) {
      const Matrix& g = t.grad(self);
      const Matrix& X2 = t.val(x);
      const Matrix& G2 = t.val(gain);
      Matrix& gx = t.grad(x);
      Matrix& gg = t.grad(gain);
      Matrix& gb = t.grad(bias);
      const int n = X2.cols;
      std::vector<double> xhat(static_cast<std::size_t>(n));
      for (int r = 0; r < X2.rows; ++r) {
        const double* p = X2.row_ptr(r);
        const double* gr = g.row_ptr(r);
        double* gxr = gx.row_ptr(r);
        double mu = 0.0;
        for (int j = 0; j < n; ++j) mu += p[j];
        mu /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) var += (p[j] - mu) * (p[j] - mu);
        var /= n;
        const double inv = 1.0 / std::sqrt(var + eps);
        double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat*xhat)
        for (int j = 0; j < n; ++j) {
          xhat[static_cast<std::size_t>(j)] = (p[j] - mu) * inv;
          const double dxh = gr[j] * G2.d[static_cast<std::size_t>(j)];
          m1 += dxh;
          m2 += dxh * xhat[static_cast<std::size_t>(j)];
        }
        m1 /= n;
        m2 /= n;
        for (int j = 0; j < n; ++j) {
          const double dxh = gr[j] * G2.d[static_cast<std::size_t>(j)];
          gxr[j] += (dxh - m1 - xhat[static_cast<std::size_t>(j)] * m2) * inv;
          gg.d[static_cast<std::size_t>(j)] += gr[j] * xhat[static_cast<std::size_t>(j)];
          gb.d[static_cast<std::size_t>(j)] += gr[j];
        }
      }
    });
  }

  /// Inverted-scaling dropout; identity when not training or rate == 0.
  Var dropout(Var a, double rate, Rng* rng, bool training) {
    if (!training || rate == 0.0) return a;
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout rate");
    if (!rng) throw std::invalid_argument("dropout: rng required in training");
    const Matrix& A = val(a);
    const double keep = 1.0 - rate;
    auto mask = std::make_shared<Matrix>(A.rows, A.cols);
    Matrix c = A;
    for (std::size_t i = 0; i < c.d.size(); ++i) {
      const double m = rng->uniform01() < keep ? 1.0 / keep : 0.0;
      mask->d[i] = m;
      c.d[i] *= m;
    }
    return push(std::move(c), nullptr, [a, mask](Tape& t, Var self) {
      const Matrix& g = t.grad(self);
      Matrix& ga = t.grad(a);
      for (std::size_t i = 0; i < g.d.size(); ++i) ga.d[i] += g.d[i] * mask->d[i];
    });
  }

  Var slice_cols(Var a, int c0, int c1) {
    const Matrix& A = val(a);
    check_shape(0 <= c0 && c0 < c1 && c1 <= A.cols, "slice_cols");
    Matrix c(A.rows, c1 - c0);
    for (int r = 0; r < A.rows; ++r) {
      const double* p = A.row_ptr(r) + c0;
      std::copy(p, p + (c1 - c0), c.row_ptr(r));
    }
    return push(std::move(c), nullptr, [a, c0, c1](Tape& t, Var self) {
      const Matrix& g = t.grad(self);
      Matrix& ga = t.grad(a);
      for (int r = 0; r < g.rows; ++r) {
        const double* p = g.row_ptr(r);
        double* q = ga.row_ptr(r) + c0;
        for (int j = 0; j < c1 - c0; ++j) q[j] += p[j];
      }
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    int rows = val(parts[0]).rows;
    int cols = 0;
    for (Var p : parts) {
      check_shape(val(p).rows == rows, "concat_cols rows");
      cols += val(p).cols;
    }
    Matrix c(rows, cols);
    int off = 0;
    for (Var p : parts) {
      const Matrix& P = val(p);
      for (int r = 0; r < rows; ++r)
        std::copy(P.row_ptr(r), P.row_ptr(r) + P.cols, c.row_ptr(r) + off);
      off += P.cols;
    }
    auto ps = std::make_shared<std::vector<Var>>(parts);
    return push(std::move(c), nullptr, [ps](Tape& t, Var self) {
      const Matrix& g = t.grad(self);
      int off2 = 0;
      for (Var p : *ps) {
        Matrix& gp = t.grad(p);
        for (int r = 0; r < g.rows; ++r) {
          const double* src = g.row_ptr(r) + off2;
          double* dst = gp.row_ptr(r);
          for (int j = 0; j < gp.cols; ++j) dst[j] += src[j];
        }
        off2 += gp.cols;
      }
    });
  }

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    int cols = val(parts[0]).cols;
    int rows = 0;
    for (Var p : parts) {
      check_shape(val(p).cols == cols, "concat_rows cols");
      rows += val(p).rows;
    }
    Matrix c(rows, cols);
    int off = 0;
    for (Var p : parts) {
      const Matrix& P = val(p);
      std::copy(P.d.begin(), P.d.end(), c.d.begin() + static_cast<std::ptrdiff_t>(off) * cols);
      off += P.rows;
    }
    auto ps = std::make_shared<std::vector<Var>>(parts);
    return push(std::move(c), nullptr, [ps](Tape& t, Var self) {
      const Matrix& g = t.grad(self);
      int off2 = 0;
      for (Var p : *ps) {
        Matrix& gp = t.grad(p);
        for (std::size_t i = 0; i < gp.d.size(); ++i)
          gp.d[i] += g.d[static_cast<std::size_t>(off2) * g.cols + i];
        off2 += gp.rows;
      }
    });
  }

  /// Mean over rows -> 1 x n.
  Var mean_rows(Var a) {
    const Matrix& A = val(a);
    check_shape(A.rows >= 1, "mean_rows");
    Matrix c(1, A.cols);
    for (int r = 0; r < A.rows; ++r)
      for (int j = 0; j < A.cols; ++j) c.d[static_cast<std::size_t>(j)] += A.at(r, j);
    for (double& v : c.d) v /= A.rows;
    const double inv = 1.0 / A.rows;
    return push(std::move(c), nullptr, [a, inv](Tape& t, Var self) {
      const Matrix& g = t.grad(self);
      Matrix& ga = t.grad(a);
      for (int r = 0; r < ga.rows; ++r) {
        double* p = ga.row_ptr(r);
        for (int j = 0; j < ga.cols; ++j) p[j] += g.d[static_cast<std::size_t>(j)] * inv;
      }
    });
  }

  /// P[t] = mean of rows 0..t. Row t of the output depends only on rows <= t.
  Var prefix_mean_rows(Var a) {
    const Matrix& A = val(a);
    Matrix c(A.rows, A.cols);
    std::vector<double> acc(static_cast<std::size_t>(A.cols), 0.0);
    for (int r = 0; r < A.rows; ++r) {
      const double* p = A.row_ptr(r);
      double* y = c.row_ptr(r);
      const double inv = 1.0 / (r + 1);
      for (int j = 0; j < A.cols; ++j) {
        acc[static_cast<std::size_t>(j)] += p[j];
        y[j] = acc[static_cast<std::size_t>(j)] * inv;
      }
    }
    return push(std::move(c), nullptr, [a](Tape& t, Var self) {
      const Matrix& g = t.grad(self);
      Matrix& ga = t.grad(a);
      std::vector<double> suf(static_cast<std::size_t>(g.cols), 0.0);
      for (int r = g.rows - 1; r >= 0; --r) {
        const double* gp = g.row_ptr(r);
        double* gap = ga.row_ptr(r);
        const double inv = 1.0 / (r + 1);
        for (int j = 0; j < g.cols; ++j) {
          suf[static_cast<std::size_t>(j)] += gp[j] * inv;
          gap[j] += suf[static_cast<std::size_t>(j)];
        }
      }
    });
  }

  /// out[t] = dot(a[t,:], b[t,:]) -> T x 1.
  Var rows_dot(Var a, Var b) {
    const Matrix& A = val(a);
    const Matrix& B = val(b);
    check_shape(A.same_shape(B), "rows_dot");
    Matrix c(A.rows, 1);
    for (int r = 0; r < A.rows; ++r) {
      const double* pa = A.row_ptr(r);
      const double* pb = B.row_ptr(r);
      double s = 0.0;
      for (int j = 0; j < A.cols; ++j) s += pa[j] * pb[j];
      c.d[static_cast<std::size_t>(r)] = s;
    }
    return push(std::move(c), nullptr, [a, b](Tape& t, Var self) {
      const Matrix& g = t.grad(self);
      const Matrix& A2 = t.val(a);
      const Matrix& B2 = t.val(b);
      Matrix& ga = t.grad(a);
      Matrix& gb = t.grad(b);
      for (int r = 0; r < A2.rows; ++r) {
        const double gr = g.d[static_cast<std::size_t>(r)];
        const double* pa = A2.row_ptr(r);
        const double* pb = B2.row_ptr(r);
        double* qa = ga.row_ptr(r);
        double* qb = gb.row_ptr(r);
        for (int j = 0; j < A2.cols; ++j) {
          qa[j] += gr * pb[j];
          qb[j] += gr * pa[j];
        }
      }
    });
  }

  Var sum_all(Var a) {
    const Matrix& A = val(a);
    Matrix c(1, 1);
    for (double v : A.d) c.d[0] += v;
    return push(std::move(c), nullptr, [a](Tape& t, Var self) {
      const double g = t.grad(self).d[0];
      Matrix& ga = t.grad(a);
      for (double& v : ga.d) v += g;
    });
  }

  /// Weighted masked binary cross entropy over a T x 2 probability matrix:
  /// loss = mean_main + alpha * mean_others, each column's mean taken over
  /// mask-included frames only. Probabilities clamp to [eps, 1-eps].
  Var weighted_bce(Var probs, const Matrix& target, const Matrix& mask, double alpha,
                   double eps = 1e-7) {
    const Matrix& P = val(probs);
    check_shape(P.cols == 2 && target.same_shape(P) && mask.same_shape(P),
                "weighted_bce");
    double cnt[2] = {0.0, 0.0};
    double sum[2] = {0.0, 0.0};
    for (int r = 0; r < P.rows; ++r) {
      for (int c = 0; c < 2; ++c) {
        if (mask.at(r, c) == 0.0) continue;
        const double y = target.at(r, c);
        const double ph = std::clamp(P.at(r, c), eps, 1.0 - eps);
        sum[c] += -(y * std::log(ph) + (1.0 - y) * std::log(1.0 - ph));
        cnt[c] += 1.0;
      }
    }
    Matrix c(1, 1);
    const double l0 = cnt[0] > 0.0 ? sum[0] / cnt[0] : 0.0;
    const double l1 = cnt[1] > 0.0 ? sum[1] / cnt[1] : 0.0;
    c.d[0] = l0 + alpha * l1;
    auto tgt = std::make_shared<Matrix>(target);
    auto msk = std::make_shared<Matrix>(mask);
    const double n0 = cnt[0], n1 = cnt[1];
    return push(std::move(c), nullptr,
                [probs, tgt, msk, alpha, eps, n0, n1](Tape& t, Var self) {
                  const double g = t.grad(self).d[0];
                  const Matrix& P2 = t.val(probs);
                  Matrix& gp = t.grad(probs);
                  const double w[2] = {n0 > 0.0 ? g / n0 : 0.0,
                                       n1 > 0.0 ? g * alpha / n1 : 0.0};
                  for (int r = 0; r < P2.rows; ++r) {
                    for (int c2 = 0; c2 < 2; ++c2) {
                      if (msk->at(r, c2) == 0.0) continue;
                      const double p = P2.at(r, c2);
                      if (p < eps || p > 1.0 - eps) continue;  // clamped: flat
                      const double y = tgt->at(r, c2);
                      gp.at(r, c2) += w[c2] * (-y / p + (1.0 - y) / (1.0 - p));
                    }
                  }
                });
  }

  /// Seeds d(loss)/d(loss) = 1 and runs all recorded adjoints in reverse.
  /// Calling twice without reset() throws.
  void backward(Var loss) {
    if (backward_done_) throw std::runtime_error("backward called twice without reset");
    const Matrix& L = val(loss);
    check_shape(L.rows == 1 && L.cols == 1, "backward: loss must be scalar");
    backward_done_ = true;
    grad(loss).d[0] = 1.0;
    for (int i = loss.i; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.back && !n.grad.empty()) n.back(*this);
    }
  }

  void reset() {
    nodes_.clear();
    leaves_.clear();
    backward_done_ = false;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;           // owned value (unused for param leaves)
    Param* param = nullptr; // set for leaves bound to external params
    Matrix grad;
    std::function<void(Tape&)> back;
  };

  Var push(Matrix value, Param* param, std::function<void(Tape&, Var)> back) {
#ifndef NDEBUG
    if (!param && !value.all_finite())
      throw std::runtime_error("tape op produced non-finite values");
#endif
    Node n;
    n.value = std::move(value);
    n.param = param;
    Var v{static_cast<int>(nodes_.size())};
    if (back) {
      n.back = [fn = std::move(back), v](Tape& t) { fn(t, v); };
    }
    nodes_.push_back(std::move(n));
    return v;
  }

  std::vector<Node> nodes_;
  std::unordered_map<Param*, Var> leaves_;
  bool backward_done_ = false;
};

}  // namespace msvad
