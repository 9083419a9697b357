// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode autodiff over dense matrices. A Graph is a tape
// of nodes created in topological order by the op builders below;
// backward() replays the tape in reverse. Templated on the scalar type
// so the same model code runs in f32 for training and f64 for gradient
// checking.

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace dapmae {

template <typename T>
class Graph;

/// Handle to a node in a Graph. Cheap to copy; only valid for the graph
/// that produced it.
template <typename T>
struct Ten {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename T>
class Graph {
 public:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  const Mat& val(Ten<T> t) const { return nodes_[t.id].val; }
  const Mat& grad(Ten<T> t) const { return nodes_[t.id].grad; }
  bool requires_grad(Ten<T> t) const { return nodes_[t.id].rg; }
  std::size_t size() const { return nodes_.size(); }

  Ten<T> leaf(Mat v, bool requires_grad) {
    return push(std::move(v), requires_grad, nullptr);
  }

  Ten<T> constant(Mat v) { return leaf(std::move(v), false); }

  // ---- elementwise / linear algebra -------------------------------------

  Ten<T> matmul(Ten<T> a, Ten<T> b) {
    check_inner(val(a).cols(), val(b).rows(), "matmul");
    Mat out = val(a) * val(b);
    return push(std::move(out), rg2(a, b), [a, b](Graph& g, int id) {
      if (g.rg(a)) g.gref(a).noalias() += g.nodes_[id].grad * g.val(b).transpose();
      if (g.rg(b)) g.gref(b).noalias() += g.val(a).transpose() * g.nodes_[id].grad;
    });
  }

  /// a * b^T without materializing the transpose.
  Ten<T> matmul_nt(Ten<T> a, Ten<T> b) {
    check_inner(val(a).cols(), val(b).cols(), "matmul_nt");
    Mat out = val(a) * val(b).transpose();
    return push(std::move(out), rg2(a, b), [a, b](Graph& g, int id) {
      if (g.rg(a)) g.gref(a).noalias() += g.nodes_[id].grad * g.val(b);
      if (g.rg(b)) g.gref(b).noalias() += g.nodes_[id].grad.transpose() * g.val(a);
    });
  }

  Ten<T> add(Ten<T> a, Ten<T> b) {
    check_same(a, b, "add");
    Mat out = val(a) + val(b);
    return push(std::move(out), rg2(a, b), [a, b](Graph& g, int id) {
      if (g.rg(a)) g.gref(a) += g.nodes_[id].grad;
      if (g.rg(b)) g.gref(b) += g.nodes_[id].grad;
    });
  }

  Ten<T> sub(Ten<T> a, Ten<T> b) {
    check_same(a, b, "sub");
    Mat out = val(a) - val(b);
    return push(std::move(out), rg2(a, b), [a, b](Graph& g, int id) {
      if (g.rg(a)) g.gref(a) += g.nodes_[id].grad;
      if (g.rg(b)) g.gref(b) -= g.nodes_[id].grad;
    });
  }

  Ten<T> mul(Ten<T> a, Ten<T> b) {
    check_same(a, b, "mul");
    Mat out = val(a).cwiseProduct(val(b));
    return push(std::move(out), rg2(a, b), [a, b](Graph& g, int id) {
      if (g.rg(a)) g.gref(a) += g.nodes_[id].grad.cwiseProduct(g.val(b));
      if (g.rg(b)) g.gref(b) += g.nodes_[id].grad.cwiseProduct(g.val(a));
    });
  }

  Ten<T> scale(Ten<T> a, T s) {
    Mat out = val(a) * s;
    return push(std::move(out), rg(a), [a, s](Graph& g, int id) {
      if (g.rg(a)) g.gref(a) += g.nodes_[id].grad * s;
    });
  }

  /// c_a * a + c_b * b, same shapes.
  Ten<T> lincomb(Ten<T> a, Ten<T> b, T ca, T cb) {
    check_same(a, b, "lincomb");
    Mat out = ca * val(a) + cb * val(b);
    return push(std::move(out), rg2(a, b), [a, b, ca, cb](Graph& g, int id) {
      if (g.rg(a)) g.gref(a) += ca * g.nodes_[id].grad;
      if (g.rg(b)) g.gref(b) += cb * g.nodes_[id].grad;
    });
  }

  Ten<T> add_const(Ten<T> a, T c) {
    Mat out = (val(a).array() + c).matrix();
    return push(std::move(out), rg(a), [a](Graph& g, int id) {
      if (g.rg(a)) g.gref(a) += g.nodes_[id].grad;
    });
  }

  /// Adds a 1 x W row vector to every row of a.
  Ten<T> add_rowvec(Ten<T> a, Ten<T> row) {
    if (val(row).rows() != 1 || val(row).cols() != val(a).cols())
      throw std::invalid_argument("add_rowvec: shape mismatch");
    Mat out = val(a).rowwise() + val(row).row(0);
    return push(std::move(out), rg2(a, row), [a, row](Graph& g, int id) {
      if (g.rg(a)) g.gref(a) += g.nodes_[id].grad;
      if (g.rg(row)) g.gref(row).row(0) += g.nodes_[id].grad.colwise().sum();
    });
  }

  /// Scales row i of a by s(i, 0); s is an N x 1 column.
  Ten<T> scale_rows(Ten<T> a, Ten<T> s) {
    if (val(s).cols() != 1 || val(s).rows() != val(a).rows())
      throw std::invalid_argument("scale_rows: shape mismatch");
    Mat out = (val(a).array().colwise() * val(s).col(0).array()).matrix();
    return push(std::move(out), rg2(a, s), [a, s](Graph& g, int id) {
      const Mat& gr = g.nodes_[id].grad;
      if (g.rg(a))
        g.gref(a) += (gr.array().colwise() * g.val(s).col(0).array()).matrix();
      if (g.rg(s))
        g.gref(s).col(0) += gr.cwiseProduct(g.val(a)).rowwise().sum();
    });
  }

  // ---- nonlinearities ----------------------------------------------------

  Ten<T> relu(Ten<T> a) {
    Mat out = val(a).cwiseMax(T(0));
    return push(std::move(out), rg(a), [a](Graph& g, int id) {
      if (!g.rg(a)) return;
      g.gref(a).array() +=
          g.nodes_[id].grad.array() * (g.val(a).array() > T(0)).template cast<T>();
    });
  }

  Ten<T> gelu(Ten<T> a) {
    Mat out = val(a).unaryExpr([](T x) {
      return T(0.5) * x * (T(1) + T(std::erf(double(x) * 0.7071067811865476)));
    });
    return push(std::move(out), rg(a), [a](Graph& g, int id) {
      if (!g.rg(a)) return;
      Mat d = g.val(a).unaryExpr([](T x) {
        const double xd = double(x);
        const double cdf = 0.5 * (1.0 + std::erf(xd * 0.7071067811865476));
        const double pdf = 0.3989422804014327 * std::exp(-0.5 * xd * xd);
        return T(cdf + xd * pdf);
      });
      g.gref(a) += g.nodes_[id].grad.cwiseProduct(d);
    });
  }

  Ten<T> softmax_rows(Ten<T> a) {
    Mat out = val(a);
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      T m = out.row(r).maxCoeff();
      out.row(r) = (out.row(r).array() - m).exp();
      out.row(r) /= out.row(r).sum();
    }
    return push(std::move(out), rg(a), [a](Graph& g, int id) {
      if (!g.rg(a)) return;
      const Mat& y = g.nodes_[id].val;
      const Mat& gy = g.nodes_[id].grad;
      Mat prod = gy.cwiseProduct(y);
      Eigen::Matrix<T, Eigen::Dynamic, 1> rowsum = prod.rowwise().sum();
      g.gref(a) += prod - (y.array().colwise() * rowsum.array()).matrix();
    });
  }

  // ---- normalization -----------------------------------------------------

  /// Per-row normalization with per-column affine parameters
  /// (gamma, beta are 1 x W). Variance is the biased row variance.
  Ten<T> layer_norm(Ten<T> x, Ten<T> gamma, Ten<T> beta, T eps) {
    const Mat& xv = val(x);
    const Eigen::Index n = xv.rows(), w = xv.cols();
    Mat xhat(n, w);
    Mat inv_std(n, 1);
    for (Eigen::Index r = 0; r < n; ++r) {
      T mu = xv.row(r).mean();
      T var = (xv.row(r).array() - mu).square().sum() / T(w);
      T is = T(1) / std::sqrt(var + eps);
      inv_std(r, 0) = is;
      xhat.row(r) = ((xv.row(r).array() - mu) * is).matrix();
    }
    Mat out(n, w);
    for (Eigen::Index r = 0; r < n; ++r)
      out.row(r) = xhat.row(r).cwiseProduct(val(gamma).row(0)) + val(beta).row(0);
    int xh = push_aux(std::move(xhat));
    int istd = push_aux(std::move(inv_std));
    return push(std::move(out), rg(x) || rg(gamma) || rg(beta),
                [x, gamma, beta, xh, istd](Graph& g, int id) {
      const Mat& gy = g.nodes_[id].grad;
      const Mat& xhat_v = g.nodes_[xh].val;
      const Mat& istd_v = g.nodes_[istd].val;
      if (g.rg(gamma)) g.gref(gamma).row(0) += gy.cwiseProduct(xhat_v).colwise().sum();
      if (g.rg(beta)) g.gref(beta).row(0) += gy.colwise().sum();
      if (!g.rg(x)) return;
      const Eigen::Index w = gy.cols();
      for (Eigen::Index r = 0; r < gy.rows(); ++r) {
        Eigen::Matrix<T, 1, Eigen::Dynamic> gx =
            gy.row(r).cwiseProduct(g.val(gamma).row(0));
        T mean_g = gx.mean();
        T mean_gx = gx.cwiseProduct(xhat_v.row(r)).sum() / T(w);
        g.gref(x).row(r) +=
            (((gx.array() - mean_g) - xhat_v.row(r).array() * mean_gx) *
             istd_v(r, 0))
                .matrix();
      }
    });
  }

  /// Per-column (channel) batch normalization over the row axis.
  /// In training mode the batch statistics normalize and the running
  /// statistics (owned by the caller) are updated in place with the
  /// given momentum; in inference mode the running statistics are used
  /// and left untouched.
  Ten<T> batch_norm(Ten<T> x, Ten<T> gamma, Ten<T> beta, Mat* running_mean,
                    Mat* running_var, bool training, T momentum, T eps) {
    const Mat& xv = val(x);
    const Eigen::Index n = xv.rows(), w = xv.cols();
    if (running_mean->cols() != w || running_var->cols() != w)
      throw std::invalid_argument("batch_norm: running stat width mismatch");
    Eigen::Matrix<T, 1, Eigen::Dynamic> mu(w), var(w);
    if (training) {
      mu = xv.colwise().mean();
      for (Eigen::Index c = 0; c < w; ++c)
        var(c) = (xv.col(c).array() - mu(c)).square().sum() / T(n);
      // Running update; unbiased variance when possible, matching the
      // usual convention.
      T unbias = n > 1 ? T(n) / T(n - 1) : T(1);
      running_mean->row(0) = (T(1) - momentum) * running_mean->row(0) + momentum * mu;
      running_var->row(0) =
          (T(1) - momentum) * running_var->row(0) + momentum * (var * unbias);
    } else {
      mu = running_mean->row(0);
      var = running_var->row(0);
    }
    Eigen::Matrix<T, 1, Eigen::Dynamic> inv_std =
        (var.array() + eps).rsqrt().matrix();
    Mat xhat(n, w);
    for (Eigen::Index r = 0; r < n; ++r)
      xhat.row(r) = (xv.row(r) - mu).cwiseProduct(inv_std);
    Mat out(n, w);
    for (Eigen::Index r = 0; r < n; ++r)
      out.row(r) = xhat.row(r).cwiseProduct(val(gamma).row(0)) + val(beta).row(0);
    int xh = push_aux(std::move(xhat));
    int istd = push_aux(Mat(inv_std));
    return push(std::move(out), rg(x) || rg(gamma) || rg(beta),
                [x, gamma, beta, xh, istd, training](Graph& g, int id) {
      const Mat& gy = g.nodes_[id].grad;
      const Mat& xhat_v = g.nodes_[xh].val;
      const Mat& istd_m = g.nodes_[istd].val;  // 1 x W
      if (g.rg(gamma)) g.gref(gamma).row(0) += gy.cwiseProduct(xhat_v).colwise().sum();
      if (g.rg(beta)) g.gref(beta).row(0) += gy.colwise().sum();
      if (!g.rg(x)) return;
      Mat gxhat(gy.rows(), gy.cols());
      for (Eigen::Index r = 0; r < gy.rows(); ++r)
        gxhat.row(r) = gy.row(r).cwiseProduct(g.val(gamma).row(0));
      if (!training) {
        for (Eigen::Index r = 0; r < gy.rows(); ++r)
          g.gref(x).row(r) += gxhat.row(r).cwiseProduct(istd_m.row(0));
        return;
      }
      const T nr = T(gy.rows());
      Eigen::Matrix<T, 1, Eigen::Dynamic> mean_g = gxhat.colwise().mean();
      Eigen::Matrix<T, 1, Eigen::Dynamic> mean_gx =
          gxhat.cwiseProduct(xhat_v).colwise().sum() / nr;
      for (Eigen::Index r = 0; r < gy.rows(); ++r)
        g.gref(x).row(r) += (gxhat.row(r) - mean_g -
                             xhat_v.row(r).cwiseProduct(mean_gx))
                                .cwiseProduct(istd_m.row(0));
    });
  }

  // ---- structural ops ----------------------------------------------------

  Ten<T> concat_rows(const std::vector<Ten<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    Eigen::Index rows = 0;
    const Eigen::Index cols = val(parts[0]).cols();
    bool any_rg = false;
    for (auto p : parts) {
      if (val(p).cols() != cols) throw std::invalid_argument("concat_rows: width mismatch");
      rows += val(p).rows();
      any_rg = any_rg || rg(p);
    }
    Mat out(rows, cols);
    Eigen::Index at = 0;
    for (auto p : parts) {
      out.middleRows(at, val(p).rows()) = val(p);
      at += val(p).rows();
    }
    std::vector<Ten<T>> ps = parts;
    return push(std::move(out), any_rg, [ps](Graph& g, int id) {
      Eigen::Index at = 0;
      for (auto p : ps) {
        Eigen::Index r = g.val(p).rows();
        if (g.rg(p)) g.gref(p) += g.nodes_[id].grad.middleRows(at, r);
        at += r;
      }
    });
  }

  Ten<T> concat_cols(const std::vector<Ten<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    Eigen::Index cols = 0;
    const Eigen::Index rows = val(parts[0]).rows();
    bool any_rg = false;
    for (auto p : parts) {
      if (val(p).rows() != rows) throw std::invalid_argument("concat_cols: height mismatch");
      cols += val(p).cols();
      any_rg = any_rg || rg(p);
    }
    Mat out(rows, cols);
    Eigen::Index at = 0;
    for (auto p : parts) {
      out.middleCols(at, val(p).cols()) = val(p);
      at += val(p).cols();
    }
    std::vector<Ten<T>> ps = parts;
    return push(std::move(out), any_rg, [ps](Graph& g, int id) {
      Eigen::Index at = 0;
      for (auto p : ps) {
        Eigen::Index c = g.val(p).cols();
        if (g.rg(p)) g.gref(p) += g.nodes_[id].grad.middleCols(at, c);
        at += c;
      }
    });
  }

  Ten<T> slice_rows(Ten<T> a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > val(a).rows())
      throw std::invalid_argument("slice_rows: range out of bounds");
    Mat out = val(a).middleRows(start, count);
    return push(std::move(out), rg(a), [a, start, count](Graph& g, int id) {
      if (g.rg(a)) g.gref(a).middleRows(start, count) += g.nodes_[id].grad;
    });
  }

  Ten<T> slice_cols(Ten<T> a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > val(a).cols())
      throw std::invalid_argument("slice_cols: range out of bounds");
    Mat out = val(a).middleCols(start, count);
    return push(std::move(out), rg(a), [a, start, count](Graph& g, int id) {
      if (g.rg(a)) g.gref(a).middleCols(start, count) += g.nodes_[id].grad;
    });
  }

  /// Gathers rows of a by index (duplicates allowed).
  Ten<T> select_rows(Ten<T> a, std::vector<Eigen::Index> idx) {
    Mat out(static_cast<Eigen::Index>(idx.size()), val(a).cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || idx[i] >= val(a).rows())
        throw std::invalid_argument("select_rows: index out of range");
      out.row(static_cast<Eigen::Index>(i)) = val(a).row(idx[i]);
    }
    return push(std::move(out), rg(a), [a, idx](Graph& g, int id) {
      if (!g.rg(a)) return;
      for (std::size_t i = 0; i < idx.size(); ++i)
        g.gref(a).row(idx[i]) += g.nodes_[id].grad.row(static_cast<Eigen::Index>(i));
    });
  }

  /// Repeats a 1 x W row n times.
  Ten<T> repeat_row(Ten<T> a, Eigen::Index n) {
    if (val(a).rows() != 1) throw std::invalid_argument("repeat_row: expects a single row");
    Mat out = val(a).replicate(n, 1);
    return push(std::move(out), rg(a), [a](Graph& g, int id) {
      if (g.rg(a)) g.gref(a).row(0) += g.nodes_[id].grad.colwise().sum();
    });
  }

  // ---- reductions ----------------------------------------------------------

  Ten<T> mean_rows(Ten<T> a) {
    Mat out = val(a).colwise().mean();
    const T n = T(val(a).rows());
    return push(std::move(out), rg(a), [a, n](Graph& g, int id) {
      if (!g.rg(a)) return;
      g.gref(a) += (g.nodes_[id].grad / n).replicate(g.val(a).rows(), 1);
    });
  }

  /// Column-wise max over rows; ties go to the lowest row index.
  Ten<T> max_rows(Ten<T> a) {
    const Mat& av = val(a);
    Mat out(1, av.cols());
    std::vector<Eigen::Index> arg(static_cast<std::size_t>(av.cols()));
    for (Eigen::Index c = 0; c < av.cols(); ++c) {
      Eigen::Index best = 0;
      for (Eigen::Index r = 1; r < av.rows(); ++r)
        if (av(r, c) > av(best, c)) best = r;
      arg[static_cast<std::size_t>(c)] = best;
      out(0, c) = av(best, c);
    }
    return push(std::move(out), rg(a), [a, arg](Graph& g, int id) {
      if (!g.rg(a)) return;
      for (Eigen::Index c = 0; c < g.nodes_[id].grad.cols(); ++c)
        g.gref(a)(arg[static_cast<std::size_t>(c)], c) += g.nodes_[id].grad(0, c);
    });
  }

  Ten<T> mean_scalars(const std::vector<Ten<T>>& xs) {
    if (xs.empty()) throw std::invalid_argument("mean_scalars: empty");
    T acc = 0;
    for (auto x : xs) acc += val(x)(0, 0);
    Mat out(1, 1);
    out(0, 0) = acc / T(xs.size());
    bool any_rg = false;
    for (auto x : xs) any_rg = any_rg || rg(x);
    std::vector<Ten<T>> cap = xs;
    return push(std::move(out), any_rg, [cap](Graph& g, int id) {
      T gshare = g.nodes_[id].grad(0, 0) / T(cap.size());
      for (auto x : cap)
        if (g.rg(x)) g.gref(x)(0, 0) += gshare;
    });
  }

  // ---- losses -------------------------------------------------------------

  /// Mean cross entropy of row-wise logits against integer labels.
  Ten<T> cross_entropy(Ten<T> logits, std::vector<int> labels) {
    const Mat& lv = val(logits);
    if (static_cast<Eigen::Index>(labels.size()) != lv.rows())
      throw std::invalid_argument("cross_entropy: label count mismatch");
    Mat probs(lv.rows(), lv.cols());
    T loss = 0;
    for (Eigen::Index r = 0; r < lv.rows(); ++r) {
      T m = lv.row(r).maxCoeff();
      Eigen::Matrix<T, 1, Eigen::Dynamic> e = (lv.row(r).array() - m).exp();
      T z = e.sum();
      probs.row(r) = e / z;
      loss += std::log(z) + m - lv(r, labels[static_cast<std::size_t>(r)]);
    }
    Mat out(1, 1);
    out(0, 0) = loss / T(lv.rows());
    int pid = push_aux(std::move(probs));
    return push(std::move(out), rg(logits), [logits, labels, pid](Graph& g, int id) {
      if (!g.rg(logits)) return;
      const T gs = g.nodes_[id].grad(0, 0) / T(g.val(logits).rows());
      Mat d = g.nodes_[pid].val;
      for (Eigen::Index r = 0; r < d.rows(); ++r)
        d(r, labels[static_cast<std::size_t>(r)]) -= T(1);
      g.gref(logits) += gs * d;
    });
  }

  /// Mean chamfer distance between predicted patches (one k x 3 patch
  /// flattened per row, xyz interleaved) and fixed ground-truth patches.
  /// Optionally reports the per-patch values.
  Ten<T> chamfer_mean(Ten<T> pred, const std::vector<Mat>& gt,
                      std::vector<double>* per_patch = nullptr) {
    const Mat& pv = val(pred);
    const auto m = static_cast<std::size_t>(pv.rows());
    if (gt.size() != m) throw std::invalid_argument("chamfer_mean: patch count mismatch");
    if (m == 0) throw std::invalid_argument("chamfer_mean: no patches");
    const Eigen::Index k = pv.cols() / 3;
    if (pv.cols() != 3 * k) throw std::invalid_argument("chamfer_mean: row width not 3k");

    // Nearest-neighbour assignments, reused by the backward pass.
    auto nn_pg = std::make_shared<std::vector<std::vector<Eigen::Index>>>(m);
    auto nn_gp = std::make_shared<std::vector<std::vector<Eigen::Index>>>(m);
    if (per_patch) per_patch->assign(m, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const Mat& gi = gt[i];
      const Eigen::Index kg = gi.rows();
      auto& fwd = (*nn_pg)[i];
      auto& bwd = (*nn_gp)[i];
      fwd.resize(static_cast<std::size_t>(k));
      bwd.resize(static_cast<std::size_t>(kg));
      double d_pg = 0.0, d_gp = 0.0;
      for (Eigen::Index p = 0; p < k; ++p) {
        double best = std::numeric_limits<double>::infinity();
        Eigen::Index barg = 0;
        for (Eigen::Index q = 0; q < kg; ++q) {
          double d = 0;
          for (int c = 0; c < 3; ++c) {
            double diff = double(pv(static_cast<Eigen::Index>(i), p * 3 + c)) - double(gi(q, c));
            d += diff * diff;
          }
          if (d < best) { best = d; barg = q; }
        }
        fwd[static_cast<std::size_t>(p)] = barg;
        d_pg += best;
      }
      for (Eigen::Index q = 0; q < kg; ++q) {
        double best = std::numeric_limits<double>::infinity();
        Eigen::Index barg = 0;
        for (Eigen::Index p = 0; p < k; ++p) {
          double d = 0;
          for (int c = 0; c < 3; ++c) {
            double diff = double(pv(static_cast<Eigen::Index>(i), p * 3 + c)) - double(gi(q, c));
            d += diff * diff;
          }
          if (d < best) { best = d; barg = p; }
        }
        bwd[static_cast<std::size_t>(q)] = barg;
        d_gp += best;
      }
      double ci = d_pg / double(k) + d_gp / double(kg);
      if (per_patch) (*per_patch)[i] = ci;
      total += ci;
    }
    Mat out(1, 1);
    out(0, 0) = T(total / double(m));
    std::vector<Mat> gt_copy = gt;
    return push(std::move(out), rg(pred),
                [pred, gt_copy, nn_pg, nn_gp, k, m](Graph& g, int id) {
      if (!g.rg(pred)) return;
      const T gs = g.nodes_[id].grad(0, 0) / T(m);
      const Mat& pv = g.val(pred);
      Mat& gp = g.gref(pred);
      for (std::size_t i = 0; i < m; ++i) {
        const Mat& gi = gt_copy[i];
        const Eigen::Index kg = gi.rows();
        const T w_pg = gs * T(2) / T(k);
        const T w_gp = gs * T(2) / T(kg);
        const auto row = static_cast<Eigen::Index>(i);
        for (Eigen::Index p = 0; p < k; ++p) {
          Eigen::Index q = (*nn_pg)[i][static_cast<std::size_t>(p)];
          for (int c = 0; c < 3; ++c)
            gp(row, p * 3 + c) += w_pg * (pv(row, p * 3 + c) - gi(q, c));
        }
        for (Eigen::Index q = 0; q < kg; ++q) {
          Eigen::Index p = (*nn_gp)[i][static_cast<std::size_t>(q)];
          for (int c = 0; c < 3; ++c)
            gp(row, p * 3 + c) += w_gp * (pv(row, p * 3 + c) - gi(q, c));
        }
      }
    });
  }

  /// Pairwise cosine contrast over the rows of dmat. For every ordered
  /// pair (i, j), i != j: 1 - cos for equal labels, max(0, cos - margin)
  /// otherwise. Cosines use squared-norm products under one square root
  /// so that identical rows give exactly cos = 1; squared norms are
  /// floored at 1e-24 (norm floor 1e-12) and a hit sets *clamped.
  Ten<T> cosine_contrast(Ten<T> dmat, const std::vector<int>& labels, T margin,
                         bool mean_reduce, std::vector<T>* pair_terms = nullptr,
                         bool* clamped = nullptr) {
    const Mat& dv = val(dmat);
    const auto b = dv.rows();
    if (static_cast<Eigen::Index>(labels.size()) != b)
      throw std::invalid_argument("cosine_contrast: label count mismatch");
    if (b < 2) throw std::invalid_argument("cosine_contrast: needs at least two rows");
    const T floor2 = T(1e-24);
    Eigen::Matrix<T, Eigen::Dynamic, 1> q(b), qc(b);
    bool any_clamped = false;
    for (Eigen::Index i = 0; i < b; ++i) {
      q(i) = dv.row(i).squaredNorm();
      qc(i) = q(i) < floor2 ? floor2 : q(i);
      any_clamped = any_clamped || q(i) < floor2;
    }
    if (clamped) *clamped = any_clamped;
    if (pair_terms) pair_terms->clear();
    const T norm = mean_reduce ? T(1) / (T(b) * T(b - 1)) : T(1);
    T total = 0;
    for (Eigen::Index i = 0; i < b; ++i) {
      for (Eigen::Index j = 0; j < b; ++j) {
        if (i == j) continue;
        T cosv = dv.row(i).dot(dv.row(j)) / std::sqrt(qc(i) * qc(j));
        T term = labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]
                     ? T(1) - cosv
                     : (cosv - margin > T(0) ? cosv - margin : T(0));
        if (pair_terms) pair_terms->push_back(term);
        total += term;
      }
    }
    Mat out(1, 1);
    out(0, 0) = total * norm;
    int qid = push_aux(Mat(qc));
    std::vector<int> lab = labels;
    return push(std::move(out), rg(dmat),
                [dmat, lab, margin, norm, qid, floor2](Graph& g, int id) {
      if (!g.rg(dmat)) return;
      const T gs = g.nodes_[id].grad(0, 0) * norm;
      const Mat& dv = g.val(dmat);
      const Mat& qc = g.nodes_[qid].val;
      Mat& gd = g.gref(dmat);
      const auto b = dv.rows();
      for (Eigen::Index i = 0; i < b; ++i) {
        for (Eigen::Index j = 0; j < b; ++j) {
          if (i == j) continue;
          const T denom = std::sqrt(qc(i, 0) * qc(j, 0));
          const T cosv = dv.row(i).dot(dv.row(j)) / denom;
          T f;
          if (lab[static_cast<std::size_t>(i)] == lab[static_cast<std::size_t>(j)]) {
            f = -gs;
          } else {
            f = cosv - margin > T(0) ? gs : T(0);
          }
          if (f == T(0)) continue;
          // d cos / d d_i, with the norm-floor subgradient (a clamped
          // squared norm contributes no derivative through the floor).
          const bool live_i = dv.row(i).squaredNorm() >= floor2;
          const bool live_j = dv.row(j).squaredNorm() >= floor2;
          gd.row(i) += f * (dv.row(j) / denom -
                            (live_i ? cosv / qc(i, 0) : T(0)) * dv.row(i));
          gd.row(j) += f * (dv.row(i) / denom -
                            (live_j ? cosv / qc(j, 0) : T(0)) * dv.row(j));
        }
      }
    });
  }

  // ---- backward -----------------------------------------------------------

  /// Runs reverse-mode accumulation from a scalar node. Gradients of all
  /// nodes with requires_grad are populated.
  void backward(Ten<T> loss) {
    const Mat& lv = val(loss);
    if (lv.rows() != 1 || lv.cols() != 1)
      throw std::invalid_argument("backward: loss must be a 1x1 node");
    for (auto& n : nodes_) {
      if (n.rg) {
        n.grad.resize(n.val.rows(), n.val.cols());
        n.grad.setZero();
      }
    }
    nodes_[loss.id].grad(0, 0) = T(1);
    for (int i = loss.id; i >= 0; --i) {
      if (nodes_[i].rg && nodes_[i].back) nodes_[i].back(*this, i);
    }
  }

 private:
  struct Node {
    Mat val;
    Mat grad;
    bool rg = false;
    std::function<void(Graph&, int)> back;
  };

  bool rg(Ten<T> t) const { return nodes_[t.id].rg; }
  bool rg2(Ten<T> a, Ten<T> b) const { return rg(a) || rg(b); }
  Mat& gref(Ten<T> t) { return nodes_[t.id].grad; }

  static void check_inner(Eigen::Index a, Eigen::Index b, const char* op) {
    if (a != b) throw std::invalid_argument(std::string(op) + ": inner dimension mismatch");
  }
  void check_same(Ten<T> a, Ten<T> b, const char* op) const {
    if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
      throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }

  Ten<T> push(Mat v, bool requires_grad, std::function<void(Graph&, int)> back) {
    Node n;
    n.val = std::move(v);
    n.rg = requires_grad;
    if (requires_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Ten<T>{static_cast<int>(nodes_.size()) - 1};
  }

  /// Gradient-free node holding forward-pass intermediates for backward.
  int push_aux(Mat v) {
    Node n;
    n.val = std::move(v);
    n.rg = false;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
};

}  // namespace dapmae
