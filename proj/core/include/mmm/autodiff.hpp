#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mmm/common.hpp"

namespace mmm::ad {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

template <class T>
struct ParamStore {
  struct Entry {
    std::string name;
    Mat<T> value;
    bool trainable = true;
  };
  std::vector<Entry> entries;

  int add(std::string name, Mat<T> init, bool trainable = true) {
    entries.push_back(Entry{std::move(name), std::move(init), trainable});
    return static_cast<int>(entries.size()) - 1;
  }
  Mat<T>& value(int id) { return entries[id].value; }
  const Mat<T>& value(int id) const { return entries[id].value; }
  int size() const { return static_cast<int>(entries.size()); }

  std::int64_t scalar_count() const {
    std::int64_t n = 0;
    for (const auto& e : entries) n += e.value.size();
    return n;
  }
  std::vector<Mat<T>> zeros_like() const {
    std::vector<Mat<T>> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(Mat<T>::Zero(e.value.rows(), e.value.cols()));
    return out;
  }
};

// Reverse-mode tape over matrix-valued nodes. One tape per forward pass;
// parameters live in an external ParamStore and are referenced by id.
template <class T>
class Tape {
 public:
  using Ref = int;

  explicit Tape(const ParamStore<T>* params = nullptr) : params_(params) {}

  const Mat<T>& val(Ref r) const {
    const Node& n = nodes_[r];
    return n.param_id >= 0 ? params_->value(n.param_id) : n.value;
  }
  Mat<T>& grad(Ref r) { return nodes_[r].grad; }
  T item(Ref r) const { return val(r)(0, 0); }

  Ref constant(Mat<T> v) { return push(std::move(v), false); }

  Ref leaf(Mat<T> v) { return push(std::move(v), true); }

  Ref param(int param_id) {
    if (param_id >= static_cast<int>(param_refs_.size())) {
      param_refs_.resize(param_id + 1, -1);
    }
    if (param_refs_[param_id] >= 0) return param_refs_[param_id];
    Node n;
    n.param_id = param_id;
    n.needs_grad = true;
    nodes_.push_back(std::move(n));
    Ref r = static_cast<int>(nodes_.size()) - 1;
    param_refs_[param_id] = r;
    param_nodes_.push_back({param_id, r});
    return r;
  }

  // ---- ops ----

  Ref matmul(Ref a, Ref b) {
    Mat<T> y = val(a) * val(b);
    return unary_or_binary(std::move(y), a, b, [this, a, b](const Mat<T>& g) {
      if (needs(a)) grad_of(a).noalias() += g * val(b).transpose();
      if (needs(b)) grad_of(b).noalias() += val(a).transpose() * g;
    });
  }

  // y = a * b^T (used for tied output projections)
  Ref matmul_nt(Ref a, Ref b) {
    Mat<T> y = val(a) * val(b).transpose();
    return unary_or_binary(std::move(y), a, b, [this, a, b](const Mat<T>& g) {
      if (needs(a)) grad_of(a).noalias() += g * val(b);
      if (needs(b)) grad_of(b).noalias() += g.transpose() * val(a);
    });
  }

  Ref add(Ref a, Ref b) {
    Mat<T> y = val(a) + val(b);
    return unary_or_binary(std::move(y), a, b, [this, a, b](const Mat<T>& g) {
      if (needs(a)) grad_of(a) += g;
      if (needs(b)) grad_of(b) += g;
    });
  }

  Ref sub(Ref a, Ref b) {
    Mat<T> y = val(a) - val(b);
    return unary_or_binary(std::move(y), a, b, [this, a, b](const Mat<T>& g) {
      if (needs(a)) grad_of(a) += g;
      if (needs(b)) grad_of(b) -= g;
    });
  }

  Ref hadamard(Ref a, Ref b) {
    Mat<T> y = val(a).cwiseProduct(val(b));
    return unary_or_binary(std::move(y), a, b, [this, a, b](const Mat<T>& g) {
      if (needs(a)) grad_of(a) += g.cwiseProduct(val(b));
      if (needs(b)) grad_of(b) += g.cwiseProduct(val(a));
    });
  }

  Ref scale(Ref a, T c) {
    Mat<T> y = val(a) * c;
    return unary(std::move(y), a, [this, a, c](const Mat<T>& g) {
      if (needs(a)) grad_of(a) += g * c;
    });
  }

  Ref add_const(Ref a, const Mat<T>& c) {
    Mat<T> y = val(a) + c;
    return unary(std::move(y), a, [this, a](const Mat<T>& g) {
      if (needs(a)) grad_of(a) += g;
    });
  }

  // broadcast-add a 1 x C row vector node to every row
  Ref add_rowvec(Ref a, Ref v) {
    Mat<T> y = val(a).rowwise() + Eigen::RowVector<T, Eigen::Dynamic>(val(v).row(0));
    return unary_or_binary(std::move(y), a, v, [this, a, v](const Mat<T>& g) {
      if (needs(a)) grad_of(a) += g;
      if (needs(v)) grad_of(v).row(0) += g.colwise().sum();
    });
  }

  // repeat a 1 x C row vector node n times
  Ref broadcast_row(Ref v, int n) {
    Mat<T> y = val(v).row(0).replicate(n, 1);
    return unary(std::move(y), v, [this, v](const Mat<T>& g) {
      if (needs(v)) grad_of(v).row(0) += g.colwise().sum();
    });
  }

  Ref silu(Ref a) {
    const Mat<T>& x = val(a);
    Mat<T> s = x.unaryExpr([](T v) { return T(1) / (T(1) + std::exp(-v)); });
    Mat<T> y = x.cwiseProduct(s);
    auto cache = std::make_shared<Mat<T>>(std::move(s));
    return unary(std::move(y), a, [this, a, cache](const Mat<T>& g) {
      if (!needs(a)) return;
      const Mat<T>& x = val(a);
      const Mat<T>& s = *cache;
      grad_of(a).array() +=
          g.array() * (s.array() * (T(1) + x.array() * (T(1) - s.array())));
    });
  }

  Ref gelu(Ref a) {
    const Mat<T>& x = val(a);
    Mat<T> y = x.unaryExpr([](T v) {
      return T(0.5) * v * (T(1) + std::erf(v / std::sqrt(T(2))));
    });
    return unary(std::move(y), a, [this, a](const Mat<T>& g) {
      if (!needs(a)) return;
      const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * T(M_PI));
      const Mat<T>& x = val(a);
      grad_of(a).array() += g.array() * x.unaryExpr([inv_sqrt2pi](T v) {
        T cdf = T(0.5) * (T(1) + std::erf(v / std::sqrt(T(2))));
        return cdf + v * inv_sqrt2pi * std::exp(-T(0.5) * v * v);
      }).array();
    });
  }

  Ref softmax_rows(Ref a) {
    Mat<T> p = stable_softmax(val(a));
    auto cache = std::make_shared<Mat<T>>(p);
    return unary(std::move(p), a, [this, a, cache](const Mat<T>& g) {
      if (!needs(a)) return;
      const Mat<T>& p = *cache;
      Mat<T> gp = g.cwiseProduct(p);
      Eigen::Vector<T, Eigen::Dynamic> rowsum = gp.rowwise().sum();
      grad_of(a) += gp - p.cwiseProduct(rowsum.replicate(1, p.cols()));
    });
  }

  // pre-norm layer normalization over rows; gamma/beta are 1 x C nodes
  Ref layernorm_rows(Ref a, Ref gamma, Ref beta, T eps = T(1e-5)) {
    const Mat<T>& x = val(a);
    const Eigen::Index n = x.rows(), c = x.cols();
    Mat<T> xhat(n, c);
    Eigen::Vector<T, Eigen::Dynamic> inv_std(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      T mu = x.row(i).mean();
      T var = (x.row(i).array() - mu).square().mean();
      inv_std(i) = T(1) / std::sqrt(var + eps);
      xhat.row(i) = (x.row(i).array() - mu) * inv_std(i);
    }
    Mat<T> y = (xhat.array().rowwise() * val(gamma).row(0).array()).rowwise() +
               val(beta).row(0).array();
    auto cache = std::make_shared<std::pair<Mat<T>, Eigen::Vector<T, Eigen::Dynamic>>>(
        std::move(xhat), std::move(inv_std));
    Ref out = push(std::move(y), needs(a) || needs(gamma) || needs(beta));
    nodes_[out].back = [this, a, gamma, beta, cache, out]() {
      const Mat<T>& g = nodes_[out].grad;
      const Mat<T>& xhat = cache->first;
      const auto& inv_std = cache->second;
      if (needs(gamma)) grad_of(gamma).row(0) += g.cwiseProduct(xhat).colwise().sum();
      if (needs(beta)) grad_of(beta).row(0) += g.colwise().sum();
      if (!needs(a)) return;
      const Eigen::Index c = xhat.cols();
      Mat<T> dxhat = g.array().rowwise() * val(gamma).row(0).array();
      for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
        T m1 = dxhat.row(i).mean();
        T m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
        grad_of(a).row(i) +=
            inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2).matrix();
      }
      (void)c;
    };
    return out;
  }

  // Fused multi-head attention. q: Tq x D, k/v: Tk x D. mask is an additive
  // Tq x Tk matrix (0 for allowed, large negative for blocked) or empty.
  // Zero-length memory yields a zero output so unconditional passes work.
  Ref attention(Ref q, Ref k, Ref v, int heads, const Mat<T>& mask,
                std::vector<Mat<T>>* capture = nullptr) {
    const Eigen::Index tq = val(q).rows(), tk = val(k).rows(), d = val(q).cols();
    if (d % heads != 0) throw ContractError("attention width not divisible by heads");
    const Eigen::Index dh = d / heads;
    const T scale = T(1) / std::sqrt(T(dh));
    Mat<T> y = Mat<T>::Zero(tq, d);
    auto probs = std::make_shared<std::vector<Mat<T>>>();
    if (tk > 0 && tq > 0) {
      probs->reserve(heads);
      for (int h = 0; h < heads; ++h) {
        Mat<T> s = (val(q).middleCols(h * dh, dh) *
                    val(k).middleCols(h * dh, dh).transpose()) * scale;
        if (mask.size() > 0) s += mask;
        Mat<T> p = stable_softmax(s);
        if (capture) capture->push_back(p);
        y.middleCols(h * dh, dh).noalias() = p * val(v).middleCols(h * dh, dh);
        probs->push_back(std::move(p));
      }
    }
    bool ng = needs(q) || needs(k) || needs(v);
    Ref out = push(std::move(y), ng);
    if (ng && tk > 0 && tq > 0) {
      nodes_[out].back = [this, q, k, v, heads, dh, scale, probs, out]() {
        const Mat<T>& g = nodes_[out].grad;
        for (int h = 0; h < heads; ++h) {
          const Mat<T>& p = (*probs)[h];
          auto qh = val(q).middleCols(h * dh, dh);
          auto kh = val(k).middleCols(h * dh, dh);
          auto vh = val(v).middleCols(h * dh, dh);
          auto gh = g.middleCols(h * dh, dh);
          if (needs(v)) grad_of(v).middleCols(h * dh, dh).noalias() += p.transpose() * gh;
          Mat<T> dp = gh * vh.transpose();
          Mat<T> dpp = dp.cwiseProduct(p);
          Eigen::Vector<T, Eigen::Dynamic> rowsum = dpp.rowwise().sum();
          Mat<T> ds = dpp - p.cwiseProduct(rowsum.replicate(1, p.cols()));
          if (needs(q)) grad_of(q).middleCols(h * dh, dh).noalias() += ds * kh * scale;
          if (needs(k)) grad_of(k).middleCols(h * dh, dh).noalias() += ds.transpose() * qh * scale;
        }
      };
    }
    return out;
  }

  Ref gather_rows(Ref a, std::vector<int> rows) {
    Mat<T> y(rows.size(), val(a).cols());
    for (std::size_t i = 0; i < rows.size(); ++i) y.row(i) = val(a).row(rows[i]);
    auto idx = std::make_shared<std::vector<int>>(std::move(rows));
    return unary(std::move(y), a, [this, a, idx](const Mat<T>& g) {
      if (!needs(a)) return;
      for (std::size_t i = 0; i < idx->size(); ++i) grad_of(a).row((*idx)[i]) += g.row(i);
    });
  }

  Ref slice_rows(Ref a, int start, int n) {
    Mat<T> y = val(a).middleRows(start, n);
    return unary(std::move(y), a, [this, a, start, n](const Mat<T>& g) {
      if (needs(a)) grad_of(a).middleRows(start, n) += g;
    });
  }

  Ref slice_cols(Ref a, int start, int n) {
    Mat<T> y = val(a).middleCols(start, n);
    return unary(std::move(y), a, [this, a, start, n](const Mat<T>& g) {
      if (needs(a)) grad_of(a).middleCols(start, n) += g;
    });
  }

  Ref concat_rows(const std::vector<Ref>& parts) {
    Eigen::Index rows = 0, cols = 0;
    for (Ref p : parts) {
      rows += val(p).rows();
      if (val(p).cols() > 0) cols = val(p).cols();
    }
    Mat<T> y(rows, cols);
    Eigen::Index at = 0;
    bool ng = false;
    for (Ref p : parts) {
      y.middleRows(at, val(p).rows()) = val(p);
      at += val(p).rows();
      ng = ng || needs(p);
    }
    auto list = std::make_shared<std::vector<Ref>>(parts);
    Ref out = push(std::move(y), ng);
    if (ng) {
      nodes_[out].back = [this, list, out]() {
        const Mat<T>& g = nodes_[out].grad;
        Eigen::Index at = 0;
        for (Ref p : *list) {
          Eigen::Index n = val(p).rows();
          if (needs(p)) grad_of(p) += g.middleRows(at, n);
          at += n;
        }
      };
    }
    return out;
  }

  // project rows onto the unit sphere; rows below min_norm are rejected
  Ref l2normalize_rows(Ref a, T min_norm = T(1e-12)) {
    const Mat<T>& x = val(a);
    Mat<T> y(x.rows(), x.cols());
    auto norms = std::make_shared<Eigen::Vector<T, Eigen::Dynamic>>(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      T n = x.row(i).norm();
      if (n < min_norm) throw NumericError("cannot normalize zero-norm latent");
      (*norms)(i) = n;
      y.row(i) = x.row(i) / n;
    }
    auto yc = std::make_shared<Mat<T>>(y);
    return unary(std::move(y), a, [this, a, norms, yc](const Mat<T>& g) {
      if (!needs(a)) return;
      for (Eigen::Index i = 0; i < yc->rows(); ++i) {
        T d = g.row(i).dot(yc->row(i));
        grad_of(a).row(i) += (g.row(i) - d * yc->row(i)) / (*norms)(i);
      }
    });
  }

  // value is `target`, gradient passes through to `a` unchanged
  Ref straight_through(Ref a, Mat<T> target) {
    return unary(std::move(target), a, [this, a](const Mat<T>& g) {
      if (needs(a)) grad_of(a) += g;
    });
  }

  // per-row cross entropy against integer targets; returns an N x 1 node
  Ref cross_entropy_rows(Ref logits, std::vector<int> targets) {
    const Mat<T>& z = val(logits);
    if (static_cast<Eigen::Index>(targets.size()) != z.rows()) {
      throw ContractError("cross_entropy_rows: target count mismatch");
    }
    Mat<T> p = stable_softmax(z);
    Mat<T> losses(z.rows(), 1);
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      T m = z.row(i).maxCoeff();
      T lse = m + std::log((z.row(i).array() - m).exp().sum());
      losses(i, 0) = lse - z(i, targets[i]);
    }
    auto cache = std::make_shared<std::pair<Mat<T>, std::vector<int>>>(std::move(p),
                                                                       std::move(targets));
    return unary(std::move(losses), logits, [this, logits, cache](const Mat<T>& g) {
      if (!needs(logits)) return;
      const Mat<T>& p = cache->first;
      const auto& tg = cache->second;
      Mat<T>& dl = grad_of(logits);
      for (Eigen::Index i = 0; i < p.rows(); ++i) {
        dl.row(i) += g(i, 0) * p.row(i);
        dl(i, tg[i]) -= g(i, 0);
      }
    });
  }

  // mean squared error against a constant target; returns a 1 x 1 node
  Ref mse(Ref a, const Mat<T>& target) {
    const Mat<T>& x = val(a);
    if (x.rows() != target.rows() || x.cols() != target.cols()) {
      throw ShapeError("mse: shape mismatch");
    }
    Mat<T> y(1, 1);
    y(0, 0) = (x - target).squaredNorm() / static_cast<T>(x.size());
    auto tg = std::make_shared<Mat<T>>(target);
    return unary(std::move(y), a, [this, a, tg](const Mat<T>& g) {
      if (!needs(a)) return;
      grad_of(a) += (val(a) - *tg) * (T(2) * g(0, 0) / static_cast<T>(val(a).size()));
    });
  }

  Ref mean(Ref a) {
    Mat<T> y(1, 1);
    y(0, 0) = val(a).mean();
    return unary(std::move(y), a, [this, a](const Mat<T>& g) {
      if (needs(a)) grad_of(a).array() += g(0, 0) / static_cast<T>(val(a).size());
    });
  }

  Ref sum(Ref a) {
    Mat<T> y(1, 1);
    y(0, 0) = val(a).sum();
    return unary(std::move(y), a, [this, a](const Mat<T>& g) {
      if (needs(a)) grad_of(a).array() += g(0, 0);
    });
  }

  // y = sum_i w_i * s_i over 1 x 1 nodes
  Ref affine_combine(const std::vector<Ref>& scalars, const std::vector<T>& weights) {
    if (scalars.size() != weights.size()) throw ContractError("affine_combine: size mismatch");
    Mat<T> y = Mat<T>::Zero(1, 1);
    bool ng = false;
    for (std::size_t i = 0; i < scalars.size(); ++i) {
      y(0, 0) += weights[i] * item(scalars[i]);
      ng = ng || needs(scalars[i]);
    }
    auto refs = std::make_shared<std::vector<Ref>>(scalars);
    auto ws = std::make_shared<std::vector<T>>(weights);
    Ref out = push(std::move(y), ng);
    if (ng) {
      nodes_[out].back = [this, refs, ws, out]() {
        T g = nodes_[out].grad(0, 0);
        for (std::size_t i = 0; i < refs->size(); ++i) {
          if (needs((*refs)[i])) grad_of((*refs)[i])(0, 0) += g * (*ws)[i];
        }
      };
    }
    return out;
  }

  // ---- backward ----

  void backward(Ref root) {
    if (val(root).size() != 1) throw ContractError("backward: root must be scalar");
    for (Ref i = 0; i <= root; ++i) {
      Node& n = nodes_[i];
      if (n.needs_grad && n.grad.size() == 0) {
        const Mat<T>& v = val(i);
        n.grad = Mat<T>::Zero(v.rows(), v.cols());
      }
    }
    nodes_[root].grad(0, 0) = T(1);
    for (Ref i = root; i >= 0; --i) {
      if (nodes_[i].back && nodes_[i].needs_grad) nodes_[i].back();
    }
  }

  // add this pass's parameter gradients into external buffers
  void accumulate_param_grads(std::vector<Mat<T>>& buffers) const {
    for (const auto& [pid, ref] : param_nodes_) {
      const Node& n = nodes_[ref];
      if (n.grad.size() > 0) buffers[pid] += n.grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }

  static Mat<T> stable_softmax(const Mat<T>& z) {
    Mat<T> p(z.rows(), z.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      T m = z.row(i).maxCoeff();
      p.row(i) = (z.row(i).array() - m).exp();
      p.row(i) /= p.row(i).sum();
    }
    return p;
  }

 private:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    std::function<void()> back;
    bool needs_grad = false;
    int param_id = -1;
  };

  bool needs(Ref r) const { return nodes_[r].needs_grad; }

  Mat<T>& grad_of(Ref r) {
    Node& n = nodes_[r];
    if (n.grad.size() == 0) {
      const Mat<T>& v = val(r);
      n.grad = Mat<T>::Zero(v.rows(), v.cols());
    }
    return n.grad;
  }

  Ref push(Mat<T> v, bool needs_grad) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  template <class F>
  Ref unary(Mat<T> y, Ref a, F&& backfn) {
    Ref out = push(std::move(y), needs(a));
    if (nodes_[out].needs_grad) {
      nodes_[out].back = [this, out, fn = std::forward<F>(backfn)]() {
        fn(nodes_[out].grad);
      };
    }
    return out;
  }

  template <class F>
  Ref unary_or_binary(Mat<T> y, Ref a, Ref b, F&& backfn) {
    Ref out = push(std::move(y), needs(a) || needs(b));
    if (nodes_[out].needs_grad) {
      nodes_[out].back = [this, out, fn = std::forward<F>(backfn)]() {
        fn(nodes_[out].grad);
      };
    }
    return out;
  }

  std::deque<Node> nodes_;
  const ParamStore<T>* params_;
  std::vector<Ref> param_refs_;
  std::vector<std::pair<int, Ref>> param_nodes_;
};

}  // namespace mmm::ad
