#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "m2l2/tensor.hpp"

// Eager reverse-mode autodiff over Mat<S>. Every op computes its value
// immediately; when an input is tracked, the op also records a closure that
// routes the output gradient to its parents. Untracked inputs (constants, or
// any value produced under an untracked Tape) carry no graph, so inference
// runs through the same code with zero bookkeeping.
namespace m2l2::ag {

template <typename S>
struct Node {
  Mat<S> grad;
  bool has_grad = false;
  std::vector<std::shared_ptr<Node<S>>> parents;
  std::function<void(const Mat<S>&)> backward;  // accumulate grad into parents
};

template <typename S>
struct Var {
  std::shared_ptr<Mat<S>> value;
  std::shared_ptr<Node<S>> node;  // null => not tracked

  const Mat<S>& val() const { return *value; }
  Index rows() const { return value->rows(); }
  Index cols() const { return value->cols(); }
  Index size() const { return value->size(); }
  bool tracked() const { return node != nullptr; }
};

template <typename S>
Var<S> make_var(Mat<S> m) {
  return Var<S>{std::make_shared<Mat<S>>(std::move(m)), nullptr};
}

// Constant wrapper: no gradient ever flows into it.
template <typename S>
Var<S> constant(Mat<S> m) {
  return make_var(std::move(m));
}

// Tracked leaf; used for inputs whose gradient a caller wants (grad checks).
template <typename S>
Var<S> leaf(Mat<S> m) {
  auto v = make_var(std::move(m));
  v.node = std::make_shared<Node<S>>();
  return v;
}

template <typename S, typename E>
void accum(Node<S>& n, const E& g) {
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

// For ops that write gradient into a sub-block of the parent.
template <typename S>
Mat<S>& grad_buffer(Node<S>& n, Index rows, Index cols) {
  if (!n.has_grad) {
    n.grad = Mat<S>::Zero(rows, cols);
    n.has_grad = true;
  }
  return n.grad;
}

template <typename S>
std::shared_ptr<Node<S>> make_node(
    std::initializer_list<std::shared_ptr<Node<S>>> parents) {
  auto n = std::make_shared<Node<S>>();
  for (const auto& p : parents)
    if (p) n->parents.push_back(p);
  return n;
}

// Runs reverse-mode accumulation from a scalar loss. Nodes are processed in
// reverse topological order, so each node's gradient is complete before its
// backward closure fires.
template <typename S>
void backward(const Var<S>& loss) {
  check(loss.tracked(), "backward: loss is not tracked");
  check(loss.size() == 1, "backward: loss must be a scalar");

  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  std::vector<std::pair<Node<S>*, std::size_t>> stack;
  stack.emplace_back(loss.node.get(), 0);
  seen.insert(loss.node.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<S>* p = n->parents[next++].get();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  loss.node->grad = Mat<S>::Ones(1, 1);
  loss.node->has_grad = true;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* n = *it;
    if (n->backward && n->has_grad) n->backward(n->grad);
  }
}

// ---------------------------------------------------------------------------
// Parameters and tape

template <typename S>
struct Param {
  std::string name;
  Mat<S> value;
  Mat<S> grad;

  Param() = default;
  Param(std::string n, Mat<S> v)
      : name(std::move(n)), value(std::move(v)),
        grad(Mat<S>::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(); }
};

// One forward pass's view of the parameters. A tracked tape binds each Param
// to a leaf Var on first use (so several uses share one node and gradients
// merge there); an untracked tape hands out aliasing constants. flush_grads()
// moves leaf gradients into Param::grad in first-use order, which keeps
// accumulation order fixed run to run.
template <typename S>
class Tape {
public:
  explicit Tape(bool track) : track_(track) {}

  bool tracking() const { return track_; }

  Var<S> use(Param<S>& p) {
    // Alias the parameter's storage; the parameter outlives the tape.
    std::shared_ptr<Mat<S>> alias(&p.value, [](Mat<S>*) {});
    if (!track_) return Var<S>{std::move(alias), nullptr};
    auto it = bound_.find(&p);
    if (it != bound_.end()) return it->second;
    Var<S> v{std::move(alias), std::make_shared<Node<S>>()};
    bound_.emplace(&p, v);
    order_.push_back(&p);
    return v;
  }

  // Call after backward(); adds accumulated leaf grads into Param::grad.
  void flush_grads() {
    for (Param<S>* p : order_) {
      const auto& v = bound_.at(p);
      if (v.node->has_grad) p->grad += v.node->grad;
    }
  }

private:
  bool track_;
  std::unordered_map<Param<S>*, Var<S>> bound_;
  std::vector<Param<S>*> order_;
};

// ---------------------------------------------------------------------------
// Elementwise and affine ops

template <typename S>
void check_same_shape(const Var<S>& a, const Var<S>& b, const char* op) {
  check(a.rows() == b.rows() && a.cols() == b.cols(),
        std::string(op) + ": shape mismatch");
}

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  check_same_shape(a, b, "add");
  auto out = make_var<S>(a.val() + b.val());
  if (a.node || b.node) {
    out.node = make_node<S>({a.node, b.node});
    Node<S>* an = a.node.get();
    Node<S>* bn = b.node.get();
    out.node->backward = [an, bn](const Mat<S>& g) {
      if (an) accum(*an, g);
      if (bn) accum(*bn, g);
    };
  }
  return out;
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  check_same_shape(a, b, "sub");
  auto out = make_var<S>(a.val() - b.val());
  if (a.node || b.node) {
    out.node = make_node<S>({a.node, b.node});
    Node<S>* an = a.node.get();
    Node<S>* bn = b.node.get();
    out.node->backward = [an, bn](const Mat<S>& g) {
      if (an) accum(*an, g);
      if (bn) accum(*bn, -g);
    };
  }
  return out;
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  check_same_shape(a, b, "mul");
  auto out = make_var<S>(a.val().cwiseProduct(b.val()));
  if (a.node || b.node) {
    out.node = make_node<S>({a.node, b.node});
    Node<S>* an = a.node.get();
    Node<S>* bn = b.node.get();
    auto av = a.value;
    auto bv = b.value;
    out.node->backward = [an, bn, av, bv](const Mat<S>& g) {
      if (an) accum(*an, g.cwiseProduct(*bv));
      if (bn) accum(*bn, g.cwiseProduct(*av));
    };
  }
  return out;
}

// alpha * a + beta * b
template <typename S>
Var<S> axpby(S alpha, const Var<S>& a, S beta, const Var<S>& b) {
  check_same_shape(a, b, "axpby");
  auto out = make_var<S>(alpha * a.val() + beta * b.val());
  if (a.node || b.node) {
    out.node = make_node<S>({a.node, b.node});
    Node<S>* an = a.node.get();
    Node<S>* bn = b.node.get();
    out.node->backward = [an, bn, alpha, beta](const Mat<S>& g) {
      if (an) accum(*an, alpha * g);
      if (bn) accum(*bn, beta * g);
    };
  }
  return out;
}

template <typename S>
Var<S> scale(const Var<S>& a, S s) {
  auto out = make_var<S>(s * a.val());
  if (a.node) {
    out.node = make_node<S>({a.node});
    Node<S>* an = a.node.get();
    out.node->backward = [an, s](const Mat<S>& g) { accum(*an, s * g); };
  }
  return out;
}

template <typename S>
Var<S> add_scalar(const Var<S>& a, S s) {
  auto out = make_var<S>(a.val().array() + s);
  if (a.node) {
    out.node = make_node<S>({a.node});
    Node<S>* an = a.node.get();
    out.node->backward = [an](const Mat<S>& g) { accum(*an, g); };
  }
  return out;
}

// y = x + r broadcast over rows; r is [1 x D].
template <typename S>
Var<S> add_rowvec(const Var<S>& x, const Var<S>& r) {
  check(r.rows() == 1 && r.cols() == x.cols(), "add_rowvec: bad row vector");
  auto out = make_var<S>(x.val().rowwise() + r.val().row(0));
  if (x.node || r.node) {
    out.node = make_node<S>({x.node, r.node});
    Node<S>* xn = x.node.get();
    Node<S>* rn = r.node.get();
    out.node->backward = [xn, rn](const Mat<S>& g) {
      if (xn) accum(*xn, g);
      if (rn) accum(*rn, g.colwise().sum());
    };
  }
  return out;
}

// y = x .* r broadcast over rows; r is [1 x D].
template <typename S>
Var<S> mul_rowvec(const Var<S>& x, const Var<S>& r) {
  check(r.rows() == 1 && r.cols() == x.cols(), "mul_rowvec: bad row vector");
  auto out = make_var<S>(x.val().array().rowwise() * r.val().row(0).array());
  if (x.node || r.node) {
    out.node = make_node<S>({x.node, r.node});
    Node<S>* xn = x.node.get();
    Node<S>* rn = r.node.get();
    auto xv = x.value;
    auto rv = r.value;
    out.node->backward = [xn, rn, xv, rv](const Mat<S>& g) {
      if (xn) accum(*xn, (g.array().rowwise() * rv->row(0).array()).matrix());
      if (rn) accum(*rn, g.cwiseProduct(*xv).colwise().sum());
    };
  }
  return out;
}

// y = x + c broadcast over columns; c is [C x 1] (per-channel bias).
template <typename S>
Var<S> add_colvec(const Var<S>& x, const Var<S>& c) {
  check(c.cols() == 1 && c.rows() == x.rows(), "add_colvec: bad col vector");
  auto out = make_var<S>(x.val().colwise() + c.val().col(0));
  if (x.node || c.node) {
    out.node = make_node<S>({x.node, c.node});
    Node<S>* xn = x.node.get();
    Node<S>* cn = c.node.get();
    out.node->backward = [xn, cn](const Mat<S>& g) {
      if (xn) accum(*xn, g);
      if (cn) accum(*cn, g.rowwise().sum());
    };
  }
  return out;
}

// y = x .* c broadcast over columns; c is [C x 1] (per-channel gain).
template <typename S>
Var<S> mul_colvec(const Var<S>& x, const Var<S>& c) {
  check(c.cols() == 1 && c.rows() == x.rows(), "mul_colvec: bad col vector");
  auto out = make_var<S>(x.val().array().colwise() * c.val().col(0).array());
  if (x.node || c.node) {
    out.node = make_node<S>({x.node, c.node});
    Node<S>* xn = x.node.get();
    Node<S>* cn = c.node.get();
    auto xv = x.value;
    auto cv = c.value;
    out.node->backward = [xn, cn, xv, cv](const Mat<S>& g) {
      if (xn) accum(*xn, (g.array().colwise() * cv->col(0).array()).matrix());
      if (cn) accum(*cn, g.cwiseProduct(*xv).rowwise().sum());
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix product

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b, bool ta = false,
              bool tb = false) {
  Index ak = ta ? a.rows() : a.cols();
  Index bk = tb ? b.cols() : b.rows();
  check(ak == bk, "matmul: inner dimension mismatch");
  Mat<S> y;
  if (!ta && !tb) y = a.val() * b.val();
  else if (!ta && tb) y = a.val() * b.val().transpose();
  else if (ta && !tb) y = a.val().transpose() * b.val();
  else y = a.val().transpose() * b.val().transpose();
  auto out = make_var<S>(std::move(y));
  if (a.node || b.node) {
    out.node = make_node<S>({a.node, b.node});
    Node<S>* an = a.node.get();
    Node<S>* bn = b.node.get();
    auto av = a.value;
    auto bv = b.value;
    out.node->backward = [an, bn, av, bv, ta, tb](const Mat<S>& g) {
      if (an) {
        if (!ta && !tb) accum(*an, g * bv->transpose());
        else if (!ta && tb) accum(*an, g * (*bv));
        else if (ta && !tb) accum(*an, (*bv) * g.transpose());
        else accum(*an, bv->transpose() * g.transpose());
      }
      if (bn) {
        if (!ta && !tb) accum(*bn, av->transpose() * g);
        else if (!ta && tb) accum(*bn, g.transpose() * (*av));
        else if (ta && !tb) accum(*bn, (*av) * g);
        else accum(*bn, g.transpose() * av->transpose());
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities

template <typename S>
Var<S> silu(const Var<S>& x) {
  auto sig = (S(1) / (S(1) + (-x.val().array()).exp())).matrix().eval();
  auto out = make_var<S>(x.val().cwiseProduct(sig));
  if (x.node) {
    out.node = make_node<S>({x.node});
    Node<S>* xn = x.node.get();
    auto xv = x.value;
    auto sv = std::make_shared<Mat<S>>(std::move(sig));
    out.node->backward = [xn, xv, sv](const Mat<S>& g) {
      auto s = sv->array();
      auto d = s * (S(1) + xv->array() * (S(1) - s));
      accum(*xn, (g.array() * d).matrix());
    };
  }
  return out;
}

template <typename S>
Var<S> gelu(const Var<S>& x) {
  // tanh approximation; backward differentiates the same expression.
  const S k = S(0.7978845608028654);  // sqrt(2/pi)
  const S c3 = S(0.044715);
  auto xa = x.val().array();
  auto inner = (k * (xa + c3 * xa.cube())).eval();
  auto t = inner.tanh().eval();
  auto out = make_var<S>((S(0.5) * xa * (S(1) + t)).matrix());
  if (x.node) {
    out.node = make_node<S>({x.node});
    Node<S>* xn = x.node.get();
    auto xv = x.value;
    auto tv = std::make_shared<Mat<S>>(t.matrix());
    out.node->backward = [xn, xv, tv, k, c3](const Mat<S>& g) {
      auto xa2 = xv->array();
      auto ta = tv->array();
      auto sech2 = S(1) - ta.square();
      auto dinner = k * (S(1) + S(3) * c3 * xa2.square());
      auto d = S(0.5) * (S(1) + ta) + S(0.5) * xa2 * sech2 * dinner;
      accum(*xn, (g.array() * d).matrix());
    };
  }
  return out;
}

// tanh squashed strictly inside (-1, 1): float tanh can round to exactly 1,
// which would break the open-interval contract on latents.
template <typename S>
Var<S> bounded_tanh(const Var<S>& x) {
  const S lim = S(1) - Eigen::NumTraits<S>::epsilon();
  auto out = make_var<S>(x.val().array().tanh().min(lim).max(-lim).matrix());
  if (x.node) {
    out.node = make_node<S>({x.node});
    Node<S>* xn = x.node.get();
    auto yv = out.value;
    out.node->backward = [xn, yv](const Mat<S>& g) {
      accum(*xn, (g.array() * (S(1) - yv->array().square())).matrix());
    };
  }
  return out;
}

template <typename S>
Var<S> sqrt_op(const Var<S>& x) {
  auto out = make_var<S>(x.val().array().sqrt().matrix());
  if (x.node) {
    out.node = make_node<S>({x.node});
    Node<S>* xn = x.node.get();
    auto yv = out.value;
    out.node->backward = [xn, yv](const Mat<S>& g) {
      accum(*xn, (g.array() / (S(2) * yv->array())).matrix());
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
Var<S> sum(const Var<S>& x) {
  Mat<S> y(1, 1);
  y(0, 0) = x.val().sum();
  auto out = make_var<S>(std::move(y));
  if (x.node) {
    out.node = make_node<S>({x.node});
    Node<S>* xn = x.node.get();
    Index r = x.rows(), c = x.cols();
    out.node->backward = [xn, r, c](const Mat<S>& g) {
      accum(*xn, Mat<S>::Constant(r, c, g(0, 0)));
    };
  }
  return out;
}

template <typename S>
Var<S> mean(const Var<S>& x) {
  return scale(sum(x), S(1) / S(x.size()));
}

template <typename S>
Var<S> sum_squares(const Var<S>& x) {
  Mat<S> y(1, 1);
  y(0, 0) = x.val().squaredNorm();
  auto out = make_var<S>(std::move(y));
  if (x.node) {
    out.node = make_node<S>({x.node});
    Node<S>* xn = x.node.get();
    auto xv = x.value;
    out.node->backward = [xn, xv](const Mat<S>& g) {
      accum(*xn, (S(2) * g(0, 0)) * (*xv));
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename S>
Var<S> transpose(const Var<S>& x) {
  auto out = make_var<S>(x.val().transpose());
  if (x.node) {
    out.node = make_node<S>({x.node});
    Node<S>* xn = x.node.get();
    out.node->backward = [xn](const Mat<S>& g) { accum(*xn, g.transpose()); };
  }
  return out;
}

template <typename S>
Var<S> slice_rows(const Var<S>& x, Index r0, Index n) {
  check(r0 >= 0 && n >= 0 && r0 + n <= x.rows(), "slice_rows: out of range");
  auto out = make_var<S>(x.val().middleRows(r0, n));
  if (x.node) {
    out.node = make_node<S>({x.node});
    Node<S>* xn = x.node.get();
    Index pr = x.rows(), pc = x.cols();
    out.node->backward = [xn, pr, pc, r0, n](const Mat<S>& g) {
      grad_buffer(*xn, pr, pc).middleRows(r0, n) += g;
    };
  }
  return out;
}

template <typename S>
Var<S> slice_cols(const Var<S>& x, Index c0, Index n) {
  check(c0 >= 0 && n >= 0 && c0 + n <= x.cols(), "slice_cols: out of range");
  auto out = make_var<S>(x.val().middleCols(c0, n));
  if (x.node) {
    out.node = make_node<S>({x.node});
    Node<S>* xn = x.node.get();
    Index pr = x.rows(), pc = x.cols();
    out.node->backward = [xn, pr, pc, c0, n](const Mat<S>& g) {
      grad_buffer(*xn, pr, pc).middleCols(c0, n) += g;
    };
  }
  return out;
}

template <typename S>
Var<S> concat_rows(const Var<S>& a, const Var<S>& b) {
  check(a.cols() == b.cols(), "concat_rows: column mismatch");
  Mat<S> y(a.rows() + b.rows(), a.cols());
  y.topRows(a.rows()) = a.val();
  y.bottomRows(b.rows()) = b.val();
  auto out = make_var<S>(std::move(y));
  if (a.node || b.node) {
    out.node = make_node<S>({a.node, b.node});
    Node<S>* an = a.node.get();
    Node<S>* bn = b.node.get();
    Index ar = a.rows(), br = b.rows();
    out.node->backward = [an, bn, ar, br](const Mat<S>& g) {
      if (an) accum(*an, g.topRows(ar));
      if (bn) accum(*bn, g.bottomRows(br));
    };
  }
  return out;
}

template <typename S>
Var<S> concat_cols(const Var<S>& a, const Var<S>& b) {
  check(a.rows() == b.rows(), "concat_cols: row mismatch");
  Mat<S> y(a.rows(), a.cols() + b.cols());
  y.leftCols(a.cols()) = a.val();
  y.rightCols(b.cols()) = b.val();
  auto out = make_var<S>(std::move(y));
  if (a.node || b.node) {
    out.node = make_node<S>({a.node, b.node});
    Node<S>* an = a.node.get();
    Node<S>* bn = b.node.get();
    Index ac = a.cols(), bc = b.cols();
    out.node->backward = [an, bn, ac, bc](const Mat<S>& g) {
      if (an) accum(*an, g.leftCols(ac));
      if (bn) accum(*bn, g.rightCols(bc));
    };
  }
  return out;
}

template <typename S>
Var<S> detach(const Var<S>& x) {
  return Var<S>{x.value, nullptr};
}

// Row-major reinterpretation to a new shape of equal size (copies).
template <typename S>
Var<S> reshape(const Var<S>& x, Index r, Index c) {
  check(r * c == x.size(), "reshape: size mismatch");
  Mat<S> y(r, c);
  std::copy(x.val().data(), x.val().data() + x.size(), y.data());
  auto out = make_var<S>(std::move(y));
  if (x.node) {
    out.node = make_node<S>({x.node});
    Node<S>* xn = x.node.get();
    Index xr = x.rows(), xc = x.cols();
    out.node->backward = [xn, xr, xc](const Mat<S>& g) {
      Mat<S> dx(xr, xc);
      std::copy(g.data(), g.data() + g.size(), dx.data());
      accum(*xn, dx);
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax (row-wise, numerically stable)

template <typename S>
Var<S> row_softmax(const Var<S>& x) {
  Mat<S> y = x.val();
  for (Index i = 0; i < y.rows(); ++i) {
    auto row = y.row(i).array();
    S m = row.maxCoeff();
    row = (row - m).exp();
    row /= row.sum();
  }
  auto out = make_var<S>(std::move(y));
  if (x.node) {
    out.node = make_node<S>({x.node});
    Node<S>* xn = x.node.get();
    auto yv = out.value;
    out.node->backward = [xn, yv](const Mat<S>& g) {
      Mat<S> dx = g.cwiseProduct(*yv);
      Vec<S> rowsum = dx.rowwise().sum();
      dx.noalias() -= (rowsum * Mat<S>::Ones(1, g.cols())).cwiseProduct(*yv);
      accum(*xn, dx);
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

// Per-row layer norm without affine terms (compose with mul_rowvec /
// add_rowvec for the affine or adaptive variants).
template <typename S>
Var<S> layer_norm(const Var<S>& x, S eps = S(1e-5)) {
  Index R = x.rows(), C = x.cols();
  check(C > 0, "layer_norm: empty rows");
  Mat<S> xhat(R, C);
  Vec<S> inv_std(R);
  for (Index i = 0; i < R; ++i) {
    auto row = x.val().row(i).array();
    S mu = row.mean();
    S var = (row - mu).square().sum() / S(C);
    S inv = S(1) / std::sqrt(var + eps);
    xhat.row(i) = ((row - mu) * inv).matrix();
    inv_std(i) = inv;
  }
  auto out = make_var<S>(std::move(xhat));
  if (x.node) {
    out.node = make_node<S>({x.node});
    Node<S>* xn = x.node.get();
    auto yv = out.value;  // xhat
    auto iv = std::make_shared<Vec<S>>(std::move(inv_std));
    out.node->backward = [xn, yv, iv, C](const Mat<S>& g) {
      Mat<S> dx(g.rows(), g.cols());
      for (Index i = 0; i < g.rows(); ++i) {
        auto gi = g.row(i).array();
        auto hi = yv->row(i).array();
        S gmean = gi.mean();
        S ghmean = (gi * hi).mean();
        dx.row(i) = ((gi - gmean - hi * ghmean) * (*iv)(i)).matrix();
      }
      accum(*xn, dx);
      (void)C;
    };
  }
  return out;
}

// Group norm over a [C x P] feature map: channels are split into `groups`
// contiguous groups and statistics pool over (channels in group) x P.
// Affine terms compose via mul_colvec / add_colvec.
template <typename S>
Var<S> group_norm(const Var<S>& x, Index groups, S eps = S(1e-5)) {
  Index C = x.rows(), P = x.cols();
  check(groups > 0 && C % groups == 0, "group_norm: channels % groups != 0");
  Index gc = C / groups;
  Mat<S> xhat(C, P);
  Vec<S> inv_std(groups);
  for (Index g = 0; g < groups; ++g) {
    auto blk = x.val().middleRows(g * gc, gc).array();
    S mu = blk.mean();
    S var = (blk - mu).square().sum() / S(gc * P);
    S inv = S(1) / std::sqrt(var + eps);
    xhat.middleRows(g * gc, gc) = ((blk - mu) * inv).matrix();
    inv_std(g) = inv;
  }
  auto out = make_var<S>(std::move(xhat));
  if (x.node) {
    out.node = make_node<S>({x.node});
    Node<S>* xn = x.node.get();
    auto yv = out.value;
    auto iv = std::make_shared<Vec<S>>(std::move(inv_std));
    out.node->backward = [xn, yv, iv, groups, gc](const Mat<S>& g) {
      Mat<S> dx(g.rows(), g.cols());
      for (Index k = 0; k < groups; ++k) {
        auto gi = g.middleRows(k * gc, gc).array();
        auto hi = yv->middleRows(k * gc, gc).array();
        S gmean = gi.mean();
        S ghmean = (gi * hi).mean();
        dx.middleRows(k * gc, gc) = ((gi - gmean - hi * ghmean) * (*iv)(k)).matrix();
      }
      accum(*xn, dx);
    };
  }
  return out;
}

}  // namespace m2l2::ag
