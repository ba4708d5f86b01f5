#pragma once

// Reverse-mode automatic differentiation on dense matrices. A Tape records
// one forward evaluation; backward() walks the nodes in reverse creation
// order and accumulates gradients into tape nodes and bound Parameters.
//
// Every op is a free function taking Var handles, so expressions compose the
// way Eigen expressions do: y = matmul(gelu(add_rowwise(matmul(x, w), b)), v).

#include "cvqa/types.hpp"

#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace cvqa::ad {

template <class S>
struct Parameter {
  std::string name;
  MatX<S> value;
  MatX<S> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, MatX<S> v)
      : name(std::move(n)), value(std::move(v)) {
    grad = MatX<S>::Zero(value.rows(), value.cols());
  }
  void zero_grad() { grad.setZero(); }
  Eigen::Index size() const { return value.size(); }
};

template <class S>
class Tape;

template <class S>
struct Var {
  Tape<S>* tape = nullptr;
  int idx = -1;

  bool valid() const { return tape != nullptr && idx >= 0; }
  const MatX<S>& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

template <class S>
class Tape {
 public:
  struct Node {
    MatX<S> value;
    MatX<S> grad;  // lazily sized; empty means "no contribution yet"
    std::function<void(Tape&)> backward;
    bool needs_grad = false;
  };

  Var<S> constant(MatX<S> v) { return push(std::move(v), false, nullptr); }

  // Differentiable leaf not tied to a Parameter (used by tests and probes).
  Var<S> input(MatX<S> v) { return push(std::move(v), true, nullptr); }

  // Differentiable leaf whose gradient flows into p.grad. Binding the same
  // Parameter several times on one tape sums the contributions, which is
  // exactly what weight sharing needs.
  Var<S> param(Parameter<S>& p) {
    Parameter<S>* pp = &p;
    const int oi = next_index();
    return push(p.value, true, [oi, pp](Tape& t) {
      if (t.node(oi).grad.size() != 0) pp->grad += t.node(oi).grad;
    });
  }

  int next_index() const { return static_cast<int>(nodes_.size()); }

  Var<S> push(MatX<S> v, bool needs_grad, std::function<void(Tape&)> bw) {
    Node n;
    n.value = std::move(v);
    n.backward = std::move(bw);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
  }

  Node& node(int i) { return nodes_[static_cast<size_t>(i)]; }
  const Node& node(int i) const { return nodes_[static_cast<size_t>(i)]; }

  const MatX<S>& val(int i) const { return nodes_[static_cast<size_t>(i)].value; }
  bool needs(int i) const { return nodes_[static_cast<size_t>(i)].needs_grad; }

  // Gradient buffer of node i, zero-initialized on first touch.
  MatX<S>& grad(int i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.grad.size() == 0) n.grad = MatX<S>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void backward(Var<S> root) {
    CVQA_REQUIRE(root.valid() && root.tape == this, DimensionError,
                 "backward root does not belong to this tape");
    CVQA_REQUIRE(val(root.idx).size() == 1, DimensionError,
                 "backward root must be a scalar (1x1)");
    grad(root.idx)(0, 0) = S(1);
    for (int i = root.idx; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (!n.needs_grad || !n.backward || n.grad.size() == 0) continue;
      n.backward(*this);
    }
  }

  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }
  void reserve(size_t n) { nodes_.reserve(n); }

 private:
  std::vector<Node> nodes_;
};

template <class S>
const MatX<S>& Var<S>::value() const {
  return tape->val(idx);
}

namespace detail {
template <class S>
inline void same_tape(Var<S> a, Var<S> b) {
  CVQA_REQUIRE(a.valid() && b.valid() && a.tape == b.tape, DimensionError,
               "ops require operands on the same tape");
}
}  // namespace detail

// ---- arithmetic ----

template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
  detail::same_tape(a, b);
  Tape<S>& t = *a.tape;
  CVQA_REQUIRE(a.cols() == b.rows(), DimensionError, "matmul inner dims differ");
  MatX<S> v = t.val(a.idx) * t.val(b.idx);
  const bool ng = t.needs(a.idx) || t.needs(b.idx);
  const int ai = a.idx, bi = b.idx, oi = t.next_index();
  return t.push(std::move(v), ng, !ng ? std::function<void(Tape<S>&)>() : [ai, bi, oi](Tape<S>& tt) {
    const MatX<S>& g = tt.node(oi).grad;
    if (tt.needs(ai)) tt.grad(ai).noalias() += g * tt.val(bi).transpose();
    if (tt.needs(bi)) tt.grad(bi).noalias() += tt.val(ai).transpose() * g;
  });
}

template <class S>
Var<S> transpose(Var<S> a) {
  Tape<S>& t = *a.tape;
  MatX<S> v = t.val(a.idx).transpose();
  const bool ng = t.needs(a.idx);
  const int ai = a.idx, oi = t.next_index();
  return t.push(std::move(v), ng, !ng ? std::function<void(Tape<S>&)>() : [ai, oi](Tape<S>& tt) {
    tt.grad(ai) += tt.node(oi).grad.transpose();
  });
}

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::same_tape(a, b);
  Tape<S>& t = *a.tape;
  CVQA_REQUIRE(a.rows() == b.rows() && a.cols() == b.cols(), DimensionError,
               "add shape mismatch");
  MatX<S> v = t.val(a.idx) + t.val(b.idx);
  const bool ng = t.needs(a.idx) || t.needs(b.idx);
  const int ai = a.idx, bi = b.idx, oi = t.next_index();
  return t.push(std::move(v), ng, !ng ? std::function<void(Tape<S>&)>() : [ai, bi, oi](Tape<S>& tt) {
    const MatX<S>& g = tt.node(oi).grad;
    if (tt.needs(ai)) tt.grad(ai) += g;
    if (tt.needs(bi)) tt.grad(bi) += g;
  });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::same_tape(a, b);
  Tape<S>& t = *a.tape;
  CVQA_REQUIRE(a.rows() == b.rows() && a.cols() == b.cols(), DimensionError,
               "sub shape mismatch");
  MatX<S> v = t.val(a.idx) - t.val(b.idx);
  const bool ng = t.needs(a.idx) || t.needs(b.idx);
  const int ai = a.idx, bi = b.idx, oi = t.next_index();
  return t.push(std::move(v), ng, !ng ? std::function<void(Tape<S>&)>() : [ai, bi, oi](Tape<S>& tt) {
    const MatX<S>& g = tt.node(oi).grad;
    if (tt.needs(ai)) tt.grad(ai) += g;
    if (tt.needs(bi)) tt.grad(bi) -= g;
  });
}

template <class S>
Var<S> hadamard(Var<S> a, Var<S> b) {
  detail::same_tape(a, b);
  Tape<S>& t = *a.tape;
  CVQA_REQUIRE(a.rows() == b.rows() && a.cols() == b.cols(), DimensionError,
               "hadamard shape mismatch");
  MatX<S> v = t.val(a.idx).cwiseProduct(t.val(b.idx));
  const bool ng = t.needs(a.idx) || t.needs(b.idx);
  const int ai = a.idx, bi = b.idx, oi = t.next_index();
  return t.push(std::move(v), ng, !ng ? std::function<void(Tape<S>&)>() : [ai, bi, oi](Tape<S>& tt) {
    const MatX<S>& g = tt.node(oi).grad;
    if (tt.needs(ai)) tt.grad(ai) += g.cwiseProduct(tt.val(bi));
    if (tt.needs(bi)) tt.grad(bi) += g.cwiseProduct(tt.val(ai));
  });
}

template <class S>
Var<S> scale(Var<S> a, S c) {
  Tape<S>& t = *a.tape;
  MatX<S> v = t.val(a.idx) * c;
  const bool ng = t.needs(a.idx);
  const int ai = a.idx, oi = t.next_index();
  return t.push(std::move(v), ng, !ng ? std::function<void(Tape<S>&)>() : [ai, oi, c](Tape<S>& tt) {
    tt.grad(ai) += tt.node(oi).grad * c;
  });
}

template <class S>
Var<S> add_scalar(Var<S> a, S c) {
  Tape<S>& t = *a.tape;
  MatX<S> v = t.val(a.idx).array() + c;
  const bool ng = t.needs(a.idx);
  const int ai = a.idx, oi = t.next_index();
  return t.push(std::move(v), ng, !ng ? std::function<void(Tape<S>&)>() : [ai, oi](Tape<S>& tt) {
    tt.grad(ai) += tt.node(oi).grad;
  });
}

// y(i,:) = x(i,:) + b(0,:) for a 1-row bias.
template <class S>
Var<S> add_rowwise(Var<S> x, Var<S> b) {
  detail::same_tape(x, b);
  Tape<S>& t = *x.tape;
  CVQA_REQUIRE(b.rows() == 1 && b.cols() == x.cols(), DimensionError,
               "add_rowwise needs a 1 x cols bias");
  MatX<S> v = t.val(x.idx);
  v.rowwise() += t.val(b.idx).row(0);
  const bool ng = t.needs(x.idx) || t.needs(b.idx);
  const int xi = x.idx, bi = b.idx, oi = t.next_index();
  return t.push(std::move(v), ng, !ng ? std::function<void(Tape<S>&)>() : [xi, bi, oi](Tape<S>& tt) {
    const MatX<S>& g = tt.node(oi).grad;
    if (tt.needs(xi)) tt.grad(xi) += g;
    if (tt.needs(bi)) tt.grad(bi) += g.colwise().sum();
  });
}

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  CVQA_REQUIRE(!parts.empty(), DimensionError, "concat_cols of nothing");
  Tape<S>& t = *parts[0].tape;
  Eigen::Index rows = parts[0].rows(), cols = 0;
  bool ng = false;
  for (const auto& p : parts) {
    detail::same_tape(parts[0], p);
    CVQA_REQUIRE(p.rows() == rows, DimensionError, "concat_cols row mismatch");
    cols += p.cols();
    ng = ng || t.needs(p.idx);
  }
  MatX<S> v(rows, cols);
  Eigen::Index off = 0;
  std::vector<int> idxs;
  std::vector<Eigen::Index> widths;
  for (const auto& p : parts) {
    v.middleCols(off, p.cols()) = t.val(p.idx);
    idxs.push_back(p.idx);
    widths.push_back(p.cols());
    off += p.cols();
  }
  const int oi = t.next_index();
  return t.push(std::move(v), ng,
                !ng ? std::function<void(Tape<S>&)>()
                    : [idxs, widths, oi](Tape<S>& tt) {
                        const MatX<S>& g = tt.node(oi).grad;
                        Eigen::Index o = 0;
                        for (size_t k = 0; k < idxs.size(); ++k) {
                          if (tt.needs(idxs[k]))
                            tt.grad(idxs[k]) += g.middleCols(o, widths[k]);
                          o += widths[k];
                        }
                      });
}

template <class S>
Var<S> concat_cols(Var<S> a, Var<S> b) {
  return concat_cols(std::vector<Var<S>>{a, b});
}

template <class S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  CVQA_REQUIRE(!parts.empty(), DimensionError, "concat_rows of nothing");
  Tape<S>& t = *parts[0].tape;
  Eigen::Index cols = parts[0].cols(), rows = 0;
  bool ng = false;
  for (const auto& p : parts) {
    detail::same_tape(parts[0], p);
    CVQA_REQUIRE(p.cols() == cols, DimensionError, "concat_rows col mismatch");
    rows += p.rows();
    ng = ng || t.needs(p.idx);
  }
  MatX<S> v(rows, cols);
  Eigen::Index off = 0;
  std::vector<int> idxs;
  std::vector<Eigen::Index> heights;
  for (const auto& p : parts) {
    v.middleRows(off, p.rows()) = t.val(p.idx);
    idxs.push_back(p.idx);
    heights.push_back(p.rows());
    off += p.rows();
  }
  const int oi = t.next_index();
  return t.push(std::move(v), ng,
                !ng ? std::function<void(Tape<S>&)>()
                    : [idxs, heights, oi](Tape<S>& tt) {
                        const MatX<S>& g = tt.node(oi).grad;
                        Eigen::Index o = 0;
                        for (size_t k = 0; k < idxs.size(); ++k) {
                          if (tt.needs(idxs[k]))
                            tt.grad(idxs[k]) += g.middleRows(o, heights[k]);
                          o += heights[k];
                        }
                      });
}

template <class S>
Var<S> block(Var<S> a, Eigen::Index i, Eigen::Index j, Eigen::Index p,
             Eigen::Index q) {
  Tape<S>& t = *a.tape;
  CVQA_REQUIRE(i >= 0 && j >= 0 && i + p <= a.rows() && j + q <= a.cols(),
               DimensionError, "block out of range");
  MatX<S> v = t.val(a.idx).block(i, j, p, q);
  const bool ng = t.needs(a.idx);
  const int ai = a.idx, oi = t.next_index();
  return t.push(std::move(v), ng,
                !ng ? std::function<void(Tape<S>&)>()
                    : [ai, oi, i, j, p, q](Tape<S>& tt) {
                        tt.grad(ai).block(i, j, p, q) += tt.node(oi).grad;
                      });
}

template <class S>
Var<S> gather_rows(Var<S> a, std::vector<int> rows) {
  Tape<S>& t = *a.tape;
  MatX<S> v(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (size_t r = 0; r < rows.size(); ++r) {
    CVQA_REQUIRE(rows[r] >= 0 && rows[r] < a.rows(), DimensionError,
                 "gather_rows index out of range");
    v.row(static_cast<Eigen::Index>(r)) = t.val(a.idx).row(rows[r]);
  }
  const bool ng = t.needs(a.idx);
  const int ai = a.idx, oi = t.next_index();
  return t.push(std::move(v), ng,
                !ng ? std::function<void(Tape<S>&)>()
                    : [ai, oi, rows = std::move(rows)](Tape<S>& tt) {
                        const MatX<S>& g = tt.node(oi).grad;
                        MatX<S>& ga = tt.grad(ai);
                        for (size_t r = 0; r < rows.size(); ++r)
                          ga.row(rows[r]) += g.row(static_cast<Eigen::Index>(r));
                      });
}

// Broadcast a 1x1 value to rows x cols.
template <class S>
Var<S> broadcast_scalar(Var<S> a, Eigen::Index rows, Eigen::Index cols) {
  Tape<S>& t = *a.tape;
  CVQA_REQUIRE(a.rows() == 1 && a.cols() == 1, DimensionError,
               "broadcast_scalar expects a 1x1 input");
  MatX<S> v = MatX<S>::Constant(rows, cols, t.val(a.idx)(0, 0));
  const bool ng = t.needs(a.idx);
  const int ai = a.idx, oi = t.next_index();
  return t.push(std::move(v), ng, !ng ? std::function<void(Tape<S>&)>() : [ai, oi](Tape<S>& tt) {
    tt.grad(ai)(0, 0) += tt.node(oi).grad.sum();
  });
}

// ---- nonlinearities ----

template <class S>
Var<S> relu(Var<S> a) {
  Tape<S>& t = *a.tape;
  MatX<S> v = t.val(a.idx).cwiseMax(S(0));
  const bool ng = t.needs(a.idx);
  const int ai = a.idx, oi = t.next_index();
  return t.push(std::move(v), ng, !ng ? std::function<void(Tape<S>&)>() : [ai, oi](Tape<S>& tt) {
    const MatX<S>& x = tt.val(ai);
    const MatX<S>& g = tt.node(oi).grad;
    tt.grad(ai).array() +=
        g.array() * (x.array() > S(0)).template cast<S>();
  });
}

template <class S>
Var<S> gelu(Var<S> a) {
  Tape<S>& t = *a.tape;
  const MatX<S>& x = t.val(a.idx);
  MatX<S> v(x.rows(), x.cols());
  const S inv_sqrt2 = S(1) / std::sqrt(S(2));
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const S xi = x.data()[i];
    v.data()[i] = S(0.5) * xi * (S(1) + std::erf(xi * inv_sqrt2));
  }
  const bool ng = t.needs(a.idx);
  const int ai = a.idx, oi = t.next_index();
  return t.push(std::move(v), ng, !ng ? std::function<void(Tape<S>&)>() : [ai, oi](Tape<S>& tt) {
    const MatX<S>& xx = tt.val(ai);
    const MatX<S>& g = tt.node(oi).grad;
    MatX<S>& ga = tt.grad(ai);
    const S inv_sqrt2b = S(1) / std::sqrt(S(2));
    const S inv_sqrt2pi = S(1) / std::sqrt(S(2) * S(M_PI));
    for (Eigen::Index i = 0; i < xx.size(); ++i) {
      const S xi = xx.data()[i];
      const S cdf = S(0.5) * (S(1) + std::erf(xi * inv_sqrt2b));
      const S pdf = inv_sqrt2pi * std::exp(S(-0.5) * xi * xi);
      ga.data()[i] += g.data()[i] * (cdf + xi * pdf);
    }
  });
}

template <class S>
Var<S> elu(Var<S> a) {
  Tape<S>& t = *a.tape;
  const MatX<S>& x = t.val(a.idx);
  MatX<S> v(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const S xi = x.data()[i];
    v.data()[i] = xi > S(0) ? xi : std::expm1(xi);
  }
  const bool ng = t.needs(a.idx);
  const int ai = a.idx, oi = t.next_index();
  return t.push(std::move(v), ng, !ng ? std::function<void(Tape<S>&)>() : [ai, oi](Tape<S>& tt) {
    const MatX<S>& xx = tt.val(ai);
    const MatX<S>& g = tt.node(oi).grad;
    MatX<S>& ga = tt.grad(ai);
    for (Eigen::Index i = 0; i < xx.size(); ++i) {
      const S xi = xx.data()[i];
      ga.data()[i] += g.data()[i] * (xi > S(0) ? S(1) : std::exp(xi));
    }
  });
}

template <class S>
Var<S> log_clamped(Var<S> a) {
  Tape<S>& t = *a.tape;
  const MatX<S>& x = t.val(a.idx);
  MatX<S> v(x.rows(), x.cols());
  const S tiny = std::numeric_limits<S>::min();
  for (Eigen::Index i = 0; i < x.size(); ++i)
    v.data()[i] = std::log(std::max(x.data()[i], tiny));
  const bool ng = t.needs(a.idx);
  const int ai = a.idx, oi = t.next_index();
  return t.push(std::move(v), ng, !ng ? std::function<void(Tape<S>&)>() : [ai, oi](Tape<S>& tt) {
    const MatX<S>& xx = tt.val(ai);
    const MatX<S>& g = tt.node(oi).grad;
    MatX<S>& ga = tt.grad(ai);
    const S tinyb = std::numeric_limits<S>::min();
    for (Eigen::Index i = 0; i < xx.size(); ++i)
      ga.data()[i] += g.data()[i] / std::max(xx.data()[i], tinyb);
  });
}

// ---- softmax / normalization ----

// Row-wise softmax. `keep` (optional, length = cols) marks context positions:
// entries with keep[j] <= 0 get exactly zero probability and receive no
// gradient. Rows with no kept position are rejected.
template <class S>
Var<S> softmax_rows(Var<S> a, const VecX<S>* keep = nullptr) {
  Tape<S>& t = *a.tape;
  const MatX<S>& x = t.val(a.idx);
  if (keep) {
    CVQA_REQUIRE(keep->size() == x.cols(), DimensionError,
                 "softmax mask length must equal column count");
    CVQA_REQUIRE((keep->array() > S(0)).any(), DimensionError,
                 "softmax mask keeps no position");
  }
  MatX<S> p(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    S mx = -std::numeric_limits<S>::infinity();
    for (Eigen::Index c = 0; c < x.cols(); ++c)
      if (!keep || (*keep)(c) > S(0)) mx = std::max(mx, x(r, c));
    S denom = S(0);
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (!keep || (*keep)(c) > S(0)) {
        p(r, c) = std::exp(x(r, c) - mx);
        denom += p(r, c);
      } else {
        p(r, c) = S(0);
      }
    }
    p.row(r) /= denom;
  }
  const bool ng = t.needs(a.idx);
  const int ai = a.idx, oi = t.next_index();
  return t.push(std::move(p), ng, !ng ? std::function<void(Tape<S>&)>() : [ai, oi](Tape<S>& tt) {
    const MatX<S>& pp = tt.val(oi);
    const MatX<S>& g = tt.node(oi).grad;
    MatX<S>& ga = tt.grad(ai);
    for (Eigen::Index r = 0; r < pp.rows(); ++r) {
      const S dot = g.row(r).dot(pp.row(r));
      ga.row(r).array() += pp.row(r).array() * (g.row(r).array() - dot);
    }
  });
}

// Column-wise softmax (e.g. attention over positions per channel).
template <class S>
Var<S> softmax_cols(Var<S> a) {
  Tape<S>& t = *a.tape;
  const MatX<S>& x = t.val(a.idx);
  MatX<S> p(x.rows(), x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const S mx = x.col(c).maxCoeff();
    VecX<S> e = (x.col(c).array() - mx).exp();
    p.col(c) = e / e.sum();
  }
  const bool ng = t.needs(a.idx);
  const int ai = a.idx, oi = t.next_index();
  return t.push(std::move(p), ng, !ng ? std::function<void(Tape<S>&)>() : [ai, oi](Tape<S>& tt) {
    const MatX<S>& pp = tt.val(oi);
    const MatX<S>& g = tt.node(oi).grad;
    MatX<S>& ga = tt.grad(ai);
    for (Eigen::Index c = 0; c < pp.cols(); ++c) {
      const S dot = g.col(c).dot(pp.col(c));
      ga.col(c).array() += pp.col(c).array() * (g.col(c).array() - dot);
    }
  });
}

// Per-row layer normalization with learnable gain/bias (both 1 x d).
template <class S>
Var<S> layer_norm(Var<S> x, Var<S> gain, Var<S> bias, S eps = S(1e-5)) {
  detail::same_tape(x, gain);
  detail::same_tape(x, bias);
  Tape<S>& t = *x.tape;
  const Eigen::Index d = x.cols();
  CVQA_REQUIRE(gain.rows() == 1 && gain.cols() == d && bias.rows() == 1 &&
                   bias.cols() == d,
               DimensionError, "layer_norm gain/bias must be 1 x d");
  const MatX<S>& xv = t.val(x.idx);
  MatX<S> xhat(xv.rows(), d);
  VecX<S> inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const S mu = xv.row(r).mean();
    const S var = (xv.row(r).array() - mu).square().sum() / S(d);
    const S is = S(1) / std::sqrt(var + eps);
    inv_std(r) = is;
    xhat.row(r) = (xv.row(r).array() - mu) * is;
  }
  MatX<S> v =
      (xhat.array().rowwise() * t.val(gain.idx).row(0).array()).matrix();
  v.rowwise() += t.val(bias.idx).row(0);
  const bool ng = t.needs(x.idx) || t.needs(gain.idx) || t.needs(bias.idx);
  const int xi = x.idx, gi = gain.idx, bi = bias.idx, oi = t.next_index();
  return t.push(
      std::move(v), ng,
      !ng ? std::function<void(Tape<S>&)>()
          : [xi, gi, bi, oi, xhat = std::move(xhat),
             inv_std = std::move(inv_std)](Tape<S>& tt) {
              const MatX<S>& g = tt.node(oi).grad;
              const auto gainrow = tt.val(gi).row(0);
              if (tt.needs(gi))
                tt.grad(gi) += (g.array() * xhat.array()).colwise().sum().matrix();
              if (tt.needs(bi)) tt.grad(bi) += g.colwise().sum();
              if (tt.needs(xi)) {
                MatX<S>& gx = tt.grad(xi);
                for (Eigen::Index r = 0; r < g.rows(); ++r) {
                  Eigen::Matrix<S, 1, Eigen::Dynamic> dxh =
                      g.row(r).array() * gainrow.array();
                  const S m1 = dxh.mean();
                  const S m2 = (dxh.array() * xhat.row(r).array()).mean();
                  gx.row(r).array() +=
                      (dxh.array() - m1 - xhat.row(r).array() * m2) * inv_std(r);
                }
              }
            });
}

// ---- reductions ----

// Mean over rows; `keep` (optional, length = rows) selects which rows count.
template <class S>
Var<S> mean_rows(Var<S> x, const VecX<S>* keep = nullptr) {
  Tape<S>& t = *x.tape;
  const MatX<S>& xv = t.val(x.idx);
  if (keep)
    CVQA_REQUIRE(keep->size() == xv.rows(), DimensionError,
                 "mean_rows mask length must equal row count");
  std::vector<Eigen::Index> kept;
  for (Eigen::Index r = 0; r < xv.rows(); ++r)
    if (!keep || (*keep)(r) > S(0)) kept.push_back(r);
  CVQA_REQUIRE(!kept.empty(), DimensionError, "mean_rows over no rows");
  MatX<S> v = MatX<S>::Zero(1, xv.cols());
  for (Eigen::Index r : kept) v.row(0) += xv.row(r);
  v /= S(kept.size());
  const bool ng = t.needs(x.idx);
  const int xi = x.idx, oi = t.next_index();
  return t.push(std::move(v), ng,
                !ng ? std::function<void(Tape<S>&)>()
                    : [xi, oi, kept = std::move(kept)](Tape<S>& tt) {
                        const MatX<S>& g = tt.node(oi).grad;
                        MatX<S>& gx = tt.grad(xi);
                        const S inv = S(1) / S(kept.size());
                        for (Eigen::Index r : kept) gx.row(r) += g.row(0) * inv;
                      });
}

template <class S>
Var<S> sum_all(Var<S> x) {
  Tape<S>& t = *x.tape;
  MatX<S> v(1, 1);
  v(0, 0) = t.val(x.idx).sum();
  const bool ng = t.needs(x.idx);
  const int xi = x.idx, oi = t.next_index();
  return t.push(std::move(v), ng, !ng ? std::function<void(Tape<S>&)>() : [xi, oi](Tape<S>& tt) {
    tt.grad(xi).array() += tt.node(oi).grad(0, 0);
  });
}

}  // namespace cvqa::ad
