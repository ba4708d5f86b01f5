#pragma once

// Trainable building blocks on top of the tape: a parameter registry with
// name-keyed deterministic init, linear / layer-norm / feed-forward wrappers,
// multi-head cross-attention and the transformer block built from it.

#include "cvqa/autodiff.hpp"
#include "cvqa/types.hpp"

#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace cvqa::nn {

using ad::Parameter;
using ad::Tape;
using ad::Var;

// Lightweight forward probe. Modules append every probability matrix they
// produce (rows normalized; column-softmax sites store the transpose) along
// with the keep-mask that applied, so tests can audit normalization and
// masking without reimplementing the modules.
template <class S>
struct ForwardTrace {
  struct SoftmaxRecord {
    std::string site;
    MatX<S> probs;
    VecX<S> keep;  // empty when every position was kept
  };
  std::vector<SoftmaxRecord> softmaxes;

  void record(const std::string& site, const MatX<S>& p) {
    softmaxes.push_back({site, p, VecX<S>()});
  }
  void record(const std::string& site, const MatX<S>& p, const VecX<S>& k) {
    softmaxes.push_back({site, p, k});
  }
};

template <class S>
struct DropoutCtx {
  bool active = false;
  S rate = S(0);
  Rng* rng = nullptr;
};

template <class S>
Var<S> dropout(Var<S> x, const DropoutCtx<S>& ctx) {
  if (!ctx.active || ctx.rate <= S(0)) return x;
  Tape<S>& t = *x.tape;
  MatX<S> mask(x.rows(), x.cols());
  const S keep_scale = S(1) / (S(1) - ctx.rate);
  for (Eigen::Index i = 0; i < mask.size(); ++i)
    mask.data()[i] =
        uniform_real(*ctx.rng) < static_cast<double>(ctx.rate) ? S(0) : keep_scale;
  return ad::hadamard(x, t.constant(std::move(mask)));
}

// Registry owning all Parameters. Addresses are stable (unique_ptr storage),
// names are unique, and initial values depend only on (name, init_seed), so
// disabling one module never shifts another module's initialization.
template <class S>
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t init_seed = 0) : init_seed_(init_seed) {}

  Parameter<S>& zeros(const std::string& name, Eigen::Index r, Eigen::Index c) {
    return emplace(name, MatX<S>::Zero(r, c));
  }
  Parameter<S>& ones(const std::string& name, Eigen::Index r, Eigen::Index c) {
    return emplace(name, MatX<S>::Ones(r, c));
  }
  // Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
  Parameter<S>& xavier(const std::string& name, Eigen::Index r, Eigen::Index c) {
    Rng rng = named_stream(init_seed_, name);
    const double a = std::sqrt(6.0 / static_cast<double>(r + c));
    MatX<S> v(r, c);
    for (Eigen::Index i = 0; i < v.size(); ++i)
      v.data()[i] = static_cast<S>((2.0 * uniform_real(rng) - 1.0) * a);
    return emplace(name, std::move(v));
  }
  Parameter<S>& normal(const std::string& name, Eigen::Index r, Eigen::Index c,
                       double stddev) {
    Rng rng = named_stream(init_seed_, name);
    MatX<S> v(r, c);
    for (Eigen::Index i = 0; i < v.size(); ++i)
      v.data()[i] = static_cast<S>(gaussian(rng) * stddev);
    return emplace(name, std::move(v));
  }
  // Registers externally computed values (e.g. cluster centroids).
  Parameter<S>& from_values(const std::string& name, MatX<S> v) {
    return emplace(name, std::move(v));
  }

  Parameter<S>* find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
  }
  const std::vector<Parameter<S>*>& all() const { return order_; }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto* p : order_) n += static_cast<std::size_t>(p->size());
    return n;
  }
  void zero_grads() {
    for (auto* p : order_) p->zero_grad();
  }
  std::uint64_t init_seed() const { return init_seed_; }

 private:
  Parameter<S>& emplace(const std::string& name, MatX<S> v) {
    CVQA_REQUIRE(by_name_.find(name) == by_name_.end(), ConfigError,
                 "duplicate parameter name: " + name);
    params_.push_back(std::make_unique<Parameter<S>>(name, std::move(v)));
    Parameter<S>* p = params_.back().get();
    by_name_[name] = p;
    order_.push_back(p);
    return *p;
  }

  std::uint64_t init_seed_;
  std::vector<std::unique_ptr<Parameter<S>>> params_;
  std::map<std::string, Parameter<S>*> by_name_;
  std::vector<Parameter<S>*> order_;
};

template <class S>
struct Linear {
  Parameter<S>* w = nullptr;
  Parameter<S>* b = nullptr;  // null means no bias

  static Linear create(ParameterStore<S>& ps, const std::string& name,
                       Eigen::Index in, Eigen::Index out, bool bias = true) {
    Linear l;
    l.w = &ps.xavier(name + ".w", in, out);
    if (bias) l.b = &ps.zeros(name + ".b", 1, out);
    return l;
  }
  Var<S> operator()(Var<S> x) const {
    Tape<S>& t = *x.tape;
    Var<S> y = ad::matmul(x, t.param(*w));
    return b ? ad::add_rowwise(y, t.param(*b)) : y;
  }
};

template <class S>
struct LayerNorm {
  Parameter<S>* gain = nullptr;
  Parameter<S>* bias = nullptr;

  static LayerNorm create(ParameterStore<S>& ps, const std::string& name,
                          Eigen::Index d) {
    LayerNorm ln;
    ln.gain = &ps.ones(name + ".g", 1, d);
    ln.bias = &ps.zeros(name + ".b", 1, d);
    return ln;
  }
  Var<S> operator()(Var<S> x) const {
    Tape<S>& t = *x.tape;
    return ad::layer_norm(x, t.param(*gain), t.param(*bias));
  }
};

// Two linear maps with a GELU between them.
template <class S>
struct FeedForward {
  Linear<S> fc1, fc2;

  static FeedForward create(ParameterStore<S>& ps, const std::string& name,
                            Eigen::Index d, Eigen::Index hidden) {
    FeedForward f;
    f.fc1 = Linear<S>::create(ps, name + ".fc1", d, hidden);
    f.fc2 = Linear<S>::create(ps, name + ".fc2", hidden, d);
    return f;
  }
  Var<S> operator()(Var<S> x) const { return fc2(ad::gelu(fc1(x))); }
};

// Multi-head cross-attention. Queries and context are layer-normalized with
// separate learned norms, per-head projections map d -> d/heads, scores are
// scaled by 1/sqrt(d), and masked context positions get exactly zero weight.
template <class S>
struct MultiHeadAttention {
  int heads = 1;
  Eigen::Index d = 0;
  LayerNorm<S> ln_q, ln_c;
  std::vector<Linear<S>> wq, wk, wv;
  Linear<S> wo;
  bool use_layer_norm = true;  // test hook for value-level oracles

  static MultiHeadAttention create(ParameterStore<S>& ps,
                                   const std::string& name, Eigen::Index d,
                                   int heads) {
    CVQA_REQUIRE(heads >= 1 && d % heads == 0, ConfigError,
                 "attention width must be divisible by head count");
    MultiHeadAttention a;
    a.heads = heads;
    a.d = d;
    a.ln_q = LayerNorm<S>::create(ps, name + ".ln_q", d);
    a.ln_c = LayerNorm<S>::create(ps, name + ".ln_c", d);
    const Eigen::Index dh = d / heads;
    for (int h = 0; h < heads; ++h) {
      const std::string hs = name + ".h" + std::to_string(h);
      a.wq.push_back(Linear<S>::create(ps, hs + ".q", d, dh, false));
      a.wk.push_back(Linear<S>::create(ps, hs + ".k", d, dh, false));
      a.wv.push_back(Linear<S>::create(ps, hs + ".v", d, dh, false));
    }
    a.wo = Linear<S>::create(ps, name + ".o", d, d, false);
    return a;
  }

  Var<S> normed_query(Var<S> x) const { return use_layer_norm ? ln_q(x) : x; }

  // qn is the already-normalized query sequence.
  Var<S> attend(Var<S> qn, Var<S> ctx, const VecX<S>* ctx_keep,
                ForwardTrace<S>* trace = nullptr,
                const std::string& site = "") const {
    Var<S> cn = use_layer_norm ? ln_c(ctx) : ctx;
    const S inv_sqrt_d = S(1) / std::sqrt(static_cast<S>(d));
    std::vector<Var<S>> outs;
    outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      Var<S> q = wq[static_cast<size_t>(h)](qn);
      Var<S> k = wk[static_cast<size_t>(h)](cn);
      Var<S> v = wv[static_cast<size_t>(h)](cn);
      Var<S> scores = ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt_d);
      Var<S> probs = ad::softmax_rows(scores, ctx_keep);
      if (trace) {
        if (ctx_keep)
          trace->record(site + ".h" + std::to_string(h), probs.value(), *ctx_keep);
        else
          trace->record(site + ".h" + std::to_string(h), probs.value());
      }
      outs.push_back(ad::matmul(probs, v));
    }
    Var<S> cat = heads == 1 ? outs[0] : ad::concat_cols(outs);
    return wo(cat);
  }

  Var<S> operator()(Var<S> q_in, Var<S> ctx, const VecX<S>* ctx_keep,
                    ForwardTrace<S>* trace = nullptr,
                    const std::string& site = "") const {
    return attend(normed_query(q_in), ctx, ctx_keep, trace, site);
  }
};

// Transformer block: pre-normed residual attention followed by a gated
// position-wise refinement,
//   U = LN(x) + Drop(MMA(x, ctx)),  y = U + Drop(FF(LN(U))).
template <class S>
struct TransformerLayer {
  MultiHeadAttention<S> attn;
  LayerNorm<S> ln_ff;
  FeedForward<S> ff;
  bool bypass_attention = false;  // test hooks
  bool bypass_ff = false;

  static TransformerLayer create(ParameterStore<S>& ps, const std::string& name,
                                 Eigen::Index d, int heads) {
    TransformerLayer l;
    l.attn = MultiHeadAttention<S>::create(ps, name + ".attn", d, heads);
    l.ln_ff = LayerNorm<S>::create(ps, name + ".ln_ff", d);
    l.ff = FeedForward<S>::create(ps, name + ".ff", d, d);
    return l;
  }

  Var<S> operator()(Var<S> x, Var<S> ctx, const VecX<S>* ctx_keep,
                    const DropoutCtx<S>& drop,
                    ForwardTrace<S>* trace = nullptr,
                    const std::string& site = "") const {
    Var<S> xn = attn.normed_query(x);
    Var<S> u = xn;
    if (!bypass_attention)
      u = ad::add(xn, dropout(attn.attend(xn, ctx, ctx_keep, trace, site), drop));
    if (bypass_ff) return u;
    return ad::add(u, dropout(ff(ln_ff(u)), drop));
  }
};

}  // namespace cvqa::nn
