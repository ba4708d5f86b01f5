#pragma once

// Fusion of the four reasoning streams and the answer heads. A small graph
// convolution mixes the stream-level question summaries over a fully
// connected graph, a squeeze-and-excite stage gates each stream, the gated
// summaries condition the visual summaries channel-wise, and task-specific
// heads turn the fused representation into answers and losses.

#include "cvqa/nn.hpp"
#include "cvqa/types.hpp"

#include <array>
#include <string>
#include <vector>

namespace cvqa::fusion {

// Graph convolution over a fully connected node set with self-loops. The
// normalized adjacency of such a graph is uniform, so propagation reduces to
// replacing every node by the node mean before each linear layer. GELU is
// applied between layers but not after the last; zero layers is the
// identity and registers no parameters.
template <class S>
struct SemanticGcn {
  std::vector<nn::Linear<S>> layers;

  static SemanticGcn create(nn::ParameterStore<S>& ps, const std::string& name,
                            Eigen::Index dim, int depth) {
    CVQA_REQUIRE(depth >= 0, ConfigError, "negative graph depth");
    SemanticGcn g;
    for (int i = 0; i < depth; ++i)
      g.layers.push_back(nn::Linear<S>::create(
          ps, name + ".l" + std::to_string(i), dim, dim, false));
    return g;
  }

  nn::Var<S> operator()(nn::Var<S> x) const {
    nn::Tape<S>& t = *x.tape;
    for (size_t i = 0; i < layers.size(); ++i) {
      const Eigen::Index n = x.rows();
      nn::Var<S> mix = t.constant(MatX<S>::Constant(n, n, S(1) / S(n)));
      x = layers[i](ad::matmul(mix, x));
      if (i + 1 < layers.size()) x = ad::gelu(x);
    }
    return x;
  }
};

template <class S>
struct FusedStreams {
  nn::Var<S> flat;                 // 1 x n_streams*dim
  std::vector<nn::Var<S>> rows;    // per-stream gated vectors, 1 x dim each
};

// Squeeze-and-excite gating of the stream summaries. Each stream owns its
// squeeze (n_streams*dim -> squeeze_dim) and excite (squeeze_dim -> dim)
// maps; the rectified excitation multiplies that stream's summary. Optional
// per-stream scalars rescale the excitation before rectification.
template <class S>
struct AdaptiveFusion {
  std::vector<nn::Linear<S>> squeeze;
  std::vector<nn::Linear<S>> excite;

  static AdaptiveFusion create(nn::ParameterStore<S>& ps,
                               const std::string& name, Eigen::Index dim,
                               Eigen::Index squeeze_dim, int n_streams = 4) {
    CVQA_REQUIRE(n_streams >= 1, ConfigError, "need at least one stream");
    AdaptiveFusion f;
    for (int k = 0; k < n_streams; ++k) {
      f.squeeze.push_back(nn::Linear<S>::create(
          ps, name + ".s" + std::to_string(k), n_streams * dim, squeeze_dim));
      f.excite.push_back(nn::Linear<S>::create(
          ps, name + ".e" + std::to_string(k), squeeze_dim, dim));
    }
    return f;
  }

  // nodes: n_streams x dim, one row per stream.
  FusedStreams<S> operator()(nn::Var<S> nodes,
                             const std::vector<double>* stream_weights =
                                 nullptr) const {
    const int n = static_cast<int>(squeeze.size());
    CVQA_REQUIRE(nodes.rows() == n, DimensionError,
                 "stream count does not match the gating stage");
    if (stream_weights)
      CVQA_REQUIRE(static_cast<int>(stream_weights->size()) == n,
                   DimensionError, "one weight per stream required");
    const Eigen::Index dim = nodes.cols();
    std::vector<nn::Var<S>> parts;
    for (int k = 0; k < n; ++k)
      parts.push_back(ad::block(nodes, k, 0, 1, dim));
    nn::Var<S> flat = ad::concat_cols(parts);
    FusedStreams<S> out;
    for (size_t k = 0; k < static_cast<size_t>(n); ++k) {
      nn::Var<S> e = excite[k](squeeze[k](flat));
      if (stream_weights)
        e = ad::scale(e, static_cast<S>((*stream_weights)[k]));
      out.rows.push_back(ad::hadamard(ad::relu(e), parts[k]));
    }
    out.flat = ad::concat_cols(out.rows);
    return out;
  }
};

// Channel-wise conditioning of one visual summary on its gated question
// summary: a joint representation of the visual vector and its interaction
// with the question drives a softmax gate over the channels.
template <class S>
struct VisualConditioner {
  nn::Linear<S> wf, wl;  // dim -> dim, no bias
  nn::Linear<S> wi;      // 2*dim -> dim
  nn::Linear<S> wg;      // dim -> dim

  static VisualConditioner create(nn::ParameterStore<S>& ps,
                                  const std::string& name, Eigen::Index dim) {
    VisualConditioner c;
    c.wf = nn::Linear<S>::create(ps, name + ".wf", dim, dim, false);
    c.wl = nn::Linear<S>::create(ps, name + ".wl", dim, dim, false);
    c.wi = nn::Linear<S>::create(ps, name + ".wi", 2 * dim, dim);
    c.wg = nn::Linear<S>::create(ps, name + ".wg", dim, dim);
    return c;
  }

  nn::Var<S> operator()(nn::Var<S> f_k, nn::Var<S> gated_l,
                        nn::ForwardTrace<S>* trace = nullptr,
                        const std::string& site = "") const {
    CVQA_REQUIRE(f_k.rows() == 1 && gated_l.rows() == 1 &&
                     f_k.cols() == gated_l.cols(),
                 DimensionError, "conditioning expects matching row vectors");
    nn::Var<S> vf = wf(f_k);
    nn::Var<S> vl = wl(gated_l);
    nn::Var<S> joint =
        ad::elu(wi(ad::concat_cols(vf, ad::hadamard(vf, vl))));
    nn::Var<S> gate = ad::softmax_rows(wg(joint));
    if (trace) trace->record(site, gate.value());
    return ad::hadamard(gate, f_k);
  }
};

// ---- answer heads ----

template <class S>
struct OpenEndedHead {
  nn::Linear<S> fc1, fc2;

  static OpenEndedHead create(nn::ParameterStore<S>& ps,
                              const std::string& name, Eigen::Index in,
                              Eigen::Index hidden, Eigen::Index n_answers) {
    CVQA_REQUIRE(n_answers >= 2, ConfigError, "need at least two answers");
    OpenEndedHead h;
    h.fc1 = nn::Linear<S>::create(ps, name + ".fc1", in, hidden);
    h.fc2 = nn::Linear<S>::create(ps, name + ".fc2", hidden, n_answers);
    return h;
  }

  nn::Var<S> probs(nn::Var<S> fused, nn::ForwardTrace<S>* trace = nullptr,
                   const std::string& site = "") const {
    nn::Var<S> p = ad::softmax_rows(fc2(ad::gelu(fc1(fused))));
    if (trace) trace->record(site, p.value());
    return p;
  }
};

template <class S>
struct ScalarHead {
  nn::Linear<S> fc;

  static ScalarHead create(nn::ParameterStore<S>& ps, const std::string& name,
                           Eigen::Index in) {
    ScalarHead h;
    h.fc = nn::Linear<S>::create(ps, name + ".fc", in, 1);
    return h;
  }

  nn::Var<S> operator()(nn::Var<S> fused) const { return fc(fused); }
};

// ---- losses ----

template <class S>
nn::Var<S> cross_entropy(nn::Var<S> probs, int label) {
  CVQA_REQUIRE(probs.rows() == 1, DimensionError,
               "cross entropy expects one probability row");
  CVQA_REQUIRE(label >= 0 && label < probs.cols(), ValidationError,
               "answer label out of range");
  return ad::scale(ad::log_clamped(ad::block(probs, 0, label, 1, 1)), S(-1));
}

// Sum over wrong candidates of max(0, margin + s_wrong - s_correct). The
// correct candidate's own term is the constant margin, so it is summed along
// with the rest and subtracted afterwards.
template <class S>
nn::Var<S> hinge_ranking(nn::Var<S> scores, int correct, S margin = S(1)) {
  CVQA_REQUIRE(scores.rows() == 1 && scores.cols() >= 2, DimensionError,
               "ranking needs one row of at least two scores");
  CVQA_REQUIRE(correct >= 0 && correct < scores.cols(), ValidationError,
               "correct candidate index out of range");
  nn::Var<S> sp = ad::broadcast_scalar(ad::block(scores, 0, correct, 1, 1), 1,
                                       scores.cols());
  nn::Var<S> terms = ad::relu(ad::add_scalar(ad::sub(scores, sp), margin));
  return ad::add_scalar(ad::sum_all(terms), -margin);
}

template <class S>
nn::Var<S> squared_error(nn::Var<S> pred, S target) {
  CVQA_REQUIRE(pred.rows() == 1 && pred.cols() == 1, DimensionError,
               "squared error expects a scalar prediction");
  nn::Var<S> e = ad::add_scalar(pred, -target);
  return ad::hadamard(e, e);
}

// Counting answers are integers in [1, 10]; regression output is rounded
// half-up and clamped into that range.
inline int clamp_count(double y) {
  const double r = round_half_up(y);
  return static_cast<int>(std::min(10.0, std::max(1.0, r)));
}

}  // namespace cvqa::fusion
