#pragma once

// Spatial-temporal reasoning over the two visual streams. Appearance and
// motion tokens are tagged with learned positional embeddings at their
// incoming width, projected to the model width, then refined against the
// question through four stacks of multimodal transformer blocks: question
// against appearance, question against motion, and each visual stream
// against its refined question sequence. Masked mean pooling produces one
// visual and one linguistic summary vector per modality pair.

#include "cvqa/nn.hpp"
#include "cvqa/types.hpp"

#include <string>
#include <vector>

namespace cvqa::stt {

template <class S>
struct MtbStack {
  std::vector<nn::TransformerLayer<S>> layers;

  static MtbStack create(nn::ParameterStore<S>& ps, const std::string& name,
                         Eigen::Index d, int heads, int depth) {
    CVQA_REQUIRE(depth >= 1, ConfigError, "stack depth must be positive");
    MtbStack s;
    for (int i = 0; i < depth; ++i)
      s.layers.push_back(nn::TransformerLayer<S>::create(
          ps, name + ".l" + std::to_string(i), d, heads));
    return s;
  }

  nn::Var<S> operator()(nn::Var<S> x, nn::Var<S> ctx, const VecX<S>* ctx_keep,
                        const nn::DropoutCtx<S>& drop,
                        nn::ForwardTrace<S>* trace = nullptr,
                        const std::string& site = "") const {
    for (size_t i = 0; i < layers.size(); ++i)
      x = layers[i](x, ctx, ctx_keep, drop, trace,
                    site + ".l" + std::to_string(i));
    return x;
  }
};

// The four cross-modal stacks used by one reasoning pass.
template <class S>
struct SttStacks {
  MtbStack<S> question_app, question_mot, app_sem, mot_sem;

  static SttStacks create(nn::ParameterStore<S>& ps, const std::string& name,
                          Eigen::Index d, int heads, int depth) {
    SttStacks s;
    s.question_app = MtbStack<S>::create(ps, name + ".qa", d, heads, depth);
    s.question_mot = MtbStack<S>::create(ps, name + ".qm", d, heads, depth);
    s.app_sem = MtbStack<S>::create(ps, name + ".as", d, heads, depth);
    s.mot_sem = MtbStack<S>::create(ps, name + ".ms", d, heads, depth);
    return s;
  }
};

template <class S>
struct SttOutput {
  nn::Var<S> visual;      // 1 x 2d: [appearance ; motion]
  nn::Var<S> linguistic;  // 1 x 2d
};

template <class S>
struct SpatialTemporalTransformer {
  nn::Parameter<S>* pos_app = nullptr;  // n_app x 2d
  nn::Parameter<S>* pos_mot = nullptr;  // n_mot x 2d
  nn::Linear<S> entry_app;              // 2d -> d
  nn::Linear<S> entry_mot;              // 2d -> d
  std::vector<SttStacks<S>> stacks;     // one shared, or one per stream

  static SpatialTemporalTransformer create(nn::ParameterStore<S>& ps,
                                           const std::string& name,
                                           Eigen::Index d, int heads, int depth,
                                           Eigen::Index n_app,
                                           Eigen::Index n_mot, int n_streams,
                                           bool share_streams) {
    CVQA_REQUIRE(n_streams >= 1, ConfigError, "need at least one stream");
    SpatialTemporalTransformer s;
    s.pos_app = &ps.normal(name + ".pos_app", n_app, 2 * d, S(0.02));
    s.pos_mot = &ps.normal(name + ".pos_mot", n_mot, 2 * d, S(0.02));
    s.entry_app = nn::Linear<S>::create(ps, name + ".entry_app", 2 * d, d);
    s.entry_mot = nn::Linear<S>::create(ps, name + ".entry_mot", 2 * d, d);
    const int n_stacks = share_streams ? 1 : n_streams;
    for (int i = 0; i < n_stacks; ++i)
      s.stacks.push_back(SttStacks<S>::create(
          ps, share_streams ? name + ".shared" : name + ".s" + std::to_string(i),
          d, heads, depth));
    return s;
  }

  const SttStacks<S>& stack_for(int stream) const {
    if (stacks.size() == 1) return stacks[0];
    CVQA_REQUIRE(stream >= 0 && stream < static_cast<int>(stacks.size()),
                 ConfigError, "stream index out of range");
    return stacks[static_cast<size_t>(stream)];
  }

  // f_app: n_app x 2d, f_mot: n_mot x 2d, q_seq: len x d with keep mask.
  SttOutput<S> operator()(int stream, nn::Var<S> f_app, nn::Var<S> f_mot,
                          nn::Var<S> q_seq, const VecX<S>& q_keep,
                          const nn::DropoutCtx<S>& drop,
                          nn::ForwardTrace<S>* trace = nullptr,
                          const std::string& site = "") const {
    nn::Tape<S>& t = *f_app.tape;
    CVQA_REQUIRE(f_app.rows() == pos_app->value.rows() &&
                     f_app.cols() == pos_app->value.cols(),
                 DimensionError, "appearance tokens do not match the grid");
    CVQA_REQUIRE(f_mot.rows() == pos_mot->value.rows() &&
                     f_mot.cols() == pos_mot->value.cols(),
                 DimensionError, "motion tokens do not match the grid");
    CVQA_REQUIRE(q_keep.size() == q_seq.rows(), DimensionError,
                 "question mask length must equal token count");
    nn::Var<S> a0 = entry_app(ad::add(f_app, t.param(*pos_app)));
    nn::Var<S> m0 = entry_mot(ad::add(f_mot, t.param(*pos_mot)));
    const auto& st = stack_for(stream);
    nn::Var<S> la_seq =
        st.question_app(q_seq, a0, nullptr, drop, trace, site + ".qa");
    nn::Var<S> lm_seq =
        st.question_mot(q_seq, m0, nullptr, drop, trace, site + ".qm");
    nn::Var<S> fa_seq =
        st.app_sem(a0, la_seq, &q_keep, drop, trace, site + ".as");
    nn::Var<S> fm_seq =
        st.mot_sem(m0, lm_seq, &q_keep, drop, trace, site + ".ms");
    SttOutput<S> out;
    out.visual = ad::concat_cols(ad::mean_rows(fa_seq), ad::mean_rows(fm_seq));
    out.linguistic = ad::concat_cols(ad::mean_rows(la_seq, &q_keep),
                                     ad::mean_rows(lm_seq, &q_keep));
    return out;
  }
};

}  // namespace cvqa::stt
