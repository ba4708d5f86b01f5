#pragma once

// Named gradient checks over every differentiable stage. Each component
// builds a small instance with its inputs registered as parameters, so the
// sweep covers parameter and input gradients alike; objectives are random
// weighted sums (or the losses themselves) evaluated in double precision
// against central differences.

#include "cvqa/fusion.hpp"
#include "cvqa/gradcheck.hpp"
#include "cvqa/intervention.hpp"
#include "cvqa/nn.hpp"
#include "cvqa/stt.hpp"
#include "cvqa/types.hpp"

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace cvqa::train {

struct GradCheckReport {
  std::string component;
  double tolerance = 1e-4;
  double max_rel_err = 0.0;
  int coords_checked = 0;
  bool passed = false;
};

namespace detail {

struct GradCase {
  nn::ParameterStore<double> ps;
  std::function<double(bool)> eval;
  double tolerance = 1e-4;

  explicit GradCase(std::uint64_t seed) : ps(seed) {}
};

inline Mat random_mat(Rng& rng, Eigen::Index r, Eigen::Index c) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = gaussian(rng);
  return m;
}

// Scalar objective spreading weight over every output entry.
inline ad::Var<double> weighted_sum(ad::Var<double> y, const Mat& w) {
  return ad::sum_all(ad::hadamard(y, y.tape->constant(w)));
}

inline std::unique_ptr<GradCase> case_linear(std::uint64_t seed) {
  auto c = std::make_unique<GradCase>(seed);
  c->tolerance = 1e-7;
  auto lin = nn::Linear<double>::create(c->ps, "lin", 16, 12);
  auto* x = &c->ps.normal("in.x", 3, 16, 1.0);
  Rng rng = named_stream(seed, "objective");
  Mat w = random_mat(rng, 3, 12);
  c->eval = [ps = &c->ps, lin, x, w](bool bw) {
    if (bw) ps->zero_grads();
    nn::Tape<double> t;
    auto obj = weighted_sum(lin(t.param(*x)), w);
    if (bw) t.backward(obj);
    return obj.value()(0, 0);
  };
  return c;
}

inline std::unique_ptr<GradCase> case_lgcam(std::uint64_t seed) {
  auto c = std::make_unique<GradCase>(seed);
  auto lg = intervention::Lgcam<double>::create(c->ps, "lg", 6);
  auto* fl = &c->ps.normal("in.f_l", 4, 6, 1.0);
  auto* fg = &c->ps.normal("in.f_g", 4, 6, 1.0);
  Rng rng = named_stream(seed, "objective");
  Mat w = random_mat(rng, 4, 6);
  c->eval = [ps = &c->ps, lg, fl, fg, w](bool bw) {
    if (bw) ps->zero_grads();
    nn::Tape<double> t;
    auto obj = weighted_sum(lg(t.param(*fl), t.param(*fg)), w);
    if (bw) t.backward(obj);
    return obj.value()(0, 0);
  };
  return c;
}

inline std::unique_ptr<GradCase> case_front_door(std::uint64_t seed) {
  auto c = std::make_unique<GradCase>(seed);
  intervention::FrontDoor<double> fd;
  fd.lgcam = intervention::Lgcam<double>::create(c->ps, "front", 6);
  fd.codebook = &c->ps.normal("front.codebook", 5, 6, 1.0);
  auto* fl = &c->ps.normal("in.f_l", 4, 6, 1.0);
  Rng rng = named_stream(seed, "objective");
  Mat w = random_mat(rng, 4, 12);
  c->eval = [ps = &c->ps, fd, fl, w, seed](bool bw) {
    if (bw) ps->zero_grads();
    nn::Tape<double> t;
    auto obj = weighted_sum(fd(t.param(*fl), mix_seed(seed, 0x5A)), w);
    if (bw) t.backward(obj);
    return obj.value()(0, 0);
  };
  return c;
}

inline std::unique_ptr<GradCase> case_mma(std::uint64_t seed) {
  auto c = std::make_unique<GradCase>(seed);
  auto mma = nn::MultiHeadAttention<double>::create(c->ps, "mma", 8, 2);
  auto* q = &c->ps.normal("in.q", 3, 8, 1.0);
  auto* ctx = &c->ps.normal("in.ctx", 4, 8, 1.0);
  Rng rng = named_stream(seed, "objective");
  Mat w = random_mat(rng, 3, 8);
  Vec keep(4);
  keep << 1, 1, 1, 0;
  c->eval = [ps = &c->ps, mma, q, ctx, w, keep](bool bw) {
    if (bw) ps->zero_grads();
    nn::Tape<double> t;
    auto obj = weighted_sum(mma(t.param(*q), t.param(*ctx), &keep), w);
    if (bw) t.backward(obj);
    return obj.value()(0, 0);
  };
  return c;
}

inline std::unique_ptr<GradCase> case_mtb_layer(std::uint64_t seed) {
  auto c = std::make_unique<GradCase>(seed);
  auto layer = nn::TransformerLayer<double>::create(c->ps, "mtb", 8, 2);
  auto* x = &c->ps.normal("in.x", 3, 8, 1.0);
  auto* ctx = &c->ps.normal("in.ctx", 4, 8, 1.0);
  Rng rng = named_stream(seed, "objective");
  Mat w = random_mat(rng, 3, 8);
  Vec keep(4);
  keep << 1, 1, 1, 0;
  c->eval = [ps = &c->ps, layer, x, ctx, w, keep](bool bw) {
    if (bw) ps->zero_grads();
    nn::Tape<double> t;
    nn::DropoutCtx<double> drop;
    auto obj =
        weighted_sum(layer(t.param(*x), t.param(*ctx), &keep, drop), w);
    if (bw) t.backward(obj);
    return obj.value()(0, 0);
  };
  return c;
}

inline std::unique_ptr<GradCase> case_stt_forward(std::uint64_t seed) {
  auto c = std::make_unique<GradCase>(seed);
  auto s = stt::SpatialTemporalTransformer<double>::create(c->ps, "stt", 8, 2,
                                                           1, 4, 2, 1, true);
  auto* fa = &c->ps.normal("in.f_app", 4, 16, 1.0);
  auto* fm = &c->ps.normal("in.f_mot", 2, 16, 1.0);
  auto* qs = &c->ps.normal("in.q_seq", 5, 8, 1.0);
  Rng rng = named_stream(seed, "objective");
  Mat wv = random_mat(rng, 1, 16);
  Mat wl = random_mat(rng, 1, 16);
  Vec keep(5);
  keep << 1, 1, 1, 1, 0;
  c->eval = [ps = &c->ps, s, fa, fm, qs, wv, wl, keep](bool bw) {
    if (bw) ps->zero_grads();
    nn::Tape<double> t;
    nn::DropoutCtx<double> drop;
    auto out = s(0, t.param(*fa), t.param(*fm), t.param(*qs), keep, drop);
    auto obj = ad::add(weighted_sum(out.visual, wv),
                       weighted_sum(out.linguistic, wl));
    if (bw) t.backward(obj);
    return obj.value()(0, 0);
  };
  return c;
}

inline std::unique_ptr<GradCase> case_semantic_gcn(std::uint64_t seed) {
  auto c = std::make_unique<GradCase>(seed);
  auto g = fusion::SemanticGcn<double>::create(c->ps, "graph", 16, 2);
  auto* x = &c->ps.normal("in.x", 4, 16, 1.0);
  Rng rng = named_stream(seed, "objective");
  Mat w = random_mat(rng, 4, 16);
  c->eval = [ps = &c->ps, g, x, w](bool bw) {
    if (bw) ps->zero_grads();
    nn::Tape<double> t;
    auto obj = weighted_sum(g(t.param(*x)), w);
    if (bw) t.backward(obj);
    return obj.value()(0, 0);
  };
  return c;
}

inline std::unique_ptr<GradCase> case_adaptive_fusion(std::uint64_t seed) {
  auto c = std::make_unique<GradCase>(seed);
  auto g = fusion::AdaptiveFusion<double>::create(c->ps, "gates", 12, 6, 4);
  auto* x = &c->ps.normal("in.x", 4, 12, 1.0);
  Rng rng = named_stream(seed, "objective");
  Mat w = random_mat(rng, 1, 48);
  c->eval = [ps = &c->ps, g, x, w](bool bw) {
    if (bw) ps->zero_grads();
    nn::Tape<double> t;
    auto obj = weighted_sum(g(t.param(*x)).flat, w);
    if (bw) t.backward(obj);
    return obj.value()(0, 0);
  };
  return c;
}

inline std::unique_ptr<GradCase> case_condition_visual(std::uint64_t seed) {
  auto c = std::make_unique<GradCase>(seed);
  auto v = fusion::VisualConditioner<double>::create(c->ps, "cond", 8);
  auto* fk = &c->ps.normal("in.f_k", 1, 8, 1.0);
  auto* gl = &c->ps.normal("in.gated_l", 1, 8, 1.0);
  Rng rng = named_stream(seed, "objective");
  Mat w = random_mat(rng, 1, 8);
  c->eval = [ps = &c->ps, v, fk, gl, w](bool bw) {
    if (bw) ps->zero_grads();
    nn::Tape<double> t;
    auto obj = weighted_sum(v(t.param(*fk), t.param(*gl)), w);
    if (bw) t.backward(obj);
    return obj.value()(0, 0);
  };
  return c;
}

inline std::unique_ptr<GradCase> case_loss_open_ended(std::uint64_t seed) {
  auto c = std::make_unique<GradCase>(seed);
  auto head = fusion::OpenEndedHead<double>::create(c->ps, "head", 12, 10, 6);
  auto* x = &c->ps.normal("in.x", 1, 12, 1.0);
  c->eval = [ps = &c->ps, head, x](bool bw) {
    if (bw) ps->zero_grads();
    nn::Tape<double> t;
    auto loss = fusion::cross_entropy(head.probs(t.param(*x)), 2);
    if (bw) t.backward(loss);
    return loss.value()(0, 0);
  };
  return c;
}

inline std::unique_ptr<GradCase> case_loss_multi_choice(std::uint64_t seed) {
  auto c = std::make_unique<GradCase>(seed);
  auto head = fusion::ScalarHead<double>::create(c->ps, "head", 64);
  auto* x = &c->ps.normal("in.x", 3, 64, 1.0);
  c->eval = [ps = &c->ps, head, x](bool bw) {
    if (bw) ps->zero_grads();
    nn::Tape<double> t;
    auto scores = ad::transpose(head(t.param(*x)));
    auto loss = fusion::hinge_ranking(scores, 1);
    if (bw) t.backward(loss);
    return loss.value()(0, 0);
  };
  return c;
}

inline std::unique_ptr<GradCase> case_loss_count(std::uint64_t seed) {
  auto c = std::make_unique<GradCase>(seed);
  auto head = fusion::ScalarHead<double>::create(c->ps, "head", 110);
  auto* x = &c->ps.normal("in.x", 1, 110, 1.0);
  c->eval = [ps = &c->ps, head, x](bool bw) {
    if (bw) ps->zero_grads();
    nn::Tape<double> t;
    auto loss = fusion::squared_error(head(t.param(*x)), 4.0);
    if (bw) t.backward(loss);
    return loss.value()(0, 0);
  };
  return c;
}

using CaseBuilder = std::unique_ptr<GradCase> (*)(std::uint64_t);

inline const std::map<std::string, CaseBuilder>& grad_case_registry() {
  static const std::map<std::string, CaseBuilder> reg = {
      {"linear", case_linear},
      {"lgcam", case_lgcam},
      {"front_door_features", case_front_door},
      {"mma", case_mma},
      {"mtb_layer", case_mtb_layer},
      {"stt_forward", case_stt_forward},
      {"semantic_gcn", case_semantic_gcn},
      {"adaptive_fusion", case_adaptive_fusion},
      {"condition_visual", case_condition_visual},
      {"loss_open_ended", case_loss_open_ended},
      {"loss_multi_choice", case_loss_multi_choice},
      {"loss_count", case_loss_count},
  };
  return reg;
}

}  // namespace detail

inline std::vector<std::string> grad_check_components() {
  std::vector<std::string> names;
  for (const auto& [name, _] : detail::grad_case_registry())
    names.push_back(name);
  return names;
}

inline GradCheckReport grad_check(const std::string& component,
                                  std::uint64_t seed) {
  const auto& reg = detail::grad_case_registry();
  const auto it = reg.find(component);
  CVQA_REQUIRE(it != reg.end(), ValidationError,
               "unknown gradient-check component: " + component);
  const auto c = it->second(seed);
  Rng rng = named_stream(seed, "gradcheck.coords");
  int per_param = 0;  // all coordinates
  if (c->ps.total_size() > 600)
    per_param = 200 / static_cast<int>(c->ps.all().size()) + 8;
  const auto stat = check_params_fd(c->eval, c->ps.all(), 1e-5, &rng, per_param);
  GradCheckReport r;
  r.component = component;
  r.tolerance = c->tolerance;
  r.max_rel_err = stat.max_rel_err;
  r.coords_checked = stat.coords_checked;
  r.passed = stat.max_rel_err <= c->tolerance;
  return r;
}

inline std::vector<GradCheckReport> run_grad_suite(std::uint64_t seed) {
  std::vector<GradCheckReport> out;
  for (const auto& name : grad_check_components())
    out.push_back(grad_check(name, seed));
  return out;
}

}  // namespace cvqa::train
