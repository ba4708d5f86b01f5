#pragma once

// Causal-intervention machinery. Question side: a confounder vocabulary of
// role-phrase priors (the deconfounding itself is realized structurally by
// the four-stream fusion, with an optional prior-entropy weighting mode).
// Visual side: a clustered global dictionary plus local-global causal
// attention, producing the front-door feature F_C = [F_LG, F_LL].

#include "cvqa/linguistic.hpp"
#include "cvqa/nn.hpp"
#include "cvqa/types.hpp"

#include <json.hpp>

#include <array>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace cvqa::intervention {

// ---- linguistic back-door: confounder vocabulary ----

struct PhraseStat {
  std::string phrase;
  int count = 0;
  double prior = 0.0;
};

struct ConfounderVocabulary {
  // set order: whole-question, subject, action, object
  std::array<std::vector<PhraseStat>, 4> sets;

  static const std::array<std::string, 4>& set_names() {
    static const std::array<std::string, 4> names = {"question", "subject",
                                                     "action", "object"};
    return names;
  }

  // Normalized entropy of a set's prior mass: 1 for degenerate sets, 1 for
  // uniform priors, lower for peaked priors. Used by the prior-weighted
  // fusion mode.
  double entropy_weight(size_t k) const {
    const auto& set = sets.at(k);
    if (set.size() <= 1) return 1.0;
    double h = 0.0;
    for (const auto& p : set)
      if (p.prior > 0.0) h -= p.prior * std::log(p.prior);
    return h / std::log(static_cast<double>(set.size()));
  }
};

inline ConfounderVocabulary build_confounder_vocabulary(
    const std::vector<lang::QuestionBundle>& corpus) {
  CVQA_REQUIRE(!corpus.empty(), ValidationError,
               "confounder vocabulary needs a non-empty corpus");
  std::array<std::map<std::string, int>, 4> counts;
  auto norm = [](const std::string& s) {
    const auto words = lang::split_words(s);
    std::string out;
    for (const auto& w : words) {
      if (!out.empty()) out.push_back(' ');
      out += w;
    }
    return out;
  };
  for (const auto& b : corpus) {
    counts[0][norm(b.question)] += 1;
    counts[1][norm(b.roles.subject)] += 1;
    counts[2][norm(b.roles.action)] += 1;
    counts[3][norm(b.roles.object)] += 1;
  }
  ConfounderVocabulary v;
  for (size_t k = 0; k < 4; ++k) {
    int total = 0;
    for (const auto& [phrase, c] : counts[k]) total += c;
    for (const auto& [phrase, c] : counts[k])
      v.sets[k].push_back({phrase, c, static_cast<double>(c) / total});
  }
  return v;
}

inline void save_vocabulary(const ConfounderVocabulary& v, const std::string& path) {
  nlohmann::json j;
  j["format"] = "cvqa.vocab";
  j["version"] = 1;
  for (size_t k = 0; k < 4; ++k) {
    nlohmann::json set = nlohmann::json::array();
    for (const auto& p : v.sets[k])
      set.push_back({{"phrase", p.phrase}, {"count", p.count}, {"prior", p.prior}});
    j["sets"][ConfounderVocabulary::set_names()[k]] = std::move(set);
  }
  std::ofstream os(path);
  CVQA_REQUIRE(os.good(), IoError, "cannot open for write: " + path);
  os << j.dump(2) << "\n";
}

inline ConfounderVocabulary load_vocabulary(const std::string& path) {
  std::ifstream is(path);
  CVQA_REQUIRE(is.good(), IoError, "cannot open vocabulary: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("vocabulary is not valid JSON: " + std::string(e.what()));
  }
  CVQA_REQUIRE(j.value("format", "") == "cvqa.vocab", FormatError,
               "not a vocabulary file: " + path);
  ConfounderVocabulary v;
  for (size_t k = 0; k < 4; ++k) {
    double mass = 0.0;
    for (const auto& je : j.at("sets").at(ConfounderVocabulary::set_names()[k])) {
      PhraseStat p;
      p.phrase = je.at("phrase").get<std::string>();
      p.count = je.at("count").get<int>();
      p.prior = je.at("prior").get<double>();
      CVQA_REQUIRE(p.count > 0, ValidationError, "non-positive phrase count");
      mass += p.prior;
      v.sets[k].push_back(std::move(p));
    }
    CVQA_REQUIRE(std::abs(mass - 1.0) < 1e-9, ValidationError,
                 "priors of set '" + ConfounderVocabulary::set_names()[k] +
                     "' do not sum to 1");
  }
  return v;
}

// ---- visual front-door: codebook ----

struct KmeansResult {
  Mat centroids;            // k x d
  std::vector<int> assign;  // per point
  double sse = 0.0;
  std::vector<double> sse_history;  // per Lloyd iteration of the winning run
};

namespace detail {

inline double point_sse(const Mat& pts, const Mat& centroids,
                        std::vector<int>* assign) {
  double sse = 0.0;
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    int bj = 0;
    for (Eigen::Index j = 0; j < centroids.rows(); ++j) {
      const double d2 = (pts.row(i) - centroids.row(j)).squaredNorm();
      if (d2 < best) {
        best = d2;
        bj = static_cast<int>(j);
      }
    }
    sse += best;
    if (assign) (*assign)[static_cast<size_t>(i)] = bj;
  }
  return sse;
}

inline Mat kmeanspp_init(const Mat& pts, int k, Rng& rng) {
  const Eigen::Index m = pts.rows();
  Mat centroids(k, pts.cols());
  centroids.row(0) = pts.row(static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(m))));
  Vec d2 = Vec::Constant(m, std::numeric_limits<double>::infinity());
  for (int c = 1; c < k; ++c) {
    for (Eigen::Index i = 0; i < m; ++i)
      d2(i) = std::min(d2(i), (pts.row(i) - centroids.row(c - 1)).squaredNorm());
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total <= 0.0) {
      pick = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(m)));
    } else {
      double r = uniform_real(rng) * total;
      for (Eigen::Index i = 0; i < m; ++i) {
        r -= d2(i);
        if (r <= 0.0) {
          pick = i;
          break;
        }
        pick = i;
      }
    }
    centroids.row(c) = pts.row(pick);
  }
  return centroids;
}

}  // namespace detail

// Lloyd's algorithm with k-means++ seeding and several deterministic
// restarts; the restart with the lowest SSE wins. Tiny instances get extra
// restarts, which in practice reaches the global optimum there. Empty
// clusters are re-seeded with the point farthest from its current centroid.
inline KmeansResult kmeans(const Mat& pts, int k, std::uint64_t seed,
                           int n_init = 0, int max_iters = 100,
                           double tol = 1e-4) {
  const Eigen::Index m = pts.rows();
  CVQA_REQUIRE(k >= 1, ValidationError, "cluster count must be positive");
  CVQA_REQUIRE(m >= k, ValidationError,
               "cannot build " + std::to_string(k) + " clusters from " +
                   std::to_string(m) + " points");
  if (n_init <= 0) n_init = m <= 32 ? 32 : 8;
  KmeansResult best;
  best.sse = std::numeric_limits<double>::infinity();
  for (int run = 0; run < n_init; ++run) {
    Rng rng = named_stream(seed, "kmeans.run" + std::to_string(run));
    Mat centroids = detail::kmeanspp_init(pts, k, rng);
    std::vector<int> assign(static_cast<size_t>(m), 0);
    std::vector<double> history;
    for (int it = 0; it < max_iters; ++it) {
      history.push_back(detail::point_sse(pts, centroids, &assign));
      Mat next = Mat::Zero(k, pts.cols());
      std::vector<int> sizes(static_cast<size_t>(k), 0);
      for (Eigen::Index i = 0; i < m; ++i) {
        next.row(assign[static_cast<size_t>(i)]) += pts.row(i);
        sizes[static_cast<size_t>(assign[static_cast<size_t>(i)])] += 1;
      }
      for (int j = 0; j < k; ++j) {
        if (sizes[static_cast<size_t>(j)] > 0) {
          next.row(j) /= sizes[static_cast<size_t>(j)];
        } else {
          // farthest point from its own centroid
          Eigen::Index far = 0;
          double fd = -1.0;
          for (Eigen::Index i = 0; i < m; ++i) {
            const double d2 =
                (pts.row(i) - centroids.row(assign[static_cast<size_t>(i)])).squaredNorm();
            if (d2 > fd) {
              fd = d2;
              far = i;
            }
          }
          next.row(j) = pts.row(far);
        }
      }
      const double shift = (next - centroids).rowwise().norm().maxCoeff();
      centroids = next;
      if (shift < tol) break;
    }
    std::vector<int> final_assign(static_cast<size_t>(m), 0);
    const double sse = detail::point_sse(pts, centroids, &final_assign);
    history.push_back(sse);
    if (sse < best.sse) {
      best.centroids = centroids;
      best.assign = final_assign;
      best.sse = sse;
      best.sse_history = history;
    }
  }
  return best;
}

// Uniform-with-replacement centroid row indices, deterministic given seed.
inline std::vector<int> sample_global_indices(int k, int n, std::uint64_t seed) {
  CVQA_REQUIRE(k >= 1, ValidationError, "cannot sample from an empty codebook");
  Rng rng = named_stream(seed, "sample_global");
  std::vector<int> idx(static_cast<size_t>(n));
  for (auto& i : idx) i = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(k)));
  return idx;
}

// ---- LGCAM ----

template <class S>
struct Lgcam {
  nn::Linear<S> wq, wk, wv;  // d -> d, no bias
  nn::Linear<S> wh;          // 2d -> d
  nn::Linear<S> wh2;         // d -> d

  static Lgcam create(nn::ParameterStore<S>& ps, const std::string& name,
                      Eigen::Index d) {
    Lgcam l;
    l.wq = nn::Linear<S>::create(ps, name + ".wq", d, d, false);
    l.wk = nn::Linear<S>::create(ps, name + ".wk", d, d, false);
    l.wv = nn::Linear<S>::create(ps, name + ".wv", d, d, false);
    l.wh = nn::Linear<S>::create(ps, name + ".wh", 2 * d, d);
    l.wh2 = nn::Linear<S>::create(ps, name + ".wh2", d, d);
    return l;
  }

  // F_L attends into F_G: H = [W_V V, W_Q Q ⊙ W_K K], H' = GELU(W_H H + b),
  // α = per-channel softmax over positions of (W_H' H' + b'), out = α ⊙ F_G.
  nn::Var<S> operator()(nn::Var<S> f_l, nn::Var<S> f_g,
                        nn::ForwardTrace<S>* trace = nullptr,
                        const std::string& site = "") const {
    CVQA_REQUIRE(f_l.rows() == f_g.rows() && f_l.cols() == f_g.cols(),
                 DimensionError, "local/global feature shapes must match");
    nn::Var<S> q = wq(f_l);
    nn::Var<S> k = wk(f_g);
    nn::Var<S> v = wv(f_g);
    nn::Var<S> h = ad::concat_cols(v, ad::hadamard(q, k));
    nn::Var<S> h2 = ad::gelu(wh(h));
    nn::Var<S> alpha = ad::softmax_cols(wh2(h2));
    if (trace) trace->record(site, MatX<S>(alpha.value().transpose()));
    return ad::hadamard(alpha, f_g);
  }
};

// Front-door composite: F_C = [F_LG, F_LL], one Lgcam shared by both calls.
template <class S>
struct FrontDoor {
  Lgcam<S> lgcam;
  nn::Parameter<S>* codebook = nullptr;  // K x d

  nn::Var<S> operator()(nn::Var<S> f_l, std::uint64_t seed,
                        nn::ForwardTrace<S>* trace = nullptr,
                        const std::string& site = "") const {
    nn::Tape<S>& tape = *f_l.tape;
    const int k = static_cast<int>(codebook->value.rows());
    const auto idx =
        sample_global_indices(k, static_cast<int>(f_l.rows()), seed);
    nn::Var<S> f_g = ad::gather_rows(tape.param(*codebook), idx);
    nn::Var<S> f_lg = lgcam(f_l, f_g, trace, site + ".lg");
    nn::Var<S> f_ll = lgcam(f_l, f_l, trace, site + ".ll");
    return ad::concat_cols(f_lg, f_ll);
  }
};

}  // namespace cvqa::intervention
