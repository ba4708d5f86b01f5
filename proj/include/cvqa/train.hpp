#pragma once

// Optimization loop over the question-answering model: Adam with bias
// correction, a halve-on-plateau learning-rate schedule, seeded shuffled
// mini-batches with gradient accumulation, split evaluation, a versioned
// binary checkpoint container, and the per-epoch training trace.
//
// Every random stream consumed while training epoch k is derived from
// (seed, k) alone, so a resumed run replays the exact draws of an
// uninterrupted one without serializing engine internals; the checkpoint
// stores the seed and the epoch counter as the complete stream state.

#include "cvqa/config.hpp"
#include "cvqa/feature_store.hpp"
#include "cvqa/model.hpp"
#include "cvqa/nn.hpp"
#include "cvqa/types.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace cvqa::train {

template <class S>
class Adam {
 public:
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void attach(const std::vector<nn::Parameter<S>*>& params) {
    m_.clear();
    v_.clear();
    for (const auto* p : params) {
      m_.push_back(MatX<S>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(MatX<S>::Zero(p->value.rows(), p->value.cols()));
    }
    t_ = 0;
  }

  void step(const std::vector<nn::Parameter<S>*>& params, double lr) {
    CVQA_REQUIRE(params.size() == m_.size(), ValidationError,
                 "optimizer is attached to a different parameter set");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      const auto& g = params[i]->grad;
      m_[i] = S(beta1) * m_[i] + S(1.0 - beta1) * g;
      v_[i] = S(beta2) * v_[i] + S(1.0 - beta2) * g.cwiseProduct(g);
      params[i]->value.array() -=
          S(lr) * (m_[i].array() / S(c1)) /
          ((v_[i].array() / S(c2)).sqrt() + S(eps));
    }
  }

  std::uint64_t step_count() const { return t_; }
  std::vector<MatX<S>>& first_moments() { return m_; }
  std::vector<MatX<S>>& second_moments() { return v_; }
  const std::vector<MatX<S>>& first_moments() const { return m_; }
  const std::vector<MatX<S>>& second_moments() const { return v_; }
  void set_step_count(std::uint64_t t) { t_ = t; }

 private:
  std::vector<MatX<S>> m_, v_;
  std::uint64_t t_ = 0;
};

template <class S>
double global_grad_norm(const std::vector<nn::Parameter<S>*>& params) {
  double sq = 0.0;
  for (const auto* p : params)
    sq += static_cast<double>(p->grad.template cast<double>().squaredNorm());
  return std::sqrt(sq);
}

// Halves the rate once the best epoch loss has failed to improve by more
// than 1e-6 for `patience` consecutive epochs; the counter resets on every
// halving and on every improvement.
struct LrOnPlateau {
  double factor = 0.5;
  int patience = 5;
  double min_delta = 1e-6;

  double best = std::numeric_limits<double>::infinity();
  int bad = 0;

  double update(double lr, double epoch_loss) {
    if (epoch_loss < best - min_delta) {
      best = epoch_loss;
      bad = 0;
      return lr;
    }
    if (++bad >= patience) {
      bad = 0;
      return lr * factor;
    }
    return lr;
  }
};

struct EvalResult {
  double metric = 0.0;  // accuracy, or MSE over rounded integer counts
  double mean_loss = 0.0;
  int count = 0;
  std::string kind;  // "accuracy" | "mse"
};

struct EpochRow {
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  double metric = 0.0;
};

struct TrainResult {
  std::vector<EpochRow> trace;
  double best_metric = 0.0;
  int best_epoch = -1;
  std::string metric_kind;
};

inline void write_trace_csv(const std::string& path,
                            const std::vector<EpochRow>& rows) {
  std::ofstream os(path);
  CVQA_REQUIRE(os.good(), IoError, "cannot open for write: " + path);
  os << "epoch,loss,lr,metric\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", r.epoch, r.loss,
                  r.lr, r.metric);
    os << buf;
  }
  CVQA_REQUIRE(os.good(), IoError, "write failed: " + path);
}

namespace detail {

inline void write_u64(std::ostream& os, std::uint64_t v) {
  data::detail::write_u32(os, static_cast<std::uint32_t>(v));
  data::detail::write_u32(os, static_cast<std::uint32_t>(v >> 32));
}
inline std::uint64_t read_u64(std::istream& is, const std::string& what) {
  const std::uint64_t lo = data::detail::read_u32(is, what);
  const std::uint64_t hi = data::detail::read_u32(is, what);
  return lo | (hi << 32);
}
inline void write_f64(std::ostream& os, double v) {
  write_u64(os, std::bit_cast<std::uint64_t>(v));
}
inline double read_f64(std::istream& is, const std::string& what) {
  return std::bit_cast<double>(read_u64(is, what));
}
inline void write_str(std::ostream& os, const std::string& s) {
  data::detail::write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_str(std::istream& is, const std::string& what) {
  const auto n = data::detail::read_u32(is, what);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  CVQA_REQUIRE(is.gcount() == static_cast<std::streamsize>(n), CorruptionError,
               "truncated " + what);
  return s;
}
template <class S>
void write_mat(std::ostream& os, const MatX<S>& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i)
    write_f64(os, static_cast<double>(m.data()[i]));
}
template <class S>
void read_mat(std::istream& is, MatX<S>& m, const std::string& what) {
  for (Eigen::Index i = 0; i < m.size(); ++i)
    m.data()[i] = static_cast<S>(read_f64(is, what));
}

}  // namespace detail

inline constexpr char kCheckpointMagic[4] = {'C', 'M', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Owns the parameter store, the model, the preloaded features and the
// optimizer state; runs epochs one at a time so callers can interleave
// checkpoints, early stopping, or extra evaluations.
template <class S>
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const data::DatasetManifest& manifest,
          const std::string& data_dir)
      : cfg_(cfg), manifest_(manifest), ps_(cfg.seed) {
    validate(cfg_);
    CVQA_REQUIRE(cfg_.task_type == manifest_.task, ValidationError,
                 "config task_type does not match the dataset");
    data::validate_dataset(manifest_, data_dir);
    for (const auto& e : manifest_.entries)
      records_.push_back(
          data::read_feature_file(data_dir + "/" + e.features_path));
    model_ = model::VqaModel<S>::create(ps_, hyper_from(cfg_), manifest_);
    model_.init_codebooks(manifest_, data_dir, cfg_.seed);
    adam_.attach(ps_.all());
    lr_ = cfg_.lr;
    train_idx_ = manifest_.split_indices("train");
    val_split_ =
        manifest_.split_indices("test_iid").empty() ? "train" : "test_iid";
    metric_kind_ = cfg_.task_type == data::TaskType::Count ? "mse" : "accuracy";
    best_metric_ = metric_kind_ == "mse"
                       ? std::numeric_limits<double>::infinity()
                       : -std::numeric_limits<double>::infinity();
  }

  model::VqaModel<S>& model() { return model_; }
  nn::ParameterStore<S>& params() { return ps_; }
  const TrainConfig& config() const { return cfg_; }
  int epoch() const { return epoch_; }
  double lr() const { return lr_; }
  const std::vector<EpochRow>& trace() const { return trace_; }
  const std::string& validation_split() const { return val_split_; }

  EvalResult evaluate_split(const std::string& split) const {
    const auto idx = manifest_.split_indices(split);
    CVQA_REQUIRE(!idx.empty(), ValidationError, "split is empty: " + split);
    const std::uint64_t eval_seed = mix_seed(cfg_.seed, fnv1a64("eval"));
    nn::DropoutCtx<S> drop;  // inactive
    EvalResult r;
    r.kind = metric_kind_;
    double hit = 0.0, sq = 0.0, loss = 0.0;
    for (int i : idx) {
      const auto& e = manifest_.entries[static_cast<size_t>(i)];
      nn::Tape<S> tape;
      const auto sf =
          model_.forward(tape, records_[static_cast<size_t>(i)], e,
                         mix_seed(eval_seed, fnv1a64(e.id)), drop, nullptr);
      loss += static_cast<double>(sf.loss.value()(0, 0));
      if (cfg_.task_type == data::TaskType::Count) {
        const double err = static_cast<double>(sf.prediction - e.answer);
        sq += err * err;
      } else {
        hit += sf.prediction == e.answer ? 1.0 : 0.0;
      }
    }
    r.count = static_cast<int>(idx.size());
    r.mean_loss = loss / r.count;
    r.metric = (cfg_.task_type == data::TaskType::Count ? sq : hit) / r.count;
    return r;
  }

  // Trains one epoch (numbered from 1) and appends its row to the trace.
  EpochRow run_epoch() {
    const int ep = epoch_ + 1;
    const std::uint64_t ep_seed = mix_seed(cfg_.seed, static_cast<std::uint64_t>(ep));
    std::vector<int> order = train_idx_;
    Rng shuffle = named_stream(ep_seed, "epoch.shuffle");
    for (size_t i = order.size() - 1; i > 0; --i) {
      const auto j = uniform_index(shuffle, static_cast<std::uint64_t>(i + 1));
      std::swap(order[i], order[static_cast<size_t>(j)]);
    }
    Rng drop_rng = named_stream(ep_seed, "epoch.dropout");
    nn::DropoutCtx<S> drop{cfg_.dropout > 0.0, static_cast<S>(cfg_.dropout),
                           &drop_rng};

    double loss_sum = 0.0;
    const int n = static_cast<int>(order.size());
    for (int start = 0; start < n; start += cfg_.batch_size) {
      const int bn = std::min(cfg_.batch_size, n - start);
      ps_.zero_grads();
      for (int b = 0; b < bn; ++b) {
        const int i = order[static_cast<size_t>(start + b)];
        const auto& e = manifest_.entries[static_cast<size_t>(i)];
        nn::Tape<S> tape;
        auto sf = model_.forward(tape, records_[static_cast<size_t>(i)], e,
                                 mix_seed(ep_seed, fnv1a64(e.id)), drop,
                                 nullptr);
        const double l = static_cast<double>(sf.loss.value()(0, 0));
        CVQA_REQUIRE(std::isfinite(l), NumericError,
                     "training diverged: non-finite loss at epoch " +
                         std::to_string(ep) + ", sample " + e.id);
        loss_sum += l;
        tape.backward(ad::scale(sf.loss, S(1) / static_cast<S>(bn)));
      }
      if (cfg_.clip_norm > 0.0) {
        const double norm = global_grad_norm(ps_.all());
        if (norm > cfg_.clip_norm)
          for (auto* p : ps_.all())
            p->grad *= static_cast<S>(cfg_.clip_norm / norm);
      }
      adam_.step(ps_.all(), lr_);
    }

    EpochRow row;
    row.epoch = ep;
    row.loss = loss_sum / n;
    row.lr = lr_;
    row.metric = evaluate_split(val_split_).metric;
    if (metric_kind_ == "mse" ? row.metric < best_metric_
                              : row.metric > best_metric_) {
      best_metric_ = row.metric;
      best_epoch_ = ep;
      best_values_.clear();
      for (const auto* p : ps_.all()) best_values_.push_back(p->value);
    }
    lr_ = plateau_.update(lr_, row.loss);
    epoch_ = ep;
    trace_.push_back(row);
    return row;
  }

  // Runs the remaining configured epochs; `stop` can end the run early.
  TrainResult run(const std::function<bool(const EpochRow&)>& stop = {}) {
    while (epoch_ < cfg_.epochs) {
      const EpochRow row = run_epoch();
      if (stop && stop(row)) break;
    }
    TrainResult r;
    r.trace = trace_;
    r.best_metric = best_metric_;
    r.best_epoch = best_epoch_;
    r.metric_kind = metric_kind_;
    return r;
  }

  // Copies the best-on-validation snapshot back into the live parameters.
  bool restore_best() {
    if (best_values_.empty()) return false;
    const auto& all = ps_.all();
    for (size_t i = 0; i < all.size(); ++i) all[i]->value = best_values_[i];
    return true;
  }

  void save_checkpoint(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    CVQA_REQUIRE(os.good(), IoError, "cannot open for write: " + path);
    os.write(kCheckpointMagic, 4);
    data::detail::write_u32(os, kCheckpointVersion);
    detail::write_u64(os, fingerprint(cfg_));
    detail::write_u64(os, cfg_.seed);
    data::detail::write_u32(os, static_cast<std::uint32_t>(epoch_));
    detail::write_u64(os, adam_.step_count());
    detail::write_f64(os, lr_);
    detail::write_f64(os, plateau_.best);
    data::detail::write_u32(os, static_cast<std::uint32_t>(plateau_.bad));
    detail::write_f64(os, best_metric_);
    data::detail::write_u32(os, static_cast<std::uint32_t>(best_epoch_));
    os.put(best_values_.empty() ? '\0' : '\1');
    data::detail::write_u32(os, static_cast<std::uint32_t>(trace_.size()));
    for (const auto& r : trace_) {
      data::detail::write_u32(os, static_cast<std::uint32_t>(r.epoch));
      detail::write_f64(os, r.loss);
      detail::write_f64(os, r.lr);
      detail::write_f64(os, r.metric);
    }
    const auto& all = ps_.all();
    data::detail::write_u32(os, static_cast<std::uint32_t>(all.size()));
    for (size_t i = 0; i < all.size(); ++i) {
      detail::write_str(os, all[i]->name);
      data::detail::write_u32(os, static_cast<std::uint32_t>(all[i]->value.rows()));
      data::detail::write_u32(os, static_cast<std::uint32_t>(all[i]->value.cols()));
      detail::write_mat(os, all[i]->value);
      detail::write_mat(os, adam_.first_moments()[i]);
      detail::write_mat(os, adam_.second_moments()[i]);
    }
    if (!best_values_.empty())
      for (const auto& v : best_values_) detail::write_mat(os, v);
    CVQA_REQUIRE(os.good(), IoError, "write failed: " + path);
  }

  void load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    CVQA_REQUIRE(is.good(), IoError, "cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    CVQA_REQUIRE(is.gcount() == 4 && std::equal(magic, magic + 4, kCheckpointMagic),
                 FormatError, "not a checkpoint file: " + path);
    CVQA_REQUIRE(data::detail::read_u32(is, "checkpoint header") == kCheckpointVersion,
                 FormatError, "unsupported checkpoint version in " + path);
    CVQA_REQUIRE(detail::read_u64(is, "checkpoint header") == fingerprint(cfg_),
                 ConfigError,
                 "checkpoint was written under a different config");
    CVQA_REQUIRE(detail::read_u64(is, "checkpoint header") == cfg_.seed,
                 ConfigError, "checkpoint was written under a different seed");
    epoch_ = static_cast<int>(data::detail::read_u32(is, "checkpoint state"));
    adam_.set_step_count(detail::read_u64(is, "checkpoint state"));
    lr_ = detail::read_f64(is, "checkpoint state");
    plateau_.best = detail::read_f64(is, "checkpoint state");
    plateau_.bad = static_cast<int>(data::detail::read_u32(is, "checkpoint state"));
    best_metric_ = detail::read_f64(is, "checkpoint state");
    best_epoch_ = static_cast<int>(data::detail::read_u32(is, "checkpoint state"));
    const bool has_best = is.get() == 1;
    const auto n_trace = data::detail::read_u32(is, "checkpoint trace");
    trace_.clear();
    for (std::uint32_t i = 0; i < n_trace; ++i) {
      EpochRow r;
      r.epoch = static_cast<int>(data::detail::read_u32(is, "checkpoint trace"));
      r.loss = detail::read_f64(is, "checkpoint trace");
      r.lr = detail::read_f64(is, "checkpoint trace");
      r.metric = detail::read_f64(is, "checkpoint trace");
      trace_.push_back(r);
    }
    const auto& all = ps_.all();
    const auto n_params = data::detail::read_u32(is, "checkpoint parameters");
    CVQA_REQUIRE(n_params == all.size(), ConfigError,
                 "checkpoint holds a different parameter set");
    for (size_t i = 0; i < all.size(); ++i) {
      const std::string name = detail::read_str(is, "checkpoint parameters");
      CVQA_REQUIRE(name == all[i]->name, ConfigError,
                   "checkpoint parameter mismatch: expected " + all[i]->name +
                       ", found " + name);
      const auto r = data::detail::read_u32(is, "checkpoint parameters");
      const auto c = data::detail::read_u32(is, "checkpoint parameters");
      CVQA_REQUIRE(static_cast<Eigen::Index>(r) == all[i]->value.rows() &&
                       static_cast<Eigen::Index>(c) == all[i]->value.cols(),
                   ConfigError, "checkpoint shape mismatch for " + name);
      detail::read_mat(is, all[i]->value, "checkpoint parameters");
      detail::read_mat(is, adam_.first_moments()[i], "checkpoint parameters");
      detail::read_mat(is, adam_.second_moments()[i], "checkpoint parameters");
    }
    best_values_.clear();
    if (has_best)
      for (const auto* p : all) {
        MatX<S> v(p->value.rows(), p->value.cols());
        detail::read_mat(is, v, "checkpoint best parameters");
        best_values_.push_back(std::move(v));
      }
    char extra;
    is.read(&extra, 1);
    CVQA_REQUIRE(is.gcount() == 0, CorruptionError,
                 "trailing bytes in " + path);
  }

 private:
  TrainConfig cfg_;
  data::DatasetManifest manifest_;
  nn::ParameterStore<S> ps_;
  model::VqaModel<S> model_;
  std::vector<data::FeatureRecord> records_;
  std::vector<int> train_idx_;
  std::string val_split_;
  std::string metric_kind_;
  Adam<S> adam_;
  LrOnPlateau plateau_;
  double lr_ = 0.0;
  int epoch_ = 0;
  double best_metric_ = 0.0;
  int best_epoch_ = -1;
  std::vector<MatX<S>> best_values_;
  std::vector<EpochRow> trace_;
};

}  // namespace cvqa::train
