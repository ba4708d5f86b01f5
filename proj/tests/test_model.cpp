#include "cvqa/model.hpp"

#include "cvqa/gradcheck.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <filesystem>

using namespace cvqa;
using namespace cvqa::data;
using namespace cvqa::model;

namespace {

struct DataFixture {
  std::filesystem::path dir;
  DatasetManifest manifest;

  explicit DataFixture(TaskType task, int n = 12, int answers = 3) {
    SyntheticTaskSpec spec;
    spec.task = task;
    spec.num_samples = n;
    spec.answer_space = answers;
    spec.n_clips = 2;
    spec.t_frames = 2;
    spec.d_app_raw = 12;
    spec.d_mot_raw = 10;
    spec.seed = 5;
    dir = std::filesystem::temp_directory_path() /
          ("cvqa_model_" + to_string(task));
    std::filesystem::remove_all(dir);
    generate_synthetic(spec, dir.string());
    manifest = load_manifest((dir / "manifest.json").string());
  }
  ~DataFixture() { std::filesystem::remove_all(dir); }

  FeatureRecord rec(size_t i) const {
    return read_feature_file((dir / manifest.entries[i].features_path).string());
  }
  size_t first_train() const {
    for (size_t i = 0; i < manifest.entries.size(); ++i)
      if (manifest.entries[i].split == "train") return i;
    return 0;
  }
};

ModelHyper toy_hyper() {
  ModelHyper h;
  h.d = 8;
  h.heads = 2;
  h.depth = 1;
  h.graph_depth = 1;
  h.codebook = 3;
  h.text_layers = 1;
  return h;
}

}  // namespace

TEST_SUITE_BEGIN("model");

TEST_CASE("open-ended forward is normalized, finite and deterministic") {
  DataFixture data(TaskType::OpenEnded);
  nn::ParameterStore<double> ps(11);
  auto m = VqaModel<double>::create(ps, toy_hyper(), data.manifest);
  m.init_codebooks(data.manifest, data.dir.string(), 3);
  const size_t i = data.first_train();
  nn::DropoutCtx<double> drop;

  nn::Tape<double> t1;
  auto a = m.forward(t1, data.rec(i), data.manifest.entries[i], 7, drop);
  CHECK(a.output.rows() == 1);
  CHECK(a.output.cols() ==
        static_cast<Eigen::Index>(data.manifest.answer_space.size()));
  CHECK(a.output.value().row(0).sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::isfinite(a.loss.value()(0, 0)));
  CHECK(a.loss.value()(0, 0) > 0.0);
  CHECK(a.prediction >= 0);

  nn::Tape<double> t2;
  auto b = m.forward(t2, data.rec(i), data.manifest.entries[i], 7, drop);
  CHECK(b.output.value() == a.output.value());
  CHECK(b.loss.value() == a.loss.value());

  // a different dictionary sample changes the forward when the front door is on
  nn::Tape<double> t3;
  auto c = m.forward(t3, data.rec(i), data.manifest.entries[i], 8, drop);
  CHECK(c.output.value() != a.output.value());
}

TEST_CASE("every wiring registers at most as many parameters as the full model") {
  DataFixture data(TaskType::OpenEnded);
  auto count = [&](AblationSpec ab) {
    nn::ParameterStore<double> ps(11);
    ModelHyper h = toy_hyper();
    h.ablation = ab;
    VqaModel<double>::create(ps, h, data.manifest);
    return ps.total_size();
  };
  const auto full = count({});
  AblationSpec no_hsrp;
  no_hsrp.disable_hsrp = true;
  AblationSpec no_lbci;
  no_lbci.disable_lbci = true;
  AblationSpec no_vfci;
  no_vfci.disable_vfci = true;
  AblationSpec no_cvlr;
  no_cvlr.disable_cvlr = true;
  AblationSpec no_sge;
  no_sge.disable_sge = true;
  AblationSpec no_alff;
  no_alff.disable_alff = true;

  CHECK(count(no_hsrp) < full);
  CHECK(count(no_lbci) == full);
  CHECK(count(no_vfci) < full);
  CHECK(count(no_cvlr) < full);
  CHECK(count(no_cvlr) == count(no_vfci));
  CHECK(count(no_sge) < full);
  CHECK(count(no_alff) < full);
}

TEST_CASE("all seven wirings run forward and backward with finite gradients") {
  DataFixture data(TaskType::OpenEnded);
  std::vector<AblationSpec> wirings(7);
  wirings[1].disable_hsrp = true;
  wirings[2].disable_lbci = true;
  wirings[3].disable_vfci = true;
  wirings[4].disable_cvlr = true;
  wirings[5].disable_sge = true;
  wirings[6].disable_alff = true;
  const size_t i = data.first_train();
  for (const auto& ab : wirings) {
    nn::ParameterStore<double> ps(11);
    ModelHyper h = toy_hyper();
    h.ablation = ab;
    auto m = VqaModel<double>::create(ps, h, data.manifest);
    m.init_codebooks(data.manifest, data.dir.string(), 3);
    nn::Tape<double> tape;
    nn::DropoutCtx<double> drop;
    auto out = m.forward(tape, data.rec(i), data.manifest.entries[i], 7, drop);
    REQUIRE(std::isfinite(out.loss.value()(0, 0)));
    ps.zero_grads();
    tape.backward(out.loss);
    for (auto* p : ps.all()) CHECK(p->grad.allFinite());
  }
}

TEST_CASE("bypassing the graph stage changes the forward output") {
  DataFixture data(TaskType::OpenEnded);
  const size_t i = data.first_train();
  nn::DropoutCtx<double> drop;
  auto run = [&](AblationSpec ab) {
    nn::ParameterStore<double> ps(11);
    ModelHyper h = toy_hyper();
    h.ablation = ab;
    auto m = VqaModel<double>::create(ps, h, data.manifest);
    m.init_codebooks(data.manifest, data.dir.string(), 3);
    nn::Tape<double> tape;
    return m.forward(tape, data.rec(i), data.manifest.entries[i], 7, drop)
        .output.value();
  };
  AblationSpec no_sge;
  no_sge.disable_sge = true;
  CHECK(run({}) != run(no_sge));
}

TEST_CASE("multi-choice scoring ranks candidates and validates labels") {
  DataFixture data(TaskType::MultiChoice);
  nn::ParameterStore<double> ps(13);
  auto m = VqaModel<double>::create(ps, toy_hyper(), data.manifest);
  m.init_codebooks(data.manifest, data.dir.string(), 3);
  const size_t i = data.first_train();
  const auto& entry = data.manifest.entries[i];
  REQUIRE(entry.choices.size() >= 2);
  nn::Tape<double> tape;
  nn::DropoutCtx<double> drop;
  auto out = m.forward(tape, data.rec(i), entry, 7, drop);
  CHECK(out.output.cols() == static_cast<Eigen::Index>(entry.choices.size()));
  CHECK(out.loss.value()(0, 0) >= 0.0);
  Eigen::Index best = 0;
  out.output.value().row(0).maxCoeff(&best);
  CHECK(out.prediction == static_cast<int>(best));

  ManifestEntry bad = entry;
  bad.answer = static_cast<int>(entry.choices.size());
  nn::Tape<double> t2;
  CHECK_THROWS_AS(m.forward(t2, data.rec(i), bad, 7, drop), ValidationError);
  ManifestEntry few = entry;
  few.choices.resize(1);
  few.answer = 0;
  nn::Tape<double> t3;
  CHECK_THROWS_AS(m.forward(t3, data.rec(i), few, 7, drop), ValidationError);
}

TEST_CASE("counting head predicts a clamped rounded integer") {
  DataFixture data(TaskType::Count);
  nn::ParameterStore<double> ps(17);
  auto m = VqaModel<double>::create(ps, toy_hyper(), data.manifest);
  m.init_codebooks(data.manifest, data.dir.string(), 3);
  const size_t i = data.first_train();
  const auto& entry = data.manifest.entries[i];
  nn::Tape<double> tape;
  nn::DropoutCtx<double> drop;
  auto out = m.forward(tape, data.rec(i), entry, 7, drop);
  CHECK(out.output.cols() == 1);
  const double v = out.output.value()(0, 0);
  CHECK(out.prediction == fusion::clamp_count(v));
  CHECK(out.prediction >= 1);
  CHECK(out.prediction <= 10);
  const double target = static_cast<double>(entry.answer);
  CHECK(out.loss.value()(0, 0) ==
        doctest::Approx((v - target) * (v - target)).epsilon(1e-12));
}

TEST_CASE("codebooks are clustered deterministically from training features") {
  DataFixture data(TaskType::OpenEnded);
  nn::ParameterStore<double> ps(11);
  auto m = VqaModel<double>::create(ps, toy_hyper(), data.manifest);
  m.init_codebooks(data.manifest, data.dir.string(), 3);
  const Mat app = m.front_app->codebook->value;
  const Mat mot = m.front_mot->codebook->value;
  CHECK(app.rows() == 3);
  CHECK(app.cols() == 8);
  CHECK(app.allFinite());
  CHECK(app != Mat::Zero(3, 8));
  CHECK(mot.allFinite());

  nn::ParameterStore<double> ps2(11);
  auto m2 = VqaModel<double>::create(ps2, toy_hyper(), data.manifest);
  m2.init_codebooks(data.manifest, data.dir.string(), 3);
  CHECK(m2.front_app->codebook->value == app);
  CHECK(m2.front_mot->codebook->value == mot);

  // more dictionary rows than training vectors cannot be clustered
  nn::ParameterStore<double> ps3(11);
  ModelHyper big = toy_hyper();
  big.codebook = 10000;
  auto m3 = VqaModel<double>::create(ps3, big, data.manifest);
  CHECK_THROWS_AS(m3.init_codebooks(data.manifest, data.dir.string(), 3),
                  ValidationError);
}

TEST_CASE("prior-weighted gating derives one entropy scalar per stream") {
  DataFixture data(TaskType::OpenEnded);
  nn::ParameterStore<double> ps(11);
  ModelHyper h = toy_hyper();
  h.prior_weighted = true;
  auto m = VqaModel<double>::create(ps, h, data.manifest);
  REQUIRE(m.stream_weights.size() == 4);
  for (double w : m.stream_weights) {
    CHECK(w > 0.0);
    CHECK(w <= 1.0 + 1e-12);
  }
  m.init_codebooks(data.manifest, data.dir.string(), 3);
  const size_t i = data.first_train();
  nn::Tape<double> tape;
  nn::DropoutCtx<double> drop;
  auto out = m.forward(tape, data.rec(i), data.manifest.entries[i], 7, drop);
  CHECK(std::isfinite(out.loss.value()(0, 0)));

  // ablating the linguistic intervention silently drops the prior machinery
  ModelHyper off = h;
  off.ablation.disable_lbci = true;
  nn::ParameterStore<double> ps2(11);
  auto m2 = VqaModel<double>::create(ps2, off, data.manifest);
  CHECK(m2.stream_weights.empty());
  off.ablation.disable_lbci = false;
  off.ablation.disable_cvlr = true;
  nn::ParameterStore<double> ps3(11);
  auto m3 = VqaModel<double>::create(ps3, off, data.manifest);
  CHECK(m3.stream_weights.empty());
}

TEST_CASE("every attention and gate in the forward pass is normalized") {
  DataFixture data(TaskType::OpenEnded);
  nn::ParameterStore<double> ps(11);
  auto m = VqaModel<double>::create(ps, toy_hyper(), data.manifest);
  m.init_codebooks(data.manifest, data.dir.string(), 3);
  const size_t i = data.first_train();
  nn::Tape<double> tape;
  nn::DropoutCtx<double> drop;
  nn::ForwardTrace<double> trace;
  m.forward(tape, data.rec(i), data.manifest.entries[i], 7, drop, &trace);
  REQUIRE(trace.softmaxes.size() > 10);
  for (const auto& rec : trace.softmaxes) {
    for (Eigen::Index r = 0; r < rec.probs.rows(); ++r) {
      CHECK(rec.probs.row(r).sum() == doctest::Approx(1.0).epsilon(1e-6));
      if (rec.keep.size() > 0)
        for (Eigen::Index c = 0; c < rec.probs.cols(); ++c)
          if (rec.keep(c) <= 0.0) CHECK(rec.probs(r, c) == 0.0);
    }
  }
}

TEST_CASE("assembled model gradients match finite differences") {
  DataFixture data(TaskType::OpenEnded);
  nn::ParameterStore<double> ps(11);
  auto m = VqaModel<double>::create(ps, toy_hyper(), data.manifest);
  m.init_codebooks(data.manifest, data.dir.string(), 3);
  const size_t i = data.first_train();
  const auto rec = data.rec(i);
  const auto& entry = data.manifest.entries[i];
  nn::DropoutCtx<double> drop;
  auto eval = [&](bool do_backward) {
    nn::Tape<double> tape;
    if (do_backward) ps.zero_grads();
    auto out = m.forward(tape, rec, entry, 7, drop);
    if (do_backward) tape.backward(out.loss);
    return out.loss.value()(0, 0);
  };
  Rng coords = named_stream(23, "model.fd");
  const auto stat = check_params_fd(eval, ps.all(), 1e-5, &coords, 2);
  CHECK(stat.coords_checked >= 200);
  CHECK(stat.max_rel_err < 1e-6);
}

TEST_SUITE_END();
