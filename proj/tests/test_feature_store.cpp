#include "cvqa/feature_store.hpp"

#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cvqa/visual.hpp"
#include "test_util.hpp"

using namespace cvqa;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("cvqa_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

data::FeatureRecord sample_record(Rng& rng, int n = 3, int t = 2, int da = 8,
                                  int dm = 6) {
  data::FeatureRecord rec;
  rec.n_clips = n;
  rec.t_frames = t;
  rec.appearance.resize(n * t, da);
  rec.motion.resize(n, dm);
  for (Eigen::Index i = 0; i < rec.appearance.size(); ++i)
    rec.appearance.data()[i] = static_cast<float>(gaussian(rng));
  for (Eigen::Index i = 0; i < rec.motion.size(); ++i)
    rec.motion.data()[i] = static_cast<float>(gaussian(rng));
  return rec;
}

// Mutual information (nats) between paired discrete variables in [0, a).
double mutual_info(const std::vector<std::pair<int, int>>& pairs, int a) {
  std::vector<double> joint(static_cast<size_t>(a) * a, 0.0);
  std::vector<double> px(a, 0.0), py(a, 0.0);
  for (auto [x, y] : pairs) {
    joint[static_cast<size_t>(x) * a + y] += 1.0;
    px[static_cast<size_t>(x)] += 1.0;
    py[static_cast<size_t>(y)] += 1.0;
  }
  const double n = static_cast<double>(pairs.size());
  double mi = 0.0;
  for (int x = 0; x < a; ++x)
    for (int y = 0; y < a; ++y) {
      const double pxy = joint[static_cast<size_t>(x) * a + y] / n;
      if (pxy > 0.0) mi += pxy * std::log(pxy / ((px[x] / n) * (py[y] / n)));
    }
  return mi;
}

bool same_file_bytes(const fs::path& a, const fs::path& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(fa)), {});
  std::string sb((std::istreambuf_iterator<char>(fb)), {});
  return !sa.empty() && sa == sb;
}

}  // namespace

TEST_SUITE("feature_store") {

TEST_CASE("feature file round-trips exactly") {
  Rng rng(31);
  auto rec = sample_record(rng);
  auto dir = temp_dir("roundtrip");
  auto path = (dir / "x.cmfb").string();
  data::write_feature_file(path, rec);
  auto back = data::read_feature_file(path);
  CHECK(back.n_clips == rec.n_clips);
  CHECK(back.t_frames == rec.t_frames);
  CHECK(back.appearance == rec.appearance);
  CHECK(back.motion == rec.motion);
}

TEST_CASE("corrupt feature files are rejected with typed errors") {
  Rng rng(32);
  auto rec = sample_record(rng);
  auto dir = temp_dir("corrupt");
  auto path = (dir / "x.cmfb").string();
  data::write_feature_file(path, rec);

  // truncation
  {
    std::ifstream in(path, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)), {});
    std::ofstream out(dir / "trunc.cmfb", std::ios::binary);
    out.write(all.data(), static_cast<std::streamsize>(all.size() - 7));
  }
  CHECK_THROWS_AS(data::read_feature_file((dir / "trunc.cmfb").string()),
                  CorruptionError);

  // trailing bytes
  {
    std::ofstream out(path, std::ios::binary | std::ios::app);
    out << "xx";
  }
  CHECK_THROWS_AS(data::read_feature_file(path), CorruptionError);

  // bad magic
  {
    std::ofstream out(dir / "magic.cmfb", std::ios::binary);
    out << "NOPExxxxxxxxxxxxxxxxxxxxxxxx";
  }
  CHECK_THROWS_AS(data::read_feature_file((dir / "magic.cmfb").string()),
                  FormatError);

  // missing file
  CHECK_THROWS_AS(data::read_feature_file((dir / "absent.cmfb").string()),
                  IoError);
}

TEST_CASE("clip segmentation keeps floor(L/N) frames per clip") {
  Rng rng(33);
  Mat frames = testutil::random_mat(rng, 17, 5);
  Mat clips = visual::segment_clips(frames, 8);
  CHECK(clips.rows() == 16);  // frame 17 dropped
  CHECK(clips.row(0) == frames.row(0));
  CHECK(clips.row(15) == frames.row(15));
  CHECK(visual::clip_length(17, 8) == 2);
  CHECK_THROWS_AS(visual::clip_length(7, 8), ValidationError);
}

TEST_CASE("bias splits partition 64 samples as 32/16/16") {
  Rng rng(34);
  std::vector<int> answers(64);
  for (auto& x : answers) x = static_cast<int>(uniform_index(rng, 4));
  Rng srng(35);
  auto assign = data::make_bias_splits(answers, 4, 0.5, 0.25, 0.25, 0.9, srng);
  int n_train = 0, n_iid = 0, n_anti = 0;
  for (const auto& s : assign.split) {
    if (s == "train") ++n_train;
    if (s == "test_iid") ++n_iid;
    if (s == "test_anti") ++n_anti;
  }
  CHECK(n_train == 32);
  CHECK(n_iid == 16);
  CHECK(n_anti == 16);
}

TEST_CASE("full bias makes train markers copy answers and anti markers avoid them") {
  Rng rng(36);
  std::vector<int> answers(60);
  for (auto& x : answers) x = static_cast<int>(uniform_index(rng, 4));
  Rng srng(37);
  auto assign = data::make_bias_splits(answers, 4, 0.5, 0.25, 0.25, 1.0, srng);
  for (size_t i = 0; i < answers.size(); ++i) {
    if (assign.split[i] == "test_anti")
      CHECK(assign.marker[i] != answers[i]);
    else
      CHECK(assign.marker[i] == answers[i]);
  }
}

TEST_CASE("marker-answer mutual information drops on the anti split") {
  Rng rng(38);
  std::vector<int> answers(4000);
  for (auto& x : answers) x = static_cast<int>(uniform_index(rng, 4));
  Rng srng(39);
  auto assign = data::make_bias_splits(answers, 4, 0.5, 0.25, 0.25, 0.9, srng);
  std::vector<std::pair<int, int>> train, anti;
  for (size_t i = 0; i < answers.size(); ++i) {
    if (assign.split[i] == "train") train.push_back({answers[i], assign.marker[i]});
    if (assign.split[i] == "test_anti") anti.push_back({answers[i], assign.marker[i]});
  }
  const double mi_train = mutual_info(train, 4);
  const double mi_anti = mutual_info(anti, 4);
  // at bias 0.9 the population values are ~1.04 vs ~0.20 nats
  CHECK(mi_train > 0.8);
  CHECK(mi_anti < 0.5);
  CHECK(mi_train > mi_anti + 0.3);
}

TEST_CASE("synthetic generation is deterministic and self-consistent") {
  data::SyntheticTaskSpec spec;
  spec.num_samples = 24;
  spec.answer_space = 4;
  spec.bias_strength = 0.9;
  spec.n_clips = 3;
  spec.t_frames = 2;
  spec.d_app_raw = 12;
  spec.d_mot_raw = 8;
  spec.seed = 77;

  auto dir1 = temp_dir("gen1");
  auto dir2 = temp_dir("gen2");
  data::generate_synthetic(spec, dir1.string());
  data::generate_synthetic(spec, dir2.string());
  CHECK(same_file_bytes(dir1 / "manifest.json", dir2 / "manifest.json"));
  CHECK(same_file_bytes(dir1 / "features" / "q00003.cmfb",
                        dir2 / "features" / "q00003.cmfb"));

  auto m = data::load_manifest((dir1 / "manifest.json").string());
  data::validate_dataset(m, dir1.string());
  CHECK(m.entries.size() == 24);
  CHECK(m.answer_space.size() == 4);
  for (const auto& e : m.entries) {
    CHECK(e.answer == (e.latent_event + e.latent_visual) % 4);
    const std::string tag = "tag" + std::to_string(e.marker);
    CHECK(e.question.find(tag) != std::string::npos);
  }

  // a different seed produces different bytes
  spec.seed = 78;
  auto dir3 = temp_dir("gen3");
  data::generate_synthetic(spec, dir3.string());
  CHECK(!same_file_bytes(dir1 / "manifest.json", dir3 / "manifest.json"));

  spec.noise_scale = -0.1;
  CHECK_THROWS_AS(data::generate_synthetic(spec, dir3.string()),
                  ValidationError);
}

TEST_CASE("validation rejects structural damage") {
  data::SyntheticTaskSpec spec;
  spec.num_samples = 12;
  spec.answer_space = 3;
  spec.n_clips = 2;
  spec.t_frames = 2;
  spec.d_app_raw = 9;
  spec.d_mot_raw = 6;
  spec.seed = 5;
  auto dir = temp_dir("val");
  data::generate_synthetic(spec, dir.string());
  auto m = data::load_manifest((dir / "manifest.json").string());
  data::validate_dataset(m, dir.string());

  auto bad = m;
  bad.entries[0].answer = 99;
  CHECK_THROWS_AS(data::validate_dataset(bad, dir.string()), ValidationError);

  bad = m;
  bad.entries[1].split = "dev";
  CHECK_THROWS_AS(data::validate_dataset(bad, dir.string()), ValidationError);

  bad = m;
  bad.entries[2].features_path = "features/absent.cmfb";
  CHECK_THROWS_AS(data::validate_dataset(bad, dir.string()), IoError);

  bad = m;
  bad.d_app_raw += 1;
  CHECK_THROWS_AS(data::validate_dataset(bad, dir.string()), ValidationError);

  bad = m;
  bad.entries[3].id = bad.entries[4].id;
  CHECK_THROWS_AS(data::validate_dataset(bad, dir.string()), ValidationError);
}

TEST_CASE("counting and multi-choice generation carry task metadata") {
  data::SyntheticTaskSpec spec;
  spec.task = data::TaskType::Count;
  spec.num_samples = 12;
  spec.answer_space = 4;
  spec.n_clips = 2;
  spec.t_frames = 1;
  spec.d_app_raw = 8;
  spec.d_mot_raw = 8;
  spec.seed = 9;
  auto dir = temp_dir("count");
  data::generate_synthetic(spec, dir.string());
  auto m = data::load_manifest((dir / "manifest.json").string());
  data::validate_dataset(m, dir.string());
  CHECK(m.task == data::TaskType::Count);
  for (const auto& e : m.entries) {
    CHECK(e.answer >= m.count_min);
    CHECK(e.answer <= m.count_max);
    CHECK(e.question.rfind("how many times", 0) == 0);
  }

  spec.task = data::TaskType::MultiChoice;
  auto dir2 = temp_dir("mc");
  data::generate_synthetic(spec, dir2.string());
  auto m2 = data::load_manifest((dir2 / "manifest.json").string());
  data::validate_dataset(m2, dir2.string());
  CHECK(m2.num_choices == 4);
  for (const auto& e : m2.entries) CHECK(e.choices.size() == 4);
}

}  // TEST_SUITE
