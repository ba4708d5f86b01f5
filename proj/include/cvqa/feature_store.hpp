#pragma once

// Precomputed-feature storage: a small binary container per video (appearance
// features per frame grouped into clips, motion features per clip), a JSON
// dataset manifest, and a deterministic synthetic-task generator with
// controllable answer-marker bias for probing shortcut learning.

#include "cvqa/types.hpp"
#include "cvqa/visual.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

namespace cvqa::data {

struct FeatureRecord {
  Matf appearance;  // (n_clips * t_frames) x d_app_raw
  Matf motion;      // n_clips x d_mot_raw
  int n_clips = 0;
  int t_frames = 0;
};

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  CVQA_REQUIRE(is.gcount() == 4, CorruptionError, "truncated " + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_f32_block(std::ostream& os, const Matf& m) {
  os.write(reinterpret_cast<const char*>(m.data()),
           static_cast<std::streamsize>(sizeof(float)) * m.size());
}

inline void read_f32_block(std::istream& is, Matf& m, const std::string& what) {
  const std::streamsize bytes =
      static_cast<std::streamsize>(sizeof(float)) * m.size();
  is.read(reinterpret_cast<char*>(m.data()), bytes);
  CVQA_REQUIRE(is.gcount() == bytes, CorruptionError, "truncated " + what);
}

}  // namespace detail

inline constexpr char kFeatureMagic[4] = {'C', 'M', 'F', 'B'};
inline constexpr std::uint32_t kFeatureVersion = 1;

// Layout (little-endian): magic, version, n_clips, t_frames, d_app_raw,
// d_mot_raw, then float32 appearance rows, then float32 motion rows.
inline void write_feature_file(const std::string& path, const FeatureRecord& rec) {
  CVQA_REQUIRE(rec.n_clips > 0 && rec.t_frames > 0, ValidationError,
               "feature record needs positive clip shape");
  CVQA_REQUIRE(
      rec.appearance.rows() == static_cast<Eigen::Index>(rec.n_clips) * rec.t_frames,
      DimensionError, "appearance rows must equal n_clips * t_frames");
  CVQA_REQUIRE(rec.motion.rows() == rec.n_clips, DimensionError,
               "motion rows must equal n_clips");
  std::ofstream os(path, std::ios::binary);
  CVQA_REQUIRE(os.good(), IoError, "cannot open for write: " + path);
  os.write(kFeatureMagic, 4);
  detail::write_u32(os, kFeatureVersion);
  detail::write_u32(os, static_cast<std::uint32_t>(rec.n_clips));
  detail::write_u32(os, static_cast<std::uint32_t>(rec.t_frames));
  detail::write_u32(os, static_cast<std::uint32_t>(rec.appearance.cols()));
  detail::write_u32(os, static_cast<std::uint32_t>(rec.motion.cols()));
  detail::write_f32_block(os, rec.appearance);
  detail::write_f32_block(os, rec.motion);
  CVQA_REQUIRE(os.good(), IoError, "write failed: " + path);
}

inline FeatureRecord read_feature_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  CVQA_REQUIRE(is.good(), IoError, "cannot open for read: " + path);
  char magic[4];
  is.read(magic, 4);
  CVQA_REQUIRE(is.gcount() == 4 && std::equal(magic, magic + 4, kFeatureMagic),
               FormatError, "bad feature-file magic: " + path);
  const auto version = detail::read_u32(is, "header of " + path);
  CVQA_REQUIRE(version == kFeatureVersion, FormatError,
               "unsupported feature-file version " + std::to_string(version));
  FeatureRecord rec;
  rec.n_clips = static_cast<int>(detail::read_u32(is, "header of " + path));
  rec.t_frames = static_cast<int>(detail::read_u32(is, "header of " + path));
  const auto d_app = detail::read_u32(is, "header of " + path);
  const auto d_mot = detail::read_u32(is, "header of " + path);
  CVQA_REQUIRE(rec.n_clips > 0 && rec.t_frames > 0 && d_app > 0 && d_mot > 0,
               FormatError, "degenerate dimensions in " + path);
  rec.appearance.resize(static_cast<Eigen::Index>(rec.n_clips) * rec.t_frames,
                        static_cast<Eigen::Index>(d_app));
  rec.motion.resize(rec.n_clips, static_cast<Eigen::Index>(d_mot));
  detail::read_f32_block(is, rec.appearance, "appearance payload of " + path);
  detail::read_f32_block(is, rec.motion, "motion payload of " + path);
  char extra;
  is.read(&extra, 1);
  CVQA_REQUIRE(is.gcount() == 0, CorruptionError, "trailing bytes in " + path);
  return rec;
}

enum class TaskType { OpenEnded, MultiChoice, Count };

inline std::string to_string(TaskType t) {
  switch (t) {
    case TaskType::OpenEnded: return "open_ended";
    case TaskType::MultiChoice: return "multi_choice";
    case TaskType::Count: return "count";
  }
  return "open_ended";
}

inline TaskType task_from_string(const std::string& s) {
  if (s == "open_ended") return TaskType::OpenEnded;
  if (s == "multi_choice") return TaskType::MultiChoice;
  if (s == "count") return TaskType::Count;
  throw ValidationError("unknown task type: " + s);
}

struct ManifestEntry {
  std::string id;
  std::string split;  // train | test_iid | test_anti
  std::string question;
  std::string features_path;  // relative to the manifest directory
  int answer = 0;             // label index, or the count value for counting
  std::vector<std::string> choices;
  int latent_event = -1;
  int latent_visual = -1;
  int marker = -1;
};

struct DatasetManifest {
  TaskType task = TaskType::OpenEnded;
  std::vector<std::string> answer_space;  // open-ended label names
  int num_choices = 0;
  int count_min = 1;
  int count_max = 10;
  int d_app_raw = 0;
  int d_mot_raw = 0;
  int n_clips = 0;
  int t_frames = 0;
  std::vector<ManifestEntry> entries;

  std::vector<int> split_indices(const std::string& split) const {
    std::vector<int> out;
    for (size_t i = 0; i < entries.size(); ++i)
      if (entries[i].split == split) out.push_back(static_cast<int>(i));
    return out;
  }
};

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
  nlohmann::json j;
  j["format"] = "cvqa.dataset";
  j["version"] = 1;
  j["task_type"] = to_string(m.task);
  j["answer_space"] = m.answer_space;
  j["num_choices"] = m.num_choices;
  j["count_min"] = m.count_min;
  j["count_max"] = m.count_max;
  j["feature_dims"] = {{"d_app_raw", m.d_app_raw},
                       {"d_mot_raw", m.d_mot_raw},
                       {"n_clips", m.n_clips},
                       {"t_frames", m.t_frames}};
  j["entries"] = nlohmann::json::array();
  for (const auto& e : m.entries) {
    nlohmann::json je = {{"id", e.id},
                         {"split", e.split},
                         {"question", e.question},
                         {"features", e.features_path},
                         {"answer", e.answer}};
    if (!e.choices.empty()) je["choices"] = e.choices;
    if (e.latent_event >= 0)
      je["latents"] = {{"e", e.latent_event}, {"v", e.latent_visual}, {"marker", e.marker}};
    j["entries"].push_back(std::move(je));
  }
  std::ofstream os(path);
  CVQA_REQUIRE(os.good(), IoError, "cannot open for write: " + path);
  os << j.dump(2) << "\n";
  CVQA_REQUIRE(os.good(), IoError, "write failed: " + path);
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  CVQA_REQUIRE(is.good(), IoError, "cannot open manifest: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest is not valid JSON: " + std::string(e.what()));
  }
  CVQA_REQUIRE(j.value("format", "") == "cvqa.dataset", FormatError,
               "not a dataset manifest: " + path);
  CVQA_REQUIRE(j.value("version", 0) == 1, FormatError,
               "unsupported manifest version in " + path);
  DatasetManifest m;
  try {
    m.task = task_from_string(j.at("task_type").get<std::string>());
    m.answer_space = j.value("answer_space", std::vector<std::string>{});
    m.num_choices = j.value("num_choices", 0);
    m.count_min = j.value("count_min", 1);
    m.count_max = j.value("count_max", 10);
    const auto& fd = j.at("feature_dims");
    m.d_app_raw = fd.at("d_app_raw").get<int>();
    m.d_mot_raw = fd.at("d_mot_raw").get<int>();
    m.n_clips = fd.at("n_clips").get<int>();
    m.t_frames = fd.at("t_frames").get<int>();
    for (const auto& je : j.at("entries")) {
      ManifestEntry e;
      e.id = je.at("id").get<std::string>();
      e.split = je.at("split").get<std::string>();
      e.question = je.at("question").get<std::string>();
      e.features_path = je.at("features").get<std::string>();
      e.answer = je.at("answer").get<int>();
      if (je.contains("choices"))
        e.choices = je.at("choices").get<std::vector<std::string>>();
      if (je.contains("latents")) {
        e.latent_event = je.at("latents").value("e", -1);
        e.latent_visual = je.at("latents").value("v", -1);
        e.marker = je.at("latents").value("marker", -1);
      }
      m.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest field error: " + std::string(e.what()));
  }
  return m;
}

// Full structural check: split names, label ranges, feature files present
// with dimensions matching the manifest header.
inline void validate_dataset(const DatasetManifest& m, const std::string& root_dir) {
  CVQA_REQUIRE(!m.entries.empty(), ValidationError, "manifest has no entries");
  CVQA_REQUIRE(m.d_app_raw > 0 && m.d_mot_raw > 0 && m.n_clips > 0 && m.t_frames > 0,
               ValidationError, "manifest feature dims must be positive");
  if (m.task == TaskType::OpenEnded)
    CVQA_REQUIRE(m.answer_space.size() >= 2, ValidationError,
                 "open-ended task needs an answer space");
  if (m.task == TaskType::MultiChoice)
    CVQA_REQUIRE(m.num_choices >= 2, ValidationError,
                 "multi-choice task needs at least two choices");
  CVQA_REQUIRE(m.count_min <= m.count_max, ValidationError,
               "count range is empty");
  std::set<std::string> ids;
  for (const auto& e : m.entries) {
    CVQA_REQUIRE(ids.insert(e.id).second, ValidationError,
                 "duplicate entry id: " + e.id);
    CVQA_REQUIRE(e.split == "train" || e.split == "test_iid" || e.split == "test_anti",
                 ValidationError, "unknown split '" + e.split + "' in " + e.id);
    CVQA_REQUIRE(!e.question.empty(), ValidationError, "empty question in " + e.id);
    switch (m.task) {
      case TaskType::OpenEnded:
        CVQA_REQUIRE(e.answer >= 0 &&
                         e.answer < static_cast<int>(m.answer_space.size()),
                     ValidationError, "answer out of range in " + e.id);
        break;
      case TaskType::MultiChoice:
        CVQA_REQUIRE(static_cast<int>(e.choices.size()) == m.num_choices,
                     ValidationError, "wrong choice count in " + e.id);
        CVQA_REQUIRE(e.answer >= 0 && e.answer < m.num_choices, ValidationError,
                     "correct-choice index out of range in " + e.id);
        break;
      case TaskType::Count:
        CVQA_REQUIRE(e.answer >= m.count_min && e.answer <= m.count_max,
                     ValidationError, "count out of range in " + e.id);
        break;
    }
    const auto fpath = std::filesystem::path(root_dir) / e.features_path;
    const FeatureRecord rec = read_feature_file(fpath.string());
    CVQA_REQUIRE(rec.n_clips == m.n_clips && rec.t_frames == m.t_frames &&
                     rec.appearance.cols() == m.d_app_raw &&
                     rec.motion.cols() == m.d_mot_raw,
                 ValidationError,
                 "feature dims of " + e.id + " do not match the manifest");
  }
  CVQA_REQUIRE(!m.split_indices("train").empty(), ValidationError,
               "train split is empty");
}

// ---- synthetic task generation ----

struct SyntheticTaskSpec {
  TaskType task = TaskType::OpenEnded;
  int num_samples = 64;
  int answer_space = 4;  // distinct answers; also the marker-token count
  double bias_strength = 0.0;
  double train_ratio = 0.5;
  double iid_ratio = 0.25;
  double anti_ratio = 0.25;
  int n_clips = 4;
  int t_frames = 2;
  int d_app_raw = 48;
  int d_mot_raw = 32;
  int object_variety = 8;  // distinct filler nouns
  double noise_scale = 0.3;  // feature noise around the class bump
  std::uint64_t seed = 1;
};

struct BiasAssignment {
  std::vector<std::string> split;
  std::vector<int> marker;
};

// Shuffles indices, partitions them train / test_iid / test_anti by the given
// ratios, then draws one marker value per sample: on the train-aligned splits
// the marker copies the answer with probability `bias`, on test_anti it is
// drawn among the wrong values with probability `bias`, and it is uniform
// otherwise. The anti split therefore carries strictly less marker-answer
// mutual information than train whenever bias > 0.
inline BiasAssignment make_bias_splits(const std::vector<int>& answers,
                                       int num_values, double train_ratio,
                                       double iid_ratio, double anti_ratio,
                                       double bias, Rng& rng) {
  const int n = static_cast<int>(answers.size());
  CVQA_REQUIRE(n >= 3, ValidationError, "need at least 3 samples to split");
  CVQA_REQUIRE(num_values >= 2, ValidationError, "need at least two answer values");
  CVQA_REQUIRE(bias >= 0.0 && bias <= 1.0, ValidationError,
               "bias_strength must lie in [0, 1]");
  const double rsum = train_ratio + iid_ratio + anti_ratio;
  CVQA_REQUIRE(std::abs(rsum - 1.0) < 1e-9, ValidationError,
               "split ratios must sum to 1");
  const int n_train = static_cast<int>(std::llround(n * train_ratio));
  const int n_iid = static_cast<int>(std::llround(n * iid_ratio));
  const int n_anti = n - n_train - n_iid;
  CVQA_REQUIRE(n_train >= 1 && n_iid >= 1 && n_anti >= 1, ValidationError,
               "every split must receive at least one sample");

  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  for (int i = n - 1; i > 0; --i) {
    const auto j = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(i + 1)));
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
  }

  BiasAssignment out;
  out.split.assign(static_cast<size_t>(n), "");
  out.marker.assign(static_cast<size_t>(n), -1);
  for (int pos = 0; pos < n; ++pos) {
    const int i = order[static_cast<size_t>(pos)];
    const std::string split =
        pos < n_train ? "train" : (pos < n_train + n_iid ? "test_iid" : "test_anti");
    out.split[static_cast<size_t>(i)] = split;
    const int ans = answers[static_cast<size_t>(i)];
    CVQA_REQUIRE(ans >= 0 && ans < num_values, ValidationError,
                 "answer value out of range for marker drawing");
    int marker;
    if (uniform_real(rng) < bias) {
      if (split == "test_anti") {
        // uniform over the wrong values
        auto w = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(num_values - 1)));
        marker = w >= ans ? w + 1 : w;
      } else {
        marker = ans;
      }
    } else {
      marker = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(num_values)));
    }
    out.marker[static_cast<size_t>(i)] = marker;
  }
  return out;
}

namespace detail {

inline const std::vector<std::string>& gen_verbs() {
  static const std::vector<std::string> v = {"ride",  "cross", "hit",   "turn",
                                             "fall",  "push",  "chase", "carry",
                                             "climb", "throw"};
  return v;
}
inline const std::vector<std::string>& gen_subjects() {
  static const std::vector<std::string> v = {"person", "car",   "rider", "truck",
                                             "dog",    "woman", "man",   "bus"};
  return v;
}
inline const std::vector<std::string>& gen_objects() {
  static const std::vector<std::string> v = {"road", "pole", "bike", "wall",
                                             "gate", "tree", "sign", "fence",
                                             "box",  "door", "cart", "lamp"};
  return v;
}

}  // namespace detail

// Deterministically writes manifest.json plus one feature file per sample
// into out_dir. The event latent e is expressed only through the question's
// verb, the visual latent v only through a channel-block bump in the
// features, and the label is (e + v) mod answer_space, so neither modality
// alone determines it. A marker token tag<k> is appended to each question
// according to make_bias_splits.
inline void generate_synthetic(const SyntheticTaskSpec& spec,
                               const std::string& out_dir) {
  CVQA_REQUIRE(spec.num_samples >= 3, ValidationError, "num_samples too small");
  CVQA_REQUIRE(spec.answer_space >= 2 &&
                   spec.answer_space <= static_cast<int>(detail::gen_verbs().size()),
               ValidationError, "answer_space must lie in [2, 10]");
  CVQA_REQUIRE(spec.n_clips >= 1 && spec.t_frames >= 1, ValidationError,
               "clip shape must be positive");
  CVQA_REQUIRE(spec.d_app_raw >= spec.answer_space &&
                   spec.d_mot_raw >= spec.answer_space,
               ValidationError,
               "feature dims must be at least answer_space wide");
  CVQA_REQUIRE(spec.noise_scale >= 0.0, ValidationError,
               "noise_scale must be non-negative");
  const int a = spec.answer_space;

  Rng lat_rng = named_stream(spec.seed, "gen.latents");
  Rng feat_rng = named_stream(spec.seed, "gen.features");
  Rng split_rng = named_stream(spec.seed, "gen.splits");
  Rng text_rng = named_stream(spec.seed, "gen.text");

  const int n_counts =
      spec.task == TaskType::Count ? std::min(10, std::max(2, a)) : 0;

  std::vector<int> e_lat(static_cast<size_t>(spec.num_samples));
  std::vector<int> v_lat(static_cast<size_t>(spec.num_samples));
  std::vector<int> answers(static_cast<size_t>(spec.num_samples));
  for (int i = 0; i < spec.num_samples; ++i) {
    e_lat[static_cast<size_t>(i)] = static_cast<int>(uniform_index(lat_rng, static_cast<std::uint64_t>(a)));
    v_lat[static_cast<size_t>(i)] = static_cast<int>(uniform_index(lat_rng, static_cast<std::uint64_t>(a)));
    const int mix = (e_lat[static_cast<size_t>(i)] + v_lat[static_cast<size_t>(i)]) % a;
    answers[static_cast<size_t>(i)] =
        spec.task == TaskType::Count ? mix % n_counts : mix;
  }

  const int marker_values = spec.task == TaskType::Count ? n_counts : a;
  const BiasAssignment assign =
      make_bias_splits(answers, marker_values, spec.train_ratio, spec.iid_ratio,
                       spec.anti_ratio, spec.bias_strength, split_rng);

  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "features");

  DatasetManifest m;
  m.task = spec.task;
  m.num_choices = spec.task == TaskType::MultiChoice ? a : 0;
  m.count_min = 1;
  m.count_max = spec.task == TaskType::Count ? n_counts : 10;
  m.d_app_raw = spec.d_app_raw;
  m.d_mot_raw = spec.d_mot_raw;
  m.n_clips = spec.n_clips;
  m.t_frames = spec.t_frames;
  if (spec.task == TaskType::OpenEnded)
    for (int k = 0; k < a; ++k) m.answer_space.push_back("a" + std::to_string(k));
  std::vector<std::string> choice_names;
  if (spec.task == TaskType::MultiChoice)
    for (int k = 0; k < a; ++k) choice_names.push_back("pick" + std::to_string(k));

  const auto& verbs = detail::gen_verbs();
  const auto& subjects = detail::gen_subjects();
  const auto& objects = detail::gen_objects();
  const int n_obj = std::min<int>(std::max(2, spec.object_variety),
                                  static_cast<int>(objects.size()));

  const int block_a = spec.d_app_raw / a;
  const int block_m = spec.d_mot_raw / a;

  for (int i = 0; i < spec.num_samples; ++i) {
    const size_t si = static_cast<size_t>(i);
    ManifestEntry e;
    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "q%05d", i);
    e.id = idbuf;
    e.split = assign.split[si];
    e.marker = assign.marker[si];
    e.latent_event = e_lat[si];
    e.latent_visual = v_lat[si];

    const auto& subj = subjects[uniform_index(text_rng, subjects.size())];
    const auto& obj =
        objects[uniform_index(text_rng, static_cast<std::uint64_t>(n_obj))];
    const std::string verb = verbs[static_cast<size_t>(e_lat[si])];
    const std::string marker_tok = "tag" + std::to_string(assign.marker[si]);
    if (spec.task == TaskType::Count) {
      e.question = "how many times did the " + subj + " " + verb + " the " +
                   obj + " " + marker_tok;
      e.answer = 1 + answers[si];  // count value in [1, n_counts]
    } else {
      e.question =
          "did the " + subj + " " + verb + " the " + obj + " " + marker_tok;
      e.answer = answers[si];
      if (spec.task == TaskType::MultiChoice) e.choices = choice_names;
    }

    // frame-level appearance with a possible clip remainder, then segmented
    const int extra =
        static_cast<int>(uniform_index(feat_rng, static_cast<std::uint64_t>(spec.n_clips)));
    const Eigen::Index frames =
        static_cast<Eigen::Index>(spec.n_clips) * spec.t_frames + extra;
    Matf app_frames(frames, spec.d_app_raw);
    for (Eigen::Index k = 0; k < app_frames.size(); ++k)
      app_frames.data()[k] =
          static_cast<float>(gaussian(feat_rng) * spec.noise_scale);
    Matf motion(spec.n_clips, spec.d_mot_raw);
    for (Eigen::Index k = 0; k < motion.size(); ++k)
      motion.data()[k] =
          static_cast<float>(gaussian(feat_rng) * spec.noise_scale);
    const int v = v_lat[si];
    app_frames.middleCols(static_cast<Eigen::Index>(v) * block_a, block_a).array() += 1.0f;
    motion.middleCols(static_cast<Eigen::Index>(v) * block_m, block_m).array() += 1.0f;

    FeatureRecord rec;
    rec.n_clips = spec.n_clips;
    rec.t_frames = spec.t_frames;
    rec.appearance = visual::segment_clips(app_frames, spec.n_clips);
    rec.motion = std::move(motion);

    e.features_path = "features/" + e.id + ".cmfb";
    write_feature_file((fs::path(out_dir) / e.features_path).string(), rec);
    m.entries.push_back(std::move(e));
  }

  save_manifest(m, (fs::path(out_dir) / "manifest.json").string());
}

}  // namespace cvqa::data
