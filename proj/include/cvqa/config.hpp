#pragma once

// Run configuration: JSON load/save, dotted-key overrides, validation, a
// stable fingerprint for checkpoint compatibility, and the named ablation
// variants.

#include "cvqa/feature_store.hpp"
#include "cvqa/model.hpp"
#include "cvqa/types.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

namespace cvqa::train {

enum class PriorMode { Structural, PriorWeighted };

inline std::string to_string(PriorMode m) {
  return m == PriorMode::Structural ? "structural" : "prior_weighted";
}

inline PriorMode prior_mode_from_string(const std::string& s) {
  if (s == "structural") return PriorMode::Structural;
  if (s == "prior_weighted") return PriorMode::PriorWeighted;
  throw ConfigError("unknown prior_mode: " + s);
}

struct TrainConfig {
  Eigen::Index d = 512;
  int heads = 8;
  int depth = 3;        // transformer blocks per stack
  int graph_depth = 1;  // fusion graph layers
  int codebook = 512;   // dictionary rows per visual modality
  int text_layers = 1;
  double dropout = 0.15;
  int batch_size = 64;
  double lr = 2e-4;
  int epochs = 50;
  double clip_norm = 0.0;  // 0 disables gradient clipping
  std::uint64_t seed = 1;
  data::TaskType task_type = data::TaskType::OpenEnded;
  PriorMode prior_mode = PriorMode::Structural;
  bool share_streams = true;
  model::AblationSpec ablation;
};

inline void validate(const TrainConfig& c) {
  CVQA_REQUIRE(c.d >= 1, ConfigError, "d must be positive");
  CVQA_REQUIRE(c.heads >= 1, ConfigError, "heads must be positive");
  CVQA_REQUIRE(c.d % c.heads == 0, ConfigError, "heads must divide d");
  CVQA_REQUIRE(c.depth >= 1, ConfigError, "depth must be positive");
  CVQA_REQUIRE(c.graph_depth >= 0, ConfigError, "graph_depth must be >= 0");
  CVQA_REQUIRE(c.codebook >= 1, ConfigError, "codebook must be positive");
  CVQA_REQUIRE(c.text_layers >= 1, ConfigError, "text_layers must be positive");
  CVQA_REQUIRE(c.dropout >= 0.0 && c.dropout < 1.0, ConfigError,
               "dropout must lie in [0, 1)");
  CVQA_REQUIRE(c.batch_size >= 1, ConfigError, "batch_size must be positive");
  CVQA_REQUIRE(c.lr > 0.0, ConfigError, "lr must be positive");
  CVQA_REQUIRE(c.epochs >= 1, ConfigError, "epochs must be positive");
  CVQA_REQUIRE(c.clip_norm >= 0.0, ConfigError, "clip_norm must be >= 0");
}

inline model::ModelHyper hyper_from(const TrainConfig& c) {
  model::ModelHyper h;
  h.d = c.d;
  h.heads = c.heads;
  h.depth = c.depth;
  h.graph_depth = c.graph_depth;
  h.codebook = c.codebook;
  h.text_layers = c.text_layers;
  h.share_streams = c.share_streams;
  h.prior_weighted = c.prior_mode == PriorMode::PriorWeighted;
  h.ablation = c.ablation;
  return h;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return nlohmann::json{
      {"format", "cvqa.config"},
      {"version", 1},
      {"d", c.d},
      {"heads", c.heads},
      {"depth", c.depth},
      {"graph_depth", c.graph_depth},
      {"codebook", c.codebook},
      {"text_layers", c.text_layers},
      {"dropout", c.dropout},
      {"batch_size", c.batch_size},
      {"lr", c.lr},
      {"epochs", c.epochs},
      {"clip_norm", c.clip_norm},
      {"seed", c.seed},
      {"task_type", data::to_string(c.task_type)},
      {"prior_mode", to_string(c.prior_mode)},
      {"share_streams", c.share_streams},
      {"ablation",
       {{"disable_hsrp", c.ablation.disable_hsrp},
        {"disable_lbci", c.ablation.disable_lbci},
        {"disable_vfci", c.ablation.disable_vfci},
        {"disable_cvlr", c.ablation.disable_cvlr},
        {"disable_sge", c.ablation.disable_sge},
        {"disable_alff", c.ablation.disable_alff}}}};
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known = {
      "format",     "version",    "d",         "heads",       "depth",
      "graph_depth", "codebook",  "text_layers", "dropout",   "batch_size",
      "lr",         "epochs",     "clip_norm", "seed",        "task_type",
      "prior_mode", "share_streams", "ablation"};
  static const std::vector<std::string> known_flags = {
      "disable_hsrp", "disable_lbci", "disable_vfci",
      "disable_cvlr", "disable_sge",  "disable_alff"};
  CVQA_REQUIRE(j.is_object(), ConfigError, "config must be a JSON object");
  for (const auto& [key, _] : j.items())
    CVQA_REQUIRE(std::find(known.begin(), known.end(), key) != known.end(),
                 ConfigError, "unknown config key: " + key);
  if (j.contains("format"))
    CVQA_REQUIRE(j["format"] == "cvqa.config", ConfigError,
                 "not a run config");
  if (j.contains("version"))
    CVQA_REQUIRE(j["version"] == 1, ConfigError,
                 "unsupported config version");
  TrainConfig c;
  try {
    c.d = j.value("d", c.d);
    c.heads = j.value("heads", c.heads);
    c.depth = j.value("depth", c.depth);
    c.graph_depth = j.value("graph_depth", c.graph_depth);
    c.codebook = j.value("codebook", c.codebook);
    c.text_layers = j.value("text_layers", c.text_layers);
    c.dropout = j.value("dropout", c.dropout);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.epochs = j.value("epochs", c.epochs);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.seed = j.value("seed", c.seed);
    if (j.contains("task_type"))
      c.task_type = data::task_from_string(j["task_type"].get<std::string>());
    if (j.contains("prior_mode"))
      c.prior_mode = prior_mode_from_string(j["prior_mode"].get<std::string>());
    c.share_streams = j.value("share_streams", c.share_streams);
    if (j.contains("ablation")) {
      const auto& a = j["ablation"];
      CVQA_REQUIRE(a.is_object(), ConfigError, "ablation must be an object");
      for (const auto& [key, _] : a.items())
        CVQA_REQUIRE(std::find(known_flags.begin(), known_flags.end(), key) !=
                         known_flags.end(),
                     ConfigError, "unknown ablation key: " + key);
      c.ablation.disable_hsrp = a.value("disable_hsrp", false);
      c.ablation.disable_lbci = a.value("disable_lbci", false);
      c.ablation.disable_vfci = a.value("disable_vfci", false);
      c.ablation.disable_cvlr = a.value("disable_cvlr", false);
      c.ablation.disable_sge = a.value("disable_sge", false);
      c.ablation.disable_alff = a.value("disable_alff", false);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config field error: " + std::string(e.what()));
  }
  validate(c);
  return c;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream is(path);
  CVQA_REQUIRE(is.good(), IoError, "cannot open config: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
  return config_from_json(j);
}

inline void save_config(const TrainConfig& c, const std::string& path) {
  std::ofstream os(path);
  CVQA_REQUIRE(os.good(), IoError, "cannot open for write: " + path);
  os << to_json(c).dump(2) << "\n";
  CVQA_REQUIRE(os.good(), IoError, "write failed: " + path);
}

namespace detail {

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("expected a boolean for " + key + ", got '" + v + "'");
}

template <class T>
T parse_number(const std::string& v, const std::string& key) {
  T out;
  std::size_t used = 0;
  try {
    if constexpr (std::is_same_v<T, double>)
      out = std::stod(v, &used);
    else if constexpr (std::is_same_v<T, std::uint64_t>)
      out = std::stoull(v, &used);
    else
      out = static_cast<T>(std::stoll(v, &used));
  } catch (const std::exception&) {
    throw ConfigError("expected a number for " + key + ", got '" + v + "'");
  }
  CVQA_REQUIRE(used == v.size(), ConfigError,
               "trailing characters in value for " + key + ": '" + v + "'");
  return out;
}

}  // namespace detail

// Applies one dotted-key override ("heads=4", "ablation.disable_sge=true").
inline void apply_override(TrainConfig& c, const std::string& key,
                           const std::string& value) {
  if (key == "d") c.d = detail::parse_number<Eigen::Index>(value, key);
  else if (key == "heads") c.heads = detail::parse_number<int>(value, key);
  else if (key == "depth") c.depth = detail::parse_number<int>(value, key);
  else if (key == "graph_depth")
    c.graph_depth = detail::parse_number<int>(value, key);
  else if (key == "codebook")
    c.codebook = detail::parse_number<int>(value, key);
  else if (key == "text_layers")
    c.text_layers = detail::parse_number<int>(value, key);
  else if (key == "dropout")
    c.dropout = detail::parse_number<double>(value, key);
  else if (key == "batch_size")
    c.batch_size = detail::parse_number<int>(value, key);
  else if (key == "lr") c.lr = detail::parse_number<double>(value, key);
  else if (key == "epochs") c.epochs = detail::parse_number<int>(value, key);
  else if (key == "clip_norm")
    c.clip_norm = detail::parse_number<double>(value, key);
  else if (key == "seed")
    c.seed = detail::parse_number<std::uint64_t>(value, key);
  else if (key == "task_type") c.task_type = data::task_from_string(value);
  else if (key == "prior_mode") c.prior_mode = prior_mode_from_string(value);
  else if (key == "share_streams")
    c.share_streams = detail::parse_bool(value, key);
  else if (key == "ablation.disable_hsrp")
    c.ablation.disable_hsrp = detail::parse_bool(value, key);
  else if (key == "ablation.disable_lbci")
    c.ablation.disable_lbci = detail::parse_bool(value, key);
  else if (key == "ablation.disable_vfci")
    c.ablation.disable_vfci = detail::parse_bool(value, key);
  else if (key == "ablation.disable_cvlr")
    c.ablation.disable_cvlr = detail::parse_bool(value, key);
  else if (key == "ablation.disable_sge")
    c.ablation.disable_sge = detail::parse_bool(value, key);
  else if (key == "ablation.disable_alff")
    c.ablation.disable_alff = detail::parse_bool(value, key);
  else
    throw ConfigError("unknown config key: " + key);
}

// Everything except `epochs` contributes, so a run can be resumed with a
// longer horizon but never with a different model, schedule, or seed.
inline std::uint64_t fingerprint(const TrainConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("epochs");
  return fnv1a64(j.dump());
}

// Named wirings for the comparison harness: the full model plus the six
// single-stage removals.
inline const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names = {
      "full",    "no_hsrp", "no_lbci", "no_vfci",
      "no_cvlr", "no_sge",  "no_alff"};
  return names;
}

inline model::AblationSpec ablation_from_name(const std::string& name) {
  model::AblationSpec a;
  if (name == "full") return a;
  if (name == "no_hsrp") { a.disable_hsrp = true; return a; }
  if (name == "no_lbci") { a.disable_lbci = true; return a; }
  if (name == "no_vfci") { a.disable_vfci = true; return a; }
  if (name == "no_cvlr") { a.disable_cvlr = true; return a; }
  if (name == "no_sge") { a.disable_sge = true; return a; }
  if (name == "no_alff") { a.disable_alff = true; return a; }
  throw ValidationError("unknown ablation variant: " + name);
}

}  // namespace cvqa::train
