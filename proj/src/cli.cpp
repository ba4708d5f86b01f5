#include "cvqa/cli.hpp"

#include "cvqa/config.hpp"
#include "cvqa/gradsuite.hpp"
#include "cvqa/intervention.hpp"
#include "cvqa/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

namespace cvqa::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- synthetic-task spec file ----

json genspec_to_json(const data::SyntheticTaskSpec& s) {
  return {{"task_type", data::to_string(s.task)},
          {"num_samples", s.num_samples},
          {"answer_space", s.answer_space},
          {"bias_strength", s.bias_strength},
          {"train_ratio", s.train_ratio},
          {"iid_ratio", s.iid_ratio},
          {"anti_ratio", s.anti_ratio},
          {"n_clips", s.n_clips},
          {"t_frames", s.t_frames},
          {"d_app_raw", s.d_app_raw},
          {"d_mot_raw", s.d_mot_raw},
          {"object_variety", s.object_variety},
          {"noise_scale", s.noise_scale},
          {"seed", s.seed}};
}

data::SyntheticTaskSpec genspec_from_json(const json& j) {
  static const std::vector<std::string> known = {
      "task_type",   "num_samples", "answer_space", "bias_strength",
      "train_ratio", "iid_ratio",   "anti_ratio",   "n_clips",
      "t_frames",    "d_app_raw",   "d_mot_raw",    "object_variety",
      "noise_scale", "seed"};
  CVQA_REQUIRE(j.is_object(), ConfigError, "task spec must be a JSON object");
  for (const auto& [key, _] : j.items())
    CVQA_REQUIRE(std::find(known.begin(), known.end(), key) != known.end(),
                 ConfigError, "unknown task spec key: " + key);
  data::SyntheticTaskSpec s;
  try {
    if (j.contains("task_type"))
      s.task = data::task_from_string(j["task_type"].get<std::string>());
    s.num_samples = j.value("num_samples", s.num_samples);
    s.answer_space = j.value("answer_space", s.answer_space);
    s.bias_strength = j.value("bias_strength", s.bias_strength);
    s.train_ratio = j.value("train_ratio", s.train_ratio);
    s.iid_ratio = j.value("iid_ratio", s.iid_ratio);
    s.anti_ratio = j.value("anti_ratio", s.anti_ratio);
    s.n_clips = j.value("n_clips", s.n_clips);
    s.t_frames = j.value("t_frames", s.t_frames);
    s.d_app_raw = j.value("d_app_raw", s.d_app_raw);
    s.d_mot_raw = j.value("d_mot_raw", s.d_mot_raw);
    s.object_variety = j.value("object_variety", s.object_variety);
    s.noise_scale = j.value("noise_scale", s.noise_scale);
    s.seed = j.value("seed", s.seed);
  } catch (const json::exception& e) {
    throw ConfigError("task spec field error: " + std::string(e.what()));
  }
  return s;
}

void genspec_override(data::SyntheticTaskSpec& s, const std::string& key,
                      const std::string& value) {
  json j = genspec_to_json(s);
  CVQA_REQUIRE(j.contains(key), ConfigError, "unknown task spec key: " + key);
  if (key == "task_type") {
    j[key] = value;
  } else if (key == "bias_strength" || key == "train_ratio" ||
             key == "iid_ratio" || key == "anti_ratio" ||
             key == "noise_scale") {
    j[key] = train::detail::parse_number<double>(value, key);
  } else {
    j[key] = train::detail::parse_number<long long>(value, key);
  }
  s = genspec_from_json(j);
}

// ---- helpers ----

std::pair<std::string, std::string> split_kv(const std::string& kv) {
  const auto eq = kv.find('=');
  CVQA_REQUIRE(eq != std::string::npos && eq > 0, ConfigError,
               "override must be key=value: '" + kv + "'");
  return {kv.substr(0, eq), kv.substr(eq + 1)};
}

void write_json_file(const json& j, const std::string& path) {
  std::ofstream os(path);
  CVQA_REQUIRE(os.good(), IoError, "cannot open for write: " + path);
  os << j.dump(2) << "\n";
  CVQA_REQUIRE(os.good(), IoError, "write failed: " + path);
}

void write_snapshot(const std::string& out_dir, json j) {
  write_json_file(std::move(j), (fs::path(out_dir) / "resolved_config.json").string());
}

std::string ensure_out_dir(const std::string& out) {
  fs::create_directories(out);
  return out;
}

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

// accepts either a bare config file or a resolved_config.json snapshot
// from an earlier run (config nested under "config")
train::TrainConfig load_config_or_snapshot(const std::string& path) {
  std::ifstream is(path);
  CVQA_REQUIRE(is.good(), IoError, "cannot open config: " + path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
  if (j.is_object() && j.contains("command")) {
    CVQA_REQUIRE(j.contains("config"), ConfigError,
                 "snapshot " + path + " records no training config");
    return train::config_from_json(j.at("config"));
  }
  return train::config_from_json(j);
}

train::TrainConfig resolve_config(const CommonOpts& o) {
  train::TrainConfig cfg;
  if (!o.config_path.empty()) cfg = load_config_or_snapshot(o.config_path);
  for (const auto& kv : o.sets) {
    const auto [k, v] = split_kv(kv);
    train::apply_override(cfg, k, v);
  }
  if (o.seed_given) cfg.seed = o.seed;
  train::validate(cfg);
  return cfg;
}

json matrix_to_json(const Mat& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

json eval_to_json(const train::EvalResult& e) {
  return {{"kind", e.kind},
          {"metric", e.metric},
          {"mean_loss", e.mean_loss},
          {"count", e.count}};
}

// evaluate every non-empty split with the current parameters
json eval_all_splits(const train::Trainer<double>& t,
                     const data::DatasetManifest& manifest) {
  json out = json::object();
  for (const std::string split : {"train", "test_iid", "test_anti"})
    if (!manifest.split_indices(split).empty())
      out[split] = eval_to_json(t.evaluate_split(split));
  return out;
}

// ---- subcommand handlers ----

int cmd_gen_data(const std::string& spec_path,
                 const std::vector<std::string>& sets, bool seed_given,
                 std::uint64_t seed, const std::string& out) {
  data::SyntheticTaskSpec spec;
  if (!spec_path.empty()) {
    std::ifstream is(spec_path);
    CVQA_REQUIRE(is.good(), IoError, "cannot open task spec: " + spec_path);
    json j;
    try {
      is >> j;
    } catch (const json::exception& e) {
      throw ConfigError("task spec is not valid JSON: " + std::string(e.what()));
    }
    spec = genspec_from_json(j);
  }
  for (const auto& kv : sets) {
    const auto [k, v] = split_kv(kv);
    genspec_override(spec, k, v);
  }
  if (seed_given) spec.seed = seed;
  ensure_out_dir(out);
  data::generate_synthetic(spec, out);
  write_snapshot(out, {{"command", "gen-data"}, {"spec", genspec_to_json(spec)}});
  const auto m = data::load_manifest((fs::path(out) / "manifest.json").string());
  std::printf("wrote %zu samples (%zu train) to %s\n", m.entries.size(),
              m.split_indices("train").size(), out.c_str());
  return 0;
}

int cmd_build_vocab(const std::string& data_dir, const std::string& out) {
  const auto manifest =
      data::load_manifest((fs::path(data_dir) / "manifest.json").string());
  std::vector<lang::QuestionBundle> bundles;
  for (const auto& e : manifest.entries)
    if (e.split == "train") bundles.push_back(lang::bundle_question(e.question));
  CVQA_REQUIRE(!bundles.empty(), ValidationError, "train split is empty");
  const auto vocab = intervention::build_confounder_vocabulary(bundles);
  ensure_out_dir(out);
  const auto path = (fs::path(out) / "vocab.json").string();
  intervention::save_vocabulary(vocab, path);
  write_snapshot(out, {{"command", "build-vocab"}, {"data", data_dir}});
  std::size_t total = 0;
  for (size_t k = 0; k < vocab.sets.size(); ++k) total += vocab.sets[k].size();
  std::printf("wrote %zu confounder phrases over %zu sets to %s\n", total,
              vocab.sets.size(), path.c_str());
  return 0;
}

int cmd_build_codebook(const std::string& data_dir, const CommonOpts& o,
                       const std::string& out) {
  const auto cfg = resolve_config(o);
  CVQA_REQUIRE(cfg.ablation.vfci_on(), ConfigError,
               "the chosen wiring has no feature dictionaries");
  const auto manifest =
      data::load_manifest((fs::path(data_dir) / "manifest.json").string());
  CVQA_REQUIRE(cfg.task_type == manifest.task, ValidationError,
               "config task_type does not match the dataset");
  nn::ParameterStore<double> ps(cfg.seed);
  auto model = model::VqaModel<double>::create(ps, train::hyper_from(cfg), manifest);
  model.init_codebooks(manifest, data_dir, cfg.seed);
  ensure_out_dir(out);
  const auto path = (fs::path(out) / "codebooks.json").string();
  write_json_file(
      {{"format", "cvqa.codebooks"},
       {"version", 1},
       {"d", cfg.d},
       {"rows", cfg.codebook},
       {"appearance", matrix_to_json(model.front_app->codebook->value)},
       {"motion", matrix_to_json(model.front_mot->codebook->value)}},
      path);
  write_snapshot(out, {{"command", "build-codebook"},
                       {"data", data_dir},
                       {"config", train::to_json(cfg)}});
  std::printf("wrote %d x %lld dictionaries to %s\n", cfg.codebook,
              static_cast<long long>(cfg.d), path.c_str());
  return 0;
}

int cmd_train(const std::string& data_dir, const CommonOpts& o,
              const std::string& out) {
  const auto cfg = resolve_config(o);
  const auto manifest =
      data::load_manifest((fs::path(data_dir) / "manifest.json").string());
  ensure_out_dir(out);
  write_snapshot(out, {{"command", "train"},
                       {"data", data_dir},
                       {"config", train::to_json(cfg)}});
  train::Trainer<double> t(cfg, manifest, data_dir);
  const std::string kind =
      cfg.task_type == data::TaskType::Count ? "mse" : "accuracy";
  while (t.epoch() < cfg.epochs) {
    const auto row = t.run_epoch();
    std::printf("epoch %3d  loss %.6f  lr %.3g  %s[%s] %.4f\n", row.epoch,
                row.loss, row.lr, t.validation_split().c_str(), kind.c_str(),
                row.metric);
  }
  train::write_trace_csv((fs::path(out) / "trace.csv").string(), t.trace());
  t.save_checkpoint((fs::path(out) / "checkpoint.cmck").string());
  const bool used_best = t.restore_best();
  json metrics = {{"metric_kind",
                   cfg.task_type == data::TaskType::Count ? "mse" : "accuracy"},
                  {"used_best", used_best},
                  {"splits", eval_all_splits(t, manifest)}};
  write_json_file(metrics, (fs::path(out) / "metrics.json").string());
  std::printf("artifacts in %s: trace.csv, checkpoint.cmck, metrics.json\n",
              out.c_str());
  return 0;
}

int cmd_eval(const std::string& data_dir, const std::string& checkpoint,
             const CommonOpts& o, const std::string& split,
             const std::string& out) {
  const auto cfg = resolve_config(o);
  const auto manifest =
      data::load_manifest((fs::path(data_dir) / "manifest.json").string());
  train::Trainer<double> t(cfg, manifest, data_dir);
  t.load_checkpoint(checkpoint);
  const bool used_best = t.restore_best();
  const auto r = t.evaluate_split(split);
  ensure_out_dir(out);
  write_snapshot(out, {{"command", "eval"},
                       {"data", data_dir},
                       {"checkpoint", checkpoint},
                       {"split", split},
                       {"config", train::to_json(cfg)}});
  json metrics = eval_to_json(r);
  metrics["split"] = split;
  metrics["used_best"] = used_best;
  write_json_file(metrics, (fs::path(out) / "metrics.json").string());
  std::printf("%s %s %.4f over %d samples (mean loss %.6f)\n", split.c_str(),
              r.kind.c_str(), r.metric, r.count, r.mean_loss);
  return 0;
}

int cmd_ablate(const std::string& data_dir, const CommonOpts& o,
               const std::string& variant, const std::string& out) {
  const auto base = resolve_config(o);
  const auto manifest =
      data::load_manifest((fs::path(data_dir) / "manifest.json").string());
  std::vector<std::string> variants;
  if (variant.empty())
    variants = train::variant_names();
  else
    variants.push_back(variant);
  ensure_out_dir(out);
  write_snapshot(out, {{"command", "ablate"},
                       {"data", data_dir},
                       {"variant", variant.empty() ? "all" : variant},
                       {"config", train::to_json(base)}});

  struct Row {
    std::string name;
    std::size_t params;
    json splits;
  };
  std::vector<Row> rows;
  for (const auto& name : variants) {
    train::TrainConfig cfg = base;
    cfg.ablation = train::ablation_from_name(name);
    train::validate(cfg);
    train::Trainer<double> t(cfg, manifest, data_dir);
    t.run();
    t.restore_best();
    train::write_trace_csv((fs::path(out) / ("trace_" + name + ".csv")).string(),
                           t.trace());
    rows.push_back({name, t.params().total_size(), eval_all_splits(t, manifest)});
  }

  const std::vector<std::string> splits = {"train", "test_iid", "test_anti"};
  std::ofstream csv((fs::path(out) / "ablation.csv").string());
  CVQA_REQUIRE(csv.good(), IoError, "cannot write the comparison table");
  csv << "variant,params";
  std::printf("%-10s %10s", "variant", "params");
  for (const auto& s : splits) {
    csv << "," << s;
    std::printf(" %10s", s.c_str());
  }
  csv << "\n";
  std::printf("\n");
  for (const auto& r : rows) {
    csv << r.name << "," << r.params;
    std::printf("%-10s %10zu", r.name.c_str(), r.params);
    for (const auto& s : splits) {
      if (r.splits.contains(s)) {
        const double m = r.splits[s]["metric"].get<double>();
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.4f", m);
        csv << "," << buf;
        std::printf(" %10s", buf);
      } else {
        csv << ",";
        std::printf(" %10s", "-");
      }
    }
    csv << "\n";
    std::printf("\n");
  }
  CVQA_REQUIRE(csv.good(), IoError, "write failed: ablation.csv");
  std::printf("comparison table in %s/ablation.csv\n", out.c_str());
  return 0;
}

int cmd_gradcheck(const std::string& component, std::uint64_t seed,
                  const std::string& out) {
  std::vector<train::GradCheckReport> reports;
  if (component.empty())
    reports = train::run_grad_suite(seed);
  else
    reports.push_back(train::grad_check(component, seed));
  bool ok = true;
  std::printf("%-22s %12s %8s %10s  %s\n", "component", "max_rel_err",
              "coords", "tolerance", "status");
  for (const auto& r : reports) {
    std::printf("%-22s %12.3e %8d %10.0e  %s\n", r.component.c_str(),
                r.max_rel_err, r.coords_checked, r.tolerance,
                r.passed ? "pass" : "FAIL");
    ok = ok && r.passed;
  }
  if (!out.empty()) {
    ensure_out_dir(out);
    std::ofstream csv((fs::path(out) / "gradcheck.csv").string());
    csv << "component,max_rel_err,coords,tolerance,passed\n";
    char buf[160];
    for (const auto& r : reports) {
      std::snprintf(buf, sizeof(buf), "%s,%.17g,%d,%g,%d\n",
                    r.component.c_str(), r.max_rel_err, r.coords_checked,
                    r.tolerance, r.passed ? 1 : 0);
      csv << buf;
    }
    write_snapshot(out, {{"command", "gradcheck"},
                         {"component", component.empty() ? "all" : component},
                         {"seed", seed}});
  }
  if (!ok) {
    std::cerr << "error[numeric]: gradient check failed\n";
    return 1;
  }
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"event-level video question answering workbench"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset");
  std::string gen_spec, gen_out;
  std::vector<std::string> gen_sets;
  std::uint64_t gen_seed = 0;
  gen->add_option("--spec", gen_spec, "task spec JSON file");
  gen->add_option("--set", gen_sets, "spec override key=value")->take_all();
  gen->add_option("--seed", gen_seed, "master seed");
  gen->add_option("--out", gen_out, "output directory")->required();

  // shared config surface for the model commands
  struct SubOpts {
    CLI::App* sub = nullptr;
    std::string data, out;
    CommonOpts common;
  };
  auto add_config_opts = [](CLI::App* sub, SubOpts& o, bool needs_out) {
    o.sub = sub;
    sub->add_option("data", o.data, "dataset directory (holds manifest.json)")
        ->required();
    sub->add_option("--config", o.common.config_path, "run config JSON file");
    sub->add_option("--set", o.common.sets, "config override key=value")
        ->take_all();
    sub->add_option("--seed", o.common.seed, "master seed");
    auto* out = sub->add_option("--out", o.out, "output directory");
    if (needs_out) out->required();
  };

  SubOpts vocab_o, code_o, train_o, eval_o, ablate_o;
  add_config_opts(app.add_subcommand("build-vocab",
                                     "count confounder phrases on the train split"),
                  vocab_o, true);
  add_config_opts(app.add_subcommand("build-codebook",
                                     "cluster projected train features"),
                  code_o, true);
  add_config_opts(app.add_subcommand("train", "optimize a model"), train_o,
                  true);
  add_config_opts(app.add_subcommand("eval", "score a checkpoint on a split"),
                  eval_o, true);
  std::string eval_checkpoint, eval_split = "test_iid";
  eval_o.sub->add_option("checkpoint", eval_checkpoint, "checkpoint file")
      ->required();
  eval_o.sub->add_option("--split", eval_split, "split to score");
  add_config_opts(app.add_subcommand(
                      "ablate", "train every wiring and compare the splits"),
                  ablate_o, true);
  std::string ablate_variant;
  ablate_o.sub->add_option("--variant", ablate_variant,
                           "run a single named wiring");

  // gradcheck
  auto* grad = app.add_subcommand("gradcheck",
                                  "finite-difference checks per component");
  std::string grad_component, grad_out;
  std::uint64_t grad_seed = 1;
  grad->add_option("component", grad_component, "component name (default all)");
  grad->add_option("--seed", grad_seed, "master seed");
  grad->add_option("--out", grad_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 2;
  }

  auto common = [&](SubOpts& o) {
    o.common.seed_given = o.sub->count("--seed") > 0;
    return o.common;
  };

  try {
    if (gen->parsed())
      return cmd_gen_data(gen_spec, gen_sets, gen->count("--seed") > 0,
                          gen_seed, gen_out);
    if (vocab_o.sub->parsed()) return cmd_build_vocab(vocab_o.data, vocab_o.out);
    if (code_o.sub->parsed())
      return cmd_build_codebook(code_o.data, common(code_o), code_o.out);
    if (train_o.sub->parsed())
      return cmd_train(train_o.data, common(train_o), train_o.out);
    if (eval_o.sub->parsed())
      return cmd_eval(eval_o.data, eval_checkpoint, common(eval_o), eval_split,
                      eval_o.out);
    if (ablate_o.sub->parsed())
      return cmd_ablate(ablate_o.data, common(ablate_o), ablate_variant,
                        ablate_o.out);
    if (grad->parsed()) return cmd_gradcheck(grad_component, grad_seed, grad_out);
  } catch (const Error& e) {
    std::cerr << "error[" << e.category << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << "\n";
    return 1;
  }
  std::cerr << app.help();
  return 2;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("cvqa");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace cvqa::cli
