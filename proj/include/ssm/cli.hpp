// Copyright 2026 The SSM Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ssm/trainer.hpp"

namespace ssm::cli {

namespace fs = std::filesystem;
using trainer::ExperimentConfig;

/// Process exit codes.
///   0  success
///   1  validation failure: bad arguments or config, existing run directory
///      without --force, or a gradient check above tolerance
///   2  runtime failure: I/O, numerical breakdown, anything unexpected
enum ExitCode : int { kSuccess = 0, kValidation = 1, kRuntime = 2 };

// ---------------------------------------------------------------------------
// Mapping heatmaps

/// A labeled matrix as stored in a heatmap CSV.
struct LabeledMatrix {
  std::string corner;
  std::vector<std::string> rows;
  std::vector<std::string> cols;
  Tensor values;
};

inline std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string to_csv(const LabeledMatrix& m) {
  std::string out = m.corner;
  for (const auto& c : m.cols) out += "," + c;
  out += "\n";
  for (std::size_t r = 0; r < m.rows.size(); ++r) {
    out += m.rows[r];
    for (std::size_t c = 0; c < m.cols.size(); ++c) out += "," + format_value(m.values(r, c));
    out += "\n";
  }
  return out;
}

inline LabeledMatrix parse_csv(const std::string& text) {
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    return cells;
  };
  std::stringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty heatmap CSV");
  LabeledMatrix m;
  auto header = split(line);
  m.corner = header.front();
  m.cols.assign(header.begin() + 1, header.end());
  std::vector<double> values;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != m.cols.size() + 1) throw IoError("heatmap CSV row '" + cells.front() + "' has wrong width");
    m.rows.push_back(cells.front());
    for (std::size_t c = 1; c < cells.size(); ++c) values.push_back(std::stod(cells[c]));
  }
  m.values = Tensor(Shape{m.rows.size(), m.cols.size()}, std::move(values));
  return m;
}

inline std::vector<std::string> au_labels(const std::vector<int>& aus) {
  std::vector<std::string> out;
  for (int id : aus) out.push_back("AU" + std::to_string(id));
  return out;
}

struct HeatmapPair {
  LabeledMatrix au_to_exp;  // K x M
  LabeledMatrix exp_to_au;  // M x K
};

/// Mixing weights row_softmax(W / tau_m) of both mapping matrices, or the
/// raw matrices when `pre_softmax` is set.
inline HeatmapPair mapping_heatmaps(const dpm::DpmModule& m, const model::ModelConfig& config, bool pre_softmax) {
  if (!m.has_mapping_matrices()) {
    throw ConfigError("dpm mode '" + dpm::to_string(config.dpm.mode) + "' has no mapping matrices to export");
  }
  const auto aus = au_labels(config.aus);
  HeatmapPair out;
  out.au_to_exp = {"expression", config.expressions, aus, pre_softmax ? m.w_au_to_exp() : m.au_to_exp_mixing()};
  out.exp_to_au = {"au", aus, config.expressions, pre_softmax ? m.w_exp_to_au() : m.exp_to_au_mixing()};
  return out;
}

/// Frobenius distance between W_exp_to_au and the transpose of W_au_to_exp.
inline double transpose_distance(const dpm::DpmModule& m) {
  return (m.w_exp_to_au().mat() - m.w_au_to_exp().mat().transpose()).norm();
}

// ---------------------------------------------------------------------------
// Run directories

/// Collects a run's artifacts in a sibling staging directory and moves it
/// into place only when the command succeeds. The staging directory is
/// removed if the run is abandoned.
class RunDirectory {
 public:
  RunDirectory(fs::path target, bool force) : target_(std::move(target)), force_(force) {
    if (target_.empty()) throw ConfigError("an output directory is required (--out)");
    if (fs::exists(target_) && !force_) {
      throw ConfigError("output directory " + target_.string() + " already exists; pass --force to replace it");
    }
    staging_ = target_;
    staging_ += ".partial";
    fs::remove_all(staging_);
    fs::create_directories(staging_);
  }

  RunDirectory(const RunDirectory&) = delete;
  RunDirectory& operator=(const RunDirectory&) = delete;

  ~RunDirectory() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(staging_, ec);
    }
  }

  /// Writes `bytes` at a path relative to the run directory.
  void write(const std::string& relative, std::string_view bytes) {
    const fs::path p = staging_ / relative;
    fs::create_directories(p.parent_path());
    io::write_file_atomic(p, bytes);
    files_.push_back(relative);
  }

  void write_json(const std::string& relative, const nlohmann::json& j) { write(relative, j.dump(2) + "\n"); }

  /// Writes the manifest and moves the directory into place.
  void commit(nlohmann::json manifest) {
    manifest["files"] = files_;
    io::write_file_atomic(staging_ / "manifest.json", manifest.dump(2) + "\n");
    if (fs::exists(target_)) fs::remove_all(target_);
    if (target_.has_parent_path()) fs::create_directories(target_.parent_path());
    fs::rename(staging_, target_);
    committed_ = true;
  }

 private:
  fs::path target_;
  fs::path staging_;
  bool force_;
  bool committed_ = false;
  std::vector<std::string> files_;
};

// ---------------------------------------------------------------------------
// Commands

struct Invocation {
  std::string subcommand;
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  int verbosity = 0;
  bool force = false;

  std::string data_path;
  std::string checkpoint_path;
  std::string grid = "component";
  std::size_t seed_count = 0;
  std::size_t workers = 1;
  bool pre_softmax = false;
  std::size_t clips = 2;
  std::size_t coordinates = 16;
};

/// Config from file (or defaults), with the seed taken from --seed, else
/// from SSM_SEED, else from the file.
inline ExperimentConfig load_config(const Invocation& inv) {
  ExperimentConfig c = inv.config_path.empty() ? trainer::default_config()
                                               : trainer::parse_config(io::read_file(inv.config_path));
  if (const char* env = std::getenv("SSM_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument("trailing characters");
      c.seed = v;
    } catch (const std::exception&) {
      throw ConfigError("SSM_SEED must be a non-negative integer, got '" + std::string(env) + "'");
    }
  }
  if (inv.seed) c.seed = *inv.seed;
  return c;
}

inline trainer::World load_or_generate_world(const ExperimentConfig& c, const Invocation& inv) {
  const trainer::SyntheticWorldSpec spec = c.resolved_world();
  if (!inv.data_path.empty()) return trainer::load_world(spec, inv.data_path);
  return trainer::generate_synthetic_world(spec, c.world_seed);
}

inline nlohmann::json base_manifest(const Invocation& inv, const ExperimentConfig& c) {
  nlohmann::json m{{"subcommand", inv.subcommand}, {"config", trainer::to_json(c)}};
  if (!inv.data_path.empty()) m["dataset"] = inv.data_path;
  if (!inv.checkpoint_path.empty()) m["checkpoint"] = inv.checkpoint_path;
  return m;
}

inline nlohmann::json summary_json(const trainer::RunState& s) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json j{{"variant", model::to_string(s.config.model.variant)},
                   {"seed", s.config.seed},
                   {"au", {{"avg_f1", opt(s.au_metrics.avg_f1)}}},
                   {"expression", {{"uar", opt(s.expression_metrics.uar)}, {"war", opt(s.expression_metrics.war)}}}};
  if (!s.curve.empty()) {
    j["final_loss"] = {{"total", s.curve.back().total},
                       {"expression", s.curve.back().expression},
                       {"au", s.curve.back().au}};
  }
  return j;
}

inline void write_metrics(RunDirectory& dir, const trainer::RunState& s) {
  dir.write_json("metrics/au.json", s.au_metrics);
  dir.write_json("metrics/expression.json", s.expression_metrics);
  dir.write_json("summary.json", summary_json(s));
}

inline void write_heatmaps(RunDirectory& dir, nlohmann::json& manifest, model::Model& net, bool pre_softmax) {
  const dpm::DpmModule* m = net.mapping();
  if (!m || !m->has_mapping_matrices()) return;
  const HeatmapPair post = mapping_heatmaps(*m, net.config(), false);
  dir.write("heatmaps/au_to_exp.csv", to_csv(post.au_to_exp));
  dir.write("heatmaps/exp_to_au.csv", to_csv(post.exp_to_au));
  if (pre_softmax) {
    const HeatmapPair raw = mapping_heatmaps(*m, net.config(), true);
    dir.write("heatmaps/au_to_exp.pre_softmax.csv", to_csv(raw.au_to_exp));
    dir.write("heatmaps/exp_to_au.pre_softmax.csv", to_csv(raw.exp_to_au));
  }
  manifest["mapping"] = {{"tau_m", net.config().dpm.tau_m}, {"transpose_frobenius_distance", transpose_distance(*m)}};
}

inline int cmd_gen_data(const Invocation& inv, std::ostream& out) {
  const ExperimentConfig c = load_config(inv);
  RunDirectory dir(inv.out_dir, inv.force);
  const trainer::World w = trainer::generate_synthetic_world(c.resolved_world(), c.world_seed);
  dir.write("dataset.ssmdata", io::encode_container(io::kDatasetMagic, trainer::dataset_blobs(w)));
  dir.write_json("config.json", trainer::to_json(c));
  nlohmann::json m = base_manifest(inv, c);
  m["counts"] = {{"au_train", w.au_train.size()},
                 {"au_test", w.au_test.size()},
                 {"expression_train", w.fe_train.size()},
                 {"expression_test", w.fe_test.size()}};
  dir.commit(m);
  out << "wrote " << inv.out_dir << "/dataset.ssmdata\n";
  return kSuccess;
}

inline int cmd_train(const Invocation& inv, std::ostream& out) {
  const ExperimentConfig c = load_config(inv);
  RunDirectory dir(inv.out_dir, inv.force);
  const trainer::World w = load_or_generate_world(c, inv);
  trainer::TrainOptions opts;
  if (inv.verbosity > 0) {
    opts.on_epoch = [&](std::size_t e, const trainer::EpochLoss& l) {
      out << "epoch " << e + 1 << "/" << c.epochs << "  loss " << l.total << " (expression " << l.expression
          << ", au " << l.au << ")\n";
    };
  }
  trainer::RunState s = trainer::train(c, w, opts);
  dir.write("checkpoint.ssmckpt", trainer::encode_checkpoint(s));
  dir.write_json("config.json", trainer::to_json(c));
  write_metrics(dir, s);
  std::string curve = "epoch,total,expression,au\n";
  for (std::size_t e = 0; e < s.curve.size(); ++e) {
    curve += std::to_string(e + 1) + "," + format_value(s.curve[e].total) + "," +
             format_value(s.curve[e].expression) + "," + format_value(s.curve[e].au) + "\n";
  }
  dir.write("loss_curve.csv", curve);
  nlohmann::json m = base_manifest(inv, c);
  write_heatmaps(dir, m, *s.model, inv.pre_softmax);
  dir.commit(m);
  out << summary_json(s).dump() << "\n";
  return kSuccess;
}

inline int cmd_evaluate(const Invocation& inv, std::ostream& out) {
  if (inv.checkpoint_path.empty()) throw ConfigError("evaluate needs --checkpoint");
  const ExperimentConfig c = load_config(inv);
  RunDirectory dir(inv.out_dir, inv.force);
  const trainer::World w = load_or_generate_world(c, inv);
  trainer::RunState s = trainer::load_checkpoint(c, inv.checkpoint_path);
  trainer::evaluate(s, w);
  write_metrics(dir, s);
  dir.write_json("config.json", trainer::to_json(c));
  dir.commit(base_manifest(inv, c));
  out << summary_json(s).dump() << "\n";
  return kSuccess;
}

/// The first `count` seeds of the config's list, extended with consecutive
/// integers when the list is shorter.
inline std::vector<std::uint64_t> ablation_seeds(const ExperimentConfig& c, std::size_t count) {
  std::vector<std::uint64_t> seeds = c.seeds;
  if (count == 0) return seeds;
  std::uint64_t next = seeds.empty() ? 1 : *std::max_element(seeds.begin(), seeds.end()) + 1;
  while (seeds.size() < count) seeds.push_back(next++);
  seeds.resize(count);
  return seeds;
}

inline int cmd_ablate(const Invocation& inv, std::ostream& out) {
  const ExperimentConfig c = load_config(inv);
  const trainer::Grid grid = trainer::parse_grid(inv.grid);
  RunDirectory dir(inv.out_dir, inv.force);
  const trainer::World w = load_or_generate_world(c, inv);
  const auto seeds = ablation_seeds(c, inv.seed_count);
  trainer::AblationOptions opts;
  opts.workers = inv.workers;
  if (inv.verbosity > 0) {
    opts.on_run = [&](const std::string& name, std::uint64_t seed, const trainer::RunState& r) {
      out << name << " seed " << seed << "  au f1 " << r.au_metrics.avg_f1.value_or(0.0) << "  uar "
          << r.expression_metrics.uar.value_or(0.0) << "\n";
    };
  }
  const auto results = trainer::ablation_suite(c, w, seeds, grid, opts);
  const std::string stem = "ablation_" + trainer::to_string(grid);
  dir.write_json(stem + ".json", trainer::ablation_table_json(grid, results));
  dir.write(stem + ".tsv", trainer::ablation_table_tsv(results));
  dir.write_json("config.json", trainer::to_json(c));
  nlohmann::json m = base_manifest(inv, c);
  m["grid"] = trainer::to_string(grid);
  m["seeds"] = seeds;
  dir.commit(m);
  out << trainer::ablation_table_tsv(results);
  return kSuccess;
}

inline int cmd_grad_check(const Invocation& inv, std::ostream& out) {
  const ExperimentConfig c = load_config(inv);
  const trainer::World w = load_or_generate_world(c, inv);
  GradCheckOptions opts;
  opts.max_coordinates = inv.coordinates;
  const GradCheckReport r = trainer::model_grad_check(c, w, inv.clips, opts);
  for (const auto& p : r.parameters) {
    out << p.name << "  coords " << p.count << "  max rel err " << p.max_rel_error << "\n";
  }
  out << "worst parameter: " << r.worst_parameter << "  max relative error " << r.max_rel_error << "  ("
      << (r.passed() ? "pass" : "FAIL") << ", tolerance " << r.tolerance << ")\n";
  if (!inv.out_dir.empty()) {
    RunDirectory dir(inv.out_dir, inv.force);
    nlohmann::json params = nlohmann::json::array();
    for (const auto& p : r.parameters) {
      params.push_back({{"name", p.name}, {"coordinates", p.count}, {"max_rel_error", p.max_rel_error}});
    }
    dir.write_json("grad_check.json", {{"parameters", params},
                                       {"worst_parameter", r.worst_parameter},
                                       {"max_rel_error", r.max_rel_error},
                                       {"tolerance", r.tolerance},
                                       {"passed", r.passed()}});
    dir.commit(base_manifest(inv, c));
  }
  return r.passed() ? kSuccess : kValidation;
}

inline int cmd_export_mapping(const Invocation& inv, std::ostream& out) {
  const ExperimentConfig c = load_config(inv);
  if (c.model.variant != model::Variant::ssm) throw ConfigError("export-mapping needs variant 'ssm'");
  RunDirectory dir(inv.out_dir, inv.force);
  trainer::RunState s;
  if (inv.checkpoint_path.empty()) {
    s.model = trainer::build_model(c);
  } else {
    s = trainer::load_checkpoint(c, inv.checkpoint_path);
  }
  const dpm::DpmModule* m = s.model->mapping();
  if (!m || !m->has_mapping_matrices()) {
    throw ConfigError("dpm mode '" + dpm::to_string(c.model.dpm.mode) + "' has no mapping matrices to export");
  }
  const HeatmapPair maps = mapping_heatmaps(*m, c.model, inv.pre_softmax);
  dir.write("au_to_exp.csv", to_csv(maps.au_to_exp));
  dir.write("exp_to_au.csv", to_csv(maps.exp_to_au));
  nlohmann::json manifest = base_manifest(inv, c);
  manifest["view"] = inv.pre_softmax ? "pre-softmax" : "post-softmax";
  manifest["tau_m"] = c.model.dpm.tau_m;
  manifest["transpose_frobenius_distance"] = transpose_distance(*m);
  dir.commit(manifest);
  out << "transpose Frobenius distance " << transpose_distance(*m) << "\n";
  return kSuccess;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Structured semantic mapping: joint AU detection and expression recognition"};
  app.require_subcommand(1);
  Invocation inv;

  auto common = [&](CLI::App* sub, bool needs_out) {
    sub->add_option("--config,-c", inv.config_path, "JSON experiment config")->check(CLI::ExistingFile);
    auto* o = sub->add_option("--out,-o", inv.out_dir, "Run directory to create");
    if (needs_out) o->required();
    sub->add_option("--seed", inv.seed, "Override the run seed (takes precedence over SSM_SEED)");
    sub->add_flag("--force", inv.force, "Replace an existing run directory");
    sub->add_flag("-v,--verbose", inv.verbosity, "More progress output");
  };
  auto data = [&](CLI::App* sub) {
    sub->add_option("--data", inv.data_path, "Dataset file written by gen-data")->check(CLI::ExistingFile);
  };

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic AU and expression datasets");
  common(gen, true);

  auto* tr = app.add_subcommand("train", "Train one configuration and write checkpoint, metrics and heatmaps");
  common(tr, true);
  data(tr);
  tr->add_flag("--pre-softmax", inv.pre_softmax, "Also export raw mapping matrices");

  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on the test splits");
  common(ev, true);
  data(ev);
  ev->add_option("--checkpoint", inv.checkpoint_path, "Checkpoint to evaluate")->required()->check(CLI::ExistingFile);

  auto* ab = app.add_subcommand("ablate", "Run an ablation grid with median-over-seeds aggregation");
  common(ab, true);
  data(ab);
  ab->add_option("--grid", inv.grid, "component, dpm, style, context or fraction")
      ->check(CLI::IsMember({"component", "dpm", "style", "context", "fraction"}));
  ab->add_option("--seeds", inv.seed_count, "Number of seeds (default: the config's list)");
  ab->add_option("--workers", inv.workers, "Worker threads")->check(CLI::PositiveNumber);

  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of the training loss gradients");
  common(gc, false);
  data(gc);
  gc->add_option("--clips", inv.clips, "Clips per task in the probe batch")->check(CLI::PositiveNumber);
  gc->add_option("--coordinates", inv.coordinates, "Coordinates probed per parameter (0 = all)");

  auto* ex = app.add_subcommand("export-mapping", "Write the mapping matrices as CSV heatmaps");
  common(ex, true);
  ex->add_option("--checkpoint", inv.checkpoint_path, "Checkpoint to read (default: initialization)")
      ->check(CLI::ExistingFile);
  ex->add_flag("--pre-softmax", inv.pre_softmax, "Export raw matrices instead of mixing weights");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kSuccess;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kSuccess;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  }
  inv.subcommand = app.get_subcommands().front()->get_name();

  try {
    if (inv.subcommand == "gen-data") return cmd_gen_data(inv, out);
    if (inv.subcommand == "train") return cmd_train(inv, out);
    if (inv.subcommand == "evaluate") return cmd_evaluate(inv, out);
    if (inv.subcommand == "ablate") return cmd_ablate(inv, out);
    if (inv.subcommand == "grad-check") return cmd_grad_check(inv, out);
    return cmd_export_mapping(inv, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const SpecError& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
}

}  // namespace ssm::cli
