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

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "ssm/trainer/train.hpp"

namespace ssm::trainer {

enum class Grid { component, dpm, style, context, fraction };

inline std::string to_string(Grid g) {
  switch (g) {
    case Grid::component: return "component";
    case Grid::dpm: return "dpm";
    case Grid::style: return "style";
    case Grid::context: return "context";
    case Grid::fraction: return "fraction";
  }
  return "component";
}

inline Grid parse_grid(std::string_view s) {
  for (Grid g : {Grid::component, Grid::dpm, Grid::style, Grid::context, Grid::fraction})
    if (to_string(g) == s) return g;
  throw ConfigError("unknown ablation grid '" + std::string(s) + "'");
}

/// One configuration of a grid.
struct AblationRow {
  std::string name;
  ExperimentConfig config;
};

/// Expands a grid into concrete configurations derived from `base`.
inline std::vector<AblationRow> grid_rows(Grid grid, const ExperimentConfig& base) {
  using model::Variant;
  std::vector<AblationRow> rows;
  auto with = [&](std::string name, auto&& edit) {
    ExperimentConfig c = base;
    edit(c);
    rows.push_back({std::move(name), std::move(c)});
  };
  switch (grid) {
    case Grid::component:
      with("stl", [](ExperimentConfig& c) { c.model.variant = Variant::stl; });
      with("baseline", [](ExperimentConfig& c) { c.model.variant = Variant::baseline; });
      with("baseline+tsp", [](ExperimentConfig& c) { c.model.variant = Variant::tsp; });
      with("baseline+tsp+dpm", [](ExperimentConfig& c) { c.model.variant = Variant::ssm; });
      break;
    case Grid::dpm:
      for (dpm::Init init : {dpm::Init::prior, dpm::Init::random}) {
        for (dpm::Mode mode : {dpm::Mode::learnable_dual, dpm::Mode::frozen, dpm::Mode::transpose_tied}) {
          with(dpm::to_string(init) + "/" + dpm::to_string(mode), [&](ExperimentConfig& c) {
            c.model.variant = Variant::ssm;
            c.model.dpm.init = init;
            c.model.dpm.mode = mode;
          });
        }
      }
      for (dpm::Mode mode : {dpm::Mode::linear, dpm::Mode::mlp}) {
        with(dpm::to_string(mode), [&](ExperimentConfig& c) {
          c.model.variant = Variant::ssm;
          c.model.dpm.mode = mode;
        });
      }
      break;
    case Grid::style:
      for (auto style : {tsp::DescriptionStyle::words, tsp::DescriptionStyle::standalone,
                         tsp::DescriptionStyle::compound}) {
        with(tsp::to_string(style), [&](ExperimentConfig& c) { c.model.tsp.style = style; });
      }
      break;
    case Grid::context:
      for (std::size_t len : {0, 4, 8, 12, 16}) {
        with("context=" + std::to_string(len), [&](ExperimentConfig& c) { c.model.tsp.context_length = len; });
      }
      break;
    case Grid::fraction:
      // The 0% row has no paired data at all, i.e. single-task training.
      with("fraction=0.0", [](ExperimentConfig& c) { c.model.variant = Variant::stl; });
      for (double f : {0.2, 0.4, 0.6, 0.8, 1.0}) {
        std::ostringstream name;
        name << "fraction=" << f;
        with(name.str(), [&](ExperimentConfig& c) { c.fraction_expression = f; });
      }
      break;
  }
  return rows;
}

struct SeedRun {
  std::uint64_t seed = 0;
  objective::MetricsReport expression;
  objective::MetricsReport au;
};

struct AblationResult {
  std::string name;
  ExperimentConfig config;
  std::vector<SeedRun> runs;  // ordered as the requested seeds
  double median_au_f1 = 0.0;
  double median_uar = 0.0;
  double median_war = 0.0;
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw InvalidArgument("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

inline void aggregate(AblationResult& r) {
  std::vector<double> f1, uar, war;
  for (const SeedRun& s : r.runs) {
    f1.push_back(s.au.avg_f1.value_or(0.0));
    uar.push_back(s.expression.uar.value_or(0.0));
    war.push_back(s.expression.war.value_or(0.0));
  }
  r.median_au_f1 = median(f1);
  r.median_uar = median(uar);
  r.median_war = median(war);
}

struct AblationOptions {
  /// Worker threads; each run owns its model and optimizer, so runs share
  /// nothing mutable beyond the read-only world.
  std::size_t workers = 1;
  /// Called after each finished run with its full state (serialized).
  std::function<void(const std::string&, std::uint64_t, const RunState&)> on_run;
};

/// Trains every (row, seed) pair and aggregates medians per row.
inline std::vector<AblationResult> run_rows(const std::vector<AblationRow>& rows, const World& world,
                                            const std::vector<std::uint64_t>& seeds,
                                            const AblationOptions& options = {}) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  std::vector<AblationResult> results(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    results[i].name = rows[i].name;
    results[i].config = rows[i].config;
    results[i].runs.resize(seeds.size());
  }
  const std::size_t jobs = rows.size() * seeds.size();
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr failure;

  auto worker = [&] {
    for (std::size_t j; (j = next.fetch_add(1)) < jobs;) {
      const std::size_t r = j / seeds.size(), s = j % seeds.size();
      try {
        ExperimentConfig c = rows[r].config;
        c.seed = seeds[s];
        RunState state = train(c, world);
        SeedRun run{seeds[s], state.expression_metrics, state.au_metrics};
        std::lock_guard lock(mu);
        if (options.on_run) options.on_run(rows[r].name, seeds[s], state);
        results[r].runs[s] = std::move(run);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        next = jobs;
      }
    }
  };
  const std::size_t n = std::clamp<std::size_t>(options.workers, 1, jobs);
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  for (auto& r : results) aggregate(r);
  return results;
}

inline std::vector<AblationResult> ablation_suite(const ExperimentConfig& config, const World& world,
                                                  const std::vector<std::uint64_t>& seeds, Grid grid,
                                                  const AblationOptions& options = {}) {
  return run_rows(grid_rows(grid, config), world, seeds, options);
}

/// One row per (configuration, task) with the median metrics and the
/// per-seed values behind them.
inline nlohmann::json ablation_table_json(Grid grid, const std::vector<AblationResult>& results) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : results) {
    nlohmann::json seeds = nlohmann::json::array(), f1 = nlohmann::json::array(), uar = nlohmann::json::array(),
                   war = nlohmann::json::array();
    for (const auto& s : r.runs) {
      seeds.push_back(s.seed);
      f1.push_back(s.au.avg_f1.value_or(0.0));
      uar.push_back(s.expression.uar.value_or(0.0));
      war.push_back(s.expression.war.value_or(0.0));
    }
    rows.push_back({{"config", r.name}, {"task", "au"}, {"seeds", seeds}, {"median_avg_f1", r.median_au_f1},
                    {"avg_f1", f1}});
    rows.push_back({{"config", r.name},
                    {"task", "expression"},
                    {"seeds", seeds},
                    {"median_uar", r.median_uar},
                    {"median_war", r.median_war},
                    {"uar", uar},
                    {"war", war}});
  }
  return {{"grid", to_string(grid)}, {"aggregation", "median"}, {"rows", rows}};
}

inline std::string ablation_table_tsv(const std::vector<AblationResult>& results) {
  std::ostringstream out;
  out.precision(6);
  out << "config\ttask\tmetric\tmedian\n";
  for (const auto& r : results) {
    out << r.name << "\tau\tavg_f1\t" << r.median_au_f1 << "\n";
    out << r.name << "\texpression\tuar\t" << r.median_uar << "\n";
    out << r.name << "\texpression\twar\t" << r.median_war << "\n";
  }
  return out.str();
}

}  // namespace ssm::trainer
