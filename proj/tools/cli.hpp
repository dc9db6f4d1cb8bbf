#pragma once

// asff-lab subcommands. run_cli returns the process exit code:
// 0 ok, 1 runtime failure, 2 usage or configuration error.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "asff/analyzer.hpp"
#include "asff/checkpoint.hpp"
#include "asff/config.hpp"
#include "asff/errors.hpp"
#include "asff/scene.hpp"
#include "asff/training.hpp"

namespace asff::lab {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

namespace fs = std::filesystem;

struct Streams {
  std::ostream& out = std::cout;
  std::ostream& err = std::cerr;
};

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + path.string());
  f << text;
}

inline Json number_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline double median(std::vector<double> v) {
  std::erase_if(v, [](double x) { return std::isnan(x); });
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// Config of one concrete run: a single seed, its own directory, no arms.
inline RunConfig single_run_config(RunConfig cfg, std::uint64_t seed, const fs::path& dir) {
  cfg.seeds = {seed};
  cfg.output_dir = dir.string();
  cfg.arms.clear();
  return cfg;
}

inline TrainResult train_run(const RunConfig& cfg, std::uint64_t seed, const fs::path& dir, std::ostream* log,
                             std::mutex* log_mutex, const std::string& label) {
  const RunConfig run_cfg = single_run_config(cfg, seed, dir);
  fs::create_directories(dir);
  write_text(dir / "resolved-config.json", to_json(run_cfg).dump(2) + "\n");
  return train(run_cfg, seed, dir, [&](const EpochMetrics& m) {
    if (log == nullptr) return;
    std::unique_lock<std::mutex> lock;
    if (log_mutex) lock = std::unique_lock<std::mutex>(*log_mutex);
    *log << label << " epoch " << m.epoch << "/" << run_cfg.epochs() << " lr " << m.lr << " loss " << m.loss
         << " ap50 " << m.ap50 << " conflict " << m.conflict_mean << "\n";
  });
}

inline int cmd_train(const RunConfig& cfg, Streams io) {
  const fs::path dir = cfg.output_dir;
  const std::uint64_t seed = cfg.seeds.front();
  const TrainResult r = train_run(cfg, seed, dir, &io.err, nullptr, "[" + to_string(cfg.fusion) + " seed " + std::to_string(seed) + "]");
  io.out << "run directory: " << dir.string() << "\n";
  if (!r.history.empty()) io.out << "final: " << format_metrics_row(r.history.back()) << "\n";
  return kExitOk;
}

inline int cmd_analyze(const fs::path& checkpoint, std::optional<std::uint64_t> scene_seed, const fs::path& out_dir,
                       Streams io) {
  const LoadedRun run = load_run(checkpoint);
  const RunConfig& cfg = run.config;
  const std::uint64_t seed = scene_seed.value_or(cfg.data.analysis_seed);
  fs::create_directories(out_dir);

  const std::vector<SyntheticScene> scenes{generate_scene(seed, cfg.data.scene)};
  dump_scene(scenes[0], seed, out_dir / "scene.pgm", out_dir / "scene.json");

  const Detector<double> model = run.state.model.converted<double>();
  const IgnoreConfig ignore = cfg.ignore_config();
  const TargetMaps<double> targets = make_targets<double>(scenes, model.config(), cfg.thresholds, ignore);
  const Tensor<double> images = make_image_batch<double>(scenes);
  const DecompositionMaps<double> maps = decompose_all(model, images, targets, cfg.loss);
  {
    std::ofstream csv(out_dir / "conflict.csv", std::ios::binary | std::ios::trunc);
    if (!csv) throw Error("cannot write " + (out_dir / "conflict.csv").string());
    write_conflict_csv(csv, maps, 0);
  }
  const ConflictReport report = conflict_report(maps, targets);

  Json summary;
  summary["tool_version"] = kToolVersion;
  summary["checkpoint"] = checkpoint.string();
  summary["epoch"] = run.state.epoch;
  summary["fusion_mode"] = to_string(cfg.fusion);
  summary["resize"] = to_string(cfg.model.resize);
  summary["scene_seed"] = seed;
  summary["conflict_metric"] = "artifact-defined cancellation ratio 1 - |sum_l g_l| / sum_l |g_l|, summed over channels";
  summary["level1_positive_count"] = report.positive_count;
  summary["conflict_mean"] = report.mean_conflict;

  std::vector<std::string> pgms;
  if (model.config().fusion == FusionMode::asff) {
    for (std::size_t l = 0; l < kLevels; ++l) {
      const Tensor<double>& w = maps.weights[l];
      const Shape& s = w.shape();
      for (std::size_t n = 0; n < kLevels; ++n) {
        std::vector<std::uint8_t> bytes(s.plane());
        for (std::size_t i = 0; i < s.h; ++i) {
          for (std::size_t j = 0; j < s.w; ++j) bytes[i * s.w + j] = unit_to_byte(w.at(0, n, i, j));
        }
        const std::string name = "weights_l" + std::to_string(l + 1) + "_from" + std::to_string(n + 1) + ".pgm";
        write_pgm(out_dir / name, s.w, s.h, bytes);
        pgms.push_back(name);
      }
    }
    if (cfg.model.resize == ResizeMode::identity) {
      Detector<double> frozen = model;
      frozen.config().detach_weights = true;
      const double tol = 1e-8;
      const auto rep = verify_weighted_identity(frozen, images, targets, tol, cfg.loss);
      summary["weighted_gradient_identity"] = {{"max_abs_diff", rep.max_abs_diff}, {"tolerance", tol}, {"pass", rep.pass}};
    } else {
      const ResidualReport res = coefficient_residuals(model, images, targets, cfg.loss);
      summary["coefficient_residuals"] = {{"lambda_path", number_or_null(res.lambda_path)},
                                          {"resize", number_or_null(res.resize)}};
    }
  }
  summary["weight_maps"] = pgms;
  write_text(out_dir / "summary.json", summary.dump(2) + "\n");
  io.out << "analysis written to " << out_dir.string() << " (conflict_mean " << report.mean_conflict << ")\n";
  return kExitOk;
}

struct ArmRun {
  std::string arm;
  std::size_t arm_index = 0;
  RunConfig cfg;
  std::uint64_t seed = 0;
  fs::path dir;
  bool ok = false;
  std::string error;
  double ap50 = std::numeric_limits<double>::quiet_NaN();
  double conflict_mean = std::numeric_limits<double>::quiet_NaN();
};

inline std::size_t thread_cap() {
  std::size_t cap = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("ASFF_LAB_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) cap = static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      throw ConfigurationError(std::string("ASFF_LAB_THREADS must be a positive integer, got \"") + env + "\"");
    }
  }
  return cap;
}

inline int cmd_compare(const RunConfig& base, Streams io) {
  std::vector<ArmSpec> arms = base.arms;
  if (arms.empty()) arms.push_back(ArmSpec{"", Json::object()});
  std::vector<RunConfig> arm_cfgs;
  std::vector<std::string> labels;
  for (const ArmSpec& a : arms) {
    arm_cfgs.push_back(arm_config(base, a));
    labels.push_back(arm_label(arm_cfgs.back(), a));
  }
  if (std::set<std::string>(labels.begin(), labels.end()).size() != labels.size()) {
    throw ConfigurationError("arms: labels must be unique; give arms distinct names");
  }

  const fs::path root = base.output_dir;
  std::vector<ArmRun> runs;
  for (std::size_t a = 0; a < arms.size(); ++a) {
    for (std::uint64_t seed : base.seeds) {
      ArmRun r;
      r.arm = labels[a];
      r.arm_index = a;
      r.cfg = arm_cfgs[a];
      r.seed = seed;
      r.dir = root / labels[a] / ("seed_" + std::to_string(seed));
      runs.push_back(std::move(r));
    }
  }

  std::mutex log_mutex;
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t k = next++; k < runs.size(); k = next++) {
      ArmRun& r = runs[k];
      try {
        const TrainResult res =
            train_run(r.cfg, r.seed, r.dir, &io.err, &log_mutex, "[" + r.arm + " seed " + std::to_string(r.seed) + "]");
        if (!res.history.empty()) {
          r.ap50 = res.history.back().ap50;
          r.conflict_mean = res.history.back().conflict_mean;
        }
        r.ok = true;
      } catch (const std::exception& e) {
        r.error = e.what();
        std::lock_guard lock(log_mutex);
        io.err << "[" << r.arm << " seed " << r.seed << "] failed: " << e.what() << "\n";
      }
    }
  };
  const std::size_t threads = std::min(thread_cap(), runs.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  fs::create_directories(root);
  std::ostringstream csv;
  csv << "arm,seed,ap50,conflict_mean\n";
  char buf[64];
  for (const ArmRun& r : runs) {
    if (!r.ok) continue;
    csv << r.arm << "," << r.seed;
    std::snprintf(buf, sizeof buf, ",%.9g,%.9g\n", r.ap50, r.conflict_mean);
    csv << buf;
  }
  write_text(root / "compare.csv", csv.str());

  std::vector<std::size_t> arm_order(arms.size());
  std::iota(arm_order.begin(), arm_order.end(), std::size_t{0});
  const bool sweep = std::all_of(arm_cfgs.begin(), arm_cfgs.end(), [](const RunConfig& c) { return c.fusion == RunFusion::ignore; });
  if (sweep) {
    std::stable_sort(arm_order.begin(), arm_order.end(),
                     [&](std::size_t a, std::size_t b) { return arm_cfgs[a].epsilon_ignore < arm_cfgs[b].epsilon_ignore; });
  }
  Json summary;
  summary["tool_version"] = kToolVersion;
  summary["ordered_by"] = sweep ? "epsilon_ignore" : "config";
  Json arm_rows = Json::array();
  for (std::size_t a : arm_order) {
    std::vector<double> ap;
    std::vector<double> conflict;
    std::size_t completed = 0;
    for (const ArmRun& r : runs) {
      if (r.arm_index != a || !r.ok) continue;
      ap.push_back(r.ap50);
      conflict.push_back(r.conflict_mean);
      ++completed;
    }
    Json row;
    row["arm"] = labels[a];
    row["fusion_mode"] = to_string(arm_cfgs[a].fusion);
    if (arm_cfgs[a].fusion == RunFusion::ignore) row["epsilon_ignore"] = arm_cfgs[a].epsilon_ignore;
    row["runs_completed"] = completed;
    row["median_ap50"] = number_or_null(median(ap));
    row["median_conflict_mean"] = number_or_null(median(conflict));
    arm_rows.push_back(row);
  }
  summary["arms"] = arm_rows;
  Json failed = Json::array();
  for (const ArmRun& r : runs) {
    if (!r.ok) failed.push_back({{"arm", r.arm}, {"seed", r.seed}, {"error", r.error}});
  }
  summary["failed"] = failed;
  write_text(root / "summary.json", summary.dump(2) + "\n");

  for (const Json& row : arm_rows) {
    io.out << row["arm"].get<std::string>() << ": median ap50 " << row["median_ap50"].dump() << ", median conflict "
           << row["median_conflict_mean"].dump() << "\n";
  }
  return failed.empty() ? kExitOk : kExitRuntime;
}

inline int cmd_export(const RunConfig& cfg, const std::string& split, std::size_t count, const fs::path& out_dir,
                      Streams io) {
  std::uint64_t seed = cfg.data.train_seed;
  if (split == "val") {
    seed = cfg.data.val_seed;
  } else if (split == "analysis") {
    seed = cfg.data.analysis_seed;
  } else if (split != "train") {
    throw ConfigurationError("--split must be train, val or analysis");
  }
  fs::create_directories(out_dir);
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t s = rng();
    char stem[32];
    std::snprintf(stem, sizeof stem, "scene_%04zu", i);
    const SyntheticScene scene = generate_scene(s, cfg.data.scene);
    dump_scene(scene, s, out_dir / (std::string(stem) + ".pgm"), out_dir / (std::string(stem) + ".json"));
  }
  io.out << "exported " << count << " " << split << " scenes to " << out_dir.string() << "\n";
  return kExitOk;
}

// Splits "--key.path=value" overrides from the arguments CLI11 handles.
// Any "--name=value" whose name is not a declared option is an override.
inline std::vector<std::string> extract_overrides(std::vector<std::string>& args, const std::set<std::string>& options) {
  std::vector<std::string> overrides;
  std::vector<std::string> rest;
  for (const std::string& a : args) {
    const std::size_t eq = a.find('=');
    if (a.rfind("--", 0) == 0 && eq != std::string::npos && !options.contains(a.substr(2, eq - 2))) {
      overrides.push_back(a.substr(2));
    } else {
      rest.push_back(a);
    }
  }
  args = std::move(rest);
  return overrides;
}

inline int run_cli(std::vector<std::string> args, Streams io = {}) {
  CLI::App app{"ASFF experiment tool: train, analyze, compare, export"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  std::string config_path;
  bool deterministic = false;
  std::string checkpoint;
  std::string out_dir;
  std::optional<std::uint64_t> scene_seed;
  std::string split = "train";
  std::size_t count = 16;

  auto* train_cmd = app.add_subcommand("train", "train one run (first seed) into output_dir");
  train_cmd->add_option("--config", config_path, "run config (JSON)");
  train_cmd->add_flag("--deterministic", deterministic, "force deterministic single-thread mode");

  auto* analyze_cmd = app.add_subcommand("analyze", "gradient decomposition and weight maps for a checkpoint");
  analyze_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  analyze_cmd->add_option("--scene_seed", scene_seed, "seed of the analysed scene (default: the run's analysis seed)");
  analyze_cmd->add_option("--out", out_dir, "output directory")->required();

  auto* compare_cmd = app.add_subcommand("compare", "run every arm for every seed and summarise");
  compare_cmd->add_option("--config", config_path, "sweep config (JSON)");
  compare_cmd->add_flag("--deterministic", deterministic, "force deterministic single-thread mode");

  auto* export_cmd = app.add_subcommand("export", "dump synthetic scenes as PGM + JSON");
  export_cmd->add_option("--config", config_path, "run config (JSON)");
  export_cmd->add_option("--split", split, "train, val or analysis");
  export_cmd->add_option("--count", count, "number of scenes");
  export_cmd->add_option("--out", out_dir, "output directory")->required();

  const std::set<std::string> declared{"config", "checkpoint", "scene_seed", "out", "split", "count", "deterministic", "version", "help"};
  std::vector<std::string> cli_args = args;
  const std::vector<std::string> overrides = extract_overrides(cli_args, declared);

  try {
    std::vector<std::string> reversed(cli_args.rbegin(), cli_args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, io.out, io.err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    const auto load = [&] {
      std::vector<std::string> all = overrides;
      if (deterministic) all.push_back("deterministic=true");
      return load_run_config(config_path.empty() ? std::nullopt : std::optional<fs::path>(config_path), all);
    };
    if (*train_cmd) return cmd_train(load(), io);
    if (*analyze_cmd) {
      if (!overrides.empty()) throw ConfigurationError("analyze takes no config overrides");
      return cmd_analyze(checkpoint, scene_seed, out_dir, io);
    }
    if (*compare_cmd) return cmd_compare(load(), io);
    if (*export_cmd) return cmd_export(load(), split, count, out_dir, io);
  } catch (const ConfigurationError& e) {
    io.err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    io.err << "format error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    io.err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace asff::lab
