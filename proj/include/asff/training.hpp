#pragma once

// Deterministic training loop, evaluation, and run-state checkpoints.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "asff/analyzer.hpp"
#include "asff/box.hpp"
#include "asff/checkpoint.hpp"
#include "asff/config.hpp"
#include "asff/errors.hpp"
#include "asff/graph.hpp"
#include "asff/loss.hpp"
#include "asff/model.hpp"
#include "asff/optimizer.hpp"
#include "asff/params.hpp"
#include "asff/scene.hpp"
#include "asff/targets.hpp"

namespace asff {

inline constexpr const char* kMetricsHeader = "epoch,lr,loss,ap50,conflict_mean";
inline constexpr const char* kCheckpointFile = "checkpoint.bin";
inline constexpr const char* kMetricsFile = "metrics.csv";

// `count` scenes whose seeds are drawn from one generator seeded with `seed`.
inline std::vector<SyntheticScene> make_scenes(std::uint64_t seed, std::size_t count, const SceneConfig& cfg) {
  Rng rng(seed);
  std::vector<SyntheticScene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_scene(rng(), cfg));
  return out;
}

template <typename T>
TargetMaps<T> make_targets(std::span<const SyntheticScene> scenes, const ModelConfig& model, const LevelThresholds& thresholds,
                           const IgnoreConfig& ignore) {
  TargetMaps<T> tm = build_targets<T>(scenes, model.strides(), thresholds);
  apply_ignore_mask(tm, scenes, ignore, thresholds);
  return tm;
}

// AP at IoU 0.5 over `scenes`, inference only. NaN when there is no ground truth.
template <typename T>
double evaluate_ap50(const Detector<T>& model, std::span<const SyntheticScene> scenes, std::size_t batch_size,
                     const DecodeConfig& decode) {
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<Box>> gts;
  for (std::size_t start = 0; start < scenes.size(); start += batch_size) {
    const auto chunk = scenes.subspan(start, std::min(batch_size, scenes.size() - start));
    Graph<T> graph;
    graph.set_recording(false);
    const ForwardResult<T> fr = model.forward(graph, make_image_batch<T>(chunk));
    auto batch_dets = decode_detections(fr.preds, model.strides(), decode);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      dets.push_back(std::move(batch_dets[i]));
      gts.push_back(chunk[i].boxes());
    }
  }
  return evaluate_ap(dets, gts, 0.5).value_or(std::numeric_limits<double>::quiet_NaN());
}

// Mean conflict over level-1 positive cells of the analysis batch.
template <typename T>
double mean_conflict(const Detector<T>& model, std::span<const SyntheticScene> scenes, const LevelThresholds& thresholds,
                     const IgnoreConfig& ignore, const LossConfig& loss) {
  const TargetMaps<T> tm = make_targets<T>(scenes, model.config(), thresholds, ignore);
  const DecompositionMaps<T> maps = decompose_all(model, make_image_batch<T>(scenes), tm, loss);
  return conflict_report(maps, tm).mean_conflict;
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0;
  double loss = 0;
  double ap50 = 0;
  double conflict_mean = 0;
};

inline std::string format_metrics_row(const EpochMetrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g", m.epoch, m.lr, m.loss, m.ap50, m.conflict_mean);
  return buf;
}

inline Checkpoint make_checkpoint(const TrainState<float>& state, const RunConfig& cfg) {
  Checkpoint ckpt;
  ckpt.meta["tool_version"] = kToolVersion;
  ckpt.meta["epoch"] = state.epoch;
  ckpt.meta["seed"] = state.seed;
  ckpt.meta["config"] = to_json(cfg);
  const ParamList<float> params = state.model.parameters();
  for (const auto& p : params) ckpt.tensors.push_back(to_checkpoint_tensor(p.name, p.tensor));
  for (std::size_t k = 0; k < params.size(); ++k) {
    ckpt.tensors.push_back(to_checkpoint_tensor("momentum/" + params[k].name, state.velocity[k]));
  }
  return ckpt;
}

struct LoadedRun {
  RunConfig config;
  TrainState<float> state;
};

inline LoadedRun load_run(const Checkpoint& ckpt) {
  LoadedRun out;
  try {
    out.config = from_resolved_json(ckpt.meta.at("config"));
    out.state.epoch = ckpt.meta.at("epoch").get<std::size_t>();
    out.state.seed = ckpt.meta.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::ordered_json::exception& e) {
    throw FormatError(std::string("checkpoint metadata is incomplete: ") + e.what());
  } catch (const ConfigurationError& e) {
    throw FormatError(std::string("checkpoint carries an invalid config: ") + e.what());
  }
  out.state.model = Detector<float>(out.config.model_config(), 0);
  const ParamList<float> params = out.state.model.parameters();
  out.state.velocity = zero_velocity(params);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<float> p = params[k].tensor;
    load_tensor(ckpt, params[k].name, p);
    load_tensor(ckpt, "momentum/" + params[k].name, out.state.velocity[k]);
  }
  if (ckpt.tensors.size() != 2 * params.size()) {
    throw FormatError("checkpoint has " + std::to_string(ckpt.tensors.size()) + " tensors, expected " +
                      std::to_string(2 * params.size()));
  }
  return out;
}

inline LoadedRun load_run(const std::filesystem::path& path) { return load_run(read_checkpoint(path)); }

struct TrainResult {
  std::vector<EpochMetrics> history;
  TrainState<float> state;
};

// Trains one run into `run_dir` (metrics.csv and checkpoint.bin). The
// checkpoint is written before the first epoch and after every completed
// epoch, so a diverged run leaves the last good state on disk.
inline TrainResult train(const RunConfig& cfg, std::uint64_t seed, const std::filesystem::path& run_dir,
                         const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  validate(cfg);
  std::filesystem::create_directories(run_dir);
  const ModelConfig model_cfg = cfg.model_config();
  const IgnoreConfig ignore = cfg.ignore_config();

  const std::vector<SyntheticScene> train_set = make_scenes(cfg.data.train_seed, cfg.data.train_scenes, cfg.data.scene);
  const std::vector<SyntheticScene> val_set = make_scenes(cfg.data.val_seed, cfg.data.val_scenes, cfg.data.scene);
  const std::vector<SyntheticScene> analysis_set =
      make_scenes(cfg.data.analysis_seed, cfg.data.analysis_scenes, cfg.data.scene);

  TrainResult result;
  TrainState<float>& state = result.state;
  state.model = Detector<float>(model_cfg, seed);
  state.seed = seed;
  const ParamList<float> params = state.model.parameters();
  state.velocity = zero_velocity(params);

  const std::filesystem::path ckpt_path = run_dir / kCheckpointFile;
  write_checkpoint(ckpt_path, make_checkpoint(state, cfg));
  std::ofstream metrics(run_dir / kMetricsFile, std::ios::binary | std::ios::trunc);
  if (!metrics) throw Error("cannot write " + (run_dir / kMetricsFile).string());
  metrics << kMetricsHeader << "\n" << std::flush;

  Rng order_rng(seed ^ 0x9E3779B97F4A7C15ULL);
  std::vector<std::size_t> order(train_set.size());
  const std::size_t steps = (train_set.size() + cfg.batch_size - 1) / cfg.batch_size;

  for (std::size_t epoch = 0; epoch < cfg.epochs(); ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), order_rng);
    double loss_sum = 0;
    std::size_t loss_count = 0;
    for (std::size_t step = 0; step < steps; ++step) {
      const double lr =
          lr_at(static_cast<double>(epoch) + static_cast<double>(step + 1) / static_cast<double>(steps), cfg.schedule);
      std::vector<SyntheticScene> batch;
      for (std::size_t i = step * cfg.batch_size; i < std::min(train_set.size(), (step + 1) * cfg.batch_size); ++i) {
        batch.push_back(train_set[order[i]]);
      }
      TargetMaps<float> targets;
      bool rescaled = false;
      if (cfg.random_shapes.enabled) {
        const std::size_t size = cfg.random_shapes.sizes[order_rng() % cfg.random_shapes.sizes.size()];
        if (size != cfg.data.scene.image_size) {
          std::vector<SyntheticScene> resized;
          for (const auto& s : batch) resized.push_back(rescale_scene(s, size));
          // Shrinking can push two centers into one cell; such a batch
          // keeps its original size.
          try {
            targets = make_targets<float>(resized, model_cfg, cfg.thresholds, ignore);
            batch = std::move(resized);
            rescaled = true;
          } catch (const InvalidArgument&) {
          }
        }
      }
      if (!rescaled) targets = make_targets<float>(batch, model_cfg, cfg.thresholds, ignore);

      zero_grads(params);
      Graph<float> graph;
      try {
        const ForwardResult<float> fr = state.model.forward(graph, make_image_batch<float>(batch));
        const Tensor<float> loss = detection_loss(graph, fr.preds, targets, cfg.loss);
        const double value = loss.item();
        if (!std::isfinite(value)) throw NumericError("loss is " + std::to_string(value));
        graph.backward(loss);
        sgd_step(params, state.velocity, lr, cfg.sgd);
        loss_sum += value;
        ++loss_count;
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch + 1) + ", step " +
                           std::to_string(step + 1) + ": " + e.what() + "; last good checkpoint kept at " +
                           ckpt_path.string());
      }
    }
    state.epoch = epoch + 1;

    EpochMetrics m;
    m.epoch = epoch + 1;
    m.lr = lr_at(static_cast<double>(epoch + 1), cfg.schedule);
    m.loss = loss_sum / static_cast<double>(std::max<std::size_t>(loss_count, 1));
    m.ap50 = evaluate_ap50(state.model, std::span<const SyntheticScene>(val_set), cfg.batch_size, cfg.decode);
    m.conflict_mean = mean_conflict(state.model, std::span<const SyntheticScene>(analysis_set), cfg.thresholds, ignore,
                                    cfg.loss);
    metrics << format_metrics_row(m) << "\n" << std::flush;
    write_checkpoint(ckpt_path, make_checkpoint(state, cfg));
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return result;
}

}  // namespace asff
