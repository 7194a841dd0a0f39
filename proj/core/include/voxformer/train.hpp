// SPDX-License-Identifier: Apache-2.0
//
// Seeded training and evaluation loops with line-delimited JSON metrics.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "voxformer/data.hpp"
#include "voxformer/models.hpp"
#include "voxformer/optim.hpp"

namespace voxformer {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  /// Directory holding manifest.jsonl, split.json and the volumes.
  std::filesystem::path data_dir;
  std::filesystem::path out_dir;
  std::uint64_t seed = 0;
  int threads = 1;
};

std::string run_config_to_json(const RunConfig& config);
RunConfig run_config_from_json(std::string_view json);

/// Split plus train-only intensity statistics and the loaded samples.
struct PreparedData {
  SplitSpec split;
  IntensityStats stats;
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::vector<Sample> test;
};

/// Reads `<data_dir>/split.json`; statistics come from the train side only.
PreparedData prepare_data(const std::filesystem::path& data_dir, const VolumeExtents& extents,
                          DType dtype = DType::f32);

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  std::int64_t total = 0;
  /// confusion[true][predicted], classes ordered CN, AD.
  std::array<std::array<std::int64_t, 2>, 2> confusion{};
};

/// Eval-mode forward over every sample, one at a time.
EvalResult evaluate(Model& model, std::span<const Sample> samples);

/// First index of the maximum in each row of [N, C] logits.
std::vector<std::int64_t> predict(const Tensor& logits);

struct EpochMetrics {
  std::int64_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double test_loss = 0.0;
  double test_accuracy = 0.0;
  bool improved = false;
};

struct TrainResult {
  EvalResult initial;
  std::vector<EpochMetrics> epochs;
  double best_test_accuracy = -1.0;
  std::int64_t best_epoch = -1;
  bool checkpoint_written = false;
  std::filesystem::path metrics_path;
  std::filesystem::path checkpoint_path;
};

/// Returning false from the callback ends training after that epoch.
using EpochCallback = std::function<bool(const EpochMetrics&)>;

/// Trains a freshly seeded model. Writes `<out_dir>/metrics.jsonl` and,
/// whenever test accuracy improves on the best so far, `<out_dir>/best.vxck`.
TrainResult train_model(const RunConfig& config, const PreparedData& data, const EpochCallback& on_epoch = {});

/// prepare_data followed by train_model.
TrainResult run_training(const RunConfig& config, const EpochCallback& on_epoch = {});

struct LoadedModel {
  ModelConfig config;
  IntensityStats stats;
  std::unique_ptr<Model> model;
};

/// Rebuilds the model a training checkpoint was written from.
LoadedModel load_trained_model(const std::filesystem::path& checkpoint);

struct GridRow {
  std::size_t index = 0;
  RunConfig config;
  bool ok = false;
  std::string error;
  double best_test_accuracy = 0.0;
  double final_test_accuracy = 0.0;
  std::int64_t best_epoch = -1;
};

/// Runs each grid point (at most `limit`, in enumeration order) in its own
/// `run-NNN` directory under template.out_dir. Failures are recorded, not
/// thrown. Rows are returned best-first (stable on enumeration order) and
/// written to `<out_dir>/grid.jsonl`.
std::vector<GridRow> run_grid(const RunConfig& tmpl, const GridSpec& grid, std::optional<std::size_t> limit = {});

std::string grid_row_to_json(const GridRow& row);

}  // namespace voxformer
