// SPDX-License-Identifier: Apache-2.0
#include "voxformer/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>

#include "voxformer/checkpoint.hpp"
#include "voxformer/nn/functional.hpp"
#include "voxformer/ops.hpp"
#include "voxformer/parallel.hpp"

namespace voxformer {

using json = nlohmann::ordered_json;
using std::int64_t;

namespace {

json train_config_json(const TrainConfig& t) {
  return {{"lr", t.lr},
          {"weight_decay", t.weight_decay},
          {"step_size", t.step_size},
          {"gamma", t.gamma},
          {"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"embed_dim", t.embed_dim},
          {"warmup_epochs", t.warmup_epochs}};
}

TrainConfig train_config_from(const json& j) {
  TrainConfig t;
  t.lr = j.at("lr").get<double>();
  t.weight_decay = j.at("weight_decay").get<double>();
  t.step_size = j.at("step_size").get<int64_t>();
  t.gamma = j.at("gamma").get<double>();
  t.epochs = j.at("epochs").get<int64_t>();
  t.batch_size = j.at("batch_size").get<int64_t>();
  t.embed_dim = j.at("embed_dim").get<int64_t>();
  t.warmup_epochs = j.at("warmup_epochs").get<int64_t>();
  return t;
}

// Logs and checkpoints written inside out_dir leave it out.
json run_json(const RunConfig& c, bool with_out_dir = true) {
  json j{{"model", json::parse(model_config_to_json(c.model))},
         {"train", train_config_json(c.train)},
         {"data_dir", c.data_dir.string()}};
  if (with_out_dir) j["out_dir"] = c.out_dir.string();
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  return j;
}

std::string text_of(const std::vector<std::uint8_t>& bytes) {
  return {reinterpret_cast<const char*>(bytes.data()), bytes.size()};
}

void validate_run(const RunConfig& c) {
  const auto& t = c.train;
  if (t.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (t.batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (c.threads < 1) throw ConfigError("threads must be >= 1");
  if (c.model.kind == ModelKind::convnet3d4 && t.embed_dim != 512) {
    throw ConfigError("ConvNet3D-4 uses a 512-dimensional embedding");
  }
  t.schedule().validate();
  shape_infer(c.model);
}

Tensor stack(std::span<const Sample> samples, std::span<const std::size_t> order, std::size_t begin,
             std::size_t end, std::vector<int64_t>& labels) {
  std::vector<Tensor> parts;
  labels.clear();
  for (std::size_t i = begin; i < end; ++i) {
    parts.push_back(samples[order[i]].volume);
    labels.push_back(static_cast<int64_t>(samples[order[i]].label));
  }
  return parts.size() == 1 ? parts.front() : concat(std::span<const Tensor>(parts), 0);
}

}  // namespace

std::string run_config_to_json(const RunConfig& config) { return run_json(config).dump(); }

RunConfig run_config_from_json(std::string_view text) {
  try {
    const json j = json::parse(text);
    RunConfig c;
    c.model = model_config_from_json(j.at("model").dump());
    c.train = train_config_from(j.at("train"));
    c.data_dir = j.at("data_dir").get<std::string>();
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.threads = j.at("threads").get<int>();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
}

PreparedData prepare_data(const std::filesystem::path& data_dir, const VolumeExtents& extents, DType dtype) {
  const auto split_path = data_dir / "split.json";
  if (!std::filesystem::exists(split_path)) {
    throw DataError("no split at " + split_path.string() + "; run the split command first");
  }
  PreparedData d;
  d.split = parse_split(text_of(read_file_bytes(split_path)));
  if (!d.split.audit.clean()) throw DataError("split audit reports subject leakage; refusing to train");
  if (d.split.train.empty()) throw DataError("split has an empty train side");
  std::vector<Volume> train_volumes;
  for (const auto& r : d.split.train) train_volumes.push_back(read_volume(data_dir / r.path));
  d.stats = compute_intensity_stats(train_volumes);
  train_volumes.clear();
  d.train = load_samples(d.split.train, data_dir, d.stats, extents, dtype);
  d.val = load_samples(d.split.val, data_dir, d.stats, extents, dtype);
  d.test = load_samples(d.split.test, data_dir, d.stats, extents, dtype);
  return d;
}

std::vector<int64_t> predict(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("predict expects [N,C] logits, got " + logits.shape().to_string());
  const int64_t N = logits.shape()[0], C = logits.shape()[1];
  const auto v = logits.to_vector();
  std::vector<int64_t> out(static_cast<std::size_t>(N));
  for (int64_t n = 0; n < N; ++n) {
    const auto row = v.begin() + n * C;
    out[static_cast<std::size_t>(n)] = std::max_element(row, row + C) - row;
  }
  return out;
}

EvalResult evaluate(Model& model, std::span<const Sample> samples) {
  const bool was_training = model.training();
  model.eval();
  NoGradGuard no_grad;
  Rng unused(0);
  EvalResult r;
  double loss = 0.0;
  int64_t correct = 0;
  for (const auto& s : samples) {
    Tensor logits = model.forward(s.volume, unused);
    const int64_t y = static_cast<int64_t>(s.label);
    loss += nn::cross_entropy(logits, std::span(&y, 1)).item();
    const int64_t p = predict(logits)[0];
    if (p < 0 || p > 1) throw DataError("evaluation expects a two-class model");
    ++r.confusion[static_cast<std::size_t>(y)][static_cast<std::size_t>(p)];
    correct += p == y;
  }
  r.total = static_cast<int64_t>(samples.size());
  if (r.total > 0) {
    r.accuracy = static_cast<double>(correct) / static_cast<double>(r.total);
    r.loss = loss / static_cast<double>(r.total);
  }
  model.train(was_training);
  return r;
}

TrainResult train_model(const RunConfig& config, const PreparedData& data, const EpochCallback& on_epoch) {
  validate_run(config);
  set_num_threads(config.threads);
  std::filesystem::create_directories(config.out_dir);

  const Rng root(config.seed);
  Rng init_rng = root.fork(1);
  Rng order_rng = root.fork(2);
  Rng dropout_rng = root.fork(3);
  auto model = build_model(config.model, init_rng);
  AdamW opt(model->named_parameters(), AdamWHyper{config.train.lr, config.train.weight_decay});
  const ScheduleConfig schedule = config.train.schedule();

  TrainResult result;
  result.metrics_path = config.out_dir / "metrics.jsonl";
  result.checkpoint_path = config.out_dir / "best.vxck";
  std::filesystem::remove(result.checkpoint_path);
  std::ofstream log(result.metrics_path, std::ios::trunc);
  if (!log) throw DataError("cannot write " + result.metrics_path.string());
  log << json{{"event", "config"}, {"run", run_json(config, false)}}.dump() << '\n';

  result.initial = evaluate(*model, data.test);
  log << json{{"event", "initial"}, {"test_loss", result.initial.loss}, {"test_accuracy", result.initial.accuracy}}
             .dump()
      << '\n';
  log.flush();

  std::vector<std::size_t> order(data.train.size());
  std::vector<int64_t> labels;
  const auto batch = static_cast<std::size_t>(config.train.batch_size);
  for (int64_t epoch = 0; epoch < config.train.epochs; ++epoch) {
    const double lr = lr_at(epoch, schedule);
    opt.set_lr(lr);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);

    model->train();
    double loss_sum = 0.0;
    int64_t correct = 0;
    for (std::size_t b = 0; b < order.size(); b += batch) {
      const std::size_t e = std::min(order.size(), b + batch);
      Tensor x = stack(data.train, order, b, e, labels);
      Tensor logits = model->forward(x, dropout_rng);
      Tensor loss = nn::cross_entropy(logits, labels);
      const auto preds = predict(logits);
      for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == labels[i];
      loss_sum += loss.item() * static_cast<double>(e - b);
      if (!std::isfinite(loss.item())) throw NumericError("training loss became non-finite at epoch " + std::to_string(epoch));
      loss.backward();
      opt.step();
      opt.zero_grad();
    }

    const EvalResult test = evaluate(*model, data.test);
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    m.train_loss = loss_sum / static_cast<double>(order.size());
    m.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
    m.test_loss = test.loss;
    m.test_accuracy = test.accuracy;
    m.improved = test.accuracy > result.best_test_accuracy;
    if (m.improved) {
      result.best_test_accuracy = test.accuracy;
      result.best_epoch = epoch;
      json meta{{"model", json::parse(model_config_to_json(config.model))},
                {"run", run_json(config, false)},
                {"epoch", epoch},
                {"test_accuracy", test.accuracy},
                {"stats", {{"mean", data.stats.mean}, {"stddev", data.stats.stddev}}}};
      save_checkpoint(result.checkpoint_path, *model, meta.dump());
      result.checkpoint_written = true;
    }
    log << json{{"event", "epoch"},
                {"epoch", m.epoch},
                {"lr", m.lr},
                {"train_loss", m.train_loss},
                {"train_accuracy", m.train_accuracy},
                {"test_loss", m.test_loss},
                {"test_accuracy", m.test_accuracy},
                {"improved", m.improved}}
               .dump()
        << '\n';
    log.flush();
    result.epochs.push_back(m);
    if (on_epoch && !on_epoch(m)) break;
  }
  return result;
}

TrainResult run_training(const RunConfig& config, const EpochCallback& on_epoch) {
  validate_run(config);
  const auto data = prepare_data(config.data_dir, config.model.input, config.model.dtype);
  return train_model(config, data, on_epoch);
}

LoadedModel load_trained_model(const std::filesystem::path& path) {
  const Checkpoint ck = read_checkpoint(path);
  LoadedModel out;
  try {
    const json meta = json::parse(ck.config_json);
    out.config = model_config_from_json(meta.at("model").dump());
    out.stats.mean = meta.at("stats").at("mean").get<double>();
    out.stats.stddev = meta.at("stats").at("stddev").get<double>();
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": checkpoint lacks training metadata: " + e.what());
  }
  Rng rng(0);
  out.model = build_model(out.config, rng);
  load_state(*out.model, ck);
  out.model->eval();
  return out;
}

std::string grid_row_to_json(const GridRow& row) {
  json j{{"index", row.index}, {"status", row.ok ? "ok" : "error"}, {"run", run_json(row.config)}};
  if (row.ok) {
    j["best_test_accuracy"] = row.best_test_accuracy;
    j["final_test_accuracy"] = row.final_test_accuracy;
    j["best_epoch"] = row.best_epoch;
  } else {
    j["error"] = row.error;
  }
  return j.dump();
}

std::vector<GridRow> run_grid(const RunConfig& tmpl, const GridSpec& grid, std::optional<std::size_t> limit) {
  auto configs = grid_enumerate(grid, tmpl.train);
  if (limit && *limit < configs.size()) configs.resize(*limit);
  std::filesystem::create_directories(tmpl.out_dir);
  const auto data = prepare_data(tmpl.data_dir, tmpl.model.input, tmpl.model.dtype);

  std::vector<GridRow> rows;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    GridRow row;
    row.index = i;
    row.config = tmpl;
    row.config.train = configs[i];
    char name[32];
    std::snprintf(name, sizeof name, "run-%03zu", i);
    row.config.out_dir = tmpl.out_dir / name;
    try {
      const auto r = train_model(row.config, data);
      row.ok = true;
      row.best_test_accuracy = std::max(r.best_test_accuracy, 0.0);
      row.final_test_accuracy = r.epochs.empty() ? r.initial.accuracy : r.epochs.back().test_accuracy;
      row.best_epoch = r.best_epoch;
    } catch (const Error& e) {
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  std::stable_sort(rows.begin(), rows.end(), [](const GridRow& a, const GridRow& b) {
    if (a.ok != b.ok) return a.ok;
    return a.best_test_accuracy > b.best_test_accuracy;
  });
  std::string text;
  for (const auto& r : rows) text += grid_row_to_json(r) + "\n";
  write_file_bytes(tmpl.out_dir / "grid.jsonl", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  return rows;
}

}  // namespace voxformer
