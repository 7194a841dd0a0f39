// SPDX-License-Identifier: Apache-2.0
#include "voxformer_app/app.hpp"

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <json.hpp>

#include "voxformer/checkpoint.hpp"
#include "voxformer/error.hpp"
#include "voxformer/train.hpp"
#include "voxformer_app/verify.hpp"

namespace voxformer::app {

using json = nlohmann::ordered_json;

VolumeExtents parse_extents(std::string_view text) {
  std::vector<std::int64_t> parts;
  std::string cur;
  auto flush = [&] {
    if (cur.empty()) throw ConfigError("malformed extents '" + std::string(text) + "'");
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(cur, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != cur.size() || v < 1) throw ConfigError("malformed extents '" + std::string(text) + "'");
    parts.push_back(v);
    cur.clear();
  };
  for (char ch : text) {
    if (ch == ',' || ch == 'x') {
      flush();
    } else {
      cur += ch;
    }
  }
  flush();
  if (parts.size() == 1) return {parts[0], parts[0], parts[0]};
  if (parts.size() == 3) return {parts[0], parts[1], parts[2]};
  throw ConfigError("extents need one or three values, got '" + std::string(text) + "'");
}

std::uint64_t resolve_seed(std::optional<std::uint64_t> flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("VOXFORMER_SEED"); env != nullptr && *env != '\0') {
    char* end = nullptr;
    const auto v = std::strtoull(env, &end, 10);
    if (end == nullptr || *end != '\0') throw ConfigError("VOXFORMER_SEED must be an unsigned integer");
    return v;
  }
  return 0;
}

namespace {

struct RunFlags {
  std::string model = "convnet3d4";
  std::string size = "tiny";
  std::string norm = "in";
  std::string dtype = "f32";
  double lr = 0.001;
  double wd = 0.001;
  std::int64_t step = 25;
  double gamma = 0.3;
  std::int64_t epochs = 100;
  std::int64_t batch = 1;
  std::optional<std::uint64_t> seed;
  std::string data;
  std::string out;
  std::string extents = "32";
  int threads = 1;

  void attach(CLI::App& cmd) {
    cmd.add_option("--model", model, "vvit | cvvt | convnet3d4")->capture_default_str();
    cmd.add_option("--size", size, "tiny | small | base (transformers)")->capture_default_str();
    cmd.add_option("--norm", norm, "bn | in (convnet3d4)")->capture_default_str();
    cmd.add_option("--dtype", dtype, "f32 | f64")->capture_default_str();
    cmd.add_option("--lr", lr, "base learning rate")->capture_default_str();
    cmd.add_option("--wd", wd, "AdamW weight decay")->capture_default_str();
    cmd.add_option("--step", step, "step-decay period in epochs")->capture_default_str();
    cmd.add_option("--gamma", gamma, "step-decay factor")->capture_default_str();
    cmd.add_option("--epochs", epochs, "training epochs")->capture_default_str();
    cmd.add_option("--batch", batch, "batch size")->capture_default_str();
    cmd.add_option("--seed", seed, "seed (falls back to VOXFORMER_SEED, then 0)");
    cmd.add_option("--data", data, "dataset directory (manifest.jsonl, split.json)")->required();
    cmd.add_option("--out", out, "output directory")->required();
    cmd.add_option("--extents", extents, "input extents, e.g. 32 or 81,81,81")->capture_default_str();
    cmd.add_option("--threads", threads, "kernel threads")->capture_default_str();
  }

  [[nodiscard]] RunConfig config() const {
    RunConfig c;
    c.model.kind = parse_model_kind(model);
    c.model.size = parse_model_size(size);
    c.model.norm = nn::parse_norm_kind(norm);
    c.model.dtype = parse_dtype(dtype);
    c.model.input = parse_extents(extents);
    c.train.lr = lr;
    c.train.weight_decay = wd;
    c.train.step_size = step;
    c.train.gamma = gamma;
    c.train.epochs = epochs;
    c.train.batch_size = batch;
    c.data_dir = data;
    c.out_dir = out;
    c.seed = resolve_seed(seed);
    c.threads = threads;
    return c;
  }
};

json confusion_json(const EvalResult& r) {
  return {{"CN", {{"CN", r.confusion[0][0]}, {"AD", r.confusion[0][1]}}},
          {"AD", {{"CN", r.confusion[1][0]}, {"AD", r.confusion[1][1]}}}};
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Volumetric classifiers: synthesis, splitting, training, evaluation and self-checks", "voxformer"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic two-class dataset");
  SynthConfig synth_cfg;
  std::string synth_out, synth_extents = "32", synth_model;
  std::optional<std::uint64_t> synth_seed;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth_cfg.n_subjects = 100;
  synth->add_option("--subjects", synth_cfg.n_subjects, "number of subjects")->capture_default_str();
  synth->add_option("--sessions", synth_cfg.sessions_per_subject, "sessions per subject")->capture_default_str();
  synth->add_option("--extents", synth_extents, "volume extents")->capture_default_str();
  synth->add_option("--amplitude", synth_cfg.signal_amplitude, "AD atrophy amplitude")->capture_default_str();
  synth->add_option("--noise", synth_cfg.noise_stddev, "voxel noise stddev")->capture_default_str();
  synth->add_option("--model", synth_model, "reject extents this model cannot take");
  synth->add_option("--seed", synth_seed, "seed");

  // split
  auto* split = app.add_subcommand("split", "subject-level train/test split of a dataset");
  std::string split_data;
  std::int64_t test_per_class = 25;
  double val_fraction = 0.0;
  std::optional<std::uint64_t> split_seed;
  split->add_option("--data", split_data, "dataset directory")->required();
  split->add_option("--test-per-class", test_per_class, "test subjects per class")->capture_default_str();
  split->add_option("--val-fraction", val_fraction, "validation share of the remaining subjects")
      ->capture_default_str();
  split->add_option("--seed", split_seed, "seed");

  // train
  auto* train = app.add_subcommand("train", "train one model");
  RunFlags train_flags;
  train_flags.attach(*train);

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_ckpt, eval_data, eval_side = "test";
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--side", eval_side, "train | val | test")->capture_default_str();

  // verify
  auto* verify_cmd = app.add_subcommand("verify", "run a self-check suite");
  std::string suite;
  std::optional<std::uint64_t> verify_seed;
  std::size_t model_coords = 2;
  verify_cmd->add_option("suite", suite, "gradcheck | params | shapes | norms")->required();
  verify_cmd->add_option("--seed", verify_seed, "seed");
  verify_cmd->add_option("--model-coords", model_coords, "sampled coordinates per tensor for the model gradcheck")
      ->capture_default_str();

  // grid
  auto* grid = app.add_subcommand("grid", "hyper-parameter grid search");
  RunFlags grid_flags;
  grid_flags.attach(*grid);
  std::optional<std::size_t> limit;
  grid->add_option("--limit", limit, "run only the first N grid points");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*synth) {
      synth_cfg.extents = parse_extents(synth_extents);
      synth_cfg.seed = resolve_seed(synth_seed);
      if (!synth_model.empty()) {
        ModelConfig mc;
        mc.kind = parse_model_kind(synth_model);
        mc.input = synth_cfg.extents;
        shape_infer(mc);
      }
      const auto m = synth_generate(synth_cfg, synth_out);
      const auto labels = synth_labels(synth_cfg);
      const auto ad = std::count(labels.begin(), labels.end(), Label::AD);
      out << json{{"dir", synth_out},
                  {"subjects", synth_cfg.n_subjects},
                  {"records", m.records.size()},
                  {"AD", ad},
                  {"CN", synth_cfg.n_subjects - ad}}
                 .dump()
          << '\n';
    } else if (*split) {
      const std::filesystem::path dir = split_data;
      const auto manifest = read_manifest(dir / "manifest.jsonl");
      const auto s = subject_split(manifest, test_per_class, resolve_seed(split_seed), val_fraction);
      const std::string text = serialize_split(s);
      write_file_bytes(dir / "split.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
      out << json{{"train", {{"AD", s.count(s.train, Label::AD)}, {"CN", s.count(s.train, Label::CN)}}},
                  {"val", {{"AD", s.count(s.val, Label::AD)}, {"CN", s.count(s.val, Label::CN)}}},
                  {"test", {{"AD", s.count(s.test, Label::AD)}, {"CN", s.count(s.test, Label::CN)}}},
                  {"audit", {{"subjects_checked", s.audit.subjects_checked}, {"violations", s.audit.violations}}}}
                 .dump()
          << '\n';
      if (!s.audit.clean()) return kDataError;
    } else if (*train) {
      const RunConfig cfg = train_flags.config();
      const auto r = run_training(cfg, [&](const EpochMetrics& m) {
        out << "epoch " << m.epoch << " lr " << m.lr << " train_loss " << fixed(m.train_loss) << " train_acc "
            << fixed(m.train_accuracy) << " test_acc " << fixed(m.test_accuracy) << (m.improved ? " *" : "") << '\n';
        out.flush();
        return true;
      });
      out << json{{"model", cfg.model.label()},
                  {"initial_test_accuracy", r.initial.accuracy},
                  {"best_test_accuracy", r.best_epoch >= 0 ? json(r.best_test_accuracy) : json(nullptr)},
                  {"best_epoch", r.best_epoch},
                  {"metrics", r.metrics_path.string()},
                  {"checkpoint", r.checkpoint_written ? json(r.checkpoint_path.string()) : json(nullptr)}}
                 .dump()
          << '\n';
    } else if (*eval) {
      const std::filesystem::path dir = eval_data;
      auto loaded = load_trained_model(eval_ckpt);
      const auto s = parse_split([&] {
        const auto bytes = read_file_bytes(dir / "split.json");
        return std::string(reinterpret_cast<const char*>(bytes.data()), bytes.size());
      }());
      const std::vector<VolumeRecord>* side = nullptr;
      if (eval_side == "train") side = &s.train;
      if (eval_side == "val") side = &s.val;
      if (eval_side == "test") side = &s.test;
      if (side == nullptr) throw ConfigError("--side must be train, val or test");
      if (!side->empty()) {
        const auto first = read_volume(dir / side->front().path);
        if (first.extents != loaded.config.input) {
          throw ConfigError("checkpoint expects " + std::to_string(loaded.config.input[0]) + "x" +
                            std::to_string(loaded.config.input[1]) + "x" + std::to_string(loaded.config.input[2]) +
                            " volumes, data has " + std::to_string(first.extents[0]) + "x" +
                            std::to_string(first.extents[1]) + "x" + std::to_string(first.extents[2]));
        }
      }
      const auto samples = load_samples(*side, dir, loaded.stats, loaded.config.input, loaded.config.dtype);
      const auto r = evaluate(*loaded.model, samples);
      out << json{{"model", loaded.config.label()},
                  {"side", eval_side},
                  {"total", r.total},
                  {"accuracy", r.accuracy},
                  {"loss", r.loss},
                  {"confusion", confusion_json(r)}}
                 .dump()
          << '\n';
    } else if (*verify_cmd) {
      const auto seed = resolve_seed(verify_seed);
      const auto results = suite == "gradcheck" ? verify::gradcheck_suite(seed, model_coords)
                                                : verify::run_suite(suite, seed);
      std::size_t failed = 0;
      for (const auto& r : results) {
        out << verify::to_json(r) << '\n';
        failed += r.passed ? 0 : 1;
      }
      out << json{{"suite", suite}, {"checks", results.size()}, {"failed", failed}, {"passed", failed == 0}}.dump()
          << '\n';
      return failed == 0 ? kOk : kVerifyFailed;
    } else if (*grid) {
      const RunConfig tmpl = grid_flags.config();
      const auto rows = run_grid(tmpl, GridSpec{}, limit);
      out << "rank  lr       wd      step  gamma  best_acc  final_acc  status\n";
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        char line[160];
        std::snprintf(line, sizeof line, "%-5zu %-8g %-7g %-5lld %-6g %-9s %-10s %s\n", i + 1, r.config.train.lr,
                      r.config.train.weight_decay, static_cast<long long>(r.config.train.step_size),
                      r.config.train.gamma, r.ok ? fixed(r.best_test_accuracy).c_str() : "-",
                      r.ok ? fixed(r.final_test_accuracy).c_str() : "-", r.ok ? "ok" : r.error.c_str());
        out << line;
      }
      out << "results: " << (tmpl.out_dir / "grid.jsonl").string() << '\n';
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const ShapeError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kOk;
}

}  // namespace voxformer::app
