// SPDX-License-Identifier: Apache-2.0
//
// One PASS/FAIL line per acceptance criterion. Exit status is the number of
// failed criteria (capped at 125).

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>
#include <unistd.h>

#include "voxformer/checkpoint.hpp"
#include "voxformer/data.hpp"
#include "voxformer/error.hpp"
#include "voxformer/gradcheck.hpp"
#include "voxformer/models.hpp"
#include "voxformer/nn/functional.hpp"
#include "voxformer/ops.hpp"
#include "voxformer/optim.hpp"
#include "voxformer/parallel.hpp"
#include "voxformer/train.hpp"
#include "voxformer_app/verify.hpp"

namespace voxformer::acceptance {
namespace {

using Clock = std::chrono::steady_clock;

struct Verdict {
  bool passed = true;
  std::vector<std::string> notes;

  void expect(bool ok, const std::string& what) {
    if (!ok) passed = false;
    notes.push_back((ok ? "" : "FAILED ") + what);
  }
};

std::string num(double v, int precision = 6) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

Tensor uniform(const Shape& shape, Rng& rng, double lo, double hi, DType dtype) {
  std::vector<double> v(static_cast<std::size_t>(shape.numel()));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_values(shape, v, dtype);
}

std::vector<std::int64_t> step_shape(const ShapeTrace& trace, std::string_view layer) {
  for (const auto& s : trace) {
    if (s.layer == layer) return s.shape;
  }
  throw Error("trace has no layer " + std::string(layer));
}

// 1 -------------------------------------------------------------------------

Verdict parameter_counts() {
  Verdict v;
  Rng rng(1);
  VViT vvit(VViTConfig{}, DType::f32, rng);
  const auto vp = param_count(vvit);
  const auto embed = vp.group("embedding");
  const auto encoder = vp.group("encoder");
  v.expect(embed == 50LL * 50 * 50 * 192 + 192 && embed == 24'000'192,
           "VViT-tiny patch embedding " + std::to_string(embed) + " == 24000192");
  v.expect(std::abs(static_cast<double>(encoder) - 5.3e6) <= 0.1 * 5.3e6,
           "tiny encoder " + std::to_string(encoder) + " within 10% of 5.3M");
  CVVT cvvt(CVVTConfig{}, DType::f32, rng);
  const auto cp = param_count(cvvt);
  const auto c_embed = cp.group("embedding");
  v.expect(c_embed >= 500'000 && c_embed <= 3'000'000, "CVVT-tiny embedding " + std::to_string(c_embed) + " in [0.5M, 3M]");
  v.expect(c_embed < cp.group("encoder"), "CVVT-tiny embedding < encoder " + std::to_string(cp.group("encoder")));
  return v;
}

// 2 -------------------------------------------------------------------------

Verdict patch_geometry() {
  Verdict v;
  const Tensor adni = Tensor::zeros(Shape{1, 1, 169, 208, 179});
  const Tensor patches = vvit_patchify(adni, 50);
  v.expect(patches.shape() == Shape({1, 80, 125000}), "vvit_patchify(169x208x179, 50) -> " + patches.shape().to_string());
  const std::int64_t per_axis = ((169 + 49) / 50) * ((208 + 49) / 50) * ((179 + 49) / 50);
  v.expect(per_axis == 80, "4*5*4 = " + std::to_string(per_axis));

  const auto trace = shape_infer(CVVTConfig{});
  const auto grid = step_shape(trace, "grid");
  const auto tokens = step_shape(trace, "embedding");
  v.expect(grid == std::vector<std::int64_t>{1, 80, 10, 10, 10}, "CVVT feature grid " + Shape(std::span<const std::int64_t>(grid)).to_string());
  v.expect(tokens[1] == 80, "CVVT tokens " + std::to_string(tokens[1]));
  return v;
}

// 3 -------------------------------------------------------------------------

Verdict full_size_shapes() {
  Verdict v;
  ConvNet3D4Config cfg;
  const auto trace = shape_infer(cfg);
  std::array<std::int64_t, 3> e{169, 208, 179};
  for (int b = 0; b < 4; ++b) {
    for (auto& l : e) l = (l - 3) / 3 + 1;
  }
  v.expect(step_shape(trace, "block4.pool") == std::vector<std::int64_t>{1, 512, e[0], e[1], e[2]} && e[0] == 2 &&
               e[1] == 2 && e[2] == 2,
           "block4 [512,2,2,2]");
  v.expect(step_shape(trace, "flatten") == std::vector<std::int64_t>{1, 4096}, "flatten 4096");
  v.expect(step_shape(trace, "embedding") == std::vector<std::int64_t>{1, 512}, "embedding 512");

  Rng rng(3);
  NoGradGuard no_grad;
  for (auto in : {Extents3{81, 81, 81}, Extents3{90, 99, 84}}) {
    ConvNet3D4Config small = cfg;
    small.input = in;
    small.channels = {1, 8, 8, 8, 16};
    ConvNet3D4 model(small, DType::f32, rng);
    model.eval();
    ShapeTrace executed;
    (void)model.forward(Tensor::zeros(Shape{1, 1, in[0], in[1], in[2]}), rng, &executed);
    v.expect(executed == shape_infer(small), "executed forward at " + std::to_string(in[0]) + "x" +
                                                 std::to_string(in[1]) + "x" + std::to_string(in[2]) +
                                                 " matches shape_infer");
  }
  return v;
}

// 4 -------------------------------------------------------------------------

Verdict gradient_integrity(std::uint64_t seed, std::size_t model_coords) {
  Verdict v;
  const auto results = verify::gradcheck_suite(seed, model_coords);
  double worst_op = 0.0;
  std::size_t ops = 0;
  for (const auto& r : results) {
    const bool model_check = r.name == "cvvt_tiny_32";
    const double limit = model_check ? 1e-3 : 1e-4;
    if (!model_check) {
      ++ops;
      worst_op = std::max(worst_op, r.value);
    }
    if (!r.passed || !(r.value < limit) || model_check) {
      v.expect(r.passed && r.value < limit, r.name + " rel err " + num(r.value, 3) + " < " + num(limit));
    }
  }
  v.expect(worst_op < 1e-4, std::to_string(ops) + " operator checks, worst rel err " + num(worst_op, 3));
  return v;
}

// 5 -------------------------------------------------------------------------

Verdict norm_identity(std::uint64_t seed) {
  Verdict v;
  Rng rng(seed);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const auto C = static_cast<std::int64_t>(1 + rng.below(6));
    const Shape s{1, C, static_cast<std::int64_t>(2 + rng.below(7)), static_cast<std::int64_t>(2 + rng.below(7)),
                  static_cast<std::int64_t>(2 + rng.below(7))};
    const double scale = rng.uniform(0.1, 10.0), shift = rng.uniform(-5.0, 5.0);
    Tensor x = uniform(s, rng, shift - scale, shift + scale, DType::f32);
    Tensor gamma = uniform(Shape{C}, rng, 0.5, 2.0, DType::f32);
    Tensor beta = uniform(Shape{C}, rng, -1.0, 1.0, DType::f32);
    nn::RunningStats stats{Tensor::zeros(Shape{C}), Tensor::ones(Shape{C})};
    const auto bn = nn::batchnorm3d(x, gamma, beta, stats, true).to_vector();
    const auto in = nn::instancenorm3d(x, gamma, beta).to_vector();
    for (std::size_t i = 0; i < bn.size(); ++i) worst = std::max(worst, std::abs(bn[i] - in[i]));
  }
  v.expect(worst < 1e-5, "100 random inputs, max abs diff " + num(worst, 3) + " < 1e-5");
  return v;
}

// 6 -------------------------------------------------------------------------

Verdict schedule_and_optimizer(std::uint64_t seed) {
  Verdict v;
  ScheduleConfig s;
  s.base_lr = 0.01;
  s.step_size = 25;
  s.gamma = 0.3;
  v.expect(lr_at(4, s) == 0.01 * 5 / 10, "lr_at(4) = " + num(lr_at(4, s)) + " == 0.005");
  v.expect(lr_at(9, s) == 0.01, "lr_at(9) == base");
  v.expect(std::abs(lr_at(60, s) - 9e-4) <= 1e-18, "lr_at(60) = " + num(lr_at(60, s), 17) + " == 9e-4");

  Rng rng(seed);
  double worst = 0.0;
  for (double wd : {0.0, 0.001}) {
    for (int trial = 0; trial < 10; ++trial) {
      double theta = rng.uniform(-1.0, 1.0), m = 0.0, vv = 0.0;
      const double lr = 0.001;
      Tensor p = Tensor::from_values(Shape{1}, {theta}, DType::f64);
      p.set_requires_grad(true);
      AdamW opt({{"p", p}}, {.lr = lr, .weight_decay = wd});
      for (int t = 1; t <= 100; ++t) {
        const double g = rng.normal();
        p.zero_grad();
        sum(mul(p, g)).backward();
        opt.step();
        m = 0.9 * m + 0.1 * g;
        vv = 0.999 * vv + 0.001 * g * g;
        const double mh = m / (1.0 - std::pow(0.9, t)), vh = vv / (1.0 - std::pow(0.999, t));
        theta = theta - lr * mh / (std::sqrt(vh) + 1e-8) - lr * wd * theta;
        worst = std::max(worst, std::abs(p.item() - theta) / std::abs(theta));
      }
    }
  }
  v.expect(worst < 1e-10, "AdamW vs scalar oracle, 100 steps x 20 runs, max rel err " + num(worst, 3));
  const auto grid = grid_enumerate(GridSpec{});
  v.expect(grid.size() == 54, "grid size " + std::to_string(grid.size()));
  return v;
}

// 7 -------------------------------------------------------------------------

Verdict loss_contract(std::uint64_t seed) {
  Verdict v;
  const std::vector<std::int64_t> y{1};
  const double uniform_loss = nn::cross_entropy(Tensor::from_values(Shape{1, 2}, {0.3, 0.3}, DType::f64), y).item();
  v.expect(std::abs(uniform_loss - std::numbers::ln2) < 1e-7, "uniform logits loss - ln 2 = " + num(uniform_loss - std::numbers::ln2, 3));

  Rng rng(seed);
  double worst_fd = 0.0, worst_closed = 0.0;
  for (int t = 0; t < 50; ++t) {
    const std::vector<double> z{rng.uniform(-4.0, 4.0), rng.uniform(-4.0, 4.0)};
    const std::int64_t label = static_cast<std::int64_t>(rng.below(2));
    Tensor logits = Tensor::from_values(Shape{1, 2}, z, DType::f64);
    logits.set_requires_grad(true);
    const std::vector<std::int64_t> lab{label};
    nn::cross_entropy(logits, lab).backward();
    const auto g = logits.grad().to_vector();
    const double mx = std::max(z[0], z[1]);
    const double e0 = std::exp(z[0] - mx), e1 = std::exp(z[1] - mx);
    const std::array<double, 2> p{e0 / (e0 + e1), e1 / (e0 + e1)};
    auto loss_at = [&](int k, double h) {
      std::vector<double> zz = z;
      zz[static_cast<std::size_t>(k)] += h;
      return nn::cross_entropy(Tensor::from_values(Shape{1, 2}, zz, DType::f64), lab).item();
    };
    for (int k = 0; k < 2; ++k) {
      const double fd = (loss_at(k, 1e-6) - loss_at(k, -1e-6)) / 2e-6;
      worst_fd = std::max(worst_fd, std::abs(g[static_cast<std::size_t>(k)] - fd));
      const double closed = p[static_cast<std::size_t>(k)] - (k == label ? 1.0 : 0.0);
      worst_closed = std::max(worst_closed, std::abs(g[static_cast<std::size_t>(k)] - closed));
    }
  }
  v.expect(worst_fd < 1e-6, "gradient vs finite difference, max abs " + num(worst_fd, 3));
  v.expect(worst_closed < 1e-6, "gradient vs softmax - onehot, max abs " + num(worst_closed, 3));
  return v;
}

// 8 -------------------------------------------------------------------------

VolumeRecord rec(std::string subject, std::string session, Label label, bool preferred,
                 std::optional<std::int64_t> quality, std::int64_t visit) {
  return {std::move(subject), std::move(session), label, "", preferred, quality, visit};
}

Verdict leakage_guards() {
  Verdict v;
  std::size_t violations = 0;
  Rng rng(8);
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Manifest m;
    const auto subjects = 10 + static_cast<std::int64_t>(rng.below(11));
    for (std::int64_t t = 0; t < 3; ++t) {
      for (std::int64_t s = 0; s < subjects; ++s) {
        if (t == 2 && s % 2 == 0) continue;
        std::optional<std::int64_t> q;
        if (rng.uniform() < 0.5) q = static_cast<std::int64_t>(1 + rng.below(3));
        m.records.push_back(rec("sub-" + std::to_string(s), "ses-" + std::to_string(t),
                                s % 2 == 0 ? Label::AD : Label::CN, rng.uniform() < 0.2, q, t + 1));
      }
    }
    const auto split = subject_split(m, 3, seed, seed % 2 == 0 ? 0.0 : 0.25);
    std::set<std::string> train, held;
    for (const auto& r : split.train) train.insert(r.subject_id);
    for (const auto& side : {&split.val, &split.test}) {
      for (const auto& r : *side) {
        if (train.contains(r.subject_id) || !held.insert(r.subject_id).second) ++violations;
      }
    }
    if (!audit_split(m, split).clean()) ++violations;
  }
  v.expect(violations == 0, "1000 seeds on multi-session manifests, cross-split subjects " + std::to_string(violations));

  struct Row {
    std::vector<VolumeRecord> records;
    std::string expected;
    std::string tier;
  };
  const std::vector<Row> table{
      {{rec("a", "v1", Label::CN, false, 1, 1), rec("a", "v3", Label::CN, true, std::nullopt, 3)}, "v3", "preferred"},
      {{rec("b", "v1", Label::AD, false, 2, 1), rec("b", "v2", Label::AD, false, 1, 2),
        rec("b", "v3", Label::AD, false, std::nullopt, 3)},
       "v2",
       "quality"},
      {{rec("c", "v2", Label::CN, false, std::nullopt, 2), rec("c", "v1", Label::CN, false, std::nullopt, 1),
        rec("c", "v3", Label::CN, false, std::nullopt, 3)},
       "v1",
       "first visit"},
  };
  for (const auto& row : table) {
    auto records = row.records;
    const auto by_session = [](const VolumeRecord& a, const VolumeRecord& b) { return a.session_id < b.session_id; };
    std::sort(records.begin(), records.end(), by_session);
    bool ok = true;
    do {
      ok = ok && scan_select(records).session_id == row.expected;
    } while (std::next_permutation(records.begin(), records.end(), by_session));
    v.expect(ok, "scan_select tier '" + row.tier + "' -> " + row.expected + " under every record order");
  }
  return v;
}

// 9 and 10 ------------------------------------------------------------------

struct LearningPlan {
  std::filesystem::path work;
  std::uint64_t seed = 0;
  std::int64_t subjects = 100;
  std::int64_t test_per_class = 25;
  std::int64_t convnet_extent = 81;
  std::int64_t convnet_subjects = 100;
  double convnet_lr = 1e-4;
  double cvvt_lr = 1e-4;
};

std::filesystem::path make_dataset(const std::filesystem::path& dir, std::int64_t subjects, std::int64_t extent,
                                   std::int64_t test_per_class, std::uint64_t seed) {
  if (!std::filesystem::exists(dir / "split.json")) {
    SynthConfig c;
    c.n_subjects = subjects;
    c.extents = {extent, extent, extent};
    c.seed = seed;
    const auto m = synth_generate(c, dir);
    const auto split = subject_split(m, test_per_class, seed);
    const auto text = serialize_split(split);
    write_file_bytes(dir / "split.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }
  return dir;
}

struct Reached {
  double best = 0.0;
  std::int64_t epoch = -1;
  std::int64_t epochs_run = 0;
  double seconds = 0.0;
};

Reached train_until(RunConfig cfg, double target, std::int64_t max_epochs, std::ostream& log) {
  cfg.train.epochs = max_epochs;
  const auto start = Clock::now();
  Reached r;
  const auto result = run_training(cfg, [&](const EpochMetrics& m) {
    log << "  " << cfg.model.label() << " epoch " << m.epoch << " lr " << m.lr << " train_loss " << num(m.train_loss, 4)
        << " train_acc " << num(m.train_accuracy, 4) << " test_acc " << num(m.test_accuracy, 4) << std::endl;
    r.epochs_run = m.epoch + 1;
    if (m.test_accuracy > r.best) {
      r.best = m.test_accuracy;
      r.epoch = m.epoch;
    }
    return m.test_accuracy < target;
  });
  r.seconds = std::chrono::duration<double>(Clock::now() - start).count();
  return r;
}

RunConfig run_of(ModelKind kind, const std::filesystem::path& data, const std::filesystem::path& out,
                 std::int64_t extent, double lr, std::uint64_t seed) {
  RunConfig r;
  r.model.kind = kind;
  r.model.size = ModelSize::tiny;
  r.model.norm = NormKind::instance3d;
  r.model.input = {extent, extent, extent};
  r.train.lr = lr;
  r.train.weight_decay = 0.001;
  r.train.step_size = 25;
  r.train.gamma = 0.3;
  r.data_dir = data;
  r.out_dir = out;
  r.seed = seed;
  return r;
}

Verdict learning(const LearningPlan& plan, std::ostream& log) {
  Verdict v;
  const auto d81 = make_dataset(plan.work / ("synth-" + std::to_string(plan.convnet_extent)), plan.convnet_subjects,
                                plan.convnet_extent, plan.test_per_class, plan.seed);
  const auto conv = train_until(run_of(ModelKind::convnet3d4, d81, plan.work / "convnet3d4-in", plan.convnet_extent,
                                       plan.convnet_lr, plan.seed),
                                0.95, 30, log);
  v.expect(conv.best >= 0.95, "ConvNet3D-4-IN at " + std::to_string(plan.convnet_extent) + "^3, lr " +
                                  num(plan.convnet_lr) + ": best test acc " + num(conv.best, 4) + " at epoch " +
                                  std::to_string(conv.epoch) + " (>= 0.95 within 30; " +
                                  std::to_string(conv.epochs_run) + " epochs, " + num(conv.seconds, 4) + " s)");

  const auto d32 = make_dataset(plan.work / "synth-32", plan.subjects, 32, plan.test_per_class, plan.seed);
  const auto cvvt = train_until(run_of(ModelKind::cvvt, d32, plan.work / "cvvt-tiny", 32, plan.cvvt_lr, plan.seed), 0.80,
                                60, log);
  v.expect(cvvt.best >= 0.80, "CVVT-tiny at 32^3, lr " + num(plan.cvvt_lr) + ": best test acc " + num(cvvt.best, 4) +
                                  " at epoch " + std::to_string(cvvt.epoch) + " (>= 0.80 within 60; " +
                                  std::to_string(cvvt.epochs_run) + " epochs, " + num(cvvt.seconds, 4) + " s)");
  return v;
}

Verdict determinism(const LearningPlan& plan) {
  Verdict v;
  const auto d32 = make_dataset(plan.work / "synth-32", plan.subjects, 32, plan.test_per_class, plan.seed);
  std::vector<std::vector<std::uint8_t>> logs, ckpts;
  for (const char* name : {"repeat-a", "repeat-b"}) {
    auto cfg = run_of(ModelKind::cvvt, d32, plan.work / name, 32, plan.cvvt_lr, plan.seed);
    cfg.train.epochs = 2;
    cfg.threads = 1;
    const auto r = run_training(cfg);
    logs.push_back(read_file_bytes(r.metrics_path));
    ckpts.push_back(read_file_bytes(r.checkpoint_path));
  }
  v.expect(logs[0] == logs[1], "metrics logs byte-identical (" + std::to_string(logs[0].size()) + " bytes)");
  v.expect(ckpts[0] == ckpts[1], "checkpoints byte-identical (" + std::to_string(ckpts[0].size()) + " bytes)");
  return v;
}

}  // namespace
}  // namespace voxformer::acceptance

int main(int argc, char** argv) {
  using namespace voxformer;
  using namespace voxformer::acceptance;
  retain_freed_memory();

  CLI::App app{"Acceptance criteria: one PASS/FAIL line each", "acceptance"};
  std::vector<int> only;
  std::uint64_t seed = 0;
  std::size_t model_coords = 12;
  std::string work;
  LearningPlan plan;
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  app.add_option("--seed", seed, "seed for generated inputs and runs")->capture_default_str();
  app.add_option("--model-coords", model_coords, "sampled coordinates per parameter in the CVVT gradcheck")
      ->capture_default_str();
  app.add_option("--work", work, "scratch directory for datasets and runs (default: a fresh temp dir)");
  app.add_option("--convnet-lr", plan.convnet_lr, "grid learning rate for the ConvNet run")->capture_default_str();
  app.add_option("--cvvt-lr", plan.cvvt_lr, "grid learning rate for the CVVT run")->capture_default_str();
  app.add_option("--convnet-subjects", plan.convnet_subjects, "subjects in the ConvNet dataset")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  plan.seed = seed;
  plan.work = work.empty() ? std::filesystem::temp_directory_path() / ("voxformer-acceptance-" + std::to_string(::getpid()))
                           : std::filesystem::path(work);

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"parameter counts", [] { return parameter_counts(); }},
      {"patch geometry", [] { return patch_geometry(); }},
      {"full-size shape oracle", [] { return full_size_shapes(); }},
      {"gradient integrity", [&] { return gradient_integrity(seed, model_coords); }},
      {"BN(N=1) equals IN", [&] { return norm_identity(seed); }},
      {"schedule and optimizer", [&] { return schedule_and_optimizer(seed); }},
      {"loss contract", [&] { return loss_contract(seed); }},
      {"leakage guards", [] { return leakage_guards(); }},
      {"end-to-end learning", [&] { return learning(plan, std::cerr); }},
      {"determinism", [&] { return determinism(plan); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto start = Clock::now();
    Verdict verdict;
    try {
      verdict = criteria[i].second();
    } catch (const std::exception& e) {
      verdict.expect(false, std::string("threw: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(Clock::now() - start).count();
    std::string detail;
    for (const auto& n : verdict.notes) detail += (detail.empty() ? "" : "; ") + n;
    std::printf("criterion %2d %s  %s [%.1fs]: %s\n", id, verdict.passed ? "PASS" : "FAIL", criteria[i].first.c_str(),
                secs, detail.c_str());
    std::fflush(stdout);
    failed += verdict.passed ? 0 : 1;
  }
  if (work.empty()) std::filesystem::remove_all(plan.work);
  return std::min(failed, 125);
}
