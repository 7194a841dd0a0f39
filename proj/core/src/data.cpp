// SPDX-License-Identifier: Apache-2.0
#include "voxformer/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "io/binary.hpp"
#include "voxformer/checkpoint.hpp"
#include "voxformer/rng.hpp"

namespace voxformer {

using json = nlohmann::ordered_json;
using std::int64_t;

std::string_view label_name(Label label) { return label == Label::AD ? "AD" : "CN"; }

Label parse_label(std::string_view text) {
  if (text == "AD") return Label::AD;
  if (text == "CN") return Label::CN;
  throw DataError("unknown label '" + std::string(text) + "' (expected AD or CN)");
}

// --- volume files ----------------------------------------------------------

namespace {

constexpr char kVolumeMagic[4] = {'V', 'O', 'X', '1'};

}  // namespace

std::vector<std::uint8_t> encode_volume(const Volume& volume) {
  std::uint64_t count = 1;
  for (auto e : volume.extents) {
    if (e < 1 || e > 0xFFFFFFFFll) throw DataError("volume extents must lie in [1, 2^32)");
    count *= static_cast<std::uint64_t>(e);
  }
  if (count != volume.values.size()) {
    throw DataError("volume holds " + std::to_string(volume.values.size()) + " values, extents imply " +
                    std::to_string(count));
  }
  std::vector<std::uint8_t> out;
  out.reserve(18 + count * 4);
  out.insert(out.end(), kVolumeMagic, kVolumeMagic + 4);
  out.push_back(1);
  out.push_back(0);
  for (auto e : volume.extents) io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
  io::put_scalars<float>(out, volume.values);
  return out;
}

Volume decode_volume(std::span<const std::uint8_t> bytes) {
  io::Reader<DataError> r(bytes, "volume");
  const auto* magic = r.take(4);
  if (!std::equal(magic, magic + 4, kVolumeMagic)) throw DataError("volume: bad magic (expected VOX1)");
  const auto version = r.le<std::uint8_t>();
  if (version != 1) throw DataError("volume: unsupported version " + std::to_string(version));
  const auto dtype = r.le<std::uint8_t>();
  if (dtype != 0) throw DataError("volume: unsupported dtype code " + std::to_string(dtype));
  Volume v;
  std::uint64_t count = 1;
  for (auto& e : v.extents) {
    const auto x = r.le<std::uint32_t>();
    if (x == 0) throw DataError("volume: zero extent in header");
    e = x;
    if (count > (std::uint64_t{1} << 62) / x) throw DataError("volume: extent product overflows");
    count *= x;
  }
  if (count > r.remaining() / 4 || count * 4 != r.remaining()) {
    throw DataError("volume: header declares " + std::to_string(count * 4) + " payload bytes, file has " +
                    std::to_string(r.remaining()) + " (truncated or trailing data)");
  }
  v.values.resize(static_cast<std::size_t>(count));
  io::get_scalars<float>(r.take(static_cast<std::size_t>(count * 4)), std::span<float>(v.values));
  return v;
}

void write_volume(const std::filesystem::path& path, const Volume& volume) {
  write_file_bytes(path, encode_volume(volume));
}

Volume read_volume(const std::filesystem::path& path) {
  try {
    return decode_volume(read_file_bytes(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// --- manifests -------------------------------------------------------------

void Manifest::validate() const {
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& r : records) {
    if (r.subject_id.empty() || r.session_id.empty()) throw DataError("manifest: empty subject or session id");
    if (!seen.emplace(r.subject_id, r.session_id).second) {
      throw DataError("manifest: duplicate record " + r.subject_id + "/" + r.session_id);
    }
  }
}

namespace {

json record_to_json(const VolumeRecord& r) {
  json j;
  j["subject_id"] = r.subject_id;
  j["session_id"] = r.session_id;
  j["label"] = label_name(r.label);
  j["path"] = r.path;
  j["preferred"] = r.preferred;
  j["quality_rank"] = r.quality_rank ? json(*r.quality_rank) : json(nullptr);
  j["visit_order"] = r.visit_order;
  return j;
}

VolumeRecord record_from_json(const json& j) {
  VolumeRecord r;
  r.subject_id = j.at("subject_id").get<std::string>();
  r.session_id = j.at("session_id").get<std::string>();
  r.label = parse_label(j.at("label").get<std::string>());
  r.path = j.at("path").get<std::string>();
  r.preferred = j.at("preferred").get<bool>();
  const auto& q = j.at("quality_rank");
  if (!q.is_null()) r.quality_rank = q.get<int64_t>();
  r.visit_order = j.at("visit_order").get<int64_t>();
  return r;
}

}  // namespace

std::string serialize_manifest(const Manifest& manifest) {
  std::string out;
  for (const auto& r : manifest.records) {
    out += record_to_json(r).dump();
    out += '\n';
  }
  return out;
}

Manifest parse_manifest(std::string_view text) {
  Manifest m;
  std::istringstream in{std::string(text)};
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      m.records.push_back(record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw DataError("manifest line " + std::to_string(lineno) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  m.validate();
  return m;
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  const std::string text = serialize_manifest(manifest);
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Manifest read_manifest(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return parse_manifest(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

// --- scan selection and splitting -----------------------------------------

namespace {

bool better_scan(const VolumeRecord& a, const VolumeRecord& b) {
  if (a.preferred != b.preferred) return a.preferred;
  if (a.quality_rank.has_value() != b.quality_rank.has_value()) return a.quality_rank.has_value();
  if (a.quality_rank && *a.quality_rank != *b.quality_rank) return *a.quality_rank < *b.quality_rank;
  if (a.visit_order != b.visit_order) return a.visit_order < b.visit_order;
  return a.session_id < b.session_id;
}

}  // namespace

const VolumeRecord& scan_select(std::span<const VolumeRecord> records) {
  if (records.empty()) throw DataError("scan_select: no records");
  const VolumeRecord* best = &records[0];
  for (const auto& r : records.subspan(1)) {
    if (r.subject_id != best->subject_id) {
      throw DataError("scan_select: records span subjects " + best->subject_id + " and " + r.subject_id);
    }
    if (better_scan(r, *best)) best = &r;
  }
  return *best;
}

std::vector<VolumeRecord> select_scans(const Manifest& manifest) {
  std::map<std::string, std::vector<VolumeRecord>> by_subject;
  for (const auto& r : manifest.records) by_subject[r.subject_id].push_back(r);
  std::vector<VolumeRecord> out;
  out.reserve(by_subject.size());
  for (const auto& [subject, recs] : by_subject) {
    for (const auto& r : recs) {
      if (r.label != recs.front().label) throw DataError("subject " + subject + " has conflicting labels");
    }
    out.push_back(scan_select(recs));
  }
  return out;
}

int64_t SplitSpec::count(std::span<const VolumeRecord> side, Label label) const {
  return std::count_if(side.begin(), side.end(), [&](const VolumeRecord& r) { return r.label == label; });
}

SplitAudit audit_split(const Manifest& manifest, const SplitSpec& split) {
  std::map<std::string, std::set<std::string>> sides;
  auto mark = [&](const std::vector<VolumeRecord>& recs, const char* side) {
    for (const auto& r : recs) sides[r.subject_id].insert(side);
  };
  mark(split.train, "train");
  mark(split.val, "val");
  mark(split.test, "test");
  SplitAudit audit;
  std::set<std::string> subjects;
  for (const auto& r : manifest.records) subjects.insert(r.subject_id);
  for (const auto& [subject, s] : sides) subjects.insert(subject);
  audit.subjects_checked = static_cast<int64_t>(subjects.size());
  for (const auto& subject : subjects) {
    auto it = sides.find(subject);
    if (it == sides.end()) {
      audit.violations.push_back(subject + ": unassigned");
    } else if (it->second.size() > 1) {
      std::string where;
      for (const auto& s : it->second) where += (where.empty() ? "" : "+") + s;
      audit.violations.push_back(subject + ": " + where);
    }
  }
  for (const auto* side : {&split.train, &split.val, &split.test}) {
    std::map<std::string, int> per_subject;
    for (const auto& r : *side) {
      if (++per_subject[r.subject_id] > 1) audit.violations.push_back(r.subject_id + ": repeated scans");
    }
  }
  return audit;
}

SplitSpec subject_split(const Manifest& manifest, int64_t test_per_class, std::uint64_t seed, double val_fraction) {
  if (test_per_class < 0) throw ConfigError("test_per_class must be >= 0");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("validation fraction must lie in [0, 1)");
  manifest.validate();
  const auto selected = select_scans(manifest);

  SplitSpec split;
  split.seed = seed;
  split.test_per_class = test_per_class;
  split.val_fraction = val_fraction;
  Rng rng(seed);
  for (Label label : {Label::CN, Label::AD}) {
    std::vector<VolumeRecord> pool;
    for (const auto& r : selected) {
      if (r.label == label) pool.push_back(r);
    }
    if (static_cast<int64_t>(pool.size()) < test_per_class) {
      throw DataError("class " + std::string(label_name(label)) + " has " + std::to_string(pool.size()) +
                      " subjects, fewer than the " + std::to_string(test_per_class) + " requested for test");
    }
    for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng.below(i)]);
    const auto n_test = static_cast<std::size_t>(test_per_class);
    const auto n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(pool.size() - n_test)));
    for (std::size_t i = 0; i < pool.size(); ++i) {
      auto& side = i < n_test ? split.test : (i < n_test + n_val ? split.val : split.train);
      side.push_back(pool[i]);
    }
  }
  auto by_subject = [](const VolumeRecord& a, const VolumeRecord& b) { return a.subject_id < b.subject_id; };
  std::sort(split.train.begin(), split.train.end(), by_subject);
  std::sort(split.val.begin(), split.val.end(), by_subject);
  std::sort(split.test.begin(), split.test.end(), by_subject);
  split.audit = audit_split(manifest, split);
  return split;
}

std::string serialize_split(const SplitSpec& split) {
  json j;
  j["seed"] = split.seed;
  j["test_per_class"] = split.test_per_class;
  j["val_fraction"] = split.val_fraction;
  for (const auto& [key, side] : {std::pair{"train", &split.train}, {"val", &split.val}, {"test", &split.test}}) {
    json arr = json::array();
    for (const auto& r : *side) arr.push_back(record_to_json(r));
    j[key] = arr;
  }
  j["counts"] = {
      {"train", {{"AD", split.count(split.train, Label::AD)}, {"CN", split.count(split.train, Label::CN)}}},
      {"val", {{"AD", split.count(split.val, Label::AD)}, {"CN", split.count(split.val, Label::CN)}}},
      {"test", {{"AD", split.count(split.test, Label::AD)}, {"CN", split.count(split.test, Label::CN)}}}};
  j["audit"] = {{"subjects_checked", split.audit.subjects_checked}, {"violations", split.audit.violations}};
  return j.dump(2) + "\n";
}

SplitSpec parse_split(std::string_view text) {
  try {
    const json j = json::parse(text);
    SplitSpec s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.test_per_class = j.at("test_per_class").get<int64_t>();
    s.val_fraction = j.at("val_fraction").get<double>();
    for (const auto& r : j.at("train")) s.train.push_back(record_from_json(r));
    for (const auto& r : j.at("val")) s.val.push_back(record_from_json(r));
    for (const auto& r : j.at("test")) s.test.push_back(record_from_json(r));
    s.audit.subjects_checked = j.at("audit").at("subjects_checked").get<int64_t>();
    s.audit.violations = j.at("audit").at("violations").get<std::vector<std::string>>();
    return s;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed split file: ") + e.what());
  }
}

// --- synthetic generator ---------------------------------------------------

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::string subject_name(int64_t s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sub-%04lld", static_cast<long long>(s));
  return buf;
}

std::string session_name(int64_t t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ses-%02lld", static_cast<long long>(t + 1));
  return buf;
}

void check_synth(const SynthConfig& c) {
  if (c.n_subjects < 1) throw ConfigError("synth: need at least one subject");
  if (c.sessions_per_subject < 1) throw ConfigError("synth: need at least one session per subject");
  for (int a = 0; a < 3; ++a) {
    if (c.extents[a] < c.min_extents[a]) {
      throw ConfigError("synth: extent " + std::to_string(c.extents[a]) + " on axis " + std::to_string(a) +
                        " is below the minimum " + std::to_string(c.min_extents[a]));
    }
  }
  if (!(c.signal_amplitude >= 0.0 && c.signal_amplitude <= 1.0)) {
    throw ConfigError("synth: signal amplitude must lie in [0, 1]");
  }
  if (!(c.noise_stddev >= 0.0)) throw ConfigError("synth: noise stddev must be >= 0");
  if (!(c.ad_fraction >= 0.0 && c.ad_fraction <= 1.0)) throw ConfigError("synth: AD fraction must lie in [0, 1]");
}

}  // namespace

std::vector<Label> synth_labels(const SynthConfig& c) {
  check_synth(c);
  const auto n_ad = static_cast<int64_t>(std::llround(c.ad_fraction * static_cast<double>(c.n_subjects)));
  std::vector<Label> labels(static_cast<std::size_t>(c.n_subjects), Label::CN);
  std::fill(labels.begin(), labels.begin() + n_ad, Label::AD);
  Rng rng(mix_seed(c.seed, 0x1abe1));
  for (std::size_t i = labels.size(); i > 1; --i) std::swap(labels[i - 1], labels[rng.below(i)]);
  return labels;
}

Volume synth_volume(const SynthConfig& c, int64_t subject, int64_t session, Label label) {
  check_synth(c);
  const SynthGeometry g;
  const std::uint64_t subject_seed = mix_seed(c.seed, static_cast<std::uint64_t>(subject) + 1);
  Rng srng(subject_seed);
  std::array<double, 3> radii{}, center{}, freq{}, phase{};
  for (int a = 0; a < 3; ++a) radii[a] = g.brain_radii[a] * (1.0 + srng.uniform(-g.radius_jitter, g.radius_jitter));
  for (int a = 0; a < 3; ++a) center[a] = srng.uniform(-g.center_jitter, g.center_jitter);
  for (int a = 0; a < 3; ++a) freq[a] = srng.uniform(1.5, 3.0) * std::numbers::pi;
  for (int a = 0; a < 3; ++a) phase[a] = srng.uniform(0.0, 2.0 * std::numbers::pi);

  Rng trng(mix_seed(subject_seed, static_cast<std::uint64_t>(session) + 1));
  const double gain = 1.0 + trng.uniform(-g.intensity_jitter, g.intensity_jitter);
  const double atrophy = label == Label::AD ? c.signal_amplitude : 0.0;

  Volume v;
  v.extents = c.extents;
  const auto [D, H, W] = c.extents;
  v.values.resize(static_cast<std::size_t>(D * H * W));
  std::size_t i = 0;
  for (int64_t z = 0; z < D; ++z) {
    const double u0 = (static_cast<double>(z) + 0.5) / static_cast<double>(D) * 2.0 - 1.0;
    for (int64_t y = 0; y < H; ++y) {
      const double u1 = (static_cast<double>(y) + 0.5) / static_cast<double>(H) * 2.0 - 1.0;
      for (int64_t x = 0; x < W; ++x, ++i) {
        const double u2 = (static_cast<double>(x) + 0.5) / static_cast<double>(W) * 2.0 - 1.0;
        const std::array<double, 3> u{u0, u1, u2};
        std::array<double, 3> rel{};
        double rho2 = 0.0, d2 = 0.0;
        for (int a = 0; a < 3; ++a) {
          rel[a] = (u[a] - center[a]) / radii[a];
          rho2 += rel[a] * rel[a];
          const double dr = rel[a] - g.region_center[a];
          d2 += dr * dr;
        }
        const double brain = sigmoid((1.0 - std::sqrt(rho2)) / g.edge_softness);
        const double texture =
            g.texture_amplitude * (std::sin(freq[0] * u0 + phase[0]) + std::sin(freq[1] * u1 + phase[1]) +
                                   std::sin(freq[2] * u2 + phase[2]));
        const double region = sigmoid((1.0 - std::sqrt(d2) / g.region_radius) / 0.1);
        const double clean = brain * (1.0 + texture) * (1.0 - atrophy * region);
        v.values[i] = static_cast<float>(gain * clean + c.noise_stddev * trng.normal());
      }
    }
  }
  return v;
}

Manifest synth_generate(const SynthConfig& c, const std::filesystem::path& dir) {
  const auto labels = synth_labels(c);
  std::filesystem::create_directories(dir / "volumes");
  Manifest m;
  for (int64_t s = 0; s < c.n_subjects; ++s) {
    Rng qrng(mix_seed(mix_seed(c.seed, 0x9a11), static_cast<std::uint64_t>(s)));
    const int64_t preferred = qrng.uniform() < 0.5 ? static_cast<int64_t>(qrng.below(c.sessions_per_subject)) : -1;
    for (int64_t t = 0; t < c.sessions_per_subject; ++t) {
      VolumeRecord r;
      r.subject_id = subject_name(s);
      r.session_id = session_name(t);
      r.label = labels[static_cast<std::size_t>(s)];
      r.path = "volumes/" + r.subject_id + "_" + r.session_id + ".vox";
      r.preferred = t == preferred;
      if (qrng.uniform() < 0.5) r.quality_rank = static_cast<int64_t>(qrng.below(3)) + 1;
      r.visit_order = t + 1;
      write_volume(dir / r.path, synth_volume(c, s, t, r.label));
      m.records.push_back(std::move(r));
    }
  }
  write_manifest(dir / "manifest.jsonl", m);
  return m;
}

// --- samples ---------------------------------------------------------------

IntensityStats compute_intensity_stats(std::span<const Volume> volumes) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& v : volumes) {
    for (float x : v.values) sum += x;
    n += v.values.size();
  }
  if (n == 0) throw DataError("intensity statistics need at least one voxel");
  const double mean = sum / static_cast<double>(n);
  double ss = 0.0;
  for (const auto& v : volumes) {
    for (float x : v.values) ss += (x - mean) * (x - mean);
  }
  const double sd = std::sqrt(ss / static_cast<double>(n));
  return {mean, sd > 0.0 ? sd : 1.0};
}

std::vector<Sample> load_samples(std::span<const VolumeRecord> records, const std::filesystem::path& root,
                                 const IntensityStats& stats, const VolumeExtents& extents, DType dtype) {
  std::vector<Sample> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    const Volume v = read_volume(root / r.path);
    if (v.extents != extents) {
      throw DataError(r.path + ": extents " + std::to_string(v.extents[0]) + "x" + std::to_string(v.extents[1]) +
                      "x" + std::to_string(v.extents[2]) + " differ from the configured " +
                      std::to_string(extents[0]) + "x" + std::to_string(extents[1]) + "x" +
                      std::to_string(extents[2]));
    }
    const Shape shape{1, 1, extents[0], extents[1], extents[2]};
    Tensor t = dispatch(dtype, [&]<typename T>() {
      std::vector<T> vals(v.values.size());
      for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<T>((v.values[i] - stats.mean) / stats.stddev);
      return Tensor::from_vector<T>(shape, std::move(vals));
    });
    out.push_back({std::move(t), r.label, r.subject_id});
  }
  return out;
}

}  // namespace voxformer
