// SPDX-License-Identifier: Apache-2.0
//
// Volume files, manifests, scan selection, subject-level splits and the
// synthetic two-class generator.
//
// Volume file layout:
//   "VOX1" | u8 version = 1 | u8 dtype = 0 (f32) | 3 x u32 extents (D, H, W)
//   | D*H*W little-endian f32, W fastest.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "voxformer/tensor.hpp"

namespace voxformer {

using VolumeExtents = std::array<std::int64_t, 3>;

enum class Label : std::int64_t { CN = 0, AD = 1 };

std::string_view label_name(Label label);
Label parse_label(std::string_view text);

struct Volume {
  VolumeExtents extents{0, 0, 0};
  std::vector<float> values;
};

std::vector<std::uint8_t> encode_volume(const Volume& volume);
/// Throws DataError on bad magic, unsupported version/dtype, extent overflow
/// or a payload whose length disagrees with the header.
Volume decode_volume(std::span<const std::uint8_t> bytes);
void write_volume(const std::filesystem::path& path, const Volume& volume);
Volume read_volume(const std::filesystem::path& path);

struct VolumeRecord {
  std::string subject_id;
  std::string session_id;
  Label label = Label::CN;
  /// Relative paths resolve against the manifest's directory.
  std::string path;
  bool preferred = false;
  /// Lower is better.
  std::optional<std::int64_t> quality_rank;
  std::int64_t visit_order = 0;

  bool operator==(const VolumeRecord&) const = default;
};

struct Manifest {
  std::vector<VolumeRecord> records;

  /// Throws DataError on a duplicate (subject_id, session_id).
  void validate() const;
};

std::string serialize_manifest(const Manifest& manifest);
Manifest parse_manifest(std::string_view text);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);

/// preferred > best (lowest) quality rank > earliest visit, ties broken by
/// the lexicographically smallest session_id. Independent of input order.
const VolumeRecord& scan_select(std::span<const VolumeRecord> records);

/// One selected record per subject, ordered by subject_id. Throws DataError
/// when a subject's records disagree on the label.
std::vector<VolumeRecord> select_scans(const Manifest& manifest);

struct SplitAudit {
  std::int64_t subjects_checked = 0;
  /// Subjects found on more than one side, or a selected record whose
  /// subject is on no side.
  std::vector<std::string> violations;

  [[nodiscard]] bool clean() const { return violations.empty(); }
};

struct SplitSpec {
  std::uint64_t seed = 0;
  std::int64_t test_per_class = 0;
  double val_fraction = 0.0;
  std::vector<VolumeRecord> train;
  std::vector<VolumeRecord> val;
  std::vector<VolumeRecord> test;
  SplitAudit audit;

  [[nodiscard]] std::int64_t count(std::span<const VolumeRecord> side, Label label) const;
};

/// Selects one scan per subject, then draws `test_per_class` subjects of
/// each class into the test side; `val_fraction` of the remaining subjects
/// of each class (rounded down) form the validation side.
SplitSpec subject_split(const Manifest& manifest, std::int64_t test_per_class, std::uint64_t seed,
                        double val_fraction = 0.0);

/// Recomputes the audit from the split sides and the manifest.
SplitAudit audit_split(const Manifest& manifest, const SplitSpec& split);

std::string serialize_split(const SplitSpec& split);
SplitSpec parse_split(std::string_view text);

struct SynthConfig {
  std::int64_t n_subjects = 40;
  std::int64_t sessions_per_subject = 2;
  VolumeExtents extents{32, 32, 32};
  std::uint64_t seed = 0;
  /// Fraction of the atrophy region's intensity removed in AD subjects.
  double signal_amplitude = 0.5;
  double noise_stddev = 0.1;
  /// Share of AD subjects, rounded to the nearest subject.
  double ad_fraction = 180.0 / 394.0;
  /// Smallest accepted extent per axis; callers raise it to a model's minimum.
  VolumeExtents min_extents{8, 8, 8};
};

/// Geometry shared by the generator and any analytic check of it, in
/// normalized coordinates where each axis spans [-1, 1].
struct SynthGeometry {
  std::array<double, 3> brain_radii{0.72, 0.8, 0.75};
  double radius_jitter = 0.06;
  double center_jitter = 0.04;
  double edge_softness = 0.06;
  /// Atrophy sphere centre and radius, relative to the brain ellipsoid.
  std::array<double, 3> region_center{0.25, -0.2, 0.15};
  double region_radius = 0.3;
  double texture_amplitude = 0.03;
  double intensity_jitter = 0.05;
};

/// Writes `<dir>/volumes/<subject>_<session>.vox` and returns the manifest
/// (also written to `<dir>/manifest.jsonl`). Byte-identical for equal configs.
Manifest synth_generate(const SynthConfig& config, const std::filesystem::path& dir);

/// The in-memory volume for one (subject, session) of a generator config.
Volume synth_volume(const SynthConfig& config, std::int64_t subject, std::int64_t session, Label label);

/// Labels assigned by the generator, indexed by subject.
std::vector<Label> synth_labels(const SynthConfig& config);

struct IntensityStats {
  double mean = 0.0;
  double stddev = 1.0;
};

/// Voxel mean and standard deviation over the given volumes.
IntensityStats compute_intensity_stats(std::span<const Volume> volumes);

struct Sample {
  Tensor volume;  // [1, 1, D, H, W]
  Label label = Label::CN;
  std::string subject_id;
};

/// Loads the records (paths resolved against `root`) and standardizes them
/// with `stats`. Every volume must have `extents`.
std::vector<Sample> load_samples(std::span<const VolumeRecord> records, const std::filesystem::path& root,
                                 const IntensityStats& stats, const VolumeExtents& extents,
                                 DType dtype = DType::f32);

}  // namespace voxformer
