#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "voicemoe/errors.hpp"

namespace voicemoe::data {

inline constexpr int kNumFeatures = 6;

// One synthetic voice recording summarized by six clinical features and a
// binary pathology label.
struct VoiceSample {
  double pitch_hz = 0.0;    // [60, 400]
  double jitter = 0.0;      // [0, 0.15]
  double shimmer = 0.0;     // [0, 0.2]
  double hnr_db = 0.0;      // [5, 35]
  double age_years = 0.0;   // [18, 90]
  double severity = 0.0;    // [0, 1]
  int label = 0;            // 0 healthy, 1 pathological

  std::array<double, kNumFeatures> features() const {
    return {pitch_hz, jitter, shimmer, hnr_db, age_years, severity};
  }

  bool operator==(const VoiceSample&) const = default;
};

struct GenConfig {
  std::int64_t n_samples = 5000;
  std::uint64_t seed = 42;
  double label_noise = 0.02;  // independent flip probability, in [0, 0.5)
};

// Per-feature z-score parameters, fitted on the training split only.
struct StandardizationParams {
  std::array<double, kNumFeatures> mean{};
  std::array<double, kNumFeatures> stddev{};  // guarded to >= 1e-8
};

// Standardized feature matrix plus labels, the form consumed by training.
struct Dataset {
  std::int64_t n = 0;
  std::vector<double> x;  // n x kNumFeatures, row-major
  std::vector<int> y;
};

struct SplitResult {
  Dataset train;
  Dataset test;
  StandardizationParams params;
  std::vector<std::int64_t> train_indices;
  std::vector<std::int64_t> test_indices;
};

// Pathology marker: fires when at least one threshold condition holds.
// All comparisons are strict, e.g. hnr_db == 15.0 exactly stays healthy.
int threshold_label(const VoiceSample& s);

// Deterministic sampler: same config, same dataset. Features come from
// clipped parametric distributions centered on healthy values; labels are
// the threshold rule, then flipped independently with label_noise.
std::vector<VoiceSample> generate(const GenConfig& cfg);

// Shuffled split by seed, z-score parameters fitted on the train side only,
// both sides transformed, labels untouched.
SplitResult split_standardize(const std::vector<VoiceSample>& samples,
                              double train_fraction, std::uint64_t seed);

// Apply already-fitted parameters (used when evaluating a stored checkpoint
// against a raw CSV).
Dataset standardize(const std::vector<VoiceSample>& samples,
                    const StandardizationParams& params);

// CSV: UTF-8, fixed header, one sample per line, floats at 17 significant
// digits so read(write(d)) == d bit-exactly.
void write_csv(const std::vector<VoiceSample>& samples, const std::filesystem::path& path);
std::vector<VoiceSample> read_csv(const std::filesystem::path& path);

extern const char* const kCsvHeader;  // "pitch_hz,jitter,shimmer,hnr_db,age_years,severity,label"

}  // namespace voicemoe::data
