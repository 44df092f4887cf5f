#include "voicemoe/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>

#include "voicemoe/rng.hpp"

namespace voicemoe::data {

const char* const kCsvHeader = "pitch_hz,jitter,shimmer,hnr_db,age_years,severity,label";

namespace {

struct FeatureRange {
  const char* name;
  double lo;
  double hi;
};

constexpr std::array<FeatureRange, kNumFeatures> kRanges = {{
    {"pitch_hz", 60.0, 400.0},
    {"jitter", 0.0, 0.15},
    {"shimmer", 0.0, 0.2},
    {"hnr_db", 5.0, 35.0},
    {"age_years", 18.0, 90.0},
    {"severity", 0.0, 1.0},
}};

void validate_sample(const VoiceSample& s, std::size_t line) {
  const auto f = s.features();
  for (int j = 0; j < kNumFeatures; ++j) {
    if (!std::isfinite(f[j]) || f[j] < kRanges[j].lo || f[j] > kRanges[j].hi) {
      throw ValidationError("line " + std::to_string(line) + ": " + kRanges[j].name + " = " +
                            std::to_string(f[j]) + " outside [" + std::to_string(kRanges[j].lo) +
                            ", " + std::to_string(kRanges[j].hi) + "]");
    }
  }
  if (s.label != 0 && s.label != 1) {
    throw ValidationError("line " + std::to_string(line) + ": label must be 0 or 1");
  }
}

void validate(const GenConfig& cfg) {
  if (cfg.n_samples < 1) throw ConfigError("generate: n_samples must be >= 1");
  if (!(cfg.label_noise >= 0.0) || cfg.label_noise >= 0.5) {
    throw ConfigError("generate: label_noise must lie in [0, 0.5)");
  }
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

int threshold_label(const VoiceSample& s) {
  const bool pathological = s.jitter > 0.05 || s.shimmer > 0.08 || s.hnr_db < 15.0 ||
                            s.age_years > 70.0 || s.severity > 0.7;
  return pathological ? 1 : 0;
}

std::vector<VoiceSample> generate(const GenConfig& cfg) {
  validate(cfg);
  Rng rng(cfg.seed);
  std::vector<VoiceSample> out;
  out.reserve(static_cast<std::size_t>(cfg.n_samples));
  for (std::int64_t i = 0; i < cfg.n_samples; ++i) {
    VoiceSample s;
    s.pitch_hz = std::clamp(rng.normal(165.0, 45.0), 60.0, 400.0);
    s.jitter = std::clamp(std::abs(rng.normal(0.02, 0.02)), 0.0, 0.15);
    s.shimmer = std::clamp(std::abs(rng.normal(0.035, 0.03)), 0.0, 0.2);
    s.hnr_db = std::clamp(rng.normal(20.0, 4.0), 5.0, 35.0);
    s.age_years = rng.uniform(18.0, 90.0);
    s.severity = std::clamp(rng.beta(2, 5), 0.0, 1.0);
    s.label = threshold_label(s);
    // The flip draw happens for every sample so the feature stream does not
    // depend on label_noise.
    if (rng.uniform() < cfg.label_noise) s.label = 1 - s.label;
    out.push_back(s);
  }
  return out;
}

SplitResult split_standardize(const std::vector<VoiceSample>& samples,
                              double train_fraction, std::uint64_t seed) {
  const auto n = static_cast<std::int64_t>(samples.size());
  if (n < 2) throw ConfigError("split_standardize: need at least 2 samples");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("split_standardize: train_fraction must lie in (0, 1)");
  }
  const auto n_train = static_cast<std::int64_t>(
      std::llround(static_cast<double>(n) * train_fraction));
  if (n_train < 1 || n_train >= n) {
    throw ConfigError("split_standardize: split " + std::to_string(n_train) + "/" +
                      std::to_string(n - n_train) + " leaves one side empty");
  }

  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(idx);

  SplitResult res;
  res.train_indices.assign(idx.begin(), idx.begin() + n_train);
  res.test_indices.assign(idx.begin() + n_train, idx.end());

  // Fit on the train side only; population standard deviation.
  std::array<double, kNumFeatures> sum{}, sumsq{};
  for (const auto i : res.train_indices) {
    const auto f = samples[static_cast<std::size_t>(i)].features();
    for (int j = 0; j < kNumFeatures; ++j) {
      sum[j] += f[j];
      sumsq[j] += f[j] * f[j];
    }
  }
  const double inv = 1.0 / static_cast<double>(n_train);
  for (int j = 0; j < kNumFeatures; ++j) {
    res.params.mean[j] = sum[j] * inv;
    const double var = std::max(0.0, sumsq[j] * inv - res.params.mean[j] * res.params.mean[j]);
    res.params.stddev[j] = std::max(std::sqrt(var), 1e-8);
  }

  auto take = [&](const std::vector<std::int64_t>& which) {
    Dataset d;
    d.n = static_cast<std::int64_t>(which.size());
    d.x.reserve(which.size() * kNumFeatures);
    d.y.reserve(which.size());
    for (const auto i : which) {
      const VoiceSample& s = samples[static_cast<std::size_t>(i)];
      const auto f = s.features();
      for (int j = 0; j < kNumFeatures; ++j) {
        d.x.push_back((f[j] - res.params.mean[j]) / res.params.stddev[j]);
      }
      d.y.push_back(s.label);
    }
    return d;
  };
  res.train = take(res.train_indices);
  res.test = take(res.test_indices);
  return res;
}

Dataset standardize(const std::vector<VoiceSample>& samples,
                    const StandardizationParams& params) {
  Dataset d;
  d.n = static_cast<std::int64_t>(samples.size());
  d.x.reserve(samples.size() * kNumFeatures);
  d.y.reserve(samples.size());
  for (const VoiceSample& s : samples) {
    const auto f = s.features();
    for (int j = 0; j < kNumFeatures; ++j) {
      d.x.push_back((f[j] - params.mean[j]) / std::max(params.stddev[j], 1e-8));
    }
    d.y.push_back(s.label);
  }
  return d;
}

void write_csv(const std::vector<VoiceSample>& samples, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("write_csv: cannot open " + path.string() + " for writing");
  out << kCsvHeader << "\n";
  for (const VoiceSample& s : samples) {
    const auto f = s.features();
    for (int j = 0; j < kNumFeatures; ++j) {
      if (j) out << ",";
      out << format_double(f[j]);
    }
    out << "," << s.label << "\n";
  }
  if (!out) throw Error("write_csv: write failed for " + path.string());
}

std::vector<VoiceSample> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("read_csv: cannot open " + path.string());

  auto split_fields = [](const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (const char ch : line) {
      if (ch == ',') {
        fields.push_back(cur);
        cur.clear();
      } else {
        cur.push_back(ch);
      }
    }
    fields.push_back(cur);
    return fields;
  };

  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  {
    const auto got = split_fields(line);
    const auto want = split_fields(kCsvHeader);
    if (got.size() != want.size()) {
      throw ParseError(path.string() + ": header has " + std::to_string(got.size()) +
                       " columns, expected " + std::to_string(want.size()));
    }
    for (std::size_t j = 0; j < want.size(); ++j) {
      if (got[j] != want[j]) {
        throw ParseError(path.string() + ": header column " + std::to_string(j + 1) + " is '" +
                         got[j] + "', expected '" + want[j] + "'");
      }
    }
  }

  std::vector<VoiceSample> samples;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;  // tolerate a trailing blank line
    const auto fields = split_fields(line);
    if (fields.size() != kNumFeatures + 1) {
      throw ParseError(path.string() + ": line " + std::to_string(line_no) + " has " +
                       std::to_string(fields.size()) + " fields, expected 7");
    }
    std::array<double, kNumFeatures> f{};
    for (int j = 0; j < kNumFeatures; ++j) {
      std::size_t used = 0;
      try {
        f[static_cast<std::size_t>(j)] = std::stod(fields[static_cast<std::size_t>(j)], &used);
      } catch (const std::exception&) {
        throw ParseError(path.string() + ": line " + std::to_string(line_no) +
                         ": cannot parse '" + fields[static_cast<std::size_t>(j)] + "'");
      }
      if (used != fields[static_cast<std::size_t>(j)].size()) {
        throw ParseError(path.string() + ": line " + std::to_string(line_no) +
                         ": trailing characters in '" + fields[static_cast<std::size_t>(j)] + "'");
      }
    }
    const std::string& lab = fields[kNumFeatures];
    if (lab != "0" && lab != "1") {
      throw ParseError(path.string() + ": line " + std::to_string(line_no) + ": label '" + lab +
                       "' is not 0 or 1");
    }
    VoiceSample s{f[0], f[1], f[2], f[3], f[4], f[5], lab == "1" ? 1 : 0};
    validate_sample(s, line_no);
    samples.push_back(s);
  }
  return samples;
}

}  // namespace voicemoe::data
