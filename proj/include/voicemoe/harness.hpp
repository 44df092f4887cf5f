#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "voicemoe/moe_model.hpp"
#include "voicemoe/synth_data.hpp"
#include "voicemoe/trainers.hpp"

namespace voicemoe::harness {

inline constexpr int kReportFormatVersion = 1;

// Environment variable naming the default root for run output directories.
inline constexpr const char* kOutRootEnvVar = "VOICEMOE_OUT_ROOT";

// One training run: dataset source, model and trainer settings, output
// location. Exactly one of {gen, dataset_path} must be set.
//
// The run seed fans out deterministically: model init uses seed, the
// shuffle stream uses seed+1 and action sampling uses seed+2. split_seed is
// independent so sweeps can pin the split while varying everything else.
struct RunConfig {
  std::optional<data::GenConfig> gen;
  std::optional<std::string> dataset_path;
  moe::MoeModelConfig model;
  trainer::GrpoConfig trainer_cfg;
  trainer::Algo algo = trainer::Algo::kGrpo;
  std::string out_dir;
  double split_fraction = 0.8;
  std::uint64_t split_seed = 3;
  std::uint64_t seed = 3;
};

void validate(const RunConfig& cfg);

nlohmann::json run_config_to_json(const RunConfig& cfg);
// Overlay fields present in j onto cfg (the --config file wins over flags).
void apply_json_overrides(const nlohmann::json& j, RunConfig& cfg);

struct RunReport {
  nlohmann::json resolved_config;
  std::vector<trainer::EpochMetrics> epochs;
  std::int64_t best_epoch = 0;
  trainer::EpochMetrics best;
  double duration_seconds = 0.0;
  std::string split_hash;
};

nlohmann::json report_to_json(const RunReport& report);

// Loads or generates the raw samples for a run.
std::vector<data::VoiceSample> resolve_dataset(const RunConfig& cfg);

// Fingerprint of a split's index partition; equal hashes mean byte-identical
// train/test membership and order.
std::string split_fingerprint(const data::SplitResult& split);

// Executes one training run and writes <out_dir>/report.json,
// <out_dir>/epochs.csv and the best-epoch checkpoint under <out_dir>/best/.
RunReport run_training(const RunConfig& cfg);

// Writes the dataset CSV for `gen` plus a <path>.meta.json sidecar.
void write_dataset_with_meta(const data::GenConfig& cfg, const std::filesystem::path& path);

struct SweepRow {
  std::string variant;  // algorithm or ablation variant label
  std::uint64_t seed = 0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  double f1 = 0.0;
  double roc_auc = 0.0;
  std::string split_hash;
};

struct CompareReport {
  std::vector<SweepRow> rows;  // per (seed, algorithm)
  SweepRow grpo_mean;
  SweepRow ppo_mean;
  nlohmann::json json;  // full serialized report
};

// Trains GRPO and PPO per seed on identical data and splits and writes
// compare.csv / compare.json under out_dir. jobs > 1 executes independent
// runs in parallel worker slots.
CompareReport run_compare(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                          const std::filesystem::path& out_dir, int jobs = 1);

// Ablation sweeps; component is one of gating | regime | experts | group-size.
// Writes ablate.csv / ablate.json under out_dir and returns the JSON report.
nlohmann::json run_ablate(const RunConfig& base, const std::string& component,
                          const std::vector<std::uint64_t>& seeds,
                          const std::filesystem::path& out_dir, int jobs = 1);

}  // namespace voicemoe::harness
