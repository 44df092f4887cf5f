#include "voicemoe/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <mutex>
#include <thread>

#include "voicemoe/hash.hpp"
#include "voicemoe/metrics.hpp"

namespace voicemoe::harness {

using nlohmann::json;

namespace {

// Published reference values for the default setup; recorded in reports as
// informational targets, never asserted.
const json kReferenceTargets = {
    {"note", "published reference results for this configuration; informational only"},
    {"grpo", {{"train_accuracy", 1.0}, {"test_accuracy", 0.9860}, {"f1", 0.9845}, {"roc_auc", 0.9988}}},
    {"ppo", {{"train_accuracy", 1.0}, {"test_accuracy", 0.9762}, {"f1", 0.9794}, {"roc_auc", 0.9984}}},
};

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

json epoch_to_json(const trainer::EpochMetrics& em) {
  return json{{"epoch", em.epoch},
              {"train_accuracy", em.train_accuracy},
              {"policy_loss", em.policy_loss},
              {"kl", em.kl},
              {"test_accuracy", em.test_accuracy},
              {"f1", em.f1},
              {"roc_auc", em.roc_auc}};  // NaN serializes as null
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << content;
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace

void validate(const RunConfig& cfg) {
  if (cfg.gen.has_value() == cfg.dataset_path.has_value()) {
    throw ConfigError("run config: exactly one of inline generation and dataset path required");
  }
  if (cfg.out_dir.empty()) throw ConfigError("run config: output directory required");
  if (!(cfg.split_fraction > 0.0 && cfg.split_fraction < 1.0)) {
    throw ConfigError("run config: split_fraction must lie in (0, 1)");
  }
  moe::validate(cfg.model);
  trainer::validate(cfg.trainer_cfg, cfg.algo);
}

json run_config_to_json(const RunConfig& cfg) {
  json j;
  if (cfg.gen) {
    j["gen"] = {{"n_samples", cfg.gen->n_samples},
                {"seed", cfg.gen->seed},
                {"label_noise", cfg.gen->label_noise}};
  }
  if (cfg.dataset_path) j["dataset_path"] = *cfg.dataset_path;
  j["model"] = {{"n_features", cfg.model.n_features}, {"d_model", cfg.model.d_model},
                {"n_experts", cfg.model.n_experts},   {"n_heads", cfg.model.n_heads},
                {"ff_dim", cfg.model.ff_dim},         {"n_classes", cfg.model.n_classes},
                {"use_gating", cfg.model.use_gating}, {"seed", cfg.model.seed}};
  j["trainer"] = {{"group_size", cfg.trainer_cfg.group_size},
                  {"clip_epsilon", cfg.trainer_cfg.clip_epsilon},
                  {"kl_coeff", cfg.trainer_cfg.kl_coeff},
                  {"learning_rate", cfg.trainer_cfg.learning_rate},
                  {"epochs", cfg.trainer_cfg.epochs},
                  {"batch_size", cfg.trainer_cfg.batch_size},
                  {"delta", cfg.trainer_cfg.delta},
                  {"weight_decay", cfg.trainer_cfg.weight_decay},
                  {"seed", cfg.trainer_cfg.seed}};
  j["algo"] = trainer::to_string(cfg.algo);
  j["out_dir"] = cfg.out_dir;
  j["split_fraction"] = cfg.split_fraction;
  j["split_seed"] = cfg.split_seed;
  j["seed"] = cfg.seed;
  return j;
}

void apply_json_overrides(const json& j, RunConfig& cfg) {
  if (!j.is_object()) throw ParseError("config file: top level must be a JSON object");
  if (j.contains("gen")) {
    const auto& g = j.at("gen");
    data::GenConfig gen = cfg.gen.value_or(data::GenConfig{});
    if (g.contains("n_samples")) gen.n_samples = g.at("n_samples").get<std::int64_t>();
    if (g.contains("seed")) gen.seed = g.at("seed").get<std::uint64_t>();
    if (g.contains("label_noise")) gen.label_noise = g.at("label_noise").get<double>();
    cfg.gen = gen;
    cfg.dataset_path.reset();
  }
  if (j.contains("dataset_path")) {
    cfg.dataset_path = j.at("dataset_path").get<std::string>();
    cfg.gen.reset();
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    if (m.contains("n_features")) cfg.model.n_features = m.at("n_features").get<std::int64_t>();
    if (m.contains("d_model")) cfg.model.d_model = m.at("d_model").get<std::int64_t>();
    if (m.contains("n_experts")) cfg.model.n_experts = m.at("n_experts").get<std::int64_t>();
    if (m.contains("n_heads")) cfg.model.n_heads = m.at("n_heads").get<std::int64_t>();
    if (m.contains("ff_dim")) cfg.model.ff_dim = m.at("ff_dim").get<std::int64_t>();
    if (m.contains("n_classes")) cfg.model.n_classes = m.at("n_classes").get<std::int64_t>();
    if (m.contains("use_gating")) cfg.model.use_gating = m.at("use_gating").get<bool>();
  }
  if (j.contains("trainer")) {
    const auto& t = j.at("trainer");
    if (t.contains("group_size")) cfg.trainer_cfg.group_size = t.at("group_size").get<std::int64_t>();
    if (t.contains("clip_epsilon")) cfg.trainer_cfg.clip_epsilon = t.at("clip_epsilon").get<double>();
    if (t.contains("kl_coeff")) cfg.trainer_cfg.kl_coeff = t.at("kl_coeff").get<double>();
    if (t.contains("learning_rate")) cfg.trainer_cfg.learning_rate = t.at("learning_rate").get<double>();
    if (t.contains("epochs")) cfg.trainer_cfg.epochs = t.at("epochs").get<std::int64_t>();
    if (t.contains("batch_size")) cfg.trainer_cfg.batch_size = t.at("batch_size").get<std::int64_t>();
    if (t.contains("delta")) cfg.trainer_cfg.delta = t.at("delta").get<double>();
    if (t.contains("weight_decay")) cfg.trainer_cfg.weight_decay = t.at("weight_decay").get<double>();
  }
  if (j.contains("algo")) cfg.algo = trainer::algo_from_string(j.at("algo").get<std::string>());
  if (j.contains("out_dir")) cfg.out_dir = j.at("out_dir").get<std::string>();
  if (j.contains("split_fraction")) cfg.split_fraction = j.at("split_fraction").get<double>();
  if (j.contains("split_seed")) cfg.split_seed = j.at("split_seed").get<std::uint64_t>();
  if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
}

std::vector<data::VoiceSample> resolve_dataset(const RunConfig& cfg) {
  if (cfg.gen) return data::generate(*cfg.gen);
  if (!cfg.dataset_path) throw ConfigError("run config: no dataset source");
  return data::read_csv(*cfg.dataset_path);
}

std::string split_fingerprint(const data::SplitResult& split) {
  Fnv1a64 h;
  h.update(split.train_indices.data(), split.train_indices.size() * sizeof(std::int64_t));
  h.update(split.test_indices.data(), split.test_indices.size() * sizeof(std::int64_t));
  return h.hex();
}

json report_to_json(const RunReport& report) {
  json j;
  j["format_version"] = kReportFormatVersion;
  j["config"] = report.resolved_config;
  j["split_hash"] = report.split_hash;
  j["epochs"] = json::array();
  for (const auto& em : report.epochs) j["epochs"].push_back(epoch_to_json(em));
  j["best"] = epoch_to_json(report.best);
  j["best"]["epoch"] = report.best_epoch;
  j["duration_seconds"] = report.duration_seconds;
  j["reference_targets"] = kReferenceTargets;
  return j;
}

RunReport run_training(const RunConfig& cfg_in) {
  RunConfig cfg = cfg_in;
  // Single-flag reproducibility: the run seed fans out to every stream.
  cfg.model.seed = cfg.seed;
  cfg.trainer_cfg.seed = cfg.seed + 1;
  validate(cfg);

  const auto samples = resolve_dataset(cfg);
  const data::SplitResult split =
      data::split_standardize(samples, cfg.split_fraction, cfg.split_seed);

  moe::MoeModel model(cfg.model);
  const auto t0 = std::chrono::steady_clock::now();
  trainer::TrainResult tr =
      trainer::train(model, split.train, split.test, cfg.algo, cfg.trainer_cfg);
  const auto t1 = std::chrono::steady_clock::now();

  RunReport report;
  report.resolved_config = run_config_to_json(cfg);
  report.resolved_config["seeds"] = {{"run", cfg.seed},
                                     {"model_init", cfg.seed},
                                     {"shuffle", cfg.seed + 1},
                                     {"action_sampling", cfg.seed + 2},
                                     {"split", cfg.split_seed}};
  report.epochs = tr.epochs;
  report.best_epoch = tr.best_epoch;
  if (tr.best_epoch > 0) {
    report.best = tr.epochs[static_cast<std::size_t>(tr.best_epoch - 1)];
  }
  report.duration_seconds = std::chrono::duration<double>(t1 - t0).count();
  report.split_hash = split_fingerprint(split);

  const std::filesystem::path out(cfg.out_dir);
  std::filesystem::create_directories(out);

  std::string csv = "epoch,train_accuracy,policy_loss,kl,test_accuracy,f1,roc_auc\n";
  for (const auto& em : report.epochs) {
    csv += std::to_string(em.epoch) + "," + fmt17(em.train_accuracy) + "," +
           fmt17(em.policy_loss) + "," + fmt17(em.kl) + "," + fmt17(em.test_accuracy) + "," +
           fmt17(em.f1) + "," + fmt17(em.roc_auc) + "\n";
  }
  write_text_file(out / "epochs.csv", csv);

  // Best checkpoint carries the fitted standardization so eval on raw CSVs
  // reproduces the run's metrics.
  moe::MoeModel best_model(cfg.model);
  best_model.load_state(tr.best_state);
  moe::save_checkpoint(best_model, out / "best", split.params);

  write_text_file(out / "report.json", report_to_json(report).dump(2) + "\n");
  return report;
}

void write_dataset_with_meta(const data::GenConfig& cfg, const std::filesystem::path& path) {
  const auto samples = data::generate(cfg);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  data::write_csv(samples, path);
  const json meta = {{"format_version", kReportFormatVersion},
                     {"n_samples", cfg.n_samples},
                     {"seed", cfg.seed},
                     {"label_noise", cfg.label_noise}};
  write_text_file(path.string() + ".meta.json", meta.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Sweeps

namespace {

// Runs tasks on `jobs` worker threads; rethrows the first failure.
void run_tasks(std::vector<std::function<void()>>& tasks, int jobs) {
  if (jobs <= 1) {
    for (auto& t : tasks) t();
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (failure || next >= tasks.size()) return;
        i = next++;
      }
      try {
        tasks[i]();
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  const int n = std::min<int>(jobs, static_cast<int>(tasks.size()));
  pool.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

SweepRow row_from_report(const std::string& variant, std::uint64_t seed,
                         const RunReport& report) {
  SweepRow row;
  row.variant = variant;
  row.seed = seed;
  row.train_accuracy = report.best.train_accuracy;
  row.test_accuracy = report.best.test_accuracy;
  row.f1 = report.best.f1;
  row.roc_auc = report.best.roc_auc;
  row.split_hash = report.split_hash;
  return row;
}

SweepRow mean_row(const std::string& variant, const std::vector<SweepRow>& rows) {
  SweepRow mean;
  mean.variant = variant;
  std::int64_t count = 0;
  for (const auto& r : rows) {
    if (r.variant != variant) continue;
    mean.train_accuracy += r.train_accuracy;
    mean.test_accuracy += r.test_accuracy;
    mean.f1 += r.f1;
    mean.roc_auc += r.roc_auc;
    ++count;
  }
  if (count == 0) throw ConfigError("mean_row: no rows for variant " + variant);
  const double inv = 1.0 / static_cast<double>(count);
  mean.train_accuracy *= inv;
  mean.test_accuracy *= inv;
  mean.f1 *= inv;
  mean.roc_auc *= inv;
  return mean;
}

json row_to_json(const SweepRow& row, bool is_mean) {
  json j = {{"variant", row.variant},
            {"train_accuracy", row.train_accuracy},
            {"test_accuracy", row.test_accuracy},
            {"f1", row.f1},
            {"roc_auc", row.roc_auc}};
  if (!is_mean) {
    j["seed"] = row.seed;
    j["split_hash"] = row.split_hash;
  }
  return j;
}

std::string rows_to_csv(const std::vector<SweepRow>& rows,
                        const std::vector<SweepRow>& means) {
  std::string csv = "variant,seed,train_accuracy,test_accuracy,f1,roc_auc\n";
  for (const auto& r : rows) {
    csv += r.variant + "," + std::to_string(r.seed) + "," + fmt17(r.train_accuracy) + "," +
           fmt17(r.test_accuracy) + "," + fmt17(r.f1) + "," + fmt17(r.roc_auc) + "\n";
  }
  for (const auto& r : means) {
    csv += r.variant + "_mean,," + fmt17(r.train_accuracy) + "," + fmt17(r.test_accuracy) +
           "," + fmt17(r.f1) + "," + fmt17(r.roc_auc) + "\n";
  }
  return csv;
}

}  // namespace

CompareReport run_compare(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                          const std::filesystem::path& out_dir, int jobs) {
  if (seeds.empty()) throw ConfigError("compare: need at least one seed");
  std::filesystem::create_directories(out_dir);

  struct Slot {
    std::string variant;
    std::uint64_t seed;
    RunReport report;
  };
  std::vector<Slot> slots;
  std::vector<std::function<void()>> tasks;
  for (const auto seed : seeds) {
    for (const auto algo : {trainer::Algo::kGrpo, trainer::Algo::kPpo}) {
      slots.push_back({trainer::to_string(algo), seed, {}});
    }
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    tasks.push_back([&, i] {
      RunConfig cfg = base;
      cfg.algo = trainer::algo_from_string(slots[i].variant);
      cfg.seed = slots[i].seed;
      cfg.split_seed = slots[i].seed;  // identical split for both algorithms
      cfg.out_dir =
          (out_dir / ("runs/seed" + std::to_string(slots[i].seed) + "_" + slots[i].variant))
              .string();
      slots[i].report = run_training(cfg);
    });
  }
  run_tasks(tasks, jobs);

  CompareReport report;
  for (const auto& s : slots) report.rows.push_back(row_from_report(s.variant, s.seed, s.report));

  // Fairness check: per seed, both algorithms must have consumed the same split.
  for (std::size_t i = 0; i + 1 < report.rows.size(); i += 2) {
    if (report.rows[i].split_hash != report.rows[i + 1].split_hash) {
      throw TrainingError("compare: split hashes diverged for seed " +
                          std::to_string(report.rows[i].seed));
    }
  }

  report.grpo_mean = mean_row("grpo", report.rows);
  report.ppo_mean = mean_row("ppo", report.rows);

  json j;
  j["format_version"] = kReportFormatVersion;
  j["seeds"] = seeds;
  j["rows"] = json::array();
  for (const auto& r : report.rows) j["rows"].push_back(row_to_json(r, false));
  j["means"] = {{"grpo", row_to_json(report.grpo_mean, true)},
                {"ppo", row_to_json(report.ppo_mean, true)}};
  j["reference_targets"] = kReferenceTargets;
  report.json = j;

  write_text_file(out_dir / "compare.json", j.dump(2) + "\n");
  write_text_file(out_dir / "compare.csv",
                  rows_to_csv(report.rows, {report.grpo_mean, report.ppo_mean}));
  return report;
}

json run_ablate(const RunConfig& base, const std::string& component,
                const std::vector<std::uint64_t>& seeds,
                const std::filesystem::path& out_dir, int jobs) {
  if (seeds.empty()) throw ConfigError("ablate: need at least one seed");

  struct Variant {
    std::string label;
    std::function<void(RunConfig&)> apply;
  };
  std::vector<Variant> variants;
  std::string baseline;
  json reference;

  if (component == "gating") {
    variants = {{"gating_on", [](RunConfig& c) { c.model.use_gating = true; }},
                {"gating_off", [](RunConfig& c) { c.model.use_gating = false; }}};
    baseline = "gating_on";
    reference = {{"expected_test_accuracy_drop", {0.03, 0.05}},
                 {"note", "published reference reports a 3-5% drop without the gate; "
                          "informational only"}};
  } else if (component == "regime") {
    variants = {{"grpo", [](RunConfig& c) { c.algo = trainer::Algo::kGrpo; }},
                {"ppo", [](RunConfig& c) { c.algo = trainer::Algo::kPpo; }},
                {"ce", [](RunConfig& c) { c.algo = trainer::Algo::kCe; }}};
    baseline = "grpo";
  } else if (component == "experts") {
    for (const std::int64_t n : {1, 2, 4, 8}) {
      variants.push_back({"experts_" + std::to_string(n),
                          [n](RunConfig& c) { c.model.n_experts = n; }});
    }
    baseline = "experts_4";
  } else if (component == "group-size") {
    for (const std::int64_t gsz : {2, 4, 8, 16}) {
      variants.push_back({"group_" + std::to_string(gsz),
                          [gsz](RunConfig& c) { c.trainer_cfg.group_size = gsz; }});
    }
    baseline = "group_8";
  } else {
    throw ConfigError("ablate: unknown component '" + component +
                      "' (expected gating, regime, experts or group-size)");
  }

  std::filesystem::create_directories(out_dir);

  struct Slot {
    std::string variant;
    std::uint64_t seed;
    RunReport report;
  };
  std::vector<Slot> slots;
  for (const auto seed : seeds)
    for (const auto& v : variants) slots.push_back({v.label, seed, {}});

  std::vector<std::function<void()>> tasks;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    tasks.push_back([&, i] {
      RunConfig cfg = base;
      cfg.seed = slots[i].seed;
      cfg.split_seed = slots[i].seed;
      for (const auto& v : variants) {
        if (v.label == slots[i].variant) v.apply(cfg);
      }
      cfg.out_dir =
          (out_dir / ("runs/seed" + std::to_string(slots[i].seed) + "_" + slots[i].variant))
              .string();
      slots[i].report = run_training(cfg);
    });
  }
  run_tasks(tasks, jobs);

  std::vector<SweepRow> rows;
  for (const auto& s : slots) rows.push_back(row_from_report(s.variant, s.seed, s.report));

  std::vector<SweepRow> means;
  for (const auto& v : variants) means.push_back(mean_row(v.label, rows));
  const SweepRow base_mean = mean_row(baseline, rows);

  json j;
  j["format_version"] = kReportFormatVersion;
  j["component"] = component;
  j["seeds"] = seeds;
  j["baseline"] = baseline;
  j["rows"] = json::array();
  for (const auto& r : rows) j["rows"].push_back(row_to_json(r, false));
  j["means"] = json::object();
  j["deltas_vs_baseline"] = json::object();
  for (const auto& m : means) {
    j["means"][m.variant] = row_to_json(m, true);
    j["deltas_vs_baseline"][m.variant] = {
        {"test_accuracy", m.test_accuracy - base_mean.test_accuracy},
        {"f1", m.f1 - base_mean.f1},
        {"roc_auc", m.roc_auc - base_mean.roc_auc}};
  }
  if (component == "gating") {
    j["mean_accuracy_delta"] =
        mean_row("gating_on", rows).test_accuracy - mean_row("gating_off", rows).test_accuracy;
  }
  if (!reference.is_null()) j["reference"] = reference;

  write_text_file(out_dir / "ablate.json", j.dump(2) + "\n");
  write_text_file(out_dir / "ablate.csv", rows_to_csv(rows, means));
  return j;
}

}  // namespace voicemoe::harness
