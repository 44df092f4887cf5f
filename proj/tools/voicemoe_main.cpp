// Command-line entry point: dataset generation, training runs, checkpoint
// evaluation, the GRPO/PPO comparison sweep and the ablation sweeps.
//
// Exit codes: 0 success, 2 usage/validation problems, 3 runtime failures
// (diverged training, corrupt checkpoints, numeric errors).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "voicemoe/harness.hpp"
#include "voicemoe/metrics.hpp"
#include "voicemoe/moe_model.hpp"
#include "voicemoe/synth_data.hpp"
#include "voicemoe/trainers.hpp"

namespace {

namespace vm = voicemoe;
using nlohmann::json;

std::filesystem::path default_out_root() {
  const char* root = std::getenv(vm::harness::kOutRootEnvVar);
  return root && *root ? std::filesystem::path(root) : std::filesystem::path(".");
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::string cur;
  auto flush = [&] {
    if (cur.empty()) throw vm::ConfigError("--seeds: empty entry in '" + text + "'");
    seeds.push_back(std::stoull(cur));
    cur.clear();
  };
  for (const char ch : text) {
    if (ch == ',') {
      flush();
    } else if (ch >= '0' && ch <= '9') {
      cur.push_back(ch);
    } else {
      throw vm::ConfigError("--seeds: unexpected character '" + std::string(1, ch) + "'");
    }
  }
  flush();
  return seeds;
}

// Options shared by train / compare / ablate.
struct CommonArgs {
  std::string data_path;
  std::int64_t gen_n = 5000;
  std::uint64_t gen_seed = 42;
  double gen_noise = 0.02;
  bool gen_inline = false;

  vm::moe::MoeModelConfig model;
  bool no_gating = false;
  vm::trainer::GrpoConfig trainer;
  double split_fraction = 0.8;
  std::string config_path;
};

void add_common_options(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--data", args.data_path, "dataset CSV path");
  cmd->add_flag("--gen-inline", args.gen_inline,
                "generate the dataset in-process instead of reading --data");
  cmd->add_option("--gen-n", args.gen_n, "inline generation: sample count");
  cmd->add_option("--gen-seed", args.gen_seed, "inline generation: seed");
  cmd->add_option("--gen-noise", args.gen_noise, "inline generation: label flip probability");

  cmd->add_option("--d-model", args.model.d_model, "embedding width");
  cmd->add_option("--n-experts", args.model.n_experts, "number of experts");
  cmd->add_option("--n-heads", args.model.n_heads, "attention heads per expert");
  cmd->add_option("--ff-dim", args.model.ff_dim, "feed-forward width");
  cmd->add_flag("--no-gating", args.no_gating,
                "fuse experts with uniform weights instead of the learned gate");

  cmd->add_option("--group-size", args.trainer.group_size, "GRPO group size G");
  cmd->add_option("--clip", args.trainer.clip_epsilon, "ratio clip epsilon");
  cmd->add_option("--kl-coeff", args.trainer.kl_coeff, "KL penalty coefficient");
  cmd->add_option("--lr", args.trainer.learning_rate, "AdamW learning rate");
  cmd->add_option("--epochs", args.trainer.epochs, "training epochs");
  cmd->add_option("--batch-size", args.trainer.batch_size, "mini-batch size");
  cmd->add_option("--weight-decay", args.trainer.weight_decay, "decoupled weight decay");
  cmd->add_option("--delta", args.trainer.delta, "std/ratio denominator guard");

  cmd->add_option("--split-fraction", args.split_fraction, "train fraction of the split");
  cmd->add_option("--config", args.config_path, "JSON config file; overrides flags");
}

// Flags first; the --config file is applied on top by finish_run_config.
vm::harness::RunConfig build_run_config(const CommonArgs& args) {
  vm::harness::RunConfig cfg;
  if (args.gen_inline && !args.data_path.empty()) {
    throw vm::ConfigError("pass either --data or --gen-inline, not both");
  }
  if (args.gen_inline) {
    cfg.gen = vm::data::GenConfig{args.gen_n, args.gen_seed, args.gen_noise};
  } else if (!args.data_path.empty()) {
    cfg.dataset_path = args.data_path;
  }
  cfg.model = args.model;
  cfg.model.use_gating = !args.no_gating;
  cfg.trainer_cfg = args.trainer;
  cfg.split_fraction = args.split_fraction;
  return cfg;
}

void apply_config_file(const CommonArgs& args, vm::harness::RunConfig& cfg) {
  if (args.config_path.empty()) return;
  std::ifstream in(args.config_path);
  if (!in) throw vm::ConfigError("cannot open config file " + args.config_path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw vm::ParseError(args.config_path + ": " + e.what());
  }
  vm::harness::apply_json_overrides(j, cfg);
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const vm::ConfigError*>(&e) != nullptr ||
      dynamic_cast<const vm::ParseError*>(&e) != nullptr ||
      dynamic_cast<const vm::ValidationError*>(&e) != nullptr ||
      dynamic_cast<const vm::ShapeError*>(&e) != nullptr) {
    return 2;
  }
  return 3;
}

json eval_to_json(const vm::metrics::EvalResult& r) {
  return json{{"accuracy", r.accuracy},
              {"f1", r.f1},
              {"f1_degenerate", r.f1_degenerate},
              {"roc_auc", r.roc_auc},  // null when undefined
              {"auc_defined", r.auc_defined},
              {"confusion", {{"tp", r.tp}, {"fp", r.fp}, {"tn", r.tn}, {"fn", r.fn}}}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic voice-pathology MoE classifier: data, training and evaluation"};
  app.require_subcommand(1);

  // gen ---------------------------------------------------------------
  auto* gen = app.add_subcommand("gen", "generate a dataset CSV plus meta sidecar");
  std::int64_t gen_n = 5000;
  std::uint64_t gen_seed = 42;
  double gen_noise = 0.02;
  std::string gen_out;
  gen->add_option("--n", gen_n, "sample count");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--noise", gen_noise, "label flip probability");
  gen->add_option("--out", gen_out, "output CSV path")->required();

  // train ---------------------------------------------------------------
  auto* train = app.add_subcommand("train", "run one training job");
  CommonArgs train_args;
  add_common_options(train, train_args);
  std::string train_algo = "grpo";
  std::uint64_t train_seed = 3;
  std::uint64_t train_split_seed = 0;
  std::string train_out;
  train->add_option("--algo", train_algo, "grpo | ppo | ce");
  train->add_option("--seed", train_seed, "run seed (fans out to init/shuffle/sampling)");
  auto* split_seed_opt = train->add_option("--split-seed", train_split_seed,
                                           "train/test split seed (defaults to --seed)");
  train->add_option("--out", train_out, "run output directory");

  // eval ----------------------------------------------------------------
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint against a dataset CSV");
  std::string eval_ckpt, eval_data;
  eval->add_option("--ckpt", eval_ckpt, "checkpoint directory")->required();
  eval->add_option("--data", eval_data, "dataset CSV path")->required();

  // compare ---------------------------------------------------------------
  auto* compare = app.add_subcommand("compare", "GRPO vs PPO over a list of seeds");
  CommonArgs compare_args;
  add_common_options(compare, compare_args);
  std::string compare_seeds = "1,2,3,4,5";
  std::string compare_out;
  int compare_jobs = 1;
  compare->add_option("--seeds", compare_seeds, "comma-separated seed list");
  compare->add_option("--out", compare_out, "output directory");
  compare->add_option("--jobs", compare_jobs, "parallel worker slots");

  // ablate ---------------------------------------------------------------
  auto* ablate = app.add_subcommand("ablate", "component ablation sweep");
  CommonArgs ablate_args;
  add_common_options(ablate, ablate_args);
  std::string ablate_component;
  std::string ablate_seeds = "1,2,3";
  std::string ablate_out;
  int ablate_jobs = 1;
  ablate->add_option("--component", ablate_component, "gating | regime | experts | group-size")
      ->required();
  ablate->add_option("--seeds", ablate_seeds, "comma-separated seed list");
  ablate->add_option("--out", ablate_out, "output directory");
  ablate->add_option("--jobs", ablate_jobs, "parallel worker slots");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      vm::harness::write_dataset_with_meta(vm::data::GenConfig{gen_n, gen_seed, gen_noise},
                                           gen_out);
      std::cout << "wrote " << gen_out << " (" << gen_n << " samples)\n";
      return 0;
    }

    if (train->parsed()) {
      vm::harness::RunConfig cfg = build_run_config(train_args);
      cfg.algo = vm::trainer::algo_from_string(train_algo);
      cfg.seed = train_seed;
      cfg.split_seed = split_seed_opt->count() > 0 ? train_split_seed : train_seed;
      cfg.out_dir = !train_out.empty() ? train_out : (default_out_root() / "run").string();
      apply_config_file(train_args, cfg);  // the config file wins over flags
      const auto report = vm::harness::run_training(cfg);
      std::cout << "run directory: " << cfg.out_dir << "\n"
                << "best epoch " << report.best_epoch << ": test_accuracy "
                << report.best.test_accuracy << ", f1 " << report.best.f1 << ", roc_auc "
                << report.best.roc_auc << "\n";
      return 0;
    }

    if (eval->parsed()) {
      vm::moe::LoadedCheckpoint ckpt = vm::moe::load_checkpoint(eval_ckpt);
      if (!ckpt.standardization) {
        throw vm::ConfigError("checkpoint has no standardization parameters");
      }
      const auto samples = vm::data::read_csv(eval_data);
      const vm::data::Dataset ds = vm::data::standardize(samples, *ckpt.standardization);
      const auto result = vm::metrics::evaluate(ckpt.model, ds);
      std::cout << eval_to_json(result).dump(2) << "\n";
      return 0;
    }

    if (compare->parsed()) {
      vm::harness::RunConfig base = build_run_config(compare_args);
      apply_config_file(compare_args, base);
      const auto out = !compare_out.empty() ? std::filesystem::path(compare_out)
                                            : default_out_root() / "compare";
      const auto report =
          vm::harness::run_compare(base, parse_seed_list(compare_seeds), out, compare_jobs);
      std::cout << "compare report: " << (out / "compare.json").string() << "\n"
                << "grpo mean test_accuracy " << report.grpo_mean.test_accuracy
                << ", ppo mean test_accuracy " << report.ppo_mean.test_accuracy << "\n";
      return 0;
    }

    if (ablate->parsed()) {
      vm::harness::RunConfig base = build_run_config(ablate_args);
      apply_config_file(ablate_args, base);
      const auto out = !ablate_out.empty() ? std::filesystem::path(ablate_out)
                                           : default_out_root() / "ablate";
      const json j = vm::harness::run_ablate(base, ablate_component,
                                             parse_seed_list(ablate_seeds), out, ablate_jobs);
      std::cout << "ablate report: " << (out / "ablate.json").string() << "\n";
      if (j.contains("mean_accuracy_delta")) {
        std::cout << "mean accuracy delta (gating on - off): "
                  << j["mean_accuracy_delta"].get<double>() << "\n";
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 0;
}
