// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// criterion fails. Heavier end-to-end criteria train full models, so the
// whole binary takes tens of minutes on a small machine.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "testutil.hpp"
#include "voicemoe/harness.hpp"
#include "voicemoe/metrics.hpp"
#include "voicemoe/moe_model.hpp"
#include "voicemoe/rng.hpp"
#include "voicemoe/trainers.hpp"

namespace {

using namespace voicemoe;
using ad::Tape;
using ad::Tensor;

struct Criterion {
  int id;
  std::string summary;
  std::function<bool(std::string&)> run;
};

double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

Tensor random_batch(Rng& rng, std::int64_t n) {
  Tensor x = Tensor::zeros({n, 6});
  for (auto& v : x.mutable_data()) v = rng.normal(0.0, 1.0);
  return x;
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness for every parameter of the tiny config.

bool criterion_gradients(std::string& detail) {
  const double t0 = now_seconds();
  moe::MoeModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_experts = 2;
  cfg.n_heads = 2;
  cfg.ff_dim = 16;
  cfg.seed = 202;
  moe::MoeModel model(cfg);

  Rng rng(7);
  const Tensor x = random_batch(rng, 4);
  const std::vector<std::int64_t> y{1, 0, 1, 0};
  const auto loss_of = [&](Tape& t) {
    const Tensor logp = t.log_softmax(model.forward(t, x));
    return t.mul_scalar(t.mean(t.gather_log_prob(logp, y, {4})), -1.0);
  };
  const double err = testutil::max_grad_fd_error(
      model.parameters(),
      [&] {
        Tape t;
        Tensor loss = loss_of(t);
        t.backward(loss);
      },
      [&] {
        Tape t(false);
        return loss_of(t).item();
      });
  const double elapsed = now_seconds() - t0;
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "max rel err %.3g over %lld params (tol 1e-4), %.1f s (limit 30)", err,
                static_cast<long long>(model.parameter_count()), elapsed);
  detail = buf;
  return err < 1e-4 && elapsed < 30.0;
}

// ---------------------------------------------------------------------------
// 2. Algorithm step invariants over randomized grpo_step calls.

bool criterion_step_invariants(std::string& detail) {
  const double t0 = now_seconds();

  for (int trial = 0; trial < 100; ++trial) {
    moe::MoeModelConfig mc;
    mc.d_model = 8;
    mc.n_experts = 2;
    mc.n_heads = 2;
    mc.ff_dim = 12;
    mc.seed = static_cast<std::uint64_t>(trial);
    moe::MoeModel model(mc);

    Rng rng(static_cast<std::uint64_t>(1000 + trial));
    const std::int64_t b = 3 + static_cast<std::int64_t>(rng.uniform_int(12));
    const Tensor x = random_batch(rng, b);
    std::vector<int> y(static_cast<std::size_t>(b));
    for (auto& v : y) v = rng.bernoulli(0.5) ? 1 : 0;

    trainer::GrpoConfig cfg;
    cfg.group_size = 2 + static_cast<std::int64_t>(rng.uniform_int(7));
    trainer::AdamW opt(cfg.learning_rate, cfg.weight_decay);

    // certified bound: any sampled ratio satisfies |rho - 1| <= delta / p_min
    Tape probe(false);
    const Tensor probs = model.predict_proba(probe, x);
    double p_min = 1.0;
    for (const double v : probs.data()) p_min = std::min(p_min, v);
    const double rho_bound = cfg.delta / p_min;
    if (rho_bound > 1e-6) {
      detail = "trial " + std::to_string(trial) + ": probe bound too loose";
      return false;
    }

    const trainer::StepTrace trace = trainer::grpo_step(model, x, y, cfg, opt, rng);
    if (std::abs(trace.mean_ratio - 1.0) > rho_bound || trace.clip_fraction != 0.0) {
      detail = "trial " + std::to_string(trial) + ": rho deviates at snapshot";
      return false;
    }
    if (!(trace.kl_value == 0.0) || trace.kl_value < -1e-9) {
      detail = "trial " + std::to_string(trial) + ": KL not zero at snapshot";
      return false;
    }
    if (std::abs(trace.total_loss - (trace.policy_loss + cfg.kl_coeff * trace.kl_value)) >
        1e-12) {
      detail = "trial " + std::to_string(trial) + ": total loss recomposition failed";
      return false;
    }

    // group advantages: mean 0 +- 1e-9; zero-variance groups exactly zero
    std::vector<double> rewards(static_cast<std::size_t>(cfg.group_size * 4));
    for (auto& r : rewards) r = rng.bernoulli(0.5) ? 1.0 : 0.0;
    const auto adv = trainer::normalized_advantages(rewards, cfg.group_size, cfg.delta);
    for (std::size_t g = 0; g < rewards.size() / static_cast<std::size_t>(cfg.group_size); ++g) {
      double mean = 0.0;
      bool all_same = true;
      for (std::int64_t i = 0; i < cfg.group_size; ++i) {
        const std::size_t at = g * static_cast<std::size_t>(cfg.group_size) +
                               static_cast<std::size_t>(i);
        mean += adv[at];
        all_same = all_same && rewards[at] == rewards[g * static_cast<std::size_t>(cfg.group_size)];
      }
      mean /= static_cast<double>(cfg.group_size);
      if (std::abs(mean) > 1e-9) {
        detail = "group advantage mean " + std::to_string(mean);
        return false;
      }
      if (all_same) {
        for (std::int64_t i = 0; i < cfg.group_size; ++i) {
          if (adv[g * static_cast<std::size_t>(cfg.group_size) + static_cast<std::size_t>(i)] !=
              0.0) {
            detail = "zero-variance group produced nonzero advantage";
            return false;
          }
        }
      }
    }
  }

  // zero-variance groups contribute zero gradient: saturated policy, all
  // rewards equal; without KL and decay the update must not move parameters.
  {
    moe::MoeModelConfig mc;
    mc.d_model = 8;
    mc.n_experts = 2;
    mc.n_heads = 2;
    mc.ff_dim = 12;
    mc.seed = 77;
    moe::MoeModel model(mc);
    auto& params = model.parameters();
    const auto& names = model.parameter_names();
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (names[i] == "head.b") {
        params[i].mutable_data()[0] = -40.0;
        params[i].mutable_data()[1] = 40.0;
      }
    }
    const auto before = model.state();
    Rng rng(555);
    const Tensor x = random_batch(rng, 6);
    const std::vector<int> y(6, 1);
    trainer::GrpoConfig cfg;
    cfg.kl_coeff = 0.0;
    cfg.weight_decay = 0.0;
    trainer::AdamW opt(cfg.learning_rate, cfg.weight_decay);
    const auto trace = trainer::grpo_step(model, x, y, cfg, opt, rng);
    if (trace.policy_loss != 0.0 || model.state() != before) {
      detail = "saturated zero-variance step moved parameters";
      return false;
    }
  }

  const double elapsed = now_seconds() - t0;
  char buf[120];
  std::snprintf(buf, sizeof(buf), "100 randomized steps clean, %.1f s (limit 60)", elapsed);
  detail = buf;
  return elapsed < 60.0;
}

// ---------------------------------------------------------------------------
// 3. Metric oracles.

double pairwise_auc(std::span<const double> scores, std::span<const int> labels) {
  double wins = 0.0, ties = 0.0;
  std::int64_t np = 0, nn = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      ++np;
      for (std::size_t j = 0; j < labels.size(); ++j) {
        if (labels[j] != 1) {
          wins += scores[i] > scores[j];
          ties += scores[i] == scores[j];
        }
      }
    } else {
      ++nn;
    }
  }
  return (wins + 0.5 * ties) / (static_cast<double>(np) * static_cast<double>(nn));
}

bool criterion_metric_oracles(std::string& detail) {
  Rng rng(99);
  double worst = 0.0;
  int instances = 0;
  while (instances < 200) {
    const auto n = static_cast<std::size_t>(2 + rng.uniform_int(49));
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    bool pos = false, neg = false;
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = rng.bernoulli(0.4) ? std::round(rng.uniform() * 4.0) / 4.0 : rng.uniform();
      labels[i] = rng.bernoulli(0.5) ? 1 : 0;
      pos = pos || labels[i] == 1;
      neg = neg || labels[i] == 0;
    }
    if (!pos || !neg) continue;
    ++instances;
    worst = std::max(worst,
                     std::abs(metrics::roc_auc(scores, labels) - pairwise_auc(scores, labels)));
    if (worst > 1e-12) {
      detail = "rank vs pairwise AUC differ by " + std::to_string(worst);
      return false;
    }

    // accuracy / F1 against direct confusion-matrix formulas, exact
    std::vector<int> pred(n);
    for (std::size_t i = 0; i < n; ++i) pred[i] = rng.bernoulli(0.5) ? 1 : 0;
    std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      tp += pred[i] == 1 && labels[i] == 1;
      fp += pred[i] == 1 && labels[i] == 0;
      tn += pred[i] == 0 && labels[i] == 0;
      fn += pred[i] == 0 && labels[i] == 1;
    }
    if (metrics::accuracy(pred, labels) !=
        static_cast<double>(tp + tn) / static_cast<double>(n)) {
      detail = "accuracy mismatch";
      return false;
    }
    // independently counted confusion matrix, textbook formula: exact match
    double direct_f1 = 0.0;
    if (tp + fp != 0 && tp + fn != 0) {
      const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
      const double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
      direct_f1 = precision + recall == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
    }
    const double f1 = metrics::f1_score(pred, labels);
    if (f1 != direct_f1) {
      detail = "f1 mismatch";
      return false;
    }
    // algebraic identity f1 == 2tp / (2tp + fp + fn), up to float rounding
    if (2 * tp + fp + fn > 0 &&
        std::abs(f1 - 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn)) >
            1e-12) {
      detail = "f1 identity violated";
      return false;
    }
  }
  char buf[120];
  std::snprintf(buf, sizeof(buf), "200 instances, max |rank - pairwise| %.2e (tol 1e-12)", worst);
  detail = buf;
  return true;
}

// ---------------------------------------------------------------------------
// 4. End-to-end GRPO on the default configuration, single-threaded.

bool criterion_end_to_end(std::string& detail) {
#ifdef _OPENMP
  const int saved_threads = omp_get_max_threads();
  omp_set_num_threads(1);
#endif
  testutil::TempDir tmp("acc_e2e");
  harness::RunConfig cfg;
  cfg.gen = data::GenConfig{};  // n=5000, seed=42, noise=0.02
  cfg.seed = 3;                 // project default run seed
  cfg.split_seed = 3;
  cfg.out_dir = (tmp.path() / "run").string();

  const double t0 = now_seconds();
  const auto report = harness::run_training(cfg);
  const double elapsed = now_seconds() - t0;
#ifdef _OPENMP
  omp_set_num_threads(saved_threads);
#endif

  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "best epoch %lld: acc %.4f (>= 0.95), auc %.4f (>= 0.97), %.0f s single-thread "
                "(limit 600)",
                static_cast<long long>(report.best_epoch), report.best.test_accuracy,
                report.best.roc_auc, elapsed);
  detail = buf;
  return report.best.test_accuracy >= 0.95 && report.best.roc_auc >= 0.97 && elapsed < 600.0;
}

// ---------------------------------------------------------------------------
// 5. Regime ordering via compare over 5 seeds.

bool criterion_regime_ordering(std::string& detail) {
  testutil::TempDir tmp("acc_cmp");
  harness::RunConfig base;
  base.gen = data::GenConfig{};  // defaults
  base.out_dir = "unused";
  const auto report = harness::run_compare(base, {1, 2, 3, 4, 5}, tmp.path() / "cmp", 1);

  char buf[160];
  std::snprintf(buf, sizeof(buf), "grpo mean acc %.4f vs ppo mean acc %.4f (slack 0.005)",
                report.grpo_mean.test_accuracy, report.ppo_mean.test_accuracy);
  detail = buf;
  return report.grpo_mean.test_accuracy >= report.ppo_mean.test_accuracy - 0.005;
}

// ---------------------------------------------------------------------------
// 6. Separability sanity: noise-free data is learnable by plain CE.

bool criterion_separability(std::string& detail) {
  testutil::TempDir tmp("acc_ce");
  harness::RunConfig cfg;
  cfg.gen = data::GenConfig{10000, 42, 0.0};
  cfg.algo = trainer::Algo::kCe;
  cfg.seed = 1;
  cfg.split_seed = 1;
  cfg.out_dir = (tmp.path() / "run").string();
  const auto report = harness::run_training(cfg);

  char buf[120];
  std::snprintf(buf, sizeof(buf), "CE noise=0 best acc %.4f at epoch %lld (>= 0.99 within 30)",
                report.best.test_accuracy, static_cast<long long>(report.best_epoch));
  detail = buf;
  return report.best.test_accuracy >= 0.99 && report.best_epoch <= 30;
}

// ---------------------------------------------------------------------------
// 7. Determinism of full runs and checkpoints.

bool criterion_determinism(std::string& detail) {
  testutil::TempDir tmp("acc_det");
  harness::RunConfig cfg;
  cfg.gen = data::GenConfig{800, 3, 0.02};
  cfg.trainer_cfg.epochs = 3;
  cfg.seed = 6;
  cfg.split_seed = 6;

  cfg.out_dir = (tmp.path() / "a").string();
  harness::run_training(cfg);
  cfg.out_dir = (tmp.path() / "b").string();
  harness::run_training(cfg);

  const auto csv_a = testutil::read_file(tmp.path() / "a" / "epochs.csv");
  const auto csv_b = testutil::read_file(tmp.path() / "b" / "epochs.csv");
  if (csv_a.empty() || csv_a != csv_b) {
    detail = "epochs.csv differs between identical runs";
    return false;
  }

  // checkpoint round trip: bytes and forward pass
  auto loaded = moe::load_checkpoint(tmp.path() / "a" / "best");
  moe::save_checkpoint(loaded.model, tmp.path() / "resaved", loaded.standardization);
  if (testutil::read_file(tmp.path() / "a" / "best" / "weights.bin") !=
      testutil::read_file(tmp.path() / "resaved" / "weights.bin")) {
    detail = "re-saved checkpoint bytes differ";
    return false;
  }
  auto reloaded = moe::load_checkpoint(tmp.path() / "resaved");
  Rng rng(4);
  const Tensor x = random_batch(rng, 5);
  Tape t(false);
  const Tensor la = loaded.model.forward(t, x);
  const Tensor lb = reloaded.model.forward(t, x);
  for (std::size_t i = 0; i < la.data().size(); ++i) {
    if (la.data()[i] != lb.data()[i]) {
      detail = "forward differs after checkpoint round trip";
      return false;
    }
  }
  detail = "identical epochs.csv bytes; checkpoint round trip bit-exact";
  return true;
}

// ---------------------------------------------------------------------------
// 8. Ablation harness completes and annotates the gating delta.

bool criterion_ablation(std::string& detail) {
  testutil::TempDir tmp("acc_abl");
  harness::RunConfig base;
  base.gen = data::GenConfig{1500, 42, 0.02};
  base.trainer_cfg.epochs = 8;
  base.out_dir = "unused";
  const auto j = harness::run_ablate(base, "gating", {1, 2, 3}, tmp.path() / "abl", 1);

  if (!j.contains("mean_accuracy_delta")) {
    detail = "missing mean_accuracy_delta";
    return false;
  }
  if (!j.contains("reference") || !j["reference"].contains("expected_test_accuracy_drop")) {
    detail = "missing reference annotation";
    return false;
  }
  if (j["rows"].size() != 6) {
    detail = "expected 6 runs (2 variants x 3 seeds)";
    return false;
  }
  char buf[120];
  std::snprintf(buf, sizeof(buf), "6 runs, mean accuracy delta %+.4f (reference 3-5%%, not asserted)",
                j["mean_accuracy_delta"].get<double>());
  detail = buf;
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<Criterion> criteria = {
      {1, "gradient correctness vs finite differences", criterion_gradients},
      {2, "policy step invariants at the snapshot", criterion_step_invariants},
      {3, "metric oracle equivalence", criterion_metric_oracles},
      {4, "end-to-end GRPO reaches the accuracy/AUC bar", criterion_end_to_end},
      {5, "regime ordering: GRPO vs PPO over 5 seeds", criterion_regime_ordering},
      {6, "separability sanity with noise-free labels", criterion_separability},
      {7, "determinism of runs and checkpoints", criterion_determinism},
      {8, "gating ablation harness", criterion_ablation},
  };

  // optional filter: `acceptance 3 7` runs only those criteria
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));

  int failures = 0;
  for (auto& c : criteria) {
    if (!selected.empty() &&
        std::find(selected.begin(), selected.end(), c.id) == selected.end()) {
      continue;
    }
    std::string detail;
    bool ok = false;
    try {
      ok = c.run(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    std::printf("[%s] criterion %d: %s — %s\n", ok ? "PASS" : "FAIL", c.id, c.summary.c_str(),
                detail.c_str());
    std::fflush(stdout);
    failures += !ok;
  }
  if (failures > 0) std::printf("%d of %zu criteria failed\n", failures, criteria.size());
  return failures;
}
