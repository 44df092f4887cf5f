#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "voicemoe/moe_model.hpp"
#include "voicemoe/rng.hpp"
#include "voicemoe/synth_data.hpp"
#include "voicemoe/tensor.hpp"

namespace voicemoe::trainer {

enum class Algo { kGrpo, kPpo, kCe };

Algo algo_from_string(const std::string& name);  // "grpo" | "ppo" | "ce"
std::string to_string(Algo algo);

struct GrpoConfig {
  std::int64_t group_size = 8;   // G, actions sampled per instance
  double clip_epsilon = 0.2;     // ratio clip half-width
  double kl_coeff = 0.01;        // weight of KL(P_old || P)
  double learning_rate = 1e-3;
  std::int64_t epochs = 30;
  std::int64_t batch_size = 64;
  double delta = 1e-8;           // std / ratio denominator guard
  double weight_decay = 0.01;
  std::uint64_t seed = 0;        // shuffle stream; seed+1 is the sampling stream
};

// Throws ConfigError on violated invariants (G >= 2 for GRPO, 0 < eps < 1, ...).
void validate(const GrpoConfig& cfg, Algo algo);

struct StepTrace {
  double policy_loss = 0.0;
  double kl_value = 0.0;
  double total_loss = 0.0;    // policy_loss + kl_coeff * kl_value, exactly
  double mean_reward = 0.0;
  double mean_ratio = 0.0;
  double clip_fraction = 0.0;  // share of ratios outside [1-eps, 1+eps]
};

// Adam with decoupled weight decay: the shrink theta *= (1 - lr*wd) is
// applied separately from the moment update. Moments are kept positionally,
// so every step must pass the same parameter list.
class AdamW {
 public:
  explicit AdamW(double learning_rate, double weight_decay = 0.01, double beta1 = 0.9,
                 double beta2 = 0.999, double eps = 1e-8);

  // Consumes the accumulated gradients of params (missing grads count as 0).
  void step(std::span<ad::Tensor> params);

  std::int64_t step_count() const { return step_; }
  double learning_rate() const { return lr_; }

 private:
  double lr_, weight_decay_, beta1_, beta2_, eps_;
  std::int64_t step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Reward normalization with population statistics: each consecutive block of
// group_size entries becomes (r - mean) / (std + delta) independently.
// group_size == rewards.size() normalizes across the whole batch. A
// zero-variance block yields exactly zero advantages.
std::vector<double> normalized_advantages(std::span<const double> rewards,
                                          std::int64_t group_size, double delta);

// One optimizer update on one mini-batch, following the group-relative
// recipe: snapshot the policy, sample G actions per instance from the old
// probabilities, turn correctness into binary rewards, normalize them within
// each instance's group, and minimize the clipped ratio surrogate plus a
// KL(P_old || P) penalty. Gradients flow only through the current
// probabilities; the snapshot, actions and advantages stay constant.
StepTrace grpo_step(moe::MoeModel& model, const ad::Tensor& x, std::span<const int> y,
                    const GrpoConfig& cfg, AdamW& opt, Rng& sample_rng);

// Same surrogate with a single sampled action per instance and advantages
// normalized across the whole batch instead of per group.
StepTrace ppo_step(moe::MoeModel& model, const ad::Tensor& x, std::span<const int> y,
                   const GrpoConfig& cfg, AdamW& opt, Rng& sample_rng);

// Workspace variants: the caller owns the frozen old-policy copy. snapshot
// must hold the same parameter values as model with requires_grad off; it is
// left untouched (the training loop reuses one instance across steps).
StepTrace grpo_step(moe::MoeModel& model, const moe::MoeModel& snapshot, const ad::Tensor& x,
                    std::span<const int> y, const GrpoConfig& cfg, AdamW& opt, Rng& sample_rng);
StepTrace ppo_step(moe::MoeModel& model, const moe::MoeModel& snapshot, const ad::Tensor& x,
                   std::span<const int> y, const GrpoConfig& cfg, AdamW& opt, Rng& sample_rng);

// Plain mean negative log-likelihood baseline; kl_value is 0 by definition.
StepTrace ce_step(moe::MoeModel& model, const ad::Tensor& x, std::span<const int> y,
                  const GrpoConfig& cfg, AdamW& opt);

struct EpochMetrics {
  std::int64_t epoch = 0;  // 1-based
  double train_accuracy = 0.0;
  double policy_loss = 0.0;  // mean over the epoch's steps
  double kl = 0.0;           // mean over the epoch's steps
  double test_accuracy = 0.0;
  double f1 = 0.0;
  double roc_auc = 0.0;  // NaN when undefined on the test split
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  std::vector<std::vector<double>> best_state;  // parameters at the best epoch
  std::int64_t best_epoch = 0;                  // 0 when epochs == 0
};

// Full training loop: seeded shuffle each epoch, the chosen step over
// mini-batches, per-epoch train/test evaluation, and retention of the
// checkpoint with the best test accuracy (earliest epoch wins ties).
// The model is left at its final-epoch parameters.
TrainResult train(moe::MoeModel& model, const data::Dataset& train_set,
                  const data::Dataset& test_set, Algo algo, const GrpoConfig& cfg);

}  // namespace voicemoe::trainer
