#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "voicemoe/synth_data.hpp"
#include "voicemoe/tensor.hpp"

namespace voicemoe::moe {

struct MoeModelConfig {
  std::int64_t n_features = 6;
  std::int64_t d_model = 32;
  std::int64_t n_experts = 4;
  std::int64_t n_heads = 4;
  std::int64_t ff_dim = 64;
  std::int64_t n_classes = 2;
  bool use_gating = true;
  std::uint64_t seed = 0;

  bool operator==(const MoeModelConfig&) const = default;
};

// Throws ConfigError when the config violates its invariants
// (d_model divisible by n_heads, n_experts >= 1, n_classes == 2, ...).
void validate(const MoeModelConfig& cfg);

// Mixture-of-experts transformer classifier over standardized tabular voice
// features. Each scalar feature becomes one token (learned affine plus a
// feature embedding); every expert is a single pre-norm encoder layer whose
// mean-pooled output is fused under a softmax gate conditioned on the mean
// embedded token; a linear head maps the fused vector to two class logits.
class MoeModel {
 public:
  explicit MoeModel(const MoeModelConfig& cfg);

  // x: [batch, n_features] standardized inputs -> logits [batch, n_classes].
  ad::Tensor forward(ad::Tape& tape, const ad::Tensor& x) const;
  // softmax(forward): rows in the probability simplex.
  ad::Tensor predict_proba(ad::Tape& tape, const ad::Tensor& x) const;

  const MoeModelConfig& config() const { return cfg_; }
  std::vector<ad::Tensor>& parameters() { return params_; }
  const std::vector<ad::Tensor>& parameters() const { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }
  std::int64_t parameter_count() const;

  // Flat value copies in parameter order (used for the policy snapshot and
  // the best-epoch checkpoint).
  std::vector<std::vector<double>> state() const;
  void load_state(const std::vector<std::vector<double>>& state);

  void zero_grad();
  void set_requires_grad(bool value);

 private:
  struct Expert {
    ad::Tensor ln1_gain, ln1_bias;
    ad::Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    ad::Tensor ln2_gain, ln2_bias;
    ad::Tensor w1, b1, w2, b2;
  };

  ad::Tensor add_param(const std::string& name, ad::Shape shape, ad::Tensor init);

  MoeModelConfig cfg_;
  ad::Tensor embed_scale_, embed_shift_, embed_pos_;
  std::vector<Expert> experts_;
  ad::Tensor gate_w_, gate_b_;
  ad::Tensor head_w_, head_b_;
  std::vector<ad::Tensor> params_;
  std::vector<std::string> names_;
};

inline constexpr int kCheckpointFormatVersion = 1;
inline constexpr double kLayerNormEps = 1e-5;

// Checkpoint layout: <dir>/manifest.json (config, named parameter shapes and
// byte offsets, checksum, optional standardization) + <dir>/weights.bin
// (little-endian float64, concatenated in manifest order).
void save_checkpoint(const MoeModel& model, const std::filesystem::path& dir,
                     const std::optional<data::StandardizationParams>& standardization = {});

struct LoadedCheckpoint {
  MoeModel model;
  std::optional<data::StandardizationParams> standardization;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace voicemoe::moe
