#include "voicemoe/trainers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

#include "voicemoe/metrics.hpp"

namespace voicemoe::trainer {

using ad::Shape;
using ad::Tape;
using ad::Tensor;

Algo algo_from_string(const std::string& name) {
  if (name == "grpo") return Algo::kGrpo;
  if (name == "ppo") return Algo::kPpo;
  if (name == "ce") return Algo::kCe;
  throw ConfigError("unknown algorithm '" + name + "' (expected grpo, ppo or ce)");
}

std::string to_string(Algo algo) {
  switch (algo) {
    case Algo::kGrpo: return "grpo";
    case Algo::kPpo: return "ppo";
    case Algo::kCe: return "ce";
  }
  throw ConfigError("invalid Algo value");
}

void validate(const GrpoConfig& cfg, Algo algo) {
  if (algo == Algo::kGrpo && cfg.group_size < 2) {
    throw ConfigError("grpo: group_size must be >= 2, got " + std::to_string(cfg.group_size));
  }
  if (cfg.group_size < 1) throw ConfigError("group_size must be >= 1");
  if (!(cfg.clip_epsilon > 0.0 && cfg.clip_epsilon < 1.0)) {
    throw ConfigError("clip_epsilon must lie in (0, 1)");
  }
  if (cfg.kl_coeff < 0.0) throw ConfigError("kl_coeff must be >= 0");
  if (!(cfg.delta > 0.0)) throw ConfigError("delta must be > 0");
  if (!(cfg.learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (cfg.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (cfg.weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
}

// ---------------------------------------------------------------------------
// AdamW

AdamW::AdamW(double learning_rate, double weight_decay, double beta1, double beta2, double eps)
    : lr_(learning_rate), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (!(learning_rate > 0.0)) throw ConfigError("AdamW: learning_rate must be > 0");
}

void AdamW::step(std::span<Tensor> params) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(static_cast<std::size_t>(params[i].numel()), 0.0);
      v_[i].assign(static_cast<std::size_t>(params[i].numel()), 0.0);
    }
  }
  if (m_.size() != params.size()) throw ShapeError("AdamW: parameter list changed");
  ++step_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].mutable_data();
    if (m_[i].size() != theta.size()) throw ShapeError("AdamW: parameter shape changed");
    const auto grad = params[i].grad();
    double* m = m_[i].data();
    double* v = v_[i].data();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      // Decoupled decay, separate from the moment-driven step.
      theta[j] -= lr_ * weight_decay_ * theta[j];
      const double g = grad[j];
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      theta[j] -= lr_ * m_hat / (std::sqrt(v_hat) + eps_);
    }
  }
}

// ---------------------------------------------------------------------------
// Policy steps

namespace {

enum class AdvantageMode { kPerGroup, kWholeBatch };

}  // namespace

std::vector<double> normalized_advantages(std::span<const double> rewards,
                                          std::int64_t group_size, double delta) {
  const auto n = static_cast<std::int64_t>(rewards.size());
  if (group_size < 1 || n % group_size != 0) {
    throw ConfigError("normalized_advantages: group_size " + std::to_string(group_size) +
                      " does not divide " + std::to_string(n) + " rewards");
  }
  if (!(delta > 0.0)) throw ConfigError("normalized_advantages: delta must be > 0");
  std::vector<double> adv(rewards.size());
  const double count = static_cast<double>(group_size);
  for (std::int64_t lo = 0; lo < n; lo += group_size) {
    double mean = 0.0;
    for (std::int64_t i = lo; i < lo + group_size; ++i) mean += rewards[static_cast<std::size_t>(i)];
    mean /= count;
    double var = 0.0;
    for (std::int64_t i = lo; i < lo + group_size; ++i) {
      const double d = rewards[static_cast<std::size_t>(i)] - mean;
      var += d * d;
    }
    const double std_dev = std::sqrt(var / count);  // population std
    for (std::int64_t i = lo; i < lo + group_size; ++i) {
      adv[static_cast<std::size_t>(i)] =
          (rewards[static_cast<std::size_t>(i)] - mean) / (std_dev + delta);
    }
  }
  return adv;
}

namespace {

// A frozen value-copy of the model; parameters carry no gradient.
moe::MoeModel make_snapshot(const moe::MoeModel& model) {
  moe::MoeModel snap(model.config());
  snap.load_state(model.state());
  snap.set_requires_grad(false);
  return snap;
}

void check_batch(const Tensor& x, std::span<const int> y) {
  if (x.shape().size() != 2 || x.dim(0) != static_cast<std::int64_t>(y.size())) {
    throw ShapeError("step: features " + ad::shape_str(x.shape()) + " do not match " +
                     std::to_string(y.size()) + " labels");
  }
}

StepTrace policy_step(moe::MoeModel& model, const moe::MoeModel& snapshot, const Tensor& x,
                      std::span<const int> y, const GrpoConfig& cfg, AdamW& opt,
                      Rng& sample_rng, AdvantageMode mode) {
  check_batch(x, y);
  const std::int64_t batch = x.dim(0);
  const std::int64_t g = mode == AdvantageMode::kPerGroup ? cfg.group_size : 1;
  const std::int64_t classes = model.config().n_classes;
  const double eps = cfg.clip_epsilon;

  // Old-policy forward, value-only.
  Tape old_tape(/*grad_enabled=*/false);
  const Tensor old_logits = snapshot.forward(old_tape, x);
  const Tensor p_old = old_tape.softmax(old_logits);        // [B,C], constant
  const Tensor logp_old = old_tape.log_softmax(old_logits);  // [B,C], constant

  // Sample the action group per instance from P_old, then binary rewards.
  std::vector<std::int64_t> actions(static_cast<std::size_t>(batch * g));
  std::vector<double> rewards(static_cast<std::size_t>(batch * g));
  for (std::int64_t i = 0; i < batch; ++i) {
    const std::span<const double> row = p_old.data().subspan(
        static_cast<std::size_t>(i * classes), static_cast<std::size_t>(classes));
    for (std::int64_t j = 0; j < g; ++j) {
      const auto a = static_cast<std::int64_t>(sample_rng.categorical(row));
      actions[static_cast<std::size_t>(i * g + j)] = a;
      rewards[static_cast<std::size_t>(i * g + j)] =
          a == y[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    }
  }

  const std::vector<double> adv = normalized_advantages(
      rewards, mode == AdvantageMode::kPerGroup ? g : batch * g, cfg.delta);

  const Shape group_shape = g > 1 ? Shape{batch, g} : Shape{batch};

  // Current-policy graph.
  Tape tape;
  const Tensor logits = model.forward(tape, x);
  const Tensor probs = tape.softmax(logits);
  const Tensor p = tape.gather_log_prob(probs, actions, group_shape);

  std::vector<double> p_old_sel(actions.size());
  for (std::int64_t i = 0; i < batch; ++i)
    for (std::int64_t j = 0; j < g; ++j)
      p_old_sel[static_cast<std::size_t>(i * g + j)] =
          p_old.data()[static_cast<std::size_t>(i * classes) +
                       static_cast<std::size_t>(actions[static_cast<std::size_t>(i * g + j)])] +
          cfg.delta;
  const Tensor ratio = tape.div(p, Tensor::from_data(group_shape, std::move(p_old_sel)));

  const Tensor adv_t = Tensor::from_data(group_shape, adv);
  const Tensor unclipped = tape.mul(ratio, adv_t);
  const Tensor clipped = tape.mul(tape.clip(ratio, 1.0 - eps, 1.0 + eps), adv_t);
  const Tensor surrogate = tape.minimum(unclipped, clipped);
  const Tensor policy_loss = tape.mul_scalar(tape.mean(surrogate), -1.0);

  // KL(P_old || P): mean over the batch of the per-row sum, i.e. the
  // all-element mean scaled by the class count.
  const Tensor logp = tape.log_softmax(logits);
  const Tensor kl = tape.mul_scalar(tape.mean(tape.mul(p_old, tape.sub(logp_old, logp))),
                                    static_cast<double>(classes));
  const Tensor total = tape.add(policy_loss, tape.mul_scalar(kl, cfg.kl_coeff));

  StepTrace trace;
  trace.policy_loss = policy_loss.item();
  trace.kl_value = kl.item();
  trace.total_loss = total.item();
  if (!std::isfinite(trace.total_loss)) {
    throw TrainingError("non-finite loss (policy=" + std::to_string(trace.policy_loss) +
                        ", kl=" + std::to_string(trace.kl_value) + ")");
  }

  // Trust-region bound: every surrogate term is capped by (1+eps)|adv|.
  for (std::size_t i = 0; i < adv.size(); ++i) {
    if (surrogate.data()[i] > (1.0 + eps) * std::abs(adv[i]) + 1e-12) {
      throw TrainingError("trust-region bound violated at sample " + std::to_string(i));
    }
  }

  double reward_sum = 0.0, ratio_sum = 0.0;
  std::int64_t clipped_count = 0;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    reward_sum += rewards[i];
    const double r = ratio.data()[i];
    ratio_sum += r;
    clipped_count += r < 1.0 - eps || r > 1.0 + eps;
  }
  trace.mean_reward = reward_sum / static_cast<double>(rewards.size());
  trace.mean_ratio = ratio_sum / static_cast<double>(rewards.size());
  trace.clip_fraction = static_cast<double>(clipped_count) / static_cast<double>(rewards.size());

  tape.backward(total);
  auto& params = model.parameters();
  opt.step(params);
  model.zero_grad();
  return trace;
}

}  // namespace

StepTrace grpo_step(moe::MoeModel& model, const Tensor& x, std::span<const int> y,
                    const GrpoConfig& cfg, AdamW& opt, Rng& sample_rng) {
  validate(cfg, Algo::kGrpo);
  const moe::MoeModel snapshot = make_snapshot(model);
  return policy_step(model, snapshot, x, y, cfg, opt, sample_rng, AdvantageMode::kPerGroup);
}

StepTrace ppo_step(moe::MoeModel& model, const Tensor& x, std::span<const int> y,
                   const GrpoConfig& cfg, AdamW& opt, Rng& sample_rng) {
  validate(cfg, Algo::kPpo);
  const moe::MoeModel snapshot = make_snapshot(model);
  return policy_step(model, snapshot, x, y, cfg, opt, sample_rng, AdvantageMode::kWholeBatch);
}

StepTrace grpo_step(moe::MoeModel& model, const moe::MoeModel& snapshot, const Tensor& x,
                    std::span<const int> y, const GrpoConfig& cfg, AdamW& opt, Rng& sample_rng) {
  validate(cfg, Algo::kGrpo);
  return policy_step(model, snapshot, x, y, cfg, opt, sample_rng, AdvantageMode::kPerGroup);
}

StepTrace ppo_step(moe::MoeModel& model, const moe::MoeModel& snapshot, const Tensor& x,
                   std::span<const int> y, const GrpoConfig& cfg, AdamW& opt, Rng& sample_rng) {
  validate(cfg, Algo::kPpo);
  return policy_step(model, snapshot, x, y, cfg, opt, sample_rng, AdvantageMode::kWholeBatch);
}

StepTrace ce_step(moe::MoeModel& model, const Tensor& x, std::span<const int> y,
                  const GrpoConfig& cfg, AdamW& opt) {
  validate(cfg, Algo::kCe);
  check_batch(x, y);
  const std::int64_t batch = x.dim(0);

  Tape tape;
  const Tensor logits = model.forward(tape, x);
  const Tensor logp = tape.log_softmax(logits);
  std::vector<std::int64_t> targets(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) targets[i] = y[i];
  const Tensor picked = tape.gather_log_prob(logp, targets, {batch});
  const Tensor loss = tape.mul_scalar(tape.mean(picked), -1.0);

  StepTrace trace;
  trace.policy_loss = loss.item();
  trace.kl_value = 0.0;
  trace.total_loss = trace.policy_loss;
  trace.mean_ratio = 1.0;
  trace.clip_fraction = 0.0;
  if (!std::isfinite(trace.total_loss)) {
    throw TrainingError("non-finite cross-entropy loss");
  }
  const std::vector<int> pred =
      metrics::argmax_rows(logits.data(), batch, model.config().n_classes);
  trace.mean_reward = metrics::accuracy(pred, y);

  tape.backward(loss);
  auto& params = model.parameters();
  opt.step(params);
  model.zero_grad();
  return trace;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

Tensor gather_batch(const data::Dataset& ds, std::span<const std::int64_t> idx,
                    std::int64_t n_features) {
  std::vector<double> x;
  x.reserve(idx.size() * static_cast<std::size_t>(n_features));
  for (const auto i : idx) {
    const auto* row = ds.x.data() + i * n_features;
    x.insert(x.end(), row, row + n_features);
  }
  return Tensor::from_data({static_cast<std::int64_t>(idx.size()), n_features}, std::move(x));
}

double train_accuracy(const moe::MoeModel& model, const data::Dataset& ds) {
  const std::vector<double> probs = metrics::predict_dataset(model, ds);
  const std::vector<int> pred = metrics::argmax_rows(probs, ds.n, model.config().n_classes);
  return metrics::accuracy(pred, ds.y);
}

}  // namespace

TrainResult train(moe::MoeModel& model, const data::Dataset& train_set,
                  const data::Dataset& test_set, Algo algo, const GrpoConfig& cfg) {
  validate(cfg, algo);
  if (train_set.n < 1 || test_set.n < 1) throw ConfigError("train: empty dataset");
  const std::int64_t n_features = model.config().n_features;

  TrainResult result;
  result.best_state = model.state();
  result.best_epoch = 0;
  if (cfg.epochs == 0) return result;

  Rng shuffle_rng(cfg.seed);
  Rng sample_rng(cfg.seed + 1);
  AdamW opt(cfg.learning_rate, cfg.weight_decay);
  std::optional<moe::MoeModel> snapshot;  // workspace reused across steps
  if (algo != Algo::kCe) snapshot.emplace(model.config());

  std::vector<std::int64_t> order(static_cast<std::size_t>(train_set.n));
  std::iota(order.begin(), order.end(), 0);

  double best_acc = -1.0;
  for (std::int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double policy_sum = 0.0, kl_sum = 0.0;
    std::int64_t steps = 0;
    for (std::int64_t start = 0; start < train_set.n; start += cfg.batch_size) {
      const std::int64_t b = std::min(cfg.batch_size, train_set.n - start);
      const std::span<const std::int64_t> idx(order.data() + start,
                                              static_cast<std::size_t>(b));
      const Tensor x = gather_batch(train_set, idx, n_features);
      std::vector<int> y(static_cast<std::size_t>(b));
      for (std::int64_t i = 0; i < b; ++i)
        y[static_cast<std::size_t>(i)] = train_set.y[static_cast<std::size_t>(idx[i])];

      StepTrace trace;
      try {
        switch (algo) {
          case Algo::kGrpo:
          case Algo::kPpo: {
            snapshot->load_state(model.state());
            snapshot->set_requires_grad(false);
            trace = policy_step(model, *snapshot, x, y, cfg, opt, sample_rng,
                                algo == Algo::kGrpo ? AdvantageMode::kPerGroup
                                                    : AdvantageMode::kWholeBatch);
            break;
          }
          case Algo::kCe:
            trace = ce_step(model, x, y, cfg, opt);
            break;
        }
      } catch (const TrainingError& e) {
        throw TrainingError("epoch " + std::to_string(epoch) + ", step " +
                            std::to_string(steps + 1) + ": " + e.what());
      }
      policy_sum += trace.policy_loss;
      kl_sum += trace.kl_value;
      ++steps;
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.policy_loss = policy_sum / static_cast<double>(steps);
    em.kl = kl_sum / static_cast<double>(steps);
    em.train_accuracy = train_accuracy(model, train_set);
    const metrics::EvalResult ev = metrics::evaluate(model, test_set);
    em.test_accuracy = ev.accuracy;
    em.f1 = ev.f1;
    em.roc_auc = ev.roc_auc;
    result.epochs.push_back(em);

    if (em.test_accuracy > best_acc) {  // strict: earliest epoch wins ties
      best_acc = em.test_accuracy;
      result.best_state = model.state();
      result.best_epoch = epoch;
    }
  }
  return result;
}

}  // namespace voicemoe::trainer
