#include "voicemoe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace voicemoe::metrics {

double accuracy(std::span<const int> pred, std::span<const int> truth) {
  if (pred.empty()) throw ConfigError("accuracy: empty input");
  if (pred.size() != truth.size()) throw ConfigError("accuracy: length mismatch");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == truth[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

double f1_score(std::span<const int> pred, std::span<const int> truth, int positive_class,
                bool* degenerate) {
  if (pred.empty()) throw ConfigError("f1_score: empty input");
  if (pred.size() != truth.size()) throw ConfigError("f1_score: length mismatch");
  std::int64_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == positive_class;
    const bool t = truth[i] == positive_class;
    tp += p && t;
    fp += p && !t;
    fn += !p && t;
  }
  if (degenerate) *degenerate = false;
  if (tp + fp == 0 || tp + fn == 0) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  const double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  if (precision + recall == 0.0) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  return 2.0 * precision * recall / (precision + recall);
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.empty()) throw ConfigError("roc_auc: empty input");
  if (scores.size() != labels.size()) throw ConfigError("roc_auc: length mismatch");
  for (const double s : scores) {
    if (!std::isfinite(s)) throw NumericError("roc_auc: non-finite score");
  }
  const std::size_t n = scores.size();
  std::int64_t n_pos = 0;
  for (const int l : labels) n_pos += l == 1;
  const std::int64_t n_neg = static_cast<std::int64_t>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw MetricError("roc_auc: undefined, only one class present");
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Average rank over each tie block, 1-based ranks.
  double pos_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) pos_rank_sum += avg_rank;
    }
    i = j;
  }
  const double np = static_cast<double>(n_pos);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

std::vector<int> argmax_rows(std::span<const double> values, std::int64_t rows,
                             std::int64_t cols) {
  if (rows * cols != static_cast<std::int64_t>(values.size())) {
    throw ConfigError("argmax_rows: size mismatch");
  }
  std::vector<int> out(static_cast<std::size_t>(rows));
  for (std::int64_t i = 0; i < rows; ++i) {
    int best = 0;
    double best_v = values[static_cast<std::size_t>(i * cols)];
    for (std::int64_t j = 1; j < cols; ++j) {
      const double v = values[static_cast<std::size_t>(i * cols + j)];
      if (v > best_v) {  // strict: ties stay at the lowest index
        best_v = v;
        best = static_cast<int>(j);
      }
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

std::vector<double> predict_dataset(const moe::MoeModel& model, const data::Dataset& ds,
                                    std::int64_t eval_batch) {
  if (ds.n < 1) throw ConfigError("predict_dataset: empty dataset");
  const std::int64_t f = model.config().n_features;
  const std::int64_t c = model.config().n_classes;
  std::vector<double> probs(static_cast<std::size_t>(ds.n * c));
  for (std::int64_t start = 0; start < ds.n; start += eval_batch) {
    const std::int64_t b = std::min(eval_batch, ds.n - start);
    std::vector<double> chunk(ds.x.begin() + start * f, ds.x.begin() + (start + b) * f);
    ad::Tape tape(/*grad_enabled=*/false);
    const ad::Tensor x = ad::Tensor::from_data({b, f}, std::move(chunk));
    const ad::Tensor p = model.predict_proba(tape, x);
    std::copy(p.data().begin(), p.data().end(), probs.begin() + start * c);
  }
  return probs;
}

EvalResult evaluate(const moe::MoeModel& model, const data::Dataset& ds) {
  const std::int64_t c = model.config().n_classes;
  const std::vector<double> probs = predict_dataset(model, ds);
  const std::vector<int> pred = argmax_rows(probs, ds.n, c);

  EvalResult r;
  for (std::int64_t i = 0; i < ds.n; ++i) {
    const bool p = pred[static_cast<std::size_t>(i)] == 1;
    const bool t = ds.y[static_cast<std::size_t>(i)] == 1;
    r.tp += p && t;
    r.fp += p && !t;
    r.tn += !p && !t;
    r.fn += !p && t;
  }
  r.accuracy = accuracy(pred, ds.y);
  r.f1 = f1_score(pred, ds.y, 1, &r.f1_degenerate);

  std::vector<double> pos_scores(static_cast<std::size_t>(ds.n));
  for (std::int64_t i = 0; i < ds.n; ++i) {
    pos_scores[static_cast<std::size_t>(i)] = probs[static_cast<std::size_t>(i * c + 1)];
  }
  try {
    r.roc_auc = roc_auc(pos_scores, ds.y);
    r.auc_defined = true;
  } catch (const MetricError&) {
    r.roc_auc = std::numeric_limits<double>::quiet_NaN();
    r.auc_defined = false;
  }
  return r;
}

}  // namespace voicemoe::metrics
