#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "voicemoe/moe_model.hpp"
#include "voicemoe/synth_data.hpp"

namespace voicemoe::metrics {

struct EvalResult {
  double accuracy = 0.0;
  double f1 = 0.0;
  double roc_auc = 0.0;      // NaN when auc_defined is false
  bool auc_defined = false;
  bool f1_degenerate = false;  // no predicted or no actual positives
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
};

// Fraction of equal entries. Empty inputs or length mismatch -> ConfigError.
double accuracy(std::span<const int> pred, std::span<const int> truth);

// 2PR/(P+R); returns 0 (and sets *degenerate) when precision or recall is
// undefined or P+R == 0.
double f1_score(std::span<const int> pred, std::span<const int> truth,
                int positive_class = 1, bool* degenerate = nullptr);

// Mann-Whitney rank statistic with average ranks for ties (equal to
// trapezoidal ROC integration). Throws MetricError when only one class is
// present, NumericError on non-finite scores.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

// Row-wise argmax with ties resolved to the lowest index.
std::vector<int> argmax_rows(std::span<const double> values, std::int64_t rows,
                             std::int64_t cols);

// Class probabilities for a whole dataset, evaluated in fixed-size batches
// with gradients disabled. Returns n x n_classes row-major.
std::vector<double> predict_dataset(const moe::MoeModel& model, const data::Dataset& ds,
                                    std::int64_t eval_batch = 256);

// Argmax accuracy/F1 plus AUC on the class-1 probability. A single-class
// label set leaves roc_auc NaN with auc_defined = false instead of throwing.
EvalResult evaluate(const moe::MoeModel& model, const data::Dataset& ds);

}  // namespace voicemoe::metrics
