#pragma once

#include <string>

#include "moadepth/tensor.hpp"

namespace moadepth {

struct LossWeights {
    double lambda_cls = 1.0;
    double lambda_reg = 1.0;
    double lambda_silog = 0.5;
    double silog_lambda = 0.85;  // inner weighting of the squared mean
    double silog_alpha = 10.0;   // overall scale

    void validate() const;  // all non-negative
};

// Masks are 0/1 tensors matching the supervision grid; gradients never flow
// into them. Throws ContractError when no pixel is valid.
std::int64_t mask_count(const TensorPtr& mask);

// Valid = gt in (0, cap].
TensorPtr make_valid_mask(const TensorPtr& gt, double cap);

// Mean over valid pixels of -log softmax(logits)[target]. logits [N,h,w],
// targets [h,w] holding integral bin indices.
TensorPtr ce_loss(const TensorPtr& logits, const TensorPtr& targets, const TensorPtr& mask);

// Mean over valid pixels of |pred - gt|.
TensorPtr l1_loss(const TensorPtr& pred, const TensorPtr& gt, const TensorPtr& mask);

// alpha * (Var(g) + lambda * Mean(g)^2) with population variance over valid
// pixels of g = log(pred) - log(gt).
TensorPtr silog_loss(const TensorPtr& pred, const TensorPtr& gt, const TensorPtr& mask,
                     double lambda = 0.85, double alpha = 10.0);
// Residual-level seam (g given directly); silog_loss wraps this.
TensorPtr silog_from_log_residuals(const TensorPtr& g, const TensorPtr& mask,
                                   double lambda, double alpha);

TensorPtr total_loss(const TensorPtr& cls, const TensorPtr& reg, const TensorPtr& silog,
                     const LossWeights& weights);

struct MetricReport {
    double absrel = 0.0;
    double rmse = 0.0;    // meters
    double log10 = 0.0;
    double delta1 = 0.0;  // fraction within a 1.25 ratio
    double delta2 = 0.0;  // 1.25^2
    double delta3 = 0.0;  // 1.25^3
    std::int64_t n_pixels = 0;
};

// Streams per-pixel statistics across maps so split-level evaluation and the
// per-map entry point share one arithmetic path.
struct MetricAccumulator {
    double d_min = 0.1;
    double cap = 10.0;

    void add(const TensorPtr& pred, const TensorPtr& gt, const TensorPtr& mask);
    MetricReport report() const;  // ContractError if nothing was accumulated

private:
    double absrel_ = 0.0, se_ = 0.0, log10_ = 0.0;
    std::int64_t d1_ = 0, d2_ = 0, d3_ = 0, n_ = 0;
};

// Predictions are clamped to [d_min, cap] before scoring; all statistics run
// over valid pixels only.
MetricReport evaluate_metrics(const TensorPtr& pred, const TensorPtr& gt,
                              const TensorPtr& mask, double d_min, double cap = 10.0);

// "epoch,split,absrel,rmse,log10,delta1,delta2,delta3,n_pixels"
std::string metric_csv_header();
std::string metric_csv_row(std::int64_t epoch, const std::string& split,
                           const MetricReport& report);

}  // namespace moadepth
