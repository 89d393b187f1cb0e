#include "moadepth/losses.hpp"

#include <cmath>
#include <cstdio>

#include "moadepth/error.hpp"

namespace moadepth {

void LossWeights::validate() const {
    if (lambda_cls < 0 || lambda_reg < 0 || lambda_silog < 0 || silog_lambda < 0 ||
        silog_alpha < 0) {
        throw ParameterError("loss weights must be non-negative");
    }
}

std::int64_t mask_count(const TensorPtr& mask) {
    std::int64_t n = 0;
    for (double v : mask->data) {
        if (v != 0.0) ++n;
    }
    return n;
}

TensorPtr make_valid_mask(const TensorPtr& gt, double cap) {
    auto mask = Tensor::zeros(gt->shape);
    for (std::int64_t i = 0; i < gt->numel(); ++i) {
        mask->data[i] = (gt->data[i] > 0.0 && gt->data[i] <= cap) ? 1.0 : 0.0;
    }
    return mask;
}

namespace {

void check_same_grid(const char* op, const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a->shape) +
                             " vs " + shape_str(b->shape));
    }
}

std::int64_t valid_count_or_throw(const char* op, const TensorPtr& mask) {
    const std::int64_t n = mask_count(mask);
    if (n == 0) throw ContractError(std::string(op) + ": empty valid mask");
    return n;
}

}  // namespace

TensorPtr ce_loss(const TensorPtr& logits, const TensorPtr& targets, const TensorPtr& mask) {
    if (logits->rank() != 3) {
        throw DimensionError("ce_loss: expected logits [N,h,w], got " +
                             shape_str(logits->shape));
    }
    const std::int64_t n_bins = logits->shape[0];
    const std::int64_t hw = logits->shape[1] * logits->shape[2];
    if (targets->numel() != hw || mask->numel() != hw) {
        throw DimensionError("ce_loss: target/mask grid does not match logits " +
                             shape_str(logits->shape));
    }
    const std::int64_t n_valid = valid_count_or_throw("ce_loss", mask);

    // One-hot selector with invalid rows zeroed, so masked pixels drop out of
    // the sum before any 0 * log interaction can occur.
    auto onehot = Tensor::zeros({hw, n_bins});
    for (std::int64_t i = 0; i < hw; ++i) {
        if (mask->data[i] == 0.0) continue;
        const double t = targets->data[i];
        const auto idx = static_cast<std::int64_t>(t);
        if (t != static_cast<double>(idx) || idx < 0 || idx >= n_bins) {
            throw ContractError("ce_loss: target " + std::to_string(t) +
                                " at pixel " + std::to_string(i) + " outside [0," +
                                std::to_string(n_bins - 1) + "]");
        }
        onehot->at2(i, idx) = 1.0;
    }

    TensorPtr rows = transpose2d(reshape(logits, {n_bins, hw}));  // [hw, N]
    TensorPtr picked = sum(mul(log_softmax(rows), onehot), 1);    // [hw]
    return scale(sum(picked), -1.0 / static_cast<double>(n_valid));
}

TensorPtr l1_loss(const TensorPtr& pred, const TensorPtr& gt, const TensorPtr& mask) {
    check_same_grid("l1_loss", pred, gt);
    check_same_grid("l1_loss", pred, mask);
    const std::int64_t n_valid = valid_count_or_throw("l1_loss", mask);
    TensorPtr masked = mul(abs(sub(pred, gt)), mask);
    return scale(sum(masked), 1.0 / static_cast<double>(n_valid));
}

TensorPtr silog_from_log_residuals(const TensorPtr& g, const TensorPtr& mask,
                                   double lambda, double alpha) {
    check_same_grid("silog_loss", g, mask);
    const std::int64_t n_valid = valid_count_or_throw("silog_loss", mask);
    const double inv_n = 1.0 / static_cast<double>(n_valid);
    TensorPtr mu = scale(sum(mul(g, mask)), inv_n);
    TensorPtr dev = sub(g, mu);
    TensorPtr var = scale(sum(mul(square(dev), mask)), inv_n);
    return scale(add(var, scale(square(mu), lambda)), alpha);
}

TensorPtr silog_loss(const TensorPtr& pred, const TensorPtr& gt, const TensorPtr& mask,
                     double lambda, double alpha) {
    check_same_grid("silog_loss", pred, gt);
    check_same_grid("silog_loss", pred, mask);
    // Sanitize ground truth outside the mask so log() stays finite there; the
    // mask removes those pixels from every statistic.
    auto gt_safe = Tensor::zeros(gt->shape);
    for (std::int64_t i = 0; i < gt->numel(); ++i) {
        const bool valid = mask->data[i] != 0.0;
        if (valid && (!(pred->data[i] > 0.0) || !(gt->data[i] > 0.0))) {
            throw ContractError("silog_loss: non-positive depth under the mask at pixel " +
                                std::to_string(i));
        }
        gt_safe->data[i] = valid ? gt->data[i] : 1.0;
    }
    TensorPtr g = sub(log(pred), log(gt_safe));
    return silog_from_log_residuals(g, mask, lambda, alpha);
}

TensorPtr total_loss(const TensorPtr& cls, const TensorPtr& reg, const TensorPtr& silog,
                     const LossWeights& weights) {
    weights.validate();
    return add(add(scale(cls, weights.lambda_cls), scale(reg, weights.lambda_reg)),
               scale(silog, weights.lambda_silog));
}

void MetricAccumulator::add(const TensorPtr& pred, const TensorPtr& gt,
                            const TensorPtr& mask) {
    check_same_grid("evaluate_metrics", pred, gt);
    check_same_grid("evaluate_metrics", pred, mask);
    for (std::int64_t i = 0; i < pred->numel(); ++i) {
        if (mask->data[i] == 0.0) continue;
        const double p = std::clamp(pred->data[i], d_min, cap);
        const double g = gt->data[i];
        ++n_;
        absrel_ += std::fabs(p - g) / g;
        se_ += (p - g) * (p - g);
        log10_ += std::fabs(std::log10(p) - std::log10(g));
        const double ratio = std::max(p / g, g / p);
        if (ratio < 1.25) ++d1_;
        if (ratio < 1.25 * 1.25) ++d2_;
        if (ratio < 1.25 * 1.25 * 1.25) ++d3_;
    }
}

MetricReport MetricAccumulator::report() const {
    if (n_ == 0) throw ContractError("evaluate_metrics: empty valid mask");
    MetricReport r;
    r.n_pixels = n_;
    const double inv = 1.0 / static_cast<double>(n_);
    r.absrel = absrel_ * inv;
    r.rmse = std::sqrt(se_ * inv);
    r.log10 = log10_ * inv;
    r.delta1 = static_cast<double>(d1_) * inv;
    r.delta2 = static_cast<double>(d2_) * inv;
    r.delta3 = static_cast<double>(d3_) * inv;
    return r;
}

MetricReport evaluate_metrics(const TensorPtr& pred, const TensorPtr& gt,
                              const TensorPtr& mask, double d_min, double cap) {
    MetricAccumulator acc;
    acc.d_min = d_min;
    acc.cap = cap;
    acc.add(pred, gt, mask);
    return acc.report();
}

std::string metric_csv_header() {
    return "epoch,split,absrel,rmse,log10,delta1,delta2,delta3,n_pixels";
}

std::string metric_csv_row(std::int64_t epoch, const std::string& split,
                           const MetricReport& report) {
    char buf[320];
    std::snprintf(buf, sizeof(buf), "%lld,%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%lld",
                  static_cast<long long>(epoch), split.c_str(), report.absrel, report.rmse,
                  report.log10, report.delta1, report.delta2, report.delta3,
                  static_cast<long long>(report.n_pixels));
    return buf;
}

}  // namespace moadepth
