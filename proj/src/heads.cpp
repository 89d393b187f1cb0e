#include "moadepth/heads.hpp"

#include <algorithm>
#include <cmath>

#include "moadepth/error.hpp"

namespace moadepth {

BinSpacing bin_spacing_from_string(const std::string& s) {
    if (s == "linear") return BinSpacing::Linear;
    if (s == "log") return BinSpacing::Log;
    throw ConfigError("bins: unknown spacing '" + s + "' (expected 'linear' or 'log')");
}

std::string to_string(BinSpacing s) {
    return s == BinSpacing::Linear ? "linear" : "log";
}

void BinSpec::validate() const {
    if (count < 2) throw ParameterError("bins: count must be >= 2");
    if (!(d_min < d_max)) throw ParameterError("bins: need d_min < d_max");
    if (spacing == BinSpacing::Log) {
        if (!(d_min > 0.0)) throw ParameterError("bins: log spacing needs d_min > 0");
    } else {
        if (!(d_min >= 0.0)) throw ParameterError("bins: need d_min >= 0");
    }
}

namespace {

std::vector<double> bin_edges(const BinSpec& spec) {
    std::vector<double> edges(spec.count + 1);
    const double n = static_cast<double>(spec.count);
    if (spec.spacing == BinSpacing::Linear) {
        for (std::int64_t k = 0; k <= spec.count; ++k) {
            edges[k] = spec.d_min + (spec.d_max - spec.d_min) * static_cast<double>(k) / n;
        }
    } else {
        const double ratio = spec.d_max / spec.d_min;
        for (std::int64_t k = 0; k <= spec.count; ++k) {
            edges[k] = spec.d_min * std::pow(ratio, static_cast<double>(k) / n);
        }
    }
    edges.front() = spec.d_min;
    edges.back() = spec.d_max;
    return edges;
}

}  // namespace

std::vector<double> bin_centers(const BinSpec& spec) {
    spec.validate();
    const auto edges = bin_edges(spec);
    std::vector<double> centers(spec.count);
    for (std::int64_t k = 0; k < spec.count; ++k) {
        if (spec.spacing == BinSpacing::Linear) {
            centers[k] = 0.5 * (edges[k] + edges[k + 1]);
        } else {
            centers[k] = std::sqrt(edges[k] * edges[k + 1]);
        }
    }
    return centers;
}

std::int64_t depth_to_bin_index(double depth, const BinSpec& spec) {
    spec.validate();
    if (!std::isfinite(depth)) {
        throw ContractError("depth_to_bin_index: non-finite depth");
    }
    const double d = std::clamp(depth, spec.d_min, spec.d_max);
    const auto edges = bin_edges(spec);
    // Count interior edges strictly below d; an exact edge hit lands in the
    // lower bin.
    const auto first = edges.begin() + 1;
    const auto last = edges.end() - 1;
    return std::lower_bound(first, last, d) - first;
}

DepthHeads init_heads(std::int64_t d_in, std::int64_t d_head, const BinSpec& bins,
                      double fusion_weight, Rng& rng) {
    bins.validate();
    if (d_in < 1 || d_head < 1) throw ParameterError("heads: widths must be >= 1");
    if (!(fusion_weight >= 0.0 && fusion_weight <= 1.0)) {
        throw ParameterError("heads: fusion weight must lie in [0,1], got " +
                             std::to_string(fusion_weight));
    }
    DepthHeads h;
    h.bins = bins;
    h.fusion_weight = fusion_weight;
    h.params.stem_w = Tensor::zeros({d_in, d_head}, true);
    for (auto& v : h.params.stem_w->data) v = rng.normal(0.0, 0.02);
    h.params.stem_b = Tensor::zeros({d_head}, true);
    h.params.cls_w = Tensor::zeros({d_head, bins.count}, true);
    for (auto& v : h.params.cls_w->data) v = rng.normal(0.0, 0.02);
    h.params.cls_b = Tensor::zeros({bins.count}, true);
    h.params.reg_w = Tensor::zeros({d_head, 1}, true);
    for (auto& v : h.params.reg_w->data) v = rng.normal(0.0, 0.02);
    h.params.reg_b = Tensor::zeros({1}, true);

    const auto centers = bin_centers(bins);
    h.centers = Tensor::make({bins.count, 1}, centers);
    return h;
}

TensorPtr head_stem(const TensorPtr& fused_map, const DepthHeads& heads) {
    if (fused_map->rank() != 3) {
        throw DimensionError("heads: expected fused map [C,h,w], got " +
                             shape_str(fused_map->shape));
    }
    const std::int64_t c = fused_map->shape[0];
    const std::int64_t hw = fused_map->shape[1] * fused_map->shape[2];
    if (c != heads.params.stem_w->shape[0]) {
        throw DimensionError("heads: fused map channels " + std::to_string(c) +
                             " do not match stem input width " +
                             std::to_string(heads.params.stem_w->shape[0]));
    }
    TensorPtr pixels = transpose2d(reshape(fused_map, {c, hw}));  // [hw, C]
    return gelu(add(matmul(pixels, heads.params.stem_w), heads.params.stem_b));
}

DepthPrediction heads_forward(const TensorPtr& fused_map, const DepthHeads& heads) {
    const std::int64_t h = fused_map->shape[1];
    const std::int64_t w = fused_map->shape[2];
    TensorPtr stem = head_stem(fused_map, heads);  // [hw, d_head]

    DepthPrediction pred;
    TensorPtr logits_px = add(matmul(stem, heads.params.cls_w), heads.params.cls_b);
    pred.logits = reshape(transpose2d(logits_px), {heads.bins.count, h, w});
    TensorPtr probs = softmax(logits_px);  // plain softmax, temperature 1
    pred.binned = reshape(matmul(probs, heads.centers), {h, w});

    TensorPtr raw = add(matmul(stem, heads.params.reg_w), heads.params.reg_b);  // [hw,1]
    const double span = heads.bins.d_max - heads.bins.d_min;
    pred.regressed =
        reshape(add_scalar(scale(sigmoid(raw), span), heads.bins.d_min), {h, w});

    pred.fused = fuse_heads(pred.binned, pred.regressed, heads.fusion_weight);
    return pred;
}

TensorPtr fuse_heads(const TensorPtr& binned, const TensorPtr& regressed, double w_f) {
    if (!(w_f >= 0.0 && w_f <= 1.0)) {
        throw ParameterError("fuse_heads: weight must lie in [0,1], got " +
                             std::to_string(w_f));
    }
    return add(scale(binned, w_f), scale(regressed, 1.0 - w_f));
}

TensorPtr upsample_prediction(const TensorPtr& depth, std::int64_t out_h,
                              std::int64_t out_w) {
    return upsample_bilinear2d(depth, out_h, out_w);
}

std::vector<std::pair<std::string, TensorPtr>> heads_named_params(const DepthHeads& heads) {
    return {{"stem.w", heads.params.stem_w}, {"stem.b", heads.params.stem_b},
            {"cls.w", heads.params.cls_w},   {"cls.b", heads.params.cls_b},
            {"reg.w", heads.params.reg_w},   {"reg.b", heads.params.reg_b}};
}

}  // namespace moadepth
