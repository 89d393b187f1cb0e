#pragma once

#include <string>
#include <vector>

#include "moadepth/rng.hpp"
#include "moadepth/tensor.hpp"

namespace moadepth {

enum class BinSpacing { Linear, Log };

BinSpacing bin_spacing_from_string(const std::string& s);
std::string to_string(BinSpacing s);

struct BinSpec {
    std::int64_t count = 128;  // N
    double d_min = 0.1;        // meters
    double d_max = 10.0;
    BinSpacing spacing = BinSpacing::Log;

    // Linear spacing tolerates d_min = 0; log spacing needs d_min > 0.
    void validate() const;
};

// Ascending bin centers: midpoints of uniform edges (linear) or geometric
// means of geometric edges (log).
std::vector<double> bin_centers(const BinSpec& spec);

// Index of the bin whose interval contains the clamped depth; ties at an edge
// go to the lower bin. Throws ContractError on non-finite depth.
std::int64_t depth_to_bin_index(double depth, const BinSpec& spec);

// Dual prediction head over the fused feature map: a shared 1x1 stem, a
// bin-classification arm reconstructing depth as the softmax-weighted sum of
// centers, and a direct regression arm squashed into [d_min, d_max].
struct HeadParams {
    TensorPtr stem_w;  // [d_in, d_head]
    TensorPtr stem_b;  // [d_head]
    TensorPtr cls_w;   // [d_head, N]
    TensorPtr cls_b;   // [N]
    TensorPtr reg_w;   // [d_head, 1]
    TensorPtr reg_b;   // [1]
};

struct DepthHeads {
    HeadParams params;
    BinSpec bins;
    double fusion_weight = 0.5;  // w_f in [0, 1]
    TensorPtr centers;           // [N, 1] constant
};

struct DepthPrediction {
    TensorPtr logits;     // [N, h, w]
    TensorPtr binned;     // [h, w] meters
    TensorPtr regressed;  // [h, w] meters
    TensorPtr fused;      // [h, w] meters
};

DepthHeads init_heads(std::int64_t d_in, std::int64_t d_head, const BinSpec& bins,
                      double fusion_weight, Rng& rng);

// Shared stem over the fused map [d_in, h, w] -> pixels-as-rows activations.
TensorPtr head_stem(const TensorPtr& fused_map, const DepthHeads& heads);

DepthPrediction heads_forward(const TensorPtr& fused_map, const DepthHeads& heads);

// fused = w_f * binned + (1 - w_f) * regressed
TensorPtr fuse_heads(const TensorPtr& binned, const TensorPtr& regressed, double w_f);

// Bilinear upsampling of a depth map to the evaluation resolution.
TensorPtr upsample_prediction(const TensorPtr& depth, std::int64_t out_h, std::int64_t out_w);

std::vector<std::pair<std::string, TensorPtr>> heads_named_params(const DepthHeads& heads);

}  // namespace moadepth
