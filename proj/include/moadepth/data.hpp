#pragma once

#include <string>
#include <vector>

#include "moadepth/heads.hpp"
#include "moadepth/tensor.hpp"

namespace moadepth {

// Procedural RGB-D scenes: a background depth ramp with constant-depth boxes
// in front of it. Channel 1 of the image is exactly 1/(1+depth), so depth is
// recoverable from the image and overfit-style tests are meaningful.
struct SceneSpec {
    std::uint64_t seed = 0;
    std::int64_t image_size = 64;
    double d_far = 8.0;   // background depth at the top row, meters
    double d_near = 2.0;  // background depth at the bottom row
    std::int64_t min_boxes = 1;
    std::int64_t max_boxes = 4;

    void validate() const;
};

struct Sample {
    TensorPtr rgb;    // [3,H,W] in [0,1]
    TensorPtr depth;  // [H,W] meters, in (0, 10]
    TensorPtr mask;   // [H,W] 0/1 validity
};

Sample generate_scene(const SceneSpec& spec);

// MDTN: "MDTN" magic, version byte 1, dtype byte 0 (f64), rank byte,
// rank x u32 little-endian dims, then row-major little-endian f64 payload.
void write_tensor(const std::string& path, const TensorPtr& t);
TensorPtr read_tensor(const std::string& path);
// In-memory codec behind the file API (exposed for format tests).
std::vector<unsigned char> encode_tensor(const TensorPtr& t);
TensorPtr decode_tensor(const std::vector<unsigned char>& bytes);

struct DatasetManifest {
    std::string dir;
    std::vector<std::pair<std::string, std::string>> pairs;  // rgb file, depth file
    std::int64_t train_count = 0;  // first train_count pairs are the train split

    std::int64_t size() const { return static_cast<std::int64_t>(pairs.size()); }
};

// Writes NNNN.rgb.mdtn / NNNN.depth.mdtn pairs plus manifest.txt (one
// "rgb depth" pair per line, LF-terminated). First 90% train, rest eval.
DatasetManifest make_dataset(std::int64_t count, std::uint64_t seed,
                             const std::string& out_dir, const SceneSpec& base = {});
DatasetManifest read_manifest(const std::string& dir);
Sample load_sample(const DatasetManifest& manifest, std::int64_t index);

// Ground truth pooled to the supervision grid: average depth per cell, bin
// index of the pooled value, cell valid iff every contributing pixel is valid.
struct PooledTargets {
    TensorPtr depth;        // [h, w]
    TensorPtr bin_targets;  // [h, w] integral indices
    TensorPtr mask;         // [h, w]
};

PooledTargets pool_gt(const TensorPtr& depth, const TensorPtr& mask, std::int64_t grid_h,
                      std::int64_t grid_w, const BinSpec& bins);

}  // namespace moadepth
