#include "moadepth/data.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "moadepth/error.hpp"
#include "moadepth/losses.hpp"
#include "moadepth/rng.hpp"

namespace fs = std::filesystem;

namespace moadepth {

void SceneSpec::validate() const {
    if (image_size < 2) throw ParameterError("scene: image size must be >= 2");
    if (!(d_far > 0.0 && d_far <= 10.0) || !(d_near > 0.0 && d_near <= 10.0)) {
        throw ParameterError("scene: ramp depths must lie in (0, 10]");
    }
    if (min_boxes < 0 || max_boxes < min_boxes) {
        throw ParameterError("scene: invalid box count range");
    }
}

namespace {

// Hash-based texture: deterministic per (object stream, pixel) regardless of
// raster order.
double texture_noise(std::uint64_t stream, std::int64_t y, std::int64_t x,
                     std::int64_t width) {
    const std::uint64_t h = mix64(stream ^ mix64(static_cast<std::uint64_t>(y * width + x)));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

struct Box {
    std::int64_t x0, y0, w, h;
    double depth;
    double albedo;
    std::uint64_t texture_stream;
};

}  // namespace

Sample generate_scene(const SceneSpec& spec) {
    spec.validate();
    const std::int64_t s = spec.image_size;
    Rng rng(spec.seed);

    const double bg_albedo = rng.uniform(0.3, 1.0);
    const std::uint64_t bg_stream = mix64(spec.seed ^ 0x6261636bull);  // "back"

    std::int64_t n_boxes = spec.min_boxes;
    if (spec.max_boxes > spec.min_boxes) {
        n_boxes += static_cast<std::int64_t>(
            rng.next_u64() % static_cast<std::uint64_t>(spec.max_boxes - spec.min_boxes + 1));
    }
    std::vector<Box> boxes;
    for (std::int64_t b = 0; b < n_boxes; ++b) {
        Box box;
        const std::int64_t max_side = std::max<std::int64_t>(2, s / 3);
        box.w = 2 + static_cast<std::int64_t>(rng.next_u64() %
                                              static_cast<std::uint64_t>(max_side - 1));
        box.h = 2 + static_cast<std::int64_t>(rng.next_u64() %
                                              static_cast<std::uint64_t>(max_side - 1));
        box.x0 = static_cast<std::int64_t>(rng.next_u64() %
                                           static_cast<std::uint64_t>(s - box.w + 1));
        box.y0 = static_cast<std::int64_t>(rng.next_u64() %
                                           static_cast<std::uint64_t>(s - box.h + 1));
        // The ramp is monotone in the row, so the minimum background depth over
        // the box rows sits at one of its extreme rows.
        const double bg_top =
            spec.d_far - (spec.d_far - spec.d_near) * static_cast<double>(box.y0) /
                             static_cast<double>(s - 1);
        const double bg_bot =
            spec.d_far - (spec.d_far - spec.d_near) *
                             static_cast<double>(box.y0 + box.h - 1) /
                             static_cast<double>(s - 1);
        const double bg_min = std::min(bg_top, bg_bot);
        box.depth = std::max(0.05, rng.uniform(0.15, 0.85) * bg_min);
        box.albedo = rng.uniform(0.1, 1.0);
        box.texture_stream = mix64(spec.seed ^ (0x626f78ull + static_cast<std::uint64_t>(b)));
        boxes.push_back(box);
    }

    auto rgb = Tensor::zeros({3, s, s});
    auto depth = Tensor::zeros({s, s});
    for (std::int64_t y = 0; y < s; ++y) {
        const double bg_depth = spec.d_far - (spec.d_far - spec.d_near) *
                                                 static_cast<double>(y) /
                                                 static_cast<double>(s - 1);
        for (std::int64_t x = 0; x < s; ++x) {
            double d = bg_depth;
            double albedo = bg_albedo;
            std::uint64_t stream = bg_stream;
            for (const auto& box : boxes) {
                const bool inside = x >= box.x0 && x < box.x0 + box.w && y >= box.y0 &&
                                    y < box.y0 + box.h;
                if (inside && box.depth < d) {  // nearest box wins
                    d = box.depth;
                    albedo = box.albedo;
                    stream = box.texture_stream;
                }
            }
            depth->at2(y, x) = d;
            rgb->data[(0 * s + y) * s + x] = albedo;
            rgb->data[(1 * s + y) * s + x] = 1.0 / (1.0 + d);
            rgb->data[(2 * s + y) * s + x] = texture_noise(stream, y, x, s);
        }
    }
    return {rgb, depth, make_valid_mask(depth, 10.0)};
}

// ---- MDTN ------------------------------------------------------------------------

namespace {

constexpr unsigned char kMagic[4] = {'M', 'D', 'T', 'N'};
constexpr unsigned char kVersion = 1;
constexpr unsigned char kDtypeF64 = 0;

void put_u32le(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
}

void put_f64le(std::vector<unsigned char>& out, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof(bits));
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xff));
    }
}

}  // namespace

std::vector<unsigned char> encode_tensor(const TensorPtr& t) {
    std::vector<unsigned char> out;
    out.reserve(7 + 4 * t->shape.size() + 8 * t->data.size());
    for (unsigned char m : kMagic) out.push_back(m);
    out.push_back(kVersion);
    out.push_back(kDtypeF64);
    out.push_back(static_cast<unsigned char>(t->shape.size()));
    for (std::int64_t d : t->shape) put_u32le(out, static_cast<std::uint32_t>(d));
    for (double v : t->data) put_f64le(out, v);
    return out;
}

TensorPtr decode_tensor(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < 7) throw FormatError("mdtn: truncated header");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("mdtn: bad magic");
    if (bytes[4] != kVersion) {
        throw FormatError("mdtn: bad version " + std::to_string(bytes[4]));
    }
    if (bytes[5] != kDtypeF64) {
        throw FormatError("mdtn: bad dtype " + std::to_string(bytes[5]));
    }
    const std::size_t rank = bytes[6];
    const std::size_t header_len = 7 + 4 * rank;
    if (bytes.size() < header_len) throw FormatError("mdtn: truncated dims");
    Shape shape(rank);
    std::int64_t n = 1;
    for (std::size_t d = 0; d < rank; ++d) {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(bytes[7 + 4 * d + i]) << (8 * i);
        }
        shape[d] = static_cast<std::int64_t>(v);
        n *= shape[d];
    }
    const std::size_t expected = static_cast<std::size_t>(n) * 8;
    const std::size_t actual = bytes.size() - header_len;
    if (expected != actual) {
        throw FormatError("mdtn: payload length " + std::to_string(actual) +
                          " does not match dims (expected " + std::to_string(expected) + ")");
    }
    std::vector<double> data(n);
    for (std::int64_t i = 0; i < n; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) {
            bits |= static_cast<std::uint64_t>(bytes[header_len + 8 * i + b]) << (8 * b);
        }
        std::memcpy(&data[i], &bits, sizeof(double));
    }
    return Tensor::make(std::move(shape), std::move(data));
}

void write_tensor(const std::string& path, const TensorPtr& t) {
    const auto bytes = encode_tensor(t);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("mdtn: cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("mdtn: short write to '" + path + "'");
}

TensorPtr read_tensor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("mdtn: cannot open '" + path + "' for reading");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    return decode_tensor(bytes);
}

// ---- dataset ----------------------------------------------------------------------

DatasetManifest make_dataset(std::int64_t count, std::uint64_t seed,
                             const std::string& out_dir, const SceneSpec& base) {
    if (count < 1) throw ParameterError("make_dataset: count must be >= 1");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("make_dataset: cannot create '" + out_dir + "': " + ec.message());

    DatasetManifest manifest;
    manifest.dir = out_dir;
    manifest.train_count = (9 * count) / 10;
    char name[64];
    for (std::int64_t i = 0; i < count; ++i) {
        SceneSpec spec = base;
        spec.seed = mix64(mix64(seed) ^ static_cast<std::uint64_t>(i));
        Sample sample = generate_scene(spec);
        std::snprintf(name, sizeof(name), "%04lld.rgb.mdtn", static_cast<long long>(i));
        const std::string rgb_name = name;
        std::snprintf(name, sizeof(name), "%04lld.depth.mdtn", static_cast<long long>(i));
        const std::string depth_name = name;
        write_tensor((fs::path(out_dir) / rgb_name).string(), sample.rgb);
        write_tensor((fs::path(out_dir) / depth_name).string(), sample.depth);
        manifest.pairs.emplace_back(rgb_name, depth_name);
    }

    std::ofstream mf(fs::path(out_dir) / "manifest.txt", std::ios::trunc);
    if (!mf) throw IoError("make_dataset: cannot write manifest in '" + out_dir + "'");
    for (const auto& [rgb, depth] : manifest.pairs) mf << rgb << ' ' << depth << '\n';
    return manifest;
}

DatasetManifest read_manifest(const std::string& dir) {
    const auto path = fs::path(dir) / "manifest.txt";
    std::ifstream in(path);
    if (!in) throw IoError("dataset: missing manifest '" + path.string() + "'");
    DatasetManifest manifest;
    manifest.dir = dir;
    std::string rgb, depth;
    while (in >> rgb >> depth) manifest.pairs.emplace_back(rgb, depth);
    if (manifest.pairs.empty()) {
        throw FormatError("dataset: manifest '" + path.string() + "' lists no samples");
    }
    manifest.train_count = (9 * manifest.size()) / 10;
    return manifest;
}

Sample load_sample(const DatasetManifest& manifest, std::int64_t index) {
    if (index < 0 || index >= manifest.size()) {
        throw ParameterError("dataset: sample index " + std::to_string(index) +
                             " out of range");
    }
    const auto& [rgb_name, depth_name] = manifest.pairs[index];
    Sample s;
    s.rgb = read_tensor((fs::path(manifest.dir) / rgb_name).string());
    s.depth = read_tensor((fs::path(manifest.dir) / depth_name).string());
    s.mask = make_valid_mask(s.depth, 10.0);
    return s;
}

PooledTargets pool_gt(const TensorPtr& depth, const TensorPtr& mask, std::int64_t grid_h,
                      std::int64_t grid_w, const BinSpec& bins) {
    if (depth->rank() != 2) {
        throw DimensionError("pool_gt: expected depth [H,W], got " + shape_str(depth->shape));
    }
    const std::int64_t h = depth->shape[0];
    const std::int64_t w = depth->shape[1];
    if (grid_h < 1 || grid_w < 1 || h % grid_h != 0 || w % grid_w != 0) {
        throw DimensionError("pool_gt: " + shape_str(depth->shape) +
                             " not divisible into grid " + std::to_string(grid_h) + "x" +
                             std::to_string(grid_w));
    }
    if (mask->shape != depth->shape) {
        throw DimensionError("pool_gt: mask shape " + shape_str(mask->shape) +
                             " does not match depth " + shape_str(depth->shape));
    }
    const std::int64_t ky = h / grid_h;
    const std::int64_t kx = w / grid_w;
    PooledTargets out;
    out.depth = Tensor::zeros({grid_h, grid_w});
    out.bin_targets = Tensor::zeros({grid_h, grid_w});
    out.mask = Tensor::zeros({grid_h, grid_w});
    for (std::int64_t gy = 0; gy < grid_h; ++gy) {
        for (std::int64_t gx = 0; gx < grid_w; ++gx) {
            double acc = 0.0;
            bool all_valid = true;
            for (std::int64_t dy = 0; dy < ky; ++dy) {
                for (std::int64_t dx = 0; dx < kx; ++dx) {
                    acc += depth->at2(gy * ky + dy, gx * kx + dx);
                    all_valid = all_valid && mask->at2(gy * ky + dy, gx * kx + dx) != 0.0;
                }
            }
            const double pooled = acc / static_cast<double>(ky * kx);
            out.depth->at2(gy, gx) = pooled;
            out.mask->at2(gy, gx) = all_valid ? 1.0 : 0.0;
            if (all_valid) {
                out.bin_targets->at2(gy, gx) =
                    static_cast<double>(depth_to_bin_index(pooled, bins));
            }
        }
    }
    return out;
}

}  // namespace moadepth
