#include "moadepth/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "moadepth/context.hpp"
#include "moadepth/error.hpp"

namespace moadepth {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream stream(s);
    while (std::getline(stream, item, sep)) out.push_back(trim(item));
    return out;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

FlatConfig FlatConfig::parse_text(const std::string& text) {
    FlatConfig cfg;
    std::istringstream stream(text);
    std::string line;
    std::int64_t lineno = 0;
    while (std::getline(stream, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected 'key = value', got '" + line + "'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        }
        cfg.values[key] = value;
    }
    return cfg;
}

FlatConfig FlatConfig::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open '" + path + "'");
    std::ostringstream text;
    text << in.rdbuf();
    return parse_text(text.str());
}

std::string FlatConfig::get_string(const std::string& key, const std::string& fallback) const {
    const auto it = values.find(key);
    return it == values.end() ? fallback : it->second;
}

double FlatConfig::get_double(const std::string& key, double fallback) const {
    const auto it = values.find(key);
    if (it == values.end()) return fallback;
    try {
        std::size_t pos = 0;
        const double v = std::stod(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects a number, got '" + it->second +
                          "'");
    }
}

std::int64_t FlatConfig::get_int(const std::string& key, std::int64_t fallback) const {
    const auto it = values.find(key);
    if (it == values.end()) return fallback;
    try {
        std::size_t pos = 0;
        const long long v = std::stoll(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects an integer, got '" +
                          it->second + "'");
    }
}

bool FlatConfig::get_bool(const std::string& key, bool fallback) const {
    const auto it = values.find(key);
    if (it == values.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("config: key '" + key + "' expects true/false, got '" + it->second +
                      "'");
}

std::vector<std::int64_t> FlatConfig::get_int_list(
    const std::string& key, const std::vector<std::int64_t>& fallback) const {
    const auto it = values.find(key);
    if (it == values.end()) return fallback;
    std::vector<std::int64_t> out;
    for (const auto& item : split(it->second, ',')) {
        if (item.empty()) continue;
        try {
            out.push_back(std::stoll(item));
        } catch (const std::exception&) {
            throw ConfigError("config: key '" + key + "' expects integers, got '" + item +
                              "'");
        }
    }
    return out;
}

std::vector<std::string> FlatConfig::get_string_list(
    const std::string& key, const std::vector<std::string>& fallback) const {
    const auto it = values.find(key);
    if (it == values.end()) return fallback;
    std::vector<std::string> out;
    for (auto& item : split(it->second, ';')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string FlatConfig::serialize() const {
    std::ostringstream out;
    for (const auto& [k, v] : values) out << k << " = " << v << '\n';
    return out.str();
}

const std::vector<std::string>& known_config_keys() {
    static const std::vector<std::string> keys = {
        "backbone.preset", "backbone.image_size", "backbone.patch_size", "backbone.depth",
        "backbone.d_model", "backbone.n_heads", "backbone.mlp_ratio", "backbone.moa_layers",
        "backbone.trainable_final_blocks",
        "moa.experts", "moa.bottleneck", "moa.gate_hidden", "moa.temperature",
        "bins.count", "bins.min", "bins.max", "bins.spacing",
        "heads.fusion_weight", "heads.d_head",
        "context.prompts", "context.dim", "context.renormalize",
        "loss.lambda_cls", "loss.lambda_reg", "loss.lambda_silog", "loss.silog_lambda",
        "loss.silog_alpha", "loss.supervise_fused",
        "train.epochs", "train.max_steps", "train.batch_size", "train.learning_rate",
        "train.weight_decay", "train.beta1", "train.beta2", "train.eps", "train.seed",
        "train.shuffle",
        "data.dir", "out.dir"};
    return keys;
}

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (max_steps < 0) throw ConfigError("train: max_steps must be >= 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
    if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
    backbone.validate();
    moa.validate();
    bins.validate();
    loss.validate();
    if (moa.d_model != backbone.d_model) {
        throw ConfigError("config: moa token width must equal backbone d_model");
    }
    if (!(fusion_weight >= 0.0 && fusion_weight <= 1.0)) {
        throw ConfigError("heads: fusion_weight must lie in [0,1]");
    }
    if (d_head < 1) throw ConfigError("heads: d_head must be >= 1");
    if (context_dim < 1) throw ConfigError("context: dim must be >= 1");
    if (prompts.empty()) throw ConfigError("context: prompt list must be non-empty");
}

TrainConfig TrainConfig::preset(const std::string& name) {
    TrainConfig c;
    c.backbone = ViTConfig::named_preset(name);
    c.prompts = PromptSet::default_set(c.backbone.d_model).prompts;
    if (name == "toy") {
        c.moa = MoAConfig{4, 16, 2.0, 32, c.backbone.d_model};
        c.learning_rate = 3e-3;
        c.epochs = 500;
        c.batch_size = 8;
    } else {
        // Paper-scale values; used for parameter accounting, not desk training.
        c.moa = MoAConfig{4, 64, 2.0, 128, c.backbone.d_model};
        c.learning_rate = 1e-5;
        c.epochs = 30;
        c.batch_size = 8;
    }
    c.weight_decay = 1e-4;
    c.context_dim = c.backbone.d_model;
    c.d_head = c.backbone.d_model;
    return c;
}

TrainConfig TrainConfig::from_flat(const FlatConfig& flat) {
    for (const auto& [key, value] : flat.values) {
        (void)value;
        const auto& known = known_config_keys();
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw ConfigError("config: unknown key '" + key + "'");
        }
    }
    TrainConfig c = preset(flat.get_string("backbone.preset", "toy"));

    c.backbone.image_size = flat.get_int("backbone.image_size", c.backbone.image_size);
    c.backbone.patch_size = flat.get_int("backbone.patch_size", c.backbone.patch_size);
    c.backbone.depth = flat.get_int("backbone.depth", c.backbone.depth);
    c.backbone.d_model = flat.get_int("backbone.d_model", c.backbone.d_model);
    c.backbone.n_heads = flat.get_int("backbone.n_heads", c.backbone.n_heads);
    c.backbone.mlp_ratio = flat.get_int("backbone.mlp_ratio", c.backbone.mlp_ratio);
    c.backbone.moa_layers = flat.get_int_list("backbone.moa_layers", c.backbone.moa_layers);
    c.backbone.trainable_final_blocks =
        flat.get_int("backbone.trainable_final_blocks", c.backbone.trainable_final_blocks);

    c.moa.experts = flat.get_int("moa.experts", c.moa.experts);
    c.moa.bottleneck = flat.get_int("moa.bottleneck", c.moa.bottleneck);
    c.moa.gate_hidden = flat.get_int("moa.gate_hidden", c.moa.gate_hidden);
    c.moa.temperature = flat.get_double("moa.temperature", c.moa.temperature);
    c.moa.d_model = c.backbone.d_model;

    c.bins.count = flat.get_int("bins.count", c.bins.count);
    c.bins.d_min = flat.get_double("bins.min", c.bins.d_min);
    c.bins.d_max = flat.get_double("bins.max", c.bins.d_max);
    c.bins.spacing =
        bin_spacing_from_string(flat.get_string("bins.spacing", to_string(c.bins.spacing)));

    c.fusion_weight = flat.get_double("heads.fusion_weight", c.fusion_weight);
    c.d_head = flat.get_int("heads.d_head", c.d_head);

    c.prompts = flat.get_string_list("context.prompts", c.prompts);
    c.context_dim = flat.get_int("context.dim", c.context_dim);
    c.context_renormalize = flat.get_bool("context.renormalize", c.context_renormalize);

    c.loss.lambda_cls = flat.get_double("loss.lambda_cls", c.loss.lambda_cls);
    c.loss.lambda_reg = flat.get_double("loss.lambda_reg", c.loss.lambda_reg);
    c.loss.lambda_silog = flat.get_double("loss.lambda_silog", c.loss.lambda_silog);
    c.loss.silog_lambda = flat.get_double("loss.silog_lambda", c.loss.silog_lambda);
    c.loss.silog_alpha = flat.get_double("loss.silog_alpha", c.loss.silog_alpha);
    c.supervise_fused = flat.get_bool("loss.supervise_fused", c.supervise_fused);

    c.epochs = flat.get_int("train.epochs", c.epochs);
    c.max_steps = flat.get_int("train.max_steps", c.max_steps);
    c.batch_size = flat.get_int("train.batch_size", c.batch_size);
    c.learning_rate = flat.get_double("train.learning_rate", c.learning_rate);
    c.weight_decay = flat.get_double("train.weight_decay", c.weight_decay);
    c.beta1 = flat.get_double("train.beta1", c.beta1);
    c.beta2 = flat.get_double("train.beta2", c.beta2);
    c.adam_eps = flat.get_double("train.eps", c.adam_eps);
    c.seed = static_cast<std::uint64_t>(flat.get_int("train.seed",
                                                     static_cast<std::int64_t>(c.seed)));
    c.shuffle = flat.get_bool("train.shuffle", c.shuffle);

    c.data_dir = flat.get_string("data.dir", c.data_dir);
    c.out_dir = flat.get_string("out.dir", c.out_dir);
    c.validate();
    return c;
}

FlatConfig TrainConfig::to_flat() const {
    FlatConfig f;
    f.set("backbone.preset", backbone.preset);
    f.set("backbone.image_size", std::to_string(backbone.image_size));
    f.set("backbone.patch_size", std::to_string(backbone.patch_size));
    f.set("backbone.depth", std::to_string(backbone.depth));
    f.set("backbone.d_model", std::to_string(backbone.d_model));
    f.set("backbone.n_heads", std::to_string(backbone.n_heads));
    f.set("backbone.mlp_ratio", std::to_string(backbone.mlp_ratio));
    {
        std::string layers;
        for (std::size_t i = 0; i < backbone.moa_layers.size(); ++i) {
            if (i) layers += ',';
            layers += std::to_string(backbone.moa_layers[i]);
        }
        f.set("backbone.moa_layers", layers);
    }
    f.set("backbone.trainable_final_blocks", std::to_string(backbone.trainable_final_blocks));
    f.set("moa.experts", std::to_string(moa.experts));
    f.set("moa.bottleneck", std::to_string(moa.bottleneck));
    f.set("moa.gate_hidden", std::to_string(moa.gate_hidden));
    f.set("moa.temperature", fmt_double(moa.temperature));
    f.set("bins.count", std::to_string(bins.count));
    f.set("bins.min", fmt_double(bins.d_min));
    f.set("bins.max", fmt_double(bins.d_max));
    f.set("bins.spacing", to_string(bins.spacing));
    f.set("heads.fusion_weight", fmt_double(fusion_weight));
    f.set("heads.d_head", std::to_string(d_head));
    {
        std::string joined;
        for (std::size_t i = 0; i < prompts.size(); ++i) {
            if (i) joined += "; ";
            joined += prompts[i];
        }
        f.set("context.prompts", joined);
    }
    f.set("context.dim", std::to_string(context_dim));
    f.set("context.renormalize", context_renormalize ? "true" : "false");
    f.set("loss.lambda_cls", fmt_double(loss.lambda_cls));
    f.set("loss.lambda_reg", fmt_double(loss.lambda_reg));
    f.set("loss.lambda_silog", fmt_double(loss.lambda_silog));
    f.set("loss.silog_lambda", fmt_double(loss.silog_lambda));
    f.set("loss.silog_alpha", fmt_double(loss.silog_alpha));
    f.set("loss.supervise_fused", supervise_fused ? "true" : "false");
    f.set("train.epochs", std::to_string(epochs));
    f.set("train.max_steps", std::to_string(max_steps));
    f.set("train.batch_size", std::to_string(batch_size));
    f.set("train.learning_rate", fmt_double(learning_rate));
    f.set("train.weight_decay", fmt_double(weight_decay));
    f.set("train.beta1", fmt_double(beta1));
    f.set("train.beta2", fmt_double(beta2));
    f.set("train.eps", fmt_double(adam_eps));
    f.set("train.seed", std::to_string(seed));
    f.set("train.shuffle", shuffle ? "true" : "false");
    if (!data_dir.empty()) f.set("data.dir", data_dir);
    if (!out_dir.empty()) f.set("out.dir", out_dir);
    return f;
}

}  // namespace moadepth
