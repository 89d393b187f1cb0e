#include "moadepth/moa.hpp"

#include <cmath>

#include "moadepth/error.hpp"

namespace moadepth {

void MoAConfig::validate() const {
    if (experts < 1) throw ParameterError("moa: expert count must be >= 1");
    if (bottleneck < 1) throw ParameterError("moa: bottleneck width must be >= 1");
    if (!(temperature > 0.0)) throw ParameterError("moa: gate temperature must be > 0");
    if (gate_hidden < 1) throw ParameterError("moa: gate hidden width must be >= 1");
    if (d_model < 1) throw ParameterError("moa: token width must be >= 1");
}

MoAModule init_moa_module(const MoAConfig& config, Rng& rng) {
    config.validate();
    MoAModule m;
    m.config = config;
    for (std::int64_t k = 0; k < config.experts; ++k) {
        ExpertParams e;
        e.w1 = Tensor::zeros({config.d_model, config.bottleneck}, true);
        for (auto& v : e.w1->data) v = rng.normal(0.0, 0.02);
        e.w2 = Tensor::zeros({config.bottleneck, config.d_model}, true);
        m.experts.push_back(std::move(e));
    }
    m.gate.w1 = Tensor::zeros({config.d_model, config.gate_hidden}, true);
    for (auto& v : m.gate.w1->data) v = rng.normal(0.0, 0.02);
    m.gate.b1 = Tensor::zeros({config.gate_hidden}, true);
    m.gate.w2 = Tensor::zeros({config.gate_hidden, config.experts}, true);
    m.gate.b2 = Tensor::zeros({config.experts}, true);
    return m;
}

TensorPtr expert_forward(const TensorPtr& x, const ExpertParams& expert) {
    const bool vec = x->rank() == 1;
    TensorPtr rows = vec ? reshape(x, {1, x->numel()}) : x;
    TensorPtr out = matmul(gelu(matmul(rows, expert.w1)), expert.w2);
    return vec ? reshape(out, x->shape) : out;
}

TensorPtr gate_forward(const TensorPtr& x, const GateParams& gate, double temperature) {
    if (!(temperature > 0.0)) {
        throw ParameterError("gate_forward: temperature must be > 0");
    }
    const bool vec = x->rank() == 1;
    TensorPtr rows = vec ? reshape(x, {1, x->numel()}) : x;
    TensorPtr hidden = relu(add(matmul(rows, gate.w1), gate.b1));
    TensorPtr logits = add(matmul(hidden, gate.w2), gate.b2);
    TensorPtr probs = softmax(logits, temperature);
    return vec ? reshape(probs, {probs->numel()}) : probs;
}

MoAOutput moa_forward(const TensorPtr& tokens, const MoAModule& module) {
    const auto& cfg = module.config;
    if (tokens->rank() != 2 || tokens->shape[1] != cfg.d_model) {
        throw DimensionError("moa_forward: expected tokens [T," +
                             std::to_string(cfg.d_model) + "], got " +
                             shape_str(tokens->shape));
    }
    TensorPtr gates = gate_forward(tokens, module.gate, cfg.temperature);

    TensorPtr mixture;
    for (std::int64_t k = 0; k < cfg.experts; ++k) {
        TensorPtr out_k = expert_forward(tokens, module.experts[k]);
        auto selector = Tensor::zeros({cfg.experts, 1});
        selector->data[k] = 1.0;
        TensorPtr weight_k = matmul(gates, selector);  // [T, 1]
        TensorPtr term = mul(out_k, weight_k);
        mixture = mixture ? add(mixture, term) : term;
    }
    return {add(tokens, mixture), gates};
}

MoAStats gate_entropy(const TensorPtr& gates) {
    if (gates->rank() != 2) {
        throw DimensionError("gate_entropy: expected [T,K], got " + shape_str(gates->shape));
    }
    const std::int64_t t = gates->shape[0];
    const std::int64_t k = gates->shape[1];
    MoAStats stats;
    stats.usage.assign(k, 0.0);
    double total_entropy = 0.0;
    for (std::int64_t i = 0; i < t; ++i) {
        double row_sum = 0.0;
        double h = 0.0;
        for (std::int64_t j = 0; j < k; ++j) {
            const double g = gates->at2(i, j);
            row_sum += g;
            if (g > 0.0) h -= g * std::log(g);
            stats.usage[j] += g;
        }
        if (std::fabs(row_sum - 1.0) > 1e-6) {
            throw ContractError("gate_entropy: row " + std::to_string(i) +
                                " sums to " + std::to_string(row_sum) + ", expected 1");
        }
        total_entropy += h;
    }
    stats.mean_entropy = total_entropy / static_cast<double>(t);
    for (auto& u : stats.usage) u /= static_cast<double>(t);
    return stats;
}

std::vector<std::pair<std::string, TensorPtr>> moa_named_params(const MoAModule& module) {
    std::vector<std::pair<std::string, TensorPtr>> out;
    for (std::size_t k = 0; k < module.experts.size(); ++k) {
        out.emplace_back("expert" + std::to_string(k) + ".w1", module.experts[k].w1);
        out.emplace_back("expert" + std::to_string(k) + ".w2", module.experts[k].w2);
    }
    out.emplace_back("gate.w1", module.gate.w1);
    out.emplace_back("gate.b1", module.gate.b1);
    out.emplace_back("gate.w2", module.gate.w2);
    out.emplace_back("gate.b2", module.gate.b2);
    return out;
}

}  // namespace moadepth
