#pragma once

#include <vector>

#include "moadepth/rng.hpp"
#include "moadepth/tensor.hpp"

namespace moadepth {

// Mixture-of-Adapters: K bottleneck experts mixed per token by a deterministic
// temperature-softmax gate and injected residually. The same gate probabilities
// are used at train and inference time; there is no stochastic routing.

struct MoAConfig {
    std::int64_t experts = 4;       // K
    std::int64_t bottleneck = 16;   // d_b
    double temperature = 2.0;       // tau
    std::int64_t gate_hidden = 32;
    std::int64_t d_model = 64;      // token width, from the backbone

    void validate() const;
};

// Expert(x) = W2 * gelu(W1 * x); deliberately bias-free.
struct ExpertParams {
    TensorPtr w1;  // [d, d_b]
    TensorPtr w2;  // [d_b, d], zero at init so the adapter starts as identity
};

// Two-layer ReLU MLP d -> gate_hidden -> K.
struct GateParams {
    TensorPtr w1;  // [d, gate_hidden]
    TensorPtr b1;  // [gate_hidden]
    TensorPtr w2;  // [gate_hidden, K], zero at init so gating starts uniform
    TensorPtr b2;  // [K]
};

struct MoAModule {
    MoAConfig config;
    std::vector<ExpertParams> experts;
    GateParams gate;
};

// Gate diagnostics for one forward pass (Eq.-4-style entropy monitoring).
struct MoAStats {
    double mean_entropy = 0.0;      // nats, in [0, ln K]
    std::vector<double> usage;      // per-expert mean gate weight, sums to 1
};

struct MoAOutput {
    TensorPtr tokens;  // [T, d]
    TensorPtr gates;   // [T, K], still attached to the graph
};

// W1 ~ normal(0, 0.02), W2 = 0; gate final layer zero so probabilities start
// uniform. rng is consumed in a fixed order.
MoAModule init_moa_module(const MoAConfig& config, Rng& rng);

TensorPtr expert_forward(const TensorPtr& x, const ExpertParams& expert);
TensorPtr gate_forward(const TensorPtr& x, const GateParams& gate, double temperature);
MoAOutput moa_forward(const TensorPtr& tokens, const MoAModule& module);

// Mean per-token entropy (0*log 0 := 0) plus the usage histogram. Throws
// ContractError if any row fails to sum to 1 within 1e-6.
MoAStats gate_entropy(const TensorPtr& gates);

// All tensors of the module paired with suffix names ("expert0.w1", "gate.b2", ...).
std::vector<std::pair<std::string, TensorPtr>> moa_named_params(const MoAModule& module);

}  // namespace moadepth
