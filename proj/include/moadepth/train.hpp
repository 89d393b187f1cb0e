#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "moadepth/data.hpp"
#include "moadepth/model.hpp"

namespace moadepth {

// Per-parameter AdamW moments, keyed by parameter name.
struct OptimizerState {
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
    std::int64_t step = 0;  // t, incremented before each update
};

struct AdamWHyper {
    double lr = 3e-3;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected AdamW with decoupled decay:
//   w <- w - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * w
// Every listed parameter must be trainable and hold a gradient.
void adamw_step(const std::vector<std::pair<std::string, TensorPtr>>& trainable,
                OptimizerState& state, const AdamWHyper& hyper);

// ---- per-sample objective -----------------------------------------------------

struct SampleLoss {
    TensorPtr cls, reg, silog;  // scalar components (Eq.-5 style weighting applied later)
    ModelForward forward;
    PooledTargets targets;
};

// Forward + supervision at the token grid: CE on the classification logits,
// L1 + SILog on the regression output (plus the fused map when
// loss.supervise_fused is set).
SampleLoss compute_sample_loss(const DepthModel& model, const Sample& sample);

// ---- training loop --------------------------------------------------------------

struct StepLog {
    std::int64_t step = 0;
    double total = 0, cls = 0, reg = 0, silog = 0;
};

struct EvalLog {
    std::int64_t epoch = 0;
    MetricReport report;
};

struct GateStatLog {
    std::int64_t step = 0;
    std::int64_t layer = 0;
    MoAStats stats;
};

struct TrainResult {
    DepthModel model;
    std::vector<StepLog> steps;
    std::vector<EvalLog> evals;
    std::vector<GateStatLog> gate_stats;
    std::string metrics_csv_path;     // empty when out_dir is unset
    std::string gate_stats_csv_path;
    std::string checkpoint_dir;
};

// Fixed-order epochs over the train split; per-step loss/gate logging; eval
// split metrics once per epoch; checkpoint saved at the end when out_dir is
// set. Identical configs (seed included) produce bitwise-identical outputs.
TrainResult train(const TrainConfig& config);

// ---- evaluation ------------------------------------------------------------------

using PredictFn = std::function<TensorPtr(const Sample&)>;  // full-res depth map

// Full-resolution fused-depth metrics pooled per-pixel across the split
// ("train" or "eval").
MetricReport evaluate_model(const DepthModel& model, const DatasetManifest& manifest,
                            const std::string& split);
// Same protocol with an arbitrary predictor (test seam for stubbed models).
MetricReport evaluate_split(const DatasetManifest& manifest, const std::string& split,
                            const PredictFn& predict, double d_min, double cap);
MetricReport evaluate_checkpoint(const std::string& checkpoint_dir,
                                 const std::string& data_dir, const std::string& split);

// ---- checkpointing -----------------------------------------------------------------

// One MDTN file per named parameter plus manifest.txt ("name file frozen")
// and the serialized TrainConfig; load reproduces every tensor bitwise.
void save_checkpoint(const DepthModel& model, const std::string& dir);
DepthModel load_checkpoint(const std::string& dir);

// ---- ablation --------------------------------------------------------------------

struct AblationGrid {
    std::vector<std::int64_t> experts = {1, 2, 4, 8};
    std::vector<std::int64_t> bins = {10, 40, 128};

    void validate() const;  // non-empty lists
};

struct AblationRow {
    int stage = 0;  // 1 = expert sweep, 2 = bin sweep
    std::int64_t experts = 0;
    std::int64_t bins = 0;
    double absrel = 0, rmse = 0, delta1 = 0;
    std::int64_t trainable_params = 0;
};

// Stage 1 fixes bins at the base value and sweeps expert counts; stage 2
// fixes experts at the base value and sweeps bin counts. Each cell trains
// with seed = base seed + cell index.
std::vector<AblationRow> ablate(const TrainConfig& base, const AblationGrid& grid);
std::string ablation_csv_header();
std::string ablation_csv_row(const AblationRow& row);

// ---- gradient-check suite -----------------------------------------------------------

struct GradcheckSection {
    std::string name;
    GradReport report;
};

struct GradcheckSuiteResult {
    std::vector<GradcheckSection> sections;
    bool all_pass = true;
};

// Finite-difference verification of every primitive, the expert / gate / full
// MoA maps, the prediction heads, and the composite loss end-to-end on a
// one-sample toy batch (eps 1e-5, rel_tol 1e-4).
GradcheckSuiteResult run_gradcheck_suite(std::uint64_t seed);

}  // namespace moadepth
