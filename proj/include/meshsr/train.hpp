#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "meshsr/models.hpp"

// The training loops. Each complementary step draws two paired samples
// (alpha, beta) and one unpaired LR sample (gamma), assembles supervised
// losses from the paired HR truths and unsupervised losses from pseudo-
// targets the two models build for each other, and takes one joint Adam step
// on the total. The supervised baseline trains the field model alone.

namespace meshsr::train {

using grad::Matrix;
using grad::Vector;

enum class Mode { complementary, supervised };

Mode parse_mode(const std::string& name);  // config error on unknown names
std::string to_string(Mode mode);

struct TrainConfig {
    models::ModelConfig model;
    grad::AdamConfig adam;  // lr, beta1, beta2, eps
    int max_epochs = 1000;
    int patience = 50;           // epochs without validation improvement; 0 stops after epoch 1
    double val_fraction = 0.1;   // share of paired samples held out for early stopping
    Vector loss_weights;         // per solution column; empty means uniform
    std::uint64_t seed = 0;
    Mode mode = Mode::complementary;

    // Held-out pair count: max(2, round(val_fraction * n_paired)).
    int validation_count(int n_paired) const;
    // Throws config error on any violation, including a validation split that
    // would leave fewer than 2 training pairs.
    void validate(int n_paired, int field_dim) const;
};

struct StepLosses {
    double f_sup = 0.0, f_unsup = 0.0, g_sup = 0.0, g_unsup = 0.0;
    double total() const { return f_sup + f_unsup + g_sup + g_unsup; }
};

struct EpochRecord {
    int epoch = 0;  // 1-based
    // Per-step means over the epoch.
    double f_sup = 0.0, f_unsup = 0.0, g_sup = 0.0, g_unsup = 0.0;
    double val_rmse = 0.0;
    double seconds = 0.0;  // wall clock since run start (the one nondeterministic column)
};

struct RunMetrics {
    std::vector<EpochRecord> epochs;
    int best_epoch = -1;
    double best_val_rmse = 0.0;
};

// One sampled step's sample indices; -1 marks an absent slot (supervised
// steps have no beta/gamma, degenerate complementary steps no gamma).
struct Batch {
    int alpha = -1;  // index into the dataset's paired list
    int beta = -1;   // index into the dataset's paired list
    int gamma = -1;  // index into the dataset's unpaired list
};

class Trainer {
public:
    // Validates config and dataset up front. `initial` (when given) supplies
    // pre-trained parameters; its architecture must match the config.
    Trainer(const TrainConfig& config, const mesh::SplitDataset& ds,
            const models::ModelParams* initial = nullptr);

    // Draws the next batch for the configured mode from the run generator:
    // alpha and beta without replacement from the training pairs, gamma
    // uniformly from the unpaired pool (when present).
    Batch sample_batch();

    // Loss assembly without an optimizer update; fills `grads` (registration
    // order) when non-null. With the guard on, throws a divergence error when
    // any component is non-finite or exceeds the divergence threshold; the
    // landscape probe turns it off so failures are recorded instead.
    StepLosses loss_and_grads(const Batch& batch, std::vector<Matrix>* grads,
                              bool divergence_guard = true);

    // One full optimization step (loss, backward, Adam).
    StepLosses step(const Batch& batch);
    StepLosses step_complementary(int alpha, int beta, int gamma);
    double step_supervised(int pair_index);

    double validation_rmse();

    // Epoch loop with early stopping: dataset-size steps per epoch, one
    // validation pass per epoch, stop when `patience` epochs bring no
    // improvement; parameters end at the best-validation snapshot.
    RunMetrics run();

    const TrainConfig& config() const { return config_; }
    models::ModelParams& params() { return params_; }
    const models::ModelParams& params() const { return params_; }
    models::GeometryCache& geometry() { return geo_; }
    const mesh::SplitDataset& dataset() const { return *ds_; }
    const std::vector<int>& train_pairs() const { return train_idx_; }
    const std::vector<int>& val_pairs() const { return val_idx_; }
    Rng& rng() { return rng_; }

private:
    const models::BoundSample& bound_paired(int pair_index);
    const models::BoundSample& bound_unpaired(int unpaired_index);
    const Matrix& hr_truth(int pair_index);  // normalized HR values
    Matrix interp_residual(const models::BoundSample& r, const models::BoundSample& s);
    void check_losses(const StepLosses& l, const Batch& batch) const;

    TrainConfig config_;
    const mesh::SplitDataset* ds_;
    models::GeometryCache geo_;
    models::ModelParams params_;
    grad::AdamState adam_;
    Rng rng_;
    std::vector<int> train_idx_, val_idx_;
    std::vector<models::BoundSample> paired_bound_, unpaired_bound_;
    std::vector<char> paired_ok_, unpaired_ok_;
    std::vector<Matrix> hr_norm_;
    std::vector<char> hr_ok_;
};

struct TrainResult {
    models::ModelParams params;
    RunMetrics metrics;
};

TrainResult run_training(const TrainConfig& config, const mesh::SplitDataset& ds);

// Writes `epoch,l_f_sup,l_f_unsup,l_g_sup,l_g_unsup,val_rmse,seconds` rows,
// doubles in shortest round-trip form. Throws an io error on failure.
void write_metrics_csv(const RunMetrics& metrics, const std::filesystem::path& path);

// Root mean square error of the field model over paired samples, one mean
// across every sample, node and column, in normalized field units. Throws a
// contract error when `pairs` is empty.
double evaluate_rmse(const models::ModelParams& m, models::GeometryCache& geo,
                     std::span<const mesh::PairedSample> pairs);
Vector evaluate_rmse_per_column(const models::ModelParams& m, models::GeometryCache& geo,
                                std::span<const mesh::PairedSample> pairs);

// RMSE of plain interpolation of the LR field (the model-free baseline).
double knn_baseline_rmse(models::GeometryCache& geo, std::span<const mesh::PairedSample> pairs);

// Evaluates loss() at the current parameters, then at parameters shifted by
// -multiplier * lr * grads, restores the parameters bitwise, and returns
// (loss, perturbed loss).
std::pair<double, double> perturbed_loss(grad::ParamStore& params, std::span<const Matrix> grads,
                                         double lr, double multiplier,
                                         const std::function<double()>& loss);

struct ProbePoint {
    int step = 0;
    double loss = 0.0;
    double perturbed = 0.0;  // NaN when evaluation failed; the probe continues
};

// Loss-landscape probe: for `steps` freshly sampled batches, record the loss
// and the loss after stepping along the gradient with size multiplier * lr.
// Parameters are left untouched.
std::vector<ProbePoint> probe_loss_landscape(Trainer& trainer, int steps,
                                             double multiplier = 4.0);

}  // namespace meshsr::train
