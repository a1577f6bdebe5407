#include "meshsr/train.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace meshsr::train {

namespace {

constexpr double kDivergenceThreshold = 1e6;

std::string fmt_double(double x) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

}  // namespace

Mode parse_mode(const std::string& name) {
    if (name == "complementary") return Mode::complementary;
    if (name == "supervised") return Mode::supervised;
    throw config_error("unknown training mode '" + name +
                       "' (expected complementary or supervised)");
}

std::string to_string(Mode mode) {
    return mode == Mode::complementary ? "complementary" : "supervised";
}

int TrainConfig::validation_count(int n_paired) const {
    return std::max(2, static_cast<int>(std::lround(val_fraction * n_paired)));
}

void TrainConfig::validate(int n_paired, int field_dim) const {
    model.validate();
    if (!(adam.lr > 0.0)) throw config_error("learning rate must be positive");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
        throw config_error("Adam betas must lie in [0, 1)");
    if (!(adam.eps > 0.0)) throw config_error("Adam epsilon must be positive");
    if (max_epochs < 1) throw config_error("max_epochs must be at least 1");
    if (patience < 0) throw config_error("patience must be non-negative");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0))
        throw config_error("val_fraction must lie in [0, 1)");
    if (loss_weights.size() != 0 && static_cast<int>(loss_weights.size()) != field_dim)
        throw config_error("loss_weights has " + std::to_string(loss_weights.size()) +
                           " entries for a " + std::to_string(field_dim) + "-column field");
    for (int j = 0; j < static_cast<int>(loss_weights.size()); ++j)
        if (!(loss_weights[j] > 0.0)) throw config_error("loss_weights must be positive");
    int n_val = validation_count(n_paired);
    if (n_paired - n_val < 2)
        throw config_error("validation split of " + std::to_string(n_val) + " from " +
                           std::to_string(n_paired) +
                           " paired samples leaves fewer than 2 training pairs");
}

Trainer::Trainer(const TrainConfig& config, const mesh::SplitDataset& ds,
                 const models::ModelParams* initial)
    : config_(config), ds_(&ds), geo_(ds, config.model.k), rng_(config.seed) {
    ds.validate();
    config_.validate(static_cast<int>(ds.paired.size()), ds.field_dim());

    // Seeded shuffle of the paired indices; the head becomes the validation
    // hold-out. The same generator then drives init and batch sampling, so
    // the seed pins the whole trajectory.
    std::vector<int> order(ds.paired.size());
    for (int i = 0; i < static_cast<int>(order.size()); ++i) order[i] = i;
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
        std::swap(order[i], order[rng_.uniform_int(i + 1)]);
    int n_val = config_.validation_count(static_cast<int>(ds.paired.size()));
    val_idx_.assign(order.begin(), order.begin() + n_val);
    train_idx_.assign(order.begin() + n_val, order.end());

    if (initial != nullptr) {
        const models::ModelConfig& a = initial->config;
        const models::ModelConfig& b = config_.model;
        if (a.kind != b.kind || a.hidden != b.hidden || a.lr_layers != b.lr_layers ||
            a.hr_layers != b.hr_layers || a.node_centering != b.node_centering ||
            a.message_centering != b.message_centering || a.k != b.k ||
            initial->field_dim != ds.field_dim() || initial->space_dim != ds.space_dim())
            throw config_error("initial parameters do not match the training configuration");
        params_ = *initial;
    } else {
        params_ = models::ModelParams::create(config_.model, ds.field_dim(), ds.space_dim(), rng_);
    }
    adam_ = grad::AdamState::init(params_.store);

    paired_bound_.resize(ds.paired.size());
    paired_ok_.assign(ds.paired.size(), 0);
    unpaired_bound_.resize(ds.unpaired.size());
    unpaired_ok_.assign(ds.unpaired.size(), 0);
    hr_norm_.resize(ds.paired.size());
    hr_ok_.assign(ds.paired.size(), 0);
}

const models::BoundSample& Trainer::bound_paired(int pair_index) {
    if (pair_index < 0 || pair_index >= static_cast<int>(ds_->paired.size()))
        throw index_error("paired sample index " + std::to_string(pair_index) +
                          " out of range");
    if (!paired_ok_[pair_index]) {
        const mesh::PairedSample& p = ds_->paired[pair_index];
        paired_bound_[pair_index] = models::bind_sample(geo_, p.lr, p.hr.mesh_id);
        paired_ok_[pair_index] = 1;
    }
    return paired_bound_[pair_index];
}

const models::BoundSample& Trainer::bound_unpaired(int unpaired_index) {
    if (unpaired_index < 0 || unpaired_index >= static_cast<int>(ds_->unpaired.size()))
        throw index_error("unpaired sample index " + std::to_string(unpaired_index) +
                          " out of range");
    if (!unpaired_ok_[unpaired_index]) {
        const mesh::UnpairedSample& u = ds_->unpaired[unpaired_index];
        unpaired_bound_[unpaired_index] = models::bind_sample(geo_, u.lr, u.hr_mesh_id);
        unpaired_ok_[unpaired_index] = 1;
    }
    return unpaired_bound_[unpaired_index];
}

const Matrix& Trainer::hr_truth(int pair_index) {
    if (!hr_ok_[pair_index]) {
        hr_norm_[pair_index] = ds_->stats.normalize_fields(ds_->paired[pair_index].hr.values);
        hr_ok_[pair_index] = 1;
    }
    return hr_norm_[pair_index];
}

Matrix Trainer::interp_residual(const models::BoundSample& r, const models::BoundSample& s) {
    const grad::RowMixPlan& own = geo_.plan(r.lr_mesh_id, r.hr_mesh_id);
    const grad::RowMixPlan& other = geo_.plan(s.lr_mesh_id, r.hr_mesh_id);
    return mesh::apply_plan(r.lr_values, own) - mesh::apply_plan(s.lr_values, other);
}

Batch Trainer::sample_batch() {
    Batch b;
    int n_train = static_cast<int>(train_idx_.size());
    if (config_.mode == Mode::supervised) {
        b.alpha = train_idx_[rng_.uniform_int(n_train)];
        return b;
    }
    int a_pos = rng_.uniform_int(n_train);
    int b_pos = rng_.uniform_int(n_train - 1);
    if (b_pos >= a_pos) ++b_pos;
    b.alpha = train_idx_[a_pos];
    b.beta = train_idx_[b_pos];
    if (!ds_->unpaired.empty()) b.gamma = rng_.uniform_int(static_cast<int>(ds_->unpaired.size()));
    return b;
}

void Trainer::check_losses(const StepLosses& l, const Batch& batch) const {
    for (double v : {l.f_sup, l.f_unsup, l.g_sup, l.g_unsup, l.total()}) {
        if (std::isfinite(v) && v <= kDivergenceThreshold) continue;
        std::ostringstream msg;
        msg << "training diverged: f_sup=" << l.f_sup << " f_unsup=" << l.f_unsup
            << " g_sup=" << l.g_sup << " g_unsup=" << l.g_unsup << " (batch alpha="
            << batch.alpha << " beta=" << batch.beta << " gamma=" << batch.gamma << ")";
        throw divergence_error(msg.str());
    }
}

StepLosses Trainer::loss_and_grads(const Batch& batch, std::vector<Matrix>* grads,
                                   bool divergence_guard) {
    grad::Tape t;
    std::vector<grad::Var> w = grad::watch(t, params_.store);
    Vector lw = config_.loss_weights;
    if (lw.size() == 0) lw = Vector::Ones(ds_->field_dim());
    auto wmse = [&](grad::Var a, grad::Var b) { return grad::mse(t, a, b, lw); };

    StepLosses losses;
    grad::Var total;

    const models::BoundSample& A = bound_paired(batch.alpha);
    grad::Var z_a = models::extract(t, params_, w, geo_, A);
    grad::Var u_a = models::decode_f(t, params_, w, geo_, z_a, A);
    grad::Var f_a = wmse(u_a, t.constant(hr_truth(batch.alpha)));

    if (batch.beta < 0) {
        // Supervised step: the field model alone against one HR truth. The
        // difference model receives zero gradient, so Adam leaves it frozen.
        total = f_a;
        losses.f_sup = t.value(total)(0, 0);
    } else {
        if (batch.beta == batch.alpha)
            throw contract_error("complementary step needs two distinct paired samples");
        const models::BoundSample& B = bound_paired(batch.beta);
        grad::Var z_b = models::extract(t, params_, w, geo_, B);
        grad::Var u_b = models::decode_f(t, params_, w, geo_, z_b, B);
        grad::Var f_sup = grad::add(t, f_a, wmse(u_b, t.constant(hr_truth(batch.beta))));

        // Supervised difference loss on r = alpha, s = beta.
        const grad::RowMixPlan& plan_b_a = geo_.plan(B.hr_mesh_id, A.hr_mesh_id);
        grad::Var u_ab = models::decode_g(t, params_, w, z_a, z_b, plan_b_a, interp_residual(A, B));
        Matrix g_target =
            models::target_g(geo_, ds_->paired[batch.alpha].hr, ds_->paired[batch.beta].hr);
        grad::Var g_sup = wmse(u_ab, t.constant(g_target));

        total = grad::add(t, f_sup, g_sup);
        losses.f_sup = t.value(f_sup)(0, 0);
        losses.g_sup = t.value(g_sup)(0, 0);

        if (batch.gamma >= 0) {
            const models::BoundSample& C = bound_unpaired(batch.gamma);
            grad::Var z_c = models::extract(t, params_, w, geo_, C);
            grad::Var u_c = models::decode_f(t, params_, w, geo_, z_c, C);
            const grad::RowMixPlan& plan_a_c = geo_.plan(A.hr_mesh_id, C.hr_mesh_id);
            const grad::RowMixPlan& plan_b_c = geo_.plan(B.hr_mesh_id, C.hr_mesh_id);
            const grad::RowMixPlan& plan_c_b = geo_.plan(C.hr_mesh_id, B.hr_mesh_id);
            grad::Var u_ca =
                models::decode_g(t, params_, w, z_c, z_a, plan_a_c, interp_residual(C, A));
            grad::Var u_bc =
                models::decode_g(t, params_, w, z_b, z_c, plan_c_b, interp_residual(B, C));

            // Pseudo-targets: interpolation of known data enters as a tape
            // constant, interpolation of a prediction stays differentiable
            // so both models shape each other's targets.
            grad::Var knn_ua = t.constant(mesh::apply_plan(hr_truth(batch.alpha), plan_a_c));
            grad::Var truth_b = t.constant(hr_truth(batch.beta));

            grad::Var f_u1 = wmse(u_c, grad::add(t, u_ca, knn_ua));
            grad::Var f_u2 = wmse(u_c, grad::row_mix(t, grad::sub(t, truth_b, u_bc), plan_b_c));
            grad::Var f_unsup = grad::add(t, f_u1, f_u2);

            grad::Var g_u1 = wmse(u_ca, grad::sub(t, u_c, knn_ua));
            grad::Var g_u2 = wmse(u_bc, grad::sub(t, truth_b, grad::row_mix(t, u_c, plan_c_b)));
            grad::Var g_unsup = grad::add(t, g_u1, g_u2);

            total = grad::add(t, total, grad::add(t, f_unsup, g_unsup));
            losses.f_unsup = t.value(f_unsup)(0, 0);
            losses.g_unsup = t.value(g_unsup)(0, 0);
        }
    }

    if (divergence_guard) check_losses(losses, batch);
    if (grads != nullptr) *grads = grad::parameter_gradients(t, w, total);
    return losses;
}

StepLosses Trainer::step(const Batch& batch) {
    std::vector<Matrix> grads;
    StepLosses losses = loss_and_grads(batch, &grads);
    grad::adam_step(params_.store, grads, adam_, config_.adam);
    return losses;
}

StepLosses Trainer::step_complementary(int alpha, int beta, int gamma) {
    return step(Batch{alpha, beta, gamma});
}

double Trainer::step_supervised(int pair_index) {
    return step(Batch{pair_index, -1, -1}).f_sup;
}

double Trainer::validation_rmse() {
    double sq = 0.0;
    long count = 0;
    for (int idx : val_idx_) {
        const models::BoundSample& b = bound_paired(idx);
        grad::Tape t;
        std::vector<grad::Var> w = grad::watch(t, params_.store);
        grad::Var z = models::extract(t, params_, w, geo_, b);
        Matrix pred = t.value(models::decode_f(t, params_, w, geo_, z, b));
        const Matrix& truth = hr_truth(idx);
        sq += (pred - truth).squaredNorm();
        count += truth.size();
    }
    return std::sqrt(sq / static_cast<double>(count));
}

RunMetrics Trainer::run() {
    auto start = std::chrono::steady_clock::now();
    RunMetrics metrics;
    metrics.best_val_rmse = std::numeric_limits<double>::infinity();
    std::vector<Matrix> best;
    best.reserve(params_.store.count());
    for (int i = 0; i < params_.store.count(); ++i) best.push_back(params_.store.value(i));

    const int steps_per_epoch = ds_->total();
    int bad_streak = 0;
    for (int epoch = 1; epoch <= config_.max_epochs; ++epoch) {
        StepLosses sums;
        for (int s = 0; s < steps_per_epoch; ++s) {
            Batch batch = sample_batch();
            try {
                StepLosses l = step(batch);
                sums.f_sup += l.f_sup;
                sums.f_unsup += l.f_unsup;
                sums.g_sup += l.g_sup;
                sums.g_unsup += l.g_unsup;
            } catch (const divergence_error& e) {
                throw divergence_error("epoch " + std::to_string(epoch) + " step " +
                                       std::to_string(s + 1) + ": " + e.what());
            }
        }
        double val = validation_rmse();
        if (!std::isfinite(val))
            throw divergence_error("epoch " + std::to_string(epoch) +
                                   ": validation RMSE is not finite");
        EpochRecord rec;
        rec.epoch = epoch;
        rec.f_sup = sums.f_sup / steps_per_epoch;
        rec.f_unsup = sums.f_unsup / steps_per_epoch;
        rec.g_sup = sums.g_sup / steps_per_epoch;
        rec.g_unsup = sums.g_unsup / steps_per_epoch;
        rec.val_rmse = val;
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        metrics.epochs.push_back(rec);

        if (val < metrics.best_val_rmse) {
            metrics.best_val_rmse = val;
            metrics.best_epoch = epoch;
            for (int i = 0; i < params_.store.count(); ++i) best[i] = params_.store.value(i);
            bad_streak = 0;
        } else {
            ++bad_streak;
        }
        if (bad_streak >= config_.patience) break;
    }

    for (int i = 0; i < params_.store.count(); ++i) params_.store.value(i) = best[i];
    return metrics;
}

TrainResult run_training(const TrainConfig& config, const mesh::SplitDataset& ds) {
    Trainer trainer(config, ds);
    RunMetrics metrics = trainer.run();
    return TrainResult{std::move(trainer.params()), std::move(metrics)};
}

void write_metrics_csv(const RunMetrics& metrics, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot open " + path.string() + " for writing");
    out << "epoch,l_f_sup,l_f_unsup,l_g_sup,l_g_unsup,val_rmse,seconds\n";
    for (const EpochRecord& r : metrics.epochs) {
        out << r.epoch << ',' << fmt_double(r.f_sup) << ',' << fmt_double(r.f_unsup) << ','
            << fmt_double(r.g_sup) << ',' << fmt_double(r.g_unsup) << ','
            << fmt_double(r.val_rmse) << ',' << fmt_double(r.seconds) << '\n';
    }
    if (!out.flush()) throw io_error("failed writing " + path.string());
}

double evaluate_rmse(const models::ModelParams& m, models::GeometryCache& geo,
                     std::span<const mesh::PairedSample> pairs) {
    if (pairs.empty()) throw contract_error("evaluate_rmse: empty sample set");
    double sq = 0.0;
    long count = 0;
    for (const mesh::PairedSample& p : pairs) {
        models::BoundSample b = models::bind_sample(geo, p.lr, p.hr.mesh_id);
        grad::Tape t;
        std::vector<grad::Var> w = grad::watch(t, m.store);
        Matrix pred = t.value(models::forward_f(t, m, w, geo, b));
        Matrix truth = geo.dataset().stats.normalize_fields(p.hr.values);
        sq += (pred - truth).squaredNorm();
        count += truth.size();
    }
    return std::sqrt(sq / static_cast<double>(count));
}

Vector evaluate_rmse_per_column(const models::ModelParams& m, models::GeometryCache& geo,
                                std::span<const mesh::PairedSample> pairs) {
    if (pairs.empty()) throw contract_error("evaluate_rmse_per_column: empty sample set");
    int d = geo.dataset().field_dim();
    Vector sq = Vector::Zero(d);
    long rows = 0;
    for (const mesh::PairedSample& p : pairs) {
        models::BoundSample b = models::bind_sample(geo, p.lr, p.hr.mesh_id);
        grad::Tape t;
        std::vector<grad::Var> w = grad::watch(t, m.store);
        Matrix pred = t.value(models::forward_f(t, m, w, geo, b));
        Matrix truth = geo.dataset().stats.normalize_fields(p.hr.values);
        sq += (pred - truth).colwise().squaredNorm().transpose();
        rows += truth.rows();
    }
    return (sq / static_cast<double>(rows)).cwiseSqrt();
}

double knn_baseline_rmse(models::GeometryCache& geo, std::span<const mesh::PairedSample> pairs) {
    if (pairs.empty()) throw contract_error("knn_baseline_rmse: empty sample set");
    double sq = 0.0;
    long count = 0;
    for (const mesh::PairedSample& p : pairs) {
        const grad::RowMixPlan& plan = geo.plan(p.lr.mesh_id, p.hr.mesh_id);
        Matrix pred = mesh::apply_plan(geo.dataset().stats.normalize_fields(p.lr.values), plan);
        Matrix truth = geo.dataset().stats.normalize_fields(p.hr.values);
        sq += (pred - truth).squaredNorm();
        count += truth.size();
    }
    return std::sqrt(sq / static_cast<double>(count));
}

std::pair<double, double> perturbed_loss(grad::ParamStore& params, std::span<const Matrix> grads,
                                         double lr, double multiplier,
                                         const std::function<double()>& loss) {
    if (static_cast<int>(grads.size()) != params.count())
        throw dimension_error("perturbed_loss: got " + std::to_string(grads.size()) +
                              " gradients for " + std::to_string(params.count()) +
                              " parameters");
    double base = loss();
    std::vector<Matrix> saved;
    saved.reserve(params.count());
    for (int i = 0; i < params.count(); ++i) {
        const Matrix& g = grads[i];
        Matrix& v = params.value(i);
        if (g.rows() != v.rows() || g.cols() != v.cols())
            throw dimension_error("perturbed_loss: gradient shape mismatch for " +
                                  params.name(i));
        saved.push_back(v);
        v -= (multiplier * lr) * g;
    }
    double perturbed = std::numeric_limits<double>::quiet_NaN();
    try {
        perturbed = loss();
    } catch (...) {
        for (int i = 0; i < params.count(); ++i) params.value(i) = saved[i];
        throw;
    }
    for (int i = 0; i < params.count(); ++i) params.value(i) = saved[i];
    return {base, perturbed};
}

std::vector<ProbePoint> probe_loss_landscape(Trainer& trainer, int steps, double multiplier) {
    if (steps < 1) throw config_error("probe step count must be at least 1");
    std::vector<ProbePoint> points;
    points.reserve(steps);
    for (int s = 1; s <= steps; ++s) {
        Batch batch = trainer.sample_batch();
        std::vector<Matrix> grads;
        StepLosses l = trainer.loss_and_grads(batch, &grads, /*divergence_guard=*/false);
        auto eval = [&]() {
            return trainer.loss_and_grads(batch, nullptr, /*divergence_guard=*/false).total();
        };
        auto [base, pert] = perturbed_loss(trainer.params().store, grads,
                                           trainer.config().adam.lr, multiplier, eval);
        (void)l;
        points.push_back(ProbePoint{s, base, pert});
    }
    return points;
}

}  // namespace meshsr::train
