#include "meshsr/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

namespace meshsr::datagen {

namespace {

void check_range(const char* name, double lo, double hi) {
    if (!(lo <= hi))
        throw config_error(std::string(name) + " range is empty: [" + std::to_string(lo) + ", " +
                           std::to_string(hi) + "]");
}

void check_mu(const char* what, double v, double lo, double hi) {
    if (!(v >= lo && v <= hi))
        throw config_error("mu component " + std::string(what) + "=" + std::to_string(v) +
                           " outside spec range [" + std::to_string(lo) + ", " +
                           std::to_string(hi) + "]");
}

}  // namespace

void PoissonSpec::validate() const {
    if (n_lr < 3) throw config_error("n_lr must be at least 3");
    if (n_hr < n_lr) throw config_error("n_hr must not be smaller than n_lr");
    if ((n_hr - 1) % (n_lr - 1) != 0)
        throw config_error("n_hr - 1 = " + std::to_string(n_hr - 1) +
                           " is not a multiple of n_lr - 1 = " + std::to_string(n_lr - 1));
    if (!(tolerance > 0.0)) throw config_error("solver tolerance must be positive");
    if (!(omega > 0.0 && omega < 2.0)) throw config_error("SOR omega must lie in (0, 2)");
    if (max_iterations < 1) throw config_error("max_iterations must be at least 1");
    check_range("center", center_lo, center_hi);
    check_range("width", width_lo, width_hi);
    check_range("amplitude", amp_lo, amp_hi);
    if (!(width_lo > 0.0)) throw config_error("bump width must be positive");
}

Mesh make_grid_mesh(int n) {
    if (n < 2) throw config_error("grid size must be at least 2");
    Mesh m;
    m.positions.resize(n * n, 2);
    double h = 1.0 / (n - 1);
    for (int iy = 0; iy < n; ++iy)
        for (int ix = 0; ix < n; ++ix) {
            m.positions(iy * n + ix, 0) = ix * h;
            m.positions(iy * n + ix, 1) = iy * h;
        }
    for (int iy = 0; iy < n; ++iy)
        for (int ix = 0; ix < n; ++ix) {
            int node = iy * n + ix;
            if (ix + 1 < n) m.edges.push_back({node, node + 1});
            if (iy + 1 < n) m.edges.push_back({node, node + n});
            // One diagonal per cell, same orientation everywhere.
            if (ix + 1 < n && iy + 1 < n) m.edges.push_back({node, node + n + 1});
        }
    return m;
}

Vector draw_poisson_mu(const PoissonSpec& spec, Rng& rng) {
    Vector mu(4);
    mu[0] = rng.uniform(spec.center_lo, spec.center_hi);
    mu[1] = rng.uniform(spec.center_lo, spec.center_hi);
    mu[2] = rng.uniform(spec.width_lo, spec.width_hi);
    mu[3] = rng.uniform(spec.amp_lo, spec.amp_hi);
    return mu;
}

Matrix gaussian_bump(const Vector& mu, const Matrix& positions) {
    if (mu.size() != 4) throw dimension_error("mu must have 4 components (cx, cy, w, A)");
    if (positions.cols() != 2) throw dimension_error("positions must be n x 2");
    Matrix out(positions.rows(), 1);
    double cx = mu[0], cy = mu[1], w2 = mu[2] * mu[2], amp = mu[3];
    for (int i = 0; i < positions.rows(); ++i) {
        double dx = positions(i, 0) - cx;
        double dy = positions(i, 1) - cy;
        out(i, 0) = amp * std::exp(-(dx * dx + dy * dy) / w2);
    }
    return out;
}

namespace {

void check_poisson_inputs(const PoissonSpec& spec, const Vector& mu, int n) {
    spec.validate();
    if (mu.size() != 4) throw dimension_error("mu must have 4 components (cx, cy, w, A)");
    check_mu("cx", mu[0], spec.center_lo, spec.center_hi);
    check_mu("cy", mu[1], spec.center_lo, spec.center_hi);
    check_mu("w", mu[2], spec.width_lo, spec.width_hi);
    check_mu("A", mu[3], spec.amp_lo, spec.amp_hi);
    if (n < 3) throw config_error("grid size must be at least 3 for interior nodes");
}

}  // namespace

Matrix solve_poisson_source(const PoissonSpec& spec, const Matrix& f, int n) {
    spec.validate();
    if (n < 3) throw config_error("grid size must be at least 3 for interior nodes");
    if (f.rows() != n * n || f.cols() != 1)
        throw dimension_error("source must be " + std::to_string(n * n) + " x 1");
    double h2 = 1.0 / (static_cast<double>(n - 1) * (n - 1));

    Matrix u = Matrix::Zero(n * n, 1);
    double residual = 0.0;
    for (long iter = 0; iter < spec.max_iterations; ++iter) {
        for (int iy = 1; iy + 1 < n; ++iy)
            for (int ix = 1; ix + 1 < n; ++ix) {
                int node = iy * n + ix;
                double nb = u(node - 1, 0) + u(node + 1, 0) + u(node - n, 0) + u(node + n, 0);
                double gs = 0.25 * (nb - h2 * f(node, 0));
                u(node, 0) = (1.0 - spec.omega) * u(node, 0) + spec.omega * gs;
            }
        residual = poisson_source_residual(f, n, u);
        if (residual <= spec.tolerance) return u;
    }
    std::ostringstream msg;
    msg << "poisson solver did not converge within " << spec.max_iterations
        << " iterations on the " << n << "x" << n << " grid: max residual " << residual
        << " (target " << spec.tolerance << ")";
    throw solver_error(msg.str());
}

double poisson_source_residual(const Matrix& f, int n, const Matrix& u) {
    if (n < 3) throw config_error("grid size must be at least 3 for interior nodes");
    if (f.rows() != n * n || f.cols() != 1)
        throw dimension_error("source must be " + std::to_string(n * n) + " x 1");
    if (u.rows() != n * n || u.cols() != 1)
        throw dimension_error("solution must be " + std::to_string(n * n) + " x 1");
    double h2 = 1.0 / (static_cast<double>(n - 1) * (n - 1));
    double residual = 0.0;
    for (int iy = 1; iy + 1 < n; ++iy)
        for (int ix = 1; ix + 1 < n; ++ix) {
            int node = iy * n + ix;
            double lap = (u(node - 1, 0) + u(node + 1, 0) + u(node - n, 0) + u(node + n, 0) -
                          4.0 * u(node, 0)) /
                         h2;
            residual = std::max(residual, std::abs(lap - f(node, 0)));
        }
    return residual;
}

FieldSample solve_poisson_fd(const PoissonSpec& spec, const Vector& mu, int n) {
    check_poisson_inputs(spec, mu, n);
    Matrix f = gaussian_bump(mu, make_grid_mesh(n).positions);
    FieldSample sample;
    sample.mesh_id = -1;
    sample.values = solve_poisson_source(spec, f, n);
    sample.mu = mu;
    return sample;
}

double poisson_max_residual(const PoissonSpec& spec, const Vector& mu, int n, const Matrix& u) {
    check_poisson_inputs(spec, mu, n);
    Matrix f = gaussian_bump(mu, make_grid_mesh(n).positions);
    return poisson_source_residual(f, n, u);
}

SplitDataset gen_poisson_dataset(const PoissonSpec& spec, int n_samples, int n_paired,
                                 std::uint64_t seed) {
    spec.validate();
    if (n_paired < 2) throw config_error("at least 2 paired samples are required");
    if (n_paired > n_samples)
        throw config_error("n_paired = " + std::to_string(n_paired) + " exceeds n_samples = " +
                           std::to_string(n_samples));

    SplitDataset ds;
    ds.meshes.push_back(make_grid_mesh(spec.n_lr));
    ds.meshes.push_back(make_grid_mesh(spec.n_hr));
    double worst_residual = 0.0;
    for (int i = 0; i < n_samples; ++i) {
        Rng stream = Rng::derive(seed, static_cast<std::uint64_t>(i));
        Vector mu = draw_poisson_mu(spec, stream);
        FieldSample lr = solve_poisson_fd(spec, mu, spec.n_lr);
        lr.mesh_id = 0;
        worst_residual =
            std::max(worst_residual, poisson_max_residual(spec, mu, spec.n_lr, lr.values));
        if (i < n_paired) {
            FieldSample hr = solve_poisson_fd(spec, mu, spec.n_hr);
            hr.mesh_id = 1;
            worst_residual =
                std::max(worst_residual, poisson_max_residual(spec, mu, spec.n_hr, hr.values));
            ds.paired.push_back({std::move(lr), std::move(hr)});
        } else {
            ds.unpaired.push_back({std::move(lr), 1});
        }
    }
    ds.stats = mesh::compute_stats(ds);

    nlohmann::json j;
    j["kind"] = "poisson";
    j["seed"] = seed;
    j["n_samples"] = n_samples;
    j["n_paired"] = n_paired;
    j["max_residual"] = worst_residual;
    j["spec"] = {{"n_lr", spec.n_lr},
                 {"n_hr", spec.n_hr},
                 {"tolerance", spec.tolerance},
                 {"omega", spec.omega},
                 {"max_iterations", spec.max_iterations},
                 {"center_lo", spec.center_lo},
                 {"center_hi", spec.center_hi},
                 {"width_lo", spec.width_lo},
                 {"width_hi", spec.width_hi},
                 {"amp_lo", spec.amp_lo},
                 {"amp_hi", spec.amp_hi}};
    ds.generator_json = j.dump();
    ds.validate();
    return ds;
}

void JitterSpec::validate() const {
    if (n_lr < 3) throw config_error("n_lr must be at least 3");
    if (n_hr < 3) throw config_error("n_hr must be at least 3");
    if (!(amplitude >= 0.0 && amplitude < 0.5))
        throw config_error("jitter amplitude must lie in [0, 0.5) of the grid spacing");
    check_range("center", center_lo, center_hi);
    check_range("width", width_lo, width_hi);
    check_range("amplitude", amp_lo, amp_hi);
    if (!(width_lo > 0.0)) throw config_error("bump width must be positive");
}

Matrix one_ring_average(const Mesh& m, const Matrix& values) {
    if (values.rows() != m.nodes())
        throw dimension_error("values rows do not match mesh node count");
    Matrix sums = values;
    Eigen::VectorXd count = Eigen::VectorXd::Ones(m.nodes());
    for (const auto& e : m.edges) {
        sums.row(e[0]) += values.row(e[1]);
        sums.row(e[1]) += values.row(e[0]);
        count[e[0]] += 1.0;
        count[e[1]] += 1.0;
    }
    return sums.array().colwise() / count.array();
}

namespace {

// Interior nodes displaced uniformly within +-amplitude*spacing per
// coordinate, in node order; boundary nodes stay put so the domain is stable.
Mesh jittered_grid(int n, double amplitude, Rng& rng) {
    Mesh m = make_grid_mesh(n);
    double h = 1.0 / (n - 1);
    for (int iy = 1; iy + 1 < n; ++iy)
        for (int ix = 1; ix + 1 < n; ++ix) {
            int node = iy * n + ix;
            m.positions(node, 0) += rng.uniform(-amplitude * h, amplitude * h);
            m.positions(node, 1) += rng.uniform(-amplitude * h, amplitude * h);
        }
    return m;
}

}  // namespace

SplitDataset gen_jitter_dataset(const JitterSpec& spec, int n_samples, int n_paired,
                                std::uint64_t seed) {
    spec.validate();
    if (n_paired < 2) throw config_error("at least 2 paired samples are required");
    if (n_paired > n_samples)
        throw config_error("n_paired = " + std::to_string(n_paired) + " exceeds n_samples = " +
                           std::to_string(n_samples));

    SplitDataset ds;
    for (int i = 0; i < n_samples; ++i) {
        Rng stream = Rng::derive(seed, static_cast<std::uint64_t>(i));
        Vector mu(4);
        mu[0] = stream.uniform(spec.center_lo, spec.center_hi);
        mu[1] = stream.uniform(spec.center_lo, spec.center_hi);
        mu[2] = stream.uniform(spec.width_lo, spec.width_hi);
        mu[3] = stream.uniform(spec.amp_lo, spec.amp_hi);

        ds.meshes.push_back(jittered_grid(spec.n_lr, spec.amplitude, stream));
        int lr_id = static_cast<int>(ds.meshes.size()) - 1;
        ds.meshes.push_back(jittered_grid(spec.n_hr, spec.amplitude, stream));
        int hr_id = static_cast<int>(ds.meshes.size()) - 1;

        FieldSample lr;
        lr.mesh_id = lr_id;
        lr.values = gaussian_bump(mu, ds.meshes[lr_id].positions);
        if (spec.smooth_lr) lr.values = one_ring_average(ds.meshes[lr_id], lr.values);
        lr.mu = mu;

        if (i < n_paired) {
            FieldSample hr;
            hr.mesh_id = hr_id;
            hr.values = gaussian_bump(mu, ds.meshes[hr_id].positions);
            hr.mu = mu;
            ds.paired.push_back({std::move(lr), std::move(hr)});
        } else {
            ds.unpaired.push_back({std::move(lr), hr_id});
        }
    }
    ds.stats = mesh::compute_stats(ds);

    nlohmann::json j;
    j["kind"] = "jitter";
    j["seed"] = seed;
    j["n_samples"] = n_samples;
    j["n_paired"] = n_paired;
    j["spec"] = {{"n_lr", spec.n_lr},
                 {"n_hr", spec.n_hr},
                 {"amplitude", spec.amplitude},
                 {"smooth_lr", spec.smooth_lr},
                 {"center_lo", spec.center_lo},
                 {"center_hi", spec.center_hi},
                 {"width_lo", spec.width_lo},
                 {"width_hi", spec.width_hi},
                 {"amp_lo", spec.amp_lo},
                 {"amp_hi", spec.amp_hi}};
    ds.generator_json = j.dump();
    ds.validate();
    return ds;
}

Matrix paired_lr_embeddings(const SplitDataset& ds) {
    if (ds.paired.empty()) throw contract_error("paired_lr_embeddings: no paired samples");
    int rows = static_cast<int>(ds.paired.size());
    long cols = ds.paired[0].lr.values.size();
    Matrix out(rows, cols);
    for (int i = 0; i < rows; ++i) {
        Matrix norm = ds.stats.normalize_fields(ds.paired[i].lr.values);
        if (norm.size() != cols)
            throw dimension_error("paired LR fields have inconsistent sizes");
        long at = 0;
        for (int r = 0; r < norm.rows(); ++r)
            for (int c = 0; c < norm.cols(); ++c) out(i, at++) = norm(r, c);
    }
    return out;
}

double median_pairwise_bandwidth(const Matrix& embeddings) {
    int n = static_cast<int>(embeddings.rows());
    if (n < 2) throw contract_error("bandwidth heuristic needs at least 2 embeddings");
    std::vector<double> dists;
    dists.reserve(static_cast<size_t>(n) * (n - 1) / 2);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) dists.push_back((embeddings.row(i) - embeddings.row(j)).norm());
    size_t mid = (dists.size() - 1) / 2;  // lower median
    std::nth_element(dists.begin(), dists.begin() + mid, dists.end());
    double med = dists[mid];
    return med > 0.0 ? med : 1.0;  // degenerate all-identical pool
}

namespace {

Matrix rbf_kernel(const Matrix& embeddings, double bandwidth) {
    if (!(bandwidth > 0.0)) throw config_error("kernel bandwidth must be positive");
    int n = static_cast<int>(embeddings.rows());
    Matrix k(n, n);
    double denom = 2.0 * bandwidth * bandwidth;
    for (int i = 0; i < n; ++i) {
        k(i, i) = 1.0;
        for (int j = i + 1; j < n; ++j) {
            double d2 = (embeddings.row(i) - embeddings.row(j)).squaredNorm();
            k(i, j) = k(j, i) = std::exp(-d2 / denom);
        }
    }
    return k;
}

}  // namespace

double subset_mmd(const Matrix& embeddings, std::span<const int> indices, double bandwidth) {
    int n = static_cast<int>(embeddings.rows());
    if (indices.empty()) throw contract_error("subset_mmd: empty subset");
    for (int idx : indices)
        if (idx < 0 || idx >= n)
            throw index_error("subset index " + std::to_string(idx) + " out of range");
    Matrix k = rbf_kernel(embeddings, bandwidth);
    double ss = 0.0, sp = 0.0;
    for (int a : indices) {
        for (int b : indices) ss += k(a, b);
        for (int p = 0; p < n; ++p) sp += k(a, p);
    }
    double pp = k.sum();
    double m = static_cast<double>(indices.size());
    double nn = static_cast<double>(n);
    return ss / (m * m) - 2.0 * sp / (m * nn) + pp / (nn * nn);
}

MmdSelection select_hr_mmd(const Matrix& embeddings, int n_select, double bandwidth, Rng& rng) {
    int n = static_cast<int>(embeddings.rows());
    if (n < 1) throw config_error("selection pool is empty");
    if (n_select < 1 || n_select > n)
        throw config_error("cannot select " + std::to_string(n_select) + " of " +
                           std::to_string(n) + " samples");
    Matrix k = rbf_kernel(embeddings, bandwidth);
    Vector pool_mean = k.rowwise().mean();  // mean_p k(j, p)
    double pp = k.mean();

    std::vector<char> taken(n, 0);
    MmdSelection sel;
    sel.indices.reserve(n_select);

    auto mmd_after = [&](double ss, double sp_mean_sum, int m) {
        double dm = static_cast<double>(m);
        return ss / (dm * dm) - 2.0 * sp_mean_sum / dm + pp;
    };

    double ss = 0.0;            // sum of k over selected x selected (diagonal included)
    double sp_mean_sum = 0.0;   // sum over selected of mean_p k(s, p)
    std::vector<double> k_sel_sum(n, 0.0);  // per candidate: sum of k(j, s) over selected

    int first = rng.uniform_int(n);
    taken[first] = 1;
    sel.indices.push_back(first);
    ss = k(first, first);
    sp_mean_sum = pool_mean[first];
    for (int j = 0; j < n; ++j) k_sel_sum[j] = k(j, first);
    sel.mmd_trace.push_back(mmd_after(ss, sp_mean_sum, 1));

    while (static_cast<int>(sel.indices.size()) < n_select) {
        int m = static_cast<int>(sel.indices.size()) + 1;
        int best = -1;
        double best_val = 0.0;
        for (int j = 0; j < n; ++j) {
            if (taken[j]) continue;
            double cand =
                mmd_after(ss + 2.0 * k_sel_sum[j] + k(j, j), sp_mean_sum + pool_mean[j], m);
            if (best < 0 || cand < best_val) {
                best = j;
                best_val = cand;
            }
        }
        taken[best] = 1;
        sel.indices.push_back(best);
        ss += 2.0 * k_sel_sum[best] + k(best, best);
        sp_mean_sum += pool_mean[best];
        for (int j = 0; j < n; ++j) k_sel_sum[j] += k(j, best);
        sel.mmd_trace.push_back(best_val);
    }
    sel.mmd = sel.mmd_trace.back();
    return sel;
}

}  // namespace meshsr::datagen
