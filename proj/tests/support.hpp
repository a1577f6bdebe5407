#pragma once

// Shared test helpers: the finite-difference gradient oracle and small
// random-input builders. The oracle only relies on forward evaluation, so it
// checks every backward rule independently of how it is implemented.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "meshsr/common.hpp"
#include "meshsr/grad.hpp"
#include "meshsr/meshcore.hpp"

namespace testutil {

using meshsr::Rng;
namespace mesh = meshsr::mesh;
using meshsr::grad::Matrix;
using meshsr::grad::ParamStore;
using meshsr::grad::Vector;

inline Matrix random_matrix(int rows, int cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Matrix m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = rng.uniform(lo, hi);
    return m;
}

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst = "";

    bool ok(double tol = 1e-5) const { return max_rel_err <= tol; }
};

// Central differences with step h on every component of every parameter.
// The relative-error denominator is floored at 1e-3 so structurally tiny
// components are compared absolutely at 1e-8 instead of amplifying
// finite-difference noise.
inline GradCheckReport finite_difference_check(ParamStore& params,
                                               const std::vector<Matrix>& analytic,
                                               const std::function<double()>& loss,
                                               double h = 1e-6) {
    GradCheckReport report;
    for (int i = 0; i < params.count(); ++i) {
        Matrix& p = params.value(i);
        const Matrix& a = analytic[static_cast<std::size_t>(i)];
        for (Eigen::Index r = 0; r < p.rows(); ++r) {
            for (Eigen::Index c = 0; c < p.cols(); ++c) {
                double saved = p(r, c);
                p(r, c) = saved + h;
                double up = loss();
                p(r, c) = saved - h;
                double down = loss();
                p(r, c) = saved;
                double numeric = (up - down) / (2.0 * h);
                double denom = std::max({1e-3, std::abs(numeric), std::abs(a(r, c))});
                double rel = std::abs(numeric - a(r, c)) / denom;
                if (rel > report.max_rel_err) {
                    report.max_rel_err = rel;
                    report.worst = params.name(i) + "(" + std::to_string(r) + "," +
                                   std::to_string(c) + "): analytic=" + std::to_string(a(r, c)) +
                                   " numeric=" + std::to_string(numeric);
                }
            }
        }
    }
    return report;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    return (a - b).cwiseAbs().maxCoeff();
}

// Nudges every parameter off special values (zero-initialized biases and
// decoder tails). Zero biases can park ReLU pre-activations exactly on the
// kink, where central differences measure half the one-sided slope and no
// longer agree with the subgradient convention; generic points avoid that.
inline void jitter_params(ParamStore& params, Rng& rng, double amp = 0.05) {
    for (int i = 0; i < params.count(); ++i) {
        Matrix& v = params.value(i);
        v += random_matrix(static_cast<int>(v.rows()), static_cast<int>(v.cols()), rng, -amp, amp);
    }
}

// Random loop-free undirected edge set over n nodes, emitted as directed
// (src, dst) pairs in both directions.
inline void random_directed_edges(int n, int undirected, Rng& rng, std::vector<int>& src,
                                  std::vector<int>& dst) {
    src.clear();
    dst.clear();
    for (int e = 0; e < undirected; ++e) {
        int a = rng.uniform_int(n);
        int b = rng.uniform_int(n - 1);
        if (b >= a) ++b;
        src.push_back(a);
        dst.push_back(b);
        src.push_back(b);
        dst.push_back(a);
    }
}

inline meshsr::mesh::Mesh jittered_mesh(const Matrix& base,
                                        const std::vector<std::array<int, 2>>& edges, Rng& rng,
                                        double amp) {
    meshsr::mesh::Mesh m;
    m.positions = base + random_matrix(static_cast<int>(base.rows()), 2, rng, -amp, amp);
    m.edges = edges;
    return m;
}

// d=1 field over small 2-D meshes: LR meshes with 4 nodes, HR meshes with 6.
// shared=true reuses one LR and one HR mesh everywhere; otherwise each sample
// jitters its own copies so cross-mesh projections are nontrivial.
inline meshsr::mesh::SplitDataset toy_dataset(int n_paired, int n_unpaired, std::uint64_t seed,
                                              bool shared) {
    Rng rng(seed);
    Matrix lr_base(4, 2);
    lr_base << 0.0, 0.0, 1.0, 0.1, 0.1, 1.0, 0.9, 0.9;
    std::vector<std::array<int, 2>> lr_edges = {{0, 1}, {1, 3}, {3, 2}, {2, 0}, {0, 3}};
    Matrix hr_base(6, 2);
    hr_base << 0.0, 0.0, 0.5, 0.05, 1.0, 0.1, 0.05, 0.5, 0.55, 0.5, 0.95, 0.95;
    std::vector<std::array<int, 2>> hr_edges = {{0, 1}, {1, 2}, {0, 3}, {3, 4},
                                                {4, 5}, {1, 4}, {2, 5}};
    meshsr::mesh::SplitDataset ds;
    auto add_mesh = [&](const Matrix& base, const auto& edges) {
        ds.meshes.push_back(jittered_mesh(base, edges, rng, shared ? 0.0 : 0.03));
        return static_cast<int>(ds.meshes.size()) - 1;
    };
    int shared_lr = add_mesh(lr_base, lr_edges);
    int shared_hr = add_mesh(hr_base, hr_edges);

    auto field = [&](int rows) { return random_matrix(rows, 1, rng, -1.0, 1.0); };
    for (int i = 0; i < n_paired; ++i) {
        int lm = shared ? shared_lr : add_mesh(lr_base, lr_edges);
        int hm = shared ? shared_hr : add_mesh(hr_base, hr_edges);
        meshsr::mesh::PairedSample p;
        p.lr = {lm, field(4), random_matrix(2, 1, rng).col(0)};
        p.hr = {hm, field(6), p.lr.mu};
        ds.paired.push_back(std::move(p));
    }
    for (int i = 0; i < n_unpaired; ++i) {
        int lm = shared ? shared_lr : add_mesh(lr_base, lr_edges);
        int hm = shared ? shared_hr : add_mesh(hr_base, hr_edges);
        ds.unpaired.push_back({{lm, field(4), random_matrix(2, 1, rng).col(0)}, hm});
    }
    ds.stats = mesh::compute_stats(ds);
    ds.generator_json = "{\"kind\":\"toy\"}";
    return ds;
}

}  // namespace testutil
