#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "meshsr/meshcore.hpp"

// Synthetic dataset factories. The Poisson family provides genuine LR/HR
// discrepancy by solving the same PDE instance on a coarse and a fine grid;
// the jitter family provides per-sample mesh geometry variation with analytic
// fields; MMD-greedy selection picks which samples deserve HR labels.

namespace meshsr::datagen {

using grad::Matrix;
using grad::Vector;
using mesh::FieldSample;
using mesh::Mesh;
using mesh::SplitDataset;

// Unit-square grids, Gaussian-bump source f(x,y) = A exp(-((x-cx)^2+(y-cy)^2)/w^2)
// with mu = (cx, cy, w, A) drawn uniformly from the ranges below, homogeneous
// Dirichlet boundary, SOR iteration on the 5-point stencil.
struct PoissonSpec {
    int n_lr = 17;
    int n_hr = 33;  // n_hr - 1 must be a multiple of n_lr - 1
    double tolerance = 1e-10;
    double omega = 1.9;
    long max_iterations = 100000;
    double center_lo = 0.25, center_hi = 0.75;
    double width_lo = 0.08, width_hi = 0.25;
    double amp_lo = 1.0, amp_hi = 5.0;

    void validate() const;  // config error on violation
};

// n x n nodes over [0,1]^2, row-major (node = iy*n + ix), edges: grid
// 4-connectivity plus the same diagonal of every cell (triangulated).
Mesh make_grid_mesh(int n);

// mu = (cx, cy, w, A), four uniform draws in spec ranges, in that order.
Vector draw_poisson_mu(const PoissonSpec& spec, Rng& rng);

// A exp(-((x-cx)^2+(y-cy)^2)/w^2) at each position row. Serves as the Poisson
// source term and as the analytic field of the jitter family.
Matrix gaussian_bump(const Vector& mu, const Matrix& positions);

// Solves Laplacian(u) = f on the n x n grid for an arbitrary nodal source
// (n*n x 1, row-major grid order), u = 0 on the boundary, SOR-iterated until
// the max interior residual is at most spec.tolerance. Throws a solver error
// naming the residual when the iteration cap is hit. Convergence oracles with
// manufactured sources enter here.
Matrix solve_poisson_source(const PoissonSpec& spec, const Matrix& f, int n);

// Max interior |stencil(u) - f| for an arbitrary nodal source.
double poisson_source_residual(const Matrix& f, int n, const Matrix& u);

// solve_poisson_source with f = gaussian_bump(mu, grid positions).
// The returned sample has mesh_id = -1; callers assign the grid mesh id.
FieldSample solve_poisson_fd(const PoissonSpec& spec, const Vector& mu, int n);

// Max interior |stencil(u) - f(.; mu)|; independent check of the solver contract.
double poisson_max_residual(const PoissonSpec& spec, const Vector& mu, int n, const Matrix& u);

// N mu-draws (stream derived per index): LR solutions for all samples, HR
// solutions only for the first n_paired. Deterministic under seed.
SplitDataset gen_poisson_dataset(const PoissonSpec& spec, int n_samples, int n_paired,
                                 std::uint64_t seed);

// Jittered-grid family: every sample gets its own LR and HR mesh (interior
// nodes displaced by at most amplitude * spacing), field values are the
// analytic bump evaluated at the jittered nodes, and LR fields are optionally
// smoothed by a 1-ring neighbor average to mimic coarse-solution smearing.
struct JitterSpec {
    int n_lr = 5;
    int n_hr = 9;
    double amplitude = 0.25;  // fraction of spacing; must stay below 0.5
    bool smooth_lr = true;
    double center_lo = 0.25, center_hi = 0.75;
    double width_lo = 0.15, width_hi = 0.45;
    double amp_lo = 1.0, amp_hi = 5.0;

    void validate() const;
};

// (value + neighbor values) / (1 + degree) per node, neighbors by mesh edge.
Matrix one_ring_average(const Mesh& m, const Matrix& values);

SplitDataset gen_jitter_dataset(const JitterSpec& spec, int n_samples, int n_paired,
                                std::uint64_t seed);

// Flattened normalized LR fields of the paired pool, one row per paired
// sample: the embedding space for HR-subset selection.
Matrix paired_lr_embeddings(const SplitDataset& ds);

// Median pairwise Euclidean distance between embedding rows (the RBF
// bandwidth heuristic). Positive result; contract error on < 2 rows.
double median_pairwise_bandwidth(const Matrix& embeddings);

// Squared MMD between the subset and the whole pool under an RBF kernel
// exp(-|x-y|^2 / (2 bandwidth^2)), biased (self-term-inclusive) estimator.
double subset_mmd(const Matrix& embeddings, std::span<const int> indices, double bandwidth);

struct MmdSelection {
    std::vector<int> indices;
    double mmd = 0.0;                // squared MMD of the final subset
    std::vector<double> mmd_trace;   // objective after each greedy addition
};

// Greedy kernel herding: the first index is drawn from rng, every later index
// is the unselected candidate minimizing the subset's squared MMD against the
// full pool (ties to the smallest index).
MmdSelection select_hr_mmd(const Matrix& embeddings, int n_select, double bandwidth, Rng& rng);

}  // namespace meshsr::datagen
