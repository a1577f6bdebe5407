#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "meshsr/common.hpp"
#include "meshsr/grad.hpp"

// Mesh/field data model, spatial indexing, inverse-square-distance kNN
// projection between arbitrary node sets, and the paired/unpaired dataset
// containers with their on-disk schema.

namespace meshsr::mesh {

using grad::Matrix;
using grad::RowMixPlan;
using grad::Vector;

struct Mesh {
    Matrix positions;                       // n x D node coordinates
    std::vector<std::array<int, 2>> edges;  // undirected, loop-free

    int nodes() const { return static_cast<int>(positions.rows()); }
    int dim() const { return static_cast<int>(positions.cols()); }
    void validate() const;
};

struct FieldSample {
    int mesh_id = -1;
    Matrix values;  // n x d solution values
    Vector mu;      // PDE-instance parameters
};

struct PairedSample {
    FieldSample lr;
    FieldSample hr;
};

// Unpaired entries carry the HR mesh geometry (predictions need somewhere to
// live) but, by construction, no HR field values.
struct UnpairedSample {
    FieldSample lr;
    int hr_mesh_id = -1;
};

// Per-column z-score statistics, computed over the LR training pool.
struct NormStats {
    Vector field_mean, field_std;  // length d
    Vector pos_mean, pos_std;      // length D

    bool valid() const { return field_mean.size() > 0 && pos_mean.size() > 0; }
    Matrix normalize_fields(const Matrix& values) const;
    Matrix normalize_positions(const Matrix& positions) const;
};

struct SplitDataset {
    std::vector<Mesh> meshes;
    std::vector<PairedSample> paired;
    std::vector<UnpairedSample> unpaired;
    NormStats stats;
    std::string generator_json;  // provenance echo, stored verbatim in the manifest

    int total() const { return static_cast<int>(paired.size() + unpaired.size()); }
    int field_dim() const;
    int space_dim() const;
    const Mesh& mesh(int id) const;
    void validate() const;
};

// Stats from the LR pool (paired LR + unpaired LR), one contribution per
// sample row. Near-constant columns get std clamped to 1 to avoid blow-up.
NormStats compute_stats(const SplitDataset& ds);

// Uniform-grid spatial hash over a fixed source point set. Exact k-nearest
// queries (verified against brute force); ties broken by lower node index.
class KnnIndex {
public:
    static KnnIndex build(const Matrix& positions);

    // min(k, n) nearest sources, ascending by distance.
    std::vector<std::pair<int, double>> query(const Vector& point, int k) const;

    int size() const { return static_cast<int>(positions_.rows()); }
    double cell_size() const { return cell_; }

private:
    struct KeyHash {
        std::size_t operator()(const std::vector<int>& key) const {
            return static_cast<std::size_t>(
                fnv1a64(key.data(), key.size() * sizeof(int)));
        }
    };

    void insert_all(double cell);
    std::vector<int> cell_of(const Vector& point) const;

    Matrix positions_;
    Vector origin_;
    double cell_ = 1.0;
    std::unordered_map<std::vector<int>, std::vector<int>, KeyHash> cells_;
};

// Interpolation plan from source positions onto target positions with
// inverse-squared-distance weights w_i = 1/d_i^2 (normalized to sum 1). A
// target within 1e-12 of a source copies that source row exactly.
RowMixPlan build_interp_plan(const Matrix& src_pos, const Matrix& dst_pos, int k);

// Value-level application of a plan / convenience one-shot projection.
Matrix apply_plan(const Matrix& values, const RowMixPlan& plan);
Matrix knn_interpolate(const Matrix& values, const Matrix& src_pos, const Matrix& dst_pos,
                       int k);

struct GraphFeatures {
    Matrix node_features;   // n x (d+D), normalized (empty for mesh-only graphs)
    Matrix edge_features;   // 2E x 2D, normalized source/target positions
    std::vector<int> edge_src, edge_dst;  // directed, both directions per stored edge
};

// Node features are [normalized values | normalized positions]; each stored
// undirected edge is emitted in both directions.
GraphFeatures build_graph_features(const FieldSample& lr, const Mesh& m, const NormStats& stats);

// Edge-only variant for meshes without nodal values (the HR side of the
// extractor); node_features stays empty.
GraphFeatures build_mesh_graph(const Mesh& m, const NormStats& stats);

// On-disk schema: <dir>/manifest.json (counts, dims, stats, generator
// provenance), <dir>/meshes.jsonl, <dir>/samples.jsonl. All numbers decimal
// with full 64-bit round-trip precision.
void save_dataset(const SplitDataset& ds, const std::filesystem::path& dir);
SplitDataset load_dataset(const std::filesystem::path& dir);

// FNV-1a over the two data files; stable across reruns with equal content.
std::string dataset_fingerprint(const std::filesystem::path& dir);

}  // namespace meshsr::mesh
