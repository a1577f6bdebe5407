#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "meshsr/meshcore.hpp"
#include "meshsr/mpnn.hpp"

// The two-model assembly: a primary field model (LR sample -> HR field) and
// an auxiliary difference model (two LR samples -> difference of their HR
// fields), both reading from one shared feature extractor so extractor
// gradients accumulate from every prediction in a step.

namespace meshsr::models {

using grad::Matrix;
using grad::ParamStore;
using grad::RowMixPlan;
using grad::Tape;
using grad::Var;
using grad::Vector;

struct ModelConfig {
    mpnn::MpnnKind kind = mpnn::MpnnKind::mgn;
    bool node_centering = true;
    bool message_centering = true;
    int hidden = 30;
    int lr_layers = 3;  // message-passing depth on the LR mesh
    int hr_layers = 3;  // message-passing depth on the HR mesh
    int k = 3;          // neighbors for every interpolation (field and latent)

    void validate() const;  // config error on contradiction
};

// Encoder + LR processor + latent upsampler + HR processor. Both decoders
// read the same instance, so its parameters receive gradients from both.
struct SharedExtractor {
    mpnn::MlpBlock encoder;
    std::vector<mpnn::MpnnLayer> lr_stack;
    std::vector<mpnn::MpnnLayer> hr_stack;
};

struct ModelParams {
    ModelConfig config;
    int field_dim = 0;  // d, solution columns
    int space_dim = 0;  // D, coordinate columns
    SharedExtractor shared;
    mpnn::MlpBlock decoder_f;
    mpnn::MlpBlock decoder_g;
    ParamStore store;

    // Registration order is fixed (encoder, LR stack, HR stack, decoders) so
    // checkpoints and optimizer state line up by index. Both decoders get a
    // zero final layer: at initialization every prediction reduces to its
    // interpolation baseline, which training then improves on.
    static ModelParams create(const ModelConfig& config, int field_dim, int space_dim, Rng& rng);
};

// Lazily built, memoized geometry: per-mesh directed edges with normalized
// edge features, and cross-mesh interpolation plans keyed by mesh-id pair.
// Plans depend only on node positions, so one cache serves a whole run.
class GeometryCache {
public:
    GeometryCache(const mesh::SplitDataset& ds, int k);

    const mesh::GraphFeatures& mesh_graph(int mesh_id);
    const RowMixPlan& plan(int src_mesh_id, int dst_mesh_id);
    const mesh::SplitDataset& dataset() const { return *ds_; }
    int k() const { return k_; }

private:
    const mesh::SplitDataset* ds_;
    int k_;
    std::map<int, mesh::GraphFeatures> graphs_;
    std::map<std::pair<int, int>, RowMixPlan> plans_;
};

// One LR sample bound to the HR mesh its prediction lives on; field values
// and node features are pre-normalized.
struct BoundSample {
    Matrix node_features;  // n_l x (d + D)
    Matrix lr_values;      // n_l x d, normalized
    int lr_mesh_id = -1;
    int hr_mesh_id = -1;
};

BoundSample bind_sample(GeometryCache& geo, const mesh::FieldSample& lr, int hr_mesh_id);

// Latent HR embeddings [n_h x hidden]: encode, LR message passing, latent
// interpolation onto the HR mesh, HR message passing.
Var extract(Tape& t, const ModelParams& m, std::span<const Var> w, GeometryCache& geo,
            const BoundSample& s);

// Field prediction from a latent: decoded correction plus the interpolated
// input field (the prediction is a learned residual on that baseline).
Var decode_f(Tape& t, const ModelParams& m, std::span<const Var> w, GeometryCache& geo,
             Var latent, const BoundSample& s);

// Difference prediction from two latents: decode(z_r - align(z_s)) plus the
// difference of the two interpolated input fields on r's HR mesh.
Var decode_g(Tape& t, const ModelParams& m, std::span<const Var> w, Var z_r, Var z_s,
             const RowMixPlan& hr_s_to_r, const Matrix& residual);

// Conveniences composing extract with the decoders. Training code calls
// extract once per sample and reuses the latents instead.
Var forward_f(Tape& t, const ModelParams& m, std::span<const Var> w, GeometryCache& geo,
              const BoundSample& s);
Var forward_g(Tape& t, const ModelParams& m, std::span<const Var> w, GeometryCache& geo,
              const BoundSample& r, const BoundSample& s);

// Ground-truth difference on r's HR mesh, in normalized units:
// normalize(u_r) - interpolate(normalize(u_s); mesh_s -> mesh_r).
Matrix target_g(GeometryCache& geo, const mesh::FieldSample& hr_r, const mesh::FieldSample& hr_s);

// Checkpoint: one JSON document holding the config echo, a named tensor
// table (name, shape, offset) and a flat decimal value array. Doubles are
// written with round-trip precision, so load restores parameters bitwise.
void save_checkpoint(const ModelParams& m, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace meshsr::models
