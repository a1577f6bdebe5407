#pragma once

#include <span>
#include <string>
#include <vector>

#include "meshsr/grad.hpp"

// Message-passing layers over directed edge lists, each with two optional
// mean-subtraction steps: message-level centering (applied to the aggregated
// messages before the node update) and node-level centering (applied to the
// node embeddings as the last step of the layer).

namespace meshsr::mpnn {

using grad::Matrix;
using grad::ParamStore;
using grad::Tape;
using grad::Var;
using grad::Vector;

enum class MpnnKind { gcn, sage, gin, mgn };

MpnnKind parse_mpnn_kind(const std::string& name);  // config error on unknown names
std::string to_string(MpnnKind kind);

// A chain of affine layers with ReLU between them and none after the last.
// Parameters live in a ParamStore; the block stores their ids so it can be
// re-bound to a fresh tape every step.
struct MlpBlock {
    std::vector<int> weights;  // one id per affine layer, applied in order
    std::vector<int> biases;   // matching bias rows (1 x out), zero-initialized

    // n_hidden hidden layers of width `hidden`; n_hidden = 0 degenerates to a
    // single affine map in_dim -> out_dim.
    static MlpBlock create(ParamStore& params, Rng& rng, const std::string& prefix, int in_dim,
                           int hidden, int out_dim, int n_hidden = 2);

    int in_dim(const ParamStore& params) const;
    int out_dim(const ParamStore& params) const;
};

Var mlp_forward(Tape& t, const MlpBlock& block, std::span<const Var> watched, Var x);

// Symmetric-normalization weights 1/sqrt(deg_i * deg_j) for the edge list
// augmented with one self-loop per node; degrees count the self-loops. The
// result holds one weight per input edge followed by one per self-loop in
// node order, matching the augmented list the gcn layer builds internally.
std::vector<double> gcn_edge_weights(const std::vector<int>& src, const std::vector<int>& dst,
                                     int n);

struct LayerOut {
    Var x;  // updated node embeddings [n x hidden]
    Var e;  // updated edge embeddings (mgn only; invalid handle otherwise)
};

struct MpnnLayer {
    MpnnKind kind = MpnnKind::mgn;
    bool node_centering = false;
    bool message_centering = false;
    int hidden = 0;
    int edge_in_dim = 0;  // mgn: width of the incoming edge features

    int theta = -1;         // gcn weight
    int w1 = -1, w2 = -1;   // sage self / neighbor weights
    int eps = -1;           // gin learnable epsilon (1x1, zero-initialized)
    MlpBlock mlp;           // gin update MLP
    MlpBlock mlp_e, mlp_x;  // mgn edge / node MLPs

    // edge_in_dim < 0 defaults to `hidden`. The gcn variant fuses aggregation
    // and update into a single step, so message-level centering has no
    // separate site to act on and is rejected as a configuration error.
    static MpnnLayer create(MpnnKind kind, ParamStore& params, Rng& rng,
                            const std::string& prefix, int hidden, bool node_centering,
                            bool message_centering, int edge_in_dim = -1);
};

// One message-passing step. `src`/`dst` are parallel arrays of directed
// edges; aggregation happens at the destination node. `e` is required for
// mgn (contract error when missing) and ignored by the other variants.
LayerOut layer_forward(Tape& t, const MpnnLayer& layer, std::span<const Var> watched, Var x,
                       const std::vector<int>& src, const std::vector<int>& dst, Var e = {});

}  // namespace meshsr::mpnn
