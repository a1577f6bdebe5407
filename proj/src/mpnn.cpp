#include "meshsr/mpnn.hpp"

#include <cmath>

namespace meshsr::mpnn {

namespace {

void check_edges(const std::vector<int>& src, const std::vector<int>& dst, int n) {
    if (src.size() != dst.size())
        throw dimension_error("layer_forward: src/dst edge arrays differ in length");
    for (std::size_t e = 0; e < src.size(); ++e) {
        if (src[e] < 0 || src[e] >= n || dst[e] < 0 || dst[e] >= n)
            throw index_error("layer_forward: edge index out of range at edge " +
                              std::to_string(e));
    }
}

Var maybe_center(Tape& t, Var v, bool enabled) { return enabled ? grad::center_rows(t, v) : v; }

}  // namespace

MpnnKind parse_mpnn_kind(const std::string& name) {
    if (name == "gcn") return MpnnKind::gcn;
    if (name == "sage") return MpnnKind::sage;
    if (name == "gin") return MpnnKind::gin;
    if (name == "mgn") return MpnnKind::mgn;
    throw config_error("unknown mpnn kind '" + name + "' (expected gcn|sage|gin|mgn)");
}

std::string to_string(MpnnKind kind) {
    switch (kind) {
        case MpnnKind::gcn: return "gcn";
        case MpnnKind::sage: return "sage";
        case MpnnKind::gin: return "gin";
        case MpnnKind::mgn: return "mgn";
    }
    throw contract_error("to_string: invalid mpnn kind");
}

MlpBlock MlpBlock::create(ParamStore& params, Rng& rng, const std::string& prefix, int in_dim,
                          int hidden, int out_dim, int n_hidden) {
    if (in_dim <= 0 || out_dim <= 0 || n_hidden < 0 || (n_hidden > 0 && hidden <= 0))
        throw config_error("MlpBlock: dimensions must be positive");
    MlpBlock block;
    int d = in_dim;
    for (int layer = 0; layer <= n_hidden; ++layer) {
        int out = (layer == n_hidden) ? out_dim : hidden;
        std::string tag = prefix + "." + std::to_string(layer);
        block.weights.push_back(params.add(tag + ".w", grad::uniform_init(d, out, d, rng)));
        block.biases.push_back(params.add(tag + ".b", Matrix::Zero(1, out)));
        d = out;
    }
    return block;
}

int MlpBlock::in_dim(const ParamStore& params) const {
    return static_cast<int>(params.value(weights.front()).rows());
}

int MlpBlock::out_dim(const ParamStore& params) const {
    return static_cast<int>(params.value(weights.back()).cols());
}

Var mlp_forward(Tape& t, const MlpBlock& block, std::span<const Var> watched, Var x) {
    if (block.weights.empty()) throw contract_error("mlp_forward: block has no layers");
    const Matrix& first = t.value(watched[static_cast<std::size_t>(block.weights.front())]);
    if (t.value(x).cols() != first.rows())
        throw dimension_error("mlp_forward: input width " + std::to_string(t.value(x).cols()) +
                              " does not match first layer " + std::to_string(first.rows()));
    Var h = x;
    for (std::size_t layer = 0; layer < block.weights.size(); ++layer) {
        Var w = watched[static_cast<std::size_t>(block.weights[layer])];
        Var b = watched[static_cast<std::size_t>(block.biases[layer])];
        h = grad::add_row_vector(t, grad::matmul(t, h, w), b);
        if (layer + 1 < block.weights.size()) h = grad::relu(t, h);
    }
    return h;
}

std::vector<double> gcn_edge_weights(const std::vector<int>& src, const std::vector<int>& dst,
                                     int n) {
    check_edges(src, dst, n);
    std::vector<double> deg(static_cast<std::size_t>(n), 1.0);  // self-loop contribution
    for (int d : dst) deg[static_cast<std::size_t>(d)] += 1.0;
    std::vector<double> weights;
    weights.reserve(src.size() + static_cast<std::size_t>(n));
    for (std::size_t e = 0; e < src.size(); ++e)
        weights.push_back(1.0 / std::sqrt(deg[static_cast<std::size_t>(dst[e])] *
                                          deg[static_cast<std::size_t>(src[e])]));
    for (int i = 0; i < n; ++i) weights.push_back(1.0 / deg[static_cast<std::size_t>(i)]);
    return weights;
}

MpnnLayer MpnnLayer::create(MpnnKind kind, ParamStore& params, Rng& rng,
                            const std::string& prefix, int hidden, bool node_centering,
                            bool message_centering, int edge_in_dim) {
    if (hidden <= 0) throw config_error("MpnnLayer: hidden width must be positive");
    if (kind == MpnnKind::gcn && message_centering)
        throw config_error(
            "MpnnLayer: gcn fuses aggregation and update, message-level centering does not "
            "apply; use node-level centering only");
    MpnnLayer layer;
    layer.kind = kind;
    layer.node_centering = node_centering;
    layer.message_centering = message_centering;
    layer.hidden = hidden;
    layer.edge_in_dim = edge_in_dim < 0 ? hidden : edge_in_dim;
    switch (kind) {
        case MpnnKind::gcn:
            layer.theta =
                params.add(prefix + ".theta", grad::uniform_init(hidden, hidden, hidden, rng));
            break;
        case MpnnKind::sage:
            layer.w1 = params.add(prefix + ".w1", grad::uniform_init(hidden, hidden, hidden, rng));
            layer.w2 = params.add(prefix + ".w2", grad::uniform_init(hidden, hidden, hidden, rng));
            break;
        case MpnnKind::gin:
            layer.mlp = MlpBlock::create(params, rng, prefix + ".mlp", hidden, hidden, hidden);
            layer.eps = params.add(prefix + ".eps", Matrix::Zero(1, 1));
            break;
        case MpnnKind::mgn:
            layer.mlp_e = MlpBlock::create(params, rng, prefix + ".mlp_e",
                                           2 * hidden + layer.edge_in_dim, hidden, hidden);
            layer.mlp_x =
                MlpBlock::create(params, rng, prefix + ".mlp_x", 2 * hidden, hidden, hidden);
            break;
    }
    return layer;
}

LayerOut layer_forward(Tape& t, const MpnnLayer& layer, std::span<const Var> watched, Var x,
                       const std::vector<int>& src, const std::vector<int>& dst, Var e) {
    const int n = static_cast<int>(t.value(x).rows());
    check_edges(src, dst, n);

    switch (layer.kind) {
        case MpnnKind::gcn: {
            // x'_i = sum_j w_ij (x_j Theta) over neighbors plus the self-loop.
            std::vector<int> aug_src = src, aug_dst = dst;
            for (int i = 0; i < n; ++i) {
                aug_src.push_back(i);
                aug_dst.push_back(i);
            }
            std::vector<double> w = gcn_edge_weights(src, dst, n);
            Var xt = grad::matmul(t, x, watched[static_cast<std::size_t>(layer.theta)]);
            Var msgs = grad::gather_rows(t, xt, aug_src);
            msgs = grad::scale_rows(t, msgs, Eigen::Map<const Vector>(w.data(),
                                                                      static_cast<long>(w.size())));
            Var out = grad::segment_sum(t, msgs, aug_dst, n);
            return {maybe_center(t, out, layer.node_centering), e};
        }
        case MpnnKind::sage: {
            Var msg = grad::gather_rows(t, x, src);
            Var agg = grad::segment_mean(t, msg, dst, n);
            agg = maybe_center(t, agg, layer.message_centering);
            Var out = grad::add(t, grad::matmul(t, x, watched[static_cast<std::size_t>(layer.w1)]),
                                grad::matmul(t, agg, watched[static_cast<std::size_t>(layer.w2)]));
            return {maybe_center(t, out, layer.node_centering), e};
        }
        case MpnnKind::gin: {
            Var msg = grad::gather_rows(t, x, src);
            Var agg = grad::segment_sum(t, msg, dst, n);
            agg = maybe_center(t, agg, layer.message_centering);
            Var one_plus_eps =
                grad::add_const(t, watched[static_cast<std::size_t>(layer.eps)], 1.0);
            Var pre = grad::add(t, grad::mul_scalar(t, x, one_plus_eps), agg);
            Var out = mlp_forward(t, layer.mlp, watched, pre);
            return {maybe_center(t, out, layer.node_centering), e};
        }
        case MpnnKind::mgn: {
            if (!e.valid())
                throw contract_error("layer_forward: mgn requires edge features");
            if (t.value(e).rows() != static_cast<long>(src.size()))
                throw dimension_error("layer_forward: edge feature rows must match edge count");
            Var x_i = grad::gather_rows(t, x, dst);  // receiving node
            Var x_j = grad::gather_rows(t, x, src);  // sending node
            Var e_new = mlp_forward(t, layer.mlp_e, watched, grad::concat_cols(t, x_i, x_j, e));
            Var agg = grad::segment_sum(t, e_new, dst, n);
            agg = maybe_center(t, agg, layer.message_centering);
            Var out = mlp_forward(t, layer.mlp_x, watched, grad::concat_cols(t, x, agg));
            return {maybe_center(t, out, layer.node_centering), e_new};
        }
    }
    throw contract_error("layer_forward: invalid mpnn kind");
}

}  // namespace meshsr::mpnn
