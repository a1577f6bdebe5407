#include "meshsr/models.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

namespace meshsr::models {

using nlohmann::json;

void ModelConfig::validate() const {
    if (hidden <= 0) throw config_error("model config: hidden width must be positive");
    if (lr_layers < 0 || hr_layers < 0)
        throw config_error("model config: layer counts must be non-negative");
    if (k < 1) throw config_error("model config: k must be at least 1");
    if (kind == mpnn::MpnnKind::gcn && message_centering)
        throw config_error(
            "model config: gcn supports node-level centering only; disable message centering");
}

ModelParams ModelParams::create(const ModelConfig& config, int field_dim, int space_dim,
                                Rng& rng) {
    config.validate();
    if (field_dim < 1 || space_dim < 1)
        throw config_error("model config: field and space dimensions must be positive");

    ModelParams m;
    m.config = config;
    m.field_dim = field_dim;
    m.space_dim = space_dim;

    m.shared.encoder = mpnn::MlpBlock::create(m.store, rng, "encoder", field_dim + space_dim,
                                              config.hidden, config.hidden);
    auto make_stack = [&](const std::string& prefix, int depth) {
        std::vector<mpnn::MpnnLayer> stack;
        for (int i = 0; i < depth; ++i) {
            // The first mgn layer of each stack consumes the raw geometric
            // edge features (two endpoint positions); later layers chain the
            // previous layer's edge embeddings.
            int edge_in = (i == 0) ? 2 * space_dim : config.hidden;
            stack.push_back(mpnn::MpnnLayer::create(config.kind, m.store, rng,
                                                    prefix + std::to_string(i), config.hidden,
                                                    config.node_centering,
                                                    config.message_centering, edge_in));
        }
        return stack;
    };
    m.shared.lr_stack = make_stack("lr", config.lr_layers);
    m.shared.hr_stack = make_stack("hr", config.hr_layers);

    m.decoder_f =
        mpnn::MlpBlock::create(m.store, rng, "decoder_f", config.hidden, config.hidden, field_dim);
    m.decoder_g =
        mpnn::MlpBlock::create(m.store, rng, "decoder_g", config.hidden, config.hidden, field_dim);
    m.store.value(m.decoder_f.weights.back()).setZero();
    m.store.value(m.decoder_g.weights.back()).setZero();
    return m;
}

GeometryCache::GeometryCache(const mesh::SplitDataset& ds, int k) : ds_(&ds), k_(k) {
    if (k < 1) throw config_error("geometry cache: k must be at least 1");
    if (!ds.stats.valid())
        throw config_error("geometry cache: dataset has no normalization statistics");
}

const mesh::GraphFeatures& GeometryCache::mesh_graph(int mesh_id) {
    auto it = graphs_.find(mesh_id);
    if (it == graphs_.end())
        it = graphs_.emplace(mesh_id, mesh::build_mesh_graph(ds_->mesh(mesh_id), ds_->stats))
                 .first;
    return it->second;
}

const RowMixPlan& GeometryCache::plan(int src_mesh_id, int dst_mesh_id) {
    auto key = std::make_pair(src_mesh_id, dst_mesh_id);
    auto it = plans_.find(key);
    if (it == plans_.end()) {
        RowMixPlan p = mesh::build_interp_plan(ds_->mesh(src_mesh_id).positions,
                                               ds_->mesh(dst_mesh_id).positions, k_);
        it = plans_.emplace(key, std::move(p)).first;
    }
    return it->second;
}

BoundSample bind_sample(GeometryCache& geo, const mesh::FieldSample& lr, int hr_mesh_id) {
    const mesh::SplitDataset& ds = geo.dataset();
    const mesh::Mesh& m = ds.mesh(lr.mesh_id);
    if (lr.values.rows() != m.positions.rows())
        throw dimension_error("bind_sample: field rows do not match mesh nodes");
    ds.mesh(hr_mesh_id);  // bounds check

    BoundSample b;
    b.lr_values = ds.stats.normalize_fields(lr.values);
    Matrix pos = ds.stats.normalize_positions(m.positions);
    b.node_features.resize(m.positions.rows(), b.lr_values.cols() + pos.cols());
    b.node_features << b.lr_values, pos;
    b.lr_mesh_id = lr.mesh_id;
    b.hr_mesh_id = hr_mesh_id;
    return b;
}

Var extract(Tape& t, const ModelParams& m, std::span<const Var> w, GeometryCache& geo,
            const BoundSample& s) {
    const bool mgn = m.config.kind == mpnn::MpnnKind::mgn;
    const mesh::GraphFeatures& lr_g = geo.mesh_graph(s.lr_mesh_id);
    const mesh::GraphFeatures& hr_g = geo.mesh_graph(s.hr_mesh_id);

    Var x = mpnn::mlp_forward(t, m.shared.encoder, w, t.constant(s.node_features));
    Var e = mgn ? t.constant(lr_g.edge_features) : Var{};
    for (const mpnn::MpnnLayer& layer : m.shared.lr_stack) {
        mpnn::LayerOut out = mpnn::layer_forward(t, layer, w, x, lr_g.edge_src, lr_g.edge_dst, e);
        x = out.x;
        e = out.e;
    }
    x = grad::row_mix(t, x, geo.plan(s.lr_mesh_id, s.hr_mesh_id));
    e = mgn ? t.constant(hr_g.edge_features) : Var{};
    for (const mpnn::MpnnLayer& layer : m.shared.hr_stack) {
        mpnn::LayerOut out = mpnn::layer_forward(t, layer, w, x, hr_g.edge_src, hr_g.edge_dst, e);
        x = out.x;
        e = out.e;
    }
    return x;
}

Var decode_f(Tape& t, const ModelParams& m, std::span<const Var> w, GeometryCache& geo,
             Var latent, const BoundSample& s) {
    Matrix base = mesh::apply_plan(s.lr_values, geo.plan(s.lr_mesh_id, s.hr_mesh_id));
    return grad::add(t, mpnn::mlp_forward(t, m.decoder_f, w, latent), t.constant(base));
}

Var decode_g(Tape& t, const ModelParams& m, std::span<const Var> w, Var z_r, Var z_s,
             const RowMixPlan& hr_s_to_r, const Matrix& residual) {
    Var aligned = grad::row_mix(t, z_s, hr_s_to_r);
    Var decoded = mpnn::mlp_forward(t, m.decoder_g, w, grad::sub(t, z_r, aligned));
    return grad::add(t, decoded, t.constant(residual));
}

Var forward_f(Tape& t, const ModelParams& m, std::span<const Var> w, GeometryCache& geo,
              const BoundSample& s) {
    return decode_f(t, m, w, geo, extract(t, m, w, geo, s), s);
}

Var forward_g(Tape& t, const ModelParams& m, std::span<const Var> w, GeometryCache& geo,
              const BoundSample& r, const BoundSample& s) {
    Var z_r = extract(t, m, w, geo, r);
    Var z_s = extract(t, m, w, geo, s);
    Matrix base_r = mesh::apply_plan(r.lr_values, geo.plan(r.lr_mesh_id, r.hr_mesh_id));
    Matrix base_s = mesh::apply_plan(s.lr_values, geo.plan(s.lr_mesh_id, r.hr_mesh_id));
    return decode_g(t, m, w, z_r, z_s, geo.plan(s.hr_mesh_id, r.hr_mesh_id), base_r - base_s);
}

Matrix target_g(GeometryCache& geo, const mesh::FieldSample& hr_r,
                const mesh::FieldSample& hr_s) {
    const mesh::NormStats& stats = geo.dataset().stats;
    Matrix r = stats.normalize_fields(hr_r.values);
    Matrix s = stats.normalize_fields(hr_s.values);
    return r - mesh::apply_plan(s, geo.plan(hr_s.mesh_id, hr_r.mesh_id));
}

// Checkpoint I/O --------------------------------------------------------------

namespace {

json config_to_json(const ModelConfig& c) {
    return json{{"mpnn", mpnn::to_string(c.kind)},
                {"node_centering", c.node_centering},
                {"message_centering", c.message_centering},
                {"hidden", c.hidden},
                {"lr_layers", c.lr_layers},
                {"hr_layers", c.hr_layers},
                {"k", c.k}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.kind = mpnn::parse_mpnn_kind(j.at("mpnn").get<std::string>());
    c.node_centering = j.at("node_centering").get<bool>();
    c.message_centering = j.at("message_centering").get<bool>();
    c.hidden = j.at("hidden").get<int>();
    c.lr_layers = j.at("lr_layers").get<int>();
    c.hr_layers = j.at("hr_layers").get<int>();
    c.k = j.at("k").get<int>();
    return c;
}

}  // namespace

void save_checkpoint(const ModelParams& m, const std::filesystem::path& path) {
    json tensors = json::array();
    std::vector<double> data;
    for (int i = 0; i < m.store.count(); ++i) {
        const Matrix& v = m.store.value(i);
        if (!v.allFinite())
            throw contract_error("save_checkpoint: parameter '" + m.store.name(i) +
                                 "' contains non-finite values");
        tensors.push_back(json{{"name", m.store.name(i)},
                               {"rows", v.rows()},
                               {"cols", v.cols()},
                               {"offset", data.size()}});
        for (Eigen::Index r = 0; r < v.rows(); ++r)
            for (Eigen::Index c = 0; c < v.cols(); ++c) data.push_back(v(r, c));
    }
    json doc{{"format", "meshsr-checkpoint-v1"},
             {"config", config_to_json(m.config)},
             {"field_dim", m.field_dim},
             {"space_dim", m.space_dim},
             {"tensors", std::move(tensors)},
             {"data", std::move(data)}};
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("save_checkpoint: cannot write " + path.string());
    out << doc.dump() << "\n";
    if (!out) throw io_error("save_checkpoint: write failed for " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("load_checkpoint: cannot open " + path.string());
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw parse_error("load_checkpoint: " + path.string() + ": " + e.what());
    }
    try {
        if (doc.at("format").get<std::string>() != "meshsr-checkpoint-v1")
            throw parse_error("load_checkpoint: unrecognized format tag");
        ModelConfig config = config_from_json(doc.at("config"));
        Rng rng(0);  // every value is overwritten below
        ModelParams m = ModelParams::create(config, doc.at("field_dim").get<int>(),
                                            doc.at("space_dim").get<int>(), rng);
        const auto& tensors = doc.at("tensors");
        const auto& data = doc.at("data");
        if (static_cast<int>(tensors.size()) != m.store.count())
            throw parse_error("load_checkpoint: tensor table has " +
                              std::to_string(tensors.size()) + " entries, model needs " +
                              std::to_string(m.store.count()));
        for (const auto& entry : tensors) {
            const std::string name = entry.at("name").get<std::string>();
            int id = m.store.find(name);
            if (id < 0) throw parse_error("load_checkpoint: unknown tensor '" + name + "'");
            Matrix& v = m.store.value(id);
            auto rows = entry.at("rows").get<Eigen::Index>();
            auto cols = entry.at("cols").get<Eigen::Index>();
            auto offset = entry.at("offset").get<std::size_t>();
            if (rows != v.rows() || cols != v.cols())
                throw parse_error("load_checkpoint: tensor '" + name + "' has shape " +
                                  std::to_string(rows) + "x" + std::to_string(cols) +
                                  ", model expects " + std::to_string(v.rows()) + "x" +
                                  std::to_string(v.cols()));
            if (offset + static_cast<std::size_t>(rows * cols) > data.size())
                throw parse_error("load_checkpoint: tensor '" + name + "' overruns data array");
            std::size_t at = offset;
            for (Eigen::Index r = 0; r < rows; ++r)
                for (Eigen::Index c = 0; c < cols; ++c) v(r, c) = data.at(at++).get<double>();
        }
        return m;
    } catch (const json::exception& e) {
        throw parse_error("load_checkpoint: " + path.string() + ": " + e.what());
    }
}

}  // namespace meshsr::models
