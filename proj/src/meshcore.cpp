#include "meshsr/meshcore.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace meshsr::mesh {

using nlohmann::json;

// Mesh -------------------------------------------------------------------------

void Mesh::validate() const {
    if (!positions.allFinite()) throw config_error("Mesh: non-finite node positions");
    for (const auto& e : edges) {
        if (e[0] < 0 || e[0] >= nodes() || e[1] < 0 || e[1] >= nodes())
            throw config_error("Mesh: edge index out of range");
        if (e[0] == e[1]) throw config_error("Mesh: self-loop in stored edges");
    }
}

// NormStats ----------------------------------------------------------------------

namespace {

Matrix z_score(const Matrix& x, const Vector& mean, const Vector& std_dev, const char* what) {
    if (x.cols() != mean.size() || x.cols() != std_dev.size())
        throw config_error(std::string("NormStats: ") + what + " column count mismatch");
    Matrix out = x;
    for (Eigen::Index j = 0; j < x.cols(); ++j)
        out.col(j) = (x.col(j).array() - mean(j)) / std_dev(j);
    return out;
}

}  // namespace

Matrix NormStats::normalize_fields(const Matrix& values) const {
    return z_score(values, field_mean, field_std, "field");
}

Matrix NormStats::normalize_positions(const Matrix& positions) const {
    return z_score(positions, pos_mean, pos_std, "position");
}

// SplitDataset --------------------------------------------------------------------

int SplitDataset::field_dim() const {
    if (!paired.empty()) return static_cast<int>(paired.front().lr.values.cols());
    if (!unpaired.empty()) return static_cast<int>(unpaired.front().lr.values.cols());
    return 0;
}

int SplitDataset::space_dim() const {
    return meshes.empty() ? 0 : meshes.front().dim();
}

const Mesh& SplitDataset::mesh(int id) const {
    if (id < 0 || id >= static_cast<int>(meshes.size()))
        throw index_error("SplitDataset: mesh id out of range");
    return meshes[static_cast<std::size_t>(id)];
}

void SplitDataset::validate() const {
    if (paired.size() < 2)
        throw config_error("SplitDataset: at least 2 paired samples required (N_h >= 2)");
    for (const auto& m : meshes) m.validate();

    auto check_sample = [&](const FieldSample& s, const char* role) {
        const Mesh& m = mesh(s.mesh_id);
        if (s.values.rows() != m.nodes())
            throw config_error(std::string("SplitDataset: ") + role +
                               " sample row count does not match its mesh");
        if (!s.values.allFinite()) throw config_error("SplitDataset: non-finite field values");
    };
    for (const auto& p : paired) {
        check_sample(p.lr, "LR");
        check_sample(p.hr, "HR");
        if (p.lr.mu.size() != p.hr.mu.size() || (p.lr.mu - p.hr.mu).cwiseAbs().maxCoeff() != 0.0)
            throw config_error("SplitDataset: paired LR/HR mu vectors differ");
    }
    for (const auto& u : unpaired) {
        check_sample(u.lr, "unpaired LR");
        mesh(u.hr_mesh_id);  // existence check
    }
}

NormStats compute_stats(const SplitDataset& ds) {
    int d = ds.field_dim();
    int D = ds.space_dim();
    if (d == 0 || D == 0) throw config_error("compute_stats: empty dataset");

    Vector fsum = Vector::Zero(d), fsq = Vector::Zero(d);
    Vector psum = Vector::Zero(D), psq = Vector::Zero(D);
    long frows = 0, prows = 0;

    auto accumulate = [&](const FieldSample& s) {
        const Mesh& m = ds.mesh(s.mesh_id);
        for (Eigen::Index r = 0; r < s.values.rows(); ++r)
            for (int j = 0; j < d; ++j) {
                fsum(j) += s.values(r, j);
                fsq(j) += s.values(r, j) * s.values(r, j);
            }
        frows += s.values.rows();
        for (Eigen::Index r = 0; r < m.positions.rows(); ++r)
            for (int j = 0; j < D; ++j) {
                psum(j) += m.positions(r, j);
                psq(j) += m.positions(r, j) * m.positions(r, j);
            }
        prows += m.positions.rows();
    };
    for (const auto& p : ds.paired) accumulate(p.lr);
    for (const auto& u : ds.unpaired) accumulate(u.lr);

    auto finalize = [](Vector sum, Vector sq, long rows) {
        Vector mean = sum / static_cast<double>(rows);
        Vector var = sq / static_cast<double>(rows) - mean.cwiseProduct(mean);
        Vector std_dev = var.cwiseMax(0.0).cwiseSqrt();
        for (Eigen::Index j = 0; j < std_dev.size(); ++j)
            if (std_dev(j) < 1e-12) std_dev(j) = 1.0;  // constant column guard
        return std::make_pair(mean, std_dev);
    };
    NormStats stats;
    std::tie(stats.field_mean, stats.field_std) = finalize(fsum, fsq, frows);
    std::tie(stats.pos_mean, stats.pos_std) = finalize(psum, psq, prows);
    return stats;
}

// KnnIndex ------------------------------------------------------------------------

std::vector<int> KnnIndex::cell_of(const Vector& point) const {
    std::vector<int> key(static_cast<std::size_t>(point.size()));
    for (Eigen::Index a = 0; a < point.size(); ++a)
        key[static_cast<std::size_t>(a)] =
            static_cast<int>(std::floor((point(a) - origin_(a)) / cell_));
    return key;
}

void KnnIndex::insert_all(double cell) {
    cell_ = cell;
    cells_.clear();
    for (Eigen::Index i = 0; i < positions_.rows(); ++i) {
        Vector p = positions_.row(i).transpose();
        cells_[cell_of(p)].push_back(static_cast<int>(i));
    }
}

KnnIndex KnnIndex::build(const Matrix& positions) {
    if (positions.rows() == 0) throw contract_error("KnnIndex: empty source set");
    KnnIndex idx;
    idx.positions_ = positions;
    idx.origin_ = positions.colwise().minCoeff().transpose();

    int n = static_cast<int>(positions.rows());
    int D = static_cast<int>(positions.cols());
    Vector extent = positions.colwise().maxCoeff().transpose() - idx.origin_;
    double diag = extent.norm();
    double provisional = diag > 0.0
                             ? diag / std::pow(static_cast<double>(n), 1.0 / static_cast<double>(D))
                             : 1.0;
    idx.insert_all(provisional);
    if (n == 1) return idx;

    // Second pass: the design target is cell = mean nearest-neighbor spacing.
    double total = 0.0;
    for (Eigen::Index i = 0; i < positions.rows(); ++i) {
        auto nearest = idx.query(positions.row(i).transpose(), 2);
        total += nearest.back().second;  // first hit is the point itself (distance 0)
    }
    double mean_spacing = total / static_cast<double>(n);
    if (mean_spacing > 0.0) idx.insert_all(mean_spacing);
    return idx;
}

std::vector<std::pair<int, double>> KnnIndex::query(const Vector& point, int k) const {
    if (k < 1) throw contract_error("KnnIndex::query: k must be >= 1");
    if (point.size() != positions_.cols())
        throw dimension_error("KnnIndex::query: point dimension mismatch");

    int n = size();
    int want = std::min(k, n);
    int D = static_cast<int>(positions_.cols());
    std::vector<int> center = cell_of(point);

    // (squared distance, index) candidates, grown ring by ring.
    std::vector<std::pair<double, int>> cand;
    cand.reserve(static_cast<std::size_t>(want) * 4);
    int seen = 0;

    auto visit_cell = [&](const std::vector<int>& key) {
        auto it = cells_.find(key);
        if (it == cells_.end()) return;
        for (int i : it->second) {
            double d2 = (positions_.row(i).transpose() - point).squaredNorm();
            cand.emplace_back(d2, i);
            ++seen;
        }
    };

    auto kth_d2 = [&]() {
        std::nth_element(cand.begin(), cand.begin() + (want - 1), cand.end());
        return cand[static_cast<std::size_t>(want - 1)].first;
    };

    for (int ring = 0;; ++ring) {
        // Enumerate cells at Chebyshev distance exactly `ring` from center.
        std::vector<int> offset(static_cast<std::size_t>(D), -ring);
        while (true) {
            int cheb = 0;
            for (int o : offset) cheb = std::max(cheb, std::abs(o));
            if (cheb == ring) {
                std::vector<int> key(static_cast<std::size_t>(D));
                for (int a = 0; a < D; ++a)
                    key[static_cast<std::size_t>(a)] = center[static_cast<std::size_t>(a)] +
                                                       offset[static_cast<std::size_t>(a)];
                visit_cell(key);
            }
            int axis = 0;
            while (axis < D && offset[static_cast<std::size_t>(axis)] == ring) {
                offset[static_cast<std::size_t>(axis)] = -ring;
                ++axis;
            }
            if (axis == D) break;
            ++offset[static_cast<std::size_t>(axis)];
        }

        // Any point in ring r+1 or beyond is strictly farther than ring*cell
        // from the query, so once the k-th best candidate is within that
        // radius the search is complete.
        if (seen >= want) {
            double guard = static_cast<double>(ring) * cell_;
            if (kth_d2() <= guard * guard) break;
        }
        if (seen == n) break;
    }

    std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first < b.first;
        return a.second < b.second;  // deterministic tie-break by index
    });
    std::vector<std::pair<int, double>> out;
    out.reserve(static_cast<std::size_t>(want));
    for (int i = 0; i < want; ++i)
        out.emplace_back(cand[static_cast<std::size_t>(i)].second,
                         std::sqrt(cand[static_cast<std::size_t>(i)].first));
    return out;
}

// Interpolation --------------------------------------------------------------------

RowMixPlan build_interp_plan(const Matrix& src_pos, const Matrix& dst_pos, int k) {
    if (src_pos.rows() < 1) throw contract_error("build_interp_plan: empty source set");
    if (k < 1) throw contract_error("build_interp_plan: k must be >= 1");
    KnnIndex index = KnnIndex::build(src_pos);

    RowMixPlan plan;
    plan.source_rows = static_cast<int>(src_pos.rows());
    plan.rows.resize(static_cast<std::size_t>(dst_pos.rows()));
    for (Eigen::Index t = 0; t < dst_pos.rows(); ++t) {
        auto nearest = index.query(dst_pos.row(t).transpose(), k);
        auto& row = plan.rows[static_cast<std::size_t>(t)];
        if (nearest.front().second < 1e-12) {
            // Exact coincidence: copy the source row, avoiding 1/d^2 overflow.
            row = {{nearest.front().first, 1.0}};
            continue;
        }
        double wsum = 0.0;
        for (const auto& [idx, dist] : nearest) {
            double w = 1.0 / (dist * dist);
            row.emplace_back(idx, w);
            wsum += w;
        }
        for (auto& [idx, w] : row) w /= wsum;
    }
    return plan;
}

Matrix apply_plan(const Matrix& values, const RowMixPlan& plan) {
    if (values.rows() != plan.source_rows)
        throw dimension_error("apply_plan: plan source rows do not match values");
    Matrix out = Matrix::Zero(plan.target_rows(), values.cols());
    for (int r = 0; r < plan.target_rows(); ++r)
        for (const auto& [src, w] : plan.rows[static_cast<std::size_t>(r)])
            out.row(r) += w * values.row(src);
    return out;
}

Matrix knn_interpolate(const Matrix& values, const Matrix& src_pos, const Matrix& dst_pos,
                       int k) {
    if (values.rows() != src_pos.rows())
        throw dimension_error("knn_interpolate: one value row per source position required");
    return apply_plan(values, build_interp_plan(src_pos, dst_pos, k));
}

// Graph features ---------------------------------------------------------------------

namespace {

void build_edges(const Mesh& m, const NormStats& stats, GraphFeatures& g) {
    auto e_count = static_cast<Eigen::Index>(m.edges.size());
    Matrix pos_norm = stats.normalize_positions(m.positions);
    int D = m.dim();
    g.edge_features.resize(2 * e_count, 2 * D);
    g.edge_src.reserve(static_cast<std::size_t>(2 * e_count));
    g.edge_dst.reserve(static_cast<std::size_t>(2 * e_count));
    Eigen::Index row = 0;
    for (const auto& e : m.edges) {
        for (auto [s, d] : {std::pair{e[0], e[1]}, std::pair{e[1], e[0]}}) {
            g.edge_src.push_back(s);
            g.edge_dst.push_back(d);
            g.edge_features.block(row, 0, 1, D) = pos_norm.row(s);
            g.edge_features.block(row, D, 1, D) = pos_norm.row(d);
            ++row;
        }
    }
}

}  // namespace

GraphFeatures build_graph_features(const FieldSample& lr, const Mesh& m, const NormStats& stats) {
    if (!stats.valid()) throw config_error("build_graph_features: normalization stats missing");
    if (lr.values.rows() != m.nodes())
        throw config_error("build_graph_features: sample inconsistent with its mesh");

    GraphFeatures g;
    Matrix values_norm = stats.normalize_fields(lr.values);
    Matrix pos_norm = stats.normalize_positions(m.positions);
    g.node_features.resize(m.nodes(), values_norm.cols() + pos_norm.cols());
    g.node_features << values_norm, pos_norm;
    build_edges(m, stats, g);
    return g;
}

GraphFeatures build_mesh_graph(const Mesh& m, const NormStats& stats) {
    if (!stats.valid()) throw config_error("build_mesh_graph: normalization stats missing");
    GraphFeatures g;
    build_edges(m, stats, g);
    return g;
}

// Dataset I/O -----------------------------------------------------------------------

namespace {

json matrix_to_json(const Matrix& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

Matrix matrix_from_json(const json& rows, const char* what) {
    if (!rows.is_array()) throw parse_error(std::string(what) + ": expected array of rows");
    auto n = static_cast<Eigen::Index>(rows.size());
    if (n == 0) return Matrix(0, 0);
    auto cols = static_cast<Eigen::Index>(rows[0].size());
    Matrix m(n, cols);
    for (Eigen::Index r = 0; r < n; ++r) {
        const json& row = rows[static_cast<std::size_t>(r)];
        if (static_cast<Eigen::Index>(row.size()) != cols)
            throw parse_error(std::string(what) + ": ragged rows");
        for (Eigen::Index c = 0; c < cols; ++c)
            m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
    }
    return m;
}

json vector_to_json(const Vector& v) {
    json out = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
    return out;
}

Vector vector_from_json(const json& arr, const char* what) {
    if (!arr.is_array()) throw parse_error(std::string(what) + ": expected array");
    Vector v(static_cast<Eigen::Index>(arr.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = arr[static_cast<std::size_t>(i)].get<double>();
    return v;
}

json sample_record(const FieldSample& s, const char* role, int pair_id, int hr_mesh_id) {
    json rec;
    rec["pair_id"] = pair_id;
    rec["role"] = role;
    rec["mesh_id"] = s.mesh_id;
    if (hr_mesh_id >= 0) rec["hr_mesh_id"] = hr_mesh_id;
    rec["mu"] = vector_to_json(s.mu);
    rec["values"] = matrix_to_json(s.values);
    return rec;
}

json parse_line(const std::string& line, const std::filesystem::path& file, long line_no) {
    try {
        return json::parse(line);
    } catch (const json::exception& e) {
        std::ostringstream msg;
        msg << file.filename().string() << ":" << line_no << ": malformed record: " << e.what();
        throw parse_error(msg.str());
    }
}

}  // namespace

void save_dataset(const SplitDataset& ds, const std::filesystem::path& dir) {
    ds.validate();
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw io_error("save_dataset: cannot create " + dir.string());

    {
        std::ofstream out(dir / "meshes.jsonl");
        if (!out) throw io_error("save_dataset: cannot write meshes.jsonl");
        for (std::size_t i = 0; i < ds.meshes.size(); ++i) {
            const Mesh& m = ds.meshes[i];
            json rec;
            rec["id"] = static_cast<int>(i);
            rec["positions"] = matrix_to_json(m.positions);
            json edges = json::array();
            for (const auto& e : m.edges) edges.push_back({e[0], e[1]});
            rec["edges"] = std::move(edges);
            out << rec.dump() << "\n";
        }
    }
    {
        std::ofstream out(dir / "samples.jsonl");
        if (!out) throw io_error("save_dataset: cannot write samples.jsonl");
        int pair_id = 0;
        for (const auto& p : ds.paired) {
            out << sample_record(p.lr, "lr", pair_id, p.hr.mesh_id).dump() << "\n";
            out << sample_record(p.hr, "hr", pair_id, -1).dump() << "\n";
            ++pair_id;
        }
        for (const auto& u : ds.unpaired)
            out << sample_record(u.lr, "lr", -1, u.hr_mesh_id).dump() << "\n";
    }
    {
        json manifest;
        manifest["n"] = ds.total();
        manifest["n_h"] = static_cast<int>(ds.paired.size());
        manifest["d"] = ds.field_dim();
        manifest["D"] = ds.space_dim();
        manifest["stats"] = {{"field_mean", vector_to_json(ds.stats.field_mean)},
                             {"field_std", vector_to_json(ds.stats.field_std)},
                             {"pos_mean", vector_to_json(ds.stats.pos_mean)},
                             {"pos_std", vector_to_json(ds.stats.pos_std)}};
        manifest["generator"] =
            ds.generator_json.empty() ? json::object() : json::parse(ds.generator_json);
        std::ofstream out(dir / "manifest.json");
        if (!out) throw io_error("save_dataset: cannot write manifest.json");
        out << manifest.dump(2) << "\n";
    }
}

SplitDataset load_dataset(const std::filesystem::path& dir) {
    auto require_file = [&](const char* name) {
        auto p = dir / name;
        if (!std::filesystem::exists(p))
            throw io_error("load_dataset: missing " + p.string());
        return p;
    };

    SplitDataset ds;

    {
        auto path = require_file("meshes.jsonl");
        std::ifstream in(path);
        std::string line;
        long line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            json rec = parse_line(line, path, line_no);
            if (!rec.contains("id") || !rec.contains("positions") || !rec.contains("edges"))
                throw parse_error("meshes.jsonl:" + std::to_string(line_no) +
                                  ": record missing id/positions/edges");
            auto id = rec["id"].get<int>();
            if (id != static_cast<int>(ds.meshes.size()))
                throw parse_error("meshes.jsonl:" + std::to_string(line_no) +
                                  ": mesh ids must be dense and in order");
            Mesh m;
            m.positions = matrix_from_json(rec["positions"], "positions");
            for (const auto& e : rec["edges"])
                m.edges.push_back({e[0].get<int>(), e[1].get<int>()});
            ds.meshes.push_back(std::move(m));
        }
    }

    {
        auto path = require_file("samples.jsonl");
        std::ifstream in(path);
        std::string line;
        long line_no = 0;
        std::unordered_map<int, FieldSample> pending_lr;  // pair_id -> waiting LR half
        std::unordered_map<int, FieldSample> pending_hr;
        std::vector<int> pair_order;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            json rec = parse_line(line, path, line_no);
            for (const char* field : {"pair_id", "role", "mesh_id", "mu", "values"})
                if (!rec.contains(field))
                    throw parse_error("samples.jsonl:" + std::to_string(line_no) +
                                      ": record missing " + field);
            FieldSample s;
            s.mesh_id = rec["mesh_id"].get<int>();
            s.mu = vector_from_json(rec["mu"], "mu");
            s.values = matrix_from_json(rec["values"], "values");
            int pair_id = rec["pair_id"].get<int>();
            std::string role = rec["role"].get<std::string>();

            if (role == "lr" && pair_id < 0) {
                if (!rec.contains("hr_mesh_id"))
                    throw parse_error("samples.jsonl:" + std::to_string(line_no) +
                                      ": unpaired record missing hr_mesh_id");
                ds.unpaired.push_back({std::move(s), rec["hr_mesh_id"].get<int>()});
            } else if (role == "lr") {
                pending_lr[pair_id] = std::move(s);
                pair_order.push_back(pair_id);
            } else if (role == "hr") {
                pending_hr[pair_id] = std::move(s);
            } else {
                throw parse_error("samples.jsonl:" + std::to_string(line_no) +
                                  ": unknown role '" + role + "'");
            }
        }
        for (int pid : pair_order) {
            auto hr = pending_hr.find(pid);
            if (hr == pending_hr.end())
                throw parse_error("samples.jsonl: pair " + std::to_string(pid) +
                                  " has no hr record");
            ds.paired.push_back({std::move(pending_lr[pid]), std::move(hr->second)});
        }
    }

    {
        auto path = require_file("manifest.json");
        std::ifstream in(path);
        std::stringstream buffer;
        buffer << in.rdbuf();
        json manifest = parse_line(buffer.str(), path, 1);
        if (!manifest.contains("stats"))
            throw parse_error("manifest.json: missing stats");
        const json& stats = manifest["stats"];
        ds.stats.field_mean = vector_from_json(stats.at("field_mean"), "field_mean");
        ds.stats.field_std = vector_from_json(stats.at("field_std"), "field_std");
        ds.stats.pos_mean = vector_from_json(stats.at("pos_mean"), "pos_mean");
        ds.stats.pos_std = vector_from_json(stats.at("pos_std"), "pos_std");
        if (manifest.contains("generator")) ds.generator_json = manifest["generator"].dump();

        if (manifest.at("n").get<int>() != ds.total() ||
            manifest.at("n_h").get<int>() != static_cast<int>(ds.paired.size()))
            throw parse_error("manifest.json: declared counts do not match samples.jsonl");
    }

    if (ds.paired.size() < 2)
        throw config_error("load_dataset: at least 2 paired samples required (N_h >= 2)");
    ds.validate();
    return ds;
}

std::string dataset_fingerprint(const std::filesystem::path& dir) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char* name : {"meshes.jsonl", "samples.jsonl"}) {
        std::ifstream in(dir / name, std::ios::binary);
        if (!in) throw io_error("dataset_fingerprint: missing " + (dir / name).string());
        char buf[1 << 16];
        while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
            h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
    }
    std::ostringstream out;
    out << std::hex << h;
    return out.str();
}

}  // namespace meshsr::mesh
