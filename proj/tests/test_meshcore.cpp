#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "meshsr/meshcore.hpp"
#include "support.hpp"

using namespace meshsr;
using namespace meshsr::mesh;
using grad::Matrix;
using grad::Vector;
using testutil::max_abs_diff;
using testutil::random_matrix;

namespace {

// Exhaustive reference with the same (distance, index) tie rule.
std::vector<std::pair<int, double>> brute_force_knn(const Matrix& src, const Vector& point,
                                                    int k) {
    std::vector<std::pair<double, int>> all;
    for (Eigen::Index i = 0; i < src.rows(); ++i)
        all.emplace_back((src.row(i).transpose() - point).squaredNorm(), static_cast<int>(i));
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first < b.first;
        return a.second < b.second;
    });
    std::vector<std::pair<int, double>> out;
    int want = std::min<int>(k, static_cast<int>(src.rows()));
    for (int i = 0; i < want; ++i)
        out.emplace_back(all[static_cast<std::size_t>(i)].second,
                         std::sqrt(all[static_cast<std::size_t>(i)].first));
    return out;
}

NormStats identity_stats(int d, int D) {
    NormStats s;
    s.field_mean = Vector::Zero(d);
    s.field_std = Vector::Ones(d);
    s.pos_mean = Vector::Zero(D);
    s.pos_std = Vector::Ones(D);
    return s;
}

std::filesystem::path temp_dir(const char* tag) {
    auto dir = std::filesystem::temp_directory_path() /
               (std::string("meshsr_test_") + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(dir);
    return dir;
}

// Tiny two-mesh dataset used by the I/O tests.
SplitDataset small_dataset(int n_paired, int n_unpaired, std::uint64_t seed) {
    Rng rng(seed);
    SplitDataset ds;
    Mesh lr;
    lr.positions = random_matrix(4, 2, rng, 0.0, 1.0);
    lr.edges = {{0, 1}, {1, 2}, {2, 3}};
    Mesh hr;
    hr.positions = random_matrix(7, 2, rng, 0.0, 1.0);
    hr.edges = {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5}, {5, 6}};
    ds.meshes = {lr, hr};

    auto make = [&](int mesh_id, int rows) {
        FieldSample s;
        s.mesh_id = mesh_id;
        s.values = random_matrix(rows, 1, rng);
        s.mu = random_matrix(3, 1, rng).col(0);
        return s;
    };
    for (int i = 0; i < n_paired; ++i) {
        PairedSample p{make(0, 4), make(1, 7)};
        p.hr.mu = p.lr.mu;
        ds.paired.push_back(std::move(p));
    }
    for (int i = 0; i < n_unpaired; ++i) ds.unpaired.push_back({make(0, 4), 1});
    ds.stats = compute_stats(ds);
    ds.generator_json = "{\"kind\":\"test\"}";
    return ds;
}

}  // namespace

TEST_CASE("knn_query: forced ordering and coincident point") {
    Matrix src(3, 2);
    src << 0.0, 0.0, 1.0, 0.0, 2.0, 0.0;
    KnnIndex idx = KnnIndex::build(src);

    Vector q(2);
    q << 0.4, 0.0;
    auto hits = idx.query(q, 2);
    REQUIRE(hits.size() == 2);
    CHECK(hits[0].first == 0);
    CHECK(hits[1].first == 1);

    Vector on_node(2);
    on_node << 1.0, 0.0;
    auto exact = idx.query(on_node, 1);
    CHECK(exact[0].first == 1);
    CHECK(exact[0].second == 0.0);
}

TEST_CASE("knn_query equals exhaustive search on randomized instances") {
    Rng rng(301);
    for (int trial = 0; trial < 5; ++trial) {
        int n = 500;
        Matrix src = random_matrix(n, 2, rng, -3.0, 3.0);
        KnnIndex idx = KnnIndex::build(src);
        for (int q = 0; q < 100; ++q) {
            Vector point = random_matrix(2, 1, rng, -3.5, 3.5).col(0);
            int k = 1 + rng.uniform_int(8);
            auto fast = idx.query(point, k);
            auto slow = brute_force_knn(src, point, k);
            REQUIRE(fast.size() == slow.size());
            for (std::size_t i = 0; i < fast.size(); ++i) {
                CHECK(fast[i].first == slow[i].first);
                CHECK(fast[i].second == doctest::Approx(slow[i].second).epsilon(1e-14));
            }
        }
    }
}

TEST_CASE("knn_query handles duplicated positions with index tie-break") {
    Matrix src(4, 2);
    src << 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 2.0, 2.0;
    KnnIndex idx = KnnIndex::build(src);
    Vector q(2);
    q << 0.5, 0.5;
    auto hits = idx.query(q, 3);
    REQUIRE(hits.size() == 3);
    CHECK(hits[0].first == 0);
    CHECK(hits[1].first == 1);
    CHECK(hits[2].first == 2);
}

TEST_CASE("knn_query returns min(k, n) and rejects empty sources") {
    Matrix src(2, 2);
    src << 0.0, 0.0, 1.0, 1.0;
    KnnIndex idx = KnnIndex::build(src);
    Vector q = Vector::Zero(2);
    CHECK(idx.query(q, 10).size() == 2);
    CHECK_THROWS_AS(KnnIndex::build(Matrix(0, 2)), contract_error);
}

TEST_CASE("knn_interpolate: hand-computed midpoint, exact copies, constant fields") {
    Matrix src_pos(3, 2);
    src_pos << 0.0, 0.0, 1.0, 0.0, 2.0, 0.0;
    Matrix values(3, 1);
    values << 1.0, 2.0, 3.0;

    SUBCASE("equidistant neighbors average to 1.5") {
        Matrix dst(1, 2);
        dst << 0.5, 0.0;
        Matrix out = knn_interpolate(values, src_pos, dst, 2);
        CHECK(out(0, 0) == doctest::Approx(1.5).epsilon(1e-15));
    }

    SUBCASE("target on a source copies it exactly") {
        Matrix dst(1, 2);
        dst << 2.0, 0.0;
        Matrix out = knn_interpolate(values, src_pos, dst, 3);
        CHECK(out(0, 0) == 3.0);
    }

    SUBCASE("constant field reproduced within 1e-12 (partition of unity)") {
        Rng rng(311);
        Matrix spos = random_matrix(40, 2, rng);
        Matrix dpos = random_matrix(25, 2, rng);
        Matrix ones_field = Matrix::Constant(40, 3, 1.0);
        Matrix out = knn_interpolate(ones_field, spos, dpos, 3);
        CHECK(max_abs_diff(out, Matrix::Constant(25, 3, 1.0)) <= 1e-12);
    }

    SUBCASE("k=1 equals nearest-neighbor copy") {
        Rng rng(313);
        Matrix spos = random_matrix(30, 2, rng);
        Matrix dpos = random_matrix(12, 2, rng);
        Matrix vals = random_matrix(30, 2, rng);
        Matrix out = knn_interpolate(vals, spos, dpos, 1);
        KnnIndex idx = KnnIndex::build(spos);
        for (int t = 0; t < 12; ++t) {
            auto nn = idx.query(dpos.row(t).transpose(), 1);
            CHECK(max_abs_diff(out.row(t), vals.row(nn[0].first)) == 0.0);
        }
    }
}

TEST_CASE("shared-mesh projection is the identity, giving exact anti-symmetry") {
    Rng rng(317);
    Matrix pos = random_matrix(9, 2, rng);
    Matrix u_r = random_matrix(9, 1, rng);
    Matrix u_s = random_matrix(9, 1, rng);

    RowMixPlan plan = build_interp_plan(pos, pos, 3);
    CHECK(max_abs_diff(apply_plan(u_s, plan), u_s) == 0.0);

    Matrix lhs = u_r - apply_plan(u_s, plan);
    Matrix rhs = -(u_s - apply_plan(u_r, plan));
    CHECK(max_abs_diff(lhs, rhs) == 0.0);
}

TEST_CASE("knn_interpolate gradient wrt source values matches finite differences") {
    Rng rng(331);
    Matrix spos = random_matrix(8, 2, rng);
    Matrix dpos = random_matrix(5, 2, rng);
    RowMixPlan plan = build_interp_plan(spos, dpos, 3);
    Matrix target = random_matrix(5, 2, rng);

    grad::ParamStore params;
    params.add("values", random_matrix(8, 2, rng));
    auto build = [&](grad::Tape& t, std::span<const grad::Var> w) {
        return grad::mse(t, grad::row_mix(t, w[0], plan), t.constant(target));
    };
    grad::Tape t;
    auto w = grad::watch(t, params);
    auto grads = grad::parameter_gradients(t, w, build(t, w));
    auto report = testutil::finite_difference_check(params, grads, [&]() {
        grad::Tape t2;
        auto w2 = grad::watch(t2, params);
        return t2.value(build(t2, w2))(0, 0);
    });
    CHECK(report.max_rel_err <= 1e-6);
}

TEST_CASE("build_graph_features: concatenation order and edge doubling") {
    Mesh m;
    m.positions = Matrix(1, 2);
    m.positions << 0.5, 0.5;
    FieldSample s;
    s.mesh_id = 0;
    s.values = Matrix(1, 1);
    s.values << 2.0;

    GraphFeatures g = build_graph_features(s, m, identity_stats(1, 2));
    REQUIRE(g.node_features.rows() == 1);
    Matrix expected(1, 3);
    expected << 2.0, 0.5, 0.5;
    CHECK(max_abs_diff(g.node_features, expected) == 0.0);
    CHECK(g.edge_src.empty());

    Mesh pair;
    Rng rng(337);
    pair.positions = random_matrix(2, 2, rng);
    pair.edges = {{0, 1}};
    FieldSample s2;
    s2.mesh_id = 0;
    s2.values = random_matrix(2, 1, rng);
    GraphFeatures g2 = build_graph_features(s2, pair, identity_stats(1, 2));
    CHECK(g2.edge_src.size() == 2);
    CHECK(g2.edge_features.rows() == 2);
    CHECK(g2.edge_src[0] == 0);
    CHECK(g2.edge_dst[0] == 1);
    CHECK(g2.edge_src[1] == 1);
    CHECK(g2.edge_dst[1] == 0);

    NormStats missing;
    CHECK_THROWS_AS(build_graph_features(s2, pair, missing), config_error);
}

TEST_CASE("normalized node features have near-zero mean and unit std over the LR pool") {
    SplitDataset ds = small_dataset(5, 40, 341);
    // Re-accumulate feature columns over the pool the stats came from.
    long rows = 0;
    Vector sum = Vector::Zero(3), sq = Vector::Zero(3);
    auto accumulate = [&](const FieldSample& s) {
        GraphFeatures g = build_graph_features(s, ds.mesh(s.mesh_id), ds.stats);
        for (Eigen::Index r = 0; r < g.node_features.rows(); ++r)
            for (Eigen::Index c = 0; c < 3; ++c) {
                sum(c) += g.node_features(r, c);
                sq(c) += g.node_features(r, c) * g.node_features(r, c);
            }
        rows += g.node_features.rows();
    };
    for (const auto& p : ds.paired) accumulate(p.lr);
    for (const auto& u : ds.unpaired) accumulate(u.lr);

    for (int c = 0; c < 3; ++c) {
        double mean = sum(c) / static_cast<double>(rows);
        double var = sq(c) / static_cast<double>(rows) - mean * mean;
        CHECK(std::abs(mean) < 1e-10);
        CHECK(std::sqrt(var) == doctest::Approx(1.0).epsilon(1e-8));
    }
}

TEST_CASE("dataset save/load round-trip is bitwise lossless") {
    auto dir = temp_dir("roundtrip");
    SplitDataset ds = small_dataset(3, 4, 347);
    save_dataset(ds, dir);
    SplitDataset back = load_dataset(dir);

    REQUIRE(back.paired.size() == ds.paired.size());
    REQUIRE(back.unpaired.size() == ds.unpaired.size());
    REQUIRE(back.meshes.size() == ds.meshes.size());
    for (std::size_t i = 0; i < ds.meshes.size(); ++i) {
        CHECK(max_abs_diff(back.meshes[i].positions, ds.meshes[i].positions) == 0.0);
        CHECK(back.meshes[i].edges == ds.meshes[i].edges);
    }
    for (std::size_t i = 0; i < ds.paired.size(); ++i) {
        CHECK(max_abs_diff(back.paired[i].lr.values, ds.paired[i].lr.values) == 0.0);
        CHECK(max_abs_diff(back.paired[i].hr.values, ds.paired[i].hr.values) == 0.0);
        CHECK((back.paired[i].lr.mu - ds.paired[i].lr.mu).cwiseAbs().maxCoeff() == 0.0);
    }
    for (std::size_t i = 0; i < ds.unpaired.size(); ++i) {
        CHECK(max_abs_diff(back.unpaired[i].lr.values, ds.unpaired[i].lr.values) == 0.0);
        CHECK(back.unpaired[i].hr_mesh_id == ds.unpaired[i].hr_mesh_id);
    }
    CHECK((back.stats.field_mean - ds.stats.field_mean).cwiseAbs().maxCoeff() == 0.0);
    CHECK((back.stats.field_std - ds.stats.field_std).cwiseAbs().maxCoeff() == 0.0);

    // Saving the loaded copy reproduces identical bytes.
    auto dir2 = temp_dir("roundtrip2");
    save_dataset(back, dir2);
    for (const char* name : {"meshes.jsonl", "samples.jsonl", "manifest.json"}) {
        std::ifstream a(dir / name), b(dir2 / name);
        std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
        std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
        CHECK(sa == sb);
    }
    CHECK(dataset_fingerprint(dir) == dataset_fingerprint(dir2));

    std::filesystem::remove_all(dir);
    std::filesystem::remove_all(dir2);
}

TEST_CASE("truncated sample file raises a parse error naming the record") {
    auto dir = temp_dir("truncated");
    SplitDataset ds = small_dataset(3, 2, 353);
    save_dataset(ds, dir);

    // Chop the last line of samples.jsonl mid-record.
    auto path = dir / "samples.jsonl";
    std::ifstream in(path);
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    std::ofstream out(path, std::ios::trunc);
    out << content.substr(0, content.size() - 40);
    out.close();

    try {
        load_dataset(dir);
        FAIL("expected parse_error");
    } catch (const parse_error& e) {
        CHECK(std::string(e.what()).find("samples.jsonl") != std::string::npos);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("dataset counts: 20 paired + 180 unpaired from N=200, N_h=20") {
    auto dir = temp_dir("counts");
    SplitDataset ds = small_dataset(20, 180, 359);
    save_dataset(ds, dir);
    SplitDataset back = load_dataset(dir);
    CHECK(back.paired.size() == 20);
    CHECK(back.unpaired.size() == 180);
    CHECK(back.total() == 200);
    std::filesystem::remove_all(dir);
}

TEST_CASE("datasets with fewer than 2 paired samples are rejected") {
    SplitDataset ds = small_dataset(2, 1, 367);
    ds.paired.pop_back();
    CHECK_THROWS_AS(ds.validate(), config_error);

    auto dir = temp_dir("toofew");
    SplitDataset ok = small_dataset(2, 1, 367);
    save_dataset(ok, dir);
    // Drop one pair from the saved file to trip the load-side count check.
    auto path = dir / "samples.jsonl";
    std::ifstream in(path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    in.close();
    std::ofstream out(path, std::ios::trunc);
    for (std::size_t i = 2; i < lines.size(); ++i) out << lines[i] << "\n";
    out.close();
    CHECK_THROWS(load_dataset(dir));
    std::filesystem::remove_all(dir);
}

TEST_CASE("mesh validation rejects self-loops and bad indices") {
    Mesh m;
    m.positions = Matrix::Zero(3, 2);
    m.edges = {{0, 0}};
    CHECK_THROWS_AS(m.validate(), config_error);
    m.edges = {{0, 5}};
    CHECK_THROWS_AS(m.validate(), config_error);
    m.edges = {{0, 1}};
    CHECK_NOTHROW(m.validate());
}

TEST_CASE("paired samples must share mu bitwise") {
    SplitDataset ds = small_dataset(2, 0, 373);
    ds.paired[0].hr.mu(0) += 1e-16;
    if (ds.paired[0].hr.mu(0) != ds.paired[0].lr.mu(0)) {
        CHECK_THROWS_AS(ds.validate(), config_error);
    }
}
