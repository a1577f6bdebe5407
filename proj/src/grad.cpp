#include "meshsr/grad.hpp"

#include <cmath>
#include <sstream>

namespace meshsr::grad {

namespace {

[[noreturn]] void shape_fail(const char* op, const Matrix& a, const Matrix& b) {
    std::ostringstream msg;
    msg << op << ": incompatible shapes (" << a.rows() << "x" << a.cols() << ") and ("
        << b.rows() << "x" << b.cols() << ")";
    throw dimension_error(msg.str());
}

void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail(op, a, b);
}

}  // namespace

// Tape ------------------------------------------------------------------------

Var Tape::leaf(Matrix value) {
    nodes_.push_back(Node{std::move(value), PullFn{}, true});
    return Var{size() - 1};
}

Var Tape::constant(Matrix value) {
    nodes_.push_back(Node{std::move(value), PullFn{}, false});
    return Var{size() - 1};
}

Var Tape::emit(Matrix value, bool requires_grad, PullFn pull) {
    nodes_.push_back(Node{std::move(value), requires_grad ? std::move(pull) : PullFn{},
                          requires_grad});
    return Var{size() - 1};
}

void Tape::accumulate(Var parent, const Matrix& g) {
    const Node& n = node(parent);
    if (!n.requires_grad) return;
    require_same_shape("Tape::accumulate", n.value, g);
    auto idx = static_cast<std::size_t>(parent.id);
    if (has_grad_[idx]) {
        grads_[idx] += g;
    } else {
        grads_[idx] = g;
        has_grad_[idx] = 1;
    }
}

void Tape::backward(Var loss) {
    const Node& l = node(loss);
    if (l.value.rows() != 1 || l.value.cols() != 1)
        throw contract_error("Tape::backward: loss must be a 1x1 scalar");

    grads_.assign(nodes_.size(), Matrix{});
    has_grad_.assign(nodes_.size(), 0);
    grads_[static_cast<std::size_t>(loss.id)] = Matrix::Ones(1, 1);
    has_grad_[static_cast<std::size_t>(loss.id)] = 1;

    // Reverse creation order is a topological order of the DAG: every parent
    // was created before its consumers.
    for (int i = loss.id; i >= 0; --i) {
        auto idx = static_cast<std::size_t>(i);
        if (!has_grad_[idx]) continue;
        const Node& n = nodes_[idx];
        if (n.pull) n.pull(*this, grads_[idx]);
    }
}

Matrix Tape::grad(Var v) const {
    const Node& n = node(v);
    auto idx = static_cast<std::size_t>(v.id);
    if (idx >= has_grad_.size() || !has_grad_[idx])
        return Matrix::Zero(n.value.rows(), n.value.cols());
    return grads_[idx];
}

// Ops -------------------------------------------------------------------------

Var matmul(Tape& t, Var a, Var b) {
    const Matrix& A = t.value(a);
    const Matrix& B = t.value(b);
    if (A.cols() != B.rows()) shape_fail("matmul", A, B);
    bool ga = t.requires_grad(a), gb = t.requires_grad(b);
    return t.emit(A * B, ga || gb, [a, b, ga, gb](Tape& t, const Matrix& g) {
        if (ga) t.accumulate(a, g * t.value(b).transpose());
        if (gb) t.accumulate(b, t.value(a).transpose() * g);
    });
}

Var add(Tape& t, Var a, Var b) {
    const Matrix& A = t.value(a);
    const Matrix& B = t.value(b);
    require_same_shape("add", A, B);
    bool ga = t.requires_grad(a), gb = t.requires_grad(b);
    return t.emit(A + B, ga || gb, [a, b, ga, gb](Tape& t, const Matrix& g) {
        if (ga) t.accumulate(a, g);
        if (gb) t.accumulate(b, g);
    });
}

Var sub(Tape& t, Var a, Var b) {
    const Matrix& A = t.value(a);
    const Matrix& B = t.value(b);
    require_same_shape("sub", A, B);
    bool ga = t.requires_grad(a), gb = t.requires_grad(b);
    return t.emit(A - B, ga || gb, [a, b, ga, gb](Tape& t, const Matrix& g) {
        if (ga) t.accumulate(a, g);
        if (gb) t.accumulate(b, -g);
    });
}

Var mul(Tape& t, Var a, Var b) {
    const Matrix& A = t.value(a);
    const Matrix& B = t.value(b);
    require_same_shape("mul", A, B);
    bool ga = t.requires_grad(a), gb = t.requires_grad(b);
    return t.emit(A.cwiseProduct(B), ga || gb, [a, b, ga, gb](Tape& t, const Matrix& g) {
        if (ga) t.accumulate(a, g.cwiseProduct(t.value(b)));
        if (gb) t.accumulate(b, g.cwiseProduct(t.value(a)));
    });
}

Var scale(Tape& t, Var a, double c) {
    bool ga = t.requires_grad(a);
    return t.emit(t.value(a) * c, ga, [a, c](Tape& t, const Matrix& g) {
        t.accumulate(a, g * c);
    });
}

Var add_const(Tape& t, Var a, double c) {
    bool ga = t.requires_grad(a);
    Matrix out = t.value(a).array() + c;
    return t.emit(std::move(out), ga, [a](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
    });
}

Var mul_scalar(Tape& t, Var a, Var s) {
    const Matrix& S = t.value(s);
    if (S.rows() != 1 || S.cols() != 1) throw dimension_error("mul_scalar: s must be 1x1");
    bool ga = t.requires_grad(a), gs = t.requires_grad(s);
    return t.emit(t.value(a) * S(0, 0), ga || gs, [a, s, ga, gs](Tape& t, const Matrix& g) {
        if (ga) t.accumulate(a, g * t.value(s)(0, 0));
        if (gs) {
            Matrix gsum(1, 1);
            gsum(0, 0) = g.cwiseProduct(t.value(a)).sum();
            t.accumulate(s, gsum);
        }
    });
}

Var relu(Tape& t, Var a) {
    const Matrix& A = t.value(a);
    bool ga = t.requires_grad(a);
    return t.emit(A.cwiseMax(0.0), ga, [a](Tape& t, const Matrix& g) {
        const Matrix& A = t.value(a);
        t.accumulate(a, (A.array() > 0.0).select(g, Matrix::Zero(g.rows(), g.cols())));
    });
}

Var concat_cols(Tape& t, std::span<const Var> parts) {
    if (parts.empty()) throw contract_error("concat_cols: no inputs");
    Eigen::Index rows = t.value(parts[0]).rows();
    Eigen::Index cols = 0;
    bool any_grad = false;
    for (Var p : parts) {
        const Matrix& m = t.value(p);
        if (m.rows() != rows) shape_fail("concat_cols", t.value(parts[0]), m);
        cols += m.cols();
        any_grad = any_grad || t.requires_grad(p);
    }
    Matrix out(rows, cols);
    Eigen::Index at = 0;
    for (Var p : parts) {
        const Matrix& m = t.value(p);
        out.middleCols(at, m.cols()) = m;
        at += m.cols();
    }
    std::vector<Var> owned(parts.begin(), parts.end());
    return t.emit(std::move(out), any_grad, [owned](Tape& t, const Matrix& g) {
        Eigen::Index at = 0;
        for (Var p : owned) {
            Eigen::Index w = t.value(p).cols();
            if (t.requires_grad(p)) t.accumulate(p, g.middleCols(at, w));
            at += w;
        }
    });
}

Var concat_cols(Tape& t, Var a, Var b) {
    const Var parts[] = {a, b};
    return concat_cols(t, std::span<const Var>(parts, 2));
}

Var concat_cols(Tape& t, Var a, Var b, Var c) {
    const Var parts[] = {a, b, c};
    return concat_cols(t, std::span<const Var>(parts, 3));
}

Var add_row_vector(Tape& t, Var a, Var row) {
    const Matrix& A = t.value(a);
    const Matrix& R = t.value(row);
    if (R.rows() != 1 || R.cols() != A.cols()) shape_fail("add_row_vector", A, R);
    bool ga = t.requires_grad(a), gr = t.requires_grad(row);
    Matrix out = A.rowwise() + R.row(0);
    return t.emit(std::move(out), ga || gr, [a, row, ga, gr](Tape& t, const Matrix& g) {
        if (ga) t.accumulate(a, g);
        if (gr) t.accumulate(row, g.colwise().sum());
    });
}

Var sum(Tape& t, Var a) {
    bool ga = t.requires_grad(a);
    Matrix out(1, 1);
    out(0, 0) = t.value(a).sum();
    return t.emit(std::move(out), ga, [a](Tape& t, const Matrix& g) {
        const Matrix& A = t.value(a);
        t.accumulate(a, Matrix::Constant(A.rows(), A.cols(), g(0, 0)));
    });
}

Var gather_rows(Tape& t, Var a, const std::vector<int>& indices) {
    const Matrix& A = t.value(a);
    for (int i : indices)
        if (i < 0 || i >= A.rows()) throw index_error("gather_rows: row index out of range");
    Matrix out(static_cast<Eigen::Index>(indices.size()), A.cols());
    for (std::size_t r = 0; r < indices.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = A.row(indices[r]);
    bool ga = t.requires_grad(a);
    return t.emit(std::move(out), ga, [a, indices](Tape& t, const Matrix& g) {
        const Matrix& A = t.value(a);
        Matrix ga_acc = Matrix::Zero(A.rows(), A.cols());
        for (std::size_t r = 0; r < indices.size(); ++r)
            ga_acc.row(indices[r]) += g.row(static_cast<Eigen::Index>(r));
        t.accumulate(a, ga_acc);
    });
}

namespace {

void check_targets(const char* op, const std::vector<int>& targets, Eigen::Index in_rows,
                   int n_rows) {
    if (static_cast<Eigen::Index>(targets.size()) != in_rows)
        throw dimension_error(std::string(op) + ": one target per input row required");
    for (int tr : targets)
        if (tr < 0 || tr >= n_rows) throw index_error(std::string(op) + ": target out of range");
}

}  // namespace

Var segment_sum(Tape& t, Var a, const std::vector<int>& targets, int n_rows) {
    const Matrix& A = t.value(a);
    check_targets("segment_sum", targets, A.rows(), n_rows);
    Matrix out = Matrix::Zero(n_rows, A.cols());
    for (std::size_t e = 0; e < targets.size(); ++e)
        out.row(targets[e]) += A.row(static_cast<Eigen::Index>(e));
    bool ga = t.requires_grad(a);
    return t.emit(std::move(out), ga, [a, targets](Tape& t, const Matrix& g) {
        const Matrix& A = t.value(a);
        Matrix gin(A.rows(), A.cols());
        for (std::size_t e = 0; e < targets.size(); ++e)
            gin.row(static_cast<Eigen::Index>(e)) = g.row(targets[e]);
        t.accumulate(a, gin);
    });
}

Var segment_mean(Tape& t, Var a, const std::vector<int>& targets, int n_rows) {
    const Matrix& A = t.value(a);
    check_targets("segment_mean", targets, A.rows(), n_rows);
    std::vector<double> inv_count(static_cast<std::size_t>(n_rows), 0.0);
    for (int tr : targets) inv_count[static_cast<std::size_t>(tr)] += 1.0;
    // Zero-degree rows keep a count of 1: the mean of nothing is zero, not NaN.
    for (double& c : inv_count) c = 1.0 / std::max(c, 1.0);

    Matrix out = Matrix::Zero(n_rows, A.cols());
    for (std::size_t e = 0; e < targets.size(); ++e)
        out.row(targets[e]) += A.row(static_cast<Eigen::Index>(e));
    for (int r = 0; r < n_rows; ++r) out.row(r) *= inv_count[static_cast<std::size_t>(r)];

    bool ga = t.requires_grad(a);
    return t.emit(std::move(out), ga, [a, targets, inv_count](Tape& t, const Matrix& g) {
        const Matrix& A = t.value(a);
        Matrix gin(A.rows(), A.cols());
        for (std::size_t e = 0; e < targets.size(); ++e)
            gin.row(static_cast<Eigen::Index>(e)) =
                g.row(targets[e]) * inv_count[static_cast<std::size_t>(targets[e])];
        t.accumulate(a, gin);
    });
}

Var center_rows(Tape& t, Var a) {
    const Matrix& A = t.value(a);
    if (A.rows() < 1) throw dimension_error("center_rows: need at least one row");
    Matrix out = A.rowwise() - A.colwise().mean();
    bool ga = t.requires_grad(a);
    return t.emit(std::move(out), ga, [a](Tape& t, const Matrix& g) {
        t.accumulate(a, g.rowwise() - g.colwise().mean());
    });
}

Var scale_rows(Tape& t, Var a, const Vector& factors) {
    const Matrix& A = t.value(a);
    if (factors.size() != A.rows()) throw dimension_error("scale_rows: one factor per row required");
    Matrix out = factors.asDiagonal() * A;
    bool ga = t.requires_grad(a);
    return t.emit(std::move(out), ga, [a, factors](Tape& t, const Matrix& g) {
        t.accumulate(a, factors.asDiagonal() * g);
    });
}

Var row_mix(Tape& t, Var values, const RowMixPlan& plan) {
    const Matrix& V = t.value(values);
    if (V.rows() != plan.source_rows)
        throw dimension_error("row_mix: plan source rows do not match values");
    Matrix out = Matrix::Zero(plan.target_rows(), V.cols());
    for (int r = 0; r < plan.target_rows(); ++r)
        for (const auto& [src, w] : plan.rows[static_cast<std::size_t>(r)]) {
            if (src < 0 || src >= V.rows()) throw index_error("row_mix: source row out of range");
            out.row(r) += w * V.row(src);
        }
    bool gv = t.requires_grad(values);
    // The plan is captured by value: tapes may outlive the caller's plan.
    return t.emit(std::move(out), gv, [values, plan](Tape& t, const Matrix& g) {
        const Matrix& V = t.value(values);
        Matrix gin = Matrix::Zero(V.rows(), V.cols());
        for (int r = 0; r < plan.target_rows(); ++r)
            for (const auto& [src, w] : plan.rows[static_cast<std::size_t>(r)])
                gin.row(src) += w * g.row(r);
        t.accumulate(values, gin);
    });
}

Var mse(Tape& t, Var a, Var b) {
    return mse(t, a, b, Vector::Ones(t.value(a).cols()));
}

Var mse(Tape& t, Var a, Var b, const Vector& col_weights) {
    const Matrix& A = t.value(a);
    const Matrix& B = t.value(b);
    require_same_shape("mse", A, B);
    if (col_weights.size() != A.cols())
        throw dimension_error("mse: one weight per column required");
    if (A.size() == 0) throw dimension_error("mse: empty input");

    Matrix diff = A - B;
    double denom = static_cast<double>(A.rows()) * static_cast<double>(A.cols());
    double total = 0.0;
    for (Eigen::Index j = 0; j < A.cols(); ++j)
        total += col_weights(j) * diff.col(j).squaredNorm();
    Matrix out(1, 1);
    out(0, 0) = total / denom;

    bool ga = t.requires_grad(a), gb = t.requires_grad(b);
    return t.emit(std::move(out), ga || gb,
                  [a, b, col_weights, denom, ga, gb](Tape& t, const Matrix& g) {
        Matrix d = (t.value(a) - t.value(b)) * (2.0 * g(0, 0) / denom);
        for (Eigen::Index j = 0; j < d.cols(); ++j) d.col(j) *= col_weights(j);
        if (ga) t.accumulate(a, d);
        if (gb) t.accumulate(b, -d);
    });
}

// ParamStore -------------------------------------------------------------------

int ParamStore::add(std::string name, Matrix init) {
    if (find(name) >= 0) throw contract_error("ParamStore: duplicate parameter name " + name);
    names_.push_back(std::move(name));
    values_.push_back(std::move(init));
    return count() - 1;
}

Matrix& ParamStore::value(int id) {
    if (id < 0 || id >= count()) throw index_error("ParamStore: id out of range");
    return values_[static_cast<std::size_t>(id)];
}

const Matrix& ParamStore::value(int id) const {
    if (id < 0 || id >= count()) throw index_error("ParamStore: id out of range");
    return values_[static_cast<std::size_t>(id)];
}

const std::string& ParamStore::name(int id) const {
    if (id < 0 || id >= count()) throw index_error("ParamStore: id out of range");
    return names_[static_cast<std::size_t>(id)];
}

int ParamStore::find(const std::string& name) const {
    for (int i = 0; i < count(); ++i)
        if (names_[static_cast<std::size_t>(i)] == name) return i;
    return -1;
}

std::vector<Var> watch(Tape& t, const ParamStore& params) {
    std::vector<Var> out;
    out.reserve(static_cast<std::size_t>(params.count()));
    for (int i = 0; i < params.count(); ++i) out.push_back(t.leaf(params.value(i)));
    return out;
}

std::vector<Matrix> parameter_gradients(Tape& t, std::span<const Var> watched, Var loss) {
    t.backward(loss);
    std::vector<Matrix> grads;
    grads.reserve(watched.size());
    for (Var v : watched) grads.push_back(t.grad(v));
    return grads;
}

Matrix uniform_init(int rows, int cols, int fan_in, Rng& rng) {
    if (fan_in <= 0) throw contract_error("uniform_init: fan_in must be positive");
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Matrix m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = rng.uniform(-bound, bound);
    return m;
}

// Adam --------------------------------------------------------------------------

AdamState AdamState::init(const ParamStore& params) {
    AdamState s;
    s.m.reserve(static_cast<std::size_t>(params.count()));
    s.v.reserve(static_cast<std::size_t>(params.count()));
    for (int i = 0; i < params.count(); ++i) {
        const Matrix& p = params.value(i);
        s.m.push_back(Matrix::Zero(p.rows(), p.cols()));
        s.v.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
    s.t = 0;
    return s;
}

void adam_step(ParamStore& params, std::span<const Matrix> grads, AdamState& state,
               const AdamConfig& config) {
    if (static_cast<int>(grads.size()) != params.count() ||
        state.m.size() != grads.size() || state.v.size() != grads.size())
        throw dimension_error("adam_step: parameter/gradient/state count mismatch");

    state.t += 1;
    double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
    double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));
    for (int i = 0; i < params.count(); ++i) {
        auto idx = static_cast<std::size_t>(i);
        const Matrix& g = grads[idx];
        Matrix& p = params.value(i);
        require_same_shape("adam_step", p, g);
        state.m[idx] = config.beta1 * state.m[idx] + (1.0 - config.beta1) * g;
        state.v[idx] = config.beta2 * state.v[idx] + (1.0 - config.beta2) * g.cwiseProduct(g);
        Matrix m_hat = state.m[idx] / bc1;
        Matrix v_hat = state.v[idx] / bc2;
        p.array() -= config.lr * m_hat.array() / (v_hat.array().sqrt() + config.eps);
    }
}

}  // namespace meshsr::grad
