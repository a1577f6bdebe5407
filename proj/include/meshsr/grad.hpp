#pragma once

#include <Eigen/Dense>

#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "meshsr/common.hpp"

// Reverse-mode automatic differentiation over dense 64-bit matrices.
//
// A Tape is rebuilt for every optimization step (define-by-run): forward
// calls append nodes, backward() walks the nodes in reverse creation order,
// which is a valid topological order because an op can only consume values
// that already exist. Scalars are 1x1 matrices.

namespace meshsr::grad {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

class Tape;

// Handle into a Tape. Only valid for the tape that produced it.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Sparse row-mixing map: out.row(t) = sum_j weight * src.row(index) over
// rows[t]. This is the differentiable core of k-nearest-neighbor
// interpolation; the weights are constants, so the backward pass is the
// transposed scatter of the same weights.
struct RowMixPlan {
    int source_rows = 0;
    std::vector<std::vector<std::pair<int, double>>> rows;

    int target_rows() const { return static_cast<int>(rows.size()); }
};

class Tape {
public:
    using PullFn = std::function<void(Tape&, const Matrix&)>;

    // Leaf that participates in differentiation (parameters, inputs under test).
    Var leaf(Matrix value);
    // Leaf that never receives a gradient (data, cached interpolations).
    Var constant(Matrix value);

    const Matrix& value(Var v) const { return node(v).value; }
    bool requires_grad(Var v) const { return node(v).requires_grad; }
    int size() const { return static_cast<int>(nodes_.size()); }

    // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
    // reachable differentiable node. `loss` must be 1x1.
    void backward(Var loss);

    // Gradient accumulated by the last backward(). Zero matrix of the node's
    // shape when the node was unreachable from the loss.
    Matrix grad(Var v) const;

    // Op plumbing -----------------------------------------------------------
    Var emit(Matrix value, bool requires_grad, PullFn pull);
    void accumulate(Var parent, const Matrix& g);

private:
    struct Node {
        Matrix value;
        PullFn pull;  // empty for leaves and gradient-free nodes
        bool requires_grad = false;
    };

    const Node& node(Var v) const {
        if (v.id < 0 || v.id >= size()) throw index_error("Tape: variable id out of range");
        return nodes_[static_cast<std::size_t>(v.id)];
    }

    std::vector<Node> nodes_;
    std::vector<Matrix> grads_;
    std::vector<char> has_grad_;
};

// Elementwise / structural ops ----------------------------------------------

Var matmul(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);          // elementwise
Var scale(Tape& t, Var a, double c);
Var add_const(Tape& t, Var a, double c);
Var mul_scalar(Tape& t, Var a, Var s);   // s is 1x1, broadcast multiply
Var relu(Tape& t, Var a);
Var concat_cols(Tape& t, std::span<const Var> parts);
Var concat_cols(Tape& t, Var a, Var b);
Var concat_cols(Tape& t, Var a, Var b, Var c);
Var add_row_vector(Tape& t, Var a, Var row);  // row is 1 x cols, broadcast over rows
Var sum(Tape& t, Var a);                      // 1x1 total

// Graph ops ------------------------------------------------------------------

// out.row(r) = a.row(indices[r]); backward scatter-adds, the exact adjoint.
Var gather_rows(Tape& t, Var a, const std::vector<int>& indices);

// out has n_rows rows; out.row(targets[e]) += a.row(e).
Var segment_sum(Tape& t, Var a, const std::vector<int>& targets, int n_rows);

// Like segment_sum but divides each output row by its element count; rows
// with no incoming segment keep count 1 so they stay zero instead of NaN.
Var segment_mean(Tape& t, Var a, const std::vector<int>& targets, int n_rows);

// Subtracts the column mean from every row. The Jacobian is the centering
// projection itself (symmetric and idempotent), so the backward pass applies
// the same projection to the upstream gradient.
Var center_rows(Tape& t, Var a);

// out.row(i) = factors[i] * a.row(i) with constant factors.
Var scale_rows(Tape& t, Var a, const Vector& factors);

// Applies a RowMixPlan (differentiable with respect to the values only).
Var row_mix(Tape& t, Var values, const RowMixPlan& plan);

// Mean of (optionally column-weighted) squared differences:
//   mse = sum_ij w_j (a - b)_ij^2 / (rows * cols).
// Weights of all ones reproduce the unweighted mean.
Var mse(Tape& t, Var a, Var b);
Var mse(Tape& t, Var a, Var b, const Vector& col_weights);

// Parameters -----------------------------------------------------------------

// Flat registry of named learnable matrices. Registration order is the
// canonical order for gradients, optimizer state and checkpoints.
class ParamStore {
public:
    int add(std::string name, Matrix init);
    int count() const { return static_cast<int>(values_.size()); }
    Matrix& value(int id);
    const Matrix& value(int id) const;
    const std::string& name(int id) const;
    int find(const std::string& name) const;  // -1 when absent

private:
    std::vector<std::string> names_;
    std::vector<Matrix> values_;
};

// Creates one differentiable leaf per parameter, in registration order.
std::vector<Var> watch(Tape& t, const ParamStore& params);

// Gradients of `loss` for every parameter, in registration order (zero for
// parameters the loss does not reach). Calls t.backward(loss).
std::vector<Matrix> parameter_gradients(Tape& t, std::span<const Var> watched, Var loss);

// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
Matrix uniform_init(int rows, int cols, int fan_in, Rng& rng);

// Adam -----------------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<Matrix> m;
    std::vector<Matrix> v;
    long t = 0;

    static AdamState init(const ParamStore& params);
};

// One bias-corrected Adam update over all parameters.
void adam_step(ParamStore& params, std::span<const Matrix> grads, AdamState& state,
               const AdamConfig& config);

}  // namespace meshsr::grad
