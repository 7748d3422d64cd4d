#pragma once

// Minimal reverse-mode differentiation over dense double matrices.
//
// A Tape records every operation of one forward pass. Parameters enter as
// leaves; backward() accumulates d(scalar)/d(param) into Parameter::grad.
// detach() cuts gradient flow while keeping the value, and its values can be
// recorded and replayed so that finite-difference probes see the same
// stop-gradient semantics as backprop.

#include <Eigen/Dense>

#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace unifar::ad {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

enum class ParamGroup { kBase, kAnchors, kAggregation };

std::string param_group_name(ParamGroup group);

struct Parameter {
    std::string name;
    ParamGroup group = ParamGroup::kAggregation;
    Matrix value;
    Matrix grad;

    Parameter() = default;
    Parameter(std::string n, ParamGroup g, Matrix v)
        : name(std::move(n)), group(g), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

class Var {
public:
    Var() = default;

    const Matrix& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    double scalar() const { return value()(0, 0); }
    bool requires_grad() const;
    bool valid() const { return tape_ != nullptr; }
    Tape& tape() const { return *tape_; }
    int id() const { return id_; }

private:
    friend class Tape;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    int id_ = -1;
};

class Tape {
public:
    // Receives the gradient flowing into the node's output.
    using Backward = std::function<void(Tape&, const Matrix&)>;

    Tape() { nodes_.reserve(256); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix value);
    // Leaf bound to p; backward() adds into p.grad. A non-trainable binding
    // behaves as a constant.
    Var parameter(Parameter& p, bool trainable = true);
    Var detach(const Var& x);

    // Detach-site values are visited in forward order. Record them once, then
    // replay them on later tapes to evaluate the same stop-gradient surrogate.
    const std::vector<Matrix>& detached_values() const { return detached_; }
    void replay_detached(std::vector<Matrix> values);

    // Zeroes all node gradients, seeds d(out)/d(out)=1 and propagates.
    void backward(const Var& scalar_output);

    Var make_node(Matrix value, std::initializer_list<Var> inputs, Backward fn);
    Var make_node(Matrix value, const std::vector<Var>& inputs, Backward fn);

    const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    Matrix& grad(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }
    bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        Backward backward;
        Parameter* param = nullptr;
        bool requires_grad = false;
    };

    std::vector<Node> nodes_;
    std::vector<Matrix> detached_;
    std::vector<Matrix> replay_;
    bool replaying_ = false;
    std::size_t replay_pos_ = 0;
};

// Binds parameters to leaves of one tape, once each. A trainable binder routes
// gradients back into the parameters; a constant binder only reads them.
class Binder {
public:
    Binder(Tape& tape, bool trainable) : tape_(tape), trainable_(trainable) {}

    Var operator()(const Parameter& p);
    Tape& tape() const { return tape_; }
    bool trainable() const { return trainable_; }

private:
    Tape& tape_;
    bool trainable_;
    std::vector<std::pair<const Parameter*, Var>> bound_;
};

// ---- elementwise / linear algebra -------------------------------------------

Var matmul(const Var& a, const Var& b);
// a * b^T
Var matmul_nt(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scale(const Var& a, double s);
// Adds a 1×n row to every row of a.
Var add_row(const Var& a, const Var& row);
Var repeat_rows(const Var& row, Eigen::Index n);
Var gelu(const Var& a);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var softmax_rows(const Var& a);

// ---- structural ---------------------------------------------------------------

Var gather_rows(const Var& a, const std::vector<int>& rows);
Var slice_cols(const Var& a, Eigen::Index first, Eigen::Index count);
Var select(const Var& a, const std::vector<int>& rows, const std::vector<int>& cols);
Var hconcat(const std::vector<Var>& parts);
Var vconcat(const std::vector<Var>& parts);
// Row i of the result is the mean of rows [spans[i].first, spans[i].second).
Var mean_spans(const Var& a, const std::vector<std::pair<int, int>>& spans);
Var l2_normalize_rows(const Var& a, double eps = 1e-12);
// Divides every row by its sum.
Var normalize_row_sums(const Var& a);

// ---- reductions / losses ------------------------------------------------------

Var sum(const Var& a);
Var mean(const std::vector<Var>& scalars);
Var add_all(const std::vector<Var>& scalars);
// -(1/P) Σ_{i<P} log softmax(logits)_i for a 1×K logits row whose first P
// entries are positives.
Var multi_positive_nce(const Var& logits, Eigen::Index positives);
// Σ target·log(target/max(pred, eps)) / divisor; entries with target 0 add 0.
Var kl_rows(const Matrix& target, const Var& pred, double eps, double divisor);

}  // namespace unifar::ad
