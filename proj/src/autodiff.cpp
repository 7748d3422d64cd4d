#include "unifar/autodiff.hpp"

#include "unifar/error.hpp"

#include <cmath>
#include <numbers>

namespace unifar::ad {

std::string param_group_name(ParamGroup group) {
    switch (group) {
        case ParamGroup::kBase: return "base";
        case ParamGroup::kAnchors: return "anchors";
        case ParamGroup::kAggregation: return "aggregation";
    }
    return "unknown";
}

const Matrix& Var::value() const { return tape_->value(id_); }

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

// ---- Tape -------------------------------------------------------------------

Var Tape::constant(Matrix value) {
    nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
    return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::parameter(Parameter& p, bool trainable) {
    nodes_.push_back(Node{p.value, {}, {}, trainable ? &p : nullptr, trainable});
    return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::detach(const Var& x) {
    if (replaying_) {
        if (replay_pos_ >= replay_.size()) {
            throw Error(ErrorKind::kShapeMismatch, "detach replay exhausted");
        }
        const Matrix& v = replay_[replay_pos_++];
        if (v.rows() != x.rows() || v.cols() != x.cols()) {
            throw Error(ErrorKind::kShapeMismatch, "detach replay shape differs from live value");
        }
        detached_.push_back(v);
        return constant(v);
    }
    detached_.push_back(x.value());
    return constant(x.value());
}

void Tape::replay_detached(std::vector<Matrix> values) {
    replay_ = std::move(values);
    replaying_ = true;
    replay_pos_ = 0;
}

Var Tape::make_node(Matrix value, std::initializer_list<Var> inputs, Backward fn) {
    bool needs = false;
    for (const Var& v : inputs) needs = needs || v.requires_grad();
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : Backward{}, nullptr, needs});
    return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::make_node(Matrix value, const std::vector<Var>& inputs, Backward fn) {
    bool needs = false;
    for (const Var& v : inputs) needs = needs || v.requires_grad();
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : Backward{}, nullptr, needs});
    return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::backward(const Var& scalar_output) {
    if (scalar_output.rows() != 1 || scalar_output.cols() != 1) {
        throw Error(ErrorKind::kShapeMismatch, "backward() needs a 1x1 output");
    }
    for (Node& n : nodes_) {
        if (n.requires_grad) n.grad.setZero(n.value.rows(), n.value.cols());
    }
    const auto out = static_cast<std::size_t>(scalar_output.id());
    if (!nodes_[out].requires_grad) return;
    nodes_[out].grad(0, 0) = 1.0;
    for (std::size_t i = out + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad) continue;
        if (n.backward) n.backward(*this, n.grad);
        if (n.param != nullptr) n.param->grad += n.grad;
    }
}

// ---- Binder -------------------------------------------------------------------

Var Binder::operator()(const Parameter& p) {
    for (const auto& [param, var] : bound_) {
        if (param == &p) return var;
    }
    // Trainable binders are only created by callers holding the model mutably;
    // backward() writes nothing but Parameter::grad.
    Var v = trainable_ ? tape_.parameter(const_cast<Parameter&>(p), true) : tape_.constant(p.value);
    bound_.emplace_back(&p, v);
    return v;
}

// ---- helpers ------------------------------------------------------------------

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw Error(ErrorKind::kShapeMismatch, std::string(op) + ": operand shapes differ");
    }
}

template <typename Expr>
void accumulate(Tape& t, const Var& v, const Expr& g) {
    if (v.requires_grad()) t.grad(v.id()) += g;
}

}  // namespace

// ---- elementwise / linear algebra ---------------------------------------------

Var matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) throw Error(ErrorKind::kShapeMismatch, "matmul: inner dimensions differ");
    return a.tape().make_node(a.value() * b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
        accumulate(t, a, g * b.value().transpose());
        accumulate(t, b, a.value().transpose() * g);
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    if (a.cols() != b.cols()) throw Error(ErrorKind::kShapeMismatch, "matmul_nt: inner dimensions differ");
    return a.tape().make_node(a.value() * b.value().transpose(), {a, b}, [a, b](Tape& t, const Matrix& g) {
        accumulate(t, a, g * b.value());
        accumulate(t, b, g.transpose() * a.value());
    });
}

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    return a.tape().make_node(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
        accumulate(t, a, g);
        accumulate(t, b, g);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    return a.tape().make_node(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
        accumulate(t, a, g);
        accumulate(t, b, -g);
    });
}

Var scale(const Var& a, double s) {
    return a.tape().make_node(a.value() * s, {a}, [a, s](Tape& t, const Matrix& g) { accumulate(t, a, g * s); });
}

Var add_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw Error(ErrorKind::kShapeMismatch, "add_row: bias must be 1 x cols");
    }
    Matrix v = a.value().rowwise() + row.value().row(0);
    return a.tape().make_node(std::move(v), {a, row}, [a, row](Tape& t, const Matrix& g) {
        accumulate(t, a, g);
        accumulate(t, row, g.colwise().sum());
    });
}

Var repeat_rows(const Var& row, Eigen::Index n) {
    if (row.rows() != 1) throw Error(ErrorKind::kShapeMismatch, "repeat_rows: input must be a single row");
    Matrix v = row.value().replicate(n, 1);
    return row.tape().make_node(std::move(v), {row}, [row](Tape& t, const Matrix& g) {
        accumulate(t, row, g.colwise().sum());
    });
}

Var gelu(const Var& a) {
    const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
    Matrix v = a.value().unaryExpr([inv_sqrt2](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); });
    return a.tape().make_node(std::move(v), {a}, [a, inv_sqrt2](Tape& t, const Matrix& g) {
        const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        Matrix d = a.value().unaryExpr([&](double x) {
            return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
        });
        accumulate(t, a, g.cwiseProduct(d));
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Eigen::Index n = x.rows(), h = x.cols();
    if (gamma.rows() != 1 || gamma.cols() != h || beta.rows() != 1 || beta.cols() != h) {
        throw Error(ErrorKind::kShapeMismatch, "layer_norm: gamma/beta must be 1 x h");
    }
    Matrix xhat(n, h);
    Eigen::VectorXd inv_std(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double mu = x.value().row(i).mean();
        const double var = (x.value().row(i).array() - mu).square().mean();
        inv_std(i) = 1.0 / std::sqrt(var + eps);
        xhat.row(i) = (x.value().row(i).array() - mu) * inv_std(i);
    }
    Matrix v = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
    return x.tape().make_node(std::move(v), {x, gamma, beta},
                              [x, gamma, beta, xhat, inv_std](Tape& t, const Matrix& g) {
        accumulate(t, beta, g.colwise().sum());
        accumulate(t, gamma, g.cwiseProduct(xhat).colwise().sum());
        if (!x.requires_grad()) return;
        Matrix dxhat = g.array().rowwise() * gamma.value().row(0).array();
        Matrix dx(dxhat.rows(), dxhat.cols());
        for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
            const double m1 = dxhat.row(i).mean();
            const double m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
            dx.row(i) = inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
        }
        t.grad(x.id()) += dx;
    });
}

Var softmax_rows(const Var& a) {
    Matrix v = a.value();
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
        const double m = v.row(i).maxCoeff();
        v.row(i) = (v.row(i).array() - m).exp();
        v.row(i) /= v.row(i).sum();
    }
    Matrix y = v;
    return a.tape().make_node(std::move(v), {a}, [a, y](Tape& t, const Matrix& g) {
        Eigen::VectorXd dots = g.cwiseProduct(y).rowwise().sum();
        Matrix d = y.cwiseProduct(g.colwise() - dots);
        accumulate(t, a, d);
    });
}

// ---- structural ---------------------------------------------------------------

Var gather_rows(const Var& a, const std::vector<int>& rows) {
    Matrix v(static_cast<Eigen::Index>(rows.size()), a.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= a.rows()) throw Error(ErrorKind::kShapeMismatch, "gather_rows: index out of range");
        v.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
    }
    return a.tape().make_node(std::move(v), {a}, [a, rows](Tape& t, const Matrix& g) {
        if (!a.requires_grad()) return;
        Matrix& ga = t.grad(a.id());
        for (std::size_t i = 0; i < rows.size(); ++i) ga.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
    });
}

Var slice_cols(const Var& a, Eigen::Index first, Eigen::Index count) {
    if (first < 0 || count < 0 || first + count > a.cols()) throw Error(ErrorKind::kShapeMismatch, "slice_cols: out of range");
    Matrix v = a.value().middleCols(first, count);
    return a.tape().make_node(std::move(v), {a}, [a, first, count](Tape& t, const Matrix& g) {
        if (a.requires_grad()) t.grad(a.id()).middleCols(first, count) += g;
    });
}

Var select(const Var& a, const std::vector<int>& rows, const std::vector<int>& cols) {
    Matrix v(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < cols.size(); ++j) {
            if (rows[i] < 0 || rows[i] >= a.rows() || cols[j] < 0 || cols[j] >= a.cols()) {
                throw Error(ErrorKind::kShapeMismatch, "select: index out of range");
            }
            v(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = a.value()(rows[i], cols[j]);
        }
    }
    return a.tape().make_node(std::move(v), {a}, [a, rows, cols](Tape& t, const Matrix& g) {
        if (!a.requires_grad()) return;
        Matrix& ga = t.grad(a.id());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            for (std::size_t j = 0; j < cols.size(); ++j) {
                ga(rows[i], cols[j]) += g(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
            }
        }
    });
}

Var hconcat(const std::vector<Var>& parts) {
    if (parts.empty()) throw Error(ErrorKind::kShapeMismatch, "hconcat: no parts");
    const Eigen::Index rows = parts.front().rows();
    Eigen::Index cols = 0;
    for (const Var& p : parts) {
        if (p.rows() != rows) throw Error(ErrorKind::kShapeMismatch, "hconcat: row counts differ");
        cols += p.cols();
    }
    Matrix v(rows, cols);
    Eigen::Index at = 0;
    for (const Var& p : parts) {
        v.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    return parts.front().tape().make_node(std::move(v), parts, [parts](Tape& t, const Matrix& g) {
        Eigen::Index off = 0;
        for (const Var& p : parts) {
            accumulate(t, p, g.middleCols(off, p.cols()));
            off += p.cols();
        }
    });
}

Var vconcat(const std::vector<Var>& parts) {
    if (parts.empty()) throw Error(ErrorKind::kShapeMismatch, "vconcat: no parts");
    const Eigen::Index cols = parts.front().cols();
    Eigen::Index rows = 0;
    for (const Var& p : parts) {
        if (p.cols() != cols) throw Error(ErrorKind::kShapeMismatch, "vconcat: column counts differ");
        rows += p.rows();
    }
    Matrix v(rows, cols);
    Eigen::Index at = 0;
    for (const Var& p : parts) {
        v.middleRows(at, p.rows()) = p.value();
        at += p.rows();
    }
    return parts.front().tape().make_node(std::move(v), parts, [parts](Tape& t, const Matrix& g) {
        Eigen::Index off = 0;
        for (const Var& p : parts) {
            accumulate(t, p, g.middleRows(off, p.rows()));
            off += p.rows();
        }
    });
}

Var mean_spans(const Var& a, const std::vector<std::pair<int, int>>& spans) {
    Matrix v(static_cast<Eigen::Index>(spans.size()), a.cols());
    for (std::size_t i = 0; i < spans.size(); ++i) {
        const auto [b, e] = spans[i];
        if (b < 0 || e > a.rows() || e <= b) throw Error(ErrorKind::kEmptyBoundary, "mean_spans: empty or invalid span");
        v.row(static_cast<Eigen::Index>(i)) = a.value().middleRows(b, e - b).colwise().mean();
    }
    return a.tape().make_node(std::move(v), {a}, [a, spans](Tape& t, const Matrix& g) {
        if (!a.requires_grad()) return;
        Matrix& ga = t.grad(a.id());
        for (std::size_t i = 0; i < spans.size(); ++i) {
            const auto [b, e] = spans[i];
            const double w = 1.0 / static_cast<double>(e - b);
            for (int r = b; r < e; ++r) ga.row(r) += w * g.row(static_cast<Eigen::Index>(i));
        }
    });
}

Var l2_normalize_rows(const Var& a, double eps) {
    Eigen::VectorXd norms = a.value().rowwise().norm();
    Eigen::VectorXd denom = norms.cwiseMax(eps);
    Matrix y = a.value().array().colwise() / denom.array();
    Matrix v = y;
    return a.tape().make_node(std::move(v), {a}, [a, y, norms, denom, eps](Tape& t, const Matrix& g) {
        if (!a.requires_grad()) return;
        Matrix d(g.rows(), g.cols());
        for (Eigen::Index i = 0; i < g.rows(); ++i) {
            if (norms(i) > eps) {
                d.row(i) = (g.row(i) - y.row(i) * g.row(i).dot(y.row(i))) / denom(i);
            } else {
                d.row(i) = g.row(i) / denom(i);
            }
        }
        t.grad(a.id()) += d;
    });
}

Var normalize_row_sums(const Var& a) {
    Eigen::VectorXd sums = a.value().rowwise().sum();
    Matrix y = a.value().array().colwise() / sums.array();
    Matrix v = y;
    return a.tape().make_node(std::move(v), {a}, [a, y, sums](Tape& t, const Matrix& g) {
        Eigen::VectorXd dots = g.cwiseProduct(y).rowwise().sum();
        Matrix d = (g.colwise() - dots).array().colwise() / sums.array();
        accumulate(t, a, d);
    });
}

// ---- reductions / losses ------------------------------------------------------

Var sum(const Var& a) {
    Matrix v(1, 1);
    v(0, 0) = a.value().sum();
    return a.tape().make_node(std::move(v), {a}, [a](Tape& t, const Matrix& g) {
        accumulate(t, a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
    });
}

Var add_all(const std::vector<Var>& scalars) {
    if (scalars.empty()) throw Error(ErrorKind::kShapeMismatch, "add_all: no terms");
    Matrix v = Matrix::Zero(1, 1);
    for (const Var& s : scalars) {
        if (s.rows() != 1 || s.cols() != 1) throw Error(ErrorKind::kShapeMismatch, "add_all: terms must be scalars");
        v(0, 0) += s.scalar();
    }
    return scalars.front().tape().make_node(std::move(v), scalars, [scalars](Tape& t, const Matrix& g) {
        for (const Var& s : scalars) accumulate(t, s, g);
    });
}

Var mean(const std::vector<Var>& scalars) {
    return scale(add_all(scalars), 1.0 / static_cast<double>(scalars.size()));
}

Var multi_positive_nce(const Var& logits, Eigen::Index positives) {
    if (logits.rows() != 1 || positives < 1 || positives > logits.cols()) {
        throw Error(ErrorKind::kShapeMismatch, "multi_positive_nce: need a logits row with at least one positive");
    }
    const RowVector z = logits.value().row(0);
    const double m = z.maxCoeff();
    const double lse = m + std::log((z.array() - m).exp().sum());
    Matrix v(1, 1);
    v(0, 0) = lse - z.head(positives).mean();
    return logits.tape().make_node(std::move(v), {logits}, [logits, positives, z, lse](Tape& t, const Matrix& g) {
        RowVector d = (z.array() - lse).exp();
        d.head(positives).array() -= 1.0 / static_cast<double>(positives);
        accumulate(t, logits, g(0, 0) * d);
    });
}

Var kl_rows(const Matrix& target, const Var& pred, double eps, double divisor) {
    if (target.rows() != pred.rows() || target.cols() != pred.cols()) {
        throw Error(ErrorKind::kShapeMismatch, "kl_rows: target and prediction shapes differ");
    }
    const Matrix& p = pred.value();
    double acc = 0.0;
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        for (Eigen::Index j = 0; j < p.cols(); ++j) {
            const double tv = target(i, j);
            if (tv > 0.0) acc += tv * std::log(tv / std::max(p(i, j), eps));
        }
    }
    Matrix v(1, 1);
    v(0, 0) = acc / divisor;
    return pred.tape().make_node(std::move(v), {pred}, [pred, target, eps, divisor](Tape& t, const Matrix& g) {
        const Matrix& pv = pred.value();
        Matrix d = Matrix::Zero(pv.rows(), pv.cols());
        for (Eigen::Index i = 0; i < pv.rows(); ++i) {
            for (Eigen::Index j = 0; j < pv.cols(); ++j) {
                if (target(i, j) > 0.0 && pv(i, j) > eps) d(i, j) = -target(i, j) / (pv(i, j) * divisor);
            }
        }
        accumulate(t, pred, g(0, 0) * d);
    });
}

}  // namespace unifar::ad
