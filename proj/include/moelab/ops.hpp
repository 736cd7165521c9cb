#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "moelab/tensor.hpp"

namespace moelab {

// Differentiable operations, free functions over Tensor + Tape. Every op
// validates shapes up front, computes the forward value, checks finiteness,
// and records a backward closure when gradients are in play. No broadcasting;
// shapes must match exactly.

namespace detail {

template <class S>
bool track(const Tape<S>& tape, std::initializer_list<bool> reqs) {
    if (!tape.recording()) return false;
    for (bool r : reqs)
        if (r) return true;
    return false;
}

}  // namespace detail

template <class S>
Tensor<S> add(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    out.values() = a.values() + b.values();
    detail::check_output_finite(tape, out, "add");
    if (detail::track(tape, {a.requires_grad(), b.requires_grad()})) {
        out.set_requires_grad(true);
        tape.record("add", [a, b, out]() mutable {
            if (a.requires_grad()) a.grad() += out.grad();
            if (b.requires_grad()) b.grad() += out.grad();
        });
    }
    return out;
}

template <class S>
Tensor<S> sub(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    out.values() = a.values() - b.values();
    detail::check_output_finite(tape, out, "sub");
    if (detail::track(tape, {a.requires_grad(), b.requires_grad()})) {
        out.set_requires_grad(true);
        tape.record("sub", [a, b, out]() mutable {
            if (a.requires_grad()) a.grad() += out.grad();
            if (b.requires_grad()) b.grad() -= out.grad();
        });
    }
    return out;
}

// Hadamard product.
template <class S>
Tensor<S> mul(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    out.values() = a.values().cwiseProduct(b.values());
    detail::check_output_finite(tape, out, "mul");
    if (detail::track(tape, {a.requires_grad(), b.requires_grad()})) {
        out.set_requires_grad(true);
        tape.record("mul", [a, b, out]() mutable {
            if (a.requires_grad())
                a.grad() += out.grad().cwiseProduct(b.values());
            if (b.requires_grad())
                b.grad() += out.grad().cwiseProduct(a.values());
        });
    }
    return out;
}

template <class S>
Tensor<S> scale(Tape<S>& tape, const Tensor<S>& a, S c) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    out.values() = a.values() * c;
    detail::check_output_finite(tape, out, "scale");
    if (detail::track(tape, {a.requires_grad()})) {
        out.set_requires_grad(true);
        tape.record("scale", [a, out, c]() mutable { a.grad() += out.grad() * c; });
    }
    return out;
}

template <class S>
Tensor<S> sum(Tape<S>& tape, const Tensor<S>& a) {
    Tensor<S> out = Tensor<S>::scalar(a.values().sum());
    detail::check_output_finite(tape, out, "sum");
    if (detail::track(tape, {a.requires_grad()})) {
        out.set_requires_grad(true);
        tape.record("sum", [a, out]() mutable {
            a.grad().array() += out.grad()[0];
        });
    }
    return out;
}

template <class S>
Tensor<S> matmul(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: rank-2 tensors required");
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions disagree: " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::zeros({a.rows(), b.cols()});
    out.mat().noalias() = a.mat() * b.mat();
    detail::check_output_finite(tape, out, "matmul");
    if (detail::track(tape, {a.requires_grad(), b.requires_grad()})) {
        out.set_requires_grad(true);
        tape.record("matmul", [a, b, out]() mutable {
            if (a.requires_grad())
                a.grad_mat().noalias() += out.grad_mat() * b.mat().transpose();
            if (b.requires_grad())
                b.grad_mat().noalias() += a.mat().transpose() * out.grad_mat();
        });
    }
    return out;
}

// out = factor * a * b^T with a:[m x k], b:[n x k].
template <class S>
Tensor<S> matmul_nt(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b, S factor = S(1)) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul_nt: rank-2 tensors required");
    if (a.cols() != b.cols())
        throw ShapeError("matmul_nt: inner dimensions disagree: " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::zeros({a.rows(), b.rows()});
    out.mat().noalias() = (a.mat() * b.mat().transpose()) * factor;
    detail::check_output_finite(tape, out, "matmul_nt");
    if (detail::track(tape, {a.requires_grad(), b.requires_grad()})) {
        out.set_requires_grad(true);
        tape.record("matmul_nt", [a, b, out, factor]() mutable {
            if (a.requires_grad())
                a.grad_mat().noalias() += (out.grad_mat() * b.mat()) * factor;
            if (b.requires_grad())
                b.grad_mat().noalias() += (out.grad_mat().transpose() * a.mat()) * factor;
        });
    }
    return out;
}

template <class S>
Tensor<S> silu(Tape<S>& tape, const Tensor<S>& a) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    out.values() = a.values().array() / (S(1) + (-a.values().array()).exp());
    detail::check_output_finite(tape, out, "silu");
    if (detail::track(tape, {a.requires_grad()})) {
        out.set_requires_grad(true);
        tape.record("silu", [a, out]() mutable {
            auto x = a.values().array();
            auto sig = S(1) / (S(1) + (-x).exp());
            a.grad().array() +=
                out.grad().array() * sig * (S(1) + x * (S(1) - sig));
        });
    }
    return out;
}

// Row-wise softmax with max subtraction. Only the last axis is supported.
template <class S>
Tensor<S> softmax(Tape<S>& tape, const Tensor<S>& a, int axis = -1) {
    if (a.rank() < 1 || a.rank() > 2)
        throw ShapeError("softmax: rank-1 or rank-2 tensor required");
    if (axis != -1 && axis != a.rank() - 1)
        throw ShapeError("softmax: only the last axis is supported");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    auto x = a.mat();
    auto y = out.mat();
    for (int i = 0; i < x.rows(); ++i) {
        const S m = x.row(i).maxCoeff();
        y.row(i) = (x.row(i).array() - m).exp();
        y.row(i) /= y.row(i).sum();
    }
    detail::check_output_finite(tape, out, "softmax");
    if (detail::track(tape, {a.requires_grad()})) {
        out.set_requires_grad(true);
        tape.record("softmax", [a, out]() mutable {
            auto y2 = out.mat();
            auto g = out.grad_mat();
            auto ga = a.grad_mat();
            for (int i = 0; i < y2.rows(); ++i) {
                const S dot = y2.row(i).dot(g.row(i));
                ga.row(i).array() +=
                    y2.row(i).array() * (g.row(i).array() - dot);
            }
        });
    }
    return out;
}

// Softmax over square score rows with entries above the diagonal masked out:
// row i attends to columns 0..i only, masked columns produce exact zeros.
template <class S>
Tensor<S> causal_masked_softmax(Tape<S>& tape, const Tensor<S>& scores) {
    if (scores.rank() != 2 || scores.rows() != scores.cols())
        throw ShapeError("causal_masked_softmax: square rank-2 tensor required");
    const int n = scores.rows();
    Tensor<S> out = Tensor<S>::zeros(scores.shape());
    auto x = scores.mat();
    auto y = out.mat();
    for (int i = 0; i < n; ++i) {
        const S m = x.row(i).head(i + 1).maxCoeff();
        y.row(i).head(i + 1) = (x.row(i).head(i + 1).array() - m).exp();
        y.row(i).head(i + 1) /= y.row(i).head(i + 1).sum();
    }
    detail::check_output_finite(tape, out, "causal_masked_softmax");
    if (detail::track(tape, {scores.requires_grad()})) {
        out.set_requires_grad(true);
        tape.record("causal_masked_softmax", [scores, out, n]() mutable {
            auto y2 = out.mat();
            auto g = out.grad_mat();
            auto gs = scores.grad_mat();
            for (int i = 0; i < n; ++i) {
                const S dot = y2.row(i).head(i + 1).dot(g.row(i).head(i + 1));
                gs.row(i).head(i + 1).array() +=
                    y2.row(i).head(i + 1).array() *
                    (g.row(i).head(i + 1).array() - dot);
            }
        });
    }
    return out;
}

// y = x / sqrt(mean(x^2) + eps) * gain, row-wise; gain has one entry per column.
template <class S>
Tensor<S> rmsnorm(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& gain, S eps) {
    if (eps < S(0)) throw ShapeError("rmsnorm: eps must be >= 0");
    if (gain.size() != x.cols())
        throw ShapeError("rmsnorm: gain length " + std::to_string(gain.size()) +
                         " does not match row width " + std::to_string(x.cols()));
    const int n = x.rows(), d = x.cols();
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    auto xm = x.mat();
    auto ym = out.mat();
    Eigen::Matrix<S, Eigen::Dynamic, 1> inv_rms(n);
    for (int i = 0; i < n; ++i) {
        const S ms = xm.row(i).squaredNorm() / S(d);
        inv_rms[i] = S(1) / std::sqrt(ms + eps);
        ym.row(i) = xm.row(i) * inv_rms[i];
        ym.row(i).array() *= gain.values().transpose().array();
    }
    detail::check_output_finite(tape, out, "rmsnorm");
    if (detail::track(tape, {x.requires_grad(), gain.requires_grad()})) {
        out.set_requires_grad(true);
        tape.record("rmsnorm", [x, gain, out, inv_rms, n, d]() mutable {
            auto xm2 = x.mat();
            auto g = out.grad_mat();
            const auto& gv = gain.values();
            for (int i = 0; i < n; ++i) {
                const S r = inv_rms[i];
                auto grow = g.row(i).array();
                auto xrow = xm2.row(i).array();
                if (x.requires_grad()) {
                    const S proj =
                        (grow * gv.transpose().array() * xrow).sum();
                    x.grad_mat().row(i).array() +=
                        r * grow * gv.transpose().array() -
                        (r * r * r / S(d)) * proj * xrow;
                }
                if (gain.requires_grad())
                    gain.grad().array() +=
                        (grow * xrow * r).transpose();
            }
        });
    }
    return out;
}

// Mean negative log-likelihood of the target column per row, stable form.
template <class S>
Tensor<S> cross_entropy(Tape<S>& tape, const Tensor<S>& logits,
                        std::span<const int> targets) {
    if (logits.rank() != 2)
        throw ShapeError("cross_entropy: rank-2 logits required");
    const int n = logits.rows(), v = logits.cols();
    if (static_cast<int>(targets.size()) != n)
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(n) + " rows");
    for (int i = 0; i < n; ++i)
        if (targets[i] < 0 || targets[i] >= v)
            throw IndexError("cross_entropy: target " + std::to_string(targets[i]) +
                             " out of range [0," + std::to_string(v) + ")");
    auto lm = logits.mat();
    S total = S(0);
    for (int i = 0; i < n; ++i) {
        const S m = lm.row(i).maxCoeff();
        const S lse = m + std::log((lm.row(i).array() - m).exp().sum());
        total += lse - lm(i, targets[i]);
    }
    Tensor<S> out = Tensor<S>::scalar(total / S(n));
    detail::check_output_finite(tape, out, "cross_entropy");
    if (detail::track(tape, {logits.requires_grad()})) {
        out.set_requires_grad(true);
        std::vector<int> tgt(targets.begin(), targets.end());
        tape.record("cross_entropy", [logits, out, tgt, n]() mutable {
            auto lm2 = logits.mat();
            auto gl = logits.grad_mat();
            const S w = out.grad()[0] / S(n);
            for (int i = 0; i < n; ++i) {
                const S m = lm2.row(i).maxCoeff();
                Eigen::Matrix<S, 1, Eigen::Dynamic> p =
                    (lm2.row(i).array() - m).exp();
                p /= p.sum();
                gl.row(i) += p * w;
                gl(i, tgt[i]) -= w;
            }
        });
    }
    return out;
}

// Row gather from an embedding table; gradients scatter-add into the table.
template <class S>
Tensor<S> embed_rows(Tape<S>& tape, const Tensor<S>& table, std::span<const int> ids) {
    if (table.rank() != 2) throw ShapeError("embed_rows: rank-2 table required");
    const int r = table.rows();
    for (int id : ids)
        if (id < 0 || id >= r)
            throw IndexError("embed_rows: id " + std::to_string(id) +
                             " out of range [0," + std::to_string(r) + ")");
    const int n = static_cast<int>(ids.size());
    Tensor<S> out = Tensor<S>::zeros({n, table.cols()});
    auto tm = table.mat();
    auto om = out.mat();
    for (int i = 0; i < n; ++i) om.row(i) = tm.row(ids[i]);
    detail::check_output_finite(tape, out, "embed_rows");
    if (detail::track(tape, {table.requires_grad()})) {
        out.set_requires_grad(true);
        std::vector<int> iv(ids.begin(), ids.end());
        tape.record("embed_rows", [table, out, iv]() mutable {
            auto gt = table.grad_mat();
            auto go = out.grad_mat();
            for (std::size_t i = 0; i < iv.size(); ++i)
                gt.row(iv[i]) += go.row(i);
        });
    }
    return out;
}

template <class S>
Tensor<S> gather_rows(Tape<S>& tape, const Tensor<S>& x, std::span<const int> rows) {
    if (x.rank() != 2) throw ShapeError("gather_rows: rank-2 tensor required");
    const int r = x.rows();
    for (int id : rows)
        if (id < 0 || id >= r)
            throw IndexError("gather_rows: row " + std::to_string(id) +
                             " out of range [0," + std::to_string(r) + ")");
    const int n = static_cast<int>(rows.size());
    Tensor<S> out = Tensor<S>::zeros({n, x.cols()});
    auto xm = x.mat();
    auto om = out.mat();
    for (int i = 0; i < n; ++i) om.row(i) = xm.row(rows[i]);
    detail::check_output_finite(tape, out, "gather_rows");
    if (detail::track(tape, {x.requires_grad()})) {
        out.set_requires_grad(true);
        std::vector<int> iv(rows.begin(), rows.end());
        tape.record("gather_rows", [x, out, iv]() mutable {
            auto gx = x.grad_mat();
            auto go = out.grad_mat();
            for (std::size_t i = 0; i < iv.size(); ++i)
                gx.row(iv[i]) += go.row(i);
        });
    }
    return out;
}

template <class S>
Tensor<S> slice_block(Tape<S>& tape, const Tensor<S>& x, int r0, int nrows,
                      int c0, int ncols) {
    if (x.rank() != 2) throw ShapeError("slice_block: rank-2 tensor required");
    if (r0 < 0 || c0 < 0 || r0 + nrows > x.rows() || c0 + ncols > x.cols())
        throw ShapeError("slice_block: block out of bounds");
    Tensor<S> out = Tensor<S>::zeros({nrows, ncols});
    out.mat() = x.mat().block(r0, c0, nrows, ncols);
    detail::check_output_finite(tape, out, "slice_block");
    if (detail::track(tape, {x.requires_grad()})) {
        out.set_requires_grad(true);
        tape.record("slice_block", [x, out, r0, c0, nrows, ncols]() mutable {
            x.grad_mat().block(r0, c0, nrows, ncols) += out.grad_mat();
        });
    }
    return out;
}

struct BlockCoord {
    int r0 = 0;
    int c0 = 0;
};

// Write disjoint pieces into a zero matrix of the given shape. Pieces must
// not overlap; uncovered entries stay zero.
template <class S>
Tensor<S> assemble_blocks(Tape<S>& tape, Shape out_shape,
                          const std::vector<Tensor<S>>& pieces,
                          const std::vector<BlockCoord>& at) {
    if (out_shape.size() != 2)
        throw ShapeError("assemble_blocks: rank-2 output required");
    if (pieces.size() != at.size())
        throw ShapeError("assemble_blocks: pieces/coords length mismatch");
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    auto om = out.mat();
    bool rg = false;
    for (std::size_t i = 0; i < pieces.size(); ++i) {
        const auto& p = pieces[i];
        if (at[i].r0 < 0 || at[i].c0 < 0 || at[i].r0 + p.rows() > out.rows() ||
            at[i].c0 + p.cols() > out.cols())
            throw ShapeError("assemble_blocks: piece out of bounds");
        om.block(at[i].r0, at[i].c0, p.rows(), p.cols()) = p.mat();
        rg = rg || p.requires_grad();
    }
    detail::check_output_finite(tape, out, "assemble_blocks");
    if (tape.recording() && rg) {
        out.set_requires_grad(true);
        std::vector<Tensor<S>> ps = pieces;
        std::vector<BlockCoord> cs = at;
        tape.record("assemble_blocks", [ps, cs, out]() mutable {
            auto go = out.grad_mat();
            for (std::size_t i = 0; i < ps.size(); ++i)
                if (ps[i].requires_grad())
                    ps[i].grad_mat() +=
                        go.block(cs[i].r0, cs[i].c0, ps[i].rows(), ps[i].cols());
        });
    }
    return out;
}

}  // namespace moelab
