#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "moelab/error.hpp"

namespace moelab {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) {
        if (d <= 0) throw ShapeError("shape dimensions must be positive");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace detail {

template <class S>
struct TensorStorage {
    Eigen::Matrix<S, Eigen::Dynamic, 1> value;
    Eigen::Matrix<S, Eigen::Dynamic, 1> grad;  // empty until first touch
    bool requires_grad = false;
};

}  // namespace detail

// Dense tensor of rank 0..2 backed by a contiguous flat buffer. Handles are
// value-semantic and share storage; the shape lives in the handle, so
// `reshaped` views alias the same buffer. `clone` deep-copies. Rank-1
// tensors act as row vectors wherever a matrix view is needed.
template <class S>
class Tensor {
public:
    using Scalar = S;
    using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
    using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MatMap = Eigen::Map<Mat>;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.shape_ = std::move(shape);
        t.p_ = std::make_shared<detail::TensorStorage<S>>();
        t.p_->value = Vec::Zero(shape_numel(t.shape_));
        t.p_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(Shape shape, S v, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        t.p_->value.setConstant(v);
        return t;
    }

    static Tensor from(Shape shape, std::vector<S> data, bool requires_grad = false) {
        Tensor t;
        t.shape_ = std::move(shape);
        t.p_ = std::make_shared<detail::TensorStorage<S>>();
        const std::int64_t n = shape_numel(t.shape_);
        if (n != static_cast<std::int64_t>(data.size()))
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(t.shape_));
        t.p_->value = Eigen::Map<const Vec>(data.data(), n);
        t.p_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(S v, bool requires_grad = false) {
        return full(Shape{}, v, requires_grad);
    }

    bool defined() const { return static_cast<bool>(p_); }
    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t size() const { return p_->value.size(); }

    // Rank-2 -> (rows, cols); rank-1 -> (1, n); rank-0 -> (1, 1).
    int rows() const { return rank() == 2 ? shape_[0] : 1; }
    int cols() const {
        switch (rank()) {
            case 2: return shape_[1];
            case 1: return shape_[0];
            default: return 1;
        }
    }

    // Same storage under a new shape with equal element count.
    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != size())
            throw ShapeError("reshape " + shape_str(shape_) + " -> " +
                             shape_str(shape) + " changes element count");
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    bool requires_grad() const { return p_->requires_grad; }
    void set_requires_grad(bool b) const { p_->requires_grad = b; }

    // Handles behave like shared_ptr: a const handle still reaches mutable
    // storage. Backward closures rely on this — they capture tensors by
    // value and accumulate into their grads.
    Vec& values() const { return p_->value; }

    S item() const {
        if (size() != 1) throw ShapeError("item() needs a single-element tensor");
        return p_->value[0];
    }

    MatMap mat() const { return MatMap(p_->value.data(), rows(), cols()); }

    bool has_grad() const { return p_->grad.size() == size() && size() > 0; }

    Vec& grad() const {
        if (p_->grad.size() != size()) p_->grad = Vec::Zero(size());
        return p_->grad;
    }

    MatMap grad_mat() const { return MatMap(grad().data(), rows(), cols()); }

    void zero_grad() const {
        if (p_->grad.size() > 0) p_->grad.setZero();
    }

    Tensor clone(bool requires_grad) const {
        Tensor t;
        t.shape_ = shape_;
        t.p_ = std::make_shared<detail::TensorStorage<S>>();
        t.p_->value = p_->value;
        t.p_->requires_grad = requires_grad;
        return t;
    }

    bool same_storage(const Tensor& o) const { return p_ == o.p_; }

    bool all_finite() const { return p_->value.allFinite(); }

private:
    Shape shape_;
    std::shared_ptr<detail::TensorStorage<S>> p_;
};

// Define-by-run gradient tape. Nodes are recorded in creation order; the
// backward sweep walks them once in reverse, which is a valid reverse
// topological order because an op can only consume tensors that already
// exist. Cleared between optimizer steps.
template <class S>
class Tape {
public:
    struct Node {
        std::string op;
        std::function<void()> backward;
    };

    bool recording() const { return recording_; }
    void set_recording(bool b) { recording_ = b; }

    // Forward-pass finiteness checking (NaN/Inf raises NumericError).
    bool check_finite() const { return check_finite_; }
    void set_check_finite(bool b) { check_finite_ = b; }

    // Diagnostics label attached to errors, e.g. "layer3.moe".
    void set_scope(std::string s) { scope_ = std::move(s); }
    const std::string& scope() const { return scope_; }

    void record(std::string op, std::function<void()> backward) {
        nodes_.push_back(Node{std::move(op), std::move(backward)});
    }

    std::size_t node_count() const { return nodes_.size(); }

    void backward(Tensor<S> root) {
        if (root.size() != 1)
            throw ShapeError("backward root must be a scalar");
        root.grad().setConstant(S(1));
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
    }

    void clear() {
        nodes_.clear();
        scope_.clear();
    }

private:
    std::vector<Node> nodes_;
    std::string scope_;
    bool recording_ = true;
    bool check_finite_ = true;
};

namespace detail {

template <class S>
void check_output_finite(const Tape<S>& tape, const Tensor<S>& t, const char* op) {
    if (tape.check_finite() && !t.all_finite()) {
        std::string where = tape.scope().empty() ? std::string(op)
                                                 : tape.scope() + ": " + op;
        throw NumericError("non-finite values produced by " + where);
    }
}

}  // namespace detail

}  // namespace moelab
