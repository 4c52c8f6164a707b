#pragma once
// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// Every differentiable op checks for an active Tape on the current thread. If
// one is present and any input requires a gradient, the op appends a backward
// closure to it. Tape::backward replays the closures in reverse execution
// order, which is a valid reverse topological order of the graph.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "depthprune/errors.hpp"

namespace depthprune {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;

    std::span<double> grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        for (auto d : shape)
            if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape));
        auto impl = std::make_shared<TensorImpl>();
        impl->data.assign(shape_numel(shape), 0.0);
        impl->shape = std::move(shape);
        impl->requires_grad = requires_grad;
        return Tensor(std::move(impl));
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
        return t;
    }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size())
            throw DimensionError("shape " + shape_str(shape) + " does not match " +
                                 std::to_string(values.size()) + " values");
        Tensor t = zeros(std::move(shape), requires_grad);
        t.impl_->data = std::move(values);
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

    bool defined() const { return static_cast<bool>(impl_); }
    const Shape& shape() const { return impl_->shape; }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<double> data() { return impl_->data; }
    std::span<const double> data() const { return impl_->data; }
    std::vector<double>& values() { return impl_->data; }
    const std::vector<double>& values() const { return impl_->data; }

    bool has_grad() const { return !impl_->grad.empty(); }
    // Handles share one accumulator, so a const handle can still receive gradient.
    std::span<double> grad() const { return impl_->grad_buffer(); }
    void zero_grad() { impl_->grad.clear(); }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    double item() const {
        if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
        return impl_->data[0];
    }
    double operator[](std::size_t i) const { return impl_->data[i]; }

    /// Deep copy of values; the copy carries no gradient and no graph history.
    Tensor clone() const {
        Tensor t = from(shape(), impl_->data, impl_->requires_grad);
        return t;
    }
    Tensor detach() const { return from(shape(), impl_->data, false); }

    bool same_node(const Tensor& o) const { return impl_ == o.impl_; }
    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Tape

class Tape {
public:
    Tape() : previous_(current_) { current_ = this; }
    ~Tape() { current_ = previous_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return current_; }
    static Tape* exchange(Tape* t) { return std::exchange(current_, t); }

    void record(std::function<void()> backward_fn) {
        if (consumed_) throw std::logic_error("tape already consumed by backward(); start a new forward pass");
        entries_.push_back(std::move(backward_fn));
    }

    std::size_t size() const { return entries_.size(); }

    /// Seeds d(loss)/d(loss) = 1 and propagates to every recorded input.
    void backward(Tensor loss) {
        if (consumed_) throw std::logic_error("backward() called twice on the same tape");
        if (loss.numel() != 1) throw DimensionError("backward() requires a scalar loss");
        consumed_ = true;
        if (!loss.requires_grad()) return;
        loss.grad()[0] += 1.0;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
        entries_.clear();
    }

private:
    inline static thread_local Tape* current_ = nullptr;
    Tape* previous_;
    std::vector<std::function<void()>> entries_;
    bool consumed_ = false;
};

/// Suspends recording on this thread for the lifetime of the guard.
class NoGradGuard {
public:
    NoGradGuard() : saved_(Tape::exchange(nullptr)) {}
    ~NoGradGuard() { Tape::exchange(saved_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    Tape* saved_;
};

namespace detail {

inline bool wants_grad(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::active()) return false;
    for (auto* t : inputs)
        if (t && t->defined() && t->requires_grad()) return true;
    return false;
}

// Registers a backward closure; the output is marked as requiring a gradient.
template <class Fn>
void record(Tensor& out, Fn&& fn) {
    out.set_requires_grad(true);
    Tape::active()->record(std::forward<Fn>(fn));
}

// Returns true if `small` is a trailing suffix of `big` (trailing-dimension broadcast).
inline bool is_suffix(const Shape& big, const Shape& small) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<MatRM>;
using CMap = Eigen::Map<const MatRM>;

inline CMap cmat(const double* p, std::size_t r, std::size_t c) {
    return CMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline Map mat(double* p, std::size_t r, std::size_t c) {
    return Map(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

}  // namespace detail

}  // namespace depthprune
