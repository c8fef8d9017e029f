#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "robumtl/common.hpp"

namespace robumtl {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

template <typename T>
class Tape;

// Dense tensor handle with value semantics over shared storage. Gradient
// buffer is allocated lazily when the tensor participates in a recorded
// graph with requires_grad set.
template <typename T>
class Tensor {
public:
    struct Data {
        Shape shape;
        std::vector<T> values;
        std::vector<T> grad;  // empty or same length as values
        bool requires_grad = false;
    };

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false, Tape<T>* tape = nullptr) {
        Tensor t;
        t.d_ = std::make_shared<Data>();
        t.d_->shape = std::move(shape);
        t.d_->values.assign(static_cast<size_t>(shape_numel(t.d_->shape)), T(0));
        t.d_->requires_grad = requires_grad;
        if (requires_grad) t.d_->grad.assign(t.d_->values.size(), T(0));
        t.tape_ = tape;
        return t;
    }

    static Tensor from_values(Shape shape, std::vector<T> values, bool requires_grad = false,
                              Tape<T>* tape = nullptr) {
        if (static_cast<int64_t>(values.size()) != shape_numel(shape))
            throw DimensionError("tensor data length " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(shape));
        Tensor t;
        t.d_ = std::make_shared<Data>();
        t.d_->shape = std::move(shape);
        t.d_->values = std::move(values);
        t.d_->requires_grad = requires_grad;
        if (requires_grad) t.d_->grad.assign(t.d_->values.size(), T(0));
        t.tape_ = tape;
        return t;
    }

    static Tensor scalar_value(T v, bool requires_grad = false, Tape<T>* tape = nullptr) {
        return from_values({1}, {v}, requires_grad, tape);
    }

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    int64_t ndim() const { return static_cast<int64_t>(d_->shape.size()); }
    int64_t dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(d_->values.size()); }
    bool requires_grad() const { return d_ && d_->requires_grad; }
    Tape<T>* tape() const { return tape_; }
    void set_tape(Tape<T>* tape) { tape_ = tape; }

    std::span<T> values() { return {d_->values.data(), d_->values.size()}; }
    std::span<const T> values() const { return {d_->values.data(), d_->values.size()}; }
    std::vector<T>& values_vec() { return d_->values; }
    const std::vector<T>& values_vec() const { return d_->values; }

    void set_requires_grad(bool rg) {
        d_->requires_grad = rg;
        if (rg && d_->grad.size() != d_->values.size()) d_->grad.assign(d_->values.size(), T(0));
        if (!rg) d_->grad.clear();
    }

    bool has_grad() const { return d_ && !d_->grad.empty(); }
    std::span<T> grad() { return {d_->grad.data(), d_->grad.size()}; }
    std::span<const T> grad() const { return {d_->grad.data(), d_->grad.size()}; }
    void zero_grad() {
        for (auto& g : d_->grad) g = T(0);
    }

    T scalar() const {
        if (numel() != 1) throw DimensionError("scalar() on tensor of shape " + shape_str(shape()));
        return d_->values[0];
    }

    T& at(int64_t i) { return d_->values[static_cast<size_t>(i)]; }
    const T& at(int64_t i) const { return d_->values[static_cast<size_t>(i)]; }

    // Deep copy of values; detached from any tape, no grad tracking.
    Tensor clone_detached() const {
        Tensor t;
        t.d_ = std::make_shared<Data>();
        t.d_->shape = d_->shape;
        t.d_->values = d_->values;
        t.d_->requires_grad = false;
        return t;
    }

    bool same_storage(const Tensor& other) const { return d_ == other.d_; }

private:
    std::shared_ptr<Data> d_;
    Tape<T>* tape_ = nullptr;
};

// Reverse-mode tape: forward ops push backward closures; backward() runs
// them in exact reverse order. Single-threaded per tape; independent tapes
// are independent.
template <typename T>
class Tape {
public:
    bool enabled() const { return enabled_; }
    void set_enabled(bool e) { enabled_ = e; }

    Tensor<T> leaf(Shape shape, std::vector<T> values, bool requires_grad = true) {
        return Tensor<T>::from_values(std::move(shape), std::move(values), requires_grad, this);
    }

    void record(std::function<void()> fn) { steps_.push_back(std::move(fn)); }

    size_t size() const { return steps_.size(); }

    void backward(Tensor<T>& root) {
        if (root.numel() != 1) throw DimensionError("backward root must be scalar");
        if (!root.requires_grad()) throw ValidationError("backward root does not require grad");
        root.grad()[0] = T(1);
        for (size_t i = steps_.size(); i > 0; --i) steps_[i - 1]();
    }

    void clear() { steps_.clear(); }

private:
    std::vector<std::function<void()>> steps_;
    bool enabled_ = true;
};

// RAII guard disabling recording on a tape (inference mode).
template <typename T>
class NoGradGuard {
public:
    explicit NoGradGuard(Tape<T>* tape) : tape_(tape) {
        if (tape_) {
            prev_ = tape_->enabled();
            tape_->set_enabled(false);
        }
    }
    ~NoGradGuard() {
        if (tape_) tape_->set_enabled(prev_);
    }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    Tape<T>* tape_ = nullptr;
    bool prev_ = true;
};

}  // namespace robumtl
