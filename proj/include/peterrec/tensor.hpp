#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "peterrec/error.hpp"

namespace peterrec {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) noexcept {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out << (i ? "x" : "") << shape[i];
    }
    out << ']';
    return out.str();
}

/// Dense row-major float32 array with an optional gradient buffer.
///
/// Tensor is a handle: copies share storage, the way autograd frameworks
/// treat tensors. Use clone() for an independent deep copy.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, float fill = 0.0f) {
        validate_shape(shape);
        storage_ = std::make_shared<Storage>();
        storage_->data.assign(shape_numel(shape), fill);
        storage_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<float> values) {
        validate_shape(shape);
        if (shape_numel(shape) != values.size()) {
            fail(ErrorKind::kDimension, "tensor data length " + std::to_string(values.size()) +
                                            " does not match shape " + shape_string(shape));
        }
        storage_ = std::make_shared<Storage>();
        storage_->shape = std::move(shape);
        storage_->data = std::move(values);
    }

    static Tensor scalar(float value) { return Tensor(Shape{1}, value); }

    bool defined() const noexcept { return storage_ != nullptr; }

    const Shape& shape() const { return checked().shape; }
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const { return shape().at(axis); }
    std::size_t numel() const { return checked().data.size(); }

    // Constness belongs to the handle, not the storage (like shared_ptr), so
    // const handles captured by backward rules can still write gradients.
    std::span<float> data() const { return checked().data; }
    float item() const {
        require(numel() == 1, ErrorKind::kDimension, "item() on tensor of shape " + shape_string(shape()));
        return data()[0];
    }

    bool requires_grad() const { return checked().requires_grad; }
    void set_requires_grad(bool value) const { checked().requires_grad = value; }

    bool has_grad() const { return !checked().grad.empty(); }
    /// Gradient buffer, allocated as zeros on first access.
    std::span<float> grad() const {
        auto& s = checked();
        if (s.grad.empty()) {
            s.grad.assign(s.data.size(), 0.0f);
        }
        return s.grad;
    }
    void zero_grad() const {
        auto& g = checked().grad;
        std::fill(g.begin(), g.end(), 0.0f);
    }
    void drop_grad() const { checked().grad.clear(); checked().grad.shrink_to_fit(); }

    Tensor clone() const {
        Tensor out(shape(), std::vector<float>(data().begin(), data().end()));
        out.set_requires_grad(requires_grad());
        return out;
    }

    bool same_storage(const Tensor& other) const noexcept { return storage_ == other.storage_; }

private:
    struct Storage {
        Shape shape;
        std::vector<float> data;
        std::vector<float> grad;
        bool requires_grad = false;
    };

    static void validate_shape(const Shape& shape) {
        require(!shape.empty(), ErrorKind::kDimension, "tensor shape must have at least one axis");
        for (auto extent : shape) {
            require(extent > 0, ErrorKind::kDimension, "tensor extents must be positive, got " + shape_string(shape));
        }
    }

    Storage& checked() const {
        assert(storage_ && "use of undefined tensor");
        return *storage_;
    }

    std::shared_ptr<Storage> storage_;
};

/// Records differentiable ops in execution order and replays their backward
/// rules in exact reverse order. Single-threaded.
class Tape {
public:
    explicit Tape(bool enabled = true) : enabled_(enabled) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    /// A tape with recording disabled; ops run forward only.
    static Tape inference() { return Tape(false); }

    bool enabled() const noexcept { return enabled_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Rules whose output never received a gradient are skipped during backward.
    void record(const Tensor& output, std::function<void()> backward) {
        nodes_.push_back([output, rule = std::move(backward)]() {
            if (output.has_grad()) {
                rule();
            }
        });
    }

    /// Seeds d(loss)/d(loss) = 1 and runs every recorded rule backwards.
    void backward(Tensor& loss) {
        require(loss.numel() == 1, ErrorKind::kDimension,
                "backward() needs a scalar loss, got " + shape_string(loss.shape()));
        if (!loss.requires_grad()) {
            return;
        }
        loss.grad()[0] += 1.0f;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            (*it)();
        }
        nodes_.clear();
    }

    void clear() { nodes_.clear(); }

private:
    bool enabled_;
    std::vector<std::function<void()>> nodes_;
};

} // namespace peterrec
