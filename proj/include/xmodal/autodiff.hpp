#pragma once

// Reverse-mode differentiation over eager dense 2-D arrays.
//
// A Tape records every operation in creation order; backward() walks it in
// reverse. Values are computed eagerly when an op is recorded, so a Var can be
// inspected at any point. Tapes are single-threaded.

#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "xmodal/tensor.hpp"

namespace xmodal::ad {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;

    const Tensor2& value() const;
    /// Accumulated gradient; all zeros until backward() reaches this node.
    const Tensor2& grad() const;
    bool requires_grad() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    /// Value of a 1x1 node.
    double item() const;

    Tape* tape() const noexcept { return tape_; }
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    /// Receives the node's own id and the gradient flowing into it, and
    /// distributes that gradient to the node's parents.
    using BackwardFn = std::function<void(Tape&, std::size_t self, const Tensor2& out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor2 value, bool requires_grad = true);
    Var constant(Tensor2 value) { return leaf(std::move(value), false); }

    /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable node.
    /// Gradients accumulate across calls until zero_grad().
    void backward(Var loss);
    void zero_grad();

    std::size_t size() const noexcept { return nodes_.size(); }

    // Used by op implementations.
    Var record(Tensor2 value, std::vector<std::size_t> parents, std::string_view op, BackwardFn fn);
    const Tensor2& value(std::size_t id) const { return nodes_[id].value; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    /// Adds `g` into the gradient of node `id` if it requires grad.
    void accumulate(std::size_t id, const Tensor2& g);
    Tensor2& grad_buffer(std::size_t id) { return nodes_[id].grad; }
    const Tensor2& grad(std::size_t id) const;

private:
    struct Node {
        Tensor2 value;
        Tensor2 grad;
        bool requires_grad = false;
        std::string_view op;
        BackwardFn backward;
    };

    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Operations. Binary elementwise ops accept `b` with the same shape as `a`,
// or as a 1 x cols row vector, rows x 1 column vector, or 1 x 1 scalar.

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scalar_mul(Var a, double s);
Var add_scalar(Var a, double s);
/// log(x + eps) elementwise; x + eps must be positive.
Var log_eps(Var a, double eps);
Var relu(Var a);
/// 1x1 sum of all entries.
Var sum(Var a);
/// 1x1 mean of all entries.
Var mean(Var a);
/// rows x 1 sums of each row.
Var row_sum(Var a);
/// Softmax over each row, stabilized by subtracting the row max.
Var rowwise_softmax(Var a);
Var rowwise_log_softmax(Var a);
/// Scales every row to unit Euclidean norm; rows with norm < 1e-12 throw DegenerateError.
Var row_l2_normalize(Var a);
/// Identity on values; multiplies the gradient by `factor` on the way back.
/// factor 0 detaches, -1 reverses.
Var grad_scale(Var a, double factor);
/// Picks entries (row, col) into a k x 1 column.
Var gather(Var a, std::vector<std::pair<std::size_t, std::size_t>> entries);

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator*(double s, Var a);

/// Lowest norm accepted by row_l2_normalize.
inline constexpr double kMinRowNorm = 1e-12;

namespace debug {
/// Test hook: scales the gradient produced by every op named `op` by `factor`
/// during backward. Empty name disables. Thread-local.
void corrupt_backward(std::string op, double factor);
struct ScopedCorruption {
    ScopedCorruption(std::string op, double factor) { corrupt_backward(std::move(op), factor); }
    ~ScopedCorruption() { corrupt_backward({}, 1.0); }
    ScopedCorruption(const ScopedCorruption&) = delete;
    ScopedCorruption& operator=(const ScopedCorruption&) = delete;
};
}  // namespace debug

}  // namespace xmodal::ad
