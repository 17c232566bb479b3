#pragma once

// Dense f64 tensors with reverse-mode autodiff on an explicit tape.
//
// Design: define-by-run. Ops are free functions taking a Tape*; passing
// nullptr evaluates without recording (eval mode / detached values). A
// recorded node is created only when some input requires gradient, so frozen
// subgraphs cost nothing on the backward pass. Layout is row-major, 64-bit
// throughout, and the only broadcasting is a shared right-hand operand over
// leading batch dimensions.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "absorbkit/errors.hpp"
#include "absorbkit/rng.hpp"

namespace absorb {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;       // same extent as data when allocated
    bool requires_grad = false;     // gradient flows to/through this value
    bool leaf = true;
    const Tape* tape = nullptr;     // provenance stamp for op outputs
    uint64_t epoch = 0;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& s, bool requires_grad = false);
    static Tensor full(const Shape& s, double v);
    static Tensor from_vector(const Shape& s, std::vector<double> v);
    static Tensor scalar(double v);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

    std::span<const double> data() const { return impl_->data; }
    std::span<double> values() { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    // Leaf trainability toggle. Enabling allocates a zero grad buffer;
    // disabling drops it (a frozen leaf has no grad slot at all).
    void set_requires_grad(bool on);

    std::span<const double> grad() const { return impl_->grad; }
    std::span<double> grad_mut() { impl_->ensure_grad(); return impl_->grad; }
    void zero_grad();

    double item() const;
    double at(std::initializer_list<int> idx) const;

    Tensor clone() const;  // detached deep copy of the values

    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
    static Tensor wrap(std::shared_ptr<detail::TensorImpl> i) { return Tensor(std::move(i)); }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> i) : impl_(std::move(i)) {}
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Leaf filled with N(0, std^2) draws.
Tensor randn(const Shape& s, Rng& rng, double stddev, bool requires_grad = false);

// Integer token batch, row-major [batch][len]. Kept apart from Tensor so the
// engine stays single-dtype.
struct TokenBatch {
    int batch = 0;
    int len = 0;
    std::vector<int32_t> ids;

    int32_t at(int b, int t) const { return ids[static_cast<size_t>(b) * len + t]; }
};

// Records the forward pass of one training context. Single-threaded use;
// independent contexts own independent tapes.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Populates grads of every requires_grad leaf reachable from `loss`.
    // Throws ShapeError (non-scalar), LifecycleError (repeat call without
    // reset, or loss not produced on this tape).
    void backward(const Tensor& loss);

    // Drops all recorded nodes (and with them the non-leaf intermediates).
    void reset();

    size_t node_count() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }
    uint64_t epoch() const { return epoch_; }

    // Op plumbing, not part of the public surface.
    void record(std::shared_ptr<detail::TensorImpl> out, std::function<void()> back);

private:
    struct Node {
        std::shared_ptr<detail::TensorImpl> out;
        std::function<void()> back;
    };
    std::vector<Node> nodes_;
    bool consumed_ = false;
    uint64_t epoch_ = 1;
};

// --- Operations -----------------------------------------------------------
// All ops validate shapes and throw ShapeError naming the offending extents.

// a [.., m, p] x b [p, n] (shared) or [.., p, n] -> [.., m, n]
Tensor matmul(Tape* t, const Tensor& a, const Tensor& b);
// a [.., m, p] x b^T with b [n, p] (shared) or [.., n, p] -> [.., m, n]
Tensor matmul_nt(Tape* t, const Tensor& a, const Tensor& b);

// Same shape, or b's shape a suffix of a's (b is tiled over leading dims).
Tensor add(Tape* t, const Tensor& a, const Tensor& b);
Tensor scale(Tape* t, const Tensor& a, double c);
Tensor elementwise_mul(Tape* t, const Tensor& a, const Tensor& b);

Tensor sigmoid(Tape* t, const Tensor& a);
Tensor gelu(Tape* t, const Tensor& a);

// Softmax over the last dimension. -inf entries map to exactly 0; a row that
// is entirely -inf raises InvalidRowError.
Tensor softmax_rows(Tape* t, const Tensor& a);

// Normalizes the last dimension; gain/bias are 1-d of that extent.
Tensor layernorm(Tape* t, const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

// table [V, d], ids in [0, V) -> [B, n, d]
Tensor embed(Tape* t, const TokenBatch& ids, const Tensor& table);

Tensor reshape(Tape* t, const Tensor& a, const Shape& target);
// [b, x, y, z] -> [b, y, x, z]
Tensor swap_middle(Tape* t, const Tensor& a);
// First `count` rows along dim 0.
Tensor slice_rows(Tape* t, const Tensor& a, int count);

// Mean negative log-likelihood in nats over all target positions.
// logits [B, n, V], targets [B, n].
Tensor cross_entropy(Tape* t, const Tensor& logits, const TokenBatch& targets);

Tensor sum(Tape* t, const Tensor& a);

// scores [.., n, n]: strictly-upper entries become -inf (query attends only
// to keys at or before its own position).
Tensor causal_neg_inf(Tape* t, const Tensor& scores);

// keep[i] == 0 entries become -inf; kept entries pass value and gradient.
Tensor masked_fill_neg_inf(Tape* t, const Tensor& a, const std::vector<uint8_t>& keep,
                           const Shape& keep_shape);

}  // namespace absorb
