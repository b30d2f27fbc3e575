#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace cff {

using Shape = std::vector<int>;

inline int shape_size(const Shape& s) {
    int n = 1;
    for (int d : s) {
        if (d <= 0) throw std::invalid_argument("tensor shape dimensions must be positive");
        n *= d;
    }
    return n;
}

class Tape;

/// Dense real tensor. Values are shared (copy-on-write is never needed:
/// operators always allocate fresh outputs). A tensor participates in
/// reverse-mode differentiation iff `node >= 0`, in which case `tape`
/// points at the recording it belongs to.
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> values)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(std::move(values))) {
        if (static_cast<int>(data_->size()) != shape_size(shape_))
            throw std::invalid_argument("tensor value count does not match shape");
    }

    static Tensor zeros(Shape shape) {
        const int n = shape_size(shape);
        return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
    }

    static Tensor full(Shape shape, double v) {
        const int n = shape_size(shape);
        return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), v));
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor vector1d(std::vector<double> v) {
        const int n = static_cast<int>(v.size());
        return Tensor({n}, std::move(v));
    }

    static Tensor matrix(int rows, int cols, std::vector<double> v) {
        return Tensor({rows, cols}, std::move(v));
    }

    const Shape& shape() const { return shape_; }
    int size() const { return data_ ? static_cast<int>(data_->size()) : 0; }
    bool defined() const { return static_cast<bool>(data_); }

    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    int rows() const { require_ndim(2); return shape_[0]; }
    int cols() const { require_ndim(2); return shape_[1]; }

    const std::vector<double>& values() const { return *data_; }
    std::vector<double>& values() { return *data_; }
    const std::shared_ptr<std::vector<double>>& data() const { return data_; }

    double value() const {
        if (size() != 1) throw std::invalid_argument("Tensor::value: tensor is not scalar");
        return (*data_)[0];
    }

    double at(int i) const { return (*data_)[static_cast<std::size_t>(i)]; }

    double at(int r, int c) const {
        require_ndim(2);
        return (*data_)[static_cast<std::size_t>(r) * shape_[1] + c];
    }

    void set(int r, int c, double v) {
        require_ndim(2);
        (*data_)[static_cast<std::size_t>(r) * shape_[1] + c] = v;
    }

    bool on_tape() const { return node >= 0; }

    /// Detached copy of the forward values (fresh buffer, no tape).
    Tensor detached_copy() const { return Tensor(shape_, *data_); }

    Tape* tape = nullptr;
    int node = -1;

private:
    void require_ndim(int n) const {
        if (ndim() != n) throw std::invalid_argument("tensor rank mismatch");
    }

    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
};

/// Append-only record of one forward computation and the per-node gradient
/// accumulators for its reverse sweeps. Nodes are stored in topological
/// order by construction (an operator can only consume already-recorded
/// tensors), so the backward pass is a single reverse scan that visits each
/// node at most once. A tape is confined to one thread; independent runs
/// use independent tapes.
class Tape {
public:
    using BackwardFn = std::function<void(const std::vector<double>& grad_out, Tape&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Register a leaf (typically a parameter). Shares the value buffer so
    /// no copy happens; the node exists solely to collect gradient.
    Tensor watch(const Tensor& t) {
        Tensor out = t;
        out.tape = this;
        out.node = add_node(t.size(), nullptr);
        return out;
    }

    int add_node(int out_size, BackwardFn back) {
        nodes_.push_back(Node{std::move(back), out_size});
        return static_cast<int>(nodes_.size()) - 1;
    }

    std::size_t node_count() const { return nodes_.size(); }

    /// Zero-initialized gradient accumulator for a node, allocated on first
    /// touch. Nodes never reached by a backward sweep keep an empty buffer,
    /// which is observable through grad_allocated().
    std::vector<double>& grad_buffer(int node) {
        auto& g = grads_.at(static_cast<std::size_t>(node));
        if (g.empty()) g.assign(static_cast<std::size_t>(nodes_[static_cast<std::size_t>(node)].out_size), 0.0);
        return g;
    }

    bool grad_allocated(int node) const {
        return !grads_.at(static_cast<std::size_t>(node)).empty();
    }

    /// Reverse sweep from a scalar loss. Clears all previous gradient
    /// state first, so per-layer losses recorded on one tape can each be
    /// differentiated independently.
    void backward(const Tensor& loss) {
        if (!loss.on_tape() || loss.tape != this)
            throw std::invalid_argument("Tape::backward: loss is not recorded on this tape");
        if (loss.size() != 1)
            throw std::invalid_argument("Tape::backward: loss must be scalar");
        grads_.assign(nodes_.size(), {});
        grad_buffer(loss.node)[0] = 1.0;
        for (int i = loss.node; i >= 0; --i) {
            auto& g = grads_[static_cast<std::size_t>(i)];
            if (g.empty()) continue;
            auto& back = nodes_[static_cast<std::size_t>(i)].backward;
            if (back) back(g, *this);
        }
    }

    /// Gradient of the last backward() target with respect to `t`.
    /// Returns zeros when the node was never reached.
    std::vector<double> grad(const Tensor& t) const {
        if (!t.on_tape() || t.tape != this)
            throw std::invalid_argument("Tape::grad: tensor is not recorded on this tape");
        const auto& g = grads_.at(static_cast<std::size_t>(t.node));
        if (g.empty()) return std::vector<double>(static_cast<std::size_t>(t.size()), 0.0);
        return g;
    }

private:
    struct Node {
        BackwardFn backward;  // null for leaves
        int out_size = 0;
    };

    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
};

namespace detail {

inline void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v)
        if (!std::isfinite(x))
            throw std::runtime_error(std::string(op) + ": non-finite value in result");
}

inline Tape* common_tape(std::initializer_list<const Tensor*> ts) {
    Tape* tape = nullptr;
    for (const Tensor* t : ts) {
        if (!t->on_tape()) continue;
        if (tape != nullptr && tape != t->tape)
            throw std::invalid_argument("operands recorded on different tapes");
        tape = t->tape;
    }
    return tape;
}

inline void accumulate(Tape& tape, int node, const std::vector<double>& delta) {
    auto& g = tape.grad_buffer(node);
    for (std::size_t i = 0; i < delta.size(); ++i) g[i] += delta[i];
}

}  // namespace detail

}  // namespace cff
