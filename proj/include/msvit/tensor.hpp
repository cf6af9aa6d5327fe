#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace msvit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (const std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

// Thread-local autograd switch. Evaluation paths disable graph construction;
// each fold thread owns its flag.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated on demand during backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode<T>>> parents;
    std::function<void(TensorNode<T>&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

// Shared-handle tensor. Values are written once by the op that creates the
// node; grad buffers are the only mutation after construction.
template <class T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, bool requires_grad = false)
        : node_(std::make_shared<TensorNode<T>>()) {
        node_->shape = std::move(shape);
        node_->value.assign(shape_numel(node_->shape), T(0));
        node_->requires_grad = requires_grad;
    }

    static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
        check(shape_numel(shape) == data.size(),
              "tensor data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
        Tensor t;
        t.node_ = std::make_shared<TensorNode<T>>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data()) x = v;
        return t;
    }

    static Tensor scalar(T v) { return from({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t size() const { return node_->value.size(); }

    std::vector<T>& data() { return node_->value; }
    const std::vector<T>& data() const { return node_->value; }
    T& operator[](std::size_t i) { return node_->value[i]; }
    const T& operator[](std::size_t i) const { return node_->value[i]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    std::vector<T>& grad() {
        check(has_grad(), "grad buffer not populated; call backward() first");
        return node_->grad;
    }
    const std::vector<T>& grad() const {
        check(has_grad(), "grad buffer not populated; call backward() first");
        return node_->grad;
    }

    void zero_grad() {
        if (node_->requires_grad) node_->grad.assign(node_->value.size(), T(0));
    }

    // Value copy detached from the graph.
    Tensor detach() const {
        Tensor t;
        t.node_ = std::make_shared<TensorNode<T>>();
        t.node_->shape = node_->shape;
        t.node_->value = node_->value;
        return t;
    }

    std::shared_ptr<TensorNode<T>> node() const { return node_; }
    TensorNode<T>* raw() const { return node_.get(); }

private:
    std::shared_ptr<TensorNode<T>> node_;
};

namespace detail {

// Registers parents and the backward closure on `out` when grad tracking is
// active. Only grad-requiring parents are kept for the traversal.
template <class T>
void attach(Tensor<T>& out, std::initializer_list<Tensor<T>> parents,
            std::function<void(TensorNode<T>&)> fn) {
    if (!grad_mode()) return;
    bool any = false;
    for (const auto& p : parents)
        if (p.requires_grad()) any = true;
    if (!any) return;
    out.raw()->requires_grad = true;
    for (const auto& p : parents)
        if (p.requires_grad()) out.raw()->parents.push_back(p.node());
    out.raw()->backward_fn = std::move(fn);
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Repeated calls accumulate into the
// existing grad buffers; visit order is fixed by graph construction order.
template <class T>
void backward(const Tensor<T>& loss) {
    check(loss.size() == 1, "backward expects a scalar loss, got shape " + shape_str(loss.shape()));
    check(loss.requires_grad(), "backward on a tensor that does not require grad");

    // iterative post-order DFS
    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> seen;
    struct Frame {
        TensorNode<T>* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.raw(), 0});
    seen.insert(loss.raw());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            TensorNode<T>* p = f.node->parents[f.next_parent++].get();
            if (seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    // Interior grads are per-sweep scratch; only leaves accumulate across
    // repeated backward calls.
    for (TensorNode<T>* n : order) {
        if (n->backward_fn)
            n->grad.assign(n->value.size(), T(0));
        else
            n->ensure_grad();
    }
    loss.raw()->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode<T>* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

}  // namespace msvit
