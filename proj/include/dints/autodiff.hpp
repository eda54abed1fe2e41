#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every primitive application in execution order. Each node
// stores its forward value and, when it depends on a parameter, a backward
// closure that pushes its adjoint into its parents. backward() walks the
// record in reverse exactly once, so record order is the topological order.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <utility>
#include <vector>

#include "dints/tensor.hpp"

namespace dints::ad {

class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape; }
};

class Tape {
public:
    // Receives the node's own forward value and its accumulated adjoint.
    using Backward = std::function<void(Tape&, const Tensor& out_value, const Tensor& out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor v) { return push(std::move(v), false, {}); }
    Var param(Tensor v) { return push(std::move(v), true, {}); }

    /// Records a primitive. The node requires gradients iff any parent does;
    /// otherwise the backward closure is dropped.
    Var record(Tensor value, std::initializer_list<Var> parents, Backward backward)
    {
        bool needs = false;
        for (const Var& p : parents) {
            check_owned(p);
            needs = needs || nodes_[static_cast<std::size_t>(p.id)].requires_grad;
        }
        return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
    }

    const Tensor& value(Var v) const
    {
        check_owned(v);
        return nodes_[static_cast<std::size_t>(v.id)].value;
    }

    bool requires_grad(Var v) const
    {
        check_owned(v);
        return nodes_[static_cast<std::size_t>(v.id)].requires_grad;
    }

    /// Adjoint accumulation buffer for v, zero-initialized on first use.
    /// nullptr when v does not need gradients, so callers can skip work.
    Tensor* grad_sink(Var v)
    {
        check_owned(v);
        Node& n = nodes_[static_cast<std::size_t>(v.id)];
        if (!n.requires_grad) return nullptr;
        if (!n.has_grad) {
            n.grad = Tensor(n.value.shape, 0.0);
            n.has_grad = true;
        }
        return &n.grad;
    }

    /// Adjoint of v after backward(); zeros if nothing flowed into it.
    Tensor grad(Var v) const
    {
        check_owned(v);
        const Node& n = nodes_[static_cast<std::size_t>(v.id)];
        if (!n.has_grad) return Tensor(n.value.shape, 0.0);
        return n.grad;
    }

    void backward(Var root)
    {
        check_owned(root);
        Node& r = nodes_[static_cast<std::size_t>(root.id)];
        if (r.value.size() != 1)
            throw ShapeError("backward() needs a scalar root, got " + shape_str(r.value.shape));
        if (!r.requires_grad) return;
        Tensor* g = grad_sink(root);
        g->data[0] += 1.0;
        for (int id = root.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.has_grad || !n.backward) continue;
            // Parents always have smaller ids, so n.grad is stable during the call.
            n.backward(*this, n.value, n.grad);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool has_grad = false;
        Backward backward;
    };

    Var push(Tensor v, bool needs, Backward bw)
    {
        nodes_.push_back(Node{std::move(v), Tensor{}, needs, false, std::move(bw)});
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    void check_owned(Var v) const
    {
        if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
            throw ValidationError("variable does not belong to this tape");
    }

    std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

} // namespace dints::ad
