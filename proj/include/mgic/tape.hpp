#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mgic/errors.hpp"
#include "mgic/tensor.hpp"

namespace mgic {

// Records one forward pass as a topologically ordered list of primitive
// operations, each with the saved values its adjoint needs and a pure
// recompute closure used for replay. A tape is confined to one logical
// thread; independent runs use disjoint tapes.
template <typename T>
class Tape {
public:
    struct Node {
        std::string op;
        std::vector<NodeId> inputs;
        Tensor<T> output;
        // Accumulates input adjoints given this node's output adjoint.
        std::function<void(Tape&, const Node&)> backward;
        // Recomputes the output data from recomputed input data.
        std::function<std::vector<T>(const std::vector<const std::vector<T>*>&)> replay;
    };

    Tensor<T> leaf(const Tensor<T>& t, bool track_grad) {
        Tensor<T> out = t;
        out.requires_grad = track_grad;
        Node n;
        n.op = "leaf";
        n.output = out;
        nodes_.push_back(std::move(n));
        out.node = static_cast<NodeId>(nodes_.size()) - 1;
        nodes_.back().output.node = out.node;
        return out;
    }

    // Registers a parameter's tensor as a leaf once per tape; repeated use in
    // one forward pass maps to the same node.
    Tensor<T> leaf_param(Parameter<T>& p) {
        auto it = param_nodes_.find(&p);
        if (it != param_nodes_.end()) return nodes_[static_cast<std::size_t>(it->second)].output;
        Tensor<T> out = leaf(p.value, true);
        param_nodes_.emplace(&p, out.node);
        params_.push_back(&p);
        return out;
    }

    NodeId record(Node node) {
        nodes_.push_back(std::move(node));
        NodeId id = static_cast<NodeId>(nodes_.size()) - 1;
        nodes_.back().output.node = id;
        return id;
    }

    const Node& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }
    std::size_t size() const { return nodes_.size(); }

    // Requires `t` to live on this tape already; constants are wrapped here.
    Tensor<T> adopt(const Tensor<T>& t) {
        if (t.node != kNoNode) return t;
        return leaf(t, false);
    }

    void add_grad(NodeId id, const T* g, std::int64_t n) {
        auto& dst = grads_[static_cast<std::size_t>(id)];
        if (dst.empty()) dst.assign(static_cast<std::size_t>(n), T(0));
        for (std::int64_t i = 0; i < n; ++i) dst[static_cast<std::size_t>(i)] += g[i];
    }

    bool has_grad(NodeId id) const {
        return id >= 0 && static_cast<std::size_t>(id) < grads_.size() &&
               !grads_[static_cast<std::size_t>(id)].empty();
    }

    const std::vector<T>& grad(NodeId id) const {
        static const std::vector<T> empty;
        if (!has_grad(id)) return empty;
        return grads_[static_cast<std::size_t>(id)];
    }

    const std::vector<T>& grad(const Tensor<T>& t) const { return grad(t.node); }

    // Reverse sweep from a scalar loss. Parameter adjoints accumulate into
    // Parameter::grad, so repeated calls accumulate unless grads are zeroed.
    void backward(const Tensor<T>& loss) {
        if (loss.node == kNoNode) throw ContractError("loss tensor is not on this tape");
        if (loss.numel() != 1) {
            throw ContractError("backward requires a scalar loss, got shape " +
                                shape_str(loss.shape()));
        }
        grads_.assign(nodes_.size(), {});
        grads_[static_cast<std::size_t>(loss.node)] = {T(1)};
        for (NodeId id = loss.node; id >= 0; --id) {
            const Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.backward || !has_grad(id)) continue;
            n.backward(*this, n);
        }
        for (Parameter<T>* p : params_) {
            NodeId id = param_nodes_.at(p);
            if (!has_grad(id)) continue;
            const auto& g = grads_[static_cast<std::size_t>(id)];
            for (std::size_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
        }
    }

    // Recomputes every recorded node from the leaves and checks that each
    // output is reproduced bit-identically.
    bool replay_matches() const {
        std::vector<std::vector<T>> values(nodes_.size());
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const Node& n = nodes_[i];
            if (!n.replay) {
                values[i] = n.output.vec();
                continue;
            }
            std::vector<const std::vector<T>*> ins;
            ins.reserve(n.inputs.size());
            for (NodeId in : n.inputs) ins.push_back(&values[static_cast<std::size_t>(in)]);
            values[i] = n.replay(ins);
            const auto& expect = n.output.vec();
            if (values[i].size() != expect.size()) return false;
            if (!values[i].empty() &&
                std::memcmp(values[i].data(), expect.data(), values[i].size() * sizeof(T)) != 0) {
                return false;
            }
        }
        return true;
    }

    // Smallest |pre-activation| over all recorded relu inputs; used by the
    // gradient checker to resample points that sit on a kink.
    double min_relu_input_abs() const {
        double m = 1e300;
        for (const Node& n : nodes_) {
            if (n.op != "relu" || n.inputs.empty()) continue;
            const auto& in = nodes_[static_cast<std::size_t>(n.inputs[0])].output.vec();
            for (T v : in) m = std::min(m, std::abs(static_cast<double>(v)));
        }
        return m;
    }

private:
    std::vector<Node> nodes_;
    std::vector<std::vector<T>> grads_;
    std::unordered_map<Parameter<T>*, NodeId> param_nodes_;
    std::vector<Parameter<T>*> params_;
};

}  // namespace mgic
