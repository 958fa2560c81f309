#pragma once

#include <atomic>
#include <cassert>
#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>

#include "castformer/common.hpp"

namespace castformer {

class Tensor;
struct BackwardPass;

// Reverse-mode node. Every Tensor is a handle to one of these. Graph edges
// (parents + back) are recorded only while grad mode is on and some parent
// requires grad; otherwise nodes are plain value holders.
struct Node {
    Shape dims;
    std::vector<double> v;
    std::vector<double> g;   // leaf gradient accumulator, allocated on demand
    bool leaf_rg = false;    // explicitly marked leaf (parameter / input under test)
    bool rg = false;         // derived: some ancestor is a leaf_rg
    uint64_t id = 0;         // creation order; parents always have smaller ids
    const char* op = "";
    std::vector<Tensor> parents;
    std::function<void(BackwardPass&, const Tensor&)> back;

    bool requires_grad() const { return leaf_rg || rg; }
};

inline bool& grad_mode_flag() {
    thread_local bool on = true;
    return on;
}

inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGrad {
    bool prev;
    NoGrad() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGrad() { grad_mode_flag() = prev; }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;
};

inline uint64_t next_node_id() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static Tensor from_values(Shape dims, std::vector<double> vals, bool requires_grad = false) {
        check(numel_of(dims) == static_cast<int64_t>(vals.size()),
              "tensor: dims " + shape_str(dims) + " do not match value count");
        auto n = std::make_shared<Node>();
        n->dims = std::move(dims);
        n->v = std::move(vals);
        n->leaf_rg = requires_grad;
        n->id = next_node_id();
        n->op = "leaf";
        return Tensor(n);
    }

    static Tensor zeros(Shape dims, bool requires_grad = false) {
        std::vector<double> v(static_cast<size_t>(numel_of(dims)), 0.0);
        return from_values(std::move(dims), std::move(v), requires_grad);
    }

    static Tensor full(Shape dims, double value, bool requires_grad = false) {
        std::vector<double> v(static_cast<size_t>(numel_of(dims)), value);
        return from_values(std::move(dims), std::move(v), requires_grad);
    }

    static Tensor scalar(double value) { return from_values({1}, {value}); }

    bool defined() const { return n_ != nullptr; }
    Node* node() const { return n_.get(); }
    const std::shared_ptr<Node>& holder() const { return n_; }

    const Shape& shape() const { return n_->dims; }
    int rank() const { return static_cast<int>(n_->dims.size()); }
    int64_t numel() const { return static_cast<int64_t>(n_->v.size()); }
    int64_t dim(int i) const {
        if (i < 0) i += rank();
        return n_->dims[static_cast<size_t>(i)];
    }

    std::vector<double>& values() { return n_->v; }
    const std::vector<double>& values() const { return n_->v; }
    double value() const {
        check(numel() == 1, "value(): tensor is not scalar");
        return n_->v[0];
    }
    double at(std::initializer_list<int64_t> idx) const {
        check(static_cast<int>(idx.size()) == rank(), "at(): wrong index rank");
        int64_t flat = 0;
        int i = 0;
        for (int64_t k : idx) {
            flat = flat * n_->dims[static_cast<size_t>(i)] + k;
            ++i;
        }
        return n_->v[static_cast<size_t>(flat)];
    }

    bool requires_grad() const { return n_ && n_->requires_grad(); }

    Tensor& set_requires_grad(bool on) {
        n_->leaf_rg = on;
        return *this;
    }

    // value copy with no graph history
    Tensor detach() const {
        auto n = std::make_shared<Node>();
        n->dims = n_->dims;
        n->v = n_->v;
        n->id = next_node_id();
        n->op = "detach";
        return Tensor(n);
    }

    bool has_grad() const { return n_ && !n_->g.empty(); }
    const std::vector<double>& grad() const {
        check(has_grad(), "grad(): no gradient accumulated");
        return n_->g;
    }
    void zero_grad() {
        if (n_) n_->g.assign(n_->v.size(), 0.0);
    }
    void drop_grad() {
        if (n_) {
            n_->g.clear();
            n_->g.shrink_to_fit();
        }
    }

private:
    std::shared_ptr<Node> n_;
};

// declared here, defined in ops.hpp; the backward engine accumulates with it
Tensor add(const Tensor& a, const Tensor& b);

struct BackwardPass {
    bool create_graph = false;
    std::unordered_map<Node*, Tensor> gmap;

    // add a gradient contribution for `parent`; fan-out accumulates additively
    void accumulate(const Tensor& parent, const Tensor& contrib) {
        Node* p = parent.node();
        if (!p->requires_grad()) return;
        auto it = gmap.find(p);
        if (it == gmap.end()) {
            gmap.emplace(p, contrib);
        } else {
            it->second = add(it->second, contrib);
        }
    }
};

namespace detail {

inline void collect_subgraph(Node* root, std::vector<Node*>& out) {
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root};
    seen.insert(root);
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        out.push_back(n);
        for (const Tensor& p : n->parents) {
            Node* pn = p.node();
            if (pn->requires_grad() && seen.insert(pn).second) stack.push_back(pn);
        }
    }
    // descending creation order is a topological order of the DAG
    std::sort(out.begin(), out.end(), [](Node* a, Node* b) { return a->id > b->id; });
}

inline void run_backward(const Tensor& root, const Tensor& seed, bool create_graph,
                         bool into_leaf_buffers,
                         const std::vector<Tensor>* wrt, std::vector<Tensor>* captured) {
    check(root.requires_grad(), "backward: root does not require grad");
    std::unordered_set<Node*> want;
    if (wrt) {
        for (const Tensor& t : *wrt) want.insert(t.node());
    }

    BackwardPass pass;
    pass.create_graph = create_graph;
    pass.gmap.emplace(root.node(), seed);

    std::vector<Node*> order;
    collect_subgraph(root.node(), order);

    std::unique_ptr<NoGrad> guard;
    if (!create_graph) guard = std::make_unique<NoGrad>();

    for (Node* n : order) {
        auto it = pass.gmap.find(n);
        if (it == pass.gmap.end()) continue;  // not on a path from root
        Tensor gy = it->second;
        if (n->back) n->back(pass, gy);
        if (into_leaf_buffers && n->leaf_rg) {
            if (n->g.empty()) n->g.assign(n->v.size(), 0.0);
            const auto& gv = gy.values();
            for (size_t i = 0; i < gv.size(); ++i) n->g[i] += gv[i];
        }
        if (!want.count(n)) pass.gmap.erase(it);
    }

    if (wrt && captured) {
        captured->clear();
        for (const Tensor& t : *wrt) {
            auto it = pass.gmap.find(t.node());
            if (it != pass.gmap.end()) {
                captured->push_back(it->second);
            } else {
                captured->push_back(Tensor::zeros(t.shape()));
            }
        }
    }
}

} // namespace detail

// Accumulate d(root)/d(leaf) into every reachable leaf's grad buffer.
// Non-scalar roots are seeded with ones.
inline void backward(const Tensor& root) {
    Tensor seed = Tensor::full(root.shape(), 1.0);
    detail::run_backward(root, seed, /*create_graph=*/false, /*into_leaf_buffers=*/true,
                         nullptr, nullptr);
}

// Gradients of `root` w.r.t. `wrt`, returned as tensors. With create_graph the
// results carry their own graph, so expressions of them stay differentiable.
inline std::vector<Tensor> grad_of(const Tensor& root, const std::vector<Tensor>& wrt,
                                   bool create_graph = false) {
    Tensor seed = Tensor::full(root.shape(), 1.0);
    std::vector<Tensor> out;
    detail::run_backward(root, seed, create_graph, /*into_leaf_buffers=*/false, &wrt, &out);
    return out;
}

namespace detail {

inline void debug_check_finite(const Node& n) {
#ifndef NDEBUG
    for (double x : n.v) {
        assert(std::isfinite(x) && "non-finite value produced by forward op");
        (void)x;
    }
#else
    (void)n;
#endif
}

// Create an op node. `back` receives (pass, gy) and must push one
// contribution per differentiable parent via pass.accumulate.
inline Tensor make_op(const char* op, Shape dims, std::vector<double> vals,
                      std::vector<Tensor> parents,
                      std::function<void(BackwardPass&, const Tensor&)> back) {
    auto n = std::make_shared<Node>();
    n->dims = std::move(dims);
    n->v = std::move(vals);
    n->id = next_node_id();
    n->op = op;
    bool any_rg = false;
    for (const Tensor& p : parents) any_rg |= p.requires_grad();
    if (grad_enabled() && any_rg) {
        n->rg = true;
        n->parents = std::move(parents);
        n->back = std::move(back);
    }
    debug_check_finite(*n);
    return Tensor(n);
}

} // namespace detail

} // namespace castformer
