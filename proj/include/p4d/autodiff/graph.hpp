#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string_view>
#include <vector>

#include "p4d/autodiff/tensor.hpp"

namespace p4d::ad {

class Graph;

// Handle to a node on a Graph tape.
struct Var {
    std::uint32_t id = UINT32_MAX;
    bool valid() const { return id != UINT32_MAX; }
};

// Row-wise sparse linear map: out[r] = sum_k weight[k] * in[index[k]] for k in
// [offsets[r], offsets[r+1]). Covers gathers, scatter-means, pooling and
// bilinear sampling.
struct SparseRows {
    std::vector<std::uint32_t> offsets{0};
    std::vector<std::uint32_t> index;
    std::vector<double> weight;
    std::size_t in_rows = 0;

    std::size_t out_rows() const { return offsets.size() - 1; }
    void add(std::uint32_t in_row, double w) {
        index.push_back(in_row);
        weight.push_back(w);
    }
    void end_row() { offsets.push_back(static_cast<std::uint32_t>(index.size())); }

    static SparseRows gather(std::span<const std::uint32_t> rows, std::size_t in_rows);
    // Mean of all input rows sharing a group id; group ids must be < groups.
    static SparseRows group_mean(std::span<const std::uint32_t> group_of, std::size_t groups);
    // Places input row i at output row placement[i]; unreferenced rows are zero.
    static SparseRows scatter(std::span<const std::uint32_t> placement, std::size_t out_rows);
};

// Applies a SparseRows map to plain tensors (no tape).
Tensor apply(const SparseRows& map, const Tensor& in);

// Define-by-run reverse-mode tape. Operations evaluate eagerly and record a
// backward closure; backward() walks the tape once in reverse order.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;
    Graph(Graph&&) = default;
    Graph& operator=(Graph&&) = default;

    Var constant(Tensor value);
    // Leaf bound to an external parameter. Gradients accumulate into
    // `param.grad` when `param.requires_grad` is set.
    Var param(Tensor& param);

    const Tensor& value(Var v) const { return nodes_[v.id].value; }
    std::size_t size() const { return nodes_.size(); }
    bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

    Var matmul(Var a, Var b);     // (m x k)(k x n)
    Var matmul_nt(Var a, Var b);  // (m x k)(n x k)^T
    Var transpose(Var a);
    // Elementwise; b may match a, be a single row repeated over a's rows, or a 1x1 scalar.
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double c);
    Var add_scalar(Var a, double c);
    Var concat_cols(const std::vector<Var>& parts);
    Var concat_rows(const std::vector<Var>& parts);
    Var slice_rows(Var a, std::size_t begin, std::size_t end);
    Var slice_cols(Var a, std::size_t begin, std::size_t end);
    Var softmax(Var a);
    Var log_softmax(Var a);
    Var sigmoid(Var a);
    Var relu(Var a);
    Var softplus(Var a);
    Var sin(Var a);
    Var cos(Var a);
    Var log(Var a);
    Var reciprocal(Var a);
    Var layer_norm(Var a, double eps = 1e-5);
    Var sum(Var a);
    Var mean(Var a);
    Var sum_rows(Var a);  // column sums -> 1 x n
    Var sparse(Var a, std::shared_ptr<const SparseRows> map);
    Var detach(Var a) { return constant(value(a)); }

    // Seeds d(loss)/d(loss) = 1 and propagates into every parameter leaf.
    void backward(Var loss);

private:
    struct Node {
        Tensor value;
        std::vector<double> grad;
        std::function<void(Graph&, const Node&)> backprop;
        std::vector<std::uint32_t> inputs;
        Tensor* param = nullptr;
        bool needs_grad = false;
    };

    Var push(Tensor value, std::vector<std::uint32_t> inputs, std::function<void(Graph&, const Node&)> backprop);
    std::vector<double>& grad_of(std::uint32_t id);
    void require_same(std::string_view op, Var a, Var b) const;
    Var elementwise_binary(std::string_view op, Var a, Var b, bool multiply, double sign);

    std::vector<Node> nodes_;
};

}  // namespace p4d::ad
