#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "emoe/matrix.hpp"

namespace emoe {

// One vertex of the reverse-mode computation graph. Values are computed
// eagerly at construction; gradients are materialized lazily during
// backward(). The graph is acyclic by construction: every op creates its
// output node after its inputs, so creation ids give a topological order.
struct Node {
    Matrix value;
    Matrix grad;  // empty until first accumulation
    bool requires_grad = false;
    bool is_leaf = false;
    std::string name;  // leaves only; keys the gradient map
    uint64_t id = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // pulls this->grad into parents
    bool backward_done = false;           // set on the loss root after backward

    Matrix& grad_ref();  // materializes zeros on first use
};

using NodePtr = std::shared_ptr<Node>;
using GradMap = std::map<std::string, Matrix>;

// Trainable parameter; name must be unique within a graph and non-empty.
NodePtr make_leaf(Matrix value, const std::string& name);
// Non-trainable input/constant.
NodePtr make_constant(Matrix value);

// ---- differentiable operations -----------------------------------------
NodePtr add(const NodePtr& a, const NodePtr& b);
NodePtr sub(const NodePtr& a, const NodePtr& b);
NodePtr hadamard(const NodePtr& a, const NodePtr& b);
NodePtr matmul(const NodePtr& a, const NodePtr& b);
NodePtr transpose(const NodePtr& a);
NodePtr scale(const NodePtr& a, double c);
// Broadcast row vector (1 x cols) over every row.
NodePtr add_row(const NodePtr& a, const NodePtr& row);
NodePtr mul_row(const NodePtr& a, const NodePtr& row);
// Per-row scaling by a column vector (rows x 1).
NodePtr mul_col(const NodePtr& a, const NodePtr& col);
// Multiply by a learnable scalar (1 x 1 node).
NodePtr mul_scalar(const NodePtr& a, const NodePtr& s);
NodePtr sum_all(const NodePtr& a);              // -> 1x1
NodePtr col_sum(const NodePtr& a);              // -> 1 x cols
NodePtr gelu(const NodePtr& a);
NodePtr softmax_rows(const NodePtr& a, double tau);
NodePtr layernorm(const NodePtr& a, const NodePtr& gain, const NodePtr& bias, double eps);
// Normalized projection energy: e_{t,j} = z_{t,j}^2 / (sum_k z_{t,k}^2 + eps).
NodePtr energy(const NodePtr& z, double eps);
NodePtr gather_rows(const NodePtr& a, std::vector<int> indices);
// Place rows of `a` at `indices` of a zero (total_rows x cols) matrix.
NodePtr scatter_rows(const NodePtr& a, std::vector<int> indices, int total_rows);
NodePtr slice_cols(const NodePtr& a, int first, int count);
NodePtr concat_cols(const std::vector<NodePtr>& parts);
NodePtr concat_rows(const std::vector<NodePtr>& parts);
// out[t,0] = a[t, index[t]]
NodePtr pick_per_row(const NodePtr& a, std::vector<int> index);
// Mean cross-entropy of row-softmaxed logits against integer labels.
NodePtr softmax_cross_entropy_mean(const NodePtr& logits, const std::vector<int>& labels);

// ---- traversal -----------------------------------------------------------
// Reverse accumulation from a scalar (1x1) loss. Returns the gradient map
// for every named leaf reachable from the loss; gradients also remain on
// the leaf nodes for in-place optimizers. Accumulates on top of existing
// leaf gradients. A second backward from the same loss without
// zero_gradients() is rejected.
GradMap backward(const NodePtr& loss);
// Clears gradients and the backward flag on everything reachable.
void zero_gradients(const NodePtr& root);
// All reachable named leaves with requires_grad, sorted by name.
std::vector<NodePtr> collect_leaves(const NodePtr& root);

}  // namespace emoe
