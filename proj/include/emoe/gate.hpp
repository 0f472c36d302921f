#pragma once

#include <string>
#include <vector>

#include "emoe/router.hpp"

namespace emoe {

// Conventional learned gate: p = softmax(h w + b, tau), top-1 dispatch.
struct LinearGate {
    NodePtr w;  // d x k
    NodePtr b;  // 1 x k
    double tau = 1.0;
    int d = 0;
    int k = 0;
};

LinearGate make_linear_gate(int d, int k, Rng& rng, const std::string& prefix);

RoutingNodes gate_route_nodes(const NodePtr& h, const LinearGate& gate);
RoutingDecision gate_route(const Matrix& h, const LinearGate& gate);

// Switch-style auxiliary load-balancing loss K * sum_k f_k P_k, where f_k is
// the (non-differentiable) fraction of tokens routed to k and P_k the mean
// probability mass on k.
NodePtr lbl_node(const NodePtr& probs, const std::vector<int>& expert_index);
NodePtr lbl(const Matrix& probs, const std::vector<int>& expert_index);

}  // namespace emoe
