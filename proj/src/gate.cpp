#include "emoe/gate.hpp"

#include "emoe/errors.hpp"

namespace emoe {

LinearGate make_linear_gate(int d, int k, Rng& rng, const std::string& prefix) {
    if (d < 1 || k < 1)
        throw ParamError("make_linear_gate: need d >= 1 and k >= 1");
    LinearGate g;
    g.d = d;
    g.k = k;
    g.w = make_leaf(rng.gaussian_matrix(d, k, 0.0, 0.02), prefix + ".w");
    g.b = make_leaf(Matrix::zeros(1, k), prefix + ".b");
    return g;
}

RoutingNodes gate_route_nodes(const NodePtr& h, const LinearGate& gate) {
    if (h->value.cols != gate.d)
        throw ShapeError("gate_route: tokens " + h->value.shape_str() + " vs gate " + gate.w->value.shape_str());
    RoutingNodes rn;
    rn.input = h;
    rn.scores = add_row(matmul(h, gate.w), gate.b);
    rn.probs = softmax_rows(rn.scores, gate.tau);
    rn.expert_index = argmax_rows(rn.probs->value);
    rn.gate_score = pick_per_row(rn.probs, rn.expert_index);
    return rn;
}

RoutingDecision gate_route(const Matrix& h, const LinearGate& gate) {
    return gate_route_nodes(make_constant(h), gate).decision();
}

NodePtr lbl_node(const NodePtr& probs, const std::vector<int>& expert_index) {
    const int n = probs->value.rows;
    const int k = probs->value.cols;
    if (n <= 0 || k <= 0)
        throw ContractError("lbl: empty probs " + probs->value.shape_str());
    if (static_cast<int>(expert_index.size()) != n)
        throw ShapeError("lbl: " + std::to_string(expert_index.size()) + " indices for " + probs->value.shape_str());
    Matrix f = Matrix::zeros(1, k);
    for (int idx : expert_index) {
        if (idx < 0 || idx >= k)
            throw ContractError("lbl: expert index " + std::to_string(idx) + " outside K=" + std::to_string(k));
        f(0, idx) += 1.0 / n;
    }
    // P_k as a 1 x K node keeps the loss differentiable through the probs.
    NodePtr p_mean = scale(col_sum(probs), 1.0 / n);
    return scale(sum_all(mul_row(p_mean, make_constant(f))), static_cast<double>(k));
}

NodePtr lbl(const Matrix& probs, const std::vector<int>& expert_index) {
    return lbl_node(make_constant(probs), expert_index);
}

}  // namespace emoe
