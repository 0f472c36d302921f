#include "emoe/moe.hpp"

#include "emoe/errors.hpp"

namespace emoe {

Expert make_expert(int d, int d_h, Rng& rng, const std::string& prefix) {
    if (!(d_h >= 1 && d_h < d))
        throw ParamError("make_expert: bottleneck requires 1 <= d_h < d, got d_h=" + std::to_string(d_h) +
                         " d=" + std::to_string(d));
    Expert e;
    e.w_in = make_leaf(rng.gaussian_matrix(d, d_h, 0.0, 0.02), prefix + ".w_in");
    e.b_in = make_leaf(Matrix::zeros(1, d_h), prefix + ".b_in");
    e.w_out = make_leaf(rng.gaussian_matrix(d_h, d, 0.0, 0.02), prefix + ".w_out");
    e.b_out = make_leaf(Matrix::zeros(1, d), prefix + ".b_out");
    return e;
}

MoELayer make_moe_layer(int d, int d_h, int r, int k, Rng& rng, const std::string& prefix, RouterKind kind) {
    MoELayer layer;
    layer.kind = kind;
    layer.d = d;
    layer.d_h = d_h;
    layer.k = k;
    if (kind == RouterKind::eigen) {
        layer.basis = make_basis(d, r, rng, prefix + ".router.U");
        layer.params = make_router_params(r, k, rng, prefix + ".router");
    } else {
        layer.gate = make_linear_gate(d, k, rng, prefix + ".gate");
    }
    layer.alpha = make_leaf(Matrix::filled(1, 1, 0.1), prefix + ".alpha");
    layer.experts.reserve(k);
    for (int i = 0; i < k; ++i)
        layer.experts.push_back(make_expert(d, d_h, rng, prefix + ".expert" + std::to_string(i)));
    return layer;
}

NodePtr expert_forward(const Expert& e, const NodePtr& h) {
    return add_row(matmul(gelu(add_row(matmul(h, e.w_in), e.b_in)), e.w_out), e.b_out);
}

std::vector<std::vector<int>> group_by_expert(const std::vector<int>& expert_index, int k) {
    std::vector<std::vector<int>> groups(k);
    for (size_t t = 0; t < expert_index.size(); ++t) {
        const int e = expert_index[t];
        if (e < 0 || e >= k)
            throw ContractError("group_by_expert: index " + std::to_string(e) + " outside K=" + std::to_string(k));
        groups[e].push_back(static_cast<int>(t));
    }
    return groups;
}

RoutingNodes moe_route(const MoELayer& layer, const NodePtr& patches) {
    return layer.kind == RouterKind::eigen ? route_nodes(patches, layer.basis, layer.params)
                                           : gate_route_nodes(patches, layer.gate);
}

MoEOut moe_forward(const MoELayer& layer, const NodePtr& patches) {
    const int n = patches->value.rows;
    if (n < 1)
        throw ContractError("moe_forward: empty patch-token batch");

    MoEOut out;
    out.routing = moe_route(layer, patches);

    // Each expert runs once on its gathered sub-batch; rows are disjoint, so
    // the scattered outputs sum to the per-token dispatch.
    layer.expert_token_evals = 0;
    NodePtr merged;
    for (int k = 0; k < layer.k; ++k) {
        std::vector<int> idx;
        for (int t = 0; t < n; ++t)
            if (out.routing.expert_index[t] == k)
                idx.push_back(t);
        if (idx.empty())
            continue;
        layer.expert_token_evals += static_cast<long>(idx.size());
        NodePtr sub = gather_rows(patches, idx);
        NodePtr y = expert_forward(layer.experts[k], sub);
        NodePtr placed = scatter_rows(y, idx, n);
        merged = merged ? add(merged, placed) : placed;
    }

    if (layer.scale_by_gate)
        merged = mul_col(merged, out.routing.gate_score);
    out.delta = mul_scalar(merged, layer.alpha);
    out.out = add(patches, out.delta);
    return out;
}

}  // namespace emoe
