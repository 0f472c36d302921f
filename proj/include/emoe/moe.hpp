#pragma once

#include <string>
#include <vector>

#include "emoe/gate.hpp"
#include "emoe/router.hpp"

namespace emoe {

// Two-layer bottleneck MLP: gelu(h w_in + b_in) w_out + b_out.
struct Expert {
    NodePtr w_in;   // d x d_h
    NodePtr b_in;   // 1 x d_h
    NodePtr w_out;  // d_h x d
    NodePtr b_out;  // 1 x d
};

enum class RouterKind { eigen, gate };

struct MoELayer {
    std::vector<Expert> experts;
    RouterKind kind = RouterKind::eigen;
    EigenBasis basis;      // eigen router
    RouterParams params;   // eigen router
    LinearGate gate;       // gate baseline
    NodePtr alpha;         // 1 x 1 learnable residual scale
    bool scale_by_gate = true;
    int d = 0;
    int d_h = 0;
    int k = 0;
    // Instrumentation: per-token expert evaluations in the last forward.
    mutable long expert_token_evals = 0;
};

struct MoEOut {
    NodePtr out;    // h + alpha * g * Expert_{k*}(h)
    NodePtr delta;  // alpha * g * Expert_{k*}(h)
    RoutingNodes routing;
};

Expert make_expert(int d, int d_h, Rng& rng, const std::string& prefix);
MoELayer make_moe_layer(int d, int d_h, int r, int k, Rng& rng, const std::string& prefix,
                        RouterKind kind = RouterKind::eigen);

NodePtr expert_forward(const Expert& e, const NodePtr& h);

RoutingNodes moe_route(const MoELayer& layer, const NodePtr& patches);
MoEOut moe_forward(const MoELayer& layer, const NodePtr& patches);

// Token indices grouped by selected expert, ascending within each group.
std::vector<std::vector<int>> group_by_expert(const std::vector<int>& expert_index, int k);

}  // namespace emoe
