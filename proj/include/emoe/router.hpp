#pragma once

#include <string>
#include <vector>

#include "emoe/graph.hpp"
#include "emoe/rng.hpp"

namespace emoe {

// Learnable basis U (d x r) with near-orthonormal columns.
struct EigenBasis {
    NodePtr U;
    int d = 0;
    int r = 0;
};

// gamma: 1 x r, pi: r x k, bias: 1 x k.
struct RouterParams {
    NodePtr gamma;
    NodePtr pi;
    NodePtr bias;
    double tau = 1.0;
    double eps = 1e-6;
    double lambda_ortho = 1e-2;
    int r = 0;
    int k = 0;
};

// Value-level routing outcome for one token batch.
struct RoutingDecision {
    Matrix energies;                 // N x r (empty for the gate baseline)
    Matrix probs;                    // N x K
    std::vector<int> expert_index;   // argmax per token, lowest index on ties
    std::vector<double> gate_score;  // probs[t, expert_index[t]]
};

// Graph-level routing outcome; `decision()` snapshots the values.
struct RoutingNodes {
    NodePtr input;       // the token batch the router consumed
    NodePtr z;           // N x r projections (null for the gate baseline)
    NodePtr energies;    // N x r (null for the gate baseline)
    NodePtr scores;      // N x K pre-softmax
    NodePtr probs;       // N x K
    NodePtr gate_score;  // N x 1 picked probability
    std::vector<int> expert_index;

    RoutingDecision decision() const;
};

EigenBasis make_basis(int d, int r, Rng& rng, const std::string& name);
RouterParams make_router_params(int r, int k, Rng& rng, const std::string& prefix);

// C = (1/N) H^T H.
Matrix empirical_covariance(const Matrix& h);

// Z = H U.
Matrix project(const Matrix& h, const EigenBasis& basis);

// e_{t,j} = z_{t,j}^2 / (sum_k z_{t,k}^2 + eps). eps = 0 is allowed for
// exact scale-invariance analysis; zero-energy rows come out all-zero.
Matrix energy_values(const Matrix& z, double eps);

// s_{t,k} = sum_j gamma_j pi_{j,k} e_{t,j} + b_k.
Matrix scores_values(const Matrix& e, const RouterParams& params);

// project -> energy -> scores -> softmax(tau) -> argmax (lowest-index ties).
RoutingNodes route_nodes(const NodePtr& h, const EigenBasis& basis, const RouterParams& params);
RoutingDecision route(const Matrix& h, const EigenBasis& basis, const RouterParams& params);

// lambda * ||U^T U - I_r||_F^2, differentiable in U.
NodePtr ortho_loss(const EigenBasis& basis, double lambda_ortho);

// Thin QR with R_ii > 0; throws DegeneracyError naming the first
// rank-deficient column.
Matrix qr_orthonormalize(const Matrix& u);
void reorthonormalize(EigenBasis& basis);

// Top-r subspace of a symmetric PSD matrix by subspace iteration with QR
// deflation; falls back to a random orthonormal basis on degenerate input.
Matrix power_iteration_basis(const Matrix& cov, int r, Rng& fallback_rng,
                             int max_iters = 100, double tol = 1e-8);

// Argmax with lowest-index tie-break, per row.
std::vector<int> argmax_rows(const Matrix& probs);

double orthonormality_defect(const Matrix& u);  // ||U^T U - I||_F

}  // namespace emoe
