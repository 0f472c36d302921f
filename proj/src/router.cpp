#include "emoe/router.hpp"

#include <cmath>

#include "emoe/errors.hpp"

namespace emoe {

RoutingDecision RoutingNodes::decision() const {
    RoutingDecision d;
    if (energies)
        d.energies = energies->value;
    d.probs = probs->value;
    d.expert_index = expert_index;
    d.gate_score.resize(expert_index.size());
    for (size_t t = 0; t < expert_index.size(); ++t)
        d.gate_score[t] = gate_score->value(static_cast<int>(t), 0);
    return d;
}

EigenBasis make_basis(int d, int r, Rng& rng, const std::string& name) {
    if (r < 1 || r >= d)
        throw ParamError("make_basis: need 1 <= r < d, got r=" + std::to_string(r) + " d=" + std::to_string(d));
    EigenBasis basis;
    basis.d = d;
    basis.r = r;
    basis.U = make_leaf(qr_orthonormalize(rng.gaussian_matrix(d, r, 0.0, 1.0)), name);
    return basis;
}

RouterParams make_router_params(int r, int k, Rng& rng, const std::string& prefix) {
    if (r < 1 || k < 1)
        throw ParamError("make_router_params: need r >= 1 and k >= 1");
    RouterParams p;
    p.r = r;
    p.k = k;
    p.gamma = make_leaf(Matrix::filled(1, r, 1.0), prefix + ".gamma");
    p.pi = make_leaf(rng.gaussian_matrix(r, k, 0.0, 0.02), prefix + ".pi");
    p.bias = make_leaf(Matrix::zeros(1, k), prefix + ".bias");
    return p;
}

Matrix empirical_covariance(const Matrix& h) {
    if (h.rows < 1)
        throw ContractError("empirical_covariance: empty token batch");
    Matrix c = Matrix::zeros(h.cols, h.cols);
    matmul_tn_acc(c, h, h);
    const double inv_n = 1.0 / h.rows;
    for (double& v : c.data)
        v *= inv_n;
    // Symmetrize exactly; accumulation order can differ across the diagonal.
    for (int i = 0; i < c.rows; ++i)
        for (int j = i + 1; j < c.cols; ++j) {
            const double s = 0.5 * (c(i, j) + c(j, i));
            c(i, j) = s;
            c(j, i) = s;
        }
    return c;
}

Matrix project(const Matrix& h, const EigenBasis& basis) {
    return matmul(h, basis.U->value);
}

Matrix energy_values(const Matrix& z, double eps) {
    if (!(eps >= 0.0))
        throw ParamError("energy: eps must be nonnegative");
    Matrix e(z.rows, z.cols);
    for (int t = 0; t < z.rows; ++t) {
        double s = 0.0;
        for (int j = 0; j < z.cols; ++j)
            s += z(t, j) * z(t, j);
        const double d = s + eps;
        for (int j = 0; j < z.cols; ++j)
            e(t, j) = d > 0.0 ? z(t, j) * z(t, j) / d : 0.0;
    }
    return e;
}

Matrix scores_values(const Matrix& e, const RouterParams& params) {
    if (e.cols != params.r)
        throw ShapeError("scores: energies " + e.shape_str() + " vs r=" + std::to_string(params.r));
    Matrix weighted = e;
    for (int t = 0; t < e.rows; ++t)
        for (int j = 0; j < e.cols; ++j)
            weighted(t, j) *= params.gamma->value(0, j);
    Matrix s = matmul(weighted, params.pi->value);
    for (int t = 0; t < s.rows; ++t)
        for (int k = 0; k < s.cols; ++k)
            s(t, k) += params.bias->value(0, k);
    return s;
}

std::vector<int> argmax_rows(const Matrix& probs) {
    std::vector<int> idx(probs.rows);
    for (int t = 0; t < probs.rows; ++t) {
        int best = 0;
        double best_v = probs(t, 0);
        for (int k = 1; k < probs.cols; ++k)
            if (probs(t, k) > best_v) {  // strict: ties keep the lowest index
                best_v = probs(t, k);
                best = k;
            }
        idx[t] = best;
    }
    return idx;
}

RoutingNodes route_nodes(const NodePtr& h, const EigenBasis& basis, const RouterParams& params) {
    if (h->value.cols != basis.d)
        throw ShapeError("route: tokens " + h->value.shape_str() + " vs basis " + basis.U->value.shape_str());
    RoutingNodes rn;
    rn.input = h;
    rn.z = matmul(h, basis.U);
    rn.energies = energy(rn.z, params.eps);
    rn.scores = add_row(matmul(mul_row(rn.energies, params.gamma), params.pi), params.bias);
    rn.probs = softmax_rows(rn.scores, params.tau);
    rn.expert_index = argmax_rows(rn.probs->value);
    rn.gate_score = pick_per_row(rn.probs, rn.expert_index);
    return rn;
}

RoutingDecision route(const Matrix& h, const EigenBasis& basis, const RouterParams& params) {
    return route_nodes(make_constant(h), basis, params).decision();
}

NodePtr ortho_loss(const EigenBasis& basis, double lambda_ortho) {
    if (!(lambda_ortho >= 0.0))
        throw ParamError("ortho_loss: lambda must be nonnegative");
    NodePtr gram = matmul(transpose(basis.U), basis.U);
    NodePtr diff = sub(gram, make_constant(Matrix::identity(basis.r)));
    return scale(sum_all(hadamard(diff, diff)), lambda_ortho);
}

namespace {

// One modified Gram-Schmidt sweep; returns false at the first column whose
// residual collapses, reporting it via `bad_col`.
bool mgs_pass(Matrix& u, int* bad_col) {
    for (int j = 0; j < u.cols; ++j) {
        for (int i = 0; i < j; ++i) {
            double dot = 0.0;
            for (int row = 0; row < u.rows; ++row)
                dot += u(row, i) * u(row, j);
            for (int row = 0; row < u.rows; ++row)
                u(row, j) -= dot * u(row, i);
        }
        double norm = 0.0;
        for (int row = 0; row < u.rows; ++row)
            norm += u(row, j) * u(row, j);
        norm = std::sqrt(norm);
        if (norm < 1e-12) {
            if (bad_col)
                *bad_col = j;
            return false;
        }
        for (int row = 0; row < u.rows; ++row)
            u(row, j) /= norm;  // R_jj = norm > 0 by construction
    }
    return true;
}

}  // namespace

Matrix qr_orthonormalize(const Matrix& u) {
    if (u.cols > u.rows)
        throw ShapeError("qr_orthonormalize: more columns than rows in " + u.shape_str());
    Matrix q = u;
    int bad = -1;
    if (!mgs_pass(q, &bad))
        throw DegeneracyError("qr_orthonormalize: column " + std::to_string(bad) +
                              " is linearly dependent on earlier columns");
    // Second sweep restores orthogonality lost to cancellation ("twice is
    // enough"); it cannot introduce rank deficiency.
    mgs_pass(q, nullptr);
    return q;
}

void reorthonormalize(EigenBasis& basis) {
    basis.U->value = qr_orthonormalize(basis.U->value);
}

double orthonormality_defect(const Matrix& u) {
    Matrix gram = Matrix::zeros(u.cols, u.cols);
    matmul_tn_acc(gram, u, u);
    double acc = 0.0;
    for (int i = 0; i < gram.rows; ++i)
        for (int j = 0; j < gram.cols; ++j) {
            const double d = gram(i, j) - (i == j ? 1.0 : 0.0);
            acc += d * d;
        }
    return std::sqrt(acc);
}

Matrix power_iteration_basis(const Matrix& cov, int r, Rng& fallback_rng, int max_iters, double tol) {
    if (cov.rows != cov.cols)
        throw ShapeError("power_iteration_basis: covariance must be square, got " + cov.shape_str());
    if (r < 1 || r > cov.rows)
        throw ParamError("power_iteration_basis: r outside [1, " + std::to_string(cov.rows) + "]");

    const Matrix start = fallback_rng.gaussian_matrix(cov.rows, r, 0.0, 1.0);
    Matrix q;
    try {
        q = qr_orthonormalize(start);
        Matrix prev_proj = Matrix::zeros(cov.rows, cov.rows);
        matmul_nt_acc(prev_proj, q, q);
        for (int it = 0; it < max_iters; ++it) {
            Matrix next = matmul(cov, q);
            q = qr_orthonormalize(next);
            Matrix proj = Matrix::zeros(cov.rows, cov.rows);
            matmul_nt_acc(proj, q, q);
            double drift = 0.0;
            for (size_t i = 0; i < proj.data.size(); ++i) {
                const double d = proj.data[i] - prev_proj.data[i];
                drift += d * d;
            }
            if (std::sqrt(drift) < tol)
                return q;
            prev_proj = proj;
        }
        return q;
    } catch (const DegeneracyError&) {
        // Degenerate batch statistics: any orthonormal frame is as good.
        return qr_orthonormalize(fallback_rng.gaussian_matrix(cov.rows, r, 0.0, 1.0));
    }
}

}  // namespace emoe
