#include "emoe/probe.hpp"

#include <cmath>

#include "emoe/errors.hpp"
#include "emoe/router.hpp"

namespace emoe {

ProbeResult linear_probe(const Matrix& features, const std::vector<int>& labels,
                         const std::vector<int>& support, const std::vector<int>& query, int num_classes,
                         double l2, double tol, int max_iters) {
    if (support.empty() || query.empty())
        throw ContractError("linear_probe: empty support or query set");
    if (static_cast<int>(labels.size()) != features.rows)
        throw ShapeError("linear_probe: " + std::to_string(labels.size()) + " labels for " +
                         features.shape_str());
    const int f = features.cols;
    const int n = static_cast<int>(support.size());

    ProbeResult res;
    res.support_size = n;
    res.query_size = static_cast<int>(query.size());

    // Standardize with support statistics; near-constant dimensions are kept
    // centered only and flagged.
    Matrix mean = Matrix::zeros(1, f), sd = Matrix::zeros(1, f);
    for (int i : support)
        for (int j = 0; j < f; ++j)
            mean(0, j) += features(i, j);
    for (int j = 0; j < f; ++j)
        mean(0, j) /= n;
    for (int i : support)
        for (int j = 0; j < f; ++j) {
            const double d = features(i, j) - mean(0, j);
            sd(0, j) += d * d;
        }
    for (int j = 0; j < f; ++j) {
        sd(0, j) = std::sqrt(sd(0, j) / n);
        if (sd(0, j) < 1e-10) {
            sd(0, j) = 1.0;
            res.degenerate = true;
        }
    }
    auto standardized = [&](int row) {
        Matrix x(1, f);
        for (int j = 0; j < f; ++j)
            x(0, j) = (features(row, j) - mean(0, j)) / sd(0, j);
        return x;
    };
    Matrix xs(n, f);
    for (int i = 0; i < n; ++i) {
        const Matrix x = standardized(support[i]);
        for (int j = 0; j < f; ++j)
            xs(i, j) = x(0, j);
    }

    Matrix w = Matrix::zeros(f, num_classes), b = Matrix::zeros(1, num_classes);
    const double lr = 1.0;
    for (int it = 1; it <= max_iters; ++it) {
        res.iterations = it;
        Matrix logits = matmul(xs, w);
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < num_classes; ++c)
                logits(i, c) += b(0, c);
        Matrix p = softmax_rows(logits, 1.0);
        for (int i = 0; i < n; ++i)
            p(i, labels[support[i]]) -= 1.0;  // P - Y

        Matrix gw = Matrix::zeros(f, num_classes);
        matmul_tn_acc(gw, xs, p);
        double worst = 0.0;
        for (int j = 0; j < f; ++j)
            for (int c = 0; c < num_classes; ++c) {
                gw(j, c) = gw(j, c) / n + l2 * w(j, c);
                worst = std::max(worst, std::fabs(gw(j, c)));
            }
        Matrix gb = Matrix::zeros(1, num_classes);
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < num_classes; ++c)
                gb(0, c) += p(i, c);
        for (int c = 0; c < num_classes; ++c) {
            gb(0, c) /= n;
            worst = std::max(worst, std::fabs(gb(0, c)));
        }
        if (worst < tol)
            break;
        for (size_t i = 0; i < w.data.size(); ++i)
            w.data[i] -= lr * gw.data[i];
        for (size_t i = 0; i < b.data.size(); ++i)
            b.data[i] -= lr * gb.data[i];
    }

    int hit = 0;
    for (int qi : query) {
        Matrix x = standardized(qi);
        Matrix logits = matmul(x, w);
        for (int c = 0; c < num_classes; ++c)
            logits(0, c) += b(0, c);
        hit += argmax_rows(logits)[0] == labels[qi];
    }
    res.accuracy = static_cast<double>(hit) / query.size();
    return res;
}

}  // namespace emoe
