#pragma once

#include <vector>

#include "emoe/matrix.hpp"

namespace emoe {

struct ProbeResult {
    double accuracy = 0.0;
    int support_size = 0;
    int query_size = 0;
    int iterations = 0;
    bool degenerate = false;  // near-constant feature dimensions were seen
};

// Multinomial logistic regression on frozen features: full-batch gradient
// descent (L2 lambda) to gradient tolerance `tol` or `max_iters`, evaluated
// on the query rows.
ProbeResult linear_probe(const Matrix& features, const std::vector<int>& labels,
                         const std::vector<int>& support, const std::vector<int>& query, int num_classes,
                         double l2 = 1e-4, double tol = 1e-6, int max_iters = 10000);

}  // namespace emoe
