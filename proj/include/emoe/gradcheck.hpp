#pragma once

#include <functional>
#include <string>
#include <vector>

#include "emoe/graph.hpp"

namespace emoe {

// One finite-difference probe against the analytic gradient.
struct GradCheckEntry {
    std::string param;
    int index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    GradCheckEntry worst;
    int entries_checked = 0;

    bool pass(double tol) const { return entries_checked > 0 && max_rel_err < tol; }
};

// Central differences with step h on the leaves' values. `build_loss` must
// rebuild the forward graph from the leaves' current values on every call;
// the same leaf nodes are perturbed in place. At most `max_entries` entries
// per tensor are probed (evenly spaced, deterministic); <=0 checks all.
// Leaves missing from the gradient map are treated as zero-gradient (the
// finite differences then confirm they really are inert).
// `inject_analytic_offset` shifts the first probed analytic value; it exists
// solely as a negative control for the verification tooling.
GradCheckReport gradcheck(const std::function<NodePtr()>& build_loss,
                          const std::vector<NodePtr>& params,
                          double h = 1e-5,
                          int max_entries = 0,
                          double inject_analytic_offset = 0.0);

double relative_error(double analytic, double numeric);

}  // namespace emoe
