#include "emoe/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "emoe/errors.hpp"

namespace emoe {

double relative_error(double analytic, double numeric) {
    const double denom = std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
    return std::fabs(analytic - numeric) / denom;
}

GradCheckReport gradcheck(const std::function<NodePtr()>& build_loss,
                          const std::vector<NodePtr>& params,
                          double h,
                          int max_entries,
                          double inject_analytic_offset) {
    if (params.empty())
        throw ContractError("gradcheck: no parameters to probe");
    if (!(h > 0.0))
        throw ParamError("gradcheck: step must be positive");

    NodePtr loss = build_loss();
    // Leaf grads accumulate across backward calls; the probed leaves may
    // carry grads from earlier passes, so the analytic map must start clean.
    zero_gradients(loss);
    GradMap analytic = backward(loss);

    GradCheckReport report;
    bool injected = false;
    for (const NodePtr& p : params) {
        auto it = analytic.find(p->name);
        const Matrix grad = it != analytic.end() ? it->second : Matrix::zeros(p->value.rows, p->value.cols);

        const int total = static_cast<int>(p->value.data.size());
        const int probes = (max_entries <= 0 || max_entries >= total) ? total : max_entries;
        for (int k = 0; k < probes; ++k) {
            // Evenly spaced, deterministic probe positions.
            const int idx = static_cast<int>((static_cast<long long>(k) * total) / probes);
            const double saved = p->value.data[idx];

            p->value.data[idx] = saved + h;
            const double up = build_loss()->value(0, 0);
            p->value.data[idx] = saved - h;
            const double down = build_loss()->value(0, 0);
            p->value.data[idx] = saved;

            GradCheckEntry entry;
            entry.param = p->name;
            entry.index = idx;
            entry.analytic = grad.data[idx];
            if (!injected && inject_analytic_offset != 0.0) {
                entry.analytic += inject_analytic_offset;
                injected = true;
            }
            entry.numeric = (up - down) / (2.0 * h);
            entry.rel_err = relative_error(entry.analytic, entry.numeric);
            ++report.entries_checked;
            if (entry.rel_err >= report.max_rel_err) {
                report.max_rel_err = entry.rel_err;
                report.worst = entry;
            }
        }
    }
    return report;
}

}  // namespace emoe
