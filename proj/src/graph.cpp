#include "emoe/graph.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

namespace emoe {

namespace {

std::atomic<uint64_t> g_next_id{1};

NodePtr make_node(Matrix value, std::vector<NodePtr> parents) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->id = g_next_id.fetch_add(1);
    for (const auto& p : parents)
        if (p->requires_grad)
            n->requires_grad = true;
    n->parents = std::move(parents);
    return n;
}

void accumulate(Matrix& dst, const Matrix& src) {
    for (size_t i = 0; i < dst.data.size(); ++i)
        dst.data[i] += src.data[i];
}

bool wants_grad(const NodePtr& p) { return p->requires_grad; }

}  // namespace

Matrix& Node::grad_ref() {
    if (grad.rows != value.rows || grad.cols != value.cols)
        grad = Matrix::zeros(value.rows, value.cols);
    return grad;
}

NodePtr make_leaf(Matrix value, const std::string& name) {
    if (name.empty())
        throw ContractError("make_leaf: leaf parameters must be named");
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    n->is_leaf = true;
    n->name = name;
    n->id = g_next_id.fetch_add(1);
    return n;
}

NodePtr make_constant(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->id = g_next_id.fetch_add(1);
    return n;
}

NodePtr add(const NodePtr& a, const NodePtr& b) {
    auto n = make_node(emoe::add(a->value, b->value), {a, b});
    if (n->requires_grad)
        n->backprop = [](Node& self) {
            if (wants_grad(self.parents[0]))
                accumulate(self.parents[0]->grad_ref(), self.grad);
            if (wants_grad(self.parents[1]))
                accumulate(self.parents[1]->grad_ref(), self.grad);
        };
    return n;
}

NodePtr sub(const NodePtr& a, const NodePtr& b) {
    auto n = make_node(emoe::sub(a->value, b->value), {a, b});
    if (n->requires_grad)
        n->backprop = [](Node& self) {
            if (wants_grad(self.parents[0]))
                accumulate(self.parents[0]->grad_ref(), self.grad);
            if (wants_grad(self.parents[1])) {
                Matrix& g = self.parents[1]->grad_ref();
                for (size_t i = 0; i < g.data.size(); ++i)
                    g.data[i] -= self.grad.data[i];
            }
        };
    return n;
}

NodePtr hadamard(const NodePtr& a, const NodePtr& b) {
    auto n = make_node(emoe::hadamard(a->value, b->value), {a, b});
    if (n->requires_grad)
        n->backprop = [](Node& self) {
            const Matrix& av = self.parents[0]->value;
            const Matrix& bv = self.parents[1]->value;
            if (wants_grad(self.parents[0])) {
                Matrix& g = self.parents[0]->grad_ref();
                for (size_t i = 0; i < g.data.size(); ++i)
                    g.data[i] += self.grad.data[i] * bv.data[i];
            }
            if (wants_grad(self.parents[1])) {
                Matrix& g = self.parents[1]->grad_ref();
                for (size_t i = 0; i < g.data.size(); ++i)
                    g.data[i] += self.grad.data[i] * av.data[i];
            }
        };
    return n;
}

NodePtr matmul(const NodePtr& a, const NodePtr& b) {
    auto n = make_node(emoe::matmul(a->value, b->value), {a, b});
    if (n->requires_grad)
        n->backprop = [](Node& self) {
            if (wants_grad(self.parents[0]))
                matmul_nt_acc(self.parents[0]->grad_ref(), self.grad, self.parents[1]->value);
            if (wants_grad(self.parents[1]))
                matmul_tn_acc(self.parents[1]->grad_ref(), self.parents[0]->value, self.grad);
        };
    return n;
}

NodePtr transpose(const NodePtr& a) {
    auto n = make_node(emoe::transpose(a->value), {a});
    if (n->requires_grad)
        n->backprop = [](Node& self) {
            Matrix& g = self.parents[0]->grad_ref();
            for (int i = 0; i < self.grad.rows; ++i)
                for (int j = 0; j < self.grad.cols; ++j)
                    g(j, i) += self.grad(i, j);
        };
    return n;
}

NodePtr scale(const NodePtr& a, double c) {
    auto n = make_node(emoe::scale(a->value, c), {a});
    if (n->requires_grad)
        n->backprop = [c](Node& self) {
            Matrix& g = self.parents[0]->grad_ref();
            for (size_t i = 0; i < g.data.size(); ++i)
                g.data[i] += c * self.grad.data[i];
        };
    return n;
}

NodePtr add_row(const NodePtr& a, const NodePtr& row) {
    const Matrix& av = a->value;
    const Matrix& rv = row->value;
    if (rv.rows != 1 || rv.cols != av.cols)
        throw ShapeError("add_row: row must be 1x" + std::to_string(av.cols) + ", got " + rv.shape_str());
    Matrix out = av;
    for (int i = 0; i < out.rows; ++i)
        for (int j = 0; j < out.cols; ++j)
            out(i, j) += rv(0, j);
    auto n = make_node(std::move(out), {a, row});
    if (n->requires_grad)
        n->backprop = [](Node& self) {
            if (wants_grad(self.parents[0]))
                accumulate(self.parents[0]->grad_ref(), self.grad);
            if (wants_grad(self.parents[1])) {
                Matrix& g = self.parents[1]->grad_ref();
                for (int i = 0; i < self.grad.rows; ++i)
                    for (int j = 0; j < self.grad.cols; ++j)
                        g(0, j) += self.grad(i, j);
            }
        };
    return n;
}

NodePtr mul_row(const NodePtr& a, const NodePtr& row) {
    const Matrix& av = a->value;
    const Matrix& rv = row->value;
    if (rv.rows != 1 || rv.cols != av.cols)
        throw ShapeError("mul_row: row must be 1x" + std::to_string(av.cols) + ", got " + rv.shape_str());
    Matrix out = av;
    for (int i = 0; i < out.rows; ++i)
        for (int j = 0; j < out.cols; ++j)
            out(i, j) *= rv(0, j);
    auto n = make_node(std::move(out), {a, row});
    if (n->requires_grad)
        n->backprop = [](Node& self) {
            const Matrix& av2 = self.parents[0]->value;
            const Matrix& rv2 = self.parents[1]->value;
            if (wants_grad(self.parents[0])) {
                Matrix& g = self.parents[0]->grad_ref();
                for (int i = 0; i < g.rows; ++i)
                    for (int j = 0; j < g.cols; ++j)
                        g(i, j) += self.grad(i, j) * rv2(0, j);
            }
            if (wants_grad(self.parents[1])) {
                Matrix& g = self.parents[1]->grad_ref();
                for (int i = 0; i < av2.rows; ++i)
                    for (int j = 0; j < av2.cols; ++j)
                        g(0, j) += self.grad(i, j) * av2(i, j);
            }
        };
    return n;
}

NodePtr mul_col(const NodePtr& a, const NodePtr& col) {
    const Matrix& av = a->value;
    const Matrix& cv = col->value;
    if (cv.cols != 1 || cv.rows != av.rows)
        throw ShapeError("mul_col: col must be " + std::to_string(av.rows) + "x1, got " + cv.shape_str());
    Matrix out = av;
    for (int i = 0; i < out.rows; ++i) {
        const double c = cv(i, 0);
        for (int j = 0; j < out.cols; ++j)
            out(i, j) *= c;
    }
    auto n = make_node(std::move(out), {a, col});
    if (n->requires_grad)
        n->backprop = [](Node& self) {
            const Matrix& av2 = self.parents[0]->value;
            const Matrix& cv2 = self.parents[1]->value;
            if (wants_grad(self.parents[0])) {
                Matrix& g = self.parents[0]->grad_ref();
                for (int i = 0; i < g.rows; ++i) {
                    const double c = cv2(i, 0);
                    for (int j = 0; j < g.cols; ++j)
                        g(i, j) += self.grad(i, j) * c;
                }
            }
            if (wants_grad(self.parents[1])) {
                Matrix& g = self.parents[1]->grad_ref();
                for (int i = 0; i < av2.rows; ++i) {
                    double acc = 0.0;
                    for (int j = 0; j < av2.cols; ++j)
                        acc += self.grad(i, j) * av2(i, j);
                    g(i, 0) += acc;
                }
            }
        };
    return n;
}

NodePtr mul_scalar(const NodePtr& a, const NodePtr& s) {
    if (s->value.rows != 1 || s->value.cols != 1)
        throw ShapeError("mul_scalar: scalar must be 1x1, got " + s->value.shape_str());
    auto n = make_node(emoe::scale(a->value, s->value(0, 0)), {a, s});
    if (n->requires_grad)
        n->backprop = [](Node& self) {
            const Matrix& av = self.parents[0]->value;
            const double sv = self.parents[1]->value(0, 0);
            if (wants_grad(self.parents[0])) {
                Matrix& g = self.parents[0]->grad_ref();
                for (size_t i = 0; i < g.data.size(); ++i)
                    g.data[i] += sv * self.grad.data[i];
            }
            if (wants_grad(self.parents[1])) {
                double acc = 0.0;
                for (size_t i = 0; i < av.data.size(); ++i)
                    acc += self.grad.data[i] * av.data[i];
                self.parents[1]->grad_ref()(0, 0) += acc;
            }
        };
    return n;
}

NodePtr sum_all(const NodePtr& a) {
    Matrix out(1, 1);
    out(0, 0) = emoe::sum_all(a->value);
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad)
        n->backprop = [](Node& self) {
            Matrix& g = self.parents[0]->grad_ref();
            const double gv = self.grad(0, 0);
            for (double& v : g.data)
                v += gv;
        };
    return n;
}

NodePtr col_sum(const NodePtr& a) {
    Matrix out(1, a->value.cols);
    for (int i = 0; i < a->value.rows; ++i)
        for (int j = 0; j < a->value.cols; ++j)
            out(0, j) += a->value(i, j);
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad)
        n->backprop = [](Node& self) {
            Matrix& g = self.parents[0]->grad_ref();
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j)
                    g(i, j) += self.grad(0, j);
        };
    return n;
}

NodePtr gelu(const NodePtr& a) {
    auto n = make_node(emoe::gelu(a->value), {a});
    if (n->requires_grad)
        n->backprop = [](Node& self) {
            const Matrix& av = self.parents[0]->value;
            Matrix& g = self.parents[0]->grad_ref();
            for (size_t i = 0; i < g.data.size(); ++i)
                g.data[i] += self.grad.data[i] * gelu_derivative(av.data[i]);
        };
    return n;
}

NodePtr softmax_rows(const NodePtr& a, double tau) {
    auto n = make_node(emoe::softmax_rows(a->value, tau), {a});
    if (n->requires_grad)
        n->backprop = [tau](Node& self) {
            const Matrix& y = self.value;
            Matrix& g = self.parents[0]->grad_ref();
            for (int i = 0; i < y.rows; ++i) {
                double dot = 0.0;
                for (int j = 0; j < y.cols; ++j)
                    dot += self.grad(i, j) * y(i, j);
                for (int j = 0; j < y.cols; ++j)
                    g(i, j) += y(i, j) * (self.grad(i, j) - dot) / tau;
            }
        };
    return n;
}

NodePtr layernorm(const NodePtr& a, const NodePtr& gain, const NodePtr& bias, double eps) {
    // Forward recomputes nothing at backward time: cache the standardized
    // rows and inverse stddevs.
    const Matrix& x = a->value;
    Matrix out = emoe::layernorm(x, gain->value, bias->value, eps);
    auto xhat = std::make_shared<Matrix>(x.rows, x.cols);
    auto inv_sd = std::make_shared<Matrix>(x.rows, 1);
    for (int i = 0; i < x.rows; ++i) {
        double mean = 0.0;
        for (int j = 0; j < x.cols; ++j)
            mean += x(i, j);
        mean /= x.cols;
        double var = 0.0;
        for (int j = 0; j < x.cols; ++j)
            var += (x(i, j) - mean) * (x(i, j) - mean);
        var /= x.cols;
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_sd)(i, 0) = inv;
        for (int j = 0; j < x.cols; ++j)
            (*xhat)(i, j) = (x(i, j) - mean) * inv;
    }
    auto n = make_node(std::move(out), {a, gain, bias});
    if (n->requires_grad)
        n->backprop = [xhat, inv_sd](Node& self) {
            const Matrix& gv = self.parents[1]->value;
            const int rows = xhat->rows, cols = xhat->cols;
            if (wants_grad(self.parents[0])) {
                Matrix& gx = self.parents[0]->grad_ref();
                for (int i = 0; i < rows; ++i) {
                    double mean_gh = 0.0, mean_ghx = 0.0;
                    for (int j = 0; j < cols; ++j) {
                        const double gh = self.grad(i, j) * gv(0, j);
                        mean_gh += gh;
                        mean_ghx += gh * (*xhat)(i, j);
                    }
                    mean_gh /= cols;
                    mean_ghx /= cols;
                    const double inv = (*inv_sd)(i, 0);
                    for (int j = 0; j < cols; ++j) {
                        const double gh = self.grad(i, j) * gv(0, j);
                        gx(i, j) += inv * (gh - mean_gh - (*xhat)(i, j) * mean_ghx);
                    }
                }
            }
            if (wants_grad(self.parents[1])) {
                Matrix& gg = self.parents[1]->grad_ref();
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j)
                        gg(0, j) += self.grad(i, j) * (*xhat)(i, j);
            }
            if (wants_grad(self.parents[2])) {
                Matrix& gb = self.parents[2]->grad_ref();
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j)
                        gb(0, j) += self.grad(i, j);
            }
        };
    return n;
}

NodePtr energy(const NodePtr& z, double eps) {
    if (!(eps >= 0.0))
        throw ParamError("energy: eps must be nonnegative");
    const Matrix& zv = z->value;
    Matrix out(zv.rows, zv.cols);
    auto denom = std::make_shared<std::vector<double>>(zv.rows);
    for (int i = 0; i < zv.rows; ++i) {
        double s = 0.0;
        for (int j = 0; j < zv.cols; ++j)
            s += zv(i, j) * zv(i, j);
        const double d = s + eps;
        (*denom)[i] = d;
        for (int j = 0; j < zv.cols; ++j)
            out(i, j) = d > 0.0 ? zv(i, j) * zv(i, j) / d : 0.0;
    }
    auto n = make_node(std::move(out), {z});
    if (n->requires_grad)
        n->backprop = [denom](Node& self) {
            const Matrix& zv2 = self.parents[0]->value;
            const Matrix& e = self.value;
            Matrix& g = self.parents[0]->grad_ref();
            for (int i = 0; i < zv2.rows; ++i) {
                const double d = (*denom)[i];
                if (d <= 0.0)
                    continue;
                double dot = 0.0;
                for (int j = 0; j < zv2.cols; ++j)
                    dot += self.grad(i, j) * e(i, j);
                for (int j = 0; j < zv2.cols; ++j)
                    g(i, j) += 2.0 * zv2(i, j) / d * (self.grad(i, j) - dot);
            }
        };
    return n;
}

NodePtr gather_rows(const NodePtr& a, std::vector<int> indices) {
    const Matrix& av = a->value;
    Matrix out(static_cast<int>(indices.size()), av.cols);
    for (size_t i = 0; i < indices.size(); ++i) {
        const int r = indices[i];
        if (r < 0 || r >= av.rows)
            throw ContractError("gather_rows: index " + std::to_string(r) + " outside " + av.shape_str());
        for (int j = 0; j < av.cols; ++j)
            out(static_cast<int>(i), j) = av(r, j);
    }
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad)
        n->backprop = [idx = std::move(indices)](Node& self) {
            Matrix& g = self.parents[0]->grad_ref();
            for (size_t i = 0; i < idx.size(); ++i)
                for (int j = 0; j < g.cols; ++j)
                    g(idx[i], j) += self.grad(static_cast<int>(i), j);
        };
    return n;
}

NodePtr scatter_rows(const NodePtr& a, std::vector<int> indices, int total_rows) {
    const Matrix& av = a->value;
    if (static_cast<int>(indices.size()) != av.rows)
        throw ShapeError("scatter_rows: " + std::to_string(indices.size()) + " indices for " + av.shape_str());
    Matrix out(total_rows, av.cols);
    for (size_t i = 0; i < indices.size(); ++i) {
        const int r = indices[i];
        if (r < 0 || r >= total_rows)
            throw ContractError("scatter_rows: index " + std::to_string(r) + " outside " +
                                std::to_string(total_rows) + " rows");
        for (int j = 0; j < av.cols; ++j)
            out(r, j) = av(static_cast<int>(i), j);
    }
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad)
        n->backprop = [idx = std::move(indices)](Node& self) {
            Matrix& g = self.parents[0]->grad_ref();
            for (size_t i = 0; i < idx.size(); ++i)
                for (int j = 0; j < g.cols; ++j)
                    g(static_cast<int>(i), j) += self.grad(idx[i], j);
        };
    return n;
}

NodePtr slice_cols(const NodePtr& a, int first, int count) {
    const Matrix& av = a->value;
    if (first < 0 || count < 0 || first + count > av.cols)
        throw ShapeError("slice_cols: [" + std::to_string(first) + ", " + std::to_string(first + count) +
                         ") outside " + av.shape_str());
    Matrix out(av.rows, count);
    for (int i = 0; i < av.rows; ++i)
        for (int j = 0; j < count; ++j)
            out(i, j) = av(i, first + j);
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad)
        n->backprop = [first, count](Node& self) {
            Matrix& g = self.parents[0]->grad_ref();
            for (int i = 0; i < self.grad.rows; ++i)
                for (int j = 0; j < count; ++j)
                    g(i, first + j) += self.grad(i, j);
        };
    return n;
}

NodePtr concat_cols(const std::vector<NodePtr>& parts) {
    if (parts.empty())
        throw ContractError("concat_cols: no parts");
    const int rows = parts[0]->value.rows;
    int cols = 0;
    for (const auto& p : parts) {
        if (p->value.rows != rows)
            throw ShapeError("concat_cols: row mismatch " + p->value.shape_str());
        cols += p->value.cols;
    }
    Matrix out(rows, cols);
    int off = 0;
    for (const auto& p : parts) {
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < p->value.cols; ++j)
                out(i, off + j) = p->value(i, j);
        off += p->value.cols;
    }
    auto n = make_node(std::move(out), parts);
    if (n->requires_grad)
        n->backprop = [](Node& self) {
            int off2 = 0;
            for (auto& p : self.parents) {
                const int pc = p->value.cols;
                if (wants_grad(p)) {
                    Matrix& g = p->grad_ref();
                    for (int i = 0; i < g.rows; ++i)
                        for (int j = 0; j < pc; ++j)
                            g(i, j) += self.grad(i, off2 + j);
                }
                off2 += pc;
            }
        };
    return n;
}

NodePtr concat_rows(const std::vector<NodePtr>& parts) {
    if (parts.empty())
        throw ContractError("concat_rows: no parts");
    const int cols = parts[0]->value.cols;
    int rows = 0;
    for (const auto& p : parts) {
        if (p->value.cols != cols)
            throw ShapeError("concat_rows: column mismatch " + p->value.shape_str());
        rows += p->value.rows;
    }
    Matrix out(rows, cols);
    int off = 0;
    for (const auto& p : parts) {
        for (int i = 0; i < p->value.rows; ++i)
            for (int j = 0; j < cols; ++j)
                out(off + i, j) = p->value(i, j);
        off += p->value.rows;
    }
    auto n = make_node(std::move(out), parts);
    if (n->requires_grad)
        n->backprop = [](Node& self) {
            int off2 = 0;
            for (auto& p : self.parents) {
                const int pr = p->value.rows;
                if (wants_grad(p)) {
                    Matrix& g = p->grad_ref();
                    for (int i = 0; i < pr; ++i)
                        for (int j = 0; j < g.cols; ++j)
                            g(i, j) += self.grad(off2 + i, j);
                }
                off2 += pr;
            }
        };
    return n;
}

NodePtr pick_per_row(const NodePtr& a, std::vector<int> index) {
    const Matrix& av = a->value;
    if (static_cast<int>(index.size()) != av.rows)
        throw ShapeError("pick_per_row: " + std::to_string(index.size()) + " indices for " + av.shape_str());
    Matrix out(av.rows, 1);
    for (int i = 0; i < av.rows; ++i) {
        if (index[i] < 0 || index[i] >= av.cols)
            throw ContractError("pick_per_row: column index " + std::to_string(index[i]) + " outside " +
                                av.shape_str());
        out(i, 0) = av(i, index[i]);
    }
    auto n = make_node(std::move(out), {a});
    if (n->requires_grad)
        n->backprop = [idx = std::move(index)](Node& self) {
            Matrix& g = self.parents[0]->grad_ref();
            for (int i = 0; i < self.grad.rows; ++i)
                g(i, idx[i]) += self.grad(i, 0);
        };
    return n;
}

NodePtr softmax_cross_entropy_mean(const NodePtr& logits, const std::vector<int>& labels) {
    const Matrix& x = logits->value;
    if (static_cast<int>(labels.size()) != x.rows)
        throw ShapeError("softmax_cross_entropy_mean: " + std::to_string(labels.size()) + " labels for " +
                         x.shape_str());
    for (int y : labels)
        if (y < 0 || y >= x.cols)
            throw ContractError("softmax_cross_entropy_mean: label " + std::to_string(y) + " outside " +
                                std::to_string(x.cols) + " classes");
    auto probs = std::make_shared<Matrix>(emoe::softmax_rows(x, 1.0));
    double loss = 0.0;
    for (int i = 0; i < x.rows; ++i) {
        // log softmax via the max-subtracted logsumexp for stability
        double mx = x(i, 0);
        for (int j = 1; j < x.cols; ++j)
            mx = std::max(mx, x(i, j));
        double lse = 0.0;
        for (int j = 0; j < x.cols; ++j)
            lse += std::exp(x(i, j) - mx);
        loss -= x(i, labels[i]) - mx - std::log(lse);
    }
    loss /= x.rows;
    Matrix out(1, 1);
    out(0, 0) = loss;
    auto n = make_node(std::move(out), {logits});
    if (n->requires_grad)
        n->backprop = [probs, labels](Node& self) {
            Matrix& g = self.parents[0]->grad_ref();
            const double gv = self.grad(0, 0) / probs->rows;
            for (int i = 0; i < probs->rows; ++i)
                for (int j = 0; j < probs->cols; ++j)
                    g(i, j) += gv * ((*probs)(i, j) - (j == labels[i] ? 1.0 : 0.0));
        };
    return n;
}

namespace {

std::vector<Node*> reachable_desc(const NodePtr& root) {
    std::vector<Node*> nodes;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root.get()};
    seen.insert(root.get());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        nodes.push_back(n);
        for (const auto& p : n->parents)
            if (seen.insert(p.get()).second)
                stack.push_back(p.get());
    }
    std::sort(nodes.begin(), nodes.end(), [](Node* a, Node* b) { return a->id > b->id; });
    return nodes;
}

}  // namespace

GradMap backward(const NodePtr& loss) {
    if (loss->value.rows != 1 || loss->value.cols != 1)
        throw ContractError("backward: loss must be scalar (1x1), got " + loss->value.shape_str());
    if (loss->backward_done)
        throw ContractError("backward: already ran from this loss; call zero_gradients first");

    std::vector<Node*> nodes = reachable_desc(loss);
    // Interior gradients are per-traversal scratch; leaf gradients
    // accumulate across backward calls until explicitly cleared.
    for (Node* n : nodes)
        if (!n->is_leaf)
            n->grad = Matrix();
    loss->grad_ref()(0, 0) = 1.0;

    for (Node* n : nodes) {
        if (!n->requires_grad || !n->backprop)
            continue;
        if (n->grad.rows == 0)
            continue;  // no gradient flowed here
        n->backprop(*n);
    }
    loss->backward_done = true;

    GradMap map;
    for (Node* n : nodes)
        if (n->is_leaf && n->requires_grad) {
            if (n->grad.rows == 0)
                map[n->name] = Matrix::zeros(n->value.rows, n->value.cols);
            else
                map[n->name] = n->grad;
        }
    return map;
}

void zero_gradients(const NodePtr& root) {
    for (Node* n : reachable_desc(root)) {
        n->grad = Matrix();
        n->backward_done = false;
    }
}

std::vector<NodePtr> collect_leaves(const NodePtr& root) {
    std::vector<NodePtr> leaves;
    std::unordered_set<Node*> seen;
    std::vector<NodePtr> stack{root};
    seen.insert(root.get());
    while (!stack.empty()) {
        NodePtr n = stack.back();
        stack.pop_back();
        if (n->is_leaf && n->requires_grad)
            leaves.push_back(n);
        for (const auto& p : n->parents)
            if (seen.insert(p.get()).second)
                stack.push_back(p);
    }
    std::sort(leaves.begin(), leaves.end(), [](const NodePtr& a, const NodePtr& b) { return a->name < b->name; });
    return leaves;
}

}  // namespace emoe
