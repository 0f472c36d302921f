#include "emoe/matrix.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>

namespace emoe {

namespace {
std::atomic<bool> g_checked{true};

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}
}  // namespace

Matrix::Matrix(int r, int c, double fill) : rows(r), cols(c) {
    if (r < 0 || c < 0)
        throw ShapeError("Matrix: negative dimensions " + std::to_string(r) + "x" + std::to_string(c));
    data.assign(static_cast<size_t>(r) * static_cast<size_t>(c), fill);
}

std::string Matrix::shape_str() const {
    return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")";
}

Matrix Matrix::identity(int n) {
    Matrix m(n, n, 0.0);
    for (int i = 0; i < n; ++i)
        m(i, i) = 1.0;
    return m;
}

Matrix Matrix::from_vector(int r, int c, std::vector<double> values) {
    if (static_cast<size_t>(r) * static_cast<size_t>(c) != values.size())
        throw ShapeError("Matrix::from_vector: " + std::to_string(values.size()) + " values for shape (" +
                         std::to_string(r) + "x" + std::to_string(c) + ")");
    Matrix m;
    m.rows = r;
    m.cols = c;
    m.data = std::move(values);
    if (checked_mode())
        require_finite(m, "Matrix::from_vector");
    return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows_in) {
    const int r = static_cast<int>(rows_in.size());
    const int c = r > 0 ? static_cast<int>(rows_in.begin()->size()) : 0;
    std::vector<double> values;
    values.reserve(static_cast<size_t>(r) * c);
    for (const auto& row : rows_in) {
        if (static_cast<int>(row.size()) != c)
            throw ShapeError("Matrix::from_rows: ragged rows");
        values.insert(values.end(), row.begin(), row.end());
    }
    return from_vector(r, c, std::move(values));
}

void set_checked_mode(bool on) { g_checked.store(on); }
bool checked_mode() { return g_checked.load(); }

bool all_finite(const Matrix& m) {
    for (double v : m.data)
        if (!std::isfinite(v))
            return false;
    return true;
}

void require_finite(const Matrix& m, const std::string& what) {
    if (!all_finite(m))
        throw NumericError(what + ": non-finite entry in " + m.shape_str() + " matrix");
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows)
        throw ShapeError("matmul: inner dimensions disagree, " + a.shape_str() + " * " + b.shape_str());
    Matrix out(a.rows, b.cols, 0.0);
    matmul_acc(out, a, b);
    return out;
}

void matmul_acc(Matrix& dst, const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows || dst.rows != a.rows || dst.cols != b.cols)
        throw ShapeError("matmul_acc: " + dst.shape_str() + " += " + a.shape_str() + " * " + b.shape_str());
    const int m = a.rows, kk = a.cols, n = b.cols;
    for (int i = 0; i < m; ++i) {
        const double* arow = a.row_ptr(i);
        double* drow = dst.row_ptr(i);
        for (int k = 0; k < kk; ++k) {
            const double aik = arow[k];
            if (aik == 0.0)
                continue;
            const double* brow = b.row_ptr(k);
            for (int j = 0; j < n; ++j)
                drow[j] += aik * brow[j];
        }
    }
}

void matmul_nt_acc(Matrix& dst, const Matrix& a, const Matrix& b) {
    // dst(m x n) += a(m x k) * b(n x k)^T
    if (a.cols != b.cols || dst.rows != a.rows || dst.cols != b.rows)
        throw ShapeError("matmul_nt_acc: " + dst.shape_str() + " += " + a.shape_str() + " * " +
                         b.shape_str() + "^T");
    const int m = a.rows, kk = a.cols, n = b.rows;
    for (int i = 0; i < m; ++i) {
        const double* arow = a.row_ptr(i);
        double* drow = dst.row_ptr(i);
        for (int j = 0; j < n; ++j) {
            const double* brow = b.row_ptr(j);
            double acc = 0.0;
            for (int k = 0; k < kk; ++k)
                acc += arow[k] * brow[k];
            drow[j] += acc;
        }
    }
}

void matmul_tn_acc(Matrix& dst, const Matrix& a, const Matrix& b) {
    // dst(k x n) += a(m x k)^T * b(m x n)
    if (a.rows != b.rows || dst.rows != a.cols || dst.cols != b.cols)
        throw ShapeError("matmul_tn_acc: " + dst.shape_str() + " += " + a.shape_str() + "^T * " +
                         b.shape_str());
    const int m = a.rows, kk = a.cols, n = b.cols;
    for (int i = 0; i < m; ++i) {
        const double* arow = a.row_ptr(i);
        const double* brow = b.row_ptr(i);
        for (int k = 0; k < kk; ++k) {
            const double aik = arow[k];
            if (aik == 0.0)
                continue;
            double* drow = dst.row_ptr(k);
            for (int j = 0; j < n; ++j)
                drow[j] += aik * brow[j];
        }
    }
}

Matrix transpose(const Matrix& a) {
    Matrix out(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j)
            out(j, i) = a(i, j);
    return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "add");
    Matrix out = a;
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] += b.data[i];
    return out;
}

Matrix sub(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "sub");
    Matrix out = a;
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] -= b.data[i];
    return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "hadamard");
    Matrix out = a;
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] *= b.data[i];
    return out;
}

Matrix scale(const Matrix& a, double c) {
    Matrix out = a;
    for (double& v : out.data)
        v *= c;
    return out;
}

double sum_all(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data)
        s += v;
    return s;
}

double frobenius_norm(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data)
        s += v * v;
    return std::sqrt(s);
}

double max_abs(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data)
        s = std::max(s, std::abs(v));
    return s;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b))
        throw ShapeError("max_abs_diff: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    double s = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i)
        s = std::max(s, std::abs(a.data[i] - b.data[i]));
    return s;
}

Matrix softmax_rows(const Matrix& m, double tau) {
    if (!(tau > 0.0))
        throw ParamError("softmax_rows: tau must be positive, got " + std::to_string(tau));
    Matrix out(m.rows, m.cols);
    for (int i = 0; i < m.rows; ++i) {
        const double* x = m.row_ptr(i);
        double* y = out.row_ptr(i);
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < m.cols; ++j)
            mx = std::max(mx, x[j] / tau);
        double sum = 0.0;
        for (int j = 0; j < m.cols; ++j) {
            y[j] = std::exp(x[j] / tau - mx);
            sum += y[j];
        }
        for (int j = 0; j < m.cols; ++j)
            y[j] /= sum;
    }
    return out;
}

namespace {
constexpr double kGeluC = 0.7978845608028653558798921198687637369;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu_scalar(double x) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_derivative(double x) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    const double t = std::tanh(u);
    const double sech2 = 1.0 - t * t;
    return 0.5 * (1.0 + t) + 0.5 * x * sech2 * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

Matrix gelu(const Matrix& m) {
    Matrix out = m;
    for (double& v : out.data)
        v = gelu_scalar(v);
    return out;
}

Matrix layernorm(const Matrix& m, const Matrix& gain, const Matrix& bias, double eps) {
    if (gain.rows != 1 || gain.cols != m.cols || bias.rows != 1 || bias.cols != m.cols)
        throw ShapeError("layernorm: gain/bias must be 1x" + std::to_string(m.cols) + ", got gain " +
                         gain.shape_str() + " bias " + bias.shape_str());
    if (!(eps > 0.0))
        throw ParamError("layernorm: eps must be positive");
    Matrix out(m.rows, m.cols);
    for (int i = 0; i < m.rows; ++i) {
        const double* x = m.row_ptr(i);
        double* y = out.row_ptr(i);
        double mean = 0.0;
        for (int j = 0; j < m.cols; ++j)
            mean += x[j];
        mean /= m.cols;
        double var = 0.0;
        for (int j = 0; j < m.cols; ++j)
            var += (x[j] - mean) * (x[j] - mean);
        var /= m.cols;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < m.cols; ++j)
            y[j] = gain(0, j) * (x[j] - mean) * inv + bias(0, j);
    }
    return out;
}

}  // namespace emoe
