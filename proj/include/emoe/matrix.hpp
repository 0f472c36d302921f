#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "emoe/errors.hpp"

namespace emoe {

// Row-major dense matrix of 64-bit floats. Values are immutable by
// convention once handed to the graph; the struct itself is a plain
// value type.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c, double fill = 0.0);

    double& operator()(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    double* row_ptr(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const double* row_ptr(int r) const { return data.data() + static_cast<size_t>(r) * cols; }

    size_t size() const { return data.size(); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
    std::string shape_str() const;

    static Matrix zeros(int r, int c) { return Matrix(r, c, 0.0); }
    static Matrix filled(int r, int c, double v) { return Matrix(r, c, v); }
    static Matrix identity(int n);
    // Construct from explicit data; rejects NaN/Inf entries when checked
    // mode is on and errors if the element count does not match.
    static Matrix from_vector(int r, int c, std::vector<double> values);
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
};

// Checked mode gates the finite-entry validation on explicit-data
// construction. On by default; hot paths that build values elementwise
// are unaffected either way.
void set_checked_mode(bool on);
bool checked_mode();

// Throws NumericError naming `what` if any entry is NaN/Inf.
void require_finite(const Matrix& m, const std::string& what);
bool all_finite(const Matrix& m);

// ---- plain (non-differentiating) kernels -------------------------------

// out = a * b. Throws ShapeError quoting both shapes on mismatch.
Matrix matmul(const Matrix& a, const Matrix& b);
// dst += a * b  (dst must be pre-shaped)
void matmul_acc(Matrix& dst, const Matrix& a, const Matrix& b);
// dst += a * b^T
void matmul_nt_acc(Matrix& dst, const Matrix& a, const Matrix& b);
// dst += a^T * b
void matmul_tn_acc(Matrix& dst, const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double c);

double sum_all(const Matrix& a);
double frobenius_norm(const Matrix& a);
double max_abs(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);

// Row softmax with temperature and max-subtraction. tau > 0 or ParamError.
Matrix softmax_rows(const Matrix& m, double tau);
// Elementwise tanh-approximation GELU.
Matrix gelu(const Matrix& m);
double gelu_scalar(double x);
double gelu_derivative(double x);
// Per-row standardization followed by gain/bias affine. gain, bias: 1 x cols.
Matrix layernorm(const Matrix& m, const Matrix& gain, const Matrix& bias, double eps);

}  // namespace emoe
