#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace ttgan {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Row-major (last index fastest) real tensor with at least one mode.
class DenseTensor {
public:
    /// A single zero scalar of shape [1].
    DenseTensor();
    explicit DenseTensor(Shape shape, double fill = 0.0);
    DenseTensor(Shape shape, std::vector<double> data);

    static DenseTensor scalar(double value) { return DenseTensor({1}, {value}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double operator[](std::size_t flat) const { return data_[flat]; }
    double& operator[](std::size_t flat) { return data_[flat]; }

    double at(std::span<const std::size_t> index) const;
    double& at(std::span<const std::size_t> index);
    double at(std::initializer_list<std::size_t> index) const {
        return at(std::span<const std::size_t>(index.begin(), index.size()));
    }
    double& at(std::initializer_list<std::size_t> index) {
        return at(std::span<const std::size_t>(index.begin(), index.size()));
    }

    std::size_t flat_index(std::span<const std::size_t> index) const;

    bool all_finite() const noexcept;

    friend bool operator==(const DenseTensor& a, const DenseTensor& b) = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

/// Row-major real matrix.
class Matrix {
public:
    Matrix() : Matrix(1, 1) {}
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }

    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }

    friend bool operator==(const Matrix& a, const Matrix& b) = default;

private:
    std::size_t rows_;
    std::size_t cols_;
    std::vector<double> data_;
};

DenseTensor reshape(const DenseTensor& t, Shape new_shape);

/// Output axis i takes input axis axes[i].
DenseTensor permute(const DenseTensor& t, std::span<const std::size_t> axes);

/// Rows index modes [0, split), columns index modes [split, d).
Matrix unfold(const DenseTensor& t, std::size_t split);
DenseTensor fold(const Matrix& m, Shape shape);

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
double frobenius_norm(std::span<const double> values);
inline double frobenius_norm(const Matrix& m) { return frobenius_norm(m.data()); }
inline double frobenius_norm(const DenseTensor& t) { return frobenius_norm(t.data()); }

struct SvdResult {
    Matrix u;               // rows x rank, orthonormal columns
    std::vector<double> s;  // non-increasing, length rank
    Matrix v;               // cols x rank, orthonormal columns
    std::size_t rank = 0;
};

/// Thin SVD by one-sided Jacobi, truncated to min(max_rank, numerical rank).
/// The numerical rank at `tol` is the smallest r whose discarded tail has
/// Frobenius norm <= tol * ||m||_F; values at round-off level are always
/// discarded. At least one triplet is always returned.
SvdResult svd_truncated(const Matrix& m, std::size_t max_rank, double tol);

// ---------------------------------------------------------------------------
// 3-D convolution, channels-last.
//
// Inputs are [W,H,L,C] or batched [N,W,H,L,C]; kernels are [kw,kh,kl,C,S].
// Outputs keep the batch convention of the input.
// ---------------------------------------------------------------------------

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t pad);
std::size_t transposed_conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                          std::size_t pad, std::size_t output_padding);

/// Literal five-fold sum: Y(x,y,z,s) = sum_{i,j,k,c} K(i,j,k,c,s) X(x*st+i-p, ..., c).
DenseTensor conv3d_direct(const DenseTensor& x, const DenseTensor& kernel, std::size_t stride = 1,
                          std::size_t pad = 0);

/// Adjoint of conv3d_direct with respect to its input.
DenseTensor conv3d_transposed(const DenseTensor& y, const DenseTensor& kernel,
                              std::size_t stride = 1, std::size_t pad = 0,
                              std::size_t output_padding = 0);

/// Gradient of <conv3d_direct(x, k), gy> with respect to x, for an input of `input_shape`.
DenseTensor conv3d_input_grad(const DenseTensor& gy, const DenseTensor& kernel, std::size_t stride,
                              std::size_t pad, const Shape& input_shape);

/// Gradient of <conv3d_direct(x, k), gy> with respect to k.
DenseTensor conv3d_kernel_grad(const DenseTensor& x, const DenseTensor& gy,
                               const Shape& kernel_shape, std::size_t stride, std::size_t pad);

}  // namespace ttgan
