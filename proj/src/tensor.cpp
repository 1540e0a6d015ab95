#include "ttgan/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "ttgan/errors.hpp"

namespace ttgan {

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor must have at least one mode");
    for (auto d : shape) {
        if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_to_string(shape));
    }
}

}  // namespace

DenseTensor::DenseTensor() : shape_{1}, data_(1, 0.0) {}

DenseTensor::DenseTensor(Shape shape, double fill) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_size(shape_), fill);
}

DenseTensor::DenseTensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (data_.size() != shape_size(shape_)) {
        throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_to_string(shape_));
    }
}

std::size_t DenseTensor::flat_index(std::span<const std::size_t> index) const {
    if (index.size() != shape_.size()) throw ArgumentError("index arity does not match tensor rank");
    std::size_t flat = 0;
    for (std::size_t k = 0; k < index.size(); ++k) {
        if (index[k] >= shape_[k]) throw ArgumentError("index out of bounds");
        flat = flat * shape_[k] + index[k];
    }
    return flat;
}

double DenseTensor::at(std::span<const std::size_t> index) const { return data_[flat_index(index)]; }
double& DenseTensor::at(std::span<const std::size_t> index) { return data_[flat_index(index)]; }

bool DenseTensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (rows == 0 || cols == 0) throw ShapeError("matrix dimensions must be positive");
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows == 0 || cols == 0) throw ShapeError("matrix dimensions must be positive");
    if (data_.size() != rows * cols) throw ShapeError("matrix data length mismatch");
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

DenseTensor reshape(const DenseTensor& t, Shape new_shape) {
    if (shape_size(new_shape) != t.size()) {
        throw ShapeError("cannot reshape " + shape_to_string(t.shape()) + " to " +
                         shape_to_string(new_shape));
    }
    return DenseTensor(std::move(new_shape), t.values());
}

DenseTensor permute(const DenseTensor& t, std::span<const std::size_t> axes) {
    const std::size_t d = t.rank();
    if (axes.size() != d) throw ArgumentError("permutation arity does not match tensor rank");
    std::vector<bool> seen(d, false);
    for (auto a : axes) {
        if (a >= d || seen[a]) throw ArgumentError("invalid permutation");
        seen[a] = true;
    }
    const Shape& in_shape = t.shape();
    Shape out_shape(d);
    for (std::size_t i = 0; i < d; ++i) out_shape[i] = in_shape[axes[i]];

    std::vector<std::size_t> in_strides(d, 1);
    for (std::size_t k = d - 1; k > 0; --k) in_strides[k - 1] = in_strides[k] * in_shape[k];
    // Stride in the input for each output axis.
    std::vector<std::size_t> strides(d);
    for (std::size_t i = 0; i < d; ++i) strides[i] = in_strides[axes[i]];

    DenseTensor out(out_shape);
    auto src = t.data();
    auto dst = out.data();
    std::vector<std::size_t> idx(d, 0);
    std::size_t offset = 0;
    const std::size_t inner = out_shape[d - 1];
    const std::size_t inner_stride = strides[d - 1];
    for (std::size_t flat = 0; flat < dst.size(); flat += inner) {
        for (std::size_t j = 0; j < inner; ++j) dst[flat + j] = src[offset + j * inner_stride];
        // advance the multi-index over all but the last axis
        for (std::size_t k = d - 1; k-- > 0;) {
            ++idx[k];
            offset += strides[k];
            if (idx[k] < out_shape[k]) break;
            offset -= strides[k] * out_shape[k];
            idx[k] = 0;
        }
    }
    return out;
}

Matrix unfold(const DenseTensor& t, std::size_t split) {
    if (split < 1 || split >= t.rank()) {
        throw ArgumentError("unfold split " + std::to_string(split) + " out of range for rank " +
                            std::to_string(t.rank()));
    }
    std::size_t rows = 1;
    for (std::size_t k = 0; k < split; ++k) rows *= t.dim(k);
    return Matrix(rows, t.size() / rows, t.values());
}

DenseTensor fold(const Matrix& m, Shape shape) {
    if (shape_size(shape) != m.rows() * m.cols()) throw ShapeError("fold: element count mismatch");
    return DenseTensor(std::move(shape), std::vector<double>(m.data().begin(), m.data().end()));
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    }
    Matrix c(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* crow = &c(i, 0);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            const double* brow = &b.data()[k * n];
            for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

Matrix transpose(const Matrix& m) {
    Matrix t(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
    return t;
}

double frobenius_norm(std::span<const double> values) {
    double s = 0.0;
    for (double v : values) s += v * v;
    return std::sqrt(s);
}

namespace {

struct FullSvd {
    std::vector<std::vector<double>> u;  // columns, length rows
    std::vector<double> s;
    std::vector<std::vector<double>> v;  // columns, length cols
};

// One-sided Jacobi (Hestenes) on a tall matrix (rows >= cols).
FullSvd jacobi_svd_tall(const Matrix& a) {
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    std::vector<std::vector<double>> u(n, std::vector<double>(m));
    std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < m; ++i) u[j][i] = a(i, j);
        v[j][j] = 1.0;
    }
    constexpr double eps = std::numeric_limits<double>::epsilon();
    for (int sweep = 0; sweep < 80; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double alpha = 0, beta = 0, gamma = 0;
                for (std::size_t i = 0; i < m; ++i) {
                    alpha += u[p][i] * u[p][i];
                    beta += u[q][i] * u[q][i];
                    gamma += u[p][i] * u[q][i];
                }
                if (gamma == 0.0 || std::abs(gamma) <= eps * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double up = u[p][i], uq = u[q][i];
                    u[p][i] = c * up - s * uq;
                    u[q][i] = s * up + c * uq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vp = v[p][i], vq = v[q][i];
                    v[p][i] = c * vp - s * vq;
                    v[q][i] = s * vp + c * vq;
                }
            }
        }
        if (!rotated) break;
    }
    std::vector<double> s(n);
    for (std::size_t j = 0; j < n; ++j) s[j] = frobenius_norm(u[j]);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return s[x] > s[y]; });
    FullSvd out;
    for (auto j : order) {
        out.s.push_back(s[j]);
        out.u.push_back(u[j]);
        out.v.push_back(v[j]);
    }
    return out;
}

// Unit vector orthogonal to `basis` (which holds orthonormal vectors).
std::vector<double> complete_basis(const std::vector<std::vector<double>>& basis, std::size_t len) {
    for (std::size_t e = 0; e < len; ++e) {
        std::vector<double> w(len, 0.0);
        w[e] = 1.0;
        for (int pass = 0; pass < 2; ++pass) {
            for (const auto& b : basis) {
                double d = 0;
                for (std::size_t i = 0; i < len; ++i) d += b[i] * w[i];
                for (std::size_t i = 0; i < len; ++i) w[i] -= d * b[i];
            }
        }
        const double nrm = frobenius_norm(w);
        if (nrm > 1e-8) {
            for (auto& x : w) x /= nrm;
            return w;
        }
    }
    return std::vector<double>(len, 0.0);
}

}  // namespace

SvdResult svd_truncated(const Matrix& m, std::size_t max_rank, double tol) {
    if (max_rank < 1) throw ArgumentError("svd_truncated: max_rank must be >= 1");
    if (!(tol >= 0.0)) throw ArgumentError("svd_truncated: tol must be >= 0");
    for (double x : m.data()) {
        if (!std::isfinite(x)) throw NumericError("svd_truncated: non-finite input entry");
    }
    const bool wide = m.rows() < m.cols();
    FullSvd full = jacobi_svd_tall(wide ? transpose(m) : m);
    if (wide) std::swap(full.u, full.v);
    const std::size_t rows = m.rows();
    const std::size_t cols = m.cols();
    const std::size_t kmax = full.s.size();

    const double norm = frobenius_norm(m);
    const double s0 = full.s.empty() ? 0.0 : full.s[0];
    const double noise = s0 * static_cast<double>(std::max(rows, cols)) *
                         std::numeric_limits<double>::epsilon();
    std::size_t numeric_rank = 0;
    while (numeric_rank < kmax && full.s[numeric_rank] > noise) ++numeric_rank;
    if (tol > 0.0) {
        // smallest r with tail norm <= tol * ||m||
        double tail2 = 0.0;
        std::size_t r = numeric_rank;
        while (r > 0) {
            const double next = tail2 + full.s[r - 1] * full.s[r - 1];
            if (std::sqrt(next) > tol * norm) break;
            tail2 = next;
            --r;
        }
        numeric_rank = r;
    }
    const std::size_t rank = std::max<std::size_t>(1, std::min(max_rank, numeric_rank));

    SvdResult out{Matrix(rows, rank), {}, Matrix(cols, rank), rank};
    std::vector<std::vector<double>> ucols, vcols;
    for (std::size_t j = 0; j < rank; ++j) {
        const double sj = j < kmax ? full.s[j] : 0.0;
        std::vector<double> uj, vj;
        if (j < kmax && sj > noise && sj > 0.0) {
            uj = full.u[j];
            for (auto& x : uj) x /= sj;
            vj = full.v[j];
        } else {
            uj = complete_basis(ucols, rows);
            vj = j < kmax ? full.v[j] : complete_basis(vcols, cols);
        }
        out.s.push_back(j < numeric_rank ? sj : 0.0);
        ucols.push_back(uj);
        vcols.push_back(vj);
        for (std::size_t i = 0; i < rows; ++i) out.u(i, j) = uj[i];
        for (std::size_t i = 0; i < cols; ++i) out.v(i, j) = vj[i];
    }
    return out;
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t pad) {
    if (stride < 1) throw ArgumentError("stride must be >= 1");
    if (kernel > in + 2 * pad) throw ShapeError("kernel larger than padded input");
    return (in + 2 * pad - kernel) / stride + 1;
}

std::size_t transposed_conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                          std::size_t pad, std::size_t output_padding) {
    if (stride < 1) throw ArgumentError("stride must be >= 1");
    if (output_padding >= stride && output_padding > 0)
        throw ArgumentError("output_padding must be smaller than stride");
    const long long out = static_cast<long long>((in - 1) * stride + kernel + output_padding) -
                          2 * static_cast<long long>(pad);
    if (out < 1) throw ShapeError("transposed convolution output would be empty");
    return static_cast<std::size_t>(out);
}

namespace {

struct ConvGeometry {
    std::size_t batch, w, h, l, c;       // input
    std::size_t kw, kh, kl, s;           // kernel
    std::size_t ow, oh, ol;              // output
    std::size_t stride, pad;
    bool batched;
};

void read_input_shape(const Shape& x, ConvGeometry& g, const char* what) {
    if (x.size() == 4) {
        g.batched = false;
        g.batch = 1;
        g.w = x[0], g.h = x[1], g.l = x[2], g.c = x[3];
    } else if (x.size() == 5) {
        g.batched = true;
        g.batch = x[0];
        g.w = x[1], g.h = x[2], g.l = x[3], g.c = x[4];
    } else {
        throw ShapeError(std::string(what) + ": expected [W,H,L,C] or [N,W,H,L,C], got " +
                         shape_to_string(x));
    }
}

void read_kernel_shape(const Shape& k, ConvGeometry& g, const char* what) {
    if (k.size() != 5) throw ShapeError(std::string(what) + ": kernel must be [kw,kh,kl,C,S]");
    g.kw = k[0], g.kh = k[1], g.kl = k[2], g.s = k[4];
}

Shape make_shape(const ConvGeometry& g, std::size_t w, std::size_t h, std::size_t l, std::size_t c) {
    if (g.batched) return {g.batch, w, h, l, c};
    return {w, h, l, c};
}

// Input coordinate for output position o and kernel tap k, or -1 if in the padding.
inline long long tap(std::size_t o, std::size_t k, std::size_t stride, std::size_t pad, std::size_t extent) {
    const long long i = static_cast<long long>(o * stride + k) - static_cast<long long>(pad);
    return (i < 0 || i >= static_cast<long long>(extent)) ? -1 : i;
}

}  // namespace

DenseTensor conv3d_direct(const DenseTensor& x, const DenseTensor& kernel, std::size_t stride,
                          std::size_t pad) {
    ConvGeometry g{};
    read_input_shape(x.shape(), g, "conv3d");
    read_kernel_shape(kernel.shape(), g, "conv3d");
    if (kernel.dim(3) != g.c) {
        throw ShapeError("conv3d: kernel input channels " + std::to_string(kernel.dim(3)) +
                         " do not match input channels " + std::to_string(g.c));
    }
    g.ow = conv_output_extent(g.w, g.kw, stride, pad);
    g.oh = conv_output_extent(g.h, g.kh, stride, pad);
    g.ol = conv_output_extent(g.l, g.kl, stride, pad);

    DenseTensor y(make_shape(g, g.ow, g.oh, g.ol, g.s));
    const double* xp = x.data().data();
    const double* kp = kernel.data().data();
    double* yp = y.data().data();
    const std::size_t C = g.c, S = g.s;
    for (std::size_t n = 0; n < g.batch; ++n) {
        const double* xn = xp + n * g.w * g.h * g.l * C;
        for (std::size_t ox = 0; ox < g.ow; ++ox)
            for (std::size_t oy = 0; oy < g.oh; ++oy)
                for (std::size_t oz = 0; oz < g.ol; ++oz) {
                    double* out = yp + (((n * g.ow + ox) * g.oh + oy) * g.ol + oz) * S;
                    for (std::size_t i = 0; i < g.kw; ++i) {
                        const long long ix = tap(ox, i, stride, pad, g.w);
                        if (ix < 0) continue;
                        for (std::size_t j = 0; j < g.kh; ++j) {
                            const long long iy = tap(oy, j, stride, pad, g.h);
                            if (iy < 0) continue;
                            for (std::size_t k = 0; k < g.kl; ++k) {
                                const long long iz = tap(oz, k, stride, pad, g.l);
                                if (iz < 0) continue;
                                const double* xv = xn + ((ix * g.h + iy) * g.l + iz) * C;
                                const double* kv = kp + ((i * g.kh + j) * g.kl + k) * C * S;
                                for (std::size_t c = 0; c < C; ++c) {
                                    const double a = xv[c];
                                    const double* kc = kv + c * S;
                                    for (std::size_t s = 0; s < S; ++s) out[s] += a * kc[s];
                                }
                            }
                        }
                    }
                }
    }
    return y;
}

namespace {

// Scatter-add of y through the kernel taps into an input of the given spatial extents.
DenseTensor transposed_into(const DenseTensor& y, const DenseTensor& kernel, std::size_t stride,
                            std::size_t pad, std::size_t w, std::size_t h, std::size_t l,
                            const char* what) {
    ConvGeometry g{};
    read_input_shape(y.shape(), g, what);
    read_kernel_shape(kernel.shape(), g, what);
    const std::size_t S = g.c;  // channels of y
    if (kernel.dim(4) != S) {
        throw ShapeError(std::string(what) + ": kernel output channels " + std::to_string(kernel.dim(4)) +
                         " do not match input channels " + std::to_string(S));
    }
    const std::size_t C = kernel.dim(3);
    const std::size_t ow = g.w, oh = g.h, ol = g.l;
    if (conv_output_extent(w, g.kw, stride, pad) != ow || conv_output_extent(h, g.kh, stride, pad) != oh ||
        conv_output_extent(l, g.kl, stride, pad) != ol) {
        throw ShapeError(std::string(what) + ": spatial extents are inconsistent with the kernel geometry");
    }

    DenseTensor x(make_shape(g, w, h, l, C));
    const double* yp = y.data().data();
    const double* kp = kernel.data().data();
    double* xp = x.data().data();
    for (std::size_t n = 0; n < g.batch; ++n) {
        double* xn = xp + n * w * h * l * C;
        for (std::size_t ox = 0; ox < ow; ++ox)
            for (std::size_t oy = 0; oy < oh; ++oy)
                for (std::size_t oz = 0; oz < ol; ++oz) {
                    const double* gy = yp + (((n * ow + ox) * oh + oy) * ol + oz) * S;
                    for (std::size_t i = 0; i < g.kw; ++i) {
                        const long long ix = tap(ox, i, stride, pad, w);
                        if (ix < 0) continue;
                        for (std::size_t j = 0; j < g.kh; ++j) {
                            const long long iy = tap(oy, j, stride, pad, h);
                            if (iy < 0) continue;
                            for (std::size_t k = 0; k < g.kl; ++k) {
                                const long long iz = tap(oz, k, stride, pad, l);
                                if (iz < 0) continue;
                                double* xv = xn + ((ix * h + iy) * l + iz) * C;
                                const double* kv = kp + ((i * g.kh + j) * g.kl + k) * C * S;
                                for (std::size_t c = 0; c < C; ++c) {
                                    const double* kc = kv + c * S;
                                    double acc = 0.0;
                                    for (std::size_t s = 0; s < S; ++s) acc += gy[s] * kc[s];
                                    xv[c] += acc;
                                }
                            }
                        }
                    }
                }
    }
    return x;
}

}  // namespace

DenseTensor conv3d_transposed(const DenseTensor& y, const DenseTensor& kernel, std::size_t stride,
                              std::size_t pad, std::size_t output_padding) {
    if (y.rank() != 4 && y.rank() != 5) {
        throw ShapeError("conv3d_transposed: expected [W,H,L,C] or [N,W,H,L,C], got " +
                         shape_to_string(y.shape()));
    }
    if (kernel.rank() != 5) throw ShapeError("conv3d_transposed: kernel must be [kw,kh,kl,C,S]");
    const std::size_t off = y.rank() - 4;
    const std::size_t w = transposed_conv_output_extent(y.dim(off), kernel.dim(0), stride, pad, output_padding);
    const std::size_t h = transposed_conv_output_extent(y.dim(off + 1), kernel.dim(1), stride, pad, output_padding);
    const std::size_t l = transposed_conv_output_extent(y.dim(off + 2), kernel.dim(2), stride, pad, output_padding);
    return transposed_into(y, kernel, stride, pad, w, h, l, "conv3d_transposed");
}

DenseTensor conv3d_input_grad(const DenseTensor& gy, const DenseTensor& kernel, std::size_t stride,
                              std::size_t pad, const Shape& input_shape) {
    if (input_shape.size() != gy.rank() || (input_shape.size() != 4 && input_shape.size() != 5))
        throw ShapeError("conv3d_input_grad: input shape rank mismatch");
    const std::size_t off = input_shape.size() - 4;
    return transposed_into(gy, kernel, stride, pad, input_shape[off], input_shape[off + 1],
                           input_shape[off + 2], "conv3d_input_grad");
}

DenseTensor conv3d_kernel_grad(const DenseTensor& x, const DenseTensor& gy, const Shape& kernel_shape,
                               std::size_t stride, std::size_t pad) {
    ConvGeometry g{};
    read_input_shape(x.shape(), g, "conv3d_kernel_grad");
    if (kernel_shape.size() != 5 || kernel_shape[3] != g.c)
        throw ShapeError("conv3d_kernel_grad: kernel shape mismatch");
    g.kw = kernel_shape[0], g.kh = kernel_shape[1], g.kl = kernel_shape[2], g.s = kernel_shape[4];
    g.ow = conv_output_extent(g.w, g.kw, stride, pad);
    g.oh = conv_output_extent(g.h, g.kh, stride, pad);
    g.ol = conv_output_extent(g.l, g.kl, stride, pad);
    if (gy.shape() != make_shape(g, g.ow, g.oh, g.ol, g.s))
        throw ShapeError("conv3d_kernel_grad: output gradient shape mismatch");

    DenseTensor gk(kernel_shape);
    const double* xp = x.data().data();
    const double* gp = gy.data().data();
    double* kp = gk.data().data();
    const std::size_t C = g.c, S = g.s;
    for (std::size_t n = 0; n < g.batch; ++n) {
        const double* xn = xp + n * g.w * g.h * g.l * C;
        for (std::size_t ox = 0; ox < g.ow; ++ox)
            for (std::size_t oy = 0; oy < g.oh; ++oy)
                for (std::size_t oz = 0; oz < g.ol; ++oz) {
                    const double* go = gp + (((n * g.ow + ox) * g.oh + oy) * g.ol + oz) * S;
                    for (std::size_t i = 0; i < g.kw; ++i) {
                        const long long ix = tap(ox, i, stride, pad, g.w);
                        if (ix < 0) continue;
                        for (std::size_t j = 0; j < g.kh; ++j) {
                            const long long iy = tap(oy, j, stride, pad, g.h);
                            if (iy < 0) continue;
                            for (std::size_t k = 0; k < g.kl; ++k) {
                                const long long iz = tap(oz, k, stride, pad, g.l);
                                if (iz < 0) continue;
                                const double* xv = xn + ((ix * g.h + iy) * g.l + iz) * C;
                                double* kv = kp + ((i * g.kh + j) * g.kl + k) * C * S;
                                for (std::size_t c = 0; c < C; ++c) {
                                    const double a = xv[c];
                                    double* kc = kv + c * S;
                                    for (std::size_t s = 0; s < S; ++s) kc[s] += a * go[s];
                                }
                            }
                        }
                    }
                }
    }
    return gk;
}

}  // namespace ttgan
