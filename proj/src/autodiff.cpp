#include "ttgan/autodiff.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <random>

#include "ttgan/errors.hpp"

namespace ttgan::ad {

namespace {

using Inputs = std::vector<const DenseTensor*>;
using Saved = std::vector<DenseTensor>;
using ForwardFn = DenseTensor (*)(const Inputs&, const Attrs&, Saved&);
using BackwardFn = std::vector<DenseTensor> (*)(const Inputs&, const DenseTensor& out, const Saved&,
                                                const Attrs&, const DenseTensor& g);

struct PrimitiveInfo {
    std::string_view name;
    int arity;  // -1: one or more
    ForwardFn forward;
    BackwardFn backward;
};

// ---- broadcasting --------------------------------------------------------
// The second operand of add/mul may equal the first's shape, be a trailing
// suffix of it, or hold a single element. Element i of `a` pairs with
// element i % size(b) of `b`.

void check_broadcast(const DenseTensor& a, const DenseTensor& b, const char* what) {
    if (a.shape() == b.shape() || b.size() == 1) return;
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (bs.size() <= as.size() && std::equal(bs.rbegin(), bs.rend(), as.rbegin())) return;
    throw ShapeError(std::string(what) + ": cannot broadcast " + shape_to_string(bs) + " onto " +
                     shape_to_string(as));
}

DenseTensor reduce_to(const DenseTensor& g, const Shape& target) {
    if (g.shape() == target) return g;
    DenseTensor out(target);
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < g.size(); ++i) out[i % n] += g[i];
    return out;
}

// ---- elementwise ---------------------------------------------------------

DenseTensor add_fwd(const Inputs& in, const Attrs&, Saved&) {
    const auto& a = *in[0];
    const auto& b = *in[1];
    check_broadcast(a, b, "add");
    DenseTensor y = a;
    const std::size_t n = b.size();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i % n];
    return y;
}

std::vector<DenseTensor> add_bwd(const Inputs& in, const DenseTensor&, const Saved&, const Attrs&,
                                 const DenseTensor& g) {
    return {g, reduce_to(g, in[1]->shape())};
}

DenseTensor mul_fwd(const Inputs& in, const Attrs&, Saved&) {
    const auto& a = *in[0];
    const auto& b = *in[1];
    check_broadcast(a, b, "mul");
    DenseTensor y = a;
    const std::size_t n = b.size();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b[i % n];
    return y;
}

std::vector<DenseTensor> mul_bwd(const Inputs& in, const DenseTensor&, const Saved&, const Attrs&,
                                 const DenseTensor& g) {
    const auto& a = *in[0];
    const auto& b = *in[1];
    const std::size_t n = b.size();
    DenseTensor ga(a.shape());
    DenseTensor gb(b.shape());
    for (std::size_t i = 0; i < a.size(); ++i) {
        ga[i] = g[i] * b[i % n];
        gb[i % n] += g[i] * a[i];
    }
    return {ga, gb};
}

DenseTensor lrelu_fwd(const Inputs& in, const Attrs& at, Saved&) {
    DenseTensor y = *in[0];
    for (auto& v : y.data()) v = v > 0.0 ? v : at.slope * v;
    return y;
}

std::vector<DenseTensor> lrelu_bwd(const Inputs& in, const DenseTensor&, const Saved&, const Attrs& at,
                                   const DenseTensor& g) {
    DenseTensor gx = g;
    const auto& x = *in[0];
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] *= x[i] > 0.0 ? 1.0 : at.slope;
    return {gx};
}

DenseTensor tanh_fwd(const Inputs& in, const Attrs&, Saved&) {
    DenseTensor y = *in[0];
    for (auto& v : y.data()) v = std::tanh(v);
    return y;
}

std::vector<DenseTensor> tanh_bwd(const Inputs&, const DenseTensor& out, const Saved&, const Attrs&,
                                  const DenseTensor& g) {
    DenseTensor gx = g;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= 1.0 - out[i] * out[i];
    return {gx};
}

double stable_sigmoid(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

DenseTensor sigmoid_fwd(const Inputs& in, const Attrs&, Saved&) {
    DenseTensor y = *in[0];
    for (auto& v : y.data()) v = stable_sigmoid(v);
    return y;
}

std::vector<DenseTensor> sigmoid_bwd(const Inputs&, const DenseTensor& out, const Saved&, const Attrs&,
                                     const DenseTensor& g) {
    DenseTensor gx = g;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= out[i] * (1.0 - out[i]);
    return {gx};
}

DenseTensor scale_fwd(const Inputs& in, const Attrs& at, Saved&) {
    DenseTensor y = *in[0];
    for (auto& v : y.data()) v = at.a * v + at.b;
    return y;
}

std::vector<DenseTensor> scale_bwd(const Inputs&, const DenseTensor&, const Saved&, const Attrs& at,
                                   const DenseTensor& g) {
    DenseTensor gx = g;
    for (auto& v : gx.data()) v *= at.a;
    return {gx};
}

DenseTensor clamped_log_fwd(const Inputs& in, const Attrs& at, Saved&) {
    if (!(at.lo >= 0.0) || !(at.hi > at.lo)) throw ArgumentError("clamped_log: need 0 <= lo < hi");
    DenseTensor y = *in[0];
    for (auto& v : y.data()) v = std::log(std::clamp(v, at.lo, at.hi));
    return y;
}

std::vector<DenseTensor> clamped_log_bwd(const Inputs& in, const DenseTensor&, const Saved&,
                                         const Attrs& at, const DenseTensor& g) {
    const auto& x = *in[0];
    DenseTensor gx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] >= at.lo && x[i] <= at.hi && x[i] > 0.0) gx[i] = g[i] / x[i];
    }
    return {gx};
}

// ---- reductions ----------------------------------------------------------

DenseTensor sum_fwd(const Inputs& in, const Attrs&, Saved&) {
    double s = 0.0;
    for (double v : in[0]->data()) s += v;
    return DenseTensor::scalar(s);
}

std::vector<DenseTensor> sum_bwd(const Inputs& in, const DenseTensor&, const Saved&, const Attrs&,
                                 const DenseTensor& g) {
    return {DenseTensor(in[0]->shape(), g[0])};
}

DenseTensor mean_fwd(const Inputs& in, const Attrs&, Saved&) {
    double s = 0.0;
    for (double v : in[0]->data()) s += v;
    return DenseTensor::scalar(s / static_cast<double>(in[0]->size()));
}

std::vector<DenseTensor> mean_bwd(const Inputs& in, const DenseTensor&, const Saved&, const Attrs&,
                                  const DenseTensor& g) {
    return {DenseTensor(in[0]->shape(), g[0] / static_cast<double>(in[0]->size()))};
}

DenseTensor l1_fwd(const Inputs& in, const Attrs&, Saved&) {
    const auto& a = *in[0];
    const auto& b = *in[1];
    if (a.shape() != b.shape()) {
        throw ShapeError("l1_distance: " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return DenseTensor::scalar(s / static_cast<double>(a.size()));
}

std::vector<DenseTensor> l1_bwd(const Inputs& in, const DenseTensor&, const Saved&, const Attrs&,
                                const DenseTensor& g) {
    const auto& a = *in[0];
    const auto& b = *in[1];
    const double scale = g[0] / static_cast<double>(a.size());
    DenseTensor ga(a.shape()), gb(b.shape());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
        ga[i] = s * scale;
        gb[i] = -s * scale;
    }
    return {ga, gb};
}

// ---- structural ----------------------------------------------------------

DenseTensor reshape_fwd(const Inputs& in, const Attrs& at, Saved&) { return ttgan::reshape(*in[0], at.shape); }

std::vector<DenseTensor> reshape_bwd(const Inputs& in, const DenseTensor&, const Saved&, const Attrs&,
                                     const DenseTensor& g) {
    return {ttgan::reshape(g, in[0]->shape())};
}

DenseTensor permute_fwd(const Inputs& in, const Attrs& at, Saved&) { return ttgan::permute(*in[0], at.axes); }

std::vector<DenseTensor> permute_bwd(const Inputs&, const DenseTensor&, const Saved&, const Attrs& at,
                                     const DenseTensor& g) {
    std::vector<std::size_t> inverse(at.axes.size());
    for (std::size_t i = 0; i < at.axes.size(); ++i) inverse[at.axes[i]] = i;
    return {ttgan::permute(g, inverse)};
}

DenseTensor concat_fwd(const Inputs& in, const Attrs&, Saved&) {
    const Shape& first = in[0]->shape();
    Shape lead(first.begin(), first.end() - 1);
    std::size_t total = 0;
    for (const auto* t : in) {
        if (t->rank() != first.size() || !std::equal(lead.begin(), lead.end(), t->shape().begin())) {
            throw ShapeError("concat_channels: leading dimensions differ: " + shape_to_string(first) + " vs " +
                             shape_to_string(t->shape()));
        }
        total += t->shape().back();
    }
    Shape out_shape = lead;
    out_shape.push_back(total);
    DenseTensor y(out_shape);
    const std::size_t rows = shape_size(lead);
    std::size_t offset = 0;
    for (const auto* t : in) {
        const std::size_t c = t->shape().back();
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(t->data().data() + r * c, c, y.data().data() + r * total + offset);
        offset += c;
    }
    return y;
}

std::vector<DenseTensor> concat_bwd(const Inputs& in, const DenseTensor& out, const Saved&, const Attrs&,
                                    const DenseTensor& g) {
    const std::size_t total = out.shape().back();
    const std::size_t rows = out.size() / total;
    std::vector<DenseTensor> grads;
    std::size_t offset = 0;
    for (const auto* t : in) {
        const std::size_t c = t->shape().back();
        DenseTensor gt(t->shape());
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(g.data().data() + r * total + offset, c, gt.data().data() + r * c);
        grads.push_back(std::move(gt));
        offset += c;
    }
    return grads;
}

// ---- linear algebra ------------------------------------------------------

Matrix as_matrix(const DenseTensor& t, std::size_t rows, std::size_t cols) { return Matrix(rows, cols, t.values()); }

DenseTensor matmul_fwd(const Inputs& in, const Attrs&, Saved&) {
    const auto& a = *in[0];
    const auto& b = *in[1];
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul: operands must be matrices");
    Matrix c = ttgan::matmul(as_matrix(a, a.dim(0), a.dim(1)), as_matrix(b, b.dim(0), b.dim(1)));
    return DenseTensor({c.rows(), c.cols()}, std::vector<double>(c.data().begin(), c.data().end()));
}

std::vector<DenseTensor> matmul_bwd(const Inputs& in, const DenseTensor&, const Saved&, const Attrs&,
                                    const DenseTensor& g) {
    const auto& a = *in[0];
    const auto& b = *in[1];
    Matrix gm = as_matrix(g, g.dim(0), g.dim(1));
    Matrix ga = ttgan::matmul(gm, transpose(as_matrix(b, b.dim(0), b.dim(1))));
    Matrix gb = ttgan::matmul(transpose(as_matrix(a, a.dim(0), a.dim(1))), gm);
    return {DenseTensor(a.shape(), std::vector<double>(ga.data().begin(), ga.data().end())),
            DenseTensor(b.shape(), std::vector<double>(gb.data().begin(), gb.data().end()))};
}

// affine(x[..., K], W[K, M], b[M]) -> [..., M]
DenseTensor affine_fwd(const Inputs& in, const Attrs&, Saved&) {
    const auto& x = *in[0];
    const auto& w = *in[1];
    const auto& b = *in[2];
    if (w.rank() != 2 || x.shape().back() != w.dim(0) || b.size() != w.dim(1)) {
        throw ShapeError("affine: x " + shape_to_string(x.shape()) + ", W " + shape_to_string(w.shape()) +
                         ", b " + shape_to_string(b.shape()));
    }
    const std::size_t k = w.dim(0), m = w.dim(1), rows = x.size() / k;
    Matrix y = ttgan::matmul(as_matrix(x, rows, k), as_matrix(w, k, m));
    Shape out_shape = x.shape();
    out_shape.back() = m;
    DenseTensor out(out_shape, std::vector<double>(y.data().begin(), y.data().end()));
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < m; ++j) out[r * m + j] += b[j];
    return out;
}

std::vector<DenseTensor> affine_bwd(const Inputs& in, const DenseTensor&, const Saved&, const Attrs&,
                                    const DenseTensor& g) {
    const auto& x = *in[0];
    const auto& w = *in[1];
    const auto& b = *in[2];
    const std::size_t k = w.dim(0), m = w.dim(1), rows = x.size() / k;
    Matrix gm = as_matrix(g, rows, m);
    Matrix gx = ttgan::matmul(gm, transpose(as_matrix(w, k, m)));
    Matrix gw = ttgan::matmul(transpose(as_matrix(x, rows, k)), gm);
    DenseTensor gb(b.shape());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < m; ++j) gb[j] += g[r * m + j];
    return {DenseTensor(x.shape(), std::vector<double>(gx.data().begin(), gx.data().end())),
            DenseTensor(w.shape(), std::vector<double>(gw.data().begin(), gw.data().end())), gb};
}

// ---- convolution ---------------------------------------------------------

DenseTensor conv_fwd(const Inputs& in, const Attrs& at, Saved&) {
    return conv3d_direct(*in[0], *in[1], at.stride, at.pad);
}

std::vector<DenseTensor> conv_bwd(const Inputs& in, const DenseTensor&, const Saved&, const Attrs& at,
                                  const DenseTensor& g) {
    return {conv3d_input_grad(g, *in[1], at.stride, at.pad, in[0]->shape()),
            conv3d_kernel_grad(*in[0], g, in[1]->shape(), at.stride, at.pad)};
}

DenseTensor tconv_fwd(const Inputs& in, const Attrs& at, Saved&) {
    return conv3d_transposed(*in[0], *in[1], at.stride, at.pad, at.output_padding);
}

std::vector<DenseTensor> tconv_bwd(const Inputs& in, const DenseTensor&, const Saved&, const Attrs& at,
                                   const DenseTensor& g) {
    return {conv3d_direct(g, *in[1], at.stride, at.pad),
            conv3d_kernel_grad(g, *in[0], in[1]->shape(), at.stride, at.pad)};
}

// ---- pooling -------------------------------------------------------------

struct Spatial {
    std::size_t n, w, h, l, c;
};

Spatial spatial_of(const DenseTensor& x, const char* what) {
    if (x.rank() != 5) throw ShapeError(std::string(what) + ": expected [N,W,H,L,C], got " + shape_to_string(x.shape()));
    return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4)};
}

DenseTensor avgpool_fwd(const Inputs& in, const Attrs& at, Saved&) {
    const auto& x = *in[0];
    const Spatial s = spatial_of(x, "average_pool3d");
    const std::size_t k = at.window;
    if (k < 1 || k > s.w || k > s.h || k > s.l) throw ShapeError("average_pool3d: window larger than input");
    const std::size_t ow = s.w / k, oh = s.h / k, ol = s.l / k;
    DenseTensor y({s.n, ow, oh, ol, s.c});
    const double inv = 1.0 / static_cast<double>(k * k * k);
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t a = 0; a < ow; ++a)
            for (std::size_t b = 0; b < oh; ++b)
                for (std::size_t d = 0; d < ol; ++d) {
                    double* out = y.data().data() + (((n * ow + a) * oh + b) * ol + d) * s.c;
                    for (std::size_t i = 0; i < k; ++i)
                        for (std::size_t j = 0; j < k; ++j)
                            for (std::size_t m = 0; m < k; ++m) {
                                const double* src = x.data().data() +
                                    (((n * s.w + a * k + i) * s.h + b * k + j) * s.l + d * k + m) * s.c;
                                for (std::size_t c = 0; c < s.c; ++c) out[c] += src[c];
                            }
                    for (std::size_t c = 0; c < s.c; ++c) out[c] *= inv;
                }
    return y;
}

std::vector<DenseTensor> avgpool_bwd(const Inputs& in, const DenseTensor& out, const Saved&, const Attrs& at,
                                     const DenseTensor& g) {
    const auto& x = *in[0];
    const Spatial s = spatial_of(x, "average_pool3d");
    const std::size_t k = at.window;
    const std::size_t ow = out.dim(1), oh = out.dim(2), ol = out.dim(3);
    DenseTensor gx(x.shape());
    const double inv = 1.0 / static_cast<double>(k * k * k);
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t a = 0; a < ow; ++a)
            for (std::size_t b = 0; b < oh; ++b)
                for (std::size_t d = 0; d < ol; ++d) {
                    const double* go = g.data().data() + (((n * ow + a) * oh + b) * ol + d) * s.c;
                    for (std::size_t i = 0; i < k; ++i)
                        for (std::size_t j = 0; j < k; ++j)
                            for (std::size_t m = 0; m < k; ++m) {
                                double* dst = gx.data().data() +
                                    (((n * s.w + a * k + i) * s.h + b * k + j) * s.l + d * k + m) * s.c;
                                for (std::size_t c = 0; c < s.c; ++c) dst[c] += go[c] * inv;
                            }
                }
    return {gx};
}

// ---- normalization -------------------------------------------------------

// batch_norm(x[..., C], gamma[C], beta[C]); statistics over all leading axes.
// saved: [0] = xhat, [1] = inverse std per channel, [2] = batch mean, [3] = batch variance.
DenseTensor batchnorm_fwd(const Inputs& in, const Attrs& at, Saved& saved) {
    const auto& x = *in[0];
    const auto& gamma = *in[1];
    const auto& beta = *in[2];
    const std::size_t c = x.shape().back();
    if (gamma.size() != c || beta.size() != c) throw ShapeError("batch_norm: parameter length mismatch");
    const std::size_t rows = x.size() / c;
    DenseTensor mean({c}), var({c});
    if (at.training) {
        if (rows < 1) throw ShapeError("batch_norm: empty batch");
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) mean[j] += x[r * c + j];
        for (std::size_t j = 0; j < c; ++j) mean[j] /= static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) {
                const double d = x[r * c + j] - mean[j];
                var[j] += d * d;
            }
        for (std::size_t j = 0; j < c; ++j) var[j] /= static_cast<double>(rows);
    } else {
        if (at.running_mean.size() != c || at.running_var.size() != c)
            throw ShapeError("batch_norm: running statistics length mismatch");
        mean = at.running_mean;
        var = at.running_var;
    }
    DenseTensor inv({c});
    for (std::size_t j = 0; j < c; ++j) inv[j] = 1.0 / std::sqrt(var[j] + at.eps);
    DenseTensor xhat(x.shape()), y(x.shape());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) {
            const double h = (x[r * c + j] - mean[j]) * inv[j];
            xhat[r * c + j] = h;
            y[r * c + j] = gamma[j] * h + beta[j];
        }
    saved = {std::move(xhat), std::move(inv), std::move(mean), std::move(var)};
    return y;
}

std::vector<DenseTensor> batchnorm_bwd(const Inputs& in, const DenseTensor&, const Saved& saved,
                                       const Attrs& at, const DenseTensor& g) {
    const auto& x = *in[0];
    const auto& gamma = *in[1];
    const auto& xhat = saved[0];
    const auto& inv = saved[1];
    const std::size_t c = x.shape().back();
    const std::size_t rows = x.size() / c;
    DenseTensor ggamma({c}), gbeta({c}), gx(x.shape());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) {
            gbeta[j] += g[r * c + j];
            ggamma[j] += g[r * c + j] * xhat[r * c + j];
        }
    if (at.training) {
        const double m = static_cast<double>(rows);
        // sum(dxhat) = gamma * gbeta, sum(dxhat * xhat) = gamma * ggamma
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) {
                const double dxhat = g[r * c + j] * gamma[j];
                gx[r * c + j] = inv[j] / m *
                                (m * dxhat - gamma[j] * gbeta[j] - xhat[r * c + j] * gamma[j] * ggamma[j]);
            }
    } else {
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) gx[r * c + j] = g[r * c + j] * gamma[j] * inv[j];
    }
    return {gx, ggamma, gbeta};
}

// ---- second-order pooling ------------------------------------------------

// x [N, W, H, L, c] -> [N, c, c]; mean-centred over the M = W*H*L positions, scaled 1/(M-1).
// saved: [0] = centred samples [N, M, c].
DenseTensor covpool_fwd(const Inputs& in, const Attrs&, Saved& saved) {
    const auto& x = *in[0];
    const Spatial s = spatial_of(x, "covariance_pool");
    const std::size_t m = s.w * s.h * s.l;
    if (m < 2) throw DegenerateInputError("covariance_pool: need at least 2 spatial samples, got " + std::to_string(m));
    DenseTensor centred({s.n, m, s.c});
    DenseTensor y({s.n, s.c, s.c});
    const double denom = 1.0 / static_cast<double>(m - 1);
    for (std::size_t n = 0; n < s.n; ++n) {
        const double* xs = x.data().data() + n * m * s.c;
        double* xc = centred.data().data() + n * m * s.c;
        std::vector<double> mu(s.c, 0.0);
        for (std::size_t p = 0; p < m; ++p)
            for (std::size_t j = 0; j < s.c; ++j) mu[j] += xs[p * s.c + j];
        for (auto& v : mu) v /= static_cast<double>(m);
        for (std::size_t p = 0; p < m; ++p)
            for (std::size_t j = 0; j < s.c; ++j) xc[p * s.c + j] = xs[p * s.c + j] - mu[j];
        double* cov = y.data().data() + n * s.c * s.c;
        for (std::size_t p = 0; p < m; ++p)
            for (std::size_t i = 0; i < s.c; ++i) {
                const double a = xc[p * s.c + i];
                for (std::size_t j = 0; j < s.c; ++j) cov[i * s.c + j] += a * xc[p * s.c + j];
            }
        for (std::size_t i = 0; i < s.c * s.c; ++i) cov[i] *= denom;
    }
    saved = {std::move(centred)};
    return y;
}

std::vector<DenseTensor> covpool_bwd(const Inputs& in, const DenseTensor&, const Saved& saved, const Attrs&,
                                     const DenseTensor& g) {
    const auto& x = *in[0];
    const Spatial s = spatial_of(x, "covariance_pool");
    const std::size_t m = s.w * s.h * s.l;
    const auto& centred = saved[0];
    const double denom = 1.0 / static_cast<double>(m - 1);
    DenseTensor gx(x.shape());
    for (std::size_t n = 0; n < s.n; ++n) {
        const double* gc = g.data().data() + n * s.c * s.c;
        std::vector<double> sym(s.c * s.c);
        for (std::size_t i = 0; i < s.c; ++i)
            for (std::size_t j = 0; j < s.c; ++j) sym[i * s.c + j] = (gc[i * s.c + j] + gc[j * s.c + i]) * denom;
        const double* xc = centred.data().data() + n * m * s.c;
        double* gxs = gx.data().data() + n * m * s.c;
        std::vector<double> colmean(s.c, 0.0);
        for (std::size_t p = 0; p < m; ++p)
            for (std::size_t i = 0; i < s.c; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < s.c; ++j) acc += xc[p * s.c + j] * sym[j * s.c + i];
                gxs[p * s.c + i] = acc;
                colmean[i] += acc;
            }
        for (auto& v : colmean) v /= static_cast<double>(m);
        for (std::size_t p = 0; p < m; ++p)
            for (std::size_t i = 0; i < s.c; ++i) gxs[p * s.c + i] -= colmean[i];
    }
    return {gx};
}

// L2 normalization of every row along the last axis; zero rows stay zero.
DenseTensor rownorm_fwd(const Inputs& in, const Attrs&, Saved& saved) {
    const auto& x = *in[0];
    const std::size_t c = x.shape().back();
    const std::size_t rows = x.size() / c;
    DenseTensor y(x.shape());
    DenseTensor norms({rows});
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += x[r * c + j] * x[r * c + j];
        const double nrm = std::sqrt(s);
        norms[r] = nrm;
        if (nrm > 0.0)
            for (std::size_t j = 0; j < c; ++j) y[r * c + j] = x[r * c + j] / nrm;
    }
    saved = {std::move(norms)};
    return y;
}

std::vector<DenseTensor> rownorm_bwd(const Inputs& in, const DenseTensor& out, const Saved& saved, const Attrs&,
                                     const DenseTensor& g) {
    const auto& x = *in[0];
    const auto& norms = saved[0];
    const std::size_t c = x.shape().back();
    const std::size_t rows = x.size() / c;
    DenseTensor gx(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        if (!(norms[r] > 0.0)) continue;
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += out[r * c + j] * g[r * c + j];
        for (std::size_t j = 0; j < c; ++j) gx[r * c + j] = (g[r * c + j] - out[r * c + j] * dot) / norms[r];
    }
    return {gx};
}

// x [N, ..., C] scaled by w [N, C].
DenseTensor scalech_fwd(const Inputs& in, const Attrs&, Saved&) {
    const auto& x = *in[0];
    const auto& w = *in[1];
    if (x.rank() < 2 || w.rank() != 2 || w.dim(0) != x.dim(0) || w.dim(1) != x.shape().back()) {
        throw ShapeError("scale_channels: x " + shape_to_string(x.shape()) + ", weights " +
                         shape_to_string(w.shape()));
    }
    const std::size_t n = x.dim(0), c = w.dim(1), per = x.size() / n / c;
    DenseTensor y = x;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < per; ++p)
            for (std::size_t j = 0; j < c; ++j) y[(b * per + p) * c + j] *= w[b * c + j];
    return y;
}

std::vector<DenseTensor> scalech_bwd(const Inputs& in, const DenseTensor&, const Saved&, const Attrs&,
                                     const DenseTensor& g) {
    const auto& x = *in[0];
    const auto& w = *in[1];
    const std::size_t n = x.dim(0), c = w.dim(1), per = x.size() / n / c;
    DenseTensor gx(x.shape()), gw(w.shape());
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < per; ++p)
            for (std::size_t j = 0; j < c; ++j) {
                const std::size_t i = (b * per + p) * c + j;
                gx[i] = g[i] * w[b * c + j];
                gw[b * c + j] += g[i] * x[i];
            }
    return {gx, gw};
}

// ---- classification loss -------------------------------------------------

DenseTensor sce_fwd(const Inputs& in, const Attrs& at, Saved& saved) {
    const auto& z = *in[0];
    if (z.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be [N,K]");
    const std::size_t n = z.dim(0), k = z.dim(1);
    if (at.labels.size() != n) throw ShapeError("softmax_cross_entropy: label count mismatch");
    DenseTensor p = softmax_rows(z);
    double loss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        if (at.labels[r] >= k) throw ArgumentError("softmax_cross_entropy: label out of range");
        // log p via log-sum-exp for accuracy
        double mx = z[r * k];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, z[r * k + j]);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += std::exp(z[r * k + j] - mx);
        loss += -(z[r * k + at.labels[r]] - mx - std::log(s));
    }
    saved = {std::move(p)};
    return DenseTensor::scalar(loss / static_cast<double>(n));
}

std::vector<DenseTensor> sce_bwd(const Inputs& in, const DenseTensor&, const Saved& saved, const Attrs& at,
                                 const DenseTensor& g) {
    const auto& z = *in[0];
    const std::size_t n = z.dim(0), k = z.dim(1);
    DenseTensor gz = saved[0];
    for (std::size_t r = 0; r < n; ++r) gz[r * k + at.labels[r]] -= 1.0;
    const double scale = g[0] / static_cast<double>(n);
    for (auto& v : gz.data()) v *= scale;
    return {gz};
}

const std::array<PrimitiveInfo, kPrimitiveCount>& table() {
    static const std::array<PrimitiveInfo, kPrimitiveCount> t{{
        {"add", 2, add_fwd, add_bwd},
        {"mul", 2, mul_fwd, mul_bwd},
        {"matmul", 2, matmul_fwd, matmul_bwd},
        {"conv3d", 2, conv_fwd, conv_bwd},
        {"transposed_conv3d", 2, tconv_fwd, tconv_bwd},
        {"reshape", 1, reshape_fwd, reshape_bwd},
        {"concat_channels", -1, concat_fwd, concat_bwd},
        {"batch_norm", 3, batchnorm_fwd, batchnorm_bwd},
        {"lrelu", 1, lrelu_fwd, lrelu_bwd},
        {"tanh", 1, tanh_fwd, tanh_bwd},
        {"sigmoid", 1, sigmoid_fwd, sigmoid_bwd},
        {"average_pool3d", 1, avgpool_fwd, avgpool_bwd},
        {"covariance_pool", 1, covpool_fwd, covpool_bwd},
        {"scale_channels", 2, scalech_fwd, scalech_bwd},
        {"softmax_cross_entropy", 1, sce_fwd, sce_bwd},
        {"l1_distance", 2, l1_fwd, l1_bwd},
        {"affine", 3, affine_fwd, affine_bwd},
        {"permute", 1, permute_fwd, permute_bwd},
        {"sum", 1, sum_fwd, sum_bwd},
        {"mean", 1, mean_fwd, mean_bwd},
        {"scale", 1, scale_fwd, scale_bwd},
        {"clamped_log", 1, clamped_log_fwd, clamped_log_bwd},
        {"row_normalize", 1, rownorm_fwd, rownorm_bwd},
    }};
    return t;
}

const PrimitiveInfo& info(Primitive p) {
    const int i = static_cast<int>(p);
    if (i < 0 || i >= kPrimitiveCount) throw ContractError("unsupported primitive #" + std::to_string(i));
    return table()[static_cast<std::size_t>(i)];
}

}  // namespace

std::string_view primitive_name(Primitive p) { return info(p).name; }

Primitive primitive_from_name(std::string_view name) {
    for (int i = 0; i < kPrimitiveCount; ++i) {
        if (table()[static_cast<std::size_t>(i)].name == name) return static_cast<Primitive>(i);
    }
    throw ContractError("unsupported primitive \"" + std::string(name) + "\"");
}

DenseTensor softmax_rows(const DenseTensor& logits) {
    if (logits.rank() != 2) throw ShapeError("softmax_rows: logits must be [N,K]");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    DenseTensor p(logits.shape());
    for (std::size_t r = 0; r < n; ++r) {
        double mx = logits[r * k];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, logits[r * k + j]);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            p[r * k + j] = std::exp(logits[r * k + j] - mx);
            s += p[r * k + j];
        }
        for (std::size_t j = 0; j < k; ++j) p[r * k + j] /= s;
    }
    return p;
}

const DenseTensor& Variable::value() const {
    if (!tape_) throw ContractError("variable is not bound to a tape");
    return tape_->value(id_);
}

Variable Tape::leaf(DenseTensor value, bool requires_grad) {
    if (!value.all_finite()) {
        throw NumericError("leaf #" + std::to_string(nodes_.size()) + " has non-finite values");
    }
    Node n;
    n.is_leaf = true;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Variable(this, nodes_.size() - 1);
}

Variable Tape::record(Primitive primitive, const std::vector<Variable>& inputs, Attrs attrs) {
    const PrimitiveInfo& pi = info(primitive);
    if (pi.arity >= 0 ? inputs.size() != static_cast<std::size_t>(pi.arity) : inputs.empty()) {
        throw ContractError(std::string(pi.name) + ": wrong number of inputs (" + std::to_string(inputs.size()) + ")");
    }
    Node n;
    n.primitive = primitive;
    Inputs in;
    for (const auto& v : inputs) {
        if (v.tape() != this || v.id() >= nodes_.size()) {
            throw ContractError(std::string(pi.name) + ": input does not belong to this tape");
        }
        n.inputs.push_back(v.id());
        n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
        in.push_back(&nodes_[v.id()].value);
    }
    n.value = pi.forward(in, attrs, n.saved);
    if (!n.value.all_finite()) {
        throw NumericError("primitive #" + std::to_string(nodes_.size()) + " (" + std::string(pi.name) +
                           ") produced non-finite values");
    }
    n.attrs = std::move(attrs);
    nodes_.push_back(std::move(n));
    return Variable(this, nodes_.size() - 1);
}

Gradients Tape::backward(const Variable& loss) const {
    if (loss.tape() != this || loss.id() >= nodes_.size()) throw ContractError("loss is not on this tape");
    const Node& ln = nodes_[loss.id()];
    if (ln.value.shape() != Shape{1}) {
        throw ContractError("backward: loss must have shape [1], got " + shape_to_string(ln.value.shape()));
    }
    std::vector<std::optional<DenseTensor>> grads(nodes_.size());
    grads[loss.id()] = DenseTensor::scalar(1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        const Node& node = nodes_[i];
        if (node.is_leaf || !node.requires_grad || !grads[i]) continue;
        const PrimitiveInfo& pi = info(node.primitive);
        Inputs in;
        for (auto id : node.inputs) in.push_back(&nodes_[id].value);
        std::vector<DenseTensor> gin = pi.backward(in, node.value, node.saved, node.attrs, *grads[i]);
        for (std::size_t k = 0; k < node.inputs.size(); ++k) {
            const std::size_t id = node.inputs[k];
            if (!nodes_[id].requires_grad) continue;
            if (!gin[k].all_finite()) {
                throw NumericError("primitive #" + std::to_string(i) + " (" + std::string(pi.name) +
                                   ") produced a non-finite gradient");
            }
            if (!grads[id]) {
                grads[id] = std::move(gin[k]);
            } else {
                auto dst = grads[id]->data();
                auto src = gin[k].data();
                for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
            }
        }
        grads[i].reset();
    }
    Gradients out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (!nodes_[i].is_leaf || !nodes_[i].requires_grad) continue;
        out.emplace(i, grads[i] ? std::move(*grads[i]) : DenseTensor(nodes_[i].value.shape()));
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

Tape& tape_of(const Variable& v) {
    if (!v.tape()) throw ContractError("variable is not bound to a tape");
    return *v.tape();
}

}  // namespace

Variable add(Variable a, Variable b) { return tape_of(a).record(Primitive::add, {a, b}); }
Variable sub(Variable a, Variable b) { return add(a, scale(b, -1.0)); }
Variable mul(Variable a, Variable b) { return tape_of(a).record(Primitive::mul, {a, b}); }
Variable matmul(Variable a, Variable b) { return tape_of(a).record(Primitive::matmul, {a, b}); }
Variable affine(Variable x, Variable w, Variable b) { return tape_of(x).record(Primitive::affine, {x, w, b}); }

Variable conv3d(Variable x, Variable k, std::size_t stride, std::size_t pad) {
    Attrs a;
    a.stride = stride;
    a.pad = pad;
    return tape_of(x).record(Primitive::conv3d, {x, k}, std::move(a));
}

Variable transposed_conv3d(Variable x, Variable k, std::size_t stride, std::size_t pad, std::size_t output_padding) {
    Attrs a;
    a.stride = stride;
    a.pad = pad;
    a.output_padding = output_padding;
    return tape_of(x).record(Primitive::transposed_conv3d, {x, k}, std::move(a));
}

Variable reshape(Variable x, Shape shape) {
    Attrs a;
    a.shape = std::move(shape);
    return tape_of(x).record(Primitive::reshape, {x}, std::move(a));
}

Variable permute(Variable x, std::vector<std::size_t> axes) {
    Attrs a;
    a.axes = std::move(axes);
    return tape_of(x).record(Primitive::permute, {x}, std::move(a));
}

Variable concat_channels(const std::vector<Variable>& xs) {
    if (xs.empty()) throw ContractError("concat_channels: no inputs");
    return tape_of(xs.front()).record(Primitive::concat_channels, xs);
}

Variable batch_norm(Variable x, Variable gamma, Variable beta, double eps) {
    Attrs a;
    a.eps = eps;
    a.training = true;
    return tape_of(x).record(Primitive::batch_norm, {x, gamma, beta}, std::move(a));
}

Variable batch_norm_eval(Variable x, Variable gamma, Variable beta, DenseTensor running_mean,
                         DenseTensor running_var, double eps) {
    Attrs a;
    a.eps = eps;
    a.training = false;
    a.running_mean = std::move(running_mean);
    a.running_var = std::move(running_var);
    return tape_of(x).record(Primitive::batch_norm, {x, gamma, beta}, std::move(a));
}

Variable lrelu(Variable x, double slope) {
    Attrs a;
    a.slope = slope;
    return tape_of(x).record(Primitive::lrelu, {x}, std::move(a));
}

Variable tanh(Variable x) { return tape_of(x).record(Primitive::tanh, {x}); }
Variable sigmoid(Variable x) { return tape_of(x).record(Primitive::sigmoid, {x}); }

Variable average_pool3d(Variable x, std::size_t window) {
    Attrs a;
    a.window = window;
    return tape_of(x).record(Primitive::average_pool3d, {x}, std::move(a));
}

Variable covariance_pool(Variable x) { return tape_of(x).record(Primitive::covariance_pool, {x}); }
Variable row_normalize(Variable x) { return tape_of(x).record(Primitive::row_normalize, {x}); }
Variable scale_channels(Variable x, Variable w) { return tape_of(x).record(Primitive::scale_channels, {x, w}); }

Variable softmax_cross_entropy(Variable logits, std::vector<std::size_t> labels) {
    Attrs a;
    a.labels = std::move(labels);
    return tape_of(logits).record(Primitive::softmax_cross_entropy, {logits}, std::move(a));
}

Variable l1_distance(Variable a, Variable b) { return tape_of(a).record(Primitive::l1_distance, {a, b}); }
Variable sum(Variable x) { return tape_of(x).record(Primitive::sum, {x}); }
Variable mean(Variable x) { return tape_of(x).record(Primitive::mean, {x}); }

Variable scale(Variable x, double a, double b) {
    Attrs at;
    at.a = a;
    at.b = b;
    return tape_of(x).record(Primitive::scale, {x}, std::move(at));
}

Variable clamped_log(Variable x, double lo, double hi) {
    Attrs a;
    a.lo = lo;
    a.hi = hi;
    return tape_of(x).record(Primitive::clamped_log, {x}, std::move(a));
}

// ---------------------------------------------------------------------------

double GradCheckReport::max_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_error);
    return m;
}

namespace {

double evaluate(const GradCheckCase& c, const std::vector<NamedTensor>& params) {
    Tape tape;
    std::vector<Variable> vars;
    for (const auto& p : params) vars.push_back(tape.parameter(p.value));
    return c.build(tape, vars).value()[0];
}

}  // namespace

GradCheckReport check_gradients(const GradCheckCase& c, std::uint64_t seed, std::size_t samples, double step) {
    Tape tape;
    std::vector<Variable> vars;
    for (const auto& p : c.parameters) vars.push_back(tape.parameter(p.value));
    const Variable loss = c.build(tape, vars);
    const Gradients grads = tape.backward(loss);

    std::mt19937_64 rng(seed);
    GradCheckReport report;
    std::vector<NamedTensor> work = c.parameters;
    for (std::size_t p = 0; p < c.parameters.size(); ++p) {
        const DenseTensor& analytic = grads.at(vars[p].id());
        const std::size_t n = c.parameters[p].value.size();
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        GradCheckEntry entry{c.parameters[p].name, 0.0};
        for (std::size_t s = 0; s < std::min(samples, n); ++s) {
            const std::size_t i = samples >= n ? s : pick(rng);
            const double orig = work[p].value[i];
            work[p].value[i] = orig + step;
            const double up = evaluate(c, work);
            work[p].value[i] = orig - step;
            const double down = evaluate(c, work);
            work[p].value[i] = orig;
            const double fd = (up - down) / (2.0 * step);
            const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd));
            entry.max_error = std::max(entry.max_error, err);
        }
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace ttgan::ad
