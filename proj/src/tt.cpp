#include "ttgan/tt.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "ttgan/errors.hpp"
#include "ttgan/volume_io.hpp"

namespace ttgan {

namespace {

void check_chain(const std::vector<DenseTensor>& cores, std::size_t core_rank, const char* what) {
    if (cores.empty()) throw ArgumentError(std::string(what) + ": needs at least one core");
    for (std::size_t k = 0; k < cores.size(); ++k) {
        if (cores[k].rank() != core_rank) {
            throw ShapeError(std::string(what) + ": core " + std::to_string(k) + " has shape " +
                             shape_to_string(cores[k].shape()));
        }
        if (k + 1 < cores.size() && cores[k].shape().back() != cores[k + 1].dim(0)) {
            throw ArgumentError(std::string(what) + ": rank chain broken between cores " +
                                std::to_string(k) + " and " + std::to_string(k + 1));
        }
    }
    if (cores.front().dim(0) != 1 || cores.back().shape().back() != 1) {
        throw ArgumentError(std::string(what) + ": boundary ranks must be 1");
    }
}

}  // namespace

TTTensor::TTTensor(std::vector<DenseTensor> cores) : cores_(std::move(cores)) {
    check_chain(cores_, 3, "TTTensor");
}

Shape TTTensor::mode_sizes() const {
    Shape s;
    for (const auto& c : cores_) s.push_back(c.dim(1));
    return s;
}

std::vector<std::size_t> TTTensor::ranks() const {
    std::vector<std::size_t> r{1};
    for (const auto& c : cores_) r.push_back(c.dim(2));
    return r;
}

TTMatrix::TTMatrix(std::vector<DenseTensor> cores) : cores_(std::move(cores)) {
    check_chain(cores_, 4, "TTMatrix");
}

Shape TTMatrix::row_modes() const {
    Shape s;
    for (const auto& c : cores_) s.push_back(c.dim(1));
    return s;
}

Shape TTMatrix::col_modes() const {
    Shape s;
    for (const auto& c : cores_) s.push_back(c.dim(2));
    return s;
}

std::vector<std::size_t> TTMatrix::ranks() const {
    std::vector<std::size_t> r{1};
    for (const auto& c : cores_) r.push_back(c.dim(3));
    return r;
}

double tt_element(const TTTensor& t, std::span<const std::size_t> index) {
    if (index.size() != t.order()) throw ArgumentError("tt_element: index arity mismatch");
    std::vector<double> row{1.0};
    for (std::size_t k = 0; k < t.order(); ++k) {
        const auto& core = t.cores()[k];
        const std::size_t r0 = core.dim(0), n = core.dim(1), r1 = core.dim(2);
        if (index[k] >= n) throw ArgumentError("tt_element: index out of bounds");
        std::vector<double> next(r1, 0.0);
        for (std::size_t a = 0; a < r0; ++a) {
            const double* slice = core.data().data() + (a * n + index[k]) * r1;
            for (std::size_t b = 0; b < r1; ++b) next[b] += row[a] * slice[b];
        }
        row = std::move(next);
    }
    return row[0];
}

DenseTensor tt_to_dense(const TTTensor& t) {
    const Shape modes = t.mode_sizes();
    if (shape_size(modes) > kMaxDenseElements) {
        throw CapacityError("tt_to_dense: " + shape_to_string(modes) + " exceeds the materialization guard");
    }
    const auto& first = t.cores()[0];
    Matrix acc(first.dim(1), first.dim(2), first.values());
    for (std::size_t k = 1; k < t.order(); ++k) {
        const auto& core = t.cores()[k];
        Matrix c(core.dim(0), core.dim(1) * core.dim(2), core.values());
        Matrix prod = matmul(acc, c);
        acc = Matrix(prod.rows() * core.dim(1), core.dim(2),
                     std::vector<double>(prod.data().begin(), prod.data().end()));
    }
    return fold(acc, modes);
}

Matrix tt_to_dense(const TTMatrix& w) {
    const std::size_t d = w.order();
    std::vector<DenseTensor> merged;
    Shape interleaved;
    for (const auto& c : w.cores()) {
        merged.push_back(reshape(c, {c.dim(0), c.dim(1) * c.dim(2), c.dim(3)}));
        interleaved.push_back(c.dim(1));
        interleaved.push_back(c.dim(2));
    }
    DenseTensor full = reshape(tt_to_dense(TTTensor(std::move(merged))), interleaved);
    std::vector<std::size_t> axes;
    for (std::size_t k = 0; k < d; ++k) axes.push_back(2 * k);
    for (std::size_t k = 0; k < d; ++k) axes.push_back(2 * k + 1);
    DenseTensor ordered = permute(full, axes);
    return Matrix(w.rows(), w.cols(), ordered.values());
}

TTSvdResult tt_svd(const DenseTensor& x, std::span<const std::size_t> max_ranks, double tol) {
    const std::size_t d = x.rank();
    if (max_ranks.size() + 1 != d) {
        throw ArgumentError("tt_svd: expected " + std::to_string(d - 1) + " max ranks, got " +
                            std::to_string(max_ranks.size()));
    }
    for (auto r : max_ranks) {
        if (r < 1) throw ArgumentError("tt_svd: max ranks must be >= 1");
    }
    if (!x.all_finite()) throw NumericError("tt_svd: non-finite input");

    const double step_tol = d > 1 ? tol / std::sqrt(static_cast<double>(d - 1)) : tol;
    std::vector<DenseTensor> cores;
    std::size_t r_prev = 1;
    std::vector<double> rest = x.values();
    std::size_t rest_cols = x.size();
    for (std::size_t k = 0; k + 1 < d; ++k) {
        const std::size_t n = x.dim(k);
        const std::size_t rows = r_prev * n;
        rest_cols /= n;
        Matrix c(rows, rest_cols, std::move(rest));
        SvdResult svd = svd_truncated(c, max_ranks[k], step_tol);
        cores.push_back(DenseTensor({r_prev, n, svd.rank}, std::vector<double>(svd.u.data().begin(), svd.u.data().end())));
        rest.assign(svd.rank * rest_cols, 0.0);
        for (std::size_t a = 0; a < svd.rank; ++a)
            for (std::size_t j = 0; j < rest_cols; ++j) rest[a * rest_cols + j] = svd.s[a] * svd.v(j, a);
        r_prev = svd.rank;
    }
    cores.push_back(DenseTensor({r_prev, x.dim(d - 1), 1}, std::move(rest)));
    TTTensor tt(std::move(cores));

    const double xn = frobenius_norm(x);
    double err = 0.0;
    if (xn > 0.0) {
        DenseTensor approx = tt_to_dense(tt);
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double diff = x[i] - approx[i];
            s += diff * diff;
        }
        err = std::sqrt(s) / xn;
    }
    return TTSvdResult{std::move(tt), err};
}

DenseTensor tt_matvec(const TTMatrix& w, const DenseTensor& x, const DenseTensor& bias) {
    const Shape rows = w.row_modes();
    const Shape cols = w.col_modes();
    const std::size_t d = w.order();
    std::size_t batch = 1;
    bool batched = false;
    if (x.shape() == cols) {
        batched = false;
    } else if (x.rank() == d + 1 && Shape(x.shape().begin() + 1, x.shape().end()) == cols) {
        batched = true;
        batch = x.dim(0);
    } else {
        throw ShapeError("tt_matvec: input shape " + shape_to_string(x.shape()) +
                         " does not match column modes " + shape_to_string(cols));
    }
    if (bias.shape() != rows) {
        throw ShapeError("tt_matvec: bias shape " + shape_to_string(bias.shape()) +
                         " does not match row modes " + shape_to_string(rows));
    }
    const auto ranks = w.ranks();
    std::size_t p = batch;
    std::size_t q = shape_size(cols);
    DenseTensor z = x;
    for (std::size_t k = 0; k < d; ++k) {
        const std::size_t r = ranks[k], n = cols[k], m = rows[k], r2 = ranks[k + 1];
        q /= n;
        // z: [p, r, n, q] -> [p, q, r, n]
        DenseTensor zt = permute(reshape(z, {p, r, n, q}), std::vector<std::size_t>{0, 3, 1, 2});
        Matrix zm(p * q, r * n, zt.values());
        DenseTensor g = permute(w.cores()[k], std::vector<std::size_t>{0, 2, 1, 3});
        Matrix gm(r * n, m * r2, g.values());
        Matrix prod = matmul(zm, gm);
        // [p, q, m, r2] -> [p, m, r2, q]
        z = permute(DenseTensor({p, q, m, r2}, std::vector<double>(prod.data().begin(), prod.data().end())),
                    std::vector<std::size_t>{0, 2, 3, 1});
        p *= m;
    }
    Shape out_shape = rows;
    if (batched) out_shape.insert(out_shape.begin(), batch);
    DenseTensor y = reshape(z, out_shape);
    const std::size_t out = bias.size();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < out; ++i) y[b * out + i] += bias[i];
    return y;
}

ParamCount tt_param_count(const TTTensor& t) {
    ParamCount pc;
    pc.dense_params = 1;
    for (const auto& c : t.cores()) {
        pc.tt_params += c.dim(0) * c.dim(1) * c.dim(2);
        pc.dense_params *= c.dim(1);
    }
    pc.ratio = static_cast<double>(pc.dense_params) / static_cast<double>(pc.tt_params);
    return pc;
}

ParamCount tt_param_count(const TTMatrix& w) {
    ParamCount pc;
    pc.dense_params = 1;
    for (const auto& c : w.cores()) {
        pc.tt_params += c.dim(0) * c.dim(1) * c.dim(2) * c.dim(3);
        pc.dense_params *= c.dim(1) * c.dim(2);
    }
    pc.ratio = static_cast<double>(pc.dense_params) / static_cast<double>(pc.tt_params);
    return pc;
}

namespace {

void check_random_chain(std::size_t d, std::span<const std::size_t> ranks) {
    if (d == 0) throw ArgumentError("tt_random: need at least one mode");
    if (ranks.size() != d + 1) throw ArgumentError("tt_random: rank chain must have d+1 entries");
    if (ranks.front() != 1 || ranks.back() != 1) throw ArgumentError("tt_random: boundary ranks must be 1");
    for (auto r : ranks) {
        if (r < 1) throw ArgumentError("tt_random: ranks must be >= 1");
    }
}

}  // namespace

TTTensor tt_random(const Shape& mode_sizes, std::span<const std::size_t> ranks, std::uint64_t seed) {
    check_random_chain(mode_sizes.size(), ranks);
    std::mt19937_64 rng(seed);
    std::vector<DenseTensor> cores;
    for (std::size_t k = 0; k < mode_sizes.size(); ++k) {
        if (mode_sizes[k] < 1) throw ArgumentError("tt_random: mode sizes must be >= 1");
        const double sd = 1.0 / std::sqrt(static_cast<double>(ranks[k] * mode_sizes[k]));
        std::normal_distribution<double> dist(0.0, sd);
        DenseTensor core({ranks[k], mode_sizes[k], ranks[k + 1]});
        for (auto& v : core.data()) v = dist(rng);
        cores.push_back(std::move(core));
    }
    return TTTensor(std::move(cores));
}

TTMatrix tt_matrix_random(const Shape& row_modes, const Shape& col_modes,
                          std::span<const std::size_t> ranks, std::uint64_t seed) {
    if (row_modes.size() != col_modes.size()) throw ArgumentError("tt_matrix_random: mode count mismatch");
    check_random_chain(row_modes.size(), ranks);
    std::mt19937_64 rng(seed);
    std::vector<DenseTensor> cores;
    for (std::size_t k = 0; k < row_modes.size(); ++k) {
        const double sd = 1.0 / std::sqrt(static_cast<double>(ranks[k] * col_modes[k]));
        std::normal_distribution<double> dist(0.0, sd);
        DenseTensor core({ranks[k], row_modes[k], col_modes[k], ranks[k + 1]});
        for (auto& v : core.data()) v = dist(rng);
        cores.push_back(std::move(core));
    }
    return TTMatrix(std::move(cores));
}

std::vector<std::size_t> uniform_rank_chain(std::span<const std::size_t> modes, std::size_t rank) {
    if (rank < 1) throw ArgumentError("rank must be >= 1");
    const std::size_t d = modes.size();
    std::vector<std::size_t> chain(d + 1, 1);
    for (std::size_t k = 1; k < d; ++k) {
        std::size_t left = 1, right = 1;
        for (std::size_t i = 0; i < k; ++i) left = std::min<std::size_t>(left * modes[i], 1u << 30);
        for (std::size_t i = k; i < d; ++i) right = std::min<std::size_t>(right * modes[i], 1u << 30);
        chain[k] = std::min({rank, left, right});
    }
    return chain;
}

std::vector<std::size_t> balanced_factorization(std::size_t n, std::size_t parts) {
    if (n < 1 || parts < 1) throw ArgumentError("balanced_factorization: arguments must be >= 1");
    std::vector<std::size_t> primes;
    std::size_t m = n;
    for (std::size_t p = 2; p * p <= m; ++p) {
        while (m % p == 0) {
            primes.push_back(p);
            m /= p;
        }
    }
    if (m > 1) primes.push_back(m);
    std::sort(primes.rbegin(), primes.rend());
    std::vector<std::size_t> bins(parts, 1);
    for (auto p : primes) {
        auto smallest = std::min_element(bins.begin(), bins.end());
        *smallest *= p;
    }
    std::sort(bins.begin(), bins.end());
    return bins;
}

std::vector<std::uint8_t> encode_cores(std::span<const DenseTensor> cores) {
    std::vector<std::uint8_t> out{'T', 'T', 'C', '1'};
    le::put_u32(out, static_cast<std::uint32_t>(cores.size()));
    for (const auto& c : cores) {
        le::put_u32(out, static_cast<std::uint32_t>(c.rank()));
        for (auto d : c.shape()) le::put_u32(out, static_cast<std::uint32_t>(d));
        for (double v : c.data()) le::put_f64(out, v);
    }
    return out;
}

std::vector<DenseTensor> decode_cores(std::span<const std::uint8_t> bytes) {
    le::Reader r(bytes);
    r.expect_magic("TTC1");
    const auto count = r.u32("core count");
    std::vector<DenseTensor> cores;
    for (std::uint32_t k = 0; k < count; ++k) {
        const auto ndims = r.u32("core header");
        if (ndims == 0) throw FormatError("core with zero modes", r.offset() - 4);
        Shape shape(ndims);
        for (auto& d : shape) {
            d = r.u32("core header");
            if (d == 0) throw FormatError("core with zero extent", r.offset() - 4);
        }
        const std::size_t n = shape_size(shape);
        r.require(8 * n, "core payload");
        std::vector<double> data(n);
        for (auto& v : data) v = r.f64("core payload");
        cores.emplace_back(std::move(shape), std::move(data));
    }
    if (r.remaining() != 0) throw FormatError("trailing bytes after last core", r.offset());
    return cores;
}

void save_tt(const std::filesystem::path& path, const TTTensor& t) {
    write_file_bytes(path, encode_cores(t.cores()));
}

void save_tt(const std::filesystem::path& path, const TTMatrix& w) {
    write_file_bytes(path, encode_cores(w.cores()));
}

TTTensor load_tt_tensor(const std::filesystem::path& path) {
    return TTTensor(decode_cores(read_file_bytes(path)));
}

TTMatrix load_tt_matrix(const std::filesystem::path& path) {
    return TTMatrix(decode_cores(read_file_bytes(path)));
}

}  // namespace ttgan
