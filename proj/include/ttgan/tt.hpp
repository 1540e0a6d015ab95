#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "ttgan/tensor.hpp"

namespace ttgan {

/// Tensor train: core k has shape [r_{k-1}, n_k, r_k] with r_0 = r_d = 1.
class TTTensor {
public:
    explicit TTTensor(std::vector<DenseTensor> cores);

    const std::vector<DenseTensor>& cores() const noexcept { return cores_; }
    std::size_t order() const noexcept { return cores_.size(); }
    Shape mode_sizes() const;
    std::vector<std::size_t> ranks() const;

private:
    std::vector<DenseTensor> cores_;
};

/// TT-matrix: core k has shape [r_{k-1}, m_k, n_k, r_k]; represents a
/// (prod m_k) x (prod n_k) matrix with row index (i_1..i_d), column (j_1..j_d).
class TTMatrix {
public:
    explicit TTMatrix(std::vector<DenseTensor> cores);

    const std::vector<DenseTensor>& cores() const noexcept { return cores_; }
    std::size_t order() const noexcept { return cores_.size(); }
    Shape row_modes() const;
    Shape col_modes() const;
    std::vector<std::size_t> ranks() const;
    std::size_t rows() const { return shape_size(row_modes()); }
    std::size_t cols() const { return shape_size(col_modes()); }

private:
    std::vector<DenseTensor> cores_;
};

/// Largest number of elements tt_to_dense will materialize.
inline constexpr std::size_t kMaxDenseElements = std::size_t{1} << 24;

double tt_element(const TTTensor& t, std::span<const std::size_t> index);
DenseTensor tt_to_dense(const TTTensor& t);

/// W with rows (i_1..i_d) and columns (j_1..j_d), both row-major.
Matrix tt_to_dense(const TTMatrix& w);

struct TTSvdResult {
    TTTensor tt;
    double relative_error = 0.0;  // ||x - tt||_F / ||x||_F
};

/// Sequential unfold-and-truncate decomposition. max_ranks has d-1 entries.
TTSvdResult tt_svd(const DenseTensor& x, std::span<const std::size_t> max_ranks, double tol);

/// y = W vec(x) + vec(bias), by sequential core contractions. `x` has shape
/// col_modes or [batch, col_modes...]; bias has shape row_modes.
DenseTensor tt_matvec(const TTMatrix& w, const DenseTensor& x, const DenseTensor& bias);

struct ParamCount {
    std::size_t tt_params = 0;
    std::size_t dense_params = 0;
    double ratio = 0.0;  // dense / tt
};

ParamCount tt_param_count(const TTTensor& t);
ParamCount tt_param_count(const TTMatrix& w);

TTTensor tt_random(const Shape& mode_sizes, std::span<const std::size_t> ranks, std::uint64_t seed);
TTMatrix tt_matrix_random(const Shape& row_modes, const Shape& col_modes,
                          std::span<const std::size_t> ranks, std::uint64_t seed);

/// [1, R, ..., R, 1] with each interior entry clipped to
/// min(prod of modes to the left, prod of modes to the right).
std::vector<std::size_t> uniform_rank_chain(std::span<const std::size_t> modes, std::size_t rank);

/// Split n into `parts` factors by packing its prime factors (largest first)
/// into the currently smallest bin. Result sorted ascending.
std::vector<std::size_t> balanced_factorization(std::size_t n, std::size_t parts);

// "TTC1" core container: magic, u32 core count, then per core
// u32 ndims, u32 dims[ndims], f64 payload. Little-endian.
std::vector<std::uint8_t> encode_cores(std::span<const DenseTensor> cores);
std::vector<DenseTensor> decode_cores(std::span<const std::uint8_t> bytes);
void save_tt(const std::filesystem::path& path, const TTTensor& t);
void save_tt(const std::filesystem::path& path, const TTMatrix& w);
TTTensor load_tt_tensor(const std::filesystem::path& path);
TTMatrix load_tt_matrix(const std::filesystem::path& path);

}  // namespace ttgan
