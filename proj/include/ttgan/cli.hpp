#pragma once

#include <array>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "ttgan/tensor.hpp"

namespace ttgan {

/// Exit statuses of every command.
enum ExitCode : int { kExitOk = 0, kExitRuntime = 1, kExitUsage = 2 };

/// Runs one command line (program name excluded), writing to `out` and `err`.
/// `TTGAN_SEED` is read from the environment as the seed fallback.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Centre cuts of a [W, H, L] or [W, H, L, 1] volume, in the order coronal
/// (fixed H), sagittal (fixed W), axial (fixed L). Each image is [rows, cols].
std::array<DenseTensor, 3> center_slices(const DenseTensor& volume);
inline constexpr std::array<const char*, 3> kSliceNames{"coronal", "sagittal", "axial"};

/// Binary PGM: header `P5 <w> <h> 255\n`, then one byte per pixel with
/// [-1, 1] mapped linearly onto [0, 255] (rounded, clamped).
std::vector<std::uint8_t> encode_pgm(const DenseTensor& image);

}  // namespace ttgan
