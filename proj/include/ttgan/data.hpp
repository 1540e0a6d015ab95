#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ttgan/tensor.hpp"

namespace ttgan {

/// One volume [W, H, L, 1] with values in [-1, 1]. `label` is empty for unlabeled samples.
struct VolumeSample {
    std::string id;
    DenseTensor volume;
    std::optional<std::size_t> label;
};

struct DatasetSplit {
    std::vector<VolumeSample> train;
    std::vector<VolumeSample> validation;
    std::vector<VolumeSample> test;
    double labeled_fraction = 1.0;

    std::size_t labeled_count() const;
};

using VolumeShape = std::array<std::size_t, 3>;

/// Gaussian blob at a class-dependent octant with class-dependent width, i.i.d.
/// noise of standard deviation 0.1, then per-volume min/max mapping to [-1, 1].
/// Values are rounded to single precision so they survive the volume format unchanged.
std::vector<VolumeSample> make_synthetic(std::size_t class_count, std::size_t n_per_class, VolumeShape shape,
                                         std::uint64_t seed);

/// Blob centre of class k in voxel coordinates.
std::array<double, 3> class_center(std::size_t k, VolumeShape shape);

/// 80/10/10 split stratified by class, then labels masked in train leaving
/// `labeled_fraction` of it labeled (also stratified).
DatasetSplit split(const std::vector<VolumeSample>& samples, double labeled_fraction, std::uint64_t seed);

/// Per-volume map of min to -1 and max to +1, clamped; a constant volume maps to 0.
void normalize_to_unit_range(DenseTensor& volume);

// ---- manifest ----------------------------------------------------------------------

struct ManifestEntry {
    std::string id;
    std::string path;  // relative to the manifest's directory unless absolute
    std::optional<std::size_t> label;
};

/// Lines `id,path,label`, with label -1 for unlabeled entries.
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

/// Writes every volume to `dir/volumes/<id>.ttv` plus `dir/<manifest_name>`.
void save_samples(const std::filesystem::path& dir, const std::string& manifest_name,
                  const std::vector<VolumeSample>& samples);
std::vector<VolumeSample> load_samples(const std::filesystem::path& manifest);

}  // namespace ttgan
