#include "ttgan/data.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "ttgan/errors.hpp"
#include "ttgan/volume_io.hpp"

namespace ttgan {

namespace {

// Octant corners ordered so that classes 0 and 1 sit in opposite octants.
constexpr std::array<unsigned, 8> kCorners{0b000, 0b111, 0b011, 0b100, 0b101, 0b010, 0b110, 0b001};

// Splits `total` across groups in proportion to `weights`, by largest remainder
// (ties to the lower index).
std::vector<std::size_t> apportion(std::size_t total, const std::vector<std::size_t>& weights) {
    const double sum = static_cast<double>(std::accumulate(weights.begin(), weights.end(), std::size_t{0}));
    std::vector<std::size_t> out(weights.size(), 0);
    if (sum == 0.0) return out;
    std::vector<std::pair<double, std::size_t>> rem;
    std::size_t given = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double quota = static_cast<double>(total) * static_cast<double>(weights[i]) / sum;
        out[i] = static_cast<std::size_t>(std::floor(quota));
        given += out[i];
        rem.emplace_back(quota - std::floor(quota), i);
    }
    std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t j = 0; given < total && j < rem.size(); ++j, ++given) ++out[rem[j].second];
    return out;
}

std::size_t round_half_up(double x) { return static_cast<std::size_t>(std::floor(x + 0.5)); }

}  // namespace

std::size_t DatasetSplit::labeled_count() const {
    return static_cast<std::size_t>(
        std::count_if(train.begin(), train.end(), [](const VolumeSample& s) { return s.label.has_value(); }));
}

std::array<double, 3> class_center(std::size_t k, VolumeShape shape) {
    const unsigned bits = kCorners[k % kCorners.size()];
    std::array<double, 3> c{};
    for (std::size_t a = 0; a < 3; ++a) {
        const double frac = (bits >> (2 - a)) & 1u ? 0.75 : 0.25;
        c[a] = frac * static_cast<double>(shape[a]) - 0.5;
    }
    return c;
}

void normalize_to_unit_range(DenseTensor& volume) {
    if (volume.size() == 0) return;
    const auto [lo, hi] = std::minmax_element(volume.data().begin(), volume.data().end());
    const double mn = *lo, mx = *hi;
    for (auto& v : volume.data()) {
        v = mx > mn ? std::clamp(2.0 * (v - mn) / (mx - mn) - 1.0, -1.0, 1.0) : 0.0;
    }
}

std::vector<VolumeSample> make_synthetic(std::size_t class_count, std::size_t n_per_class, VolumeShape shape,
                                         std::uint64_t seed) {
    if (class_count < 2) throw ArgumentError("make_synthetic: class_count must be at least 2");
    for (auto d : shape) {
        if (d < 8) throw ArgumentError("make_synthetic: every extent must be at least 8");
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 0.1);
    std::uniform_real_distribution<double> jitter(-0.5, 0.5);
    const double base = 0.15 * static_cast<double>(*std::min_element(shape.begin(), shape.end()));
    std::vector<VolumeSample> out;
    out.reserve(class_count * n_per_class);
    for (std::size_t i = 0; i < n_per_class; ++i) {
        for (std::size_t k = 0; k < class_count; ++k) {
            auto centre = class_center(k, shape);
            for (auto& c : centre) c += jitter(rng);
            const double sigma = base * (1.0 + 0.25 * static_cast<double>(k % 3));
            DenseTensor v({shape[0], shape[1], shape[2], 1});
            std::size_t idx = 0;
            for (std::size_t x = 0; x < shape[0]; ++x)
                for (std::size_t y = 0; y < shape[1]; ++y)
                    for (std::size_t z = 0; z < shape[2]; ++z, ++idx) {
                        const double dx = double(x) - centre[0], dy = double(y) - centre[1], dz = double(z) - centre[2];
                        v[idx] = std::exp(-(dx * dx + dy * dy + dz * dz) / (2.0 * sigma * sigma)) + noise(rng);
                    }
            normalize_to_unit_range(v);
            for (auto& e : v.data()) e = static_cast<double>(static_cast<float>(e));
            out.push_back({fmt::format("c{}_{:05}", k, i), std::move(v), k});
        }
    }
    return out;
}

DatasetSplit split(const std::vector<VolumeSample>& samples, double labeled_fraction, std::uint64_t seed) {
    if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0)) {
        throw ArgumentError("split: labeled_fraction must be in (0, 1]");
    }
    std::map<std::size_t, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (!samples[i].label) throw ArgumentError("split: sample " + samples[i].id + " has no label");
        by_class[*samples[i].label].push_back(i);
    }
    std::vector<std::size_t> sizes;
    for (const auto& [k, idx] : by_class) {
        if (idx.size() < 3) {
            throw ArgumentError("split: class " + std::to_string(k) + " has " + std::to_string(idx.size()) +
                                " samples, need at least 3");
        }
        sizes.push_back(idx.size());
    }
    std::mt19937_64 rng(seed);
    const std::size_t n = samples.size();
    const auto holdout = apportion(round_half_up(0.1 * static_cast<double>(n)), sizes);

    DatasetSplit out;
    out.labeled_fraction = labeled_fraction;
    std::vector<std::vector<std::size_t>> train_by_class;
    std::size_t c = 0;
    for (auto& [k, idx] : by_class) {
        std::shuffle(idx.begin(), idx.end(), rng);
        const std::size_t h = holdout[c++];
        for (std::size_t j = 0; j < h; ++j) out.validation.push_back(samples[idx[j]]);
        for (std::size_t j = h; j < 2 * h; ++j) out.test.push_back(samples[idx[j]]);
        train_by_class.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(2 * h), idx.end());
    }

    std::vector<std::size_t> train_sizes;
    std::size_t n_train = 0;
    for (const auto& t : train_by_class) {
        train_sizes.push_back(t.size());
        n_train += t.size();
    }
    const std::size_t labeled =
        std::max<std::size_t>(1, round_half_up(labeled_fraction * static_cast<double>(n_train)));
    const auto keep = apportion(labeled, train_sizes);
    for (std::size_t g = 0; g < train_by_class.size(); ++g) {
        auto& t = train_by_class[g];
        std::shuffle(t.begin(), t.end(), rng);
        for (std::size_t j = 0; j < t.size(); ++j) {
            VolumeSample s = samples[t[j]];
            if (j >= keep[g]) s.label.reset();
            out.train.push_back(std::move(s));
        }
    }
    std::shuffle(out.train.begin(), out.train.end(), rng);
    std::shuffle(out.validation.begin(), out.validation.end(), rng);
    std::shuffle(out.test.begin(), out.test.end(), rng);
    return out;
}

// ---- manifest ----------------------------------------------------------------------

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
    std::string text;
    for (const auto& e : entries) {
        if (e.id.find_first_of(",\n") != std::string::npos || e.path.find_first_of(",\n") != std::string::npos) {
            throw ArgumentError("write_manifest: id or path contains a comma or newline: " + e.id);
        }
        text += e.id + "," + e.path + "," + (e.label ? std::to_string(*e.label) : std::string("-1")) + "\n";
    }
    write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    std::istringstream in(std::string(bytes.begin(), bytes.end()));
    std::vector<ManifestEntry> out;
    std::string line;
    std::size_t offset = 0;
    while (std::getline(in, line)) {
        const std::size_t start = offset;
        offset += line.size() + 1;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto a = line.find(',');
        const auto b = a == std::string::npos ? a : line.find(',', a + 1);
        if (b == std::string::npos || line.find(',', b + 1) != std::string::npos) {
            throw FormatError("manifest " + path.string() + ": expected id,path,label", start);
        }
        ManifestEntry e{line.substr(0, a), line.substr(a + 1, b - a - 1), std::nullopt};
        const std::string label = line.substr(b + 1);
        if (label != "-1") {
            if (label.empty() || label.find_first_not_of("0123456789") != std::string::npos) {
                throw FormatError("manifest " + path.string() + ": bad label '" + label + "'", start + b + 1);
            }
            e.label = std::stoul(label);
        }
        out.push_back(std::move(e));
    }
    return out;
}

void save_samples(const std::filesystem::path& dir, const std::string& manifest_name,
                  const std::vector<VolumeSample>& samples) {
    if (!std::filesystem::is_directory(dir)) throw IoError("output directory does not exist: " + dir.string());
    std::filesystem::create_directories(dir / "volumes");
    std::vector<ManifestEntry> entries;
    for (const auto& s : samples) {
        const std::string rel = "volumes/" + s.id + ".ttv";
        save_volume(dir / rel, s.volume);
        entries.push_back({s.id, rel, s.label});
    }
    write_manifest(dir / manifest_name, entries);
}

std::vector<VolumeSample> load_samples(const std::filesystem::path& manifest) {
    const auto base = manifest.parent_path();
    std::vector<VolumeSample> out;
    for (const auto& e : read_manifest(manifest)) {
        const std::filesystem::path p(e.path);
        out.push_back({e.id, load_volume(p.is_absolute() ? p : base / p), e.label});
    }
    return out;
}

}  // namespace ttgan
