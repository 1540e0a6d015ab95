#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ttgan/gan.hpp"

namespace ttgan {

struct CheckpointSection {
    std::string name;
    std::vector<DenseTensor> tensors;

    friend bool operator==(const CheckpointSection&, const CheckpointSection&) = default;
};

// "TTG1" container: magic; u32 length + config text (key=value lines);
// u32 section count; per section u32 name length, name, u32 payload length,
// payload as a "TTC1" core container. Little-endian.
struct Checkpoint {
    std::string config_text;
    std::vector<CheckpointSection> sections;

    const CheckpointSection* find(const std::string& name) const;
    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Sections: `param/<name>`, `velocity/<name>`, `running/<bn name>` (mean, var),
/// `meta/epoch` and `meta/counters`.
Checkpoint state_to_checkpoint(ThreePlayerState& s);
/// Rebuilds the networks from the config echo and loads every section.
std::unique_ptr<ThreePlayerState> state_from_checkpoint(const Checkpoint& c);

void save_state(const std::filesystem::path& path, ThreePlayerState& s);
std::unique_ptr<ThreePlayerState> load_state(const std::filesystem::path& path);

}  // namespace ttgan
