#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ttgan/gan.hpp"

namespace ttgan {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// GanConfig plus the run-level keys.
struct RunConfig {
    GanConfig gan;
    std::string profile = "full";  // full | smoke
    std::filesystem::path data_dir;
    std::filesystem::path out_dir;
    std::filesystem::path checkpoint;
    double labeled_fraction = 0.5;

    /// Throws ConfigError naming every offending key.
    void validate() const;
};

/// Run-level keys followed by every GanConfig key.
std::vector<std::string> run_config_keys();
bool is_run_config_key(const std::string& key);

/// Throws ConfigError for unknown keys and unparsable values.
void set_run_key(RunConfig& c, const std::string& key, const std::string& value);

/// `key=value` lines; blank lines and `#` comments are skipped. Malformed lines
/// raise ConfigError with the line number.
KeyValues parse_key_values(const std::string& text);
KeyValues read_key_values(const std::filesystem::path& path);

/// Layers, lowest precedence first: the profile's GanConfig (or `base` when given),
/// then `file`, then `overrides`. `profile` is taken from overrides, then file.
/// When no layer sets `seed`, `env_seed` is used if present.
RunConfig resolve_run_config(const KeyValues& file, const KeyValues& overrides,
                             const std::optional<std::string>& env_seed,
                             const std::optional<GanConfig>& base = std::nullopt);

}  // namespace ttgan
