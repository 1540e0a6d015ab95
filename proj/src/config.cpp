#include "ttgan/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ttgan/errors.hpp"

namespace ttgan {

namespace {

const std::vector<std::string> kRunKeys{"profile", "data_dir", "out_dir", "checkpoint", "labeled_fraction"};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

double parse_fraction(const std::string& v) {
    std::size_t used = 0;
    double d = 0.0;
    try {
        d = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size() || !std::isfinite(d)) {
        throw ConfigError("labeled_fraction: not a number: '" + v + "'");
    }
    return d;
}

GanConfig profile_config(const std::string& profile) {
    if (profile == "full") return GanConfig{};
    if (profile == "smoke") return smoke_config();
    throw ConfigError("profile: expected 'full' or 'smoke', got '" + profile + "'");
}

std::optional<std::string> last_value(const KeyValues& kv, const std::string& key) {
    std::optional<std::string> out;
    for (const auto& [k, v] : kv)
        if (k == key) out = v;
    return out;
}

}  // namespace

void RunConfig::validate() const {
    std::vector<std::string> bad;
    if (profile != "full" && profile != "smoke") bad.push_back("profile must be 'full' or 'smoke'");
    if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0)) bad.push_back("labeled_fraction must be in (0,1]");
    try {
        gan.validate();
    } catch (const ConfigError& e) {
        std::istringstream in(e.what());
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) bad.push_back(trim(line));
    }
    if (!bad.empty()) {
        std::string msg = "invalid configuration:";
        for (const auto& b : bad) msg += "\n  " + b;
        throw ConfigError(msg);
    }
}

std::vector<std::string> run_config_keys() {
    auto keys = kRunKeys;
    for (auto& k : config_keys()) keys.push_back(std::move(k));
    return keys;
}

bool is_run_config_key(const std::string& key) {
    const auto keys = run_config_keys();
    return std::find(keys.begin(), keys.end(), key) != keys.end();
}

void set_run_key(RunConfig& c, const std::string& key, const std::string& value) {
    if (key == "profile") {
        profile_config(value);
        c.profile = value;
    } else if (key == "data_dir") {
        c.data_dir = value;
    } else if (key == "out_dir") {
        c.out_dir = value;
    } else if (key == "checkpoint") {
        c.checkpoint = value;
    } else if (key == "labeled_fraction") {
        c.labeled_fraction = parse_fraction(value);
    } else {
        set_config_key(c.gan, key, value);
    }
}

KeyValues parse_key_values(const std::string& text) {
    KeyValues out;
    std::istringstream in(text);
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw ConfigError("line " + std::to_string(n) + ": expected key=value, got '" + t + "'");
        }
        out.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return out;
}

KeyValues read_key_values(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return parse_key_values(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

RunConfig resolve_run_config(const KeyValues& file, const KeyValues& overrides,
                             const std::optional<std::string>& env_seed, const std::optional<GanConfig>& base) {
    RunConfig c;
    auto profile = last_value(overrides, "profile");
    if (!profile) profile = last_value(file, "profile");
    if (profile) c.profile = *profile;
    c.gan = base ? *base : profile_config(c.profile);

    std::vector<std::string> errors;
    bool seed_set = false;
    for (const KeyValues* layer : {&file, &overrides}) {
        for (const auto& [k, v] : *layer) {
            if (k == "profile") continue;
            try {
                set_run_key(c, k, v);
                seed_set = seed_set || k == "seed";
            } catch (const ConfigError& e) {
                errors.emplace_back(e.what());
            }
        }
    }
    if (!seed_set && env_seed) {
        try {
            set_config_key(c.gan, "seed", *env_seed);
        } catch (const ConfigError& e) {
            errors.push_back(std::string("TTGAN_SEED: ") + e.what());
        }
    }
    if (!errors.empty()) {
        std::string msg = "invalid configuration:";
        for (const auto& e : errors) msg += "\n  " + e;
        throw ConfigError(msg);
    }
    c.validate();
    return c;
}

}  // namespace ttgan
