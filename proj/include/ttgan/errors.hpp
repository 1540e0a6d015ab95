#pragma once

#include <stdexcept>
#include <string>

namespace ttgan {

// Error taxonomy shared by every module. Each type maps onto one failure class
// so callers (and the CLI exit-code mapping) can branch on it.

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ArgumentError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CapacityError : public std::length_error {
public:
    using std::length_error::length_error;
};

class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class DegenerateInputError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
          offset_(offset) {}
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A training step failed; the state was rolled back. `player()` names the
/// network whose update failed ("discriminator", "classifier" or "generator").
class StepError : public NumericError {
public:
    StepError(std::string player, const std::string& what)
        : NumericError(player + " step failed: " + what), player_(std::move(player)) {}
    const std::string& player() const noexcept { return player_; }

private:
    std::string player_;
};

}  // namespace ttgan
