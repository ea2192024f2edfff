#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hyperpan {

/// Shapes that do not fit an operation's contract.
class DimensionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Violated preconditions that are not about shapes (bad config, out-of-range index, ...).
class ContractError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed container or checkpoint bytes. Carries the offset at which parsing failed.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
          offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

/// A metric is undefined for the input (zero-variance band, zero-norm spectrum, ...).
class DegenerateError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Optimization diverged or produced a non-finite value.
class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace hyperpan
