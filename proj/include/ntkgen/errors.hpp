#pragma once

#include <stdexcept>
#include <string>

namespace ntkgen {

enum class ErrorKind {
    dimension,
    parameter,
    parse,
    config,
    io,
    degenerate_kernel,
    undefined_angle,
    numeric,
    ill_posed,
    rank,
    domain,
    training_failure,
    undefined_metric,
};

const char* to_string(ErrorKind kind) noexcept;

// Every failure raised by the library carries a kind so callers (the CLI in
// particular) can map it onto an exit code without parsing messages.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}

    [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

    // Validation problems (bad input, bad config) vs. numerical breakdowns.
    [[nodiscard]] bool is_validation() const noexcept;

private:
    ErrorKind kind_;
};

}  // namespace ntkgen
