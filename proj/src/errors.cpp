#include "ntkgen/errors.hpp"

namespace ntkgen {

const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::dimension: return "dimension error";
        case ErrorKind::parameter: return "parameter error";
        case ErrorKind::parse: return "parse error";
        case ErrorKind::config: return "configuration error";
        case ErrorKind::io: return "I/O error";
        case ErrorKind::degenerate_kernel: return "degenerate kernel";
        case ErrorKind::undefined_angle: return "undefined angle";
        case ErrorKind::numeric: return "numeric error";
        case ErrorKind::ill_posed: return "ill-posed system";
        case ErrorKind::rank: return "rank error";
        case ErrorKind::domain: return "domain error";
        case ErrorKind::training_failure: return "training failure";
        case ErrorKind::undefined_metric: return "undefined metric";
    }
    return "error";
}

bool Error::is_validation() const noexcept {
    switch (kind_) {
        case ErrorKind::dimension:
        case ErrorKind::parameter:
        case ErrorKind::parse:
        case ErrorKind::config:
        case ErrorKind::io:
            return true;
        default:
            return false;
    }
}

}  // namespace ntkgen
