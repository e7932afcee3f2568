#pragma once

#include <Eigen/Dense>

namespace ntkgen {

enum class SingularPolicy {
    // Singular systems raise a numeric error.
    strict,
    // Singular systems are solved in the least-squares sense with eigenvalues
    // below the relative floor dropped.
    pseudo_inverse,
};

struct SpdSolve {
    Eigen::MatrixXd x;
    bool used_fallback = false;  // Cholesky failed; eigen route used
    bool singular = false;       // some eigenvalues were dropped
};

inline constexpr double kRelativeEigenFloor = 1e-10;

/// Solves A X = B for symmetric A. Cholesky first; when that fails, an
/// eigendecomposition is used and eigenvalues below floor * lambda_max are
/// treated per `policy`.
[[nodiscard]] SpdSolve spd_solve(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                                 SingularPolicy policy = SingularPolicy::strict,
                                 double rel_floor = kRelativeEigenFloor);

[[nodiscard]] Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& a);

/// Ratio of extreme singular values.
[[nodiscard]] double condition_number(const Eigen::MatrixXd& a);

}  // namespace ntkgen
