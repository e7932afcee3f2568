#include "ntkgen/linalg.hpp"

#include "ntkgen/errors.hpp"

#include <fmt/format.h>

#include <limits>

namespace ntkgen {

SpdSolve spd_solve(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, SingularPolicy policy,
                   double rel_floor) {
    if (a.rows() != a.cols() || a.rows() != b.rows()) {
        throw Error(ErrorKind::dimension, fmt::format("spd_solve: A is {}x{}, B is {}x{}", a.rows(),
                                                      a.cols(), b.rows(), b.cols()));
    }
    SpdSolve out;
    Eigen::LLT<Eigen::MatrixXd> llt(a);
    if (llt.info() == Eigen::Success) {
        out.x = llt.solve(b);
        if (out.x.allFinite()) return out;
    }

    out.used_fallback = true;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(a);
    if (eig.info() != Eigen::Success) throw Error(ErrorKind::numeric, "spd_solve: eigensolver failed");
    const Eigen::VectorXd& lam = eig.eigenvalues();
    const double lmax = lam.maxCoeff();
    if (!(lmax > 0.0)) throw Error(ErrorKind::numeric, "spd_solve: matrix has no positive eigenvalue");
    const double cutoff = rel_floor * lmax;
    Eigen::VectorXd inv(lam.size());
    for (Eigen::Index i = 0; i < lam.size(); ++i) {
        if (lam(i) > cutoff) {
            inv(i) = 1.0 / lam(i);
        } else {
            out.singular = true;
            inv(i) = 0.0;
        }
    }
    if (out.singular && policy == SingularPolicy::strict) {
        throw Error(ErrorKind::numeric,
                    fmt::format("singular system: smallest eigenvalue {:.3g} vs largest {:.3g}",
                                lam.minCoeff(), lmax));
    }
    const Eigen::MatrixXd& u = eig.eigenvectors();
    out.x = u * inv.asDiagonal() * (u.transpose() * b);
    return out;
}

Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& a) {
    return spd_solve(a, Eigen::MatrixXd::Identity(a.rows(), a.cols())).x;
}

double condition_number(const Eigen::MatrixXd& a) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
    const auto& s = svd.singularValues();
    if (s.size() == 0) return 0.0;
    const double smin = s(s.size() - 1);
    return smin > 0.0 ? s(0) / smin : std::numeric_limits<double>::infinity();
}

}  // namespace ntkgen
