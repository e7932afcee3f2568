#include "ntkgen/minque.hpp"

#include "ntkgen/errors.hpp"
#include "ntkgen/linalg.hpp"

#include <fmt/format.h>

#include <cmath>
#include <limits>

namespace ntkgen {

void MinqueSpec::validate() const {
    if (max_iter < 1) throw Error(ErrorKind::parameter, "MINQUE max_iter must be >= 1");
    if (!(near_pd_floor > 0.0)) throw Error(ErrorKind::parameter, "near_pd floor must be > 0");
    for (double w : prior_weights) {
        if (!std::isfinite(w) || w < 0.0) {
            throw Error(ErrorKind::parameter, "MINQUE prior weights must be finite and >= 0");
        }
    }
}

nlohmann::json MinqueSpec::to_json() const {
    return {{"variant", variant == MinqueVariant::minque0 ? "minque0" : "minque1"},
            {"max_iter", max_iter},
            {"constrain", constrain},
            {"prior_weights", prior_weights},
            {"fixed_effects", fixed_effects == FixedEffectsEstimator::ols ? "ols" : "gls"},
            {"near_pd_floor", near_pd_floor}};
}

MinqueSpec MinqueSpec::from_json(const nlohmann::json& j) {
    MinqueSpec s;
    try {
        const auto variant = j.value("variant", std::string("minque0"));
        if (variant == "minque0") {
            s.variant = MinqueVariant::minque0;
        } else if (variant == "minque1") {
            s.variant = MinqueVariant::minque1;
        } else {
            throw Error(ErrorKind::config, fmt::format("unknown MINQUE variant '{}'", variant));
        }
        s.max_iter = j.value("max_iter", s.max_iter);
        s.constrain = j.value("constrain", s.constrain);
        s.prior_weights = j.value("prior_weights", s.prior_weights);
        const auto fe = j.value("fixed_effects", std::string("ols"));
        if (fe == "ols") {
            s.fixed_effects = FixedEffectsEstimator::ols;
        } else if (fe == "gls") {
            s.fixed_effects = FixedEffectsEstimator::gls;
        } else {
            throw Error(ErrorKind::config, fmt::format("unknown fixed-effects estimator '{}'", fe));
        }
        s.near_pd_floor = j.value("near_pd_floor", s.near_pd_floor);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::config, fmt::format("MINQUE config: {}", e.what()));
    }
    s.validate();
    return s;
}

double VarianceComponents::lambda() const {
    if (theta.size() < 2 || theta(1) <= 0.0) return std::numeric_limits<double>::infinity();
    return theta(0) / theta(1);
}

nlohmann::json VarianceComponents::to_json() const {
    auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
    nlohmann::json j = {{"theta", vec(theta)},
                        {"theta_raw", vec(theta_raw)},
                        {"beta", vec(beta)},
                        {"constrained", constrained},
                        {"c_condition", c_condition},
                        {"passes", passes}};
    const double lam = lambda();
    j["lambda"] = std::isfinite(lam) ? nlohmann::json(lam) : nlohmann::json(nullptr);
    return j;
}

VarianceComponents VarianceComponents::from_json(const nlohmann::json& j) {
    auto vec = [](const nlohmann::json& a) {
        const auto v = a.get<std::vector<double>>();
        return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
    };
    VarianceComponents vc;
    try {
        vc.theta = vec(j.at("theta"));
        vc.theta_raw = j.contains("theta_raw") ? vec(j.at("theta_raw")) : vc.theta;
        vc.beta = j.contains("beta") ? vec(j.at("beta")) : Eigen::VectorXd();
        vc.constrained = j.value("constrained", false);
        if (j.contains("c_condition") && j.at("c_condition").is_number()) {
            vc.c_condition = j.at("c_condition").get<double>();
        }
        vc.passes = j.value("passes", 0);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::parse, fmt::format("variance components: {}", e.what()));
    }
    return vc;
}

Eigen::MatrixXd near_pd(const Eigen::MatrixXd& a, double floor) {
    if (!a.allFinite()) throw Error(ErrorKind::numeric, "near_pd: non-finite entries");
    if (a.rows() != a.cols()) throw Error(ErrorKind::dimension, "near_pd: matrix must be square");
    if (!(floor > 0.0)) throw Error(ErrorKind::parameter, "near_pd: floor must be > 0");
    const Eigen::MatrixXd sym = 0.5 * (a + a.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
    if (eig.info() != Eigen::Success) throw Error(ErrorKind::numeric, "near_pd: eigensolver failed");
    const double lmax = eig.eigenvalues().maxCoeff();
    const double bound = floor * (lmax > 0.0 ? lmax : 1.0);
    if (eig.eigenvalues().minCoeff() >= bound) return sym;
    const Eigen::VectorXd lam = eig.eigenvalues().cwiseMax(bound);
    const Eigen::MatrixXd& u = eig.eigenvectors();
    Eigen::MatrixXd out = u * lam.asDiagonal() * u.transpose();
    return 0.5 * (out + out.transpose());
}

namespace {

struct Pass {
    Eigen::VectorXd theta;
    Eigen::VectorXd beta;
    double cond = 0.0;
};

Pass minque_pass(const Eigen::VectorXd& y, std::span<const Eigen::MatrixXd> kernels,
                 const Eigen::MatrixXd* z, const Eigen::VectorXd& weights, const MinqueSpec& spec) {
    const Eigen::Index n = y.size();
    const auto r_count = static_cast<Eigen::Index>(kernels.size()) + 1;

    Eigen::MatrixXd v = weights(0) * Eigen::MatrixXd::Identity(n, n);
    for (std::size_t k = 0; k < kernels.size(); ++k) v += weights(static_cast<Eigen::Index>(k) + 1) * kernels[k];
    v = near_pd(v, spec.near_pd_floor);
    Eigen::MatrixXd p = spd_inverse(v);

    Eigen::VectorXd beta;
    Eigen::VectorXd resid = y;
    if (z != nullptr) {
        const Eigen::MatrixXd vinv_z = p * (*z);
        const Eigen::MatrixXd ztvz = z->transpose() * vinv_z;
        Eigen::LLT<Eigen::MatrixXd> llt(ztvz);
        if (llt.info() != Eigen::Success || condition_number(ztvz) > 1e12) {
            throw Error(ErrorKind::rank, "MINQUE: Z' V^-1 Z is singular; check covariate design rank");
        }
        p -= vinv_z * llt.solve(vinv_z.transpose());
        if (spec.fixed_effects == FixedEffectsEstimator::gls) {
            beta = llt.solve(vinv_z.transpose() * y);
        } else {
            beta = (z->transpose() * (*z)).ldlt().solve(z->transpose() * y);
        }
        resid = y - (*z) * beta;
    }
    p = 0.5 * (p + p.transpose());

    // A_0 = P, A_k = P K_k.
    std::vector<Eigen::MatrixXd> pv;
    pv.reserve(static_cast<std::size_t>(r_count));
    pv.push_back(p);
    for (const auto& k : kernels) pv.push_back(p * k);

    Eigen::MatrixXd c(r_count, r_count);
    for (Eigen::Index i = 0; i < r_count; ++i) {
        for (Eigen::Index j = i; j < r_count; ++j) {
            // tr(A_i A_j) = sum_ab A_i(a,b) A_j(b,a)
            const double t = (pv[static_cast<std::size_t>(i)].array() *
                              pv[static_cast<std::size_t>(j)].transpose().array()).sum();
            c(i, j) = t;
            c(j, i) = t;
        }
    }
    const Eigen::VectorXd pr = p * resid;
    Eigen::VectorXd u(r_count);
    u(0) = pr.squaredNorm();
    for (std::size_t k = 0; k < kernels.size(); ++k) {
        u(static_cast<Eigen::Index>(k) + 1) = pr.dot(kernels[k] * pr);
    }

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(c, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const auto& sv = svd.singularValues();
    const double smax = sv(0);
    const double smin = sv(sv.size() - 1);
    if (!(smax > 0.0) || smin <= 1e-10 * smax) {
        throw Error(ErrorKind::ill_posed,
                    fmt::format("MINQUE: trace matrix C is singular (singular values {:.3g} .. {:.3g}); "
                                "kernels are (nearly) collinear with each other or with I",
                                smax, smin));
    }
    Pass out;
    out.theta = c.partialPivLu().solve(u);
    out.beta = std::move(beta);
    out.cond = smax / smin;
    return out;
}

}  // namespace

VarianceComponents minque_fit(const Eigen::VectorXd& y, std::span<const Eigen::MatrixXd> kernels,
                              const Eigen::MatrixXd* z, const MinqueSpec& spec) {
    spec.validate();
    const Eigen::Index n = y.size();
    if (n < 2) throw Error(ErrorKind::dimension, "MINQUE: need at least two observations");
    if (!y.allFinite()) throw Error(ErrorKind::parameter, "MINQUE: phenotype has non-finite values");
    for (std::size_t k = 0; k < kernels.size(); ++k) {
        if (kernels[k].rows() != n || kernels[k].cols() != n) {
            throw Error(ErrorKind::dimension,
                        fmt::format("MINQUE: kernel {} is {}x{}, phenotype has {} rows", k + 1,
                                    kernels[k].rows(), kernels[k].cols(), n));
        }
    }
    if (z != nullptr && z->rows() != n) {
        throw Error(ErrorKind::dimension,
                    fmt::format("MINQUE: covariates have {} rows, phenotype has {}", z->rows(), n));
    }
    const auto r_count = static_cast<Eigen::Index>(kernels.size()) + 1;
    Eigen::VectorXd weights = Eigen::VectorXd::Ones(r_count);
    if (!spec.prior_weights.empty()) {
        if (static_cast<Eigen::Index>(spec.prior_weights.size()) != r_count) {
            throw Error(ErrorKind::parameter,
                        fmt::format("MINQUE: {} prior weights for {} components",
                                    spec.prior_weights.size(), r_count));
        }
        weights = Eigen::Map<const Eigen::VectorXd>(spec.prior_weights.data(), r_count);
    }

    const int passes = spec.variant == MinqueVariant::minque0 ? 1 : 1 + spec.max_iter;
    Pass pass;
    for (int it = 0; it < passes; ++it) {
        pass = minque_pass(y, kernels, z, weights, spec);
        weights = pass.theta.cwiseMax(0.0);
    }

    VarianceComponents vc;
    vc.theta_raw = pass.theta;
    vc.theta = spec.constrain ? pass.theta.cwiseMax(0.0) : pass.theta;
    vc.beta = pass.beta;
    vc.constrained = spec.constrain;
    vc.c_condition = pass.cond;
    vc.passes = passes;
    return vc;
}

VarianceComponents minque_fit(const PhenotypeVector& y, std::span<const KernelMatrix> kernels,
                              const std::optional<CovariateDesign>& z, const MinqueSpec& spec) {
    std::vector<Eigen::MatrixXd> ks;
    ks.reserve(kernels.size());
    for (const auto& k : kernels) ks.push_back(k.values());
    const Eigen::MatrixXd* zp = z ? &z->values() : nullptr;
    return minque_fit(y.values(), ks, zp, spec);
}

}  // namespace ntkgen
