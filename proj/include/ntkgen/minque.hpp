#pragma once

#include "ntkgen/genodata.hpp"
#include "ntkgen/kernels.hpp"

#include <Eigen/Dense>

#include <optional>
#include <span>
#include <vector>

namespace ntkgen {

enum class MinqueVariant { minque0, minque1 };
enum class FixedEffectsEstimator { ols, gls };

struct MinqueSpec {
    MinqueVariant variant = MinqueVariant::minque0;
    int max_iter = 1;  // re-weighted passes after the prior solve (minque1 only)
    bool constrain = true;
    // Prior weights on [I, K_1, ..., K_R]; empty means all ones.
    std::vector<double> prior_weights;
    FixedEffectsEstimator fixed_effects = FixedEffectsEstimator::ols;
    double near_pd_floor = 1e-10;

    void validate() const;
    [[nodiscard]] nlohmann::json to_json() const;
    static MinqueSpec from_json(const nlohmann::json& j);
};

/// theta = [sigma_e^2, sigma_g1^2, ...]; index 0 is always the residual.
struct VarianceComponents {
    Eigen::VectorXd theta;
    Eigen::VectorXd theta_raw;  // before the nonnegativity clamp
    Eigen::VectorXd beta;       // empty when there are no fixed effects
    bool constrained = false;
    double c_condition = 0.0;   // condition number of the final C
    int passes = 0;

    /// sigma_e^2 / sigma_g^2 for the first kernel; +inf when sigma_g^2 = 0.
    [[nodiscard]] double lambda() const;
    [[nodiscard]] nlohmann::json to_json() const;
    static VarianceComponents from_json(const nlohmann::json& j);
};

/// Symmetric eigen-repair: eigenvalues are raised to at least
/// floor * lambda_max (or floor when no eigenvalue is positive).
[[nodiscard]] Eigen::MatrixXd near_pd(const Eigen::MatrixXd& a, double floor);

/// MINQUE variance components for y = Z beta + sum_k u_k + e with
/// Var(u_k) = theta_k K_k. Solves C theta = u where
///   C_ij = tr(P V_i P V_j),  u_i = r' P V_i P r,  V_0 = I, V_k = K_k,
/// P the fixed-effect projection under the prior covariance V.
[[nodiscard]] VarianceComponents minque_fit(const PhenotypeVector& y,
                                            std::span<const KernelMatrix> kernels,
                                            const std::optional<CovariateDesign>& z,
                                            const MinqueSpec& spec = {});

/// Same as above on plain matrices; every kernel must be n x n symmetric.
[[nodiscard]] VarianceComponents minque_fit(const Eigen::VectorXd& y,
                                            std::span<const Eigen::MatrixXd> kernels,
                                            const Eigen::MatrixXd* z, const MinqueSpec& spec = {});

}  // namespace ntkgen
