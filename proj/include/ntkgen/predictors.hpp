#pragma once

#include "ntkgen/minque.hpp"

#include "json.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace ntkgen {

enum class PredictorKind { lmm_blup, krr };

struct CvPlan {
    int k = 5;
    std::vector<double> grid{0.001, 0.01, 0.1, 1.0, 10.0};
    std::uint64_t seed = 0;

    void validate() const;
    [[nodiscard]] nlohmann::json to_json() const;
    static CvPlan from_json(const nlohmann::json& j);
    /// 10^-3 .. 10^2, the wider grid.
    static std::vector<double> wide_grid();
};

/// Dual-form predictor: y_hat = Z_test beta + K_test_train alpha.
struct FittedPredictor {
    PredictorKind kind = PredictorKind::krr;
    Eigen::VectorXd alpha;
    double lambda = 0.0;
    Eigen::VectorXd beta;  // LMM only; empty for KRR
    std::vector<Eigen::Index> train_index;
    // KRR cross-validation record: fold_mse(g, f) for grid entry g, fold f.
    std::vector<double> grid;
    Eigen::MatrixXd fold_mse;
    bool genetic_variance_zero = false;

    [[nodiscard]] Eigen::Index n_train() const noexcept { return alpha.size(); }
    [[nodiscard]] nlohmann::json to_json() const;  // alpha is not included
    static FittedPredictor from_json(const nlohmann::json& j, Eigen::VectorXd alpha);
};

struct BlupPrediction {
    Eigen::VectorXd predictions;
    FittedPredictor fit;
    // theta_g = 0: predictions are fixed effects only.
    bool genetic_variance_zero = false;
};

/// BLUP under the fitted variance components:
///   C = sum_k theta_k K_k + theta_0 I,  alpha = C^-1 (y - Z beta),
///   y_hat = Z_test beta + sum_k theta_k K_k,test alpha.
/// `k_train` and `k_test_train` hold one matrix per random-effect component.
[[nodiscard]] BlupPrediction blup_fit_predict(const Eigen::VectorXd& y_train,
                                              std::span<const Eigen::MatrixXd> k_train,
                                              std::span<const Eigen::MatrixXd> k_test_train,
                                              const Eigen::MatrixXd* z_train,
                                              const Eigen::MatrixXd* z_test,
                                              const VarianceComponents& vc);

[[nodiscard]] BlupPrediction blup_fit_predict(const Eigen::VectorXd& y_train,
                                              const Eigen::MatrixXd& k_train,
                                              const Eigen::MatrixXd& k_test_train,
                                              const Eigen::MatrixXd* z_train,
                                              const Eigen::MatrixXd* z_test,
                                              const VarianceComponents& vc);

/// Ratio form Z_test beta + K_test (K + lambda I)^-1 (y - Z beta),
/// lambda = theta_0 / theta_1. Single kernel, theta_1 > 0.
[[nodiscard]] Eigen::VectorXd blup_predict_ratio_form(const Eigen::VectorXd& y_train,
                                                      const Eigen::MatrixXd& k_train,
                                                      const Eigen::MatrixXd& k_test_train,
                                                      const Eigen::MatrixXd* z_train,
                                                      const Eigen::MatrixXd* z_test,
                                                      const VarianceComponents& vc);

/// Seeded shuffle of 0..n-1 cut into k contiguous blocks.
[[nodiscard]] std::vector<std::vector<Eigen::Index>> make_folds(Eigen::Index n, int k,
                                                                std::uint64_t seed);

/// Per-fold validation MSE of ridge fits on the complementary folds.
[[nodiscard]] Eigen::VectorXd cv_fold_mse(const Eigen::VectorXd& y, const Eigen::MatrixXd& k,
                                          const std::vector<std::vector<Eigen::Index>>& folds,
                                          double lambda);

/// Kernel ridge regression with lambda chosen by k-fold CV (ties go to the
/// smallest lambda); the final weights solve (K + lambda* I) alpha = y.
[[nodiscard]] FittedPredictor krr_fit(const Eigen::VectorXd& y_train, const Eigen::MatrixXd& k_train,
                                      const CvPlan& plan = {});

/// Ridge fit at a fixed lambda (no cross-validation).
[[nodiscard]] FittedPredictor krr_fit_fixed(const Eigen::VectorXd& y_train,
                                            const Eigen::MatrixXd& k_train, double lambda);

/// K_test_train alpha (plus Z_test beta for LMM fits).
[[nodiscard]] Eigen::VectorXd predict(const FittedPredictor& fit, const Eigen::MatrixXd& k_test_train,
                                      const Eigen::MatrixXd* z_test = nullptr);

[[nodiscard]] Eigen::VectorXd krr_predict(const FittedPredictor& fit,
                                          const Eigen::MatrixXd& k_test_train);

/// Builds the LMM and KRR predictors with lambda = sigma_e2 / sigma_g2 and
/// returns the largest absolute difference. The first y.size() rows of `k`
/// are training samples, the remainder test samples; when k has no extra
/// rows the in-sample fits are compared.
[[nodiscard]] double check_lmm_krr_equivalence(const Eigen::VectorXd& y, const Eigen::MatrixXd& k,
                                               double sigma_g2, double sigma_e2);

/// Gradient-flow prediction at training time t with f(., 0) = 0:
///   y_hat(t) = K_test_train K_train^-1 y (1 - exp(-eta t)).
[[nodiscard]] Eigen::VectorXd ntk_dynamics_predict(const Eigen::MatrixXd& k_train,
                                                   const Eigen::MatrixXd& k_test_train,
                                                   const Eigen::VectorXd& y_train, double eta,
                                                   double t, bool allow_pseudo_inverse = false);

}  // namespace ntkgen
