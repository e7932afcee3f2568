#include "ntkgen/predictors.hpp"

#include "ntkgen/errors.hpp"
#include "ntkgen/linalg.hpp"
#include "ntkgen/rng.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ntkgen {

void CvPlan::validate() const {
    if (k < 2) throw Error(ErrorKind::parameter, fmt::format("CV needs k >= 2 folds, got {}", k));
    if (grid.empty()) throw Error(ErrorKind::parameter, "CV lambda grid is empty");
    for (double l : grid) {
        if (!(l > 0.0) || !std::isfinite(l)) {
            throw Error(ErrorKind::parameter, fmt::format("CV lambda {} is not strictly positive", l));
        }
    }
}

nlohmann::json CvPlan::to_json() const { return {{"k", k}, {"grid", grid}, {"seed", seed}}; }

CvPlan CvPlan::from_json(const nlohmann::json& j) {
    CvPlan p;
    try {
        p.k = j.value("k", p.k);
        if (j.contains("grid") && j.at("grid").is_string()) {
            const auto name = j.at("grid").get<std::string>();
            if (name == "wide") {
                p.grid = wide_grid();
            } else if (name != "default") {
                throw Error(ErrorKind::config, fmt::format("unknown lambda grid '{}'", name));
            }
        } else {
            p.grid = j.value("grid", p.grid);
        }
        p.seed = j.value("seed", p.seed);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::config, fmt::format("CV plan: {}", e.what()));
    }
    p.validate();
    return p;
}

std::vector<double> CvPlan::wide_grid() { return {0.001, 0.01, 0.1, 1.0, 10.0, 100.0}; }

nlohmann::json FittedPredictor::to_json() const {
    nlohmann::json j;
    j["kind"] = kind == PredictorKind::krr ? "krr" : "lmm_blup";
    j["lambda"] = std::isfinite(lambda) ? nlohmann::json(lambda) : nlohmann::json(nullptr);
    j["n_train"] = alpha.size();
    j["beta"] = std::vector<double>(beta.data(), beta.data() + beta.size());
    j["train_index"] = train_index;
    j["genetic_variance_zero"] = genetic_variance_zero;
    if (!grid.empty()) {
        j["grid"] = grid;
        nlohmann::json table = nlohmann::json::array();
        for (Eigen::Index g = 0; g < fold_mse.rows(); ++g) {
            std::vector<double> row(static_cast<std::size_t>(fold_mse.cols()));
            for (Eigen::Index f = 0; f < fold_mse.cols(); ++f) row[static_cast<std::size_t>(f)] = fold_mse(g, f);
            table.push_back({{"lambda", grid[static_cast<std::size_t>(g)]},
                             {"fold_mse", row},
                             {"mean_mse", fold_mse.row(g).mean()}});
        }
        j["cv"] = table;
    }
    return j;
}

FittedPredictor FittedPredictor::from_json(const nlohmann::json& j, Eigen::VectorXd alpha) {
    FittedPredictor f;
    try {
        const auto kind = j.at("kind").get<std::string>();
        if (kind == "krr") {
            f.kind = PredictorKind::krr;
        } else if (kind == "lmm_blup") {
            f.kind = PredictorKind::lmm_blup;
        } else {
            throw Error(ErrorKind::parse, fmt::format("unknown predictor kind '{}'", kind));
        }
        f.lambda = j.at("lambda").is_null() ? std::numeric_limits<double>::infinity()
                                             : j.at("lambda").get<double>();
        const auto beta = j.value("beta", std::vector<double>{});
        f.beta = Eigen::Map<const Eigen::VectorXd>(beta.data(), static_cast<Eigen::Index>(beta.size()));
        f.train_index = j.value("train_index", std::vector<Eigen::Index>{});
        f.genetic_variance_zero = j.value("genetic_variance_zero", false);
        const auto n_train = j.value("n_train", alpha.size());
        if (n_train != alpha.size()) {
            throw Error(ErrorKind::dimension,
                        fmt::format("fit artifact expects {} dual weights, got {}", n_train, alpha.size()));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::parse, fmt::format("fit artifact: {}", e.what()));
    }
    f.alpha = std::move(alpha);
    return f;
}

namespace {

void check_blocks(const Eigen::VectorXd& y, const Eigen::MatrixXd& k_train,
                  const Eigen::MatrixXd& k_test_train) {
    const Eigen::Index n = y.size();
    if (k_train.rows() != n || k_train.cols() != n) {
        throw Error(ErrorKind::dimension, fmt::format("training kernel is {}x{}, expected {}x{}",
                                                      k_train.rows(), k_train.cols(), n, n));
    }
    if (k_test_train.cols() != n) {
        throw Error(ErrorKind::dimension, fmt::format("test-train kernel has {} columns, expected {}",
                                                      k_test_train.cols(), n));
    }
}

}  // namespace

BlupPrediction blup_fit_predict(const Eigen::VectorXd& y_train, std::span<const Eigen::MatrixXd> k_train,
                                std::span<const Eigen::MatrixXd> k_test_train,
                                const Eigen::MatrixXd* z_train, const Eigen::MatrixXd* z_test,
                                const VarianceComponents& vc) {
    if (k_train.size() != k_test_train.size() || k_train.empty()) {
        throw Error(ErrorKind::dimension, "BLUP: need matching, nonempty train and test kernel lists");
    }
    if (vc.theta.size() != static_cast<Eigen::Index>(k_train.size()) + 1) {
        throw Error(ErrorKind::dimension,
                    fmt::format("BLUP: {} variance components for {} kernels", vc.theta.size(),
                                k_train.size()));
    }
    for (std::size_t k = 0; k < k_train.size(); ++k) check_blocks(y_train, k_train[k], k_test_train[k]);
    const Eigen::Index n = y_train.size();
    const Eigen::Index n_test = k_test_train.front().rows();
    if ((z_train == nullptr) != (z_test == nullptr)) {
        throw Error(ErrorKind::parameter, "BLUP: give covariates for both train and test, or neither");
    }

    Eigen::VectorXd beta;
    Eigen::VectorXd fixed_test = Eigen::VectorXd::Zero(n_test);
    Eigen::VectorXd resid = y_train;
    if (z_train != nullptr) {
        if (z_train->rows() != n || z_test->rows() != n_test || z_test->cols() != z_train->cols()) {
            throw Error(ErrorKind::dimension, "BLUP: covariate blocks do not match kernel blocks");
        }
        beta = vc.beta.size() == z_train->cols()
                   ? vc.beta
                   : Eigen::VectorXd((z_train->transpose() * (*z_train)).ldlt().solve(z_train->transpose() * y_train));
        resid = y_train - (*z_train) * beta;
        fixed_test = (*z_test) * beta;
    }

    BlupPrediction out;
    out.fit.kind = PredictorKind::lmm_blup;
    out.fit.beta = beta;
    out.fit.lambda = vc.lambda();
    const Eigen::VectorXd genetic = vc.theta.tail(vc.theta.size() - 1);
    if (!(genetic.array() > 0.0).any()) {
        out.genetic_variance_zero = true;
        out.fit.genetic_variance_zero = true;
        out.fit.alpha = Eigen::VectorXd::Zero(n);
        out.predictions = fixed_test;
        return out;
    }

    Eigen::MatrixXd c = vc.theta(0) * Eigen::MatrixXd::Identity(n, n);
    for (std::size_t k = 0; k < k_train.size(); ++k) c += genetic(static_cast<Eigen::Index>(k)) * k_train[k];
    const Eigen::VectorXd alpha = spd_solve(c, resid).x;

    Eigen::VectorXd random_test = Eigen::VectorXd::Zero(n_test);
    for (std::size_t k = 0; k < k_test_train.size(); ++k) {
        random_test += genetic(static_cast<Eigen::Index>(k)) * (k_test_train[k] * alpha);
    }
    // Only the single-kernel fit folds theta_g into alpha for later reuse.
    out.fit.alpha = k_train.size() == 1 ? Eigen::VectorXd(genetic(0) * alpha) : alpha;
    out.predictions = fixed_test + random_test;
    return out;
}

BlupPrediction blup_fit_predict(const Eigen::VectorXd& y_train, const Eigen::MatrixXd& k_train,
                                const Eigen::MatrixXd& k_test_train, const Eigen::MatrixXd* z_train,
                                const Eigen::MatrixXd* z_test, const VarianceComponents& vc) {
    return blup_fit_predict(y_train, std::span<const Eigen::MatrixXd>(&k_train, 1),
                            std::span<const Eigen::MatrixXd>(&k_test_train, 1), z_train, z_test, vc);
}

Eigen::VectorXd blup_predict_ratio_form(const Eigen::VectorXd& y_train, const Eigen::MatrixXd& k_train,
                                        const Eigen::MatrixXd& k_test_train,
                                        const Eigen::MatrixXd* z_train, const Eigen::MatrixXd* z_test,
                                        const VarianceComponents& vc) {
    check_blocks(y_train, k_train, k_test_train);
    if (vc.theta.size() != 2 || !(vc.theta(1) > 0.0)) {
        throw Error(ErrorKind::parameter, "ratio-form BLUP needs one kernel with theta_g > 0");
    }
    const Eigen::Index n = y_train.size();
    Eigen::VectorXd resid = y_train;
    Eigen::VectorXd fixed = Eigen::VectorXd::Zero(k_test_train.rows());
    if (z_train != nullptr && z_test != nullptr) {
        resid -= (*z_train) * vc.beta;
        fixed = (*z_test) * vc.beta;
    }
    const double lambda = vc.theta(0) / vc.theta(1);
    const Eigen::MatrixXd c = k_train + lambda * Eigen::MatrixXd::Identity(n, n);
    return fixed + k_test_train * spd_solve(c, resid).x;
}

std::vector<std::vector<Eigen::Index>> make_folds(Eigen::Index n, int k, std::uint64_t seed) {
    if (k < 2 || n < k) {
        throw Error(ErrorKind::parameter, fmt::format("cannot split {} samples into {} folds", n, k));
    }
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng.engine());
    std::vector<std::vector<Eigen::Index>> folds(static_cast<std::size_t>(k));
    for (int f = 0; f < k; ++f) {
        const auto begin = static_cast<std::size_t>(n * f / k);
        const auto end = static_cast<std::size_t>(n * (f + 1) / k);
        folds[static_cast<std::size_t>(f)].assign(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                                  order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return folds;
}

namespace {

Eigen::MatrixXd take(const Eigen::MatrixXd& m, const std::vector<Eigen::Index>& rows,
                     const std::vector<Eigen::Index>& cols) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < cols.size(); ++j) {
            out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = m(rows[i], cols[j]);
        }
    }
    return out;
}

Eigen::VectorXd take(const Eigen::VectorXd& v, const std::vector<Eigen::Index>& idx) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) out(static_cast<Eigen::Index>(i)) = v(idx[i]);
    return out;
}

}  // namespace

Eigen::VectorXd cv_fold_mse(const Eigen::VectorXd& y, const Eigen::MatrixXd& k,
                            const std::vector<std::vector<Eigen::Index>>& folds, double lambda) {
    Eigen::VectorXd mse(static_cast<Eigen::Index>(folds.size()));
    for (std::size_t f = 0; f < folds.size(); ++f) {
        std::vector<Eigen::Index> train;
        for (std::size_t g = 0; g < folds.size(); ++g) {
            if (g != f) train.insert(train.end(), folds[g].begin(), folds[g].end());
        }
        const auto& val = folds[f];
        const Eigen::MatrixXd k_tt = take(k, train, train);
        const Eigen::VectorXd y_t = take(y, train);
        const Eigen::MatrixXd c = k_tt + lambda * Eigen::MatrixXd::Identity(k_tt.rows(), k_tt.cols());
        const Eigen::VectorXd alpha = spd_solve(c, y_t, SingularPolicy::pseudo_inverse).x;
        const Eigen::VectorXd pred = take(k, val, train) * alpha;
        mse(static_cast<Eigen::Index>(f)) = (pred - take(y, val)).squaredNorm() / static_cast<double>(val.size());
    }
    return mse;
}

FittedPredictor krr_fit_fixed(const Eigen::VectorXd& y_train, const Eigen::MatrixXd& k_train,
                              double lambda) {
    check_blocks(y_train, k_train, Eigen::MatrixXd(0, y_train.size()));
    if (!(lambda >= 0.0)) throw Error(ErrorKind::parameter, "ridge lambda must be >= 0");
    const Eigen::Index n = y_train.size();
    FittedPredictor fit;
    fit.kind = PredictorKind::krr;
    fit.lambda = lambda;
    const Eigen::MatrixXd c = k_train + lambda * Eigen::MatrixXd::Identity(n, n);
    try {
        fit.alpha = spd_solve(c, y_train).x;
    } catch (const Error& e) {
        throw Error(ErrorKind::ill_posed,
                    fmt::format("KRR: K + {} I is numerically singular ({})", lambda, e.what()));
    }
    fit.train_index.resize(static_cast<std::size_t>(n));
    std::iota(fit.train_index.begin(), fit.train_index.end(), Eigen::Index{0});
    return fit;
}

FittedPredictor krr_fit(const Eigen::VectorXd& y_train, const Eigen::MatrixXd& k_train,
                        const CvPlan& plan) {
    plan.validate();
    check_blocks(y_train, k_train, Eigen::MatrixXd(0, y_train.size()));
    const auto folds = make_folds(y_train.size(), plan.k, plan.seed);
    Eigen::MatrixXd table(static_cast<Eigen::Index>(plan.grid.size()), plan.k);
    for (std::size_t g = 0; g < plan.grid.size(); ++g) {
        table.row(static_cast<Eigen::Index>(g)) = cv_fold_mse(y_train, k_train, folds, plan.grid[g]).transpose();
    }
    // argmin of mean MSE; ties go to the smallest lambda
    std::size_t best = 0;
    double best_mse = std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < plan.grid.size(); ++g) {
        const double m = table.row(static_cast<Eigen::Index>(g)).mean();
        if (m < best_mse || (m == best_mse && plan.grid[g] < plan.grid[best])) {
            best = g;
            best_mse = m;
        }
    }
    FittedPredictor fit = krr_fit_fixed(y_train, k_train, plan.grid[best]);
    fit.grid = plan.grid;
    fit.fold_mse = std::move(table);
    return fit;
}

Eigen::VectorXd predict(const FittedPredictor& fit, const Eigen::MatrixXd& k_test_train,
                        const Eigen::MatrixXd* z_test) {
    if (k_test_train.cols() != fit.n_train()) {
        throw Error(ErrorKind::dimension, fmt::format("kernel block has {} columns, fit has {} training samples",
                                                      k_test_train.cols(), fit.n_train()));
    }
    Eigen::VectorXd out = k_test_train * fit.alpha;
    if (fit.kind == PredictorKind::lmm_blup && fit.beta.size() > 0) {
        if (z_test == nullptr || z_test->cols() != fit.beta.size() || z_test->rows() != k_test_train.rows()) {
            throw Error(ErrorKind::dimension,
                        fmt::format("LMM prediction needs a {}x{} test covariate block",
                                    k_test_train.rows(), fit.beta.size()));
        }
        out += (*z_test) * fit.beta;
    }
    return out;
}

Eigen::VectorXd krr_predict(const FittedPredictor& fit, const Eigen::MatrixXd& k_test_train) {
    if (fit.kind != PredictorKind::krr) {
        throw Error(ErrorKind::parameter, "krr_predict called with a non-KRR fit");
    }
    return predict(fit, k_test_train);
}

double check_lmm_krr_equivalence(const Eigen::VectorXd& y, const Eigen::MatrixXd& k, double sigma_g2,
                                 double sigma_e2) {
    if (!(sigma_g2 > 0.0) || !(sigma_e2 >= 0.0)) {
        throw Error(ErrorKind::parameter, "equivalence check needs sigma_g2 > 0 and sigma_e2 >= 0");
    }
    const Eigen::Index n = y.size();
    if (k.rows() < n || k.cols() != k.rows()) {
        throw Error(ErrorKind::dimension, "equivalence check: kernel smaller than training set");
    }
    const Eigen::Index n_test = k.rows() > n ? k.rows() - n : n;
    const Eigen::Index test_off = k.rows() > n ? n : 0;
    const Eigen::MatrixXd k_train = k.topLeftCorner(n, n);
    const Eigen::MatrixXd k_test = k.block(test_off, 0, n_test, n);

    VarianceComponents vc;
    vc.theta = Eigen::Vector2d(sigma_e2, sigma_g2);
    const Eigen::VectorXd lmm = blup_fit_predict(y, k_train, k_test, nullptr, nullptr, vc).predictions;
    const Eigen::VectorXd krr = krr_predict(krr_fit_fixed(y, k_train, sigma_e2 / sigma_g2), k_test);
    return (lmm - krr).cwiseAbs().maxCoeff();
}

Eigen::VectorXd ntk_dynamics_predict(const Eigen::MatrixXd& k_train, const Eigen::MatrixXd& k_test_train,
                                     const Eigen::VectorXd& y_train, double eta, double t,
                                     bool allow_pseudo_inverse) {
    check_blocks(y_train, k_train, k_test_train);
    if (!(eta > 0.0)) throw Error(ErrorKind::parameter, "learning rate eta must be > 0");
    if (!(t >= 0.0)) throw Error(ErrorKind::parameter, "training time t must be >= 0");
    const double progress = -std::expm1(-eta * t);
    const auto policy = allow_pseudo_inverse ? SingularPolicy::pseudo_inverse : SingularPolicy::strict;
    const Eigen::VectorXd weights = spd_solve(k_train, y_train, policy).x;
    return progress * (k_test_train * weights);
}

}  // namespace ntkgen
