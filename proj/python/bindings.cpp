#include "ntkgen/baseline_nn.hpp"
#include "ntkgen/errors.hpp"
#include "ntkgen/genodata.hpp"
#include "ntkgen/kernels.hpp"
#include "ntkgen/minque.hpp"
#include "ntkgen/ntk_empirical.hpp"
#include "ntkgen/predictors.hpp"
#include "ntkgen/rng.hpp"
#include "ntkgen/simlab.hpp"

#include "json.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

namespace py = pybind11;
using namespace pybind11::literals;
using namespace ntkgen;

namespace {

// Configs cross the boundary as plain dicts; json.dumps keeps the conversion
// identical to what the CLI parses from disk.
nlohmann::json to_json(const py::object& obj) {
    if (obj.is_none()) return nlohmann::json::object();
    const auto text = py::module_::import("json").attr("dumps")(obj).cast<std::string>();
    return nlohmann::json::parse(text);
}

py::object from_json(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

GenotypeMatrix prepared(const Eigen::MatrixXd& x, const std::string& mode) {
    GenotypeMatrix geno(x);
    if (mode == "none") return geno;
    if (mode == "center_only") return standardize(geno, StandardizeMode::center_only);
    if (mode == "center_scale") return standardize(geno, StandardizeMode::center_scale);
    throw Error(ErrorKind::config, "standardize must be 'none', 'center_only' or 'center_scale'");
}

std::optional<Eigen::MatrixXd> design(const std::optional<Eigen::MatrixXd>& covariates, bool intercept,
                                      Eigen::Index n) {
    if (covariates) {
        return intercept ? CovariateDesign::with_intercept(*covariates).values()
                         : CovariateDesign(*covariates).values();
    }
    if (intercept) return CovariateDesign::intercept_only(n).values();
    return std::nullopt;
}

py::dict variance_dict(const VarianceComponents& vc) {
    return py::dict("theta"_a = vc.theta, "theta_raw"_a = vc.theta_raw, "beta"_a = vc.beta,
                    "lambda_"_a = vc.lambda(), "constrained"_a = vc.constrained,
                    "c_condition"_a = vc.c_condition, "passes"_a = vc.passes);
}

}  // namespace

PYBIND11_MODULE(_ntkgen, m) {
    m.doc() = "Neural tangent kernel methods for genetic risk prediction";

    static py::exception<Error> validation_error(m, "ValidationError", PyExc_ValueError);
    static py::exception<Error> numeric_error(m, "NumericError", PyExc_ArithmeticError);
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            const std::string msg = std::string(to_string(e.kind())) + ": " + e.what();
            if (e.is_validation()) py::set_error(validation_error, msg.c_str());
            else py::set_error(numeric_error, msg.c_str());
        }
    });

    // Kernels

    m.def("grm_kernel", [](const Eigen::MatrixXd& x) { return grm_kernel(GenotypeMatrix(x)).values(); }, "x"_a,
          "Genomic relationship matrix of a dosage matrix (n x p).");

    m.def(
        "ntk_analytic",
        [](const Eigen::MatrixXd& x, int depth, double c_sigma, const std::string& base_scaling,
           const std::string& normalization, const std::string& standardize_mode) {
            NtkArchitecture arch;
            arch.depth = depth;
            arch.c_sigma = c_sigma;
            return ntk_analytic(prepared(x, standardize_mode), arch, base_scaling_from_string(base_scaling),
                                normalization_from_string(normalization))
                .values();
        },
        "x"_a, "depth"_a = 2, "c_sigma"_a = 2.0, "base_scaling"_a = "inner_product", "normalization"_a = "unit_diagonal_over_p",
        "standardize"_a = "center_only", "Infinite-width ReLU NTK.");

    m.def(
        "empirical_ntk",
        [](const Eigen::MatrixXd& x, const py::object& config, std::uint64_t seed,
           const std::string& standardize_mode) {
            nlohmann::json merged = default_ntk_config(x.cols(), seed).to_json();
            merged.update(to_json(config));
            merged["seed"] = seed;
            const NtkBuildConfig cfg = NtkBuildConfig::from_json(merged);
            py::gil_scoped_release release;
            return empirical_ntk(prepared(x, standardize_mode), cfg).values();
        },
        "x"_a, "config"_a = py::none(), "seed"_a = 0, "standardize"_a = "center_only",
        "Finite-width NTK Gram matrix; `config` overrides width, depth, method, chunk_size, num_inits, "
        "normalization.");

    m.def(
        "width_convergence",
        [](const Eigen::MatrixXd& x, const std::vector<int>& depths, const std::vector<Eigen::Index>& widths,
           const std::vector<std::uint64_t>& seeds) {
            const GenotypeMatrix geno(x);
            py::gil_scoped_release release;
            auto report = width_convergence_report(geno, depths, widths, seeds);
            py::gil_scoped_acquire acquire;
            return from_json(report.to_json());
        },
        "x"_a, "depths"_a, "widths"_a, "seeds"_a,
        "Max deviation of the empirical from the analytic NTK per (depth, width, seed).");

    // Variance components and predictors

    m.def(
        "minque",
        [](const Eigen::VectorXd& y, const std::vector<Eigen::MatrixXd>& kernels,
           const std::optional<Eigen::MatrixXd>& covariates, bool intercept, const py::object& spec) {
            const auto z = design(covariates, intercept, y.size());
            return variance_dict(minque_fit(y, kernels, z ? &*z : nullptr, MinqueSpec::from_json(to_json(spec))));
        },
        "y"_a, "kernels"_a, "covariates"_a = py::none(), "intercept"_a = true, "spec"_a = py::none(),
        "MINQUE variance components; theta[0] is the residual variance.");

    m.def(
        "blup_predict",
        [](const Eigen::VectorXd& y, const std::vector<Eigen::MatrixXd>& k_train,
           const std::vector<Eigen::MatrixXd>& k_test_train, const Eigen::VectorXd& theta,
           const std::optional<Eigen::MatrixXd>& covariates_train,
           const std::optional<Eigen::MatrixXd>& covariates_test, bool intercept) {
            VarianceComponents vc;
            vc.theta = theta;
            const Eigen::Index n_test = k_test_train.empty() ? 0 : k_test_train.front().rows();
            const auto z_train = design(covariates_train, intercept, y.size());
            const auto z_test = design(covariates_test, intercept, n_test);
            return blup_fit_predict(y, k_train, k_test_train, z_train ? &*z_train : nullptr,
                                    z_test ? &*z_test : nullptr, vc)
                .predictions;
        },
        "y"_a, "k_train"_a, "k_test_train"_a, "theta"_a, "covariates_train"_a = py::none(),
        "covariates_test"_a = py::none(), "intercept"_a = true, "BLUP predictions for given variance components.");

    py::class_<FittedPredictor>(m, "FittedPredictor")
        .def_readonly("alpha", &FittedPredictor::alpha)
        .def_readonly("lambda_", &FittedPredictor::lambda)
        .def_readonly("beta", &FittedPredictor::beta)
        .def_readonly("grid", &FittedPredictor::grid)
        .def_readonly("fold_mse", &FittedPredictor::fold_mse)
        .def(
            "predict",
            [](const FittedPredictor& f, const Eigen::MatrixXd& k_test_train,
               const std::optional<Eigen::MatrixXd>& z_test) {
                return predict(f, k_test_train, z_test ? &*z_test : nullptr);
            },
            "k_test_train"_a, "z_test"_a = py::none())
        .def("to_dict", [](const FittedPredictor& f) { return from_json(f.to_json()); });

    m.def(
        "krr_fit",
        [](const Eigen::VectorXd& y, const Eigen::MatrixXd& k, std::optional<double> lam, const py::object& cv) {
            if (lam) return krr_fit_fixed(y, k, *lam);
            return krr_fit(y, k, CvPlan::from_json(to_json(cv)));
        },
        "y"_a, "k"_a, "lam"_a = py::none(), "cv"_a = py::none(),
        "Kernel ridge regression at a fixed lambda, or with lambda chosen by k-fold CV.");

    m.def("lmm_krr_gap", &check_lmm_krr_equivalence, "y"_a, "k"_a, "sigma_g2"_a, "sigma_e2"_a,
          "Largest difference between the LMM and KRR predictors at lambda = sigma_e2 / sigma_g2.");

    m.def("ntk_dynamics_predict", &ntk_dynamics_predict, "k_train"_a, "k_test_train"_a, "y_train"_a, "eta"_a,
          "t"_a, "allow_pseudo_inverse"_a = false, "Gradient-flow prediction of a linearized network at time t.");

    // Baseline network

    py::class_<MlpModel>(m, "MlpModel")
        .def("predict", [](const MlpModel& model, const Eigen::MatrixXd& x) { return predict_mlp(model, x); })
        .def_property_readonly("num_params", &MlpModel::num_params)
        .def("to_dict", [](const MlpModel& model) { return from_json(model.to_json()); });

    m.def(
        "train_mlp",
        [](const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const py::object& config) {
            const TrainConfig cfg = TrainConfig::from_json(to_json(config));
            TrainResult r;
            {
                py::gil_scoped_release release;
                r = train_mlp(x, y, cfg);
            }
            return py::make_tuple(r.model, r.best_epoch, r.best_val_mse);
        },
        "x"_a, "y"_a, "config"_a = py::none(), "Train the baseline MLP; returns (model, best_epoch, best_val_mse).");

    // Simulation

    m.def(
        "simulate",
        [](const py::object& config) {
            const ScenarioSpec spec = ScenarioSpec::from_json(to_json(config));
            const GenotypeMatrix raw =
                simulate_genotypes(spec.n, spec.p, spec.maf, spec.ld_decay, derive_seed(spec.seed, 1));
            const Eigen::VectorXd g =
                gen_signal(standardize(raw, StandardizeMode::center_only), spec.sigma_g2, derive_seed(spec.seed, 2));
            const PhenotypeVector y = apply_model(g, spec, derive_seed(spec.seed, 3));
            return py::dict("X"_a = raw.values(), "g"_a = g, "y"_a = y.values());
        },
        "config"_a, "Simulate dosages, latent signal and phenotype exactly as the `simulate` command does.");

    m.def(
        "run_campaign",
        [](const py::object& config) {
            const nlohmann::json cfg = to_json(config);
            const ScenarioSpec spec = ScenarioSpec::from_json(cfg);
            const CampaignOptions opts = CampaignOptions::from_json(cfg);
            CampaignResult res;
            {
                py::gil_scoped_release release;
                res = run_campaign(spec, opts);
            }
            py::list rows;
            for (const auto& r : res.rows)
                rows.append(py::dict("method"_a = to_string(r.method), "replicate"_a = r.replicate_id,
                                     "correlation"_a = r.test_correlation, "seconds"_a = r.wall_time,
                                     "status"_a = to_string(r.status), "message"_a = r.message));
            py::dict medians;
            for (auto method : opts.methods) medians[py::str(to_string(method))] = median_correlation(res, method);
            return py::dict("rows"_a = rows, "median_correlation"_a = medians, "results_csv"_a = res.results_csv(),
                            "summary_csv"_a = summary_csv(res.summary()));
        },
        "config"_a, "Run a replicated simulation campaign (same config keys as the `campaign` command).");

    m.def("pearson", &pearson, "a"_a, "b"_a);
}
