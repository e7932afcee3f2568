#pragma once

#include "ntkgen/baseline_nn.hpp"
#include "ntkgen/genodata.hpp"
#include "ntkgen/minque.hpp"
#include "ntkgen/ntk_empirical.hpp"
#include "ntkgen/predictors.hpp"

#include "json.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ntkgen {

enum class PhenotypeModel { linear, hyperbolic, power, cosh, ricker };

[[nodiscard]] std::string to_string(PhenotypeModel m);
[[nodiscard]] PhenotypeModel phenotype_model_from_string(const std::string& s);

struct ScenarioSpec {
    PhenotypeModel model = PhenotypeModel::linear;
    double alpha = 2.0;
    double sigma_g2 = 1.0;
    double sigma_e2 = 1.0;
    // When set, sigma_e2 is ignored and the noise variance of each replicate
    // is chosen so that var(m(g)) / (var(m(g)) + sigma_e2) equals it.
    std::optional<double> heritability;
    Eigen::Index n = 1000;
    Eigen::Index p = 20;
    int replicates = 100;
    double train_fraction = 0.8;
    std::uint64_t seed = 0;
    // Synthetic genotype generator settings.
    MafRange maf{};
    double ld_decay = 0.5;

    void validate() const;
    [[nodiscard]] nlohmann::json to_json() const;
    /// `model` is required; everything else has a default.
    static ScenarioSpec from_json(const nlohmann::json& j);
};

/// g = X w / sqrt(p), w ~ N(0, sigma_g2 I), so g ~ N(0, (sigma_g2/p) X X').
/// X is used as given (callers center it).
[[nodiscard]] Eigen::VectorXd gen_signal(const GenotypeMatrix& geno, double sigma_g2, std::uint64_t seed);

/// Overflow-safe log(1 + e^x).
[[nodiscard]] double softplus(double x);

/// Noise-free mean m(g) of the phenotype model, elementwise.
[[nodiscard]] Eigen::VectorXd phenotype_mean(const Eigen::VectorXd& g, PhenotypeModel model, double alpha);

/// y = m(g) + e, e ~ N(0, sigma_e2 I), with sigma_e2 from
/// noise_variance().
[[nodiscard]] PhenotypeVector apply_model(const Eigen::VectorXd& g, const ScenarioSpec& spec,
                                          std::uint64_t seed);

/// spec.sigma_e2, or the value implied by spec.heritability for this mean
/// vector (sample variance of m(g)).
[[nodiscard]] double noise_variance(const Eigen::VectorXd& mean, const ScenarioSpec& spec);

[[nodiscard]] double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

enum class Method { ntk_lmm, ntk_krr, product_lmm, baseline_nn };

[[nodiscard]] std::string to_string(Method m);
[[nodiscard]] Method method_from_string(const std::string& s);

struct CampaignOptions {
    std::vector<Method> methods{Method::ntk_lmm, Method::ntk_krr, Method::product_lmm, Method::baseline_nn};
    NtkMethod ntk_method = NtkMethod::layerwise;
    CvPlan cv{};
    MinqueSpec minque{};
    TrainConfig nn{};
    int threads = 1;

    [[nodiscard]] nlohmann::json to_json() const;
    static CampaignOptions from_json(const nlohmann::json& j);
};

enum class ResultStatus {
    ok,
    constant_prediction,  // correlation undefined; recorded as 0
    failed,
};

[[nodiscard]] std::string to_string(ResultStatus s);

struct ReplicateResult {
    Method method;
    int replicate_id;
    double test_correlation;
    double wall_time;
    ResultStatus status = ResultStatus::ok;
    std::string message;
};

struct ReplicateDiagnostics {
    int replicate_id;
    double signal_variance;  // var(m(g))
    double noise_variance;   // var(e)
    double heritability_proxy;
};

struct MethodSummary {
    Method method;
    int count;
    int failures;
    double mean;
    double median;
    double sd;
    double mean_seconds;
};

struct CampaignResult {
    ScenarioSpec spec;
    std::vector<ReplicateResult> rows;  // ordered by (replicate, method)
    std::vector<ReplicateDiagnostics> diagnostics;

    [[nodiscard]] std::vector<MethodSummary> summary() const;
    /// scenario,p,method,replicate,correlation,status
    [[nodiscard]] std::string results_csv() const;
    /// scenario,p,method,replicate,seconds
    [[nodiscard]] std::string timings_csv() const;
    [[nodiscard]] std::string diagnostics_csv() const;
};

/// Median correlation of `method` over non-failed rows; NaN when none.
[[nodiscard]] double median_correlation(const CampaignResult& r, Method method);

[[nodiscard]] std::vector<MethodSummary> summarize(const std::vector<ReplicateResult>& rows);
/// Wall-clock means are opt-in so the default table is reproducible.
[[nodiscard]] std::string summary_csv(const std::vector<MethodSummary>& s, bool include_seconds = false);

/// Runs one replicate: fresh genotypes, signal, phenotype, 80/20 split, and
/// every requested method. Seeds derive from (spec.seed, replicate id).
[[nodiscard]] std::vector<ReplicateResult> run_replicate(const ScenarioSpec& spec,
                                                         const CampaignOptions& opts, int replicate,
                                                         ReplicateDiagnostics* diag = nullptr);

[[nodiscard]] CampaignResult run_campaign(const ScenarioSpec& spec, const CampaignOptions& opts = {});

}  // namespace ntkgen
