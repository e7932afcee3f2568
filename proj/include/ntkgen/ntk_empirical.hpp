#pragma once

#include "ntkgen/genodata.hpp"
#include "ntkgen/kernels.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <vector>

namespace ntkgen {

/// Bias-free ReLU MLP in NTK parameterization:
///   h0 = x,  h_l = sqrt(2/m) relu(W_l h_{l-1})  (l = 1..L-1),
///   f(x) = (1/sqrt(m)) w . h_{L-1}
/// with every weight drawn i.i.d. N(0, 1). Depth L counts weight layers, so
/// depth 2 is one hidden layer plus the linear readout.
class WideMlp {
public:
    WideMlp(Eigen::Index input_dim, Eigen::Index width, int depth, std::uint64_t seed);

    [[nodiscard]] Eigen::Index input_dim() const noexcept { return input_dim_; }
    [[nodiscard]] Eigen::Index width() const noexcept { return width_; }
    [[nodiscard]] int depth() const noexcept { return static_cast<int>(hidden_.size()) + 1; }
    [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }
    [[nodiscard]] std::vector<Eigen::Index> widths() const;
    [[nodiscard]] Eigen::Index num_params() const noexcept;

    /// Hidden weight matrices W_1..W_{L-1} (width x fan_in).
    [[nodiscard]] const std::vector<Eigen::MatrixXd>& hidden_weights() const noexcept { return hidden_; }
    [[nodiscard]] const Eigen::VectorXd& output_weights() const noexcept { return output_; }
    Eigen::MatrixXd& hidden_weight(int layer) { return hidden_.at(static_cast<std::size_t>(layer)); }
    Eigen::VectorXd& output_weights() noexcept { return output_; }

    [[nodiscard]] double hidden_scale() const noexcept;  // sqrt(2/m)
    [[nodiscard]] double output_scale() const noexcept;  // 1/sqrt(m)

    /// Copies all parameters into a flat vector in gradient order:
    /// W_1, ..., W_{L-1} (column-major each), then w.
    [[nodiscard]] Eigen::VectorXd flat_params() const;
    void set_flat_params(const Eigen::VectorXd& theta);

private:
    Eigen::Index input_dim_;
    Eigen::Index width_;
    std::uint64_t seed_;
    std::vector<Eigen::MatrixXd> hidden_;
    Eigen::VectorXd output_;
};

struct ForwardCache {
    double output = 0.0;
    std::vector<Eigen::VectorXd> pre_activations;  // z_1..z_{L-1}
    std::vector<Eigen::VectorXd> activations;      // h_0..h_{L-1}
};

[[nodiscard]] ForwardCache forward(const WideMlp& net, const Eigen::Ref<const Eigen::VectorXd>& x);

/// Exact df/dtheta by reverse accumulation; ReLU'(0) is taken as 0.
[[nodiscard]] Eigen::VectorXd param_gradient(const WideMlp& net,
                                             const Eigen::Ref<const Eigen::VectorXd>& x);
[[nodiscard]] Eigen::VectorXd param_gradient(const WideMlp& net, const ForwardCache& cache);

/// How the Gram matrix of per-sample gradients is accumulated.
enum class NtkMethod {
    // Materialize chunks of flat Jacobians and accumulate J_I J_J^T blocks.
    jacobian,
    // Contract layer by layer: sum_l <delta_l, delta_l'> <h_{l-1}, h_{l-1}'>.
    // Algebraically identical, never forms a flat gradient.
    layerwise,
};

[[nodiscard]] std::string to_string(NtkMethod m);
[[nodiscard]] NtkMethod ntk_method_from_string(const std::string& s);

struct NtkBuildConfig {
    Eigen::Index width = 2000;
    int depth = 2;
    Eigen::Index chunk_size = 32;
    int num_inits = 1;
    std::uint64_t seed = 0;
    NtkMethod method = NtkMethod::jacobian;
    NtkNormalization normalization = NtkNormalization::unit_diagonal_over_p;

    void validate() const;
    [[nodiscard]] nlohmann::json to_json() const;
    static NtkBuildConfig from_json(const nlohmann::json& j);
};

/// Width/depth selector used in the simulation study: p < 50 gives
/// (m = 2000, L = 2); otherwise (m = 1000, L = 3).
[[nodiscard]] NtkBuildConfig default_ntk_config(Eigen::Index p, std::uint64_t seed = 0);

/// Raw Gram matrix of gradients, averaged over `cfg.num_inits` networks.
[[nodiscard]] Eigen::MatrixXd empirical_ntk_gram(const Eigen::MatrixXd& x, const NtkBuildConfig& cfg);

/// Empirical NTK: Gram of gradients averaged over initializations,
/// symmetrized, then (by default) rescaled to unit diagonal and divided by p.
[[nodiscard]] KernelMatrix empirical_ntk(const GenotypeMatrix& geno, const NtkBuildConfig& cfg);

// ---------------------------------------------------------------------------

struct WidthConvergenceOptions {
    NtkArchitecture analytic;  // depth is overwritten per sweep entry
    BaseScaling base_scaling = BaseScaling::inner_product;
    NtkNormalization analytic_normalization = NtkNormalization::unit_diagonal_over_p;
    NtkNormalization empirical_normalization = NtkNormalization::unit_diagonal_over_p;
    NtkMethod method = NtkMethod::layerwise;
    Eigen::Index chunk_size = 32;
};

struct WidthDeviation {
    int depth;
    Eigen::Index width;
    std::uint64_t seed;
    double max_abs_dev;
};

struct WidthSummary {
    int depth;
    Eigen::Index width;
    double median_dev;
    double mean_dev;
};

struct WidthConvergenceReport {
    std::vector<WidthDeviation> rows;
    std::vector<WidthSummary> summary;  // ordered by (depth, width)

    /// median(m) / median(next width) for consecutive widths at `depth`.
    [[nodiscard]] std::vector<double> ratios(int depth) const;
    [[nodiscard]] nlohmann::json to_json() const;
};

/// Max-entry deviation between empirical and analytic NTKs for each
/// (depth, width, seed). Raw comparisons rescale the empirical kernel by m,
/// since this parameterization gives Theta_m ~ Theta_inf / m.
[[nodiscard]] WidthConvergenceReport width_convergence_report(
    const GenotypeMatrix& geno, std::span<const int> depths, std::span<const Eigen::Index> widths,
    std::span<const std::uint64_t> seeds, const WidthConvergenceOptions& opts = {});

}  // namespace ntkgen
