#pragma once

#include "ntkgen/genodata.hpp"

#include "json.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <string>
#include <vector>

namespace ntkgen {

enum class KernelKind { grm, ntk_analytic, ntk_empirical };

[[nodiscard]] std::string to_string(KernelKind kind);
[[nodiscard]] KernelKind kernel_kind_from_string(const std::string& s);

/// Square symmetric similarity matrix tagged with how it was produced.
/// Symmetry is enforced on construction (entries are mirrored from the
/// upper triangle after a tolerance check).
class KernelMatrix {
public:
    KernelMatrix(Eigen::MatrixXd values, KernelKind kind, nlohmann::json params = {});

    [[nodiscard]] const Eigen::MatrixXd& values() const noexcept { return values_; }
    [[nodiscard]] KernelKind kind() const noexcept { return kind_; }
    [[nodiscard]] Eigen::Index n() const noexcept { return values_.rows(); }
    /// Construction parameters (architecture, widths, seeds, ...).
    [[nodiscard]] const nlohmann::json& params() const noexcept { return params_; }

    /// Principal submatrix on `idx`, as a kernel of the same kind.
    [[nodiscard]] KernelMatrix sub(const std::vector<Eigen::Index>& idx) const;
    /// Rectangular block K[rows, cols].
    [[nodiscard]] Eigen::MatrixXd block(const std::vector<Eigen::Index>& rows,
                                        const std::vector<Eigen::Index>& cols) const;

private:
    Eigen::MatrixXd values_;
    KernelKind kind_;
    nlohmann::json params_;
};

/// Genomic relationship matrix
///   K_ij = (1/p) sum_k (X_ik - mu_k)(X_jk - mu_k) / sd_k^2
/// using the statistics stored on `geno` (recomputed if it was standardized
/// already, so standardized and raw inputs give the same kernel).
/// Monomorphic columns contribute nothing; if every column is monomorphic the
/// kernel is degenerate and an error is raised.
[[nodiscard]] KernelMatrix grm_kernel(const GenotypeMatrix& geno);

struct NtkArchitecture {
    int depth = 2;         // L: hidden ReLU layers = L - 1, plus a linear output
    double c_sigma = 2.0;  // ReLU normalization constant
    // Apply c_sigma to the derivative kernel as well. Off reproduces the
    // unscaled derivative closed form (pi - theta) / (2 pi).
    bool scale_derivative = true;

    void validate() const;
};

enum class BaseScaling { inner_product, inner_product_over_p };
enum class NtkNormalization { raw, unit_diagonal_over_p };

[[nodiscard]] std::string to_string(BaseScaling s);
[[nodiscard]] std::string to_string(NtkNormalization s);
[[nodiscard]] BaseScaling base_scaling_from_string(const std::string& s);
[[nodiscard]] NtkNormalization normalization_from_string(const std::string& s);

/// One step of the ReLU arc-cosine recursion for a single pair.
struct ArcCosineStep {
    double sigma;      // Sigma^(l)(x, x')
    double sigma_dot;  // derivative kernel
};
/// `cross` = Sigma^(l-1)(x,x'), `var_x`/`var_y` the diagonal entries.
[[nodiscard]] ArcCosineStep arccos_step(double cross, double var_x, double var_y,
                                        const NtkArchitecture& arch);

/// Infinite-width ReLU NTK Theta^(L-1) over all pairs of rows in `x`.
[[nodiscard]] Eigen::MatrixXd ntk_analytic_values(const Eigen::MatrixXd& x,
                                                  const NtkArchitecture& arch,
                                                  BaseScaling scaling);

[[nodiscard]] KernelMatrix ntk_analytic(const GenotypeMatrix& geno, const NtkArchitecture& arch,
                                        BaseScaling scaling = BaseScaling::inner_product,
                                        NtkNormalization norm = NtkNormalization::unit_diagonal_over_p);

/// K_ij / (d_i d_j) / p with d_i = max(sqrt(K_ii), 1e-10).
[[nodiscard]] Eigen::MatrixXd normalize_unit_diagonal_over_p(const Eigen::MatrixXd& k, Eigen::Index p);

/// Writes `path` in the table convention and `<path>.meta.json` alongside.
void save_kernel(const std::filesystem::path& path, const KernelMatrix& k);
[[nodiscard]] KernelMatrix load_kernel(const std::filesystem::path& path);
[[nodiscard]] std::filesystem::path kernel_metadata_path(const std::filesystem::path& path);

}  // namespace ntkgen
