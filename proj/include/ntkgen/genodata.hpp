#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace ntkgen {

enum class StandardizeMode { center_only, center_scale };

/// n x p genotype dosages together with the column statistics that were used
/// (or would be used) to standardize them. Column SDs use the population
/// convention (divide by n).
class GenotypeMatrix {
public:
    /// Wraps raw dosages and computes column statistics.
    explicit GenotypeMatrix(Eigen::MatrixXd values);

    [[nodiscard]] const Eigen::MatrixXd& values() const noexcept { return values_; }
    [[nodiscard]] const Eigen::VectorXd& col_means() const noexcept { return col_means_; }
    [[nodiscard]] const Eigen::VectorXd& col_sds() const noexcept { return col_sds_; }
    [[nodiscard]] bool standardized() const noexcept { return standardized_; }
    [[nodiscard]] std::optional<StandardizeMode> mode() const noexcept { return mode_; }
    /// Columns with zero variance, in ascending order.
    [[nodiscard]] const std::vector<Eigen::Index>& monomorphic() const noexcept {
        return monomorphic_;
    }

    [[nodiscard]] Eigen::Index n() const noexcept { return values_.rows(); }
    [[nodiscard]] Eigen::Index p() const noexcept { return values_.cols(); }

    /// Rows `idx` as a new matrix; statistics are recomputed on the subset.
    [[nodiscard]] GenotypeMatrix rows(const std::vector<Eigen::Index>& idx) const;

private:
    friend GenotypeMatrix standardize(const GenotypeMatrix&, StandardizeMode);
    GenotypeMatrix(Eigen::MatrixXd values, Eigen::VectorXd means, Eigen::VectorXd sds,
                   StandardizeMode mode, std::vector<Eigen::Index> mono);

    Eigen::MatrixXd values_;
    Eigen::VectorXd col_means_;
    Eigen::VectorXd col_sds_;
    bool standardized_ = false;
    std::optional<StandardizeMode> mode_;
    std::vector<Eigen::Index> monomorphic_;
};

class PhenotypeVector {
public:
    explicit PhenotypeVector(Eigen::VectorXd values);
    [[nodiscard]] const Eigen::VectorXd& values() const noexcept { return values_; }
    [[nodiscard]] Eigen::Index size() const noexcept { return values_.size(); }

private:
    Eigen::VectorXd values_;
};

/// Fixed-effect design; rank is checked on construction.
class CovariateDesign {
public:
    explicit CovariateDesign(Eigen::MatrixXd values);
    /// Optionally prepends an intercept column.
    static CovariateDesign with_intercept(const Eigen::MatrixXd& covariates);
    static CovariateDesign intercept_only(Eigen::Index n);

    [[nodiscard]] const Eigen::MatrixXd& values() const noexcept { return values_; }
    [[nodiscard]] Eigen::Index n() const noexcept { return values_.rows(); }
    [[nodiscard]] Eigen::Index q() const noexcept { return values_.cols(); }
    [[nodiscard]] CovariateDesign rows(const std::vector<Eigen::Index>& idx) const;

private:
    Eigen::MatrixXd values_;
};

// The population SD of a column, used everywhere a column scale is needed.
struct ColumnStats {
    Eigen::VectorXd means;
    Eigen::VectorXd sds;
};
[[nodiscard]] ColumnStats column_stats(const Eigen::MatrixXd& x);

[[nodiscard]] GenotypeMatrix standardize(const GenotypeMatrix& geno, StandardizeMode mode);

struct MafRange {
    double low = 0.05;
    double high = 0.5;
};

/// Per-SNP minor-allele frequencies used by simulate_genotypes for `seed`.
[[nodiscard]] std::vector<double> draw_allele_frequencies(Eigen::Index p, MafRange maf, std::uint64_t seed);

/// Synthetic dosages from a Gaussian-copula haplotype model. Adjacent SNPs
/// have latent correlation exp(-ld_decay); ld_decay = +inf gives independent
/// SNPs. Minor-allele frequencies are drawn uniformly from `maf`.
[[nodiscard]] GenotypeMatrix simulate_genotypes(Eigen::Index n, Eigen::Index p, MafRange maf,
                                                double ld_decay, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Delimited text tables

enum class TableFormat { csv, tsv };

struct Table {
    Eigen::MatrixXd values;
    std::vector<std::string> header;  // empty when the file had none
};

/// Picks tsv for ".tsv"/".txt" extensions, csv otherwise.
[[nodiscard]] TableFormat format_for(const std::filesystem::path& path);

[[nodiscard]] Table parse_table(const std::string& text, TableFormat format);
[[nodiscard]] Table load_table(const std::filesystem::path& path);
[[nodiscard]] Table load_table(const std::filesystem::path& path, TableFormat format);

[[nodiscard]] std::string format_table(const Eigen::MatrixXd& values, TableFormat format,
                                       const std::vector<std::string>& header = {});
void save_table(const std::filesystem::path& path, const Eigen::MatrixXd& values,
                const std::vector<std::string>& header = {});

[[nodiscard]] GenotypeMatrix load_genotypes(const std::filesystem::path& path);
/// Accepts a single column, or a single row.
[[nodiscard]] PhenotypeVector load_phenotype(const std::filesystem::path& path);
[[nodiscard]] CovariateDesign load_covariates(const std::filesystem::path& path,
                                              bool add_intercept);

/// Writes `contents` to a temporary sibling and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace ntkgen
