#include "ntkgen/kernels.hpp"

#include "ntkgen/errors.hpp"

#include <fmt/format.h>

#include <cmath>
#include <fstream>
#include <numbers>

namespace ntkgen {

namespace {

constexpr double kSymmetryTol = 1e-12;
constexpr double kCosineOvershootTol = 1e-12;

}  // namespace

std::string to_string(KernelKind kind) {
    switch (kind) {
        case KernelKind::grm: return "grm";
        case KernelKind::ntk_analytic: return "ntk_analytic";
        case KernelKind::ntk_empirical: return "ntk_empirical";
    }
    return "unknown";
}

KernelKind kernel_kind_from_string(const std::string& s) {
    if (s == "grm") return KernelKind::grm;
    if (s == "ntk_analytic") return KernelKind::ntk_analytic;
    if (s == "ntk_empirical") return KernelKind::ntk_empirical;
    throw Error(ErrorKind::config,
                fmt::format("unknown kernel kind '{}' (expected grm, ntk_analytic, ntk_empirical)", s));
}

KernelMatrix::KernelMatrix(Eigen::MatrixXd values, KernelKind kind, nlohmann::json params)
    : values_(std::move(values)), kind_(kind), params_(std::move(params)) {
    if (values_.rows() != values_.cols()) {
        throw Error(ErrorKind::dimension, fmt::format("kernel must be square, got {}x{}",
                                                      values_.rows(), values_.cols()));
    }
    const Eigen::Index n = values_.rows();
    for (Eigen::Index j = 0; j < n; ++j) {
        for (Eigen::Index i = 0; i < j; ++i) {
            const double a = values_(i, j);
            const double b = values_(j, i);
            if (!std::isfinite(a) || !std::isfinite(b)) {
                throw Error(ErrorKind::numeric,
                            fmt::format("kernel entry ({}, {}) is not finite", i + 1, j + 1));
            }
            if (std::abs(a - b) > kSymmetryTol * std::max(1.0, std::abs(a))) {
                throw Error(ErrorKind::parameter,
                            fmt::format("kernel not symmetric at ({}, {}): {} vs {}", i + 1, j + 1,
                                        a, b));
            }
            values_(j, i) = a;
        }
    }
}

KernelMatrix KernelMatrix::sub(const std::vector<Eigen::Index>& idx) const {
    return KernelMatrix(block(idx, idx), kind_, params_);
}

Eigen::MatrixXd KernelMatrix::block(const std::vector<Eigen::Index>& rows,
                                    const std::vector<Eigen::Index>& cols) const {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < cols.size(); ++j) {
            out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = values_(rows[i], cols[j]);
        }
    }
    return out;
}

KernelMatrix grm_kernel(const GenotypeMatrix& geno) {
    // Statistics come from the values as stored, so a pre-standardized input
    // yields the same kernel as its raw counterpart.
    const Eigen::MatrixXd& x = geno.values();
    const auto stats = column_stats(x);
    Eigen::MatrixXd scaled(x.rows(), x.cols());
    Eigen::Index used = 0;
    for (Eigen::Index k = 0; k < x.cols(); ++k) {
        if (stats.sds(k) <= 1e-12) {
            scaled.col(k).setZero();
            continue;
        }
        scaled.col(k) = (x.col(k).array() - stats.means(k)) / stats.sds(k);
        ++used;
    }
    if (used == 0) {
        throw Error(ErrorKind::degenerate_kernel, "grm_kernel: every column is monomorphic");
    }
    Eigen::MatrixXd k = Eigen::MatrixXd::Zero(x.rows(), x.rows());
    k.selfadjointView<Eigen::Upper>().rankUpdate(scaled);
    k.triangularView<Eigen::StrictlyLower>() = k.transpose();
    k /= static_cast<double>(x.cols());
    nlohmann::json params = {{"p", x.cols()}, {"polymorphic_columns", used}};
    return KernelMatrix(std::move(k), KernelKind::grm, std::move(params));
}

void NtkArchitecture::validate() const {
    if (depth < 2) {
        throw Error(ErrorKind::parameter, fmt::format("NTK depth must be >= 2, got {}", depth));
    }
    if (!(c_sigma > 0.0) || !std::isfinite(c_sigma)) {
        throw Error(ErrorKind::parameter, "c_sigma must be positive");
    }
}

std::string to_string(BaseScaling s) {
    return s == BaseScaling::inner_product ? "inner_product" : "inner_product_over_p";
}

std::string to_string(NtkNormalization s) {
    return s == NtkNormalization::raw ? "raw" : "unit_diagonal_over_p";
}

BaseScaling base_scaling_from_string(const std::string& s) {
    if (s == "inner_product") return BaseScaling::inner_product;
    if (s == "inner_product_over_p") return BaseScaling::inner_product_over_p;
    throw Error(ErrorKind::config, fmt::format("unknown base scaling '{}'", s));
}

NtkNormalization normalization_from_string(const std::string& s) {
    if (s == "raw") return NtkNormalization::raw;
    if (s == "unit_diagonal_over_p") return NtkNormalization::unit_diagonal_over_p;
    throw Error(ErrorKind::config, fmt::format("unknown normalization '{}'", s));
}

ArcCosineStep arccos_step(double cross, double var_x, double var_y, const NtkArchitecture& arch) {
    const double norm = std::sqrt(var_x * var_y);
    double cosine = cross / norm;
    if (std::abs(cosine) > 1.0 + kCosineOvershootTol) {
        throw Error(ErrorKind::numeric,
                    fmt::format("arc-cosine argument {} outside [-1, 1] beyond tolerance", cosine));
    }
    cosine = std::clamp(cosine, -1.0, 1.0);
    const double theta = std::acos(cosine);
    const double pi = std::numbers::pi;
    ArcCosineStep out;
    out.sigma = arch.c_sigma / (2.0 * pi) * norm * (std::sin(theta) + (pi - theta) * cosine);
    const double dot_scale = arch.scale_derivative ? arch.c_sigma : 1.0;
    out.sigma_dot = dot_scale * (pi - theta) / (2.0 * pi);
    return out;
}

Eigen::MatrixXd ntk_analytic_values(const Eigen::MatrixXd& x, const NtkArchitecture& arch,
                                    BaseScaling scaling) {
    arch.validate();
    const Eigen::Index n = x.rows();
    Eigen::MatrixXd sigma = Eigen::MatrixXd::Zero(n, n);
    sigma.selfadjointView<Eigen::Upper>().rankUpdate(x);
    sigma.triangularView<Eigen::StrictlyLower>() = sigma.transpose();
    if (scaling == BaseScaling::inner_product_over_p) sigma /= static_cast<double>(x.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!(sigma(i, i) > 0.0)) {
            throw Error(ErrorKind::undefined_angle,
                        fmt::format("ntk_analytic: row {} has zero norm; angle undefined", i + 1));
        }
    }

    Eigen::MatrixXd theta = sigma;
    Eigen::MatrixXd next(n, n);
    for (int layer = 1; layer <= arch.depth - 1; ++layer) {
        for (Eigen::Index j = 0; j < n; ++j) {
            for (Eigen::Index i = 0; i <= j; ++i) {
                ArcCosineStep step;
                if (i == j) {
                    // theta = 0 exactly on the diagonal
                    step.sigma = arch.c_sigma / 2.0 * sigma(i, i);
                    step.sigma_dot = (arch.scale_derivative ? arch.c_sigma : 1.0) / 2.0;
                } else {
                    step = arccos_step(sigma(i, j), sigma(i, i), sigma(j, j), arch);
                }
                next(i, j) = step.sigma;
                theta(i, j) = theta(i, j) * step.sigma_dot + step.sigma;
            }
        }
        for (Eigen::Index j = 0; j < n; ++j) {
            for (Eigen::Index i = 0; i <= j; ++i) {
                sigma(i, j) = next(i, j);
                sigma(j, i) = next(i, j);
                theta(j, i) = theta(i, j);
            }
        }
    }
    return theta;
}

Eigen::MatrixXd normalize_unit_diagonal_over_p(const Eigen::MatrixXd& k, Eigen::Index p) {
    Eigen::VectorXd d = k.diagonal().cwiseMax(0.0).cwiseSqrt().cwiseMax(1e-10);
    Eigen::MatrixXd out = k.array() / (d * d.transpose()).array();
    return out / static_cast<double>(p);
}

KernelMatrix ntk_analytic(const GenotypeMatrix& geno, const NtkArchitecture& arch,
                          BaseScaling scaling, NtkNormalization norm) {
    Eigen::MatrixXd theta = ntk_analytic_values(geno.values(), arch, scaling);
    if (norm == NtkNormalization::unit_diagonal_over_p) {
        theta = normalize_unit_diagonal_over_p(theta, geno.p());
    }
    nlohmann::json params = {{"depth", arch.depth},
                             {"c_sigma", arch.c_sigma},
                             {"scale_derivative", arch.scale_derivative},
                             {"base_scaling", to_string(scaling)},
                             {"normalization", to_string(norm)},
                             {"p", geno.p()}};
    return KernelMatrix(std::move(theta), KernelKind::ntk_analytic, std::move(params));
}

std::filesystem::path kernel_metadata_path(const std::filesystem::path& path) {
    auto meta = path;
    meta += ".meta.json";
    return meta;
}

void save_kernel(const std::filesystem::path& path, const KernelMatrix& k) {
    save_table(path, k.values());
    nlohmann::json meta = {{"kind", to_string(k.kind())}, {"n", k.n()}, {"params", k.params()}};
    write_file_atomic(kernel_metadata_path(path), meta.dump(2) + "\n");
}

KernelMatrix load_kernel(const std::filesystem::path& path) {
    auto table = load_table(path);
    const auto meta_path = kernel_metadata_path(path);
    std::ifstream in(meta_path);
    if (!in) {
        throw Error(ErrorKind::io,
                    fmt::format("kernel metadata '{}' not found", meta_path.string()));
    }
    nlohmann::json meta;
    try {
        in >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::parse, fmt::format("{}: {}", meta_path.string(), e.what()));
    }
    const auto kind = kernel_kind_from_string(meta.value("kind", std::string{}));
    return KernelMatrix(std::move(table.values), kind, meta.value("params", nlohmann::json::object()));
}

}  // namespace ntkgen
