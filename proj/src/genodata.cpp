#include "ntkgen/genodata.hpp"

#include "ntkgen/errors.hpp"
#include "ntkgen/rng.hpp"

#include <boost/math/distributions/normal.hpp>
#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace ntkgen {

namespace {

constexpr double kMonomorphicSd = 1e-12;

void require_finite(const Eigen::MatrixXd& x, const char* what) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            if (!std::isfinite(x(i, j))) {
                throw Error(ErrorKind::parameter,
                            fmt::format("{}: non-finite entry at row {}, column {}", what, i + 1,
                                        j + 1));
            }
        }
    }
}

}  // namespace

ColumnStats column_stats(const Eigen::MatrixXd& x) {
    const auto n = static_cast<double>(x.rows());
    ColumnStats s;
    s.means = x.colwise().mean().transpose();
    s.sds.resize(x.cols());
    for (Eigen::Index k = 0; k < x.cols(); ++k) {
        const double ss = (x.col(k).array() - s.means(k)).square().sum();
        s.sds(k) = std::sqrt(ss / n);
    }
    return s;
}

GenotypeMatrix::GenotypeMatrix(Eigen::MatrixXd values) : values_(std::move(values)) {
    if (values_.rows() < 2 || values_.cols() < 1) {
        throw Error(ErrorKind::dimension,
                    fmt::format("genotype matrix must be at least 2x1, got {}x{}", values_.rows(),
                                values_.cols()));
    }
    require_finite(values_, "genotype matrix");
    auto stats = column_stats(values_);
    col_means_ = std::move(stats.means);
    col_sds_ = std::move(stats.sds);
    for (Eigen::Index k = 0; k < col_sds_.size(); ++k) {
        if (col_sds_(k) <= kMonomorphicSd) monomorphic_.push_back(k);
    }
}

GenotypeMatrix::GenotypeMatrix(Eigen::MatrixXd values, Eigen::VectorXd means, Eigen::VectorXd sds,
                               StandardizeMode mode, std::vector<Eigen::Index> mono)
    : values_(std::move(values)),
      col_means_(std::move(means)),
      col_sds_(std::move(sds)),
      standardized_(true),
      mode_(mode),
      monomorphic_(std::move(mono)) {}

GenotypeMatrix GenotypeMatrix::rows(const std::vector<Eigen::Index>& idx) const {
    Eigen::MatrixXd sub(static_cast<Eigen::Index>(idx.size()), values_.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) sub.row(static_cast<Eigen::Index>(r)) = values_.row(idx[r]);
    return GenotypeMatrix(std::move(sub));
}

GenotypeMatrix standardize(const GenotypeMatrix& geno, StandardizeMode mode) {
    if (geno.values().size() == 0) throw Error(ErrorKind::dimension, "standardize: empty matrix");
    Eigen::MatrixXd out = geno.values();
    const Eigen::VectorXd& mu = geno.col_means();
    const Eigen::VectorXd& sd = geno.col_sds();
    std::vector<Eigen::Index> mono;
    for (Eigen::Index k = 0; k < out.cols(); ++k) {
        out.col(k).array() -= mu(k);
        if (sd(k) <= kMonomorphicSd) {
            mono.push_back(k);
        } else if (mode == StandardizeMode::center_scale) {
            out.col(k) /= sd(k);
        }
    }
    return GenotypeMatrix(std::move(out), mu, sd, mode, std::move(mono));
}

PhenotypeVector::PhenotypeVector(Eigen::VectorXd values) : values_(std::move(values)) {
    for (Eigen::Index i = 0; i < values_.size(); ++i) {
        if (!std::isfinite(values_(i))) {
            throw Error(ErrorKind::parameter,
                        fmt::format("phenotype: non-finite value at row {}", i + 1));
        }
    }
}

CovariateDesign::CovariateDesign(Eigen::MatrixXd values) : values_(std::move(values)) {
    require_finite(values_, "covariate design");
    if (values_.cols() < 1 || values_.cols() >= values_.rows()) {
        throw Error(ErrorKind::rank,
                    fmt::format("covariate design needs 1 <= q < n, got n={}, q={}", values_.rows(),
                                values_.cols()));
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(values_);
    qr.setThreshold(1e-10);
    if (qr.rank() != values_.cols()) {
        throw Error(ErrorKind::rank, fmt::format("covariate design has rank {} < q = {}",
                                                 qr.rank(), values_.cols()));
    }
}

CovariateDesign CovariateDesign::with_intercept(const Eigen::MatrixXd& covariates) {
    Eigen::MatrixXd z(covariates.rows(), covariates.cols() + 1);
    z.col(0).setOnes();
    z.rightCols(covariates.cols()) = covariates;
    return CovariateDesign(std::move(z));
}

CovariateDesign CovariateDesign::intercept_only(Eigen::Index n) {
    return CovariateDesign(Eigen::MatrixXd::Ones(n, 1));
}

CovariateDesign CovariateDesign::rows(const std::vector<Eigen::Index>& idx) const {
    Eigen::MatrixXd sub(static_cast<Eigen::Index>(idx.size()), values_.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) sub.row(static_cast<Eigen::Index>(r)) = values_.row(idx[r]);
    return CovariateDesign(std::move(sub));
}

namespace {

void check_maf_range(MafRange maf) {
    if (!(maf.low > 0.0 && maf.low < maf.high && maf.high <= 0.5)) {
        throw Error(ErrorKind::parameter,
                    fmt::format("invalid MAF range ({}, {}); need 0 < low < high <= 0.5", maf.low,
                                maf.high));
    }
}

}  // namespace

std::vector<double> draw_allele_frequencies(Eigen::Index p, MafRange maf, std::uint64_t seed) {
    check_maf_range(maf);
    Rng rng(derive_seed(seed, 0));
    std::vector<double> f(static_cast<std::size_t>(std::max<Eigen::Index>(p, 0)));
    for (auto& v : f) v = rng.uniform(maf.low, maf.high);
    return f;
}

GenotypeMatrix simulate_genotypes(Eigen::Index n, Eigen::Index p, MafRange maf, double ld_decay,
                                  std::uint64_t seed) {
    if (n < 2 || p < 1) {
        throw Error(ErrorKind::dimension,
                    fmt::format("simulate_genotypes: need n >= 2 and p >= 1, got n={}, p={}", n, p));
    }
    check_maf_range(maf);
    if (std::isnan(ld_decay) || ld_decay < 0.0) {
        throw Error(ErrorKind::parameter, "ld_decay must be >= 0");
    }

    const auto freq = draw_allele_frequencies(p, maf, seed);
    const boost::math::normal_distribution<double> std_normal;
    Eigen::VectorXd thresholds(p);
    for (Eigen::Index k = 0; k < p; ++k) {
        thresholds(k) = boost::math::quantile(std_normal, freq[static_cast<std::size_t>(k)]);
    }
    const double rho = std::isinf(ld_decay) ? 0.0 : std::exp(-ld_decay);
    const double innov = std::sqrt(std::max(0.0, 1.0 - rho * rho));

    Rng rng(derive_seed(seed, 1));
    Eigen::MatrixXd dosages = Eigen::MatrixXd::Zero(n, p);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (int hap = 0; hap < 2; ++hap) {
            double z = rng.normal();
            for (Eigen::Index k = 0; k < p; ++k) {
                if (k > 0) z = rho * z + innov * rng.normal();
                if (z < thresholds(k)) dosages(i, k) += 1.0;
            }
        }
    }
    return GenotypeMatrix(std::move(dosages));
}

// ---------------------------------------------------------------------------

TableFormat format_for(const std::filesystem::path& path) {
    const auto ext = path.extension().string();
    return (ext == ".tsv" || ext == ".txt") ? TableFormat::tsv : TableFormat::csv;
}

namespace {

std::vector<std::string_view> split_line(std::string_view line, char delim) {
    std::vector<std::string_view> cells;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(delim, start);
        if (pos == std::string_view::npos) {
            cells.push_back(line.substr(start));
            break;
        }
        cells.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return cells;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

std::optional<double> parse_number(std::string_view s) {
    s = trim(s);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    if (s.empty()) return std::nullopt;
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

}  // namespace

Table parse_table(const std::string& text, TableFormat format) {
    const char delim = format == TableFormat::csv ? ',' : '\t';
    std::vector<std::vector<double>> rows;
    Table table;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    std::size_t width = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto cells = split_line(line, delim);
        if (rows.empty() && table.header.empty()) {
            bool any_numeric = false;
            for (auto c : cells) any_numeric = any_numeric || parse_number(c).has_value();
            if (!any_numeric) {
                for (auto c : cells) table.header.emplace_back(trim(c));
                width = cells.size();
                continue;
            }
        }
        if (width == 0) width = cells.size();
        if (cells.size() != width) {
            throw Error(ErrorKind::parse,
                        fmt::format("row {}: expected {} columns, found {}", line_no, width,
                                    cells.size()));
        }
        std::vector<double> row(width);
        for (std::size_t c = 0; c < width; ++c) {
            const auto v = parse_number(cells[c]);
            if (!v) {
                throw Error(ErrorKind::parse,
                            fmt::format("row {}, column {}: non-numeric cell '{}'", line_no, c + 1,
                                        std::string(trim(cells[c]))));
            }
            row[c] = *v;
        }
        rows.push_back(std::move(row));
    }
    table.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t c = 0; c < width; ++c) {
            table.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
        }
    }
    return table;
}

Table load_table(const std::filesystem::path& path) { return load_table(path, format_for(path)); }

Table load_table(const std::filesystem::path& path, TableFormat format) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::io, fmt::format("cannot open '{}'", path.string()));
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return parse_table(ss.str(), format);
    } catch (const Error& e) {
        throw Error(e.kind(), fmt::format("{}: {}", path.string(), e.what()));
    }
}

std::string format_table(const Eigen::MatrixXd& values, TableFormat format,
                         const std::vector<std::string>& header) {
    const char delim = format == TableFormat::csv ? ',' : '\t';
    std::string out;
    if (!header.empty()) {
        out += fmt::format("{}\n", fmt::join(header, std::string(1, delim)));
    }
    for (Eigen::Index i = 0; i < values.rows(); ++i) {
        for (Eigen::Index j = 0; j < values.cols(); ++j) {
            if (j > 0) out += delim;
            out += fmt::format("{:.17g}", values(i, j));
        }
        out += '\n';
    }
    return out;
}

void save_table(const std::filesystem::path& path, const Eigen::MatrixXd& values,
                const std::vector<std::string>& header) {
    write_file_atomic(path, format_table(values, format_for(path), header));
}

GenotypeMatrix load_genotypes(const std::filesystem::path& path) {
    return GenotypeMatrix(load_table(path).values);
}

PhenotypeVector load_phenotype(const std::filesystem::path& path) {
    auto t = load_table(path);
    if (t.values.cols() == 1) return PhenotypeVector(t.values.col(0));
    if (t.values.rows() == 1) return PhenotypeVector(t.values.row(0).transpose());
    throw Error(ErrorKind::dimension,
                fmt::format("{}: phenotype file must have one column, got {}x{}", path.string(),
                            t.values.rows(), t.values.cols()));
}

CovariateDesign load_covariates(const std::filesystem::path& path, bool add_intercept) {
    auto t = load_table(path);
    return add_intercept ? CovariateDesign::with_intercept(t.values) : CovariateDesign(t.values);
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorKind::io, fmt::format("cannot write '{}'", tmp.string()));
        out << contents;
        if (!out) throw Error(ErrorKind::io, fmt::format("write failed for '{}'", tmp.string()));
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        throw Error(ErrorKind::io,
                    fmt::format("cannot move '{}' into place: {}", path.string(), ec.message()));
    }
}

}  // namespace ntkgen
