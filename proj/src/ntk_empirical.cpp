#include "ntkgen/ntk_empirical.hpp"

#include "ntkgen/errors.hpp"
#include "ntkgen/rng.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

namespace ntkgen {

WideMlp::WideMlp(Eigen::Index input_dim, Eigen::Index width, int depth, std::uint64_t seed)
    : input_dim_(input_dim), width_(width), seed_(seed) {
    if (input_dim < 1 || width < 1 || depth < 2) {
        throw Error(ErrorKind::parameter,
                    fmt::format("WideMlp needs p >= 1, m >= 1, L >= 2 (got p={}, m={}, L={})",
                                input_dim, width, depth));
    }
    Rng rng(seed);
    Eigen::Index fan_in = input_dim;
    for (int l = 1; l < depth; ++l) {
        Eigen::MatrixXd w(width, fan_in);
        for (Eigen::Index j = 0; j < w.cols(); ++j) {
            for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = rng.normal();
        }
        hidden_.push_back(std::move(w));
        fan_in = width;
    }
    output_.resize(width);
    for (Eigen::Index i = 0; i < width; ++i) output_(i) = rng.normal();
}

std::vector<Eigen::Index> WideMlp::widths() const {
    std::vector<Eigen::Index> w{input_dim_};
    for (std::size_t l = 0; l < hidden_.size(); ++l) w.push_back(width_);
    w.push_back(1);
    return w;
}

Eigen::Index WideMlp::num_params() const noexcept {
    Eigen::Index total = output_.size();
    for (const auto& w : hidden_) total += w.size();
    return total;
}

double WideMlp::hidden_scale() const noexcept {
    return std::sqrt(2.0 / static_cast<double>(width_));
}

double WideMlp::output_scale() const noexcept {
    return 1.0 / std::sqrt(static_cast<double>(width_));
}

Eigen::VectorXd WideMlp::flat_params() const {
    Eigen::VectorXd theta(num_params());
    Eigen::Index off = 0;
    for (const auto& w : hidden_) {
        theta.segment(off, w.size()) = Eigen::Map<const Eigen::VectorXd>(w.data(), w.size());
        off += w.size();
    }
    theta.tail(output_.size()) = output_;
    return theta;
}

void WideMlp::set_flat_params(const Eigen::VectorXd& theta) {
    if (theta.size() != num_params()) {
        throw Error(ErrorKind::dimension, fmt::format("expected {} parameters, got {}",
                                                      num_params(), theta.size()));
    }
    Eigen::Index off = 0;
    for (auto& w : hidden_) {
        Eigen::Map<Eigen::VectorXd>(w.data(), w.size()) = theta.segment(off, w.size());
        off += w.size();
    }
    output_ = theta.tail(output_.size());
}

ForwardCache forward(const WideMlp& net, const Eigen::Ref<const Eigen::VectorXd>& x) {
    if (x.size() != net.input_dim()) {
        throw Error(ErrorKind::dimension, fmt::format("forward: input has {} features, network expects {}",
                                                      x.size(), net.input_dim()));
    }
    ForwardCache cache;
    cache.activations.emplace_back(x);
    const double s = net.hidden_scale();
    for (const auto& w : net.hidden_weights()) {
        Eigen::VectorXd z = w * cache.activations.back();
        cache.activations.emplace_back(s * z.cwiseMax(0.0));
        cache.pre_activations.push_back(std::move(z));
    }
    cache.output = net.output_scale() * net.output_weights().dot(cache.activations.back());
    return cache;
}

Eigen::VectorXd param_gradient(const WideMlp& net, const Eigen::Ref<const Eigen::VectorXd>& x) {
    return param_gradient(net, forward(net, x));
}

Eigen::VectorXd param_gradient(const WideMlp& net, const ForwardCache& cache) {
    const auto& hidden = net.hidden_weights();
    Eigen::VectorXd grad(net.num_params());
    const double s = net.hidden_scale();
    grad.tail(net.width()) = net.output_scale() * cache.activations.back();

    Eigen::VectorXd upstream = net.output_scale() * net.output_weights();  // df/dh_{L-1}
    Eigen::Index end = grad.size() - net.width();
    for (std::size_t l = hidden.size(); l-- > 0;) {
        const Eigen::VectorXd& z = cache.pre_activations[l];
        Eigen::VectorXd delta = upstream.array() * (z.array() > 0.0).cast<double>() * s;
        const Eigen::VectorXd& h_in = cache.activations[l];
        const Eigen::Index size = hidden[l].size();
        Eigen::Map<Eigen::MatrixXd>(grad.data() + end - size, hidden[l].rows(), hidden[l].cols()) =
            delta * h_in.transpose();
        end -= size;
        if (l > 0) upstream = hidden[l].transpose() * delta;
    }
    return grad;
}

std::string to_string(NtkMethod m) { return m == NtkMethod::jacobian ? "jacobian" : "layerwise"; }

NtkMethod ntk_method_from_string(const std::string& s) {
    if (s == "jacobian") return NtkMethod::jacobian;
    if (s == "layerwise") return NtkMethod::layerwise;
    throw Error(ErrorKind::config, fmt::format("unknown NTK method '{}'", s));
}

void NtkBuildConfig::validate() const {
    if (width < 1) throw Error(ErrorKind::parameter, "NTK width must be >= 1");
    if (depth < 2) throw Error(ErrorKind::parameter, "NTK depth must be >= 2");
    if (chunk_size < 1) throw Error(ErrorKind::parameter, "chunk size must be >= 1");
    if (num_inits < 1) throw Error(ErrorKind::parameter, "number of initializations must be >= 1");
}

nlohmann::json NtkBuildConfig::to_json() const {
    return {{"width", width},
            {"depth", depth},
            {"chunk_size", chunk_size},
            {"num_inits", num_inits},
            {"seed", seed},
            {"method", to_string(method)},
            {"normalization", to_string(normalization)}};
}

NtkBuildConfig NtkBuildConfig::from_json(const nlohmann::json& j) {
    NtkBuildConfig c;
    try {
        c.width = j.value("width", c.width);
        c.depth = j.value("depth", c.depth);
        c.chunk_size = j.value("chunk_size", c.chunk_size);
        c.num_inits = j.value("num_inits", c.num_inits);
        c.seed = j.value("seed", c.seed);
        if (j.contains("method")) c.method = ntk_method_from_string(j.at("method").get<std::string>());
        if (j.contains("normalization")) {
            c.normalization = normalization_from_string(j.at("normalization").get<std::string>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::config, fmt::format("NTK build config: {}", e.what()));
    }
    c.validate();
    return c;
}

NtkBuildConfig default_ntk_config(Eigen::Index p, std::uint64_t seed) {
    NtkBuildConfig c;
    if (p < 50) {
        c.width = 2000;
        c.depth = 2;
    } else {
        c.width = 1000;
        c.depth = 3;
    }
    c.seed = seed;
    return c;
}

namespace {

// Flat gradients for rows [begin, end) of x, one column per sample.
Eigen::MatrixXd jacobian_chunk(const WideMlp& net, const Eigen::MatrixXd& x, Eigen::Index begin,
                               Eigen::Index end) {
    Eigen::MatrixXd jac(net.num_params(), end - begin);
    for (Eigen::Index i = begin; i < end; ++i) {
        jac.col(i - begin) = param_gradient(net, x.row(i).transpose());
        if (!jac.col(i - begin).allFinite()) {
            throw Error(ErrorKind::numeric,
                        fmt::format("empirical_ntk: non-finite Jacobian for sample {}", i + 1));
        }
    }
    return jac;
}

void accumulate_jacobian(const WideMlp& net, const Eigen::MatrixXd& x, Eigen::Index chunk,
                         Eigen::MatrixXd& k) {
    const Eigen::Index n = x.rows();
    for (Eigen::Index i0 = 0; i0 < n; i0 += chunk) {
        const Eigen::Index i1 = std::min(i0 + chunk, n);
        const Eigen::MatrixXd j1 = jacobian_chunk(net, x, i0, i1);
        k.block(i0, i0, i1 - i0, i1 - i0).noalias() += j1.transpose() * j1;
        for (Eigen::Index j0 = i1; j0 < n; j0 += chunk) {
            const Eigen::Index j1e = std::min(j0 + chunk, n);
            const Eigen::MatrixXd j2 = jacobian_chunk(net, x, j0, j1e);
            const Eigen::MatrixXd blk = j1.transpose() * j2;
            k.block(i0, j0, i1 - i0, j1e - j0) += blk;
            k.block(j0, i0, j1e - j0, i1 - i0) += blk.transpose();
        }
    }
}

void accumulate_layerwise(const WideMlp& net, const Eigen::MatrixXd& x, Eigen::MatrixXd& k) {
    const auto& hidden = net.hidden_weights();
    const double s = net.hidden_scale();
    std::vector<Eigen::MatrixXd> acts{x};  // rows are samples
    std::vector<Eigen::MatrixXd> pre;
    for (const auto& w : hidden) {
        Eigen::MatrixXd z = acts.back() * w.transpose();
        acts.emplace_back(s * z.cwiseMax(0.0));
        pre.push_back(std::move(z));
    }
    auto gram = [](const Eigen::MatrixXd& a) {
        Eigen::MatrixXd g = Eigen::MatrixXd::Zero(a.rows(), a.rows());
        g.selfadjointView<Eigen::Upper>().rankUpdate(a);
        g.triangularView<Eigen::StrictlyLower>() = g.transpose();
        return g;
    };
    const double os = net.output_scale();
    Eigen::MatrixXd contrib = os * os * gram(acts.back());
    Eigen::MatrixXd upstream = (os * net.output_weights()).transpose().replicate(x.rows(), 1);
    for (std::size_t l = hidden.size(); l-- > 0;) {
        Eigen::MatrixXd delta = upstream.array() * (pre[l].array() > 0.0).cast<double>() * s;
        contrib.array() += gram(delta).array() * gram(acts[l]).array();
        if (l > 0) upstream = delta * hidden[l];
    }
    k += contrib;
}

// Gradient entries can be finite while their squared norm overflows.
void check_diagonal(const Eigen::MatrixXd& k) {
    for (Eigen::Index i = 0; i < k.rows(); ++i) {
        if (!std::isfinite(k(i, i))) {
            throw Error(ErrorKind::numeric,
                        fmt::format("empirical_ntk: non-finite Jacobian for sample {}", i + 1));
        }
    }
}

}  // namespace

Eigen::MatrixXd empirical_ntk_gram(const Eigen::MatrixXd& x, const NtkBuildConfig& cfg) {
    cfg.validate();
    const Eigen::Index n = x.rows();
    Eigen::MatrixXd k = Eigen::MatrixXd::Zero(n, n);
    for (int s = 0; s < cfg.num_inits; ++s) {
        const WideMlp net(x.cols(), cfg.width, cfg.depth, derive_seed(cfg.seed, static_cast<std::uint64_t>(s)));
        if (cfg.method == NtkMethod::jacobian) {
            accumulate_jacobian(net, x, cfg.chunk_size, k);
        } else {
            accumulate_layerwise(net, x, k);
        }
        check_diagonal(k);
    }
    k /= static_cast<double>(cfg.num_inits);
    return k;
}

KernelMatrix empirical_ntk(const GenotypeMatrix& geno, const NtkBuildConfig& cfg) {
    Eigen::MatrixXd k = empirical_ntk_gram(geno.values(), cfg);
    Eigen::MatrixXd sym = 0.5 * (k + k.transpose());
    if (cfg.normalization == NtkNormalization::unit_diagonal_over_p) {
        sym = normalize_unit_diagonal_over_p(sym, geno.p());
    }
    auto params = cfg.to_json();
    params["p"] = geno.p();
    return KernelMatrix(std::move(sym), KernelKind::ntk_empirical, std::move(params));
}

// ---------------------------------------------------------------------------

std::vector<double> WidthConvergenceReport::ratios(int depth) const {
    std::vector<double> med;
    for (const auto& s : summary) {
        if (s.depth == depth) med.push_back(s.median_dev);
    }
    std::vector<double> out;
    for (std::size_t i = 0; i + 1 < med.size(); ++i) out.push_back(med[i] / med[i + 1]);
    return out;
}

nlohmann::json WidthConvergenceReport::to_json() const {
    nlohmann::json j;
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) {
        j["rows"].push_back({{"depth", r.depth}, {"width", r.width}, {"seed", r.seed},
                             {"max_abs_dev", r.max_abs_dev}});
    }
    j["summary"] = nlohmann::json::array();
    for (const auto& s : summary) {
        j["summary"].push_back({{"depth", s.depth}, {"width", s.width}, {"median_dev", s.median_dev},
                                {"mean_dev", s.mean_dev}});
    }
    return j;
}

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t h = v.size() / 2;
    return v.size() % 2 == 1 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

}  // namespace

WidthConvergenceReport width_convergence_report(const GenotypeMatrix& geno,
                                                std::span<const int> depths,
                                                std::span<const Eigen::Index> widths,
                                                std::span<const std::uint64_t> seeds,
                                                const WidthConvergenceOptions& opts) {
    if (opts.analytic_normalization != opts.empirical_normalization) {
        throw Error(ErrorKind::config,
                    "width convergence: analytic and empirical kernels use different normalizations");
    }
    const bool raw = opts.empirical_normalization == NtkNormalization::raw;
    if (raw && opts.base_scaling != BaseScaling::inner_product) {
        throw Error(ErrorKind::config,
                    "width convergence: raw comparison requires the inner_product base case, which "
                    "is what the network computes");
    }
    if (seeds.empty() || widths.empty() || depths.empty()) {
        throw Error(ErrorKind::parameter, "width convergence: empty sweep");
    }

    WidthConvergenceReport report;
    for (int depth : depths) {
        NtkArchitecture arch = opts.analytic;
        arch.depth = depth;
        const KernelMatrix analytic = ntk_analytic(geno, arch, opts.base_scaling, opts.analytic_normalization);
        for (Eigen::Index width : widths) {
            std::vector<double> devs;
            for (std::uint64_t seed : seeds) {
                NtkBuildConfig cfg;
                cfg.width = width;
                cfg.depth = depth;
                cfg.seed = seed;
                cfg.method = opts.method;
                cfg.chunk_size = opts.chunk_size;
                cfg.normalization = opts.empirical_normalization;
                Eigen::MatrixXd emp = empirical_ntk(geno, cfg).values();
                if (raw) emp *= static_cast<double>(width);
                const double dev = (emp - analytic.values()).cwiseAbs().maxCoeff();
                report.rows.push_back({depth, width, seed, dev});
                devs.push_back(dev);
            }
            double mean = 0.0;
            for (double d : devs) mean += d;
            report.summary.push_back({depth, width, median(devs), mean / static_cast<double>(devs.size())});
        }
    }
    return report;
}

}  // namespace ntkgen
