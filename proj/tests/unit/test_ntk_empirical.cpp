#include "doctest.h"

#include "ntkgen/kernels.hpp"
#include "ntkgen/ntk_empirical.hpp"
#include "ntkgen/rng.hpp"

#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

using namespace ntkgen;

namespace {

double naive_forward(const WideMlp& net, const Eigen::VectorXd& x) {
    const double m = static_cast<double>(net.width());
    std::vector<double> h(x.data(), x.data() + x.size());
    for (const auto& w : net.hidden_weights()) {
        std::vector<double> next(static_cast<std::size_t>(w.rows()), 0.0);
        for (Eigen::Index r = 0; r < w.rows(); ++r) {
            double z = 0.0;
            for (Eigen::Index c = 0; c < w.cols(); ++c) z += w(r, c) * h[static_cast<std::size_t>(c)];
            next[static_cast<std::size_t>(r)] = std::sqrt(2.0 / m) * (z > 0.0 ? z : 0.0);
        }
        h = std::move(next);
    }
    double out = 0.0;
    for (Eigen::Index r = 0; r < net.output_weights().size(); ++r)
        out += net.output_weights()(r) * h[static_cast<std::size_t>(r)];
    return out / std::sqrt(m);
}

// Unchunked Gram of flat gradients: build the full Jacobian, multiply once.
Eigen::MatrixXd gram_oracle(const Eigen::MatrixXd& x, const NtkBuildConfig& cfg) {
    Eigen::MatrixXd total = Eigen::MatrixXd::Zero(x.rows(), x.rows());
    for (int s = 0; s < cfg.num_inits; ++s) {
        const WideMlp net(x.cols(), cfg.width, cfg.depth, derive_seed(cfg.seed, static_cast<std::uint64_t>(s)));
        Eigen::MatrixXd jac(x.rows(), net.num_params());
        for (Eigen::Index i = 0; i < x.rows(); ++i) jac.row(i) = param_gradient(net, x.row(i).transpose()).transpose();
        total += jac * jac.transpose();
    }
    return total / cfg.num_inits;
}

double max_abs(const Eigen::MatrixXd& m) { return m.cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("network shapes and parameter layout") {
    const WideMlp net(5, 16, 3, 1);
    CHECK(net.widths() == std::vector<Eigen::Index>{5, 16, 16, 1});
    CHECK(net.num_params() == 16 * 5 + 16 * 16 + 16);
    CHECK(net.depth() == 3);
    const Eigen::VectorXd theta = net.flat_params();
    CHECK(theta.size() == net.num_params());
    CHECK(theta(1) == net.hidden_weights()[0](1, 0));
    CHECK(theta(theta.size() - 1) == net.output_weights()(15));
    WideMlp copy(5, 16, 3, 2);
    copy.set_flat_params(theta);
    CHECK(copy.flat_params() == theta);
    CHECK(testing::error_kind([&] { copy.set_flat_params(Eigen::VectorXd::Zero(3)); }) == ErrorKind::dimension);
}

TEST_CASE("forward pass basics") {
    WideMlp net(4, 32, 3, 7);
    CHECK(forward(net, Eigen::VectorXd::Zero(4)).output == 0.0);
    const Eigen::VectorXd x = testing::random_normal(4, 1, 3);
    const double f = forward(net, x).output;
    net.output_weights() *= 2.0;
    CHECK(forward(net, x).output == 2.0 * f);
    CHECK(testing::error_kind([&] { (void)forward(net, Eigen::VectorXd::Zero(3)); }) == ErrorKind::dimension);
}

TEST_CASE("forward matches a naive evaluator") {
    for (int depth : {2, 3, 4}) {
        const WideMlp net(6, 24, depth, 11 + static_cast<std::uint64_t>(depth));
        for (std::uint64_t s = 0; s < 5; ++s) {
            const Eigen::VectorXd x = testing::random_normal(6, 1, 100 + s);
            CHECK(std::abs(forward(net, x).output - naive_forward(net, x)) < 1e-12);
        }
    }
}

TEST_CASE("gradient coordinates match central differences") {
    const WideMlp net(5, 16, 3, 21);
    const Eigen::VectorXd theta = net.flat_params();
    const double h = 1e-6;
    for (std::uint64_t s = 0; s < 3; ++s) {
        const Eigen::VectorXd x = testing::random_normal(5, 1, 200 + s);
        const Eigen::VectorXd grad = param_gradient(net, x);
        WideMlp probe = net;
        double worst = 0.0;
        for (Eigen::Index k = 0; k < theta.size(); ++k) {
            Eigen::VectorXd t = theta;
            t(k) += h;
            probe.set_flat_params(t);
            const double up = forward(probe, x).output;
            t(k) -= 2 * h;
            probe.set_flat_params(t);
            const double down = forward(probe, x).output;
            const double fd = (up - down) / (2 * h);
            // Roundoff in the difference quotient is ~1e-10 absolute.
            worst = std::max(worst, std::abs(fd - grad(k)) / std::max(std::abs(grad(k)), 1e-3));
        }
        CHECK(worst < 1e-6);
    }
}

TEST_CASE("output-weight gradient is the scaled last activation") {
    const WideMlp net(5, 16, 3, 4);
    const Eigen::VectorXd x = testing::random_normal(5, 1, 5);
    const auto cache = forward(net, x);
    const Eigen::VectorXd grad = param_gradient(net, x);
    const Eigen::VectorXd tail = grad.tail(16);
    CHECK(tail == cache.activations.back() / std::sqrt(16.0));
    CHECK(param_gradient(net, cache) == grad);

    const Eigen::VectorXd g0 = param_gradient(net, Eigen::VectorXd::Zero(5));
    CHECK(g0.head(g0.size() - 16).isZero(0.0));
}

TEST_CASE("chunked assembly matches the unchunked oracle for every chunk size") {
    const Eigen::MatrixXd x = testing::random_normal(8, 4, 31);
    NtkBuildConfig cfg;
    cfg.width = 64;
    cfg.depth = 3;
    cfg.seed = 5;
    const Eigen::MatrixXd oracle = gram_oracle(x, cfg);
    for (Eigen::Index c : {1, 3, 8, 50}) {
        cfg.chunk_size = c;
        cfg.method = NtkMethod::jacobian;
        CHECK(max_abs(empirical_ntk_gram(x, cfg) - oracle) < 1e-10);
    }
    cfg.method = NtkMethod::layerwise;
    CHECK(max_abs(empirical_ntk_gram(x, cfg) - oracle) < 1e-10);

    cfg.num_inits = 3;
    cfg.method = NtkMethod::jacobian;
    CHECK(max_abs(empirical_ntk_gram(x, cfg) - gram_oracle(x, cfg)) < 1e-10);
    cfg.method = NtkMethod::layerwise;
    CHECK(max_abs(empirical_ntk_gram(x, cfg) - gram_oracle(x, cfg)) < 1e-10);
}

TEST_CASE("normalized empirical kernel properties") {
    Eigen::MatrixXd x = testing::random_normal(9, 5, 41);
    x.row(4) = x.row(1);
    NtkBuildConfig cfg;
    cfg.width = 128;
    cfg.depth = 3;
    cfg.seed = 9;
    const auto k = empirical_ntk(GenotypeMatrix(x), cfg);
    for (Eigen::Index i = 0; i < 9; ++i) CHECK(std::abs(k.values()(i, i) - 0.2) < 1e-15);
    CHECK(std::abs(k.values()(1, 4) - k.values()(1, 1)) < 1e-15);
    CHECK(k.values() == k.values().transpose());
    const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(k.values()).eigenvalues();
    CHECK(ev.minCoeff() >= -1e-8 * ev.maxCoeff());
    CHECK(k.params().at("width") == 128);
    CHECK(k.params().at("p") == 5);

    cfg.normalization = NtkNormalization::raw;
    const auto raw = empirical_ntk(GenotypeMatrix(x), cfg);
    CHECK(raw.values()(1, 4) == doctest::Approx(raw.values()(1, 1)).epsilon(1e-12));
}

TEST_CASE("same seed gives a bit-identical kernel") {
    const GenotypeMatrix g(testing::random_normal(6, 3, 51));
    NtkBuildConfig cfg;
    cfg.width = 32;
    cfg.seed = 77;
    CHECK(empirical_ntk(g, cfg).values() == empirical_ntk(g, cfg).values());
    NtkBuildConfig other = cfg;
    other.seed = 78;
    CHECK(empirical_ntk(g, cfg).values() != empirical_ntk(g, other).values());
}

TEST_CASE("non-finite gradients are numeric errors naming the sample") {
    Eigen::MatrixXd x = testing::random_normal(3, 2, 61);
    x.row(1) *= 1e300;
    NtkBuildConfig cfg;
    cfg.width = 16;
    cfg.depth = 3;
    for (auto method : {NtkMethod::jacobian, NtkMethod::layerwise}) {
        cfg.method = method;
        try {
            (void)empirical_ntk_gram(x, cfg);
            FAIL("overflow accepted");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::numeric);
            CHECK(std::string(e.what()).find("sample 2") != std::string::npos);
        }
    }
}

TEST_CASE("default architecture follows the p < 50 rule") {
    const auto small = default_ntk_config(4);
    CHECK(small.width == 2000);
    CHECK(small.depth == 2);
    const auto edge = default_ntk_config(49);
    CHECK(edge.width == 2000);
    const auto large = default_ntk_config(50);
    CHECK(large.width == 1000);
    CHECK(large.depth == 3);
    CHECK(default_ntk_config(100).depth == 3);
    CHECK(small.num_inits == 1);
}

TEST_CASE("build config validation and JSON round trip") {
    NtkBuildConfig cfg;
    cfg.width = 0;
    CHECK(testing::error_kind([&] { cfg.validate(); }) == ErrorKind::parameter);
    cfg.width = 10;
    cfg.chunk_size = 0;
    CHECK(testing::error_kind([&] { cfg.validate(); }) == ErrorKind::parameter);
    cfg.chunk_size = 4;
    cfg.num_inits = 0;
    CHECK(testing::error_kind([&] { cfg.validate(); }) == ErrorKind::parameter);
    cfg.num_inits = 2;
    cfg.method = NtkMethod::layerwise;
    const auto back = NtkBuildConfig::from_json(cfg.to_json());
    CHECK(back.width == 10);
    CHECK(back.num_inits == 2);
    CHECK(back.method == NtkMethod::layerwise);
    CHECK(testing::error_kind([] { (void)NtkBuildConfig::from_json({{"method", "magic"}}); }) == ErrorKind::config);
}

TEST_CASE("width convergence on a single input has zero normalized deviation") {
    const GenotypeMatrix one(testing::random_normal(2, 3, 71).topRows(2));
    const std::vector<int> depths{3};
    const std::vector<Eigen::Index> widths{16, 64};
    const std::vector<std::uint64_t> seeds{1, 2};
    Eigen::MatrixXd same(2, 3);
    same.row(0) = one.values().row(0);
    same.row(1) = one.values().row(0);
    const auto rep = width_convergence_report(GenotypeMatrix(same), depths, widths, seeds);
    for (const auto& r : rep.rows) CHECK(r.max_abs_dev < 1e-14);
}

TEST_CASE("width convergence deviation shrinks with width") {
    const GenotypeMatrix g(testing::random_normal(8, 5, 81));
    const std::vector<int> depths{2, 3};
    const std::vector<Eigen::Index> widths{64, 1024};
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    const auto rep = width_convergence_report(g, depths, widths, seeds);
    REQUIRE(rep.summary.size() == 4);
    for (int d : depths) {
        const auto r = rep.ratios(d);
        REQUIRE(r.size() == 1);
        CHECK(r[0] > 1.0);
    }
    CHECK(rep.to_json().at("rows").size() == 20);

    WidthConvergenceOptions raw;
    raw.analytic_normalization = NtkNormalization::raw;
    raw.empirical_normalization = NtkNormalization::raw;
    const auto rep_raw = width_convergence_report(g, depths, widths, seeds, raw);
    for (int d : depths) CHECK(rep_raw.ratios(d)[0] > 1.0);
}

TEST_CASE("mismatched normalizations are configuration errors") {
    const GenotypeMatrix g(testing::random_normal(4, 3, 91));
    const std::vector<int> depths{2};
    const std::vector<Eigen::Index> widths{16};
    const std::vector<std::uint64_t> seeds{1};
    WidthConvergenceOptions opts;
    opts.empirical_normalization = NtkNormalization::raw;
    CHECK(testing::error_kind([&] { (void)width_convergence_report(g, depths, widths, seeds, opts); }) ==
          ErrorKind::config);
    WidthConvergenceOptions raw_over_p;
    raw_over_p.analytic_normalization = NtkNormalization::raw;
    raw_over_p.empirical_normalization = NtkNormalization::raw;
    raw_over_p.base_scaling = BaseScaling::inner_product_over_p;
    CHECK(testing::error_kind([&] { (void)width_convergence_report(g, depths, widths, seeds, raw_over_p); }) ==
          ErrorKind::config);
}
