#include "doctest.h"

#include "ntkgen/kernels.hpp"

#include "support.hpp"

#include <cmath>
#include <numbers>

using namespace ntkgen;

namespace {

constexpr double pi = std::numbers::pi;

Eigen::MatrixXd grm_oracle(const Eigen::MatrixXd& x) {
    const Eigen::Index n = x.rows();
    const Eigen::Index p = x.cols();
    Eigen::MatrixXd k = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index c = 0; c < p; ++c) {
        double mu = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) mu += x(i, c);
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) var += (x(i, c) - mu) * (x(i, c) - mu);
        var /= static_cast<double>(n);
        if (var == 0.0) continue;
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < n; ++j) k(i, j) += (x(i, c) - mu) * (x(j, c) - mu) / var;
    }
    return k / static_cast<double>(p);
}

// Scalar NTK recursion for one pair, written out from the closed forms.
double ntk_pair(const Eigen::VectorXd& a, const Eigen::VectorXd& b, int depth, double c) {
    double sxx = a.dot(a);
    double syy = b.dot(b);
    double sxy = a.dot(b);
    double theta_k = sxy;
    for (int l = 1; l < depth; ++l) {
        const double cosv = std::max(-1.0, std::min(1.0, sxy / std::sqrt(sxx * syy)));
        const double t = std::acos(cosv);
        const double sig = c / (2 * pi) * std::sqrt(sxx * syy) * (std::sin(t) + (pi - t) * std::cos(t));
        const double dot = c * (pi - t) / (2 * pi);
        theta_k = theta_k * dot + sig;
        sxy = sig;
        sxx = c / (2 * pi) * sxx * pi;
        syy = c / (2 * pi) * syy * pi;
    }
    return theta_k;
}

Eigen::MatrixXd two_rows(const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
    Eigen::MatrixXd x(2, 2);
    x.row(0) = a.transpose();
    x.row(1) = b.transpose();
    return x;
}

}  // namespace

TEST_CASE("grm of the two-point fixture") {
    Eigen::MatrixXd x(2, 1);
    x << 0, 2;
    const auto k = grm_kernel(GenotypeMatrix(x));
    Eigen::Matrix2d expect;
    expect << 1, -1, -1, 1;
    CHECK((k.values() - expect).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(k.kind() == KernelKind::grm);
}

TEST_CASE("grm of an all-monomorphic matrix is degenerate") {
    CHECK(testing::error_kind([] { (void)grm_kernel(GenotypeMatrix(Eigen::MatrixXd::Zero(4, 3))); }) ==
          ErrorKind::degenerate_kernel);
}

TEST_CASE("grm matches the triple-loop oracle") {
    for (std::uint64_t seed : {1, 2, 3}) {
        Eigen::MatrixXd x = testing::random_dosages(6, 4, seed);
        const auto k = grm_kernel(GenotypeMatrix(x));
        CHECK((k.values() - grm_oracle(x)).cwiseAbs().maxCoeff() < 1e-12);
    }
    Eigen::MatrixXd with_mono = testing::random_dosages(9, 5, 4);
    with_mono.col(2).setConstant(1.0);
    CHECK((grm_kernel(GenotypeMatrix(with_mono)).values() - grm_oracle(with_mono)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("grm is the same for raw and standardized input") {
    const Eigen::MatrixXd x = testing::random_dosages(12, 6, 5);
    const GenotypeMatrix g(x);
    const auto a = grm_kernel(g).values();
    const auto b = grm_kernel(standardize(g, StandardizeMode::center_scale)).values();
    const auto c = grm_kernel(standardize(g, StandardizeMode::center_only)).values();
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((a - c).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("grm of a fully polymorphic matrix has unit mean diagonal") {
    const Eigen::MatrixXd x = testing::random_dosages(25, 10, 6);
    const auto k = grm_kernel(GenotypeMatrix(x)).values();
    CHECK(std::abs(k.trace() / 25.0 - 1.0) < 1e-10);
    CHECK(k == k.transpose());
    const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(k).eigenvalues();
    CHECK(ev.minCoeff() >= -1e-8 * ev.maxCoeff());
}

TEST_CASE("analytic NTK closed forms at hand-evaluated angles") {
    NtkArchitecture arch;
    const auto raw = [&](const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
        return ntk_analytic_values(two_rows(a, b), arch, BaseScaling::inner_product);
    };
    const auto same = raw({1, 0}, {1, 0});
    CHECK(std::abs(same(0, 1) - 2.0) < 1e-14);
    CHECK(std::abs(same(0, 0) - 2.0) < 1e-14);

    const auto orth = raw({1, 0}, {0, 1});
    CHECK(std::abs(orth(0, 1) - 1.0 / pi) < 1e-14);

    const auto anti = raw({1, 0}, {-1, 0});
    CHECK(std::abs(anti(0, 1)) < 1e-14);

    const auto s0 = arccos_step(1.0, 1.0, 1.0, arch);
    CHECK(std::abs(s0.sigma - 1.0) < 1e-15);
    CHECK(std::abs(s0.sigma_dot - 1.0) < 1e-15);
    const auto s90 = arccos_step(0.0, 1.0, 1.0, arch);
    CHECK(std::abs(s90.sigma - 1.0 / pi) < 1e-15);
    CHECK(std::abs(s90.sigma_dot - 0.5) < 1e-15);
    const auto s180 = arccos_step(-1.0, 1.0, 1.0, arch);
    CHECK(std::abs(s180.sigma) < 1e-15);
    CHECK(std::abs(s180.sigma_dot) < 1e-15);

    NtkArchitecture plain;
    plain.scale_derivative = false;
    CHECK(std::abs(arccos_step(0.0, 1.0, 1.0, plain).sigma_dot - 0.25) < 1e-15);
}

TEST_CASE("analytic NTK matches a scalar recursion oracle") {
    const Eigen::MatrixXd x = testing::random_normal(7, 5, 8);
    for (int depth : {2, 3, 5}) {
        for (double c : {2.0, 1.5}) {
            NtkArchitecture arch;
            arch.depth = depth;
            arch.c_sigma = c;
            const auto k = ntk_analytic_values(x, arch, BaseScaling::inner_product);
            double worst = 0.0;
            for (Eigen::Index i = 0; i < 7; ++i)
                for (Eigen::Index j = 0; j < 7; ++j) {
                    const double o = ntk_pair(x.row(i).transpose(), x.row(j).transpose(), depth, c);
                    worst = std::max(worst, std::abs(k(i, j) - o) / std::max(1.0, std::abs(o)));
                }
            CHECK(worst < 1e-12);
            CHECK(k == k.transpose());
        }
    }
    NtkArchitecture arch;
    const auto over_p = ntk_analytic_values(x, arch, BaseScaling::inner_product_over_p);
    const auto scaled = ntk_analytic_values(x / std::sqrt(5.0), arch, BaseScaling::inner_product);
    CHECK((over_p - scaled).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("analytic NTK is non-increasing in the angle up to 3pi/4") {
    // Past roughly 0.79pi (depth 2) the negative base term <x,x'> lets
    // Theta rise back towards 0 at theta = pi, so the sweep stops at 3pi/4.
    for (int depth : {2, 3, 4, 5}) {
        NtkArchitecture arch;
        arch.depth = depth;
        double prev = std::numeric_limits<double>::infinity();
        for (int s = 0; s <= 300; ++s) {
            const double t = 0.75 * pi * s / 300.0;
            const auto k = ntk_analytic_values(two_rows({1, 0}, {std::cos(t), std::sin(t)}), arch,
                                               BaseScaling::inner_product);
            CHECK(k(0, 1) <= prev + 1e-14);
            prev = k(0, 1);
        }
    }
}

TEST_CASE("arc-cosine step is non-increasing on [0, pi]") {
    NtkArchitecture arch;
    double prev_sigma = std::numeric_limits<double>::infinity();
    double prev_dot = prev_sigma;
    for (int s = 0; s <= 400; ++s) {
        const auto st = arccos_step(std::cos(pi * s / 400.0), 1.0, 1.0, arch);
        CHECK(st.sigma <= prev_sigma + 1e-15);
        CHECK(st.sigma_dot <= prev_dot + 1e-15);
        prev_sigma = st.sigma;
        prev_dot = st.sigma_dot;
    }
}

TEST_CASE("near-collinear rows do not produce NaN") {
    Eigen::MatrixXd x(3, 3);
    x << 1, 2, 3, 1 + 1e-15, 2, 3, 1e8, 2e8, 3e8;
    NtkArchitecture arch;
    arch.depth = 4;
    const auto k = ntk_analytic_values(x, arch, BaseScaling::inner_product);
    CHECK(k.allFinite());
    CHECK(std::abs(arccos_step(1.0 + 1e-13, 1.0, 1.0, arch).sigma - 1.0) < 1e-12);
    CHECK(testing::error_kind([&] { (void)arccos_step(1.1, 1.0, 1.0, arch); }) == ErrorKind::numeric);
}

TEST_CASE("zero-norm rows are rejected by name") {
    Eigen::MatrixXd x = testing::random_normal(4, 3, 2);
    x.row(2).setZero();
    try {
        (void)ntk_analytic_values(x, NtkArchitecture{}, BaseScaling::inner_product);
        FAIL("zero row accepted");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::undefined_angle);
        CHECK(std::string(e.what()).find("row 3") != std::string::npos);
    }
}

TEST_CASE("normalized analytic NTK has diagonal 1/p") {
    const GenotypeMatrix g(testing::random_dosages(10, 4, 12));
    const auto k = ntk_analytic(standardize(g, StandardizeMode::center_only), NtkArchitecture{});
    for (Eigen::Index i = 0; i < 10; ++i) CHECK(std::abs(k.values()(i, i) - 0.25) < 1e-15);
    const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(k.values()).eigenvalues();
    CHECK(ev.minCoeff() >= -1e-8 * ev.maxCoeff());
    CHECK(k.kind() == KernelKind::ntk_analytic);
    CHECK(k.params().at("depth") == 2);
}

TEST_CASE("architecture validation") {
    NtkArchitecture a;
    a.depth = 1;
    CHECK(testing::error_kind([&] { a.validate(); }) == ErrorKind::parameter);
    a.depth = 2;
    a.c_sigma = 0.0;
    CHECK(testing::error_kind([&] { a.validate(); }) == ErrorKind::parameter);
}

TEST_CASE("kernel matrix enforces symmetry") {
    Eigen::Matrix2d m;
    m << 1, 0.5, 0.5 + 1e-14, 1;
    const KernelMatrix k(m, KernelKind::grm);
    CHECK(k.values()(1, 0) == k.values()(0, 1));
    m(1, 0) = 0.6;
    CHECK(testing::error_kind([&] { (void)KernelMatrix(m, KernelKind::grm); }) == ErrorKind::parameter);
    CHECK(testing::error_kind([] { (void)KernelMatrix(Eigen::MatrixXd::Zero(2, 3), KernelKind::grm); }) ==
          ErrorKind::dimension);
    CHECK(testing::error_kind([] { (void)kernel_kind_from_string("rbf"); }) == ErrorKind::config);
}

TEST_CASE("kernel save and load keep kind and parameters") {
    testing::TempDir dir("kernels");
    const GenotypeMatrix g(testing::random_dosages(8, 3, 13));
    const auto k = ntk_analytic(standardize(g, StandardizeMode::center_only), NtkArchitecture{});
    save_kernel(dir / "k.csv", k);
    CHECK(std::filesystem::exists(dir / "k.csv.meta.json"));
    const auto back = load_kernel(dir / "k.csv");
    CHECK(back.values() == k.values());
    CHECK(back.kind() == KernelKind::ntk_analytic);
    CHECK(back.params() == k.params());

    const auto sub = k.sub({1, 3});
    CHECK(sub.n() == 2);
    CHECK(sub.values()(0, 1) == k.values()(1, 3));
    const auto blk = k.block({0, 2}, {5});
    CHECK(blk(1, 0) == k.values()(2, 5));
}
