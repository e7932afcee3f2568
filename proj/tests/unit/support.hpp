#pragma once

#include "ntkgen/errors.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>

namespace testing {

inline Eigen::MatrixXd random_normal(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> d;
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = d(gen);
    return m;
}

inline Eigen::MatrixXd random_dosages(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::uniform_int_distribution<int> d(0, 2);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j) {
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = d(gen);
        m(0, j) = 0.0;
        m(1, j) = 2.0;
    }
    return m;
}

inline Eigen::MatrixXd random_spd(Eigen::Index n, std::uint64_t seed, double ridge = 0.1) {
    const Eigen::MatrixXd a = random_normal(n, n, seed);
    return a * a.transpose() / static_cast<double>(n) + ridge * Eigen::MatrixXd::Identity(n, n);
}

/// Kind of the ntkgen::Error thrown by `f`, or nullopt if it returns.
template <typename F>
std::optional<ntkgen::ErrorKind> error_kind(F&& f) {
    try {
        f();
    } catch (const ntkgen::Error& e) {
        return e.kind();
    }
    return std::nullopt;
}

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("ntkgen_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    [[nodiscard]] const std::filesystem::path& path() const { return path_; }
    [[nodiscard]] std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

}  // namespace testing
