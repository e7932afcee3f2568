#pragma once

#include "json.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace ntkgen {

struct TrainConfig {
    std::vector<int> hidden{50, 30};
    double dropout_rate = 0.2;
    double weight_decay = 1e-3;
    double learning_rate = 1e-3;
    int batch_size = 32;
    int max_epochs = 200;
    int patience = 20;
    double val_fraction = 0.1;
    std::uint64_t seed = 0;

    void validate() const;
    [[nodiscard]] nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct DenseLayer {
    Eigen::MatrixXd weight;  // out x in
    Eigen::VectorXd bias;
};

/// ReLU MLP regressor. Inputs are standardized with the training-set
/// feature statistics and the output is mapped back to the target scale.
struct MlpModel {
    std::vector<DenseLayer> layers;
    Eigen::VectorXd feature_mean;
    Eigen::VectorXd feature_scale;
    double target_mean = 0.0;
    double target_scale = 1.0;

    [[nodiscard]] Eigen::Index input_dim() const { return feature_mean.size(); }
    [[nodiscard]] Eigen::Index num_params() const;
    [[nodiscard]] Eigen::VectorXd flat_params() const;
    void set_flat_params(const Eigen::VectorXd& theta);

    [[nodiscard]] nlohmann::json to_json() const;
    static MlpModel from_json(const nlohmann::json& j);
};

/// Fresh network: weights N(0, 1/fan_in), zero biases, identity
/// input/target scaling.
[[nodiscard]] MlpModel init_mlp(Eigen::Index input_dim, const std::vector<int>& hidden,
                                std::uint64_t seed);

struct EpochLog {
    int epoch;
    double train_mse;
    double val_mse;
};

struct TrainResult {
    MlpModel model;
    std::vector<EpochLog> log;
    int best_epoch = 0;  // 0 when no epoch ran
    double best_val_mse = 0.0;

    [[nodiscard]] std::string log_csv() const;
};

[[nodiscard]] TrainResult train_mlp(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                    const TrainConfig& cfg);

/// Deterministic forward pass with dropout disabled.
[[nodiscard]] Eigen::VectorXd predict_mlp(const MlpModel& model, const Eigen::MatrixXd& x);

/// Mean squared error (on the model's internal target scale) of the rows in
/// `rows`, without dropout; the gradient is w.r.t. flat_params().
[[nodiscard]] double minibatch_loss(const MlpModel& model, const Eigen::MatrixXd& x,
                                    const Eigen::VectorXd& y);
[[nodiscard]] Eigen::VectorXd minibatch_gradient(const MlpModel& model, const Eigen::MatrixXd& x,
                                                 const Eigen::VectorXd& y);

}  // namespace ntkgen
