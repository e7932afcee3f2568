#include "ntkgen/baseline_nn.hpp"

#include "ntkgen/errors.hpp"
#include "ntkgen/rng.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>

namespace ntkgen {

void TrainConfig::validate() const {
    if (hidden.empty()) throw Error(ErrorKind::parameter, "MLP needs at least one hidden layer");
    for (int h : hidden) {
        if (h < 1) throw Error(ErrorKind::parameter, "hidden layer widths must be >= 1");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
        throw Error(ErrorKind::parameter, fmt::format("dropout rate {} not in [0, 1)", dropout_rate));
    }
    if (!(learning_rate > 0.0)) throw Error(ErrorKind::parameter, "learning rate must be > 0");
    if (!(weight_decay >= 0.0)) throw Error(ErrorKind::parameter, "weight decay must be >= 0");
    if (batch_size < 1) throw Error(ErrorKind::parameter, "batch size must be >= 1");
    if (max_epochs < 0) throw Error(ErrorKind::parameter, "max_epochs must be >= 0");
    if (patience < 1) throw Error(ErrorKind::parameter, "patience must be >= 1");
    // Patience longer than the run only matters once training happens.
    if (max_epochs > 0 && patience > max_epochs) {
        throw Error(ErrorKind::parameter,
                    fmt::format("patience {} exceeds max_epochs {}", patience, max_epochs));
    }
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
        throw Error(ErrorKind::parameter, fmt::format("val_fraction {} not in (0, 1)", val_fraction));
    }
}

nlohmann::json TrainConfig::to_json() const {
    return {{"hidden", hidden},         {"dropout_rate", dropout_rate}, {"weight_decay", weight_decay},
            {"learning_rate", learning_rate}, {"batch_size", batch_size}, {"max_epochs", max_epochs},
            {"patience", patience},     {"val_fraction", val_fraction}, {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    try {
        c.hidden = j.value("hidden", c.hidden);
        c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.max_epochs = j.value("max_epochs", c.max_epochs);
        c.patience = j.value("patience", c.patience);
        c.val_fraction = j.value("val_fraction", c.val_fraction);
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::config, fmt::format("training config: {}", e.what()));
    }
    c.validate();
    return c;
}

Eigen::Index MlpModel::num_params() const {
    Eigen::Index total = 0;
    for (const auto& l : layers) total += l.weight.size() + l.bias.size();
    return total;
}

Eigen::VectorXd MlpModel::flat_params() const {
    Eigen::VectorXd theta(num_params());
    Eigen::Index off = 0;
    for (const auto& l : layers) {
        theta.segment(off, l.weight.size()) = Eigen::Map<const Eigen::VectorXd>(l.weight.data(), l.weight.size());
        off += l.weight.size();
        theta.segment(off, l.bias.size()) = l.bias;
        off += l.bias.size();
    }
    return theta;
}

void MlpModel::set_flat_params(const Eigen::VectorXd& theta) {
    if (theta.size() != num_params()) {
        throw Error(ErrorKind::dimension,
                    fmt::format("expected {} parameters, got {}", num_params(), theta.size()));
    }
    Eigen::Index off = 0;
    for (auto& l : layers) {
        Eigen::Map<Eigen::VectorXd>(l.weight.data(), l.weight.size()) = theta.segment(off, l.weight.size());
        off += l.weight.size();
        l.bias = theta.segment(off, l.bias.size());
        off += l.bias.size();
    }
}

nlohmann::json MlpModel::to_json() const {
    auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
    nlohmann::json j;
    j["layers"] = nlohmann::json::array();
    for (const auto& l : layers) {
        j["layers"].push_back({{"rows", l.weight.rows()},
                               {"cols", l.weight.cols()},
                               {"weight", std::vector<double>(l.weight.data(), l.weight.data() + l.weight.size())},
                               {"bias", vec(l.bias)}});
    }
    j["feature_mean"] = vec(feature_mean);
    j["feature_scale"] = vec(feature_scale);
    j["target_mean"] = target_mean;
    j["target_scale"] = target_scale;
    return j;
}

MlpModel MlpModel::from_json(const nlohmann::json& j) {
    auto vec = [](const nlohmann::json& a) {
        const auto v = a.get<std::vector<double>>();
        return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
    };
    MlpModel m;
    try {
        for (const auto& l : j.at("layers")) {
            DenseLayer d;
            const auto rows = l.at("rows").get<Eigen::Index>();
            const auto cols = l.at("cols").get<Eigen::Index>();
            const auto w = l.at("weight").get<std::vector<double>>();
            if (static_cast<Eigen::Index>(w.size()) != rows * cols) {
                throw Error(ErrorKind::parse, "MLP layer weight size does not match its shape");
            }
            d.weight = Eigen::Map<const Eigen::MatrixXd>(w.data(), rows, cols);
            d.bias = vec(l.at("bias"));
            m.layers.push_back(std::move(d));
        }
        m.feature_mean = vec(j.at("feature_mean"));
        m.feature_scale = vec(j.at("feature_scale"));
        m.target_mean = j.at("target_mean").get<double>();
        m.target_scale = j.at("target_scale").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::parse, fmt::format("MLP model: {}", e.what()));
    }
    return m;
}

MlpModel init_mlp(Eigen::Index input_dim, const std::vector<int>& hidden, std::uint64_t seed) {
    Rng rng(seed);
    MlpModel m;
    Eigen::Index fan_in = input_dim;
    std::vector<Eigen::Index> sizes(hidden.begin(), hidden.end());
    sizes.push_back(1);
    for (Eigen::Index out : sizes) {
        DenseLayer l;
        l.weight.resize(out, fan_in);
        const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (Eigen::Index c = 0; c < l.weight.cols(); ++c) {
            for (Eigen::Index r = 0; r < l.weight.rows(); ++r) l.weight(r, c) = scale * rng.normal();
        }
        l.bias = Eigen::VectorXd::Zero(out);
        m.layers.push_back(std::move(l));
        fan_in = out;
    }
    m.feature_mean = Eigen::VectorXd::Zero(input_dim);
    m.feature_scale = Eigen::VectorXd::Ones(input_dim);
    return m;
}

namespace {

Eigen::MatrixXd standardized_inputs(const MlpModel& m, const Eigen::MatrixXd& x) {
    if (x.cols() != m.input_dim()) {
        throw Error(ErrorKind::dimension,
                    fmt::format("MLP expects {} features, got {}", m.input_dim(), x.cols()));
    }
    return (x.rowwise() - m.feature_mean.transpose()).array().rowwise() /
           m.feature_scale.transpose().array();
}

struct Pass {
    std::vector<Eigen::MatrixXd> acts;  // a_0 .. a_{H}, rows are samples
    std::vector<Eigen::MatrixXd> pre;   // z_1 .. z_H (hidden only)
    std::vector<Eigen::MatrixXd> masks; // scaled keep masks, empty if no dropout
    Eigen::VectorXd out;                // internal-scale output
};

// `masks` may be empty (no dropout) or hold one mask per hidden layer.
Pass run_forward(const MlpModel& m, const Eigen::MatrixXd& u, std::vector<Eigen::MatrixXd> masks) {
    Pass p;
    p.masks = std::move(masks);
    p.acts.push_back(u);
    for (std::size_t l = 0; l + 1 < m.layers.size(); ++l) {
        Eigen::MatrixXd z = (p.acts.back() * m.layers[l].weight.transpose()).rowwise() +
                            m.layers[l].bias.transpose();
        Eigen::MatrixXd a = z.cwiseMax(0.0);
        if (!p.masks.empty()) a.array() *= p.masks[l].array();
        p.pre.push_back(std::move(z));
        p.acts.push_back(std::move(a));
    }
    const auto& last = m.layers.back();
    p.out = (p.acts.back() * last.weight.transpose()).col(0).array() + last.bias(0);
    return p;
}

Eigen::VectorXd run_backward(const MlpModel& m, const Pass& p, const Eigen::VectorXd& target) {
    const auto b = static_cast<double>(target.size());
    Eigen::VectorXd grad(m.num_params());
    // Offsets of each layer's block in the flat vector.
    std::vector<Eigen::Index> offsets;
    Eigen::Index off = 0;
    for (const auto& l : m.layers) {
        offsets.push_back(off);
        off += l.weight.size() + l.bias.size();
    }

    Eigen::MatrixXd d_out = (2.0 / b) * (p.out - target);  // n x 1
    for (std::size_t l = m.layers.size(); l-- > 0;) {
        const auto& layer = m.layers[l];
        const Eigen::MatrixXd gw = d_out.transpose() * p.acts[l];
        Eigen::Map<Eigen::MatrixXd>(grad.data() + offsets[l], layer.weight.rows(), layer.weight.cols()) = gw;
        grad.segment(offsets[l] + layer.weight.size(), layer.bias.size()) = d_out.colwise().sum().transpose();
        if (l == 0) break;
        Eigen::MatrixXd d_act = d_out * layer.weight;
        if (!p.masks.empty()) d_act.array() *= p.masks[l - 1].array();
        d_out = d_act.array() * (p.pre[l - 1].array() > 0.0).cast<double>();
    }
    return grad;
}

Eigen::VectorXd internal_target(const MlpModel& m, const Eigen::VectorXd& y) {
    return (y.array() - m.target_mean) / m.target_scale;
}

double mse_on(const MlpModel& m, const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
    return (predict_mlp(m, x) - y).squaredNorm() / static_cast<double>(y.size());
}

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& x, std::span<const Eigen::Index> idx) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), x.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(idx[i]);
    return out;
}

Eigen::VectorXd take_rows(const Eigen::VectorXd& v, std::span<const Eigen::Index> idx) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) out(static_cast<Eigen::Index>(i)) = v(idx[i]);
    return out;
}

}  // namespace

Eigen::VectorXd predict_mlp(const MlpModel& model, const Eigen::MatrixXd& x) {
    const Pass p = run_forward(model, standardized_inputs(model, x), {});
    return (p.out.array() * model.target_scale + model.target_mean).matrix();
}

double minibatch_loss(const MlpModel& model, const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
    const Pass p = run_forward(model, standardized_inputs(model, x), {});
    return (p.out - internal_target(model, y)).squaredNorm() / static_cast<double>(y.size());
}

Eigen::VectorXd minibatch_gradient(const MlpModel& model, const Eigen::MatrixXd& x,
                                   const Eigen::VectorXd& y) {
    const Pass p = run_forward(model, standardized_inputs(model, x), {});
    return run_backward(model, p, internal_target(model, y));
}

std::string TrainResult::log_csv() const {
    std::string out = "epoch,train_mse,val_mse\n";
    for (const auto& e : log) out += fmt::format("{},{:.17g},{:.17g}\n", e.epoch, e.train_mse, e.val_mse);
    return out;
}

TrainResult train_mlp(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const TrainConfig& cfg) {
    cfg.validate();
    const Eigen::Index n = x.rows();
    if (y.size() != n) {
        throw Error(ErrorKind::dimension, fmt::format("train_mlp: {} rows vs {} targets", n, y.size()));
    }
    if (n <= cfg.batch_size) {
        throw Error(ErrorKind::parameter,
                    fmt::format("train_mlp: need more than batch_size={} samples, got {}", cfg.batch_size, n));
    }
    Rng rng(cfg.seed);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::shuffle(order.begin(), order.end(), rng.engine());
    const auto n_val = std::max<Eigen::Index>(1, std::llround(cfg.val_fraction * static_cast<double>(n)));
    const Eigen::Index n_fit = n - n_val;
    if (n_fit < cfg.batch_size) {
        throw Error(ErrorKind::parameter,
                    fmt::format("train_mlp: validation split leaves {} training rows, fewer than one batch",
                                n_fit));
    }
    const std::span<const Eigen::Index> fit_rows(order.data(), static_cast<std::size_t>(n_fit));
    const std::span<const Eigen::Index> val_rows(order.data() + n_fit, static_cast<std::size_t>(n_val));
    const Eigen::MatrixXd x_fit = take_rows(x, fit_rows);
    const Eigen::VectorXd y_fit = take_rows(y, fit_rows);
    const Eigen::MatrixXd x_val = take_rows(x, val_rows);
    const Eigen::VectorXd y_val = take_rows(y, val_rows);

    TrainResult result;
    result.model = init_mlp(x.cols(), cfg.hidden, derive_seed(cfg.seed, 1));
    MlpModel& model = result.model;
    model.feature_mean = x_fit.colwise().mean().transpose();
    for (Eigen::Index k = 0; k < x.cols(); ++k) {
        const double sd = std::sqrt((x_fit.col(k).array() - model.feature_mean(k)).square().mean());
        model.feature_scale(k) = sd > 1e-12 ? sd : 1.0;
    }
    model.target_mean = y_fit.mean();
    const double ysd = std::sqrt((y_fit.array() - model.target_mean).square().mean());
    model.target_scale = ysd > 1e-12 ? ysd : 1.0;
    if (cfg.max_epochs == 0) return result;

    // Standardized inputs/targets are fixed for the run.
    const Eigen::MatrixXd u_fit = standardized_inputs(model, x_fit);
    const Eigen::VectorXd t_fit = internal_target(model, y_fit);

    Eigen::VectorXd theta = model.flat_params();
    Eigen::VectorXd decay_mask = Eigen::VectorXd::Zero(theta.size());
    {
        Eigen::Index off = 0;
        for (const auto& l : model.layers) {
            decay_mask.segment(off, l.weight.size()).setOnes();
            off += l.weight.size() + l.bias.size();
        }
    }
    Eigen::VectorXd m1 = Eigen::VectorXd::Zero(theta.size());
    Eigen::VectorXd m2 = Eigen::VectorXd::Zero(theta.size());
    constexpr double beta1 = 0.9;
    constexpr double beta2 = 0.999;
    constexpr double eps = 1e-8;
    long step = 0;

    Eigen::VectorXd best_theta = theta;
    double best_val = std::numeric_limits<double>::infinity();
    const double keep = 1.0 - cfg.dropout_rate;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::vector<Eigen::Index> local(static_cast<std::size_t>(n_fit));
        for (std::size_t i = 0; i < local.size(); ++i) local[i] = static_cast<Eigen::Index>(i);
        std::shuffle(local.begin(), local.end(), rng.engine());
        for (Eigen::Index start = 0; start < n_fit; start += cfg.batch_size) {
            const Eigen::Index end = std::min<Eigen::Index>(start + cfg.batch_size, n_fit);
            const std::span<const Eigen::Index> batch(local.data() + start, static_cast<std::size_t>(end - start));
            const Eigen::MatrixXd ub = take_rows(u_fit, batch);
            const Eigen::VectorXd tb = take_rows(t_fit, batch);
            std::vector<Eigen::MatrixXd> masks;
            if (cfg.dropout_rate > 0.0) {
                for (int h : cfg.hidden) {
                    Eigen::MatrixXd mask(ub.rows(), h);
                    for (Eigen::Index c = 0; c < mask.cols(); ++c) {
                        for (Eigen::Index r = 0; r < mask.rows(); ++r) {
                            mask(r, c) = rng.uniform01() < keep ? 1.0 / keep : 0.0;
                        }
                    }
                    masks.push_back(std::move(mask));
                }
            }
            const Pass p = run_forward(model, ub, std::move(masks));
            const Eigen::VectorXd grad = run_backward(model, p, tb);
            if (!grad.allFinite()) {
                throw Error(ErrorKind::training_failure,
                            fmt::format("train_mlp: non-finite gradient in epoch {}", epoch));
            }
            ++step;
            m1 = beta1 * m1 + (1.0 - beta1) * grad;
            m2 = beta2 * m2 + (1.0 - beta2) * grad.cwiseAbs2();
            const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
            theta.array() -= cfg.learning_rate * ((m1.array() / c1) / ((m2.array() / c2).sqrt() + eps) +
                                                  cfg.weight_decay * decay_mask.array() * theta.array());
            model.set_flat_params(theta);
        }

        const double train_mse = mse_on(model, x_fit, y_fit);
        const double val_mse = mse_on(model, x_val, y_val);
        if (!std::isfinite(train_mse) || !std::isfinite(val_mse)) {
            throw Error(ErrorKind::training_failure,
                        fmt::format("train_mlp: loss diverged in epoch {}", epoch));
        }
        result.log.push_back({epoch, train_mse, val_mse});
        if (val_mse < best_val) {
            best_val = val_mse;
            best_theta = theta;
            result.best_epoch = epoch;
        } else if (epoch - result.best_epoch >= cfg.patience) {
            break;
        }
    }
    model.set_flat_params(best_theta);
    result.best_val_mse = best_val;
    return result;
}

}  // namespace ntkgen
