#include "ntkgen/simlab.hpp"

#include "ntkgen/errors.hpp"
#include "ntkgen/kernels.hpp"
#include "ntkgen/rng.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <limits>
#include <numeric>
#include <thread>

namespace ntkgen {

namespace {

using nlohmann::json;

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw Error(ErrorKind::config, fmt::format("field '{}': wrong type", key));
    }
}

double sample_variance(const Eigen::VectorXd& v) {
    if (v.size() < 2) return 0.0;
    const double mean = v.mean();
    return (v.array() - mean).square().sum() / static_cast<double>(v.size() - 1);
}

double median_of(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t mid = v.size() / 2;
    return v.size() % 2 == 1 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
}

std::string fmt_real(double x) { return fmt::format("{:.17g}", x); }

Eigen::VectorXd gather(const Eigen::VectorXd& v, const std::vector<Eigen::Index>& idx) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) out(static_cast<Eigen::Index>(i)) = v(idx[i]);
    return out;
}

Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& m, const std::vector<Eigen::Index>& idx) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), m.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
    return out;
}

Eigen::MatrixXd gather_block(const Eigen::MatrixXd& m, const std::vector<Eigen::Index>& rows,
                             const std::vector<Eigen::Index>& cols) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < cols.size(); ++j)
            out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = m(rows[i], cols[j]);
    return out;
}

// Per-replicate seed streams.
enum Stream : std::uint64_t {
    s_geno = 1,
    s_signal,
    s_noise,
    s_split,
    s_ntk,
    s_cv,
    s_nn,
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Intercept-only LMM: MINQUE on the training block, BLUP on the test block.
Eigen::VectorXd lmm_predict(const Eigen::VectorXd& y_train, const Eigen::MatrixXd& k_train,
                            const Eigen::MatrixXd& k_test_train, const MinqueSpec& spec) {
    const Eigen::MatrixXd z_train = Eigen::MatrixXd::Ones(y_train.size(), 1);
    const Eigen::MatrixXd z_test = Eigen::MatrixXd::Ones(k_test_train.rows(), 1);
    const std::vector<Eigen::MatrixXd> ks{k_train};
    const VarianceComponents vc = minque_fit(y_train, ks, &z_train, spec);
    return blup_fit_predict(y_train, k_train, k_test_train, &z_train, &z_test, vc).predictions;
}

}  // namespace

std::string to_string(PhenotypeModel m) {
    switch (m) {
        case PhenotypeModel::linear: return "linear";
        case PhenotypeModel::hyperbolic: return "hyperbolic";
        case PhenotypeModel::power: return "power";
        case PhenotypeModel::cosh: return "cosh";
        case PhenotypeModel::ricker: return "ricker";
    }
    return "?";
}

PhenotypeModel phenotype_model_from_string(const std::string& s) {
    for (auto m : {PhenotypeModel::linear, PhenotypeModel::hyperbolic, PhenotypeModel::power,
                   PhenotypeModel::cosh, PhenotypeModel::ricker})
        if (to_string(m) == s) return m;
    throw Error(ErrorKind::config, fmt::format("field 'model': unknown phenotype model '{}'", s));
}

void ScenarioSpec::validate() const {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw Error(ErrorKind::parameter,
                    fmt::format("train_fraction must lie in (0, 1), got {}", train_fraction));
    if (!(alpha >= 1.0)) throw Error(ErrorKind::parameter, fmt::format("alpha must be >= 1, got {}", alpha));
    if (!(sigma_g2 >= 0.0) || !std::isfinite(sigma_g2))
        throw Error(ErrorKind::parameter, fmt::format("sigma_g2 must be >= 0, got {}", sigma_g2));
    if (!(sigma_e2 >= 0.0) || !std::isfinite(sigma_e2))
        throw Error(ErrorKind::parameter, fmt::format("sigma_e2 must be >= 0, got {}", sigma_e2));
    if (heritability && !(*heritability > 0.0 && *heritability < 1.0))
        throw Error(ErrorKind::parameter, fmt::format("heritability must lie in (0, 1), got {}", *heritability));
    if (n < 4) throw Error(ErrorKind::parameter, fmt::format("n must be >= 4, got {}", n));
    if (p < 1) throw Error(ErrorKind::parameter, fmt::format("p must be >= 1, got {}", p));
    if (replicates < 1)
        throw Error(ErrorKind::parameter, fmt::format("replicates must be >= 1, got {}", replicates));
    const auto n_train = static_cast<Eigen::Index>(std::llround(train_fraction * static_cast<double>(n)));
    if (n_train < 2 || n - n_train < 2)
        throw Error(ErrorKind::parameter,
                    fmt::format("train_fraction {} leaves fewer than 2 samples on one side of n = {}",
                                train_fraction, n));
    if (!(maf.low > 0.0 && maf.low < maf.high && maf.high <= 0.5))
        throw Error(ErrorKind::parameter, "maf range must satisfy 0 < low < high <= 0.5");
    if (!(ld_decay >= 0.0)) throw Error(ErrorKind::parameter, "ld_decay must be >= 0");
}

nlohmann::json ScenarioSpec::to_json() const {
    json j{{"model", to_string(model)},
           {"alpha", alpha},
           {"sigma_g2", sigma_g2},
           {"sigma_e2", sigma_e2},
           {"n", n},
           {"p", p},
           {"replicates", replicates},
           {"train_fraction", train_fraction},
           {"seed", seed},
           {"maf_range", {maf.low, maf.high}}};
    if (heritability) j["heritability"] = *heritability;
    // JSON has no infinity; absent means independent SNPs.
    if (std::isfinite(ld_decay)) j["ld_decay"] = ld_decay;
    else j["ld_decay"] = nullptr;
    return j;
}

ScenarioSpec ScenarioSpec::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw Error(ErrorKind::config, "scenario config must be a JSON object");
    if (!j.contains("model")) throw Error(ErrorKind::config, "missing required field 'model'");
    ScenarioSpec s;
    s.model = phenotype_model_from_string(get_or<std::string>(j, "model", ""));
    s.alpha = get_or(j, "alpha", s.alpha);
    s.sigma_g2 = get_or(j, "sigma_g2", s.sigma_g2);
    s.sigma_e2 = get_or(j, "sigma_e2", s.sigma_e2);
    if (j.contains("heritability") && !j.at("heritability").is_null())
        s.heritability = get_or(j, "heritability", 0.0);
    s.n = get_or<Eigen::Index>(j, "n", s.n);
    s.p = get_or<Eigen::Index>(j, "p", s.p);
    s.replicates = get_or(j, "replicates", s.replicates);
    s.train_fraction = get_or(j, "train_fraction", s.train_fraction);
    s.seed = get_or<std::uint64_t>(j, "seed", s.seed);
    if (j.contains("maf_range")) {
        const auto r = get_or<std::vector<double>>(j, "maf_range", {});
        if (r.size() != 2) throw Error(ErrorKind::config, "field 'maf_range': expected [low, high]");
        s.maf = {r[0], r[1]};
    }
    if (j.contains("ld_decay")) {
        s.ld_decay = j.at("ld_decay").is_null() ? std::numeric_limits<double>::infinity()
                                                : get_or(j, "ld_decay", s.ld_decay);
    }
    s.validate();
    return s;
}

Eigen::VectorXd gen_signal(const GenotypeMatrix& geno, double sigma_g2, std::uint64_t seed) {
    if (!(sigma_g2 >= 0.0)) throw Error(ErrorKind::parameter, "sigma_g2 must be >= 0");
    Rng rng(seed);
    Eigen::VectorXd w(geno.p());
    const double sd = std::sqrt(sigma_g2);
    for (Eigen::Index k = 0; k < w.size(); ++k) w(k) = sd * rng.normal();
    return geno.values() * w / std::sqrt(static_cast<double>(geno.p()));
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

Eigen::VectorXd phenotype_mean(const Eigen::VectorXd& g, PhenotypeModel model, double alpha) {
    if (!g.allFinite()) throw Error(ErrorKind::parameter, "signal contains non-finite values");
    const bool integral = alpha == std::floor(alpha);
    auto pow_g = [&](double gi) {
        if (gi < 0.0 && !integral)
            throw Error(ErrorKind::domain,
                        fmt::format("g^alpha undefined for negative g with non-integer alpha {}", alpha));
        return std::pow(gi, alpha);
    };
    Eigen::VectorXd m(g.size());
    for (Eigen::Index i = 0; i < g.size(); ++i) {
        const double gi = g(i);
        switch (model) {
            case PhenotypeModel::linear: m(i) = gi; break;
            case PhenotypeModel::hyperbolic: {
                const double r = softplus(pow_g(gi));
                m(i) = r / (1.0 + r);
                break;
            }
            case PhenotypeModel::power: m(i) = pow_g(gi); break;
            case PhenotypeModel::cosh: m(i) = std::cosh(gi); break;
            case PhenotypeModel::ricker: {
                const double r = softplus(pow_g(gi));
                m(i) = r * std::exp(-r);
                break;
            }
        }
    }
    return m;
}

double noise_variance(const Eigen::VectorXd& mean, const ScenarioSpec& spec) {
    if (!spec.heritability) return spec.sigma_e2;
    const double h2 = *spec.heritability;
    return sample_variance(mean) * (1.0 - h2) / h2;
}

PhenotypeVector apply_model(const Eigen::VectorXd& g, const ScenarioSpec& spec, std::uint64_t seed) {
    Eigen::VectorXd y = phenotype_mean(g, spec.model, spec.alpha);
    Rng rng(seed);
    const double sd = std::sqrt(noise_variance(y, spec));
    for (Eigen::Index i = 0; i < y.size(); ++i) y(i) += sd * rng.normal();
    return PhenotypeVector(std::move(y));
}

double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    if (a.size() != b.size())
        throw Error(ErrorKind::dimension,
                    fmt::format("pearson: lengths differ ({} vs {})", a.size(), b.size()));
    if (a.size() < 2) throw Error(ErrorKind::dimension, "pearson: need at least 2 values");
    const Eigen::ArrayXd da = a.array() - a.mean();
    const Eigen::ArrayXd db = b.array() - b.mean();
    const double saa = da.square().sum();
    const double sbb = db.square().sum();
    if (!(saa > 0.0) || !(sbb > 0.0)) throw Error(ErrorKind::undefined_metric, "pearson: zero variance");
    return std::clamp((da * db).sum() / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::string to_string(Method m) {
    switch (m) {
        case Method::ntk_lmm: return "ntk_lmm";
        case Method::ntk_krr: return "ntk_krr";
        case Method::product_lmm: return "product_lmm";
        case Method::baseline_nn: return "baseline_nn";
    }
    return "?";
}

Method method_from_string(const std::string& s) {
    for (auto m : {Method::ntk_lmm, Method::ntk_krr, Method::product_lmm, Method::baseline_nn})
        if (to_string(m) == s) return m;
    throw Error(ErrorKind::config, fmt::format("unknown method '{}'", s));
}

std::string to_string(ResultStatus s) {
    switch (s) {
        case ResultStatus::ok: return "ok";
        case ResultStatus::constant_prediction: return "constant_prediction";
        case ResultStatus::failed: return "failed";
    }
    return "?";
}

nlohmann::json CampaignOptions::to_json() const {
    json ms = json::array();
    for (auto m : methods) ms.push_back(to_string(m));
    return {{"methods", ms},         {"ntk_method", to_string(ntk_method)},
            {"cv", cv.to_json()},    {"minque", minque.to_json()},
            {"nn", nn.to_json()},    {"threads", threads}};
}

CampaignOptions CampaignOptions::from_json(const nlohmann::json& j) {
    CampaignOptions o;
    if (!j.is_object()) return o;
    if (j.contains("methods")) {
        const auto names = get_or<std::vector<std::string>>(j, "methods", {});
        if (names.empty()) throw Error(ErrorKind::config, "field 'methods': must not be empty");
        o.methods.clear();
        for (const auto& n : names) {
            const Method m = method_from_string(n);
            if (std::find(o.methods.begin(), o.methods.end(), m) != o.methods.end())
                throw Error(ErrorKind::config, fmt::format("field 'methods': duplicate '{}'", n));
            o.methods.push_back(m);
        }
    }
    if (j.contains("ntk_method")) o.ntk_method = ntk_method_from_string(get_or<std::string>(j, "ntk_method", ""));
    if (j.contains("cv")) o.cv = CvPlan::from_json(j.at("cv"));
    if (j.contains("minque")) o.minque = MinqueSpec::from_json(j.at("minque"));
    if (j.contains("nn")) o.nn = TrainConfig::from_json(j.at("nn"));
    o.threads = get_or(j, "threads", o.threads);
    if (o.threads < 1) throw Error(ErrorKind::config, "field 'threads': must be >= 1");
    return o;
}

std::vector<ReplicateResult> run_replicate(const ScenarioSpec& spec, const CampaignOptions& opts,
                                           int replicate, ReplicateDiagnostics* diag) {
    const std::uint64_t base = derive_seed(spec.seed, static_cast<std::uint64_t>(replicate));
    const auto stream = [&](Stream s) { return derive_seed(base, s); };

    const GenotypeMatrix raw = simulate_genotypes(spec.n, spec.p, spec.maf, spec.ld_decay, stream(s_geno));
    const GenotypeMatrix centered = standardize(raw, StandardizeMode::center_only);
    const Eigen::VectorXd g = gen_signal(centered, spec.sigma_g2, stream(s_signal));
    const Eigen::VectorXd mean = phenotype_mean(g, spec.model, spec.alpha);
    const Eigen::VectorXd y = apply_model(g, spec, stream(s_noise)).values();

    if (diag != nullptr) {
        const double sv = sample_variance(mean);
        const double denom = sv + noise_variance(mean, spec);
        *diag = {replicate, sv, sample_variance(y - mean), denom > 0.0 ? sv / denom : 0.0};
    }

    std::vector<Eigen::Index> order(static_cast<std::size_t>(spec.n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    {
        Rng rng(stream(s_split));
        std::shuffle(order.begin(), order.end(), rng.engine());
    }
    const auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(spec.n)));
    std::vector<Eigen::Index> train(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::vector<Eigen::Index> test(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());

    const Eigen::VectorXd y_train = gather(y, train);
    const Eigen::VectorXd y_test = gather(y, test);

    // The NTK is shared by both NTK methods; its build time is charged to each.
    std::optional<Eigen::MatrixXd> ntk;
    double ntk_seconds = 0.0;
    std::string ntk_error;
    const auto ensure_ntk = [&] {
        if (ntk || !ntk_error.empty()) return;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            NtkBuildConfig cfg = default_ntk_config(spec.p, stream(s_ntk));
            cfg.method = opts.ntk_method;
            ntk = empirical_ntk(centered, cfg).values();
        } catch (const std::exception& e) {
            ntk_error = e.what();
        }
        ntk_seconds = seconds_since(t0);
    };

    std::vector<ReplicateResult> rows;
    for (const Method method : opts.methods) {
        ReplicateResult row{method, replicate, 0.0, 0.0, ResultStatus::ok, {}};
        Eigen::VectorXd pred;
        const auto t0 = std::chrono::steady_clock::now();
        double extra = 0.0;
        try {
            switch (method) {
                case Method::ntk_lmm:
                case Method::ntk_krr: {
                    ensure_ntk();
                    extra = ntk_seconds;
                    if (!ntk) throw Error(ErrorKind::numeric, "NTK construction failed: " + ntk_error);
                    const Eigen::MatrixXd k_train = gather_block(*ntk, train, train);
                    const Eigen::MatrixXd k_test = gather_block(*ntk, test, train);
                    if (method == Method::ntk_lmm) {
                        pred = lmm_predict(y_train, k_train, k_test, opts.minque);
                    } else {
                        // No intercept in the KRR model: fit the centered phenotype.
                        const double mu = y_train.mean();
                        CvPlan plan = opts.cv;
                        plan.seed = stream(s_cv);
                        const Eigen::VectorXd yc = (y_train.array() - mu).matrix();
                        const FittedPredictor fit = krr_fit(yc, k_train, plan);
                        pred = (krr_predict(fit, k_test).array() + mu).matrix();
                    }
                    break;
                }
                case Method::product_lmm: {
                    const Eigen::MatrixXd grm = grm_kernel(raw).values();
                    pred = lmm_predict(y_train, gather_block(grm, train, train), gather_block(grm, test, train),
                                       opts.minque);
                    break;
                }
                case Method::baseline_nn: {
                    TrainConfig cfg = opts.nn;
                    cfg.seed = stream(s_nn);
                    const Eigen::MatrixXd x_train = gather_rows(raw.values(), train);
                    const TrainResult res = train_mlp(x_train, y_train, cfg);
                    pred = predict_mlp(res.model, gather_rows(raw.values(), test));
                    break;
                }
            }
            row.wall_time = seconds_since(t0) + extra;
            try {
                row.test_correlation = pearson(pred, y_test);
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::undefined_metric) throw;
                row.status = ResultStatus::constant_prediction;
                row.test_correlation = 0.0;
                row.message = "constant predictions";
            }
        } catch (const std::exception& e) {
            row.wall_time = seconds_since(t0) + extra;
            row.status = ResultStatus::failed;
            row.test_correlation = 0.0;
            row.message = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

CampaignResult run_campaign(const ScenarioSpec& spec, const CampaignOptions& opts) {
    spec.validate();
    if (opts.methods.empty()) throw Error(ErrorKind::config, "campaign needs at least one method");
    const auto reps = static_cast<std::size_t>(spec.replicates);
    std::vector<std::vector<ReplicateResult>> per_rep(reps);
    std::vector<ReplicateDiagnostics> diags(reps);

    const auto work = [&](std::size_t r) {
        per_rep[r] = run_replicate(spec, opts, static_cast<int>(r), &diags[r]);
    };

    const int threads = std::max(1, std::min<int>(opts.threads, static_cast<int>(reps)));
    if (threads == 1) {
        for (std::size_t r = 0; r < reps; ++r) work(r);
    } else {
        std::atomic<std::size_t> next{0};
        std::exception_ptr first_error;
        std::atomic<bool> has_error{false};
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(threads));
        for (int t = 0; t < threads; ++t) {
            pool.emplace_back([&] {
                for (std::size_t r = next++; r < reps; r = next++) {
                    try {
                        work(r);
                    } catch (...) {
                        if (!has_error.exchange(true)) first_error = std::current_exception();
                    }
                }
            });
        }
        for (auto& th : pool) th.join();
        if (first_error) std::rethrow_exception(first_error);
    }

    CampaignResult out;
    out.spec = spec;
    out.diagnostics = std::move(diags);
    for (auto& rows : per_rep)
        for (auto& row : rows) out.rows.push_back(std::move(row));
    return out;
}

std::vector<MethodSummary> summarize(const std::vector<ReplicateResult>& rows) {
    std::vector<Method> order;
    for (const auto& r : rows)
        if (std::find(order.begin(), order.end(), r.method) == order.end()) order.push_back(r.method);

    std::vector<MethodSummary> out;
    for (const Method m : order) {
        std::vector<double> vals;
        double secs = 0.0;
        int failures = 0;
        int total = 0;
        for (const auto& r : rows) {
            if (r.method != m) continue;
            ++total;
            secs += r.wall_time;
            if (r.status == ResultStatus::failed) ++failures;
            else vals.push_back(r.test_correlation);
        }
        MethodSummary s{m, static_cast<int>(vals.size()), failures, 0.0, 0.0, 0.0, 0.0};
        const double nan = std::numeric_limits<double>::quiet_NaN();
        if (vals.empty()) {
            s.mean = s.median = s.sd = nan;
        } else {
            const double mean = std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size());
            double ss = 0.0;
            for (double v : vals) ss += (v - mean) * (v - mean);
            s.mean = mean;
            s.median = median_of(vals);
            s.sd = vals.size() > 1 ? std::sqrt(ss / static_cast<double>(vals.size() - 1)) : 0.0;
        }
        s.mean_seconds = total > 0 ? secs / total : 0.0;
        out.push_back(s);
    }
    return out;
}

std::vector<MethodSummary> CampaignResult::summary() const { return summarize(rows); }

double median_correlation(const CampaignResult& r, Method method) {
    std::vector<double> vals;
    for (const auto& row : r.rows)
        if (row.method == method && row.status != ResultStatus::failed) vals.push_back(row.test_correlation);
    return median_of(std::move(vals));
}

std::string CampaignResult::results_csv() const {
    std::string out = "scenario,p,method,replicate,correlation,status\n";
    for (const auto& r : rows)
        out += fmt::format("{},{},{},{},{},{}\n", to_string(spec.model), spec.p, to_string(r.method),
                           r.replicate_id, fmt_real(r.test_correlation), to_string(r.status));
    return out;
}

std::string CampaignResult::timings_csv() const {
    std::string out = "scenario,p,method,replicate,seconds\n";
    for (const auto& r : rows)
        out += fmt::format("{},{},{},{},{:.6f}\n", to_string(spec.model), spec.p, to_string(r.method),
                           r.replicate_id, r.wall_time);
    return out;
}

std::string CampaignResult::diagnostics_csv() const {
    std::string out = "replicate,signal_variance,noise_variance,heritability_proxy\n";
    for (const auto& d : diagnostics)
        out += fmt::format("{},{},{},{}\n", d.replicate_id, fmt_real(d.signal_variance),
                           fmt_real(d.noise_variance), fmt_real(d.heritability_proxy));
    return out;
}

std::string summary_csv(const std::vector<MethodSummary>& s, bool include_seconds) {
    std::string out = include_seconds ? "method,count,failures,mean,median,sd,mean_seconds\n"
                                      : "method,count,failures,mean,median,sd\n";
    for (const auto& m : s) {
        out += fmt::format("{},{},{},{:.6f},{:.6f},{:.6f}", to_string(m.method), m.count, m.failures, m.mean,
                           m.median, m.sd);
        out += include_seconds ? fmt::format(",{:.6f}\n", m.mean_seconds) : std::string("\n");
    }
    return out;
}

}  // namespace ntkgen
