#include "ntkgen/cli.hpp"

#include "ntkgen/baseline_nn.hpp"
#include "ntkgen/errors.hpp"
#include "ntkgen/genodata.hpp"
#include "ntkgen/kernels.hpp"
#include "ntkgen/minque.hpp"
#include "ntkgen/ntk_empirical.hpp"
#include "ntkgen/predictors.hpp"
#include "ntkgen/rng.hpp"
#include "ntkgen/simlab.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <fmt/chrono.h>
#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#ifndef NTKGEN_VERSION
#define NTKGEN_VERSION "0.0.0"
#endif

namespace ntkgen {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct CommonArgs {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool force = false;
};

// Raised when the verify suite finds a failing property.
struct VerifyFailed {};

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(t));
}

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::io, fmt::format("cannot open config '{}'", path.string()));
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::parse, fmt::format("{}: {}", path.string(), e.what()));
    }
}

/// A command's fully resolved inputs plus where its outputs go.
struct Invocation {
    std::string command;
    fs::path config_path;
    json config;  // resolved: absolute input paths, seed filled in
    fs::path out_dir;
    bool force = false;
    std::string started;
    std::vector<std::string> outputs;
    std::vector<std::string> timing_outputs;
};

// Keys in a config whose values are input file paths.
const std::vector<std::string> kPathKeys{"input", "test_input", "phenotype", "covariates",
                                         "kernel", "test_kernel", "fit", "results"};

void absolutize_paths(json& cfg, const fs::path& base) {
    const auto fix = [&](json& v) {
        if (!v.is_string()) return;
        fs::path p = v.get<std::string>();
        if (p.is_relative()) p = base / p;
        v = fs::absolute(p).lexically_normal().string();
    };
    for (const auto& key : kPathKeys)
        if (cfg.contains(key)) fix(cfg[key]);
    for (const char* key : {"kernels", "test_kernels"}) {
        if (!cfg.contains(key)) continue;
        if (!cfg[key].is_array()) throw Error(ErrorKind::config, fmt::format("field '{}': expected a list", key));
        for (auto& v : cfg[key]) fix(v);
    }
}

Invocation resolve(const std::string& command, const CommonArgs& args, bool config_required) {
    Invocation inv;
    inv.command = command;
    inv.force = args.force;
    inv.started = utc_now();
    json cfg = json::object();
    fs::path base = fs::current_path();
    std::optional<fs::path> manifest_out;
    if (!args.config.empty()) {
        inv.config_path = fs::absolute(args.config);
        base = inv.config_path.parent_path();
        json j = read_json_file(inv.config_path);
        if (j.is_object() && j.contains("manifest_version")) {
            // Rerun from a manifest: the resolved config is reused verbatim.
            const auto recorded = j.value("command", std::string{});
            if (recorded != command)
                throw Error(ErrorKind::config,
                            fmt::format("manifest was written by '{}', not '{}'", recorded, command));
            cfg = j.at("config");
            if (j.contains("out_dir")) manifest_out = fs::path(j.at("out_dir").get<std::string>());
        } else {
            cfg = std::move(j);
        }
    } else if (config_required) {
        throw Error(ErrorKind::config, fmt::format("'{}' needs --config", command));
    }
    if (!cfg.is_object()) throw Error(ErrorKind::config, "config must be a JSON object");
    if (args.seed) cfg["seed"] = *args.seed;
    if (!cfg.contains("seed")) cfg["seed"] = 0;
    absolutize_paths(cfg, base);

    if (!args.out.empty()) inv.out_dir = args.out;
    else if (cfg.contains("out")) inv.out_dir = base / cfg.at("out").get<std::string>();
    else if (manifest_out) inv.out_dir = *manifest_out;
    else inv.out_dir = ".";
    inv.out_dir = fs::absolute(inv.out_dir).lexically_normal();
    cfg.erase("out");
    inv.config = std::move(cfg);
    return inv;
}

std::uint64_t seed_of(const Invocation& inv) { return inv.config.at("seed").get<std::uint64_t>(); }

fs::path output_path(Invocation& inv, const std::string& name) {
    const fs::path path = inv.out_dir / name;
    if (fs::exists(path) && !inv.force)
        throw Error(ErrorKind::io, fmt::format("refusing to overwrite '{}' (use --force)", path.string()));
    return path;
}

void prepare_outputs(Invocation& inv, const std::vector<std::string>& names) {
    std::error_code ec;
    fs::create_directories(inv.out_dir, ec);
    if (ec || !fs::is_directory(inv.out_dir))
        throw Error(ErrorKind::io, fmt::format("cannot create output directory '{}'", inv.out_dir.string()));
    for (const auto& n : names) (void)output_path(inv, n);
    (void)output_path(inv, "manifest.json");
}

void emit(Invocation& inv, const std::string& name, const std::string& contents) {
    write_file_atomic(inv.out_dir / name, contents);
    inv.outputs.push_back(name);
}

// Wall-clock outputs: listed separately since reruns cannot reproduce them.
void emit_timing(Invocation& inv, const std::string& name, const std::string& contents) {
    write_file_atomic(inv.out_dir / name, contents);
    inv.timing_outputs.push_back(name);
}

void write_manifest(Invocation& inv) {
    json m{{"manifest_version", 1},
           {"command", inv.command},
           {"config_path", inv.config_path.string()},
           {"config", inv.config},
           {"seed", seed_of(inv)},
           {"version", NTKGEN_VERSION},
           {"out_dir", inv.out_dir.string()},
           {"outputs", inv.outputs},
           {"timing_outputs", inv.timing_outputs},
           {"started_at", inv.started},
           {"finished_at", utc_now()}};
    write_file_atomic(inv.out_dir / "manifest.json", m.dump(2) + "\n");
}

std::string require_string(const json& cfg, const char* key) {
    if (!cfg.contains(key)) throw Error(ErrorKind::config, fmt::format("missing required field '{}'", key));
    if (!cfg.at(key).is_string()) throw Error(ErrorKind::config, fmt::format("field '{}': expected a string", key));
    return cfg.at(key).get<std::string>();
}

std::vector<std::string> string_list(const json& cfg, const char* single, const char* plural) {
    if (cfg.contains(plural)) return cfg.at(plural).get<std::vector<std::string>>();
    if (cfg.contains(single)) return {require_string(cfg, single)};
    throw Error(ErrorKind::config, fmt::format("missing required field '{}'", single));
}

std::string table_text(const Eigen::MatrixXd& m) { return format_table(m, TableFormat::csv); }

std::string vector_text(const Eigen::VectorXd& v) { return format_table(Eigen::MatrixXd(v), TableFormat::csv); }

json subobject(const json& cfg, const char* key) {
    if (!cfg.contains(key)) return json::object();
    if (!cfg.at(key).is_object()) throw Error(ErrorKind::config, fmt::format("field '{}': expected an object", key));
    return cfg.at(key);
}

// ---------------------------------------------------------------------------

int cmd_simulate(Invocation& inv, std::ostream& out) {
    const ScenarioSpec spec = ScenarioSpec::from_json(inv.config);
    prepare_outputs(inv, {"X.csv", "g.csv", "y.csv"});
    const std::uint64_t seed = seed_of(inv);
    const GenotypeMatrix raw = simulate_genotypes(spec.n, spec.p, spec.maf, spec.ld_decay, derive_seed(seed, 1));
    const GenotypeMatrix centered = standardize(raw, StandardizeMode::center_only);
    const Eigen::VectorXd g = gen_signal(centered, spec.sigma_g2, derive_seed(seed, 2));
    const PhenotypeVector y = apply_model(g, spec, derive_seed(seed, 3));
    emit(inv, "X.csv", table_text(raw.values()));
    emit(inv, "g.csv", vector_text(g));
    emit(inv, "y.csv", vector_text(y.values()));
    write_manifest(inv);
    out << fmt::format("simulated {} samples x {} SNPs ({} model) into {}\n", spec.n, spec.p,
                       to_string(spec.model), inv.out_dir.string());
    return kExitOk;
}

GenotypeMatrix prepare_ntk_input(const GenotypeMatrix& geno, const std::string& mode) {
    if (mode == "none") return geno;
    if (mode == "center_only") return standardize(geno, StandardizeMode::center_only);
    if (mode == "center_scale") return standardize(geno, StandardizeMode::center_scale);
    throw Error(ErrorKind::config, fmt::format("field 'standardize': unknown mode '{}'", mode));
}

int cmd_kernel(Invocation& inv, std::ostream& out) {
    const json& cfg = inv.config;
    const KernelKind kind = kernel_kind_from_string(require_string(cfg, "kind"));
    const fs::path input = require_string(cfg, "input");
    const std::string name = cfg.value("output", std::string{"kernel.csv"});
    const bool has_test = cfg.contains("test_input");
    const std::string cross_name = fs::path(name).stem().string() + ".test_train.csv";
    const std::string meta_name = kernel_metadata_path(name).string();

    std::vector<std::string> names{name, meta_name};
    if (has_test) names.push_back(cross_name);
    prepare_outputs(inv, names);

    GenotypeMatrix geno = load_genotypes(input);
    const Eigen::Index n_train = geno.n();
    if (has_test) {
        const GenotypeMatrix test = load_genotypes(require_string(cfg, "test_input"));
        if (test.p() != geno.p())
            throw Error(ErrorKind::dimension,
                        fmt::format("'{}' has {} columns but '{}' has {}", input.string(), geno.p(),
                                    cfg.at("test_input").get<std::string>(), test.p()));
        Eigen::MatrixXd stacked(geno.n() + test.n(), geno.p());
        stacked << geno.values(), test.values();
        geno = GenotypeMatrix(std::move(stacked));
    }

    const std::uint64_t seed = seed_of(inv);
    std::optional<KernelMatrix> k;
    switch (kind) {
        case KernelKind::grm: k = grm_kernel(geno); break;
        case KernelKind::ntk_analytic: {
            const json a = subobject(cfg, "arch");
            NtkArchitecture arch;
            arch.depth = a.value("depth", default_ntk_config(geno.p()).depth);
            arch.c_sigma = a.value("c_sigma", arch.c_sigma);
            arch.scale_derivative = a.value("scale_derivative", arch.scale_derivative);
            const auto scaling = base_scaling_from_string(cfg.value("base_scaling", std::string{"inner_product"}));
            const auto norm = normalization_from_string(cfg.value("normalization", std::string{"unit_diagonal_over_p"}));
            k = ntk_analytic(prepare_ntk_input(geno, cfg.value("standardize", std::string{"center_only"})), arch,
                             scaling, norm);
            break;
        }
        case KernelKind::ntk_empirical: {
            // Unspecified width/depth fall back to the p-based selector.
            json merged = default_ntk_config(geno.p(), seed).to_json();
            merged.update(subobject(cfg, "ntk"));
            merged["seed"] = seed;
            if (cfg.contains("normalization")) merged["normalization"] = cfg.at("normalization");
            const NtkBuildConfig ntk = NtkBuildConfig::from_json(merged);
            k = empirical_ntk(prepare_ntk_input(geno, cfg.value("standardize", std::string{"center_only"})), ntk);
            break;
        }
    }

    std::vector<Eigen::Index> train(static_cast<std::size_t>(n_train));
    std::iota(train.begin(), train.end(), Eigen::Index{0});
    if (has_test) {
        std::vector<Eigen::Index> test(static_cast<std::size_t>(geno.n() - n_train));
        std::iota(test.begin(), test.end(), n_train);
        const KernelMatrix k_train = k->sub(train);
        save_kernel(inv.out_dir / name, k_train);
        emit(inv, cross_name, table_text(k->block(test, train)));
    } else {
        save_kernel(inv.out_dir / name, *k);
    }
    inv.outputs.push_back(name);
    inv.outputs.push_back(meta_name);
    write_manifest(inv);
    out << fmt::format("{} kernel ({} x {}) written to {}\n", to_string(kind), n_train, n_train,
                       (inv.out_dir / name).string());
    return kExitOk;
}

std::optional<Eigen::MatrixXd> load_design(const json& cfg, Eigen::Index n, const std::string& who) {
    const bool intercept = cfg.value("intercept", true);
    if (cfg.contains("covariates")) {
        const auto path = require_string(cfg, "covariates");
        const CovariateDesign z = load_covariates(path, intercept);
        if (z.n() != n)
            throw Error(ErrorKind::dimension,
                        fmt::format("covariates '{}' have {} rows but {} has {}", path, z.n(), who, n));
        return z.values();
    }
    if (intercept) return Eigen::MatrixXd::Ones(n, 1);
    return std::nullopt;
}

int cmd_fit(Invocation& inv, std::ostream& out) {
    const json& cfg = inv.config;
    const auto kernel_paths = string_list(cfg, "kernel", "kernels");
    const auto pheno_path = require_string(cfg, "phenotype");
    const std::string predictor = cfg.value("predictor", std::string{"lmm_blup"});
    if (predictor != "lmm_blup" && predictor != "krr")
        throw Error(ErrorKind::config, fmt::format("field 'predictor': unknown predictor '{}'", predictor));
    prepare_outputs(inv, {"fit.json", "alpha.csv"});

    const PhenotypeVector y = load_phenotype(pheno_path);
    std::vector<KernelMatrix> kernels;
    for (const auto& p : kernel_paths) {
        kernels.push_back(load_kernel(p));
        if (kernels.back().n() != y.size())
            throw Error(ErrorKind::dimension,
                        fmt::format("kernel '{}' is {}x{} but phenotype '{}' has {} values", p,
                                    kernels.back().n(), kernels.back().n(), pheno_path, y.size()));
    }

    json report{{"predictor", predictor}, {"kernels", kernel_paths}, {"alpha_file", "alpha.csv"}};
    Eigen::VectorXd alpha;
    if (predictor == "krr") {
        if (kernels.size() != 1) throw Error(ErrorKind::config, "krr takes exactly one kernel");
        CvPlan plan = CvPlan::from_json(subobject(cfg, "cv"));
        if (!subobject(cfg, "cv").contains("seed")) plan.seed = seed_of(inv);
        FittedPredictor fit = krr_fit(y.values(), kernels[0].values(), plan);
        alpha = fit.alpha;
        report["fit"] = fit.to_json();
        report["kernel_weights"] = std::vector<double>{1.0};
    } else {
        const auto z = load_design(cfg, y.size(), fmt::format("phenotype '{}'", pheno_path));
        std::optional<CovariateDesign> design;
        if (z) design = CovariateDesign(*z);
        const MinqueSpec spec = MinqueSpec::from_json(subobject(cfg, "minque"));
        const VarianceComponents vc = minque_fit(y, kernels, design, spec);
        std::vector<Eigen::MatrixXd> ks;
        for (const auto& k : kernels) ks.push_back(k.values());
        const BlupPrediction blup = blup_fit_predict(y.values(), ks, ks, z ? &*z : nullptr, z ? &*z : nullptr, vc);
        alpha = blup.fit.alpha;
        report["fit"] = blup.fit.to_json();
        report["variance_components"] = vc.to_json();
        // Single-kernel alpha already carries theta_g.
        std::vector<double> weights(ks.size(), 1.0);
        if (ks.size() > 1)
            for (std::size_t k = 0; k < ks.size(); ++k) weights[k] = vc.theta(static_cast<Eigen::Index>(k) + 1);
        report["kernel_weights"] = weights;
        report["intercept"] = cfg.value("intercept", true);
        if (blup.genetic_variance_zero) out << "warning: estimated genetic variance is zero\n";
        out << fmt::format("theta = [{}], lambda = {}, cond(C) = {:.3g}\n",
                           fmt::join(std::vector<double>(vc.theta.data(), vc.theta.data() + vc.theta.size()), ", "),
                           vc.lambda(), vc.c_condition);
    }
    emit(inv, "alpha.csv", vector_text(alpha));
    emit(inv, "fit.json", report.dump(2) + "\n");
    write_manifest(inv);
    return kExitOk;
}

int cmd_predict(Invocation& inv, std::ostream& out) {
    const json& cfg = inv.config;
    const fs::path fit_path = require_string(cfg, "fit");
    const auto kernel_paths = string_list(cfg, "test_kernel", "test_kernels");
    prepare_outputs(inv, {"predictions.csv"});

    const json report = read_json_file(fit_path);
    const fs::path alpha_path = fit_path.parent_path() / report.value("alpha_file", std::string{"alpha.csv"});
    const Eigen::VectorXd alpha = load_phenotype(alpha_path).values();
    const FittedPredictor fit = FittedPredictor::from_json(report.at("fit"), alpha);
    const auto weights = report.value("kernel_weights", std::vector<double>{1.0});
    if (weights.size() != kernel_paths.size())
        throw Error(ErrorKind::dimension, fmt::format("fit '{}' uses {} kernels but {} test kernels were given",
                                                      fit_path.string(), weights.size(), kernel_paths.size()));

    Eigen::MatrixXd k_test;
    for (std::size_t i = 0; i < kernel_paths.size(); ++i) {
        const Eigen::MatrixXd block = load_table(kernel_paths[i]).values;
        if (block.cols() != fit.n_train())
            throw Error(ErrorKind::dimension,
                        fmt::format("test kernel '{}' is {}x{} but fit '{}' has {} training samples", kernel_paths[i],
                                    block.rows(), block.cols(), fit_path.string(), fit.n_train()));
        if (i == 0) k_test = weights[i] * block;
        else if (block.rows() != k_test.rows())
            throw Error(ErrorKind::dimension,
                        fmt::format("test kernel '{}' has {} rows, expected {}", kernel_paths[i], block.rows(),
                                    k_test.rows()));
        else k_test += weights[i] * block;
    }

    std::optional<Eigen::MatrixXd> z;
    if (fit.kind == PredictorKind::lmm_blup && fit.beta.size() > 0) {
        json zcfg = cfg;
        if (!zcfg.contains("intercept")) zcfg["intercept"] = report.value("intercept", true);
        z = load_design(zcfg, k_test.rows(), fmt::format("test kernel '{}'", kernel_paths.front()));
    }
    const Eigen::VectorXd pred = predict(fit, k_test, z ? &*z : nullptr);
    emit(inv, "predictions.csv", vector_text(pred));
    write_manifest(inv);
    out << fmt::format("{} predictions written to {}\n", pred.size(), (inv.out_dir / "predictions.csv").string());
    return kExitOk;
}

int cmd_campaign(Invocation& inv, std::ostream& out) {
    const json& cfg = inv.config;
    const ScenarioSpec spec = ScenarioSpec::from_json(cfg);
    CampaignOptions opts = CampaignOptions::from_json(cfg);
    // Thread count never changes results, so it stays out of the manifest.
    if (const char* env = std::getenv("NTKGEN_THREADS")) {
        try {
            opts.threads = std::max(1, std::stoi(env));
        } catch (const std::exception&) {
            throw Error(ErrorKind::config, fmt::format("NTKGEN_THREADS='{}' is not an integer", env));
        }
    }
    prepare_outputs(inv, {"results.csv", "summary.csv", "diagnostics.csv", "timings.csv"});
    const CampaignResult res = run_campaign(spec, opts);
    const auto summary = res.summary();
    emit(inv, "results.csv", res.results_csv());
    emit(inv, "summary.csv", summary_csv(summary));
    emit(inv, "diagnostics.csv", res.diagnostics_csv());
    emit_timing(inv, "timings.csv", res.timings_csv());
    write_manifest(inv);
    out << summary_csv(summary, true);
    for (const auto& r : res.rows)
        if (r.status == ResultStatus::failed)
            out << fmt::format("replicate {} {} failed: {}\n", r.replicate_id, to_string(r.method), r.message);
    return kExitOk;
}

// ---------------------------------------------------------------------------
// verify

struct Check {
    std::string name;
    double measured;
    double tolerance;
    bool passed;
};

Eigen::MatrixXd random_genotypes(Rng& rng, Eigen::Index n, Eigen::Index p) {
    Eigen::MatrixXd x(n, p);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < p; ++j) x(i, j) = static_cast<double>(rng.engine()() % 3);
    // Keep every column polymorphic.
    for (Eigen::Index j = 0; j < p; ++j) {
        x(0, j) = 0.0;
        x(1, j) = 2.0;
    }
    return x;
}

std::vector<Check> run_verify_suite(const json& cfg, std::uint64_t seed) {
    const int instances = cfg.value("instances", 50);
    if (instances < 1) throw Error(ErrorKind::config, "field 'instances': must be >= 1");
    std::vector<Check> checks;
    Rng rng(seed);

    // LMM and KRR predictions coincide at lambda = sigma_e2 / sigma_g2.
    {
        const double sig[] = {0.5, 1.0, 2.0};
        double worst = 0.0;
        for (int t = 0; t < instances; ++t) {
            const Eigen::Index n_train = 10 + static_cast<Eigen::Index>(rng.engine()() % 31);
            const Eigen::Index n_all = n_train + 5;
            const Eigen::Index p = 3 + static_cast<Eigen::Index>(rng.engine()() % 8);
            const GenotypeMatrix geno(random_genotypes(rng, n_all, p));
            Eigen::MatrixXd k;
            if (t % 2 == 0) {
                k = grm_kernel(geno).values();
            } else {
                NtkBuildConfig c;
                c.width = 64;
                c.depth = 2;
                c.seed = derive_seed(seed, static_cast<std::uint64_t>(t));
                k = empirical_ntk(standardize(geno, StandardizeMode::center_only), c).values();
            }
            Eigen::VectorXd y(n_train);
            for (Eigen::Index i = 0; i < n_train; ++i) y(i) = rng.normal();
            const double sg = sig[rng.engine()() % 3];
            const double se = sig[rng.engine()() % 3];
            const double gap = check_lmm_krr_equivalence(y, k, sg, se);
            worst = std::max(worst, gap / (1.0 + y.cwiseAbs().maxCoeff()));
        }
        checks.push_back({"lmm_krr_equivalence", worst, 1e-8, worst < 1e-8});
    }

    // lambda = 0 BLUP interpolates; dynamics limits at t = 0 and t -> inf.
    {
        const GenotypeMatrix geno(random_genotypes(rng, 12, 30));
        const Eigen::MatrixXd k = grm_kernel(geno).values() + 1e-3 * Eigen::MatrixXd::Identity(12, 12);
        Eigen::VectorXd y(12);
        for (Eigen::Index i = 0; i < 12; ++i) y(i) = rng.normal();
        VarianceComponents vc;
        vc.theta = Eigen::Vector2d(0.0, 1.0);
        const Eigen::VectorXd fitted = blup_fit_predict(y, k, k, nullptr, nullptr, vc).predictions;
        const double interp = (fitted - y).cwiseAbs().maxCoeff();
        checks.push_back({"blup_interpolation", interp, 1e-8, interp < 1e-8});

        const Eigen::VectorXd at_zero = ntk_dynamics_predict(k, k, y, 1.0, 0.0);
        const double zero = at_zero.cwiseAbs().maxCoeff();
        checks.push_back({"dynamics_t0", zero, 0.0, zero == 0.0});
        const Eigen::VectorXd at_inf = ntk_dynamics_predict(k, k, y, 1.0, 1e6);
        const Eigen::VectorXd krr0 = krr_predict(krr_fit_fixed(y, k, 0.0), k);
        const double lim = (at_inf - krr0).cwiseAbs().maxCoeff();
        checks.push_back({"dynamics_t_inf", lim, 1e-10, lim < 1e-10});
    }

    // Parameter gradient against central differences.
    {
        const WideMlp base(5, 16, 3, derive_seed(seed, 7));
        double worst = 0.0;
        const double h = 1e-5;
        for (int probe = 0; probe < 20; ++probe) {
            Eigen::VectorXd x(5);
            for (Eigen::Index i = 0; i < 5; ++i) x(i) = rng.normal();
            const Eigen::VectorXd grad = param_gradient(base, x);
            Eigen::VectorXd dir(grad.size());
            for (Eigen::Index i = 0; i < dir.size(); ++i) dir(i) = rng.normal();
            dir.normalize();
            WideMlp plus = base;
            WideMlp minus = base;
            plus.set_flat_params(base.flat_params() + h * dir);
            minus.set_flat_params(base.flat_params() - h * dir);
            const double fd = (forward(plus, x).output - forward(minus, x).output) / (2.0 * h);
            const double an = grad.dot(dir);
            worst = std::max(worst, std::abs(fd - an) / std::max(1.0, std::abs(an)));
        }
        checks.push_back({"gradient_finite_difference", worst, 1e-6, worst < 1e-6});
    }
    return checks;
}

int cmd_verify(Invocation& inv, std::ostream& out) {
    prepare_outputs(inv, {"verify.json"});
    const auto checks = run_verify_suite(inv.config, seed_of(inv));
    json report = json::array();
    bool all = true;
    for (const auto& c : checks) {
        all = all && c.passed;
        out << fmt::format("{:<28} {}  measured={:.3e}  tolerance={:.1e}\n", c.name, c.passed ? "PASS" : "FAIL",
                           c.measured, c.tolerance);
        report.push_back({{"name", c.name}, {"measured", c.measured}, {"tolerance", c.tolerance}, {"passed", c.passed}});
    }
    emit(inv, "verify.json", json{{"checks", report}, {"passed", all}}.dump(2) + "\n");
    write_manifest(inv);
    if (!all) throw VerifyFailed{};
    return kExitOk;
}

// ---------------------------------------------------------------------------
// summary

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

int cmd_summary(Invocation& inv, std::ostream& out) {
    const fs::path path = require_string(inv.config, "results");
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::io, fmt::format("cannot open results '{}'", path.string()));
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorKind::parse, fmt::format("'{}' is empty", path.string()));
    const auto header = split_csv_line(line);
    const auto col = [&](const std::string& name) -> std::size_t {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end())
            throw Error(ErrorKind::parse, fmt::format("'{}': missing column '{}'", path.string(), name));
        return static_cast<std::size_t>(it - header.begin());
    };
    const std::size_t c_scen = col("scenario"), c_p = col("p"), c_method = col("method"), c_rep = col("replicate"),
                      c_corr = col("correlation"), c_status = col("status");

    // Group by (scenario, p); within a group, methods keep file order.
    std::vector<std::pair<std::string, std::string>> groups;
    std::map<std::pair<std::string, std::string>, std::vector<ReplicateResult>> rows;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != header.size())
            throw Error(ErrorKind::parse, fmt::format("row {}: expected {} columns", line_no, header.size()));
        const auto key = std::make_pair(cells[c_scen], cells[c_p]);
        if (!rows.count(key)) groups.push_back(key);
        ReplicateResult r{};
        try {
            r.method = method_from_string(cells[c_method]);
            r.replicate_id = std::stoi(cells[c_rep]);
            r.test_correlation = std::stod(cells[c_corr]);
        } catch (const Error&) {
            throw;
        } catch (const std::exception&) {
            throw Error(ErrorKind::parse, fmt::format("row {}: malformed value", line_no));
        }
        r.status = cells[c_status] == "failed" ? ResultStatus::failed
                   : cells[c_status] == "constant_prediction" ? ResultStatus::constant_prediction
                                                              : ResultStatus::ok;
        rows[key].push_back(r);
    }

    std::string text = "scenario,p,method,count,failures,mean,median,sd\n";
    for (const auto& key : groups)
        for (const auto& s : summarize(rows[key]))
            text += fmt::format("{},{},{},{},{},{:.6f},{:.6f},{:.6f}\n", key.first, key.second, to_string(s.method),
                                s.count, s.failures, s.mean, s.median, s.sd);
    out << text;
    if (!inv.out_dir.empty() && inv.config.value("write", false)) {
        prepare_outputs(inv, {"summary_table.csv"});
        emit(inv, "summary_table.csv", text);
        write_manifest(inv);
    }
    return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Neural tangent kernel methods for genetic risk prediction", "ntkgen"};
    app.require_subcommand(1);
    app.set_version_flag("--version", NTKGEN_VERSION);

    struct Sub {
        CLI::App* app;
        CommonArgs args;
        bool config_required;
        std::function<int(Invocation&, std::ostream&)> run;
    };
    std::map<std::string, Sub> subs;
    std::string results_path;
    const auto add = [&](const std::string& name, const std::string& help, bool required,
                         std::function<int(Invocation&, std::ostream&)> run) {
        Sub& s = subs[name];
        s.app = app.add_subcommand(name, help);
        s.config_required = required;
        s.run = std::move(run);
        s.app->add_option("-c,--config", s.args.config, "JSON config or a manifest.json from an earlier run");
        s.app->add_option("--seed", s.args.seed, "Override the config seed");
        s.app->add_option("-o,--out", s.args.out, "Output directory");
        s.app->add_flag("-f,--force", s.args.force, "Overwrite existing outputs");
    };
    add("simulate", "Simulate genotypes, latent signal and phenotype", true, cmd_simulate);
    add("kernel", "Build a GRM or NTK kernel from a genotype file", true, cmd_kernel);
    add("fit", "Fit an LMM (MINQUE + BLUP) or KRR predictor", true, cmd_fit);
    add("predict", "Predict from a fitted model and a test-by-train kernel", true, cmd_predict);
    add("campaign", "Run a replicated simulation campaign", true, cmd_campaign);
    add("verify", "Run the numerical property checks", false, cmd_verify);
    add("summary", "Summarize a campaign results.csv", false, cmd_summary);
    subs["summary"].app->add_option("results", results_path, "results.csv to summarize");

    std::vector<std::string> argv(args.rbegin(), args.rend());
    try {
        app.parse(argv);
    } catch (const CLI::CallForHelp&) {
        for (const auto& [name, s] : subs) {
            if (s.app->parsed()) {
                out << s.app->help();
                return kExitOk;
            }
        }
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForVersion&) {
        out << NTKGEN_VERSION << "\n";
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    }

    for (auto& [name, s] : subs) {
        if (!s.app->parsed()) continue;
        try {
            Invocation inv = resolve(name, s.args, s.config_required);
            if (name == "summary" && !results_path.empty())
                inv.config["results"] = fs::absolute(results_path).lexically_normal().string();
            if (name == "summary") inv.config["write"] = !s.args.out.empty();
            return s.run(inv, out);
        } catch (const VerifyFailed&) {
            err << "verify: one or more checks failed\n";
            return kExitVerifyFailed;
        } catch (const Error& e) {
            err << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
            return e.is_validation() ? kExitValidation : kExitNumeric;
        } catch (const nlohmann::json::exception& e) {
            err << "error (config): " << e.what() << "\n";
            return kExitValidation;
        } catch (const std::exception& e) {
            err << "error: " << e.what() << "\n";
            return kExitNumeric;
        }
    }
    return kExitValidation;
}

}  // namespace ntkgen
