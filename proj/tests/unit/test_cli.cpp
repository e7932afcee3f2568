#include "doctest.h"

#include "ntkgen/cli.hpp"
#include "ntkgen/genodata.hpp"

#include "support.hpp"

#include "json.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace ntkgen;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out;
    std::string err;
};

Run run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

void write_json(const fs::path& path, const nlohmann::json& j) { std::ofstream(path) << j.dump(2); }

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t line_count(const fs::path& path) {
    const std::string s = slurp(path);
    return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

// Every output listed in the manifest, except the manifest itself.
void check_same_outputs(const fs::path& a, const fs::path& b) {
    const auto manifest = nlohmann::json::parse(slurp(a / "manifest.json"));
    REQUIRE(!manifest.at("outputs").empty());
    for (const auto& name : manifest.at("outputs")) {
        const auto file = name.get<std::string>();
        INFO(file);
        CHECK(slurp(a / file) == slurp(b / file));
    }
}

}  // namespace

TEST_CASE("simulate writes its file contract deterministically") {
    testing::TempDir dir("cli_sim");
    write_json(dir / "sim.json", {{"model", "linear"}, {"n", 10}, {"p", 4}, {"seed", 1}});
    const auto r = run({"simulate", "-c", (dir / "sim.json").string(), "-o", (dir / "a").string()});
    REQUIRE(r.code == kExitOk);
    for (const char* f : {"X.csv", "y.csv", "g.csv", "manifest.json"}) CHECK(fs::exists(dir / "a" / f));
    CHECK(line_count(dir / "a" / "X.csv") == 10);
    CHECK(load_table(dir / "a" / "X.csv").values.cols() == 4);

    REQUIRE(run({"simulate", "-c", (dir / "sim.json").string(), "-o", (dir / "b").string()}).code == kExitOk);
    for (const char* f : {"X.csv", "y.csv", "g.csv"}) CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));

    // Refuses to overwrite unless forced.
    CHECK(run({"simulate", "-c", (dir / "sim.json").string(), "-o", (dir / "a").string()}).code == kExitValidation);
    CHECK(run({"simulate", "-c", (dir / "sim.json").string(), "-o", (dir / "a").string(), "--force"}).code ==
          kExitOk);

    const auto other = run({"simulate", "-c", (dir / "sim.json").string(), "-o", (dir / "c").string(), "--seed", "2"});
    REQUIRE(other.code == kExitOk);
    CHECK(slurp(dir / "a" / "X.csv") != slurp(dir / "c" / "X.csv"));
}

TEST_CASE("simulate names a missing model field") {
    testing::TempDir dir("cli_missing");
    write_json(dir / "sim.json", {{"n", 10}, {"p", 4}});
    const auto r = run({"simulate", "-c", (dir / "sim.json").string(), "-o", (dir / "a").string()});
    CHECK(r.code == kExitValidation);
    CHECK(r.err.find("'model'") != std::string::npos);
}

TEST_CASE("usage errors and missing files are validation failures") {
    CHECK(run({"frobnicate"}).code == kExitValidation);
    CHECK(run({"fit"}).code == kExitValidation);
    testing::TempDir dir("cli_usage");
    write_json(dir / "k.json", {{"kind", "grm"}, {"input", "nope.csv"}});
    CHECK(run({"kernel", "-c", (dir / "k.json").string(), "-o", (dir / "o").string()}).code == kExitValidation);
    write_json(dir / "bad.json", {{"kind", "rbf"}, {"input", "nope.csv"}});
    CHECK(run({"kernel", "-c", (dir / "bad.json").string(), "-o", (dir / "o2").string()}).code == kExitValidation);
    std::ofstream(dir / "broken.json") << "{not json";
    CHECK(run({"kernel", "-c", (dir / "broken.json").string()}).code == kExitValidation);
}

TEST_CASE("kernel command: grm fixture and empirical metadata") {
    testing::TempDir dir("cli_kernel");
    std::ofstream(dir / "two.csv") << "0\n2\n";
    write_json(dir / "grm.json", {{"kind", "grm"}, {"input", "two.csv"}});
    REQUIRE(run({"kernel", "-c", (dir / "grm.json").string(), "-o", (dir / "g").string()}).code == kExitOk);
    const Eigen::MatrixXd k = load_table(dir / "g" / "kernel.csv").values;
    Eigen::MatrixXd expect(2, 2);
    expect << 1, -1, -1, 1;
    CHECK((k - expect).cwiseAbs().maxCoeff() < 1e-15);

    std::ofstream x(dir / "x.csv");
    x << "0,1,2,1\n2,1,0,0\n1,1,1,2\n0,2,1,1\n";
    x.close();
    write_json(dir / "emp.json", {{"kind", "ntk_empirical"}, {"input", "x.csv"}, {"output", "ntk.csv"}});
    REQUIRE(run({"kernel", "-c", (dir / "emp.json").string(), "-o", (dir / "e").string()}).code == kExitOk);
    const auto meta = nlohmann::json::parse(slurp(dir / "e" / "ntk.csv.meta.json"));
    CHECK(meta.at("kind") == "ntk_empirical");
    CHECK(meta.at("params").at("width") == 2000);
    CHECK(meta.at("params").at("depth") == 2);
}

TEST_CASE("kernel command: empirical approaches analytic with width") {
    testing::TempDir dir("cli_width");
    save_table(dir / "x.csv", testing::random_dosages(6, 4, 3));
    write_json(dir / "a.json", {{"kind", "ntk_analytic"}, {"input", "x.csv"}, {"arch", {{"depth", 3}}}});
    REQUIRE(run({"kernel", "-c", (dir / "a.json").string(), "-o", (dir / "a").string()}).code == kExitOk);
    const Eigen::MatrixXd analytic = load_table(dir / "a" / "kernel.csv").values;
    double gap[2];
    int idx = 0;
    for (int width : {256, 4096}) {
        const auto name = "e" + std::to_string(width);
        write_json(dir / (name + ".json"),
                   {{"kind", "ntk_empirical"}, {"input", "x.csv"}, {"ntk", {{"width", width}, {"depth", 3}}}});
        REQUIRE(run({"kernel", "-c", (dir / (name + ".json")).string(), "-o", (dir / name).string(), "--seed", "5"})
                    .code == kExitOk);
        gap[idx++] = (load_table(dir / name / "kernel.csv").values - analytic).cwiseAbs().maxCoeff();
    }
    CHECK(gap[1] < gap[0]);
}

TEST_CASE("fit then predict, including shape errors") {
    testing::TempDir dir("cli_fit");
    write_json(dir / "sim.json", {{"model", "linear"}, {"n", 40}, {"p", 6}, {"seed", 4}});
    REQUIRE(run({"simulate", "-c", (dir / "sim.json").string(), "-o", (dir / "data").string()}).code == kExitOk);
    const Eigen::MatrixXd x = load_table(dir / "data" / "X.csv").values;
    const Eigen::VectorXd y = load_phenotype(dir / "data" / "y.csv").values();
    save_table(dir / "train.csv", x.topRows(30));
    save_table(dir / "test.csv", x.bottomRows(10));
    save_table(dir / "y_train.csv", Eigen::MatrixXd(y.head(30)));

    write_json(dir / "k.json", {{"kind", "grm"}, {"input", "train.csv"}, {"test_input", "test.csv"}});
    REQUIRE(run({"kernel", "-c", (dir / "k.json").string(), "-o", (dir / "k").string()}).code == kExitOk);
    CHECK(fs::exists(dir / "k" / "kernel.test_train.csv"));

    for (const char* predictor : {"lmm_blup", "krr"}) {
        INFO(predictor);
        const std::string fit_dir = std::string("fit_") + predictor;
        write_json(dir / "f.json",
                   {{"kernel", "k/kernel.csv"}, {"phenotype", "y_train.csv"}, {"predictor", predictor}});
        const auto f = run({"fit", "-c", (dir / "f.json").string(), "-o", (dir / fit_dir).string(), "--force"});
        REQUIRE(f.code == kExitOk);
        const auto report = nlohmann::json::parse(slurp(dir / fit_dir / "fit.json"));
        CHECK(report.at("predictor") == predictor);

        write_json(dir / "p.json", {{"fit", fit_dir + "/fit.json"}, {"test_kernel", "k/kernel.test_train.csv"}});
        const std::string pred_dir = std::string("pred_") + predictor;
        REQUIRE(run({"predict", "-c", (dir / "p.json").string(), "-o", (dir / pred_dir).string()}).code == kExitOk);
        CHECK(load_phenotype(dir / pred_dir / "predictions.csv").size() == 10);
    }

    // A train-train kernel where a test-train block is expected: 30 columns is fine,
    // but a block with the wrong width must name both files.
    save_table(dir / "narrow.csv", Eigen::MatrixXd::Zero(10, 29));
    write_json(dir / "bad.json", {{"fit", "fit_krr/fit.json"}, {"test_kernel", "narrow.csv"}});
    const auto bad = run({"predict", "-c", (dir / "bad.json").string(), "-o", (dir / "bad").string()});
    CHECK(bad.code == kExitValidation);
    CHECK(bad.err.find("narrow.csv") != std::string::npos);
    CHECK(bad.err.find("fit.json") != std::string::npos);
}

TEST_CASE("verify passes on its default fixtures") {
    testing::TempDir dir("cli_verify");
    write_json(dir / "v.json", {{"instances", 10}});
    const auto r = run({"verify", "-c", (dir / "v.json").string(), "-o", dir.path().string()});
    CHECK(r.code == kExitOk);
    const auto report = nlohmann::json::parse(slurp(dir / "verify.json"));
    CHECK(report.at("passed") == true);
    CHECK(r.out.find("lmm_krr_equivalence") != std::string::npos);
}

TEST_CASE("campaign, summary and manifest reruns") {
    testing::TempDir dir("cli_campaign");
    write_json(dir / "c.json", {{"model", "ricker"},
                                {"n", 50},
                                {"p", 5},
                                {"replicates", 2},
                                {"seed", 9},
                                {"methods", {"product_lmm"}}});
    const auto r = run({"campaign", "-c", (dir / "c.json").string(), "-o", (dir / "a").string()});
    REQUIRE(r.code == kExitOk);
    CHECK(line_count(dir / "a" / "results.csv") == 3);  // header + 2 rows
    CHECK(r.out.find("product_lmm") != std::string::npos);

    const auto s = run({"summary", (dir / "a" / "results.csv").string()});
    CHECK(s.code == kExitOk);
    CHECK(s.out.find("product_lmm") != std::string::npos);

    const auto rerun = run({"campaign", "-c", (dir / "a" / "manifest.json").string(), "-o", (dir / "b").string()});
    REQUIRE(rerun.code == kExitOk);
    check_same_outputs(dir / "a", dir / "b");
    CHECK(slurp(dir / "a" / "results.csv") == slurp(dir / "b" / "results.csv"));

    // A manifest from another command is rejected.
    CHECK(run({"simulate", "-c", (dir / "a" / "manifest.json").string(), "-o", (dir / "c").string()}).code ==
          kExitValidation);
}

TEST_CASE("manifest reruns reproduce simulate and kernel outputs") {
    testing::TempDir dir("cli_rerun");
    write_json(dir / "sim.json", {{"model", "cosh"}, {"n", 12}, {"p", 5}, {"seed", 3}});
    REQUIRE(run({"simulate", "-c", (dir / "sim.json").string(), "-o", (dir / "a").string()}).code == kExitOk);
    REQUIRE(run({"simulate", "-c", (dir / "a" / "manifest.json").string(), "-o", (dir / "b").string()}).code ==
            kExitOk);
    check_same_outputs(dir / "a", dir / "b");

    write_json(dir / "k.json", {{"kind", "ntk_empirical"}, {"input", "a/X.csv"}, {"ntk", {{"width", 64}}}});
    REQUIRE(run({"kernel", "-c", (dir / "k.json").string(), "-o", (dir / "ka").string()}).code == kExitOk);
    REQUIRE(run({"kernel", "-c", (dir / "ka" / "manifest.json").string(), "-o", (dir / "kb").string()}).code ==
            kExitOk);
    check_same_outputs(dir / "ka", dir / "kb");
}
