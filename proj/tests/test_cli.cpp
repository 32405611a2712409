#include <cstdlib>
#include <fstream>
#include <sstream>

#include "cli_app.hpp"
#include "doctest.h"
#include "json.hpp"
#include "psm/eval/harness.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using psm::cli::run;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> short_nights(const fs::path& out, int patients, const std::string& seed) {
    return {"synth",        "--patients", std::to_string(patients), "--seed", seed, "--out", out.string(),
            "--night-duration", "1200", "--entry", "100", "--exit", "1150", "--biocal-time", "400",
            "--mean-dwell", "250"};
}

}  // namespace

TEST_CASE("synth rerun is byte-identical") {
    testutil::TempDir tmp("cli_synth");
    REQUIRE(cli(short_nights(tmp.path / "a", 2, "7")).code == 0);
    REQUIRE(cli(short_nights(tmp.path / "b", 2, "7")).code == 0);
    const auto a = psm::cli::tree_checksums(tmp.path / "a");
    const auto b = psm::cli::tree_checksums(tmp.path / "b");
    CHECK(a.size() == 2 * 5);
    CHECK(a == b);
    CHECK(fs::exists(tmp.path / "a" / "P000" / "truth.json"));
    const auto m = nlohmann::json::parse(slurp(tmp.path / "a" / "manifest.json"));
    CHECK(m["command"] == "synth");
    CHECK(m["seed"] == 7);
    CHECK(m["format_version"] == psm::cli::kManifestFormatVersion);
    CHECK(m["params"]["patients"] == "2");
    CHECK(m["artifacts"].size() == a.size());
}

TEST_CASE("eval on a perfect-prediction fixture prints accuracy 1.000") {
    testutil::TempDir tmp("cli_eval");
    fs::create_directories(tmp.path / "pred");
    std::ofstream(tmp.path / "pred" / "predictions.csv") << "cell,fold,patient,t,truth,pred\n"
                                                           "0,0,A,1.000,Left,Left\n"
                                                           "0,0,A,2.000,Supine,Supine\n"
                                                           "0,1,B,1.000,Prone,Prone\n"
                                                           "0,1,B,2.000,Right,Right\n";
    const auto r = cli({"eval", "--predictions", (tmp.path / "pred" / "predictions.csv").string(), "--out",
                        (tmp.path / "eval").string()});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("accuracy 1.000") != std::string::npos);
    const auto rows = psm::eval::read_results_csv(tmp.path / "eval" / "results.csv");
    CHECK(rows.size() == 2);
    CHECK(fs::exists(tmp.path / "eval" / "confusion_0.csv"));
    CHECK(fs::exists(tmp.path / "eval" / "confusion_1.csv"));

    const auto rep = cli({"report", "--results", (tmp.path / "eval" / "results.csv").string(), "--out",
                          (tmp.path / "report").string()});
    REQUIRE(rep.code == 0);
    CHECK(slurp(tmp.path / "report" / "heatmap.svg").starts_with("<svg"));
    CHECK(slurp(tmp.path / "report" / "report.txt").find("Pooled accuracy 1.000") != std::string::npos);
}

TEST_CASE("exit codes and messages") {
    testutil::TempDir tmp("cli_err");
    auto r = cli({"synth", "--patients", "1"});
    CHECK(r.code == psm::cli::kExitValidation);
    CHECK(r.err.find("--seed") != std::string::npos);

    r = cli({"synth", "--seed", "1", "--bogus"});
    CHECK(r.code == psm::cli::kExitValidation);
    CHECK(r.err.find("--bogus") != std::string::npos);

    r = cli({"sync", "--in", (tmp.path / "missing").string(), "--out", (tmp.path / "x").string()});
    CHECK(r.code == psm::cli::kExitValidation);
    CHECK(r.err.find("missing") != std::string::npos);

    fs::create_directories(tmp.path / "bad");
    std::ofstream(tmp.path / "bad" / "predictions.csv") << "nonsense\n";
    r = cli({"eval", "--predictions", (tmp.path / "bad" / "predictions.csv").string(), "--out",
             (tmp.path / "e").string()});
    CHECK(r.code == psm::cli::kExitValidation);
    CHECK(r.err.find("predictions.csv") != std::string::npos);

    std::ofstream(tmp.path / "bad" / "manifest.json") << R"({"format_version": 99, "replay_args": [], "output_dir": "/x", "artifacts": {}})";
    r = cli({"replay", "--manifest", (tmp.path / "bad" / "manifest.json").string()});
    CHECK(r.code == psm::cli::kExitValidation);
    CHECK(r.err.find("format_version") != std::string::npos);

    CHECK(cli({}).code == psm::cli::kExitValidation);
    CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("default paths come from PSM_DATA_DIR") {
    testutil::TempDir tmp("cli_env");
    ::setenv("PSM_DATA_DIR", tmp.path.c_str(), 1);
    auto args = short_nights("", 1, "3");
    args.erase(args.begin() + 5, args.begin() + 7);  // drop --out
    const auto r = cli(args);
    ::unsetenv("PSM_DATA_DIR");
    REQUIRE(r.code == 0);
    CHECK(fs::exists(tmp.path / "raw" / "P000" / "meta.json"));
    CHECK(fs::exists(tmp.path / "raw" / "manifest.json"));
}

TEST_CASE("pipeline synth -> sync -> preprocess -> finetune -> eval on 20 patients, replayable") {
    testutil::TempDir tmp("cli_pipe");
    const auto d = tmp.path;
    REQUIRE(cli(short_nights(d / "raw", 20, "11")).code == 0);
    REQUIRE(cli({"sync", "--in", (d / "raw").string(), "--out", (d / "aligned").string()}).code == 0);
    const auto inputs_before = psm::cli::tree_checksums(d / "aligned");
    REQUIRE(cli({"preprocess", "--in", (d / "aligned").string(), "--out", (d / "dataset").string(), "--jobs", "4"}).code == 0);
    CHECK(psm::cli::tree_checksums(d / "aligned") == inputs_before);
    const auto ft = cli({"finetune", "--in", (d / "dataset").string(), "--out", (d / "ft").string(), "--seed", "1",
                         "--embed-dim", "16", "--depth", "1", "--heads", "2", "--epochs", "1", "--max-train-frames", "300",
                         "--jobs", "5"});
    REQUIRE(ft.code == 0);
    const auto ev = cli({"eval", "--predictions", (d / "ft" / "predictions.csv").string(), "--out", (d / "eval").string()});
    REQUIRE(ev.code == 0);
    const auto rows = psm::eval::read_results_csv(d / "eval" / "results.csv");
    CHECK(rows.size() == 5);

    for (const char* stage : {"raw", "aligned", "dataset", "ft", "eval"}) {
        const auto r = cli({"replay", "--manifest", (d / stage / "manifest.json").string()});
        INFO(stage << ": " << r.out << r.err);
        CHECK(r.code == 0);
    }
}

TEST_CASE("baselines and features through the CLI") {
    testutil::TempDir tmp("cli_base");
    const auto d = tmp.path;
    REQUIRE(cli({"synth", "--static-set", "--seed", "2", "--subjects", "4", "--frames", "20", "--rows", "18", "--cols",
                 "18", "--out", (d / "ds").string()})
                .code == 0);
    REQUIRE(cli({"features", "--in", (d / "ds").string(), "--out", (d / "feat").string()}).code == 0);
    CHECK(fs::exists(d / "feat" / "features.csv"));
    for (const char* model : {"forest", "linear", "tcn"}) {
        std::vector<std::string> args{"train-baseline", "--model", model, "--seed", "4", "--folds", "2",
                                      "--in", (d / "ds").string(), "--out", (d / model).string()};
        if (std::string(model) == "tcn") {
            for (const char* a : {"--filters", "4", "--kernel", "3", "--window", "5", "--epochs", "1"}) args.push_back(a);
        } else if (std::string(model) == "linear") {
            for (const char* a : {"--epochs", "50", "--lr", "0.05"}) args.push_back(a);
        } else {
            for (const char* a : {"--trees", "10"}) args.push_back(a);
        }
        const auto r = cli(args);
        INFO(model << ": " << r.err);
        REQUIRE(r.code == 0);
        CHECK(fs::exists(d / model / "predictions.csv"));
        CHECK(cli({"replay", "--manifest", (d / model / "manifest.json").string()}).code == 0);
    }
}
