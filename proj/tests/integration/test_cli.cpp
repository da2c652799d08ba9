#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "riskeval/harness.hpp"

// Drives the installed binary the way a user would: real processes, real
// files, assertions on exit codes and the bytes left on disk.

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kBin = RISKEVAL_BIN;
const std::string kDataDir = RISKEVAL_DATA_DIR;
const std::string kConfigDir = RISKEVAL_CONFIG_DIR;

struct CliResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path fresh_dir(const std::string& tag) {
    static int counter = 0;
    const fs::path dir = fs::temp_directory_path() /
                         ("riskeval_cli_" + tag + "_" +
                          std::to_string(::getpid()) + "_" +
                          std::to_string(counter++));
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

CliResult run_cli(const std::string& args, const fs::path& scratch) {
    const fs::path out_file = scratch / "stdout.txt";
    const fs::path err_file = scratch / "stderr.txt";
    const std::string cmd = kBin + " " + args + " >" + out_file.string() +
                            " 2>" + err_file.string();
    const int rc = std::system(cmd.c_str());
    CliResult r;
    r.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    r.out = slurp(out_file);
    r.err = slurp(err_file);
    return r;
}

std::string gaussian_cfg() { return kConfigDir + "/gaussian20.json"; }

}  // namespace

TEST_CASE("protocol fixture round-trips byte for byte") {
    std::ifstream in(kDataDir + "/protocol_fixture.ndjson");
    REQUIRE(in.good());
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
        ++n;
        const json j = json::parse(line);
        if (j.contains("seed")) {
            const auto req = riskeval::decode_request(line);
            CHECK(riskeval::encode_request(req) == line);
        } else {
            const auto resp = riskeval::decode_response(line);
            CHECK(riskeval::encode_response(resp) == line);
        }
    }
    CHECK(n == 50);
}

TEST_CASE("estimate reruns are byte-identical and leave a manifest") {
    const fs::path root = fresh_dir("rerun");
    const std::string common = "estimate --method naive --config " +
                               gaussian_cfg() +
                               " --gamma -2 --n 2000 --seed 7 --out-dir ";
    const auto a = run_cli(common + (root / "a").string(), root);
    const auto b = run_cli(common + (root / "b").string(), root);
    REQUIRE(a.exit_code == 0);
    REQUIRE(b.exit_code == 0);
    const std::string ja = slurp(root / "a" / "estimate.json");
    CHECK(!ja.empty());
    CHECK(ja == slurp(root / "b" / "estimate.json"));

    const json manifest = json::parse(slurp(root / "a" / "manifest.json"));
    CHECK(manifest.at("subcommand") == "estimate");
    CHECK(manifest.at("seed") == 7);
    CHECK(!manifest.at("version").get<std::string>().empty());
    CHECK(manifest.at("outputs").size() == 1);

    const json est = json::parse(ja);
    CHECK(est.at("method") == "naive");
    CHECK(est.at("n_evals") == 2000);
    const double p = est.at("p_hat").get<double>();
    CHECK(p > 0.005);
    CHECK(p < 0.06);
    fs::remove_all(root);
}

TEST_CASE("usage errors exit 1 with a message") {
    const fs::path root = fresh_dir("usage");
    const auto unknown = run_cli("estimate --method naive --gamma -1 "
                                 "--n 10 --bogus-flag",
                                 root);
    CHECK(unknown.exit_code == 1);
    CHECK(!unknown.err.empty());

    const auto no_config =
        run_cli("estimate --method naive --gamma -1 --n 10 --out-dir " +
                    (root / "x").string(),
                root);
    CHECK(no_config.exit_code == 1);
    CHECK(no_config.err.find("--config") != std::string::npos);

    const auto bad_config = run_cli(
        "estimate --method naive --gamma -1 --n 10 --config /nonexistent.json "
        "--out-dir " +
            (root / "y").string(),
        root);
    CHECK(bad_config.exit_code == 1);

    const auto escape =
        run_cli("estimate --method ams --config " + gaussian_cfg() +
                    " --gamma -1 --failures-out ../evil.ndjson --out-dir " +
                    (root / "z").string(),
                root);
    CHECK(escape.exit_code == 1);
    CHECK(escape.err.find("out-dir") != std::string::npos);
    fs::remove_all(root);
}

TEST_CASE("an objective with an atom at the level stalls with exit 2") {
    const fs::path root = fresh_dir("stall");
    const auto r = run_cli("estimate --method ams --config " + kDataDir +
                               "/constant_objective.json --gamma 5 --n 100 "
                               "--seed 1 --out-dir " +
                               root.string(),
                           root);
    CHECK(r.exit_code == 2);
    CHECK(r.err.find("\"terminated\":\"stalled\"") != std::string::npos);
    // The run is still audited.
    CHECK(fs::exists(root / "manifest.json"));
    fs::remove_all(root);
}

TEST_CASE("external workers reproduce the in-process result bitwise") {
    const fs::path root = fresh_dir("backend");
    const std::string common = "estimate --method naive --config " +
                               gaussian_cfg() +
                               " --gamma -1 --n 600 --seed 5 --out-dir ";
    const auto local = run_cli(common + (root / "local").string(), root);
    REQUIRE(local.exit_code == 0);

    // The benchmark objective equals the first scenario coordinate, which
    // is exactly what the reference worker computes.
    const auto echo = run_cli(common + (root / "echo").string() +
                                  " --workers 2 --backend \"command:" + kBin +
                                  " echo-sim\"",
                              root);
    REQUIRE(echo.exit_code == 0);
    CHECK(slurp(root / "local" / "estimate.json") ==
          slurp(root / "echo" / "estimate.json"));

    // Workers that die mid-batch are restarted and the requests retried.
    const auto crashy = run_cli(common + (root / "crashy").string() +
                                    " --workers 2 --max-retries 3 "
                                    "--backend \"command:" +
                                    kBin + " echo-sim --crash-after 40\"",
                                root);
    REQUIRE(crashy.exit_code == 0);
    CHECK(slurp(root / "local" / "estimate.json") ==
          slurp(root / "crashy" / "estimate.json"));

    // A served config objective matches the in-process objective too.
    const auto served = run_cli(common + (root / "served").string() +
                                    " --workers 3 --backend \"command:" +
                                    kBin + " worker --config " +
                                    gaussian_cfg() + "\"",
                                root);
    REQUIRE(served.exit_code == 0);
    CHECK(slurp(root / "local" / "estimate.json") ==
          slurp(root / "served" / "estimate.json"));
    fs::remove_all(root);
}

TEST_CASE("worker count does not change the bytes") {
    const fs::path root = fresh_dir("workers");
    const std::string common = "estimate --method ams --config " +
                               gaussian_cfg() +
                               " --gamma -2.5 --n 300 --seed 9 --out-dir ";
    const auto w1 = run_cli(common + (root / "w1").string() + " --workers 1",
                            root);
    const auto w4 = run_cli(common + (root / "w4").string() + " --workers 4",
                            root);
    REQUIRE(w1.exit_code == 0);
    REQUIRE(w4.exit_code == 0);
    CHECK(slurp(root / "w1" / "estimate.json") ==
          slurp(root / "w4" / "estimate.json"));
    CHECK(slurp(root / "w1" / "ams.json") == slurp(root / "w4" / "ams.json"));
    fs::remove_all(root);
}

TEST_CASE("failure samples feed training, estimation and analysis") {
    const fs::path root = fresh_dir("pipeline");

    const auto ams = run_cli(
        "estimate --method ams --config " + gaussian_cfg() +
            " --gamma -2.5 --n 400 --seed 13 --failures-out failures.ndjson "
            "--out-dir " +
            (root / "ams").string(),
        root);
    REQUIRE(ams.exit_code == 0);
    const std::string failures = (root / "ams" / "failures.ndjson").string();
    REQUIRE(fs::exists(failures));

    const auto train = run_cli("train-flow --samples " + failures +
                                   " --epochs 6 --seed 2 --out-dir " +
                                   (root / "flow").string(),
                               root);
    REQUIRE(train.exit_code == 0);
    const json train_summary = json::parse(train.out);
    CHECK(train_summary.at("n_samples").get<int>() > 100);
    CHECK(train_summary.at("n_unique").get<int>() <=
          train_summary.at("n_samples").get<int>());
    const std::string model = (root / "flow" / "flow.json").string();
    REQUIRE(fs::exists(model));

    const auto is = run_cli("is-estimate --config " + gaussian_cfg() +
                                " --model " + model +
                                " --gamma -2.5 --m 3000 --alpha 0.2 --seed 3 "
                                "--out-dir " +
                                (root / "is").string(),
                            root);
    REQUIRE(is.exit_code == 0);
    const json est = json::parse(slurp(root / "is" / "estimate.json"));
    CHECK(est.at("method") == "is");
    const double p = est.at("p_hat").get<double>();
    // True value is close to 6.2e-3; this only guards against nonsense.
    CHECK(p > 1e-4);
    CHECK(p < 0.1);
    CHECK(est.at("hits").get<int>() > 100);

    const auto alpha_one = run_cli(
        "is-estimate --config " + gaussian_cfg() + " --model " + model +
            " --gamma -2.5 --m 200 --alpha 1 --seed 3 --out-dir " +
            (root / "is1").string(),
        root);
    CHECK(alpha_one.exit_code == 0);
    CHECK(alpha_one.err.find("Monte Carlo") != std::string::npos);

    const auto analyze = run_cli("analyze --samples " + failures +
                                     " --model " + model +
                                     " --k 2 --components 2 --seed 4 "
                                     "--out-dir " +
                                     (root / "an").string(),
                                 root);
    REQUIRE(analyze.exit_code == 0);
    const json summary = json::parse(slurp(root / "an" / "summary.json"));
    CHECK(summary.at("explained").size() == 2);
    CHECK(summary.at("cluster_sizes").size() == 2);
    CHECK(summary.at("likelihoods").at("clusters").size() == 2);
    const std::string csv = slurp(root / "an" / "analyze.csv");
    CHECK(csv.rfind("id,pc1,pc2,cluster\n", 0) == 0);

    fs::remove_all(root);
}

TEST_CASE("run sets compare into a csv table") {
    const fs::path root = fresh_dir("compare");
    const auto a = run_cli("estimate --method naive --config " +
                               gaussian_cfg() +
                               " --gamma -2 --n 1500 --repeats 3 --seed 1 "
                               "--out-dir " +
                               (root / "a").string(),
                           root);
    const auto b = run_cli("estimate --method naive --config " +
                               gaussian_cfg() +
                               " --gamma -2 --n 1500 --repeats 3 --seed 2 "
                               "--out-dir " +
                               (root / "b").string(),
                           root);
    REQUIRE(a.exit_code == 0);
    REQUIRE(b.exit_code == 0);

    const auto cmp = run_cli((root / "a" / "runset.json").string() + " " +
                                 (root / "b" / "runset.json").string(),
                             root);
    // Missing subcommand is a usage error.
    CHECK(cmp.exit_code == 1);

    const auto ok = run_cli("compare " +
                                (root / "a" / "runset.json").string() + " " +
                                (root / "b" / "runset.json").string() +
                                " --out-dir " + (root / "out").string(),
                            root);
    REQUIRE(ok.exit_code == 0);
    const std::string csv = slurp(root / "out" / "compare.csv");
    CHECK(csv.rfind("gamma,method,mean,variance,ratio\n", 0) == 0);
    // Two data rows, baseline ratio exactly 1.
    std::istringstream lines(csv);
    std::string line;
    std::getline(lines, line);
    std::getline(lines, line);
    CHECK(line.substr(line.rfind(',') + 1) == "1.0");
    fs::remove_all(root);
}

TEST_CASE("sampling and rollout dumps parse back") {
    const fs::path root = fresh_dir("dumps");
    const auto sample = run_cli("sample --config " + kConfigDir +
                                    "/desk.json --n 8 --seed 2 --out-dir " +
                                    (root / "s").string(),
                                root);
    REQUIRE(sample.exit_code == 0);
    std::ifstream in(root / "s" / "samples.ndjson");
    std::string line;
    int rows = 0;
    while (std::getline(in, line)) {
        const json j = json::parse(line);
        CHECK(j.at("id") == rows);
        CHECK(j.at("u").size() == 30);
        CHECK(j.at("x").size() == 30);
        ++rows;
    }
    CHECK(rows == 8);

    const auto sim = run_cli("simulate --config " + kConfigDir +
                                 "/desk.json --seed 9 --out-dir " +
                                 (root / "t").string(),
                             root);
    REQUIRE(sim.exit_code == 0);
    std::ifstream tin(root / "t" / "trace.ndjson");
    REQUIRE(std::getline(tin, line));
    const json meta = json::parse(line);
    CHECK(meta.at("dt") == 0.05);
    CHECK(meta.at("min_ttc").get<double>() >= 0.0);
    int frames = 0;
    while (std::getline(tin, line)) {
        const json f = json::parse(line);
        CHECK(f.at("vehicles").size() == 6);
        ++frames;
    }
    CHECK(frames == meta.at("n_frames").get<int>());

    // Simulating a non-highway config is a usage error.
    const auto wrong = run_cli("simulate --config " + gaussian_cfg() +
                                   " --out-dir " + (root / "u").string(),
                               root);
    CHECK(wrong.exit_code == 1);
    fs::remove_all(root);
}
