#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

// Black-box tests for the command-line front end. Each case drives the real
// binary through std::system and checks the documented exit codes:
// 0 success, 1 usage, 2 I/O or format, 3 numeric, 4 plan.

namespace {

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& name) : path(name) {
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string str(const std::string& leaf) const { return (path / leaf).string(); }
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

int run_cli(const TempDir& dir, const std::string& args, std::string* output = nullptr) {
    const std::string capture = dir.str("cli_output.txt");
    const std::string cmd =
        std::string(MCRA_CLI_PATH) + (args.empty() ? "" : " " + args) + " > " + capture + " 2>&1";
    const int status = std::system(cmd.c_str());
    if (output != nullptr) *output = slurp(capture);
    if (status == -1) return -1;
    if (WIFEXITED(status)) return WEXITSTATUS(status);
    return -1;
}

}  // namespace

TEST_CASE("missing subcommand and help behave per contract") {
    TempDir dir("cli_usage");
    std::string out;
    REQUIRE(run_cli(dir, "", &out) == 1);
    REQUIRE(run_cli(dir, "--help", &out) == 0);
    REQUIRE(out.find("generate") != std::string::npos);
    REQUIRE(run_cli(dir, "generate", &out) == 1);  // required flags missing
    REQUIRE(run_cli(dir, "frobnicate", &out) == 1);
}

TEST_CASE("dataset generation is reproducible byte for byte") {
    TempDir dir("cli_generate");
    const std::string a = dir.str("a.mcra");
    const std::string b = dir.str("b.mcra");
    REQUIRE(run_cli(dir, "generate --d 2 --m 2 --samples 3 --seed 5 --out " + a) == 0);
    REQUIRE(run_cli(dir, "generate --d 2 --m 2 --samples 3 --seed 5 --out " + b) == 0);
    REQUIRE(std::filesystem::exists(a));
    REQUIRE(slurp(a) == slurp(b));

    const std::string c = dir.str("c.mcra");
    REQUIRE(run_cli(dir, "generate --d 2 --m 2 --samples 3 --seed 6 --out " + c) == 0);
    REQUIRE(slurp(a) != slurp(c));

    // Invalid scenario parameters are usage errors.
    std::string out;
    REQUIRE(run_cli(dir, "generate --d 0 --m 2 --samples 3 --out " + dir.str("x.mcra"), &out) ==
            1);
    REQUIRE(out.find("error:") != std::string::npos);
}

TEST_CASE("solving writes per-instance rows and maps failures to exit codes") {
    TempDir dir("cli_solve");
    const std::string data = dir.str("data.mcra");
    REQUIRE(run_cli(dir, "generate --d 2 --m 2 --samples 4 --seed 9 --out " + data) == 0);

    const std::string rows_path = dir.str("equal.csv");
    std::string out;
    REQUIRE(run_cli(dir, "solve --algo equal --data " + data + " --out " + rows_path, &out) == 0);
    REQUIRE(out.find("mean_sum_rate=") != std::string::npos);
    const std::string rows = slurp(rows_path);
    REQUIRE(rows.rfind("index,weighted_sum_rate,feasible\n", 0) == 0);

    REQUIRE(run_cli(dir, "solve --algo ewmmse --data " + data + " --out " + dir.str("w.csv")) ==
            0);

    // Missing dataset -> I/O error.
    REQUIRE(run_cli(dir, "solve --algo equal --data " + dir.str("nope.mcra") + " --out " +
                             dir.str("x.csv")) == 2);
    // Unknown algorithm -> usage error.
    REQUIRE(run_cli(dir, "solve --algo warp --data " + data + " --out " + dir.str("x.csv")) == 1);
    // ICP without a checkpoint -> usage error.
    REQUIRE(run_cli(dir, "solve --algo icp --data " + data + " --out " + dir.str("x.csv")) == 1);

    // Corrupt dataset -> format error.
    const std::string broken = dir.str("broken.mcra");
    std::ofstream(broken, std::ios::binary) << "not a dataset";
    REQUIRE(run_cli(dir, "solve --algo equal --data " + broken + " --out " + dir.str("x.csv")) ==
            2);
}

TEST_CASE("training, evaluation, and reporting round-trip through the CLI") {
    TempDir dir("cli_train");
    const std::string train = dir.str("train.mcra");
    const std::string val = dir.str("val.mcra");
    REQUIRE(run_cli(dir, "generate --d 2 --m 2 --samples 8 --seed 11 --out " + train) == 0);
    REQUIRE(run_cli(dir, "generate --d 2 --m 2 --samples 4 --seed 12 --out " + val) == 0);

    const std::string model = dir.str("model.json");
    std::string out;
    REQUIRE(run_cli(dir,
                    "train --data " + train + " --val " + val + " --out " + model +
                        " --epochs 2 --batch 4 --lr 0.001 --seed 3",
                    &out) == 0);
    REQUIRE(out.find("best epoch") != std::string::npos);
    REQUIRE(std::filesystem::exists(model));
    REQUIRE(std::filesystem::exists(model + ".train_log.csv"));
    const std::string log = slurp(model + ".train_log.csv");
    REQUIRE(log.rfind("epoch,train_loss,val_sum_rate,mean_violation,mean_lambda,wall_seconds\n",
                      0) == 0);

    const std::string eval_csv = dir.str("eval.csv");
    REQUIRE(run_cli(dir, "eval --model " + model + " --data " + val + " --out " + eval_csv,
                    &out) == 0);
    REQUIRE(out.find("mean_sum_rate=") != std::string::npos);
    REQUIRE(slurp(eval_csv).rfind("index,weighted_sum_rate,max_user_power,feasible\n", 0) == 0);

    const std::string report = dir.str("report.md");
    REQUIRE(run_cli(dir, "report --inputs " + eval_csv + " --out " + report) == 0);
    const std::string text = slurp(report);
    REQUIRE(text.find("# Experiment report") != std::string::npos);
    REQUIRE(text.find("## eval") != std::string::npos);

    // A runaway step size is a numeric failure.
    REQUIRE(run_cli(dir, "train --data " + train + " --val " + val + " --out " +
                             dir.str("diverged.json") + " --epochs 3 --batch 4 --lr 1e250") == 3);
}

TEST_CASE("bench runs a plan end to end and rejects bad plans") {
    TempDir dir("cli_bench");
    const std::string plan = dir.str("plan.json");
    std::ofstream(plan) << R"({
        "output_dir": ")" << dir.str("results")
                      << R"(",
        "algorithms": ["heuristic", "equal"],
        "cells": [{"pairs": 2, "channels": 2, "test_samples": 4, "seed": 21}]
    })";
    std::string out;
    REQUIRE(run_cli(dir, "bench --plan " + plan + " --reps 1", &out) == 0);
    REQUIRE(std::filesystem::exists(dir.str("results") + "/sumrate.csv"));
    REQUIRE(std::filesystem::exists(dir.str("results") + "/timing.csv"));
    REQUIRE(std::filesystem::exists(dir.str("results") + "/report.md"));

    REQUIRE(run_cli(dir, "bench --plan " + dir.str("missing.json")) == 2);

    const std::string bad_plan = dir.str("bad_plan.json");
    std::ofstream(bad_plan) << R"({"algorithms": ["quantum"],
                                   "cells": [{"pairs": 2, "channels": 2}]})";
    REQUIRE(run_cli(dir, "bench --plan " + bad_plan) == 4);

    // A plan that needs a model it cannot find is a plan error too.
    const std::string no_model = dir.str("no_model.json");
    std::ofstream(no_model) << R"({"output_dir": ")" << dir.str("r2")
                            << R"(", "algorithms": ["gnn"],
                                "cells": [{"pairs": 2, "channels": 2, "test_samples": 2}]})";
    REQUIRE(run_cli(dir, "bench --plan " + no_model) == 4);
}
