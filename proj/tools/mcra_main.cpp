// Command-line front end: generate | train | eval | solve | bench | report.
// Exit codes: 0 success, 1 usage error, 2 I/O or format error, 3 numeric
// failure, 4 plan error. One-line diagnostics go to stderr.

#include <algorithm>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mcra/baselines.hpp"
#include "mcra/channel.hpp"
#include "mcra/errors.hpp"
#include "mcra/ewmmse.hpp"
#include "mcra/gnn.hpp"
#include "mcra/grid_search.hpp"
#include "mcra/harness.hpp"
#include "mcra/parallel.hpp"
#include "mcra/rate.hpp"
#include "mcra/trainer.hpp"

namespace {

struct GenerateArgs {
    std::size_t d = 0, m = 0, samples = 0;
    std::uint64_t seed = 1;
    std::string out;
    double area = 100.0, dmin = 2.0, dmax = 10.0, gamma = 3.0;
    double noise = 1e-4, pmax = 1.0;
};

struct TrainArgs {
    std::string data, val, out;
    std::size_t epochs = 50, batch = 64, rounds = 3;
    double lr = 1e-3, lambda_lr = 1e-3;
    std::string dual_on = "pre", optimizer = "sgd";
    std::uint64_t seed = 1;
};

struct EvalArgs {
    std::string model, data, out;
};

struct SolveArgs {
    std::string algo, data, out, model;
    std::size_t grid_levels = 21;
};

struct BenchArgs {
    std::string plan, out;
    std::size_t reps = 1;
};

struct ReportArgs {
    std::vector<std::string> inputs;
    std::string out;
};

void cmd_generate(const GenerateArgs& a, std::size_t threads) {
    mcra::NetworkConfig config;
    config.pairs = a.d;
    config.channels = a.m;
    config.seed = a.seed;
    config.area_side = a.area;
    config.d_min = a.dmin;
    config.d_max = a.dmax;
    config.gamma = a.gamma;
    config.noise_power = a.noise;
    config.p_max = a.pmax;
    config.validate();
    if (a.samples == 0) throw mcra::contract_error("generate: --samples must be >= 1");

    mcra::Dataset ds;
    ds.config = config;
    ds.samples.resize(a.samples);
    // Every sample has its own counter-derived stream, so parallel filling
    // is bit-identical to the sequential loop.
    mcra::parallel_for(a.samples, threads,
                       [&](std::size_t k) { ds.samples[k] = mcra::generate_sample(config, k); });
    mcra::write_dataset(ds, a.out);
    std::cout << "wrote " << a.out << " (" << a.samples << " samples, D=" << a.d << ", M=" << a.m
              << ", seed=" << a.seed << ")\n";
}

void cmd_train(const TrainArgs& a) {
    const mcra::Dataset train_data = mcra::read_dataset(a.data);
    const mcra::Dataset val_data = mcra::read_dataset(a.val);

    mcra::TrainConfig tc;
    tc.epochs = a.epochs;
    tc.batch_size = a.batch;
    tc.learning_rate = a.lr;
    tc.dual_step = a.lambda_lr;
    tc.seed = a.seed;
    if (a.optimizer == "sgd") {
        tc.optimizer = mcra::Optimizer::sgd;
    } else if (a.optimizer == "adam") {
        tc.optimizer = mcra::Optimizer::adam;
    } else {
        throw mcra::contract_error("train: unknown --optimizer '" + a.optimizer + "'");
    }
    if (a.dual_on == "pre") {
        tc.dual_mode = mcra::DualMode::pre;
    } else if (a.dual_on == "post") {
        tc.dual_mode = mcra::DualMode::post;
    } else {
        throw mcra::contract_error("train: unknown --dual-on '" + a.dual_on + "'");
    }

    mcra::GnnModel init = mcra::init_model(a.seed, a.rounds);
    mcra::TrainResult result = mcra::train(train_data, val_data, std::move(init), tc);
    mcra::save_model(result.model, a.out);
    mcra::write_text_file(a.out + ".train_log.csv", result.log.csv());
    std::cout << "saved " << a.out << " (best epoch " << result.best_epoch
              << ", validation sum rate " << mcra::format_fixed(result.best_val, 6) << ")\n";
}

void cmd_eval(const EvalArgs& a) {
    const mcra::GnnModel model = mcra::load_model(a.model);
    const mcra::Dataset data = mcra::read_dataset(a.data);
    const mcra::EvalSummary summary = mcra::evaluate(model, data);
    mcra::write_text_file(a.out, summary.csv());
    std::cout << "mean_sum_rate=" << mcra::format_fixed(summary.mean_rate, 6)
              << " std=" << mcra::format_fixed(summary.std_rate, 6)
              << " violations=" << summary.violations
              << " mean_wall_us=" << mcra::format_fixed(summary.mean_wall_us, 3) << "\n";
}

void cmd_solve(const SolveArgs& a) {
    const mcra::Dataset data = mcra::read_dataset(a.data);
    const mcra::GnnModel* model_ptr = nullptr;
    mcra::GnnModel model;
    if (a.algo == "icp") {
        if (a.model.empty()) {
            throw mcra::contract_error("solve: --algo icp needs --model (ICP is a learned policy)");
        }
        model = mcra::load_model(a.model);
        model_ptr = &model;
    }
    static const char* known[] = {"ewmmse", "heuristic", "equal", "icp", "bruteforce"};
    if (std::find(std::begin(known), std::end(known), a.algo) == std::end(known)) {
        throw mcra::contract_error("solve: unknown --algo '" + a.algo + "'");
    }
    mcra::SolverOptions solver;
    const mcra::AlgoEval eval =
        mcra::run_algorithm_on_dataset(a.algo, data, model_ptr, solver, a.grid_levels);
    std::ostringstream rows;
    rows << "index,weighted_sum_rate,feasible\n";
    for (std::size_t k = 0; k < eval.rates.size(); ++k) {
        rows << k << ',' << mcra::TrainLog::format_double(eval.rates[k]) << ','
             << static_cast<int>(eval.feasible[k]) << '\n';
    }
    mcra::write_text_file(a.out, rows.str());
    std::cout << a.algo << ": mean_sum_rate=" << mcra::format_fixed(eval.mean_rate, 6)
              << " std=" << mcra::format_fixed(eval.std_rate, 6)
              << " violations=" << eval.violations
              << " mean_wall_us=" << mcra::format_fixed(eval.mean_wall_us, 3) << "\n";
}

void cmd_bench(const BenchArgs& a) {
    mcra::ExperimentPlan plan = mcra::load_plan(a.plan);
    if (!a.out.empty()) plan.output_dir = a.out;
    const auto tables = mcra::run_bench(plan, a.reps);
    std::cout << "wrote " << plan.output_dir << "/report.md (" << tables.size() << " tables)\n";
}

mcra::FormattedTable table_from_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw mcra::io_error("report: cannot open " + path);
    mcra::FormattedTable table;
    table.title = std::filesystem::path(path).stem().string();
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::string field;
        std::istringstream ls(line);
        while (std::getline(ls, field, ',')) fields.push_back(field);
        if (line.back() == ',') fields.push_back("");
        if (first) {
            table.columns = std::move(fields);
            first = false;
        } else {
            table.rows.push_back(std::move(fields));
        }
    }
    if (first) throw mcra::format_error("report: " + path + " has no header row");
    return table;
}

void cmd_report(const ReportArgs& a) {
    std::vector<mcra::FormattedTable> tables;
    for (const auto& path : a.inputs) tables.push_back(table_from_csv(path));
    mcra::emit_report(tables, a.out);
    std::cout << "wrote " << a.out << " (" << tables.size() << " tables)\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Joint channel and power allocation for multi-channel interference networks"};
    app.require_subcommand(1);
    std::size_t threads = mcra::default_thread_count();
    app.add_option("--threads", threads, "Worker-parallelism cap")->capture_default_str();

    GenerateArgs gen;
    auto* cmd_gen = app.add_subcommand("generate", "Sample a channel-gain dataset");
    cmd_gen->add_option("--d", gen.d, "Transceiver pairs")->required();
    cmd_gen->add_option("--m", gen.m, "Channels")->required();
    cmd_gen->add_option("--samples", gen.samples, "Sample count")->required();
    cmd_gen->add_option("--seed", gen.seed, "Dataset seed")->capture_default_str();
    cmd_gen->add_option("--out", gen.out, "Output path (.mcra)")->required();
    cmd_gen->add_option("--area", gen.area, "Area side length, m")->capture_default_str();
    cmd_gen->add_option("--dmin", gen.dmin, "Min pair distance, m")->capture_default_str();
    cmd_gen->add_option("--dmax", gen.dmax, "Max pair distance, m")->capture_default_str();
    cmd_gen->add_option("--gamma", gen.gamma, "Path-loss exponent")->capture_default_str();
    cmd_gen->add_option("--noise", gen.noise, "Noise power, W")->capture_default_str();
    cmd_gen->add_option("--pmax", gen.pmax, "Per-user power budget, W")->capture_default_str();

    TrainArgs tra;
    auto* cmd_tra = app.add_subcommand("train", "Train the allocation network (primal-dual)");
    cmd_tra->add_option("--data", tra.data, "Training dataset (.mcra)")->required();
    cmd_tra->add_option("--val", tra.val, "Validation dataset (.mcra)")->required();
    cmd_tra->add_option("--out", tra.out, "Checkpoint output path (.json)")->required();
    cmd_tra->add_option("--epochs", tra.epochs, "Training epochs")->capture_default_str();
    cmd_tra->add_option("--batch", tra.batch, "Batch size")->capture_default_str();
    cmd_tra->add_option("--lr", tra.lr, "Primal step size")->capture_default_str();
    cmd_tra->add_option("--lambda-lr", tra.lambda_lr, "Dual step size")->capture_default_str();
    cmd_tra->add_option("--rounds", tra.rounds, "Message-passing rounds")->capture_default_str();
    cmd_tra->add_option("--dual-on", tra.dual_on, "Dual term on pre|post powers")
        ->capture_default_str();
    cmd_tra->add_option("--optimizer", tra.optimizer, "sgd|adam")->capture_default_str();
    cmd_tra->add_option("--seed", tra.seed, "Init + shuffle seed")->capture_default_str();

    EvalArgs eva;
    auto* cmd_eva = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    cmd_eva->add_option("--model", eva.model, "Checkpoint path")->required();
    cmd_eva->add_option("--data", eva.data, "Dataset (.mcra)")->required();
    cmd_eva->add_option("--out", eva.out, "Per-instance CSV output")->required();

    SolveArgs sol;
    auto* cmd_sol = app.add_subcommand("solve", "Run a solver/baseline over a dataset");
    cmd_sol->add_option("--algo", sol.algo, "ewmmse|heuristic|equal|icp|bruteforce")->required();
    cmd_sol->add_option("--data", sol.data, "Dataset (.mcra)")->required();
    cmd_sol->add_option("--out", sol.out, "Per-instance CSV output")->required();
    cmd_sol->add_option("--model", sol.model, "Checkpoint (icp only)");
    cmd_sol->add_option("--grid-levels", sol.grid_levels, "Brute-force levels per variable")
        ->capture_default_str();

    BenchArgs ben;
    auto* cmd_ben = app.add_subcommand("bench", "Run an experiment plan");
    cmd_ben->add_option("--plan", ben.plan, "Plan JSON path")->required();
    cmd_ben->add_option("--out", ben.out, "Output directory (overrides plan)");
    cmd_ben->add_option("--reps", ben.reps, "Timing repetitions")->capture_default_str();

    ReportArgs rep;
    auto* cmd_rep = app.add_subcommand("report", "Combine result CSVs into a markdown report");
    cmd_rep->add_option("--inputs", rep.inputs, "Input CSV paths")->required()->expected(-1);
    cmd_rep->add_option("--out", rep.out, "Report output path (.md)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // prints help, exit 0
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        std::cerr << app.help() << "\n";
        return 1;
    }

    try {
        if (cmd_gen->parsed()) cmd_generate(gen, threads);
        if (cmd_tra->parsed()) cmd_train(tra);
        if (cmd_eva->parsed()) cmd_eval(eva);
        if (cmd_sol->parsed()) cmd_solve(sol);
        if (cmd_ben->parsed()) cmd_bench(ben);
        if (cmd_rep->parsed()) cmd_report(rep);
    } catch (const mcra::contract_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const mcra::io_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const mcra::format_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const mcra::plan_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const mcra::numeric_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
