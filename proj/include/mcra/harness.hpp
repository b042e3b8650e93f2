#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcra/baselines.hpp"
#include "mcra/channel.hpp"
#include "mcra/errors.hpp"
#include "mcra/ewmmse.hpp"
#include "mcra/gnn.hpp"
#include "mcra/grid_search.hpp"
#include "mcra/rate.hpp"
#include "mcra/trainer.hpp"

namespace mcra {

// Experiment orchestration: each plan cell names a (D, M) test set plus the
// artifacts (models) the learned algorithms need; every algorithm in a cell
// runs on the identical instances, and all reported numbers are formatted
// once so CSV and markdown stay verbatim-equal.

// --- plan --------------------------------------------------------------------

struct TrainProfile {
    std::size_t samples = 2000;
    std::size_t val_samples = 200;
    // Dataset seeds are offset far from the test seed because nearby seeds
    // share per-sample streams under the seed ^ (k + 1) derivation.
    std::optional<std::uint64_t> data_seed;  // default: test seed + 2^20
    std::optional<std::uint64_t> val_seed;   // default: test seed + 2^21
    std::size_t rounds = 3;
    std::uint64_t init_seed = 7;
    TrainConfig config;
};

struct CellSpec {
    std::size_t pairs = 0;
    std::size_t channels = 0;
    std::size_t test_samples = 200;
    std::uint64_t seed = 1;
    std::string data_path;       // optional: load this dataset instead of generating
    std::string model_path;      // optional: checkpoint for "gnn"
    std::string icp_model_path;  // optional: checkpoint for "icp"
    std::optional<TrainProfile> train;  // fresh-training fallback for gnn/icp
    // Optional generator overrides (NetworkConfig defaults otherwise).
    std::optional<double> area_side, d_min, d_max, gamma, noise_power, p_max;

    std::string label() const {
        return "D=" + std::to_string(pairs) + ", M=" + std::to_string(channels);
    }
};

/// Optional transfer study: one anchor model applied to target cells, each
/// compared against a natively trained model.
struct GeneralizationSpec {
    CellSpec anchor;
    std::vector<CellSpec> cells;
};

struct ExperimentPlan {
    std::string output_dir = "results";
    std::vector<std::string> algorithms;  // gnn | icp | ewmmse | heuristic | equal | bruteforce
    std::vector<CellSpec> cells;
    std::optional<GeneralizationSpec> generalization;
    std::size_t grid_levels = 21;
    SolverOptions solver;

    void validate() const {
        if (algorithms.empty()) throw plan_error("plan: no algorithms listed");
        if (cells.empty()) throw plan_error("plan: no cells listed");
        static const char* known[] = {"gnn", "icp", "ewmmse", "heuristic", "equal", "bruteforce"};
        for (const auto& a : algorithms) {
            if (std::find(std::begin(known), std::end(known), a) == std::end(known)) {
                throw plan_error("plan: unknown algorithm '" + a + "'");
            }
        }
    }
};

namespace detail {

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig tc;
    tc.epochs = j.value("epochs", tc.epochs);
    tc.batch_size = j.value("batch", tc.batch_size);
    tc.learning_rate = j.value("lr", tc.learning_rate);
    tc.dual_step = j.value("dual_lr", tc.dual_step);
    tc.seed = j.value("seed", tc.seed);
    tc.val_every = j.value("val_every", tc.val_every);
    const std::string opt = j.value("optimizer", "sgd");
    if (opt == "sgd") {
        tc.optimizer = Optimizer::sgd;
    } else if (opt == "adam") {
        tc.optimizer = Optimizer::adam;
    } else {
        throw format_error("plan: unknown optimizer '" + opt + "'");
    }
    const std::string mode = j.value("dual_mode", "pre");
    if (mode == "pre") {
        tc.dual_mode = DualMode::pre;
    } else if (mode == "post") {
        tc.dual_mode = DualMode::post;
    } else {
        throw format_error("plan: unknown dual mode '" + mode + "'");
    }
    return tc;
}

}  // namespace detail

namespace detail {

inline CellSpec cell_from_json(const nlohmann::json& c) {
    CellSpec cell;
    cell.pairs = c.value("pairs", std::size_t{0});
    cell.channels = c.value("channels", std::size_t{0});
    cell.test_samples = c.value("test_samples", cell.test_samples);
    cell.seed = c.value("seed", cell.seed);
    cell.data_path = c.value("data", std::string{});
    cell.model_path = c.value("model", std::string{});
    cell.icp_model_path = c.value("icp_model", std::string{});
    if (c.contains("area")) cell.area_side = c["area"].get<double>();
    if (c.contains("dmin")) cell.d_min = c["dmin"].get<double>();
    if (c.contains("dmax")) cell.d_max = c["dmax"].get<double>();
    if (c.contains("gamma")) cell.gamma = c["gamma"].get<double>();
    if (c.contains("noise")) cell.noise_power = c["noise"].get<double>();
    if (c.contains("pmax")) cell.p_max = c["pmax"].get<double>();
    if (c.contains("train")) {
        const auto& t = c["train"];
        TrainProfile profile;
        profile.samples = t.value("samples", profile.samples);
        profile.val_samples = t.value("val_samples", profile.val_samples);
        if (t.contains("data_seed")) profile.data_seed = t["data_seed"].get<std::uint64_t>();
        if (t.contains("val_seed")) profile.val_seed = t["val_seed"].get<std::uint64_t>();
        profile.rounds = t.value("rounds", profile.rounds);
        profile.init_seed = t.value("init_seed", profile.init_seed);
        profile.config = train_config_from_json(t);
        cell.train = profile;
    }
    return cell;
}

}  // namespace detail

inline ExperimentPlan plan_from_json(const nlohmann::json& doc,
                                     const std::string& origin = "<memory>") {
    if (!doc.is_object()) throw format_error("plan " + origin + ": not a JSON object");
    ExperimentPlan plan;
    try {
        plan.output_dir = doc.value("output_dir", plan.output_dir);
        plan.grid_levels = doc.value("grid_levels", plan.grid_levels);
        if (doc.contains("algorithms")) {
            plan.algorithms = doc["algorithms"].get<std::vector<std::string>>();
        }
        if (!doc.contains("cells") || !doc["cells"].is_array()) {
            throw format_error("plan " + origin + ": missing cells array");
        }
        for (const auto& c : doc["cells"]) plan.cells.push_back(detail::cell_from_json(c));
        if (doc.contains("generalization")) {
            const auto& g = doc["generalization"];
            if (!g.is_object() || !g.contains("anchor") || !g.contains("cells")) {
                throw format_error("plan " + origin +
                                   ": generalization needs 'anchor' and 'cells'");
            }
            GeneralizationSpec spec;
            spec.anchor = detail::cell_from_json(g["anchor"]);
            for (const auto& c : g["cells"]) spec.cells.push_back(detail::cell_from_json(c));
            plan.generalization = std::move(spec);
        }
    } catch (const nlohmann::json::exception& e) {
        throw format_error("plan " + origin + ": " + e.what());
    }
    plan.validate();
    return plan;
}

inline ExperimentPlan load_plan(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("load_plan: cannot open " + path);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw format_error("plan " + path + ": parse error: " + e.what());
    }
    return plan_from_json(doc, path);
}

// --- shared plumbing -----------------------------------------------------------

inline std::uint64_t fnv1a_hash(const std::string& bytes) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline void write_text_file(const std::string& path, const std::string& content) {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(p.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw io_error("cannot open " + path + " for writing");
    out << content;
    if (!out) throw io_error("write failed for " + path);
}

inline std::string format_fixed(double v, int precision) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
    return buf;
}

inline std::string format_hash(std::uint64_t h) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

/// Linear-interpolated quantile of a sorted vector.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) throw contract_error("quantile_sorted: empty sample");
    if (sorted.size() == 1) return sorted[0];
    const double h = q * static_cast<double>(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(h);
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = h - static_cast<double>(lo);
    return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

/// Every value is formatted exactly once; CSV and markdown render the same
/// strings.
struct FormattedTable {
    std::string title;
    std::string note;
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;

    std::string csv() const {
        std::ostringstream out;
        for (std::size_t c = 0; c < columns.size(); ++c) {
            out << (c ? "," : "") << columns[c];
        }
        out << '\n';
        for (const auto& row : rows) {
            for (std::size_t c = 0; c < row.size(); ++c) out << (c ? "," : "") << row[c];
            out << '\n';
        }
        return out.str();
    }

    std::string markdown() const {
        std::ostringstream out;
        out << "| ";
        for (std::size_t c = 0; c < columns.size(); ++c) out << (c ? " | " : "") << columns[c];
        out << " |\n|";
        for (std::size_t c = 0; c < columns.size(); ++c) out << " --- |";
        out << '\n';
        for (const auto& row : rows) {
            out << "| ";
            for (std::size_t c = 0; c < row.size(); ++c) out << (c ? " | " : "") << row[c];
            out << " |\n";
        }
        return out.str();
    }
};

// --- cell resolution -----------------------------------------------------------

struct CellContext {
    CellSpec spec;
    NetworkConfig config;
    Dataset test;
    std::uint64_t dataset_hash = 0;
    std::optional<GnnModel> gnn_model;
    std::optional<GnnModel> icp_model;
};

namespace detail {

inline NetworkConfig cell_config(const CellSpec& cell) {
    NetworkConfig config;
    config.pairs = cell.pairs;
    config.channels = cell.channels;
    config.seed = cell.seed;
    if (cell.area_side) config.area_side = *cell.area_side;
    if (cell.d_min) config.d_min = *cell.d_min;
    if (cell.d_max) config.d_max = *cell.d_max;
    if (cell.gamma) config.gamma = *cell.gamma;
    if (cell.noise_power) config.noise_power = *cell.noise_power;
    if (cell.p_max) config.p_max = *cell.p_max;
    return config;
}

inline GnnModel train_fresh_model(const CellSpec& cell, const NetworkConfig& config,
                                  OutputPolicy policy, const std::string& save_path) {
    const TrainProfile& profile = *cell.train;
    NetworkConfig train_cfg = config;
    train_cfg.seed = profile.data_seed.value_or(cell.seed + (1ULL << 20));
    NetworkConfig val_cfg = config;
    val_cfg.seed = profile.val_seed.value_or(cell.seed + (1ULL << 21));
    const Dataset train_data = generate_dataset(train_cfg, profile.samples);
    const Dataset val_data = generate_dataset(val_cfg, profile.val_samples);
    GnnModel init = init_model(profile.init_seed, profile.rounds, Aggregation::max,
                               FeatureTransform::log_standard, policy);
    TrainResult trained = train(train_data, val_data, std::move(init), profile.config);
    if (!save_path.empty()) {
        save_model(trained.model, save_path);
        write_text_file(save_path + ".train_log.csv", trained.log.csv());
    }
    return std::move(trained.model);
}

}  // namespace detail

/// Generates/loads the cell's test set and resolves the models the requested
/// algorithms need. Freshly trained models are saved under output_dir.
inline CellContext resolve_cell(const ExperimentPlan& plan, const CellSpec& cell) {
    CellContext ctx;
    ctx.spec = cell;
    if (!cell.data_path.empty()) {
        ctx.test = read_dataset(cell.data_path);
        ctx.config = ctx.test.config;
        ctx.spec.pairs = ctx.config.pairs;
        ctx.spec.channels = ctx.config.channels;
    } else {
        if (cell.pairs == 0 || cell.channels == 0) {
            throw plan_error("plan cell (" + cell.label() + "): needs pairs/channels or data");
        }
        ctx.config = detail::cell_config(cell);
        ctx.config.validate();
        ctx.test = generate_dataset(ctx.config, cell.test_samples);
    }
    ctx.dataset_hash = fnv1a_hash(serialize_dataset(ctx.test));

    const bool needs_gnn =
        std::find(plan.algorithms.begin(), plan.algorithms.end(), "gnn") != plan.algorithms.end();
    const bool needs_icp =
        std::find(plan.algorithms.begin(), plan.algorithms.end(), "icp") != plan.algorithms.end();
    const std::string stem = plan.output_dir + "/model_d" + std::to_string(ctx.spec.pairs) +
                             "_m" + std::to_string(ctx.spec.channels);
    if (needs_gnn) {
        if (!cell.model_path.empty()) {
            ctx.gnn_model = load_model(cell.model_path);
        } else if (cell.train) {
            ctx.gnn_model =
                detail::train_fresh_model(cell, ctx.config, OutputPolicy::joint, stem + ".json");
        } else {
            throw plan_error("plan cell (" + cell.label() +
                             "): algorithm 'gnn' has no model and no training profile");
        }
    }
    if (needs_icp) {
        if (!cell.icp_model_path.empty()) {
            ctx.icp_model = load_model(cell.icp_model_path);
        } else if (cell.train) {
            ctx.icp_model = detail::train_fresh_model(cell, ctx.config, OutputPolicy::icp,
                                                      stem + "_icp.json");
        } else {
            throw plan_error("plan cell (" + cell.label() +
                             "): algorithm 'icp' has no model and no training profile");
        }
    }
    return ctx;
}

// --- per-algorithm evaluation ----------------------------------------------------

inline Allocation run_algorithm(const std::string& name, const ChannelInstance& inst,
                                const NetworkConfig& config, const GnnModel* model,
                                const SolverOptions& solver, std::size_t grid_levels) {
    if (name == "ewmmse") return solve_ewmmse(inst, config, solver).allocation;
    if (name == "heuristic") return heuristic_allocate(inst, config);
    if (name == "equal") return equal_split_allocate(inst, config);
    if (name == "bruteforce") return solve_grid(inst, config, grid_levels).allocation;
    if (name == "gnn" || name == "icp") {
        if (model == nullptr) throw contract_error("run_algorithm: model required for " + name);
        const GraphFeatures feat =
            build_features(inst, config, model->norm, model->feature_transform);
        const GnnForward fwd = gnn_forward(*model, feat, config, false);
        return post_process(fwd.phat, config);
    }
    throw plan_error("run_algorithm: unknown algorithm '" + name + "'");
}

struct AlgoEval {
    std::string algorithm;
    std::vector<double> rates;    // per instance, weighted sum rate
    std::vector<double> wall_us;  // per instance
    std::vector<std::uint8_t> feasible;  // per instance
    std::size_t violations = 0;
    double mean_rate = 0.0;
    double std_rate = 0.0;
    double mean_wall_us = 0.0;
};

inline AlgoEval run_algorithm_on_dataset(const std::string& name, const Dataset& data,
                                         const GnnModel* model, const SolverOptions& solver,
                                         std::size_t grid_levels) {
    AlgoEval eval;
    eval.algorithm = name;
    const std::size_t n = data.samples.size();
    eval.rates.resize(n);
    eval.wall_us.resize(n);
    eval.feasible.assign(n, 1);
    double sum = 0.0, wall_sum = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        const auto t0 = std::chrono::steady_clock::now();
        const Allocation alloc =
            run_algorithm(name, data.samples[k], data.config, model, solver, grid_levels);
        const auto t1 = std::chrono::steady_clock::now();
        const RateReport report = compute_sum_rate(data.samples[k], alloc, data.config);
        if (!alloc.feasible(data.config.p_max)) {
            ++eval.violations;
            eval.feasible[k] = 0;
        }
        eval.rates[k] = report.weighted_sum;
        eval.wall_us[k] = std::chrono::duration<double, std::micro>(t1 - t0).count();
        sum += eval.rates[k];
        wall_sum += eval.wall_us[k];
    }
    if (n > 0) {
        eval.mean_rate = sum / static_cast<double>(n);
        double sq_dev = 0.0;  // centered two-pass variance, cancellation-safe
        for (double r : eval.rates) {
            const double d = r - eval.mean_rate;
            sq_dev += d * d;
        }
        eval.std_rate = std::sqrt(sq_dev / static_cast<double>(n));
        eval.mean_wall_us = wall_sum / static_cast<double>(n);
    }
    return eval;
}

// --- sum-rate experiment ----------------------------------------------------------

struct ResultRow {
    std::string algorithm;
    std::size_t pairs = 0;
    std::size_t channels = 0;
    double mean_rate = 0.0;
    double std_rate = 0.0;
    double mean_wall_us = 0.0;
    std::size_t violations = 0;
    std::uint64_t dataset_hash = 0;
};

struct SumRateResult {
    std::vector<ResultRow> rows;
    FormattedTable table;
};

namespace detail {

inline FormattedTable sumrate_table(const std::vector<ResultRow>& rows) {
    FormattedTable t;
    t.title = "Mean sum rate by algorithm and network size";
    t.note = "All algorithms in a cell share the identical test instances "
             "(dataset hash recorded per row). Rates in bits/s/Hz.";
    t.columns = {"algorithm", "pairs",      "channels",  "mean_sum_rate",
                 "std_sum_rate", "mean_wall_us", "violations", "dataset_hash"};
    for (const auto& r : rows) {
        t.rows.push_back({r.algorithm, std::to_string(r.pairs), std::to_string(r.channels),
                          format_fixed(r.mean_rate, 6), format_fixed(r.std_rate, 6),
                          format_fixed(r.mean_wall_us, 3), std::to_string(r.violations),
                          format_hash(r.dataset_hash)});
    }
    return t;
}

inline std::string detail_csv(const AlgoEval& eval) {
    std::ostringstream out;
    out << "index,weighted_sum_rate,feasible\n";
    for (std::size_t k = 0; k < eval.rates.size(); ++k) {
        out << k << ',' << TrainLog::format_double(eval.rates[k]) << ','
            << static_cast<int>(eval.feasible[k]) << '\n';
    }
    return out.str();
}

}  // namespace detail

/// Evaluates every planned algorithm on every cell's shared test set. Writes
/// sumrate.csv plus one per-instance detail file per (algorithm, cell).
inline SumRateResult run_sumrate_experiment(const ExperimentPlan& plan) {
    plan.validate();
    SumRateResult result;
    for (const auto& cell : plan.cells) {
        const CellContext ctx = resolve_cell(plan, cell);
        for (const auto& algo : plan.algorithms) {
            const GnnModel* model = nullptr;
            if (algo == "gnn") model = &*ctx.gnn_model;
            if (algo == "icp") model = &*ctx.icp_model;
            const AlgoEval eval =
                run_algorithm_on_dataset(algo, ctx.test, model, plan.solver, plan.grid_levels);
            ResultRow row;
            row.algorithm = algo;
            row.pairs = ctx.spec.pairs;
            row.channels = ctx.spec.channels;
            row.mean_rate = eval.mean_rate;
            row.std_rate = eval.std_rate;
            row.mean_wall_us = eval.mean_wall_us;
            row.violations = eval.violations;
            row.dataset_hash = ctx.dataset_hash;
            result.rows.push_back(row);

            std::ostringstream detail_name;
            detail_name << plan.output_dir << "/detail_" << algo << "_d" << ctx.spec.pairs << "_m"
                        << ctx.spec.channels << ".csv";
            write_text_file(detail_name.str(), detail::detail_csv(eval));
        }
    }
    result.table = detail::sumrate_table(result.rows);
    write_text_file(plan.output_dir + "/sumrate.csv", result.table.csv());
    return result;
}

// --- generalization ---------------------------------------------------------------

struct GeneralizationRow {
    std::size_t pairs = 0;
    std::size_t channels = 0;
    double transfer_rate = 0.0;
    double native_rate = 0.0;
    double percent = 0.0;
    bool warning = false;  // > 102%: native model likely under-trained
};

struct GeneralizationResult {
    std::vector<GeneralizationRow> rows;
    FormattedTable table;
};

/// Transferred-model sum rate over natively-trained sum rate, per cell, as a
/// percentage. Cells supply the native model (path or training profile).
inline GeneralizationResult run_generalization(const ExperimentPlan& plan,
                                               const GnnModel& base_model) {
    GeneralizationResult result;
    for (const auto& cell : plan.cells) {
        CellContext ctx;
        ctx.spec = cell;
        if (!cell.data_path.empty()) {
            ctx.test = read_dataset(cell.data_path);
            ctx.config = ctx.test.config;
            ctx.spec.pairs = ctx.config.pairs;
            ctx.spec.channels = ctx.config.channels;
        } else {
            ctx.config = detail::cell_config(cell);
            ctx.config.validate();
            ctx.test = generate_dataset(ctx.config, cell.test_samples);
        }
        GnnModel native;
        if (!cell.model_path.empty()) {
            native = load_model(cell.model_path);
        } else if (cell.train) {
            const std::string stem = plan.output_dir + "/native_d" +
                                     std::to_string(ctx.spec.pairs) + "_m" +
                                     std::to_string(ctx.spec.channels);
            native = detail::train_fresh_model(cell, ctx.config, base_model.output_policy,
                                               stem + ".json");
        } else {
            throw plan_error("plan cell (" + cell.label() +
                             "): generalization needs a native model or training profile");
        }
        const EvalSummary transfer = evaluate(base_model, ctx.test);
        const EvalSummary native_eval = evaluate(native, ctx.test);
        GeneralizationRow row;
        row.pairs = ctx.spec.pairs;
        row.channels = ctx.spec.channels;
        row.transfer_rate = transfer.mean_rate;
        row.native_rate = native_eval.mean_rate;
        row.percent = native_eval.mean_rate > 0.0
                          ? 100.0 * transfer.mean_rate / native_eval.mean_rate
                          : 0.0;
        row.warning = row.percent > 102.0;
        result.rows.push_back(row);
    }
    FormattedTable t;
    t.title = "Generalization: transferred vs natively trained";
    t.note = "Entries above 102% are flagged as a training-quality warning "
             "(the native model is likely under-trained), not an error.";
    t.columns = {"pairs", "channels", "transfer_sum_rate", "native_sum_rate", "percent",
                 "warning"};
    for (const auto& r : result.rows) {
        t.rows.push_back({std::to_string(r.pairs), std::to_string(r.channels),
                          format_fixed(r.transfer_rate, 6), format_fixed(r.native_rate, 6),
                          format_fixed(r.percent, 2), r.warning ? "yes" : "no"});
    }
    result.table = std::move(t);
    write_text_file(plan.output_dir + "/generalization.csv", result.table.csv());
    return result;
}

// --- timing -----------------------------------------------------------------------

struct TimingRow {
    std::string algorithm;
    std::size_t pairs = 0;
    std::size_t channels = 0;
    double median_us = 0.0;
    double q25_us = 0.0;
    double q75_us = 0.0;
    double batch_amortized_us = -1.0;  // < 0: not applicable
};

struct TimingResult {
    std::vector<TimingRow> rows;
    FormattedTable table;
};

/// Wall time per instance: median and quartiles over (instances x reps),
/// single-threaded, plus a batch-amortized column for the learned models
/// (whole-set forward divided by the instance count).
inline TimingResult run_timing(const ExperimentPlan& plan, std::size_t repetitions) {
    plan.validate();
    if (repetitions == 0) throw contract_error("run_timing: repetitions must be >= 1");
    TimingResult result;
    for (const auto& cell : plan.cells) {
        const CellContext ctx = resolve_cell(plan, cell);
        for (const auto& algo : plan.algorithms) {
            const GnnModel* model = nullptr;
            if (algo == "gnn") model = &*ctx.gnn_model;
            if (algo == "icp") model = &*ctx.icp_model;
            std::vector<double> durations;
            durations.reserve(repetitions * ctx.test.samples.size());
            double batch_best = -1.0;
            for (std::size_t rep = 0; rep < repetitions; ++rep) {
                const AlgoEval eval = run_algorithm_on_dataset(algo, ctx.test, model, plan.solver,
                                                               plan.grid_levels);
                durations.insert(durations.end(), eval.wall_us.begin(), eval.wall_us.end());
                if (algo == "gnn" || algo == "icp") {
                    // Amortized pass: no per-instance clock reads.
                    const auto t0 = std::chrono::steady_clock::now();
                    for (const auto& inst : ctx.test.samples) {
                        const GraphFeatures feat = build_features(inst, ctx.config, model->norm,
                                                                  model->feature_transform);
                        const GnnForward fwd = gnn_forward(*model, feat, ctx.config, false);
                        const Allocation alloc = post_process(fwd.phat, ctx.config);
                        (void)alloc;
                    }
                    const auto t1 = std::chrono::steady_clock::now();
                    const double per_instance =
                        std::chrono::duration<double, std::micro>(t1 - t0).count() /
                        static_cast<double>(ctx.test.samples.size());
                    batch_best = batch_best < 0.0 ? per_instance
                                                  : std::min(batch_best, per_instance);
                }
            }
            std::sort(durations.begin(), durations.end());
            TimingRow row;
            row.algorithm = algo;
            row.pairs = ctx.spec.pairs;
            row.channels = ctx.spec.channels;
            row.median_us = quantile_sorted(durations, 0.5);
            row.q25_us = quantile_sorted(durations, 0.25);
            row.q75_us = quantile_sorted(durations, 0.75);
            row.batch_amortized_us = batch_best;
            result.rows.push_back(row);
        }
    }
    FormattedTable t;
    t.title = "Per-instance wall time";
    t.note = "Median and quartiles over instances x repetitions, single "
             "thread. batch_amortized_us divides a whole-set inference pass "
             "by the instance count (learned models only).";
    t.columns = {"algorithm", "pairs", "channels", "median_us", "q25_us", "q75_us",
                 "batch_amortized_us"};
    for (const auto& r : result.rows) {
        t.rows.push_back({r.algorithm, std::to_string(r.pairs), std::to_string(r.channels),
                          format_fixed(r.median_us, 3), format_fixed(r.q25_us, 3),
                          format_fixed(r.q75_us, 3),
                          r.batch_amortized_us < 0.0 ? std::string{}
                                                     : format_fixed(r.batch_amortized_us, 3)});
    }
    result.table = std::move(t);
    write_text_file(plan.output_dir + "/timing.csv", result.table.csv());
    return result;
}

// --- report -----------------------------------------------------------------------

/// Markdown report: one section per table, values verbatim from the same
/// formatted strings the CSVs carry.
inline void emit_report(const std::vector<FormattedTable>& tables, const std::string& path) {
    std::ostringstream out;
    out << "# Experiment report\n";
    for (const auto& t : tables) {
        out << "\n## " << t.title << "\n\n";
        out << t.markdown();
        if (!t.note.empty()) out << '\n' << t.note << '\n';
    }
    write_text_file(path, out.str());
}

// --- full bench run ---------------------------------------------------------------

inline GnnModel resolve_anchor_model(const ExperimentPlan& plan, const CellSpec& cell) {
    if (!cell.model_path.empty()) return load_model(cell.model_path);
    if (cell.train) {
        NetworkConfig config = detail::cell_config(cell);
        config.validate();
        return detail::train_fresh_model(cell, config, OutputPolicy::joint,
                                         plan.output_dir + "/anchor_model.json");
    }
    throw plan_error("plan generalization anchor (" + cell.label() +
                     "): needs a model or training profile");
}

/// Sum-rate comparison + timing (+ generalization when planned), finished
/// with a combined markdown report in the output directory.
inline std::vector<FormattedTable> run_bench(const ExperimentPlan& plan, std::size_t repetitions) {
    plan.validate();
    std::vector<FormattedTable> tables;
    tables.push_back(run_sumrate_experiment(plan).table);
    tables.push_back(run_timing(plan, repetitions).table);
    if (plan.generalization) {
        const GnnModel anchor = resolve_anchor_model(plan, plan.generalization->anchor);
        ExperimentPlan target_plan = plan;
        target_plan.cells = plan.generalization->cells;
        tables.push_back(run_generalization(target_plan, anchor).table);
    }
    emit_report(tables, plan.output_dir + "/report.md");
    return tables;
}

}  // namespace mcra
