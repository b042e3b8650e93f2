#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mcra/channel.hpp"
#include "mcra/errors.hpp"
#include "mcra/gnn.hpp"
#include "mcra/matrix.hpp"
#include "mcra/rate.hpp"
#include "mcra/rng.hpp"

namespace mcra {

// Unsupervised primal-dual training: descend the Lagrangian
//   L = -sum_i alpha_i sum_m R_i^m(P) + sum_i lambda_i (sum_m q_i^m - P_max)
// in the network weights, ascend (projected) in the multipliers. The rate
// term always uses the post-processed allocation P; the dual term uses
// q = phat (pre mode, default) or q = P (post mode). Post-processing makes
// post-mode violations non-positive, so pre mode is what actually drives
// the multipliers.

enum class Optimizer { sgd, adam };
enum class DualMode { pre, post };

inline const char* to_string(Optimizer o) { return o == Optimizer::sgd ? "sgd" : "adam"; }
inline const char* to_string(DualMode m) { return m == DualMode::pre ? "pre" : "post"; }

struct DualState {
    std::vector<double> lambda;  // length D, nonnegative
    double step = 1e-3;          // phi_lambda

    static DualState zeros(std::size_t pairs, double step) {
        DualState d;
        d.lambda.assign(pairs, 0.0);
        d.step = step;
        return d;
    }
};

/// Projected ascent: lambda_i <- max(0, lambda_i + step * mean_violation_i).
inline DualState dual_update(const DualState& dual, const std::vector<double>& mean_violation) {
    if (mean_violation.size() != dual.lambda.size()) {
        throw contract_error("dual_update: violation length mismatch");
    }
    DualState next = dual;
    for (std::size_t i = 0; i < next.lambda.size(); ++i) {
        if (!std::isfinite(mean_violation[i])) {
            throw contract_error("dual_update: non-finite violation");
        }
        next.lambda[i] = std::max(0.0, next.lambda[i] + next.step * mean_violation[i]);
    }
    return next;
}

struct TrainConfig {
    std::size_t epochs = 50;
    std::size_t batch_size = 64;
    double learning_rate = 1e-3;  // phi_omega, primal step
    double dual_step = 1e-3;      // phi_lambda
    Optimizer optimizer = Optimizer::sgd;
    DualMode dual_mode = DualMode::pre;
    std::uint64_t seed = 1;
    std::size_t val_every = 1;  // validation cadence in epochs

    void validate(std::size_t train_samples) const {
        if (epochs == 0) throw contract_error("TrainConfig: epochs must be >= 1");
        if (batch_size == 0) throw contract_error("TrainConfig: batch size must be >= 1");
        if (batch_size > train_samples) {
            throw contract_error("TrainConfig: batch size exceeds training-set size");
        }
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
            throw contract_error("TrainConfig: bad primal step");
        }
        if (!(dual_step >= 0.0) || !std::isfinite(dual_step)) {
            throw contract_error("TrainConfig: bad dual step");
        }
        if (val_every == 0) throw contract_error("TrainConfig: validation cadence must be >= 1");
    }
};

struct EpochRecord {
    std::size_t epoch = 0;        // 1-based
    double train_loss = 0.0;      // sample-mean Lagrangian
    double val_sum_rate = 0.0;    // mean weighted sum rate on validation
    double mean_violation = 0.0;  // mean over samples/users of max(0, sum_m phat - P_max)
    double mean_lambda = 0.0;
    double wall_seconds = 0.0;    // measurement only, excluded from equality
};

struct TrainLog {
    std::vector<EpochRecord> epochs;

    static const char* csv_header() {
        return "epoch,train_loss,val_sum_rate,mean_violation,mean_lambda,wall_seconds";
    }

    /// Full CSV including wall time (reporting).
    std::string csv() const {
        std::ostringstream out;
        out << csv_header() << '\n';
        for (const auto& e : epochs) {
            out << e.epoch << ',' << format_double(e.train_loss) << ','
                << format_double(e.val_sum_rate) << ',' << format_double(e.mean_violation) << ','
                << format_double(e.mean_lambda) << ',' << format_double(e.wall_seconds) << '\n';
        }
        return out.str();
    }

    /// CSV without the wall-time column: identical across reruns of the same
    /// seeded training, which is the reproducibility contract. Wall time is
    /// a measurement of the run, not of the computation.
    std::string deterministic_csv() const {
        std::ostringstream out;
        out << "epoch,train_loss,val_sum_rate,mean_violation,mean_lambda\n";
        for (const auto& e : epochs) {
            out << e.epoch << ',' << format_double(e.train_loss) << ','
                << format_double(e.val_sum_rate) << ',' << format_double(e.mean_violation) << ','
                << format_double(e.mean_lambda) << '\n';
        }
        return out.str();
    }

    static std::string format_double(double v) {
        std::ostringstream s;
        s.precision(17);
        s << v;
        return s.str();
    }
};

/// Lagrangian value and the gradient seed for gnn_backward, both at a single
/// instance. The returned gradient is with respect to phat (the pullback
/// through post-processing and the direct dual term are already folded in).
struct LossEval {
    double value = 0.0;
    double weighted_sum_rate = 0.0;       // of the post-processed allocation
    Mat grad_phat;                        // d value / d phat
    std::vector<double> dual_violation;   // per-user sum_m q_i^m - P_max
    std::vector<double> phat_violation;   // per-user max(0, sum_m phat_i^m - P_max)
};

inline LossEval power_loss(const ChannelInstance& inst, const NetworkConfig& config,
                           const Mat& phat, const DualState& dual, DualMode mode) {
    if (dual.lambda.size() != config.pairs) {
        throw contract_error("power_loss: multiplier length mismatch");
    }
    const Allocation alloc = post_process(phat, config);
    const RateReport report = compute_sum_rate(inst, alloc, config);

    LossEval eval;
    eval.weighted_sum_rate = report.weighted_sum;
    eval.value = -report.weighted_sum;
    eval.dual_violation.resize(config.pairs);
    eval.phat_violation.resize(config.pairs);

    // d(-sum alpha R)/dP, plus the post-mode dual term which also acts on P.
    Mat grad_p = weighted_rate_gradient(inst, alloc.power, config);
    for (double& g : grad_p.data) g = -g;
    for (std::size_t i = 0; i < config.pairs; ++i) {
        double total_p = 0.0;
        double total_phat = 0.0;
        for (std::size_t m = 0; m < config.channels; ++m) {
            total_p += alloc.power(i, m);
            total_phat += phat(i, m);
        }
        const double q_total = mode == DualMode::pre ? total_phat : total_p;
        eval.dual_violation[i] = q_total - config.p_max;
        eval.phat_violation[i] = std::max(0.0, total_phat - config.p_max);
        eval.value += dual.lambda[i] * eval.dual_violation[i];
        if (mode == DualMode::post) {
            for (std::size_t m = 0; m < config.channels; ++m) grad_p(i, m) += dual.lambda[i];
        }
    }
    eval.grad_phat = post_process_pullback(phat, config, grad_p);
    if (mode == DualMode::pre) {
        for (std::size_t i = 0; i < config.pairs; ++i) {
            for (std::size_t m = 0; m < config.channels; ++m) {
                eval.grad_phat(i, m) += dual.lambda[i];
            }
        }
    }
    return eval;
}

// --- evaluation --------------------------------------------------------------

struct EvalRow {
    std::size_t index = 0;
    double weighted_sum_rate = 0.0;
    double max_user_power = 0.0;
    bool feasible = true;
};

struct EvalSummary {
    double mean_rate = 0.0;
    double std_rate = 0.0;  // population standard deviation
    std::size_t violations = 0;
    double mean_wall_us = 0.0;  // per instance, measurement only
    std::vector<EvalRow> rows;

    /// Deterministic per-instance rows (wall time deliberately excluded).
    std::string csv() const {
        std::ostringstream out;
        out << "index,weighted_sum_rate,max_user_power,feasible\n";
        for (const auto& r : rows) {
            out << r.index << ',' << TrainLog::format_double(r.weighted_sum_rate) << ','
                << TrainLog::format_double(r.max_user_power) << ',' << (r.feasible ? 1 : 0)
                << '\n';
        }
        return out.str();
    }
};

/// Forward + post_process + rates per sample. The GNN accepts any (D, M), so
/// this also serves transferred models.
inline EvalSummary evaluate(const GnnModel& model, const Dataset& data) {
    model.validate();
    data.config.validate();
    const NetworkConfig& config = data.config;
    EvalSummary summary;
    summary.rows.reserve(data.samples.size());
    double sum = 0.0;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t k = 0; k < data.samples.size(); ++k) {
        const ChannelInstance& inst = data.samples[k];
        const GraphFeatures feat = build_features(inst, config, model.norm, model.feature_transform);
        const GnnForward fwd = gnn_forward(model, feat, config, false);
        const Allocation alloc = post_process(fwd.phat, config);
        const RateReport report = compute_sum_rate(inst, alloc, config);
        EvalRow row;
        row.index = k;
        row.weighted_sum_rate = report.weighted_sum;
        row.max_user_power = alloc.max_user_power();
        row.feasible = alloc.feasible(config.p_max);
        if (!row.feasible) ++summary.violations;
        sum += row.weighted_sum_rate;
        summary.rows.push_back(row);
    }
    const auto t1 = std::chrono::steady_clock::now();
    const std::size_t n = data.samples.size();
    if (n > 0) {
        summary.mean_rate = sum / static_cast<double>(n);
        // Centered two-pass variance: immune to the cancellation that the
        // moment formula suffers when the spread is tiny next to the mean.
        double sq_dev = 0.0;
        for (const auto& row : summary.rows) {
            const double d = row.weighted_sum_rate - summary.mean_rate;
            sq_dev += d * d;
        }
        summary.std_rate = std::sqrt(sq_dev / static_cast<double>(n));
        summary.mean_wall_us =
            std::chrono::duration<double, std::micro>(t1 - t0).count() / static_cast<double>(n);
    }
    return summary;
}

// --- training ----------------------------------------------------------------

struct TrainResult {
    GnnModel model;  // best-validation weights
    TrainLog log;
    std::size_t best_epoch = 0;
    double best_val = 0.0;
};

namespace detail {

/// Unbiased index in [0, n): multiply-shift on the raw 64-bit draw.
inline std::size_t bounded_index(Rng& rng, std::size_t n) {
    return static_cast<std::size_t>(
        (static_cast<unsigned __int128>(rng.next_u64()) * n) >> 64);
}

inline void fisher_yates(std::vector<std::size_t>& order, Rng& rng) {
    for (std::size_t i = order.size(); i > 1; --i) {
        const std::size_t j = bounded_index(rng, i);
        std::swap(order[i - 1], order[j]);
    }
}

}  // namespace detail

/// Primal-dual loop: per batch, forward -> post_process -> loss -> backward ->
/// primal step -> dual update. Fully deterministic given the seed: one
/// shuffle stream drives every epoch, samples are processed and reduced in
/// slice order, and wall time never influences control flow. Returns the
/// best-validation model plus the full per-epoch log.
inline TrainResult train(const Dataset& train_data, const Dataset& val_data, GnnModel model,
                         const TrainConfig& tc) {
    const NetworkConfig& config = train_data.config;
    config.validate();
    val_data.config.validate();
    if (val_data.config.pairs != config.pairs || val_data.config.channels != config.channels) {
        throw contract_error("train: validation set shape differs from training set");
    }
    if (train_data.samples.empty()) throw contract_error("train: empty training set");
    if (val_data.samples.empty()) throw contract_error("train: empty validation set");
    tc.validate(train_data.samples.size());
    model.validate();

    // Feature statistics always come from the training set.
    if (model.feature_transform == FeatureTransform::log_standard) {
        model.norm = compute_norm_stats(train_data.samples);
    } else {
        model.norm = NormStats{};
    }
    model.p_max = config.p_max;

    const std::size_t n = train_data.samples.size();
    const std::size_t d = config.pairs;
    DualState dual = DualState::zeros(d, tc.dual_step);
    Rng shuffle_rng(tc.seed);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);

    std::vector<double> grad_sum(gnn::kParamCount);
    std::vector<double> adam_m, adam_v;
    if (tc.optimizer == Optimizer::adam) {
        adam_m.assign(gnn::kParamCount, 0.0);
        adam_v.assign(gnn::kParamCount, 0.0);
    }
    std::size_t adam_t = 0;
    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kAdamEps = 1e-8;

    TrainResult result;
    result.model = model;
    result.best_val = -std::numeric_limits<double>::infinity();
    double last_val = 0.0;

    for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
        const auto epoch_start = std::chrono::steady_clock::now();
        detail::fisher_yates(order, shuffle_rng);

        double loss_sum = 0.0;
        double phat_violation_sum = 0.0;  // over samples x users
        std::size_t batch_index = 0;
        for (std::size_t begin = 0; begin < n; begin += tc.batch_size, ++batch_index) {
            const std::size_t end = std::min(begin + tc.batch_size, n);
            const std::size_t count = end - begin;
            std::fill(grad_sum.begin(), grad_sum.end(), 0.0);
            std::vector<double> violation_sum(d, 0.0);
            double batch_loss = 0.0;

            for (std::size_t pos = begin; pos < end; ++pos) {
                const ChannelInstance& inst = train_data.samples[order[pos]];
                const GraphFeatures feat =
                    build_features(inst, config, model.norm, model.feature_transform);
                const GnnForward fwd = gnn_forward(model, feat, config, true);
                const LossEval loss = power_loss(inst, config, fwd.phat, dual, tc.dual_mode);
                const std::vector<double> grad =
                    gnn_backward(model, feat, fwd.cache, loss.grad_phat);
                for (std::size_t p = 0; p < gnn::kParamCount; ++p) grad_sum[p] += grad[p];
                for (std::size_t i = 0; i < d; ++i) {
                    violation_sum[i] += loss.dual_violation[i];
                    phat_violation_sum += loss.phat_violation[i];
                }
                batch_loss += loss.value;
            }

            const double inv_count = 1.0 / static_cast<double>(count);
            batch_loss *= inv_count;
            if (!std::isfinite(batch_loss)) {
                throw numeric_error("train: diverged at epoch " + std::to_string(epoch) +
                                    ", batch " + std::to_string(batch_index + 1) +
                                    " (non-finite loss)");
            }
            loss_sum += batch_loss * static_cast<double>(count);

            // Primal step on the batch-mean gradient.
            if (tc.optimizer == Optimizer::sgd) {
                for (std::size_t p = 0; p < gnn::kParamCount; ++p) {
                    model.params[p] -= tc.learning_rate * grad_sum[p] * inv_count;
                }
            } else {
                ++adam_t;
                const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(adam_t));
                const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(adam_t));
                for (std::size_t p = 0; p < gnn::kParamCount; ++p) {
                    const double g = grad_sum[p] * inv_count;
                    adam_m[p] = kBeta1 * adam_m[p] + (1.0 - kBeta1) * g;
                    adam_v[p] = kBeta2 * adam_v[p] + (1.0 - kBeta2) * g * g;
                    model.params[p] -= tc.learning_rate * (adam_m[p] / bc1) /
                                       (std::sqrt(adam_v[p] / bc2) + kAdamEps);
                }
            }

            for (std::size_t i = 0; i < d; ++i) violation_sum[i] *= inv_count;
            dual = dual_update(dual, violation_sum);
        }

        EpochRecord record;
        record.epoch = epoch;
        record.train_loss = loss_sum / static_cast<double>(n);
        record.mean_violation = phat_violation_sum / static_cast<double>(n * d);
        record.mean_lambda =
            std::accumulate(dual.lambda.begin(), dual.lambda.end(), 0.0) / static_cast<double>(d);

        if (epoch % tc.val_every == 0 || epoch == tc.epochs) {
            const EvalSummary val = evaluate(model, val_data);
            last_val = val.mean_rate;
            if (val.mean_rate > result.best_val) {
                result.best_val = val.mean_rate;
                result.best_epoch = epoch;
                result.model = model;
            }
        }
        record.val_sum_rate = last_val;
        record.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
        result.log.epochs.push_back(record);
    }

    if (result.best_epoch == 0) {  // cadence never hit: fall back to final weights
        result.model = model;
        result.best_epoch = tc.epochs;
        result.best_val = last_val;
    }
    // Stamp the checkpoint with the settings that produced it.
    result.model.metadata = {{"seed", tc.seed},
                             {"epochs", tc.epochs},
                             {"batch_size", tc.batch_size},
                             {"learning_rate", tc.learning_rate},
                             {"dual_step", tc.dual_step},
                             {"optimizer", to_string(tc.optimizer)},
                             {"dual_mode", to_string(tc.dual_mode)},
                             {"best_epoch", result.best_epoch},
                             {"train_pairs", config.pairs},
                             {"train_channels", config.channels},
                             {"train_samples", train_data.samples.size()},
                             {"dataset_seed", config.seed}};
    return result;
}

}  // namespace mcra
