#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>
#include <vector>

#include "mcra/channel.hpp"
#include "mcra/errors.hpp"
#include "mcra/matrix.hpp"

namespace mcra {

inline constexpr double kActivityThresholdScale = 1e-6;  // of p_max, strict >
inline constexpr double kFeasibilitySlack = 1e-9;        // relative budget slack

/// c(i, m) = 1 iff p(i, m) > threshold, strictly.
inline MatU8 derive_assignment(const Mat& power, double threshold) {
    MatU8 c(power.rows, power.cols);
    for (std::size_t k = 0; k < power.size(); ++k) {
        if (!(power.data[k] >= 0.0)) throw contract_error("derive_assignment: negative power");
        c.data[k] = power.data[k] > threshold ? 1 : 0;
    }
    return c;
}

/// Power matrix P (D x M, watts) plus the derived binary assignment C.
struct Allocation {
    Mat power;       // p_i^m
    MatU8 assigned;  // c_i^m

    static Allocation from_power(Mat p, const NetworkConfig& config) {
        Allocation alloc;
        alloc.assigned = derive_assignment(p, kActivityThresholdScale * config.p_max);
        alloc.power = std::move(p);
        return alloc;
    }

    /// Largest per-user total power, for feasibility audits.
    double max_user_power() const {
        double worst = 0.0;
        for (std::size_t i = 0; i < power.rows; ++i) {
            double total = 0.0;
            for (std::size_t m = 0; m < power.cols; ++m) total += power(i, m);
            worst = std::max(worst, total);
        }
        return worst;
    }

    bool feasible(double p_max) const {
        return max_user_power() <= p_max * (1.0 + kFeasibilitySlack);
    }
};

struct RateReport {
    Mat rates;                     // R_i^m, bits/s/Hz
    std::vector<double> per_pair;  // row sums
    double weighted_sum = 0.0;     // sum over (i, m) of alpha_i R_i^m
};

namespace detail {

inline void check_rate_shapes(const ChannelInstance& inst, const Mat& power,
                              const NetworkConfig& config) {
    if (inst.channels() != config.channels || inst.pairs() != config.pairs) {
        throw contract_error("rate: instance does not match config");
    }
    if (power.rows != config.pairs || power.cols != config.channels) {
        throw contract_error("rate: power matrix shape mismatch");
    }
    for (double p : power.data) {
        if (!(p >= 0.0)) throw contract_error("rate: negative power");
    }
}

}  // namespace detail

/// SINR_i^m = g_ii^2 p_i^m / (sum_{j != i} g_ij^2 p_j^m + sigma^2).
inline Mat compute_sinr(const ChannelInstance& inst, const Allocation& alloc,
                        const NetworkConfig& config) {
    detail::check_rate_shapes(inst, alloc.power, config);
    const std::size_t d = config.pairs;
    Mat sinr(d, config.channels);
    for (std::size_t m = 0; m < config.channels; ++m) {
        const Mat& g = inst.gains[m];
        for (std::size_t i = 0; i < d; ++i) {
            double interference = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                if (j == i) continue;
                interference += g(i, j) * g(i, j) * alloc.power(j, m);
            }
            const double signal = g(i, i) * g(i, i) * alloc.power(i, m);
            sinr(i, m) = signal / (interference + config.noise_power);
        }
    }
    return sinr;
}

inline RateReport compute_sum_rate(const ChannelInstance& inst, const Allocation& alloc,
                                   const NetworkConfig& config) {
    const Mat sinr = compute_sinr(inst, alloc, config);
    RateReport report;
    report.rates = Mat(sinr.rows, sinr.cols);
    report.per_pair.assign(sinr.rows, 0.0);
    for (std::size_t i = 0; i < sinr.rows; ++i) {
        for (std::size_t m = 0; m < sinr.cols; ++m) {
            const double r = std::log2(1.0 + sinr(i, m));
            report.rates(i, m) = r;
            report.per_pair[i] += r;
        }
        report.weighted_sum += config.weight(i) * report.per_pair[i];
    }
    return report;
}

/// L = -sum alpha_i R_i^m + sum_i lambda_i (sum_m p_i^m - p_max).
inline double compute_lagrangian(const ChannelInstance& inst, const Allocation& alloc,
                                 const std::vector<double>& lambda, const NetworkConfig& config) {
    if (lambda.size() != config.pairs) {
        throw contract_error("compute_lagrangian: lambda length mismatch");
    }
    for (double l : lambda) {
        if (!(l >= 0.0)) throw contract_error("compute_lagrangian: negative multiplier");
    }
    const RateReport report = compute_sum_rate(inst, alloc, config);
    double value = -report.weighted_sum;
    for (std::size_t i = 0; i < config.pairs; ++i) {
        double total = 0.0;
        for (std::size_t m = 0; m < config.channels; ++m) total += alloc.power(i, m);
        value += lambda[i] * (total - config.p_max);
    }
    return value;
}

/// Gradient of the weighted sum rate with respect to every p_k^m. Channels
/// do not couple, so the per-channel Jacobian is assembled from the total
/// received power T_i = S_i + N_i and the interference-plus-noise N_i:
///   d R_i / d p_i = g_ii^2 / (ln2 T_i)
///   d R_i / d p_k = g_ik^2 (1/T_i - 1/N_i) / ln2   for k != i.
inline Mat weighted_rate_gradient(const ChannelInstance& inst, const Mat& power,
                                  const NetworkConfig& config) {
    detail::check_rate_shapes(inst, power, config);
    const std::size_t d = config.pairs;
    const double inv_ln2 = 1.0 / std::numbers::ln2;
    Mat grad(d, config.channels);
    std::vector<double> denom_total(d), denom_noise(d);
    for (std::size_t m = 0; m < config.channels; ++m) {
        const Mat& g = inst.gains[m];
        for (std::size_t i = 0; i < d; ++i) {
            double interference = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                if (j == i) continue;
                interference += g(i, j) * g(i, j) * power(j, m);
            }
            denom_noise[i] = interference + config.noise_power;
            denom_total[i] = denom_noise[i] + g(i, i) * g(i, i) * power(i, m);
        }
        for (std::size_t k = 0; k < d; ++k) {
            double acc = config.weight(k) * g(k, k) * g(k, k) / denom_total[k];
            for (std::size_t i = 0; i < d; ++i) {
                if (i == k) continue;
                const double gik2 = g(i, k) * g(i, k);
                acc += config.weight(i) * gik2 * (1.0 / denom_total[i] - 1.0 / denom_noise[i]);
            }
            grad(k, m) = acc * inv_ln2;
        }
    }
    return grad;
}

}  // namespace mcra
