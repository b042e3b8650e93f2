#pragma once

#include <cstddef>
#include <vector>

#include "mcra/channel.hpp"
#include "mcra/errors.hpp"
#include "mcra/matrix.hpp"
#include "mcra/rate.hpp"

namespace mcra {

struct GridSolve {
    Allocation allocation;
    double weighted_sum_rate = 0.0;
    std::size_t evaluations = 0;
};

/// Exhaustive reference solver. Each (pair, channel) power is restricted to
/// `levels` equispaced values in [0, p_max]; per-pair combinations violating
/// the budget are filtered out, and the joint product over pairs is scored
/// by the exact sum rate. Exponential in D, so only sensible at desk scale.
inline GridSolve solve_grid(const ChannelInstance& inst, const NetworkConfig& config,
                            std::size_t levels = 21, std::size_t max_evaluations = 100000000) {
    config.validate();
    if (levels < 2) throw contract_error("solve_grid: need at least 2 power levels");
    if (inst.channels() != config.channels || inst.pairs() != config.pairs) {
        throw contract_error("solve_grid: instance does not match config");
    }
    const std::size_t d = config.pairs;
    const std::size_t ch = config.channels;

    std::vector<double> level_values(levels);
    for (std::size_t k = 0; k < levels; ++k) {
        level_values[k] = config.p_max * static_cast<double>(k) / static_cast<double>(levels - 1);
    }

    // Feasible per-pair power vectors; the same set serves every pair.
    std::vector<std::vector<double>> combos;
    std::vector<double> current(ch, 0.0);
    auto enumerate = [&](auto&& self, std::size_t slot, double used) -> void {
        if (slot == ch) {
            combos.push_back(current);
            return;
        }
        for (double p : level_values) {
            if (used + p > config.p_max * (1.0 + kFeasibilitySlack)) break;
            current[slot] = p;
            self(self, slot + 1, used + p);
        }
        current[slot] = 0.0;
    };
    enumerate(enumerate, 0, 0.0);

    double total = 1.0;
    for (std::size_t i = 0; i < d; ++i) {
        total *= static_cast<double>(combos.size());
        if (total > static_cast<double>(max_evaluations)) {
            throw contract_error("solve_grid: grid too large for this D, M, levels");
        }
    }

    GridSolve best;
    best.weighted_sum_rate = -1.0;
    Mat power(d, ch);
    std::vector<std::size_t> odo(d, 0);
    while (true) {
        for (std::size_t i = 0; i < d; ++i) {
            const auto& combo = combos[odo[i]];
            for (std::size_t m = 0; m < ch; ++m) power(i, m) = combo[m];
        }
        Allocation alloc;
        alloc.power = power;
        const double rate = compute_sum_rate(inst, alloc, config).weighted_sum;
        ++best.evaluations;
        if (rate > best.weighted_sum_rate) {
            best.weighted_sum_rate = rate;
            best.allocation.power = power;
        }

        std::size_t digit = 0;
        while (digit < d) {
            if (++odo[digit] < combos.size()) break;
            odo[digit] = 0;
            ++digit;
        }
        if (digit == d) break;
    }
    best.allocation = Allocation::from_power(std::move(best.allocation.power), config);
    return best;
}

}  // namespace mcra
