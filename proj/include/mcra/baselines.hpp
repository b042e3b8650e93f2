#pragma once

#include <cstddef>

#include "mcra/channel.hpp"
#include "mcra/errors.hpp"
#include "mcra/matrix.hpp"
#include "mcra/rate.hpp"

namespace mcra {

enum class BaselineKind { heuristic_max_gain, equal_split, icp_cap_policy };

/// Full budget on each pair's best direct channel; lowest index wins ties.
inline Allocation heuristic_allocate(const ChannelInstance& inst, const NetworkConfig& config) {
    if (inst.channels() != config.channels || inst.pairs() != config.pairs) {
        throw contract_error("heuristic_allocate: instance does not match config");
    }
    Mat power(config.pairs, config.channels);
    for (std::size_t i = 0; i < config.pairs; ++i) {
        std::size_t best = 0;
        double best_gain = inst.gains[0](i, i);
        for (std::size_t m = 1; m < config.channels; ++m) {
            if (inst.gains[m](i, i) > best_gain) {
                best_gain = inst.gains[m](i, i);
                best = m;
            }
        }
        power(i, best) = config.p_max;
    }
    return Allocation::from_power(std::move(power), config);
}

/// p_i^m = p_max / M for all pairs and channels.
inline Allocation equal_split_allocate(const ChannelInstance& inst, const NetworkConfig& config) {
    if (inst.channels() != config.channels || inst.pairs() != config.pairs) {
        throw contract_error("equal_split_allocate: instance does not match config");
    }
    Mat power(config.pairs, config.channels, config.p_max / static_cast<double>(config.channels));
    return Allocation::from_power(std::move(power), config);
}

/// Independent per-channel cap: p_i^m = raw_i^m * p_max / M, no cross-channel
/// normalization. Total feasibility follows from the M per-channel caps.
inline Allocation icp_cap(const Mat& raw_outputs, const NetworkConfig& config) {
    if (raw_outputs.rows != config.pairs || raw_outputs.cols != config.channels) {
        throw contract_error("icp_cap: raw output shape mismatch");
    }
    const double cap = config.p_max / static_cast<double>(config.channels);
    Mat power(config.pairs, config.channels);
    for (std::size_t k = 0; k < raw_outputs.size(); ++k) {
        const double r = raw_outputs.data[k];
        if (!(r >= 0.0 && r <= 1.0)) throw contract_error("icp_cap: raw output outside [0, 1]");
        power.data[k] = r * cap;
    }
    return Allocation::from_power(std::move(power), config);
}

}  // namespace mcra
