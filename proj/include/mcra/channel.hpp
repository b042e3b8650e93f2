#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcra/errors.hpp"
#include "mcra/matrix.hpp"
#include "mcra/rng.hpp"

namespace mcra {

/// Scenario parameters for one interference network.
struct NetworkConfig {
    std::size_t pairs = 1;          // D, transceiver pairs
    std::size_t channels = 1;       // M, orthogonal channels
    double area_side = 100.0;       // meters
    double d_min = 2.0;             // min tx-rx separation, meters
    double d_max = 10.0;            // max tx-rx separation, meters
    double gamma = 3.0;             // path-loss exponent
    double noise_power = 1e-4;      // sigma^2, watts
    double p_max = 1.0;             // per-transmitter power budget, watts
    std::vector<double> weights;    // per-pair rate weights, empty = all ones
    std::uint64_t seed = 0;

    double weight(std::size_t i) const { return weights.empty() ? 1.0 : weights[i]; }

    void validate() const {
        if (pairs < 1) throw contract_error("NetworkConfig: pairs must be >= 1");
        if (channels < 1) throw contract_error("NetworkConfig: channels must be >= 1");
        if (!(0.0 < d_min && d_min <= d_max && d_max <= area_side)) {
            throw contract_error("NetworkConfig: need 0 < d_min <= d_max <= area_side");
        }
        if (!(noise_power > 0.0)) throw contract_error("NetworkConfig: noise_power must be > 0");
        if (!(p_max > 0.0)) throw contract_error("NetworkConfig: p_max must be > 0");
        if (!weights.empty() && weights.size() != pairs) {
            throw contract_error("NetworkConfig: weights length must equal pairs");
        }
        for (double w : weights) {
            if (!(w >= 0.0)) throw contract_error("NetworkConfig: weights must be >= 0");
        }
    }
};

/// Transmitter/receiver placement for one realization.
struct Topology {
    Mat tx;    // D x 2 positions, meters
    Mat rx;    // D x 2 positions, meters
    Mat dist;  // D x D, dist(i, j) = |rx_i - tx_j|
};

/// Gain magnitudes |h_{i,j}^m| for one realization: M dense D x D blocks,
/// row = receiver, column = transmitter.
struct ChannelInstance {
    std::vector<Mat> gains;

    std::size_t channels() const { return gains.size(); }
    std::size_t pairs() const { return gains.empty() ? 0 : gains[0].rows; }

    friend bool operator==(const ChannelInstance& a, const ChannelInstance& b) {
        return a.gains == b.gains;
    }
};

struct Dataset {
    NetworkConfig config;
    std::vector<ChannelInstance> samples;
};

/// Transmitters land uniformly in the square; each receiver sits at a
/// uniform angle and uniform radius in [d_min, d_max] from its transmitter,
/// re-drawn until it falls inside the square. Draw order: all transmitter
/// positions (x then y per pair), then receivers in pair order (angle then
/// radius per attempt).
inline Topology sample_topology(const NetworkConfig& config, Rng& stream) {
    config.validate();
    const std::size_t d = config.pairs;
    Topology topo;
    topo.tx = Mat(d, 2);
    topo.rx = Mat(d, 2);
    topo.dist = Mat(d, d);

    for (std::size_t i = 0; i < d; ++i) {
        topo.tx(i, 0) = stream.uniform(0.0, config.area_side);
        topo.tx(i, 1) = stream.uniform(0.0, config.area_side);
    }
    for (std::size_t i = 0; i < d; ++i) {
        double x = 0.0, y = 0.0;
        do {
            const double theta = stream.uniform(0.0, 2.0 * std::numbers::pi);
            const double radius = stream.uniform(config.d_min, config.d_max);
            x = topo.tx(i, 0) + radius * std::cos(theta);
            y = topo.tx(i, 1) + radius * std::sin(theta);
        } while (x < 0.0 || x > config.area_side || y < 0.0 || y > config.area_side);
        topo.rx(i, 0) = x;
        topo.rx(i, 1) = y;
    }
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            const double dx = topo.rx(i, 0) - topo.tx(j, 0);
            const double dy = topo.rx(i, 1) - topo.tx(j, 1);
            topo.dist(i, j) = std::hypot(dx, dy);
        }
    }
    return topo;
}

/// Amplitude attenuation of a link of length `dist`: sqrt(dist^-gamma).
inline double path_loss_amplitude(double dist, double gamma) {
    return std::pow(dist, -0.5 * gamma);
}

/// Rayleigh fading magnitude |f| with E[|f|^2] = 1, from one normal pair.
inline double rayleigh_magnitude(Rng& stream) {
    double x = 0.0, y = 0.0;
    stream.normal_pair(x, y);
    return std::sqrt(0.5 * (x * x + y * y));
}

/// Gain draws are ordered channel-major, then receiver, then transmitter.
inline ChannelInstance sample_instance(const NetworkConfig& config, const Topology& topo,
                                       Rng& stream) {
    const std::size_t d = config.pairs;
    if (topo.dist.rows != d || topo.dist.cols != d) {
        throw contract_error("sample_instance: topology does not match config");
    }
    ChannelInstance inst;
    inst.gains.reserve(config.channels);
    for (std::size_t m = 0; m < config.channels; ++m) {
        Mat block(d, d);
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                block(i, j) = path_loss_amplitude(topo.dist(i, j), config.gamma) *
                              rayleigh_magnitude(stream);
            }
        }
        inst.gains.push_back(std::move(block));
    }
    return inst;
}

/// Per-sample stream: sample k draws its topology and then its fading from
/// Rng(seed ^ (k + 1)), so samples can be generated independently.
inline std::uint64_t sample_stream_seed(std::uint64_t seed, std::size_t sample_index) {
    return seed ^ static_cast<std::uint64_t>(sample_index + 1);
}

inline ChannelInstance generate_sample(const NetworkConfig& config, std::size_t sample_index) {
    Rng stream(sample_stream_seed(config.seed, sample_index));
    const Topology topo = sample_topology(config, stream);
    return sample_instance(config, topo, stream);
}

inline Dataset generate_dataset(const NetworkConfig& config, std::size_t num_samples) {
    config.validate();
    Dataset ds;
    ds.config = config;
    ds.samples.reserve(num_samples);
    for (std::size_t k = 0; k < num_samples; ++k) {
        ds.samples.push_back(generate_sample(config, k));
    }
    return ds;
}

namespace detail {

inline void append_f64_le(std::string& out, double value) {
    const auto bits = std::bit_cast<std::uint64_t>(value);
    for (int b = 0; b < 8; ++b) {
        out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
    }
}

inline double read_f64_le(const unsigned char* p) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) {
        bits |= static_cast<std::uint64_t>(p[b]) << (8 * b);
    }
    return std::bit_cast<double>(bits);
}

}  // namespace detail

inline constexpr const char* kDatasetMagic = "MCRA1\n";

/// Serializes a dataset to its byte layout: magic, one JSON header line,
/// then little-endian f64 gains ordered [sample][channel][receiver][transmitter].
inline std::string serialize_dataset(const Dataset& ds) {
    const auto& cfg = ds.config;
    nlohmann::json header = {
        {"version", 1},
        {"D", cfg.pairs},
        {"M", cfg.channels},
        {"num_samples", ds.samples.size()},
        {"seed", cfg.seed},
        {"area_side", cfg.area_side},
        {"d_min", cfg.d_min},
        {"d_max", cfg.d_max},
        {"gamma", cfg.gamma},
        {"noise_power", cfg.noise_power},
        {"p_max", cfg.p_max},
    };
    std::string out = kDatasetMagic;
    out += header.dump();
    out += '\n';
    for (const auto& inst : ds.samples) {
        for (const auto& block : inst.gains) {
            for (double g : block.data) {
                detail::append_f64_le(out, g);
            }
        }
    }
    return out;
}

inline void write_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("write_dataset: cannot open " + path);
    const std::string bytes = serialize_dataset(ds);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw io_error("write_dataset: write failed for " + path);
}

inline Dataset parse_dataset(const std::string& bytes, const std::string& origin = "<memory>") {
    const std::string magic = kDatasetMagic;
    if (bytes.size() < magic.size() || bytes.compare(0, magic.size(), magic) != 0) {
        throw format_error("dataset " + origin + ": bad magic");
    }
    const std::size_t header_end = bytes.find('\n', magic.size());
    if (header_end == std::string::npos) {
        throw format_error("dataset " + origin + ": missing header line");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(magic.size(), header_end - magic.size()));
    } catch (const nlohmann::json::exception& e) {
        throw format_error("dataset " + origin + ": bad header: " + e.what());
    }

    Dataset ds;
    try {
        ds.config.pairs = header.at("D").get<std::size_t>();
        ds.config.channels = header.at("M").get<std::size_t>();
        ds.config.seed = header.at("seed").get<std::uint64_t>();
        ds.config.area_side = header.at("area_side").get<double>();
        ds.config.d_min = header.at("d_min").get<double>();
        ds.config.d_max = header.at("d_max").get<double>();
        ds.config.gamma = header.at("gamma").get<double>();
        ds.config.noise_power = header.at("noise_power").get<double>();
        ds.config.p_max = header.at("p_max").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw format_error("dataset " + origin + ": header field: " + e.what());
    }
    try {
        ds.config.validate();
    } catch (const contract_error& e) {
        throw format_error("dataset " + origin + ": invalid header: " + e.what());
    }

    std::size_t num_samples = 0;
    try {
        num_samples = header.at("num_samples").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw format_error("dataset " + origin + ": header field: " + e.what());
    }
    const std::size_t d = ds.config.pairs;
    const std::size_t m = ds.config.channels;
    const std::size_t expected = num_samples * m * d * d * 8;
    const std::size_t payload = bytes.size() - header_end - 1;
    if (payload != expected) {
        throw format_error("dataset " + origin + ": truncated payload, expected " +
                           std::to_string(expected) + " bytes, got " + std::to_string(payload));
    }

    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + header_end + 1;
    ds.samples.reserve(num_samples);
    for (std::size_t k = 0; k < num_samples; ++k) {
        ChannelInstance inst;
        inst.gains.reserve(m);
        for (std::size_t ch = 0; ch < m; ++ch) {
            Mat block(d, d);
            for (auto& g : block.data) {
                g = detail::read_f64_le(p);
                p += 8;
                if (!std::isfinite(g) || g < 0.0) {
                    throw format_error("dataset " + origin + ": corrupt gain value");
                }
            }
            inst.gains.push_back(std::move(block));
        }
        ds.samples.push_back(std::move(inst));
    }
    return ds;
}

inline Dataset read_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("read_dataset: cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw io_error("read_dataset: read failed for " + path);
    return parse_dataset(bytes, path);
}

}  // namespace mcra
