#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "mcra/channel.hpp"
#include "mcra/errors.hpp"
#include "mcra/rng.hpp"

namespace {

// Independent re-implementation of the documented generation pipeline
// (splitmix64 -> xoshiro256++ -> uniforms/Box-Muller, topology first, then
// fading channel-major / receiver / transmitter). Used as the oracle for the
// library's sampling order.

struct OracleRng {
    std::uint64_t s[4];

    explicit OracleRng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (int k = 0; k < 4; ++k) {
            sm += 0x9E3779B97F4A7C15ULL;
            std::uint64_t z = sm;
            z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
            z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
            s[k] = z ^ (z >> 31);
        }
    }

    static std::uint64_t rot(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t next() {
        const std::uint64_t out = rot(s[0] + s[3], 23) + s[0];
        const std::uint64_t t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = rot(s[3], 45);
        return out;
    }

    double unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
    double range(double lo, double hi) { return lo + (hi - lo) * unit(); }
};

struct OraclePoints {
    std::vector<double> tx_x, tx_y, rx_x, rx_y;
};

OraclePoints oracle_topology(std::size_t d, double area, double dmin, double dmax,
                             OracleRng& rng) {
    OraclePoints pts;
    for (std::size_t i = 0; i < d; ++i) {
        pts.tx_x.push_back(rng.range(0.0, area));
        pts.tx_y.push_back(rng.range(0.0, area));
    }
    for (std::size_t i = 0; i < d; ++i) {
        double x = 0.0, y = 0.0;
        for (;;) {
            const double theta = rng.range(0.0, 2.0 * std::numbers::pi);
            const double radius = rng.range(dmin, dmax);
            x = pts.tx_x[i] + radius * std::cos(theta);
            y = pts.tx_y[i] + radius * std::sin(theta);
            if (x >= 0.0 && x <= area && y >= 0.0 && y <= area) break;
        }
        pts.rx_x.push_back(x);
        pts.rx_y.push_back(y);
    }
    return pts;
}

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("sample_topology is deterministic and respects bounds") {
    mcra::NetworkConfig config;
    config.pairs = 6;
    config.channels = 2;
    config.seed = 5;
    mcra::Rng a(17), b(17);
    const mcra::Topology t1 = mcra::sample_topology(config, a);
    const mcra::Topology t2 = mcra::sample_topology(config, b);
    REQUIRE(t1.tx == t2.tx);
    REQUIRE(t1.rx == t2.rx);
    REQUIRE(t1.dist == t2.dist);

    for (std::size_t i = 0; i < config.pairs; ++i) {
        REQUIRE(t1.tx(i, 0) >= 0.0);
        REQUIRE(t1.tx(i, 0) <= config.area_side);
        REQUIRE(t1.tx(i, 1) >= 0.0);
        REQUIRE(t1.tx(i, 1) <= config.area_side);
        REQUIRE(t1.rx(i, 0) >= 0.0);
        REQUIRE(t1.rx(i, 0) <= config.area_side);
        REQUIRE(t1.rx(i, 1) >= 0.0);
        REQUIRE(t1.rx(i, 1) <= config.area_side);
        REQUIRE(t1.dist(i, i) >= config.d_min);
        REQUIRE(t1.dist(i, i) <= config.d_max);
    }
}

TEST_CASE("direct-link distances stay in [d_min, d_max] over many draws") {
    mcra::NetworkConfig config;
    config.pairs = 4;
    config.channels = 1;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        mcra::Rng stream(seed);
        const mcra::Topology topo = mcra::sample_topology(config, stream);
        for (std::size_t i = 0; i < config.pairs; ++i) {
            REQUIRE(topo.dist(i, i) >= config.d_min - 1e-12);
            REQUIRE(topo.dist(i, i) <= config.d_max + 1e-12);
        }
    }
}

TEST_CASE("seed 42, D=10 distances match the independent pipeline implementation") {
    mcra::NetworkConfig config;
    config.pairs = 10;
    config.channels = 2;
    mcra::Rng stream(42);
    const mcra::Topology topo = mcra::sample_topology(config, stream);

    OracleRng oracle(42);
    const OraclePoints pts =
        oracle_topology(config.pairs, config.area_side, config.d_min, config.d_max, oracle);
    for (std::size_t i = 0; i < config.pairs; ++i) {
        for (std::size_t j = 0; j < config.pairs; ++j) {
            const double dx = pts.rx_x[i] - pts.tx_x[j];
            const double dy = pts.rx_y[i] - pts.tx_y[j];
            const double expected = std::hypot(dx, dy);
            REQUIRE(topo.dist(i, j) == expected);
        }
    }
}

TEST_CASE("fading draws follow topology on the same stream, channel-major order") {
    mcra::NetworkConfig config;
    config.pairs = 3;
    config.channels = 2;
    config.seed = 9;
    const mcra::ChannelInstance inst = mcra::generate_sample(config, 4);

    OracleRng oracle(config.seed ^ 5);  // stream seed = seed ^ (k + 1), k = 4
    const OraclePoints pts =
        oracle_topology(config.pairs, config.area_side, config.d_min, config.d_max, oracle);
    for (std::size_t m = 0; m < config.channels; ++m) {
        for (std::size_t i = 0; i < config.pairs; ++i) {
            for (std::size_t j = 0; j < config.pairs; ++j) {
                const double dx = pts.rx_x[i] - pts.tx_x[j];
                const double dy = pts.rx_y[i] - pts.tx_y[j];
                const double dist = std::hypot(dx, dy);
                const double u1 = oracle.unit();
                const double u2 = oracle.unit();
                const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
                const double theta = 2.0 * std::numbers::pi * u2;
                const double zx = r * std::cos(theta);
                const double zy = r * std::sin(theta);
                const double mag = std::sqrt(0.5 * (zx * zx + zy * zy));
                const double expected = std::pow(dist, -0.5 * config.gamma) * mag;
                REQUIRE(inst.gains[m](i, j) == expected);
            }
        }
    }
}

TEST_CASE("unit distance with unit fading gives unit gain") {
    REQUIRE(mcra::path_loss_amplitude(1.0, 3.0) == 1.0);
    // Forced |f| = 1: g = d^(-gamma/2) * 1.
    REQUIRE(mcra::path_loss_amplitude(4.0, 3.0) == Catch::Approx(std::pow(4.0, -1.5)));
}

TEST_CASE("E[g^2] at fixed distance converges to d^-gamma within 2%") {
    mcra::NetworkConfig config;
    config.pairs = 1;
    config.channels = 1;
    const double dist = 5.0;
    mcra::Topology topo;
    topo.tx = mcra::Mat(1, 2);
    topo.rx = mcra::Mat(1, 2);
    topo.dist = mcra::Mat(1, 1);
    topo.dist(0, 0) = dist;

    mcra::Rng stream(77);
    const int n = 100000;
    double sum_sq = 0.0;
    for (int k = 0; k < n; ++k) {
        const mcra::ChannelInstance inst = mcra::sample_instance(config, topo, stream);
        sum_sq += inst.gains[0](0, 0) * inst.gains[0](0, 0);
    }
    const double expected = std::pow(dist, -config.gamma);
    REQUIRE(sum_sq / n == Catch::Approx(expected).epsilon(0.02));
}

TEST_CASE("samples are prefix-stable: sample k does not depend on the dataset size") {
    mcra::NetworkConfig config;
    config.pairs = 3;
    config.channels = 2;
    config.seed = 31;
    const mcra::Dataset small = mcra::generate_dataset(config, 3);
    const mcra::Dataset large = mcra::generate_dataset(config, 8);
    for (std::size_t k = 0; k < small.samples.size(); ++k) {
        for (std::size_t m = 0; m < config.channels; ++m) {
            REQUIRE(small.samples[k].gains[m] == large.samples[k].gains[m]);
        }
    }
}

TEST_CASE("dataset round-trip is the identity, byte for byte") {
    mcra::NetworkConfig config;
    config.pairs = 3;
    config.channels = 2;
    config.seed = 1234;
    config.noise_power = 5e-4;
    config.p_max = 2.0;
    const mcra::Dataset ds = mcra::generate_dataset(config, 7);
    const std::string path = temp_path("mcra_roundtrip.mcra");
    mcra::write_dataset(ds, path);
    const mcra::Dataset back = mcra::read_dataset(path);

    REQUIRE(back.config.pairs == config.pairs);
    REQUIRE(back.config.channels == config.channels);
    REQUIRE(back.config.seed == config.seed);
    REQUIRE(back.config.noise_power == config.noise_power);
    REQUIRE(back.config.p_max == config.p_max);
    REQUIRE(back.samples.size() == ds.samples.size());
    for (std::size_t k = 0; k < ds.samples.size(); ++k) {
        for (std::size_t m = 0; m < config.channels; ++m) {
            REQUIRE(back.samples[k].gains[m] == ds.samples[k].gains[m]);
        }
    }
    REQUIRE(mcra::serialize_dataset(back) == mcra::serialize_dataset(ds));
    std::filesystem::remove(path);
}

TEST_CASE("two generation runs serialize byte-identically") {
    mcra::NetworkConfig config;
    config.pairs = 4;
    config.channels = 3;
    config.seed = 99;
    const std::string a = mcra::serialize_dataset(mcra::generate_dataset(config, 5));
    const std::string b = mcra::serialize_dataset(mcra::generate_dataset(config, 5));
    REQUIRE(a == b);
}

TEST_CASE("payload layout: D=2, M=1, one sample is exactly 32 bytes, little-endian") {
    mcra::NetworkConfig config;
    config.pairs = 2;
    config.channels = 1;
    mcra::Dataset ds;
    ds.config = config;
    mcra::ChannelInstance inst;
    mcra::Mat block(2, 2);
    block(0, 0) = 1.0;  // 0x3FF0000000000000
    block(0, 1) = 2.0;
    block(1, 0) = 3.0;
    block(1, 1) = 4.0;
    inst.gains.push_back(block);
    ds.samples.push_back(inst);

    const std::string bytes = mcra::serialize_dataset(ds);
    const std::size_t header_end = bytes.find('\n', 6);  // header line after magic
    REQUIRE(header_end != std::string::npos);
    const std::size_t payload = bytes.size() - header_end - 1;
    REQUIRE(payload == 32);

    // First float is 1.0 in little-endian IEEE-754.
    const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data()) + header_end + 1;
    const unsigned char expected[8] = {0, 0, 0, 0, 0, 0, 0xF0, 0x3F};
    for (int b = 0; b < 8; ++b) REQUIRE(p[b] == expected[b]);
}

TEST_CASE("empty dataset serializes with num_samples=0 and no payload") {
    mcra::NetworkConfig config;
    config.pairs = 2;
    config.channels = 2;
    mcra::Dataset ds;
    ds.config = config;
    const std::string bytes = mcra::serialize_dataset(ds);
    REQUIRE(bytes.back() == '\n');
    REQUIRE(bytes.find("\"num_samples\":0") != std::string::npos);
    const mcra::Dataset back = mcra::parse_dataset(bytes);
    REQUIRE(back.samples.empty());
}

TEST_CASE("read rejects bad magic, truncation, and corruption") {
    mcra::NetworkConfig config;
    config.pairs = 2;
    config.channels = 1;
    config.seed = 3;
    const mcra::Dataset ds = mcra::generate_dataset(config, 2);
    const std::string good = mcra::serialize_dataset(ds);

    SECTION("bad magic") {
        std::string bad = good;
        bad[0] = 'X';
        REQUIRE_THROWS_AS(mcra::parse_dataset(bad), mcra::format_error);
        REQUIRE_THROWS_WITH(mcra::parse_dataset(bad), Catch::Matchers::ContainsSubstring("magic"));
    }
    SECTION("payload short by 8 bytes") {
        const std::string bad = good.substr(0, good.size() - 8);
        REQUIRE_THROWS_WITH(mcra::parse_dataset(bad),
                            Catch::Matchers::ContainsSubstring("truncated"));
    }
    SECTION("non-finite payload value") {
        std::string bad = good;
        // Overwrite the first payload float with a quiet NaN pattern.
        const std::size_t header_end = bad.find('\n', 6);
        for (int b = 0; b < 8; ++b) bad[header_end + 1 + b] = static_cast<char>(0xFF);
        REQUIRE_THROWS_WITH(mcra::parse_dataset(bad),
                            Catch::Matchers::ContainsSubstring("corrupt"));
    }
    SECTION("broken header JSON") {
        std::string bad = good;
        bad[7] = '#';
        REQUIRE_THROWS_AS(mcra::parse_dataset(bad), mcra::format_error);
    }
    SECTION("missing file") {
        REQUIRE_THROWS_AS(mcra::read_dataset("/nonexistent/definitely_missing.mcra"),
                          mcra::io_error);
    }
}

TEST_CASE("config invariants are enforced") {
    mcra::NetworkConfig config;
    config.pairs = 2;
    config.channels = 2;
    SECTION("d_min > d_max") {
        config.d_min = 11.0;
        config.d_max = 10.0;
        REQUIRE_THROWS_AS(config.validate(), mcra::contract_error);
    }
    SECTION("d_max above area") {
        config.d_max = 200.0;
        REQUIRE_THROWS_AS(config.validate(), mcra::contract_error);
    }
    SECTION("nonpositive noise") {
        config.noise_power = 0.0;
        REQUIRE_THROWS_AS(config.validate(), mcra::contract_error);
    }
    SECTION("nonpositive budget") {
        config.p_max = 0.0;
        REQUIRE_THROWS_AS(config.validate(), mcra::contract_error);
    }
    SECTION("negative weight") {
        config.weights = {1.0, -0.5};
        REQUIRE_THROWS_AS(config.validate(), mcra::contract_error);
    }
    SECTION("zero pairs") {
        config.pairs = 0;
        REQUIRE_THROWS_AS(config.validate(), mcra::contract_error);
    }
}
