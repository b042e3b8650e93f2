#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

#include <nlohmann/json.hpp>

#include "mcra/channel.hpp"
#include "mcra/errors.hpp"
#include "mcra/matrix.hpp"
#include "mcra/rate.hpp"
#include "mcra/rng.hpp"

namespace mcra {

// Per-channel message-passing network. Every channel forms a complete graph
// over the D pairs; messages never cross channels. The message network phi1
// maps [x_i, V_i, E_ij] (4 inputs) through a 16-wide hidden layer to a
// 32-wide message; the update network alpha maps [x_i, n_i] (33 inputs)
// through 16 and 8 wide hidden layers to one sigmoid output. Hidden
// activations are rectified linear. Weights are tied across rounds, and the
// per-node state x_i^m is the running power estimate, starting at 0.

enum class Aggregation { max, sum, mean };
enum class FeatureTransform { log_standard, raw };
enum class OutputPolicy { joint, icp };

inline const char* to_string(Aggregation a) {
    switch (a) {
        case Aggregation::max: return "max";
        case Aggregation::sum: return "sum";
        default: return "mean";
    }
}
inline const char* to_string(FeatureTransform f) {
    return f == FeatureTransform::log_standard ? "log_standard" : "raw";
}
inline const char* to_string(OutputPolicy p) { return p == OutputPolicy::joint ? "joint" : "icp"; }

struct NormStats {
    double mean = 0.0;
    double std_dev = 1.0;
};

namespace gnn {

inline constexpr std::size_t kMsgIn = 4;
inline constexpr std::size_t kMsgHidden = 16;
inline constexpr std::size_t kMsgOut = 32;
inline constexpr std::size_t kUpdIn = 1 + kMsgOut;  // 33
inline constexpr std::size_t kUpdHidden1 = 16;
inline constexpr std::size_t kUpdHidden2 = 8;

// Flat parameter layout. Weight blocks are stored input-major, i.e.
// w[k * out + h] multiplies input k into output h, which keeps the hot
// loops contiguous in the output index.
inline constexpr std::size_t kW1 = 0;
inline constexpr std::size_t kB1 = kW1 + kMsgIn * kMsgHidden;
inline constexpr std::size_t kW2 = kB1 + kMsgHidden;
inline constexpr std::size_t kB2 = kW2 + kMsgHidden * kMsgOut;
inline constexpr std::size_t kW3 = kB2 + kMsgOut;
inline constexpr std::size_t kB3 = kW3 + kUpdIn * kUpdHidden1;
inline constexpr std::size_t kW4 = kB3 + kUpdHidden1;
inline constexpr std::size_t kB4 = kW4 + kUpdHidden1 * kUpdHidden2;
inline constexpr std::size_t kW5 = kB4 + kUpdHidden2;
inline constexpr std::size_t kB5 = kW5 + kUpdHidden2 * 1;
inline constexpr std::size_t kParamCount = kB5 + 1;

inline double sigmoid(double a) { return 1.0 / (1.0 + std::exp(-a)); }

}  // namespace gnn

struct GnnModel {
    std::size_t rounds = 3;
    Aggregation aggregation = Aggregation::max;
    FeatureTransform feature_transform = FeatureTransform::log_standard;
    OutputPolicy output_policy = OutputPolicy::joint;
    NormStats norm;
    double p_max = 1.0;                 // budget the model was trained against
    std::vector<double> params;         // gnn::kParamCount doubles
    nlohmann::json metadata;            // how the checkpoint was produced; round-tripped verbatim

    const double* w(std::size_t offset) const { return params.data() + offset; }

    void validate() const {
        if (rounds == 0) throw contract_error("GnnModel: rounds must be >= 1");
        if (params.size() != gnn::kParamCount) {
            throw contract_error("GnnModel: parameter vector has wrong length");
        }
        if (!(norm.std_dev > 0.0)) throw contract_error("GnnModel: normalization std must be > 0");
        for (double p : params) {
            if (!std::isfinite(p)) throw contract_error("GnnModel: non-finite weight");
        }
    }
};

/// Zero-mean uniform init with half-width sqrt(6 / (fan_in + fan_out));
/// biases start at zero. Draws run layer by layer, output-major.
inline GnnModel init_model(std::uint64_t seed, std::size_t rounds = 3,
                           Aggregation aggregation = Aggregation::max,
                           FeatureTransform features = FeatureTransform::log_standard,
                           OutputPolicy policy = OutputPolicy::joint) {
    GnnModel model;
    model.rounds = rounds;
    model.aggregation = aggregation;
    model.feature_transform = features;
    model.output_policy = policy;
    model.params.assign(gnn::kParamCount, 0.0);

    Rng rng(seed);
    const std::size_t dims[5][2] = {{gnn::kMsgIn, gnn::kMsgHidden},
                                    {gnn::kMsgHidden, gnn::kMsgOut},
                                    {gnn::kUpdIn, gnn::kUpdHidden1},
                                    {gnn::kUpdHidden1, gnn::kUpdHidden2},
                                    {gnn::kUpdHidden2, 1}};
    const std::size_t offsets[5] = {gnn::kW1, gnn::kW2, gnn::kW3, gnn::kW4, gnn::kW5};
    for (int layer = 0; layer < 5; ++layer) {
        const std::size_t in = dims[layer][0];
        const std::size_t out = dims[layer][1];
        const double half = std::sqrt(6.0 / static_cast<double>(in + out));
        for (std::size_t h = 0; h < out; ++h) {
            for (std::size_t k = 0; k < in; ++k) {
                model.params[offsets[layer] + k * out + h] = rng.uniform(-half, half);
            }
        }
    }
    return model;
}

/// Transformed gain blocks; V_i^m sits on the diagonal of block m, and the
/// ordered-edge feature pair for (i, j) is (block(i, j), block(j, i)).
struct GraphFeatures {
    std::size_t pairs = 0;
    std::size_t channels = 0;
    std::vector<Mat> blocks;

    double node(std::size_t i, std::size_t m) const { return blocks[m](i, i); }
};

inline double transform_gain(double g, const NormStats& stats, FeatureTransform mode) {
    if (mode == FeatureTransform::raw) return g;
    return (std::log10(g + 1e-12) - stats.mean) / stats.std_dev;
}

inline GraphFeatures build_features(const ChannelInstance& inst, const NetworkConfig& config,
                                    const NormStats& stats,
                                    FeatureTransform mode = FeatureTransform::log_standard) {
    if (inst.channels() != config.channels || inst.pairs() != config.pairs) {
        throw contract_error("build_features: instance does not match config");
    }
    if (!std::isfinite(stats.mean) || !(stats.std_dev > 0.0) || !std::isfinite(stats.std_dev)) {
        throw contract_error("build_features: invalid normalization stats");
    }
    GraphFeatures feat;
    feat.pairs = config.pairs;
    feat.channels = config.channels;
    feat.blocks.reserve(config.channels);
    for (const Mat& g : inst.gains) {
        Mat block(g.rows, g.cols);
        for (std::size_t k = 0; k < g.size(); ++k) {
            block.data[k] = transform_gain(g.data[k], stats, mode);
        }
        feat.blocks.push_back(std::move(block));
    }
    return feat;
}

/// Mean and standard deviation of log10(g + 1e-12) across every gain entry
/// of the given samples.
inline NormStats compute_norm_stats(const std::vector<ChannelInstance>& samples) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& inst : samples) {
        for (const auto& block : inst.gains) {
            for (double g : block.data) {
                sum += std::log10(g + 1e-12);
                ++count;
            }
        }
    }
    if (count == 0) throw contract_error("compute_norm_stats: no samples");
    NormStats stats;
    stats.mean = sum / static_cast<double>(count);
    // Centered two-pass variance: the moment formula's cancellation noise
    // could leave a near-zero std for constant-gain data, which would slip
    // past the degeneracy fallback and explode the normalized features.
    double sq_dev = 0.0;
    for (const auto& inst : samples) {
        for (const auto& block : inst.gains) {
            for (double g : block.data) {
                const double d = std::log10(g + 1e-12) - stats.mean;
                sq_dev += d * d;
            }
        }
    }
    stats.std_dev = std::sqrt(sq_dev / static_cast<double>(count));
    if (!(stats.std_dev > 0.0)) stats.std_dev = 1.0;  // degenerate constant-gain data
    return stats;
}

/// Everything backward needs: per-round hidden activations and aggregation
/// routing. x[s] is the node state entering round s (x[0] = 0).
struct ForwardCache {
    std::size_t pairs = 0;
    std::size_t channels = 0;
    std::size_t rounds = 0;
    double scale = 0.0;  // sigmoid multiplier used at every round
    std::vector<Mat> x;  // rounds + 1 matrices, D x M
    // Flattened per round: edges indexed e = i * (D - 1) + (j < i ? j : j - 1),
    // grouped per channel, receivers contiguous.
    std::vector<std::vector<double>> h1;        // [round][m * E * 16]
    std::vector<std::vector<double>> h2;        // [round][m * E * 32]
    std::vector<std::vector<double>> agg;       // [round][m * D * 32]
    std::vector<std::vector<std::uint32_t>> arg;  // [round][m * D * 32], max only
    std::vector<std::vector<double>> h3;        // [round][m * D * 16]
    std::vector<std::vector<double>> h4;        // [round][m * D * 8]
    std::vector<std::vector<double>> y;         // [round][m * D]

    bool empty() const { return rounds == 0; }
};

struct GnnForward {
    Mat phat;  // D x M, in [0, scale]
    ForwardCache cache;
};

namespace gnn {

inline double output_scale(const GnnModel& model, const NetworkConfig& config) {
    const double base = config.p_max;
    return model.output_policy == OutputPolicy::joint
               ? base
               : base / static_cast<double>(config.channels);
}

#if defined(__AVX512F__)

// Vectorized inference path. Computes the same network as the portable loop
// below (identical accumulation order per layer, so results agree to the
// rounding of fused multiply-adds, which -O3 already applies to the portable
// loop) but fuses message layer, rectifier, and neighborhood aggregation so
// the 16x32 message layer never leaves registers. Inference only: training
// wants the per-edge trajectory cached and takes the portable path.
namespace detail_avx512 {

inline __m512d relu(__m512d v) { return _mm512_max_pd(v, _mm512_setzero_pd()); }

// Message layer, rectifier, and aggregation for NE edges whose 16 hidden
// activations sit in h1buf, fused so the 32-wide messages never leave
// registers. For max aggregation the rectifier folds into the running max:
// the accumulator is nonnegative, so max(n, relu(a)) == max(n, a) exactly.
template <int NE>
inline void message_block(const double* h1buf, const double* w2, const double* b2, bool is_max,
                          __m512d n[4]) {
    __m512d acc[NE][4];
    for (int t = 0; t < NE; ++t) {
        acc[t][0] = _mm512_loadu_pd(b2 + 0);
        acc[t][1] = _mm512_loadu_pd(b2 + 8);
        acc[t][2] = _mm512_loadu_pd(b2 + 16);
        acc[t][3] = _mm512_loadu_pd(b2 + 24);
    }
    for (int k = 0; k < static_cast<int>(kMsgHidden); ++k) {
        const double* w2row = w2 + static_cast<std::size_t>(k) * kMsgOut;
        const __m512d r0 = _mm512_loadu_pd(w2row + 0);
        const __m512d r1 = _mm512_loadu_pd(w2row + 8);
        const __m512d r2 = _mm512_loadu_pd(w2row + 16);
        const __m512d r3 = _mm512_loadu_pd(w2row + 24);
        for (int t = 0; t < NE; ++t) {
            const __m512d b = _mm512_set1_pd(h1buf[t * static_cast<int>(kMsgHidden) + k]);
            acc[t][0] = _mm512_fmadd_pd(b, r0, acc[t][0]);
            acc[t][1] = _mm512_fmadd_pd(b, r1, acc[t][1]);
            acc[t][2] = _mm512_fmadd_pd(b, r2, acc[t][2]);
            acc[t][3] = _mm512_fmadd_pd(b, r3, acc[t][3]);
        }
    }
    if (is_max) {
        for (int t = 0; t < NE; ++t) {
            n[0] = _mm512_max_pd(n[0], acc[t][0]);
            n[1] = _mm512_max_pd(n[1], acc[t][1]);
            n[2] = _mm512_max_pd(n[2], acc[t][2]);
            n[3] = _mm512_max_pd(n[3], acc[t][3]);
        }
    } else {
        for (int t = 0; t < NE; ++t) {
            n[0] = _mm512_add_pd(n[0], relu(acc[t][0]));
            n[1] = _mm512_add_pd(n[1], relu(acc[t][1]));
            n[2] = _mm512_add_pd(n[2], relu(acc[t][2]));
            n[3] = _mm512_add_pd(n[3], relu(acc[t][3]));
        }
    }
}

inline void forward(const GnnModel& model, const GraphFeatures& feat, double scale, Mat& result) {
    const std::size_t d = feat.pairs;
    const std::size_t ch = feat.channels;
    const std::size_t deg = d - 1;
    const std::size_t edges = d * deg;

    const double* w1 = model.w(kW1);
    const double* b1 = model.w(kB1);
    const double* w2 = model.w(kW2);
    const double* b2 = model.w(kB2);
    const double* w3 = model.w(kW3);
    const double* b3 = model.w(kB3);
    const double* w4 = model.w(kW4);
    const double* b4 = model.w(kB4);
    const double* w5 = model.w(kW5);
    const double b5 = model.params[kB5];

    const __m512d w1x_lo = _mm512_loadu_pd(w1 + 0 * kMsgHidden);
    const __m512d w1x_hi = _mm512_loadu_pd(w1 + 0 * kMsgHidden + 8);
    const __m512d w1v_lo = _mm512_loadu_pd(w1 + 1 * kMsgHidden);
    const __m512d w1v_hi = _mm512_loadu_pd(w1 + 1 * kMsgHidden + 8);
    const __m512d w1e0_lo = _mm512_loadu_pd(w1 + 2 * kMsgHidden);
    const __m512d w1e0_hi = _mm512_loadu_pd(w1 + 2 * kMsgHidden + 8);
    const __m512d w1e1_lo = _mm512_loadu_pd(w1 + 3 * kMsgHidden);
    const __m512d w1e1_hi = _mm512_loadu_pd(w1 + 3 * kMsgHidden + 8);
    const __m512d b1_lo = _mm512_loadu_pd(b1);
    const __m512d b1_hi = _mm512_loadu_pd(b1 + 8);

    // Static half of the message layer's first affine map: everything except
    // the x_i term is round-invariant, so it is evaluated once per call.
    thread_local std::vector<double> static1;
    static1.resize(ch * edges * kMsgHidden);
    for (std::size_t m = 0; m < ch; ++m) {
        const Mat& block = feat.blocks[m];
        double* sm = static1.data() + m * edges * kMsgHidden;
        for (std::size_t i = 0; i < d; ++i) {
            const __m512d vi = _mm512_set1_pd(block(i, i));
            const __m512d base_lo = _mm512_fmadd_pd(vi, w1v_lo, b1_lo);
            const __m512d base_hi = _mm512_fmadd_pd(vi, w1v_hi, b1_hi);
            for (std::size_t jj = 0; jj < deg; ++jj) {
                const std::size_t j = jj < i ? jj : jj + 1;
                const __m512d e0 = _mm512_set1_pd(block(i, j));
                const __m512d e1 = _mm512_set1_pd(block(j, i));
                __m512d lo = _mm512_fmadd_pd(e0, w1e0_lo, base_lo);
                __m512d hi = _mm512_fmadd_pd(e0, w1e0_hi, base_hi);
                lo = _mm512_fmadd_pd(e1, w1e1_lo, lo);
                hi = _mm512_fmadd_pd(e1, w1e1_hi, hi);
                double* se = sm + (i * deg + jj) * kMsgHidden;
                _mm512_storeu_pd(se, lo);
                _mm512_storeu_pd(se + 8, hi);
            }
        }
    }

    Mat x(d, ch);
    Mat x_next(d, ch);
    alignas(64) double h1buf[6 * kMsgHidden];
    alignas(64) double nbuf[kMsgOut];
    alignas(64) double h3buf[kUpdHidden1];
    const bool is_max = model.aggregation == Aggregation::max;

    for (std::size_t s = 0; s < model.rounds; ++s) {
        for (std::size_t m = 0; m < ch; ++m) {
            const double* sm = static1.data() + m * edges * kMsgHidden;
            for (std::size_t i = 0; i < d; ++i) {
                const double xi = x(i, m);
                const __m512d xib = _mm512_set1_pd(xi);

                // Aggregate the deg incoming messages in blocks of four
                // edges. Messages are rectified (nonnegative), so starting
                // the accumulators at zero reproduces first-message-copy
                // semantics for max; sum accumulation visits neighbors in
                // the portable loop's order.
                __m512d n[4] = {_mm512_setzero_pd(), _mm512_setzero_pd(), _mm512_setzero_pd(),
                                _mm512_setzero_pd()};
                const double* srow = sm + i * deg * kMsgHidden;
                auto fill_h1 = [&](std::size_t jj, int t) {
                    const double* s0 = srow + jj * kMsgHidden;
                    double* dst = h1buf + static_cast<std::size_t>(t) * kMsgHidden;
                    _mm512_storeu_pd(dst,
                                     relu(_mm512_fmadd_pd(xib, w1x_lo, _mm512_loadu_pd(s0))));
                    _mm512_storeu_pd(
                        dst + 8, relu(_mm512_fmadd_pd(xib, w1x_hi, _mm512_loadu_pd(s0 + 8))));
                };
                std::size_t jj = 0;
                for (; jj + 6 <= deg; jj += 6) {
                    fill_h1(jj, 0);
                    fill_h1(jj + 1, 1);
                    fill_h1(jj + 2, 2);
                    fill_h1(jj + 3, 3);
                    fill_h1(jj + 4, 4);
                    fill_h1(jj + 5, 5);
                    message_block<6>(h1buf, w2, b2, is_max, n);
                }
                for (; jj + 4 <= deg; jj += 4) {
                    fill_h1(jj, 0);
                    fill_h1(jj + 1, 1);
                    fill_h1(jj + 2, 2);
                    fill_h1(jj + 3, 3);
                    message_block<4>(h1buf, w2, b2, is_max, n);
                }
                if (jj + 2 <= deg) {
                    fill_h1(jj, 0);
                    fill_h1(jj + 1, 1);
                    message_block<2>(h1buf, w2, b2, is_max, n);
                    jj += 2;
                }
                if (jj < deg) {
                    fill_h1(jj, 0);
                    message_block<1>(h1buf, w2, b2, is_max, n);
                }
                if (model.aggregation == Aggregation::mean && deg > 0) {
                    const __m512d dv = _mm512_set1_pd(static_cast<double>(deg));
                    n[0] = _mm512_div_pd(n[0], dv), n[1] = _mm512_div_pd(n[1], dv);
                    n[2] = _mm512_div_pd(n[2], dv), n[3] = _mm512_div_pd(n[3], dv);
                }
                _mm512_storeu_pd(nbuf + 0, n[0]);
                _mm512_storeu_pd(nbuf + 8, n[1]);
                _mm512_storeu_pd(nbuf + 16, n[2]);
                _mm512_storeu_pd(nbuf + 24, n[3]);

                // Update network on [x_i, n_i].
                __m512d u0 = _mm512_fmadd_pd(xib, _mm512_loadu_pd(w3), _mm512_loadu_pd(b3));
                __m512d u1 =
                    _mm512_fmadd_pd(xib, _mm512_loadu_pd(w3 + 8), _mm512_loadu_pd(b3 + 8));
                for (std::size_t k = 0; k < kMsgOut; ++k) {
                    const __m512d bn = _mm512_set1_pd(nbuf[k]);
                    const double* w3row = w3 + (k + 1) * kUpdHidden1;
                    u0 = _mm512_fmadd_pd(bn, _mm512_loadu_pd(w3row), u0);
                    u1 = _mm512_fmadd_pd(bn, _mm512_loadu_pd(w3row + 8), u1);
                }
                _mm512_storeu_pd(h3buf, relu(u0));
                _mm512_storeu_pd(h3buf + 8, relu(u1));

                __m512d v0 = _mm512_loadu_pd(b4);
                for (std::size_t k = 0; k < kUpdHidden1; ++k) {
                    v0 = _mm512_fmadd_pd(_mm512_set1_pd(h3buf[k]), _mm512_loadu_pd(w4 + k * kUpdHidden2),
                                         v0);
                }
                v0 = relu(v0);
                const double a5 =
                    b5 + _mm512_reduce_add_pd(_mm512_mul_pd(v0, _mm512_loadu_pd(w5)));
                if (!std::isfinite(a5)) {
                    throw numeric_error("gnn_forward: non-finite activation at round " +
                                        std::to_string(s + 1) + ", channel " + std::to_string(m) +
                                        ", node " + std::to_string(i) + " (update network)");
                }
                x_next(i, m) = scale * sigmoid(a5);
            }
        }
        std::swap(x, x_next);
    }
    result = std::move(x);
}

}  // namespace detail_avx512

#endif  // __AVX512F__

}  // namespace gnn

/// S tied rounds of message passing. Set want_cache for training; inference
/// skips all per-edge storage.
inline GnnForward gnn_forward(const GnnModel& model, const GraphFeatures& feat,
                              const NetworkConfig& config, bool want_cache = false) {
    model.validate();
    if (feat.pairs != config.pairs || feat.channels != config.channels) {
        throw contract_error("gnn_forward: features do not match config");
    }
    const std::size_t d = feat.pairs;
    const std::size_t ch = feat.channels;
    const std::size_t deg = d - 1;
    const std::size_t edges = d * deg;
    const double scale = gnn::output_scale(model, config);

#if defined(__AVX512F__)
    if (!want_cache) {
        GnnForward fast;
        gnn::detail_avx512::forward(model, feat, scale, fast.phat);
        return fast;
    }
#endif

    const double* w1 = model.w(gnn::kW1);
    const double* b1 = model.w(gnn::kB1);
    const double* w2 = model.w(gnn::kW2);
    const double* b2 = model.w(gnn::kB2);
    const double* w3 = model.w(gnn::kW3);
    const double* b3 = model.w(gnn::kB3);
    const double* w4 = model.w(gnn::kW4);
    const double* b4 = model.w(gnn::kB4);
    const double* w5 = model.w(gnn::kW5);
    const double b5 = model.params[gnn::kB5];

    GnnForward out;
    ForwardCache& cache = out.cache;
    if (want_cache) {
        cache.pairs = d;
        cache.channels = ch;
        cache.rounds = model.rounds;
        cache.scale = scale;
        cache.x.assign(model.rounds + 1, Mat(d, ch));
        cache.h1.assign(model.rounds, std::vector<double>(ch * edges * gnn::kMsgHidden));
        cache.h2.assign(model.rounds, std::vector<double>(ch * edges * gnn::kMsgOut));
        cache.agg.assign(model.rounds, std::vector<double>(ch * d * gnn::kMsgOut));
        if (model.aggregation == Aggregation::max) {
            cache.arg.assign(model.rounds, std::vector<std::uint32_t>(ch * d * gnn::kMsgOut, 0));
        }
        cache.h3.assign(model.rounds, std::vector<double>(ch * d * gnn::kUpdHidden1));
        cache.h4.assign(model.rounds, std::vector<double>(ch * d * gnn::kUpdHidden2));
        cache.y.assign(model.rounds, std::vector<double>(ch * d));
    }

    Mat x(d, ch);       // state entering the round, x^(0) = 0
    Mat x_next(d, ch);
    double h1_local[gnn::kMsgHidden];
    double h2_local[gnn::kMsgOut];
    double n_local[gnn::kMsgOut];
    std::uint32_t arg_local[gnn::kMsgOut];
    double h3_local[gnn::kUpdHidden1];
    double h4_local[gnn::kUpdHidden2];

    for (std::size_t s = 0; s < model.rounds; ++s) {
        for (std::size_t m = 0; m < ch; ++m) {
            const Mat& block = feat.blocks[m];
            for (std::size_t i = 0; i < d; ++i) {
                const double xi = x(i, m);
                const double vi = block(i, i);

                // Aggregate messages from every neighbor on this channel.
                std::fill(n_local, n_local + gnn::kMsgOut, 0.0);
                bool first = true;
                for (std::size_t j = 0; j < d; ++j) {
                    if (j == i) continue;
                    const double e0 = block(i, j);
                    const double e1 = block(j, i);
                    for (std::size_t h = 0; h < gnn::kMsgHidden; ++h) {
                        const double a = b1[h] + xi * w1[0 * gnn::kMsgHidden + h] +
                                         vi * w1[1 * gnn::kMsgHidden + h] +
                                         e0 * w1[2 * gnn::kMsgHidden + h] +
                                         e1 * w1[3 * gnn::kMsgHidden + h];
                        h1_local[h] = a > 0.0 ? a : 0.0;
                    }
                    for (std::size_t o = 0; o < gnn::kMsgOut; ++o) h2_local[o] = b2[o];
                    for (std::size_t h = 0; h < gnn::kMsgHidden; ++h) {
                        const double hv = h1_local[h];
                        const double* w2row = w2 + h * gnn::kMsgOut;
                        for (std::size_t o = 0; o < gnn::kMsgOut; ++o) h2_local[o] += hv * w2row[o];
                    }
                    for (std::size_t o = 0; o < gnn::kMsgOut; ++o) {
                        h2_local[o] = h2_local[o] > 0.0 ? h2_local[o] : 0.0;
                    }

                    const std::size_t e = i * deg + (j < i ? j : j - 1);
                    if (want_cache) {
                        std::copy(h1_local, h1_local + gnn::kMsgHidden,
                                  cache.h1[s].data() + (m * edges + e) * gnn::kMsgHidden);
                        std::copy(h2_local, h2_local + gnn::kMsgOut,
                                  cache.h2[s].data() + (m * edges + e) * gnn::kMsgOut);
                    }

                    switch (model.aggregation) {
                        case Aggregation::max:
                            if (first) {
                                std::copy(h2_local, h2_local + gnn::kMsgOut, n_local);
                                std::fill(arg_local, arg_local + gnn::kMsgOut,
                                          static_cast<std::uint32_t>(e));
                            } else {
                                for (std::size_t o = 0; o < gnn::kMsgOut; ++o) {
                                    if (h2_local[o] > n_local[o]) {
                                        n_local[o] = h2_local[o];
                                        arg_local[o] = static_cast<std::uint32_t>(e);
                                    }
                                }
                            }
                            break;
                        case Aggregation::sum:
                        case Aggregation::mean:
                            for (std::size_t o = 0; o < gnn::kMsgOut; ++o) n_local[o] += h2_local[o];
                            break;
                    }
                    first = false;
                }
                if (model.aggregation == Aggregation::mean && deg > 0) {
                    for (std::size_t o = 0; o < gnn::kMsgOut; ++o) {
                        n_local[o] /= static_cast<double>(deg);
                    }
                }

                // Update network on [x_i, n_i].
                for (std::size_t h = 0; h < gnn::kUpdHidden1; ++h) {
                    h3_local[h] = b3[h] + xi * w3[0 * gnn::kUpdHidden1 + h];
                }
                for (std::size_t k = 0; k < gnn::kMsgOut; ++k) {
                    const double nv = n_local[k];
                    const double* w3row = w3 + (k + 1) * gnn::kUpdHidden1;
                    for (std::size_t h = 0; h < gnn::kUpdHidden1; ++h) h3_local[h] += nv * w3row[h];
                }
                for (std::size_t h = 0; h < gnn::kUpdHidden1; ++h) {
                    h3_local[h] = h3_local[h] > 0.0 ? h3_local[h] : 0.0;
                }
                for (std::size_t o = 0; o < gnn::kUpdHidden2; ++o) h4_local[o] = b4[o];
                for (std::size_t k = 0; k < gnn::kUpdHidden1; ++k) {
                    const double hv = h3_local[k];
                    const double* w4row = w4 + k * gnn::kUpdHidden2;
                    for (std::size_t o = 0; o < gnn::kUpdHidden2; ++o) h4_local[o] += hv * w4row[o];
                }
                for (std::size_t o = 0; o < gnn::kUpdHidden2; ++o) {
                    h4_local[o] = h4_local[o] > 0.0 ? h4_local[o] : 0.0;
                }
                double a5 = b5;
                for (std::size_t k = 0; k < gnn::kUpdHidden2; ++k) a5 += h4_local[k] * w5[k];
                if (!std::isfinite(a5)) {
                    throw numeric_error("gnn_forward: non-finite activation at round " +
                                        std::to_string(s + 1) + ", channel " + std::to_string(m) +
                                        ", node " + std::to_string(i) + " (update network)");
                }
                const double yv = gnn::sigmoid(a5);
                x_next(i, m) = scale * yv;

                if (want_cache) {
                    const std::size_t node = m * d + i;
                    std::copy(n_local, n_local + gnn::kMsgOut,
                              cache.agg[s].data() + node * gnn::kMsgOut);
                    if (model.aggregation == Aggregation::max) {
                        std::copy(arg_local, arg_local + gnn::kMsgOut,
                                  cache.arg[s].data() + node * gnn::kMsgOut);
                    }
                    std::copy(h3_local, h3_local + gnn::kUpdHidden1,
                              cache.h3[s].data() + node * gnn::kUpdHidden1);
                    std::copy(h4_local, h4_local + gnn::kUpdHidden2,
                              cache.h4[s].data() + node * gnn::kUpdHidden2);
                    cache.y[s][node] = yv;
                }
            }
        }
        if (want_cache) cache.x[s] = x;
        std::swap(x, x_next);
    }
    if (want_cache) cache.x[model.rounds] = x;
    out.phat = std::move(x);
    return out;
}

/// Row-wise budget correction: rows whose total exceeds p_max are rescaled
/// onto the budget, everything else passes through.
inline Allocation post_process(const Mat& phat, const NetworkConfig& config) {
    if (phat.rows != config.pairs || phat.cols != config.channels) {
        throw contract_error("post_process: shape mismatch");
    }
    Mat power = phat;
    for (std::size_t i = 0; i < power.rows; ++i) {
        double total = 0.0;
        for (std::size_t m = 0; m < power.cols; ++m) total += power(i, m);
        if (total > config.p_max) {
            const double factor = config.p_max / total;
            for (std::size_t m = 0; m < power.cols; ++m) power(i, m) *= factor;
        }
    }
    return Allocation::from_power(std::move(power), config);
}

/// Pullback of post_process: maps d Loss / d P to d Loss / d phat, treating
/// the branch condition as locally constant.
inline Mat post_process_pullback(const Mat& phat, const NetworkConfig& config, const Mat& grad_p) {
    if (!phat.same_shape(grad_p)) throw contract_error("post_process_pullback: shape mismatch");
    Mat grad_phat(phat.rows, phat.cols);
    for (std::size_t i = 0; i < phat.rows; ++i) {
        double total = 0.0;
        for (std::size_t m = 0; m < phat.cols; ++m) total += phat(i, m);
        if (total > config.p_max) {
            // p_m = phat_m * p_max / T:  dphat_k = p_max/T g_k - p_max/T^2 sum_m g_m phat_m
            double dot = 0.0;
            for (std::size_t m = 0; m < phat.cols; ++m) dot += grad_p(i, m) * phat(i, m);
            const double inv_total = 1.0 / total;
            for (std::size_t m = 0; m < phat.cols; ++m) {
                grad_phat(i, m) =
                    config.p_max * inv_total * (grad_p(i, m) - dot * inv_total);
            }
        } else {
            for (std::size_t m = 0; m < phat.cols; ++m) grad_phat(i, m) = grad_p(i, m);
        }
    }
    return grad_phat;
}

/// Reverse-mode gradient of a scalar loss with respect to every weight.
/// grad_phat is d Loss / d phat at the round-S output (callers fold the
/// post-processing pullback and any direct pre-normalization term into it
/// first). Max aggregation routes gradient to the lowest-index argmax edge;
/// rectified-linear kinks use subgradient 0 at exactly 0.
inline std::vector<double> gnn_backward(const GnnModel& model, const GraphFeatures& feat,
                                        const ForwardCache& cache, const Mat& grad_phat) {
    if (cache.empty()) throw contract_error("gnn_backward: forward cache missing");
    if (cache.pairs != feat.pairs || cache.channels != feat.channels ||
        cache.rounds != model.rounds) {
        throw contract_error("gnn_backward: cache does not match model/features");
    }
    if (grad_phat.rows != feat.pairs || grad_phat.cols != feat.channels) {
        throw contract_error("gnn_backward: upstream gradient shape mismatch");
    }
    const std::size_t d = feat.pairs;
    const std::size_t ch = feat.channels;
    const std::size_t deg = d - 1;
    const std::size_t edges = d * deg;

    const double* w1 = model.w(gnn::kW1);
    const double* w2 = model.w(gnn::kW2);
    const double* w3 = model.w(gnn::kW3);
    const double* w4 = model.w(gnn::kW4);
    const double* w5 = model.w(gnn::kW5);

    std::vector<double> grad(gnn::kParamCount, 0.0);
    double* gw1 = grad.data() + gnn::kW1;
    double* gb1 = grad.data() + gnn::kB1;
    double* gw2 = grad.data() + gnn::kW2;
    double* gb2 = grad.data() + gnn::kB2;
    double* gw3 = grad.data() + gnn::kW3;
    double* gb3 = grad.data() + gnn::kB3;
    double* gw4 = grad.data() + gnn::kW4;
    double* gb4 = grad.data() + gnn::kB4;
    double* gw5 = grad.data() + gnn::kW5;
    double* gb5 = grad.data() + gnn::kB5;

    Mat dx = grad_phat;      // gradient w.r.t. the state leaving the round
    Mat dx_prev(d, ch);      // accumulates gradient w.r.t. the entering state
    std::vector<double> dmsg(ch * edges * gnn::kMsgOut);
    std::vector<std::uint8_t> touched(ch * edges);
    double dn[gnn::kMsgOut];
    double da4[gnn::kUpdHidden2];
    double da3[gnn::kUpdHidden1];
    double da2[gnn::kMsgOut];
    double da1[gnn::kMsgHidden];

    for (std::size_t s = model.rounds; s-- > 0;) {
        const Mat& x_in = cache.x[s];
        std::fill(dx_prev.data.begin(), dx_prev.data.end(), 0.0);
        std::fill(dmsg.begin(), dmsg.end(), 0.0);
        std::fill(touched.begin(), touched.end(), 0);

        for (std::size_t m = 0; m < ch; ++m) {
            const Mat& block = feat.blocks[m];
            for (std::size_t i = 0; i < d; ++i) {
                const std::size_t node = m * d + i;
                const double upstream = dx(i, m);
                if (upstream == 0.0) continue;

                const double yv = cache.y[s][node];
                const double da5 = upstream * cache.scale * yv * (1.0 - yv);
                const double* h4v = cache.h4[s].data() + node * gnn::kUpdHidden2;
                const double* h3v = cache.h3[s].data() + node * gnn::kUpdHidden1;
                const double* nv = cache.agg[s].data() + node * gnn::kMsgOut;
                const double xi = x_in(i, m);

                gb5[0] += da5;
                for (std::size_t k = 0; k < gnn::kUpdHidden2; ++k) {
                    gw5[k] += da5 * h4v[k];
                    da4[k] = h4v[k] > 0.0 ? w5[k] * da5 : 0.0;
                }
                for (std::size_t o = 0; o < gnn::kUpdHidden2; ++o) gb4[o] += da4[o];
                for (std::size_t k = 0; k < gnn::kUpdHidden1; ++k) {
                    const double h3k = h3v[k];
                    double acc = 0.0;
                    const double* w4row = w4 + k * gnn::kUpdHidden2;
                    double* gw4row = gw4 + k * gnn::kUpdHidden2;
                    for (std::size_t o = 0; o < gnn::kUpdHidden2; ++o) {
                        gw4row[o] += h3k * da4[o];
                        acc += w4row[o] * da4[o];
                    }
                    da3[k] = h3k > 0.0 ? acc : 0.0;
                }
                for (std::size_t h = 0; h < gnn::kUpdHidden1; ++h) gb3[h] += da3[h];
                {
                    double acc_x = 0.0;
                    double* gw3x = gw3 + 0 * gnn::kUpdHidden1;
                    const double* w3x = w3 + 0 * gnn::kUpdHidden1;
                    for (std::size_t h = 0; h < gnn::kUpdHidden1; ++h) {
                        gw3x[h] += xi * da3[h];
                        acc_x += w3x[h] * da3[h];
                    }
                    dx_prev(i, m) += acc_x;
                }
                for (std::size_t k = 0; k < gnn::kMsgOut; ++k) {
                    const double nk = nv[k];
                    const double* w3row = w3 + (k + 1) * gnn::kUpdHidden1;
                    double* gw3row = gw3 + (k + 1) * gnn::kUpdHidden1;
                    double acc = 0.0;
                    for (std::size_t h = 0; h < gnn::kUpdHidden1; ++h) {
                        gw3row[h] += nk * da3[h];
                        acc += w3row[h] * da3[h];
                    }
                    dn[k] = acc;
                }

                // Route the aggregated-message gradient back onto edges.
                if (deg == 0) continue;
                switch (model.aggregation) {
                    case Aggregation::max: {
                        const std::uint32_t* argv = cache.arg[s].data() + node * gnn::kMsgOut;
                        for (std::size_t o = 0; o < gnn::kMsgOut; ++o) {
                            if (dn[o] == 0.0) continue;
                            const std::size_t e = argv[o];
                            dmsg[(m * edges + e) * gnn::kMsgOut + o] += dn[o];
                            touched[m * edges + e] = 1;
                        }
                        break;
                    }
                    case Aggregation::sum:
                    case Aggregation::mean: {
                        const double f = model.aggregation == Aggregation::mean
                                             ? 1.0 / static_cast<double>(deg)
                                             : 1.0;
                        for (std::size_t j = 0; j < d; ++j) {
                            if (j == i) continue;
                            const std::size_t e = i * deg + (j < i ? j : j - 1);
                            double* slot = dmsg.data() + (m * edges + e) * gnn::kMsgOut;
                            for (std::size_t o = 0; o < gnn::kMsgOut; ++o) slot[o] += f * dn[o];
                            touched[m * edges + e] = 1;
                        }
                        break;
                    }
                }
            }

            // Message-network backward for every edge that received gradient.
            for (std::size_t i = 0; i < d; ++i) {
                const double xi = x_in(i, m);
                const double vi = block(i, i);
                for (std::size_t j = 0; j < d; ++j) {
                    if (j == i) continue;
                    const std::size_t e = i * deg + (j < i ? j : j - 1);
                    if (!touched[m * edges + e]) continue;
                    const double* dh2 = dmsg.data() + (m * edges + e) * gnn::kMsgOut;
                    const double* h2v = cache.h2[s].data() + (m * edges + e) * gnn::kMsgOut;
                    const double* h1v = cache.h1[s].data() + (m * edges + e) * gnn::kMsgHidden;

                    for (std::size_t o = 0; o < gnn::kMsgOut; ++o) {
                        da2[o] = h2v[o] > 0.0 ? dh2[o] : 0.0;
                        gb2[o] += da2[o];
                    }
                    for (std::size_t h = 0; h < gnn::kMsgHidden; ++h) {
                        const double h1h = h1v[h];
                        const double* w2row = w2 + h * gnn::kMsgOut;
                        double* gw2row = gw2 + h * gnn::kMsgOut;
                        double acc = 0.0;
                        for (std::size_t o = 0; o < gnn::kMsgOut; ++o) {
                            gw2row[o] += h1h * da2[o];
                            acc += w2row[o] * da2[o];
                        }
                        da1[h] = h1h > 0.0 ? acc : 0.0;
                    }
                    const double e0 = block(i, j);
                    const double e1 = block(j, i);
                    double acc_x = 0.0;
                    for (std::size_t h = 0; h < gnn::kMsgHidden; ++h) {
                        gb1[h] += da1[h];
                        gw1[0 * gnn::kMsgHidden + h] += xi * da1[h];
                        gw1[1 * gnn::kMsgHidden + h] += vi * da1[h];
                        gw1[2 * gnn::kMsgHidden + h] += e0 * da1[h];
                        gw1[3 * gnn::kMsgHidden + h] += e1 * da1[h];
                        acc_x += w1[0 * gnn::kMsgHidden + h] * da1[h];
                    }
                    dx_prev(i, m) += acc_x;
                }
            }
        }
        std::swap(dx, dx_prev);
    }
    return grad;
}

// --- checkpoint serialization -----------------------------------------------

namespace gnn {

inline nlohmann::json layer_to_json(const GnnModel& model, std::size_t offset, std::size_t in,
                                    std::size_t out, std::size_t bias_offset) {
    nlohmann::json w = nlohmann::json::array();
    for (std::size_t h = 0; h < out; ++h) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t k = 0; k < in; ++k) {
            row.push_back(model.params[offset + k * out + h]);
        }
        w.push_back(std::move(row));
    }
    nlohmann::json b = nlohmann::json::array();
    for (std::size_t h = 0; h < out; ++h) b.push_back(model.params[bias_offset + h]);
    return {{"in", in}, {"out", out}, {"w", std::move(w)}, {"b", std::move(b)}};
}

inline void layer_from_json(GnnModel& model, const nlohmann::json& layer, const std::string& name,
                            std::size_t offset, std::size_t in, std::size_t out,
                            std::size_t bias_offset) {
    if (!layer.is_object() || !layer.contains("w") || !layer.contains("b")) {
        throw format_error("model layer " + name + ": missing weights");
    }
    const auto& w = layer["w"];
    const auto& b = layer["b"];
    if (!w.is_array() || w.size() != out) {
        throw format_error("model layer " + name + ": expected " + std::to_string(out) + " rows");
    }
    for (std::size_t h = 0; h < out; ++h) {
        const auto& row = w[h];
        if (!row.is_array() || row.size() != in) {
            throw format_error("model layer " + name + ": expected rows of length " +
                               std::to_string(in));
        }
        for (std::size_t k = 0; k < in; ++k) {
            const double value = row[k].get<double>();
            if (!std::isfinite(value)) {
                throw format_error("model layer " + name + ": non-finite weight");
            }
            model.params[offset + k * out + h] = value;
        }
    }
    if (!b.is_array() || b.size() != out) {
        throw format_error("model layer " + name + ": expected " + std::to_string(out) +
                           " biases");
    }
    for (std::size_t h = 0; h < out; ++h) {
        const double value = b[h].get<double>();
        if (!std::isfinite(value)) throw format_error("model layer " + name + ": non-finite bias");
        model.params[bias_offset + h] = value;
    }
}

}  // namespace gnn

inline nlohmann::json model_to_json(const GnnModel& model) {
    model.validate();
    nlohmann::json doc;
    doc["format"] = "mcra-gnn";
    doc["version"] = 1;
    doc["rounds"] = model.rounds;
    doc["aggregation"] = to_string(model.aggregation);
    doc["features"] = to_string(model.feature_transform);
    doc["output_policy"] = to_string(model.output_policy);
    doc["p_max"] = model.p_max;
    doc["norm"] = {{"mean", model.norm.mean}, {"std", model.norm.std_dev}};
    doc["phi1"] = {gnn::layer_to_json(model, gnn::kW1, gnn::kMsgIn, gnn::kMsgHidden, gnn::kB1),
                   gnn::layer_to_json(model, gnn::kW2, gnn::kMsgHidden, gnn::kMsgOut, gnn::kB2)};
    doc["alpha"] = {gnn::layer_to_json(model, gnn::kW3, gnn::kUpdIn, gnn::kUpdHidden1, gnn::kB3),
                    gnn::layer_to_json(model, gnn::kW4, gnn::kUpdHidden1, gnn::kUpdHidden2,
                                       gnn::kB4),
                    gnn::layer_to_json(model, gnn::kW5, gnn::kUpdHidden2, 1, gnn::kB5)};
    doc["meta"] = model.metadata.is_null() ? nlohmann::json::object() : model.metadata;
    return doc;
}

inline GnnModel model_from_json(const nlohmann::json& doc, const std::string& origin = "<memory>") {
    if (!doc.is_object() || doc.value("format", "") != "mcra-gnn") {
        throw format_error("model " + origin + ": not an mcra-gnn checkpoint");
    }
    GnnModel model;
    model.params.assign(gnn::kParamCount, 0.0);
    try {
        model.rounds = doc.at("rounds").get<std::size_t>();
        model.p_max = doc.at("p_max").get<double>();
        const std::string agg = doc.at("aggregation").get<std::string>();
        if (agg == "max") {
            model.aggregation = Aggregation::max;
        } else if (agg == "sum") {
            model.aggregation = Aggregation::sum;
        } else if (agg == "mean") {
            model.aggregation = Aggregation::mean;
        } else {
            throw format_error("model " + origin + ": unknown aggregation '" + agg + "'");
        }
        const std::string feat = doc.at("features").get<std::string>();
        if (feat == "log_standard") {
            model.feature_transform = FeatureTransform::log_standard;
        } else if (feat == "raw") {
            model.feature_transform = FeatureTransform::raw;
        } else {
            throw format_error("model " + origin + ": unknown feature transform '" + feat + "'");
        }
        const std::string policy = doc.at("output_policy").get<std::string>();
        if (policy == "joint") {
            model.output_policy = OutputPolicy::joint;
        } else if (policy == "icp") {
            model.output_policy = OutputPolicy::icp;
        } else {
            throw format_error("model " + origin + ": unknown output policy '" + policy + "'");
        }
        if (!doc.contains("norm") || !doc["norm"].is_object()) {
            throw format_error("model " + origin + ": missing normalization stats");
        }
        model.norm.mean = doc["norm"].at("mean").get<double>();
        model.norm.std_dev = doc["norm"].at("std").get<double>();

        const auto& phi1 = doc.at("phi1");
        const auto& alpha = doc.at("alpha");
        if (!phi1.is_array() || phi1.size() != 2 || !alpha.is_array() || alpha.size() != 3) {
            throw format_error("model " + origin + ": wrong layer counts");
        }
        gnn::layer_from_json(model, phi1[0], "phi1[0]", gnn::kW1, gnn::kMsgIn, gnn::kMsgHidden,
                             gnn::kB1);
        gnn::layer_from_json(model, phi1[1], "phi1[1]", gnn::kW2, gnn::kMsgHidden, gnn::kMsgOut,
                             gnn::kB2);
        gnn::layer_from_json(model, alpha[0], "alpha[0]", gnn::kW3, gnn::kUpdIn, gnn::kUpdHidden1,
                             gnn::kB3);
        gnn::layer_from_json(model, alpha[1], "alpha[1]", gnn::kW4, gnn::kUpdHidden1,
                             gnn::kUpdHidden2, gnn::kB4);
        gnn::layer_from_json(model, alpha[2], "alpha[2]", gnn::kW5, gnn::kUpdHidden2, 1, gnn::kB5);
    } catch (const nlohmann::json::exception& e) {
        throw format_error("model " + origin + ": " + e.what());
    }
    if (doc.contains("meta")) model.metadata = doc["meta"];
    try {
        model.validate();
    } catch (const contract_error& e) {
        throw format_error("model " + origin + ": " + e.what());
    }
    return model;
}

inline void save_model(const GnnModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("save_model: cannot open " + path);
    out << model_to_json(model).dump(2) << '\n';
    if (!out) throw io_error("save_model: write failed for " + path);
}

inline GnnModel load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("load_model: cannot open " + path);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw format_error("model " + path + ": parse error: " + e.what());
    }
    return model_from_json(doc, path);
}

}  // namespace mcra
