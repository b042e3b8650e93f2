#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcra/channel.hpp"
#include "mcra/errors.hpp"
#include "mcra/gnn.hpp"
#include "mcra/rate.hpp"
#include "mcra/rng.hpp"

namespace {

mcra::ChannelInstance random_instance(std::size_t d, std::size_t m, mcra::Rng& rng) {
    mcra::ChannelInstance inst;
    for (std::size_t c = 0; c < m; ++c) {
        mcra::Mat block(d, d);
        for (auto& g : block.data) g = rng.uniform(0.01, 1.5);
        inst.gains.push_back(block);
    }
    return inst;
}

// Independent re-implementation of the forward pass driven purely by the
// logical [out][in] layer view exported to JSON, so it cannot share the
// library's flat parameter layout.
struct DenseLayer {
    std::vector<std::vector<double>> w;
    std::vector<double> b;
};

DenseLayer layer_from_json(const nlohmann::json& j) {
    DenseLayer layer;
    for (const auto& row : j.at("w")) layer.w.push_back(row.get<std::vector<double>>());
    layer.b = j.at("b").get<std::vector<double>>();
    return layer;
}

std::vector<double> dense(const DenseLayer& layer, const std::vector<double>& in, bool relu) {
    std::vector<double> out = layer.b;
    for (std::size_t h = 0; h < out.size(); ++h) {
        for (std::size_t k = 0; k < in.size(); ++k) out[h] += layer.w[h][k] * in[k];
        if (relu && out[h] < 0.0) out[h] = 0.0;
    }
    return out;
}

mcra::Mat oracle_forward(const mcra::GnnModel& model, const mcra::GraphFeatures& feat,
                         double scale) {
    const nlohmann::json doc = mcra::model_to_json(model);
    const DenseLayer l1 = layer_from_json(doc["phi1"][0]);
    const DenseLayer l2 = layer_from_json(doc["phi1"][1]);
    const DenseLayer l3 = layer_from_json(doc["alpha"][0]);
    const DenseLayer l4 = layer_from_json(doc["alpha"][1]);
    const DenseLayer l5 = layer_from_json(doc["alpha"][2]);

    const std::size_t d = feat.pairs;
    mcra::Mat x(d, feat.channels);
    for (std::size_t s = 0; s < model.rounds; ++s) {
        mcra::Mat x_next(d, feat.channels);
        for (std::size_t m = 0; m < feat.channels; ++m) {
            const mcra::Mat& block = feat.blocks[m];
            for (std::size_t i = 0; i < d; ++i) {
                std::vector<double> n(32, 0.0);
                bool first = true;
                for (std::size_t j = 0; j < d; ++j) {
                    if (j == i) continue;
                    const std::vector<double> in = {x(i, m), block(i, i), block(i, j),
                                                    block(j, i)};
                    const std::vector<double> msg = dense(l2, dense(l1, in, true), true);
                    if (first) {
                        n = msg;
                        first = false;
                    } else {
                        for (std::size_t o = 0; o < 32; ++o) {
                            if (msg[o] > n[o]) n[o] = msg[o];
                        }
                    }
                }
                std::vector<double> upd_in;
                upd_in.push_back(x(i, m));
                upd_in.insert(upd_in.end(), n.begin(), n.end());
                const std::vector<double> h3 = dense(l3, upd_in, true);
                const std::vector<double> h4 = dense(l4, h3, true);
                const std::vector<double> a5 = dense(l5, h4, false);
                x_next(i, m) = scale / (1.0 + std::exp(-a5[0]));
            }
        }
        x = x_next;
    }
    return x;
}

}  // namespace

TEST_CASE("zero weights put every output at half scale") {
    mcra::NetworkConfig config;
    config.pairs = 4;
    config.channels = 3;
    config.p_max = 2.0;
    mcra::Rng rng(1);
    const auto inst = random_instance(4, 3, rng);

    mcra::GnnModel model = mcra::init_model(9);
    std::fill(model.params.begin(), model.params.end(), 0.0);
    const auto feat = mcra::build_features(inst, config, model.norm, model.feature_transform);
    const auto fwd = mcra::gnn_forward(model, feat, config);
    for (double p : fwd.phat.data) {
        REQUIRE(p == Catch::Approx(0.5 * config.p_max).epsilon(1e-15));
    }

    mcra::GnnModel icp = model;
    icp.output_policy = mcra::OutputPolicy::icp;
    const auto icp_fwd = mcra::gnn_forward(icp, feat, config);
    for (double p : icp_fwd.phat.data) {
        REQUIRE(p == Catch::Approx(0.5 * config.p_max / 3.0).epsilon(1e-15));
    }
}

TEST_CASE("forward pass matches an independent layer-by-layer evaluation") {
    mcra::NetworkConfig config;
    config.pairs = 3;
    config.channels = 2;
    config.p_max = 1.0;
    mcra::Rng rng(42);
    const auto inst = random_instance(3, 2, rng);

    for (std::size_t rounds : {std::size_t{1}, std::size_t{2}, std::size_t{3}}) {
        mcra::GnnModel model = mcra::init_model(1234, rounds);
        const auto feat =
            mcra::build_features(inst, config, model.norm, model.feature_transform);
        const auto fwd = mcra::gnn_forward(model, feat, config);
        const mcra::Mat expected = oracle_forward(model, feat, config.p_max);
        REQUIRE(fwd.phat.same_shape(expected));
        for (std::size_t k = 0; k < expected.size(); ++k) {
            REQUIRE(fwd.phat.data[k] == Catch::Approx(expected.data[k]).epsilon(1e-12));
        }
    }
}

TEST_CASE("outputs live in the box [0, scale] and post-processing is feasible") {
    mcra::NetworkConfig config;
    config.pairs = 6;
    config.channels = 3;
    mcra::Rng rng(77);
    mcra::GnnModel model = mcra::init_model(5);
    for (int trial = 0; trial < 10; ++trial) {
        const auto inst = random_instance(6, 3, rng);
        const auto feat =
            mcra::build_features(inst, config, model.norm, model.feature_transform);
        const auto fwd = mcra::gnn_forward(model, feat, config);
        for (double p : fwd.phat.data) {
            REQUIRE(p >= 0.0);
            REQUIRE(p <= config.p_max);
        }
        const auto alloc = mcra::post_process(fwd.phat, config);
        REQUIRE(alloc.feasible(config.p_max));
    }
}

TEST_CASE("relabeling pairs permutes the output rows") {
    mcra::NetworkConfig config;
    config.pairs = 5;
    config.channels = 2;
    mcra::Rng rng(31);
    const auto inst = random_instance(5, 2, rng);
    mcra::GnnModel model = mcra::init_model(8);
    model.norm = {-0.4, 1.3};

    const std::vector<std::size_t> sigma = {3, 0, 4, 1, 2};  // new index -> old index
    mcra::ChannelInstance permuted;
    for (const auto& block : inst.gains) {
        mcra::Mat pb(5, 5);
        for (std::size_t a = 0; a < 5; ++a) {
            for (std::size_t b = 0; b < 5; ++b) pb(a, b) = block(sigma[a], sigma[b]);
        }
        permuted.gains.push_back(pb);
    }

    const auto feat = mcra::build_features(inst, config, model.norm, model.feature_transform);
    const auto feat_p =
        mcra::build_features(permuted, config, model.norm, model.feature_transform);
    const auto out = mcra::gnn_forward(model, feat, config);
    const auto out_p = mcra::gnn_forward(model, feat_p, config);
    for (std::size_t a = 0; a < 5; ++a) {
        for (std::size_t m = 0; m < 2; ++m) {
            REQUIRE(out_p.phat(a, m) == Catch::Approx(out.phat(sigma[a], m)).margin(1e-9));
        }
    }
}

TEST_CASE("relabeling channels permutes the output columns exactly") {
    mcra::NetworkConfig config;
    config.pairs = 4;
    config.channels = 3;
    mcra::Rng rng(13);
    const auto inst = random_instance(4, 3, rng);
    mcra::GnnModel model = mcra::init_model(21);

    const std::vector<std::size_t> sigma = {2, 0, 1};  // new channel -> old channel
    mcra::ChannelInstance permuted;
    for (std::size_t m = 0; m < 3; ++m) permuted.gains.push_back(inst.gains[sigma[m]]);

    const auto feat = mcra::build_features(inst, config, model.norm, model.feature_transform);
    const auto feat_p =
        mcra::build_features(permuted, config, model.norm, model.feature_transform);
    const auto out = mcra::gnn_forward(model, feat, config);
    const auto out_p = mcra::gnn_forward(model, feat_p, config);
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t m = 0; m < 3; ++m) {
            REQUIRE(out_p.phat(i, m) == out.phat(i, sigma[m]));
        }
    }
}

TEST_CASE("channels never mix: perturbing one block moves only its column") {
    mcra::NetworkConfig config;
    config.pairs = 4;
    config.channels = 2;
    mcra::Rng rng(3);
    const auto inst = random_instance(4, 2, rng);
    mcra::GnnModel model = mcra::init_model(15);

    mcra::ChannelInstance bumped = inst;
    for (auto& g : bumped.gains[1].data) g *= 1.7;

    const auto feat = mcra::build_features(inst, config, model.norm, model.feature_transform);
    const auto feat_b =
        mcra::build_features(bumped, config, model.norm, model.feature_transform);
    const auto out = mcra::gnn_forward(model, feat, config);
    const auto out_b = mcra::gnn_forward(model, feat_b, config);
    for (std::size_t i = 0; i < 4; ++i) {
        REQUIRE(out_b.phat(i, 0) == out.phat(i, 0));
        REQUIRE(out_b.phat(i, 1) != out.phat(i, 1));
    }
}

TEST_CASE("a single pair has no neighbors and still produces finite output") {
    mcra::NetworkConfig config;
    config.pairs = 1;
    config.channels = 2;
    mcra::ChannelInstance inst;
    inst.gains.push_back(mcra::Mat(1, 1, 0.4));
    inst.gains.push_back(mcra::Mat(1, 1, 0.9));
    for (auto agg : {mcra::Aggregation::max, mcra::Aggregation::sum, mcra::Aggregation::mean}) {
        mcra::GnnModel model = mcra::init_model(2, 3, agg);
        const auto feat =
            mcra::build_features(inst, config, model.norm, model.feature_transform);
        const auto out = mcra::gnn_forward(model, feat, config);
        for (double p : out.phat.data) {
            REQUIRE(std::isfinite(p));
            REQUIRE(p >= 0.0);
            REQUIRE(p <= config.p_max);
        }
    }
}

TEST_CASE("mean aggregation averages what sum accumulates") {
    mcra::NetworkConfig config;
    config.pairs = 4;
    config.channels = 1;
    mcra::Rng rng(19);
    const auto inst = random_instance(4, 1, rng);
    mcra::GnnModel sum_model = mcra::init_model(6, 1, mcra::Aggregation::sum);
    mcra::GnnModel mean_model = sum_model;
    mean_model.aggregation = mcra::Aggregation::mean;

    const auto feat =
        mcra::build_features(inst, config, sum_model.norm, sum_model.feature_transform);
    const auto out_sum = mcra::gnn_forward(sum_model, feat, config, true);
    const auto out_mean = mcra::gnn_forward(mean_model, feat, config, true);
    const auto& agg_sum = out_sum.cache.agg[0];
    const auto& agg_mean = out_mean.cache.agg[0];
    REQUIRE(agg_sum.size() == agg_mean.size());
    for (std::size_t k = 0; k < agg_sum.size(); ++k) {
        REQUIRE(agg_mean[k] == Catch::Approx(agg_sum[k] / 3.0).epsilon(1e-14));
    }
}

TEST_CASE("forward cache records the state trajectory") {
    mcra::NetworkConfig config;
    config.pairs = 3;
    config.channels = 2;
    mcra::Rng rng(55);
    const auto inst = random_instance(3, 2, rng);
    mcra::GnnModel model = mcra::init_model(11);
    const auto feat = mcra::build_features(inst, config, model.norm, model.feature_transform);
    const auto out = mcra::gnn_forward(model, feat, config, true);
    REQUIRE(out.cache.x.size() == model.rounds + 1);
    for (double v : out.cache.x[0].data) REQUIRE(v == 0.0);
    REQUIRE(out.cache.x[model.rounds].data == out.phat.data);
    // Final-round sigmoid outputs scale onto the returned powers.
    for (std::size_t m = 0; m < 2; ++m) {
        for (std::size_t i = 0; i < 3; ++i) {
            REQUIRE(out.phat(i, m) ==
                    Catch::Approx(out.cache.y[model.rounds - 1][m * 3 + i] * out.cache.scale)
                        .epsilon(1e-15));
        }
    }
}

TEST_CASE("gain transform matches its formula and raw mode is the identity") {
    mcra::NormStats stats{-1.0, 2.0};
    REQUIRE(mcra::transform_gain(0.1, stats, mcra::FeatureTransform::log_standard) ==
            Catch::Approx((std::log10(0.1 + 1e-12) + 1.0) / 2.0).epsilon(1e-12));
    REQUIRE(mcra::transform_gain(0.37, stats, mcra::FeatureTransform::raw) == 0.37);

    mcra::NetworkConfig config;
    config.pairs = 2;
    config.channels = 1;
    mcra::ChannelInstance inst;
    mcra::Mat g(2, 2);
    g(0, 0) = 0.5;
    g(0, 1) = 0.25;
    g(1, 0) = 0.125;
    g(1, 1) = 1.0;
    inst.gains.push_back(g);
    const auto feat = mcra::build_features(inst, config, stats, mcra::FeatureTransform::raw);
    REQUIRE(feat.node(0, 0) == 0.5);
    REQUIRE(feat.blocks[0](0, 1) == 0.25);
    REQUIRE(feat.blocks[0](1, 0) == 0.125);
}

TEST_CASE("normalization stats summarize log-gains and survive degenerate data") {
    mcra::ChannelInstance a;
    mcra::Mat ga(1, 1, 0.1);
    a.gains.push_back(ga);
    mcra::ChannelInstance b;
    mcra::Mat gb(1, 1, 0.001);
    b.gains.push_back(gb);
    const auto stats = mcra::compute_norm_stats({a, b});
    const double t1 = std::log10(0.1 + 1e-12);
    const double t2 = std::log10(0.001 + 1e-12);
    const double mean = 0.5 * (t1 + t2);
    const double sd = std::sqrt(0.5 * (t1 * t1 + t2 * t2) - mean * mean);
    REQUIRE(stats.mean == Catch::Approx(mean).epsilon(1e-12));
    REQUIRE(stats.std_dev == Catch::Approx(sd).epsilon(1e-9));

    const auto degenerate = mcra::compute_norm_stats({a, a});
    REQUIRE(degenerate.std_dev == 1.0);
    REQUIRE_THROWS_AS(mcra::compute_norm_stats({}), mcra::contract_error);
}

TEST_CASE("budget correction rescales only over-budget rows") {
    mcra::NetworkConfig config;
    config.pairs = 3;
    config.channels = 2;
    config.p_max = 1.0;
    mcra::Mat phat(3, 2);
    phat(0, 0) = 1.5;  // over budget
    phat(0, 1) = 0.5;
    phat(1, 0) = 0.1;  // under budget
    phat(1, 1) = 0.2;
    // row 2 all zero
    const auto alloc = mcra::post_process(phat, config);
    REQUIRE(alloc.power(0, 0) == Catch::Approx(0.75).epsilon(1e-15));
    REQUIRE(alloc.power(0, 1) == Catch::Approx(0.25).epsilon(1e-15));
    REQUIRE(alloc.power(1, 0) == 0.1);
    REQUIRE(alloc.power(1, 1) == 0.2);
    REQUIRE(alloc.power(2, 0) == 0.0);
    REQUIRE(alloc.power(2, 1) == 0.0);
    REQUIRE(alloc.feasible(config.p_max));
    REQUIRE(alloc.assigned(2, 0) == 0);
}

TEST_CASE("checkpoints round-trip exactly") {
    mcra::GnnModel model = mcra::init_model(123, 3, mcra::Aggregation::max,
                                            mcra::FeatureTransform::log_standard,
                                            mcra::OutputPolicy::icp);
    model.norm = {-2.25, 0.75};
    model.p_max = 1.5;
    model.metadata = {{"note", "fixture"}};
    const std::string path = "roundtrip_model.json";
    mcra::save_model(model, path);
    const mcra::GnnModel loaded = mcra::load_model(path);
    REQUIRE(loaded.params == model.params);
    REQUIRE(loaded.rounds == model.rounds);
    REQUIRE(loaded.aggregation == model.aggregation);
    REQUIRE(loaded.feature_transform == model.feature_transform);
    REQUIRE(loaded.output_policy == model.output_policy);
    REQUIRE(loaded.norm.mean == model.norm.mean);
    REQUIRE(loaded.norm.std_dev == model.norm.std_dev);
    REQUIRE(loaded.p_max == model.p_max);
    REQUIRE(loaded.metadata.at("note") == "fixture");

    mcra::NetworkConfig config;
    config.pairs = 3;
    config.channels = 2;
    mcra::Rng rng(4);
    const auto inst = random_instance(3, 2, rng);
    const auto feat = mcra::build_features(inst, config, model.norm, model.feature_transform);
    const auto before = mcra::gnn_forward(model, feat, config);
    const auto after = mcra::gnn_forward(loaded, feat, config);
    REQUIRE(before.phat.data == after.phat.data);
    std::remove(path.c_str());
}

TEST_CASE("malformed checkpoints name the offending layer") {
    const mcra::GnnModel model = mcra::init_model(99);
    nlohmann::json doc = mcra::model_to_json(model);

    nlohmann::json bad_row = doc;
    bad_row["phi1"][0]["w"][0].erase(3);
    REQUIRE_THROWS_WITH(mcra::model_from_json(bad_row),
                        Catch::Matchers::ContainsSubstring("phi1[0]"));

    nlohmann::json bad_value = doc;
    bad_value["alpha"][1]["w"][2][5] = "oops";
    REQUIRE_THROWS_AS(mcra::model_from_json(bad_value), mcra::format_error);

    nlohmann::json no_norm = doc;
    no_norm.erase("norm");
    REQUIRE_THROWS_WITH(mcra::model_from_json(no_norm),
                        Catch::Matchers::ContainsSubstring("norm"));

    nlohmann::json wrong_format = doc;
    wrong_format["format"] = "other";
    REQUIRE_THROWS_AS(mcra::model_from_json(wrong_format), mcra::format_error);

    nlohmann::json bad_std = doc;
    bad_std["norm"]["std"] = 0.0;
    REQUIRE_THROWS_AS(mcra::model_from_json(bad_std), mcra::format_error);
}

TEST_CASE("shape and cache contract violations are rejected") {
    mcra::NetworkConfig config;
    config.pairs = 3;
    config.channels = 2;
    mcra::Rng rng(6);
    const auto inst = random_instance(3, 2, rng);
    mcra::GnnModel model = mcra::init_model(1);
    const auto feat = mcra::build_features(inst, config, model.norm, model.feature_transform);

    mcra::NetworkConfig wrong = config;
    wrong.pairs = 4;
    REQUIRE_THROWS_AS(mcra::gnn_forward(model, feat, wrong), mcra::contract_error);

    const auto no_cache = mcra::gnn_forward(model, feat, config, false);
    mcra::Mat upstream(3, 2, 1.0);
    REQUIRE_THROWS_AS(mcra::gnn_backward(model, feat, no_cache.cache, upstream),
                      mcra::contract_error);

    const auto with_cache = mcra::gnn_forward(model, feat, config, true);
    mcra::Mat bad_upstream(2, 2, 1.0);
    REQUIRE_THROWS_AS(mcra::gnn_backward(model, feat, with_cache.cache, bad_upstream),
                      mcra::contract_error);
}
