#include <gtest/gtest.h>

#include <random>
#include <type_traits>

#include "adabet/selection.hpp"
#include "test_support.hpp"

using namespace adabet;

namespace {

std::vector<LayerMeta> plain_metas(std::size_t n, std::size_t act = 8) {
    std::vector<LayerMeta> metas(n);
    for (std::size_t i = 0; i < n; ++i) {
        metas[i].index = i;
        metas[i].name = "fc" + std::to_string(i);
        metas[i].param_count = 100;
        metas[i].act_elems_per_sample = act;
    }
    return metas;
}

LayerScore make_score(std::size_t layer, std::size_t raw, std::size_t act) {
    return {layer, std::nullopt, raw, act, normalized_betti(raw, act)};
}

ActivationPool pool_from(const homology::PointCloud& cloud, std::size_t layer) {
    ActivationPool p;
    p.layer_index = layer;
    p.rows = cloud.size();
    p.cols = cloud.dim();
    p.data.assign(cloud.data().begin(), cloud.data().end());
    return p;
}

}  // namespace

// Selection never sees labels or gradients.
static_assert(std::is_same_v<decltype(&score_layer), LayerScore (*)(const ActivationPool&, const LayerMeta&,
                                                                   const SelectionConfig&)>);
static_assert(std::is_same_v<decltype(&rank_and_select),
                             SelectionManifest (*)(std::span<const LayerScore>, std::span<const LayerMeta>,
                                                   const SelectionConfig&)>);

TEST(NormalizedBetti, Arithmetic) {
    EXPECT_EQ(normalized_betti(4, 8), 0.5);
    EXPECT_EQ(normalized_betti(0, 3), 0.0);
}

TEST(ScoreLayer, PlantedCircle) {
    const auto cloud = adabet::testing::circle(40, 2.0, 1.0, -3.0);
    EXPECT_EQ(homology::betti_at_threshold(homology::pairwise_distances(cloud), 2.0).b1, 1u);
    auto metas = plain_metas(1, 2);
    const auto s = score_layer(pool_from(cloud, 0), metas[0], SelectionConfig{});
    EXPECT_EQ(s.raw_b1, 1u);
    EXPECT_EQ(s.normalized, 0.5);
}

TEST(ScoreLayer, IdenticalRows) {
    const homology::PointCloud cloud(6, 3, std::vector<double>(18, 0.25));
    const auto s = score_layer(pool_from(cloud, 0), plain_metas(1, 3)[0], SelectionConfig{});
    EXPECT_EQ(s.raw_b1, 0u);
    EXPECT_EQ(s.normalized, 0.0);
}

TEST(ScoreLayer, Preconditions) {
    const auto cloud = adabet::testing::unit_square();
    auto metas = plain_metas(2, 2);
    EXPECT_THROW(score_layer(pool_from(cloud, 1), metas[0], SelectionConfig{}), DataError);
    metas[0].trainable = false;
    EXPECT_THROW(score_layer(pool_from(cloud, 0), metas[0], SelectionConfig{}), DataError);
}

TEST(ScoreLayer, EngineErrorsCarryLayerContext) {
    std::mt19937_64 rng(1);
    const auto cloud = adabet::testing::random_cloud(rng, 600, 2);
    auto metas = plain_metas(4, 2);
    try {
        score_layer(pool_from(cloud, 3), metas[3], SelectionConfig{});
        FAIL();
    } catch (const DataError& e) {
        EXPECT_EQ(std::string(e.what()).rfind("layer 3:", 0), 0u) << e.what();
    }
}

TEST(ScoreLayer, InvariantUnderIsometryAndScale) {
    std::mt19937_64 rng(8);
    SelectionConfig cfg;
    cfg.tau = 0.1;
    for (int trial = 0; trial < 10; ++trial) {
        const auto cloud = adabet::testing::random_cloud(rng, 30, 3);
        const auto meta = plain_metas(1, 3)[0];
        const auto base = score_layer(pool_from(cloud, 0), meta, cfg);
        std::vector<std::size_t> order(30);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        const auto moved = adabet::testing::transform(adabet::testing::permute_rows(cloud, order),
                                                      adabet::testing::random_rotation(rng, 3), {1.0, -2.0, 7.5}, 3.0);
        EXPECT_EQ(score_layer(pool_from(moved, 0), meta, cfg).raw_b1, base.raw_b1);
    }
}

TEST(Budget, CeilWithZeroSpecialCase) {
    EXPECT_EQ(selection_budget(0.0, 10), 0u);
    EXPECT_EQ(selection_budget(0.3, 10), 3u);
    EXPECT_EQ(selection_budget(0.7, 10), 7u);
    EXPECT_EQ(selection_budget(0.1 * 7, 10), 7u);
    EXPECT_EQ(selection_budget(0.01, 10), 1u);
    EXPECT_EQ(selection_budget(1.0 / 3.0, 6), 2u);
    EXPECT_EQ(selection_budget(1.0, 10), 10u);
}

TEST(RankAndSelect, ThirtyPercentOfTen) {
    const auto metas = plain_metas(10);
    std::vector<LayerScore> scores;
    for (std::size_t i = 0; i < 10; ++i) scores.push_back(make_score(i, i % 4, 8));
    SelectionConfig cfg;
    cfg.rho = 0.3;
    const auto m = rank_and_select(scores, metas, cfg);
    EXPECT_EQ(m.selected, (std::vector<std::size_t>{2, 3, 7}));
    ASSERT_EQ(m.scores.size(), 10u);
    EXPECT_EQ(m.scores[0].layer, 3u);
}

TEST(RankAndSelect, RhoOneAndZero) {
    const auto metas = plain_metas(5);
    std::vector<LayerScore> scores;
    for (std::size_t i = 0; i < 5; ++i) scores.push_back(make_score(i, 1, 8));
    SelectionConfig cfg;
    cfg.rho = 1.0;
    EXPECT_EQ(rank_and_select(scores, metas, cfg).selected, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
    cfg.rho = 0.0;
    EXPECT_TRUE(rank_and_select(scores, metas, cfg).selected.empty());
}

TEST(RankAndSelect, TieBreaks) {
    const auto metas = plain_metas(3);
    const std::vector<LayerScore> scores{make_score(0, 1, 10), make_score(1, 4, 8), make_score(2, 4, 8)};
    SelectionConfig cfg;
    cfg.rho = 1.0 / 3.0;
    auto m = rank_and_select(scores, metas, cfg);
    EXPECT_EQ(m.selected, std::vector<std::size_t>{1});

    // Equal normalized scores: larger raw b1 wins before index.
    const std::vector<LayerScore> scaled{make_score(0, 1, 2), make_score(1, 4, 8)};
    cfg.rho = 0.5;
    EXPECT_EQ(rank_and_select(scaled, plain_metas(2), cfg).selected, std::vector<std::size_t>{1});
}

TEST(RankAndSelect, NonTrainableLayersExcluded) {
    auto metas = plain_metas(4);
    metas[1].trainable = false;
    std::vector<LayerScore> scores{make_score(0, 1, 8), make_score(2, 2, 8), make_score(3, 3, 8)};
    SelectionConfig cfg;
    cfg.rho = 1.0;
    EXPECT_EQ(rank_and_select(scores, metas, cfg).selected, (std::vector<std::size_t>{0, 2, 3}));
    scores.push_back(make_score(1, 9, 8));
    EXPECT_THROW(rank_and_select(scores, metas, cfg), DataError);
}

TEST(RankAndSelect, GroupsAreAtomic) {
    auto metas = plain_metas(6);
    for (std::size_t i = 1; i <= 4; ++i) metas[i].group_id = "blk0.attn";
    metas[4].group_output = true;
    const std::vector<LayerScore> scores{make_score(0, 1, 8), make_score(4, 5, 8), make_score(5, 2, 8)};
    SelectionConfig cfg;
    cfg.rho = 0.3;
    const auto m = rank_and_select(scores, metas, cfg);
    EXPECT_EQ(m.selected, (std::vector<std::size_t>{1, 2, 3, 4}));
    EXPECT_EQ(trainable_units(metas).size(), 3u);

    metas[4].group_output = false;
    EXPECT_THROW(rank_and_select(scores, metas, cfg), DataError);
}

TEST(RankAndSelect, Errors) {
    const auto metas = plain_metas(2);
    SelectionConfig cfg;
    EXPECT_THROW(rank_and_select(std::vector<LayerScore>{}, metas, cfg), DataError);
    EXPECT_THROW(rank_and_select(std::vector<LayerScore>{make_score(0, 1, 8)}, metas, cfg), DataError);
    cfg.rho = 1.5;
    EXPECT_THROW(rank_and_select(std::vector<LayerScore>{make_score(0, 1, 8), make_score(1, 1, 8)}, metas, cfg),
                 DataError);
}

TEST(RankAndSelect, MonotoneBudget) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t n = 3 + trial;
        const auto metas = plain_metas(n);
        std::vector<LayerScore> scores;
        for (std::size_t i = 0; i < n; ++i) scores.push_back(make_score(i, rng() % 5, 1 + rng() % 4));
        std::vector<std::size_t> prev;
        for (int r = 1; r <= 10; ++r) {
            SelectionConfig cfg;
            cfg.rho = 0.1 * r;
            const auto sel = rank_and_select(scores, metas, cfg).selected;
            EXPECT_TRUE(std::includes(sel.begin(), sel.end(), prev.begin(), prev.end()));
            prev = sel;
        }
        EXPECT_EQ(prev.size(), n);
    }
}

TEST(Manifest, CanonicalJsonRoundTrip) {
    auto metas = plain_metas(4);
    metas[2].group_id = "g";
    metas[2].group_output = true;
    const std::vector<LayerScore> scores{make_score(0, 3, 7), make_score(1, 1, 3), {2, "g", 2, 9, normalized_betti(2, 9)},
                                         make_score(3, 0, 8)};
    SelectionConfig cfg;
    cfg.rho = 0.5;
    auto m = rank_and_select(scores, metas, cfg);
    m.pools.push_back({0, 40, {{"layer0000_batch0000.npy", 8}}});
    const auto text = to_json(m);
    auto again = rank_and_select(scores, metas, cfg);
    again.pools = m.pools;
    EXPECT_EQ(to_json(again), text);
    const auto back = manifest_from_json(text);
    EXPECT_EQ(back, m);
    EXPECT_EQ(to_json(back), text);
    EXPECT_NE(text.find("\"normalized\":0.42857142857142855"), std::string::npos) << text;
    EXPECT_NE(text.find("\"group\":null"), std::string::npos);
}
