#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedmid/defenses/registry.hpp"
#include "fedmid/nn/architectures.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace fedmid;
using namespace fedmid::defenses;
using fixture::to_updates;
using fixture::to_vec;

namespace {

using Pts = std::vector<std::vector<double>>;

void expect_vec_near(const std::vector<double>& got, const std::vector<double>& want, double tol) {
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], tol) << "coordinate " << i;
}

}  // namespace

TEST(Median, Examples) {
    expect_vec_near(to_vec(coordinate_median<float>(to_updates({{1, 2}, {3, 0}, {5, 4}}))), {3, 2}, 0);
    expect_vec_near(to_vec(coordinate_median<float>(to_updates({{7, -1}}))), {7, -1}, 0);
    expect_vec_near(to_vec(coordinate_median<float>(to_updates({{0, 0}, {2, 2}}))), {1, 1}, 0);
}

TEST(Median, RejectsLayoutMismatch) {
    auto a = to_updates({{1, 2}});
    auto b = to_updates({{1, 2, 3}});
    std::vector<fl::Update> mixed{a[0], b[0]};
    EXPECT_THROW(coordinate_median<float>(mixed), std::invalid_argument);
}

TEST(TrimmedMean, Examples) {
    expect_vec_near(to_vec(trimmed_mean<float>(to_updates({{1}, {2}, {3}, {4}, {100}}), 1)), {3}, 1e-6);
    expect_vec_near(to_vec(trimmed_mean<float>(to_updates({{1}, {2}, {6}}), 0)), {3}, 1e-6);
    for (std::size_t k = 0; k < 3; ++k) {
        expect_vec_near(to_vec(trimmed_mean<float>(to_updates({{2.5}, {2.5}, {2.5}, {2.5}, {2.5}}), k)), {2.5}, 0);
    }
    EXPECT_THROW(trimmed_mean<float>(to_updates({{1}, {2}, {3}, {4}}), 2), std::invalid_argument);
}

TEST(MultiKrum, OutlierExcludedAndSingleWinnerMatchesOracle) {
    const Pts pts{{1, 1}, {1.1, 0.9}, {0.9, 1.0}, {1.0, 1.1}, {50, -40}};
    const auto sel = multi_krum<float>(to_updates(pts), 1);
    EXPECT_EQ(std::count(sel.selected.begin(), sel.selected.end(), 4u), 0);
    const auto oracle = oracle::krum_scores_oracle(pts, 2);
    const auto best = static_cast<std::size_t>(std::min_element(oracle.begin(), oracle.end()) - oracle.begin());
    const auto one = multi_krum<float>(to_updates(pts), 1, 1);
    ASSERT_EQ(one.selected.size(), 1u);
    EXPECT_EQ(one.selected[0], best);
    const auto same = multi_krum<float>(to_updates({{3, 4}, {3, 4}, {3, 4}}), 0, 2);
    expect_vec_near(to_vec(same.delta), {3, 4}, 0);
    EXPECT_THROW(multi_krum<float>(to_updates({{1}}), 0), std::invalid_argument);
}

TEST(MultiKrum, NeighbourCountIsClipped) {
    EXPECT_EQ(krum_neighbours(10, 2), 6u);
    EXPECT_EQ(krum_neighbours(4, 2), 1u);
    EXPECT_EQ(krum_neighbours(2, 0), 1u);
}

TEST(Rfa, SymmetricPointsAndSinglePoint) {
    const auto gm = geometric_median<float>(to_updates({{1, 0}, {-1, 0}, {0, 1}, {0, -1}}));
    expect_vec_near(to_vec(gm.median), {0, 0}, 1e-5);
    expect_vec_near(to_vec(geometric_median<float>(to_updates({{2, 3}})).median), {2, 3}, 0);
}

TEST(Rfa, ObjectiveNonIncreasingAndNearGridMinimum) {
    for (std::uint64_t s = 0; s < 10; ++s) {
        auto rng = make_rng(s, Stream::Diagnostics);
        const auto pts = fixture::random_points(5, 3, rng);
        const auto gm = geometric_median<float>(to_updates(pts), 1e-6, 100, 1e-9);
        for (std::size_t i = 1; i < gm.objective.size(); ++i) EXPECT_LE(gm.objective[i], gm.objective[i - 1] + 1e-9);
        const double grid = oracle::sum_of_distances(pts, oracle::geometric_median_grid(pts));
        EXPECT_NEAR(oracle::sum_of_distances(pts, to_vec(gm.median)), grid, 1e-4);
    }
}

TEST(Dnc, RemovesColinearOutliers) {
    Pts pts;
    auto rng = make_rng(3, Stream::Dnc);
    std::normal_distribution<double> noise(0.0, 0.01);
    for (int i = 0; i < 8; ++i) pts.push_back({1 + noise(rng), 2 + noise(rng), 3 + noise(rng)});
    pts.push_back({11, 12, 13});
    pts.push_back({21, 22, 23});
    auto r = make_rng(1, Stream::Dnc);
    const auto sel = dnc<float>(to_updates(pts), {1, 1.0, 10000, 2}, r);
    EXPECT_EQ(sel.selected, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7}));
}

TEST(Dnc, ScoresMatchPowerIterationOracle) {
    auto rng = make_rng(5, Stream::Dnc);
    const auto pts = fixture::random_points(7, 5, rng);
    Eigen::MatrixXd x(7, 5);
    Pts centered = pts;
    for (std::size_t j = 0; j < 5; ++j) {
        double m = 0;
        for (const auto& p : pts) m += p[j];
        m /= 7;
        for (std::size_t i = 0; i < 7; ++i) {
            centered[i][j] -= m;
            x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = centered[i][j];
        }
    }
    const auto v = oracle::top_singular_direction(centered);
    const auto scores = spectral_scores(x);
    for (std::size_t i = 0; i < 7; ++i) {
        double proj = 0;
        for (std::size_t j = 0; j < 5; ++j) proj += centered[i][j] * v[j];
        EXPECT_NEAR(scores[i], proj * proj, 1e-6 * std::max(1.0, proj * proj));
    }
}

TEST(Dnc, IdenticalUpdatesAndErrors) {
    auto r = make_rng(1, Stream::Dnc);
    const auto sel = dnc<float>(to_updates({{1, 2}, {1, 2}, {1, 2}, {1, 2}}), {1, 1.0, 10000, 1}, r);
    expect_vec_near(to_vec(sel.delta), {1, 2}, 0);
    EXPECT_THROW(dnc<float>(to_updates({{1}, {2}}), {1, 1.0, 10, 2}, r), std::invalid_argument);
}

TEST(Bucketing, IdentityAndSingleBucketAndDeterminism) {
    auto rng0 = make_rng(1, Stream::Bucketing);
    const auto pts = fixture::random_points(4, 3, rng0);
    const auto ups = to_updates(pts);
    std::size_t buckets_seen = 0;
    std::function<fl::Update(Updates<float>)> counting = [&](Updates<float> u) {
        buckets_seen = u.size();
        return geometric_median<float>(u).median;
    };
    auto r1 = make_rng(2, Stream::Bucketing);
    EXPECT_EQ(bucketing<float>(ups, 1, r1, counting), geometric_median<float>(ups).median);
    auto r2 = make_rng(2, Stream::Bucketing);
    expect_vec_near(to_vec(bucketing<float>(ups, 4, r2, counting)), to_vec(mean_update<float>(ups)), 1e-6);
    auto r3 = make_rng(9, Stream::Bucketing), r4 = make_rng(9, Stream::Bucketing);
    const auto a = bucketing<float>(ups, 2, r3, counting);
    EXPECT_EQ(buckets_seen, 2u);
    EXPECT_EQ(a, bucketing<float>(ups, 2, r4, counting));
}

TEST(FoolsGold, OrthogonalHistoriesEqualAndSingleClient) {
    const auto w = foolsgold_weights({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
    EXPECT_EQ(w[0], w[1]);
    EXPECT_EQ(w[1], w[2]);
    EXPECT_GT(w[0], 0.0);
    EXPECT_EQ(foolsgold_weights({{3, 4}}), std::vector<double>{1.0});
}

TEST(FoolsGold, SybilsDownWeightedAfterFiveRounds) {
    auto agg = make_aggregator("foolsgold");
    auto layout = fixture::flat_layout(20);
    fl::Update phi(layout);
    auto rng = make_rng(4, Stream::Diagnostics);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<double> sybil(20);
    for (auto& v : sybil) v = nd(rng);
    fl::AggregationResult r;
    for (std::size_t round = 0; round < 5; ++round) {
        fl::RoundContext ctx;
        ctx.round = round;
        ctx.global = &phi;
        ctx.participants = {0, 1, 2, 3, 4};
        ctx.dataset_sizes.assign(5, 10);
        for (std::size_t c = 0; c < 5; ++c) {
            fl::Update u(layout);
            for (std::size_t i = 0; i < 20; ++i) u[i] = static_cast<float>(c < 2 ? sybil[i] : nd(rng));
            ctx.updates.push_back(std::move(u));
        }
        r = agg->aggregate(ctx);
    }
    const double attacker = std::max(r.weights[0], r.weights[1]);
    EXPECT_LT(attacker, std::min({r.weights[2], r.weights[3], r.weights[4]}));
}

TEST(ResidualBase, IdenticalAndOutlierAndWeightRange) {
    expect_vec_near(to_vec(residual_base<float>(to_updates({{1, 2}, {1, 2}, {1, 2}, {1, 2}}))), {1, 2}, 1e-6);
    Pts pts;
    auto rng = make_rng(6, Stream::Diagnostics);
    std::normal_distribution<double> nd(0.0, 0.1);
    for (int i = 0; i < 9; ++i) pts.push_back({static_cast<float>(1.0 + nd(rng))});
    pts.push_back({1e4});
    double lo = 1e9, hi = -1e9;
    for (int i = 0; i < 9; ++i) {
        lo = std::min(lo, pts[static_cast<std::size_t>(i)][0]);
        hi = std::max(hi, pts[static_cast<std::size_t>(i)][0]);
    }
    const double got = residual_base<float>(to_updates(pts))[0];
    EXPECT_GE(got, lo);
    EXPECT_LE(got, hi);
    EXPECT_NEAR(got, oracle::median_oracle(pts)[0], hi - lo);
    for (const double e : {0.0, 1.0, 2.0, 3.0, 40.0, 1e9, -5.0}) {
        const double w = residual_weight(e, {});
        EXPECT_GE(w, 0.0);
        EXPECT_LE(w, 1.0);
    }
    EXPECT_THROW(residual_base<float>(to_updates({{1}, {2}})), std::invalid_argument);
}

TEST(FlTrust, Examples) {
    auto layout = fixture::flat_layout(2);
    const fl::Update g0(layout, std::vector<float>{1.f, 0.f});
    expect_vec_near(to_vec(fltrust<float>(std::vector<fl::Update>{fl::Update(layout, std::vector<float>{1.f, 0.f})}, g0).delta), {1, 0}, 1e-6);
    const auto neg = fltrust<float>(std::vector<fl::Update>{fl::Update(layout, std::vector<float>{-1.f, 0.2f})}, g0);
    expect_vec_near(to_vec(neg.delta), {0, 0}, 0);
    // cos = 1 and cos = 0.5, unit norms: weights 2/3 and 1/3.
    const double s = std::sqrt(3.0) / 2.0;
    std::vector<fl::Update> two{fl::Update(layout, std::vector<float>{1.f, 0.f}),
                                fl::Update(layout, std::vector<float>{0.5f, static_cast<float>(s)})};
    const auto r = fltrust<float>(two, g0);
    expect_vec_near(to_vec(r.delta), {2.0 / 3.0 + 0.5 / 3.0, s / 3.0}, 1e-6);
    EXPECT_THROW(fltrust<float>(two, fl::Update(layout)), std::invalid_argument);
}

TEST(FedCpa, IdenticalClientsEqualAndDisjointClientLowest) {
    EXPECT_EQ(jaccard({1, 2, 3}, {1, 2, 3}), 1.0);
    EXPECT_EQ(jaccard({1, 2}, {3, 4}), 0.0);
    auto layout = fixture::flat_layout(10);
    const fl::Update phi(layout, 1.f);
    std::vector<fl::Update> same(3, fl::Update(layout, std::vector<float>{5, 1, 1, 1, 1, 1, 1, 1, 1, 0.1f}));
    const auto eq = fedcpa<float>(same, phi, {0.1});
    for (const auto s : eq.similarity) EXPECT_DOUBLE_EQ(s, 1.0);
    EXPECT_EQ(eq.weights, std::vector<double>(3, 1.0));

    std::vector<fl::Update> mixed;
    for (int c = 0; c < 4; ++c) {
        std::vector<float> v{9, 8, 7, 1, 1, 1, 1, 2, 3, 4};
        v[6] += 0.1f * static_cast<float>(c);
        mixed.emplace_back(layout, v);
    }
    mixed.emplace_back(layout, std::vector<float>{1, 1, 1, 1, 2, 3, 9, 8, 7, 4});
    const auto r = fedcpa<float>(mixed, phi, {0.2});
    // Brute-force top-2 sets: the odd client's {6, 7} is disjoint from {0, 1}.
    const auto lowest = static_cast<std::size_t>(std::min_element(r.weights.begin(), r.weights.end()) - r.weights.begin());
    EXPECT_EQ(lowest, 4u);
    EXPECT_THROW(fedcpa<float>(mixed, phi, {0.6}), std::invalid_argument);
}

// Shared contract checks over every registered rule.
class RegistryTest : public ::testing::TestWithParam<std::string> {
protected:
    void SetUp() override {
        auto rng = make_rng(2, Stream::Init);
        model = nn::mlp({4}, 3, 6, false).build<float>(rng);
        global = model.flatten();
        auto urng = make_rng(3, Stream::LocalTrain);
        std::normal_distribution<double> nd(0.0, 0.1);
        for (std::size_t c = 0; c < 6; ++c) {
            fl::Update u(global.layout());
            for (std::size_t i = 0; i < u.size(); ++i) u[i] = static_cast<float>(nd(urng));
            updates.push_back(u);
        }
        server = fl::Update(global.layout());
        for (std::size_t i = 0; i < server.size(); ++i) server[i] = static_cast<float>(nd(urng));
    }

    fl::RoundContext context(const std::vector<std::size_t>& order) const {
        fl::RoundContext ctx;
        ctx.round = 1;
        ctx.global = &global;
        ctx.model = &model;
        ctx.seed = 5;
        for (const auto k : order) {
            ctx.participants.push_back(k);
            ctx.updates.push_back(updates[k]);
            ctx.dataset_sizes.push_back(10 + k);
        }
        ctx.server_update = server;
        return ctx;
    }

    fl::Model model;
    fl::Update global, server;
    std::vector<fl::Update> updates;
};

TEST_P(RegistryTest, LayoutFiniteAndNonNegative) {
    AggregatorParams p;
    p.fedmid.probe_samples = 16;
    p.fedcpa.k_frac = 0.1;
    auto agg = make_aggregator(GetParam(), p);
    EXPECT_EQ(agg->name(), GetParam());
    auto ctx = context({0, 1, 2, 3, 4, 5});
    auto r = agg->aggregate(ctx);
    for (const auto w : r.weights) EXPECT_GE(w, 0.0);
    const auto next = fl::apply_aggregation(ctx, r);
    EXPECT_TRUE(same_layout(next.layout(), global.layout()));
    EXPECT_TRUE(next.all_finite());
}

TEST_P(RegistryTest, PermutationEquivariant) {
    // Rules with internal randomness over the input order are excluded.
    if (GetParam() == "bucket" || GetParam() == "dnc") GTEST_SKIP() << "order-dependent sampling";
    AggregatorParams p;
    p.fedmid.probe_samples = 16;
    p.fedcpa.k_frac = 0.1;
    const std::vector<std::size_t> fwd{0, 1, 2, 3, 4, 5}, perm{3, 5, 0, 4, 1, 2};
    auto a = make_aggregator(GetParam(), p), b = make_aggregator(GetParam(), p);
    auto ca = context(fwd), cb = context(perm);
    auto ra = a->aggregate(ca), rb = b->aggregate(cb);
    const auto na = fl::apply_aggregation(ca, ra), nb = fl::apply_aggregation(cb, rb);
    for (std::size_t i = 0; i < na.size(); ++i) EXPECT_NEAR(na[i], nb[i], 1e-5);
    if (!ra.weights.empty()) {
        for (std::size_t k = 0; k < perm.size(); ++k) EXPECT_NEAR(rb.weights[k], ra.weights[perm[k]], 1e-9);
    }
}

INSTANTIATE_TEST_SUITE_P(AllRules, RegistryTest, ::testing::ValuesIn(aggregator_names()),
                         [](const auto& info) { return info.param; });

TEST(Registry, UnknownNameListsRegisteredOnes) {
    try {
        make_aggregator("krum2");
        FAIL();
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        for (const auto& n : aggregator_names()) EXPECT_NE(msg.find(n), std::string::npos);
    }
}

TEST(Breakdown, RobustRulesStayNearBenignBox) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto rng = make_rng(seed, Stream::Diagnostics);
        const std::size_t n = 10, d = 8, bad = 2;
        auto pts = fixture::random_points(n - bad, d, rng);
        std::vector<double> lo(d, 1e9), hi(d, -1e9);
        double benign_norm = 0;
        for (const auto& p : pts) {
            double s = 0;
            for (std::size_t j = 0; j < d; ++j) {
                lo[j] = std::min(lo[j], p[j]);
                hi[j] = std::max(hi[j], p[j]);
                s += p[j] * p[j];
            }
            benign_norm = std::max(benign_norm, std::sqrt(s));
        }
        std::vector<double> outlier(d, 100.0 * benign_norm / std::sqrt(static_cast<double>(d)));
        for (std::size_t k = 0; k < bad; ++k) pts.push_back(outlier);
        const auto ups = to_updates(pts);
        auto dr = make_rng(seed, Stream::Dnc);
        const std::vector<std::vector<double>> outs{
            to_vec(coordinate_median<float>(ups)), to_vec(trimmed_mean<float>(ups, 2)),
            to_vec(multi_krum<float>(ups, 2).delta), to_vec(geometric_median<float>(ups).median),
            to_vec(dnc<float>(ups, {1, 1.0, 10000, 2}, dr).delta)};
        for (const auto& o : outs) {
            for (std::size_t j = 0; j < d; ++j) {
                const double c = 0.5 * (lo[j] + hi[j]), half = hi[j] - lo[j];
                EXPECT_LE(std::abs(o[j] - c), half + 1e-6);
            }
        }
    }
}
