#include <gtest/gtest.h>

#include <cmath>

#include "fedmid/attacks/attacks.hpp"
#include "fedmid/nn/architectures.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace fedmid;
using namespace fedmid::attacks;

namespace {

data::Dataset images(std::size_t n, std::size_t classes, std::size_t side = 16) {
    data::Dataset ds{{1, side, side}, classes, {}, {}};
    std::vector<float> x(side * side);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < x.size(); ++k) x[k] = 0.5f + 0.001f * static_cast<float>(i + k);
        ds.push_back(x, static_cast<std::int32_t>(i % classes));
    }
    return ds;
}

}  // namespace

TEST(Scenario, ParseRoundTripAndFlags) {
    for (const auto* s : {"none", "1U", "1T", "2U", "2T", "3U", "3T"}) EXPECT_EQ(to_string(parse_scenario(s)), s);
    EXPECT_THROW(parse_scenario("4T"), std::invalid_argument);
    EXPECT_TRUE(is_targeted(Scenario::T3));
    EXPECT_TRUE(is_omniscient(Scenario::U2));
    EXPECT_TRUE(is_adaptive(Scenario::U3));
    EXPECT_FALSE(is_targeted(Scenario::U1));
}

TEST(PoisonUntargeted, FullFlipChangesEveryLabel) {
    const auto clean = images(100, 4);
    auto rng = make_rng(1, Stream::Poison);
    const auto p = poison_untargeted(clean, 1.0, rng);
    for (std::size_t i = 0; i < clean.size(); ++i) EXPECT_NE(p.labels[i], clean.labels[i]);
    EXPECT_EQ(p.inputs, clean.inputs);
}

TEST(PoisonUntargeted, TinyRatioFlipsExactlyOne) {
    const auto clean = images(100, 4);
    auto rng = make_rng(1, Stream::Poison);
    const auto p = poison_untargeted(clean, 1e-6, rng);
    std::size_t changed = 0;
    for (std::size_t i = 0; i < clean.size(); ++i) changed += p.labels[i] != clean.labels[i];
    EXPECT_EQ(changed, 1u);
}

TEST(PoisonUntargeted, FlippedLabelsUniformOverAlternatives) {
    data::Dataset clean{{1}, 10, {}, {}};
    const float x = 0.f;
    for (std::size_t i = 0; i < 12500; ++i) clean.push_back(std::span<const float>(&x, 1), static_cast<std::int32_t>(i % 10));
    auto rng = make_rng(0, Stream::Poison);
    std::vector<std::size_t> touched;
    const auto p = poison_untargeted(clean, 0.8, rng, &touched);
    ASSERT_EQ(touched.size(), 10000u);
    // χ² per original class over its 9 alternatives, 80 degrees of freedom.
    std::vector<double> cell(100, 0.0);
    for (const auto i : touched) cell[static_cast<std::size_t>(clean.labels[i] * 10 + p.labels[i])] += 1.0;
    double chi2 = 0.0;
    for (int a = 0; a < 10; ++a) {
        double row = 0.0;
        for (int b = 0; b < 10; ++b) row += cell[static_cast<std::size_t>(a * 10 + b)];
        for (int b = 0; b < 10; ++b) {
            if (a == b) {
                EXPECT_EQ(cell[static_cast<std::size_t>(a * 10 + b)], 0.0);
                continue;
            }
            const double expected = row / 9.0;
            chi2 += std::pow(cell[static_cast<std::size_t>(a * 10 + b)] - expected, 2) / expected;
        }
    }
    EXPECT_LT(chi2, 124.0);  // ≈ 0.999 quantile of χ²(80)
}

TEST(PoisonUntargeted, RejectsSingleClassAndBadRatio) {
    data::Dataset one{{1}, 1, {}, {}};
    const float x = 0.f;
    one.push_back(std::span<const float>(&x, 1), 0);
    auto rng = make_rng(1, Stream::Poison);
    EXPECT_THROW(poison_untargeted(one, 0.5, rng), std::invalid_argument);
    EXPECT_THROW(poison_untargeted(images(10, 2), 0.0, rng), std::invalid_argument);
}

TEST(PoisonTargeted, SingleSampleGetsPatchAndTarget) {
    const auto clean = images(10, 4);
    const auto trig = TriggerPatch::checkerboard(5, 2);
    auto rng = make_rng(3, Stream::Poison);
    std::vector<std::size_t> touched;
    const auto p = poison_targeted(clean, 0.1, trig, rng, &touched);
    ASSERT_EQ(touched.size(), 1u);
    const std::size_t s = touched[0];
    EXPECT_EQ(p.labels[s], 2);
    for (std::size_t r = 0; r < 16; ++r) {
        for (std::size_t c = 0; c < 16; ++c) {
            const float got = p.sample(s)[r * 16 + c];
            if (r >= 11 && c >= 11) {
                const float want = ((r - 11 + c - 11) % 2 == 0) ? 1.f : 0.f;
                EXPECT_EQ(got, want) << r << "," << c;
            } else {
                EXPECT_EQ(got, clean.sample(s)[r * 16 + c]);
            }
        }
    }
    for (std::size_t i = 0; i < clean.size(); ++i) {
        if (i == s) continue;
        EXPECT_EQ(p.labels[i], clean.labels[i]);
        EXPECT_TRUE(std::equal(p.sample(i).begin(), p.sample(i).end(), clean.sample(i).begin()));
    }
}

TEST(PoisonTargeted, HalfOfHundredStamped) {
    const auto clean = images(100, 4);
    auto rng = make_rng(4, Stream::Poison);
    std::vector<std::size_t> touched;
    poison_targeted(clean, 0.5, TriggerPatch::checkerboard(4, 0), rng, &touched);
    EXPECT_EQ(touched.size(), 50u);
}

TEST(PoisonTargeted, RejectsOversizedPatchAndZeroRatio) {
    auto rng = make_rng(4, Stream::Poison);
    EXPECT_THROW(poison_targeted(images(10, 4, 4), 0.5, TriggerPatch::checkerboard(5, 0), rng), std::invalid_argument);
    EXPECT_THROW(poison_targeted(images(10, 4), 0.0, TriggerPatch::checkerboard(4, 0), rng), std::invalid_argument);
    EXPECT_THROW(poison_targeted(images(10, 4), 0.5, TriggerPatch::checkerboard(4, 9), rng), std::invalid_argument);
}

TEST(Lie, ArithmeticAndZeroScale) {
    auto layout = fixture::flat_layout(2);
    const Update mean(layout, std::vector<float>{1.f, 1.f});
    const Update sd(layout, std::vector<float>{2.f, 0.f});
    EXPECT_EQ(lie_calibrate(mean, sd, 1.5), Update(layout, std::vector<float>{4.f, 1.f}));
    EXPECT_EQ(lie_calibrate(mean, sd, 0.0), mean);
    EXPECT_EQ(lie_calibrate(mean, sd, -1.5), Update(layout, std::vector<float>{-2.f, 1.f}));
}

TEST(Lie, MatchesCoordinateOracleAndIsLinear) {
    auto rng = make_rng(8, Stream::Poison);
    const auto pts = fixture::random_points(7, 12, rng);
    const auto ups = fixture::to_updates(pts);
    const auto stats = benign_statistics(ups);
    for (std::size_t j = 0; j < 12; ++j) {
        double m = 0.0, v = 0.0;
        for (const auto& p : pts) m += p[j];
        m /= 7.0;
        for (const auto& p : pts) v += (p[j] - m) * (p[j] - m);
        const double sd = std::sqrt(v / 6.0);
        EXPECT_NEAR(stats.mean[j], m, 1e-5);
        EXPECT_NEAR(stats.std[j], sd, 1e-5);
        EXPECT_NEAR(lie_calibrate(stats.mean, stats.std, 1.5)[j], m + 1.5 * sd, 1e-5);
    }
    const auto a = lie_calibrate(stats.mean, stats.std, 0.7), b = lie_calibrate(stats.mean, stats.std, 1.1);
    const auto c = lie_calibrate(stats.mean, stats.std, 1.8), zero = lie_calibrate(stats.mean, stats.std, 0.0);
    for (std::size_t j = 0; j < 12; ++j) EXPECT_NEAR(a[j] + b[j] - zero[j], c[j], 1e-5);
}

TEST(Lie, ClipBoundsPoisonedUpdate) {
    auto layout = fixture::flat_layout(3);
    const Update mean(layout, std::vector<float>{0.f, 0.f, 1.f});
    const Update sd(layout, std::vector<float>{1.f, 1.f, 0.f});
    const Update poisoned(layout, std::vector<float>{5.f, -0.5f, 3.f});
    EXPECT_EQ(lie_clip(poisoned, mean, sd, 1.5), Update(layout, std::vector<float>{1.5f, -0.5f, 1.f}));
}

class RegularizerTest : public ::testing::Test {
protected:
    void SetUp() override {
        auto rng = make_rng(5, Stream::Init);
        global = nn::mlp({6}, 3, 5, true).build<double>(rng);
        auto prng = make_rng(5, Stream::AdaptiveProbe);
        probe = fixture::normal_tensor<double>({8, 6}, prng);
    }
    nn::Model<double> global;
    Tensor<double> probe;
};

TEST_F(RegularizerTest, ZeroForIdenticalModels) {
    EXPECT_EQ(adaptive_regularizer(probe, global, global), 0.0);
}

TEST_F(RegularizerTest, ShrinksWithPerturbationOnLastLayer) {
    const std::size_t last = global.arch().layers.size() - 1;
    const auto& w = global.layout()->find(last, "weight");
    const std::vector<std::size_t> logits_only{global.arch().taps.back()};
    double prev = std::numeric_limits<double>::infinity();
    for (const double eps : {1e-1, 1e-2, 1e-3}) {
        auto local = global;
        for (std::size_t i = 0; i < w.size(); ++i) local.params()[w.offset + i] += eps;
        const double v = adaptive_regularizer(probe, global, local, logits_only);
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, prev);
        prev = v;
    }
}

TEST_F(RegularizerTest, SymmetricInItsModels) {
    auto rng = make_rng(6, Stream::Init);
    const auto other = nn::mlp({6}, 3, 5, true).build<double>(rng);
    EXPECT_NEAR(adaptive_regularizer(probe, global, other), adaptive_regularizer(probe, other, global), 1e-12);
}

TEST_F(RegularizerTest, GradientMatchesFiniteDifferences) {
    auto rng = make_rng(7, Stream::Init);
    auto local = nn::mlp({6}, 3, 5, true).build<double>(rng);
    const AdaptiveRegularizer<double> reg(global, probe);
    std::vector<double> grad(local.params().size(), 0.0);
    reg.accumulate_gradient(local, grad);
    const double err = oracle::max_gradient_error(local, [&](const nn::Model<double>& m) { return reg.value(m); }, grad);
    EXPECT_LT(err, 1e-4);
}

TEST_F(RegularizerTest, RejectsMismatchedArchitectureAndUnknownTap) {
    auto rng = make_rng(7, Stream::Init);
    const auto other = nn::mlp({6}, 3, 7, true).build<double>(rng);
    EXPECT_THROW(adaptive_regularizer(probe, global, other), std::invalid_argument);
    EXPECT_THROW(AdaptiveRegularizer<double>(global, probe, {1}), std::invalid_argument);
}

TEST(Probe, StandardNormalMoments) {
    auto rng = make_rng(1, Stream::Probe);
    const auto p = standard_normal_probe({1, 16, 16}, 200, rng);
    ASSERT_EQ(p.shape, (Shape{200, 1, 16, 16}));
    double m = 0.0, v = 0.0;
    for (const auto x : p.data) m += x;
    m /= static_cast<double>(p.numel());
    for (const auto x : p.data) v += (x - m) * (x - m);
    v /= static_cast<double>(p.numel());
    EXPECT_NEAR(m, 0.0, 0.01);
    EXPECT_NEAR(v, 1.0, 0.02);
}
