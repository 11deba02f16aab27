#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fedmid/harness/diagnostics.hpp"
#include "fedmid/harness/experiment.hpp"

using namespace fedmid;
using namespace fedmid::harness;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("fedmid_harness_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    return p;
}

ExperimentConfig small_config() {
    ExperimentConfig c;
    c.clients = 4;
    c.rounds = 3;
    c.window = 2;
    c.train_samples = 400;
    c.test_samples = 80;
    c.probe_samples = 16;
    c.adaptive_probe_samples = 8;
    c.batch_size = 32;
    c.model_width = 4;
    c.participation = 1.0;
    c.attacker_ratio = 0.25;
    c.timing = TimingMode::Off;
    return c;
}

/// A dense-only model whose logits are its output bias: always predicts `cls`.
nn::Model<float> constant_model(const Shape& input, std::size_t classes, std::size_t cls) {
    nn::ModelBuilder b(input);
    if (input.size() != 1) b.flatten();
    b.dense(classes).tap();
    auto rng = make_rng(0, Stream::Init);
    auto m = b.build<float>(rng);
    const std::size_t last = m.arch().layers.size() - 1;
    for (auto& w : m.param(last, "weight")) w = 0.f;
    m.param(last, "bias")[cls] = 1.f;
    return m;
}

data::Dataset balanced(std::size_t per_class, std::size_t classes, std::size_t side = 8) {
    data::Dataset ds{{1, side, side}, classes, {}, {}};
    std::vector<float> x(side * side, 0.5f);
    for (std::size_t i = 0; i < per_class * classes; ++i) ds.push_back(x, static_cast<std::int32_t>(i % classes));
    return ds;
}

}  // namespace

TEST(Config, ParsesKeyValueTextWithComments) {
    const auto c = parse_config_text("# comment\nclients = 12\n\nbeta=0.25  # trailing\naggregator = median\nscenario = 1T\n");
    EXPECT_EQ(c.clients, 12u);
    EXPECT_DOUBLE_EQ(c.beta, 0.25);
    EXPECT_EQ(c.aggregator, "median");
    EXPECT_EQ(c.scenario, attacks::Scenario::T1);
}

TEST(Config, UnknownKeyIsNamed) {
    try {
        parse_config_text("clients = 4\nnot_a_key = 3\n");
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_EQ(e.key(), "not_a_key");
        EXPECT_NE(std::string(e.what()).find("not_a_key"), std::string::npos);
    }
}

TEST(Config, MalformedValueIsNamed) {
    try {
        parse_config_text("beta = lots\n");
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_EQ(e.key(), "beta");
    }
    EXPECT_THROW(parse_config_text("clients 4\n"), std::invalid_argument);
    EXPECT_THROW(parse_config_text("timing = sometimes\n"), ConfigError);
}

TEST(Config, ValidationNamesOffendingKey) {
    auto expect_key = [](ExperimentConfig c, const std::string& key) {
        try {
            c.validate();
            FAIL() << "expected ConfigError for " << key;
        } catch (const ConfigError& e) {
            EXPECT_EQ(e.key(), key);
        }
    };
    ExperimentConfig c;
    c.attacker_ratio = 0.5;
    expect_key(c, "attacker_ratio");
    c = {};
    c.participation = 0.0;
    expect_key(c, "participation");
    c = {};
    c.participation = 1.5;
    expect_key(c, "participation");
    c = {};
    c.window = 30;
    expect_key(c, "window");
    c = {};
    c.fed_variant = "scaffold";
    expect_key(c, "fed_variant");
}

TEST(Config, UnknownAggregatorListsRegisteredNames) {
    ExperimentConfig c;
    c.aggregator = "zeno";
    try {
        c.validate();
        FAIL();
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        for (const auto& n : defenses::aggregator_names()) EXPECT_NE(msg.find(n), std::string::npos) << n;
    }
}

TEST(Config, EchoRoundTripsAndHashIgnoresThreads) {
    auto c = small_config();
    c.adaptive_taps = {1, 5};
    c.lr = 0.003;
    const auto back = parse_config_text(c.to_text());
    EXPECT_EQ(back.to_text(), c.to_text());
    EXPECT_EQ(back.hash(), c.hash());
    auto t = c;
    t.threads = 7;
    EXPECT_EQ(t.hash(), c.hash());
    t.seed = 2;
    EXPECT_NE(t.hash(), c.hash());
}

TEST(Config, DefaultsMatchDeskProtocol) {
    const ExperimentConfig c;
    EXPECT_EQ(c.clients, 10u);
    EXPECT_EQ(c.rounds, 20u);
    EXPECT_EQ(c.participants_per_round(), 5u);
    EXPECT_DOUBLE_EQ(c.beta, 0.5);
    EXPECT_DOUBLE_EQ(c.lr, 0.01);
    EXPECT_DOUBLE_EQ(c.momentum, 0.9);
    EXPECT_DOUBLE_EQ(c.weight_decay, 1e-5);
    EXPECT_EQ(c.batch_size, 64u);
    EXPECT_EQ(c.local_epochs, 1u);
    EXPECT_EQ(c.probe_samples, 200u);
    EXPECT_EQ(c.trigger_size, 4u);
    EXPECT_EQ(c.num_classes, 4u);
}

TEST(FinalMetrics, ConstantAndAlternatingSeries) {
    const std::vector<double> flat(10, 0.7);
    EXPECT_EQ(format_percent(final_metrics(flat, flat).acc), "70.00 ± 0.00");
    std::vector<double> alt;
    for (int i = 0; i < 10; ++i) alt.push_back(i % 2 ? 0.8 : 0.6);
    EXPECT_EQ(format_percent(final_metrics(alt, flat).acc), "70.00 ± 10.00");
}

TEST(FinalMetrics, UsesOnlyTheLastWindow) {
    std::vector<double> v(15, 0.0);
    for (std::size_t i = 5; i < 15; ++i) v[i] = 0.5;
    const auto m = final_metrics(v, v, 10);
    EXPECT_DOUBLE_EQ(m.acc.mean, 0.5);
    EXPECT_DOUBLE_EQ(m.acc.std, 0.0);
}

TEST(FinalMetrics, WindowLongerThanRunThrows) {
    const std::vector<double> v(5, 0.5);
    EXPECT_THROW(final_metrics(v, v, 10), std::invalid_argument);
}

TEST(EvaluateAcc, ConstantPredictorOnBalancedSetIsOneOverC) {
    const auto ds = balanced(25, 4);
    EXPECT_DOUBLE_EQ(evaluate_acc(constant_model(ds.sample_shape, 4, 2), ds), 0.25);
}

TEST(EvaluateAcc, PerfectPredictorScoresOne) {
    data::Dataset ds{{1, 8, 8}, 4, {}, {}};
    std::vector<float> x(64, 0.f);
    for (int i = 0; i < 30; ++i) ds.push_back(x, 3);
    EXPECT_DOUBLE_EQ(evaluate_acc(constant_model(ds.sample_shape, 4, 3), ds), 1.0);
}

TEST(EvaluateAcc, RandomTinyBlockNetNearChance) {
    // Desk classes are tight clusters, so a random network sends (almost) a
    // whole class to one output: each init contributes C near-Bernoulli(1/C)
    // class-level outcomes. Pool them over inits and use the binomial band.
    data::DeskDatasetSpec spec;
    spec.seed = 4;
    const auto tt = data::make_desk_dataset(spec);
    const std::size_t inits = 20, classes = 4;
    double total = 0.0;
    for (std::uint64_t s = 1; s <= inits; ++s) {
        auto rng = make_rng(s, Stream::Init);
        const auto m = nn::tiny_block_net(tt.test.sample_shape, classes).build<float>(rng);
        total += evaluate_acc(m, tt.test);
    }
    const double p = 1.0 / static_cast<double>(classes), n = static_cast<double>(inits * classes);
    EXPECT_LE(std::abs(total / static_cast<double>(inits) - p), 3.0 * std::sqrt(p * (1 - p) / n));
}

TEST(EvaluateAsr, AlwaysTargetIsOneAndImmuneIsZero) {
    const auto ds = balanced(10, 4);
    const auto trig = attacks::TriggerPatch::checkerboard(3, 1);
    EXPECT_DOUBLE_EQ(evaluate_asr(constant_model(ds.sample_shape, 4, 1), ds, trig), 1.0);
    EXPECT_DOUBLE_EQ(evaluate_asr(constant_model(ds.sample_shape, 4, 2), ds, trig), 0.0);
}

TEST(EvaluateAsr, ExcludesTargetClassSamples) {
    // Only target-class samples are predicted as the target; excluding them
    // leaves an ASR of zero rather than 1/C.
    data::Dataset ds{{1, 4, 4}, 2, {}, {}};
    std::vector<float> x(16, 0.f);
    for (int i = 0; i < 10; ++i) ds.push_back(x, i % 2);
    const auto trig = attacks::TriggerPatch::checkerboard(2, 0);
    EXPECT_DOUBLE_EQ(evaluate_asr(constant_model(ds.sample_shape, 2, 1), ds, trig), 0.0);
    data::Dataset only_target{{1, 4, 4}, 2, {}, {}};
    only_target.push_back(x, 0);
    EXPECT_THROW(evaluate_asr(constant_model(ds.sample_shape, 2, 0), only_target, trig), std::invalid_argument);
}

TEST(Federation, AttackersChosenOnceAndPoisoned) {
    auto c = small_config();
    c.clients = 8;
    c.scenario = attacks::Scenario::T1;
    const auto f = build_federation(c);
    ASSERT_EQ(f.attackers.size(), 2u);
    EXPECT_EQ(build_federation(c).attackers, f.attackers);
    std::size_t total = 0;
    for (std::size_t k = 0; k < c.clients; ++k) total += f.client_data[k].size();
    EXPECT_EQ(total, c.train_samples);
    for (const auto a : f.attackers) {
        const auto hist = f.client_data[a].class_histogram();
        EXPECT_GE(hist[0], attacks::poisoned_count(f.client_data[a].size(), 0.5));
    }
    EXPECT_EQ(f.root.size(), c.root_samples);
}

TEST(Federation, NoAttackersWithoutScenario) {
    const auto f = build_federation(small_config());
    EXPECT_TRUE(f.attackers.empty());
}

TEST(Simulation, AllBenignAccuracyImproves) {
    auto c = small_config();
    c.rounds = 6;
    c.model = nn::ModelVariant::TinyBlockNet;
    Simulation sim(c);
    const double initial = sim.test_acc();
    const auto recs = sim.run();
    EXPECT_GT(recs.back().acc, initial);
    for (const auto& r : recs) {
        EXPECT_GE(r.acc, 0.0);
        EXPECT_LE(r.acc, 1.0);
        EXPECT_GE(r.asr, 0.0);
        EXPECT_LE(r.asr, 1.0);
    }
}

TEST(Simulation, CumulativeTimingMonotone) {
    auto c = small_config();
    c.timing = TimingMode::Wall;
    Simulation sim(c);
    const auto recs = sim.run();
    for (std::size_t i = 1; i < recs.size(); ++i) {
        EXPECT_GE(recs[i].cumulative_agg_ms, recs[i - 1].cumulative_agg_ms);
        EXPECT_GE(recs[i].cumulative_wall_ms, recs[i - 1].cumulative_wall_ms);
    }
}

TEST(Simulation, WeightsRecordedOnlyForParticipants) {
    auto c = small_config();
    c.clients = 6;
    c.participation = 0.5;
    c.aggregator = "fedmid";
    c.scenario = attacks::Scenario::T1;
    Simulation sim(c);
    const auto r = sim.run_round();
    ASSERT_EQ(r.weights.size(), 6u);
    std::size_t present = 0;
    for (std::size_t k = 0; k < 6; ++k) {
        const bool in = std::find(r.participants.begin(), r.participants.end(), k) != r.participants.end();
        EXPECT_EQ(in, !std::isnan(r.weights[k]));
        present += in;
    }
    EXPECT_EQ(present, 3u);
    EXPECT_TRUE(r.diagnostics.contains("anomaly"));
}

TEST(Simulation, EveryScenarioAndAggregatorRuns) {
    for (const auto s : {"1U", "2U", "2T", "3U", "3T"}) {
        auto c = small_config();
        c.rounds = 2;
        c.scenario = attacks::parse_scenario(s);
        c.aggregator = "fedmid";
        const auto recs = Simulation(c).run();
        EXPECT_TRUE(std::isfinite(recs.back().acc)) << s;
    }
    for (const auto& name : defenses::aggregator_names()) {
        auto c = small_config();
        c.rounds = 2;
        c.scenario = attacks::Scenario::T1;
        c.aggregator = name;
        const auto recs = Simulation(c).run();
        EXPECT_TRUE(std::isfinite(recs.back().acc)) << name;
    }
}

TEST(Simulation, FedProxVariantRuns) {
    auto c = small_config();
    c.rounds = 2;
    c.fed_variant = "fedprox";
    c.prox_mu = 0.1;
    EXPECT_NO_THROW(Simulation(c).run());
}

TEST(RunExperiment, WritesStableOutputs) {
    auto c = small_config();
    c.scenario = attacks::Scenario::T1;
    c.aggregator = "fedmid";
    const auto dir = scratch("outputs");
    run_experiment(c, dir);
    const auto csv = slurp(dir / "metrics.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n') + 1),
              "round,acc,asr,agg_time_ms,attacker_mean_weight,benign_mean_weight,w_0,w_1,w_2,w_3\n");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
    const auto summary = nlohmann::json::parse(slurp(dir / "summary.json"));
    for (const auto* k : {"acc_mean", "acc_std", "asr_mean", "asr_std", "window", "config_hash"}) EXPECT_TRUE(summary.contains(k)) << k;
    EXPECT_EQ(summary["config_hash"], c.hash());
    EXPECT_EQ(parse_config_text(slurp(dir / "config.txt")).to_text(), c.to_text());
    fs::remove_all(dir);
}

TEST(RunExperiment, ByteIdenticalCsvAcrossRunsAndThreadCounts) {
    auto c = small_config();
    c.clients = 6;
    c.scenario = attacks::Scenario::T3;
    c.aggregator = "fedmid";
    std::vector<std::string> csvs;
    for (const std::size_t threads : {1u, 4u, 4u}) {
        c.threads = threads;
        const auto dir = scratch("det" + std::to_string(csvs.size()));
        run_experiment(c, dir);
        csvs.push_back(slurp(dir / "metrics.csv"));
        fs::remove_all(dir);
    }
    EXPECT_EQ(csvs[0], csvs[1]);
    EXPECT_EQ(csvs[1], csvs[2]);
}

TEST(RunExperiment, SeedsWriteOneDirectoryEach) {
    auto c = small_config();
    c.rounds = 2;
    const auto dir = scratch("seeds");
    const auto res = run_seeds(c, dir, 2);
    ASSERT_EQ(res.size(), 2u);
    EXPECT_TRUE(fs::exists(dir / "seed_1" / "metrics.csv"));
    EXPECT_TRUE(fs::exists(dir / "seed_2" / "metrics.csv"));
    EXPECT_TRUE(nlohmann::json::parse(slurp(dir / "summary.json")).contains("acc_mean"));
    fs::remove_all(dir);
}

TEST(RunSweep, BetaAxisGivesFiveDirectories) {
    auto c = small_config();
    c.rounds = 2;
    const auto dir = scratch("sweep");
    const auto dirs = run_sweep(c, "beta", split_values("0.25,0.5,1,2,5"), dir);
    ASSERT_EQ(dirs.size(), 5u);
    for (const auto& d : dirs) EXPECT_TRUE(fs::exists(d / "summary.json")) << d;
    std::size_t subdirs = 0;
    for (const auto& e : fs::directory_iterator(dir)) subdirs += e.is_directory();
    EXPECT_EQ(subdirs, 5u);
    fs::remove_all(dir);
}

TEST(RunSweep, BadAxisValueNamesKeyBeforeRunning) {
    const auto dir = scratch("badsweep");
    EXPECT_THROW(run_sweep(small_config(), "beta", {"0.5", "-1"}, dir), ConfigError);
    EXPECT_THROW(run_sweep(small_config(), "gamma", {"1"}, dir), ConfigError);
    EXPECT_FALSE(fs::exists(dir));
}

class DiagnoseTest : public ::testing::Test {
protected:
    static ExperimentConfig config() {
        ExperimentConfig c;
        c.clients = 4;
        c.diag_epochs = 6;
        c.diag_samples = 160;
        c.probe_samples = 24;
        c.batch_size = 32;
        c.attacker_ratio = 0.25;
        c.pollution_ratio = 0.8;
        return c;
    }
};

TEST_F(DiagnoseTest, IdenticalBatchOrderGivesZeroDistances) {
    auto c = config();
    c.diag_same_order = true;
    const auto rep = diagnose_divergence(c);
    for (const auto& e : rep.epochs) {
        EXPECT_EQ(e.param_distance, 0.0);
        EXPECT_EQ(e.relational_distance, 0.0);
    }
}

TEST_F(DiagnoseTest, ShuffledOrderDivergesInParameterSpace) {
    const auto rep = diagnose_divergence(config());
    ASSERT_EQ(rep.epochs.size(), 6u);
    EXPECT_DOUBLE_EQ(rep.epochs.front().param_relative, 1.0);
    EXPECT_GT(rep.epochs[4].param_relative, 1.0);
    EXPECT_EQ(rep.attackers, 1u);
    EXPECT_FALSE(rep.layer_variance.empty());
    for (const auto& v : rep.layer_variance) EXPECT_GE(v.variance, 0.0);
    const auto j = rep.to_json();
    EXPECT_EQ(j["epochs"].size(), 6u);
}

TEST_F(DiagnoseTest, IndependentOfThreadCount) {
    auto c = config();
    c.diag_epochs = 2;
    c.threads = 1;
    const auto a = diagnose_divergence(c).to_json();
    c.threads = 4;
    EXPECT_EQ(diagnose_divergence(c).to_json(), a);
}
