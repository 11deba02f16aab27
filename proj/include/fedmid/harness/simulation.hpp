#pragma once

#include <chrono>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "fedmid/attacks/attacks.hpp"
#include "fedmid/core/parallel.hpp"
#include "fedmid/data/partition.hpp"
#include "fedmid/defenses/registry.hpp"
#include "fedmid/fl/aggregator.hpp"
#include "fedmid/harness/config.hpp"
#include "fedmid/harness/metrics.hpp"

namespace fedmid::harness {

struct RoundRecord {
    std::size_t round = 0;  // 1-based
    double acc = 0.0;
    double asr = 0.0;
    double agg_time_ms = 0.0;
    double cumulative_agg_ms = 0.0;
    double cumulative_wall_ms = 0.0;
    double attacker_mean_weight = std::numeric_limits<double>::quiet_NaN();
    double benign_mean_weight = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> weights;  // one per client; NaN when not participating or no weights
    std::vector<std::size_t> participants;
    std::vector<double> update_norms;  // aligned with participants
    nlohmann::json diagnostics;
};

struct Federation {
    data::Dataset train;
    data::Dataset test;
    std::vector<data::Dataset> client_data;  // poisoned for attackers
    std::vector<bool> is_attacker;
    std::vector<std::size_t> attackers;
    data::Dataset root;
};

inline nn::ModelBuilder model_builder(const ExperimentConfig& cfg, const Shape& input_shape, std::size_t classes) {
    if (cfg.model == nn::ModelVariant::TinyBlockNet) {
        return nn::tiny_block_net(input_shape, classes, cfg.model_width, cfg.model_batchnorm);
    }
    return nn::mlp(input_shape, classes, cfg.model_width * 4, cfg.model_batchnorm);
}

inline data::TrainTest load_data(const ExperimentConfig& cfg) {
    if (cfg.dataset == "desk") {
        data::DeskDatasetSpec spec;
        spec.num_classes = cfg.num_classes;
        spec.image_size = cfg.image_size;
        spec.channels = cfg.channels;
        spec.train_samples = cfg.train_samples;
        spec.test_samples = cfg.test_samples;
        spec.noise_std = cfg.noise_std;
        spec.seed = cfg.seed;
        spec.low = static_cast<float>(cfg.pixel_low);
        spec.high = static_cast<float>(cfg.pixel_high);
        spec.smoothing = cfg.template_smoothing;
        return data::make_desk_dataset(spec);
    }
    const Shape shape{cfg.channels, cfg.image_size, cfg.image_size};
    data::TrainTest tt;
    tt.train = data::load_csv_dataset(cfg.train_csv, shape, cfg.num_classes);
    tt.test = data::load_csv_dataset(cfg.test_csv, shape, cfg.num_classes);
    return tt;
}

/// Data partition, attacker selection and one-off data poisoning.
inline Federation build_federation(const ExperimentConfig& cfg) {
    Federation f;
    auto tt = load_data(cfg);
    f.train = std::move(tt.train);
    f.test = std::move(tt.test);
    const auto parts = data::dirichlet_partition(f.train, {cfg.clients, cfg.beta, cfg.seed});

    auto arng = make_rng(cfg.seed, Stream::Attackers);
    f.attackers = data::sample_without_replacement(cfg.clients, cfg.attacker_count(), arng);
    f.is_attacker.assign(cfg.clients, false);
    for (const auto a : f.attackers) f.is_attacker[a] = true;

    const auto attack = cfg.attack();
    for (std::size_t c = 0; c < cfg.clients; ++c) {
        auto ds = f.train.subset(parts[c]);
        if (f.is_attacker[c] && cfg.scenario != attacks::Scenario::U2) {
            auto prng = make_rng(cfg.seed, Stream::Poison, {c});
            ds = attacks::is_targeted(cfg.scenario) ? attacks::poison_targeted(ds, attack.pollution, attack.trigger, prng)
                                                    : attacks::poison_untargeted(ds, attack.pollution, prng);
        }
        f.client_data.push_back(std::move(ds));
    }

    auto rrng = make_rng(cfg.seed, Stream::RootData);
    const auto root_idx = data::sample_without_replacement(f.train.size(), std::min(cfg.root_samples, f.train.size()), rrng);
    f.root = f.train.subset(root_idx);
    return f;
}

/// One federated run, advanced a round at a time.
class Simulation {
public:
    explicit Simulation(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        fed_ = build_federation(cfg_);
        cfg_.attack().trigger.validate(fed_.test.sample_shape, fed_.test.num_classes);
        auto irng = make_rng(cfg_.seed, Stream::Init);
        model_ = model_builder(cfg_, fed_.train.sample_shape, cfg_.num_classes).build<float>(irng);
        aggregator_ = defenses::make_aggregator(cfg_.aggregator, cfg_.aggregator_params());
        threads_ = cfg_.threads ? cfg_.threads : default_thread_count();
        hp_ = {cfg_.lr, cfg_.momentum, cfg_.weight_decay, cfg_.batch_size};
        variant_ = cfg_.fed_variant == "fedprox" ? fl::LocalVariant::fedprox(cfg_.prox_mu) : fl::LocalVariant::fedavg();
    }

    const ExperimentConfig& config() const { return cfg_; }
    const Federation& federation() const { return fed_; }
    const fl::Model& model() const { return model_; }
    std::size_t rounds_done() const { return round_; }

    double test_acc() const { return evaluate_acc(model_, fed_.test); }
    double test_asr() const { return evaluate_asr(model_, fed_.test, cfg_.attack().trigger); }

    RoundRecord run_round() {
        const auto wall_start = std::chrono::steady_clock::now();
        const std::size_t r = round_;
        auto srng = make_rng(cfg_.seed, Stream::Sampling, {r});
        const auto participants = data::sample_without_replacement(cfg_.clients, cfg_.participants_per_round(), srng);
        const std::size_t k = participants.size();

        std::vector<fl::Update> updates(k, fl::Update(model_.layout()));
        const bool lie_only = cfg_.scenario == attacks::Scenario::U2;
        parallel_for(k, threads_, [&](std::size_t i) {
            const std::size_t c = participants[i];
            if (fed_.is_attacker[c] && lie_only) return;
            updates[i] = train_client(c, r);
        });

        if (attacks::is_omniscient(cfg_.scenario)) apply_lie(participants, updates);

        fl::RoundContext ctx;
        ctx.round = r;
        ctx.participants = participants;
        const auto global = model_.flatten();
        ctx.global = &global;
        ctx.updates = std::move(updates);
        for (const auto c : participants) ctx.dataset_sizes.push_back(fed_.client_data[c].size());
        ctx.model = &model_;
        ctx.seed = cfg_.seed;
        if (aggregator_->needs_server_update()) {
            auto rng = make_rng(cfg_.seed, Stream::LocalTrain, {cfg_.clients, r});
            ctx.server_update = fl::local_train(model_, fed_.root, cfg_.local_epochs, hp_, variant_, rng);
        }

        std::vector<double> norms;
        for (const auto& u : ctx.updates) norms.push_back(u.norm());

        std::vector<double> applied;
        const auto t0 = std::chrono::steady_clock::now();
        auto result = aggregator_->aggregate(ctx);
        auto next = fl::apply_aggregation(ctx, result, &applied);
        const auto t1 = std::chrono::steady_clock::now();
        if (!next.all_finite()) throw std::runtime_error("global model became non-finite in round " + std::to_string(r + 1));
        model_.unflatten(next);

        RoundRecord rec;
        rec.round = r + 1;
        rec.participants = participants;
        rec.update_norms = std::move(norms);
        rec.agg_time_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        rec.acc = test_acc();
        rec.asr = test_asr();
        rec.weights.assign(cfg_.clients, std::numeric_limits<double>::quiet_NaN());
        if (!applied.empty()) {
            double att = 0.0, ben = 0.0;
            std::size_t na = 0, nb = 0;
            for (std::size_t i = 0; i < k; ++i) {
                const std::size_t c = participants[i];
                rec.weights[c] = applied[i];
                if (fed_.is_attacker[c]) {
                    att += applied[i];
                    ++na;
                } else {
                    ben += applied[i];
                    ++nb;
                }
            }
            if (na) rec.attacker_mean_weight = att / static_cast<double>(na);
            if (nb) rec.benign_mean_weight = ben / static_cast<double>(nb);
        }
        rec.diagnostics = std::move(result.diagnostics);
        agg_total_ms_ += rec.agg_time_ms;
        wall_total_ms_ += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - wall_start).count();
        rec.cumulative_agg_ms = agg_total_ms_;
        rec.cumulative_wall_ms = wall_total_ms_;
        ++round_;
        return rec;
    }

    std::vector<RoundRecord> run() {
        std::vector<RoundRecord> out;
        while (round_ < cfg_.rounds) out.push_back(run_round());
        return out;
    }

private:
    fl::Update train_client(std::size_t c, std::size_t r) const {
        auto rng = make_rng(cfg_.seed, Stream::LocalTrain, {c, r});
        const auto& ds = fed_.client_data[c];
        if (fed_.is_attacker[c] && attacks::is_adaptive(cfg_.scenario)) {
            auto prng = make_rng(cfg_.seed, Stream::AdaptiveProbe, {r, c});
            const auto probe = attacks::standard_normal_probe(model_.arch().input_shape, cfg_.adaptive_probe_samples, prng);
            const attacks::AdaptiveRegularizer<float> reg(model_, probe, cfg_.adaptive_taps);
            const fl::StepHook hook = [&reg](const fl::Model& local, std::span<double> grad) {
                return reg.accumulate_gradient(local, grad);
            };
            return fl::local_train(model_, ds, cfg_.local_epochs, hp_, variant_, rng, hook);
        }
        return fl::local_train(model_, ds, cfg_.local_epochs, hp_, variant_, rng);
    }

    /// Omniscient attackers see this round's benign updates.
    void apply_lie(const std::vector<std::size_t>& participants, std::vector<fl::Update>& updates) const {
        std::vector<fl::Update> benign;
        for (std::size_t i = 0; i < participants.size(); ++i) {
            if (!fed_.is_attacker[participants[i]]) benign.push_back(updates[i]);
        }
        if (benign.empty()) return;  // nothing to calibrate against
        const auto stats = attacks::benign_statistics(benign);
        for (std::size_t i = 0; i < participants.size(); ++i) {
            if (!fed_.is_attacker[participants[i]]) continue;
            updates[i] = cfg_.scenario == attacks::Scenario::U2 ? attacks::lie_calibrate(stats.mean, stats.std, cfg_.lie_z)
                                                                : attacks::lie_clip(updates[i], stats.mean, stats.std, cfg_.lie_z);
        }
    }

    ExperimentConfig cfg_;
    Federation fed_;
    fl::Model model_;
    fl::AggregatorPtr aggregator_;
    std::size_t threads_ = 1;
    fl::Hyperparams hp_;
    fl::LocalVariant variant_;
    std::size_t round_ = 0;
    double agg_total_ms_ = 0.0;
    double wall_total_ms_ = 0.0;
};

}  // namespace fedmid::harness
