#pragma once

// Experiment configuration: flat `key = value` text, snake_case keys.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedmid/attacks/attacks.hpp"
#include "fedmid/defenses/registry.hpp"
#include "fedmid/nn/architectures.hpp"

namespace fedmid::harness {

/// Error about a specific configuration key.
class ConfigError : public std::invalid_argument {
public:
    ConfigError(const std::string& key, const std::string& what)
        : std::invalid_argument("config key '" + key + "': " + what), key_(key) {}
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

enum class TimingMode { Wall, Off };

struct ExperimentConfig {
    std::uint64_t seed = 1;
    std::size_t clients = 10;
    std::size_t rounds = 20;
    double participation = 0.5;
    double beta = 0.5;
    double attacker_ratio = 0.2;

    attacks::Scenario scenario = attacks::Scenario::None;
    double pollution_ratio = 0.5;
    double lie_z = 1.5;
    std::size_t trigger_size = 4;
    double trigger_intensity = 3.0;  // value of the bright checkerboard cells
    double trigger_low = 0.0;        // value of the dark cells
    std::int32_t target_class = 0;
    std::vector<std::size_t> adaptive_taps;
    std::size_t adaptive_probe_samples = 200;

    std::string aggregator = "fedavg";
    bool size_weighted = true;
    double defense_attacker_ratio = -1.0;  // < 0: use attacker_ratio
    long trim_k = -1;                      // < 0: derived
    long krum_f = -1;
    std::size_t krum_m = 0;
    std::size_t dnc_iterations = 1;
    double dnc_c = 1.0;
    std::size_t dnc_sub_dim = 10000;
    std::size_t bucket_size = 2;
    double fedcpa_k_frac = 0.01;
    double residual_confidence = 2.0;
    double residual_clip = 0.05;
    std::size_t probe_samples = 200;
    std::vector<std::size_t> fedmid_taps;
    std::size_t root_samples = 100;

    nn::ModelVariant model = nn::ModelVariant::TinyBlockNet;
    std::size_t model_width = 8;
    bool model_batchnorm = true;
    std::size_t local_epochs = 1;
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-5;
    std::size_t batch_size = 64;
    std::string fed_variant = "fedavg";
    double prox_mu = 0.01;

    std::string dataset = "desk";
    std::size_t num_classes = 4;
    std::size_t image_size = 16;
    std::size_t channels = 1;
    std::size_t train_samples = 2000;
    std::size_t test_samples = 400;
    double noise_std = 0.15;
    double pixel_low = 0.0;
    double pixel_high = 1.0;
    double template_smoothing = 0.0;
    std::string train_csv;
    std::string test_csv;

    std::size_t window = 10;
    TimingMode timing = TimingMode::Wall;
    std::size_t threads = 0;
    std::string out_dir;

    std::size_t diag_epochs = 10;
    std::size_t diag_samples = 500;
    bool diag_same_order = false;

    /// Sets one key from its textual value; throws ConfigError naming the key.
    void set(const std::string& key, const std::string& value);
    /// Canonical `key = value` lines in a fixed order.
    std::vector<std::pair<std::string, std::string>> entries() const;
    std::string to_text() const;
    /// Checks cross-field invariants; throws ConfigError naming the key.
    void validate() const;
    /// FNV-1a over the canonical text of every result-affecting key.
    std::string hash() const;

    attacks::AttackConfig attack() const {
        attacks::AttackConfig a;
        a.scenario = scenario;
        a.pollution = pollution_ratio;
        a.lie_z = lie_z;
        a.trigger = attacks::TriggerPatch::checkerboard(trigger_size, target_class, static_cast<float>(trigger_intensity), static_cast<float>(trigger_low));
        a.adaptive_taps = adaptive_taps;
        a.adaptive_probe_samples = adaptive_probe_samples;
        return a;
    }

    defenses::AggregatorParams aggregator_params() const {
        defenses::AggregatorParams p;
        p.attacker_ratio = defense_attacker_ratio >= 0.0 ? defense_attacker_ratio : attacker_ratio;
        p.total_clients = clients;
        p.size_weighted = size_weighted;
        if (trim_k >= 0) p.trim_k = static_cast<std::size_t>(trim_k);
        if (krum_f >= 0) p.krum_f = static_cast<std::size_t>(krum_f);
        p.krum_m = krum_m;
        p.dnc_iterations = dnc_iterations;
        p.dnc_c = dnc_c;
        p.dnc_sub_dim = dnc_sub_dim;
        p.bucket_size = bucket_size;
        p.fedcpa.k_frac = fedcpa_k_frac;
        p.residual = {residual_confidence, residual_clip};
        p.fedmid.probe_samples = probe_samples;
        p.fedmid.taps = fedmid_taps;
        p.fedmid.threads = threads;
        return p;
    }

    std::size_t participants_per_round() const {
        const auto k = static_cast<std::size_t>(std::ceil(participation * static_cast<double>(clients) - 1e-9));
        return std::clamp<std::size_t>(k, 1, clients);
    }

    std::size_t attacker_count() const {
        if (scenario == attacks::Scenario::None) return 0;
        return static_cast<std::size_t>(std::llround(attacker_ratio * static_cast<double>(clients)));
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const auto* end = v.data() + v.size();
    const auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || ptr != end) throw ConfigError(key, "cannot parse '" + v + "' as a number");
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(key, "expected a boolean, got '" + v + "'");
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(parse_number<std::size_t>(key, item));
    }
    return out;
}

inline std::string list_text(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

inline std::string number_text(double v) {
    char buf[64];
    const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

}  // namespace detail

inline void ExperimentConfig::set(const std::string& key, const std::string& raw) {
    using detail::parse_number;
    const std::string v = detail::trim(raw);
    auto sz = [&] { return parse_number<std::size_t>(key, v); };
    auto real = [&] { return parse_number<double>(key, v); };
    try {
        if (key == "seed") seed = parse_number<std::uint64_t>(key, v);
        else if (key == "clients") clients = sz();
        else if (key == "rounds") rounds = sz();
        else if (key == "participation") participation = real();
        else if (key == "beta") beta = real();
        else if (key == "attacker_ratio") attacker_ratio = real();
        else if (key == "scenario") scenario = attacks::parse_scenario(v);
        else if (key == "pollution_ratio") pollution_ratio = real();
        else if (key == "lie_z") lie_z = real();
        else if (key == "trigger_size") trigger_size = sz();
        else if (key == "trigger_intensity") trigger_intensity = real();
        else if (key == "trigger_low") trigger_low = real();
        else if (key == "target_class") target_class = parse_number<std::int32_t>(key, v);
        else if (key == "adaptive_taps") adaptive_taps = detail::parse_list(key, v);
        else if (key == "adaptive_probe_samples") adaptive_probe_samples = sz();
        else if (key == "aggregator") aggregator = v;
        else if (key == "size_weighted") size_weighted = detail::parse_bool(key, v);
        else if (key == "defense_attacker_ratio") defense_attacker_ratio = real();
        else if (key == "trim_k") trim_k = parse_number<long>(key, v);
        else if (key == "krum_f") krum_f = parse_number<long>(key, v);
        else if (key == "krum_m") krum_m = sz();
        else if (key == "dnc_iterations") dnc_iterations = sz();
        else if (key == "dnc_c") dnc_c = real();
        else if (key == "dnc_sub_dim") dnc_sub_dim = sz();
        else if (key == "bucket_size") bucket_size = sz();
        else if (key == "fedcpa_k_frac") fedcpa_k_frac = real();
        else if (key == "residual_confidence") residual_confidence = real();
        else if (key == "residual_clip") residual_clip = real();
        else if (key == "probe_samples") probe_samples = sz();
        else if (key == "fedmid_taps") fedmid_taps = detail::parse_list(key, v);
        else if (key == "root_samples") root_samples = sz();
        else if (key == "model") model = nn::parse_model_variant(v);
        else if (key == "model_width") model_width = sz();
        else if (key == "model_batchnorm") model_batchnorm = detail::parse_bool(key, v);
        else if (key == "local_epochs") local_epochs = sz();
        else if (key == "lr") lr = real();
        else if (key == "momentum") momentum = real();
        else if (key == "weight_decay") weight_decay = real();
        else if (key == "batch_size") batch_size = sz();
        else if (key == "fed_variant") fed_variant = v;
        else if (key == "prox_mu") prox_mu = real();
        else if (key == "dataset") dataset = v;
        else if (key == "num_classes") num_classes = sz();
        else if (key == "image_size") image_size = sz();
        else if (key == "channels") channels = sz();
        else if (key == "train_samples") train_samples = sz();
        else if (key == "test_samples") test_samples = sz();
        else if (key == "noise_std") noise_std = real();
        else if (key == "pixel_low") pixel_low = real();
        else if (key == "pixel_high") pixel_high = real();
        else if (key == "template_smoothing") template_smoothing = real();
        else if (key == "train_csv") train_csv = v;
        else if (key == "test_csv") test_csv = v;
        else if (key == "window") window = sz();
        else if (key == "timing") {
            if (v == "wall") timing = TimingMode::Wall;
            else if (v == "off") timing = TimingMode::Off;
            else throw ConfigError(key, "expected 'wall' or 'off', got '" + v + "'");
        }
        else if (key == "threads") threads = sz();
        else if (key == "out_dir") out_dir = v;
        else if (key == "diag_epochs") diag_epochs = sz();
        else if (key == "diag_samples") diag_samples = sz();
        else if (key == "diag_same_order") diag_same_order = detail::parse_bool(key, v);
        else throw ConfigError(key, "unknown key");
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(key, e.what());
    }
}

inline std::vector<std::pair<std::string, std::string>> ExperimentConfig::entries() const {
    using detail::number_text;
    auto s = [](auto v) { return std::to_string(v); };
    return {
        {"seed", s(seed)},
        {"clients", s(clients)},
        {"rounds", s(rounds)},
        {"participation", number_text(participation)},
        {"beta", number_text(beta)},
        {"attacker_ratio", number_text(attacker_ratio)},
        {"scenario", attacks::to_string(scenario)},
        {"pollution_ratio", number_text(pollution_ratio)},
        {"lie_z", number_text(lie_z)},
        {"trigger_size", s(trigger_size)},
        {"trigger_intensity", number_text(trigger_intensity)},
        {"trigger_low", number_text(trigger_low)},
        {"target_class", s(target_class)},
        {"adaptive_taps", detail::list_text(adaptive_taps)},
        {"adaptive_probe_samples", s(adaptive_probe_samples)},
        {"aggregator", aggregator},
        {"size_weighted", size_weighted ? "true" : "false"},
        {"defense_attacker_ratio", number_text(defense_attacker_ratio)},
        {"trim_k", s(trim_k)},
        {"krum_f", s(krum_f)},
        {"krum_m", s(krum_m)},
        {"dnc_iterations", s(dnc_iterations)},
        {"dnc_c", number_text(dnc_c)},
        {"dnc_sub_dim", s(dnc_sub_dim)},
        {"bucket_size", s(bucket_size)},
        {"fedcpa_k_frac", number_text(fedcpa_k_frac)},
        {"residual_confidence", number_text(residual_confidence)},
        {"residual_clip", number_text(residual_clip)},
        {"probe_samples", s(probe_samples)},
        {"fedmid_taps", detail::list_text(fedmid_taps)},
        {"root_samples", s(root_samples)},
        {"model", nn::to_string(model)},
        {"model_width", s(model_width)},
        {"model_batchnorm", model_batchnorm ? "true" : "false"},
        {"local_epochs", s(local_epochs)},
        {"lr", number_text(lr)},
        {"momentum", number_text(momentum)},
        {"weight_decay", number_text(weight_decay)},
        {"batch_size", s(batch_size)},
        {"fed_variant", fed_variant},
        {"prox_mu", number_text(prox_mu)},
        {"dataset", dataset},
        {"num_classes", s(num_classes)},
        {"image_size", s(image_size)},
        {"channels", s(channels)},
        {"train_samples", s(train_samples)},
        {"test_samples", s(test_samples)},
        {"noise_std", number_text(noise_std)},
        {"pixel_low", number_text(pixel_low)},
        {"pixel_high", number_text(pixel_high)},
        {"template_smoothing", number_text(template_smoothing)},
        {"train_csv", train_csv},
        {"test_csv", test_csv},
        {"window", s(window)},
        {"timing", timing == TimingMode::Wall ? "wall" : "off"},
        {"threads", s(threads)},
        {"out_dir", out_dir},
        {"diag_epochs", s(diag_epochs)},
        {"diag_samples", s(diag_samples)},
        {"diag_same_order", diag_same_order ? "true" : "false"},
    };
}

inline std::string ExperimentConfig::to_text() const {
    std::string out;
    for (const auto& [k, v] : entries()) out += k + " = " + v + "\n";
    return out;
}

inline std::string ExperimentConfig::hash() const {
    std::uint64_t h = 14695981039346656037ull;
    for (const auto& [k, v] : entries()) {
        if (k == "threads" || k == "out_dir" || k == "timing") continue;
        for (const char c : k + "=" + v + "\n") {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline void ExperimentConfig::validate() const {
    if (clients < 2) throw ConfigError("clients", "need at least 2 clients");
    if (rounds < 1) throw ConfigError("rounds", "need at least 1 round");
    if (!(participation > 0.0 && participation <= 1.0)) throw ConfigError("participation", "must be in (0, 1]");
    if (!(beta > 0.0)) throw ConfigError("beta", "must be positive");
    if (!(attacker_ratio >= 0.0 && attacker_ratio < 0.5)) throw ConfigError("attacker_ratio", "must be in [0, 0.5)");
    if (!(pollution_ratio > 0.0 && pollution_ratio <= 1.0)) throw ConfigError("pollution_ratio", "must be in (0, 1]");
    if (scenario != attacks::Scenario::None && attacker_count() == 0) {
        throw ConfigError("attacker_ratio", "an attack scenario needs at least one attacker");
    }
    const auto& names = defenses::aggregator_names();
    if (std::find(names.begin(), names.end(), aggregator) == names.end()) {
        throw ConfigError("aggregator", "unknown aggregator '" + aggregator + "'; registered: " + defenses::aggregator_list());
    }
    if (target_class < 0 || static_cast<std::size_t>(target_class) >= num_classes) throw ConfigError("target_class", "out of range");
    if (trigger_size == 0 || trigger_size > image_size) throw ConfigError("trigger_size", "must fit inside the image");
    if (probe_samples < 2) throw ConfigError("probe_samples", "must be at least 2");
    if (adaptive_probe_samples < 2) throw ConfigError("adaptive_probe_samples", "must be at least 2");
    if (local_epochs < 1) throw ConfigError("local_epochs", "must be at least 1");
    if (batch_size < 2) throw ConfigError("batch_size", "must be at least 2");
    if (!(lr >= 0.0)) throw ConfigError("lr", "must be non-negative");
    if (fed_variant != "fedavg" && fed_variant != "fedprox") throw ConfigError("fed_variant", "expected 'fedavg' or 'fedprox'");
    if (!(prox_mu >= 0.0)) throw ConfigError("prox_mu", "must be non-negative");
    if (dataset != "desk" && dataset != "csv") throw ConfigError("dataset", "expected 'desk' or 'csv'");
    if (dataset == "csv" && (train_csv.empty() || test_csv.empty())) throw ConfigError("train_csv", "csv datasets need train_csv and test_csv");
    if (num_classes < 2) throw ConfigError("num_classes", "need at least 2 classes");
    if (window < 1) throw ConfigError("window", "must be at least 1");
    if (window > rounds) throw ConfigError("window", "larger than the number of rounds");
    if (root_samples < 2) throw ConfigError("root_samples", "must be at least 2");
    if (bucket_size < 1) throw ConfigError("bucket_size", "must be at least 1");
    if (!(fedcpa_k_frac > 0.0 && fedcpa_k_frac <= 0.5)) throw ConfigError("fedcpa_k_frac", "must be in (0, 0.5]");
    if (diag_epochs < 2) throw ConfigError("diag_epochs", "must be at least 2");
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
inline ExperimentConfig parse_config_text(const std::string& text, ExperimentConfig base = {}) {
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected 'key = value'");
        }
        base.set(detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    }
    return base;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

}  // namespace fedmid::harness
