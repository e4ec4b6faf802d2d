#pragma once

// Experiment configuration, the shared adapt-and-evaluate runner, and the
// table-style experiment suites driven by the command-line tool.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "nanovoice/evaluation.hpp"
#include "nanovoice/gradcheck.hpp"
#include "nanovoice/pretrain.hpp"
#include "nanovoice/trainer.hpp"

namespace nanovoice {

// ---------------------------------------------------------------------------
// Configuration

struct ExperimentConfig {
    ToyTaskConfig task;
    ScoreNetConfig net;

    std::uint64_t net_seed = 1;
    std::uint64_t train_speaker_seed = 7;
    PretrainOptions pretrain = [] {
        PretrainOptions p;
        p.seed = 3;
        return p;
    }();

    AdapterConfig adapter;
    int iterations = 500;
    double lr = 2e-3;
    std::size_t speakers = 8;
    std::uint64_t target_speaker_seed = 100;
    std::uint64_t first_target_id = 1000;
    std::vector<std::uint64_t> seeds{1, 2, 3};

    int sample_steps = 50;
    int eval_draws = 5;
    int bench_repeats = 3;
    int bench_iterations = 100;
    std::vector<std::size_t> sweep_sizes{1, 2, 4, 8};
    std::size_t group_clusters = 2;

    std::string net_path;  // empty: <out>/net.nvsn
    std::filesystem::path out = "nanovoice_out";

    void validate() const {
        adapter.validate();
        net.schedule.validate();
        if (task.mel_bins != net.mel_bins) throw ConfigError("task mel_bins must equal net mel_bins");
        if (task.content_codes != net.content_codes) throw ConfigError("task content_codes must equal net content_codes");
        if (task.min_length < 4 || task.max_length < task.min_length) throw ConfigError("bad length range");
        if (speakers < 1) throw ConfigError("speakers must be >= 1");
        if (iterations < 0 || pretrain.iterations < 0) throw ConfigError("iterations must be >= 0");
        if (!(lr > 0.0) || !(pretrain.lr > 0.0)) throw ConfigError("learning rates must be > 0");
        if (seeds.empty()) throw ConfigError("at least one seed is required");
        if (sample_steps < 1 || eval_draws < 1 || bench_repeats < 1 || bench_iterations < 1)
            throw ConfigError("sampling, evaluation and bench counts must be >= 1");
        for (auto n : sweep_sizes)
            if (n < 1 || speakers % n != 0)
                throw ConfigError("sweep size " + std::to_string(n) + " must divide speakers=" + std::to_string(speakers));
        if (group_clusters < 1) throw ConfigError("group_clusters must be >= 1");
    }

    std::filesystem::path resolved_net_path() const { return net_path.empty() ? out / "net.nvsn" : std::filesystem::path(net_path); }
};

namespace detail {

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& value) {
    std::vector<T> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        try {
            out.push_back(static_cast<T>(std::stoull(item, &used)));
        } catch (const std::exception&) {
            throw ConfigError("bad list entry '" + item + "' for " + key);
        }
    }
    if (out.empty()) throw ConfigError("empty list for " + key);
    return out;
}

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

template <class T>
std::string join(const std::vector<T>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

}  // namespace detail

/// Applies one key/value pair; unknown keys and unparsable values are configuration errors.
inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
    auto num = [&](auto& field) {
        using T = std::decay_t<decltype(field)>;
        try {
            std::size_t used = 0;
            if constexpr (std::is_same_v<T, double>)
                field = std::stod(value, &used);
            else if constexpr (std::is_same_v<T, int>)
                field = std::stoi(value, &used);
            else
                field = static_cast<T>(std::stoull(value, &used, 0));
            if (used != value.size()) throw std::invalid_argument(value);
        } catch (const std::exception&) {
            throw ConfigError("bad value '" + value + "' for " + key);
        }
    };
    auto flag = [&](bool& field) {
        if (value == "true" || value == "1")
            field = true;
        else if (value == "false" || value == "0")
            field = false;
        else
            throw ConfigError("bad boolean '" + value + "' for " + key);
    };
    if (key == "mel_bins") {
        num(c.task.mel_bins);
        c.net.mel_bins = c.task.mel_bins;
    } else if (key == "content_codes") {
        num(c.task.content_codes);
        c.net.content_codes = c.task.content_codes;
    } else if (key == "min_length") num(c.task.min_length);
    else if (key == "max_length") num(c.task.max_length);
    else if (key == "gain") num(c.task.gain);
    else if (key == "noise_sigma") num(c.task.noise_sigma);
    else if (key == "max_cosine") num(c.task.max_cosine);
    else if (key == "voice_factors") num(c.task.voice_factors);
    else if (key == "voice_residual") num(c.task.voice_residual);
    else if (key == "voice_seed") num(c.task.voice_seed);
    else if (key == "hidden") num(c.net.hidden);
    else if (key == "ff_hidden") num(c.net.ff_hidden);
    else if (key == "blocks") num(c.net.blocks);
    else if (key == "time_features") num(c.net.time_features);
    else if (key == "train_speakers") num(c.net.train_speakers);
    else if (key == "data_std") num(c.net.data_std);
    else if (key == "beta0") num(c.net.schedule.beta0);
    else if (key == "beta1") num(c.net.schedule.beta1);
    else if (key == "net_seed") num(c.net_seed);
    else if (key == "train_speaker_seed") num(c.train_speaker_seed);
    else if (key == "pretrain_iterations") num(c.pretrain.iterations);
    else if (key == "pretrain_batch") num(c.pretrain.batch);
    else if (key == "pretrain_lr") num(c.pretrain.lr);
    else if (key == "pretrain_seed") num(c.pretrain.seed);
    else if (key == "speaker_dropout") num(c.pretrain.speaker_dropout);
    else if (key == "weight_ema") num(c.pretrain.weight_ema);
    else if (key == "rank") num(c.adapter.rank);
    else if (key == "alpha") num(c.adapter.alpha);
    else if (key == "mode") c.adapter.mode = parse_sharing_mode(value);
    else if (key == "scale") flag(c.adapter.scale_enabled);
    else if (key == "normalization") flag(c.adapter.normalization_enabled);
    else if (key == "freeze_b") flag(c.adapter.freeze_B);
    else if (key == "detach_norm") flag(c.adapter.detach_norm);
    else if (key == "iterations") num(c.iterations);
    else if (key == "lr") num(c.lr);
    else if (key == "speakers") num(c.speakers);
    else if (key == "target_speaker_seed") num(c.target_speaker_seed);
    else if (key == "first_target_id") num(c.first_target_id);
    else if (key == "seeds") c.seeds = detail::parse_list<std::uint64_t>(key, value);
    else if (key == "sample_steps") num(c.sample_steps);
    else if (key == "eval_draws") num(c.eval_draws);
    else if (key == "bench_repeats") num(c.bench_repeats);
    else if (key == "bench_iterations") num(c.bench_iterations);
    else if (key == "sweep_sizes") c.sweep_sizes = detail::parse_list<std::size_t>(key, value);
    else if (key == "group_clusters") num(c.group_clusters);
    else if (key == "net_path") c.net_path = value;
    else if (key == "out") c.out = value;
    else throw ConfigError("unknown config key '" + key + "'");
}

/// Flat "key = value" text; '#' starts a comment.
inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {}) {
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        try {
            set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    base.validate();
    return base;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FileError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

/// Round-trippable text form of every setting.
inline std::string config_text(const ExperimentConfig& c) {
    std::ostringstream o;
    o.precision(17);
    auto b = [](bool v) { return v ? "true" : "false"; };
    o << "mel_bins = " << c.task.mel_bins << "\ncontent_codes = " << c.task.content_codes
      << "\nmin_length = " << c.task.min_length << "\nmax_length = " << c.task.max_length << "\ngain = " << c.task.gain
      << "\nnoise_sigma = " << c.task.noise_sigma << "\nmax_cosine = " << c.task.max_cosine
      << "\nvoice_factors = " << c.task.voice_factors << "\nvoice_residual = " << c.task.voice_residual
      << "\nvoice_seed = " << c.task.voice_seed << "\nhidden = " << c.net.hidden << "\nff_hidden = " << c.net.ff_hidden
      << "\nblocks = " << c.net.blocks << "\ntime_features = " << c.net.time_features
      << "\ntrain_speakers = " << c.net.train_speakers << "\ndata_std = " << c.net.data_std
      << "\nbeta0 = " << c.net.schedule.beta0 << "\nbeta1 = " << c.net.schedule.beta1 << "\nnet_seed = " << c.net_seed
      << "\ntrain_speaker_seed = " << c.train_speaker_seed << "\npretrain_iterations = " << c.pretrain.iterations
      << "\npretrain_batch = " << c.pretrain.batch << "\npretrain_lr = " << c.pretrain.lr
      << "\npretrain_seed = " << c.pretrain.seed << "\nspeaker_dropout = " << c.pretrain.speaker_dropout
      << "\nweight_ema = " << c.pretrain.weight_ema << "\nrank = " << c.adapter.rank << "\nalpha = " << c.adapter.alpha
      << "\nmode = " << to_string(c.adapter.mode) << "\nscale = " << b(c.adapter.scale_enabled)
      << "\nnormalization = " << b(c.adapter.normalization_enabled) << "\nfreeze_b = " << b(c.adapter.freeze_B)
      << "\ndetach_norm = " << b(c.adapter.detach_norm) << "\niterations = " << c.iterations << "\nlr = " << c.lr
      << "\nspeakers = " << c.speakers << "\ntarget_speaker_seed = " << c.target_speaker_seed
      << "\nfirst_target_id = " << c.first_target_id << "\nseeds = " << detail::join(c.seeds)
      << "\nsample_steps = " << c.sample_steps << "\neval_draws = " << c.eval_draws
      << "\nbench_repeats = " << c.bench_repeats << "\nbench_iterations = " << c.bench_iterations
      << "\nsweep_sizes = " << detail::join(c.sweep_sizes) << "\ngroup_clusters = " << c.group_clusters
      << "\nnet_path = " << c.net_path << "\nout = " << c.out.string() << "\n";
    return o.str();
}

// ---------------------------------------------------------------------------
// Data and network

inline std::vector<ToySpeaker> training_speakers(const ExperimentConfig& c) {
    return gen_speakers(c.task, c.net.train_speakers, c.train_speaker_seed, 0);
}

inline std::vector<ToySpeaker> target_speakers(const ExperimentConfig& c) {
    return gen_speakers(c.task, c.speakers, c.target_speaker_seed, c.first_target_id);
}

/// Reference length of each speaker for a seed, keyed by speaker id.
inline std::vector<std::size_t> reference_lengths(const ExperimentConfig& c, const std::vector<ToySpeaker>& speakers,
                                                  std::uint64_t seed) {
    std::vector<std::size_t> out;
    for (const auto& sp : speakers) {
        RngStream s{seed, sp.speaker_id, 0};
        out.push_back(c.task.min_length + s.below(c.task.max_length - c.task.min_length + 1));
    }
    return out;
}

inline SpeakerBatch reference_batch(const ExperimentConfig& c, const std::vector<ToySpeaker>& speakers,
                                    std::uint64_t seed) {
    return make_reference_batch(c.task, speakers, reference_lengths(c, speakers, seed), seed);
}

struct PretrainOutcome {
    ScoreNet net;
    PretrainResult curve;
};

inline PretrainOutcome pretrain_net(const ExperimentConfig& c) {
    RngStream init{c.net_seed, 0, 0};
    PretrainOutcome out{make_score_net(c.net, init), {}};
    out.curve = pretrain(out.net, c.task, training_speakers(c), c.pretrain);
    return out;
}

/// Loads the configured checkpoint, pretraining and saving it first if absent.
inline ScoreNet obtain_net(const ExperimentConfig& c) {
    const auto path = c.resolved_net_path();
    if (std::filesystem::exists(path)) {
        ScoreNet net = load_net(path);
        if (!(net.config == c.net))
            throw CompatibilityError("checkpoint " + path.string() + " was built with a different network config");
        return net;
    }
    PretrainOutcome p = pretrain_net(c);
    save_net(p.net, path);
    return std::move(p.net);
}

// ---------------------------------------------------------------------------
// Runner

/// One adapted configuration at one seed, over all target speakers.
struct ExperimentRow {
    std::string label;
    AdapterConfig config;
    std::size_t group_size = 0;  // N per batched job
    std::uint64_t seed = 0;
    Rational per_speaker_params;
    Rational enumerated_params;
    std::vector<std::uint64_t> speaker_ids;
    std::vector<double> similarity;
    std::vector<double> baseline;
    std::vector<double> final_loss;  // last-50 mean per speaker
    double seconds = 0.0;

    double mean_similarity() const { return mean(similarity); }
    double min_similarity() const { return *std::min_element(similarity.begin(), similarity.end()); }
    double mean_baseline() const { return mean(baseline); }
    double mean_final_loss() const { return mean(final_loss); }
    int wins() const {
        int w = 0;
        for (std::size_t n = 0; n < similarity.size(); ++n) w += similarity[n] > baseline[n];
        return w;
    }

    static double mean(const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    }
};

/// Seed-averaged view of several rows of the same configuration.
struct AggregateRow {
    std::string label;
    AdapterConfig config;
    std::size_t group_size = 0;
    Rational per_speaker_params;
    Rational enumerated_params;
    double similarity = 0.0;
    double min_similarity = 0.0;
    double baseline = 0.0;
    double final_loss = 0.0;
    double seconds = 0.0;
    std::vector<double> speaker_similarity;  // per speaker, averaged over seeds
    std::vector<double> speaker_baseline;
    int wins = 0;                            // speakers whose seed-mean beats the seed-mean baseline
};

inline AggregateRow aggregate(const std::vector<ExperimentRow>& rows) {
    if (rows.empty()) throw ConfigError("aggregate: no rows");
    AggregateRow a;
    a.label = rows[0].label;
    a.config = rows[0].config;
    a.group_size = rows[0].group_size;
    a.per_speaker_params = rows[0].per_speaker_params;
    a.enumerated_params = rows[0].enumerated_params;
    const double k = static_cast<double>(rows.size());
    const std::size_t S = rows[0].similarity.size();
    a.speaker_similarity.assign(S, 0.0);
    a.speaker_baseline.assign(S, 0.0);
    for (const auto& r : rows) {
        a.similarity += r.mean_similarity() / k;
        a.min_similarity += r.min_similarity() / k;
        a.baseline += r.mean_baseline() / k;
        a.final_loss += r.mean_final_loss() / k;
        a.seconds += r.seconds / k;
        for (std::size_t n = 0; n < S; ++n) {
            a.speaker_similarity[n] += r.similarity[n] / k;
            a.speaker_baseline[n] += r.baseline[n] / k;
        }
    }
    for (std::size_t n = 0; n < S; ++n) a.wins += a.speaker_similarity[n] > a.speaker_baseline[n];
    return a;
}

/// Adapts and evaluates configurations on the configured target speakers,
/// memoizing each (config, group size, seed) so suites can share runs.
class ExperimentRunner {
public:
    ExperimentRunner(ExperimentConfig config, ScoreNet net)
        : config_(std::move(config)), net_(std::move(net)), speakers_(target_speakers(config_)) {
        config_.validate();
    }

    const ExperimentConfig& config() const { return config_; }
    const ScoreNet& net() const { return net_; }
    const std::vector<ToySpeaker>& speakers() const { return speakers_; }

    /// Unadapted-network similarity per speaker for one seed.
    const std::vector<double>& baseline(std::uint64_t seed) {
        auto it = baselines_.find(seed);
        if (it != baselines_.end()) return it->second;
        const SpeakerBatch refs = reference_batch(config_, speakers_, seed);
        auto sims = evaluate_similarity(net_, nullptr, refs, config_.task, config_.sample_steps, config_.eval_draws, seed);
        return baselines_.emplace(seed, std::move(sims)).first->second;
    }

    /// All speakers adapted in consecutive groups of `group_size`.
    const ExperimentRow& run(const std::string& label, AdapterConfig adapter, std::size_t group_size, std::uint64_t seed) {
        if (group_size < 1 || speakers_.size() % group_size != 0)
            throw ConfigError("group size " + std::to_string(group_size) + " must divide " +
                              std::to_string(speakers_.size()) + " speakers");
        adapter.num_speakers = static_cast<int>(group_size);
        const auto key = std::make_tuple(config_label(adapter), group_size, seed);
        if (auto it = rows_.find(key); it != rows_.end()) {
            it->second.label = label;
            return it->second;
        }
        if (log_) *log_ << "  run " << label << " (" << config_label(adapter) << ", N=" << group_size << ", seed " << seed
                        << ")" << std::endl;
        const SpeakerBatch refs = reference_batch(config_, speakers_, seed);
        ExperimentRow row;
        row.label = label;
        row.config = adapter;
        row.group_size = group_size;
        row.seed = seed;
        row.speaker_ids = refs.speaker_ids;
        row.baseline = baseline(seed);
        AdaptOptions opt;
        opt.iterations = config_.iterations;
        opt.lr = config_.lr;
        opt.seed = seed;
        for (std::size_t g = 0; g < speakers_.size(); g += group_size) {
            std::vector<std::size_t> slots;
            for (std::size_t i = g; i < g + group_size; ++i) slots.push_back(i);
            const SpeakerBatch batch = select(refs, slots);
            AdaptResult r = adapt_batched(net_, make_bank_for(net_, adapter, batch, seed), batch, opt);
            const auto sims = evaluate_similarity(net_, &r.bank, batch, config_.task, config_.sample_steps,
                                                  config_.eval_draws, seed);
            row.similarity.insert(row.similarity.end(), sims.begin(), sims.end());
            for (std::size_t n = 0; n < batch.size(); ++n) {
                double tail = 0.0;
                const std::size_t window = std::min<std::size_t>(50, r.report.losses.size());
                for (std::size_t i = r.report.losses.size() - window; i < r.report.losses.size(); ++i)
                    tail += r.report.losses[i][n] / static_cast<double>(window);
                row.final_loss.push_back(tail);
            }
            row.seconds += r.report.wall_seconds;
            row.per_speaker_params = r.report.per_speaker_params;
            row.enumerated_params = r.report.enumerated_params;
        }
        return rows_.emplace(key, std::move(row)).first->second;
    }

    /// `run` over every configured seed, aggregated.
    AggregateRow run_seeds(const std::string& label, const AdapterConfig& adapter, std::size_t group_size,
                           std::vector<ExperimentRow>* rows = nullptr) {
        std::vector<ExperimentRow> local;
        for (auto seed : config_.seeds) local.push_back(run(label, adapter, group_size, seed));
        if (rows) rows->insert(rows->end(), local.begin(), local.end());
        return aggregate(local);
    }

    void set_log(std::ostream* log) { log_ = log; }

private:
    ExperimentConfig config_;
    ScoreNet net_;
    std::vector<ToySpeaker> speakers_;
    std::map<std::uint64_t, std::vector<double>> baselines_;
    std::map<std::tuple<std::string, std::size_t, std::uint64_t>, ExperimentRow> rows_;
    std::ostream* log_ = nullptr;
};

// ---------------------------------------------------------------------------
// Reports

inline nlohmann::json adapter_json(const AdapterConfig& c) {
    return {{"sharing_mode", to_string(c.mode)}, {"scale", c.scale_enabled}, {"normalization", c.normalization_enabled},
            {"freeze_b", c.freeze_B},           {"rank", c.rank},          {"alpha", c.alpha},
            {"speakers", c.num_speakers}};
}

inline nlohmann::json row_json(const ExperimentRow& r) {
    return {{"label", r.label},
            {"config", adapter_json(r.config)},
            {"seed", r.seed},
            {"per_speaker_params", {{"exact", r.per_speaker_params.str()}, {"enumerated", r.enumerated_params.str()}}},
            {"speaker_ids", r.speaker_ids},
            {"similarity", r.similarity},
            {"baseline_similarity", r.baseline},
            {"final_loss", r.final_loss},
            {"mean_similarity", r.mean_similarity()},
            {"min_similarity", r.min_similarity()},
            {"wins", r.wins()},
            {"seconds", r.seconds}};
}

inline nlohmann::json aggregate_json(const AggregateRow& a) {
    return {{"label", a.label},
            {"config", adapter_json(a.config)},
            {"per_speaker_params",
             {{"exact", a.per_speaker_params.str()},
              {"rounded", a.per_speaker_params.rounded()},
              {"enumerated", a.enumerated_params.str()},
              {"agree", a.per_speaker_params == a.enumerated_params}}},
            {"similarity", a.similarity},
            {"min_similarity", a.min_similarity},
            {"baseline_similarity", a.baseline},
            {"wins", a.wins},
            {"final_loss", a.final_loss},
            {"seconds", a.seconds}};
}

inline std::string csv_header() {
    return "label,sharing,scale,normalization,freeze_b,speakers,params_per_speaker,params_exact,similarity,"
           "min_similarity,baseline_similarity,wins,final_loss,seconds\n";
}

inline std::string csv_row(const AggregateRow& a) {
    std::ostringstream o;
    o.precision(6);
    o << a.label << ',' << to_string(a.config.mode) << ',' << a.config.scale_enabled << ','
      << a.config.normalization_enabled << ',' << a.config.freeze_B << ',' << a.group_size << ','
      << a.per_speaker_params.rounded() << ',' << a.per_speaker_params.str() << ',' << std::fixed << a.similarity << ','
      << a.min_similarity << ',' << a.baseline << ',' << a.wins << ',' << a.final_loss << ',' << a.seconds << '\n';
    return o.str();
}

/// Writes <name>.json and <name>.csv under the output directory.
inline void write_report(const std::filesystem::path& dir, const std::string& name, const nlohmann::json& report,
                         const std::vector<AggregateRow>& rows) {
    write_text_atomic(dir / (name + ".json"), report.dump(2) + "\n");
    std::string csv = csv_header();
    for (const auto& r : rows) csv += csv_row(r);
    write_text_atomic(dir / (name + ".csv"), csv);
}

// ---------------------------------------------------------------------------
// Parameter accounting

/// Layer dimensions of the adapter sites for a network config.
inline std::vector<LayerDims> site_dims(const ScoreNetConfig& c) {
    std::vector<LayerDims> out;
    const auto h = static_cast<std::int64_t>(c.hidden);
    for (std::size_t b = 0; b < c.blocks; ++b) {
        out.push_back({3 * h, h});
        out.push_back({h, h});
    }
    return out;
}

/// Single-layer stand-in with the summed dimensions, exact for every count (they are linear in d and k).
inline const std::vector<LayerDims>& aggregate_dims() {
    static const std::vector<LayerDims> dims{{12548, 6912}};
    return dims;
}

inline AdapterConfig variant(AdapterConfig base, SharingMode mode, bool scale, bool norm, bool freeze = false) {
    base.mode = mode;
    base.scale_enabled = scale;
    base.normalization_enabled = norm;
    base.freeze_B = freeze;
    return base;
}

inline const std::vector<std::pair<std::string, SharingMode>>& sharing_rows() {
    static const std::vector<std::pair<std::string, SharingMode>> rows{{"batchwise", SharingMode::batchwise},
                                                                       {"shared_B", SharingMode::shared_B},
                                                                       {"shared_A", SharingMode::shared_A},
                                                                       {"shared_both", SharingMode::shared_both}};
    return rows;
}

/// Counts for the toy sites and the aggregate dimensions, with the enumeration cross-check.
inline nlohmann::json cmd_count_params(const ExperimentConfig& c) {
    nlohmann::json out;
    auto count_block = [&](const std::vector<LayerDims>& dims, bool enumerate) {
        nlohmann::json block = nlohmann::json::array();
        auto add = [&](const std::string& label, AdapterConfig a, int N) {
            a.num_speakers = N;
            const Rational p = param_count(a, dims);
            nlohmann::json row{{"label", label}, {"config", adapter_json(a)}, {"exact", p.str()}, {"rounded", p.rounded()}};
            if (enumerate) {
                std::vector<Tensor> base;
                for (const auto& d : dims) base.emplace_back(Shape{static_cast<std::size_t>(d.d), static_cast<std::size_t>(d.k)});
                for (auto& w : base) w.fill(1.0);
                RngStream s{0, 0, 0};
                AdapterBank bank = init_bank(a, base, s);
                const Rational e = enumerate_trainable(bank);
                row["enumerated"] = e.str();
                row["agree"] = e == p;
            }
            block.push_back(row);
        };
        const int N = static_cast<int>(enumerate ? c.speakers : 40);
        for (const auto& [label, mode] : sharing_rows()) add(label, variant(c.adapter, mode, false, false), N);
        add("NanoVoice", variant(c.adapter, SharingMode::shared_B, true, true), N);
        add("-Normalization", variant(c.adapter, SharingMode::shared_B, true, false), N);
        add("frozen_B", variant(c.adapter, SharingMode::shared_B, true, true, true), N);
        const std::vector<int> sizes = enumerate ? std::vector<int>(c.sweep_sizes.begin(), c.sweep_sizes.end())
                                                 : std::vector<int>{1, 5, 20, 40};
        for (int n : sizes) add("NanoVoice N=" + std::to_string(n), variant(c.adapter, SharingMode::shared_B, true, true), n);
        return block;
    };
    out["toy_sites"] = count_block(site_dims(c.net), true);
    out["aggregate_dims"] = count_block(aggregate_dims(), false);
    return out;
}

// ---------------------------------------------------------------------------
// Suites

struct SuiteResult {
    nlohmann::json report;
    std::vector<AggregateRow> rows;
};

inline SuiteResult finish_suite(const std::string& name, const std::vector<AggregateRow>& agg,
                                const std::vector<ExperimentRow>& rows, nlohmann::json extra = {}) {
    SuiteResult r;
    r.rows = agg;
    r.report["suite"] = name;
    for (const auto& a : agg) r.report["aggregate"].push_back(aggregate_json(a));
    for (const auto& row : rows) r.report["rows"].push_back(row_json(row));
    if (!extra.is_null()) r.report["extra"] = extra;
    return r;
}

/// The four sharing modes with the scale matrix off.
inline SuiteResult cmd_ablation_sharing(ExperimentRunner& runner) {
    const auto& c = runner.config();
    std::vector<AggregateRow> agg;
    std::vector<ExperimentRow> rows;
    for (const auto& [label, mode] : sharing_rows())
        agg.push_back(runner.run_seeds(label, variant(c.adapter, mode, false, false), c.speakers, &rows));
    nlohmann::json extra;
    for (const auto& [label, mode] : sharing_rows()) {
        AdapterConfig a = variant(c.adapter, mode, false, false);
        a.num_speakers = 40;
        extra["aggregate_dims_N40"][label] = param_count(a, aggregate_dims()).str();
    }
    return finish_suite("ablate-sharing", agg, rows, extra);
}

/// NanoVoice, without normalization, and without the scale matrix.
inline SuiteResult cmd_ablation_scale(ExperimentRunner& runner) {
    const auto& c = runner.config();
    std::vector<AggregateRow> agg;
    std::vector<ExperimentRow> rows;
    agg.push_back(runner.run_seeds("NanoVoice", variant(c.adapter, SharingMode::shared_B, true, true), c.speakers, &rows));
    agg.push_back(
        runner.run_seeds("-Normalization", variant(c.adapter, SharingMode::shared_B, true, false), c.speakers, &rows));
    agg.push_back(
        runner.run_seeds("-ScaleMatrix", variant(c.adapter, SharingMode::shared_B, false, false), c.speakers, &rows));
    return finish_suite("ablate-scale", agg, rows);
}

/// NanoVoice at each configured batch size.
inline SuiteResult cmd_batchsize_sweep(ExperimentRunner& runner) {
    const auto& c = runner.config();
    std::vector<AggregateRow> agg;
    std::vector<ExperimentRow> rows;
    for (auto n : c.sweep_sizes)
        agg.push_back(runner.run_seeds("N=" + std::to_string(n), variant(c.adapter, SharingMode::shared_B, true, true), n,
                                       &rows));
    nlohmann::json extra;
    for (int n : {1, 5, 20, 40}) {
        AdapterConfig a = variant(c.adapter, SharingMode::shared_B, true, true);
        a.num_speakers = n;
        extra["aggregate_dims"]["N=" + std::to_string(n)] = param_count(a, aggregate_dims()).str();
    }
    return finish_suite("sweep-batch", agg, rows, extra);
}

/// Trainable versus frozen shared B, both with the scale matrix.
inline SuiteResult cmd_frozen_b(ExperimentRunner& runner) {
    const auto& c = runner.config();
    std::vector<AggregateRow> agg;
    std::vector<ExperimentRow> rows;
    agg.push_back(runner.run_seeds("NanoVoice", variant(c.adapter, SharingMode::shared_B, true, true), c.speakers, &rows));
    agg.push_back(
        runner.run_seeds("frozen_B", variant(c.adapter, SharingMode::shared_B, true, true, true), c.speakers, &rows));
    return finish_suite("frozen-b", agg, rows);
}

struct BenchResult {
    std::size_t speakers = 0;
    std::vector<double> batched_seconds;
    std::vector<double> sequential_seconds;
    double batched_median = 0.0;
    double sequential_median = 0.0;
    double speedup = 0.0;
    double amortized_seconds = 0.0;  // batched time per speaker

    nlohmann::json to_json() const {
        return {{"speakers", speakers},
                {"batched_seconds", batched_seconds},
                {"sequential_seconds", sequential_seconds},
                {"batched_median", batched_median},
                {"sequential_median", sequential_median},
                {"speedup", speedup},
                {"amortized_seconds_per_speaker", amortized_seconds}};
    }
};

inline double median(std::vector<double> v) {
    if (v.empty()) throw ConfigError("median of nothing");
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// Wall-clock of batched versus sequential adaptation of the first `speakers` targets.
inline BenchResult cmd_bench(const ExperimentConfig& c, const ScoreNet& net, std::size_t speakers) {
    if (speakers < 1 || speakers > c.speakers) throw ConfigError("bench: speaker count out of range");
    auto targets = target_speakers(c);
    targets.resize(speakers);
    const std::uint64_t seed = c.seeds.front();
    const SpeakerBatch batch = reference_batch(c, targets, seed);
    AdaptOptions opt;
    opt.iterations = c.bench_iterations;
    opt.lr = c.lr;
    opt.seed = seed;
    const AdapterConfig adapter = c.adapter;
    BenchResult r;
    r.speakers = speakers;
    for (int rep = 0; rep < c.bench_repeats; ++rep) {
        const auto t0 = std::chrono::steady_clock::now();
        adapt_batched(net, make_bank_for(net, adapter, batch, seed), batch, opt);
        const auto t1 = std::chrono::steady_clock::now();
        adapt_sequential(net, batch, adapter, opt);
        const auto t2 = std::chrono::steady_clock::now();
        r.batched_seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
        r.sequential_seconds.push_back(std::chrono::duration<double>(t2 - t1).count());
    }
    r.batched_median = median(r.batched_seconds);
    r.sequential_median = median(r.sequential_seconds);
    r.speedup = r.sequential_median / r.batched_median;
    r.amortized_seconds = r.batched_median / static_cast<double>(speakers);
    return r;
}

/// Same-cluster versus mixed-cluster groups of speakers drawn around shared voices.
inline SuiteResult cmd_groups(const ExperimentConfig& c, const ScoreNet& net) {
    const std::size_t clusters = c.group_clusters;
    const std::size_t group = c.speakers / clusters;
    if (group < 1 || c.speakers % clusters != 0)
        throw ConfigError("groups: speakers must be a multiple of group_clusters");
    // Speaker i belongs to cluster i % clusters.
    const auto speakers = gen_clustered_speakers(c.task, c.speakers, clusters, c.target_speaker_seed, c.first_target_id);
    std::vector<std::vector<std::size_t>> same, mixed;
    for (std::size_t k = 0; k < clusters; ++k) {
        std::vector<std::size_t> g;
        for (std::size_t i = k; i < c.speakers; i += clusters) g.push_back(i);
        same.push_back(g);
    }
    for (std::size_t g = 0; g < c.speakers; g += group) {
        std::vector<std::size_t> slots;
        for (std::size_t i = g; i < g + group; ++i) slots.push_back(i);
        mixed.push_back(slots);
    }
    const AdapterConfig adapter = variant(c.adapter, SharingMode::shared_B, true, true);
    std::vector<AggregateRow> agg;
    std::vector<ExperimentRow> rows;
    for (const auto& [label, groups] : {std::pair{std::string("same"), same}, std::pair{std::string("mixed"), mixed}}) {
        std::vector<ExperimentRow> seed_rows;
        for (auto seed : c.seeds) {
            const SpeakerBatch refs = reference_batch(c, speakers, seed);
            ExperimentRow row;
            row.label = label;
            row.config = adapter;
            row.config.num_speakers = static_cast<int>(group);
            row.group_size = group;
            row.seed = seed;
            row.speaker_ids = refs.speaker_ids;
            row.similarity.assign(c.speakers, 0.0);
            row.baseline = evaluate_similarity(net, nullptr, refs, c.task, c.sample_steps, c.eval_draws, seed);
            row.final_loss.assign(c.speakers, 0.0);
            AdaptOptions opt;
            opt.iterations = c.iterations;
            opt.lr = c.lr;
            opt.seed = seed;
            for (const auto& slots : groups) {
                const SpeakerBatch batch = select(refs, slots);
                AdaptResult r = adapt_batched(net, make_bank_for(net, row.config, batch, seed), batch, opt);
                const auto sims = evaluate_similarity(net, &r.bank, batch, c.task, c.sample_steps, c.eval_draws, seed);
                for (std::size_t i = 0; i < slots.size(); ++i) {
                    row.similarity[slots[i]] = sims[i];
                    row.final_loss[slots[i]] = r.report.tail_loss(50);
                }
                row.seconds += r.report.wall_seconds;
                row.per_speaker_params = r.report.per_speaker_params;
                row.enumerated_params = r.report.enumerated_params;
            }
            seed_rows.push_back(row);
        }
        agg.push_back(aggregate(seed_rows));
        rows.insert(rows.end(), seed_rows.begin(), seed_rows.end());
    }
    nlohmann::json extra{{"difference_same_minus_mixed", agg[0].similarity - agg[1].similarity},
                         {"note", "informational: no significant difference is expected"}};
    return finish_suite("groups", agg, rows, extra);
}

// ---------------------------------------------------------------------------
// Pipeline: adapt, sample, eval with artifacts on disk

inline std::filesystem::path sample_path(const std::filesystem::path& dir, std::uint64_t id) {
    return dir / ("speaker_" + std::to_string(id) + ".nvds");
}

/// Pads stored samples into a batch, in the given order.
inline SpeakerBatch batch_from_samples(const std::vector<SpeakerSample>& samples) {
    if (samples.empty()) throw ConfigError("no samples");
    SpeakerBatch b;
    const std::size_t N = samples.size(), F = samples[0].mel.dim(0);
    std::size_t L = 0;
    for (const auto& s : samples) {
        if (s.mel.rank() != 2 || s.mel.dim(0) != F) throw DimensionError("samples disagree on mel bins");
        L = std::max(L, s.mel.dim(1));
    }
    b.x0 = Tensor({N, F, L});
    b.mask = Tensor({N, 1, L});
    for (std::size_t n = 0; n < N; ++n) {
        const auto& s = samples[n];
        const std::size_t len = s.mel.dim(1);
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t j = 0; j < len; ++j) b.x0(n, f, j) = s.mel(f, j);
        for (std::size_t j = 0; j < len; ++j) b.mask(n, 0, j) = 1.0;
        auto codes = s.content;
        codes.resize(L, 0);
        b.content.push_back(std::move(codes));
        b.lengths.push_back(len);
        b.speaker_ids.push_back(s.speaker.speaker_id);
    }
    return b;
}

inline std::vector<SpeakerSample> load_samples(const std::filesystem::path& dir, const std::vector<std::uint64_t>& ids) {
    std::vector<SpeakerSample> out;
    for (auto id : ids) out.push_back(load_speaker_sample(sample_path(dir, id)));
    return out;
}

inline std::vector<std::uint64_t> read_speaker_list(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FileError("cannot open " + path.string());
    std::vector<std::uint64_t> ids;
    for (std::uint64_t id; in >> id;) ids.push_back(id);
    if (ids.empty()) throw FormatError("empty speaker list", 0);
    return ids;
}

/// Adapts the first `speakers` targets as one batch; writes the references,
/// the bank and a report under the output directory.
inline RunReport cmd_adapt(const ExperimentConfig& c, const ScoreNet& net, std::uint64_t seed, std::size_t speakers) {
    auto targets = target_speakers(c);
    if (speakers < 1 || speakers > targets.size()) throw ConfigError("adapt: speaker count out of range");
    targets.resize(speakers);
    const SpeakerBatch refs = reference_batch(c, targets, seed);
    AdaptOptions opt;
    opt.iterations = c.iterations;
    opt.lr = c.lr;
    opt.seed = seed;
    AdaptResult r = adapt_batched(net, make_bank_for(net, c.adapter, refs, seed), refs, opt);
    std::filesystem::create_directories(c.out / "references");
    std::string list;
    for (std::size_t n = 0; n < refs.size(); ++n) {
        const auto len = refs.lengths[n];
        Tensor mel({c.task.mel_bins, len});
        for (std::size_t f = 0; f < c.task.mel_bins; ++f)
            for (std::size_t j = 0; j < len; ++j) mel(f, j) = refs.x0(n, f, j);
        std::vector<int> content(refs.content[n].begin(), refs.content[n].begin() + static_cast<std::ptrdiff_t>(len));
        save_speaker_sample(targets[n], mel, content, sample_path(c.out / "references", refs.speaker_ids[n]));
        list += std::to_string(refs.speaker_ids[n]) + "\n";
    }
    write_text_atomic(c.out / "speakers.txt", list);
    save_bank(r.bank, c.out / "bank.nvbk");
    write_text_atomic(c.out / "adapt_report.json", r.report.to_json().dump(2) + "\n");
    return r.report;
}

/// Generates one mel per adapted speaker (draw 0) with fresh content of the
/// reference length; without a bank on disk the unadapted network is used.
inline std::vector<SpeakerSample> cmd_sample(const ExperimentConfig& c, const ScoreNet& net, std::uint64_t seed) {
    const auto ids = read_speaker_list(c.out / "speakers.txt");
    const auto refs = load_samples(c.out / "references", ids);
    std::optional<AdapterBank> bank;
    if (std::filesystem::exists(c.out / "bank.nvbk"))
        bank = load_bank(c.out / "bank.nvbk", net.adapted_base_weights(), static_cast<int>(ids.size()));
    const SpeakerBatch ref = batch_from_samples(refs);
    const SampleRequest req = make_sample_request(c.task, ref.lengths, ref.speaker_ids, seed);
    const Tensor gen = generate(net, bank ? &*bank : nullptr, req, c.sample_steps, generation_streams(ids, seed, 0));
    std::filesystem::create_directories(c.out / "samples");
    std::vector<SpeakerSample> out;
    for (std::size_t n = 0; n < ids.size(); ++n) {
        SpeakerSample s;
        s.speaker = refs[n].speaker;
        s.mel = Tensor({c.task.mel_bins, ref.lengths[n]});
        for (std::size_t f = 0; f < c.task.mel_bins; ++f)
            for (std::size_t j = 0; j < ref.lengths[n]; ++j) s.mel(f, j) = gen(n, f, j);
        s.content.assign(req.content[n].begin(), req.content[n].begin() + static_cast<std::ptrdiff_t>(ref.lengths[n]));
        save_speaker_sample(s.speaker, s.mel, s.content, sample_path(c.out / "samples", ids[n]));
        out.push_back(std::move(s));
    }
    return out;
}

struct EvalResult {
    std::vector<std::uint64_t> speaker_ids;
    std::vector<double> similarity;
    std::vector<double> baseline;  // unadapted network, same content and noise

    nlohmann::json to_json() const {
        int wins = 0;
        for (std::size_t n = 0; n < similarity.size(); ++n) wins += similarity[n] > baseline[n];
        return {{"speaker_ids", speaker_ids}, {"similarity", similarity}, {"baseline_similarity", baseline},
                {"mean_similarity", ExperimentRow::mean(similarity)},
                {"mean_baseline_similarity", ExperimentRow::mean(baseline)}, {"wins", wins}};
    }
};

/// Toy similarity of each generated sample to its reference, with a baseline column.
inline EvalResult evaluate_samples(const ExperimentConfig& c, const ScoreNet& net, const std::filesystem::path& ref_dir,
                                   const std::filesystem::path& sample_dir, const std::vector<std::uint64_t>& ids,
                                   std::uint64_t seed) {
    const SpeakerBatch ref = batch_from_samples(load_samples(ref_dir, ids));
    const SpeakerBatch gen = batch_from_samples(load_samples(sample_dir, ids));
    if (gen.lengths != ref.lengths) throw DimensionError("eval: sample lengths differ from references");
    EvalResult r;
    r.speaker_ids = ids;
    r.similarity = batch_similarity(gen.x0, gen.mask, ref);
    const SampleRequest req = make_sample_request(c.task, ref.lengths, ids, seed);
    r.baseline = batch_similarity(generate(net, nullptr, req, c.sample_steps, generation_streams(ids, seed, 0)),
                                  req.mask, ref);
    return r;
}

inline EvalResult cmd_eval(const ExperimentConfig& c, const ScoreNet& net, std::uint64_t seed) {
    const auto ids = read_speaker_list(c.out / "speakers.txt");
    EvalResult r = evaluate_samples(c, net, c.out / "references", c.out / "samples", ids, seed);
    write_text_atomic(c.out / "eval.json", r.to_json().dump(2) + "\n");
    std::ostringstream csv;
    csv << "speaker_id,similarity,baseline_similarity\n";
    for (std::size_t n = 0; n < ids.size(); ++n) csv << ids[n] << ',' << r.similarity[n] << ',' << r.baseline[n] << '\n';
    write_text_atomic(c.out / "eval.csv", csv.str());
    return r;
}

}  // namespace nanovoice
