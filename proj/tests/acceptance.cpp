// Runs every acceptance criterion at its stated tolerance and prints one
// PASS/FAIL line per criterion. Exit status is nonzero if any criterion fails.

#include <chrono>
#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "nanovoice/experiments.hpp"

using namespace nanovoice;

namespace {

struct Outcome {
    int id = 0;
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double elapsed(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Outcome gradient_exactness() {
    Outcome o{1, "gradient exactness", false, {}, 0.0};
    const auto t0 = std::chrono::steady_clock::now();
    GradCheckOptions opt;
    opt.instances = 20;
    opt.network_instances = 20;
    const GradCheckReport r = run_gradcheck(opt);
    o.seconds = elapsed(t0);
    double worst = 0.0;
    std::string worst_case;
    std::size_t checked = 0;
    for (const auto& c : r.cases) {
        if (c.informational) continue;
        ++checked;
        if (c.max_rel_error > worst) {
            worst = c.max_rel_error;
            worst_case = c.config + " " + c.level + " " + c.param;
        }
    }
    o.passed = r.passed() && o.seconds < 120.0;
    o.detail = fmt("%zu cases over %zu configs, %zu failures, max rel error %.2e (%s), %.1fs", checked,
                   gradcheck_configs(false).size(), r.failures().size(), worst, worst_case.c_str(), o.seconds);
    return o;
}

Outcome function_preservation(const ExperimentConfig& c, const ScoreNet& net) {
    Outcome o{2, "function preservation at init", false, {}, 0.0};
    const auto targets = target_speakers(c);
    const SpeakerBatch refs = reference_batch(c, targets, 1);
    ScoreInput in;
    in.content = &refs.content;
    in.mask = &refs.mask;
    RngStream s{11, 0, 0};
    in.x_t = randn(s, refs.x0.shape());
    for (std::size_t n = 0; n < refs.size(); ++n) in.t.push_back(0.05 + 0.9 * s.uniform());
    const Tensor base = score_forward(net, nullptr, in);
    double worst = 0.0;
    std::size_t configs = 0;
    for (auto config : gradcheck_configs(true)) {
        config.num_speakers = static_cast<int>(refs.size());
        RngStream init{12, configs, 0};
        const AdapterBank bank = init_bank(config, net.adapted_base_weights(), init, refs.speaker_ids);
        worst = std::max(worst, max_abs_diff(score_forward(net, &bank, in), base));
        ++configs;
    }
    o.passed = worst <= 1e-12;
    o.detail = fmt("%zu configurations, max abs diff %.2e", configs, worst);
    return o;
}

Outcome batched_equals_sequential(const ExperimentConfig& c, const ScoreNet& net) {
    Outcome o{3, "batched equals sequential", false, {}, 0.0};
    const auto t0 = std::chrono::steady_clock::now();
    auto targets = target_speakers(c);
    targets.resize(4);
    const SpeakerBatch refs = reference_batch(c, targets, 1);
    AdaptOptions opt;
    opt.iterations = 50;
    opt.lr = c.lr;
    opt.seed = 1;
    const AdapterConfig config = variant(c.adapter, SharingMode::batchwise, true, true);
    const AdaptResult batched = adapt_batched(net, make_bank_for(net, config, refs, 1), refs, opt);
    const SequentialResult seq = adapt_sequential(net, refs, config, opt);
    double params = 0.0, losses = 0.0;
    for (std::size_t n = 0; n < 4; ++n) {
        for (std::size_t l = 0; l < batched.bank.layers.size(); ++l) {
            const auto& a = batched.bank.layers[l];
            const auto& b = seq.banks[n].layers[l];
            params = std::max({params, max_abs_diff(a.A.slice(n), b.A.slice(0)), max_abs_diff(a.B.slice(n), b.B.slice(0)),
                               max_abs_diff(a.m.slice(n), b.m.slice(0))});
        }
        for (int it = 0; it < 50; ++it)
            losses = std::max(losses, std::abs(batched.report.losses[it][n] - seq.reports[n].losses[it][0]));
    }
    o.seconds = elapsed(t0);
    o.passed = params <= 1e-9 && losses <= 1e-9 && o.seconds < 60.0;
    o.detail = fmt("N=4, 50 iterations: max param diff %.2e, max loss diff %.2e, %.1fs", params, losses, o.seconds);
    return o;
}

Outcome parameter_accounting(const ExperimentConfig& c) {
    Outcome o{4, "parameter accounting", false, {}, 0.0};
    const auto j = cmd_count_params(c);
    const std::vector<std::pair<std::string, long long>> expected{
        {"batchwise", 38920},       {"shared_B", 14459},         {"shared_A", 25442},
        {"shared_both", 973},       {"NanoVoice N=1", 45832},    {"NanoVoice N=5", 25755},
        {"NanoVoice N=20", 21991},  {"NanoVoice N=40", 21363}};
    long long worst = 0;
    std::string got;
    for (const auto& [label, value] : expected)
        for (const auto& row : j["aggregate_dims"])
            if (row["label"] == label) {
                const long long v = row["rounded"].get<long long>();
                worst = std::max(worst, std::llabs(v - value));
                got += " " + std::to_string(v);
            }
    bool exact = true;
    RngStream s{4, 0, 0};
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<LayerDims> dims;
        const auto layers = 1 + s.below(6);
        for (std::uint64_t l = 0; l < layers; ++l)
            dims.push_back({static_cast<std::int64_t>(1 + s.below(5000)), static_cast<std::int64_t>(1 + s.below(5000))});
        AdapterConfig both = variant(c.adapter, SharingMode::shared_both, false, false);
        AdapterConfig batch = variant(c.adapter, SharingMode::batchwise, false, false);
        both.rank = batch.rank = 1 + static_cast<int>(s.below(8));
        both.num_speakers = batch.num_speakers = 1 + static_cast<int>(s.below(64));
        exact = exact && param_count(both, dims) == param_count(batch, dims) / Rational(batch.num_speakers);
    }
    o.passed = worst <= 10 && exact;
    o.detail = fmt("aggregate dims counts%s (max deviation %lld), shared_both = batchwise/N exact over 200 random dims: %s",
                   got.c_str(), worst, exact ? "yes" : "no");
    return o;
}

Outcome sharing_ablation(ExperimentRunner& runner, nlohmann::json& reports) {
    Outcome o{5, "sharing ablation ordering", false, {}, 0.0};
    const SuiteResult r = cmd_ablation_sharing(runner);
    write_report(runner.config().out, "ablate_sharing", r.report, r.rows);
    reports["ablate_sharing"] = r.report["aggregate"];
    const double bw = r.rows[0].similarity, sb = r.rows[1].similarity, sa = r.rows[2].similarity,
                 both = r.rows[3].similarity;
    const double frac = (r.rows[1].per_speaker_params / r.rows[0].per_speaker_params).value();
    o.passed = sb >= bw - 0.03 && sa <= sb && both <= sb && frac <= 0.45;
    o.detail = fmt("similarity batchwise %.4f shared_B %.4f shared_A %.4f shared_both %.4f; shared_B params %.1f%% of "
                   "batchwise",
                   bw, sb, sa, both, 100.0 * frac);
    return o;
}

Outcome scale_ablation(ExperimentRunner& runner, nlohmann::json& reports, AggregateRow& nanovoice) {
    Outcome o{6, "scale matrix ablation", false, {}, 0.0};
    const SuiteResult r = cmd_ablation_scale(runner);
    write_report(runner.config().out, "ablate_scale", r.report, r.rows);
    reports["ablate_scale"] = r.report["aggregate"];
    nanovoice = r.rows[0];
    const double nv = r.rows[0].similarity, no_norm = r.rows[1].similarity, no_scale = r.rows[2].similarity;
    std::int64_t sum_k = 0;
    for (const auto& d : site_dims(runner.config().net)) sum_k += d.k;
    const bool exact = r.rows[0].per_speaker_params - r.rows[2].per_speaker_params == Rational(sum_k);
    o.passed = nv >= no_scale - 0.01 && nv >= no_norm - 0.01 && exact;
    o.detail = fmt("similarity NanoVoice %.4f, -Normalization %.4f, -ScaleMatrix %.4f; extra params %s (sum k = %lld)",
                   nv, no_norm, no_scale, (r.rows[0].per_speaker_params - r.rows[2].per_speaker_params).str().c_str(),
                   static_cast<long long>(sum_k));
    return o;
}

Outcome batch_size_robustness(ExperimentRunner& runner, nlohmann::json& reports) {
    Outcome o{7, "batch size robustness", false, {}, 0.0};
    const SuiteResult r = cmd_batchsize_sweep(runner);
    write_report(runner.config().out, "sweep_batch", r.report, r.rows);
    reports["sweep_batch"] = r.report["aggregate"];
    double lo = 1e9, hi = -1e9;
    bool decreasing = true;
    std::string sims, params;
    for (std::size_t i = 0; i < r.rows.size(); ++i) {
        lo = std::min(lo, r.rows[i].similarity);
        hi = std::max(hi, r.rows[i].similarity);
        if (i > 0) decreasing = decreasing && r.rows[i].per_speaker_params < r.rows[i - 1].per_speaker_params;
        sims += fmt(" %s:%.4f", r.rows[i].label.c_str(), r.rows[i].similarity);
        params += " " + r.rows[i].per_speaker_params.str();
    }
    o.passed = hi - lo <= 0.05 && decreasing;
    o.detail = fmt("similarity%s, spread %.4f; params per speaker%s", sims.c_str(), hi - lo, params.c_str());
    return o;
}

Outcome frozen_b(ExperimentRunner& runner, nlohmann::json& reports) {
    Outcome o{8, "frozen B analysis", false, {}, 0.0};
    const SuiteResult r = cmd_frozen_b(runner);
    write_report(runner.config().out, "frozen_b", r.report, r.rows);
    reports["frozen_b"] = r.report["aggregate"];
    const double diff = std::abs(r.rows[0].similarity - r.rows[1].similarity);
    o.passed = diff <= 0.02;
    o.detail = fmt("similarity trainable B %.4f, frozen B %.4f, difference %.4f", r.rows[0].similarity,
                   r.rows[1].similarity, diff);
    return o;
}

Outcome efficiency(const ExperimentConfig& c, const ScoreNet& net, nlohmann::json& reports) {
    Outcome o{9, "batched adaptation speedup", false, {}, 0.0};
    const BenchResult one = cmd_bench(c, net, 1);
    const BenchResult all = cmd_bench(c, net, c.speakers);
    reports["bench"] = {{"N=1", one.to_json()}, {"N=" + std::to_string(c.speakers), all.to_json()}};
    o.passed = all.speedup >= 1.6;
    o.detail = fmt("N=%zu median batched %.2fs vs sequential %.2fs, speedup %.2fx (N=1 ratio %.2f), %.3fs per speaker",
                   c.speakers, all.batched_median, all.sequential_median, all.speedup, one.speedup,
                   all.amortized_seconds);
    return o;
}

Outcome efficacy(const AggregateRow& nanovoice) {
    Outcome o{10, "end-to-end efficacy", false, {}, 0.0};
    o.passed = nanovoice.wins >= 7;
    std::string per;
    for (std::size_t n = 0; n < nanovoice.speaker_similarity.size(); ++n)
        per += fmt(" %.3f>%.3f", nanovoice.speaker_similarity[n], nanovoice.speaker_baseline[n]);
    o.detail = fmt("%d of %zu speakers above the unadapted baseline (3-seed means, adapted>baseline:%s)", nanovoice.wins,
                   nanovoice.speaker_similarity.size(), per.c_str());
    return o;
}

Outcome serialization(const ExperimentConfig& c, const ScoreNet& net) {
    Outcome o{11, "serialization", false, {}, 0.0};
    const auto dir = c.out / "serialization";
    std::filesystem::create_directories(dir);
    auto targets = target_speakers(c);
    const SpeakerBatch refs = reference_batch(c, targets, 1);
    AdaptOptions opt;
    opt.iterations = 3;
    opt.lr = c.lr;
    opt.seed = 1;
    const AdaptResult adapted = adapt_batched(net, make_bank_for(net, c.adapter, refs, 1), refs, opt);
    const auto bases = net.adapted_base_weights();

    save_bank(adapted.bank, dir / "bank.nvbk");
    save_net(net, dir / "net.nvsn");
    const auto bank_bytes = read_file_bytes(dir / "bank.nvbk");
    const auto net_bytes = read_file_bytes(dir / "net.nvsn");
    bool identical = serialize_bank(load_bank(dir / "bank.nvbk", bases)) == bank_bytes &&
                     serialize_net(load_net(dir / "net.nvsn")) == net_bytes &&
                     bank_bytes == serialize_bank(adapted.bank) && net_bytes == serialize_net(net);

    int rejected = 0, attempts = 0;
    AdapterBank held_bank = adapted.bank;
    ScoreNet held_net = net;
    auto corrupt = [&](std::vector<unsigned char> bytes, std::size_t i) {
        bytes[i] ^= 0x5A;
        return bytes;
    };
    for (std::size_t i = 0; i < 40; ++i) {
        ++attempts;
        try {
            held_bank = deserialize_bank(corrupt(bank_bytes, i), bases);
        } catch (const Error&) {
            ++rejected;
        }
    }
    for (std::size_t i = 0; i < 64; ++i) {
        ++attempts;
        try {
            held_net = deserialize_net(corrupt(net_bytes, i));
        } catch (const Error&) {
            ++rejected;
        }
    }
    const bool intact = serialize_bank(held_bank) == bank_bytes && serialize_net(held_net) == net_bytes;
    o.passed = identical && rejected == attempts && intact;
    o.detail = fmt("round trips byte-identical: %s; corrupted headers rejected %d/%d; held state intact: %s",
                   identical ? "yes" : "no", rejected, attempts, intact ? "yes" : "no");
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::string out = "acceptance_out";
    std::string config_path;
    app.add_option("--out", out, "output directory");
    app.add_option("--config", config_path, "experiment config (defaults otherwise)");
    CLI11_PARSE(app, argc, argv);

    ExperimentConfig c = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
    c.out = out;
    std::filesystem::create_directories(c.out);
    write_text_atomic(c.out / "config.txt", config_text(c));

    std::vector<Outcome> outcomes;
    nlohmann::json reports;
    auto report = [&](Outcome o) {
        std::printf("%s  %2d %s: %s\n", o.passed ? "PASS" : "FAIL", o.id, o.name.c_str(), o.detail.c_str());
        std::fflush(stdout);
        outcomes.push_back(std::move(o));
    };
    auto guarded = [&](int id, const std::string& name, auto fn) {
        const auto t0 = std::chrono::steady_clock::now();
        try {
            Outcome o = fn();
            if (o.seconds == 0.0) o.seconds = elapsed(t0);
            report(std::move(o));
        } catch (const std::exception& e) {
            report(Outcome{id, name, false, std::string("error: ") + e.what(), elapsed(t0)});
        }
    };

    guarded(1, "gradient exactness", [] { return gradient_exactness(); });
    guarded(4, "parameter accounting", [&] { return parameter_accounting(c); });

    std::fprintf(stderr, "pretraining the base network (%d iterations)\n", c.pretrain.iterations);
    const auto t0 = std::chrono::steady_clock::now();
    PretrainOutcome pre = pretrain_net(c);
    save_net(pre.net, c.resolved_net_path());
    reports["pretrain"] = {{"seconds", elapsed(t0)}, {"final_smoothed_loss", pre.curve.smoothed.back()}};

    guarded(2, "function preservation at init", [&] { return function_preservation(c, pre.net); });
    guarded(3, "batched equals sequential", [&] { return batched_equals_sequential(c, pre.net); });
    guarded(11, "serialization", [&] { return serialization(c, pre.net); });
    guarded(9, "batched adaptation speedup", [&] { return efficiency(c, pre.net, reports); });

    ExperimentRunner runner(c, pre.net);
    runner.set_log(&std::cerr);
    AggregateRow nanovoice;
    bool have_nanovoice = false;
    guarded(5, "sharing ablation ordering", [&] { return sharing_ablation(runner, reports); });
    guarded(6, "scale matrix ablation", [&] {
        Outcome o = scale_ablation(runner, reports, nanovoice);
        have_nanovoice = true;
        return o;
    });
    guarded(7, "batch size robustness", [&] { return batch_size_robustness(runner, reports); });
    guarded(8, "frozen B analysis", [&] { return frozen_b(runner, reports); });
    guarded(10, "end-to-end efficacy", [&] {
        if (!have_nanovoice) nanovoice = runner.run_seeds("NanoVoice", c.adapter, c.speakers);
        return efficacy(nanovoice);
    });

    std::sort(outcomes.begin(), outcomes.end(), [](const Outcome& a, const Outcome& b) { return a.id < b.id; });
    nlohmann::json j;
    int failed = 0;
    std::printf("\nsummary\n");
    for (const auto& o : outcomes) {
        j["criteria"].push_back({{"id", o.id}, {"name", o.name}, {"passed", o.passed}, {"detail", o.detail},
                                 {"seconds", o.seconds}});
        std::printf("%s  %2d %s\n", o.passed ? "PASS" : "FAIL", o.id, o.name.c_str());
        failed += !o.passed;
    }
    j["reports"] = reports;
    write_text_atomic(c.out / "acceptance.json", j.dump(2) + "\n");
    std::printf("%zu criteria, %d failed\n", outcomes.size(), failed);
    return failed == 0 ? 0 : 1;
}
