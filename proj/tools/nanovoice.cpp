#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "nanovoice/experiments.hpp"

using namespace nanovoice;

namespace {

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string mode;
    bool no_scale = false;
    bool no_norm = false;
    bool freeze_b = false;
    std::optional<std::size_t> speakers;
    std::optional<int> iters;
};

void add_common(CLI::App* cmd, Flags& f) {
    cmd->add_option("--config", f.config, "flat key = value config file");
    cmd->add_option("--seed", f.seed, "run seed (replaces the configured seed list)");
    cmd->add_option("--out", f.out, "output directory");
    cmd->add_option("--mode", f.mode, "batchwise | shared-b | shared-a | shared-both");
    cmd->add_flag("--no-scale", f.no_scale, "disable the scale matrix");
    cmd->add_flag("--no-norm", f.no_norm, "disable column normalization");
    cmd->add_flag("--freeze-b", f.freeze_b, "keep the shared B at its initial value");
    cmd->add_option("--speakers", f.speakers, "number of target speakers");
    cmd->add_option("--iters", f.iters, "adaptation iterations");
}

ExperimentConfig resolve(const Flags& f) {
    ExperimentConfig c = f.config.empty() ? ExperimentConfig{} : load_config(f.config);
    if (f.seed) c.seeds = {*f.seed};
    if (!f.out.empty()) c.out = f.out;
    if (!f.mode.empty()) c.adapter.mode = parse_sharing_mode(f.mode);
    if (f.no_scale) {
        c.adapter.scale_enabled = false;
        c.adapter.normalization_enabled = false;
    }
    if (f.no_norm) c.adapter.normalization_enabled = false;
    if (f.freeze_b) c.adapter.freeze_B = true;
    if (f.speakers) {
        c.speakers = *f.speakers;
        std::erase_if(c.sweep_sizes, [&](std::size_t n) { return n < 1 || c.speakers % n != 0; });
        if (c.sweep_sizes.empty()) c.sweep_sizes = {c.speakers};
    }
    if (f.iters) c.iterations = *f.iters;
    c.validate();
    std::filesystem::create_directories(c.out);
    write_text_atomic(c.out / "config.txt", config_text(c));
    return c;
}

void print_rows(const std::vector<AggregateRow>& rows) {
    std::printf("%-18s %-12s %8s %10s %10s %10s %5s %9s\n", "row", "sharing", "params", "sim", "min_sim", "baseline",
                "wins", "seconds");
    for (const auto& r : rows)
        std::printf("%-18s %-12s %8lld %10.4f %10.4f %10.4f %5d %9.1f\n", r.label.c_str(), to_string(r.config.mode).c_str(),
                    static_cast<long long>(r.per_speaker_params.rounded()), r.similarity, r.min_similarity, r.baseline,
                    r.wins, r.seconds);
}

int run_suite(const Flags& f, SuiteResult (*suite)(ExperimentRunner&), const std::string& name) {
    const ExperimentConfig c = resolve(f);
    ExperimentRunner runner(c, obtain_net(c));
    runner.set_log(&std::cerr);
    const SuiteResult r = suite(runner);
    write_report(c.out, name, r.report, r.rows);
    print_rows(r.rows);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Batched speaker adaptation with shared low-rank adapters on a toy mel task"};
    app.require_subcommand(1);
    Flags f;

    auto* pretrain_cmd = app.add_subcommand("pretrain", "train the base score network and save it");
    auto* adapt_cmd = app.add_subcommand("adapt", "adapt the first --speakers targets as one batch");
    auto* sample_cmd = app.add_subcommand("sample", "generate one mel per adapted speaker");
    auto* eval_cmd = app.add_subcommand("eval", "similarity of samples to references, with a baseline column");
    auto* count_cmd = app.add_subcommand("count-params", "per-speaker trainable parameter counts");
    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every adapter gradient");
    auto* sharing_cmd = app.add_subcommand("ablate-sharing", "the four sharing modes without the scale matrix");
    auto* scale_cmd = app.add_subcommand("ablate-scale", "scale matrix and normalization ablation");
    auto* sweep_cmd = app.add_subcommand("sweep-batch", "NanoVoice at each configured batch size");
    auto* frozen_cmd = app.add_subcommand("frozen-b", "trainable versus frozen shared B");
    auto* bench_cmd = app.add_subcommand("bench", "batched versus sequential adaptation time");
    auto* groups_cmd = app.add_subcommand("groups", "same-cluster versus mixed-cluster speaker groups");
    int instances = 20;
    bool inject = false;
    grad_cmd->add_option("--instances", instances, "random instances per configuration");
    grad_cmd->add_flag("--inject-dm-error", inject, "flip the sign of dm (test hook)");
    for (auto* cmd : {pretrain_cmd, adapt_cmd, sample_cmd, eval_cmd, count_cmd, grad_cmd, sharing_cmd, scale_cmd,
                      sweep_cmd, frozen_cmd, bench_cmd, groups_cmd})
        add_common(cmd, f);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*pretrain_cmd) {
            const ExperimentConfig c = resolve(f);
            const PretrainOutcome p = pretrain_net(c);
            save_net(p.net, c.resolved_net_path());
            nlohmann::json j{{"losses", p.curve.losses}, {"smoothed", p.curve.smoothed}};
            write_text_atomic(c.out / "pretrain.json", j.dump() + "\n");
            std::printf("saved %s (final smoothed loss %.4f)\n", c.resolved_net_path().c_str(), p.curve.smoothed.back());
        } else if (*adapt_cmd) {
            ExperimentConfig c = resolve(f);
            const RunReport r = cmd_adapt(c, obtain_net(c), c.seeds.front(), c.speakers);
            std::printf("adapted %zu speakers: loss %.4f -> %.4f in %.2fs, %s params per speaker\n",
                        r.speaker_ids.size(), r.mean_loss(0), r.tail_loss(50), r.wall_seconds,
                        r.per_speaker_params.str().c_str());
        } else if (*sample_cmd) {
            const ExperimentConfig c = resolve(f);
            const auto s = cmd_sample(c, obtain_net(c), c.seeds.front());
            std::printf("wrote %zu samples to %s\n", s.size(), (c.out / "samples").c_str());
        } else if (*eval_cmd) {
            const ExperimentConfig c = resolve(f);
            const EvalResult r = cmd_eval(c, obtain_net(c), c.seeds.front());
            for (std::size_t n = 0; n < r.speaker_ids.size(); ++n)
                std::printf("speaker %llu  similarity %.4f  baseline %.4f\n",
                            static_cast<unsigned long long>(r.speaker_ids[n]), r.similarity[n], r.baseline[n]);
        } else if (*count_cmd) {
            const ExperimentConfig c = resolve(f);
            const auto j = cmd_count_params(c);
            write_text_atomic(c.out / "count_params.json", j.dump(2) + "\n");
            for (const char* block : {"toy_sites", "aggregate_dims"}) {
                std::printf("%s\n", block);
                for (const auto& row : j[block])
                    std::printf("  %-20s N=%-3d %10lld  (%s)\n", row["label"].get<std::string>().c_str(),
                                row["config"]["speakers"].get<int>(), row["rounded"].get<long long>(),
                                row["exact"].get<std::string>().c_str());
            }
        } else if (*grad_cmd) {
            const ExperimentConfig c = resolve(f);
            GradCheckOptions opt;
            opt.instances = instances;
            opt.network_instances = instances;
            opt.seed = c.seeds.front();
            opt.inject_dm_sign_error = inject;
            const GradCheckReport r = run_gradcheck(opt);
            nlohmann::json j = nlohmann::json::array();
            for (const auto& cs : r.cases) {
                j.push_back({{"config", cs.config}, {"level", cs.level}, {"instance", cs.instance}, {"param", cs.param},
                             {"max_rel_error", cs.max_rel_error}, {"informational", cs.informational},
                             {"passed", cs.passed}});
                if (!cs.passed)
                    std::printf("%s %s %s instance %d: %s rel error %.3g\n", cs.informational ? "INFO" : "FAIL",
                                cs.config.c_str(), cs.level.c_str(), cs.instance, cs.param.c_str(), cs.max_rel_error);
            }
            write_text_atomic(c.out / "gradcheck.json", j.dump(2) + "\n");
            std::printf("%zu cases, %zu failures\n", r.cases.size(), r.failures().size());
            return r.passed() ? 0 : 1;
        } else if (*sharing_cmd) {
            return run_suite(f, cmd_ablation_sharing, "ablate_sharing");
        } else if (*scale_cmd) {
            return run_suite(f, cmd_ablation_scale, "ablate_scale");
        } else if (*sweep_cmd) {
            return run_suite(f, cmd_batchsize_sweep, "sweep_batch");
        } else if (*frozen_cmd) {
            return run_suite(f, cmd_frozen_b, "frozen_b");
        } else if (*bench_cmd) {
            const ExperimentConfig c = resolve(f);
            const ScoreNet net = obtain_net(c);
            nlohmann::json j;
            for (std::size_t n : {std::size_t{1}, c.speakers}) {
                const BenchResult b = cmd_bench(c, net, n);
                j["N=" + std::to_string(n)] = b.to_json();
                std::printf("N=%zu  batched %.2fs  sequential %.2fs  speedup %.2fx  %.2fs per speaker\n", n,
                            b.batched_median, b.sequential_median, b.speedup, b.amortized_seconds);
            }
            write_text_atomic(c.out / "bench.json", j.dump(2) + "\n");
        } else if (*groups_cmd) {
            const ExperimentConfig c = resolve(f);
            const SuiteResult r = cmd_groups(c, obtain_net(c));
            write_report(c.out, "groups", r.report, r.rows);
            print_rows(r.rows);
        }
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
