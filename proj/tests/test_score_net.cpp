#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "nanovoice/evaluation.hpp"
#include "nanovoice/gradcheck.hpp"
#include "nanovoice/pretrain.hpp"
#include "nanovoice/score_net.hpp"

using namespace nanovoice;

namespace {

struct Batch {
    std::vector<std::vector<int>> content;
    Tensor mask;
    ScoreInput in;
};

Batch random_batch(const ScoreNetConfig& nc, const std::vector<std::size_t>& lengths, std::size_t L, RngStream& s) {
    Batch b;
    const std::size_t N = lengths.size();
    b.mask = Tensor({N, 1, L});
    for (std::size_t n = 0; n < N; ++n) {
        std::vector<int> codes(L, 0);
        for (std::size_t j = 0; j < lengths[n]; ++j) {
            codes[j] = static_cast<int>(s.below(nc.content_codes));
            b.mask(n, 0, j) = 1.0;
        }
        b.content.push_back(codes);
        b.in.t.push_back(0.05 + 0.9 * s.uniform());
    }
    b.in.x_t = Tensor({N, nc.mel_bins, L});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t f = 0; f < nc.mel_bins; ++f)
            for (std::size_t j = 0; j < lengths[n]; ++j) b.in.x_t(n, f, j) = s.normal();
    return b;
}

Tensor forward(const ScoreNet& net, const AdapterBank* bank, Batch& b) {
    b.in.content = &b.content;
    b.in.mask = &b.mask;
    return score_forward(net, bank, b.in);
}

ScoreNetConfig small_config() {
    ScoreNetConfig c;
    c.hidden = 16;
    c.ff_hidden = 24;
    return c;
}

std::vector<AdapterConfig> every_config(int N) {
    std::vector<AdapterConfig> out;
    for (auto c : gradcheck_configs(false)) {
        c.num_speakers = N;
        out.push_back(c);
    }
    return out;
}

}  // namespace

TEST(ScoreForward, OutputShapeEqualsInputShape) {
    RngStream s{1, 0, 0};
    const ScoreNet net = make_score_net(small_config(), s);
    Batch b = random_batch(net.config, {10, 7}, 10, s);
    EXPECT_EQ(forward(net, nullptr, b).shape(), (Shape{2, 16, 10}));
}

TEST(ScoreForward, BankAtInitReproducesBaseOutput) {
    RngStream s{2, 0, 0};
    const ScoreNet net = make_score_net(small_config(), s);
    Batch b = random_batch(net.config, {12, 9, 12}, 12, s);
    const Tensor base = forward(net, nullptr, b);
    for (const auto& config : every_config(3)) {
        RngStream init{3, 0, 0};
        const AdapterBank bank = init_bank(config, net.adapted_base_weights(), init);
        EXPECT_LE(max_abs_diff(forward(net, &bank, b), base), 1e-12) << config_label(config);
    }
}

TEST(ScoreForward, PermutingSpeakersPermutesOutputs) {
    RngStream s{4, 0, 0};
    const ScoreNet net = make_score_net(small_config(), s);
    AdapterConfig cfg;
    cfg.mode = SharingMode::batchwise;
    cfg.num_speakers = 3;
    AdapterBank bank = init_bank(cfg, net.adapted_base_weights(), s);
    for (auto& l : bank.layers) l.A = randn(s, l.A.shape()) * 0.05;
    Batch b = random_batch(net.config, {8, 11, 6}, 11, s);
    const Tensor y = forward(net, &bank, b);

    const std::vector<std::size_t> perm{2, 0, 1};
    AdapterBank pbank = bank;
    Batch pb = b;
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t l = 0; l < bank.layers.size(); ++l) {
            pbank.layers[l].A.set_slice(i, bank.layers[l].A.slice(perm[i]));
            pbank.layers[l].B.set_slice(i, bank.layers[l].B.slice(perm[i]));
            pbank.layers[l].m.set_slice(i, bank.layers[l].m.slice(perm[i]));
        }
        pb.content[i] = b.content[perm[i]];
        pb.mask.set_slice(i, b.mask.slice(perm[i]));
        pb.in.x_t.set_slice(i, b.in.x_t.slice(perm[i]));
        pb.in.t[i] = b.in.t[perm[i]];
    }
    const Tensor py = forward(net, &pbank, pb);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_LE(max_abs_diff(py.slice(i), y.slice(perm[i])), 1e-12);
}

TEST(ScoreForward, PaddedFramesDoNotAffectValidOutputs) {
    RngStream s{5, 0, 0};
    const ScoreNet net = make_score_net(small_config(), s);
    Batch b = random_batch(net.config, {7}, 7, s);
    const Tensor short_out = forward(net, nullptr, b);

    Batch padded = b;
    padded.mask = Tensor({1, 1, 12});
    padded.content[0].resize(12, 3);
    padded.in.x_t = Tensor({1, 16, 12});
    for (std::size_t f = 0; f < 16; ++f)
        for (std::size_t j = 0; j < 12; ++j) padded.in.x_t(0, f, j) = j < 7 ? b.in.x_t(0, f, j) : 50.0 * s.normal();
    for (std::size_t j = 0; j < 7; ++j) padded.mask(0, 0, j) = 1.0;
    const Tensor long_out = forward(net, nullptr, padded);
    for (std::size_t f = 0; f < 16; ++f) {
        for (std::size_t j = 0; j < 7; ++j) EXPECT_EQ(long_out(0, f, j), short_out(0, f, j));
        for (std::size_t j = 7; j < 12; ++j) EXPECT_EQ(long_out(0, f, j), 0.0);
    }
}

TEST(ScoreForward, ZeroNetworkOutputGivesGaussianPriorScore) {
    RngStream s{6, 0, 0};
    ScoreNet net = make_score_net(small_config(), s);
    net.w_out.fill(0.0);
    net.b_out.fill(0.0);
    Batch b = random_batch(net.config, {9, 9}, 9, s);
    const Tensor y = forward(net, nullptr, b);
    for (std::size_t n = 0; n < 2; ++n) {
        const double lam = lambda_of(net.config.schedule, b.in.t[n]);
        const double D = (1.0 - lam) + lam * net.config.data_std * net.config.data_std;
        for (std::size_t f = 0; f < 16; ++f)
            for (std::size_t j = 0; j < 9; ++j) EXPECT_NEAR(y(n, f, j), -b.in.x_t(n, f, j) / D, 1e-14);
    }
}

TEST(ScoreForward, SpeakerCountMismatchIsIncompatible) {
    RngStream s{7, 0, 0};
    const ScoreNet net = make_score_net(small_config(), s);
    AdapterConfig cfg;
    cfg.num_speakers = 3;
    const AdapterBank bank = init_bank(cfg, net.adapted_base_weights(), s);
    Batch b = random_batch(net.config, {8, 8}, 8, s);
    EXPECT_THROW(forward(net, &bank, b), CompatibilityError);
}

TEST(ScoreForward, MalformedInputsThrow) {
    RngStream s{8, 0, 0};
    const ScoreNet net = make_score_net(small_config(), s);
    Batch b = random_batch(net.config, {8, 8}, 8, s);
    Batch bad_t = b;
    bad_t.in.t.pop_back();
    EXPECT_THROW(forward(net, nullptr, bad_t), DimensionError);
    Batch bad_f = b;
    bad_f.in.x_t = Tensor({2, 15, 8});
    EXPECT_THROW(forward(net, nullptr, bad_f), DimensionError);
}

TEST(ScoreBackward, AdapterGradientsMatchFiniteDifferences) {
    GradCheckOptions opt;
    opt.seed = 99;
    for (const auto& config : gradcheck_configs(false)) {
        RngStream s{opt.seed, 1, 0};
        const auto c = check_network_instance(config, s, opt);
        EXPECT_LE(c.max_rel_error, 1e-4) << config_label(config) << " " << c.param;
    }
}

TEST(ScoreBackward, BaseGradientsMatchFiniteDifferences) {
    RngStream s{9, 0, 0};
    ScoreNet net = make_score_net(gradcheck_net_config(), s);
    Batch b = random_batch(net.config, {5, 3}, 5, s);
    b.in.speaker = {1, -1};
    b.in.content = &b.content;
    b.in.mask = &b.mask;
    const Tensor eps = randn(s, {2, 4, 5});
    std::vector<double> sigma;
    for (double t : b.in.t) sigma.push_back(sigma_of(net.config.schedule, t));
    auto loss = [&] {
        const BatchLoss bl = batch_score_loss(score_forward(net, nullptr, b.in), eps, sigma, b.mask);
        return bl.per_reference[0] + bl.per_reference[1];
    };
    ForwardCache cache;
    const Tensor score = score_forward(net, nullptr, b.in, &cache);
    const BatchLoss bl = batch_score_loss(score, eps, sigma, b.mask);
    NetGradients g = zero_net_gradients(net);
    score_backward(net, nullptr, b.in, cache, bl.d_score, nullptr, &g);
    auto params = net.named_params();
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& v = *params[p].second;
        Tensor numeric(v.shape());
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double keep = v[i];
            v[i] = keep + 1e-5;
            const double up = loss();
            v[i] = keep - 1e-5;
            const double down = loss();
            v[i] = keep;
            numeric[i] = (up - down) / 2e-5;
        }
        const double scale = max_abs(numeric);
        for (std::size_t i = 0; i < v.size(); ++i)
            EXPECT_LE(relative_error(g.grads[p][i], numeric[i], scale), 1e-4) << params[p].first << "[" << i << "]";
    }
}

TEST(NetFile, SaveLoadSaveIsByteIdentical) {
    RngStream s{10, 0, 0};
    ScoreNetConfig cfg = small_config();
    cfg.data_std = 0.8;
    const ScoreNet net = make_score_net(cfg, s);
    const auto bytes = serialize_net(net);
    const ScoreNet back = deserialize_net(bytes);
    EXPECT_EQ(back, net);
    EXPECT_EQ(serialize_net(back), bytes);
}

TEST(NetFile, CorruptedHeaderAndTruncationRejected) {
    RngStream s{11, 0, 0};
    const auto bytes = serialize_net(make_score_net(small_config(), s));
    for (std::size_t i = 0; i < 64; ++i) {
        auto bad = bytes;
        bad[i] ^= 0x10;
        EXPECT_THROW(deserialize_net(bad), FormatError) << "byte " << i;
    }
    auto cut = bytes;
    cut.resize(bytes.size() / 2);
    EXPECT_THROW(deserialize_net(cut), FormatError);
    EXPECT_THROW(load_net("/nonexistent/net.nvsn"), FileError);
}

TEST(Pretrain, ZeroIterationsLeavesNetUnchanged) {
    RngStream s{12, 0, 0};
    ScoreNet net = make_score_net(small_config(), s);
    const ScoreNet before = net;
    PretrainOptions opt;
    opt.iterations = 0;
    const auto r = pretrain(net, ToyTaskConfig{}, gen_speakers(ToyTaskConfig{}, 4, 1), opt);
    EXPECT_TRUE(r.losses.empty());
    EXPECT_EQ(net, before);
}

TEST(Pretrain, SameSeedsGiveIdenticalParameters) {
    const ToyTaskConfig task;
    const auto speakers = gen_speakers(task, 4, 2);
    PretrainOptions opt;
    opt.iterations = 20;
    opt.seed = 5;
    RngStream a{13, 0, 0}, b{13, 0, 0};
    ScoreNet na = make_score_net(small_config(), a), nb = make_score_net(small_config(), b);
    const auto ra = pretrain(na, task, speakers, opt);
    const auto rb = pretrain(nb, task, speakers, opt);
    EXPECT_EQ(na, nb);
    EXPECT_EQ(ra.losses, rb.losses);
}

TEST(Pretrain, RejectsEmptyAndOversizedDatasets) {
    RngStream s{14, 0, 0};
    ScoreNet net = make_score_net(small_config(), s);
    EXPECT_THROW(pretrain(net, ToyTaskConfig{}, {}, PretrainOptions{}), ConfigError);
    EXPECT_THROW(pretrain(net, ToyTaskConfig{}, gen_speakers(ToyTaskConfig{}, 9, 1), PretrainOptions{}), ConfigError);
}

TEST(Pretrain, DivergenceIsReported) {
    RngStream s{15, 0, 0};
    ScoreNet net = make_score_net(small_config(), s);
    net.w_in(0, 0) = std::nan("");
    PretrainOptions opt;
    opt.iterations = 3;
    EXPECT_THROW(pretrain(net, ToyTaskConfig{}, gen_speakers(ToyTaskConfig{}, 2, 1), opt), Error);
}

class PretrainedNet : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        RngStream s{16, 0, 0};
        net_ = new ScoreNet(make_score_net(ScoreNetConfig{}, s));
        speakers_ = new std::vector<ToySpeaker>(gen_speakers(ToyTaskConfig{}, 8, 7));
        PretrainOptions opt;
        opt.iterations = 2000;
        result_ = new PretrainResult(pretrain(*net_, ToyTaskConfig{}, *speakers_, opt));
    }
    static void TearDownTestSuite() {
        delete net_;
        delete speakers_;
        delete result_;
    }
    static ScoreNet* net_;
    static std::vector<ToySpeaker>* speakers_;
    static PretrainResult* result_;
};

ScoreNet* PretrainedNet::net_ = nullptr;
std::vector<ToySpeaker>* PretrainedNet::speakers_ = nullptr;
PretrainResult* PretrainedNet::result_ = nullptr;

TEST_F(PretrainedNet, SmoothedLossHalves) {
    ASSERT_EQ(result_->smoothed.size(), 2000u);
    EXPECT_LT(result_->smoothed.back(), 0.5 * result_->smoothed.front());
}

// Reverse diffusion conditioned on pretraining speaker indices through the embedding table.
Tensor conditional_samples(const ScoreNet& net, const SampleRequest& req, const std::vector<int>& speaker,
                           std::vector<RngStream> streams, int steps) {
    const std::size_t N = req.lengths.size(), F = net.config.mel_bins, L = req.mask.dim(2);
    ScoreInput in;
    in.content = &req.content;
    in.mask = &req.mask;
    in.speaker = speaker;
    in.x_t = Tensor({N, F, L});
    for (std::size_t n = 0; n < N; ++n) in.x_t.set_slice(n, randn(streams[n], {F, L}));
    for (int i = 0; i < steps; ++i) {
        const double t = 1.0 - static_cast<double>(i) / steps;
        in.t.assign(N, t);
        Tensor z({N, F, L});
        if (i + 1 < steps)
            for (std::size_t n = 0; n < N; ++n) z.set_slice(n, randn(streams[n], {F, L}));
        in.x_t = reverse_step(net.config.schedule, in.x_t, score_forward(net, nullptr, in), t, 1.0 / steps, z);
    }
    return in.x_t;
}

TEST_F(PretrainedNet, SampleSpectrumMatchesTrainingSpeakers) {
    // Samples without a speaker reproduce the mean frame spectrum of the training mix.
    const ToyTaskConfig task;
    const std::size_t F = task.mel_bins, S = speakers_->size(), draws = 256, len = 24;
    std::vector<double> data_mean(F, 0.0), gen_mean(F, 0.0);
    for (std::size_t i = 0; i < draws; ++i) {
        ToySpeaker sp = (*speakers_)[i % S];
        sp.speaker_id = 1000 + i;
        const auto ref = make_reference_batch(task, {sp}, {len}, 3);
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t j = 0; j < len; ++j) data_mean[f] += ref.x0(0, f, j) / (draws * len);
    }
    std::vector<std::uint64_t> ids(draws);
    for (std::size_t i = 0; i < draws; ++i) ids[i] = i;
    const SampleRequest req = make_sample_request(task, std::vector<std::size_t>(draws, len), ids, 4);
    const Tensor gen = generate(*net_, nullptr, req, 50, generation_streams(ids, 4, 0));
    for (std::size_t n = 0; n < draws; ++n)
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t j = 0; j < len; ++j) gen_mean[f] += gen(n, f, j) / (draws * len);
    double sq = 0.0;
    for (std::size_t f = 0; f < F; ++f) sq += std::pow(gen_mean[f] - data_mean[f], 2);
    EXPECT_LT(std::sqrt(sq / F), 0.15);
}

TEST_F(PretrainedNet, SpeakerEmbeddingSelectsVoice) {
    const ToyTaskConfig task;
    const std::size_t N = speakers_->size();
    std::vector<std::uint64_t> ids;
    std::vector<int> speaker;
    for (std::size_t n = 0; n < N; ++n) {
        ids.push_back((*speakers_)[n].speaker_id);
        speaker.push_back(static_cast<int>(n));
    }
    const SampleRequest req = make_sample_request(task, std::vector<std::size_t>(N, 36), ids, 5);
    const Tensor gen = conditional_samples(*net_, req, speaker, generation_streams(ids, 5, 0), 50);
    int correct = 0;
    for (std::size_t n = 0; n < N; ++n) {
        const auto sig = signature_of(gen.slice(n));
        std::size_t best = 0;
        double best_sim = -2.0;
        for (std::size_t m = 0; m < N; ++m) {
            const double sim = similarity(sig, expected_signature(task, (*speakers_)[m], req.content[n]));
            if (sim > best_sim) best_sim = sim, best = m;
        }
        correct += best == n;
    }
    EXPECT_GE(correct, 7);
}
