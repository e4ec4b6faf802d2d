#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "nanovoice/toy_task.hpp"

using namespace nanovoice;

namespace {

double loop_cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return ab / std::sqrt(aa * bb);
}

Tensor render_fresh(const ToyTaskConfig& cfg, const ToySpeaker& sp, std::size_t length, std::uint64_t seed,
                    std::vector<int>* content = nullptr) {
    RngStream s{seed, sp.speaker_id, 1};
    const auto codes = gen_content(cfg, length, s);
    if (content) *content = codes;
    return render(cfg, sp, length, codes, s);
}

}  // namespace

TEST(GenSpeakers, SameSeedGivesIdenticalSpeakers) {
    const ToyTaskConfig cfg;
    EXPECT_EQ(gen_speakers(cfg, 12, 5), gen_speakers(cfg, 12, 5));
    EXPECT_NE(gen_speakers(cfg, 12, 5), gen_speakers(cfg, 12, 6));
}

TEST(GenSpeakers, FortyDistinctIds) {
    const auto sp = gen_speakers(ToyTaskConfig{}, 40, 1);
    std::set<std::uint64_t> ids;
    for (const auto& s : sp) ids.insert(s.speaker_id);
    EXPECT_EQ(ids.size(), 40u);
}

TEST(GenSpeakers, SignaturesAreUnitNorm) {
    for (const auto& s : gen_speakers(ToyTaskConfig{}, 30, 2)) EXPECT_NEAR(l2_norm(s.signature), 1.0, 1e-12);
}

TEST(GenSpeakers, PairwiseCosineBelowBoundOverHundredSpeakers) {
    const ToyTaskConfig cfg;
    const auto sp = gen_speakers(cfg, 100, 3);
    double worst = -1.0;
    for (std::size_t i = 0; i < sp.size(); ++i)
        for (std::size_t j = i + 1; j < sp.size(); ++j) worst = std::max(worst, loop_cosine(sp[i].signature, sp[j].signature));
    EXPECT_LT(worst, cfg.max_cosine);
}

TEST(GenSpeakers, SpeakerDependsOnlyOnIdAndSeed) {
    const ToyTaskConfig cfg;
    const auto a = gen_speakers(cfg, 1, 9, 7);
    EXPECT_EQ(a[0], make_speaker(cfg, 7, 9));
}

TEST(GenSpeakers, ZeroCountThrows) { EXPECT_THROW(gen_speakers(ToyTaskConfig{}, 0, 1), ConfigError); }

TEST(GenSpeakers, ClusteredSpeakersSitCloserWithinCluster) {
    const ToyTaskConfig cfg;
    const auto sp = gen_clustered_speakers(cfg, 16, 2, 4);
    double within = 0.0, across = 0.0;
    int nw = 0, na = 0;
    for (std::size_t i = 0; i < sp.size(); ++i)
        for (std::size_t j = i + 1; j < sp.size(); ++j) {
            const double c = similarity(sp[i].signature, sp[j].signature);
            if (i % 2 == j % 2)
                within += c, ++nw;
            else
                across += c, ++na;
        }
    EXPECT_GT(within / nw, across / na);
}

TEST(VoiceBasis, IsOrthonormal) {
    ToyTaskConfig cfg;
    cfg.voice_factors = 6;
    const auto b = voice_basis(cfg);
    ASSERT_EQ(b.size(), 6u);
    for (std::size_t i = 0; i < b.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j) EXPECT_NEAR(dot(b[i], b[j]), i == j ? 1.0 : 0.0, 1e-12);
}

TEST(VoiceBasis, ResidualZeroConfinesSignaturesToVoiceSpace) {
    ToyTaskConfig cfg;
    cfg.voice_residual = 0.0;
    const auto basis = voice_basis(cfg);
    for (const auto& sp : gen_speakers(cfg, 10, 8)) {
        double in_span = 0.0;
        for (const auto& b : basis) in_span += std::pow(dot(sp.signature, b), 2);
        EXPECT_NEAR(in_span, 1.0, 1e-12);
    }
}

TEST(Render, NoiselessFramesAreExactlyReproducible) {
    const ToyTaskConfig cfg;
    const auto sp = gen_speakers(cfg, 1, 10)[0];
    RngStream s1{1, 0, 0}, s2{2, 0, 0};
    const std::vector<int> codes(20, 3);
    EXPECT_EQ(render(cfg, sp, 20, codes, s1, 0.0), render(cfg, sp, 20, codes, s2, 0.0));
}

TEST(Render, FrameFollowsGeneratorFormula) {
    const ToyTaskConfig cfg;
    const auto sp = gen_speakers(cfg, 1, 11)[0];
    RngStream s{3, 0, 0};
    std::vector<int> codes{0, 1, 2, 3, 4, 5, 6, 7};
    const Tensor mel = render(cfg, sp, 8, codes, s, 0.0);
    for (std::size_t j = 0; j < 8; ++j) {
        const auto env = content_envelope(cfg, codes[j]);
        for (std::size_t f = 0; f < cfg.mel_bins; ++f) {
            const double mod = sp.mod_amplitude * std::sin(sp.mod_frequency * j + sp.mod_phase +
                                                           std::numbers::pi * f / static_cast<double>(cfg.mel_bins));
            EXPECT_NEAR(mel(f, j), cfg.gain * sp.signature[f] * env[f] + mod, 1e-12);
        }
    }
}

TEST(Render, TimeAverageApproachesSignatureTimesMeanEnvelope) {
    const ToyTaskConfig cfg;
    for (const auto& sp : gen_speakers(cfg, 20, 12)) {
        std::vector<int> codes;
        const Tensor mel = render_fresh(cfg, sp, 48, 13, &codes);
        EXPECT_GT(similarity(signature_of(mel), expected_signature(cfg, sp, codes)), 0.95);
    }
}

TEST(Render, DifferentSpeakersSameContentDiffer) {
    const ToyTaskConfig cfg;
    const auto sp = gen_speakers(cfg, 2, 14);
    const std::vector<int> codes(30, 2);
    RngStream a{4, 0, 0}, b{4, 0, 0};
    const Tensor m0 = render(cfg, sp[0], 30, codes, a), m1 = render(cfg, sp[1], 30, codes, b);
    EXPECT_GT(max_abs_diff(m0, m1), 10 * cfg.noise_sigma);
}

TEST(Render, RejectsShortLengthAndBadCodes) {
    const ToyTaskConfig cfg;
    const auto sp = gen_speakers(cfg, 1, 15)[0];
    RngStream s{5, 0, 0};
    EXPECT_THROW(render(cfg, sp, 3, {0, 0, 0}, s), DomainError);
    EXPECT_THROW(render(cfg, sp, 5, {0, 0, 0, 0}, s), DimensionError);
    EXPECT_THROW(render(cfg, sp, 4, {0, 0, 99, 0}, s), DomainError);
}

TEST(ReferenceBatch, EqualLengthsGiveFullMask) {
    const ToyTaskConfig cfg;
    const auto b = make_reference_batch(cfg, gen_speakers(cfg, 3, 16), {30, 30, 30}, 1);
    for (double v : b.mask.values()) EXPECT_EQ(v, 1.0);
}

TEST(ReferenceBatch, PaddedMaskAndShape) {
    const ToyTaskConfig cfg;
    const auto b = make_reference_batch(cfg, gen_speakers(cfg, 2, 17), {6, 10}, 1);
    EXPECT_EQ(b.x0.shape(), (Shape{2, 16, 10}));
    EXPECT_EQ(b.max_length(), 10u);
    for (std::size_t j = 0; j < 10; ++j) {
        EXPECT_EQ(b.mask(0, 0, j), j < 6 ? 1.0 : 0.0);
        EXPECT_EQ(b.mask(1, 0, j), 1.0);
    }
    for (std::size_t f = 0; f < 16; ++f)
        for (std::size_t j = 6; j < 10; ++j) EXPECT_EQ(b.x0(0, f, j), 0.0);
    EXPECT_EQ(b.content[0].size(), 10u);
}

TEST(ReferenceBatch, SliceEqualsSingleSpeakerRender) {
    const ToyTaskConfig cfg;
    const auto sp = gen_speakers(cfg, 4, 18);
    const std::vector<std::size_t> lengths{25, 40, 31, 28};
    const auto b = make_reference_batch(cfg, sp, lengths, 77);
    for (std::size_t n = 0; n < sp.size(); ++n) {
        RngStream s = reference_stream(77, sp[n].speaker_id);
        const auto codes = gen_content(cfg, lengths[n], s);
        const Tensor mel = render(cfg, sp[n], lengths[n], codes, s);
        for (std::size_t f = 0; f < cfg.mel_bins; ++f)
            for (std::size_t j = 0; j < lengths[n]; ++j) EXPECT_EQ(b.x0(n, f, j), mel(f, j));
    }
}

TEST(ReferenceBatch, SpeakerSliceIndependentOfBatchmates) {
    const ToyTaskConfig cfg;
    const auto sp = gen_speakers(cfg, 3, 19);
    const auto all = make_reference_batch(cfg, sp, {30, 40, 35}, 5);
    const auto one = make_reference_batch(cfg, {sp[1]}, {40}, 5);
    EXPECT_EQ(all.x0.slice(1), one.x0.slice(0));
    const auto sub = select(all, {2});
    const auto direct = make_reference_batch(cfg, {sp[2]}, {35}, 5);
    EXPECT_EQ(sub.x0, direct.x0);
    EXPECT_EQ(sub.content, direct.content);
}

TEST(ReferenceBatch, EmptyOrMismatchedInputThrows) {
    const ToyTaskConfig cfg;
    EXPECT_THROW(make_reference_batch(cfg, {}, {}, 1), ConfigError);
    EXPECT_THROW(make_reference_batch(cfg, gen_speakers(cfg, 2, 1), {30}, 1), DimensionError);
}

TEST(SignatureOf, ConstantMelGivesEqualEntries) {
    Tensor mel({4, 5});
    mel.fill(2.5);
    for (double v : signature_of(mel)) EXPECT_NEAR(v, 0.5, 1e-15);
}

TEST(SignatureOf, InvariantToPadding) {
    RngStream s{20, 0, 0};
    const Tensor mel = randn(s, {6, 8});
    Tensor padded({6, 13});
    for (std::size_t f = 0; f < 6; ++f)
        for (std::size_t j = 0; j < 13; ++j) padded(f, j) = j < 8 ? mel(f, j) : 100.0 * s.normal();
    std::vector<double> mask(13, 0.0);
    std::fill(mask.begin(), mask.begin() + 8, 1.0);
    EXPECT_EQ(signature_of(mel), signature_of(padded, mask));
}

TEST(SignatureOf, AllMaskedIsDegenerate) {
    EXPECT_THROW(signature_of(Tensor({4, 3}), std::vector<double>(3, 0.0)), DegenerateInputError);
    Tensor zero({4, 3});
    EXPECT_THROW(signature_of(zero), DegenerateInputError);
}

TEST(Similarity, TrivialValues) {
    const std::vector<double> v{1.0, -2.0, 0.5};
    EXPECT_NEAR(similarity(v, v), 1.0, 1e-15);
    EXPECT_EQ(similarity(std::vector<double>{1, 0}, std::vector<double>{0, 3}), 0.0);
    EXPECT_THROW(similarity(std::vector<double>{0, 0}, std::vector<double>{1, 0}), DegenerateInputError);
    EXPECT_THROW(similarity(std::vector<double>{1}, std::vector<double>{1, 0}), DimensionError);
}

TEST(Similarity, MatchesLoopOracle) {
    RngStream s{21, 0, 0};
    for (int i = 0; i < 100; ++i) {
        const Tensor a = randn(s, {16}), b = randn(s, {16});
        const std::vector<double> va(a.values().begin(), a.values().end()), vb(b.values().begin(), b.values().end());
        EXPECT_NEAR(similarity(va, vb), loop_cosine(va, vb), 1e-12);
    }
}

TEST(Similarity, RenderingIsCloserToOwnSpeakerThanToAnother) {
    const ToyTaskConfig cfg;
    int correct = 0;
    for (std::uint64_t pair = 0; pair < 100; ++pair) {
        const auto sp = gen_speakers(cfg, 2, 1000 + pair);
        std::vector<int> codes;
        const Tensor mel = render_fresh(cfg, sp[0], 30, pair, &codes);
        const auto sig = signature_of(mel);
        if (similarity(sig, expected_signature(cfg, sp[0], codes)) > similarity(sig, expected_signature(cfg, sp[1], codes)))
            ++correct;
    }
    EXPECT_GE(correct, 99);
}

TEST(Dataset, SaveLoadRoundTrip) {
    const auto dir = std::filesystem::temp_directory_path() / "nanovoice_ds_test";
    std::filesystem::create_directories(dir);
    const ToyTaskConfig cfg;
    const auto sp = gen_speakers(cfg, 1, 22)[0];
    std::vector<int> codes;
    const Tensor mel = render_fresh(cfg, sp, 30, 1, &codes);
    save_speaker_sample(sp, mel, codes, dir / "s.nvds");
    const auto back = load_speaker_sample(dir / "s.nvds");
    EXPECT_EQ(back.speaker, sp);
    EXPECT_EQ(back.mel, mel);
    EXPECT_EQ(back.content, codes);
    auto bytes = read_file_bytes(dir / "s.nvds");
    bytes[1] ^= 0x20;
    EXPECT_THROW(ByteReader(bytes, "NVDS"), FormatError);
    std::filesystem::remove_all(dir);
}
