#include "msvad/streaming.hpp"

#include "msvad/corpus.hpp"
#include "msvad/experiments.hpp"
#include "test_util.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

using namespace msvad;
using msvad::testutil::random_matrix;

namespace {

ModelConfig stream_config(AttractorMode mode = AttractorMode::Dual, int input_dim = 24) {
  ModelConfig c;
  c.d_model = 32;
  c.n_layers = 2;
  c.n_heads = 2;
  c.ffn_dim = 64;
  c.dropout = 0.0;
  c.attractor_mode = mode;
  c.saa_heads = mode == AttractorMode::Dual ? 4 : 2;
  c.causal = true;
  c.input_dim = input_dim;
  return c;
}

Checkpoint random_checkpoint(const ModelConfig& cfg, std::uint64_t seed) {
  Checkpoint ckpt;
  ckpt.model = cfg;
  Rng rng(seed);
  ckpt.params = init_params(cfg, rng);
  return ckpt;
}

}  // namespace

TEST_CASE("init_stream") {
  SECTION("rejects non-causal checkpoints") {
    ModelConfig cfg = stream_config();
    cfg.causal = false;
    Checkpoint ckpt = random_checkpoint(cfg, 1);
    REQUIRE_THROWS_AS(init_stream(ckpt, 0.5), std::invalid_argument);
  }

  SECTION("fresh sessions start empty and agree with each other") {
    Checkpoint ckpt = random_checkpoint(stream_config(), 2);
    StreamSession a = init_stream(ckpt, 0.5);
    StreamSession b = init_stream(ckpt, 0.5);
    REQUIRE(a.frames() == 0);
    REQUIRE(b.frames() == 0);
    REQUIRE(a.cache_bytes() == 0);
    Rng rng(3);
    Matrix f = random_matrix(1, ckpt.model.input_dim, rng);
    std::span<const double> row(f.row_ptr(0), static_cast<std::size_t>(f.cols));
    FrameDecision da = a.push_frame(row);
    FrameDecision db = b.push_frame(row);
    REQUIRE(da.p_main == db.p_main);
    REQUIRE(da.p_bg == db.p_bg);
  }

  SECTION("feature dimension mismatch throws and does not poison the state") {
    Checkpoint ckpt = random_checkpoint(stream_config(), 4);
    StreamSession s = init_stream(ckpt, 0.5);
    std::vector<double> bad(7, 0.0);
    REQUIRE_THROWS_AS(s.push_frame(bad), std::invalid_argument);
    std::vector<double> ok(static_cast<std::size_t>(ckpt.model.input_dim), 0.1);
    REQUIRE_NOTHROW(s.push_frame(ok));
  }
}

TEST_CASE("streaming equals the offline causal forward") {
  Rng rng(11);

  SECTION("first frame matches the one-frame offline forward") {
    for (auto mode : {AttractorMode::Single, AttractorMode::Dual}) {
      Checkpoint ckpt = random_checkpoint(stream_config(mode), 21);
      Matrix f = random_matrix(1, ckpt.model.input_dim, rng);
      Matrix offline = forward_probs(f, ckpt.model, ckpt.params);
      StreamSession s = init_stream(ckpt, 0.5);
      FrameDecision d = s.push_frame({f.row_ptr(0), static_cast<std::size_t>(f.cols)});
      REQUIRE(d.p_main == Catch::Approx(offline.at(0, 0)).margin(1e-9));
      REQUIRE(d.p_bg == Catch::Approx(offline.at(0, 1)).margin(1e-9));
    }
  }

  SECTION("per-frame outputs match offline within 1e-5 over T=50") {
    for (auto mode : {AttractorMode::Single, AttractorMode::Dual}) {
      Checkpoint ckpt = random_checkpoint(stream_config(mode), 22);
      const int T = 50;
      Matrix f = random_matrix(T, ckpt.model.input_dim, rng);
      Matrix offline = forward_probs(f, ckpt.model, ckpt.params);
      StreamSession s = init_stream(ckpt, 0.5);
      double max_diff = 0.0;
      for (int t = 0; t < T; ++t) {
        FrameDecision d = s.push_frame({f.row_ptr(t), static_cast<std::size_t>(f.cols)});
        max_diff = std::max(max_diff, std::abs(d.p_main - offline.at(t, 0)));
        max_diff = std::max(max_diff, std::abs(d.p_bg - offline.at(t, 1)));
      }
      REQUIRE(max_diff <= 1e-5);
    }
  }

  SECTION("prefix determinism: a fresh session fed a prefix agrees at shared frames") {
    Checkpoint ckpt = random_checkpoint(stream_config(), 23);
    const int T = 30, P = 12;
    Matrix f = random_matrix(T, ckpt.model.input_dim, rng);
    StreamSession full = init_stream(ckpt, 0.5);
    std::vector<FrameDecision> full_out;
    for (int t = 0; t < T; ++t)
      full_out.push_back(full.push_frame({f.row_ptr(t), static_cast<std::size_t>(f.cols)}));
    StreamSession pre = init_stream(ckpt, 0.5);
    for (int t = 0; t < P; ++t) {
      FrameDecision d = pre.push_frame({f.row_ptr(t), static_cast<std::size_t>(f.cols)});
      REQUIRE(d.p_main == full_out[static_cast<std::size_t>(t)].p_main);
      REQUIRE(d.p_bg == full_out[static_cast<std::size_t>(t)].p_bg);
    }
  }
}

TEST_CASE("streaming costs") {
  Rng rng(31);
  Checkpoint ckpt = random_checkpoint(stream_config(), 33);
  StreamSession s = init_stream(ckpt, 0.5);
  const int D = ckpt.model.d_model;
  const int L = ckpt.model.n_layers;

  std::size_t macs10 = 0, macs100 = 0;
  for (int t = 0; t < 100; ++t) {
    Matrix f = random_matrix(1, ckpt.model.input_dim, rng);
    s.push_frame({f.row_ptr(0), static_cast<std::size_t>(f.cols)});
    if (t == 9) macs10 = s.last_push_attention_macs();
    if (t == 99) macs100 = s.last_push_attention_macs();
  }

  SECTION("per-frame attention cost is linear in t") {
    // L encoder layers + the SAA layer each attend over the cached rows
    REQUIRE(macs10 == static_cast<std::size_t>(2 * 10 * D * (L + 1)));
    REQUIRE(macs100 == static_cast<std::size_t>(2 * 100 * D * (L + 1)));
    REQUIRE(macs100 == 10 * macs10);
  }

  SECTION("state size grows as t * n_layers * D and nothing else") {
    // per frame: K and V rows per encoder layer plus the SAA layer
    const std::size_t expect = 100ull * (static_cast<std::size_t>(L) + 1) * 2ull *
                               static_cast<std::size_t>(D) * sizeof(double);
    REQUIRE(s.cache_bytes() == expect);
  }
}

TEST_CASE("stream_wav") {
  FeatureConfig fcfg;
  SyntheticVoices voices(4, 8000, 7, 1.0, 3.0);
  MixtureSpec spec;
  spec.duration = 4.0;
  spec.n_speakers = 2;
  spec.main_index = 0;
  spec.set_background(TurnConfig::preset(TurnKind::B2));
  spec.volume_lo = 0.3;
  spec.volume_hi = 0.7;
  Rng rng(41);
  LabeledMixture mix = synthesize_mixture(spec, voices, rng, fcfg);
  const std::string wav_path =
      (std::filesystem::temp_directory_path() / "msvad_stream_test.wav").string();
  wav_write(wav_path, mix.waveform, spec.sample_rate);

  ModelConfig mcfg = stream_config(AttractorMode::Dual, fcfg.feature_dim());
  Checkpoint ckpt = random_checkpoint(mcfg, 55);

  SECTION("frame count and batch equivalence") {
    StreamRunResult run = stream_wav(wav_path, ckpt, fcfg, 0.5);
    const int t_raw = fcfg.raw_frames(mix.waveform.size());
    REQUIRE(static_cast<int>(run.decisions.size()) == (t_raw + 2) / 3);

    // batch path: same wav, causal features, offline causal forward
    WavData w = wav_read(wav_path);
    SplicedFeatures feats = causal_spliced_features(w.samples, fcfg);
    REQUIRE(feats.frames.rows == static_cast<int>(run.decisions.size()));
    Matrix offline = forward_probs(feats.frames, ckpt.model, ckpt.params);
    double max_diff = 0.0;
    for (int t = 0; t < offline.rows; ++t) {
      max_diff = std::max(max_diff,
                          std::abs(run.decisions[static_cast<std::size_t>(t)].p_main -
                                   offline.at(t, 0)));
      max_diff = std::max(max_diff,
                          std::abs(run.decisions[static_cast<std::size_t>(t)].p_bg -
                                   offline.at(t, 1)));
    }
    REQUIRE(max_diff <= 1e-5);
  }

  SECTION("silence stays main-inactive under a trained model") {
    // quick causal training run: enough for the silence/speech energy cue
    MixtureBatchOptions opt;
    opt.count = 10;
    opt.duration = 3.0;
    opt.turn_pool = {TurnKind::B2};
    opt.volume_pool = {{0.2, 0.6}};
    opt.noise = NoiseSpec{NoiseSpec::Kind::White, 25.0, {}};
    opt.seed = 77;
    auto data = to_train_samples(generate_mixtures(opt, voices, fcfg), fcfg, true);
    ModelConfig tiny = stream_config(AttractorMode::Dual, fcfg.feature_dim());
    tiny.d_model = 16;
    tiny.ffn_dim = 32;
    tiny.n_layers = 1;
    tiny.saa_heads = 4;
    TrainConfig tcfg;
    tcfg.batch_size = 5;
    tcfg.epochs = 20;
    tcfg.warmup_steps = 20;
    tcfg.seed = 5;
    tcfg.causal_labels = true;
    tcfg.val_fraction = 0.2;
    tcfg.jobs = 2;
    TrainResult tr = train(data, tiny, tcfg);

    const std::string silence_path =
        (std::filesystem::temp_directory_path() / "msvad_silence_test.wav").string();
    std::vector<double> silence(8000 * 3, 0.0);
    wav_write(silence_path, silence, 8000);
    StreamRunResult run = stream_wav(silence_path, tr.best, fcfg, 0.5);
    int active = 0;
    for (const auto& d : run.decisions) active += d.is_main_active;
    REQUIRE(active == 0);
    std::remove(silence_path.c_str());
  }

  std::remove(wav_path.c_str());
}
