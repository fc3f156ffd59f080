#include "msvad/mixgen.hpp"

#include "msvad/corpus.hpp"
#include "test_util.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

using namespace msvad;

TEST_CASE("turn config presets match the speaking/silence table") {
  struct Row {
    TurnKind kind;
    double proportion;
  };
  const Row rows[] = {{TurnKind::B1, 0.400}, {TurnKind::B2, 0.500},
                      {TurnKind::B3, 0.625}, {TurnKind::B4, 0.8333333333}};
  for (const auto& r : rows) {
    TurnConfig c = TurnConfig::preset(r.kind);
    REQUIRE(c.expected_voice_proportion() == Catch::Approx(r.proportion).margin(1e-4));
    REQUIRE(c.start_delay.lo == 0.0);
    REQUIRE(c.start_delay.hi == 3.0);
  }
  TurnConfig m0 = TurnConfig::preset(TurnKind::M0);
  REQUIRE_FALSE(m0.has_silence);
  REQUIRE(m0.voice_dur.lo == 7.0);
  REQUIRE(m0.voice_dur.hi == 10.0);
}

TEST_CASE("sample_schedule") {
  SECTION("zero duration throws") {
    Rng rng(1);
    REQUIRE_THROWS_AS(sample_schedule(TurnConfig::preset(TurnKind::B1), 0.0, rng),
                      std::invalid_argument);
  }

  SECTION("intervals are sorted, disjoint and inside [0, duration]") {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
      auto ivs = sample_schedule(TurnConfig::preset(TurnKind::B2), 15.0, rng);
      double prev_end = -1.0;
      for (const auto& iv : ivs) {
        REQUIRE(iv.start >= 0.0);
        REQUIRE(iv.end <= 15.0 + 1e-12);
        REQUIRE(iv.end > iv.start);
        REQUIRE(iv.start > prev_end);
        prev_end = iv.end;
      }
    }
  }

  SECTION("zero silence forces one contiguous post-delay region") {
    TurnConfig c = TurnConfig::preset(TurnKind::B2);
    c.voice_dur = {2.0, 2.0};
    c.silence_dur = {0.0, 0.0};
    Rng rng(3);
    auto ivs = sample_schedule(c, 15.0, rng);
    REQUIRE(ivs.size() == 1);
    REQUIRE(ivs[0].end == Catch::Approx(15.0));
  }

  SECTION("M0 covers the clip after its onset") {
    Rng rng(4);
    auto ivs = sample_schedule(TurnConfig::preset(TurnKind::M0), 15.0, rng);
    REQUIRE(ivs.size() == 1);
    REQUIRE(ivs[0].start >= 0.0);
    REQUIRE(ivs[0].start <= 3.0);
    REQUIRE(ivs[0].end == 15.0);
  }

  SECTION("B2 draw order reproduced by an independent reimplementation") {
    const std::uint64_t seed = 20260809;
    Rng rng(seed);
    auto got = sample_schedule(TurnConfig::preset(TurnKind::B2), 15.0, rng);

    // independent replay of the documented rule and draw order
    std::mt19937_64 gen(seed);
    auto uniform = [&](double lo, double hi) {
      return lo + (hi - lo) * (static_cast<double>(gen() >> 11) * 0x1.0p-53);
    };
    std::vector<Interval> expect;
    const double delay = uniform(0.0, 3.0);
    double t = delay;
    while (t < 15.0) {
      const double before = t;
      const double v = uniform(1.0, 4.0);
      const double end = std::min(t + v, 15.0);
      if (end > t) {
        if (!expect.empty() && t <= expect.back().end) expect.back().end = end;
        else expect.push_back({t, end});
      }
      t += v;
      if (t >= 15.0) break;
      t += uniform(0.0, 5.0);
      if (t <= before) break;
    }
    REQUIRE(got.size() == expect.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      REQUIRE(got[i].start == expect[i].start);
      REQUIRE(got[i].end == expect[i].end);
    }
  }

  SECTION("empirical post-onset proportions approach the table column") {
    // measured at a 60 s horizon where the renewal edge bias is small
    const struct {
      TurnKind kind;
      double target;
    } rows[] = {{TurnKind::B1, 0.400}, {TurnKind::B2, 0.500},
                {TurnKind::B3, 0.625}, {TurnKind::B4, 0.833}};
    Rng rng(99);
    for (const auto& row : rows) {
      double prop_sum = 0.0;
      const int n = 1200;
      for (int i = 0; i < n; ++i) {
        auto ivs = sample_schedule(TurnConfig::preset(row.kind), 60.0, rng);
        REQUIRE_FALSE(ivs.empty());
        double voice = 0.0;
        for (const auto& iv : ivs) voice += iv.length();
        prop_sum += voice / (60.0 - ivs.front().start);
      }
      REQUIRE(std::abs(prop_sum / n - row.target) < 0.03);
    }
  }
}

TEST_CASE("derive_frame_labels") {
  const int sr = 8000;
  const double hop = 0.03;
  const int frame_samples = 240;

  SECTION("all-silent streams give all-zero labels") {
    std::vector<std::vector<double>> streams(2, std::vector<double>(24000, 0.0));
    std::vector<std::vector<Interval>> scheds(2);
    Matrix labels = derive_frame_labels(streams, scheds, 0, 30, hop, sr);
    for (double v : labels.d) REQUIRE(v == 0.0);
  }

  SECTION("one background speaker active on frames 10..20") {
    std::vector<std::vector<double>> streams(2, std::vector<double>(12000, 0.0));
    std::vector<std::vector<Interval>> scheds(2);
    for (int i = 10 * frame_samples; i < 21 * frame_samples; ++i) streams[1][static_cast<std::size_t>(i)] = 0.5;
    scheds[1].push_back({10 * hop, 21 * hop});
    Matrix labels = derive_frame_labels(streams, scheds, 0, 50, hop, sr);
    for (int t = 0; t < 50; ++t) {
      REQUIRE(labels.at(t, 0) == 0.0);
      REQUIRE(labels.at(t, 1) == (t >= 10 && t <= 20 ? 1.0 : 0.0));
    }
  }

  SECTION("two background speakers OR together (brute-force oracle)") {
    Rng rng(7);
    const int n_frames = 40;
    std::vector<std::vector<double>> streams(3, std::vector<double>(static_cast<std::size_t>(n_frames) * frame_samples, 0.0));
    std::vector<std::vector<Interval>> scheds(3);
    std::vector<std::vector<bool>> active(3, std::vector<bool>(static_cast<std::size_t>(n_frames), false));
    for (int spk = 1; spk < 3; ++spk) {
      int t = 0;
      while (t < n_frames) {
        const int on = 1 + static_cast<int>(rng.uniform_index(6));
        const int off = static_cast<int>(rng.uniform_index(5));
        const int end = std::min(n_frames, t + on);
        scheds[static_cast<std::size_t>(spk)].push_back({t * hop, end * hop});
        for (int f = t; f < end; ++f) {
          active[static_cast<std::size_t>(spk)][static_cast<std::size_t>(f)] = true;
          for (int i = 0; i < frame_samples; ++i)
            streams[static_cast<std::size_t>(spk)][static_cast<std::size_t>(f * frame_samples + i)] = 0.4;
        }
        t = end + off;
      }
    }
    Matrix labels = derive_frame_labels(streams, scheds, 0, n_frames, hop, sr);
    for (int t = 0; t < n_frames; ++t) {
      const bool expect = active[1][static_cast<std::size_t>(t)] || active[2][static_cast<std::size_t>(t)];
      REQUIRE(labels.at(t, 1) == (expect ? 1.0 : 0.0));
    }
  }

  SECTION("energy gate drops sub-floor frames inside a scheduled interval") {
    std::vector<std::vector<double>> streams(1, std::vector<double>(12000, 0.0));
    std::vector<std::vector<Interval>> scheds(1);
    scheds[0].push_back({0.0, 30 * hop});
    for (int f = 0; f < 30; ++f) {
      const double amp = f < 15 ? 0.5 : 0.5 * 1e-4;  // second half is 80 dB down
      for (int i = 0; i < frame_samples; ++i)
        streams[0][static_cast<std::size_t>(f * frame_samples + i)] = amp;
    }
    Matrix labels = derive_frame_labels(streams, scheds, 0, 30, hop, sr, 40.0);
    for (int t = 0; t < 30; ++t) REQUIRE(labels.at(t, 0) == (t < 15 ? 1.0 : 0.0));
  }
}

TEST_CASE("apply_causal_relabel") {
  Rng rng(11);

  SECTION("onset zero is the identity") {
    Matrix labels = testutil::random_matrix(20, 2, rng);
    for (double& v : labels.d) v = v > 0.0 ? 1.0 : 0.0;
    Matrix mask = Matrix::filled(20, 2, 1.0);
    auto [l, m] = apply_causal_relabel(labels, mask, 0);
    REQUIRE(l.d == labels.d);
    REQUIRE(m.d == mask.d);
  }

  SECTION("background before onset becomes main and is mask-excluded") {
    Matrix labels(20, 2);
    for (int t = 0; t < 10; ++t) labels.at(t, 1) = 1.0;
    for (int t = 10; t < 20; ++t) labels.at(t, 0) = 1.0;
    Matrix mask = Matrix::filled(20, 2, 1.0);
    auto [l, m] = apply_causal_relabel(labels, mask, 10);
    for (int t = 0; t < 10; ++t) {
      REQUIRE(l.at(t, 0) == 1.0);
      REQUIRE(m.at(t, 1) == 0.0);
      REQUIRE(m.at(t, 0) == 1.0);
    }
    for (int t = 10; t < 20; ++t) {
      REQUIRE(l.at(t, 0) == labels.at(t, 0));
      REQUIRE(l.at(t, 1) == labels.at(t, 1));
      REQUIRE(m.at(t, 0) == 1.0);
      REQUIRE(m.at(t, 1) == 1.0);
    }
  }

  SECTION("random matrices match the per-frame rule oracle and idempotence") {
    for (int trial = 0; trial < 50; ++trial) {
      const int n = 30;
      Matrix labels(n, 2), mask(n, 2);
      for (std::size_t i = 0; i < labels.d.size(); ++i) {
        labels.d[i] = rng.uniform01() < 0.5 ? 1.0 : 0.0;
        mask.d[i] = rng.uniform01() < 0.9 ? 1.0 : 0.0;
      }
      const int onset = static_cast<int>(rng.uniform_index(n + 1));
      auto [l, m] = apply_causal_relabel(labels, mask, onset);
      for (int t = 0; t < n; ++t) {
        if (t < onset) {
          REQUIRE(l.at(t, 0) == labels.at(t, 1));
          REQUIRE(l.at(t, 1) == labels.at(t, 1));
          REQUIRE(m.at(t, 0) == mask.at(t, 0));
          REQUIRE(m.at(t, 1) == 0.0);
        } else {
          REQUIRE(l.at(t, 0) == labels.at(t, 0));
          REQUIRE(l.at(t, 1) == labels.at(t, 1));
          REQUIRE(m.at(t, 0) == 1.0);
          REQUIRE(m.at(t, 1) == 1.0);
        }
      }
      auto [l2, m2] = apply_causal_relabel(l, m, onset);
      REQUIRE(l2.d == l.d);
      REQUIRE(m2.d == m.d);
    }
  }
}

TEST_CASE("apply_reverb") {
  const int sr = 8000;

  SECTION("zero taps is the identity kernel") {
    Rng rng(13);
    std::vector<double> x(4000);
    for (double& v : x) v = rng.uniform(-0.5, 0.5);
    ReverbSpec spec{0.3, 0};
    auto y = apply_reverb(x, spec, sr, rng);
    REQUIRE(y == x);
  }

  SECTION("zero input gives zero output") {
    Rng rng(17);
    std::vector<double> x(2000, 0.0);
    auto y = apply_reverb(x, ReverbSpec{0.25, 12}, sr, rng);
    for (double v : y) REQUIRE(v == 0.0);
  }

  SECTION("matches the dense convolution oracle") {
    const std::uint64_t seed = 23;
    Rng rng(seed);
    std::vector<double> x(3000);
    for (double& v : x) v = rng.uniform(-0.5, 0.5);
    ReverbSpec spec{0.2, 8};
    Rng conv_rng(seed + 1);
    auto y = apply_reverb(x, spec, sr, conv_rng);

    // replay the documented tap draws, then convolve densely
    Rng replay(seed + 1);
    std::vector<double> ir(static_cast<std::size_t>(spec.decay_s * sr) + 1, 0.0);
    ir[0] = 1.0;
    for (int i = 0; i < spec.tap_count; ++i) {
      const double delay = replay.uniform(0.0, spec.decay_s);
      const double amp = replay.uniform(-1.0, 1.0) * std::exp(-6.907755278982137 * delay / spec.decay_s);
      ir[static_cast<std::size_t>(delay * sr)] += amp;
    }
    std::vector<double> dense(x.size(), 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      for (std::size_t k = 0; k <= i && k < ir.size(); ++k) dense[i] += ir[k] * x[i - k];
    }
    double peak_in = 0.0, peak_out = 0.0;
    for (double v : x) peak_in = std::max(peak_in, std::abs(v));
    for (double v : dense) peak_out = std::max(peak_out, std::abs(v));
    for (double& v : dense) v *= peak_in / peak_out;

    double max_rel = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i)
      max_rel = std::max(max_rel, std::abs(y[i] - dense[i]) / std::max(1e-12, std::abs(dense[i])));
    REQUIRE(max_rel < 1e-6);
  }
}

TEST_CASE("add_noise") {
  Rng rng(29);

  SECTION("infinite SNR sentinel returns the input") {
    std::vector<double> x(1000, 0.3);
    WhiteNoise w;
    auto y = add_noise(x, w, std::numeric_limits<double>::infinity(), rng);
    REQUIRE(y == x);
  }

  SECTION("unit-power signal at 0 dB adds unit-power noise") {
    std::vector<double> x(20000);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = (i % 2 == 0) ? 1.0 : -1.0;
    WhiteNoise w;
    auto y = add_noise(x, w, 0.0, rng);
    double p = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) p += (y[i] - x[i]) * (y[i] - x[i]);
    p /= static_cast<double>(x.size());
    REQUIRE(p == Catch::Approx(1.0).margin(1e-6));
  }

  SECTION("measured post-hoc SNR equals the request within 0.1 dB") {
    std::vector<double> x(16000);
    Rng srng(31);
    for (double& v : x) v = srng.uniform(-0.7, 0.7);
    for (double snr : {-5.0, 0.0, 10.0, 20.0}) {
      PinkNoise pink;
      auto y = add_noise(x, pink, snr, rng);
      double p_sig = 0.0, p_noise = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        p_sig += x[i] * x[i];
        p_noise += (y[i] - x[i]) * (y[i] - x[i]);
      }
      const double measured = 10.0 * std::log10(p_sig / p_noise);
      REQUIRE(measured == Catch::Approx(snr).margin(0.1));
    }
  }

  SECTION("zero-power signal throws") {
    std::vector<double> x(100, 0.0);
    WhiteNoise w;
    REQUIRE_THROWS_AS(add_noise(x, w, 10.0, rng), std::invalid_argument);
  }
}

TEST_CASE("synthesize_mixture") {
  FeatureConfig fcfg;
  SyntheticVoices voices(6, 8000, 1234);

  SECTION("silent background leaves the main stream untouched") {
    MixtureSpec spec;
    spec.duration = 6.0;
    spec.n_speakers = 2;
    spec.main_index = 0;
    TurnConfig silent = TurnConfig::preset(TurnKind::B1);
    silent.voice_dur = {0.0, 0.0};
    silent.silence_dur = {20.0, 20.0};
    spec.background = {silent};
    Rng rng(5);
    LabeledMixture mix = synthesize_mixture(spec, voices, rng, fcfg);
    REQUIRE(mix.waveform == mix.clean_streams[0]);
    for (int t = 0; t < mix.labels.rows; ++t) REQUIRE(mix.labels.at(t, 1) == 0.0);
  }

  SECTION("deterministic under a fixed seed (byte-identical)") {
    MixtureSpec spec;
    spec.duration = 5.0;
    spec.n_speakers = 3;
    spec.main_index = 1;
    spec.set_background(TurnConfig::preset(TurnKind::B3));
    spec.volume_lo = 0.2;
    spec.volume_hi = 0.8;
    spec.noise = NoiseSpec{NoiseSpec::Kind::White, 15.0, {}};
    spec.reverb = ReverbSpec{0.15, 6};
    Rng r1(777), r2(777);
    LabeledMixture a = synthesize_mixture(spec, voices, r1, fcfg);
    LabeledMixture b = synthesize_mixture(spec, voices, r2, fcfg);
    REQUIRE(a.waveform == b.waveform);
    REQUIRE(a.labels.d == b.labels.d);
    REQUIRE(a.onset_frame == b.onset_frame);
  }

  SECTION("labels are reconstructible from the stored clean streams") {
    MixtureSpec spec;
    spec.duration = 5.0;
    spec.n_speakers = 3;
    spec.main_index = 0;
    spec.set_background(TurnConfig::preset(TurnKind::B2));
    spec.volume_lo = 0.3;
    spec.volume_hi = 0.9;
    Rng rng(999);
    LabeledMixture mix = synthesize_mixture(spec, voices, rng, fcfg);
    Matrix again = derive_frame_labels(mix.clean_streams, mix.schedules, spec.main_index,
                                       mix.labels.rows, mix.frame_hop, spec.sample_rate,
                                       spec.energy_floor_db);
    REQUIRE(again.d == mix.labels.d);
  }

  SECTION("background volumes stay inside the requested range") {
    MixtureSpec spec;
    spec.duration = 4.0;
    spec.n_speakers = 4;
    spec.main_index = 2;
    spec.set_background(TurnConfig::preset(TurnKind::B4));
    spec.volume_lo = 0.1;
    spec.volume_hi = 0.4;
    Rng rng(31337);
    LabeledMixture mix = synthesize_mixture(spec, voices, rng, fcfg);
    REQUIRE(mix.volumes[2] == 1.0);
    for (int slot = 0; slot < 4; ++slot) {
      if (slot == 2) continue;
      REQUIRE(mix.volumes[static_cast<std::size_t>(slot)] >= 0.1);
      REQUIRE(mix.volumes[static_cast<std::size_t>(slot)] < 0.4);
    }
  }

  SECTION("insufficient speakers throws") {
    SyntheticVoices two(2, 8000, 1);
    MixtureSpec spec;
    spec.n_speakers = 3;
    spec.set_background(TurnConfig::preset(TurnKind::B1));
    Rng rng(1);
    REQUIRE_THROWS_AS(synthesize_mixture(spec, two, rng, fcfg), std::invalid_argument);
  }

  SECTION("volume range bounds are validated") {
    MixtureSpec spec;
    spec.set_background(TurnConfig::preset(TurnKind::B1));
    spec.volume_lo = 0.0;
    REQUIRE_THROWS_AS(spec.validate(), std::invalid_argument);
  }
}
