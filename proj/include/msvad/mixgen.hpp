#pragma once

#include "msvad/corpus.hpp"
#include "msvad/features.hpp"
#include "msvad/numcore/matrix.hpp"
#include "msvad/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace msvad {

struct SecondsRange {
  double lo = 0.0;
  double hi = 0.0;
  double mean() const { return 0.5 * (lo + hi); }
  void validate(const char* what) const {
    if (lo < 0.0 || hi < lo)
      throw std::invalid_argument(std::string("bad range for ") + what);
  }
};

enum class TurnKind { M0, B1, B2, B3, B4 };

inline const char* turn_kind_name(TurnKind k) {
  switch (k) {
    case TurnKind::M0: return "M0";
    case TurnKind::B1: return "B1";
    case TurnKind::B2: return "B2";
    case TurnKind::B3: return "B3";
    case TurnKind::B4: return "B4";
  }
  return "?";
}

inline TurnKind turn_kind_from_name(const std::string& s) {
  if (s == "M0") return TurnKind::M0;
  if (s == "B1") return TurnKind::B1;
  if (s == "B2") return TurnKind::B2;
  if (s == "B3") return TurnKind::B3;
  if (s == "B4") return TurnKind::B4;
  throw std::invalid_argument("unknown turn config: " + s);
}

/// Speaking/silence alternation parameters. M0 is continuous speech (no
/// silence range); B1-B4 alternate uniform draws from the two ranges.
struct TurnConfig {
  TurnKind name = TurnKind::B2;
  SecondsRange start_delay{0.0, 3.0};
  SecondsRange voice_dur{1.0, 4.0};
  SecondsRange silence_dur{0.0, 5.0};
  bool has_silence = true;

  static TurnConfig preset(TurnKind k) {
    TurnConfig c;
    c.name = k;
    c.start_delay = {0.0, 3.0};
    switch (k) {
      case TurnKind::M0:
        c.voice_dur = {7.0, 10.0};
        c.silence_dur = {0.0, 0.0};
        c.has_silence = false;
        break;
      case TurnKind::B1: c.voice_dur = {1.0, 3.0}; c.silence_dur = {0.0, 6.0}; break;
      case TurnKind::B2: c.voice_dur = {1.0, 4.0}; c.silence_dur = {0.0, 5.0}; break;
      case TurnKind::B3: c.voice_dur = {1.0, 4.0}; c.silence_dur = {0.0, 3.0}; break;
      case TurnKind::B4: c.voice_dur = {1.0, 4.0}; c.silence_dur = {0.0, 1.0}; break;
    }
    return c;
  }

  /// Stationary cycle proportion mean(voice) / (mean(voice) + mean(silence)).
  double expected_voice_proportion() const {
    if (!has_silence) return 1.0;
    return voice_dur.mean() / (voice_dur.mean() + silence_dur.mean());
  }

  void validate() const {
    start_delay.validate("start_delay");
    voice_dur.validate("voice_dur");
    if (has_silence) silence_dur.validate("silence_dur");
  }
};

struct Interval {
  double start = 0.0;
  double end = 0.0;
  double length() const { return end - start; }
};

/// Samples a voice-interval schedule.
///
/// Draw order (fixed; replayed by oracle tests): one uniform start-delay
/// draw, then for M0 one voice-length draw (the interval is then extended
/// to the clip end: the main speaker is continuous post-onset); for B1-B4
/// alternating voice/silence draws until the clip is covered. Intervals
/// are truncated at the clip end and zero-gap neighbours are merged.
inline std::vector<Interval> sample_schedule(const TurnConfig& config, double duration,
                                             Rng& rng) {
  config.validate();
  if (duration <= 0.0) throw std::invalid_argument("sample_schedule: duration must be > 0");
  std::vector<Interval> out;
  const double delay = rng.uniform(config.start_delay.lo, config.start_delay.hi);
  if (delay >= duration) return out;
  if (!config.has_silence) {
    (void)rng.uniform(config.voice_dur.lo, config.voice_dur.hi);  // first-utterance length
    out.push_back({delay, duration});
    return out;
  }
  double t = delay;
  while (t < duration) {
    const double before = t;
    const double v = rng.uniform(config.voice_dur.lo, config.voice_dur.hi);
    const double end = std::min(t + v, duration);
    if (end > t) {
      if (!out.empty() && t <= out.back().end) {
        out.back().end = end;  // zero silence: contiguous voice
      } else {
        out.push_back({t, end});
      }
    }
    t += v;
    if (t >= duration) break;
    t += rng.uniform(config.silence_dur.lo, config.silence_dur.hi);
    if (t <= before) break;  // degenerate zero-length draws cannot advance
  }
  return out;
}

struct NoiseSpec {
  enum class Kind { White, Pink, Files };
  Kind kind = Kind::White;
  double snr_db = 20.0;
  std::vector<std::string> files;  // for Kind::Files
};

struct ReverbSpec {
  double decay_s = 0.3;  // -60 dB point of the tap-amplitude envelope
  int tap_count = 24;
};

struct MixtureSpec {
  double duration = 15.0;
  int n_speakers = 2;  // in [2,4], including the main speaker
  int main_index = 0;
  std::vector<TurnConfig> background;  // one per background speaker
  double volume_lo = 1.0;              // background scale range, in (0,1]
  double volume_hi = 1.0;
  std::optional<NoiseSpec> noise;
  std::optional<ReverbSpec> reverb;
  int sample_rate = 8000;
  std::uint64_t rng_seed = 0;
  double energy_floor_db = 40.0;

  void set_background(const TurnConfig& c) {
    background.assign(static_cast<std::size_t>(n_speakers - 1), c);
  }

  void validate() const {
    if (duration <= 0.0) throw std::invalid_argument("MixtureSpec: duration must be > 0");
    if (n_speakers < 2 || n_speakers > 4)
      throw std::invalid_argument("MixtureSpec: n_speakers must be in [2,4]");
    if (main_index < 0 || main_index >= n_speakers)
      throw std::invalid_argument("MixtureSpec: main_index out of range");
    if (background.size() != static_cast<std::size_t>(n_speakers - 1))
      throw std::invalid_argument("MixtureSpec: need one TurnConfig per background speaker");
    if (!(volume_lo > 0.0 && volume_lo <= volume_hi && volume_hi <= 1.0))
      throw std::invalid_argument("MixtureSpec: volume range must be within (0,1]");
    for (const auto& b : background) b.validate();
  }
};

/// A generated sample: mixed waveform plus frame-level labels aligned to the
/// post-splice feature rate. Clean per-speaker material is retained so that
/// labels are reconstructible.
struct LabeledMixture {
  std::vector<double> waveform;
  Matrix labels;     // T x 2; col 0 = main, col 1 = union of background
  Matrix loss_mask;  // T x 2
  double frame_hop = 0.03;
  int onset_frame = 0;  // first frame with true main activity (T if none)

  std::vector<std::vector<double>> clean_streams;  // dry, unscaled, per slot
  std::vector<std::vector<Interval>> schedules;    // per slot
  std::vector<int> speaker_ids;                    // provider speaker per slot
  std::vector<double> volumes;                     // per slot (main = 1)
};

// ---------------------------------------------------------------------------
// noise
// ---------------------------------------------------------------------------

class NoiseSource {
 public:
  virtual ~NoiseSource() = default;
  virtual std::vector<double> generate(std::size_t n, Rng& rng) const = 0;
};

class WhiteNoise : public NoiseSource {
 public:
  std::vector<double> generate(std::size_t n, Rng& rng) const override {
    std::vector<double> x(n);
    for (double& v : x) v = rng.normal();
    return x;
  }
};

/// Pink-ish noise: white noise through a cascade of leaky integrators
/// (Paul Kellet's economy filter).
class PinkNoise : public NoiseSource {
 public:
  std::vector<double> generate(std::size_t n, Rng& rng) const override {
    std::vector<double> x(n);
    double b0 = 0.0, b1 = 0.0, b2 = 0.0;
    for (double& v : x) {
      const double w = rng.normal();
      b0 = 0.99765 * b0 + w * 0.0990460;
      b1 = 0.96300 * b1 + w * 0.2965164;
      b2 = 0.57000 * b2 + w * 1.0526913;
      v = b0 + b1 + b2 + w * 0.1848;
    }
    return x;
  }
};

/// Noise drawn from user WAV files, looped to length.
class WavFileNoise : public NoiseSource {
 public:
  WavFileNoise(std::vector<std::string> files, int rate) : files_(std::move(files)), rate_(rate) {
    if (files_.empty()) throw std::invalid_argument("WavFileNoise: no files");
  }
  std::vector<double> generate(std::size_t n, Rng& rng) const override {
    const auto& path = files_[rng.uniform_index(files_.size())];
    WavData w = wav_read(path);
    auto src = resample_linear(w.samples, w.sample_rate, rate_);
    if (src.empty()) throw std::runtime_error("WavFileNoise: empty file " + path);
    std::vector<double> x(n);
    const std::size_t off = rng.uniform_index(src.size());
    for (std::size_t i = 0; i < n; ++i) x[i] = src[(off + i) % src.size()];
    return x;
  }

 private:
  std::vector<std::string> files_;
  int rate_;
};

inline std::unique_ptr<NoiseSource> make_noise_source(const NoiseSpec& spec, int rate) {
  switch (spec.kind) {
    case NoiseSpec::Kind::White: return std::make_unique<WhiteNoise>();
    case NoiseSpec::Kind::Pink: return std::make_unique<PinkNoise>();
    case NoiseSpec::Kind::Files: return std::make_unique<WavFileNoise>(spec.files, rate);
  }
  throw std::invalid_argument("make_noise_source: bad kind");
}

/// Adds noise scaled so that 10*log10(P_signal/P_noise) equals snr_db over
/// the clip. An infinite snr_db is the no-noise sentinel.
inline std::vector<double> add_noise(const std::vector<double>& x, const NoiseSource& src,
                                     double snr_db, Rng& rng) {
  if (std::isinf(snr_db) && snr_db > 0.0) return x;
  double p_sig = 0.0;
  for (double v : x) p_sig += v * v;
  p_sig /= static_cast<double>(x.size());
  if (p_sig <= 0.0) throw std::invalid_argument("add_noise: zero-power signal, SNR undefined");
  std::vector<double> noise = src.generate(x.size(), rng);
  double p_n = 0.0;
  for (double v : noise) p_n += v * v;
  p_n /= static_cast<double>(noise.size());
  if (p_n <= 0.0) throw std::runtime_error("add_noise: noise source produced silence");
  const double k = std::sqrt(p_sig / (p_n * std::pow(10.0, snr_db / 10.0)));
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + k * noise[i];
  return out;
}

// ---------------------------------------------------------------------------
// reverb
// ---------------------------------------------------------------------------

/// Convolves with a synthetic sparse impulse response: a unit tap at zero
/// plus tap_count taps at uniform delays in [0, decay] with exponentially
/// decaying random amplitudes (-60 dB at decay). Output is truncated to the
/// input length and renormalized to the input peak.
inline std::vector<double> apply_reverb(const std::vector<double>& x, const ReverbSpec& spec,
                                        int sample_rate, Rng& rng) {
  if (spec.decay_s <= 0.0) throw std::invalid_argument("apply_reverb: decay must be > 0");
  if (spec.tap_count < 0) throw std::invalid_argument("apply_reverb: negative tap count");
  // ln(1000): amplitude envelope reaches -60 dB at the decay time
  constexpr double kDecayLn = 6.907755278982137;
  std::vector<std::pair<std::size_t, double>> taps;
  taps.reserve(static_cast<std::size_t>(spec.tap_count) + 1);
  taps.emplace_back(0, 1.0);
  for (int i = 0; i < spec.tap_count; ++i) {
    const double delay = rng.uniform(0.0, spec.decay_s);
    const double amp = rng.uniform(-1.0, 1.0) * std::exp(-kDecayLn * delay / spec.decay_s);
    taps.emplace_back(static_cast<std::size_t>(delay * sample_rate), amp);
  }
  std::vector<double> y(x.size(), 0.0);
  for (const auto& [off, amp] : taps) {
    for (std::size_t i = off; i < x.size(); ++i) y[i] += amp * x[i - off];
  }
  double peak_in = 0.0, peak_out = 0.0;
  for (double v : x) peak_in = std::max(peak_in, std::abs(v));
  for (double v : y) peak_out = std::max(peak_out, std::abs(v));
  if (peak_in > 0.0 && peak_out > 0.0) {
    const double k = peak_in / peak_out;
    for (double& v : y) v *= k;
  }
  return y;
}

// ---------------------------------------------------------------------------
// labels
// ---------------------------------------------------------------------------

/// Frame activity from construction: a frame is active for a speaker iff it
/// overlaps a scheduled voice interval and its clean RMS is within
/// energy_floor_db of that interval's RMS. Column 1 ORs all background
/// speakers.
inline Matrix derive_frame_labels(const std::vector<std::vector<double>>& clean_streams,
                                  const std::vector<std::vector<Interval>>& schedules,
                                  int main_index, int n_frames, double frame_hop,
                                  int sample_rate, double energy_floor_db = 40.0) {
  const int n_spk = static_cast<int>(clean_streams.size());
  if (n_spk == 0 || schedules.size() != clean_streams.size())
    throw std::invalid_argument("derive_frame_labels: stream/schedule mismatch");
  const std::size_t len = clean_streams[0].size();
  for (const auto& s : clean_streams)
    if (s.size() != len) throw std::invalid_argument("derive_frame_labels: unequal stream lengths");
  const double gate_ratio = std::pow(10.0, -energy_floor_db / 20.0);
  Matrix labels(n_frames, 2);
  const auto frame_samples = static_cast<std::size_t>(std::lround(frame_hop * sample_rate));

  for (int spk = 0; spk < n_spk; ++spk) {
    const auto& x = clean_streams[static_cast<std::size_t>(spk)];
    // per-interval RMS gates
    std::vector<double> gates(schedules[static_cast<std::size_t>(spk)].size(), 0.0);
    for (std::size_t k = 0; k < gates.size(); ++k) {
      const Interval& iv = schedules[static_cast<std::size_t>(spk)][k];
      const auto a = std::min(len, static_cast<std::size_t>(std::max(0.0, iv.start) * sample_rate));
      const auto b = std::min(len, static_cast<std::size_t>(std::max(0.0, iv.end) * sample_rate));
      double p = 0.0;
      for (std::size_t i = a; i < b; ++i) p += x[i] * x[i];
      const double rms = b > a ? std::sqrt(p / static_cast<double>(b - a)) : 0.0;
      gates[k] = rms * gate_ratio;
    }
    const int col = spk == main_index ? 0 : 1;
    for (int t = 0; t < n_frames; ++t) {
      const double f0 = t * frame_hop;
      const double f1 = f0 + frame_hop;
      const auto s0 = std::min(len, static_cast<std::size_t>(t) * frame_samples);
      const auto s1 = std::min(len, s0 + frame_samples);
      double frame_rms = 0.0;
      if (s1 > s0) {
        double p = 0.0;
        for (std::size_t i = s0; i < s1; ++i) p += x[i] * x[i];
        frame_rms = std::sqrt(p / static_cast<double>(s1 - s0));
      }
      bool active = false;
      const auto& ivs = schedules[static_cast<std::size_t>(spk)];
      for (std::size_t k = 0; k < ivs.size() && !active; ++k) {
        if (ivs[k].start < f1 && ivs[k].end > f0 && frame_rms > gates[k]) active = true;
      }
      if (active) labels.at(t, col) = 1.0;
    }
  }
  return labels;
}

inline int main_onset_frame(const Matrix& labels) {
  for (int t = 0; t < labels.rows; ++t)
    if (labels.at(t, 0) != 0.0) return t;
  return labels.rows;
}

/// Causal-aware relabeling: before the main onset, background activity is
/// presented as main activity and background labels are mask-excluded; from
/// the onset on, labels pass through and the mask is set.
inline std::pair<Matrix, Matrix> apply_causal_relabel(const Matrix& labels,
                                                      const Matrix& loss_mask,
                                                      int main_onset) {
  check_shape(labels.cols == 2 && loss_mask.same_shape(labels), "apply_causal_relabel");
  Matrix l = labels;
  Matrix m = loss_mask;
  const int onset = std::clamp(main_onset, 0, labels.rows);
  for (int t = 0; t < onset; ++t) {
    l.at(t, 0) = labels.at(t, 1);
    m.at(t, 1) = 0.0;
  }
  for (int t = onset; t < labels.rows; ++t) {
    m.at(t, 0) = 1.0;
    m.at(t, 1) = 1.0;
  }
  return {std::move(l), std::move(m)};
}

// ---------------------------------------------------------------------------
// synthesis
// ---------------------------------------------------------------------------

namespace detail {

/// Fills scheduled intervals with concatenated utterances from the pool;
/// utterances are truncated at interval ends.
inline std::vector<double> place_speaker(const UtteranceProvider& corpus, int speaker,
                                         const std::vector<Interval>& schedule,
                                         std::size_t n_samples, int rate, Rng& rng) {
  std::vector<double> x(n_samples, 0.0);
  for (const Interval& iv : schedule) {
    auto cur = static_cast<std::size_t>(std::max(0.0, iv.start) * rate);
    const auto end = std::min(n_samples, static_cast<std::size_t>(std::max(0.0, iv.end) * rate));
    while (cur < end) {
      const std::vector<double> utt = corpus.utterance(speaker, rng);
      const std::size_t take = std::min(utt.size(), end - cur);
      std::copy(utt.begin(), utt.begin() + static_cast<std::ptrdiff_t>(take),
                x.begin() + static_cast<std::ptrdiff_t>(cur));
      cur += take;
      if (take == 0) break;
    }
  }
  return x;
}

}  // namespace detail

/// Generates one labeled mixture. Deterministic in (spec, corpus, rng): the
/// draw order is speaker selection, per-slot schedules, background volumes,
/// per-slot utterance placement, per-slot reverb, then noise.
inline LabeledMixture synthesize_mixture(const MixtureSpec& spec,
                                         const UtteranceProvider& corpus, Rng& rng,
                                         const FeatureConfig& feat_cfg = FeatureConfig{}) {
  spec.validate();
  if (corpus.speaker_count() < spec.n_speakers)
    throw std::invalid_argument("synthesize_mixture: not enough distinct speakers");
  if (corpus.sample_rate() != spec.sample_rate)
    throw std::invalid_argument("synthesize_mixture: corpus sample rate mismatch");

  const int n = spec.n_speakers;
  const auto n_samples = static_cast<std::size_t>(spec.duration * spec.sample_rate);

  LabeledMixture out;
  out.frame_hop = feat_cfg.frame_hop_seconds();

  // 1. distinct speakers (partial Fisher-Yates over the corpus)
  std::vector<int> all(static_cast<std::size_t>(corpus.speaker_count()));
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  for (int i = 0; i < n; ++i) {
    const std::size_t j = i + rng.uniform_index(all.size() - static_cast<std::size_t>(i));
    std::swap(all[static_cast<std::size_t>(i)], all[j]);
    out.speaker_ids.push_back(all[static_cast<std::size_t>(i)]);
  }

  // 2. schedules, slot order; main slot is continuous speech
  int bg_idx = 0;
  for (int slot = 0; slot < n; ++slot) {
    const TurnConfig cfg = slot == spec.main_index
                               ? TurnConfig::preset(TurnKind::M0)
                               : spec.background[static_cast<std::size_t>(bg_idx++)];
    out.schedules.push_back(sample_schedule(cfg, spec.duration, rng));
  }

  // 3. volumes (main fixed at 1)
  for (int slot = 0; slot < n; ++slot) {
    out.volumes.push_back(slot == spec.main_index
                              ? 1.0
                              : rng.uniform(spec.volume_lo, spec.volume_hi));
  }

  // 4. placement
  for (int slot = 0; slot < n; ++slot) {
    out.clean_streams.push_back(detail::place_speaker(
        corpus, out.speaker_ids[static_cast<std::size_t>(slot)],
        out.schedules[static_cast<std::size_t>(slot)], n_samples, spec.sample_rate, rng));
  }

  // 5. labels from the dry streams
  const int n_frames = feat_cfg.spliced_frames(n_samples);
  out.labels = derive_frame_labels(out.clean_streams, out.schedules, spec.main_index,
                                   n_frames, out.frame_hop, spec.sample_rate,
                                   spec.energy_floor_db);
  out.loss_mask = Matrix::filled(n_frames, 2, 1.0);
  out.onset_frame = main_onset_frame(out.labels);

  // 6. per-speaker reverb, then the volume-scaled sum
  std::vector<double> mix(n_samples, 0.0);
  for (int slot = 0; slot < n; ++slot) {
    std::vector<double> s = out.clean_streams[static_cast<std::size_t>(slot)];
    if (spec.reverb) s = apply_reverb(s, *spec.reverb, spec.sample_rate, rng);
    const double vol = out.volumes[static_cast<std::size_t>(slot)];
    for (std::size_t i = 0; i < n_samples; ++i) mix[i] += vol * s[i];
  }

  // 7. noise
  if (spec.noise) {
    const auto src = make_noise_source(*spec.noise, spec.sample_rate);
    mix = add_noise(mix, *src, spec.noise->snr_db, rng);
  }
  out.waveform = std::move(mix);
  return out;
}

}  // namespace msvad
