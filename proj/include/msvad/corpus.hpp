#pragma once

#include "msvad/rng.hpp"
#include "msvad/wav.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace msvad {

/// Source of per-speaker utterances. Implementations are read-only after
/// construction and safe to share across worker threads.
class UtteranceProvider {
 public:
  virtual ~UtteranceProvider() = default;
  virtual int speaker_count() const = 0;
  virtual int sample_rate() const = 0;
  /// Yields one mono utterance for the speaker; draws via rng.
  virtual std::vector<double> utterance(int speaker, Rng& rng) const = 0;
};

/// Directory-of-WAVs corpus described by a manifest: one `<speaker-id> <path>`
/// pair per line (# starts a comment). Relative paths resolve against the
/// manifest's directory. Files are loaded on demand and resampled as needed.
class WavCorpus : public UtteranceProvider {
 public:
  WavCorpus(const std::string& manifest_path, int target_rate)
      : target_rate_(target_rate) {
    std::ifstream f(manifest_path);
    if (!f) throw std::runtime_error("WavCorpus: cannot open manifest " + manifest_path);
    const auto base = std::filesystem::path(manifest_path).parent_path();
    std::map<std::string, int> ids;
    std::string line;
    while (std::getline(f, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ss(line);
      std::string spk, path;
      if (!(ss >> spk >> path)) continue;
      auto p = std::filesystem::path(path);
      if (p.is_relative()) p = base / p;
      auto [it, fresh] = ids.emplace(spk, static_cast<int>(speakers_.size()));
      if (fresh) {
        speakers_.push_back(spk);
        files_.emplace_back();
      }
      files_[static_cast<std::size_t>(it->second)].push_back(p.string());
    }
    if (speakers_.empty()) throw std::runtime_error("WavCorpus: empty manifest");
  }

  int speaker_count() const override { return static_cast<int>(speakers_.size()); }
  int sample_rate() const override { return target_rate_; }
  const std::string& speaker_id(int i) const { return speakers_[static_cast<std::size_t>(i)]; }

  std::vector<double> utterance(int speaker, Rng& rng) const override {
    const auto& fs = files_[static_cast<std::size_t>(speaker)];
    const auto& path = fs[rng.uniform_index(fs.size())];
    WavData w = wav_read(path);
    if (w.samples.empty())
      throw std::runtime_error("WavCorpus: empty utterance " + path);
    return resample_linear(w.samples, w.sample_rate, target_rate_);
  }

 private:
  int target_rate_;
  std::vector<std::string> speakers_;
  std::vector<std::vector<std::string>> files_;
};

/// Procedural speech-like voices: per-speaker harmonic stack with pitch
/// wobble and syllabic amplitude envelope. Deterministic in (seed, speaker,
/// rng draws); inter-syllable dips stay well above the labeling energy gate.
class SyntheticVoices : public UtteranceProvider {
 public:
  SyntheticVoices(int n_speakers, int rate, std::uint64_t seed,
                  double min_dur_s = 2.0, double max_dur_s = 6.0, double f0_lo = 95.0,
                  double f0_hi = 260.0)
      : n_(n_speakers), rate_(rate), min_dur_(min_dur_s), max_dur_(max_dur_s) {
    if (n_speakers < 1) throw std::invalid_argument("SyntheticVoices: need >= 1 speaker");
    for (int s = 0; s < n_speakers; ++s) {
      Rng r = Rng::derive(seed, 0x5eed, static_cast<std::uint64_t>(s));
      VoiceProfile v;
      v.f0 = r.uniform(f0_lo, f0_hi);
      v.tilt = r.uniform(0.8, 1.6);
      v.vibrato_hz = r.uniform(3.5, 6.5);
      v.vibrato_depth = r.uniform(0.005, 0.02);
      profiles_.push_back(v);
    }
  }

  int speaker_count() const override { return n_; }
  int sample_rate() const override { return rate_; }

  std::vector<double> utterance(int speaker, Rng& rng) const override {
    const VoiceProfile& v = profiles_[static_cast<std::size_t>(speaker)];
    const double dur = rng.uniform(min_dur_, max_dur_);
    const auto n = static_cast<std::size_t>(dur * rate_);
    std::vector<double> x(n, 0.0);

    // syllabic envelope: raised-cosine bumps with a nonzero floor so that
    // every frame inside an utterance stays above the -40 dB label gate
    std::vector<double> env(n, 0.0);
    std::size_t pos = 0;
    while (pos < n) {
      const auto syl = static_cast<std::size_t>(rng.uniform(0.12, 0.30) * rate_);
      const auto gap = static_cast<std::size_t>(rng.uniform(0.02, 0.06) * rate_);
      const double floor_amp = rng.uniform(0.15, 0.3);
      for (std::size_t i = 0; i < syl && pos + i < n; ++i) {
        const double ph = static_cast<double>(i) / static_cast<double>(syl);
        env[pos + i] = floor_amp + (1.0 - floor_amp) * 0.5 * (1.0 - std::cos(2.0 * M_PI * ph));
      }
      for (std::size_t i = 0; i < gap && pos + syl + i < n; ++i)
        env[pos + syl + i] = floor_amp;
      pos += syl + gap;
    }

    const int n_harm = std::min(10, static_cast<int>(0.95 * rate_ / 2.0 / v.f0));
    std::vector<double> amp(static_cast<std::size_t>(n_harm));
    for (int h = 0; h < n_harm; ++h)
      amp[static_cast<std::size_t>(h)] = std::pow(h + 1.0, -v.tilt);
    const double phase0 = rng.uniform(0.0, 2.0 * M_PI);
    double phase = phase0;
    for (std::size_t i = 0; i < n; ++i) {
      const double t = static_cast<double>(i) / rate_;
      const double f = v.f0 * (1.0 + v.vibrato_depth * std::sin(2.0 * M_PI * v.vibrato_hz * t));
      phase += 2.0 * M_PI * f / rate_;
      double s = 0.0;
      for (int h = 0; h < n_harm; ++h)
        s += amp[static_cast<std::size_t>(h)] * std::sin((h + 1) * phase);
      x[i] = s * env[i];
    }

    // normalize to a fixed RMS
    double p = 0.0;
    for (double s : x) p += s * s;
    p = std::sqrt(p / static_cast<double>(n));
    if (p > 0.0) {
      const double k = 0.15 / p;
      for (double& s : x) s *= k;
    }
    return x;
  }

 private:
  struct VoiceProfile {
    double f0 = 120.0;
    double tilt = 1.0;
    double vibrato_hz = 5.0;
    double vibrato_depth = 0.01;
  };
  int n_;
  int rate_;
  double min_dur_;
  double max_dur_;
  std::vector<VoiceProfile> profiles_;
};

}  // namespace msvad
