#pragma once

#include "msvad/numcore/matrix.hpp"

#include <cmath>
#include <complex>
#include <stdexcept>
#include <vector>

namespace msvad {

struct FeatureConfig {
  int sample_rate = 8000;
  double win_ms = 25.0;
  double hop_ms = 10.0;
  int n_mels = 23;
  int fft_size = 256;
  int subsample = 3;
  int splice_context = 3;  // frames each side (offline symmetric splice)
  double log_floor = 1e-10;
  double mel_fmin_hz = 0.0;
  double mel_fmax_hz = 4000.0;

  int win_samples() const {
    return static_cast<int>(std::lround(win_ms * sample_rate / 1000.0));
  }
  int hop_samples() const {
    return static_cast<int>(std::lround(hop_ms * sample_rate / 1000.0));
  }
  int n_bins() const { return fft_size / 2 + 1; }
  int feature_dim() const { return n_mels * (2 * splice_context + 1); }
  double frame_hop_seconds() const { return subsample * hop_ms / 1000.0; }

  void validate() const {
    if (win_samples() > fft_size)
      throw std::invalid_argument("FeatureConfig: window longer than fft_size");
    if (fft_size <= 0 || (fft_size & (fft_size - 1)) != 0)
      throw std::invalid_argument("FeatureConfig: fft_size must be a power of two");
    if (subsample < 1 || splice_context < 0 || n_mels < 1)
      throw std::invalid_argument("FeatureConfig: bad subsample/splice/mels");
  }

  int raw_frames(std::size_t n_samples) const {
    const int win = win_samples();
    if (static_cast<int>(n_samples) < win) return 0;
    return 1 + static_cast<int>((n_samples - static_cast<std::size_t>(win)) /
                                static_cast<std::size_t>(hop_samples()));
  }
  int spliced_frames(std::size_t n_samples) const {
    const int t = raw_frames(n_samples);
    return (t + subsample - 1) / subsample;
  }
};

struct Spectrogram {
  int frames = 0;
  int bins = 0;
  std::vector<std::complex<double>> d;  // row-major frames x bins
  std::complex<double>& at(int f, int b) { return d[static_cast<std::size_t>(f) * bins + b]; }
  std::complex<double> at(int f, int b) const {
    return d[static_cast<std::size_t>(f) * bins + b];
  }
};

struct SplicedFeatures {
  Matrix frames;           // T x (n_mels * (2*context+1))
  double frame_hop = 0.03; // seconds
};

namespace detail {

/// In-place iterative radix-2 FFT (n a power of two).
inline void fft_radix2(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * M_PI / static_cast<double>(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

inline std::vector<double> hann_window(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    w[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / n);
  return w;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

}  // namespace detail

/// Computes one windowed, zero-padded FFT frame (bins = fft_size/2 + 1).
inline void stft_frame(const double* samples, const std::vector<double>& window,
                       int fft_size, std::complex<double>* out) {
  std::vector<std::complex<double>> buf(static_cast<std::size_t>(fft_size),
                                        std::complex<double>(0.0, 0.0));
  const int win = static_cast<int>(window.size());
  for (int i = 0; i < win; ++i)
    buf[static_cast<std::size_t>(i)] = samples[i] * window[static_cast<std::size_t>(i)];
  detail::fft_radix2(buf);
  const int bins = fft_size / 2 + 1;
  for (int b = 0; b < bins; ++b) out[b] = buf[static_cast<std::size_t>(b)];
}

/// Hann-windowed STFT; frames are hop-spaced and zero-padded to fft_size.
inline Spectrogram stft(const std::vector<double>& waveform, const FeatureConfig& cfg) {
  cfg.validate();
  const int win = cfg.win_samples();
  const int hop = cfg.hop_samples();
  if (static_cast<int>(waveform.size()) < win)
    throw std::invalid_argument("stft: waveform shorter than one window");
  const int t_raw = cfg.raw_frames(waveform.size());
  Spectrogram s;
  s.frames = t_raw;
  s.bins = cfg.n_bins();
  s.d.resize(static_cast<std::size_t>(t_raw) * s.bins);
  const auto window = detail::hann_window(win);
  for (int f = 0; f < t_raw; ++f) {
    stft_frame(waveform.data() + static_cast<std::size_t>(f) * hop, window, cfg.fft_size,
               s.d.data() + static_cast<std::size_t>(f) * s.bins);
  }
  return s;
}

/// Triangular Mel filterbank (HTK scale) over power-spectrum bins.
inline Matrix mel_filterbank(const FeatureConfig& cfg) {
  const int bins = cfg.n_bins();
  Matrix fb(cfg.n_mels, bins);
  const double mel_lo = detail::hz_to_mel(cfg.mel_fmin_hz);
  const double mel_hi = detail::hz_to_mel(cfg.mel_fmax_hz);
  std::vector<double> edges(static_cast<std::size_t>(cfg.n_mels) + 2);
  for (int i = 0; i < cfg.n_mels + 2; ++i)
    edges[static_cast<std::size_t>(i)] =
        detail::mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (cfg.n_mels + 1));
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double lo = edges[static_cast<std::size_t>(m)];
    const double mid = edges[static_cast<std::size_t>(m) + 1];
    const double hi = edges[static_cast<std::size_t>(m) + 2];
    for (int b = 0; b < bins; ++b) {
      const double f = static_cast<double>(b) * cfg.sample_rate / cfg.fft_size;
      double w = 0.0;
      if (f > lo && f < mid) w = (f - lo) / (mid - lo);
      else if (f >= mid && f < hi) w = (hi - f) / (hi - mid);
      fb.at(m, b) = w;
    }
  }
  return fb;
}

/// Power spectrum -> Mel filterbank -> natural log(value + floor).
/// When normalize is set, subtracts the per-utterance mean of each dimension.
inline Matrix log_mel(const Spectrogram& spec, const FeatureConfig& cfg,
                      bool normalize = true) {
  const Matrix fb = mel_filterbank(cfg);
  Matrix out(spec.frames, cfg.n_mels);
  std::vector<double> power(static_cast<std::size_t>(spec.bins));
  for (int f = 0; f < spec.frames; ++f) {
    for (int b = 0; b < spec.bins; ++b) power[static_cast<std::size_t>(b)] = std::norm(spec.at(f, b));
    for (int m = 0; m < cfg.n_mels; ++m) {
      double acc = 0.0;
      const double* w = fb.row_ptr(m);
      for (int b = 0; b < spec.bins; ++b) acc += w[b] * power[static_cast<std::size_t>(b)];
      out.at(f, m) = std::log(acc + cfg.log_floor);
    }
  }
  if (normalize && out.rows > 0) {
    for (int m = 0; m < cfg.n_mels; ++m) {
      double mean = 0.0;
      for (int f = 0; f < out.rows; ++f) mean += out.at(f, m);
      mean /= out.rows;
      for (int f = 0; f < out.rows; ++f) out.at(f, m) -= mean;
    }
  }
  return out;
}

/// Keeps every `subsample`-th raw frame and concatenates the symmetric
/// context window around it (boundary frames replicated).
inline SplicedFeatures subsample_splice(const Matrix& logmel, const FeatureConfig& cfg) {
  if (logmel.rows < 1) throw std::invalid_argument("subsample_splice: empty input");
  const int ctx = cfg.splice_context;
  const int t_out = (logmel.rows + cfg.subsample - 1) / cfg.subsample;
  SplicedFeatures out;
  out.frame_hop = cfg.frame_hop_seconds();
  out.frames = Matrix(t_out, logmel.cols * (2 * ctx + 1));
  for (int t = 0; t < t_out; ++t) {
    const int center = t * cfg.subsample;
    double* dst = out.frames.row_ptr(t);
    for (int k = -ctx; k <= ctx; ++k) {
      int src = std::clamp(center + k, 0, logmel.rows - 1);
      const double* s = logmel.row_ptr(src);
      std::copy(s, s + logmel.cols, dst);
      dst += logmel.cols;
    }
  }
  return out;
}

/// Streaming-compatible splice: each kept frame concatenates the 2*ctx+1
/// most recent raw frames [i-2*ctx .. i] (left edge replicated), so no
/// future context is used. Input log-mel must be unnormalized; causal
/// running-mean normalization happens downstream.
inline SplicedFeatures causal_subsample_splice(const Matrix& logmel,
                                               const FeatureConfig& cfg) {
  if (logmel.rows < 1) throw std::invalid_argument("causal_subsample_splice: empty input");
  const int ctx = cfg.splice_context;
  const int width = 2 * ctx + 1;
  const int t_out = (logmel.rows + cfg.subsample - 1) / cfg.subsample;
  SplicedFeatures out;
  out.frame_hop = cfg.frame_hop_seconds();
  out.frames = Matrix(t_out, logmel.cols * width);
  for (int t = 0; t < t_out; ++t) {
    const int center = t * cfg.subsample;
    double* dst = out.frames.row_ptr(t);
    for (int k = -(width - 1); k <= 0; ++k) {
      int src = std::clamp(center + k, 0, logmel.rows - 1);
      const double* s = logmel.row_ptr(src);
      std::copy(s, s + logmel.cols, dst);
      dst += logmel.cols;
    }
  }
  return out;
}

/// Offline pipeline: waveform -> normalized log-mel -> symmetric splice.
inline SplicedFeatures spliced_features(const std::vector<double>& waveform,
                                        const FeatureConfig& cfg) {
  return subsample_splice(log_mel(stft(waveform, cfg), cfg, /*normalize=*/true), cfg);
}

/// Causal pipeline: waveform -> unnormalized log-mel -> past-only splice.
/// The model's causal forward applies running-mean normalization.
inline SplicedFeatures causal_spliced_features(const std::vector<double>& waveform,
                                               const FeatureConfig& cfg) {
  return causal_subsample_splice(log_mel(stft(waveform, cfg), cfg, /*normalize=*/false),
                                 cfg);
}

}  // namespace msvad
