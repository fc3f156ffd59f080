#pragma once

#include "msvad/features.hpp"
#include "msvad/model.hpp"
#include "msvad/training.hpp"
#include "msvad/wav.hpp"

#include <Eigen/Core>

#include <cmath>
#include <complex>
#include <deque>
#include <limits>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace msvad {

struct FrameDecision {
  double p_main = 0.0;
  double p_bg = 0.0;
  bool is_main_active = false;
  bool is_bg_active = false;
};

namespace detail {

using ERow = Eigen::Matrix<double, 1, Eigen::Dynamic, Eigen::RowMajor>;
using ERowMap = Eigen::Map<ERow>;
using ERowCMap = Eigen::Map<const ERow>;

/// y = x * W + b for 1 x in row vectors.
inline std::vector<double> linear_row(const std::vector<double>& x, const Param& w,
                                      const Param& b) {
  std::vector<double> y(static_cast<std::size_t>(w.value.cols));
  ERowMap(y.data(), w.value.cols).noalias() =
      ERowCMap(x.data(), static_cast<Eigen::Index>(x.size())) * emap(w.value);
  for (int j = 0; j < w.value.cols; ++j) y[static_cast<std::size_t>(j)] += b.value.d[static_cast<std::size_t>(j)];
  return y;
}

/// Row layer norm with the same arithmetic as the tape op (eps 1e-5).
inline std::vector<double> layernorm_row(const std::vector<double>& x, const Param& g,
                                         const Param& b, double eps = 1e-5) {
  const int n = static_cast<int>(x.size());
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= n;
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  std::vector<double> y(x.size());
  for (int j = 0; j < n; ++j)
    y[static_cast<std::size_t>(j)] = (x[static_cast<std::size_t>(j)] - mu) * inv *
                                         g.value.d[static_cast<std::size_t>(j)] +
                                     b.value.d[static_cast<std::size_t>(j)];
  return y;
}

/// Appends a row to a grow-by-rows matrix.
inline void append_row(Matrix& m, const std::vector<double>& row) {
  if (m.cols == 0) m.cols = static_cast<int>(row.size());
  m.d.insert(m.d.end(), row.begin(), row.end());
  m.rows += 1;
}

}  // namespace detail

/// Per-session causal inference state: per-layer key/value caches, SAA
/// caches, running attractor-pool sums, the frame counter, and the running
/// feature-mean accumulator. After t pushes the state is a pure function of
/// the first t frames, and push outputs match the offline causal forward.
class StreamSession {
 public:
  StreamSession(const ModelConfig& cfg, const ParamStore& params, double threshold = 0.5)
      : cfg_(cfg), params_(&params), threshold_(threshold) {
    cfg_.validate();
    if (!cfg_.causal)
      throw std::invalid_argument("StreamSession: checkpoint is not causal");
    k_cache_.resize(static_cast<std::size_t>(cfg_.n_layers));
    v_cache_.resize(static_cast<std::size_t>(cfg_.n_layers));
    feat_sum_.assign(static_cast<std::size_t>(cfg_.input_dim), 0.0);
    if (cfg_.dual()) {
      pool_sum_a_.assign(static_cast<std::size_t>(cfg_.d_model / 2), 0.0);
      pool_sum_b_.assign(static_cast<std::size_t>(cfg_.d_model / 2), 0.0);
    } else {
      pool_sum_a_.assign(static_cast<std::size_t>(cfg_.d_model), 0.0);
    }
  }

  long frames() const { return t_; }
  double threshold() const { return threshold_; }

  /// Processes one spliced feature frame; returns this frame's decision.
  FrameDecision push_frame(std::span<const double> feature) {
    if (poisoned_) throw std::runtime_error("StreamSession: poisoned by a prior error");
    if (static_cast<int>(feature.size()) != cfg_.input_dim)
      throw std::invalid_argument("push_frame: feature dim mismatch");
    try {
      return push_impl(feature);
    } catch (...) {
      poisoned_ = true;
      throw;
    }
  }

  std::size_t last_push_attention_macs() const { return last_attention_macs_; }

  std::size_t cache_bytes() const {
    std::size_t n = 0;
    for (const auto& m : k_cache_) n += m.d.size();
    for (const auto& m : v_cache_) n += m.d.size();
    n += saa_k_.d.size() + saa_v_.d.size();
    return n * sizeof(double);
  }

 private:
  FrameDecision push_impl(std::span<const double> feature) {
    const ParamStore& ps = *params_;
    const int d = cfg_.d_model;
    const double inv_t = 1.0 / static_cast<double>(t_ + 1);

    // running-mean feature normalization over frames 1..t
    std::vector<double> x(feature.begin(), feature.end());
    for (std::size_t j = 0; j < x.size(); ++j) {
      feat_sum_[j] += x[j];
      x[j] -= feat_sum_[j] * inv_t;
    }

    // input projection + positional encoding row
    x = detail::linear_row(x, ps.at("input.w"), ps.at("input.b"));
    if (cfg_.pos_encoding) {
      for (int i = 0; i < d / 2; ++i) {
        const double denom = std::pow(10000.0, 2.0 * i / d);
        x[static_cast<std::size_t>(2 * i)] += std::sin(t_ / denom);
        x[static_cast<std::size_t>(2 * i + 1)] += std::cos(t_ / denom);
      }
    }

    last_attention_macs_ = 0;
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "enc" + std::to_string(l);
      auto h = detail::layernorm_row(x, ps.at(p + ".ln1.g"), ps.at(p + ".ln1.b"));
      auto att = attend(h, ps, p + ".attn", cfg_.n_heads,
                        k_cache_[static_cast<std::size_t>(l)],
                        v_cache_[static_cast<std::size_t>(l)]);
      att = detail::linear_row(att, ps.at(p + ".attn.o.w"), ps.at(p + ".attn.o.b"));
      for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(j)] += att[static_cast<std::size_t>(j)];
      auto h2 = detail::layernorm_row(x, ps.at(p + ".ln2.g"), ps.at(p + ".ln2.b"));
      auto f1 = detail::linear_row(h2, ps.at(p + ".ffn.1.w"), ps.at(p + ".ffn.1.b"));
      for (double& v : f1) v = v > 0.0 ? v : 0.0;
      auto f2 = detail::linear_row(f1, ps.at(p + ".ffn.2.w"), ps.at(p + ".ffn.2.b"));
      for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(j)] += f2[static_cast<std::size_t>(j)];
    }
    const auto e = detail::layernorm_row(x, ps.at("enc.out_ln.g"), ps.at("enc.out_ln.b"));

    // SAA step
    auto saa_ctx = attend(e, ps, "saa", cfg_.saa_heads, saa_k_, saa_v_);
    std::vector<double> a_main, a_bg;
    if (cfg_.dual()) {
      const int half = d / 2;
      for (int j = 0; j < half; ++j) {
        pool_sum_a_[static_cast<std::size_t>(j)] += saa_ctx[static_cast<std::size_t>(j)];
        pool_sum_b_[static_cast<std::size_t>(j)] += saa_ctx[static_cast<std::size_t>(half + j)];
      }
      std::vector<double> pa(static_cast<std::size_t>(half)), pb(static_cast<std::size_t>(half));
      for (int j = 0; j < half; ++j) {
        pa[static_cast<std::size_t>(j)] = pool_sum_a_[static_cast<std::size_t>(j)] * inv_t;
        pb[static_cast<std::size_t>(j)] = pool_sum_b_[static_cast<std::size_t>(j)] * inv_t;
      }
      a_main = detail::linear_row(pa, ps.at("saa.g0.w"), ps.at("saa.g0.b"));
      a_bg = detail::linear_row(pb, ps.at("saa.g1.w"), ps.at("saa.g1.b"));
    } else {
      auto o = detail::linear_row(saa_ctx, ps.at("saa.o.w"), ps.at("saa.o.b"));
      for (int j = 0; j < d; ++j) o[static_cast<std::size_t>(j)] += e[static_cast<std::size_t>(j)];
      auto s = detail::layernorm_row(o, ps.at("saa.ln.g"), ps.at("saa.ln.b"));
      std::vector<double> pooled(static_cast<std::size_t>(d));
      for (int j = 0; j < d; ++j) {
        pool_sum_a_[static_cast<std::size_t>(j)] += s[static_cast<std::size_t>(j)];
        pooled[static_cast<std::size_t>(j)] = pool_sum_a_[static_cast<std::size_t>(j)] * inv_t;
      }
      a_main = detail::linear_row(pooled, ps.at("saa.main.w"), ps.at("saa.main.b"));
      a_bg = detail::linear_row(pooled, ps.at("saa.bg.w"), ps.at("saa.bg.b"));
    }

    double z0 = 0.0, z1 = 0.0;
    for (int j = 0; j < d; ++j) {
      z0 += e[static_cast<std::size_t>(j)] * a_main[static_cast<std::size_t>(j)];
      z1 += e[static_cast<std::size_t>(j)] * a_bg[static_cast<std::size_t>(j)];
    }
    FrameDecision out;
    out.p_main = 1.0 / (1.0 + std::exp(-z0));
    out.p_bg = 1.0 / (1.0 + std::exp(-z1));
    out.is_main_active = out.p_main >= threshold_;
    out.is_bg_active = out.p_bg >= threshold_;
    t_ += 1;
    return out;
  }

  /// One causal attention row: projects q/k/v for this frame, appends k/v to
  /// the cache, and attends over the cached t+1 keys per head.
  std::vector<double> attend(const std::vector<double>& h, const ParamStore& ps,
                             const std::string& prefix, int n_heads, Matrix& kc,
                             Matrix& vc) {
    const int d = static_cast<int>(h.size());
    const int dh = d / n_heads;
    auto q = detail::linear_row(h, ps.at(prefix + ".q.w"), ps.at(prefix + ".q.b"));
    auto k = detail::linear_row(h, ps.at(prefix + ".k.w"), ps.at(prefix + ".k.b"));
    auto v = detail::linear_row(h, ps.at(prefix + ".v.w"), ps.at(prefix + ".v.b"));
    detail::append_row(kc, k);
    detail::append_row(vc, v);
    const int rows = kc.rows;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> out(static_cast<std::size_t>(d), 0.0);
    std::vector<double> scores(static_cast<std::size_t>(rows));
    for (int head = 0; head < n_heads; ++head) {
      const int off = head * dh;
      double mx = -std::numeric_limits<double>::infinity();
      for (int r = 0; r < rows; ++r) {
        double s = 0.0;
        const double* kr = kc.row_ptr(r) + off;
        for (int j = 0; j < dh; ++j) s += q[static_cast<std::size_t>(off + j)] * kr[j];
        s *= inv_sqrt;
        scores[static_cast<std::size_t>(r)] = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (int r = 0; r < rows; ++r) {
        scores[static_cast<std::size_t>(r)] = std::exp(scores[static_cast<std::size_t>(r)] - mx);
        z += scores[static_cast<std::size_t>(r)];
      }
      for (int r = 0; r < rows; ++r) {
        const double w = scores[static_cast<std::size_t>(r)] / z;
        const double* vr = vc.row_ptr(r) + off;
        for (int j = 0; j < dh; ++j) out[static_cast<std::size_t>(off + j)] += w * vr[j];
      }
      last_attention_macs_ += 2 * static_cast<std::size_t>(rows) * static_cast<std::size_t>(dh);
    }
    return out;
  }

  ModelConfig cfg_;
  const ParamStore* params_;
  double threshold_;
  std::vector<Matrix> k_cache_, v_cache_;
  Matrix saa_k_, saa_v_;
  std::vector<double> feat_sum_;
  std::vector<double> pool_sum_a_, pool_sum_b_;
  long t_ = 0;
  bool poisoned_ = false;
  std::size_t last_attention_macs_ = 0;
};

/// Builds a streaming session from a checkpoint; requires a causal model.
inline StreamSession init_stream(const Checkpoint& ckpt, double threshold = 0.5) {
  return StreamSession(ckpt.model, ckpt.params, threshold);
}

/// Incremental feature front-end: consumes raw samples, emits past-only
/// spliced log-mel frames as soon as every third raw STFT frame completes.
class CausalFeatureExtractor {
 public:
  explicit CausalFeatureExtractor(const FeatureConfig& cfg)
      : cfg_(cfg), window_(detail::hann_window(cfg.win_samples())), fb_(mel_filterbank(cfg)) {
    cfg_.validate();
  }

  /// Returns the spliced frames completed by these samples.
  std::vector<std::vector<double>> push_samples(const double* x, std::size_t n) {
    buf_.insert(buf_.end(), x, x + n);
    std::vector<std::vector<double>> out;
    const int win = cfg_.win_samples();
    const int hop = cfg_.hop_samples();
    while (static_cast<int>(buf_.size()) - consumed_ >= win) {
      std::vector<std::complex<double>> spec(static_cast<std::size_t>(cfg_.n_bins()));
      stft_frame(buf_.data() + consumed_, window_, cfg_.fft_size, spec.data());
      std::vector<double> mel(static_cast<std::size_t>(cfg_.n_mels));
      for (int m = 0; m < cfg_.n_mels; ++m) {
        double acc = 0.0;
        const double* w = fb_.row_ptr(m);
        for (int b = 0; b < cfg_.n_bins(); ++b) acc += w[b] * std::norm(spec[static_cast<std::size_t>(b)]);
        mel[static_cast<std::size_t>(m)] = std::log(acc + cfg_.log_floor);
      }
      recent_.push_back(std::move(mel));
      const int width = 2 * cfg_.splice_context + 1;
      while (static_cast<int>(recent_.size()) > width) recent_.pop_front();
      if (raw_index_ % cfg_.subsample == 0) {
        std::vector<double> spliced;
        spliced.reserve(static_cast<std::size_t>(cfg_.feature_dim()));
        for (int k = width - 1; k >= 0; --k) {
          const int back = std::min(k, static_cast<int>(recent_.size()) - 1);
          const auto& row = recent_[recent_.size() - 1 - static_cast<std::size_t>(back)];
          spliced.insert(spliced.end(), row.begin(), row.end());
        }
        out.push_back(std::move(spliced));
      }
      raw_index_ += 1;
      consumed_ += hop;
      if (consumed_ >= 1 << 16) {  // bounded rolling buffer
        buf_.erase(buf_.begin(), buf_.begin() + consumed_);
        consumed_ = 0;
      }
    }
    return out;
  }

 private:
  FeatureConfig cfg_;
  std::vector<double> window_;
  Matrix fb_;
  std::vector<double> buf_;
  int consumed_ = 0;
  long raw_index_ = 0;
  std::deque<std::vector<double>> recent_;
};

struct StreamRunResult {
  std::vector<FrameDecision> decisions;
  double frame_hop = 0.03;
};

/// Streams a WAV file through the causal model, feeding samples in small
/// chunks; optional JSON line per frame to `json_lines`.
inline StreamRunResult stream_wav(const std::string& path, const Checkpoint& ckpt,
                                  const FeatureConfig& fcfg, double threshold = 0.5,
                                  std::ostream* json_lines = nullptr) {
  WavData wav = wav_read(path);
  auto samples = resample_linear(wav.samples, wav.sample_rate, fcfg.sample_rate);
  StreamSession session = init_stream(ckpt, threshold);
  CausalFeatureExtractor fx(fcfg);
  StreamRunResult out;
  out.frame_hop = fcfg.frame_hop_seconds();
  const std::size_t chunk = 400;
  for (std::size_t off = 0; off < samples.size(); off += chunk) {
    const std::size_t n = std::min(chunk, samples.size() - off);
    for (auto& frame : fx.push_samples(samples.data() + off, n)) {
      FrameDecision dec = session.push_frame(frame);
      if (json_lines) {
        const double ts = static_cast<double>(out.decisions.size()) * out.frame_hop;
        json line{{"t_seconds", ts}, {"p_main", dec.p_main}, {"p_bg", dec.p_bg},
                  {"main", dec.is_main_active}, {"bg", dec.is_bg_active}};
        (*json_lines) << line.dump() << "\n";
      }
      out.decisions.push_back(dec);
    }
  }
  return out;
}

}  // namespace msvad
