#pragma once

#include "msvad/numcore/tape.hpp"
#include "msvad/rng.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace msvad {

enum class AttractorMode { Single, Dual };

struct ModelConfig {
  int d_model = 256;
  int n_layers = 4;
  int n_heads = 4;
  int ffn_dim = 2048;
  double dropout = 0.1;
  int saa_heads = 4;  // 4 for single, 8 for dual
  AttractorMode attractor_mode = AttractorMode::Single;
  bool causal = false;
  int input_dim = 161;
  bool pos_encoding = true;

  void validate() const {
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || ffn_dim <= 0 || input_dim <= 0)
      throw std::invalid_argument("ModelConfig: dimensions must be positive");
    if (d_model % 2 != 0) throw std::invalid_argument("ModelConfig: d_model must be even");
    if (d_model % n_heads != 0)
      throw std::invalid_argument("ModelConfig: d_model not divisible by n_heads");
    if (d_model % saa_heads != 0)
      throw std::invalid_argument("ModelConfig: d_model not divisible by saa_heads");
    if (attractor_mode == AttractorMode::Dual && saa_heads % 2 != 0)
      throw std::invalid_argument("ModelConfig: dual mode needs an even saa head count");
    if (dropout < 0.0 || dropout >= 1.0)
      throw std::invalid_argument("ModelConfig: dropout must be in [0,1)");
  }

  bool dual() const { return attractor_mode == AttractorMode::Dual; }
};

/// Sinusoidal positional encoding:
///   PE(pos, 2i)   = sin(pos / 10000^(2i/d))
///   PE(pos, 2i+1) = cos(pos / 10000^(2i/d))
inline Matrix positional_encoding(int t, int d) {
  if (t < 1) throw std::invalid_argument("positional_encoding: T must be >= 1");
  if (d <= 0 || d % 2 != 0) throw std::invalid_argument("positional_encoding: d must be even");
  Matrix pe(t, d);
  for (int i = 0; i < d / 2; ++i) {
    const double denom = std::pow(10000.0, 2.0 * i / d);
    for (int pos = 0; pos < t; ++pos) {
      pe.at(pos, 2 * i) = std::sin(pos / denom);
      pe.at(pos, 2 * i + 1) = std::cos(pos / denom);
    }
  }
  return pe;
}

inline Matrix causal_attention_mask(int t) {
  Matrix m(t, t);
  for (int r = 0; r < t; ++r)
    for (int c = 0; c <= r; ++c) m.at(r, c) = 1.0;
  return m;
}

namespace detail {

inline void init_linear(Param& w, Rng& rng) {
  const double lim = std::sqrt(6.0 / (w.value.rows + w.value.cols));
  for (double& v : w.value.d) v = rng.uniform(-lim, lim);
}

inline void create_linear(ParamStore& ps, const std::string& name, int in, int out,
                          Rng& rng) {
  init_linear(ps.create(name + ".w", in, out), rng);
  ps.create(name + ".b", 1, out);
}

inline void create_layernorm(ParamStore& ps, const std::string& name, int dim) {
  Param& g = ps.create(name + ".g", 1, dim);
  std::fill(g.value.d.begin(), g.value.d.end(), 1.0);
  ps.create(name + ".b", 1, dim);
}

}  // namespace detail

/// Creates and initializes all learnable parameters for the config.
/// Linear weights use fan-based scaled-uniform init; biases start at zero;
/// layer-norm gains at one. Creation order is fixed, which pins both the
/// init draw order and checkpoint traversal order.
inline ParamStore init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamStore ps;
  detail::create_linear(ps, "input", cfg.input_dim, cfg.d_model, rng);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "enc" + std::to_string(l);
    detail::create_layernorm(ps, p + ".ln1", cfg.d_model);
    detail::create_linear(ps, p + ".attn.q", cfg.d_model, cfg.d_model, rng);
    detail::create_linear(ps, p + ".attn.k", cfg.d_model, cfg.d_model, rng);
    detail::create_linear(ps, p + ".attn.v", cfg.d_model, cfg.d_model, rng);
    detail::create_linear(ps, p + ".attn.o", cfg.d_model, cfg.d_model, rng);
    detail::create_layernorm(ps, p + ".ln2", cfg.d_model);
    detail::create_linear(ps, p + ".ffn.1", cfg.d_model, cfg.ffn_dim, rng);
    detail::create_linear(ps, p + ".ffn.2", cfg.ffn_dim, cfg.d_model, rng);
  }
  detail::create_layernorm(ps, "enc.out_ln", cfg.d_model);
  detail::create_linear(ps, "saa.q", cfg.d_model, cfg.d_model, rng);
  detail::create_linear(ps, "saa.k", cfg.d_model, cfg.d_model, rng);
  detail::create_linear(ps, "saa.v", cfg.d_model, cfg.d_model, rng);
  if (cfg.dual()) {
    detail::create_linear(ps, "saa.g0", cfg.d_model / 2, cfg.d_model, rng);
    detail::create_linear(ps, "saa.g1", cfg.d_model / 2, cfg.d_model, rng);
  } else {
    detail::create_linear(ps, "saa.o", cfg.d_model, cfg.d_model, rng);
    detail::create_layernorm(ps, "saa.ln", cfg.d_model);
    detail::create_linear(ps, "saa.main", cfg.d_model, cfg.d_model, rng);
    detail::create_linear(ps, "saa.bg", cfg.d_model, cfg.d_model, rng);
  }
  return ps;
}

namespace detail {

inline Var linear(Tape& t, Var x, ParamStore& ps, const std::string& name) {
  return t.add_rowvec(t.matmul(x, t.use(ps.at(name + ".w"))), t.use(ps.at(name + ".b")));
}

/// Per-head scaled dot-product self-attention; returns the per-head context
/// vectors in head order (no output projection).
inline std::vector<Var> attention_heads(Tape& t, Var x, ParamStore& ps,
                                        const std::string& prefix, int n_heads,
                                        const Matrix* mask) {
  const int d = t.val(x).cols;
  const int dh = d / n_heads;
  Var q = linear(t, x, ps, prefix + ".q");
  Var k = linear(t, x, ps, prefix + ".k");
  Var v = linear(t, x, ps, prefix + ".v");
  std::vector<Var> ctx;
  ctx.reserve(static_cast<std::size_t>(n_heads));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < n_heads; ++h) {
    Var qh = t.slice_cols(q, h * dh, (h + 1) * dh);
    Var kh = t.slice_cols(k, h * dh, (h + 1) * dh);
    Var vh = t.slice_cols(v, h * dh, (h + 1) * dh);
    Var scores = t.scale(t.matmul_nt(qh, kh), inv_sqrt);
    Var probs = t.softmax_rows(scores, mask);
    ctx.push_back(t.matmul(probs, vh));
  }
  return ctx;
}

}  // namespace detail

/// Encoder: linear input projection (+ positional encoding), then pre-norm
/// Transformer blocks with ReLU feed-forward, residuals, and dropout in
/// train mode; a final layer norm closes the stack. The causal flag applies
/// a lower-triangular attention mask.
inline Var encoder_forward(Tape& t, Var features, const ModelConfig& cfg, ParamStore& ps,
                           bool train = false, Rng* rng = nullptr) {
  cfg.validate();
  const Matrix& f = t.val(features);
  if (f.cols != cfg.input_dim)
    throw std::invalid_argument("encoder_forward: feature dim != input_dim");
  const int T = f.rows;
  Matrix mask_m;
  const Matrix* mask = nullptr;
  if (cfg.causal) {
    mask_m = causal_attention_mask(T);
    mask = &mask_m;
  }
  Var x = detail::linear(t, features, ps, "input");
  if (cfg.pos_encoding) x = t.add(x, t.constant(positional_encoding(T, cfg.d_model)));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "enc" + std::to_string(l);
    Var h = t.layernorm(x, t.use(ps.at(p + ".ln1.g")), t.use(ps.at(p + ".ln1.b")));
    Var heads = t.concat_cols(detail::attention_heads(t, h, ps, p + ".attn", cfg.n_heads, mask));
    Var att = t.add_rowvec(t.matmul(heads, t.use(ps.at(p + ".attn.o.w"))),
                           t.use(ps.at(p + ".attn.o.b")));
    x = t.add(x, t.dropout(att, cfg.dropout, rng, train));
    Var h2 = t.layernorm(x, t.use(ps.at(p + ".ln2.g")), t.use(ps.at(p + ".ln2.b")));
    Var ff = detail::linear(t, t.relu(detail::linear(t, h2, ps, p + ".ffn.1")), ps, p + ".ffn.2");
    x = t.add(x, t.dropout(ff, cfg.dropout, rng, train));
  }
  return t.layernorm(x, t.use(ps.at("enc.out_ln.g")), t.use(ps.at("enc.out_ln.b")));
}

struct SaaVars {
  Var main;       // 1 x D, or T x D per-step when causal
  Var bg;
  bool per_step = false;
};

/// Self-attention attractor module.
///
/// Single mode: full attention sublayer (head concat -> output projection ->
/// residual + layer norm), time-averaged, then two learned maps produce the
/// main and background attractors.
///
/// Dual mode: the heads split into two equal groups; each group's
/// concatenated head outputs are time-averaged and projected by a
/// group-specific map (group 0 -> main, group 1 -> background). Group 1's
/// value projections therefore never reach the main attractor.
///
/// In causal mode the time average becomes a per-step prefix mean, yielding
/// one attractor pair per frame.
inline SaaVars saa_forward(Tape& t, Var embeddings, const ModelConfig& cfg, ParamStore& ps) {
  const int T = t.val(embeddings).rows;
  Matrix mask_m;
  const Matrix* mask = nullptr;
  if (cfg.causal) {
    mask_m = causal_attention_mask(T);
    mask = &mask_m;
  }
  auto heads = detail::attention_heads(t, embeddings, ps, "saa", cfg.saa_heads, mask);
  SaaVars out;
  out.per_step = cfg.causal;
  auto pool = [&](Var x) { return cfg.causal ? t.prefix_mean_rows(x) : t.mean_rows(x); };
  if (cfg.dual()) {
    const int g = cfg.saa_heads / 2;
    std::vector<Var> g0(heads.begin(), heads.begin() + g);
    std::vector<Var> g1(heads.begin() + g, heads.end());
    out.main = t.add_rowvec(t.matmul(pool(t.concat_cols(g0)), t.use(ps.at("saa.g0.w"))),
                            t.use(ps.at("saa.g0.b")));
    out.bg = t.add_rowvec(t.matmul(pool(t.concat_cols(g1)), t.use(ps.at("saa.g1.w"))),
                          t.use(ps.at("saa.g1.b")));
  } else {
    Var m = t.concat_cols(heads);
    Var o = t.add_rowvec(t.matmul(m, t.use(ps.at("saa.o.w"))), t.use(ps.at("saa.o.b")));
    Var s = t.layernorm(t.add(embeddings, o), t.use(ps.at("saa.ln.g")),
                        t.use(ps.at("saa.ln.b")));
    Var pooled = pool(s);
    out.main = detail::linear(t, pooled, ps, "saa.main");
    out.bg = detail::linear(t, pooled, ps, "saa.bg");
  }
  return out;
}

/// Frame activity probabilities: sigmoid(E A^T). With per-step attractors
/// each frame is scored against its own attractor pair.
inline Var output_head(Tape& t, Var embeddings, const SaaVars& saa) {
  if (saa.per_step) {
    Var y0 = t.sigmoid(t.rows_dot(embeddings, saa.main));
    Var y1 = t.sigmoid(t.rows_dot(embeddings, saa.bg));
    return t.concat_cols({y0, y1});
  }
  Var a = t.concat_rows({saa.main, saa.bg});
  return t.sigmoid(t.matmul_nt(embeddings, a));
}

struct ModelOutput {
  Var embeddings;
  SaaVars attractors;
  Var probs;  // T x 2
};

/// Full forward pass. In causal mode the raw (unnormalized) causal-spliced
/// features are expected and running-mean normalization over frames <= t is
/// applied first, so the whole composition is prefix-deterministic; offline
/// mode expects per-utterance-normalized features.
inline ModelOutput model_forward(Tape& t, Var features, const ModelConfig& cfg,
                                 ParamStore& ps, bool train = false, Rng* rng = nullptr) {
  Var f = features;
  if (cfg.causal) f = t.sub(f, t.prefix_mean_rows(f));
  ModelOutput out;
  out.embeddings = encoder_forward(t, f, cfg, ps, train, rng);
  out.attractors = saa_forward(t, out.embeddings, cfg, ps);
  out.probs = output_head(t, out.embeddings, out.attractors);
  return out;
}

/// Eval-mode convenience: probabilities on a local tape. Safe to call
/// concurrently on shared parameters: without backward() the tape never
/// touches param gradients.
inline Matrix forward_probs(const Matrix& features, const ModelConfig& cfg,
                            const ParamStore& ps) {
  Tape t;
  auto& mutable_ps = const_cast<ParamStore&>(ps);
  return t.val(model_forward(t, t.constant(features), cfg, mutable_ps).probs);
}

}  // namespace msvad
