#pragma once

#include "msvad/config_io.hpp"
#include "msvad/features.hpp"
#include "msvad/metrics.hpp"
#include "msvad/mixgen.hpp"
#include "msvad/model.hpp"
#include "msvad/numcore/checkpoint.hpp"
#include "msvad/numcore/tape.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>
#include <thread>
#include <vector>

namespace msvad {

/// Noam schedule: lr = d_model^-0.5 * min(step^-0.5, step * warmup^-1.5).
inline double noam_lr(long long step, int d_model, long long warmup_steps) {
  if (step < 1) throw std::invalid_argument("noam_lr: step must be >= 1");
  if (warmup_steps < 1) throw std::invalid_argument("noam_lr: warmup must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup_steps);
  return std::pow(static_cast<double>(d_model), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

/// Weighted masked BCE over a T x 2 probability matrix (plain evaluation;
/// the differentiable twin lives on the tape). loss = L_main + alpha * L_others,
/// each a masked per-frame mean; probabilities clamp to [eps, 1-eps].
inline double weighted_bce(const Matrix& probs, const Matrix& target, const Matrix& mask,
                           double alpha, double eps = 1e-7) {
  check_shape(probs.cols == 2 && target.same_shape(probs) && mask.same_shape(probs),
              "weighted_bce");
  double sum[2] = {0.0, 0.0};
  double cnt[2] = {0.0, 0.0};
  for (int t = 0; t < probs.rows; ++t) {
    for (int c = 0; c < 2; ++c) {
      if (mask.at(t, c) == 0.0) continue;
      const double y = target.at(t, c);
      const double p = std::clamp(probs.at(t, c), eps, 1.0 - eps);
      sum[c] += -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
      cnt[c] += 1.0;
    }
  }
  const double l0 = cnt[0] > 0.0 ? sum[0] / cnt[0] : 0.0;
  const double l1 = cnt[1] > 0.0 ? sum[1] / cnt[1] : 0.0;
  return l0 + alpha * l1;
}

struct TrainConfig {
  int batch_size = 64;
  int epochs = 100;
  long long warmup_steps = 100000;
  double alpha = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  std::uint64_t seed = 0;
  bool causal_labels = false;
  double val_fraction = 0.1;
  int jobs = 0;  // 0 = hardware concurrency
  double threshold = 0.5;

  void validate() const {
    if (batch_size < 1 || epochs < 0) throw std::invalid_argument("TrainConfig: bad sizes");
    if (warmup_steps < 1) throw std::invalid_argument("TrainConfig: warmup_steps >= 1");
    if (alpha < 0.0) throw std::invalid_argument("TrainConfig: alpha >= 0");
    if (val_fraction < 0.0 || val_fraction >= 1.0)
      throw std::invalid_argument("TrainConfig: val_fraction in [0,1)");
  }
};

inline json to_json(const TrainConfig& c) {
  return json{{"batch_size", c.batch_size}, {"epochs", c.epochs},
              {"warmup_steps", c.warmup_steps}, {"alpha", c.alpha},
              {"beta1", c.beta1}, {"beta2", c.beta2}, {"adam_eps", c.adam_eps},
              {"seed", c.seed},   {"causal_labels", c.causal_labels},
              {"val_fraction", c.val_fraction}, {"jobs", c.jobs},
              {"threshold", c.threshold}};
}

inline TrainConfig train_config_from_json(const json& j) {
  require_known_keys(j,
                     {"batch_size", "epochs", "warmup_steps", "alpha", "beta1", "beta2",
                      "adam_eps", "seed", "causal_labels", "val_fraction", "jobs",
                      "threshold"},
                     "train");
  TrainConfig c;
  maybe_get(j, "batch_size", c.batch_size);
  maybe_get(j, "epochs", c.epochs);
  maybe_get(j, "warmup_steps", c.warmup_steps);
  maybe_get(j, "alpha", c.alpha);
  maybe_get(j, "beta1", c.beta1);
  maybe_get(j, "beta2", c.beta2);
  maybe_get(j, "adam_eps", c.adam_eps);
  maybe_get(j, "seed", c.seed);
  maybe_get(j, "causal_labels", c.causal_labels);
  maybe_get(j, "val_fraction", c.val_fraction);
  maybe_get(j, "jobs", c.jobs);
  maybe_get(j, "threshold", c.threshold);
  c.validate();
  return c;
}

/// Laptop-scale preset: 2 layers, D=64, 2 heads, FFN 256.
inline ModelConfig desk_model_config(AttractorMode mode, bool causal) {
  ModelConfig c;
  c.d_model = 64;
  c.n_layers = 2;
  c.n_heads = 2;
  c.ffn_dim = 256;
  c.dropout = 0.1;
  c.attractor_mode = mode;
  c.saa_heads = mode == AttractorMode::Dual ? 8 : 4;
  c.causal = causal;
  return c;
}

inline TrainConfig desk_train_config() {
  TrainConfig c;
  c.batch_size = 16;
  c.warmup_steps = 2000;
  c.epochs = 10;
  return c;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// First/second moment buffers aligned with ParamStore creation order.
struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;

  static AdamState zeros_like(const ParamStore& ps) {
    AdamState s;
    s.m.reserve(ps.size());
    s.v.reserve(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) {
      s.m.emplace_back(ps[i].value.rows, ps[i].value.cols);
      s.v.emplace_back(ps[i].value.rows, ps[i].value.cols);
    }
    return s;
  }
};

/// Standard bias-corrected Adam update from the accumulated param gradients.
/// `step` is the 1-based count of updates including this one.
inline void adam_step(ParamStore& params, AdamState& opt, long long step, double lr,
                      const TrainConfig& cfg) {
  if (opt.m.size() != params.size()) throw std::invalid_argument("adam_step: state mismatch");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = params[i];
    if (p.grad.empty()) p.zero_grad();
    Matrix& m = opt.m[i];
    Matrix& v = opt.v[i];
    for (std::size_t k = 0; k < p.value.d.size(); ++k) {
      const double g = p.grad.d[k];
      m.d[k] = cfg.beta1 * m.d[k] + (1.0 - cfg.beta1) * g;
      v.d[k] = cfg.beta2 * v.d[k] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m.d[k] / bc1;
      const double vhat = v.d[k] / bc2;
      p.value.d[k] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
}

// ---------------------------------------------------------------------------
// dataset
// ---------------------------------------------------------------------------

struct TrainSample {
  Matrix feats;   // T x input_dim
  Matrix labels;  // T x 2
  Matrix mask;    // T x 2
};

/// Feature extraction for one mixture; causal models use the past-only
/// splice of unnormalized log-mel (running-mean normalization happens inside
/// the causal forward).
inline TrainSample make_train_sample(const LabeledMixture& mix, const FeatureConfig& fcfg,
                                     bool causal_features) {
  TrainSample s;
  s.feats = causal_features ? causal_spliced_features(mix.waveform, fcfg).frames
                            : spliced_features(mix.waveform, fcfg).frames;
  if (s.feats.rows != mix.labels.rows)
    throw std::runtime_error("make_train_sample: label/feature frame mismatch");
  s.labels = mix.labels;
  s.mask = mix.loss_mask;
  return s;
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

struct Checkpoint {
  ModelConfig model;
  ParamStore params;
  AdamState opt;  // empty moments when inference-only
  long long step = 0;
  int epoch = 0;  // completed epochs

  bool has_opt() const { return opt.m.size() == params.size() && !opt.m.empty(); }

  Checkpoint clone() const {
    Checkpoint c;
    c.model = model;
    c.params = params.clone_values();
    c.opt = opt;
    c.step = step;
    c.epoch = epoch;
    return c;
  }
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  FlatContainer fc;
  json meta{{"kind", "msvad-checkpoint"},
            {"model", to_json(ckpt.model)},
            {"step", ckpt.step},
            {"epoch", ckpt.epoch},
            {"has_opt", ckpt.has_opt()}};
  fc.meta_json = meta.dump();
  pack_params(fc, ckpt.params, "param.");
  if (ckpt.has_opt()) {
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
      fc.add("opt.m." + ckpt.params[i].name, ckpt.opt.m[i]);
      fc.add("opt.v." + ckpt.params[i].name, ckpt.opt.v[i]);
    }
  }
  fc.save(path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  FlatContainer fc = FlatContainer::load(path);
  json meta = json::parse(fc.meta_json);
  if (meta.value("kind", "") != "msvad-checkpoint")
    throw std::runtime_error("load_checkpoint: not a checkpoint file");
  Checkpoint ckpt;
  ckpt.model = model_config_from_json(meta.at("model"));
  ckpt.step = meta.value("step", 0LL);
  ckpt.epoch = meta.value("epoch", 0);
  Rng init_rng(0);
  ckpt.params = init_params(ckpt.model, init_rng);
  unpack_params(fc, ckpt.params, "param.");
  if (meta.value("has_opt", false)) {
    ckpt.opt = AdamState::zeros_like(ckpt.params);
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
      const Matrix* m = fc.find("opt.m." + ckpt.params[i].name);
      const Matrix* v = fc.find("opt.v." + ckpt.params[i].name);
      if (!m || !v) throw std::runtime_error("load_checkpoint: missing optimizer moments");
      ckpt.opt.m[i] = *m;
      ckpt.opt.v[i] = *v;
    }
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct EpochMetrics {
  int epoch = 0;
  double mean_loss = 0.0;
  double val_der_main = 0.0;
  double val_f1_main = 0.0;
  double lr = 0.0;
  long long step = 0;
};

struct TrainResult {
  Checkpoint best;  // lowest validation DER_main
  Checkpoint last;
  std::vector<EpochMetrics> history;
};

namespace detail {

inline int resolve_jobs(int jobs) {
  if (jobs > 0) return jobs;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Deterministic Fisher-Yates with the derived rng.
inline void shuffle_indices(std::vector<std::size_t>& idx, Rng rng) {
  for (std::size_t i = 0; i + 1 < idx.size(); ++i) {
    const std::size_t j = i + rng.uniform_index(idx.size() - i);
    std::swap(idx[i], idx[j]);
  }
}

struct PreparedSample {
  const Matrix* feats = nullptr;
  Matrix labels;
  Matrix mask;
};

/// Runs forward/backward for samples [begin,end) of the batch against a
/// private clone of the parameters; per-sample dropout noise is derived from
/// (seed, step, dataset index) so results do not depend on scheduling.
inline double batch_worker(const std::vector<PreparedSample>& data,
                           const std::vector<std::size_t>& batch, std::size_t begin,
                           std::size_t end, const ModelConfig& mcfg,
                           const TrainConfig& tcfg, long long step, ParamStore& params) {
  double loss_sum = 0.0;
  for (std::size_t b = begin; b < end; ++b) {
    const std::size_t di = batch[b];
    const PreparedSample& s = data[di];
    Tape tape;
    Rng drop = Rng::derive(tcfg.seed ^ 0xd40f0ffULL, static_cast<std::uint64_t>(step), di);
    ModelOutput out =
        model_forward(tape, tape.constant(*s.feats), mcfg, params, /*train=*/true, &drop);
    Var loss = tape.weighted_bce(out.probs, s.labels, s.mask, tcfg.alpha);
    loss_sum += tape.val(loss).d[0];
    tape.backward(loss);
  }
  return loss_sum;
}

}  // namespace detail

/// Full training loop: shuffled mini-batches, Noam-scheduled Adam, per-epoch
/// validation (pooled DER_main + macro F1), best-checkpoint tracking.
/// Deterministic for a fixed (config, dataset, jobs): all randomness is
/// derived from (seed, epoch/step, sample index) and gradient reduction
/// order is fixed. Resuming from a checkpoint at an epoch boundary continues
/// the identical trajectory. Throws on an empty dataset; aborts with a
/// diagnostic if the loss turns non-finite.
inline TrainResult train(const std::vector<TrainSample>& dataset, const ModelConfig& mcfg,
                         const TrainConfig& tcfg, std::ostream* log = nullptr,
                         const Checkpoint* resume = nullptr) {
  mcfg.validate();
  tcfg.validate();
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  for (const auto& s : dataset)
    if (s.feats.cols != mcfg.input_dim)
      throw std::invalid_argument("train: sample feature dim != model input_dim");

  const bool relabel = tcfg.causal_labels && mcfg.causal;
  std::vector<detail::PreparedSample> data(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    data[i].feats = &dataset[i].feats;
    if (relabel) {
      auto [l, m] = apply_causal_relabel(dataset[i].labels, dataset[i].mask,
                                         main_onset_frame(dataset[i].labels));
      data[i].labels = std::move(l);
      data[i].mask = std::move(m);
    } else {
      data[i].labels = dataset[i].labels;
      data[i].mask = dataset[i].mask;
    }
  }

  // deterministic train/validation split
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  detail::shuffle_indices(order, Rng::derive(tcfg.seed, 0x5b117ULL, 0));
  auto n_val = static_cast<std::size_t>(std::llround(tcfg.val_fraction * data.size()));
  if (tcfg.val_fraction > 0.0 && n_val == 0 && data.size() >= 2) n_val = 1;
  std::vector<std::size_t> val_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  if (train_idx.empty()) train_idx = order;
  if (val_idx.empty()) val_idx = train_idx;

  Checkpoint state;
  if (resume) {
    state = resume->clone();
    if (!state.has_opt()) state.opt = AdamState::zeros_like(state.params);
  } else {
    state.model = mcfg;
    Rng init_rng = Rng::derive(tcfg.seed, 0x171ULL, 0);
    state.params = init_params(mcfg, init_rng);
    state.opt = AdamState::zeros_like(state.params);
  }

  const int jobs = detail::resolve_jobs(tcfg.jobs);
  TrainResult result;
  result.history.reserve(static_cast<std::size_t>(tcfg.epochs));
  double best_der = std::numeric_limits<double>::infinity();

  auto evaluate = [&](std::vector<EpochMetrics>& hist, int epoch, double mean_loss,
                      double lr) {
    std::vector<Matrix> refs(val_idx.size()), hyps(val_idx.size());
    std::vector<std::pair<Matrix, Matrix>> pairs(val_idx.size());
    const auto eval_range = [&](std::size_t lo, std::size_t hi) {
      for (std::size_t i = lo; i < hi; ++i) {
        const detail::PreparedSample& s = data[val_idx[i]];
        Matrix probs = forward_probs(*s.feats, state.model, state.params);
        refs[i] = s.labels;
        hyps[i] = binarize(probs, tcfg.threshold);
        pairs[i] = {refs[i], hyps[i]};
      }
    };
    std::vector<std::thread> pool;
    const std::size_t chunk = (val_idx.size() + static_cast<std::size_t>(jobs) - 1) /
                              static_cast<std::size_t>(jobs);
    for (int w = 0; w < jobs; ++w) {
      const std::size_t lo = std::min(val_idx.size(), static_cast<std::size_t>(w) * chunk);
      const std::size_t hi = std::min(val_idx.size(), lo + chunk);
      if (lo < hi) pool.emplace_back(eval_range, lo, hi);
    }
    for (auto& th : pool) th.join();
    EpochMetrics m;
    m.epoch = epoch;
    m.mean_loss = mean_loss;
    m.lr = lr;
    m.step = state.step;
    m.val_der_main = der_main_pooled(refs, hyps);
    m.val_f1_main = macro_f1(pairs);
    hist.push_back(m);
    if (log) {
      json line{{"epoch", m.epoch},       {"loss", m.mean_loss},
                {"val_der_main", m.val_der_main}, {"val_f1_main", m.val_f1_main},
                {"lr", m.lr},             {"step", m.step}};
      (*log) << line.dump() << "\n" << std::flush;
    }
    if (m.val_der_main < best_der) {
      best_der = m.val_der_main;
      result.best = state.clone();
    }
  };

  const int start_epoch = resume ? resume->epoch : 0;
  for (int epoch = start_epoch; epoch < tcfg.epochs; ++epoch) {
    std::vector<std::size_t> idx = train_idx;
    detail::shuffle_indices(idx, Rng::derive(tcfg.seed, 0xe90cULL,
                                             static_cast<std::uint64_t>(epoch)));
    double loss_acc = 0.0;
    std::size_t n_seen = 0;
    double lr = 0.0;
    for (std::size_t off = 0; off < idx.size(); off += static_cast<std::size_t>(tcfg.batch_size)) {
      const std::size_t bn = std::min(static_cast<std::size_t>(tcfg.batch_size),
                                      idx.size() - off);
      std::vector<std::size_t> batch(idx.begin() + static_cast<std::ptrdiff_t>(off),
                                     idx.begin() + static_cast<std::ptrdiff_t>(off + bn));
      state.step += 1;
      const int nw = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(jobs), bn));
      std::vector<ParamStore> worker_params;
      std::vector<double> worker_loss(static_cast<std::size_t>(nw), 0.0);
      worker_params.reserve(static_cast<std::size_t>(nw));
      for (int w = 0; w < nw; ++w) {
        worker_params.push_back(state.params.clone_values());
        worker_params.back().zero_grads();
      }
      std::vector<std::thread> pool;
      const std::size_t chunk = (bn + static_cast<std::size_t>(nw) - 1) / static_cast<std::size_t>(nw);
      for (int w = 0; w < nw; ++w) {
        const std::size_t lo = std::min(bn, static_cast<std::size_t>(w) * chunk);
        const std::size_t hi = std::min(bn, lo + chunk);
        if (lo >= hi) continue;
        pool.emplace_back([&, w, lo, hi] {
          worker_loss[static_cast<std::size_t>(w)] = detail::batch_worker(
              data, batch, lo, hi, state.model, tcfg, state.step,
              worker_params[static_cast<std::size_t>(w)]);
        });
      }
      for (auto& th : pool) th.join();

      // fixed-order reduction keeps runs reproducible
      state.params.zero_grads();
      double batch_loss = 0.0;
      for (int w = 0; w < nw; ++w) {
        batch_loss += worker_loss[static_cast<std::size_t>(w)];
        for (std::size_t p = 0; p < state.params.size(); ++p) {
          axpy(state.params[p].grad, 1.0 / static_cast<double>(bn),
               worker_params[static_cast<std::size_t>(w)][p].grad);
        }
      }
      batch_loss /= static_cast<double>(bn);
      if (!std::isfinite(batch_loss)) {
        throw std::runtime_error("train: diverged (non-finite loss) at epoch " +
                                 std::to_string(epoch) + " step " + std::to_string(state.step));
      }
      loss_acc += batch_loss * static_cast<double>(bn);
      n_seen += bn;
      lr = noam_lr(state.step, state.model.d_model, tcfg.warmup_steps);
      adam_step(state.params, state.opt, state.step, lr, tcfg);
    }
    state.epoch = epoch + 1;
    evaluate(result.history, epoch, n_seen ? loss_acc / static_cast<double>(n_seen) : 0.0, lr);
  }
  if (!result.best.params.size()) result.best = state.clone();
  result.last = std::move(state);
  return result;
}

}  // namespace msvad
