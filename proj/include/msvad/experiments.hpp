#pragma once

#include "msvad/corpus.hpp"
#include "msvad/metrics.hpp"
#include "msvad/mixgen.hpp"
#include "msvad/streaming.hpp"
#include "msvad/training.hpp"

#include <memory>
#include <optional>
#include <ostream>
#include <thread>
#include <vector>

namespace msvad {

/// Options for generating a batch of mixtures; each sample's randomness is
/// derived from (seed, index), so generation is reproducible and
/// embarrassingly parallel.
struct MixtureBatchOptions {
  int count = 100;
  double duration = 15.0;
  std::vector<TurnKind> turn_pool{TurnKind::B2};  // drawn per sample
  std::vector<std::pair<double, double>> volume_pool{{0.2, 0.8}};
  std::optional<NoiseSpec> noise;
  std::optional<ReverbSpec> reverb;
  int n_speakers_lo = 2;
  int n_speakers_hi = 2;
  std::uint64_t seed = 0;
  int jobs = 0;
};

inline MixtureSpec draw_mixture_spec(const MixtureBatchOptions& opt, Rng& rng) {
  MixtureSpec spec;
  spec.duration = opt.duration;
  spec.n_speakers = opt.n_speakers_lo +
                    static_cast<int>(rng.uniform_index(
                        static_cast<std::size_t>(opt.n_speakers_hi - opt.n_speakers_lo + 1)));
  spec.main_index = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(spec.n_speakers)));
  const TurnKind turn = opt.turn_pool[rng.uniform_index(opt.turn_pool.size())];
  spec.set_background(TurnConfig::preset(turn));
  const auto& vol = opt.volume_pool[rng.uniform_index(opt.volume_pool.size())];
  spec.volume_lo = vol.first;
  spec.volume_hi = vol.second;
  spec.noise = opt.noise;
  spec.reverb = opt.reverb;
  return spec;
}

inline std::vector<LabeledMixture> generate_mixtures(const MixtureBatchOptions& opt,
                                                     const UtteranceProvider& corpus,
                                                     const FeatureConfig& fcfg = FeatureConfig{}) {
  std::vector<LabeledMixture> out(static_cast<std::size_t>(opt.count));
  const int jobs = detail::resolve_jobs(opt.jobs);
  auto work = [&](int lo, int hi) {
    for (int i = lo; i < hi; ++i) {
      Rng rng = Rng::derive(opt.seed, 0x3130c5ULL, static_cast<std::uint64_t>(i));
      MixtureSpec spec = draw_mixture_spec(opt, rng);
      out[static_cast<std::size_t>(i)] = synthesize_mixture(spec, corpus, rng, fcfg);
    }
  };
  std::vector<std::thread> pool;
  const int chunk = (opt.count + jobs - 1) / jobs;
  for (int w = 0; w < jobs; ++w) {
    const int lo = std::min(opt.count, w * chunk);
    const int hi = std::min(opt.count, lo + chunk);
    if (lo < hi) pool.emplace_back(work, lo, hi);
  }
  for (auto& th : pool) th.join();
  return out;
}

inline std::vector<TrainSample> to_train_samples(const std::vector<LabeledMixture>& mixes,
                                                 const FeatureConfig& fcfg, bool causal,
                                                 int jobs = 0) {
  std::vector<TrainSample> out(mixes.size());
  const int nw = detail::resolve_jobs(jobs);
  auto work = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i)
      out[i] = make_train_sample(mixes[i], fcfg, causal);
  };
  std::vector<std::thread> pool;
  const std::size_t chunk = (mixes.size() + static_cast<std::size_t>(nw) - 1) /
                            static_cast<std::size_t>(nw);
  for (int w = 0; w < nw; ++w) {
    const std::size_t lo = std::min(mixes.size(), static_cast<std::size_t>(w) * chunk);
    const std::size_t hi = std::min(mixes.size(), lo + chunk);
    if (lo < hi) pool.emplace_back(work, lo, hi);
  }
  for (auto& th : pool) th.join();
  return out;
}

struct EvalOutcome {
  double der = 0.0;
  double der_main = 0.0;
  double f1_main = 0.0;
};

/// Scores a checkpoint on prepared test samples. When causal_eval_labels is
/// set, targets are causal-relabeled first (Table-5-style "causal data").
inline EvalOutcome eval_model(const Checkpoint& ckpt, const std::vector<TrainSample>& test,
                              double threshold = 0.5, bool causal_eval_labels = false,
                              int jobs = 0) {
  if (test.empty()) throw std::invalid_argument("eval_model: empty test set");
  std::vector<Matrix> refs(test.size()), hyps(test.size());
  const int nw = detail::resolve_jobs(jobs);
  auto work = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      Matrix labels = test[i].labels;
      if (causal_eval_labels) {
        auto [l, m] = apply_causal_relabel(labels, test[i].mask, main_onset_frame(labels));
        labels = std::move(l);
      }
      refs[i] = std::move(labels);
      hyps[i] = binarize(forward_probs(test[i].feats, ckpt.model, ckpt.params), threshold);
    }
  };
  std::vector<std::thread> pool;
  const std::size_t chunk = (test.size() + static_cast<std::size_t>(nw) - 1) /
                            static_cast<std::size_t>(nw);
  for (int w = 0; w < nw; ++w) {
    const std::size_t lo = std::min(test.size(), static_cast<std::size_t>(w) * chunk);
    const std::size_t hi = std::min(test.size(), lo + chunk);
    if (lo < hi) pool.emplace_back(work, lo, hi);
  }
  for (auto& th : pool) th.join();
  EvalOutcome out;
  out.der = der_pooled(refs, hyps).der;
  out.der_main = der_main_pooled(refs, hyps);
  std::vector<std::pair<Matrix, Matrix>> pairs;
  pairs.reserve(refs.size());
  for (std::size_t i = 0; i < refs.size(); ++i) pairs.emplace_back(refs[i], hyps[i]);
  out.f1_main = macro_f1(pairs);
  return out;
}

// ---------------------------------------------------------------------------
// experiment presets (desk-scale table reproductions)
// ---------------------------------------------------------------------------

struct PresetScale {
  int n_train = 200;
  int n_test = 40;
  double duration = 8.0;
  int epochs = 6;
  int batch_size = 16;
  long long warmup = 600;
  int jobs = 0;
  std::uint64_t seed = 7;

  static PresetScale tiny() {
    PresetScale s;
    s.n_train = 24;
    s.n_test = 8;
    s.duration = 4.0;
    s.epochs = 2;
    s.batch_size = 8;
    s.warmup = 40;
    return s;
  }
};

namespace detail {

inline ModelConfig preset_model(AttractorMode mode, bool causal, bool pos_encoding,
                                const PresetScale& s) {
  ModelConfig m = desk_model_config(mode, causal);
  if (s.n_train <= 32) {  // tiny smoke scale
    m.d_model = 32;
    m.n_layers = 1;
    m.ffn_dim = 64;
    m.saa_heads = mode == AttractorMode::Dual ? 4 : 2;
  }
  m.pos_encoding = pos_encoding;
  return m;
}

inline TrainConfig preset_train(const PresetScale& s, bool causal_labels, std::uint64_t seed) {
  TrainConfig t;
  t.batch_size = s.batch_size;
  t.epochs = s.epochs;
  t.warmup_steps = s.warmup;
  t.seed = seed;
  t.jobs = s.jobs;
  t.causal_labels = causal_labels;
  return t;
}

}  // namespace detail

struct PresetRow {
  std::string name;
  EvalOutcome metrics;
};

struct PresetReport {
  std::string preset;
  std::vector<PresetRow> rows;
};

inline json to_json(const PresetReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"config", row.name},
                    {"der", row.metrics.der},
                    {"der_main", row.metrics.der_main},
                    {"f1_main", row.metrics.f1_main}});
  }
  return json{{"preset", r.preset}, {"rows", rows}};
}

/// Speech-ratio grid: one dual model trained across configs, scored per
/// background configuration (M0, B1-B4 rows).
inline PresetReport run_speech_ratio_grid(const PresetScale& scale,
                                          const UtteranceProvider& voices,
                                          const FeatureConfig& fcfg,
                                          std::ostream* log = nullptr) {
  MixtureBatchOptions train_opt;
  train_opt.count = scale.n_train;
  train_opt.duration = scale.duration;
  train_opt.turn_pool = {TurnKind::M0, TurnKind::B1, TurnKind::B2, TurnKind::B3, TurnKind::B4};
  train_opt.volume_pool = {{0.2, 0.8}};
  train_opt.noise = NoiseSpec{NoiseSpec::Kind::White, 20.0, {}};
  train_opt.seed = scale.seed;
  train_opt.jobs = scale.jobs;
  auto train_samples = to_train_samples(generate_mixtures(train_opt, voices, fcfg), fcfg,
                                        /*causal=*/false, scale.jobs);
  const ModelConfig mcfg = detail::preset_model(AttractorMode::Dual, false, true, scale);
  TrainResult tr = train(train_samples, mcfg, detail::preset_train(scale, false, scale.seed), log);

  PresetReport report;
  report.preset = "speech-ratio-grid";
  const TurnKind kinds[5] = {TurnKind::M0, TurnKind::B1, TurnKind::B2, TurnKind::B3,
                             TurnKind::B4};
  for (int k = 0; k < 5; ++k) {
    MixtureBatchOptions test_opt = train_opt;
    test_opt.count = scale.n_test;
    test_opt.turn_pool = {kinds[k]};
    test_opt.seed = scale.seed + 1000 + static_cast<std::uint64_t>(k);
    auto test_samples = to_train_samples(generate_mixtures(test_opt, voices, fcfg), fcfg,
                                         false, scale.jobs);
    report.rows.push_back({turn_kind_name(kinds[k]),
                           eval_model(tr.best, test_samples, 0.5, false, scale.jobs)});
  }
  return report;
}

/// Volume grid: one dual model, scored on test sets mixed at each of the
/// three background volume scalings.
inline PresetReport run_volume_grid(const PresetScale& scale, const UtteranceProvider& voices,
                                    const FeatureConfig& fcfg, std::ostream* log = nullptr) {
  MixtureBatchOptions train_opt;
  train_opt.count = scale.n_train;
  train_opt.duration = scale.duration;
  train_opt.turn_pool = {TurnKind::B2};
  train_opt.volume_pool = {{0.1, 0.4}, {0.2, 0.8}, {1.0, 1.0}};
  train_opt.noise = NoiseSpec{NoiseSpec::Kind::White, 20.0, {}};
  train_opt.seed = scale.seed;
  train_opt.jobs = scale.jobs;
  auto train_samples = to_train_samples(generate_mixtures(train_opt, voices, fcfg), fcfg,
                                        false, scale.jobs);
  const ModelConfig mcfg = detail::preset_model(AttractorMode::Dual, false, true, scale);
  TrainResult tr = train(train_samples, mcfg, detail::preset_train(scale, false, scale.seed), log);

  PresetReport report;
  report.preset = "volume-grid";
  const std::pair<double, double> vols[3] = {{0.1, 0.4}, {0.2, 0.8}, {1.0, 1.0}};
  const char* names[3] = {"0.1-0.4", "0.2-0.8", "1"};
  for (int k = 0; k < 3; ++k) {
    MixtureBatchOptions test_opt = train_opt;
    test_opt.count = scale.n_test;
    test_opt.volume_pool = {vols[k]};
    test_opt.seed = scale.seed + 2000 + static_cast<std::uint64_t>(k);
    auto test_samples = to_train_samples(generate_mixtures(test_opt, voices, fcfg), fcfg,
                                         false, scale.jobs);
    report.rows.push_back({names[k], eval_model(tr.best, test_samples, 0.5, false, scale.jobs)});
  }
  return report;
}

/// Positional-encoding ablation: same data and seed, PE on vs off.
inline PresetReport run_pe_ablation(const PresetScale& scale, const UtteranceProvider& voices,
                                    const FeatureConfig& fcfg, std::ostream* log = nullptr) {
  MixtureBatchOptions opt;
  opt.count = scale.n_train;
  opt.duration = scale.duration;
  opt.turn_pool = {TurnKind::B2};
  opt.volume_pool = {{0.2, 0.8}};
  opt.noise = NoiseSpec{NoiseSpec::Kind::White, 20.0, {}};
  opt.seed = scale.seed;
  opt.jobs = scale.jobs;
  auto train_samples = to_train_samples(generate_mixtures(opt, voices, fcfg), fcfg, false,
                                        scale.jobs);
  MixtureBatchOptions test_opt = opt;
  test_opt.count = scale.n_test;
  test_opt.seed = scale.seed + 3000;
  auto test_samples = to_train_samples(generate_mixtures(test_opt, voices, fcfg), fcfg,
                                       false, scale.jobs);
  PresetReport report;
  report.preset = "pe-ablation";
  for (bool pe : {true, false}) {
    const ModelConfig mcfg = detail::preset_model(AttractorMode::Dual, false, pe, scale);
    TrainResult tr = train(train_samples, mcfg, detail::preset_train(scale, false, scale.seed), log);
    report.rows.push_back({pe ? "with-pos-encoding" : "without-pos-encoding",
                           eval_model(tr.best, test_samples, 0.5, false, scale.jobs)});
  }
  return report;
}

/// Causal comparison mirroring the offline/causal/causal-aware-label rows.
inline PresetReport run_causal_comparison(const PresetScale& scale,
                                          const UtteranceProvider& voices,
                                          const FeatureConfig& fcfg,
                                          std::ostream* log = nullptr) {
  MixtureBatchOptions opt;
  opt.count = scale.n_train;
  opt.duration = scale.duration;
  opt.turn_pool = {TurnKind::B2};
  opt.volume_pool = {{0.2, 0.8}};
  opt.noise = NoiseSpec{NoiseSpec::Kind::White, 20.0, {}};
  opt.seed = scale.seed;
  opt.jobs = scale.jobs;
  auto mixes = generate_mixtures(opt, voices, fcfg);
  MixtureBatchOptions test_opt = opt;
  test_opt.count = scale.n_test;
  test_opt.seed = scale.seed + 4000;
  auto test_mixes = generate_mixtures(test_opt, voices, fcfg);

  PresetReport report;
  report.preset = "causal-vs-noncausal";

  // offline dual
  {
    auto tr_s = to_train_samples(mixes, fcfg, false, scale.jobs);
    auto te_s = to_train_samples(test_mixes, fcfg, false, scale.jobs);
    const ModelConfig mcfg = detail::preset_model(AttractorMode::Dual, false, true, scale);
    TrainResult tr = train(tr_s, mcfg, detail::preset_train(scale, false, scale.seed), log);
    report.rows.push_back({"dual-saa", eval_model(tr.best, te_s, 0.5, false, scale.jobs)});
  }
  // causal, standard vs causal-aware labels
  auto tr_c = to_train_samples(mixes, fcfg, true, scale.jobs);
  auto te_c = to_train_samples(test_mixes, fcfg, true, scale.jobs);
  for (bool causal_labels : {false, true}) {
    const ModelConfig mcfg = detail::preset_model(AttractorMode::Dual, true, true, scale);
    TrainResult tr =
        train(tr_c, mcfg, detail::preset_train(scale, causal_labels, scale.seed), log);
    report.rows.push_back(
        {causal_labels ? "dual-saa-causal+causal-labels" : "dual-saa-causal",
         eval_model(tr.best, te_c, 0.5, causal_labels, scale.jobs)});
  }
  return report;
}

inline PresetReport run_preset(const std::string& name, const PresetScale& scale,
                               const UtteranceProvider& voices, const FeatureConfig& fcfg,
                               std::ostream* log = nullptr) {
  if (name == "speech-ratio-grid") return run_speech_ratio_grid(scale, voices, fcfg, log);
  if (name == "volume-grid") return run_volume_grid(scale, voices, fcfg, log);
  if (name == "pe-ablation") return run_pe_ablation(scale, voices, fcfg, log);
  if (name == "causal-vs-noncausal") return run_causal_comparison(scale, voices, fcfg, log);
  throw std::invalid_argument("unknown preset: " + name);
}

}  // namespace msvad
