// msvad: enrollment-less main-speaker voice activity detection toolkit.
//
// Subcommands: synth (labeled mixture generation), train, infer (batch),
// stream (frame-by-frame causal inference), eval (DER/F1 scoring),
// experiment (desk-scale table reproductions).

#include "msvad/config_io.hpp"
#include "msvad/corpus.hpp"
#include "msvad/experiments.hpp"
#include "msvad/features.hpp"
#include "msvad/metrics.hpp"
#include "msvad/mixgen.hpp"
#include "msvad/model.hpp"
#include "msvad/report.hpp"
#include "msvad/streaming.hpp"
#include "msvad/training.hpp"
#include "msvad/wav.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using namespace msvad;

namespace {

struct GlobalOpts {
  std::uint64_t seed = 0;
  std::string config_path;
  std::string out;
  int jobs = 0;
};

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file: " + path);
  json j = json::parse(f);
  require_known_keys(j, {"features", "model", "train", "mixture", "synth", "corpus"},
                     "config");
  return j;
}

FeatureConfig features_from(const json& cfg) {
  return cfg.contains("features") ? feature_config_from_json(cfg.at("features"))
                                  : FeatureConfig{};
}

std::unique_ptr<UtteranceProvider> corpus_from(const json& cfg, int sample_rate,
                                               std::uint64_t seed) {
  if (cfg.contains("corpus")) {
    const json& c = cfg.at("corpus");
    require_known_keys(c, {"manifest", "synthetic_speakers", "synthetic_seed"}, "corpus");
    if (c.contains("manifest"))
      return std::make_unique<WavCorpus>(c.at("manifest").get<std::string>(), sample_rate);
    const int n = c.value("synthetic_speakers", 32);
    const std::uint64_t s = c.value("synthetic_seed", seed);
    return std::make_unique<SyntheticVoices>(n, sample_rate, s);
  }
  return std::make_unique<SyntheticVoices>(32, sample_rate, seed);
}

void log_resolved(const std::string& cmd, const json& resolved) {
  std::cerr << "config[" << cmd << "]: " << resolved.dump() << "\n";
}

std::string zero_pad(int v, int width) {
  std::ostringstream ss;
  ss << std::setw(width) << std::setfill('0') << v;
  return ss.str();
}

// ---- synth ----

struct SynthOpts {
  std::string out_dir;
  int count = 10;
};

void cmd_synth(const GlobalOpts& g, const SynthOpts& s) {
  json cfg = load_config_file(g.config_path);
  FeatureConfig fcfg = features_from(cfg);

  MixtureBatchOptions batch;
  batch.count = s.count;
  batch.seed = g.seed;
  batch.jobs = g.jobs;
  if (cfg.contains("synth")) {
    const json& j = cfg.at("synth");
    require_known_keys(
        j, {"duration", "turn", "volume_range", "noise", "reverb", "n_speakers"}, "synth");
    maybe_get(j, "duration", batch.duration);
    if (j.contains("turn")) {
      batch.turn_pool.clear();
      if (j.at("turn").is_array()) {
        for (const auto& t : j.at("turn"))
          batch.turn_pool.push_back(turn_kind_from_name(t.get<std::string>()));
      } else {
        batch.turn_pool.push_back(turn_kind_from_name(j.at("turn").get<std::string>()));
      }
    }
    if (j.contains("volume_range")) {
      batch.volume_pool.clear();
      const json& v = j.at("volume_range");
      if (v.at(0).is_array()) {
        for (const auto& r : v)
          batch.volume_pool.emplace_back(r.at(0).get<double>(), r.at(1).get<double>());
      } else {
        batch.volume_pool.emplace_back(v.at(0).get<double>(), v.at(1).get<double>());
      }
    }
    if (j.contains("noise") && !j.at("noise").is_null()) {
      json holder{{"noise", j.at("noise")}, {"background", "B2"}};
      batch.noise = mixture_spec_from_json(holder).noise;
    }
    if (j.contains("reverb") && !j.at("reverb").is_null()) {
      json holder{{"reverb", j.at("reverb")}, {"background", "B2"}};
      batch.reverb = mixture_spec_from_json(holder).reverb;
    }
    if (j.contains("n_speakers")) {
      const json& n = j.at("n_speakers");
      if (n.is_array()) {
        batch.n_speakers_lo = n.at(0).get<int>();
        batch.n_speakers_hi = n.at(1).get<int>();
      } else {
        batch.n_speakers_lo = batch.n_speakers_hi = n.get<int>();
      }
    }
  }

  auto corpus = corpus_from(cfg, fcfg.sample_rate, g.seed);
  fs::create_directories(s.out_dir);
  json resolved{{"out", s.out_dir}, {"count", batch.count}, {"seed", g.seed},
                {"duration", batch.duration}};
  log_resolved("synth", resolved);

  const int jobs = detail::resolve_jobs(g.jobs);
  std::vector<std::thread> pool;
  const int chunk = (batch.count + jobs - 1) / jobs;
  auto work = [&](int lo, int hi) {
    for (int i = lo; i < hi; ++i) {
      Rng rng = Rng::derive(batch.seed, 0x3130c5ULL, static_cast<std::uint64_t>(i));
      MixtureSpec spec = draw_mixture_spec(batch, rng);
      spec.rng_seed = batch.seed;
      LabeledMixture mix = synthesize_mixture(spec, *corpus, rng, fcfg);
      const std::string stem = zero_pad(i, 6);
      wav_write((fs::path(s.out_dir) / (stem + ".wav")).string(), mix.waveform,
                spec.sample_rate);
      std::ofstream side(fs::path(s.out_dir) / (stem + ".json"));
      side << sidecar_to_json(mix, spec).dump(2) << "\n";
    }
  };
  for (int w = 0; w < jobs; ++w) {
    const int lo = std::min(batch.count, w * chunk);
    const int hi = std::min(batch.count, lo + chunk);
    if (lo < hi) pool.emplace_back(work, lo, hi);
  }
  for (auto& th : pool) th.join();
  std::cout << "wrote " << batch.count << " mixtures to " << s.out_dir << "\n";
}

// ---- train ----

struct TrainOpts {
  std::string data_dir;
  std::string out_ckpt = "model.ckpt";
  bool causal = false;
  bool causal_labels = false;
  bool no_pos_encoding = false;
  double alpha = -1.0;  // <0: keep config value
  std::string metrics_log;
};

std::vector<TrainSample> load_dataset(const std::string& dir, const FeatureConfig& fcfg,
                                      bool causal, int jobs) {
  std::vector<fs::path> wavs;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".wav") wavs.push_back(e.path());
  }
  std::sort(wavs.begin(), wavs.end());
  if (wavs.empty()) throw std::runtime_error("no .wav files in " + dir);
  std::vector<TrainSample> out(wavs.size());
  const int nw = detail::resolve_jobs(jobs);
  std::vector<std::thread> pool;
  const std::size_t chunk = (wavs.size() + static_cast<std::size_t>(nw) - 1) /
                            static_cast<std::size_t>(nw);
  auto work = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      WavData w = wav_read(wavs[i].string());
      auto samples = resample_linear(w.samples, w.sample_rate, fcfg.sample_rate);
      fs::path side = wavs[i];
      side.replace_extension(".json");
      std::ifstream sf(side);
      if (!sf) throw std::runtime_error("missing sidecar for " + wavs[i].string());
      SidecarData sd = sidecar_from_json(json::parse(sf));
      LabeledMixture mix;
      mix.waveform = std::move(samples);
      mix.labels = sd.labels;
      mix.loss_mask = sd.loss_mask;
      mix.frame_hop = sd.frame_hop;
      mix.onset_frame = sd.onset_frame;
      out[i] = make_train_sample(mix, fcfg, causal);
    }
  };
  for (int w = 0; w < nw; ++w) {
    const std::size_t lo = std::min(wavs.size(), static_cast<std::size_t>(w) * chunk);
    const std::size_t hi = std::min(wavs.size(), lo + chunk);
    if (lo < hi) pool.emplace_back(work, lo, hi);
  }
  for (auto& th : pool) th.join();
  return out;
}

void cmd_train(const GlobalOpts& g, const TrainOpts& t) {
  json cfg = load_config_file(g.config_path);
  FeatureConfig fcfg = features_from(cfg);
  ModelConfig mcfg = cfg.contains("model") ? model_config_from_json(cfg.at("model"))
                                           : desk_model_config(AttractorMode::Dual, false);
  TrainConfig tcfg = cfg.contains("train") ? train_config_from_json(cfg.at("train"))
                                           : desk_train_config();
  if (t.causal) mcfg.causal = true;
  if (t.causal_labels) tcfg.causal_labels = true;
  if (t.no_pos_encoding) mcfg.pos_encoding = false;
  if (t.alpha >= 0.0) tcfg.alpha = t.alpha;
  if (g.seed) tcfg.seed = g.seed;
  if (g.jobs) tcfg.jobs = g.jobs;
  mcfg.input_dim = fcfg.feature_dim();
  log_resolved("train", json{{"features", to_json(fcfg)},
                             {"model", to_json(mcfg)},
                             {"train", to_json(tcfg)},
                             {"data", t.data_dir},
                             {"out", t.out_ckpt}});

  auto dataset = load_dataset(t.data_dir, fcfg, mcfg.causal, tcfg.jobs);
  std::ofstream log_file;
  std::ostream* log = &std::cerr;
  if (!t.metrics_log.empty()) {
    log_file.open(t.metrics_log);
    if (!log_file) throw std::runtime_error("cannot open metrics log " + t.metrics_log);
    log = &log_file;
  }
  TrainResult result = train(dataset, mcfg, tcfg, log);
  save_checkpoint(t.out_ckpt, result.best);
  double best_der = 0.0;
  for (const auto& m : result.history) best_der = std::min(best_der == 0.0 ? m.val_der_main : best_der, m.val_der_main);
  std::cout << "saved best checkpoint (val DER_main=" << best_der << ") to " << t.out_ckpt
            << "\n";
}

// ---- infer ----

struct InferOpts {
  std::string ckpt;
  std::string wav;
  std::string out_dir = ".";
  double threshold = 0.5;
  bool dump_features = false;
  bool causal = false;
};

json feature_dump_json(const SplicedFeatures& f) {
  json rows = json::array();
  for (int t = 0; t < f.frames.rows; ++t) {
    json row = json::array();
    for (int c = 0; c < f.frames.cols; ++c) row.push_back(f.frames.at(t, c));
    rows.push_back(row);
  }
  return json{{"T", f.frames.rows},
              {"dim", f.frames.cols},
              {"frame_hop", f.frame_hop},
              {"data", rows}};
}

void cmd_infer(const GlobalOpts& g, const InferOpts& o) {
  json cfg = load_config_file(g.config_path);
  FeatureConfig fcfg = features_from(cfg);
  Checkpoint ckpt = load_checkpoint(o.ckpt);
  if (cfg.contains("model")) {
    const json ours = to_json(model_config_from_json(cfg.at("model")));
    const json theirs = to_json(ckpt.model);
    if (ours != theirs) {
      std::string diff;
      for (auto it = ours.begin(); it != ours.end(); ++it) {
        if (theirs.at(it.key()) != it.value())
          diff += " " + it.key() + "=" + it.value().dump() + "(config)vs" +
                  theirs.at(it.key()).dump() + "(ckpt)";
      }
      throw std::runtime_error("config/checkpoint mismatch:" + diff);
    }
  }
  if (o.causal && !ckpt.model.causal)
    throw std::runtime_error("--causal requested but checkpoint is not causal");
  const bool causal = ckpt.model.causal;
  log_resolved("infer", json{{"ckpt", o.ckpt}, {"wav", o.wav}, {"out", o.out_dir},
                             {"threshold", o.threshold}, {"causal", causal}});

  std::vector<fs::path> files;
  if (fs::is_directory(o.wav)) {
    for (const auto& e : fs::directory_iterator(o.wav))
      if (e.path().extension() == ".wav") files.push_back(e.path());
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(o.wav);
  }
  if (files.empty()) throw std::runtime_error("no wav files at " + o.wav);
  fs::create_directories(o.out_dir);

  for (const auto& f : files) {
    WavData w = wav_read(f.string());
    auto samples = resample_linear(w.samples, w.sample_rate, fcfg.sample_rate);
    SplicedFeatures feats =
        causal ? causal_spliced_features(samples, fcfg) : spliced_features(samples, fcfg);
    Matrix probs = forward_probs(feats.frames, ckpt.model, ckpt.params);
    const std::string stem = f.stem().string();
    {
      std::ofstream pj(fs::path(o.out_dir) / (stem + ".json"));
      pj << prediction_to_json(probs, feats.frame_hop, o.threshold).dump() << "\n";
    }
    {
      std::ofstream rt(fs::path(o.out_dir) / (stem + ".rttm"));
      rttm_write(rt, stem, segments_from_binary(binarize(probs, o.threshold), feats.frame_hop));
    }
    if (o.dump_features) {
      std::ofstream fj(fs::path(o.out_dir) / (stem + ".features.json"));
      fj << feature_dump_json(feats).dump() << "\n";
    }
  }
  std::cout << "inferred " << files.size() << " file(s) -> " << o.out_dir << "\n";
}

// ---- stream ----

struct StreamOpts {
  std::string ckpt;
  std::string wav;
  double threshold = 0.5;
  bool json_lines = false;
  std::string out_dir;
};

void cmd_stream(const GlobalOpts& g, const StreamOpts& o) {
  json cfg = load_config_file(g.config_path);
  FeatureConfig fcfg = features_from(cfg);
  Checkpoint ckpt = load_checkpoint(o.ckpt);
  log_resolved("stream", json{{"ckpt", o.ckpt}, {"wav", o.wav}, {"threshold", o.threshold}});
  StreamRunResult run =
      stream_wav(o.wav, ckpt, fcfg, o.threshold, o.json_lines ? &std::cout : nullptr);
  Matrix binary(static_cast<int>(run.decisions.size()), 2);
  for (int t = 0; t < binary.rows; ++t) {
    binary.at(t, 0) = run.decisions[static_cast<std::size_t>(t)].is_main_active ? 1.0 : 0.0;
    binary.at(t, 1) = run.decisions[static_cast<std::size_t>(t)].is_bg_active ? 1.0 : 0.0;
  }
  const std::string stem = fs::path(o.wav).stem().string();
  if (!o.out_dir.empty()) {
    fs::create_directories(o.out_dir);
    std::ofstream rt(fs::path(o.out_dir) / (stem + ".rttm"));
    rttm_write(rt, stem, segments_from_binary(binary, run.frame_hop));
  } else {
    rttm_write(std::cout, stem, segments_from_binary(binary, run.frame_hop));
  }
}

// ---- eval ----

struct EvalOpts {
  std::string ref_dir;
  std::string hyp_dir;
  double threshold = 0.5;
  std::string out_file;
};

void cmd_eval(const EvalOpts& o) {
  EvalReport report = evaluate_dirs(o.ref_dir, o.hyp_dir, o.threshold);
  const json j = to_json(report);
  if (!o.out_file.empty()) {
    std::ofstream f(o.out_file);
    f << j.dump(2) << "\n";
  }
  std::cout << j.dump(2) << "\n";
}

// ---- experiment ----

struct ExperimentOpts {
  std::string preset;
  bool tiny = false;
  std::string out_file;
};

void cmd_experiment(const GlobalOpts& g, const ExperimentOpts& o) {
  json cfg = load_config_file(g.config_path);
  FeatureConfig fcfg = features_from(cfg);
  PresetScale scale = o.tiny ? PresetScale::tiny() : PresetScale{};
  if (g.seed) scale.seed = g.seed;
  scale.jobs = g.jobs;
  SyntheticVoices voices(24, fcfg.sample_rate, scale.seed + 99);
  log_resolved("experiment", json{{"preset", o.preset}, {"tiny", o.tiny}, {"seed", scale.seed}});
  PresetReport report = run_preset(o.preset, scale, voices, fcfg, &std::cerr);
  const json j = to_json(report);
  if (!o.out_file.empty()) {
    std::ofstream f(o.out_file);
    f << j.dump(2) << "\n";
  }
  std::cout << j.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"msvad: enrollment-less main-speaker voice activity detection"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOpts g;
  app.add_option("--seed", g.seed, "global rng seed");
  app.add_option("--config", g.config_path, "JSON config file");
  app.add_option("--jobs", g.jobs, "worker threads (0 = auto)");

  SynthOpts synth;
  auto* c_synth = app.add_subcommand("synth", "generate labeled mixtures");
  c_synth->add_option("--out", synth.out_dir, "output directory")->required();
  c_synth->add_option("--count", synth.count, "number of mixtures");

  TrainOpts train_o;
  auto* c_train = app.add_subcommand("train", "train a model");
  c_train->add_option("--data", train_o.data_dir, "dataset directory (wav+json)")->required();
  c_train->add_option("--out", train_o.out_ckpt, "output checkpoint path");
  c_train->add_flag("--causal", train_o.causal, "train the causal variant");
  c_train->add_flag("--causal-labels", train_o.causal_labels, "causal-aware label strategy");
  c_train->add_flag("--no-pos-encoding", train_o.no_pos_encoding, "disable positional encoding");
  c_train->add_option("--alpha", train_o.alpha, "background loss weight");
  c_train->add_option("--metrics-log", train_o.metrics_log, "per-epoch JSON metrics file");

  InferOpts infer_o;
  auto* c_infer = app.add_subcommand("infer", "batch inference on wav files");
  c_infer->add_option("--ckpt", infer_o.ckpt, "checkpoint")->required();
  c_infer->add_option("--wav", infer_o.wav, "wav file or directory")->required();
  c_infer->add_option("--out", infer_o.out_dir, "output directory");
  c_infer->add_option("--threshold", infer_o.threshold, "decision threshold");
  c_infer->add_flag("--dump-features", infer_o.dump_features, "write feature matrices");
  c_infer->add_flag("--causal", infer_o.causal, "require the causal path");

  StreamOpts stream_o;
  auto* c_stream = app.add_subcommand("stream", "frame-by-frame causal inference");
  c_stream->add_option("--ckpt", stream_o.ckpt, "causal checkpoint")->required();
  c_stream->add_option("--wav", stream_o.wav, "wav file")->required();
  c_stream->add_option("--threshold", stream_o.threshold, "decision threshold");
  c_stream->add_flag("--json-lines", stream_o.json_lines, "emit one JSON line per frame");
  c_stream->add_option("--out", stream_o.out_dir, "directory for the final RTTM");

  EvalOpts eval_o;
  auto* c_eval = app.add_subcommand("eval", "score predictions against references");
  c_eval->add_option("--ref", eval_o.ref_dir, "reference sidecar directory")->required();
  c_eval->add_option("--hyp", eval_o.hyp_dir, "hypothesis directory")->required();
  c_eval->add_option("--threshold", eval_o.threshold, "decision threshold");
  c_eval->add_option("--out", eval_o.out_file, "write report JSON here");

  ExperimentOpts exp_o;
  auto* c_exp = app.add_subcommand("experiment", "desk-scale table reproductions");
  c_exp->add_option("--preset", exp_o.preset, "speech-ratio-grid|volume-grid|pe-ablation|causal-vs-noncausal")
      ->required();
  c_exp->add_flag("--tiny", exp_o.tiny, "smoke-test scale");
  c_exp->add_option("--out", exp_o.out_file, "write table JSON here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*c_synth) cmd_synth(g, synth);
    else if (*c_train) cmd_train(g, train_o);
    else if (*c_infer) cmd_infer(g, infer_o);
    else if (*c_stream) cmd_stream(g, stream_o);
    else if (*c_eval) cmd_eval(eval_o);
    else if (*c_exp) cmd_experiment(g, exp_o);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error code=invalid_argument msg=\"" << e.what() << "\"\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error code=runtime msg=\"" << e.what() << "\"\n";
    return 1;
  }
  return 0;
}
