#pragma once

#include "msvad/features.hpp"
#include "msvad/mixgen.hpp"
#include "msvad/model.hpp"

#include <json.hpp>

#include <set>
#include <string>

namespace msvad {

using json = nlohmann::json;

/// Rejects keys outside the documented set (typos fail loudly).
inline void require_known_keys(const json& j, const std::set<std::string>& allowed,
                               const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key()))
      throw std::invalid_argument(where + ": unknown key '" + it.key() + "'");
  }
}

template <typename T>
void maybe_get(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

// ---- FeatureConfig ----

inline json to_json(const FeatureConfig& c) {
  return json{{"sample_rate", c.sample_rate}, {"win_ms", c.win_ms},
              {"hop_ms", c.hop_ms},           {"n_mels", c.n_mels},
              {"fft_size", c.fft_size},       {"subsample", c.subsample},
              {"splice_context", c.splice_context}, {"log_floor", c.log_floor},
              {"mel_fmin_hz", c.mel_fmin_hz}, {"mel_fmax_hz", c.mel_fmax_hz}};
}

inline FeatureConfig feature_config_from_json(const json& j) {
  require_known_keys(j,
                     {"sample_rate", "win_ms", "hop_ms", "n_mels", "fft_size", "subsample",
                      "splice_context", "log_floor", "mel_fmin_hz", "mel_fmax_hz"},
                     "features");
  FeatureConfig c;
  maybe_get(j, "sample_rate", c.sample_rate);
  maybe_get(j, "win_ms", c.win_ms);
  maybe_get(j, "hop_ms", c.hop_ms);
  maybe_get(j, "n_mels", c.n_mels);
  maybe_get(j, "fft_size", c.fft_size);
  maybe_get(j, "subsample", c.subsample);
  maybe_get(j, "splice_context", c.splice_context);
  maybe_get(j, "log_floor", c.log_floor);
  maybe_get(j, "mel_fmin_hz", c.mel_fmin_hz);
  maybe_get(j, "mel_fmax_hz", c.mel_fmax_hz);
  c.validate();
  return c;
}

// ---- ModelConfig ----

inline json to_json(const ModelConfig& c) {
  return json{{"d_model", c.d_model},
              {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},
              {"ffn_dim", c.ffn_dim},
              {"dropout", c.dropout},
              {"saa_heads", c.saa_heads},
              {"attractor_mode", c.dual() ? "dual" : "single"},
              {"causal", c.causal},
              {"input_dim", c.input_dim},
              {"pos_encoding", c.pos_encoding}};
}

inline ModelConfig model_config_from_json(const json& j) {
  require_known_keys(j,
                     {"d_model", "n_layers", "n_heads", "ffn_dim", "dropout", "saa_heads",
                      "attractor_mode", "causal", "input_dim", "pos_encoding"},
                     "model");
  ModelConfig c;
  maybe_get(j, "d_model", c.d_model);
  maybe_get(j, "n_layers", c.n_layers);
  maybe_get(j, "n_heads", c.n_heads);
  maybe_get(j, "ffn_dim", c.ffn_dim);
  maybe_get(j, "dropout", c.dropout);
  if (j.contains("attractor_mode")) {
    const std::string m = j.at("attractor_mode").get<std::string>();
    if (m == "single") c.attractor_mode = AttractorMode::Single;
    else if (m == "dual") c.attractor_mode = AttractorMode::Dual;
    else throw std::invalid_argument("model: attractor_mode must be single|dual");
    c.saa_heads = c.dual() ? 8 : 4;
  }
  maybe_get(j, "saa_heads", c.saa_heads);
  maybe_get(j, "causal", c.causal);
  maybe_get(j, "input_dim", c.input_dim);
  maybe_get(j, "pos_encoding", c.pos_encoding);
  c.validate();
  return c;
}

// ---- MixtureSpec ----

inline json to_json(const TurnConfig& c) {
  json j{{"name", turn_kind_name(c.name)},
         {"start_delay", {c.start_delay.lo, c.start_delay.hi}},
         {"voice_dur", {c.voice_dur.lo, c.voice_dur.hi}}};
  if (c.has_silence) j["silence_dur"] = {c.silence_dur.lo, c.silence_dur.hi};
  return j;
}

inline TurnConfig turn_config_from_json(const json& j) {
  if (j.is_string()) return TurnConfig::preset(turn_kind_from_name(j.get<std::string>()));
  require_known_keys(j, {"name", "start_delay", "voice_dur", "silence_dur"}, "turn_config");
  TurnConfig c = TurnConfig::preset(turn_kind_from_name(j.at("name").get<std::string>()));
  auto range = [](const json& v) {
    return SecondsRange{v.at(0).get<double>(), v.at(1).get<double>()};
  };
  if (j.contains("start_delay")) c.start_delay = range(j.at("start_delay"));
  if (j.contains("voice_dur")) c.voice_dur = range(j.at("voice_dur"));
  if (j.contains("silence_dur")) {
    c.silence_dur = range(j.at("silence_dur"));
    c.has_silence = true;
  }
  c.validate();
  return c;
}

inline json to_json(const MixtureSpec& s) {
  json j{{"duration", s.duration},
         {"n_speakers", s.n_speakers},
         {"main_index", s.main_index},
         {"volume_range", {s.volume_lo, s.volume_hi}},
         {"sample_rate", s.sample_rate},
         {"rng_seed", s.rng_seed},
         {"energy_floor_db", s.energy_floor_db}};
  json bg = json::array();
  for (const auto& b : s.background) bg.push_back(to_json(b));
  j["background"] = bg;
  if (s.noise) {
    json n{{"snr_db", s.noise->snr_db}};
    switch (s.noise->kind) {
      case NoiseSpec::Kind::White: n["kind"] = "white"; break;
      case NoiseSpec::Kind::Pink: n["kind"] = "pink"; break;
      case NoiseSpec::Kind::Files: n["kind"] = "files"; n["files"] = s.noise->files; break;
    }
    j["noise"] = n;
  }
  if (s.reverb) j["reverb"] = {{"decay_s", s.reverb->decay_s}, {"tap_count", s.reverb->tap_count}};
  return j;
}

inline MixtureSpec mixture_spec_from_json(const json& j) {
  require_known_keys(j,
                     {"duration", "n_speakers", "main_index", "background", "volume_range",
                      "noise", "reverb", "sample_rate", "rng_seed", "energy_floor_db"},
                     "mixture");
  MixtureSpec s;
  maybe_get(j, "duration", s.duration);
  maybe_get(j, "n_speakers", s.n_speakers);
  maybe_get(j, "main_index", s.main_index);
  if (j.contains("volume_range")) {
    s.volume_lo = j.at("volume_range").at(0).get<double>();
    s.volume_hi = j.at("volume_range").at(1).get<double>();
  }
  maybe_get(j, "sample_rate", s.sample_rate);
  maybe_get(j, "rng_seed", s.rng_seed);
  maybe_get(j, "energy_floor_db", s.energy_floor_db);
  if (j.contains("background")) {
    const json& bg = j.at("background");
    if (bg.is_array()) {
      for (const auto& b : bg) s.background.push_back(turn_config_from_json(b));
    } else {
      s.n_speakers = std::max(s.n_speakers, 2);
      s.set_background(turn_config_from_json(bg));
    }
  } else {
    s.set_background(TurnConfig::preset(TurnKind::B2));
  }
  if (j.contains("noise") && !j.at("noise").is_null()) {
    const json& n = j.at("noise");
    require_known_keys(n, {"kind", "snr_db", "files"}, "noise");
    NoiseSpec ns;
    const std::string kind = n.value("kind", "white");
    if (kind == "white") ns.kind = NoiseSpec::Kind::White;
    else if (kind == "pink") ns.kind = NoiseSpec::Kind::Pink;
    else if (kind == "files") ns.kind = NoiseSpec::Kind::Files;
    else throw std::invalid_argument("noise: kind must be white|pink|files");
    maybe_get(n, "snr_db", ns.snr_db);
    maybe_get(n, "files", ns.files);
    s.noise = ns;
  }
  if (j.contains("reverb") && !j.at("reverb").is_null()) {
    const json& r = j.at("reverb");
    require_known_keys(r, {"decay_s", "tap_count"}, "reverb");
    ReverbSpec rs;
    maybe_get(r, "decay_s", rs.decay_s);
    maybe_get(r, "tap_count", rs.tap_count);
    s.reverb = rs;
  }
  s.validate();
  return s;
}

// ---- label sidecar (mixgen output) & prediction files ----

inline json labels_to_json(const Matrix& m) {
  json rows = json::array();
  for (int r = 0; r < m.rows; ++r) {
    rows.push_back({static_cast<int>(m.at(r, 0)), static_cast<int>(m.at(r, 1))});
  }
  return rows;
}

inline Matrix labels_from_json(const json& rows) {
  Matrix m(static_cast<int>(rows.size()), 2);
  for (int r = 0; r < m.rows; ++r) {
    m.at(r, 0) = rows.at(static_cast<std::size_t>(r)).at(0).get<double>();
    m.at(r, 1) = rows.at(static_cast<std::size_t>(r)).at(1).get<double>();
  }
  return m;
}

inline json sidecar_to_json(const LabeledMixture& mix, const MixtureSpec& spec) {
  return json{{"frame_hop", mix.frame_hop},
              {"n_frames", mix.labels.rows},
              {"onset_frame", mix.onset_frame},
              {"labels", labels_to_json(mix.labels)},
              {"loss_mask", labels_to_json(mix.loss_mask)},
              {"spec", to_json(spec)}};
}

struct SidecarData {
  double frame_hop = 0.03;
  int onset_frame = 0;
  Matrix labels;
  Matrix loss_mask;
};

inline SidecarData sidecar_from_json(const json& j) {
  SidecarData s;
  s.frame_hop = j.at("frame_hop").get<double>();
  s.onset_frame = j.value("onset_frame", 0);
  s.labels = labels_from_json(j.at("labels"));
  if (j.contains("loss_mask")) s.loss_mask = labels_from_json(j.at("loss_mask"));
  else s.loss_mask = Matrix::filled(s.labels.rows, 2, 1.0);
  return s;
}

}  // namespace msvad
