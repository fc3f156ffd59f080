#pragma once

#include "msvad/config_io.hpp"
#include "msvad/metrics.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace msvad {

struct Segment {
  double start = 0.0;
  double duration = 0.0;
  std::string speaker;  // "main" or "bg"
};

/// Merges consecutive active frames of each channel into segments.
inline std::vector<Segment> segments_from_binary(const Matrix& binary, double frame_hop) {
  check_shape(binary.cols == 2, "segments_from_binary");
  std::vector<Segment> out;
  const char* names[2] = {"main", "bg"};
  for (int c = 0; c < 2; ++c) {
    int run_start = -1;
    for (int t = 0; t <= binary.rows; ++t) {
      const bool on = t < binary.rows && binary.at(t, c) != 0.0;
      if (on && run_start < 0) run_start = t;
      if (!on && run_start >= 0) {
        out.push_back({run_start * frame_hop, (t - run_start) * frame_hop, names[c]});
        run_start = -1;
      }
    }
  }
  std::sort(out.begin(), out.end(), [](const Segment& a, const Segment& b) {
    return a.start < b.start || (a.start == b.start && a.speaker < b.speaker);
  });
  return out;
}

inline void rttm_write(std::ostream& os, const std::string& file_id,
                       const std::vector<Segment>& segments) {
  for (const auto& s : segments) {
    os << "SPEAKER " << file_id << " 1 " << s.start << " " << s.duration
       << " <NA> <NA> " << s.speaker << " <NA> <NA>\n";
  }
}

/// Parses RTTM rows back into frame activity (speakers "main" -> col 0,
/// anything else -> col 1).
inline Matrix rttm_to_binary(std::istream& is, int n_frames, double frame_hop) {
  Matrix out(n_frames, 2);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string tag, file_id, chan, na;
    double start = 0.0, dur = 0.0;
    std::string spk;
    if (!(ss >> tag >> file_id >> chan >> start >> dur >> na >> na >> spk)) continue;
    if (tag != "SPEAKER") continue;
    const int col = spk == "main" ? 0 : 1;
    const int t0 = std::max(0, static_cast<int>(std::floor(start / frame_hop + 1e-9)));
    const int t1 = std::min(n_frames, static_cast<int>(std::ceil((start + dur) / frame_hop - 1e-9)));
    for (int t = t0; t < t1; ++t) out.at(t, col) = 1.0;
  }
  return out;
}

/// Prediction file written by `infer` / `stream`.
inline json prediction_to_json(const Matrix& probs, double frame_hop, double threshold) {
  json rows = json::array();
  for (int t = 0; t < probs.rows; ++t) rows.push_back({probs.at(t, 0), probs.at(t, 1)});
  return json{{"frame_hop", frame_hop},
              {"threshold", threshold},
              {"n_frames", probs.rows},
              {"probs", rows}};
}

struct PredictionData {
  double frame_hop = 0.03;
  double threshold = 0.5;
  Matrix probs;
};

inline PredictionData prediction_from_json(const json& j) {
  PredictionData p;
  p.frame_hop = j.at("frame_hop").get<double>();
  p.threshold = j.value("threshold", 0.5);
  const json& rows = j.at("probs");
  p.probs = Matrix(static_cast<int>(rows.size()), 2);
  for (int t = 0; t < p.probs.rows; ++t) {
    p.probs.at(t, 0) = rows.at(static_cast<std::size_t>(t)).at(0).get<double>();
    p.probs.at(t, 1) = rows.at(static_cast<std::size_t>(t)).at(1).get<double>();
  }
  return p;
}

struct EvalReport {
  DerBreakdown der;
  double der_main = 0.0;
  double f1_main = 0.0;
  json per_sample = json::array();
};

/// Scores a directory of predictions against a directory of reference
/// sidecars; files pair by stem. Hypothesis files may be prediction JSON
/// or RTTM (.rttm).
inline EvalReport evaluate_dirs(const std::string& ref_dir, const std::string& hyp_dir,
                                double threshold) {
  namespace fs = std::filesystem;
  std::vector<Matrix> refs, hyps;
  EvalReport report;
  std::vector<fs::path> ref_files;
  for (const auto& e : fs::directory_iterator(ref_dir)) {
    if (e.path().extension() == ".json") ref_files.push_back(e.path());
  }
  std::sort(ref_files.begin(), ref_files.end());
  if (ref_files.empty()) throw std::runtime_error("eval: no reference sidecars in " + ref_dir);
  for (const auto& rf : ref_files) {
    std::ifstream in(rf);
    json j = json::parse(in);
    SidecarData side = sidecar_from_json(j);
    const std::string stem = rf.stem().string();
    Matrix hyp;
    const fs::path pj = fs::path(hyp_dir) / (stem + ".json");
    const fs::path pr = fs::path(hyp_dir) / (stem + ".rttm");
    if (fs::exists(pj)) {
      std::ifstream hin(pj);
      PredictionData pred = prediction_from_json(json::parse(hin));
      hyp = binarize(pred.probs, threshold);
    } else if (fs::exists(pr)) {
      std::ifstream hin(pr);
      hyp = rttm_to_binary(hin, side.labels.rows, side.frame_hop);
    } else {
      throw std::runtime_error("eval: no hypothesis for " + stem);
    }
    if (hyp.rows != side.labels.rows) {
      // frame-count drift between tools is an input error, not a scoring choice
      throw std::runtime_error("eval: frame count mismatch for " + stem);
    }
    refs.push_back(side.labels);
    hyps.push_back(hyp);
    report.per_sample.push_back({{"id", stem},
                                 {"der_main", der_main(side.labels, hyp)},
                                 {"f1_main", f1_main(side.labels, hyp)}});
  }
  report.der = der_pooled(refs, hyps);
  report.der_main = der_main_pooled(refs, hyps);
  std::vector<std::pair<Matrix, Matrix>> pairs;
  for (std::size_t i = 0; i < refs.size(); ++i) pairs.emplace_back(refs[i], hyps[i]);
  report.f1_main = macro_f1(pairs);
  return report;
}

inline json to_json(const EvalReport& r) {
  return json{{"der", r.der.der},
              {"der_main", r.der_main},
              {"f1_main", r.f1_main},
              {"n_miss", r.der.n_miss},
              {"n_fa", r.der.n_fa},
              {"n_confusion", r.der.n_confusion},
              {"n_total", r.der.n_total},
              {"per_sample", r.per_sample}};
}

}  // namespace msvad
