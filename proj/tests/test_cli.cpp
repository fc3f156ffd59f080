#include "msvad/config_io.hpp"
#include "msvad/report.hpp"
#include "msvad/streaming.hpp"
#include "msvad/training.hpp"

#include "test_util.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace msvad;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("msvad_cli_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

int run_cli(const std::string& args, const fs::path& dir, const std::string& tag) {
  const std::string out = (dir / (tag + ".out")).string();
  const std::string err = (dir / (tag + ".err")).string();
  const std::string cmd = std::string(MSVAD_CLI_PATH) + " " + args + " >" + out + " 2>" + err;
  const int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<char> slurp_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::vector<char>((std::istreambuf_iterator<char>(f)),
                           std::istreambuf_iterator<char>());
}

Checkpoint make_checkpoint(bool causal, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.ffn_dim = 64;
  cfg.attractor_mode = AttractorMode::Dual;
  cfg.saa_heads = 4;
  cfg.causal = causal;
  cfg.input_dim = FeatureConfig{}.feature_dim();
  Checkpoint ckpt;
  ckpt.model = cfg;
  Rng rng(seed);
  ckpt.params = init_params(cfg, rng);
  return ckpt;
}

}  // namespace

TEST_CASE("rttm round trip") {
  Rng rng(1);
  Matrix binary(40, 2);
  for (double& v : binary.d) v = rng.uniform01() < 0.4 ? 1.0 : 0.0;
  const double hop = 0.03;
  auto segs = segments_from_binary(binary, hop);
  std::ostringstream os;
  rttm_write(os, "sample", segs);
  std::istringstream is(os.str());
  Matrix back = rttm_to_binary(is, 40, hop);
  REQUIRE(back.d == binary.d);
}

TEST_CASE("prediction json round trip") {
  Rng rng(2);
  Matrix probs(25, 2);
  for (double& v : probs.d) v = rng.uniform01();
  json j = prediction_to_json(probs, 0.03, 0.5);
  PredictionData p = prediction_from_json(j);
  REQUIRE(p.frame_hop == 0.03);
  REQUIRE(p.probs.d == probs.d);  // shortest-round-trip doubles
}

TEST_CASE("sidecar json round trip") {
  FeatureConfig fcfg;
  SyntheticVoices voices(3, 8000, 5, 1.0, 2.0);
  MixtureSpec spec;
  spec.duration = 3.0;
  spec.n_speakers = 2;
  spec.set_background(TurnConfig::preset(TurnKind::B3));
  Rng rng(6);
  LabeledMixture mix = synthesize_mixture(spec, voices, rng, fcfg);
  json j = sidecar_to_json(mix, spec);
  SidecarData s = sidecar_from_json(j);
  REQUIRE(s.labels.d == mix.labels.d);
  REQUIRE(s.loss_mask.d == mix.loss_mask.d);
  REQUIRE(s.onset_frame == mix.onset_frame);
  MixtureSpec echo = mixture_spec_from_json(j.at("spec"));
  REQUIRE(echo.n_speakers == spec.n_speakers);
  REQUIRE(echo.duration == spec.duration);
}

TEST_CASE("run config rejects unknown keys") {
  REQUIRE_THROWS_AS(model_config_from_json(json{{"d_mdoel", 64}}), std::invalid_argument);
  REQUIRE_THROWS_AS(feature_config_from_json(json{{"nmels", 23}}), std::invalid_argument);
  REQUIRE_THROWS_AS(train_config_from_json(json{{"epoch", 3}}), std::invalid_argument);
}

TEST_CASE("cli flows", "[cli]") {
  TempDir tmp;
  const fs::path data = tmp.path / "data";

  SECTION("synth is seed-reproducible and writes parseable sidecars") {
    REQUIRE(run_cli("synth --out " + (tmp.path / "a").string() + " --count 2 --seed 5",
                    tmp.path, "synth_a") == 0);
    REQUIRE(run_cli("synth --out " + (tmp.path / "b").string() + " --count 2 --seed 5",
                    tmp.path, "synth_b") == 0);
    REQUIRE(slurp_bytes(tmp.path / "a" / "000001.wav") ==
            slurp_bytes(tmp.path / "b" / "000001.wav"));
    json side = json::parse(slurp(tmp.path / "a" / "000000.json"));
    REQUIRE(side.at("n_frames").get<int>() == 500);
    REQUIRE(side.at("labels").size() == 500);
  }

  SECTION("unknown config keys fail with a machine-parsable error") {
    std::ofstream cfgf(tmp.path / "bad.json");
    cfgf << R"({"model": {"d_model": 32, "bogus_key": 1}})";
    cfgf.close();
    const int rc = run_cli("train --data /nonexistent --config " +
                               (tmp.path / "bad.json").string(),
                           tmp.path, "badcfg");
    REQUIRE(rc != 0);
    REQUIRE(slurp(tmp.path / "badcfg.err").find("error code=") != std::string::npos);
  }

  SECTION("infer, dump-features, eval and stream work together") {
    REQUIRE(run_cli("synth --out " + data.string() + " --count 2 --seed 9", tmp.path,
                    "synth") == 0);

    // non-causal checkpoint: infer + eval
    Checkpoint ckpt = make_checkpoint(false, 77);
    const std::string ckpt_path = (tmp.path / "model.ckpt").string();
    save_checkpoint(ckpt_path, ckpt);
    const fs::path hyp = tmp.path / "hyp";
    REQUIRE(run_cli("infer --ckpt " + ckpt_path + " --wav " + data.string() + " --out " +
                        hyp.string() + " --dump-features",
                    tmp.path, "infer") == 0);
    REQUIRE(fs::exists(hyp / "000000.json"));
    REQUIRE(fs::exists(hyp / "000000.rttm"));

    // dumped features match the features module exactly
    json fd = json::parse(slurp(hyp / "000000.features.json"));
    WavData w = wav_read((data / "000000.wav").string());
    SplicedFeatures expect = spliced_features(w.samples, FeatureConfig{});
    REQUIRE(fd.at("T").get<int>() == expect.frames.rows);
    REQUIRE(fd.at("dim").get<int>() == expect.frames.cols);
    for (int t = 0; t < expect.frames.rows; t += 97) {
      for (int c = 0; c < expect.frames.cols; c += 13) {
        REQUIRE(fd.at("data").at(static_cast<std::size_t>(t)).at(static_cast<std::size_t>(c)).get<double>() ==
                expect.frames.at(t, c));
      }
    }

    REQUIRE(run_cli("eval --ref " + data.string() + " --hyp " + hyp.string(), tmp.path,
                    "eval") == 0);
    json report = json::parse(slurp(tmp.path / "eval.out"));
    REQUIRE(report.contains("der"));
    REQUIRE(report.contains("der_main"));
    REQUIRE(report.contains("f1_main"));
    REQUIRE(report.at("per_sample").size() == 2);

    // causal checkpoint: stream vs infer --causal agree within 1e-5
    Checkpoint causal = make_checkpoint(true, 78);
    const std::string causal_path = (tmp.path / "causal.ckpt").string();
    save_checkpoint(causal_path, causal);
    const fs::path chyp = tmp.path / "chyp";
    REQUIRE(run_cli("infer --ckpt " + causal_path + " --causal --wav " +
                        (data / "000000.wav").string() + " --out " + chyp.string(),
                    tmp.path, "cinfer") == 0);
    REQUIRE(run_cli("stream --ckpt " + causal_path + " --wav " +
                        (data / "000000.wav").string() + " --json-lines --out " +
                        (tmp.path / "srttm").string(),
                    tmp.path, "stream") == 0);
    PredictionData batch = prediction_from_json(json::parse(slurp(chyp / "000000.json")));
    std::istringstream lines(slurp(tmp.path / "stream.out"));
    std::string line;
    int t = 0;
    double max_diff = 0.0;
    while (std::getline(lines, line)) {
      if (line.empty()) continue;
      json lj = json::parse(line);
      max_diff = std::max(max_diff, std::abs(lj.at("p_main").get<double>() - batch.probs.at(t, 0)));
      max_diff = std::max(max_diff, std::abs(lj.at("p_bg").get<double>() - batch.probs.at(t, 1)));
      ++t;
    }
    REQUIRE(t == batch.probs.rows);
    REQUIRE(max_diff <= 1e-5);
    REQUIRE(fs::exists(tmp.path / "srttm" / "000000.rttm"));

    // requesting --causal with a non-causal checkpoint is a hard error
    REQUIRE(run_cli("infer --ckpt " + ckpt_path + " --causal --wav " +
                        (data / "000000.wav").string() + " --out " + chyp.string(),
                    tmp.path, "mismatch") != 0);
  }

  SECTION("config/checkpoint mismatch errors with a field diff") {
    Checkpoint ckpt = make_checkpoint(false, 80);
    const std::string ckpt_path = (tmp.path / "m.ckpt").string();
    save_checkpoint(ckpt_path, ckpt);
    std::ofstream cfgf(tmp.path / "other.json");
    cfgf << R"({"model": {"d_model": 64, "n_layers": 1, "n_heads": 2, "ffn_dim": 64,
                "attractor_mode": "dual", "saa_heads": 4, "input_dim": 161}})";
    cfgf.close();
    REQUIRE(run_cli("synth --out " + data.string() + " --count 1 --seed 2", tmp.path,
                    "synth2") == 0);
    const int rc = run_cli("infer --config " + (tmp.path / "other.json").string() +
                               " --ckpt " + ckpt_path + " --wav " + data.string() +
                               " --out " + (tmp.path / "x").string(),
                           tmp.path, "diff");
    REQUIRE(rc != 0);
    const std::string err = slurp(tmp.path / "diff.err");
    REQUIRE(err.find("config/checkpoint mismatch") != std::string::npos);
    REQUIRE(err.find("d_model") != std::string::npos);
  }

  SECTION("tiny experiment preset emits the expected row structure") {
    REQUIRE(run_cli("experiment --preset volume-grid --tiny --seed 4", tmp.path, "exp") == 0);
    json rep = json::parse(slurp(tmp.path / "exp.out"));
    REQUIRE(rep.at("preset") == "volume-grid");
    REQUIRE(rep.at("rows").size() == 3);
    REQUIRE(rep.at("rows").at(0).at("config") == "0.1-0.4");
    REQUIRE(rep.at("rows").at(2).at("config") == "1");
  }
}
