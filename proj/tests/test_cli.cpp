#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "doctest.h"
#include "json.hpp"
#include "kinedec/checkpoint.hpp"
#include "kinedec/cli.hpp"
#include "kinedec/csv.hpp"
#include "kinedec/train.hpp"

namespace fs = std::filesystem;
namespace cli = kinedec::cli;
namespace tr = kinedec::train;
using kinedec::csvio::read_table;
using kinedec::csvio::write_table;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& stem) {
    path = fs::temp_directory_path() / (stem + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

int run(const std::vector<std::string>& args, std::string* out_text = nullptr,
        std::string* err_text = nullptr) {
  std::ostringstream out, err;
  const int rc = cli::run_command(args, out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return rc;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) lines.push_back(line);
  return lines;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::istringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  return cells;
}

bool any_line_contains(const std::vector<std::string>& lines, const std::string& needle) {
  return std::any_of(lines.begin(), lines.end(), [&](const std::string& l) {
    return l.find(needle) != std::string::npos;
  });
}

// Small decoder and short trials so a full command run stays in seconds.
cli::RunConfig tiny_config(const fs::path& data_dir, const fs::path& work_dir) {
  cli::RunConfig cfg;
  cfg.seed = 11;
  cfg.trials = 4;
  cfg.data_dir = data_dir;
  cfg.work_dir = work_dir;
  cfg.synthetic.duration_s = 4.0;
  cfg.synthetic.phase_boundaries_s = {0.8, 1.6, 2.4, 3.2};
  cfg.window.window_samples = 150;
  cfg.window.step_samples = 75;
  cfg.model.window_samples = 150;
  cfg.model.large_kernel = 33;
  cfg.model.branch_kernels = {7, 15};
  cfg.model.branch_features = 8;
  cfg.model.embed_dim = 16;
  cfg.model.heads = 2;
  cfg.model.head_dim = 8;
  cfg.train.epochs = 2;
  cfg.train.patience = 2;
  cfg.train.batch_size = 32;
  cfg.validate();
  return cfg;
}

fs::path write_config(const fs::path& where, const cli::RunConfig& cfg) {
  std::ofstream out(where, std::ios::binary);
  REQUIRE(out.good());
  out << cli::config_to_json(cfg);
  return where;
}

tr::SyntheticTrial short_trial(uint64_t seed, double duration = 2.0) {
  tr::SyntheticTrialSpec spec;
  spec.duration_s = duration;
  spec.phase_boundaries_s = {0.2 * duration, 0.4 * duration, 0.6 * duration, 0.8 * duration};
  return tr::generate_synthetic_trial(spec, seed);
}

cli::TrialBundle bundle_from_trial(int id, tr::SyntheticTrial&& t) {
  cli::TrialBundle b;
  b.id = id;
  b.eeg = std::move(t.eeg);
  b.emg = std::move(t.emg);
  b.kin = std::move(t.kin);
  b.labels = std::move(t.labels);
  b.events = std::move(t.events);
  return b;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("default config validates and survives a json round trip") {
  cli::RunConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.model.in_channels_emg == 5);

  const std::string doc = cli::config_to_json(cfg);
  const cli::RunConfig back = cli::config_from_json(doc);
  CHECK(cli::config_to_json(back) == doc);
  CHECK_NOTHROW(back.validate());
  CHECK(back.seed == cfg.seed);
  CHECK(back.window.window_samples == cfg.window.window_samples);
  CHECK(back.model.embed_dim == cfg.model.embed_dim);
  CHECK(back.thresholds.theta_unrely == cfg.thresholds.theta_unrely);

  const cli::RunConfig empty = cli::load_config("");
  CHECK(cli::config_to_json(empty) == doc);

  CHECK(doc.find("in_channels_eeg") == std::string::npos);
  CHECK(doc.find("\"rate_hz\"") == std::string::npos);
  CHECK(doc.find("\"seed\": 0") != std::string::npos);
}

TEST_CASE("config json rejects unknown, misplaced, and mistyped keys") {
  CHECK_THROWS_WITH_AS(cli::config_from_json("{\"bogus\": 1}"),
                       doctest::Contains("unknown key 'bogus'"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(cli::config_from_json("{\"preprocess\": {\"gain\": 2}}"),
                       doctest::Contains("preprocess: unknown key 'gain'"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(cli::config_from_json("{\"model\": {\"window_samples\": 100}}"),
                       doctest::Contains("model.window_samples is derived from"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(cli::config_from_json("{\"model\": {\"in_channels_eeg\": 32}}"),
                       doctest::Contains("is derived from"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(cli::config_from_json("{\"window\": {\"rate_hz\": 100}}"),
                       doctest::Contains("window.rate_hz is derived from"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(cli::config_from_json("{\"train\": {\"seed\": 3}}"),
                       doctest::Contains("train.seed is derived from"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(cli::config_from_json("{\"synthetic\": {\"rate_eeg\": 100}}"),
                       doctest::Contains("synthetic.rate_eeg is derived from"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(cli::config_from_json("{\"seed\": \"abc\"}"),
                       doctest::Contains("config.seed"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(cli::config_from_json("{\"workspace\": {\"lo\": [1, 2]}}"),
                       doctest::Contains("array of 3 numbers"), std::invalid_argument);
  CHECK_THROWS_AS(cli::config_from_json("not json"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(cli::config_from_json("[]"), doctest::Contains("JSON object"),
                       std::invalid_argument);
}

TEST_CASE("overrides follow dotted paths and derived fields mirror their owners") {
  const cli::RunConfig cfg = cli::load_config("", {{"seed", "9"},
                                                   {"trials", "7"},
                                                   {"train.epochs", "3"},
                                                   {"preprocess.use_emg", "false"},
                                                   {"export.source", "filtered"},
                                                   {"data_dir", "/tmp/somewhere"}});
  CHECK(cfg.seed == 9);
  CHECK(cfg.trials == 7);
  CHECK(cfg.train.epochs == 3);
  CHECK(cfg.train.seed == 9);
  CHECK_FALSE(cfg.preprocess.use_emg);
  CHECK(cfg.model.in_channels_emg == 0);
  CHECK(cfg.export_arm.source == "filtered");
  CHECK(cfg.data_dir == fs::path("/tmp/somewhere"));

  const cli::RunConfig rates = cli::load_config(
      "", {{"preprocess.rate_eeg_hz", "250"}, {"preprocess.rate_emg_hz", "2000"}});
  CHECK(rates.window.rate_hz == 250.0);
  CHECK(rates.synthetic.rate_eeg == 250.0);
  CHECK(rates.synthetic.rate_emg == 2000.0);

  CHECK_THROWS_WITH_AS(cli::load_config("", {{"model.window_samples", "100"}}),
                       doctest::Contains("is derived from"), std::invalid_argument);
  CHECK_THROWS_AS(cli::load_config("", {{"seed.x", "1"}}), std::invalid_argument);
}

TEST_CASE("validation enforces cross-section invariants") {
  CHECK_THROWS_WITH_AS(cli::load_config("", {{"window.step_samples", "300"}}),
                       doctest::Contains("step exceeds the window"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(cli::load_config("", {{"thresholds.unrely", "0.4"}}),
                       doctest::Contains("theta_unrely"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(cli::load_config("", {{"model.embed_dim", "100"}}),
                       doctest::Contains("embed_dim"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      cli::load_config("", {{"window.window_samples", "50"}, {"window.step_samples", "10"}}),
      doctest::Contains("large_kernel"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(cli::load_config("", {{"version", "2"}}),
                       doctest::Contains("unsupported version"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(cli::load_config("", {{"trials", "0"}}), doctest::Contains("trials"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(cli::load_config("", {{"preprocess.emg_decimation", "5"}}),
                       doctest::Contains("eeg clock"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(cli::load_config("", {{"export.source", "magic"}}),
                       doctest::Contains("'decoded' or 'filtered'"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(cli::load_config("", {{"workspace.lo", "[1.0, 0.0, 0.0]"}}),
                       doctest::Contains("lo must be below hi"), std::invalid_argument);
}

TEST_CASE("trial bundles round trip through the dataset layout bit exactly") {
  TempDir dir("kinedec_cli_bundle_");
  cli::TrialBundle original = bundle_from_trial(3, short_trial(42));
  REQUIRE(original.has_labels());
  REQUIRE(original.has_events());
  cli::write_bundle(dir.path / "trial_3", original);

  const cli::IngestResult ing = cli::ingest(dir.path, cli::PreprocessConfig{});
  CHECK(ing.skipped.empty());
  REQUIRE(ing.bundles.size() == 1);
  const cli::TrialBundle& back = ing.bundles[0];
  CHECK(back.id == 3);
  CHECK(back.eeg.data == original.eeg.data);
  CHECK(back.emg.data == original.emg.data);
  CHECK(back.kin.data == original.kin.data);
  CHECK(back.events.data == original.events.data);
  CHECK(back.labels == original.labels);
  CHECK(back.eeg.channel_names == original.eeg.channel_names);
  CHECK(back.kin.channel_names == original.kin.channel_names);
  CHECK(back.eeg.rate_hz == original.eeg.rate_hz);
  CHECK(back.emg.rate_hz == original.emg.rate_hz);
}

TEST_CASE("ingest skips malformed trials and reports each reason") {
  TempDir dir("kinedec_cli_ingest_");
  cli::write_bundle(dir.path / "trial_0", bundle_from_trial(0, short_trial(1)));

  // 31-channel EEG.
  cli::write_bundle(dir.path / "trial_1", bundle_from_trial(1, short_trial(2)));
  auto eeg = read_table(dir.path / "trial_1" / "eeg.csv");
  eeg.header.pop_back();
  for (auto& row : eeg.rows) row.pop_back();
  write_table(dir.path / "trial_1" / "eeg.csv", eeg.header, eeg.rows);

  // Non-integer state label.
  cli::write_bundle(dir.path / "trial_2", bundle_from_trial(2, short_trial(3)));
  auto labels = read_table(dir.path / "trial_2" / "labels.csv");
  labels.rows[5][0] = 1.5;
  write_table(dir.path / "trial_2" / "labels.csv", labels.header, labels.rows);

  // Kinematics shorter than the EEG record.
  cli::write_bundle(dir.path / "trial_3", bundle_from_trial(3, short_trial(4)));
  auto kin = read_table(dir.path / "trial_3" / "kin.csv");
  kin.rows.resize(kin.rows.size() - 10);
  write_table(dir.path / "trial_3" / "kin.csv", kin.header, kin.rows);

  // EMG whose duration disagrees with the EEG beyond one decimation quantum.
  cli::write_bundle(dir.path / "trial_4", bundle_from_trial(4, short_trial(5)));
  auto emg = read_table(dir.path / "trial_4" / "emg.csv");
  emg.rows.resize(7000);
  write_table(dir.path / "trial_4" / "emg.csv", emg.header, emg.rows);

  fs::create_directories(dir.path / "trial_zzz");
  fs::create_directories(dir.path / "notes");

  const cli::IngestResult ing = cli::ingest(dir.path, cli::PreprocessConfig{});
  REQUIRE(ing.bundles.size() == 1);
  CHECK(ing.bundles[0].id == 0);
  CHECK(ing.skipped.size() == 5);
  CHECK(any_line_contains(ing.skipped, "expected 32 channels, got 31"));
  CHECK(any_line_contains(ing.skipped, "state must be an integer"));
  CHECK(any_line_contains(ing.skipped, "kin.csv"));
  CHECK(any_line_contains(ing.skipped, "durations disagree"));
  CHECK(any_line_contains(ing.skipped, "trial id is not a number"));
}

TEST_CASE("ingest errors on empty, duplicate, and unusable directories") {
  TempDir dir("kinedec_cli_ingest_err_");
  CHECK_THROWS_WITH_AS(cli::ingest(dir.path, cli::PreprocessConfig{}),
                       doctest::Contains("no trials found"), std::runtime_error);
  CHECK_THROWS_WITH_AS(cli::ingest(dir.path / "absent", cli::PreprocessConfig{}),
                       doctest::Contains("does not exist"), std::runtime_error);

  fs::create_directories(dir.path / "trial_07");
  fs::create_directories(dir.path / "trial_7");
  CHECK_THROWS_WITH_AS(cli::ingest(dir.path, cli::PreprocessConfig{}),
                       doctest::Contains("duplicate trial id 7"), std::runtime_error);
  fs::remove_all(dir.path / "trial_07");

  CHECK_THROWS_WITH_AS(cli::ingest(dir.path, cli::PreprocessConfig{}),
                       doctest::Contains("no usable trials"), std::runtime_error);
}

TEST_CASE("usage errors, help, and configuration failures exit with code 1") {
  std::string out, err;
  CHECK(run({}, &out, &err) == 1);
  CHECK(run({"frobnicate"}, &out, &err) == 1);

  CHECK(run({"--help"}, &out, &err) == 0);
  CHECK(out.find("generate") != std::string::npos);
  CHECK(out.find("export-arm") != std::string::npos);
  CHECK(run({"generate", "--help"}, &out, &err) == 0);
  CHECK(out.find("--config") != std::string::npos);

  CHECK(run({"generate", "--seed"}, &out, &err) == 1);
  CHECK(err.find("missing a value") != std::string::npos);
  CHECK(run({"generate", "stray"}, &out, &err) == 1);
  CHECK(err.find("expected --key value") != std::string::npos);
  CHECK(run({"generate", "--trials", "0"}, &out, &err) == 1);
  CHECK(err.find("kinedec:") != std::string::npos);
  CHECK(run({"generate", "--config", "/nonexistent/cfg.json"}, &out, &err) == 1);
  CHECK(err.find("cannot open config file") != std::string::npos);

  TempDir dir("kinedec_cli_badcfg_");
  std::ofstream(dir.path / "cfg.json") << "{ nope";
  CHECK(run({"generate", "--config", (dir.path / "cfg.json").string()}, &out, &err) == 1);
  CHECK(err.find("cfg.json") != std::string::npos);
}

TEST_CASE("stage dependency errors name the missing producer") {
  TempDir dir("kinedec_cli_deps_");
  const std::string data = (dir.path / "data").string();
  const std::string work = (dir.path / "work").string();
  const std::vector<std::string> base{"--data_dir", data, "--work_dir", work};
  auto with = [&](const std::string& cmd, std::vector<std::string> extra = {}) {
    std::vector<std::string> args{cmd};
    args.insert(args.end(), base.begin(), base.end());
    args.insert(args.end(), extra.begin(), extra.end());
    return args;
  };

  std::string out, err;
  CHECK(run(with("preprocess"), &out, &err) == 2);
  CHECK(err.find("does not exist") != std::string::npos);
  CHECK(run(with("train"), &out, &err) == 2);
  CHECK(err.find("run `preprocess` first") != std::string::npos);
  CHECK(run(with("sweep"), &out, &err) == 2);
  CHECK(err.find("run `preprocess` first") != std::string::npos);
  CHECK(run(with("decode"), &out, &err) == 2);
  CHECK(err.find("run `train` first") != std::string::npos);
  CHECK(run(with("evaluate"), &out, &err) == 2);
  CHECK(err.find("run `decode` first") != std::string::npos);
  CHECK(run(with("filter"), &out, &err) == 2);
  CHECK(err.find("run `decode` first") != std::string::npos);
  CHECK(run(with("export-arm"), &out, &err) == 2);
  CHECK(err.find("run `decode` first") != std::string::npos);
  CHECK(run(with("export-arm", {"--export.source", "filtered"}), &out, &err) == 2);
  CHECK(err.find("run `filter` first") != std::string::npos);
}

TEST_CASE("evaluate scores a decoder that matches the truth perfectly") {
  TempDir dir("kinedec_cli_eval_");
  const fs::path work = dir.path / "work";
  const fs::path trial = work / "preprocessed" / "trial_9";
  fs::create_directories(trial);
  fs::create_directories(work / "decoded" / "test");

  kinedec::Rng rng(5);
  const std::vector<std::string> kin_names{"index_x", "index_y", "index_z",
                                           "thumb_x", "thumb_y", "thumb_z"};
  std::vector<std::vector<double>> kin_rows(40, std::vector<double>(6));
  for (auto& row : kin_rows)
    for (auto& v : row) v = rng.uniform();
  write_table(trial / "kin.csv", kin_names, kin_rows);

  std::vector<std::string> dec_header{"sample"};
  dec_header.insert(dec_header.end(), kin_names.begin(), kin_names.end());
  std::vector<std::vector<double>> dec_rows;
  for (int64_t sample = 5; sample < 40; sample += 3) {
    std::vector<double> row{static_cast<double>(sample)};
    row.insert(row.end(), kin_rows[static_cast<size_t>(sample)].begin(),
               kin_rows[static_cast<size_t>(sample)].end());
    dec_rows.push_back(std::move(row));
  }
  write_table(work / "decoded" / "test" / "trial_9.csv", dec_header, dec_rows);
  std::ofstream(work / "split.json") << "{\"train\": [], \"val\": [], \"test\": [9]}";

  std::string out, err;
  const int rc = run({"evaluate", "--work_dir", work.string()}, &out, &err);
  CHECK(rc == 0);
  CHECK(out.find("evaluate: overall pcc 1 rmse 0 over 12 windows") != std::string::npos);

  const auto metric_lines = lines_of(slurp(work / "metrics.csv"));
  REQUIRE(metric_lines.size() == 8);
  CHECK(metric_lines[0] == "axis,pcc,rmse");
  for (size_t i = 1; i < metric_lines.size(); ++i) {
    const auto cells = split_csv(metric_lines[i]);
    REQUIRE(cells.size() == 3);
    CHECK(std::strtod(cells[1].c_str(), nullptr) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(std::strtod(cells[2].c_str(), nullptr) == 0.0);
  }
  CHECK(split_csv(metric_lines[1])[0] == "index_x");
  CHECK(split_csv(metric_lines[7])[0] == "overall");
}

TEST_CASE("pipeline runs end to end and is byte-identical across reruns") {
  TempDir dir("kinedec_cli_pipe_");
  const fs::path data = dir.path / "data";
  const fs::path work = dir.path / "work";
  const fs::path data2 = dir.path / "data2";
  const fs::path work2 = dir.path / "work2";
  const cli::RunConfig cfg = tiny_config(data, work);
  const fs::path cfg_path = write_config(dir.path / "config.json", cfg);
  auto cmd = [&](std::vector<std::string> args) {
    args.insert(args.begin() + 1, {"--config", cfg_path.string()});
    return args;
  };

  std::string out, err;
  REQUIRE(run(cmd({"generate"}), &out, &err) == 0);
  CHECK(out.find("generate: wrote 4 trials") != std::string::npos);
  REQUIRE(fs::exists(data / "trial_3" / "events.csv"));

  REQUIRE(run(cmd({"preprocess"}), &out, &err) == 0);
  CHECK(out.find("4 trials (2 train / 1 val / 1 test)") != std::string::npos);
  REQUIRE(fs::exists(work / "split.json"));
  REQUIRE(fs::exists(work / "scaler.json"));
  nlohmann::json split = nlohmann::json::parse(slurp(work / "split.json"));
  REQUIRE(split["test"].size() == 1);
  const int test_id = split["test"][0].get<int>();
  const fs::path test_trial = work / "preprocessed" / ("trial_" + std::to_string(test_id));
  const auto pre_eeg = read_table(test_trial / "eeg.csv");
  const auto pre_emg = read_table(test_trial / "emg.csv");
  const auto pre_kin = read_table(test_trial / "kin.csv");
  CHECK(pre_eeg.rows.size() == pre_emg.rows.size());
  CHECK(pre_eeg.rows.size() == pre_kin.rows.size());
  CHECK(pre_eeg.cols() == 32);
  CHECK(pre_emg.cols() == 5);
  CHECK(pre_kin.cols() == 6);

  REQUIRE(run(cmd({"train"}), &out, &err) == 0);
  CHECK(out.find("train: best val ") != std::string::npos);
  REQUIRE(fs::exists(work / "decoder.ckpt"));
  const auto history = lines_of(slurp(work / "history.csv"));
  REQUIRE(history.size() == 3);
  CHECK(history[0] == "epoch,train,val");

  REQUIRE(run(cmd({"decode"}), &out, &err) == 0);
  const fs::path dec_path = work / "decoded" / "test" / ("trial_" + std::to_string(test_id) + ".csv");
  const auto decoded = read_table(dec_path);
  const int64_t n = static_cast<int64_t>(pre_eeg.rows.size());
  const int64_t first = cfg.window.window_samples - 1;
  const int64_t delay = cfg.window.delay_ms * 500 / 1000;
  const int64_t expected_windows = (n - 1 - delay - first) / cfg.window.step_samples + 1;
  REQUIRE(static_cast<int64_t>(decoded.rows.size()) == expected_windows);
  CHECK(decoded.rows[0][0] == static_cast<double>(first + delay));
  CHECK(decoded.rows[1][0] - decoded.rows[0][0] == static_cast<double>(cfg.window.step_samples));
  const auto latents = read_table(work / "latents" / "test" /
                                  ("trial_" + std::to_string(test_id) + ".csv"));
  CHECK(latents.rows.size() == decoded.rows.size());
  CHECK(latents.cols() == 1 + 16);

  REQUIRE(run(cmd({"evaluate"}), &out, &err) == 0);
  CHECK(out.find("evaluate: overall pcc ") != std::string::npos);
  CHECK(out.find("over " + std::to_string(expected_windows) + " windows") != std::string::npos);
  REQUIRE(fs::exists(work / "metrics.csv"));

  REQUIRE(run(cmd({"filter"}), &out, &err) == 0);
  REQUIRE(fs::exists(work / "posterior.ckpt"));
  REQUIRE(fs::exists(work / "critic.ckpt"));
  const auto posterior = kinedec::checkpoint::load_checkpoint(work / "posterior.ckpt");
  CHECK(posterior.at("posterior.w").shape == std::vector<int64_t>{16, 5});
  CHECK(posterior.at("posterior.b").shape == std::vector<int64_t>{5});
  const auto report = lines_of(slurp(work / "filter_report.txt"));
  REQUIRE(!report.empty());
  CHECK(report[0].find("retained ") == 0);
  CHECK(report[0].find("/" + std::to_string(expected_windows)) != std::string::npos);
  const auto filtered = read_table(work / "filtered" / ("trial_" + std::to_string(test_id) + ".csv"));
  CHECK(filtered.rows.size() == decoded.rows.size());
  CHECK(filtered.header[1] == "retained");

  const auto curve = read_table(work / "retention_curve.csv");
  REQUIRE(curve.rows.size() == 26);
  CHECK(curve.rows[0][0] == 0.0);
  CHECK(curve.rows[0][1] == 1.0);
  CHECK(curve.rows[25][1] == 0.0);
  for (size_t i = 1; i < curve.rows.size(); ++i) CHECK(curve.rows[i][1] <= curve.rows[i - 1][1]);

  REQUIRE(run(cmd({"export-arm"}), &out, &err) == 0);
  CHECK(out.find("export-arm: 1 trials") != std::string::npos);
  const fs::path arm_path = work / "arm" / ("trial_" + std::to_string(test_id) + ".csv");
  const auto arm = read_table(arm_path);
  CHECK(arm.header == std::vector<std::string>{"t", "q1", "q2", "q3", "q4", "q5", "q6", "q7"});
  CHECK(arm.rows.size() >= 2);

  // Decoder consistency guards.
  CHECK(run(cmd({"decode", "--window.window_samples", "100", "--window.step_samples", "50"}),
            &out, &err) == 2);
  CHECK(err.find("re-run `train`") != std::string::npos);
  CHECK(run(cmd({"decode", "--preprocess.use_emg", "false"}), &out, &err) == 2);
  CHECK(err.find("use_emg") != std::string::npos);

  // A permissive threshold table keeps every point; its export matches the raw decode.
  const std::vector<std::string> permissive{
      "--thresholds.searching", "0", "--thresholds.lifting", "0", "--thresholds.holding", "0",
      "--thresholds.putting",   "0", "--thresholds.returning", "0", "--thresholds.unrely", "1e-9"};
  auto filter_all = cmd({"filter"});
  filter_all.insert(filter_all.end(), permissive.begin(), permissive.end());
  REQUIRE(run(filter_all, &out, &err) == 0);
  CHECK(out.find("retained " + std::to_string(expected_windows) + "/" +
                 std::to_string(expected_windows)) != std::string::npos);
  REQUIRE(run(cmd({"export-arm", "--export.source", "filtered"}), &out, &err) == 0);
  CHECK(slurp(arm_path) == slurp(work / "arm" / ("trial_" + std::to_string(test_id) + ".csv")));

  // Re-run the whole pipeline into fresh directories: artifacts must match byte for byte.
  const std::vector<std::string> redirect{"--data_dir", data2.string(), "--work_dir",
                                          work2.string()};
  for (std::vector<std::string> args :
       {cmd({"generate"}), cmd({"preprocess"}), cmd({"train"}), cmd({"decode"}),
        cmd({"evaluate"}), filter_all, cmd({"export-arm"})}) {
    args.insert(args.end(), redirect.begin(), redirect.end());
    REQUIRE(run(args, &out, &err) == 0);
  }
  CHECK(slurp(data / "trial_0" / "eeg.csv") == slurp(data2 / "trial_0" / "eeg.csv"));
  CHECK(slurp(work / "decoder.ckpt") == slurp(work2 / "decoder.ckpt"));
  CHECK(slurp(work / "metrics.csv") == slurp(work2 / "metrics.csv"));
  CHECK(slurp(work / "filter_report.txt") == slurp(work2 / "filter_report.txt"));
  CHECK(slurp(work / "retention_curve.csv") == slurp(work2 / "retention_curve.csv"));
  CHECK(slurp(dec_path) ==
        slurp(work2 / "decoded" / "test" / ("trial_" + std::to_string(test_id) + ".csv")));
}

TEST_CASE("sweep walks both grids and reports infeasible rows as nan") {
  TempDir dir("kinedec_cli_sweep_");
  const fs::path data = dir.path / "data";
  const fs::path work = dir.path / "work";
  cli::RunConfig cfg = tiny_config(data, work);
  cfg.trials = 3;
  cfg.synthetic.duration_s = 3.0;
  cfg.synthetic.phase_boundaries_s = {0.6, 1.2, 1.8, 2.4};
  cfg.model.large_kernel = 65;
  cfg.train.epochs = 1;
  cfg.train.patience = 1;
  cfg.validate();
  const fs::path cfg_path = write_config(dir.path / "config.json", cfg);

  std::string out, err;
  REQUIRE(run({"generate", "--config", cfg_path.string()}, &out, &err) == 0);
  REQUIRE(run({"preprocess", "--config", cfg_path.string()}, &out, &err) == 0);
  REQUIRE(run({"sweep", "--config", cfg_path.string()}, &out, &err) == 0);
  CHECK(out.find("sweep: 14 rows (1 skipped)") != std::string::npos);
  CHECK(err.find("window 50") != std::string::npos);
  CHECK(err.find("skipped") != std::string::npos);

  const auto lines = lines_of(slurp(work / "sweep.csv"));
  REQUIRE(lines.size() == 15);
  CHECK(lines[0] == "varied,window_samples,delay_ms,step_samples,windows,pcc,rmse");

  const std::array<int64_t, 7> window_grid{50, 100, 200, 250, 500, 750, 1000};
  const std::array<int64_t, 7> delay_grid{100, 200, 300, 400, 500, 600, 700};
  const int64_t n = 1500;
  auto expect_windows = [&](int64_t w, int64_t delay_ms, int64_t step) -> int64_t {
    const int64_t delay = delay_ms * 500 / 1000;
    const int64_t last = n - 1 - delay;
    return w - 1 > last ? 0 : (last - (w - 1)) / step + 1;
  };
  for (int i = 0; i < 14; ++i) {
    const auto cells = split_csv(lines[static_cast<size_t>(i) + 1]);
    REQUIRE(cells.size() == 7);
    const bool window_row = i < 7;
    CHECK(cells[0] == (window_row ? "window" : "delay"));
    const int64_t w = window_row ? window_grid[static_cast<size_t>(i)] : 150;
    const int64_t d = window_row ? 100 : delay_grid[static_cast<size_t>(i - 7)];
    CHECK(std::stoll(cells[1]) == w);
    CHECK(std::stoll(cells[2]) == d);
    CHECK(std::stoll(cells[3]) == std::max<int64_t>(1, w / 5));
    if (i == 0) {
      CHECK(cells[5] == "nan");
      CHECK(cells[6] == "nan");
      CHECK(std::stoll(cells[4]) == 0);
    } else {
      CHECK(std::stoll(cells[4]) == expect_windows(w, d, std::max<int64_t>(1, w / 5)));
      CHECK(std::isfinite(std::strtod(cells[5].c_str(), nullptr)));
      CHECK(std::isfinite(std::strtod(cells[6].c_str(), nullptr)));
    }
  }
}

}  // TEST_SUITE
