#include "kinedec/cli.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "kinedec/checkpoint.hpp"
#include "kinedec/csv.hpp"
#include "kinedec/rng.hpp"

namespace kinedec::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using signals::TimeSeriesBlock;

[[noreturn]] void bad(const std::string& msg) { throw std::invalid_argument(msg); }

std::string fd(double v) { return csvio::format_double(v, 9); }

// ---- config document ----

void expect_keys(const json& obj, const std::string& section,
                 const std::vector<std::string>& allowed) {
  if (!obj.is_object()) bad(section + ": expected a JSON object");
  for (const auto& item : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end())
      bad(section + ": unknown key '" + item.key() + "'");
  }
}

void reject_owned(const json& obj, const std::string& section,
                  const std::vector<std::pair<std::string, std::string>>& owners) {
  if (!obj.is_object()) return;
  for (const auto& [key, owner] : owners)
    if (obj.contains(key)) bad(section + "." + key + " is derived from " + owner);
}

template <typename T>
void get_to(const json& obj, const char* key, T& out, const std::string& section) {
  if (!obj.contains(key)) return;
  try {
    obj.at(key).get_to(out);
  } catch (const json::exception& e) {
    bad(section + "." + key + ": " + e.what());
  }
}

template <size_t N>
void get_fixed_array(const json& obj, const char* key, std::array<double, N>& out,
                     const std::string& section) {
  if (!obj.contains(key)) return;
  const json& a = obj.at(key);
  if (!a.is_array() || a.size() != N)
    bad(section + "." + key + ": expected an array of " + std::to_string(N) + " numbers");
  for (size_t i = 0; i < N; ++i) {
    if (!a[i].is_number()) bad(section + "." + key + ": expected an array of numbers");
    out[i] = a[i].get<double>();
  }
}

PreprocessConfig preprocess_from_json(const json& j) {
  PreprocessConfig p;
  expect_keys(j, "preprocess",
              {"eeg_band_lo_hz", "eeg_band_hi_hz", "eeg_order", "emg_band_lo_hz",
               "emg_band_hi_hz", "emg_order", "emg_decimation", "use_emg", "rate_eeg_hz",
               "rate_emg_hz"});
  get_to(j, "eeg_band_lo_hz", p.eeg_band_lo_hz, "preprocess");
  get_to(j, "eeg_band_hi_hz", p.eeg_band_hi_hz, "preprocess");
  get_to(j, "eeg_order", p.eeg_order, "preprocess");
  get_to(j, "emg_band_lo_hz", p.emg_band_lo_hz, "preprocess");
  get_to(j, "emg_band_hi_hz", p.emg_band_hi_hz, "preprocess");
  get_to(j, "emg_order", p.emg_order, "preprocess");
  get_to(j, "emg_decimation", p.emg_decimation, "preprocess");
  get_to(j, "use_emg", p.use_emg, "preprocess");
  get_to(j, "rate_eeg_hz", p.rate_eeg_hz, "preprocess");
  get_to(j, "rate_emg_hz", p.rate_emg_hz, "preprocess");
  return p;
}

signals::WindowSpec window_from_json(const json& j, double rate_hz) {
  reject_owned(j, "window", {{"rate_hz", "preprocess.rate_eeg_hz"}});
  signals::WindowSpec w{250, 50, 100, rate_hz};
  expect_keys(j, "window", {"window_samples", "step_samples", "delay_ms"});
  get_to(j, "window_samples", w.window_samples, "window");
  get_to(j, "step_samples", w.step_samples, "window");
  get_to(j, "delay_ms", w.delay_ms, "window");
  return w;
}

model::ModelConfig model_from_json(const json& j, bool use_emg, int64_t window_samples) {
  reject_owned(j, "model",
               {{"in_channels_eeg", "the 32-channel dataset contract"},
                {"in_channels_emg", "preprocess.use_emg"},
                {"window_samples", "window.window_samples"},
                {"out_dim", "the 6 kinematic targets"}});
  model::ModelConfig m = model::config_from_json(j.dump());
  m.in_channels_eeg = 32;
  m.in_channels_emg = use_emg ? 5 : 0;
  m.window_samples = window_samples;
  m.out_dim = 6;
  return m;
}

train::TrainConfig train_from_json(const json& j, uint64_t seed) {
  reject_owned(j, "train", {{"seed", "the top-level seed"}});
  train::TrainConfig t;
  expect_keys(j, "train",
              {"epochs", "batch_size", "learning_rate", "patience", "beta1", "beta2", "eps"});
  get_to(j, "epochs", t.epochs, "train");
  get_to(j, "batch_size", t.batch_size, "train");
  get_to(j, "learning_rate", t.learning_rate, "train");
  get_to(j, "patience", t.patience, "train");
  get_to(j, "beta1", t.beta1, "train");
  get_to(j, "beta2", t.beta2, "train");
  get_to(j, "eps", t.eps, "train");
  t.seed = seed;
  return t;
}

copilot::ThresholdTable thresholds_from_json(const json& j) {
  copilot::ThresholdTable t;
  expect_keys(j, "thresholds",
              {"searching", "lifting", "holding", "putting", "returning", "unrely"});
  get_to(j, "searching", t.theta[0], "thresholds");
  get_to(j, "lifting", t.theta[1], "thresholds");
  get_to(j, "holding", t.theta[2], "thresholds");
  get_to(j, "putting", t.theta[3], "thresholds");
  get_to(j, "returning", t.theta[4], "thresholds");
  get_to(j, "unrely", t.theta_unrely, "thresholds");
  return t;
}

kinematics::WorkspaceBox workspace_from_json(const json& j) {
  kinematics::WorkspaceBox b = kinematics::WorkspaceBox::default_box();
  expect_keys(j, "workspace", {"lo", "hi"});
  get_fixed_array(j, "lo", b.lo, "workspace");
  get_fixed_array(j, "hi", b.hi, "workspace");
  return b;
}

train::SyntheticTrialSpec synthetic_from_json(const json& j, double rate_eeg, double rate_emg) {
  reject_owned(j, "synthetic",
               {{"rate_eeg", "preprocess.rate_eeg_hz"}, {"rate_emg", "preprocess.rate_emg_hz"}});
  train::SyntheticTrialSpec s;
  expect_keys(j, "synthetic",
              {"duration_s", "phase_boundaries_s", "eeg_noise", "emg_noise", "eeg_coupling",
               "emg_coupling", "lead_s"});
  get_to(j, "duration_s", s.duration_s, "synthetic");
  get_fixed_array(j, "phase_boundaries_s", s.phase_boundaries_s, "synthetic");
  get_to(j, "eeg_noise", s.eeg_noise, "synthetic");
  get_to(j, "emg_noise", s.emg_noise, "synthetic");
  get_to(j, "eeg_coupling", s.eeg_coupling, "synthetic");
  get_to(j, "emg_coupling", s.emg_coupling, "synthetic");
  get_to(j, "lead_s", s.lead_s, "synthetic");
  s.rate_eeg = rate_eeg;
  s.rate_emg = rate_emg;
  return s;
}

ExportConfig export_from_json(const json& j) {
  ExportConfig e;
  expect_keys(j, "export", {"out_rate_hz", "source"});
  get_to(j, "out_rate_hz", e.out_rate_hz, "export");
  get_to(j, "source", e.source, "export");
  return e;
}

RunConfig config_from_doc(const json& doc) {
  expect_keys(doc, "config",
              {"version", "seed", "data_dir", "work_dir", "trials", "preprocess", "window",
               "model", "train", "thresholds", "workspace", "synthetic", "export"});
  RunConfig c;
  get_to(doc, "version", c.version, "config");
  get_to(doc, "seed", c.seed, "config");
  std::string dir;
  if (doc.contains("data_dir")) {
    get_to(doc, "data_dir", dir, "config");
    c.data_dir = dir;
  }
  if (doc.contains("work_dir")) {
    get_to(doc, "work_dir", dir, "config");
    c.work_dir = dir;
  }
  get_to(doc, "trials", c.trials, "config");
  const json empty = json::object();
  auto sect = [&](const char* key) -> const json& {
    return doc.contains(key) ? doc.at(key) : empty;
  };
  c.preprocess = preprocess_from_json(sect("preprocess"));
  c.window = window_from_json(sect("window"), c.preprocess.rate_eeg_hz);
  c.model = model_from_json(sect("model"), c.preprocess.use_emg, c.window.window_samples);
  c.train = train_from_json(sect("train"), c.seed);
  c.thresholds = thresholds_from_json(sect("thresholds"));
  c.workspace = workspace_from_json(sect("workspace"));
  c.synthetic =
      synthetic_from_json(sect("synthetic"), c.preprocess.rate_eeg_hz, c.preprocess.rate_emg_hz);
  c.export_arm = export_from_json(sect("export"));
  return c;
}

void apply_override(json& doc, const std::string& key, const std::string& value) {
  if (key.empty()) bad("override: empty key");
  json* node = &doc;
  size_t start = 0;
  for (;;) {
    const size_t dot = key.find('.', start);
    const std::string part =
        dot == std::string::npos ? key.substr(start) : key.substr(start, dot - start);
    if (part.empty()) bad("override --" + key + ": empty path segment");
    if (dot == std::string::npos) {
      json parsed;
      try {
        parsed = json::parse(value);
      } catch (const json::exception&) {
        parsed = value;
      }
      (*node)[part] = std::move(parsed);
      return;
    }
    json& child = (*node)[part];
    if (child.is_null()) child = json::object();
    if (!child.is_object()) bad("override --" + key + ": '" + part + "' is not a section");
    node = &child;
    start = dot + 1;
  }
}

// ---- artifact layout ----

struct Paths {
  fs::path work;

  fs::path preprocessed() const { return work / "preprocessed"; }
  fs::path trial_dir(int id) const { return preprocessed() / ("trial_" + std::to_string(id)); }
  fs::path split() const { return work / "split.json"; }
  fs::path scaler() const { return work / "scaler.json"; }
  fs::path decoder() const { return work / "decoder.ckpt"; }
  fs::path history() const { return work / "history.csv"; }
  fs::path decoded(const char* split) const { return work / "decoded" / split; }
  fs::path latents(const char* split) const { return work / "latents" / split; }
  fs::path decoded_trial(const char* split, int id) const {
    return decoded(split) / ("trial_" + std::to_string(id) + ".csv");
  }
  fs::path latents_trial(const char* split, int id) const {
    return latents(split) / ("trial_" + std::to_string(id) + ".csv");
  }
  fs::path critic() const { return work / "critic.ckpt"; }
  fs::path posterior() const { return work / "posterior.ckpt"; }
  fs::path filtered() const { return work / "filtered"; }
  fs::path filtered_trial(int id) const {
    return filtered() / ("trial_" + std::to_string(id) + ".csv");
  }
  fs::path report() const { return work / "filter_report.txt"; }
  fs::path retention() const { return work / "retention_curve.csv"; }
  fs::path metrics() const { return work / "metrics.csv"; }
  fs::path arm() const { return work / "arm"; }
  fs::path arm_trial(int id) const { return arm() / ("trial_" + std::to_string(id) + ".csv"); }
  fs::path sweep() const { return work / "sweep.csv"; }
};

void require_artifact(const fs::path& p, const char* producer) {
  if (!fs::exists(p))
    throw std::runtime_error(p.string() + " is missing; run `" + producer + "` first");
}

struct Split {
  std::vector<int> train, val, test;
};

void save_split(const fs::path& path, const Split& s) {
  json j;
  j["train"] = s.train;
  j["val"] = s.val;
  j["test"] = s.test;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

Split load_split(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  json j = json::parse(in);
  Split s;
  j.at("train").get_to(s.train);
  j.at("val").get_to(s.val);
  j.at("test").get_to(s.test);
  return s;
}

void save_scaler(const fs::path& path, const signals::NormalizationParams& p) {
  json j;
  j["k_min"] = p.k_min;
  j["k_max"] = p.k_max;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

// ---- block <-> table plumbing ----

std::vector<std::vector<double>> block_rows(const TimeSeriesBlock& b) {
  const int64_t n = b.samples();
  const int64_t c = b.channels();
  std::vector<std::vector<double>> rows(static_cast<size_t>(n),
                                        std::vector<double>(static_cast<size_t>(c)));
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t i = 0; i < n; ++i)
      rows[static_cast<size_t>(i)][static_cast<size_t>(ch)] =
          b.data[static_cast<size_t>(ch)][static_cast<size_t>(i)];
  return rows;
}

TimeSeriesBlock block_from_table(const csvio::Table& t, double rate_hz, signals::SignalKind kind) {
  TimeSeriesBlock b;
  b.rate_hz = rate_hz;
  b.kind = kind;
  b.channel_names = t.header;
  const size_t c = t.cols();
  const size_t n = t.rows.size();
  b.data.assign(c, std::vector<double>(n));
  for (size_t i = 0; i < n; ++i)
    for (size_t ch = 0; ch < c; ++ch) b.data[ch][i] = t.rows[i][ch];
  return b;
}

void write_block_csv(const fs::path& path, const TimeSeriesBlock& b) {
  csvio::write_table(path, b.channel_names, block_rows(b));
}

void write_labels_csv(const fs::path& path, const std::vector<int>& labels) {
  std::vector<std::vector<double>> rows(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) rows[i] = {static_cast<double>(labels[i])};
  csvio::write_table(path, {"state"}, rows);
}

// ---- worker pool ----

void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
  if (n <= 0) return;
  int64_t hw = static_cast<int64_t>(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  const int64_t workers = std::min(n, hw);
  if (workers == 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<size_t>(n));
  std::atomic<int64_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int64_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const int64_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          errors[static_cast<size_t>(i)] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---- ingest ----

void trim_block(TimeSeriesBlock& b, int64_t n) {
  for (auto& ch : b.data) ch.resize(static_cast<size_t>(n));
}

csvio::Table read_required(const fs::path& dir, const char* name) {
  const fs::path p = dir / name;
  if (!fs::exists(p)) throw std::runtime_error(std::string(name) + " is missing");
  return csvio::read_table(p);
}

TrialBundle read_trial(const fs::path& dir, int id, const PreprocessConfig& pp) {
  TrialBundle b;
  b.id = id;
  const auto t_eeg = read_required(dir, "eeg.csv");
  if (t_eeg.cols() != 32)
    throw std::runtime_error("eeg.csv: expected 32 channels, got " + std::to_string(t_eeg.cols()));
  if (t_eeg.rows.empty()) throw std::runtime_error("eeg.csv: no samples");
  b.eeg = block_from_table(t_eeg, pp.rate_eeg_hz, signals::SignalKind::EEG);
  signals::validate_block(b.eeg, "eeg.csv");

  const auto t_emg = read_required(dir, "emg.csv");
  if (t_emg.cols() != 5)
    throw std::runtime_error("emg.csv: expected 5 channels, got " + std::to_string(t_emg.cols()));
  if (t_emg.rows.empty()) throw std::runtime_error("emg.csv: no samples");
  b.emg = block_from_table(t_emg, pp.rate_emg_hz, signals::SignalKind::EMG);
  signals::validate_block(b.emg, "emg.csv");

  const auto t_kin = read_required(dir, "kin.csv");
  if (t_kin.cols() != 6)
    throw std::runtime_error("kin.csv: expected 6 dims, got " + std::to_string(t_kin.cols()));
  b.kin = block_from_table(t_kin, pp.rate_eeg_hz, signals::SignalKind::KIN);
  signals::validate_block(b.kin, "kin.csv");

  const int64_t n_eeg = b.eeg.samples();
  if (b.kin.samples() != n_eeg)
    throw std::runtime_error("kin.csv: " + std::to_string(b.kin.samples()) +
                             " samples but eeg.csv has " + std::to_string(n_eeg));
  const int64_t n_dec = b.emg.samples() / pp.emg_decimation;
  if (std::llabs(n_eeg - n_dec) > 1)
    throw std::runtime_error("emg.csv: " + std::to_string(b.emg.samples()) + " samples decimate to " +
                             std::to_string(n_dec) + ", but eeg.csv has " + std::to_string(n_eeg) +
                             "; durations disagree beyond one decimation quantum");

  if (fs::exists(dir / "labels.csv")) {
    const auto t = csvio::read_table(dir / "labels.csv");
    if (t.cols() != 1) throw std::runtime_error("labels.csv: expected one column");
    if (static_cast<int64_t>(t.rows.size()) != n_eeg)
      throw std::runtime_error("labels.csv: " + std::to_string(t.rows.size()) +
                               " rows but eeg.csv has " + std::to_string(n_eeg) + " samples");
    b.labels.resize(t.rows.size());
    for (size_t i = 0; i < t.rows.size(); ++i) {
      const double v = t.rows[i][0];
      const int s = static_cast<int>(std::llround(v));
      if (v != s || s < 0 || s > 4)
        throw std::runtime_error("labels.csv: state must be an integer in [0,4], got " +
                                 csvio::format_double(v, 17));
      b.labels[i] = s;
    }
  }

  if (fs::exists(dir / "events.csv")) {
    const auto t = csvio::read_table(dir / "events.csv");
    if (t.cols() < 1) throw std::runtime_error("events.csv: no channels");
    if (static_cast<int64_t>(t.rows.size()) != n_eeg)
      throw std::runtime_error("events.csv: " + std::to_string(t.rows.size()) +
                               " rows but eeg.csv has " + std::to_string(n_eeg) + " samples");
    b.events = block_from_table(t, pp.rate_eeg_hz, signals::SignalKind::KIN);
    signals::validate_block(b.events, "events.csv");
  }
  return b;
}

// ---- preprocessed artifacts ----

struct Prepped {
  TimeSeriesBlock eeg, emg, kin, events;
  std::vector<int> labels;
  bool has_emg = false;
  bool has_events = false;
};

Prepped load_prepped(const Paths& paths, int id, const PreprocessConfig& pp) {
  const fs::path dir = paths.trial_dir(id);
  require_artifact(dir / "kin.csv", "preprocess");
  Prepped p;
  p.eeg = block_from_table(csvio::read_table(dir / "eeg.csv"), pp.rate_eeg_hz,
                           signals::SignalKind::EEG);
  p.kin = block_from_table(csvio::read_table(dir / "kin.csv"), pp.rate_eeg_hz,
                           signals::SignalKind::KIN);
  if (fs::exists(dir / "emg.csv")) {
    p.emg = block_from_table(csvio::read_table(dir / "emg.csv"), pp.rate_eeg_hz,
                             signals::SignalKind::EMG);
    p.has_emg = true;
  }
  if (fs::exists(dir / "labels.csv")) {
    const auto t = csvio::read_table(dir / "labels.csv");
    p.labels.resize(t.rows.size());
    for (size_t i = 0; i < t.rows.size(); ++i)
      p.labels[i] = static_cast<int>(std::llround(t.rows[i][0]));
  }
  if (fs::exists(dir / "events.csv")) {
    p.events = block_from_table(csvio::read_table(dir / "events.csv"), pp.rate_eeg_hz,
                                signals::SignalKind::KIN);
    p.has_events = true;
  }
  return p;
}

void append_prepped_windows(const Prepped& p, const RunConfig& cfg, int id,
                            train::WindowSet& out) {
  if (cfg.preprocess.use_emg && !p.has_emg)
    throw std::runtime_error("trial_" + std::to_string(id) +
                             " was preprocessed without emg; re-run `preprocess`");
  const TimeSeriesBlock* emg = cfg.preprocess.use_emg ? &p.emg : nullptr;
  train::append_windows(p.eeg, emg, p.kin, p.labels, cfg.window, id, out);
}

// Target sample index of window i under the spec geometry.
int64_t target_sample(const signals::WindowSpec& w, int64_t i) {
  return w.window_samples - 1 + i * w.step_samples + w.delay_samples();
}

// ---- posterior head ----

struct PosteriorHead {
  int64_t dim = 0;
  std::vector<double> w;  // [dim][5] row-major
  std::array<double, copilot::state_count> b{};

  std::array<double, copilot::state_count> predict(const std::vector<double>& latent) const {
    std::array<double, copilot::state_count> z = b;
    for (int64_t i = 0; i < dim; ++i) {
      const double v = latent[static_cast<size_t>(i)];
      for (int k = 0; k < copilot::state_count; ++k)
        z[static_cast<size_t>(k)] += v * w[static_cast<size_t>(i * copilot::state_count + k)];
    }
    const double m = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (auto& v : z) {
      v = std::exp(v - m);
      sum += v;
    }
    for (auto& v : z) v /= sum;
    return z;
  }
};

PosteriorHead fit_posterior_head(const std::vector<std::vector<double>>& latents,
                                 const std::vector<int>& states, uint64_t seed) {
  const int64_t n = static_cast<int64_t>(latents.size());
  if (n == 0) throw std::runtime_error("no labeled windows to fit the state classifier");
  const int64_t dim = static_cast<int64_t>(latents[0].size());
  constexpr int kEpochs = 100;
  constexpr int64_t kBatch = 64;

  Rng init(Rng::mix(seed, 1));
  std::vector<double> w0(static_cast<size_t>(dim * copilot::state_count));
  const double lim = 1.0 / std::sqrt(static_cast<double>(dim));
  for (auto& v : w0) v = init.uniform(-lim, lim);
  tensor::Tensor w = tensor::Tensor::from({dim, copilot::state_count}, std::move(w0), true);
  tensor::Tensor b = tensor::Tensor::zeros({copilot::state_count}, true);
  std::vector<std::pair<std::string, tensor::Tensor>> params{{"posterior.w", w},
                                                             {"posterior.b", b}};
  train::Adam opt(params, {1e-2, 0.9, 0.999, 1e-8});

  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < kEpochs; ++epoch) {
    Rng shuf(Rng::mix(seed, 2 * static_cast<uint64_t>(epoch) + 2));
    shuf.shuffle(order);
    for (int64_t lo = 0; lo < n; lo += kBatch) {
      const int64_t hi = std::min(n, lo + kBatch);
      const int64_t bs = hi - lo;
      std::vector<double> xs;
      xs.reserve(static_cast<size_t>(bs * dim));
      std::vector<int> ys(static_cast<size_t>(bs));
      for (int64_t k = lo; k < hi; ++k) {
        const auto& row = latents[static_cast<size_t>(order[static_cast<size_t>(k)])];
        xs.insert(xs.end(), row.begin(), row.end());
        ys[static_cast<size_t>(k - lo)] = states[static_cast<size_t>(order[static_cast<size_t>(k)])];
      }
      tensor::Tensor x = tensor::Tensor::from({bs, dim}, std::move(xs));
      tensor::Tensor loss = tensor::cross_entropy(tensor::dense(x, w, b), ys);
      opt.zero_grad();
      tensor::backward(loss);
      opt.step();
    }
  }

  PosteriorHead head;
  head.dim = dim;
  head.w = w.values();
  const auto& bv = b.values();
  std::copy(bv.begin(), bv.end(), head.b.begin());
  return head;
}

void save_posterior_head(const fs::path& path, const PosteriorHead& h) {
  checkpoint::Checkpoint ckpt;
  json meta;
  meta["kind"] = "posterior";
  meta["latent_dim"] = h.dim;
  meta["states"] = copilot::state_count;
  ckpt.metadata = meta.dump();
  ckpt.arrays.push_back({"posterior.w", {h.dim, copilot::state_count}, h.w});
  ckpt.arrays.push_back(
      {"posterior.b", {copilot::state_count}, std::vector<double>(h.b.begin(), h.b.end())});
  checkpoint::save_checkpoint(path, ckpt);
}

// ---- per-trial decoded artifacts ----

struct DecodedTrial {
  std::vector<int64_t> samples;
  std::vector<std::array<double, 6>> decoded;
  std::vector<std::vector<double>> latents;
};

DecodedTrial load_decoded_trial(const Paths& paths, const char* split, int id, bool with_latents) {
  const fs::path dpath = paths.decoded_trial(split, id);
  require_artifact(dpath, "decode");
  const auto t = csvio::read_table(dpath);
  if (t.cols() != 7 || t.header[0] != "sample")
    throw std::runtime_error(dpath.string() + ": unexpected layout; re-run `decode`");
  DecodedTrial d;
  d.samples.reserve(t.rows.size());
  d.decoded.reserve(t.rows.size());
  for (const auto& row : t.rows) {
    d.samples.push_back(static_cast<int64_t>(row[0]));
    std::array<double, 6> v;
    std::copy(row.begin() + 1, row.end(), v.begin());
    d.decoded.push_back(v);
  }
  if (with_latents) {
    const fs::path lpath = paths.latents_trial(split, id);
    require_artifact(lpath, "decode");
    const auto lt = csvio::read_table(lpath);
    if (lt.rows.size() != t.rows.size())
      throw std::runtime_error(lpath.string() + ": row count differs from decoded; re-run `decode`");
    d.latents.reserve(lt.rows.size());
    for (const auto& row : lt.rows) d.latents.emplace_back(row.begin() + 1, row.end());
  }
  return d;
}

std::array<double, 6> truth_at(const csvio::Table& kin, int64_t sample, const fs::path& where) {
  if (sample < 0 || sample >= static_cast<int64_t>(kin.rows.size()))
    throw std::runtime_error(where.string() + ": sample " + std::to_string(sample) +
                             " is outside the preprocessed trial; re-run `decode`");
  std::array<double, 6> v;
  const auto& row = kin.rows[static_cast<size_t>(sample)];
  std::copy(row.begin(), row.end(), v.begin());
  return v;
}

// ---- stages ----

void cmd_generate(const RunConfig& cfg, std::ostream& out) {
  fs::create_directories(cfg.data_dir);
  parallel_for(cfg.trials, [&](int64_t i) {
    auto trial = train::generate_synthetic_trial(
        cfg.synthetic, Rng::mix(cfg.seed, 0x10000 + static_cast<uint64_t>(i)));
    TrialBundle b;
    b.id = static_cast<int>(i);
    b.eeg = std::move(trial.eeg);
    b.emg = std::move(trial.emg);
    b.kin = std::move(trial.kin);
    b.labels = std::move(trial.labels);
    b.events = std::move(trial.events);
    write_bundle(cfg.data_dir / ("trial_" + std::to_string(i)), b);
  });
  out << "generate: wrote " << cfg.trials << " trials to " << cfg.data_dir.string() << "\n";
}

void cmd_preprocess(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const Paths paths{cfg.work_dir};
  const auto& pp = cfg.preprocess;
  fs::create_directories(paths.work);
  IngestResult ing = ingest(cfg.data_dir, pp);
  for (const auto& line : ing.skipped) err << "preprocess: skipped " << line << "\n";
  const int n = static_cast<int>(ing.bundles.size());

  const auto plan = train::make_split(n, cfg.seed);
  Split split;
  auto to_ids = [&](const std::vector<int>& idx) {
    std::vector<int> ids(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) ids[i] = ing.bundles[static_cast<size_t>(idx[i])].id;
    std::sort(ids.begin(), ids.end());
    return ids;
  };
  split.train = to_ids(plan.train_trials);
  split.val = to_ids(plan.val_trials);
  split.test = to_ids(plan.test_trials);

  const auto bp_eeg = signals::design_bandpass(pp.eeg_band_lo_hz, pp.eeg_band_hi_hz, pp.eeg_order,
                                               pp.rate_eeg_hz);
  const auto bp_emg = pp.use_emg ? signals::design_bandpass(pp.emg_band_lo_hz, pp.emg_band_hi_hz,
                                                            pp.emg_order, pp.rate_emg_hz)
                                 : signals::SosFilter{};

  std::vector<Prepped> prepped(static_cast<size_t>(n));
  parallel_for(n, [&](int64_t i) {
    const auto& b = ing.bundles[static_cast<size_t>(i)];
    Prepped p;
    p.eeg = signals::common_average_reference(signals::filter_forward_backward(b.eeg, bp_eeg));
    int64_t keep = p.eeg.samples();
    if (pp.use_emg) {
      p.emg = signals::decimate(signals::filter_forward_backward(b.emg, bp_emg),
                                pp.emg_decimation);
      p.has_emg = true;
      keep = std::min(keep, p.emg.samples());
    }
    trim_block(p.eeg, keep);
    if (p.has_emg) trim_block(p.emg, keep);
    p.kin = b.kin;
    trim_block(p.kin, keep);
    p.labels = b.labels;
    if (!p.labels.empty()) p.labels.resize(static_cast<size_t>(keep));
    if (b.has_events()) {
      p.events = b.events;
      trim_block(p.events, keep);
      p.has_events = true;
    }
    prepped[static_cast<size_t>(i)] = std::move(p);
  });

  TimeSeriesBlock train_kin;
  train_kin.rate_hz = pp.rate_eeg_hz;
  train_kin.kind = signals::SignalKind::KIN;
  train_kin.channel_names = prepped[0].kin.channel_names;
  train_kin.data.assign(prepped[0].kin.data.size(), {});
  for (int idx : plan.train_trials) {
    const auto& kin = prepped[static_cast<size_t>(idx)].kin;
    for (size_t ch = 0; ch < kin.data.size(); ++ch)
      train_kin.data[ch].insert(train_kin.data[ch].end(), kin.data[ch].begin(),
                                kin.data[ch].end());
  }
  const auto scaler = signals::fit_minmax(train_kin);
  save_scaler(paths.scaler(), scaler);

  parallel_for(n, [&](int64_t i) {
    const auto& p = prepped[static_cast<size_t>(i)];
    const fs::path dir = paths.trial_dir(ing.bundles[static_cast<size_t>(i)].id);
    fs::create_directories(dir);
    write_block_csv(dir / "eeg.csv", p.eeg);
    if (p.has_emg) write_block_csv(dir / "emg.csv", p.emg);
    write_block_csv(dir / "kin.csv", signals::apply_minmax(p.kin, scaler));
    if (!p.labels.empty()) write_labels_csv(dir / "labels.csv", p.labels);
    if (p.has_events) write_block_csv(dir / "events.csv", p.events);
  });
  save_split(paths.split(), split);

  out << "preprocess: " << n << " trials (" << split.train.size() << " train / "
      << split.val.size() << " val / " << split.test.size() << " test) -> "
      << paths.preprocessed().string() << "\n";
}

void cmd_train(const RunConfig& cfg, std::ostream& out) {
  const Paths paths{cfg.work_dir};
  require_artifact(paths.split(), "preprocess");
  require_artifact(paths.preprocessed(), "preprocess");
  const Split split = load_split(paths.split());

  train::WindowSet train_set, val_set;
  for (int id : split.train)
    append_prepped_windows(load_prepped(paths, id, cfg.preprocess), cfg, id, train_set);
  for (int id : split.val)
    append_prepped_windows(load_prepped(paths, id, cfg.preprocess), cfg, id, val_set);
  if (train_set.size() == 0 || val_set.size() == 0)
    throw std::runtime_error("no windows fit the trials; shrink window.window_samples or delay_ms");

  auto tcfg = cfg.train;
  tcfg.seed = cfg.seed;
  const auto res = train::train_loop(cfg.model, train_set, val_set, tcfg, paths.decoder());
  train::write_history(paths.history(), res.history);

  out << "train: best val " << fd(res.best_val_loss) << " at epoch " << res.best_epoch
      << " after " << res.history.size() << " epochs -> " << paths.decoder().string() << "\n";
}

void decode_into(const model::Model& mdl, const train::WindowSet& ws, int batch_size,
                 std::vector<std::array<double, 6>>& decoded,
                 std::vector<std::vector<double>>& latents) {
  const int64_t n = ws.size();
  const int64_t dim = mdl.config().embed_dim;
  const bool fusion = mdl.config().fusion();
  for (int64_t lo = 0; lo < n; lo += batch_size) {
    const int64_t hi = std::min(n, lo + batch_size);
    std::vector<int64_t> idx(static_cast<size_t>(hi - lo));
    std::iota(idx.begin(), idx.end(), lo);
    const auto batch = train::make_batch(ws, idx);
    const auto res = mdl.forward(batch.eeg, fusion ? &batch.emg : nullptr);
    const auto& ov = res.output.values();
    const auto& lv = res.latent.values();
    for (int64_t r = 0; r < hi - lo; ++r) {
      std::array<double, 6> row;
      for (int k = 0; k < 6; ++k) row[static_cast<size_t>(k)] = ov[static_cast<size_t>(r * 6 + k)];
      decoded.push_back(row);
      latents.emplace_back(lv.begin() + r * dim, lv.begin() + (r + 1) * dim);
    }
  }
}

void cmd_decode(const RunConfig& cfg, std::ostream& out) {
  const Paths paths{cfg.work_dir};
  require_artifact(paths.decoder(), "train");
  require_artifact(paths.split(), "preprocess");
  const Split split = load_split(paths.split());
  const auto mdl = model::Model::load(paths.decoder());
  if (mdl.config().window_samples != cfg.window.window_samples)
    throw std::runtime_error("decoder.ckpt was trained with window_samples " +
                             std::to_string(mdl.config().window_samples) + " but the config says " +
                             std::to_string(cfg.window.window_samples) + "; re-run `train`");
  if (mdl.config().fusion() != cfg.preprocess.use_emg)
    throw std::runtime_error("decoder.ckpt modalities disagree with preprocess.use_emg; re-run `train`");
  const int64_t dim = mdl.config().embed_dim;

  std::vector<std::string> latent_header{"sample"};
  for (int64_t k = 0; k < dim; ++k) latent_header.push_back("l" + std::to_string(k));

  int64_t train_windows = 0, test_windows = 0;
  int trials = 0;
  for (const char* split_name : {"train", "test"}) {
    const auto& ids = std::string(split_name) == "train" ? split.train : split.test;
    fs::create_directories(paths.decoded(split_name));
    fs::create_directories(paths.latents(split_name));
    for (int id : ids) {
      const auto p = load_prepped(paths, id, cfg.preprocess);
      train::WindowSet ws;
      append_prepped_windows(p, cfg, id, ws);
      std::vector<std::array<double, 6>> decoded;
      std::vector<std::vector<double>> latents;
      decode_into(mdl, ws, cfg.train.batch_size, decoded, latents);

      std::vector<std::string> dec_header{"sample"};
      for (const auto& name : p.kin.channel_names) dec_header.push_back(name);
      std::vector<std::vector<double>> dec_rows(decoded.size());
      std::vector<std::vector<double>> lat_rows(latents.size());
      for (size_t i = 0; i < decoded.size(); ++i) {
        const double sample =
            static_cast<double>(target_sample(cfg.window, static_cast<int64_t>(i)));
        dec_rows[i].reserve(7);
        dec_rows[i].push_back(sample);
        dec_rows[i].insert(dec_rows[i].end(), decoded[i].begin(), decoded[i].end());
        lat_rows[i].reserve(static_cast<size_t>(dim) + 1);
        lat_rows[i].push_back(sample);
        lat_rows[i].insert(lat_rows[i].end(), latents[i].begin(), latents[i].end());
      }
      csvio::write_table(paths.decoded_trial(split_name, id), dec_header, dec_rows);
      csvio::write_table(paths.latents_trial(split_name, id), latent_header, lat_rows);
      (std::string(split_name) == "train" ? train_windows : test_windows) +=
          static_cast<int64_t>(decoded.size());
      ++trials;
    }
  }
  out << "decode: " << train_windows << " train + " << test_windows << " test windows across "
      << trials << " trials -> " << (cfg.work_dir / "decoded").string() << "\n";
}

void cmd_evaluate(const RunConfig& cfg, std::ostream& out) {
  const Paths paths{cfg.work_dir};
  require_artifact(paths.decoded("test"), "decode");
  require_artifact(paths.split(), "preprocess");
  const Split split = load_split(paths.split());

  std::vector<std::array<double, 6>> pred, truth;
  std::vector<std::string> names;
  for (int id : split.test) {
    const auto d = load_decoded_trial(paths, "test", id, false);
    const auto kin = csvio::read_table(paths.trial_dir(id) / "kin.csv");
    if (names.empty()) names = kin.header;
    for (size_t i = 0; i < d.samples.size(); ++i) {
      pred.push_back(d.decoded[i]);
      truth.push_back(truth_at(kin, d.samples[i], paths.decoded_trial("test", id)));
    }
  }
  if (pred.size() < 2) throw std::runtime_error("fewer than two decoded windows to evaluate");

  std::ostringstream table;
  table << "axis,pcc,rmse\n";
  for (int a = 0; a < 6; ++a) {
    std::vector<double> pa(pred.size()), ta(truth.size());
    for (size_t i = 0; i < pred.size(); ++i) {
      pa[i] = pred[i][static_cast<size_t>(a)];
      ta[i] = truth[i][static_cast<size_t>(a)];
    }
    table << names[static_cast<size_t>(a)] << ',' << fd(kinematics::pcc(pa, ta)) << ','
          << fd(kinematics::rmse(pa, ta)) << "\n";
  }
  std::vector<double> pflat, tflat;
  pflat.reserve(pred.size() * 6);
  tflat.reserve(truth.size() * 6);
  for (size_t i = 0; i < pred.size(); ++i) {
    pflat.insert(pflat.end(), pred[i].begin(), pred[i].end());
    tflat.insert(tflat.end(), truth[i].begin(), truth[i].end());
  }
  const double opcc = kinematics::overall_pcc(pred, truth);
  const double ormse = kinematics::rmse(pflat, tflat);
  table << "overall," << fd(opcc) << ',' << fd(ormse) << "\n";

  std::ofstream metrics(paths.metrics(), std::ios::binary);
  if (!metrics) throw std::runtime_error("cannot write " + paths.metrics().string());
  metrics << table.str();
  out << table.str();
  out << "evaluate: overall pcc " << fd(opcc) << " rmse " << fd(ormse) << " over " << pred.size()
      << " windows\n";
}

void cmd_filter(const RunConfig& cfg, std::ostream& out) {
  const Paths paths{cfg.work_dir};
  require_artifact(paths.decoded("train"), "decode");
  require_artifact(paths.decoded("test"), "decode");
  require_artifact(paths.split(), "preprocess");
  const Split split = load_split(paths.split());
  const double point_rate = cfg.preprocess.rate_eeg_hz / static_cast<double>(cfg.window.step_samples);

  std::vector<std::vector<double>> lat_train;
  std::vector<double> jerk_train, err_train;
  std::vector<int> state_train;
  for (int id : split.train) {
    const auto d = load_decoded_trial(paths, "train", id, true);
    const auto kin = csvio::read_table(paths.trial_dir(id) / "kin.csv");
    const fs::path labels_path = paths.trial_dir(id) / "labels.csv";
    if (!fs::exists(labels_path))
      throw std::runtime_error("trial_" + std::to_string(id) +
                               " has no labels.csv; the filter needs labeled training trials");
    const auto labels = csvio::read_table(labels_path);
    const auto jerks = copilot::jerk_profile(d.decoded, point_rate);
    for (size_t i = 0; i < d.samples.size(); ++i) {
      const auto t = truth_at(kin, d.samples[i], paths.decoded_trial("train", id));
      double e2 = 0.0;
      for (int k = 0; k < 6; ++k) {
        const double diff = d.decoded[i][static_cast<size_t>(k)] - t[static_cast<size_t>(k)];
        e2 += diff * diff;
      }
      lat_train.push_back(d.latents[i]);
      jerk_train.push_back(jerks[i]);
      err_train.push_back(std::sqrt(e2));
      state_train.push_back(
          static_cast<int>(std::llround(labels.rows[static_cast<size_t>(d.samples[i])][0])));
    }
  }
  if (lat_train.empty()) throw std::runtime_error("no training windows to fit the filter");

  const PosteriorHead head = fit_posterior_head(lat_train, state_train, Rng::mix(cfg.seed, 2));
  save_posterior_head(paths.posterior(), head);

  std::vector<std::array<double, copilot::state_count>> post_train(lat_train.size());
  for (size_t i = 0; i < lat_train.size(); ++i) post_train[i] = head.predict(lat_train[i]);

  const int64_t dim = static_cast<int64_t>(lat_train[0].size());
  copilot::Critic critic(dim, 16, Rng::mix(cfg.seed, 3));
  copilot::CriticTrainConfig ccfg;
  ccfg.seed = Rng::mix(cfg.seed, 4);
  copilot::train_critic(critic, lat_train, post_train, jerk_train, err_train, ccfg);
  critic.save(paths.critic());

  const auto rules = copilot::TransitionRules::defaults();
  struct TrialPoints {
    int id = 0;
    std::vector<copilot::ScoredPoint> points;
    std::vector<std::array<double, 6>> truth;
  };
  std::vector<TrialPoints> trials;
  std::vector<std::string> kin_names;
  for (int id : split.test) {
    const auto d = load_decoded_trial(paths, "test", id, true);
    const auto kin = csvio::read_table(paths.trial_dir(id) / "kin.csv");
    if (kin_names.empty()) kin_names = kin.header;
    const fs::path events_path = paths.trial_dir(id) / "events.csv";
    if (!fs::exists(events_path))
      throw std::runtime_error("trial_" + std::to_string(id) +
                               " has no events.csv; the transition rules need sensor channels");
    const auto events = csvio::read_table(events_path);
    const auto jerks = copilot::jerk_profile(d.decoded, point_rate);
    TrialPoints tp;
    tp.id = id;
    for (size_t i = 0; i < d.samples.size(); ++i) {
      copilot::ScoredPoint pt;
      pt.time_index = d.samples[i];
      pt.decoded = d.decoded[i];
      pt.posterior = head.predict(d.latents[i]);
      const auto& row = events.rows[static_cast<size_t>(d.samples[i])];
      for (size_t c = 0; c < events.header.size(); ++c) pt.sensors[events.header[c]] = row[c];
      pt.confidence = critic.score(d.latents[i], pt.posterior, jerks[i]);
      tp.points.push_back(std::move(pt));
      tp.truth.push_back(truth_at(kin, d.samples[i], paths.decoded_trial("test", id)));
    }
    trials.push_back(std::move(tp));
  }

  fs::create_directories(paths.filtered());
  copilot::FilterResult merged;
  for (const auto& tp : trials) {
    const auto fr = copilot::filter_trajectory(tp.points, cfg.thresholds, rules);
    std::vector<std::vector<double>> rows(fr.annotated.size());
    for (size_t i = 0; i < fr.annotated.size(); ++i) {
      const auto& a = fr.annotated[i];
      rows[i] = {static_cast<double>(a.time_index),
                 a.retained ? 1.0 : 0.0,
                 static_cast<double>(static_cast<int>(a.machine_state)),
                 static_cast<double>(static_cast<int>(a.effective_state)),
                 a.confidence};
      rows[i].insert(rows[i].end(), a.decoded.begin(), a.decoded.end());
    }
    std::vector<std::string> header{"sample", "retained", "machine_state", "effective_state",
                                    "confidence"};
    header.insert(header.end(), kin_names.begin(), kin_names.end());
    csvio::write_table(paths.filtered_trial(tp.id), header, rows);

    merged.annotated.insert(merged.annotated.end(), fr.annotated.begin(), fr.annotated.end());
    merged.retained.insert(merged.retained.end(), fr.retained.begin(), fr.retained.end());
    for (size_t s = 0; s < merged.by_state.size(); ++s) {
      merged.by_state[s].points += fr.by_state[s].points;
      merged.by_state[s].retained += fr.by_state[s].retained;
    }
  }
  merged.empty_input = merged.annotated.empty();
  merged.retention_ratio = merged.empty_input
                               ? std::numeric_limits<double>::quiet_NaN()
                               : static_cast<double>(merged.retained.size()) /
                                     static_cast<double>(merged.annotated.size());
  const std::string report = copilot::filter_summary(merged);
  std::ofstream rep(paths.report(), std::ios::binary);
  if (!rep) throw std::runtime_error("cannot write " + paths.report().string());
  rep << report;

  std::vector<std::vector<double>> curve;
  for (int s = 0; s <= 25; ++s) {
    const double scale = static_cast<double>(s) / 10.0;
    const auto scaled = cfg.thresholds.scaled(scale);
    int64_t total = 0, kept = 0;
    std::vector<std::array<double, 6>> rp, rt;
    for (const auto& tp : trials) {
      const auto fr = copilot::filter_trajectory(tp.points, scaled, rules);
      total += static_cast<int64_t>(fr.annotated.size());
      for (size_t i = 0; i < fr.annotated.size(); ++i) {
        if (!fr.annotated[i].retained) continue;
        ++kept;
        rp.push_back(fr.annotated[i].decoded);
        rt.push_back(tp.truth[i]);
      }
    }
    double pcc = std::numeric_limits<double>::quiet_NaN();
    try {
      pcc = kinematics::overall_pcc(rp, rt);
    } catch (const std::invalid_argument&) {
    }
    const double retention =
        total == 0 ? std::numeric_limits<double>::quiet_NaN()
                   : static_cast<double>(kept) / static_cast<double>(total);
    curve.push_back({scale, retention, pcc});
  }
  csvio::write_table(paths.retention(), {"scale", "retention", "pcc"}, curve, 9);

  const auto eol = report.find('\n');
  out << "filter: " << report.substr(0, eol) << " -> " << paths.report().string() << "\n";
}

void cmd_export_arm(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const Paths paths{cfg.work_dir};
  const bool filtered = cfg.export_arm.source == "filtered";
  if (filtered)
    require_artifact(paths.filtered(), "filter");
  else
    require_artifact(paths.decoded("test"), "decode");
  require_artifact(paths.split(), "preprocess");
  const Split split = load_split(paths.split());
  fs::create_directories(paths.arm());
  const double rate = cfg.preprocess.rate_eeg_hz;

  struct Result {
    int64_t rows = 0;
    int64_t skipped = 0;
    std::string note;
    bool exported = false;
  };
  std::vector<Result> results(split.test.size());
  parallel_for(static_cast<int64_t>(split.test.size()), [&](int64_t i) {
    const int id = split.test[static_cast<size_t>(i)];
    std::vector<int64_t> samples;
    std::vector<std::array<double, 6>> rows;
    if (filtered) {
      const fs::path p = paths.filtered_trial(id);
      require_artifact(p, "filter");
      const auto t = csvio::read_table(p);
      if (t.cols() != 11 || t.header[1] != "retained")
        throw std::runtime_error(p.string() + ": unexpected layout; re-run `filter`");
      for (const auto& row : t.rows) {
        if (row[1] == 0.0) continue;
        samples.push_back(static_cast<int64_t>(row[0]));
        std::array<double, 6> v;
        std::copy(row.begin() + 5, row.begin() + 11, v.begin());
        rows.push_back(v);
      }
    } else {
      const auto d = load_decoded_trial(paths, "test", id, false);
      samples = d.samples;
      rows = d.decoded;
    }
    if (rows.size() < 2) {
      results[static_cast<size_t>(i)].note =
          "export-arm: trial_" + std::to_string(id) + " has fewer than two points, skipped";
      return;
    }
    kinematics::Trajectory3D index, thumb;
    index.normalized = thumb.normalized = true;
    for (size_t k = 0; k < rows.size(); ++k) {
      const double t = static_cast<double>(samples[k]) / rate;
      index.timestamps.push_back(t);
      thumb.timestamps.push_back(t);
      index.points.push_back({rows[k][0], rows[k][1], rows[k][2]});
      thumb.points.push_back({rows[k][3], rows[k][4], rows[k][5]});
    }
    auto mid = kinematics::midpoint(index, thumb);
    for (auto& pt : mid.points)
      for (auto& v : pt) v = std::clamp(v, 0.0, 1.0);
    const auto mapped = kinematics::map_to_workspace(mid, cfg.workspace);
    const auto arm = kinematics::ArmModel::panda();
    const auto sol = kinematics::solve_trajectory(arm, mapped, arm.neutral_pose(),
                                                  cfg.export_arm.out_rate_hz);
    kinematics::write_joint_csv(paths.arm_trial(id), sol.joints);
    auto& r = results[static_cast<size_t>(i)];
    r.rows = static_cast<int64_t>(sol.joints.timestamps.size());
    r.skipped = static_cast<int64_t>(sol.skipped.size());
    r.exported = true;
  });

  int64_t total_rows = 0, total_skipped = 0;
  int exported = 0;
  for (const auto& r : results) {
    if (!r.note.empty()) err << r.note << "\n";
    total_rows += r.rows;
    total_skipped += r.skipped;
    exported += r.exported ? 1 : 0;
  }
  out << "export-arm: " << exported << " trials, " << total_rows << " joint rows, "
      << total_skipped << " skipped -> " << paths.arm().string() << "\n";
}

void cmd_sweep(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const Paths paths{cfg.work_dir};
  require_artifact(paths.split(), "preprocess");
  require_artifact(paths.preprocessed(), "preprocess");
  const Split split = load_split(paths.split());

  std::vector<std::pair<int, Prepped>> train_trials, val_trials;
  for (int id : split.train) train_trials.emplace_back(id, load_prepped(paths, id, cfg.preprocess));
  for (int id : split.val) val_trials.emplace_back(id, load_prepped(paths, id, cfg.preprocess));

  const std::array<int64_t, 7> window_grid{50, 100, 200, 250, 500, 750, 1000};
  const std::array<int64_t, 7> delay_grid{100, 200, 300, 400, 500, 600, 700};

  struct Row {
    std::string varied;
    int64_t window = 0, delay = 0, step = 0, windows = 0;
    double pcc = std::numeric_limits<double>::quiet_NaN();
    double rmse = std::numeric_limits<double>::quiet_NaN();
  };
  std::vector<Row> rows;
  int skipped = 0;

  auto run_row = [&](const char* varied, int64_t window, int64_t delay) {
    Row row;
    row.varied = varied;
    row.window = window;
    row.delay = delay;
    row.step = std::max<int64_t>(1, window / 5);
    try {
      auto mcfg = cfg.model;
      mcfg.window_samples = window;
      mcfg.validate();
      const signals::WindowSpec wspec{window, row.step, delay, cfg.preprocess.rate_eeg_hz};
      RunConfig rcfg = cfg;
      rcfg.window = wspec;
      rcfg.model = mcfg;
      train::WindowSet train_set, val_set;
      for (const auto& [id, p] : train_trials) append_prepped_windows(p, rcfg, id, train_set);
      for (const auto& [id, p] : val_trials) append_prepped_windows(p, rcfg, id, val_set);
      if (train_set.size() == 0 || val_set.size() == 0)
        throw std::runtime_error("no windows fit the trials");
      auto tcfg = cfg.train;
      tcfg.seed = cfg.seed;
      const auto res = train::train_loop(mcfg, train_set, val_set, tcfg, {});
      std::vector<std::array<double, 6>> pred;
      std::vector<std::vector<double>> latents;
      decode_into(*res.best_model, val_set, cfg.train.batch_size, pred, latents);
      std::vector<std::array<double, 6>> truth(static_cast<size_t>(val_set.size()));
      std::vector<double> pflat, tflat;
      for (int64_t i = 0; i < val_set.size(); ++i) {
        std::copy(val_set.targets[static_cast<size_t>(i)].begin(),
                  val_set.targets[static_cast<size_t>(i)].end(),
                  truth[static_cast<size_t>(i)].begin());
        pflat.insert(pflat.end(), pred[static_cast<size_t>(i)].begin(),
                     pred[static_cast<size_t>(i)].end());
        tflat.insert(tflat.end(), truth[static_cast<size_t>(i)].begin(),
                     truth[static_cast<size_t>(i)].end());
      }
      row.windows = val_set.size();
      row.pcc = kinematics::overall_pcc(pred, truth);
      row.rmse = kinematics::rmse(pflat, tflat);
    } catch (const std::exception& e) {
      err << "sweep: window " << window << " delay " << delay << " skipped: " << e.what() << "\n";
      ++skipped;
    }
    rows.push_back(std::move(row));
  };

  for (int64_t w : window_grid) run_row("window", w, cfg.window.delay_ms);
  for (int64_t d : delay_grid) run_row("delay", cfg.window.window_samples, d);

  std::ofstream table(paths.sweep(), std::ios::binary);
  if (!table) throw std::runtime_error("cannot write " + paths.sweep().string());
  table << "varied,window_samples,delay_ms,step_samples,windows,pcc,rmse\n";
  for (const auto& r : rows)
    table << r.varied << ',' << r.window << ',' << r.delay << ',' << r.step << ',' << r.windows
          << ',' << fd(r.pcc) << ',' << fd(r.rmse) << "\n";

  out << "sweep: " << rows.size() << " rows (" << skipped << " skipped) -> "
      << paths.sweep().string() << "\n";
}

}  // namespace

// ---- public config API ----

void PreprocessConfig::validate() const {
  if (eeg_order < 1 || emg_order < 1) bad("preprocess: filter orders must be >= 1");
  if (!(rate_eeg_hz > 0.0) || !(rate_emg_hz > 0.0)) bad("preprocess: rates must be positive");
  auto check_band = [](double lo, double hi, double rate, const char* which) {
    if (!(lo > 0.0) || !(hi > lo) || !(hi < rate / 2.0))
      bad(std::string("preprocess: ") + which + " band must satisfy 0 < lo < hi < rate/2");
  };
  check_band(eeg_band_lo_hz, eeg_band_hi_hz, rate_eeg_hz, "eeg");
  check_band(emg_band_lo_hz, emg_band_hi_hz, rate_emg_hz, "emg");
  if (emg_decimation < 1) bad("preprocess: emg_decimation must be >= 1");
  if (rate_emg_hz != rate_eeg_hz * emg_decimation)
    bad("preprocess: emg_decimation must bring the emg rate onto the eeg clock");
}

void ExportConfig::validate() const {
  if (!(out_rate_hz > 0.0) || !std::isfinite(out_rate_hz))
    bad("export: out_rate_hz must be positive");
  if (source != "decoded" && source != "filtered")
    bad("export: source must be 'decoded' or 'filtered', got '" + source + "'");
}

void RunConfig::validate() const {
  if (version != 1) bad("config: unsupported version " + std::to_string(version));
  if (data_dir.empty() || work_dir.empty()) bad("config: data_dir and work_dir must be set");
  if (trials < 1) bad("config: trials must be >= 1");
  preprocess.validate();
  if (window.window_samples < 1 || window.step_samples < 1)
    bad("window: window_samples and step_samples must be >= 1");
  if (window.step_samples > window.window_samples) bad("window: step exceeds the window");
  if (window.delay_ms < 0) bad("window: delay_ms must be >= 0");
  if (window.rate_hz != preprocess.rate_eeg_hz)
    bad("window: rate_hz must mirror preprocess.rate_eeg_hz");
  model.validate();
  if (model.in_channels_eeg != 32) bad("model: in_channels_eeg must be 32");
  if (model.in_channels_emg != (preprocess.use_emg ? 5 : 0))
    bad("model: in_channels_emg must mirror preprocess.use_emg");
  if (model.window_samples != window.window_samples)
    bad("model: window_samples must mirror window.window_samples");
  if (model.out_dim != 6) bad("model: out_dim must be 6");
  train.validate();
  thresholds.validate();
  for (int a = 0; a < 3; ++a) {
    if (!std::isfinite(workspace.lo[static_cast<size_t>(a)]) ||
        !std::isfinite(workspace.hi[static_cast<size_t>(a)]))
      bad("workspace: bounds must be finite");
    if (!(workspace.lo[static_cast<size_t>(a)] < workspace.hi[static_cast<size_t>(a)]))
      bad("workspace: lo must be below hi on every axis");
  }
  synthetic.validate();
  if (synthetic.rate_eeg != preprocess.rate_eeg_hz || synthetic.rate_emg != preprocess.rate_emg_hz)
    bad("synthetic: rates must mirror preprocess");
  export_arm.validate();
}

std::string config_to_json(const RunConfig& c) {
  json doc;
  doc["version"] = c.version;
  doc["seed"] = c.seed;
  doc["data_dir"] = c.data_dir.string();
  doc["work_dir"] = c.work_dir.string();
  doc["trials"] = c.trials;
  doc["preprocess"] = {{"eeg_band_lo_hz", c.preprocess.eeg_band_lo_hz},
                       {"eeg_band_hi_hz", c.preprocess.eeg_band_hi_hz},
                       {"eeg_order", c.preprocess.eeg_order},
                       {"emg_band_lo_hz", c.preprocess.emg_band_lo_hz},
                       {"emg_band_hi_hz", c.preprocess.emg_band_hi_hz},
                       {"emg_order", c.preprocess.emg_order},
                       {"emg_decimation", c.preprocess.emg_decimation},
                       {"use_emg", c.preprocess.use_emg},
                       {"rate_eeg_hz", c.preprocess.rate_eeg_hz},
                       {"rate_emg_hz", c.preprocess.rate_emg_hz}};
  doc["window"] = {{"window_samples", c.window.window_samples},
                   {"step_samples", c.window.step_samples},
                   {"delay_ms", c.window.delay_ms}};
  json m = json::parse(model::config_to_json(c.model));
  m.erase("in_channels_eeg");
  m.erase("in_channels_emg");
  m.erase("window_samples");
  m.erase("out_dim");
  doc["model"] = m;
  doc["train"] = {{"epochs", c.train.epochs},
                  {"batch_size", c.train.batch_size},
                  {"learning_rate", c.train.learning_rate},
                  {"patience", c.train.patience},
                  {"beta1", c.train.beta1},
                  {"beta2", c.train.beta2},
                  {"eps", c.train.eps}};
  doc["thresholds"] = {{"searching", c.thresholds.theta[0]}, {"lifting", c.thresholds.theta[1]},
                       {"holding", c.thresholds.theta[2]},   {"putting", c.thresholds.theta[3]},
                       {"returning", c.thresholds.theta[4]}, {"unrely", c.thresholds.theta_unrely}};
  doc["workspace"] = {{"lo", c.workspace.lo}, {"hi", c.workspace.hi}};
  doc["synthetic"] = {{"duration_s", c.synthetic.duration_s},
                      {"phase_boundaries_s", c.synthetic.phase_boundaries_s},
                      {"eeg_noise", c.synthetic.eeg_noise},
                      {"emg_noise", c.synthetic.emg_noise},
                      {"eeg_coupling", c.synthetic.eeg_coupling},
                      {"emg_coupling", c.synthetic.emg_coupling},
                      {"lead_s", c.synthetic.lead_s}};
  doc["export"] = {{"out_rate_hz", c.export_arm.out_rate_hz}, {"source", c.export_arm.source}};
  return doc.dump(2) + "\n";
}

RunConfig config_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    bad(std::string("config: ") + e.what());
  }
  return config_from_doc(doc);
}

RunConfig load_config(const std::filesystem::path& path,
                      const std::vector<std::pair<std::string, std::string>>& overrides) {
  json doc = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) bad("cannot open config file " + path.string());
    try {
      doc = json::parse(in);
    } catch (const json::exception& e) {
      bad(path.string() + ": " + e.what());
    }
    if (!doc.is_object()) bad(path.string() + ": config must be a JSON object");
  }
  for (const auto& [key, value] : overrides) apply_override(doc, key, value);
  RunConfig cfg = config_from_doc(doc);
  cfg.validate();
  return cfg;
}

// ---- public dataset API ----

IngestResult ingest(const std::filesystem::path& dir, const PreprocessConfig& pp) {
  if (!fs::is_directory(dir))
    throw std::runtime_error("dataset directory " + dir.string() + " does not exist");
  std::vector<std::pair<int, fs::path>> found;
  IngestResult result;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_directory()) continue;
    const std::string name = entry.path().filename().string();
    if (name.rfind("trial_", 0) != 0) continue;
    const std::string tail = name.substr(6);
    if (tail.empty() || tail.find_first_not_of("0123456789") != std::string::npos) {
      result.skipped.push_back(name + ": trial id is not a number");
      continue;
    }
    found.emplace_back(std::stoi(tail), entry.path());
  }
  if (found.empty() && result.skipped.empty())
    throw std::runtime_error("no trials found in " + dir.string());
  std::sort(found.begin(), found.end());
  for (size_t i = 1; i < found.size(); ++i)
    if (found[i].first == found[i - 1].first)
      throw std::runtime_error("duplicate trial id " + std::to_string(found[i].first) + " in " +
                               dir.string());
  for (const auto& [id, path] : found) {
    try {
      result.bundles.push_back(read_trial(path, id, pp));
    } catch (const std::exception& e) {
      result.skipped.push_back(path.filename().string() + ": " + e.what());
    }
  }
  if (result.bundles.empty()) {
    std::string msg = "no trials found in " + dir.string();
    if (!result.skipped.empty()) {
      msg = "no usable trials in " + dir.string() + ":";
      for (const auto& line : result.skipped) msg += "\n  " + line;
    }
    throw std::runtime_error(msg);
  }
  return result;
}

void write_bundle(const std::filesystem::path& dir, const TrialBundle& b) {
  fs::create_directories(dir);
  write_block_csv(dir / "eeg.csv", b.eeg);
  write_block_csv(dir / "emg.csv", b.emg);
  write_block_csv(dir / "kin.csv", b.kin);
  if (b.has_labels()) write_labels_csv(dir / "labels.csv", b.labels);
  if (b.has_events()) write_block_csv(dir / "events.csv", b.events);
}

// ---- command driver ----

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"EEG/EMG-to-kinematics decoding pipeline", "kinedec"};
  app.require_subcommand(1);
  std::string config_path;
  const std::vector<std::pair<const char*, const char*>> commands{
      {"generate", "write a synthetic grasp-and-lift dataset"},
      {"preprocess", "filter, resample, split, and normalize the dataset"},
      {"train", "fit the decoder on the training split"},
      {"decode", "run the decoder over the train and test splits"},
      {"filter", "fit the critic and run the copilot filter on the test split"},
      {"evaluate", "score decoded kinematics against the truth"},
      {"export-arm", "solve joint trajectories for the decoded paths"},
      {"sweep", "train across the window and delay grids"}};
  for (const auto& [name, blurb] : commands) {
    auto* sub = app.add_subcommand(name, blurb);
    sub->allow_extras();
    sub->add_option("--config", config_path, "JSON run configuration file");
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return 0;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 1;
  }

  CLI::App* sub = app.get_subcommands().front();
  std::vector<std::pair<std::string, std::string>> overrides;
  const auto extras = sub->remaining();
  for (size_t i = 0; i < extras.size(); ++i) {
    std::string key = extras[i];
    if (key.rfind("--", 0) != 0 || key.size() <= 2) {
      err << "kinedec: expected --key value overrides, got '" << key << "'\n";
      return 1;
    }
    key = key.substr(2);
    std::string value;
    const auto eq = key.find('=');
    if (eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (++i >= extras.size()) {
        err << "kinedec: override --" << key << " is missing a value\n";
        return 1;
      }
      value = extras[i];
    }
    overrides.emplace_back(std::move(key), std::move(value));
  }

  RunConfig cfg;
  try {
    cfg = load_config(config_path, overrides);
  } catch (const std::exception& e) {
    err << "kinedec: " << e.what() << "\n";
    return 1;
  }

  const std::string name = sub->get_name();
  try {
    if (name == "generate")
      cmd_generate(cfg, out);
    else if (name == "preprocess")
      cmd_preprocess(cfg, out, err);
    else if (name == "train")
      cmd_train(cfg, out);
    else if (name == "decode")
      cmd_decode(cfg, out);
    else if (name == "filter")
      cmd_filter(cfg, out);
    else if (name == "evaluate")
      cmd_evaluate(cfg, out);
    else if (name == "export-arm")
      cmd_export_arm(cfg, out, err);
    else
      cmd_sweep(cfg, out, err);
    return 0;
  } catch (const std::exception& e) {
    err << name << ": " << e.what() << "\n";
    return 2;
  }
}

}  // namespace kinedec::cli
