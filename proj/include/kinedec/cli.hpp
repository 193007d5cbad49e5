#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "kinedec/copilot.hpp"
#include "kinedec/kinematics.hpp"
#include "kinedec/model.hpp"
#include "kinedec/signals.hpp"
#include "kinedec/train.hpp"

namespace kinedec::cli {

// Band-pass recipes for both modalities plus the resampling bookkeeping that
// brings EMG onto the EEG clock.
struct PreprocessConfig {
  double eeg_band_lo_hz = 0.1;
  double eeg_band_hi_hz = 40.0;
  int eeg_order = 4;
  double emg_band_lo_hz = 20.0;
  double emg_band_hi_hz = 450.0;
  int emg_order = 4;
  int emg_decimation = 8;
  bool use_emg = true;
  double rate_eeg_hz = 500.0;
  double rate_emg_hz = 4000.0;

  void validate() const;
};

struct ExportConfig {
  double out_rate_hz = 20.0;
  std::string source = "decoded";  // "decoded" or "filtered"

  void validate() const;
};

// One run's complete configuration, stored as a single versioned JSON
// document. Derived fields never appear in the document: the model's channel
// counts, window length, and output width, the window's sample rate, the
// trainer's seed, and the synthetic rates all mirror their owners here.
inline model::ModelConfig default_decoder_config() {
  model::ModelConfig m;
  m.in_channels_emg = 5;
  return m;
}

struct RunConfig {
  int version = 1;
  uint64_t seed = 0;
  std::filesystem::path data_dir = "data";
  std::filesystem::path work_dir = "work";
  int trials = 20;
  PreprocessConfig preprocess;
  signals::WindowSpec window{250, 50, 100, 500.0};
  model::ModelConfig model = default_decoder_config();
  train::TrainConfig train;
  copilot::ThresholdTable thresholds;
  kinematics::WorkspaceBox workspace = kinematics::WorkspaceBox::default_box();
  train::SyntheticTrialSpec synthetic;
  ExportConfig export_arm;

  // Checks every section and the cross-field invariants before any stage
  // runs. Throws std::invalid_argument.
  void validate() const;
};

// JSON round trip. Unknown keys anywhere are rejected; missing keys keep
// their defaults; keys owned by another section (model.window_samples,
// window.rate_hz, train.seed, ...) are rejected as misplaced.
std::string config_to_json(const RunConfig& cfg);
RunConfig config_from_json(const std::string& text);

// Reads the document from path (defaults when path is empty), applies
// "--key value" overrides by dotted path (seed, trials, train.epochs,
// model.embed_dim, ...), and validates the result. Override values parse as
// JSON scalars and fall back to strings.
RunConfig load_config(const std::filesystem::path& path,
                      const std::vector<std::pair<std::string, std::string>>& overrides = {});

// One trial's recordings as stored in a dataset directory.
struct TrialBundle {
  int id = 0;
  signals::TimeSeriesBlock eeg;     // 32 channels at the EEG rate
  signals::TimeSeriesBlock emg;     // 5 channels at the EMG rate
  signals::TimeSeriesBlock kin;     // 6 dims at the EEG rate
  std::vector<int> labels;          // per kin sample; empty when absent
  signals::TimeSeriesBlock events;  // sensor channels at the EEG rate; may be empty

  bool has_labels() const { return !labels.empty(); }
  bool has_events() const { return !events.data.empty(); }
};

struct IngestResult {
  std::vector<TrialBundle> bundles;  // sorted by trial id
  std::vector<std::string> skipped;  // one "trial_<id>: reason" line per malformed trial
};

// Reads every trial_<n> directory under dir. Malformed trials are skipped
// and reported in `skipped`; throws std::runtime_error when dir holds no
// trial directories, ids collide, or every trial fails.
IngestResult ingest(const std::filesystem::path& dir, const PreprocessConfig& pp);

// Writes dir/{eeg,emg,kin}.csv plus labels.csv and events.csv when present.
// Values are written at full precision and round-trip bit exactly.
void write_bundle(const std::filesystem::path& dir, const TrialBundle& bundle);

// Entry point shared by the binary and the tests. args hold everything after
// the program name: one command (generate, preprocess, train, decode,
// filter, evaluate, export-arm, sweep), optionally --config <file>, plus
// --key value config overrides. Returns the exit code: 0 success, 1 bad
// usage or configuration, 2 stage failure.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace kinedec::cli
