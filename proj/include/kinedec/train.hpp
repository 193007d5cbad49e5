#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kinedec/model.hpp"
#include "kinedec/signals.hpp"
#include "kinedec/tensor.hpp"

namespace kinedec::train {

using tensor::Tensor;

// Mean over every element of the squared difference.
Tensor mse_loss(const Tensor& pred, const Tensor& target);

using tensor::cross_entropy;

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected first/second-moment optimizer. Holds the moment state for a
// fixed parameter list; step() consumes the gradients currently accumulated
// on those parameters and updates their values in place.
class Adam {
 public:
  explicit Adam(const std::vector<std::pair<std::string, Tensor>>& params,
                AdamConfig cfg = {});

  void step();
  void zero_grad();
  int64_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamConfig cfg_;
  int64_t t_ = 0;
};

struct SplitPlan {
  std::vector<int> train_trials;
  std::vector<int> val_trials;
  std::vector<int> test_trials;
};

// Shuffles trial ids 0..n-1 and carves off a validation and a test set of 30
// trials each. Datasets smaller than 90 trials get proportionally scaled
// holdouts (30/328 of the trials, rounded, never below 1 per set).
SplitPlan make_split(int n_trials, uint64_t seed);

struct TrainConfig {
  int epochs = 200;
  int batch_size = 64;
  double learning_rate = 1e-3;
  // Consecutive non-improving validation epochs tolerated before stopping;
  // 0 stops at the first non-improvement, negative disables early stopping.
  int patience = 20;
  uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

// Timing and coupling recipe for one synthetic grasp-and-lift trial. The hand
// reaches from a rest position to the object, lifts it, holds, puts it back,
// and returns, one motion state per phase. A subset of EEG channels mixes the
// upcoming kinematics (positions and velocities lead_s ahead) plus band-limited
// noise; EMG channels carry speed envelopes amplitude-modulated onto 30-200 Hz
// carriers at higher SNR.
struct SyntheticTrialSpec {
  double duration_s = 10.0;
  double rate_eeg = 500.0;
  double rate_emg = 4000.0;
  // Boundaries between the five phases, strictly increasing, inside (0, duration).
  std::array<double, 4> phase_boundaries_s = {2.0, 4.0, 6.0, 8.0};
  double eeg_noise = 0.5;
  double emg_noise = 0.05;
  double eeg_coupling = 1.0;
  double emg_coupling = 1.0;
  // How far (seconds) the neural channels precede the kinematics they encode.
  double lead_s = 0.2;

  void validate() const;
};

// EEG channels [0, informative_eeg_channels) carry signal; the rest are noise.
inline constexpr int informative_eeg_channels = 16;

struct SyntheticTrial {
  signals::TimeSeriesBlock eeg;     // 32 channels at rate_eeg
  signals::TimeSeriesBlock emg;     // 5 channels at rate_emg
  signals::TimeSeriesBlock kin;     // index xyz + thumb xyz at rate_eeg
  signals::TimeSeriesBlock events;  // contact_force, height, vertical_velocity, home_distance
  std::vector<int> labels;          // per kin sample, 0 SEARCHING .. 4 RETURNING
};

SyntheticTrial generate_synthetic_trial(const SyntheticTrialSpec& spec, uint64_t seed);

// Ground-truth hand state at time t, exposed for oracle fits in tests.
struct HandSample {
  std::array<double, 3> center;
  std::array<double, 3> velocity;
  double aperture;
  double aperture_rate;
};
HandSample synthetic_hand_state(const SyntheticTrialSpec& spec, double t);

// Flat store of training windows. Each window is one model input (channel-major
// samples) paired with the target sample at the delayed index, the state label
// there (-1 when unlabeled), and the trial it came from.
struct WindowSet {
  int64_t eeg_channels = 0;
  int64_t emg_channels = 0;  // 0 when the set carries no EMG
  int64_t window_samples = 0;
  std::vector<std::vector<double>> eeg;
  std::vector<std::vector<double>> emg;
  std::vector<std::vector<double>> targets;
  std::vector<int> states;
  std::vector<int> trial_ids;

  int64_t size() const { return static_cast<int64_t>(eeg.size()); }
};

// Slices one trial's aligned blocks into windows and appends them. eeg and kin
// must share a rate and emg, when present, must be resampled to it already.
// Window/target geometry matches slice_windows exactly.
void append_windows(const signals::TimeSeriesBlock& eeg,
                    const signals::TimeSeriesBlock* emg,
                    const signals::TimeSeriesBlock& kin,
                    const std::vector<int>& labels,
                    const signals::WindowSpec& spec, int trial_id,
                    WindowSet& out);

struct Batch {
  Tensor eeg;      // [B, C, T]
  Tensor emg;      // undefined when the set carries no EMG
  Tensor targets;  // [B, target_dim]
  std::vector<int> states;
};

Batch make_batch(const WindowSet& ws, const std::vector<int64_t>& indices);

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  bool stopped_early = false;
  // True when the training loss never increased from epoch 5 onward.
  bool train_loss_monotone_after_warmup = true;
  std::optional<model::Model> best_model;
};

// Trains a freshly initialized model. Regression configs (out_dim 6) fit the
// window targets with mean squared error; classification configs (out_dim 5)
// fit the per-window states with cross-entropy. Every validation improvement
// checkpoints the model to checkpoint_path (skipped when the path is empty);
// best_model holds the best-epoch weights either way. Fully deterministic in
// TrainConfig::seed.
TrainResult train_loop(const model::ModelConfig& mcfg, const WindowSet& train_set,
                       const WindowSet& val_set, const TrainConfig& tcfg,
                       const std::filesystem::path& checkpoint_path);

// Plain-text history table: a header line, then one "epoch,train,val" row per
// epoch with 9-significant-digit values.
std::string history_table(const std::vector<EpochStats>& history);
void write_history(const std::filesystem::path& path,
                   const std::vector<EpochStats>& history);

}  // namespace kinedec::train
