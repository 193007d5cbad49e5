#include "kinedec/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

#include "kinedec/csv.hpp"
#include "kinedec/rng.hpp"

namespace kinedec::train {

using signals::TimeSeriesBlock;
using tensor::shape_str;

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw std::invalid_argument("mse_loss: shape mismatch (" + shape_str(pred.shape()) +
                                " vs " + shape_str(target.shape()) + ")");
  }
  const Tensor d = tensor::sub(pred, target);
  return tensor::mean_all(tensor::mul(d, d));
}

Adam::Adam(const std::vector<std::pair<std::string, Tensor>>& params, AdamConfig cfg)
    : cfg_(cfg) {
  if (!(cfg_.learning_rate > 0.0) || !std::isfinite(cfg_.learning_rate)) {
    throw std::invalid_argument("Adam: learning rate must be positive and finite");
  }
  if (cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0) {
    throw std::invalid_argument("Adam: betas must lie in [0, 1)");
  }
  if (!(cfg_.eps > 0.0)) throw std::invalid_argument("Adam: eps must be positive");
  params_.reserve(params.size());
  for (const auto& [name, p] : params) {
    if (!p.defined()) throw std::invalid_argument("Adam: parameter " + name + " is undefined");
    params_.push_back(p);
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    const std::vector<double>& g = params_[i].grad();
    std::vector<double>& w = params_[i].mutable_values();
    std::vector<double>& m = m_[i];
    std::vector<double>& v = v_[i];
    for (size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      w[j] -= cfg_.learning_rate * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

SplitPlan make_split(int n_trials, uint64_t seed) {
  if (n_trials < 3) {
    throw std::invalid_argument("make_split: need at least 3 trials, got " +
                                std::to_string(n_trials));
  }
  const int holdout =
      n_trials >= 90
          ? 30
          : std::max<int>(1, static_cast<int>(std::llround(n_trials * 30.0 / 328.0)));
  std::vector<int> ids(static_cast<size_t>(n_trials));
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(seed);
  rng.shuffle(ids);
  SplitPlan plan;
  plan.val_trials.assign(ids.begin(), ids.begin() + holdout);
  plan.test_trials.assign(ids.begin() + holdout, ids.begin() + 2 * holdout);
  plan.train_trials.assign(ids.begin() + 2 * holdout, ids.end());
  std::sort(plan.train_trials.begin(), plan.train_trials.end());
  std::sort(plan.val_trials.begin(), plan.val_trials.end());
  std::sort(plan.test_trials.begin(), plan.test_trials.end());
  return plan;
}

void TrainConfig::validate() const {
  if (epochs <= 0) throw std::invalid_argument("train config: epochs must be positive");
  if (batch_size <= 0) throw std::invalid_argument("train config: batch size must be positive");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("train config: learning rate must be positive and finite");
  }
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    throw std::invalid_argument("train config: betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw std::invalid_argument("train config: eps must be positive");
}

void SyntheticTrialSpec::validate() const {
  if (!(duration_s > 0.0) || !std::isfinite(duration_s)) {
    throw std::invalid_argument("synthetic spec: duration must be positive");
  }
  if (!(rate_eeg > 0.0) || !(rate_emg > 0.0)) {
    throw std::invalid_argument("synthetic spec: rates must be positive");
  }
  double prev = 0.0;
  for (size_t i = 0; i < phase_boundaries_s.size(); ++i) {
    const double b = phase_boundaries_s[i];
    if (!(b > prev)) {
      throw std::invalid_argument("synthetic spec: phase boundaries must be strictly increasing");
    }
    prev = b;
  }
  if (!(phase_boundaries_s.back() < duration_s)) {
    throw std::invalid_argument("synthetic spec: last phase boundary must precede the duration");
  }
  if (eeg_noise < 0.0 || emg_noise < 0.0) {
    throw std::invalid_argument("synthetic spec: noise levels must be non-negative");
  }
  if (!std::isfinite(eeg_coupling) || !std::isfinite(emg_coupling)) {
    throw std::invalid_argument("synthetic spec: coupling gains must be finite");
  }
  if (lead_s < 0.0) throw std::invalid_argument("synthetic spec: lead must be non-negative");
}

namespace {

constexpr std::array<double, 3> kHome = {0.2, 0.0, 0.1};
constexpr std::array<double, 3> kObject = {0.5, 0.2, 0.1};
constexpr double kLiftHeight = 0.15;
constexpr double kApertureOpen = 0.08;
constexpr double kApertureClosed = 0.02;

double sstep(double u) {
  u = std::clamp(u, 0.0, 1.0);
  return u * u * (3.0 - 2.0 * u);
}

double dsstep(double u) {
  if (u <= 0.0 || u >= 1.0) return 0.0;
  return 6.0 * u * (1.0 - u);
}

// Grasp closes over the tail of SEARCHING; release opens at the head of
// RETURNING. Contact force ramps are centered on the adjoining boundaries so
// they cross 0.5 exactly at the phase change.
struct TrialGeometry {
  std::array<double, 4> b;
  double duration;
  double grasp_len, release_len;
  double contact_on_len, contact_off_len;

  explicit TrialGeometry(const SyntheticTrialSpec& spec)
      : b(spec.phase_boundaries_s), duration(spec.duration_s) {
    grasp_len = std::min(0.3, 0.5 * b[0]);
    release_len = std::min(0.3, 0.5 * (duration - b[3]));
    contact_on_len = std::min({0.1, 0.5 * b[0], 0.5 * (b[1] - b[0])});
    contact_off_len = std::min({0.1, 0.5 * (b[3] - b[2]), 0.5 * (duration - b[3])});
  }

  double contact_force(double t) const {
    const double on = sstep((t - (b[0] - 0.5 * contact_on_len)) / contact_on_len);
    const double off = sstep((t - (b[3] - 0.5 * contact_off_len)) / contact_off_len);
    return std::clamp(on - off, 0.0, 1.0);
  }

  int phase(double t) const {
    for (int i = 0; i < 4; ++i) {
      if (t < b[i]) return i;
    }
    return 4;
  }
};

}  // namespace

HandSample synthetic_hand_state(const SyntheticTrialSpec& spec, double t) {
  const TrialGeometry geo(spec);
  t = std::clamp(t, 0.0, geo.duration);
  HandSample hs{kHome, {0.0, 0.0, 0.0}, kApertureOpen, 0.0};

  const auto& b = geo.b;
  if (t < b[0]) {
    const double len = b[0];
    const double u = t / len;
    const double s = sstep(u), ds = dsstep(u) / len;
    for (int k = 0; k < 3; ++k) {
      hs.center[k] = kHome[k] + s * (kObject[k] - kHome[k]);
      hs.velocity[k] = ds * (kObject[k] - kHome[k]);
    }
  } else if (t < b[1]) {
    const double len = b[1] - b[0];
    const double u = (t - b[0]) / len;
    hs.center = kObject;
    hs.center[2] += kLiftHeight * sstep(u);
    hs.velocity[2] = kLiftHeight * dsstep(u) / len;
  } else if (t < b[2]) {
    hs.center = kObject;
    hs.center[2] += kLiftHeight;
  } else if (t < b[3]) {
    const double len = b[3] - b[2];
    const double u = (t - b[2]) / len;
    hs.center = kObject;
    hs.center[2] += kLiftHeight * (1.0 - sstep(u));
    hs.velocity[2] = -kLiftHeight * dsstep(u) / len;
  } else {
    const double len = geo.duration - b[3];
    const double u = (t - b[3]) / len;
    const double s = sstep(u), ds = dsstep(u) / len;
    for (int k = 0; k < 3; ++k) {
      hs.center[k] = kObject[k] + s * (kHome[k] - kObject[k]);
      hs.velocity[k] = ds * (kHome[k] - kObject[k]);
    }
  }

  const double close_start = b[0] - geo.grasp_len;
  if (t < close_start) {
    hs.aperture = kApertureOpen;
  } else if (t < b[0]) {
    const double u = (t - close_start) / geo.grasp_len;
    hs.aperture = kApertureOpen + (kApertureClosed - kApertureOpen) * sstep(u);
    hs.aperture_rate = (kApertureClosed - kApertureOpen) * dsstep(u) / geo.grasp_len;
  } else if (t < b[3]) {
    hs.aperture = kApertureClosed;
  } else if (t < b[3] + geo.release_len) {
    const double u = (t - b[3]) / geo.release_len;
    hs.aperture = kApertureClosed + (kApertureOpen - kApertureClosed) * sstep(u);
    hs.aperture_rate = (kApertureOpen - kApertureClosed) * dsstep(u) / geo.release_len;
  } else {
    hs.aperture = kApertureOpen;
  }
  return hs;
}

namespace {

// White noise per channel, band-limited by the given filter, unit RMS when
// normalize is set (channels that come out identically zero are left alone).
std::vector<std::vector<double>> shaped_noise(int channels, int64_t samples, double rate_hz,
                                              const signals::SosFilter& f, Rng& rng,
                                              bool normalize) {
  TimeSeriesBlock raw;
  raw.rate_hz = rate_hz;
  raw.kind = signals::SignalKind::EEG;
  raw.data.resize(static_cast<size_t>(channels));
  for (auto& ch : raw.data) {
    ch.resize(static_cast<size_t>(samples));
    for (auto& v : ch) v = rng.normal();
  }
  TimeSeriesBlock shaped = signals::filter_forward_backward(raw, f);
  if (normalize) {
    for (auto& ch : shaped.data) {
      double ss = 0.0;
      for (double v : ch) ss += v * v;
      const double rms = std::sqrt(ss / static_cast<double>(ch.size()));
      if (rms > 0.0) {
        for (auto& v : ch) v /= rms;
      }
    }
  }
  return std::move(shaped.data);
}

std::vector<std::string> numbered_names(const std::string& stem, int n) {
  std::vector<std::string> names;
  names.reserve(static_cast<size_t>(n));
  for (int i = 1; i <= n; ++i) {
    names.push_back(n >= 10 && i < 10 ? stem + "0" + std::to_string(i)
                                      : stem + std::to_string(i));
  }
  return names;
}

}  // namespace

SyntheticTrial generate_synthetic_trial(const SyntheticTrialSpec& spec, uint64_t seed) {
  spec.validate();
  const TrialGeometry geo(spec);
  const int64_t n_kin = std::llround(spec.duration_s * spec.rate_eeg);
  const int64_t n_emg = std::llround(spec.duration_s * spec.rate_emg);
  if (n_kin < 2 || n_emg < 2) {
    throw std::invalid_argument("synthetic spec: trial too short for its rates");
  }

  SyntheticTrial trial;

  trial.kin.rate_hz = spec.rate_eeg;
  trial.kin.kind = signals::SignalKind::KIN;
  trial.kin.channel_names = {"index_x", "index_y", "index_z",
                             "thumb_x", "thumb_y", "thumb_z"};
  trial.kin.data.assign(6, std::vector<double>(static_cast<size_t>(n_kin)));

  trial.events.rate_hz = spec.rate_eeg;
  trial.events.kind = signals::SignalKind::KIN;
  trial.events.channel_names = {"contact_force", "height", "vertical_velocity",
                                "home_distance"};
  trial.events.data.assign(4, std::vector<double>(static_cast<size_t>(n_kin)));

  trial.labels.resize(static_cast<size_t>(n_kin));

  for (int64_t i = 0; i < n_kin; ++i) {
    const double t = static_cast<double>(i) / spec.rate_eeg;
    const HandSample hs = synthetic_hand_state(spec, t);
    const double half = 0.5 * hs.aperture;
    trial.kin.data[0][i] = hs.center[0];
    trial.kin.data[1][i] = hs.center[1] + half;
    trial.kin.data[2][i] = hs.center[2];
    trial.kin.data[3][i] = hs.center[0];
    trial.kin.data[4][i] = hs.center[1] - half;
    trial.kin.data[5][i] = hs.center[2];

    trial.events.data[0][i] = geo.contact_force(t);
    trial.events.data[1][i] = hs.center[2];
    trial.events.data[2][i] = hs.velocity[2];
    const double dx = hs.center[0] - kHome[0];
    const double dy = hs.center[1] - kHome[1];
    const double dz = hs.center[2] - kHome[2];
    trial.events.data[3][i] = std::sqrt(dx * dx + dy * dy + dz * dz);

    trial.labels[i] = geo.phase(t);
  }

  // Sources the informative EEG channels mix: the six marker positions and
  // their velocities, lead_s ahead of the present.
  Rng mix_rng(Rng::mix(seed, 1));
  std::array<std::array<double, 12>, informative_eeg_channels> mixing;
  for (auto& row : mixing) {
    for (auto& m : row) {
      const double sign = mix_rng.uniform() < 0.5 ? -1.0 : 1.0;
      m = sign * mix_rng.uniform(0.4, 1.2);
    }
  }

  Rng eeg_noise_rng(Rng::mix(seed, 2));
  const signals::SosFilter eeg_shape = signals::design_lowpass(45.0, 4, spec.rate_eeg);
  auto eeg_noise = shaped_noise(32, n_kin, spec.rate_eeg, eeg_shape, eeg_noise_rng, true);

  trial.eeg.rate_hz = spec.rate_eeg;
  trial.eeg.kind = signals::SignalKind::EEG;
  trial.eeg.channel_names = numbered_names("eeg", 32);
  trial.eeg.data.assign(32, std::vector<double>(static_cast<size_t>(n_kin)));
  for (int64_t i = 0; i < n_kin; ++i) {
    const double t = static_cast<double>(i) / spec.rate_eeg;
    const HandSample hs = synthetic_hand_state(spec, t + spec.lead_s);
    const double half = 0.5 * hs.aperture;
    const double dhalf = 0.5 * hs.aperture_rate;
    const std::array<double, 12> src = {
        hs.center[0], hs.center[1] + half, hs.center[2],
        hs.center[0], hs.center[1] - half, hs.center[2],
        hs.velocity[0], hs.velocity[1] + dhalf, hs.velocity[2],
        hs.velocity[0], hs.velocity[1] - dhalf, hs.velocity[2]};
    for (int ch = 0; ch < 32; ++ch) {
      double v = spec.eeg_noise * eeg_noise[ch][i];
      if (ch < informative_eeg_channels) {
        double mixed = 0.0;
        for (int d = 0; d < 12; ++d) mixed += mixing[ch][d] * src[d];
        v += spec.eeg_coupling * mixed;
      }
      trial.eeg.data[ch][i] = v;
    }
  }

  Rng carrier_rng(Rng::mix(seed, 3));
  const signals::SosFilter emg_band = signals::design_bandpass(30.0, 200.0, 4, spec.rate_emg);
  auto carriers = shaped_noise(5, n_emg, spec.rate_emg, emg_band, carrier_rng, true);
  Rng emg_noise_rng(Rng::mix(seed, 4));

  trial.emg.rate_hz = spec.rate_emg;
  trial.emg.kind = signals::SignalKind::EMG;
  trial.emg.channel_names = numbered_names("emg", 5);
  trial.emg.data.assign(5, std::vector<double>(static_cast<size_t>(n_emg)));
  for (int64_t i = 0; i < n_emg; ++i) {
    const double t = static_cast<double>(i) / spec.rate_emg;
    const HandSample hs = synthetic_hand_state(spec, t + spec.lead_s);
    const double speed = std::sqrt(hs.velocity[0] * hs.velocity[0] +
                                   hs.velocity[1] * hs.velocity[1] +
                                   hs.velocity[2] * hs.velocity[2]);
    const std::array<double, 5> env = {
        speed,
        std::max(0.0, hs.velocity[2]),
        std::max(0.0, -hs.velocity[2]),
        std::abs(hs.aperture_rate),
        std::sqrt(hs.velocity[0] * hs.velocity[0] + hs.velocity[1] * hs.velocity[1])};
    for (int ch = 0; ch < 5; ++ch) {
      trial.emg.data[ch][i] = spec.emg_coupling * env[ch] * carriers[ch][i] +
                              spec.emg_noise * emg_noise_rng.normal();
    }
  }

  signals::validate_block(trial.eeg, "generate_synthetic_trial eeg");
  signals::validate_block(trial.emg, "generate_synthetic_trial emg");
  signals::validate_block(trial.kin, "generate_synthetic_trial kin");
  signals::validate_block(trial.events, "generate_synthetic_trial events");
  return trial;
}

void append_windows(const TimeSeriesBlock& eeg, const TimeSeriesBlock* emg,
                    const TimeSeriesBlock& kin, const std::vector<int>& labels,
                    const signals::WindowSpec& spec, int trial_id, WindowSet& out) {
  if (spec.window_samples < 1 || spec.step_samples < 1 || spec.delay_ms < 0) {
    throw std::invalid_argument("append_windows: invalid window spec");
  }
  if (spec.step_samples > spec.window_samples) {
    throw std::invalid_argument("append_windows: step exceeds the window");
  }
  if (eeg.rate_hz != kin.rate_hz) {
    throw std::invalid_argument("append_windows: eeg and kin rates differ");
  }
  if (eeg.samples() != kin.samples()) {
    throw std::invalid_argument("append_windows: eeg and kin lengths differ");
  }
  if (emg != nullptr) {
    if (emg->rate_hz != eeg.rate_hz) {
      throw std::invalid_argument("append_windows: emg must be resampled to the eeg rate");
    }
    if (emg->samples() != eeg.samples()) {
      throw std::invalid_argument("append_windows: emg and eeg lengths differ");
    }
  }
  if (!labels.empty() && static_cast<int64_t>(labels.size()) != kin.samples()) {
    throw std::invalid_argument("append_windows: label count does not match the samples");
  }

  const int64_t c_eeg = eeg.channels();
  const int64_t c_emg = emg == nullptr ? 0 : emg->channels();
  if (out.size() == 0 && out.eeg_channels == 0) {
    out.eeg_channels = c_eeg;
    out.emg_channels = c_emg;
    out.window_samples = spec.window_samples;
  } else if (out.eeg_channels != c_eeg || out.emg_channels != c_emg ||
             out.window_samples != spec.window_samples) {
    throw std::invalid_argument("append_windows: window geometry differs from the set's");
  }

  const int64_t w = spec.window_samples;
  const int64_t delay = spec.delay_samples();
  const int64_t n = eeg.samples();
  for (int64_t t = w - 1; t + delay < n; t += spec.step_samples) {
    std::vector<double> x;
    x.reserve(static_cast<size_t>(c_eeg * w));
    for (int64_t c = 0; c < c_eeg; ++c) {
      const auto& row = eeg.data[static_cast<size_t>(c)];
      x.insert(x.end(), row.begin() + (t - w + 1), row.begin() + (t + 1));
    }
    out.eeg.push_back(std::move(x));
    if (emg != nullptr) {
      std::vector<double> xe;
      xe.reserve(static_cast<size_t>(c_emg * w));
      for (int64_t c = 0; c < c_emg; ++c) {
        const auto& row = emg->data[static_cast<size_t>(c)];
        xe.insert(xe.end(), row.begin() + (t - w + 1), row.begin() + (t + 1));
      }
      out.emg.push_back(std::move(xe));
    }
    std::vector<double> y(static_cast<size_t>(kin.channels()));
    for (int64_t d = 0; d < kin.channels(); ++d) {
      y[static_cast<size_t>(d)] = kin.data[static_cast<size_t>(d)][static_cast<size_t>(t + delay)];
    }
    out.targets.push_back(std::move(y));
    out.states.push_back(labels.empty() ? -1 : labels[static_cast<size_t>(t + delay)]);
    out.trial_ids.push_back(trial_id);
  }
}

Batch make_batch(const WindowSet& ws, const std::vector<int64_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty index list");
  const int64_t B = static_cast<int64_t>(indices.size());
  const int64_t n_in = ws.eeg_channels * ws.window_samples;
  std::vector<double> eeg;
  eeg.reserve(static_cast<size_t>(B * n_in));
  std::vector<double> emg;
  if (ws.emg_channels > 0) emg.reserve(static_cast<size_t>(B * ws.emg_channels * ws.window_samples));
  const int64_t t_dim = ws.targets.empty() ? 0 : static_cast<int64_t>(ws.targets[0].size());
  std::vector<double> targets;
  targets.reserve(static_cast<size_t>(B * t_dim));
  Batch batch;
  batch.states.reserve(static_cast<size_t>(B));
  for (int64_t idx : indices) {
    if (idx < 0 || idx >= ws.size()) {
      throw std::out_of_range("make_batch: window index " + std::to_string(idx) +
                              " outside [0, " + std::to_string(ws.size()) + ")");
    }
    const auto u = static_cast<size_t>(idx);
    eeg.insert(eeg.end(), ws.eeg[u].begin(), ws.eeg[u].end());
    if (ws.emg_channels > 0) emg.insert(emg.end(), ws.emg[u].begin(), ws.emg[u].end());
    targets.insert(targets.end(), ws.targets[u].begin(), ws.targets[u].end());
    batch.states.push_back(ws.states[u]);
  }
  batch.eeg = Tensor::from({B, ws.eeg_channels, ws.window_samples}, std::move(eeg));
  if (ws.emg_channels > 0) {
    batch.emg = Tensor::from({B, ws.emg_channels, ws.window_samples}, std::move(emg));
  }
  batch.targets = Tensor::from({B, t_dim}, std::move(targets));
  return batch;
}

namespace {

void check_set(const WindowSet& ws, const model::ModelConfig& mcfg, bool classification,
               const char* name) {
  if (ws.size() == 0) {
    throw std::invalid_argument(std::string("train_loop: ") + name + " set is empty");
  }
  if (ws.eeg_channels != mcfg.in_channels_eeg || ws.emg_channels != mcfg.in_channels_emg ||
      ws.window_samples != mcfg.window_samples) {
    throw std::invalid_argument(std::string("train_loop: ") + name +
                                " set geometry does not match the model config");
  }
  if (classification) {
    for (int s : ws.states) {
      if (s < 0 || s >= mcfg.out_dim) {
        throw std::invalid_argument(std::string("train_loop: ") + name +
                                    " set has a window without a valid state label");
      }
    }
  } else if (static_cast<int64_t>(ws.targets[0].size()) != mcfg.out_dim) {
    throw std::invalid_argument(std::string("train_loop: ") + name +
                                " set target dimension does not match out_dim");
  }
}

double epoch_eval(const model::Model& m, const WindowSet& ws, bool classification,
                  int batch_size) {
  const bool fusion = ws.emg_channels > 0;
  double sum = 0.0;
  int64_t total = 0;
  for (int64_t start = 0; start < ws.size(); start += batch_size) {
    const int64_t stop = std::min<int64_t>(start + batch_size, ws.size());
    std::vector<int64_t> idx(static_cast<size_t>(stop - start));
    std::iota(idx.begin(), idx.end(), start);
    const Batch b = make_batch(ws, idx);
    const model::DecoderOutput out = m.forward(b.eeg, fusion ? &b.emg : nullptr);
    const Tensor loss = classification ? tensor::cross_entropy(out.output, b.states)
                                       : mse_loss(out.output, b.targets);
    sum += loss.item() * static_cast<double>(stop - start);
    total += stop - start;
  }
  return sum / static_cast<double>(total);
}

}  // namespace

TrainResult train_loop(const model::ModelConfig& mcfg, const WindowSet& train_set,
                       const WindowSet& val_set, const TrainConfig& tcfg,
                       const std::filesystem::path& checkpoint_path) {
  mcfg.validate();
  tcfg.validate();
  const bool classification = mcfg.out_dim == 5;
  check_set(train_set, mcfg, classification, "training");
  check_set(val_set, mcfg, classification, "validation");
  const bool fusion = mcfg.fusion();

  model::Model m(mcfg, Rng::mix(tcfg.seed, 1));
  Adam opt(m.parameters(), {tcfg.learning_rate, tcfg.beta1, tcfg.beta2, tcfg.eps});

  TrainResult result;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> best_weights;
  int bad_epochs = 0;

  std::vector<int64_t> order(static_cast<size_t>(train_set.size()));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    Rng order_rng(Rng::mix(tcfg.seed, 2 * static_cast<uint64_t>(epoch)));
    order_rng.shuffle(order);
    Rng dropout_rng(Rng::mix(tcfg.seed, 2 * static_cast<uint64_t>(epoch) + 1));

    double sum = 0.0;
    int64_t seen = 0;
    for (int64_t start = 0; start < train_set.size(); start += tcfg.batch_size) {
      const int64_t stop = std::min<int64_t>(start + tcfg.batch_size, train_set.size());
      const std::vector<int64_t> idx(order.begin() + start, order.begin() + stop);
      const Batch b = make_batch(train_set, idx);
      const model::DecoderOutput out =
          m.forward(b.eeg, fusion ? &b.emg : nullptr, true, &dropout_rng);
      const Tensor loss = classification ? tensor::cross_entropy(out.output, b.states)
                                         : mse_loss(out.output, b.targets);
      sum += loss.item() * static_cast<double>(stop - start);
      seen += stop - start;
      opt.zero_grad();
      tensor::backward(loss);
      opt.step();
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = sum / static_cast<double>(seen);
    stats.val_loss = epoch_eval(m, val_set, classification, tcfg.batch_size);
    result.history.push_back(stats);

    if (stats.val_loss < best_val) {
      best_val = stats.val_loss;
      result.best_epoch = epoch;
      bad_epochs = 0;
      best_weights.clear();
      for (const auto& [name, p] : m.parameters()) best_weights.push_back(p.values());
      if (!checkpoint_path.empty()) m.save(checkpoint_path);
    } else {
      ++bad_epochs;
      if (tcfg.patience >= 0 && bad_epochs > tcfg.patience) {
        result.stopped_early = true;
        break;
      }
    }
  }

  result.best_val_loss = best_val;
  for (size_t i = 1; i < result.history.size(); ++i) {
    if (result.history[i].epoch > 5 &&
        result.history[i].train_loss > result.history[i - 1].train_loss) {
      result.train_loss_monotone_after_warmup = false;
    }
  }

  auto& params = m.parameters();
  for (size_t i = 0; i < params.size(); ++i) params[i].second.mutable_values() = best_weights[i];
  result.best_model.emplace(std::move(m));
  return result;
}

std::string history_table(const std::vector<EpochStats>& history) {
  std::string out = "epoch,train_loss,val_loss\n";
  for (const auto& e : history) {
    out += std::to_string(e.epoch);
    out += ',';
    out += csvio::format_double(e.train_loss, 9);
    out += ',';
    out += csvio::format_double(e.val_loss, 9);
    out += '\n';
  }
  return out;
}

void write_history(const std::filesystem::path& path, const std::vector<EpochStats>& history) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_history: cannot open " + path.string());
  f << history_table(history);
  if (!f.good()) throw std::runtime_error("write_history: write failed for " + path.string());
}

}  // namespace kinedec::train
