#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace kinedec::signals {

enum class SignalKind { EEG, EMG, KIN };

std::string kind_name(SignalKind k);

// A channels-by-samples recording segment. All operations in this module are
// pure: they validate, build a new block, and never mutate their input.
struct TimeSeriesBlock {
  std::vector<std::vector<double>> data;  // [channel][sample], rectangular
  double rate_hz = 0.0;
  SignalKind kind = SignalKind::EEG;
  std::vector<std::string> channel_names;  // optional; empty or one per channel

  int64_t channels() const { return static_cast<int64_t>(data.size()); }
  int64_t samples() const { return data.empty() ? 0 : static_cast<int64_t>(data[0].size()); }
};

// Throws if rows are ragged, the rate is not positive, or any value is not
// finite.
void validate_block(const TimeSeriesBlock& block, const char* where);

struct FilterDesign {
  int order = 0;
  double low_hz = 0.0;   // 0 for a lowpass
  double high_hz = 0.0;  // cutoff for a lowpass
  std::string family;
  double rate_hz = 0.0;
};

// Cascade of biquads (b0,b1,b2,a0,a1,a2), each normalized to a0 = 1.
struct SosFilter {
  std::vector<std::array<double, 6>> sections;
  FilterDesign design;
};

// Butterworth band-pass of the given prototype order: `order` biquad
// sections, unit gain at the geometric center, -3 dB at the edges.
SosFilter design_bandpass(double low_hz, double high_hz, int order, double rate_hz);

// Butterworth low-pass, unit gain at DC. ceil(order/2) sections.
SosFilter design_lowpass(double cut_hz, int order, double rate_hz);

// |H(e^{i 2 pi f / rate})| of the cascade, using the rate the filter was
// designed for.
double magnitude_at(const SosFilter& f, double freq_hz);

// Magnitudes of every pole of the cascade; all must be < 1 for stability.
std::vector<double> pole_magnitudes(const SosFilter& f);

// Zero-phase filtering: odd-reflection padding, forward pass, backward pass,
// trim. Each channel is processed independently.
TimeSeriesBlock filter_forward_backward(const TimeSeriesBlock& block, const SosFilter& f);

// Subtracts the instantaneous cross-channel mean from every channel.
TimeSeriesBlock common_average_reference(const TimeSeriesBlock& block);

// Keeps every factor-th sample starting at index 0 and divides the rate.
// The caller is responsible for prior band-limiting.
TimeSeriesBlock decimate(const TimeSeriesBlock& block, int64_t factor);

struct NormalizationParams {
  std::vector<double> k_min;  // one per kinematic dimension
  std::vector<double> k_max;
};

NormalizationParams fit_minmax(const TimeSeriesBlock& kin);
// (k - k_min) / (k_max - k_min); degenerate dimensions (k_max == k_min) map
// to 0.5. Out-of-range values pass through un-clipped.
TimeSeriesBlock apply_minmax(const TimeSeriesBlock& kin, const NormalizationParams& p);
// Exact inverse on non-degenerate dimensions; degenerate ones recover k_min.
TimeSeriesBlock inverse_minmax(const TimeSeriesBlock& kin, const NormalizationParams& p);

struct WindowSpec {
  int64_t window_samples = 0;
  int64_t step_samples = 0;
  int64_t delay_ms = 0;
  double rate_hz = 0.0;

  int64_t delay_samples() const;
};

struct WindowedPair {
  std::vector<std::vector<double>> input;  // [channel][window_samples]
  std::vector<double> target;              // one sample of every target dimension
};

struct SliceResult {
  std::vector<WindowedPair> pairs;
  // Set instead of throwing when the window cannot fit in the trial at all.
  bool window_exceeds_trial = false;
};

// Pairs each window x[t-window+1 .. t] with the target y at t + delay.
// Windows whose delayed target falls past the end of the trial are dropped.
SliceResult slice_windows(const TimeSeriesBlock& x, const TimeSeriesBlock& y,
                          const WindowSpec& spec);

}  // namespace kinedec::signals
