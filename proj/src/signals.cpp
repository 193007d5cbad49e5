#include "kinedec/signals.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <stdexcept>

namespace kinedec::signals {

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

using cd = std::complex<double>;

// Left-half-plane poles of the analog Butterworth prototype (cutoff 1 rad/s).
std::vector<cd> butterworth_prototype(int order) {
  std::vector<cd> poles;
  poles.reserve(order);
  for (int k = 1; k <= order; ++k) {
    const double theta = kPi * (2.0 * k + order - 1.0) / (2.0 * order);
    poles.emplace_back(std::cos(theta), std::sin(theta));
  }
  return poles;
}

cd bilinear(cd s, double fs2) { return (fs2 + s) / (fs2 - s); }

// Denominator (1, a1, a2) from a root pair that is either conjugate or real.
std::array<double, 2> denom_from_roots(cd z1, cd z2) {
  return {-(z1 + z2).real(), (z1 * z2).real()};
}

std::array<double, 2> denom_from_conjugate(cd z) { return {-2.0 * z.real(), std::norm(z)}; }

cd section_response(const std::array<double, 6>& s, double omega) {
  const cd e1 = std::polar(1.0, -omega);
  const cd e2 = e1 * e1;
  return (s[0] + s[1] * e1 + s[2] * e2) / (s[3] + s[4] * e1 + s[5] * e2);
}

void check_design_sanity(const SosFilter& f) {
  for (double m : pole_magnitudes(f))
    if (!(m < 1.0))
      throw std::logic_error("filter design produced an unstable section (|pole| = " +
                             std::to_string(m) + ")");
}

}  // namespace

std::string kind_name(SignalKind k) {
  switch (k) {
    case SignalKind::EEG: return "EEG";
    case SignalKind::EMG: return "EMG";
    case SignalKind::KIN: return "KIN";
  }
  return "?";
}

void validate_block(const TimeSeriesBlock& block, const char* where) {
  if (!(block.rate_hz > 0.0))
    fail(std::string(where) + ": rate must be positive, got " + std::to_string(block.rate_hz));
  const int64_t s = block.samples();
  for (const auto& row : block.data) {
    if (static_cast<int64_t>(row.size()) != s)
      fail(std::string(where) + ": ragged channel lengths");
    for (double v : row)
      if (!std::isfinite(v)) fail(std::string(where) + ": non-finite sample");
  }
  if (!block.channel_names.empty() &&
      static_cast<int64_t>(block.channel_names.size()) != block.channels())
    fail(std::string(where) + ": channel_names count does not match channels");
}

SosFilter design_bandpass(double low_hz, double high_hz, int order, double rate_hz) {
  if (!(rate_hz > 0.0)) fail("design_bandpass: rate must be positive");
  if (order < 1) fail("design_bandpass: order must be >= 1");
  if (!(low_hz > 0.0)) fail("design_bandpass: lower edge must be positive");
  if (!(low_hz < high_hz))
    fail("design_bandpass: band edges inverted (" + std::to_string(low_hz) +
         " >= " + std::to_string(high_hz) + " Hz)");
  if (!(high_hz < rate_hz / 2.0))
    fail("design_bandpass: upper edge " + std::to_string(high_hz) +
         " Hz must be below Nyquist " + std::to_string(rate_hz / 2.0) + " Hz");

  const double fs2 = 2.0 * rate_hz;
  const double w1 = fs2 * std::tan(kPi * low_hz / rate_hz);
  const double w2 = fs2 * std::tan(kPi * high_hz / rate_hz);
  const double bw = w2 - w1;
  const double w0 = std::sqrt(w1 * w2);
  const double omega_c = 2.0 * std::atan(w0 / fs2);  // digital center

  SosFilter f;
  f.design = {order, low_hz, high_hz, "butterworth", rate_hz};
  // Each prototype pole spawns two band-pass poles; conjugate prototype pairs
  // land as conjugates of each other, so grouping stays real.
  for (const cd& p : butterworth_prototype(order)) {
    if (p.imag() < -1e-12) continue;  // conjugate handled via its upper twin
    const cd c = p * (bw / 2.0);
    const cd d = std::sqrt(c * c - cd(w0 * w0, 0.0));
    const cd s1 = c + d, s2 = c - d;
    const cd z1 = bilinear(s1, fs2), z2 = bilinear(s2, fs2);
    std::vector<std::array<double, 2>> denoms;
    if (p.imag() > 1e-12) {
      denoms.push_back(denom_from_conjugate(z1));
      denoms.push_back(denom_from_conjugate(z2));
    } else {
      denoms.push_back(denom_from_roots(z1, z2));
    }
    for (const auto& a : denoms) {
      std::array<double, 6> sec{1.0, 0.0, -1.0, 1.0, a[0], a[1]};
      const double g = 1.0 / std::abs(section_response(sec, omega_c));
      sec[0] *= g;
      sec[2] *= g;
      f.sections.push_back(sec);
    }
  }
  check_design_sanity(f);
  return f;
}

SosFilter design_lowpass(double cut_hz, int order, double rate_hz) {
  if (!(rate_hz > 0.0)) fail("design_lowpass: rate must be positive");
  if (order < 1) fail("design_lowpass: order must be >= 1");
  if (!(cut_hz > 0.0 && cut_hz < rate_hz / 2.0))
    fail("design_lowpass: cutoff must lie in (0, Nyquist)");

  const double fs2 = 2.0 * rate_hz;
  const double wc = fs2 * std::tan(kPi * cut_hz / rate_hz);

  SosFilter f;
  f.design = {order, 0.0, cut_hz, "butterworth", rate_hz};
  for (const cd& p : butterworth_prototype(order)) {
    if (p.imag() < -1e-12) continue;
    const cd z = bilinear(p * wc, fs2);
    std::array<double, 6> sec{};
    if (p.imag() > 1e-12) {
      const auto a = denom_from_conjugate(z);
      sec = {1.0, 2.0, 1.0, 1.0, a[0], a[1]};
    } else {
      sec = {1.0, 1.0, 0.0, 1.0, -z.real(), 0.0};
    }
    const double g = (sec[3] + sec[4] + sec[5]) / (sec[0] + sec[1] + sec[2]);
    sec[0] *= g;
    sec[1] *= g;
    sec[2] *= g;
    f.sections.push_back(sec);
  }
  check_design_sanity(f);
  return f;
}

double magnitude_at(const SosFilter& f, double freq_hz) {
  const double omega = 2.0 * kPi * freq_hz / f.design.rate_hz;
  double mag = 1.0;
  for (const auto& s : f.sections) mag *= std::abs(section_response(s, omega));
  return mag;
}

std::vector<double> pole_magnitudes(const SosFilter& f) {
  std::vector<double> out;
  for (const auto& s : f.sections) {
    const double a1 = s[4], a2 = s[5];
    if (a2 == 0.0) {
      if (a1 != 0.0) out.push_back(std::fabs(a1));
      continue;
    }
    const cd disc = std::sqrt(cd(a1 * a1 - 4.0 * a2, 0.0));
    out.push_back(std::abs((-a1 + disc) / 2.0));
    out.push_back(std::abs((-a1 - disc) / 2.0));
  }
  return out;
}

namespace {

struct Biquad {
  double b0, b1, b2, a1, a2;
  double zi1_unit, zi2_unit;  // steady-state internal state per unit input
};

std::vector<Biquad> prepare(const SosFilter& f) {
  std::vector<Biquad> out;
  out.reserve(f.sections.size());
  for (const auto& s : f.sections) {
    if (s[3] != 1.0) fail("filter_forward_backward: section not normalized to a0 = 1");
    Biquad q{s[0], s[1], s[2], s[4], s[5], 0.0, 0.0};
    const double denom = 1.0 + q.a1 + q.a2;
    const double k = (q.b0 + q.b1 + q.b2) / denom;
    q.zi2_unit = q.b2 - q.a2 * k;
    q.zi1_unit = q.b1 + q.b2 - (q.a1 + q.a2) * k;
    out.push_back(q);
  }
  return out;
}

// Direct form II transposed, state seeded with the steady-state response to
// the first sample so reflected padding does not ring.
void cascade_in_place(std::vector<double>& x, const std::vector<Biquad>& sections) {
  for (const Biquad& q : sections) {
    double z1 = q.zi1_unit * x[0];
    double z2 = q.zi2_unit * x[0];
    for (double& v : x) {
      const double in = v;
      const double y = q.b0 * in + z1;
      z1 = q.b1 * in - q.a1 * y + z2;
      z2 = q.b2 * in - q.a2 * y;
      v = y;
    }
  }
}

}  // namespace

TimeSeriesBlock filter_forward_backward(const TimeSeriesBlock& block, const SosFilter& f) {
  validate_block(block, "filter_forward_backward");
  if (f.sections.empty()) fail("filter_forward_backward: empty filter");
  const int64_t n = block.samples();
  const int64_t order = 2 * static_cast<int64_t>(f.sections.size());
  const int64_t min_len = 3 * order;
  if (n < min_len)
    fail("filter_forward_backward: needs at least " + std::to_string(min_len) +
         " samples per channel, got " + std::to_string(n));
  const int64_t pad = std::min<int64_t>(min_len, n - 1);

  const auto sections = prepare(f);
  TimeSeriesBlock out = block;
  for (auto& ch : out.data) {
    std::vector<double> ext;
    ext.reserve(ch.size() + 2 * pad);
    for (int64_t i = pad; i >= 1; --i) ext.push_back(2.0 * ch.front() - ch[i]);
    ext.insert(ext.end(), ch.begin(), ch.end());
    for (int64_t i = 1; i <= pad; ++i) ext.push_back(2.0 * ch.back() - ch[ch.size() - 1 - i]);

    cascade_in_place(ext, sections);
    std::reverse(ext.begin(), ext.end());
    cascade_in_place(ext, sections);
    std::reverse(ext.begin(), ext.end());

    std::copy(ext.begin() + pad, ext.begin() + pad + n, ch.begin());
    for (double v : ch)
      if (!std::isfinite(v))
        throw std::runtime_error("filter_forward_backward: non-finite output");
  }
  return out;
}

TimeSeriesBlock common_average_reference(const TimeSeriesBlock& block) {
  validate_block(block, "common_average_reference");
  if (block.kind != SignalKind::EEG)
    fail("common_average_reference: expects EEG, got " + kind_name(block.kind));
  const int64_t C = block.channels();
  if (C < 2) fail("common_average_reference: needs at least 2 channels, got " +
                  std::to_string(C));
  TimeSeriesBlock out = block;
  const int64_t n = block.samples();
  for (int64_t t = 0; t < n; ++t) {
    double m = 0.0;
    for (int64_t c = 0; c < C; ++c) m += block.data[c][t];
    m /= static_cast<double>(C);
    for (int64_t c = 0; c < C; ++c) out.data[c][t] -= m;
  }
  return out;
}

TimeSeriesBlock decimate(const TimeSeriesBlock& block, int64_t factor) {
  validate_block(block, "decimate");
  if (factor < 1) fail("decimate: factor must be >= 1, got " + std::to_string(factor));
  const int64_t n = block.samples();
  const int64_t m = n / factor;
  if (m == 0)
    fail("decimate: " + std::to_string(n) + " samples at factor " + std::to_string(factor) +
         " leave no output");
  TimeSeriesBlock out;
  out.rate_hz = block.rate_hz / static_cast<double>(factor);
  out.kind = block.kind;
  out.channel_names = block.channel_names;
  out.data.reserve(block.data.size());
  for (const auto& ch : block.data) {
    std::vector<double> row(m);
    for (int64_t i = 0; i < m; ++i) row[i] = ch[i * factor];
    out.data.push_back(std::move(row));
  }
  return out;
}

NormalizationParams fit_minmax(const TimeSeriesBlock& kin) {
  validate_block(kin, "fit_minmax");
  if (kin.kind != SignalKind::KIN)
    fail("fit_minmax: expects KIN, got " + kind_name(kin.kind));
  if (kin.channels() == 0 || kin.samples() == 0) fail("fit_minmax: empty input");
  NormalizationParams p;
  for (const auto& ch : kin.data) {
    const auto [lo, hi] = std::minmax_element(ch.begin(), ch.end());
    p.k_min.push_back(*lo);
    p.k_max.push_back(*hi);
  }
  return p;
}

namespace {

void check_dims(const TimeSeriesBlock& kin, const NormalizationParams& p, const char* where) {
  if (kin.channels() != static_cast<int64_t>(p.k_min.size()) ||
      p.k_min.size() != p.k_max.size())
    fail(std::string(where) + ": block has " + std::to_string(kin.channels()) +
         " dimensions, params have " + std::to_string(p.k_min.size()));
}

}  // namespace

TimeSeriesBlock apply_minmax(const TimeSeriesBlock& kin, const NormalizationParams& p) {
  validate_block(kin, "apply_minmax");
  check_dims(kin, p, "apply_minmax");
  TimeSeriesBlock out = kin;
  for (size_t c = 0; c < out.data.size(); ++c) {
    const double range = p.k_max[c] - p.k_min[c];
    for (double& v : out.data[c]) v = range == 0.0 ? 0.5 : (v - p.k_min[c]) / range;
  }
  return out;
}

TimeSeriesBlock inverse_minmax(const TimeSeriesBlock& kin, const NormalizationParams& p) {
  validate_block(kin, "inverse_minmax");
  check_dims(kin, p, "inverse_minmax");
  TimeSeriesBlock out = kin;
  for (size_t c = 0; c < out.data.size(); ++c) {
    const double range = p.k_max[c] - p.k_min[c];
    for (double& v : out.data[c]) v = range == 0.0 ? p.k_min[c] : v * range + p.k_min[c];
  }
  return out;
}

int64_t WindowSpec::delay_samples() const {
  return static_cast<int64_t>(std::llround(static_cast<double>(delay_ms) * rate_hz / 1000.0));
}

SliceResult slice_windows(const TimeSeriesBlock& x, const TimeSeriesBlock& y,
                          const WindowSpec& spec) {
  validate_block(x, "slice_windows");
  validate_block(y, "slice_windows");
  if (std::fabs(x.rate_hz - y.rate_hz) > 1e-9 * std::max(x.rate_hz, y.rate_hz))
    fail("slice_windows: input at " + std::to_string(x.rate_hz) + " Hz but targets at " +
         std::to_string(y.rate_hz) + " Hz");
  if (y.channels() != 6)
    fail("slice_windows: targets must have 6 dimensions, got " + std::to_string(y.channels()));
  if (spec.window_samples < 1) fail("slice_windows: window must be >= 1");
  if (spec.step_samples < 1) fail("slice_windows: step must be >= 1");
  if (spec.step_samples > spec.window_samples)
    fail("slice_windows: step " + std::to_string(spec.step_samples) + " exceeds window " +
         std::to_string(spec.window_samples));
  if (spec.delay_ms < 0) fail("slice_windows: delay must be >= 0");

  SliceResult res;
  const int64_t w = spec.window_samples;
  const int64_t sx = x.samples();
  const int64_t sy = y.samples();
  if (w > sx) {
    res.window_exceeds_trial = true;
    return res;
  }
  const int64_t delay = spec.delay_samples();
  const int64_t C = x.channels();
  for (int64_t t = w - 1; t < sx; t += spec.step_samples) {
    const int64_t target = t + delay;
    if (target >= sy) break;
    WindowedPair pair;
    pair.input.reserve(C);
    for (int64_t c = 0; c < C; ++c)
      pair.input.emplace_back(x.data[c].begin() + (t - w + 1), x.data[c].begin() + (t + 1));
    pair.target.reserve(6);
    for (int64_t d = 0; d < 6; ++d) pair.target.push_back(y.data[d][target]);
    res.pairs.push_back(std::move(pair));
  }
  return res;
}

}  // namespace kinedec::signals
