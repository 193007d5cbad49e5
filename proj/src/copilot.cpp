#include "kinedec/copilot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "kinedec/checkpoint.hpp"
#include "kinedec/csv.hpp"
#include "kinedec/kinematics.hpp"
#include "kinedec/rng.hpp"
#include "kinedec/train.hpp"

namespace kinedec::copilot {

using nlohmann::json;

namespace {

constexpr const char* kStateNames[] = {"SEARCHING", "LIFTING", "HOLDING",
                                       "PUTTING",   "RETURNING", "UNRELY"};

constexpr const char* kPosteriorFeatures[] = {"p_searching", "p_lifting", "p_holding",
                                              "p_putting", "p_returning"};

size_t state_index(MotionState s) { return static_cast<size_t>(s); }

void check_real_state(MotionState s, const std::string& where) {
  if (state_index(s) >= static_cast<size_t>(state_count)) {
    throw std::invalid_argument(where + ": state must be one of the five real states");
  }
}

// Whether two half-line predicates on one feature can both hold.
bool predicates_overlap(const TransitionRule& a, const TransitionRule& b) {
  if (a.comparator == b.comparator) return true;
  const double gt = a.comparator == '>' ? a.threshold : b.threshold;
  const double lt = a.comparator == '>' ? b.threshold : a.threshold;
  return lt > gt;
}

}  // namespace

std::string to_string(MotionState s) {
  const size_t i = state_index(s);
  if (i > static_cast<size_t>(state_count)) {
    throw std::invalid_argument("to_string: bad motion state value");
  }
  return kStateNames[i];
}

MotionState state_from_string(const std::string& name) {
  for (size_t i = 0; i <= static_cast<size_t>(state_count); ++i) {
    if (name == kStateNames[i]) return static_cast<MotionState>(i);
  }
  throw std::invalid_argument("state_from_string: unknown state \"" + name + "\"");
}

void ThresholdTable::validate() const {
  double top = 0.0;
  for (double t : theta) {
    if (!(t >= 0.0 && t <= 1.0)) {
      throw std::invalid_argument("threshold table: state thresholds must lie in [0, 1]");
    }
    top = std::max(top, t);
  }
  if (!std::isfinite(theta_unrely) || !(theta_unrely > top)) {
    throw std::invalid_argument(
        "threshold table: theta_unrely must exceed every state threshold");
  }
}

ThresholdTable ThresholdTable::scaled(double factor) const {
  if (!std::isfinite(factor) || factor < 0.0) {
    throw std::invalid_argument("threshold table: scale factor must be finite and >= 0");
  }
  ThresholdTable out = *this;
  for (double& t : out.theta) t *= factor;
  out.theta_unrely *= factor;
  return out;
}

double ThresholdTable::for_state(MotionState effective) const {
  const size_t i = state_index(effective);
  return i < static_cast<size_t>(state_count) ? theta[i] : theta_unrely;
}

TransitionRules TransitionRules::defaults() {
  TransitionRules r;
  r.rules = {
      {MotionState::SEARCHING, "contact_force", '>', 0.5, MotionState::LIFTING},
      {MotionState::LIFTING, "height", '>', 0.2, MotionState::HOLDING},
      {MotionState::HOLDING, "vertical_velocity", '<', -0.01, MotionState::PUTTING},
      {MotionState::PUTTING, "contact_force", '<', 0.5, MotionState::RETURNING},
      {MotionState::RETURNING, "home_distance", '<', 0.02, MotionState::SEARCHING},
  };
  return r;
}

void TransitionRules::validate() const {
  for (const auto& rule : rules) {
    if (rule.from == MotionState::UNRELY || rule.to == MotionState::UNRELY) {
      throw std::invalid_argument("transition rules: UNRELY cannot appear in a rule");
    }
    if (rule.comparator != '<' && rule.comparator != '>') {
      throw std::invalid_argument(std::string("transition rules: bad comparator '") +
                                  rule.comparator + "'");
    }
    if (!std::isfinite(rule.threshold)) {
      throw std::invalid_argument("transition rules: threshold must be finite");
    }
    if (rule.feature.empty()) {
      throw std::invalid_argument("transition rules: empty feature name");
    }
  }
  for (size_t i = 0; i < rules.size(); ++i) {
    for (size_t j = i + 1; j < rules.size(); ++j) {
      const auto& a = rules[i];
      const auto& b = rules[j];
      if (a.from == b.from && a.feature == b.feature && predicates_overlap(a, b)) {
        throw std::invalid_argument("transition rules: rules from " + to_string(a.from) +
                                    " overlap on feature \"" + a.feature + "\"");
      }
    }
  }
  std::array<bool, state_count> seen{};
  seen[state_index(MotionState::SEARCHING)] = true;
  std::vector<MotionState> frontier = {MotionState::SEARCHING};
  while (!frontier.empty()) {
    const MotionState s = frontier.back();
    frontier.pop_back();
    for (const auto& rule : rules) {
      if (rule.from != s || seen[state_index(rule.to)]) continue;
      seen[state_index(rule.to)] = true;
      frontier.push_back(rule.to);
    }
  }
  for (size_t i = 0; i < static_cast<size_t>(state_count); ++i) {
    if (!seen[i]) {
      throw std::invalid_argument("transition rules: " + std::string(kStateNames[i]) +
                                  " is unreachable from SEARCHING");
    }
  }
}

TransitionRules TransitionRules::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  TransitionRules out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    std::string from, feature, cmp, to;
    double threshold = 0.0;
    std::string extra;
    if (!(ss >> from >> feature >> cmp >> threshold >> to) || (ss >> extra) ||
        cmp.size() != 1) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) +
                                  ": expected <state> <feature> <comparator> "
                                  "<threshold> <next state>");
    }
    out.rules.push_back({state_from_string(from), feature, cmp[0], threshold,
                         state_from_string(to)});
  }
  out.validate();
  return out;
}

void TransitionRules::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  for (const auto& rule : rules) {
    out << to_string(rule.from) << ' ' << rule.feature << ' ' << rule.comparator << ' '
        << csvio::format_double(rule.threshold, 17) << ' ' << to_string(rule.to) << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

MotionState fsm_step(MotionState state, const std::array<double, state_count>& posterior,
                     const std::map<std::string, double>& sensors,
                     const TransitionRules& rules) {
  check_real_state(state, "fsm_step");
  for (const auto& rule : rules.rules) {
    if (rule.from != state) continue;
    double value = 0.0;
    bool found = false;
    for (size_t i = 0; i < static_cast<size_t>(state_count); ++i) {
      if (rule.feature == kPosteriorFeatures[i]) {
        value = posterior[i];
        found = true;
        break;
      }
    }
    if (!found) {
      const auto it = sensors.find(rule.feature);
      if (it == sensors.end()) {
        throw std::invalid_argument("fsm_step: feature \"" + rule.feature +
                                    "\" missing from the sensor map");
      }
      value = it->second;
    }
    if (rule.matches(value)) return rule.to;
  }
  return state;
}

MotionState attribute_point(MotionState machine_state,
                            const std::array<double, state_count>& posterior) {
  check_real_state(machine_state, "attribute_point");
  const double own = posterior[state_index(machine_state)];
  for (double p : posterior) {
    if (p > own) return MotionState::UNRELY;
  }
  return machine_state;
}

FilterResult filter_trajectory(const std::vector<ScoredPoint>& points,
                               const ThresholdTable& thresholds,
                               const TransitionRules& rules, MotionState initial) {
  check_real_state(initial, "filter_trajectory");
  rules.validate();
  FilterResult result;
  if (points.empty()) {
    result.empty_input = true;
    result.retention_ratio = std::numeric_limits<double>::quiet_NaN();
    return result;
  }
  result.annotated = points;
  MotionState state = initial;
  for (size_t i = 0; i < result.annotated.size(); ++i) {
    ScoredPoint& p = result.annotated[i];
    if (i > 0 && p.time_index <= result.annotated[i - 1].time_index) {
      throw std::invalid_argument("filter_trajectory: time indices must increase");
    }
    const double sum = std::accumulate(p.posterior.begin(), p.posterior.end(), 0.0);
    if (!(std::abs(sum - 1.0) <= 1e-6)) {
      throw std::invalid_argument("filter_trajectory: posterior must sum to 1");
    }
    state = fsm_step(state, p.posterior, p.sensors, rules);
    p.machine_state = state;
    p.effective_state = attribute_point(state, p.posterior);
    p.retained = p.confidence >= thresholds.for_state(p.effective_state);
    auto& bucket = result.by_state[state_index(p.effective_state)];
    ++bucket.points;
    if (p.retained) {
      ++bucket.retained;
      result.retained.push_back(p);
    }
  }
  result.retention_ratio = static_cast<double>(result.retained.size()) /
                           static_cast<double>(result.annotated.size());
  return result;
}

std::string filter_summary(const FilterResult& r) {
  std::ostringstream out;
  const int64_t total = static_cast<int64_t>(r.annotated.size());
  const int64_t kept = static_cast<int64_t>(r.retained.size());
  if (r.empty_input) {
    out << "retained 0/0 (undefined)\n";
  } else {
    char pct[32];
    std::snprintf(pct, sizeof pct, "%.2f", 100.0 * r.retention_ratio);
    out << "retained " << kept << "/" << total << " (" << pct << "%)\n";
  }
  out << "state,points,retained\n";
  for (size_t i = 0; i <= static_cast<size_t>(state_count); ++i) {
    out << kStateNames[i] << ',' << r.by_state[i].points << ',' << r.by_state[i].retained
        << '\n';
  }
  return out.str();
}

std::vector<SweepPoint> threshold_sweep(const std::vector<ScoredPoint>& points,
                                        const std::vector<std::array<double, 6>>& truth,
                                        const ThresholdTable& base,
                                        const TransitionRules& rules,
                                        const std::vector<double>& scales,
                                        MotionState initial) {
  if (truth.size() != points.size()) {
    throw std::invalid_argument("threshold_sweep: truth must align with points");
  }
  std::vector<SweepPoint> curve;
  curve.reserve(scales.size());
  for (double s : scales) {
    const FilterResult r = filter_trajectory(points, base.scaled(s), rules, initial);
    SweepPoint row;
    row.scale = s;
    row.retention_ratio = r.retention_ratio;
    std::vector<std::array<double, 6>> pred, kept_truth;
    pred.reserve(r.retained.size());
    kept_truth.reserve(r.retained.size());
    size_t src = 0;
    for (const ScoredPoint& p : r.retained) {
      while (points[src].time_index != p.time_index) ++src;
      pred.push_back(p.decoded);
      kept_truth.push_back(truth[src]);
    }
    try {
      row.pcc = kinematics::overall_pcc(pred, kept_truth);
    } catch (const std::invalid_argument&) {
      row.pcc = std::numeric_limits<double>::quiet_NaN();
    }
    curve.push_back(row);
  }
  return curve;
}

Critic::Critic(int64_t latent_dim, int64_t hidden, uint64_t seed)
    : latent_dim_(latent_dim), hidden_(hidden) {
  if (latent_dim <= 0 || hidden <= 0) {
    throw std::invalid_argument("critic: latent and hidden dims must be positive");
  }
  const int64_t in = input_dim();
  params_ = {
      {"critic.w1", Tensor::zeros({in, hidden}, true)},
      {"critic.b1", Tensor::zeros({hidden}, true)},
      {"critic.w2", Tensor::zeros({hidden, 1}, true)},
      {"critic.b2", Tensor::zeros({1}, true)},
  };
  Rng rng(seed);
  for (auto& param : params_) {
    Tensor& t = param.second;
    if (t.ndim() == 1) continue;
    const double bound = 1.0 / std::sqrt(static_cast<double>(t.shape()[0]));
    for (double& x : t.mutable_values()) x = rng.uniform(-bound, bound);
  }
}

Tensor Critic::forward(const Tensor& x) const {
  if (x.ndim() != 2 || x.dim(1) != input_dim()) {
    throw std::invalid_argument("critic: expected input [B, " +
                                std::to_string(input_dim()) + "]");
  }
  const Tensor h = tensor::elu(tensor::dense(x, params_[0].second, params_[1].second));
  return tensor::sigmoid(tensor::dense(h, params_[2].second, params_[3].second));
}

double Critic::score(const std::vector<double>& latent,
                     const std::array<double, state_count>& posterior,
                     double local_jerk) const {
  if (static_cast<int64_t>(latent.size()) != latent_dim_) {
    throw std::invalid_argument("critic: latent size mismatch");
  }
  std::vector<double> row = latent;
  row.insert(row.end(), posterior.begin(), posterior.end());
  row.push_back(local_jerk);
  for (double v : row) {
    if (!std::isfinite(v)) throw std::invalid_argument("critic: inputs must be finite");
  }
  const Tensor out = forward(Tensor::from({1, input_dim()}, std::move(row)));
  return out.values()[0];
}

void Critic::save(const std::filesystem::path& path) const {
  checkpoint::Checkpoint ckpt;
  json meta;
  meta["kind"] = "critic";
  meta["latent_dim"] = latent_dim_;
  meta["hidden"] = hidden_;
  ckpt.metadata = meta.dump();
  for (const auto& [name, t] : params_) {
    ckpt.arrays.push_back({name, t.shape(), t.values()});
  }
  checkpoint::save_checkpoint(path, ckpt);
}

Critic Critic::load(const std::filesystem::path& path) {
  const checkpoint::Checkpoint ckpt = checkpoint::load_checkpoint(path);
  const json meta = json::parse(ckpt.metadata);
  if (meta.value("kind", "") != "critic") {
    throw std::invalid_argument(path.string() + ": not a critic checkpoint");
  }
  Critic c(meta.at("latent_dim").get<int64_t>(), meta.at("hidden").get<int64_t>(), 0);
  for (auto& param : c.params_) {
    const checkpoint::NamedArray& a = ckpt.at(param.first);
    if (a.shape != param.second.shape()) {
      throw std::invalid_argument(path.string() + ": shape mismatch for " + param.first);
    }
    param.second.mutable_values() = a.values;
  }
  return c;
}

CriticFit train_critic(Critic& critic, const std::vector<std::vector<double>>& latents,
                       const std::vector<std::array<double, state_count>>& posteriors,
                       const std::vector<double>& jerks, const std::vector<double>& errors,
                       const CriticTrainConfig& cfg) {
  const size_t n = latents.size();
  if (posteriors.size() != n || jerks.size() != n || errors.size() != n) {
    throw std::invalid_argument("train_critic: input lengths disagree");
  }
  if (n == 0) throw std::invalid_argument("train_critic: empty training set");
  if (cfg.epochs <= 0 || cfg.batch_size <= 0 || !(cfg.learning_rate > 0.0)) {
    throw std::invalid_argument("train_critic: bad training config");
  }
  for (double e : errors) {
    if (!(e >= 0.0) || !std::isfinite(e)) {
      throw std::invalid_argument("train_critic: errors must be finite and >= 0");
    }
  }

  std::vector<double> sorted = errors;
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted.size() % 2 == 1
                            ? sorted[sorted.size() / 2]
                            : 0.5 * (sorted[sorted.size() / 2 - 1] + sorted[sorted.size() / 2]);
  if (!(median > 0.0)) {
    throw std::invalid_argument("train_critic: median error must be positive");
  }

  CriticFit fit;
  fit.alpha = std::log(2.0) / median;
  fit.targets.resize(n);
  for (size_t i = 0; i < n; ++i) fit.targets[i] = std::exp(-fit.alpha * errors[i]);

  const int64_t in = critic.input_dim();
  std::vector<double> rows(n * static_cast<size_t>(in));
  for (size_t i = 0; i < n; ++i) {
    if (static_cast<int64_t>(latents[i].size()) != critic.latent_dim()) {
      throw std::invalid_argument("train_critic: latent size mismatch at row " +
                                  std::to_string(i));
    }
    double* row = rows.data() + i * static_cast<size_t>(in);
    std::copy(latents[i].begin(), latents[i].end(), row);
    std::copy(posteriors[i].begin(), posteriors[i].end(), row + latents[i].size());
    row[in - 1] = jerks[i];
  }
  for (double v : rows) {
    if (!std::isfinite(v)) throw std::invalid_argument("train_critic: inputs must be finite");
  }

  train::AdamConfig acfg;
  acfg.learning_rate = cfg.learning_rate;
  train::Adam opt(critic.parameters(), acfg);
  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const auto batch_rows = [&](const std::vector<int64_t>& ids) {
    std::vector<double> x, y;
    x.reserve(ids.size() * static_cast<size_t>(in));
    y.reserve(ids.size());
    for (int64_t id : ids) {
      const double* row = rows.data() + static_cast<size_t>(id) * static_cast<size_t>(in);
      x.insert(x.end(), row, row + in);
      y.push_back(fit.targets[static_cast<size_t>(id)]);
    }
    const int64_t b = static_cast<int64_t>(ids.size());
    return std::pair{Tensor::from({b, in}, std::move(x)), Tensor::from({b, 1}, std::move(y))};
  };

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng shuffle_rng(Rng::mix(cfg.seed, static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    int64_t seen = 0;
    for (size_t start = 0; start < n; start += static_cast<size_t>(cfg.batch_size)) {
      const size_t stop = std::min(n, start + static_cast<size_t>(cfg.batch_size));
      const std::vector<int64_t> ids(order.begin() + static_cast<int64_t>(start),
                                     order.begin() + static_cast<int64_t>(stop));
      auto [x, y] = batch_rows(ids);
      const Tensor loss = train::mse_loss(critic.forward(x), y);
      loss_sum += loss.item() * static_cast<double>(ids.size());
      seen += static_cast<int64_t>(ids.size());
      opt.zero_grad();
      tensor::backward(loss);
      opt.step();
    }
    fit.final_loss = loss_sum / static_cast<double>(seen);
  }
  return fit;
}

std::vector<double> jerk_profile(const std::vector<std::array<double, 6>>& decoded,
                                 double rate_hz) {
  if (!(rate_hz > 0.0) || !std::isfinite(rate_hz)) {
    throw std::invalid_argument("jerk_profile: rate must be positive and finite");
  }
  std::vector<double> out(decoded.size(), 0.0);
  if (decoded.size() < 4) return out;
  const double dt3 = std::pow(1.0 / rate_hz, 3);
  for (size_t i = 3; i < decoded.size(); ++i) {
    double sq = 0.0;
    for (size_t d = 0; d < 6; ++d) {
      const double d3 = decoded[i][d] - 3.0 * decoded[i - 1][d] + 3.0 * decoded[i - 2][d] -
                        decoded[i - 3][d];
      sq += d3 * d3;
    }
    out[i] = std::sqrt(sq) / dt3;
  }
  out[0] = out[1] = out[2] = out[3];
  return out;
}

}  // namespace kinedec::copilot
