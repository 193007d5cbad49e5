#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "kinedec/tensor.hpp"

namespace kinedec::copilot {

using tensor::Tensor;

// Five real motion phases plus UNRELY, a virtual label for points whose
// classifier vote disagrees with the machine. The machine itself never
// occupies UNRELY; only attribute_point produces it.
enum class MotionState { SEARCHING, LIFTING, HOLDING, PUTTING, RETURNING, UNRELY };

inline constexpr int state_count = 5;  // real states, UNRELY excluded

std::string to_string(MotionState s);
// Accepts the exact upper-case names above; throws std::invalid_argument.
MotionState state_from_string(const std::string& name);

// Per-state confidence cutoffs. UNRELY points face a stricter cutoff than
// any real state.
struct ThresholdTable {
  std::array<double, state_count> theta = {0.5, 0.5, 0.5, 0.5, 0.5};
  double theta_unrely = 0.8;

  // Throws std::invalid_argument unless every theta lies in [0, 1] and
  // theta_unrely exceeds the largest of them. Called where tables enter from
  // user input; derived tables (see scaled) are exempt.
  void validate() const;
  // Componentwise multiple for sweeps. Not validated: scale 0 collapses the
  // UNRELY margin and large scales leave [0, 1] by design.
  ThresholdTable scaled(double factor) const;
  double for_state(MotionState effective) const;
};

// One edge of the knowledge graph: in state `from`, when `feature` compares
// true against `threshold`, move to `to`. Comparator is '<' or '>'.
struct TransitionRule {
  MotionState from = MotionState::SEARCHING;
  std::string feature;
  char comparator = '>';
  double threshold = 0.0;
  MotionState to = MotionState::SEARCHING;

  bool matches(double value) const {
    return comparator == '>' ? value > threshold : value < threshold;
  }
};

// Ordered rule table driving the state machine. Within a state rules are
// tried in listed order, the first match wins, and no match is a self-loop.
struct TransitionRules {
  std::vector<TransitionRule> rules;

  // The grasp-lift-replace-return cycle over the standard event channels
  // (contact_force, height, vertical_velocity, home_distance).
  static TransitionRules defaults();

  // Plain-text table, one rule per line:
  //
  //   <state> <feature> <comparator> <threshold> <next state>
  //
  // Blank lines and lines starting with '#' are skipped. Throws
  // std::runtime_error on unreadable files, std::invalid_argument on
  // malformed lines or a table that fails validate().
  static TransitionRules load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  // Throws std::invalid_argument if any rule touches UNRELY, a threshold is
  // not finite, two rules from one state test the same feature on
  // overlapping value sets, or some state is unreachable from SEARCHING.
  // Rules from one state on different features are legal; listed order
  // arbitrates when several could fire.
  void validate() const;
};

// Advances the machine one step. Rules read the sensor map plus the
// posterior, exposed as features p_searching .. p_returning (shadowing
// same-named sensors). Never returns UNRELY. Throws std::invalid_argument
// if state is UNRELY or a rule references a feature absent from the map.
MotionState fsm_step(MotionState state, const std::array<double, state_count>& posterior,
                     const std::map<std::string, double>& sensors,
                     const TransitionRules& rules);

// The state a point is thresholded under: the machine state when the
// classifier's top vote agrees (exact ties go to the machine), UNRELY
// otherwise.
MotionState attribute_point(MotionState machine_state,
                            const std::array<double, state_count>& posterior);

// One decoded point entering the filter. `sensors` carries the event
// features the transition rules read; machine_state, effective_state, and
// retained are filled by filter_trajectory.
struct ScoredPoint {
  int64_t time_index = 0;
  std::array<double, 6> decoded{};
  std::array<double, state_count> posterior{};
  std::map<std::string, double> sensors;
  double confidence = 0.0;
  MotionState machine_state = MotionState::SEARCHING;
  MotionState effective_state = MotionState::SEARCHING;
  bool retained = false;
};

struct StateCount {
  int64_t points = 0;
  int64_t retained = 0;
};

struct FilterResult {
  // Every input point with machine_state, effective_state, and retained set.
  std::vector<ScoredPoint> annotated;
  // The surviving subsequence, in time order.
  std::vector<ScoredPoint> retained;
  double retention_ratio = 0.0;  // retained / total; NaN on empty input
  bool empty_input = false;
  // Indexed by effective state; UNRELY last.
  std::array<StateCount, state_count + 1> by_state{};
};

// Runs the machine from `initial` over time-ordered points (each point's
// sensors advance the machine before attribution), attributes each point,
// and keeps those whose confidence clears the effective state's cutoff.
// Pure: equal inputs give equal outputs. Throws std::invalid_argument on
// non-increasing time indices or a posterior that does not sum to 1.
FilterResult filter_trajectory(const std::vector<ScoredPoint>& points,
                               const ThresholdTable& thresholds,
                               const TransitionRules& rules,
                               MotionState initial = MotionState::SEARCHING);

// "retained 672/2410 (27.88%)" followed by a state,points,retained table.
std::string filter_summary(const FilterResult& r);

struct SweepPoint {
  double scale = 0.0;
  double retention_ratio = 0.0;
  // Correlation of retained decoded rows against the matching truth rows;
  // NaN when fewer than two points survive or a side is constant.
  double pcc = 0.0;
};

// Filters at base.scaled(s) for each s in scales. Retention is exactly
// non-increasing along any non-decreasing scale grid. Scales must be finite
// and non-negative; truth must align row-for-row with points.
std::vector<SweepPoint> threshold_sweep(const std::vector<ScoredPoint>& points,
                                        const std::vector<std::array<double, 6>>& truth,
                                        const ThresholdTable& base,
                                        const TransitionRules& rules,
                                        const std::vector<double>& scales,
                                        MotionState initial = MotionState::SEARCHING);

// Confidence head over (decoder latent ⊕ posterior ⊕ jerk): one hidden ELU
// layer into a sigmoid. All-zero weights score 0.5 everywhere.
class Critic {
 public:
  Critic(int64_t latent_dim, int64_t hidden, uint64_t seed);

  int64_t latent_dim() const { return latent_dim_; }
  int64_t hidden() const { return hidden_; }
  int64_t input_dim() const { return latent_dim_ + state_count + 1; }

  double score(const std::vector<double>& latent,
               const std::array<double, state_count>& posterior,
               double local_jerk) const;
  // Batched scores for rows already assembled as [latent ⊕ posterior ⊕ jerk].
  Tensor forward(const Tensor& x) const;

  std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }

  void save(const std::filesystem::path& path) const;
  static Critic load(const std::filesystem::path& path);

 private:
  int64_t latent_dim_ = 0;
  int64_t hidden_ = 0;
  std::vector<std::pair<std::string, Tensor>> params_;
};

struct CriticTrainConfig {
  int epochs = 200;
  int batch_size = 64;
  double learning_rate = 1e-2;
  uint64_t seed = 0;
};

struct CriticFit {
  double alpha = 0.0;       // ln 2 / median training error
  double final_loss = 0.0;  // mean squared target error of the last epoch
  std::vector<double> targets;
};

// Fits the critic to targets exp(-alpha * e), alpha chosen so the median
// training error maps to confidence 0.5. Inputs must be equal-length and
// finite with errors >= 0 of positive median.
CriticFit train_critic(Critic& critic, const std::vector<std::vector<double>>& latents,
                       const std::vector<std::array<double, state_count>>& posteriors,
                       const std::vector<double>& jerks, const std::vector<double>& errors,
                       const CriticTrainConfig& cfg = {});

// Per-point third-difference magnitude of the decoded path in units/s^3.
// The first three points clamp to the first interior value; paths shorter
// than four points are all zero.
std::vector<double> jerk_profile(const std::vector<std::array<double, 6>>& decoded,
                                 double rate_hz);

}  // namespace kinedec::copilot
