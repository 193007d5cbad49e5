#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace kinedec::kinematics {

// A 3-D fingertip (or midpoint) path. `normalized` marks coordinates in the
// unit cube as opposed to metres.
struct Trajectory3D {
  std::vector<double> timestamps;
  std::vector<std::array<double, 3>> points;
  bool normalized = false;

  size_t size() const { return points.size(); }
};

// Throws std::invalid_argument unless timestamps are strictly increasing,
// sizes agree, and every coordinate is finite.
void validate_trajectory(const Trajectory3D& t, const std::string& where);

// Pearson correlation coefficient. Errors on length mismatch, length < 2, or
// a constant input (the coefficient is undefined there; NaN would hide it).
double pcc(const std::vector<double>& a, const std::vector<double>& b);

// Concatenates all six output dimensions of both matrices row-major into one
// vector pair and applies pcc.
double overall_pcc(const std::vector<std::array<double, 6>>& pred,
                   const std::vector<std::array<double, 6>>& truth);

double rmse(const std::vector<double>& a, const std::vector<double>& b);

// Pointwise mean of two paths sampled on identical timestamps.
Trajectory3D midpoint(const Trajectory3D& a, const Trajectory3D& b);

struct WorkspaceBox {
  std::array<double, 3> lo;
  std::array<double, 3> hi;

  // 0.5 m cube in front of the arm base.
  static WorkspaceBox default_box() { return {{0.2, -0.25, 0.1}, {0.7, 0.25, 0.6}}; }
};

// Componentwise affine map of a normalized path onto the box; its inverse
// recovers unit-cube coordinates exactly.
Trajectory3D map_to_workspace(const Trajectory3D& t, const WorkspaceBox& box);
Trajectory3D unmap_from_workspace(const Trajectory3D& t, const WorkspaceBox& box);

// One revolute joint: a fixed local transform (xyz metres, extrinsic-XYZ rpy
// radians) followed by rotation about the local Z axis.
struct JointSpec {
  Eigen::Vector3d xyz;
  Eigen::Vector3d rpy;
  double lower = 0.0;
  double upper = 0.0;
};

struct ArmModel {
  std::array<JointSpec, 7> joints;
  Eigen::Vector3d tool_xyz;
  Eigen::Vector3d tool_rpy;

  // Panda-like chain, the same numbers as data/panda_7dof.txt.
  static ArmModel panda();
  // Key-value description file; see data/panda_7dof.txt for the format.
  static ArmModel parse_file(const std::filesystem::path& path);

  Eigen::VectorXd lower_limits() const;
  Eigen::VectorXd upper_limits() const;
  // Mid-range configuration, used as the default IK seed.
  Eigen::VectorXd neutral_pose() const;
  bool within_limits(const Eigen::VectorXd& q, double slack = 0.0) const;
  void clamp_to_limits(Eigen::VectorXd& q) const;
};

struct Pose {
  Eigen::Vector3d position;
  Eigen::Matrix3d rotation;
};

Pose forward_kinematics(const ArmModel& arm, const Eigen::VectorXd& q);

// Geometric position Jacobian, 3x7: column i is z_i x (p_ee - p_i).
Eigen::Matrix<double, 3, 7> position_jacobian(const ArmModel& arm, const Eigen::VectorXd& q);

struct IkResult {
  Eigen::VectorXd q;
  bool converged = false;
  double residual = 0.0;
  int iterations = 0;
  // Best residual seen through each iteration; non-increasing by construction.
  std::vector<double> residual_trace;
};

// Damped least squares on the position Jacobian with per-iteration limit
// clamping and backtracking steps. Never throws on non-convergence.
IkResult solve_ik(const ArmModel& arm, const Eigen::Vector3d& target,
                  const Eigen::VectorXd& q_init, double tol = 1e-3, int max_iters = 200,
                  double damping = 0.05);

// solve_ik that throws on non-convergence, reporting the best residual.
Eigen::VectorXd inverse_kinematics(const ArmModel& arm, const Eigen::Vector3d& target,
                                   const Eigen::VectorXd& q_init, double tol = 1e-3,
                                   int max_iters = 200);

struct JointTrajectory {
  std::vector<double> timestamps;
  std::vector<std::array<double, 7>> configurations;

  size_t size() const { return configurations.size(); }
};

// Linear per-joint resampling onto a uniform grid spanning the input's first
// and last timestamps. Inputs with fewer than two knots pass through.
JointTrajectory interpolate_joints(const JointTrajectory& jt, double out_rate_hz);

struct SolveResult {
  JointTrajectory joints;
  // Indices of input points whose IK did not converge; those knots are absent
  // from `joints`.
  std::vector<size_t> skipped;
};

// Sequential IK over a metric path, each point warm-started from the previous
// solution, followed by interpolate_joints at out_rate_hz.
SolveResult solve_trajectory(const ArmModel& arm, const Trajectory3D& traj,
                             const Eigen::VectorXd& q_start, double out_rate_hz,
                             double tol = 1e-3, int max_iters = 200);

// CSV with header t,q1..q7 at 9 significant digits.
void write_joint_csv(const std::filesystem::path& path, const JointTrajectory& jt);

}  // namespace kinedec::kinematics
