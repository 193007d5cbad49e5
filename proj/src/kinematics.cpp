#include "kinedec/kinematics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "kinedec/rng.hpp"

namespace kinedec::kinematics {

namespace {

Eigen::Matrix3d rpy_matrix(const Eigen::Vector3d& rpy) {
  return (Eigen::AngleAxisd(rpy.z(), Eigen::Vector3d::UnitZ()) *
          Eigen::AngleAxisd(rpy.y(), Eigen::Vector3d::UnitY()) *
          Eigen::AngleAxisd(rpy.x(), Eigen::Vector3d::UnitX()))
      .toRotationMatrix();
}

Eigen::Matrix3d rot_z(double q) {
  return Eigen::AngleAxisd(q, Eigen::Vector3d::UnitZ()).toRotationMatrix();
}

void check_joint_vector(const ArmModel& arm, const Eigen::VectorXd& q, const std::string& where,
                        bool require_limits) {
  if (q.size() != 7) {
    throw std::invalid_argument(where + ": expected 7 joint angles, got " +
                                std::to_string(q.size()));
  }
  for (int i = 0; i < 7; ++i) {
    if (!std::isfinite(q[i]))
      throw std::invalid_argument(where + ": joint angle " + std::to_string(i + 1) +
                                  " is not finite");
  }
  if (require_limits && !arm.within_limits(q, 1e-12)) {
    throw std::invalid_argument(where + ": joint angles violate the arm limits");
  }
}

}  // namespace

void validate_trajectory(const Trajectory3D& t, const std::string& where) {
  if (t.timestamps.size() != t.points.size()) {
    throw std::invalid_argument(where + ": " + std::to_string(t.timestamps.size()) +
                                " timestamps for " + std::to_string(t.points.size()) +
                                " points");
  }
  for (size_t i = 0; i < t.timestamps.size(); ++i) {
    if (!std::isfinite(t.timestamps[i]))
      throw std::invalid_argument(where + ": timestamp " + std::to_string(i) + " is not finite");
    if (i > 0 && t.timestamps[i] <= t.timestamps[i - 1])
      throw std::invalid_argument(where + ": timestamps are not strictly increasing at index " +
                                  std::to_string(i));
    for (double c : t.points[i]) {
      if (!std::isfinite(c))
        throw std::invalid_argument(where + ": point " + std::to_string(i) +
                                    " has a non-finite coordinate");
    }
  }
}

double pcc(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("pcc: length mismatch (" + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + ")");
  }
  if (a.size() < 2) throw std::invalid_argument("pcc: need at least 2 samples");
  const auto [amin, amax] = std::minmax_element(a.begin(), a.end());
  const auto [bmin, bmax] = std::minmax_element(b.begin(), b.end());
  if (*amin == *amax || *bmin == *bmax) {
    throw std::invalid_argument("pcc: undefined for a constant sequence");
  }

  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) {
    throw std::invalid_argument("pcc: undefined for a constant sequence");
  }
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double overall_pcc(const std::vector<std::array<double, 6>>& pred,
                   const std::vector<std::array<double, 6>>& truth) {
  if (pred.size() != truth.size()) {
    throw std::invalid_argument("overall_pcc: row count mismatch (" +
                                std::to_string(pred.size()) + " vs " +
                                std::to_string(truth.size()) + ")");
  }
  if (pred.empty()) throw std::invalid_argument("overall_pcc: empty input");
  std::vector<double> p, t;
  p.reserve(pred.size() * 6);
  t.reserve(truth.size() * 6);
  for (const auto& row : pred)
    for (double v : row) p.push_back(v);
  for (const auto& row : truth)
    for (double v : row) t.push_back(v);
  return pcc(p, t);
}

double rmse(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("rmse: length mismatch (" + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + ")");
  }
  if (a.empty()) throw std::invalid_argument("rmse: empty input");
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(a.size()));
}

Trajectory3D midpoint(const Trajectory3D& a, const Trajectory3D& b) {
  validate_trajectory(a, "midpoint");
  validate_trajectory(b, "midpoint");
  if (a.timestamps != b.timestamps) {
    throw std::invalid_argument("midpoint: the two paths are sampled on different timestamps");
  }
  if (a.normalized != b.normalized) {
    throw std::invalid_argument("midpoint: one path is normalized and the other is metric");
  }
  Trajectory3D out;
  out.timestamps = a.timestamps;
  out.normalized = a.normalized;
  out.points.reserve(a.size());
  for (size_t i = 0; i < a.size(); ++i) {
    out.points.push_back({0.5 * (a.points[i][0] + b.points[i][0]),
                          0.5 * (a.points[i][1] + b.points[i][1]),
                          0.5 * (a.points[i][2] + b.points[i][2])});
  }
  return out;
}

namespace {

void check_box(const WorkspaceBox& box) {
  for (int k = 0; k < 3; ++k) {
    if (!std::isfinite(box.lo[k]) || !std::isfinite(box.hi[k]) || box.lo[k] >= box.hi[k]) {
      throw std::invalid_argument("workspace box axis " + std::to_string(k) +
                                  " has lo >= hi or a non-finite bound");
    }
  }
}

}  // namespace

Trajectory3D map_to_workspace(const Trajectory3D& t, const WorkspaceBox& box) {
  validate_trajectory(t, "map_to_workspace");
  check_box(box);
  if (!t.normalized) {
    throw std::invalid_argument("map_to_workspace: trajectory is already metric");
  }
  Trajectory3D out;
  out.timestamps = t.timestamps;
  out.normalized = false;
  out.points.reserve(t.size());
  for (const auto& p : t.points) {
    out.points.push_back({box.lo[0] + p[0] * (box.hi[0] - box.lo[0]),
                          box.lo[1] + p[1] * (box.hi[1] - box.lo[1]),
                          box.lo[2] + p[2] * (box.hi[2] - box.lo[2])});
  }
  return out;
}

Trajectory3D unmap_from_workspace(const Trajectory3D& t, const WorkspaceBox& box) {
  validate_trajectory(t, "unmap_from_workspace");
  check_box(box);
  if (t.normalized) {
    throw std::invalid_argument("unmap_from_workspace: trajectory is already normalized");
  }
  Trajectory3D out;
  out.timestamps = t.timestamps;
  out.normalized = true;
  out.points.reserve(t.size());
  for (const auto& p : t.points) {
    out.points.push_back({(p[0] - box.lo[0]) / (box.hi[0] - box.lo[0]),
                          (p[1] - box.lo[1]) / (box.hi[1] - box.lo[1]),
                          (p[2] - box.lo[2]) / (box.hi[2] - box.lo[2])});
  }
  return out;
}

ArmModel ArmModel::panda() {
  constexpr double h = 1.5707963267948966;
  ArmModel m;
  m.joints[0] = {{0, 0, 0.333}, {0, 0, 0}, -2.8973, 2.8973};
  m.joints[1] = {{0, 0, 0}, {-h, 0, 0}, -1.7628, 1.7628};
  m.joints[2] = {{0, -0.316, 0}, {h, 0, 0}, -2.8973, 2.8973};
  m.joints[3] = {{0.0825, 0, 0}, {h, 0, 0}, -3.0718, -0.0698};
  m.joints[4] = {{-0.0825, 0.384, 0}, {-h, 0, 0}, -2.8973, 2.8973};
  m.joints[5] = {{0, 0, 0}, {h, 0, 0}, -0.0175, 3.7525};
  m.joints[6] = {{0.088, 0, 0}, {h, 0, 0}, -2.8973, 2.8973};
  m.tool_xyz = {0, 0, 0.107};
  m.tool_rpy = {0, 0, 0};
  return m;
}

ArmModel ArmModel::parse_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());

  ArmModel m{};
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& what) -> void {
    throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + what);
  };

  while (std::getline(f, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected 'key = values'");

    std::string key = line.substr(first, eq - first);
    key.erase(key.find_last_not_of(" \t") + 1);

    std::vector<double> vals;
    std::istringstream rest(line.substr(eq + 1));
    double v;
    while (rest >> v) vals.push_back(v);
    std::string tail;
    if (rest.clear(), rest >> tail) fail("trailing text '" + tail + "'");
    for (double x : vals)
      if (!std::isfinite(x)) fail("non-finite value");

    if (!seen.insert(key).second) fail("duplicate key '" + key + "'");

    auto want = [&](size_t n) {
      if (vals.size() != n)
        fail("key '" + key + "' expects " + std::to_string(n) + " values, got " +
             std::to_string(vals.size()));
    };
    if (key == "tool.xyz") {
      want(3);
      m.tool_xyz = {vals[0], vals[1], vals[2]};
    } else if (key == "tool.rpy") {
      want(3);
      m.tool_rpy = {vals[0], vals[1], vals[2]};
    } else if (key.rfind("joint", 0) == 0 && key.size() > 6 && key[6] == '.') {
      const char digit = key[5];
      if (digit < '1' || digit > '7') fail("unknown key '" + key + "'");
      JointSpec& j = m.joints[digit - '1'];
      const std::string field = key.substr(7);
      if (field == "xyz") {
        want(3);
        j.xyz = {vals[0], vals[1], vals[2]};
      } else if (field == "rpy") {
        want(3);
        j.rpy = {vals[0], vals[1], vals[2]};
      } else if (field == "limits") {
        want(2);
        j.lower = vals[0];
        j.upper = vals[1];
      } else {
        fail("unknown key '" + key + "'");
      }
    } else {
      fail("unknown key '" + key + "'");
    }
  }

  for (int i = 1; i <= 7; ++i) {
    for (const char* field : {"xyz", "rpy", "limits"}) {
      const std::string key = "joint" + std::to_string(i) + "." + field;
      if (!seen.count(key)) throw std::runtime_error(path.string() + ": missing key '" + key + "'");
    }
  }
  for (const char* key : {"tool.xyz", "tool.rpy"}) {
    if (!seen.count(key)) throw std::runtime_error(path.string() + ": missing key '" + std::string(key) + "'");
  }
  for (int i = 0; i < 7; ++i) {
    if (m.joints[i].lower >= m.joints[i].upper) {
      throw std::runtime_error(path.string() + ": joint " + std::to_string(i + 1) +
                               " limits are not ordered lower < upper");
    }
  }
  return m;
}

Eigen::VectorXd ArmModel::lower_limits() const {
  Eigen::VectorXd v(7);
  for (int i = 0; i < 7; ++i) v[i] = joints[i].lower;
  return v;
}

Eigen::VectorXd ArmModel::upper_limits() const {
  Eigen::VectorXd v(7);
  for (int i = 0; i < 7; ++i) v[i] = joints[i].upper;
  return v;
}

Eigen::VectorXd ArmModel::neutral_pose() const {
  Eigen::VectorXd v(7);
  for (int i = 0; i < 7; ++i) v[i] = 0.5 * (joints[i].lower + joints[i].upper);
  return v;
}

bool ArmModel::within_limits(const Eigen::VectorXd& q, double slack) const {
  if (q.size() != 7) return false;
  for (int i = 0; i < 7; ++i) {
    if (q[i] < joints[i].lower - slack || q[i] > joints[i].upper + slack) return false;
  }
  return true;
}

void ArmModel::clamp_to_limits(Eigen::VectorXd& q) const {
  for (int i = 0; i < 7; ++i) q[i] = std::clamp(q[i], joints[i].lower, joints[i].upper);
}

Pose forward_kinematics(const ArmModel& arm, const Eigen::VectorXd& q) {
  check_joint_vector(arm, q, "forward_kinematics", false);
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d p = Eigen::Vector3d::Zero();
  for (int i = 0; i < 7; ++i) {
    p += R * arm.joints[i].xyz;
    R *= rpy_matrix(arm.joints[i].rpy);
    R *= rot_z(q[i]);
  }
  p += R * arm.tool_xyz;
  R *= rpy_matrix(arm.tool_rpy);
  return {p, R};
}

Eigen::Matrix<double, 3, 7> position_jacobian(const ArmModel& arm, const Eigen::VectorXd& q) {
  check_joint_vector(arm, q, "position_jacobian", false);
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d p = Eigen::Vector3d::Zero();
  std::array<Eigen::Vector3d, 7> axes, origins;
  for (int i = 0; i < 7; ++i) {
    p += R * arm.joints[i].xyz;
    R *= rpy_matrix(arm.joints[i].rpy);
    axes[i] = R.col(2);
    origins[i] = p;
    R *= rot_z(q[i]);
  }
  const Eigen::Vector3d pe = p + R * arm.tool_xyz;
  Eigen::Matrix<double, 3, 7> J;
  for (int i = 0; i < 7; ++i) J.col(i) = axes[i].cross(pe - origins[i]);
  return J;
}

IkResult solve_ik(const ArmModel& arm, const Eigen::Vector3d& target,
                  const Eigen::VectorXd& q_init, double tol, int max_iters, double damping) {
  if (!target.allFinite()) throw std::invalid_argument("solve_ik: target is not finite");
  check_joint_vector(arm, q_init, "solve_ik", true);
  if (tol <= 0.0) throw std::invalid_argument("solve_ik: tol must be positive");
  if (max_iters < 1) throw std::invalid_argument("solve_ik: max_iters must be at least 1");

  const auto residual_at = [&](const Eigen::VectorXd& qq) {
    return (target - forward_kinematics(arm, qq).position).norm();
  };

  IkResult out;
  Eigen::VectorXd q = q_init;
  out.q = q;
  out.residual = residual_at(q);
  if (out.residual <= tol) {
    out.converged = true;
    return out;
  }

  Rng restart_rng(0x61726d31);
  const Eigen::VectorXd neutral = arm.neutral_pose();
  const Eigen::VectorXd lo = arm.lower_limits();
  const Eigen::VectorXd hi = arm.upper_limits();
  int stalls = 0;

  for (int iter = 1; iter <= max_iters; ++iter) {
    const Eigen::Vector3d r = target - forward_kinematics(arm, q).position;
    const Eigen::Matrix<double, 3, 7> J = position_jacobian(arm, q);
    const Eigen::Matrix3d A =
        J * J.transpose() + damping * damping * Eigen::Matrix3d::Identity();
    const Eigen::VectorXd dq = J.transpose() * A.ldlt().solve(r);

    const double cur = r.norm();
    double step = 1.0;
    bool improved = false;
    for (int k = 0; k < 12; ++k) {
      Eigen::VectorXd qn = q + step * dq;
      arm.clamp_to_limits(qn);
      if (residual_at(qn) < cur) {
        q = qn;
        improved = true;
        break;
      }
      step *= 0.5;
    }

    if (improved) {
      stalls = 0;
    } else if (++stalls >= 2) {
      for (int i = 0; i < 7; ++i) {
        q[i] = neutral[i] + restart_rng.uniform(-0.45, 0.45) * (hi[i] - lo[i]);
      }
      arm.clamp_to_limits(q);
      stalls = 0;
    }

    const double now = residual_at(q);
    if (now < out.residual) {
      out.residual = now;
      out.q = q;
    }
    out.iterations = iter;
    out.residual_trace.push_back(out.residual);
    if (out.residual <= tol) {
      out.converged = true;
      break;
    }
  }
  return out;
}

Eigen::VectorXd inverse_kinematics(const ArmModel& arm, const Eigen::Vector3d& target,
                                   const Eigen::VectorXd& q_init, double tol, int max_iters) {
  const IkResult r = solve_ik(arm, target, q_init, tol, max_iters);
  if (!r.converged) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", r.residual);
    throw std::runtime_error("inverse kinematics did not converge in " +
                             std::to_string(max_iters) + " iterations; best residual " + buf);
  }
  return r.q;
}

JointTrajectory interpolate_joints(const JointTrajectory& jt, double out_rate_hz) {
  if (!(out_rate_hz > 0.0)) throw std::invalid_argument("interpolate_joints: rate must be positive");
  if (jt.timestamps.size() != jt.configurations.size()) {
    throw std::invalid_argument("interpolate_joints: timestamp/configuration count mismatch");
  }
  const size_t n = jt.size();
  for (size_t i = 1; i < n; ++i) {
    if (jt.timestamps[i] <= jt.timestamps[i - 1])
      throw std::invalid_argument("interpolate_joints: timestamps are not strictly increasing");
  }
  if (n <= 1) return jt;

  const double t0 = jt.timestamps.front();
  const double span = jt.timestamps.back() - t0;
  const auto steps = std::max<int64_t>(1, std::llround(span * out_rate_hz));

  JointTrajectory out;
  out.timestamps.reserve(steps + 1);
  out.configurations.reserve(steps + 1);
  size_t seg = 0;
  for (int64_t i = 0; i <= steps; ++i) {
    const double t =
        (i == steps) ? jt.timestamps.back() : t0 + span * static_cast<double>(i) / steps;
    while (seg + 2 < n && jt.timestamps[seg + 1] <= t) ++seg;
    const double ta = jt.timestamps[seg];
    const double tb = jt.timestamps[seg + 1];
    const double u = std::clamp((t - ta) / (tb - ta), 0.0, 1.0);
    std::array<double, 7> qout;
    for (int j = 0; j < 7; ++j) {
      qout[j] = (1.0 - u) * jt.configurations[seg][j] + u * jt.configurations[seg + 1][j];
    }
    out.timestamps.push_back(t);
    out.configurations.push_back(qout);
  }
  return out;
}

SolveResult solve_trajectory(const ArmModel& arm, const Trajectory3D& traj,
                             const Eigen::VectorXd& q_start, double out_rate_hz, double tol,
                             int max_iters) {
  validate_trajectory(traj, "solve_trajectory");
  if (traj.normalized) {
    throw std::invalid_argument(
        "solve_trajectory: trajectory is normalized; map it to the workspace first");
  }
  if (traj.size() == 0) throw std::invalid_argument("solve_trajectory: empty trajectory");
  check_joint_vector(arm, q_start, "solve_trajectory", true);

  SolveResult res;
  Eigen::VectorXd q = q_start;
  for (size_t i = 0; i < traj.size(); ++i) {
    const Eigen::Vector3d target(traj.points[i][0], traj.points[i][1], traj.points[i][2]);
    const IkResult r = solve_ik(arm, target, q, tol, max_iters);
    if (!r.converged) {
      res.skipped.push_back(i);
      continue;
    }
    q = r.q;
    std::array<double, 7> qa;
    for (int j = 0; j < 7; ++j) qa[j] = q[j];
    res.joints.timestamps.push_back(traj.timestamps[i]);
    res.joints.configurations.push_back(qa);
  }
  if (res.joints.size() == 0) {
    throw std::runtime_error("solve_trajectory: inverse kinematics failed for every point");
  }
  res.joints = interpolate_joints(res.joints, out_rate_hz);
  return res;
}

void write_joint_csv(const std::filesystem::path& path, const JointTrajectory& jt) {
  if (jt.timestamps.size() != jt.configurations.size()) {
    throw std::invalid_argument("write_joint_csv: timestamp/configuration count mismatch");
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "t,q1,q2,q3,q4,q5,q6,q7\n";
  char buf[32];
  for (size_t i = 0; i < jt.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.9g", jt.timestamps[i]);
    f << buf;
    for (int j = 0; j < 7; ++j) {
      std::snprintf(buf, sizeof buf, "%.9g", jt.configurations[i][j]);
      f << ',' << buf;
    }
    f << '\n';
  }
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace kinedec::kinematics
