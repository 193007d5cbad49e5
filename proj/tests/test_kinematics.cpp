#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "kinedec/kinematics.hpp"
#include "kinedec/rng.hpp"
#include "oracles.hpp"

using namespace kinedec::kinematics;
using kinedec::Rng;
namespace fs = std::filesystem;

namespace {

Trajectory3D make_traj(std::vector<std::array<double, 3>> pts, bool normalized = false) {
  Trajectory3D t;
  t.points = std::move(pts);
  t.timestamps.resize(t.points.size());
  for (size_t i = 0; i < t.timestamps.size(); ++i) t.timestamps[i] = 0.1 * static_cast<double>(i);
  t.normalized = normalized;
  return t;
}

Eigen::VectorXd random_in_limits(const ArmModel& arm, Rng& rng, double margin = 0.05) {
  Eigen::VectorXd q(7);
  for (int i = 0; i < 7; ++i) {
    const double lo = arm.joints[i].lower;
    const double hi = arm.joints[i].upper;
    const double pad = margin * (hi - lo);
    q[i] = rng.uniform(lo + pad, hi - pad);
  }
  return q;
}

fs::path temp_arm_file(const std::string& contents) {
  const fs::path p = fs::temp_directory_path() / ("arm_" + std::to_string(::getpid()) + ".txt");
  std::ofstream f(p, std::ios::binary);
  f << contents;
  return p;
}

}  // namespace

TEST_SUITE("kinematics") {

TEST_CASE("pcc worked examples") {
  CHECK(pcc({1, 2, 3}, {1, 2, 3}) == 1.0);
  CHECK(pcc({1, 2, 3}, {3, 2, 1}) == -1.0);
  CHECK(pcc({1, 2, 3, 4}, {1, 3, 2, 4}) == doctest::Approx(0.8).epsilon(1e-14));
}

TEST_CASE("pcc rejects degenerate inputs") {
  CHECK_THROWS_AS(pcc({1, 2}, {1, 2, 3}), std::invalid_argument);
  CHECK_THROWS_AS(pcc({1}, {2}), std::invalid_argument);
  CHECK_THROWS_WITH_AS(pcc({2, 2, 2}, {1, 2, 3}), doctest::Contains("constant"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(pcc({1, 2, 3}, {0.1, 0.1, 0.1}), doctest::Contains("constant"),
                       std::invalid_argument);
}

TEST_CASE("pcc stays in range and matches the formula oracle") {
  Rng rng(401);
  for (int rep = 0; rep < 50; ++rep) {
    const size_t n = 2 + rng.uniform_int(40);
    std::vector<double> a(n), b(n);
    for (size_t i = 0; i < n; ++i) {
      a[i] = rng.uniform(-5, 5);
      b[i] = rng.uniform(-5, 5);
    }
    const double r = pcc(a, b);
    CHECK(r >= -1.0);
    CHECK(r <= 1.0);
    CHECK(r == oracles::pcc_formula(a, b));
  }
}

TEST_CASE("pcc is invariant under positive affine transforms") {
  Rng rng(402);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> a(30), b(30);
    for (size_t i = 0; i < a.size(); ++i) {
      a[i] = rng.uniform(-2, 2);
      b[i] = rng.uniform(-2, 2);
    }
    const double base = pcc(a, b);
    const double alpha = rng.uniform(0.1, 4.0);
    const double beta = rng.uniform(-10, 10);
    std::vector<double> bt(b.size());
    for (size_t i = 0; i < b.size(); ++i) bt[i] = alpha * b[i] + beta;
    CHECK(pcc(a, bt) == doctest::Approx(base).epsilon(1e-12));
    for (size_t i = 0; i < b.size(); ++i) bt[i] = -alpha * b[i] + beta;
    CHECK(pcc(a, bt) == doctest::Approx(-base).epsilon(1e-12));
  }
}

TEST_CASE("overall_pcc flattens all six dimensions") {
  Rng rng(403);
  std::vector<std::array<double, 6>> pred(9), truth(9);
  for (auto& row : pred)
    for (double& v : row) v = rng.uniform(-1, 1);
  for (auto& row : truth)
    for (double& v : row) v = rng.uniform(-1, 1);

  CHECK(overall_pcc(pred, pred) == 1.0);
  CHECK(overall_pcc(pred, truth) == oracles::flatten_pcc(pred, truth));

  std::vector<double> flat;
  for (const auto& row : pred) flat.insert(flat.end(), row.begin(), row.end());
  CHECK(flat.size() == 6 * pred.size());

  CHECK_THROWS_AS(overall_pcc(pred, std::vector<std::array<double, 6>>(8)),
                  std::invalid_argument);
  CHECK_THROWS_AS(overall_pcc({}, {}), std::invalid_argument);
}

TEST_CASE("rmse") {
  CHECK(rmse({1, 2, 3}, {1, 2, 3}) == 0.0);
  CHECK(rmse({0, 0}, {3, 4}) == std::sqrt(12.5));

  Rng rng(404);
  std::vector<double> a(17), b(17);
  for (size_t i = 0; i < a.size(); ++i) {
    a[i] = rng.uniform(-3, 3);
    b[i] = rng.uniform(-3, 3);
  }
  const double base = rmse(a, b);
  for (const double c : {4.0, -2.0, 0.5}) {
    std::vector<double> ac(a.size()), bc(b.size());
    for (size_t i = 0; i < a.size(); ++i) {
      ac[i] = c * a[i];
      bc[i] = c * b[i];
    }
    CHECK(rmse(ac, bc) == std::fabs(c) * base);
  }

  CHECK(base > 0.0);
  CHECK_THROWS_AS(rmse({1}, {1, 2}), std::invalid_argument);
  CHECK_THROWS_AS(rmse({}, {}), std::invalid_argument);
}

TEST_CASE("midpoint") {
  const Trajectory3D a = make_traj({{0, 0, 0}, {1, 1, 1}});
  const Trajectory3D b = make_traj({{2, 4, 6}, {1, 1, 1}});

  const Trajectory3D m = midpoint(a, b);
  CHECK(m.points[0] == std::array<double, 3>{1, 2, 3});
  CHECK(m.points[1] == std::array<double, 3>{1, 1, 1});
  CHECK(m.timestamps == a.timestamps);

  const Trajectory3D same = midpoint(a, a);
  CHECK(same.points == a.points);

  const Trajectory3D swapped = midpoint(b, a);
  CHECK(swapped.points == m.points);

  Trajectory3D shifted = b;
  shifted.timestamps[1] += 0.01;
  CHECK_THROWS_AS(midpoint(a, shifted), std::invalid_argument);

  Trajectory3D flagged = b;
  flagged.normalized = true;
  CHECK_THROWS_AS(midpoint(a, flagged), std::invalid_argument);
}

TEST_CASE("trajectory validation") {
  Trajectory3D t = make_traj({{0, 0, 0}, {1, 1, 1}});
  CHECK_NOTHROW(validate_trajectory(t, "test"));

  Trajectory3D bad_time = t;
  bad_time.timestamps[1] = bad_time.timestamps[0];
  CHECK_THROWS_WITH_AS(validate_trajectory(bad_time, "test"),
                       doctest::Contains("strictly increasing"), std::invalid_argument);

  Trajectory3D bad_coord = t;
  bad_coord.points[1][2] = std::nan("");
  CHECK_THROWS_AS(validate_trajectory(bad_coord, "test"), std::invalid_argument);

  Trajectory3D ragged = t;
  ragged.timestamps.push_back(9.0);
  CHECK_THROWS_AS(validate_trajectory(ragged, "test"), std::invalid_argument);
}

TEST_CASE("workspace mapping") {
  const WorkspaceBox box = WorkspaceBox::default_box();

  SUBCASE("0.5 maps to the box centre") {
    const Trajectory3D t = make_traj({{0.5, 0.5, 0.5}}, true);
    const Trajectory3D m = map_to_workspace(t, box);
    CHECK_FALSE(m.normalized);
    for (int k = 0; k < 3; ++k) {
      CHECK(m.points[0][k] == doctest::Approx(0.5 * (box.lo[k] + box.hi[k])).epsilon(1e-15));
    }
  }

  SUBCASE("round trip is the identity within 1e-12") {
    Rng rng(405);
    Trajectory3D t = make_traj({{0, 0, 0}}, true);
    t.points.clear();
    t.timestamps.clear();
    for (int i = 0; i < 50; ++i) {
      t.timestamps.push_back(0.01 * i);
      t.points.push_back({rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1)});
    }
    const Trajectory3D back = unmap_from_workspace(map_to_workspace(t, box), box);
    CHECK(back.normalized);
    for (size_t i = 0; i < t.size(); ++i) {
      for (int k = 0; k < 3; ++k) {
        CHECK(back.points[i][k] == doctest::Approx(t.points[i][k]).epsilon(1e-12));
      }
    }
  }

  SUBCASE("unit cube is the identity map") {
    const WorkspaceBox unit{{0, 0, 0}, {1, 1, 1}};
    const Trajectory3D t = make_traj({{0.12, 0.7, 0.33}}, true);
    const Trajectory3D m = map_to_workspace(t, unit);
    CHECK(m.points == t.points);
  }

  SUBCASE("flag and box sanity") {
    const Trajectory3D metric = make_traj({{0.3, 0.1, 0.2}}, false);
    CHECK_THROWS_AS(map_to_workspace(metric, box), std::invalid_argument);
    const Trajectory3D norm = make_traj({{0.3, 0.1, 0.2}}, true);
    CHECK_THROWS_AS(unmap_from_workspace(norm, box), std::invalid_argument);
    CHECK_THROWS_AS(map_to_workspace(norm, WorkspaceBox{{0, 0, 0}, {1, 0, 1}}),
                    std::invalid_argument);
  }
}

TEST_CASE("arm description file round trip") {
  const ArmModel built_in = ArmModel::panda();
  const ArmModel parsed = ArmModel::parse_file(fs::path(KINEDEC_SOURCE_DIR) / "data/panda_7dof.txt");
  for (int i = 0; i < 7; ++i) {
    CHECK(parsed.joints[i].xyz == built_in.joints[i].xyz);
    CHECK(parsed.joints[i].rpy == built_in.joints[i].rpy);
    CHECK(parsed.joints[i].lower == built_in.joints[i].lower);
    CHECK(parsed.joints[i].upper == built_in.joints[i].upper);
  }
  CHECK(parsed.tool_xyz == built_in.tool_xyz);
  CHECK(parsed.tool_rpy == built_in.tool_rpy);
}

TEST_CASE("arm description parser rejections") {
  const std::string good = [] {
    std::ostringstream ss;
    for (int i = 1; i <= 7; ++i) {
      ss << "joint" << i << ".xyz = 0 0 0.1\n"
         << "joint" << i << ".rpy = 0 0 0\n"
         << "joint" << i << ".limits = -1 1\n";
    }
    ss << "tool.xyz = 0 0 0.05\ntool.rpy = 0 0 0\n";
    return ss.str();
  }();

  struct Case {
    std::string mutate_from, mutate_to, expect;
  };
  const Case cases[] = {
      {"joint3.rpy = 0 0 0\n", "", "missing key 'joint3.rpy'"},
      {"joint2.limits = -1 1", "joint2.limits = 1 -1", "not ordered"},
      {"tool.rpy = 0 0 0", "tool.rpy = 0 0", "expects 3 values"},
      {"joint5.xyz = 0 0 0.1", "joint5.pos = 0 0 0.1", "unknown key"},
      {"joint7.rpy = 0 0 0", "joint7.rpy = 0 0 0 oops", "trailing text"},
      {"tool.xyz = 0 0 0.05", "tool.xyz 0 0 0.05", "key = values"},
  };
  for (const auto& c : cases) {
    std::string text = good;
    const auto pos = text.find(c.mutate_from);
    REQUIRE(pos != std::string::npos);
    text.replace(pos, c.mutate_from.size(), c.mutate_to);
    const fs::path p = temp_arm_file(text);
    CHECK_THROWS_WITH_AS(ArmModel::parse_file(p), doctest::Contains(c.expect.c_str()),
                         std::runtime_error);
    fs::remove(p);
  }

  const fs::path p = temp_arm_file(good + "joint1.xyz = 0 0 0\n");
  CHECK_THROWS_WITH_AS(ArmModel::parse_file(p), doctest::Contains("duplicate"),
                       std::runtime_error);
  fs::remove(p);
}

TEST_CASE("forward kinematics home pose") {
  const ArmModel arm = ArmModel::panda();
  const Pose home = forward_kinematics(arm, Eigen::VectorXd::Zero(7));
  CHECK(home.position.x() == doctest::Approx(0.088).epsilon(1e-12));
  CHECK(home.position.y() == doctest::Approx(0.0).scale(1).epsilon(1e-12));
  CHECK(home.position.z() == doctest::Approx(0.926).epsilon(1e-12));

  Eigen::Matrix3d want;
  want << 1, 0, 0, 0, -1, 0, 0, 0, -1;
  CHECK((home.rotation - want).norm() < 1e-12);
}

TEST_CASE("forward kinematics fixed-configuration regression") {
  const ArmModel arm = ArmModel::panda();
  Eigen::VectorXd q(7);
  q << 0.3, -0.8, 0.5, -1.9, 0.4, 2.1, -0.7;
  const Pose pose = forward_kinematics(arm, q);
  CHECK(pose.position.x() == doctest::Approx(0.11882296379064422).epsilon(1e-12));
  CHECK(pose.position.y() == doctest::Approx(0.3456124038146163).epsilon(1e-12));
  CHECK(pose.position.z() == doctest::Approx(0.8221901334961326).epsilon(1e-12));
}

TEST_CASE("joint 7 is a pure tool roll") {
  const ArmModel arm = ArmModel::panda();
  Rng rng(406);
  for (int rep = 0; rep < 10; ++rep) {
    Eigen::VectorXd q = random_in_limits(arm, rng);
    const Eigen::Vector3d p0 = forward_kinematics(arm, q).position;
    q[6] = rng.uniform(arm.joints[6].lower, arm.joints[6].upper);
    const Eigen::Vector3d p1 = forward_kinematics(arm, q).position;
    CHECK((p1 - p0).norm() < 1e-15);
  }
}

TEST_CASE("analytic jacobian matches finite differences") {
  const ArmModel arm = ArmModel::panda();
  Rng rng(407);
  const double h = 1e-6;
  for (int rep = 0; rep < 10; ++rep) {
    const Eigen::VectorXd q = random_in_limits(arm, rng);
    const Eigen::Matrix<double, 3, 7> J = position_jacobian(arm, q);
    for (int j = 0; j < 7; ++j) {
      Eigen::VectorXd qp = q, qm = q;
      qp[j] += h;
      qm[j] -= h;
      const Eigen::Vector3d fd =
          (forward_kinematics(arm, qp).position - forward_kinematics(arm, qm).position) /
          (2.0 * h);
      CHECK((J.col(j) - fd).norm() < 1e-6);
    }
  }
}

TEST_CASE("forward kinematics is locally Lipschitz") {
  const ArmModel arm = ArmModel::panda();
  Rng rng(408);
  for (int rep = 0; rep < 10; ++rep) {
    const Eigen::VectorXd q = random_in_limits(arm, rng);
    const Eigen::Matrix<double, 3, 7> J = position_jacobian(arm, q);
    const double L = J.jacobiSvd().singularValues()[0];
    Eigen::VectorXd delta(7);
    for (int j = 0; j < 7; ++j) delta[j] = rng.uniform(-1e-4, 1e-4);
    const Eigen::Vector3d moved = forward_kinematics(arm, q + delta).position;
    const Eigen::Vector3d base = forward_kinematics(arm, q).position;
    CHECK((moved - base).norm() <= (L + 0.05) * delta.norm());
  }
}

TEST_CASE("ik returns the seed when already solved") {
  const ArmModel arm = ArmModel::panda();
  const Eigen::VectorXd q = arm.neutral_pose();
  const Eigen::Vector3d target = forward_kinematics(arm, q).position;
  const IkResult r = solve_ik(arm, target, q);
  CHECK(r.converged);
  CHECK(r.iterations == 0);
  CHECK(r.q == q);
  CHECK(r.residual_trace.empty());
}

TEST_CASE("ik reaches 100 random feasible targets") {
  const ArmModel arm = ArmModel::panda();
  Rng rng(409);
  const Eigen::VectorXd seed = arm.neutral_pose();
  for (int rep = 0; rep < 100; ++rep) {
    const Eigen::Vector3d target = forward_kinematics(arm, random_in_limits(arm, rng)).position;
    const IkResult r = solve_ik(arm, target, seed, 1e-3, 200, 0.05);
    INFO("target " << target.transpose() << " residual " << r.residual);
    CHECK(r.converged);
    CHECK(r.residual <= 1e-3);
    CHECK(arm.within_limits(r.q));
    CHECK((forward_kinematics(arm, r.q).position - target).norm() <= 1e-3);
  }
}

TEST_CASE("ik reaches the default workspace box corners") {
  const ArmModel arm = ArmModel::panda();
  const WorkspaceBox box = WorkspaceBox::default_box();
  const Eigen::VectorXd seed = arm.neutral_pose();
  for (int mask = 0; mask < 8; ++mask) {
    Eigen::Vector3d corner;
    for (int k = 0; k < 3; ++k) corner[k] = (mask >> k & 1) ? box.hi[k] : box.lo[k];
    const IkResult r = solve_ik(arm, corner, seed);
    INFO("corner " << corner.transpose() << " residual " << r.residual);
    CHECK(r.converged);
  }
}

TEST_CASE("ik failure carries a monotone residual trace") {
  const ArmModel arm = ArmModel::panda();
  const Eigen::Vector3d unreachable(2.5, 0.0, 0.0);
  const IkResult r = solve_ik(arm, unreachable, arm.neutral_pose(), 1e-3, 60);
  CHECK_FALSE(r.converged);
  CHECK(r.residual > 1.0);
  REQUIRE(r.residual_trace.size() == 60);
  for (size_t i = 1; i < r.residual_trace.size(); ++i) {
    CHECK(r.residual_trace[i] <= r.residual_trace[i - 1]);
  }
  CHECK(r.residual_trace.back() == r.residual);

  CHECK_THROWS_WITH_AS(inverse_kinematics(arm, unreachable, arm.neutral_pose(), 1e-3, 60),
                       doctest::Contains("best residual"), std::runtime_error);
}

TEST_CASE("ik input validation") {
  const ArmModel arm = ArmModel::panda();
  Eigen::VectorXd out_of_limits = arm.neutral_pose();
  out_of_limits[3] = 0.0;
  CHECK_THROWS_AS(solve_ik(arm, Eigen::Vector3d(0.4, 0, 0.4), out_of_limits),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      solve_ik(arm, Eigen::Vector3d(std::nan(""), 0, 0), arm.neutral_pose()),
      std::invalid_argument);
}

TEST_CASE("ik is deterministic") {
  const ArmModel arm = ArmModel::panda();
  const Eigen::Vector3d target(0.55, -0.18, 0.25);
  const IkResult a = solve_ik(arm, target, arm.neutral_pose());
  const IkResult b = solve_ik(arm, target, arm.neutral_pose());
  CHECK(a.q == b.q);
  CHECK(a.residual == b.residual);
  CHECK(a.iterations == b.iterations);
}

TEST_CASE("joint interpolation") {
  SUBCASE("two knots at 10 Hz") {
    JointTrajectory jt;
    jt.timestamps = {0.0, 1.0};
    jt.configurations = {{0, 0, 0, 0, 0, 0, 0}, {1, 1, 1, 1, 1, 1, 1}};
    const JointTrajectory out = interpolate_joints(jt, 10.0);
    REQUIRE(out.size() == 11);
    CHECK(out.timestamps.front() == 0.0);
    CHECK(out.timestamps.back() == 1.0);
    CHECK(out.configurations.front() == jt.configurations.front());
    CHECK(out.configurations.back() == jt.configurations.back());
    CHECK(out.configurations[5][0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(out.configurations[3][6] == doctest::Approx(0.3).epsilon(1e-12));
  }

  SUBCASE("already uniform input passes through") {
    JointTrajectory jt;
    for (int i = 0; i < 9; ++i) {
      jt.timestamps.push_back(i / 20.0);
      std::array<double, 7> q;
      for (int j = 0; j < 7; ++j) q[j] = std::sin(0.3 * i + j);
      jt.configurations.push_back(q);
    }
    const JointTrajectory out = interpolate_joints(jt, 20.0);
    REQUIRE(out.size() == jt.size());
    for (size_t i = 0; i < jt.size(); ++i) {
      CHECK(out.timestamps[i] == doctest::Approx(jt.timestamps[i]).epsilon(1e-12));
      for (int j = 0; j < 7; ++j) {
        CHECK(out.configurations[i][j] == doctest::Approx(jt.configurations[i][j]).epsilon(1e-12));
      }
    }
  }

  SUBCASE("resampling never enlarges the max joint step") {
    Rng rng(410);
    for (int rep = 0; rep < 25; ++rep) {
      JointTrajectory jt;
      double t = 0.0;
      double min_gap = 1e9;
      const int n = 3 + static_cast<int>(rng.uniform_int(12));
      for (int i = 0; i < n; ++i) {
        if (i > 0) {
          const double gap = rng.uniform(0.02, 0.3);
          min_gap = std::min(min_gap, gap);
          t += gap;
        }
        jt.timestamps.push_back(t);
        std::array<double, 7> q;
        for (int j = 0; j < 7; ++j) q[j] = rng.uniform(-2, 2);
        jt.configurations.push_back(q);
      }
      const JointTrajectory out = interpolate_joints(jt, 2.0 / min_gap);

      auto max_step = [](const JointTrajectory& x) {
        double m = 0.0;
        for (size_t i = 1; i < x.size(); ++i) {
          double d2 = 0.0;
          for (int j = 0; j < 7; ++j) {
            const double d = x.configurations[i][j] - x.configurations[i - 1][j];
            d2 += d * d;
          }
          m = std::max(m, std::sqrt(d2));
        }
        return m;
      };
      CHECK(max_step(out) <= max_step(jt) + 1e-12);
      CHECK(out.configurations.front() == jt.configurations.front());
      CHECK(out.configurations.back() == jt.configurations.back());
    }
  }

  SUBCASE("degenerate and invalid inputs") {
    JointTrajectory one;
    one.timestamps = {0.5};
    one.configurations = {{1, 2, 3, 4, 5, 6, 7}};
    const JointTrajectory same = interpolate_joints(one, 100.0);
    CHECK(same.size() == 1);
    CHECK(same.configurations == one.configurations);

    JointTrajectory bad;
    bad.timestamps = {0.0, 0.0};
    bad.configurations = {{0, 0, 0, 0, 0, 0, 0}, {1, 1, 1, 1, 1, 1, 1}};
    CHECK_THROWS_AS(interpolate_joints(bad, 10.0), std::invalid_argument);
    CHECK_THROWS_AS(interpolate_joints(one, 0.0), std::invalid_argument);
  }
}

TEST_CASE("solve_trajectory tracks its input") {
  const ArmModel arm = ArmModel::panda();
  Trajectory3D traj;
  const int n = 12;
  for (int i = 0; i < n; ++i) {
    const double u = static_cast<double>(i) / (n - 1);
    traj.timestamps.push_back(0.1 * i);
    traj.points.push_back(
        {0.35 + 0.2 * u, -0.15 + 0.3 * u, 0.25 + 0.15 * std::sin(3.0 * u)});
  }

  const SolveResult res = solve_trajectory(arm, traj, arm.neutral_pose(), 10.0);
  CHECK(res.skipped.empty());
  REQUIRE(res.joints.size() == traj.size());
  for (size_t i = 0; i < res.joints.size(); ++i) {
    Eigen::VectorXd q(7);
    for (int j = 0; j < 7; ++j) q[j] = res.joints.configurations[i][j];
    CHECK(arm.within_limits(q, 1e-12));
    const Eigen::Vector3d p = forward_kinematics(arm, q).position;
    const Eigen::Vector3d want(traj.points[i][0], traj.points[i][1], traj.points[i][2]);
    CHECK((p - want).norm() <= 1e-3 + 1e-9);
  }
}

TEST_CASE("solve_trajectory on a constant input is constant") {
  const ArmModel arm = ArmModel::panda();
  Trajectory3D traj;
  for (int i = 0; i < 5; ++i) {
    traj.timestamps.push_back(0.25 * i);
    traj.points.push_back({0.45, 0.0, 0.35});
  }
  const SolveResult res = solve_trajectory(arm, traj, arm.neutral_pose(), 4.0);
  CHECK(res.skipped.empty());
  REQUIRE(res.joints.size() >= 2);
  for (size_t i = 1; i < res.joints.size(); ++i) {
    CHECK(res.joints.configurations[i] == res.joints.configurations[0]);
  }
}

TEST_CASE("solve_trajectory skips unreachable points") {
  const ArmModel arm = ArmModel::panda();
  Trajectory3D traj;
  traj.timestamps = {0.0, 0.1, 0.2, 0.3};
  traj.points = {{0.45, 0.0, 0.35}, {2.5, 0.0, 0.0}, {0.45, 0.05, 0.35}, {0.45, 0.1, 0.35}};
  const SolveResult res = solve_trajectory(arm, traj, arm.neutral_pose(), 10.0, 1e-3, 40);
  CHECK(res.skipped == std::vector<size_t>{1});
  CHECK(res.joints.size() >= 2);

  Trajectory3D hopeless;
  hopeless.timestamps = {0.0};
  hopeless.points = {{3.0, 3.0, 3.0}};
  CHECK_THROWS_WITH_AS(solve_trajectory(arm, hopeless, arm.neutral_pose(), 10.0, 1e-3, 20),
                       doctest::Contains("every point"), std::runtime_error);

  Trajectory3D flagged = traj;
  flagged.normalized = true;
  CHECK_THROWS_AS(solve_trajectory(arm, flagged, arm.neutral_pose(), 10.0),
                  std::invalid_argument);
}

TEST_CASE("joint csv export") {
  JointTrajectory jt;
  jt.timestamps = {0.0, 0.123456789123};
  jt.configurations = {{1, -0.5, 0.25, 2, -2.8973, 0.0001, 3.14159265358979},
                       {0.987654321123, 1, 1, 1, 1, 1, 1}};
  const fs::path p = fs::temp_directory_path() / ("jt_" + std::to_string(::getpid()) + ".csv");
  write_joint_csv(p, jt);

  std::ifstream f(p, std::ios::binary);
  std::string line;
  std::getline(f, line);
  CHECK(line == "t,q1,q2,q3,q4,q5,q6,q7");
  std::getline(f, line);
  CHECK(line == "0,1,-0.5,0.25,2,-2.8973,0.0001,3.14159265");
  std::getline(f, line);
  CHECK(line == "0.123456789,0.987654321,1,1,1,1,1,1");
  CHECK_FALSE(std::getline(f, line));
  fs::remove(p);
}

}
