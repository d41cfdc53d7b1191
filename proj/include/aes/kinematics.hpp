#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aes/common.hpp"
#include "aes/geometry.hpp"
#include "aes/terrain.hpp"

namespace aes::kinematics {

using geometry::Vec2;
using geometry::Vec3;
using nlohmann::json;

// Joint order everywhere: swing, boom, stick, bucket.
struct JointConfig {
  double swing = 0.0;
  double boom = 0.0;
  double stick = 0.0;
  double bucket = 0.0;

  Eigen::Vector4d vec() const { return {swing, boom, stick, bucket}; }
  static JointConfig from_vec(const Eigen::Vector4d& v) {
    return {v[0], v[1], v[2], v[3]};
  }
  bool operator==(const JointConfig&) const = default;
};

struct JointLimits {
  double lo = 0.0;
  double hi = 0.0;
  bool contains(double q) const { return q >= lo && q <= hi; }
};

// Geometry of the machine. Defaults approximate a compact ~6.5 t excavator;
// every field is configurable from JSON.
struct ArmModel {
  double base_height = 1.3;  // boom pivot above ground plane
  double boom_length = 3.1;
  double stick_length = 1.6;
  double bucket_length = 0.9;
  double bucket_capacity = 0.25;

  JointLimits swing_limits{-kPi, kPi};
  JointLimits boom_limits{-0.6, 1.1};
  JointLimits stick_limits{-2.4, -0.3};
  JointLimits bucket_limits{-2.8, 0.5};

  // rad/s at full command
  // Rad/s limits. The swing limit is set so a ~105 degree slewing leg takes
  // several seconds, matching observed full-size cycle timing.
  double swing_speed = 0.32;
  double boom_speed = 0.6;
  double stick_speed = 0.7;
  double bucket_speed = 1.0;

  double max_reach() const {
    return boom_length + stick_length + bucket_length;
  }

  Eigen::Vector4d speed_vec() const {
    return {swing_speed, boom_speed, stick_speed, bucket_speed};
  }
};

inline json arm_to_json(const ArmModel& m) {
  json j;
  j["base_height"] = m.base_height;
  j["boom_length"] = m.boom_length;
  j["stick_length"] = m.stick_length;
  j["bucket_length"] = m.bucket_length;
  j["bucket_capacity"] = m.bucket_capacity;
  j["joint_limits"] = {{"swing", {m.swing_limits.lo, m.swing_limits.hi}},
                       {"boom", {m.boom_limits.lo, m.boom_limits.hi}},
                       {"stick", {m.stick_limits.lo, m.stick_limits.hi}},
                       {"bucket", {m.bucket_limits.lo, m.bucket_limits.hi}}};
  j["joint_speed_limits"] = {{"swing", m.swing_speed},
                             {"boom", m.boom_speed},
                             {"stick", m.stick_speed},
                             {"bucket", m.bucket_speed}};
  return j;
}

inline ArmModel arm_from_json(const json& j) {
  ArmModel m;
  auto get = [&](const char* key, double& field) {
    if (j.contains(key)) {
      if (!j.at(key).is_number())
        throw ConfigError(key, "must be a number");
      field = j.at(key).get<double>();
    }
  };
  get("base_height", m.base_height);
  get("boom_length", m.boom_length);
  get("stick_length", m.stick_length);
  get("bucket_length", m.bucket_length);
  get("bucket_capacity", m.bucket_capacity);
  if (m.boom_length <= 0 || m.stick_length <= 0 || m.bucket_length <= 0)
    throw ConfigError("lengths", "must be > 0");
  if (m.bucket_capacity <= 0)
    throw ConfigError("bucket_capacity", "must be > 0");
  if (j.contains("joint_limits")) {
    const json& lim = j.at("joint_limits");
    auto get_lim = [&](const char* key, JointLimits& l) {
      if (!lim.contains(key)) return;
      const json& a = lim.at(key);
      if (!a.is_array() || a.size() != 2)
        throw ConfigError(std::string("joint_limits.") + key,
                          "expected [lo, hi]");
      l.lo = a[0].get<double>();
      l.hi = a[1].get<double>();
      if (l.lo >= l.hi)
        throw ConfigError(std::string("joint_limits.") + key, "min >= max");
    };
    get_lim("swing", m.swing_limits);
    get_lim("boom", m.boom_limits);
    get_lim("stick", m.stick_limits);
    get_lim("bucket", m.bucket_limits);
  }
  if (j.contains("joint_speed_limits")) {
    const json& sp = j.at("joint_speed_limits");
    auto get_sp = [&](const char* key, double& s) {
      if (sp.contains(key)) s = sp.at(key).get<double>();
    };
    get_sp("swing", m.swing_speed);
    get_sp("boom", m.boom_speed);
    get_sp("stick", m.stick_speed);
    get_sp("bucket", m.bucket_speed);
    if (m.swing_speed <= 0 || m.boom_speed <= 0 || m.stick_speed <= 0 ||
        m.bucket_speed <= 0)
      throw ConfigError("joint_speed_limits", "must be > 0");
  }
  return m;
}

inline ArmModel load_arm_model(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("load_arm_model: cannot open " + path);
  return arm_from_json(json::parse(f));
}

// ---------------------------------------------------------------------------
// Forward kinematics. The arm is a planar 3-link chain (boom, stick, bucket)
// in the vertical plane selected by the swing angle. At the zero pose all
// three links point along +x, so the bucket tip sits at
// (boom+stick+bucket lengths, 0, base_height). Stick and bucket angles are
// relative to the previous link.
// ---------------------------------------------------------------------------

inline bool is_valid(const ArmModel& m, const JointConfig& q,
                     std::vector<std::string>* offending = nullptr) {
  std::vector<std::string> bad;
  if (!m.swing_limits.contains(q.swing)) bad.push_back("swing");
  if (!m.boom_limits.contains(q.boom)) bad.push_back("boom");
  if (!m.stick_limits.contains(q.stick)) bad.push_back("stick");
  if (!m.bucket_limits.contains(q.bucket)) bad.push_back("bucket");
  if (offending) *offending = bad;
  return bad.empty();
}

inline void require_valid(const ArmModel& m, const JointConfig& q) {
  std::vector<std::string> bad;
  if (!is_valid(m, q, &bad)) {
    std::string msg = "joint limits violated:";
    for (const std::string& s : bad) msg += " " + s;
    throw LimitViolation(msg, bad);
  }
}

struct TipPose {
  Vec3 position = Vec3::Zero();
  double bucket_orientation = 0.0;  // tip pitch in the arm plane, radians
};

// Planar (radial distance, height above pivot) positions of the boom tip,
// stick tip, and bucket tip.
inline std::array<Vec2, 3> planar_points(const ArmModel& m,
                                         const JointConfig& q) {
  double a1 = q.boom;
  double a2 = q.boom + q.stick;
  double a3 = q.boom + q.stick + q.bucket;
  Vec2 p1{m.boom_length * std::cos(a1), m.boom_length * std::sin(a1)};
  Vec2 p2 = p1 + Vec2{m.stick_length * std::cos(a2),
                      m.stick_length * std::sin(a2)};
  Vec2 p3 = p2 + Vec2{m.bucket_length * std::cos(a3),
                      m.bucket_length * std::sin(a3)};
  return {p1, p2, p3};
}

inline Vec3 planar_to_world(const ArmModel& m, double swing, const Vec2& rz) {
  return {rz.x() * std::cos(swing), rz.x() * std::sin(swing),
          rz.y() + m.base_height};
}

inline TipPose forward_kinematics(const ArmModel& m, const JointConfig& q) {
  auto pts = planar_points(m, q);
  TipPose tip;
  tip.position = planar_to_world(m, q.swing, pts[2]);
  tip.bucket_orientation = q.boom + q.stick + q.bucket;
  return tip;
}

// World positions of the three link endpoints, for collision checks.
inline std::array<Vec3, 3> arm_points(const ArmModel& m,
                                      const JointConfig& q) {
  auto pts = planar_points(m, q);
  return {planar_to_world(m, q.swing, pts[0]),
          planar_to_world(m, q.swing, pts[1]),
          planar_to_world(m, q.swing, pts[2])};
}

// ---------------------------------------------------------------------------
// Inverse kinematics for tip position plus bucket pitch. Swing comes straight
// from the target bearing; the remaining planar 2R problem is solved in
// closed form on the elbow-up branch (stick angle <= 0, the digging
// configuration). Throws Unreachable when the wrist leaves the reachable
// annulus and LimitViolation (naming the joints) when the branch solution
// exists but exceeds a limit.
// ---------------------------------------------------------------------------

inline JointConfig inverse_kinematics(const ArmModel& m, const Vec3& tip_world,
                                      double bucket_angle) {
  double r_tip = std::hypot(tip_world.x(), tip_world.y());
  double swing =
      (r_tip < 1e-12) ? 0.0 : std::atan2(tip_world.y(), tip_world.x());
  double z_tip = tip_world.z() - m.base_height;

  // Wrist = tip pulled back along the bucket link.
  double rw = r_tip - m.bucket_length * std::cos(bucket_angle);
  double zw = z_tip - m.bucket_length * std::sin(bucket_angle);

  double Lb = m.boom_length, Ls = m.stick_length;
  double d2 = rw * rw + zw * zw;
  double D = (d2 - Lb * Lb - Ls * Ls) / (2.0 * Lb * Ls);
  if (D > 1.0 + 1e-9 || D < -1.0 - 1e-9) {
    throw Unreachable("wrist target outside reachable annulus (|D|=" +
                      std::to_string(std::abs(D)) + ")");
  }
  D = std::clamp(D, -1.0, 1.0);
  double stick = -std::acos(D);  // elbow-up branch
  double boom = std::atan2(zw, rw) -
                std::atan2(Ls * std::sin(stick), Lb + Ls * std::cos(stick));
  double bucket = bucket_angle - boom - stick;

  JointConfig q{swing, boom, stick, bucket};
  require_valid(m, q);
  return q;
}

// ---------------------------------------------------------------------------
// Bucket sweep footprint: tip positions at `samples` configs interpolated
// between q_start and q_end, projected onto the heightmap. A cell is touched
// when the tip is below the current surface there; each cell appears once
// (first-contact order) with the deepest contact kept. Off-map samples are
// skipped.
// ---------------------------------------------------------------------------

inline std::vector<terrain::FootprintCell> bucket_sweep_footprint(
    const ArmModel& m, const terrain::HeightMap& map,
    const JointConfig& q_start, const JointConfig& q_end, int samples) {
  if (samples < 2) throw ConfigError("samples", "must be >= 2");
  std::vector<terrain::FootprintCell> cells;
  std::vector<std::size_t> slot(static_cast<std::size_t>(map.width()) *
                                    static_cast<std::size_t>(map.height()),
                                SIZE_MAX);
  Eigen::Vector4d a = q_start.vec();
  Eigen::Vector4d b = q_end.vec();
  for (int i = 0; i < samples; ++i) {
    double t = static_cast<double>(i) / static_cast<double>(samples - 1);
    JointConfig q = JointConfig::from_vec(a + t * (b - a));
    Vec3 tip = forward_kinematics(m, q).position;
    terrain::CellIndex c = map.world_to_cell({tip.x(), tip.y()});
    if (!map.in_bounds(c)) continue;
    double depth = map.elevation(c) - tip.z();
    if (depth <= 0.0) continue;
    std::size_t flat = static_cast<std::size_t>(c.y) *
                           static_cast<std::size_t>(map.width()) +
                       static_cast<std::size_t>(c.x);
    if (slot[flat] == SIZE_MAX) {
      slot[flat] = cells.size();
      cells.push_back({c, depth});
    } else {
      cells[slot[flat]].depth = std::max(cells[slot[flat]].depth, depth);
    }
  }
  return cells;
}

}  // namespace aes::kinematics
