#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "aes/common.hpp"

namespace aes::geometry {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// ---------------------------------------------------------------------------
// Rigid pose.
// ---------------------------------------------------------------------------

struct Pose3D {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose3D identity() { return {}; }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  Pose3D compose(const Pose3D& other) const {
    // apply `other` first, then `this`.
    return {rotation * other.rotation,
            rotation * other.translation + translation};
  }

  Pose3D inverse() const {
    Mat3 rt = rotation.transpose();
    return {rt, -(rt * translation)};
  }

  // Frobenius norm of R^T R - I; 0 for an exact rotation.
  double orthonormality_error() const {
    return (rotation.transpose() * rotation - Mat3::Identity()).norm();
  }

  bool is_rigid(double tol = 1e-9) const {
    return orthonormality_error() <= tol && rotation.determinant() > 0.0 &&
           translation.allFinite() && rotation.allFinite();
  }
};

inline Pose3D rotation_about_z(double angle) {
  Pose3D p;
  p.rotation = Eigen::AngleAxisd(angle, Vec3::UnitZ()).toRotationMatrix();
  return p;
}

inline Pose3D axis_angle_pose(const Vec3& axis, double angle, const Vec3& t) {
  Pose3D p;
  p.rotation = Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
  p.translation = t;
  return p;
}

// Geodesic rotation distance between two poses, radians.
inline double rotation_distance(const Pose3D& a, const Pose3D& b) {
  double c = ((a.rotation.transpose() * b.rotation).trace() - 1.0) / 2.0;
  return std::acos(std::clamp(c, -1.0, 1.0));
}

// ---------------------------------------------------------------------------
// Point cloud.
// ---------------------------------------------------------------------------

struct PointCloud {
  std::vector<Vec3> points;
  std::string frame_id;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

inline PointCloud transform_cloud(const PointCloud& cloud, const Pose3D& pose) {
  if (cloud.empty()) throw EmptyInput("transform_cloud: empty cloud");
  PointCloud out;
  out.frame_id = cloud.frame_id;
  out.points.reserve(cloud.size());
  for (const Vec3& p : cloud.points) out.points.push_back(pose.apply(p));
  return out;
}

// ---------------------------------------------------------------------------
// Oriented box.
// ---------------------------------------------------------------------------

struct Box3D {
  Pose3D center_pose;
  Vec3 half_extents = Vec3::Ones();

  void validate() const {
    if (!(half_extents.x() > 0 && half_extents.y() > 0 &&
          half_extents.z() > 0)) {
      throw ConfigError("half_extents", "must be strictly positive");
    }
  }

  // Signed distance from a world point to the box surface (negative inside).
  double signed_distance(const Vec3& p_world) const {
    Vec3 p = center_pose.rotation.transpose() *
             (p_world - center_pose.translation);
    Vec3 q = p.cwiseAbs() - half_extents;
    Vec3 qpos = q.cwiseMax(0.0);
    double outside = qpos.norm();
    double inside = std::min(q.maxCoeff(), 0.0);
    return outside + inside;
  }

  bool contains(const Vec3& p_world) const {
    return signed_distance(p_world) <= 0.0;
  }
};

// ---------------------------------------------------------------------------
// Grid-hashed nearest-neighbor index. Buckets points by voxel; queries walk
// outward Chebyshev shells until the found distance bound excludes any closer
// shell. Hash collisions only widen candidate sets, never hide points.
// ---------------------------------------------------------------------------

class GridNN {
public:
  explicit GridNN(const std::vector<Vec3>& points, double cell_size = 0.0)
      : points_(points) {
    if (points.empty()) throw EmptyInput("GridNN: empty point set");
    Vec3 lo = points[0], hi = points[0];
    for (const Vec3& p : points) {
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    if (cell_size > 0.0) {
      cell_ = cell_size;
    } else {
      // Default: twice the expected point spacing.
      Vec3 ext = (hi - lo).cwiseMax(1e-6);
      double spacing =
          std::cbrt(ext.x() * ext.y() * ext.z() /
                    static_cast<double>(points.size()));
      cell_ = std::max(2.0 * spacing, 1e-6);
    }
    inv_cell_ = 1.0 / cell_;
    buckets_.reserve(points.size());
    for (int i = 0; i < static_cast<int>(points.size()); ++i) {
      buckets_[key_of(points[static_cast<std::size_t>(i)])].push_back(i);
    }
  }

  // Index of the nearest stored point to `q`.
  int nearest(const Vec3& q) const {
    const Eigen::Vector3i c = cell_of(q);
    int best = -1;
    double best_d2 = std::numeric_limits<double>::infinity();
    const int max_ring = 96;
    for (int r = 0;; ++r) {
      if (best >= 0) {
        // Any point in ring r is at least (r-1)*cell away.
        double bound = (r - 1) * cell_;
        if (bound > 0.0 && bound * bound > best_d2) break;
      }
      if (r > max_ring) break;
      scan_ring(c, r, q, best, best_d2);
    }
    if (best < 0) {
      // Shell cap exceeded without a hit; fall back to a full scan.
      for (int i = 0; i < static_cast<int>(points_.size()); ++i) {
        double d2 = (points_[static_cast<std::size_t>(i)] - q).squaredNorm();
        if (d2 < best_d2) {
          best_d2 = d2;
          best = i;
        }
      }
    }
    return best;
  }

  const Vec3& point(int i) const { return points_[static_cast<std::size_t>(i)]; }
  double cell_size() const { return cell_; }

private:
  Eigen::Vector3i cell_of(const Vec3& p) const {
    return {static_cast<int>(std::floor(p.x() * inv_cell_)),
            static_cast<int>(std::floor(p.y() * inv_cell_)),
            static_cast<int>(std::floor(p.z() * inv_cell_))};
  }

  static std::uint64_t pack(int x, int y, int z) {
    auto u = [](int v) {
      return static_cast<std::uint64_t>(static_cast<std::uint32_t>(v)) &
             0x1FFFFFULL;
    };
    return (u(x) << 42) | (u(y) << 21) | u(z);
  }

  std::uint64_t key_of(const Vec3& p) const {
    Eigen::Vector3i c = cell_of(p);
    return pack(c.x(), c.y(), c.z());
  }

  void visit_cell(int x, int y, int z, const Vec3& q, int& best,
                  double& best_d2) const {
    auto it = buckets_.find(pack(x, y, z));
    if (it == buckets_.end()) return;
    for (int i : it->second) {
      double d2 = (points_[static_cast<std::size_t>(i)] - q).squaredNorm();
      if (d2 < best_d2) {
        best_d2 = d2;
        best = i;
      }
    }
  }

  void scan_ring(const Eigen::Vector3i& c, int r, const Vec3& q, int& best,
                 double& best_d2) const {
    if (r == 0) {
      visit_cell(c.x(), c.y(), c.z(), q, best, best_d2);
      return;
    }
    for (int dx = -r; dx <= r; ++dx) {
      for (int dy = -r; dy <= r; ++dy) {
        for (int dz = -r; dz <= r; ++dz) {
          if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != r)
            continue;
          visit_cell(c.x() + dx, c.y() + dy, c.z() + dz, q, best, best_d2);
        }
      }
    }
  }

  const std::vector<Vec3>& points_;
  double cell_ = 0.0;
  double inv_cell_ = 0.0;
  std::unordered_map<std::uint64_t, std::vector<int>> buckets_;
};

// ---------------------------------------------------------------------------
// Point-to-point ICP with SVD-based closed-form alignment.
// ---------------------------------------------------------------------------

struct IcpParams {
  int max_iters = 100;
  double tol = 1e-6;  // meters, residual-change termination
};

struct IcpResult {
  Pose3D pose;
  double fitness = 0.0;  // RMS nearest-neighbor residual, meters
  bool converged = false;
  int iterations = 0;
  std::vector<double> residual_history;  // RMS after each alignment step
};

namespace detail {

// Least-squares rigid transform mapping src[i] -> dst[corr[i]] (Umeyama,
// no scale).
inline Pose3D fit_rigid(const std::vector<Vec3>& src,
                        const std::vector<int>& corr,
                        const std::vector<Vec3>& dst) {
  const double n = static_cast<double>(src.size());
  Vec3 cs = Vec3::Zero(), cd = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    cs += src[i];
    cd += dst[static_cast<std::size_t>(corr[i])];
  }
  cs /= n;
  cd /= n;
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    h += (src[i] - cs) * (dst[static_cast<std::size_t>(corr[i])] - cd).transpose();
  }
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU(), v = svd.matrixV();
  Mat3 d = Mat3::Identity();
  if ((v * u.transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  Pose3D out;
  out.rotation = v * d * u.transpose();
  out.translation = cd - out.rotation * cs;
  return out;
}

inline double smallest_singular_value_centered(const PointCloud& cloud) {
  Vec3 c = Vec3::Zero();
  for (const Vec3& p : cloud.points) c += p;
  c /= static_cast<double>(cloud.size());
  Eigen::MatrixXd m(cloud.size(), 3);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    m.row(static_cast<Eigen::Index>(i)) = (cloud.points[i] - c).transpose();
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  return svd.singularValues().minCoeff();
}

}  // namespace detail

// Registers `templ` onto `observed`, starting from `initial`. The returned
// pose locally minimizes the mean squared nearest-neighbor distance of the
// transformed template. Non-convergence within max_iters is not an error:
// the best pose found is returned with converged=false.
inline IcpResult icp_register(const PointCloud& templ,
                              const PointCloud& observed, const Pose3D& initial,
                              const IcpParams& params = {}) {
  if (templ.size() < 10 || observed.size() < 10) {
    throw EmptyInput("icp_register: clouds must have at least 10 points");
  }
  if (!initial.is_rigid(1e-6)) {
    throw ConfigError("initial", "initial pose is not a finite rigid pose");
  }
  if (detail::smallest_singular_value_centered(templ) < 1e-9) {
    throw DegenerateGeometry("icp_register: degenerate template cloud");
  }

  GridNN nn(observed.points);

  const std::size_t n = templ.size();
  std::vector<int> corr(n, 0);
  Pose3D pose = initial;

  auto correspond = [&](const Pose3D& t) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      Vec3 p = t.apply(templ.points[i]);
      int j = nn.nearest(p);
      corr[i] = j;
      sum += (observed.points[static_cast<std::size_t>(j)] - p).squaredNorm();
    }
    return std::sqrt(sum / static_cast<double>(n));
  };

  IcpResult res;
  double rms = correspond(pose);
  res.residual_history.push_back(rms);
  res.pose = pose;
  res.fitness = rms;

  for (int it = 0; it < params.max_iters; ++it) {
    pose = detail::fit_rigid(templ.points, corr, observed.points);
    double next_rms = correspond(pose);
    res.iterations = it + 1;
    res.residual_history.push_back(next_rms);
    if (next_rms <= res.fitness) {
      res.fitness = next_rms;
      res.pose = pose;
    }
    if (std::abs(rms - next_rms) < params.tol) {
      res.converged = true;
      break;
    }
    rms = next_rms;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Template composition: transform every scan into the common frame, take the
// union, and downsample to one centroid per voxel.
// ---------------------------------------------------------------------------

inline PointCloud compose_template(
    const std::vector<std::pair<PointCloud, Pose3D>>& scans,
    double voxel_size = 0.05) {
  if (scans.empty()) throw EmptyInput("compose_template: no scans");
  if (!(voxel_size > 0.0)) throw ConfigError("voxel_size", "must be > 0");

  struct Acc {
    Vec3 sum = Vec3::Zero();
    int count = 0;
  };
  std::unordered_map<std::uint64_t, Acc> voxels;
  auto key_of = [&](const Vec3& p) {
    auto u = [](double v, double inv) {
      return static_cast<std::uint64_t>(
                 static_cast<std::uint32_t>(
                     static_cast<int>(std::floor(v * inv)))) &
             0x1FFFFFULL;
    };
    double inv = 1.0 / voxel_size;
    return (u(p.x(), inv) << 42) | (u(p.y(), inv) << 21) | u(p.z(), inv);
  };

  std::vector<std::uint64_t> order;  // first-touch order keeps output stable
  for (const auto& [cloud, pose] : scans) {
    if (cloud.empty()) throw EmptyInput("compose_template: empty scan");
    if (!pose.is_rigid(1e-6)) {
      throw ConfigError("pose", "scan pose is not a finite rigid pose");
    }
    for (const Vec3& p : cloud.points) {
      Vec3 w = pose.apply(p);
      std::uint64_t k = key_of(w);
      auto [it, inserted] = voxels.try_emplace(k);
      if (inserted) order.push_back(k);
      it->second.sum += w;
      it->second.count += 1;
    }
  }

  PointCloud out;
  out.frame_id = scans.front().first.frame_id;
  out.points.reserve(order.size());
  for (std::uint64_t k : order) {
    const Acc& a = voxels.at(k);
    out.points.push_back(a.sum / static_cast<double>(a.count));
  }
  return out;
}

}  // namespace aes::geometry
