#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aes/common.hpp"
#include "aes/geometry.hpp"
#include "aes/terrain.hpp"

namespace aes::perception {

using geometry::Box3D;
using geometry::IcpParams;
using geometry::PointCloud;
using geometry::Pose3D;
using geometry::Vec2;
using geometry::Vec3;
using nlohmann::json;

enum class MaterialClass : std::uint8_t {
  DrySoil = 0,
  WetSoil,
  Stone,
  MudStone,
  PhosphorusPowder,
  PhosphorusLump,
  Titanium,
  TitaniumPhosphorusMix
};
inline constexpr int kMaterialClassCount = 8;

inline const char* material_name(MaterialClass c) {
  switch (c) {
    case MaterialClass::DrySoil: return "DrySoil";
    case MaterialClass::WetSoil: return "WetSoil";
    case MaterialClass::Stone: return "Stone";
    case MaterialClass::MudStone: return "MudStone";
    case MaterialClass::PhosphorusPowder: return "PhosphorusPowder";
    case MaterialClass::PhosphorusLump: return "PhosphorusLump";
    case MaterialClass::Titanium: return "Titanium";
    case MaterialClass::TitaniumPhosphorusMix: return "TitaniumPhosphorusMix";
  }
  return "?";
}

inline MaterialClass material_from_name(const std::string& s) {
  for (int i = 0; i < kMaterialClassCount; ++i) {
    MaterialClass c = static_cast<MaterialClass>(i);
    if (s == material_name(c)) return c;
  }
  throw ConfigError("material", "unknown class '" + s + "'");
}

struct NoiseParams {
  double miss_rate = 0.02;   // per true rock per frame
  double fp_rate = 0.01;     // expected false boxes per frame
  double sigma_pos = 0.03;   // box center noise, meters
  double sigma_ext = 0.05;   // box extent noise, meters
  double sigma_scan = 0.01;  // per-point cloud noise, meters
  // Region false positives spawn in (world xy).
  Vec2 fp_min{-10.0, -10.0};
  Vec2 fp_max{10.0, 10.0};

  bool disabled() const {
    return miss_rate == 0.0 && fp_rate == 0.0 && sigma_pos == 0.0 &&
           sigma_ext == 0.0 && sigma_scan == 0.0;
  }
};

inline json noise_to_json(const NoiseParams& n) {
  return {{"miss_rate", n.miss_rate},
          {"fp_rate", n.fp_rate},
          {"sigma_pos", n.sigma_pos},
          {"sigma_ext", n.sigma_ext},
          {"sigma_scan", n.sigma_scan},
          {"fp_min", {n.fp_min.x(), n.fp_min.y()}},
          {"fp_max", {n.fp_max.x(), n.fp_max.y()}}};
}

inline NoiseParams noise_from_json(const json& j) {
  NoiseParams n;
  auto get = [&](const char* key, double& field) {
    if (j.contains(key)) field = j.at(key).get<double>();
  };
  get("miss_rate", n.miss_rate);
  get("fp_rate", n.fp_rate);
  get("sigma_pos", n.sigma_pos);
  get("sigma_ext", n.sigma_ext);
  get("sigma_scan", n.sigma_scan);
  if (n.miss_rate < 0 || n.miss_rate > 1)
    throw ConfigError("miss_rate", "must be in [0,1]");
  if (n.fp_rate < 0) throw ConfigError("fp_rate", "must be >= 0");
  if (n.sigma_pos < 0 || n.sigma_ext < 0 || n.sigma_scan < 0)
    throw ConfigError("noise", "sigmas must be >= 0");
  if (j.contains("fp_min"))
    n.fp_min = Vec2(j["fp_min"][0].get<double>(), j["fp_min"][1].get<double>());
  if (j.contains("fp_max"))
    n.fp_max = Vec2(j["fp_max"][0].get<double>(), j["fp_max"][1].get<double>());
  return n;
}

struct EmergencyStop {
  double timestamp = 0.0;
};

// Everything the downstream planner consumes for one tick.
struct PerceptionFrame {
  std::vector<Box3D> rock_boxes;
  int mask_width = 0;
  int mask_height = 0;
  std::vector<terrain::CellLabel> label_mask;
  MaterialClass texture_class = MaterialClass::DrySoil;
  std::optional<Pose3D> truck_pose;
  bool intruder_detected = false;
  double timestamp = 0.0;

  terrain::CellLabel label_at(terrain::CellIndex c) const {
    if (c.x < 0 || c.x >= mask_width || c.y < 0 || c.y >= mask_height)
      throw OutOfBounds("label_mask index");
    return label_mask[static_cast<std::size_t>(c.y) *
                          static_cast<std::size_t>(mask_width) +
                      static_cast<std::size_t>(c.x)];
  }
};

// ---------------------------------------------------------------------------
// Rock detection: each true rock survives with probability 1 - miss_rate and
// is reported with Gaussian-perturbed center and extents; false positives are
// Poisson(fp_rate) random boxes in the configured region. Identical seed,
// identical output.
// ---------------------------------------------------------------------------

inline std::vector<Box3D> detect_rocks(const terrain::RockRegistry& rocks,
                                       const NoiseParams& noise,
                                       std::uint64_t seed) {
  Rng rng = make_rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<Box3D> out;
  for (const Box3D& truth : rocks.active_boxes()) {
    if (u01(rng) < noise.miss_rate) continue;
    Box3D b = truth;
    for (int k = 0; k < 3; ++k)
      b.center_pose.translation[k] += noise.sigma_pos * gauss(rng);
    for (int k = 0; k < 3; ++k) {
      b.half_extents[k] =
          std::max(0.01, b.half_extents[k] + noise.sigma_ext * gauss(rng));
    }
    out.push_back(b);
  }

  std::poisson_distribution<int> fp_count(noise.fp_rate);
  int n_fp = (noise.fp_rate > 0.0) ? fp_count(rng) : 0;
  for (int i = 0; i < n_fp; ++i) {
    Box3D b;
    double x = noise.fp_min.x() +
               u01(rng) * (noise.fp_max.x() - noise.fp_min.x());
    double y = noise.fp_min.y() +
               u01(rng) * (noise.fp_max.y() - noise.fp_min.y());
    double hx = 0.15 + 0.35 * u01(rng);
    double hy = 0.15 + 0.35 * u01(rng);
    double hz = 0.15 + 0.35 * u01(rng);
    b.center_pose = geometry::Pose3D{
        geometry::rotation_about_z(u01(rng) * 2.0 * kPi - kPi).rotation,
        Vec3(x, y, hz)};
    b.half_extents = Vec3(hx, hy, hz);
    out.push_back(b);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Texture classification: nearest centroid in feature space, ties to the
// lowest class index. Stand-in for an image classifier; the harness feeds it
// features clustered around the scenario's declared material.
// ---------------------------------------------------------------------------

inline MaterialClass classify_texture(
    const Eigen::VectorXd& features,
    const std::vector<Eigen::VectorXd>& centroids) {
  if (centroids.empty()) throw ShapeError("classify_texture: no centroids");
  int best = 0;
  double best_d2 = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < centroids.size(); ++i) {
    if (centroids[i].size() != features.size())
      throw ShapeError("classify_texture: feature dim " +
                       std::to_string(features.size()) + " vs centroid dim " +
                       std::to_string(centroids[i].size()));
    double d2 = (centroids[i] - features).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      best = static_cast<int>(i);
    }
  }
  return static_cast<MaterialClass>(best);
}

// One-hot canonical centroids, one per material class.
inline std::vector<Eigen::VectorXd> default_texture_centroids() {
  std::vector<Eigen::VectorXd> c;
  for (int i = 0; i < kMaterialClassCount; ++i) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(kMaterialClassCount);
    v[i] = 1.0;
    c.push_back(v);
  }
  return c;
}

// ---------------------------------------------------------------------------
// Truck pose: ICP against the composed template, seeded with the previous
// estimate. A fit worse than the rejection threshold means the truck is not
// actually in view.
// ---------------------------------------------------------------------------

// RMS expected from isotropic per-point noise is sigma*sqrt(3); reject at 3x
// that, with a small floor so noiseless runs are not rejected on roundoff.
inline double fitness_threshold(double sigma_scan) {
  return std::max(3.0 * sigma_scan * std::sqrt(3.0), 1e-3);
}

class TruckPoseTracker {
public:
  TruckPoseTracker(PointCloud templ, IcpParams params = {},
                   double reject_threshold = fitness_threshold(0.01))
      : template_(std::move(templ)),
        params_(params),
        threshold_(reject_threshold) {}

  // Throws PoseRejected (carrying the fitness) when the scan does not match.
  Pose3D estimate(const PointCloud& scan) {
    geometry::IcpResult r =
        geometry::icp_register(template_, scan, last_pose_, params_);
    if (r.fitness > threshold_) {
      throw PoseRejected("truck template fitness " +
                             std::to_string(r.fitness) + " above threshold " +
                             std::to_string(threshold_),
                         r.fitness);
    }
    last_pose_ = r.pose;
    return r.pose;
  }

  const Pose3D& last_pose() const { return last_pose_; }
  void reset(const Pose3D& pose) { last_pose_ = pose; }
  const PointCloud& template_cloud() const { return template_; }
  double threshold() const { return threshold_; }

private:
  PointCloud template_;
  IcpParams params_;
  double threshold_;
  Pose3D last_pose_ = Pose3D::identity();
};

inline Pose3D estimate_truck_pose(const PointCloud& templ,
                                  const PointCloud& scan,
                                  const Pose3D& last_pose,
                                  IcpParams params = {},
                                  double reject_threshold =
                                      fitness_threshold(0.01)) {
  geometry::IcpResult r =
      geometry::icp_register(templ, scan, last_pose, params);
  if (r.fitness > reject_threshold) {
    throw PoseRejected("truck template fitness " + std::to_string(r.fitness) +
                           " above threshold " +
                           std::to_string(reject_threshold),
                       r.fitness);
  }
  return r.pose;
}

// ---------------------------------------------------------------------------
// Scan simulation and the synthetic truck template.
// ---------------------------------------------------------------------------

inline PointCloud simulate_scan(const PointCloud& templ, const Pose3D& pose,
                                double sigma, std::uint64_t seed) {
  PointCloud out = geometry::transform_cloud(templ, pose);
  if (sigma > 0.0) {
    Rng rng = make_rng(seed);
    std::normal_distribution<double> gauss(0.0, sigma);
    for (Vec3& p : out.points) {
      p.x() += gauss(rng);
      p.y() += gauss(rng);
      p.z() += gauss(rng);
    }
  }
  out.frame_id = "scan";
  return out;
}

// Surface-sampled truck: open-top bed cuboid plus an offset cab block. The
// cab breaks the 180-degree symmetry so ICP observes yaw unambiguously.
inline PointCloud make_truck_template(double bed_length = 4.0,
                                      double bed_width = 2.2,
                                      double bed_height = 1.6,
                                      double spacing = 0.15) {
  PointCloud cloud;
  cloud.frame_id = "truck_template";
  auto sample_box = [&](Vec3 lo, Vec3 hi, bool skip_top) {
    Vec3 d = hi - lo;
    int nx = std::max(2, static_cast<int>(std::round(d.x() / spacing)) + 1);
    int ny = std::max(2, static_cast<int>(std::round(d.y() / spacing)) + 1);
    int nz = std::max(2, static_cast<int>(std::round(d.z() / spacing)) + 1);
    for (int ix = 0; ix < nx; ++ix)
      for (int iy = 0; iy < ny; ++iy)
        for (int iz = 0; iz < nz; ++iz) {
          bool on_x = ix == 0 || ix == nx - 1;
          bool on_y = iy == 0 || iy == ny - 1;
          bool on_z = iz == 0 || iz == nz - 1;
          if (!(on_x || on_y || on_z)) continue;  // surface only
          if (skip_top && iz == nz - 1 && !(on_x || on_y)) continue;
          cloud.points.emplace_back(lo.x() + d.x() * ix / (nx - 1),
                                    lo.y() + d.y() * iy / (ny - 1),
                                    lo.z() + d.z() * iz / (nz - 1));
        }
  };
  // Bed centered on origin, open top.
  sample_box(Vec3(-bed_length / 2, -bed_width / 2, 0.0),
             Vec3(bed_length / 2, bed_width / 2, bed_height), true);
  // Cab ahead of the bed (+x), narrower and taller.
  sample_box(Vec3(bed_length / 2 + 0.2, -bed_width / 3, 0.0),
             Vec3(bed_length / 2 + 1.4, bed_width / 3, bed_height + 0.6),
             false);
  return cloud;
}

// ---------------------------------------------------------------------------
// Watchdog and frame assembly.
// ---------------------------------------------------------------------------

inline std::optional<EmergencyStop> watchdog(const PerceptionFrame& frame) {
  if (frame.intruder_detected) return EmergencyStop{frame.timestamp};
  return std::nullopt;
}

// Ground truth in, PerceptionFrame out. With noise disabled the frame is an
// exact copy of the world state.
inline PerceptionFrame sense(const terrain::HeightMap& map,
                             const terrain::RockRegistry& rocks,
                             MaterialClass true_material, bool intruder,
                             double timestamp, const NoiseParams& noise,
                             std::uint64_t seed) {
  PerceptionFrame f;
  f.timestamp = timestamp;
  f.intruder_detected = intruder;
  f.mask_width = map.width();
  f.mask_height = map.height();
  f.label_mask = map.labels();
  f.rock_boxes = detect_rocks(rocks, noise, seed);
  Eigen::VectorXd feat = Eigen::VectorXd::Zero(kMaterialClassCount);
  feat[static_cast<int>(true_material)] = 1.0;
  if (!noise.disabled()) {
    Rng rng = make_rng(derive_seed(seed, 0x7e37u));
    std::normal_distribution<double> gauss(0.0, 0.1);
    for (int i = 0; i < feat.size(); ++i) feat[i] += gauss(rng);
  }
  f.texture_class = classify_texture(feat, default_texture_centroids());
  return f;
}

// ---------------------------------------------------------------------------
// JSON replay serialization.
// ---------------------------------------------------------------------------

inline json box_to_json(const Box3D& b) {
  return {{"pose", geometry::pose_to_json(b.center_pose)},
          {"half_extents",
           {b.half_extents.x(), b.half_extents.y(), b.half_extents.z()}}};
}

inline Box3D box_from_json(const json& j) {
  Box3D b;
  b.center_pose = geometry::pose_from_json(j.at("pose"));
  const json& h = j.at("half_extents");
  b.half_extents = Vec3(h[0], h[1], h[2]);
  b.validate();
  return b;
}

inline json frame_to_json(const PerceptionFrame& f) {
  json j;
  j["timestamp"] = f.timestamp;
  j["intruder_detected"] = f.intruder_detected;
  j["texture_class"] = material_name(f.texture_class);
  j["rock_boxes"] = json::array();
  for (const Box3D& b : f.rock_boxes) j["rock_boxes"].push_back(box_to_json(b));
  if (f.truck_pose) j["truck_pose"] = geometry::pose_to_json(*f.truck_pose);
  j["mask_width"] = f.mask_width;
  j["mask_height"] = f.mask_height;
  json rle = json::array();
  std::size_t i = 0;
  while (i < f.label_mask.size()) {
    std::size_t k = i;
    while (k < f.label_mask.size() && f.label_mask[k] == f.label_mask[i]) ++k;
    rle.push_back({static_cast<int>(f.label_mask[i]), k - i});
    i = k;
  }
  j["label_mask_rle"] = rle;
  return j;
}

inline PerceptionFrame frame_from_json(const json& j) {
  PerceptionFrame f;
  f.timestamp = j.at("timestamp");
  f.intruder_detected = j.at("intruder_detected");
  f.texture_class = material_from_name(j.at("texture_class"));
  for (const json& b : j.at("rock_boxes")) f.rock_boxes.push_back(box_from_json(b));
  if (j.contains("truck_pose"))
    f.truck_pose = geometry::pose_from_json(j.at("truck_pose"));
  f.mask_width = j.at("mask_width");
  f.mask_height = j.at("mask_height");
  for (const json& run : j.at("label_mask_rle")) {
    terrain::CellLabel l = static_cast<terrain::CellLabel>(run[0].get<int>());
    std::size_t n = run[1].get<std::size_t>();
    f.label_mask.insert(f.label_mask.end(), n, l);
  }
  if (f.label_mask.size() != static_cast<std::size_t>(f.mask_width) *
                                 static_cast<std::size_t>(f.mask_height))
    throw ConfigError("label_mask_rle", "does not cover mask");
  return f;
}

}  // namespace aes::perception
