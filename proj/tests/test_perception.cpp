#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "aes/aes.hpp"

using namespace aes;
using geometry::Box3D;
using geometry::PointCloud;
using geometry::Pose3D;
using geometry::Vec2;
using geometry::Vec3;
using perception::MaterialClass;
using perception::NoiseParams;

namespace {

// Two well-separated rocks on a flat pad.
terrain::RockRegistry two_rock_registry(terrain::HeightMap& map) {
  terrain::RockRegistry rocks;
  Box3D a;
  a.center_pose.translation = {3.0, 3.0, 0.3};
  a.half_extents = {0.4, 0.3, 0.3};
  Box3D b;
  b.center_pose.translation = {7.0, 6.0, 0.25};
  b.half_extents = {0.3, 0.5, 0.25};
  terrain::place_rock(map, rocks, a);
  terrain::place_rock(map, rocks, b);
  return rocks;
}

double rotation_angle(const geometry::Mat3& r) {
  double c = std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c);
}

NoiseParams quiet() {
  NoiseParams n;
  n.miss_rate = 0.0;
  n.fp_rate = 0.0;
  n.sigma_pos = 0.0;
  n.sigma_ext = 0.0;
  n.sigma_scan = 0.0;
  return n;
}

}  // namespace

TEST_CASE("noise parameter defaults and json") {
  NoiseParams n;
  REQUIRE(n.miss_rate == Catch::Approx(0.02));
  REQUIRE(n.fp_rate == Catch::Approx(0.01));
  REQUIRE(n.sigma_pos == Catch::Approx(0.03));
  REQUIRE(n.sigma_ext == Catch::Approx(0.05));
  REQUIRE(n.sigma_scan == Catch::Approx(0.01));
  REQUIRE(!n.disabled());
  REQUIRE(quiet().disabled());

  NoiseParams back = perception::noise_from_json(perception::noise_to_json(n));
  REQUIRE(back.miss_rate == n.miss_rate);
  REQUIRE(back.sigma_scan == n.sigma_scan);
  REQUIRE(back.fp_min.x() == n.fp_min.x());

  REQUIRE_THROWS_AS(perception::noise_from_json({{"miss_rate", 1.5}}),
                    ConfigError);
  REQUIRE_THROWS_AS(perception::noise_from_json({{"sigma_pos", -0.1}}),
                    ConfigError);
}

TEST_CASE("rock detection") {
  terrain::HeightMap map({0.0, 0.0}, 0.5, 24, 24, 0.0);
  terrain::RockRegistry rocks = two_rock_registry(map);

  SECTION("zero noise returns exactly the true boxes") {
    std::vector<Box3D> dets = perception::detect_rocks(rocks, quiet(), 99);
    REQUIRE(dets.size() == 2);
    std::vector<Box3D> truth = rocks.active_boxes();
    for (std::size_t i = 0; i < dets.size(); ++i) {
      REQUIRE((dets[i].center_pose.translation -
               truth[i].center_pose.translation)
                  .norm() == 0.0);
      REQUIRE((dets[i].half_extents - truth[i].half_extents).norm() == 0.0);
    }
  }

  SECTION("certain miss rate returns nothing") {
    NoiseParams n = quiet();
    n.miss_rate = 1.0;
    REQUIRE(perception::detect_rocks(rocks, n, 7).empty());
  }

  SECTION("identical seed gives identical detections") {
    NoiseParams n;  // defaults, all noise channels active
    std::vector<Box3D> a = perception::detect_rocks(rocks, n, 1234);
    std::vector<Box3D> b = perception::detect_rocks(rocks, n, 1234);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      REQUIRE(a[i].center_pose.translation == b[i].center_pose.translation);
      REQUIRE(a[i].half_extents == b[i].half_extents);
    }
  }

  SECTION("center noise statistics match the configured sigma") {
    NoiseParams n = quiet();
    n.sigma_pos = 0.05;
    double sum_norm = 0.0, sum_abs = 0.0;
    int n_boxes = 0, n_coords = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      std::vector<Box3D> dets = perception::detect_rocks(rocks, n, seed);
      REQUIRE(dets.size() == 2);
      std::vector<Box3D> truth = rocks.active_boxes();
      for (std::size_t i = 0; i < 2; ++i) {
        Vec3 d = dets[i].center_pose.translation -
                 truth[i].center_pose.translation;
        sum_norm += d.norm();
        ++n_boxes;
        for (int k = 0; k < 3; ++k) {
          sum_abs += std::abs(d[k]);
          ++n_coords;
        }
      }
    }
    // Per-coordinate mean absolute error sigma*sqrt(2/pi) ~ 0.0399.
    double mean_coord = sum_abs / n_coords;
    REQUIRE(mean_coord < 0.06);
    REQUIRE(mean_coord ==
            Catch::Approx(0.05 * std::sqrt(2.0 / kPi)).epsilon(0.05));
    // 3D norm mean for isotropic Gaussian is 2*sigma*sqrt(2/pi) ~ 0.0798.
    REQUIRE(sum_norm / n_boxes ==
            Catch::Approx(2.0 * 0.05 * std::sqrt(2.0 / kPi)).epsilon(0.05));
  }

  SECTION("recall tracks one minus the miss rate within two percent") {
    terrain::HeightMap big({0.0, 0.0}, 0.5, 40, 40, 0.0);
    terrain::RockRegistry many;
    for (int i = 0; i < 10; ++i) {
      Box3D r;
      r.center_pose.translation = {2.0 + 1.6 * i, 10.0, 0.2};
      r.half_extents = {0.3, 0.3, 0.2};
      terrain::place_rock(big, many, r);
    }
    NoiseParams n = quiet();
    n.miss_rate = 0.1;
    long detected = 0, possible = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      detected += static_cast<long>(
          perception::detect_rocks(many, n, seed).size());
      possible += 10;
    }
    double recall = double(detected) / double(possible);
    REQUIRE(recall == Catch::Approx(1.0 - n.miss_rate).margin(0.02));
  }

  SECTION("false positives appear inside the configured region") {
    terrain::RockRegistry empty_reg;
    NoiseParams n = quiet();
    n.fp_rate = 2.0;
    n.fp_min = {1.0, 2.0};
    n.fp_max = {4.0, 6.0};
    long total = 0;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      for (const Box3D& b : perception::detect_rocks(empty_reg, n, seed)) {
        REQUIRE(b.center_pose.translation.x() >= 1.0);
        REQUIRE(b.center_pose.translation.x() <= 4.0);
        REQUIRE(b.center_pose.translation.y() >= 2.0);
        REQUIRE(b.center_pose.translation.y() <= 6.0);
        ++total;
      }
    }
    // Poisson(2) over 200 frames: mean count within 20%.
    REQUIRE(double(total) / 200.0 == Catch::Approx(2.0).epsilon(0.2));
  }
}

TEST_CASE("texture classification") {
  std::vector<Eigen::VectorXd> cents = perception::default_texture_centroids();
  REQUIRE(cents.size() == std::size_t(perception::kMaterialClassCount));

  SECTION("exact centroid maps to its class") {
    for (int i = 0; i < perception::kMaterialClassCount; ++i) {
      REQUIRE(perception::classify_texture(cents[i], cents) ==
              static_cast<MaterialClass>(i));
    }
  }

  SECTION("equidistant between classes 0 and 3 resolves to 0") {
    Eigen::VectorXd mid = 0.5 * (cents[0] + cents[3]);
    REQUIRE(perception::classify_texture(mid, cents) == MaterialClass::DrySoil);
  }

  SECTION("dimension mismatch throws") {
    Eigen::VectorXd bad = Eigen::VectorXd::Zero(3);
    REQUIRE_THROWS_AS(perception::classify_texture(bad, cents), ShapeError);
    REQUIRE_THROWS_AS(perception::classify_texture(cents[0], {}), ShapeError);
  }

  SECTION("clustered draws classify correctly at least 99 percent") {
    Rng rng = make_rng(55);
    std::normal_distribution<double> gauss(0.0, 0.1);
    std::uniform_int_distribution<int> uclass(0,
                                              perception::kMaterialClassCount -
                                                  1);
    int correct = 0;
    const int trials = 1000;
    for (int t = 0; t < trials; ++t) {
      int cls = uclass(rng);
      Eigen::VectorXd f = cents[cls];
      for (int i = 0; i < f.size(); ++i) f[i] += gauss(rng);
      if (perception::classify_texture(f, cents) ==
          static_cast<MaterialClass>(cls))
        ++correct;
    }
    REQUIRE(correct >= 990);
  }
}

TEST_CASE("fitness threshold") {
  // Three times the expected RMS of isotropic per-point noise.
  REQUIRE(perception::fitness_threshold(0.01) ==
          Catch::Approx(3.0 * 0.01 * std::sqrt(3.0)));
  REQUIRE(perception::fitness_threshold(0.0) == Catch::Approx(1e-3));
}

TEST_CASE("truck pose tracking") {
  PointCloud templ = perception::make_truck_template();
  REQUIRE(templ.points.size() > 100);

  Pose3D truth;
  truth.rotation = geometry::rotation_about_z(0.4).rotation;
  truth.translation = {6.0, 2.0, 0.0};

  SECTION("known pose with a coarse initial guess lands within tolerance") {
    PointCloud scan = perception::simulate_scan(templ, truth, 0.01, 321);
    perception::TruckPoseTracker tracker(templ);
    Pose3D guess;
    guess.rotation = geometry::rotation_about_z(0.4 + deg2rad(8.0)).rotation;
    guess.translation = {6.04, 1.97, 0.0};
    tracker.reset(guess);
    Pose3D est = tracker.estimate(scan);
    REQUIRE((est.translation - truth.translation).norm() < 0.02);
    REQUIRE(rotation_angle(est.rotation.transpose() * truth.rotation) <
            deg2rad(1.0));
  }

  SECTION("a stationary truck does not drift") {
    perception::TruckPoseTracker tracker(templ);
    Pose3D guess;
    guess.rotation = geometry::rotation_about_z(0.4 + deg2rad(5.0)).rotation;
    guess.translation = {6.03, 2.02, 0.0};
    tracker.reset(guess);
    Pose3D prev;
    for (int frame = 0; frame < 6; ++frame) {
      PointCloud scan =
          perception::simulate_scan(templ, truth, 0.01, 500 + frame);
      Pose3D est = tracker.estimate(scan);
      if (frame > 0) {
        REQUIRE((est.translation - prev.translation).norm() < 1e-3);
        REQUIRE(rotation_angle(est.rotation.transpose() * prev.rotation) <
                1e-3);
      }
      prev = est;
    }
  }

  SECTION("clutter is rejected with the fitness attached") {
    perception::TruckPoseTracker tracker(templ);
    tracker.reset(Pose3D::identity());
    PointCloud junk;
    Rng rng = make_rng(808);
    std::uniform_real_distribution<double> u(-4.0, 4.0);
    for (int i = 0; i < 400; ++i)
      junk.points.emplace_back(u(rng), u(rng), std::abs(u(rng)));
    bool threw = false;
    try {
      tracker.estimate(junk);
    } catch (const PoseRejected& e) {
      threw = true;
      REQUIRE(e.fitness > tracker.threshold());
    }
    REQUIRE(threw);
  }

  SECTION("pose error grows with scan noise") {
    const double sigmas[] = {0.0, 0.01, 0.02, 0.05};
    double mean_err[4] = {0, 0, 0, 0};
    for (int si = 0; si < 4; ++si) {
      double sigma = sigmas[si];
      for (std::uint64_t seed = 0; seed < 50; ++seed) {
        PointCloud scan = perception::simulate_scan(
            templ, truth, sigma, derive_seed(seed, 0xA0 + si));
        Pose3D est = perception::estimate_truck_pose(
            templ, scan, truth, {}, perception::fitness_threshold(sigma));
        mean_err[si] += (est.translation - truth.translation).norm();
      }
      mean_err[si] /= 50.0;
    }
    // Non-decreasing in sigma with 10 percent slack.
    for (int si = 0; si + 1 < 4; ++si)
      REQUIRE(mean_err[si + 1] >= 0.9 * mean_err[si]);
    REQUIRE(mean_err[0] < 1e-6);
    REQUIRE(mean_err[3] > mean_err[0]);
  }
}

TEST_CASE("watchdog") {
  perception::PerceptionFrame f;
  f.timestamp = 12.5;
  f.intruder_detected = false;
  REQUIRE(!perception::watchdog(f).has_value());
  f.intruder_detected = true;
  auto stop = perception::watchdog(f);
  REQUIRE(stop.has_value());
  REQUIRE(stop->timestamp == Catch::Approx(12.5));
}

TEST_CASE("frame assembly") {
  terrain::HeightMap map({0.0, 0.0}, 0.5, 24, 24, 0.0);
  map.set_label({3, 4}, terrain::CellLabel::Water);
  terrain::RockRegistry rocks = two_rock_registry(map);

  SECTION("noise free frame copies ground truth exactly") {
    perception::PerceptionFrame f = perception::sense(
        map, rocks, MaterialClass::Stone, false, 3.0, quiet(), 11);
    REQUIRE(f.mask_width == 24);
    REQUIRE(f.mask_height == 24);
    REQUIRE(f.label_mask == map.labels());
    REQUIRE(f.label_at({3, 4}) == terrain::CellLabel::Water);
    REQUIRE(f.rock_boxes.size() == 2);
    REQUIRE(f.texture_class == MaterialClass::Stone);
    REQUIRE(!f.intruder_detected);
    REQUIRE(f.timestamp == Catch::Approx(3.0));
    REQUIRE_THROWS_AS(f.label_at({24, 0}), OutOfBounds);
  }

  SECTION("same seed same frame") {
    NoiseParams n;  // defaults
    perception::PerceptionFrame a = perception::sense(
        map, rocks, MaterialClass::WetSoil, false, 1.0, n, 77);
    perception::PerceptionFrame b = perception::sense(
        map, rocks, MaterialClass::WetSoil, false, 1.0, n, 77);
    REQUIRE(a.rock_boxes.size() == b.rock_boxes.size());
    REQUIRE(a.texture_class == b.texture_class);
    for (std::size_t i = 0; i < a.rock_boxes.size(); ++i)
      REQUIRE(a.rock_boxes[i].center_pose.translation ==
              b.rock_boxes[i].center_pose.translation);
  }

  SECTION("frame json round trip") {
    perception::PerceptionFrame f = perception::sense(
        map, rocks, MaterialClass::Titanium, true, 9.0, quiet(), 5);
    f.truck_pose = Pose3D::identity();
    f.truck_pose->translation = {1.0, 2.0, 0.0};
    perception::PerceptionFrame back =
        perception::frame_from_json(perception::frame_to_json(f));
    REQUIRE(back.timestamp == f.timestamp);
    REQUIRE(back.intruder_detected);
    REQUIRE(back.texture_class == MaterialClass::Titanium);
    REQUIRE(back.label_mask == f.label_mask);
    REQUIRE(back.rock_boxes.size() == f.rock_boxes.size());
    REQUIRE(back.truck_pose.has_value());
    REQUIRE(back.truck_pose->translation.x() == Catch::Approx(1.0));
  }
}
