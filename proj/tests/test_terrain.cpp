#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <set>

#include "aes/aes.hpp"

using namespace aes;
using geometry::Box3D;
using geometry::Vec2;
using geometry::Vec3;
using terrain::CellIndex;
using terrain::CellLabel;
using terrain::FootprintCell;
using terrain::HeightMap;

namespace {

HeightMap flat_map(double cell = 0.5, int n = 20, double elev = 1.0) {
  return HeightMap({0.0, 0.0}, cell, n, n, elev);
}

// Brute-force truncation oracle: remove material shallowest-request first
// until the budget is exhausted, mirroring the documented cut rule.
double truncation_oracle(const HeightMap& map,
                         std::vector<FootprintCell> footprint, double budget) {
  std::stable_sort(
      footprint.begin(), footprint.end(),
      [&](const FootprintCell& a, const FootprintCell& b) {
        double da = std::min(a.depth, map.elevation(a.cell) - map.datum());
        double db = std::min(b.depth, map.elevation(b.cell) - map.datum());
        return da < db;
      });
  double removed = 0.0;
  for (const FootprintCell& fc : footprint) {
    double want =
        std::min(fc.depth, map.elevation(fc.cell) - map.datum());
    double vol = std::max(0.0, want) * map.cell_area();
    removed += std::min(vol, budget - removed);
    if (removed >= budget) break;
  }
  return removed;
}

}  // namespace

TEST_CASE("heightmap construction and indexing") {
  HeightMap map = flat_map();
  REQUIRE(map.width() == 20);
  REQUIRE(map.height() == 20);
  REQUIRE(map.total_volume() == Catch::Approx(20 * 20 * 0.25 * 1.0));

  REQUIRE(map.world_to_cell({0.1, 0.1}) == CellIndex{0, 0});
  REQUIRE(map.world_to_cell({9.9, 9.9}) == CellIndex{19, 19});
  REQUIRE(!map.in_bounds(map.world_to_cell({-0.1, 0.0})));
  REQUIRE_THROWS_AS(map.elevation({20, 0}), OutOfBounds);
  REQUIRE_THROWS_AS(HeightMap({0, 0}, 0.0, 4, 4), ConfigError);

  Vec2 c = map.cell_center({3, 7});
  REQUIRE(c.x() == Catch::Approx(1.75));
  REQUIRE(c.y() == Catch::Approx(3.75));
}

TEST_CASE("scoop basic accounting") {
  SECTION("empty footprint changes nothing") {
    HeightMap map = flat_map();
    double before = map.total_volume();
    terrain::ScoopResult r = terrain::scoop(map, {}, 0.25);
    REQUIRE(r.volume == 0.0);
    REQUIRE(r.contacted_labels.empty());
    REQUIRE(map.total_volume() == Catch::Approx(before));
  }

  SECTION("four half-meter cells at depth 0.2 remove 0.2 cubic meters") {
    HeightMap map = flat_map(0.5);
    std::vector<FootprintCell> fp = {{{1, 1}, 0.2},
                                     {{1, 2}, 0.2},
                                     {{2, 1}, 0.2},
                                     {{2, 2}, 0.2}};
    terrain::ScoopResult r = terrain::scoop(map, fp, 100.0);
    REQUIRE(r.volume == Catch::Approx(4 * 0.25 * 0.2));
    REQUIRE(map.elevation({1, 1}) == Catch::Approx(0.8));
  }

  SECTION("demand above capacity truncates to capacity times overfill") {
    HeightMap map = flat_map(0.5);
    // 8 cells x 0.25 m2 x 0.25 m = 0.5 m3 demanded against a 0.25 m3 bucket.
    std::vector<FootprintCell> fp;
    for (int i = 0; i < 8; ++i) fp.push_back({{3 + i, 5}, 0.25});
    terrain::ScoopResult r = terrain::scoop(map, fp, 0.25, 1.1);
    REQUIRE(r.volume == Catch::Approx(0.275).margin(1e-12));
    double oracle = truncation_oracle(map, fp, 0.275);
    REQUIRE(r.volume == Catch::Approx(oracle).margin(1e-12));
  }

  SECTION("truncation against the brute-force oracle on random footprints") {
    Rng rng = make_rng(42);
    std::uniform_real_distribution<double> ud(0.05, 0.6);
    std::uniform_int_distribution<int> uc(0, 19);
    for (int trial = 0; trial < 50; ++trial) {
      HeightMap map = flat_map(0.5, 20, 0.8);
      std::vector<FootprintCell> fp;
      std::set<std::pair<int, int>> used;
      for (int i = 0; i < 10; ++i) {
        CellIndex c{uc(rng), uc(rng)};
        if (!used.insert({c.x, c.y}).second) continue;
        fp.push_back({c, ud(rng)});
      }
      HeightMap copy = map;
      terrain::ScoopResult r = terrain::scoop(map, fp, 0.25, 1.1);
      double budget = 0.25 * 1.1;
      REQUIRE(r.volume <= budget + 1e-12);
      REQUIRE(r.volume ==
              Catch::Approx(truncation_oracle(copy, fp, budget)).margin(1e-9));
      // Conservation: volume removed equals the elevation delta.
      REQUIRE(copy.total_volume() - map.total_volume() ==
              Catch::Approx(r.volume).margin(1e-9));
    }
  }

  SECTION("scoop never raises any cell") {
    HeightMap map = flat_map(0.5, 20, 0.3);
    HeightMap before = map;
    std::vector<FootprintCell> fp = {{{4, 4}, 0.5}, {{5, 4}, 0.1}};
    terrain::scoop(map, fp, 0.25, 1.1);
    for (int y = 0; y < map.height(); ++y)
      for (int x = 0; x < map.width(); ++x)
        REQUIRE(map.elevation({x, y}) <= before.elevation({x, y}) + 1e-12);
  }

  SECTION("material below the datum is not removable") {
    HeightMap map = flat_map(0.5, 10, 0.1);
    std::vector<FootprintCell> fp = {{{2, 2}, 5.0}};
    terrain::ScoopResult r = terrain::scoop(map, fp, 10.0, 1.0);
    REQUIRE(r.volume == Catch::Approx(0.1 * 0.25));
    REQUIRE(map.elevation({2, 2}) == Catch::Approx(map.datum()));
  }

  SECTION("contacted labels are reported and exposed faces become soil") {
    HeightMap map = flat_map(0.5, 10, 0.4);
    map.set_label({2, 2}, CellLabel::Impurity);
    std::vector<FootprintCell> fp = {{{2, 2}, 1.0}, {{3, 2}, 0.1}};
    terrain::ScoopResult r = terrain::scoop(map, fp, 10.0, 1.0);
    REQUIRE(r.contacted_labels.count(CellLabel::Impurity) == 1);
    REQUIRE(r.contacted_labels.count(CellLabel::Soil) == 1);
    // Fully excavated impurity cell exposes a fresh soil face.
    REQUIRE(map.elevation({2, 2}) == Catch::Approx(map.datum()));
    REQUIRE(map.label({2, 2}) == CellLabel::Soil);
    // Partially dug soil cell keeps its label.
    REQUIRE(map.label({3, 2}) == CellLabel::Soil);
  }

  SECTION("out-of-bounds footprint cell throws") {
    HeightMap map = flat_map();
    std::vector<FootprintCell> fp = {{{25, 0}, 0.1}};
    REQUIRE_THROWS_AS(terrain::scoop(map, fp, 0.25), OutOfBounds);
  }
}

TEST_CASE("dump deposits and settles") {
  SECTION("zero volume changes nothing") {
    HeightMap map = flat_map();
    double before = map.total_volume();
    terrain::dump(map, {5.0, 5.0}, 0.0);
    REQUIRE(map.total_volume() == Catch::Approx(before));
  }

  SECTION("volume is conserved within 1e-9") {
    HeightMap map = flat_map();
    double before = map.total_volume();
    terrain::dump(map, {5.0, 5.0}, 0.7);
    REQUIRE(map.total_volume() - before == Catch::Approx(0.7).margin(1e-9));
  }

  SECTION("repeated dumps respect the angle of repose") {
    HeightMap map = flat_map(0.25, 40, 0.0);
    const double repose = 35.0;
    const double tan_r = std::tan(deg2rad(repose));
    for (int i = 0; i < 6; ++i) {
      terrain::dump(map, {5.0, 5.0}, 0.4, repose);
      // Brute-force slope check over all 8-neighbor pairs.
      for (int y = 0; y < map.height(); ++y) {
        for (int x = 0; x < map.width(); ++x) {
          for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
              if (dx == 0 && dy == 0) continue;
              CellIndex b{x + dx, y + dy};
              if (!map.in_bounds(b)) continue;
              double dist =
                  map.cell_size() * std::hypot(double(dx), double(dy));
              double slope =
                  (map.elevation({x, y}) - map.elevation(b)) / dist;
              REQUIRE(slope <= tan_r + 1e-6);
            }
          }
        }
      }
    }
  }

  SECTION("dump never lowers a cell below its pre-dump elevation") {
    HeightMap map = flat_map(0.25, 40, 0.0);
    Rng rng = make_rng(7);
    std::uniform_real_distribution<double> ue(0.0, 1.5);
    for (int y = 0; y < 40; ++y)
      for (int x = 0; x < 40; ++x) map.set_elevation({x, y}, ue(rng));
    HeightMap before = map;
    terrain::dump(map, {5.0, 5.0}, 1.0);
    for (int y = 0; y < map.height(); ++y)
      for (int x = 0; x < map.width(); ++x)
        REQUIRE(map.elevation({x, y}) >= before.elevation({x, y}) - 1e-12);
  }

  SECTION("out-of-bounds center throws") {
    HeightMap map = flat_map();
    REQUIRE_THROWS_AS(terrain::dump(map, {100.0, 0.0}, 0.1), OutOfBounds);
    REQUIRE_THROWS_AS(terrain::dump(map, {5.0, 5.0}, -0.1), ConfigError);
  }
}

TEST_CASE("observation window") {
  SECTION("flat map gives an all-zero patch") {
    HeightMap map = flat_map(0.5, 20, 2.5);
    terrain::Patch p = terrain::observation_window(map, {5.0, 5.0}, 8, 8);
    REQUIRE(p.values.size() == 64);
    REQUIRE(p.values.cwiseAbs().maxCoeff() < 1e-12);
    REQUIRE(p.mean == Catch::Approx(2.5));
  }

  SECTION("corner window pads with the nearest valid elevation") {
    HeightMap map = flat_map(0.5, 20, 0.0);
    map.set_elevation({0, 0}, 2.0);
    terrain::Patch p = terrain::observation_window(map, {0.0, 0.0}, 8, 8);
    REQUIRE(p.values.size() == 64);
    // The window extends past the map edge; padded entries clone the corner
    // cell, so several patch cells carry the corner's elevation.
    double mx = -1e9;
    int count_hi = 0;
    for (int i = 0; i < p.values.size(); ++i) {
      double v = p.values[i] + p.mean;
      mx = std::max(mx, v);
      if (v > 1.5) ++count_hi;
    }
    REQUIRE(mx == Catch::Approx(2.0));
    REQUIRE(count_hi > 1);
  }

  SECTION("patch mean is removed within 1e-9 on random maps") {
    Rng rng = make_rng(314);
    std::uniform_real_distribution<double> ue(-1.0, 3.0);
    std::uniform_real_distribution<double> up(1.0, 9.0);
    for (int trial = 0; trial < 100; ++trial) {
      HeightMap map = flat_map(0.5, 20, 0.0);
      for (int y = 0; y < 20; ++y)
        for (int x = 0; x < 20; ++x) map.set_elevation({x, y}, ue(rng));
      terrain::Patch p =
          terrain::observation_window(map, {up(rng), up(rng)}, 6, 6);
      REQUIRE(std::abs(p.values.mean()) < 1e-9);
    }
  }
}

TEST_CASE("rock placement and removal") {
  HeightMap map = flat_map(0.5, 20, 0.0);
  terrain::RockRegistry rocks;

  Box3D box;
  box.center_pose.translation = {5.0, 5.0, 0.25};
  box.half_extents = {0.5, 0.5, 0.25};

  SECTION("footprint cells raise to the box top and relabel") {
    HeightMap before = map;
    int id = terrain::place_rock(map, rocks, box);
    int raised = 0;
    for (int y = 0; y < map.height(); ++y)
      for (int x = 0; x < map.width(); ++x)
        if (map.label({x, y}) == CellLabel::Rock) {
          REQUIRE(map.elevation({x, y}) == Catch::Approx(0.5));
          ++raised;
        }
    REQUIRE(raised == 4);

    terrain::remove_rock(map, rocks, id);
    for (int y = 0; y < map.height(); ++y)
      for (int x = 0; x < map.width(); ++x) {
        REQUIRE(map.elevation({x, y}) ==
                Catch::Approx(before.elevation({x, y})).margin(1e-9));
        REQUIRE(map.label({x, y}) == CellLabel::Soil);
      }
  }

  SECTION("degenerate box is rejected upstream") {
    Box3D bad = box;
    bad.half_extents.z() = 0.0;
    REQUIRE_THROWS_AS(terrain::place_rock(map, rocks, bad), ConfigError);
  }

  SECTION("out-of-bounds footprint throws") {
    Box3D far = box;
    far.center_pose.translation = {50.0, 50.0, 0.25};
    REQUIRE_THROWS_AS(terrain::place_rock(map, rocks, far), OutOfBounds);
  }
}

TEST_CASE("scoop dump conservation over random cycles") {
  HeightMap map = flat_map(0.25, 40, 0.6);
  Rng rng = make_rng(2718);
  std::uniform_int_distribution<int> uc(2, 37);
  std::uniform_real_distribution<double> ud(0.05, 0.4);

  double initial = map.total_volume();
  double scooped = 0.0, dumped = 0.0;
  for (int i = 0; i < 200; ++i) {
    if (i % 2 == 0) {
      std::vector<FootprintCell> fp;
      int cx = uc(rng), cy = uc(rng);
      for (int k = 0; k < 3; ++k) fp.push_back({{cx + k, cy}, ud(rng)});
      scooped += terrain::scoop(map, fp, 0.25, 1.1).volume;
    } else {
      double v = ud(rng);
      terrain::dump(map, map.cell_center({uc(rng), uc(rng)}), v);
      dumped += v;
    }
  }
  REQUIRE(initial - scooped + dumped ==
          Catch::Approx(map.total_volume()).margin(1e-6));
}

TEST_CASE("heightmap csv round trip") {
  HeightMap map = flat_map(0.5, 12, 0.0);
  Rng rng = make_rng(12);
  std::uniform_real_distribution<double> ue(-0.5, 2.0);
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 12; ++x) map.set_elevation({x, y}, ue(rng));
  map.set_label({3, 4}, CellLabel::Water);
  map.set_label({5, 6}, CellLabel::Rock);
  map.set_label({5, 7}, CellLabel::Rock);

  terrain::save_heightmap(map, "/tmp/aes_map.csv", "/tmp/aes_map.json");
  HeightMap back = terrain::load_heightmap("/tmp/aes_map.csv",
                                           "/tmp/aes_map.json");
  REQUIRE(back.width() == 12);
  REQUIRE(back.cell_size() == Catch::Approx(0.5));
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 12; ++x) {
      REQUIRE(back.elevation({x, y}) ==
              Catch::Approx(map.elevation({x, y})).margin(1e-9));
      REQUIRE(back.label({x, y}) == map.label({x, y}));
    }
}
