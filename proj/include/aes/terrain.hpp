#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aes/common.hpp"
#include "aes/geometry.hpp"

namespace aes::terrain {

using geometry::Box3D;
using geometry::Vec2;
using geometry::Vec3;
using nlohmann::json;

enum class CellLabel : std::uint8_t { Soil = 0, Water, Impurity, Rock, Empty };

inline const char* label_name(CellLabel l) {
  switch (l) {
    case CellLabel::Soil: return "Soil";
    case CellLabel::Water: return "Water";
    case CellLabel::Impurity: return "Impurity";
    case CellLabel::Rock: return "Rock";
    case CellLabel::Empty: return "Empty";
  }
  return "?";
}

struct CellIndex {
  int x = 0;
  int y = 0;
  bool operator==(const CellIndex&) const = default;
};

// One bucket-tip contact cell and how deep below the current surface the tip
// sweeps there.
struct FootprintCell {
  CellIndex cell;
  double depth = 0.0;  // meters below current surface, > 0
};

struct ScoopResult {
  double volume = 0.0;  // cubic meters actually removed
  std::set<CellLabel> contacted_labels;
};

// ---------------------------------------------------------------------------
// 2.5D grid heightmap with per-cell semantic labels. Elevations are meters
// above the datum; material below the datum is bedrock and cannot be scooped.
// ---------------------------------------------------------------------------

class HeightMap {
public:
  HeightMap() = default;
  HeightMap(Vec2 origin, double cell_size, int width, int height,
            double initial_elevation = 0.0,
            CellLabel initial_label = CellLabel::Soil, double datum = 0.0)
      : origin_(origin),
        cell_size_(cell_size),
        width_(width),
        height_(height),
        datum_(datum),
        elevation_(static_cast<std::size_t>(width * height),
                   initial_elevation),
        label_(static_cast<std::size_t>(width * height), initial_label) {
    if (!(cell_size > 0)) throw ConfigError("cell_size", "must be > 0");
    if (width <= 0 || height <= 0)
      throw ConfigError("width/height", "must be positive");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  double cell_size() const { return cell_size_; }
  const Vec2& origin() const { return origin_; }
  double datum() const { return datum_; }

  bool in_bounds(CellIndex c) const {
    return c.x >= 0 && c.x < width_ && c.y >= 0 && c.y < height_;
  }

  double elevation(CellIndex c) const { return elevation_[index(c)]; }
  void set_elevation(CellIndex c, double e) { elevation_[index(c)] = e; }
  CellLabel label(CellIndex c) const { return label_[index(c)]; }
  void set_label(CellIndex c, CellLabel l) { label_[index(c)] = l; }

  const std::vector<double>& elevations() const { return elevation_; }
  const std::vector<CellLabel>& labels() const { return label_; }

  CellIndex world_to_cell(const Vec2& p) const {
    return {static_cast<int>(std::floor((p.x() - origin_.x()) / cell_size_)),
            static_cast<int>(std::floor((p.y() - origin_.y()) / cell_size_))};
  }

  Vec2 cell_center(CellIndex c) const {
    return {origin_.x() + (c.x + 0.5) * cell_size_,
            origin_.y() + (c.y + 0.5) * cell_size_};
  }

  // Surface elevation at a world point (cell lookup, clamped to edges).
  double surface_at(const Vec2& p) const {
    CellIndex c = world_to_cell(p);
    c.x = std::clamp(c.x, 0, width_ - 1);
    c.y = std::clamp(c.y, 0, height_ - 1);
    return elevation(c);
  }

  // Total material volume above the datum.
  double total_volume() const {
    double s = 0.0;
    for (double e : elevation_) s += e - datum_;
    return s * cell_size_ * cell_size_;
  }

  double cell_area() const { return cell_size_ * cell_size_; }

private:
  std::size_t index(CellIndex c) const {
    if (!in_bounds(c)) {
      throw OutOfBounds("cell (" + std::to_string(c.x) + "," +
                        std::to_string(c.y) + ") outside " +
                        std::to_string(width_) + "x" + std::to_string(height_));
    }
    return static_cast<std::size_t>(c.y) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(c.x);
  }

  Vec2 origin_ = Vec2::Zero();
  double cell_size_ = 0.25;
  int width_ = 0;
  int height_ = 0;
  double datum_ = 0.0;
  std::vector<double> elevation_;
  std::vector<CellLabel> label_;
};

// ---------------------------------------------------------------------------
// Scoop: lower each footprint cell by min(requested depth, material above
// datum), truncated so the total removed volume never exceeds
// capacity * overfill. Truncation order is shallowest-request first, so the
// deepest cells are the ones cut when the bucket fills up.
// Cells lowered all the way to the datum expose a fresh soil face.
// ---------------------------------------------------------------------------

inline ScoopResult scoop(HeightMap& map, const std::vector<FootprintCell>& footprint,
                         double capacity, double overfill = 1.1) {
  ScoopResult result;
  if (footprint.empty()) return result;

  struct Entry {
    CellIndex cell;
    double avail;  // removable depth at this cell
    std::size_t order;
  };
  std::vector<Entry> entries;
  entries.reserve(footprint.size());
  for (std::size_t i = 0; i < footprint.size(); ++i) {
    const FootprintCell& fc = footprint[i];
    if (!map.in_bounds(fc.cell)) {
      throw OutOfBounds("scoop: footprint cell out of bounds");
    }
    if (fc.depth <= 0.0) continue;
    result.contacted_labels.insert(map.label(fc.cell));
    double avail = std::min(fc.depth, map.elevation(fc.cell) - map.datum());
    if (avail <= 0.0) continue;
    entries.push_back({fc.cell, avail, i});
  }

  std::stable_sort(entries.begin(), entries.end(),
                   [](const Entry& a, const Entry& b) { return a.avail < b.avail; });

  const double area = map.cell_area();
  double budget = capacity * overfill;
  for (const Entry& e : entries) {
    if (budget <= 0.0) break;
    double take_depth = std::min(e.avail, budget / area);
    double new_elev = map.elevation(e.cell) - take_depth;
    map.set_elevation(e.cell, new_elev);
    if (new_elev <= map.datum() + 1e-12) {
      map.set_label(e.cell, CellLabel::Soil);  // fresh face
    }
    double vol = take_depth * area;
    result.volume += vol;
    budget -= vol;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Dump: deposit `volume` on the center cell, then relax slopes above the
// angle of repose by moving material downhill. Transfers are symmetric so
// the total volume is conserved exactly; cells never drop below their
// pre-dump elevation, so pre-existing steep terrain is left alone.
// ---------------------------------------------------------------------------

inline void dump(HeightMap& map, const Vec2& center_xy, double volume,
                 double repose_deg = 35.0, int max_settle_passes = 50) {
  if (volume < 0.0) throw ConfigError("volume", "must be >= 0");
  CellIndex c = map.world_to_cell(center_xy);
  if (!map.in_bounds(c)) throw OutOfBounds("dump: center out of bounds");
  if (volume == 0.0) return;

  std::vector<double> floor_elev(map.elevations());
  map.set_elevation(c, map.elevation(c) + volume / map.cell_area());

  const double tan_repose = std::tan(deg2rad(repose_deg));
  const double tol = 1e-9;
  static constexpr int kDx[8] = {1, -1, 0, 0, 1, 1, -1, -1};
  static constexpr int kDy[8] = {0, 0, 1, -1, 1, -1, 1, -1};

  for (int pass = 0; pass < max_settle_passes; ++pass) {
    bool moved = false;
    for (int y = 0; y < map.height(); ++y) {
      for (int x = 0; x < map.width(); ++x) {
        CellIndex a{x, y};
        std::size_t ai = static_cast<std::size_t>(y) *
                             static_cast<std::size_t>(map.width()) +
                         static_cast<std::size_t>(x);
        double spare = map.elevation(a) - floor_elev[ai];
        if (spare <= tol) continue;  // nothing dumped here to shed
        for (int k = 0; k < 8; ++k) {
          CellIndex b{x + kDx[k], y + kDy[k]};
          if (!map.in_bounds(b)) continue;
          double dist = map.cell_size() * ((k < 4) ? 1.0 : std::sqrt(2.0));
          double limit = tan_repose * dist;
          double excess = map.elevation(a) - map.elevation(b) - limit;
          if (excess <= tol) continue;
          double t = std::min(excess / 2.0,
                              map.elevation(a) - floor_elev[ai]);
          if (t <= tol) continue;
          map.set_elevation(a, map.elevation(a) - t);
          map.set_elevation(b, map.elevation(b) + t);
          moved = true;
          spare = map.elevation(a) - floor_elev[ai];
          if (spare <= tol) break;
        }
      }
    }
    if (!moved) break;
  }
}

// ---------------------------------------------------------------------------
// Observation window: fixed-size elevation patch around a world point,
// edge-padded with the nearest valid cell, normalized to zero mean.
// ---------------------------------------------------------------------------

struct Patch {
  int width = 0;
  int height = 0;
  CellIndex origin;              // cell index of patch (0,0), may be off-map
  Vec2 world_center = Vec2::Zero();
  Vec2 world_half_extents = Vec2::Zero();
  double mean = 0.0;             // removed mean, meters
  Eigen::VectorXd values;        // row-major, zero-mean

  CellIndex patch_to_map(int px, int py) const {
    return {origin.x + px, origin.y + py};
  }
};

inline Patch observation_window(const HeightMap& map, const Vec2& center_xy,
                                int w, int h) {
  if (w <= 0 || h <= 0) throw ConfigError("window", "must be positive");
  Patch patch;
  patch.width = w;
  patch.height = h;
  CellIndex cc = map.world_to_cell(center_xy);
  patch.origin = {cc.x - w / 2, cc.y - h / 2};
  patch.values.resize(w * h);
  double sum = 0.0;
  for (int py = 0; py < h; ++py) {
    for (int px = 0; px < w; ++px) {
      CellIndex c = patch.patch_to_map(px, py);
      c.x = std::clamp(c.x, 0, map.width() - 1);   // edge padding
      c.y = std::clamp(c.y, 0, map.height() - 1);
      double e = map.elevation(c);
      patch.values[py * w + px] = e;
      sum += e;
    }
  }
  patch.mean = sum / static_cast<double>(w * h);
  patch.values.array() -= patch.mean;
  Vec2 lo = map.cell_center(patch.origin);
  Vec2 hi = map.cell_center({patch.origin.x + w - 1, patch.origin.y + h - 1});
  patch.world_center = (lo + hi) / 2.0;
  patch.world_half_extents = (hi - lo) / 2.0;
  return patch;
}

// ---------------------------------------------------------------------------
// Rocks: placing raises the covered cells to the box top and relabels them;
// removal restores the saved ground exactly. The registry doubles as the
// ground truth for simulated perception.
// ---------------------------------------------------------------------------

struct RockEntry {
  Box3D box;
  bool active = false;
  std::vector<std::pair<CellIndex, double>> saved_elevation;
  std::vector<std::pair<CellIndex, CellLabel>> saved_label;
};

class RockRegistry {
public:
  // Returns (rock id, volume added to the map).
  std::pair<int, double> place(HeightMap& map, const Box3D& box) {
    box.validate();
    RockEntry entry;
    entry.box = box;
    entry.active = true;

    // Box top in world z.
    double top = box.center_pose.translation.z();
    for (int sx : {-1, 1})
      for (int sy : {-1, 1})
        for (int sz : {-1, 1}) {
          Vec3 corner = box.center_pose.apply(
              Vec3(sx * box.half_extents.x(), sy * box.half_extents.y(),
                   sz * box.half_extents.z()));
          top = std::max(top, corner.z());
        }

    // Cells whose center lies inside the box footprint.
    Vec3 c = box.center_pose.translation;
    double reach = box.half_extents.head<2>().norm() + map.cell_size();
    CellIndex lo = map.world_to_cell(Vec2(c.x() - reach, c.y() - reach));
    CellIndex hi = map.world_to_cell(Vec2(c.x() + reach, c.y() + reach));
    double volume_added = 0.0;
    bool any = false;
    for (int y = lo.y; y <= hi.y; ++y) {
      for (int x = lo.x; x <= hi.x; ++x) {
        CellIndex cell{x, y};
        if (!map.in_bounds(cell)) continue;
        Vec2 cw = map.cell_center(cell);
        Vec3 local = box.center_pose.rotation.transpose() *
                     (Vec3(cw.x(), cw.y(), c.z()) - c);
        if (std::abs(local.x()) > box.half_extents.x() ||
            std::abs(local.y()) > box.half_extents.y())
          continue;
        any = true;
        entry.saved_elevation.emplace_back(cell, map.elevation(cell));
        entry.saved_label.emplace_back(cell, map.label(cell));
        if (top > map.elevation(cell)) {
          volume_added += (top - map.elevation(cell)) * map.cell_area();
          map.set_elevation(cell, top);
        }
        map.set_label(cell, CellLabel::Rock);
      }
    }
    if (!any) throw OutOfBounds("place_rock: footprint outside map");
    entries_.push_back(std::move(entry));
    return {static_cast<int>(entries_.size()) - 1, volume_added};
  }

  // Returns the volume removed from the map (>= 0).
  double remove(HeightMap& map, int id) {
    RockEntry& e = entry_at(id);
    if (!e.active) throw ConfigError("rock", "already removed");
    double removed = 0.0;
    for (const auto& [cell, elev] : e.saved_elevation) {
      removed += (map.elevation(cell) - elev) * map.cell_area();
      map.set_elevation(cell, elev);
    }
    for (const auto& [cell, lab] : e.saved_label) map.set_label(cell, lab);
    e.active = false;
    return removed;
  }

  std::vector<Box3D> active_boxes() const {
    std::vector<Box3D> out;
    for (const RockEntry& e : entries_)
      if (e.active) out.push_back(e.box);
    return out;
  }

  std::vector<int> active_ids() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].active) out.push_back(static_cast<int>(i));
    return out;
  }

  const Box3D& box(int id) const { return entry_at(id).box; }
  bool active(int id) const { return entry_at(id).active; }
  std::size_t size() const { return entries_.size(); }

  // Id of the active rock nearest to a world point, or -1.
  int nearest_active(const Vec2& p) const {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (!entries_[i].active) continue;
      double d =
          (entries_[i].box.center_pose.translation.head<2>() - p).norm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(i);
      }
    }
    return best;
  }

private:
  RockEntry& entry_at(int id) {
    if (id < 0 || id >= static_cast<int>(entries_.size()))
      throw ConfigError("rock", "unknown id " + std::to_string(id));
    return entries_[static_cast<std::size_t>(id)];
  }
  const RockEntry& entry_at(int id) const {
    return const_cast<RockRegistry*>(this)->entry_at(id);
  }

  std::vector<RockEntry> entries_;
};

// Returns the new rock's id. Volume bookkeeping is on the registry methods.
inline int place_rock(HeightMap& map, RockRegistry& rocks, const Box3D& box) {
  return rocks.place(map, box).first;
}

// Restores the ground saved at placement time.
inline void remove_rock(HeightMap& map, RockRegistry& rocks, int id) {
  rocks.remove(map, id);
}

// ---------------------------------------------------------------------------
// Serialization: elevation grid as CSV plus a JSON sidecar carrying origin,
// cell size, datum and the run-length-encoded label grid.
// ---------------------------------------------------------------------------

inline void save_heightmap(const HeightMap& map, const std::string& csv_path,
                           const std::string& meta_path) {
  std::ofstream csv(csv_path);
  if (!csv) throw Error("save_heightmap: cannot open " + csv_path);
  csv.precision(12);
  for (int y = 0; y < map.height(); ++y) {
    for (int x = 0; x < map.width(); ++x) {
      if (x) csv << ",";
      csv << map.elevation({x, y});
    }
    csv << "\n";
  }

  json meta;
  meta["origin"] = {map.origin().x(), map.origin().y()};
  meta["cell_size"] = map.cell_size();
  meta["datum"] = map.datum();
  meta["width"] = map.width();
  meta["height"] = map.height();
  json rle = json::array();
  const auto& labels = map.labels();
  std::size_t i = 0;
  while (i < labels.size()) {
    std::size_t j = i;
    while (j < labels.size() && labels[j] == labels[i]) ++j;
    rle.push_back({static_cast<int>(labels[i]), j - i});
    i = j;
  }
  meta["labels_rle"] = rle;
  std::ofstream mf(meta_path);
  if (!mf) throw Error("save_heightmap: cannot open " + meta_path);
  mf << meta.dump(2) << "\n";
}

inline HeightMap load_heightmap(const std::string& csv_path,
                                const std::string& meta_path) {
  std::ifstream mf(meta_path);
  if (!mf) throw Error("load_heightmap: cannot open " + meta_path);
  json meta = json::parse(mf);
  HeightMap map(Vec2(meta.at("origin")[0], meta.at("origin")[1]),
                meta.at("cell_size"), meta.at("width"), meta.at("height"), 0.0,
                CellLabel::Soil, meta.at("datum"));

  std::ifstream csv(csv_path);
  if (!csv) throw Error("load_heightmap: cannot open " + csv_path);
  std::string line;
  for (int y = 0; y < map.height(); ++y) {
    if (!std::getline(csv, line))
      throw Error("load_heightmap: truncated grid");
    std::istringstream ss(line);
    std::string cell;
    for (int x = 0; x < map.width(); ++x) {
      if (!std::getline(ss, cell, ','))
        throw Error("load_heightmap: short row");
      map.set_elevation({x, y}, std::stod(cell));
    }
  }

  std::size_t pos = 0;
  for (const auto& run : meta.at("labels_rle")) {
    CellLabel l = static_cast<CellLabel>(run[0].get<int>());
    std::size_t n = run[1].get<std::size_t>();
    for (std::size_t k = 0; k < n; ++k, ++pos) {
      map.set_label({static_cast<int>(pos % map.width()),
                     static_cast<int>(pos / map.width())},
                    l);
    }
  }
  if (pos != static_cast<std::size_t>(map.width()) *
                 static_cast<std::size_t>(map.height())) {
    throw Error("load_heightmap: label RLE does not cover grid");
  }
  return map;
}

}  // namespace aes::terrain
