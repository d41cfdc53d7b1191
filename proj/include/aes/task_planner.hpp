#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "aes/common.hpp"
#include "aes/geometry.hpp"
#include "aes/kinematics.hpp"
#include "aes/motion.hpp"
#include "aes/perception.hpp"
#include "aes/selection.hpp"
#include "aes/terrain.hpp"

namespace aes::task_planner {

using geometry::Box3D;
using geometry::Pose3D;
using geometry::Vec2;
using geometry::Vec3;
using kinematics::ArmModel;
using kinematics::JointConfig;
using nlohmann::json;

enum class Phase : std::uint8_t {
  Idle = 0,
  Scoop,
  SwingToTruck,
  Dump,
  SwingBack,
  RemoveRock,
  EStop
};

inline const char* phase_name(Phase p) {
  switch (p) {
    case Phase::Idle: return "Idle";
    case Phase::Scoop: return "Scoop";
    case Phase::SwingToTruck: return "SwingToTruck";
    case Phase::Dump: return "Dump";
    case Phase::SwingBack: return "SwingBack";
    case Phase::RemoveRock: return "RemoveRock";
    case Phase::EStop: return "EStop";
  }
  return "?";
}

// Working zone: a bearing sector of the reachable annulus around the base.
// The dig window, drop-site logic and rock triage all consult it.
struct PlannerConfig {
  double tick_dt = 0.1;  // 10 Hz simulated control
  int max_retries = 10;  // masked re-selection budget per decision

  double work_r_min = 2.9;
  double work_r_max = 4.5;
  double work_bearing_min = -0.6;
  double work_bearing_max = 0.6;
  Vec2 dig_center{3.7, 0.0};

  Vec3 truck_dims{4.0, 2.2, 1.6};  // bed length, width, wall height
  double dump_clearance = 0.5;     // bucket above bed walls
  double dump_pitch = -0.5;

  double drop_bearing = -1.25;  // carried rocks go here (away from the truck)
  double drop_margin = 0.6;     // beyond work_r_max when reach allows

  double target_fill = 1.18;  // requested scoop volume / capacity
  double overfill = 1.1;
  double min_travel = 0.3;
  double water_margin = 0.3;  // drag stops this far before water
  double max_dig_depth = 0.95;
  double min_dig_depth = 0.15;
  // Minimum material (cubic meters) the drag line must hold; sweeps over
  // ground this bare are masked and re-selected rather than dug.
  double min_scoop_material = 0.04;

  JointConfig ready_config{0.0, 0.45, -1.4, -1.8};
  std::vector<double> dig_pitches{-2.1, -1.8, -2.4, -1.5, -1.2};

  double bite_dwell = 1.2;     // bucket closing on material, seconds
  double dump_dwell = 4.6;     // material release over the bed
  double grab_dwell = 1.0;
  double release_dwell = 1.0;
  double loaded_speed_factor = 0.67;  // joints slow down under load

  int drag_waypoints = 12;
  int sweep_samples = 40;
  // Ticks to wait before re-planning after a no-valid-target failure.
  int novalid_cooldown_ticks = 50;
  double repose_deg = 35.0;  // settling slope for returned material
};

struct CycleState {
  Phase phase = Phase::Idle;
  double bucket_load = 0.0;  // cubic meters in the bucket
  std::optional<selection::ExcavationTarget> target;
  int cycle_index = 0;
};

struct Decision {
  enum class Type : std::uint8_t { Halt, RemoveRock, Dump, Scoop };
  Type type = Type::Halt;

  selection::ExcavationTarget target;  // Scoop
  Box3D rock;                          // RemoveRock
  Vec2 drop_site = Vec2::Zero();       // RemoveRock
  JointConfig dump_config;             // Dump

  int retries_used = 0;
  int water_hits = 0;
  int impurity_hits = 0;
  bool travel_truncated = false;
  bool used_fallback = false;  // network retries exhausted, argmax rule used
};

// ---------------------------------------------------------------------------
// Zone geometry helpers.
// ---------------------------------------------------------------------------

inline bool point_in_zone(const PlannerConfig& cfg, const Vec2& p) {
  double r = p.norm();
  if (r < cfg.work_r_min || r > cfg.work_r_max) return false;
  double bearing = std::atan2(p.y(), p.x());
  return bearing >= cfg.work_bearing_min && bearing <= cfg.work_bearing_max;
}

inline bool box_in_zone(const PlannerConfig& cfg, const Box3D& box) {
  const Pose3D& pose = box.center_pose;
  if (point_in_zone(cfg, pose.translation.head<2>())) return true;
  for (int sx : {-1, 1}) {
    for (int sy : {-1, 1}) {
      Vec3 corner = pose.apply(Vec3(sx * box.half_extents.x(),
                                    sy * box.half_extents.y(), 0.0));
      if (point_in_zone(cfg, corner.head<2>())) return true;
    }
  }
  return false;
}

// Drop site for carried rocks: outside the working zone, inside reach and the
// map, along the configured drop bearing.
inline Vec2 rock_drop_site(const PlannerConfig& cfg, const ArmModel& model,
                           const terrain::HeightMap& map) {
  // Keep a full meter inside max reach: the drop pose needs IK headroom for
  // a downward bucket pitch, which pulls the wrist short of the tip.
  double radius = std::min(model.max_reach() - 1.0,
                           cfg.work_r_max + cfg.drop_margin);
  for (int attempt = 0; attempt < 8; ++attempt) {
    double bearing = cfg.drop_bearing - 0.25 * attempt;
    Vec2 p{radius * std::cos(bearing), radius * std::sin(bearing)};
    if (!point_in_zone(cfg, p) && map.in_bounds(map.world_to_cell(p)))
      return p;
  }
  throw NoValidTarget("rock_drop_site: no spot outside zone within reach");
}

// ---------------------------------------------------------------------------
// Dump pose: bucket tip over the truck bed centroid, clearance above the
// walls, swing following the truck bearing.
// ---------------------------------------------------------------------------

inline JointConfig dump_pose(const Pose3D& truck_pose, const Vec3& truck_dims,
                             const ArmModel& model, double clearance = 0.5,
                             double pitch = -0.5) {
  Vec3 bed_centroid = truck_pose.apply(Vec3(0.0, 0.0, truck_dims.z()));
  Vec3 tip{bed_centroid.x(), bed_centroid.y(), bed_centroid.z() + clearance};
  double reach_xy = tip.head<2>().norm();
  if (reach_xy > model.max_reach())
    throw Unreachable("dump_pose: truck bed beyond max reach");
  std::vector<double> pitches{pitch, pitch - 0.3, pitch + 0.3, pitch - 0.6, 0.0};
  std::string last_err;
  for (double ph : pitches) {
    try {
      return kinematics::inverse_kinematics(model, tip, ph);
    } catch (const Unreachable& e) {
      last_err = e.what();
    } catch (const LimitViolation& e) {
      last_err = e.what();
    }
  }
  throw Unreachable("dump_pose: no feasible bucket pitch (" + last_err + ")");
}

// ---------------------------------------------------------------------------
// Scoop geometry: IK at the POA and at the drag end, tip below the local
// surface by a depth chosen to request target_fill x capacity. Selection
// treats a target without a dig plan as invalid, because re-querying the
// network on an unchanged map would fail the same way every tick.
// ---------------------------------------------------------------------------

struct DigPlan {
  JointConfig start, end;
  double depth = 0.0;
};

inline std::optional<DigPlan> make_dig_plan(
    const ArmModel& model, const PlannerConfig& cfg,
    const terrain::HeightMap& map, const selection::ExcavationTarget& tgt) {
  Vec2 poa = tgt.poa_xy;
  Vec2 dir = -poa.normalized();
  Vec2 drag_end = poa + dir * tgt.travel_length;

  // Cell count along the drag line fixes the depth for the requested fill.
  double step = map.cell_size() * 0.5;
  int samples =
      std::max(2, static_cast<int>(std::ceil(tgt.travel_length / step)));
  int cells = 0;
  terrain::CellIndex prev{INT32_MIN, INT32_MIN};
  for (int i = 0; i <= samples; ++i) {
    Vec2 p = poa + dir * (tgt.travel_length * i / samples);
    terrain::CellIndex c = map.world_to_cell(p);
    if (map.in_bounds(c) && !(c == prev)) {
      ++cells;
      prev = c;
    }
  }
  if (cells == 0) return std::nullopt;
  double depth = cfg.target_fill * model.bucket_capacity /
                 (static_cast<double>(cells) * map.cell_area());
  depth = std::clamp(depth, cfg.min_dig_depth, cfg.max_dig_depth);

  double surface = map.surface_at(poa);
  double tip_z = std::max(surface - depth, map.datum() + 0.02);
  double tip_z_end =
      std::max(map.surface_at(drag_end) - depth, map.datum() + 0.02);

  for (double pitch : cfg.dig_pitches) {
    try {
      DigPlan plan;
      plan.start = kinematics::inverse_kinematics(
          model, Vec3(poa.x(), poa.y(), tip_z), pitch);
      plan.end = kinematics::inverse_kinematics(
          model, Vec3(drag_end.x(), drag_end.y(), tip_z_end), pitch);
      plan.depth = depth;
      return plan;
    } catch (const Unreachable&) {
    } catch (const LimitViolation&) {
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Scoop target selection with masked re-selection. Masking lowers offending
// cells in the observation to the window minimum and re-runs the network; a
// drag crossing into water is first shortened to stop ahead of it.
// ---------------------------------------------------------------------------

namespace detail {

struct SweepLabels {
  std::vector<terrain::CellIndex> cells;
  int first_water_step = -1;     // index into cells, -1 if none
  bool poa_blocked = false;      // POA cell itself is water/impurity
  bool any_water = false;
  bool any_impurity = false;
};

inline SweepLabels scan_sweep(const perception::PerceptionFrame& frame,
                              const terrain::HeightMap& map, const Vec2& poa,
                              double travel) {
  SweepLabels out;
  Vec2 dir = -poa.normalized();  // drag radially inward toward the base
  double step = map.cell_size() * 0.5;
  int n = std::max(1, static_cast<int>(std::ceil(travel / step)));
  terrain::CellIndex prev{INT32_MIN, INT32_MIN};
  for (int i = 0; i <= n; ++i) {
    Vec2 p = poa + dir * (travel * static_cast<double>(i) / n);
    terrain::CellIndex c = map.world_to_cell(p);
    if (!map.in_bounds(c) || c == prev) continue;
    prev = c;
    out.cells.push_back(c);
    terrain::CellLabel l = frame.label_at(c);
    bool water = l == terrain::CellLabel::Water;
    bool impurity = l == terrain::CellLabel::Impurity;
    if (water && out.first_water_step < 0)
      out.first_water_step = static_cast<int>(out.cells.size()) - 1;
    if ((water || impurity) && i == 0) out.poa_blocked = true;
    out.any_water |= water;
    out.any_impurity |= impurity;
  }
  return out;
}

}  // namespace detail

inline Decision select_scoop_target(const perception::PerceptionFrame& frame,
                                    const terrain::HeightMap& map,
                                    const selection::SelectionNet& net,
                                    const PlannerConfig& cfg,
                                    const ArmModel& model) {
  const selection::SelectionConfig& scfg = net.config();
  terrain::Patch patch = terrain::observation_window(
      map, cfg.dig_center, scfg.window_w, scfg.window_h);

  // Work on the un-normalized window so masking can pin cells to the
  // window minimum.
  Eigen::VectorXd raw = patch.values.array() + patch.mean;

  Decision d;
  d.type = Decision::Type::Scoop;
  std::set<std::pair<int, int>> visited;
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    terrain::Patch view = patch;
    double mean = raw.mean();
    view.values = raw.array() - mean;
    view.mean = mean;
    selection::ExcavationTarget tgt =
        net.apply_transform(net.forward_raw(view.values), view);

    // Clamp into the working sector.
    double r = std::clamp(tgt.poa_xy.norm(), cfg.work_r_min + 0.1,
                          cfg.work_r_max - 0.1);
    double bearing = std::atan2(tgt.poa_xy.y(), tgt.poa_xy.x());
    bearing = std::clamp(bearing, cfg.work_bearing_min + 0.05,
                         cfg.work_bearing_max - 0.05);
    // When masking barely moves the network output, sweep the bearing so
    // retries always explore new ground.
    terrain::CellIndex probe =
        map.world_to_cell(Vec2(r * std::cos(bearing), r * std::sin(bearing)));
    if (attempt > 0 && visited.count({probe.x, probe.y})) {
      double off = 0.15 * ((attempt + 1) / 2) * (attempt % 2 == 1 ? 1.0 : -1.0);
      bearing = std::clamp(bearing + off, cfg.work_bearing_min + 0.05,
                           cfg.work_bearing_max - 0.05);
    }
    tgt.poa_xy = {r * std::cos(bearing), r * std::sin(bearing)};
    {
      terrain::CellIndex pc = map.world_to_cell(tgt.poa_xy);
      visited.insert({pc.x, pc.y});
    }
    tgt.travel_length =
        std::clamp(tgt.travel_length, cfg.min_travel,
                   std::max(cfg.min_travel, r - cfg.work_r_min));

    detail::SweepLabels sweep =
        detail::scan_sweep(frame, map, tgt.poa_xy, tgt.travel_length);
    if (sweep.any_water) ++d.water_hits;
    if (sweep.any_impurity) ++d.impurity_hits;

    if (!sweep.any_water && !sweep.any_impurity) {
      // Barren ground check: a clean sweep with nothing to dig would loop
      // forever filling the bucket with air. Unreachable digs get the same
      // treatment. Mask the spot and look elsewhere.
      double avail = 0.0;
      for (const terrain::CellIndex& c : sweep.cells)
        avail += std::max(0.0, map.elevation(c) - map.datum()) * map.cell_area();
      if (avail >= cfg.min_scoop_material &&
          make_dig_plan(model, cfg, map, tgt)) {
        d.target = tgt;
        return d;
      }
      ++d.retries_used;
      terrain::CellIndex poa_cell = map.world_to_cell(tgt.poa_xy);
      double lo = raw.minCoeff();
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          int px = poa_cell.x + dx - patch.origin.x;
          int py = poa_cell.y + dy - patch.origin.y;
          if (px >= 0 && px < patch.width && py >= 0 && py < patch.height)
            raw[py * patch.width + px] = lo;
        }
      continue;
    }

    // Water ahead but a clean POA: shorten the drag to stop short of it.
    if (!sweep.poa_blocked && sweep.first_water_step > 0) {
      double frac = static_cast<double>(sweep.first_water_step) /
                    static_cast<double>(sweep.cells.size());
      double shortened =
          tgt.travel_length * frac - cfg.water_margin;
      if (shortened >= cfg.min_travel) {
        selection::ExcavationTarget cut = tgt;
        cut.travel_length = shortened;
        detail::SweepLabels recheck =
            detail::scan_sweep(frame, map, cut.poa_xy, cut.travel_length);
        if (!recheck.any_water && !recheck.any_impurity &&
            make_dig_plan(model, cfg, map, cut)) {
          d.target = cut;
          d.travel_truncated = true;
          return d;
        }
      }
    }

    // Mask the offending cells and the POA neighborhood, then re-select.
    ++d.retries_used;
    double lo = raw.minCoeff();
    auto mask_cell = [&](terrain::CellIndex c) {
      int px = c.x - patch.origin.x;
      int py = c.y - patch.origin.y;
      if (px < 0 || px >= patch.width || py < 0 || py >= patch.height) return;
      raw[py * patch.width + px] = lo;
    };
    for (const terrain::CellIndex& c : sweep.cells) {
      terrain::CellLabel l = frame.label_at(c);
      if (l == terrain::CellLabel::Water || l == terrain::CellLabel::Impurity)
        mask_cell(c);
    }
    terrain::CellIndex poa_cell = map.world_to_cell(tgt.poa_xy);
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx)
        mask_cell({poa_cell.x + dx, poa_cell.y + dy});
  }

  // The network extrapolates poorly once the terrain has drifted far from
  // the shapes it was trained on, and a failed selection leaves the terrain
  // unchanged, so the next attempt would fail identically forever. Fall back
  // to the rule the training demonstrations encode, highest eligible cell in
  // the working sector, so diggable material is never stranded.
  struct Cand {
    double elev;
    int order;
    terrain::CellIndex cell;
  };
  std::vector<Cand> cands;
  for (int y = 0; y < map.height(); ++y)
    for (int x = 0; x < map.width(); ++x) {
      terrain::CellIndex c{x, y};
      Vec2 p = map.cell_center(c);
      if (!point_in_zone(cfg, p)) continue;
      terrain::CellLabel l = frame.label_at(c);
      if (l == terrain::CellLabel::Water || l == terrain::CellLabel::Rock ||
          l == terrain::CellLabel::Impurity)
        continue;
      double e = map.elevation(c) - map.datum();
      if (e <= 0.0) continue;
      cands.push_back({e, y * map.width() + x, c});
    }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.elev != b.elev) return a.elev > b.elev;
    return a.order < b.order;
  });
  int tried = 0;
  for (const Cand& cand : cands) {
    if (++tried > 40) break;
    Vec2 poa = map.cell_center(cand.cell);
    double r = poa.norm();
    selection::ExcavationTarget tgt;
    tgt.poa_xy = poa;
    tgt.travel_length = std::max(cfg.min_travel, r - cfg.work_r_min);
    detail::SweepLabels sweep =
        detail::scan_sweep(frame, map, tgt.poa_xy, tgt.travel_length);
    if (sweep.any_water) ++d.water_hits;
    if (sweep.any_impurity) ++d.impurity_hits;
    if (!sweep.any_water && !sweep.any_impurity) {
      double avail = 0.0;
      for (const terrain::CellIndex& c : sweep.cells)
        avail += std::max(0.0, map.elevation(c) - map.datum()) * map.cell_area();
      if (avail >= cfg.min_scoop_material &&
          make_dig_plan(model, cfg, map, tgt)) {
        d.target = tgt;
        d.used_fallback = true;
        return d;
      }
      continue;
    }
    if (!sweep.poa_blocked && sweep.first_water_step > 0) {
      double frac = static_cast<double>(sweep.first_water_step) /
                    static_cast<double>(sweep.cells.size());
      double shortened = tgt.travel_length * frac - cfg.water_margin;
      if (shortened >= cfg.min_travel) {
        selection::ExcavationTarget cut = tgt;
        cut.travel_length = shortened;
        detail::SweepLabels recheck =
            detail::scan_sweep(frame, map, cut.poa_xy, cut.travel_length);
        if (!recheck.any_water && !recheck.any_impurity &&
            make_dig_plan(model, cfg, map, cut)) {
          d.target = cut;
          d.travel_truncated = true;
          d.used_fallback = true;
          return d;
        }
      }
    }
  }
  throw NoValidTarget("select_scoop_target: retries exhausted (" +
                      std::to_string(cfg.max_retries) + ")");
}

// ---------------------------------------------------------------------------
// The decision rule. Priority: Halt over RemoveRock over Dump-when-loaded
// over Scoop.
// ---------------------------------------------------------------------------

inline Decision decide(const perception::PerceptionFrame& frame,
                       const terrain::HeightMap& map,
                       const selection::SelectionNet& net,
                       const CycleState& state, const PlannerConfig& cfg,
                       const ArmModel& model) {
  if (frame.intruder_detected) {
    Decision d;
    d.type = Decision::Type::Halt;
    return d;
  }

  for (const Box3D& box : frame.rock_boxes) {
    if (box_in_zone(cfg, box)) {
      Decision d;
      d.type = Decision::Type::RemoveRock;
      d.rock = box;
      d.drop_site = rock_drop_site(cfg, model, map);
      return d;
    }
  }

  if (state.bucket_load > 0.0 && frame.truck_pose) {
    Decision d;
    d.type = Decision::Type::Dump;
    d.dump_config = dump_pose(*frame.truck_pose, cfg.truck_dims, model,
                              cfg.dump_clearance, cfg.dump_pitch);
    return d;
  }

  return select_scoop_target(frame, map, net, cfg, model);
}

// ---------------------------------------------------------------------------
// Events.
// ---------------------------------------------------------------------------

struct Event {
  long tick = 0;
  double t = 0.0;
  std::string type;
  Phase phase_from = Phase::Idle;
  Phase phase_to = Phase::Idle;
  json payload;
};

inline json event_to_json(const Event& e) {
  json j;
  j["tick"] = e.tick;
  j["t"] = e.t;
  j["type"] = e.type;
  j["phase_from"] = phase_name(e.phase_from);
  j["phase_to"] = phase_name(e.phase_to);
  if (!e.payload.is_null()) j["payload"] = e.payload;
  return j;
}

// ---------------------------------------------------------------------------
// The cycle engine: consumes one PerceptionFrame per tick, executes planned
// trajectories at the joint speed limits (scaled down when loaded), mutates
// the terrain at phase completions, and emits timestamped events.
// ---------------------------------------------------------------------------

class CycleEngine {
public:
  CycleEngine(ArmModel model, PlannerConfig cfg, selection::SelectionNet net,
              motion::PatternWeights weights, motion::StompParams stomp,
              std::uint64_t seed)
      : model_(std::move(model)),
        cfg_(std::move(cfg)),
        net_(std::move(net)),
        weights_(std::move(weights)),
        stomp_(stomp),
        seed_(seed),
        current_(cfg_.ready_config) {}

  const CycleState& state() const { return state_; }
  const JointConfig& current_config() const { return current_; }
  long tick_count() const { return tick_; }
  double sim_time() const { return static_cast<double>(tick_) * cfg_.tick_dt; }

  double scooped_total() const { return scooped_total_; }
  double truck_tally() const { return truck_tally_; }
  double spillage() const { return spillage_; }
  double rock_delta() const { return rock_delta_; }
  int interventions() const { return interventions_; }
  int violations() const { return violations_; }
  const PlannerConfig& config() const { return cfg_; }
  const ArmModel& arm() const { return model_; }

  std::vector<Event> tick(const perception::PerceptionFrame& frame,
                          terrain::HeightMap& map,
                          terrain::RockRegistry& rocks) {
    events_.clear();
    const double t = sim_time();

    if (frame.intruder_detected) {
      if (state_.phase != Phase::EStop) {
        // Abort the cycle: drop all pending motion and mutations.
        segments_.clear();
        seg_elapsed_ = 0.0;
        transition(Phase::EStop, t);
        emit(t, "estop", json{{"at", {current_.swing, current_.boom,
                                      current_.stick, current_.bucket}}});
      }
      ++tick_;
      return std::move(events_);
    }
    if (state_.phase == Phase::EStop) {
      transition(Phase::Idle, t);
      emit(t, "estop_cleared", {});
    }

    if (novalid_cooldown_ > 0) --novalid_cooldown_;
    if (state_.phase == Phase::Idle && segments_.empty() &&
        novalid_cooldown_ == 0) {
      plan_next(frame, map, rocks, t);
    }

    advance(map, rocks, t);
    ++tick_;
    return std::move(events_);
  }

private:
  enum class Completion : std::uint8_t {
    None = 0,
    DoScoop,
    DoDump,
    DoGrab,
    DoDrop
  };

  struct Segment {
    motion::Trajectory traj;  // empty configs = dwell only
    double dwell = 0.0;
    double speed_scale = 1.0;
    Phase phase = Phase::Idle;
    Completion completion = Completion::None;

    double duration() const {
      double move = traj.configs.empty() ? 0.0 : traj.duration() / speed_scale;
      return move + dwell;
    }
  };

  void emit(double t, const std::string& type, json payload) {
    Event e;
    e.tick = tick_;
    e.t = t;
    e.type = type;
    e.phase_from = state_.phase;
    e.phase_to = state_.phase;
    e.payload = std::move(payload);
    events_.push_back(std::move(e));
  }

  void transition(Phase to, double t) {
    if (to == state_.phase) return;
    // Close out the departing phase's duration.
    double dur = t - phase_start_;
    if (state_.phase == Phase::Scoop) cycle_times_.scoop = dur;
    if (state_.phase == Phase::SwingToTruck) cycle_times_.swing_to_truck = dur;
    if (state_.phase == Phase::Dump) cycle_times_.dump = dur;
    if (state_.phase == Phase::SwingBack) cycle_times_.swing_back = dur;

    Event e;
    e.tick = tick_;
    e.t = t;
    e.type = "phase";
    e.phase_from = state_.phase;
    e.phase_to = to;
    events_.push_back(std::move(e));

    bool cycle_done = state_.phase == Phase::SwingBack && to == Phase::Idle;
    state_.phase = to;
    phase_start_ = t;

    if (cycle_done) {
      json p;
      p["cycle"] = state_.cycle_index;
      p["scoop_s"] = cycle_times_.scoop;
      p["swing_to_truck_s"] = cycle_times_.swing_to_truck;
      p["dump_s"] = cycle_times_.dump;
      p["swing_back_s"] = cycle_times_.swing_back;
      p["total_s"] = cycle_times_.scoop + cycle_times_.swing_to_truck +
                     cycle_times_.dump + cycle_times_.swing_back;
      p["volume"] = cycle_times_.volume;
      p["fill_rate"] = cycle_times_.fill_rate;
      emit(t, "cycle_completed", p);
      ++state_.cycle_index;
      cycle_times_ = {};
    }
  }

  std::uint64_t next_plan_seed() { return derive_seed(seed_, ++plan_counter_); }

  // Obstacles the motion planner must respect: every perceived rock except
  // one being carried.
  std::vector<Box3D> planning_obstacles(
      const perception::PerceptionFrame& frame) const {
    if (!carrying_) return frame.rock_boxes;
    std::vector<Box3D> out;
    for (const Box3D& b : frame.rock_boxes) {
      if ((b.center_pose.translation - carried_box_.center_pose.translation)
              .norm() < 0.75)
        continue;
      out.push_back(b);
    }
    return out;
  }

  // STOMP plan between configs; emits obstacle_avoided when the straight-line
  // seed would have violated clearance. Returns false on planning failure
  // (records an intervention). The dig approach is shaped by the learned
  // pattern weights; transport legs pass a zero vector, since the pattern is
  // a digging-style prior and fights detours around obstacles (its features
  // are relative to the leg's end configuration).
  bool plan_move(const JointConfig& from, const JointConfig& to,
                 const std::vector<Box3D>& obstacles, Phase phase,
                 double speed_scale, double dwell, Completion completion,
                 double t, const motion::PatternWeights& pattern) {
    motion::Trajectory seed =
        motion::Trajectory::line(from, to, stomp_.waypoints);
    double seed_cost = 0.0;
    for (double c :
         motion::collision_cost(seed, obstacles, model_, stomp_.clearance))
      seed_cost += c;
    try {
      motion::StompResult plan = motion::stomp_plan(
          model_, from, to, pattern, obstacles, stomp_, next_plan_seed());
      if (seed_cost > 0.0) {
        emit(t, "obstacle_avoided",
             json{{"phase", phase_name(phase)}, {"seed_cost", seed_cost}});
      }
      Segment s;
      // Re-parameterize: the optimizer settles waypoint spacing by cost, not
      // by clock, and a bunched spacing would stretch the shared dt. The
      // geometric path is kept as planned.
      s.traj = motion::retime(plan.trajectory, model_);
      s.dwell = dwell;
      s.speed_scale = speed_scale;
      s.phase = phase;
      s.completion = completion;
      segments_.push_back(std::move(s));
      return true;
    } catch (const motion::PlanningFailed& e) {
      ++interventions_;
      novalid_cooldown_ = cfg_.novalid_cooldown_ticks;
      emit(t, "intervention",
           json{{"reason", "planning_failed"},
                {"phase", phase_name(phase)},
                {"detail", e.what()},
                {"max_penetration", e.max_penetration}});
      segments_.clear();
      return false;
    } catch (const LimitViolation& e) {
      ++interventions_;
      novalid_cooldown_ = cfg_.novalid_cooldown_ticks;
      emit(t, "intervention",
           json{{"reason", "limit_violation"},
                {"phase", phase_name(phase)},
                {"detail", e.what()}});
      segments_.clear();
      return false;
    }
  }

  void push_dwell(Phase phase, double dwell, Completion completion) {
    Segment s;
    s.dwell = dwell;
    s.phase = phase;
    s.completion = completion;
    segments_.push_back(std::move(s));
  }

  void plan_next(const perception::PerceptionFrame& frame,
                 terrain::HeightMap& map, terrain::RockRegistry& rocks,
                 double t) {
    // Loaded with no truck in sight: hold and wait rather than double-fill.
    if (state_.bucket_load > 0.0 && !frame.truck_pose &&
        !frame.intruder_detected) {
      bool rock_pending = false;
      for (const Box3D& b : frame.rock_boxes)
        if (box_in_zone(cfg_, b)) rock_pending = true;
      if (!rock_pending) {
        emit(t, "truck_wait", {});
        return;
      }
    }

    Decision d;
    try {
      d = decide(frame, map, net_, state_, cfg_, model_);
    } catch (const NoValidTarget& e) {
      ++interventions_;
      emit(t, "intervention",
           json{{"reason", "no_valid_target"}, {"detail", e.what()}});
      // Nothing diggable right now; hold off re-planning briefly so a
      // persistent shortage cannot spam one intervention per tick.
      novalid_cooldown_ = cfg_.novalid_cooldown_ticks;
      return;
    } catch (const Unreachable& e) {
      ++interventions_;
      emit(t, "intervention",
           json{{"reason", "unreachable"}, {"detail", e.what()}});
      return;
    } catch (const LimitViolation& e) {
      ++interventions_;
      novalid_cooldown_ = cfg_.novalid_cooldown_ticks;
      emit(t, "intervention",
           json{{"reason", "limit_violation"}, {"detail", e.what()}});
      return;
    }

    switch (d.type) {
      case Decision::Type::Halt:
        return;  // handled by the estop path; nothing to plan
      case Decision::Type::RemoveRock: {
        int id = rocks.nearest_active(d.rock.center_pose.translation.head<2>());
        double dist =
            id >= 0 ? (rocks.box(id).center_pose.translation -
                       d.rock.center_pose.translation)
                          .head<2>()
                          .norm()
                    : std::numeric_limits<double>::infinity();
        if (id < 0 || dist > 1.0) {
          // Perceived box with no real rock behind it.
          ++interventions_;
          emit(t, "intervention",
               json{{"reason", "phantom_rock"},
                    {"at",
                     {d.rock.center_pose.translation.x(),
                      d.rock.center_pose.translation.y()}}});
          return;
        }
        const Box3D& truth = rocks.box(id);
        double top_z = truth.center_pose.translation.z() +
                       truth.half_extents.z() + 0.25;
        JointConfig grab, drop;
        try {
          grab = kinematics::inverse_kinematics(
              model_,
              Vec3(truth.center_pose.translation.x(),
                   truth.center_pose.translation.y(), top_z),
              -1.3);
          Vec2 site = d.drop_site;
          double drop_z = map.surface_at(site) + truth.half_extents.z() + 0.4;
          drop = kinematics::inverse_kinematics(
              model_, Vec3(site.x(), site.y(), drop_z), -1.3);
        } catch (const Error& e) {
          ++interventions_;
          novalid_cooldown_ = cfg_.novalid_cooldown_ticks;
          emit(t, "intervention",
               json{{"reason", "rock_unreachable"}, {"detail", e.what()}});
          return;
        }
        std::vector<Box3D> obstacles = planning_obstacles(frame);
        // Contact with the rock being handled is intended, so neither the
        // grab approach nor the carry leg may treat it as an obstacle.
        std::vector<Box3D> carry_obstacles;
        for (const Box3D& b : obstacles) {
          if ((b.center_pose.translation - truth.center_pose.translation)
                  .head<2>()
                  .norm() > 0.75)
            carry_obstacles.push_back(b);
        }
        if (!plan_move(current_, grab, carry_obstacles, Phase::RemoveRock, 1.0,
                       cfg_.grab_dwell, Completion::DoGrab, t, kTransport))
          return;
        if (!plan_move(grab, drop, carry_obstacles, Phase::RemoveRock,
                       cfg_.loaded_speed_factor, cfg_.release_dwell,
                       Completion::DoDrop, t, kTransport))
          return;
        pending_rock_id_ = id;
        pending_drop_site_ = d.drop_site;
        transition(Phase::RemoveRock, t);
        return;
      }
      case Decision::Type::Dump: {
        std::vector<Box3D> obstacles = planning_obstacles(frame);
        if (!plan_move(current_, d.dump_config, obstacles, Phase::SwingToTruck,
                       cfg_.loaded_speed_factor, 0.0, Completion::None, t,
                       kTransport))
          return;
        push_dwell(Phase::Dump, cfg_.dump_dwell, Completion::DoDump);
        JointConfig ready = cfg_.ready_config;
        if (state_.target) {
          ready.swing =
              std::atan2(state_.target->poa_xy.y(), state_.target->poa_xy.x());
        }
        if (!plan_move(d.dump_config, ready, obstacles, Phase::SwingBack, 1.0,
                       0.0, Completion::None, t, kTransport))
          return;
        transition(Phase::SwingToTruck, t);
        return;
      }
      case Decision::Type::Scoop: {
        if (d.used_fallback) {
          emit(t, "selector_fallback",
               json{{"retries", d.retries_used},
                    {"poa", {d.target.poa_xy.x(), d.target.poa_xy.y()}}});
        }
        if (d.water_hits > 0 || d.travel_truncated) {
          emit(t, "water_mask_retry",
               json{{"retries", d.retries_used},
                    {"truncated", d.travel_truncated},
                    {"water_hits", d.water_hits}});
        }
        if (d.impurity_hits > 0) {
          emit(t, "impurity_mask_retry",
               json{{"retries", d.retries_used},
                    {"impurity_hits", d.impurity_hits}});
        }
        std::optional<DigPlan> dig =
            make_dig_plan(model_, cfg_, map, d.target);
        if (!dig) {
          ++interventions_;
          novalid_cooldown_ = cfg_.novalid_cooldown_ticks;
          emit(t, "intervention",
               json{{"reason", "dig_unreachable"},
                    {"poa", {d.target.poa_xy.x(), d.target.poa_xy.y()}}});
          return;
        }
        std::vector<Box3D> obstacles = planning_obstacles(frame);
        if (!plan_move(current_, dig->start, obstacles, Phase::Scoop, 1.0, 0.0,
                       Completion::None, t, weights_))
          return;
        // Drag: straight in joint space; the sweep footprint uses the same
        // interpolation, so accounting matches motion.
        Segment drag;
        drag.traj = motion::Trajectory::line(dig->start, dig->end,
                                             cfg_.drag_waypoints);
        drag.traj.dt = motion::min_feasible_dt(drag.traj, model_);
        drag.phase = Phase::Scoop;
        drag.dwell = cfg_.bite_dwell;
        drag.completion = Completion::DoScoop;
        segments_.push_back(std::move(drag));
        pending_dig_ = *dig;

        JointConfig carry = cfg_.ready_config;
        carry.swing = dig->end.swing;
        Segment lift;
        lift.traj =
            motion::Trajectory::line(dig->end, carry, cfg_.drag_waypoints);
        lift.traj.dt = motion::min_feasible_dt(lift.traj, model_);
        lift.phase = Phase::Scoop;
        lift.speed_scale = cfg_.loaded_speed_factor;
        segments_.push_back(std::move(lift));

        state_.target = d.target;
        transition(Phase::Scoop, t);
        return;
      }
    }
  }

  void advance(terrain::HeightMap& map, terrain::RockRegistry& rocks,
               double t) {
    if (segments_.empty()) return;
    seg_elapsed_ += cfg_.tick_dt;
    Segment& seg = segments_.front();
    if (state_.phase != seg.phase) transition(seg.phase, t);

    // Track the arm position along the active trajectory.
    if (!seg.traj.configs.empty()) {
      double move_t = std::min(seg_elapsed_ * seg.speed_scale,
                               seg.traj.duration());
      double idx = move_t / seg.traj.dt;
      std::size_t k0 = std::min(static_cast<std::size_t>(idx),
                                seg.traj.configs.size() - 2);
      double frac = std::clamp(idx - static_cast<double>(k0), 0.0, 1.0);
      current_ = JointConfig::from_vec(
          seg.traj.configs[k0].vec() +
          frac * (seg.traj.configs[k0 + 1].vec() - seg.traj.configs[k0].vec()));
    }

    if (seg_elapsed_ + 1e-9 < seg.duration()) return;

    // Segment complete.
    if (!seg.traj.configs.empty()) current_ = seg.traj.configs.back();
    Completion completion = seg.completion;
    Phase done_phase = seg.phase;
    segments_.pop_front();
    seg_elapsed_ = 0.0;

    switch (completion) {
      case Completion::None:
        break;
      case Completion::DoScoop: {
        auto footprint = kinematics::bucket_sweep_footprint(
            model_, map, pending_dig_.start, pending_dig_.end,
            cfg_.sweep_samples);
        terrain::ScoopResult res = terrain::scoop(
            map, footprint, model_.bucket_capacity, cfg_.overfill);
        if (res.contacted_labels.count(terrain::CellLabel::Water)) {
          ++violations_;
          emit(t, "violation", json{{"what", "scooped_water"}});
        }
        state_.bucket_load += res.volume;
        scooped_total_ += res.volume;
        cycle_times_.volume = res.volume;
        cycle_times_.fill_rate =
            100.0 * res.volume / model_.bucket_capacity;
        emit(t, "scoop_completed",
             json{{"volume", res.volume},
                  {"fill_rate", cycle_times_.fill_rate},
                  {"depth", pending_dig_.depth}});
        break;
      }
      case Completion::DoDump: {
        truck_tally_ += state_.bucket_load;
        emit(t, "dump_completed", json{{"volume", state_.bucket_load}});
        state_.bucket_load = 0.0;
        break;
      }
      case Completion::DoGrab: {
        if (pending_rock_id_ >= 0 && rocks.active(pending_rock_id_)) {
          carried_box_ = rocks.box(pending_rock_id_);
          carried_removed_volume_ = rocks.remove(map, pending_rock_id_);
          carrying_ = true;
          emit(t, "rock_removed",
               json{{"rock",
                     {carried_box_.center_pose.translation.x(),
                      carried_box_.center_pose.translation.y()}},
                    {"volume", carried_removed_volume_}});
        }
        break;
      }
      case Completion::DoDrop: {
        if (carrying_) {
          Box3D dropped = carried_box_;
          double ground = map.surface_at(pending_drop_site_);
          dropped.center_pose.translation =
              Vec3(pending_drop_site_.x(), pending_drop_site_.y(),
                   ground + dropped.half_extents.z());
          auto [new_id, added] = rocks.place(map, dropped);
          rock_delta_ += added - carried_removed_volume_;
          carrying_ = false;
          emit(t, "rock_dropped",
               json{{"at", {pending_drop_site_.x(), pending_drop_site_.y()}},
                    {"volume", added},
                    {"rock_id", new_id}});
        }
        break;
      }
    }

    if (segments_.empty()) {
      (void)done_phase;
      transition(Phase::Idle, t);
    }
  }

  ArmModel model_;
  PlannerConfig cfg_;
  selection::SelectionNet net_;
  motion::PatternWeights weights_;
  // Zero pattern for transport legs (swings and rock handling).
  const motion::PatternWeights kTransport{};
  motion::StompParams stomp_;
  std::uint64_t seed_;
  std::uint64_t plan_counter_ = 0;

  CycleState state_;
  JointConfig current_;
  long tick_ = 0;
  double phase_start_ = 0.0;
  double seg_elapsed_ = 0.0;
  int novalid_cooldown_ = 0;
  std::deque<Segment> segments_;
  std::vector<Event> events_;

  struct CycleTimes {
    double scoop = 0.0, swing_to_truck = 0.0, dump = 0.0, swing_back = 0.0;
    double volume = 0.0, fill_rate = 0.0;
  } cycle_times_;

  DigPlan pending_dig_;
  int pending_rock_id_ = -1;
  Vec2 pending_drop_site_ = Vec2::Zero();
  bool carrying_ = false;
  Box3D carried_box_;
  double carried_removed_volume_ = 0.0;

  double scooped_total_ = 0.0;
  double truck_tally_ = 0.0;
  double spillage_ = 0.0;
  double rock_delta_ = 0.0;
  int interventions_ = 0;
  int violations_ = 0;
};

}  // namespace aes::task_planner
