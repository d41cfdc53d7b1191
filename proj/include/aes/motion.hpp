#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aes/common.hpp"
#include "aes/geometry.hpp"
#include "aes/kinematics.hpp"

namespace aes::motion {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using geometry::Box3D;
using geometry::Vec3;
using kinematics::ArmModel;
using kinematics::JointConfig;
using nlohmann::json;

inline constexpr int kJointCount = 4;
inline constexpr int kFeatureDim = 2 * kJointCount;  // squared errors + rates

// ---------------------------------------------------------------------------
// Trajectories.
// ---------------------------------------------------------------------------

struct Trajectory {
  std::vector<JointConfig> configs;
  double dt = 0.1;
  bool endpoints_fixed = true;

  std::size_t size() const { return configs.size(); }
  double duration() const {
    return configs.empty() ? 0.0 : dt * static_cast<double>(configs.size() - 1);
  }

  void validate() const {
    if (configs.size() < 3) throw ShapeError("Trajectory: need K >= 3");
    if (!(dt > 0)) throw ConfigError("dt", "must be > 0");
    for (const JointConfig& q : configs) {
      if (!q.vec().allFinite())
        throw ConfigError("configs", "non-finite joint value");
    }
  }

  static Trajectory line(const JointConfig& start, const JointConfig& goal,
                         int waypoints, double dt = 0.1) {
    if (waypoints < 3) throw ShapeError("Trajectory::line: need K >= 3");
    Trajectory t;
    t.dt = dt;
    Eigen::Vector4d a = start.vec(), b = goal.vec();
    for (int k = 0; k < waypoints; ++k) {
      double s = static_cast<double>(k) / static_cast<double>(waypoints - 1);
      t.configs.push_back(JointConfig::from_vec(a + s * (b - a)));
    }
    return t;
  }
};

// Sum of squared per-step joint deltas; the straight line is its exact
// minimizer under fixed endpoints, which anchors the optimizer tests.
inline double smoothness_cost(const Trajectory& traj) {
  double c = 0.0;
  for (std::size_t k = 0; k + 1 < traj.configs.size(); ++k)
    c += (traj.configs[k + 1].vec() - traj.configs[k].vec()).squaredNorm();
  return c;
}

// Every waypoint inside the model's joint limits?
inline bool within_joint_limits(const Trajectory& traj, const ArmModel& m) {
  for (const JointConfig& q : traj.configs)
    if (!kinematics::is_valid(m, q)) return false;
  return true;
}

// Per-step joint rates within model limits?
inline bool within_speed_limits(const Trajectory& traj, const ArmModel& m,
                                double tol = 1e-9) {
  Eigen::Vector4d lim = m.speed_vec();
  for (std::size_t k = 0; k + 1 < traj.configs.size(); ++k) {
    Eigen::Vector4d rate =
        (traj.configs[k + 1].vec() - traj.configs[k].vec()).cwiseAbs() /
        traj.dt;
    for (int j = 0; j < 4; ++j)
      if (rate[j] > lim[j] + tol) return false;
  }
  return true;
}

// Smallest dt that keeps every per-step rate within the model's speed
// limits; used to time-parameterize planned paths.
inline double min_feasible_dt(const Trajectory& traj, const ArmModel& m) {
  Eigen::Vector4d lim = m.speed_vec();
  double dt = 1e-3;
  for (std::size_t k = 0; k + 1 < traj.configs.size(); ++k) {
    Eigen::Vector4d step =
        (traj.configs[k + 1].vec() - traj.configs[k].vec()).cwiseAbs();
    for (int j = 0; j < 4; ++j) dt = std::max(dt, step[j] / lim[j]);
  }
  return dt;
}

// Resamples a trajectory along its own polyline so every step takes the same
// time under the per-joint speed caps. The geometric path is unchanged (new
// waypoints lie on the old segments, endpoints are copied exactly); only the
// parameterization moves. Total duration becomes the time-optimal value for
// the path, so an optimizer that bunches waypoints near one end no longer
// inflates the executed duration through the single shared dt.
inline Trajectory retime(const Trajectory& in, const ArmModel& m) {
  const std::size_t n = in.configs.size();
  if (n < 2) return in;
  Eigen::Vector4d lim = m.speed_vec();
  std::vector<double> seg(n - 1), cum(n, 0.0);
  double total = 0.0;
  for (std::size_t k = 0; k + 1 < n; ++k) {
    Eigen::Vector4d step =
        (in.configs[k + 1].vec() - in.configs[k].vec()).cwiseAbs();
    double tau = 0.0;
    for (int j = 0; j < 4; ++j) tau = std::max(tau, step[j] / lim[j]);
    seg[k] = tau;
    total += tau;
    cum[k + 1] = total;
  }
  if (total <= 0.0) return in;  // degenerate: all waypoints coincide

  Trajectory out;
  out.dt = total / static_cast<double>(n - 1);
  out.configs.resize(n);
  out.configs.front() = in.configs.front();
  out.configs.back() = in.configs.back();
  std::size_t i = 0;
  for (std::size_t k = 1; k + 1 < n; ++k) {
    double t = static_cast<double>(k) * out.dt;
    while (i + 1 < n - 1 && cum[i + 1] < t) ++i;
    while (seg[i] <= 0.0 && i + 1 < n - 1) ++i;  // skip zero-length segments
    double f = seg[i] > 0.0 ? (t - cum[i]) / seg[i] : 0.0;
    f = std::clamp(f, 0.0, 1.0);
    out.configs[k] = JointConfig::from_vec(
        in.configs[i].vec() +
        f * (in.configs[i + 1].vec() - in.configs[i].vec()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pattern features: per waypoint and joint, the squared error to the end
// configuration plus its backward first-difference rate (zero at the first
// waypoint). Aggregate is the sum over waypoints.
// ---------------------------------------------------------------------------

inline VectorXd waypoint_features(const Trajectory& traj, std::size_t k,
                                  const JointConfig& q_end) {
  VectorXd f = VectorXd::Zero(kFeatureDim);
  Eigen::Vector4d e = traj.configs[k].vec() - q_end.vec();
  for (int j = 0; j < kJointCount; ++j) f[j] = e[j] * e[j];
  if (k > 0) {
    Eigen::Vector4d ep = traj.configs[k - 1].vec() - q_end.vec();
    for (int j = 0; j < kJointCount; ++j)
      f[kJointCount + j] = (e[j] * e[j] - ep[j] * ep[j]) / traj.dt;
  }
  return f;
}

inline std::vector<VectorXd> features_per_waypoint(const Trajectory& traj,
                                                   const JointConfig& q_end) {
  traj.validate();
  std::vector<VectorXd> out;
  out.reserve(traj.configs.size());
  for (std::size_t k = 0; k < traj.configs.size(); ++k)
    out.push_back(waypoint_features(traj, k, q_end));
  return out;
}

inline VectorXd features(const Trajectory& traj, const JointConfig& q_end) {
  traj.validate();
  VectorXd agg = VectorXd::Zero(kFeatureDim);
  for (std::size_t k = 0; k < traj.configs.size(); ++k)
    agg += waypoint_features(traj, k, q_end);
  return agg;
}

struct PatternWeights {
  VectorXd w = VectorXd::Zero(kFeatureDim);
};

inline double pattern_cost(const Trajectory& traj, const JointConfig& q_end,
                           const PatternWeights& weights) {
  return weights.w.dot(features(traj, q_end));
}

// ---------------------------------------------------------------------------
// Smoothness-shaped noise. A is the second-difference operator over the
// interior waypoints (endpoints fixed); sampling covariance is (A^T A)^-1,
// rescaled to unit peak variance so the caller's sigma is the actual waypoint
// amplitude. The same inverse, column-normalized, is the update-smoothing
// projection.
// ---------------------------------------------------------------------------

class SmoothnessShaper {
public:
  explicit SmoothnessShaper(int waypoints) : k_(waypoints) {
    if (waypoints < 3) throw ShapeError("SmoothnessShaper: need K >= 3");
    int n = waypoints - 2;
    MatrixXd a = MatrixXd::Zero(n, n);
    for (int i = 0; i < n; ++i) {
      a(i, i) = -2.0;
      if (i > 0) a(i, i - 1) = 1.0;
      if (i + 1 < n) a(i, i + 1) = 1.0;
    }
    MatrixXd r = a.transpose() * a;
    cov_ = r.inverse();

    double peak = cov_.diagonal().maxCoeff();
    chol_ = Eigen::LLT<MatrixXd>(cov_ / peak).matrixL();

    proj_ = cov_;
    for (int c = 0; c < n; ++c) {
      double m = proj_.col(c).cwiseAbs().maxCoeff();
      proj_.col(c) *= 1.0 / (m * static_cast<double>(n));
    }
  }

  int waypoints() const { return k_; }

  // One correlated noise curve per joint, endpoints zero. Column j is the
  // per-waypoint offset of joint j.
  MatrixXd sample(double sigma, Rng& rng) const {
    std::normal_distribution<double> gauss(0.0, 1.0);
    int n = k_ - 2;
    MatrixXd eps = MatrixXd::Zero(k_, kJointCount);
    for (int j = 0; j < kJointCount; ++j) {
      VectorXd z(n);
      for (int i = 0; i < n; ++i) z[i] = gauss(rng);
      eps.block(1, j, n, 1) = sigma * (chol_ * z);
    }
    return eps;
  }

  // Smooths an interior update; input and output are K x joints with zero
  // endpoint rows.
  MatrixXd project(const MatrixXd& delta) const {
    int n = k_ - 2;
    MatrixXd out = MatrixXd::Zero(k_, kJointCount);
    out.block(1, 0, n, kJointCount) =
        proj_ * delta.block(1, 0, n, kJointCount);
    return out;
  }

private:
  int k_;
  MatrixXd cov_, chol_, proj_;
};

// ---------------------------------------------------------------------------
// IRL: minimize over w the sum over demos of log-sum-exp of -w^T (sample
// features - demo features), plus a small ridge term that keeps the problem
// bounded (the raw objective can run to -infinity along directions where all
// samples are worse). Strictly convex, so every start reaches the same value.
// ---------------------------------------------------------------------------

struct IrlProblem {
  std::vector<VectorXd> demo_features;                // Psi_i*
  std::vector<std::vector<VectorXd>> sample_features; // Psi_ik per demo

  void validate() const {
    if (demo_features.empty()) throw EmptyInput("IrlProblem: no demos");
    if (sample_features.size() != demo_features.size())
      throw ShapeError("IrlProblem: demo/sample count mismatch");
    for (std::size_t i = 0; i < demo_features.size(); ++i) {
      if (sample_features[i].empty())
        throw EmptyInput("IrlProblem: demo " + std::to_string(i) +
                         " has no samples");
      for (const VectorXd& s : sample_features[i])
        if (s.size() != demo_features[i].size())
          throw ShapeError("IrlProblem: feature dim mismatch");
    }
  }

  bool degenerate(double tol = 1e-12) const {
    for (std::size_t i = 0; i < demo_features.size(); ++i)
      for (const VectorXd& s : sample_features[i])
        if ((s - demo_features[i]).lpNorm<Eigen::Infinity>() > tol)
          return false;
    return true;
  }
};

struct IrlOptions {
  double lambda = 1e-3;    // ridge coefficient
  double grad_tol = 1e-10;
  int max_iters = 50000;
  double init_step = 1.0;
  double armijo_c = 1e-4;
};

inline double irl_objective(const IrlProblem& prob, const VectorXd& w,
                            double lambda) {
  double obj = lambda * w.squaredNorm();
  for (std::size_t i = 0; i < prob.demo_features.size(); ++i) {
    const VectorXd& demo = prob.demo_features[i];
    double m = -std::numeric_limits<double>::infinity();
    std::vector<double> a;
    a.reserve(prob.sample_features[i].size());
    for (const VectorXd& s : prob.sample_features[i]) {
      a.push_back(-w.dot(s - demo));
      m = std::max(m, a.back());
    }
    double sum = 0.0;
    for (double v : a) sum += std::exp(v - m);
    obj += m + std::log(sum);
  }
  return obj;
}

inline VectorXd irl_gradient(const IrlProblem& prob, const VectorXd& w,
                             double lambda) {
  VectorXd g = 2.0 * lambda * w;
  for (std::size_t i = 0; i < prob.demo_features.size(); ++i) {
    const VectorXd& demo = prob.demo_features[i];
    const auto& samples = prob.sample_features[i];
    double m = -std::numeric_limits<double>::infinity();
    std::vector<double> a;
    a.reserve(samples.size());
    for (const VectorXd& s : samples) {
      a.push_back(-w.dot(s - demo));
      m = std::max(m, a.back());
    }
    double z = 0.0;
    for (double v : a) z += std::exp(v - m);
    for (std::size_t k = 0; k < samples.size(); ++k) {
      double p = std::exp(a[k] - m) / z;
      g -= p * (samples[k] - demo);
    }
  }
  return g;
}

struct IrlResult {
  PatternWeights weights;
  double objective = 0.0;
  bool converged = false;
  int iterations = 0;
};

inline IrlResult solve_irl(const IrlProblem& prob, const VectorXd& w0,
                           const IrlOptions& opts = {}) {
  prob.validate();
  if (prob.degenerate())
    throw DegenerateSamples("solve_irl: all samples equal their demos");

  VectorXd w = w0;
  double obj = irl_objective(prob, w, opts.lambda);
  double step = opts.init_step;
  IrlResult result;
  for (int it = 0; it < opts.max_iters; ++it) {
    VectorXd g = irl_gradient(prob, w, opts.lambda);
    double g2 = g.squaredNorm();
    result.iterations = it + 1;
    if (std::sqrt(g2) < opts.grad_tol) {
      result.converged = true;
      break;
    }
    double s = step;
    bool accepted = false;
    for (int h = 0; h < 60; ++h) {
      VectorXd w_new = w - s * g;
      double obj_new = irl_objective(prob, w_new, opts.lambda);
      if (std::isfinite(obj_new) && obj_new <= obj - opts.armijo_c * s * g2) {
        w = w_new;
        obj = obj_new;
        step = s * 2.0;
        accepted = true;
        break;
      }
      s /= 2.0;
    }
    if (!accepted) {
      result.converged = std::sqrt(g2) < 1e-6;  // stalled at numeric floor
      break;
    }
  }
  result.weights.w = w;
  result.objective = obj;
  return result;
}

// Perturbs each demo into `samples_per_demo` smoothness-shaped variants and
// solves the weight-learning problem from zero.
inline IrlResult learn_weights(const std::vector<Trajectory>& demos,
                               int samples_per_demo, std::uint64_t seed,
                               const IrlOptions& opts = {},
                               double perturb_sigma = 0.05) {
  if (demos.empty()) throw EmptyInput("learn_weights: no demos");
  if (samples_per_demo < 1)
    throw ConfigError("samples_per_demo", "must be >= 1");

  IrlProblem prob;
  Rng rng = make_rng(seed);
  for (const Trajectory& demo : demos) {
    demo.validate();
    const JointConfig q_end = demo.configs.back();
    prob.demo_features.push_back(features(demo, q_end));
    SmoothnessShaper shaper(static_cast<int>(demo.size()));
    std::vector<VectorXd> samples;
    for (int k = 0; k < samples_per_demo; ++k) {
      MatrixXd eps = shaper.sample(perturb_sigma, rng);
      Trajectory t = demo;
      for (std::size_t i = 0; i < t.configs.size(); ++i) {
        t.configs[i] = JointConfig::from_vec(
            t.configs[i].vec() + eps.row(static_cast<int>(i)).transpose());
      }
      samples.push_back(features(t, q_end));
    }
    prob.sample_features.push_back(std::move(samples));
  }
  return solve_irl(prob, VectorXd::Zero(kFeatureDim), opts);
}

// ---------------------------------------------------------------------------
// Collision model: three arm sample points (boom tip, stick tip, bucket tip)
// against box obstacles. Per-waypoint cost sums squared clearance violations
// over points and obstacles; zero exactly when every point clears the margin.
// ---------------------------------------------------------------------------

inline double waypoint_collision_cost(const ArmModel& model,
                                      const JointConfig& q,
                                      const std::vector<Box3D>& obstacles,
                                      double clearance) {
  if (obstacles.empty()) return 0.0;
  auto pts = kinematics::arm_points(model, q);
  double cost = 0.0;
  for (const Box3D& box : obstacles) {
    for (const Vec3& p : pts) {
      double v = clearance - box.signed_distance(p);
      if (v > 0.0) cost += v * v;
    }
  }
  return cost;
}

inline std::vector<double> collision_cost(const Trajectory& traj,
                                          const std::vector<Box3D>& obstacles,
                                          const ArmModel& model,
                                          double clearance) {
  std::vector<double> out;
  out.reserve(traj.configs.size());
  for (const JointConfig& q : traj.configs)
    out.push_back(waypoint_collision_cost(model, q, obstacles, clearance));
  return out;
}

// Dense interpolated check: true iff every arm sample point keeps at least
// `clearance` from every obstacle at `factor`-times waypoint resolution.
// Reports the worst clearance violation when asked.
inline bool dense_collision_check(const Trajectory& traj,
                                  const std::vector<Box3D>& obstacles,
                                  const ArmModel& model, double clearance,
                                  int factor = 10,
                                  double* max_violation = nullptr) {
  if (max_violation) *max_violation = 0.0;
  if (obstacles.empty()) return true;
  bool ok = true;
  for (std::size_t k = 0; k + 1 < traj.configs.size(); ++k) {
    Eigen::Vector4d a = traj.configs[k].vec();
    Eigen::Vector4d b = traj.configs[k + 1].vec();
    for (int s = 0; s < factor; ++s) {
      double t = static_cast<double>(s) / factor;
      JointConfig q = JointConfig::from_vec(a + t * (b - a));
      auto pts = kinematics::arm_points(model, q);
      for (const Box3D& box : obstacles) {
        for (const Vec3& p : pts) {
          double v = clearance - box.signed_distance(p);
          if (v > 0.0) {
            ok = false;
            if (max_violation) *max_violation = std::max(*max_violation, v);
          }
        }
      }
    }
  }
  // Final waypoint.
  auto pts = kinematics::arm_points(model, traj.configs.back());
  for (const Box3D& box : obstacles) {
    for (const Vec3& p : pts) {
      double v = clearance - box.signed_distance(p);
      if (v > 0.0) {
        ok = false;
        if (max_violation) *max_violation = std::max(*max_violation, v);
      }
    }
  }
  return ok;
}

// ---------------------------------------------------------------------------
// STOMP.
// ---------------------------------------------------------------------------

struct StompParams {
  int rollouts = 20;
  int iterations = 150;
  int waypoints = 30;
  double temperature = 10.0;   // h in the exponentiated-cost weighting
  double clearance = 0.15;     // required margin, meters
  double noise_stddev = 0.12;  // waypoint noise amplitude, radians
  double noise_decay = 0.97;   // per-iteration annealing
  double obstacle_blend = 1.0; // scale of obstacle cost vs pattern cost
  double smoothness_weight = 1.0;
  double limit_penalty = 1e3;
  // Internal planning margin: costs use clearance * margin_factor so the
  // returned path clears the required margin with room to spare.
  double margin_factor = 1.3;
  // Stop after this many iterations without relative improvement, once a
  // feasible path exists. Zero disables early stopping.
  int patience = 8;
  // While no feasible path exists, this many stalled iterations trigger a
  // restart from the best trajectory with the noise re-annealed (and grown,
  // up to noise_max_scale x the initial amplitude). Deep penetrations need
  // coordinated multi-waypoint detours that the decayed noise cannot reach.
  int infeasible_patience = 4;
  double noise_regrow = 1.0;     // added to the amplitude scale per restart
  double noise_max_scale = 5.0;
};

struct PlanningFailed : Error {
  PlanningFailed(const std::string& msg, Trajectory best_,
                 double max_penetration_)
      : Error(msg),
        best(std::move(best_)),
        max_penetration(max_penetration_) {}
  Trajectory best;
  double max_penetration = 0.0;
};

struct StompResult {
  Trajectory trajectory;
  std::vector<double> cost_history;  // noiseless total cost after each iteration
  double final_cost = 0.0;
  int iterations = 0;
  bool feasible = true;
};

namespace detail {

struct StompCostModel {
  const ArmModel* model;
  const PatternWeights* weights;
  const std::vector<Box3D>* obstacles;
  const StompParams* params;
  JointConfig goal;
  double planning_clearance;

  double limit_cost(const JointConfig& q) const {
    double c = 0.0;
    auto pen = [](double v, double lo, double hi) {
      if (v < lo) return (lo - v) * (lo - v);
      if (v > hi) return (v - hi) * (v - hi);
      return 0.0;
    };
    c += pen(q.swing, model->swing_limits.lo, model->swing_limits.hi);
    c += pen(q.boom, model->boom_limits.lo, model->boom_limits.hi);
    c += pen(q.stick, model->stick_limits.lo, model->stick_limits.hi);
    c += pen(q.bucket, model->bucket_limits.lo, model->bucket_limits.hi);
    return params->limit_penalty * c;
  }

  // State cost of waypoint k (no smoothness term).
  double state_cost(const Trajectory& traj, std::size_t k) const {
    double c = weights->w.dot(waypoint_features(traj, k, goal));
    c += params->obstacle_blend *
         waypoint_collision_cost(*model, traj.configs[k], *obstacles,
                                 planning_clearance);
    c += limit_cost(traj.configs[k]);
    return c;
  }

  // Adds the local velocity contribution so rollout weighting sees
  // smoothness too.
  double waypoint_cost(const Trajectory& traj, std::size_t k) const {
    double c = state_cost(traj, k);
    if (k > 0)
      c += 0.5 * params->smoothness_weight *
           (traj.configs[k].vec() - traj.configs[k - 1].vec()).squaredNorm();
    if (k + 1 < traj.configs.size())
      c += 0.5 * params->smoothness_weight *
           (traj.configs[k + 1].vec() - traj.configs[k].vec()).squaredNorm();
    return c;
  }

  double total_cost(const Trajectory& traj) const {
    double c = params->smoothness_weight * smoothness_cost(traj);
    for (std::size_t k = 0; k < traj.configs.size(); ++k)
      c += state_cost(traj, k);
    return c;
  }
};

}  // namespace detail

inline StompResult stomp_plan(const ArmModel& model, const JointConfig& start,
                              const JointConfig& goal,
                              const PatternWeights& weights,
                              const std::vector<Box3D>& obstacles,
                              const StompParams& params, std::uint64_t seed) {
  kinematics::require_valid(model, start);
  kinematics::require_valid(model, goal);
  if (params.waypoints < 3) throw ConfigError("waypoints", "must be >= 3");
  if (params.rollouts < 1) throw ConfigError("rollouts", "must be >= 1");

  const int K = params.waypoints;
  StompResult result;

  if ((start.vec() - goal.vec()).lpNorm<Eigen::Infinity>() < 1e-15) {
    result.trajectory.configs.assign(static_cast<std::size_t>(K), start);
    result.trajectory.dt = 0.1;
    result.final_cost = 0.0;
    result.feasible = dense_collision_check(result.trajectory, obstacles,
                                            model, params.clearance);
    if (!result.feasible) {
      double viol = 0.0;
      dense_collision_check(result.trajectory, obstacles, model,
                            params.clearance, 10, &viol);
      throw PlanningFailed("stomp_plan: start/goal pose violates clearance",
                           result.trajectory, viol);
    }
    return result;
  }

  detail::StompCostModel cost{&model, &weights, &obstacles, &params, goal,
                              params.clearance * params.margin_factor};

  Trajectory current = Trajectory::line(start, goal, K, 0.1);
  SmoothnessShaper shaper(K);
  Rng rng = make_rng(seed);

  auto evaluate = [&](const Trajectory& t) { return cost.total_cost(t); };

  double best_cost = evaluate(current);
  Trajectory best = current;

  bool have_feasible = dense_collision_check(current, obstacles, model,
                                             params.clearance);
  Trajectory best_feasible = current;
  double best_feasible_cost =
      have_feasible ? best_cost : std::numeric_limits<double>::infinity();

  std::vector<MatrixXd> noise(static_cast<std::size_t>(params.rollouts));
  double sigma = params.noise_stddev;
  int stall = 0;
  int infeasible_stall = 0;
  int restarts = 0;

  for (int iter = 0; iter < params.iterations; ++iter) {
    // Rollout 0 is the noiseless current trajectory.
    std::vector<Trajectory> rolls(static_cast<std::size_t>(params.rollouts),
                                  current);
    noise[0] = MatrixXd::Zero(K, kJointCount);
    for (int r = 1; r < params.rollouts; ++r) {
      noise[static_cast<std::size_t>(r)] = shaper.sample(sigma, rng);
      Trajectory& t = rolls[static_cast<std::size_t>(r)];
      for (int k = 1; k + 1 < K; ++k) {
        t.configs[static_cast<std::size_t>(k)] = JointConfig::from_vec(
            t.configs[static_cast<std::size_t>(k)].vec() +
            noise[static_cast<std::size_t>(r)].row(k).transpose());
      }
    }

    // Per-waypoint exponentiated-cost weights over rollouts.
    MatrixXd s(params.rollouts, K);
    for (int r = 0; r < params.rollouts; ++r)
      for (int k = 0; k < K; ++k)
        s(r, k) = cost.waypoint_cost(rolls[static_cast<std::size_t>(r)],
                                     static_cast<std::size_t>(k));

    MatrixXd delta = MatrixXd::Zero(K, kJointCount);
    for (int k = 1; k + 1 < K; ++k) {
      double lo = s.col(k).minCoeff(), hi = s.col(k).maxCoeff();
      double span = hi - lo;
      double z = 0.0;
      VectorXd p(params.rollouts);
      for (int r = 0; r < params.rollouts; ++r) {
        double e = (span > 1e-12)
                       ? std::exp(-params.temperature * (s(r, k) - lo) / span)
                       : 1.0;
        p[r] = e;
        z += e;
      }
      for (int r = 0; r < params.rollouts; ++r)
        delta.row(k) += (p[r] / z) * noise[static_cast<std::size_t>(r)].row(k);
    }

    delta = shaper.project(delta);
    for (int k = 1; k + 1 < K; ++k) {
      current.configs[static_cast<std::size_t>(k)] = JointConfig::from_vec(
          current.configs[static_cast<std::size_t>(k)].vec() +
          delta.row(k).transpose());
    }

    double c = evaluate(current);
    // Elitist acceptance: the per-waypoint softmax blends a rollout that
    // found a detour with the ones that did not, taking only part of the
    // move; if the best whole rollout beats the blended update, jump to it.
    {
      int r_best = 0;
      double s_best = std::numeric_limits<double>::infinity();
      for (int r = 0; r < params.rollouts; ++r) {
        double tot = s.row(r).sum();
        if (tot < s_best) {
          s_best = tot;
          r_best = r;
        }
      }
      if (r_best > 0) {
        double c_roll = evaluate(rolls[static_cast<std::size_t>(r_best)]);
        if (c_roll < c) {
          current = rolls[static_cast<std::size_t>(r_best)];
          c = c_roll;
        }
      }
    }
    result.iterations = iter + 1;
    sigma *= params.noise_decay;

    bool improved = false;
    if (c < best_cost) {
      best_cost = c;
      best = current;
      improved = true;
    }
    // The convergence curve reports the best cost found so far.
    result.cost_history.push_back(best_cost);
    if (c < best_feasible_cost - 1e-12 || !have_feasible) {
      if (dense_collision_check(current, obstacles, model, params.clearance) &&
          within_joint_limits(current, model)) {
        if (!have_feasible || c < best_feasible_cost) {
          have_feasible = true;
          best_feasible = current;
          best_feasible_cost = c;
          improved = true;
        }
      }
    }

    if (params.patience > 0 && have_feasible) {
      stall = improved ? 0 : stall + 1;
      if (stall >= params.patience) break;
    }
    if (!have_feasible && params.infeasible_patience > 0) {
      infeasible_stall = improved ? 0 : infeasible_stall + 1;
      if (infeasible_stall >= params.infeasible_patience) {
        ++restarts;
        double scale = std::min(params.noise_max_scale,
                                1.0 + params.noise_regrow * restarts);
        sigma = params.noise_stddev * scale;
        current = best;
        infeasible_stall = 0;
      }
    }
  }

  if (!have_feasible) {
    double viol = 0.0;
    dense_collision_check(best, obstacles, model, params.clearance, 10, &viol);
    throw PlanningFailed(
        "stomp_plan: no collision-free trajectory within iteration budget",
        best, viol);
  }

  best_feasible.configs.front() = start;  // exact endpoint identity
  best_feasible.configs.back() = goal;
  best_feasible.dt = min_feasible_dt(best_feasible, model);
  result.trajectory = best_feasible;
  result.final_cost = best_feasible_cost;
  result.feasible = true;
  return result;
}

// ---------------------------------------------------------------------------
// Serialization: trajectories as CSV (t, swing, boom, stick, bucket), weights
// as a JSON vector.
// ---------------------------------------------------------------------------

inline void write_trajectory_csv(const std::string& path,
                                 const Trajectory& traj) {
  std::ofstream f(path);
  if (!f) throw Error("write_trajectory_csv: cannot open " + path);
  f << "t,swing,boom,stick,bucket\n";
  f.precision(12);
  for (std::size_t k = 0; k < traj.configs.size(); ++k) {
    const JointConfig& q = traj.configs[k];
    f << static_cast<double>(k) * traj.dt << "," << q.swing << "," << q.boom
      << "," << q.stick << "," << q.bucket << "\n";
  }
}

inline Trajectory read_trajectory_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("read_trajectory_csv: cannot open " + path);
  Trajectory traj;
  std::string line;
  double prev_t = 0.0;
  bool have_dt = false;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string cell;
    std::vector<double> row;
    bool numeric = true;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (...) {
        numeric = false;
        break;
      }
    }
    if (!numeric) continue;  // header
    if (row.size() != 5)
      throw Error("read_trajectory_csv: expected 5 columns");
    if (!traj.configs.empty() && !have_dt) {
      traj.dt = row[0] - prev_t;
      have_dt = true;
    }
    prev_t = row[0];
    traj.configs.push_back({row[1], row[2], row[3], row[4]});
  }
  traj.validate();
  return traj;
}

inline void write_weights_json(const std::string& path,
                               const PatternWeights& w) {
  json j;
  j["w"] = std::vector<double>(w.w.data(), w.w.data() + w.w.size());
  std::ofstream f(path);
  if (!f) throw Error("write_weights_json: cannot open " + path);
  f << j.dump(2) << "\n";
}

inline PatternWeights read_weights_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("read_weights_json: cannot open " + path);
  json j = json::parse(f);
  const auto v = j.at("w").get<std::vector<double>>();
  PatternWeights w;
  w.w = Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  return w;
}

}  // namespace aes::motion
