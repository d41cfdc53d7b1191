#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aes/common.hpp"
#include "aes/mlp.hpp"
#include "aes/terrain.hpp"

namespace aes::selection {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using geometry::Vec2;
using nlohmann::json;
using terrain::Patch;

struct ExcavationTarget {
  Vec2 poa_xy = Vec2::Zero();
  double travel_length = 0.0;
};

struct Demonstration {
  Patch observation;
  ExcavationTarget target;
};

// Which tensor the output heads consume: theta (= y^T M) or theta multiplied
// by M once more. Both appear in the source equations; thetaM is the literal
// reading and the default.
enum class HeadInput : std::uint8_t { Theta, ThetaM };

struct SelectionConfig {
  int window_w = 16;
  int window_h = 16;
  std::vector<int> core_hidden{64, 64};
  int m_rows = 16;  // = core output dim
  int m_cols = 16;
  std::vector<int> head_hidden{32};
  HeadInput head_input = HeadInput::ThetaM;
  double max_travel = 1.5;

  int input_dim() const { return window_w * window_h; }

  void validate() const {
    if (window_w <= 0 || window_h <= 0)
      throw ConfigError("window", "must be positive");
    if (m_rows <= 0 || m_cols <= 0)
      throw ConfigError("M", "must have positive shape");
    if (head_input == HeadInput::ThetaM && m_rows != m_cols)
      throw ConfigError("head_input",
                        "thetaM requires a square M (theta re-enters M)");
    if (max_travel <= 0) throw ConfigError("max_travel", "must be > 0");
  }
};

inline json selection_config_to_json(const SelectionConfig& c) {
  return {{"window_w", c.window_w},
          {"window_h", c.window_h},
          {"core_hidden", c.core_hidden},
          {"m_rows", c.m_rows},
          {"m_cols", c.m_cols},
          {"head_hidden", c.head_hidden},
          {"head_input", c.head_input == HeadInput::ThetaM ? "thetaM" : "theta"},
          {"max_travel", c.max_travel}};
}

inline SelectionConfig selection_config_from_json(const json& j) {
  SelectionConfig c;
  if (j.contains("window_w")) c.window_w = j["window_w"];
  if (j.contains("window_h")) c.window_h = j["window_h"];
  if (j.contains("core_hidden"))
    c.core_hidden = j["core_hidden"].get<std::vector<int>>();
  if (j.contains("m_rows")) c.m_rows = j["m_rows"];
  if (j.contains("m_cols")) c.m_cols = j["m_cols"];
  if (j.contains("head_hidden"))
    c.head_hidden = j["head_hidden"].get<std::vector<int>>();
  if (j.contains("head_input")) {
    std::string s = j["head_input"];
    if (s == "theta") c.head_input = HeadInput::Theta;
    else if (s == "thetaM") c.head_input = HeadInput::ThetaM;
    else throw ConfigError("head_input", "must be 'theta' or 'thetaM'");
  }
  if (j.contains("max_travel")) c.max_travel = j["max_travel"];
  c.validate();
  return c;
}

struct TrainParams {
  int epochs = 500;
  double learning_rate = 1.0;  // initial backtracking step
  double armijo_c = 1e-4;
  int max_halvings = 30;
};

// ---------------------------------------------------------------------------
// The selection policy: y = f_core(x), theta^T = M^T y, heads read theta (or
// M^T theta) and emit raw longitudinal / lateral / travel scalars, squashed
// into the observation window and (0, max_travel] by a tanh transform. A
// zero-parameter net therefore emits the window center and half the travel
// range.
// ---------------------------------------------------------------------------

class SelectionNet {
public:
  SelectionNet() = default;

  SelectionNet(const SelectionConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::vector<int> core_dims;
    core_dims.push_back(cfg_.input_dim());
    for (int h : cfg_.core_hidden) core_dims.push_back(h);
    core_dims.push_back(cfg_.m_rows);
    core_ = nn::Mlp(core_dims, derive_seed(seed, 1));

    std::vector<int> head_dims;
    head_dims.push_back(cfg_.m_cols);
    for (int h : cfg_.head_hidden) head_dims.push_back(h);
    head_dims.push_back(1);
    lon_ = nn::Mlp(head_dims, derive_seed(seed, 2));
    lat_ = nn::Mlp(head_dims, derive_seed(seed, 3));
    len_ = nn::Mlp(head_dims, derive_seed(seed, 4));

    Rng rng = make_rng(derive_seed(seed, 5));
    double s = std::sqrt(6.0 / (cfg_.m_rows + cfg_.m_cols));
    std::uniform_real_distribution<double> u(-s, s);
    m_ = MatrixXd(cfg_.m_rows, cfg_.m_cols);
    for (int r = 0; r < m_.rows(); ++r)
      for (int c = 0; c < m_.cols(); ++c) m_(r, c) = u(rng);
    grad_m_ = MatrixXd::Zero(cfg_.m_rows, cfg_.m_cols);
  }

  const SelectionConfig& config() const { return cfg_; }
  MatrixXd& M() { return m_; }
  const MatrixXd& M() const { return m_; }

  void set_zero() {
    core_.set_zero();
    lon_.set_zero();
    lat_.set_zero();
    len_.set_zero();
    m_.setZero();
  }

  // Raw head outputs before the bounding transform: (lon, lat, travel).
  struct Tape {
    nn::Mlp::Tape core, lon, lat, len;
    VectorXd y, t1, t2;
    Eigen::Vector3d raw;
  };

  Eigen::Vector3d forward_raw(const VectorXd& x, Tape* tape = nullptr) const {
    if (x.size() != cfg_.input_dim())
      throw ShapeError("SelectionNet: input dim " + std::to_string(x.size()) +
                       ", expected " + std::to_string(cfg_.input_dim()));
    Tape local;
    Tape& t = tape ? *tape : local;
    t.y = core_.forward(x, &t.core);
    t.t1 = m_.transpose() * t.y;  // theta
    const VectorXd* head_in = &t.t1;
    if (cfg_.head_input == HeadInput::ThetaM) {
      t.t2 = m_.transpose() * t.t1;  // theta M
      head_in = &t.t2;
    }
    t.raw[0] = lon_.forward(*head_in, &t.lon)[0];
    t.raw[1] = lat_.forward(*head_in, &t.lat)[0];
    t.raw[2] = len_.forward(*head_in, &t.len)[0];
    return t.raw;
  }

  // Window-bounded target from a raw triple.
  ExcavationTarget apply_transform(const Eigen::Vector3d& raw,
                                   const Patch& window) const {
    ExcavationTarget out;
    out.poa_xy.x() = window.world_center.x() +
                     window.world_half_extents.x() * std::tanh(raw[0]);
    out.poa_xy.y() = window.world_center.y() +
                     window.world_half_extents.y() * std::tanh(raw[1]);
    out.travel_length = cfg_.max_travel * (1.0 + std::tanh(raw[2])) / 2.0;
    return out;
  }

  ExcavationTarget forward(const Patch& window) const {
    return apply_transform(forward_raw(window.values), window);
  }

  // Backpropagates dL/d(transformed output) for one sample; accumulates
  // parameter gradients. d_out = (dL/dpoa_x, dL/dpoa_y, dL/dtravel).
  void backward(const Tape& t, const Patch& window,
                const Eigen::Vector3d& d_out) {
    Eigen::Vector3d d_raw;
    double th0 = std::tanh(t.raw[0]);
    double th1 = std::tanh(t.raw[1]);
    double th2 = std::tanh(t.raw[2]);
    d_raw[0] = d_out[0] * window.world_half_extents.x() * (1.0 - th0 * th0);
    d_raw[1] = d_out[1] * window.world_half_extents.y() * (1.0 - th1 * th1);
    d_raw[2] = d_out[2] * cfg_.max_travel * 0.5 * (1.0 - th2 * th2);
    backward_raw(t, d_raw);
  }

  void backward_raw(const Tape& t, const Eigen::Vector3d& d_raw) {
    VectorXd one(1);
    VectorXd d_head = VectorXd::Zero(cfg_.m_cols);
    one[0] = d_raw[0];
    d_head += lon_.backward(t.lon, one);
    one[0] = d_raw[1];
    d_head += lat_.backward(t.lat, one);
    one[0] = d_raw[2];
    d_head += len_.backward(t.len, one);

    VectorXd d_y;
    if (cfg_.head_input == HeadInput::ThetaM) {
      // t2 = M^T t1  =>  dM += t1 d_t2^T, d_t1 = M d_t2
      grad_m_ += t.t1 * d_head.transpose();
      VectorXd d_t1 = m_ * d_head;
      grad_m_ += t.y * d_t1.transpose();
      d_y = m_ * d_t1;
    } else {
      grad_m_ += t.y * d_head.transpose();
      d_y = m_ * d_head;
    }
    core_.backward(t.core, d_y);
  }

  void zero_grad() {
    core_.zero_grad();
    lon_.zero_grad();
    lat_.zero_grad();
    len_.zero_grad();
    grad_m_.setZero();
  }

  std::size_t param_count() const {
    return core_.param_count() + static_cast<std::size_t>(m_.size()) +
           lon_.param_count() + lat_.param_count() + len_.param_count();
  }

  VectorXd params_flat() const {
    VectorXd p(param_count());
    double* out = p.data();
    core_.write_params(out);
    out += core_.param_count();
    for (int r = 0; r < m_.rows(); ++r)
      for (int c = 0; c < m_.cols(); ++c) *out++ = m_(r, c);
    lon_.write_params(out);
    out += lon_.param_count();
    lat_.write_params(out);
    out += lat_.param_count();
    len_.write_params(out);
    return p;
  }

  void set_params_flat(const VectorXd& p) {
    if (p.size() != static_cast<Eigen::Index>(param_count()))
      throw ShapeError("set_params_flat: size mismatch");
    const double* in = p.data();
    core_.read_params(in);
    in += core_.param_count();
    for (int r = 0; r < m_.rows(); ++r)
      for (int c = 0; c < m_.cols(); ++c) m_(r, c) = *in++;
    lon_.read_params(in);
    in += lon_.param_count();
    lat_.read_params(in);
    in += lat_.param_count();
    len_.read_params(in);
  }

  VectorXd grads_flat() const {
    VectorXd g(param_count());
    double* out = g.data();
    core_.write_grads(out);
    out += core_.param_count();
    for (int r = 0; r < grad_m_.rows(); ++r)
      for (int c = 0; c < grad_m_.cols(); ++c) *out++ = grad_m_(r, c);
    lon_.write_grads(out);
    out += lon_.param_count();
    lat_.write_grads(out);
    out += lat_.param_count();
    len_.write_grads(out);
    return g;
  }

  json to_json() const {
    json j;
    j["config"] = selection_config_to_json(cfg_);
    j["core"] = core_.to_json();
    j["lon"] = lon_.to_json();
    j["lat"] = lat_.to_json();
    j["len"] = len_.to_json();
    std::vector<double> m(static_cast<std::size_t>(m_.size()));
    std::size_t k = 0;
    for (int r = 0; r < m_.rows(); ++r)
      for (int c = 0; c < m_.cols(); ++c) m[k++] = m_(r, c);
    j["M"] = m;
    return j;
  }

  static SelectionNet from_json(const json& j) {
    SelectionNet net(selection_config_from_json(j.at("config")), 0);
    net.core_ = nn::Mlp::from_json(j.at("core"));
    net.lon_ = nn::Mlp::from_json(j.at("lon"));
    net.lat_ = nn::Mlp::from_json(j.at("lat"));
    net.len_ = nn::Mlp::from_json(j.at("len"));
    const auto m = j.at("M").get<std::vector<double>>();
    if (m.size() != static_cast<std::size_t>(net.m_.size()))
      throw ShapeError("SelectionNet::from_json: M size mismatch");
    std::size_t k = 0;
    for (int r = 0; r < net.m_.rows(); ++r)
      for (int c = 0; c < net.m_.cols(); ++c) net.m_(r, c) = m[k++];
    return net;
  }

private:
  SelectionConfig cfg_;
  nn::Mlp core_, lon_, lat_, len_;
  MatrixXd m_;
  MatrixXd grad_m_;
};

// ---------------------------------------------------------------------------
// Training: full-batch gradient descent with backtracking (Armijo) line
// search, so the recorded loss curve is non-increasing by construction. MSE
// over the three outputs in world units.
// ---------------------------------------------------------------------------

// Mean squared error and (optionally) accumulated gradients over a demo set.
inline double selection_loss(SelectionNet& net,
                             const std::vector<Demonstration>& demos,
                             bool with_grad) {
  const double n_terms = 3.0 * static_cast<double>(demos.size());
  if (with_grad) net.zero_grad();
  double loss = 0.0;
  for (const Demonstration& d : demos) {
    SelectionNet::Tape tape;
    Eigen::Vector3d raw = net.forward_raw(d.observation.values, &tape);
    ExcavationTarget pred = net.apply_transform(raw, d.observation);
    Eigen::Vector3d err{pred.poa_xy.x() - d.target.poa_xy.x(),
                        pred.poa_xy.y() - d.target.poa_xy.y(),
                        pred.travel_length - d.target.travel_length};
    loss += err.squaredNorm() / n_terms;
    if (with_grad) net.backward(tape, d.observation, 2.0 * err / n_terms);
  }
  return loss;
}

inline std::vector<double> train(SelectionNet& net,
                                 const std::vector<Demonstration>& demos,
                                 const TrainParams& hyper = {}) {
  if (demos.empty()) throw EmptyInput("train: no demonstrations");
  for (const Demonstration& d : demos) {
    if (d.observation.values.size() != net.config().input_dim())
      throw ShapeError("train: observation does not match network input");
  }

  std::vector<double> curve;
  double step = hyper.learning_rate;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    double l0 = selection_loss(net, demos, true);
    if (!std::isfinite(l0)) throw DivergenceError("training loss", epoch);
    curve.push_back(l0);
    VectorXd p = net.params_flat();
    VectorXd g = net.grads_flat();
    double g2 = g.squaredNorm();

    double s = step;
    bool accepted = false;
    for (int h = 0; h <= hyper.max_halvings; ++h) {
      net.set_params_flat(p - s * g);
      double l1 = selection_loss(net, demos, false);
      if (!std::isfinite(l1)) {
        s /= 2.0;
        continue;
      }
      if (l1 <= l0 - hyper.armijo_c * s * g2) {
        accepted = true;
        step = s * 2.0;  // warm-start next epoch's search
        break;
      }
      s /= 2.0;
    }
    if (!accepted) {
      net.set_params_flat(p);  // zero step, loss unchanged
      step = s;
    }
  }
  curve.push_back(selection_loss(net, demos, false));
  return curve;
}

// ---------------------------------------------------------------------------
// Heuristic expert used in place of human demonstrations: attack the highest
// non-water, non-rock cell in the window; drag half the local pile width.
// ---------------------------------------------------------------------------

inline Demonstration expert_demo(const terrain::HeightMap& map,
                                 const Vec2& window_center,
                                 const SelectionConfig& cfg) {
  Patch obs =
      terrain::observation_window(map, window_center, cfg.window_w, cfg.window_h);

  int best_px = -1, best_py = -1;
  double best_elev = -std::numeric_limits<double>::infinity();
  for (int py = 0; py < cfg.window_h; ++py) {
    for (int px = 0; px < cfg.window_w; ++px) {
      terrain::CellIndex c = obs.patch_to_map(px, py);
      if (!map.in_bounds(c)) continue;
      terrain::CellLabel l = map.label(c);
      if (l == terrain::CellLabel::Water || l == terrain::CellLabel::Rock)
        continue;
      double e = map.elevation(c);
      if (e > best_elev) {  // strict: first (lowest row-major) peak wins ties
        best_elev = e;
        best_px = px;
        best_py = py;
      }
    }
  }
  if (best_px < 0)
    throw NoValidTarget("expert_demo: no eligible cell in window");

  // Pile width: contiguous above-mean run through the peak along +x.
  int run = 1;
  for (int px = best_px - 1; px >= 0; --px) {
    terrain::CellIndex c = obs.patch_to_map(px, best_py);
    if (!map.in_bounds(c) || map.elevation(c) <= obs.mean) break;
    ++run;
  }
  for (int px = best_px + 1; px < cfg.window_w; ++px) {
    terrain::CellIndex c = obs.patch_to_map(px, best_py);
    if (!map.in_bounds(c) || map.elevation(c) <= obs.mean) break;
    ++run;
  }

  Demonstration d;
  d.observation = obs;
  terrain::CellIndex peak = obs.patch_to_map(best_px, best_py);
  d.target.poa_xy = map.cell_center(peak);
  d.target.travel_length =
      std::clamp(0.5 * run * map.cell_size(), map.cell_size(), cfg.max_travel);
  return d;
}

inline std::vector<Demonstration> synthesize_demos(const terrain::HeightMap& map,
                                                   int n, std::uint64_t seed,
                                                   const SelectionConfig& cfg) {
  if (n < 1) throw ConfigError("n", "must be >= 1");
  Rng rng = make_rng(seed);

  // Window centers are drawn in proportion to elevation above the map mean,
  // then jittered, so windows frame actual material the way the live query
  // does. Uniform draws over the whole map put nearly every peak on the
  // window border, where the saturating output transform cannot reach it and
  // training stalls. A uniform fallback keeps featureless maps usable.
  std::vector<double> cum(static_cast<std::size_t>(map.width()) * map.height());
  double mean = 0.0;
  for (int y = 0; y < map.height(); ++y)
    for (int x = 0; x < map.width(); ++x) mean += map.elevation({x, y});
  mean /= static_cast<double>(cum.size());
  double total = 0.0;
  for (int y = 0; y < map.height(); ++y)
    for (int x = 0; x < map.width(); ++x) {
      total += std::max(0.0, map.elevation({x, y}) - mean);
      cum[static_cast<std::size_t>(y) * map.width() + x] = total;
    }

  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_int_distribution<int> ux(0, map.width() - 1);
  std::uniform_int_distribution<int> uy(0, map.height() - 1);
  const double jitter =
      0.25 * static_cast<double>(std::min(cfg.window_w, cfg.window_h)) *
      map.cell_size();

  auto draw_center = [&]() -> Vec2 {
    if (total <= 0.0) return map.cell_center({ux(rng), uy(rng)});
    double u = u01(rng) * total;
    auto it = std::upper_bound(cum.begin(), cum.end(), u);
    auto idx = static_cast<int>(it - cum.begin());
    if (idx >= static_cast<int>(cum.size())) idx = static_cast<int>(cum.size()) - 1;
    Vec2 c = map.cell_center({idx % map.width(), idx / map.width()});
    c.x() += (2.0 * u01(rng) - 1.0) * jitter;
    c.y() += (2.0 * u01(rng) - 1.0) * jitter;
    return c;
  };

  std::vector<Demonstration> out;
  // Phase one insists the expert target land in the window interior (the
  // region the output transform can express exactly); phase two drops that
  // requirement so degenerate maps still yield a demo set.
  for (int phase = 0; phase < 2 && static_cast<int>(out.size()) < n; ++phase) {
    int attempts = 0;
    while (static_cast<int>(out.size()) < n && ++attempts <= 60 * n) {
      try {
        Demonstration d = expert_demo(map, draw_center(), cfg);
        if (phase == 0) {
          Vec2 rel = (d.target.poa_xy - d.observation.world_center)
                         .cwiseQuotient(d.observation.world_half_extents);
          if (rel.cwiseAbs().maxCoeff() > 0.8) continue;
        }
        out.push_back(std::move(d));
      } catch (const NoValidTarget&) {
        continue;  // window was all water/rock; draw another
      }
    }
  }
  if (static_cast<int>(out.size()) < n)
    throw NoValidTarget("synthesize_demos: no eligible windows found");
  return out;
}

// ---------------------------------------------------------------------------
// Demonstration JSONL: one observation + target per line.
// ---------------------------------------------------------------------------

inline json demo_to_json(const Demonstration& d) {
  json j;
  j["observation"] = {
      {"width", d.observation.width},
      {"height", d.observation.height},
      {"origin", {d.observation.origin.x, d.observation.origin.y}},
      {"world_center",
       {d.observation.world_center.x(), d.observation.world_center.y()}},
      {"world_half_extents",
       {d.observation.world_half_extents.x(),
        d.observation.world_half_extents.y()}},
      {"mean", d.observation.mean},
      {"values",
       std::vector<double>(d.observation.values.data(),
                           d.observation.values.data() +
                               d.observation.values.size())}};
  j["target"] = {{"poa", {d.target.poa_xy.x(), d.target.poa_xy.y()}},
                 {"travel_length", d.target.travel_length}};
  return j;
}

inline Demonstration demo_from_json(const json& j) {
  Demonstration d;
  const json& o = j.at("observation");
  d.observation.width = o.at("width");
  d.observation.height = o.at("height");
  d.observation.origin = {o.at("origin")[0].get<int>(),
                          o.at("origin")[1].get<int>()};
  d.observation.world_center = Vec2(o.at("world_center")[0].get<double>(),
                                    o.at("world_center")[1].get<double>());
  d.observation.world_half_extents =
      Vec2(o.at("world_half_extents")[0].get<double>(),
           o.at("world_half_extents")[1].get<double>());
  d.observation.mean = o.at("mean");
  const auto vals = o.at("values").get<std::vector<double>>();
  if (vals.size() !=
      static_cast<std::size_t>(d.observation.width) *
          static_cast<std::size_t>(d.observation.height))
    throw ShapeError("demo observation values do not match width*height");
  d.observation.values =
      Eigen::Map<const VectorXd>(vals.data(), static_cast<Eigen::Index>(vals.size()));
  d.target.poa_xy = Vec2(j.at("target").at("poa")[0].get<double>(),
                         j.at("target").at("poa")[1].get<double>());
  d.target.travel_length = j.at("target").at("travel_length");
  return d;
}

inline void write_demos_jsonl(const std::string& path,
                              const std::vector<Demonstration>& demos) {
  std::ofstream f(path);
  if (!f) throw Error("write_demos_jsonl: cannot open " + path);
  for (const Demonstration& d : demos) f << demo_to_json(d).dump() << "\n";
}

inline std::vector<Demonstration> read_demos_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("read_demos_jsonl: cannot open " + path);
  std::vector<Demonstration> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    out.push_back(demo_from_json(json::parse(line)));
  }
  if (out.empty()) throw EmptyInput("read_demos_jsonl: no demonstrations");
  return out;
}

}  // namespace aes::selection
