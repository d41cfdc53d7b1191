#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "aes/aes.hpp"

using namespace aes;
using geometry::Vec2;
using selection::Demonstration;
using selection::ExcavationTarget;
using selection::HeadInput;
using selection::SelectionConfig;
using selection::SelectionNet;
using selection::TrainParams;
using terrain::Patch;

namespace {

// Small config so finite-difference sweeps stay cheap.
SelectionConfig small_config() {
  SelectionConfig cfg;
  cfg.window_w = 4;
  cfg.window_h = 4;
  cfg.core_hidden = {8};
  cfg.m_rows = 4;
  cfg.m_cols = 4;
  cfg.head_hidden = {8};
  cfg.max_travel = 1.5;
  return cfg;
}

Patch make_patch(const SelectionConfig& cfg, Rng& rng) {
  Patch p;
  p.width = cfg.window_w;
  p.height = cfg.window_h;
  p.world_center = Vec2(5.0, 5.0);
  p.world_half_extents =
      Vec2(0.25 * cfg.window_w / 2.0, 0.25 * cfg.window_h / 2.0);
  p.values.resize(cfg.input_dim());
  std::normal_distribution<double> gauss(0.0, 0.5);
  for (int i = 0; i < p.values.size(); ++i) p.values[i] = gauss(rng);
  p.values.array() -= p.values.mean();
  return p;
}

Demonstration make_demo(const SelectionConfig& cfg, Rng& rng) {
  Demonstration d;
  d.observation = make_patch(cfg, rng);
  std::uniform_real_distribution<double> u(-0.8, 0.8);
  d.target.poa_xy =
      d.observation.world_center +
      Vec2(u(rng) * d.observation.world_half_extents.x(),
           u(rng) * d.observation.world_half_extents.y());
  d.target.travel_length = 0.3 + 0.4 * (u(rng) + 0.8);
  return d;
}

// Gaussian stockpile for expert/synthesis tests.
terrain::HeightMap pile_map() {
  terrain::HeightMap map({0.0, 0.0}, 0.25, 48, 48, 0.0);
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 48; ++x) {
      Vec2 c = map.cell_center({x, y});
      double dx = c.x() - 6.0, dy = c.y() - 6.0;
      map.set_elevation({x, y}, 1.2 * std::exp(-(dx * dx + dy * dy) / 2.42));
    }
  return map;
}

}  // namespace

TEST_CASE("selection config") {
  SelectionConfig cfg;
  REQUIRE(cfg.window_w == 16);
  REQUIRE(cfg.window_h == 16);
  REQUIRE(cfg.core_hidden == std::vector<int>{64, 64});
  REQUIRE(cfg.m_rows == 16);
  REQUIRE(cfg.m_cols == 16);
  REQUIRE(cfg.head_hidden == std::vector<int>{32});
  REQUIRE(cfg.head_input == HeadInput::ThetaM);
  REQUIRE(cfg.max_travel == Catch::Approx(1.5));
  REQUIRE(cfg.input_dim() == 256);
  REQUIRE_NOTHROW(cfg.validate());

  SECTION("theta-M feedback requires a square mixing matrix") {
    SelectionConfig bad = cfg;
    bad.m_cols = 8;
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
    bad.head_input = HeadInput::Theta;
    REQUIRE_NOTHROW(bad.validate());
  }

  SECTION("json round trip") {
    SelectionConfig c = small_config();
    c.head_input = HeadInput::Theta;
    SelectionConfig back =
        selection::selection_config_from_json(selection::selection_config_to_json(c));
    REQUIRE(back.window_w == c.window_w);
    REQUIRE(back.core_hidden == c.core_hidden);
    REQUIRE(back.head_input == HeadInput::Theta);
    REQUIRE_THROWS_AS(
        selection::selection_config_from_json({{"head_input", "bogus"}}),
        ConfigError);
  }
}

TEST_CASE("zeroed network emits the window center and half travel") {
  SelectionConfig cfg = small_config();
  SelectionNet net(cfg, 3);
  net.set_zero();
  Rng rng = make_rng(10);
  Patch p = make_patch(cfg, rng);
  ExcavationTarget t = net.forward(p);
  REQUIRE(t.poa_xy.x() == Catch::Approx(p.world_center.x()));
  REQUIRE(t.poa_xy.y() == Catch::Approx(p.world_center.y()));
  REQUIRE(t.travel_length == Catch::Approx(cfg.max_travel / 2.0));
}

TEST_CASE("network construction is deterministic per seed") {
  SelectionConfig cfg = small_config();
  SelectionNet a(cfg, 42), b(cfg, 42), c(cfg, 43);
  REQUIRE(a.params_flat() == b.params_flat());
  REQUIRE(a.params_flat() != c.params_flat());

  Rng rng = make_rng(4);
  Patch p = make_patch(cfg, rng);
  REQUIRE(a.forward(p).poa_xy == b.forward(p).poa_xy);

  SECTION("bad input dimension throws") {
    Eigen::VectorXd wrong = Eigen::VectorXd::Zero(7);
    REQUIRE_THROWS_AS(a.forward_raw(wrong), ShapeError);
  }
}

TEST_CASE("analytic gradients match central differences") {
  for (HeadInput hi : {HeadInput::ThetaM, HeadInput::Theta}) {
    SelectionConfig cfg = small_config();
    cfg.head_input = hi;
    SelectionNet net(cfg, 17);
    Rng rng = make_rng(23);
    std::vector<Demonstration> demos;
    for (int i = 0; i < 3; ++i) demos.push_back(make_demo(cfg, rng));

    selection::selection_loss(net, demos, true);
    Eigen::VectorXd g = net.grads_flat();
    Eigen::VectorXd p = net.params_flat();

    const double h = 1e-5;
    double worst = 0.0;
    for (int i = 0; i < p.size(); ++i) {
      Eigen::VectorXd pp = p;
      pp[i] = p[i] + h;
      net.set_params_flat(pp);
      double lp = selection::selection_loss(net, demos, false);
      pp[i] = p[i] - h;
      net.set_params_flat(pp);
      double lm = selection::selection_loss(net, demos, false);
      double fd = (lp - lm) / (2.0 * h);
      worst = std::max(worst, std::abs(fd - g[i]) / std::max(1.0, std::abs(fd)));
    }
    net.set_params_flat(p);
    REQUIRE(worst < 1e-4);
  }
}

TEST_CASE("training") {
  SECTION("loss curve is non-increasing and overfits ten demos") {
    SelectionConfig cfg = small_config();
    SelectionNet net(cfg, 7);
    Rng rng = make_rng(31);
    std::vector<Demonstration> demos;
    for (int i = 0; i < 10; ++i) demos.push_back(make_demo(cfg, rng));

    TrainParams hyper;
    hyper.epochs = 2000;
    std::vector<double> curve = selection::train(net, demos, hyper);
    REQUIRE(curve.size() == std::size_t(hyper.epochs) + 1);
    for (std::size_t i = 0; i + 1 < curve.size(); ++i)
      REQUIRE(curve[i + 1] <= curve[i] + 1e-12);
    REQUIRE(curve.back() < 1e-3);
  }

  SECTION("conflicting targets plateau at the conditional variance") {
    SelectionConfig cfg = small_config();
    SelectionNet net(cfg, 11);
    Rng rng = make_rng(5);
    Demonstration a = make_demo(cfg, rng);
    Demonstration b = a;
    b.target.poa_xy += Vec2(0.3, -0.2);
    b.target.travel_length = std::min(cfg.max_travel,
                                      a.target.travel_length + 0.25);

    Eigen::Vector3d gap{a.target.poa_xy.x() - b.target.poa_xy.x(),
                        a.target.poa_xy.y() - b.target.poa_xy.y(),
                        a.target.travel_length - b.target.travel_length};
    // Best constant prediction is the midpoint; MSE over 3 outputs and 2
    // demos is then |t1-t2|^2 / 12.
    double plateau = gap.squaredNorm() / 12.0;

    TrainParams hyper;
    hyper.epochs = 1500;
    std::vector<double> curve = selection::train(net, {a, b}, hyper);
    REQUIRE(curve.back() >= plateau - 1e-9);
    REQUIRE(curve.back() == Catch::Approx(plateau).epsilon(0.05));
  }

  SECTION("zero learning rate leaves parameters untouched") {
    SelectionConfig cfg = small_config();
    SelectionNet net(cfg, 2);
    Rng rng = make_rng(8);
    std::vector<Demonstration> demos{make_demo(cfg, rng)};
    Eigen::VectorXd before = net.params_flat();
    TrainParams hyper;
    hyper.epochs = 3;
    hyper.learning_rate = 0.0;
    selection::train(net, demos, hyper);
    REQUIRE(net.params_flat() == before);
  }

  SECTION("input validation") {
    SelectionConfig cfg = small_config();
    SelectionNet net(cfg, 2);
    REQUIRE_THROWS_AS(selection::train(net, {}, {}), EmptyInput);
    Demonstration bad;
    bad.observation.values = Eigen::VectorXd::Zero(5);
    REQUIRE_THROWS_AS(selection::train(net, {bad}, {}), ShapeError);
  }
}

TEST_CASE("output transform bounds survive input fuzz") {
  SelectionConfig cfg = small_config();
  SelectionNet net(cfg, 99);
  Rng rng = make_rng(1000);
  std::uniform_real_distribution<double> mag(-1e6, 1e6);
  Patch p = make_patch(cfg, rng);

  for (int trial = 0; trial < 10000; ++trial) {
    Eigen::VectorXd x(cfg.input_dim());
    for (int i = 0; i < x.size(); ++i) x[i] = mag(rng);
    ExcavationTarget t = net.apply_transform(net.forward_raw(x), p);
    REQUIRE(std::isfinite(t.poa_xy.x()));
    REQUIRE(std::isfinite(t.poa_xy.y()));
    REQUIRE(std::abs(t.poa_xy.x() - p.world_center.x()) <=
            p.world_half_extents.x());
    REQUIRE(std::abs(t.poa_xy.y() - p.world_center.y()) <=
            p.world_half_extents.y());
    REQUIRE(t.travel_length > 0.0);
    REQUIRE(t.travel_length <= cfg.max_travel);
  }
}

TEST_CASE("expert demonstrations") {
  SelectionConfig cfg;
  cfg.window_w = 16;
  cfg.window_h = 16;

  SECTION("a single peak is attacked at its cell center") {
    terrain::HeightMap map({0.0, 0.0}, 0.25, 48, 48, 0.0);
    map.set_elevation({20, 22}, 1.0);
    Demonstration d = selection::expert_demo(map, map.cell_center({20, 22}), cfg);
    Vec2 peak = map.cell_center({20, 22});
    REQUIRE(d.target.poa_xy.x() == Catch::Approx(peak.x()));
    REQUIRE(d.target.poa_xy.y() == Catch::Approx(peak.y()));
    // Single-cell pile: travel clamps up to one cell.
    REQUIRE(d.target.travel_length == Catch::Approx(map.cell_size()));
  }

  SECTION("equal peaks resolve to the first in row-major order") {
    terrain::HeightMap map({0.0, 0.0}, 0.25, 48, 48, 0.0);
    map.set_elevation({20, 22}, 1.0);
    map.set_elevation({24, 22}, 1.0);
    map.set_elevation({22, 25}, 1.0);
    Demonstration d =
        selection::expert_demo(map, map.cell_center({22, 23}), cfg);
    Vec2 first = map.cell_center({20, 22});
    REQUIRE(d.target.poa_xy.x() == Catch::Approx(first.x()));
    REQUIRE(d.target.poa_xy.y() == Catch::Approx(first.y()));
  }

  SECTION("water and rock cells are never targeted") {
    terrain::HeightMap map({0.0, 0.0}, 0.25, 48, 48, 0.0);
    map.set_elevation({20, 22}, 2.0);
    map.set_label({20, 22}, terrain::CellLabel::Water);
    map.set_elevation({21, 22}, 1.0);
    Demonstration d =
        selection::expert_demo(map, map.cell_center({20, 22}), cfg);
    Vec2 soil = map.cell_center({21, 22});
    REQUIRE(d.target.poa_xy.x() == Catch::Approx(soil.x()));
    REQUIRE(d.target.poa_xy.y() == Catch::Approx(soil.y()));
  }

  SECTION("an all-water window has no valid target") {
    terrain::HeightMap map({0.0, 0.0}, 0.25, 48, 48, 0.5,
                           terrain::CellLabel::Water);
    REQUIRE_THROWS_AS(selection::expert_demo(map, {6.0, 6.0}, cfg),
                      NoValidTarget);
  }

  SECTION("synthesized demos stay inside their windows") {
    terrain::HeightMap map = pile_map();
    std::vector<Demonstration> demos =
        selection::synthesize_demos(map, 40, 321, cfg);
    REQUIRE(demos.size() == 40);
    for (const Demonstration& d : demos) {
      REQUIRE(std::abs(d.target.poa_xy.x() - d.observation.world_center.x()) <=
              d.observation.world_half_extents.x() + 1e-9);
      REQUIRE(std::abs(d.target.poa_xy.y() - d.observation.world_center.y()) <=
              d.observation.world_half_extents.y() + 1e-9);
      REQUIRE(d.target.travel_length > 0.0);
      REQUIRE(d.target.travel_length <= cfg.max_travel + 1e-9);
    }
    REQUIRE_THROWS_AS(selection::synthesize_demos(map, 0, 1, cfg), ConfigError);
  }

  SECTION("demo jsonl round trip") {
    terrain::HeightMap map = pile_map();
    std::vector<Demonstration> demos =
        selection::synthesize_demos(map, 5, 77, cfg);
    selection::write_demos_jsonl("/tmp/aes_demos.jsonl", demos);
    std::vector<Demonstration> back =
        selection::read_demos_jsonl("/tmp/aes_demos.jsonl");
    REQUIRE(back.size() == demos.size());
    for (std::size_t i = 0; i < demos.size(); ++i) {
      REQUIRE(back[i].observation.values == demos[i].observation.values);
      REQUIRE(back[i].target.poa_xy == demos[i].target.poa_xy);
      REQUIRE(back[i].target.travel_length == demos[i].target.travel_length);
    }
  }
}

TEST_CASE("network json round trip") {
  SelectionConfig cfg = small_config();
  SelectionNet net(cfg, 88);
  SelectionNet back = SelectionNet::from_json(net.to_json());
  REQUIRE(back.params_flat() == net.params_flat());

  Rng rng = make_rng(6);
  Patch p = make_patch(cfg, rng);
  REQUIRE(back.forward(p).poa_xy == net.forward(p).poa_xy);
  REQUIRE(back.forward(p).travel_length == net.forward(p).travel_length);
}
