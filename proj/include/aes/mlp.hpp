#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aes/common.hpp"

namespace aes::nn {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

// Fully-connected net: tanh on hidden layers, linear output. Gradients are
// accumulated into per-layer buffers by backward(); callers zero them between
// batches. All randomness flows through the seed passed to the constructor.
class Mlp {
public:
  Mlp() = default;

  Mlp(std::vector<int> dims, std::uint64_t seed) : dims_(std::move(dims)) {
    if (dims_.size() < 2) throw ShapeError("Mlp: need at least [in, out]");
    for (int d : dims_)
      if (d <= 0) throw ShapeError("Mlp: non-positive layer dim");
    Rng rng = make_rng(seed);
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      int fan_in = dims_[l], fan_out = dims_[l + 1];
      double s = std::sqrt(6.0 / (fan_in + fan_out));
      std::uniform_real_distribution<double> u(-s, s);
      MatrixXd w(fan_out, fan_in);
      for (int r = 0; r < fan_out; ++r)
        for (int c = 0; c < fan_in; ++c) w(r, c) = u(rng);
      weights_.push_back(std::move(w));
      biases_.push_back(VectorXd::Zero(fan_out));
      grad_w_.push_back(MatrixXd::Zero(fan_out, fan_in));
      grad_b_.push_back(VectorXd::Zero(fan_out));
    }
  }

  int input_dim() const { return dims_.front(); }
  int output_dim() const { return dims_.back(); }
  const std::vector<int>& dims() const { return dims_; }
  std::size_t layer_count() const { return weights_.size(); }

  // Activations per layer, kept so backward() can replay the pass.
  struct Tape {
    std::vector<VectorXd> post;  // post[0] = input, post[l+1] = layer l output
  };

  VectorXd forward(const VectorXd& x, Tape* tape = nullptr) const {
    if (x.size() != dims_.front())
      throw ShapeError("Mlp::forward: input dim " + std::to_string(x.size()) +
                       ", expected " + std::to_string(dims_.front()));
    VectorXd a = x;
    if (tape) {
      tape->post.clear();
      tape->post.push_back(a);
    }
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      VectorXd z = weights_[l] * a + biases_[l];
      a = (l + 1 < weights_.size()) ? VectorXd(z.array().tanh()) : z;
      if (tape) tape->post.push_back(a);
    }
    return a;
  }

  // Backpropagates dL/dy through the taped pass; accumulates parameter
  // gradients and returns dL/dx.
  VectorXd backward(const Tape& tape, const VectorXd& dy) {
    if (tape.post.size() != weights_.size() + 1)
      throw ShapeError("Mlp::backward: tape does not match net");
    if (dy.size() != dims_.back())
      throw ShapeError("Mlp::backward: dy dim mismatch");
    VectorXd delta = dy;
    for (std::size_t l = weights_.size(); l-- > 0;) {
      if (l + 1 < weights_.size()) {
        // tanh'(z) = 1 - tanh(z)^2, and post holds tanh(z)
        delta = delta.cwiseProduct(
            (1.0 - tape.post[l + 1].array().square()).matrix());
      }
      grad_w_[l] += delta * tape.post[l].transpose();
      grad_b_[l] += delta;
      delta = weights_[l].transpose() * delta;
    }
    return delta;
  }

  void zero_grad() {
    for (auto& g : grad_w_) g.setZero();
    for (auto& g : grad_b_) g.setZero();
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l)
      n += static_cast<std::size_t>(weights_[l].size() + biases_[l].size());
    return n;
  }

  // Row-major flattening, weights then bias per layer.
  void write_params(double* out) const {
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      const MatrixXd& w = weights_[l];
      for (int r = 0; r < w.rows(); ++r)
        for (int c = 0; c < w.cols(); ++c) *out++ = w(r, c);
      for (int r = 0; r < biases_[l].size(); ++r) *out++ = biases_[l][r];
    }
  }

  void read_params(const double* in) {
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      MatrixXd& w = weights_[l];
      for (int r = 0; r < w.rows(); ++r)
        for (int c = 0; c < w.cols(); ++c) w(r, c) = *in++;
      for (int r = 0; r < biases_[l].size(); ++r) biases_[l][r] = *in++;
    }
  }

  void write_grads(double* out) const {
    for (std::size_t l = 0; l < grad_w_.size(); ++l) {
      const MatrixXd& g = grad_w_[l];
      for (int r = 0; r < g.rows(); ++r)
        for (int c = 0; c < g.cols(); ++c) *out++ = g(r, c);
      for (int r = 0; r < grad_b_[l].size(); ++r) *out++ = grad_b_[l][r];
    }
  }

  const MatrixXd& weight(std::size_t l) const { return weights_.at(l); }
  MatrixXd& weight(std::size_t l) { return weights_.at(l); }
  const VectorXd& bias(std::size_t l) const { return biases_.at(l); }
  VectorXd& bias(std::size_t l) { return biases_.at(l); }

  void set_zero() {
    for (auto& w : weights_) w.setZero();
    for (auto& b : biases_) b.setZero();
  }

  json to_json() const {
    json j;
    j["dims"] = dims_;
    j["layers"] = json::array();
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      json layer;
      std::vector<double> w(static_cast<std::size_t>(weights_[l].size()));
      const MatrixXd& m = weights_[l];
      std::size_t k = 0;
      for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c) w[k++] = m(r, c);
      layer["weights"] = w;
      layer["bias"] =
          std::vector<double>(biases_[l].data(),
                              biases_[l].data() + biases_[l].size());
      j["layers"].push_back(layer);
    }
    return j;
  }

  static Mlp from_json(const json& j) {
    Mlp net(j.at("dims").get<std::vector<int>>(), 0);
    const json& layers = j.at("layers");
    if (layers.size() != net.weights_.size())
      throw ShapeError("Mlp::from_json: layer count mismatch");
    for (std::size_t l = 0; l < net.weights_.size(); ++l) {
      MatrixXd& m = net.weights_[l];
      const auto w = layers[l].at("weights").get<std::vector<double>>();
      if (w.size() != static_cast<std::size_t>(m.size()))
        throw ShapeError("Mlp::from_json: weight size mismatch");
      std::size_t k = 0;
      for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c) m(r, c) = w[k++];
      const auto b = layers[l].at("bias").get<std::vector<double>>();
      if (b.size() != static_cast<std::size_t>(net.biases_[l].size()))
        throw ShapeError("Mlp::from_json: bias size mismatch");
      for (std::size_t r = 0; r < b.size(); ++r)
        net.biases_[l][static_cast<int>(r)] = b[r];
    }
    return net;
  }

private:
  std::vector<int> dims_;
  std::vector<MatrixXd> weights_;
  std::vector<VectorXd> biases_;
  std::vector<MatrixXd> grad_w_;
  std::vector<VectorXd> grad_b_;
};

}  // namespace aes::nn
