#pragma once

// Small fully connected encoder mapping input vectors to the unit sphere:
// affine layers with an elementwise nonlinearity, a linear output layer, and
// a final row normalization.  Forward keeps the activations needed for the
// manual reverse pass; backward turns a tangent gradient on the normalized
// output into parameter gradients.

#include "dsf/common.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace dsf {

struct EncoderSpec {
  int input_dim = 16;
  std::vector<int> hidden = {32};
  int output_dim = 8;
  std::string activation = "tanh";  // tanh | relu | identity

  std::vector<int> widths() const {
    std::vector<int> w;
    w.push_back(input_dim);
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(output_dim);
    return w;
  }

  void validate() const {
    if (input_dim < 1) throw ValidationError("encoder.input_dim", "must be >= 1");
    if (output_dim < 2) throw ValidationError("encoder.output_dim", "must be >= 2");
    for (int h : hidden) {
      if (h < 1) throw ValidationError("encoder.hidden", "widths must be >= 1");
    }
    if (activation != "tanh" && activation != "relu" && activation != "identity") {
      throw ValidationError("encoder.activation", "must be tanh, relu, or identity");
    }
  }
};

class MlpEncoder {
 public:
  MlpEncoder() = default;

  MlpEncoder(const EncoderSpec& spec, std::uint64_t init_seed) : spec_(spec) {
    spec.validate();
    const auto w = spec.widths();
    std::mt19937_64 rng(derive_seed(init_seed, "encoder-init"));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t layer = 0; layer + 1 < w.size(); ++layer) {
      Eigen::MatrixXd weight(w[layer + 1], w[layer]);
      const double scale = std::sqrt(2.0 / w[layer]);
      for (long i = 0; i < weight.rows(); ++i)
        for (long j = 0; j < weight.cols(); ++j) weight(i, j) = scale * normal(rng);
      weights.push_back(std::move(weight));
      biases.push_back(Eigen::VectorXd::Zero(w[layer + 1]));
    }
  }

  const EncoderSpec& spec() const { return spec_; }
  int layer_count() const { return static_cast<int>(weights.size()); }

  // Activations cached by forward: post[0] is the input, post[k] the output
  // of layer k (post-nonlinearity; the last layer is linear), y_norms the
  // row norms before normalization, z the unit-row output.
  struct Trace {
    std::vector<Eigen::MatrixXd> post;
    Eigen::VectorXd y_norms;
    Eigen::MatrixXd z;
  };

  Trace forward(const Eigen::MatrixXd& x) const {
    if (x.cols() != spec_.input_dim) {
      throw std::invalid_argument("encoder: input dimension mismatch");
    }
    Trace t;
    t.post.reserve(weights.size() + 1);
    t.post.push_back(x);
    for (std::size_t k = 0; k < weights.size(); ++k) {
      Eigen::MatrixXd a =
          (t.post.back() * weights[k].transpose()).rowwise() + biases[k].transpose();
      if (k + 1 < weights.size()) apply_activation(a);
      t.post.push_back(std::move(a));
    }
    const Eigen::MatrixXd& y = t.post.back();
    t.y_norms = y.rowwise().norm();
    for (long i = 0; i < t.y_norms.size(); ++i) {
      if (!(t.y_norms(i) > 1e-12)) {
        throw std::runtime_error("encoder: output row collapsed to zero norm");
      }
    }
    t.z = y.array().colwise() / t.y_norms.array();
    return t;
  }

  Eigen::MatrixXd embed(const Eigen::MatrixXd& x) const { return forward(x).z; }

  struct Gradients {
    std::vector<Eigen::MatrixXd> w;
    std::vector<Eigen::VectorXd> b;
  };

  // grad_z holds dLoss/dz rows.  Through z = y/|y| the pullback is
  // (g - z (z . g)) / |y| per row; with tangent g the projection is a no-op
  // but it is kept so the formula is exact for any caller.
  Gradients backward(const Trace& t, const Eigen::MatrixXd& grad_z) const {
    Eigen::MatrixXd delta(grad_z.rows(), grad_z.cols());
    for (long i = 0; i < grad_z.rows(); ++i) {
      const double along = t.z.row(i).dot(grad_z.row(i));
      delta.row(i) = (grad_z.row(i) - along * t.z.row(i)) / t.y_norms(i);
    }
    Gradients g;
    g.w.resize(weights.size());
    g.b.resize(weights.size());
    for (int k = layer_count() - 1; k >= 0; --k) {
      g.w[k] = delta.transpose() * t.post[k];
      g.b[k] = delta.colwise().sum().transpose();
      if (k > 0) {
        delta = (delta * weights[k]).eval();
        mask_activation(t.post[k], delta);
      }
    }
    return g;
  }

  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;

 private:
  void apply_activation(Eigen::MatrixXd& a) const {
    if (spec_.activation == "tanh") {
      a = a.array().tanh();
    } else if (spec_.activation == "relu") {
      a = a.cwiseMax(0.0);
    }
  }

  // Multiplies delta by the activation derivative expressed through the
  // cached post-activation values (tanh' = 1 - h^2, relu' = [h > 0]).
  void mask_activation(const Eigen::MatrixXd& post, Eigen::MatrixXd& delta) const {
    if (spec_.activation == "tanh") {
      delta.array() *= 1.0 - post.array().square();
    } else if (spec_.activation == "relu") {
      delta.array() *= (post.array() > 0.0).cast<double>();
    }
  }

  EncoderSpec spec_;
};

}  // namespace dsf
