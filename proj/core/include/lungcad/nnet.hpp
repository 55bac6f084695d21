#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <vector>

#include "lungcad/rng.hpp"
#include "lungcad/volume.hpp"

namespace lungcad::nnet {

// Dense row-major tensor. Volumetric activations use [C, D, H, W] with W
// (x) fastest.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, double fill = 0.0);
  Tensor(std::vector<std::size_t> s, std::vector<double> d);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  double& at4(std::size_t c, std::size_t z, std::size_t y, std::size_t x) {
    return data[((c * shape[1] + z) * shape[2] + y) * shape[3] + x];
  }
  double at4(std::size_t c, std::size_t z, std::size_t y, std::size_t x) const {
    return data[((c * shape[1] + z) * shape[2] + y) * shape[3] + x];
  }
};

std::size_t product(const std::vector<std::size_t>& shape);

// Single-channel [1, nz, ny, nx] tensor from a grid.
Tensor from_grid(const Grid3& grid);

// input [Cin, D, H, W], kernel [Cout, Cin, K, K, K] (odd K), bias [Cout] or
// empty. Stride 1, zero "same" padding, cross-correlation.
Tensor conv3d(const Tensor& input, const Tensor& kernel, const std::vector<double>& bias = {});

// Channel-wise PReLU: x if x >= 0 else slope[c] * x. A single slope applies
// to all channels. For rank-1 tensors each element is its own channel.
Tensor prelu(const Tensor& x, const std::vector<double>& slope);

struct BatchNormStats {
  std::vector<double> mean, var, gain, bias;
};
inline constexpr double kBatchNormEps = 1e-5;
Tensor batchnorm_infer(const Tensor& x, const BatchNormStats& stats);

// 2x2x2 window, stride 2. Spatial extents must be even.
Tensor maxpool3d(const Tensor& x);

Eigen::VectorXd dense(const Eigen::VectorXd& x, const Eigen::MatrixXd& w, const Eigen::VectorXd& b);

// Inverted-scaling Bernoulli mask: each entry is 0 with probability `rate`,
// otherwise 1 / (1 - rate).
Eigen::VectorXd dropout_mask(Rng& rng, double rate, std::size_t n);

// Backward passes for the differentiable dense-side layers.
struct DenseGrad {
  Eigen::MatrixXd dw;
  Eigen::VectorXd db;
  Eigen::VectorXd dx;
};
DenseGrad dense_backward(const Eigen::VectorXd& x, const Eigen::MatrixXd& w, const Eigen::VectorXd& grad_out);

struct PreluGrad {
  Eigen::VectorXd dx;
  Eigen::VectorXd dslope;
};
Eigen::VectorXd prelu_vec(const Eigen::VectorXd& x, const Eigen::VectorXd& slope);
PreluGrad prelu_backward(const Eigen::VectorXd& x, const Eigen::VectorXd& slope, const Eigen::VectorXd& grad_out);
inline Eigen::VectorXd dropout_backward(const Eigen::VectorXd& mask, const Eigen::VectorXd& grad_out) {
  return mask.cwiseProduct(grad_out);
}

struct ConvBlockParams {
  Tensor kernel;  // [out, in, 5, 5, 5]
  std::vector<double> bias;
  std::vector<double> prelu_slope;
  BatchNormStats bn;

  std::size_t out_channels() const { return kernel.shape.at(0); }
  std::size_t in_channels() const { return kernel.shape.at(1); }
};

// Conv + PReLU -> batch norm -> maxpool
Tensor conv_block_forward(const Tensor& x, const ConvBlockParams& p);

struct BaseNetParams {
  ConvBlockParams block1, block2, block3;  // 32, 64, 128 filters
  Eigen::MatrixXd dense1_w;                // 1024 x (128 * 4^3)
  Eigen::VectorXd dense1_b;
  Eigen::VectorXd dense1_slope;            // PReLU, per unit
  double dropout_rate = 0.5;
  Eigen::RowVectorXd dense2_w;             // 1 x 1024
  double dense2_b = 0.0;

  void validate() const;
};

inline constexpr std::size_t kBaseNetInput = 32;
inline constexpr std::size_t kBaseNetFeatures = 1024;

// He-initialized parameters with identity batch-norm statistics.
BaseNetParams random_base_net(Rng& rng, std::size_t feature_dim = kBaseNetFeatures);
BaseNetParams zero_base_net(std::size_t feature_dim = kBaseNetFeatures);

enum class ForwardMode { kDeterministic, kMcDropout };

struct BaseNetOutput {
  double logit = 0.0;
  Eigen::VectorXd features;  // after dropout, before the final layer
  std::vector<std::vector<std::size_t>> shape_trace;  // per stage output shape
};

BaseNetOutput base_net_forward(const Tensor& block, const BaseNetParams& p, ForwardMode mode, Rng* rng = nullptr);

// First-order optimizers over a flat parameter vector.
struct SgdMomentum {
  double momentum = 0.9;
  Eigen::VectorXd velocity;
  // v <- momentum * v + g; theta <- theta - lr * v
  void step(Eigen::VectorXd& theta, const Eigen::VectorXd& grad, double lr);
};

struct Adam {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Eigen::VectorXd m, v;
  long long t = 0;
  void step(Eigen::VectorXd& theta, const Eigen::VectorXd& grad, double lr);
};

}  // namespace lungcad::nnet
