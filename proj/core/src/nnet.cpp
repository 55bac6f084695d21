#include "lungcad/nnet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace lungcad::nnet {

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(std::vector<std::size_t> s, double fill) : shape(std::move(s)), data(product(shape), fill) {}

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  require(data.size() == product(shape), ErrorKind::kValidation, "tensor data length does not match its shape");
}

Tensor from_grid(const Grid3& grid) {
  return Tensor({1, static_cast<std::size_t>(grid.nz()), static_cast<std::size_t>(grid.ny()),
                 static_cast<std::size_t>(grid.nx())},
                grid.data());
}

Tensor conv3d(const Tensor& input, const Tensor& kernel, const std::vector<double>& bias) {
  require(input.rank() == 4 && kernel.rank() == 5, ErrorKind::kValidation,
          "conv3d expects input [C,D,H,W] and kernel [O,C,K,K,K]");
  const std::size_t cin = input.dim(0), d = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  require(kernel.dim(1) == cin, ErrorKind::kValidation, "conv3d channel mismatch");
  require(kernel.dim(3) == k && kernel.dim(4) == k && k % 2 == 1, ErrorKind::kValidation,
          "conv3d kernel must be cubic with odd extent");
  require(bias.empty() || bias.size() == cout, ErrorKind::kValidation, "conv3d bias length mismatch");
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  Tensor out({cout, d, h, w}, 0.0);
  const auto D = static_cast<std::ptrdiff_t>(d), H = static_cast<std::ptrdiff_t>(h),
             W = static_cast<std::ptrdiff_t>(w);
  for (std::size_t o = 0; o < cout; ++o) {
    double* out_c = out.data.data() + o * d * h * w;
    if (!bias.empty()) std::fill(out_c, out_c + d * h * w, bias[o]);
    for (std::size_t c = 0; c < cin; ++c) {
      const double* in_c = input.data.data() + c * d * h * w;
      for (std::size_t kz = 0; kz < k; ++kz)
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const double wt = kernel.data[(((o * cin + c) * k + kz) * k + ky) * k + kx];
            if (wt == 0.0) continue;
            const auto dz = static_cast<std::ptrdiff_t>(kz) - pad;
            const auto dy = static_cast<std::ptrdiff_t>(ky) - pad;
            const auto dx = static_cast<std::ptrdiff_t>(kx) - pad;
            const auto z0 = std::max<std::ptrdiff_t>(0, -dz), z1 = std::min(D, D - dz);
            const auto y0 = std::max<std::ptrdiff_t>(0, -dy), y1 = std::min(H, H - dy);
            const auto x0 = std::max<std::ptrdiff_t>(0, -dx), x1 = std::min(W, W - dx);
            for (auto z = z0; z < z1; ++z)
              for (auto y = y0; y < y1; ++y) {
                double* orow = out_c + (z * H + y) * W;
                const double* irow = in_c + ((z + dz) * H + (y + dy)) * W + dx;
                for (auto x = x0; x < x1; ++x) orow[x] += wt * irow[x];
              }
          }
    }
  }
  return out;
}

Tensor prelu(const Tensor& x, const std::vector<double>& slope) {
  require(!slope.empty(), ErrorKind::kValidation, "prelu needs at least one slope");
  Tensor out = x;
  const std::size_t channels = x.rank() == 0 ? 1 : x.dim(0);
  require(slope.size() == 1 || slope.size() == channels, ErrorKind::kValidation, "prelu slope length mismatch");
  const std::size_t per = channels ? x.size() / channels : 0;
  for (std::size_t c = 0; c < channels; ++c) {
    const double a = slope.size() == 1 ? slope[0] : slope[c];
    for (std::size_t i = c * per; i < (c + 1) * per; ++i)
      if (out.data[i] < 0.0) out.data[i] *= a;
  }
  return out;
}

Tensor batchnorm_infer(const Tensor& x, const BatchNormStats& s) {
  const std::size_t channels = x.dim(0);
  require(s.mean.size() == channels && s.var.size() == channels && s.gain.size() == channels &&
              s.bias.size() == channels,
          ErrorKind::kValidation, "batchnorm statistics length mismatch");
  Tensor out = x;
  const std::size_t per = x.size() / channels;
  for (std::size_t c = 0; c < channels; ++c) {
    require(s.var[c] > 0.0, ErrorKind::kValidation, "batchnorm variance must be positive");
    const double scale = s.gain[c] / std::sqrt(s.var[c] + kBatchNormEps);
    for (std::size_t i = c * per; i < (c + 1) * per; ++i) out.data[i] = scale * (out.data[i] - s.mean[c]) + s.bias[c];
  }
  return out;
}

Tensor maxpool3d(const Tensor& x) {
  require(x.rank() == 4, ErrorKind::kValidation, "maxpool3d expects [C,D,H,W]");
  const std::size_t c = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(d % 2 == 0 && h % 2 == 0 && w % 2 == 0, ErrorKind::kValidation, "maxpool3d needs even spatial extents");
  Tensor out({c, d / 2, h / 2, w / 2});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t z = 0; z < d / 2; ++z)
      for (std::size_t y = 0; y < h / 2; ++y)
        for (std::size_t xx = 0; xx < w / 2; ++xx) {
          double m = -std::numeric_limits<double>::infinity();
          for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t b = 0; b < 2; ++b)
              for (std::size_t e = 0; e < 2; ++e) m = std::max(m, x.at4(ch, 2 * z + a, 2 * y + b, 2 * xx + e));
          out.at4(ch, z, y, xx) = m;
        }
  return out;
}

Eigen::VectorXd dense(const Eigen::VectorXd& x, const Eigen::MatrixXd& w, const Eigen::VectorXd& b) {
  require(w.cols() == x.size() && w.rows() == b.size(), ErrorKind::kValidation, "dense layer shape mismatch");
  return w * x + b;
}

Eigen::VectorXd dropout_mask(Rng& rng, double rate, std::size_t n) {
  require(rate >= 0.0 && rate < 1.0, ErrorKind::kValidation, "dropout rate must lie in [0, 1)");
  Eigen::VectorXd m(static_cast<Eigen::Index>(n));
  const double keep = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < m.size(); ++i) m[i] = (rate > 0.0 && rng.bernoulli(rate)) ? 0.0 : keep;
  return m;
}

DenseGrad dense_backward(const Eigen::VectorXd& x, const Eigen::MatrixXd& w, const Eigen::VectorXd& grad_out) {
  return {grad_out * x.transpose(), grad_out, w.transpose() * grad_out};
}

Eigen::VectorXd prelu_vec(const Eigen::VectorXd& x, const Eigen::VectorXd& slope) {
  Eigen::VectorXd y = x;
  for (Eigen::Index i = 0; i < y.size(); ++i)
    if (y[i] < 0.0) y[i] *= slope.size() == 1 ? slope[0] : slope[i];
  return y;
}

PreluGrad prelu_backward(const Eigen::VectorXd& x, const Eigen::VectorXd& slope, const Eigen::VectorXd& grad_out) {
  PreluGrad g{Eigen::VectorXd(x.size()), Eigen::VectorXd::Zero(slope.size())};
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const Eigen::Index s = slope.size() == 1 ? 0 : i;
    if (x[i] >= 0.0) {
      g.dx[i] = grad_out[i];
    } else {
      g.dx[i] = slope[s] * grad_out[i];
      g.dslope[s] += x[i] * grad_out[i];
    }
  }
  return g;
}

Tensor conv_block_forward(const Tensor& x, const ConvBlockParams& p) {
  return maxpool3d(batchnorm_infer(prelu(conv3d(x, p.kernel, p.bias), p.prelu_slope), p.bn));
}

void BaseNetParams::validate() const {
  const std::size_t expected_channels[3] = {32, 64, 128};
  const ConvBlockParams* blocks[3] = {&block1, &block2, &block3};
  std::size_t in = 1;
  for (int i = 0; i < 3; ++i) {
    const auto& b = *blocks[i];
    require(b.kernel.rank() == 5 && b.out_channels() == expected_channels[i] && b.in_channels() == in,
            ErrorKind::kValidation, "base net conv block " + std::to_string(i + 1) + " has wrong shape");
    in = b.out_channels();
  }
  require(dense1_w.cols() == static_cast<Eigen::Index>(128 * 4 * 4 * 4), ErrorKind::kValidation,
          "base net dense1 expects 8192 inputs");
  require(dense1_b.size() == dense1_w.rows() && dense2_w.size() == dense1_w.rows() &&
              (dense1_slope.size() == 1 || dense1_slope.size() == dense1_w.rows()),
          ErrorKind::kValidation, "base net dense layer dimensions do not chain");
  require(dropout_rate >= 0.0 && dropout_rate < 1.0, ErrorKind::kValidation, "dropout rate must lie in [0, 1)");
}

namespace {

ConvBlockParams make_block(std::size_t in, std::size_t out, Rng* rng) {
  ConvBlockParams b;
  b.kernel = Tensor({out, in, 5, 5, 5}, 0.0);
  if (rng) {
    const double sd = std::sqrt(2.0 / static_cast<double>(in * 125));
    for (double& v : b.kernel.data) v = rng->normal(0.0, sd);
  }
  b.bias.assign(out, 0.0);
  b.prelu_slope.assign(out, 0.25);
  b.bn = {std::vector<double>(out, 0.0), std::vector<double>(out, 1.0), std::vector<double>(out, 1.0),
          std::vector<double>(out, 0.0)};
  return b;
}

BaseNetParams make_net(std::size_t feature_dim, Rng* rng) {
  BaseNetParams p;
  p.block1 = make_block(1, 32, rng);
  p.block2 = make_block(32, 64, rng);
  p.block3 = make_block(64, 128, rng);
  const auto f = static_cast<Eigen::Index>(feature_dim);
  p.dense1_w = Eigen::MatrixXd::Zero(f, 8192);
  p.dense2_w = Eigen::RowVectorXd::Zero(f);
  if (rng) {
    const double sd1 = std::sqrt(2.0 / 8192.0), sd2 = std::sqrt(1.0 / static_cast<double>(feature_dim));
    for (Eigen::Index i = 0; i < p.dense1_w.size(); ++i) p.dense1_w.data()[i] = rng->normal(0.0, sd1);
    for (Eigen::Index i = 0; i < f; ++i) p.dense2_w[i] = rng->normal(0.0, sd2);
  }
  p.dense1_b = Eigen::VectorXd::Zero(f);
  p.dense1_slope = Eigen::VectorXd::Constant(f, 0.25);
  return p;
}

}  // namespace

BaseNetParams random_base_net(Rng& rng, std::size_t feature_dim) { return make_net(feature_dim, &rng); }
BaseNetParams zero_base_net(std::size_t feature_dim) { return make_net(feature_dim, nullptr); }

BaseNetOutput base_net_forward(const Tensor& block, const BaseNetParams& p, ForwardMode mode, Rng* rng) {
  require(block.rank() == 4 && block.dim(0) == 1 && block.dim(1) == kBaseNetInput && block.dim(2) == kBaseNetInput &&
              block.dim(3) == kBaseNetInput,
          ErrorKind::kValidation, "base net expects a single-channel 32^3 input");
  p.validate();
  BaseNetOutput out;
  Tensor x = conv_block_forward(block, p.block1);
  out.shape_trace.push_back(x.shape);
  x = conv_block_forward(x, p.block2);
  out.shape_trace.push_back(x.shape);
  x = conv_block_forward(x, p.block3);
  out.shape_trace.push_back(x.shape);

  const Eigen::Map<const Eigen::VectorXd> flat(x.data.data(), static_cast<Eigen::Index>(x.size()));
  Eigen::VectorXd h = prelu_vec(dense(flat, p.dense1_w, p.dense1_b), p.dense1_slope);
  if (mode == ForwardMode::kMcDropout) {
    require(rng != nullptr, ErrorKind::kValidation, "MC dropout needs a generator");
    h = h.cwiseProduct(dropout_mask(*rng, p.dropout_rate, static_cast<std::size_t>(h.size())));
  }
  out.shape_trace.push_back({static_cast<std::size_t>(h.size())});
  out.logit = p.dense2_w.dot(h) + p.dense2_b;
  out.shape_trace.push_back({1});
  out.features = std::move(h);
  return out;
}

void SgdMomentum::step(Eigen::VectorXd& theta, const Eigen::VectorXd& grad, double lr) {
  if (velocity.size() != theta.size()) velocity = Eigen::VectorXd::Zero(theta.size());
  velocity = momentum * velocity + grad;
  theta -= lr * velocity;
}

void Adam::step(Eigen::VectorXd& theta, const Eigen::VectorXd& grad, double lr) {
  if (m.size() != theta.size()) {
    m = Eigen::VectorXd::Zero(theta.size());
    v = Eigen::VectorXd::Zero(theta.size());
    t = 0;
  }
  ++t;
  m = beta1 * m + (1.0 - beta1) * grad;
  v = beta2 * v + (1.0 - beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  theta.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
}

}  // namespace lungcad::nnet
