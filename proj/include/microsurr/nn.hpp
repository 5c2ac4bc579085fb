#ifndef MICROSURR_NN_HPP
#define MICROSURR_NN_HPP

// Dense building blocks with hand-written reverse passes. Activations are
// row-per-sample matrices; weights map rows as Y = X W + b.

#include "core.hpp"

#include <Eigen/Dense>

#include <string>
#include <unordered_map>
#include <vector>

namespace microsurr::nn {

using Mat = Eigen::MatrixXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

struct ParamBlock {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;

  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

/// All trainable tensors in one contiguous vector.
class ParamStore {
 public:
  int add(const std::string& name, int rows, int cols) {
    require(rows > 0 && cols > 0, ErrorKind::InvalidArgument, "empty parameter block " + name);
    require(!index_.count(name), ErrorKind::InvalidArgument, "duplicate parameter block " + name);
    ParamBlock b{name, rows, cols, values_.size()};
    values_.resize(values_.size() + b.size(), 0.0);
    index_[name] = static_cast<int>(blocks_.size());
    blocks_.push_back(b);
    return static_cast<int>(blocks_.size()) - 1;
  }

  std::size_t size() const { return values_.size(); }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  const ParamBlock& block(int i) const { return blocks_[static_cast<std::size_t>(i)]; }
  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  ConstMap view(int i) const { return view(i, values_); }
  MutMap view(int i) { return MutMap(values_.data() + block(i).offset, block(i).rows, block(i).cols); }

  /// Same layout over an external buffer (gradients, optimizer moments).
  ConstMap view(int i, const std::vector<double>& buf) const {
    return ConstMap(buf.data() + block(i).offset, block(i).rows, block(i).cols);
  }
  MutMap view(int i, std::vector<double>& buf) const {
    return MutMap(buf.data() + block(i).offset, block(i).rows, block(i).cols);
  }

  bool same_layout(const ParamStore& o) const {
    if (blocks_.size() != o.blocks_.size()) return false;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const ParamBlock &a = blocks_[i], &b = o.blocks_[i];
      if (a.name != b.name || a.rows != b.rows || a.cols != b.cols) return false;
    }
    return true;
  }

 private:
  std::vector<double> values_;
  std::vector<ParamBlock> blocks_;
  std::unordered_map<std::string, int> index_;
};

/// Uniform Glorot scaling for a fan_in x fan_out weight.
inline void glorot_uniform(MutMap w, int fan_in, int fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = u(rng);
  }
}

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
  Mat xhat;
  Eigen::VectorXd inv_std;
};

/// Row-wise layer normalization with gain `g` and shift `b` (1 x n each).
inline Mat layer_norm(const Mat& x, const ConstMap& g, const ConstMap& b, LayerNormCache* cache) {
  const Eigen::Index n = x.cols();
  const Eigen::VectorXd mu = x.rowwise().mean();
  Mat xc = x.colwise() - mu;
  const Eigen::VectorXd inv = ((xc.array().square().rowwise().sum() / static_cast<double>(n)) + kLayerNormEps)
                                  .rsqrt()
                                  .matrix();
  xc.array().colwise() *= inv.array();
  Mat y = (xc.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
  if (cache) {
    cache->xhat = std::move(xc);
    cache->inv_std = inv;
  }
  return y;
}

inline Mat layer_norm_backward(const Mat& dy, const LayerNormCache& c, const ConstMap& g, MutMap dg, MutMap db) {
  const double n = static_cast<double>(dy.cols());
  dg.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  db.row(0) += dy.colwise().sum();
  const Mat dxhat = (dy.array().rowwise() * g.row(0).array()).matrix();
  const Eigen::VectorXd m1 = dxhat.rowwise().sum() / n;
  const Eigen::VectorXd m2 = (dxhat.array() * c.xhat.array()).rowwise().sum().matrix() / n;
  Mat dx = dxhat.colwise() - m1;
  dx -= (c.xhat.array().colwise() * m2.array()).matrix();
  dx.array().colwise() *= c.inv_std.array();
  return dx;
}

/// Two-layer perceptron: Linear, LayerNorm, ReLU, optional dropout, Linear.
struct MLP2 {
  int in = 0, hidden = 0, out = 0;
  int w1 = -1, b1 = -1, g = -1, beta = -1, w2 = -1, b2 = -1;

  static MLP2 create(ParamStore& s, const std::string& prefix, int in, int hidden, int out) {
    MLP2 m;
    m.in = in;
    m.hidden = hidden;
    m.out = out;
    m.w1 = s.add(prefix + ".w1", in, hidden);
    m.b1 = s.add(prefix + ".b1", 1, hidden);
    m.g = s.add(prefix + ".ln_g", 1, hidden);
    m.beta = s.add(prefix + ".ln_b", 1, hidden);
    m.w2 = s.add(prefix + ".w2", hidden, out);
    m.b2 = s.add(prefix + ".b2", 1, out);
    return m;
  }

  void init(ParamStore& s, Rng& rng) const {
    glorot_uniform(s.view(w1), in, hidden, rng);
    s.view(b1).setZero();
    s.view(g).setOnes();
    s.view(beta).setZero();
    glorot_uniform(s.view(w2), hidden, out, rng);
    s.view(b2).setZero();
  }
};

struct MLP2Cache {
  LayerNormCache ln;
  Mat z;             ///< hidden activation after ReLU and dropout
  double keep_scale = 1.0;
};

/// Pre-activation of the first layer is supplied by the caller so that
/// split inputs (concatenations) never need to be materialized.
inline Mat mlp2_tail(const ParamStore& s, const MLP2& m, Mat h, const Mat* dropout_mask, double keep_scale,
                     MLP2Cache* cache) {
  h.rowwise() += s.view(m.b1).row(0);
  Mat a = layer_norm(h, s.view(m.g), s.view(m.beta), cache ? &cache->ln : nullptr);
  a = a.cwiseMax(0.0);
  if (dropout_mask) a.array() *= dropout_mask->array() * keep_scale;
  Mat y = a * s.view(m.w2);
  y.rowwise() += s.view(m.b2).row(0);
  if (cache) {
    cache->z = std::move(a);
    cache->keep_scale = dropout_mask ? keep_scale : 1.0;
  }
  return y;
}

inline Mat mlp2_forward(const ParamStore& s, const MLP2& m, const Mat& x, MLP2Cache* cache) {
  require(x.cols() == m.in, ErrorKind::ShapeMismatch,
          "perceptron expects " + std::to_string(m.in) + " inputs, got " + std::to_string(x.cols()));
  return mlp2_tail(s, m, x * s.view(m.w1), nullptr, 1.0, cache);
}

/// Reverse pass down to the first-layer pre-activation; weight gradients of
/// the second layer and the normalization are accumulated into `grad`.
inline Mat mlp2_backward_tail(const ParamStore& s, const MLP2& m, const Mat& dy, const MLP2Cache& c,
                              std::vector<double>& grad) {
  s.view(m.w2, grad) += c.z.transpose() * dy;
  s.view(m.b2, grad).row(0) += dy.colwise().sum();
  Mat dz = dy * s.view(m.w2).transpose();
  dz = (c.z.array() > 0.0).select(dz * c.keep_scale, 0.0);
  Mat dh = layer_norm_backward(dz, c.ln, s.view(m.g), s.view(m.g, grad), s.view(m.beta, grad));
  s.view(m.b1, grad).row(0) += dh.colwise().sum();
  return dh;
}

inline Mat mlp2_backward(const ParamStore& s, const MLP2& m, const Mat& x, const Mat& dy, const MLP2Cache& c,
                         std::vector<double>& grad) {
  const Mat dh = mlp2_backward_tail(s, m, dy, c, grad);
  s.view(m.w1, grad) += x.transpose() * dh;
  return dh * s.view(m.w1).transpose();
}

}  // namespace microsurr::nn

#endif  // MICROSURR_NN_HPP
