#pragma once

// Per-sample layer kernels with hand-written backward passes. All weights of
// a model live in one flat array; a layer only stores offsets into it, and
// gradients are accumulated into a flat array of the same layout.

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "sprout/error.hpp"
#include "sprout/rng.hpp"
#include "sprout/tensor.hpp"

namespace sprout::nn {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <class T>
using MatMap = Eigen::Map<Mat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const Mat<T>>;
template <class T>
using RowVecMap = Eigen::Map<RowVec<T>>;
template <class T>
using ConstRowVecMap = Eigen::Map<const RowVec<T>>;

enum class Init { Zero, One, Xavier, Normal002, FanIn };

struct ParamSlot {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t size = 0;
  Init init = Init::Zero;
  // Fan sizes used by the initializers.
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
};

class ParamLayout {
 public:
  std::size_t add(std::string name, Shape shape, Init init, std::size_t fan_in = 0, std::size_t fan_out = 0) {
    ParamSlot s;
    s.name = std::move(name);
    s.size = shape_numel(shape);
    s.shape = std::move(shape);
    s.offset = total_;
    s.init = init;
    s.fan_in = fan_in;
    s.fan_out = fan_out;
    total_ += s.size;
    slots_.push_back(std::move(s));
    return slots_.back().offset;
  }

  const std::vector<ParamSlot>& slots() const noexcept { return slots_; }
  std::size_t total() const noexcept { return total_; }

  template <class T>
  void initialize(std::span<T> w, Rng& rng) const {
    for (const auto& s : slots_) {
      T* p = w.data() + s.offset;
      switch (s.init) {
        case Init::Zero:
          std::fill(p, p + s.size, T(0));
          break;
        case Init::One:
          std::fill(p, p + s.size, T(1));
          break;
        case Init::Xavier: {
          const double bound = std::sqrt(6.0 / static_cast<double>(s.fan_in + s.fan_out));
          for (std::size_t i = 0; i < s.size; ++i) p[i] = static_cast<T>((2.0 * uniform01(rng) - 1.0) * bound);
          break;
        }
        case Init::FanIn: {
          const double bound = std::sqrt(3.0 / static_cast<double>(s.fan_in));
          for (std::size_t i = 0; i < s.size; ++i) p[i] = static_cast<T>((2.0 * uniform01(rng) - 1.0) * bound);
          break;
        }
        case Init::Normal002:
          for (std::size_t i = 0; i < s.size; ++i) p[i] = static_cast<T>(0.02 * standard_normal(rng));
          break;
      }
    }
  }

 private:
  std::vector<ParamSlot> slots_;
  std::size_t total_ = 0;
};

// ---------------------------------------------------------------------------
// Elementwise activations.

template <class T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <class T>
Mat<T> silu(const Mat<T>& x) {
  return x.unaryExpr([](T v) { return v * sigmoid(v); });
}

template <class T>
Mat<T> silu_backward(const Mat<T>& x, const Mat<T>& dy) {
  return dy.binaryExpr(x, [](T g, T v) {
    const T s = sigmoid(v);
    return g * s * (T(1) + v * (T(1) - s));
  });
}

namespace detail {
template <class T>
constexpr T kGeluC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
}

// tanh approximation.
template <class T>
Mat<T> gelu(const Mat<T>& x) {
  return x.unaryExpr([](T v) {
    const T u = detail::kGeluC<T> * (v + T(0.044715) * v * v * v);
    return T(0.5) * v * (T(1) + std::tanh(u));
  });
}

template <class T>
Mat<T> gelu_backward(const Mat<T>& x, const Mat<T>& dy) {
  return dy.binaryExpr(x, [](T g, T v) {
    const T u = detail::kGeluC<T> * (v + T(0.044715) * v * v * v);
    const T th = std::tanh(u);
    const T du = detail::kGeluC<T> * (T(1) + T(3) * T(0.044715) * v * v);
    return g * (T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * du);
  });
}

// ---------------------------------------------------------------------------
// Linear over rows: y = x W^T + b, x is N x in.

struct Linear {
  std::size_t in = 0, out = 0;
  std::size_t w = 0, b = 0;

  static Linear make(ParamLayout& layout, const std::string& name, std::size_t in, std::size_t out,
                     Init weight_init = Init::Xavier, Init bias_init = Init::Zero) {
    Linear l;
    l.in = in;
    l.out = out;
    l.w = layout.add(name + ".weight", {out, in}, weight_init, in, out);
    l.b = layout.add(name + ".bias", {out}, bias_init, in, out);
    return l;
  }

  template <class T>
  Mat<T> forward(const T* P, const Mat<T>& x) const {
    ConstMatMap<T> W(P + w, out, in);
    Mat<T> y = x * W.transpose();
    y.rowwise() += ConstRowVecMap<T>(P + b, out);
    return y;
  }

  template <class T>
  Mat<T> backward(const T* P, T* G, const Mat<T>& x, const Mat<T>& dy) const {
    MatMap<T>(G + w, out, in).noalias() += dy.transpose() * x;
    RowVecMap<T>(G + b, out) += dy.colwise().sum();
    return dy * ConstMatMap<T>(P + w, out, in);
  }
};

// ---------------------------------------------------------------------------
// im2col / col2im over a single C x H x W map stored as C x (H*W).

struct ConvGeom {
  std::size_t k = 3, stride = 1, pad = 1;
  std::size_t out_size(std::size_t in) const { return (in + 2 * pad - k) / stride + 1; }
};

template <class T>
Mat<T> im2col(const Mat<T>& x, std::size_t C, std::size_t H, std::size_t W, const ConvGeom& g) {
  const std::size_t Ho = g.out_size(H), Wo = g.out_size(W);
  Mat<T> cols = Mat<T>::Zero(C * g.k * g.k, Ho * Wo);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const std::size_t row = (c * g.k + ki) * g.k + kj;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(W)) continue;
            cols(row, oy * Wo + ox) = x(c, iy * W + ix);
          }
        }
      }
  return cols;
}

template <class T>
Mat<T> col2im(const Mat<T>& cols, std::size_t C, std::size_t H, std::size_t W, const ConvGeom& g) {
  const std::size_t Ho = g.out_size(H), Wo = g.out_size(W);
  Mat<T> x = Mat<T>::Zero(C, H * W);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const std::size_t row = (c * g.k + ki) * g.k + kj;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(W)) continue;
            x(c, iy * W + ix) += cols(row, oy * Wo + ox);
          }
        }
      }
  return x;
}

// Strided convolution, weight cout x cin x k x k.
struct Conv2d {
  std::size_t cin = 0, cout = 0;
  ConvGeom geom;
  std::size_t w = 0, b = 0;

  static Conv2d make(ParamLayout& layout, const std::string& name, std::size_t cin, std::size_t cout,
                     ConvGeom geom, Init weight_init = Init::FanIn) {
    Conv2d c;
    c.cin = cin;
    c.cout = cout;
    c.geom = geom;
    const std::size_t fan_in = cin * geom.k * geom.k;
    c.w = layout.add(name + ".weight", {cout, cin, geom.k, geom.k}, weight_init, fan_in, cout * geom.k * geom.k);
    c.b = layout.add(name + ".bias", {cout}, Init::Zero);
    return c;
  }

  // x: cin x (H*W). Returns cout x (Ho*Wo); im2col columns go to *cols.
  template <class T>
  Mat<T> forward(const T* P, const Mat<T>& x, std::size_t H, std::size_t W, Mat<T>* cols) const {
    Mat<T> c = im2col(x, cin, H, W, geom);
    ConstMatMap<T> Wm(P + w, cout, cin * geom.k * geom.k);
    Mat<T> y = Wm * c;
    y.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(P + b, cout);
    if (cols) *cols = std::move(c);
    return y;
  }

  template <class T>
  Mat<T> backward(const T* P, T* G, const Mat<T>& cols, const Mat<T>& dy, std::size_t H, std::size_t W) const {
    const std::size_t kk = cin * geom.k * geom.k;
    MatMap<T>(G + w, cout, kk).noalias() += dy * cols.transpose();
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(G + b, cout) += dy.rowwise().sum();
    Mat<T> dcols = ConstMatMap<T>(P + w, cout, kk).transpose() * dy;
    return col2im(dcols, cin, H, W, geom);
  }
};

// Transposed convolution (adjoint of a strided conv), weight cin x cout x k x k.
// With k=4, stride=2, pad=1 it doubles the spatial size.
struct ConvTranspose2d {
  std::size_t cin = 0, cout = 0;
  ConvGeom geom{4, 2, 1};
  std::size_t w = 0, b = 0;

  static ConvTranspose2d make(ParamLayout& layout, const std::string& name, std::size_t cin, std::size_t cout,
                              Init weight_init = Init::FanIn) {
    ConvTranspose2d c;
    c.cin = cin;
    c.cout = cout;
    const std::size_t kk = c.geom.k * c.geom.k;
    // Each output pixel receives cin * (k/stride)^2 taps.
    const std::size_t fan_in = cin * kk / (c.geom.stride * c.geom.stride);
    c.w = layout.add(name + ".weight", {cin, cout, c.geom.k, c.geom.k}, weight_init, fan_in, cout * kk);
    c.b = layout.add(name + ".bias", {cout}, Init::Zero);
    return c;
  }

  std::size_t out_size(std::size_t in) const { return (in - 1) * geom.stride + geom.k - 2 * geom.pad; }

  // x: cin x (h*w). Returns cout x (H*W) with H = out_size(h).
  template <class T>
  Mat<T> forward(const T* P, const Mat<T>& x, std::size_t h, std::size_t wd) const {
    const std::size_t kk = cout * geom.k * geom.k;
    Mat<T> cols = ConstMatMap<T>(P + w, cin, kk).transpose() * x;
    Mat<T> y = col2im(cols, cout, out_size(h), out_size(wd), geom);
    y.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(P + b, cout);
    return y;
  }

  template <class T>
  Mat<T> backward(const T* P, T* G, const Mat<T>& x, const Mat<T>& dy, std::size_t h, std::size_t wd) const {
    const std::size_t kk = cout * geom.k * geom.k;
    Mat<T> dcols = im2col(dy, cout, out_size(h), out_size(wd), geom);
    MatMap<T>(G + w, cin, kk).noalias() += x * dcols.transpose();
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(G + b, cout) += dy.rowwise().sum();
    return ConstMatMap<T>(P + w, cin, kk) * dcols;
  }
};

// ---------------------------------------------------------------------------
// Group normalization over a C x M map with per-channel affine.

inline std::size_t norm_groups(std::size_t channels) {
  for (std::size_t g = 8; g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

template <class T>
struct NormCache {
  Mat<T> xhat;
  std::vector<T> rstd;
};

struct GroupNorm {
  std::size_t channels = 0, groups = 1;
  std::size_t gamma = 0, beta = 0;
  static constexpr double kEps = 1e-5;

  static GroupNorm make(ParamLayout& layout, const std::string& name, std::size_t channels) {
    GroupNorm n;
    n.channels = channels;
    n.groups = norm_groups(channels);
    n.gamma = layout.add(name + ".weight", {channels}, Init::One);
    n.beta = layout.add(name + ".bias", {channels}, Init::Zero);
    return n;
  }

  template <class T>
  Mat<T> forward(const T* P, const Mat<T>& x, NormCache<T>* cache) const {
    const std::size_t cpg = channels / groups;
    const std::size_t M = static_cast<std::size_t>(x.cols());
    Mat<T> xhat(x.rows(), x.cols());
    std::vector<T> rstd(groups);
    for (std::size_t g = 0; g < groups; ++g) {
      auto blk = x.block(g * cpg, 0, cpg, M);
      const T mean = blk.mean();
      const T var = (blk.array() - mean).square().mean();
      rstd[g] = T(1) / std::sqrt(var + static_cast<T>(kEps));
      xhat.block(g * cpg, 0, cpg, M) = (blk.array() - mean) * rstd[g];
    }
    Mat<T> y(x.rows(), x.cols());
    for (std::size_t c = 0; c < channels; ++c) y.row(c) = xhat.row(c).array() * P[gamma + c] + P[beta + c];
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->rstd = std::move(rstd);
    }
    return y;
  }

  template <class T>
  Mat<T> backward(const T* P, T* G, const NormCache<T>& cache, const Mat<T>& dy) const {
    const std::size_t cpg = channels / groups;
    const std::size_t M = static_cast<std::size_t>(dy.cols());
    Mat<T> dxhat(dy.rows(), dy.cols());
    for (std::size_t c = 0; c < channels; ++c) {
      G[gamma + c] += (dy.row(c).array() * cache.xhat.row(c).array()).sum();
      G[beta + c] += dy.row(c).sum();
      dxhat.row(c) = dy.row(c) * P[gamma + c];
    }
    Mat<T> dx(dy.rows(), dy.cols());
    const T n = static_cast<T>(cpg * M);
    for (std::size_t g = 0; g < groups; ++g) {
      auto dh = dxhat.block(g * cpg, 0, cpg, M).array();
      auto xh = cache.xhat.block(g * cpg, 0, cpg, M).array();
      const T s1 = dh.sum();
      const T s2 = (dh * xh).sum();
      dx.block(g * cpg, 0, cpg, M) = (cache.rstd[g] / n) * (n * dh - s1 - xh * s2);
    }
    return dx;
  }
};

// Row-wise layer norm without affine parameters (affine comes from adaLN).
template <class T>
Mat<T> layer_norm(const Mat<T>& x, NormCache<T>* cache, T eps = T(1e-6)) {
  Mat<T> xhat(x.rows(), x.cols());
  std::vector<T> rstd(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T mean = x.row(r).mean();
    const T var = (x.row(r).array() - mean).square().mean();
    rstd[r] = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mean) * rstd[r];
  }
  if (cache) {
    cache->xhat = xhat;
    cache->rstd = std::move(rstd);
  }
  return xhat;
}

template <class T>
Mat<T> layer_norm_backward(const NormCache<T>& cache, const Mat<T>& dxhat) {
  const T n = static_cast<T>(dxhat.cols());
  Mat<T> dx(dxhat.rows(), dxhat.cols());
  for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
    const T s1 = dxhat.row(r).sum();
    const T s2 = (dxhat.row(r).array() * cache.xhat.row(r).array()).sum();
    dx.row(r) = (cache.rstd[r] / n) * (n * dxhat.row(r).array() - s1 - cache.xhat.row(r).array() * s2);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Multi-head self-attention over N tokens.

template <class T>
struct AttentionCache {
  Mat<T> input;
  Mat<T> qkv;
  std::vector<Mat<T>> probs;
  Mat<T> heads_out;
};

struct Attention {
  std::size_t dim = 0, heads = 1;
  Linear qkv, proj;

  static Attention make(ParamLayout& layout, const std::string& name, std::size_t dim, std::size_t heads) {
    Attention a;
    a.dim = dim;
    a.heads = heads;
    a.qkv = Linear::make(layout, name + ".qkv", dim, 3 * dim);
    a.proj = Linear::make(layout, name + ".proj", dim, dim);
    return a;
  }

  template <class T>
  Mat<T> forward(const T* P, const Mat<T>& x, AttentionCache<T>& cache) const {
    const std::size_t N = static_cast<std::size_t>(x.rows());
    const std::size_t dh = dim / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    cache.input = x;
    cache.qkv = qkv.forward(P, x);
    cache.probs.resize(heads);
    cache.heads_out.resize(N, dim);
    for (std::size_t h = 0; h < heads; ++h) {
      auto Q = cache.qkv.block(0, h * dh, N, dh);
      auto K = cache.qkv.block(0, dim + h * dh, N, dh);
      auto V = cache.qkv.block(0, 2 * dim + h * dh, N, dh);
      Mat<T> S = (Q * K.transpose()) * scale;
      for (std::size_t r = 0; r < N; ++r) {
        const T m = S.row(r).maxCoeff();
        S.row(r) = (S.row(r).array() - m).exp();
        S.row(r) /= S.row(r).sum();
      }
      cache.heads_out.block(0, h * dh, N, dh).noalias() = S * V;
      cache.probs[h] = std::move(S);
    }
    return proj.forward(P, cache.heads_out);
  }

  template <class T>
  Mat<T> backward(const T* P, T* G, const AttentionCache<T>& cache, const Mat<T>& dy) const {
    const std::size_t N = static_cast<std::size_t>(dy.rows());
    const std::size_t dh = dim / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    Mat<T> dheads = proj.backward(P, G, cache.heads_out, dy);
    Mat<T> dqkv(N, 3 * dim);
    for (std::size_t h = 0; h < heads; ++h) {
      auto Q = cache.qkv.block(0, h * dh, N, dh);
      auto K = cache.qkv.block(0, dim + h * dh, N, dh);
      auto V = cache.qkv.block(0, 2 * dim + h * dh, N, dh);
      const Mat<T>& Pm = cache.probs[h];
      Mat<T> dO = dheads.block(0, h * dh, N, dh);
      dqkv.block(0, 2 * dim + h * dh, N, dh).noalias() = Pm.transpose() * dO;
      Mat<T> dP = dO * V.transpose();
      Mat<T> dS = Pm.array() * (dP.array().colwise() - (dP.array() * Pm.array()).rowwise().sum());
      dqkv.block(0, h * dh, N, dh).noalias() = (dS * K) * scale;
      dqkv.block(0, dim + h * dh, N, dh).noalias() = (dS.transpose() * Q) * scale;
    }
    return qkv.backward(P, G, cache.input, dqkv);
  }
};

// ---------------------------------------------------------------------------
// Two-layer GELU MLP over rows.

template <class T>
struct MlpCache {
  Mat<T> input, hidden_pre, hidden;
};

struct Mlp {
  Linear fc1, fc2;

  static Mlp make(ParamLayout& layout, const std::string& name, std::size_t dim, std::size_t hidden) {
    return {Linear::make(layout, name + ".fc1", dim, hidden), Linear::make(layout, name + ".fc2", hidden, dim)};
  }

  template <class T>
  Mat<T> forward(const T* P, const Mat<T>& x, MlpCache<T>& cache) const {
    cache.input = x;
    cache.hidden_pre = fc1.forward(P, x);
    cache.hidden = gelu(cache.hidden_pre);
    return fc2.forward(P, cache.hidden);
  }

  template <class T>
  Mat<T> backward(const T* P, T* G, const MlpCache<T>& cache, const Mat<T>& dy) const {
    Mat<T> dh = fc2.backward(P, G, cache.hidden, dy);
    return fc1.backward(P, G, cache.input, gelu_backward(cache.hidden_pre, dh));
  }
};

}  // namespace sprout::nn
