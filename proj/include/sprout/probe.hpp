#pragma once

// Segmentation probing of backbone features: one 1x1 conv plus bilinear
// upsampling, sliding-window inference, mIoU scoring and PCA renderings.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sprout/binio.hpp"
#include "sprout/diffusion.hpp"
#include "sprout/erank.hpp"
#include "sprout/error.hpp"
#include "sprout/image.hpp"
#include "sprout/linalg.hpp"
#include "sprout/parallel.hpp"
#include "sprout/rng.hpp"
#include "sprout/trainer.hpp"
#include "sprout/udit.hpp"

namespace sprout {

inline constexpr std::uint8_t kIgnoreLabel = 255;

struct LabelMap {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> values;  // row-major class indices

  LabelMap() = default;
  LabelMap(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), values(w * h, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y) { return values[y * width + x]; }
  std::uint8_t at(std::size_t x, std::size_t y) const { return values[y * width + x]; }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

inline void check_labels(const LabelMap& m, std::size_t classes, const std::string& what) {
  for (std::uint8_t v : m.values)
    if (v != kIgnoreLabel && v >= classes)
      throw LabelError(what + ": class index " + std::to_string(v) + " >= class count " + std::to_string(classes));
}

inline LabelMap read_label_png(const std::filesystem::path& path) {
  const auto img = read_png_gray(path.string());
  LabelMap m(img.width, img.height);
  m.values = img.pixels;
  return m;
}

inline void write_label_png(const std::filesystem::path& path, const LabelMap& m) {
  Image8 img(m.width, m.height, 1);
  img.pixels = m.values;
  atomic_write_with(path, [&](const std::filesystem::path& tmp) { write_png_file(tmp.string(), img); });
}

// Token-major feature map: row y*w + x holds the D features of one location.
struct FeatureMap {
  std::size_t h = 0, w = 0;
  Eigen::MatrixXd rows;

  std::size_t dim() const { return static_cast<std::size_t>(rows.cols()); }
};

// Where features are read: a trunk block (unset means the configured tap)
// or the full-resolution model output.
struct FeatureTap {
  bool head = false;
  std::optional<int> layer;
};

inline FeatureTap parse_tap(std::string_view s) {
  if (s == "head") return {true, std::nullopt};
  if (s == "trunk" || s.empty()) return {};
  try {
    std::size_t used = 0;
    const std::string str(s);
    const int layer = std::stoi(str, &used);
    if (used == str.size()) return {false, layer};
  } catch (const std::exception&) {
  }
  throw ArgumentError("tap must be 'head', 'trunk' or a block index, got '" + std::string(s) + "'");
}

// x_t of one image under the seeded noise draw for `index`.
inline Tensor<float> noisy_input(const Image8& img, double t, const NoiseSchedule& sched, std::uint64_t seed,
                                 std::size_t index) {
  check_time(t);
  const auto x = image_to_chw<float>(img);
  const auto eps = image_noise(seed, index, x.size());
  const auto a = static_cast<float>(sched.a(t)), b = static_cast<float>(sched.b(t));
  Tensor<float> out({1, img.channels, img.height, img.width});
  for (std::size_t j = 0; j < x.size(); ++j) out[j] = a * x[j] + b * eps[j];
  return out;
}

// Square window of a 1 x C x H x W tensor.
inline Tensor<float> crop_window(const Tensor<float>& x, std::size_t y0, std::size_t x0, std::size_t size) {
  const std::size_t C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (y0 + size > H || x0 + size > W) throw ArgumentError("window exceeds image bounds");
  Tensor<float> out({1, C, size, size});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < size; ++y)
      std::copy_n(x.data() + (c * H + y0 + y) * W + x0, size, out.data() + (c * size + y) * size);
  return out;
}

inline FeatureMap feature_map(const UDiT<float>& model, const Tensor<float>& xt, double t, const FeatureTap& tap) {
  const std::vector<double> ts(1, t);
  FeatureMap f;
  if (tap.head) {
    const auto out = model.forward(xt, ts);
    const std::size_t C = out.dim(1), H = out.dim(2), W = out.dim(3);
    f.h = H;
    f.w = W;
    f.rows.resize(static_cast<Eigen::Index>(H * W), static_cast<Eigen::Index>(C));
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < H * W; ++p) f.rows(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(c)) = out[c * H * W + p];
    return f;
  }
  const auto feats = model.extract_features(xt, ts, tap.layer);
  f.h = feats.dim(1);
  f.w = feats.dim(2);
  const std::size_t D = feats.dim(3);
  f.rows.resize(static_cast<Eigen::Index>(f.h * f.w), static_cast<Eigen::Index>(D));
  for (std::size_t p = 0; p < f.h * f.w; ++p)
    for (std::size_t d = 0; d < D; ++d) f.rows(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(d)) = feats[p * D + d];
  return f;
}

// Feature maps of a list of images; image i uses noise index `first_index + i`.
inline std::vector<FeatureMap> feature_maps(const UDiT<float>& model, const std::vector<Image8>& images, double t,
                                            const NoiseSchedule& sched, std::uint64_t seed, const FeatureTap& tap,
                                            std::size_t first_index = 0) {
  std::vector<FeatureMap> out(images.size());
  for (std::size_t i = 0; i < images.size(); ++i)
    out[i] = feature_map(model, noisy_input(images[i], t, sched, seed, first_index + i), t, tap);
  return out;
}

// Bilinear resize weights (out x in) with half-pixel centers, edges clamped.
inline Eigen::MatrixXd bilinear_matrix(std::size_t out, std::size_t in) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    const double src = std::max(0.0, (static_cast<double>(i) + 0.5) * scale - 0.5);
    const auto i0 = std::min(static_cast<std::size_t>(src), in - 1);
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const double f = i0 == i1 ? 0.0 : src - static_cast<double>(i0);
    m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i0)) += 1.0 - f;
    m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i1)) += f;
  }
  return m;
}

namespace detail {
using RowMatd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Applies uy * Z_k * ux^T to every column k of z (h*w x K) or its adjoint.
inline Eigen::MatrixXd resize_columns(const Eigen::MatrixXd& z, std::size_t h, std::size_t w, const Eigen::MatrixXd& uy,
                                      const Eigen::MatrixXd& ux, bool adjoint) {
  const Eigen::Index oh = adjoint ? uy.cols() : uy.rows(), ow = adjoint ? ux.cols() : ux.rows();
  Eigen::MatrixXd out(oh * ow, z.cols());
  for (Eigen::Index k = 0; k < z.cols(); ++k) {
    const Eigen::Map<const RowMatd> zk(z.col(k).data(), static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w));
    const RowMatd r = adjoint ? RowMatd(uy.transpose() * zk * ux) : RowMatd(uy * zk * ux.transpose());
    out.col(k) = Eigen::Map<const Eigen::VectorXd>(r.data(), r.size());
  }
  return out;
}
}  // namespace detail

struct ProbeHead {
  Eigen::MatrixXd weight;  // K x D
  Eigen::VectorXd bias;    // K

  static ProbeHead zeros(std::size_t dim, std::size_t classes) {
    return {Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(classes), static_cast<Eigen::Index>(dim)),
            Eigen::VectorXd::Zero(static_cast<Eigen::Index>(classes))};
  }

  std::size_t classes() const { return static_cast<std::size_t>(weight.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(weight.cols()); }

  // Feature-resolution logits, (h*w) x K.
  Eigen::MatrixXd token_logits(const FeatureMap& f) const {
    if (f.dim() != dim())
      throw ShapeError("probe expects " + std::to_string(dim()) + " features, got " + std::to_string(f.dim()));
    Eigen::MatrixXd z = f.rows * weight.transpose();
    z.rowwise() += bias.transpose();
    return z;
  }

  // Pixel logits (H*W) x K after upsampling to H x W.
  Eigen::MatrixXd logits(const FeatureMap& f, std::size_t H, std::size_t W) const {
    const auto z = token_logits(f);
    if (H == f.h && W == f.w) return z;
    return detail::resize_columns(z, f.h, f.w, bilinear_matrix(H, f.h), bilinear_matrix(W, f.w), false);
  }

  friend bool operator==(const ProbeHead& a, const ProbeHead& b) { return a.weight == b.weight && a.bias == b.bias; }
};

inline LabelMap argmax_classes(const Eigen::MatrixXd& logits, std::size_t H, std::size_t W) {
  LabelMap m(W, H);
  for (Eigen::Index p = 0; p < logits.rows(); ++p) {
    Eigen::Index best = 0;
    logits.row(p).maxCoeff(&best);  // first maximum on ties
    m.values[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(best);
  }
  return m;
}

namespace detail {
struct PixelCe {
  double loss = 0.0;
  std::size_t count = 0;
  Eigen::MatrixXd dz;  // d (summed loss) / d token logits
};

// Summed softmax cross-entropy over labeled pixels.
inline PixelCe pixel_ce(const ProbeHead& head, const FeatureMap& f, const LabelMap& y) {
  const std::size_t H = y.height, W = y.width;
  const bool resized = H != f.h || W != f.w;
  const auto z = head.token_logits(f);
  Eigen::MatrixXd uy, ux;
  if (resized) {
    uy = bilinear_matrix(H, f.h);
    ux = bilinear_matrix(W, f.w);
  }
  Eigen::MatrixXd l = resized ? resize_columns(z, f.h, f.w, uy, ux, false) : z;
  PixelCe out;
  for (Eigen::Index p = 0; p < l.rows(); ++p) {
    const std::uint8_t label = y.values[static_cast<std::size_t>(p)];
    if (label == kIgnoreLabel) {
      l.row(p).setZero();
      continue;
    }
    const double mx = l.row(p).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index k = 0; k < l.cols(); ++k) sum += std::exp(l(p, k) - mx);
    out.loss += std::log(sum) + mx - l(p, label);
    for (Eigen::Index k = 0; k < l.cols(); ++k) l(p, k) = std::exp(l(p, k) - mx) / sum;
    l(p, label) -= 1.0;
    ++out.count;
  }
  out.dz = resized ? resize_columns(l, H, W, uy, ux, true) : std::move(l);
  return out;
}

struct Adam {
  Eigen::VectorXd m, v;
  std::uint64_t t = 0;

  void step(Eigen::Ref<Eigen::VectorXd> w, const Eigen::VectorXd& g, double lr) {
    if (m.size() == 0) {
      m = Eigen::VectorXd::Zero(w.size());
      v = Eigen::VectorXd::Zero(w.size());
    }
    ++t;
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t)), c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    w.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

inline Eigen::VectorXd flatten(const ProbeHead& h) {
  Eigen::VectorXd out(h.weight.size() + h.bias.size());
  out << Eigen::Map<const Eigen::VectorXd>(h.weight.data(), h.weight.size()), h.bias;
  return out;
}

inline void unflatten(const Eigen::VectorXd& v, ProbeHead& h) {
  h.weight = Eigen::Map<const Eigen::MatrixXd>(v.data(), h.weight.rows(), h.weight.cols());
  h.bias = v.tail(h.bias.size());
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, epoch, 11));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}
}  // namespace detail

struct ProbeOptions {
  double t = 0.25;
  std::size_t epochs = 100;
  double lr = 1e-2;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  FeatureTap tap;
  double backbone_lr = 1e-5;  // full fine-tuning only
};

inline void check_probe_inputs(std::size_t n_inputs, const std::vector<LabelMap>& labels, std::size_t classes) {
  if (classes < 1 || classes > 254) throw ArgumentError("class count must be in [1, 254]");
  if (n_inputs != labels.size())
    throw ArgumentError(std::to_string(n_inputs) + " inputs but " + std::to_string(labels.size()) + " label maps");
  if (n_inputs == 0) throw ArgumentError("probe training set is empty");
  for (std::size_t i = 0; i < labels.size(); ++i) check_labels(labels[i], classes, "label map " + std::to_string(i));
}

// Trains the head on fixed features. Features are standardized per dimension
// during training; the result is folded back into a single affine layer.
inline ProbeHead fit_probe_features(const std::vector<FeatureMap>& feats, const std::vector<LabelMap>& labels,
                                    std::size_t classes, const ProbeOptions& opts) {
  check_probe_inputs(feats.size(), labels, classes);
  const std::size_t D = feats[0].dim();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(D)), sq = mean;
  double count = 0.0;
  for (const auto& f : feats) {
    if (f.dim() != D) throw ShapeError("feature maps disagree on dimension");
    if (!f.rows.allFinite()) throw NumericError("non-finite probe features");
    mean += f.rows.colwise().sum().transpose();
    sq += f.rows.colwise().squaredNorm().transpose();
    count += static_cast<double>(f.rows.rows());
  }
  mean /= count;
  Eigen::VectorXd sd = (sq / count - mean.cwiseProduct(mean)).cwiseMax(0.0).cwiseSqrt();
  for (Eigen::Index d = 0; d < sd.size(); ++d)
    if (!(sd(d) > 1e-12)) sd(d) = 1.0;
  std::vector<FeatureMap> z(feats.size());
  for (std::size_t i = 0; i < feats.size(); ++i) {
    z[i] = feats[i];
    z[i].rows = ((feats[i].rows.rowwise() - mean.transpose()).array().rowwise() / sd.transpose().array()).matrix();
  }

  ProbeHead head = ProbeHead::zeros(D, classes);
  if (opts.epochs == 0) return head;
  detail::Adam adam;
  Eigen::VectorXd params = detail::flatten(head);
  const std::size_t bs = std::max<std::size_t>(1, opts.batch_size);
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    const auto order = detail::epoch_order(feats.size(), opts.seed, epoch);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t n = std::min(bs, order.size() - start);
      std::vector<detail::PixelCe> parts(n);
      parallel_for(n, [&](std::size_t j) { parts[j] = detail::pixel_ce(head, z[order[start + j]], labels[order[start + j]]); });
      Eigen::MatrixXd gw = Eigen::MatrixXd::Zero(head.weight.rows(), head.weight.cols());
      Eigen::VectorXd gb = Eigen::VectorXd::Zero(head.bias.size());
      std::size_t valid = 0;
      for (std::size_t j = 0; j < n; ++j) {
        gw += parts[j].dz.transpose() * z[order[start + j]].rows;
        gb += parts[j].dz.colwise().sum().transpose();
        valid += parts[j].count;
      }
      if (valid == 0) continue;
      ProbeHead g{gw / static_cast<double>(valid), gb / static_cast<double>(valid)};
      adam.step(params, detail::flatten(g), opts.lr);
      detail::unflatten(params, head);
    }
  }
  // Undo the standardization: W x_std + b = (W / sd) x + (b - W (mean / sd)).
  ProbeHead out = head;
  out.weight = (head.weight.array().rowwise() / sd.transpose().array()).matrix();
  out.bias = head.bias - out.weight * mean;
  return out;
}

inline void check_image_labels(const std::vector<Image8>& images, const std::vector<LabelMap>& labels) {
  for (std::size_t i = 0; i < std::min(images.size(), labels.size()); ++i)
    if (images[i].width != labels[i].width || images[i].height != labels[i].height)
      throw ShapeError("image " + std::to_string(i) + " is " + std::to_string(images[i].width) + "x" +
                       std::to_string(images[i].height) + " but its label map is " + std::to_string(labels[i].width) +
                       "x" + std::to_string(labels[i].height));
}

// Frozen probe: the backbone is only read.
inline ProbeHead fit_probe(const UDiT<float>& model, const std::vector<Image8>& images,
                           const std::vector<LabelMap>& labels, std::size_t classes, const NoiseSchedule& sched,
                           const ProbeOptions& opts) {
  check_probe_inputs(images.size(), labels, classes);
  check_image_labels(images, labels);
  return fit_probe_features(feature_maps(model, images, opts.t, sched, opts.seed, opts.tap), labels, classes, opts);
}

// Full fine-tuning: the head and every backbone weight are updated.
inline ProbeHead fine_tune_probe(UDiT<float>& model, const std::vector<Image8>& images,
                                 const std::vector<LabelMap>& labels, std::size_t classes, const NoiseSchedule& sched,
                                 const ProbeOptions& opts) {
  check_probe_inputs(images.size(), labels, classes);
  check_image_labels(images, labels);
  using Mat = nn::Mat<float>;
  ProbeHead head = ProbeHead::zeros(opts.tap.head ? model.config().in_channels : model.feature_dim(), classes);
  if (opts.epochs == 0) return head;
  const std::size_t blocks = static_cast<std::size_t>(model.resolve_tap(opts.tap.layer)) + 1;
  const std::size_t P = model.param_count();
  AdamW backbone_opt(P, opts.backbone_lr, 0.9, 0.999, 0.0, 1e-8);
  detail::Adam head_opt;
  Eigen::VectorXd params = detail::flatten(head);
  const std::size_t bs = std::max<std::size_t>(1, opts.batch_size);
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    const auto order = detail::epoch_order(images.size(), opts.seed, epoch);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t n = std::min(bs, order.size() - start);
      std::vector<std::vector<float>> grads(n);
      std::vector<detail::PixelCe> parts(n);
      std::vector<Eigen::MatrixXd> rows(n);
      parallel_for(n, [&](std::size_t j) {
        const std::size_t i = order[start + j];
        const auto xt = noisy_input(images[i], opts.t, sched, opts.seed, i);
        const std::size_t H = images[i].height, W = images[i].width;
        UDiTTrace<float> tr;
        FeatureMap f;
        Mat out;
        if (opts.tap.head) {
          out = model.forward_sample(xt.span(), H, W, opts.t, tr);
          f.h = H;
          f.w = W;
          f.rows = out.transpose().cast<double>();
        } else {
          out = model.trunk_forward(xt.span(), H, W, opts.t, tr, blocks);
          f.h = tr.grid_h;
          f.w = tr.grid_w;
          f.rows = out.cast<double>();
        }
        parts[j] = detail::pixel_ce(head, f, labels[i]);
        const Mat dfeat = (parts[j].dz * head.weight).cast<float>();
        grads[j].assign(P, 0.0f);
        if (opts.tap.head) {
          model.backward_sample(tr, Mat(dfeat.transpose()), grads[j]);
        } else {
          model.trunk_backward(tr, dfeat, Mat::Zero(tr.cond_act.rows(), tr.cond_act.cols()), blocks, grads[j]);
        }
        rows[j] = std::move(f.rows);
      });
      std::size_t valid = 0;
      Eigen::MatrixXd gw = Eigen::MatrixXd::Zero(head.weight.rows(), head.weight.cols());
      Eigen::VectorXd gb = Eigen::VectorXd::Zero(head.bias.size());
      std::vector<float> g(P, 0.0f);
      for (std::size_t j = 0; j < n; ++j) {
        gw += parts[j].dz.transpose() * rows[j];
        gb += parts[j].dz.colwise().sum().transpose();
        valid += parts[j].count;
        for (std::size_t k = 0; k < P; ++k) g[k] += grads[j][k];
      }
      if (valid == 0) continue;
      const float inv = 1.0f / static_cast<float>(valid);
      for (auto& v : g) v *= inv;
      backbone_opt.step(model.weights(), g);
      ProbeHead gh{gw / static_cast<double>(valid), gb / static_cast<double>(valid)};
      head_opt.step(params, detail::flatten(gh), opts.lr);
      detail::unflatten(params, head);
    }
  }
  return head;
}

// Window origins along one axis; the last window is aligned to the far edge.
inline std::vector<std::size_t> window_offsets(std::size_t extent, std::size_t window, std::size_t stride) {
  if (window == 0 || stride == 0) throw ArgumentError("window and stride must be positive");
  if (extent < window)
    throw ArgumentError("image extent " + std::to_string(extent) + " is smaller than the " + std::to_string(window) +
                        " pixel window; pad the image or use a smaller window");
  std::vector<std::size_t> out;
  std::size_t p = 0;
  for (;;) {
    out.push_back(p);
    if (p + window >= extent) break;
    p = std::min(p + stride, extent - window);
  }
  return out;
}

struct WindowedPrediction {
  LabelMap classes;
  std::vector<std::uint32_t> coverage;  // windows covering each pixel
};

// fn(y0, x0) returns (window*window) x K logits for the window at (y0, x0).
// Logits of overlapping windows are averaged before the argmax.
template <class LogitFn>
WindowedPrediction sliding_window_infer(std::size_t H, std::size_t W, std::size_t classes, std::size_t window,
                                        std::size_t stride, LogitFn&& fn) {
  const auto ys = window_offsets(H, window, stride), xs = window_offsets(W, window, stride);
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(H * W), static_cast<Eigen::Index>(classes));
  WindowedPrediction out;
  out.coverage.assign(H * W, 0);
  for (std::size_t y0 : ys)
    for (std::size_t x0 : xs) {
      const Eigen::MatrixXd l = fn(y0, x0);
      if (l.rows() != static_cast<Eigen::Index>(window * window) || l.cols() != static_cast<Eigen::Index>(classes))
        throw ShapeError("window logits have the wrong shape");
      for (std::size_t y = 0; y < window; ++y)
        for (std::size_t x = 0; x < window; ++x) {
          const std::size_t p = (y0 + y) * W + x0 + x;
          sum.row(static_cast<Eigen::Index>(p)) += l.row(static_cast<Eigen::Index>(y * window + x));
          ++out.coverage[p];
        }
    }
  for (std::size_t p = 0; p < H * W; ++p) sum.row(static_cast<Eigen::Index>(p)) /= static_cast<double>(out.coverage[p]);
  out.classes = argmax_classes(sum, H, W);
  return out;
}

// Noise is drawn once for the full image, then windows are cut from x_t.
inline LabelMap predict_classes(const UDiT<float>& model, const ProbeHead& head, const Image8& image,
                                const NoiseSchedule& sched, const ProbeOptions& opts, std::size_t index,
                                std::size_t window, std::size_t stride) {
  const auto xt = noisy_input(image, opts.t, sched, opts.seed, index);
  return sliding_window_infer(image.height, image.width, head.classes(), window, stride,
                              [&](std::size_t y0, std::size_t x0) {
                                const auto f = feature_map(model, crop_window(xt, y0, x0, window), opts.t, opts.tap);
                                return head.logits(f, window, window);
                              })
      .classes;
}

struct IoUResult {
  std::size_t classes = 0;
  std::vector<std::uint64_t> confusion;      // K x K, row = label, column = prediction
  std::vector<std::optional<double>> iou;    // unset for classes absent from both
  double miou = 0.0;

  friend bool operator==(const IoUResult&, const IoUResult&) = default;
};

inline IoUResult compute_miou(const std::vector<LabelMap>& predictions, const std::vector<LabelMap>& labels,
                              std::size_t classes) {
  if (classes < 1 || classes > 254) throw ArgumentError("class count must be in [1, 254]");
  if (predictions.size() != labels.size())
    throw ArgumentError(std::to_string(predictions.size()) + " predictions but " + std::to_string(labels.size()) +
                        " label maps");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (predictions[i].width != labels[i].width || predictions[i].height != labels[i].height)
      throw ArgumentError("prediction " + std::to_string(i) + " shape does not match its label map");
    check_labels(labels[i], classes, "label map " + std::to_string(i));
    for (std::uint8_t v : predictions[i].values)
      if (v >= classes) throw LabelError("prediction " + std::to_string(i) + " holds class " + std::to_string(v));
  }
  IoUResult r;
  r.classes = classes;
  r.confusion.assign(classes * classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t p = 0; p < labels[i].values.size(); ++p) {
      const std::uint8_t y = labels[i].values[p];
      if (y == kIgnoreLabel) continue;
      ++r.confusion[y * classes + predictions[i].values[p]];
    }
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < classes; ++k) {
    std::uint64_t tp = r.confusion[k * classes + k], fp = 0, fn = 0;
    for (std::size_t j = 0; j < classes; ++j) {
      if (j == k) continue;
      fn += r.confusion[k * classes + j];
      fp += r.confusion[j * classes + k];
    }
    const std::uint64_t denom = tp + fp + fn;
    if (denom == 0) {
      r.iou.emplace_back(std::nullopt);
      continue;
    }
    const double v = static_cast<double>(tp) / static_cast<double>(denom);
    r.iou.emplace_back(v);
    total += v;
    ++present;
  }
  if (present == 0) throw DegenerateInputError("no labeled pixels to score");
  r.miou = total / static_cast<double>(present);
  return r;
}

inline std::string format_miou_report(const IoUResult& r) {
  std::string s = "miou-report v1\n";
  char buf[96];
  for (std::size_t k = 0; k < r.iou.size(); ++k) {
    if (r.iou[k])
      std::snprintf(buf, sizeof buf, "class %zu iou %.17g\n", k, *r.iou[k]);
    else
      std::snprintf(buf, sizeof buf, "class %zu iou absent\n", k);
    s += buf;
  }
  std::snprintf(buf, sizeof buf, "miou %.17g\n", r.miou);
  return s + buf;
}

struct PcaRendering {
  Image8 image;                // h x w x 3
  bool degenerate = false;     // zero-variance input, image is all 128
  std::size_t components = 0;  // principal directions actually used
  Eigen::MatrixXd loadings;    // D x 3, zero columns where unused
  Eigen::MatrixXd scores;      // N x 3 projections before normalization
};

// Projects centered token rows onto the top three principal directions and
// min-max scales each to [0, 255]. Each direction's sign makes its
// largest-magnitude loading positive. Missing directions render as 128.
inline PcaRendering pca_visualize(const Eigen::MatrixXd& tokens, std::size_t h, std::size_t w) {
  if (static_cast<std::size_t>(tokens.rows()) != h * w)
    throw ShapeError("feature map has " + std::to_string(tokens.rows()) + " rows, expected " + std::to_string(h * w));
  if (h * w < 3) throw ArgumentError("PCA visualization needs at least 3 tokens");
  if (tokens.cols() < 1) throw ShapeError("feature map has no channels");
  if (!tokens.allFinite()) throw NumericError("feature map contains non-finite entries");
  PcaRendering out;
  out.image = Image8(w, h, 3, 128);
  out.loadings = Eigen::MatrixXd::Zero(tokens.cols(), 3);
  out.scores = Eigen::MatrixXd::Zero(tokens.rows(), 3);
  // Shifted by the first row first, so constant maps center to exact zeros.
  const Eigen::MatrixXd shifted = tokens.rowwise() - tokens.row(0);
  const Eigen::MatrixXd centered = shifted.rowwise() - shifted.colwise().mean();
  if (centered.cwiseAbs().maxCoeff() == 0.0) {
    out.degenerate = true;
    return out;
  }
  const auto svd = thin_svd(centered, true);
  const double top = svd.singular_values(0);
  for (Eigen::Index k = 0; k < std::min<Eigen::Index>(3, svd.singular_values.size()); ++k) {
    if (!(svd.singular_values(k) > kSpectrumCutoff * top)) break;
    Eigen::VectorXd v = svd.v.col(k);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    const Eigen::VectorXd s = centered * v;
    out.loadings.col(k) = v;
    out.scores.col(k) = s;
    ++out.components;
    const double lo = s.minCoeff(), hi = s.maxCoeff();
    for (Eigen::Index p = 0; p < s.size(); ++p) {
      const double u = hi > lo ? (s(p) - lo) / (hi - lo) : 0.5;
      out.image.pixels[static_cast<std::size_t>(p) * 3 + static_cast<std::size_t>(k)] =
          static_cast<std::uint8_t>(std::lround(std::clamp(u, 0.0, 1.0) * 255.0));
    }
  }
  return out;
}

inline PcaRendering visualize_features(const UDiT<float>& model, const Image8& image, const NoiseSchedule& sched,
                                       double t, std::uint64_t seed, const FeatureTap& tap) {
  const auto f = feature_map(model, noisy_input(image, t, sched, seed, 0), t, tap);
  return pca_visualize(f.rows, f.h, f.w);
}

}  // namespace sprout
