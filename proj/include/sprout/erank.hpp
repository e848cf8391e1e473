#pragma once

// Effective rank of feature matrices and the timestep search built on it.

#include <Eigen/Dense>

#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sprout/diffusion.hpp"
#include "sprout/error.hpp"
#include "sprout/linalg.hpp"
#include "sprout/rng.hpp"
#include "sprout/tensor.hpp"

namespace sprout {

enum class Pooling { ImageMean, Token };

inline Pooling parse_pooling(std::string_view s) {
  if (s == "image-mean") return Pooling::ImageMean;
  if (s == "token") return Pooling::Token;
  throw ArgumentError("unknown pooling '" + std::string(s) + "' (expected image-mean|token)");
}

inline std::string to_string(Pooling p) { return p == Pooling::ImageMean ? "image-mean" : "token"; }

struct FeatureMatrix {
  Eigen::MatrixXd data;  // N x D, one feature row per sample or token
  Pooling pooling = Pooling::ImageMean;
  double source_t = 0.0;

  void validate() const {
    if (data.rows() < 2 || data.cols() < 2)
      throw ShapeError("feature matrix must be at least 2x2, got " + std::to_string(data.rows()) + "x" +
                       std::to_string(data.cols()));
    if (!data.allFinite()) throw NumericError("feature matrix contains non-finite entries");
  }
};

// Relative cutoff under which singular values count as zero.
inline constexpr double kSpectrumCutoff = 1e-10;

// exp of the Shannon entropy of the sum-normalized singular values.
inline double effective_rank_of_spectrum(const Eigen::VectorXd& sigma) {
  if (sigma.size() == 0) throw DegenerateInputError("empty spectrum");
  const double top = sigma.maxCoeff();
  if (!(top > 0.0)) throw DegenerateInputError("all-zero feature matrix (spectrum sum is zero)");
  double total = 0.0;
  for (Eigen::Index i = 0; i < sigma.size(); ++i)
    if (sigma(i) >= kSpectrumCutoff * top) total += sigma(i);
  double entropy = 0.0;
  for (Eigen::Index i = 0; i < sigma.size(); ++i) {
    if (sigma(i) < kSpectrumCutoff * top) continue;
    const double p = sigma(i) / total;
    entropy -= p * std::log(p);
  }
  return std::exp(entropy);
}

inline double effective_rank(const Eigen::MatrixXd& f) {
  if (!f.allFinite()) throw NumericError("feature matrix contains non-finite entries");
  return effective_rank_of_spectrum(thin_svd(f).singular_values);
}

inline double effective_rank(const FeatureMatrix& f) {
  f.validate();
  return effective_rank(f.data);
}

// Anything with extract_features(xt, t, layer) -> B x h x w x D.
template <class M>
concept FeatureExtractor = requires(const M& m, const Tensor<float>& x, std::span<const double> t) {
  { m.extract_features(x, t, std::optional<int>{}) } -> std::same_as<Tensor<float>>;
};

struct CollectOptions {
  Pooling pooling = Pooling::ImageMean;
  std::uint64_t seed = 0;
  std::optional<int> layer;
  std::size_t batch_size = 16;
};

// Noise for image i depends only on (seed, i), so every timestep sees the
// same noise draw.
inline std::vector<float> image_noise(std::uint64_t seed, std::size_t index, std::size_t count) {
  Rng rng(derive_seed(seed, index, 7));
  std::vector<float> out(count);
  for (auto& v : out) v = static_cast<float>(standard_normal(rng));
  return out;
}

// Images are N x C x H x W in [-1, 1].
template <FeatureExtractor M>
FeatureMatrix collect_features(const M& model, const Tensor<float>& images, double t, const NoiseSchedule& sched,
                               const CollectOptions& opts = {}) {
  if (images.rank() != 4 || images.dim(0) == 0) throw ArgumentError("collect_features needs a nonempty N x C x H x W batch");
  check_time(t);
  const std::size_t n = images.dim(0), per = images.numel() / n;
  const std::size_t bs = std::max<std::size_t>(1, opts.batch_size);
  FeatureMatrix fm;
  fm.pooling = opts.pooling;
  fm.source_t = t;
  std::size_t dim = 0, tokens = 0;
  for (std::size_t start = 0; start < n; start += bs) {
    const std::size_t count = std::min(bs, n - start);
    Shape shape = images.shape();
    shape[0] = count;
    Tensor<float> x0(shape), eps(shape);
    for (std::size_t i = 0; i < count; ++i) {
      std::copy_n(images.item(start + i).begin(), per, x0.item(i).begin());
      const auto noise = image_noise(opts.seed, start + i, per);
      std::copy(noise.begin(), noise.end(), eps.item(i).begin());
    }
    std::vector<double> ts(count, t);
    auto noisy = forward_diffuse(std::move(x0), std::move(eps), ts, sched);
    const auto feats = model.extract_features(noisy.xt, ts, opts.layer);
    if (feats.rank() != 4) throw ShapeError("extract_features must return B x h x w x D");
    dim = feats.dim(3);
    tokens = feats.dim(1) * feats.dim(2);
    if (start == 0) fm.data.resize(static_cast<Eigen::Index>(opts.pooling == Pooling::Token ? n * tokens : n),
                                   static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < count; ++i) {
      const auto f = feats.item(i);
      if (opts.pooling == Pooling::ImageMean) {
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim));
        for (std::size_t k = 0; k < tokens; ++k)
          for (std::size_t d = 0; d < dim; ++d) mean(static_cast<Eigen::Index>(d)) += f[k * dim + d];
        fm.data.row(static_cast<Eigen::Index>(start + i)) = (mean / static_cast<double>(tokens)).transpose();
      } else {
        for (std::size_t k = 0; k < tokens; ++k)
          for (std::size_t d = 0; d < dim; ++d)
            fm.data(static_cast<Eigen::Index>((start + i) * tokens + k), static_cast<Eigen::Index>(d)) = f[k * dim + d];
      }
    }
  }
  return fm;
}

struct ErankReport {
  std::vector<double> grid;
  std::vector<double> eranks;
  double t_star = 0.0;
  std::vector<Eigen::VectorXd> spectra;  // per grid point when retained
};

// Picks the grid point with the largest effective rank; equal values go to
// the smaller t.
inline std::size_t argmax_erank(const std::vector<double>& grid, const std::vector<double>& eranks) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (eranks[i] > eranks[best] || (eranks[i] == eranks[best] && grid[i] < grid[best])) best = i;
  }
  return best;
}

template <FeatureExtractor M>
ErankReport select_timestep(const M& model, const Tensor<float>& images, const std::vector<double>& grid,
                            const NoiseSchedule& sched, const CollectOptions& opts = {}, bool keep_spectra = false) {
  if (grid.empty()) throw ArgumentError("timestep grid is empty");
  for (double t : grid) check_time(t);
  ErankReport rep;
  rep.grid = grid;
  for (double t : grid) {
    auto fm = collect_features(model, images, t, sched, opts);
    fm.validate();
    const auto sigma = thin_svd(fm.data).singular_values;
    try {
      rep.eranks.push_back(effective_rank_of_spectrum(sigma));
    } catch (const DegenerateInputError& e) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "at t=%g: ", t);
      throw DegenerateInputError(buf + std::string(e.what()));
    }
    if (keep_spectra) rep.spectra.push_back(sigma);
  }
  rep.t_star = grid[argmax_erank(rep.grid, rep.eranks)];
  return rep;
}

// `A:B:N`: N evenly spaced points from A to B inclusive.
inline std::vector<double> parse_grid(std::string_view spec) {
  const auto c1 = spec.find(':');
  const auto c2 = c1 == std::string_view::npos ? c1 : spec.find(':', c1 + 1);
  if (c1 == std::string_view::npos || c2 == std::string_view::npos)
    throw ArgumentError("grid must be A:B:N, got '" + std::string(spec) + "'");
  double a = 0, b = 0;
  long n = 0;
  try {
    std::size_t used = 0;
    const std::string sa(spec.substr(0, c1)), sb(spec.substr(c1 + 1, c2 - c1 - 1)), sn(spec.substr(c2 + 1));
    a = std::stod(sa, &used);
    if (used != sa.size()) throw std::invalid_argument(sa);
    b = std::stod(sb, &used);
    if (used != sb.size()) throw std::invalid_argument(sb);
    n = std::stol(sn, &used);
    if (used != sn.size()) throw std::invalid_argument(sn);
  } catch (const std::exception&) {
    throw ArgumentError("grid must be A:B:N with numeric A, B and integer N, got '" + std::string(spec) + "'");
  }
  if (n < 1) throw ArgumentError("grid point count must be at least 1");
  if (n == 1 && a != b) throw ArgumentError("a one-point grid needs A == B");
  std::vector<double> out;
  for (long i = 0; i < n; ++i) out.push_back(n == 1 ? a : a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1));
  out.back() = b;
  for (double t : out) check_time(t);
  return out;
}

inline std::string format_erank_report(const ErankReport& rep) {
  std::string s = "erank-report v1\n";
  char buf[96];
  for (std::size_t i = 0; i < rep.grid.size(); ++i) {
    std::snprintf(buf, sizeof buf, "t %.17g erank %.17g\n", rep.grid[i], rep.eranks[i]);
    s += buf;
  }
  std::snprintf(buf, sizeof buf, "t_star %.17g\n", rep.t_star);
  s += buf;
  return s;
}

inline ErankReport parse_erank_report(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != "erank-report v1") throw FormatError("missing 'erank-report v1' header");
  ErankReport rep;
  bool have_star = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    double t = 0, e = 0;
    if (std::sscanf(line.c_str(), "t %lf erank %lf", &t, &e) == 2) {
      rep.grid.push_back(t);
      rep.eranks.push_back(e);
    } else if (std::sscanf(line.c_str(), "t_star %lf", &t) == 1) {
      rep.t_star = t;
      have_star = true;
    } else {
      throw FormatError("unrecognized erank report line '" + line + "'");
    }
  }
  if (!have_star) throw FormatError("erank report has no t_star line");
  return rep;
}

}  // namespace sprout
