#pragma once

// Forward corruption x_t = a(t) x0 + b(t) eps, regression targets
// r = c(t) x0 + d(t) eps, loss weighting and the algebraic inverses.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sprout/error.hpp"
#include "sprout/rng.hpp"
#include "sprout/tensor.hpp"

namespace sprout {

enum class ScheduleKind { LinearInterp, Cosine, VpDdpm };
enum class ParamMode { Epsilon, X0, Velocity };
enum class WeightingKind { Uniform, Snr };

inline constexpr double kSingularCutoff = 1e-3;

inline ScheduleKind parse_schedule_kind(std::string_view s) {
  if (s == "linear-interp" || s == "linear") return ScheduleKind::LinearInterp;
  if (s == "cosine") return ScheduleKind::Cosine;
  if (s == "vp-ddpm" || s == "ddpm") return ScheduleKind::VpDdpm;
  throw ConfigError("unknown schedule kind '" + std::string(s) + "'");
}

inline std::string to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::LinearInterp: return "linear-interp";
    case ScheduleKind::Cosine: return "cosine";
    case ScheduleKind::VpDdpm: return "vp-ddpm";
  }
  return "?";
}

inline ParamMode parse_param_mode(std::string_view s) {
  if (s == "epsilon" || s == "eps") return ParamMode::Epsilon;
  if (s == "x0" || s == "x") return ParamMode::X0;
  if (s == "velocity" || s == "v") return ParamMode::Velocity;
  throw ConfigError("unknown parameterization '" + std::string(s) + "'");
}

inline std::string to_string(ParamMode m) {
  switch (m) {
    case ParamMode::Epsilon: return "epsilon";
    case ParamMode::X0: return "x0";
    case ParamMode::Velocity: return "velocity";
  }
  return "?";
}

inline WeightingKind parse_weighting_kind(std::string_view s) {
  if (s == "uniform") return WeightingKind::Uniform;
  if (s == "snr") return WeightingKind::Snr;
  throw ConfigError("unknown loss weighting '" + std::string(s) + "'");
}

inline std::string to_string(WeightingKind w) {
  return w == WeightingKind::Uniform ? "uniform" : "snr";
}

inline void check_time(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw ArgumentError("timestep " + std::to_string(t) + " outside [0,1]");
}

// Signal/noise coefficients over t in [0, 1] (T = 1).
class NoiseSchedule {
 public:
  static constexpr int kDdpmSteps = 1000;

  explicit NoiseSchedule(ScheduleKind kind = ScheduleKind::LinearInterp) : kind_(kind) {
    if (kind_ == ScheduleKind::VpDdpm) build_ddpm_table();
  }

  ScheduleKind kind() const noexcept { return kind_; }
  static constexpr double max_time() { return 1.0; }

  double a(double t) const {
    switch (kind_) {
      case ScheduleKind::LinearInterp: return 1.0 - t;
      case ScheduleKind::Cosine: return std::cos(std::numbers::pi * t / 2.0);
      case ScheduleKind::VpDdpm: return ddpm_a(t);
    }
    return 0.0;
  }

  double b(double t) const {
    switch (kind_) {
      case ScheduleKind::LinearInterp: return t;
      case ScheduleKind::Cosine: return std::sin(std::numbers::pi * t / 2.0);
      case ScheduleKind::VpDdpm: {
        const double at = ddpm_a(t);
        return std::sqrt(std::max(0.0, 1.0 - at * at));
      }
    }
    return 0.0;
  }

 private:
  // Linear beta ramp 1e-4 -> 0.02 over 1000 steps; sqrt(alpha_bar) is
  // interpolated linearly between steps and rescaled so the terminal step is
  // pure noise (a(1) = 0) while a(0) = 1.
  void build_ddpm_table() {
    sqrt_abar_.resize(kDdpmSteps + 1);
    double log_abar = 0.0;
    sqrt_abar_[0] = 1.0;
    for (int k = 1; k <= kDdpmSteps; ++k) {
      const double beta = 1e-4 + (static_cast<double>(k - 1) / (kDdpmSteps - 1)) * (0.02 - 1e-4);
      log_abar += std::log1p(-beta);
      sqrt_abar_[k] = std::exp(0.5 * log_abar);
    }
    const double last = sqrt_abar_.back();
    for (double& v : sqrt_abar_) v = (v - last) / (1.0 - last);
  }

  double ddpm_a(double t) const {
    const double pos = std::clamp(t, 0.0, 1.0) * kDdpmSteps;
    const int k = std::min(static_cast<int>(pos), kDdpmSteps - 1);
    const double frac = pos - k;
    return sqrt_abar_[k] + frac * (sqrt_abar_[k + 1] - sqrt_abar_[k]);
  }

  ScheduleKind kind_;
  std::vector<double> sqrt_abar_;
};

inline NoiseSchedule make_schedule(ScheduleKind kind) { return NoiseSchedule(kind); }
inline NoiseSchedule make_schedule(std::string_view kind) { return NoiseSchedule(parse_schedule_kind(kind)); }

struct Parameterization {
  ParamMode mode = ParamMode::Epsilon;

  double c(double) const {
    switch (mode) {
      case ParamMode::Epsilon: return 0.0;
      case ParamMode::X0: return 1.0;
      case ParamMode::Velocity: return -1.0;
    }
    return 0.0;
  }
  double d(double) const { return mode == ParamMode::X0 ? 0.0 : 1.0; }
};

struct LossWeighting {
  WeightingKind kind = WeightingKind::Uniform;
  // SNR weights are clipped at this value so lambda stays finite at t = 0.
  double snr_clip = 5.0;

  double operator()(double t, const NoiseSchedule& sched) const {
    if (kind == WeightingKind::Uniform) return 1.0;
    const double a = sched.a(t), b = sched.b(t);
    if (b <= 0.0) return snr_clip;
    return std::min(snr_clip, (a * a) / (b * b));
  }
};

template <class T>
struct NoisyBatch {
  Tensor<T> x0;
  Tensor<T> eps;
  std::vector<double> t;
  Tensor<T> xt;
};

namespace detail {
template <class T>
void check_batch(const Tensor<T>& x, std::span<const double> t) {
  if (x.rank() == 0 || x.dim(0) != t.size())
    throw ShapeError("time vector length " + std::to_string(t.size()) + " does not match batch of shape " +
                     shape_str(x.shape()));
  for (double ti : t) check_time(ti);
}
}  // namespace detail

template <class T>
NoisyBatch<T> forward_diffuse(Tensor<T> x0, Tensor<T> eps, std::vector<double> t, const NoiseSchedule& sched) {
  require_same_shape(x0, eps, "forward_diffuse");
  detail::check_batch(x0, t);
  Tensor<T> xt(x0.shape());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const T a = static_cast<T>(sched.a(t[i])), b = static_cast<T>(sched.b(t[i]));
    auto xs = x0.item(i);
    auto es = eps.item(i);
    auto out = xt.item(i);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = a * xs[j] + b * es[j];
  }
  return {std::move(x0), std::move(eps), std::move(t), std::move(xt)};
}

template <class T>
Tensor<T> regression_target(const Tensor<T>& x0, const Tensor<T>& eps, std::span<const double> t,
                            const Parameterization& param) {
  require_same_shape(x0, eps, "regression_target");
  detail::check_batch(x0, t);
  Tensor<T> r(x0.shape());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const T c = static_cast<T>(param.c(t[i])), d = static_cast<T>(param.d(t[i]));
    auto xs = x0.item(i);
    auto es = eps.item(i);
    auto out = r.item(i);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = c * xs[j] + d * es[j];
  }
  return r;
}

template <class T>
Tensor<T> recover_x0(const Tensor<T>& xt, const Tensor<T>& prediction, std::span<const double> t,
                     const NoiseSchedule& sched, const Parameterization& param) {
  require_same_shape(xt, prediction, "recover_x0");
  detail::check_batch(xt, t);
  if (param.mode == ParamMode::X0) return prediction;
  Tensor<T> out(xt.shape());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double a = sched.a(t[i]), b = sched.b(t[i]);
    const double denom = param.mode == ParamMode::Epsilon ? a : a + b;
    if (denom < kSingularCutoff)
      throw SingularityError("cannot recover x0 at t=" + std::to_string(t[i]) +
                             ": signal coefficient below 1e-3 (near-pure-noise timestep)");
    auto xs = xt.item(i);
    auto ps = prediction.item(i);
    auto os = out.item(i);
    for (std::size_t j = 0; j < os.size(); ++j)
      os[j] = static_cast<T>((static_cast<double>(xs[j]) - b * static_cast<double>(ps[j])) / denom);
  }
  return out;
}

// Mean over the batch of lambda(t_i) * MSE(prediction_i, target_i).
template <class T>
double denoising_loss(const Tensor<T>& prediction, const Tensor<T>& target, std::span<const double> t,
                      const LossWeighting& weighting, const NoiseSchedule& sched) {
  require_same_shape(prediction, target, "denoising_loss");
  detail::check_batch(prediction, t);
  double total = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    auto ps = prediction.item(i);
    auto rs = target.item(i);
    double se = 0.0;
    for (std::size_t j = 0; j < ps.size(); ++j) {
      const double diff = static_cast<double>(ps[j]) - static_cast<double>(rs[j]);
      se += diff * diff;
    }
    total += weighting(t[i], sched) * se / static_cast<double>(ps.size());
  }
  const double loss = total / static_cast<double>(t.size());
  if (!std::isfinite(loss)) throw NumericError("non-finite denoising loss");
  return loss;
}

// d loss / d prediction for denoising_loss.
template <class T>
Tensor<T> denoising_loss_grad(const Tensor<T>& prediction, const Tensor<T>& target, std::span<const double> t,
                              const LossWeighting& weighting, const NoiseSchedule& sched) {
  require_same_shape(prediction, target, "denoising_loss_grad");
  Tensor<T> g(prediction.shape());
  for (std::size_t i = 0; i < t.size(); ++i) {
    auto ps = prediction.item(i);
    auto rs = target.item(i);
    auto gs = g.item(i);
    const double scale = 2.0 * weighting(t[i], sched) / (static_cast<double>(ps.size()) * t.size());
    for (std::size_t j = 0; j < gs.size(); ++j) gs[j] = static_cast<T>(scale * (ps[j] - rs[j]));
  }
  return g;
}

inline std::vector<double> sample_timesteps(std::size_t batch_size, std::uint64_t seed) {
  if (batch_size == 0) throw ArgumentError("batch_size must be >= 1");
  Rng rng(seed);
  std::vector<double> t(batch_size);
  for (double& v : t) v = uniform01(rng);
  return t;
}

template <class T>
Tensor<T> randn(Shape shape, Rng& rng) {
  Tensor<T> out(std::move(shape));
  for (auto& v : out.vec()) v = static_cast<T>(standard_normal(rng));
  return out;
}

}  // namespace sprout
