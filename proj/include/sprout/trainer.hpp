#pragma once

// Denoising pre-training: AdamW, EMA, the step/loop drivers, and the
// square-root compute-budget estimator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sprout/binio.hpp"
#include "sprout/checkpoint.hpp"
#include "sprout/config_file.hpp"
#include "sprout/diffusion.hpp"
#include "sprout/image.hpp"
#include "sprout/objective.hpp"
#include "sprout/parallel.hpp"
#include "sprout/rng.hpp"
#include "sprout/udit.hpp"

namespace sprout {

struct TrainConfig {
  UDiTConfig model = preset_config("udit-nano");
  ScheduleKind schedule = ScheduleKind::LinearInterp;
  ParamMode param = ParamMode::Epsilon;
  WeightingKind weighting = WeightingKind::Uniform;
  std::size_t batch_size = 16;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.01;
  double adam_eps = 1e-8;
  std::uint64_t steps = 1000;
  double ema_decay = 0.999;
  std::uint64_t seed = 0;
  // 0 disables periodic checkpoints; the final one is always written.
  std::uint64_t checkpoint_interval = 0;
  // Square crop size fed to the model.
  std::size_t resolution = 64;

  void validate() const {
    model.validate();
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must be in [0,1)");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be nonnegative");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("ema_decay must be in [0,1)");
    if (resolution == 0 || resolution % model.down_factor != 0)
      throw ConfigError("resolution " + std::to_string(resolution) + " must be a positive multiple of " +
                        std::to_string(model.down_factor));
  }

  std::string to_text() const {
    std::ostringstream os;
    os << model.to_text();
    char buf[64];
    auto num = [&](const char* key, double v) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      os << key << " = " << buf << "\n";
    };
    os << "schedule = " << to_string(schedule) << "\n";
    os << "parameterization = " << to_string(param) << "\n";
    os << "weighting = " << to_string(weighting) << "\n";
    os << "batch_size = " << batch_size << "\n";
    num("lr", lr);
    num("beta1", beta1);
    num("beta2", beta2);
    num("weight_decay", weight_decay);
    num("adam_eps", adam_eps);
    os << "steps = " << steps << "\n";
    num("ema_decay", ema_decay);
    os << "seed = " << seed << "\n";
    os << "checkpoint_interval = " << checkpoint_interval << "\n";
    os << "resolution = " << resolution << "\n";
    return os.str();
  }

  // Unknown keys are rejected.
  static TrainConfig from_config(const KeyValueConfig& kv) {
    TrainConfig c;
    c.model = UDiTConfig::from_config(kv);
    c.schedule = parse_schedule_kind(kv.get_string("schedule", to_string(c.schedule)));
    c.param = parse_param_mode(kv.get_string("parameterization", to_string(c.param)));
    c.weighting = parse_weighting_kind(kv.get_string("weighting", to_string(c.weighting)));
    auto positive = [&](const char* key, std::int64_t fallback) {
      const auto v = kv.get_int(key, fallback);
      if (v < 0) throw ConfigError(std::string("key '") + key + "' must be nonnegative");
      return static_cast<std::uint64_t>(v);
    };
    c.batch_size = positive("batch_size", static_cast<std::int64_t>(c.batch_size));
    c.lr = kv.get_double("lr", c.lr);
    c.beta1 = kv.get_double("beta1", c.beta1);
    c.beta2 = kv.get_double("beta2", c.beta2);
    c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
    c.adam_eps = kv.get_double("adam_eps", c.adam_eps);
    c.steps = positive("steps", static_cast<std::int64_t>(c.steps));
    c.ema_decay = kv.get_double("ema_decay", c.ema_decay);
    c.seed = positive("seed", static_cast<std::int64_t>(c.seed));
    c.checkpoint_interval = positive("checkpoint_interval", static_cast<std::int64_t>(c.checkpoint_interval));
    c.resolution = positive("resolution", static_cast<std::int64_t>(c.resolution));
    kv.reject_unused();
    c.validate();
    return c;
  }

  static TrainConfig parse(std::string_view text, const std::string& origin = "config") {
    return from_config(KeyValueConfig::parse(text, origin));
  }
};

// Decoupled-weight-decay Adam.
class AdamW {
 public:
  AdamW() = default;
  AdamW(std::size_t n, double lr, double beta1, double beta2, double weight_decay, double eps)
      : lr_(lr), b1_(beta1), b2_(beta2), wd_(weight_decay), eps_(eps), m_(n, 0.0f), v_(n, 0.0f) {}

  void step(std::span<float> w, std::span<const float> g) {
    if (w.size() != m_.size() || g.size() != m_.size()) throw ShapeError("optimizer size mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    const float b1 = static_cast<float>(b1_), b2 = static_cast<float>(b2_);
    const float lr = static_cast<float>(lr_), decay = static_cast<float>(lr_ * wd_);
    const float ic1 = static_cast<float>(1.0 / c1), isc2 = static_cast<float>(1.0 / std::sqrt(c2));
    const float eps = static_cast<float>(eps_);
    for (std::size_t i = 0; i < w.size(); ++i) {
      m_[i] = b1 * m_[i] + (1.0f - b1) * g[i];
      v_[i] = b2 * v_[i] + (1.0f - b2) * g[i] * g[i];
      const float update = (m_[i] * ic1) / (std::sqrt(v_[i]) * isc2 + eps);
      w[i] -= lr * update + decay * w[i];
    }
  }

  std::uint64_t step_count() const noexcept { return t_; }
  const std::vector<float>& m() const noexcept { return m_; }
  const std::vector<float>& v() const noexcept { return v_; }

  void restore(std::uint64_t t, std::vector<float> m, std::vector<float> v) {
    if (m.size() != m_.size() || v.size() != v_.size()) throw FormatError("optimizer state size mismatch");
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  double lr_ = 1e-4, b1_ = 0.9, b2_ = 0.95, wd_ = 0.01, eps_ = 1e-8;
  std::uint64_t t_ = 0;
  std::vector<float> m_, v_;
};

// shadow <- d * shadow + (1 - d) * w, starting from the initial weights.
class Ema {
 public:
  Ema() = default;
  Ema(double decay, std::span<const float> init) : decay_(decay), shadow_(init.begin(), init.end()) {}

  void update(std::span<const float> w) {
    if (w.size() != shadow_.size()) throw ShapeError("EMA size mismatch");
    const double d = decay_;
    for (std::size_t i = 0; i < w.size(); ++i)
      shadow_[i] = static_cast<float>(d * static_cast<double>(shadow_[i]) + (1.0 - d) * static_cast<double>(w[i]));
  }

  const std::vector<float>& shadow() const noexcept { return shadow_; }
  void restore(std::vector<float> s) {
    if (s.size() != shadow_.size()) throw FormatError("EMA size mismatch");
    shadow_ = std::move(s);
  }

 private:
  double decay_ = 0.999;
  std::vector<float> shadow_;
};

// Smallest integer s with s >= s_ref * sqrt(n_target / n_ref), decided in
// exact integer arithmetic.
inline std::uint64_t estimate_steps(std::int64_t n_ref, std::int64_t s_ref, std::int64_t n_target) {
  if (n_ref <= 0 || s_ref <= 0 || n_target <= 0)
    throw ArgumentError("estimate_steps needs positive n_ref, s_ref and n_target");
  using u128 = unsigned __int128;
  const u128 rhs = static_cast<u128>(s_ref) * static_cast<u128>(s_ref) * static_cast<u128>(n_target);
  const auto ok = [&](std::uint64_t s) { return static_cast<u128>(s) * s * static_cast<u128>(n_ref) >= rhs; };
  const double approx = static_cast<double>(s_ref) * std::sqrt(static_cast<double>(n_target) / static_cast<double>(n_ref));
  if (!(approx < 1.8e19)) throw ArgumentError("estimated step count overflows");
  std::uint64_t s = std::max<std::uint64_t>(1, static_cast<std::uint64_t>(approx));
  while (s > 1 && ok(s - 1)) --s;
  while (!ok(s)) ++s;
  return s;
}

struct StepStats {
  std::uint64_t step = 0;  // 1-based index of the update just applied
  double loss = 0.0;
  double t_mean = 0.0;
  double t_min = 0.0, t_max = 0.0;
  double grad_norm = 0.0;
};

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg) : cfg_(validated(std::move(cfg))), model_(UDiT<float>::build(cfg_.model, cfg_.seed)) {
    init_state();
  }

  Trainer(TrainConfig cfg, UDiT<float> model) : cfg_(std::move(cfg)), model_(std::move(model)) {
    cfg_.validate();
    if (!(model_.config() == cfg_.model)) throw ConfigError("model does not match the training config");
    init_state();
  }

  // Continues from a checkpoint written by checkpoint(); the stored config
  // text is authoritative.
  static Trainer resume(const Checkpoint& ck) {
    auto cfg = TrainConfig::parse(ck.config_text, "checkpoint config");
    Trainer tr(cfg, model_from_checkpoint(ck));
    tr.step_ = ck.step;
    if (ck.ema) tr.ema_.restore(flat_from_table(tr.model_.layout(), *ck.ema, "ema"));
    if (ck.optimizer)
      tr.opt_.restore(ck.optimizer->step, flat_from_table(tr.model_.layout(), ck.optimizer->m, "optimizer m"),
                      flat_from_table(tr.model_.layout(), ck.optimizer->v, "optimizer v"));
    return tr;
  }

  // One update on a clean batch in [-1, 1]. Timesteps and noise come from
  // streams keyed on (seed, step), so a resumed run draws the same values.
  StepStats train_step(const Tensor<float>& x0) {
    const std::uint64_t k = step_;
    const std::size_t B = x0.dim(0);
    auto t = sample_timesteps(B, derive_seed(cfg_.seed, k, 1));
    Rng noise_rng(derive_seed(cfg_.seed, k, 2));
    auto eps = randn<float>(x0.shape(), noise_rng);
    auto target = regression_target(x0, eps, t, param_);
    auto noisy = forward_diffuse(x0, std::move(eps), t, sched_);

    const double loss = denoising_loss_and_grad(model_, noisy.xt, t, target, weighting_, sched_, std::span<float>(grads_));
    StepStats st;
    st.step = k + 1;
    st.loss = loss;
    st.t_min = *std::min_element(t.begin(), t.end());
    st.t_max = *std::max_element(t.begin(), t.end());
    st.t_mean = std::accumulate(t.begin(), t.end(), 0.0) / static_cast<double>(B);
    double g2 = 0.0;
    for (float g : grads_) g2 += static_cast<double>(g) * g;
    st.grad_norm = std::sqrt(g2);
    if (!std::isfinite(loss) || !std::isfinite(st.grad_norm)) {
      char msg[256];
      std::snprintf(msg, sizeof msg, "non-finite loss at step %llu (loss %g, t in [%.4f, %.4f], grad-norm %g)",
                    static_cast<unsigned long long>(st.step), loss, st.t_min, st.t_max, st.grad_norm);
      throw NumericError(msg);
    }
    opt_.step(model_.weights(), grads_);
    ema_.update(model_.weights());
    step_ = k + 1;
    return st;
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.config_text = cfg_.to_text();
    ck.step = step_;
    ck.weights = table_from_flat(model_.layout(), model_.weights());
    ck.ema = table_from_flat(model_.layout(), ema_.shadow());
    OptimizerState st;
    st.step = opt_.step_count();
    st.m = table_from_flat(model_.layout(), opt_.m());
    st.v = table_from_flat(model_.layout(), opt_.v());
    ck.optimizer = std::move(st);
    return ck;
  }

  const TrainConfig& config() const noexcept { return cfg_; }
  const UDiT<float>& model() const noexcept { return model_; }
  const Ema& ema() const noexcept { return ema_; }
  std::uint64_t global_step() const noexcept { return step_; }

 private:
  static TrainConfig validated(TrainConfig c) {
    c.validate();
    return c;
  }

  void init_state() {
    sched_ = make_schedule(cfg_.schedule);
    param_ = Parameterization{cfg_.param};
    weighting_ = LossWeighting{cfg_.weighting};
    opt_ = AdamW(model_.param_count(), cfg_.lr, cfg_.beta1, cfg_.beta2, cfg_.weight_decay, cfg_.adam_eps);
    ema_ = Ema(cfg_.ema_decay, model_.weights());
    grads_.assign(model_.param_count(), 0.0f);
  }

  TrainConfig cfg_;
  UDiT<float> model_;
  NoiseSchedule sched_{ScheduleKind::LinearInterp};
  Parameterization param_{ParamMode::Epsilon};
  LossWeighting weighting_{WeightingKind::Uniform};
  AdamW opt_;
  Ema ema_;
  std::vector<float> grads_;
  std::uint64_t step_ = 0;
};

// Decoded training images kept in memory; batches are random square crops
// drawn through per-epoch seeded permutations.
class ImageDataset {
 public:
  static ImageDataset load(const std::filesystem::path& dir, std::size_t resolution) {
    const auto files = list_files(dir);
    if (files.empty()) throw IngestError("no images in '" + dir.string() + "'");
    ImageDataset ds;
    ds.resolution_ = resolution;
    ds.images_.resize(files.size());
    parallel_for(files.size(), [&](std::size_t i) { ds.images_[i] = read_png(files[i].string()); });
    for (std::size_t i = 0; i < files.size(); ++i)
      if (ds.images_[i].width < resolution || ds.images_[i].height < resolution)
        throw IngestError("'" + files[i].string() + "' is smaller than the training resolution " +
                          std::to_string(resolution));
    return ds;
  }

  static ImageDataset from_images(std::vector<Image8> images, std::size_t resolution) {
    if (images.empty()) throw IngestError("empty dataset");
    ImageDataset ds;
    ds.resolution_ = resolution;
    for (const auto& im : images)
      if (im.width < resolution || im.height < resolution || im.channels != 3)
        throw IngestError("dataset image smaller than the training resolution or not RGB");
    ds.images_ = std::move(images);
    return ds;
  }

  std::size_t size() const noexcept { return images_.size(); }

  Tensor<float> batch(std::uint64_t step, std::size_t batch_size, std::uint64_t seed) {
    const std::size_t n = images_.size();
    std::vector<Image8> crops;
    crops.reserve(batch_size);
    for (std::size_t j = 0; j < batch_size; ++j) {
      const std::uint64_t pos = step * batch_size + j;
      const std::uint64_t epoch = pos / n;
      const auto& img = images_[permutation(epoch, seed)[pos % n]];
      Rng rng(derive_seed(seed, pos, 5));
      const std::size_t ox = img.width == resolution_ ? 0 : rng() % (img.width - resolution_ + 1);
      const std::size_t oy = img.height == resolution_ ? 0 : rng() % (img.height - resolution_ + 1);
      crops.push_back(crop(img, ox, oy, resolution_, resolution_));
    }
    return images_to_tensor<float>(crops);
  }

 private:
  const std::vector<std::size_t>& permutation(std::uint64_t epoch, std::uint64_t seed) {
    if (!perm_epoch_ || *perm_epoch_ != epoch) {
      perm_.resize(images_.size());
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      Rng rng(derive_seed(seed, epoch, 3));
      for (std::size_t i = perm_.size(); i > 1; --i) std::swap(perm_[i - 1], perm_[rng() % i]);
      perm_epoch_ = epoch;
    }
    return perm_;
  }

  std::vector<Image8> images_;
  std::size_t resolution_ = 64;
  std::vector<std::size_t> perm_;
  std::optional<std::uint64_t> perm_epoch_;
};

struct LossRow {
  std::uint64_t step = 0;
  double loss = 0.0;
  double t_mean = 0.0;
  friend bool operator==(const LossRow&, const LossRow&) = default;
};

inline std::string format_loss_log(const std::vector<LossRow>& rows) {
  std::string out;
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%llu\t%.17g\t%.17g\n", static_cast<unsigned long long>(r.step), r.loss, r.t_mean);
    out += buf;
  }
  return out;
}

inline std::vector<LossRow> parse_loss_log(std::string_view text) {
  std::vector<LossRow> rows;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    LossRow r;
    unsigned long long step = 0;
    if (std::sscanf(line.c_str(), "%llu\t%lf\t%lf", &step, &r.loss, &r.t_mean) != 3)
      throw FormatError("malformed loss log line '" + line + "'");
    r.step = step;
    rows.push_back(r);
  }
  return rows;
}

struct LoopOptions {
  std::filesystem::path out;  // checkpoint path, rewritten at every save
  std::filesystem::path log;  // empty: "<out>.log"
  std::optional<Checkpoint> resume;
  // Stop early (as if interrupted) once this many total steps are done; the
  // state is checkpointed before returning.
  std::optional<std::uint64_t> stop_after;
  std::function<void(const StepStats&)> on_step;
};

struct LoopResult {
  Checkpoint checkpoint;
  std::vector<LossRow> log;
};

inline LoopResult train_loop(ImageDataset& data, const TrainConfig& cfg, const LoopOptions& opts) {
  Trainer trainer = opts.resume ? Trainer::resume(*opts.resume) : Trainer(cfg);
  const auto& tc = trainer.config();
  const auto log_path = opts.log.empty() ? std::filesystem::path(opts.out.string() + ".log") : opts.log;

  std::vector<LossRow> rows;
  if (opts.resume && std::filesystem::exists(log_path)) {
    for (const auto& r : parse_loss_log(read_file_bytes(log_path)))
      if (r.step <= trainer.global_step()) rows.push_back(r);
  }
  auto save = [&] {
    if (opts.out.empty()) return;
    save_checkpoint(trainer.checkpoint(), opts.out);
    atomic_write(log_path, format_loss_log(rows));
  };

  const std::uint64_t end = std::min(tc.steps, opts.stop_after.value_or(tc.steps));
  while (trainer.global_step() < end) {
    auto batch = data.batch(trainer.global_step(), tc.batch_size, tc.seed);
    const auto st = trainer.train_step(batch);
    rows.push_back({st.step, st.loss, st.t_mean});
    if (opts.on_step) opts.on_step(st);
    if (tc.checkpoint_interval > 0 && st.step % tc.checkpoint_interval == 0 && st.step != end) save();
  }
  save();
  return {trainer.checkpoint(), std::move(rows)};
}

}  // namespace sprout
