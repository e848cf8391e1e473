#pragma once

// Pixel-space diffusion transformer. Strided convolutions take the image down
// to a token grid, a stack of adaLN-conditioned transformer blocks runs on the
// grid, and transposed convolutions bring the result back to pixel
// resolution. Token channels are never reshaped into pixels.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sprout/config_file.hpp"
#include "sprout/error.hpp"
#include "sprout/nn/layers.hpp"
#include "sprout/parallel.hpp"
#include "sprout/rng.hpp"
#include "sprout/tensor.hpp"

namespace sprout {

struct UDiTConfig {
  std::string preset = "custom";
  std::size_t in_channels = 3;
  std::size_t down_factor = 8;
  std::vector<std::size_t> stem_channels{16, 32, 64};
  std::size_t trunk_depth = 4;
  std::size_t trunk_width = 64;
  std::size_t heads = 4;
  std::size_t time_embed_dim = 64;
  std::size_t mlp_ratio = 4;
  // Negative selects the middle block (trunk_depth / 2).
  int feature_tap_layer = -1;
  bool head_zero_init = true;

  int tap() const { return feature_tap_layer < 0 ? static_cast<int>(trunk_depth / 2) : feature_tap_layer; }

  void validate() const {
    if (in_channels == 0) throw ConfigError("in_channels must be positive");
    if (stem_channels.empty()) throw ConfigError("stem_channels must name at least one stage");
    for (auto c : stem_channels)
      if (c == 0) throw ConfigError("stem channel counts must be positive");
    if (down_factor != (std::size_t{1} << stem_channels.size()))
      throw ConfigError("down_factor " + std::to_string(down_factor) + " must equal 2^len(stem_channels) = " +
                        std::to_string(std::size_t{1} << stem_channels.size()));
    if (trunk_depth == 0) throw ConfigError("trunk_depth must be positive");
    if (heads == 0 || trunk_width % heads != 0)
      throw ConfigError("trunk_width " + std::to_string(trunk_width) + " not divisible by heads " +
                        std::to_string(heads));
    if (trunk_width % 4 != 0) throw ConfigError("trunk_width must be a multiple of 4 (2D positional embedding)");
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0) throw ConfigError("time_embed_dim must be even and >= 2");
    if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be positive");
    if (tap() < 0 || tap() >= static_cast<int>(trunk_depth))
      throw ConfigError("feature_tap_layer " + std::to_string(feature_tap_layer) + " outside [0, trunk_depth)");
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "preset = " << preset << "\n";
    os << "in_channels = " << in_channels << "\n";
    os << "down_factor = " << down_factor << "\n";
    os << "stem_channels = ";
    for (std::size_t i = 0; i < stem_channels.size(); ++i) os << (i ? "," : "") << stem_channels[i];
    os << "\n";
    os << "trunk_depth = " << trunk_depth << "\n";
    os << "trunk_width = " << trunk_width << "\n";
    os << "heads = " << heads << "\n";
    os << "time_embed_dim = " << time_embed_dim << "\n";
    os << "mlp_ratio = " << mlp_ratio << "\n";
    os << "feature_tap_layer = " << feature_tap_layer << "\n";
    os << "head_zero_init = " << (head_zero_init ? "true" : "false") << "\n";
    return os.str();
  }

  // Model keys from a key/value config; `preset` (if present) supplies the
  // base values and the remaining keys override it.
  static UDiTConfig from_config(const KeyValueConfig& kv);

  friend bool operator==(const UDiTConfig&, const UDiTConfig&) = default;
};

inline std::vector<std::size_t> parse_size_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t n = 0;
      const long v = std::stol(item, &n);
      if (v <= 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("expected a comma-separated list of positive integers, got '" + s + "'");
    }
  }
  return out;
}

// Named presets. S/B/L are dimensioned to land within 5% of 51M / 112M / 361M
// parameters; nano is a sub-1M model for desk-scale runs.
inline UDiTConfig preset_config(std::string_view name) {
  UDiTConfig c;
  if (name == "udit-nano") {
    c.stem_channels = {16, 32, 64};
    c.trunk_depth = 4;
    c.trunk_width = 64;
    c.heads = 4;
    c.time_embed_dim = 64;
  } else if (name == "udit-s") {
    c.stem_channels = {128, 256, 384};
    c.trunk_depth = 10;
    c.trunk_width = 512;
    c.heads = 8;
    c.time_embed_dim = 256;
  } else if (name == "udit-b") {
    c.stem_channels = {128, 256, 512};
    c.trunk_depth = 10;
    c.trunk_width = 768;
    c.heads = 12;
    c.time_embed_dim = 256;
  } else if (name == "udit-l") {
    c.stem_channels = {192, 384, 768};
    c.trunk_depth = 18;
    c.trunk_width = 1024;
    c.heads = 16;
    c.time_embed_dim = 256;
  } else {
    throw ConfigError("unknown model preset '" + std::string(name) + "' (expected udit-nano|udit-s|udit-b|udit-l)");
  }
  c.preset = std::string(name);
  c.down_factor = std::size_t{1} << c.stem_channels.size();
  return c;
}

inline UDiTConfig UDiTConfig::from_config(const KeyValueConfig& kv) {
  // No preset key means the default nano preset.
  const std::string p = kv.get_string("preset", "udit-nano");
  UDiTConfig c = p == "custom" ? UDiTConfig{} : preset_config(p);
  auto get_size = [&](const char* key, std::size_t fallback) {
    const auto v = kv.get_int(key, static_cast<std::int64_t>(fallback));
    if (v < 0) throw ConfigError(std::string("key '") + key + "' must be nonnegative");
    return static_cast<std::size_t>(v);
  };
  c.in_channels = get_size("in_channels", c.in_channels);
  if (kv.has("stem_channels")) c.stem_channels = parse_size_list(kv.get_string("stem_channels", ""));
  c.down_factor = get_size("down_factor", std::size_t{1} << c.stem_channels.size());
  c.trunk_depth = get_size("trunk_depth", c.trunk_depth);
  c.trunk_width = get_size("trunk_width", c.trunk_width);
  c.heads = get_size("heads", c.heads);
  c.time_embed_dim = get_size("time_embed_dim", c.time_embed_dim);
  c.mlp_ratio = get_size("mlp_ratio", c.mlp_ratio);
  c.feature_tap_layer = static_cast<int>(kv.get_int("feature_tap_layer", c.feature_tap_layer));
  c.head_zero_init = kv.get_bool("head_zero_init", c.head_zero_init);
  c.validate();
  return c;
}

// Closed-form parameter count from layer dimensions.
inline std::size_t config_param_count(const UDiTConfig& c) {
  std::size_t n = 0, prev = c.in_channels;
  for (auto ch : c.stem_channels) {
    n += prev * ch * 9 + ch + 2 * ch;
    prev = ch;
  }
  const std::size_t C = c.stem_channels.back(), D = c.trunk_width, Hd = c.mlp_ratio * D;
  n += C * D + D;                                       // token projection
  n += c.time_embed_dim * D + D + D * D + D;            // timestep MLP
  const std::size_t block = (3 * D * D + 3 * D) + (D * D + D) + (D * Hd + Hd) + (Hd * D + D) + (6 * D * D + 6 * D);
  n += c.trunk_depth * block;
  n += 2 * D * D + 2 * D + D * C + C;                   // final adaLN + projection
  std::vector<std::size_t> chans(c.stem_channels.rbegin(), c.stem_channels.rend());
  chans.push_back(c.in_channels);
  for (std::size_t i = 0; i + 1 < chans.size(); ++i) {
    n += chans[i] * chans[i + 1] * 16 + chans[i + 1];
    if (i + 2 < chans.size()) n += 2 * chans[i + 1];
  }
  return n;
}

// Fixed 2D sin-cos embedding on an h x w token grid (N x D).
template <class T>
nn::Mat<T> pos_embed_2d(std::size_t h, std::size_t w, std::size_t D) {
  nn::Mat<T> pe(h * w, D);
  const std::size_t quarter = D / 4;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t row = y * w + x;
      for (std::size_t i = 0; i < quarter; ++i) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(quarter));
        pe(row, i) = static_cast<T>(std::sin(y * omega));
        pe(row, quarter + i) = static_cast<T>(std::cos(y * omega));
        pe(row, 2 * quarter + i) = static_cast<T>(std::sin(x * omega));
        pe(row, 3 * quarter + i) = static_cast<T>(std::cos(x * omega));
      }
    }
  return pe;
}

// Sinusoidal timestep features; t in [0, 1] is scaled to [0, 1000].
template <class T>
nn::Mat<T> timestep_features(double t, std::size_t dim) {
  nn::Mat<T> f(1, dim);
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    const double arg = 1000.0 * t * freq;
    f(0, i) = static_cast<T>(std::cos(arg));
    f(0, half + i) = static_cast<T>(std::sin(arg));
  }
  return f;
}

// One entry per operation in forward order, for architecture introspection.
struct LayerInfo {
  std::string kind;
  std::size_t in_channels = 0, in_h = 0, in_w = 0;
  std::size_t out_channels = 0, out_h = 0, out_w = 0;
};

template <class T>
struct BlockTrace {
  nn::Mat<T> mod;  // 1 x 6D: shift/scale/gate for attention, then for MLP
  nn::NormCache<T> norm1, norm2;
  nn::AttentionCache<T> attn;
  nn::MlpCache<T> mlp;
  nn::Mat<T> attn_out, mlp_out;
};

template <class T>
struct UDiTTrace {
  struct ConvStage {
    nn::Mat<T> cols;  // stem: im2col input; head: stage input
    nn::NormCache<T> norm;
    nn::Mat<T> normed;
    std::size_t h = 0, w = 0;  // input spatial size of the stage
  };
  std::size_t grid_h = 0, grid_w = 0;
  std::vector<ConvStage> stem;
  nn::Mat<T> tokens_in;  // N x C (stem output, token-major)
  nn::Mat<T> freq, t_hidden_pre, t_hidden, cond, cond_act;
  std::vector<BlockTrace<T>> blocks;
  nn::Mat<T> trunk_out;
  nn::NormCache<T> final_norm;
  nn::Mat<T> final_mod, final_in;
  std::vector<ConvStage> head;
};

template <class T>
class UDiT {
 public:
  using Mat = nn::Mat<T>;

  static UDiT build(const UDiTConfig& config, std::uint64_t seed) {
    config.validate();
    UDiT m(config);
    m.weights_.assign(m.layout_.total(), T(0));
    Rng rng(derive_seed(seed, 0x0d17));
    m.layout_.initialize(std::span<T>(m.weights_), rng);
    return m;
  }

  // Same architecture with externally supplied weights (checkpoint loading).
  static UDiT from_weights(const UDiTConfig& config, std::vector<T> weights) {
    config.validate();
    UDiT m(config);
    if (weights.size() != m.layout_.total())
      throw FormatError("weight vector has " + std::to_string(weights.size()) + " values, architecture needs " +
                        std::to_string(m.layout_.total()));
    m.weights_ = std::move(weights);
    return m;
  }

  const UDiTConfig& config() const noexcept { return config_; }
  const nn::ParamLayout& layout() const noexcept { return layout_; }
  std::span<const T> weights() const noexcept { return weights_; }
  std::span<T> weights() noexcept { return weights_; }
  std::size_t param_count() const noexcept { return weights_.size(); }
  std::size_t down_factor() const noexcept { return config_.down_factor; }
  std::size_t feature_dim() const noexcept { return config_.trunk_width; }

  void check_input(const Tensor<T>& xt, std::span<const double> t) const {
    if (xt.rank() != 4) throw ShapeError("expected B x C x H x W input, got " + shape_str(xt.shape()));
    if (xt.dim(1) != config_.in_channels)
      throw ShapeError("expected " + std::to_string(config_.in_channels) + " input channels, got " +
                       std::to_string(xt.dim(1)));
    const std::size_t f = config_.down_factor;
    if (xt.dim(2) % f != 0 || xt.dim(3) % f != 0 || xt.dim(2) == 0 || xt.dim(3) == 0)
      throw ShapeError("spatial size " + std::to_string(xt.dim(2)) + "x" + std::to_string(xt.dim(3)) +
                       " must be a positive multiple of " + std::to_string(f));
    if (t.size() != xt.dim(0))
      throw ShapeError("time vector length " + std::to_string(t.size()) + " does not match batch " +
                       std::to_string(xt.dim(0)));
    for (double ti : t)
      if (!(ti >= 0.0 && ti <= 1.0)) throw ArgumentError("timestep " + std::to_string(ti) + " outside [0,1]");
  }

  int resolve_tap(std::optional<int> layer) const {
    const int tap = layer.value_or(config_.tap());
    if (tap < 0 || tap >= static_cast<int>(config_.trunk_depth))
      throw ArgumentError("feature tap " + std::to_string(tap) + " outside [0, " +
                          std::to_string(config_.trunk_depth) + ")");
    return tap;
  }

  Tensor<T> forward(const Tensor<T>& xt, std::span<const double> t) const {
    check_input(xt, t);
    Tensor<T> out(xt.shape());
    const std::size_t H = xt.dim(2), W = xt.dim(3);
    parallel_for(xt.dim(0), [&](std::size_t i) {
      UDiTTrace<T> trace;
      Mat y = forward_sample(xt.item(i), H, W, t[i], trace);
      std::copy(y.data(), y.data() + y.size(), out.item(i).begin());
    });
    return out;
  }

  // Token activations after block `layer` as B x h x w x D.
  Tensor<T> extract_features(const Tensor<T>& xt, std::span<const double> t,
                             std::optional<int> layer = std::nullopt) const {
    check_input(xt, t);
    const int tap = resolve_tap(layer);
    const std::size_t H = xt.dim(2), W = xt.dim(3), f = config_.down_factor, D = config_.trunk_width;
    Tensor<T> out({xt.dim(0), H / f, W / f, D});
    parallel_for(xt.dim(0), [&](std::size_t i) {
      UDiTTrace<T> trace;
      Mat tokens = trunk_forward(xt.item(i), H, W, t[i], trace, tap + 1);
      std::copy(tokens.data(), tokens.data() + tokens.size(), out.item(i).begin());
    });
    return out;
  }

  // Stem output before the token projection, B x h x w x C.
  Tensor<T> stem_features(const Tensor<T>& x) const {
    std::vector<double> t(x.rank() ? x.dim(0) : 0, 0.0);
    check_input(x, t);
    const std::size_t H = x.dim(2), W = x.dim(3), f = config_.down_factor, C = config_.stem_channels.back();
    Tensor<T> out({x.dim(0), H / f, W / f, C});
    for (std::size_t i = 0; i < x.dim(0); ++i) {
      UDiTTrace<T> trace;
      stem_forward(x.item(i), H, W, trace);
      std::copy(trace.tokens_in.data(), trace.tokens_in.data() + trace.tokens_in.size(), out.item(i).begin());
    }
    return out;
  }

  // Single sample: x is C*H*W values. Returns C x (H*W).
  Mat forward_sample(std::span<const T> x, std::size_t H, std::size_t W, double t, UDiTTrace<T>& tr) const {
    Mat tokens = trunk_forward(x, H, W, t, tr, config_.trunk_depth);
    return head_forward(tokens, tr);
  }

  // Runs the stem and the first `blocks` trunk blocks; returns N x D tokens.
  Mat trunk_forward(std::span<const T> x, std::size_t H, std::size_t W, double t, UDiTTrace<T>& tr,
                    std::size_t blocks) const {
    const T* P = weights_.data();
    stem_forward(x, H, W, tr);
    Mat tok = token_proj_.forward(P, tr.tokens_in);
    tok += pos_embed_2d<T>(tr.grid_h, tr.grid_w, config_.trunk_width);

    tr.freq = timestep_features<T>(t, config_.time_embed_dim);
    tr.t_hidden_pre = t_fc1_.forward(P, tr.freq);
    tr.t_hidden = nn::silu(tr.t_hidden_pre);
    tr.cond = t_fc2_.forward(P, tr.t_hidden);
    tr.cond_act = nn::silu(tr.cond);

    tr.blocks.resize(blocks);
    for (std::size_t b = 0; b < blocks; ++b) tok = block_forward(b, tok, tr.cond_act, tr.blocks[b]);
    return tok;
  }

  // Backward from d loss / d output (C x H*W). Accumulates into grads and
  // optionally returns d loss / d input.
  void backward_sample(const UDiTTrace<T>& tr, const Mat& dout, std::span<T> grads, Mat* dinput = nullptr) const {
    const T* P = weights_.data();
    T* G = grads.data();
    Mat d = dout;
    for (std::size_t s = head_.size(); s-- > 0;) {
      const auto& st = tr.head[s];
      if (s + 1 < head_.size()) {
        d = nn::silu_backward(st.normed, d);
        d = head_norms_[s].backward(P, G, st.norm, d);
      }
      d = head_[s].backward(P, G, st.cols, d, st.h, st.w);
    }
    const std::size_t D = config_.trunk_width;
    Mat dfinal = d.transpose();
    Mat dm = final_proj_.backward(P, G, tr.final_in, dfinal);
    const nn::RowVec<T> scale = tr.final_mod.block(0, D, 1, D);
    Mat dmod(1, 2 * D);
    dmod.block(0, 0, 1, D) = dm.colwise().sum();
    dmod.block(0, D, 1, D) = (dm.array() * tr.final_norm.xhat.array()).colwise().sum();
    Mat dh = dm.array().rowwise() * (scale.array() + T(1));
    Mat dx = nn::layer_norm_backward(tr.final_norm, dh);
    Mat dcond = final_ada_.backward(P, G, tr.cond_act, dmod);
    trunk_backward(tr, dx, dcond, config_.trunk_depth, grads, dinput);
  }

  // Backward from a gradient on the tokens after `blocks` trunk blocks.
  void trunk_backward(const UDiTTrace<T>& tr, Mat dx, Mat dcond_act, std::size_t blocks, std::span<T> grads,
                      Mat* dinput = nullptr) const {
    const T* P = weights_.data();
    T* G = grads.data();
    for (std::size_t b = blocks; b-- > 0;) dx = block_backward(b, tr.blocks[b], dx, tr.cond_act, dcond_act, G);

    Mat dstem = token_proj_.backward(P, G, tr.tokens_in, dx).transpose();
    for (std::size_t s = stem_.size(); s-- > 0;) {
      const auto& st = tr.stem[s];
      dstem = nn::silu_backward(st.normed, dstem);
      dstem = stem_norms_[s].backward(P, G, st.norm, dstem);
      dstem = stem_[s].backward(P, G, st.cols, dstem, st.h, st.w);
    }
    if (dinput) *dinput = std::move(dstem);

    Mat dcond = nn::silu_backward(tr.cond, dcond_act);
    Mat dth = t_fc2_.backward(P, G, tr.t_hidden, dcond);
    t_fc1_.backward(P, G, tr.freq, nn::silu_backward(tr.t_hidden_pre, dth));
  }

  std::vector<LayerInfo> architecture(std::size_t H, std::size_t W) const {
    std::vector<LayerInfo> ops;
    std::size_t c = config_.in_channels, h = H, w = W;
    for (std::size_t s = 0; s < stem_.size(); ++s) {
      const std::size_t ho = stem_[s].geom.out_size(h), wo = stem_[s].geom.out_size(w);
      ops.push_back({"conv2d/stride2", c, h, w, stem_[s].cout, ho, wo});
      c = stem_[s].cout;
      h = ho;
      w = wo;
      ops.push_back({"group-norm", c, h, w, c, h, w});
      ops.push_back({"silu", c, h, w, c, h, w});
    }
    ops.push_back({"layout/grid-to-tokens", c, h, w, c, h, w});
    ops.push_back({"linear/token-projection", c, h, w, config_.trunk_width, h, w});
    for (std::size_t b = 0; b < blocks_.size(); ++b)
      ops.push_back({"transformer-block", config_.trunk_width, h, w, config_.trunk_width, h, w});
    ops.push_back({"adaln-final", config_.trunk_width, h, w, config_.trunk_width, h, w});
    c = config_.stem_channels.back();
    ops.push_back({"linear/head-projection", config_.trunk_width, h, w, c, h, w});
    ops.push_back({"layout/tokens-to-grid", c, h, w, c, h, w});
    for (std::size_t s = 0; s < head_.size(); ++s) {
      const std::size_t ho = head_[s].out_size(h), wo = head_[s].out_size(w);
      ops.push_back({"conv-transpose2d/stride2", c, h, w, head_[s].cout, ho, wo});
      c = head_[s].cout;
      h = ho;
      w = wo;
      if (s + 1 < head_.size()) {
        ops.push_back({"group-norm", c, h, w, c, h, w});
        ops.push_back({"silu", c, h, w, c, h, w});
      }
    }
    return ops;
  }

 private:
  struct Block {
    nn::Linear ada;
    nn::Attention attn;
    nn::Mlp mlp;
  };

  explicit UDiT(const UDiTConfig& config) : config_(config) {
    auto& L = layout_;
    std::size_t prev = config_.in_channels;
    for (std::size_t s = 0; s < config_.stem_channels.size(); ++s) {
      const std::string name = "stem." + std::to_string(s);
      stem_.push_back(nn::Conv2d::make(L, name + ".conv", prev, config_.stem_channels[s], nn::ConvGeom{3, 2, 1}));
      stem_norms_.push_back(nn::GroupNorm::make(L, name + ".norm", config_.stem_channels[s]));
      prev = config_.stem_channels[s];
    }
    const std::size_t D = config_.trunk_width;
    token_proj_ = nn::Linear::make(L, "token_proj", prev, D);
    t_fc1_ = nn::Linear::make(L, "time.fc1", config_.time_embed_dim, D, nn::Init::Normal002);
    t_fc2_ = nn::Linear::make(L, "time.fc2", D, D, nn::Init::Normal002);
    for (std::size_t b = 0; b < config_.trunk_depth; ++b) {
      const std::string name = "blocks." + std::to_string(b);
      Block blk;
      blk.ada = nn::Linear::make(L, name + ".adaln", D, 6 * D, nn::Init::Zero);
      blk.attn = nn::Attention::make(L, name + ".attn", D, config_.heads);
      blk.mlp = nn::Mlp::make(L, name + ".mlp", D, config_.mlp_ratio * D);
      blocks_.push_back(blk);
    }
    final_ada_ = nn::Linear::make(L, "final.adaln", D, 2 * D, nn::Init::Zero);
    final_proj_ = nn::Linear::make(L, "final.proj", D, prev);
    std::vector<std::size_t> chans(config_.stem_channels.rbegin(), config_.stem_channels.rend());
    chans.push_back(config_.in_channels);
    for (std::size_t s = 0; s + 1 < chans.size(); ++s) {
      const bool last = s + 2 == chans.size();
      const std::string name = "head." + std::to_string(s);
      head_.push_back(nn::ConvTranspose2d::make(L, name + ".conv", chans[s], chans[s + 1],
                                                last && config_.head_zero_init ? nn::Init::Zero : nn::Init::FanIn));
      if (!last) head_norms_.push_back(nn::GroupNorm::make(L, name + ".norm", chans[s + 1]));
    }
  }

  void stem_forward(std::span<const T> x, std::size_t H, std::size_t W, UDiTTrace<T>& tr) const {
    const T* P = weights_.data();
    Mat a = nn::ConstMatMap<T>(x.data(), config_.in_channels, H * W);
    std::size_t h = H, w = W;
    tr.stem.resize(stem_.size());
    for (std::size_t s = 0; s < stem_.size(); ++s) {
      auto& st = tr.stem[s];
      st.h = h;
      st.w = w;
      Mat z = stem_[s].forward(P, a, h, w, &st.cols);
      st.normed = stem_norms_[s].forward(P, z, &st.norm);
      a = nn::silu(st.normed);
      h = stem_[s].geom.out_size(h);
      w = stem_[s].geom.out_size(w);
    }
    tr.grid_h = h;
    tr.grid_w = w;
    tr.tokens_in = a.transpose();
  }

  Mat block_forward(std::size_t b, const Mat& x, const Mat& cond_act, BlockTrace<T>& bt) const {
    const T* P = weights_.data();
    const Block& blk = blocks_[b];
    const std::size_t D = config_.trunk_width;
    bt.mod = blk.ada.forward(P, cond_act);
    auto seg = [&](std::size_t i) -> nn::RowVec<T> { return bt.mod.block(0, i * D, 1, D); };

    Mat h1 = nn::layer_norm(x, &bt.norm1);
    Mat m1 = (h1.array().rowwise() * (seg(1).array() + T(1))).rowwise() + seg(0).array();
    bt.attn_out = blk.attn.forward(P, m1, bt.attn);
    Mat x1 = x + (bt.attn_out.array().rowwise() * seg(2).array()).matrix();

    Mat h2 = nn::layer_norm(x1, &bt.norm2);
    Mat m2 = (h2.array().rowwise() * (seg(4).array() + T(1))).rowwise() + seg(3).array();
    bt.mlp_out = blk.mlp.forward(P, m2, bt.mlp);
    return x1 + (bt.mlp_out.array().rowwise() * seg(5).array()).matrix();
  }

  Mat block_backward(std::size_t b, const BlockTrace<T>& bt, const Mat& dx2, const Mat& cond_act, Mat& dcond_act,
                     T* G) const {
    const T* P = weights_.data();
    const Block& blk = blocks_[b];
    const std::size_t D = config_.trunk_width;
    auto seg = [&](std::size_t i) -> nn::RowVec<T> { return bt.mod.block(0, i * D, 1, D); };
    Mat dmod(1, 6 * D);

    dmod.block(0, 5 * D, 1, D) = (dx2.array() * bt.mlp_out.array()).colwise().sum();
    Mat df = dx2.array().rowwise() * seg(5).array();
    Mat dm2 = blk.mlp.backward(P, G, bt.mlp, df);
    dmod.block(0, 4 * D, 1, D) = (dm2.array() * bt.norm2.xhat.array()).colwise().sum();
    dmod.block(0, 3 * D, 1, D) = dm2.colwise().sum();
    Mat dh2 = dm2.array().rowwise() * (seg(4).array() + T(1));
    Mat dx1 = dx2 + nn::layer_norm_backward(bt.norm2, dh2);

    dmod.block(0, 2 * D, 1, D) = (dx1.array() * bt.attn_out.array()).colwise().sum();
    Mat da = dx1.array().rowwise() * seg(2).array();
    Mat dm1 = blk.attn.backward(P, G, bt.attn, da);
    dmod.block(0, 1 * D, 1, D) = (dm1.array() * bt.norm1.xhat.array()).colwise().sum();
    dmod.block(0, 0, 1, D) = dm1.colwise().sum();
    Mat dh1 = dm1.array().rowwise() * (seg(1).array() + T(1));
    Mat dx = dx1 + nn::layer_norm_backward(bt.norm1, dh1);

    dcond_act += blk.ada.backward(P, G, cond_act, dmod);
    return dx;
  }

  Mat head_forward(const Mat& tokens, UDiTTrace<T>& tr) const {
    const T* P = weights_.data();
    const std::size_t D = config_.trunk_width;
    tr.trunk_out = tokens;
    tr.final_mod = final_ada_.forward(P, tr.cond_act);
    Mat xhat = nn::layer_norm(tokens, &tr.final_norm);
    const nn::RowVec<T> shift = tr.final_mod.block(0, 0, 1, D);
    const nn::RowVec<T> scale = tr.final_mod.block(0, D, 1, D);
    tr.final_in = (xhat.array().rowwise() * (scale.array() + T(1))).rowwise() + shift.array();
    Mat a = final_proj_.forward(P, tr.final_in).transpose();
    std::size_t h = tr.grid_h, w = tr.grid_w;
    tr.head.resize(head_.size());
    for (std::size_t s = 0; s < head_.size(); ++s) {
      auto& st = tr.head[s];
      st.h = h;
      st.w = w;
      st.cols = a;
      a = head_[s].forward(P, a, h, w);
      h = head_[s].out_size(h);
      w = head_[s].out_size(w);
      if (s + 1 < head_.size()) {
        st.normed = head_norms_[s].forward(P, a, &st.norm);
        a = nn::silu(st.normed);
      }
    }
    return a;
  }

  UDiTConfig config_;
  nn::ParamLayout layout_;
  std::vector<T> weights_;
  std::vector<nn::Conv2d> stem_;
  std::vector<nn::GroupNorm> stem_norms_;
  nn::Linear token_proj_, t_fc1_, t_fc2_;
  std::vector<Block> blocks_;
  nn::Linear final_ada_, final_proj_;
  std::vector<nn::ConvTranspose2d> head_;
  std::vector<nn::GroupNorm> head_norms_;
};

template <class T>
UDiT<T> build_model(const UDiTConfig& config, std::uint64_t seed) {
  return UDiT<T>::build(config, seed);
}

}  // namespace sprout
