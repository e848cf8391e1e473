#pragma once

// Three-stage dataset filtering: visual quality, then embedding-based dedup
// and patch-variance checks, then a content classifier.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sprout/binio.hpp"
#include "sprout/error.hpp"
#include "sprout/image.hpp"
#include "sprout/parallel.hpp"

namespace sprout {

struct CurationConfig {
  double exposure_low = 0.02;
  double exposure_high = 0.98;
  double max_fraction = 0.60;
  double blur_threshold = 25.0;
  double dedup_threshold = 0.95;
  double variance_threshold = 1e-3;
  double content_threshold = 0.5;
  std::string embedder = "pixel";

  void validate() const {
    if (!(exposure_low >= 0.0 && exposure_low < exposure_high && exposure_high <= 1.0))
      throw ConfigError("exposure thresholds must satisfy 0 <= low < high <= 1");
    if (!(max_fraction > 0.0 && max_fraction <= 1.0)) throw ConfigError("max_fraction must be in (0,1]");
    if (!(blur_threshold >= 0.0)) throw ConfigError("blur_threshold must be nonnegative");
    if (!(dedup_threshold > 0.0 && dedup_threshold <= 1.0)) throw ConfigError("dedup_threshold must be in (0,1]");
    if (!(variance_threshold >= 0.0)) throw ConfigError("variance_threshold must be nonnegative");
    if (!(content_threshold >= 0.0 && content_threshold <= 1.0))
      throw ConfigError("content_threshold must be in [0,1]");
  }
};

enum class Decision { Kept, Removed, Errored };
enum class Stage { Quality, Feature, Content, None };
enum class Reason { Overexposed, Underexposed, Blurred, NearDuplicate, LowSemanticContent, NonBiological, Kept };

inline std::string to_string(Decision d) {
  switch (d) {
    case Decision::Kept: return "kept";
    case Decision::Removed: return "removed";
    case Decision::Errored: return "errored";
  }
  return "?";
}

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::Quality: return "quality";
    case Stage::Feature: return "feature";
    case Stage::Content: return "content";
    case Stage::None: return "none";
  }
  return "?";
}

inline std::string to_string(Reason r) {
  switch (r) {
    case Reason::Overexposed: return "overexposed";
    case Reason::Underexposed: return "underexposed";
    case Reason::Blurred: return "blurred";
    case Reason::NearDuplicate: return "near-duplicate";
    case Reason::LowSemanticContent: return "low-semantic-content";
    case Reason::NonBiological: return "non-biological";
    case Reason::Kept: return "kept";
  }
  return "?";
}

// Outcome of one stage for one image. `removed == false` means pass-through.
struct StageResult {
  bool removed = false;
  Reason reason = Reason::Kept;
  double score = 0.0;
};

struct CurationVerdict {
  std::string image_id;
  Decision decision = Decision::Kept;
  Stage stage = Stage::None;
  std::optional<Reason> reason = Reason::Kept;  // unset for errors
  double score = 0.0;
  std::optional<std::string> duplicate_of;
  std::string error;  // detail for errored images
};

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::string name() const = 0;
  // Unit-norm global descriptor.
  virtual std::vector<double> embed_global(const Image8& image) const = 0;
  // P x E patch descriptors.
  virtual Eigen::MatrixXd embed_patches(const Image8& image) const = 0;
};

// Pixel statistics stand-in for learned embedders. Global: the mean-centered,
// L2-normalized 8x8 RGB thumbnail. Patches: an 8x8 grid, each patch
// described by the mean color of its 2x2 sub-blocks in [0,1].
class PixelEmbedder : public Embedder {
 public:
  std::string name() const override { return "pixel"; }

  std::vector<double> embed_global(const Image8& img) const override {
    auto thumb = block_means(img, 8, 8);
    double mean = 0.0;
    for (double v : thumb) mean += v;
    mean /= static_cast<double>(thumb.size());
    double norm = 0.0;
    for (auto& v : thumb) {
      v -= mean;
      norm += v * v;
    }
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
      // Flat images all map to the same direction.
      std::fill(thumb.begin(), thumb.end(), 0.0);
      thumb[0] = 1.0;
      return thumb;
    }
    for (auto& v : thumb) v /= norm;
    return thumb;
  }

  Eigen::MatrixXd embed_patches(const Image8& img) const override {
    const std::size_t gx = std::min<std::size_t>(8, img.width / 2), gy = std::min<std::size_t>(8, img.height / 2);
    if (gx == 0 || gy == 0) {
      Eigen::MatrixXd one(1, static_cast<Eigen::Index>(img.channels * 4));
      const auto m = block_means(img, 1, 1);
      for (Eigen::Index j = 0; j < one.cols(); ++j) one(0, j) = m[static_cast<std::size_t>(j) % m.size()];
      return one;
    }
    // Sub-block means on a (2gx) x (2gy) grid, regrouped per patch.
    const auto fine = block_means(img, 2 * gx, 2 * gy);
    const std::size_t C = img.channels;
    Eigen::MatrixXd out(static_cast<Eigen::Index>(gx * gy), static_cast<Eigen::Index>(4 * C));
    for (std::size_t py = 0; py < gy; ++py)
      for (std::size_t px = 0; px < gx; ++px) {
        const auto row = static_cast<Eigen::Index>(py * gx + px);
        Eigen::Index col = 0;
        for (std::size_t sy = 0; sy < 2; ++sy)
          for (std::size_t sx = 0; sx < 2; ++sx)
            for (std::size_t c = 0; c < C; ++c)
              out(row, col++) = fine[((2 * py + sy) * (2 * gx) + (2 * px + sx)) * C + c];
      }
    return out;
  }

  // Mean of each cell of a gx x gy partition, per channel, scaled to [0,1].
  // Cell boundaries are floor(i * W / gx).
  static std::vector<double> block_means(const Image8& img, std::size_t gx, std::size_t gy) {
    const std::size_t C = img.channels;
    std::vector<double> out(gx * gy * C, 0.0);
    for (std::size_t by = 0; by < gy; ++by) {
      const std::size_t y0 = by * img.height / gy, y1 = std::max(y0 + 1, (by + 1) * img.height / gy);
      for (std::size_t bx = 0; bx < gx; ++bx) {
        const std::size_t x0 = bx * img.width / gx, x1 = std::max(x0 + 1, (bx + 1) * img.width / gx);
        const double n = static_cast<double>((y1 - y0) * (x1 - x0));
        for (std::size_t c = 0; c < C; ++c) {
          double sum = 0.0;
          for (std::size_t y = y0; y < y1 && y < img.height; ++y)
            for (std::size_t x = x0; x < x1 && x < img.width; ++x) sum += img.at(x, y, c);
          out[(by * gx + bx) * C + c] = sum / (n * 255.0);
        }
      }
    }
    return out;
  }
};

using ContentClassifier = std::function<double(const Image8&)>;

inline ContentClassifier accept_all_classifier() {
  return [](const Image8&) { return 1.0; };
}

inline std::unique_ptr<Embedder> make_embedder(const std::string& name) {
  if (name == "pixel") return std::make_unique<PixelEmbedder>();
  throw ConfigError("unknown embedder '" + name + "' (available: pixel)");
}

// Variance of the 4-neighbour Laplacian over interior pixels of the
// grayscale image (0..255 scale).
inline double laplacian_variance(const Image8& img) {
  if (img.width < 3 || img.height < 3) return 0.0;
  const auto g = grayscale(img);
  const std::size_t W = img.width;
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (std::size_t y = 1; y + 1 < img.height; ++y)
    for (std::size_t x = 1; x + 1 < W; ++x) {
      const double l = g[(y - 1) * W + x] + g[(y + 1) * W + x] + g[y * W + x - 1] + g[y * W + x + 1] - 4.0 * g[y * W + x];
      sum += l;
      sq += l * l;
      ++n;
    }
  const double mean = sum / static_cast<double>(n);
  return std::max(0.0, sq / static_cast<double>(n) - mean * mean);
}

inline StageResult quality_filter(const Image8& img, const CurationConfig& cfg) {
  if (img.pixels.empty()) throw IngestError("empty image");
  const auto g = grayscale(img);
  std::size_t dark = 0, bright = 0;
  for (double v : g) {
    const double r = v / 255.0;
    if (r < cfg.exposure_low) ++dark;
    if (r > cfg.exposure_high) ++bright;
  }
  const double fd = static_cast<double>(dark) / static_cast<double>(g.size());
  const double fb = static_cast<double>(bright) / static_cast<double>(g.size());
  if (fb > cfg.max_fraction) return {true, Reason::Overexposed, fb};
  if (fd > cfg.max_fraction) return {true, Reason::Underexposed, fd};
  const double lap = laplacian_variance(img);
  if (lap < cfg.blur_threshold) return {true, Reason::Blurred, lap};
  return {false, Reason::Kept, lap};
}

// Mean over dimensions of the per-dimension (population) variance across
// patch rows. A single patch has variance 0.
inline double patch_feature_variance(const Eigen::MatrixXd& patches) {
  if (patches.rows() == 0 || patches.cols() == 0) throw ArgumentError("embedder returned no patch features");
  if (!patches.allFinite()) throw NumericError("embedder returned non-finite patch features");
  // Shifted by the first row, so identical patches give exactly zero.
  const Eigen::MatrixXd shifted = patches.rowwise() - patches.row(0);
  const Eigen::RowVectorXd mean = shifted.colwise().mean();
  const Eigen::MatrixXd centered = shifted.rowwise() - mean;
  const Eigen::RowVectorXd var = centered.colwise().squaredNorm() / static_cast<double>(patches.rows());
  return var.mean();
}

inline StageResult semantic_variance_filter(const Image8& img, const Embedder& embedder, double threshold) {
  const double v = patch_feature_variance(embedder.embed_patches(img));
  if (v < threshold) return {true, Reason::LowSemanticContent, v};
  return {false, Reason::Kept, v};
}

inline StageResult content_filter(const Image8& img, const ContentClassifier& classifier, double threshold = 0.5) {
  const double s = classifier(img);
  if (!std::isfinite(s)) throw NumericError("content classifier returned a non-finite score");
  if (s < threshold) return {true, Reason::NonBiological, s};
  return {false, Reason::Kept, s};
}

inline void check_unit_norm(const std::string& id, const std::vector<double>& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  if (!(std::abs(std::sqrt(n) - 1.0) <= 1e-6))
    throw ArgumentError("embedding of '" + id + "' is not unit-norm (norm " + std::to_string(std::sqrt(n)) + ")");
}

struct DedupEntry {
  bool removed = false;
  std::optional<std::string> duplicate_of;
  double score = 0.0;  // largest cosine against earlier kept images
};

// Greedy first-kept scan in lexicographic id order: an image is dropped if
// its cosine similarity to any already kept image reaches the threshold.
// The most similar kept image is reported; ties go to the earliest id.
inline std::map<std::string, DedupEntry> dedup(const std::map<std::string, std::vector<double>>& embeddings,
                                               double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw ArgumentError("dedup threshold must be in (0,1]");
  std::size_t dim = 0;
  for (const auto& [id, v] : embeddings) {
    check_unit_norm(id, v);
    if (dim == 0) dim = v.size();
    if (v.size() != dim) throw ArgumentError("embedding of '" + id + "' has inconsistent dimension");
  }
  std::map<std::string, DedupEntry> out;
  std::vector<std::pair<const std::string*, const std::vector<double>*>> kept;
  for (const auto& [id, v] : embeddings) {
    DedupEntry e;
    double best = -2.0;
    const std::string* best_id = nullptr;
    for (const auto& [kid, kv] : kept) {
      double dot = 0.0;
      for (std::size_t i = 0; i < dim; ++i) dot += v[i] * (*kv)[i];
      if (dot > best) {
        best = dot;
        best_id = kid;
      }
    }
    e.score = best_id ? best : 0.0;
    if (best_id && best >= threshold) {
      e.removed = true;
      e.duplicate_of = *best_id;
    } else {
      kept.emplace_back(&id, &v);
    }
    out.emplace(id, std::move(e));
  }
  return out;
}

struct CurationInput {
  std::string id;
  std::optional<Image8> image;  // unset when decoding failed
  std::string error;
};

struct CurationManifest {
  std::vector<CurationVerdict> verdicts;  // sorted by image_id

  std::size_t count(Decision d) const {
    return static_cast<std::size_t>(
        std::count_if(verdicts.begin(), verdicts.end(), [&](const auto& v) { return v.decision == d; }));
  }
  std::size_t removed_at(Stage s) const {
    return static_cast<std::size_t>(std::count_if(verdicts.begin(), verdicts.end(), [&](const auto& v) {
      return v.decision == Decision::Removed && v.stage == s;
    }));
  }
  const CurationVerdict* find(const std::string& id) const {
    for (const auto& v : verdicts)
      if (v.image_id == id) return &v;
    return nullptr;
  }
};

// Runs the stages strictly in order; an image leaves the pipeline at its
// first removal or error and is never shown to later stages.
inline CurationManifest curate(std::vector<CurationInput> inputs, const CurationConfig& cfg, const Embedder& embedder,
                               const ContentClassifier& classifier) {
  cfg.validate();
  if (inputs.empty()) throw ArgumentError("nothing to curate: input set is empty");
  std::sort(inputs.begin(), inputs.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  const std::size_t n = inputs.size();
  std::vector<CurationVerdict> v(n);
  std::vector<bool> alive(n, true);
  for (std::size_t i = 0; i < n; ++i) v[i].image_id = inputs[i].id;

  auto fail = [&](std::size_t i, Stage stage, const std::string& detail) {
    v[i].decision = Decision::Errored;
    v[i].stage = stage;
    v[i].reason.reset();
    v[i].score = std::nan("");
    v[i].error = detail;
    alive[i] = false;
  };
  auto remove = [&](std::size_t i, Stage stage, const StageResult& r) {
    v[i].decision = Decision::Removed;
    v[i].stage = stage;
    v[i].reason = r.reason;
    v[i].score = r.score;
    alive[i] = false;
  };
  // Per-image work is independent; outcomes are written to per-index slots
  // and applied in id order.
  auto run_stage = [&](Stage stage, auto&& fn) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i)
      if (alive[i]) idx.push_back(i);
    std::vector<std::optional<StageResult>> res(idx.size());
    std::vector<std::string> err(idx.size());
    parallel_for(idx.size(), [&](std::size_t k) {
      try {
        res[k] = fn(*inputs[idx[k]].image);
      } catch (const std::exception& e) {
        err[k] = e.what();
        if (err[k].empty()) err[k] = "stage failure";
      }
    });
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto i = idx[k];
      if (!res[k]) {
        fail(i, stage, err[k]);
      } else if (res[k]->removed) {
        remove(i, stage, *res[k]);
      } else {
        v[i].score = res[k]->score;
      }
    }
  };

  for (std::size_t i = 0; i < n; ++i)
    if (!inputs[i].image) fail(i, Stage::Quality, inputs[i].error.empty() ? "undecodable image" : inputs[i].error);

  run_stage(Stage::Quality, [&](const Image8& img) { return quality_filter(img, cfg); });

  // Feature stage, part 1: global embeddings and greedy dedup.
  {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i)
      if (alive[i]) idx.push_back(i);
    std::vector<std::vector<double>> emb(idx.size());
    std::vector<std::string> err(idx.size());
    parallel_for(idx.size(), [&](std::size_t k) {
      try {
        emb[k] = embedder.embed_global(*inputs[idx[k]].image);
        check_unit_norm(inputs[idx[k]].id, emb[k]);
      } catch (const std::exception& e) {
        err[k] = e.what();
        if (err[k].empty()) err[k] = "embedder failure";
      }
    });
    std::map<std::string, std::vector<double>> table;
    std::map<std::string, std::size_t> where;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (!err[k].empty()) {
        fail(idx[k], Stage::Feature, err[k]);
        continue;
      }
      if (!table.empty() && emb[k].size() != table.begin()->second.size()) {
        fail(idx[k], Stage::Feature, "embedding dimension differs from the rest of the corpus");
        continue;
      }
      table.emplace(inputs[idx[k]].id, std::move(emb[k]));
      where.emplace(inputs[idx[k]].id, idx[k]);
    }
    for (const auto& [id, entry] : dedup(table, cfg.dedup_threshold)) {
      if (!entry.removed) continue;
      const auto i = where.at(id);
      remove(i, Stage::Feature, {true, Reason::NearDuplicate, entry.score});
      v[i].duplicate_of = entry.duplicate_of;
    }
  }

  // Feature stage, part 2: patch-feature variance.
  run_stage(Stage::Feature, [&](const Image8& img) { return semantic_variance_filter(img, embedder, cfg.variance_threshold); });

  run_stage(Stage::Content, [&](const Image8& img) { return content_filter(img, classifier, cfg.content_threshold); });

  for (std::size_t i = 0; i < n; ++i)
    if (alive[i]) {
      v[i].decision = Decision::Kept;
      v[i].stage = Stage::None;
      v[i].reason = Reason::Kept;
    }
  return {std::move(v)};
}

// Every regular file of `dir` (sorted, ids relative to `dir`) goes through
// the pipeline; files that fail to decode are recorded as errors.
inline CurationManifest run_pipeline(const std::filesystem::path& dir, const CurationConfig& cfg,
                                     const Embedder& embedder, const ContentClassifier& classifier) {
  const auto files = list_files(dir);
  if (files.empty()) throw ArgumentError("input directory '" + dir.string() + "' is empty");
  std::vector<CurationInput> inputs(files.size());
  parallel_for(files.size(), [&](std::size_t i) {
    inputs[i].id = files[i].filename().string();
    try {
      inputs[i].image = read_png(files[i].string());
    } catch (const std::exception& e) {
      inputs[i].error = e.what();
    }
  });
  return curate(std::move(inputs), cfg, embedder, classifier);
}

inline std::string format_manifest(const CurationManifest& m) {
  std::string out = "# curation-manifest v1\n";
  char score[64];
  for (const auto& v : m.verdicts) {
    if (std::isnan(v.score)) std::snprintf(score, sizeof score, "-");
    else std::snprintf(score, sizeof score, "%.6f", v.score);
    out += v.image_id + "\t" + to_string(v.decision) + "\t" + to_string(v.stage) + "\t" +
           (v.reason ? to_string(*v.reason) : std::string("-")) + "\t" + score + "\t" + v.duplicate_of.value_or("-") +
           "\n";
  }
  for (const auto& v : m.verdicts)
    if (v.decision == Decision::Errored) {
      std::string detail = v.error;
      std::replace(detail.begin(), detail.end(), '\n', ' ');
      out += "# error\t" + v.image_id + "\t" + detail + "\n";
    }
  out += "# stage-removals quality=" + std::to_string(m.removed_at(Stage::Quality)) +
         " feature=" + std::to_string(m.removed_at(Stage::Feature)) +
         " content=" + std::to_string(m.removed_at(Stage::Content)) + "\n";
  out += "# summary kept=" + std::to_string(m.count(Decision::Kept)) +
         " removed=" + std::to_string(m.count(Decision::Removed)) +
         " errored=" + std::to_string(m.count(Decision::Errored)) + "\n";
  return out;
}

inline void write_manifest(const std::filesystem::path& path, const CurationManifest& m) {
  atomic_write(path, format_manifest(m));
}

}  // namespace sprout
