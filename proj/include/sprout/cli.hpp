#pragma once

// Command-line front end. Exit codes: 0 success, 1 runtime failure
// (`error: <category>: <detail>` on stderr), 2 usage error.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "sprout/binio.hpp"
#include "sprout/checkpoint.hpp"
#include "sprout/config_file.hpp"
#include "sprout/curation.hpp"
#include "sprout/erank.hpp"
#include "sprout/error.hpp"
#include "sprout/feature_file.hpp"
#include "sprout/image.hpp"
#include "sprout/parallel.hpp"
#include "sprout/probe.hpp"
#include "sprout/trainer.hpp"

namespace sprout::cli {

namespace detail {
namespace fs = std::filesystem;

struct NamedImage {
  std::string name;
  Image8 image;
};

inline std::vector<NamedImage> load_dir(const fs::path& dir) {
  const auto files = list_files(dir);
  if (files.empty()) throw IngestError("no images in '" + dir.string() + "'");
  std::vector<NamedImage> out(files.size());
  parallel_for(files.size(), [&](std::size_t i) {
    out[i].name = files[i].filename().string();
    out[i].image = read_png(files[i].string());
  });
  return out;
}

inline Image8 center_crop(const NamedImage& img, std::size_t size) {
  if (img.image.width < size || img.image.height < size)
    throw IngestError("image '" + img.name + "' is " + std::to_string(img.image.width) + "x" +
                      std::to_string(img.image.height) + ", smaller than the " + std::to_string(size) + " pixel crop");
  return crop(img.image, (img.image.width - size) / 2, (img.image.height - size) / 2, size, size);
}

inline Tensor<float> cropped_batch(const std::vector<NamedImage>& images, std::size_t size, std::size_t limit) {
  std::vector<Image8> crops;
  for (std::size_t i = 0; i < images.size() && (limit == 0 || i < limit); ++i) crops.push_back(center_crop(images[i], size));
  return images_to_tensor<float>(crops);
}

// A pretrained model with the schedule and crop size it was trained with.
struct Backbone {
  UDiT<float> model;
  NoiseSchedule sched;
  std::size_t resolution;
};

inline Backbone load_backbone(const fs::path& path, bool ema) {
  const auto ck = load_checkpoint(path);
  const auto kv = KeyValueConfig::parse(ck.config_text, "checkpoint config");
  const auto res = kv.get_int("resolution", 64);
  if (res <= 0) throw FormatError(path.string() + ": checkpoint resolution must be positive");
  return {model_from_checkpoint(ck, ema), make_schedule(kv.get_string("schedule", "cosine")),
          static_cast<std::size_t>(res)};
}

struct SegSample {
  std::string name;
  Image8 image;
  LabelMap label;
};

// DIR/images/<name>.png paired with DIR/labels/<name>.png.
inline std::vector<SegSample> load_seg_set(const fs::path& dir) {
  const auto images = load_dir(dir / "images");
  std::vector<SegSample> out(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    const auto label_path = dir / "labels" / images[i].name;
    if (!fs::exists(label_path)) throw IngestError("missing label map '" + label_path.string() + "'");
    out[i] = {images[i].name, images[i].image, read_label_png(label_path)};
  });
  return out;
}

inline double t_star_from(const fs::path& report) { return parse_erank_report(read_file_bytes(report)).t_star; }

inline std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  namespace fs = std::filesystem;
  CLI::App app{"Pixel-space diffusion pre-training, timestep selection, curation and probing", "sprout"};
  app.require_subcommand(1, 1);

  std::uint64_t seed = 0;
  bool use_ema = false;
  auto add_seed = [&](CLI::App* sub) { sub->add_option("--seed", seed, "Random seed")->capture_default_str(); };
  auto add_ema = [&](CLI::App* sub) { sub->add_flag("--ema", use_ema, "Use the EMA weights of the checkpoint"); };

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "Denoising pre-training on a directory of PNG images");
  std::string config_path, data_dir, out_path, resume_path, log_path;
  std::uint64_t warn_saturation = 0, log_every = 100;
  pretrain->add_option("--config", config_path, "Training config (key = value lines)")->required();
  pretrain->add_option("--data", data_dir, "Image directory")->required();
  pretrain->add_option("--out", out_path, "Checkpoint path")->required();
  pretrain->add_option("--resume", resume_path, "Checkpoint to resume from");
  pretrain->add_option("--log", log_path, "Loss log path (default <out>.log)");
  auto* seed_opt = pretrain->add_option("--seed", seed, "Seed; overrides the config value when given");
  pretrain->add_option("--warn-saturation", warn_saturation,
                       "Warn when the dataset holds more images than this diversity budget");
  pretrain->add_option("--log-every", log_every, "Progress line interval in steps (0 disables)")->capture_default_str();

  // curate
  auto* curate = app.add_subcommand("curate", "Three-stage dataset filtering");
  CurationConfig ccfg;
  std::string curate_in, curate_out;
  curate->add_option("--in", curate_in, "Image directory")->required();
  curate->add_option("--out", curate_out, "Manifest path")->required();
  curate->add_option("--exposure-low", ccfg.exposure_low, "Dark pixel luminance threshold")->capture_default_str();
  curate->add_option("--exposure-high", ccfg.exposure_high, "Bright pixel luminance threshold")->capture_default_str();
  curate->add_option("--max-fraction", ccfg.max_fraction, "Largest tolerated dark or bright fraction")->capture_default_str();
  curate->add_option("--blur-threshold", ccfg.blur_threshold, "Minimum Laplacian variance")->capture_default_str();
  curate->add_option("--dedup-threshold", ccfg.dedup_threshold, "Cosine similarity marking a near-duplicate")
      ->capture_default_str();
  curate->add_option("--variance-threshold", ccfg.variance_threshold, "Minimum patch feature variance")
      ->capture_default_str();
  curate->add_option("--content-threshold", ccfg.content_threshold, "Minimum classifier score")->capture_default_str();
  curate->add_option("--embedder", ccfg.embedder, "Embedder name")->capture_default_str();

  // select-timestep
  auto* select = app.add_subcommand("select-timestep", "Pick the timestep with the largest feature effective rank");
  std::string ckpt, grid_spec = "0.0:1.0:11", report_path, pooling = "image-mean";
  int layer = -1;
  std::size_t resolution = 0, max_images = 0, batch_size = 16;
  select->add_option("--ckpt", ckpt, "Checkpoint")->required();
  select->add_option("--data", data_dir, "Image directory")->required();
  select->add_option("--grid", grid_spec, "Timestep grid A:B:N")->capture_default_str();
  select->add_option("--report", report_path, "Report path")->required();
  select->add_option("--pooling", pooling, "image-mean or token")->capture_default_str();
  select->add_option("--layer", layer, "Trunk block to tap (default: configured tap)");
  select->add_option("--resolution", resolution, "Center crop size (default: training resolution)");
  select->add_option("--max-images", max_images, "Use at most this many images (0: all)");
  select->add_option("--batch-size", batch_size, "Extraction batch size")->capture_default_str();
  add_seed(select);
  add_ema(select);

  // extract
  auto* extract = app.add_subcommand("extract", "Write backbone features to an SPRF file");
  double t = 0.25;
  std::string erank_report;
  extract->add_option("--ckpt", ckpt, "Checkpoint")->required();
  extract->add_option("--data", data_dir, "Image directory")->required();
  auto* extract_t = extract->add_option("--t", t, "Timestep");
  auto* extract_rep = extract->add_option("--erank-report", erank_report, "Take t from this report's t_star");
  extract_t->excludes(extract_rep);
  extract->add_option("--out", out_path, "Feature file path")->required();
  extract->add_option("--pooling", pooling, "image-mean or token")->capture_default_str();
  extract->add_option("--layer", layer, "Trunk block to tap (default: configured tap)");
  extract->add_option("--resolution", resolution, "Center crop size (default: training resolution)");
  extract->add_option("--batch-size", batch_size, "Extraction batch size")->capture_default_str();
  add_seed(extract);
  add_ema(extract);

  // probe
  auto* probe = app.add_subcommand("probe", "Train and score a single-conv segmentation probe");
  std::string train_dir, val_dir, tap = "trunk", predictions_dir;
  std::size_t classes = 0, epochs = 100, probe_batch = 8, window = 256, stride = 128;
  double lr = 1e-2, backbone_lr = 1e-5;
  bool fine_tune = false;
  probe->add_option("--ckpt", ckpt, "Checkpoint")->required();
  probe->add_option("--train", train_dir, "Training set (images/ and labels/)")->required();
  probe->add_option("--val", val_dir, "Validation set (images/ and labels/)")->required();
  probe->add_option("--classes", classes, "Class count")->required();
  probe->add_option("--report", report_path, "mIoU report path")->required();
  auto* probe_t = probe->add_option("--t", t, "Timestep (default 0.25)");
  auto* probe_rep = probe->add_option("--erank-report", erank_report, "Take t from this report's t_star");
  probe_t->excludes(probe_rep);
  probe->add_option("--tap", tap, "trunk, head, or a trunk block index")->capture_default_str();
  probe->add_option("--epochs", epochs, "Training epochs")->capture_default_str();
  probe->add_option("--lr", lr, "Probe learning rate")->capture_default_str();
  probe->add_option("--batch-size", probe_batch, "Images per update")->capture_default_str();
  probe->add_option("--window", window, "Sliding window size")->capture_default_str();
  probe->add_option("--stride", stride, "Sliding window stride")->capture_default_str();
  probe->add_flag("--fine-tune", fine_tune, "Update all backbone weights as well");
  probe->add_option("--backbone-lr", backbone_lr, "Backbone learning rate when fine-tuning")->capture_default_str();
  probe->add_option("--predictions", predictions_dir, "Write validation class maps here");
  add_seed(probe);
  add_ema(probe);

  // visualize
  auto* visualize = app.add_subcommand("visualize", "Render backbone features of one image as PCA colors");
  std::string image_path;
  visualize->add_option("--ckpt", ckpt, "Checkpoint")->required();
  visualize->add_option("--image", image_path, "Input PNG")->required();
  visualize->add_option("--t", t, "Timestep")->required();
  visualize->add_option("--out", out_path, "Output PNG")->required();
  visualize->add_option("--tap", tap, "trunk, head, or a trunk block index")->capture_default_str();
  add_seed(visualize);
  add_ema(visualize);

  // estimate-budget
  auto* budget = app.add_subcommand("estimate-budget", "Steps for a new dataset size under square-root scaling");
  std::int64_t n_ref = 0, s_ref = 0, n_target = 0;
  budget->add_option("--n-ref", n_ref, "Reference dataset size")->required();
  budget->add_option("--s-ref", s_ref, "Steps to convergence at the reference size")->required();
  budget->add_option("--n-target", n_target, "Target dataset size")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    const auto subs = app.get_subcommands();
    err << "usage error: " << e.what() << "\n\n" << (subs.empty() ? app.help() : subs.front()->help());
    return 2;
  }

  try {
    if (*pretrain) {
      auto cfg = TrainConfig::parse(read_file_bytes(config_path), config_path);
      if (seed_opt->count()) cfg.seed = seed;
      auto data = ImageDataset::load(data_dir, cfg.resolution);
      if (warn_saturation > 0 && data.size() > warn_saturation)
        err << "warning: " << data.size() << " images exceed the diversity budget of " << warn_saturation
            << "; more homogeneous data tends to give diminishing returns\n";
      LoopOptions lo;
      lo.out = out_path;
      lo.log = log_path;
      if (!resume_path.empty()) {
        lo.resume = load_checkpoint(resume_path);
        if (TrainConfig::parse(lo.resume->config_text, "checkpoint config").to_text() != cfg.to_text())
          throw ConfigError("config does not match the one stored in '" + resume_path + "'");
      }
      lo.on_step = [&](const StepStats& st) {
        if (log_every > 0 && st.step % log_every == 0)
          err << "step " << st.step << "/" << cfg.steps << " loss " << detail::fmt(st.loss) << "\n";
      };
      const auto res = train_loop(data, cfg, lo);
      out << "steps " << res.checkpoint.step;
      if (!res.log.empty()) out << " final-loss " << detail::fmt(res.log.back().loss);
      out << "\n";
    } else if (*curate) {
      ccfg.validate();
      const auto embedder = make_embedder(ccfg.embedder);
      const auto manifest = run_pipeline(curate_in, ccfg, *embedder, accept_all_classifier());
      write_manifest(curate_out, manifest);
      out << "kept " << manifest.count(Decision::Kept) << " removed " << manifest.count(Decision::Removed)
          << " errored " << manifest.count(Decision::Errored) << "\n";
    } else if (*select) {
      const auto bb = detail::load_backbone(ckpt, use_ema);
      const auto images = detail::load_dir(data_dir);
      const auto x = detail::cropped_batch(images, resolution ? resolution : bb.resolution, max_images);
      CollectOptions co{parse_pooling(pooling), seed, layer >= 0 ? std::optional<int>(layer) : std::nullopt, batch_size};
      const auto rep = select_timestep(bb.model, x, parse_grid(grid_spec), bb.sched, co);
      atomic_write(report_path, format_erank_report(rep));
      out << "t_star " << detail::fmt(rep.t_star) << "\n";
    } else if (*extract) {
      const double te = erank_report.empty() ? t : detail::t_star_from(erank_report);
      if (erank_report.empty() && !extract_t->count()) throw ArgumentError("extract needs --t or --erank-report");
      const auto bb = detail::load_backbone(ckpt, use_ema);
      const auto images = detail::load_dir(data_dir);
      const auto x = detail::cropped_batch(images, resolution ? resolution : bb.resolution, 0);
      CollectOptions co{parse_pooling(pooling), seed, layer >= 0 ? std::optional<int>(layer) : std::nullopt, batch_size};
      const auto fm = collect_features(bb.model, x, te, bb.sched, co);
      const FeatureRows rows = fm.data.cast<float>();
      write_features(out_path, rows);
      out << "rows " << rows.rows() << " dim " << rows.cols() << " t " << detail::fmt(te) << "\n";
    } else if (*probe) {
      auto bb = detail::load_backbone(ckpt, use_ema);
      const auto train = detail::load_seg_set(train_dir);
      const auto val = detail::load_seg_set(val_dir);
      ProbeOptions po;
      po.t = erank_report.empty() ? t : detail::t_star_from(erank_report);
      po.epochs = epochs;
      po.lr = lr;
      po.batch_size = probe_batch;
      po.seed = seed;
      po.tap = parse_tap(tap);
      po.backbone_lr = backbone_lr;
      std::vector<Image8> images;
      std::vector<LabelMap> labels, val_labels;
      for (const auto& s : train) {
        images.push_back(s.image);
        labels.push_back(s.label);
      }
      for (const auto& s : val) {
        check_labels(s.label, classes, "validation label '" + s.name + "'");
        val_labels.push_back(s.label);
      }
      const auto head = fine_tune ? fine_tune_probe(bb.model, images, labels, classes, bb.sched, po)
                                  : fit_probe(bb.model, images, labels, classes, bb.sched, po);
      std::vector<LabelMap> preds(val.size());
      parallel_for(val.size(), [&](std::size_t i) {
        preds[i] = predict_classes(bb.model, head, val[i].image, bb.sched, po, train.size() + i, window, stride);
      });
      const auto result = compute_miou(preds, val_labels, classes);
      atomic_write(report_path, format_miou_report(result));
      if (!predictions_dir.empty()) {
        fs::create_directories(predictions_dir);
        for (std::size_t i = 0; i < val.size(); ++i) write_label_png(fs::path(predictions_dir) / val[i].name, preds[i]);
      }
      out << "miou " << detail::fmt(result.miou) << " t " << detail::fmt(po.t) << "\n";
    } else if (*visualize) {
      const auto bb = detail::load_backbone(ckpt, use_ema);
      const auto r = visualize_features(bb.model, read_png(image_path), bb.sched, t, seed, parse_tap(tap));
      atomic_write_with(out_path, [&](const fs::path& tmp) { write_png_file(tmp.string(), r.image); });
      if (r.degenerate) err << "warning: features have zero variance; wrote a mid-gray image\n";
      out << "image " << r.image.width << "x" << r.image.height << " components " << r.components << "\n";
    } else if (*budget) {
      out << estimate_steps(n_ref, s_ref, n_target) << "\n";
    }
  } catch (const Error& e) {
    err << "error: " << e.category() << ": " << detail::one_line(e.what()) << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: internal: " << detail::one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}

}  // namespace sprout::cli
