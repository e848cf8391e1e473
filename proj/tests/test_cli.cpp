#include <gtest/gtest.h>

#include <cstring>
#include <sstream>

#include "sprout/cli.hpp"
#include "test_util.hpp"

using namespace sprout;
using sprout::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "sprout");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

const char* kTinyConfig =
    "preset = custom\n"
    "stem_channels = 8,16,16\n"
    "trunk_depth = 2\n"
    "trunk_width = 32\n"
    "heads = 2\n"
    "time_embed_dim = 16\n"
    "mlp_ratio = 2\n"
    "batch_size = 4\n"
    "steps = 3\n"
    "resolution = 16\n"
    "lr = 1e-3\n";

LabelMap stripes(std::size_t size, std::size_t period) {
  LabelMap m(size, size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) m.at(x, y) = (x / period) % 2;
  return m;
}

// One pretrained tiny checkpoint shared by the tests below.
class CliWorkspace : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    fs::create_directories(*dir_ / "data");
    for (int i = 0; i < 6; ++i)
      write_png_file((*dir_ / "data" / ("img" + std::to_string(i) + ".png")).string(),
                     sprout::testing::natural_image(24, 24, 100 + i));
    atomic_write(*dir_ / "tiny.cfg", kTinyConfig);
    const auto r = run({"pretrain", "--config", (*dir_ / "tiny.cfg").string(), "--data", (*dir_ / "data").string(),
                        "--out", (*dir_ / "model.spck").string()});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static fs::path path(const std::string& name) { return *dir_ / name; }
  static std::string str(const std::string& name) { return path(name).string(); }

  static TempDir* dir_;
};
TempDir* CliWorkspace::dir_ = nullptr;

}  // namespace

TEST(Cli, EstimateBudgetDoublesForFourTimesData) {
  const auto r = run({"estimate-budget", "--n-ref", "1000", "--s-ref", "100", "--n-target", "4000"});
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "200\n");
}

TEST(Cli, UsageErrorsExitTwoWithUsage) {
  auto r = run({"estimate-budget", "--n-ref", "1000", "--s-ref", "100", "--n-target", "4000", "--bogus"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--n-target"), std::string::npos);
  r = run({});
  EXPECT_EQ(r.code, 2);
  r = run({"estimate-budget", "--n-ref", "10"});
  EXPECT_EQ(r.code, 2);
  r = run({"no-such-command"});
  EXPECT_EQ(r.code, 2);
  r = run({"estimate-budget", "--n-ref", "ten", "--s-ref", "1", "--n-target", "1"});
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, HelpExitsZero) {
  const auto r = run({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("select-timestep"), std::string::npos);
}

TEST(Cli, RuntimeErrorsAreOneMachineParseableLine) {
  auto r = run({"estimate-budget", "--n-ref", "0", "--s-ref", "100", "--n-target", "4000"});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error: argument: ", 0), 0u) << r.err;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);

  TempDir dir("cli-err");
  atomic_write(dir / "c.cfg", kTinyConfig);
  r = run({"pretrain", "--config", (dir / "c.cfg").string(), "--data", (dir / "missing").string(), "--out",
           (dir / "m.spck").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error: ingest: ", 0), 0u) << r.err;

  atomic_write(dir / "bad.cfg", "steps = 3\nlearning_rate = 1\n");
  r = run({"pretrain", "--config", (dir / "bad.cfg").string(), "--data", (dir / "missing").string(), "--out",
           (dir / "m.spck").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error: config: ", 0), 0u) << r.err;
  EXPECT_FALSE(fs::exists(dir / "m.spck"));
}

TEST_F(CliWorkspace, PretrainWritesCheckpointAndLog) {
  const auto ck = load_checkpoint(path("model.spck"));
  EXPECT_EQ(ck.step, 3u);
  EXPECT_EQ(parse_loss_log(read_file_bytes(path("model.spck.log"))).size(), 3u);
}

TEST_F(CliWorkspace, PretrainIsReproducibleAndSeedOverrides) {
  const auto again = run({"pretrain", "--config", str("tiny.cfg"), "--data", str("data"), "--out", str("again.spck")});
  ASSERT_EQ(again.code, 0) << again.err;
  EXPECT_EQ(read_file_bytes(path("again.spck")), read_file_bytes(path("model.spck")));
  const auto seeded = run({"pretrain", "--config", str("tiny.cfg"), "--data", str("data"), "--out", str("seeded.spck"),
                           "--seed", "7"});
  ASSERT_EQ(seeded.code, 0) << seeded.err;
  EXPECT_NE(read_file_bytes(path("seeded.spck")), read_file_bytes(path("model.spck")));
}

TEST_F(CliWorkspace, PretrainResumeRejectsDifferentConfig) {
  atomic_write(path("other.cfg"), std::string(kTinyConfig) + "ema_decay = 0.5\n");
  const auto r = run({"pretrain", "--config", str("other.cfg"), "--data", str("data"), "--out", str("x.spck"),
                      "--resume", str("model.spck")});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error: config: ", 0), 0u) << r.err;
}

TEST_F(CliWorkspace, PretrainWarnsAboveSaturationBudget) {
  const auto r = run({"pretrain", "--config", str("tiny.cfg"), "--data", str("data"), "--out", str("w.spck"),
                      "--warn-saturation", "4"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.err.find("warning: 6 images exceed"), std::string::npos) << r.err;
}

TEST_F(CliWorkspace, SelectTimestepOnePointGrid) {
  const auto r = run({"select-timestep", "--ckpt", str("model.spck"), "--data", str("data"), "--grid", "0.4:0.4:1",
                      "--report", str("one.txt")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = parse_erank_report(read_file_bytes(path("one.txt")));
  ASSERT_EQ(rep.grid.size(), 1u);
  EXPECT_EQ(rep.t_star, 0.4);
  EXPECT_EQ(r.out, "t_star 0.40000000000000002\n");
}

TEST_F(CliWorkspace, SelectTimestepMatchesLibraryAndIsDeterministic) {
  for (const char* name : {"a.txt", "b.txt"}) {
    const auto r = run({"select-timestep", "--ckpt", str("model.spck"), "--data", str("data"), "--grid", "0:1:5",
                        "--report", str(name), "--seed", "3"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  const auto text = read_file_bytes(path("a.txt"));
  EXPECT_EQ(text, read_file_bytes(path("b.txt")));

  const auto model = load_model(path("model.spck"));
  std::vector<Image8> crops;
  for (const auto& f : list_files(path("data"))) {
    const auto img = read_png(f.string());
    crops.push_back(crop(img, 4, 4, 16, 16));
  }
  CollectOptions co;
  co.seed = 3;
  const auto rep = select_timestep(model, images_to_tensor<float>(crops), parse_grid("0:1:5"),
                                   make_schedule(ScheduleKind::LinearInterp), co);
  EXPECT_EQ(text, format_erank_report(rep));
}

TEST_F(CliWorkspace, ExtractRoundTripsAtByteLevel) {
  const auto r = run({"extract", "--ckpt", str("model.spck"), "--data", str("data"), "--t", "0.3", "--out",
                      str("f.sprf"), "--pooling", "token"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto bytes = read_file_bytes(path("f.sprf"));
  ASSERT_GE(bytes.size(), 16u);
  EXPECT_EQ(bytes.substr(0, 4), "SPRF");
  auto u32 = [&](std::size_t off) {
    return static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[off])) |
           static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[off + 1])) << 8 |
           static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[off + 2])) << 16 |
           static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[off + 3])) << 24;
  };
  EXPECT_EQ(u32(4), 1u);
  const std::uint32_t n = u32(8), d = u32(12);
  EXPECT_EQ(n, 6u * 2 * 2);  // 6 images, 2x2 tokens at 16 px
  EXPECT_EQ(d, 32u);
  ASSERT_EQ(bytes.size(), 16u + 4u * n * d);

  const auto model = load_model(path("model.spck"));
  std::vector<Image8> crops;
  for (const auto& f : list_files(path("data"))) crops.push_back(crop(read_png(f.string()), 4, 4, 16, 16));
  CollectOptions co;
  co.pooling = Pooling::Token;
  const auto fm = collect_features(model, images_to_tensor<float>(crops), 0.3, make_schedule(ScheduleKind::LinearInterp), co);
  for (std::uint32_t i = 0; i < n; ++i)
    for (std::uint32_t j = 0; j < d; ++j) {
      const std::uint32_t bits = u32(16 + 4 * (i * d + j));
      float v;
      std::memcpy(&v, &bits, 4);
      ASSERT_EQ(v, static_cast<float>(fm.data(i, j)));
    }

  const auto again = run({"extract", "--ckpt", str("model.spck"), "--data", str("data"), "--t", "0.3", "--out",
                          str("g.sprf"), "--pooling", "token"});
  ASSERT_EQ(again.code, 0);
  EXPECT_EQ(read_file_bytes(path("g.sprf")), bytes);
}

TEST_F(CliWorkspace, ExtractTakesTimestepFromReport) {
  atomic_write(path("r.txt"), "erank-report v1\nt 0.7 erank 2\nt_star 0.7\n");
  const auto r = run({"extract", "--ckpt", str("model.spck"), "--data", str("data"), "--erank-report", str("r.txt"),
                      "--out", str("h.sprf")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find(" t 0.69999999999999996"), std::string::npos) << r.out;
  EXPECT_EQ(read_features(path("h.sprf")).rows(), 6);
  const auto both = run({"extract", "--ckpt", str("model.spck"), "--data", str("data"), "--erank-report",
                         str("r.txt"), "--t", "0.2", "--out", str("h.sprf")});
  EXPECT_EQ(both.code, 2);
}

TEST_F(CliWorkspace, ProbeWritesReportAndPredictions) {
  for (const char* split : {"train", "val"}) {
    fs::create_directories(path(split) / "images");
    fs::create_directories(path(split) / "labels");
    for (int i = 0; i < 3; ++i) {
      const std::string name = "s" + std::to_string(i) + ".png";
      write_png_file((path(split) / "images" / name).string(), sprout::testing::natural_image(32, 32, 300 + i));
      write_label_png(path(split) / "labels" / name, stripes(32, 8));
    }
  }
  const std::vector<std::string> base{"probe", "--ckpt", str("model.spck"), "--train", str("train"), "--val",
                                      str("val"), "--classes", "2", "--window", "16", "--stride", "8",
                                      "--epochs", "3"};
  auto args = base;
  args.insert(args.end(), {"--report", str("miou.txt"), "--predictions", str("pred")});
  const auto r = run(args);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = read_file_bytes(path("miou.txt"));
  EXPECT_EQ(report.rfind("miou-report v1\nclass 0 iou ", 0), 0u) << report;
  EXPECT_EQ(read_label_png(path("pred") / "s1.png").width, 32u);

  args = base;
  args.insert(args.end(), {"--report", str("miou2.txt")});
  ASSERT_EQ(run(args).code, 0);
  EXPECT_EQ(read_file_bytes(path("miou2.txt")), report);

  args = base;
  args[10] = "64";  // --window larger than the 32 px images
  args.insert(args.end(), {"--report", str("miou3.txt")});
  const auto small = run(args);
  EXPECT_EQ(small.code, 1);
  EXPECT_EQ(small.err.rfind("error: argument: ", 0), 0u) << small.err;

  args = base;
  args[8] = "1";  // --classes 1 with labels holding class 1
  args.insert(args.end(), {"--report", str("miou4.txt")});
  const auto bad = run(args);
  EXPECT_EQ(bad.code, 1);
  EXPECT_EQ(bad.err.rfind("error: label: ", 0), 0u) << bad.err;
}

TEST_F(CliWorkspace, VisualizeWritesFeatureResolutionImage) {
  write_png_file(str("vis_in.png"), sprout::testing::natural_image(32, 24, 9));
  const auto r = run({"visualize", "--ckpt", str("model.spck"), "--image", str("vis_in.png"), "--t", "0.25", "--out",
                      str("vis.png")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto img = read_png(str("vis.png"));
  EXPECT_EQ(img.width, 4u);
  EXPECT_EQ(img.height, 3u);
}

TEST_F(CliWorkspace, CurateIsDeterministic) {
  fs::create_directories(path("cur"));
  for (int i = 0; i < 4; ++i)
    write_png_file((path("cur") / ("c" + std::to_string(i) + ".png")).string(),
                   sprout::testing::natural_image(48, 48, 500 + i));
  write_png_file((path("cur") / "dup.png").string(), sprout::testing::natural_image(48, 48, 500));
  const auto a = run({"curate", "--in", str("cur"), "--out", str("m1.tsv")});
  const auto b = run({"curate", "--in", str("cur"), "--out", str("m2.tsv")});
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, "kept 4 removed 1 errored 0\n");
  EXPECT_EQ(read_file_bytes(path("m1.tsv")), read_file_bytes(path("m2.tsv")));
  const auto bad = run({"curate", "--in", str("cur"), "--out", str("m3.tsv"), "--dedup-threshold", "1.5"});
  EXPECT_EQ(bad.code, 1);
  EXPECT_EQ(bad.err.rfind("error: config: ", 0), 0u);
}
