#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <bit>
#include <cmath>

#include "sprout/erank.hpp"
#include "sprout/feature_file.hpp"
#include "sprout/udit.hpp"
#include "stub_model.hpp"

using namespace sprout;
using sprout::testing::StubModel;

namespace {

Eigen::MatrixXd gaussian(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = standard_normal(rng);
  return m;
}

Eigen::MatrixXd random_orthogonal(Eigen::Index n, std::uint64_t seed) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian(n, n, seed));
  return qr.householderQ();
}

// Independent erank: LAPACK-style divide-and-conquer SVD from Eigen, entropy
// computed in long double.
double oracle_erank(const Eigen::MatrixXd& m) {
  Eigen::BDCSVD<Eigen::MatrixXd> svd(m);
  const auto& s = svd.singularValues();
  const double top = s(0);
  long double sum = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) >= 1e-10 * top) sum += s(i);
  long double h = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) >= 1e-10 * top) {
      const long double p = s(i) / sum;
      h -= p * std::log(p);
    }
  return static_cast<double>(std::exp(h));
}

Tensor<float> random_images(std::size_t n, std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> x({n, 3, size, size});
  for (auto& v : x.span()) v = static_cast<float>(2.0 * uniform01(rng) - 1.0);
  return x;
}

}  // namespace

TEST(ThinSvd, MatchesDenseOracleOnAllShapes) {
  const std::pair<int, int> shapes[] = {{5, 5}, {20, 4}, {3, 9}, {64, 7}, {2, 2}, {7, 1}, {1, 6}};
  std::uint64_t seed = 1;
  for (auto [n, d] : shapes) {
    const auto m = gaussian(n, d, seed++);
    const auto ours = thin_svd(m, true);
    Eigen::JacobiSVD<Eigen::MatrixXd> ref(m);
    ASSERT_EQ(ours.singular_values.size(), ref.singularValues().size());
    for (Eigen::Index i = 0; i < ref.singularValues().size(); ++i)
      EXPECT_NEAR(ours.singular_values(i), ref.singularValues()(i), 1e-10 * ref.singularValues()(0)) << n << "x" << d;
    // V orthonormal and ||m v_j|| = sigma_j.
    const Eigen::MatrixXd vtv = ours.v.transpose() * ours.v;
    EXPECT_LT((vtv - Eigen::MatrixXd::Identity(vtv.rows(), vtv.cols())).norm(), 1e-10);
    for (Eigen::Index j = 0; j < ours.v.cols(); ++j)
      EXPECT_NEAR((m * ours.v.col(j)).norm(), ours.singular_values(j), 1e-10);
  }
}

TEST(EffectiveRank, IdentityIsExactlyFour) {
  EXPECT_EQ(effective_rank(Eigen::MatrixXd(Eigen::MatrixXd::Identity(4, 4))), 4.0);
}

TEST(EffectiveRank, RankOneIsExactlyOne) {
  Eigen::VectorXd u(5), v(3);
  u << 1, -2, 0.5, 3, 1;
  v << 2, 1, -1;
  EXPECT_EQ(effective_rank(Eigen::MatrixXd(u * v.transpose())), 1.0);
  const Eigen::MatrixXd big = gaussian(40, 1, 3) * gaussian(1, 12, 4);
  EXPECT_EQ(effective_rank(big), 1.0);
}

TEST(EffectiveRank, SpectrumThreeOne) {
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(2, 2);
  d(0, 0) = 3;
  d(1, 1) = 1;
  EXPECT_NEAR(effective_rank(d), 1.75477, 1e-4);
  EXPECT_NEAR(effective_rank(d), std::exp(-(0.75 * std::log(0.75) + 0.25 * std::log(0.25))), 1e-12);
  // Same spectrum hidden behind rotations, in a 5 x 3 embedding.
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(5, 3);
  s(0, 0) = 3;
  s(1, 1) = 1;
  const Eigen::MatrixXd m = random_orthogonal(5, 8) * s * random_orthogonal(3, 9).transpose();
  EXPECT_NEAR(effective_rank(m), 1.75477, 1e-4);
}

TEST(EffectiveRank, ScaleAndOrthogonalInvariance) {
  for (int k = 0; k < 20; ++k) {
    const auto f = gaussian(12, 6, 100 + k);
    const double e = effective_rank(f);
    EXPECT_EQ(effective_rank(Eigen::MatrixXd(4.0 * f)), e);
    EXPECT_NEAR(effective_rank(Eigen::MatrixXd(-3.7 * f)), e, 1e-9);
    EXPECT_NEAR(effective_rank(Eigen::MatrixXd(1e-6 * f)), e, 1e-9);
    EXPECT_NEAR(effective_rank(Eigen::MatrixXd(f * random_orthogonal(6, 200 + k))), e, 1e-6);
  }
}

TEST(EffectiveRank, BoundsOnRandomMatrices) {
  Rng rng(77);
  for (int k = 0; k < 1000; ++k) {
    const Eigen::Index n = 2 + static_cast<Eigen::Index>(rng() % 14);
    const Eigen::Index d = 2 + static_cast<Eigen::Index>(rng() % 14);
    const Eigen::Index r = 1 + static_cast<Eigen::Index>(rng() % std::min(n, d));
    const Eigen::MatrixXd m = gaussian(n, r, rng()) * gaussian(r, d, rng());
    const double e = effective_rank(m);
    ASSERT_GE(e, 1.0 - 1e-12);
    ASSERT_LE(e, static_cast<double>(std::min(n, d)) + 1e-12);
    ASSERT_LE(e, static_cast<double>(r) + 1e-9);
    ASSERT_NEAR(e, oracle_erank(m), 1e-6);
  }
}

TEST(EffectiveRank, StackedRowsUnchanged) {
  const auto f = gaussian(7, 5, 5);
  Eigen::MatrixXd ff(14, 5);
  ff << f, f;
  EXPECT_NEAR(effective_rank(ff), effective_rank(f), 1e-12);
  Eigen::MatrixXd wide(7, 10);
  wide << f, f;
  EXPECT_LE(effective_rank(wide), 7.0);
}

TEST(EffectiveRank, ZeroAndInvalidInputs) {
  EXPECT_THROW(effective_rank(Eigen::MatrixXd(Eigen::MatrixXd::Zero(3, 3))), DegenerateInputError);
  FeatureMatrix fm;
  fm.data = Eigen::MatrixXd::Ones(1, 4);
  EXPECT_THROW(effective_rank(fm), ShapeError);
  fm.data = Eigen::MatrixXd::Ones(3, 3);
  fm.data(1, 1) = std::nan("");
  EXPECT_THROW(effective_rank(fm), NumericError);
}

TEST(CollectFeatures, ShapesForBothPoolings) {
  const auto model = UDiT<float>::build(preset_config("udit-nano"), 3);
  const auto imgs = random_images(16, 16, 1);
  const auto sched = make_schedule(ScheduleKind::Cosine);
  const auto mean = collect_features(model, imgs, 0.25, sched);
  EXPECT_EQ(mean.data.rows(), 16);
  EXPECT_EQ(mean.data.cols(), 64);
  CollectOptions tok;
  tok.pooling = Pooling::Token;
  const auto tokens = collect_features(model, random_images(2, 64, 2), 0.25, sched, tok);
  EXPECT_EQ(tokens.data.rows(), 128);
  EXPECT_EQ(tokens.data.cols(), 64);
  EXPECT_EQ(tokens.pooling, Pooling::Token);
  EXPECT_EQ(tokens.source_t, 0.25);
}

TEST(CollectFeatures, SeededAndBatchIndependent) {
  const auto model = UDiT<float>::build(preset_config("udit-nano"), 3);
  const auto imgs = random_images(5, 16, 1);
  const auto sched = make_schedule(ScheduleKind::LinearInterp);
  CollectOptions a;
  a.seed = 9;
  CollectOptions b = a;
  b.batch_size = 2;
  const auto fa = collect_features(model, imgs, 0.6, sched, a);
  const auto fb = collect_features(model, imgs, 0.6, sched, a);
  const auto fc = collect_features(model, imgs, 0.6, sched, b);
  EXPECT_TRUE(fa.data == fb.data);
  EXPECT_TRUE(fa.data == fc.data);
  CollectOptions other = a;
  other.seed = 10;
  EXPECT_FALSE(fa.data == collect_features(model, imgs, 0.6, sched, other).data);
}

TEST(CollectFeatures, EmptyBatchRejected) {
  StubModel stub;
  Tensor<float> empty({0, 3, 8, 8});
  EXPECT_THROW(collect_features(stub, empty, 0.5, make_schedule(ScheduleKind::Cosine)), ArgumentError);
}

TEST(SelectTimestep, StubOracleFindsHalf) {
  StubModel stub;
  const auto imgs = random_images(16, 8, 4);
  const auto sched = make_schedule(ScheduleKind::Cosine);
  const auto grid = parse_grid("0:1:11");
  const auto rep = select_timestep(stub, imgs, grid, sched, {}, true);
  EXPECT_EQ(rep.t_star, 0.5);
  ASSERT_EQ(rep.eranks.size(), 11u);
  ASSERT_EQ(rep.spectra.size(), 11u);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto fm = collect_features(stub, imgs, grid[i], sched);
    EXPECT_NEAR(rep.eranks[i], oracle_erank(fm.data), 1e-6) << "t=" << grid[i];
    if (grid[i] != 0.5) EXPECT_NEAR(rep.eranks[i], 1.0, 1e-9);
  }
  EXPECT_GT(rep.eranks[5], 4.0);
  const auto again = select_timestep(stub, imgs, grid, sched);
  EXPECT_EQ(again.t_star, rep.t_star);
  EXPECT_EQ(again.eranks, rep.eranks);
}

TEST(SelectTimestep, OnePointGridAndTies) {
  StubModel stub;
  const auto imgs = random_images(6, 8, 5);
  const auto sched = make_schedule(ScheduleKind::LinearInterp);
  EXPECT_EQ(select_timestep(stub, imgs, {0.7}, sched).t_star, 0.7);
  StubModel flat;
  flat.constant = true;
  EXPECT_EQ(select_timestep(flat, imgs, {0.9, 0.2, 0.6}, sched).t_star, 0.2);
}

TEST(SelectTimestep, DegenerateNamesTimestep) {
  StubModel stub;
  stub.zero_at_03 = true;
  const auto imgs = random_images(4, 8, 6);
  try {
    select_timestep(stub, imgs, {0.1, 0.3}, make_schedule(ScheduleKind::Cosine));
    FAIL();
  } catch (const DegenerateInputError& e) {
    EXPECT_NE(std::string(e.what()).find("t=0.3"), std::string::npos) << e.what();
  }
  EXPECT_THROW(select_timestep(stub, imgs, {}, make_schedule(ScheduleKind::Cosine)), ArgumentError);
  EXPECT_THROW(select_timestep(stub, imgs, {1.5}, make_schedule(ScheduleKind::Cosine)), ArgumentError);
}

TEST(Grid, ParsesInclusiveEvenSpacing) {
  const auto g = parse_grid("0:1:11");
  ASSERT_EQ(g.size(), 11u);
  EXPECT_EQ(g.front(), 0.0);
  EXPECT_EQ(g.back(), 1.0);
  EXPECT_NEAR(g[3], 0.3, 1e-15);
  EXPECT_EQ(parse_grid("0.25:0.25:1"), std::vector<double>{0.25});
  EXPECT_EQ(parse_grid("0.2:0.4:3")[1], 0.2 + 0.2 * 0.5);
  EXPECT_THROW(parse_grid("0:1"), ArgumentError);
  EXPECT_THROW(parse_grid("0:1:0"), ArgumentError);
  EXPECT_THROW(parse_grid("a:1:3"), ArgumentError);
  EXPECT_THROW(parse_grid("0:2:3"), ArgumentError);
  EXPECT_THROW(parse_grid("0:1:1"), ArgumentError);
}

TEST(Report, FormatAndParse) {
  ErankReport rep;
  rep.grid = {0.0, 0.5, 1.0};
  rep.eranks = {1.0, 3.25, 2.0};
  rep.t_star = 0.5;
  const auto text = format_erank_report(rep);
  EXPECT_EQ(text, "erank-report v1\nt 0 erank 1\nt 0.5 erank 3.25\nt 1 erank 2\nt_star 0.5\n");
  const auto back = parse_erank_report(text);
  EXPECT_EQ(back.grid, rep.grid);
  EXPECT_EQ(back.eranks, rep.eranks);
  EXPECT_EQ(back.t_star, 0.5);
  EXPECT_THROW(parse_erank_report("t 0 erank 1\n"), FormatError);
  EXPECT_THROW(parse_erank_report("erank-report v1\nt 0 erank 1\n"), FormatError);
}

TEST(FeatureFile, RoundTripIsBitwise) {
  FeatureRows rows(3, 4);
  Rng rng(1);
  for (Eigen::Index i = 0; i < rows.size(); ++i) rows.data()[i] = static_cast<float>(standard_normal(rng));
  rows(1, 2) = -0.0f;
  rows(2, 3) = std::numeric_limits<float>::denorm_min();
  const auto bytes = encode_features(rows);
  EXPECT_EQ(bytes.size(), 16u + 4u * 12u);
  EXPECT_EQ(bytes.substr(0, 4), "SPRF");
  const auto back = decode_features(bytes);
  ASSERT_EQ(back.rows(), 3);
  ASSERT_EQ(back.cols(), 4);
  for (Eigen::Index i = 0; i < rows.size(); ++i)
    EXPECT_EQ(std::bit_cast<std::uint32_t>(back.data()[i]), std::bit_cast<std::uint32_t>(rows.data()[i]));
  // Values are row-major: element (1, 0) is the fifth float.
  std::uint32_t raw = 0;
  for (int k = 0; k < 4; ++k) raw |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[16 + 16 + k])) << (8 * k);
  EXPECT_EQ(std::bit_cast<float>(raw), rows(1, 0));
}

TEST(FeatureFile, CorruptionRejected) {
  FeatureRows rows = FeatureRows::Ones(2, 2);
  const auto bytes = encode_features(rows);
  auto bad = bytes;
  bad[1] = 'X';
  EXPECT_THROW(decode_features(bad), FormatError);
  auto ver = bytes;
  ver[4] = 9;
  EXPECT_THROW(decode_features(ver), FormatError);
  EXPECT_THROW(decode_features(bytes.substr(0, bytes.size() - 1)), FormatError);
  EXPECT_THROW(decode_features(bytes.substr(0, 10)), FormatError);
  EXPECT_THROW(decode_features(bytes + "abcd"), FormatError);
}
