#include <gtest/gtest.h>

#include <numeric>

#include "cabin/metrics.hpp"
#include "oracles.hpp"

using namespace cabin;

namespace {

ConfusionMatrix from_rows(const std::vector<std::vector<long long>>& rows) {
  ConfusionMatrix cm(static_cast<int>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows.size(); ++j) cm.at(static_cast<int>(i), static_cast<int>(j)) = rows[i][j];
  return cm;
}

}  // namespace

TEST(Confusion, PerfectAgreementIsDiagonal) {
  const std::vector<int> t = {1, 2, 3, 3, 2};
  const auto cm = confusion(t, t, 3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (i != j) {
        EXPECT_EQ(cm.at(i, j), 0);
      }
  EXPECT_EQ(cm.at(2, 2), 2);
  const auto r = compute_metrics(cm);
  EXPECT_EQ(r.oa, 1.0);
  EXPECT_EQ(r.aa, 1.0);
  EXPECT_EQ(r.kappa, 1.0);
}

TEST(Confusion, InputValidation) {
  EXPECT_THROW(confusion(std::vector<int>{}, std::vector<int>{}, 2), ArgumentError);
  EXPECT_THROW(confusion(std::vector<int>{1}, std::vector<int>{1, 2}, 2), ArgumentError);
  EXPECT_THROW(confusion(std::vector<int>{1}, std::vector<int>{3}, 2), ArgumentError);
  EXPECT_THROW(confusion(std::vector<int>{0}, std::vector<int>{1}, 2), ArgumentError);
  EXPECT_THROW(compute_metrics(ConfusionMatrix(3)), ArgumentError);
}

TEST(Confusion, MatchesNaiveCount) {
  SplitMix64 rng(4);
  std::vector<int> t(100), p(100);
  for (std::size_t i = 0; i < 100; ++i) {
    t[i] = 1 + static_cast<int>(rng.index(4));
    p[i] = 1 + static_cast<int>(rng.index(4));
  }
  const auto cm = confusion(t, p, 4);
  for (int a = 1; a <= 4; ++a)
    for (int b = 1; b <= 4; ++b) {
      long long n = 0;
      for (std::size_t i = 0; i < 100; ++i) n += (t[i] == a && p[i] == b) ? 1 : 0;
      EXPECT_EQ(cm.at(a - 1, b - 1), n);
    }
}

TEST(Metrics, BalancedDisagreementHasZeroKappa) {
  const auto r = compute_metrics(from_rows({{1, 1}, {1, 1}}));
  EXPECT_DOUBLE_EQ(r.oa, 0.5);
  EXPECT_DOUBLE_EQ(r.kappa, 0.0);
}

TEST(Metrics, IdentityMatrix) {
  const auto r = compute_metrics(from_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}));
  EXPECT_EQ(r.oa, 1.0);
  EXPECT_EQ(r.aa, 1.0);
  EXPECT_EQ(r.kappa, 1.0);
}

TEST(Metrics, EmptyRowExcludedFromAverageAccuracy) {
  const auto r = compute_metrics(from_rows({{3, 1, 0}, {0, 0, 0}, {0, 2, 2}}));
  EXPECT_TRUE(r.per_class[0].has_value());
  EXPECT_FALSE(r.per_class[1].has_value());
  EXPECT_DOUBLE_EQ(r.aa, (0.75 + 0.5) / 2);
  const auto j = to_json(r);
  EXPECT_TRUE(j["per_class"][1].is_null());
}

TEST(Metrics, ChanceAgreementOfOne) {
  // All mass in a single cell: p_e = 1.
  EXPECT_EQ(compute_metrics(from_rows({{5, 0}, {0, 0}})).kappa, 1.0);
  EXPECT_EQ(compute_metrics(from_rows({{0, 5}, {0, 0}})).kappa, 0.0);
}

TEST(Metrics, AgreesWithOracleOnRandomMatrices) {
  SplitMix64 rng(77);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<std::vector<long long>> rows(5, std::vector<long long>(5));
    for (auto& row : rows)
      for (auto& c : row) c = static_cast<long long>(rng.index(rng.index(2) ? 50 : 5));
    rows[rng.index(5)][rng.index(5)] += 1;
    const auto r = compute_metrics(from_rows(rows));
    const auto o = oracle::agreement(rows);
    EXPECT_NEAR(r.oa, o.oa, 1e-12);
    EXPECT_NEAR(r.aa, o.aa, 1e-12);
    EXPECT_NEAR(r.kappa, o.kappa, 1e-12);
    EXPECT_GE(r.kappa, -1.0);
    EXPECT_LE(r.kappa, 1.0);
  }
}

TEST(Metrics, KappaInvariantUnderSimultaneousPermutation) {
  SplitMix64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<long long>> rows(4, std::vector<long long>(4));
    for (auto& row : rows)
      for (auto& c : row) c = static_cast<long long>(rng.index(20)) + 1;
    std::vector<std::size_t> perm = {0, 1, 2, 3};
    rng.shuffle(std::span<std::size_t>(perm));
    std::vector<std::vector<long long>> moved(4, std::vector<long long>(4));
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) moved[perm[i]][perm[j]] = rows[i][j];
    const auto a = compute_metrics(from_rows(rows));
    const auto b = compute_metrics(from_rows(moved));
    EXPECT_NEAR(a.kappa, b.kappa, 1e-12);
    EXPECT_NEAR(a.oa, b.oa, 1e-15);
    EXPECT_NEAR(a.aa, b.aa, 1e-12);
  }
}

TEST(Metrics, JsonUsesSixDecimals) {
  const auto j = to_json(compute_metrics(from_rows({{2, 1}, {0, 3}})));
  EXPECT_EQ(j["oa"].get<double>(), 0.833333);
  EXPECT_EQ(j.dump(), R"({"oa":0.833333,"aa":0.833333,"kappa":0.666667,"per_class":[0.666667,1.0]})");
}

TEST(Ppm, SinglePixelBytes) {
  LabelMap m(1, 1, 1);
  m.labels[0] = 1;
  const std::vector<Rgb> palette = {{0, 0, 0}, {255, 0, 0}};
  EXPECT_EQ(write_ppm(render_classes(m, palette)), "P3\n1 1\n255\n255 0 0");
}

TEST(Ppm, UnlabeledIsBlack) {
  LabelMap m(2, 3, 2);
  const auto img = render_classes(m, default_palette(2));
  for (const auto& px : img.pixels) EXPECT_EQ(px, (Rgb{0, 0, 0}));
  EXPECT_EQ(write_ppm(img), "P3\n3 2\n255\n0 0 0 0 0 0 0 0 0\n0 0 0 0 0 0 0 0 0");
}

TEST(Ppm, HalfUncertaintyIsGray127) {
  const std::vector<double> u(6, 0.5);
  const auto img = render_uncertainty(2, 3, u);
  for (const auto& px : img.pixels) EXPECT_EQ(px, (Rgb{127, 127, 127}));
  EXPECT_EQ(render_uncertainty(1, 1, std::vector<double>{1.0}).pixels[0], (Rgb{255, 255, 255}));
  EXPECT_EQ(render_uncertainty(1, 1, std::vector<double>{0.0}).pixels[0], (Rgb{0, 0, 0}));
}

TEST(Ppm, RenderErrors) {
  LabelMap m(1, 2, 3);
  m.labels = {1, 3};
  EXPECT_THROW(render_classes(m, default_palette(2)), RenderError);
  EXPECT_THROW(render_uncertainty(2, 2, std::vector<double>{0.1}), RenderError);
}

TEST(Ppm, RoundTripRecoversGrid) {
  SplitMix64 rng(2);
  LabelMap m(7, 9, 6);
  for (auto& l : m.labels) l = static_cast<int>(rng.index(7));
  const auto palette = default_palette(6);
  const auto text = write_ppm(render_classes(m, palette));
  const auto back = decode_classes(parse_ppm(text), palette);
  EXPECT_EQ(back.labels, m.labels);
  EXPECT_THROW(parse_ppm("P6\n1 1\n255\n0 0 0"), FormatError);
  EXPECT_THROW(parse_ppm("P3\n1 1\n255\n0 0"), FormatError);
}

TEST(Ppm, PaletteColorsAreDistinct) {
  const auto p = default_palette(40);
  for (std::size_t i = 1; i < p.size(); ++i) {
    EXPECT_NE(p[i], (Rgb{0, 0, 0}));
    for (std::size_t j = i + 1; j < p.size(); ++j) EXPECT_NE(p[i], p[j]) << i << " " << j;
  }
}
