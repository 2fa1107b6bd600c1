#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "cabin/evidential.hpp"
#include "oracles.hpp"

using namespace cabin;

namespace {

std::vector<double> random_vector(std::size_t n, SplitMix64& rng, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

Mlp random_mlp(std::uint64_t seed) {
  Mlp m = make_mlp(5, {7, 6}, 3, seed);
  SplitMix64 rng(seed ^ 0xABCDEFull);
  for (auto& l : m.layers)
    for (auto& b : l.bias) b = 0.3 * rng.normal();
  return m;
}

}  // namespace

TEST(Evidence, ZeroNetworkGivesUniformPrediction) {
  Mlp m = make_mlp(4, {3}, 3, 1);
  for (auto block : m.blocks()) std::fill(block.begin(), block.end(), 0.0);
  const auto out = forward(m, std::vector<double>{1, 2, 3, 4}).output;
  const double e = std::log(2.0);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_NEAR(out.evidence[k], e, 1e-15);
    EXPECT_NEAR(out.alpha[k], 1.0 + e, 1e-15);
    EXPECT_NEAR(out.probs[k], 1.0 / 3.0, 1e-15);
  }
  EXPECT_NEAR(out.uncertainty, 3.0 / (3.0 + 3.0 * e), 1e-15);
  EXPECT_NEAR(out.uncertainty, 0.5906, 1e-4);
}

TEST(Evidence, InjectedEvidence) {
  const auto out = from_evidence(std::vector<double>{9, 0, 0});
  EXPECT_EQ(out.alpha, (std::vector<double>{10, 1, 1}));
  EXPECT_DOUBLE_EQ(out.total, 12.0);
  EXPECT_DOUBLE_EQ(out.probs[0], 10.0 / 12.0);
  EXPECT_DOUBLE_EQ(out.probs[1], 1.0 / 12.0);
  EXPECT_DOUBLE_EQ(out.uncertainty, 0.25);
  EXPECT_EQ(out.argmax(), 0u);
  EXPECT_THROW(from_evidence(std::vector<double>{1, -1}), NumericError);
  EXPECT_THROW(from_evidence(std::vector<double>{1, NAN}), NumericError);
}

TEST(Evidence, DirichletInvariantsOverRandomDraws) {
  SplitMix64 rng(99);
  for (int draw = 0; draw < 1000; ++draw) {
    const Mlp m = make_mlp(6, {8}, 2 + draw % 5, static_cast<std::uint64_t>(draw));
    const auto out = forward(m, random_vector(6, rng, 3.0)).output;
    double sum_alpha = 0.0;
    double sum_p = 0.0;
    for (std::size_t k = 0; k < out.num_classes(); ++k) {
      EXPECT_GE(out.alpha[k], 1.0);
      sum_alpha += out.alpha[k];
      sum_p += out.probs[k];
    }
    EXPECT_NEAR(out.total, sum_alpha, 1e-9);
    EXPECT_NEAR(sum_p, 1.0, 1e-9);
    EXPECT_NEAR(out.uncertainty, static_cast<double>(out.num_classes()) / out.total, 1e-12);
    EXPECT_GT(out.uncertainty, 0.0);
    EXPECT_LE(out.uncertainty, 1.0);
  }
}

TEST(Evidence, EmbeddingIsLastHiddenActivation) {
  const Mlp m = make_mlp(4, {6, 5}, 3, 8);
  const auto p = forward(m, std::vector<double>{0.5, -1, 2, 0.1});
  ASSERT_EQ(p.embedding.size(), 5u);
  for (double v : p.embedding) EXPECT_GE(v, 0.0);
  EXPECT_THROW(forward(m, std::vector<double>{1, 2}), ArgumentError);
}

TEST(Softplus, StableAtExtremes) {
  EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(softplus(800.0), 800.0);
  EXPECT_GT(softplus(-50.0), 0.0);
  EXPECT_NEAR(softplus(-50.0), std::exp(-50.0), 1e-30);
  EXPECT_NEAR(sigmoid(-800.0), 0.0, 1e-300);
  EXPECT_DOUBLE_EQ(sigmoid(800.0), 1.0);
}

TEST(EdlLoss, KnownValues) {
  const auto flat = from_evidence(std::vector<double>{0, 0, 0});
  EXPECT_NEAR(edl_loss(flat, 0), std::log(3.0), 1e-15);
  EXPECT_NEAR(edl_loss(flat, 0), 1.09861, 1e-5);
  for (double c : {1.0, 2.5, 40.0}) {
    const auto even = from_evidence(std::vector<double>{c - 1, c - 1, c - 1, c - 1});
    EXPECT_NEAR(edl_loss(even, 2), std::log(4.0), 1e-12);
  }
  const auto peaked = from_evidence(std::vector<double>{1e12, 0, 0});
  EXPECT_LT(edl_loss(peaked, 0), 1e-11);
}

TEST(EdlLoss, ScaleInvariantInAlpha) {
  SplitMix64 rng(5);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> alpha(4);
    for (auto& a : alpha) a = rng.uniform(1.0, 10.0);
    const double c = rng.uniform(1.0, 5.0);
    std::vector<double> e1(4), e2(4);
    for (std::size_t k = 0; k < 4; ++k) {
      e1[k] = alpha[k] - 1.0;
      e2[k] = c * alpha[k] - 1.0;
    }
    EXPECT_NEAR(edl_loss(from_evidence(e1), 1), edl_loss(from_evidence(e2), 1), 1e-10);
  }
}

TEST(GceLoss, KnownValues) {
  const auto even = from_evidence(std::vector<double>{0, 0});  // p = 0.5
  EXPECT_NEAR(gce_loss(even, 0, 0.7), (1.0 - std::pow(0.5, 0.7)) / 0.7, 1e-15);
  EXPECT_NEAR(gce_loss(even, 0, 0.7), 0.54918, 1e-5);
  EXPECT_NEAR(gce_loss(even, 1, 1.0), 0.5, 1e-15);
  const auto sure = from_evidence(std::vector<double>{1e15, 0, 0});
  EXPECT_NEAR(gce_loss(sure, 0, 0.7), 0.0, 1e-12);
  const auto some = from_evidence(std::vector<double>{3, 1, 0});
  EXPECT_NEAR(gce_loss(some, 1, 1.0), 1.0 - some.probs[1], 1e-15);
  EXPECT_THROW(gce_loss(even, 0, 0.0), ArgumentError);
  EXPECT_THROW(gce_loss(even, 0, 1.5), ArgumentError);
}

TEST(Backward, EdlMatchesFiniteDifferences) {
  SplitMix64 rng(1);
  const ObjectiveWeights w;
  double worst = 0.0;
  for (int draw = 0; draw < 100; ++draw) {
    const Mlp m = random_mlp(static_cast<std::uint64_t>(draw));
    const auto x = random_vector(5, rng);
    const TrainSample s{x, rng.index(3), LossTerm::Supervised};
    const auto analytic = backward(m, std::span(&s, 1), w).grads;
    const auto numeric = oracle::finite_difference(m, [&](const Mlp& p) { return total_objective(p, std::span(&s, 1), w); });
    worst = std::max(worst, oracle::max_relative_error(analytic, numeric));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Backward, GceMatchesFiniteDifferences) {
  SplitMix64 rng(2);
  const ObjectiveWeights w;
  double worst = 0.0;
  for (int draw = 0; draw < 100; ++draw) {
    const Mlp m = random_mlp(static_cast<std::uint64_t>(draw) + 1000);
    const auto x = random_vector(5, rng);
    const TrainSample s{x, rng.index(3), LossTerm::Ambiguous};
    const auto analytic = backward(m, std::span(&s, 1), w).grads;
    const auto numeric = oracle::finite_difference(m, [&](const Mlp& p) { return total_objective(p, std::span(&s, 1), w); });
    worst = std::max(worst, oracle::max_relative_error(analytic, numeric));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Backward, TotalObjectiveMatchesFiniteDifferences) {
  SplitMix64 rng(3);
  const ObjectiveWeights w{0.3, 0.3, 0.7};
  double worst = 0.0;
  for (int draw = 0; draw < 100; ++draw) {
    const Mlp m = random_mlp(static_cast<std::uint64_t>(draw) + 2000);
    std::vector<std::vector<double>> xs;
    for (int i = 0; i < 6; ++i) xs.push_back(random_vector(5, rng));
    std::vector<TrainSample> batch;
    const LossTerm terms[6] = {LossTerm::Supervised, LossTerm::Supervised, LossTerm::Reliable,
                               LossTerm::Ambiguous,  LossTerm::Ambiguous,  LossTerm::Reliable};
    for (int i = 0; i < 6; ++i) batch.push_back({xs[static_cast<std::size_t>(i)], rng.index(3), terms[i]});
    const auto analytic = backward(m, batch, w).grads;
    const auto numeric = oracle::finite_difference(m, [&](const Mlp& p) { return total_objective(p, batch, w); });
    worst = std::max(worst, oracle::max_relative_error(analytic, numeric));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Backward, LossValueMatchesObjective) {
  SplitMix64 rng(4);
  const Mlp m = random_mlp(4);
  std::vector<std::vector<double>> xs;
  for (int i = 0; i < 4; ++i) xs.push_back(random_vector(5, rng));
  std::vector<TrainSample> batch = {{xs[0], 0, LossTerm::Supervised},
                                    {xs[1], 1, LossTerm::Reliable},
                                    {xs[2], 2, LossTerm::Ambiguous},
                                    {xs[3], 1, LossTerm::Supervised}};
  EXPECT_NEAR(backward(m, batch, {}).loss, total_objective(m, batch, {}), 1e-14);
}

TEST(Backward, ZeroInputGivesZeroFirstLayerGradient) {
  Mlp m = make_mlp(5, {7, 6}, 3, 17);
  const std::vector<double> zero(5, 0.0);
  for (auto term : {LossTerm::Supervised, LossTerm::Ambiguous}) {
    const TrainSample s{zero, 1, term};
    const auto g = backward(m, std::span(&s, 1), {}).grads;
    for (double v : g.layers[0].weight) EXPECT_EQ(v, 0.0);
  }
}

TEST(Backward, RejectsEmptyBatch) {
  const Mlp m = make_mlp(2, {3}, 2, 0);
  EXPECT_THROW(backward(m, std::span<const TrainSample>{}, {}), ArgumentError);
}

TEST(AdamW, ZeroGradientWithoutDecayIsFixedPoint) {
  Mlp m = random_mlp(1);
  const Mlp before = m;
  auto state = make_optim_state(m, 1e-3, 0.0);
  for (int i = 0; i < 3; ++i) optim_step(m, m.zeros_like(), state);
  for (std::size_t b = 0; b < m.blocks().size(); ++b) {
    const auto x = std::as_const(m).blocks()[b];
    const auto y = before.blocks()[b];
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x[i], y[i]);
  }
  EXPECT_EQ(state.step, 3);
}

TEST(AdamW, FirstStepMatchesScalarReference) {
  Mlp m = random_mlp(2);
  const Mlp before = m;
  Mlp g = m.zeros_like();
  SplitMix64 rng(8);
  for (auto block : g.blocks())
    for (auto& v : block) v = rng.normal();
  const double lr = 1e-3;
  auto state = make_optim_state(m, lr, 0.0);
  optim_step(m, g, state);

  // Scalar reference: m1 = 0.1 g, v1 = 0.001 g^2, corrected to g and g^2.
  const auto after = std::as_const(m).blocks();
  const auto prev = before.blocks();
  const auto grads = std::as_const(g).blocks();
  for (std::size_t b = 0; b < after.size(); ++b) {
    for (std::size_t i = 0; i < after[b].size(); ++i) {
      const double gi = grads[b][i];
      const double m_hat = (0.1 * gi) / (1 - 0.9);
      const double v_hat = (0.001 * gi * gi) / (1 - 0.999);
      const double expected = prev[b][i] - lr * m_hat / (std::sqrt(v_hat) + 1e-8);
      EXPECT_NEAR(after[b][i], expected, 1e-15);
      EXPECT_NEAR(after[b][i] - prev[b][i], -lr * gi / (std::abs(gi) + 1e-8), 1e-12);
    }
  }
}

TEST(AdamW, DecoupledDecayShrinksParameters) {
  Mlp m = random_mlp(3);
  const Mlp before = m;
  auto state = make_optim_state(m, 1e-2, 5e-3);
  optim_step(m, m.zeros_like(), state);
  const auto after = std::as_const(m).blocks();
  const auto prev = before.blocks();
  for (std::size_t b = 0; b < after.size(); ++b)
    for (std::size_t i = 0; i < after[b].size(); ++i) EXPECT_NEAR(after[b][i], prev[b][i] * (1 - 1e-2 * 5e-3), 1e-15);
}

TEST(AdamW, RejectsShapeMismatch) {
  Mlp m = make_mlp(3, {4}, 2, 0);
  auto state = make_optim_state(m, 1e-3, 0.0);
  EXPECT_THROW(optim_step(m, make_mlp(3, {5}, 2, 0), state), ArgumentError);
}

TEST(Training, SeparableToyLossDecreasesWhenSmoothed) {
  SplitMix64 rng(10);
  std::vector<std::vector<double>> xs;
  std::vector<TrainSample> samples;
  for (int i = 0; i < 48; ++i) {
    const std::size_t y = static_cast<std::size_t>(i % 2);
    std::vector<double> x = {rng.normal() * 0.3 + (y ? 1.5 : -1.5), rng.normal() * 0.3, rng.normal() * 0.3};
    xs.push_back(x);
  }
  for (int i = 0; i < 48; ++i) samples.push_back({xs[static_cast<std::size_t>(i)], static_cast<std::size_t>(i % 2)});
  Mlp m = make_mlp(3, {16}, 2, 4);
  auto state = make_optim_state(m, 1e-3, 0.0);
  std::vector<double> losses;
  for (int step = 0; step < 200; ++step) {
    const auto r = backward(m, samples, {});
    losses.push_back(r.loss);
    optim_step(m, r.grads, state);
  }
  std::vector<double> smooth;
  for (std::size_t i = 0; i + 10 <= losses.size(); ++i)
    smooth.push_back(std::accumulate(losses.begin() + static_cast<long>(i), losses.begin() + static_cast<long>(i + 10), 0.0) / 10);
  for (std::size_t i = 1; i < smooth.size(); ++i) EXPECT_LE(smooth[i], smooth[i - 1]) << "window " << i;
  EXPECT_LT(losses.back(), losses.front());
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto dir = std::filesystem::temp_directory_path() / "cabin_test_ckpt";
  std::filesystem::create_directories(dir);
  const Mlp m = random_mlp(12);
  save_checkpoint(dir / "m.bin", m);
  const Mlp back = load_checkpoint(dir / "m.bin");
  ASSERT_EQ(back.layers.size(), m.layers.size());
  for (std::size_t b = 0; b < m.blocks().size(); ++b) {
    const auto x = back.blocks()[b];
    const auto y = m.blocks()[b];
    ASSERT_EQ(x.size(), y.size());
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(x[i]), std::bit_cast<std::uint64_t>(y[i]));
  }
  {
    std::ofstream out(dir / "m.bin", std::ios::app | std::ios::binary);
    out << 'x';
  }
  EXPECT_THROW(load_checkpoint(dir / "m.bin"), FormatError);
  std::filesystem::resize_file(dir / "m.bin", 40);
  EXPECT_THROW(load_checkpoint(dir / "m.bin"), FormatError);
}

TEST(Tta, SpatialTransformsHaveExpectedOrder) {
  // 3x3 grid, one band, value = 10 r + c.
  std::vector<double> patch(9);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c) patch[r * 3 + c] = static_cast<double>(10 * r + c);
  auto run = [&](TransformKind k, const std::vector<double>& p) { return apply_transform(p, 3, 1, {k, 0}, 0.0); };
  EXPECT_EQ(run(TransformKind::HorizontalFlip, patch), (std::vector<double>{2, 1, 0, 12, 11, 10, 22, 21, 20}));
  EXPECT_EQ(run(TransformKind::VerticalFlip, patch), (std::vector<double>{20, 21, 22, 10, 11, 12, 0, 1, 2}));
  EXPECT_EQ(run(TransformKind::Rotate90, patch), (std::vector<double>{20, 10, 0, 21, 11, 1, 22, 12, 2}));
  auto spun = patch;
  for (int i = 0; i < 4; ++i) spun = run(TransformKind::Rotate90, spun);
  EXPECT_EQ(spun, patch);
  EXPECT_EQ(run(TransformKind::Identity, patch), patch);
}

TEST(Tta, JitterShiftsEachBandUniformly) {
  std::vector<double> patch(3 * 3 * 4, 1.0);
  const auto out = apply_transform(patch, 3, 4, {TransformKind::SpectralJitter, 42}, 0.01);
  for (std::size_t p = 1; p < 9; ++p)
    for (std::size_t b = 0; b < 4; ++b) EXPECT_EQ(out[p * 4 + b], out[b]);
  EXPECT_NE(out[0], out[1]);
  EXPECT_EQ(apply_transform(patch, 3, 4, {TransformKind::SpectralJitter, 42}, 0.0), patch);
}

TEST(Tta, SingleIdentityEqualsForwardPass) {
  const Mlp m = make_mlp(18, {8}, 3, 2);
  SplitMix64 rng(1);
  const auto patch = random_vector(18, rng);
  TtaConfig cfg;
  cfg.num_transforms = 1;
  cfg.kinds = {TransformKind::Identity};
  EXPECT_EQ(tta_uncertainty(m, patch, 3, 2, cfg, 5), forward(m, patch).output.uncertainty);
  cfg.num_transforms = 8;
  EXPECT_EQ(tta_uncertainty(m, patch, 3, 2, cfg, 5), forward(m, patch).output.uncertainty);
}

TEST(Tta, MatchesUnrolledLoopAndIsDeterministic) {
  const Mlp m = make_mlp(18, {8}, 3, 2);
  SplitMix64 rng(2);
  const auto patch = random_vector(18, rng);
  TtaConfig cfg;
  cfg.seed = 77;
  const double a = tta_uncertainty(m, patch, 3, 2, cfg, 31);
  EXPECT_EQ(a, tta_uncertainty(m, patch, 3, 2, cfg, 31));

  // Re-derive the transform draws from the documented stream and average by hand.
  SplitMix64 draws(derive_seed(cfg.seed, 31));
  double sum = 0.0;
  std::set<TransformKind> kinds;
  for (int k = 0; k < 8; ++k) {
    Transform t;
    t.kind = cfg.kinds[draws.next() % cfg.kinds.size()];
    t.noise_seed = draws.next();
    kinds.insert(t.kind);
    sum += forward(m, apply_transform(patch, 3, 2, t, cfg.jitter_sigma)).output.uncertainty;
  }
  EXPECT_NEAR(a, sum / 8.0, 1e-15);
  EXPECT_GT(kinds.size(), 1u);
}

TEST(Tta, InvariantToTransformOrder) {
  const Mlp m = make_mlp(18, {8}, 3, 3);
  SplitMix64 rng(3);
  const auto patch = random_vector(18, rng);
  TtaConfig cfg;
  cfg.seed = 5;
  auto ts = draw_transforms(cfg, 9);
  const double forward_order = mean_uncertainty(m, patch, 3, 2, ts, cfg.jitter_sigma);
  std::reverse(ts.begin(), ts.end());
  EXPECT_NEAR(mean_uncertainty(m, patch, 3, 2, ts, cfg.jitter_sigma), forward_order, 1e-15);
  std::rotate(ts.begin(), ts.begin() + 3, ts.end());
  EXPECT_NEAR(mean_uncertainty(m, patch, 3, 2, ts, cfg.jitter_sigma), forward_order, 1e-15);
}

TEST(Tta, RejectsEmptyConfig) {
  const Mlp m = make_mlp(2, {2}, 2, 0);
  TtaConfig cfg;
  cfg.num_transforms = 0;
  EXPECT_THROW(tta_uncertainty(m, std::vector<double>{1, 2}, 1, 2, cfg), ArgumentError);
}
