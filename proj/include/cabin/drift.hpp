#pragma once

#include <cstdint>
#include <vector>

#include "cabin/evidential.hpp"
#include "cabin/fdas.hpp"
#include "cabin/rng.hpp"

namespace cabin {

/// Synthetic per-epoch evidence for two cohorts of pseudo-labeled samples.
/// Easy samples gain true-class evidence quickly; hard samples gain it more
/// slowly and also accumulate evidence for a confusable runner-up class.
/// Both cohorts end up with near-certain softmax-style confidence, so only
/// the evidence gap tells them apart.
struct DriftConfig {
  std::size_t easy = 50;
  std::size_t hard = 50;
  std::size_t num_classes = 4;
  std::size_t epochs = 30;
  double easy_growth = 4.0;     // true-class evidence ~ easy_growth * t^2
  double hard_growth = 2.0;
  double runner_up_growth = 0.3;  // hard cohort's second class ~ runner_up_growth * t
  double background = 0.5;        // per-epoch U(0, background) on the other classes
  double momentum = 0.9;
  std::uint64_t seed = 0;
};

struct CohortStats {
  std::size_t epoch = 0;
  double easy_gap = 0.0;  // cohort mean of the smoothed-evidence gap
  double hard_gap = 0.0;
  double easy_confidence = 0.0;  // cohort mean of max probability
  double hard_confidence = 0.0;

  double separation() const { return easy_gap - hard_gap; }
};

inline std::vector<CohortStats> simulate_evidence_drift(const DriftConfig& cfg) {
  SplitMix64 rng(cfg.seed);
  const std::size_t n = cfg.easy + cfg.hard;
  const std::size_t k = cfg.num_classes;
  std::vector<std::size_t> truth(n);
  std::vector<std::size_t> runner_up(n);
  std::vector<double> rate(n);
  for (std::size_t i = 0; i < n; ++i) {
    truth[i] = rng.index(k);
    runner_up[i] = (truth[i] + 1 + rng.index(k - 1)) % k;
    const double base = i < cfg.easy ? cfg.easy_growth : cfg.hard_growth;
    rate[i] = base * rng.uniform(0.9, 1.1);
  }

  EmaEvidence ema(cfg.momentum);
  std::vector<CohortStats> stats;
  std::vector<double> evidence(k);
  for (std::size_t t = 1; t <= cfg.epochs; ++t) {
    CohortStats s;
    s.epoch = t;
    const double tt = static_cast<double>(t);
    for (std::size_t i = 0; i < n; ++i) {
      const bool easy = i < cfg.easy;
      for (std::size_t c = 0; c < k; ++c) evidence[c] = rng.uniform(0.0, cfg.background);
      evidence[truth[i]] = rate[i] * tt * tt;
      if (!easy) evidence[runner_up[i]] += cfg.runner_up_growth * tt;
      const auto out = from_evidence(evidence);
      const double gap = uncertainty_gap(ema.update(i, out.alpha));
      (easy ? s.easy_gap : s.hard_gap) += gap;
      (easy ? s.easy_confidence : s.hard_confidence) += out.confidence();
    }
    s.easy_gap /= static_cast<double>(cfg.easy);
    s.easy_confidence /= static_cast<double>(cfg.easy);
    s.hard_gap /= static_cast<double>(cfg.hard);
    s.hard_confidence /= static_cast<double>(cfg.hard);
    stats.push_back(s);
  }
  return stats;
}

}  // namespace cabin
