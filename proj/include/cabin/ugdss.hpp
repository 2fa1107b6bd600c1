#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "cabin/error.hpp"
#include "cabin/json_util.hpp"
#include "cabin/rng.hpp"

namespace cabin {

struct LedgerEntry {
  std::size_t id = 0;
  double uncertainty = 0.0;  // TTA-averaged, in [0, 1]
  std::vector<double> embedding;
};

using UncertaintyLedger = std::vector<LedgerEntry>;

inline void validate_ledger(const UncertaintyLedger& ledger) {
  std::set<std::size_t> seen;
  for (const auto& e : ledger) {
    if (!seen.insert(e.id).second) throw ArgumentError("ledger: duplicate id " + std::to_string(e.id));
    if (!std::isfinite(e.uncertainty) || e.uncertainty < 0.0 || e.uncertainty > 1.0) {
      throw ArgumentError("ledger: uncertainty outside [0, 1]");
    }
  }
}

inline std::vector<double> uncertainties(const UncertaintyLedger& ledger) {
  std::vector<double> out;
  out.reserve(ledger.size());
  for (const auto& e : ledger) out.push_back(e.uncertainty);
  return out;
}

// ---------------------------------------------------------------------------
// Adaptive threshold

struct Histogram {
  std::vector<double> edges;  // bins + 1
  std::vector<long long> counts;
};

/// Equal-width bins over [min, max]; the maximum lands in the last bin.
inline Histogram make_histogram(std::span<const double> values, std::size_t bins) {
  if (values.empty() || bins == 0) throw ArgumentError("make_histogram: empty input");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  const double width = (hi - lo) / static_cast<double>(bins);
  Histogram h;
  h.edges.resize(bins + 1);
  for (std::size_t n = 0; n <= bins; ++n) h.edges[n] = lo + width * static_cast<double>(n);
  h.edges[bins] = hi;
  h.counts.assign(bins, 0);
  for (double v : values) {
    auto n = width > 0 ? static_cast<std::size_t>((v - lo) / width) : 0;
    ++h.counts[std::min(n, bins - 1)];
  }
  return h;
}

/// First bin n with dh[n] < delta and d2h[n] < 0, where
/// dh[n] = h[n+1] - h[n] and d2h[n] = dh[n+1] - dh[n].
inline std::optional<std::size_t> scan_histogram(std::span<const long long> h, double delta) {
  if (h.size() < 3) return std::nullopt;
  for (std::size_t n = 0; n + 2 < h.size(); ++n) {
    const long long d1 = h[n + 1] - h[n];
    const long long d1_next = h[n + 2] - h[n + 1];
    const long long d2 = d1_next - d1;
    if (static_cast<double>(d1) < delta && d2 < 0) return n;
  }
  return std::nullopt;
}

/// Linear-interpolation percentile, q in [0, 1].
inline double percentile(std::span<const double> values, double q) {
  if (values.empty()) throw ArgumentError("percentile: empty input");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto i = static_cast<std::size_t>(std::floor(pos));
  if (i + 1 >= sorted.size()) return sorted.back();
  const double frac = pos - static_cast<double>(i);
  return sorted[i] + frac * (sorted[i + 1] - sorted[i]);
}

struct ThresholdResult {
  double threshold = 0.0;
  std::vector<double> bin_edges;
  std::vector<long long> bin_counts;
  bool fallback_used = false;
  std::optional<std::size_t> bin;  // qualifying bin when no fallback
};

inline constexpr double kFallbackPercentile = 0.75;

inline ThresholdResult adaptive_threshold(std::span<const double> values, std::size_t bins = 32, double delta = 0.0) {
  if (bins < 3) throw ArgumentError("adaptive_threshold: need at least 3 bins");
  if (values.size() < 2) throw DegenerateError("adaptive_threshold: need at least two values");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  if (*lo == *hi) throw DegenerateError("adaptive_threshold: all uncertainties are equal");
  auto hist = make_histogram(values, bins);
  ThresholdResult result;
  result.bin = scan_histogram(hist.counts, delta);
  if (result.bin) {
    result.threshold = hist.edges[*result.bin + 1];
  } else {
    result.fallback_used = true;
    result.threshold = percentile(values, kFallbackPercentile);
  }
  result.bin_edges = std::move(hist.edges);
  result.bin_counts = std::move(hist.counts);
  return result;
}

inline ThresholdResult adaptive_threshold(const UncertaintyLedger& ledger, std::size_t bins = 32, double delta = 0.0) {
  const auto u = uncertainties(ledger);
  return adaptive_threshold(std::span<const double>(u), bins, delta);
}

struct PoolPartition {
  std::vector<std::size_t> high_uncertainty;  // D_hc: u >= threshold
  std::vector<std::size_t> confident;         // D_qu: the rest
};

inline PoolPartition partition_pool(const UncertaintyLedger& ledger, double threshold) {
  if (!std::isfinite(threshold)) throw ArgumentError("partition_pool: threshold must be finite");
  PoolPartition p;
  for (const auto& e : ledger) (e.uncertainty >= threshold ? p.high_uncertainty : p.confident).push_back(e.id);
  return p;
}

// ---------------------------------------------------------------------------
// Diverse-representative query selection

struct Candidate {
  std::size_t id = 0;
  std::span<const double> embedding;
};

struct QuerySelection {
  std::vector<std::vector<double>> centroids;
  std::vector<std::size_t> selected_ids;  // one per cluster, in cluster order
  std::vector<std::size_t> assignment;    // cluster index per candidate
  double inertia = 0.0;
};

struct DrqsOptions {
  std::size_t restarts = 50;
  std::size_t max_iterations = 100;
};

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

namespace detail {

struct KMeansResult {
  std::vector<std::vector<double>> centroids;
  std::vector<std::size_t> assignment;
  double inertia = 0.0;
};

inline std::vector<std::size_t> assign_nearest(std::span<const Candidate> pts,
                                               const std::vector<std::vector<double>>& centroids) {
  std::vector<std::size_t> a(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids.size(); ++c) {
      const double d = squared_distance(pts[i].embedding, centroids[c]);
      if (d < best) {
        best = d;
        a[i] = c;
      }
    }
  }
  return a;
}

inline std::vector<std::vector<double>> kmeanspp_seed(std::span<const Candidate> pts, std::size_t k, SplitMix64& rng) {
  const std::size_t n = pts.size();
  std::vector<std::vector<double>> centroids;
  std::vector<bool> chosen(n, false);
  std::size_t first = rng.index(n);
  chosen[first] = true;
  centroids.emplace_back(pts[first].embedding.begin(), pts[first].embedding.end());
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(pts[i].embedding, centroids[0]);
  while (centroids.size() < k) {
    double total = 0.0;
    for (double d : d2) total += d;
    std::size_t pick = n;
    if (total > 0.0) {
      const double r = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (d2[i] > 0.0 && r < acc) {
          pick = i;
          break;
        }
      }
      if (pick == n)  // r landed on the rounding tail
        for (std::size_t i = n; i-- > 0;)
          if (d2[i] > 0.0) {
            pick = i;
            break;
          }
    } else {
      // All remaining points coincide with a centroid.
      std::vector<std::size_t> rest;
      for (std::size_t i = 0; i < n; ++i)
        if (!chosen[i]) rest.push_back(i);
      pick = rest[rng.index(rest.size())];
    }
    chosen[pick] = true;
    centroids.emplace_back(pts[pick].embedding.begin(), pts[pick].embedding.end());
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(pts[i].embedding, centroids.back()));
  }
  return centroids;
}

inline std::vector<std::vector<double>> cluster_means(std::span<const Candidate> pts, std::vector<std::size_t>& assignment,
                                                      std::vector<std::vector<double>> previous) {
  const std::size_t k = previous.size();
  const std::size_t dim = pts.front().embedding.size();
  std::vector<std::vector<double>> means(k, std::vector<double>(dim, 0.0));
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    ++counts[assignment[i]];
    for (std::size_t d = 0; d < dim; ++d) means[assignment[i]][d] += pts[i].embedding[d];
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c] > 0) {
      for (auto& x : means[c]) x /= static_cast<double>(counts[c]);
      continue;
    }
    // Empty cluster: steal the point farthest from its centroid among
    // clusters that would not be emptied.
    std::size_t far = pts.size();
    double far_d = -1.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (counts[assignment[i]] < 2) continue;
      const double d = squared_distance(pts[i].embedding, previous[assignment[i]]);
      if (d > far_d) {
        far_d = d;
        far = i;
      }
    }
    if (far == pts.size()) {
      means[c] = previous[c];
      continue;
    }
    --counts[assignment[far]];
    assignment[far] = c;
    counts[c] = 1;
    means[c].assign(pts[far].embedding.begin(), pts[far].embedding.end());
  }
  return means;
}

inline KMeansResult lloyd(std::span<const Candidate> pts, std::vector<std::vector<double>> centroids,
                          std::size_t max_iterations) {
  std::vector<std::size_t> assignment;
  for (std::size_t it = 0; it < max_iterations; ++it) {
    auto next = assign_nearest(pts, centroids);
    if (it > 0 && next == assignment) break;
    assignment = std::move(next);
    centroids = cluster_means(pts, assignment, std::move(centroids));
  }
  KMeansResult r{std::move(centroids), std::move(assignment), 0.0};
  for (std::size_t i = 0; i < pts.size(); ++i) r.inertia += squared_distance(pts[i].embedding, r.centroids[r.assignment[i]]);
  return r;
}

}  // namespace detail

/// k-means++ seeding and Lloyd iterations over the candidates' embeddings,
/// then the member nearest each centroid (ties to the smaller id). The best
/// of `restarts` seedings by inertia is kept.
inline QuerySelection drqs_select(std::span<const Candidate> candidates, std::size_t budget, std::uint64_t seed,
                                  const DrqsOptions& options = {}) {
  if (candidates.empty()) throw SelectionError("drqs_select: empty candidate set");
  if (budget == 0) throw ArgumentError("drqs_select: budget must be >= 1");
  const std::size_t dim = candidates.front().embedding.size();
  for (const auto& c : candidates)
    if (c.embedding.size() != dim) throw ArgumentError("drqs_select: ragged embeddings");

  QuerySelection sel;
  if (candidates.size() <= budget) {
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      sel.centroids.emplace_back(candidates[i].embedding.begin(), candidates[i].embedding.end());
      sel.selected_ids.push_back(candidates[i].id);
      sel.assignment.push_back(i);
    }
    return sel;
  }

  SplitMix64 rng(seed);
  detail::KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < std::max<std::size_t>(1, options.restarts); ++r) {
    auto result = detail::lloyd(candidates, detail::kmeanspp_seed(candidates, budget, rng), options.max_iterations);
    if (result.inertia < best.inertia) best = std::move(result);
  }

  std::vector<bool> taken(candidates.size(), false);
  auto nearest = [&](std::size_t cluster, bool members_only) {
    std::size_t pick = candidates.size();
    double pick_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      if (taken[i] || (members_only && best.assignment[i] != cluster)) continue;
      const double d = squared_distance(candidates[i].embedding, best.centroids[cluster]);
      if (d < pick_d || (d == pick_d && candidates[i].id < candidates[pick].id)) {
        pick_d = d;
        pick = i;
      }
    }
    return pick;
  };
  for (std::size_t c = 0; c < budget; ++c) {
    std::size_t pick = nearest(c, true);
    if (pick == candidates.size()) pick = nearest(c, false);
    taken[pick] = true;
    sel.selected_ids.push_back(candidates[pick].id);
  }
  sel.centroids = std::move(best.centroids);
  sel.assignment = std::move(best.assignment);
  sel.inertia = best.inertia;
  return sel;
}

// ---------------------------------------------------------------------------
// Gaussian feature perturbation

struct GfpConfig {
  double lambda_min = 0.05;
  double lambda_max = 0.5;
  double mix_weight = 0.5;  // weight of the local (cluster) variance
  std::size_t copies_per_sample = 4;
  std::uint64_t seed = 0;
};

struct FeatureBounds {
  std::vector<double> lo;
  std::vector<double> hi;
};

inline FeatureBounds feature_bounds(std::span<const std::span<const double>> rows) {
  if (rows.empty()) throw ArgumentError("feature_bounds: no rows");
  FeatureBounds b{{rows[0].begin(), rows[0].end()}, {rows[0].begin(), rows[0].end()}};
  for (const auto row : rows) {
    for (std::size_t f = 0; f < row.size(); ++f) {
      b.lo[f] = std::min(b.lo[f], row[f]);
      b.hi[f] = std::max(b.hi[f], row[f]);
    }
  }
  return b;
}

/// Per-feature population variance.
inline std::vector<double> feature_variance(std::span<const std::span<const double>> rows) {
  if (rows.empty()) throw ArgumentError("feature_variance: no rows");
  const std::size_t dim = rows[0].size();
  std::vector<double> mean(dim, 0.0);
  for (const auto row : rows)
    for (std::size_t f = 0; f < dim; ++f) mean[f] += row[f];
  for (auto& m : mean) m /= static_cast<double>(rows.size());
  std::vector<double> var(dim, 0.0);
  for (const auto row : rows)
    for (std::size_t f = 0; f < dim; ++f) var[f] += (row[f] - mean[f]) * (row[f] - mean[f]);
  for (auto& v : var) v /= static_cast<double>(rows.size());
  return var;
}

/// Min-max normalization; a constant input maps to all zeros.
inline std::vector<double> normalize_unit(std::span<const double> values) {
  std::vector<double> out(values.size(), 0.0);
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  if (*hi > *lo)
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - *lo) / (*hi - *lo);
  return out;
}

inline double perturbation_scale(double normalized_uncertainty, const GfpConfig& cfg) {
  return cfg.lambda_min + (cfg.lambda_max - cfg.lambda_min) * normalized_uncertainty;
}

struct GfpSource {
  std::size_t id = 0;
  double uncertainty = 0.0;  // normalized to [0, 1] over the pool
  std::span<const double> features;
  std::size_t label = 0;
  std::vector<double> local_variance;  // over the source's cluster members
};

struct AugmentedSample {
  std::size_t source_id = 0;
  std::size_t label = 0;
  double lambda = 0.0;
  std::vector<double> features;
};

/// x' = clamp(x + lambda * eta), eta ~ N(0, diag(w * var_local + (1 - w) * var_global)).
inline std::vector<AugmentedSample> gfp_augment(std::span<const GfpSource> sources,
                                                std::span<const double> global_variance,
                                                const FeatureBounds& bounds, const GfpConfig& cfg) {
  if (!(cfg.lambda_min >= 0.0 && cfg.lambda_min <= cfg.lambda_max)) throw ArgumentError("gfp: need 0 <= lambda_min <= lambda_max");
  if (!(cfg.mix_weight >= 0.0 && cfg.mix_weight <= 1.0)) throw ArgumentError("gfp: mix weight outside [0, 1]");
  std::vector<AugmentedSample> out;
  if (cfg.copies_per_sample == 0) return out;
  SplitMix64 rng(cfg.seed);
  for (const auto& src : sources) {
    if (!(src.uncertainty >= 0.0 && src.uncertainty <= 1.0)) throw ArgumentError("gfp: uncertainty must be normalized");
    const std::size_t dim = src.features.size();
    if (global_variance.size() != dim || src.local_variance.size() != dim || bounds.lo.size() != dim) {
      throw ArgumentError("gfp: dimension mismatch");
    }
    const double lambda = perturbation_scale(src.uncertainty, cfg);
    std::vector<double> sigma(dim);
    for (std::size_t f = 0; f < dim; ++f) {
      sigma[f] = std::sqrt(cfg.mix_weight * src.local_variance[f] + (1.0 - cfg.mix_weight) * global_variance[f]);
    }
    for (std::size_t copy = 0; copy < cfg.copies_per_sample; ++copy) {
      AugmentedSample aug{src.id, src.label, lambda, std::vector<double>(dim)};
      for (std::size_t f = 0; f < dim; ++f) {
        const double eta = sigma[f] * rng.normal();
        aug.features[f] = std::clamp(src.features[f] + lambda * eta, bounds.lo[f], bounds.hi[f]);
      }
      out.push_back(std::move(aug));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report

struct SamplingReport {
  double threshold = 0.0;
  bool fallback_used = false;
  bool empty_high_uncertainty_fallback = false;  // D_hc was empty; took top-u directly
  std::size_t pool_size = 0;
  std::size_t high_uncertainty_count = 0;
  std::size_t confident_count = 0;
  std::size_t budget = 0;
  std::vector<std::size_t> selected_ids;
  std::vector<double> lambdas;  // per selected id
  std::vector<long long> bin_counts;
  std::size_t augmented_count = 0;
};

inline Json to_json(const SamplingReport& r) {
  Json j;
  j["T_u"] = fixed6(r.threshold);
  j["fallback_used"] = r.fallback_used;
  j["empty_hc_fallback"] = r.empty_high_uncertainty_fallback;
  j["pool_size"] = r.pool_size;
  j["D_hc"] = r.high_uncertainty_count;
  j["D_qu"] = r.confident_count;
  j["budget"] = r.budget;
  j["selected_ids"] = r.selected_ids;
  Json lambdas = Json::array();
  for (double l : r.lambdas) lambdas.push_back(fixed6(l));
  j["lambda"] = lambdas;
  j["bin_counts"] = r.bin_counts;
  j["augmented"] = r.augmented_count;
  return j;
}

}  // namespace cabin
