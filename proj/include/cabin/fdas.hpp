#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "cabin/error.hpp"
#include "cabin/json_util.hpp"

namespace cabin {

/// Per-sample exponential moving average of Dirichlet parameters, keyed by
/// pool sample id. The first observation initializes the average.
class EmaEvidence {
 public:
  explicit EmaEvidence(double momentum = 0.9) : momentum_(momentum) {
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ArgumentError("EmaEvidence: momentum must lie in [0, 1)");
  }

  const std::vector<double>& update(std::size_t id, std::span<const double> alpha) {
    for (double a : alpha)
      if (!(a >= 1.0)) throw ArgumentError("EmaEvidence: alpha components must be >= 1");
    auto [it, inserted] = smoothed_.try_emplace(id, alpha.begin(), alpha.end());
    if (!inserted) {
      auto& s = it->second;
      if (s.size() != alpha.size()) throw ArgumentError("EmaEvidence: class count changed");
      for (std::size_t k = 0; k < s.size(); ++k) s[k] = momentum_ * s[k] + (1.0 - momentum_) * alpha[k];
    }
    return it->second;
  }

  const std::vector<double>* find(std::size_t id) const {
    auto it = smoothed_.find(id);
    return it == smoothed_.end() ? nullptr : &it->second;
  }

  void clear() { smoothed_.clear(); }
  std::size_t size() const { return smoothed_.size(); }
  double momentum() const { return momentum_; }

 private:
  double momentum_;
  std::map<std::size_t, std::vector<double>> smoothed_;
};

/// Margin between the largest and second-largest smoothed evidence.
inline double uncertainty_gap(std::span<const double> alpha_bar) {
  if (alpha_bar.size() < 2) throw ArgumentError("uncertainty_gap: need at least two classes");
  double first = -std::numeric_limits<double>::infinity();
  double second = first;
  for (double a : alpha_bar) {
    if (a > first) {
      second = first;
      first = a;
    } else if (a > second) {
      second = a;
    }
  }
  return first - second;
}

struct FdasThresholds {
  double tau_c = 0.8;
  std::optional<double> tau_e;  // unset until the first batch
  double momentum = 0.9;
};

inline double mean_of(std::span<const double> xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

/// EMA of each threshold toward its batch mean. An unset tau_e starts at the
/// first batch's mean gap.
inline FdasThresholds update_thresholds(FdasThresholds th, std::span<const double> confidences,
                                        std::span<const double> gaps) {
  if (confidences.empty() || gaps.empty()) throw ArgumentError("update_thresholds: empty batch");
  const double m = th.momentum;
  th.tau_c = m * th.tau_c + (1.0 - m) * mean_of(confidences);
  const double g = mean_of(gaps);
  th.tau_e = th.tau_e ? m * *th.tau_e + (1.0 - m) * g : g;
  return th;
}

struct TriageRecord {
  std::size_t id = 0;
  double confidence = 0.0;  // max predicted probability
  double gap = 0.0;         // uncertainty gap of the smoothed evidence
};

struct TriageResult {
  std::vector<std::size_t> reliable;
  std::vector<std::size_t> ambiguous;
  std::vector<std::size_t> noisy;
};

enum class TriageClass { Reliable, Ambiguous, Noisy };

inline TriageClass classify(double confidence, double gap, double tau_c, double tau_e) {
  const bool confident = confidence >= tau_c;
  const bool separated = gap >= tau_e;
  if (confident && separated) return TriageClass::Reliable;
  if (!confident && !separated) return TriageClass::Noisy;
  return TriageClass::Ambiguous;
}

inline TriageResult triage(std::span<const TriageRecord> records, const FdasThresholds& th) {
  const double tau_e = th.tau_e.value_or(0.0);
  TriageResult out;
  for (const auto& r : records) {
    switch (classify(r.confidence, r.gap, th.tau_c, tau_e)) {
      case TriageClass::Reliable: out.reliable.push_back(r.id); break;
      case TriageClass::Ambiguous: out.ambiguous.push_back(r.id); break;
      case TriageClass::Noisy: out.noisy.push_back(r.id); break;
    }
  }
  return out;
}

struct TriageReport {
  std::size_t epoch = 0;
  std::size_t reliable = 0;
  std::size_t ambiguous = 0;
  std::size_t noisy = 0;
  double tau_c = 0.0;
  double tau_e = 0.0;
};

inline Json to_json(const TriageReport& r) {
  Json j;
  j["epoch"] = r.epoch;
  j["D_re"] = r.reliable;
  j["D_am"] = r.ambiguous;
  j["D_no"] = r.noisy;
  j["tau_c"] = fixed6(r.tau_c);
  j["tau_e"] = fixed6(r.tau_e);
  return j;
}

}  // namespace cabin
