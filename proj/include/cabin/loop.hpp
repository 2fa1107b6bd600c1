#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cabin/config.hpp"
#include "cabin/datacube.hpp"
#include "cabin/error.hpp"
#include "cabin/evidential.hpp"
#include "cabin/fdas.hpp"
#include "cabin/json_util.hpp"
#include "cabin/metrics.hpp"
#include "cabin/rng.hpp"
#include "cabin/ugdss.hpp"

namespace cabin {

// Sub-stream ids for derive_seed; one per random decision in the protocol.
namespace stream {
inline constexpr std::uint64_t kSplit = 1;
inline constexpr std::uint64_t kInit = 2;
inline constexpr std::uint64_t kPretrainShuffle = 3;
inline constexpr std::uint64_t kSeedSet = 4;
inline constexpr std::uint64_t kTta = 5;
inline constexpr std::uint64_t kDrqs = 6;
inline constexpr std::uint64_t kGfp = 7;
inline constexpr std::uint64_t kRetrainShuffle = 8;
inline constexpr std::uint64_t kRandomQuery = 9;
}  // namespace stream

/// Per-pixel patch features over the PCA-reduced, RMS-scaled cube.
struct PreparedData {
  LabelMap labels;
  DatasetSplit split;
  std::size_t window = 1;
  std::size_t bands = 0;  // after PCA
  std::size_t dim = 0;    // window * window * bands
  std::vector<double> features;

  std::span<const double> feature(std::size_t pixel) const { return {features.data() + pixel * dim, dim}; }
  int label(std::size_t pixel) const { return labels.labels[pixel]; }
  std::size_t num_classes() const { return static_cast<std::size_t>(labels.num_classes); }
};

inline PreparedData prepare_data(const HyperCube& cube, const LabelMap& labels, const ProtocolConfig& cfg) {
  if (cube.height != labels.height || cube.width != labels.width) throw ArgumentError("cube and label map differ in size");
  validate(cfg);
  HyperCube reduced = pca_reduce(cube, std::min(cfg.pca_components, cube.bands));
  double sq = 0.0;
  for (double v : reduced.values) sq += v * v;
  const double rms = std::sqrt(sq / static_cast<double>(reduced.values.size()));
  if (rms > 0.0)
    for (auto& v : reduced.values) v /= rms;

  PreparedData data;
  data.labels = labels;
  SplitSpec spec = cfg.split;
  spec.seed = derive_seed(cfg.seed, stream::kSplit);
  data.split = make_split(labels, spec);
  data.window = cfg.window;
  data.bands = reduced.bands;
  data.dim = cfg.window * cfg.window * reduced.bands;
  data.features.resize(reduced.pixels() * data.dim);
  for (std::size_t r = 0; r < reduced.height; ++r) {
    for (std::size_t c = 0; c < reduced.width; ++c) {
      const std::size_t p = r * reduced.width + c;
      extract_patch_into(reduced, r, c, cfg.window, {data.features.data() + p * data.dim, data.dim});
    }
  }
  return data;
}

// ---------------------------------------------------------------------------
// Training helpers

/// Minibatch AdamW over `samples` for `epochs`; returns the mean batch
/// objective of each epoch.
inline std::vector<double> train_epochs(Mlp& params, OptimState& optim, std::span<const TrainSample> samples,
                                        std::size_t epochs, std::size_t batch_size, const ObjectiveWeights& weights,
                                        SplitMix64& rng) {
  std::vector<double> curve;
  if (samples.empty()) return curve;
  std::vector<std::size_t> order(samples.size());
  std::vector<TrainSample> batch;
  for (std::size_t e = 0; e < epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i) batch.push_back(samples[order[i]]);
      auto result = backward(params, batch, weights);
      optim_step(params, result.grads, optim);
      sum += result.loss;
      ++batches;
    }
    curve.push_back(sum / static_cast<double>(batches));
  }
  return curve;
}

inline std::vector<int> predict_labels(const Mlp& params, const PreparedData& data, std::span<const std::size_t> ids) {
  std::vector<int> out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(static_cast<int>(forward(params, data.feature(id)).output.argmax()) + 1);
  return out;
}

inline double overall_accuracy(const Mlp& params, const PreparedData& data, std::span<const std::size_t> ids) {
  if (ids.empty()) return 0.0;
  const auto pred = predict_labels(params, data, ids);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) hit += pred[i] == data.label(ids[i]) ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(ids.size());
}

// ---------------------------------------------------------------------------
// Stage 1: pretraining

struct PretrainResult {
  Mlp params;
  std::vector<std::size_t> seed_ids;
  std::vector<std::size_t> pool_ids;
  UncertaintyLedger ledger;
  std::vector<double> loss_curve;
  std::vector<std::string> warnings;
};

/// Draws the labeled seed set from the training ids; the rest is the pool.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> draw_seed_set(const PreparedData& data,
                                                                                   const ProtocolConfig& cfg,
                                                                                   std::vector<std::string>& warnings) {
  SplitMix64 rng(derive_seed(cfg.seed, stream::kSeedSet));
  std::vector<std::size_t> seeds;
  std::vector<std::size_t> pool;
  for (int k = 1; k <= data.labels.num_classes; ++k) {
    std::vector<std::size_t> members;
    for (auto id : data.split.train_ids)
      if (data.label(id) == k) members.push_back(id);
    rng.shuffle(std::span<std::size_t>(members));
    std::size_t take = cfg.pretrain_per_class;
    if (members.size() < take) {
      take = members.empty() ? 0 : members.size() - 1;
      warnings.push_back("class " + std::to_string(k) + " has " + std::to_string(members.size()) +
                         " training pixels; using " + std::to_string(take) + " for pretraining");
    }
    seeds.insert(seeds.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(take));
    pool.insert(pool.end(), members.begin() + static_cast<std::ptrdiff_t>(take), members.end());
  }
  std::sort(seeds.begin(), seeds.end());
  std::sort(pool.begin(), pool.end());
  return {seeds, pool};
}

inline UncertaintyLedger build_ledger(const Mlp& params, const PreparedData& data, std::span<const std::size_t> pool,
                                      const ProtocolConfig& cfg) {
  TtaConfig tta = cfg.tta;
  tta.seed = derive_seed(cfg.seed, stream::kTta);
  UncertaintyLedger ledger;
  ledger.reserve(pool.size());
  for (auto id : pool) {
    LedgerEntry e;
    e.id = id;
    e.uncertainty = tta_uncertainty(params, data.feature(id), data.window, data.bands, tta, id);
    e.embedding = forward(params, data.feature(id)).embedding;
    ledger.push_back(std::move(e));
  }
  return ledger;
}

inline PretrainResult pretrain(const ProtocolConfig& cfg, const PreparedData& data) {
  PretrainResult r;
  auto [seeds, pool] = draw_seed_set(data, cfg, r.warnings);
  r.seed_ids = std::move(seeds);
  r.pool_ids = std::move(pool);
  r.params = make_mlp(data.dim, cfg.hidden, data.num_classes(), derive_seed(cfg.seed, stream::kInit));

  std::vector<TrainSample> samples;
  for (auto id : r.seed_ids) samples.push_back({data.feature(id), static_cast<std::size_t>(data.label(id) - 1)});
  auto optim = make_optim_state(r.params, cfg.learning_rate, cfg.weight_decay_pretrain);
  SplitMix64 rng(derive_seed(cfg.seed, stream::kPretrainShuffle));
  r.loss_curve = train_epochs(r.params, optim, samples, cfg.pretrain_epochs, cfg.batch_size, cfg.weights, rng);
  r.ledger = build_ledger(r.params, data, r.pool_ids, cfg);
  return r;
}

// ---------------------------------------------------------------------------
// Stage 2: sampling

/// ceil(ratio * pool), guarded against ratio * pool landing a hair above an
/// integer.
inline std::size_t annotation_quota(double ratio, std::size_t pool) {
  const double raw = ratio * static_cast<double>(pool);
  return static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
}

/// min(quota, |D_hc|).
inline std::size_t annotation_budget(double ratio, std::size_t pool, std::size_t high_uncertainty) {
  return std::min(annotation_quota(ratio, pool), high_uncertainty);
}

struct SamplingOutcome {
  std::vector<std::size_t> annotated;  // D_au, labels revealed from ground truth
  std::vector<AugmentedSample> augmented;
  std::vector<std::size_t> pseudo_ids;     // D_pu = pool minus D_au
  std::vector<std::size_t> pseudo_labels;  // 0-based, aligned with pseudo_ids
  SamplingReport report;
};

inline SamplingOutcome sampling_round(const Mlp& params, const UncertaintyLedger& ledger, const PreparedData& data,
                                      const ProtocolConfig& cfg) {
  SamplingOutcome out;
  out.report.pool_size = ledger.size();
  if (ledger.empty()) return out;
  validate_ledger(ledger);

  // Threshold and partition.
  double threshold = 0.0;
  try {
    auto th = adaptive_threshold(ledger, cfg.threshold_bins, cfg.threshold_delta);
    threshold = th.threshold;
    out.report.fallback_used = th.fallback_used;
    out.report.bin_counts = th.bin_counts;
  } catch (const DegenerateError&) {
    // A single sample or a flat distribution: everything counts as uncertain.
    threshold = std::min_element(ledger.begin(), ledger.end(), [](auto& a, auto& b) {
                  return a.uncertainty < b.uncertainty;
                })->uncertainty;
    out.report.fallback_used = true;
  }
  out.report.threshold = threshold;
  const auto part = partition_pool(ledger, threshold);
  out.report.high_uncertainty_count = part.high_uncertainty.size();
  out.report.confident_count = part.confident.size();

  std::vector<std::size_t> pos_of_id;  // ledger position by pixel id
  {
    std::size_t max_id = 0;
    for (const auto& e : ledger) max_id = std::max(max_id, e.id);
    pos_of_id.assign(max_id + 1, ledger.size());
    for (std::size_t i = 0; i < ledger.size(); ++i) pos_of_id[ledger[i].id] = i;
  }

  std::size_t budget = annotation_budget(cfg.annotation_ratio, ledger.size(), part.high_uncertainty.size());
  QuerySelection selection;
  std::vector<Candidate> candidates;

  if (cfg.mode == SelectionMode::RandomBaseline) {
    if (part.high_uncertainty.empty()) budget = annotation_quota(cfg.annotation_ratio, ledger.size());
    std::vector<std::size_t> ids;
    for (const auto& e : ledger) ids.push_back(e.id);
    SplitMix64 rng(derive_seed(cfg.seed, stream::kRandomQuery));
    rng.shuffle(std::span<std::size_t>(ids));
    out.annotated.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(budget));
  } else if (budget > 0 || (part.high_uncertainty.empty() && cfg.annotation_ratio > 0.0)) {
    if (part.high_uncertainty.empty()) {
      // Empty D_hc: take the highest-uncertainty samples directly.
      out.report.empty_high_uncertainty_fallback = true;
      budget = annotation_quota(cfg.annotation_ratio, ledger.size());
      std::vector<std::size_t> order(ledger.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return ledger[a].uncertainty > ledger[b].uncertainty; });
      for (std::size_t i = 0; i < budget; ++i) out.annotated.push_back(ledger[order[i]].id);
    } else {
      for (auto id : part.high_uncertainty) candidates.push_back({id, ledger[pos_of_id[id]].embedding});
      selection = drqs_select(candidates, budget, derive_seed(cfg.seed, stream::kDrqs), cfg.drqs);
      out.annotated = selection.selected_ids;
    }
  }
  out.report.budget = budget;
  out.report.selected_ids = out.annotated;

  // Perturbation scales for the annotated samples.
  const auto normalized = normalize_unit(uncertainties(ledger));
  for (auto id : out.annotated) out.report.lambdas.push_back(perturbation_scale(normalized[pos_of_id[id]], cfg.gfp));

  if (cfg.mode == SelectionMode::Cabin && !out.annotated.empty() && cfg.gfp.copies_per_sample > 0) {
    std::vector<std::span<const double>> pool_rows;
    for (const auto& e : ledger) pool_rows.push_back(data.feature(e.id));
    const auto bounds = feature_bounds(pool_rows);
    std::vector<std::span<const double>> au_rows;
    for (auto id : out.annotated) au_rows.push_back(data.feature(id));
    const auto global_var = feature_variance(au_rows);

    std::vector<GfpSource> sources;
    for (std::size_t s = 0; s < out.annotated.size(); ++s) {
      const auto id = out.annotated[s];
      GfpSource src;
      src.id = id;
      src.uncertainty = normalized[pos_of_id[id]];
      src.features = data.feature(id);
      src.label = static_cast<std::size_t>(data.label(id) - 1);
      if (!selection.assignment.empty()) {
        std::vector<std::span<const double>> members;
        for (std::size_t c = 0; c < candidates.size(); ++c)
          if (selection.assignment[c] == s) members.push_back(data.feature(candidates[c].id));
        src.local_variance = members.empty() ? std::vector<double>(data.dim, 0.0) : feature_variance(members);
      } else {
        src.local_variance.assign(data.dim, 0.0);
      }
      sources.push_back(std::move(src));
    }
    GfpConfig gfp = cfg.gfp;
    gfp.seed = derive_seed(cfg.seed, stream::kGfp);
    out.augmented = gfp_augment(sources, global_var, bounds, gfp);
  }
  out.report.augmented_count = out.augmented.size();

  std::vector<bool> annotated(pos_of_id.size(), false);
  for (auto id : out.annotated) annotated[id] = true;
  for (const auto& e : ledger) {
    if (annotated[e.id]) continue;
    out.pseudo_ids.push_back(e.id);
    out.pseudo_labels.push_back(forward(params, data.feature(e.id)).output.argmax());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stage 3: retraining

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  TriageReport triage;
  double val_oa = 0.0;
};

struct RoundState {
  Mlp params;
  OptimState optim;
  std::vector<std::size_t> labeled;  // seeds + annotated
  std::vector<AugmentedSample> augmented;
  std::vector<std::size_t> pseudo_ids;
  std::vector<std::size_t> pseudo_labels;
  EmaEvidence ema{0.9};
  FdasThresholds thresholds;
  TriageResult triage;
  std::vector<EpochRecord> history;
  SplitMix64 rng{0};
};

inline RoundState make_round_state(const PretrainResult& pre, const SamplingOutcome& sampling, const ProtocolConfig& cfg) {
  RoundState s;
  s.params = pre.params;
  s.optim = make_optim_state(s.params, cfg.learning_rate, cfg.weight_decay_retrain);
  s.labeled = pre.seed_ids;
  s.labeled.insert(s.labeled.end(), sampling.annotated.begin(), sampling.annotated.end());
  std::sort(s.labeled.begin(), s.labeled.end());
  s.augmented = sampling.augmented;
  s.pseudo_ids = sampling.pseudo_ids;
  s.pseudo_labels = sampling.pseudo_labels;
  s.ema = EmaEvidence(cfg.ema_momentum);
  s.thresholds.tau_c = cfg.tau_c_init;
  s.thresholds.momentum = cfg.threshold_momentum;
  s.rng = SplitMix64(derive_seed(cfg.seed, stream::kRetrainShuffle));
  return s;
}

/// Training samples for one epoch under the current triage.
inline std::vector<TrainSample> epoch_samples(const RoundState& s, const PreparedData& data) {
  std::vector<TrainSample> samples;
  for (auto id : s.labeled) samples.push_back({data.feature(id), static_cast<std::size_t>(data.label(id) - 1)});
  for (const auto& a : s.augmented) samples.push_back({a.features, a.label});
  std::vector<std::size_t> label_of(s.pseudo_ids.empty() ? 0 : *std::max_element(s.pseudo_ids.begin(), s.pseudo_ids.end()) + 1);
  for (std::size_t i = 0; i < s.pseudo_ids.size(); ++i) label_of[s.pseudo_ids[i]] = s.pseudo_labels[i];
  for (auto id : s.triage.reliable) samples.push_back({data.feature(id), label_of[id], LossTerm::Reliable});
  for (auto id : s.triage.ambiguous) samples.push_back({data.feature(id), label_of[id], LossTerm::Ambiguous});
  return samples;
}

/// Scores D_pu, updates EMA evidence and thresholds batch by batch, triages,
/// then runs one epoch on the three-term objective. D_no is left out.
inline void retrain_epoch(RoundState& s, const PreparedData& data, const ProtocolConfig& cfg) {
  EpochRecord rec;
  rec.epoch = s.history.size();
  if (!s.pseudo_ids.empty()) {
    std::vector<TriageRecord> records;
    records.reserve(s.pseudo_ids.size());
    for (std::size_t start = 0; start < s.pseudo_ids.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(s.pseudo_ids.size(), start + cfg.batch_size);
      std::vector<double> conf;
      std::vector<double> gaps;
      for (std::size_t i = start; i < end; ++i) {
        const auto id = s.pseudo_ids[i];
        const auto out = forward(s.params, data.feature(id)).output;
        if (cfg.pseudo_labels == PseudoLabelSource::Refresh) s.pseudo_labels[i] = out.argmax();
        const auto& smoothed = s.ema.update(id, out.alpha);
        records.push_back({id, out.confidence(), uncertainty_gap(smoothed)});
        conf.push_back(records.back().confidence);
        gaps.push_back(records.back().gap);
      }
      s.thresholds = update_thresholds(s.thresholds, conf, gaps);
    }
    if (cfg.mode == SelectionMode::Cabin) {
      s.triage = triage(records, s.thresholds);
    } else {
      s.triage = {s.pseudo_ids, {}, {}};
    }
  }
  rec.triage = {rec.epoch, s.triage.reliable.size(), s.triage.ambiguous.size(), s.triage.noisy.size(),
                s.thresholds.tau_c, s.thresholds.tau_e.value_or(0.0)};

  const auto samples = epoch_samples(s, data);
  const auto curve = train_epochs(s.params, s.optim, samples, 1, cfg.batch_size, cfg.weights, s.rng);
  rec.loss = curve.empty() ? 0.0 : curve.front();
  rec.val_oa = overall_accuracy(s.params, data, data.split.val_ids);
  s.history.push_back(rec);
}

// ---------------------------------------------------------------------------
// Full experiment

struct ExperimentResult {
  Json report;
  MetricReport metrics;
  double pretrain_oa = 0.0;
  std::size_t annotated = 0;
  std::size_t pool = 0;
  LabelMap prediction_map;          // predicted class per labeled pixel, 0 elsewhere
  std::vector<double> uncertainty;  // single-pass u per pixel
  std::vector<double> retrain_losses;
};

inline ExperimentResult run_experiment(const ProtocolConfig& cfg, const HyperCube& cube, const LabelMap& labels) {
  const PreparedData data = prepare_data(cube, labels, cfg);
  const PretrainResult pre = pretrain(cfg, data);
  const double pretrain_oa = overall_accuracy(pre.params, data, data.split.test_ids);

  const SamplingOutcome sampling = sampling_round(pre.params, pre.ledger, data, cfg);
  RoundState state = make_round_state(pre, sampling, cfg);
  for (std::size_t e = 0; e < cfg.retrain_epochs; ++e) retrain_epoch(state, data, cfg);

  ExperimentResult result;
  const auto& test = data.split.test_ids;
  const auto pred = predict_labels(state.params, data, test);
  std::vector<int> truth;
  for (auto id : test) truth.push_back(data.label(id));
  result.metrics = compute_metrics(confusion(truth, pred, labels.num_classes));
  result.pretrain_oa = pretrain_oa;
  result.annotated = sampling.annotated.size();
  result.pool = pre.pool_ids.size();

  result.prediction_map = LabelMap(labels.height, labels.width, labels.num_classes);
  result.uncertainty.resize(labels.labels.size());
  for (std::size_t p = 0; p < labels.labels.size(); ++p) {
    const auto out = forward(state.params, data.feature(p)).output;
    result.uncertainty[p] = out.uncertainty;
    if (labels.labels[p] > 0) result.prediction_map.labels[p] = static_cast<int>(out.argmax()) + 1;
  }

  std::size_t best_val_epoch = 0;
  for (const auto& h : state.history) {
    result.retrain_losses.push_back(h.loss);
    if (h.val_oa > state.history[best_val_epoch].val_oa) best_val_epoch = h.epoch;
  }

  Json j;
  j["config"] = to_json(cfg);
  j["mode"] = cfg.mode == SelectionMode::Cabin ? "cabin" : "random";
  j["zero_budget"] = sampling.annotated.empty();
  j["split"] = {{"train", data.split.train_ids.size()},
                {"val", data.split.val_ids.size()},
                {"test", data.split.test_ids.size()},
                {"pretrain_seeds", pre.seed_ids.size()},
                {"pool", pre.pool_ids.size()}};
  j["warnings"] = pre.warnings;
  Json pre_curve = Json::array();
  for (double l : pre.loss_curve) pre_curve.push_back(fixed6(l));
  j["pretrain"] = {{"loss", pre_curve}, {"test_oa", fixed6(pretrain_oa)}};
  j["sampling"] = to_json(sampling.report);
  j["annotations"] = sampling.annotated.size();
  Json epochs = Json::array();
  for (const auto& h : state.history) {
    Json e = to_json(h.triage);
    e["loss"] = fixed6(h.loss);
    e["val_oa"] = fixed6(h.val_oa);
    epochs.push_back(e);
  }
  j["retrain"] = epochs;
  j["best_val_epoch"] = state.history.empty() ? Json(nullptr) : Json(best_val_epoch);
  j["metrics"] = to_json(result.metrics);
  result.report = std::move(j);
  return result;
}

}  // namespace cabin
