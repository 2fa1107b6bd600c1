#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "cabin/datacube.hpp"
#include "cabin/error.hpp"
#include "cabin/evidential.hpp"
#include "cabin/json_util.hpp"
#include "cabin/ugdss.hpp"

namespace cabin {

enum class SelectionMode {
  Cabin,           // UGDSS + DRQS + GFP + FDAS
  RandomBaseline,  // same budget, uniform random annotation, no GFP, no triage
};

enum class PseudoLabelSource {
  Refresh,  // argmax of the current model every retraining epoch
  Fixed,    // argmax of the pretrained model, assigned once at sampling time
};

/// Every knob of one experiment. Defaults follow the three-stage protocol
/// (10 seeds per class, 50% annotation, lambda_r = lambda_a = 0.3, q = 0.7,
/// AdamW with batch 48 for 100 epochs per stage).
struct ProtocolConfig {
  std::uint64_t seed = 0;

  SplitSpec split{};
  std::size_t pca_components = 30;  // clipped to the band count
  std::size_t window = 3;

  std::vector<std::size_t> hidden = {128, 64};
  double learning_rate = 1e-3;
  std::size_t batch_size = 48;
  std::size_t pretrain_epochs = 100;
  std::size_t retrain_epochs = 100;
  double weight_decay_pretrain = 0.0;
  double weight_decay_retrain = 5e-3;

  std::size_t pretrain_per_class = 10;
  double annotation_ratio = 0.5;
  ObjectiveWeights weights{};
  TtaConfig tta{};
  std::size_t threshold_bins = 32;
  double threshold_delta = 0.0;
  GfpConfig gfp{};
  DrqsOptions drqs{};
  double ema_momentum = 0.9;
  double threshold_momentum = 0.9;
  double tau_c_init = 0.8;

  SelectionMode mode = SelectionMode::Cabin;
  PseudoLabelSource pseudo_labels = PseudoLabelSource::Refresh;
};

namespace detail {

template <typename T>
T parse_value(const std::string& key, const std::string& text) {
  if constexpr (std::is_unsigned_v<T>) {
    // istream happily wraps "-1" into a huge unsigned value.
    if (text.find('-') != std::string::npos) throw ArgumentError("config: '" + key + "' must be non-negative");
  }
  std::istringstream in(text);
  T v{};
  if (!(in >> v)) throw ArgumentError("config: bad value for '" + key + "': '" + text + "'");
  std::string rest;
  if (in >> rest) throw ArgumentError("config: bad value for '" + key + "': '" + text + "'");
  return v;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Keys accepted by set_config_value, with their meaning. Used for `--help`
/// text and for rejecting unknown keys.
inline const std::map<std::string, std::string>& config_keys() {
  static const std::map<std::string, std::string> keys = {
      {"seed", "master seed (default 0, or CABIN_SEED)"},
      {"train_per_class", "training pixels per class in the split (20)"},
      {"val_per_class", "validation pixels per class (20)"},
      {"small_class_test", "test pixels kept for small classes (5)"},
      {"small_class_val", "validation pixels kept for small classes (2)"},
      {"pca_components", "principal components kept, clipped to band count (30)"},
      {"window", "odd patch size S (3)"},
      {"hidden", "comma-separated hidden widths (128,64)"},
      {"learning_rate", "AdamW learning rate (0.001)"},
      {"batch_size", "minibatch size (48)"},
      {"pretrain_epochs", "epochs of EDL pretraining (100)"},
      {"retrain_epochs", "epochs of retraining (100)"},
      {"weight_decay_pretrain", "decoupled weight decay while pretraining (0)"},
      {"weight_decay_retrain", "decoupled weight decay while retraining (0.005)"},
      {"pretrain_per_class", "labeled seeds per class for pretraining (10)"},
      {"ratio", "annotation ratio of the query pool in [0,1] (0.5)"},
      {"lambda_r", "weight of the reliable pseudo-label EDL term (0.3)"},
      {"lambda_a", "weight of the ambiguous pseudo-label GCE term (0.3)"},
      {"gce_q", "GCE exponent in (0,1] (0.7)"},
      {"tta_transforms", "test-time augmentation passes (8)"},
      {"tta_jitter", "spectral jitter sigma (0.01)"},
      {"threshold_bins", "histogram bins for the adaptive threshold (32)"},
      {"threshold_delta", "first-difference tolerance (0)"},
      {"lambda_min", "smallest perturbation scale (0.05)"},
      {"lambda_max", "largest perturbation scale (0.5)"},
      {"gfp_mix", "weight of local vs global noise variance (0.5)"},
      {"copies", "perturbed copies per annotated sample (4)"},
      {"drqs_restarts", "k-means++ restarts, best inertia kept (50)"},
      {"drqs_max_iterations", "Lloyd iteration cap (100)"},
      {"ema_momentum", "evidence EMA momentum in [0,1) (0.9)"},
      {"threshold_momentum", "threshold EMA momentum in [0,1) (0.9)"},
      {"tau_c_init", "initial confidence threshold (0.8)"},
      {"mode", "cabin | random (cabin)"},
      {"pseudo_labels", "refresh | fixed (refresh)"},
  };
  return keys;
}

inline void set_config_value(ProtocolConfig& cfg, const std::string& key, const std::string& raw) {
  using detail::parse_value;
  const std::string value = detail::trim(raw);
  auto sz = [&] { return parse_value<std::size_t>(key, value); };
  auto real = [&] {
    const double v = parse_value<double>(key, value);
    if (!std::isfinite(v)) throw ArgumentError("config: non-finite value for '" + key + "'");
    return v;
  };

  if (key == "seed") cfg.seed = parse_value<std::uint64_t>(key, value);
  else if (key == "train_per_class") cfg.split.train_per_class = sz();
  else if (key == "val_per_class") cfg.split.val_per_class = sz();
  else if (key == "small_class_test") cfg.split.small_class_test = sz();
  else if (key == "small_class_val") cfg.split.small_class_val = sz();
  else if (key == "pca_components") cfg.pca_components = sz();
  else if (key == "window") cfg.window = sz();
  else if (key == "hidden") {
    cfg.hidden.clear();
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) cfg.hidden.push_back(parse_value<std::size_t>(key, detail::trim(item)));
  } else if (key == "learning_rate") cfg.learning_rate = real();
  else if (key == "batch_size") cfg.batch_size = sz();
  else if (key == "pretrain_epochs") cfg.pretrain_epochs = sz();
  else if (key == "retrain_epochs") cfg.retrain_epochs = sz();
  else if (key == "weight_decay_pretrain") cfg.weight_decay_pretrain = real();
  else if (key == "weight_decay_retrain") cfg.weight_decay_retrain = real();
  else if (key == "pretrain_per_class") cfg.pretrain_per_class = sz();
  else if (key == "ratio") cfg.annotation_ratio = real();
  else if (key == "lambda_r") cfg.weights.lambda_r = real();
  else if (key == "lambda_a") cfg.weights.lambda_a = real();
  else if (key == "gce_q") cfg.weights.gce_q = real();
  else if (key == "tta_transforms") cfg.tta.num_transforms = sz();
  else if (key == "tta_jitter") cfg.tta.jitter_sigma = real();
  else if (key == "threshold_bins") cfg.threshold_bins = sz();
  else if (key == "threshold_delta") cfg.threshold_delta = real();
  else if (key == "lambda_min") cfg.gfp.lambda_min = real();
  else if (key == "lambda_max") cfg.gfp.lambda_max = real();
  else if (key == "gfp_mix") cfg.gfp.mix_weight = real();
  else if (key == "copies") cfg.gfp.copies_per_sample = sz();
  else if (key == "drqs_restarts") cfg.drqs.restarts = sz();
  else if (key == "drqs_max_iterations") cfg.drqs.max_iterations = sz();
  else if (key == "ema_momentum") cfg.ema_momentum = real();
  else if (key == "threshold_momentum") cfg.threshold_momentum = real();
  else if (key == "tau_c_init") cfg.tau_c_init = real();
  else if (key == "mode") {
    if (value == "cabin") cfg.mode = SelectionMode::Cabin;
    else if (value == "random") cfg.mode = SelectionMode::RandomBaseline;
    else throw ArgumentError("config: mode must be cabin or random");
  } else if (key == "pseudo_labels") {
    if (value == "refresh") cfg.pseudo_labels = PseudoLabelSource::Refresh;
    else if (value == "fixed") cfg.pseudo_labels = PseudoLabelSource::Fixed;
    else throw ArgumentError("config: pseudo_labels must be refresh or fixed");
  } else {
    throw ArgumentError("config: unknown key '" + key + "'");
  }
}

inline void validate(const ProtocolConfig& cfg) {
  if (cfg.window == 0 || cfg.window % 2 == 0) throw ArgumentError("config: window must be odd");
  if (cfg.pca_components == 0) throw ArgumentError("config: pca_components must be >= 1");
  if (cfg.batch_size == 0) throw ArgumentError("config: batch_size must be >= 1");
  if (!(cfg.learning_rate > 0)) throw ArgumentError("config: learning_rate must be > 0");
  if (!(cfg.annotation_ratio >= 0.0 && cfg.annotation_ratio <= 1.0)) throw ArgumentError("config: ratio must lie in [0,1]");
  if (cfg.weights.lambda_r < 0 || cfg.weights.lambda_a < 0) throw ArgumentError("config: loss weights must be >= 0");
  if (!(cfg.weights.gce_q > 0.0 && cfg.weights.gce_q <= 1.0)) throw ArgumentError("config: gce_q must lie in (0,1]");
  if (cfg.tta.num_transforms == 0) throw ArgumentError("config: tta_transforms must be >= 1");
  if (cfg.tta.jitter_sigma < 0) throw ArgumentError("config: tta_jitter must be >= 0");
  if (cfg.threshold_bins < 3) throw ArgumentError("config: threshold_bins must be >= 3");
  if (!(cfg.gfp.lambda_min >= 0 && cfg.gfp.lambda_min <= cfg.gfp.lambda_max)) throw ArgumentError("config: need 0 <= lambda_min <= lambda_max");
  if (!(cfg.gfp.mix_weight >= 0 && cfg.gfp.mix_weight <= 1)) throw ArgumentError("config: gfp_mix must lie in [0,1]");
  if (!(cfg.ema_momentum >= 0 && cfg.ema_momentum < 1)) throw ArgumentError("config: ema_momentum must lie in [0,1)");
  if (!(cfg.threshold_momentum >= 0 && cfg.threshold_momentum < 1)) throw ArgumentError("config: threshold_momentum must lie in [0,1)");
  if (!(cfg.tau_c_init >= 0 && cfg.tau_c_init <= 1)) throw ArgumentError("config: tau_c_init must lie in [0,1]");
  for (auto h : cfg.hidden)
    if (h == 0) throw ArgumentError("config: hidden widths must be >= 1");
}

/// Parses `key = value` lines; `#` starts a comment.
inline void apply_config_text(ProtocolConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ArgumentError("config line " + std::to_string(lineno) + ": expected key = value");
    set_config_value(cfg, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

inline void apply_config_file(ProtocolConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(cfg, ss.str());
}

inline Json to_json(const ProtocolConfig& cfg) {
  Json j;
  j["seed"] = cfg.seed;
  j["train_per_class"] = cfg.split.train_per_class;
  j["val_per_class"] = cfg.split.val_per_class;
  j["small_class_test"] = cfg.split.small_class_test;
  j["small_class_val"] = cfg.split.small_class_val;
  j["pca_components"] = cfg.pca_components;
  j["window"] = cfg.window;
  j["hidden"] = cfg.hidden;
  j["learning_rate"] = cfg.learning_rate;
  j["batch_size"] = cfg.batch_size;
  j["pretrain_epochs"] = cfg.pretrain_epochs;
  j["retrain_epochs"] = cfg.retrain_epochs;
  j["weight_decay_pretrain"] = cfg.weight_decay_pretrain;
  j["weight_decay_retrain"] = cfg.weight_decay_retrain;
  j["pretrain_per_class"] = cfg.pretrain_per_class;
  j["ratio"] = cfg.annotation_ratio;
  j["lambda_r"] = cfg.weights.lambda_r;
  j["lambda_a"] = cfg.weights.lambda_a;
  j["gce_q"] = cfg.weights.gce_q;
  j["tta_transforms"] = cfg.tta.num_transforms;
  j["tta_jitter"] = cfg.tta.jitter_sigma;
  j["threshold_bins"] = cfg.threshold_bins;
  j["threshold_delta"] = cfg.threshold_delta;
  j["lambda_min"] = cfg.gfp.lambda_min;
  j["lambda_max"] = cfg.gfp.lambda_max;
  j["gfp_mix"] = cfg.gfp.mix_weight;
  j["copies"] = cfg.gfp.copies_per_sample;
  j["drqs_restarts"] = cfg.drqs.restarts;
  j["drqs_max_iterations"] = cfg.drqs.max_iterations;
  j["ema_momentum"] = cfg.ema_momentum;
  j["threshold_momentum"] = cfg.threshold_momentum;
  j["tau_c_init"] = cfg.tau_c_init;
  j["mode"] = cfg.mode == SelectionMode::Cabin ? "cabin" : "random";
  j["pseudo_labels"] = cfg.pseudo_labels == PseudoLabelSource::Refresh ? "refresh" : "fixed";
  return j;
}

}  // namespace cabin
