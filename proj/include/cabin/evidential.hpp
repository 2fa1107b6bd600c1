#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cabin/error.hpp"
#include "cabin/rng.hpp"

namespace cabin {

/// Dirichlet view of one prediction: alpha = evidence + 1, total = sum(alpha),
/// probs = alpha / total, uncertainty = K / total.
struct EvidenceOutput {
  std::vector<double> evidence;
  std::vector<double> alpha;
  double total = 0.0;
  std::vector<double> probs;
  double uncertainty = 1.0;

  std::size_t num_classes() const { return alpha.size(); }

  std::size_t argmax() const {
    return static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
  }

  double confidence() const { return *std::max_element(probs.begin(), probs.end()); }
};

inline EvidenceOutput from_evidence(std::span<const double> evidence) {
  if (evidence.empty()) throw ArgumentError("from_evidence: empty evidence");
  EvidenceOutput out;
  out.evidence.assign(evidence.begin(), evidence.end());
  out.alpha.resize(evidence.size());
  for (std::size_t k = 0; k < evidence.size(); ++k) {
    if (!(evidence[k] >= 0.0) || !std::isfinite(evidence[k])) throw NumericError("evidence must be finite and >= 0");
    out.alpha[k] = evidence[k] + 1.0;
    out.total += out.alpha[k];
  }
  out.probs.resize(evidence.size());
  for (std::size_t k = 0; k < evidence.size(); ++k) out.probs[k] = out.alpha[k] / out.total;
  out.uncertainty = static_cast<double>(evidence.size()) / out.total;
  return out;
}

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// ---------------------------------------------------------------------------
// Network

struct DenseLayer {
  std::size_t inputs = 0;
  std::size_t outputs = 0;
  std::vector<double> weight;  // outputs x inputs, row-major
  std::vector<double> bias;

  DenseLayer() = default;
  DenseLayer(std::size_t in, std::size_t out) : inputs(in), outputs(out), weight(in * out, 0.0), bias(out, 0.0) {}
};

/// ReLU hidden layers followed by a softplus evidence head. The same type
/// holds gradients and optimizer moments.
struct Mlp {
  std::vector<DenseLayer> layers;

  std::size_t input_dim() const { return layers.front().inputs; }
  std::size_t num_classes() const { return layers.back().outputs; }
  std::size_t embedding_dim() const { return layers.size() > 1 ? layers[layers.size() - 2].outputs : input_dim(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  /// Same shapes, all zeros.
  Mlp zeros_like() const {
    Mlp z;
    for (const auto& l : layers) z.layers.emplace_back(l.inputs, l.outputs);
    return z;
  }

  std::vector<std::span<double>> blocks() {
    std::vector<std::span<double>> out;
    for (auto& l : layers) {
      out.emplace_back(l.weight);
      out.emplace_back(l.bias);
    }
    return out;
  }
  std::vector<std::span<const double>> blocks() const {
    std::vector<std::span<const double>> out;
    for (const auto& l : layers) {
      out.emplace_back(l.weight);
      out.emplace_back(l.bias);
    }
    return out;
  }
};

/// He-normal weights, zero biases.
inline Mlp make_mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t num_classes,
                    std::uint64_t seed) {
  if (input_dim == 0 || num_classes < 2) throw ArgumentError("make_mlp: bad dimensions");
  SplitMix64 rng(seed);
  Mlp mlp;
  std::size_t in = input_dim;
  std::vector<std::size_t> widths = hidden;
  widths.push_back(num_classes);
  for (std::size_t w : widths) {
    if (w == 0) throw ArgumentError("make_mlp: zero-width layer");
    DenseLayer layer(in, w);
    const double scale = std::sqrt(2.0 / static_cast<double>(in));
    for (auto& x : layer.weight) x = scale * rng.normal();
    mlp.layers.push_back(std::move(layer));
    in = w;
  }
  return mlp;
}

namespace detail {

// Four partial sums keep the reduction pipelined; summation order is fixed,
// so results stay deterministic.
inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

// Pre-activations and post-activations of every layer for one input.
struct ForwardCache {
  std::vector<std::vector<double>> pre;   // z_l
  std::vector<std::vector<double>> post;  // a_0 = input, a_l = relu(z_l) for hidden layers

  void run(const Mlp& mlp, std::span<const double> x) {
    const std::size_t n = mlp.layers.size();
    pre.resize(n);
    post.resize(n);
    post[0].assign(x.begin(), x.end());
    for (std::size_t l = 0; l < n; ++l) {
      const auto& layer = mlp.layers[l];
      auto& z = pre[l];
      z.resize(layer.outputs);
      const double* a = post[l].data();
      for (std::size_t o = 0; o < layer.outputs; ++o) {
        z[o] = layer.bias[o] + dot(layer.weight.data() + o * layer.inputs, a, layer.inputs);
      }
      if (l + 1 < n) {
        auto& next = post[l + 1];
        next.resize(layer.outputs);
        for (std::size_t o = 0; o < layer.outputs; ++o) next[o] = z[o] > 0.0 ? z[o] : 0.0;
      }
    }
  }

  std::span<const double> logits() const { return pre.back(); }
  std::span<const double> embedding() const { return post.back(); }
};

}  // namespace detail

struct Prediction {
  EvidenceOutput output;
  std::vector<double> embedding;  // last hidden activation
};

inline Prediction forward(const Mlp& params, std::span<const double> features) {
  if (features.size() != params.input_dim()) throw ArgumentError("forward: input length mismatch");
  detail::ForwardCache cache;
  cache.run(params, features);
  const auto logits = cache.logits();
  std::vector<double> evidence(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) {
    if (!std::isfinite(logits[k])) throw NumericError("forward: non-finite activation");
    evidence[k] = softplus(logits[k]);
  }
  Prediction p{from_evidence(evidence), {}};
  const auto emb = cache.embedding();
  p.embedding.assign(emb.begin(), emb.end());
  return p;
}

// ---------------------------------------------------------------------------
// Losses

/// sum_j y_j (log S - log alpha_j) with a one-hot target.
inline double edl_loss(const EvidenceOutput& out, std::size_t target) {
  if (target >= out.num_classes()) throw ArgumentError("edl_loss: target out of range");
  return std::log(out.total) - std::log(out.alpha[target]);
}

/// (1 - p_y^q) / q with p_y = alpha_y / S.
inline double gce_loss(const EvidenceOutput& out, std::size_t pseudo_label, double q) {
  if (!(q > 0.0 && q <= 1.0)) throw ArgumentError("gce_loss: q must lie in (0, 1]");
  if (pseudo_label >= out.num_classes()) throw ArgumentError("gce_loss: label out of range");
  return (1.0 - std::pow(out.probs[pseudo_label], q)) / q;
}

/// d(edl_loss)/d(alpha_j) = 1/S - [j == y] / alpha_y.
inline std::vector<double> edl_grad_alpha(const EvidenceOutput& out, std::size_t target) {
  std::vector<double> g(out.num_classes(), 1.0 / out.total);
  g[target] -= 1.0 / out.alpha[target];
  return g;
}

/// d(gce_loss)/d(alpha_j) = -p_y^(q-1) ([j == y] - p_y) / S.
inline std::vector<double> gce_grad_alpha(const EvidenceOutput& out, std::size_t label, double q) {
  const double p = out.probs[label];
  const double scale = -std::pow(p, q - 1.0) / out.total;
  std::vector<double> g(out.num_classes());
  for (std::size_t j = 0; j < g.size(); ++j) g[j] = scale * ((j == label ? 1.0 : 0.0) - p);
  return g;
}

/// Which term of the retraining objective a sample feeds:
///   Supervised -> EDL on labeled and augmented data (weight 1)
///   Reliable   -> EDL on reliable pseudo-labels (weight lambda_r)
///   Ambiguous  -> GCE on ambiguous pseudo-labels (weight lambda_a)
enum class LossTerm { Supervised, Reliable, Ambiguous };

struct ObjectiveWeights {
  double lambda_r = 0.3;
  double lambda_a = 0.3;
  double gce_q = 0.7;
};

struct TrainSample {
  std::span<const double> features;
  std::size_t label = 0;  // 0-based class index
  LossTerm term = LossTerm::Supervised;
};

inline double term_weight(LossTerm term, const ObjectiveWeights& w) {
  switch (term) {
    case LossTerm::Supervised: return 1.0;
    case LossTerm::Reliable: return w.lambda_r;
    case LossTerm::Ambiguous: return w.lambda_a;
  }
  return 0.0;
}

inline double sample_loss(const EvidenceOutput& out, const TrainSample& s, const ObjectiveWeights& w) {
  return s.term == LossTerm::Ambiguous ? gce_loss(out, s.label, w.gce_q) : edl_loss(out, s.label);
}

namespace detail {

// Per-sample coefficient so that the batch objective is
//   mean_{Supervised} EDL + lambda_r mean_{Reliable} EDL + lambda_a mean_{Ambiguous} GCE,
// with an empty term contributing nothing.
inline std::vector<double> term_coefficients(std::span<const TrainSample> batch, const ObjectiveWeights& w) {
  std::size_t counts[3] = {0, 0, 0};
  for (const auto& s : batch) ++counts[static_cast<int>(s.term)];
  std::vector<double> coef(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    coef[i] = term_weight(batch[i].term, w) / static_cast<double>(counts[static_cast<int>(batch[i].term)]);
  }
  return coef;
}

}  // namespace detail

/// Value of the three-term objective over `samples` (each term averaged over
/// its own members).
inline double total_objective(const Mlp& params, std::span<const TrainSample> samples, const ObjectiveWeights& w) {
  const auto coef = detail::term_coefficients(samples, w);
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    total += coef[i] * sample_loss(forward(params, samples[i].features).output, samples[i], w);
  }
  return total;
}

struct BackwardResult {
  Mlp grads;
  double loss = 0.0;
};

/// Analytic gradient of total_objective. For a batch drawn from a single
/// term this is the plain mean gradient over the batch.
inline BackwardResult backward(const Mlp& params, std::span<const TrainSample> batch, const ObjectiveWeights& w) {
  if (batch.empty()) throw ArgumentError("backward: empty batch");
  BackwardResult result{params.zeros_like(), 0.0};
  const auto coef = detail::term_coefficients(batch, w);
  const std::size_t n_layers = params.layers.size();
  detail::ForwardCache cache;
  std::vector<double> delta;
  std::vector<double> prev_delta;
  std::vector<double> evidence(params.num_classes());

  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& sample = batch[i];
    if (sample.features.size() != params.input_dim()) throw ArgumentError("backward: input length mismatch");
    cache.run(params, sample.features);
    const auto logits = cache.logits();
    for (std::size_t k = 0; k < logits.size(); ++k) evidence[k] = softplus(logits[k]);
    const EvidenceOutput out = from_evidence(evidence);
    result.loss += coef[i] * sample_loss(out, sample, w);

    const auto g_alpha = sample.term == LossTerm::Ambiguous ? gce_grad_alpha(out, sample.label, w.gce_q)
                                                            : edl_grad_alpha(out, sample.label);
    delta.resize(logits.size());
    for (std::size_t k = 0; k < logits.size(); ++k) delta[k] = coef[i] * g_alpha[k] * sigmoid(logits[k]);

    for (std::size_t l = n_layers; l-- > 0;) {
      const auto& layer = params.layers[l];
      auto& gl = result.grads.layers[l];
      const double* a = cache.post[l].data();
      for (std::size_t o = 0; o < layer.outputs; ++o) {
        const double d = delta[o];
        gl.bias[o] += d;
        if (d == 0.0) continue;
        double* gw = gl.weight.data() + o * layer.inputs;
        for (std::size_t in = 0; in < layer.inputs; ++in) gw[in] += d * a[in];
      }
      if (l == 0) break;
      prev_delta.assign(layer.inputs, 0.0);
      for (std::size_t o = 0; o < layer.outputs; ++o) {
        const double d = delta[o];
        if (d == 0.0) continue;
        const double* wrow = layer.weight.data() + o * layer.inputs;
        for (std::size_t in = 0; in < layer.inputs; ++in) prev_delta[in] += wrow[in] * d;
      }
      const auto& z_prev = cache.pre[l - 1];
      for (std::size_t in = 0; in < layer.inputs; ++in)
        if (z_prev[in] <= 0.0) prev_delta[in] = 0.0;
      delta.swap(prev_delta);
    }
  }
  for (const auto block : std::as_const(result.grads).blocks())
    for (double g : block)
      if (!std::isfinite(g)) throw NumericError("backward: non-finite gradient");
  return result;
}

// ---------------------------------------------------------------------------
// AdamW

struct OptimState {
  Mlp first_moment;
  Mlp second_moment;
  long step = 0;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

inline OptimState make_optim_state(const Mlp& params, double learning_rate, double weight_decay) {
  OptimState s;
  s.first_moment = params.zeros_like();
  s.second_moment = params.zeros_like();
  s.learning_rate = learning_rate;
  s.weight_decay = weight_decay;
  return s;
}

/// Decoupled weight decay, then the bias-corrected Adam step.
inline void optim_step(Mlp& params, const Mlp& grads, OptimState& state) {
  if (grads.parameter_count() != params.parameter_count() ||
      state.first_moment.parameter_count() != params.parameter_count()) {
    throw ArgumentError("optim_step: shape mismatch");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const double decay = 1.0 - state.learning_rate * state.weight_decay;
  auto p_blocks = params.blocks();
  const auto g_blocks = grads.blocks();
  auto m_blocks = state.first_moment.blocks();
  auto v_blocks = state.second_moment.blocks();
  for (std::size_t b = 0; b < p_blocks.size(); ++b) {
    auto p = p_blocks[b];
    const auto g = g_blocks[b];
    auto m = m_blocks[b];
    auto v = v_blocks[b];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p[i] = p[i] * decay - state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Test-time augmentation

enum class TransformKind { Identity, HorizontalFlip, VerticalFlip, Rotate90, SpectralJitter };

inline const char* to_string(TransformKind k) {
  switch (k) {
    case TransformKind::Identity: return "identity";
    case TransformKind::HorizontalFlip: return "hflip";
    case TransformKind::VerticalFlip: return "vflip";
    case TransformKind::Rotate90: return "rot90";
    case TransformKind::SpectralJitter: return "jitter";
  }
  return "?";
}

struct Transform {
  TransformKind kind = TransformKind::Identity;
  std::uint64_t noise_seed = 0;
};

struct TtaConfig {
  std::size_t num_transforms = 8;
  std::vector<TransformKind> kinds = {TransformKind::Identity, TransformKind::HorizontalFlip,
                                      TransformKind::VerticalFlip, TransformKind::Rotate90,
                                      TransformKind::SpectralJitter};
  double jitter_sigma = 0.01;
  std::uint64_t seed = 0;
};

/// The transforms used for one sample; `sample_key` selects the sub-stream.
inline std::vector<Transform> draw_transforms(const TtaConfig& cfg, std::uint64_t sample_key) {
  if (cfg.num_transforms == 0) throw ArgumentError("tta: num_transforms must be >= 1");
  if (cfg.kinds.empty()) throw ArgumentError("tta: no transform kinds");
  SplitMix64 rng(derive_seed(cfg.seed, sample_key));
  std::vector<Transform> out(cfg.num_transforms);
  for (auto& t : out) {
    t.kind = cfg.kinds[rng.index(cfg.kinds.size())];
    t.noise_seed = rng.next();
  }
  return out;
}

/// Applies `t` to a window x window x bands patch in (row, col, band) order.
inline std::vector<double> apply_transform(std::span<const double> patch, std::size_t window, std::size_t bands,
                                           const Transform& t, double jitter_sigma) {
  if (patch.size() != window * window * bands) throw ArgumentError("apply_transform: patch size mismatch");
  std::vector<double> out(patch.size());
  auto src = [&](std::size_t r, std::size_t c) { return patch.data() + (r * window + c) * bands; };
  for (std::size_t r = 0; r < window; ++r) {
    for (std::size_t c = 0; c < window; ++c) {
      const double* from = nullptr;
      switch (t.kind) {
        case TransformKind::HorizontalFlip: from = src(r, window - 1 - c); break;
        case TransformKind::VerticalFlip: from = src(window - 1 - r, c); break;
        case TransformKind::Rotate90: from = src(window - 1 - c, r); break;
        default: from = src(r, c); break;
      }
      std::copy(from, from + bands, out.begin() + static_cast<std::ptrdiff_t>((r * window + c) * bands));
    }
  }
  if (t.kind == TransformKind::SpectralJitter && jitter_sigma > 0.0) {
    SplitMix64 rng(t.noise_seed);
    std::vector<double> shift(bands);
    for (auto& s : shift) s = jitter_sigma * rng.normal();
    for (std::size_t p = 0; p < window * window; ++p)
      for (std::size_t b = 0; b < bands; ++b) out[p * bands + b] += shift[b];
  }
  return out;
}

/// Mean single-pass uncertainty over the given transforms.
inline double mean_uncertainty(const Mlp& params, std::span<const double> patch, std::size_t window,
                               std::size_t bands, std::span<const Transform> transforms, double jitter_sigma) {
  if (transforms.empty()) throw ArgumentError("mean_uncertainty: no transforms");
  double sum = 0.0;
  for (const auto& t : transforms) {
    sum += forward(params, apply_transform(patch, window, bands, t, jitter_sigma)).output.uncertainty;
  }
  return sum / static_cast<double>(transforms.size());
}

inline double tta_uncertainty(const Mlp& params, std::span<const double> patch, std::size_t window,
                              std::size_t bands, const TtaConfig& cfg, std::uint64_t sample_key = 0) {
  if (!(cfg.jitter_sigma >= 0.0)) throw ArgumentError("tta: jitter sigma must be >= 0");
  const auto transforms = draw_transforms(cfg, sample_key);
  return mean_uncertainty(params, patch, window, bands, transforms, cfg.jitter_sigma);
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: one ASCII line "cabin-mlp <L> <d0> <d1> ... <dL>\n" giving the
// layer widths, then for each layer its weights (outputs x inputs, row-major)
// followed by its biases, all as little-endian IEEE-754 float64.

inline void save_checkpoint(const std::filesystem::path& path, const Mlp& mlp) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "cabin-mlp " << mlp.layers.size() << ' ' << mlp.input_dim();
  for (const auto& l : mlp.layers) out << ' ' << l.outputs;
  out << '\n';
  for (const auto block : mlp.blocks()) {
    for (double v : block) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      unsigned char bytes[8];
      for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
      out.write(reinterpret_cast<const char*>(bytes), 8);
    }
  }
  if (!out) throw Error("write failed: " + path.string());
}

inline Mlp load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string header;
  if (!std::getline(in, header)) throw FormatError("checkpoint: missing header");
  std::istringstream hs(header);
  std::string magic;
  std::size_t n_layers = 0;
  hs >> magic >> n_layers;
  if (magic != "cabin-mlp" || n_layers == 0) throw FormatError("checkpoint: bad header");
  std::vector<std::size_t> dims(n_layers + 1);
  for (auto& d : dims)
    if (!(hs >> d) || d == 0) throw FormatError("checkpoint: bad layer widths");
  Mlp mlp;
  for (std::size_t l = 0; l < n_layers; ++l) mlp.layers.emplace_back(dims[l], dims[l + 1]);
  for (auto block : mlp.blocks()) {
    for (double& v : block) {
      unsigned char bytes[8];
      if (!in.read(reinterpret_cast<char*>(bytes), 8)) throw FormatError("checkpoint: truncated");
      std::uint64_t bits = 0;
      for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
      v = std::bit_cast<double>(bits);
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint: trailing bytes");
  return mlp;
}

}  // namespace cabin
