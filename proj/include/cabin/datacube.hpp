#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cabin/error.hpp"
#include "cabin/rng.hpp"

namespace cabin {

/// H x W x B spectral image, values stored row-major by (row, col, band).
struct HyperCube {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t bands = 0;
  std::vector<double> values;

  HyperCube() = default;
  HyperCube(std::size_t h, std::size_t w, std::size_t b)
      : height(h), width(w), bands(b), values(h * w * b, 0.0) {}

  std::size_t pixels() const { return height * width; }

  double& at(std::size_t r, std::size_t c, std::size_t b) {
    return values[(r * width + c) * bands + b];
  }
  double at(std::size_t r, std::size_t c, std::size_t b) const {
    return values[(r * width + c) * bands + b];
  }

  std::span<double> pixel(std::size_t index) {
    return {values.data() + index * bands, bands};
  }
  std::span<const double> pixel(std::size_t index) const {
    return {values.data() + index * bands, bands};
  }
};

/// Per-pixel class labels; 0 is unlabeled, 1..num_classes are classes.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  int num_classes = 0;
  std::vector<int> labels;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, int k) : height(h), width(w), num_classes(k), labels(h * w, 0) {}

  int at(std::size_t r, std::size_t c) const { return labels[r * width + c]; }
  int& at(std::size_t r, std::size_t c) { return labels[r * width + c]; }
};

/// S x S x B window around a center pixel, flattened in (row, col, band) order.
struct Patch {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t window = 1;
  std::size_t bands = 0;
  std::vector<double> values;
  std::optional<int> label;
};

struct SplitSpec {
  std::size_t train_per_class = 20;
  std::size_t val_per_class = 20;
  std::size_t small_class_test = 5;
  std::size_t small_class_val = 2;
  std::uint64_t seed = 0;
};

/// Pixel indices (row * width + col), each list sorted ascending.
struct DatasetSplit {
  std::vector<std::size_t> train_ids;
  std::vector<std::size_t> val_ids;
  std::vector<std::size_t> test_ids;
  std::vector<std::size_t> pool_ids;
};

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

template <typename T>
T parse_number(std::string_view token, const std::string& what) {
  T value{};
  const auto* end = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(token.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw FormatError(what + ": cannot parse '" + std::string(token) + "'");
  }
  return value;
}

// Reads the non-empty lines of a text file.
inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (detail::split_ws(line).empty()) continue;
    lines.push_back(std::move(line));
  }
  return lines;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Text I/O

inline HyperCube parse_cube(const std::vector<std::string>& lines, const std::string& name = "cube") {
  if (lines.empty()) throw FormatError(name + ": missing header");
  const auto header = detail::split_ws(lines[0]);
  if (header.size() != 3) throw FormatError(name + ": header must be 'H W B'");
  const auto h = detail::parse_number<std::size_t>(header[0], name);
  const auto w = detail::parse_number<std::size_t>(header[1], name);
  const auto b = detail::parse_number<std::size_t>(header[2], name);
  if (h == 0 || w == 0 || b == 0) throw FormatError(name + ": zero dimension in header");
  if (lines.size() - 1 != h * w) {
    throw FormatError(name + ": expected " + std::to_string(h * w) + " pixel lines, found " +
                      std::to_string(lines.size() - 1));
  }
  HyperCube cube(h, w, b);
  for (std::size_t p = 0; p < h * w; ++p) {
    const auto tokens = detail::split_ws(lines[p + 1]);
    if (tokens.size() != b) {
      throw FormatError(name + ": pixel line " + std::to_string(p) + " has " + std::to_string(tokens.size()) +
                        " values, expected " + std::to_string(b));
    }
    for (std::size_t k = 0; k < b; ++k) {
      const double v = detail::parse_number<double>(tokens[k], name);
      if (!std::isfinite(v)) throw FormatError(name + ": non-finite value");
      cube.values[p * b + k] = v;
    }
  }
  return cube;
}

inline HyperCube load_cube(const std::filesystem::path& path) {
  return parse_cube(detail::read_lines(path), path.string());
}

inline void write_cube(std::ostream& out, const HyperCube& cube) {
  out << cube.height << ' ' << cube.width << ' ' << cube.bands << '\n';
  for (std::size_t p = 0; p < cube.pixels(); ++p) {
    const auto px = cube.pixel(p);
    for (std::size_t k = 0; k < px.size(); ++k) {
      if (k) out << ' ';
      out << detail::format_double(px[k]);
    }
    out << '\n';
  }
}

inline void save_cube(const std::filesystem::path& path, const HyperCube& cube) {
  auto out = detail::open_for_write(path);
  write_cube(out, cube);
  if (!out) throw Error("write failed: " + path.string());
}

inline LabelMap parse_labels(const std::vector<std::string>& lines, const std::string& name = "labels") {
  if (lines.empty()) throw FormatError(name + ": missing header");
  const auto header = detail::split_ws(lines[0]);
  if (header.size() != 3) throw FormatError(name + ": header must be 'H W K'");
  const auto h = detail::parse_number<std::size_t>(header[0], name);
  const auto w = detail::parse_number<std::size_t>(header[1], name);
  const auto k = detail::parse_number<int>(header[2], name);
  if (h == 0 || w == 0 || k < 1) throw FormatError(name + ": bad header dimensions");
  if (lines.size() - 1 != h) {
    throw FormatError(name + ": expected " + std::to_string(h) + " rows, found " + std::to_string(lines.size() - 1));
  }
  LabelMap map(h, w, k);
  for (std::size_t r = 0; r < h; ++r) {
    const auto tokens = detail::split_ws(lines[r + 1]);
    if (tokens.size() != w) throw FormatError(name + ": row " + std::to_string(r) + " has wrong width");
    for (std::size_t c = 0; c < w; ++c) {
      const int v = detail::parse_number<int>(tokens[c], name);
      if (v < 0 || v > k) throw FormatError(name + ": label out of range [0, K]");
      map.labels[r * w + c] = v;
    }
  }
  return map;
}

inline LabelMap load_labels(const std::filesystem::path& path) {
  return parse_labels(detail::read_lines(path), path.string());
}

inline void write_labels(std::ostream& out, const LabelMap& map) {
  out << map.height << ' ' << map.width << ' ' << map.num_classes << '\n';
  for (std::size_t r = 0; r < map.height; ++r) {
    for (std::size_t c = 0; c < map.width; ++c) {
      if (c) out << ' ';
      out << map.at(r, c);
    }
    out << '\n';
  }
}

inline void save_labels(const std::filesystem::path& path, const LabelMap& map) {
  auto out = detail::open_for_write(path);
  write_labels(out, map);
  if (!out) throw Error("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Synthetic scenes

/// Scale of each class's unit-norm spectral bump above the shared baseline.
/// Chosen so that at noise_sigma = 0.05 a nearest-centroid classifier on
/// single-pixel spectra is above 95% but short of perfect.
inline constexpr double kTemplateAmplitude = 0.17;

/// Unit-norm bump templates with disjoint band support (hence orthogonal).
inline std::vector<std::vector<double>> class_templates(std::size_t bands, int num_classes) {
  std::vector<std::vector<double>> templates(num_classes, std::vector<double>(bands, 0.0));
  const auto k = static_cast<std::size_t>(num_classes);
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t lo = c * bands / k;
    const std::size_t hi = (c + 1) * bands / k;
    const double width = static_cast<double>(hi - lo);
    double norm = 0.0;
    for (std::size_t b = lo; b < hi; ++b) {
      const double v = std::sin(std::numbers::pi * (static_cast<double>(b - lo) + 0.5) / width);
      templates[c][b] = v;
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : templates[c]) v /= norm;
  }
  return templates;
}

/// Mean spectrum of class `cls` (1-based).
inline std::vector<double> class_spectrum(std::size_t bands, int num_classes, int cls) {
  const auto templates = class_templates(bands, num_classes);
  std::vector<double> spectrum(bands);
  for (std::size_t b = 0; b < bands; ++b) {
    const double t = bands > 1 ? static_cast<double>(b) / static_cast<double>(bands - 1) : 0.0;
    spectrum[b] = 0.3 + 0.1 * std::sin(2.0 * std::numbers::pi * t) + kTemplateAmplitude * templates[cls - 1][b];
  }
  return spectrum;
}

struct SyntheticScene {
  HyperCube cube;
  LabelMap labels;
};

/// Voronoi partition into `num_classes` regions, each filled with its class
/// spectrum plus i.i.d. N(0, noise_sigma^2) noise per value.
inline SyntheticScene generate_synthetic(std::size_t height, std::size_t width, std::size_t bands, int num_classes,
                                         double noise_sigma, std::uint64_t seed) {
  if (num_classes < 2) throw ArgumentError("num_classes must be >= 2");
  if (height == 0 || width == 0) throw ArgumentError("height and width must be positive");
  if (bands < static_cast<std::size_t>(num_classes)) throw ArgumentError("bands must be >= num_classes");
  if (static_cast<std::size_t>(num_classes) > height * width) throw ArgumentError("more classes than pixels");
  if (num_classes > 100) throw ArgumentError("cannot give every class 1% of pixels with more than 100 classes");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw ArgumentError("noise_sigma must be >= 0");

  SplitMix64 rng(seed);
  const std::size_t n = height * width;
  const auto k = static_cast<std::size_t>(num_classes);
  LabelMap labels(height, width, num_classes);

  constexpr int kMaxAttempts = 1000;
  bool ok = false;
  for (int attempt = 0; attempt < kMaxAttempts && !ok; ++attempt) {
    std::vector<std::pair<double, double>> sites(k);
    for (auto& s : sites) s = {rng.uniform(0.0, static_cast<double>(height)), rng.uniform(0.0, static_cast<double>(width))};
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t r = 0; r < height; ++r) {
      for (std::size_t c = 0; c < width; ++c) {
        const double y = static_cast<double>(r) + 0.5;
        const double x = static_cast<double>(c) + 0.5;
        std::size_t best = 0;
        double best_d = INFINITY;
        for (std::size_t s = 0; s < k; ++s) {
          const double d = (y - sites[s].first) * (y - sites[s].first) + (x - sites[s].second) * (x - sites[s].second);
          if (d < best_d) {
            best_d = d;
            best = s;
          }
        }
        labels.at(r, c) = static_cast<int>(best) + 1;
        ++counts[best];
      }
    }
    ok = std::all_of(counts.begin(), counts.end(), [n](std::size_t cnt) { return cnt * 100 >= n && cnt > 0; });
  }
  if (!ok) throw ArgumentError("could not place Voronoi sites with every class >= 1% of pixels");

  std::vector<std::vector<double>> spectra;
  for (int c = 1; c <= num_classes; ++c) spectra.push_back(class_spectrum(bands, num_classes, c));

  HyperCube cube(height, width, bands);
  for (std::size_t p = 0; p < n; ++p) {
    const auto& mean = spectra[labels.labels[p] - 1];
    auto px = cube.pixel(p);
    for (std::size_t b = 0; b < bands; ++b) {
      px[b] = noise_sigma > 0.0 ? mean[b] + noise_sigma * rng.normal() : mean[b];
    }
  }
  return {std::move(cube), std::move(labels)};
}

// ---------------------------------------------------------------------------
// PCA

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
struct EigenPairs {
  std::vector<double> values;                // descending
  std::vector<std::vector<double>> vectors;  // vectors[k] pairs with values[k]
};

/// `matrix` is n x n row-major and must be symmetric. Converges when the
/// off-diagonal Frobenius norm drops below tol * max(1, ||A||_F).
inline EigenPairs jacobi_eigen(std::vector<double> matrix, std::size_t n, double tol = 1e-10, int max_sweeps = 100) {
  if (matrix.size() != n * n) throw ArgumentError("jacobi_eigen: matrix size mismatch");
  auto a = [&](std::size_t i, std::size_t j) -> double& { return matrix[i * n + j]; };
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;

  double fro = 0.0;
  for (double x : matrix) fro += x * x;
  const double limit = tol * std::max(1.0, std::sqrt(fro));
  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
  };

  int sweep = 0;
  while (off_norm() >= limit) {
    if (sweep++ >= max_sweeps) throw NumericError("jacobi_eigen: no convergence");
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p];
          const double vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });

  EigenPairs out;
  for (std::size_t idx : order) {
    out.values.push_back(a(idx, idx));
    std::vector<double> vec(n);
    for (std::size_t k = 0; k < n; ++k) vec[k] = v[k * n + idx];
    // Sign convention: largest-magnitude entry positive (first one on ties).
    std::size_t arg = 0;
    for (std::size_t k = 1; k < n; ++k)
      if (std::abs(vec[k]) > std::abs(vec[arg])) arg = k;
    if (vec[arg] < 0)
      for (auto& x : vec) x = -x;
    out.vectors.push_back(std::move(vec));
  }
  return out;
}

struct PcaModel {
  std::vector<double> mean;                     // per band
  std::vector<double> covariance;               // B x B, population normalization
  std::vector<double> eigenvalues;              // all B, descending
  std::vector<std::vector<double>> components;  // all B eigenvectors
};

inline PcaModel pca_fit(const HyperCube& cube) {
  const std::size_t n = cube.pixels();
  const std::size_t b = cube.bands;
  if (n == 0 || b == 0) throw ArgumentError("pca_fit: empty cube");
  PcaModel model;
  model.mean.assign(b, 0.0);
  for (std::size_t p = 0; p < n; ++p) {
    const auto px = cube.pixel(p);
    for (std::size_t k = 0; k < b; ++k) model.mean[k] += px[k];
  }
  for (auto& m : model.mean) m /= static_cast<double>(n);

  model.covariance.assign(b * b, 0.0);
  std::vector<double> centered(b);
  for (std::size_t p = 0; p < n; ++p) {
    const auto px = cube.pixel(p);
    for (std::size_t k = 0; k < b; ++k) centered[k] = px[k] - model.mean[k];
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = i; j < b; ++j) model.covariance[i * b + j] += centered[i] * centered[j];
  }
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = i; j < b; ++j) {
      model.covariance[i * b + j] /= static_cast<double>(n);
      model.covariance[j * b + i] = model.covariance[i * b + j];
    }
  }
  auto eig = jacobi_eigen(model.covariance, b);
  model.eigenvalues = std::move(eig.values);
  model.components = std::move(eig.vectors);
  return model;
}

inline HyperCube pca_project(const HyperCube& cube, const PcaModel& model, std::size_t components) {
  if (components == 0 || components > model.components.size()) throw ArgumentError("pca_project: bad component count");
  HyperCube out(cube.height, cube.width, components);
  for (std::size_t p = 0; p < cube.pixels(); ++p) {
    const auto px = cube.pixel(p);
    auto dst = out.pixel(p);
    for (std::size_t c = 0; c < components; ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < cube.bands; ++k) s += (px[k] - model.mean[k]) * model.components[c][k];
      dst[c] = s;
    }
  }
  return out;
}

/// Projects onto the top `components` principal axes of the band covariance.
inline HyperCube pca_reduce(const HyperCube& cube, std::size_t components) {
  if (components == 0 || components > cube.bands) throw ArgumentError("pca_reduce: components must be in [1, bands]");
  if (cube.pixels() < components) throw ArgumentError("pca_reduce: fewer pixels than components");
  return pca_project(cube, pca_fit(cube), components);
}

// ---------------------------------------------------------------------------
// Patches

/// Reflect-101 index: -1 -> 1, n -> n - 2.
inline std::size_t mirror_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  std::ptrdiff_t m = i % period;
  if (m < 0) m += period;
  if (m >= static_cast<std::ptrdiff_t>(n)) m = period - m;
  return static_cast<std::size_t>(m);
}

inline void extract_patch_into(const HyperCube& cube, std::size_t row, std::size_t col, std::size_t window,
                               std::span<double> out) {
  const auto half = static_cast<std::ptrdiff_t>(window / 2);
  std::size_t o = 0;
  for (std::ptrdiff_t dr = -half; dr <= half; ++dr) {
    const std::size_t r = mirror_index(static_cast<std::ptrdiff_t>(row) + dr, cube.height);
    for (std::ptrdiff_t dc = -half; dc <= half; ++dc) {
      const std::size_t c = mirror_index(static_cast<std::ptrdiff_t>(col) + dc, cube.width);
      const auto px = cube.pixel(r * cube.width + c);
      std::copy(px.begin(), px.end(), out.begin() + static_cast<std::ptrdiff_t>(o));
      o += cube.bands;
    }
  }
}

inline Patch extract_patch(const HyperCube& cube, std::size_t row, std::size_t col, std::size_t window) {
  if (window == 0 || window % 2 == 0) throw ArgumentError("extract_patch: window must be odd");
  if (row >= cube.height || col >= cube.width) throw ArgumentError("extract_patch: center outside image");
  Patch patch;
  patch.row = row;
  patch.col = col;
  patch.window = window;
  patch.bands = cube.bands;
  patch.values.resize(window * window * cube.bands);
  extract_patch_into(cube, row, col, window, patch.values);
  return patch;
}

// ---------------------------------------------------------------------------
// Splits

inline DatasetSplit make_split(const LabelMap& labels, const SplitSpec& spec) {
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(labels.num_classes) + 1);
  for (std::size_t i = 0; i < labels.labels.size(); ++i) {
    const int l = labels.labels[i];
    if (l < 0 || l > labels.num_classes) throw SplitError("label out of range");
    if (l > 0) by_class[static_cast<std::size_t>(l)].push_back(i);
  }

  SplitMix64 rng(spec.seed);
  DatasetSplit split;
  const std::size_t regular = spec.train_per_class + spec.val_per_class + spec.small_class_test;
  for (int k = 1; k <= labels.num_classes; ++k) {
    auto& members = by_class[static_cast<std::size_t>(k)];
    if (members.empty()) throw SplitError("class " + std::to_string(k) + " has no labeled pixels");
    rng.shuffle(std::span<std::size_t>(members));
    auto take = [&](std::size_t from, std::size_t count, std::vector<std::size_t>& dst) {
      dst.insert(dst.end(), members.begin() + static_cast<std::ptrdiff_t>(from),
                 members.begin() + static_cast<std::ptrdiff_t>(from + count));
    };
    const std::size_t pop = members.size();
    if (pop >= regular) {
      take(0, spec.train_per_class, split.train_ids);
      take(spec.train_per_class, spec.val_per_class, split.val_ids);
      const std::size_t used = spec.train_per_class + spec.val_per_class;
      take(used, pop - used, split.test_ids);
    } else {
      if (pop < spec.small_class_test + spec.small_class_val) {
        throw SplitError("class " + std::to_string(k) + " too small for the small-class rule");
      }
      take(0, spec.small_class_test, split.test_ids);
      take(spec.small_class_test, spec.small_class_val, split.val_ids);
      const std::size_t used = spec.small_class_test + spec.small_class_val;
      take(used, pop - used, split.train_ids);
    }
  }
  std::sort(split.train_ids.begin(), split.train_ids.end());
  std::sort(split.val_ids.begin(), split.val_ids.end());
  std::sort(split.test_ids.begin(), split.test_ids.end());
  split.pool_ids = split.train_ids;
  return split;
}

}  // namespace cabin
