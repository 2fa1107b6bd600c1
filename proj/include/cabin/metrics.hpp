#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cabin/datacube.hpp"
#include "cabin/error.hpp"
#include "cabin/json_util.hpp"

namespace cabin {

/// Rows are true classes, columns predicted classes; classes 1..K map to
/// indices 0..K-1.
struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<long long> counts;

  explicit ConfusionMatrix(int k = 0) : num_classes(k), counts(static_cast<std::size_t>(k) * k, 0) {}

  long long& at(int truth, int pred) { return counts[static_cast<std::size_t>(truth) * num_classes + pred]; }
  long long at(int truth, int pred) const { return counts[static_cast<std::size_t>(truth) * num_classes + pred]; }

  long long total() const {
    long long t = 0;
    for (auto c : counts) t += c;
    return t;
  }
};

inline ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> pred, int num_classes) {
  if (truth.size() != pred.size()) throw ArgumentError("confusion: length mismatch");
  if (truth.empty()) throw ArgumentError("confusion: empty input");
  if (num_classes < 1) throw ArgumentError("confusion: need at least one class");
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 1 || truth[i] > num_classes || pred[i] < 1 || pred[i] > num_classes) {
      throw ArgumentError("confusion: class outside 1..K");
    }
    ++cm.at(truth[i] - 1, pred[i] - 1);
  }
  return cm;
}

struct MetricReport {
  double oa = 0.0;
  double aa = 0.0;
  double kappa = 0.0;
  std::vector<std::optional<double>> per_class;  // empty when the class has no samples
};

inline MetricReport compute_metrics(const ConfusionMatrix& cm) {
  const long long total = cm.total();
  if (total <= 0) throw ArgumentError("compute_metrics: empty confusion matrix");
  const int k = cm.num_classes;
  const double n = static_cast<double>(total);
  MetricReport r;
  long long diag = 0;
  double pe = 0.0;
  double aa_sum = 0.0;
  int aa_count = 0;
  for (int i = 0; i < k; ++i) {
    long long row = 0;
    long long col = 0;
    for (int j = 0; j < k; ++j) {
      row += cm.at(i, j);
      col += cm.at(j, i);
    }
    diag += cm.at(i, i);
    pe += (static_cast<double>(row) / n) * (static_cast<double>(col) / n);
    if (row > 0) {
      const double acc = static_cast<double>(cm.at(i, i)) / static_cast<double>(row);
      r.per_class.emplace_back(acc);
      aa_sum += acc;
      ++aa_count;
    } else {
      r.per_class.emplace_back(std::nullopt);
    }
  }
  r.oa = static_cast<double>(diag) / n;
  r.aa = aa_sum / aa_count;
  if (pe >= 1.0) {
    r.kappa = r.oa >= 1.0 ? 1.0 : 0.0;
  } else {
    r.kappa = (r.oa - pe) / (1.0 - pe);
  }
  return r;
}

inline Json to_json(const MetricReport& r) {
  Json j;
  j["oa"] = fixed6(r.oa);
  j["aa"] = fixed6(r.aa);
  j["kappa"] = fixed6(r.kappa);
  Json pc = Json::array();
  for (const auto& a : r.per_class) pc.push_back(a ? Json(fixed6(*a)) : Json(nullptr));
  j["per_class"] = pc;
  return j;
}

// ---------------------------------------------------------------------------
// PPM maps (plain P3)

struct Rgb {
  int r = 0;
  int g = 0;
  int b = 0;
  bool operator==(const Rgb&) const = default;
};

/// palette[k] colors class k; palette[0] is unused (unlabeled is black).
inline std::vector<Rgb> default_palette(int num_classes) {
  static constexpr std::array<Rgb, 16> base = {{{230, 25, 75},
                                                {60, 180, 75},
                                                {255, 225, 25},
                                                {0, 130, 200},
                                                {245, 130, 48},
                                                {145, 30, 180},
                                                {70, 240, 240},
                                                {240, 50, 230},
                                                {210, 245, 60},
                                                {250, 190, 212},
                                                {0, 128, 128},
                                                {220, 190, 255},
                                                {170, 110, 40},
                                                {255, 250, 200},
                                                {128, 0, 0},
                                                {170, 255, 195}}};
  std::vector<Rgb> p(static_cast<std::size_t>(num_classes) + 1);
  for (int k = 1; k <= num_classes; ++k) {
    const Rgb c = base[static_cast<std::size_t>(k - 1) % base.size()];
    // Darken repeats so classes beyond the base set stay distinguishable.
    const int shade = static_cast<int>(static_cast<std::size_t>(k - 1) / base.size());
    p[static_cast<std::size_t>(k)] = {c.r >> shade, c.g >> shade, c.b >> shade};
  }
  return p;
}

struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<Rgb> pixels;  // row-major
};

/// "P3\n<w> <h>\n255\n" then one line per image row of space-separated
/// triples; no trailing newline.
inline std::string write_ppm(const Image& img) {
  std::ostringstream out;
  out << "P3\n" << img.width << ' ' << img.height << "\n255";
  for (std::size_t r = 0; r < img.height; ++r) {
    out << '\n';
    for (std::size_t c = 0; c < img.width; ++c) {
      const Rgb& px = img.pixels[r * img.width + c];
      if (c) out << ' ';
      out << px.r << ' ' << px.g << ' ' << px.b;
    }
  }
  return out.str();
}

inline Image parse_ppm(const std::string& text) {
  std::istringstream in(text);
  std::string magic;
  int maxval = 0;
  Image img;
  if (!(in >> magic) || magic != "P3") throw FormatError("ppm: expected P3");
  if (!(in >> img.width >> img.height >> maxval) || maxval != 255) throw FormatError("ppm: bad header");
  img.pixels.resize(img.width * img.height);
  for (auto& px : img.pixels) {
    if (!(in >> px.r >> px.g >> px.b)) throw FormatError("ppm: truncated pixel data");
    if (px.r < 0 || px.r > 255 || px.g < 0 || px.g > 255 || px.b < 0 || px.b > 255) throw FormatError("ppm: value out of range");
  }
  std::string extra;
  if (in >> extra) throw FormatError("ppm: trailing data");
  return img;
}

inline Image render_classes(const LabelMap& map, std::span<const Rgb> palette) {
  Image img{map.width, map.height, std::vector<Rgb>(map.width * map.height)};
  for (std::size_t i = 0; i < map.labels.size(); ++i) {
    const int k = map.labels[i];
    if (k == 0) continue;
    if (k < 0 || static_cast<std::size_t>(k) >= palette.size()) throw RenderError("render: class outside palette");
    img.pixels[i] = palette[static_cast<std::size_t>(k)];
  }
  return img;
}

/// Grayscale floor(u * 255); pixels with mask == false stay black.
inline Image render_uncertainty(std::size_t height, std::size_t width, std::span<const double> values,
                                std::span<const bool> mask = {}) {
  if (values.size() != height * width) throw RenderError("render: grid size mismatch");
  if (!mask.empty() && mask.size() != values.size()) throw RenderError("render: mask size mismatch");
  Image img{width, height, std::vector<Rgb>(values.size())};
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    if (!std::isfinite(values[i])) throw RenderError("render: non-finite value");
    const int g = std::clamp(static_cast<int>(std::floor(values[i] * 255.0)), 0, 255);
    img.pixels[i] = {g, g, g};
  }
  return img;
}

/// Inverse of render_classes for a palette with distinct colors.
inline LabelMap decode_classes(const Image& img, std::span<const Rgb> palette) {
  LabelMap map(img.height, img.width, static_cast<int>(palette.size()) - 1);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    if (img.pixels[i] == Rgb{}) continue;
    auto it = std::find(palette.begin() + 1, palette.end(), img.pixels[i]);
    if (it == palette.end()) throw FormatError("decode: color not in palette");
    map.labels[i] = static_cast<int>(it - palette.begin());
  }
  return map;
}

inline void save_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

}  // namespace cabin
