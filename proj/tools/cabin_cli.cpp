// cabin: command-line front end for the evidential semi-supervised loop.
//
//   cabin gen  --h 64 --w 64 --b 16 --k 4 --sigma 0.05 --seed 7 --out data/
//   cabin run  --cube data/cube.txt --labels data/labels.txt --ratio 0.5 --out runs/
//   cabin run  ... --sweep ratio=0,0.25,0.5,0.75,1.0 --jobs 4 --out sweep/
//   cabin eval --pred runs/run-.../predictions.txt --labels data/labels.txt
//   cabin map  --labels data/labels.txt --out maps/
//
// Exit codes: 0 ok, 1 usage error, 2 runtime or data error.

#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "cabin/config.hpp"
#include "cabin/datacube.hpp"
#include "cabin/loop.hpp"
#include "cabin/metrics.hpp"

namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t env_seed() {
  const char* s = std::getenv("CABIN_SEED");
  if (!s || !*s) return 0;
  try {
    std::size_t used = 0;
    const std::string text(s);
    if (text.find('-') != std::string::npos) throw std::invalid_argument("negative");
    const auto v = std::stoull(text, &used);
    if (used != text.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw UsageError("CABIN_SEED is not a non-negative integer: '" + std::string(s) + "'");
  }
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Directory name for one experiment: hash of every setting except the seed.
std::string run_dir_name(const cabin::ProtocolConfig& cfg) {
  auto j = cabin::to_json(cfg);
  j.erase("seed");
  return "run-" + hex64(cabin::fnv1a(j.dump())) + "-s" + std::to_string(cfg.seed);
}

// ---------------------------------------------------------------------------
// gen

struct GenArgs {
  std::size_t h = 64, w = 64, b = 16;
  int k = 4;
  double sigma = 0.05;
  std::optional<std::uint64_t> seed;
  std::string out;
};

int cmd_gen(const GenArgs& a) {
  cabin::SyntheticScene scene;
  try {
    scene = cabin::generate_synthetic(a.h, a.w, a.b, a.k, a.sigma, a.seed.value_or(env_seed()));
  } catch (const cabin::ArgumentError& e) {
    throw UsageError(e.what());
  }
  fs::create_directories(a.out);
  cabin::save_cube(fs::path(a.out) / "cube.txt", scene.cube);
  cabin::save_labels(fs::path(a.out) / "labels.txt", scene.labels);
  std::cout << (fs::path(a.out) / "cube.txt").string() << "\n" << (fs::path(a.out) / "labels.txt").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// run

struct RunArgs {
  std::string cube, labels, config, out;
  std::vector<std::string> overrides;
  std::optional<double> ratio;
  std::optional<std::size_t> copies;
  std::optional<std::uint64_t> seed;
  std::string baseline;
  std::string sweep;
  std::size_t jobs = 1;
};

std::pair<std::string, std::string> split_assignment(const std::string& text, const char* what) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError(std::string(what) + " expects key=value, got '" + text + "'");
  return {cabin::detail::trim(text.substr(0, eq)), cabin::detail::trim(text.substr(eq + 1))};
}

/// "0,0.25,0.5" or an integer range "1..7".
std::vector<std::string> sweep_values(const std::string& spec) {
  std::vector<std::string> values;
  if (const auto dots = spec.find(".."); dots != std::string::npos) {
    long long lo = 0, hi = 0;
    try {
      std::size_t u1 = 0, u2 = 0;
      const auto a = spec.substr(0, dots), b = spec.substr(dots + 2);
      lo = std::stoll(a, &u1);
      hi = std::stoll(b, &u2);
      if (u1 != a.size() || u2 != b.size()) throw std::invalid_argument("range");
    } catch (const std::exception&) {
      throw UsageError("bad sweep range '" + spec + "'");
    }
    if (hi < lo || hi - lo > 1000) throw UsageError("bad sweep range '" + spec + "'");
    for (long long v = lo; v <= hi; ++v) values.push_back(std::to_string(v));
  } else {
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = cabin::detail::trim(item);
      if (item.empty()) throw UsageError("empty value in sweep '" + spec + "'");
      values.push_back(item);
    }
  }
  if (values.empty()) throw UsageError("sweep has no values");
  return values;
}

cabin::ProtocolConfig base_config(const RunArgs& a) {
  cabin::ProtocolConfig cfg;
  cfg.seed = env_seed();
  try {
    if (!a.config.empty()) {
      if (!fs::exists(a.config)) throw UsageError("config file not found: " + a.config);
      cabin::apply_config_file(cfg, a.config);
    }
    for (const auto& o : a.overrides) {
      const auto [k, v] = split_assignment(o, "--set");
      cabin::set_config_value(cfg, k, v);
    }
    if (a.ratio) cfg.annotation_ratio = *a.ratio;
    if (a.copies) cfg.gfp.copies_per_sample = *a.copies;
    if (a.seed) cfg.seed = *a.seed;
    if (!a.baseline.empty()) {
      if (a.baseline != "random") throw UsageError("--baseline accepts only 'random'");
      cfg.mode = cabin::SelectionMode::RandomBaseline;
    }
    cabin::validate(cfg);
  } catch (const cabin::ArgumentError& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

struct RunOutcome {
  std::string dir;
  std::size_t annotations = 0;
  double oa = 0.0;
};

RunOutcome execute(const cabin::ProtocolConfig& cfg, const cabin::HyperCube& cube, const cabin::LabelMap& labels,
                   const fs::path& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = cabin::run_experiment(cfg, cube, labels);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const fs::path dir = out / run_dir_name(cfg);
  fs::create_directories(dir);
  cabin::save_text(dir / "report.json", result.report.dump(2) + "\n");
  cabin::save_text(dir / "classification.ppm",
                   cabin::write_ppm(cabin::render_classes(result.prediction_map, cabin::default_palette(labels.num_classes))));
  cabin::save_text(dir / "uncertainty.ppm",
                   cabin::write_ppm(cabin::render_uncertainty(labels.height, labels.width, result.uncertainty)));
  cabin::save_labels(dir / "predictions.txt", result.prediction_map);
  // Wall-clock lives apart from the report so reports stay byte-identical.
  cabin::Json timing;
  timing["seconds"] = cabin::fixed6(seconds);
  cabin::save_text(dir / "timing.json", timing.dump(2) + "\n");
  return {dir.filename().string(), result.annotated, result.metrics.oa};
}

int cmd_run(const RunArgs& a) {
  const auto base = base_config(a);
  std::vector<cabin::ProtocolConfig> configs;
  std::string sweep_key;
  std::vector<std::string> sweep_vals;
  if (a.sweep.empty()) {
    configs.push_back(base);
  } else {
    const auto [key, spec] = split_assignment(a.sweep, "--sweep");
    sweep_key = key;
    sweep_vals = sweep_values(spec);
    for (const auto& v : sweep_vals) {
      auto cfg = base;
      try {
        cabin::set_config_value(cfg, key, v);
        cabin::validate(cfg);
      } catch (const cabin::ArgumentError& e) {
        throw UsageError(e.what());
      }
      configs.push_back(cfg);
    }
  }
  if (a.jobs == 0) throw UsageError("--jobs must be >= 1");

  const auto cube = cabin::load_cube(a.cube);
  const auto labels = cabin::load_labels(a.labels);
  if (cube.height != labels.height || cube.width != labels.width)
    throw cabin::FormatError("cube is " + std::to_string(cube.height) + "x" + std::to_string(cube.width) + " but labels are " +
                             std::to_string(labels.height) + "x" + std::to_string(labels.width));

  const fs::path out(a.out);
  fs::create_directories(out);
  std::vector<RunOutcome> outcomes(configs.size());
  std::vector<std::exception_ptr> errors(configs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < configs.size(); i = next++) {
      try {
        outcomes[i] = execute(configs[i], cube, labels, out);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::min(a.jobs, configs.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  for (const auto& o : outcomes) std::cout << o.dir << "  annotations=" << o.annotations << "  oa=" << cabin::fixed6(o.oa) << "\n";
  if (!sweep_key.empty()) {
    cabin::Json summary = cabin::Json::array();
    for (std::size_t i = 0; i < outcomes.size(); ++i)
      summary.push_back({{sweep_key, sweep_vals[i]},
                         {"dir", outcomes[i].dir},
                         {"annotations", outcomes[i].annotations},
                         {"oa", cabin::fixed6(outcomes[i].oa)}});
    cabin::save_text(out / "sweep.json", summary.dump(2) + "\n");
  }
  return 0;
}

// ---------------------------------------------------------------------------
// eval / map

int cmd_eval(const std::string& pred_path, const std::string& label_path, const std::string& out) {
  const auto pred = cabin::load_labels(pred_path);
  const auto truth = cabin::load_labels(label_path);
  if (pred.height != truth.height || pred.width != truth.width)
    throw cabin::FormatError("prediction grid " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                             " does not match label grid " + std::to_string(truth.height) + "x" + std::to_string(truth.width));
  std::vector<int> t, p;
  for (std::size_t i = 0; i < truth.labels.size(); ++i) {
    if (truth.labels[i] == 0) continue;
    t.push_back(truth.labels[i]);
    p.push_back(pred.labels[i]);
  }
  const auto report = cabin::compute_metrics(cabin::confusion(t, p, truth.num_classes));
  const auto text = cabin::to_json(report).dump(2);
  std::cout << text << "\n";
  if (!out.empty()) {
    fs::create_directories(out);
    cabin::save_text(fs::path(out) / "metrics.json", text + "\n");
  }
  return 0;
}

int cmd_map(const std::string& label_path, const std::string& out) {
  const auto labels = cabin::load_labels(label_path);
  fs::create_directories(out);
  const auto target = fs::path(out) / (fs::path(label_path).stem().string() + ".ppm");
  cabin::save_text(target, cabin::write_ppm(cabin::render_classes(labels, cabin::default_palette(labels.num_classes))));
  std::cout << target.string() << "\n";
  return 0;
}

std::string config_help() {
  std::ostringstream s;
  s << "Config keys (file lines `key = value`, or --set key=value):\n";
  for (const auto& [k, doc] : cabin::config_keys()) s << "  " << k << ": " << doc << "\n";
  return s.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Evidential semi-supervised classification of hyperspectral cubes"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "write a synthetic cube and label map");
  g->set_help_flag("--help", "print this help");  // frees -h for --h
  g->add_option("--h", gen.h, "height")->capture_default_str();
  g->add_option("--w", gen.w, "width")->capture_default_str();
  g->add_option("--b", gen.b, "bands")->capture_default_str();
  g->add_option("--k", gen.k, "classes")->capture_default_str();
  g->add_option("--sigma", gen.sigma, "noise sigma")->capture_default_str();
  g->add_option("--seed", gen.seed, "seed (default CABIN_SEED or 0)");
  g->add_option("--out", gen.out, "output directory")->required();

  RunArgs run;
  auto* r = app.add_subcommand("run", "run one experiment or a sweep");
  r->footer(config_help());
  r->add_option("--cube", run.cube, "cube file")->required();
  r->add_option("--labels", run.labels, "label file")->required();
  r->add_option("--config", run.config, "key = value config file");
  r->add_option("--set", run.overrides, "override key=value (repeatable)");
  r->add_option("--ratio", run.ratio, "annotation ratio");
  r->add_option("--copies", run.copies, "perturbed copies per annotated sample");
  r->add_option("--seed", run.seed, "seed (default CABIN_SEED or 0)");
  r->add_option("--baseline", run.baseline, "'random' for the matched-budget random baseline");
  r->add_option("--sweep", run.sweep, "key=v1,v2,... or key=a..b");
  r->add_option("--jobs", run.jobs, "concurrent experiments in a sweep")->capture_default_str();
  r->add_option("--out", run.out, "output directory")->required();

  std::string pred_path, eval_labels, eval_out;
  auto* e = app.add_subcommand("eval", "score a prediction label file");
  e->add_option("--pred", pred_path, "predicted label file")->required();
  e->add_option("--labels", eval_labels, "ground-truth label file")->required();
  e->add_option("--out", eval_out, "optional directory for metrics.json");

  std::string map_labels, map_out;
  auto* m = app.add_subcommand("map", "render a label file as PPM");
  m->add_option("--labels", map_labels, "label file")->required();
  m->add_option("--out", map_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (g->parsed()) return cmd_gen(gen);
    if (r->parsed()) return cmd_run(run);
    if (e->parsed()) return cmd_eval(pred_path, eval_labels, eval_out);
    if (m->parsed()) return cmd_map(map_labels, map_out);
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << "\n";
    return 1;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
  return 1;
}
