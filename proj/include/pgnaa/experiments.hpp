#pragma once

// Experiment harness: configured training runs, count-rate sweeps, confusion
// matrices, live-time accounting and sampler benchmarks.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "pgnaa/error.hpp"
#include "pgnaa/library.hpp"
#include "pgnaa/nn.hpp"
#include "pgnaa/ranges.hpp"
#include "pgnaa/rng.hpp"
#include "pgnaa/sampling.hpp"
#include "pgnaa/spectra.hpp"

namespace pgnaa {

// ---------------------------------------------------------------------------
// Confusion matrix

struct ConfusionMatrix {
  std::size_t n_classes = 0;
  std::vector<std::size_t> tallies;  // row-major, actual x predicted
  std::vector<double> values;        // row-normalized tallies

  double at(std::size_t actual, std::size_t predicted) const { return values[actual * n_classes + predicted]; }
  std::size_t tally(std::size_t actual, std::size_t predicted) const { return tallies[actual * n_classes + predicted]; }
  std::size_t row_total(std::size_t actual) const {
    std::size_t n = 0;
    for (std::size_t c = 0; c < n_classes; ++c) n += tally(actual, c);
    return n;
  }
};

inline ConfusionMatrix confusion_matrix(std::span<const std::size_t> predictions, std::span<const std::size_t> labels,
                                        std::size_t n_classes) {
  if (predictions.size() != labels.size()) {
    throw ValidationError("confusion matrix: " + std::to_string(predictions.size()) + " predictions for " +
                          std::to_string(labels.size()) + " labels");
  }
  if (n_classes == 0) throw ValidationError("confusion matrix needs at least one class");
  ConfusionMatrix cm;
  cm.n_classes = n_classes;
  cm.tallies.assign(n_classes * n_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= n_classes || predictions[i] >= n_classes) {
      throw IndexError("confusion matrix: class index out of range at item " + std::to_string(i));
    }
    ++cm.tallies[labels[i] * n_classes + predictions[i]];
  }
  cm.values.assign(n_classes * n_classes, 0.0);
  for (std::size_t r = 0; r < n_classes; ++r) {
    const std::size_t total = cm.row_total(r);
    if (total == 0) continue;
    for (std::size_t c = 0; c < n_classes; ++c) {
      cm.values[r * n_classes + c] = static_cast<double>(cm.tally(r, c)) / static_cast<double>(total);
    }
  }
  return cm;
}

// Accuracy recomputed from the matrix: diagonal weighted by class counts.
inline double accuracy_from_confusion(const ConfusionMatrix& cm) {
  double hit = 0.0, total = 0.0;
  for (std::size_t r = 0; r < cm.n_classes; ++r) {
    const auto n = static_cast<double>(cm.row_total(r));
    hit += cm.at(r, r) * n;
    total += n;
  }
  return total > 0.0 ? hit / total : 0.0;
}

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

inline std::string fmt_g(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace detail

inline void write_confusion_csv(std::ostream& out, const ConfusionMatrix& cm, const std::vector<std::string>& labels) {
  if (labels.size() != cm.n_classes) throw ShapeError("confusion matrix and label list differ in size");
  out << "actual";
  for (const auto& l : labels) out << ',' << detail::csv_field(l);
  out << '\n';
  for (std::size_t r = 0; r < cm.n_classes; ++r) {
    out << detail::csv_field(labels[r]);
    for (std::size_t c = 0; c < cm.n_classes; ++c) out << ',' << detail::fmt_g(cm.at(r, c));
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Configuration

// Library reference inside a config: a manifest path, an inline manifest, or
// a synthetic preset.
//   {"preset": "well_separated", "species": 12, "channels": 16384, "design_seed": 1, "seed": 3}
//   {"preset": "same_element", "family": "aluminium", "spread": 0.1, "channels": 16384}
inline LibraryManifest library_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  if (j.is_string()) {
    auto p = std::filesystem::path(j.get<std::string>());
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    return LibraryManifest::load(p.string());
  }
  if (!j.is_object()) throw ValidationError("'library' must be a path or an object");
  if (!j.contains("preset")) return LibraryManifest::from_json(j, base_dir);

  const auto preset = j.at("preset").get<std::string>();
  const auto channels = j.value("channels", kDetectorChannels);
  const auto cal = ChannelCalibration::detector_default().rebinned(channels);
  const auto seed = j.value("seed", std::uint64_t{3});
  const double intensity = j.value("intensity", kDefaultLongMeasurementCounts);
  if (preset == "well_separated") {
    const auto n = j.value("species", std::size_t{12});
    return synthetic_manifest(well_separated_species(n, j.value("design_seed", std::uint64_t{1})), cal, seed,
                              intensity);
  }
  if (preset == "same_element") {
    const auto family = j.value("family", std::string("aluminium"));
    if (family != "aluminium" && family != "copper") throw ValidationError("unknown family '" + family + "'");
    return synthetic_manifest(
        same_element_species(family == "aluminium" ? SameElementFamily::aluminium : SameElementFamily::copper,
                             j.value("design_seed", std::uint64_t{2}), j.value("spread", 0.10)),
        cal, seed, intensity);
  }
  throw ValidationError("unknown library preset '" + preset + "'");
}

inline constexpr std::size_t kDefaultTestPerClass = 1000;

// Defaults follow the Experiment-I set-up: Adam, lr 0.01, batch 128, 150
// epochs, k = 19650, channels 0-103 and 8000-16383 discarded.
struct ExperimentConfig {
  LibraryManifest library;
  SampleBudget budget{19650};
  double rate_cps = DetectorRate::mixed_materials().counts_per_second();
  ModelConfig model;
  TrainOptions train;
  DiscardRanges discard;
  std::size_t test_per_class = kDefaultTestPerClass;
  std::uint64_t seed = 0;

  std::size_t input_width() const { return discard.kept_width(library.calibration.n_channels); }
  bool degenerate() const { return library.entries.size() == 1; }

  void validate() const {
    if (library.entries.empty()) throw ValidationError("config: library lists no species");
    if (budget.k == 0) throw ValidationError("config: budget must be >= 1");
    static_cast<void>(DetectorRate{rate_cps});
    discard.check_within(library.calibration.n_channels);
    if (input_width() == 0) throw ValidationError("config: discard ranges remove every channel");
    validate_training();
    // A single species leaves nothing to classify; no model is built for it.
    if (degenerate()) return;
    model.validate();
    if (model.input_width != input_width()) {
      throw ValidationError("config: model input width " + std::to_string(model.input_width) +
                            " != kept channel count " + std::to_string(input_width()));
    }
    if (model.n_classes != library.entries.size()) {
      throw ValidationError("config: model has " + std::to_string(model.n_classes) + " classes, library has " +
                            std::to_string(library.entries.size()) + " species");
    }
  }

  void validate_training() const {
    if (train.batch_size == 0) throw ValidationError("config: batch_size must be >= 1");
    if (!(train.learning_rate > 0.0) || !std::isfinite(train.learning_rate)) {
      throw ValidationError("config: learning_rate must be positive");
    }
    if (train.target_accuracy && !(*train.target_accuracy >= 0.0 && *train.target_accuracy <= 1.0)) {
      throw ValidationError("config: target_accuracy must be in [0, 1]");
    }
    if (train.validation_per_class == 0) throw ValidationError("config: validation_per_class must be >= 1");
    if (test_per_class == 0) throw ValidationError("config: test_per_class must be >= 1");
  }

  // Rebuilds the default model for the current library and discard set.
  void reset_model(std::size_t n_blocks = 6, std::size_t filters = 32, std::size_t kernel_size = 9) {
    model = ModelConfig::desk_default(input_width(), library.entries.size(), seed, n_blocks, filters, kernel_size);
  }

  static ExperimentConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
    ExperimentConfig c;
    try {
      c.library = j.contains("library") ? library_from_json(j.at("library"), base_dir)
                                        : library_from_json({{"preset", "well_separated"}}, base_dir);
      c.seed = j.value("seed", std::uint64_t{0});
      c.budget.k = j.value("budget", std::uint64_t{19650});
      c.rate_cps = j.value("rate_cps", c.rate_cps);
      if (j.value("optimizer", std::string("adam")) != "adam") throw ValidationError("config: only 'adam' is supported");
      c.train.learning_rate = j.value("learning_rate", c.train.learning_rate);
      c.train.batch_size = j.value("batch_size", c.train.batch_size);
      c.train.epochs = j.value("epochs", c.train.epochs);
      c.train.steps_per_epoch = j.value("steps_per_epoch", c.train.steps_per_epoch);
      c.train.validation_per_class = j.value("validation_per_class", c.train.validation_per_class);
      if (j.contains("target_accuracy")) {
        c.train.target_accuracy =
            j.at("target_accuracy").is_null() ? std::nullopt : std::optional<double>(j.at("target_accuracy").get<double>());
      }
      c.test_per_class = j.value("test_per_class", c.test_per_class);

      const auto n = c.library.calibration.n_channels;
      const auto d = j.value("discard", nlohmann::json("table1"));
      if (d.is_string() && d.get<std::string>() == "table1") {
        c.discard = DiscardRanges::mixed_materials_default().rescaled(kDetectorChannels, n);
      } else if (d.is_string() && (d.get<std::string>() == "none" || d.get<std::string>().empty())) {
        c.discard = {};
      } else if (d.is_string()) {
        c.discard = DiscardRanges::parse(d.get<std::string>());
      } else {
        throw ValidationError("config: 'discard' must be \"table1\", \"none\" or \"lo-hi,...\"");
      }

      const auto m = j.value("model", nlohmann::json::object());
      if (c.degenerate()) {
        // No model is trained for a single species.
      } else if (m.contains("blocks")) {
        auto mj = m;
        mj["input_width"] = c.input_width();
        mj["n_classes"] = c.library.entries.size();
        if (!mj.contains("seed")) mj["seed"] = c.seed;
        c.model = model_config_from_json(mj);
      } else {
        c.model = ModelConfig::desk_default(c.input_width(), c.library.entries.size(), m.value("seed", c.seed),
                                            m.value("n_blocks", std::size_t{6}), m.value("filters", std::size_t{32}),
                                            m.value("kernel_size", std::size_t{9}));
      }
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
  }

  static ExperimentConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("config " + path + " is not valid JSON: " + e.what());
    }
    return from_json(j, std::filesystem::path(path).parent_path());
  }

  // Fully resolved snapshot; from_json(to_json()) reproduces the config.
  nlohmann::json to_json() const {
    auto m = pgnaa::to_json(model);
    m.erase("input_width");
    m.erase("n_classes");
    nlohmann::json j = {{"library", library.to_json()},
                        {"seed", seed},
                        {"budget", budget.k},
                        {"rate_cps", rate_cps},
                        {"optimizer", "adam"},
                        {"learning_rate", train.learning_rate},
                        {"batch_size", train.batch_size},
                        {"epochs", train.epochs},
                        {"steps_per_epoch", train.steps_per_epoch},
                        {"validation_per_class", train.validation_per_class},
                        {"test_per_class", test_per_class},
                        {"discard", discard.empty() ? std::string("none") : discard.to_string()},
                        {"model", m}};
    j["target_accuracy"] = train.target_accuracy ? nlohmann::json(*train.target_accuracy) : nlohmann::json(nullptr);
    return j;
  }

  static ExperimentConfig table1_default() { return from_json(nlohmann::json::object()); }
};

// ---------------------------------------------------------------------------
// Runs

struct RunTimings {
  double sampling_seconds = 0.0;
  std::vector<double> epoch_seconds;
  double prediction_seconds = 0.0;
  double total_seconds = 0.0;

  double mean_epoch_seconds() const {
    if (epoch_seconds.empty()) return 0.0;
    double s = 0.0;
    for (double v : epoch_seconds) s += v;
    return s / static_cast<double>(epoch_seconds.size());
  }
};

struct ExperimentReport {
  std::vector<std::string> labels;
  SampleBudget budget;
  double rate_cps = 0.0;
  double live_time_seconds = 0.0;
  std::size_t input_width = 0;
  DiscardRanges discard;
  std::uint64_t seed = 0;
  bool degenerate = false;  // single species: nothing to classify
  double accuracy = 0.0;
  ConfusionMatrix confusion;
  std::vector<double> loss_curve;
  std::vector<double> validation_accuracy;
  std::optional<std::size_t> epochs_to_target;
  RunTimings timings;

  // Everything except wall-clock fields; byte-stable for a fixed config.
  nlohmann::json to_json() const {
    nlohmann::json matrix = nlohmann::json::array();
    nlohmann::json counts = nlohmann::json::array();
    for (std::size_t r = 0; r < confusion.n_classes; ++r) {
      nlohmann::json row = nlohmann::json::array();
      for (std::size_t c = 0; c < confusion.n_classes; ++c) row.push_back(confusion.at(r, c));
      matrix.push_back(row);
      counts.push_back(confusion.row_total(r));
    }
    nlohmann::json j = {{"labels", labels},
                        {"budget", budget.k},
                        {"rate_cps", rate_cps},
                        {"live_time_seconds", live_time_seconds},
                        {"input_width", input_width},
                        {"discard", discard.to_string()},
                        {"seed", seed},
                        {"degenerate", degenerate},
                        {"accuracy", accuracy},
                        {"class_counts", counts},
                        {"confusion", matrix},
                        {"epochs_run", loss_curve.size()},
                        {"loss_curve", loss_curve},
                        {"validation_accuracy", validation_accuracy}};
    j["epochs_to_target"] = epochs_to_target ? nlohmann::json(*epochs_to_target) : nlohmann::json(nullptr);
    return j;
  }

  nlohmann::json timings_json() const {
    return {{"sampling_seconds", timings.sampling_seconds},
            {"epoch_seconds", timings.epoch_seconds},
            {"mean_epoch_seconds", timings.mean_epoch_seconds()},
            {"prediction_seconds", timings.prediction_seconds},
            {"total_seconds", timings.total_seconds}};
  }
};

struct RunOutput {
  ExperimentReport report;
  std::optional<Checkpoint<float>> checkpoint;  // absent for a single-species library
};

// Stream 0 of the config seed drives training, stream 1 the test set.
inline RunOutput run_experiment(const ExperimentConfig& config) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  config.validate();
  const SpeciesLibrary library = config.library.build();

  ExperimentReport rep;
  rep.labels = library.labels();
  rep.budget = config.budget;
  rep.rate_cps = config.rate_cps;
  rep.live_time_seconds = live_time(config.budget.k, DetectorRate(config.rate_cps));
  rep.input_width = config.model.input_width;
  rep.discard = config.discard;
  rep.seed = config.seed;
  rep.degenerate = library.size() == 1;

  Rng test_rng = Rng::derive(config.seed, 1);
  const BatchGenerator gen(library, config.discard);
  RunOutput out;
  std::vector<std::size_t> predicted;
  Batch test;
  double test_sampling = 0.0;
  auto draw_test = [&] {
    const auto s0 = clock::now();
    test = gen.generate_balanced(config.budget, config.test_per_class, test_rng);
    test_sampling = std::chrono::duration<double>(clock::now() - s0).count();
  };

  if (rep.degenerate) {
    draw_test();
    predicted.assign(test.rows, 0);
  } else {
    Rng train_rng = Rng::derive(config.seed, 0);
    auto res = train<float>(config.model, library, config.budget, config.train, config.discard, train_rng);
    draw_test();
    const auto p0 = clock::now();
    predicted = predict_batch(res.params, config.model, res.scaler, test);
    rep.timings.prediction_seconds = std::chrono::duration<double>(clock::now() - p0).count();
    rep.loss_curve = res.loss_curve;
    rep.validation_accuracy = res.validation_accuracy;
    rep.epochs_to_target = res.epochs_to_target;
    rep.timings.sampling_seconds = res.sampling_seconds;
    rep.timings.epoch_seconds = res.epoch_seconds;

    Checkpoint<float> ck;
    ck.config = config.model;
    ck.scaler = std::move(res.scaler);
    ck.params = std::move(res.params);
    ck.optimizer = std::move(res.optimizer);
    ck.metadata = {{"labels", rep.labels},
                   {"budget", config.budget.k},
                   {"discard", config.discard.to_string()},
                   {"n_channels", library.n_channels()},
                   {"seed", config.seed}};
    out.checkpoint = std::move(ck);
  }
  rep.timings.sampling_seconds += test_sampling;
  rep.confusion = confusion_matrix(predicted, test.labels, library.size());
  rep.accuracy = accuracy_of(predicted, test.labels);
  rep.timings.total_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  out.report = std::move(rep);
  return out;
}

// Runs `work(i)` for i in [0, n) on up to `jobs` threads. Results must be
// written to per-index slots; the first exception is rethrown.
template <typename F>
void parallel_for(std::size_t n, std::size_t jobs, F&& work) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr failure;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < jobs; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        std::size_t i;
        {
          std::lock_guard lock(mu);
          if (next >= n || failure) return;
          i = next++;
        }
        try {
          work(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

inline const std::vector<std::uint64_t>& default_sweep_budgets() {
  static const std::vector<std::uint64_t> b = {20000, 50000, 100000, 200000, 500000};
  return b;
}

struct SweepResult {
  std::vector<RunOutput> runs;  // one per budget, in input order
};

// One run per budget with everything else identical.
inline SweepResult count_rate_sweep(const ExperimentConfig& config, const std::vector<std::uint64_t>& budgets,
                                    std::size_t jobs = 1) {
  if (budgets.size() < 2) throw ValidationError("a sweep needs at least two budgets");
  for (auto k : budgets) {
    if (k == 0) throw ValidationError("sweep budgets must be >= 1");
  }
  config.validate();
  SweepResult out;
  out.runs.resize(budgets.size());
  parallel_for(budgets.size(), jobs, [&](std::size_t i) {
    auto c = config;
    c.budget.k = budgets[i];
    out.runs[i] = run_experiment(c);
  });
  return out;
}

inline nlohmann::json sweep_to_json(const SweepResult& s) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : s.runs) {
    runs.push_back({{"budget", r.report.budget.k},
                    {"live_time_seconds", r.report.live_time_seconds},
                    {"accuracy", r.report.accuracy},
                    {"epochs_run", r.report.loss_curve.size()},
                    {"epochs_to_target", r.report.epochs_to_target ? nlohmann::json(*r.report.epochs_to_target)
                                                                   : nlohmann::json(nullptr)},
                    {"loss_curve", r.report.loss_curve}});
  }
  return {{"runs", runs}};
}

// ---------------------------------------------------------------------------
// Sampler benchmark

struct SamplerTiming {
  std::string method;
  std::size_t repetitions = 0;
  double median_seconds = 0.0;
  double p95_seconds = 0.0;
};

struct BenchmarkReport {
  SampleBudget budget;
  std::size_t n_channels = 0;
  std::vector<SamplerTiming> rows;
  nlohmann::json machine;

  const SamplerTiming& row(const std::string& method) const {
    for (const auto& r : rows) {
      if (r.method == method) return r;
    }
    throw ValidationError("no benchmark row for " + method);
  }

  nlohmann::json to_json() const {
    nlohmann::json r = nlohmann::json::array();
    for (const auto& t : rows) {
      r.push_back({{"method", t.method},
                   {"repetitions", t.repetitions},
                   {"median_seconds", t.median_seconds},
                   {"p95_seconds", t.p95_seconds}});
    }
    return {{"budget", budget.k}, {"n_channels", n_channels}, {"machine", machine}, {"rows", r}};
  }
};

inline nlohmann::json machine_descriptor() {
  std::string cpu = "unknown";
  std::ifstream info("/proc/cpuinfo");
  for (std::string line; std::getline(info, line);) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) cpu = line.substr(colon + 2);
      break;
    }
  }
  return {{"cpu", cpu},
          {"hardware_threads", std::thread::hardware_concurrency()},
#if defined(__VERSION__)
          {"compiler", __VERSION__},
#endif
          {"threads_used", 1}};
}

// Nearest-rank percentile of an unsorted sample.
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw ValidationError("percentile of an empty sample");
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

// Single-threaded per-draw wall-clock for each RSM. RSM-4 times include the
// RSM-1 draw that feeds the raster.
inline BenchmarkReport benchmark_samplers(const Spectrum& spectrum, SampleBudget budget, std::size_t repetitions,
                                          std::uint64_t seed = 0) {
  using clock = std::chrono::steady_clock;
  if (repetitions < 10) throw ValidationError("benchmark needs at least 10 repetitions");
  BenchmarkReport rep;
  rep.budget = budget;
  rep.n_channels = spectrum.size();
  rep.machine = machine_descriptor();
  Rng rng(seed);
  const double p = retain_fraction_for_budget(spectrum, budget);
  std::uint64_t sink = 0;

  auto time_method = [&](const std::string& name, auto&& draw) {
    draw();  // warm-up
    std::vector<double> t(repetitions);
    for (auto& v : t) {
      const auto a = clock::now();
      sink += draw();
      v = std::chrono::duration<double>(clock::now() - a).count();
    }
    rep.rows.push_back({name, repetitions, percentile(t, 0.5), percentile(t, 0.95)});
  };
  const auto& cal = spectrum.calibration();
  time_method("RSM-1", [&] { return rsm1_event_list(spectrum, budget, rng).energies.size(); });
  time_method("RSM-2", [&] { return static_cast<std::uint64_t>(rsm2_binomial_thinning(spectrum, p, rng).total()); });
  time_method("RSM-3", [&] {
    return static_cast<std::uint64_t>(rsm3_weighted_counts(spectrum, budget, rng, MultinomialPath::fast).total());
  });
  time_method("RSM-3-baseline", [&] {
    return static_cast<std::uint64_t>(rsm3_weighted_counts(spectrum, budget, rng, MultinomialPath::baseline).total());
  });
  time_method("RSM-4a", [&] {
    return rsm4_render(rsm1_event_list(spectrum, budget, rng), cal, kDefaultRasterSize, kDefaultRasterSize,
                       RasterMode::scatter)
        .pixels.size();
  });
  time_method("RSM-4b", [&] {
    return rsm4_render(rsm3_weighted_counts(spectrum, budget, rng), cal, kDefaultRasterSize, kDefaultRasterSize,
                       RasterMode::histogram)
        .pixels.size();
  });
  if (sink == 0xffffffffffffffffULL) rep.machine["sink"] = sink;  // keeps the draws observable
  return rep;
}

// ---------------------------------------------------------------------------
// Artifact writers

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace detail

inline std::string loss_curve_csv(const ExperimentReport& r) {
  std::string s = "epoch,loss,validation_accuracy\n";
  for (std::size_t e = 0; e < r.loss_curve.size(); ++e) {
    s += std::to_string(e + 1) + ',' + detail::fmt_g(r.loss_curve[e]) + ',' +
         (e < r.validation_accuracy.size() ? detail::fmt_g(r.validation_accuracy[e]) : std::string()) + '\n';
  }
  return s;
}

inline constexpr const char* kLossPlotScript =
    "set datafile separator ','\n"
    "set key autotitle columnhead\n"
    "set xlabel 'epoch'\n"
    "set ylabel 'cross-entropy'\n"
    "set y2label 'validation accuracy'\n"
    "set y2tics\n"
    "plot 'loss_curve.csv' using 1:2 with lines, '' using 1:3 axes x1y2 with lines\n";

// report.json, timings.json, loss_curve.csv, confusion.csv, plot_loss.gp.
inline void write_run_artifacts(const std::filesystem::path& dir, const ExperimentReport& r) {
  std::filesystem::create_directories(dir);
  detail::write_text(dir / "report.json", r.to_json().dump(2) + "\n");
  detail::write_text(dir / "timings.json", r.timings_json().dump(2) + "\n");
  detail::write_text(dir / "loss_curve.csv", loss_curve_csv(r));
  std::ostringstream cm;
  write_confusion_csv(cm, r.confusion, r.labels);
  detail::write_text(dir / "confusion.csv", cm.str());
  detail::write_text(dir / "plot_loss.gp", kLossPlotScript);
}

inline void write_sweep_artifacts(const std::filesystem::path& dir, const SweepResult& s) {
  std::filesystem::create_directories(dir);
  detail::write_text(dir / "sweep.json", sweep_to_json(s).dump(2) + "\n");
  std::string curves = "budget,epoch,loss\n";
  std::string plot = "set datafile separator ','\nset xlabel 'epoch'\nset ylabel 'cross-entropy'\nplot ";
  for (std::size_t i = 0; i < s.runs.size(); ++i) {
    const auto& r = s.runs[i].report;
    for (std::size_t e = 0; e < r.loss_curve.size(); ++e) {
      curves += std::to_string(r.budget.k) + ',' + std::to_string(e + 1) + ',' + detail::fmt_g(r.loss_curve[e]) + '\n';
    }
    const auto k = std::to_string(r.budget.k);
    plot += (i ? ", " : "") + std::string("'sweep_curves.csv' using 2:($1==") + k + "?$3:1/0) with lines title 'k=" +
            k + "'";
  }
  detail::write_text(dir / "sweep_curves.csv", curves);
  detail::write_text(dir / "plot_sweep.gp", plot + "\n");
}

inline std::string format_report_summary(const nlohmann::json& report) {
  std::ostringstream out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "budget k = %llu counts, live time %.3f s at %.2f c/s\n",
                static_cast<unsigned long long>(report.at("budget").get<std::uint64_t>()),
                report.at("live_time_seconds").get<double>(), report.at("rate_cps").get<double>());
  out << buf;
  out << "input width " << report.at("input_width").get<std::size_t>() << " channels";
  const auto discard = report.at("discard").get<std::string>();
  out << (discard.empty() ? std::string(" (nothing discarded)") : " (discarded " + discard + ")") << "\n";
  std::snprintf(buf, sizeof buf, "test accuracy %.4f after %zu epochs\n", report.at("accuracy").get<double>(),
                report.at("epochs_run").get<std::size_t>());
  out << buf;
  if (report.at("degenerate").get<bool>()) out << "note: single-species library, accuracy is trivially 1\n";
  const auto labels = report.at("labels").get<std::vector<std::string>>();
  const auto& cm = report.at("confusion");
  for (std::size_t r = 0; r < labels.size(); ++r) {
    std::snprintf(buf, sizeof buf, "  %-28s %.3f\n", labels[r].c_str(), cm.at(r).at(r).get<double>());
    out << buf;
  }
  return out.str();
}

}  // namespace pgnaa
