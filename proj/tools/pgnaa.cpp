// pgnaa command-line tool.
//
// Exit codes: 0 success, 2 invalid config or arguments, 3 training diverged,
// 4 I/O failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pgnaa/cam.hpp"
#include "pgnaa/experiments.hpp"
#include "pgnaa/library.hpp"
#include "pgnaa/nn.hpp"
#include "pgnaa/sampling.hpp"
#include "pgnaa/spectra.hpp"
#include "run_manifest.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pgnaa;
using pgnaa::cli::RunManifest;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;
constexpr int kExitIo = 4;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t jobs = 1;
  std::optional<std::uint64_t> budget;
  std::optional<std::string> discard;
};

fs::path output_dir(const Options& o, const std::string& command) {
  if (!o.out.empty()) return o.out;
  const char* root = std::getenv("PGNAA_OUT");
  return fs::path(root && *root ? root : "runs") / command;
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(path + " is not valid JSON: " + e.what());
  }
}

fs::path base_dir_of(const std::string& path) { return fs::path(path).parent_path(); }

// Library spec from a file that is either a library spec or an experiment config.
LibraryManifest library_from_file(const std::string& path, RunManifest& manifest) {
  manifest.add_input(path);
  const json j = read_json(path);
  return library_from_json(j.contains("library") ? j.at("library") : j, base_dir_of(path));
}

ExperimentConfig experiment_from_options(const Options& o, RunManifest& manifest) {
  json j = json::object();
  if (!o.config.empty()) {
    manifest.add_input(o.config);
    j = read_json(o.config);
  }
  if (o.seed) j["seed"] = *o.seed;
  if (o.budget) j["budget"] = *o.budget;
  if (o.discard) j["discard"] = *o.discard;
  auto c = ExperimentConfig::from_json(j, o.config.empty() ? fs::path() : base_dir_of(o.config));
  for (const auto& e : c.library.entries) {
    if (!e.csv_path.empty()) manifest.add_input(e.csv_path);
  }
  manifest.set_config(c.to_json());
  return c;
}

std::string file_stem_for(std::size_t i, const std::string& label) {
  std::string s;
  for (char ch : label) s += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '-') ? ch : '_';
  char idx[16];
  std::snprintf(idx, sizeof idx, "%02zu_", i);
  return idx + s;
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

void write_pgm(const fs::path& path, const Raster& r) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << r.width << ' ' << r.height << "\n255\n";
  for (auto p : r.pixels) out.put(static_cast<char>(p ? 255 : 0));
  if (!out) throw IoError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------

int cmd_synth(const Options& o) {
  if (o.config.empty()) throw ValidationError("synth needs --config <library spec>");
  const auto dir = output_dir(o, "synth");
  RunManifest manifest(dir, "synth", o.seed.value_or(0));
  auto lib_manifest = library_from_file(o.config, manifest);
  if (o.seed) lib_manifest.seed = *o.seed;
  manifest.set_config(lib_manifest.to_json());
  manifest.begin();

  const auto library = lib_manifest.build();
  json species = json::array();
  for (std::size_t i = 0; i < library.size(); ++i) {
    const auto name = file_stem_for(i, library[i].label()) + ".csv";
    write_spectrum_csv((dir / name).string(), library[i]);
    species.push_back({{"label", library[i].label()}, {"csv", name}});
    manifest.add_output(name);
  }
  json cal;
  to_json(cal, library.calibration());
  write_text_file(dir / "library.json", json{{"calibration", cal}, {"species", species}}.dump(2) + "\n");
  manifest.add_output("library.json");
  manifest.finish();
  std::cout << "wrote " << library.size() << " spectra to " << dir.string() << "\n";
  return 0;
}

int cmd_sample(const Options& o, const std::string& method, std::size_t count) {
  if (o.config.empty()) throw ValidationError("sample needs --config <library spec>");
  const auto dir = output_dir(o, "sample");
  const std::uint64_t seed = o.seed.value_or(0);
  RunManifest manifest(dir, "sample", seed);
  const auto lib_manifest = library_from_file(o.config, manifest);
  const SampleBudget budget{o.budget.value_or(19650)};
  const auto discard = o.discard ? DiscardRanges::parse(*o.discard) : DiscardRanges{};
  manifest.set_config({{"library", lib_manifest.to_json()},
                       {"budget", budget.k},
                       {"method", method},
                       {"count", count},
                       {"discard", discard.to_string()}});
  manifest.begin();
  const auto library = lib_manifest.build();
  Rng rng(seed);

  if (method == "rsm3") {
    const BatchGenerator gen(library, discard);
    const auto batch = gen.generate(budget, count, rng);
    write_batch_dump(dir, "samples", batch, BatchDumpInfo{seed, discard});
    manifest.add_output("samples.bin");
    manifest.add_output("samples.json");
  } else {
    if (!discard.empty()) throw ValidationError("--discard applies to rsm3 batches only");
    std::string events = "sample,label,energy_keV\n";
    for (std::size_t i = 0; i < count; ++i) {
      const Spectrum& s = library[i % library.size()];
      char name[64];
      if (method == "rsm1") {
        const auto ev = rsm1_event_list(s, budget, rng);
        char buf[64];
        for (double e : ev.energies) {
          std::snprintf(buf, sizeof buf, ",%.4f\n", e);
          events += std::to_string(i) + ',' + detail::csv_field(s.label()) + buf;
        }
      } else if (method == "rsm2") {
        const auto d = rsm2_binomial_thinning(s, retain_fraction_for_budget(s, budget), rng);
        std::snprintf(name, sizeof name, "sample_%03zu.csv", i);
        write_spectrum_csv((dir / name).string(), Spectrum(s.calibration(), d.counts, s.label()));
        manifest.add_output(name);
      } else if (method == "rsm4a" || method == "rsm4b") {
        const auto r = method == "rsm4a"
                           ? rsm4_render(rsm1_event_list(s, budget, rng), s.calibration(), kDefaultRasterSize,
                                         kDefaultRasterSize, RasterMode::scatter)
                           : rsm4_render(rsm3_weighted_counts(s, budget, rng), s.calibration(), kDefaultRasterSize,
                                         kDefaultRasterSize, RasterMode::histogram);
        std::snprintf(name, sizeof name, "sample_%03zu.pgm", i);
        write_pgm(dir / name, r);
        manifest.add_output(name);
      } else {
        throw ValidationError("unknown method '" + method + "' (rsm1, rsm2, rsm3, rsm4a, rsm4b)");
      }
    }
    if (method == "rsm1") {
      write_text_file(dir / "events.csv", events);
      manifest.add_output("events.csv");
    }
  }
  manifest.finish();
  std::cout << "wrote " << count << ' ' << method << " samples (k=" << budget.k << ") to " << dir.string() << "\n";
  return 0;
}

void write_run(const fs::path& dir, const RunOutput& run, RunManifest& manifest, const std::string& prefix) {
  write_run_artifacts(dir, run.report);
  for (const char* f : {"report.json", "timings.json", "loss_curve.csv", "confusion.csv", "plot_loss.gp"}) {
    manifest.add_output(prefix + f);
  }
  if (run.checkpoint) {
    save_checkpoint((dir / "model.ckpt").string(), *run.checkpoint);
    manifest.add_output(prefix + "model.ckpt");
  }
}

int cmd_train(const Options& o) {
  const auto dir = output_dir(o, "train");
  RunManifest manifest(dir, "train", o.seed.value_or(0));
  const auto config = experiment_from_options(o, manifest);
  manifest.begin();
  write_text_file(dir / "config.json", config.to_json().dump(2) + "\n");
  manifest.add_output("config.json");
  try {
    const auto run = run_experiment(config);
    write_run(dir, run, manifest, "");
    manifest.finish();
    std::cout << format_report_summary(run.report.to_json());
  } catch (const DivergenceError&) {
    manifest.finish("diverged");
    throw;
  }
  return 0;
}

std::vector<std::uint64_t> parse_budgets(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      out.push_back(std::stoull(item));
    } catch (const std::logic_error&) {
      throw ValidationError("budget '" + item + "' is not an integer");
    }
  }
  return out;
}

int cmd_sweep(const Options& o, const std::string& budgets_text) {
  const auto dir = output_dir(o, "sweep");
  RunManifest manifest(dir, "sweep", o.seed.value_or(0));
  const auto config = experiment_from_options(o, manifest);
  const auto budgets = budgets_text.empty() ? default_sweep_budgets() : parse_budgets(budgets_text);
  auto snapshot = config.to_json();
  snapshot["budgets"] = budgets;
  manifest.set_config(snapshot);
  manifest.begin();
  try {
    const auto sweep = count_rate_sweep(config, budgets, o.jobs);
    for (const auto& run : sweep.runs) {
      const auto sub = "k" + std::to_string(run.report.budget.k);
      write_run(dir / sub, run, manifest, sub + "/");
    }
    write_sweep_artifacts(dir, sweep);
    for (const char* f : {"sweep.json", "sweep_curves.csv", "plot_sweep.gp"}) manifest.add_output(f);
    manifest.finish();
    for (const auto& run : sweep.runs) {
      std::printf("k=%-8llu live %.3f s  accuracy %.4f  epochs %zu\n",
                  static_cast<unsigned long long>(run.report.budget.k), run.report.live_time_seconds,
                  run.report.accuracy, run.report.loss_curve.size());
    }
  } catch (const DivergenceError&) {
    manifest.finish("diverged");
    throw;
  }
  return 0;
}

struct CamOptions {
  std::string checkpoint;
  std::size_t per_class = 50;
  double threshold = 0.05;
  std::size_t min_run = 256;
  std::optional<double> fraction;
};

int cmd_cam(const Options& o, const CamOptions& co) {
  if (co.checkpoint.empty() || o.config.empty()) throw ValidationError("cam needs --checkpoint and --config");
  const auto dir = output_dir(o, "cam");
  const std::uint64_t seed = o.seed.value_or(0);
  RunManifest manifest(dir, "cam", seed);
  manifest.add_input(co.checkpoint);
  const auto ck = load_checkpoint<float>(co.checkpoint);
  const auto lib_manifest = library_from_file(o.config, manifest);
  const auto trained_discard = DiscardRanges::parse(ck.metadata.value("discard", std::string()));
  const SampleBudget budget{o.budget.value_or(ck.metadata.value("budget", std::uint64_t{19650}))};
  manifest.set_config({{"library", lib_manifest.to_json()},
                       {"budget", budget.k},
                       {"per_class", co.per_class},
                       {"threshold", co.threshold},
                       {"min_run", co.min_run},
                       {"fraction", co.fraction ? json(*co.fraction) : json(nullptr)}});
  manifest.begin();

  const auto library = lib_manifest.build();
  if (library.size() != ck.config.n_classes) throw ValidationError("library and checkpoint differ in class count");
  const BatchGenerator gen(library, trained_discard);
  if (gen.width() != ck.config.input_width) throw ValidationError("library width does not match the checkpoint");
  Rng rng = Rng::derive(seed, 2);
  const auto data = gen.generate_balanced(budget, co.per_class, rng);
  const auto reduced = aggregate_importance(ck.params, ck.config, ck.scaler, data);
  const auto full = expand_importance(reduced, library.n_channels(), trained_discard);

  DiscardRanges ranges;
  double threshold = co.threshold;
  if (co.fraction) {
    const auto sel = select_discard_ranges_for_fraction(full.scores, *co.fraction, co.min_run);
    ranges = sel.ranges;
    threshold = sel.threshold;
  } else {
    ranges = select_discard_ranges(full, co.threshold, co.min_run);
  }
  write_importance_csv((dir / "importance.csv").string(), full, library.calibration());
  write_ranges_csv((dir / "ranges.csv").string(), ranges);
  const auto top = static_cast<std::size_t>(
      std::max_element(full.scores.begin(), full.scores.end()) - full.scores.begin());
  const json summary = {{"threshold", threshold},
                        {"min_run", co.min_run},
                        {"discard", ranges.to_string()},
                        {"discarded_channels", ranges.discarded()},
                        {"discarded_fraction",
                         static_cast<double>(ranges.discarded()) / static_cast<double>(library.n_channels())},
                        {"argmax_channel", top},
                        {"argmax_energy_keV", energy_of_channel(library.calibration(), top)}};
  write_text_file(dir / "cam.json", summary.dump(2) + "\n");
  for (const char* f : {"importance.csv", "ranges.csv", "cam.json"}) manifest.add_output(f);
  manifest.finish();
  std::cout << "most important channel " << top << " (" << summary["argmax_energy_keV"].get<double>()
            << " keV); discard " << (ranges.empty() ? std::string("nothing") : ranges.to_string()) << "\n";
  return 0;
}

int cmd_bench(const Options& o, std::size_t reps, std::size_t species) {
  if (o.config.empty()) throw ValidationError("bench needs --config <library spec>");
  const auto dir = output_dir(o, "bench");
  RunManifest manifest(dir, "bench", o.seed.value_or(0));
  const auto lib_manifest = library_from_file(o.config, manifest);
  const SampleBudget budget{o.budget.value_or(500000)};
  manifest.set_config({{"library", lib_manifest.to_json()}, {"budget", budget.k}, {"repetitions", reps}});
  manifest.begin();
  const auto library = lib_manifest.build();
  if (species >= library.size()) throw ValidationError("--species index out of range");
  const auto rep = benchmark_samplers(library[species], budget, reps, o.seed.value_or(0));
  write_text_file(dir / "bench.json", rep.to_json().dump(2) + "\n");
  manifest.add_output("bench.json");
  manifest.finish();
  std::printf("%-16s %12s %12s   (k=%llu, %zu channels)\n", "method", "median [ms]", "p95 [ms]",
              static_cast<unsigned long long>(budget.k), rep.n_channels);
  for (const auto& r : rep.rows) {
    std::printf("%-16s %12.3f %12.3f\n", r.method.c_str(), r.median_seconds * 1e3, r.p95_seconds * 1e3);
  }
  return 0;
}

int cmd_report(const std::string& run_dir) {
  const fs::path dir(run_dir);
  if (fs::exists(dir / "report.json")) {
    std::cout << format_report_summary(read_json((dir / "report.json").string()));
    if (fs::exists(dir / "timings.json")) {
      const auto t = read_json((dir / "timings.json").string());
      std::printf("mean epoch %.3f s, sampling %.3f s, prediction %.3f s, total %.3f s\n",
                  t.at("mean_epoch_seconds").get<double>(), t.at("sampling_seconds").get<double>(),
                  t.at("prediction_seconds").get<double>(), t.at("total_seconds").get<double>());
    }
    return 0;
  }
  if (fs::exists(dir / "sweep.json")) {
    const auto s = read_json((dir / "sweep.json").string());
    for (const auto& r : s.at("runs")) {
      std::printf("k=%-8llu live %.3f s  accuracy %.4f  epochs %zu\n",
                  static_cast<unsigned long long>(r.at("budget").get<std::uint64_t>()),
                  r.at("live_time_seconds").get<double>(), r.at("accuracy").get<double>(),
                  r.at("epochs_run").get<std::size_t>());
    }
    return 0;
  }
  throw IoError(run_dir + " holds neither report.json nor sweep.json");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PGNAA spectrum classification laboratory"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* c, bool budget, bool discard) {
    c->add_option("--config", o.config, "JSON config or library spec");
    c->add_option("--seed", o.seed, "root seed (overrides the config)");
    c->add_option("--out", o.out, "output directory (default $PGNAA_OUT/<command> or runs/<command>)");
    if (budget) c->add_option("--budget", o.budget, "counts per short measurement (k)");
    if (discard) c->add_option("--discard", o.discard, "channel ranges to drop, e.g. 0-103,8000-16383 or none");
  };

  auto* synth = app.add_subcommand("synth", "write one spectrum CSV per species of a library spec");
  add_common(synth, false, false);

  std::string method = "rsm3";
  std::size_t count = 8;
  auto* sample = app.add_subcommand("sample", "draw short measurements from a library");
  add_common(sample, true, true);
  sample->add_option("--method", method, "rsm1, rsm2, rsm3, rsm4a or rsm4b")->capture_default_str();
  sample->add_option("--count", count, "number of samples")->capture_default_str();

  auto* train = app.add_subcommand("train", "train and evaluate one classifier");
  add_common(train, true, true);

  std::string budgets;
  auto* sweep = app.add_subcommand("sweep", "one training run per budget");
  add_common(sweep, false, true);
  sweep->add_option("--budgets", budgets, "comma-separated budgets (default 20000,50000,100000,200000,500000)");
  sweep->add_option("--jobs", o.jobs, "parallel runs")->capture_default_str();

  CamOptions co;
  auto* cam = app.add_subcommand("cam", "channel importance and discard ranges from a checkpoint");
  add_common(cam, true, false);
  cam->add_option("--checkpoint", co.checkpoint, "model.ckpt from train");
  cam->add_option("--per-class", co.per_class, "samples per class")->capture_default_str();
  cam->add_option("--threshold", co.threshold, "importance threshold")->capture_default_str();
  cam->add_option("--min-run", co.min_run, "shortest discard run in channels")->capture_default_str();
  cam->add_option("--fraction", co.fraction, "pick the threshold that discards at least this fraction");

  std::size_t reps = 20, species = 0;
  auto* bench = app.add_subcommand("bench", "time every sampler on one library spectrum");
  add_common(bench, true, false);
  bench->add_option("--reps", reps, "repetitions (>= 10)")->capture_default_str();
  bench->add_option("--species", species, "library entry to sample from")->capture_default_str();

  std::string run_dir;
  auto* report = app.add_subcommand("report", "print a summary of a finished run");
  report->add_option("run", run_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*synth) return cmd_synth(o);
    if (*sample) return cmd_sample(o, method, count);
    if (*train) return cmd_train(o);
    if (*sweep) return cmd_sweep(o, budgets);
    if (*cam) return cmd_cam(o, co);
    if (*bench) return cmd_bench(o, reps, species);
    if (*report) return cmd_report(run_dir);
  } catch (const DivergenceError& e) {
    std::cerr << "error: training diverged: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}
