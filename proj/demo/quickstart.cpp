// End-to-end walk through the library on a small synthetic problem:
// downsample, train, evaluate, then ask the CAM which channels to drop.

#include <cstdio>

#include "pgnaa/cam.hpp"
#include "pgnaa/experiments.hpp"

using namespace pgnaa;

int main() {
  // The worked toy spectrum: four channels, draw five events.
  const Spectrum toy(ChannelCalibration{4, 1.0, 0.0}, {1, 10, 2, 0}, "toy");
  Rng rng(7);
  std::printf("RSM-3 draws of k=5 from [1,10,2,0]:\n");
  for (int i = 0; i < 3; ++i) {
    const auto d = rsm3_weighted_counts(toy, {5}, rng);
    std::printf("  [%lld, %lld, %lld, %lld]\n", static_cast<long long>(d.counts[0]),
                static_cast<long long>(d.counts[1]), static_cast<long long>(d.counts[2]),
                static_cast<long long>(d.counts[3]));
  }

  // Six well-separated species on a 1024-channel grid.
  ExperimentConfig cfg;
  cfg.library = synthetic_manifest(well_separated_species(6), ChannelCalibration::detector_default().rebinned(1024), 3);
  cfg.discard = {};
  cfg.budget = {19650};
  cfg.train.epochs = 3;
  cfg.train.steps_per_epoch = 20;
  cfg.test_per_class = 100;
  cfg.seed = 11;
  cfg.reset_model(6, 16);

  const auto run = run_experiment(cfg);
  std::printf("\n%s", format_report_summary(run.report.to_json()).c_str());

  const auto library = cfg.library.build();
  Rng cam_rng(5);
  const auto data = BatchGenerator(library).generate_balanced(cfg.budget, 20, cam_rng);
  const auto imp = aggregate_importance(run.checkpoint->params, cfg.model, run.checkpoint->scaler, data);
  const auto sel = select_discard_ranges_for_fraction(imp.scores, 0.5, 32);
  std::printf("\nCAM suggests discarding %s (%.0f%% of channels)\n", sel.ranges.to_string().c_str(),
              100.0 * sel.fraction);
  return 0;
}
