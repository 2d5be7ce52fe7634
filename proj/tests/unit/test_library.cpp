#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "pgnaa/library.hpp"

using namespace pgnaa;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("pgnaa_lib_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Library, RejectsMixedCalibrationsAndDuplicateLabels) {
  const ChannelCalibration a{4, 1.0, 0.0}, b{4, 2.0, 0.0};
  EXPECT_THROW(SpeciesLibrary({Spectrum(a, {1, 1, 1, 1}, "x"), Spectrum(b, {1, 1, 1, 1}, "y")}), ValidationError);
  EXPECT_THROW(SpeciesLibrary({Spectrum(a, {1, 1, 1, 1}, "x"), Spectrum(a, {1, 1, 1, 1}, "x")}), ValidationError);
  const SpeciesLibrary ok({Spectrum(a, {1, 1, 1, 1}, "x"), Spectrum(a, {2, 1, 1, 1}, "y")});
  EXPECT_EQ(ok.labels(), (std::vector<std::string>{"x", "y"}));
  EXPECT_EQ(ok.n_channels(), 4u);
  EXPECT_THROW(SpeciesLibrary().calibration(), ValidationError);
}

TEST(Library, WellSeparatedPresetIsDeterministicAndInRange) {
  const auto a = well_separated_species(12, 1), b = well_separated_species(12, 1);
  ASSERT_EQ(a.size(), 12u);
  const auto cal = ChannelCalibration::detector_default();
  std::set<std::string> names;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NO_THROW(a[i].validate(cal));
    EXPECT_EQ(species_spec_to_json(a[i]), species_spec_to_json(b[i]));
    names.insert(a[i].name);
  }
  EXPECT_EQ(names.size(), 12u);
  EXPECT_EQ(a[9].name, "Soil HgS inhomogeneous");
  EXPECT_THROW(well_separated_species(0), ValidationError);
}

TEST(Library, SameElementSpeciesShareLinesAndDifferByBoundedAmounts) {
  for (auto family : {SameElementFamily::aluminium, SameElementFamily::copper}) {
    const double spread = 0.10;
    const auto sp = same_element_species(family, 2, spread);
    ASSERT_EQ(sp.size(), family == SameElementFamily::aluminium ? 4u : 5u);
    for (std::size_t p = 0; p < sp[0].peaks.size(); ++p) {
      for (std::size_t s = 1; s < sp.size(); ++s) {
        EXPECT_EQ(sp[s].peaks[p].center_kev, sp[0].peaks[p].center_kev);
        EXPECT_EQ(sp[s].peaks[p].sigma_kev, sp[0].peaks[p].sigma_kev);
      }
    }
    // Each amplitude deviates from the shared base by 2..10 percent.
    const std::vector<double> base = {1.0, 0.8, 1.2, 0.6, 0.9, 0.7};
    for (const auto& s : sp) {
      for (std::size_t p = 0; p < s.peaks.size(); ++p) {
        const double rel = std::abs(s.peaks[p].amplitude / base[p] - 1.0);
        EXPECT_GE(rel, 0.02 - 1e-12);
        EXPECT_LE(rel, 0.10 + 1e-12);
      }
    }
  }
  EXPECT_THROW(same_element_species(SameElementFamily::copper, 2, 0.0), ValidationError);
  EXPECT_THROW(same_element_species(SameElementFamily::copper, 2, 1.0), ValidationError);
}

TEST(Library, ManifestFromJsonBuildsSyntheticSpecies) {
  const auto j = nlohmann::json::parse(R"({
    "calibration": {"n_channels": 64, "gain": 10.0, "offset": 0.0},
    "seed": 5,
    "intensity": 1e5,
    "species": [
      {"label": "A", "synthetic": {"peaks": [{"center_kev": 100.0, "amplitude": 1.0, "sigma_kev": 8.0}]}},
      {"label": "B", "synthetic": {"background": {"level": 1.0, "decay_per_kev": 0.001}}}
    ]})");
  const auto m = LibraryManifest::from_json(j);
  const auto lib = m.build();
  ASSERT_EQ(lib.size(), 2u);
  EXPECT_EQ(lib[0].provenance(), Provenance::synthetic);
  EXPECT_EQ(lib.n_channels(), 64u);
  // Poisson realization of a 1e5 intensity.
  EXPECT_NEAR(static_cast<double>(lib[0].total_counts()), 1e5, 5.0 * std::sqrt(1e5));
  const auto again = LibraryManifest::from_json(m.to_json()).build();
  for (std::size_t i = 0; i < lib.size(); ++i) {
    EXPECT_TRUE(std::equal(lib[i].counts().begin(), lib[i].counts().end(), again[i].counts().begin()));
  }
}

TEST(Library, ManifestErrors) {
  auto from = [](const char* text) { return LibraryManifest::from_json(nlohmann::json::parse(text)); };
  EXPECT_THROW(from(R"({"species": 3})"), ValidationError);
  EXPECT_THROW(from(R"({"species": [{"csv": "a.csv"}]})"), ValidationError);
  EXPECT_THROW(from(R"({"species": [{"label": "a"}]})"), ValidationError);
  EXPECT_THROW(from(R"({"calibration": {"preset": "bogus"}, "species": []})"), ValidationError);
  EXPECT_THROW(from(R"({"species": []})").build(), ValidationError);
  EXPECT_THROW(LibraryManifest::load("/nonexistent/manifest.json"), IoError);
}

TEST(Library, MeasuredEntriesResolveRelativeToManifest) {
  const auto dir = temp_dir("measured");
  {
    std::ofstream(dir / "a.csv") << "Energy (keV),Counts\n1.3,1\n2.6,10\n3.9,2\n5.2,0\n";
    std::ofstream(dir / "m.json") << R"({"calibration": {"n_channels": 4, "gain": 1.3, "offset": 1.3},
                                         "species": [{"label": "toy", "csv": "a.csv"}]})";
  }
  const auto lib = LibraryManifest::load((dir / "m.json").string()).build();
  ASSERT_EQ(lib.size(), 1u);
  EXPECT_EQ(lib[0].label(), "toy");
  EXPECT_EQ(lib[0].total_counts(), 13);
}

TEST(Library, DetectorCalibrationPreset) {
  const auto cal = calibration_from_json(nlohmann::json::parse(R"({"preset": "detector", "n_channels": 2048})"));
  EXPECT_EQ(cal.n_channels, 2048u);
  EXPECT_NEAR(energy_of_channel(cal, 2048), 11552.48, 1e-9);
}
