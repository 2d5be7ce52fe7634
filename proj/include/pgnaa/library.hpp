#pragma once

// Species libraries: one full spectrum per class, loaded from a JSON manifest
// that lists either CSV files or synthetic species definitions.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pgnaa/error.hpp"
#include "pgnaa/rng.hpp"
#include "pgnaa/spectra.hpp"

namespace pgnaa {

// Ordered set of labelled spectra sharing one calibration. Class index == position.
class SpeciesLibrary {
 public:
  SpeciesLibrary() = default;

  explicit SpeciesLibrary(std::vector<Spectrum> spectra) : spectra_(std::move(spectra)) {
    std::set<std::string> labels;
    for (const auto& s : spectra_) {
      if (!(s.calibration() == spectra_.front().calibration())) {
        throw ValidationError("species '" + s.label() + "' uses a different calibration");
      }
      if (!labels.insert(s.label()).second) {
        throw ValidationError("duplicate species label '" + s.label() + "'");
      }
    }
  }

  std::size_t size() const noexcept { return spectra_.size(); }
  bool empty() const noexcept { return spectra_.empty(); }
  const Spectrum& operator[](std::size_t i) const { return spectra_.at(i); }
  auto begin() const { return spectra_.begin(); }
  auto end() const { return spectra_.end(); }

  const ChannelCalibration& calibration() const {
    if (spectra_.empty()) throw ValidationError("empty species library");
    return spectra_.front().calibration();
  }

  std::size_t n_channels() const { return calibration().n_channels; }

  std::vector<std::string> labels() const {
    std::vector<std::string> out;
    out.reserve(spectra_.size());
    for (const auto& s : spectra_) out.push_back(s.label());
    return out;
  }

 private:
  std::vector<Spectrum> spectra_;
};

// ---------------------------------------------------------------------------
// JSON (de)serialization

inline void to_json(nlohmann::json& j, const ChannelCalibration& c) {
  j = {{"n_channels", c.n_channels}, {"gain", c.gain}, {"offset", c.offset}};
}

// Accepts {"n_channels", "gain", "offset"} or {"preset": "detector", "n_channels": N}.
inline ChannelCalibration calibration_from_json(const nlohmann::json& j) {
  try {
    if (j.contains("preset")) {
      if (j.at("preset").get<std::string>() != "detector") {
        throw ValidationError("unknown calibration preset " + j.at("preset").dump());
      }
      auto cal = ChannelCalibration::detector_default();
      if (j.contains("n_channels")) cal = cal.rebinned(j.at("n_channels").get<std::size_t>());
      return cal;
    }
    ChannelCalibration cal;
    cal.n_channels = j.at("n_channels").get<std::size_t>();
    cal.gain = j.at("gain").get<double>();
    cal.offset = j.at("offset").get<double>();
    cal.validate();
    return cal;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid calibration: ") + e.what());
  }
}

// Scintillator-like resolution: sigma grows with sqrt(E), so peak width
// carries energy information.
inline double detector_sigma_kev(double kev) { return 0.77 * std::sqrt(std::max(kev, 1.0)); }

inline nlohmann::json species_spec_to_json(const SyntheticSpeciesSpec& s) {
  nlohmann::json peaks = nlohmann::json::array();
  for (const auto& p : s.peaks) {
    peaks.push_back({{"center_kev", p.center_kev}, {"amplitude", p.amplitude}, {"sigma_kev", p.sigma_kev}});
  }
  return {{"peaks", peaks},
          {"background", {{"level", s.background.level}, {"decay_per_kev", s.background.decay_per_kev}}}};
}

inline SyntheticSpeciesSpec species_spec_from_json(const std::string& name, const nlohmann::json& j) {
  SyntheticSpeciesSpec s;
  s.name = name;
  try {
    for (const auto& p : j.value("peaks", nlohmann::json::array())) {
      // Lines without an explicit width get the detector resolution.
      const double center = p.at("center_kev").get<double>();
      s.peaks.push_back({center, p.at("amplitude").get<double>(),
                         p.contains("sigma_kev") ? p.at("sigma_kev").get<double>() : detector_sigma_kev(center)});
    }
    if (j.contains("background")) {
      s.background.level = j.at("background").value("level", 0.0);
      s.background.decay_per_kev = j.at("background").value("decay_per_kev", 0.0);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("invalid synthetic species '" + name + "': " + e.what());
  }
  return s;
}

inline constexpr double kDefaultLongMeasurementCounts = 1e8;

// One entry of a library manifest.
struct LibraryEntry {
  std::string label;
  std::string csv_path;                          // set for measured entries
  std::optional<SyntheticSpeciesSpec> synthetic;  // set for synthetic entries
  double intensity = kDefaultLongMeasurementCounts;
};

struct LibraryManifest {
  ChannelCalibration calibration = ChannelCalibration::detector_default();
  std::vector<LibraryEntry> entries;
  std::uint64_t seed = 0;

  static LibraryManifest from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
    LibraryManifest m;
    if (j.contains("calibration")) m.calibration = calibration_from_json(j.at("calibration"));
    m.seed = j.value("seed", std::uint64_t{0});
    const double default_intensity = j.value("intensity", kDefaultLongMeasurementCounts);
    if (!j.contains("species") || !j.at("species").is_array()) {
      throw ValidationError("manifest needs a 'species' array");
    }
    for (const auto& e : j.at("species")) {
      LibraryEntry entry;
      try {
        entry.label = e.at("label").get<std::string>();
      } catch (const nlohmann::json::exception&) {
        throw ValidationError("species entry without a 'label'");
      }
      entry.intensity = e.value("intensity", default_intensity);
      if (e.contains("csv")) {
        auto p = std::filesystem::path(e.at("csv").get<std::string>());
        if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
        entry.csv_path = p.string();
      } else if (e.contains("synthetic")) {
        entry.synthetic = species_spec_from_json(entry.label, e.at("synthetic"));
        entry.synthetic->validate(m.calibration);
      } else {
        throw ValidationError("species '" + entry.label + "' needs 'csv' or 'synthetic'");
      }
      m.entries.push_back(std::move(entry));
    }
    return m;
  }

  static LibraryManifest load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("manifest " + path + " is not valid JSON: " + e.what());
    }
    return from_json(j, std::filesystem::path(path).parent_path());
  }

  nlohmann::json to_json() const {
    nlohmann::json species = nlohmann::json::array();
    for (const auto& e : entries) {
      nlohmann::json item = {{"label", e.label}};
      if (e.synthetic) {
        item["synthetic"] = species_spec_to_json(*e.synthetic);
        item["intensity"] = e.intensity;
      } else {
        item["csv"] = e.csv_path;
      }
      species.push_back(item);
    }
    nlohmann::json cal;
    pgnaa::to_json(cal, calibration);
    return {{"calibration", cal}, {"seed", seed}, {"species", species}};
  }

  // Synthetic entry i is realized from stream i of `seed`.
  SpeciesLibrary build() const {
    if (entries.empty()) throw ValidationError("manifest lists no species");
    std::vector<Spectrum> spectra;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& e = entries[i];
      if (e.synthetic) {
        auto rng = Rng::derive(seed, i);
        auto spec = *e.synthetic;
        spec.name = e.label;
        spectra.push_back(synthesize_spectrum(spec, calibration, e.intensity, rng));
      } else {
        spectra.push_back(load_spectrum_csv(e.csv_path, calibration, e.label));
      }
    }
    return SpeciesLibrary(std::move(spectra));
  }
};

// ---------------------------------------------------------------------------
// Synthetic library presets

// Species names of the mixed-materials dataset.
inline const std::vector<std::string>& mixed_material_names() {
  static const std::vector<std::string> names = {
      "Scrap metal powder", "Cement", "Stucco", "Al-1", "Cu-1", "Melamine",
      "Asilikos", "PVC", "Soil-1", "Soil HgS inhomogeneous", "Battery NiCd", "Copper ore-A-prod"};
  return names;
}

// `n_species` materials with mostly disjoint characteristic lines placed
// below ~5.5 MeV. Deterministic in `seed`.
inline std::vector<SyntheticSpeciesSpec> well_separated_species(std::size_t n_species,
                                                                std::uint64_t seed = 1) {
  if (n_species == 0) throw ValidationError("need at least one species");
  Rng rng = Rng::derive(seed, 0x5eed);
  std::vector<SyntheticSpeciesSpec> out;
  const auto& names = mixed_material_names();
  for (std::size_t s = 0; s < n_species; ++s) {
    SyntheticSpeciesSpec spec;
    spec.name = s < names.size() ? names[s] : "Species-" + std::to_string(s + 1);
    const std::size_t n_peaks = 3 + rng.below(3);
    for (std::size_t p = 0; p < n_peaks; ++p) {
      // Each species draws its lines from its own slots of a comb over 150..5400 keV.
      const double slot = static_cast<double>(p * n_species + s) /
                          static_cast<double>(n_peaks * n_species + 1);
      const double center = 150.0 + 5250.0 * (slot + 0.3 * rng.uniform() / static_cast<double>(n_species * n_peaks));
      spec.peaks.push_back({center, 0.5 + rng.uniform(), detector_sigma_kev(center)});
    }
    spec.background = {0.5 + 0.5 * rng.uniform(), 1.0 / (500.0 + 1000.0 * rng.uniform())};
    // Background area relative to line area ~ 1:1.
    double line_area = 0.0;
    for (const auto& p : spec.peaks) line_area += p.amplitude;
    spec.background.level *= line_area * spec.background.decay_per_kev;
    out.push_back(std::move(spec));
  }
  return out;
}

enum class SameElementFamily { aluminium, copper };

// Alloys of one base element: identical line energies, each line amplitude
// off its base value by a random fraction in [spread/5, spread].
inline std::vector<SyntheticSpeciesSpec> same_element_species(SameElementFamily family,
                                                              std::uint64_t seed = 2,
                                                              double spread = 0.10) {
  if (!(spread > 0.0 && spread < 1.0)) throw ValidationError("same_element_species: spread must be in (0, 1)");
  const bool al = family == SameElementFamily::aluminium;
  const std::size_t n_species = al ? 4 : 5;
  const std::vector<double> centers = al ? std::vector<double>{390.0, 984.0, 1779.0, 2960.0, 4133.0, 4734.0}
                                         : std::vector<double>{278.0, 609.0, 1345.0, 2164.0, 3930.0, 5110.0};
  const std::vector<double> base = {1.0, 0.8, 1.2, 0.6, 0.9, 0.7};
  Rng rng = Rng::derive(seed, al ? 0xa1 : 0xc0);
  std::vector<SyntheticSpeciesSpec> out;
  for (std::size_t s = 0; s < n_species; ++s) {
    SyntheticSpeciesSpec spec;
    spec.name = std::string(al ? "Al-" : "Cu-") + std::to_string(s + 1);
    for (std::size_t p = 0; p < centers.size(); ++p) {
      const double magnitude = spread * (0.2 + 0.8 * rng.uniform());
      const double sign = rng.below(2) == 0 ? -1.0 : 1.0;
      spec.peaks.push_back({centers[p], base[p] * (1.0 + sign * magnitude), detector_sigma_kev(centers[p])});
    }
    spec.background = {0.0, 1.0 / 1200.0};
    double line_area = 0.0;
    for (const auto& p : spec.peaks) line_area += p.amplitude;
    spec.background.level = line_area / 1200.0;
    out.push_back(std::move(spec));
  }
  return out;
}

inline LibraryManifest synthetic_manifest(std::vector<SyntheticSpeciesSpec> species,
                                          const ChannelCalibration& cal, std::uint64_t seed,
                                          double intensity = kDefaultLongMeasurementCounts) {
  LibraryManifest m;
  m.calibration = cal;
  m.seed = seed;
  for (auto& s : species) {
    LibraryEntry e;
    e.label = s.name;
    e.intensity = intensity;
    e.synthetic = std::move(s);
    e.synthetic->validate(cal);
    m.entries.push_back(std::move(e));
  }
  return m;
}

}  // namespace pgnaa
