#pragma once

// Calibrated gamma spectra: channel/energy mapping, the two-column CSV
// format, a peak+background generator and Poisson counting noise.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "pgnaa/error.hpp"
#include "pgnaa/rng.hpp"

namespace pgnaa {

inline constexpr std::size_t kDetectorChannels = 16384;

// Affine channel -> keV map. energy(ch) = offset + gain * ch.
struct ChannelCalibration {
  std::size_t n_channels = kDetectorChannels;
  double gain = 1.0;    // keV per channel
  double offset = 0.0;  // keV at channel 0

  void validate() const {
    if (n_channels < 2) throw ValidationError("calibration needs at least 2 channels");
    if (!(gain > 0.0) || !std::isfinite(gain)) throw ValidationError("calibration gain must be > 0");
    if (!std::isfinite(offset)) throw ValidationError("calibration offset must be finite");
  }

  // Affine map through two (channel, keV) points.
  static ChannelCalibration from_two_points(std::size_t n_channels, double ch_a, double kev_a,
                                            double ch_b, double kev_b) {
    if (ch_a == ch_b) throw ValidationError("calibration points must use distinct channels");
    ChannelCalibration cal;
    cal.n_channels = n_channels;
    cal.gain = (kev_b - kev_a) / (ch_b - ch_a);
    cal.offset = kev_a - cal.gain * ch_a;
    cal.validate();
    return cal;
  }

  // 16384-channel detector with channel 8000 at 5641.92 keV and the end
  // label 16384 at 11552.48 keV.
  static ChannelCalibration detector_default() {
    return from_two_points(kDetectorChannels, 8000.0, 5641.92, 16384.0, 11552.48);
  }

  // Same energy span [energy(0), energy(n_channels)] covered by fewer/more bins.
  ChannelCalibration rebinned(std::size_t channels) const {
    ChannelCalibration cal;
    cal.n_channels = channels;
    cal.gain = gain * static_cast<double>(n_channels) / static_cast<double>(channels);
    cal.offset = offset;
    cal.validate();
    return cal;
  }

  double min_energy() const { return offset; }
  double max_energy() const { return offset + gain * static_cast<double>(n_channels - 1); }

  friend bool operator==(const ChannelCalibration&, const ChannelCalibration&) = default;
};

// Valid for 0 <= ch <= n_channels; n_channels itself is the end label of the last bin.
inline double energy_of_channel(const ChannelCalibration& cal, std::size_t ch) {
  if (ch > cal.n_channels) {
    throw RangeError("channel " + std::to_string(ch) + " outside 0.." +
                     std::to_string(cal.n_channels));
  }
  return cal.offset + cal.gain * static_cast<double>(ch);
}

// Nearest channel within gain/2; exact half-way ties go to the lower channel.
inline std::size_t channel_of_energy(const ChannelCalibration& cal, double kev) {
  if (!std::isfinite(kev)) throw RangeError("non-finite energy");
  const double x = (kev - cal.offset) / cal.gain;
  const double ch = std::ceil(x - 0.5);
  if (ch < 0.0 || ch > static_cast<double>(cal.n_channels - 1)) {
    throw RangeError("energy " + std::to_string(kev) + " keV outside calibrated range");
  }
  return static_cast<std::size_t>(ch);
}

enum class Provenance { measured, synthetic };

// A long measurement: per-channel counts under a calibration.
class Spectrum {
 public:
  Spectrum(ChannelCalibration calibration, std::vector<std::int64_t> counts, std::string label,
           Provenance provenance = Provenance::measured)
      : calibration_(calibration),
        counts_(std::move(counts)),
        label_(std::move(label)),
        provenance_(provenance) {
    calibration_.validate();
    if (counts_.size() != calibration_.n_channels) {
      throw ValidationError("spectrum has " + std::to_string(counts_.size()) +
                            " channels, calibration expects " +
                            std::to_string(calibration_.n_channels));
    }
    for (std::size_t i = 0; i < counts_.size(); ++i) {
      if (counts_[i] < 0) {
        throw ValidationError("negative count in channel " + std::to_string(i));
      }
      total_ += counts_[i];
    }
  }

  const ChannelCalibration& calibration() const noexcept { return calibration_; }
  std::span<const std::int64_t> counts() const noexcept { return counts_; }
  const std::string& label() const noexcept { return label_; }
  std::int64_t total_counts() const noexcept { return total_; }
  Provenance provenance() const noexcept { return provenance_; }
  std::size_t size() const noexcept { return counts_.size(); }

 private:
  ChannelCalibration calibration_;
  std::vector<std::int64_t> counts_;
  std::string label_;
  Provenance provenance_;
  std::int64_t total_ = 0;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  s = trim(s);
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc{} && ptr == end;
}

}  // namespace detail

inline constexpr std::string_view kSpectrumCsvHeader = "Energy (keV),Counts";

// Reads the two-column "Energy (keV),Counts" format. Each row is mapped to
// its nearest calibrated channel; channels without a row hold zero counts.
inline Spectrum parse_spectrum_csv(std::istream& in, const ChannelCalibration& cal,
                                   std::string label) {
  cal.validate();
  std::vector<std::int64_t> counts(cal.n_channels, 0);
  std::vector<bool> seen(cal.n_channels, false);
  std::string line;
  std::size_t line_no = 0;
  std::size_t rows = 0;
  double last_energy = -std::numeric_limits<double>::infinity();

  if (!std::getline(in, line)) throw ValidationError("empty spectrum file");
  ++line_no;
  if (detail::trim(line) != kSpectrumCsvHeader) {
    throw ParseError(line_no, "expected header '" + std::string(kSpectrumCsvHeader) + "'");
  }
  while (std::getline(in, line)) {
    ++line_no;
    const auto row = detail::trim(line);
    if (row.empty()) continue;
    const auto comma = row.find(',');
    if (comma == std::string_view::npos || row.find(',', comma + 1) != std::string_view::npos) {
      throw ParseError(line_no, "expected two comma-separated columns");
    }
    double energy = 0.0;
    std::int64_t count = 0;
    if (!detail::parse_number(row.substr(0, comma), energy)) {
      throw ParseError(line_no, "malformed energy");
    }
    if (!detail::parse_number(row.substr(comma + 1), count)) {
      throw ParseError(line_no, "malformed count");
    }
    if (count < 0) {
      throw ValidationError("line " + std::to_string(line_no) + ": negative count");
    }
    if (!(energy > last_energy)) {
      throw ParseError(line_no, "energies must increase monotonically");
    }
    last_energy = energy;
    std::size_t ch = 0;
    try {
      ch = channel_of_energy(cal, energy);
    } catch (const RangeError& e) {
      throw RangeError("line " + std::to_string(line_no) + ": " + e.what());
    }
    if (seen[ch]) {
      throw ValidationError("line " + std::to_string(line_no) + ": energy maps to channel " +
                            std::to_string(ch) + " which is already populated");
    }
    seen[ch] = true;
    counts[ch] = count;
    ++rows;
  }
  if (rows == 0) throw ValidationError("spectrum file has no data rows");
  return Spectrum(cal, std::move(counts), std::move(label), Provenance::measured);
}

inline Spectrum load_spectrum_csv(const std::string& path, const ChannelCalibration& cal,
                                  std::string label = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  if (label.empty()) {
    const auto slash = path.find_last_of('/');
    label = path.substr(slash == std::string::npos ? 0 : slash + 1);
    if (const auto dot = label.rfind('.'); dot != std::string::npos) label.resize(dot);
  }
  return parse_spectrum_csv(in, cal, std::move(label));
}

inline void format_spectrum_csv(std::ostream& out, const Spectrum& s) {
  out << kSpectrumCsvHeader << '\n';
  char buf[64];
  const auto counts = s.counts();
  for (std::size_t ch = 0; ch < counts.size(); ++ch) {
    const int n = std::snprintf(buf, sizeof buf, "%.4f,%lld\n",
                                energy_of_channel(s.calibration(), ch),
                                static_cast<long long>(counts[ch]));
    out.write(buf, n);
  }
}

inline void write_spectrum_csv(const std::string& path, const Spectrum& s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  format_spectrum_csv(out, s);
  if (!out) throw IoError("write failed for " + path);
}

// ---------------------------------------------------------------------------
// Synthetic species

struct GaussianPeak {
  double center_kev;
  double amplitude;  // relative peak area
  double sigma_kev;
};

// Exponential continuum: level * exp(-decay * E), per keV.
struct ExponentialBackground {
  double level = 0.0;
  double decay_per_kev = 0.0;
};

struct SyntheticSpeciesSpec {
  std::string name;
  std::vector<GaussianPeak> peaks;
  ExponentialBackground background;

  void validate(const ChannelCalibration& cal) const {
    if (peaks.empty() && !(background.level > 0.0)) {
      throw ValidationError("species '" + name + "' has neither peaks nor background");
    }
    if (background.level < 0.0 || !std::isfinite(background.level) ||
        !std::isfinite(background.decay_per_kev)) {
      throw ValidationError("species '" + name + "' has an invalid background");
    }
    for (const auto& p : peaks) {
      if (!(p.sigma_kev > 0.0) || !(p.amplitude > 0.0)) {
        throw ValidationError("species '" + name + "' has a peak with non-positive sigma/amplitude");
      }
      if (p.center_kev < cal.min_energy() || p.center_kev > cal.max_energy()) {
        throw ValidationError("species '" + name + "' has a peak at " +
                              std::to_string(p.center_kev) + " keV outside the calibrated range");
      }
    }
  }
};

// Per-channel expected counts, summing to `intensity`.
inline std::vector<double> synthesize_expected(const SyntheticSpeciesSpec& spec,
                                               const ChannelCalibration& cal, double intensity) {
  cal.validate();
  spec.validate(cal);
  if (!(intensity > 0.0) || !std::isfinite(intensity)) {
    throw ValidationError("intensity must be positive");
  }
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  std::vector<double> shape(cal.n_channels, 0.0);
  for (std::size_t ch = 0; ch < cal.n_channels; ++ch) {
    const double e = energy_of_channel(cal, ch);
    double density = spec.background.level * std::exp(-spec.background.decay_per_kev * e);
    for (const auto& p : spec.peaks) {
      const double z = (e - p.center_kev) / p.sigma_kev;
      density += p.amplitude * inv_sqrt_2pi / p.sigma_kev * std::exp(-0.5 * z * z);
    }
    shape[ch] = density * cal.gain;
  }
  const double sum = std::accumulate(shape.begin(), shape.end(), 0.0);
  if (!(sum > 0.0) || !std::isfinite(sum)) {
    throw ValidationError("species '" + spec.name + "' has no mass inside the calibrated range");
  }
  const double scale = intensity / sum;
  for (auto& v : shape) v *= scale;
  return shape;
}

// Independent Poisson draw per channel.
inline std::vector<std::int64_t> realize_counts(std::span<const double> expected, Rng& rng) {
  std::vector<std::int64_t> out(expected.size(), 0);
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const double mu = expected[i];
    if (!(mu >= 0.0) || !std::isfinite(mu)) {
      throw ValidationError("expectation in channel " + std::to_string(i) + " is negative or non-finite");
    }
    if (mu > 0.0) out[i] = std::poisson_distribution<std::int64_t>(mu)(rng);
  }
  return out;
}

inline Spectrum synthesize_spectrum(const SyntheticSpeciesSpec& spec, const ChannelCalibration& cal,
                                    double intensity, Rng& rng) {
  const auto expected = synthesize_expected(spec, cal, intensity);
  return Spectrum(cal, realize_counts(expected, rng), spec.name, Provenance::synthetic);
}

// ---------------------------------------------------------------------------
// Counts <-> live time

class DetectorRate {
 public:
  explicit DetectorRate(double counts_per_second) : cps_(counts_per_second) {
    if (!(cps_ > 0.0) || !std::isfinite(cps_)) {
      throw ValidationError("detector rate must be a positive number of counts per second");
    }
  }

  double counts_per_second() const noexcept { return cps_; }

  // 19650 counts in ~2.479 s.
  static DetectorRate mixed_materials() { return DetectorRate(19650.0 / 2.479); }
  // 500000 counts in ~27.74 s.
  static DetectorRate aluminium() { return DetectorRate(500000.0 / 27.74); }
  // 500000 counts in ~24.44 s.
  static DetectorRate copper() { return DetectorRate(500000.0 / 24.44); }

 private:
  double cps_;
};

inline double live_time(std::uint64_t counts, DetectorRate rate) {
  return static_cast<double>(counts) / rate.counts_per_second();
}

}  // namespace pgnaa
