#pragma once

// Random sampling methods: turn a long measurement into short measurements
// with a fixed event budget k.
//
//   RSM-1  list of k event energies drawn with probability counts_i / total
//   RSM-2  independent binomial thinning of every channel
//   RSM-3  multinomial count vector (histogram of RSM-1), the training input
//   RSM-4  raster rendering (scatter or histogram) of an RSM-1/RSM-3 result

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pgnaa/error.hpp"
#include "pgnaa/library.hpp"
#include "pgnaa/ranges.hpp"
#include "pgnaa/rng.hpp"
#include "pgnaa/spectra.hpp"

namespace pgnaa {

// Number of recorded events in one short measurement ("sample count rate").
struct SampleBudget {
  std::uint64_t k = 0;
  friend bool operator==(const SampleBudget&, const SampleBudget&) = default;
};

struct DownsizedSample {
  std::vector<std::int64_t> counts;
  SampleBudget budget;
  std::string label;

  std::int64_t total() const { return std::accumulate(counts.begin(), counts.end(), std::int64_t{0}); }
};

// RSM-1 output, in draw order.
struct EventList {
  std::vector<double> energies;
};

enum class RasterMode { scatter, histogram };

struct Raster {
  std::size_t height = 0;
  std::size_t width = 0;
  RasterMode mode = RasterMode::scatter;
  std::vector<std::uint8_t> pixels;  // row-major, row 0 at the top

  std::uint8_t at(std::size_t row, std::size_t col) const { return pixels[row * width + col]; }
  std::size_t column_sum(std::size_t col) const {
    std::size_t s = 0;
    for (std::size_t r = 0; r < height; ++r) s += at(r, col);
    return s;
  }
};

inline constexpr std::size_t kDefaultRasterSize = 256;

namespace detail {

inline std::uint64_t total_weight(std::span<const std::int64_t> weights) {
  std::uint64_t total = 0;
  for (auto w : weights) {
    if (w < 0) throw ValidationError("negative count");
    total += static_cast<std::uint64_t>(w);
  }
  return total;
}

inline void check_drawable(std::uint64_t total, std::uint64_t k) {
  if (k > 0 && total == 0) {
    throw EmptyDistributionError("cannot draw " + std::to_string(k) + " events from an empty spectrum");
  }
}

inline std::int64_t binomial(std::int64_t n, double p, Rng& rng) {
  if (n <= 0 || p <= 0.0) return 0;
  if (p >= 1.0) return n;
  return std::binomial_distribution<std::int64_t>(n, p)(rng);
}

}  // namespace detail

// Walker/Vose alias table over the non-zero entries of an integer weight vector.
class AliasTable {
 public:
  AliasTable() = default;

  explicit AliasTable(std::span<const std::int64_t> weights) {
    const std::uint64_t total = detail::total_weight(weights);
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i] > 0) support_.push_back(static_cast<std::uint32_t>(i));
    }
    const std::size_t n = support_.size();
    if (n == 0) return;
    threshold_.assign(n, 1.0);
    alias_.resize(n);
    std::vector<double> scaled(n);
    std::vector<std::uint32_t> small, large;
    for (std::size_t j = 0; j < n; ++j) {
      scaled[j] = static_cast<double>(weights[support_[j]]) * static_cast<double>(n) /
                  static_cast<double>(total);
      alias_[j] = static_cast<std::uint32_t>(j);
      (scaled[j] < 1.0 ? small : large).push_back(static_cast<std::uint32_t>(j));
    }
    while (!small.empty() && !large.empty()) {
      const auto s = small.back();
      small.pop_back();
      const auto l = large.back();
      threshold_[s] = scaled[s];
      alias_[s] = l;
      scaled[l] -= 1.0 - scaled[s];
      if (scaled[l] < 1.0) {
        large.pop_back();
        small.push_back(l);
      }
    }
    // Leftovers are 1 up to rounding.
    for (auto j : small) threshold_[j] = 1.0;
    for (auto j : large) threshold_[j] = 1.0;
  }

  bool empty() const noexcept { return support_.empty(); }
  std::size_t support_size() const noexcept { return support_.size(); }

  // One 64-bit word picks the column (high part) and the coin (low part).
  std::size_t draw(Rng& rng) const {
    const auto prod = static_cast<unsigned __int128>(rng()) * support_.size();
    const auto col = static_cast<std::size_t>(prod >> 64);
    const double coin = static_cast<double>(static_cast<std::uint64_t>(prod) >> 11) * 0x1.0p-53;
    return support_[coin < threshold_[col] ? col : alias_[col]];
  }

 private:
  std::vector<std::uint32_t> support_;
  std::vector<double> threshold_;
  std::vector<std::uint32_t> alias_;
};

// Baseline multinomial: walk channels in index order, drawing each cell as
// Binomial(remaining events, weight_i / remaining weight).
inline std::vector<std::int64_t> multinomial_sequential(std::span<const std::int64_t> weights,
                                                        std::uint64_t k, Rng& rng) {
  std::uint64_t remaining_weight = detail::total_weight(weights);
  detail::check_drawable(remaining_weight, k);
  std::vector<std::int64_t> out(weights.size(), 0);
  auto remaining = static_cast<std::int64_t>(k);
  for (std::size_t i = 0; i < weights.size() && remaining > 0; ++i) {
    if (weights[i] == 0) continue;
    const double p = static_cast<double>(weights[i]) / static_cast<double>(remaining_weight);
    const auto x = detail::binomial(remaining, p, rng);
    out[i] = x;
    remaining -= x;
    remaining_weight -= static_cast<std::uint64_t>(weights[i]);
  }
  return out;
}

// Prepared multinomial sampler for repeated draws from one weight vector.
// Small budgets draw k events from an alias table; large budgets use
// conditional binomials over the support sorted by decreasing weight, with
// the conditional probabilities precomputed.
class MultinomialSampler {
 public:
  // Per-event cost of the alias path relative to one binomial cell draw.
  static constexpr double kAliasEventsPerBinomialCell = 6.0;

  MultinomialSampler() = default;

  explicit MultinomialSampler(std::span<const std::int64_t> weights)
      : n_channels_(weights.size()), total_(detail::total_weight(weights)), alias_(weights) {
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i] > 0) order_.push_back(static_cast<std::uint32_t>(i));
    }
    std::stable_sort(order_.begin(), order_.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return weights[a] > weights[b]; });
    conditional_.resize(order_.size());
    std::uint64_t suffix = total_;
    for (std::size_t j = 0; j < order_.size(); ++j) {
      const auto w = static_cast<std::uint64_t>(weights[order_[j]]);
      conditional_[j] = static_cast<double>(w) / static_cast<double>(suffix);
      suffix -= w;
    }
  }

  std::size_t n_channels() const noexcept { return n_channels_; }
  std::uint64_t total() const noexcept { return total_; }

  // Adds a multinomial(k) draw into `out` (length n_channels, zeroed by caller).
  void draw_into(std::uint64_t k, Rng& rng, std::span<std::int64_t> out) const {
    detail::check_drawable(total_, k);
    if (k == 0) return;
    if (static_cast<double>(k) <= kAliasEventsPerBinomialCell * static_cast<double>(order_.size())) {
      for (std::uint64_t e = 0; e < k; ++e) ++out[alias_.draw(rng)];
      return;
    }
    auto remaining = static_cast<std::int64_t>(k);
    for (std::size_t j = 0; j < order_.size() && remaining > 0; ++j) {
      const auto x = detail::binomial(remaining, conditional_[j], rng);
      out[order_[j]] += x;
      remaining -= x;
    }
  }

  std::vector<std::int64_t> draw(std::uint64_t k, Rng& rng) const {
    std::vector<std::int64_t> out(n_channels_, 0);
    draw_into(k, rng, out);
    return out;
  }

  // k i.i.d. channel indices in draw order.
  std::vector<std::size_t> draw_events(std::uint64_t k, Rng& rng) const {
    detail::check_drawable(total_, k);
    std::vector<std::size_t> out(k);
    for (auto& ch : out) ch = alias_.draw(rng);
    return out;
  }

 private:
  std::size_t n_channels_ = 0;
  std::uint64_t total_ = 0;
  AliasTable alias_;
  std::vector<std::uint32_t> order_;
  std::vector<double> conditional_;
};

enum class MultinomialPath { fast, baseline };

// ---------------------------------------------------------------------------
// RSM-1 .. RSM-4

inline EventList rsm1_event_list(const Spectrum& s, SampleBudget budget, Rng& rng) {
  detail::check_drawable(static_cast<std::uint64_t>(s.total_counts()), budget.k);
  EventList out;
  if (budget.k == 0) return out;
  const AliasTable table(s.counts());
  out.energies.reserve(budget.k);
  for (std::uint64_t e = 0; e < budget.k; ++e) {
    out.energies.push_back(energy_of_channel(s.calibration(), table.draw(rng)));
  }
  return out;
}

inline DownsizedSample rsm3_weighted_counts(const Spectrum& s, SampleBudget budget, Rng& rng,
                                            MultinomialPath path = MultinomialPath::fast) {
  DownsizedSample out;
  out.budget = budget;
  out.label = s.label();
  if (path == MultinomialPath::baseline) {
    out.counts = multinomial_sequential(s.counts(), budget.k, rng);
    return out;
  }
  // One-shot draw: build only the structure the chosen path needs. Repeated
  // draws from one spectrum should keep a MultinomialSampler instead.
  const auto counts = s.counts();
  const auto total = detail::total_weight(counts);
  detail::check_drawable(total, budget.k);
  const auto nnz = static_cast<double>(std::count_if(counts.begin(), counts.end(), [](auto w) { return w > 0; }));
  if (static_cast<double>(budget.k) <= MultinomialSampler::kAliasEventsPerBinomialCell * nnz) {
    out.counts.assign(counts.size(), 0);
    if (budget.k == 0) return out;
    const AliasTable table(counts);
    for (std::uint64_t e = 0; e < budget.k; ++e) ++out.counts[table.draw(rng)];
  } else {
    out.counts = multinomial_sequential(counts, budget.k, rng);
  }
  return out;
}

// Retain fraction that makes RSM-2's expected total equal the budget.
inline double retain_fraction_for_budget(const Spectrum& s, SampleBudget budget) {
  if (s.total_counts() == 0) return budget.k == 0 ? 0.0 : 1.0;
  return std::min(1.0, static_cast<double>(budget.k) / static_cast<double>(s.total_counts()));
}

inline DownsizedSample rsm2_binomial_thinning(const Spectrum& s, double retain_fraction, Rng& rng) {
  if (!(retain_fraction >= 0.0 && retain_fraction <= 1.0)) {
    throw ValidationError("retain fraction must lie in [0,1]");
  }
  DownsizedSample out;
  out.label = s.label();
  const auto counts = s.counts();
  out.counts.resize(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    out.counts[i] = detail::binomial(counts[i], retain_fraction, rng);
  }
  out.budget.k = static_cast<std::uint64_t>(out.total());
  return out;
}

namespace detail {

inline Raster blank_raster(std::size_t height, std::size_t width, RasterMode mode) {
  if (height == 0 || width == 0) throw ValidationError("raster dimensions must be >= 1");
  Raster r;
  r.height = height;
  r.width = width;
  r.mode = mode;
  r.pixels.assign(height * width, 0);
  return r;
}

inline std::size_t column_of(std::size_t ch, std::size_t n_channels, std::size_t width) {
  return ch * width / n_channels;
}

inline void fill_histogram(Raster& r, std::span<const std::uint64_t> bins) {
  const auto peak = *std::max_element(bins.begin(), bins.end());
  if (peak == 0) return;
  for (std::size_t col = 0; col < r.width; ++col) {
    const auto h = static_cast<std::size_t>(bins[col] * r.height / peak);
    for (std::size_t row = r.height - h; row < r.height; ++row) r.pixels[row * r.width + col] = 1;
  }
}

}  // namespace detail

// Scatter: event i lights pixel (i*H/k, channel*W/n). Histogram: per-column
// bars of height floor(bin*H/max_bin), drawn from the bottom row up.
inline Raster rsm4_render(const EventList& events, const ChannelCalibration& cal, std::size_t height,
                          std::size_t width, RasterMode mode) {
  auto r = detail::blank_raster(height, width, mode);
  const std::size_t k = events.energies.size();
  if (k == 0) return r;
  if (mode == RasterMode::scatter) {
    for (std::size_t i = 0; i < k; ++i) {
      const auto col = detail::column_of(channel_of_energy(cal, events.energies[i]), cal.n_channels, width);
      r.pixels[(i * height / k) * width + col] = 1;
    }
  } else {
    std::vector<std::uint64_t> bins(width, 0);
    for (double e : events.energies) ++bins[detail::column_of(channel_of_energy(cal, e), cal.n_channels, width)];
    detail::fill_histogram(r, bins);
  }
  return r;
}

inline Raster rsm4_render(const DownsizedSample& sample, const ChannelCalibration& cal, std::size_t height,
                          std::size_t width, RasterMode mode) {
  if (sample.counts.size() != cal.n_channels) throw ShapeError("sample width does not match calibration");
  if (mode == RasterMode::scatter) {
    EventList events;
    for (std::size_t ch = 0; ch < sample.counts.size(); ++ch) {
      events.energies.insert(events.energies.end(), static_cast<std::size_t>(sample.counts[ch]),
                             energy_of_channel(cal, ch));
    }
    return rsm4_render(events, cal, height, width, mode);
  }
  auto r = detail::blank_raster(height, width, mode);
  std::vector<std::uint64_t> bins(width, 0);
  for (std::size_t ch = 0; ch < sample.counts.size(); ++ch) {
    bins[detail::column_of(ch, cal.n_channels, width)] += static_cast<std::uint64_t>(sample.counts[ch]);
  }
  detail::fill_histogram(r, bins);
  return r;
}

// ---------------------------------------------------------------------------
// Training batches

// batch_size x width count matrix (row-major) with class labels.
struct Batch {
  std::size_t rows = 0;
  std::size_t width = 0;
  SampleBudget budget;
  std::vector<std::int64_t> counts;
  std::vector<std::size_t> labels;

  std::span<const std::int64_t> row(std::size_t i) const {
    return std::span<const std::int64_t>(counts).subspan(i * width, width);
  }
};

// Draws RSM-3 rows from a library, optionally dropping discarded channels.
// Every row gets its own seed taken from the caller's stream, so rows can be
// generated in any order (or concurrently) with identical results.
class BatchGenerator {
 public:
  explicit BatchGenerator(const SpeciesLibrary& library, DiscardRanges discard = {})
      : n_channels_(library.n_channels()), discard_(std::move(discard)) {
    if (library.empty()) throw ValidationError("species library is empty");
    width_ = discard_.kept_width(n_channels_);
    if (width_ == 0) throw ValidationError("discard ranges remove every channel");
    for (const auto& s : library) samplers_.emplace_back(s.counts());
  }

  std::size_t n_classes() const noexcept { return samplers_.size(); }
  std::size_t width() const noexcept { return width_; }
  const DiscardRanges& discard() const noexcept { return discard_; }

  // Labels uniform over species.
  Batch generate(SampleBudget budget, std::size_t batch_size, Rng& rng) const {
    if (batch_size == 0) throw ValidationError("batch size must be >= 1");
    std::vector<std::size_t> labels(batch_size);
    std::vector<std::uint64_t> seeds(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) {
      labels[i] = static_cast<std::size_t>(rng.below(samplers_.size()));
      seeds[i] = rng.next_seed();
    }
    return fill(budget, std::move(labels), seeds);
  }

  // `per_class` rows of every class, in class order.
  Batch generate_balanced(SampleBudget budget, std::size_t per_class, Rng& rng) const {
    std::vector<std::size_t> labels;
    std::vector<std::uint64_t> seeds;
    for (std::size_t c = 0; c < samplers_.size(); ++c) {
      for (std::size_t i = 0; i < per_class; ++i) {
        labels.push_back(c);
        seeds.push_back(rng.next_seed());
      }
    }
    return fill(budget, std::move(labels), seeds);
  }

 private:
  Batch fill(SampleBudget budget, std::vector<std::size_t> labels, std::span<const std::uint64_t> seeds) const {
    Batch b;
    b.rows = labels.size();
    b.width = width_;
    b.budget = budget;
    b.counts.assign(b.rows * width_, 0);
    std::vector<std::int64_t> scratch(n_channels_);
    for (std::size_t i = 0; i < b.rows; ++i) {
      Rng row_rng(seeds[i]);
      std::span<std::int64_t> dst(b.counts.data() + i * width_, width_);
      if (discard_.empty()) {
        samplers_[labels[i]].draw_into(budget.k, row_rng, dst);
      } else {
        std::fill(scratch.begin(), scratch.end(), 0);
        samplers_[labels[i]].draw_into(budget.k, row_rng, scratch);
        const auto kept = apply_mask(std::span<const std::int64_t>(scratch), discard_);
        std::copy(kept.begin(), kept.end(), dst.begin());
      }
    }
    b.labels = std::move(labels);
    return b;
  }

  std::size_t n_channels_;
  std::size_t width_ = 0;
  DiscardRanges discard_;
  std::vector<MultinomialSampler> samplers_;
};

inline Batch batch_generate(const SpeciesLibrary& library, SampleBudget budget, std::size_t batch_size,
                            Rng& rng, const DiscardRanges& discard = {}) {
  return BatchGenerator(library, discard).generate(budget, batch_size, rng);
}

// ---------------------------------------------------------------------------
// Batch dumps: <stem>.bin holds row-major little-endian int64 counts,
// <stem>.json the shape, labels, seed, budget and discard ranges.

struct BatchDumpInfo {
  std::uint64_t seed = 0;
  DiscardRanges discard;
};

inline void write_batch_dump(const std::filesystem::path& dir, const std::string& stem, const Batch& batch,
                             const BatchDumpInfo& info) {
  static_assert(std::endian::native == std::endian::little, "batch dumps assume a little-endian host");
  std::filesystem::create_directories(dir);
  {
    std::ofstream bin(dir / (stem + ".bin"), std::ios::binary);
    if (!bin) throw IoError("cannot write " + (dir / (stem + ".bin")).string());
    bin.write(reinterpret_cast<const char*>(batch.counts.data()),
              static_cast<std::streamsize>(batch.counts.size() * sizeof(std::int64_t)));
    if (!bin) throw IoError("write failed for " + (dir / (stem + ".bin")).string());
  }
  nlohmann::json ranges = nlohmann::json::array();
  for (const auto& r : info.discard.ranges()) ranges.push_back({r.lo, r.hi});
  const nlohmann::json meta = {{"format", "pgnaa-batch-v1"}, {"dtype", "int64le"},
                               {"rows", batch.rows},         {"width", batch.width},
                               {"budget", batch.budget.k},   {"seed", info.seed},
                               {"discard", ranges},          {"labels", batch.labels}};
  std::ofstream side(dir / (stem + ".json"), std::ios::binary);
  if (!side) throw IoError("cannot write " + (dir / (stem + ".json")).string());
  side << meta.dump(2) << '\n';
}

inline Batch read_batch_dump(const std::filesystem::path& dir, const std::string& stem,
                             BatchDumpInfo* info = nullptr) {
  std::ifstream side(dir / (stem + ".json"));
  if (!side) throw IoError("cannot open " + (dir / (stem + ".json")).string());
  nlohmann::json meta;
  try {
    side >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid batch sidecar: ") + e.what());
  }
  Batch b;
  b.rows = meta.at("rows").get<std::size_t>();
  b.width = meta.at("width").get<std::size_t>();
  b.budget.k = meta.at("budget").get<std::uint64_t>();
  b.labels = meta.at("labels").get<std::vector<std::size_t>>();
  b.counts.resize(b.rows * b.width);
  std::ifstream bin(dir / (stem + ".bin"), std::ios::binary);
  if (!bin) throw IoError("cannot open " + (dir / (stem + ".bin")).string());
  bin.read(reinterpret_cast<char*>(b.counts.data()),
           static_cast<std::streamsize>(b.counts.size() * sizeof(std::int64_t)));
  if (bin.gcount() != static_cast<std::streamsize>(b.counts.size() * sizeof(std::int64_t))) {
    throw IoError("batch payload is truncated");
  }
  if (info) {
    info->seed = meta.at("seed").get<std::uint64_t>();
    std::vector<ChannelRange> ranges;
    for (const auto& r : meta.at("discard")) ranges.push_back({r.at(0).get<std::size_t>(), r.at(1).get<std::size_t>()});
    info->discard = DiscardRanges(std::move(ranges));
  }
  return b;
}

}  // namespace pgnaa
