#pragma once

// Discarded channel intervals and the masking that removes them from an input.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pgnaa/error.hpp"

namespace pgnaa {

// Inclusive channel interval.
struct ChannelRange {
  std::size_t lo = 0;
  std::size_t hi = 0;

  std::size_t width() const noexcept { return hi - lo + 1; }
  friend bool operator==(const ChannelRange&, const ChannelRange&) = default;
};

// Sorted, disjoint, inclusive intervals.
class DiscardRanges {
 public:
  DiscardRanges() = default;

  // Sorts the input; overlapping or inverted intervals are rejected.
  explicit DiscardRanges(std::vector<ChannelRange> ranges) : ranges_(std::move(ranges)) {
    std::sort(ranges_.begin(), ranges_.end(),
              [](const ChannelRange& a, const ChannelRange& b) { return a.lo < b.lo; });
    for (std::size_t i = 0; i < ranges_.size(); ++i) {
      if (ranges_[i].lo > ranges_[i].hi) {
        throw ValidationError("discard range [" + std::to_string(ranges_[i].lo) + "," +
                              std::to_string(ranges_[i].hi) + "] is inverted");
      }
      if (i > 0 && ranges_[i].lo <= ranges_[i - 1].hi) {
        throw ValidationError("discard ranges overlap at channel " + std::to_string(ranges_[i].lo));
      }
    }
  }

  // Parses "lo-hi,lo-hi".
  static DiscardRanges parse(const std::string& text) {
    std::vector<ChannelRange> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      const auto dash = item.find('-');
      if (dash == std::string::npos) throw ValidationError("discard range '" + item + "' is not lo-hi");
      try {
        std::size_t used = 0;
        const auto lo = std::stoull(item.substr(0, dash), &used);
        const auto hi = std::stoull(item.substr(dash + 1));
        out.push_back({static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)});
      } catch (const std::logic_error&) {
        throw ValidationError("discard range '" + item + "' is not lo-hi");
      }
    }
    return DiscardRanges(std::move(out));
  }

  // Low band 0..103 and high band 8000..16383 of the 16384-channel detector.
  static DiscardRanges mixed_materials_default() { return DiscardRanges({{0, 103}, {8000, 16383}}); }

  // Inverse of parse().
  std::string to_string() const {
    std::string out;
    for (const auto& r : ranges_) {
      if (!out.empty()) out += ',';
      out += std::to_string(r.lo) + '-' + std::to_string(r.hi);
    }
    return out;
  }

  const std::vector<ChannelRange>& ranges() const noexcept { return ranges_; }
  bool empty() const noexcept { return ranges_.empty(); }

  std::size_t discarded() const noexcept {
    std::size_t n = 0;
    for (const auto& r : ranges_) n += r.width();
    return n;
  }

  void check_within(std::size_t width) const {
    if (!ranges_.empty() && ranges_.back().hi >= width) {
      throw RangeError("discard range ends at channel " + std::to_string(ranges_.back().hi) +
                       " but the input has " + std::to_string(width) + " channels");
    }
  }

  std::size_t kept_width(std::size_t width) const {
    check_within(width);
    return width - discarded();
  }

  // Same intervals on a grid of `to` channels instead of `from`; the
  // rescaled intervals cover every target channel that overlaps a source one.
  DiscardRanges rescaled(std::size_t from, std::size_t to) const {
    std::vector<ChannelRange> out;
    for (const auto& r : ranges_) {
      const std::size_t lo = r.lo * to / from;
      const std::size_t hi = ((r.hi + 1) * to + from - 1) / from - 1;
      if (!out.empty() && lo <= out.back().hi) {
        out.back().hi = std::max(out.back().hi, hi);
      } else {
        out.push_back({lo, hi});
      }
    }
    return DiscardRanges(std::move(out));
  }

  // Expresses `later` (given in original channel indices, disjoint from *this)
  // in the coordinates of an input that already had *this removed.
  DiscardRanges in_reduced_coordinates(const DiscardRanges& later) const {
    std::vector<ChannelRange> out;
    for (const auto& r : later.ranges_) {
      std::size_t shift = 0;
      for (const auto& mine : ranges_) {
        if (mine.hi < r.lo) {
          shift += mine.width();
        } else if (mine.lo <= r.hi) {
          throw ValidationError("range sets are not disjoint");
        }
      }
      out.push_back({r.lo - shift, r.hi - shift});
    }
    return DiscardRanges(std::move(out));
  }

  DiscardRanges united_with(const DiscardRanges& other) const {
    auto all = ranges_;
    all.insert(all.end(), other.ranges_.begin(), other.ranges_.end());
    return DiscardRanges(std::move(all));
  }

  friend bool operator==(const DiscardRanges&, const DiscardRanges&) = default;

 private:
  std::vector<ChannelRange> ranges_;
};

// Kept segments concatenated in channel order.
template <typename T>
std::vector<T> apply_mask(std::span<const T> input, const DiscardRanges& ranges) {
  std::vector<T> out;
  out.reserve(ranges.kept_width(input.size()));
  std::size_t next = 0;
  for (const auto& r : ranges.ranges()) {
    out.insert(out.end(), input.begin() + static_cast<std::ptrdiff_t>(next),
               input.begin() + static_cast<std::ptrdiff_t>(r.lo));
    next = r.hi + 1;
  }
  out.insert(out.end(), input.begin() + static_cast<std::ptrdiff_t>(next), input.end());
  return out;
}

template <typename T>
std::vector<T> apply_mask(const std::vector<T>& input, const DiscardRanges& ranges) {
  return apply_mask(std::span<const T>(input), ranges);
}

// Maps each kept position back to its original channel index.
inline std::vector<std::size_t> kept_channels(std::size_t width, const DiscardRanges& ranges) {
  std::vector<std::size_t> idx(width);
  for (std::size_t i = 0; i < width; ++i) idx[i] = i;
  return apply_mask(std::span<const std::size_t>(idx), ranges);
}

}  // namespace pgnaa
