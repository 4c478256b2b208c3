#ifndef MMN_MOMENTMAP_HPP_
#define MMN_MOMENTMAP_HPP_

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "mmn/tensor.hpp"

namespace mmn::momentmap {

using diffcore::Tensor;

// Inclusive clip-index interval on the grid. For overlap it denotes the
// half-open span [start, end + 1).
struct Interval {
  std::size_t start = 0;
  std::size_t end = 0;

  std::size_t length() const { return end - start + 1; }
  friend bool operator==(const Interval&, const Interval&) = default;
};

// A moment in seconds, start < end.
struct TimeSpan {
  double start = 0.0;
  double end = 0.0;

  double length() const { return end - start; }
};

struct GridConfig {
  std::size_t num_clips = 16;       // N
  std::size_t dense_threshold = 4;  // G
};

// N clip-level feature rows of one video.
struct ClipFeatures {
  Tensor features;  // [N, d]
  double duration = 0.0;

  std::size_t num_clips() const { return features.dim(0); }
  std::size_t dim() const { return features.dim(1); }
};

// Upper-triangular mask of candidate moments on an N x N grid.
class ValidMask {
 public:
  ValidMask() = default;
  ValidMask(std::size_t n, std::vector<std::uint8_t> cells);

  std::size_t size() const { return n_; }
  bool valid(std::size_t i, std::size_t j) const { return cells_[i * n_ + j] != 0; }
  std::size_t count() const { return valid_cells_.size(); }

  // Row-major bytes, 1 = valid.
  const std::vector<std::uint8_t>& bytes() const { return cells_; }
  // Row-major bytes, 1 = invalid (for masked_fill).
  const std::vector<std::uint8_t>& invalid_bytes() const { return invalid_; }
  // Valid cells in row-major order.
  const std::vector<Interval>& cells() const { return valid_cells_; }
  // Flat index i * N + j of each entry of cells().
  const std::vector<std::size_t>& flat_indices() const { return flat_; }
  // Position of cell (i, j) in cells(), or count() when invalid.
  std::size_t position(std::size_t i, std::size_t j) const {
    return position_[i * n_ + j];
  }

 private:
  std::size_t n_ = 0;
  std::vector<std::uint8_t> cells_;
  std::vector<std::uint8_t> invalid_;
  std::vector<Interval> valid_cells_;
  std::vector<std::size_t> flat_;
  std::vector<std::size_t> position_;
};

struct MomentGrid {
  ValidMask mask;
  Tensor features;  // [N, N, d]; invalid cells zero
  std::size_t n() const { return mask.size(); }
};

// Segment-mean resampling of l raw rows to N rows.
ClipFeatures sample_clips(const Tensor& raw, std::size_t n, double duration);

// Dense cells for durations <= G; longer durations d keep only cells whose
// duration and start are multiples of the stride 2^ceil(log2(d / G)).
ValidMask valid_mask(std::size_t n, std::size_t dense_threshold);
// ceil(log2(d / G)) as a power of two, computed in integers.
std::size_t sparse_stride(std::size_t duration, std::size_t dense_threshold);

MomentGrid build_moment_map(const ClipFeatures& clips, const ValidMask& mask);

double temporal_iou(const Interval& a, const Interval& b);
double temporal_iou(const TimeSpan& a, const TimeSpan& b);

// clamp((iou - t_min) / (t_max - t_min), 0, 1)
double scale_iou(double iou, double t_min, double t_max);

TimeSpan index_to_time(const Interval& interval, std::size_t n, double duration);
// Nearest grid interval for a time span; exact inverse of index_to_time on
// grid-aligned spans.
Interval time_to_index(const TimeSpan& span, std::size_t n, double duration);

// Valid cell with maximal IoU against `span` (ties: earlier start, then
// shorter).
Interval snap_to_grid(const TimeSpan& span, const ValidMask& mask,
                      double duration);

}  // namespace mmn::momentmap

#endif  // MMN_MOMENTMAP_HPP_
