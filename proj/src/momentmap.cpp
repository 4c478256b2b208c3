#include "mmn/momentmap.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mmn/error.hpp"
#include "mmn/graph.hpp"

namespace mmn::momentmap {

ValidMask::ValidMask(std::size_t n, std::vector<std::uint8_t> cells)
    : n_(n), cells_(std::move(cells)) {
  if (cells_.size() != n_ * n_) {
    throw ShapeError("valid mask needs " + std::to_string(n_ * n_) +
                     " cells, got " + std::to_string(cells_.size()));
  }
  invalid_.resize(cells_.size());
  position_.assign(cells_.size(), 0);
  for (std::size_t i = 0; i < n_; ++i) {
    for (std::size_t j = 0; j < n_; ++j) {
      const std::size_t f = i * n_ + j;
      if (cells_[f] && j < i) {
        throw InvalidArgument("valid mask cell (" + std::to_string(i) + "," +
                              std::to_string(j) + ") below the diagonal");
      }
      invalid_[f] = cells_[f] ? 0 : 1;
      if (cells_[f]) {
        position_[f] = valid_cells_.size();
        valid_cells_.push_back({i, j});
        flat_.push_back(f);
      }
    }
  }
  for (std::size_t f = 0; f < cells_.size(); ++f) {
    if (!cells_[f]) position_[f] = valid_cells_.size();
  }
}

ClipFeatures sample_clips(const Tensor& raw, std::size_t n, double duration) {
  if (raw.rank() != 2) throw ShapeError("sample_clips expects [l, d], got " +
                                        raw.shape_string());
  const std::size_t l = raw.dim(0), d = raw.dim(1);
  if (l == 0) throw InvalidArgument("sample_clips: video has no clips");
  if (n == 0) throw InvalidArgument("sample_clips: N must be >= 1");
  Tensor out(diffcore::Shape{n, d});
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t lo = k * l / n;
    std::size_t hi = (k + 1) * l / n;
    if (hi <= lo) hi = std::min(lo, l - 1) + 1;  // empty segment: nearest row
    lo = std::min(lo, l - 1);
    const double inv = 1.0 / static_cast<double>(hi - lo);
    for (std::size_t r = lo; r < hi; ++r) {
      for (std::size_t c = 0; c < d; ++c) out.at(k, c) += raw.at(r, c);
    }
    for (std::size_t c = 0; c < d; ++c) out.at(k, c) *= inv;
  }
  return ClipFeatures{std::move(out), duration};
}

std::size_t sparse_stride(std::size_t duration, std::size_t dense_threshold) {
  std::size_t s = 1;
  while (dense_threshold * s < duration) s *= 2;
  return s;
}

ValidMask valid_mask(std::size_t n, std::size_t dense_threshold) {
  if (dense_threshold < 1 || dense_threshold > n) {
    throw InvalidArgument("valid_mask: need 1 <= G <= N, got G = " +
                          std::to_string(dense_threshold) + ", N = " +
                          std::to_string(n));
  }
  std::vector<std::uint8_t> cells(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      const std::size_t d = j - i + 1;
      if (d <= dense_threshold) {
        cells[i * n + j] = 1;
        continue;
      }
      const std::size_t s = sparse_stride(d, dense_threshold);
      cells[i * n + j] = (d % s == 0 && i % s == 0) ? 1 : 0;
    }
  }
  return ValidMask(n, std::move(cells));
}

MomentGrid build_moment_map(const ClipFeatures& clips, const ValidMask& mask) {
  if (clips.num_clips() != mask.size()) {
    throw ShapeError("build_moment_map: " + std::to_string(clips.num_clips()) +
                     " clips for a mask of size " + std::to_string(mask.size()));
  }
  diffcore::Graph g(false);
  auto x = g.constant(clips.features);
  auto y = diffcore::maxpool_interval(x, mask.bytes());
  return MomentGrid{mask, y.value()};
}

double temporal_iou(const Interval& a, const Interval& b) {
  const double inter_lo = static_cast<double>(std::max(a.start, b.start));
  const double inter_hi = static_cast<double>(std::min(a.end, b.end) + 1);
  const double inter = std::max(0.0, inter_hi - inter_lo);
  const double uni = static_cast<double>(a.length() + b.length()) - inter;
  return inter / uni;
}

double temporal_iou(const TimeSpan& a, const TimeSpan& b) {
  const double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
  const double uni = (a.end - a.start) + (b.end - b.start) - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

double scale_iou(double iou, double t_min, double t_max) {
  if (!(t_min < t_max)) {
    throw InvalidArgument("scale_iou: t_min must be below t_max");
  }
  return std::clamp((iou - t_min) / (t_max - t_min), 0.0, 1.0);
}

TimeSpan index_to_time(const Interval& interval, std::size_t n, double duration) {
  if (!(duration > 0.0)) throw InvalidArgument("index_to_time: duration must be > 0");
  const double step = duration / static_cast<double>(n);
  return TimeSpan{static_cast<double>(interval.start) * step,
                  static_cast<double>(interval.end + 1) * step};
}

Interval time_to_index(const TimeSpan& span, std::size_t n, double duration) {
  if (!(duration > 0.0)) throw InvalidArgument("time_to_index: duration must be > 0");
  const double scale = static_cast<double>(n) / duration;
  const long last = static_cast<long>(n) - 1;
  long s = std::lround(span.start * scale);
  long e = std::lround(span.end * scale) - 1;
  s = std::clamp(s, 0L, last);
  e = std::clamp(e, s, last);
  return Interval{static_cast<std::size_t>(s), static_cast<std::size_t>(e)};
}

Interval snap_to_grid(const TimeSpan& span, const ValidMask& mask, double duration) {
  const auto& cells = mask.cells();
  if (cells.empty()) throw InvalidArgument("snap_to_grid: empty mask");
  Interval best = cells.front();
  double best_iou = -1.0;
  for (const auto& c : cells) {
    const double iou = temporal_iou(index_to_time(c, mask.size(), duration), span);
    const bool better =
        iou > best_iou ||
        (iou == best_iou && (c.start < best.start ||
                             (c.start == best.start && c.end < best.end)));
    if (better) {
      best = c;
      best_iou = iou;
    }
  }
  return best;
}

}  // namespace mmn::momentmap
