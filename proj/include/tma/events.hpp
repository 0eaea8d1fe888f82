#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "tma/tensor.hpp"

namespace tma {

// One brightness-change record from the sensor.
struct Event {
  uint16_t x = 0;
  uint16_t y = 0;
  uint64_t t = 0;  // microseconds
  int8_t p = 1;    // +1 or -1
};

struct EventStream {
  uint16_t width = 0;
  uint16_t height = 0;
  std::vector<Event> events;  // non-decreasing in t
};

// A [B,H,W] signed accumulation of one event window.
template <typename T>
struct VoxelGrid {
  Tensor<T> values;  // [B,H,W]
  uint64_t t_start = 0;
  uint64_t t_end = 0;
};

// Reference window [t0-dt, t0) followed by g equal windows covering [t0, t1).
struct SplitWindows {
  int g = 0;
  uint64_t dt = 0;
  struct Window {
    uint64_t start = 0;
    uint64_t end = 0;  // half-open [start, end)
    std::vector<Event> events;
  };
  std::vector<Window> windows;  // size g+1, index 0 is the auxiliary window
};

// t* = (B-1)(t - t_first)/(t_last - t_first), per window. A degenerate
// window (single event or zero span) maps everything to bin 0.
std::vector<double> normalize_timestamps(const std::vector<Event>& events, int bins);

// Events deposit p * k(x-xi) * k(y-yi) * k(b-t*) with k(a) = max(0, 1-|a|).
// Integer event coordinates make the spatial kernels select one pixel; the
// temporal kernel splits mass across at most two adjacent bins.
template <typename T>
VoxelGrid<T> build_voxel_grid(const std::vector<Event>& events, int bins, int height,
                              int width, uint64_t t_start, uint64_t t_end) {
  check(bins >= 1, "build_voxel_grid: bins must be >= 1");
  check(height >= 1 && width >= 1, "build_voxel_grid: empty sensor");
  VoxelGrid<T> grid;
  grid.values = Tensor<T>({bins, height, width});
  grid.t_start = t_start;
  grid.t_end = t_end;
  if (events.empty()) return grid;

  std::vector<double> tstar = normalize_timestamps(events, bins);
  T* data = grid.values.data();
  long long hw = static_cast<long long>(height) * width;
  for (size_t i = 0; i < events.size(); ++i) {
    const Event& e = events[i];
    check(e.x < width && e.y < height, "build_voxel_grid: event outside sensor bounds");
    double ts = tstar[i];
    int b0 = static_cast<int>(std::floor(ts));
    double f = ts - b0;
    long long px = static_cast<long long>(e.y) * width + e.x;
    T pol = static_cast<T>(e.p);
    if (b0 >= 0 && b0 < bins)
      data[b0 * hw + px] += pol * static_cast<T>(1.0 - f);
    if (f > 0.0 && b0 + 1 < bins)
      data[(b0 + 1) * hw + px] += pol * static_cast<T>(f);
  }
  return grid;
}

// Splits [t0, t1) into g equal segments plus the auxiliary [t0-dt, t0).
// Events on a boundary belong to the window starting there. The stream must
// be time-sorted. Requires (t1 - t0) divisible by g so windows are exact.
SplitWindows split_events(const EventStream& stream, uint64_t t0, uint64_t t1, int g);

// Voxelizes all g+1 windows of a split with the same bin count.
template <typename T>
std::vector<VoxelGrid<T>> voxelize_windows(const SplitWindows& sw, int bins,
                                           int height, int width) {
  std::vector<VoxelGrid<T>> grids;
  grids.reserve(sw.windows.size());
  for (const auto& w : sw.windows)
    grids.push_back(build_voxel_grid<T>(w.events, bins, height, width, w.start, w.end));
  return grids;
}

}  // namespace tma
