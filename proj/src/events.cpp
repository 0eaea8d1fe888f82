#include "tma/events.hpp"

#include <algorithm>

namespace tma {

std::vector<double> normalize_timestamps(const std::vector<Event>& events, int bins) {
  check(bins >= 1, "normalize_timestamps: bins must be >= 1");
  std::vector<double> out(events.size(), 0.0);
  if (events.empty()) return out;
  uint64_t t_first = events.front().t;
  uint64_t t_last = events.back().t;
  if (t_last == t_first || bins == 1) return out;  // degenerate: everything in bin 0
  double span = static_cast<double>(t_last - t_first);
  double scale = static_cast<double>(bins - 1) / span;
  for (size_t i = 0; i < events.size(); ++i)
    out[i] = static_cast<double>(events[i].t - t_first) * scale;
  return out;
}

SplitWindows split_events(const EventStream& stream, uint64_t t0, uint64_t t1, int g) {
  check(t1 > t0, "split_events: t1 must be greater than t0");
  check(g >= 1, "split_events: g must be >= 1");
  check((t1 - t0) % static_cast<uint64_t>(g) == 0,
        "split_events: window length must be divisible by g");
  uint64_t dt = (t1 - t0) / static_cast<uint64_t>(g);

  SplitWindows sw;
  sw.g = g;
  sw.dt = dt;
  sw.windows.resize(static_cast<size_t>(g) + 1);
  // Auxiliary window precedes t0; truncated at time 0 if the stream cannot
  // reach back a full dt.
  sw.windows[0].start = t0 >= dt ? t0 - dt : 0;
  sw.windows[0].end = t0;
  for (int i = 1; i <= g; ++i) {
    sw.windows[static_cast<size_t>(i)].start = t0 + static_cast<uint64_t>(i - 1) * dt;
    sw.windows[static_cast<size_t>(i)].end = t0 + static_cast<uint64_t>(i) * dt;
  }

  // Events are time-sorted; walk each window's half-open range once.
  auto cmp = [](const Event& e, uint64_t t) { return e.t < t; };
  for (auto& w : sw.windows) {
    auto lo = std::lower_bound(stream.events.begin(), stream.events.end(), w.start, cmp);
    auto hi = std::lower_bound(lo, stream.events.end(), w.end, cmp);
    w.events.assign(lo, hi);
  }
  return sw;
}

}  // namespace tma
