#include "tma/synth.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tma/rng.hpp"

namespace tma {

namespace {

int clampi(long v, int lo, int hi) {
  return static_cast<int>(v < lo ? lo : (v > hi ? hi : v));
}

}  // namespace

LabeledSample generate_scene(const SceneConfig& cfg) {
  check(cfg.width >= 2 && cfg.height >= 2, "generate_scene: scene too small");
  check(cfg.num_points >= 1, "generate_scene: num_points must be >= 1");
  check(cfg.events_per_point >= 2, "generate_scene: events_per_point must be >= 2");
  double speed = std::hypot(cfg.vx, cfg.vy);
  check(speed <= cfg.max_speed, "generate_scene: velocity exceeds max_speed");

  Rng rng(cfg.seed);
  uint64_t t0 = cfg.duration_us;
  uint64_t t1 = 2 * cfg.duration_us;

  LabeledSample sample;
  sample.t0 = t0;
  sample.t1 = t1;
  sample.stream.width = static_cast<uint16_t>(cfg.width);
  sample.stream.height = static_cast<uint16_t>(cfg.height);

  int n = cfg.events_per_point;
  for (int pt = 0; pt < cfg.num_points; ++pt) {
    // Position at time t is p0 + v*(t - t0)/duration; over the stream span
    // the trajectory covers p0 +- v. Prefer trajectories fully in frame.
    double x0 = 0.0, y0 = 0.0;
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      x0 = rng.uniform(0.0, cfg.width - 1.0);
      y0 = rng.uniform(0.0, cfg.height - 1.0);
      ok = x0 - std::abs(cfg.vx) >= 0.0 && x0 + std::abs(cfg.vx) <= cfg.width - 1.0 &&
           y0 - std::abs(cfg.vy) >= 0.0 && y0 + std::abs(cfg.vy) <= cfg.height - 1.0;
    }
    if (!ok) {
      // Fall back to a clipped trajectory; reject only if no placement can
      // put any part of the path inside the frame.
      bool partial = std::abs(cfg.vx) < 2.0 * (cfg.width - 1) &&
                     std::abs(cfg.vy) < 2.0 * (cfg.height - 1);
      if (!partial)
        throw std::runtime_error("generate_scene: trajectory cannot fit the frame");
    }
    int8_t polarity = 1;
    for (int j = 0; j < n; ++j) {
      double frac = static_cast<double>(j) / static_cast<double>(n - 1);
      uint64_t t = static_cast<uint64_t>(std::llround(frac * static_cast<double>(t1)));
      double rel = (static_cast<double>(t) - static_cast<double>(t0)) /
                   static_cast<double>(cfg.duration_us);
      double px = x0 + cfg.vx * rel;
      double py = y0 + cfg.vy * rel;
      Event e;
      e.x = static_cast<uint16_t>(clampi(std::lround(px), 0, cfg.width - 1));
      e.y = static_cast<uint16_t>(clampi(std::lround(py), 0, cfg.height - 1));
      e.t = t;
      e.p = polarity;
      polarity = static_cast<int8_t>(-polarity);
      sample.stream.events.push_back(e);
    }
  }
  // Stable sort keeps per-point emission order on timestamp ties.
  std::stable_sort(sample.stream.events.begin(), sample.stream.events.end(),
                   [](const Event& a, const Event& b) { return a.t < b.t; });

  sample.gt = FlowField(cfg.height, cfg.width);
  float* u = sample.gt.values.data();
  float* v = u + static_cast<long long>(cfg.height) * cfg.width;
  for (long long i = 0; i < static_cast<long long>(cfg.height) * cfg.width; ++i) {
    u[i] = static_cast<float>(cfg.vx);
    v[i] = static_cast<float>(cfg.vy);
  }
  for (const Event& e : sample.stream.events)
    if (e.t >= t0 && e.t < t1)
      sample.gt.valid[static_cast<size_t>(e.y) * cfg.width + e.x] = 1;
  return sample;
}

std::vector<SceneConfig> dataset_scene_configs(const DatasetConfig& cfg) {
  check(cfg.count >= 1, "dataset_scene_configs: count must be >= 1");
  check(cfg.speed_min >= 0.0 && cfg.speed_max >= cfg.speed_min,
        "dataset_scene_configs: bad speed range");
  Rng rng(cfg.seed);
  std::vector<SceneConfig> out;
  out.reserve(static_cast<size_t>(cfg.count));
  for (int i = 0; i < cfg.count; ++i) {
    double speed = rng.uniform(cfg.speed_min, cfg.speed_max);
    double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    SceneConfig sc;
    sc.seed = rng.next_u64();
    sc.width = cfg.width;
    sc.height = cfg.height;
    sc.duration_us = cfg.duration_us;
    sc.num_points = cfg.num_points;
    sc.events_per_point = cfg.events_per_point;
    sc.vx = speed * std::cos(angle);
    sc.vy = speed * std::sin(angle);
    sc.max_speed = std::max(16.0, cfg.speed_max + 1.0);
    out.push_back(sc);
  }
  return out;
}

std::vector<LabeledSample> generate_dataset(const DatasetConfig& cfg) {
  std::vector<LabeledSample> out;
  auto configs = dataset_scene_configs(cfg);
  out.reserve(configs.size());
  for (const auto& sc : configs) out.push_back(generate_scene(sc));
  return out;
}

}  // namespace tma
