#pragma once

#include <cstdint>
#include <vector>

#include "tma/events.hpp"
#include "tma/flow.hpp"

namespace tma {

// Translating point scene with exact ground truth. The stream spans
// [0, 2*duration]; the flow window is [t0, t1] = [duration, 2*duration] so
// an auxiliary segment of any g >= 1 fits before t0. Velocity is the
// displacement in pixels over the flow window.
struct SceneConfig {
  uint64_t seed = 0;
  int width = 64;
  int height = 64;
  uint64_t duration_us = 50400;  // divisible by every g in 1..10
  int num_points = 24;
  double vx = 0.0;
  double vy = 0.0;
  int events_per_point = 120;
  double max_speed = 16.0;
};

struct LabeledSample {
  EventStream stream;
  FlowField gt;  // constant (vx, vy); valid where >=1 event in [t0, t1)
  uint64_t t0 = 0;
  uint64_t t1 = 0;
};

LabeledSample generate_scene(const SceneConfig& cfg);

struct DatasetConfig {
  uint64_t seed = 0;
  int count = 8;
  int width = 64;
  int height = 64;
  double speed_min = 0.0;
  double speed_max = 6.0;
  uint64_t duration_us = 50400;
  int num_points = 24;
  int events_per_point = 120;
};

// Per-sample scene configs with velocities drawn uniformly from the speed
// range (uniform magnitude and direction). Cheap; callers generate scenes
// one at a time. Even index = train, odd index = held-out.
std::vector<SceneConfig> dataset_scene_configs(const DatasetConfig& cfg);

std::vector<LabeledSample> generate_dataset(const DatasetConfig& cfg);

inline bool is_train_index(int i) { return i % 2 == 0; }

}  // namespace tma
