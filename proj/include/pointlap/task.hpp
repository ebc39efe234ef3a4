#pragma once

#include <string>

#include "pointlap/errors.hpp"

namespace pointlap {

enum class Task { kClassification, kSegmentation };

inline const char* task_name(Task t) {
  return t == Task::kClassification ? "classification" : "segmentation";
}

inline Task task_from_name(const std::string& s) {
  if (s == "classification") return Task::kClassification;
  if (s == "segmentation" || s == "part_segmentation") return Task::kSegmentation;
  throw ConfigError("unknown task: " + s + " (expected classification|segmentation)");
}

}  // namespace pointlap
