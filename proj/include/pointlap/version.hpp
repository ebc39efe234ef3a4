#pragma once

namespace pointlap {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace pointlap
