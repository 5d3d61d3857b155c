#pragma once

namespace ptsm {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace ptsm
