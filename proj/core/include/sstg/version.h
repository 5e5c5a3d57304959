#pragma once

namespace sstg {

inline constexpr const char* kVersion = "1.0.0";

} // namespace sstg
