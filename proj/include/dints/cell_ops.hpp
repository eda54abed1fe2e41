#pragma once

#include <array>
#include <string>
#include <vector>

#include "dints/error.hpp"

namespace dints {

/// Candidate cell operations, in alpha-axis order. A search space with N < 5
/// uses the first N entries.
enum class CellOp : int {
    skip = 0,
    conv3x3 = 1,
    conv3x1_1x3 = 2, // 3x1 followed by 1x3
    conv1x3_3x1 = 3, // 1x3 followed by 3x1
    dilated_conv3x3 = 4,
};

inline constexpr int kMaxCellOps = 5;

inline constexpr std::array<const char*, kMaxCellOps> kCellOpNames{"skip", "conv3x3", "conv3x1_1x3", "conv1x3_3x1",
                                                                   "dil2_conv3x3"};

/// Stored activation tensors per op in one training step: skip keeps none
/// beyond its output, a conv keeps its pre-activation, a factorized conv also
/// keeps the intermediate.
inline constexpr std::array<double, kMaxCellOps> kDefaultMemoryFactors{1.0, 2.0, 3.0, 3.0, 2.0};

inline const char* cell_op_name(int op)
{
    if (op < 0 || op >= kMaxCellOps) throw ValidationError("unknown cell op index " + std::to_string(op));
    return kCellOpNames[static_cast<std::size_t>(op)];
}

inline std::vector<double> default_memory_factors(int N)
{
    if (N < 1 || N > kMaxCellOps) throw ConfigError("space.N must be in [1, 5], got " + std::to_string(N));
    return {kDefaultMemoryFactors.begin(), kDefaultMemoryFactors.begin() + N};
}

} // namespace dints
