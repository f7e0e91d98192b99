#pragma once

// Central finite-difference checks of the analytic backward passes.
//
// The scalar being differentiated is the sum of the block outputs. Every
// parameter and every input coordinate is perturbed; the result is the
// largest relative error
//   |analytic - numeric| / max(|analytic|, |numeric|, kGradCheckFloor)
// The floor keeps coordinates whose true gradient is ~0 from turning
// round-off into a large ratio.

#include <cstddef>
#include <cstdint>
#include <string>

namespace rattn {

enum class BlockKind { Se, SeR, AuxHead, LinearToy };

std::string to_string(BlockKind k);
BlockKind parse_block_kind(const std::string& s);

inline constexpr double kGradCheckFloor = 1e-4;

struct GradCheckDims {
  std::size_t batch = 2;
  std::size_t channels = 4;
  std::size_t height = 2;
  std::size_t width = 2;
  std::size_t classes = 3;    // width of T for SE-R, head output for the aux head
  std::size_t reduction = 2;  // excitation hidden = channels / reduction
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst;  // "<tensor>[<index>]" of the worst coordinate
  std::size_t coordinates = 0;
};

/// Runs the check in double precision. Throws InvalidInput when the dims or
/// epsilon are outside the supported toy range, NumericError when an analytic
/// gradient is not finite.
GradCheckResult gradient_check_detailed(BlockKind kind, const GradCheckDims& dims, double epsilon,
                                        std::uint64_t seed = 1);

double gradient_check(BlockKind kind, const GradCheckDims& dims, double epsilon);

}  // namespace rattn
