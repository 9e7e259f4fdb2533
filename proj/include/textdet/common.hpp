#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace textdet {

// Thrown for malformed configs, schemas, and CLI arguments; the CLI maps it
// to exit code 2. Everything else (I/O failures, diverged training) surfaces
// as std::runtime_error and maps to exit code 1.
class validation_error : public std::runtime_error {
 public:
  explicit validation_error(const std::string& what) : std::runtime_error(what) {}
};

// Numeric epsilon table. Every guard constant used by the library lives here.
namespace eps {
inline constexpr double layer_norm = 1e-5;   // variance guard in layer normalization
inline constexpr double dice = 1e-6;         // dice-loss denominator/numerator guard
inline constexpr double giou = 1e-9;         // union/hull area guard in differentiable GIoU
inline constexpr double adam = 1e-8;         // optimizer denominator guard
inline constexpr double assign_tie = 1e-9;   // relative tolerance for assignment cost ties
}  // namespace eps

}  // namespace textdet
