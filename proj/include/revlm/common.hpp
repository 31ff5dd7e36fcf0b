#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace revlm {

inline constexpr const char* kToolVersion = "0.1.0";

/// Thrown when input data or a cross-module contract is violated
/// (bad file contents, orientation mismatch, shape mismatch, ...).
/// The CLI maps this to a distinct exit code from plain runtime failures.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

/// Training direction of a corpus, tokenizer or model. Reversal is
/// corpus-wide: every artifact carries its orientation and boundaries
/// re-check it, so forward/backward wiring mistakes fail loudly.
enum class Orientation { kForward, kBackward };

inline std::string to_string(Orientation o) {
  return o == Orientation::kForward ? "forward" : "backward";
}

inline Orientation orientation_from_string(std::string_view s) {
  if (s == "forward") return Orientation::kForward;
  if (s == "backward") return Orientation::kBackward;
  throw ValidationError("unknown orientation: '" + std::string(s) +
                        "' (expected 'forward' or 'backward')");
}

inline Orientation opposite(Orientation o) {
  return o == Orientation::kForward ? Orientation::kBackward : Orientation::kForward;
}

/// FNV-1a 64-bit. Used for content fingerprints in manifests and
/// checkpoint headers; stable across platforms.
inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ull) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string fnv1a64_hex(std::string_view bytes) {
  static const char* digits = "0123456789abcdef";
  std::uint64_t h = fnv1a64(bytes);
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[h & 0xf];
    h >>= 4;
  }
  return out;
}

}  // namespace revlm
