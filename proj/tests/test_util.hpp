#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include "revlm/det_random.hpp"
#include "revlm/unicode.hpp"

namespace revlm::testing {

/// Random UTF-8 string over a mix of ASCII and multi-byte scalar values
/// (surrogates excluded by construction).
inline std::string random_unicode_string(DetRng& rng, std::size_t max_len) {
  const std::size_t len = static_cast<std::size_t>(rng.below(max_len + 1));
  std::string out;
  for (std::size_t i = 0; i < len; ++i) {
    char32_t cp;
    switch (rng.below(5)) {
      case 0:
      case 1:
        cp = static_cast<char32_t>(0x20 + rng.below(0x5f));  // printable ASCII
        break;
      case 2:
        cp = static_cast<char32_t>(0xA0 + rng.below(0x500));  // Latin supplements, Greek, ...
        break;
      case 3:
        cp = static_cast<char32_t>(0x4E00 + rng.below(0x1000));  // CJK
        break;
      default:
        cp = static_cast<char32_t>(0x10000 + rng.below(0x1000));  // supplementary plane
        break;
    }
    utf8_append(out, cp);
  }
  return out;
}

/// Unique scratch directory under the build tree.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("revlm_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline void write_file(const std::filesystem::path& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << contents;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace revlm::testing
