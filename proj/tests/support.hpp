#pragma once

#include <doctest.h>

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "cvlab/error.hpp"

// Checks that `expr` throws cvlab::Error of the given kind.
#define CHECK_KIND(expr, expected_kind)                           \
  do {                                                            \
    bool thrown_ = false;                                         \
    try {                                                         \
      (void)(expr);                                               \
    } catch (const cvlab::Error& e_) {                            \
      thrown_ = true;                                             \
      CHECK_MESSAGE(e_.kind() == (expected_kind), e_.what());     \
    }                                                             \
    CHECK_MESSAGE(thrown_, "expected an error from " #expr);      \
  } while (0)

namespace testing {

inline std::filesystem::path scratch_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
  auto dir = std::filesystem::temp_directory_path() /
             ("cvlab_" + tag + "_" + std::to_string(stamp) + "_" + std::to_string(counter++));
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

}  // namespace testing
