#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "essa/error.hpp"
#include "essa/linalg.hpp"
#include "essa/rng.hpp"

namespace test {

inline essa::Matrix gaussian_matrix(int rows, int cols, std::uint64_t seed, std::uint64_t stream) {
  essa::CounterRng rng(seed, stream);
  essa::Matrix m(rows, cols);
  for (auto& v : m.reshaped()) v = rng.normal();
  return m;
}

// Code of the essa::Error thrown by fn, or nullopt if it returns normally.
template <typename F>
std::optional<essa::ErrorCode> error_code(F&& fn) {
  try {
    fn();
  } catch (const essa::Error& e) {
    return e.code();
  }
  return std::nullopt;
}

// Fresh, empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("essa_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace test
