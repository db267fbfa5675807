#pragma once

#include "promptpix/image.hpp"
#include "promptpix/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

namespace testing {

using promptpix::Index;
using promptpix::Matrix;

inline Matrix random_matrix(std::mt19937_64& rng, Index rows, Index cols, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

inline promptpix::ImageRGB random_image(std::mt19937_64& rng, int h, int w) {
  promptpix::ImageRGB img(h, w);
  std::uniform_int_distribution<int> d(0, 255);
  for (auto& v : img.data) v = static_cast<std::uint8_t>(d(rng));
  return img;
}

inline promptpix::BinaryMask random_mask(std::mt19937_64& rng, int h, int w, double p = 0.4) {
  promptpix::BinaryMask m(h, w);
  std::bernoulli_distribution d(p);
  for (auto& v : m.data) v = d(rng) ? 1 : 0;
  return m;
}

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("promptpix_" + tag + "_" + std::to_string(rd()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing
