#pragma once

#include "promptpix/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace promptpix {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class MissingFileError : public ImageIoError {
 public:
  using ImageIoError::ImageIoError;
};
class UnsupportedFormatError : public ImageIoError {
 public:
  using ImageIoError::ImageIoError;
};
class CorruptStreamError : public ImageIoError {
 public:
  using ImageIoError::ImageIoError;
};

// Interleaved 8-bit RGB, row-major.
struct ImageRGB {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  ImageRGB() = default;
  ImageRGB(int h, int w, std::uint8_t fill = 0);

  std::size_t pixels() const { return static_cast<std::size_t>(height) * static_cast<std::size_t>(width); }
  std::uint8_t& at(int row, int col, int ch) { return data[(static_cast<std::size_t>(row) * width + col) * 3 + ch]; }
  std::uint8_t at(int row, int col, int ch) const { return data[(static_cast<std::size_t>(row) * width + col) * 3 + ch]; }

  // n x 3 matrix of channel values in [0, 1].
  Matrix to_unit() const;

  friend bool operator==(const ImageRGB&, const ImageRGB&) = default;
};

struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;  // 0 or 1

  BinaryMask() = default;
  BinaryMask(int h, int w, std::uint8_t fill = 0);

  std::size_t pixels() const { return static_cast<std::size_t>(height) * static_cast<std::size_t>(width); }
  std::uint8_t& at(int row, int col) { return data[static_cast<std::size_t>(row) * width + col]; }
  std::uint8_t at(int row, int col) const { return data[static_cast<std::size_t>(row) * width + col]; }
  std::size_t foreground() const;
  Matrix to_matrix() const;  // height x width of 0.0 / 1.0

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

// Scaled (X, Y, L, a, b) per pixel. Row p is pixel (p / width, p % width).
struct PixelFeatures {
  int height = 0;
  int width = 0;
  double pos_scale = 1.0;
  Matrix matrix;  // n x 5

  Index n() const { return matrix.rows(); }
};

ImageRGB load_image(const std::filesystem::path& path);
// Binarizes at 128 on the channel mean.
BinaryMask load_mask(const std::filesystem::path& path);
BinaryMask binarize(const ImageRGB& img, int threshold = 128);

void save_png(const ImageRGB& img, const std::filesystem::path& path);
void save_mask_png(const BinaryMask& mask, const std::filesystem::path& path);
// 8-bit grayscale PNG from values in [0, 1].
void save_gray_png(const Matrix& values, const std::filesystem::path& path);
// P5 with maxval 65535, big-endian samples.
void save_label_pgm16(const std::vector<int>& labels, int height, int width, const std::filesystem::path& path);
std::vector<int> load_label_pgm16(const std::filesystem::path& path, int* height = nullptr, int* width = nullptr);

// sRGB (D65) to CIE Lab, one row per pixel.
Matrix rgb_to_lab(const ImageRGB& img);
Eigen::Vector3d srgb_to_lab(double r, double g, double b);  // channels in [0, 1]

PixelFeatures build_xylab(const ImageRGB& img, double pos_scale = 1.0);

// Boundary pixels of a binary mask: foreground pixels with a 4-neighbour
// outside the mask (pixels beyond the border count as outside).
std::vector<std::uint8_t> mask_boundary(const BinaryMask& mask);
// Boundary pixels of a label map: pixels with a 4-neighbour carrying a
// different label (the image border is not a boundary).
std::vector<std::uint8_t> label_boundary(const std::vector<int>& labels, int height, int width);

inline constexpr std::uint8_t kOverlayColor[3] = {255, 0, 0};

ImageRGB draw_overlay(const ImageRGB& img, const std::vector<std::uint8_t>& boundary);
void save_overlay(const ImageRGB& img, const BinaryMask& mask, const std::filesystem::path& path);
void save_overlay(const ImageRGB& img, const std::vector<int>& labels, const std::filesystem::path& path);

struct Sample {
  std::string name;
  ImageRGB image;
  BinaryMask mask;
};

// <root>/images/*.png paired with <root>/masks/<stem>.png, sorted by stem.
std::vector<Sample> load_dataset(const std::filesystem::path& root);
void save_dataset(const std::vector<Sample>& samples, const std::filesystem::path& root);

}  // namespace promptpix
