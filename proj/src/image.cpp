#include "promptpix/image.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

namespace promptpix {

namespace fs = std::filesystem;

ImageRGB::ImageRGB(int h, int w, std::uint8_t fill)
    : height(h), width(w), data(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * 3, fill) {}

Matrix ImageRGB::to_unit() const {
  Matrix out(static_cast<Index>(pixels()), 3);
  for (Index i = 0; i < out.size(); ++i) out.data()[i] = data[static_cast<std::size_t>(i)] / 255.0;
  return out;
}

BinaryMask::BinaryMask(int h, int w, std::uint8_t fill)
    : height(h), width(w), data(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), fill) {}

std::size_t BinaryMask::foreground() const {
  return static_cast<std::size_t>(std::count(data.begin(), data.end(), std::uint8_t{1}));
}

Matrix BinaryMask::to_matrix() const {
  Matrix out(height, width);
  for (Index i = 0; i < out.size(); ++i) out.data()[i] = data[static_cast<std::size_t>(i)];
  return out;
}

namespace {

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) throw MissingFileError("no such file: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ImageRGB decode_png(const std::vector<std::uint8_t>& bytes, const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    std::string msg = image.message;
    png_image_free(&image);
    throw CorruptStreamError("corrupt PNG " + path.string() + ": " + msg);
  }
  image.format = PNG_FORMAT_RGB;
  ImageRGB out(static_cast<int>(image.height), static_cast<int>(image.width));
  if (!png_image_finish_read(&image, nullptr, out.data.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw CorruptStreamError("corrupt PNG " + path.string() + ": " + msg);
  }
  return out;
}

struct PgmHeader {
  int width = 0;
  int height = 0;
  int maxval = 0;
  std::size_t offset = 0;
};

PgmHeader parse_pgm_header(const std::vector<std::uint8_t>& bytes, const fs::path& path) {
  PgmHeader h;
  std::size_t pos = 2;
  auto next_int = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw CorruptStreamError("bad PGM header in " + path.string());
    long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > 1 << 20) throw CorruptStreamError("PGM header value too large in " + path.string());
    }
    return static_cast<int>(v);
  };
  h.width = next_int();
  h.height = next_int();
  h.maxval = next_int();
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw CorruptStreamError("bad PGM header in " + path.string());
  h.offset = pos + 1;
  if (h.width < 1 || h.height < 1 || h.maxval < 1 || h.maxval > 65535) {
    throw CorruptStreamError("bad PGM dimensions in " + path.string());
  }
  const std::size_t bps = h.maxval > 255 ? 2 : 1;
  if (bytes.size() < h.offset + static_cast<std::size_t>(h.width) * h.height * bps) {
    throw CorruptStreamError("truncated PGM " + path.string());
  }
  return h;
}

ImageRGB decode_pgm(const std::vector<std::uint8_t>& bytes, const fs::path& path) {
  const PgmHeader h = parse_pgm_header(bytes, path);
  ImageRGB out(h.height, h.width);
  const bool wide = h.maxval > 255;
  for (std::size_t i = 0; i < out.pixels(); ++i) {
    int v = wide ? (bytes[h.offset + 2 * i] << 8) | bytes[h.offset + 2 * i + 1] : bytes[h.offset + i];
    v = static_cast<int>(std::lround(255.0 * std::min(v, h.maxval) / h.maxval));
    std::fill_n(out.data.begin() + static_cast<std::ptrdiff_t>(3 * i), 3, static_cast<std::uint8_t>(v));
  }
  return out;
}

bool has_png_signature(const std::vector<std::uint8_t>& bytes) {
  static constexpr std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  return bytes.size() >= 8 && std::equal(sig, sig + 8, bytes.begin());
}

void write_png(const std::uint8_t* pixels, int height, int width, bool gray, const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, pixels, 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw ImageIoError("cannot write " + path.string() + ": " + msg);
  }
}

}  // namespace

ImageRGB load_image(const fs::path& path) {
  const std::vector<std::uint8_t> bytes = read_bytes(path);
  if (has_png_signature(bytes)) return decode_png(bytes, path);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5') return decode_pgm(bytes, path);
  throw UnsupportedFormatError("unsupported image format (PNG or P5 PGM expected): " + path.string());
}

BinaryMask binarize(const ImageRGB& img, int threshold) {
  BinaryMask mask(img.height, img.width);
  for (std::size_t i = 0; i < mask.pixels(); ++i) {
    const int s = img.data[3 * i] + img.data[3 * i + 1] + img.data[3 * i + 2];
    mask.data[i] = s >= 3 * threshold ? 1 : 0;
  }
  return mask;
}

BinaryMask load_mask(const fs::path& path) { return binarize(load_image(path)); }

void save_png(const ImageRGB& img, const fs::path& path) { write_png(img.data.data(), img.height, img.width, false, path); }

void save_mask_png(const BinaryMask& mask, const fs::path& path) {
  std::vector<std::uint8_t> px(mask.data.size());
  std::transform(mask.data.begin(), mask.data.end(), px.begin(), [](std::uint8_t v) { return v ? 255 : 0; });
  write_png(px.data(), mask.height, mask.width, true, path);
}

void save_gray_png(const Matrix& values, const fs::path& path) {
  std::vector<std::uint8_t> px(static_cast<std::size_t>(values.size()));
  for (Index i = 0; i < values.size(); ++i) {
    px[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(values.data()[i], 0.0, 1.0)));
  }
  write_png(px.data(), static_cast<int>(values.rows()), static_cast<int>(values.cols()), true, path);
}

void save_label_pgm16(const std::vector<int>& labels, int height, int width, const fs::path& path) {
  if (labels.size() != static_cast<std::size_t>(height) * width) throw std::invalid_argument("label map size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageIoError("cannot write " + path.string());
  out << "P5\n" << width << " " << height << "\n65535\n";
  for (int v : labels) {
    if (v < 0 || v > 65535) throw std::invalid_argument("label outside 16-bit range");
    const char be[2] = {static_cast<char>((v >> 8) & 0xff), static_cast<char>(v & 0xff)};
    out.write(be, 2);
  }
  if (!out) throw ImageIoError("cannot write " + path.string());
}

std::vector<int> load_label_pgm16(const fs::path& path, int* height, int* width) {
  const std::vector<std::uint8_t> bytes = read_bytes(path);
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw UnsupportedFormatError("not a P5 PGM: " + path.string());
  const PgmHeader h = parse_pgm_header(bytes, path);
  std::vector<int> labels(static_cast<std::size_t>(h.width) * h.height);
  const bool wide = h.maxval > 255;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    labels[i] = wide ? (bytes[h.offset + 2 * i] << 8) | bytes[h.offset + 2 * i + 1] : bytes[h.offset + i];
  }
  if (height) *height = h.height;
  if (width) *width = h.width;
  return labels;
}

Eigen::Vector3d srgb_to_lab(double r, double g, double b) {
  auto linearize = [](double c) { return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4); };
  const Eigen::Vector3d rgb(linearize(r), linearize(g), linearize(b));
  Eigen::Matrix3d m;
  m << 0.4124564, 0.3575761, 0.1804375,
       0.2126729, 0.7151522, 0.0721750,
       0.0193339, 0.1191920, 0.9503041;
  const Eigen::Vector3d white(0.95047, 1.0, 1.08883);
  const Eigen::Vector3d xyz = (m * rgb).cwiseQuotient(white);
  constexpr double delta = 6.0 / 29.0;
  auto f = [](double t) { return t > delta * delta * delta ? std::cbrt(t) : t / (3.0 * delta * delta) + 4.0 / 29.0; };
  const double fx = f(xyz.x()), fy = f(xyz.y()), fz = f(xyz.z());
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

Matrix rgb_to_lab(const ImageRGB& img) {
  Matrix lab(static_cast<Index>(img.pixels()), 3);
  for (std::size_t i = 0; i < img.pixels(); ++i) {
    lab.row(static_cast<Index>(i)) =
        srgb_to_lab(img.data[3 * i] / 255.0, img.data[3 * i + 1] / 255.0, img.data[3 * i + 2] / 255.0).transpose();
  }
  return lab;
}

PixelFeatures build_xylab(const ImageRGB& img, double pos_scale) {
  if (!(pos_scale > 0)) throw std::invalid_argument("build_xylab: pos_scale must be positive");
  PixelFeatures feats;
  feats.height = img.height;
  feats.width = img.width;
  feats.pos_scale = pos_scale;
  feats.matrix.resize(static_cast<Index>(img.pixels()), 5);
  const Matrix lab = rgb_to_lab(img);
  const double sx = img.width > 1 ? pos_scale / (img.width - 1) : 0.0;
  const double sy = img.height > 1 ? pos_scale / (img.height - 1) : 0.0;
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width; ++c) {
      const Index p = static_cast<Index>(r) * img.width + c;
      feats.matrix(p, 0) = sx * c;
      feats.matrix(p, 1) = sy * r;
      feats.matrix.row(p).tail<3>() = lab.row(p) / 100.0;
    }
  }
  return feats;
}

std::vector<std::uint8_t> mask_boundary(const BinaryMask& mask) {
  std::vector<std::uint8_t> out(mask.pixels(), 0);
  auto inside = [&](int r, int c) { return r >= 0 && c >= 0 && r < mask.height && c < mask.width && mask.at(r, c); };
  for (int r = 0; r < mask.height; ++r) {
    for (int c = 0; c < mask.width; ++c) {
      if (!mask.at(r, c)) continue;
      if (!inside(r - 1, c) || !inside(r + 1, c) || !inside(r, c - 1) || !inside(r, c + 1)) {
        out[static_cast<std::size_t>(r) * mask.width + c] = 1;
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> label_boundary(const std::vector<int>& labels, int height, int width) {
  if (labels.size() != static_cast<std::size_t>(height) * width) throw std::invalid_argument("label map size mismatch");
  std::vector<std::uint8_t> out(labels.size(), 0);
  auto at = [&](int r, int c) { return labels[static_cast<std::size_t>(r) * width + c]; };
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      const int v = at(r, c);
      const bool edge = (r > 0 && at(r - 1, c) != v) || (r + 1 < height && at(r + 1, c) != v) ||
                        (c > 0 && at(r, c - 1) != v) || (c + 1 < width && at(r, c + 1) != v);
      if (edge) out[static_cast<std::size_t>(r) * width + c] = 1;
    }
  }
  return out;
}

ImageRGB draw_overlay(const ImageRGB& img, const std::vector<std::uint8_t>& boundary) {
  if (boundary.size() != img.pixels()) throw std::invalid_argument("overlay: dimensions do not match image");
  ImageRGB out = img;
  for (std::size_t i = 0; i < boundary.size(); ++i) {
    if (boundary[i]) std::copy(kOverlayColor, kOverlayColor + 3, out.data.begin() + static_cast<std::ptrdiff_t>(3 * i));
  }
  return out;
}

void save_overlay(const ImageRGB& img, const BinaryMask& mask, const fs::path& path) {
  if (mask.height != img.height || mask.width != img.width) throw std::invalid_argument("overlay: mask does not match image");
  save_png(draw_overlay(img, mask_boundary(mask)), path);
}

void save_overlay(const ImageRGB& img, const std::vector<int>& labels, const fs::path& path) {
  save_png(draw_overlay(img, label_boundary(labels, img.height, img.width)), path);
}

std::vector<Sample> load_dataset(const fs::path& root) {
  const fs::path images = root / "images";
  const fs::path masks = root / "masks";
  std::error_code ec;
  if (!fs::is_directory(images, ec)) throw MissingFileError("dataset has no images/ directory: " + root.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(images)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end(), [](const fs::path& a, const fs::path& b) { return a.stem() < b.stem(); });
  std::vector<Sample> out;
  out.reserve(files.size());
  for (const fs::path& f : files) {
    Sample s;
    s.name = f.stem().string();
    s.image = load_image(f);
    s.mask = load_mask(masks / (s.name + ".png"));
    if (s.mask.height != s.image.height || s.mask.width != s.image.width) {
      throw ImageIoError("mask dimensions differ from image for sample " + s.name);
    }
    out.push_back(std::move(s));
  }
  return out;
}

void save_dataset(const std::vector<Sample>& samples, const fs::path& root) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  for (const Sample& s : samples) {
    save_png(s.image, root / "images" / (s.name + ".png"));
    save_mask_png(s.mask, root / "masks" / (s.name + ".png"));
  }
}

}  // namespace promptpix
