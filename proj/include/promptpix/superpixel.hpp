#pragma once

// Differentiable soft-SLIC: iterated soft pixel/superpixel association and
// center updates in scaled XYLab space, plus the pixel -> superpixel -> pixel
// round trip that turns deep features into super-pixelated features.

#include "promptpix/image.hpp"
#include "promptpix/tensor.hpp"

#include <stdexcept>
#include <utility>
#include <vector>

namespace promptpix {

class InvalidCountError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// gh x gw tiling of the image used to seed the centers.
struct SuperpixelGrid {
  int rows = 1;
  int cols = 1;
};

// Factor pair of m whose aspect ratio is closest to height/width.
SuperpixelGrid superpixel_grid(int height, int width, int m);

struct Centers {
  Tensor S;  // m x 5
  int iteration = 0;
};

struct Association {
  Tensor Q;     // exp(-D / temp), n x m
  Tensor R;     // Q with rows normalized to sum 1
  Tensor Qhat;  // R with columns normalized to sum 1
  Index n = 0;
  Index m = 0;
};

struct HardAssignment {
  std::vector<int> labels;
};

// m x n matrix averaging each grid cell's pixels.
Matrix cell_average_matrix(int height, int width, SuperpixelGrid grid);

Centers init_centers(const Tensor& feats, int height, int width, int m);
Centers init_centers(Tape& tape, const PixelFeatures& feats, int m);

Association soft_assign(const Tensor& feats, const Centers& centers, double temp = 1.0);
Centers update_centers(const Association& assoc, const Tensor& feats);

struct SoftSlicResult {
  Association assoc;
  Centers centers;
};

SoftSlicResult iterate(const Tensor& feats, int height, int width, int m, int iters, double temp = 1.0);
SoftSlicResult iterate(Tape& tape, const PixelFeatures& feats, int m, int iters, double temp = 1.0);

// Nearest center under squared Euclidean distance, lowest index on ties.
HardAssignment hard_assign(const Matrix& feats, const Matrix& centers);

// R * (Qhat^T * X): pool X into superpixel descriptors, then spread them back
// to pixels by each pixel's superpixel mixture.
Tensor superpixelate(const Association& assoc, const Tensor& X);

}  // namespace promptpix
