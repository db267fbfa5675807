#include "promptpix/superpixel.hpp"

#include "promptpix/ops.hpp"

#include <cmath>
#include <limits>

namespace promptpix {

SuperpixelGrid superpixel_grid(int height, int width, int m) {
  if (m < 1) throw InvalidCountError("superpixel count must be at least 1");
  if (static_cast<long>(m) > static_cast<long>(height) * width) {
    throw InvalidCountError("superpixel count " + std::to_string(m) + " exceeds pixel count " +
                            std::to_string(static_cast<long>(height) * width));
  }
  const double target = std::log(static_cast<double>(height) / width);
  SuperpixelGrid best{0, 0};
  double best_gap = std::numeric_limits<double>::infinity();
  for (int gh = 1; gh <= m; ++gh) {
    if (m % gh != 0) continue;
    const int gw = m / gh;
    if (gh > height || gw > width) continue;
    const double gap = std::abs(std::log(static_cast<double>(gh) / gw) - target);
    if (gap < best_gap) {
      best_gap = gap;
      best = {gh, gw};
    }
  }
  if (best.rows == 0) {
    throw InvalidCountError("superpixel count " + std::to_string(m) + " has no grid factorization fitting " +
                            std::to_string(height) + "x" + std::to_string(width));
  }
  return best;
}

Matrix cell_average_matrix(int height, int width, SuperpixelGrid grid) {
  Matrix avg = Matrix::Zero(static_cast<Index>(grid.rows) * grid.cols, static_cast<Index>(height) * width);
  for (int gy = 0; gy < grid.rows; ++gy) {
    const int r0 = gy * height / grid.rows, r1 = (gy + 1) * height / grid.rows;
    for (int gx = 0; gx < grid.cols; ++gx) {
      const int c0 = gx * width / grid.cols, c1 = (gx + 1) * width / grid.cols;
      const double w = 1.0 / ((r1 - r0) * (c1 - c0));
      for (int r = r0; r < r1; ++r) {
        for (int c = c0; c < c1; ++c) avg(gy * grid.cols + gx, static_cast<Index>(r) * width + c) = w;
      }
    }
  }
  return avg;
}

Centers init_centers(const Tensor& feats, int height, int width, int m) {
  if (feats.rows() != static_cast<Index>(height) * width) {
    throw DimensionError("init_centers: features " + feats.shape_str() + " do not cover a " + shape_string(height, width) + " image");
  }
  const SuperpixelGrid grid = superpixel_grid(height, width, m);
  Tape& tape = feats.tape();
  return {matmul(tape.constant(cell_average_matrix(height, width, grid)), feats), 0};
}

Centers init_centers(Tape& tape, const PixelFeatures& feats, int m) {
  return init_centers(tape.constant(feats.matrix), feats.height, feats.width, m);
}

Association soft_assign(const Tensor& feats, const Centers& centers, double temp) {
  if (!(temp > 0)) throw std::invalid_argument("soft_assign: temperature must be positive");
  const Tensor logits = (-1.0 / temp) * pairwise_sq_dist(feats, centers.S);
  // Each pixel's mixture over superpixels first, then the per-superpixel
  // weights over pixels. Normalizing only over pixels would let a sharp
  // temperature pull every center onto its single nearest pixel instead of
  // the mean of the pixels it owns. Working in log space keeps both finite
  // when exp(-D / temp) underflows.
  const Tensor log_r = log_softmax_rows(logits);
  return {exp(logits), exp(log_r), softmax_cols(log_r), feats.rows(), centers.S.rows()};
}

Centers update_centers(const Association& assoc, const Tensor& feats) {
  if (assoc.n != feats.rows()) {
    throw DimensionError("update_centers: association has " + std::to_string(assoc.n) + " pixels, features " + feats.shape_str());
  }
  return {matmul(transpose(assoc.Qhat), feats), 0};
}

SoftSlicResult iterate(const Tensor& feats, int height, int width, int m, int iters, double temp) {
  if (iters < 1) throw std::invalid_argument("iterate: need at least one iteration");
  Centers centers = init_centers(feats, height, width, m);
  Association assoc;
  for (int t = 1; t <= iters; ++t) {
    assoc = soft_assign(feats, centers, temp);
    centers = update_centers(assoc, feats);
    centers.iteration = t;
  }
  return {assoc, centers};
}

SoftSlicResult iterate(Tape& tape, const PixelFeatures& feats, int m, int iters, double temp) {
  return iterate(tape.constant(feats.matrix), feats.height, feats.width, m, iters, temp);
}

HardAssignment hard_assign(const Matrix& feats, const Matrix& centers) {
  if (feats.cols() != centers.cols()) throw DimensionError("hard_assign: feature widths differ");
  HardAssignment out;
  out.labels.resize(static_cast<std::size_t>(feats.rows()));
  for (Index p = 0; p < feats.rows(); ++p) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Index i = 0; i < centers.rows(); ++i) {
      const double d = (feats.row(p) - centers.row(i)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(i);
      }
    }
    out.labels[static_cast<std::size_t>(p)] = best;
  }
  return out;
}

Tensor superpixelate(const Association& assoc, const Tensor& X) {
  if (X.rows() != assoc.n) {
    throw DimensionError("superpixelate: features " + X.shape_str() + " but association covers " + std::to_string(assoc.n) + " pixels");
  }
  return matmul(assoc.R, matmul(transpose(assoc.Qhat), X));
}

}  // namespace promptpix
