#include "promptpix/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>

namespace promptpix {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();

double object_score(const Matrix& values, const Matrix& region) {
  const double count = region.sum();
  if (count <= 0) return 0;
  const double mu = values.cwiseProduct(region).sum() / count;
  double var = 0;
  for (Index i = 0; i < values.size(); ++i) {
    if (region.data()[i] > 0) var += (values.data()[i] - mu) * (values.data()[i] - mu);
  }
  const double sigma = count > 1 ? std::sqrt(var / (count - 1)) : 0.0;
  return 2.0 * mu / (mu * mu + 1.0 + sigma + kEps);
}

double s_object(const Matrix& pred, const Matrix& gt) {
  const Matrix bg = Matrix::Ones(gt.rows(), gt.cols()) - gt;
  const double o_fg = object_score(pred.cwiseProduct(gt), gt);
  const double o_bg = object_score((Matrix::Ones(pred.rows(), pred.cols()) - pred).cwiseProduct(bg), bg);
  const double u = gt.mean();
  return u * o_fg + (1 - u) * o_bg;
}

double ssim(const Eigen::Ref<const Matrix>& pred, const Eigen::Ref<const Matrix>& gt) {
  const double n = static_cast<double>(pred.size());
  const double x = pred.mean(), y = gt.mean();
  const double sx = (pred.array() - x).square().sum() / (n - 1 + kEps);
  const double sy = (gt.array() - y).square().sum() / (n - 1 + kEps);
  const double sxy = ((pred.array() - x) * (gt.array() - y)).sum() / (n - 1 + kEps);
  const double alpha = 4 * x * y * sxy;
  const double beta = (x * x + y * y) * (sx + sy);
  if (alpha != 0) return alpha / (beta + kEps);
  return beta == 0 ? 1.0 : 0.0;
}

double s_region(const Matrix& pred, const Matrix& gt) {
  const Index rows = gt.rows(), cols = gt.cols();
  const double total = gt.sum();
  Index cx, cy;  // 1-based centroid, split after that row/column
  if (total == 0) {
    cx = static_cast<Index>(std::lround(cols / 2.0));
    cy = static_cast<Index>(std::lround(rows / 2.0));
  } else {
    double sx = 0, sy = 0;
    for (Index r = 0; r < rows; ++r) {
      for (Index c = 0; c < cols; ++c) {
        sx += (c + 1) * gt(r, c);
        sy += (r + 1) * gt(r, c);
      }
    }
    cx = static_cast<Index>(std::lround(sx / total));
    cy = static_cast<Index>(std::lround(sy / total));
  }
  const double area = static_cast<double>(rows * cols);
  const Index xs[2] = {0, cx}, xw[2] = {cx, cols - cx};
  const Index ys[2] = {0, cy}, yh[2] = {cy, rows - cy};
  double q = 0;
  for (int qy = 0; qy < 2; ++qy) {
    for (int qx = 0; qx < 2; ++qx) {
      if (yh[qy] == 0 || xw[qx] == 0) continue;
      const double w = static_cast<double>(yh[qy] * xw[qx]) / area;
      q += w * ssim(pred.block(ys[qy], xs[qx], yh[qy], xw[qx]), gt.block(ys[qy], xs[qx], yh[qy], xw[qx]));
    }
  }
  return q;
}

}  // namespace

double s_measure(const Matrix& pred, const Matrix& gt) {
  const double y = gt.mean();
  if (y == 0) return 1.0 - pred.mean();
  if (y == 1) return pred.mean();
  const double alpha = 0.5;
  const double q = alpha * s_object(pred, gt) + (1 - alpha) * s_region(pred, gt);
  return std::max(q, 0.0);
}

double e_measure(const Matrix& binary_pred, const Matrix& gt) {
  const double n = static_cast<double>(gt.size());
  const double fg = gt.sum();
  Matrix enhanced;
  if (fg == 0) {
    enhanced = Matrix::Ones(gt.rows(), gt.cols()) - binary_pred;
  } else if (fg == n) {
    enhanced = binary_pred;
  } else {
    const Matrix phi_pred = binary_pred.array() - binary_pred.mean();
    const Matrix phi_gt = gt.array() - gt.mean();
    const Matrix align = 2.0 * phi_gt.cwiseProduct(phi_pred).array() / (phi_gt.array().square() + phi_pred.array().square() + kEps);
    enhanced = (align.array() + 1.0).square() / 4.0;
  }
  return enhanced.sum() / n;
}

MetricReport evaluate(const Matrix& pred, const BinaryMask& mask) {
  if (pred.rows() != mask.height || pred.cols() != mask.width) {
    throw DimensionError("evaluate: prediction " + shape_string(pred.rows(), pred.cols()) + " vs mask " +
                         shape_string(mask.height, mask.width));
  }
  const Matrix gt = mask.to_matrix();
  const Matrix bin = (pred.array() >= kBinarizeThreshold).cast<double>();
  double tp = 0, fp = 0, fn = 0, tn = 0;
  for (Index i = 0; i < gt.size(); ++i) {
    const bool p = bin.data()[i] > 0, g = gt.data()[i] > 0;
    (p ? (g ? tp : fp) : (g ? fn : tn)) += 1;
  }
  const double n = static_cast<double>(gt.size());
  MetricReport r;
  r.dice = tp + fp + fn == 0 ? 1.0 : 2 * tp / (2 * tp + fp + fn);
  const double iou_fg = tp + fp + fn == 0 ? 1.0 : tp / (tp + fp + fn);
  const double iou_bg = tn + fp + fn == 0 ? 1.0 : tn / (tn + fp + fn);
  r.miou = 0.5 * (iou_fg + iou_bg);
  r.accuracy = (tp + tn) / n;
  r.mae = (pred - gt).cwiseAbs().sum() / n;
  r.s_measure = s_measure(pred, gt);
  r.e_measure = e_measure(bin, gt);
  return r;
}

MetricReport mean_report(const std::vector<MetricReport>& reports) {
  MetricReport m;
  if (reports.empty()) return m;
  for (const MetricReport& r : reports) {
    m.dice += r.dice;
    m.miou += r.miou;
    m.mae += r.mae;
    m.accuracy += r.accuracy;
    m.s_measure += r.s_measure;
    m.e_measure += r.e_measure;
  }
  const double k = static_cast<double>(reports.size());
  m.dice /= k;
  m.miou /= k;
  m.mae /= k;
  m.accuracy /= k;
  m.s_measure /= k;
  m.e_measure /= k;
  return m;
}

namespace {

std::vector<MetricReport> reports_of(const std::vector<NamedReport>& rows) {
  std::vector<MetricReport> out;
  for (const auto& [name, r] : rows) out.push_back(r);
  return out;
}

nlohmann::json report_json(const MetricReport& r) {
  return {{"dice", r.dice}, {"miou", r.miou}, {"mae", r.mae}, {"accuracy", r.accuracy}, {"s_measure", r.s_measure}, {"e_measure", r.e_measure}};
}

}  // namespace

void write_metrics_csv(const std::vector<NamedReport>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(17);
  out << "sample,dice,miou,mae,accuracy,s_measure,e_measure\n";
  auto line = [&](const std::string& name, const MetricReport& r) {
    out << name << ',' << r.dice << ',' << r.miou << ',' << r.mae << ',' << r.accuracy << ',' << r.s_measure << ',' << r.e_measure << '\n';
  };
  for (const auto& [name, r] : rows) line(name, r);
  line("mean", mean_report(reports_of(rows)));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

nlohmann::json metrics_json(const std::vector<NamedReport>& rows) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& [name, r] : rows) {
    nlohmann::json j = report_json(r);
    j["sample"] = name;
    samples.push_back(j);
  }
  return {{"samples", samples}, {"summary", report_json(mean_report(reports_of(rows)))}};
}

void write_metrics_json(const std::vector<NamedReport>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << metrics_json(rows).dump(2) << '\n';
}

}  // namespace promptpix
