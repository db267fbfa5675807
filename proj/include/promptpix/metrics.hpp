#pragma once

#include "promptpix/image.hpp"
#include "promptpix/tensor.hpp"

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace promptpix {

struct MetricReport {
  double dice = 0;
  double miou = 0;
  double mae = 0;
  double accuracy = 0;
  double s_measure = 0;
  double e_measure = 0;
};

inline constexpr double kBinarizeThreshold = 0.5;

// pred: height x width foreground probabilities in [0, 1].
// Dice, mIoU, accuracy and E-measure use pred >= 0.5; MAE and S-measure use
// the continuous map.
MetricReport evaluate(const Matrix& pred, const BinaryMask& mask);

// Structure measure (alpha = 0.5) of a continuous map against a binary mask.
double s_measure(const Matrix& pred, const Matrix& gt);
// Enhanced-alignment measure of a binary map against a binary mask.
double e_measure(const Matrix& binary_pred, const Matrix& gt);

MetricReport mean_report(const std::vector<MetricReport>& reports);

using NamedReport = std::pair<std::string, MetricReport>;

// One row per sample plus a final "mean" row.
void write_metrics_csv(const std::vector<NamedReport>& rows, const std::filesystem::path& path);
nlohmann::json metrics_json(const std::vector<NamedReport>& rows);
void write_metrics_json(const std::vector<NamedReport>& rows, const std::filesystem::path& path);

}  // namespace promptpix
