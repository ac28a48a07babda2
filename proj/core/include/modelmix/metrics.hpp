#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "modelmix/grid.hpp"
#include "modelmix/synthtasks.hpp"
#include "modelmix/unet.hpp"

namespace modelmix {

/// 2|P and G| / (|P| + |G|); 1 when both are empty. Nonzero values count as foreground.
double dice_score(const Mask& pred, const Mask& gt);

/// Symmetric Hausdorff distance in pixels between the foreground sets, via
/// exact Euclidean distance transforms. 0 when both sets are empty; the image
/// diagonal sqrt(h^2 + w^2) when exactly one is.
double hausdorff(const Mask& pred, const Mask& gt);

/// Squared Euclidean distance from every pixel to the nearest foreground
/// pixel of `mask` (+infinity if there is none).
std::vector<double> squared_distance_transform(const Mask& mask);

/// Per-pixel argmax over channels for item n; ties go to the lowest class id.
LabelMap argmax_labels(const Tensor4<float>& probs, std::size_t n);

/// Binary mask of pixels equal to `cls`.
Mask class_mask(const LabelMap& labels, int cls);

struct ItemMetrics {
  std::string id;
  std::vector<double> dice;  // indexed by class, background included
  std::vector<double> hd;
};

struct ClassStats {
  double dice_mean = 0.0;
  double dice_std = 0.0;
  double hd_mean = 0.0;
  double hd_std = 0.0;
};

/// Means and (population) standard deviations across items; mean_dice and
/// mean_hd average the foreground classes only.
struct MetricReport {
  std::string dataset;
  Split split = Split::kTest;
  int num_classes = 0;
  std::vector<ItemMetrics> items;
  std::vector<ClassStats> per_class;
  double mean_dice = 0.0;
  double mean_hd = 0.0;

  std::size_t count() const { return items.size(); }
};

/// Maps an (n, 1, h, w) batch of images to (n, classes, h, w) probabilities.
using Predictor = std::function<Tensor4<float>(const Tensor4<float>&)>;

MetricReport evaluate(const Predictor& predictor, const TaskDataset& dataset, Split split, std::size_t batch = 8);
/// Eval-mode forward passes of `model`.
MetricReport evaluate(const SegModel<float>& model, const TaskDataset& dataset, Split split, std::size_t batch = 8);

/// Recomputes per_class, mean_dice and mean_hd from items.
void aggregate(MetricReport& report);

/// item_id,class,dice,hd rows.
std::string report_csv(const MetricReport& report);
std::string report_summary_json(const MetricReport& report);
/// Writes the CSV to `csv_path` and the summary next to it with a .json extension.
void write_report(const MetricReport& report, const std::filesystem::path& csv_path);

}  // namespace modelmix
