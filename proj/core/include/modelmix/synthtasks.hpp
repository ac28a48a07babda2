#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "modelmix/grid.hpp"
#include "modelmix/rng.hpp"

namespace modelmix {

enum class Split { kTrain, kVal, kTest };

std::string to_string(Split s);
/// Throws ContractViolation for anything but "train", "val" or "test".
Split parse_split(const std::string& s);

struct DatasetItem {
  std::string id;
  Image image;          // [0, 1], multiples of 1/255
  LabelMap label;       // dense ground truth
  ScribbleMap scribble; // all UNLABELED unless `labeled`
  Split split = Split::kTrain;
  bool labeled = false;

  bool operator==(const DatasetItem&) const = default;
};

struct TaskDataset {
  std::string name;
  int num_classes = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<DatasetItem> items;

  /// Throws ContractViolation describing the first broken invariant.
  void validate() const;
  std::vector<const DatasetItem*> split(Split s) const;
  std::vector<std::string> labeled_ids() const;
  bool operator==(const TaskDataset&) const = default;
};

struct ScribblePolicy {
  double coverage_fraction = 0.1;
  int min_pixels_per_class = 5;

  void validate() const;
  bool operator==(const ScribblePolicy&) const = default;
};

struct ScribbleResult {
  ScribbleMap scribble;
  /// Classes present in the label but skipped because their region is too small.
  std::vector<int> skipped_classes;
  bool warning() const { return !skipped_classes.empty(); }
};

/// Per class, a self-avoiding random walk with momentum inside the class
/// region, `coverage_fraction` of the region long (at least
/// min_pixels_per_class). A class whose region cannot hold that many pixels
/// within a 30% coverage cap is skipped and reported.
ScribbleResult scribblize(const LabelMap& label, int num_classes, const ScribblePolicy& policy, SeededRng& rng);

struct SynthConfig {
  std::size_t size = 64;
  std::size_t labeled = 5;
  std::size_t unlabeled = 40;
  std::size_t val = 10;
  std::size_t test = 20;
  double noise_sigma = 0.1;
  std::size_t min_lesion_pixels = 20;
  ScribblePolicy scribble;

  void validate() const;
  std::size_t scene_count() const { return labeled + unlabeled + val + test; }
};

/// Structure labels: 0 background, 1 disk, 2 ring.
/// Pathology labels: 0 background, 1 lesion (always inside the ring).
/// Both tasks see the same rendered scenes; each picks its own labeled subset.
std::pair<TaskDataset, TaskDataset> generate_task_pair(std::uint64_t seed, const SynthConfig& cfg);

/// manifest.json plus images/, labels/, scribbles/ as 8-bit PGM; 255 marks unlabeled.
void write_dataset(const TaskDataset& ds, const std::filesystem::path& dir);
TaskDataset read_dataset(const std::filesystem::path& dir);

}  // namespace modelmix
