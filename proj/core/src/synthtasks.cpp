#include "modelmix/synthtasks.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <set>

#include "json.hpp"
#include "modelmix/augment.hpp"
#include "modelmix/io_util.hpp"

namespace modelmix {

using nlohmann::json;

std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw ContractViolation("unknown split '" + s + "' (expected train, val or test)");
}

void TaskDataset::validate() const {
  if (num_classes < 2 || num_classes > 254) {
    throw ContractViolation("dataset '" + name + "': num_classes must lie in [2, 254], got " +
                            std::to_string(num_classes));
  }
  if (height == 0 || width == 0) throw ContractViolation("dataset '" + name + "': empty image size");
  std::set<std::string> ids;
  int max_label = -1;
  for (const auto& it : items) {
    if (!ids.insert(it.id).second) throw ContractViolation("dataset '" + name + "': duplicate item id " + it.id);
    if (it.image.h != height || it.image.w != width || !it.label.same_dims(it.image) ||
        !it.scribble.labels.same_dims(it.image)) {
      throw ContractViolation("dataset '" + name + "': item " + it.id + " does not match image size " +
                              std::to_string(height) + "x" + std::to_string(width));
    }
    if (it.scribble.num_classes != num_classes) {
      throw ContractViolation("dataset '" + name + "': item " + it.id + " scribble class count differs");
    }
    for (std::uint8_t v : it.label.data) {
      if (v >= num_classes) {
        throw ContractViolation("dataset '" + name + "': item " + it.id + " has label " + std::to_string(v) +
                                " >= num_classes " + std::to_string(num_classes));
      }
      max_label = std::max(max_label, static_cast<int>(v));
    }
    it.scribble.validate();
    for (std::size_t p = 0; p < it.label.size(); ++p) {
      if (it.scribble.annotated(p) && it.scribble.labels.data[p] != it.label.data[p]) {
        throw ContractViolation("dataset '" + name + "': item " + it.id + " scribble disagrees with its label");
      }
    }
    if (it.labeled && it.split != Split::kTrain) {
      throw ContractViolation("dataset '" + name + "': labeled item " + it.id + " outside the train split");
    }
    if (!it.labeled && it.scribble.annotated_count() != 0) {
      throw ContractViolation("dataset '" + name + "': unlabeled item " + it.id + " carries scribbles");
    }
    for (float v : it.image.data) {
      if (!(v >= 0.0f && v <= 1.0f)) {
        throw ContractViolation("dataset '" + name + "': item " + it.id + " intensity outside [0, 1]");
      }
    }
  }
  if (!items.empty() && max_label + 1 != num_classes) {
    throw ContractViolation("dataset '" + name + "': num_classes is " + std::to_string(num_classes) +
                            " but the largest label is " + std::to_string(max_label));
  }
}

std::vector<const DatasetItem*> TaskDataset::split(Split s) const {
  std::vector<const DatasetItem*> out;
  for (const auto& it : items) {
    if (it.split == s) out.push_back(&it);
  }
  return out;
}

std::vector<std::string> TaskDataset::labeled_ids() const {
  std::vector<std::string> out;
  for (const auto& it : items) {
    if (it.labeled) out.push_back(it.id);
  }
  return out;
}

void ScribblePolicy::validate() const {
  if (!(coverage_fraction > 0.0 && coverage_fraction <= 0.3)) {
    throw ContractViolation("ScribblePolicy: coverage_fraction must lie in (0, 0.3], got " +
                            std::to_string(coverage_fraction));
  }
  if (min_pixels_per_class < 5) {
    throw ContractViolation("ScribblePolicy: min_pixels_per_class must be >= 5, got " +
                            std::to_string(min_pixels_per_class));
  }
}

namespace {

constexpr std::array<std::array<int, 2>, 8> kSteps = {
    {{-1, -1}, {-1, 0}, {-1, 1}, {0, 1}, {1, 1}, {1, 0}, {1, -1}, {0, -1}}};

}  // namespace

ScribbleResult scribblize(const LabelMap& label, int num_classes, const ScribblePolicy& policy, SeededRng& rng) {
  policy.validate();
  if (num_classes < 1 || num_classes > 254) throw ContractViolation("scribblize: num_classes out of range");
  ScribbleResult out;
  out.scribble = ScribbleMap(label.h, label.w, num_classes);
  const auto h = static_cast<int>(label.h), w = static_cast<int>(label.w);
  for (int c = 0; c < num_classes; ++c) {
    std::vector<std::size_t> region;
    for (std::size_t p = 0; p < label.size(); ++p) {
      if (label.data[p] == c) region.push_back(p);
    }
    if (region.empty()) continue;
    const auto target = std::max<std::size_t>(
        static_cast<std::size_t>(policy.min_pixels_per_class),
        static_cast<std::size_t>(std::lround(policy.coverage_fraction * static_cast<double>(region.size()))));
    if (target > static_cast<std::size_t>(0.3 * static_cast<double>(region.size()))) {
      out.skipped_classes.push_back(c);
      continue;
    }
    auto in_region = [&](int y, int x) {
      return y >= 0 && y < h && x >= 0 && x < w && label.data[static_cast<std::size_t>(y * w + x)] == c;
    };
    auto& mark = out.scribble.labels.data;
    const auto unlabeled = out.scribble.unlabeled();
    std::size_t placed = 0;
    std::vector<std::size_t> path;
    auto start_at = [&](std::size_t p) {
      mark[p] = static_cast<std::uint8_t>(c);
      path.push_back(p);
      ++placed;
    };
    start_at(region[rng.below(region.size())]);
    int dir = static_cast<int>(rng.below(8));
    std::size_t cur = path.back();
    while (placed < target) {
      const int y = static_cast<int>(cur) / w, x = static_cast<int>(cur) % w;
      auto open = [&](int d) {
        const int ny = y + kSteps[static_cast<std::size_t>(d)][0], nx = x + kSteps[static_cast<std::size_t>(d)][1];
        return in_region(ny, nx) && mark[static_cast<std::size_t>(ny * w + nx)] == unlabeled;
      };
      int next = -1;
      if (open(dir) && rng.bernoulli(0.8)) {
        next = dir;
      } else {
        std::vector<int> options;
        for (int turn : {-1, 1, -2, 2, 0, -3, 3, 4}) {
          const int d = ((dir + turn) % 8 + 8) % 8;
          if (open(d)) options.push_back(d);
          if (options.size() >= 2 && std::abs(turn) >= 1) break;
        }
        if (!options.empty()) next = options[rng.below(options.size())];
      }
      if (next >= 0) {
        dir = next;
        cur = static_cast<std::size_t>((y + kSteps[static_cast<std::size_t>(dir)][0]) * w + x +
                                       kSteps[static_cast<std::size_t>(dir)][1]);
        start_at(cur);
        continue;
      }
      // Stuck: restart from an unvisited region pixel.
      std::vector<std::size_t> free;
      for (std::size_t p : region) {
        if (mark[p] == unlabeled) free.push_back(p);
      }
      if (free.empty()) break;
      cur = free[rng.below(free.size())];
      start_at(cur);
      dir = static_cast<int>(rng.below(8));
    }
  }
  return out;
}

void SynthConfig::validate() const {
  if (size < 16 || size % 8 != 0) {
    throw ContractViolation("SynthConfig: size must be a multiple of 8 and >= 16, got " + std::to_string(size));
  }
  if (labeled == 0) throw ContractViolation("SynthConfig: labeled must be >= 1");
  if (val == 0 || test == 0) throw ContractViolation("SynthConfig: val and test must be >= 1");
  if (!(noise_sigma >= 0.0 && noise_sigma <= 1.0)) {
    throw ContractViolation("SynthConfig: noise_sigma must lie in [0, 1], got " + std::to_string(noise_sigma));
  }
  if (min_lesion_pixels < static_cast<std::size_t>(scribble.min_pixels_per_class)) {
    throw ContractViolation("SynthConfig: min_lesion_pixels must be >= scribble.min_pixels_per_class");
  }
  scribble.validate();
}

namespace {

struct Scene {
  Image image;
  LabelMap structure;
  LabelMap pathology;
};

// One scene: textured background, a deformed ring around a disk, lesions in
// the ring, and lesion-like distractor blobs outside it.
Scene render_scene(std::size_t n, double noise_sigma, std::size_t min_lesion, SeededRng& rng) {
  constexpr double kPi = std::numbers::pi;
  const double s = static_cast<double>(n);
  Scene sc;
  sc.structure = LabelMap(n, n, 0);

  const double cy = s * rng.uniform(0.4, 0.6), cx = s * rng.uniform(0.4, 0.6);
  const double r_in = s * rng.uniform(0.11, 0.17);
  const double thick = s * rng.uniform(0.08, 0.12);
  const double wobble = rng.uniform(0.0, 0.15), wobble_phase = rng.uniform(0.0, 2 * kPi);
  const double squash = rng.uniform(0.85, 1.15);

  std::vector<double> radial(n * n), angle(n * n);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double dy = (static_cast<double>(y) + 0.5 - cy) * squash;
      const double dx = (static_cast<double>(x) + 0.5 - cx) / squash;
      const double th = std::atan2(dy, dx);
      const double scale = 1.0 + wobble * std::cos(2 * th + wobble_phase);
      const double r = std::hypot(dy, dx) / scale;
      // 0 at the inner edge, 1 at the outer edge of the ring.
      radial[y * n + x] = (r - r_in) / thick;
      angle[y * n + x] = th;
      sc.structure.at(y, x) = r < r_in ? 1 : (r < r_in + thick ? 2 : 0);
    }
  }

  for (int attempt = 0;; ++attempt) {
    sc.pathology = LabelMap(n, n, 0);
    const int lesions = 1 + static_cast<int>(rng.below(2));
    for (int l = 0; l < lesions; ++l) {
      const double th0 = rng.uniform(-kPi, kPi);
      const double half = rng.uniform(0.6, 1.3);
      const double depth = rng.uniform(0.6, 1.0);
      for (std::size_t p = 0; p < n * n; ++p) {
        if (sc.structure.data[p] != 2) continue;
        const double d = std::remainder(angle[p] - th0, 2 * kPi);
        if (std::abs(d) <= half && radial[p] <= depth) sc.pathology.data[p] = 1;
      }
    }
    const auto count = static_cast<std::size_t>(std::count(sc.pathology.data.begin(), sc.pathology.data.end(), 1));
    if (count >= min_lesion) break;
    if (attempt > 64) throw ContractViolation("generate_task_pair: cannot place a lesion of the minimum size");
  }

  // Distractors: lesion-intensity blobs in the background only.
  std::vector<std::uint8_t> distractor(n * n, 0);
  const int blobs = 1 + static_cast<int>(rng.below(3));
  for (int b = 0; b < blobs; ++b) {
    const double by = s * rng.uniform(0.05, 0.95), bx = s * rng.uniform(0.05, 0.95);
    const double br = s * rng.uniform(0.03, 0.07);
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        const std::size_t p = y * n + x;
        if (sc.structure.data[p] == 0 && radial[p] > 1.6 &&
            std::hypot(static_cast<double>(y) + 0.5 - by, static_cast<double>(x) + 0.5 - bx) < br) {
          distractor[p] = 1;
        }
      }
    }
  }

  std::array<double, 3> fy{}, fx{}, ph{}, amp{};
  for (std::size_t k = 0; k < 3; ++k) {
    fy[k] = rng.uniform(-3.0, 3.0) * 2 * kPi / s;
    fx[k] = rng.uniform(-3.0, 3.0) * 2 * kPi / s;
    ph[k] = rng.uniform(0.0, 2 * kPi);
    amp[k] = rng.uniform(0.02, 0.06);
  }
  const double gain = rng.uniform(0.85, 1.15), offset = rng.uniform(-0.05, 0.05);
  const double bg = 0.45, disk = 0.85, ring = 0.2, lesion = 0.65;

  Image raw(n, n);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const std::size_t p = y * n + x;
      double tex = 0.0;
      for (std::size_t k = 0; k < 3; ++k) {
        tex += amp[k] * std::sin(fy[k] * static_cast<double>(y) + fx[k] * static_cast<double>(x) + ph[k]);
      }
      double v = bg + tex;
      if (distractor[p]) v = lesion + tex;
      if (sc.structure.data[p] == 1) v = disk;
      if (sc.structure.data[p] == 2) v = sc.pathology.data[p] ? lesion : ring;
      v = gain * v + offset + rng.normal(0.0, noise_sigma);
      raw.data[p] = static_cast<float>(v);
    }
  }
  // Normalize, then quantize to the 8-bit grid that the dataset files store.
  sc.image = normalize_intensity(raw);
  for (float& v : sc.image.data) v = static_cast<float>(std::lround(v * 255.0f)) / 255.0f;
  return sc;
}

std::string scene_id(std::size_t i) {
  std::string digits = std::to_string(i);
  return "scene_" + std::string(digits.size() < 4 ? 4 - digits.size() : 0, '0') + digits;
}

// Chooses `k` labeled train items so every class appears in some scribble.
void assign_labels(TaskDataset& ds, std::size_t train_count, std::size_t k, const ScribblePolicy& policy,
                   SeededRng& rng) {
  for (int attempt = 0;; ++attempt) {
    std::vector<std::size_t> idx(train_count);
    for (std::size_t i = 0; i < train_count; ++i) idx[i] = i;
    for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(train_count - i)]);
    std::vector<bool> seen(static_cast<std::size_t>(ds.num_classes), false);
    std::vector<ScribbleMap> maps;
    for (std::size_t i = 0; i < k; ++i) {
      maps.push_back(scribblize(ds.items[idx[i]].label, ds.num_classes, policy, rng).scribble);
      for (std::size_t p = 0; p < maps.back().labels.size(); ++p) {
        if (maps.back().annotated(p)) seen[maps.back().labels.data[p]] = true;
      }
    }
    if (std::all_of(seen.begin(), seen.end(), [](bool b) { return b; })) {
      for (std::size_t i = 0; i < k; ++i) {
        ds.items[idx[i]].labeled = true;
        ds.items[idx[i]].scribble = std::move(maps[i]);
      }
      return;
    }
    if (attempt > 64) {
      throw ContractViolation("generate_task_pair: cannot find labeled items covering every class of " + ds.name);
    }
  }
}

}  // namespace

std::pair<TaskDataset, TaskDataset> generate_task_pair(std::uint64_t seed, const SynthConfig& cfg) {
  cfg.validate();
  SeededRng master(seed);
  TaskDataset structure{"structure", 3, cfg.size, cfg.size, {}};
  TaskDataset pathology{"pathology", 2, cfg.size, cfg.size, {}};
  const std::size_t train = cfg.labeled + cfg.unlabeled;
  for (std::size_t i = 0; i < cfg.scene_count(); ++i) {
    SeededRng scene_rng = master.fork(i);
    Scene sc = render_scene(cfg.size, cfg.noise_sigma, cfg.min_lesion_pixels, scene_rng);
    const Split split = i < train ? Split::kTrain : (i < train + cfg.val ? Split::kVal : Split::kTest);
    structure.items.push_back({scene_id(i), sc.image, sc.structure, ScribbleMap(cfg.size, cfg.size, 3), split, false});
    pathology.items.push_back(
        {scene_id(i), std::move(sc.image), std::move(sc.pathology), ScribbleMap(cfg.size, cfg.size, 2), split, false});
  }
  SeededRng label_rng_s = master.fork(1u << 20);
  SeededRng label_rng_p = master.fork((1u << 20) + 1);
  assign_labels(structure, train, cfg.labeled, cfg.scribble, label_rng_s);
  assign_labels(pathology, train, cfg.labeled, cfg.scribble, label_rng_p);
  return {std::move(structure), std::move(pathology)};
}

namespace {

constexpr std::uint8_t kFileUnlabeled = 255;

Grid<std::uint8_t> image_to_bytes(const Image& im) {
  Grid<std::uint8_t> g(im.h, im.w);
  for (std::size_t i = 0; i < im.size(); ++i) {
    g.data[i] = static_cast<std::uint8_t>(std::clamp(std::lround(im.data[i] * 255.0f), 0L, 255L));
  }
  return g;
}

const json& field(const json& obj, const char* key, const std::filesystem::path& manifest) {
  auto it = obj.find(key);
  if (it == obj.end()) throw IoError("corrupt manifest " + manifest.string() + ": missing field '" + key + "'");
  return *it;
}

}  // namespace

void write_dataset(const TaskDataset& ds, const std::filesystem::path& dir) {
  ds.validate();
  json items = json::array();
  for (const auto& it : ds.items) {
    const std::string image = "images/" + it.id + ".pgm", label = "labels/" + it.id + ".pgm",
                      scribble = "scribbles/" + it.id + ".pgm";
    write_pgm(dir / image, image_to_bytes(it.image));
    write_pgm(dir / label, it.label);
    Grid<std::uint8_t> sc = it.scribble.labels;
    for (auto& v : sc.data) {
      if (v == it.scribble.unlabeled()) v = kFileUnlabeled;
    }
    write_pgm(dir / scribble, sc);
    items.push_back({{"id", it.id},
                     {"image", image},
                     {"label", label},
                     {"scribble", scribble},
                     {"split", to_string(it.split)},
                     {"labeled", it.labeled}});
  }
  json manifest = {{"name", ds.name},
                   {"num_classes", ds.num_classes},
                   {"image_size", {ds.height, ds.width}},
                   {"items", std::move(items)}};
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

TaskDataset read_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  json m;
  try {
    m = json::parse(read_text_file(manifest_path));
  } catch (const json::exception& e) {
    throw IoError("corrupt manifest " + manifest_path.string() + ": " + e.what());
  }
  TaskDataset ds;
  try {
    ds.name = field(m, "name", manifest_path).get<std::string>();
    ds.num_classes = field(m, "num_classes", manifest_path).get<int>();
    const auto& size = field(m, "image_size", manifest_path);
    if (!size.is_array() || size.size() != 2) {
      throw IoError("corrupt manifest " + manifest_path.string() + ": image_size must be [h, w]");
    }
    ds.height = size[0].get<std::size_t>();
    ds.width = size[1].get<std::size_t>();
    if (ds.num_classes < 2 || ds.num_classes > 254) {
      throw ContractViolation("dataset '" + ds.name + "': num_classes must lie in [2, 254], got " +
                              std::to_string(ds.num_classes));
    }
    for (const auto& e : field(m, "items", manifest_path)) {
      DatasetItem it;
      it.id = field(e, "id", manifest_path).get<std::string>();
      it.split = parse_split(field(e, "split", manifest_path).get<std::string>());
      it.labeled = field(e, "labeled", manifest_path).get<bool>();
      const auto bytes = read_pgm(dir / field(e, "image", manifest_path).get<std::string>());
      it.image = Image(bytes.h, bytes.w);
      for (std::size_t i = 0; i < bytes.size(); ++i) it.image.data[i] = static_cast<float>(bytes.data[i]) / 255.0f;
      it.label = read_pgm(dir / field(e, "label", manifest_path).get<std::string>());
      it.scribble.num_classes = ds.num_classes;
      it.scribble.labels = read_pgm(dir / field(e, "scribble", manifest_path).get<std::string>());
      for (auto& v : it.scribble.labels.data) {
        if (v == kFileUnlabeled) {
          v = it.scribble.unlabeled();
        } else if (v >= ds.num_classes) {
          throw ContractViolation("dataset '" + ds.name + "': item " + it.id + " scribble value " +
                                  std::to_string(v) + " >= num_classes");
        }
      }
      ds.items.push_back(std::move(it));
    }
  } catch (const json::exception& e) {
    throw IoError("corrupt manifest " + manifest_path.string() + ": " + e.what());
  }
  ds.validate();
  return ds;
}

}  // namespace modelmix
