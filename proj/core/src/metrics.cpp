#include "modelmix/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "modelmix/augment.hpp"
#include "modelmix/io_util.hpp"

namespace modelmix {

namespace {

void require_same_dims(const Mask& a, const Mask& b, const char* op) {
  if (!a.same_dims(b)) {
    throw ContractViolation(std::string(op) + ": shape mismatch " + std::to_string(a.h) + "x" + std::to_string(a.w) +
                            " vs " + std::to_string(b.h) + "x" + std::to_string(b.w));
  }
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// Lower envelope of parabolas over one row or column (in place).
void edt_1d(const double* f, double* d, std::size_t n, std::vector<std::size_t>& v, std::vector<double>& z) {
  std::size_t k = 0;
  std::size_t first = n;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] < kInf) {
      first = q;
      break;
    }
  }
  if (first == n) {
    std::fill(d, d + n, kInf);
    return;
  }
  v[0] = first;
  z[0] = -kInf;
  z[1] = kInf;
  for (std::size_t q = first + 1; q < n; ++q) {
    if (f[q] == kInf) continue;
    const auto dq = static_cast<double>(q);
    double s;
    for (;;) {
      const auto dv = static_cast<double>(v[k]);
      s = ((f[q] + dq * dq) - (f[v[k]] + dv * dv)) / (2.0 * (dq - dv));
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    if (s <= z[k]) {
      v[k] = q;
      z[k + 1] = kInf;
      continue;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double diff = static_cast<double>(q) - static_cast<double>(v[k]);
    d[q] = diff * diff + f[v[k]];
  }
}

}  // namespace

double dice_score(const Mask& pred, const Mask& gt) {
  require_same_dims(pred, gt, "dice_score");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred.data[i] != 0, b = gt.data[i] != 0;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

std::vector<double> squared_distance_transform(const Mask& mask) {
  const std::size_t h = mask.h, w = mask.w;
  std::vector<double> grid(h * w);
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = mask.data[i] ? 0.0 : kInf;
  const std::size_t n = std::max(h, w);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<std::size_t> v(n);
  for (std::size_t x = 0; x < w; ++x) {
    for (std::size_t y = 0; y < h; ++y) f[y] = grid[y * w + x];
    edt_1d(f.data(), d.data(), h, v, z);
    for (std::size_t y = 0; y < h; ++y) grid[y * w + x] = d[y];
  }
  for (std::size_t y = 0; y < h; ++y) {
    std::copy_n(grid.begin() + static_cast<std::ptrdiff_t>(y * w), w, f.begin());
    edt_1d(f.data(), d.data(), w, v, z);
    std::copy_n(d.begin(), w, grid.begin() + static_cast<std::ptrdiff_t>(y * w));
  }
  return grid;
}

double hausdorff(const Mask& pred, const Mask& gt) {
  require_same_dims(pred, gt, "hausdorff");
  const bool any_p = std::any_of(pred.data.begin(), pred.data.end(), [](auto v) { return v != 0; });
  const bool any_g = std::any_of(gt.data.begin(), gt.data.end(), [](auto v) { return v != 0; });
  if (!any_p && !any_g) return 0.0;
  if (!any_p || !any_g) {
    return std::sqrt(static_cast<double>(pred.h * pred.h + pred.w * pred.w));
  }
  const auto to_g = squared_distance_transform(gt);
  const auto to_p = squared_distance_transform(pred);
  double worst = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred.data[i]) worst = std::max(worst, to_g[i]);
    if (gt.data[i]) worst = std::max(worst, to_p[i]);
  }
  return std::sqrt(worst);
}

LabelMap argmax_labels(const Tensor4<float>& probs, std::size_t n) {
  const Shape4 s = probs.shape();
  if (n >= s.n) throw ContractViolation("argmax_labels: item " + std::to_string(n) + " outside batch " + s.str());
  LabelMap out(s.h, s.w, 0);
  for (std::size_t p = 0; p < s.plane(); ++p) {
    float best = probs.plane(n, 0)[p];
    for (std::size_t c = 1; c < s.c; ++c) {
      const float v = probs.plane(n, c)[p];
      if (v > best) {
        best = v;
        out.data[p] = static_cast<std::uint8_t>(c);
      }
    }
  }
  return out;
}

Mask class_mask(const LabelMap& labels, int cls) {
  Mask m(labels.h, labels.w, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) m.data[i] = labels.data[i] == cls;
  return m;
}

void aggregate(MetricReport& r) {
  const auto classes = static_cast<std::size_t>(r.num_classes);
  r.per_class.assign(classes, {});
  r.mean_dice = r.mean_hd = 0.0;
  if (r.items.empty()) return;
  const auto n = static_cast<double>(r.items.size());
  for (std::size_t c = 0; c < classes; ++c) {
    double sd = 0, sh = 0;
    for (const auto& it : r.items) {
      sd += it.dice[c];
      sh += it.hd[c];
    }
    ClassStats& cs = r.per_class[c];
    cs.dice_mean = sd / n;
    cs.hd_mean = sh / n;
    double vd = 0, vh = 0;
    for (const auto& it : r.items) {
      vd += (it.dice[c] - cs.dice_mean) * (it.dice[c] - cs.dice_mean);
      vh += (it.hd[c] - cs.hd_mean) * (it.hd[c] - cs.hd_mean);
    }
    cs.dice_std = std::sqrt(vd / n);
    cs.hd_std = std::sqrt(vh / n);
  }
  for (std::size_t c = 1; c < classes; ++c) {
    r.mean_dice += r.per_class[c].dice_mean;
    r.mean_hd += r.per_class[c].hd_mean;
  }
  r.mean_dice /= static_cast<double>(classes - 1);
  r.mean_hd /= static_cast<double>(classes - 1);
}

MetricReport evaluate(const Predictor& predictor, const TaskDataset& dataset, Split split, std::size_t batch) {
  if (batch == 0) throw ContractViolation("evaluate: batch must be >= 1");
  MetricReport r;
  r.dataset = dataset.name;
  r.split = split;
  r.num_classes = dataset.num_classes;
  const auto items = dataset.split(split);
  for (std::size_t start = 0; start < items.size(); start += batch) {
    const std::size_t end = std::min(items.size(), start + batch);
    std::vector<const Image*> images;
    for (std::size_t k = start; k < end; ++k) images.push_back(&items[k]->image);
    const Tensor4<float> probs = predictor(stack_images<float>(images));
    const Shape4 s = probs.shape();
    if (s.c != static_cast<std::size_t>(dataset.num_classes)) {
      throw ContractViolation("evaluate: predictor emits " + std::to_string(s.c) + " classes, dataset '" +
                              dataset.name + "' has " + std::to_string(dataset.num_classes));
    }
    if (s.n != end - start || s.h != dataset.height || s.w != dataset.width) {
      throw ContractViolation("evaluate: predictor output shape " + s.str() + " does not match the batch");
    }
    for (std::size_t k = start; k < end; ++k) {
      const LabelMap pred = argmax_labels(probs, k - start);
      ItemMetrics m;
      m.id = items[k]->id;
      for (int c = 0; c < dataset.num_classes; ++c) {
        const Mask pm = class_mask(pred, c), gm = class_mask(items[k]->label, c);
        m.dice.push_back(dice_score(pm, gm));
        m.hd.push_back(hausdorff(pm, gm));
      }
      r.items.push_back(std::move(m));
    }
  }
  aggregate(r);
  return r;
}

MetricReport evaluate(const SegModel<float>& model, const TaskDataset& dataset, Split split, std::size_t batch) {
  if (model.config().num_classes != dataset.num_classes) {
    throw ContractViolation("evaluate: model has " + std::to_string(model.config().num_classes) +
                            " classes, dataset '" + dataset.name + "' has " + std::to_string(dataset.num_classes));
  }
  // Same per-image intensity scaling as training.
  auto predictor = [&model](const Tensor4<float>& x) {
    Tensor4<float> scaled(x.shape());
    const std::size_t h = x.h(), w = x.w();
    for (std::size_t n = 0; n < x.n(); ++n) {
      Image img(h, w);
      std::copy_n(x.plane(n, 0), h * w, img.data.begin());
      const Image out = normalize_intensity(img);
      std::copy(out.data.begin(), out.data.end(), scaled.plane(n, 0));
    }
    return model.predict(scaled);
  };
  return evaluate(predictor, dataset, split, batch);
}

std::string report_csv(const MetricReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "item_id,class,dice,hd\n";
  for (const auto& it : r.items) {
    for (std::size_t c = 0; c < it.dice.size(); ++c) os << it.id << ',' << c << ',' << it.dice[c] << ',' << it.hd[c] << '\n';
  }
  return os.str();
}

std::string report_summary_json(const MetricReport& r) {
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& s = r.per_class[c];
    classes.push_back({{"class", c},
                       {"dice_mean", s.dice_mean},
                       {"dice_std", s.dice_std},
                       {"hd_mean", s.hd_mean},
                       {"hd_std", s.hd_std}});
  }
  nlohmann::json j = {{"dataset", r.dataset},   {"split", to_string(r.split)}, {"num_classes", r.num_classes},
                      {"count", r.count()},     {"mean_dice", r.mean_dice},   {"mean_hd", r.mean_hd},
                      {"per_class", classes}};
  return j.dump(2) + "\n";
}

void write_report(const MetricReport& report, const std::filesystem::path& csv_path) {
  write_text_file(csv_path, report_csv(report));
  auto json_path = csv_path;
  json_path.replace_extension(".json");
  write_text_file(json_path, report_summary_json(report));
}

}  // namespace modelmix
