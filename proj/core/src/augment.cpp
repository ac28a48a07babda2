#include "modelmix/augment.hpp"

#include <algorithm>
#include <cmath>

namespace modelmix {

void CutoutSpec::validate() const {
  if (!(side_fraction > 0.0 && side_fraction < 1.0)) {
    throw ContractViolation("CutoutSpec: side_fraction must lie in (0, 1), got " + std::to_string(side_fraction));
  }
}

std::size_t CutoutSpec::side_for(std::size_t h, std::size_t w) const {
  validate();
  const auto side = static_cast<std::size_t>(std::lround(side_fraction * static_cast<double>(std::min(h, w))));
  if (side > h || side > w) {
    throw ContractViolation("cutout: side " + std::to_string(side) + " exceeds image " + std::to_string(h) + "x" +
                            std::to_string(w));
  }
  return side;
}

CutoutResult cutout(const Image& x, const CutoutSpec& spec, SeededRng& rng) {
  CutoutResult r;
  r.side = spec.side_for(x.h, x.w);
  r.y0 = static_cast<std::size_t>(rng.below(x.h - r.side + 1));
  r.x0 = static_cast<std::size_t>(rng.below(x.w - r.side + 1));
  r.image = x;
  r.mask = Mask(x.h, x.w, 1);
  for (std::size_t y = r.y0; y < r.y0 + r.side; ++y) {
    for (std::size_t xx = r.x0; xx < r.x0 + r.side; ++xx) {
      r.image.at(y, xx) = 0.0f;
      r.mask.at(y, xx) = 0;
    }
  }
  return r;
}

Image mixup_images(const Image& a, const Image& b, double alpha) {
  if (!a.same_dims(b)) {
    throw ContractViolation("mixup_images: shape mismatch " + std::to_string(a.h) + "x" + std::to_string(a.w) +
                            " vs " + std::to_string(b.h) + "x" + std::to_string(b.w));
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ContractViolation("mixup_images: alpha must lie in [0, 1], got " + std::to_string(alpha));
  }
  Image out(a.h, a.w);
  for (std::size_t i = 0; i < a.size(); ++i) {
    out.data[i] = static_cast<float>(alpha * a.data[i] + (1.0 - alpha) * b.data[i]);
  }
  return out;
}

Image normalize_intensity(const Image& image) {
  Image out(image.h, image.w, 0.0f);
  if (image.data.empty()) return out;
  const auto [lo, hi] = std::minmax_element(image.data.begin(), image.data.end());
  const double mn = *lo;
  const double range = static_cast<double>(*hi) - mn;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < image.size(); ++i) {
    out.data[i] = static_cast<float>((image.data[i] - mn) / range);
  }
  return out;
}

GeomParams sample_geom(std::size_t h, std::size_t w, SeededRng& rng, double min_crop_area) {
  if (!(min_crop_area > 0.0 && min_crop_area <= 1.0)) {
    throw ContractViolation("sample_geom: min_crop_area must lie in (0, 1]");
  }
  GeomParams p;
  p.rot90 = h == w ? static_cast<int>(rng.below(4)) : 2 * static_cast<int>(rng.below(2));
  p.flip = rng.bernoulli(0.5);
  const double area = rng.uniform(min_crop_area, 1.0);
  const double side_scale = std::sqrt(area);
  p.crop_h = std::min(h, static_cast<std::size_t>(std::ceil(side_scale * static_cast<double>(h))));
  p.crop_w = std::min(w, static_cast<std::size_t>(std::ceil(side_scale * static_cast<double>(w))));
  p.crop_y0 = static_cast<std::size_t>(rng.below(h - p.crop_h + 1));
  p.crop_x0 = static_cast<std::size_t>(rng.below(w - p.crop_w + 1));
  return p;
}

namespace {

// Destination pixel centre mapped into the crop window.
double source_coord(std::size_t dst, std::size_t crop, std::size_t out) {
  return (static_cast<double>(dst) + 0.5) * static_cast<double>(crop) / static_cast<double>(out) - 0.5;
}

std::size_t nearest_index(std::size_t dst, std::size_t crop, std::size_t out) {
  const auto s = static_cast<std::size_t>(std::floor((static_cast<double>(dst) + 0.5) * static_cast<double>(crop) /
                                                     static_cast<double>(out)));
  return std::min(s, crop - 1);
}

template <typename V>
Grid<V> crop_nearest(const Grid<V>& g, const GeomParams& p) {
  Grid<V> out(g.h, g.w);
  for (std::size_t y = 0; y < g.h; ++y) {
    const std::size_t sy = p.crop_y0 + nearest_index(y, p.crop_h, g.h);
    for (std::size_t x = 0; x < g.w; ++x) out.at(y, x) = g.at(sy, p.crop_x0 + nearest_index(x, p.crop_w, g.w));
  }
  return out;
}

Image crop_bilinear(const Image& g, const GeomParams& p) {
  Image out(g.h, g.w);
  auto clampd = [](double v, std::size_t n) { return std::clamp(v, 0.0, static_cast<double>(n - 1)); };
  for (std::size_t y = 0; y < g.h; ++y) {
    const double fy = clampd(source_coord(y, p.crop_h, g.h), p.crop_h);
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, p.crop_h - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < g.w; ++x) {
      const double fx = clampd(source_coord(x, p.crop_w, g.w), p.crop_w);
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, p.crop_w - 1);
      const double tx = fx - static_cast<double>(x0);
      auto px = [&](std::size_t yy, std::size_t xx) {
        return static_cast<double>(g.at(p.crop_y0 + yy, p.crop_x0 + xx));
      };
      double v = px(y0, x0);
      if (ty != 0.0 || tx != 0.0) {
        v = (1 - ty) * ((1 - tx) * px(y0, x0) + tx * px(y0, x1)) + ty * ((1 - tx) * px(y1, x0) + tx * px(y1, x1));
      }
      out.at(y, x) = static_cast<float>(v);
    }
  }
  return out;
}

template <typename V>
Grid<V> rotate_flip(const Grid<V>& g, int rot90, bool flip) {
  Grid<V> cur = g;
  for (int r = 0; r < ((rot90 % 4) + 4) % 4; ++r) {
    Grid<V> next(cur.w, cur.h);
    // counter-clockwise quarter turn: out(y, x) = in(x, w - 1 - y)
    for (std::size_t y = 0; y < next.h; ++y) {
      for (std::size_t x = 0; x < next.w; ++x) next.at(y, x) = cur.at(x, cur.w - 1 - y);
    }
    cur = std::move(next);
  }
  if (flip) {
    for (std::size_t y = 0; y < cur.h; ++y) std::reverse(cur.data.begin() + y * cur.w, cur.data.begin() + (y + 1) * cur.w);
  }
  return cur;
}

bool is_full_crop(const GeomParams& p, std::size_t h, std::size_t w) {
  return p.crop_y0 == 0 && p.crop_x0 == 0 && p.crop_h == h && p.crop_w == w;
}

}  // namespace

GeomTriple apply_geom(const Image& image, const LabelMap& label, const ScribbleMap& scribble, const GeomParams& p) {
  const bool has_label = label.h != 0 || label.w != 0;
  if ((has_label && !label.same_dims(image)) || !scribble.labels.same_dims(image)) {
    throw ContractViolation("geom_augment: image, label and scribble dimensions differ");
  }
  if (p.crop_h == 0 || p.crop_w == 0 || p.crop_y0 + p.crop_h > image.h || p.crop_x0 + p.crop_w > image.w) {
    throw ContractViolation("geom_augment: crop window outside the image");
  }
  if (image.h != image.w && p.rot90 % 2 != 0) {
    throw ContractViolation("geom_augment: quarter turns need a square image");
  }
  const bool full = is_full_crop(p, image.h, image.w);
  GeomTriple out;
  out.image = rotate_flip(full ? image : crop_bilinear(image, p), p.rot90, p.flip);
  if (has_label) out.label = rotate_flip(full ? label : crop_nearest(label, p), p.rot90, p.flip);
  out.scribble.num_classes = scribble.num_classes;
  out.scribble.labels = rotate_flip(full ? scribble.labels : crop_nearest(scribble.labels, p), p.rot90, p.flip);
  return out;
}

GeomTriple geom_augment(const Image& image, const LabelMap& label, const ScribbleMap& scribble, SeededRng& rng) {
  return apply_geom(image, label, scribble, sample_geom(image.h, image.w, rng));
}

}  // namespace modelmix
