#pragma once

#include <cstddef>

#include "modelmix/grid.hpp"
#include "modelmix/rng.hpp"

namespace modelmix {

struct CutoutSpec {
  double side_fraction = 0.25;

  void validate() const;
  /// round(side_fraction * min(h, w)); throws if that exceeds the image.
  std::size_t side_for(std::size_t h, std::size_t w) const;
  bool operator==(const CutoutSpec&) const = default;
};

/// `mask` is 1 where pixels are kept and 0 inside the square, so image = mask * original.
struct CutoutResult {
  Image image;
  Mask mask;
  std::size_t y0 = 0;
  std::size_t x0 = 0;
  std::size_t side = 0;
};

CutoutResult cutout(const Image& x, const CutoutSpec& spec, SeededRng& rng);

/// alpha * a + (1 - alpha) * b.
Image mixup_images(const Image& a, const Image& b, double alpha);

/// (x - min) / (max - min); a constant image maps to zeros.
Image normalize_intensity(const Image& image);

/// Crop window (in source pixels), then resize back, then rotate by
/// rot90 quarter turns counter-clockwise, then optionally flip left-right.
struct GeomParams {
  int rot90 = 0;
  bool flip = false;
  std::size_t crop_y0 = 0;
  std::size_t crop_x0 = 0;
  std::size_t crop_h = 0;
  std::size_t crop_w = 0;

  static GeomParams identity(std::size_t h, std::size_t w) { return {0, false, 0, 0, h, w}; }
  bool operator==(const GeomParams&) const = default;
};

/// Crop area is at least `min_crop_area` of the image. Non-square images only
/// draw half turns so the output keeps its dimensions.
GeomParams sample_geom(std::size_t h, std::size_t w, SeededRng& rng, double min_crop_area = 0.75);

struct GeomTriple {
  Image image;
  LabelMap label;
  ScribbleMap scribble;
};

/// Bilinear resize for the image, nearest for label and scribble. The label may
/// be empty (0x0), in which case it is passed through.
GeomTriple apply_geom(const Image& image, const LabelMap& label, const ScribbleMap& scribble, const GeomParams& p);

GeomTriple geom_augment(const Image& image, const LabelMap& label, const ScribbleMap& scribble, SeededRng& rng);

}  // namespace modelmix
