#include <gtest/gtest.h>

#include <set>

#include "modelmix/augment.hpp"

using namespace modelmix;

namespace {

Image ramp(std::size_t h, std::size_t w) {
  Image g(h, w);
  for (std::size_t i = 0; i < g.size(); ++i) g.data[i] = static_cast<float>(i);
  return g;
}

LabelMap random_labels(std::size_t h, std::size_t w, int classes, SeededRng& rng) {
  LabelMap g(h, w);
  for (auto& v : g.data) v = static_cast<std::uint8_t>(rng.below(static_cast<std::uint64_t>(classes)));
  return g;
}

template <typename V>
std::set<V> values(const Grid<V>& g) {
  return std::set<V>(g.data.begin(), g.data.end());
}

}  // namespace

TEST(Cutout, ZeroesExactlyOneSquare) {
  SeededRng rng(1);
  Image x(32, 24, 0.0f);
  for (auto& v : x.data) v = static_cast<float>(rng.uniform(0.1, 1.0));
  const CutoutSpec spec{0.25};
  EXPECT_EQ(spec.side_for(32, 24), 6u);
  for (int trial = 0; trial < 50; ++trial) {
    const CutoutResult r = cutout(x, spec, rng);
    ASSERT_EQ(r.side, 6u);
    ASSERT_LE(r.y0 + r.side, 32u);
    ASSERT_LE(r.x0 + r.side, 24u);
    std::size_t zeros = 0;
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t c = 0; c < 24; ++c) {
        const bool inside = y >= r.y0 && y < r.y0 + 6 && c >= r.x0 && c < r.x0 + 6;
        EXPECT_EQ(r.mask.at(y, c), inside ? 0 : 1);
        EXPECT_EQ(r.image.at(y, c), inside ? 0.0f : x.at(y, c));
        zeros += r.image.at(y, c) == 0.0f;
      }
    EXPECT_EQ(zeros, 36u);
  }
}

TEST(Cutout, IdempotentMaskAndReproducible) {
  SeededRng rng(2);
  const Image x = ramp(16, 16);
  SeededRng a(9), b(9);
  const CutoutResult r1 = cutout(x, CutoutSpec{0.3}, a);
  const CutoutResult r2 = cutout(x, CutoutSpec{0.3}, b);
  EXPECT_EQ(r1.image, r2.image);
  EXPECT_EQ(r1.y0, r2.y0);
  Image masked = r1.image;
  for (std::size_t i = 0; i < masked.size(); ++i) masked.data[i] *= r1.mask.data[i];
  EXPECT_EQ(masked, r1.image);
}

TEST(Cutout, PositionsCoverTheImage) {
  SeededRng rng(3);
  const Image x = ramp(8, 8);
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (int i = 0; i < 2000; ++i) {
    const CutoutResult r = cutout(x, CutoutSpec{0.5}, rng);
    seen.insert({r.y0, r.x0});
  }
  EXPECT_EQ(seen.size(), 25u);  // (8 - 4 + 1)^2
}

TEST(Cutout, InvalidSpecs) {
  SeededRng rng(4);
  EXPECT_THROW(CutoutSpec{0.0}.validate(), ContractViolation);
  EXPECT_THROW(CutoutSpec{1.0}.validate(), ContractViolation);
  EXPECT_THROW(CutoutSpec{-0.5}.side_for(8, 8), ContractViolation);
  EXPECT_EQ(cutout(Image(1, 1, 1.0f), CutoutSpec{0.9}, rng).image, Image(1, 1, 0.0f));
}

TEST(Mixup, ConvexCombination) {
  const Image zeros(4, 4, 0.0f), ones(4, 4, 1.0f);
  EXPECT_EQ(mixup_images(zeros, ones, 0.5), Image(4, 4, 0.5f));
  const Image a = ramp(3, 5);
  Image b = ramp(3, 5);
  for (auto& v : b.data) v = 20.0f - v;
  EXPECT_EQ(mixup_images(a, b, 1.0), a);
  EXPECT_EQ(mixup_images(a, b, 0.0), b);
  const Image m = mixup_images(a, b, 0.3), n = mixup_images(b, a, 0.7);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NEAR(m.data[i], 0.3 * a.data[i] + 0.7 * b.data[i], 1e-5);
    EXPECT_GE(m.data[i], std::min(a.data[i], b.data[i]) - 1e-5);
    EXPECT_LE(m.data[i], std::max(a.data[i], b.data[i]) + 1e-5);
    EXPECT_NEAR(m.data[i] + mixup_images(b, a, 0.3).data[i], a.data[i] + b.data[i], 1e-5);
    EXPECT_NEAR(m.data[i], n.data[i], 1e-5);
  }
  EXPECT_THROW(mixup_images(a, Image(5, 3), 0.5), ContractViolation);
  EXPECT_THROW(mixup_images(a, b, 1.5), ContractViolation);
}

TEST(Normalize, Examples) {
  Image x(1, 3);
  x.data = {10.0f, 15.0f, 20.0f};
  const Image n = normalize_intensity(x);
  EXPECT_EQ(n.data, (std::vector<float>{0.0f, 0.5f, 1.0f}));
  Image unit(1, 3);
  unit.data = {0.0f, 0.25f, 1.0f};
  EXPECT_EQ(normalize_intensity(unit), unit);
  EXPECT_EQ(normalize_intensity(Image(2, 2, 7.0f)), Image(2, 2, 0.0f));
}

TEST(Geom, QuarterTurnIsCounterClockwise) {
  Image x(2, 2);
  x.data = {1, 2, 3, 4};
  const ScribbleMap s(2, 2, 3);
  const GeomTriple r = apply_geom(x, LabelMap(), s, GeomParams{1, false, 0, 0, 2, 2});
  EXPECT_EQ(r.image.data, (std::vector<float>{2, 4, 1, 3}));
  EXPECT_EQ(r.label.size(), 0u);
  const GeomTriple f = apply_geom(x, LabelMap(), s, GeomParams{0, true, 0, 0, 2, 2});
  EXPECT_EQ(f.image.data, (std::vector<float>{2, 1, 4, 3}));
}

TEST(Geom, IdentityAndInvolutions) {
  SeededRng rng(5);
  const Image x = ramp(6, 6);
  const LabelMap l = random_labels(6, 6, 3, rng);
  ScribbleMap s(6, 6, 3);
  s.labels.at(2, 3) = 1;
  const GeomTriple id = apply_geom(x, l, s, GeomParams::identity(6, 6));
  EXPECT_EQ(id.image, x);
  EXPECT_EQ(id.label, l);
  EXPECT_EQ(id.scribble, s);

  const GeomTriple once = apply_geom(x, l, s, GeomParams{2, false, 0, 0, 6, 6});
  const GeomTriple twice = apply_geom(once.image, once.label, once.scribble, GeomParams{2, false, 0, 0, 6, 6});
  EXPECT_EQ(twice.image, x);
  EXPECT_EQ(twice.label, l);
  EXPECT_EQ(twice.scribble, s);
  EXPECT_EQ(apply_geom(x, l, s, GeomParams{4, false, 0, 0, 6, 6}).image, x);
  const GeomTriple flipped = apply_geom(x, l, s, GeomParams{0, true, 0, 0, 6, 6});
  EXPECT_EQ(apply_geom(flipped.image, flipped.label, flipped.scribble, GeomParams{0, true, 0, 0, 6, 6}).label, l);
}

TEST(Geom, HalfCropDuplicatesPixels) {
  const Image x = ramp(4, 4);
  LabelMap l(4, 4);
  for (std::size_t i = 0; i < 16; ++i) l.data[i] = static_cast<std::uint8_t>(i);
  const ScribbleMap s(4, 4, 20);
  const GeomTriple r = apply_geom(x, l, s, GeomParams{0, false, 1, 1, 2, 2});
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(r.label.at(y, c), l.at(1 + y / 2, 1 + c / 2));
  // Bilinear of a linear ramp stays linear between sample centres.
  EXPECT_FLOAT_EQ(r.image.at(1, 1) + r.image.at(2, 2), x.at(1, 1) + x.at(2, 2));
  EXPECT_FLOAT_EQ(r.image.at(0, 0), x.at(1, 1));
  EXPECT_FLOAT_EQ(r.image.at(3, 3), x.at(2, 2));
}

TEST(Geom, ConstantImageStaysConstant) {
  SeededRng rng(6);
  const Image x(16, 16, 0.375f);
  const ScribbleMap s(16, 16, 2);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(geom_augment(x, LabelMap(), s, rng).image, x);
}

TEST(Geom, NeverInventsClassesOrRelabels) {
  SeededRng rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    const Image x = ramp(16, 16);
    LabelMap l(16, 16, 0);
    for (std::size_t y = 4; y < 10; ++y)
      for (std::size_t c = 3; c < 12; ++c) l.at(y, c) = y < 7 ? 1 : 2;
    ScribbleMap s(16, 16, 3);
    for (std::size_t i = 0; i < l.size(); ++i)
      if (rng.bernoulli(0.2)) s.labels.data[i] = l.data[i];
    const GeomTriple r = geom_augment(x, l, s, rng);
    for (auto v : values(r.label)) EXPECT_TRUE(values(l).count(v));
    for (auto v : values(r.scribble.labels)) EXPECT_TRUE(values(s.labels).count(v));
    for (std::size_t i = 0; i < r.label.size(); ++i) {
      if (r.scribble.annotated(i)) EXPECT_EQ(r.scribble.labels.data[i], r.label.data[i]);
    }
  }
}

TEST(Geom, SampledParametersRespectBounds) {
  SeededRng rng(8);
  std::set<int> rots;
  for (int i = 0; i < 500; ++i) {
    const GeomParams p = sample_geom(20, 20, rng);
    rots.insert(p.rot90);
    EXPECT_GE(static_cast<double>(p.crop_h * p.crop_w), 0.75 * 400.0);
    EXPECT_LE(p.crop_y0 + p.crop_h, 20u);
    EXPECT_LE(p.crop_x0 + p.crop_w, 20u);
    const GeomParams q = sample_geom(20, 30, rng);
    EXPECT_EQ(q.rot90 % 2, 0);
  }
  EXPECT_EQ(rots.size(), 4u);
  SeededRng a(3), b(3);
  EXPECT_EQ(sample_geom(20, 20, a), sample_geom(20, 20, b));
}

TEST(Geom, RejectsInconsistentInputs) {
  const ScribbleMap s(4, 4, 2);
  EXPECT_THROW(apply_geom(Image(4, 5), LabelMap(), s, GeomParams::identity(4, 5)), ContractViolation);
  EXPECT_THROW(apply_geom(Image(4, 4), LabelMap(3, 3), s, GeomParams::identity(4, 4)), ContractViolation);
  EXPECT_THROW(apply_geom(Image(4, 4), LabelMap(), s, GeomParams{0, false, 2, 2, 3, 3}), ContractViolation);
}
