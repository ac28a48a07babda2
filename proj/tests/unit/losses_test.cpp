#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "modelmix/gradcheck.hpp"
#include "modelmix/losses.hpp"
#include "modelmix/mixer.hpp"
#include "modelmix/ops.hpp"

using namespace modelmix;

namespace {

// Random per-pixel distributions of shape (n, c, h, w).
Tensor4<double> random_probs(Shape4 s, SeededRng& rng) {
  Tensor4<double> p(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x) {
        double total = 0.0;
        for (std::size_t c = 0; c < s.c; ++c) total += p(n, c, y, x) = rng.uniform(0.05, 1.0);
        for (std::size_t c = 0; c < s.c; ++c) p(n, c, y, x) /= total;
      }
  return p;
}

std::vector<ScribbleMap> random_scribbles(std::size_t n, std::size_t h, std::size_t w, int classes, double density,
                                          SeededRng& rng) {
  std::vector<ScribbleMap> out;
  for (std::size_t k = 0; k < n; ++k) {
    ScribbleMap s(h, w, classes);
    for (auto& v : s.labels.data) {
      if (rng.bernoulli(density)) v = static_cast<std::uint8_t>(rng.below(static_cast<std::uint64_t>(classes)));
    }
    out.push_back(std::move(s));
  }
  return out;
}

// Direct sums over annotated pixels.
double oracle_supervised(const Tensor4<double>& p, const std::vector<ScribbleMap>& s, bool dice_term) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t n = 0; n < p.n(); ++n)
    for (std::size_t y = 0; y < p.h(); ++y)
      for (std::size_t x = 0; x < p.w(); ++x) {
        const std::uint8_t c = s[n].labels.at(y, x);
        if (c == s[n].unlabeled()) continue;
        const double f = std::max(p(n, c, y, x), 1e-7);
        total += -std::log(f) - (dice_term ? 2.0 * f / (1.0 + f) : 0.0);
        ++count;
      }
  return count ? total / static_cast<double>(count) : 0.0;
}

double oracle_cosine(const Tensor4<double>& a, const Tensor4<double>& b) {
  const std::size_t per = a.numel() / a.n();
  double total = 0.0;
  for (std::size_t n = 0; n < a.n(); ++n) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t k = n * per; k < (n + 1) * per; ++k) {
      ab += a[k] * b[k];
      aa += a[k] * a[k];
      bb += b[k] * b[k];
    }
    total += -ab / std::sqrt(aa * bb);
  }
  return total / static_cast<double>(a.n());
}

Var<double> leaf(const Tensor4<double>& t) { return Var<double>::leaf(t); }

UNetConfig tiny(int classes) {
  UNetConfig c;
  c.depth = 2;
  c.base_channels = 4;
  c.num_classes = classes;
  c.dropout_rate = 0.0;
  return c;
}

template <typename T>
Tensor4<T> random_images(std::size_t n, std::size_t hw, SeededRng& rng) {
  Tensor4<T> x(Shape4{n, 1, hw, hw});
  for (T& v : x.data()) v = static_cast<T>(rng.uniform());
  return x;
}

}  // namespace

TEST(PartialCe, Examples) {
  Tensor4<double> p(Shape4{1, 2, 1, 2}, std::vector<double>{0.5, 0.9, 0.5, 0.1});
  ScribbleMap s(1, 2, 2);
  s.labels.at(0, 0) = 1;
  const std::vector<ScribbleMap> one{s};
  const auto r = partial_ce(leaf(p), one);
  EXPECT_EQ(r.annotated, 1u);
  EXPECT_NEAR(r.value.item(), 0.6931471805599453, 1e-12);

  Tensor4<double> certain(Shape4{1, 2, 1, 2}, std::vector<double>{0.0, 0.0, 1.0, 1.0});
  std::vector<ScribbleMap> both{ScribbleMap(1, 2, 2)};
  both[0].labels.data = {1, 1};
  EXPECT_EQ(partial_ce(leaf(certain), both).value.item(), 0.0);

  const std::vector<ScribbleMap> none{ScribbleMap(1, 2, 2)};
  const auto z = partial_ce(leaf(p), none);
  EXPECT_EQ(z.annotated, 0u);
  EXPECT_EQ(z.value.item(), 0.0);
}

TEST(PartialCe, ClampsZeroProbability) {
  Tensor4<double> p(Shape4{1, 2, 1, 1}, std::vector<double>{1.0, 0.0});
  std::vector<ScribbleMap> s{ScribbleMap(1, 1, 2)};
  s[0].labels.data = {1};
  EXPECT_NEAR(partial_ce(leaf(p), s).value.item(), -std::log(1e-7), 1e-9);
}

TEST(PartialCe, MatchesOracle) {
  SeededRng rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor4<double> p = random_probs(Shape4{3, 4, 7, 5}, rng);
    const auto s = random_scribbles(3, 7, 5, 4, 0.3, rng);
    EXPECT_NEAR(partial_ce(leaf(p), s).value.item(), oracle_supervised(p, s, false), 1e-10);
    EXPECT_NEAR(sup_loss(leaf(p), s).value.item(), oracle_supervised(p, s, true), 1e-10);
  }
}

TEST(SupLoss, Examples) {
  Tensor4<double> p(Shape4{1, 2, 1, 2}, std::vector<double>{1.0, 0.5, 0.0, 0.5});
  std::vector<ScribbleMap> s{ScribbleMap(1, 2, 2)};
  s[0].labels.data = {0, 2};
  EXPECT_NEAR(sup_loss(leaf(p), s).value.item(), -1.0, 1e-12);
  s[0].labels.data = {2, 1};
  EXPECT_NEAR(sup_loss(leaf(p), s).value.item(), -(std::log(0.5) + 2.0 * 0.5 / 1.5), 1e-12);
  EXPECT_NEAR(sup_loss(leaf(p), s).value.item(), 0.0265, 5e-5);
}

TEST(SupLoss, MinimumOnlyAtCertainty) {
  SeededRng rng(2);
  const Tensor4<double> p = random_probs(Shape4{2, 3, 4, 4}, rng);
  const auto s = random_scribbles(2, 4, 4, 3, 0.5, rng);
  EXPECT_GT(sup_loss(leaf(p), s).value.item(), -1.0);
}

TEST(SupervisedLosses, IgnoreUnlabeledPixels) {
  SeededRng rng(3);
  const Tensor4<double> p = random_probs(Shape4{2, 3, 6, 6}, rng);
  const auto s = random_scribbles(2, 6, 6, 3, 0.4, rng);
  Tensor4<double> q = random_probs(Shape4{2, 3, 6, 6}, rng);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t y = 0; y < 6; ++y)
      for (std::size_t x = 0; x < 6; ++x)
        if (s[n].labels.at(y, x) != s[n].unlabeled())
          for (std::size_t c = 0; c < 3; ++c) q(n, c, y, x) = p(n, c, y, x);
  EXPECT_EQ(partial_ce(leaf(p), s).value.item(), partial_ce(leaf(q), s).value.item());
  EXPECT_EQ(sup_loss(leaf(p), s).value.item(), sup_loss(leaf(q), s).value.item());
}

TEST(SupervisedLosses, ShapeErrors) {
  SeededRng rng(4);
  const Tensor4<double> p = random_probs(Shape4{1, 3, 4, 4}, rng);
  EXPECT_THROW(partial_ce(leaf(p), random_scribbles(1, 4, 5, 3, 0.5, rng)), ContractViolation);
  EXPECT_THROW(partial_ce(leaf(p), random_scribbles(2, 4, 4, 3, 0.5, rng)), ContractViolation);
  EXPECT_THROW(sup_loss(leaf(p), random_scribbles(1, 4, 4, 2, 0.5, rng)), ContractViolation);
}

TEST(Cosine, Examples) {
  const Tensor4<double> a(Shape4{1, 2, 1, 1}, std::vector<double>{1.0, 0.0});
  const Tensor4<double> b(Shape4{1, 2, 1, 1}, std::vector<double>{1.0, 1.0});
  const Tensor4<double> o(Shape4{1, 2, 1, 1}, std::vector<double>{0.0, 3.0});
  EXPECT_NEAR(cosine_loss(leaf(a), leaf(a)).item(), -1.0, 1e-12);
  EXPECT_NEAR(cosine_loss(leaf(a), leaf(o)).item(), 0.0, 1e-12);
  EXPECT_NEAR(cosine_loss(leaf(a), leaf(b)).item(), -std::sqrt(0.5), 1e-12);
  EXPECT_THROW(cosine_loss(leaf(a), leaf(Tensor4<double>(Shape4{1, 2, 1, 1}))), ContractViolation);
  EXPECT_THROW(cosine_loss(leaf(a), leaf(Tensor4<double>(Shape4{1, 1, 2, 1}, 1.0))), ContractViolation);
}

TEST(Cosine, OracleAndScaleInvariance) {
  SeededRng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor4<double> a(Shape4{3, 2, 4, 4}), b(Shape4{3, 2, 4, 4});
    for (double& v : a.data()) v = rng.uniform(-1.0, 1.0);
    for (double& v : b.data()) v = rng.uniform(-1.0, 1.0);
    const double base = cosine_loss(leaf(a), leaf(b)).item();
    EXPECT_NEAR(base, oracle_cosine(a, b), 1e-12);
    EXPECT_GE(base, -1.0);
    EXPECT_LE(base, 1.0);
    EXPECT_NEAR(cosine_loss(leaf(a), leaf(a)).item(), -1.0, 1e-9);
    const double s = rng.uniform(0.1, 10.0), t = rng.uniform(0.1, 10.0);
    EXPECT_NEAR(cosine_loss(scale(leaf(a), s), scale(leaf(b), t)).item(), base, 1e-12);
  }
}

TEST(MixInvariant, IdentityCasesInEvalMode) {
  SeededRng rng(6);
  const SegModel<double> m(tiny(3), "t", rng);
  const auto x1 = leaf(random_images<double>(2, 8, rng));
  const auto x2 = leaf(random_images<double>(2, 8, rng));
  SeededRng r(0);
  EXPECT_NEAR(mix_invariant_loss(m, x1, x2, x1, 1.0, r, false).item(), -1.0, 1e-12);
  EXPECT_NEAR(mix_invariant_loss(m, x1, x2, x2, 0.0, r, false).item(), -1.0, 1e-12);
}

TEST(MixInvariant, MatchesRecomputation) {
  SeededRng rng(7);
  const SegModel<double> m(tiny(3), "t", rng);
  const Tensor4<double> x1 = random_images<double>(2, 8, rng), x2 = random_images<double>(2, 8, rng);
  const double alpha = 0.3;
  const auto xm = axpby(alpha, leaf(x1), 1.0 - alpha, leaf(x2));
  SeededRng r(0);
  const double got = mix_invariant_loss(m, leaf(x1), leaf(x2), xm, alpha, r, false).item();
  const Tensor4<double> f1 = m.predict(x1), f2 = m.predict(x2), fm = m.predict(xm.value());
  Tensor4<double> target(f1.shape());
  for (std::size_t k = 0; k < target.numel(); ++k) target[k] = alpha * f1[k] + (1 - alpha) * f2[k];
  EXPECT_NEAR(got, oracle_cosine(fm, target), 1e-12);
  EXPECT_GE(got, -1.0);
  EXPECT_LE(got, 1.0);
}

TEST(MixInvariant, StopGradientBlocksTargetBranch) {
  SeededRng rng(8);
  const Tensor4<double> a = random_probs(Shape4{1, 2, 3, 3}, rng);
  const Tensor4<double> b = random_probs(Shape4{1, 2, 3, 3}, rng);
  auto m = Var<double>::leaf(a, true), o1 = Var<double>::leaf(b, true), o2 = Var<double>::leaf(b, true);
  backward(mix_invariant_from_outputs(m, o1, o2, 0.4, true));
  EXPECT_TRUE(m.has_grad());
  EXPECT_FALSE(o1.has_grad());
  auto n = Var<double>::leaf(a, true), p1 = Var<double>::leaf(b, true), p2 = Var<double>::leaf(b, true);
  backward(mix_invariant_from_outputs(n, p1, p2, 0.4, false));
  EXPECT_TRUE(p1.has_grad());
  EXPECT_TRUE(p2.has_grad());
}

TEST(Vicinal, RegularizerExamples) {
  SeededRng rng(9);
  const SegModel<double> mi(tiny(2), "i", rng);
  const SegModel<double> mj(tiny(2), "j", rng);
  const auto x = leaf(random_images<double>(2, 8, rng));
  SeededRng r(0);
  const auto out = mi.forward(x, false, r);
  const VirtualEncoder<double> same(mi, mj, MixPlan{"i", "j", {LayerAddress{0, 1}}, 1.0});
  EXPECT_NEAR(vicinal_reg_loss(same.forward(x, false, r), out).item(), -1.0, 1e-12);

  const SegModel<double> twin = mi.clone();
  const VirtualEncoder<double> clone_mix(mi, twin, MixPlan{"i", "i", {LayerAddress{1, 0}}, 0.42});
  EXPECT_NEAR(vicinal_reg_loss(clone_mix.forward(x, false, r), out).item(), -1.0, 1e-12);

  const VirtualEncoder<double> mixed(mi, mj, MixPlan{"i", "j", {LayerAddress{0, 0}}, 0.5});
  const double v = vicinal_reg_loss(mixed.forward(x, false, r), out).item();
  EXPECT_GE(v, -1.0);
  EXPECT_LE(v, 1.0);
}

TEST(Vicinal, SupervisedIsSumOfTerms) {
  SeededRng rng(10);
  const Tensor4<double> a = random_probs(Shape4{2, 3, 5, 5}, rng), b = random_probs(Shape4{2, 3, 5, 5}, rng);
  const auto s = random_scribbles(2, 5, 5, 3, 0.4, rng);
  EXPECT_NEAR(vicinal_sup_loss(leaf(a), leaf(b), s).value.item(),
              oracle_supervised(a, s, true) + oracle_supervised(b, s, true), 1e-10);
  EXPECT_NEAR(vicinal_sup_loss(leaf(a), leaf(a), s).value.item(), 2.0 * sup_loss(leaf(a), s).value.item(), 1e-12);

  Tensor4<double> perfect(Shape4{1, 2, 2, 2});
  std::vector<ScribbleMap> ps{ScribbleMap(2, 2, 2)};
  ps[0].labels.data = {0, 1, 1, 2};
  for (std::size_t k = 0; k < 4; ++k) perfect(0, k == 1 || k == 2 ? 1 : 0, k / 2, k % 2) = 1.0;
  EXPECT_NEAR(vicinal_sup_loss(leaf(perfect), leaf(perfect), ps).value.item(), -2.0, 1e-12);
}

TEST(TotalLoss, SumsAndRejectsNonFinite) {
  const LossBreakdown b = total_loss(LossParts{0.0, 0.1, 0.2, 0.3});
  EXPECT_NEAR(b.total, 0.6, 1e-12);
  EXPECT_NEAR(b.total, b.inv + b.vicinal_sup + b.vicinal_reg, 1e-12);
  const LossBreakdown w = total_loss(LossParts{1.0, 1.0, 1.0, 1.0}, LossWeights{0.5, 2.0, 0.0, 1.0});
  EXPECT_NEAR(w.total, 3.5, 1e-12);
  try {
    total_loss(LossParts{0.0, 0.1, NAN, 0.3});
    FAIL() << "expected NonFiniteLoss";
  } catch (const NonFiniteLoss& e) {
    EXPECT_NE(std::string(e.what()).find("vicinal_sup"), std::string::npos);
  }
  EXPECT_THROW(total_loss(LossParts{INFINITY, 0.0, 0.0, 0.0}), NonFiniteLoss);
}

TEST(TotalLoss, VariantMasks) {
  const LossParts parts{1.0, 2.0, 3.0, 4.0};
  EXPECT_DOUBLE_EQ(total_loss(mask_parts(parts, variant_spec(1))).total, 1.0);
  EXPECT_DOUBLE_EQ(total_loss(mask_parts(parts, variant_spec(2))).total, 3.0);
  EXPECT_DOUBLE_EQ(total_loss(mask_parts(parts, variant_spec(3))).total, 6.0);
  EXPECT_DOUBLE_EQ(total_loss(mask_parts(parts, variant_spec(4))).total, 10.0);
  EXPECT_DOUBLE_EQ(total_loss(mask_parts(parts, variant_spec(5))).total, 3.0);
  EXPECT_TRUE(variant_spec(5).shared_encoder);
  EXPECT_FALSE(variant_spec(4).shared_encoder);
  EXPECT_THROW(variant_spec(0), ContractViolation);
  EXPECT_THROW(variant_spec(6), ContractViolation);
}

TEST(LossGradients, DoublePrecisionThroughModelInput) {
  SeededRng rng(11);
  const Tensor4<double> x = random_images<double>(2, 4, rng);
  const auto s = random_scribbles(2, 4, 4, 2, 0.5, rng);
  const UNetConfig c = tiny(2);
  SeededRng init(12);
  const SegModel<double> m(c, "t", init);
  GradCheckOptions opt;
  opt.tolerance = 1e-5;
  const auto report = finite_difference_check(
      "sup_loss(unet)",
      [&](const std::vector<Var<double>>& in) {
        SeededRng r(0);
        return sup_loss(m.forward(in[0], false, r), s).value;
      },
      {x}, opt);
  EXPECT_TRUE(report.passed) << report.max_rel_err << " " << report.failure;
}

namespace {

// Two task models plus inputs; the same scene in either precision.
template <typename T>
struct LossFixture {
  SegModel<T> mi, mj;
  Tensor4<T> x1, x2, xm;
  std::vector<ScribbleMap> scribbles;
  double alpha = 0.35;
  MixPlan plan{"i", "j", {LayerAddress{1, 0}}, 0.6};

  static LossFixture make() {
    SeededRng init(14);
    const UNetConfig c = tiny(3);
    SegModel<double> mi(c, "i", init), mj(c, "j", init);
    SeededRng rng(13);
    const Tensor4<double> x1 = random_images<double>(2, 8, rng), x2 = random_images<double>(2, 8, rng);
    SeededRng srng(15);
    auto s = random_scribbles(2, 8, 8, 3, 0.3, srng);
    return LossFixture(cast_model(mi), cast_model(mj), x1.cast<T>(), x2.cast<T>(), std::move(s));
  }

  static SegModel<T> cast_model(const SegModel<double>& src) {
    SeededRng unused(0);
    SegModel<T> out(src.config(), src.task_id(), unused);
    const auto from = src.parameters();
    auto to = out.parameters();
    for (std::size_t k = 0; k < to.size(); ++k) to[k].mutable_value() = from[k].value().template cast<T>();
    return out;
  }

  LossFixture(SegModel<T> a, SegModel<T> b, Tensor4<T> p, Tensor4<T> q, std::vector<ScribbleMap> s)
      : mi(std::move(a)), mj(std::move(b)), x1(std::move(p)), x2(std::move(q)), scribbles(std::move(s)) {
    xm = axpby(alpha, Var<T>::leaf(x1), 1.0 - alpha, Var<T>::leaf(x2)).value();
  }

  Var<T> forward(const SegModel<T>& m) const {
    SeededRng r(0);
    return m.forward(Var<T>::leaf(x1), false, r);
  }
  Var<T> virtual_forward() const {
    SeededRng r(0);
    return VirtualEncoder<T>(mi, mj, plan).forward(Var<T>::leaf(x1), false, r);
  }

  std::vector<Var<T>> parameters() const {
    std::vector<Var<T>> out = mi.parameters();
    for (const auto& p : mj.parameters()) out.push_back(p);
    return out;
  }

  Var<T> loss(int which) const {
    switch (which) {
      case 0:
        return partial_ce(forward(mi), scribbles).value;
      case 1:
        return sup_loss(forward(mi), scribbles).value;
      case 2: {
        SeededRng r(0);
        return mix_invariant_loss(mi, Var<T>::leaf(x1), Var<T>::leaf(x2), Var<T>::leaf(xm), alpha, r, false);
      }
      case 3:
        return vicinal_reg_loss(virtual_forward(), forward(mi));
      default:
        return vicinal_sup_loss(virtual_forward(), forward(mi), scribbles).value;
    }
  }
};

const char* const kLossNames[] = {"partial_ce", "sup_loss", "mix_invariant", "vicinal_reg", "vicinal_sup"};

// Reverse-mode directional derivatives of `model` against double-precision
// central differences on an identical double model.
template <typename T>
double worst_directional_error(int which, std::uint64_t seed) {
  LossFixture<T> model = LossFixture<T>::make();
  LossFixture<double> oracle = LossFixture<double>::make();
  auto params = model.parameters();
  auto ref = oracle.parameters();
  backward(model.loss(which));
  std::vector<Tensor4<double>> grads;
  double gnorm = 0.0;
  for (const auto& p : params) {
    grads.push_back(p.grad().template cast<double>());
    for (double g : grads.back().data()) gnorm += g * g;
  }
  gnorm = std::sqrt(gnorm);
  if (gnorm == 0.0) return INFINITY;

  SeededRng rng(seed);
  double worst = 0.0;
  for (int probe = 0; probe < 3; ++probe) {
    // Half along the gradient, half random, so the derivative is never tiny.
    std::vector<Tensor4<double>> dir;
    double unorm = 0.0;
    for (const auto& g : grads) {
      dir.emplace_back(g.shape());
      for (double& v : dir.back().data()) {
        v = rng.normal();
        unorm += v * v;
      }
    }
    unorm = std::sqrt(unorm);
    double dnorm = 0.0;
    for (std::size_t i = 0; i < grads.size(); ++i)
      for (std::size_t k = 0; k < grads[i].numel(); ++k) {
        dir[i][k] = grads[i][k] / gnorm + dir[i][k] / unorm;
        dnorm += dir[i][k] * dir[i][k];
      }
    dnorm = std::sqrt(dnorm);
    double analytic = 0.0;
    for (std::size_t i = 0; i < grads.size(); ++i)
      for (std::size_t k = 0; k < grads[i].numel(); ++k) {
        dir[i][k] /= dnorm;
        analytic += grads[i][k] * dir[i][k];
      }

    const double eps = 1e-6;
    std::vector<Tensor4<double>> saved;
    for (const auto& p : ref) saved.push_back(p.value());
    auto shifted = [&](double s) {
      for (std::size_t i = 0; i < ref.size(); ++i)
        for (std::size_t k = 0; k < saved[i].numel(); ++k) ref[i].mutable_value()[k] = saved[i][k] + s * dir[i][k];
      return oracle.loss(which).item();
    };
    const double fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
    for (std::size_t i = 0; i < ref.size(); ++i) ref[i].mutable_value() = saved[i];
    worst = std::max(worst, std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-6}));
  }
  return worst;
}

}  // namespace

TEST(LossGradients, DoublePrecisionAgainstModelParameters) {
  for (int k = 0; k < 5; ++k) EXPECT_LT(worst_directional_error<double>(k, 100 + k), 1e-5) << kLossNames[k];
}

TEST(LossGradients, SinglePrecisionAgainstModelParameters) {
  for (int k = 0; k < 5; ++k) EXPECT_LT(worst_directional_error<float>(k, 200 + k), 1e-3) << kLossNames[k];
}
