#include "modelmix/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "modelmix/gradcheck.hpp"
#include "modelmix/losses.hpp"
#include "modelmix/metrics.hpp"
#include "modelmix/mixer.hpp"
#include "modelmix/ops.hpp"

namespace modelmix {

bool SuiteResult::passed() const {
  return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const CheckLine& c) { return c.passed; });
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

Tensor4<double> random_tensor(Shape4 s, SeededRng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor4<double> t(s);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from zero so relu kinks stay outside the FD stencil.
Tensor4<double> away_from_zero(Shape4 s, SeededRng& rng) {
  Tensor4<double> t(s);
  for (double& v : t.data()) v = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 1.0);
  return t;
}

// Distinct values spaced 0.05 apart so max-pool winners are stable.
Tensor4<double> distinct_values(Shape4 s, SeededRng& rng) {
  Tensor4<double> t(s);
  std::vector<std::size_t> perm(t.numel());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  for (std::size_t i = 0; i < perm.size(); ++i) t[i] = 0.05 * static_cast<double>(perm[i]) - 1.0;
  return t;
}

ScribbleMap random_scribble(std::size_t h, std::size_t w, int classes, SeededRng& rng, double density) {
  ScribbleMap s(h, w, classes);
  for (auto& v : s.labels.data) {
    if (rng.bernoulli(density)) v = static_cast<std::uint8_t>(rng.below(static_cast<std::uint64_t>(classes)));
  }
  return s;
}

Tensor4<double> probabilities(Shape4 s, SeededRng& rng) {
  Tensor4<double> logits = random_tensor(s, rng, -2.0, 2.0);
  return channel_softmax(Var<double>::leaf(logits)).value();
}

CheckLine from_report(const GradCheckReport& r, double tolerance) {
  CheckLine c;
  c.name = "grad " + r.op_name;
  c.passed = r.passed && r.max_rel_err < tolerance;
  c.detail = r.failure.empty() ? "max rel err " + fmt(r.max_rel_err) : r.failure;
  return c;
}

template <typename F>
SuiteResult timed(const char* name, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r;
  r.suite = name;
  body(r);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

std::uint64_t brute_directed_sq(const Mask& a, const Mask& b) {
  std::uint64_t worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a.data[i]) continue;
    std::uint64_t best = ~std::uint64_t{0};
    for (std::size_t j = 0; j < b.size(); ++j) {
      if (!b.data[j]) continue;
      const auto dy = static_cast<std::int64_t>(i / a.w) - static_cast<std::int64_t>(j / a.w);
      const auto dx = static_cast<std::int64_t>(i % a.w) - static_cast<std::int64_t>(j % a.w);
      best = std::min(best, static_cast<std::uint64_t>(dy * dy + dx * dx));
    }
    worst = std::max(worst, best);
  }
  return worst;
}

}  // namespace

SuiteResult verify_linearity(std::uint64_t seed, std::size_t draws) {
  return timed("linearity", [&](SuiteResult& r) {
    SeededRng rng(seed);
    double worst = 0.0;
    for (std::size_t d = 0; d < draws; ++d) {
      const std::size_t in_c = 1 + rng.below(4), out_c = 1 + rng.below(4), k = 1 + 2 * rng.below(2);
      const std::size_t h = 3 + rng.below(8), w = 3 + rng.below(8), n = 1 + rng.below(2);
      ConvParams<double> pi{random_tensor({out_c, in_c, k, k}, rng), std::vector<double>(out_c)};
      ConvParams<double> pj{random_tensor({out_c, in_c, k, k}, rng), std::vector<double>(out_c)};
      for (auto& b : pi.bias) b = rng.uniform(-1, 1);
      for (auto& b : pj.bias) b = rng.uniform(-1, 1);
      const Tensor4<double> x = random_tensor({n, in_c, h, w}, rng, -2.0, 2.0);
      worst = std::max(worst, verify_feature_linearity(pi, pj, rng.uniform(), x, false));
    }
    r.checks.push_back({"conv mixing == feature mixing (" + std::to_string(draws) + " draws)", worst < 1e-9,
                        "max abs err " + fmt(worst)});

    // Negative control: the two kernels respond with opposite signs, so relu
    // of the mixed response differs from the mix of relu responses.
    ConvParams<double> pos{Tensor4<double>({1, 1, 1, 1}, 1.0), {0.0}};
    ConvParams<double> neg{Tensor4<double>({1, 1, 1, 1}, -1.0), {0.0}};
    Tensor4<double> x({1, 1, 2, 2});
    x[0] = 1.0, x[1] = -1.0, x[2] = 0.5, x[3] = -0.5;
    const double control = verify_feature_linearity(pos, neg, 0.5, x, true);
    r.checks.push_back({"relu control breaks linearity", control > 1e-3, "max abs err " + fmt(control)});
  });
}

SuiteResult verify_gradients(std::uint64_t seed) {
  return timed("gradients", [&](SuiteResult& r) {
    SeededRng rng(seed);
    GradCheckOptions opt;
    opt.eps = 1e-5;
    opt.seed = seed + 17;
    const double tol = 1e-4;
    auto check = [&](const std::string& name, const DifferentiableFn& fn, const std::vector<Tensor4<double>>& in) {
      r.checks.push_back(from_report(finite_difference_check(name, fn, in, opt), tol));
    };
    using V = std::vector<Var<double>>;

    for (std::size_t stride : {1, 2}) {
      for (std::size_t pad : {0, 1}) {
        check("conv2d stride " + std::to_string(stride) + " pad " + std::to_string(pad),
              [=](const V& v) { return conv2d(v[0], v[1], v[2], stride, pad); },
              {random_tensor({2, 3, 6, 5}, rng), random_tensor({4, 3, 3, 3}, rng), random_tensor({1, 4, 1, 1}, rng)});
      }
    }
    check("conv2d 1x1", [](const V& v) { return conv2d(v[0], v[1], v[2], 1, 0); },
          {random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 3, 1, 1}, rng), random_tensor({1, 2, 1, 1}, rng)});
    check("relu", [](const V& v) { return relu(v[0]); }, {away_from_zero({2, 3, 4, 4}, rng)});
    check("max_pool_2x2", [](const V& v) { return max_pool_2x2(v[0]); }, {distinct_values({2, 2, 5, 6}, rng)});
    check("upsample_nearest_2x2", [](const V& v) { return upsample_nearest_2x2(v[0]); },
          {random_tensor({2, 2, 3, 4}, rng)});
    check("concat_channels", [](const V& v) { return concat_channels(v[0], v[1]); },
          {random_tensor({2, 2, 3, 3}, rng), random_tensor({2, 3, 3, 3}, rng)});
    check("add", [](const V& v) { return add(v[0], v[1]); },
          {random_tensor({1, 2, 3, 3}, rng), random_tensor({1, 2, 3, 3}, rng)});
    check("scale", [](const V& v) { return scale(v[0], -1.7); }, {random_tensor({1, 2, 3, 3}, rng)});
    check("axpby", [](const V& v) { return axpby(0.3, v[0], 0.7, v[1]); },
          {random_tensor({2, 2, 3, 3}, rng), random_tensor({2, 2, 3, 3}, rng)});
    check("batch_roll", [](const V& v) { return batch_roll(v[0], 1); }, {random_tensor({3, 2, 2, 2}, rng)});
    check("channel_softmax", [](const V& v) { return channel_softmax(v[0]); }, {random_tensor({2, 3, 4, 4}, rng)});
    check("dropout", [](const V& v) {
            SeededRng mask_rng(99);
            return dropout(v[0], 0.5, mask_rng, true);
          },
          {random_tensor({2, 2, 4, 4}, rng)});
    const Tensor4<double> wts = random_tensor({2, 2, 3, 3}, rng);
    check("weighted_sum", [wts](const V& v) { return weighted_sum(v[0], wts); }, {random_tensor({2, 2, 3, 3}, rng)});
    check("sum_scalars", [](const V& v) { return sum_scalars({v[0], v[1]}); },
          {random_tensor({1, 1, 1, 1}, rng), random_tensor({1, 1, 1, 1}, rng)});
    check("mix_conv", [](const V& v) {
            ConvLayer<double> m = mix_conv(ConvLayer<double>{v[1], v[2]}, ConvLayer<double>{v[3], v[4]}, 0.37);
            return conv2d(v[0], m.kernel, m.bias, 1, 1);
          },
          {random_tensor({2, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({1, 3, 1, 1}, rng),
           random_tensor({3, 2, 3, 3}, rng), random_tensor({1, 3, 1, 1}, rng)});

    const Shape4 ps{2, 3, 4, 4};
    const std::vector<ScribbleMap> sc{random_scribble(4, 4, 3, rng, 0.5), random_scribble(4, 4, 3, rng, 0.5)};
    check("partial_ce", [sc](const V& v) { return partial_ce(v[0], sc).value; }, {probabilities(ps, rng)});
    check("sup_loss", [sc](const V& v) { return sup_loss(v[0], sc).value; }, {probabilities(ps, rng)});
    check("partial_ce(softmax)", [sc](const V& v) { return partial_ce(channel_softmax(v[0]), sc).value; },
          {random_tensor(ps, rng)});
    check("cosine_loss", [](const V& v) { return cosine_loss(v[0], v[1]); },
          {random_tensor(ps, rng), random_tensor(ps, rng)});
    check("mix_invariant", [](const V& v) { return mix_invariant_from_outputs(v[0], v[1], v[2], 0.6); },
          {probabilities(ps, rng), probabilities(ps, rng), probabilities(ps, rng)});
    check("vicinal_reg", [](const V& v) { return vicinal_reg_loss(v[0], v[1]); },
          {probabilities(ps, rng), probabilities(ps, rng)});
    check("vicinal_sup", [sc](const V& v) { return vicinal_sup_loss(v[0], v[1], sc).value; },
          {probabilities(ps, rng), probabilities(ps, rng)});

    // End to end through a small U-Net, including a mixed encoder layer.
    UNetConfig cfg{2, 4, 1, 3, 0.5};
    SeededRng init(seed + 5);
    auto a = std::make_shared<SegModel<double>>(cfg, "a", init);
    auto b = std::make_shared<SegModel<double>>(cfg, "b", init);
    check("unet forward", [a, sc](const V& v) {
            SeededRng drop(7);
            return sup_loss(a->forward(v[0], true, drop), sc).value;
          },
          {random_tensor({2, 1, 4, 4}, rng)});
    check("virtual encoder forward", [a, b](const V& v) {
            SeededRng drop(7);
            VirtualEncoder<double> ve(*a, *b, MixPlan{"a", "b", {{0, 1}}, 0.4});
            return cosine_loss(ve.forward(v[0], true, drop), v[1]);
          },
          {random_tensor({2, 1, 4, 4}, rng), probabilities({2, 3, 4, 4}, rng)});
  });
}

SuiteResult verify_losses() {
  return timed("losses", [](SuiteResult& r) {
    SeededRng rng(11);
    Tensor4<double> a({2, 3, 4, 4});
    for (double& v : a.data()) v = rng.uniform(-1, 1);
    const double cos_aa = cosine_loss(Var<double>::leaf(a), Var<double>::leaf(a)).item();
    r.checks.push_back({"cosine_loss(a, a) = -1", std::abs(cos_aa + 1.0) <= 1e-9, "value " + fmt(cos_aa)});

    Tensor4<double> perfect({1, 2, 2, 2}, 0.0);
    ScribbleMap sc(2, 2, 2);
    sc.labels.data = {0, 1, 1, 2};
    for (std::size_t p = 0; p < 4; ++p) {
      if (sc.annotated(p)) perfect.plane(0, sc.labels.data[p])[p] = 1.0;
    }
    const std::vector<ScribbleMap> scs{sc};
    const double sup = sup_loss(Var<double>::leaf(perfect), scs).value.item();
    r.checks.push_back({"sup_loss at perfect prediction = -1", std::abs(sup + 1.0) <= 1e-9, "value " + fmt(sup)});

    const Tensor4<double> half({1, 2, 2, 2}, 0.5);
    const double pce = partial_ce(Var<double>::leaf(half), scs).value.item();
    r.checks.push_back({"partial_ce at p = 0.5 = ln 2", std::abs(pce - 0.6931) <= 1e-4, "value " + fmt(pce)});

    const ScribbleMap empty(2, 2, 2);
    const std::vector<ScribbleMap> none{empty};
    const SupervisedLoss<double> z = partial_ce(Var<double>::leaf(half), none);
    r.checks.push_back({"no annotated pixels gives 0", z.annotated == 0 && z.value.item() == 0.0, ""});

    const LossParts parts{0.5, -0.9, 1.2, -1.8};
    bool masks_ok = true;
    for (int v = 1; v <= 5; ++v) {
      const VariantSpec s = variant_spec(v);
      const LossBreakdown b = total_loss(mask_parts(parts, s));
      masks_ok = masks_ok && (s.pce || b.pce == 0.0) && (s.inv || b.inv == 0.0) &&
                 (s.vicinal_sup || b.vicinal_sup == 0.0) && (s.vicinal_reg || b.vicinal_reg == 0.0) &&
                 b.total == b.pce + b.inv + b.vicinal_sup + b.vicinal_reg;
    }
    r.checks.push_back({"variant masks zero disabled parts", masks_ok, ""});
  });
}

SuiteResult verify_metrics(std::uint64_t seed, std::size_t cases) {
  return timed("metrics", [&](SuiteResult& r) {
    SeededRng rng(seed);
    std::size_t dice_bad = 0, hd_bad = 0;
    for (std::size_t k = 0; k < cases; ++k) {
      const std::size_t h = 1 + rng.below(32), w = 1 + rng.below(32);
      const double pa = rng.uniform(0.0, 0.4), pb = rng.uniform(0.0, 0.4);
      Mask a(h, w), b(h, w);
      for (auto& v : a.data) v = rng.bernoulli(pa);
      for (auto& v : b.data) v = rng.bernoulli(pb);
      std::size_t na = 0, nb = 0, both = 0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        na += a.data[i];
        nb += b.data[i];
        both += a.data[i] && b.data[i];
      }
      const double dice_ref = na + nb == 0 ? 1.0 : 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
      double hd_ref;
      if (na == 0 && nb == 0) {
        hd_ref = 0.0;
      } else if (na == 0 || nb == 0) {
        hd_ref = std::sqrt(static_cast<double>(h * h + w * w));
      } else {
        hd_ref = std::sqrt(static_cast<double>(std::max(brute_directed_sq(a, b), brute_directed_sq(b, a))));
      }
      dice_bad += dice_score(a, b) != dice_ref;
      hd_bad += hausdorff(a, b) != hd_ref;
    }
    r.checks.push_back({"dice_score == reference", dice_bad == 0,
                        std::to_string(dice_bad) + " of " + std::to_string(cases) + " differ"});
    r.checks.push_back({"hausdorff == reference", hd_bad == 0,
                        std::to_string(hd_bad) + " of " + std::to_string(cases) + " differ"});
    Mask p(5, 5, 0), q(5, 5, 0);
    p.at(0, 0) = 1;
    q.at(3, 4) = 1;
    r.checks.push_back({"hausdorff 3-4-5", hausdorff(p, q) == 5.0, "value " + fmt(hausdorff(p, q))});
  });
}

std::vector<SuiteResult> run_suites(const std::string& name, std::uint64_t seed) {
  std::vector<SuiteResult> out;
  const bool all = name == "all";
  if (all || name == "linearity") out.push_back(verify_linearity(seed + 1));
  if (all || name == "gradients") out.push_back(verify_gradients(seed + 2));
  if (all || name == "losses") out.push_back(verify_losses());
  if (all || name == "metrics") out.push_back(verify_metrics(seed + 3));
  if (out.empty()) {
    throw ContractViolation("unknown verify suite '" + name + "' (expected linearity, gradients, losses, metrics or all)");
  }
  return out;
}

}  // namespace modelmix
