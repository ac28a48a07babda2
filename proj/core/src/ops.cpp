#include "modelmix/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace modelmix {
namespace {

template <typename T>
void accumulate_into(Tensor4<T>& grad, const std::vector<double>& acc) {
  for (std::size_t i = 0; i < acc.size(); ++i) grad[i] += static_cast<T>(acc[i]);
}


using v4d = double __attribute__((vector_size(32), aligned(8)));

// C(MxN) += A(MxK) * B(KxN), all row-major double. 4x8 register tiles.
void gemm_acc(std::size_t M, std::size_t N, std::size_t K, const double* A, std::size_t lda, const double* B,
              std::size_t ldb, double* C, std::size_t ldc) {
  std::size_t i = 0;
  for (; i + 4 <= M; i += 4) {
    const double* a0 = A + i * lda;
    const double* a1 = a0 + lda;
    const double* a2 = a1 + lda;
    const double* a3 = a2 + lda;
    std::size_t j = 0;
    for (; j + 8 <= N; j += 8) {
      double* c0 = C + i * ldc + j;
      double* c1 = c0 + ldc;
      double* c2 = c1 + ldc;
      double* c3 = c2 + ldc;
      v4d r00 = *reinterpret_cast<const v4d*>(c0), r01 = *reinterpret_cast<const v4d*>(c0 + 4);
      v4d r10 = *reinterpret_cast<const v4d*>(c1), r11 = *reinterpret_cast<const v4d*>(c1 + 4);
      v4d r20 = *reinterpret_cast<const v4d*>(c2), r21 = *reinterpret_cast<const v4d*>(c2 + 4);
      v4d r30 = *reinterpret_cast<const v4d*>(c3), r31 = *reinterpret_cast<const v4d*>(c3 + 4);
      const double* b = B + j;
      for (std::size_t k = 0; k < K; ++k, b += ldb) {
        const v4d b0 = *reinterpret_cast<const v4d*>(b);
        const v4d b1 = *reinterpret_cast<const v4d*>(b + 4);
        r00 += a0[k] * b0;
        r01 += a0[k] * b1;
        r10 += a1[k] * b0;
        r11 += a1[k] * b1;
        r20 += a2[k] * b0;
        r21 += a2[k] * b1;
        r30 += a3[k] * b0;
        r31 += a3[k] * b1;
      }
      *reinterpret_cast<v4d*>(c0) = r00;
      *reinterpret_cast<v4d*>(c0 + 4) = r01;
      *reinterpret_cast<v4d*>(c1) = r10;
      *reinterpret_cast<v4d*>(c1 + 4) = r11;
      *reinterpret_cast<v4d*>(c2) = r20;
      *reinterpret_cast<v4d*>(c2 + 4) = r21;
      *reinterpret_cast<v4d*>(c3) = r30;
      *reinterpret_cast<v4d*>(c3 + 4) = r31;
    }
    for (; j < N; ++j) {
      for (std::size_t r = 0; r < 4; ++r) {
        double acc = C[(i + r) * ldc + j];
        for (std::size_t k = 0; k < K; ++k) acc += A[(i + r) * lda + k] * B[k * ldb + j];
        C[(i + r) * ldc + j] = acc;
      }
    }
  }
  for (; i < M; ++i) {
    double* crow = C + i * ldc;
    for (std::size_t k = 0; k < K; ++k) {
      const double a = A[i * lda + k];
      const double* b = B + k * ldb;
      for (std::size_t j = 0; j < N; ++j) crow[j] += a * b[j];
    }
  }
}

double hsum(v4d v) { return (v[0] + v[2]) + (v[1] + v[3]); }

// C(MxN) += A(MxK) * B(NxK)^T: dot products over contiguous rows. 2x4 tiles.
void gemm_abt_acc(std::size_t M, std::size_t N, std::size_t K, const double* A, std::size_t lda, const double* B,
                  std::size_t ldb, double* C, std::size_t ldc) {
  const std::size_t k4 = K / 4 * 4;
  auto dot_tail = [&](const double* a, const double* b) {
    double t = 0.0;
    for (std::size_t k = k4; k < K; ++k) t += a[k] * b[k];
    return t;
  };
  std::size_t i = 0;
  for (; i + 2 <= M; i += 2) {
    const double* a0 = A + i * lda;
    const double* a1 = a0 + lda;
    std::size_t j = 0;
    for (; j + 4 <= N; j += 4) {
      const double* b[4] = {B + j * ldb, B + (j + 1) * ldb, B + (j + 2) * ldb, B + (j + 3) * ldb};
      v4d r[2][4] = {};
      for (std::size_t k = 0; k < k4; k += 4) {
        const v4d x0 = *reinterpret_cast<const v4d*>(a0 + k);
        const v4d x1 = *reinterpret_cast<const v4d*>(a1 + k);
        for (int q = 0; q < 4; ++q) {
          const v4d y = *reinterpret_cast<const v4d*>(b[q] + k);
          r[0][q] += x0 * y;
          r[1][q] += x1 * y;
        }
      }
      for (int q = 0; q < 4; ++q) {
        C[i * ldc + j + q] += hsum(r[0][q]) + dot_tail(a0, b[q]);
        C[(i + 1) * ldc + j + q] += hsum(r[1][q]) + dot_tail(a1, b[q]);
      }
    }
    for (; j < N; ++j) {
      const double* bj = B + j * ldb;
      double s0 = 0.0, s1 = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        s0 += a0[k] * bj[k];
        s1 += a1[k] * bj[k];
      }
      C[i * ldc + j] += s0;
      C[(i + 1) * ldc + j] += s1;
    }
  }
  for (; i < M; ++i) {
    const double* a = A + i * lda;
    for (std::size_t j = 0; j < N; ++j) {
      const double* bj = B + j * ldb;
      double acc = 0.0;
      for (std::size_t k = 0; k < K; ++k) acc += a[k] * bj[k];
      C[i * ldc + j] += acc;
    }
  }
}

struct ConvGeometry {
  std::size_t in_c, H, W, kh, kw, stride, pad, oh, ow;
  std::size_t patch() const { return in_c * kh * kw; }
};

// Output columns [lo, hi) whose input column ox*stride + kx - pad is inside the image.
std::pair<std::size_t, std::size_t> valid_cols(const ConvGeometry& g, std::size_t kx) {
  const long offset = static_cast<long>(kx) - static_cast<long>(g.pad);
  const long s = static_cast<long>(g.stride);
  long lo = offset < 0 ? (-offset + s - 1) / s : 0;
  long hi = static_cast<long>(g.W) - 1 - offset;
  hi = hi < 0 ? 0 : std::min<long>(hi / s + 1, static_cast<long>(g.ow));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Patch matrix for output row oy of sample plane `x`: col[k][ox], k = (ic*kh + ky)*kw + kx.
template <typename T>
void im2col_row(const ConvGeometry& g, const T* x, std::size_t oy, double* col) {
  for (std::size_t ic = 0; ic < g.in_c; ++ic) {
    const T* xp = x + ic * g.H * g.W;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* dst = col + ((ic * g.kh + ky) * g.kw + kx) * g.ow;
        if (iy < 0 || iy >= static_cast<long>(g.H)) {
          std::fill(dst, dst + g.ow, 0.0);
          continue;
        }
        const T* xr = xp + static_cast<std::size_t>(iy) * g.W;
        const auto [lo, hi] = valid_cols(g, kx);
        std::fill(dst, dst + lo, 0.0);
        std::fill(dst + hi, dst + g.ow, 0.0);
        if (lo == hi) continue;
        if (g.stride == 1) {
          const T* src = xr + (lo + kx - g.pad);
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = static_cast<double>(src[ox - lo]);
        } else {
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = static_cast<double>(xr[ox * g.stride + kx - g.pad]);
        }
      }
    }
  }
}

// Scatter-adds dcol for output row oy back into the input-gradient plane stack.
void col2im_row_add(const ConvGeometry& g, const double* dcol, std::size_t oy, double* dx) {
  for (std::size_t ic = 0; ic < g.in_c; ++ic) {
    double* dp = dx + ic * g.H * g.W;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
      if (iy < 0 || iy >= static_cast<long>(g.H)) continue;
      double* dr = dp + static_cast<std::size_t>(iy) * g.W;
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* src = dcol + ((ic * g.kh + ky) * g.kw + kx) * g.ow;
        const auto [lo, hi] = valid_cols(g, kx);
        if (lo == hi) continue;
        if (g.stride == 1) {
          double* d = dr + (lo + kx - g.pad);
          for (std::size_t ox = lo; ox < hi; ++ox) d[ox - lo] += src[ox];
        } else {
          for (std::size_t ox = lo; ox < hi; ++ox) dr[ox * g.stride + kx - g.pad] += src[ox];
        }
      }
    }
  }
}

// Stride-1 "same" convolution (pad = k/2) on zero-padded planes, with
// output channels register-blocked in groups of eight or four.
template <typename T>
struct VecOf;
template <>
struct VecOf<float> {
  using type = float __attribute__((vector_size(64), aligned(4)));
  static constexpr std::size_t lanes = 16;
};
template <>
struct VecOf<double> {
  using type = double __attribute__((vector_size(64), aligned(8)));
  static constexpr std::size_t lanes = 8;
};

template <typename T>
struct PaddedPlanes {
  std::size_t channels = 0, hp = 0, wp = 0;
  std::vector<T> data;

  const T* plane(std::size_t c) const { return data.data() + c * hp * wp; }
};

// Row stride leaves one vector of slack so full-width loads never leave the buffer.
template <typename T>
PaddedPlanes<T> pad_planes(const T* src, std::size_t channels, std::size_t H, std::size_t W, std::size_t py,
                           std::size_t px) {
  PaddedPlanes<T> p;
  p.channels = channels;
  p.hp = H + 2 * py;
  p.wp = W + 2 * px + VecOf<T>::lanes;
  p.data.assign(channels * p.hp * p.wp, T{0});
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < H; ++y) {
      std::copy_n(src + (c * H + y) * W, W, p.data.data() + (c * p.hp + y + py) * p.wp + px);
    }
  }
  return p;
}

template <typename T>
typename VecOf<T>::type load_vec(const T* p) {
  return *reinterpret_cast<const typename VecOf<T>::type*>(p);
}

// out[o] (+)= bias[o] + sum_c sum_taps w[o][c][tap] * in[c][shifted]; weights laid out as
// wt[((c * kh + ky) * kw + kx) * out_c + o].
template <typename T, std::size_t B>
void same_conv_block(const PaddedPlanes<T>& in, const T* wt, std::size_t out_c, std::size_t o0, std::size_t kh,
                     std::size_t kw, const T* bias, std::size_t H, std::size_t W, T* out) {
  using V = typename VecOf<T>::type;
  constexpr std::size_t L = VecOf<T>::lanes;
  for (std::size_t oy = 0; oy < H; ++oy) {
    for (std::size_t ox = 0; ox < W; ox += L) {
      V acc[B];
      for (std::size_t b = 0; b < B; ++b) {
        const T init = bias ? bias[o0 + b] : T{0};
        for (std::size_t l = 0; l < L; ++l) acc[b][l] = init;
      }
      for (std::size_t c = 0; c < in.channels; ++c) {
        const T* base = in.plane(c) + oy * in.wp + ox;
        const T* wc = wt + c * kh * kw * out_c + o0;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const T* row = base + ky * in.wp;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const V v = load_vec(row + kx);
            const T* w = wc + (ky * kw + kx) * out_c;
            for (std::size_t b = 0; b < B; ++b) acc[b] += w[b] * v;
          }
        }
      }
      const std::size_t n = std::min(L, W - ox);
      for (std::size_t b = 0; b < B; ++b) {
        T* dst = out + ((o0 + b) * H + oy) * W + ox;
        for (std::size_t l = 0; l < n; ++l) dst[l] += acc[b][l];
      }
    }
  }
}

template <typename T>
void same_conv_planes(const PaddedPlanes<T>& in, const std::vector<T>& wt, std::size_t out_c, std::size_t kh,
                      std::size_t kw, const T* bias, std::size_t H, std::size_t W, T* out) {
  std::size_t o = 0;
  for (; o + 8 <= out_c; o += 8) same_conv_block<T, 8>(in, wt.data(), out_c, o, kh, kw, bias, H, W, out);
  for (; o + 4 <= out_c; o += 4) same_conv_block<T, 4>(in, wt.data(), out_c, o, kh, kw, bias, H, W, out);
  for (; o < out_c; ++o) same_conv_block<T, 1>(in, wt.data(), out_c, o, kh, kw, bias, H, W, out);
}

// Fixed-order dot products of a gradient plane with every shifted window of a
// padded input plane; one vector accumulator per tap.
template <typename T, std::size_t KH, std::size_t KW>
void tap_dots(const T* g, const PaddedPlanes<T>& x, std::size_t c, std::size_t H, std::size_t W, double* dk) {
  using V = typename VecOf<T>::type;
  constexpr std::size_t L = VecOf<T>::lanes;
  const std::size_t full = W - W % L;
  V acc[KH * KW] = {};
  double tail[KH * KW] = {};
  const T* xp = x.plane(c);
  for (std::size_t oy = 0; oy < H; ++oy) {
    const T* gr = g + oy * W;
    for (std::size_t ox = 0; ox < full; ox += L) {
      const V gv = load_vec(gr + ox);
      for (std::size_t ky = 0; ky < KH; ++ky) {
        const T* xr = xp + (oy + ky) * x.wp + ox;
        for (std::size_t kx = 0; kx < KW; ++kx) acc[ky * KW + kx] += gv * load_vec(xr + kx);
      }
    }
    for (std::size_t ox = full; ox < W; ++ox) {
      for (std::size_t ky = 0; ky < KH; ++ky) {
        const T* xr = xp + (oy + ky) * x.wp + ox;
        for (std::size_t kx = 0; kx < KW; ++kx) {
          tail[ky * KW + kx] += static_cast<double>(gr[ox]) * static_cast<double>(xr[kx]);
        }
      }
    }
  }
  for (std::size_t t = 0; t < KH * KW; ++t) {
    double s = 0.0;
    for (std::size_t l = 0; l < L; ++l) s += static_cast<double>(acc[t][l]);
    dk[t] += s + tail[t];
  }
}

template <typename T>
double plane_dot(const T* g, const PaddedPlanes<T>& x, std::size_t c, std::size_t ky, std::size_t kx, std::size_t H,
                 std::size_t W) {
  double s = 0.0;
  for (std::size_t oy = 0; oy < H; ++oy) {
    const T* gr = g + oy * W;
    const T* xr = x.plane(c) + (oy + ky) * x.wp + kx;
    for (std::size_t ox = 0; ox < W; ++ox) s += static_cast<double>(gr[ox]) * static_cast<double>(xr[ox]);
  }
  return s;
}

template <typename T>
void kernel_grad(const T* g, const PaddedPlanes<T>& x, std::size_t c, std::size_t kh, std::size_t kw, std::size_t H,
                 std::size_t W, double* dk) {
  if (kh == 3 && kw == 3) return tap_dots<T, 3, 3>(g, x, c, H, W, dk);
  if (kh == 1 && kw == 1) return tap_dots<T, 1, 1>(g, x, c, H, W, dk);
  for (std::size_t ky = 0; ky < kh; ++ky) {
    for (std::size_t kx = 0; kx < kw; ++kx) dk[ky * kw + kx] += plane_dot(g, x, c, ky, kx, H, W);
  }
}

template <typename T>
Var<T> conv2d_same(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias) {
  const Shape4 xs = x.shape();
  const Shape4 ks = kernel.shape();
  const std::size_t H = xs.h, W = xs.w, in_c = xs.c, out_c = ks.n, kh = ks.h, kw = ks.w;
  const std::size_t py = kh / 2, px = kw / 2, taps = kh * kw;
  const Tensor4<T>& kv = kernel.value();
  std::vector<T> wt(kv.numel());
  for (std::size_t o = 0; o < out_c; ++o) {
    for (std::size_t k = 0; k < in_c * taps; ++k) wt[k * out_c + o] = kv[o * in_c * taps + k];
  }
  Tensor4<T> out(Shape4{xs.n, out_c, H, W});
  for (std::size_t n = 0; n < xs.n; ++n) {
    const PaddedPlanes<T> in = pad_planes(x.value().plane(n, 0), in_c, H, W, py, px);
    same_conv_planes(in, wt, out_c, kh, kw, bias.value().data().data(), H, W, out.plane(n, 0));
  }
  return make_node<T>(std::move(out), {x, kernel, bias}, "conv2d", [=](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    Node<T>& kn = *self.parents[1];
    Node<T>& bn = *self.parents[2];
    const Tensor4<T>& gy = self.grad;
    const Tensor4<T>& kv = kn.value;
    const std::size_t batch = gy.n();
    if (bn.requires_grad) {
      std::vector<double> db(out_c, 0.0);
      for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t oc = 0; oc < out_c; ++oc) {
          const T* g = gy.plane(n, oc);
          for (std::size_t i = 0; i < H * W; ++i) db[oc] += static_cast<double>(g[i]);
        }
      }
      accumulate_into(bn.ensure_grad(), db);
    }
    if (kn.requires_grad) {
      std::vector<double> dk(kv.numel(), 0.0);
      for (std::size_t n = 0; n < batch; ++n) {
        const PaddedPlanes<T> xp = pad_planes(xn.value.plane(n, 0), in_c, H, W, py, px);
        for (std::size_t oc = 0; oc < out_c; ++oc) {
          for (std::size_t ic = 0; ic < in_c; ++ic) {
            kernel_grad(gy.plane(n, oc), xp, ic, kh, kw, H, W, dk.data() + (oc * in_c + ic) * taps);
          }
        }
      }
      accumulate_into(kn.ensure_grad(), dk);
    }
    if (xn.requires_grad) {
      // Transposed same-convolution: swap channel roles and flip the taps.
      std::vector<T> wt_t(kv.numel());
      for (std::size_t oc = 0; oc < out_c; ++oc) {
        for (std::size_t ic = 0; ic < in_c; ++ic) {
          for (std::size_t t = 0; t < taps; ++t) {
            wt_t[(oc * taps + (taps - 1 - t)) * in_c + ic] = kv[(oc * in_c + ic) * taps + t];
          }
        }
      }
      Tensor4<T>& gx = xn.ensure_grad();
      for (std::size_t n = 0; n < batch; ++n) {
        const PaddedPlanes<T> gp = pad_planes(gy.plane(n, 0), out_c, H, W, py, px);
        same_conv_planes(gp, wt_t, in_c, kh, kw, static_cast<const T*>(nullptr), H, W, gx.plane(n, 0));
      }
    }
  });
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, const Var<T>& bias, std::size_t stride, std::size_t pad) {
  const Shape4 xs = x.shape();
  const Shape4 ks = kernel.shape();
  if (ks.c != xs.c) {
    throw ContractViolation("conv2d: kernel in_channels " + std::to_string(ks.c) + " != input channels " +
                            std::to_string(xs.c) + " (input " + xs.str() + ", kernel " + ks.str() + ")");
  }
  if (ks.h % 2 == 0 || ks.w % 2 == 0) {
    throw ContractViolation("conv2d: kernel spatial dims must be odd, got " + ks.str());
  }
  if (stride < 1) throw ContractViolation("conv2d: stride must be >= 1");
  if (bias.value().numel() != ks.n) {
    throw ContractViolation("conv2d: bias has " + std::to_string(bias.value().numel()) + " elements, expected " +
                            std::to_string(ks.n));
  }
  if (xs.h + 2 * pad < ks.h || xs.w + 2 * pad < ks.w) {
    throw ContractViolation("conv2d: kernel " + ks.str() + " larger than padded input " + xs.str());
  }
  if (stride == 1 && pad == ks.h / 2 && pad == ks.w / 2 && xs.h >= ks.h / 2 + 1 && xs.w >= ks.w / 2 + 1) {
    return conv2d_same(x, kernel, bias);
  }
  const ConvGeometry g{xs.c, xs.h, xs.w, ks.h, ks.w, stride, pad, (xs.h + 2 * pad - ks.h) / stride + 1,
                       (xs.w + 2 * pad - ks.w) / stride + 1};
  const std::size_t out_c = ks.n, patch = g.patch();

  const Tensor4<T>& kv = kernel.value();
  const Tensor4<T>& bv = bias.value();
  std::vector<double> kmat(kv.numel());  // (out_c, patch)
  for (std::size_t i = 0; i < kmat.size(); ++i) kmat[i] = kv[i];

  Tensor4<T> out(Shape4{xs.n, out_c, g.oh, g.ow});
  std::vector<double> col(patch * g.ow);
  std::vector<double> acc(out_c * g.ow);
  for (std::size_t n = 0; n < xs.n; ++n) {
    const T* xp = x.value().plane(n, 0);
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
      im2col_row(g, xp, oy, col.data());
      for (std::size_t oc = 0; oc < out_c; ++oc) {
        std::fill_n(acc.data() + oc * g.ow, g.ow, static_cast<double>(bv[oc]));
      }
      gemm_acc(out_c, g.ow, patch, kmat.data(), patch, col.data(), g.ow, acc.data(), g.ow);
      for (std::size_t oc = 0; oc < out_c; ++oc) {
        T* dst = out.plane(n, oc) + oy * g.ow;
        for (std::size_t ox = 0; ox < g.ow; ++ox) dst[ox] = static_cast<T>(acc[oc * g.ow + ox]);
      }
    }
  }

  return make_node<T>(std::move(out), {x, kernel, bias}, "conv2d", [g](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    Node<T>& kn = *self.parents[1];
    Node<T>& bn = *self.parents[2];
    const Tensor4<T>& kv = kn.value;
    const Tensor4<T>& gy = self.grad;
    const std::size_t out_c = kv.n(), patch = g.patch(), batch = gy.n();
    const bool want_x = xn.requires_grad, want_k = kn.requires_grad, want_b = bn.requires_grad;

    std::vector<double> kmat_t;  // (patch, out_c)
    if (want_x) {
      kmat_t.resize(kv.numel());
      for (std::size_t oc = 0; oc < out_c; ++oc) {
        for (std::size_t k = 0; k < patch; ++k) kmat_t[k * out_c + oc] = kv[oc * patch + k];
      }
    }
    std::vector<double> dk(want_k ? kv.numel() : 0, 0.0);
    std::vector<double> db(want_b ? out_c : 0, 0.0);
    std::vector<double> dx(want_x ? g.in_c * g.H * g.W : 0);
    std::vector<double> gy_row(out_c * g.ow);
    std::vector<double> col(want_k ? patch * g.ow : 0);
    std::vector<double> dcol(want_x ? patch * g.ow : 0);

    for (std::size_t n = 0; n < batch; ++n) {
      if (want_x) std::fill(dx.begin(), dx.end(), 0.0);
      const T* xp = xn.value.plane(n, 0);
      for (std::size_t oy = 0; oy < g.oh; ++oy) {
        for (std::size_t oc = 0; oc < out_c; ++oc) {
          const T* src = gy.plane(n, oc) + oy * g.ow;
          double s = 0.0;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            gy_row[oc * g.ow + ox] = src[ox];
            s += src[ox];
          }
          if (want_b) db[oc] += s;
        }
        if (want_k) {
          im2col_row(g, xp, oy, col.data());
          gemm_abt_acc(out_c, patch, g.ow, gy_row.data(), g.ow, col.data(), g.ow, dk.data(), patch);
        }
        if (want_x) {
          std::fill(dcol.begin(), dcol.end(), 0.0);
          gemm_acc(patch, g.ow, out_c, kmat_t.data(), out_c, gy_row.data(), g.ow, dcol.data(), g.ow);
          col2im_row_add(g, dcol.data(), oy, dx.data());
        }
      }
      if (want_x) {
        T* dst = xn.ensure_grad().plane(n, 0);
        for (std::size_t i = 0; i < dx.size(); ++i) dst[i] += static_cast<T>(dx[i]);
      }
    }
    if (want_k) accumulate_into(kn.ensure_grad(), dk);
    if (want_b) accumulate_into(bn.ensure_grad(), db);
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor4<T> out = x.value();
  for (T& v : out.data()) v = v > T{0} ? v : T{0};
  return make_node<T>(std::move(out), {x}, "relu", [](Node<T>& self) {
    Node<T>& xn = *self.parents[0];
    T* __restrict gx = xn.ensure_grad().data().data();
    const T* __restrict xv = xn.value.data().data();
    const T* __restrict g = self.grad.data().data();
    const std::size_t count = xn.value.numel();
    for (std::size_t i = 0; i < count; ++i) gx[i] += xv[i] > T{0} ? g[i] : T{0};
  });
}

template <typename T>
Var<T> max_pool_2x2(const Var<T>& x) {
  const Shape4 s = x.shape();
  const std::size_t oh = s.h / 2, ow = s.w / 2;
  Tensor4<T> out(Shape4{s.n, s.c, oh, ow});
  std::vector<std::size_t> argmax(out.numel());
  const Tensor4<T>& xv = x.value();
  std::size_t o = 0;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xx = 0; xx < ow; ++xx, ++o) {
          std::size_t best = xv.index(n, c, 2 * y, 2 * xx);
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = xv.index(n, c, 2 * y + dy, 2 * xx + dx);
              if (xv[idx] > xv[best]) best = idx;
            }
          }
          argmax[o] = best;
          out[o] = xv[best];
        }
      }
    }
  }
  return make_node<T>(std::move(out), {x}, "max_pool_2x2", [argmax = std::move(argmax)](Node<T>& self) {
    Tensor4<T>& gx = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += self.grad[i];
  });
}

template <typename T>
Var<T> upsample_nearest_2x2(const Var<T>& x) {
  const Shape4 s = x.shape();
  Tensor4<T> out(Shape4{s.n, s.c, s.h * 2, s.w * 2});
  const Tensor4<T>& xv = x.value();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t y = 0; y < 2 * s.h; ++y) {
        for (std::size_t xx = 0; xx < 2 * s.w; ++xx) out(n, c, y, xx) = xv(n, c, y / 2, xx / 2);
      }
    }
  }
  return make_node<T>(std::move(out), {x}, "upsample_nearest_2x2", [](Node<T>& self) {
    Tensor4<T>& gx = self.parents[0]->ensure_grad();
    const Shape4 s = gx.shape();
    for (std::size_t n = 0; n < s.n; ++n) {
      for (std::size_t c = 0; c < s.c; ++c) {
        for (std::size_t y = 0; y < 2 * s.h; ++y) {
          for (std::size_t xx = 0; xx < 2 * s.w; ++xx) gx(n, c, y / 2, xx / 2) += self.grad(n, c, y, xx);
        }
      }
    }
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape4 sa = a.shape(), sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ContractViolation("concat_channels: n/h/w mismatch " + sa.str() + " vs " + sb.str());
  }
  Tensor4<T> out(Shape4{sa.n, sa.c + sb.c, sa.h, sa.w});
  const std::size_t pa = sa.c * sa.plane(), pb = sb.c * sb.plane();
  for (std::size_t n = 0; n < sa.n; ++n) {
    std::copy_n(a.value().data().data() + n * pa, pa, out.plane(n, 0));
    std::copy_n(b.value().data().data() + n * pb, pb, out.plane(n, sa.c));
  }
  return make_node<T>(std::move(out), {a, b}, "concat_channels", [pa, pb, ca = sa.c](Node<T>& self) {
    Node<T>& an = *self.parents[0];
    Node<T>& bn = *self.parents[1];
    const std::size_t batch = self.grad.n();
    if (an.requires_grad) {
      Tensor4<T>& ga = an.ensure_grad();
      for (std::size_t n = 0; n < batch; ++n) {
        const T* src = self.grad.plane(n, 0);
        for (std::size_t i = 0; i < pa; ++i) ga[n * pa + i] += src[i];
      }
    }
    if (bn.requires_grad) {
      Tensor4<T>& gb = bn.ensure_grad();
      for (std::size_t n = 0; n < batch; ++n) {
        const T* src = self.grad.plane(n, ca);
        for (std::size_t i = 0; i < pb; ++i) gb[n * pb + i] += src[i];
      }
    }
  });
}

template <typename T>
Var<T> axpby(double alpha, const Var<T>& a, double beta, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "axpby");
  Tensor4<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = static_cast<T>(alpha * static_cast<double>(a.value()[i]) + beta * static_cast<double>(b.value()[i]));
  }
  return make_node<T>(std::move(out), {a, b}, "axpby", [alpha, beta](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      Node<T>& pn = *self.parents[p];
      if (!pn.requires_grad) continue;
      const double k = p == 0 ? alpha : beta;
      Tensor4<T>& g = pn.ensure_grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += static_cast<T>(k * static_cast<double>(self.grad[i]));
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return axpby(1.0, a, 1.0, b);
}

template <typename T>
Var<T> scale(const Var<T>& x, double s) {
  Tensor4<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(s * static_cast<double>(x.value()[i]));
  return make_node<T>(std::move(out), {x}, "scale", [s](Node<T>& self) {
    Tensor4<T>& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += static_cast<T>(s * static_cast<double>(self.grad[i]));
  });
}

template <typename T>
Var<T> batch_roll(const Var<T>& x, std::size_t shift) {
  const Shape4 s = x.shape();
  if (s.n == 0) return x;
  const std::size_t per = s.c * s.plane();
  Tensor4<T> out(s);
  for (std::size_t k = 0; k < s.n; ++k) {
    const std::size_t src = (k + shift) % s.n;
    std::copy_n(x.value().data().data() + src * per, per, out.data().data() + k * per);
  }
  return make_node<T>(std::move(out), {x}, "batch_roll", [shift, per](Node<T>& self) {
    Tensor4<T>& g = self.parents[0]->ensure_grad();
    const std::size_t n = g.n();
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t src = (k + shift) % n;
      for (std::size_t i = 0; i < per; ++i) g[src * per + i] += self.grad[k * per + i];
    }
  });
}

template <typename T>
Var<T> channel_softmax(const Var<T>& x) {
  const Shape4 s = x.shape();
  if (s.c < 2) throw ContractViolation("channel_softmax: needs at least 2 channels, got " + s.str());
  Tensor4<T> out(s);
  const Tensor4<T>& xv = x.value();
  const std::size_t plane = s.plane();
  std::vector<double> e(s.c);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t p = 0; p < plane; ++p) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < s.c; ++c) mx = std::max(mx, static_cast<double>(xv.plane(n, c)[p]));
      double total = 0.0;
      for (std::size_t c = 0; c < s.c; ++c) {
        e[c] = std::exp(static_cast<double>(xv.plane(n, c)[p]) - mx);
        total += e[c];
      }
      for (std::size_t c = 0; c < s.c; ++c) out.plane(n, c)[p] = static_cast<T>(e[c] / total);
    }
  }
  return make_node<T>(std::move(out), {x}, "channel_softmax", [](Node<T>& self) {
    Tensor4<T>& gx = self.parents[0]->ensure_grad();
    const Tensor4<T>& y = self.value;
    const Tensor4<T>& gy = self.grad;
    const Shape4 s = y.shape();
    const std::size_t plane = s.plane();
    for (std::size_t n = 0; n < s.n; ++n) {
      for (std::size_t p = 0; p < plane; ++p) {
        double dot = 0.0;
        for (std::size_t c = 0; c < s.c; ++c) {
          dot += static_cast<double>(y.plane(n, c)[p]) * static_cast<double>(gy.plane(n, c)[p]);
        }
        for (std::size_t c = 0; c < s.c; ++c) {
          const double yc = y.plane(n, c)[p];
          gx.plane(n, c)[p] += static_cast<T>(yc * (static_cast<double>(gy.plane(n, c)[p]) - dot));
        }
      }
    }
  });
}

template <typename T>
Var<T> dropout(const Var<T>& x, double rate, SeededRng& rng, bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ContractViolation("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(x.value().numel());
  for (T& m : mask) m = rng.uniform() < rate ? T{0} : keep_scale;
  Tensor4<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] * mask[i];
  return make_node<T>(std::move(out), {x}, "dropout", [mask = std::move(mask)](Node<T>& self) {
    Tensor4<T>& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < mask.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor4<T>& weights) {
  require_same_shape(x.shape(), weights.shape(), "weighted_sum");
  double s = 0.0;
  for (std::size_t i = 0; i < weights.numel(); ++i) s += static_cast<double>(x.value()[i]) * weights[i];
  return make_node<T>(Tensor4<T>(Shape4{1, 1, 1, 1}, static_cast<T>(s)), {x}, "weighted_sum",
                      [weights](Node<T>& self) {
    Tensor4<T>& g = self.parents[0]->ensure_grad();
    const T up = self.grad[0];
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += up * weights[i];
  });
}

template <typename T>
Var<T> sum_scalars(std::initializer_list<Var<T>> terms) {
  std::vector<Var<T>> parents(terms);
  double s = 0.0;
  for (const auto& t : parents) {
    if (t.value().numel() != 1) throw ContractViolation("sum_scalars: term has shape " + t.shape().str());
    s += static_cast<double>(t.value()[0]);
  }
  return make_node<T>(Tensor4<T>(Shape4{1, 1, 1, 1}, static_cast<T>(s)), parents, "sum_scalars",
                      [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (p->requires_grad) p->ensure_grad()[0] += self.grad[0];
    }
  });
}

#define MODELMIX_INSTANTIATE_OPS(T)                                                             \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t, std::size_t); \
  template Var<T> relu(const Var<T>&);                                                         \
  template Var<T> max_pool_2x2(const Var<T>&);                                                 \
  template Var<T> upsample_nearest_2x2(const Var<T>&);                                         \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);                               \
  template Var<T> add(const Var<T>&, const Var<T>&);                                           \
  template Var<T> scale(const Var<T>&, double);                                                \
  template Var<T> axpby(double, const Var<T>&, double, const Var<T>&);                         \
  template Var<T> batch_roll(const Var<T>&, std::size_t);                                      \
  template Var<T> channel_softmax(const Var<T>&);                                              \
  template Var<T> dropout(const Var<T>&, double, SeededRng&, bool);                            \
  template Var<T> weighted_sum(const Var<T>&, const Tensor4<T>&);                              \
  template Var<T> sum_scalars(std::initializer_list<Var<T>>);

MODELMIX_INSTANTIATE_OPS(float)
MODELMIX_INSTANTIATE_OPS(double)

}  // namespace modelmix
