#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "voxseg/parallel.hpp"
#include "voxseg/tensor.hpp"

namespace voxseg {

/// Convolution filter bank. Weights use the 5-axis layout
/// (c_out, c_in, k_d, k_h, k_w); bias is (1, c_out, 1, 1, 1).
template <class T>
struct ConvParams {
  Tensor<T> weights;
  Tensor<T> bias;
};

enum class BNMode { train, infer };

template <class T>
struct BNParams {
  Tensor<T> gamma, beta;              // (1, c, 1, 1, 1), trainable
  Tensor<T> running_mean, running_var;
  T momentum = T(0.9);                // retained fraction of the old running stat
  T eps = T(1e-5);
};

namespace detail {

template <class T>
void check_conv_shapes(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                       bool odd_kernel) {
  const Shape5& ws = w.shape();
  if (ws.d != ws.h || ws.h != ws.w)
    throw std::invalid_argument("conv: kernel must be cubic, got " + ws.str());
  if (odd_kernel && ws.d % 2 == 0)
    throw std::invalid_argument("conv3d: kernel extent must be odd for same-size output");
  if (x.shape().c != ws.c)
    throw std::invalid_argument("conv: input has " + std::to_string(x.shape().c) +
                                " channels, kernel expects " + std::to_string(ws.c));
  if (bias.shape().c != ws.n || bias.size() != ws.n)
    throw std::invalid_argument("conv: bias must be (1, c_out, 1, 1, 1)");
}

/// Fixed lane count for split accumulation (one 512-bit vector register).
/// The lane structure is part of the summation order and never depends on
/// the thread count, so reductions stay bitwise reproducible.
template <class T>
inline constexpr std::int64_t acc_lanes = static_cast<std::int64_t>(64 / sizeof(T));

/// Folds a lane accumulator in ascending lane order.
template <class T>
T fold_lanes(const T* lanes, std::int64_t count) {
  T acc = lanes[0];
  for (std::int64_t l = 1; l < count; ++l) acc += lanes[l];
  return acc;
}

}  // namespace detail

/// Same-size 3-D convolution with an odd cubic kernel (zero padding
/// (k-1)/2 per side). For every output voxel the terms accumulate in
/// ascending (c_in, dz, dy, dx) order starting from the bias, so results
/// are bitwise identical at any thread count.
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  detail::check_conv_shapes(x, w, bias, true);
  const Shape5 xs = x.shape();
  const std::int64_t k = w.shape().d;
  const std::int64_t p = (k - 1) / 2;
  const std::int64_t ci = xs.c, co = w.shape().n;
  const std::int64_t D = xs.d, H = xs.h, W = xs.w;

  const Tensor<T> xp = p > 0 ? pad_zero(x, Pad3{{{p, p}, {p, p}, {p, p}}}) : x;
  const std::int64_t Hp = H + 2 * p, Wp = W + 2 * p;

  Tensor<T> out = Tensor<T>::uninitialized({xs.n, co, D, H, W});
  const T* xpd = xp.data();
  const T* wd = w.data();
  const T* bd = bias.data();
  T* od = out.data();

  // Blocks of output channels share the streamed input rows; the block of
  // accumulator rows stays cache-resident.
  constexpr std::int64_t OB = 16;
  const std::int64_t oblocks = (co + OB - 1) / OB;

  parallel_for(xs.n * oblocks * D, [&](std::int64_t task) {
    const std::int64_t z = task % D;
    const std::int64_t ob = (task / D) % oblocks;
    const std::int64_t n = task / (D * oblocks);
    const std::int64_t o0 = ob * OB;
    const std::int64_t nob = std::min(OB, co - o0);
    std::vector<T> accbuf(static_cast<std::size_t>(nob * W));
    for (std::int64_t y = 0; y < H; ++y) {
      for (std::int64_t oo = 0; oo < nob; ++oo) {
        T* __restrict acc = accbuf.data() + oo * W;
        const T bv = bd[o0 + oo];
        for (std::int64_t xx = 0; xx < W; ++xx) acc[xx] = bv;
      }
      for (std::int64_t i = 0; i < ci; ++i) {
        const T* xplane = xpd + ((n * ci + i) * (D + 2 * p) + z) * Hp * Wp;
        if (k == 3) {
          const T* __restrict r0 = xplane + (0 * Hp + y + 0) * Wp;
          const T* __restrict r1 = xplane + (0 * Hp + y + 1) * Wp;
          const T* __restrict r2 = xplane + (0 * Hp + y + 2) * Wp;
          const T* __restrict r3 = xplane + (1 * Hp + y + 0) * Wp;
          const T* __restrict r4 = xplane + (1 * Hp + y + 1) * Wp;
          const T* __restrict r5 = xplane + (1 * Hp + y + 2) * Wp;
          const T* __restrict r6 = xplane + (2 * Hp + y + 0) * Wp;
          const T* __restrict r7 = xplane + (2 * Hp + y + 1) * Wp;
          const T* __restrict r8 = xplane + (2 * Hp + y + 2) * Wp;
          for (std::int64_t oo = 0; oo < nob; ++oo) {
            const T* wk = wd + ((o0 + oo) * ci + i) * 27;
            const T w00 = wk[0], w01 = wk[1], w02 = wk[2];
            const T w10 = wk[3], w11 = wk[4], w12 = wk[5];
            const T w20 = wk[6], w21 = wk[7], w22 = wk[8];
            const T w30 = wk[9], w31 = wk[10], w32 = wk[11];
            const T w40 = wk[12], w41 = wk[13], w42 = wk[14];
            const T w50 = wk[15], w51 = wk[16], w52 = wk[17];
            const T w60 = wk[18], w61 = wk[19], w62 = wk[20];
            const T w70 = wk[21], w71 = wk[22], w72 = wk[23];
            const T w80 = wk[24], w81 = wk[25], w82 = wk[26];
            T* __restrict acc = accbuf.data() + oo * W;
            // all 27 taps in one pass, split into three independent chains;
            // per-voxel term order stays (i, dz, dy, dx) ascending
            for (std::int64_t xx = 0; xx < W; ++xx) {
              T sa = w00 * r0[xx] + w01 * r0[xx + 1] + w02 * r0[xx + 2];
              sa += w10 * r1[xx] + w11 * r1[xx + 1] + w12 * r1[xx + 2];
              sa += w20 * r2[xx] + w21 * r2[xx + 1] + w22 * r2[xx + 2];
              T sb = w30 * r3[xx] + w31 * r3[xx + 1] + w32 * r3[xx + 2];
              sb += w40 * r4[xx] + w41 * r4[xx + 1] + w42 * r4[xx + 2];
              sb += w50 * r5[xx] + w51 * r5[xx + 1] + w52 * r5[xx + 2];
              T sc = w60 * r6[xx] + w61 * r6[xx + 1] + w62 * r6[xx + 2];
              sc += w70 * r7[xx] + w71 * r7[xx + 1] + w72 * r7[xx + 2];
              sc += w80 * r8[xx] + w81 * r8[xx + 1] + w82 * r8[xx + 2];
              acc[xx] += (sa + sb) + sc;
            }
          }
        } else {
          for (std::int64_t oo = 0; oo < nob; ++oo) {
            const T* wk = wd + ((o0 + oo) * ci + i) * k * k * k;
            T* __restrict acc = accbuf.data() + oo * W;
            for (std::int64_t dz = 0; dz < k; ++dz)
              for (std::int64_t dy = 0; dy < k; ++dy) {
                const T* __restrict row = xplane + (dz * Hp + y + dy) * Wp;
                const T* wrow = wk + (dz * k + dy) * k;
                for (std::int64_t dx = 0; dx < k; ++dx) {
                  const T wv = wrow[dx];
                  const T* __restrict shifted = row + dx;
                  for (std::int64_t xx = 0; xx < W; ++xx) acc[xx] += wv * shifted[xx];
                }
              }
          }
        }
      }
      for (std::int64_t oo = 0; oo < nob; ++oo) {
        T* orow = od + ((n * co + o0 + oo) * D + z) * H * W + y * W;
        const T* __restrict acc = accbuf.data() + oo * W;
        for (std::int64_t xx = 0; xx < W; ++xx) orow[xx] = acc[xx];
      }
    }
  });
  return out;
}

template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const ConvParams<T>& p) {
  return conv3d(x, p.weights, p.bias);
}

/// Gradient w.r.t. the convolution input: a same-size convolution of the
/// output gradient with the spatially flipped, channel-transposed kernel.
template <class T>
Tensor<T> conv3d_backward_input(const Tensor<T>& g, const Tensor<T>& w) {
  const Shape5 ws = w.shape();
  const std::int64_t k = ws.d;
  Tensor<T> wt = Tensor<T>::uninitialized({ws.c, ws.n, k, k, k});
  for (std::int64_t o = 0; o < ws.n; ++o)
    for (std::int64_t i = 0; i < ws.c; ++i)
      for (std::int64_t dz = 0; dz < k; ++dz)
        for (std::int64_t dy = 0; dy < k; ++dy)
          for (std::int64_t dx = 0; dx < k; ++dx)
            wt.at(i, o, dz, dy, dx) = w.at(o, i, k - 1 - dz, k - 1 - dy, k - 1 - dx);
  return conv3d(g, wt, Tensor<T>::zeros({1, ws.c, 1, 1, 1}));
}

/// Gradients w.r.t. kernel and bias. Each weight element accumulates over
/// rows in ascending (n, z, y) order with a fixed 8-lane split along x,
/// folded in lane order at the end; independent of thread count.
template <class T>
void conv3d_backward_filter(const Tensor<T>& g, const Tensor<T>& x, Tensor<T>& grad_w,
                            Tensor<T>& grad_b) {
  const Shape5 xs = x.shape();
  const Shape5 ws = grad_w.shape();
  const std::int64_t k = ws.d;
  const std::int64_t p = (k - 1) / 2;
  const std::int64_t ci = xs.c, co = ws.n;
  const std::int64_t D = xs.d, H = xs.h, W = xs.w;
  const Tensor<T> xp = p > 0 ? pad_zero(x, Pad3{{{p, p}, {p, p}, {p, p}}}) : x;
  const std::int64_t Hp = H + 2 * p, Wp = W + 2 * p;
  const T* xpd = xp.data();
  const T* gd = g.data();

  constexpr std::int64_t L = detail::acc_lanes<T>;
  const std::int64_t kt = k * k * k;
  const std::int64_t Wmain = W - W % L;

  // Tasks own blocks of input channels so the padded input streams once per
  // block; the gradient rows are small enough to stay cached across the block.
  constexpr std::int64_t IB = 4;
  const std::int64_t iblocks = (ci + IB - 1) / IB;

  parallel_for(iblocks, [&](std::int64_t ib) {
    const std::int64_t i0 = ib * IB;
    const std::int64_t nib = std::min(IB, ci - i0);
    // layout: [(i_local*k + dz)*k + dy][o][dx][lane]
    std::vector<T> acc(static_cast<std::size_t>(nib * k * k * co * k * L), T(0));
    // contiguous copy of the co gradient rows of one (n, z, y); the source
    // rows sit a power-of-two stride apart and would alias the same cache sets
    std::vector<T> growbuf(static_cast<std::size_t>(co * W));
    for (std::int64_t n = 0; n < xs.n; ++n)
      for (std::int64_t z = 0; z < D; ++z)
        for (std::int64_t y = 0; y < H; ++y) {
          for (std::int64_t o = 0; o < co; ++o)
            std::memcpy(growbuf.data() + o * W, gd + (((n * co + o) * D + z) * H + y) * W,
                        static_cast<std::size_t>(W) * sizeof(T));
          for (std::int64_t il = 0; il < nib; ++il) {
            const T* xplane = xpd + ((n * ci + i0 + il) * (D + 2 * p) + z) * Hp * Wp;
            for (std::int64_t dz = 0; dz < k; ++dz)
              for (std::int64_t dy = 0; dy < k; ++dy) {
                const T* __restrict xrow = xplane + (dz * Hp + y + dy) * Wp;
                T* lane_base = acc.data() + ((il * k + dz) * k + dy) * co * k * L;
                for (std::int64_t o = 0; o < co; ++o) {
                  const T* __restrict grow = growbuf.data() + o * W;
                  T* lane = lane_base + o * k * L;
                  if (k == 3) {
                    // one pass feeds all three x-offsets; per-lane partials
                    // fold into the persistent accumulator after the row
                    T s0[L] = {}, s1[L] = {}, s2[L] = {};
                    for (std::int64_t xx = 0; xx < Wmain; xx += L)
                      for (std::int64_t l = 0; l < L; ++l) {
                        const T gv = grow[xx + l];
                        s0[l] += gv * xrow[xx + l];
                        s1[l] += gv * xrow[xx + l + 1];
                        s2[l] += gv * xrow[xx + l + 2];
                      }
                    for (std::int64_t xx = Wmain; xx < W; ++xx) {
                      const T gv = grow[xx];
                      s0[xx % L] += gv * xrow[xx];
                      s1[xx % L] += gv * xrow[xx + 1];
                      s2[xx % L] += gv * xrow[xx + 2];
                    }
                    for (std::int64_t l = 0; l < L; ++l) {
                      lane[0 * L + l] += s0[l];
                      lane[1 * L + l] += s1[l];
                      lane[2 * L + l] += s2[l];
                    }
                  } else {
                    for (std::int64_t dx = 0; dx < k; ++dx) {
                      T* __restrict lx = lane + dx * L;
                      const T* __restrict xs_row = xrow + dx;
                      std::int64_t xx = 0;
                      for (; xx + L <= W; xx += L)
                        for (std::int64_t l = 0; l < L; ++l)
                          lx[l] += grow[xx + l] * xs_row[xx + l];
                      for (; xx < W; ++xx) lx[xx % L] += grow[xx] * xs_row[xx];
                    }
                  }
                }
              }
          }
        }
    for (std::int64_t il = 0; il < nib; ++il)
      for (std::int64_t dz = 0; dz < k; ++dz)
        for (std::int64_t dy = 0; dy < k; ++dy)
          for (std::int64_t o = 0; o < co; ++o)
            for (std::int64_t dx = 0; dx < k; ++dx) {
              const T* lanes =
                  acc.data() + (((il * k + dz) * k + dy) * co + o) * k * L + dx * L;
              grad_w.data()[((o * ci + i0 + il) * k + dz) * k * k + dy * k + dx] =
                  detail::fold_lanes(lanes, L);
            }
  });

  // bias gradient: plain lane-split sum over each output channel
  parallel_for(co, [&](std::int64_t o) {
    std::array<T, L> bias_acc{};
    for (std::int64_t n = 0; n < xs.n; ++n) {
      const T* gch = gd + (n * co + o) * D * H * W;
      const std::int64_t count = D * H * W;
      std::int64_t j = 0;
      for (; j + L <= count; j += L)
        for (std::int64_t l = 0; l < L; ++l) bias_acc[l] += gch[j + l];
      for (; j < count; ++j) bias_acc[j % L] += gch[j];
    }
    grad_b[o] = detail::fold_lanes(bias_acc.data(), L);
  });
}

/// 2x2x2 max pooling with stride 2. Returns the pooled tensor and, per
/// output voxel, the linear index of the winning input element; ties go to
/// the first maximum in (dz, dy, dx) scan order.
template <class T>
std::pair<Tensor<T>, std::vector<std::int64_t>> maxpool3d(const Tensor<T>& x) {
  const Shape5 xs = x.shape();
  if (xs.d % 2 || xs.h % 2 || xs.w % 2)
    throw std::invalid_argument("maxpool3d: spatial extents must be even, got " + xs.str());
  const Shape5 os{xs.n, xs.c, xs.d / 2, xs.h / 2, xs.w / 2};
  Tensor<T> out = Tensor<T>::uninitialized(os);
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(os.numel()));
  const T* xd = x.data();
  T* od = out.data();

  parallel_for(os.n * os.c * os.d, [&](std::int64_t ncz) {
    const std::int64_t z = ncz % os.d;
    const std::int64_t nc = ncz / os.d;
    for (std::int64_t y = 0; y < os.h; ++y)
      for (std::int64_t xx = 0; xx < os.w; ++xx) {
        const std::int64_t base = ((nc * xs.d + 2 * z) * xs.h + 2 * y) * xs.w + 2 * xx;
        T best = xd[base];
        std::int64_t best_idx = base;
        for (std::int64_t dz = 0; dz < 2; ++dz)
          for (std::int64_t dy = 0; dy < 2; ++dy)
            for (std::int64_t dx = 0; dx < 2; ++dx) {
              const std::int64_t idx = base + (dz * xs.h + dy) * xs.w + dx;
              if (xd[idx] > best) {
                best = xd[idx];
                best_idx = idx;
              }
            }
        const std::int64_t oi = ((nc * os.d + z) * os.h + y) * os.w + xx;
        od[oi] = best;
        argmax[static_cast<std::size_t>(oi)] = best_idx;
      }
  });
  return {std::move(out), std::move(argmax)};
}

template <class T>
Tensor<T> maxpool3d_backward(const Tensor<T>& g, const std::vector<std::int64_t>& argmax,
                             const Shape5& input_shape) {
  Tensor<T> gx = Tensor<T>::zeros(input_shape);
  T* gxd = gx.data();
  const T* gd = g.data();
  // pooling blocks are disjoint, so the scatter is race-free
  parallel_for(g.size(), [&](std::int64_t j) { gxd[argmax[static_cast<std::size_t>(j)]] += gd[j]; },
               1 << 16);
  return gx;
}

/// Transposed convolution, 2x2x2 kernel with stride 2; doubles the spatial
/// extents. Each output voxel receives exactly one kernel tap per input
/// channel (the block parity selects it), accumulated in ascending c_in order.
template <class T>
Tensor<T> tconv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  detail::check_conv_shapes(x, w, bias, false);
  if (w.shape().d != 2)
    throw std::invalid_argument("tconv3d: kernel extent must be 2, got " + w.shape().str());
  const Shape5 xs = x.shape();
  const std::int64_t ci = xs.c, co = w.shape().n;
  const Shape5 os{xs.n, co, xs.d * 2, xs.h * 2, xs.w * 2};
  Tensor<T> out = Tensor<T>::uninitialized(os);
  const T* xd = x.data();
  const T* wd = w.data();
  const T* bd = bias.data();
  T* od = out.data();

  parallel_for(os.n * co * os.d, [&](std::int64_t noz) {
    const std::int64_t zo = noz % os.d;
    const std::int64_t o = (noz / os.d) % co;
    const std::int64_t n = noz / (os.d * co);
    const std::int64_t z = zo / 2, dz = zo % 2;
    for (std::int64_t yo = 0; yo < os.h; ++yo) {
      const std::int64_t y = yo / 2, dy = yo % 2;
      T* orow = od + ((n * co + o) * os.d + zo) * os.h * os.w + yo * os.w;
      for (std::int64_t xx = 0; xx < os.w; ++xx) orow[xx] = bd[o];
      for (std::int64_t i = 0; i < ci; ++i) {
        const T* xrow = xd + (((n * ci + i) * xs.d + z) * xs.h + y) * xs.w;
        const T* wp = wd + (((o * ci + i) * 2 + dz) * 2 + dy) * 2;
        const T w0 = wp[0], w1 = wp[1];
        for (std::int64_t xi = 0; xi < xs.w; ++xi) {
          orow[2 * xi] += w0 * xrow[xi];
          orow[2 * xi + 1] += w1 * xrow[xi];
        }
      }
    }
  });
  return out;
}

template <class T>
Tensor<T> tconv3d(const Tensor<T>& x, const ConvParams<T>& p) {
  return tconv3d(x, p.weights, p.bias);
}

template <class T>
Tensor<T> tconv3d_backward_input(const Tensor<T>& g, const Tensor<T>& w) {
  const Shape5 ws = w.shape();
  const Shape5 gs = g.shape();
  const std::int64_t ci = ws.c, co = ws.n;
  const Shape5 xs{gs.n, ci, gs.d / 2, gs.h / 2, gs.w / 2};
  Tensor<T> gx = Tensor<T>::uninitialized(xs);
  const T* gd = g.data();
  const T* wd = w.data();
  T* gxd = gx.data();

  parallel_for(xs.n * ci * xs.d, [&](std::int64_t niz) {
    const std::int64_t z = niz % xs.d;
    const std::int64_t i = (niz / xs.d) % ci;
    const std::int64_t n = niz / (xs.d * ci);
    for (std::int64_t y = 0; y < xs.h; ++y) {
      T* grow = gxd + ((n * ci + i) * xs.d + z) * xs.h * xs.w + y * xs.w;
      for (std::int64_t xx = 0; xx < xs.w; ++xx) grow[xx] = T(0);
      for (std::int64_t o = 0; o < co; ++o)
        for (std::int64_t dz = 0; dz < 2; ++dz)
          for (std::int64_t dy = 0; dy < 2; ++dy) {
            const T* gout = gd + (((n * co + o) * gs.d + 2 * z + dz) * gs.h + 2 * y + dy) * gs.w;
            const T* wp = wd + (((o * ci + i) * 2 + dz) * 2 + dy) * 2;
            const T w0 = wp[0], w1 = wp[1];
            for (std::int64_t xx = 0; xx < xs.w; ++xx)
              grow[xx] += w0 * gout[2 * xx] + w1 * gout[2 * xx + 1];
          }
    }
  });
  return gx;
}

template <class T>
void tconv3d_backward_filter(const Tensor<T>& g, const Tensor<T>& x, Tensor<T>& grad_w,
                             Tensor<T>& grad_b) {
  const Shape5 xs = x.shape();
  const Shape5 gs = g.shape();
  const std::int64_t ci = xs.c, co = grad_w.shape().n;
  constexpr std::int64_t L = detail::acc_lanes<T>;
  const std::int64_t taps = ci * 8;
  const T* xd = x.data();
  const T* gd = g.data();

  parallel_for(co, [&](std::int64_t o) {
    std::vector<T> acc(static_cast<std::size_t>(taps * L), T(0));
    std::array<T, L> bias_acc{};
    for (std::int64_t n = 0; n < xs.n; ++n) {
      for (std::int64_t zo = 0; zo < gs.d; ++zo)
        for (std::int64_t yo = 0; yo < gs.h; ++yo) {
          const T* grow = gd + ((n * co + o) * gs.d + zo) * gs.h * gs.w + yo * gs.w;
          for (std::int64_t xx = 0; xx < gs.w; ++xx) bias_acc[xx % L] += grow[xx];
        }
      for (std::int64_t z = 0; z < xs.d; ++z)
        for (std::int64_t y = 0; y < xs.h; ++y)
          for (std::int64_t i = 0; i < ci; ++i) {
            const T* xrow = xd + (((n * ci + i) * xs.d + z) * xs.h + y) * xs.w;
            for (std::int64_t dz = 0; dz < 2; ++dz)
              for (std::int64_t dy = 0; dy < 2; ++dy) {
                const T* gout =
                    gd + (((n * co + o) * gs.d + 2 * z + dz) * gs.h + 2 * y + dy) * gs.w;
                for (std::int64_t dx = 0; dx < 2; ++dx) {
                  T* lane = acc.data() + ((i * 2 + dz) * 2 + dy) * 2 * L + dx * L;
                  for (std::int64_t xx = 0; xx < xs.w; ++xx)
                    lane[xx % L] += gout[2 * xx + dx] * xrow[xx];
                }
              }
          }
    }
    T* gw = grad_w.data() + o * taps;
    for (std::int64_t t = 0; t < taps; ++t) gw[t] = detail::fold_lanes(acc.data() + t * L, L);
    grad_b[o] = detail::fold_lanes(bias_acc.data(), L);
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::uninitialized(x.shape());
  const T* xd = x.data();
  T* od = out.data();
  parallel_for(x.size(), [&](std::int64_t i) { od[i] = xd[i] > T(0) ? xd[i] : T(0); }, 1 << 18);
  return out;
}

/// Subgradient at 0 is 0.
template <class T>
Tensor<T> relu_backward(const Tensor<T>& g, const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::uninitialized(x.shape());
  const T* xd = x.data();
  const T* gd = g.data();
  T* od = out.data();
  parallel_for(x.size(), [&](std::int64_t i) { od[i] = xd[i] > T(0) ? gd[i] : T(0); }, 1 << 18);
  return out;
}

/// Batch normalization over (n, d, h, w) per channel. Train mode uses the
/// biased batch variance and folds it into the running stats; statistics
/// accumulate in double, sequentially per channel.
template <class T>
Tensor<T> batchnorm3d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, T momentum, T eps,
                      BNMode mode, std::vector<double>* save_mean = nullptr,
                      std::vector<double>* save_invstd = nullptr) {
  const Shape5 xs = x.shape();
  const std::int64_t C = xs.c;
  if (gamma.size() != C || beta.size() != C || running_mean.size() != C ||
      running_var.size() != C)
    throw std::invalid_argument("batchnorm3d: per-channel parameter length mismatch");
  const std::int64_t block = xs.spatial();
  const std::int64_t m = xs.n * block;
  Tensor<T> out = Tensor<T>::uninitialized(xs);
  if (save_mean) save_mean->assign(static_cast<std::size_t>(C), 0.0);
  if (save_invstd) save_invstd->assign(static_cast<std::size_t>(C), 0.0);
  const T* xd = x.data();
  T* od = out.data();

  parallel_for(C, [&](std::int64_t c) {
    double mean, invstd;
    if (mode == BNMode::train) {
      double sum = 0.0;
      for (std::int64_t n = 0; n < xs.n; ++n) {
        const T* p = xd + (n * C + c) * block;
        for (std::int64_t i = 0; i < block; ++i) sum += static_cast<double>(p[i]);
      }
      mean = sum / static_cast<double>(m);
      double varsum = 0.0;
      for (std::int64_t n = 0; n < xs.n; ++n) {
        const T* p = xd + (n * C + c) * block;
        for (std::int64_t i = 0; i < block; ++i) {
          const double dlt = static_cast<double>(p[i]) - mean;
          varsum += dlt * dlt;
        }
      }
      const double var = varsum / static_cast<double>(m);
      invstd = 1.0 / std::sqrt(var + static_cast<double>(eps));
      running_mean[c] = momentum * running_mean[c] + (T(1) - momentum) * static_cast<T>(mean);
      running_var[c] = momentum * running_var[c] + (T(1) - momentum) * static_cast<T>(var);
    } else {
      mean = static_cast<double>(running_mean[c]);
      invstd = 1.0 / std::sqrt(static_cast<double>(running_var[c]) + static_cast<double>(eps));
    }
    if (save_mean) (*save_mean)[static_cast<std::size_t>(c)] = mean;
    if (save_invstd) (*save_invstd)[static_cast<std::size_t>(c)] = invstd;
    const T scale = gamma[c] * static_cast<T>(invstd);
    const T shift = beta[c] - scale * static_cast<T>(mean);
    for (std::int64_t n = 0; n < xs.n; ++n) {
      const T* p = xd + (n * C + c) * block;
      T* q = od + (n * C + c) * block;
      for (std::int64_t i = 0; i < block; ++i) q[i] = scale * p[i] + shift;
    }
  });
  return out;
}

template <class T>
Tensor<T> batchnorm3d(const Tensor<T>& x, BNParams<T>& p, BNMode mode) {
  return batchnorm3d(x, p.gamma, p.beta, p.running_mean, p.running_var, p.momentum, p.eps, mode);
}

/// Backward for batchnorm3d. In train mode the batch statistics are part of
/// the computation, so mean/variance terms appear in dx; in infer mode the
/// normalization is a fixed per-channel affine map.
template <class T>
void batchnorm3d_backward(const Tensor<T>& g, const Tensor<T>& x, const Tensor<T>& gamma,
                          const std::vector<double>& mean, const std::vector<double>& invstd,
                          BNMode mode, Tensor<T>& gx, Tensor<T>& ggamma, Tensor<T>& gbeta) {
  const Shape5 xs = x.shape();
  const std::int64_t C = xs.c;
  const std::int64_t block = xs.spatial();
  const double m = static_cast<double>(xs.n * block);
  const T* xd = x.data();
  const T* gd = g.data();
  T* gxd = gx.data();

  parallel_for(C, [&](std::int64_t c) {
    const double mu = mean[static_cast<std::size_t>(c)];
    const double is = invstd[static_cast<std::size_t>(c)];
    double sum_g = 0.0, sum_gxhat = 0.0;
    for (std::int64_t n = 0; n < xs.n; ++n) {
      const T* gp = gd + (n * C + c) * block;
      const T* xp = xd + (n * C + c) * block;
      for (std::int64_t i = 0; i < block; ++i) {
        sum_g += static_cast<double>(gp[i]);
        sum_gxhat += static_cast<double>(gp[i]) * (static_cast<double>(xp[i]) - mu) * is;
      }
    }
    gbeta[c] = static_cast<T>(sum_g);
    ggamma[c] = static_cast<T>(sum_gxhat);
    const double gam = static_cast<double>(gamma[c]);
    if (mode == BNMode::train) {
      const double k1 = gam * is;
      const double mean_g = sum_g / m;
      const double mean_gxhat = sum_gxhat / m;
      for (std::int64_t n = 0; n < xs.n; ++n) {
        const T* gp = gd + (n * C + c) * block;
        const T* xp = xd + (n * C + c) * block;
        T* q = gxd + (n * C + c) * block;
        for (std::int64_t i = 0; i < block; ++i) {
          const double xhat = (static_cast<double>(xp[i]) - mu) * is;
          q[i] = static_cast<T>(k1 * (static_cast<double>(gp[i]) - mean_g - xhat * mean_gxhat));
        }
      }
    } else {
      const T k1 = static_cast<T>(gam * is);
      for (std::int64_t n = 0; n < xs.n; ++n) {
        const T* gp = gd + (n * C + c) * block;
        T* q = gxd + (n * C + c) * block;
        for (std::int64_t i = 0; i < block; ++i) q[i] = k1 * gp[i];
      }
    }
  });
}

/// Voxel-wise softmax across channels with the max-shift stabilization;
/// adding a per-voxel constant to all channel logits leaves the result
/// bitwise unchanged.
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  const Shape5 xs = x.shape();
  const std::int64_t C = xs.c;
  const std::int64_t block = xs.spatial();
  Tensor<T> out = Tensor<T>::uninitialized(xs);
  const T* xd = x.data();
  T* od = out.data();

  parallel_for(xs.n * xs.d * xs.h, [&](std::int64_t row) {
    const std::int64_t y = row % xs.h;
    const std::int64_t z = (row / xs.h) % xs.d;
    const std::int64_t n = row / (xs.h * xs.d);
    const std::int64_t base = (n * C * xs.d + z) * xs.h * xs.w + y * xs.w;
    const std::int64_t cstride = block;
    for (std::int64_t xx = 0; xx < xs.w; ++xx) {
      const T* v = xd + base + xx;
      T* q = od + base + xx;
      T mx = v[0];
      for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, v[c * cstride]);
      T sum = T(0);
      for (std::int64_t c = 0; c < C; ++c) {
        const T e = std::exp(v[c * cstride] - mx);
        q[c * cstride] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (std::int64_t c = 0; c < C; ++c) q[c * cstride] *= inv;
    }
  });
  return out;
}

/// Backward for softmax: gx_c = p_c * (g_c - sum_k g_k p_k) per voxel.
template <class T>
Tensor<T> softmax_channels_backward(const Tensor<T>& g, const Tensor<T>& p) {
  const Shape5 xs = p.shape();
  const std::int64_t C = xs.c;
  const std::int64_t block = xs.spatial();
  Tensor<T> out = Tensor<T>::uninitialized(xs);
  const T* gd = g.data();
  const T* pd = p.data();
  T* od = out.data();

  parallel_for(xs.n * xs.d * xs.h, [&](std::int64_t row) {
    const std::int64_t y = row % xs.h;
    const std::int64_t z = (row / xs.h) % xs.d;
    const std::int64_t n = row / (xs.h * xs.d);
    const std::int64_t base = (n * C * xs.d + z) * xs.h * xs.w + y * xs.w;
    for (std::int64_t xx = 0; xx < xs.w; ++xx) {
      const T* gv = gd + base + xx;
      const T* pv = pd + base + xx;
      T* q = od + base + xx;
      T dot = T(0);
      for (std::int64_t c = 0; c < C; ++c) dot += gv[c * block] * pv[c * block];
      for (std::int64_t c = 0; c < C; ++c) q[c * block] = pv[c * block] * (gv[c * block] - dot);
    }
  });
  return out;
}

}  // namespace voxseg
