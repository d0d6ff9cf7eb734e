#ifndef LSPST_OPS_HPP
#define LSPST_OPS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "lspst/tensor.hpp"

namespace lspst {

struct Conv2dSpec {
  int stride = 1;
  int pad_h = 0;
  int pad_w = 0;
  int dilation = 1;
  int groups = 1;
};

enum class Act { gelu, silu, sigmoid };
enum class Ewise { add, sub, mul, div };
enum class Pool { mean, max };
enum class Reduce { sum, mean };

namespace detail {

inline void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

inline int ceil_div(int a, int b) {  // b > 0
  return a >= 0 ? (a + b - 1) / b : -((-a) / b);
}
inline int floor_div(int a, int b) {  // b > 0
  return a >= 0 ? a / b : -((-a + b - 1) / b);
}

// Valid output range [lo, hi) so that o*stride + k*dilation - pad lands in
// [0, extent).
inline void conv_bounds(int k, int extent, int out_extent, int stride, int pad,
                        int dilation, int& lo, int& hi) {
  lo = std::max(0, ceil_div(pad - k * dilation, stride));
  hi = std::min(out_extent, floor_div(extent - 1 - k * dilation + pad, stride) + 1);
}

// Same-pad stride-1 3x3 stencil: one pass per output row with the nine
// products fused, which keeps the row loop vectorizable. Hot path for the
// residual/decoder convolutions.
template <class T>
void conv3x3_fused(const T* __restrict__ xp, const T* __restrict__ wp,
                   T* __restrict__ yp, int H, int W) {
  const T w00 = wp[0], w01 = wp[1], w02 = wp[2];
  const T w10 = wp[3], w11 = wp[4], w12 = wp[5];
  const T w20 = wp[6], w21 = wp[7], w22 = wp[8];
  for (int oy = 0; oy < H; ++oy) {
    const T* __restrict__ r0 = xp + (oy - 1) * W;
    const T* __restrict__ r1 = xp + oy * W;
    const T* __restrict__ r2 = xp + (oy + 1) * W;
    T* __restrict__ yrow = yp + oy * W;
    const bool top = oy == 0, bot = oy == H - 1;
    if (!top && !bot) {
      for (int ox = 1; ox < W - 1; ++ox)
        yrow[ox] += w00 * r0[ox - 1] + w01 * r0[ox] + w02 * r0[ox + 1] +
                    w10 * r1[ox - 1] + w11 * r1[ox] + w12 * r1[ox + 1] +
                    w20 * r2[ox - 1] + w21 * r2[ox] + w22 * r2[ox + 1];
      yrow[0] += w01 * r0[0] + w02 * r0[1] + w11 * r1[0] + w12 * r1[1] +
                 w21 * r2[0] + w22 * r2[1];
      yrow[W - 1] += w00 * r0[W - 2] + w01 * r0[W - 1] + w10 * r1[W - 2] +
                     w11 * r1[W - 1] + w20 * r2[W - 2] + w21 * r2[W - 1];
    } else {
      for (int ox = 0; ox < W; ++ox) {
        T acc = T(0);
        if (!top) {
          if (ox > 0) acc += w00 * r0[ox - 1];
          acc += w01 * r0[ox];
          if (ox < W - 1) acc += w02 * r0[ox + 1];
        }
        if (ox > 0) acc += w10 * r1[ox - 1];
        acc += w11 * r1[ox];
        if (ox < W - 1) acc += w12 * r1[ox + 1];
        if (!bot) {
          if (ox > 0) acc += w20 * r2[ox - 1];
          acc += w21 * r2[ox];
          if (ox < W - 1) acc += w22 * r2[ox + 1];
        }
        yrow[ox] += acc;
      }
    }
  }
}

// Weight gradient for the same 3x3 case: nine lane-array dot products filled
// in a single pass over each row pair.
template <class T>
void conv3x3_weight_grad(const T* __restrict__ xp, const T* __restrict__ gyp,
                         T* __restrict__ gwp, int H, int W) {
  constexpr int kLanes = 8;
  T lanes[9][kLanes] = {};
  T tail[9] = {};
  for (int oy = 0; oy < H; ++oy) {
    const T* __restrict__ gyrow = gyp + oy * W;
    for (int ky = 0; ky < 3; ++ky) {
      const int iy = oy + ky - 1;
      if (iy < 0 || iy >= H) continue;
      const T* __restrict__ xrow = xp + iy * W;
      for (int kx = 0; kx < 3; ++kx) {
        const int xlo = std::max(0, 1 - kx), xhi = std::min(W, W + 1 - kx);
        const T* __restrict__ xs = xrow + kx - 1;
        T* lane = lanes[ky * 3 + kx];
        int ox = xlo;
        for (; ox + kLanes <= xhi; ox += kLanes)
          for (int l = 0; l < kLanes; ++l) lane[l] += gyrow[ox + l] * xs[ox + l];
        for (; ox < xhi; ++ox) tail[ky * 3 + kx] += gyrow[ox] * xs[ox];
      }
    }
  }
  for (int k = 0; k < 9; ++k) {
    T acc = tail[k];
    for (int l = 0; l < kLanes; ++l) acc += lanes[k][l];
    gwp[k] += acc;
  }
}

inline bool is_same_pad_3x3(const Conv2dSpec& sp, int KH, int KW, int H, int W,
                            int OH, int OW) {
  return sp.stride == 1 && sp.dilation == 1 && KH == 3 && KW == 3 &&
         sp.pad_h == 1 && sp.pad_w == 1 && OH == H && OW == W && W >= 2 &&
         H >= 2;
}

// y += conv(x, w), one (n, co) plane at a time; bias pre-filled by caller.
template <class T>
void conv2d_accumulate(const T* __restrict__ xp, const T* __restrict__ wp,
                       T* __restrict__ yp, int H, int W, int OH, int OW,
                       int KH, int KW, const Conv2dSpec& sp,
                       const int* oy_lo, const int* oy_hi, const int* ox_lo,
                       const int* ox_hi) {
  if (is_same_pad_3x3(sp, KH, KW, H, W, OH, OW)) {
    conv3x3_fused(xp, wp, yp, H, W);
    return;
  }
  const int s = sp.stride, d = sp.dilation, ph = sp.pad_h, pw = sp.pad_w;
  for (int ky = 0; ky < KH; ++ky) {
    for (int kx = 0; kx < KW; ++kx) {
      const T wv = wp[ky * KW + kx];
      const int xlo = ox_lo[kx], xhi = ox_hi[kx];
      for (int oy = oy_lo[ky]; oy < oy_hi[ky]; ++oy) {
        const T* __restrict__ xrow =
            xp + (oy * s + ky * d - ph) * W + (kx * d - pw);
        T* __restrict__ yrow = yp + oy * OW;
        if (s == 1) {
          for (int ox = xlo; ox < xhi; ++ox) yrow[ox] += wv * xrow[ox];
        } else {
          for (int ox = xlo; ox < xhi; ++ox) yrow[ox] += wv * xrow[ox * s];
        }
      }
    }
  }
}

// gx += correlate-transpose(w, gy)
template <class T>
void conv2d_input_grad(const T* __restrict__ gyp, const T* __restrict__ wp,
                       T* __restrict__ gxp, int H, int W, int OH, int OW,
                       int KH, int KW, const Conv2dSpec& sp,
                       const int* oy_lo, const int* oy_hi, const int* ox_lo,
                       const int* ox_hi) {
  if (is_same_pad_3x3(sp, KH, KW, H, W, OH, OW)) {
    // transpose of a same-pad 3x3 correlation = correlation with the
    // 180-degree rotated kernel
    T wf[9];
    for (int k = 0; k < 9; ++k) wf[k] = wp[8 - k];
    conv3x3_fused(gyp, wf, gxp, H, W);
    return;
  }
  const int s = sp.stride, d = sp.dilation, ph = sp.pad_h, pw = sp.pad_w;
  for (int ky = 0; ky < KH; ++ky) {
    for (int kx = 0; kx < KW; ++kx) {
      const T wv = wp[ky * KW + kx];
      const int xlo = ox_lo[kx], xhi = ox_hi[kx];
      for (int oy = oy_lo[ky]; oy < oy_hi[ky]; ++oy) {
        T* __restrict__ gxrow =
            gxp + (oy * s + ky * d - ph) * W + (kx * d - pw);
        const T* __restrict__ gyrow = gyp + oy * OW;
        if (s == 1) {
          for (int ox = xlo; ox < xhi; ++ox) gxrow[ox] += wv * gyrow[ox];
        } else {
          for (int ox = xlo; ox < xhi; ++ox) gxrow[ox * s] += wv * gyrow[ox];
        }
      }
    }
  }
}

// gw[ky][kx] += <gy, shifted x>. The dot product runs over a lane-array so
// the reduction vectorizes without reassociating a single scalar chain.
template <class T>
void conv2d_weight_grad(const T* __restrict__ xp, const T* __restrict__ gyp,
                        T* __restrict__ gwp, int H, int W, int OH, int OW,
                        int KH, int KW, const Conv2dSpec& sp,
                        const int* oy_lo, const int* oy_hi, const int* ox_lo,
                        const int* ox_hi) {
  if (is_same_pad_3x3(sp, KH, KW, H, W, OH, OW)) {
    conv3x3_weight_grad(xp, gyp, gwp, H, W);
    return;
  }
  const int s = sp.stride, d = sp.dilation, ph = sp.pad_h, pw = sp.pad_w;
  constexpr int kLanes = 8;
  for (int ky = 0; ky < KH; ++ky) {
    for (int kx = 0; kx < KW; ++kx) {
      T lanes[kLanes] = {};
      T tail = T(0);
      const int xlo = ox_lo[kx], xhi = ox_hi[kx];
      for (int oy = oy_lo[ky]; oy < oy_hi[ky]; ++oy) {
        const T* __restrict__ xrow =
            xp + (oy * s + ky * d - ph) * W + (kx * d - pw);
        const T* __restrict__ gyrow = gyp + oy * OW;
        int ox = xlo;
        if (s == 1) {
          for (; ox + kLanes <= xhi; ox += kLanes)
            for (int l = 0; l < kLanes; ++l)
              lanes[l] += gyrow[ox + l] * xrow[ox + l];
          for (; ox < xhi; ++ox) tail += gyrow[ox] * xrow[ox];
        } else {
          for (; ox < xhi; ++ox) tail += gyrow[ox] * xrow[ox * s];
        }
      }
      for (int l = 0; l < kLanes; ++l) tail += lanes[l];
      gwp[ky * KW + kx] += tail;
    }
  }
}

}  // namespace detail

// Cross-correlation with stride / padding / dilation / groups.
template <class T>
BasicTensor<T> conv2d(BasicTape<T>& tape, const BasicTensor<T>& x,
                      const BasicTensor<T>& w, const BasicTensor<T>* bias,
                      const Conv2dSpec& sp) {
  const Shape xs = x.shape(), ws = w.shape();
  detail::check(sp.groups >= 1 && xs.c % sp.groups == 0,
                "conv2d: groups " + std::to_string(sp.groups) +
                    " does not divide input channels " + std::to_string(xs.c));
  detail::check(ws.c == xs.c / sp.groups,
                "conv2d: weight shape " + ws.str() +
                    " inconsistent with input " + xs.str() + " at groups " +
                    std::to_string(sp.groups));
  detail::check(ws.n % sp.groups == 0,
                "conv2d: output channels " + std::to_string(ws.n) +
                    " not divisible by groups " + std::to_string(sp.groups));
  detail::check(sp.stride >= 1 && sp.dilation >= 1 && sp.pad_h >= 0 &&
                    sp.pad_w >= 0,
                "conv2d: invalid stride/pad/dilation");
  const int OH =
      (xs.h + 2 * sp.pad_h - sp.dilation * (ws.h - 1) - 1) / sp.stride + 1;
  const int OW =
      (xs.w + 2 * sp.pad_w - sp.dilation * (ws.w - 1) - 1) / sp.stride + 1;
  detail::check(xs.h + 2 * sp.pad_h >= sp.dilation * (ws.h - 1) + 1 &&
                    xs.w + 2 * sp.pad_w >= sp.dilation * (ws.w - 1) + 1,
                "conv2d: kernel " + ws.str() + " does not fit padded input " +
                    xs.str());
  if (bias)
    detail::check(bias->shape() == Shape{1, ws.n, 1, 1},
                  "conv2d: bias shape " + bias->shape().str() +
                      " must be (1," + std::to_string(ws.n) + ",1,1)");

  BasicTensor<T> y(Shape{xs.n, ws.n, OH, OW});

  std::vector<int> oy_lo(ws.h), oy_hi(ws.h), ox_lo(ws.w), ox_hi(ws.w);
  for (int ky = 0; ky < ws.h; ++ky)
    detail::conv_bounds(ky, xs.h, OH, sp.stride, sp.pad_h, sp.dilation,
                        oy_lo[ky], oy_hi[ky]);
  for (int kx = 0; kx < ws.w; ++kx)
    detail::conv_bounds(kx, xs.w, OW, sp.stride, sp.pad_w, sp.dilation,
                        ox_lo[kx], ox_hi[kx]);

  const int cin_pg = ws.c, cout_pg = ws.n / sp.groups;
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  const T* bd = bias ? bias->data().data() : nullptr;
  T* yd = y.data().data();
  for (int n = 0; n < xs.n; ++n) {
    for (int co = 0; co < ws.n; ++co) {
      T* yp = yd + (size_t(n) * ws.n + co) * OH * OW;
      std::fill(yp, yp + size_t(OH) * OW, bd ? bd[co] : T(0));
      const int g = co / cout_pg;
      for (int cig = 0; cig < cin_pg; ++cig) {
        const T* xp =
            xd + (size_t(n) * xs.c + g * cin_pg + cig) * xs.h * xs.w;
        const T* wp = wd + (size_t(co) * cin_pg + cig) * ws.h * ws.w;
        detail::conv2d_accumulate(xp, wp, yp, xs.h, xs.w, OH, OW, ws.h, ws.w,
                                  sp, oy_lo.data(), oy_hi.data(), ox_lo.data(),
                                  ox_hi.data());
      }
    }
  }

  const bool rec = tape.recording() &&
                   (x.requires_grad() || w.requires_grad() ||
                    (bias && bias->requires_grad()));
  y.set_requires_grad(rec);
  if (rec) {
    BasicTensor<T> xh = x, wh = w, yh = y;
    BasicTensor<T> bh = bias ? *bias : BasicTensor<T>{};
    std::vector<BasicTensor<T>> ins{x, w};
    if (bias) ins.push_back(*bias);
    tape.record(std::move(ins), y,
                [xh, wh, bh, yh, sp, oy_lo, oy_hi, ox_lo, ox_hi]() mutable {
      if (!yh.has_grad()) return;
      const Shape xs = xh.shape(), ws = wh.shape(), ys = yh.shape();
      const int OH = ys.h, OW = ys.w;
      const int cin_pg = ws.c, cout_pg = ws.n / sp.groups;
      const T* gyd = yh.grad().data();
      if (xh.requires_grad()) {
        T* gxd = xh.grad_buffer().data();
        const T* wd = wh.data().data();
        for (int n = 0; n < xs.n; ++n)
          for (int co = 0; co < ws.n; ++co) {
            const T* gyp = gyd + (size_t(n) * ws.n + co) * OH * OW;
            const int g = co / cout_pg;
            for (int cig = 0; cig < cin_pg; ++cig) {
              T* gxp =
                  gxd + (size_t(n) * xs.c + g * cin_pg + cig) * xs.h * xs.w;
              const T* wp = wd + (size_t(co) * cin_pg + cig) * ws.h * ws.w;
              detail::conv2d_input_grad(gyp, wp, gxp, xs.h, xs.w, OH, OW, ws.h,
                                        ws.w, sp, oy_lo.data(), oy_hi.data(),
                                        ox_lo.data(), ox_hi.data());
            }
          }
      }
      if (wh.requires_grad()) {
        T* gwd = wh.grad_buffer().data();
        const T* xd = xh.data().data();
        for (int n = 0; n < xs.n; ++n)
          for (int co = 0; co < ws.n; ++co) {
            const T* gyp = gyd + (size_t(n) * ws.n + co) * OH * OW;
            const int g = co / cout_pg;
            for (int cig = 0; cig < cin_pg; ++cig) {
              const T* xp =
                  xd + (size_t(n) * xs.c + g * cin_pg + cig) * xs.h * xs.w;
              T* gwp = gwd + (size_t(co) * cin_pg + cig) * ws.h * ws.w;
              detail::conv2d_weight_grad(xp, gyp, gwp, xs.h, xs.w, OH, OW,
                                         ws.h, ws.w, sp, oy_lo.data(),
                                         oy_hi.data(), ox_lo.data(),
                                         ox_hi.data());
            }
          }
      }
      if (bh.valid() && bh.requires_grad()) {
        T* gbd = bh.grad_buffer().data();
        for (int n = 0; n < xs.n; ++n)
          for (int co = 0; co < ws.n; ++co) {
            const T* gyp = gyd + (size_t(n) * ws.n + co) * OH * OW;
            T acc = T(0);
            for (size_t i = 0; i < size_t(OH) * OW; ++i) acc += gyp[i];
            gbd[co] += acc;
          }
      }
    });
  }
  return y;
}

template <class T>
BasicTensor<T> conv2d(BasicTape<T>& tape, const BasicTensor<T>& x,
                      const BasicTensor<T>& w, const Conv2dSpec& sp) {
  return conv2d(tape, x, w, static_cast<const BasicTensor<T>*>(nullptr), sp);
}

// Non-overlapping max pooling; ties go to the first element in row-major
// window order so gradients are reproducible.
template <class T>
BasicTensor<T> maxpool2d(BasicTape<T>& tape, const BasicTensor<T>& x,
                         int factor) {
  const Shape xs = x.shape();
  detail::check(factor >= 1, "maxpool2d: factor must be >= 1");
  detail::check(xs.h % factor == 0 && xs.w % factor == 0,
                "maxpool2d: input " + xs.str() + " not divisible by factor " +
                    std::to_string(factor));
  const int OH = xs.h / factor, OW = xs.w / factor;
  BasicTensor<T> y(Shape{xs.n, xs.c, OH, OW});
  std::vector<int32_t> argmax(size_t(xs.n) * xs.c * OH * OW);
  const T* xd = x.data().data();
  T* yd = y.data().data();
  size_t o = 0;
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const T* xp = xd + (size_t(n) * xs.c + c) * xs.h * xs.w;
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox, ++o) {
          int best = (oy * factor) * xs.w + ox * factor;
          T bv = xp[best];
          for (int dy = 0; dy < factor; ++dy)
            for (int dx = 0; dx < factor; ++dx) {
              int idx = (oy * factor + dy) * xs.w + ox * factor + dx;
              if (xp[idx] > bv) {
                bv = xp[idx];
                best = idx;
              }
            }
          yd[o] = bv;
          argmax[o] = best;
        }
    }
  const bool rec = tape.recording() && x.requires_grad();
  y.set_requires_grad(rec);
  if (rec) {
    BasicTensor<T> xh = x, yh = y;
    tape.record({x}, y, [xh, yh, argmax = std::move(argmax)]() mutable {
      if (!yh.has_grad()) return;
      const Shape xs = xh.shape(), ys = yh.shape();
      const T* gyd = yh.grad().data();
      T* gxd = xh.grad_buffer().data();
      size_t o = 0;
      for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
          T* gxp = gxd + (size_t(n) * xs.c + c) * xs.h * xs.w;
          for (int i = 0; i < ys.h * ys.w; ++i, ++o) gxp[argmax[o]] += gyd[o];
        }
    });
  }
  return y;
}

// Each pixel becomes a factor x factor constant block.
template <class T>
BasicTensor<T> upsample_nearest(BasicTape<T>& tape, const BasicTensor<T>& x,
                                int factor) {
  detail::check(factor >= 1, "upsample_nearest: factor must be >= 1");
  const Shape xs = x.shape();
  BasicTensor<T> y(Shape{xs.n, xs.c, xs.h * factor, xs.w * factor});
  const T* xd = x.data().data();
  T* yd = y.data().data();
  const int OW = xs.w * factor;
  for (int nc = 0; nc < xs.n * xs.c; ++nc) {
    const T* xp = xd + size_t(nc) * xs.h * xs.w;
    T* yp = yd + size_t(nc) * xs.h * xs.w * factor * factor;
    for (int iy = 0; iy < xs.h; ++iy)
      for (int dy = 0; dy < factor; ++dy) {
        T* yrow = yp + (iy * factor + dy) * OW;
        const T* xrow = xp + iy * xs.w;
        for (int ix = 0; ix < xs.w; ++ix)
          for (int dx = 0; dx < factor; ++dx) yrow[ix * factor + dx] = xrow[ix];
      }
  }
  const bool rec = tape.recording() && x.requires_grad();
  y.set_requires_grad(rec);
  if (rec) {
    BasicTensor<T> xh = x, yh = y;
    tape.record({x}, y, [xh, yh, factor]() mutable {
      if (!yh.has_grad()) return;
      const Shape xs = xh.shape();
      const T* gyd = yh.grad().data();
      T* gxd = xh.grad_buffer().data();
      const int OW = xs.w * factor;
      for (int nc = 0; nc < xs.n * xs.c; ++nc) {
        T* gxp = gxd + size_t(nc) * xs.h * xs.w;
        const T* gyp = gyd + size_t(nc) * xs.h * xs.w * factor * factor;
        for (int iy = 0; iy < xs.h; ++iy)
          for (int dy = 0; dy < factor; ++dy) {
            const T* gyrow = gyp + (iy * factor + dy) * OW;
            T* gxrow = gxp + iy * xs.w;
            for (int ix = 0; ix < xs.w; ++ix)
              for (int dx = 0; dx < factor; ++dx)
                gxrow[ix] += gyrow[ix * factor + dx];
          }
      }
    });
  }
  return y;
}

// Per-sample, per-group standardization followed by a per-channel affine.
// Statistics accumulate in double.
template <class T>
BasicTensor<T> group_norm(BasicTape<T>& tape, const BasicTensor<T>& x,
                          int groups, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps = T(1e-5)) {
  const Shape xs = x.shape();
  detail::check(groups >= 1 && xs.c % groups == 0,
                "group_norm: groups " + std::to_string(groups) +
                    " does not divide channels " + std::to_string(xs.c));
  detail::check(gamma.shape() == Shape{1, xs.c, 1, 1} &&
                    beta.shape() == Shape{1, xs.c, 1, 1},
                "group_norm: affine shapes must be (1,c,1,1)");
  const int cpg = xs.c / groups;
  const size_t plane = size_t(xs.h) * xs.w;
  const size_t gsz = cpg * plane;

  BasicTensor<T> y(xs);
  std::vector<T> mean(size_t(xs.n) * groups), invstd(size_t(xs.n) * groups);
  const T* xd = x.data().data();
  const T* gd = gamma.data().data();
  const T* bd = beta.data().data();
  T* yd = y.data().data();
  for (int n = 0; n < xs.n; ++n)
    for (int g = 0; g < groups; ++g) {
      const T* xp = xd + (size_t(n) * xs.c + size_t(g) * cpg) * plane;
      double s = 0, s2 = 0;
      for (size_t i = 0; i < gsz; ++i) {
        s += xp[i];
        s2 += double(xp[i]) * xp[i];
      }
      const double mu = s / double(gsz);
      const double var = std::max(0.0, s2 / double(gsz) - mu * mu);
      const double is = 1.0 / std::sqrt(var + double(eps));
      mean[size_t(n) * groups + g] = T(mu);
      invstd[size_t(n) * groups + g] = T(is);
      for (int cc = 0; cc < cpg; ++cc) {
        const int ch = g * cpg + cc;
        const T* xr = xp + size_t(cc) * plane;
        T* yr = yd + (size_t(n) * xs.c + ch) * plane;
        const T m = T(mu), a = T(is) * gd[ch], b2 = bd[ch];
        for (size_t i = 0; i < plane; ++i) yr[i] = a * (xr[i] - m) + b2;
      }
    }

  const bool rec = tape.recording() &&
                   (x.requires_grad() || gamma.requires_grad() ||
                    beta.requires_grad());
  y.set_requires_grad(rec);
  if (rec) {
    BasicTensor<T> xh = x, gh = gamma, bh = beta, yh = y;
    tape.record({x, gamma, beta}, y,
                [xh, gh, bh, yh, groups, mean = std::move(mean),
                 invstd = std::move(invstd)]() mutable {
      if (!yh.has_grad()) return;
      const Shape xs = xh.shape();
      const int cpg = xs.c / groups;
      const size_t plane = size_t(xs.h) * xs.w;
      const size_t gsz = cpg * plane;
      const T* xd = xh.data().data();
      const T* gd = gh.data().data();
      const T* gyd = yh.grad().data();
      if (gh.requires_grad() || bh.requires_grad()) {
        std::vector<double> ggam(xs.c, 0.0), gbet(xs.c, 0.0);
        for (int n = 0; n < xs.n; ++n)
          for (int ch = 0; ch < xs.c; ++ch) {
            const int g = ch / cpg;
            const T mu = mean[size_t(n) * groups + g];
            const T is = invstd[size_t(n) * groups + g];
            const T* xr = xd + (size_t(n) * xs.c + ch) * plane;
            const T* gyr = gyd + (size_t(n) * xs.c + ch) * plane;
            double sg = 0, sb = 0;
            for (size_t i = 0; i < plane; ++i) {
              sg += double(gyr[i]) * double((xr[i] - mu) * is);
              sb += gyr[i];
            }
            ggam[ch] += sg;
            gbet[ch] += sb;
          }
        if (gh.requires_grad()) {
          T* p = gh.grad_buffer().data();
          for (int ch = 0; ch < xs.c; ++ch) p[ch] += T(ggam[ch]);
        }
        if (bh.requires_grad()) {
          T* p = bh.grad_buffer().data();
          for (int ch = 0; ch < xs.c; ++ch) p[ch] += T(gbet[ch]);
        }
      }
      if (xh.requires_grad()) {
        T* gxd = xh.grad_buffer().data();
        for (int n = 0; n < xs.n; ++n)
          for (int g = 0; g < groups; ++g) {
            const T mu = mean[size_t(n) * groups + g];
            const T is = invstd[size_t(n) * groups + g];
            const T* xp = xd + (size_t(n) * xs.c + size_t(g) * cpg) * plane;
            const T* gyp = gyd + (size_t(n) * xs.c + size_t(g) * cpg) * plane;
            double s1 = 0, s2 = 0;
            for (int cc = 0; cc < cpg; ++cc) {
              const T gam = gd[g * cpg + cc];
              const T* xr = xp + size_t(cc) * plane;
              const T* gyr = gyp + size_t(cc) * plane;
              for (size_t i = 0; i < plane; ++i) {
                const double gxh = double(gyr[i]) * gam;
                s1 += gxh;
                s2 += gxh * double((xr[i] - mu) * is);
              }
            }
            const T c1 = T(s1 / double(gsz));
            const T c2 = T(s2 / double(gsz));
            T* gxp = gxd + (size_t(n) * xs.c + size_t(g) * cpg) * plane;
            for (int cc = 0; cc < cpg; ++cc) {
              const T gam = gd[g * cpg + cc];
              const T* xr = xp + size_t(cc) * plane;
              const T* gyr = gyp + size_t(cc) * plane;
              T* gxr = gxp + size_t(cc) * plane;
              for (size_t i = 0; i < plane; ++i) {
                const T xhat = (xr[i] - mu) * is;
                gxr[i] += is * (gyr[i] * gam - c1 - xhat * c2);
              }
            }
          }
      }
    });
  }
  return y;
}

namespace detail {

template <class T>
inline T sigmoid_val(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                   : std::exp(x) / (T(1) + std::exp(x));
}
inline double norm_cdf(double x) {
  return 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
}
inline double norm_pdf(double x) {
  return 0.3989422804014326779 * std::exp(-0.5 * x * x);
}

}  // namespace detail

// gelu uses the exact erf formulation.
template <class T>
BasicTensor<T> activation(BasicTape<T>& tape, const BasicTensor<T>& x,
                          Act kind) {
  BasicTensor<T> y(x.shape());
  const T* xd = x.data().data();
  T* yd = y.data().data();
  const size_t n = x.data().size();
  switch (kind) {
    case Act::gelu:
      for (size_t i = 0; i < n; ++i)
        yd[i] = T(double(xd[i]) * detail::norm_cdf(double(xd[i])));
      break;
    case Act::silu:
      for (size_t i = 0; i < n; ++i) yd[i] = xd[i] * detail::sigmoid_val(xd[i]);
      break;
    case Act::sigmoid:
      for (size_t i = 0; i < n; ++i) yd[i] = detail::sigmoid_val(xd[i]);
      break;
  }
  const bool rec = tape.recording() && x.requires_grad();
  y.set_requires_grad(rec);
  if (rec) {
    BasicTensor<T> xh = x, yh = y;
    tape.record({x}, y, [xh, yh, kind]() mutable {
      if (!yh.has_grad()) return;
      const T* xd = xh.data().data();
      const T* yd = yh.data().data();
      const T* gy = yh.grad().data();
      T* gx = xh.grad_buffer().data();
      const size_t n = xh.data().size();
      switch (kind) {
        case Act::gelu:
          for (size_t i = 0; i < n; ++i) {
            const double v = xd[i];
            gx[i] += gy[i] * T(detail::norm_cdf(v) + v * detail::norm_pdf(v));
          }
          break;
        case Act::silu:
          for (size_t i = 0; i < n; ++i) {
            const T s = detail::sigmoid_val(xd[i]);
            gx[i] += gy[i] * s * (T(1) + xd[i] * (T(1) - s));
          }
          break;
        case Act::sigmoid:
          for (size_t i = 0; i < n; ++i)
            gx[i] += gy[i] * yd[i] * (T(1) - yd[i]);
          break;
      }
    });
  }
  return y;
}

template <class T>
BasicTensor<T> gelu(BasicTape<T>& t, const BasicTensor<T>& x) {
  return activation(t, x, Act::gelu);
}
template <class T>
BasicTensor<T> silu(BasicTape<T>& t, const BasicTensor<T>& x) {
  return activation(t, x, Act::silu);
}
template <class T>
BasicTensor<T> sigmoid(BasicTape<T>& t, const BasicTensor<T>& x) {
  return activation(t, x, Act::sigmoid);
}

template <class T>
BasicTensor<T> ewise(BasicTape<T>& tape, const BasicTensor<T>& a,
                     const BasicTensor<T>& b, Ewise kind) {
  detail::check(a.shape() == b.shape(), "ewise: shape mismatch " +
                                            a.shape().str() + " vs " +
                                            b.shape().str());
  BasicTensor<T> y(a.shape());
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  T* yd = y.data().data();
  const size_t n = a.data().size();
  switch (kind) {
    case Ewise::add:
      for (size_t i = 0; i < n; ++i) yd[i] = ad[i] + bd[i];
      break;
    case Ewise::sub:
      for (size_t i = 0; i < n; ++i) yd[i] = ad[i] - bd[i];
      break;
    case Ewise::mul:
      for (size_t i = 0; i < n; ++i) yd[i] = ad[i] * bd[i];
      break;
    case Ewise::div:
      for (size_t i = 0; i < n; ++i) yd[i] = ad[i] / bd[i];
      break;
  }
  const bool rec =
      tape.recording() && (a.requires_grad() || b.requires_grad());
  y.set_requires_grad(rec);
  if (rec) {
    BasicTensor<T> ah = a, bh = b, yh = y;
    tape.record({a, b}, y, [ah, bh, yh, kind]() mutable {
      if (!yh.has_grad()) return;
      const T* gy = yh.grad().data();
      const T* ad = ah.data().data();
      const T* bd = bh.data().data();
      const size_t n = ah.data().size();
      if (ah.requires_grad()) {
        T* ga = ah.grad_buffer().data();
        switch (kind) {
          case Ewise::add:
          case Ewise::sub:
            for (size_t i = 0; i < n; ++i) ga[i] += gy[i];
            break;
          case Ewise::mul:
            for (size_t i = 0; i < n; ++i) ga[i] += gy[i] * bd[i];
            break;
          case Ewise::div:
            for (size_t i = 0; i < n; ++i) ga[i] += gy[i] / bd[i];
            break;
        }
      }
      if (bh.requires_grad()) {
        T* gb = bh.grad_buffer().data();
        switch (kind) {
          case Ewise::add:
            for (size_t i = 0; i < n; ++i) gb[i] += gy[i];
            break;
          case Ewise::sub:
            for (size_t i = 0; i < n; ++i) gb[i] -= gy[i];
            break;
          case Ewise::mul:
            for (size_t i = 0; i < n; ++i) gb[i] += gy[i] * ad[i];
            break;
          case Ewise::div:
            for (size_t i = 0; i < n; ++i)
              gb[i] -= gy[i] * ad[i] / (bd[i] * bd[i]);
            break;
        }
      }
    });
  }
  return y;
}

template <class T>
BasicTensor<T> add(BasicTape<T>& t, const BasicTensor<T>& a,
                   const BasicTensor<T>& b) {
  return ewise(t, a, b, Ewise::add);
}
template <class T>
BasicTensor<T> sub(BasicTape<T>& t, const BasicTensor<T>& a,
                   const BasicTensor<T>& b) {
  return ewise(t, a, b, Ewise::sub);
}
template <class T>
BasicTensor<T> mul(BasicTape<T>& t, const BasicTensor<T>& a,
                   const BasicTensor<T>& b) {
  return ewise(t, a, b, Ewise::mul);
}
template <class T>
BasicTensor<T> div(BasicTape<T>& t, const BasicTensor<T>& a,
                   const BasicTensor<T>& b) {
  return ewise(t, a, b, Ewise::div);
}

// y = alpha * x + beta with scalar constants.
template <class T>
BasicTensor<T> affine(BasicTape<T>& tape, const BasicTensor<T>& x, T alpha,
                      T beta) {
  BasicTensor<T> y(x.shape());
  const T* xd = x.data().data();
  T* yd = y.data().data();
  for (size_t i = 0; i < x.data().size(); ++i) yd[i] = alpha * xd[i] + beta;
  const bool rec = tape.recording() && x.requires_grad();
  y.set_requires_grad(rec);
  if (rec) {
    BasicTensor<T> xh = x, yh = y;
    tape.record({x}, y, [xh, yh, alpha]() mutable {
      if (!yh.has_grad()) return;
      const T* gy = yh.grad().data();
      T* gx = xh.grad_buffer().data();
      for (size_t i = 0; i < xh.data().size(); ++i) gx[i] += alpha * gy[i];
    });
  }
  return y;
}

// Multiplies channel i by lambda_i (LayerScale); lambda has shape (1,c,1,1).
template <class T>
BasicTensor<T> channel_scale(BasicTape<T>& tape, const BasicTensor<T>& x,
                             const BasicTensor<T>& lambda) {
  const Shape xs = x.shape();
  detail::check(lambda.shape() == Shape{1, xs.c, 1, 1},
                "channel_scale: lambda shape " + lambda.shape().str() +
                    " must be (1," + std::to_string(xs.c) + ",1,1)");
  BasicTensor<T> y(xs);
  const T* xd = x.data().data();
  const T* ld = lambda.data().data();
  T* yd = y.data().data();
  const size_t plane = size_t(xs.h) * xs.w;
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const T lv = ld[c];
      const T* xr = xd + (size_t(n) * xs.c + c) * plane;
      T* yr = yd + (size_t(n) * xs.c + c) * plane;
      for (size_t i = 0; i < plane; ++i) yr[i] = lv * xr[i];
    }
  const bool rec =
      tape.recording() && (x.requires_grad() || lambda.requires_grad());
  y.set_requires_grad(rec);
  if (rec) {
    BasicTensor<T> xh = x, lh = lambda, yh = y;
    tape.record({x, lambda}, y, [xh, lh, yh]() mutable {
      if (!yh.has_grad()) return;
      const Shape xs = xh.shape();
      const size_t plane = size_t(xs.h) * xs.w;
      const T* gy = yh.grad().data();
      const T* xd = xh.data().data();
      const T* ld = lh.data().data();
      if (xh.requires_grad()) {
        T* gx = xh.grad_buffer().data();
        for (int n = 0; n < xs.n; ++n)
          for (int c = 0; c < xs.c; ++c) {
            const T lv = ld[c];
            const size_t off = (size_t(n) * xs.c + c) * plane;
            for (size_t i = 0; i < plane; ++i)
              gx[off + i] += lv * gy[off + i];
          }
      }
      if (lh.requires_grad()) {
        T* gl = lh.grad_buffer().data();
        for (int c = 0; c < xs.c; ++c) {
          double acc = 0;
          for (int n = 0; n < xs.n; ++n) {
            const size_t off = (size_t(n) * xs.c + c) * plane;
            for (size_t i = 0; i < plane; ++i)
              acc += double(gy[off + i]) * xd[off + i];
          }
          gl[c] += T(acc);
        }
      }
    });
  }
  return y;
}

// Multiplies every channel of x by a single-channel gate map (n,1,h,w).
template <class T>
BasicTensor<T> spatial_scale(BasicTape<T>& tape, const BasicTensor<T>& x,
                             const BasicTensor<T>& gate) {
  const Shape xs = x.shape();
  detail::check(gate.shape() == Shape{xs.n, 1, xs.h, xs.w},
                "spatial_scale: gate shape " + gate.shape().str() +
                    " must be (" + std::to_string(xs.n) + ",1," +
                    std::to_string(xs.h) + "," + std::to_string(xs.w) + ")");
  BasicTensor<T> y(xs);
  const size_t plane = size_t(xs.h) * xs.w;
  const T* xd = x.data().data();
  const T* gd = gate.data().data();
  T* yd = y.data().data();
  for (int n = 0; n < xs.n; ++n) {
    const T* gp = gd + size_t(n) * plane;
    for (int c = 0; c < xs.c; ++c) {
      const size_t off = (size_t(n) * xs.c + c) * plane;
      for (size_t i = 0; i < plane; ++i) yd[off + i] = xd[off + i] * gp[i];
    }
  }
  const bool rec =
      tape.recording() && (x.requires_grad() || gate.requires_grad());
  y.set_requires_grad(rec);
  if (rec) {
    BasicTensor<T> xh = x, gh = gate, yh = y;
    tape.record({x, gate}, y, [xh, gh, yh]() mutable {
      if (!yh.has_grad()) return;
      const Shape xs = xh.shape();
      const size_t plane = size_t(xs.h) * xs.w;
      const T* gy = yh.grad().data();
      const T* xd = xh.data().data();
      const T* gd = gh.data().data();
      if (xh.requires_grad()) {
        T* gx = xh.grad_buffer().data();
        for (int n = 0; n < xs.n; ++n) {
          const T* gp = gd + size_t(n) * plane;
          for (int c = 0; c < xs.c; ++c) {
            const size_t off = (size_t(n) * xs.c + c) * plane;
            for (size_t i = 0; i < plane; ++i)
              gx[off + i] += gy[off + i] * gp[i];
          }
        }
      }
      if (gh.requires_grad()) {
        T* gg = gh.grad_buffer().data();
        for (int n = 0; n < xs.n; ++n) {
          T* gp = gg + size_t(n) * plane;
          for (int c = 0; c < xs.c; ++c) {
            const size_t off = (size_t(n) * xs.c + c) * plane;
            for (size_t i = 0; i < plane; ++i)
              gp[i] += gy[off + i] * xd[off + i];
          }
        }
      }
    });
  }
  return y;
}

template <class T>
BasicTensor<T> concat_channels(BasicTape<T>& tape,
                               const std::vector<BasicTensor<T>>& parts) {
  detail::check(!parts.empty(), "concat_channels: empty part list");
  const Shape s0 = parts[0].shape();
  int ctot = 0;
  for (const auto& p : parts) {
    detail::check(p.shape().n == s0.n && p.shape().h == s0.h &&
                      p.shape().w == s0.w,
                  "concat_channels: mismatched spatial dims " +
                      p.shape().str() + " vs " + s0.str());
    ctot += p.shape().c;
  }
  BasicTensor<T> y(Shape{s0.n, ctot, s0.h, s0.w});
  const size_t plane = size_t(s0.h) * s0.w;
  T* yd = y.data().data();
  bool any_rg = false;
  for (int n = 0; n < s0.n; ++n) {
    int coff = 0;
    for (const auto& p : parts) {
      const int pc = p.shape().c;
      const T* pd = p.data().data() + size_t(n) * pc * plane;
      std::copy(pd, pd + size_t(pc) * plane,
                yd + (size_t(n) * ctot + coff) * plane);
      coff += pc;
    }
  }
  for (const auto& p : parts) any_rg = any_rg || p.requires_grad();
  const bool rec = tape.recording() && any_rg;
  y.set_requires_grad(rec);
  if (rec) {
    std::vector<BasicTensor<T>> ph = parts;
    BasicTensor<T> yh = y;
    tape.record(parts, y, [ph, yh]() mutable {
      if (!yh.has_grad()) return;
      const Shape ys = yh.shape();
      const size_t plane = size_t(ys.h) * ys.w;
      const T* gy = yh.grad().data();
      int coff = 0;
      for (auto& p : ph) {
        const int pc = p.shape().c;
        if (p.requires_grad()) {
          T* gp = p.grad_buffer().data();
          for (int n = 0; n < ys.n; ++n) {
            const T* src = gy + (size_t(n) * ys.c + coff) * plane;
            T* dst = gp + size_t(n) * pc * plane;
            for (size_t i = 0; i < size_t(pc) * plane; ++i) dst[i] += src[i];
          }
        }
        coff += pc;
      }
    });
  }
  return y;
}

namespace detail {

// Shared by channel/batch splits: copies a contiguous axis slice per sample.
template <class T>
std::vector<BasicTensor<T>> split_axis(BasicTape<T>& tape,
                                       const BasicTensor<T>& x,
                                       const std::vector<int>& sizes,
                                       bool batch_axis) {
  const Shape xs = x.shape();
  const int total = batch_axis ? xs.n : xs.c;
  int sum = 0;
  for (int s : sizes) {
    check(s > 0, "split: sizes must be positive");
    sum += s;
  }
  check(sum == total, "split: sizes sum to " + std::to_string(sum) +
                          ", expected " + std::to_string(total));
  const size_t plane = size_t(xs.h) * xs.w;
  std::vector<BasicTensor<T>> outs;
  int off = 0;
  for (int s : sizes) {
    Shape os = batch_axis ? Shape{s, xs.c, xs.h, xs.w}
                          : Shape{xs.n, s, xs.h, xs.w};
    BasicTensor<T> part(os);
    T* pd = part.data().data();
    const T* xd = x.data().data();
    if (batch_axis) {
      const size_t len = size_t(s) * xs.c * plane;
      std::copy(xd + size_t(off) * xs.c * plane,
                xd + size_t(off) * xs.c * plane + len, pd);
    } else {
      for (int n = 0; n < xs.n; ++n)
        std::copy(xd + (size_t(n) * xs.c + off) * plane,
                  xd + (size_t(n) * xs.c + off + s) * plane,
                  pd + size_t(n) * s * plane);
    }
    const bool rec = tape.recording() && x.requires_grad();
    part.set_requires_grad(rec);
    if (rec) {
      BasicTensor<T> xh = x, p = part;
      int o = off, sz = s;
      tape.record({x}, part, [xh, p, o, sz, batch_axis]() mutable {
        if (!p.has_grad()) return;
        const Shape xs = xh.shape();
        const size_t plane = size_t(xs.h) * xs.w;
        const T* gp = p.grad().data();
        T* gx = xh.grad_buffer().data();
        if (batch_axis) {
          const size_t len = size_t(sz) * xs.c * plane;
          T* dst = gx + size_t(o) * xs.c * plane;
          for (size_t i = 0; i < len; ++i) dst[i] += gp[i];
        } else {
          for (int n = 0; n < xs.n; ++n) {
            T* dst = gx + (size_t(n) * xs.c + o) * plane;
            const T* src = gp + size_t(n) * sz * plane;
            for (size_t i = 0; i < size_t(sz) * plane; ++i) dst[i] += src[i];
          }
        }
      });
    }
    outs.push_back(std::move(part));
    off += s;
  }
  return outs;
}

}  // namespace detail

template <class T>
std::vector<BasicTensor<T>> split_channels(BasicTape<T>& tape,
                                           const BasicTensor<T>& x,
                                           const std::vector<int>& sizes) {
  return detail::split_axis(tape, x, sizes, false);
}

template <class T>
std::vector<BasicTensor<T>> split_batch(BasicTape<T>& tape,
                                        const BasicTensor<T>& x,
                                        const std::vector<int>& sizes) {
  return detail::split_axis(tape, x, sizes, true);
}

// Reduction across the channel axis to a (n,1,h,w) map. Max ties resolve to
// the lowest channel index.
template <class T>
BasicTensor<T> channel_pool(BasicTape<T>& tape, const BasicTensor<T>& x,
                            Pool kind) {
  const Shape xs = x.shape();
  detail::check(xs.c >= 1, "channel_pool: needs at least one channel");
  BasicTensor<T> y(Shape{xs.n, 1, xs.h, xs.w});
  const size_t plane = size_t(xs.h) * xs.w;
  const T* xd = x.data().data();
  T* yd = y.data().data();
  std::vector<int32_t> argmax;
  if (kind == Pool::max) argmax.resize(size_t(xs.n) * plane);
  for (int n = 0; n < xs.n; ++n) {
    const T* xp = xd + size_t(n) * xs.c * plane;
    T* yp = yd + size_t(n) * plane;
    if (kind == Pool::mean) {
      for (size_t i = 0; i < plane; ++i) {
        T acc = T(0);
        for (int c = 0; c < xs.c; ++c) acc += xp[size_t(c) * plane + i];
        yp[i] = acc / T(xs.c);
      }
    } else {
      int32_t* am = argmax.data() + size_t(n) * plane;
      for (size_t i = 0; i < plane; ++i) {
        T best = xp[i];
        int bc = 0;
        for (int c = 1; c < xs.c; ++c) {
          const T v = xp[size_t(c) * plane + i];
          if (v > best) {
            best = v;
            bc = c;
          }
        }
        yp[i] = best;
        am[i] = bc;
      }
    }
  }
  const bool rec = tape.recording() && x.requires_grad();
  y.set_requires_grad(rec);
  if (rec) {
    BasicTensor<T> xh = x, yh = y;
    tape.record({x}, y,
                [xh, yh, kind, argmax = std::move(argmax)]() mutable {
      if (!yh.has_grad()) return;
      const Shape xs = xh.shape();
      const size_t plane = size_t(xs.h) * xs.w;
      const T* gy = yh.grad().data();
      T* gx = xh.grad_buffer().data();
      for (int n = 0; n < xs.n; ++n) {
        const T* gyp = gy + size_t(n) * plane;
        T* gxp = gx + size_t(n) * xs.c * plane;
        if (kind == Pool::mean) {
          const T inv = T(1) / T(xs.c);
          for (int c = 0; c < xs.c; ++c)
            for (size_t i = 0; i < plane; ++i)
              gxp[size_t(c) * plane + i] += gyp[i] * inv;
        } else {
          const int32_t* am = argmax.data() + size_t(n) * plane;
          for (size_t i = 0; i < plane; ++i)
            gxp[size_t(am[i]) * plane + i] += gyp[i];
        }
      }
    });
  }
  return y;
}

// Full reduction to a scalar (1,1,1,1) tensor; accumulates in double.
template <class T>
BasicTensor<T> reduce(BasicTape<T>& tape, const BasicTensor<T>& x,
                      Reduce kind) {
  double acc = 0;
  for (T v : x.data()) acc += v;
  if (kind == Reduce::mean) acc /= double(x.numel());
  BasicTensor<T> y(Shape{1, 1, 1, 1}, T(acc));
  const bool rec = tape.recording() && x.requires_grad();
  y.set_requires_grad(rec);
  if (rec) {
    BasicTensor<T> xh = x, yh = y;
    tape.record({x}, y, [xh, yh, kind]() mutable {
      if (!yh.has_grad()) return;
      const T g = yh.grad()[0];
      const T v = kind == Reduce::sum ? g : g / T(xh.numel());
      T* gx = xh.grad_buffer().data();
      for (size_t i = 0; i < xh.data().size(); ++i) gx[i] += v;
    });
  }
  return y;
}

}  // namespace lspst

#endif
