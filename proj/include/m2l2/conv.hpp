#pragma once

#include <algorithm>

#include "m2l2/autograd.hpp"

// 2-D convolution over feature maps stored as [C x H*W] row-major matrices
// (column index = h*W + w). Implemented as im2col + GEMM, tiled over slabs of
// output rows so the column buffer stays small at large resolutions.
namespace m2l2::ag {

struct ConvGeom {
  Index in_ch = 0;
  Index H = 0, W = 0;
  Index kh = 3, kw = 3;
  Index stride = 1;
  Index pad = 1;

  Index out_h() const { return (H + 2 * pad - kh) / stride + 1; }
  Index out_w() const { return (W + 2 * pad - kw) / stride + 1; }
  Index patch() const { return in_ch * kh * kw; }
};

namespace detail {

inline Index conv_slab_rows(const ConvGeom& g) {
  Index target = 8192 / std::max<Index>(1, g.out_w());
  return std::clamp<Index>(target, 1, std::max<Index>(1, g.out_h()));
}

// Fills K's first nho*Wo columns; K is [patch x slab_pixels], column index
// (ho - ho0)*Wo + wo, row index (ci*kh + dh)*kw + dw.
template <typename S>
void im2col_slab(const Mat<S>& x, const ConvGeom& g, Index ho0, Index nho,
                 Mat<S>& K) {
  const Index Wo = g.out_w();
  for (Index ci = 0; ci < g.in_ch; ++ci) {
    const S* xrow = x.data() + ci * x.cols();
    for (Index dh = 0; dh < g.kh; ++dh) {
      for (Index dw = 0; dw < g.kw; ++dw) {
        const Index krow = (ci * g.kh + dh) * g.kw + dw;
        S* krow_ptr = K.data() + krow * K.cols();
        for (Index i = 0; i < nho; ++i) {
          const Index hi = (ho0 + i) * g.stride - g.pad + dh;
          S* dst = krow_ptr + i * Wo;
          if (hi < 0 || hi >= g.H) {
            std::fill(dst, dst + Wo, S(0));
            continue;
          }
          const S* src = xrow + hi * g.W;
          if (g.stride == 1) {
            const Index off = dw - g.pad;  // wi = wo + off
            const Index lo = std::max<Index>(0, -off);
            const Index hi_w = std::min<Index>(Wo, g.W - off);
            std::fill(dst, dst + std::min(lo, Wo), S(0));
            if (hi_w > lo) std::copy(src + lo + off, src + hi_w + off, dst + lo);
            if (hi_w < Wo) std::fill(dst + std::max<Index>(lo, hi_w), dst + Wo, S(0));
          } else {
            for (Index wo = 0; wo < Wo; ++wo) {
              const Index wi = wo * g.stride - g.pad + dw;
              dst[wo] = (wi >= 0 && wi < g.W) ? src[wi] : S(0);
            }
          }
        }
      }
    }
  }
}

// Scatter-add of a column-space gradient back to input layout.
template <typename S>
void col2im_slab_add(const Mat<S>& Kg, const ConvGeom& g, Index ho0, Index nho,
                     Mat<S>& dx) {
  const Index Wo = g.out_w();
  for (Index ci = 0; ci < g.in_ch; ++ci) {
    S* xrow = dx.data() + ci * dx.cols();
    for (Index dh = 0; dh < g.kh; ++dh) {
      for (Index dw = 0; dw < g.kw; ++dw) {
        const Index krow = (ci * g.kh + dh) * g.kw + dw;
        const S* krow_ptr = Kg.data() + krow * Kg.cols();
        for (Index i = 0; i < nho; ++i) {
          const Index hi = (ho0 + i) * g.stride - g.pad + dh;
          if (hi < 0 || hi >= g.H) continue;
          const S* src = krow_ptr + i * Wo;
          S* dst = xrow + hi * g.W;
          for (Index wo = 0; wo < Wo; ++wo) {
            const Index wi = wo * g.stride - g.pad + dw;
            if (wi >= 0 && wi < g.W) dst[wi] += src[wo];
          }
        }
      }
    }
  }
}

// 3x3/stride-1/pad-1 fast path: one whole-map GEMM per kernel offset over a
// zero-padded copy of the grid. In the padded flat layout every offset is a
// plain column shift, and a shift that crosses a grid-row boundary lands in a
// pad cell, so wraparound never contaminates an interior output. Accumulating
// 9 GEMMs skips the im2col buffer (9x less GEMM input traffic), which is the
// difference that matters at these memory-bound shapes.
template <typename S>
Mat<S> conv3x3_padded(const Mat<S>& x, const Mat<S>& w, const Mat<S>& b,
                      const ConvGeom& g) {
  const Index H = g.H, W = g.W, C = g.in_ch, Co = w.rows();
  const Index Wp = W + 2, P = (H + 2) * Wp;
  Mat<S> xpad = Mat<S>::Zero(C, P);
  for (Index ci = 0; ci < C; ++ci) {
    const S* src = x.data() + ci * x.cols();
    S* dst = xpad.data() + ci * P;
    for (Index h = 0; h < H; ++h)
      std::copy(src + h * W, src + (h + 1) * W, dst + (h + 1) * Wp + 1);
  }
  Mat<S> wk(Co, C);
  Mat<S> ypad(Co, P);
  // Center tap first with plain assignment; the 8 shifted taps accumulate.
  // Their clipped end ranges are pad cells (|shift| <= Wp+1, and the padded
  // map starts and ends with Wp+1 pad cells), never extracted below.
  for (Index ci = 0; ci < C; ++ci) wk.col(ci) = w.col((ci * 3 + 1) * 3 + 1);
  ypad.noalias() = wk * xpad;
  for (Index dh = 0; dh < 3; ++dh)
    for (Index dw = 0; dw < 3; ++dw) {
      if (dh == 1 && dw == 1) continue;
      for (Index ci = 0; ci < C; ++ci)
        wk.col(ci) = w.col((ci * 3 + dh) * 3 + dw);
      const Index delta = (dh - 1) * Wp + (dw - 1);
      const Index a = std::max<Index>(0, -delta);
      const Index n = P - std::abs(delta);
      ypad.middleCols(a, n).noalias() += wk * xpad.middleCols(a + delta, n);
    }
  Mat<S> out(Co, H * W);
  for (Index co = 0; co < Co; ++co) {
    const S* src = ypad.data() + co * P;
    S* dst = out.data() + co * out.cols();
    const S bias = b(co, 0);
    for (Index h = 0; h < H; ++h) {
      const S* s = src + (h + 1) * Wp + 1;
      for (Index j = 0; j < W; ++j) dst[h * W + j] = s[j] + bias;
    }
  }
  return out;
}

template <typename S>
Mat<S> conv2d_value(const Mat<S>& x, const Mat<S>& w, const Mat<S>& b,
                    const ConvGeom& g) {
  if (g.kh == 3 && g.kw == 3 && g.stride == 1 && g.pad == 1)
    return conv3x3_padded(x, w, b, g);
  const Index Ho = g.out_h(), Wo = g.out_w();
  Mat<S> out(w.rows(), Ho * Wo);
  if (g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0) {
    out.noalias() = w * x;
  } else {
    const Index slab = conv_slab_rows(g);
    Mat<S> K(g.patch(), slab * Wo);
    for (Index ho0 = 0; ho0 < Ho; ho0 += slab) {
      const Index nho = std::min(slab, Ho - ho0);
      im2col_slab(x, g, ho0, nho, K);
      out.middleCols(ho0 * Wo, nho * Wo).noalias() = w * K.leftCols(nho * Wo);
    }
  }
  out.colwise() += b.col(0);
  return out;
}

}  // namespace detail

// x: [in_ch x H*W], w: [out_ch x in_ch*kh*kw], b: [out_ch x 1].
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& b,
              const ConvGeom& g) {
  check(x.rows() == g.in_ch && x.cols() == g.H * g.W, "conv2d: bad input shape");
  check(w.cols() == g.patch(), "conv2d: bad weight shape");
  check(b.rows() == w.rows() && b.cols() == 1, "conv2d: bad bias shape");
  auto out = make_var<S>(detail::conv2d_value(x.val(), w.val(), b.val(), g));
  if (x.node || w.node || b.node) {
    out.node = make_node<S>({x.node, w.node, b.node});
    Node<S>* xn = x.node.get();
    Node<S>* wn = w.node.get();
    Node<S>* bn = b.node.get();
    auto xv = x.value;
    auto wv = w.value;
    out.node->backward = [xn, wn, bn, xv, wv, g](const Mat<S>& gr) {
      const Index Ho = g.out_h(), Wo = g.out_w();
      if (bn) accum(*bn, gr.rowwise().sum());
      if (g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0) {
        if (wn) accum(*wn, gr * xv->transpose());
        if (xn) accum(*xn, wv->transpose() * gr);
        return;
      }
      const Index slab = detail::conv_slab_rows(g);
      Mat<S> K(g.patch(), slab * Wo);
      Mat<S> dw;
      if (wn) dw = Mat<S>::Zero(wv->rows(), wv->cols());
      Mat<S>* dx = nullptr;
      if (xn) dx = &grad_buffer(*xn, xv->rows(), xv->cols());
      Mat<S> Kg;
      for (Index ho0 = 0; ho0 < Ho; ho0 += slab) {
        const Index nho = std::min(slab, Ho - ho0);
        auto gslab = gr.middleCols(ho0 * Wo, nho * Wo);
        if (wn) {
          detail::im2col_slab(*xv, g, ho0, nho, K);
          dw.noalias() += gslab * K.leftCols(nho * Wo).transpose();
        }
        if (xn) {
          Kg.noalias() = wv->transpose() * gslab;
          detail::col2im_slab_add(Kg, g, ho0, nho, *dx);
        }
      }
      if (wn) accum(*wn, dw);
    };
  }
  return out;
}

// Nearest-neighbour 2x upsampling of a [C x H*W] map to [C x (2H)*(2W)].
template <typename S>
Var<S> upsample_nearest2(const Var<S>& x, Index H, Index W) {
  check(x.cols() == H * W, "upsample_nearest2: bad input shape");
  const Index C = x.rows();
  Mat<S> y(C, 4 * H * W);
  for (Index c = 0; c < C; ++c) {
    const S* src = x.val().data() + c * H * W;
    S* dst = y.data() + c * 4 * H * W;
    for (Index h = 0; h < H; ++h) {
      S* r0 = dst + (2 * h) * 2 * W;
      S* r1 = dst + (2 * h + 1) * 2 * W;
      const S* s = src + h * W;
      for (Index w = 0; w < W; ++w) {
        r0[2 * w] = r0[2 * w + 1] = s[w];
      }
      std::copy(r0, r0 + 2 * W, r1);
    }
  }
  auto out = make_var<S>(std::move(y));
  if (x.node) {
    out.node = make_node<S>({x.node});
    Node<S>* xn = x.node.get();
    const Index rows = x.rows();
    out.node->backward = [xn, rows, H, W](const Mat<S>& g) {
      Mat<S> dx(rows, H * W);
      for (Index c = 0; c < rows; ++c) {
        const S* src = g.data() + c * 4 * H * W;
        S* dst = dx.data() + c * H * W;
        for (Index h = 0; h < H; ++h) {
          const S* r0 = src + (2 * h) * 2 * W;
          const S* r1 = src + (2 * h + 1) * 2 * W;
          for (Index w = 0; w < W; ++w)
            dst[h * W + w] = r0[2 * w] + r0[2 * w + 1] + r1[2 * w] + r1[2 * w + 1];
        }
      }
      accum(*xn, dx);
    };
  }
  return out;
}

}  // namespace m2l2::ag
