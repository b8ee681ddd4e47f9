#ifndef MCLAB_OPS_HPP
#define MCLAB_OPS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mclab/rng.hpp"
#include "mclab/tensor.hpp"

// Differentiable primitives. Every op computes its forward result eagerly and,
// when any input requires a gradient, records one backward rule on the tape.
// Backward rules accumulate (+=) into input gradients and skip inputs that do
// not require them. All loops run in a fixed order so results are bitwise
// reproducible.

namespace mclab {

namespace detail {

inline int conv_out_dim(int in, int k, int pad, int stride) {
  return (in + 2 * pad - k) / stride + 1;
}

// Valid output range [lo, hi) such that every input index stays in bounds.
inline void conv_span(int in, int k_off, int pad, int stride, int out, int& lo, int& hi) {
  lo = 0;
  if (pad > k_off) lo = (pad - k_off + stride - 1) / stride;
  hi = out;
  int max_from_input = (in - 1 + pad - k_off) / stride + 1;
  if (max_from_input < hi) hi = max_from_input;
  if (hi < lo) hi = lo;
}

}  // namespace detail

template <typename T>
TensorBase<T> matmul(TapeBase<T>& tape, TensorBase<T> a, TensorBase<T> b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError(strf("matmul shape mismatch: %s vs %s",
                          shape_str(a.shape()).c_str(), shape_str(b.shape()).c_str()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = TensorBase<T>::zeros({m, n}, a.requires_grad() || b.requires_grad());
  {
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* pc = out.data().data();
    for (int i = 0; i < m; ++i) {
      const T* arow = pa + static_cast<std::size_t>(i) * k;
      T* crow = pc + static_cast<std::size_t>(i) * n;
      for (int p = 0; p < k; ++p) {
        const T av = arow[p];
        const T* brow = pb + static_cast<std::size_t>(p) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
  if (out.requires_grad()) {
    tape.record([a, b, out, m, k, n]() mutable {
      const T* pg = out.grad().data();
      if (a.requires_grad()) {
        // dA = dC * B^T
        T* pda = a.grad().data();
        const T* pb = b.data().data();
        for (int i = 0; i < m; ++i) {
          const T* grow = pg + static_cast<std::size_t>(i) * n;
          T* darow = pda + static_cast<std::size_t>(i) * k;
          for (int p = 0; p < k; ++p) {
            const T* brow = pb + static_cast<std::size_t>(p) * n;
            T acc = 0;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            darow[p] += acc;
          }
        }
      }
      if (b.requires_grad()) {
        // dB = A^T * dC
        T* pdb = b.grad().data();
        const T* pa = a.data().data();
        for (int i = 0; i < m; ++i) {
          const T* arow = pa + static_cast<std::size_t>(i) * k;
          const T* grow = pg + static_cast<std::size_t>(i) * n;
          for (int p = 0; p < k; ++p) {
            const T av = arow[p];
            T* dbrow = pdb + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) dbrow[j] += av * grow[j];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
TensorBase<T> add(TapeBase<T>& tape, TensorBase<T> a, TensorBase<T> b) {
  if (a.shape() != b.shape())
    throw ShapeError(strf("add shape mismatch: %s vs %s",
                          shape_str(a.shape()).c_str(), shape_str(b.shape()).c_str()));
  auto out = TensorBase<T>::zeros(a.shape(), a.requires_grad() || b.requires_grad());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (out.requires_grad()) {
    tape.record([a, b, out, n]() mutable {
      const T* pg = out.grad().data();
      if (a.requires_grad()) {
        T* da = a.grad().data();
        for (std::size_t i = 0; i < n; ++i) da[i] += pg[i];
      }
      if (b.requires_grad()) {
        T* db = b.grad().data();
        for (std::size_t i = 0; i < n; ++i) db[i] += pg[i];
      }
    });
  }
  return out;
}

/// x[m,n] + bias[n] broadcast over rows.
template <typename T>
TensorBase<T> add_rowwise(TapeBase<T>& tape, TensorBase<T> x, TensorBase<T> bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
    throw ShapeError(strf("add_rowwise shape mismatch: %s vs %s",
                          shape_str(x.shape()).c_str(), shape_str(bias.shape()).c_str()));
  const int m = x.dim(0), n = x.dim(1);
  auto out = TensorBase<T>::zeros(x.shape(), x.requires_grad() || bias.requires_grad());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.data()[static_cast<std::size_t>(i) * n + j] =
          x.data()[static_cast<std::size_t>(i) * n + j] + bias.data()[j];
  if (out.requires_grad()) {
    tape.record([x, bias, out, m, n]() mutable {
      const T* pg = out.grad().data();
      if (x.requires_grad()) {
        T* dx = x.grad().data();
        const std::size_t total = static_cast<std::size_t>(m) * n;
        for (std::size_t i = 0; i < total; ++i) dx[i] += pg[i];
      }
      if (bias.requires_grad()) {
        T* db = bias.grad().data();
        for (int i = 0; i < m; ++i) {
          const T* grow = pg + static_cast<std::size_t>(i) * n;
          for (int j = 0; j < n; ++j) db[j] += grow[j];
        }
      }
    });
  }
  return out;
}

/// Elementwise product (gating).
template <typename T>
TensorBase<T> mul(TapeBase<T>& tape, TensorBase<T> a, TensorBase<T> b) {
  if (a.shape() != b.shape())
    throw ShapeError(strf("mul shape mismatch: %s vs %s",
                          shape_str(a.shape()).c_str(), shape_str(b.shape()).c_str()));
  auto out = TensorBase<T>::zeros(a.shape(), a.requires_grad() || b.requires_grad());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (out.requires_grad()) {
    tape.record([a, b, out, n]() mutable {
      const T* pg = out.grad().data();
      if (a.requires_grad()) {
        T* da = a.grad().data();
        const T* pb = b.data().data();
        for (std::size_t i = 0; i < n; ++i) da[i] += pg[i] * pb[i];
      }
      if (b.requires_grad()) {
        T* db = b.grad().data();
        const T* pa = a.data().data();
        for (std::size_t i = 0; i < n; ++i) db[i] += pg[i] * pa[i];
      }
    });
  }
  return out;
}

/// scale * x + shift, elementwise with scalar coefficients (1 - z is affine(z, -1, 1)).
template <typename T>
TensorBase<T> affine(TapeBase<T>& tape, TensorBase<T> x, T scale, T shift) {
  auto out = TensorBase<T>::zeros(x.shape(), x.requires_grad());
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = scale * x.data()[i] + shift;
  if (out.requires_grad()) {
    tape.record([x, out, scale, n]() mutable {
      const T* pg = out.grad().data();
      T* dx = x.grad().data();
      for (std::size_t i = 0; i < n; ++i) dx[i] += scale * pg[i];
    });
  }
  return out;
}

template <typename T>
TensorBase<T> relu(TapeBase<T>& tape, TensorBase<T> x) {
  auto out = TensorBase<T>::zeros(x.shape(), x.requires_grad());
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x.data()[i];
    out.data()[i] = v > T(0) ? v : T(0);
  }
  if (out.requires_grad()) {
    tape.record([x, out, n]() mutable {
      const T* pg = out.grad().data();
      T* dx = x.grad().data();
      const T* px = x.data().data();
      for (std::size_t i = 0; i < n; ++i)
        if (px[i] > T(0)) dx[i] += pg[i];
    });
  }
  return out;
}

template <typename T>
TensorBase<T> sigmoid(TapeBase<T>& tape, TensorBase<T> x) {
  auto out = TensorBase<T>::zeros(x.shape(), x.requires_grad());
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i)
    out.data()[i] = T(1) / (T(1) + std::exp(-x.data()[i]));
  if (out.requires_grad()) {
    tape.record([x, out, n]() mutable {
      const T* pg = out.grad().data();
      const T* py = out.data().data();
      T* dx = x.grad().data();
      for (std::size_t i = 0; i < n; ++i) dx[i] += pg[i] * py[i] * (T(1) - py[i]);
    });
  }
  return out;
}

template <typename T>
TensorBase<T> tanh_op(TapeBase<T>& tape, TensorBase<T> x) {
  auto out = TensorBase<T>::zeros(x.shape(), x.requires_grad());
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::tanh(x.data()[i]);
  if (out.requires_grad()) {
    tape.record([x, out, n]() mutable {
      const T* pg = out.grad().data();
      const T* py = out.data().data();
      T* dx = x.grad().data();
      for (std::size_t i = 0; i < n; ++i) dx[i] += pg[i] * (T(1) - py[i] * py[i]);
    });
  }
  return out;
}

/// Cross-correlation over [B,C,H,W] (or [C,H,W], treated as batch of one) with
/// kernels [OC,IC,kh,kw] and bias [OC]. Output spatial dims follow
/// floor((in + 2p - k)/s) + 1.
template <typename T>
TensorBase<T> conv2d(TapeBase<T>& tape, TensorBase<T> x, TensorBase<T> w,
                     TensorBase<T> bias, int stride, int pad) {
  const bool batched = x.rank() == 4;
  if (!batched && x.rank() != 3)
    throw ShapeError("conv2d expects [C,H,W] or [B,C,H,W], got " + shape_str(x.shape()));
  if (w.rank() != 4)
    throw ShapeError("conv2d kernels must be [OC,IC,kh,kw], got " + shape_str(w.shape()));
  const int B = batched ? x.dim(0) : 1;
  const int C = batched ? x.dim(1) : x.dim(0);
  const int H = batched ? x.dim(2) : x.dim(1);
  const int W = batched ? x.dim(3) : x.dim(2);
  const int OC = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != C)
    throw ShapeError(strf("conv2d channel mismatch: input %s vs kernels %s",
                          shape_str(x.shape()).c_str(), shape_str(w.shape()).c_str()));
  if (bias.rank() != 1 || bias.dim(0) != OC)
    throw ShapeError("conv2d bias must be [OC], got " + shape_str(bias.shape()));
  const int OH = detail::conv_out_dim(H, kh, pad, stride);
  const int OW = detail::conv_out_dim(W, kw, pad, stride);
  if (OH <= 0 || OW <= 0)
    throw ShapeError(strf("conv2d non-positive output dim %dx%d for input %s kernel %dx%d pad %d stride %d",
                          OH, OW, shape_str(x.shape()).c_str(), kh, kw, pad, stride));

  const bool rg = x.requires_grad() || w.requires_grad() || bias.requires_grad();
  Shape out_shape = batched ? Shape{B, OC, OH, OW} : Shape{OC, OH, OW};
  auto out = TensorBase<T>::zeros(out_shape, rg);

  const std::size_t x_plane = static_cast<std::size_t>(H) * W;
  const std::size_t o_plane = static_cast<std::size_t>(OH) * OW;
  const T* px = x.data().data();
  const T* pw = w.data().data();
  T* po = out.data().data();
  for (int b = 0; b < B; ++b) {
    for (int oc = 0; oc < OC; ++oc) {
      T* oplane = po + (static_cast<std::size_t>(b) * OC + oc) * o_plane;
      const T bv = bias.data()[oc];
      for (std::size_t i = 0; i < o_plane; ++i) oplane[i] = bv;
      for (int ic = 0; ic < C; ++ic) {
        const T* xplane = px + (static_cast<std::size_t>(b) * C + ic) * x_plane;
        const T* wk = pw + ((static_cast<std::size_t>(oc) * C + ic) * kh) * kw;
        for (int r = 0; r < kh; ++r) {
          for (int c = 0; c < kw; ++c) {
            const T wv = wk[r * kw + c];
            int wlo, whi;
            detail::conv_span(W, c, pad, stride, OW, wlo, whi);
            for (int oh = 0; oh < OH; ++oh) {
              const int ih = oh * stride - pad + r;
              if (ih < 0 || ih >= H) continue;
              const T* xrow = xplane + static_cast<std::size_t>(ih) * W;
              T* orow = oplane + static_cast<std::size_t>(oh) * OW;
              const int base = -pad + c;
              for (int ow = wlo; ow < whi; ++ow)
                orow[ow] += wv * xrow[ow * stride + base];
            }
          }
        }
      }
    }
  }

  if (rg) {
    tape.record([x, w, bias, out, B, C, H, W, OC, kh, kw, OH, OW, stride, pad,
                 x_plane, o_plane]() mutable {
      const T* pg = out.grad().data();
      if (bias.requires_grad()) {
        T* db = bias.grad().data();
        for (int b = 0; b < B; ++b)
          for (int oc = 0; oc < OC; ++oc) {
            const T* gplane = pg + (static_cast<std::size_t>(b) * OC + oc) * o_plane;
            T acc = 0;
            for (std::size_t i = 0; i < o_plane; ++i) acc += gplane[i];
            db[oc] += acc;
          }
      }
      const T* px = x.data().data();
      const T* pw = w.data().data();
      T* dx = x.requires_grad() ? x.grad().data() : nullptr;
      T* dw = w.requires_grad() ? w.grad().data() : nullptr;
      if (!dx && !dw) return;
      for (int b = 0; b < B; ++b) {
        for (int oc = 0; oc < OC; ++oc) {
          const T* gplane = pg + (static_cast<std::size_t>(b) * OC + oc) * o_plane;
          for (int ic = 0; ic < C; ++ic) {
            const std::size_t x_off = (static_cast<std::size_t>(b) * C + ic) * x_plane;
            const std::size_t w_off = ((static_cast<std::size_t>(oc) * C + ic) * kh) * kw;
            for (int r = 0; r < kh; ++r) {
              for (int c = 0; c < kw; ++c) {
                int wlo, whi;
                detail::conv_span(W, c, pad, stride, OW, wlo, whi);
                const int base = -pad + c;
                const T wv = pw[w_off + r * kw + c];
                T wacc = 0;
                for (int oh = 0; oh < OH; ++oh) {
                  const int ih = oh * stride - pad + r;
                  if (ih < 0 || ih >= H) continue;
                  const T* grow = gplane + static_cast<std::size_t>(oh) * OW;
                  const std::size_t xrow = x_off + static_cast<std::size_t>(ih) * W;
                  if (dx) {
                    T* dxrow = dx + xrow;
                    for (int ow = wlo; ow < whi; ++ow)
                      dxrow[ow * stride + base] += wv * grow[ow];
                  }
                  if (dw) {
                    const T* xrowp = px + xrow;
                    for (int ow = wlo; ow < whi; ++ow)
                      wacc += xrowp[ow * stride + base] * grow[ow];
                  }
                }
                if (dw) dw[w_off + r * kw + c] += wacc;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

/// 1-d analogue of conv2d over [B,C,L] (or [C,L]) with kernels [OC,IC,k].
template <typename T>
TensorBase<T> conv1d(TapeBase<T>& tape, TensorBase<T> x, TensorBase<T> w,
                     TensorBase<T> bias, int stride, int pad) {
  const bool batched = x.rank() == 3;
  if (!batched && x.rank() != 2)
    throw ShapeError("conv1d expects [C,L] or [B,C,L], got " + shape_str(x.shape()));
  if (w.rank() != 3)
    throw ShapeError("conv1d kernels must be [OC,IC,k], got " + shape_str(w.shape()));
  const int B = batched ? x.dim(0) : 1;
  const int C = batched ? x.dim(1) : x.dim(0);
  const int L = batched ? x.dim(2) : x.dim(1);
  const int OC = w.dim(0), k = w.dim(2);
  if (w.dim(1) != C)
    throw ShapeError(strf("conv1d channel mismatch: input %s vs kernels %s",
                          shape_str(x.shape()).c_str(), shape_str(w.shape()).c_str()));
  if (bias.rank() != 1 || bias.dim(0) != OC)
    throw ShapeError("conv1d bias must be [OC], got " + shape_str(bias.shape()));
  const int OL = detail::conv_out_dim(L, k, pad, stride);
  if (OL <= 0)
    throw ShapeError(strf("conv1d non-positive output length %d for input %s kernel %d pad %d stride %d",
                          OL, shape_str(x.shape()).c_str(), k, pad, stride));

  const bool rg = x.requires_grad() || w.requires_grad() || bias.requires_grad();
  Shape out_shape = batched ? Shape{B, OC, OL} : Shape{OC, OL};
  auto out = TensorBase<T>::zeros(out_shape, rg);

  const T* px = x.data().data();
  const T* pw = w.data().data();
  T* po = out.data().data();
  for (int b = 0; b < B; ++b) {
    for (int oc = 0; oc < OC; ++oc) {
      T* orow = po + (static_cast<std::size_t>(b) * OC + oc) * OL;
      const T bv = bias.data()[oc];
      for (int i = 0; i < OL; ++i) orow[i] = bv;
      for (int ic = 0; ic < C; ++ic) {
        const T* xrow = px + (static_cast<std::size_t>(b) * C + ic) * L;
        const T* wk = pw + (static_cast<std::size_t>(oc) * C + ic) * k;
        for (int c = 0; c < k; ++c) {
          const T wv = wk[c];
          int lo, hi;
          detail::conv_span(L, c, pad, stride, OL, lo, hi);
          const int base = -pad + c;
          for (int ol = lo; ol < hi; ++ol) orow[ol] += wv * xrow[ol * stride + base];
        }
      }
    }
  }

  if (rg) {
    tape.record([x, w, bias, out, B, C, L, OC, k, OL, stride, pad]() mutable {
      const T* pg = out.grad().data();
      if (bias.requires_grad()) {
        T* db = bias.grad().data();
        for (int b = 0; b < B; ++b)
          for (int oc = 0; oc < OC; ++oc) {
            const T* grow = pg + (static_cast<std::size_t>(b) * OC + oc) * OL;
            T acc = 0;
            for (int i = 0; i < OL; ++i) acc += grow[i];
            db[oc] += acc;
          }
      }
      const T* px = x.data().data();
      const T* pw = w.data().data();
      T* dx = x.requires_grad() ? x.grad().data() : nullptr;
      T* dw = w.requires_grad() ? w.grad().data() : nullptr;
      if (!dx && !dw) return;
      for (int b = 0; b < B; ++b) {
        for (int oc = 0; oc < OC; ++oc) {
          const T* grow = pg + (static_cast<std::size_t>(b) * OC + oc) * OL;
          for (int ic = 0; ic < C; ++ic) {
            const std::size_t x_off = (static_cast<std::size_t>(b) * C + ic) * L;
            const std::size_t w_off = (static_cast<std::size_t>(oc) * C + ic) * k;
            for (int c = 0; c < k; ++c) {
              int lo, hi;
              detail::conv_span(L, c, pad, stride, OL, lo, hi);
              const int base = -pad + c;
              const T wv = pw[w_off + c];
              if (dx) {
                T* dxrow = dx + x_off;
                for (int ol = lo; ol < hi; ++ol)
                  dxrow[ol * stride + base] += wv * grow[ol];
              }
              if (dw) {
                const T* xrow = px + x_off;
                T acc = 0;
                for (int ol = lo; ol < hi; ++ol)
                  acc += xrow[ol * stride + base] * grow[ol];
                dw[w_off + c] += acc;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

/// Max pooling over the trailing spatial dims of [B,C,H,W] (or [C,H,W]);
/// trailing remainder is truncated, gradient goes to the first max index.
template <typename T>
TensorBase<T> maxpool2d(TapeBase<T>& tape, TensorBase<T> x, int window, int stride) {
  const bool batched = x.rank() == 4;
  if (!batched && x.rank() != 3)
    throw ShapeError("maxpool2d expects [C,H,W] or [B,C,H,W], got " + shape_str(x.shape()));
  const int B = batched ? x.dim(0) : 1;
  const int C = batched ? x.dim(1) : x.dim(0);
  const int H = batched ? x.dim(2) : x.dim(1);
  const int W = batched ? x.dim(3) : x.dim(2);
  if (H < window || W < window)
    throw ShapeError(strf("maxpool2d window %d exceeds input %s", window,
                          shape_str(x.shape()).c_str()));
  const int OH = (H - window) / stride + 1;
  const int OW = (W - window) / stride + 1;
  auto out = TensorBase<T>::zeros(batched ? Shape{B, C, OH, OW} : Shape{C, OH, OW},
                                  x.requires_grad());
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.numel());
  const T* px = x.data().data();
  T* po = out.data().data();
  const std::size_t x_plane = static_cast<std::size_t>(H) * W;
  const std::size_t o_plane = static_cast<std::size_t>(OH) * OW;
  for (int bc = 0; bc < B * C; ++bc) {
    const T* xplane = px + bc * x_plane;
    T* oplane = po + bc * o_plane;
    std::uint32_t* amax = argmax->data() + bc * o_plane;
    for (int oh = 0; oh < OH; ++oh) {
      for (int ow = 0; ow < OW; ++ow) {
        const int h0 = oh * stride, w0 = ow * stride;
        T best = xplane[static_cast<std::size_t>(h0) * W + w0];
        std::uint32_t best_idx = static_cast<std::uint32_t>(h0 * W + w0);
        for (int r = 0; r < window; ++r)
          for (int c = 0; c < window; ++c) {
            const std::uint32_t idx = static_cast<std::uint32_t>((h0 + r) * W + (w0 + c));
            const T v = xplane[idx];
            if (v > best) { best = v; best_idx = idx; }
          }
        oplane[static_cast<std::size_t>(oh) * OW + ow] = best;
        amax[static_cast<std::size_t>(oh) * OW + ow] = best_idx;
      }
    }
  }
  if (out.requires_grad()) {
    tape.record([x, out, argmax, B, C, x_plane, o_plane]() mutable {
      T* dx = x.grad().data();
      const T* pg = out.grad().data();
      for (int bc = 0; bc < B * C; ++bc) {
        T* dxplane = dx + bc * x_plane;
        const T* gplane = pg + bc * o_plane;
        const std::uint32_t* amax = argmax->data() + bc * o_plane;
        for (std::size_t i = 0; i < o_plane; ++i) dxplane[amax[i]] += gplane[i];
      }
    });
  }
  return out;
}

/// 1-d max pooling over [B,C,L] (or [C,L]). window == L gives max-over-time.
template <typename T>
TensorBase<T> maxpool1d(TapeBase<T>& tape, TensorBase<T> x, int window, int stride) {
  const bool batched = x.rank() == 3;
  if (!batched && x.rank() != 2)
    throw ShapeError("maxpool1d expects [C,L] or [B,C,L], got " + shape_str(x.shape()));
  const int B = batched ? x.dim(0) : 1;
  const int C = batched ? x.dim(1) : x.dim(0);
  const int L = batched ? x.dim(2) : x.dim(1);
  if (L < window)
    throw ShapeError(strf("maxpool1d window %d exceeds input %s", window,
                          shape_str(x.shape()).c_str()));
  const int OL = (L - window) / stride + 1;
  auto out = TensorBase<T>::zeros(batched ? Shape{B, C, OL} : Shape{C, OL},
                                  x.requires_grad());
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.numel());
  const T* px = x.data().data();
  T* po = out.data().data();
  for (int bc = 0; bc < B * C; ++bc) {
    const T* xrow = px + static_cast<std::size_t>(bc) * L;
    T* orow = po + static_cast<std::size_t>(bc) * OL;
    std::uint32_t* amax = argmax->data() + static_cast<std::size_t>(bc) * OL;
    for (int ol = 0; ol < OL; ++ol) {
      const int l0 = ol * stride;
      T best = xrow[l0];
      std::uint32_t best_idx = static_cast<std::uint32_t>(l0);
      for (int c = 1; c < window; ++c) {
        const T v = xrow[l0 + c];
        if (v > best) { best = v; best_idx = static_cast<std::uint32_t>(l0 + c); }
      }
      orow[ol] = best;
      amax[ol] = best_idx;
    }
  }
  if (out.requires_grad()) {
    tape.record([x, out, argmax, B, C, L, OL]() mutable {
      T* dx = x.grad().data();
      const T* pg = out.grad().data();
      for (int bc = 0; bc < B * C; ++bc) {
        T* dxrow = dx + static_cast<std::size_t>(bc) * L;
        const T* grow = pg + static_cast<std::size_t>(bc) * OL;
        const std::uint32_t* amax = argmax->data() + static_cast<std::size_t>(bc) * OL;
        for (int ol = 0; ol < OL; ++ol) dxrow[amax[ol]] += grow[ol];
      }
    });
  }
  return out;
}

/// Row gather from table[V,d]; gradient scatter-adds into the table, so
/// duplicate ids accumulate.
template <typename T>
TensorBase<T> embedding_lookup(TapeBase<T>& tape, TensorBase<T> table,
                               std::span<const std::int32_t> ids) {
  if (table.rank() != 2)
    throw ShapeError("embedding table must be [V,d], got " + shape_str(table.shape()));
  const int V = table.dim(0), d = table.dim(1);
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] < 0 || ids[i] >= V)
      throw ShapeError(strf("embedding id %d out of range [0,%d)", ids[i], V));
  auto out = TensorBase<T>::zeros({static_cast<int>(ids.size()), d}, table.requires_grad());
  const T* pt = table.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const T* row = pt + static_cast<std::size_t>(ids[i]) * d;
    T* orow = po + i * d;
    for (int j = 0; j < d; ++j) orow[j] = row[j];
  }
  if (out.requires_grad()) {
    auto id_copy = std::make_shared<std::vector<std::int32_t>>(ids.begin(), ids.end());
    tape.record([table, out, id_copy, d]() mutable {
      T* dt = table.grad().data();
      const T* pg = out.grad().data();
      for (std::size_t i = 0; i < id_copy->size(); ++i) {
        T* drow = dt + static_cast<std::size_t>((*id_copy)[i]) * d;
        const T* grow = pg + i * d;
        for (int j = 0; j < d; ++j) drow[j] += grow[j];
      }
    });
  }
  return out;
}

/// Inverted dropout: zero with probability p and scale survivors by 1/(1-p)
/// during training; identity at inference. The mask is a pure function of seed.
template <typename T>
TensorBase<T> dropout(TapeBase<T>& tape, TensorBase<T> x, double p, bool training,
                      std::uint64_t seed) {
  if (p < 0.0 || p >= 1.0)
    throw ShapeError(strf("dropout probability %g outside [0,1)", p));
  if (!training || p == 0.0) return x;
  const std::size_t n = x.numel();
  auto out = TensorBase<T>::zeros(x.shape(), x.requires_grad());
  auto mask = std::make_shared<std::vector<T>>(n);
  Rng rng(seed);
  const T scale = T(1.0 / (1.0 - p));
  for (std::size_t i = 0; i < n; ++i) {
    const T m = rng.next_double() < p ? T(0) : scale;
    (*mask)[i] = m;
    out.data()[i] = x.data()[i] * m;
  }
  if (out.requires_grad()) {
    tape.record([x, out, mask, n]() mutable {
      T* dx = x.grad().data();
      const T* pg = out.grad().data();
      for (std::size_t i = 0; i < n; ++i) dx[i] += pg[i] * (*mask)[i];
    });
  }
  return out;
}

/// Mean over the batch of -log softmax(logits)[label], max-stabilized.
template <typename T>
TensorBase<T> softmax_cross_entropy(TapeBase<T>& tape, TensorBase<T> logits,
                                    std::span<const std::int32_t> labels) {
  if (logits.rank() != 2)
    throw ShapeError("softmax_cross_entropy expects [B,C] logits, got " +
                     shape_str(logits.shape()));
  const int B = logits.dim(0), C = logits.dim(1);
  if (static_cast<int>(labels.size()) != B)
    throw ShapeError(strf("label count %zu does not match batch %d", labels.size(), B));
  for (int i = 0; i < B; ++i)
    if (labels[i] < 0 || labels[i] >= C)
      throw ShapeError(strf("label %d out of range [0,%d)", labels[i], C));

  auto softmax = std::make_shared<std::vector<T>>(static_cast<std::size_t>(B) * C);
  const T* pl = logits.data().data();
  T total = 0;
  for (int i = 0; i < B; ++i) {
    const T* row = pl + static_cast<std::size_t>(i) * C;
    T m = row[0];
    for (int j = 1; j < C; ++j) m = std::max(m, row[j]);
    T sum = 0;
    T* srow = softmax->data() + static_cast<std::size_t>(i) * C;
    for (int j = 0; j < C; ++j) {
      srow[j] = std::exp(row[j] - m);
      sum += srow[j];
    }
    const T inv = T(1) / sum;
    for (int j = 0; j < C; ++j) srow[j] *= inv;
    total += std::log(sum) - (row[labels[i]] - m);
  }
  auto out = TensorBase<T>::scalar(total / T(B), logits.requires_grad());
  if (out.requires_grad()) {
    auto label_copy = std::make_shared<std::vector<std::int32_t>>(labels.begin(), labels.end());
    tape.record([logits, out, softmax, label_copy, B, C]() mutable {
      const T gout = out.grad()[0];
      T* dl = logits.grad().data();
      const T invb = T(1) / T(B);
      for (int i = 0; i < B; ++i) {
        const T* srow = softmax->data() + static_cast<std::size_t>(i) * C;
        T* drow = dl + static_cast<std::size_t>(i) * C;
        const int lab = (*label_copy)[i];
        for (int j = 0; j < C; ++j) {
          const T delta = j == lab ? T(1) : T(0);
          drow[j] += gout * (srow[j] - delta) * invb;
        }
      }
    });
  }
  return out;
}

/// Copy into a new shape with identical element count.
template <typename T>
TensorBase<T> reshape(TapeBase<T>& tape, TensorBase<T> x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError(strf("reshape %s -> %s changes element count",
                          shape_str(x.shape()).c_str(), shape_str(shape).c_str()));
  auto out = TensorBase<T>::zeros(std::move(shape), x.requires_grad());
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  if (out.requires_grad()) {
    const std::size_t n = x.numel();
    tape.record([x, out, n]() mutable {
      T* dx = x.grad().data();
      const T* pg = out.grad().data();
      for (std::size_t i = 0; i < n; ++i) dx[i] += pg[i];
    });
  }
  return out;
}

/// Column slice [c0,c1) of a [B,W] tensor (splits fused gate pre-activations).
template <typename T>
TensorBase<T> slice_cols(TapeBase<T>& tape, TensorBase<T> x, int c0, int c1) {
  if (x.rank() != 2 || c0 < 0 || c1 > x.dim(1) || c0 >= c1)
    throw ShapeError(strf("slice_cols [%d,%d) invalid for %s", c0, c1,
                          shape_str(x.shape()).c_str()));
  const int B = x.dim(0), W = x.dim(1), n = c1 - c0;
  auto out = TensorBase<T>::zeros({B, n}, x.requires_grad());
  for (int i = 0; i < B; ++i)
    std::copy_n(x.data().data() + static_cast<std::size_t>(i) * W + c0, n,
                out.data().data() + static_cast<std::size_t>(i) * n);
  if (out.requires_grad()) {
    tape.record([x, out, B, W, n, c0]() mutable {
      T* dx = x.grad().data();
      const T* pg = out.grad().data();
      for (int i = 0; i < B; ++i) {
        T* drow = dx + static_cast<std::size_t>(i) * W + c0;
        const T* grow = pg + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) drow[j] += grow[j];
      }
    });
  }
  return out;
}

/// Concatenate [B,w_i] feature blocks along columns.
template <typename T>
TensorBase<T> concat_cols(TapeBase<T>& tape, const std::vector<TensorBase<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols needs at least one tensor");
  const int B = parts[0].dim(0);
  int total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != B)
      throw ShapeError("concat_cols parts must share the batch dim, got " +
                       shape_str(p.shape()));
    total += p.dim(1);
    rg = rg || p.requires_grad();
  }
  auto out = TensorBase<T>::zeros({B, total}, rg);
  int col = 0;
  for (const auto& p : parts) {
    const int w = p.dim(1);
    for (int i = 0; i < B; ++i)
      std::copy_n(p.data().data() + static_cast<std::size_t>(i) * w, w,
                  out.data().data() + static_cast<std::size_t>(i) * total + col);
    col += w;
  }
  if (rg) {
    auto parts_copy = parts;
    tape.record([parts_copy, out, B, total]() mutable {
      const T* pg = out.grad().data();
      int col = 0;
      for (auto& p : parts_copy) {
        const int w = p.dim(1);
        if (p.requires_grad()) {
          T* dp = p.grad().data();
          for (int i = 0; i < B; ++i) {
            const T* grow = pg + static_cast<std::size_t>(i) * total + col;
            T* drow = dp + static_cast<std::size_t>(i) * w;
            for (int j = 0; j < w; ++j) drow[j] += grow[j];
          }
        }
        col += w;
      }
    });
  }
  return out;
}

/// Sum of all elements as a scalar.
template <typename T>
TensorBase<T> sum(TapeBase<T>& tape, TensorBase<T> x) {
  T total = 0;
  for (const T v : x.data()) total += v;
  auto out = TensorBase<T>::scalar(total, x.requires_grad());
  if (out.requires_grad()) {
    const std::size_t n = x.numel();
    tape.record([x, out, n]() mutable {
      const T g = out.grad()[0];
      T* dx = x.grad().data();
      for (std::size_t i = 0; i < n; ++i) dx[i] += g;
    });
  }
  return out;
}

/// Row-wise argmax with first-index tie-break (prediction rule).
template <typename T>
std::vector<std::int32_t> argmax_rows(const TensorBase<T>& logits) {
  const int B = logits.dim(0), C = logits.dim(1);
  std::vector<std::int32_t> out(B);
  for (int i = 0; i < B; ++i) {
    const T* row = logits.data().data() + static_cast<std::size_t>(i) * C;
    int best = 0;
    for (int j = 1; j < C; ++j)
      if (row[j] > row[best]) best = j;
    out[i] = best;
  }
  return out;
}

}  // namespace mclab

#endif  // MCLAB_OPS_HPP
