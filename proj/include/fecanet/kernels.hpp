#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fecanet/tensor.hpp"

// Plain forward kernels.  Storage is the tensor's scalar type; reductions
// accumulate in double.  Every kernel is pure and single-threaded
// deterministic: same inputs give bit-identical outputs.
namespace fecanet::kernels {

// Multiply counters for the 4D convolution kernels, used to assert the
// center-pivot sparsification actually reduces work.
namespace opcount {
inline thread_local uint64_t conv4d_macs = 0;
inline void reset() { conv4d_macs = 0; }
}  // namespace opcount

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_shape(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 tensors");
  require_shape(a.dims[1] == b.dims[0],
                "matmul inner dims disagree: " + dims_str(a.dims) + " x " + dims_str(b.dims));
  const int64_t m = a.dims[0], k = a.dims[1], n = b.dims[1];
  Tensor<T> out({m, n});
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p)
        acc += static_cast<double>(a.at(i, p)) * static_cast<double>(b.at(p, j));
      out.at(i, j) = static_cast<T>(acc);
    }
  }
  return out;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  require_shape(a.rank() == 2, "transpose2d expects a rank-2 tensor");
  Tensor<T> out({a.dims[1], a.dims[0]});
  for (int64_t i = 0; i < a.dims[0]; ++i)
    for (int64_t j = 0; j < a.dims[1]; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.dims);
  for (int64_t i = 0; i < x.numel(); ++i)
    out.data[static_cast<size_t>(i)] = std::max(x.data[static_cast<size_t>(i)], T(0));
  return out;
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) {
    const double e = std::exp(-static_cast<double>(x));
    return static_cast<T>(1.0 / (1.0 + e));
  }
  const double e = std::exp(static_cast<double>(x));
  return static_cast<T>(e / (1.0 + e));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.dims);
  for (int64_t i = 0; i < x.numel(); ++i)
    out.data[static_cast<size_t>(i)] = sigmoid_scalar(x.data[static_cast<size_t>(i)]);
  return out;
}

// Softmax along one axis; the max is subtracted before exponentiation so
// large logits cannot overflow.
template <typename T>
Tensor<T> softmax_axis(const Tensor<T>& x, int axis) {
  require_shape(axis >= 0 && axis < x.rank(), "softmax axis out of range");
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dims[static_cast<size_t>(i)];
  const int64_t n = x.dims[static_cast<size_t>(axis)];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dims[static_cast<size_t>(i)];

  Tensor<T> out(x.dims);
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * n * inner + in;
      T mx = x.data[static_cast<size_t>(base)];
      for (int64_t i = 1; i < n; ++i)
        mx = std::max(mx, x.data[static_cast<size_t>(base + i * inner)]);
      double sum = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        const double e = std::exp(static_cast<double>(x.data[static_cast<size_t>(base + i * inner)] - mx));
        out.data[static_cast<size_t>(base + i * inner)] = static_cast<T>(e);
        sum += e;
      }
      for (int64_t i = 0; i < n; ++i)
        out.data[static_cast<size_t>(base + i * inner)] =
            static_cast<T>(static_cast<double>(out.data[static_cast<size_t>(base + i * inner)]) / sum);
    }
  }
  return out;
}

// 2D convolution on a [C,H,W] map with [Cout,Cin,kh,kw] weights, zero
// padding, odd kernels.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int64_t stride, int64_t pad) {
  require_shape(x.rank() == 3 && w.rank() == 4, "conv2d expects [C,H,W] input and [Co,Ci,kh,kw] weights");
  require_shape(w.dims[1] == x.dims[0], "conv2d channel mismatch");
  require_shape(stride >= 1 && pad >= 0, "conv2d bad stride/pad");
  const int64_t ci = x.dims[0], h = x.dims[1], ww = x.dims[2];
  const int64_t co = w.dims[0], kh = w.dims[2], kw = w.dims[3];
  require_shape(kh % 2 == 1 && kw % 2 == 1, "conv2d kernel extents must be odd");
  require_shape(h + 2 * pad >= kh && ww + 2 * pad >= kw,
                "conv2d kernel larger than padded input");
  const int64_t ho = (h + 2 * pad - kh) / stride + 1;
  const int64_t wo = (ww + 2 * pad - kw) / stride + 1;

  Tensor<T> out({co, ho, wo});
  for (int64_t oc = 0; oc < co; ++oc) {
    for (int64_t oh = 0; oh < ho; ++oh) {
      for (int64_t ow = 0; ow < wo; ++ow) {
        double acc = 0.0;
        for (int64_t ic = 0; ic < ci; ++ic) {
          for (int64_t r = 0; r < kh; ++r) {
            const int64_t ih = oh * stride + r - pad;
            if (ih < 0 || ih >= h) continue;
            for (int64_t s = 0; s < kw; ++s) {
              const int64_t iw = ow * stride + s - pad;
              if (iw < 0 || iw >= ww) continue;
              acc += static_cast<double>(w.at(oc, ic, r, s)) * static_cast<double>(x.at(ic, ih, iw));
            }
          }
        }
        out.at(oc, oh, ow) = static_cast<T>(acc);
      }
    }
  }
  return out;
}

// Half-pixel source coordinate for bilinear interpolation (corner
// alignment off).  Returns clamped neighbor indices plus the fraction.
struct LerpWeight {
  int64_t i0, i1;
  double t;
};

inline LerpWeight lerp_weight(int64_t o, int64_t in_size, int64_t out_size) {
  const double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in_size) /
                       static_cast<double>(out_size) -
                   0.5;
  const double f = std::floor(s);
  const int64_t i0 = static_cast<int64_t>(f);
  LerpWeight lw;
  lw.t = s - f;
  lw.i0 = std::clamp<int64_t>(i0, 0, in_size - 1);
  lw.i1 = std::clamp<int64_t>(i0 + 1, 0, in_size - 1);
  return lw;
}

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int64_t out_h, int64_t out_w) {
  require_shape(x.rank() == 3, "upsample_bilinear expects [C,H,W]");
  require_shape(out_h >= 1 && out_w >= 1, "upsample target dims must be positive");
  const int64_t c = x.dims[0], h = x.dims[1], w = x.dims[2];
  require_shape(out_h >= h && out_w >= w, "upsample target smaller than input");
  Tensor<T> out({c, out_h, out_w});
  std::vector<LerpWeight> rows(static_cast<size_t>(out_h)), cols(static_cast<size_t>(out_w));
  for (int64_t i = 0; i < out_h; ++i) rows[static_cast<size_t>(i)] = lerp_weight(i, h, out_h);
  for (int64_t j = 0; j < out_w; ++j) cols[static_cast<size_t>(j)] = lerp_weight(j, w, out_w);
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t i = 0; i < out_h; ++i) {
      const auto& rw = rows[static_cast<size_t>(i)];
      for (int64_t j = 0; j < out_w; ++j) {
        const auto& cw = cols[static_cast<size_t>(j)];
        const double v00 = x.at(ch, rw.i0, cw.i0);
        const double v01 = x.at(ch, rw.i0, cw.i1);
        const double v10 = x.at(ch, rw.i1, cw.i0);
        const double v11 = x.at(ch, rw.i1, cw.i1);
        const double top = v00 + cw.t * (v01 - v00);
        const double bot = v10 + cw.t * (v11 - v10);
        out.at(ch, i, j) = static_cast<T>(top + rw.t * (bot - top));
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_shape(x.rank() == 3, "global_avg_pool expects [C,H,W]");
  const int64_t c = x.dims[0], hw = x.dims[1] * x.dims[2];
  Tensor<T> out({c});
  for (int64_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (int64_t i = 0; i < hw; ++i)
      acc += static_cast<double>(x.data[static_cast<size_t>(ch * hw + i)]);
    out.data[static_cast<size_t>(ch)] = static_cast<T>(acc / static_cast<double>(hw));
  }
  return out;
}

// Nearest-neighbor resize for a [H,W] map (used to bring masks down to
// feature resolution).
template <typename T>
Tensor<T> nearest_resize2d(const Tensor<T>& x, int64_t out_h, int64_t out_w) {
  require_shape(x.rank() == 2, "nearest_resize2d expects [H,W]");
  require_shape(out_h >= 1 && out_w >= 1, "resize target dims must be positive");
  const int64_t h = x.dims[0], w = x.dims[1];
  Tensor<T> out({out_h, out_w});
  for (int64_t i = 0; i < out_h; ++i) {
    const int64_t si = std::min<int64_t>(h - 1, (i * h + h / 2) / out_h);
    for (int64_t j = 0; j < out_w; ++j) {
      const int64_t sj = std::min<int64_t>(w - 1, (j * w + w / 2) / out_w);
      out.at(i, j) = x.at(si, sj);
    }
  }
  return out;
}

template <typename T>
Tensor<T> concat_dim0(const std::vector<Tensor<T>>& parts) {
  require_shape(!parts.empty(), "concat of empty list");
  auto dims = parts[0].dims;
  int64_t total0 = 0;
  for (const auto& p : parts) {
    require_shape(p.rank() == parts[0].rank(), "concat rank mismatch");
    for (size_t i = 1; i < dims.size(); ++i)
      require_shape(p.dims[i] == dims[i], "concat trailing dims mismatch");
    total0 += p.dims[0];
  }
  dims[0] = total0;
  Tensor<T> out(dims);
  size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data.begin(), p.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += p.data.size();
  }
  return out;
}

// Cosine-similarity volume between every query position and every support
// position: [C,Hq,Wq] x [C,Hs,Ws] -> [1,Hq,Wq,Hs,Ws].  Negative scores are
// clamped to zero; an epsilon on both norms makes zero feature vectors
// yield exactly zero similarity.
inline constexpr double kCosineEps = 1e-8;

template <typename T>
std::vector<double> spatial_norms(const Tensor<T>& f) {
  const int64_t c = f.dims[0], n = f.dims[1] * f.dims[2];
  std::vector<double> norms(static_cast<size_t>(n));
  for (int64_t p = 0; p < n; ++p) {
    double acc = 0.0;
    for (int64_t ch = 0; ch < c; ++ch) {
      const double v = f.data[static_cast<size_t>(ch * n + p)];
      acc += v * v;
    }
    norms[static_cast<size_t>(p)] = std::sqrt(acc);
  }
  return norms;
}

template <typename T>
Tensor<T> cosine_corr4d(const Tensor<T>& fq, const Tensor<T>& fs) {
  require_shape(fq.rank() == 3 && fs.rank() == 3, "cosine_corr4d expects [C,H,W] maps");
  require_shape(fq.dims[0] == fs.dims[0], "cosine_corr4d channel mismatch");
  const int64_t c = fq.dims[0];
  const int64_t hq = fq.dims[1], wq = fq.dims[2];
  const int64_t hs = fs.dims[1], ws = fs.dims[2];
  const int64_t nq = hq * wq, ns = hs * ws;
  const auto qn = spatial_norms(fq);
  const auto sn = spatial_norms(fs);

  Tensor<T> out({1, hq, wq, hs, ws});
  for (int64_t pq = 0; pq < nq; ++pq) {
    for (int64_t ps = 0; ps < ns; ++ps) {
      double dot = 0.0;
      for (int64_t ch = 0; ch < c; ++ch)
        dot += static_cast<double>(fq.data[static_cast<size_t>(ch * nq + pq)]) *
               static_cast<double>(fs.data[static_cast<size_t>(ch * ns + ps)]);
      const double denom = (qn[static_cast<size_t>(pq)] + kCosineEps) * (sn[static_cast<size_t>(ps)] + kCosineEps);
      const double sim = dot / denom;
      out.data[static_cast<size_t>(pq * ns + ps)] = static_cast<T>(sim > 0.0 ? sim : 0.0);
    }
  }
  return out;
}

// Local self-similarity descriptor: per position the dot products with its
// k x k neighborhood, zero where the neighbor falls outside the map.
// Offsets are enumerated row-major over (di,dj) in [-t,t]^2.
template <typename T>
Tensor<T> self_similarity(const Tensor<T>& x, int64_t k) {
  require_valid(k >= 1 && k % 2 == 1, "self-similarity neighborhood size must be odd");
  require_shape(x.rank() == 3, "self_similarity expects [C,H,W]");
  const int64_t c = x.dims[0], h = x.dims[1], w = x.dims[2];
  const int64_t t = (k - 1) / 2;
  Tensor<T> out({k * k, h, w});
  for (int64_t i = 0; i < h; ++i) {
    for (int64_t j = 0; j < w; ++j) {
      for (int64_t di = -t; di <= t; ++di) {
        const int64_t ii = i + di;
        for (int64_t dj = -t; dj <= t; ++dj) {
          const int64_t jj = j + dj;
          const int64_t d = (di + t) * k + (dj + t);
          if (ii < 0 || ii >= h || jj < 0 || jj >= w) {
            out.at(d, i, j) = T(0);
            continue;
          }
          double acc = 0.0;
          for (int64_t ch = 0; ch < c; ++ch)
            acc += static_cast<double>(x.at(ch, ii, jj)) * static_cast<double>(x.at(ch, i, j));
          out.at(d, i, j) = static_cast<T>(acc);
        }
      }
    }
  }
  return out;
}

inline int64_t conv_out_dim(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// Direct 4D convolution on [Ci,Q1,Q2,S1,S2] with a rank-6 kernel
// [Co,Ci,a,b,c,d] (a,b query offsets; c,d support offsets), zero padding.
// Deliberately simple; it is the dense reference the sparsified kernel is
// checked against.
template <typename T>
Tensor<T> conv4d_full(const Tensor<T>& x, const Tensor<T>& w, int64_t stride_q,
                      int64_t stride_s, int64_t pad_q, int64_t pad_s) {
  require_shape(x.rank() == 5 && w.rank() == 6, "conv4d_full expects rank-5 input, rank-6 weights");
  require_shape(w.dims[1] == x.dims[0], "conv4d_full channel mismatch");
  const int64_t ci = x.dims[0], q1 = x.dims[1], q2 = x.dims[2], s1 = x.dims[3], s2 = x.dims[4];
  const int64_t co = w.dims[0], ka = w.dims[2], kb = w.dims[3], kc = w.dims[4], kd = w.dims[5];
  require_shape(ka % 2 == 1 && kb % 2 == 1 && kc % 2 == 1 && kd % 2 == 1,
                "conv4d kernel extents must be odd");
  const int64_t oq1 = conv_out_dim(q1, ka, stride_q, pad_q);
  const int64_t oq2 = conv_out_dim(q2, kb, stride_q, pad_q);
  const int64_t os1 = conv_out_dim(s1, kc, stride_s, pad_s);
  const int64_t os2 = conv_out_dim(s2, kd, stride_s, pad_s);
  require_shape(oq1 >= 1 && oq2 >= 1 && os1 >= 1 && os2 >= 1, "conv4d kernel larger than padded input");

  Tensor<T> out({co, oq1, oq2, os1, os2});
  for (int64_t oc = 0; oc < co; ++oc)
    for (int64_t x1 = 0; x1 < oq1; ++x1)
      for (int64_t x2 = 0; x2 < oq2; ++x2)
        for (int64_t y1 = 0; y1 < os1; ++y1)
          for (int64_t y2 = 0; y2 < os2; ++y2) {
            double acc = 0.0;
            for (int64_t ic = 0; ic < ci; ++ic)
              for (int64_t a = 0; a < ka; ++a) {
                const int64_t iq1 = x1 * stride_q + a - pad_q;
                if (iq1 < 0 || iq1 >= q1) continue;
                for (int64_t b = 0; b < kb; ++b) {
                  const int64_t iq2 = x2 * stride_q + b - pad_q;
                  if (iq2 < 0 || iq2 >= q2) continue;
                  for (int64_t cc = 0; cc < kc; ++cc) {
                    const int64_t is1 = y1 * stride_s + cc - pad_s;
                    if (is1 < 0 || is1 >= s1) continue;
                    for (int64_t dd = 0; dd < kd; ++dd) {
                      const int64_t is2 = y2 * stride_s + dd - pad_s;
                      if (is2 < 0 || is2 >= s2) continue;
                      acc += static_cast<double>(w.at(oc, ic, a, b, cc, dd)) *
                             static_cast<double>(x.data[static_cast<size_t>(
                                 (((ic * q1 + iq1) * q2 + iq2) * s1 + is1) * s2 + is2)]);
                      ++opcount::conv4d_macs;
                    }
                  }
                }
              }
            out.at(oc, x1, x2, y1, y2) = static_cast<T>(acc);
          }
  return out;
}

// Center-pivot 4D convolution: the dense kernel is sparsified to taps where
// either the support offset or the query offset sits at its center.  The
// doubly-centered tap belongs to the query weights; the support weights'
// center is structurally zero and never read.
template <typename T>
Tensor<T> conv4d_center_pivot(const Tensor<T>& x, const Tensor<T>& wq, const Tensor<T>& ws,
                              int64_t stride_q, int64_t stride_s, int64_t pad_q, int64_t pad_s) {
  require_shape(x.rank() == 5, "conv4d_center_pivot expects rank-5 input");
  require_shape(wq.rank() == 4 && ws.rank() == 4, "center-pivot weights must be rank-4");
  require_shape(wq.dims[0] == ws.dims[0] && wq.dims[1] == ws.dims[1],
                "center-pivot weight channel mismatch");
  require_shape(wq.dims[1] == x.dims[0], "conv4d_center_pivot channel mismatch");
  const int64_t ci = x.dims[0], q1 = x.dims[1], q2 = x.dims[2], s1 = x.dims[3], s2 = x.dims[4];
  const int64_t co = wq.dims[0];
  const int64_t kq1 = wq.dims[2], kq2 = wq.dims[3], ks1 = ws.dims[2], ks2 = ws.dims[3];
  require_shape(kq1 % 2 == 1 && kq2 % 2 == 1 && ks1 % 2 == 1 && ks2 % 2 == 1,
                "center-pivot kernel extents must be odd");
  const int64_t cq1 = (kq1 - 1) / 2, cq2 = (kq2 - 1) / 2;
  const int64_t cs1 = (ks1 - 1) / 2, cs2 = (ks2 - 1) / 2;
  const int64_t oq1 = conv_out_dim(q1, kq1, stride_q, pad_q);
  const int64_t oq2 = conv_out_dim(q2, kq2, stride_q, pad_q);
  const int64_t os1 = conv_out_dim(s1, ks1, stride_s, pad_s);
  const int64_t os2 = conv_out_dim(s2, ks2, stride_s, pad_s);
  require_shape(oq1 >= 1 && oq2 >= 1 && os1 >= 1 && os2 >= 1, "conv4d kernel larger than padded input");

  Tensor<T> out({co, oq1, oq2, os1, os2});
  for (int64_t oc = 0; oc < co; ++oc)
    for (int64_t x1 = 0; x1 < oq1; ++x1)
      for (int64_t x2 = 0; x2 < oq2; ++x2)
        for (int64_t y1 = 0; y1 < os1; ++y1)
          for (int64_t y2 = 0; y2 < os2; ++y2) {
            double acc = 0.0;
            // query-offset taps, support offset pinned to center
            const int64_t is1c = y1 * stride_s + cs1 - pad_s;
            const int64_t is2c = y2 * stride_s + cs2 - pad_s;
            if (is1c >= 0 && is1c < s1 && is2c >= 0 && is2c < s2) {
              for (int64_t ic = 0; ic < ci; ++ic)
                for (int64_t a = 0; a < kq1; ++a) {
                  const int64_t iq1 = x1 * stride_q + a - pad_q;
                  if (iq1 < 0 || iq1 >= q1) continue;
                  for (int64_t b = 0; b < kq2; ++b) {
                    const int64_t iq2 = x2 * stride_q + b - pad_q;
                    if (iq2 < 0 || iq2 >= q2) continue;
                    acc += static_cast<double>(wq.at(oc, ic, a, b)) *
                           static_cast<double>(x.data[static_cast<size_t>(
                               (((ic * q1 + iq1) * q2 + iq2) * s1 + is1c) * s2 + is2c)]);
                    ++opcount::conv4d_macs;
                  }
                }
            }
            // support-offset taps, query offset pinned to center; the
            // support center tap is skipped (owned by the query branch)
            const int64_t iq1c = x1 * stride_q + cq1 - pad_q;
            const int64_t iq2c = x2 * stride_q + cq2 - pad_q;
            if (iq1c >= 0 && iq1c < q1 && iq2c >= 0 && iq2c < q2) {
              for (int64_t ic = 0; ic < ci; ++ic)
                for (int64_t cc = 0; cc < ks1; ++cc) {
                  const int64_t is1 = y1 * stride_s + cc - pad_s;
                  if (is1 < 0 || is1 >= s1) continue;
                  for (int64_t dd = 0; dd < ks2; ++dd) {
                    if (cc == cs1 && dd == cs2) continue;
                    const int64_t is2 = y2 * stride_s + dd - pad_s;
                    if (is2 < 0 || is2 >= s2) continue;
                    acc += static_cast<double>(ws.at(oc, ic, cc, dd)) *
                           static_cast<double>(x.data[static_cast<size_t>(
                               (((ic * q1 + iq1c) * q2 + iq2c) * s1 + is1) * s2 + is2)]);
                    ++opcount::conv4d_macs;
                  }
                }
            }
            out.at(oc, x1, x2, y1, y2) = static_cast<T>(acc);
          }
  return out;
}

// 1x1x1x1 channel mix on a rank>=2 tensor: out[co,...] = sum_ci w[co,ci] x[ci,...]
template <typename T>
Tensor<T> pointwise_conv(const Tensor<T>& x, const Tensor<T>& w) {
  require_shape(w.rank() == 2, "pointwise_conv expects [Co,Ci] weights");
  require_shape(x.rank() >= 2 && x.dims[0] == w.dims[1], "pointwise_conv channel mismatch");
  const int64_t ci = x.dims[0], co = w.dims[0];
  const int64_t sp = x.numel() / ci;
  auto dims = x.dims;
  dims[0] = co;
  Tensor<T> out(dims);
  for (int64_t oc = 0; oc < co; ++oc)
    for (int64_t p = 0; p < sp; ++p) {
      double acc = 0.0;
      for (int64_t ic = 0; ic < ci; ++ic)
        acc += static_cast<double>(w.at(oc, ic)) * static_cast<double>(x.data[static_cast<size_t>(ic * sp + p)]);
      out.data[static_cast<size_t>(oc * sp + p)] = static_cast<T>(acc);
    }
  return out;
}

// Group normalization over dim 0 (channels); statistics span each group's
// channels and all remaining dims.  Returns the per-group mean and inverse
// stddev through the out parameters for the backward pass.
inline constexpr double kGroupNormEps = 1e-5;

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     int64_t groups, std::vector<double>* out_mean = nullptr,
                     std::vector<double>* out_invstd = nullptr) {
  const int64_t c = x.dims[0];
  require_shape(gamma.rank() == 1 && gamma.dims[0] == c && beta.rank() == 1 && beta.dims[0] == c,
                "group_norm scale/shift must be [C]");
  require_shape(groups >= 1 && c % groups == 0, "group_norm channels must divide into groups");
  const int64_t sp = x.numel() / c;
  const int64_t cg = c / groups;
  const int64_t m = cg * sp;

  std::vector<double> mean(static_cast<size_t>(groups)), invstd(static_cast<size_t>(groups));
  for (int64_t g = 0; g < groups; ++g) {
    double sum = 0.0, sq = 0.0;
    for (int64_t ch = g * cg; ch < (g + 1) * cg; ++ch)
      for (int64_t p = 0; p < sp; ++p) {
        const double v = x.data[static_cast<size_t>(ch * sp + p)];
        sum += v;
        sq += v * v;
      }
    const double mu = sum / static_cast<double>(m);
    const double var = std::max(0.0, sq / static_cast<double>(m) - mu * mu);
    mean[static_cast<size_t>(g)] = mu;
    invstd[static_cast<size_t>(g)] = 1.0 / std::sqrt(var + kGroupNormEps);
  }

  Tensor<T> out(x.dims);
  for (int64_t ch = 0; ch < c; ++ch) {
    const int64_t g = ch / cg;
    const double mu = mean[static_cast<size_t>(g)], is = invstd[static_cast<size_t>(g)];
    const double ga = gamma.data[static_cast<size_t>(ch)], be = beta.data[static_cast<size_t>(ch)];
    for (int64_t p = 0; p < sp; ++p) {
      const double v = x.data[static_cast<size_t>(ch * sp + p)];
      out.data[static_cast<size_t>(ch * sp + p)] = static_cast<T>((v - mu) * is * ga + be);
    }
  }
  if (out_mean) *out_mean = std::move(mean);
  if (out_invstd) *out_invstd = std::move(invstd);
  return out;
}

// Mean over the two support dims: [C,Q1,Q2,S1,S2] -> [C,Q1,Q2]
template <typename T>
Tensor<T> mean_support(const Tensor<T>& x) {
  require_shape(x.rank() == 5, "mean_support expects rank-5 input");
  const int64_t c = x.dims[0], q1 = x.dims[1], q2 = x.dims[2];
  const int64_t sup = x.dims[3] * x.dims[4];
  Tensor<T> out({c, q1, q2});
  for (int64_t i = 0; i < c * q1 * q2; ++i) {
    double acc = 0.0;
    for (int64_t s = 0; s < sup; ++s)
      acc += static_cast<double>(x.data[static_cast<size_t>(i * sup + s)]);
    out.data[static_cast<size_t>(i)] = static_cast<T>(acc / static_cast<double>(sup));
  }
  return out;
}

// Bilinear upsampling of the two query dims of a [C,Q1,Q2,S1,S2] volume.
template <typename T>
Tensor<T> upsample_query_bilinear(const Tensor<T>& x, int64_t out_q1, int64_t out_q2) {
  require_shape(x.rank() == 5, "upsample_query_bilinear expects rank-5 input");
  const int64_t c = x.dims[0], q1 = x.dims[1], q2 = x.dims[2], s1 = x.dims[3], s2 = x.dims[4];
  require_shape(out_q1 >= q1 && out_q2 >= q2, "upsample target smaller than input");
  const int64_t sup = s1 * s2;
  Tensor<T> out({c, out_q1, out_q2, s1, s2});
  std::vector<LerpWeight> rows(static_cast<size_t>(out_q1)), cols(static_cast<size_t>(out_q2));
  for (int64_t i = 0; i < out_q1; ++i) rows[static_cast<size_t>(i)] = lerp_weight(i, q1, out_q1);
  for (int64_t j = 0; j < out_q2; ++j) cols[static_cast<size_t>(j)] = lerp_weight(j, q2, out_q2);
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t i = 0; i < out_q1; ++i) {
      const auto& rw = rows[static_cast<size_t>(i)];
      for (int64_t j = 0; j < out_q2; ++j) {
        const auto& cw = cols[static_cast<size_t>(j)];
        for (int64_t s = 0; s < sup; ++s) {
          const auto v = [&](int64_t qi, int64_t qj) {
            return static_cast<double>(
                x.data[static_cast<size_t>(((ch * q1 + qi) * q2 + qj) * sup + s)]);
          };
          const double top = v(rw.i0, cw.i0) + cw.t * (v(rw.i0, cw.i1) - v(rw.i0, cw.i0));
          const double bot = v(rw.i1, cw.i0) + cw.t * (v(rw.i1, cw.i1) - v(rw.i1, cw.i0));
          out.data[static_cast<size_t>(((ch * out_q1 + i) * out_q2 + j) * sup + s)] =
              static_cast<T>(top + rw.t * (bot - top));
        }
      }
    }
  return out;
}

}  // namespace fecanet::kernels
