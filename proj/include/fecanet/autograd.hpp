#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "fecanet/kernels.hpp"
#include "fecanet/tensor.hpp"

// Reverse-mode differentiation over a dynamically recorded operation graph.
// Each op computes its forward value through the plain kernel and stores a
// closure that scatters the output gradient back to its parents.  A graph
// belongs to one evaluation context; nodes are immutable once created.
namespace fecanet::ag {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first use
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward;

  Tensor<T>& ensure_grad() {
    if (grad.data.empty()) grad = Tensor<T>::zeros(value.dims);
    return grad;
  }
};

template <typename T>
struct Var {
  std::shared_ptr<Node<T>> n;

  const Tensor<T>& value() const { return n->value; }
  const std::vector<int64_t>& dims() const { return n->value.dims; }
  bool requires_grad() const { return n->requires_grad; }
};

namespace detail {

template <typename T>
Var<T> make(Tensor<T> value, std::vector<std::shared_ptr<Node<T>>> parents) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->parents = std::move(parents);
  for (const auto& p : node->parents)
    if (p->requires_grad) {
      node->requires_grad = true;
      break;
    }
  return Var<T>{std::move(node)};
}

// Accumulate a double-precision buffer into a parent gradient.
template <typename T>
void add_to_grad(Node<T>& parent, const std::vector<double>& buf) {
  auto& g = parent.ensure_grad();
  for (size_t i = 0; i < buf.size(); ++i) g.data[i] += static_cast<T>(buf[i]);
}

}  // namespace detail

template <typename T>
Var<T> constant(Tensor<T> t) {
  return detail::make<T>(std::move(t), {});
}

template <typename T>
Var<T> leaf(const Tensor<T>& t) {
  auto v = detail::make<T>(t, {});
  v.n->requires_grad = true;
  return v;
}

// Hands out one graph leaf per parameter tensor, keyed by address, so a
// tensor shared between branches accumulates gradient from both.
template <typename T>
class VarStore {
 public:
  Var<T> param(const Tensor<T>& t) {
    auto it = cache_.find(&t);
    if (it != cache_.end()) return it->second;
    Var<T> v = leaf(t);
    cache_.emplace(&t, v);
    return v;
  }

  Var<T> constant(const Tensor<T>& t) { return ag::constant(t); }

  // Gradient of the last backward() for a registered parameter; zeros if the
  // parameter never entered the graph or received no gradient.
  Tensor<T> grad_of(const Tensor<T>& t) const {
    auto it = cache_.find(&t);
    if (it == cache_.end() || it->second.n->grad.data.empty())
      return Tensor<T>::zeros(t.dims);
    return it->second.n->grad;
  }

 private:
  std::unordered_map<const Tensor<T>*, Var<T>> cache_;
};

template <typename T>
void backward(const Var<T>& root) {
  if (root.value().numel() != 1)
    throw ContractError("backward requires a scalar root, got " + dims_str(root.dims()));

  // iterative post-order DFS; parent order fixed by construction
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.emplace_back(root.n.get(), 0);
  visited.insert(root.n.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<T>* next = node->parents[idx++].get();
      if (next->requires_grad && visited.insert(next).second) stack.emplace_back(next, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.n->ensure_grad().data[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && !node->grad.data.empty()) node->backward(*node);
  }
}

// ---------------------------------------------------------------------------
// elementwise and scalar ops

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_shape(a.value().same_dims(b.value()), "add dims mismatch");
  Tensor<T> out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out.data[static_cast<size_t>(i)] += b.value().data[static_cast<size_t>(i)];
  auto v = detail::make<T>(std::move(out), {a.n, b.n});
  if (v.requires_grad())
    v.n->backward = [](Node<T>& n) {
      for (int k = 0; k < 2; ++k) {
        auto& p = *n.parents[static_cast<size_t>(k)];
        if (!p.requires_grad) continue;
        auto& g = p.ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) g.data[static_cast<size_t>(i)] += n.grad.data[static_cast<size_t>(i)];
      }
    };
  return v;
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_shape(a.value().same_dims(b.value()), "mul dims mismatch");
  Tensor<T> out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out.data[static_cast<size_t>(i)] *= b.value().data[static_cast<size_t>(i)];
  auto v = detail::make<T>(std::move(out), {a.n, b.n});
  if (v.requires_grad())
    v.n->backward = [](Node<T>& n) {
      auto& pa = *n.parents[0];
      auto& pb = *n.parents[1];
      if (pa.requires_grad) {
        auto& g = pa.ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i)
          g.data[static_cast<size_t>(i)] += n.grad.data[static_cast<size_t>(i)] * pb.value.data[static_cast<size_t>(i)];
      }
      if (pb.requires_grad) {
        auto& g = pb.ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i)
          g.data[static_cast<size_t>(i)] += n.grad.data[static_cast<size_t>(i)] * pa.value.data[static_cast<size_t>(i)];
      }
    };
  return v;
}

template <typename T>
Var<T> scale(const Var<T>& a, double s) {
  Tensor<T> out = a.value();
  for (auto& x : out.data) x = static_cast<T>(static_cast<double>(x) * s);
  auto v = detail::make<T>(std::move(out), {a.n});
  if (v.requires_grad())
    v.n->backward = [s](Node<T>& n) {
      auto& p = *n.parents[0];
      auto& g = p.ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i)
        g.data[static_cast<size_t>(i)] += static_cast<T>(static_cast<double>(n.grad.data[static_cast<size_t>(i)]) * s);
    };
  return v;
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  auto v = detail::make<T>(kernels::relu(a.value()), {a.n});
  if (v.requires_grad())
    v.n->backward = [](Node<T>& n) {
      auto& p = *n.parents[0];
      auto& g = p.ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i)
        if (p.value.data[static_cast<size_t>(i)] > T(0)) g.data[static_cast<size_t>(i)] += n.grad.data[static_cast<size_t>(i)];
    };
  return v;
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  auto v = detail::make<T>(kernels::sigmoid(a.value()), {a.n});
  if (v.requires_grad())
    v.n->backward = [](Node<T>& n) {
      auto& p = *n.parents[0];
      auto& g = p.ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) {
        const double y = n.value.data[static_cast<size_t>(i)];
        g.data[static_cast<size_t>(i)] += static_cast<T>(static_cast<double>(n.grad.data[static_cast<size_t>(i)]) * y * (1.0 - y));
      }
    };
  return v;
}

// log(max(x, floor)); gradient is zero where the floor is active
template <typename T>
Var<T> log_floor(const Var<T>& a, double floor) {
  Tensor<T> out(a.dims());
  for (int64_t i = 0; i < out.numel(); ++i)
    out.data[static_cast<size_t>(i)] =
        static_cast<T>(std::log(std::max(static_cast<double>(a.value().data[static_cast<size_t>(i)]), floor)));
  auto v = detail::make<T>(std::move(out), {a.n});
  if (v.requires_grad())
    v.n->backward = [floor](Node<T>& n) {
      auto& p = *n.parents[0];
      auto& g = p.ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) {
        const double x = p.value.data[static_cast<size_t>(i)];
        if (x > floor) g.data[static_cast<size_t>(i)] += static_cast<T>(static_cast<double>(n.grad.data[static_cast<size_t>(i)]) / x);
      }
    };
  return v;
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  double acc = 0.0;
  for (T x : a.value().data) acc += static_cast<double>(x);
  auto v = detail::make<T>(Tensor<T>::scalar(static_cast<T>(acc)), {a.n});
  if (v.requires_grad())
    v.n->backward = [](Node<T>& n) {
      auto& p = *n.parents[0];
      auto& g = p.ensure_grad();
      const T go = n.grad.data[0];
      for (auto& x : g.data) x += go;
    };
  return v;
}

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<int64_t> dims) {
  require_shape(numel_of(dims) == a.value().numel(), "reshape element count mismatch");
  Tensor<T> out(std::move(dims), a.value().data);
  auto v = detail::make<T>(std::move(out), {a.n});
  if (v.requires_grad())
    v.n->backward = [](Node<T>& n) {
      auto& p = *n.parents[0];
      auto& g = p.ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) g.data[static_cast<size_t>(i)] += n.grad.data[static_cast<size_t>(i)];
    };
  return v;
}

// ---------------------------------------------------------------------------
// linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  auto v = detail::make<T>(kernels::matmul(a.value(), b.value()), {a.n, b.n});
  if (v.requires_grad())
    v.n->backward = [](Node<T>& n) {
      auto& pa = *n.parents[0];
      auto& pb = *n.parents[1];
      if (pa.requires_grad) {
        Tensor<T> da = kernels::matmul(n.grad, kernels::transpose2d(pb.value));
        auto& g = pa.ensure_grad();
        for (int64_t i = 0; i < da.numel(); ++i) g.data[static_cast<size_t>(i)] += da.data[static_cast<size_t>(i)];
      }
      if (pb.requires_grad) {
        Tensor<T> db = kernels::matmul(kernels::transpose2d(pa.value), n.grad);
        auto& g = pb.ensure_grad();
        for (int64_t i = 0; i < db.numel(); ++i) g.data[static_cast<size_t>(i)] += db.data[static_cast<size_t>(i)];
      }
    };
  return v;
}

template <typename T>
Var<T> transpose2d(const Var<T>& a) {
  auto v = detail::make<T>(kernels::transpose2d(a.value()), {a.n});
  if (v.requires_grad())
    v.n->backward = [](Node<T>& n) {
      auto& p = *n.parents[0];
      Tensor<T> gt = kernels::transpose2d(n.grad);
      auto& g = p.ensure_grad();
      for (int64_t i = 0; i < gt.numel(); ++i) g.data[static_cast<size_t>(i)] += gt.data[static_cast<size_t>(i)];
    };
  return v;
}

// y = W x + b on vectors: x [Ci], W [Co,Ci], b [Co]
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  require_shape(x.value().rank() == 1 && w.value().rank() == 2 && b.value().rank() == 1,
                "linear expects vector input, matrix weights, vector bias");
  require_shape(w.dims()[1] == x.dims()[0] && w.dims()[0] == b.dims()[0], "linear dims mismatch");
  const int64_t co = w.dims()[0], ci = w.dims()[1];
  Tensor<T> out({co});
  for (int64_t o = 0; o < co; ++o) {
    double acc = static_cast<double>(b.value().data[static_cast<size_t>(o)]);
    for (int64_t i = 0; i < ci; ++i)
      acc += static_cast<double>(w.value().at(o, i)) * static_cast<double>(x.value().data[static_cast<size_t>(i)]);
    out.data[static_cast<size_t>(o)] = static_cast<T>(acc);
  }
  auto v = detail::make<T>(std::move(out), {x.n, w.n, b.n});
  if (v.requires_grad())
    v.n->backward = [co, ci](Node<T>& n) {
      auto& px = *n.parents[0];
      auto& pw = *n.parents[1];
      auto& pb = *n.parents[2];
      if (px.requires_grad) {
        auto& g = px.ensure_grad();
        for (int64_t i = 0; i < ci; ++i) {
          double acc = 0.0;
          for (int64_t o = 0; o < co; ++o)
            acc += static_cast<double>(n.grad.data[static_cast<size_t>(o)]) * static_cast<double>(pw.value.at(o, i));
          g.data[static_cast<size_t>(i)] += static_cast<T>(acc);
        }
      }
      if (pw.requires_grad) {
        auto& g = pw.ensure_grad();
        for (int64_t o = 0; o < co; ++o)
          for (int64_t i = 0; i < ci; ++i)
            g.at(o, i) += static_cast<T>(static_cast<double>(n.grad.data[static_cast<size_t>(o)]) *
                                         static_cast<double>(px.value.data[static_cast<size_t>(i)]));
      }
      if (pb.requires_grad) {
        auto& g = pb.ensure_grad();
        for (int64_t o = 0; o < co; ++o) g.data[static_cast<size_t>(o)] += n.grad.data[static_cast<size_t>(o)];
      }
    };
  return v;
}

template <typename T>
Var<T> softmax_axis(const Var<T>& a, int axis) {
  auto v = detail::make<T>(kernels::softmax_axis(a.value(), axis), {a.n});
  if (v.requires_grad())
    v.n->backward = [axis](Node<T>& n) {
      auto& p = *n.parents[0];
      auto& g = p.ensure_grad();
      const auto& y = n.value;
      int64_t outer = 1, inner = 1;
      for (int i = 0; i < axis; ++i) outer *= y.dims[static_cast<size_t>(i)];
      const int64_t len = y.dims[static_cast<size_t>(axis)];
      for (int i = axis + 1; i < y.rank(); ++i) inner *= y.dims[static_cast<size_t>(i)];
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
          const int64_t base = o * len * inner + in;
          double dot = 0.0;
          for (int64_t i = 0; i < len; ++i)
            dot += static_cast<double>(n.grad.data[static_cast<size_t>(base + i * inner)]) *
                   static_cast<double>(y.data[static_cast<size_t>(base + i * inner)]);
          for (int64_t i = 0; i < len; ++i) {
            const size_t idx = static_cast<size_t>(base + i * inner);
            g.data[idx] += static_cast<T>(static_cast<double>(y.data[idx]) *
                                          (static_cast<double>(n.grad.data[idx]) - dot));
          }
        }
    };
  return v;
}

// ---------------------------------------------------------------------------
// convolution / resampling / pooling

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, int64_t stride, int64_t pad) {
  auto v = detail::make<T>(kernels::conv2d(x.value(), w.value(), stride, pad), {x.n, w.n});
  if (v.requires_grad())
    v.n->backward = [stride, pad](Node<T>& n) {
      auto& px = *n.parents[0];
      auto& pw = *n.parents[1];
      const auto& xv = px.value;
      const auto& wv = pw.value;
      const int64_t ci = xv.dims[0], h = xv.dims[1], wdt = xv.dims[2];
      const int64_t co = wv.dims[0], kh = wv.dims[2], kw = wv.dims[3];
      const int64_t ho = n.value.dims[1], wo = n.value.dims[2];
      std::vector<double> dx(static_cast<size_t>(xv.numel()), 0.0);
      std::vector<double> dw(static_cast<size_t>(wv.numel()), 0.0);
      for (int64_t oc = 0; oc < co; ++oc)
        for (int64_t oh = 0; oh < ho; ++oh)
          for (int64_t ow = 0; ow < wo; ++ow) {
            const double go = n.grad.at(oc, oh, ow);
            if (go == 0.0) continue;
            for (int64_t ic = 0; ic < ci; ++ic)
              for (int64_t r = 0; r < kh; ++r) {
                const int64_t ih = oh * stride + r - pad;
                if (ih < 0 || ih >= h) continue;
                for (int64_t s = 0; s < kw; ++s) {
                  const int64_t iw = ow * stride + s - pad;
                  if (iw < 0 || iw >= wdt) continue;
                  dx[static_cast<size_t>((ic * h + ih) * wdt + iw)] += go * static_cast<double>(wv.at(oc, ic, r, s));
                  dw[static_cast<size_t>(((oc * ci + ic) * kh + r) * kw + s)] +=
                      go * static_cast<double>(xv.at(ic, ih, iw));
                }
              }
          }
      if (px.requires_grad) detail::add_to_grad(px, dx);
      if (pw.requires_grad) detail::add_to_grad(pw, dw);
    };
  return v;
}

template <typename T>
Var<T> upsample_bilinear(const Var<T>& x, int64_t out_h, int64_t out_w) {
  auto v = detail::make<T>(kernels::upsample_bilinear(x.value(), out_h, out_w), {x.n});
  if (v.requires_grad())
    v.n->backward = [](Node<T>& n) {
      auto& p = *n.parents[0];
      const int64_t c = p.value.dims[0], h = p.value.dims[1], w = p.value.dims[2];
      const int64_t oh = n.value.dims[1], ow = n.value.dims[2];
      std::vector<double> dx(static_cast<size_t>(p.value.numel()), 0.0);
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < oh; ++i) {
          const auto rw = kernels::lerp_weight(i, h, oh);
          for (int64_t j = 0; j < ow; ++j) {
            const auto cw = kernels::lerp_weight(j, w, ow);
            const double go = n.grad.at(ch, i, j);
            if (go == 0.0) continue;
            const auto di = [&](int64_t r, int64_t cc, double wt) {
              dx[static_cast<size_t>((ch * h + r) * w + cc)] += go * wt;
            };
            di(rw.i0, cw.i0, (1.0 - rw.t) * (1.0 - cw.t));
            di(rw.i0, cw.i1, (1.0 - rw.t) * cw.t);
            di(rw.i1, cw.i0, rw.t * (1.0 - cw.t));
            di(rw.i1, cw.i1, rw.t * cw.t);
          }
        }
      detail::add_to_grad(p, dx);
    };
  return v;
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  auto v = detail::make<T>(kernels::global_avg_pool(x.value()), {x.n});
  if (v.requires_grad())
    v.n->backward = [](Node<T>& n) {
      auto& p = *n.parents[0];
      auto& g = p.ensure_grad();
      const int64_t c = p.value.dims[0], hw = p.value.dims[1] * p.value.dims[2];
      for (int64_t ch = 0; ch < c; ++ch) {
        const double go = static_cast<double>(n.grad.data[static_cast<size_t>(ch)]) / static_cast<double>(hw);
        for (int64_t i = 0; i < hw; ++i)
          g.data[static_cast<size_t>(ch * hw + i)] += static_cast<T>(go);
      }
    };
  return v;
}

// gate [C] broadcast-multiplied over a [C,H,W] map
template <typename T>
Var<T> channel_gate_mul(const Var<T>& gate, const Var<T>& x) {
  require_shape(gate.value().rank() == 1 && x.value().rank() == 3 && gate.dims()[0] == x.dims()[0],
                "channel_gate_mul dims mismatch");
  const int64_t c = x.dims()[0], hw = x.dims()[1] * x.dims()[2];
  Tensor<T> out(x.dims());
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t i = 0; i < hw; ++i)
      out.data[static_cast<size_t>(ch * hw + i)] =
          gate.value().data[static_cast<size_t>(ch)] * x.value().data[static_cast<size_t>(ch * hw + i)];
  auto v = detail::make<T>(std::move(out), {gate.n, x.n});
  if (v.requires_grad())
    v.n->backward = [c, hw](Node<T>& n) {
      auto& pg = *n.parents[0];
      auto& px = *n.parents[1];
      if (pg.requires_grad) {
        auto& g = pg.ensure_grad();
        for (int64_t ch = 0; ch < c; ++ch) {
          double acc = 0.0;
          for (int64_t i = 0; i < hw; ++i)
            acc += static_cast<double>(n.grad.data[static_cast<size_t>(ch * hw + i)]) *
                   static_cast<double>(px.value.data[static_cast<size_t>(ch * hw + i)]);
          g.data[static_cast<size_t>(ch)] += static_cast<T>(acc);
        }
      }
      if (px.requires_grad) {
        auto& g = px.ensure_grad();
        for (int64_t ch = 0; ch < c; ++ch)
          for (int64_t i = 0; i < hw; ++i)
            g.data[static_cast<size_t>(ch * hw + i)] +=
                n.grad.data[static_cast<size_t>(ch * hw + i)] * pg.value.data[static_cast<size_t>(ch)];
      }
    };
  return v;
}

template <typename T>
Var<T> concat_dim0(const std::vector<Var<T>>& parts) {
  require_shape(!parts.empty(), "concat of empty list");
  std::vector<Tensor<T>> vals;
  std::vector<std::shared_ptr<Node<T>>> parents;
  vals.reserve(parts.size());
  for (const auto& p : parts) {
    vals.push_back(p.value());
    parents.push_back(p.n);
  }
  auto v = detail::make<T>(kernels::concat_dim0(vals), parents);
  if (v.requires_grad())
    v.n->backward = [](Node<T>& n) {
      size_t off = 0;
      for (auto& pp : n.parents) {
        auto& p = *pp;
        const size_t count = p.value.data.size();
        if (p.requires_grad) {
          auto& g = p.ensure_grad();
          for (size_t i = 0; i < count; ++i) g.data[i] += n.grad.data[off + i];
        }
        off += count;
      }
    };
  return v;
}

// ---------------------------------------------------------------------------
// correlation / self-similarity / 4D convolution

template <typename T>
Var<T> cosine_correlation(const Var<T>& fq, const Var<T>& fs) {
  auto v = detail::make<T>(kernels::cosine_corr4d(fq.value(), fs.value()), {fq.n, fs.n});
  if (v.requires_grad())
    v.n->backward = [](Node<T>& n) {
      auto& pq = *n.parents[0];
      auto& ps = *n.parents[1];
      const auto& q = pq.value;
      const auto& s = ps.value;
      const int64_t c = q.dims[0];
      const int64_t nq = q.dims[1] * q.dims[2], ns = s.dims[1] * s.dims[2];
      const auto qn = kernels::spatial_norms(q);
      const auto sn = kernels::spatial_norms(s);
      std::vector<double> dq(static_cast<size_t>(q.numel()), 0.0);
      std::vector<double> ds(static_cast<size_t>(s.numel()), 0.0);
      for (int64_t iq = 0; iq < nq; ++iq) {
        const double nqv = qn[static_cast<size_t>(iq)];
        for (int64_t is = 0; is < ns; ++is) {
          const double out = n.value.data[static_cast<size_t>(iq * ns + is)];
          const double go = n.grad.data[static_cast<size_t>(iq * ns + is)];
          if (go == 0.0 || out <= 0.0) continue;  // ReLU clamp: no gradient at or below zero
          const double nsv = sn[static_cast<size_t>(is)];
          const double denom = (nqv + kernels::kCosineEps) * (nsv + kernels::kCosineEps);
          const double du = go / denom;
          const double dnq = nqv > 0.0 ? -go * out / (nqv + kernels::kCosineEps) : 0.0;
          const double dns = nsv > 0.0 ? -go * out / (nsv + kernels::kCosineEps) : 0.0;
          for (int64_t ch = 0; ch < c; ++ch) {
            const double qv = q.data[static_cast<size_t>(ch * nq + iq)];
            const double sv = s.data[static_cast<size_t>(ch * ns + is)];
            dq[static_cast<size_t>(ch * nq + iq)] += du * sv + (nqv > 0.0 ? dnq * qv / nqv : 0.0);
            ds[static_cast<size_t>(ch * ns + is)] += du * qv + (nsv > 0.0 ? dns * sv / nsv : 0.0);
          }
        }
      }
      if (pq.requires_grad) detail::add_to_grad(pq, dq);
      if (ps.requires_grad) detail::add_to_grad(ps, ds);
    };
  return v;
}

template <typename T>
Var<T> self_similarity(const Var<T>& x, int64_t k) {
  auto v = detail::make<T>(kernels::self_similarity(x.value(), k), {x.n});
  if (v.requires_grad())
    v.n->backward = [k](Node<T>& n) {
      auto& p = *n.parents[0];
      const auto& x = p.value;
      const int64_t c = x.dims[0], h = x.dims[1], w = x.dims[2];
      const int64_t t = (k - 1) / 2;
      std::vector<double> dx(static_cast<size_t>(x.numel()), 0.0);
      for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j)
          for (int64_t di = -t; di <= t; ++di) {
            const int64_t ii = i + di;
            if (ii < 0 || ii >= h) continue;
            for (int64_t dj = -t; dj <= t; ++dj) {
              const int64_t jj = j + dj;
              if (jj < 0 || jj >= w) continue;
              const int64_t d = (di + t) * k + (dj + t);
              const double go = n.grad.at(d, i, j);
              if (go == 0.0) continue;
              for (int64_t ch = 0; ch < c; ++ch) {
                dx[static_cast<size_t>((ch * h + i) * w + j)] += go * static_cast<double>(x.at(ch, ii, jj));
                dx[static_cast<size_t>((ch * h + ii) * w + jj)] += go * static_cast<double>(x.at(ch, i, j));
              }
            }
          }
      detail::add_to_grad(p, dx);
    };
  return v;
}

template <typename T>
Var<T> conv4d_center_pivot(const Var<T>& x, const Var<T>& wq, const Var<T>& ws, int64_t stride_q,
                           int64_t stride_s, int64_t pad_q, int64_t pad_s) {
  auto v = detail::make<T>(
      kernels::conv4d_center_pivot(x.value(), wq.value(), ws.value(), stride_q, stride_s, pad_q, pad_s),
      {x.n, wq.n, ws.n});
  if (v.requires_grad())
    v.n->backward = [stride_q, stride_s, pad_q, pad_s](Node<T>& n) {
      auto& px = *n.parents[0];
      auto& pq = *n.parents[1];
      auto& ps = *n.parents[2];
      const auto& xv = px.value;
      const auto& wqv = pq.value;
      const auto& wsv = ps.value;
      const int64_t ci = xv.dims[0], q1 = xv.dims[1], q2 = xv.dims[2], s1 = xv.dims[3], s2 = xv.dims[4];
      const int64_t co = wqv.dims[0];
      const int64_t kq1 = wqv.dims[2], kq2 = wqv.dims[3], ks1 = wsv.dims[2], ks2 = wsv.dims[3];
      const int64_t cq1 = (kq1 - 1) / 2, cq2 = (kq2 - 1) / 2;
      const int64_t cs1 = (ks1 - 1) / 2, cs2 = (ks2 - 1) / 2;
      const int64_t oq1 = n.value.dims[1], oq2 = n.value.dims[2], os1 = n.value.dims[3], os2 = n.value.dims[4];
      std::vector<double> dx(static_cast<size_t>(xv.numel()), 0.0);
      std::vector<double> dwq(static_cast<size_t>(wqv.numel()), 0.0);
      std::vector<double> dws(static_cast<size_t>(wsv.numel()), 0.0);
      for (int64_t oc = 0; oc < co; ++oc)
        for (int64_t x1 = 0; x1 < oq1; ++x1)
          for (int64_t x2 = 0; x2 < oq2; ++x2)
            for (int64_t y1 = 0; y1 < os1; ++y1)
              for (int64_t y2 = 0; y2 < os2; ++y2) {
                const double go = n.grad.at(oc, x1, x2, y1, y2);
                if (go == 0.0) continue;
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
                        const size_t xi = static_cast<size_t>(
                            (((ic * q1 + iq1) * q2 + iq2) * s1 + is1c) * s2 + is2c);
                        dx[xi] += go * static_cast<double>(wqv.at(oc, ic, a, b));
                        dwq[static_cast<size_t>(((oc * ci + ic) * kq1 + a) * kq2 + b)] +=
                            go * static_cast<double>(xv.data[xi]);
                      }
                    }
                }
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
                        const size_t xi = static_cast<size_t>(
                            (((ic * q1 + iq1c) * q2 + iq2c) * s1 + is1) * s2 + is2);
                        dx[xi] += go * static_cast<double>(wsv.at(oc, ic, cc, dd));
                        dws[static_cast<size_t>(((oc * ci + ic) * ks1 + cc) * ks2 + dd)] +=
                            go * static_cast<double>(xv.data[xi]);
                      }
                    }
                }
              }
      if (px.requires_grad) detail::add_to_grad(px, dx);
      if (pq.requires_grad) detail::add_to_grad(pq, dwq);
      if (ps.requires_grad) detail::add_to_grad(ps, dws);
    };
  return v;
}

template <typename T>
Var<T> pointwise_conv(const Var<T>& x, const Var<T>& w) {
  auto v = detail::make<T>(kernels::pointwise_conv(x.value(), w.value()), {x.n, w.n});
  if (v.requires_grad())
    v.n->backward = [](Node<T>& n) {
      auto& px = *n.parents[0];
      auto& pw = *n.parents[1];
      const int64_t ci = px.value.dims[0], co = pw.value.dims[0];
      const int64_t sp = px.value.numel() / ci;
      if (px.requires_grad) {
        std::vector<double> dx(static_cast<size_t>(px.value.numel()), 0.0);
        for (int64_t ic = 0; ic < ci; ++ic)
          for (int64_t p = 0; p < sp; ++p) {
            double acc = 0.0;
            for (int64_t oc = 0; oc < co; ++oc)
              acc += static_cast<double>(n.grad.data[static_cast<size_t>(oc * sp + p)]) *
                     static_cast<double>(pw.value.at(oc, ic));
            dx[static_cast<size_t>(ic * sp + p)] = acc;
          }
        detail::add_to_grad(px, dx);
      }
      if (pw.requires_grad) {
        std::vector<double> dw(static_cast<size_t>(pw.value.numel()), 0.0);
        for (int64_t oc = 0; oc < co; ++oc)
          for (int64_t ic = 0; ic < ci; ++ic) {
            double acc = 0.0;
            for (int64_t p = 0; p < sp; ++p)
              acc += static_cast<double>(n.grad.data[static_cast<size_t>(oc * sp + p)]) *
                     static_cast<double>(px.value.data[static_cast<size_t>(ic * sp + p)]);
            dw[static_cast<size_t>(oc * ci + ic)] = acc;
          }
        detail::add_to_grad(pw, dw);
      }
    };
  return v;
}

template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int64_t groups) {
  std::vector<double> mean, invstd;
  auto out = kernels::group_norm(x.value(), gamma.value(), beta.value(), groups, &mean, &invstd);
  auto v = detail::make<T>(std::move(out), {x.n, gamma.n, beta.n});
  if (v.requires_grad())
    v.n->backward = [groups, mean = std::move(mean), invstd = std::move(invstd)](Node<T>& n) {
      auto& px = *n.parents[0];
      auto& pg = *n.parents[1];
      auto& pb = *n.parents[2];
      const auto& x = px.value;
      const auto& gamma = pg.value;
      const int64_t c = x.dims[0];
      const int64_t sp = x.numel() / c;
      const int64_t cg = c / groups;
      const double m = static_cast<double>(cg * sp);

      std::vector<double> dx(static_cast<size_t>(x.numel()), 0.0);
      std::vector<double> dgamma(static_cast<size_t>(c), 0.0);
      std::vector<double> dbeta(static_cast<size_t>(c), 0.0);
      for (int64_t g = 0; g < groups; ++g) {
        const double mu = mean[static_cast<size_t>(g)], is = invstd[static_cast<size_t>(g)];
        double sum_dxh = 0.0, sum_dxh_xh = 0.0;
        for (int64_t ch = g * cg; ch < (g + 1) * cg; ++ch) {
          const double ga = gamma.data[static_cast<size_t>(ch)];
          for (int64_t p = 0; p < sp; ++p) {
            const size_t idx = static_cast<size_t>(ch * sp + p);
            const double go = n.grad.data[idx];
            const double xh = (static_cast<double>(x.data[idx]) - mu) * is;
            dgamma[static_cast<size_t>(ch)] += go * xh;
            dbeta[static_cast<size_t>(ch)] += go;
            const double dxh = go * ga;
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
          }
        }
        for (int64_t ch = g * cg; ch < (g + 1) * cg; ++ch) {
          const double ga = gamma.data[static_cast<size_t>(ch)];
          for (int64_t p = 0; p < sp; ++p) {
            const size_t idx = static_cast<size_t>(ch * sp + p);
            const double go = n.grad.data[idx];
            const double xh = (static_cast<double>(x.data[idx]) - mu) * is;
            const double dxh = go * ga;
            dx[idx] = is * (dxh - sum_dxh / m - xh * sum_dxh_xh / m);
          }
        }
      }
      if (px.requires_grad) detail::add_to_grad(px, dx);
      if (pg.requires_grad) detail::add_to_grad(pg, dgamma);
      if (pb.requires_grad) detail::add_to_grad(pb, dbeta);
    };
  return v;
}

template <typename T>
Var<T> mean_support(const Var<T>& x) {
  auto v = detail::make<T>(kernels::mean_support(x.value()), {x.n});
  if (v.requires_grad())
    v.n->backward = [](Node<T>& n) {
      auto& p = *n.parents[0];
      auto& g = p.ensure_grad();
      const int64_t sup = p.value.dims[3] * p.value.dims[4];
      const int64_t lead = p.value.numel() / sup;
      for (int64_t i = 0; i < lead; ++i) {
        const double go = static_cast<double>(n.grad.data[static_cast<size_t>(i)]) / static_cast<double>(sup);
        for (int64_t s = 0; s < sup; ++s)
          g.data[static_cast<size_t>(i * sup + s)] += static_cast<T>(go);
      }
    };
  return v;
}

template <typename T>
Var<T> upsample_query_bilinear(const Var<T>& x, int64_t out_q1, int64_t out_q2) {
  auto v = detail::make<T>(kernels::upsample_query_bilinear(x.value(), out_q1, out_q2), {x.n});
  if (v.requires_grad())
    v.n->backward = [](Node<T>& n) {
      auto& p = *n.parents[0];
      const int64_t c = p.value.dims[0], q1 = p.value.dims[1], q2 = p.value.dims[2];
      const int64_t sup = p.value.dims[3] * p.value.dims[4];
      const int64_t oq1 = n.value.dims[1], oq2 = n.value.dims[2];
      std::vector<double> dx(static_cast<size_t>(p.value.numel()), 0.0);
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < oq1; ++i) {
          const auto rw = kernels::lerp_weight(i, q1, oq1);
          for (int64_t j = 0; j < oq2; ++j) {
            const auto cw = kernels::lerp_weight(j, q2, oq2);
            for (int64_t s = 0; s < sup; ++s) {
              const double go =
                  n.grad.data[static_cast<size_t>(((ch * oq1 + i) * oq2 + j) * sup + s)];
              if (go == 0.0) continue;
              const auto di = [&](int64_t r, int64_t cc, double wt) {
                dx[static_cast<size_t>(((ch * q1 + r) * q2 + cc) * sup + s)] += go * wt;
              };
              di(rw.i0, cw.i0, (1.0 - rw.t) * (1.0 - cw.t));
              di(rw.i0, cw.i1, (1.0 - rw.t) * cw.t);
              di(rw.i1, cw.i0, rw.t * (1.0 - cw.t));
              di(rw.i1, cw.i1, rw.t * cw.t);
            }
          }
        }
      detail::add_to_grad(p, dx);
    };
  return v;
}

}  // namespace fecanet::ag
