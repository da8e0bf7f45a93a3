#pragma once

#include <functional>
#include <type_traits>
#include <memory>
#include <unordered_set>

#include "dfkd/gemm.hpp"
#include "dfkd/tensor.hpp"

namespace dfkd {

// Reverse-mode autodiff over Tensor<T>. Every op records a closure that
// accumulates into its parents' grads; backward() runs them in reverse
// topological order from a scalar root.

template <class T>
struct Node {
  Tensor<T> val;
  Tensor<T> grad;  // allocated lazily, same shape as val
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backprop;

  Tensor<T>& ensure_grad() {
    if (grad.shape != val.shape) grad = Tensor<T>::zeros(val.shape);
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> v, bool requires_grad = false)
      : node(std::make_shared<Node<T>>()) {
    node->val = std::move(v);
    node->requires_grad = requires_grad;
  }

  bool defined() const { return node != nullptr; }
  const Tensor<T>& val() const { return node->val; }
  Tensor<T>& val() { return node->val; }
  Tensor<T>& grad() const { return node->ensure_grad(); }
  bool requires_grad() const { return node && node->requires_grad; }
  T scalar() const { return node->val.data.at(0); }

  std::shared_ptr<Node<T>> node;
};

template <class T>
inline Var<T> constant(Tensor<T> v) {
  return Var<T>(std::move(v), false);
}

template <class T>
inline Var<T> make_result(Tensor<T> v, std::vector<Var<T>> parents,
                          std::function<void(Node<T>&)> backprop) {
  bool req = false;
  for (const auto& p : parents) req = req || p.requires_grad();
  Var<T> out(std::move(v), req);
  if (req) {
    for (auto& p : parents) out.node->parents.push_back(p.node);
    out.node->backprop = std::move(backprop);
  }
  return out;
}

template <class T>
inline void backward(const Var<T>& root) {
  if (!root.requires_grad()) return;
  if (root.val().numel() != 1)
    throw std::runtime_error("backward: root must be scalar, got " + shape_str(root.val().shape));
  // topo order by iterative DFS
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.push_back({root.node.get(), 0});
  visited.insert(root.node.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node<T>* p = n->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node->ensure_grad().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

template <class T>
inline void accumulate(Node<T>& parent, const Tensor<T>& delta) {
  if (!parent.requires_grad) return;
  Tensor<T>& g = parent.ensure_grad();
  for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += delta.data[i];
}

// ---- elementwise ----

template <class T>
inline Var<T> add(Var<T> a, Var<T> b) {
  check_same_shape(a.val(), b.val(), "add");
  Tensor<T> out = a.val();
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.val().data[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    accumulate(*n.parents[0], n.grad);
    accumulate(*n.parents[1], n.grad);
  });
}

template <class T>
inline Var<T> sub(Var<T> a, Var<T> b) {
  check_same_shape(a.val(), b.val(), "sub");
  Tensor<T> out = a.val();
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.val().data[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    accumulate(*n.parents[0], n.grad);
    if (n.parents[1]->requires_grad) {
      Tensor<T>& g = n.parents[1]->ensure_grad();
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] -= n.grad.data[i];
    }
  });
}

template <class T>
inline Var<T> mul(Var<T> a, Var<T> b) {
  check_same_shape(a.val(), b.val(), "mul");
  Tensor<T> out = a.val();
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.val().data[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    Node<T>&pa = *n.parents[0], &pb = *n.parents[1];
    if (pa.requires_grad) {
      Tensor<T>& g = pa.ensure_grad();
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i] * pb.val.data[i];
    }
    if (pb.requires_grad) {
      Tensor<T>& g = pb.ensure_grad();
      for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i] * pa.val.data[i];
    }
  });
}

template <class T>
inline Var<T> scale(Var<T> a, T c) {
  Tensor<T> out = a.val();
  for (auto& v : out.data) v *= c;
  return make_result<T>(std::move(out), {a}, [c](Node<T>& n) {
    Node<T>& p = *n.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& g = p.ensure_grad();
    for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += c * n.grad.data[i];
  });
}

template <class T>
inline Var<T> add_scalar(Var<T> a, T c) {
  Tensor<T> out = a.val();
  for (auto& v : out.data) v += c;
  return make_result<T>(std::move(out), {a},
                        [](Node<T>& n) { accumulate(*n.parents[0], n.grad); });
}

template <class T, class F, class DF>
inline Var<T> unary_op(Var<T> a, F f, DF df) {
  Tensor<T> out = a.val();
  for (auto& v : out.data) v = f(v);
  return make_result<T>(std::move(out), {a}, [df](Node<T>& n) {
    Node<T>& p = *n.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& g = p.ensure_grad();
    for (size_t i = 0; i < g.data.size(); ++i)
      g.data[i] += n.grad.data[i] * df(p.val.data[i], n.val.data[i]);
  });
}

template <class T>
inline Var<T> tanh_op(Var<T> a) {
  return unary_op(
      a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
inline Var<T> exp_op(Var<T> a) {
  return unary_op(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
inline Var<T> log_op(Var<T> a) {
  return unary_op(
      a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
inline Var<T> log1p_op(Var<T> a) {
  return unary_op(
      a, [](T x) { return std::log1p(x); }, [](T x, T) { return T(1) / (T(1) + x); });
}

// sqrt with a clamped derivative so an exact-zero argument stays finite
template <class T>
inline Var<T> sqrt_op(Var<T> a) {
  return unary_op(
      a, [](T x) { return std::sqrt(x); },
      [](T, T y) { return T(1) / (T(2) * std::max(y, T(1e-12))); });
}

template <class T>
inline Var<T> leaky_relu(Var<T> a, T slope) {
  return unary_op(
      a, [slope](T x) { return x > T(0) ? x : slope * x; },
      [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

template <class T>
inline Var<T> relu(Var<T> a) {
  return leaky_relu(a, T(0));
}

// ---- shape ----

template <class T>
inline Var<T> reshape(Var<T> a, Shape s) {
  if (shape_numel(s) != a.val().numel())
    throw DimError("reshape: numel mismatch " + shape_str(a.val().shape) + " -> " + shape_str(s));
  Tensor<T> out = a.val();
  out.shape = std::move(s);
  return make_result<T>(std::move(out), {a}, [](Node<T>& n) {
    Node<T>& p = *n.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& g = p.ensure_grad();
    for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
  });
}

template <class T>
inline Var<T> concat_cols(Var<T> a, Var<T> b) {
  const auto& av = a.val();
  const auto& bv = b.val();
  if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(0) != bv.dim(0))
    throw DimError("concat_cols: need [B,Da],[B,Db]");
  int64_t B = av.dim(0), Da = av.dim(1), Db = bv.dim(1);
  Tensor<T> out({B, Da + Db});
  for (int64_t i = 0; i < B; ++i) {
    std::copy_n(&av.at2(i, 0), Da, &out.at2(i, 0));
    std::copy_n(&bv.at2(i, 0), Db, &out.at2(i, Da));
  }
  return make_result<T>(std::move(out), {a, b}, [B, Da, Db](Node<T>& n) {
    Node<T>&pa = *n.parents[0], &pb = *n.parents[1];
    if (pa.requires_grad) {
      Tensor<T>& g = pa.ensure_grad();
      for (int64_t i = 0; i < B; ++i)
        for (int64_t j = 0; j < Da; ++j) g.at2(i, j) += n.grad.at2(i, j);
    }
    if (pb.requires_grad) {
      Tensor<T>& g = pb.ensure_grad();
      for (int64_t i = 0; i < B; ++i)
        for (int64_t j = 0; j < Db; ++j) g.at2(i, j) += n.grad.at2(i, Da + j);
    }
  });
}

// ---- linear algebra ----

template <class T>
inline Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.val();
  const auto& bv = b.val();
  if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(0))
    throw DimError("matmul: incompatible " + shape_str(av.shape) + " x " + shape_str(bv.shape));
  int64_t m = av.dim(0), k = av.dim(1), n2 = bv.dim(1);
  Tensor<T> out({m, n2});
  gemm<T>(false, false, m, n2, k, T(1), av.data.data(), bv.data.data(), T(0), out.data.data());
  return make_result<T>(std::move(out), {a, b}, [m, k, n2](Node<T>& n) {
    Node<T>&pa = *n.parents[0], &pb = *n.parents[1];
    if (pa.requires_grad) {
      // dA = dC * B^T
      gemm<T>(false, true, m, k, n2, T(1), n.grad.data.data(), pb.val.data.data(), T(1),
              pa.ensure_grad().data.data());
    }
    if (pb.requires_grad) {
      // dB = A^T * dC
      gemm<T>(true, false, k, n2, m, T(1), pa.val.data.data(), n.grad.data.data(), T(1),
              pb.ensure_grad().data.data());
    }
  });
}

// y = x * W^T + b, x:[B,I], W:[O,I], b:[O]
template <class T>
inline Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  const auto& xv = x.val();
  const auto& wv = w.val();
  if (xv.ndim() != 2 || wv.ndim() != 2 || xv.dim(1) != wv.dim(1))
    throw DimError("linear: incompatible " + shape_str(xv.shape) + ", W " + shape_str(wv.shape));
  int64_t B = xv.dim(0), I = xv.dim(1), O = wv.dim(0);
  Tensor<T> out({B, O});
  gemm<T>(false, true, B, O, I, T(1), xv.data.data(), wv.data.data(), T(0), out.data.data());
  for (int64_t i = 0; i < B; ++i)
    for (int64_t j = 0; j < O; ++j) out.at2(i, j) += b.val()[j];
  return make_result<T>(std::move(out), {x, w, b}, [B, I, O](Node<T>& n) {
    Node<T>&px = *n.parents[0], &pw = *n.parents[1], &pb = *n.parents[2];
    if (px.requires_grad)
      gemm<T>(false, false, B, I, O, T(1), n.grad.data.data(), pw.val.data.data(), T(1),
              px.ensure_grad().data.data());
    if (pw.requires_grad)
      gemm<T>(true, false, O, I, B, T(1), n.grad.data.data(), px.val.data.data(), T(1),
              pw.ensure_grad().data.data());
    if (pb.requires_grad) {
      Tensor<T>& g = pb.ensure_grad();
      for (int64_t i = 0; i < B; ++i)
        for (int64_t j = 0; j < O; ++j) g[j] += n.grad.at2(i, j);
    }
  });
}

// ---- convolution ----

namespace detail {

template <class T>
inline void im2col(const T* img, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                   int64_t stride, int64_t pad, int64_t OH, int64_t OW, T* col) {
  // col: [C*kh*kw, OH*OW]
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t i = 0; i < kh; ++i) {
      for (int64_t j = 0; j < kw; ++j) {
        T* dst = col + ((c * kh + i) * kw + j) * OH * OW;
        for (int64_t oh = 0; oh < OH; ++oh) {
          int64_t ih = oh * stride + i - pad;
          if (ih < 0 || ih >= H) {
            std::fill_n(dst + oh * OW, OW, T(0));
            continue;
          }
          const T* src = img + (c * H + ih) * W;
          for (int64_t ow = 0; ow < OW; ++ow) {
            int64_t iw = ow * stride + j - pad;
            dst[oh * OW + ow] = (iw >= 0 && iw < W) ? src[iw] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
inline void col2im_add(const T* col, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                       int64_t stride, int64_t pad, int64_t OH, int64_t OW, T* img) {
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t i = 0; i < kh; ++i) {
      for (int64_t j = 0; j < kw; ++j) {
        const T* src = col + ((c * kh + i) * kw + j) * OH * OW;
        for (int64_t oh = 0; oh < OH; ++oh) {
          int64_t ih = oh * stride + i - pad;
          if (ih < 0 || ih >= H) continue;
          T* dst = img + (c * H + ih) * W;
          for (int64_t ow = 0; ow < OW; ++ow) {
            int64_t iw = ow * stride + j - pad;
            if (iw >= 0 && iw < W) dst[iw] += src[oh * OW + ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x:[B,C,H,W], w:[O,C,kh,kw], b:[O]
template <class T>
inline Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int64_t stride, int64_t pad) {
  const auto& xv = x.val();
  const auto& wv = w.val();
  if (xv.ndim() != 4 || wv.ndim() != 4 || xv.dim(1) != wv.dim(1))
    throw DimError("conv2d: incompatible x " + shape_str(xv.shape) + ", w " + shape_str(wv.shape));
  int64_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int64_t O = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  int64_t OH = (H + 2 * pad - kh) / stride + 1;
  int64_t OW = (W + 2 * pad - kw) / stride + 1;
  int64_t K = C * kh * kw;
  Tensor<T> out({B, O, OH, OW});
  std::vector<T> col(static_cast<size_t>(K * OH * OW));
  for (int64_t n = 0; n < B; ++n) {
    detail::im2col(xv.data.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, OH, OW,
                   col.data());
    gemm<T>(false, false, O, OH * OW, K, T(1), wv.data.data(), col.data(), T(0),
            out.data.data() + n * O * OH * OW);
  }
  for (int64_t n = 0; n < B; ++n)
    for (int64_t o = 0; o < O; ++o) {
      T bias = b.val()[o];
      T* dst = out.data.data() + (n * O + o) * OH * OW;
      for (int64_t i = 0; i < OH * OW; ++i) dst[i] += bias;
    }
  auto bp = [B, C, H, W, O, kh, kw, stride, pad, OH, OW, K](Node<T>& n) {
    Node<T>&px = *n.parents[0], &pw = *n.parents[1], &pb = *n.parents[2];
    std::vector<T> col(static_cast<size_t>(K * OH * OW));
    for (int64_t i = 0; i < B; ++i) {
      const T* dout = n.grad.data.data() + i * O * OH * OW;
      if (pw.requires_grad) {
        detail::im2col(px.val.data.data() + i * C * H * W, C, H, W, kh, kw, stride, pad, OH, OW,
                       col.data());
        gemm<T>(false, true, O, K, OH * OW, T(1), dout, col.data(), T(1),
                pw.ensure_grad().data.data());
      }
      if (px.requires_grad) {
        gemm<T>(true, false, K, OH * OW, O, T(1), pw.val.data.data(), dout, T(0), col.data());
        detail::col2im_add(col.data(), C, H, W, kh, kw, stride, pad, OH, OW,
                           px.ensure_grad().data.data() + i * C * H * W);
      }
    }
    if (pb.requires_grad) {
      Tensor<T>& g = pb.ensure_grad();
      for (int64_t i = 0; i < B; ++i)
        for (int64_t o = 0; o < O; ++o) {
          const T* dout = n.grad.data.data() + (i * O + o) * OH * OW;
          T s = 0;
          for (int64_t j = 0; j < OH * OW; ++j) s += dout[j];
          g[o] += s;
        }
    }
  };
  return make_result<T>(std::move(out), {x, w, b}, bp);
}

// ---- pooling / resampling ----

template <class T>
inline Var<T> maxpool2x2(Var<T> x) {
  const auto& xv = x.val();
  if (xv.ndim() != 4 || xv.dim(2) % 2 || xv.dim(3) % 2)
    throw DimError("maxpool2x2: need [B,C,2h,2w], got " + shape_str(xv.shape));
  int64_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  int64_t OH = H / 2, OW = W / 2;
  Tensor<T> out({B, C, OH, OW});
  auto argmax = std::make_shared<std::vector<int64_t>>(out.data.size());
  int64_t idx = 0;
  for (int64_t n = 0; n < B; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t oh = 0; oh < OH; ++oh)
        for (int64_t ow = 0; ow < OW; ++ow, ++idx) {
          T best = -std::numeric_limits<T>::infinity();
          int64_t besti = 0;
          for (int64_t dh = 0; dh < 2; ++dh)
            for (int64_t dw = 0; dw < 2; ++dw) {
              int64_t off = ((n * C + c) * H + 2 * oh + dh) * W + 2 * ow + dw;
              if (xv[off] > best) {
                best = xv[off];
                besti = off;
              }
            }
          out[idx] = best;
          (*argmax)[static_cast<size_t>(idx)] = besti;
        }
  return make_result<T>(std::move(out), {x}, [argmax](Node<T>& n) {
    Node<T>& p = *n.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& g = p.ensure_grad();
    for (size_t i = 0; i < argmax->size(); ++i) g[(*argmax)[i]] += n.grad.data[i];
  });
}

template <class T>
inline Var<T> upsample_nearest2x(Var<T> x) {
  const auto& xv = x.val();
  if (xv.ndim() != 4) throw DimError("upsample_nearest2x: need 4-d input");
  int64_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  Tensor<T> out({B, C, 2 * H, 2 * W});
  for (int64_t n = 0; n < B; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w) {
          T v = xv.at4(n, c, h, w);
          out.at4(n, c, 2 * h, 2 * w) = v;
          out.at4(n, c, 2 * h, 2 * w + 1) = v;
          out.at4(n, c, 2 * h + 1, 2 * w) = v;
          out.at4(n, c, 2 * h + 1, 2 * w + 1) = v;
        }
  return make_result<T>(std::move(out), {x}, [B, C, H, W](Node<T>& n) {
    Node<T>& p = *n.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& g = p.ensure_grad();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t h = 0; h < H; ++h)
          for (int64_t w = 0; w < W; ++w)
            g.at4(b, c, h, w) += n.grad.at4(b, c, 2 * h, 2 * w) +
                                 n.grad.at4(b, c, 2 * h, 2 * w + 1) +
                                 n.grad.at4(b, c, 2 * h + 1, 2 * w) +
                                 n.grad.at4(b, c, 2 * h + 1, 2 * w + 1);
  });
}

template <class T>
inline Var<T> global_avg_pool(Var<T> x) {
  const auto& xv = x.val();
  if (xv.ndim() != 4) throw DimError("global_avg_pool: need 4-d input");
  int64_t B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  Tensor<T> out({B, C});
  for (int64_t n = 0; n < B; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T* src = xv.data.data() + (n * C + c) * HW;
      T s = 0;
      for (int64_t i = 0; i < HW; ++i) s += src[i];
      out.at2(n, c) = s / static_cast<T>(HW);
    }
  return make_result<T>(std::move(out), {x}, [B, C, HW](Node<T>& n) {
    Node<T>& p = *n.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& g = p.ensure_grad();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c) {
        T d = n.grad.at2(b, c) / static_cast<T>(HW);
        T* dst = g.data.data() + (b * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) dst[i] += d;
      }
  });
}

// ---- reductions / indexing ----

template <class T>
inline Var<T> sum_all(Var<T> x) {
  T s = 0;
  for (T v : x.val().data) s += v;
  return make_result<T>(Tensor<T>({1}, s), {x}, [](Node<T>& n) {
    Node<T>& p = *n.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& g = p.ensure_grad();
    T d = n.grad.data[0];
    for (auto& v : g.data) v += d;
  });
}

template <class T>
inline Var<T> mean_all(Var<T> x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.val().numel()));
}

template <class T>
inline Var<T> row_sum(Var<T> x) {
  const auto& xv = x.val();
  if (xv.ndim() != 2) throw DimError("row_sum: need [B,D]");
  int64_t B = xv.dim(0), D = xv.dim(1);
  Tensor<T> out({B});
  for (int64_t i = 0; i < B; ++i) {
    T s = 0;
    for (int64_t j = 0; j < D; ++j) s += xv.at2(i, j);
    out[i] = s;
  }
  return make_result<T>(std::move(out), {x}, [B, D](Node<T>& n) {
    Node<T>& p = *n.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& g = p.ensure_grad();
    for (int64_t i = 0; i < B; ++i)
      for (int64_t j = 0; j < D; ++j) g.at2(i, j) += n.grad[i];
  });
}

// out[i] = x[i, idx[i]]
template <class T>
inline Var<T> gather_cols(Var<T> x, std::vector<int64_t> idx) {
  const auto& xv = x.val();
  if (xv.ndim() != 2 || static_cast<int64_t>(idx.size()) != xv.dim(0))
    throw DimError("gather_cols: need [B,N] and B indices");
  int64_t B = xv.dim(0), N = xv.dim(1);
  Tensor<T> out({B});
  for (int64_t i = 0; i < B; ++i) {
    if (idx[static_cast<size_t>(i)] < 0 || idx[static_cast<size_t>(i)] >= N)
      throw std::out_of_range("gather_cols: index " +
                              std::to_string(idx[static_cast<size_t>(i)]) + " out of [0," +
                              std::to_string(N) + ")");
    out[i] = xv.at2(i, idx[static_cast<size_t>(i)]);
  }
  auto ids = std::make_shared<std::vector<int64_t>>(std::move(idx));
  return make_result<T>(std::move(out), {x}, [ids, B](Node<T>& n) {
    Node<T>& p = *n.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& g = p.ensure_grad();
    for (int64_t i = 0; i < B; ++i) g.at2(i, (*ids)[static_cast<size_t>(i)]) += n.grad[i];
  });
}

// out[i] = table[idx[i], :]
template <class T>
inline Var<T> embed_rows(Var<T> table, const std::vector<int64_t>& idx) {
  const auto& tv = table.val();
  if (tv.ndim() != 2) throw DimError("embed_rows: table must be [N,D]");
  int64_t N = tv.dim(0), D = tv.dim(1);
  int64_t B = static_cast<int64_t>(idx.size());
  Tensor<T> out({B, D});
  for (int64_t i = 0; i < B; ++i) {
    int64_t r = idx[static_cast<size_t>(i)];
    if (r < 0 || r >= N)
      throw std::out_of_range("embed_rows: label " + std::to_string(r) + " out of [0," +
                              std::to_string(N) + ")");
    std::copy_n(&tv.at2(r, 0), D, &out.at2(i, 0));
  }
  auto ids = std::make_shared<std::vector<int64_t>>(idx);
  return make_result<T>(std::move(out), {table}, [ids, B, D](Node<T>& n) {
    Node<T>& p = *n.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& g = p.ensure_grad();
    for (int64_t i = 0; i < B; ++i) {
      int64_t r = (*ids)[static_cast<size_t>(i)];
      for (int64_t j = 0; j < D; ++j) g.at2(r, j) += n.grad.at2(i, j);
    }
  });
}

// ---- broadcast helpers over rows ([B,D] op [B]) ----

template <class T>
inline Var<T> sub_colvec(Var<T> x, Var<T> v) {
  const auto& xv = x.val();
  if (xv.ndim() != 2 || v.val().ndim() != 1 || v.val().dim(0) != xv.dim(0))
    throw DimError("sub_colvec: need [B,D] and [B]");
  int64_t B = xv.dim(0), D = xv.dim(1);
  Tensor<T> out = xv;
  for (int64_t i = 0; i < B; ++i)
    for (int64_t j = 0; j < D; ++j) out.at2(i, j) -= v.val()[i];
  return make_result<T>(std::move(out), {x, v}, [B, D](Node<T>& n) {
    Node<T>&px = *n.parents[0], &pv = *n.parents[1];
    if (px.requires_grad) accumulate(px, n.grad);
    if (pv.requires_grad) {
      Tensor<T>& g = pv.ensure_grad();
      for (int64_t i = 0; i < B; ++i)
        for (int64_t j = 0; j < D; ++j) g[i] -= n.grad.at2(i, j);
    }
  });
}

template <class T>
inline Var<T> div_colvec(Var<T> x, Var<T> v) {
  const auto& xv = x.val();
  if (xv.ndim() != 2 || v.val().ndim() != 1 || v.val().dim(0) != xv.dim(0))
    throw DimError("div_colvec: need [B,D] and [B]");
  int64_t B = xv.dim(0), D = xv.dim(1);
  Tensor<T> out = xv;
  for (int64_t i = 0; i < B; ++i)
    for (int64_t j = 0; j < D; ++j) out.at2(i, j) /= v.val()[i];
  return make_result<T>(std::move(out), {x, v}, [B, D](Node<T>& n) {
    Node<T>&px = *n.parents[0], &pv = *n.parents[1];
    if (px.requires_grad) {
      Tensor<T>& g = px.ensure_grad();
      for (int64_t i = 0; i < B; ++i)
        for (int64_t j = 0; j < D; ++j) g.at2(i, j) += n.grad.at2(i, j) / pv.val[i];
    }
    if (pv.requires_grad) {
      Tensor<T>& g = pv.ensure_grad();
      for (int64_t i = 0; i < B; ++i) {
        T s = 0;
        for (int64_t j = 0; j < D; ++j) s += n.grad.at2(i, j) * n.val.at2(i, j);
        g[i] -= s / pv.val[i];
      }
    }
  });
}

// ---- softmax family ----

template <class T>
inline Var<T> log_softmax_rows(Var<T> x) {
  const auto& xv = x.val();
  if (xv.ndim() != 2) throw DimError("log_softmax_rows: need [B,N]");
  int64_t B = xv.dim(0), N = xv.dim(1);
  Tensor<T> out({B, N});
  for (int64_t i = 0; i < B; ++i) {
    T mx = xv.at2(i, 0);
    for (int64_t j = 1; j < N; ++j) mx = std::max(mx, xv.at2(i, j));
    T lse = 0;
    for (int64_t j = 0; j < N; ++j) lse += std::exp(xv.at2(i, j) - mx);
    lse = mx + std::log(lse);
    for (int64_t j = 0; j < N; ++j) out.at2(i, j) = xv.at2(i, j) - lse;
  }
  return make_result<T>(std::move(out), {x}, [B, N](Node<T>& n) {
    Node<T>& p = *n.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& g = p.ensure_grad();
    for (int64_t i = 0; i < B; ++i) {
      T gsum = 0;
      for (int64_t j = 0; j < N; ++j) gsum += n.grad.at2(i, j);
      for (int64_t j = 0; j < N; ++j)
        g.at2(i, j) += n.grad.at2(i, j) - std::exp(n.val.at2(i, j)) * gsum;
    }
  });
}

// log sum_{j != i} exp(S[i,j]) per row, the contrastive denominator
template <class T>
inline Var<T> offdiag_row_lse(Var<T> s) {
  const auto& sv = s.val();
  if (sv.ndim() != 2 || sv.dim(0) != sv.dim(1) || sv.dim(0) < 2)
    throw DimError("offdiag_row_lse: need square [B,B] with B >= 2");
  int64_t B = sv.dim(0);
  Tensor<T> out({B});
  for (int64_t i = 0; i < B; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (int64_t j = 0; j < B; ++j)
      if (j != i) mx = std::max(mx, sv.at2(i, j));
    T acc = 0;
    for (int64_t j = 0; j < B; ++j)
      if (j != i) acc += std::exp(sv.at2(i, j) - mx);
    out[i] = mx + std::log(acc);
  }
  return make_result<T>(std::move(out), {s}, [B](Node<T>& n) {
    Node<T>& p = *n.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& g = p.ensure_grad();
    for (int64_t i = 0; i < B; ++i)
      for (int64_t j = 0; j < B; ++j)
        if (j != i) g.at2(i, j) += n.grad[i] * std::exp(p.val.at2(i, j) - n.val[i]);
  });
}

// ---- batch statistics (per channel over N,H,W; biased variance) ----

template <class T>
inline void channel_moments(const Tensor<T>& x, Tensor<T>& mean, Tensor<T>& var) {
  int64_t B = x.dim(0), C = x.dim(1), HW = x.ndim() == 4 ? x.dim(2) * x.dim(3) : 1;
  int64_t m = B * HW;
  mean = Tensor<T>({C});
  var = Tensor<T>({C});
  for (int64_t c = 0; c < C; ++c) {
    T s = 0;
    for (int64_t n = 0; n < B; ++n) {
      const T* p = x.data.data() + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) s += p[i];
    }
    T mu = s / static_cast<T>(m);
    T v = 0;
    for (int64_t n = 0; n < B; ++n) {
      const T* p = x.data.data() + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) {
        T d = p[i] - mu;
        v += d * d;
      }
    }
    mean[c] = mu;
    var[c] = v / static_cast<T>(m);
  }
}

template <class T>
inline Var<T> channel_mean(Var<T> x) {
  const auto& xv = x.val();
  int64_t B = xv.dim(0), C = xv.dim(1), HW = xv.ndim() == 4 ? xv.dim(2) * xv.dim(3) : 1;
  Tensor<T> mean, var;
  channel_moments(xv, mean, var);
  int64_t m = B * HW;
  return make_result<T>(std::move(mean), {x}, [B, C, HW, m](Node<T>& n) {
    Node<T>& p = *n.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& g = p.ensure_grad();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c) {
        T d = n.grad[c] / static_cast<T>(m);
        T* dst = g.data.data() + (b * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) dst[i] += d;
      }
  });
}

template <class T>
inline Var<T> channel_var(Var<T> x) {
  const auto& xv = x.val();
  int64_t B = xv.dim(0), C = xv.dim(1), HW = xv.ndim() == 4 ? xv.dim(2) * xv.dim(3) : 1;
  auto mean = std::make_shared<Tensor<T>>();
  Tensor<T> var;
  channel_moments(xv, *mean, var);
  int64_t m = B * HW;
  return make_result<T>(std::move(var), {x}, [B, C, HW, m, mean](Node<T>& n) {
    Node<T>& p = *n.parents[0];
    if (!p.requires_grad) return;
    Tensor<T>& g = p.ensure_grad();
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c) {
        T coef = T(2) * n.grad[c] / static_cast<T>(m);
        const T* src = p.val.data.data() + (b * C + c) * HW;
        T* dst = g.data.data() + (b * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) dst[i] += coef * (src[i] - (*mean)[c]);
      }
  });
}

// ---- batch normalization (shared core of plain BN and CFE) ----
//
// scale/shift are either per-channel vectors [C] (labels == nullptr) or
// per-class embedding tables [N,C] looked up row-wise by labels.
// Train mode computes biased batch statistics and differentiates through
// them; eval mode treats the given statistics as constants.

template <class T>
inline Var<T> norm_scale_shift(Var<T> x, Var<T> scale_v, Var<T> shift_v,
                               const std::vector<int64_t>* labels, bool train_mode,
                               std::type_identity_t<const Tensor<T>*> run_mean,
                               std::type_identity_t<const Tensor<T>*> run_var, T eps,
                               std::type_identity_t<Tensor<T>*> out_batch_mean = nullptr,
                               std::type_identity_t<Tensor<T>*> out_batch_var = nullptr) {
  const auto& xv = x.val();
  if (xv.ndim() != 4 && xv.ndim() != 2) throw DimError("norm_scale_shift: need 2-d or 4-d input");
  int64_t B = xv.dim(0), C = xv.dim(1), HW = xv.ndim() == 4 ? xv.dim(2) * xv.dim(3) : 1;
  const bool per_class = labels != nullptr;
  if (per_class && static_cast<int64_t>(labels->size()) != B)
    throw DimError("norm_scale_shift: labels length must equal batch size");

  auto mean = std::make_shared<Tensor<T>>();
  auto var = std::make_shared<Tensor<T>>();
  if (train_mode) {
    channel_moments(xv, *mean, *var);
  } else {
    *mean = *run_mean;
    *var = *run_var;
  }
  if (out_batch_mean) *out_batch_mean = *mean;
  if (out_batch_var) *out_batch_var = *var;

  auto inv_std = std::make_shared<Tensor<T>>(Shape{C});
  for (int64_t c = 0; c < C; ++c) (*inv_std)[c] = T(1) / std::sqrt((*var)[c] + eps);

  auto xhat = std::make_shared<Tensor<T>>(xv.shape);
  Tensor<T> out(xv.shape);
  auto lbl = per_class ? std::make_shared<std::vector<int64_t>>(*labels)
                       : std::shared_ptr<std::vector<int64_t>>();
  const auto& sv = scale_v.val();
  const auto& hv = shift_v.val();
  for (int64_t n = 0; n < B; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      T s = per_class ? sv.at2((*lbl)[static_cast<size_t>(n)], c) : sv[c];
      T h = per_class ? hv.at2((*lbl)[static_cast<size_t>(n)], c) : hv[c];
      const T* src = xv.data.data() + (n * C + c) * HW;
      T* xh = xhat->data.data() + (n * C + c) * HW;
      T* dst = out.data.data() + (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) {
        xh[i] = (src[i] - (*mean)[c]) * (*inv_std)[c];
        dst[i] = xh[i] * s + h;
      }
    }
  }

  auto bp = [B, C, HW, train_mode, per_class, lbl, mean, inv_std, xhat](Node<T>& n) {
    Node<T>&px = *n.parents[0], &ps = *n.parents[1], &ph = *n.parents[2];
    const Tensor<T>& dy = n.grad;
    const Tensor<T>& sv = ps.val;
    int64_t m = B * HW;

    if (ps.requires_grad || ph.requires_grad) {
      Tensor<T>* gs = ps.requires_grad ? &ps.ensure_grad() : nullptr;
      Tensor<T>* gh = ph.requires_grad ? &ph.ensure_grad() : nullptr;
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
          const T* d = dy.data.data() + (b * C + c) * HW;
          const T* xh = xhat->data.data() + (b * C + c) * HW;
          T ss = 0, sh = 0;
          for (int64_t i = 0; i < HW; ++i) {
            ss += d[i] * xh[i];
            sh += d[i];
          }
          if (per_class) {
            int64_t r = (*lbl)[static_cast<size_t>(b)];
            if (gs) gs->at2(r, c) += ss;
            if (gh) gh->at2(r, c) += sh;
          } else {
            if (gs) (*gs)[c] += ss;
            if (gh) (*gh)[c] += sh;
          }
        }
    }

    if (!px.requires_grad) return;
    Tensor<T>& gx = px.ensure_grad();
    if (!train_mode) {
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
          T s = per_class ? sv.at2((*lbl)[static_cast<size_t>(b)], c) : sv[c];
          T coef = s * (*inv_std)[c];
          const T* d = dy.data.data() + (b * C + c) * HW;
          T* dst = gx.data.data() + (b * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) dst[i] += coef * d[i];
        }
      return;
    }
    // train mode: differentiate through batch mean/var
    // dxhat[b,c,i] = dy * s_{b,c}
    // dx = inv_std * (dxhat - mean_c(dxhat) - xhat * mean_c(dxhat * xhat))
    for (int64_t c = 0; c < C; ++c) {
      T sum_dxh = 0, sum_dxh_xh = 0;
      for (int64_t b = 0; b < B; ++b) {
        T s = per_class ? sv.at2((*lbl)[static_cast<size_t>(b)], c) : sv[c];
        const T* d = dy.data.data() + (b * C + c) * HW;
        const T* xh = xhat->data.data() + (b * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          T dxh = d[i] * s;
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xh[i];
        }
      }
      T mean_dxh = sum_dxh / static_cast<T>(m);
      T mean_dxh_xh = sum_dxh_xh / static_cast<T>(m);
      for (int64_t b = 0; b < B; ++b) {
        T s = per_class ? sv.at2((*lbl)[static_cast<size_t>(b)], c) : sv[c];
        const T* d = dy.data.data() + (b * C + c) * HW;
        const T* xh = xhat->data.data() + (b * C + c) * HW;
        T* dst = gx.data.data() + (b * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i)
          dst[i] += (*inv_std)[c] * (d[i] * s - mean_dxh - xh[i] * mean_dxh_xh);
      }
    }
  };
  return make_result<T>(std::move(out), {x, scale_v, shift_v}, bp);
}

}  // namespace dfkd
