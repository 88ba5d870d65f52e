#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <utility>
#include <vector>

#include "cdma/error.hpp"
#include "cdma/gemm.hpp"
#include "cdma/parallel.hpp"
#include "cdma/rng.hpp"
#include "cdma/tensor.hpp"

namespace cdma {

enum class PoolMode { kAvg, kMax };

/// Reverse-mode autodiff tape. Nodes are appended in execution order, so the
/// sequence itself is a topological order: inputs always precede the node
/// that consumes them. Values are computed eagerly; backward() replays the
/// tape in reverse. One graph is confined to a single logical thread;
/// independent graphs may run concurrently.
template <class T>
class GraphT {
 public:
  using Tensor = TensorT<T>;

  struct Node {
    const char* op;
    std::vector<int> inputs;
    Tensor value;
    Tensor grad;  // empty until the first accumulation
    bool requires_grad = false;
    std::function<void(GraphT&, int)> backward;
  };

  int size() const { return static_cast<int>(nodes_.size()); }

  const Tensor& value(int id) const { return nodes_[id].value; }

  /// Gradient of `id` after backward(); zeros if no gradient reached it.
  Tensor grad(int id) const {
    const Node& n = nodes_[id];
    if (n.grad.empty()) return Tensor::zeros(n.value.shape);
    return n.grad;
  }

  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  int count_ops(const char* op) const {
    int c = 0;
    for (const Node& n : nodes_) {
      if (std::strcmp(n.op, op) == 0) ++c;
    }
    return c;
  }

  // ---- node creation -------------------------------------------------

  int leaf(Tensor v) {
    bool rg = v.requires_grad;
    return push("leaf", {}, std::move(v), rg, nullptr);
  }

  int constant(Tensor v) { return push("const", {}, std::move(v), false, nullptr); }

  int scalar(double v) {
    return constant(Tensor({1}, {static_cast<T>(v)}));
  }

  /// Blocks gradient flow: downstream gradients never reach `x`.
  int detach(int x) {
    return push("detach", {x}, nodes_[x].value, false, nullptr);
  }

  // ---- elementwise ---------------------------------------------------

  int add(int a, int b) { return binary("add", a, b, [](T x, T y) { return x + y; },
      [](GraphT& g, int a, int b, const Tensor& go, const Tensor&, const Tensor&) {
        g.accum_eltwise(a, go, [](T gv, int64_t) { return gv; });
        g.accum_eltwise(b, go, [](T gv, int64_t) { return gv; });
      }); }

  int sub(int a, int b) { return binary("sub", a, b, [](T x, T y) { return x - y; },
      [](GraphT& g, int a, int b, const Tensor& go, const Tensor&, const Tensor&) {
        g.accum_eltwise(a, go, [](T gv, int64_t) { return gv; });
        g.accum_eltwise(b, go, [](T gv, int64_t) { return -gv; });
      }); }

  int mul(int a, int b) {
    return binary("mul", a, b, [](T x, T y) { return x * y; },
      [](GraphT& g, int a, int b, const Tensor& go, const Tensor& va, const Tensor& vb) {
        g.accum_eltwise(a, go, [&](T gv, int64_t i) { return gv * vb[i]; });
        g.accum_eltwise(b, go, [&](T gv, int64_t i) { return gv * va[i]; });
      });
  }

  int div(int a, int b) {
    return binary("div", a, b, [](T x, T y) { return x / y; },
      [](GraphT& g, int a, int b, const Tensor& go, const Tensor& va, const Tensor& vb) {
        g.accum_eltwise(a, go, [&](T gv, int64_t i) { return gv / vb[i]; });
        g.accum_eltwise(b, go, [&](T gv, int64_t i) {
          return -gv * va[i] / (vb[i] * vb[i]);
        });
      });
  }

  /// y = scale * x + shift
  int affine(int x, double scale, double shift = 0.0) {
    const Tensor& vx = nodes_[x].value;
    Tensor out(vx.shape);
    T s = static_cast<T>(scale), c = static_cast<T>(shift);
    for (int64_t i = 0; i < vx.numel(); ++i) out[i] = s * vx[i] + c;
    return push("affine", {x}, std::move(out), nodes_[x].requires_grad,
                [x, s](GraphT& g, int self) {
                  const Tensor& go = g.nodes_[self].grad;
                  g.accum_eltwise(x, go, [&](T gv, int64_t) { return s * gv; });
                });
  }

  /// y = x / s, computed as a true division so the s == 1 case is bitwise
  /// identical to x.
  int div_scalar(int x, double s) {
    check(s != 0.0, "div_scalar: divisor must be non-zero");
    const Tensor& vx = nodes_[x].value;
    Tensor out(vx.shape);
    T sv = static_cast<T>(s);
    for (int64_t i = 0; i < vx.numel(); ++i) out[i] = vx[i] / sv;
    return push("div_scalar", {x}, std::move(out), nodes_[x].requires_grad,
                [x, sv](GraphT& g, int self) {
                  const Tensor& go = g.nodes_[self].grad;
                  g.accum_eltwise(x, go, [&](T gv, int64_t) { return gv / sv; });
                });
  }

  int relu(int x) {
    const Tensor& vx = nodes_[x].value;
    Tensor out(vx.shape);
    for (int64_t i = 0; i < vx.numel(); ++i) out[i] = vx[i] > T(0) ? vx[i] : T(0);
    return push("relu", {x}, std::move(out), nodes_[x].requires_grad,
                [x](GraphT& g, int self) {
                  const Tensor& go = g.nodes_[self].grad;
                  const Tensor& vx = g.nodes_[x].value;
                  g.accum_eltwise(x, go, [&](T gv, int64_t i) {
                    return vx[i] > T(0) ? gv : T(0);
                  });
                });
  }

  int sigmoid(int x) {
    const Tensor& vx = nodes_[x].value;
    Tensor out(vx.shape);
    for (int64_t i = 0; i < vx.numel(); ++i) {
      double v = static_cast<double>(vx[i]);
      double y = v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                        : std::exp(v) / (1.0 + std::exp(v));
      out[i] = static_cast<T>(y);
    }
    int id = push("sigmoid", {x}, std::move(out), nodes_[x].requires_grad,
                  [x](GraphT& g, int self) {
                    const Tensor& go = g.nodes_[self].grad;
                    const Tensor& y = g.nodes_[self].value;
                    g.accum_eltwise(x, go, [&](T gv, int64_t i) {
                      return gv * y[i] * (T(1) - y[i]);
                    });
                  });
    return id;
  }

  /// log(clamp(x, eps, 1)). Gradient is 1/x inside the clamp window and at
  /// the upper boundary, zero below eps.
  int log_clamped(int x, double eps) {
    const Tensor& vx = nodes_[x].value;
    Tensor out(vx.shape);
    T e = static_cast<T>(eps);
    for (int64_t i = 0; i < vx.numel(); ++i) {
      T v = std::min(std::max(vx[i], e), T(1));
      out[i] = static_cast<T>(std::log(static_cast<double>(v)));
    }
    return push("log_clamped", {x}, std::move(out), nodes_[x].requires_grad,
                [x, e](GraphT& g, int self) {
                  const Tensor& go = g.nodes_[self].grad;
                  const Tensor& vx = g.nodes_[x].value;
                  g.accum_eltwise(x, go, [&](T gv, int64_t i) {
                    return (vx[i] >= e && vx[i] <= T(1)) ? gv / vx[i] : T(0);
                  });
                });
  }

  /// Multiply a 4-D tensor with broadcasting: every dim of b must equal the
  /// matching dim of a or be 1. Used for the attention gates (B,C,1,1) and
  /// (B,1,H,W).
  int mul_bcast(int a, int b) {
    const Tensor& va = nodes_[a].value;
    const Tensor& vb = nodes_[b].value;
    check(va.ndim() == 4 && vb.ndim() == 4, "mul_bcast: expects 4-D operands");
    for (int i = 0; i < 4; ++i) {
      check(vb.dim(i) == va.dim(i) || vb.dim(i) == 1,
            "mul_bcast: dim " + std::to_string(i) + " not broadcastable");
    }
    Tensor out(va.shape);
    for_each_bcast(va, vb, [&](int64_t ia, int64_t ib) {
      out[ia] = va[ia] * vb[ib];
    });
    bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
    return push("mul_bcast", {a, b}, std::move(out), rg,
                [a, b](GraphT& g, int self) {
                  const Tensor& go = g.nodes_[self].grad;
                  const Tensor& va = g.nodes_[a].value;
                  const Tensor& vb = g.nodes_[b].value;
                  if (g.needs_grad(a)) {
                    Tensor& ga = g.grad_buf(a);
                    for_each_bcast(va, vb, [&](int64_t ia, int64_t ib) {
                      ga[ia] += go[ia] * vb[ib];
                    });
                  }
                  if (g.needs_grad(b)) {
                    Tensor& gb = g.grad_buf(b);
                    for_each_bcast(va, vb, [&](int64_t ia, int64_t ib) {
                      gb[ib] += go[ia] * va[ia];
                    });
                  }
                });
  }

  // ---- reductions ----------------------------------------------------

  int sum(int x) {
    const Tensor& vx = nodes_[x].value;
    double acc = 0;
    for (int64_t i = 0; i < vx.numel(); ++i) acc += static_cast<double>(vx[i]);
    return push("sum", {x}, Tensor({1}, {static_cast<T>(acc)}),
                nodes_[x].requires_grad, [x](GraphT& g, int self) {
                  T gv = g.nodes_[self].grad[0];
                  if (!g.needs_grad(x)) return;
                  Tensor& gx = g.grad_buf(x);
                  for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += gv;
                });
  }

  int mean(int x) {
    int64_t n = nodes_[x].value.numel();
    return div_scalar(sum(x), static_cast<double>(n));
  }

  // ---- shape ---------------------------------------------------------

  int reshape(int x, std::vector<int> shape) {
    const Tensor& vx = nodes_[x].value;
    check(Tensor::count(shape) == vx.numel(), "reshape: element count mismatch");
    Tensor out(std::move(shape));
    out.data = vx.data;
    return push("reshape", {x}, std::move(out), nodes_[x].requires_grad,
                [x](GraphT& g, int self) {
                  const Tensor& go = g.nodes_[self].grad;
                  g.accum_eltwise(x, go, [](T gv, int64_t) { return gv; });
                });
  }

  int concat_channels(int a, int b) {
    const Tensor& va = nodes_[a].value;
    const Tensor& vb = nodes_[b].value;
    check(va.ndim() == 4 && vb.ndim() == 4, "concat_channels: expects 4-D");
    check(va.dim(0) == vb.dim(0) && va.dim(2) == vb.dim(2) &&
              va.dim(3) == vb.dim(3),
          "concat_channels: batch/spatial dims must match, got " +
              shape_str(va.shape) + " and " + shape_str(vb.shape));
    int B = va.dim(0), Ca = va.dim(1), Cb = vb.dim(1), H = va.dim(2), W = va.dim(3);
    Tensor out({B, Ca + Cb, H, W});
    int64_t plane = static_cast<int64_t>(H) * W;
    for (int bi = 0; bi < B; ++bi) {
      std::memcpy(&out.data[out.idx4(bi, 0, 0, 0)], &va.data[va.idx4(bi, 0, 0, 0)],
                  sizeof(T) * Ca * plane);
      std::memcpy(&out.data[out.idx4(bi, Ca, 0, 0)], &vb.data[vb.idx4(bi, 0, 0, 0)],
                  sizeof(T) * Cb * plane);
    }
    bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
    return push("concat_channels", {a, b}, std::move(out), rg,
                [a, b, B, Ca, Cb, plane](GraphT& g, int self) {
                  const Tensor& go = g.nodes_[self].grad;
                  if (g.needs_grad(a)) {
                    Tensor& ga = g.grad_buf(a);
                    for (int bi = 0; bi < B; ++bi)
                      for (int64_t i = 0; i < Ca * plane; ++i)
                        ga.data[bi * Ca * plane + i] +=
                            go.data[(static_cast<int64_t>(bi) * (Ca + Cb)) * plane + i];
                  }
                  if (g.needs_grad(b)) {
                    Tensor& gb = g.grad_buf(b);
                    for (int bi = 0; bi < B; ++bi)
                      for (int64_t i = 0; i < Cb * plane; ++i)
                        gb.data[bi * Cb * plane + i] +=
                            go.data[(static_cast<int64_t>(bi) * (Ca + Cb) + Ca) * plane + i];
                  }
                });
  }

  /// Channels [c0, c1) of a 4-D tensor.
  int slice_channels(int x, int c0, int c1) {
    const Tensor& vx = nodes_[x].value;
    check(vx.ndim() == 4, "slice_channels: expects 4-D");
    check(0 <= c0 && c0 < c1 && c1 <= vx.dim(1), "slice_channels: bad range");
    int B = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
    int Cs = c1 - c0;
    Tensor out({B, Cs, H, W});
    int64_t plane = static_cast<int64_t>(H) * W;
    for (int bi = 0; bi < B; ++bi)
      std::memcpy(&out.data[out.idx4(bi, 0, 0, 0)], &vx.data[vx.idx4(bi, c0, 0, 0)],
                  sizeof(T) * Cs * plane);
    return push("slice_channels", {x}, std::move(out), nodes_[x].requires_grad,
                [x, c0, B, C, Cs, plane](GraphT& g, int self) {
                  const Tensor& go = g.nodes_[self].grad;
                  if (!g.needs_grad(x)) return;
                  Tensor& gx = g.grad_buf(x);
                  for (int bi = 0; bi < B; ++bi)
                    for (int64_t i = 0; i < Cs * plane; ++i)
                      gx.data[(static_cast<int64_t>(bi) * C + c0) * plane + i] +=
                          go.data[bi * Cs * plane + i];
                });
  }

  // ---- activations over channels --------------------------------------

  /// Per-pixel softmax over the channel axis, max-subtracted for stability.
  int softmax_channel(int x) {
    const Tensor& vx = nodes_[x].value;
    check(vx.ndim() == 4, "softmax_channel: expects 4-D");
    int B = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
    Tensor out(vx.shape);
    int64_t plane = static_cast<int64_t>(H) * W;
    for (int bi = 0; bi < B; ++bi) {
      const T* xb = &vx.data[static_cast<size_t>(bi) * C * plane];
      T* yb = &out.data[static_cast<size_t>(bi) * C * plane];
      for (int64_t p = 0; p < plane; ++p) {
        T m = xb[p];
        for (int c = 1; c < C; ++c) m = std::max(m, xb[c * plane + p]);
        double s = 0;
        for (int c = 0; c < C; ++c) {
          double e = std::exp(static_cast<double>(xb[c * plane + p] - m));
          yb[c * plane + p] = static_cast<T>(e);
          s += e;
        }
        for (int c = 0; c < C; ++c)
          yb[c * plane + p] = static_cast<T>(yb[c * plane + p] / s);
      }
    }
    return push("softmax_channel", {x}, std::move(out), nodes_[x].requires_grad,
                [x, B, C, plane](GraphT& g, int self) {
                  const Tensor& go = g.nodes_[self].grad;
                  const Tensor& y = g.nodes_[self].value;
                  if (!g.needs_grad(x)) return;
                  Tensor& gx = g.grad_buf(x);
                  for (int bi = 0; bi < B; ++bi) {
                    int64_t base = static_cast<int64_t>(bi) * C * plane;
                    for (int64_t p = 0; p < plane; ++p) {
                      double dot = 0;
                      for (int c = 0; c < C; ++c) {
                        int64_t i = base + c * plane + p;
                        dot += static_cast<double>(go[i]) * y[i];
                      }
                      for (int c = 0; c < C; ++c) {
                        int64_t i = base + c * plane + p;
                        gx[i] += y[i] * (go[i] - static_cast<T>(dot));
                      }
                    }
                  }
                });
  }

  // ---- conv / linear ---------------------------------------------------

  int conv2d(int x, int w, int b, int padding, int stride) {
    const Tensor& vx = nodes_[x].value;
    const Tensor& vw = nodes_[w].value;
    const Tensor& vb = nodes_[b].value;
    check(vx.ndim() == 4, "conv2d: input must be 4-D, got " + shape_str(vx.shape));
    check(vw.ndim() == 4, "conv2d: weight must be 4-D");
    check(vw.dim(1) == vx.dim(1),
          "conv2d: input channels " + std::to_string(vx.dim(1)) +
              " do not match weight channels " + std::to_string(vw.dim(1)));
    check(vb.ndim() == 1 && vb.dim(0) == vw.dim(0), "conv2d: bias shape mismatch");
    int kh = vw.dim(2), kw = vw.dim(3);
    check(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel dims must be odd");
    check(stride >= 1, "conv2d: stride must be >= 1");
    check(padding >= 0, "conv2d: padding must be >= 0");
    int B = vx.dim(0), Cin = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
    int Cout = vw.dim(0);
    int Ho = (H + 2 * padding - kh) / stride + 1;
    int Wo = (W + 2 * padding - kw) / stride + 1;
    check(H + 2 * padding >= kh && W + 2 * padding >= kw && Ho >= 1 && Wo >= 1,
          "conv2d: kernel larger than padded input");

    Tensor out({B, Cout, Ho, Wo});
    int K = Cin * kh * kw;
    int64_t N = static_cast<int64_t>(Ho) * Wo;
    ConvDims d{B, Cin, H, W, Cout, kh, kw, padding, stride, Ho, Wo};

    parallel_for(B, [&](int64_t b0, int64_t b1) {
      std::vector<T> col;
      for (int64_t bi = b0; bi < b1; ++bi) {
        const T* xb = &vx.data[static_cast<size_t>(bi) * Cin * H * W];
        T* yb = &out.data[static_cast<size_t>(bi) * Cout * N];
        for (int co = 0; co < Cout; ++co)
          std::fill(yb + co * N, yb + (co + 1) * N, vb[co]);
        for_each_row_tile(d, [&](int oh0, int oh1) {
          int64_t tn = static_cast<int64_t>(oh1 - oh0) * Wo;
          col.assign(static_cast<size_t>(K) * tn, T(0));
          im2col(d, xb, oh0, oh1, col.data());
          if (tn == N) {  // single tile: accumulate straight into the output
            detail::gemm_acc(Cout, static_cast<int>(tn), K, vw.data.data(),
                             col.data(), yb);
            return;
          }
          std::vector<T> tile(static_cast<size_t>(Cout) * tn, T(0));
          detail::gemm_acc(Cout, static_cast<int>(tn), K, vw.data.data(),
                           col.data(), tile.data());
          for (int co = 0; co < Cout; ++co)
            for (int64_t i = 0; i < tn; ++i)
              yb[co * N + oh0 * Wo + i] += tile[co * tn + i];
        });
      }
    });

    bool rg = nodes_[x].requires_grad || nodes_[w].requires_grad ||
              nodes_[b].requires_grad;
    return push("conv2d", {x, w, b}, std::move(out), rg,
                [x, w, b, d, K, N](GraphT& g, int self) {
                  g.conv2d_backward(self, x, w, b, d, K, N);
                });
  }

  int linear(int x, int w, int b) {
    const Tensor& vx = nodes_[x].value;
    const Tensor& vw = nodes_[w].value;
    const Tensor& vb = nodes_[b].value;
    check(vx.ndim() == 2 && vw.ndim() == 2 && vb.ndim() == 1,
          "linear: expects x[B,Din], w[Dout,Din], b[Dout]");
    check(vx.dim(1) == vw.dim(1),
          "linear: input dim " + std::to_string(vx.dim(1)) +
              " does not match weight dim " + std::to_string(vw.dim(1)));
    check(vb.dim(0) == vw.dim(0), "linear: bias shape mismatch");
    int B = vx.dim(0), Din = vx.dim(1), Dout = vw.dim(0);
    Tensor out({B, Dout});
    for (int bi = 0; bi < B; ++bi)
      for (int o = 0; o < Dout; ++o) out.at2(bi, o) = vb[o];
    detail::gemm_abt(B, Dout, Din, vx.data.data(), vw.data.data(),
                     out.data.data());
    bool rg = nodes_[x].requires_grad || nodes_[w].requires_grad ||
              nodes_[b].requires_grad;
    return push("linear", {x, w, b}, std::move(out), rg,
                [x, w, b, B, Din, Dout](GraphT& g, int self) {
                  const Tensor& go = g.nodes_[self].grad;
                  const Tensor& vx = g.nodes_[x].value;
                  const Tensor& vw = g.nodes_[w].value;
                  if (g.needs_grad(x)) {
                    detail::gemm_acc(B, Din, Dout, go.data.data(),
                                     vw.data.data(), g.grad_buf(x).data.data());
                  }
                  if (g.needs_grad(w)) {
                    detail::gemm_atb(Dout, Din, B, go.data.data(),
                                     vx.data.data(), g.grad_buf(w).data.data());
                  }
                  if (g.needs_grad(b)) {
                    Tensor& gb = g.grad_buf(b);
                    for (int bi = 0; bi < B; ++bi)
                      for (int o = 0; o < Dout; ++o) gb[o] += go.at2(bi, o);
                  }
                });
  }

  // ---- pooling / resampling -------------------------------------------

  int max_pool2d(int x, int k, int stride) {
    const Tensor& vx = nodes_[x].value;
    check(vx.ndim() == 4, "max_pool2d: expects 4-D");
    int B = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
    check(k >= 1 && k <= H && k <= W,
          "max_pool2d: window " + std::to_string(k) + " exceeds input " +
              shape_str(vx.shape));
    check(stride >= 1, "max_pool2d: stride must be >= 1");
    int Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
    Tensor out({B, C, Ho, Wo});
    auto arg = std::make_shared<std::vector<int32_t>>(
        static_cast<size_t>(B) * C * Ho * Wo);
    int64_t planes = static_cast<int64_t>(B) * C;
    parallel_for(planes, [&](int64_t p0, int64_t p1) {
      for (int64_t p = p0; p < p1; ++p) {
        const T* xp = &vx.data[static_cast<size_t>(p) * H * W];
        T* yp = &out.data[static_cast<size_t>(p) * Ho * Wo];
        int32_t* ap = &(*arg)[static_cast<size_t>(p) * Ho * Wo];
        for (int oh = 0; oh < Ho; ++oh)
          for (int ow = 0; ow < Wo; ++ow) {
            int h0 = oh * stride, w0 = ow * stride;
            T best = xp[h0 * W + w0];
            int32_t bi = h0 * W + w0;
            for (int i = 0; i < k; ++i)
              for (int j = 0; j < k; ++j) {
                T v = xp[(h0 + i) * W + w0 + j];
                if (v > best) {  // first occurrence wins ties
                  best = v;
                  bi = (h0 + i) * W + w0 + j;
                }
              }
            yp[oh * Wo + ow] = best;
            ap[oh * Wo + ow] = bi;
          }
      }
    });
    return push("max_pool2d", {x}, std::move(out), nodes_[x].requires_grad,
                [x, arg, B, C, H, W, Ho, Wo](GraphT& g, int self) {
                  const Tensor& go = g.nodes_[self].grad;
                  if (!g.needs_grad(x)) return;
                  Tensor& gx = g.grad_buf(x);
                  int64_t planes = static_cast<int64_t>(B) * C;
                  parallel_for(planes, [&](int64_t p0, int64_t p1) {
                    for (int64_t p = p0; p < p1; ++p) {
                      const T* gop = &go.data[static_cast<size_t>(p) * Ho * Wo];
                      T* gxp = &gx.data[static_cast<size_t>(p) * H * W];
                      const int32_t* ap = &(*arg)[static_cast<size_t>(p) * Ho * Wo];
                      for (int64_t i = 0; i < static_cast<int64_t>(Ho) * Wo; ++i)
                        gxp[ap[i]] += gop[i];
                    }
                  });
                });
  }

  /// Reduce over all spatial positions, per channel -> [B,C,1,1].
  int spatial_pool(int x, PoolMode mode) {
    const Tensor& vx = nodes_[x].value;
    check(vx.ndim() == 4, "spatial_pool: expects 4-D");
    int B = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
    int64_t plane = static_cast<int64_t>(H) * W;
    Tensor out({B, C, 1, 1});
    auto arg = std::make_shared<std::vector<int32_t>>();
    if (mode == PoolMode::kMax) arg->resize(static_cast<size_t>(B) * C);
    for (int64_t p = 0; p < static_cast<int64_t>(B) * C; ++p) {
      const T* xp = &vx.data[static_cast<size_t>(p) * plane];
      if (mode == PoolMode::kAvg) {
        double s = 0;
        for (int64_t i = 0; i < plane; ++i) s += static_cast<double>(xp[i]);
        out[p] = static_cast<T>(s / static_cast<double>(plane));
      } else {
        T best = xp[0];
        int32_t bi = 0;
        for (int64_t i = 1; i < plane; ++i)
          if (xp[i] > best) { best = xp[i]; bi = static_cast<int32_t>(i); }
        out[p] = best;
        (*arg)[p] = bi;
      }
    }
    return push("spatial_pool", {x}, std::move(out), nodes_[x].requires_grad,
                [x, arg, mode, plane](GraphT& g, int self) {
                  const Tensor& go = g.nodes_[self].grad;
                  if (!g.needs_grad(x)) return;
                  Tensor& gx = g.grad_buf(x);
                  int64_t nplanes = go.numel();
                  for (int64_t p = 0; p < nplanes; ++p) {
                    T* gxp = &gx.data[static_cast<size_t>(p) * plane];
                    if (mode == PoolMode::kAvg) {
                      T gv = go[p] / static_cast<T>(plane);
                      for (int64_t i = 0; i < plane; ++i) gxp[i] += gv;
                    } else {
                      gxp[(*arg)[p]] += go[p];
                    }
                  }
                });
  }

  /// Reduce across channels, per pixel -> [B,1,H,W].
  int channel_pool(int x, PoolMode mode) {
    const Tensor& vx = nodes_[x].value;
    check(vx.ndim() == 4, "channel_pool: expects 4-D");
    int B = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
    int64_t plane = static_cast<int64_t>(H) * W;
    Tensor out({B, 1, H, W});
    auto arg = std::make_shared<std::vector<int32_t>>();
    if (mode == PoolMode::kMax) arg->resize(static_cast<size_t>(B) * plane);
    for (int bi = 0; bi < B; ++bi) {
      const T* xb = &vx.data[static_cast<size_t>(bi) * C * plane];
      T* yb = &out.data[static_cast<size_t>(bi) * plane];
      for (int64_t p = 0; p < plane; ++p) {
        if (mode == PoolMode::kAvg) {
          double s = 0;
          for (int c = 0; c < C; ++c) s += static_cast<double>(xb[c * plane + p]);
          yb[p] = static_cast<T>(s / C);
        } else {
          T best = xb[p];
          int32_t bc = 0;
          for (int c = 1; c < C; ++c)
            if (xb[c * plane + p] > best) { best = xb[c * plane + p]; bc = c; }
          yb[p] = best;
          (*arg)[bi * plane + p] = bc;
        }
      }
    }
    return push("channel_pool", {x}, std::move(out), nodes_[x].requires_grad,
                [x, arg, mode, C, plane](GraphT& g, int self) {
                  const Tensor& go = g.nodes_[self].grad;
                  if (!g.needs_grad(x)) return;
                  Tensor& gx = g.grad_buf(x);
                  int B = go.dim(0);
                  for (int bi = 0; bi < B; ++bi) {
                    const T* gob = &go.data[static_cast<size_t>(bi) * plane];
                    T* gxb = &gx.data[static_cast<size_t>(bi) * C * plane];
                    for (int64_t p = 0; p < plane; ++p) {
                      if (mode == PoolMode::kAvg) {
                        T gv = gob[p] / static_cast<T>(C);
                        for (int c = 0; c < C; ++c) gxb[c * plane + p] += gv;
                      } else {
                        gxb[(*arg)[bi * plane + p] * plane + p] += gob[p];
                      }
                    }
                  }
                });
  }

  int upsample_nearest(int x, int factor) {
    const Tensor& vx = nodes_[x].value;
    check(vx.ndim() == 4, "upsample_nearest: expects 4-D");
    check(factor >= 1, "upsample_nearest: factor must be >= 1");
    if (factor == 1) return x;
    int B = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
    int Ho = H * factor, Wo = W * factor;
    Tensor out({B, C, Ho, Wo});
    int64_t planes = static_cast<int64_t>(B) * C;
    parallel_for(planes, [&](int64_t p0, int64_t p1) {
      for (int64_t p = p0; p < p1; ++p) {
        const T* xp = &vx.data[static_cast<size_t>(p) * H * W];
        T* yp = &out.data[static_cast<size_t>(p) * Ho * Wo];
        for (int oh = 0; oh < Ho; ++oh) {
          const T* row = xp + (oh / factor) * W;
          for (int ow = 0; ow < Wo; ++ow) yp[oh * Wo + ow] = row[ow / factor];
        }
      }
    });
    return push("upsample_nearest", {x}, std::move(out), nodes_[x].requires_grad,
                [x, factor, H, W, Ho, Wo](GraphT& g, int self) {
                  const Tensor& go = g.nodes_[self].grad;
                  if (!g.needs_grad(x)) return;
                  Tensor& gx = g.grad_buf(x);
                  int64_t planes = static_cast<int64_t>(go.dim(0)) * go.dim(1);
                  parallel_for(planes, [&](int64_t p0, int64_t p1) {
                    for (int64_t p = p0; p < p1; ++p) {
                      const T* gop = &go.data[static_cast<size_t>(p) * Ho * Wo];
                      T* gxp = &gx.data[static_cast<size_t>(p) * H * W];
                      for (int oh = 0; oh < Ho; ++oh)
                        for (int ow = 0; ow < Wo; ++ow)
                          gxp[(oh / factor) * W + ow / factor] += gop[oh * Wo + ow];
                    }
                  });
                });
  }

  // ---- stochastic layers ------------------------------------------------

  /// Inverted dropout: zero with probability `rate`, survivors scaled by
  /// 1/(1-rate). Identity in eval mode or at rate 0.
  int dropout(int x, double rate, Rng& rng, bool training) {
    check(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0,1)");
    if (!training || rate == 0.0) return x;
    const Tensor& vx = nodes_[x].value;
    auto mask = std::make_shared<std::vector<T>>(vx.data.size());
    T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    Tensor out(vx.shape);
    for (int64_t i = 0; i < vx.numel(); ++i) {
      T m = rng.bernoulli(rate) ? T(0) : keep_scale;
      (*mask)[static_cast<size_t>(i)] = m;
      out[i] = vx[i] * m;
    }
    return push("dropout", {x}, std::move(out), nodes_[x].requires_grad,
                [x, mask](GraphT& g, int self) {
                  const Tensor& go = g.nodes_[self].grad;
                  g.accum_eltwise(x, go, [&](T gv, int64_t i) {
                    return gv * (*mask)[static_cast<size_t>(i)];
                  });
                });
  }

  /// Multiplicative uniform feature noise: x + x .* U(-amplitude, amplitude).
  /// Identity in eval mode or at amplitude 0.
  int feature_noise(int x, double amplitude, Rng& rng, bool training) {
    check(amplitude >= 0.0, "feature_noise: amplitude must be >= 0");
    if (!training || amplitude == 0.0) return x;
    const Tensor& vx = nodes_[x].value;
    auto factor = std::make_shared<std::vector<T>>(vx.data.size());
    Tensor out(vx.shape);
    for (int64_t i = 0; i < vx.numel(); ++i) {
      T f = static_cast<T>(1.0 + rng.uniform(-amplitude, amplitude));
      (*factor)[static_cast<size_t>(i)] = f;
      out[i] = vx[i] * f;
    }
    return push("feature_noise", {x}, std::move(out), nodes_[x].requires_grad,
                [x, factor](GraphT& g, int self) {
                  const Tensor& go = g.nodes_[self].grad;
                  g.accum_eltwise(x, go, [&](T gv, int64_t i) {
                    return gv * (*factor)[static_cast<size_t>(i)];
                  });
                });
  }

  // ---- backward ----------------------------------------------------------

  /// Reverse traversal from a scalar loss. Fills gradients for every node
  /// with requires_grad reachable from the loss; detached nodes contribute
  /// nothing upstream.
  void backward(int loss) {
    check(loss >= 0 && loss < size(), "backward: bad node id");
    check(nodes_[loss].value.numel() == 1,
          "backward: loss must be a scalar, got shape " +
              shape_str(nodes_[loss].value.shape));
    if (!nodes_[loss].requires_grad) return;
    grad_buf(loss)[0] += T(1);
    for (int id = loss; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, id);
    }
  }

  // Internal helpers used by op closures; public so lambdas can reach them.

  bool needs_grad(int id) const { return nodes_[id].requires_grad; }

  Tensor& grad_buf(int id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape);
    return n.grad;
  }

  template <class F>
  void accum_eltwise(int id, const Tensor& go, F&& f) {
    if (!needs_grad(id)) return;
    Tensor& g = grad_buf(id);
    for (int64_t i = 0; i < go.numel(); ++i) g[i] += f(go[i], i);
  }

 private:
  struct ConvDims {
    int B, Cin, H, W, Cout, kh, kw, pad, stride, Ho, Wo;
  };

  // Tiles output rows so the im2col buffer stays modest for large windows.
  template <class F>
  static void for_each_row_tile(const ConvDims& d, F&& f) {
    int rows_per_tile = std::max<int>(1, 16384 / std::max(1, d.Wo));
    for (int oh0 = 0; oh0 < d.Ho; oh0 += rows_per_tile)
      f(oh0, std::min(d.Ho, oh0 + rows_per_tile));
  }

  static void im2col(const ConvDims& d, const T* xb, int oh0, int oh1, T* col) {
    int64_t tn = static_cast<int64_t>(oh1 - oh0) * d.Wo;
    for (int ci = 0; ci < d.Cin; ++ci)
      for (int i = 0; i < d.kh; ++i)
        for (int j = 0; j < d.kw; ++j) {
          T* row = col + (static_cast<int64_t>(ci) * d.kh * d.kw +
                          static_cast<int64_t>(i) * d.kw + j) * tn;
          for (int oh = oh0; oh < oh1; ++oh) {
            int ih = oh * d.stride - d.pad + i;
            T* dst = row + static_cast<int64_t>(oh - oh0) * d.Wo;
            if (ih < 0 || ih >= d.H) continue;  // row pre-zeroed
            const T* src = xb + (static_cast<int64_t>(ci) * d.H + ih) * d.W;
            for (int ow = 0; ow < d.Wo; ++ow) {
              int iw = ow * d.stride - d.pad + j;
              if (iw >= 0 && iw < d.W) dst[ow] = src[iw];
            }
          }
        }
  }

  void conv2d_backward(int self, int x, int w, int b, ConvDims d, int K,
                       int64_t N) {
    const Tensor& go = nodes_[self].grad;
    const Tensor& vx = nodes_[x].value;
    const Tensor& vw = nodes_[w].value;
    bool need_dx = needs_grad(x), need_dw = needs_grad(w), need_db = needs_grad(b);
    Tensor* gx = need_dx ? &grad_buf(x) : nullptr;
    std::vector<std::vector<T>> dw_parts;
    if (need_dw) dw_parts.assign(static_cast<size_t>(d.B), {});

    parallel_for(d.B, [&](int64_t b0, int64_t b1) {
      std::vector<T> col, dcol;
      for (int64_t bi = b0; bi < b1; ++bi) {
        const T* gob = &go.data[static_cast<size_t>(bi) * d.Cout * N];
        const T* xb = &vx.data[static_cast<size_t>(bi) * d.Cin * d.H * d.W];
        std::vector<T>* dwp = nullptr;
        if (need_dw) {
          dw_parts[static_cast<size_t>(bi)].assign(vw.data.size(), T(0));
          dwp = &dw_parts[static_cast<size_t>(bi)];
        }
        for_each_row_tile(d, [&](int oh0, int oh1) {
          int64_t tn = static_cast<int64_t>(oh1 - oh0) * d.Wo;
          const T* gtile = gob;
          std::vector<T> gcopy;  // strided tile of go columns
          if (tn != N) {
            gcopy.resize(static_cast<size_t>(d.Cout) * tn);
            for (int co = 0; co < d.Cout; ++co)
              std::memcpy(&gcopy[static_cast<size_t>(co) * tn],
                          gob + co * N + static_cast<int64_t>(oh0) * d.Wo,
                          sizeof(T) * tn);
            gtile = gcopy.data();
          }
          if (need_dw) {
            col.assign(static_cast<size_t>(K) * tn, T(0));
            im2col(d, xb, oh0, oh1, col.data());
            detail::gemm_abt(d.Cout, K, static_cast<int>(tn), gtile,
                             col.data(), dwp->data());
          }
          if (need_dx) {
            dcol.assign(static_cast<size_t>(K) * tn, T(0));
            detail::gemm_atb(K, static_cast<int>(tn), d.Cout, vw.data.data(),
                             gtile, dcol.data());
            T* gxb = &gx->data[static_cast<size_t>(bi) * d.Cin * d.H * d.W];
            col2im(d, dcol.data(), oh0, oh1, gxb);
          }
        });
      }
    });

    if (need_dw) {
      Tensor& gw = grad_buf(w);
      for (int bi = 0; bi < d.B; ++bi) {
        const std::vector<T>& part = dw_parts[static_cast<size_t>(bi)];
        for (size_t i = 0; i < part.size(); ++i) gw.data[i] += part[i];
      }
    }
    if (need_db) {
      Tensor& gb = grad_buf(b);
      for (int bi = 0; bi < d.B; ++bi) {
        const T* gob = &go.data[static_cast<size_t>(bi) * d.Cout * N];
        for (int co = 0; co < d.Cout; ++co) {
          double s = 0;
          for (int64_t i = 0; i < N; ++i)
            s += static_cast<double>(gob[co * N + i]);
          gb[co] += static_cast<T>(s);
        }
      }
    }
  }

  static void col2im(const ConvDims& d, const T* dcol, int oh0, int oh1,
                     T* gxb) {
    int64_t tn = static_cast<int64_t>(oh1 - oh0) * d.Wo;
    for (int ci = 0; ci < d.Cin; ++ci)
      for (int i = 0; i < d.kh; ++i)
        for (int j = 0; j < d.kw; ++j) {
          const T* row = dcol + (static_cast<int64_t>(ci) * d.kh * d.kw +
                                 static_cast<int64_t>(i) * d.kw + j) * tn;
          for (int oh = oh0; oh < oh1; ++oh) {
            int ih = oh * d.stride - d.pad + i;
            if (ih < 0 || ih >= d.H) continue;
            T* dst = gxb + (static_cast<int64_t>(ci) * d.H + ih) * d.W;
            const T* src = row + static_cast<int64_t>(oh - oh0) * d.Wo;
            for (int ow = 0; ow < d.Wo; ++ow) {
              int iw = ow * d.stride - d.pad + j;
              if (iw >= 0 && iw < d.W) dst[iw] += src[ow];
            }
          }
        }
  }

  // Iterates (full_index, broadcast_index) pairs for a 4-D broadcast in
  // row-major order of the full tensor.
  template <class F>
  static void for_each_bcast(const Tensor& full, const Tensor& small, F&& f) {
    int B = full.dim(0), C = full.dim(1), H = full.dim(2), W = full.dim(3);
    int64_t ss[4];
    int64_t acc = 1;
    for (int i = 3; i >= 0; --i) {
      ss[i] = small.dim(i) == 1 ? 0 : acc;
      acc *= small.dim(i);
    }
    int64_t ia = 0;
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < H; ++h) {
          int64_t base = b * ss[0] + c * ss[1] + h * ss[2];
          for (int w = 0; w < W; ++w, ++ia) f(ia, base + w * ss[3]);
        }
  }

  template <class Fwd, class Bwd>
  int binary(const char* op, int a, int b, Fwd&& f, Bwd&& bw) {
    const Tensor& va = nodes_[a].value;
    const Tensor& vb = nodes_[b].value;
    check(va.same_shape(vb), std::string(op) + ": shape mismatch " +
                                 shape_str(va.shape) + " vs " +
                                 shape_str(vb.shape));
    Tensor out(va.shape);
    for (int64_t i = 0; i < va.numel(); ++i) out[i] = f(va[i], vb[i]);
    bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
    return push(op, {a, b}, std::move(out), rg,
                [a, b, bw](GraphT& g, int self) {
                  const Tensor& go = g.nodes_[self].grad;
                  bw(g, a, b, go, g.nodes_[a].value, g.nodes_[b].value);
                });
  }

  int push(const char* op, std::vector<int> inputs, Tensor value, bool rg,
           std::function<void(GraphT&, int)> bw) {
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    n.requires_grad = rg;
    if (rg) n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
};

using Graph = GraphT<float>;
using Graph64 = GraphT<double>;

}  // namespace cdma
