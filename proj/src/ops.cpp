#include "max360iq/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include <Eigen/Core>

#include "max360iq/errors.hpp"

namespace max360iq::nd {

using ad::make_result;
using ad::Node;

namespace {

double g_gelu_backward_scale = 1.0;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMat = Eigen::Map<RowMatrix>;
using ConstRowMat = Eigen::Map<const RowMatrix>;

[[noreturn]] void shape_error(const char* op, const std::string& what) {
  throw PreconditionError(std::string(op) + ": " + what);
}

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape())
    shape_error(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_rank(const char* op, const Var& x, std::size_t rank) {
  if (x.shape().size() != rank)
    shape_error(op, "expected rank " + std::to_string(rank) + ", got " + shape_str(x.shape()));
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

bool wants(Node& self, std::size_t i) {
  return i < self.parents.size() && self.parents[i]->requires_grad;
}

// Elementwise unary op given f(x) and f'(x, y).
template <class F, class D>
Var unary(const Var& x, const char* name, F f, D df) {
  Tensor out(x.shape());
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(xv[i]);
  return make_result(std::move(out), {x},
                     [df](Node& self) {
                       Node& p = parent(self, 0);
                       Tensor& gx = p.grad_buffer();
                       for (std::size_t i = 0; i < gx.numel(); ++i)
                         gx[i] += self.grad[i] * df(p.value[i], self.value[i]);
                     },
                     name);
}

}  // namespace

namespace test_hooks {
void set_gelu_backward_scale(double factor) { g_gelu_backward_scale = factor; }
}  // namespace test_hooks

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result(std::move(out), {a, b},
                     [](Node& self) {
                       for (std::size_t k = 0; k < 2; ++k) {
                         if (!wants(self, k)) continue;
                         Tensor& g = parent(self, k).grad_buffer();
                         for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
                       }
                     },
                     "add");
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_result(std::move(out), {a, b},
                     [](Node& self) {
                       if (wants(self, 0)) {
                         Tensor& g = parent(self, 0).grad_buffer();
                         for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
                       }
                       if (wants(self, 1)) {
                         Tensor& g = parent(self, 1).grad_buffer();
                         for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
                       }
                     },
                     "sub");
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result(std::move(out), {a, b},
                     [](Node& self) {
                       Node& pa = parent(self, 0);
                       Node& pb = parent(self, 1);
                       if (pa.requires_grad) {
                         Tensor& g = pa.grad_buffer();
                         for (std::size_t i = 0; i < g.numel(); ++i)
                           g[i] += self.grad[i] * pb.value[i];
                       }
                       if (pb.requires_grad) {
                         Tensor& g = pb.grad_buffer();
                         for (std::size_t i = 0; i < g.numel(); ++i)
                           g[i] += self.grad[i] * pa.value[i];
                       }
                     },
                     "mul");
}

Var add_tiled(const Var& x, const Var& y) {
  const std::size_t n = x.numel(), m = y.numel();
  if (m == 0 || n % m != 0)
    shape_error("add_tiled", shape_str(y.shape()) + " does not tile " + shape_str(x.shape()));
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i) out[i] = x.value()[i] + y.value()[i % m];
  return make_result(std::move(out), {x, y},
                     [m](Node& self) {
                       if (wants(self, 0)) {
                         Tensor& g = parent(self, 0).grad_buffer();
                         for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
                       }
                       if (wants(self, 1)) {
                         Tensor& g = parent(self, 1).grad_buffer();
                         for (std::size_t i = 0; i < self.grad.numel(); ++i)
                           g[i % m] += self.grad[i];
                       }
                     },
                     "add_tiled");
}

Var mul_tiled(const Var& x, const Var& y) {
  const std::size_t n = x.numel(), m = y.numel();
  if (m == 0 || n % m != 0)
    shape_error("mul_tiled", shape_str(y.shape()) + " does not tile " + shape_str(x.shape()));
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i) out[i] = x.value()[i] * y.value()[i % m];
  return make_result(std::move(out), {x, y},
                     [m](Node& self) {
                       Node& px = parent(self, 0);
                       Node& py = parent(self, 1);
                       if (px.requires_grad) {
                         Tensor& g = px.grad_buffer();
                         for (std::size_t i = 0; i < g.numel(); ++i)
                           g[i] += self.grad[i] * py.value[i % m];
                       }
                       if (py.requires_grad) {
                         Tensor& g = py.grad_buffer();
                         for (std::size_t i = 0; i < self.grad.numel(); ++i)
                           g[i % m] += self.grad[i] * px.value[i];
                       }
                     },
                     "mul_tiled");
}

Var scale(const Var& x, double c) {
  return unary(x, "scale", [c](double v) { return c * v; },
               [c](double, double) { return c; });
}

Var shift(const Var& x, double c) {
  return unary(x, "shift", [c](double v) { return v + c; },
               [](double, double) { return 1.0; });
}

Var relu(const Var& x) {
  return unary(x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var gelu(const Var& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary(
      x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        return g_gelu_backward_scale * (cdf + v * pdf);
      });
}

Var sigmoid(const Var& x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& x) {
  return unary(x, "tanh", [](double v) { return std::tanh(v); },
               [](double, double y) { return 1.0 - y * y; });
}

Var softplus(const Var& x) {
  return unary(
      x, "softplus",
      [](double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); },
      [](double v, double) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      });
}

Var abs(const Var& x) {
  return unary(x, "abs", [](double v) { return std::abs(v); },
               [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var pow(const Var& x, double p) {
  const bool integral = std::floor(p) == p;
  if (!integral)
    for (double v : x.value().data())
      if (v < 0.0) shape_error("pow", "negative base with non-integer exponent");
  return unary(
      x, "pow", [p](double v) { return std::pow(v, p); },
      [p](double v, double) {
        if (p == 0.0) return 0.0;
        if (p == 1.0) return 1.0;
        if (v == 0.0) return p > 1.0 ? 0.0 : HUGE_VAL;
        return p * std::pow(v, p - 1.0);
      });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return make_result(Tensor::scalar(s), {x},
                     [](Node& self) {
                       Tensor& g = parent(self, 0).grad_buffer();
                       const double gs = self.grad[0];
                       for (std::size_t i = 0; i < g.numel(); ++i) g[i] += gs;
                     },
                     "sum");
}

Var mean(const Var& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Var mean_axis(const Var& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) shape_error("mean_axis", "axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t a = s[axis];
  Shape os;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) os.push_back(s[i]);
  if (os.empty()) os.push_back(1);
  Tensor out(os, 0.0);
  const double inv = 1.0 / static_cast<double>(a);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < a; ++k)
      for (std::size_t i = 0; i < inner; ++i)
        out[o * inner + i] += x.value()[(o * a + k) * inner + i] * inv;
  return make_result(std::move(out), {x},
                     [outer, a, inner, inv](Node& self) {
                       Tensor& g = parent(self, 0).grad_buffer();
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t k = 0; k < a; ++k)
                           for (std::size_t i = 0; i < inner; ++i)
                             g[(o * a + k) * inner + i] += self.grad[o * inner + i] * inv;
                     },
                     "mean_axis");
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_result(std::move(out), {x},
                     [](Node& self) {
                       Tensor& g = parent(self, 0).grad_buffer();
                       for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
                     },
                     "reshape");
}

Var gather(const Var& x, std::shared_ptr<const std::vector<std::size_t>> index, Shape shape) {
  if (shape_numel(shape) != index->size())
    shape_error("gather", "index length does not match " + shape_str(shape));
  const std::size_t n = x.numel();
  Tensor out(std::move(shape));
  for (std::size_t i = 0; i < index->size(); ++i) {
    const std::size_t j = (*index)[i];
    if (j >= n) shape_error("gather", "index out of range");
    out[i] = x.value()[j];
  }
  return make_result(std::move(out), {x},
                     [index](Node& self) {
                       Tensor& g = parent(self, 0).grad_buffer();
                       for (std::size_t i = 0; i < index->size(); ++i)
                         g[(*index)[i]] += self.grad[i];
                     },
                     "gather");
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) shape_error("concat", "no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) shape_error("concat", "axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i)
      if (i != axis && s[i] != s0[i]) ok = false;
    if (!ok) shape_error("concat", "incompatible " + shape_str(s) + " vs " + shape_str(s0));
    extents.push_back(s[axis]);
    total += s[axis];
  }
  Shape os = s0;
  os[axis] = total;
  Tensor out(os);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    const std::size_t block = extents[k] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.ptr() + o * block, block, out.ptr() + o * total * inner + offset * inner);
    offset += extents[k];
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return make_result(std::move(out), ps,
                     [extents, outer, inner, total](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < extents.size(); ++k) {
                         const std::size_t block = extents[k] * inner;
                         if (wants(self, k)) {
                           Tensor& g = parent(self, k).grad_buffer();
                           for (std::size_t o = 0; o < outer; ++o) {
                             const double* src = self.grad.ptr() + o * total * inner + off * inner;
                             double* dst = g.ptr() + o * block;
                             for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                           }
                         }
                         off += extents[k];
                       }
                     },
                     "concat");
}

Var slice(const Var& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (axis >= s.size() || begin >= end || end > s[axis])
    shape_error("slice", "bad range on " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  auto idx = std::make_shared<std::vector<std::size_t>>();
  idx->reserve(outer * (end - begin) * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = begin; k < end; ++k)
      for (std::size_t i = 0; i < inner; ++i) idx->push_back((o * s[axis] + k) * inner + i);
  Shape os = s;
  os[axis] = end - begin;
  return gather(x, std::move(idx), std::move(os));
}

Var linear(const Var& x, const Var& w, const Var& b) {
  require_rank("linear", w, 2);
  const std::size_t dout = w.shape()[0], din = w.shape()[1];
  if (x.shape().back() != din)
    shape_error("linear", "input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  if (b && (b.shape().size() != 1 || b.shape()[0] != dout))
    shape_error("linear", "bias " + shape_str(b.shape()) + " vs weight " + shape_str(w.shape()));
  const std::size_t rows = x.numel() / din;
  Shape os = x.shape();
  os.back() = dout;
  Tensor out(os);
  const double* xp = x.value().ptr();
  const double* wp = w.value().ptr();
  // Accumulate over i into a whole output row so the inner loop runs across
  // outputs; each output still sums in the order b, x0*w0, x1*w1, ...
  std::vector<double> wt(din * dout);
  for (std::size_t o = 0; o < dout; ++o)
    for (std::size_t i = 0; i < din; ++i) wt[i * dout + o] = wp[o * din + i];
  for (std::size_t m = 0; m < rows; ++m) {
    const double* xr = xp + m * din;
    double* orow = out.ptr() + m * dout;
    if (b)
      for (std::size_t o = 0; o < dout; ++o) orow[o] = b.value()[o];
    for (std::size_t i = 0; i < din; ++i) {
      const double xi = xr[i];
      const double* wr = wt.data() + i * dout;
      for (std::size_t o = 0; o < dout; ++o) orow[o] += xi * wr[o];
    }
  }
  std::vector<Var> ps{x, w};
  if (b) ps.push_back(b);
  return make_result(std::move(out), ps,
                     [rows, din, dout](Node& self) {
                       Node& px = parent(self, 0);
                       Node& pw = parent(self, 1);
                       const double* g = self.grad.ptr();
                       // Gradients go through Eigen's GEMM. Its blocking is fixed by
                       // the shapes, so repeated runs stay bitwise identical.
                       const ConstRowMat G(g, rows, dout);
                       if (px.requires_grad) {
                         RowMat gx(px.grad_buffer().ptr(), rows, din);
                         gx.noalias() += G * ConstRowMat(pw.value.ptr(), dout, din);
                       }
                       if (pw.requires_grad) {
                         RowMat gw(pw.grad_buffer().ptr(), dout, din);
                         gw.noalias() += G.transpose() * ConstRowMat(px.value.ptr(), rows, din);
                       }
                       if (wants(self, 2)) {
                         double* gb = parent(self, 2).grad_buffer().ptr();
                         for (std::size_t m = 0; m < rows; ++m)
                           for (std::size_t o = 0; o < dout; ++o) gb[o] += g[m * dout + o];
                       }
                     },
                     "linear");
}

Var matmul(const Var& a, const Var& b) {
  require_rank("matmul", a, 3);
  require_rank("matmul", b, 3);
  const std::size_t B = a.shape()[0], M = a.shape()[1], K = a.shape()[2], N = b.shape()[2];
  if (b.shape()[0] != B || b.shape()[1] != K)
    shape_error("matmul", shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor out({B, M, N}, 0.0);
  const double* ap = a.value().ptr();
  const double* bp = b.value().ptr();
  double* op = out.ptr();
  for (std::size_t t = 0; t < B; ++t)
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t k = 0; k < K; ++k) {
        const double av = ap[(t * M + m) * K + k];
        const double* br = bp + (t * K + k) * N;
        double* orow = op + (t * M + m) * N;
        for (std::size_t n = 0; n < N; ++n) orow[n] += av * br[n];
      }
  return make_result(std::move(out), {a, b},
                     [B, M, K, N](Node& self) {
                       Node& pa = parent(self, 0);
                       Node& pb = parent(self, 1);
                       const double* g = self.grad.ptr();
                       if (pa.requires_grad) {
                         double* ga = pa.grad_buffer().ptr();
                         const double* bp = pb.value.ptr();
                         for (std::size_t t = 0; t < B; ++t)
                           for (std::size_t m = 0; m < M; ++m)
                             for (std::size_t k = 0; k < K; ++k) {
                               const double* br = bp + (t * K + k) * N;
                               const double* gr = g + (t * M + m) * N;
                               double acc = 0.0;
                               for (std::size_t n = 0; n < N; ++n) acc += gr[n] * br[n];
                               ga[(t * M + m) * K + k] += acc;
                             }
                       }
                       if (pb.requires_grad) {
                         double* gb = pb.grad_buffer().ptr();
                         const double* ap = pa.value.ptr();
                         for (std::size_t t = 0; t < B; ++t)
                           for (std::size_t m = 0; m < M; ++m)
                             for (std::size_t k = 0; k < K; ++k) {
                               const double av = ap[(t * M + m) * K + k];
                               const double* gr = g + (t * M + m) * N;
                               double* gbr = gb + (t * K + k) * N;
                               for (std::size_t n = 0; n < N; ++n) gbr[n] += av * gr[n];
                             }
                       }
                     },
                     "matmul");
}

Var matmul_bt(const Var& a, const Var& b) {
  require_rank("matmul_bt", a, 3);
  require_rank("matmul_bt", b, 3);
  const std::size_t B = a.shape()[0], M = a.shape()[1], K = a.shape()[2], N = b.shape()[1];
  if (b.shape()[0] != B || b.shape()[2] != K)
    shape_error("matmul_bt", shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  Tensor out({B, M, N});
  const double* ap = a.value().ptr();
  const double* bp = b.value().ptr();
  for (std::size_t t = 0; t < B; ++t)
    for (std::size_t m = 0; m < M; ++m) {
      const double* ar = ap + (t * M + m) * K;
      for (std::size_t n = 0; n < N; ++n) {
        const double* br = bp + (t * N + n) * K;
        double acc = 0.0;
        for (std::size_t k = 0; k < K; ++k) acc += ar[k] * br[k];
        out[(t * M + m) * N + n] = acc;
      }
    }
  return make_result(std::move(out), {a, b},
                     [B, M, K, N](Node& self) {
                       Node& pa = parent(self, 0);
                       Node& pb = parent(self, 1);
                       const double* g = self.grad.ptr();
                       const double* ap = pa.value.ptr();
                       const double* bp = pb.value.ptr();
                       double* ga = pa.requires_grad ? pa.grad_buffer().ptr() : nullptr;
                       double* gb = pb.requires_grad ? pb.grad_buffer().ptr() : nullptr;
                       for (std::size_t t = 0; t < B; ++t)
                         for (std::size_t m = 0; m < M; ++m)
                           for (std::size_t n = 0; n < N; ++n) {
                             const double gv = g[(t * M + m) * N + n];
                             if (gv == 0.0) continue;
                             const double* ar = ap + (t * M + m) * K;
                             const double* br = bp + (t * N + n) * K;
                             if (ga) {
                               double* gar = ga + (t * M + m) * K;
                               for (std::size_t k = 0; k < K; ++k) gar[k] += gv * br[k];
                             }
                             if (gb) {
                               double* gbr = gb + (t * N + n) * K;
                               for (std::size_t k = 0; k < K; ++k) gbr[k] += gv * ar[k];
                             }
                           }
                     },
                     "matmul_bt");
}

Var softmax(const Var& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) shape_error("softmax", "axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t a = s[axis];
  Tensor out(s);
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * a * inner + i;
      double mx = xv[base];
      for (std::size_t k = 1; k < a; ++k) mx = std::max(mx, xv[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < a; ++k) {
        const double e = std::exp(xv[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < a; ++k) out[base + k * inner] /= z;
    }
  return make_result(std::move(out), {x},
                     [outer, a, inner](Node& self) {
                       Tensor& g = parent(self, 0).grad_buffer();
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t i = 0; i < inner; ++i) {
                           const std::size_t base = o * a * inner + i;
                           double dot = 0.0;
                           for (std::size_t k = 0; k < a; ++k)
                             dot += self.grad[base + k * inner] * self.value[base + k * inner];
                           for (std::size_t k = 0; k < a; ++k) {
                             const std::size_t j = base + k * inner;
                             g[j] += self.value[j] * (self.grad[j] - dot);
                           }
                         }
                     },
                     "softmax");
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const std::size_t c = x.shape().back();
  if (gamma.numel() != c || beta.numel() != c)
    shape_error("layer_norm", "affine size vs " + shape_str(x.shape()));
  const std::size_t rows = x.numel() / c;
  Tensor out(x.shape());
  auto xhat = std::make_shared<Tensor>(x.shape());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const double* xp = x.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xp + r * c;
    double mu = 0.0;
    for (std::size_t i = 0; i < c; ++i) mu += xr[i];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t i = 0; i < c; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t i = 0; i < c; ++i) {
      const double h = (xr[i] - mu) * is;
      (*xhat)[r * c + i] = h;
      out[r * c + i] = gamma.value()[i] * h + beta.value()[i];
    }
  }
  return make_result(std::move(out), {x, gamma, beta},
                     [rows, c, xhat, inv_std](Node& self) {
                       Node& px = parent(self, 0);
                       Node& pg = parent(self, 1);
                       const double* g = self.grad.ptr();
                       if (wants(self, 1)) {
                         Tensor& gg = pg.grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t i = 0; i < c; ++i)
                             gg[i] += g[r * c + i] * (*xhat)[r * c + i];
                       }
                       if (wants(self, 2)) {
                         Tensor& gb = parent(self, 2).grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t i = 0; i < c; ++i) gb[i] += g[r * c + i];
                       }
                       if (px.requires_grad) {
                         Tensor& gx = px.grad_buffer();
                         const double cn = static_cast<double>(c);
                         for (std::size_t r = 0; r < rows; ++r) {
                           double s1 = 0.0, s2 = 0.0;
                           for (std::size_t i = 0; i < c; ++i) {
                             const double gh = g[r * c + i] * pg.value[i];
                             s1 += gh;
                             s2 += gh * (*xhat)[r * c + i];
                           }
                           for (std::size_t i = 0; i < c; ++i) {
                             const double gh = g[r * c + i] * pg.value[i];
                             gx[r * c + i] += (*inv_std)[r] / cn *
                                              (cn * gh - s1 - (*xhat)[r * c + i] * s2);
                           }
                         }
                       }
                     },
                     "layer_norm");
}

namespace {
struct ConvGeom {
  std::size_t n, ci, h, w, co, kh, kw, stride, pad, ho, wo;
};

ConvGeom conv_geometry(const char* op, const Var& x, const Var& k, std::size_t stride,
                       std::size_t pad, bool depthwise) {
  require_rank(op, x, 4);
  require_rank(op, k, 4);
  if (stride == 0) shape_error(op, "stride must be positive");
  ConvGeom g{};
  g.n = x.shape()[0];
  g.ci = x.shape()[1];
  g.h = x.shape()[2];
  g.w = x.shape()[3];
  g.co = k.shape()[0];
  g.kh = k.shape()[2];
  g.kw = k.shape()[3];
  g.stride = stride;
  g.pad = pad;
  if (depthwise) {
    if (k.shape()[0] != g.ci || k.shape()[1] != 1)
      shape_error(op, "kernel " + shape_str(k.shape()) + " vs input channels " +
                          std::to_string(g.ci));
  } else if (k.shape()[1] != g.ci) {
    shape_error(op, "kernel " + shape_str(k.shape()) + " vs input " + shape_str(x.shape()));
  }
  if (g.h + 2 * pad < g.kh || g.w + 2 * pad < g.kw)
    shape_error(op, "kernel larger than padded input " + shape_str(x.shape()));
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;
  return g;
}

// Offsets of the output range [lo, hi) whose input index o*stride - pad + k is inside [0, n).
inline void valid_range(std::size_t k, const ConvGeom& g, std::size_t n_in, std::size_t n_out,
                        std::size_t& lo, std::size_t& hi) {
  // need o*stride + k >= pad  and  o*stride + k - pad < n_in
  lo = 0;
  if (k < g.pad) lo = (g.pad - k + g.stride - 1) / g.stride;
  const std::size_t limit = n_in + g.pad;  // o*stride + k < limit
  hi = (limit > k) ? (limit - k + g.stride - 1) / g.stride : 0;
  hi = std::min(hi, n_out);
  if (lo > hi) lo = hi;
}
}  // namespace

Var conv2d(const Var& x, const Var& kernel, const Var& bias, std::size_t stride,
           std::size_t padding) {
  const ConvGeom g = conv_geometry("conv2d", x, kernel, stride, padding, false);
  if (bias && bias.numel() != g.co) shape_error("conv2d", "bias length vs output channels");
  Tensor out({g.n, g.co, g.ho, g.wo}, 0.0);
  const double* xp = x.value().ptr();
  const double* kp = kernel.value().ptr();
  double* op = out.ptr();
  const bool pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
  if (pointwise) {
    // Channel mixing per pixel; work in pixel-major layout so the inner loop
    // runs over output channels. Sum order per output matches the general path.
    const std::size_t P = g.h * g.w;
    std::vector<double> kt(g.ci * g.co), t(P * g.co), xt(P * g.ci);
    for (std::size_t o = 0; o < g.co; ++o)
      for (std::size_t c = 0; c < g.ci; ++c) kt[c * g.co + o] = kp[o * g.ci + c];
    for (std::size_t n = 0; n < g.n; ++n) {
      const double* xn = xp + n * g.ci * P;
      for (std::size_t c = 0; c < g.ci; ++c)
        for (std::size_t q = 0; q < P; ++q) xt[q * g.ci + c] = xn[c * P + q];
      for (std::size_t q = 0; q < P; ++q) {
        double* tr = t.data() + q * g.co;
        for (std::size_t o = 0; o < g.co; ++o) tr[o] = bias ? bias.value()[o] : 0.0;
        for (std::size_t c = 0; c < g.ci; ++c) {
          const double xv = xt[q * g.ci + c];
          const double* kr = kt.data() + c * g.co;
          for (std::size_t o = 0; o < g.co; ++o) tr[o] += kr[o] * xv;
        }
      }
      double* on = op + n * g.co * P;
      for (std::size_t o = 0; o < g.co; ++o)
        for (std::size_t q = 0; q < P; ++q) on[o * P + q] = t[q * g.co + o];
    }
  }
  for (std::size_t n = 0; n < (pointwise ? 0 : g.n); ++n)
    for (std::size_t o = 0; o < g.co; ++o) {
      double* oplane = op + (n * g.co + o) * g.ho * g.wo;
      if (bias)
        for (std::size_t i = 0; i < g.ho * g.wo; ++i) oplane[i] = bias.value()[o];
      for (std::size_t c = 0; c < g.ci; ++c) {
        const double* iplane = xp + (n * g.ci + c) * g.h * g.w;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          std::size_t ylo, yhi;
          valid_range(ky, g, g.h, g.ho, ylo, yhi);
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            std::size_t xlo, xhi;
            valid_range(kx, g, g.w, g.wo, xlo, xhi);
            const double wv = kp[((o * g.ci + c) * g.kh + ky) * g.kw + kx];
            for (std::size_t oy = ylo; oy < yhi; ++oy) {
              const double* irow = iplane + (oy * g.stride + ky - g.pad) * g.w;
              double* orow = oplane + oy * g.wo;
              for (std::size_t ox = xlo; ox < xhi; ++ox)
                orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
            }
          }
        }
      }
    }
  std::vector<Var> ps{x, kernel};
  if (bias) ps.push_back(bias);
  return make_result(
      std::move(out), ps,
      [g](Node& self) {
        Node& px = parent(self, 0);
        Node& pk = parent(self, 1);
        const double* gp = self.grad.ptr();
        const double* xp = px.value.ptr();
        const double* kp = pk.value.ptr();
        double* gx = px.requires_grad ? px.grad_buffer().ptr() : nullptr;
        double* gk = pk.requires_grad ? pk.grad_buffer().ptr() : nullptr;
        if (g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0) {
          const std::size_t P = g.h * g.w;
          std::vector<double> gt(P * g.co), xt(P * g.ci), tx(P * g.ci);
          for (std::size_t n = 0; n < g.n; ++n) {
            const double* gn = gp + n * g.co * P;
            const double* xn = xp + n * g.ci * P;
            for (std::size_t o = 0; o < g.co; ++o)
              for (std::size_t q = 0; q < P; ++q) gt[q * g.co + o] = gn[o * P + q];
            for (std::size_t c = 0; c < g.ci; ++c)
              for (std::size_t q = 0; q < P; ++q) xt[q * g.ci + c] = xn[c * P + q];
            std::fill(tx.begin(), tx.end(), 0.0);
            for (std::size_t q = 0; q < P; ++q)
              for (std::size_t o = 0; o < g.co; ++o) {
                const double gv = gt[q * g.co + o];
                if (gv == 0.0) continue;
                const double* kr = kp + o * g.ci;
                const double* xr = xt.data() + q * g.ci;
                if (gx) {
                  double* tr = tx.data() + q * g.ci;
                  for (std::size_t c = 0; c < g.ci; ++c) tr[c] += kr[c] * gv;
                }
                if (gk) {
                  double* gr = gk + o * g.ci;
                  for (std::size_t c = 0; c < g.ci; ++c) gr[c] += gv * xr[c];
                }
              }
            if (gx) {
              double* gxn = gx + n * g.ci * P;
              for (std::size_t c = 0; c < g.ci; ++c)
                for (std::size_t q = 0; q < P; ++q) gxn[c * P + q] += tx[q * g.ci + c];
            }
          }
        } else {
          for (std::size_t n = 0; n < g.n; ++n)
            for (std::size_t o = 0; o < g.co; ++o) {
              const double* gplane = gp + (n * g.co + o) * g.ho * g.wo;
              for (std::size_t c = 0; c < g.ci; ++c) {
                const std::size_t ioff = (n * g.ci + c) * g.h * g.w;
                for (std::size_t ky = 0; ky < g.kh; ++ky) {
                  std::size_t ylo, yhi;
                  valid_range(ky, g, g.h, g.ho, ylo, yhi);
                  for (std::size_t kx = 0; kx < g.kw; ++kx) {
                    std::size_t xlo, xhi;
                    valid_range(kx, g, g.w, g.wo, xlo, xhi);
                    const std::size_t kidx = ((o * g.ci + c) * g.kh + ky) * g.kw + kx;
                    const std::size_t base = ioff + kx - g.pad;
                    if (gx) {
                      const double wv = kp[kidx];
                      for (std::size_t oy = ylo; oy < yhi; ++oy) {
                        double* xrow = gx + base + (oy * g.stride + ky - g.pad) * g.w;
                        const double* grow = gplane + oy * g.wo;
                        for (std::size_t ox = xlo; ox < xhi; ++ox) xrow[ox * g.stride] += grow[ox] * wv;
                      }
                    }
                    if (gk) {
                      double acc = 0.0;
                      for (std::size_t oy = ylo; oy < yhi; ++oy) {
                        const double* xrow = xp + base + (oy * g.stride + ky - g.pad) * g.w;
                        const double* grow = gplane + oy * g.wo;
                        for (std::size_t ox = xlo; ox < xhi; ++ox) acc += grow[ox] * xrow[ox * g.stride];
                      }
                      gk[kidx] += acc;
                    }
                  }
                }
              }
            }
        }
        if (wants(self, 2)) {
          Tensor& gb = parent(self, 2).grad_buffer();
          for (std::size_t n = 0; n < g.n; ++n)
            for (std::size_t o = 0; o < g.co; ++o) {
              const double* gplane = gp + (n * g.co + o) * g.ho * g.wo;
              double s = 0.0;
              for (std::size_t i = 0; i < g.ho * g.wo; ++i) s += gplane[i];
              gb[o] += s;
            }
        }
      },
      "conv2d");
}

Var depthwise_conv2d(const Var& x, const Var& kernel, const Var& bias, std::size_t stride,
                     std::size_t padding) {
  const ConvGeom g = conv_geometry("depthwise_conv2d", x, kernel, stride, padding, true);
  if (bias && bias.numel() != g.ci) shape_error("depthwise_conv2d", "bias length vs channels");
  Tensor out({g.n, g.ci, g.ho, g.wo}, 0.0);
  const double* xp = x.value().ptr();
  const double* kp = kernel.value().ptr();
  double* op = out.ptr();
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t c = 0; c < g.ci; ++c) {
      double* oplane = op + (n * g.ci + c) * g.ho * g.wo;
      const double* iplane = xp + (n * g.ci + c) * g.h * g.w;
      if (bias)
        for (std::size_t i = 0; i < g.ho * g.wo; ++i) oplane[i] = bias.value()[c];
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        std::size_t ylo, yhi;
        valid_range(ky, g, g.h, g.ho, ylo, yhi);
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          std::size_t xlo, xhi;
          valid_range(kx, g, g.w, g.wo, xlo, xhi);
          const double wv = kp[(c * g.kh + ky) * g.kw + kx];
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const double* irow = iplane + (oy * g.stride + ky - g.pad) * g.w;
            double* orow = oplane + oy * g.wo;
            for (std::size_t ox = xlo; ox < xhi; ++ox)
              orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
          }
        }
      }
    }
  std::vector<Var> ps{x, kernel};
  if (bias) ps.push_back(bias);
  return make_result(
      std::move(out), ps,
      [g](Node& self) {
        Node& px = parent(self, 0);
        Node& pk = parent(self, 1);
        const double* gp = self.grad.ptr();
        const double* xp = px.value.ptr();
        const double* kp = pk.value.ptr();
        double* gx = px.requires_grad ? px.grad_buffer().ptr() : nullptr;
        double* gk = pk.requires_grad ? pk.grad_buffer().ptr() : nullptr;
        for (std::size_t n = 0; n < g.n; ++n)
          for (std::size_t c = 0; c < g.ci; ++c) {
            const double* gplane = gp + (n * g.ci + c) * g.ho * g.wo;
            const std::size_t ioff = (n * g.ci + c) * g.h * g.w;
            for (std::size_t ky = 0; ky < g.kh; ++ky) {
              std::size_t ylo, yhi;
              valid_range(ky, g, g.h, g.ho, ylo, yhi);
              for (std::size_t kx = 0; kx < g.kw; ++kx) {
                std::size_t xlo, xhi;
                valid_range(kx, g, g.w, g.wo, xlo, xhi);
                const std::size_t kidx = (c * g.kh + ky) * g.kw + kx;
                const double wv = kp[kidx];
                double acc = 0.0;
                for (std::size_t oy = ylo; oy < yhi; ++oy) {
                  const std::size_t irow = ioff + (oy * g.stride + ky - g.pad) * g.w;
                  const double* grow = gplane + oy * g.wo;
                  for (std::size_t ox = xlo; ox < xhi; ++ox) {
                    const std::size_t ii = irow + ox * g.stride + kx - g.pad;
                    acc += grow[ox] * xp[ii];
                    if (gx) gx[ii] += grow[ox] * wv;
                  }
                }
                if (gk) gk[kidx] += acc;
              }
            }
          }
        if (wants(self, 2)) {
          Tensor& gb = parent(self, 2).grad_buffer();
          for (std::size_t n = 0; n < g.n; ++n)
            for (std::size_t c = 0; c < g.ci; ++c) {
              const double* gplane = gp + (n * g.ci + c) * g.ho * g.wo;
              double s = 0.0;
              for (std::size_t i = 0; i < g.ho * g.wo; ++i) s += gplane[i];
              gb[c] += s;
            }
        }
      },
      "depthwise_conv2d");
}

Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                 Tensor& running_var, const BatchNormOptions& opt) {
  require_rank("batch_norm2d", x, 4);
  const std::size_t N = x.shape()[0], C = x.shape()[1], HW = x.shape()[2] * x.shape()[3];
  if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C ||
      running_var.numel() != C)
    shape_error("batch_norm2d", "per-channel parameter size vs " + shape_str(x.shape()));
  const std::size_t M = N * HW;
  if (opt.train && M < 2) shape_error("batch_norm2d", "train mode needs more than one value per channel");
  std::vector<double> mu(C, 0.0), var(C, 0.0);
  const double* xp = x.value().ptr();
  if (opt.train) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const double* pl = xp + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) mu[c] += pl[i];
      }
    for (std::size_t c = 0; c < C; ++c) mu[c] /= static_cast<double>(M);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const double* pl = xp + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) var[c] += (pl[i] - mu[c]) * (pl[i] - mu[c]);
      }
    for (std::size_t c = 0; c < C; ++c) {
      var[c] /= static_cast<double>(M);
      running_mean[c] = (1.0 - opt.momentum) * running_mean[c] + opt.momentum * mu[c];
      const double unbiased = var[c] * static_cast<double>(M) / static_cast<double>(M - 1);
      running_var[c] = (1.0 - opt.momentum) * running_var[c] + opt.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = running_mean[c];
      var[c] = running_var[c];
    }
  }
  auto inv_std = std::make_shared<std::vector<double>>(C);
  for (std::size_t c = 0; c < C; ++c) (*inv_std)[c] = 1.0 / std::sqrt(var[c] + opt.eps);
  auto xhat = std::make_shared<Tensor>(x.shape());
  Tensor out(x.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (n * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const double h = (xp[off + i] - mu[c]) * (*inv_std)[c];
        (*xhat)[off + i] = h;
        out[off + i] = gamma.value()[c] * h + beta.value()[c];
      }
    }
  const bool train = opt.train;
  return make_result(
      std::move(out), {x, gamma, beta},
      [N, C, HW, M, xhat, inv_std, train](Node& self) {
        Node& px = parent(self, 0);
        Node& pg = parent(self, 1);
        const double* g = self.grad.ptr();
        std::vector<double> sg(C, 0.0), sgh(C, 0.0);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              sg[c] += g[off + i];
              sgh[c] += g[off + i] * (*xhat)[off + i];
            }
          }
        if (wants(self, 1)) {
          Tensor& gg = pg.grad_buffer();
          for (std::size_t c = 0; c < C; ++c) gg[c] += sgh[c];
        }
        if (wants(self, 2)) {
          Tensor& gb = parent(self, 2).grad_buffer();
          for (std::size_t c = 0; c < C; ++c) gb[c] += sg[c];
        }
        if (px.requires_grad) {
          Tensor& gx = px.grad_buffer();
          const double m = static_cast<double>(M);
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t off = (n * C + c) * HW;
              const double gam = pg.value[c];
              const double is = (*inv_std)[c];
              for (std::size_t i = 0; i < HW; ++i) {
                if (train)
                  gx[off + i] += gam * is / m *
                                 (m * g[off + i] - sg[c] - (*xhat)[off + i] * sgh[c]);
                else
                  gx[off + i] += gam * is * g[off + i];
              }
            }
        }
      },
      "batch_norm2d");
}

Var max_pool2d(const Var& x) {
  require_rank("max_pool2d", x, 4);
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  if (H % 2 != 0 || W % 2 != 0 || H < 2 || W < 2)
    shape_error("max_pool2d", "spatial extents must be even, got " + shape_str(x.shape()));
  const std::size_t Ho = H / 2, Wo = W / 2;
  Tensor out({N, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  const double* xp = x.value().ptr();
  for (std::size_t p = 0; p < N * C; ++p)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = p * H * W + 2 * oy * W + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t j = p * H * W + (2 * oy + dy) * W + 2 * ox + dx;
            if (xp[j] > xp[best]) best = j;
          }
        const std::size_t o = (p * Ho + oy) * Wo + ox;
        out[o] = xp[best];
        (*argmax)[o] = best;
      }
  return make_result(std::move(out), {x},
                     [argmax](Node& self) {
                       Tensor& g = parent(self, 0).grad_buffer();
                       for (std::size_t o = 0; o < argmax->size(); ++o)
                         g[(*argmax)[o]] += self.grad[o];
                     },
                     "max_pool2d");
}

Var global_avg_pool(const Var& x) {
  require_rank("global_avg_pool", x, 4);
  const std::size_t N = x.shape()[0], C = x.shape()[1];
  return reshape(mean_axis(reshape(x, {N * C, x.shape()[2] * x.shape()[3]}), 1), {N, C});
}

Var mul_channel(const Var& x, const Var& s) {
  require_rank("mul_channel", x, 4);
  const std::size_t N = x.shape()[0], C = x.shape()[1], HW = x.shape()[2] * x.shape()[3];
  if (s.shape() != Shape{N, C})
    shape_error("mul_channel", "gate " + shape_str(s.shape()) + " vs " + shape_str(x.shape()));
  Tensor out(x.shape());
  for (std::size_t p = 0; p < N * C; ++p)
    for (std::size_t i = 0; i < HW; ++i) out[p * HW + i] = x.value()[p * HW + i] * s.value()[p];
  return make_result(std::move(out), {x, s},
                     [N, C, HW](Node& self) {
                       Node& px = parent(self, 0);
                       Node& ps = parent(self, 1);
                       if (px.requires_grad) {
                         Tensor& g = px.grad_buffer();
                         for (std::size_t p = 0; p < N * C; ++p)
                           for (std::size_t i = 0; i < HW; ++i)
                             g[p * HW + i] += self.grad[p * HW + i] * ps.value[p];
                       }
                       if (ps.requires_grad) {
                         Tensor& g = ps.grad_buffer();
                         for (std::size_t p = 0; p < N * C; ++p) {
                           double acc = 0.0;
                           for (std::size_t i = 0; i < HW; ++i)
                             acc += self.grad[p * HW + i] * px.value[p * HW + i];
                           g[p] += acc;
                         }
                       }
                     },
                     "mul_channel");
}

Var dropout(const Var& x, double rate, bool train, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) shape_error("dropout", "rate must lie in [0,1)");
  if (!train || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    (*mask)[i] = rng.uniform() < rate ? 0.0 : keep_scale;
    out[i] = x.value()[i] * (*mask)[i];
  }
  return make_result(std::move(out), {x},
                     [mask](Node& self) {
                       Tensor& g = parent(self, 0).grad_buffer();
                       for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * (*mask)[i];
                     },
                     "dropout");
}

Var gem_pool(const Var& x, const Var& rho, double clamp) {
  require_rank("gem_pool", x, 4);
  if (rho.numel() != 1) shape_error("gem_pool", "rho must be a single value");
  const double p = rho.item();
  if (!(p > 0.0)) throw NumericError("gem_pool: exponent must be positive");
  const std::size_t N = x.shape()[0], C = x.shape()[1], HW = x.shape()[2] * x.shape()[3];
  Tensor out({N, C});
  // per (n,c): m = mean(xc^p)
  auto means = std::make_shared<std::vector<double>>(N * C);
  const double* xp = x.value().ptr();
  for (std::size_t q = 0; q < N * C; ++q) {
    double acc = 0.0;
    for (std::size_t i = 0; i < HW; ++i) acc += std::pow(std::max(xp[q * HW + i], clamp), p);
    const double m = acc / static_cast<double>(HW);
    (*means)[q] = m;
    out[q] = std::pow(m, 1.0 / p);
  }
  return make_result(
      std::move(out), {x, rho},
      [N, C, HW, p, clamp, means](Node& self) {
        Node& px = parent(self, 0);
        Node& pr = parent(self, 1);
        const double* xp = px.value.ptr();
        const double inv_hw = 1.0 / static_cast<double>(HW);
        double* gx = px.requires_grad ? px.grad_buffer().ptr() : nullptr;
        double grho = 0.0;
        for (std::size_t q = 0; q < N * C; ++q) {
          const double gy = self.grad[q];
          const double y = self.value[q];
          const double m = (*means)[q];
          double s_log = 0.0;
          for (std::size_t i = 0; i < HW; ++i) {
            const double v = xp[q * HW + i];
            const double vc = std::max(v, clamp);
            const double vp1 = std::pow(vc, p - 1.0);
            if (gx && v > clamp) gx[q * HW + i] += gy * y / m * inv_hw * vp1;
            s_log += vp1 * vc * std::log(vc);
          }
          grho += gy * y * (-std::log(m) / (p * p) + s_log * inv_hw / (m * p));
        }
        if (pr.requires_grad) pr.grad_buffer()[0] += grho;
      },
      "gem_pool");
}

Var squeeze_excite(const Var& x, const Var& w1, const Var& b1, const Var& w2, const Var& b2) {
  Var pooled = global_avg_pool(x);
  Var gate = sigmoid(linear(gelu(linear(pooled, w1, b1)), w2, b2));
  return mul_channel(x, gate);
}

Var gru_cell(const Var& x, const Var& h, const GruWeights& w) {
  require_rank("gru_cell", x, 2);
  require_rank("gru_cell", h, 2);
  if (x.shape()[0] != h.shape()[0]) shape_error("gru_cell", "batch mismatch between x and h");
  if (w.u_z.shape() != Shape{h.shape()[1], h.shape()[1]})
    shape_error("gru_cell", "hidden size " + std::to_string(h.shape()[1]) + " vs U " +
                                shape_str(w.u_z.shape()));
  const Var none;
  Var z = sigmoid(add(linear(x, w.w_z, w.b_z), linear(h, w.u_z, none)));
  Var r = sigmoid(add(linear(x, w.w_r, w.b_r), linear(h, w.u_r, none)));
  Var cand = tanh(add(linear(x, w.w_h, w.b_h), linear(mul(r, h), w.u_h, none)));
  return add(h, mul(z, sub(cand, h)));
}

}  // namespace max360iq::nd
