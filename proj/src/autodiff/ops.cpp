#include "xane3/autodiff/ops.hpp"

#include <algorithm>
#include <limits>
#include <cmath>
#include <string>

#include "xane3/errors.hpp"

namespace xane3::ad {

namespace {

using BackwardFn = std::function<void(Node&)>;

std::string shapes(const Tensor& a, const Tensor& b) {
  return to_string(a.shape()) + " and " + to_string(b.shape());
}

void require(bool ok, const char* op, const std::string& detail) {
  if (!ok) throw ShapeError(std::string(op) + ": " + detail);
}

/// Wrap a computed value into a tensor, recording the backward rule when any
/// input takes part in differentiation.
Tensor make(const char* op, Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
            BackwardFn backward) {
  for (double v : value) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string(op) + ": non-finite output");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool track = false;
  if (grad_enabled()) {
    for (const auto& t : inputs) track = track || t.requires_grad();
  }
  if (track) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) node->inputs.push_back(t.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

Node& in(Node& self, std::size_t i) { return *self.inputs[i]; }

// Broadcast bookkeeping for equal-rank operands.
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
  bool same = false;
};

BroadcastPlan plan_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  BroadcastPlan p;
  if (a.shape() == b.shape()) {
    p.out = a.shape();
    p.same = true;
    return p;
  }
  require(a.rank() == b.rank(), op, "rank mismatch " + shapes(a, b));
  const std::size_t r = a.rank();
  p.out.resize(r);
  p.stride_a.assign(r, 0);
  p.stride_b.assign(r, 0);
  std::size_t sa = 1, sb = 1;
  for (std::size_t k = r; k-- > 0;) {
    const std::size_t da = a.dim(k), db = b.dim(k);
    require(da == db || da == 1 || db == 1, op, "cannot broadcast " + shapes(a, b));
    p.out[k] = std::max(da, db);
    p.stride_a[k] = da == 1 ? 0 : sa;
    p.stride_b[k] = db == 1 ? 0 : sb;
    sa *= da;
    sb *= db;
  }
  return p;
}

template <class F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  const std::size_t n = numel(p.out);
  if (p.same) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t r = p.out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t k = r; k-- > 0;) {
      if (++idx[k] < p.out[k]) {
        ia += p.stride_a[k];
        ib += p.stride_b[k];
        break;
      }
      ia -= p.stride_a[k] * (p.out[k] - 1);
      ib -= p.stride_b[k] * (p.out[k] - 1);
      idx[k] = 0;
    }
  }
}

// f(a,b) -> value; da(a,b,y) and db(a,b,y) -> partial derivatives.
template <class F, class DA, class DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  auto p = plan_broadcast(a, b, op);
  std::vector<double> out(numel(p.out));
  const auto av = a.data(), bv = b.data();
  for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = f(av[ia], bv[ib]); });
  return make(op, p.out, std::move(out), {a, b}, [p, da, db](Node& self) {
    Node& na = in(self, 0);
    Node& nb = in(self, 1);
    const auto& g = self.grad;
    const auto& y = self.value;
    if (na.requires_grad) {
      auto ga = na.grad_buffer();
      for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        ga[ia] += g[i] * da(na.value[ia], nb.value[ib], y[i]);
      });
    }
    if (nb.requires_grad) {
      auto gb = nb.grad_buffer();
      for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        gb[ib] += g[i] * db(na.value[ia], nb.value[ib], y[i]);
      });
    }
  });
}

// f(x) -> value; d(x, y) -> derivative.
template <class F, class D>
Tensor unary(const char* op, const Tensor& x, F f, D d) {
  std::vector<double> out(x.numel());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return make(op, x.shape(), std::move(out), {x}, [d](Node& self) {
    Node& nx = in(self, 0);
    auto gx = nx.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * d(nx.value[i], self.value[i]);
  });
}

double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Split a shape around an axis into (outer, axis length, inner).
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  require(axis < s.size(), op, "axis " + std::to_string(axis) + " out of range for " + to_string(s));
  AxisSplit r;
  for (std::size_t k = 0; k < axis; ++k) r.outer *= s[k];
  r.len = s[axis];
  for (std::size_t k = axis + 1; k < s.size(); ++k) r.inner *= s[k];
  return r;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double q) { return -q / y; });
}

Tensor scale(const Tensor& x, double s) {
  return unary("scale", x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary("add_scalar", x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor square(const Tensor& x) {
  return unary("square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor sqrt(const Tensor& x) {
  return unary(
      "sqrt", x,
      [](double v) {
        if (v < 0) throw ValueError("sqrt: negative input");
        return std::sqrt(v);
      },
      [](double, double y) { return 0.5 / y; });
}

Tensor exp(const Tensor& x) {
  return unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor abs(const Tensor& x) {
  // d|x|/dx at 0 taken as 0.
  return unary(
      "abs", x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor silu(const Tensor& x) {
  return unary(
      "silu", x, [](double v) { return v * logistic(v); },
      [](double v, double) {
        const double s = logistic(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x, logistic, [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& x) {
  return unary(
      "softplus", x, [](double v) { return v > 30 ? v : std::log1p(std::exp(v)); },
      [](double v, double) { return logistic(v); });
}

Tensor detach(const Tensor& x) {
  auto node = std::make_shared<Node>();
  node->shape = x.shape();
  node->value.assign(x.data().begin(), x.data().end());
  node->op = "detach";
  return Tensor(std::move(node));
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make("sum", {1}, {s}, {x}, [](Node& self) {
    auto gx = in(self, 0).grad_buffer();
    for (auto& g : gx) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  require(x.numel() > 0, "mean", "empty tensor");
  const double n = static_cast<double>(x.numel());
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make("mean", {1}, {s / n}, {x}, [n](Node& self) {
    auto gx = in(self, 0).grad_buffer();
    for (auto& g : gx) g += self.grad[0] / n;
  });
}

Tensor sum_axis(const Tensor& x, std::size_t axis) {
  const auto sp = split_axis(x.shape(), axis, "sum_axis");
  Shape shape = x.shape();
  shape[axis] = 1;
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  const auto xv = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.len; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xv[(o * sp.len + k) * sp.inner + i];
  return make("sum_axis", shape, std::move(out), {x}, [sp](Node& self) {
    auto gx = in(self, 0).grad_buffer();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < sp.len; ++k)
        for (std::size_t i = 0; i < sp.inner; ++i) gx[(o * sp.len + k) * sp.inner + i] += self.grad[o * sp.inner + i];
  });
}

Tensor mean_axis(const Tensor& x, std::size_t axis) {
  const auto sp = split_axis(x.shape(), axis, "mean_axis");
  require(sp.len > 0, "mean_axis", "empty axis");
  return scale(sum_axis(x, axis), 1.0 / static_cast<double>(sp.len));
}

Tensor var_axis(const Tensor& x, std::size_t axis) {
  const auto sp = split_axis(x.shape(), axis, "var_axis");
  require(sp.len > 0, "var_axis", "empty axis");
  Shape shape = x.shape();
  shape[axis] = 1;
  const double n = static_cast<double>(sp.len);
  const auto xv = x.data();
  std::vector<double> mu(sp.outer * sp.inner, 0.0), out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.len; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i) mu[o * sp.inner + i] += xv[(o * sp.len + k) * sp.inner + i] / n;
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.len; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const double d = xv[(o * sp.len + k) * sp.inner + i] - mu[o * sp.inner + i];
        out[o * sp.inner + i] += d * d / n;
      }
  return make("var_axis", shape, std::move(out), {x}, [sp, n, mu = std::move(mu)](Node& self) {
    Node& nx = in(self, 0);
    auto gx = nx.grad_buffer();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < sp.len; ++k)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const std::size_t j = (o * sp.len + k) * sp.inner + i;
          gx[j] += self.grad[o * sp.inner + i] * 2.0 * (nx.value[j] - mu[o * sp.inner + i]) / n;
        }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), "matmul", "incompatible " + shapes(a, b));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      if (x == 0.0) continue;
      const double* brow = &bv[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += x * brow[j];
    }
  return make("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& na = in(self, 0);
    Node& nb = in(self, 1);
    const auto& g = self.grad;
    if (na.requires_grad) {
      auto ga = na.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * nb.value[p * n + j];
          ga[i * k + p] += s;
        }
    }
    if (nb.requires_grad) {
      auto gb = nb.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double x = na.value[i * k + p];
          if (x == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += x * g[i * n + j];
        }
    }
  });
}

Tensor mix_channels(const Tensor& x, const Tensor& w) {
  require(x.rank() == 3 && w.rank() == 2 && x.dim(1) == w.dim(0), "mix_channels", "incompatible " + shapes(x, w));
  const std::size_t nn = x.dim(0), kk = x.dim(1), cc = x.dim(2), vv = w.dim(1);
  std::vector<double> out(nn * vv * cc, 0.0);
  const auto xv = x.data(), wv = w.data();
  for (std::size_t n = 0; n < nn; ++n)
    for (std::size_t k = 0; k < kk; ++k)
      for (std::size_t c = 0; c < cc; ++c) {
        const double xx = xv[(n * kk + k) * cc + c];
        if (xx == 0.0) continue;
        const double* wrow = &wv[k * vv];
        double* o = &out[n * vv * cc + c];
        for (std::size_t v = 0; v < vv; ++v) o[v * cc] += xx * wrow[v];
      }
  return make("mix_channels", {nn, vv, cc}, std::move(out), {x, w}, [nn, kk, cc, vv](Node& self) {
    Node& nx = in(self, 0);
    Node& nw = in(self, 1);
    const auto& g = self.grad;
    if (nx.requires_grad) {
      auto gx = nx.grad_buffer();
      for (std::size_t n = 0; n < nn; ++n)
        for (std::size_t k = 0; k < kk; ++k)
          for (std::size_t c = 0; c < cc; ++c) {
            double s = 0.0;
            const double* go = &g[n * vv * cc + c];
            for (std::size_t v = 0; v < vv; ++v) s += nw.value[k * vv + v] * go[v * cc];
            gx[(n * kk + k) * cc + c] += s;
          }
    }
    if (nw.requires_grad) {
      auto gw = nw.grad_buffer();
      for (std::size_t n = 0; n < nn; ++n)
        for (std::size_t k = 0; k < kk; ++k)
          for (std::size_t c = 0; c < cc; ++c) {
            const double xx = nx.value[(n * kk + k) * cc + c];
            if (xx == 0.0) continue;
            const double* go = &g[n * vv * cc + c];
            double* gwrow = &gw[k * vv];
            for (std::size_t v = 0; v < vv; ++v) gwrow[v] += xx * go[v * cc];
          }
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(numel(shape) == x.numel(), "reshape", "cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return make("reshape", std::move(shape), std::move(out), {x}, [](Node& self) {
    auto gx = in(self, 0).grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const auto sp = split_axis(x.shape(), axis, "narrow");
  require(start + length <= sp.len, "narrow",
          "range [" + std::to_string(start) + "," + std::to_string(start + length) + ") exceeds " +
              to_string(x.shape()));
  Shape shape = x.shape();
  shape[axis] = length;
  std::vector<double> out(sp.outer * length * sp.inner);
  const auto xv = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(&xv[(o * sp.len + start) * sp.inner], length * sp.inner, &out[o * length * sp.inner]);
  return make("narrow", shape, std::move(out), {x}, [sp, start, length](Node& self) {
    auto gx = in(self, 0).grad_buffer();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < length * sp.inner; ++j)
        gx[(o * sp.len + start) * sp.inner + j] += self.grad[o * length * sp.inner + j];
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  require(!parts.empty(), "concat", "no inputs");
  const Shape& first = parts[0].shape();
  require(axis < first.size(), "concat", "axis out of range for " + to_string(first));
  Shape shape = first;
  shape[axis] = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    require(p.rank() == first.size(), "concat", "rank mismatch " + shapes(parts[0], p));
    for (std::size_t k = 0; k < first.size(); ++k) {
      if (k != axis) require(p.dim(k) == first[k], "concat", "shape mismatch " + shapes(parts[0], p));
    }
    lens.push_back(p.dim(axis));
    shape[axis] += p.dim(axis);
  }
  const auto sp = split_axis(shape, axis, "concat");
  std::vector<double> out(numel(shape));
  std::size_t offset = 0;
  for (std::size_t j = 0; j < parts.size(); ++j) {
    const auto pv = parts[j].data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(&pv[o * lens[j] * sp.inner], lens[j] * sp.inner, &out[(o * sp.len + offset) * sp.inner]);
    offset += lens[j];
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make("concat", shape, std::move(out), std::move(inputs), [sp, lens](Node& self) {
    std::size_t offset = 0;
    for (std::size_t j = 0; j < lens.size(); ++j) {
      Node& nj = in(self, j);
      if (nj.requires_grad) {
        auto gj = nj.grad_buffer();
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t t = 0; t < lens[j] * sp.inner; ++t)
            gj[o * lens[j] * sp.inner + t] += self.grad[(o * sp.len + offset) * sp.inner + t];
      }
      offset += lens[j];
    }
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  require(x.rank() >= 1, "gather_rows", "scalar input");
  const std::size_t rows = x.dim(0);
  const std::size_t width = rows ? x.numel() / rows : 0;
  Shape shape = x.shape();
  shape[0] = index.size();
  std::vector<double> out(index.size() * width);
  const auto xv = x.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] < rows, "gather_rows", "index " + std::to_string(index[i]) + " >= " + std::to_string(rows));
    std::copy_n(&xv[index[i] * width], width, &out[i * width]);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make("gather_rows", shape, std::move(out), {x}, [idx = std::move(idx), width](Node& self) {
    auto gx = in(self, 0).grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < width; ++j) gx[idx[i] * width + j] += self.grad[i * width + j];
  });
}

Tensor scatter_add_rows(const Tensor& x, std::span<const std::size_t> index, std::size_t n_out) {
  require(x.rank() >= 1 && x.dim(0) == index.size(), "scatter_add_rows",
          "index length " + std::to_string(index.size()) + " vs " + to_string(x.shape()));
  const std::size_t width = x.dim(0) ? x.numel() / x.dim(0) : numel(Shape(x.shape().begin() + 1, x.shape().end()));
  Shape shape = x.shape();
  shape[0] = n_out;
  std::vector<double> out(n_out * width, 0.0);
  const auto xv = x.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] < n_out, "scatter_add_rows", "index " + std::to_string(index[i]) + " >= " + std::to_string(n_out));
    for (std::size_t j = 0; j < width; ++j) out[index[i] * width + j] += xv[i * width + j];
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make("scatter_add_rows", shape, std::move(out), {x}, [idx = std::move(idx), width](Node& self) {
    auto gx = in(self, 0).grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < width; ++j) gx[i * width + j] += self.grad[idx[i] * width + j];
  });
}

Tensor cg_contract(const Tensor& x, const Tensor& y, const Coeff3& coeff) {
  require(x.rank() == 3 && y.rank() == 2 && x.dim(0) == y.dim(0) && x.dim(2) == coeff.d1 && y.dim(1) == coeff.d2,
          "cg_contract",
          "incompatible " + shapes(x, y) + " for coefficient block " + std::to_string(coeff.d1) + "x" +
              std::to_string(coeff.d2) + "x" + std::to_string(coeff.d3));
  const std::size_t ee = x.dim(0), mm = x.dim(1), d1 = coeff.d1, d2 = coeff.d2, d3 = coeff.d3;
  std::vector<double> out(ee * mm * d3, 0.0);
  const auto xv = x.data(), yv = y.data();
  for (std::size_t e = 0; e < ee; ++e)
    for (const auto& t : coeff.entries) {
      const double s = t.value * yv[e * d2 + t.b];
      if (s == 0.0) continue;
      const double* xe = &xv[e * mm * d1 + t.a];
      double* oe = &out[e * mm * d3 + t.c];
      for (std::size_t u = 0; u < mm; ++u) oe[u * d3] += s * xe[u * d1];
    }
  return make("cg_contract", {ee, mm, d3}, std::move(out), {x, y}, [coeff, ee, mm, d1, d2, d3](Node& self) {
    Node& nx = in(self, 0);
    Node& ny = in(self, 1);
    const auto& g = self.grad;
    if (nx.requires_grad) {
      auto gx = nx.grad_buffer();
      for (std::size_t e = 0; e < ee; ++e)
        for (const auto& t : coeff.entries) {
          const double s = t.value * ny.value[e * d2 + t.b];
          if (s == 0.0) continue;
          const double* ge = &g[e * mm * d3 + t.c];
          double* gxe = &gx[e * mm * d1 + t.a];
          for (std::size_t u = 0; u < mm; ++u) gxe[u * d1] += s * ge[u * d3];
        }
    }
    if (ny.requires_grad) {
      auto gy = ny.grad_buffer();
      for (std::size_t e = 0; e < ee; ++e)
        for (const auto& t : coeff.entries) {
          double s = 0.0;
          for (std::size_t u = 0; u < mm; ++u) s += nx.value[(e * mm + u) * d1 + t.a] * g[(e * mm + u) * d3 + t.c];
          gy[e * d2 + t.b] += t.value * s;
        }
    }
  });
}

Tensor radial_scatter_mean(const Tensor& x, const Tensor& r, std::span<const std::size_t> dst, std::size_t n_out) {
  require(x.rank() == 2 && r.rank() == 2 && x.dim(0) == r.dim(0) && x.dim(0) == dst.size(), "radial_scatter_mean",
          "incompatible " + shapes(x, r) + " with " + std::to_string(dst.size()) + " destinations");
  const std::size_t ee = x.dim(0), pp = x.dim(1), qq = r.dim(1);
  std::vector<double> inv_count(n_out, 0.0);
  for (auto d : dst) {
    require(d < n_out, "radial_scatter_mean", "destination " + std::to_string(d) + " >= " + std::to_string(n_out));
    inv_count[d] += 1.0;
  }
  for (auto& c : inv_count) c = c > 0 ? 1.0 / c : 0.0;
  std::vector<double> out(n_out * qq * pp, 0.0);
  const auto xv = x.data(), rv = r.data();
  for (std::size_t e = 0; e < ee; ++e) {
    const double w = inv_count[dst[e]];
    const double* xe = &xv[e * pp];
    for (std::size_t q = 0; q < qq; ++q) {
      const double s = w * rv[e * qq + q];
      if (s == 0.0) continue;
      double* o = &out[(dst[e] * qq + q) * pp];
      for (std::size_t p = 0; p < pp; ++p) o[p] += s * xe[p];
    }
  }
  std::vector<std::size_t> d(dst.begin(), dst.end());
  return make("radial_scatter_mean", {n_out, qq, pp}, std::move(out), {x, r},
              [d = std::move(d), inv_count = std::move(inv_count), ee, pp, qq](Node& self) {
                Node& nx = in(self, 0);
                Node& nr = in(self, 1);
                const auto& g = self.grad;
                if (nx.requires_grad) {
                  auto gx = nx.grad_buffer();
                  for (std::size_t e = 0; e < ee; ++e) {
                    const double w = inv_count[d[e]];
                    double* gxe = &gx[e * pp];
                    for (std::size_t q = 0; q < qq; ++q) {
                      const double s = w * nr.value[e * qq + q];
                      if (s == 0.0) continue;
                      const double* go = &g[(d[e] * qq + q) * pp];
                      for (std::size_t p = 0; p < pp; ++p) gxe[p] += s * go[p];
                    }
                  }
                }
                if (nr.requires_grad) {
                  auto gr = nr.grad_buffer();
                  for (std::size_t e = 0; e < ee; ++e) {
                    const double w = inv_count[d[e]];
                    for (std::size_t q = 0; q < qq; ++q) {
                      const double* go = &g[(d[e] * qq + q) * pp];
                      double s = 0.0;
                      for (std::size_t p = 0; p < pp; ++p) s += nx.value[e * pp + p] * go[p];
                      gr[e * qq + q] += w * s;
                    }
                  }
                }
              });
}

Tensor masked_softmax(const Tensor& scores, std::span<const std::size_t> segment, std::size_t n_segments,
                      const std::vector<bool>& mask) {
  const std::size_t n = scores.numel();
  require(segment.size() == n && mask.size() == n, "masked_softmax",
          "scores " + to_string(scores.shape()) + " vs " + std::to_string(segment.size()) + " segment ids and " +
              std::to_string(mask.size()) + " mask entries");
  const auto sv = scores.data();
  std::vector<double> peak(n_segments, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i) {
    require(segment[i] < n_segments, "masked_softmax", "segment id out of range");
    if (mask[i]) peak[segment[i]] = std::max(peak[segment[i]], sv[i]);
  }
  std::vector<double> out(n, 0.0), total(n_segments, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    out[i] = std::exp(sv[i] - peak[segment[i]]);
    total[segment[i]] += out[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i]) out[i] /= total[segment[i]];
  }
  std::vector<std::size_t> seg(segment.begin(), segment.end());
  return make("masked_softmax", scores.shape(), std::move(out), {scores},
              [seg = std::move(seg), n_segments, mask](Node& self) {
                const auto& y = self.value;
                const auto& g = self.grad;
                std::vector<double> dot(n_segments, 0.0);
                for (std::size_t i = 0; i < y.size(); ++i) {
                  if (mask[i]) dot[seg[i]] += y[i] * g[i];
                }
                auto gs = in(self, 0).grad_buffer();
                for (std::size_t i = 0; i < y.size(); ++i) {
                  if (mask[i]) gs[i] += y[i] * (g[i] - dot[seg[i]]);
                }
              });
}

}  // namespace xane3::ad
