#include "ptnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numeric>
#include <tuple>

#include "ptnet/errors.hpp"

namespace ptnet {

namespace {

using detail::Node;
using BackwardFn = std::function<void(Node&)>;

Tensor make_result(Shape shape, std::vector<double> values, std::initializer_list<const Tensor*> inputs,
                   BackwardFn fn) {
  auto out = Tensor::from(std::move(shape), std::move(values));
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto* t : inputs) needs = needs || t->requires_grad();
  if (!needs) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.leaf = false;
  for (const auto* t : inputs) node.parents.push_back(t->node());
  node.backward_fn = std::move(fn);
  return out;
}

Tensor make_result_n(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs, BackwardFn fn) {
  auto out = Tensor::from(std::move(shape), std::move(values));
  if (!grad_enabled()) return out;
  bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!needs) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.leaf = false;
  for (const auto& t : inputs) node.parents.push_back(t.node());
  node.backward_fn = std::move(fn);
  return out;
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw std::logic_error(std::string(op) + ": undefined tensor");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank_at_least(const Tensor& t, std::size_t r, const char* op) {
  require_defined(t, op);
  if (t.rank() < r) throw ShapeError(std::string(op) + ": expected rank >= " + std::to_string(r) + ", got " + shape_str(t.shape()));
}

std::size_t last_dim(const Tensor& t) { return t.shape().empty() ? 1 : t.shape().back(); }

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// dA[m,k] += dC[m,n] * B[k,n]^T
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* dc, const double* b, double* da) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* drow = dc + i * n;
    double* darow = da + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += drow[j] * brow[j];
      darow[p] += s;
    }
  }
}

// dB[k,n] += A[m,k]^T * dC[m,n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* dc, double* db) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* drow = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* dbrow = db + p * n;
      for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * drow[j];
    }
  }
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

using IndexPtr = std::shared_ptr<const std::vector<std::size_t>>;

Tensor gather_shared(const Tensor& x, IndexPtr index, Shape out_shape) {
  require_defined(x, "gather");
  if (index->size() != shape_numel(out_shape)) throw ShapeError("gather: index length does not match output shape");
  const auto src = x.data();
  std::vector<double> out(index->size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto s = (*index)[i];
    if (s == kNoSource) {
      out[i] = 0.0;
    } else {
      if (s >= src.size()) throw ShapeError("gather: index out of range");
      out[i] = src[s];
    }
  }
  return make_result(std::move(out_shape), std::move(out), {&x}, [index](Node& o) {
    auto& p = *o.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < index->size(); ++i) {
      const auto s = (*index)[i];
      if (s != kNoSource) g[s] += o.grad[i];
    }
  });
}

// Index maps for layout ops depend only on shapes; cache them process-wide.
IndexPtr cached_index(int kind, std::size_t a, std::size_t b, std::size_t c, std::size_t d,
                      const std::function<std::vector<std::size_t>()>& build) {
  static std::mutex mu;
  static std::map<std::tuple<int, std::size_t, std::size_t, std::size_t, std::size_t>, IndexPtr> cache;
  const auto key = std::make_tuple(kind, a, b, c, d);
  {
    std::lock_guard lock(mu);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
  }
  auto built = std::make_shared<const std::vector<std::size_t>>(build());
  std::lock_guard lock(mu);
  return cache.emplace(key, built).first->second;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](Node& o) {
    for (auto& p : o.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](Node& o) {
    if (o.parents[0]->requires_grad) {
      auto& g = o.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (o.parents[1]->requires_grad) {
      auto& g = o.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](Node& o) {
    auto& pa = *o.parents[0];
    auto& pb = *o.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pa.data[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  require_defined(x, "scale");
  const auto v = x.data();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * factor;
  return make_result(x.shape(), std::move(out), {&x}, [factor](Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * factor;
  });
}

Tensor add_scalar(const Tensor& x, double value) {
  require_defined(x, "add_scalar");
  const auto v = x.data();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] + value;
  return make_result(x.shape(), std::move(out), {&x}, [](Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  require_defined(x, "add_row");
  require_defined(row, "add_row");
  const std::size_t d = last_dim(x);
  if (row.numel() != d) throw ShapeError("add_row: row has " + std::to_string(row.numel()) + " elements, expected " + std::to_string(d));
  const auto v = x.data(), r = row.data();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] + r[i % d];
  return make_result(x.shape(), std::move(out), {&x, &row}, [d](Node& o) {
    if (o.parents[0]->requires_grad) {
      auto& g = o.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (o.parents[1]->requires_grad) {
      auto& g = o.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % d] += o.grad[i];
    }
  });
}

Tensor mul_row(const Tensor& x, const Tensor& row) {
  require_defined(x, "mul_row");
  require_defined(row, "mul_row");
  const std::size_t d = last_dim(x);
  if (row.numel() != d) throw ShapeError("mul_row: row has " + std::to_string(row.numel()) + " elements, expected " + std::to_string(d));
  const auto v = x.data(), r = row.data();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * r[i % d];
  return make_result(x.shape(), std::move(out), {&x, &row}, [d](Node& o) {
    auto& px = *o.parents[0];
    auto& pr = *o.parents[1];
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pr.data[i % d];
    }
    if (pr.requires_grad) {
      auto& g = pr.grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % d] += o.grad[i] * px.data[i];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank_at_least(a, 2, "matmul");
  require_rank_at_least(b, 2, "matmul");
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const std::size_t m = as[as.size() - 2], k = as.back();
  const std::size_t k2 = bs[bs.size() - 2], n = bs.back();
  if (k != k2) throw ShapeError("matmul: inner dims differ " + shape_str(as) + " x " + shape_str(bs));
  const std::size_t batch = a.numel() / (m * k);
  const bool shared_b = bs.size() == 2;
  if (!shared_b) {
    if (bs.size() != as.size() || !std::equal(as.begin(), as.end() - 2, bs.begin())) {
      throw ShapeError("matmul: batch dims differ " + shape_str(as) + " x " + shape_str(bs));
    }
  }
  Shape out_shape(as.begin(), as.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(batch * m * n, 0.0);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (std::size_t t = 0; t < batch; ++t) {
    gemm_nn(m, k, n, ad + t * m * k, bd + (shared_b ? 0 : t * k * n), out.data() + t * m * n);
  }
  return make_result(std::move(out_shape), std::move(out), {&a, &b}, [m, k, n, batch, shared_b](Node& o) {
    auto& pa = *o.parents[0];
    auto& pb = *o.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t t = 0; t < batch; ++t) {
        gemm_nt(m, k, n, o.grad.data() + t * m * n, pb.data.data() + (shared_b ? 0 : t * k * n), g.data() + t * m * k);
      }
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t t = 0; t < batch; ++t) {
        gemm_tn(m, k, n, pa.data.data() + t * m * k, o.grad.data() + t * m * n, g.data() + (shared_b ? 0 : t * k * n));
      }
    }
  });
}

Tensor transpose_last2(const Tensor& x) {
  require_rank_at_least(x, 2, "transpose_last2");
  const auto& s = x.shape();
  const std::size_t r = s[s.size() - 2], c = s.back();
  const std::size_t batch = x.numel() / (r * c);
  auto idx = cached_index(1, batch, r, c, 0, [=] {
    std::vector<std::size_t> index(batch * r * c);
    for (std::size_t t = 0; t < batch; ++t)
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < r; ++j) index[t * r * c + i * r + j] = t * r * c + j * c + i;
    return index;
  });
  Shape out(s);
  std::swap(out[out.size() - 1], out[out.size() - 2]);
  return gather_shared(x, idx, std::move(out));
}

Tensor softmax_last(const Tensor& x) {
  require_defined(x, "softmax_last");
  if (!x.all_finite()) throw NumericError("softmax_last: non-finite input");
  const std::size_t d = last_dim(x);
  const auto v = x.data();
  std::vector<double> out(v.size());
  for (std::size_t r = 0; r < v.size(); r += d) {
    double mx = v[r];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, v[r + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      out[r + j] = std::exp(v[r + j] - mx);
      s += out[r + j];
    }
    for (std::size_t j = 0; j < d; ++j) out[r + j] /= s;
  }
  return make_result(x.shape(), std::move(out), {&x}, [d](Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    const auto& y = o.data;
    for (std::size_t r = 0; r < y.size(); r += d) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += o.grad[r + j] * y[r + j];
      for (std::size_t j = 0; j < d; ++j) g[r + j] += y[r + j] * (o.grad[r + j] - dot);
    }
  });
}

Tensor log_softmax_last(const Tensor& x) {
  require_defined(x, "log_softmax_last");
  if (!x.all_finite()) throw NumericError("log_softmax_last: non-finite input");
  const std::size_t d = last_dim(x);
  const auto v = x.data();
  std::vector<double> out(v.size());
  for (std::size_t r = 0; r < v.size(); r += d) {
    double mx = v[r];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, v[r + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += std::exp(v[r + j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < d; ++j) out[r + j] = v[r + j] - lse;
  }
  return make_result(x.shape(), std::move(out), {&x}, [d](Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < o.data.size(); r += d) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += o.grad[r + j];
      for (std::size_t j = 0; j < d; ++j) g[r + j] += o.grad[r + j] - std::exp(o.data[r + j]) * s;
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  require_defined(x, "sigmoid");
  const auto v = x.data();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = stable_sigmoid(v[i]);
  return make_result(x.shape(), std::move(out), {&x}, [](Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * o.data[i] * (1.0 - o.data[i]);
  });
}

Tensor gelu(const Tensor& x) {
  require_defined(x, "gelu");
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  const auto v = x.data();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double u = v[i];
    out[i] = 0.5 * u * (1.0 + std::tanh(kC * (u + kA * u * u * u)));
  }
  return make_result(x.shape(), std::move(out), {&x}, [](Node& o) {
    auto& p = *o.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double u = p.data[i];
      const double th = std::tanh(kC * (u + kA * u * u * u));
      const double dth = (1.0 - th * th) * kC * (1.0 + 3.0 * kA * u * u);
      g[i] += o.grad[i] * (0.5 * (1.0 + th) + 0.5 * u * dth);
    }
  });
}

Tensor abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "abs_diff");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(x[i] - y[i]);
  return make_result(a.shape(), std::move(out), {&a, &b}, [](Node& o) {
    auto& pa = *o.parents[0];
    auto& pb = *o.parents[1];
    const std::size_t n = o.grad.size();
    auto sign = [&](std::size_t i) {
      const double d = pa.data[i] - pb.data[i];
      return d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
    };
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += o.grad[i] * sign(i);
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] -= o.grad[i] * sign(i);
    }
  });
}

Tensor mean_over(const Tensor& x, std::size_t axis) {
  require_defined(x, "mean_over");
  const auto& s = x.shape();
  if (axis >= s.size()) throw ShapeError("mean_over: axis " + std::to_string(axis) + " invalid for " + shape_str(s));
  const std::size_t n = s[axis];
  if (n == 0) throw ShapeError("mean_over: empty axis");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const auto v = x.data();
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += v[(o * n + k) * inner + i];
  const double inv = 1.0 / static_cast<double>(n);
  for (auto& e : out) e *= inv;
  Shape os(s);
  os[axis] = 1;
  return make_result(std::move(os), std::move(out), {&x}, [outer, n, inner, inv](Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t a = 0; a < outer; ++a)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < inner; ++i) g[(a * n + k) * inner + i] += o.grad[a * inner + i] * inv;
  });
}

Tensor sum_all(const Tensor& x) {
  require_defined(x, "sum_all");
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({}, {s}, {&x}, [](Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (auto& e : g) e += o.grad[0];
  });
}

Tensor mean_all(const Tensor& x) {
  require_defined(x, "mean_all");
  if (x.numel() == 0) throw ShapeError("mean_all: empty tensor");
  return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  }
  return make_result(std::move(shape), x.to_vector(), {&x}, [](Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const auto& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != s0[i]) throw ShapeError("concat: " + shape_str(s) + " incompatible with " + shape_str(s0));
    }
    widths.push_back(s[axis] * inner);
    total += s[axis];
  }
  const std::size_t row = total * inner;
  std::vector<double> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto v = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(v.data() + o * widths[k], widths[k], out.data() + o * row + offset);
    offset += widths[k];
  }
  Shape os(s0);
  os[axis] = total;
  return make_result_n(std::move(os), std::move(out), parts, [outer, row, widths](Node& o) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < o.parents.size(); ++k) {
      auto& p = *o.parents[k];
      if (p.requires_grad) {
        auto& g = p.grad_buffer();
        for (std::size_t a = 0; a < outer; ++a)
          for (std::size_t i = 0; i < widths[k]; ++i) g[a * widths[k] + i] += o.grad[a * row + off + i];
      }
      off += widths[k];
    }
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  require_defined(x, "slice");
  const auto& s = x.shape();
  if (axis >= s.size()) throw ShapeError("slice: axis out of range");
  if (start + length > s[axis]) throw ShapeError("slice: range exceeds axis of " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t src_row = s[axis] * inner, dst_row = length * inner, off = start * inner;
  const auto v = x.data();
  std::vector<double> out(outer * dst_row);
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(v.data() + o * src_row + off, dst_row, out.data() + o * dst_row);
  Shape os(s);
  os[axis] = length;
  return make_result(std::move(os), std::move(out), {&x}, [outer, src_row, dst_row, off](Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t a = 0; a < outer; ++a)
      for (std::size_t i = 0; i < dst_row; ++i) g[a * src_row + off + i] += o.grad[a * dst_row + i];
  });
}

Tensor gather_flat(const Tensor& x, std::vector<std::size_t> index, Shape out_shape) {
  return gather_shared(x, std::make_shared<const std::vector<std::size_t>>(std::move(index)), std::move(out_shape));
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_defined(table, "embedding");
  if (table.rank() != 2) throw ShapeError("embedding: table must be [V, D]");
  const std::size_t v = table.dim(0), d = table.dim(1);
  const auto src = table.data();
  std::vector<double> out(ids.size() * d);
  std::vector<int> rows(ids.begin(), ids.end());
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= v) throw ShapeError("embedding: id out of range");
    std::copy_n(src.data() + static_cast<std::size_t>(ids[t]) * d, d, out.data() + t * d);
  }
  return make_result({ids.size(), d}, std::move(out), {&table}, [rows = std::move(rows), d](Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t t = 0; t < rows.size(); ++t)
      for (std::size_t j = 0; j < d; ++j) g[static_cast<std::size_t>(rows[t]) * d + j] += o.grad[t * d + j];
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_defined(x, "layer_norm");
  const std::size_t d = last_dim(x);
  if (gamma.numel() != d || beta.numel() != d) throw ShapeError("layer_norm: affine params must have last-dim length");
  const auto v = x.data(), gm = gamma.data(), bt = beta.data();
  const std::size_t rows = v.size() / d;
  std::vector<double> out(v.size());
  std::vector<double> xhat(v.size());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = v.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mu) * rstd[r];
      out[r * d + j] = xhat[r * d + j] * gm[j] + bt[j];
    }
  }
  return make_result(x.shape(), std::move(out), {&x, &gamma, &beta},
                     [d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node& o) {
                       auto& px = *o.parents[0];
                       auto& pg = *o.parents[1];
                       auto& pb = *o.parents[2];
                       if (pg.requires_grad) {
                         auto& g = pg.grad_buffer();
                         for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % d] += o.grad[i] * xhat[i];
                       }
                       if (pb.requires_grad) {
                         auto& g = pb.grad_buffer();
                         for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % d] += o.grad[i];
                       }
                       if (px.requires_grad) {
                         auto& g = px.grad_buffer();
                         const double inv_d = 1.0 / static_cast<double>(d);
                         for (std::size_t r = 0; r < rows; ++r) {
                           double s1 = 0.0, s2 = 0.0;
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dxh = o.grad[r * d + j] * pg.data[j];
                             s1 += dxh;
                             s2 += dxh * xhat[r * d + j];
                           }
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dxh = o.grad[r * d + j] * pg.data[j];
                             g[r * d + j] += rstd[r] * (dxh - inv_d * s1 - xhat[r * d + j] * inv_d * s2);
                           }
                         }
                       }
                     });
}

Tensor l2_normalize_rows(const Tensor& x) {
  require_defined(x, "l2_normalize_rows");
  const std::size_t d = last_dim(x);
  const auto v = x.data();
  const std::size_t rows = v.size() / d;
  std::vector<double> out(v.size());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += v[r * d + j] * v[r * d + j];
    norms[r] = std::max(std::sqrt(s), 1e-12);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = v[r * d + j] / norms[r];
  }
  return make_result(x.shape(), std::move(out), {&x}, [d, rows, norms = std::move(norms)](Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += o.grad[r * d + j] * o.data[r * d + j];
      for (std::size_t j = 0; j < d; ++j) g[r * d + j] += (o.grad[r * d + j] - o.data[r * d + j] * dot) / norms[r];
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_defined(logits, "cross_entropy");
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [T, V]");
  const std::size_t t = logits.dim(0), v = logits.dim(1);
  if (targets.size() != t) throw ShapeError("cross_entropy: target count does not match rows");
  if (t == 0) throw ShapeError("cross_entropy: no rows");
  if (!logits.all_finite()) throw NumericError("cross_entropy: non-finite logits");
  const auto x = logits.data();
  std::vector<double> probs(x.size());
  double loss = 0.0;
  for (std::size_t r = 0; r < t; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v) throw ShapeError("cross_entropy: target out of range");
    const double* row = x.data() + r * v;
    double mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[r * v + j] = std::exp(row[j] - mx);
      s += probs[r * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= s;
    loss -= row[targets[r]] - mx - std::log(s);
  }
  loss /= static_cast<double>(t);
  std::vector<int> tg(targets.begin(), targets.end());
  return make_result({}, {loss}, {&logits}, [probs = std::move(probs), tg = std::move(tg), t, v](Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    const double scale_ = o.grad[0] / static_cast<double>(t);
    for (std::size_t r = 0; r < t; ++r) {
      for (std::size_t j = 0; j < v; ++j) g[r * v + j] += scale_ * probs[r * v + j];
      g[r * v + static_cast<std::size_t>(tg[r])] -= scale_;
    }
  });
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets, double eps) {
  require_defined(logits, "bce_with_logits");
  if (targets.size() != logits.numel()) throw ShapeError("bce_with_logits: target size mismatch");
  if (logits.numel() == 0) throw ShapeError("bce_with_logits: empty input");
  for (double y : targets) {
    if (y != 0.0 && y != 1.0) throw ConfigError("bce_with_logits: mask must be binary");
  }
  const auto x = logits.data();
  const std::size_t n = x.size();
  std::vector<double> grad(n);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = stable_sigmoid(x[i]);
    const double pc = std::clamp(p, eps, 1.0 - eps);
    loss -= targets[i] * std::log(pc) + (1.0 - targets[i]) * std::log(1.0 - pc);
    grad[i] = (p == pc) ? (p - targets[i]) : 0.0;
  }
  loss /= static_cast<double>(n);
  return make_result({}, {loss}, {&logits}, [grad = std::move(grad), n](Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    const double s = o.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) g[i] += s * grad[i];
  });
}

Tensor im2col3x3(const Tensor& x) {
  require_defined(x, "im2col3x3");
  if (x.rank() != 3) throw ShapeError("im2col3x3: expected [H, W, C]");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  auto idx = cached_index(2, h, w, c, 0, [=] {
    std::vector<std::size_t> index(h * w * 9 * c);
    std::size_t o = 0;
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t q = 0; q < w; ++q)
        for (int dr = -1; dr <= 1; ++dr)
          for (int dq = -1; dq <= 1; ++dq) {
            const long rr = static_cast<long>(r) + dr, qq = static_cast<long>(q) + dq;
            const bool inside = rr >= 0 && qq >= 0 && rr < static_cast<long>(h) && qq < static_cast<long>(w);
            for (std::size_t ch = 0; ch < c; ++ch) {
              index[o++] = inside ? (static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(qq)) * c + ch : kNoSource;
            }
          }
    return index;
  });
  return gather_shared(x, idx, {h * w, 9 * c});
}

Tensor upsample_nearest2x(const Tensor& x) {
  require_defined(x, "upsample_nearest2x");
  if (x.rank() != 3) throw ShapeError("upsample_nearest2x: expected [H, W, C]");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  auto idx = cached_index(3, h, w, c, 0, [=] {
    std::vector<std::size_t> index(4 * h * w * c);
    std::size_t o = 0;
    for (std::size_t r = 0; r < 2 * h; ++r)
      for (std::size_t q = 0; q < 2 * w; ++q)
        for (std::size_t ch = 0; ch < c; ++ch) index[o++] = ((r / 2) * w + q / 2) * c + ch;
    return index;
  });
  return gather_shared(x, idx, {2 * h, 2 * w, c});
}

Tensor adaptive_avg_pool(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_defined(x, "adaptive_avg_pool");
  if (x.rank() != 3) throw ShapeError("adaptive_avg_pool: expected [H, W, C]");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (out_h == 0 || out_w == 0 || out_h > h || out_w > w) throw ShapeError("adaptive_avg_pool: output grid exceeds input");
  struct Bin {
    std::size_t r0, r1, c0, c1;
  };
  std::vector<Bin> bins;
  for (std::size_t i = 0; i < out_h; ++i)
    for (std::size_t j = 0; j < out_w; ++j) {
      bins.push_back({i * h / out_h, ((i + 1) * h + out_h - 1) / out_h, j * w / out_w, ((j + 1) * w + out_w - 1) / out_w});
    }
  const auto v = x.data();
  std::vector<double> out(out_h * out_w * c, 0.0);
  for (std::size_t b = 0; b < bins.size(); ++b) {
    const auto& bn = bins[b];
    const double inv = 1.0 / static_cast<double>((bn.r1 - bn.r0) * (bn.c1 - bn.c0));
    for (std::size_t r = bn.r0; r < bn.r1; ++r)
      for (std::size_t q = bn.c0; q < bn.c1; ++q)
        for (std::size_t ch = 0; ch < c; ++ch) out[b * c + ch] += v[(r * w + q) * c + ch] * inv;
  }
  return make_result({out_h, out_w, c}, std::move(out), {&x}, [bins = std::move(bins), w, c](Node& o) {
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t b = 0; b < bins.size(); ++b) {
      const auto& bn = bins[b];
      const double inv = 1.0 / static_cast<double>((bn.r1 - bn.r0) * (bn.c1 - bn.c0));
      for (std::size_t r = bn.r0; r < bn.r1; ++r)
        for (std::size_t q = bn.c0; q < bn.c1; ++q)
          for (std::size_t ch = 0; ch < c; ++ch) g[(r * w + q) * c + ch] += o.grad[b * c + ch] * inv;
    }
  });
}

Tensor patchify(const Tensor& image, std::size_t patch) {
  require_defined(image, "patchify");
  if (image.rank() != 3) throw ShapeError("patchify: expected [H, W, C]");
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw ShapeError("patchify: image " + shape_str(image.shape()) + " not divisible by patch " + std::to_string(patch));
  }
  const std::size_t gh = h / patch, gw = w / patch;
  auto idx = cached_index(4, h, w, c, patch, [=] {
    std::vector<std::size_t> index(h * w * c);
    std::size_t o = 0;
    for (std::size_t pr = 0; pr < gh; ++pr)
      for (std::size_t pc = 0; pc < gw; ++pc)
        for (std::size_t r = 0; r < patch; ++r)
          for (std::size_t q = 0; q < patch; ++q)
            for (std::size_t ch = 0; ch < c; ++ch) index[o++] = ((pr * patch + r) * w + pc * patch + q) * c + ch;
    return index;
  });
  return gather_shared(image, idx, {gh * gw, patch * patch * c});
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  require_defined(x, "split_heads");
  if (x.rank() != 2) throw ShapeError("split_heads: expected [T, D]");
  const std::size_t t = x.dim(0), d = x.dim(1);
  if (heads == 0 || d % heads != 0) throw ShapeError("split_heads: D=" + std::to_string(d) + " not divisible by H=" + std::to_string(heads));
  const std::size_t dk = d / heads;
  auto idx = cached_index(5, t, d, heads, 0, [=] {
    std::vector<std::size_t> index(t * d);
    std::size_t o = 0;
    for (std::size_t hh = 0; hh < heads; ++hh)
      for (std::size_t r = 0; r < t; ++r)
        for (std::size_t j = 0; j < dk; ++j) index[o++] = r * d + hh * dk + j;
    return index;
  });
  return gather_shared(x, idx, {heads, t, dk});
}

Tensor merge_heads(const Tensor& x) {
  require_defined(x, "merge_heads");
  if (x.rank() != 3) throw ShapeError("merge_heads: expected [H, T, dk]");
  const std::size_t heads = x.dim(0), t = x.dim(1), dk = x.dim(2);
  auto idx = cached_index(6, heads, t, dk, 0, [=] {
    std::vector<std::size_t> index(heads * t * dk);
    std::size_t o = 0;
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t hh = 0; hh < heads; ++hh)
        for (std::size_t j = 0; j < dk; ++j) index[o++] = (hh * t + r) * dk + j;
    return index;
  });
  return gather_shared(x, idx, {t, heads * dk});
}

}  // namespace ptnet
