#pragma once

// Dense-tensor layer with reverse-mode automatic differentiation. A Graph is
// an append-only tape of eagerly evaluated nodes; Var is a lightweight
// handle. Templated on the scalar type: float for training, double for
// finite-difference gradient checks. Forward/backward over one graph is
// single-threaded at the tape level; the matmul kernels parallelize over
// output rows, which keeps results bit-deterministic for a fixed binary.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "textdet/common.hpp"
#include "textdet/rng.hpp"

namespace textdet {

template <class T>
struct TensorData {
  std::vector<int> shape;
  std::vector<T> v;

  TensorData() = default;
  explicit TensorData(std::vector<int> s) : shape(std::move(s)) {
    v.assign(static_cast<size_t>(numel_of(shape)), T(0));
  }
  TensorData(std::vector<int> s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
    if (static_cast<int64_t>(v.size()) != numel_of(shape))
      throw std::invalid_argument("TensorData: value count does not match shape");
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }
  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }
};

template <class T>
struct Parameter {
  std::string name;
  TensorData<T> value;
  std::vector<T> grad;  // sized lazily on first accumulation
  bool trainable = true;

  void zero_grad() { grad.assign(value.v.size(), T(0)); }
};

// Ordered registry of the parameters of a model; iteration order is the
// registration order, which fixes optimizer and checkpoint layout.
template <class T>
struct ParamSet {
  std::vector<Parameter<T>*> items;

  void add(Parameter<T>& p) {
    for (const auto* q : items)
      if (q->name == p.name) throw std::invalid_argument("duplicate parameter name: " + p.name);
    items.push_back(&p);
  }
  void zero_grads() {
    for (auto* p : items) p->zero_grad();
  }
  int64_t total_size() const {
    int64_t n = 0;
    for (const auto* p : items) n += p->value.numel();
    return n;
  }
};

namespace kernels {

// C[M,N] += A[M,K] * B[K,N]
template <class T>
void mm_nn(const T* a, const T* b, T* c, int M, int K, int N) {
#pragma omp parallel for schedule(static) if (static_cast<int64_t>(M) * K * N > 262144)
  for (int m = 0; m < M; ++m) {
    T* crow = c + static_cast<size_t>(m) * N;
    const T* arow = a + static_cast<size_t>(m) * K;
    for (int k = 0; k < K; ++k) {
      const T av = arow[k];
      const T* brow = b + static_cast<size_t>(k) * N;
#pragma omp simd
      for (int n = 0; n < N; ++n) crow[n] += av * brow[n];
    }
  }
}

// C[M,N] += A^T * B with A[K,M], B[K,N]
template <class T>
void mm_tn(const T* a, const T* b, T* c, int M, int K, int N) {
#pragma omp parallel for schedule(static) if (static_cast<int64_t>(M) * K * N > 262144)
  for (int m = 0; m < M; ++m) {
    T* crow = c + static_cast<size_t>(m) * N;
    for (int k = 0; k < K; ++k) {
      const T av = a[static_cast<size_t>(k) * M + m];
      const T* brow = b + static_cast<size_t>(k) * N;
#pragma omp simd
      for (int n = 0; n < N; ++n) crow[n] += av * brow[n];
    }
  }
}

// C[M,N] += A[M,K] * B^T with B[N,K]
template <class T>
void mm_nt(const T* a, const T* b, T* c, int M, int K, int N) {
#pragma omp parallel for schedule(static) if (static_cast<int64_t>(M) * K * N > 262144)
  for (int m = 0; m < M; ++m) {
    const T* arow = a + static_cast<size_t>(m) * K;
    T* crow = c + static_cast<size_t>(m) * N;
    for (int n = 0; n < N; ++n) {
      const T* brow = b + static_cast<size_t>(n) * K;
      T s = 0;
#pragma omp simd reduction(+ : s)
      for (int k = 0; k < K; ++k) s += arow[k] * brow[k];
      crow[n] += s;
    }
  }
}

}  // namespace kernels

template <class T>
class Graph;

template <class T>
struct Var {
  Graph<T>* g = nullptr;
  int id = -1;

  const TensorData<T>& value() const;
  const std::vector<int>& shape() const { return value().shape; }
  int64_t numel() const { return value().numel(); }
  T scalar() const { return value().v[0]; }
};

// Binary mask over the last two dimensions of an attention score tensor;
// entries with 0 receive exactly zero softmax weight.
struct AttnMask {
  int rows = 0, cols = 0;
  std::vector<uint8_t> allowed;  // row-major rows x cols
};

template <class T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  struct Node {
    TensorData<T> val;
    std::vector<T> grad;  // empty until touched by backward
    std::function<void()> back;
    bool needs_grad = false;
    Parameter<T>* param = nullptr;
  };

  const TensorData<T>& value(int id) const { return nodes_[static_cast<size_t>(id)].val; }

  std::vector<T>& grad(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty()) n.grad.assign(n.val.v.size(), T(0));
    return n.grad;
  }
  bool grad_nonempty(int id) const { return !nodes_[static_cast<size_t>(id)].grad.empty(); }
  bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

  Var<T> constant(TensorData<T> td) {
    return push(std::move(td), false, nullptr, nullptr);
  }

  Var<T> scalar_const(T x) { return constant(TensorData<T>({1}, {x})); }

  // Leaf bound to a parameter; frozen parameters enter as constants.
  Var<T> use(Parameter<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return {this, it->second};
    Var<T> v = push(p.value, p.trainable, nullptr, &p);
    param_nodes_[&p] = v.id;
    return v;
  }

  // --- elementwise ------------------------------------------------------

  Var<T> add(Var<T> a, Var<T> b) { return binary_broadcast(a, b, /*sign=*/+1, /*mul=*/false); }
  Var<T> sub(Var<T> a, Var<T> b) { return binary_broadcast(a, b, /*sign=*/-1, /*mul=*/false); }
  Var<T> mul(Var<T> a, Var<T> b) { return binary_broadcast(a, b, +1, /*mul=*/true); }

  Var<T> divv(Var<T> a, Var<T> b) {
    require_same_shape(a, b, "div");
    TensorData<T> out(value(a.id).shape);
    const auto& av = value(a.id).v;
    const auto& bv = value(b.id).v;
    for (size_t i = 0; i < av.size(); ++i) out.v[i] = av[i] / bv[i];
    const bool ng = needs_grad(a.id) || needs_grad(b.id);
    Var<T> c = push(std::move(out), ng, nullptr, nullptr);
    if (ng) {
      set_back(c.id, [this, a, b, c] {
        const auto& gc = grad(c.id);
        const auto& av = value(a.id).v;
        const auto& bv = value(b.id).v;
        if (needs_grad(a.id)) {
          auto& ga = grad(a.id);
          for (size_t i = 0; i < gc.size(); ++i) ga[i] += gc[i] / bv[i];
        }
        if (needs_grad(b.id)) {
          auto& gb = grad(b.id);
          for (size_t i = 0; i < gc.size(); ++i) gb[i] -= gc[i] * av[i] / (bv[i] * bv[i]);
        }
      });
    }
    return c;
  }

  Var<T> adds(Var<T> a, T s) {
    return unary(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
  }
  Var<T> muls(Var<T> a, T s) {
    return unary(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
  }
  Var<T> neg(Var<T> a) { return muls(a, T(-1)); }

  Var<T> relu(Var<T> a) {
    return unary(a, [](T x) { return x > 0 ? x : T(0); },
                 [](T x, T) { return x > 0 ? T(1) : T(0); });
  }
  Var<T> sigmoid(Var<T> a) {
    return unary(a, [](T x) { return x >= 0 ? T(1) / (T(1) + std::exp(-x))
                                            : std::exp(x) / (T(1) + std::exp(x)); },
                 [](T, T y) { return y * (T(1) - y); });
  }
  Var<T> gelu(Var<T> a) {
    return unary(a,
                 [](T x) { return T(0.5) * x * (T(1) + std::erf(x / T(std::numbers::sqrt2))); },
                 [](T x, T) {
                   const T cdf = T(0.5) * (T(1) + std::erf(x / T(std::numbers::sqrt2)));
                   const T pdf = std::exp(-x * x / T(2)) / T(std::sqrt(2.0 * std::numbers::pi));
                   return cdf + x * pdf;
                 });
  }
  // softplus(x) = log(1 + e^x), evaluated stably; d/dx = sigmoid(x)
  Var<T> softplus(Var<T> a) {
    return unary(a,
                 [](T x) { return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x))); },
                 [](T x, T) {
                   return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
                 });
  }
  Var<T> absv(Var<T> a) {
    return unary(a, [](T x) { return std::abs(x); },
                 [](T x, T) { return x > 0 ? T(1) : (x < 0 ? T(-1) : T(0)); });
  }
  Var<T> square(Var<T> a) {
    return unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
  }

  Var<T> vmin(Var<T> a, Var<T> b) { return minmax(a, b, /*take_min=*/true); }
  Var<T> vmax(Var<T> a, Var<T> b) { return minmax(a, b, /*take_min=*/false); }

  // --- matmul -----------------------------------------------------------

  // 2-D product with optional transposes (both-transposed unsupported).
  Var<T> matmul(Var<T> a, Var<T> b, bool ta = false, bool tb = false) {
    return matmul_impl(a, b, ta, tb, /*batched=*/false);
  }
  // 3-D batched product over the leading dimension.
  Var<T> bmm(Var<T> a, Var<T> b, bool ta = false, bool tb = false) {
    return matmul_impl(a, b, ta, tb, /*batched=*/true);
  }

  // --- shape ops --------------------------------------------------------

  Var<T> reshape(Var<T> a, std::vector<int> shape) {
    if (TensorData<T>::numel_of(shape) != value(a.id).numel())
      throw std::invalid_argument("reshape: element count mismatch");
    TensorData<T> out(std::move(shape), value(a.id).v);
    const bool ng = needs_grad(a.id);
    Var<T> c = push(std::move(out), ng, nullptr, nullptr);
    if (ng) {
      set_back(c.id, [this, a, c] {
        const auto& gc = grad(c.id);
        auto& ga = grad(a.id);
        for (size_t i = 0; i < gc.size(); ++i) ga[i] += gc[i];
      });
    }
    return c;
  }

  Var<T> transpose2(Var<T> a) {
    const auto& av = value(a.id);
    if (av.rank() != 2) throw std::invalid_argument("transpose2: rank-2 tensor required");
    const int R = av.dim(0), C = av.dim(1);
    TensorData<T> out({C, R});
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) out.v[static_cast<size_t>(c) * R + r] = av.v[static_cast<size_t>(r) * C + c];
    const bool ng = needs_grad(a.id);
    Var<T> cvar = push(std::move(out), ng, nullptr, nullptr);
    if (ng) {
      set_back(cvar.id, [this, a, cvar, R, C] {
        const auto& gc = grad(cvar.id);
        auto& ga = grad(a.id);
        for (int r = 0; r < R; ++r)
          for (int c = 0; c < C; ++c)
            ga[static_cast<size_t>(r) * C + c] += gc[static_cast<size_t>(c) * R + r];
      });
    }
    return cvar;
  }

  Var<T> permute3(Var<T> a, int p0, int p1, int p2) {
    const auto& av = value(a.id);
    if (av.rank() != 3) throw std::invalid_argument("permute3: rank-3 tensor required");
    const int d[3] = {av.dim(0), av.dim(1), av.dim(2)};
    const int perm[3] = {p0, p1, p2};
    TensorData<T> out({d[p0], d[p1], d[p2]});
    const int64_t s1 = d[1] * d[2], s2 = d[2];
    const int64_t o1 = static_cast<int64_t>(d[perm[1]]) * d[perm[2]], o2 = d[perm[2]];
    int idx[3];
    for (idx[0] = 0; idx[0] < d[0]; ++idx[0])
      for (idx[1] = 0; idx[1] < d[1]; ++idx[1])
        for (idx[2] = 0; idx[2] < d[2]; ++idx[2])
          out.v[idx[p0] * o1 + idx[p1] * o2 + idx[p2]] =
              av.v[idx[0] * s1 + idx[1] * s2 + idx[2]];
    const bool ng = needs_grad(a.id);
    Var<T> c = push(std::move(out), ng, nullptr, nullptr);
    if (ng) {
      const int d0 = d[0], d1 = d[1], d2 = d[2];
      set_back(c.id, [this, a, c, d0, d1, d2, p0, p1, p2] {
        const auto& gc = grad(c.id);
        auto& ga = grad(a.id);
        const int d[3] = {d0, d1, d2};
        const int perm[3] = {p0, p1, p2};
        const int64_t s1 = d[1] * d[2], s2 = d[2];
        const int64_t o1 = static_cast<int64_t>(d[perm[1]]) * d[perm[2]], o2 = d[perm[2]];
        int idx[3];
        for (idx[0] = 0; idx[0] < d[0]; ++idx[0])
          for (idx[1] = 0; idx[1] < d[1]; ++idx[1])
            for (idx[2] = 0; idx[2] < d[2]; ++idx[2])
              ga[idx[0] * s1 + idx[1] * s2 + idx[2]] +=
                  gc[idx[p0] * o1 + idx[p1] * o2 + idx[p2]];
      });
    }
    return c;
  }

  Var<T> concat0(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat0: no inputs");
    std::vector<int> shape = value(parts[0].id).shape;
    int64_t rows = 0;
    const int64_t row_elems = value(parts[0].id).numel() / shape[0];
    bool ng = false;
    for (const auto& p : parts) {
      const auto& pv = value(p.id);
      if (pv.numel() / pv.dim(0) != row_elems)
        throw std::invalid_argument("concat0: trailing dimensions differ");
      rows += pv.dim(0);
      ng = ng || needs_grad(p.id);
    }
    shape[0] = static_cast<int>(rows);
    TensorData<T> out(shape);
    int64_t off = 0;
    for (const auto& p : parts) {
      const auto& pv = value(p.id).v;
      std::copy(pv.begin(), pv.end(), out.v.begin() + off);
      off += static_cast<int64_t>(pv.size());
    }
    Var<T> c = push(std::move(out), ng, nullptr, nullptr);
    if (ng) {
      auto parts_copy = parts;
      set_back(c.id, [this, parts_copy, c] {
        const auto& gc = grad(c.id);
        int64_t off = 0;
        for (const auto& p : parts_copy) {
          const int64_t n = value(p.id).numel();
          if (needs_grad(p.id)) {
            auto& gp = grad(p.id);
            for (int64_t i = 0; i < n; ++i) gp[i] += gc[off + i];
          }
          off += n;
        }
      });
    }
    return c;
  }

  Var<T> slice0(Var<T> a, int start, int len) {
    const auto& av = value(a.id);
    const int64_t row_elems = av.numel() / av.dim(0);
    if (start < 0 || start + len > av.dim(0)) throw std::invalid_argument("slice0: out of range");
    std::vector<int> shape = av.shape;
    shape[0] = len;
    TensorData<T> out(shape);
    std::copy(av.v.begin() + start * row_elems, av.v.begin() + (start + len) * row_elems,
              out.v.begin());
    const bool ng = needs_grad(a.id);
    Var<T> c = push(std::move(out), ng, nullptr, nullptr);
    if (ng) {
      set_back(c.id, [this, a, c, start, row_elems] {
        const auto& gc = grad(c.id);
        auto& ga = grad(a.id);
        for (size_t i = 0; i < gc.size(); ++i) ga[start * row_elems + i] += gc[i];
      });
    }
    return c;
  }

  Var<T> slice_cols(Var<T> a, int start, int len) {
    const auto& av = value(a.id);
    if (av.rank() != 2) throw std::invalid_argument("slice_cols: rank-2 tensor required");
    const int R = av.dim(0), C = av.dim(1);
    if (start < 0 || start + len > C) throw std::invalid_argument("slice_cols: out of range");
    TensorData<T> out({R, len});
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < len; ++c)
        out.v[static_cast<size_t>(r) * len + c] = av.v[static_cast<size_t>(r) * C + start + c];
    const bool ng = needs_grad(a.id);
    Var<T> cv = push(std::move(out), ng, nullptr, nullptr);
    if (ng) {
      set_back(cv.id, [this, a, cv, start, len, R, C] {
        const auto& gc = grad(cv.id);
        auto& ga = grad(a.id);
        for (int r = 0; r < R; ++r)
          for (int c = 0; c < len; ++c)
            ga[static_cast<size_t>(r) * C + start + c] += gc[static_cast<size_t>(r) * len + c];
      });
    }
    return cv;
  }

  Var<T> select_rows(Var<T> a, const std::vector<int>& rows) {
    const auto& av = value(a.id);
    const int64_t row_elems = av.numel() / av.dim(0);
    std::vector<int> shape = av.shape;
    shape[0] = static_cast<int>(rows.size());
    TensorData<T> out(shape);
    for (size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] < 0 || rows[i] >= av.dim(0))
        throw std::invalid_argument("select_rows: index out of range");
      std::copy(av.v.begin() + rows[i] * row_elems, av.v.begin() + (rows[i] + 1) * row_elems,
                out.v.begin() + static_cast<int64_t>(i) * row_elems);
    }
    const bool ng = needs_grad(a.id);
    Var<T> c = push(std::move(out), ng, nullptr, nullptr);
    if (ng) {
      std::vector<int> rows_copy = rows;
      set_back(c.id, [this, a, c, rows_copy, row_elems] {
        const auto& gc = grad(c.id);
        auto& ga = grad(a.id);
        for (size_t i = 0; i < rows_copy.size(); ++i)
          for (int64_t j = 0; j < row_elems; ++j)
            ga[rows_copy[i] * row_elems + j] += gc[static_cast<int64_t>(i) * row_elems + j];
      });
    }
    return c;
  }

  // --- reductions -------------------------------------------------------

  Var<T> reduce_sum(Var<T> a) {
    T s = 0;
    for (T x : value(a.id).v) s += x;
    const bool ng = needs_grad(a.id);
    Var<T> c = push(TensorData<T>({1}, {s}), ng, nullptr, nullptr);
    if (ng) {
      set_back(c.id, [this, a, c] {
        const T gc = grad(c.id)[0];
        auto& ga = grad(a.id);
        for (auto& g : ga) g += gc;
      });
    }
    return c;
  }
  Var<T> reduce_mean(Var<T> a) {
    const T inv = T(1) / T(value(a.id).numel());
    return muls(reduce_sum(a), inv);
  }

  // --- softmax / layer norm --------------------------------------------

  // Softmax over the last dimension. When a mask is given, its (rows, cols)
  // tile over the leading dimensions; masked entries get exactly zero
  // weight and never enter the normalization. An all-masked row is all
  // zeros.
  Var<T> softmax_lastdim(Var<T> a, const AttnMask* mask = nullptr) {
    const auto& av = value(a.id);
    const int m = av.dim(av.rank() - 1);
    const int64_t rows = av.numel() / m;
    if (mask) {
      if (mask->cols != m || rows % mask->rows != 0)
        throw std::invalid_argument("softmax_lastdim: mask shape mismatch");
    }
    TensorData<T> out(av.shape);
    for (int64_t r = 0; r < rows; ++r) {
      const T* x = av.v.data() + r * m;
      T* y = out.v.data() + r * m;
      const uint8_t* mrow =
          mask ? mask->allowed.data() + (r % mask->rows) * static_cast<size_t>(m) : nullptr;
      T mx = -std::numeric_limits<T>::infinity();
      for (int j = 0; j < m; ++j)
        if (!mrow || mrow[j]) mx = std::max(mx, x[j]);
      if (mx == -std::numeric_limits<T>::infinity()) continue;  // all masked -> zeros
      T sum = 0;
      for (int j = 0; j < m; ++j) {
        if (!mrow || mrow[j]) {
          y[j] = std::exp(x[j] - mx);
          sum += y[j];
        }
      }
      const T inv = T(1) / sum;
      for (int j = 0; j < m; ++j)
        if (!mrow || mrow[j]) y[j] *= inv;
    }
    const bool ng = needs_grad(a.id);
    Var<T> c = push(std::move(out), ng, nullptr, nullptr);
    if (ng) {
      set_back(c.id, [this, a, c, m, rows] {
        const auto& gc = grad(c.id);
        const auto& y = value(c.id).v;
        auto& ga = grad(a.id);
        for (int64_t r = 0; r < rows; ++r) {
          const T* yr = y.data() + r * m;
          const T* gr = gc.data() + r * m;
          T dot = 0;
          for (int j = 0; j < m; ++j) dot += yr[j] * gr[j];
          T* gar = ga.data() + r * m;
          for (int j = 0; j < m; ++j) gar[j] += yr[j] * (gr[j] - dot);
        }
      });
    }
    return c;
  }

  Var<T> layer_norm_lastdim(Var<T> a, Var<T> gain, Var<T> bias, T epsv = T(eps::layer_norm)) {
    const auto& av = value(a.id);
    const int m = av.dim(av.rank() - 1);
    const int64_t rows = av.numel() / m;
    if (value(gain.id).numel() != m || value(bias.id).numel() != m)
      throw std::invalid_argument("layer_norm: gain/bias must match the last dimension");
    TensorData<T> out(av.shape);
    const auto& gv = value(gain.id).v;
    const auto& bv = value(bias.id).v;
    for (int64_t r = 0; r < rows; ++r) {
      const T* x = av.v.data() + r * m;
      T* y = out.v.data() + r * m;
      T mu = 0;
      for (int j = 0; j < m; ++j) mu += x[j];
      mu /= m;
      T var = 0;
      for (int j = 0; j < m; ++j) var += (x[j] - mu) * (x[j] - mu);
      var /= m;
      const T inv = T(1) / std::sqrt(var + epsv);
      for (int j = 0; j < m; ++j) y[j] = gv[j] * (x[j] - mu) * inv + bv[j];
    }
    const bool ng = needs_grad(a.id) || needs_grad(gain.id) || needs_grad(bias.id);
    Var<T> c = push(std::move(out), ng, nullptr, nullptr);
    if (ng) {
      set_back(c.id, [this, a, gain, bias, c, m, rows, epsv] {
        const auto& gc = grad(c.id);
        const auto& x = value(a.id).v;
        const auto& gv = value(gain.id).v;
        const bool need_a = needs_grad(a.id);
        const bool need_g = needs_grad(gain.id);
        const bool need_b = needs_grad(bias.id);
        for (int64_t r = 0; r < rows; ++r) {
          const T* xr = x.data() + r * m;
          const T* gr = gc.data() + r * m;
          T mu = 0;
          for (int j = 0; j < m; ++j) mu += xr[j];
          mu /= m;
          T var = 0;
          for (int j = 0; j < m; ++j) var += (xr[j] - mu) * (xr[j] - mu);
          var /= m;
          const T inv = T(1) / std::sqrt(var + epsv);
          if (need_g || need_b) {
            auto& gg = grad(gain.id);
            auto& gb = grad(bias.id);
            for (int j = 0; j < m; ++j) {
              if (need_g) gg[j] += gr[j] * (xr[j] - mu) * inv;
              if (need_b) gb[j] += gr[j];
            }
          }
          if (need_a) {
            auto& ga = grad(a.id);
            T sum_dxhat = 0, sum_dxhat_xhat = 0;
            for (int j = 0; j < m; ++j) {
              const T dxhat = gr[j] * gv[j];
              const T xhat = (xr[j] - mu) * inv;
              sum_dxhat += dxhat;
              sum_dxhat_xhat += dxhat * xhat;
            }
            T* gar = ga.data() + r * m;
            for (int j = 0; j < m; ++j) {
              const T dxhat = gr[j] * gv[j];
              const T xhat = (xr[j] - mu) * inv;
              gar[j] += inv * (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) / m);
            }
          }
        }
      });
    }
    return c;
  }

  // --- image ops --------------------------------------------------------

  // (Cin, H, W) -> (Ho*Wo, Cin*k*k) patch matrix for convolution-as-matmul.
  Var<T> im2col(Var<T> a, int k, int stride, int pad) {
    const auto& av = value(a.id);
    if (av.rank() != 3) throw std::invalid_argument("im2col: rank-3 (C,H,W) tensor required");
    const int C = av.dim(0), H = av.dim(1), W = av.dim(2);
    const int Ho = (H + 2 * pad - k) / stride + 1;
    const int Wo = (W + 2 * pad - k) / stride + 1;
    TensorData<T> out({Ho * Wo, C * k * k});
    const int cols = C * k * k;
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) {
        T* row = out.v.data() + (static_cast<size_t>(oy) * Wo + ox) * cols;
        int ci = 0;
        for (int c = 0; c < C; ++c) {
          const T* plane = av.v.data() + static_cast<size_t>(c) * H * W;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            for (int kx = 0; kx < k; ++kx, ++ci) {
              const int ix = ox * stride - pad + kx;
              row[ci] = (iy >= 0 && iy < H && ix >= 0 && ix < W)
                            ? plane[static_cast<size_t>(iy) * W + ix]
                            : T(0);
            }
          }
        }
      }
    }
    const bool ng = needs_grad(a.id);
    Var<T> cv = push(std::move(out), ng, nullptr, nullptr);
    if (ng) {
      set_back(cv.id, [this, a, cv, k, stride, pad, C, H, W, Ho, Wo] {
        const auto& gc = grad(cv.id);
        auto& ga = grad(a.id);
        const int cols = C * k * k;
        for (int oy = 0; oy < Ho; ++oy) {
          for (int ox = 0; ox < Wo; ++ox) {
            const T* row = gc.data() + (static_cast<size_t>(oy) * Wo + ox) * cols;
            int ci = 0;
            for (int c = 0; c < C; ++c) {
              T* plane = ga.data() + static_cast<size_t>(c) * H * W;
              for (int ky = 0; ky < k; ++ky) {
                const int iy = oy * stride - pad + ky;
                for (int kx = 0; kx < k; ++kx, ++ci) {
                  const int ix = ox * stride - pad + kx;
                  if (iy >= 0 && iy < H && ix >= 0 && ix < W)
                    plane[static_cast<size_t>(iy) * W + ix] += row[ci];
                }
              }
            }
          }
        }
      });
    }
    return cv;
  }

  // (C, H, W) -> (C, 2H, 2W), nearest neighbor.
  Var<T> upsample2x(Var<T> a) {
    const auto& av = value(a.id);
    if (av.rank() != 3) throw std::invalid_argument("upsample2x: rank-3 (C,H,W) tensor required");
    const int C = av.dim(0), H = av.dim(1), W = av.dim(2);
    TensorData<T> out({C, 2 * H, 2 * W});
    for (int c = 0; c < C; ++c) {
      const T* src = av.v.data() + static_cast<size_t>(c) * H * W;
      T* dst = out.v.data() + static_cast<size_t>(c) * 4 * H * W;
      for (int y = 0; y < 2 * H; ++y)
        for (int x = 0; x < 2 * W; ++x)
          dst[static_cast<size_t>(y) * 2 * W + x] = src[static_cast<size_t>(y / 2) * W + x / 2];
    }
    const bool ng = needs_grad(a.id);
    Var<T> cv = push(std::move(out), ng, nullptr, nullptr);
    if (ng) {
      set_back(cv.id, [this, a, cv, C, H, W] {
        const auto& gc = grad(cv.id);
        auto& ga = grad(a.id);
        for (int c = 0; c < C; ++c) {
          T* dst = ga.data() + static_cast<size_t>(c) * H * W;
          const T* src = gc.data() + static_cast<size_t>(c) * 4 * H * W;
          for (int y = 0; y < 2 * H; ++y)
            for (int x = 0; x < 2 * W; ++x)
              dst[static_cast<size_t>(y / 2) * W + x / 2] += src[static_cast<size_t>(y) * 2 * W + x];
        }
      });
    }
    return cv;
  }

  // --- backward ---------------------------------------------------------

  // Reverse sweep from a scalar loss; `seed` scales the whole gradient
  // (used for batch averaging). Accumulates into Parameter::grad.
  void backward(Var<T> loss, T seed = T(1)) {
    if (value(loss.id).numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    grad(loss.id)[0] += seed;
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.back) n.back();
      if (n.param && n.param->trainable) {
        if (n.param->grad.empty()) n.param->zero_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) n.param->grad[i] += n.grad[i];
      }
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
  std::map<Parameter<T>*, int> param_nodes_;

  Var<T> push(TensorData<T> val, bool needs_grad, std::function<void()> back, Parameter<T>* param) {
    Node n;
    n.val = std::move(val);
    n.back = std::move(back);
    n.needs_grad = needs_grad;
    n.param = param;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }
  void set_back(int id, std::function<void()> fn) { nodes_[static_cast<size_t>(id)].back = std::move(fn); }

  void require_same_shape(Var<T> a, Var<T> b, const char* op) {
    if (value(a.id).shape != value(b.id).shape)
      throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }

  template <class F, class DF>
  Var<T> unary(Var<T> a, F f, DF df) {
    const auto& av = value(a.id);
    TensorData<T> out(av.shape);
    for (size_t i = 0; i < av.v.size(); ++i) out.v[i] = f(av.v[i]);
    const bool ng = needs_grad(a.id);
    Var<T> c = push(std::move(out), ng, nullptr, nullptr);
    if (ng) {
      set_back(c.id, [this, a, c, df] {
        const auto& gc = grad(c.id);
        const auto& av = value(a.id).v;
        const auto& cv = value(c.id).v;
        auto& ga = grad(a.id);
        for (size_t i = 0; i < gc.size(); ++i) ga[i] += gc[i] * df(av[i], cv[i]);
      });
    }
    return c;
  }

  // add/sub/mul with optional suffix broadcast of b over a's leading dims.
  Var<T> binary_broadcast(Var<T> a, Var<T> b, int sign, bool is_mul) {
    const auto& av = value(a.id);
    const auto& bv = value(b.id);
    const int64_t an = av.numel(), bn = bv.numel();
    bool suffix = false;
    if (av.shape != bv.shape) {
      suffix = an % bn == 0 && bv.rank() <= av.rank();
      for (int i = 0; suffix && i < bv.rank(); ++i)
        suffix = bv.dim(bv.rank() - 1 - i) == av.dim(av.rank() - 1 - i);
      if (!suffix) throw std::invalid_argument("binary op: incompatible shapes");
    }
    TensorData<T> out(av.shape);
    if (is_mul) {
      for (int64_t i = 0; i < an; ++i) out.v[i] = av.v[i] * bv.v[i % bn];
    } else if (sign > 0) {
      for (int64_t i = 0; i < an; ++i) out.v[i] = av.v[i] + bv.v[i % bn];
    } else {
      for (int64_t i = 0; i < an; ++i) out.v[i] = av.v[i] - bv.v[i % bn];
    }
    const bool ng = needs_grad(a.id) || needs_grad(b.id);
    Var<T> c = push(std::move(out), ng, nullptr, nullptr);
    if (ng) {
      set_back(c.id, [this, a, b, c, sign, is_mul, bn] {
        const auto& gc = grad(c.id);
        if (needs_grad(a.id)) {
          auto& ga = grad(a.id);
          if (is_mul) {
            const auto& bvv = value(b.id).v;
            for (size_t i = 0; i < gc.size(); ++i) ga[i] += gc[i] * bvv[i % bn];
          } else {
            for (size_t i = 0; i < gc.size(); ++i) ga[i] += gc[i];
          }
        }
        if (needs_grad(b.id)) {
          auto& gb = grad(b.id);
          if (is_mul) {
            const auto& avv = value(a.id).v;
            for (size_t i = 0; i < gc.size(); ++i) gb[i % bn] += gc[i] * avv[i];
          } else if (sign > 0) {
            for (size_t i = 0; i < gc.size(); ++i) gb[i % bn] += gc[i];
          } else {
            for (size_t i = 0; i < gc.size(); ++i) gb[i % bn] -= gc[i];
          }
        }
      });
    }
    return c;
  }

  Var<T> minmax(Var<T> a, Var<T> b, bool take_min) {
    require_same_shape(a, b, take_min ? "vmin" : "vmax");
    const auto& av = value(a.id);
    const auto& bv = value(b.id);
    TensorData<T> out(av.shape);
    for (size_t i = 0; i < av.v.size(); ++i)
      out.v[i] = take_min ? std::min(av.v[i], bv.v[i]) : std::max(av.v[i], bv.v[i]);
    const bool ng = needs_grad(a.id) || needs_grad(b.id);
    Var<T> c = push(std::move(out), ng, nullptr, nullptr);
    if (ng) {
      set_back(c.id, [this, a, b, c, take_min] {
        const auto& gc = grad(c.id);
        const auto& avv = value(a.id).v;
        const auto& bvv = value(b.id).v;
        const bool na = needs_grad(a.id), nb = needs_grad(b.id);
        for (size_t i = 0; i < gc.size(); ++i) {
          // ties go to a, so each element routes to exactly one input
          const bool pick_a = take_min ? avv[i] <= bvv[i] : avv[i] >= bvv[i];
          if (pick_a) {
            if (na) grad(a.id)[i] += gc[i];
          } else if (nb) {
            grad(b.id)[i] += gc[i];
          }
        }
      });
    }
    return c;
  }

  Var<T> matmul_impl(Var<T> a, Var<T> b, bool ta, bool tb, bool batched) {
    if (ta && tb) throw std::invalid_argument("matmul: both-transposed form unsupported");
    const auto& av = value(a.id);
    const auto& bv = value(b.id);
    const int want_rank = batched ? 3 : 2;
    if (av.rank() != want_rank || bv.rank() != want_rank)
      throw std::invalid_argument("matmul: rank mismatch");
    const int off = batched ? 1 : 0;
    const int batches = batched ? av.dim(0) : 1;
    if (batched && bv.dim(0) != batches) throw std::invalid_argument("bmm: batch mismatch");
    const int M = ta ? av.dim(off + 1) : av.dim(off);
    const int K = ta ? av.dim(off) : av.dim(off + 1);
    const int Kb = tb ? bv.dim(off + 1) : bv.dim(off);
    const int N = tb ? bv.dim(off) : bv.dim(off + 1);
    if (K != Kb) throw std::invalid_argument("matmul: inner dimension mismatch");

    std::vector<int> shape = batched ? std::vector<int>{batches, M, N} : std::vector<int>{M, N};
    TensorData<T> out(shape);
    const int64_t a_sz = static_cast<int64_t>(M) * K, b_sz = static_cast<int64_t>(K) * N,
                  c_sz = static_cast<int64_t>(M) * N;
    for (int bi = 0; bi < batches; ++bi) {
      const T* ap = av.v.data() + bi * a_sz;
      const T* bp = bv.v.data() + bi * b_sz;
      T* cp = out.v.data() + bi * c_sz;
      if (!ta && !tb) kernels::mm_nn(ap, bp, cp, M, K, N);
      else if (!ta && tb) kernels::mm_nt(ap, bp, cp, M, K, N);
      else kernels::mm_tn(ap, bp, cp, M, K, N);
    }
    const bool ng = needs_grad(a.id) || needs_grad(b.id);
    Var<T> c = push(std::move(out), ng, nullptr, nullptr);
    if (ng) {
      set_back(c.id, [this, a, b, c, ta, tb, batches, M, K, N, a_sz, b_sz, c_sz] {
        const auto& gc = grad(c.id);
        const auto& avv = value(a.id).v;
        const auto& bvv = value(b.id).v;
        for (int bi = 0; bi < batches; ++bi) {
          const T* gp = gc.data() + bi * c_sz;
          const T* ap = avv.data() + bi * a_sz;
          const T* bp = bvv.data() + bi * b_sz;
          if (needs_grad(a.id)) {
            T* gap = grad(a.id).data() + bi * a_sz;
            if (!ta) {
              if (!tb) kernels::mm_nt(gp, bp, gap, M, N, K);   // dA = dC * B^T
              else kernels::mm_nn(gp, bp, gap, M, N, K);       // dA = dC * B
            } else {
              if (!tb) kernels::mm_nt(bp, gp, gap, K, N, M);   // dA^T = B * dC^T
              else throw std::logic_error("unreachable");
            }
          }
          if (needs_grad(b.id)) {
            T* gbp = grad(b.id).data() + bi * b_sz;
            if (!tb) {
              if (!ta) kernels::mm_tn(ap, gp, gbp, K, M, N);   // dB = A^T * dC
              else kernels::mm_nn(ap, gp, gbp, K, M, N);       // dB = A * dC
            } else {
              kernels::mm_tn(gp, ap, gbp, N, M, K);            // dB^T = dC^T * A
            }
          }
        }
      });
    }
    return c;
  }
};

template <class T>
const TensorData<T>& Var<T>::value() const {
  return g->value(id);
}

// Max relative error between reverse-mode gradients and 64-bit central
// finite differences (step 1e-5) over n_probe randomly chosen parameter
// entries. `build` must deterministically construct the scalar loss.
template <class Build>
double grad_check(Build&& build, const std::vector<Parameter<double>*>& params, int n_probe,
                  Rng& rng, double step = 1e-5) {
  for (auto* p : params) p->zero_grad();
  {
    Graph<double> g;
    Var<double> loss = build(g);
    if (!std::isfinite(loss.scalar())) throw std::runtime_error("grad_check: non-finite loss");
    g.backward(loss, 1.0);
  }
  auto eval = [&]() {
    Graph<double> g;
    return build(g).scalar();
  };
  double max_rel = 0.0;
  for (int probe = 0; probe < n_probe; ++probe) {
    Parameter<double>* p = params[rng.uniform_int(static_cast<int>(params.size()))];
    const int idx = rng.uniform_int(static_cast<int>(p->value.numel()));
    const double orig = p->value.v[idx];
    p->value.v[idx] = orig + step;
    const double f1 = eval();
    p->value.v[idx] = orig - step;
    const double f2 = eval();
    p->value.v[idx] = orig;
    if (!std::isfinite(f1) || !std::isfinite(f2))
      throw std::runtime_error("grad_check: non-finite value while probing parameter " + p->name);
    const double fd = (f1 - f2) / (2 * step);
    const double an = p->grad.empty() ? 0.0 : p->grad[idx];
    const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-3});
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace textdet
