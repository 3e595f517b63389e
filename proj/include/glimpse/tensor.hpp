#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "glimpse/error.hpp"
#include "glimpse/rng.hpp"

namespace glimpse {

// When on, every primitive scans its output for NaN/Inf and throws NumericError.
inline bool& debug_checks() {
#ifdef NDEBUG
  static bool on = false;
#else
  static bool on = true;
#endif
  return on;
}

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // sized lazily on first accumulation
  bool requires_grad = false;
  int leaf_slot = -1;  // >=0 routes accumulation to a bound LeafGradStore
};

// Per-episode gradient sink for shared leaf tensors (model parameters).
// While bound on a thread, backward accumulates leaf gradients here instead
// of the nodes themselves, so episodes can run in parallel against shared
// read-only weights.
template <class T>
class LeafGradStore {
 public:
  explicit LeafGradStore(std::size_t slots) : bufs_(slots) {}

  std::vector<T>& buf(int slot, std::size_t n) {
    auto& b = bufs_[static_cast<std::size_t>(slot)];
    if (b.size() != n) b.assign(n, T(0));
    return b;
  }
  std::vector<std::vector<T>>& slots() { return bufs_; }

  static LeafGradStore*& current() {
    thread_local LeafGradStore* cur = nullptr;
    return cur;
  }

  struct Scope {
    explicit Scope(LeafGradStore& s) : prev_(current()) { current() = &s; }
    ~Scope() { current() = prev_; }
    LeafGradStore* prev_;
  };

 private:
  std::vector<std::vector<T>> bufs_;
};

template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : n_(std::make_shared<TensorNode<T>>()) {
    n_->shape = std::move(shape);
    n_->data.assign(shape_numel(n_->shape), fill);
  }
  Tensor(Shape shape, std::vector<T> data) : n_(std::make_shared<TensorNode<T>>()) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("tensor: " + shape_str(shape) + " does not hold " +
                       std::to_string(data.size()) + " values");
    n_->shape = std::move(shape);
    n_->data = std::move(data);
  }

  static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  std::size_t size() const { return n_->data.size(); }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  std::size_t dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  std::size_t rows() const { return n_->shape.at(0); }
  std::size_t cols() const { return n_->shape.at(1); }

  std::vector<T>& data() { return n_->data; }
  const std::vector<T>& data() const { return n_->data; }
  T* ptr() { return n_->data.data(); }
  const T* ptr() const { return n_->data.data(); }

  T& at(std::size_t i) { return n_->data[i]; }
  T at(std::size_t i) const { return n_->data[i]; }
  T& at(std::size_t i, std::size_t j) { return n_->data[i * cols() + j]; }
  T at(std::size_t i, std::size_t j) const { return n_->data[i * cols() + j]; }

  T item() const {
    if (size() != 1) throw ContractError("item: tensor " + shape_str(shape()) + " is not scalar");
    return n_->data[0];
  }

  Tensor& set_requires_grad(bool b = true) {
    n_->requires_grad = b;
    return *this;
  }
  bool requires_grad() const { return n_ && n_->requires_grad; }

  // Zero-length until a backward pass has accumulated into this leaf.
  const std::vector<T>& grad() const { return n_->grad; }
  std::vector<T>& grad_mut() { return n_->grad; }
  void zero_grad() { n_->grad.assign(n_->data.size(), T(0)); }

  TensorNode<T>* node() const { return n_.get(); }
  const std::shared_ptr<TensorNode<T>>& handle() const { return n_; }

 private:
  std::shared_ptr<TensorNode<T>> n_;
};

// Accumulation target for a node's gradient; leaf slots may be redirected
// to the thread's bound LeafGradStore.
template <class T>
inline std::vector<T>& grad_buf(TensorNode<T>& n) {
  if (n.leaf_slot >= 0) {
    if (auto* store = LeafGradStore<T>::current()) return store->buf(n.leaf_slot, n.data.size());
  }
  if (n.grad.size() != n.data.size()) n.grad.assign(n.data.size(), T(0));
  return n.grad;
}

// Records primitive applications in execution order (hence topologically
// sorted). backward replays the closures in reverse; repeated calls without
// clear() accumulate gradients again. Confined to one logical thread.
template <class T>
class Tape {
 public:
  static Tape*& current() {
    thread_local Tape* cur = nullptr;
    return cur;
  }

  struct Scope {
    explicit Scope(Tape& t) : prev_(current()) { current() = &t; }
    ~Scope() { current() = prev_; }
    Tape* prev_;
  };

  struct NoGrad {
    NoGrad() : prev_(current()) { current() = nullptr; }
    ~NoGrad() { current() = prev_; }
    Tape* prev_;
  };

  void record(const Tensor<T>& out, std::function<void()> back) {
    ops_.push_back(std::move(back));
    outs_.push_back(out.handle());
  }
  std::size_t size() const { return ops_.size(); }
  void clear() {
    ops_.clear();
    outs_.clear();
  }

  // Leaf gradients accumulate across calls; intermediate gradients are
  // transient per pass, so calling backward twice doubles leaf gradients.
  void backward(const Tensor<T>& loss) {
    if (loss.size() != 1)
      throw ContractError("backward: loss has shape " + shape_str(loss.shape()) +
                          ", expected a scalar");
    for (auto& n : outs_)
      if (n->leaf_slot < 0) n->grad.assign(n->data.size(), T(0));
    grad_buf(*loss.node())[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> ops_;
  std::vector<std::shared_ptr<TensorNode<T>>> outs_;
};

namespace detail {

template <class T>
inline void check_finite(const Tensor<T>& t, const char* op) {
  for (const T& v : t.data())
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError(std::string(op) + ": non-finite value produced");
}

template <class T>
inline bool tracing(std::initializer_list<const Tensor<T>*> ins) {
  if (!Tape<T>::current()) return false;
  for (auto* p : ins)
    if (p->requires_grad()) return true;
  return false;
}

template <class T>
inline Tensor<T> finish(Tensor<T> out, const char* op) {
  if (debug_checks()) check_finite(out, op);
  return out;
}

// out[m x n] += a[m x k] * b[k x n]; saxpy form, vectorizes without
// reassociation permission.
template <class T>
inline void mm_nn(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* o = out + i * n;
    const T* ar = a + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const T s = ar[l];
      const T* br = b + l * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += s * br[j];
    }
  }
}

// out[k x n] += a^T[k x m] * g[m x n], reading a as m x k.
template <class T>
inline void mm_tn(const T* a, const T* g, T* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* gr = g + i * n;
    const T* ar = a + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const T s = ar[l];
      T* o = out + l * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += s * gr[j];
    }
  }
}

template <class T>
inline std::vector<T> transposed(const T* a, std::size_t m, std::size_t n) {
  std::vector<T> t(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
  return t;
}

template <class T>
inline void require_2d(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected 2-d tensor, got " + shape_str(t.shape()));
}

template <class T>
inline void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast primitives
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
  if (detail::tracing<T>({&a, &b})) {
    out.set_requires_grad();
    Tape<T>::current()->record(out, [a, b, out] {
      const auto& g = grad_buf(*out.node());
      if (a.requires_grad()) {
        auto& ga = grad_buf(*a.node());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto& gb = grad_buf(*b.node());
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return detail::finish(out, "add");
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
  if (detail::tracing<T>({&a, &b})) {
    out.set_requires_grad();
    Tape<T>::current()->record(out, [a, b, out] {
      const auto& g = grad_buf(*out.node());
      if (a.requires_grad()) {
        auto& ga = grad_buf(*a.node());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto& gb = grad_buf(*b.node());
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return detail::finish(out, "sub");
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
  if (detail::tracing<T>({&a, &b})) {
    out.set_requires_grad();
    Tape<T>::current()->record(out, [a, b, out] {
      const auto& g = grad_buf(*out.node());
      if (a.requires_grad()) {
        auto& ga = grad_buf(*a.node());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.at(i);
      }
      if (b.requires_grad()) {
        auto& gb = grad_buf(*b.node());
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.at(i);
      }
    });
  }
  return detail::finish(out, "mul");
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  Tensor<T> out(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * c;
  if (detail::tracing<T>({&a})) {
    out.set_requires_grad();
    Tape<T>::current()->record(out, [a, c, out] {
      const auto& g = grad_buf(*out.node());
      auto& ga = grad_buf(*a.node());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
  }
  return detail::finish(out, "scale");
}

// x[m x n] + row-broadcast bias[n]
template <class T>
Tensor<T> add_rowwise(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require_2d(x, "add_rowwise");
  const std::size_t m = x.rows(), n = x.cols();
  if (bias.size() != n)
    throw ShapeError("add_rowwise: bias " + shape_str(bias.shape()) + " does not match " +
                     shape_str(x.shape()));
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = x.at(i, j) + bias.at(j);
  if (detail::tracing<T>({&x, &bias})) {
    out.set_requires_grad();
    Tape<T>::current()->record(out, [x, bias, out, m, n] {
      const auto& g = grad_buf(*out.node());
      if (x.requires_grad()) {
        auto& gx = grad_buf(*x.node());
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto& gb = grad_buf(*bias.node());
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
    });
  }
  return detail::finish(out, "add_rowwise");
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

// a[m x k] * b[k x n]; backward dA = G B^T, dB = A^T G.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor<T> out({m, n});
  detail::mm_nn(a.ptr(), b.ptr(), out.ptr(), m, k, n);
  if (detail::tracing<T>({&a, &b})) {
    out.set_requires_grad();
    Tape<T>::current()->record(out, [a, b, out, m, k, n] {
      const auto& g = grad_buf(*out.node());
      if (a.requires_grad()) {
        auto bt = detail::transposed(b.ptr(), k, n);
        detail::mm_nn(g.data(), bt.data(), grad_buf(*a.node()).data(), m, n, k);
      }
      if (b.requires_grad()) detail::mm_tn(a.ptr(), g.data(), grad_buf(*b.node()).data(), m, k, n);
    });
  }
  return detail::finish(out, "matmul");
}

// a[m x k] * b[n x k]^T -> [m x n]
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d(a, "matmul_nt");
  detail::require_2d(b, "matmul_nt");
  if (a.cols() != b.cols())
    throw ShapeError("matmul_nt: inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor<T> out({m, n});
  auto bt = detail::transposed(b.ptr(), n, k);
  detail::mm_nn(a.ptr(), bt.data(), out.ptr(), m, k, n);
  if (detail::tracing<T>({&a, &b})) {
    out.set_requires_grad();
    Tape<T>::current()->record(out, [a, b, out, m, k, n] {
      const auto& g = grad_buf(*out.node());
      if (a.requires_grad()) detail::mm_nn(g.data(), b.ptr(), grad_buf(*a.node()).data(), m, n, k);
      if (b.requires_grad()) detail::mm_tn(g.data(), a.ptr(), grad_buf(*b.node()).data(), m, n, k);
    });
  }
  return detail::finish(out, "matmul_nt");
}

// ---------------------------------------------------------------------------
// Shape surgery
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_rows");
    if (p.cols() != n)
      throw ShapeError("concat_rows: column counts differ: " + shape_str(parts[0].shape()) +
                       " vs " + shape_str(p.shape()));
    m += p.rows();
  }
  Tensor<T> out({m, n});
  std::size_t r = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + static_cast<long>(r * n));
    r += p.rows();
  }
  bool rec = false;
  if (Tape<T>::current())
    for (const auto& p : parts) rec = rec || p.requires_grad();
  if (rec) {
    out.set_requires_grad();
    Tape<T>::current()->record(out, [parts, out, n] {
      const auto& g = grad_buf(*out.node());
      std::size_t r = 0;
      for (const auto& p : parts) {
        if (p.requires_grad()) {
          auto& gp = grad_buf(*p.node());
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[r * n + i];
        }
        r += p.rows();
      }
    });
  }
  return detail::finish(out, "concat_rows");
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no parts");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_cols");
    if (p.rows() != m)
      throw ShapeError("concat_cols: row counts differ: " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    n += p.cols();
  }
  Tensor<T> out({m, n});
  std::size_t c = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(p.ptr() + i * pc, pc, out.ptr() + i * n + c);
    c += pc;
  }
  bool rec = false;
  if (Tape<T>::current())
    for (const auto& p : parts) rec = rec || p.requires_grad();
  if (rec) {
    out.set_requires_grad();
    Tape<T>::current()->record(out, [parts, out, m, n] {
      const auto& g = grad_buf(*out.node());
      std::size_t c = 0;
      for (const auto& p : parts) {
        const std::size_t pc = p.cols();
        if (p.requires_grad()) {
          auto& gp = grad_buf(*p.node());
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < pc; ++j) gp[i * pc + j] += g[i * n + c + j];
        }
        c += pc;
      }
    });
  }
  return detail::finish(out, "concat_cols");
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t r0, std::size_t r1) {
  detail::require_2d(x, "slice_rows");
  if (r0 > r1 || r1 > x.rows())
    throw ShapeError("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r1) +
                     ") out of " + shape_str(x.shape()));
  const std::size_t n = x.cols(), m = r1 - r0;
  Tensor<T> out({m, n});
  std::copy_n(x.ptr() + r0 * n, m * n, out.ptr());
  if (detail::tracing<T>({&x})) {
    out.set_requires_grad();
    Tape<T>::current()->record(out, [x, out, r0, m, n] {
      const auto& g = grad_buf(*out.node());
      auto& gx = grad_buf(*x.node());
      for (std::size_t i = 0; i < m * n; ++i) gx[r0 * n + i] += g[i];
    });
  }
  return detail::finish(out, "slice_rows");
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t c0, std::size_t c1) {
  detail::require_2d(x, "slice_cols");
  if (c0 > c1 || c1 > x.cols())
    throw ShapeError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
                     ") out of " + shape_str(x.shape()));
  const std::size_t m = x.rows(), n = x.cols(), w = c1 - c0;
  Tensor<T> out({m, w});
  for (std::size_t i = 0; i < m; ++i) std::copy_n(x.ptr() + i * n + c0, w, out.ptr() + i * w);
  if (detail::tracing<T>({&x})) {
    out.set_requires_grad();
    Tape<T>::current()->record(out, [x, out, c0, m, n, w] {
      const auto& g = grad_buf(*out.node());
      auto& gx = grad_buf(*x.node());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) gx[i * n + c0 + j] += g[i * w + j];
    });
  }
  return detail::finish(out, "slice_cols");
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::vector<std::size_t> idx) {
  detail::require_2d(x, "gather_rows");
  const std::size_t n = x.cols();
  for (auto i : idx)
    if (i >= x.rows())
      throw ShapeError("gather_rows: index " + std::to_string(i) + " out of " +
                       shape_str(x.shape()));
  Tensor<T> out({idx.size(), n});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(x.ptr() + idx[i] * n, n, out.ptr() + i * n);
  if (detail::tracing<T>({&x})) {
    out.set_requires_grad();
    Tape<T>::current()->record(out, [x, out, idx = std::move(idx), n] {
      const auto& g = grad_buf(*out.node());
      auto& gx = grad_buf(*x.node());
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) gx[idx[i] * n + j] += g[i * n + j];
    });
  }
  return detail::finish(out, "gather_rows");
}

// Rebuild a tensor from arbitrary source elements: out flat position i takes
// x's flat position idx[i]. Duplicated sources are allowed; backward
// scatter-adds into them.
template <class T>
Tensor<T> gather_elems(const Tensor<T>& x, std::vector<std::size_t> idx, Shape out_shape) {
  std::size_t want = 1;
  for (auto d : out_shape) want *= d;
  if (idx.size() != want)
    throw ShapeError("gather_elems: " + std::to_string(idx.size()) + " indices for shape " +
                     shape_str(out_shape));
  for (auto i : idx)
    if (i >= x.size())
      throw ShapeError("gather_elems: index " + std::to_string(i) + " out of " +
                       std::to_string(x.size()) + " elements");
  Tensor<T> out(std::move(out_shape));
  for (std::size_t i = 0; i < idx.size(); ++i) out.at(i) = x.at(idx[i]);
  if (detail::tracing<T>({&x})) {
    out.set_requires_grad();
    Tape<T>::current()->record(out, [x, out, idx = std::move(idx)] {
      const auto& g = grad_buf(*out.node());
      auto& gx = grad_buf(*x.node());
      for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += g[i];
    });
  }
  return detail::finish(out, "gather_elems");
}

// Broadcast a 1 x d row to m x d; backward sums over rows.
template <class T>
Tensor<T> repeat_row(const Tensor<T>& row, std::size_t m) {
  detail::require_2d(row, "repeat_row");
  if (row.rows() != 1) throw ShapeError("repeat_row: expected 1 x d, got " + shape_str(row.shape()));
  const std::size_t d = row.cols();
  Tensor<T> out({m, d});
  for (std::size_t i = 0; i < m; ++i) std::copy_n(row.ptr(), d, out.ptr() + i * d);
  if (detail::tracing<T>({&row})) {
    out.set_requires_grad();
    Tape<T>::current()->record(out, [row, out, m, d] {
      const auto& g = grad_buf(*out.node());
      auto& gr = grad_buf(*row.node());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) gr[j] += g[i * d + j];
    });
  }
  return detail::finish(out, "repeat_row");
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

// tanh approximation of GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double kC = 0.7978845608028653558798921198687;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  Tensor<T> out(x.shape());
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) {
    double v = static_cast<double>(x.at(i));
    double u = kC * (v + kA * v * v * v);
    out.at(i) = static_cast<T>(0.5 * v * (1.0 + std::tanh(u)));
  }
  if (detail::tracing<T>({&x})) {
    out.set_requires_grad();
    Tape<T>::current()->record(out, [x, out, n] {
      const auto& g = grad_buf(*out.node());
      auto& gx = grad_buf(*x.node());
      for (std::size_t i = 0; i < n; ++i) {
        double v = static_cast<double>(x.at(i));
        double u = kC * (v + kA * v * v * v);
        double t = std::tanh(u);
        double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * v * v);
        gx[i] += g[i] * static_cast<T>(d);
      }
    });
  }
  return detail::finish(out, "gelu");
}

// Row-wise layer normalization with affine parameters.
template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    double eps = 1e-6) {
  detail::require_2d(x, "layernorm");
  const std::size_t m = x.rows(), n = x.cols();
  if (gamma.size() != n || beta.size() != n)
    throw ShapeError("layernorm: affine params do not match " + shape_str(x.shape()));
  Tensor<T> out(x.shape());
  std::vector<T> xhat(m * n);
  std::vector<T> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += static_cast<double>(x.at(i, j));
    mu /= static_cast<double>(n);
    double var = 0;
    for (std::size_t j = 0; j < n; ++j) {
      double d = static_cast<double>(x.at(i, j)) - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = static_cast<T>(is);
    for (std::size_t j = 0; j < n; ++j) {
      T xh = static_cast<T>((static_cast<double>(x.at(i, j)) - mu) * is);
      xhat[i * n + j] = xh;
      out.at(i, j) = gamma.at(j) * xh + beta.at(j);
    }
  }
  if (detail::tracing<T>({&x, &gamma, &beta})) {
    out.set_requires_grad();
    Tape<T>::current()->record(
        out,
        [x, gamma, beta, out, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
          const auto& g = grad_buf(*out.node());
          if (gamma.requires_grad()) {
            auto& gg = grad_buf(*gamma.node());
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
          }
          if (beta.requires_grad()) {
            auto& gb = grad_buf(*beta.node());
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
          }
          if (x.requires_grad()) {
            auto& gx = grad_buf(*x.node());
            for (std::size_t i = 0; i < m; ++i) {
              double mean_d = 0, mean_dx = 0;
              for (std::size_t j = 0; j < n; ++j) {
                double d = static_cast<double>(g[i * n + j]) * static_cast<double>(gamma.at(j));
                mean_d += d;
                mean_dx += d * static_cast<double>(xhat[i * n + j]);
              }
              mean_d /= static_cast<double>(n);
              mean_dx /= static_cast<double>(n);
              for (std::size_t j = 0; j < n; ++j) {
                double d = static_cast<double>(g[i * n + j]) * static_cast<double>(gamma.at(j));
                gx[i * n + j] += static_cast<T>(
                    static_cast<double>(inv_std[i]) *
                    (d - mean_d - static_cast<double>(xhat[i * n + j]) * mean_dx));
              }
            }
          }
        });
  }
  return detail::finish(out, "layernorm");
}

namespace detail {

// Softmax over contiguous slices [len] repeated outer*inner times with stride.
// Max-subtraction for stability; the normalizer accumulates in double so rows
// sum to 1 within a few ulps even in float mode.
template <class T>
inline void softmax_slices(const T* in, T* out, std::size_t outer, std::size_t len,
                           std::size_t inner) {
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t s = 0; s < inner; ++s) {
      const T* src = in + o * len * inner + s;
      T* dst = out + o * len * inner + s;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < len; ++i)
        mx = std::max(mx, static_cast<double>(src[i * inner]));
      double denom = 0;
      for (std::size_t i = 0; i < len; ++i) {
        double e = std::exp(static_cast<double>(src[i * inner]) - mx);
        dst[i * inner] = static_cast<T>(e);
        denom += e;
      }
      for (std::size_t i = 0; i < len; ++i)
        dst[i * inner] = static_cast<T>(static_cast<double>(dst[i * inner]) / denom);
    }
  }
}

}  // namespace detail

// Softmax along the given axis (negative counts from the end).
template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(axis);
  Tensor<T> out(x.shape());
  detail::softmax_slices(x.ptr(), out.ptr(), outer, len, inner);
  if (detail::tracing<T>({&x})) {
    out.set_requires_grad();
    Tape<T>::current()->record(out, [x, out, outer, len, inner] {
      const auto& g = grad_buf(*out.node());
      auto& gx = grad_buf(*x.node());
      const T* y = out.ptr();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t s = 0; s < inner; ++s) {
          const std::size_t base = o * len * inner + s;
          double dot = 0;
          for (std::size_t i = 0; i < len; ++i)
            dot += static_cast<double>(g[base + i * inner]) *
                   static_cast<double>(y[base + i * inner]);
          for (std::size_t i = 0; i < len; ++i)
            gx[base + i * inner] += static_cast<T>(
                static_cast<double>(y[base + i * inner]) *
                (static_cast<double>(g[base + i * inner]) - dot));
        }
    });
  }
  return detail::finish(out, "softmax");
}

// Row-wise softmax over the key columns where key_allowed is nonzero.
// Disallowed columns get probability exactly zero and receive no gradient.
template <class T>
Tensor<T> masked_softmax_rows(const Tensor<T>& x, const std::vector<std::uint8_t>& key_allowed) {
  detail::require_2d(x, "masked_softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (key_allowed.size() != n)
    throw ShapeError("masked_softmax_rows: mask size " + std::to_string(key_allowed.size()) +
                     " does not match " + shape_str(x.shape()));
  bool any = false;
  for (auto v : key_allowed) any = any || (v != 0);
  if (!any) throw ContractError("masked_softmax_rows: all key columns masked");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (key_allowed[j]) mx = std::max(mx, static_cast<double>(x.at(i, j)));
    double denom = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (key_allowed[j]) {
        double e = std::exp(static_cast<double>(x.at(i, j)) - mx);
        out.at(i, j) = static_cast<T>(e);
        denom += e;
      } else {
        out.at(i, j) = T(0);
      }
    }
    for (std::size_t j = 0; j < n; ++j)
      if (key_allowed[j]) out.at(i, j) = static_cast<T>(static_cast<double>(out.at(i, j)) / denom);
  }
  if (detail::tracing<T>({&x})) {
    out.set_requires_grad();
    Tape<T>::current()->record(out, [x, out, m, n] {
      const auto& g = grad_buf(*out.node());
      auto& gx = grad_buf(*x.node());
      const T* y = out.ptr();
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0;
        for (std::size_t j = 0; j < n; ++j)
          dot += static_cast<double>(g[i * n + j]) * static_cast<double>(y[i * n + j]);
        for (std::size_t j = 0; j < n; ++j)
          gx[i * n + j] += static_cast<T>(static_cast<double>(y[i * n + j]) *
                                          (static_cast<double>(g[i * n + j]) - dot));
      }
    });
  }
  return detail::finish(out, "masked_softmax_rows");
}

// Natural log; domain x > 0.
template <class T>
Tensor<T> log(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (x.at(i) <= T(0)) throw NumericError("log: non-positive input");
    out.at(i) = std::log(x.at(i));
  }
  if (detail::tracing<T>({&x})) {
    out.set_requires_grad();
    Tape<T>::current()->record(out, [x, out, n] {
      const auto& g = grad_buf(*out.node());
      auto& gx = grad_buf(*x.node());
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] / x.at(i);
    });
  }
  return detail::finish(out, "log");
}

// Elementwise square root; domain x >= 0 (derivative unbounded at 0).
template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (x.at(i) < T(0)) throw NumericError("sqrt: negative input");
    out.at(i) = std::sqrt(x.at(i));
  }
  if (detail::tracing<T>({&x})) {
    out.set_requires_grad();
    Tape<T>::current()->record(out, [x, out, n] {
      const auto& g = grad_buf(*out.node());
      auto& gx = grad_buf(*x.node());
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * T(0.5) / out.at(i);
    });
  }
  return detail::finish(out, "sqrt");
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0;
  for (const T& v : x.data()) acc += static_cast<double>(v);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  if (detail::tracing<T>({&x})) {
    out.set_requires_grad();
    Tape<T>::current()->record(out, [x, out] {
      const T g = grad_buf(*out.node())[0];
      auto& gx = grad_buf(*x.node());
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return detail::finish(out, "sum");
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.size() == 0) throw ContractError("mean: empty tensor");
  double acc = 0;
  for (const T& v : x.data()) acc += static_cast<double>(v);
  const double n = static_cast<double>(x.size());
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / n));
  if (detail::tracing<T>({&x})) {
    out.set_requires_grad();
    Tape<T>::current()->record(out, [x, out, n] {
      const T g = static_cast<T>(static_cast<double>(grad_buf(*out.node())[0]) / n);
      auto& gx = grad_buf(*x.node());
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return detail::finish(out, "mean");
}

// Mean cross-entropy of logit rows against integer labels; rows whose label
// equals ignore_label are skipped. Backward is (softmax - onehot) / counted.
template <class T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, const std::vector<int>& labels,
                               int ignore_label = -1) {
  detail::require_2d(logits, "cross_entropy_logits");
  const std::size_t m = logits.rows(), k = logits.cols();
  if (labels.size() != m)
    throw ShapeError("cross_entropy_logits: " + std::to_string(labels.size()) + " labels for " +
                     shape_str(logits.shape()));
  std::size_t counted = 0;
  double total = 0;
  std::vector<T> probs(m * k);
  for (std::size_t i = 0; i < m; ++i) {
    const int lab = labels[i];
    if (lab == ignore_label) continue;
    if (lab < 0 || static_cast<std::size_t>(lab) >= k)
      throw ContractError("cross_entropy_logits: label " + std::to_string(lab) +
                          " out of range [0," + std::to_string(k) + ")");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>(logits.at(i, j)));
    double denom = 0;
    for (std::size_t j = 0; j < k; ++j) {
      double e = std::exp(static_cast<double>(logits.at(i, j)) - mx);
      probs[i * k + j] = static_cast<T>(e);
      denom += e;
    }
    for (std::size_t j = 0; j < k; ++j)
      probs[i * k + j] = static_cast<T>(static_cast<double>(probs[i * k + j]) / denom);
    total += std::log(denom) + mx - static_cast<double>(logits.at(i, static_cast<std::size_t>(lab)));
    ++counted;
  }
  if (counted == 0) throw ContractError("cross_entropy_logits: every row ignored");
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(counted)));
  if (detail::tracing<T>({&logits})) {
    out.set_requires_grad();
    Tape<T>::current()->record(
        out,
        [logits, out, labels, ignore_label, m, k, counted, probs = std::move(probs)] {
          const double g = static_cast<double>(grad_buf(*out.node())[0]);
          auto& gx = grad_buf(*logits.node());
          const double inv = g / static_cast<double>(counted);
          for (std::size_t i = 0; i < m; ++i) {
            if (labels[i] == ignore_label) continue;
            for (std::size_t j = 0; j < k; ++j) {
              double p = static_cast<double>(probs[i * k + j]);
              double onehot = (static_cast<std::size_t>(labels[i]) == j) ? 1.0 : 0.0;
              gx[i * k + j] += static_cast<T>((p - onehot) * inv);
            }
          }
        });
  }
  return detail::finish(out, "cross_entropy_logits");
}

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> randn(Rng& rng, Shape shape, double stdev = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.normal() * stdev);
  return t;
}

template <class T>
Tensor<T> trunc_normal(Rng& rng, Shape shape, double stdev) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(stdev));
  return t;
}

template <class T>
Tensor<T> uniform(Rng& rng, Shape shape, double lo, double hi) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <class T>
Tensor<T> identity(std::size_t n) {
  Tensor<T> t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = T(1);
  return t;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
  bool nondeterministic = false;  // two forward passes disagreed (reported distinctly)
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t worst_leaf = 0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  std::size_t failures = 0;
  double tolerance = 0.0;

  bool pass() const { return !nondeterministic && failures == 0; }
};

// Central-difference check of reverse-mode gradients for a deterministic
// scalar function of the given leaves. Per-element error is
//   |ad - fd| / max(|ad|, |fd|, denom_floor)
// so elements whose gradient magnitude is below denom_floor are effectively
// compared absolutely at tolerance * denom_floor.
template <class T, class Forward>
GradCheckReport gradient_check_leaves(Forward&& forward, std::span<Tensor<T>> leaves,
                                      double step = 1e-6, double tolerance = 1e-5,
                                      double denom_floor = 1e-4) {
  GradCheckReport rep;
  rep.tolerance = tolerance;

  std::vector<T> f1, f2;
  {
    typename Tape<T>::NoGrad ng;
    f1 = forward().data();
    f2 = forward().data();
  }
  if (f1 != f2) {
    rep.nondeterministic = true;
    return rep;
  }

  std::vector<std::vector<T>> analytic;
  {
    for (auto& leaf : leaves) {
      leaf.set_requires_grad();
      leaf.zero_grad();
    }
    Tape<T> tape;
    typename Tape<T>::Scope scope(tape);
    Tensor<T> loss = forward();
    tape.backward(loss);
    for (auto& leaf : leaves) analytic.push_back(leaf.grad());
  }

  typename Tape<T>::NoGrad ng;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    for (std::size_t i = 0; i < leaf.size(); ++i) {
      const T orig = leaf.at(i);
      const double h = step * (1.0 + std::fabs(static_cast<double>(orig)));
      leaf.at(i) = static_cast<T>(static_cast<double>(orig) + h);
      const double hp = static_cast<double>(leaf.at(i)) - static_cast<double>(orig);
      const double fp = static_cast<double>(forward().item());
      leaf.at(i) = static_cast<T>(static_cast<double>(orig) - h);
      const double hm = static_cast<double>(orig) - static_cast<double>(leaf.at(i));
      const double fm = static_cast<double>(forward().item());
      leaf.at(i) = orig;

      const double fd = (fp - fm) / (hp + hm);
      const double ad = static_cast<double>(analytic[li][i]);
      const double abs_err = std::fabs(ad - fd);
      const double rel =
          abs_err / std::max({std::fabs(ad), std::fabs(fd), denom_floor});
      ++rep.checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_leaf = li;
        rep.worst_index = i;
      }
      rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
      if (rel > tolerance) ++rep.failures;
    }
  }
  return rep;
}

template <class T, class F>
GradCheckReport gradient_check(F&& f, Tensor<T> x, double step = 1e-6, double tolerance = 1e-5,
                               double denom_floor = 1e-4) {
  std::vector<Tensor<T>> leaves{x};
  auto forward = [&] { return f(leaves[0]); };
  return gradient_check_leaves<T>(forward, std::span<Tensor<T>>(leaves), step, tolerance,
                                  denom_floor);
}

}  // namespace glimpse
