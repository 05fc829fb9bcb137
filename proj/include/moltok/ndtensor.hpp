// Dense tensors with reverse-mode automatic differentiation.
//
// The scalar type is a template parameter: float for training runs,
// double for verification (finite-difference and bit-identity checks).
// Ops record backward closures on the active Tape; parameters are leaf
// tensors with requires_grad set. All loops are deterministic: parallel
// sections only ever split work so that each output element is produced
// by exactly one thread in a fixed order.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace moltok::ndt {

// ---------------------------------------------------------------------------
// Deterministic splitmix64 RNG
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    // Box-Muller; consumes two uniforms per draw, no caching.
    const double u1 = std::max(uniform(), 1e-300);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  int below(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

  // Fisher-Yates permutation of 0..n-1.
  std::vector<int> permutation(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    for (int i = n - 1; i > 0; --i) std::swap(p[i], p[below(i + 1)]);
    return p;
  }

 private:
  uint64_t state_;
};

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline int64_t shape_numel(const std::vector<int>& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

template <class T>
struct TensorImpl {
  std::vector<int> shape;
  std::vector<T> val;
  std::vector<T> grad;  // allocated lazily
  bool requires_grad = false;
};

template <class T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape) {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<T>>();
    t.impl_->shape = std::move(shape);
    t.impl_->val.assign(shape_numel(t.impl_->shape), T(0));
    return t;
  }

  static Tensor full(std::vector<int> shape, T v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.impl_->val.begin(), t.impl_->val.end(), v);
    return t;
  }

  static Tensor scalar(T v) { return full({1}, v); }

  static Tensor from(std::vector<int> shape, std::vector<T> values) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
      throw std::invalid_argument("value count does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<T>>();
    t.impl_->shape = std::move(shape);
    t.impl_->val = std::move(values);
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int64_t numel() const { return static_cast<int64_t>(impl_->val.size()); }
  int dim(int i) const { return impl_->shape[i]; }
  int rows() const { return impl_->shape[0]; }
  int cols() const { return impl_->shape.size() > 1 ? impl_->shape[1] : 1; }

  T* data() { return impl_->val.data(); }
  const T* data() const { return impl_->val.data(); }
  std::vector<T>& values() { return impl_->val; }
  const std::vector<T>& values() const { return impl_->val; }

  T item() const {
    if (numel() != 1) throw std::invalid_argument("item() on non-scalar tensor");
    return impl_->val[0];
  }

  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  bool requires_grad() const { return defined() && impl_->requires_grad; }

  void ensure_grad() {
    if (impl_->grad.size() != impl_->val.size()) impl_->grad.assign(impl_->val.size(), T(0));
  }
  bool has_grad() const { return impl_->grad.size() == impl_->val.size(); }
  T* grad_data() {
    ensure_grad();
    return impl_->grad.data();
  }
  const std::vector<T>& grad() const { return impl_->grad; }
  void zero_grad() {
    if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  Tensor clone_detached() const {
    Tensor t = Tensor::from(impl_->shape, impl_->val);
    return t;
  }

  bool same_impl(const Tensor& o) const { return impl_ == o.impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

template <class T>
class Tape {
 public:
  struct Node {
    Tensor<T> out;
    std::function<void()> backward;
  };

  static Tape*& active_slot() {
    thread_local Tape* active = nullptr;
    return active;
  }
  static Tape* active() { return active_slot(); }

  class Scope {
   public:
    explicit Scope(Tape& t) : prev_(active_slot()) { active_slot() = &t; }
    ~Scope() { active_slot() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  void record(Tensor<T> out, std::function<void()> backward) {
    nodes_.push_back({std::move(out), std::move(backward)});
  }

  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Populates gradients of every reachable tensor with requires_grad.
  // Gradients of intermediate (recorded) outputs are zeroed first, so a
  // second call reproduces the same leaf gradients bit for bit; leaf
  // gradients accumulate and are zeroed by the caller/optimizer.
  void backward(Tensor<T> loss) {
    if (loss.numel() != 1) throw std::invalid_argument("backward on non-scalar loss");
    for (auto& n : nodes_) n.out.zero_grad();
    loss.ensure_grad();
    loss.grad_data()[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->backward) it->backward();
    }
  }

 private:
  std::vector<Node> nodes_;
};

namespace detail {

template <class T>
bool tracing(std::initializer_list<Tensor<T>> inputs) {
  if (Tape<T>::active() == nullptr) return false;
  for (const auto& t : inputs) {
    if (t.requires_grad()) return true;
  }
  return false;
}

template <class T>
void mark_and_record(Tensor<T>& out, std::function<void()> backward) {
  out.set_requires_grad(true);
  Tape<T>::active()->record(out, std::move(backward));
}

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(Tensor<T> a, Tensor<T> b) {
  detail::check_same_shape(a, b, "add");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] + pb[i];
  if (detail::tracing<T>({a, b})) {
    detail::mark_and_record(out, [a, b, out]() mutable {
      const T* g = out.grad_data();
      if (a.requires_grad()) {
        T* ga = a.grad_data();
        for (int64_t i = 0; i < a.numel(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad_data();
        for (int64_t i = 0; i < b.numel(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(Tensor<T> a, Tensor<T> b) {
  detail::check_same_shape(a, b, "sub");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] - pb[i];
  if (detail::tracing<T>({a, b})) {
    detail::mark_and_record(out, [a, b, out]() mutable {
      const T* g = out.grad_data();
      if (a.requires_grad()) {
        T* ga = a.grad_data();
        for (int64_t i = 0; i < a.numel(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad_data();
        for (int64_t i = 0; i < b.numel(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(Tensor<T> a, Tensor<T> b) {
  detail::check_same_shape(a, b, "mul");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] * pb[i];
  if (detail::tracing<T>({a, b})) {
    detail::mark_and_record(out, [a, b, out]() mutable {
      const T* g = out.grad_data();
      if (a.requires_grad()) {
        T* ga = a.grad_data();
        const T* pb2 = b.data();
        for (int64_t i = 0; i < a.numel(); ++i) ga[i] += g[i] * pb2[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad_data();
        const T* pa2 = a.data();
        for (int64_t i = 0; i < b.numel(); ++i) gb[i] += g[i] * pa2[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> add_scalar(Tensor<T> a, T c) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] + c;
  if (detail::tracing<T>({a})) {
    detail::mark_and_record(out, [a, out]() mutable {
      const T* g = out.grad_data();
      T* ga = a.grad_data();
      for (int64_t i = 0; i < a.numel(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> mul_scalar(Tensor<T> a, T c) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] * c;
  if (detail::tracing<T>({a})) {
    detail::mark_and_record(out, [a, out, c]() mutable {
      const T* g = out.grad_data();
      T* ga = a.grad_data();
      for (int64_t i = 0; i < a.numel(); ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

// y = x * s where s is a one-element (learnable) tensor
template <class T>
Tensor<T> scale_by(Tensor<T> x, Tensor<T> s) {
  if (s.numel() != 1) throw std::invalid_argument("scale_by: scale must be one element");
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T sv = s.data()[0];
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) po[i] = px[i] * sv;
  if (detail::tracing<T>({x, s})) {
    detail::mark_and_record(out, [x, s, out]() mutable {
      const T* g = out.grad_data();
      if (x.requires_grad()) {
        T* gx = x.grad_data();
        const T sv2 = s.data()[0];
        for (int64_t i = 0; i < x.numel(); ++i) gx[i] += g[i] * sv2;
      }
      if (s.requires_grad()) {
        const T* px2 = x.data();
        T acc = T(0);
        for (int64_t i = 0; i < x.numel(); ++i) acc += g[i] * px2[i];
        s.grad_data()[0] += acc;
      }
    });
  }
  return out;
}

// y = x + v broadcast over rows (v has x.cols() entries)
template <class T>
Tensor<T> add_rowvec(Tensor<T> x, Tensor<T> v) {
  const int r = x.rows();
  const int c = x.cols();
  if (v.numel() != c) {
    throw std::invalid_argument("add_rowvec: " + shape_str(x.shape()) + " vs " +
                                shape_str(v.shape()));
  }
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  const T* pv = v.data();
  T* po = out.data();
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) po[i * c + j] = px[i * c + j] + pv[j];
  }
  if (detail::tracing<T>({x, v})) {
    detail::mark_and_record(out, [x, v, out, r, c]() mutable {
      const T* g = out.grad_data();
      if (x.requires_grad()) {
        T* gx = x.grad_data();
        for (int64_t i = 0; i < x.numel(); ++i) gx[i] += g[i];
      }
      if (v.requires_grad()) {
        T* gv = v.grad_data();
        for (int i = 0; i < r; ++i) {
          for (int j = 0; j < c; ++j) gv[j] += g[i * c + j];
        }
      }
    });
  }
  return out;
}

// y[i,j] = x[i,j] * v[j]
template <class T>
Tensor<T> mul_rowvec(Tensor<T> x, Tensor<T> v) {
  const int r = x.rows();
  const int c = x.cols();
  if (v.numel() != c) {
    throw std::invalid_argument("mul_rowvec: " + shape_str(x.shape()) + " vs " +
                                shape_str(v.shape()));
  }
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  const T* pv = v.data();
  T* po = out.data();
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) po[i * c + j] = px[i * c + j] * pv[j];
  }
  if (detail::tracing<T>({x, v})) {
    detail::mark_and_record(out, [x, v, out, r, c]() mutable {
      const T* g = out.grad_data();
      if (x.requires_grad()) {
        T* gx = x.grad_data();
        const T* pv2 = v.data();
        for (int i = 0; i < r; ++i) {
          for (int j = 0; j < c; ++j) gx[i * c + j] += g[i * c + j] * pv2[j];
        }
      }
      if (v.requires_grad()) {
        T* gv = v.grad_data();
        const T* px2 = x.data();
        for (int i = 0; i < r; ++i) {
          for (int j = 0; j < c; ++j) gv[j] += g[i * c + j] * px2[i * c + j];
        }
      }
    });
  }
  return out;
}

// y[i,j] = x[i,j] * v[i]
template <class T>
Tensor<T> mul_colvec(Tensor<T> x, Tensor<T> v) {
  const int r = x.rows();
  const int c = x.cols();
  if (v.numel() != r) {
    throw std::invalid_argument("mul_colvec: " + shape_str(x.shape()) + " vs " +
                                shape_str(v.shape()));
  }
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  const T* pv = v.data();
  T* po = out.data();
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) po[i * c + j] = px[i * c + j] * pv[i];
  }
  if (detail::tracing<T>({x, v})) {
    detail::mark_and_record(out, [x, v, out, r, c]() mutable {
      const T* g = out.grad_data();
      if (x.requires_grad()) {
        T* gx = x.grad_data();
        const T* pv2 = v.data();
        for (int i = 0; i < r; ++i) {
          for (int j = 0; j < c; ++j) gx[i * c + j] += g[i * c + j] * pv2[i];
        }
      }
      if (v.requires_grad()) {
        T* gv = v.grad_data();
        const T* px2 = x.data();
        for (int i = 0; i < r; ++i) {
          T acc = T(0);
          for (int j = 0; j < c; ++j) acc += g[i * c + j] * px2[i * c + j];
          gv[i] += acc;
        }
      }
    });
  }
  return out;
}

// y[i,j] = x[i,j] / v[i]
template <class T>
Tensor<T> div_colvec(Tensor<T> x, Tensor<T> v) {
  const int r = x.rows();
  const int c = x.cols();
  if (v.numel() != r) {
    throw std::invalid_argument("div_colvec: " + shape_str(x.shape()) + " vs " +
                                shape_str(v.shape()));
  }
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  const T* pv = v.data();
  T* po = out.data();
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) po[i * c + j] = px[i * c + j] / pv[i];
  }
  if (detail::tracing<T>({x, v})) {
    detail::mark_and_record(out, [x, v, out, r, c]() mutable {
      const T* g = out.grad_data();
      const T* pv2 = v.data();
      if (x.requires_grad()) {
        T* gx = x.grad_data();
        for (int i = 0; i < r; ++i) {
          for (int j = 0; j < c; ++j) gx[i * c + j] += g[i * c + j] / pv2[i];
        }
      }
      if (v.requires_grad()) {
        T* gv = v.grad_data();
        const T* px2 = x.data();
        for (int i = 0; i < r; ++i) {
          T acc = T(0);
          for (int j = 0; j < c; ++j) acc -= g[i * c + j] * px2[i * c + j];
          gv[i] += acc / (pv2[i] * pv2[i]);
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sqrt_eps(Tensor<T> x, T eps) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) po[i] = std::sqrt(px[i] + eps);
  if (detail::tracing<T>({x})) {
    detail::mark_and_record(out, [x, out]() mutable {
      const T* g = out.grad_data();
      const T* po2 = out.data();
      T* gx = x.grad_data();
      for (int64_t i = 0; i < x.numel(); ++i) gx[i] += g[i] * T(0.5) / po2[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> gelu(Tensor<T> x) {
  // tanh approximation
  constexpr double kAlpha = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kBeta = 0.044715;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double xv = px[i];
    const double t = std::tanh(kAlpha * (xv + kBeta * xv * xv * xv));
    po[i] = static_cast<T>(0.5 * xv * (1.0 + t));
  }
  if (detail::tracing<T>({x})) {
    detail::mark_and_record(out, [x, out]() mutable {
      const T* g = out.grad_data();
      const T* px2 = x.data();
      T* gx = x.grad_data();
      for (int64_t i = 0; i < x.numel(); ++i) {
        const double xv = px2[i];
        const double u = kAlpha * (xv + kBeta * xv * xv * xv);
        const double t = std::tanh(u);
        const double du = kAlpha * (1.0 + 3.0 * kBeta * xv * xv);
        const double d = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du;
        gx[i] += g[i] * static_cast<T>(d);
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> stop_gradient(Tensor<T> x) {
  // Forward identity; no tape node, so backward contributes nothing.
  return x.clone_detached();
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(Tensor<T> x, std::vector<int> shape) {
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " to " +
                                shape_str(shape));
  }
  Tensor<T> out = Tensor<T>::from(std::move(shape), x.values());
  if (detail::tracing<T>({x})) {
    detail::mark_and_record(out, [x, out]() mutable {
      const T* g = out.grad_data();
      T* gx = x.grad_data();
      for (int64_t i = 0; i < x.numel(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> transpose(Tensor<T> x) {
  const int r = x.rows();
  const int c = x.cols();
  Tensor<T> out = Tensor<T>::zeros({c, r});
  const T* px = x.data();
  T* po = out.data();
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) po[j * r + i] = px[i * c + j];
  }
  if (detail::tracing<T>({x})) {
    detail::mark_and_record(out, [x, out, r, c]() mutable {
      const T* g = out.grad_data();
      T* gx = x.grad_data();
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
  const int c = parts[0].cols();
  int total = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) {
      throw std::invalid_argument("concat_rows: column mismatch " +
                                  shape_str(parts[0].shape()) + " vs " +
                                  shape_str(p.shape()));
    }
    total += p.rows();
  }
  Tensor<T> out = Tensor<T>::zeros({total, c});
  T* po = out.data();
  int row = 0;
  for (const auto& p : parts) {
    std::copy(p.data(), p.data() + p.numel(), po + static_cast<int64_t>(row) * c);
    row += p.rows();
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (Tape<T>::active() && any) {
    std::vector<Tensor<T>> held = parts;
    detail::mark_and_record(out, [held, out, c]() mutable {
      const T* g = out.grad_data();
      int row = 0;
      for (auto& p : held) {
        if (p.requires_grad()) {
          T* gp = p.grad_data();
          for (int64_t i = 0; i < p.numel(); ++i) gp[i] += g[static_cast<int64_t>(row) * c + i];
        }
        row += p.rows();
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> slice_rows(Tensor<T> x, int r0, int r1) {
  const int r = x.rows();
  const int c = x.cols();
  if (r0 < 0 || r1 > r || r0 >= r1) throw std::invalid_argument("slice_rows: bad range");
  Tensor<T> out = Tensor<T>::zeros({r1 - r0, c});
  std::copy(x.data() + static_cast<int64_t>(r0) * c, x.data() + static_cast<int64_t>(r1) * c,
            out.data());
  if (detail::tracing<T>({x})) {
    detail::mark_and_record(out, [x, out, r0, c]() mutable {
      const T* g = out.grad_data();
      T* gx = x.grad_data();
      for (int64_t i = 0; i < out.numel(); ++i) gx[static_cast<int64_t>(r0) * c + i] += g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> concat_cols(Tensor<T> a, Tensor<T> b) {
  const int r = a.rows();
  if (b.rows() != r) {
    throw std::invalid_argument("concat_cols: row mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
  const int ca = a.cols();
  const int cb = b.cols();
  Tensor<T> out = Tensor<T>::zeros({r, ca + cb});
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (int i = 0; i < r; ++i) {
    std::copy(pa + static_cast<int64_t>(i) * ca, pa + static_cast<int64_t>(i + 1) * ca,
              po + static_cast<int64_t>(i) * (ca + cb));
    std::copy(pb + static_cast<int64_t>(i) * cb, pb + static_cast<int64_t>(i + 1) * cb,
              po + static_cast<int64_t>(i) * (ca + cb) + ca);
  }
  if (detail::tracing<T>({a, b})) {
    detail::mark_and_record(out, [a, b, out, r, ca, cb]() mutable {
      const T* g = out.grad_data();
      if (a.requires_grad()) {
        T* ga = a.grad_data();
        for (int i = 0; i < r; ++i) {
          for (int j = 0; j < ca; ++j) ga[i * ca + j] += g[i * (ca + cb) + j];
        }
      }
      if (b.requires_grad()) {
        T* gb = b.grad_data();
        for (int i = 0; i < r; ++i) {
          for (int j = 0; j < cb; ++j) gb[i * cb + j] += g[i * (ca + cb) + ca + j];
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> slice_cols(Tensor<T> x, int c0, int c1) {
  const int r = x.rows();
  const int c = x.cols();
  if (c0 < 0 || c1 > c || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
  const int w = c1 - c0;
  Tensor<T> out = Tensor<T>::zeros({r, w});
  const T* px = x.data();
  T* po = out.data();
  for (int i = 0; i < r; ++i) {
    std::copy(px + static_cast<int64_t>(i) * c + c0, px + static_cast<int64_t>(i) * c + c1,
              po + static_cast<int64_t>(i) * w);
  }
  if (detail::tracing<T>({x})) {
    detail::mark_and_record(out, [x, out, r, c, c0, w]() mutable {
      const T* g = out.grad_data();
      T* gx = x.grad_data();
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < w; ++j) gx[i * c + c0 + j] += g[i * w + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

namespace detail {

// C += A[m x k] * B[k x n]
template <class T>
void mm_acc(const T* a, const T* b, T* c, int m, int k, int n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (static_cast<int64_t>(m) * k * n > 262144)
#endif
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<int64_t>(i) * n;
    const T* arow = a + static_cast<int64_t>(i) * k;
    for (int l = 0; l < k; ++l) {
      const T av = arow[l];
      const T* brow = b + static_cast<int64_t>(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A[m x k] * B^T where B is [n x k]
template <class T>
void mm_acc_nt(const T* a, const T* b, T* c, int m, int k, int n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (static_cast<int64_t>(m) * k * n > 262144)
#endif
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<int64_t>(i) * k;
    T* crow = c + static_cast<int64_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<int64_t>(j) * k;
      T acc = T(0);
      for (int l = 0; l < k; ++l) acc += arow[l] * brow[l];
      crow[j] += acc;
    }
  }
}

// C += A^T * B where A is [m x k], B is [m x n], C is [k x n]
template <class T>
void mm_acc_tn(const T* a, const T* b, T* c, int m, int k, int n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (static_cast<int64_t>(m) * k * n > 262144)
#endif
  for (int l = 0; l < k; ++l) {
    T* crow = c + static_cast<int64_t>(l) * n;
    for (int i = 0; i < m; ++i) {
      const T av = a[static_cast<int64_t>(i) * k + l];
      const T* brow = b + static_cast<int64_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

template <class T>
Tensor<T> matmul(Tensor<T> a, Tensor<T> b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
  const int m = a.rows();
  const int k = a.cols();
  const int n = b.cols();
  Tensor<T> out = Tensor<T>::zeros({m, n});
  detail::mm_acc(a.data(), b.data(), out.data(), m, k, n);
  if (detail::tracing<T>({a, b})) {
    detail::mark_and_record(out, [a, b, out, m, k, n]() mutable {
      const T* g = out.grad_data();
      if (a.requires_grad()) detail::mm_acc_nt(g, b.data(), a.grad_data(), m, n, k);
      if (b.requires_grad()) detail::mm_acc_tn(a.data(), g, b.grad_data(), m, k, n);
    });
  }
  return out;
}

// Fused linear layer: out = x W + b. One tape node instead of two.
template <class T>
Tensor<T> affine(Tensor<T> x, Tensor<T> w, Tensor<T> b) {
  if (x.cols() != w.rows() || b.numel() != w.cols()) {
    throw std::invalid_argument("affine: shape mismatch " + shape_str(x.shape()) +
                                " vs " + shape_str(w.shape()));
  }
  const int m = x.rows();
  const int k = x.cols();
  const int n = w.cols();
  Tensor<T> out = Tensor<T>::zeros({m, n});
  T* po = out.data();
  const T* pb = b.data();
  for (int i = 0; i < m; ++i) {
    std::copy(pb, pb + n, po + static_cast<int64_t>(i) * n);
  }
  detail::mm_acc(x.data(), w.data(), po, m, k, n);
  if (detail::tracing<T>({x, w, b})) {
    detail::mark_and_record(out, [x, w, b, out, m, k, n]() mutable {
      const T* g = out.grad_data();
      if (x.requires_grad()) detail::mm_acc_nt(g, w.data(), x.grad_data(), m, n, k);
      if (w.requires_grad()) detail::mm_acc_tn(x.data(), g, w.grad_data(), m, k, n);
      if (b.requires_grad()) {
        T* gb = b.grad_data();
        for (int i = 0; i < m; ++i) {
          for (int j = 0; j < n; ++j) gb[j] += g[static_cast<int64_t>(i) * n + j];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Row-wise normalizations
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax_rows(Tensor<T> x) {
  const int r = x.rows();
  const int c = x.cols();
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (int i = 0; i < r; ++i) {
    const T* row = px + static_cast<int64_t>(i) * c;
    T* orow = po + static_cast<int64_t>(i) * c;
    T mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (int j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    for (int j = 0; j < c; ++j) orow[j] /= sum;
  }
  if (detail::tracing<T>({x})) {
    detail::mark_and_record(out, [x, out, r, c]() mutable {
      const T* g = out.grad_data();
      const T* y = out.data();
      T* gx = x.grad_data();
      for (int i = 0; i < r; ++i) {
        T dot = T(0);
        for (int j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
        for (int j = 0; j < c; ++j) gx[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> log_softmax_rows(Tensor<T> x) {
  const int r = x.rows();
  const int c = x.cols();
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (int i = 0; i < r; ++i) {
    const T* row = px + static_cast<int64_t>(i) * c;
    T* orow = po + static_cast<int64_t>(i) * c;
    T mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (int j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
    const T lse = mx + std::log(sum);
    for (int j = 0; j < c; ++j) orow[j] = row[j] - lse;
  }
  if (detail::tracing<T>({x})) {
    detail::mark_and_record(out, [x, out, r, c]() mutable {
      const T* g = out.grad_data();
      const T* y = out.data();
      T* gx = x.grad_data();
      for (int i = 0; i < r; ++i) {
        T gsum = T(0);
        for (int j = 0; j < c; ++j) gsum += g[i * c + j];
        for (int j = 0; j < c; ++j) {
          gx[i * c + j] += g[i * c + j] - std::exp(y[i * c + j]) * gsum;
        }
      }
    });
  }
  return out;
}

// Per-row standardization (no affine); shift-invariant by construction.
template <class T>
Tensor<T> layernorm_rows(Tensor<T> x, T eps = T(1e-5)) {
  const int r = x.rows();
  const int c = x.cols();
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  Tensor<T> inv_sigma = Tensor<T>::zeros({r});
  const T* px = x.data();
  T* po = out.data();
  T* pis = inv_sigma.data();
  for (int i = 0; i < r; ++i) {
    const T* row = px + static_cast<int64_t>(i) * c;
    T mean = T(0);
    for (int j = 0; j < c; ++j) mean += row[j];
    mean /= c;
    T var = T(0);
    for (int j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= c;
    const T is = T(1) / std::sqrt(var + eps);
    pis[i] = is;
    T* orow = po + static_cast<int64_t>(i) * c;
    for (int j = 0; j < c; ++j) orow[j] = (row[j] - mean) * is;
  }
  if (detail::tracing<T>({x})) {
    detail::mark_and_record(out, [x, out, inv_sigma, r, c]() mutable {
      const T* g = out.grad_data();
      const T* y = out.data();
      const T* pis2 = inv_sigma.data();
      T* gx = x.grad_data();
      for (int i = 0; i < r; ++i) {
        T gmean = T(0);
        T gydot = T(0);
        for (int j = 0; j < c; ++j) {
          gmean += g[i * c + j];
          gydot += g[i * c + j] * y[i * c + j];
        }
        gmean /= c;
        gydot /= c;
        for (int j = 0; j < c; ++j) {
          gx[i * c + j] += pis2[i] * (g[i * c + j] - gmean - y[i * c + j] * gydot);
        }
      }
    });
  }
  return out;
}

// Fused per-row standardization with affine: y = norm(x) * gain + bias.
template <class T>
Tensor<T> layernorm_affine(Tensor<T> x, Tensor<T> gain, Tensor<T> bias,
                           T eps = T(1e-5)) {
  const int r = x.rows();
  const int c = x.cols();
  if (gain.numel() != c || bias.numel() != c) {
    throw std::invalid_argument("layernorm_affine: affine shape mismatch " +
                                shape_str(x.shape()));
  }
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  Tensor<T> normed = Tensor<T>::zeros(x.shape());
  Tensor<T> inv_sigma = Tensor<T>::zeros({r});
  const T* px = x.data();
  const T* pg = gain.data();
  const T* pb = bias.data();
  T* po = out.data();
  T* pn = normed.data();
  T* pis = inv_sigma.data();
  for (int i = 0; i < r; ++i) {
    const T* row = px + static_cast<int64_t>(i) * c;
    T mean = T(0);
    for (int j = 0; j < c; ++j) mean += row[j];
    mean /= c;
    T var = T(0);
    for (int j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= c;
    const T is = T(1) / std::sqrt(var + eps);
    pis[i] = is;
    for (int j = 0; j < c; ++j) {
      const T y = (row[j] - mean) * is;
      pn[i * c + j] = y;
      po[i * c + j] = y * pg[j] + pb[j];
    }
  }
  if (detail::tracing<T>({x, gain, bias})) {
    detail::mark_and_record(out, [x, gain, bias, out, normed, inv_sigma, r, c]() mutable {
      const T* g = out.grad_data();
      const T* pn2 = normed.data();
      const T* pg2 = gain.data();
      const T* pis2 = inv_sigma.data();
      if (gain.requires_grad()) {
        T* gg = gain.grad_data();
        for (int i = 0; i < r; ++i) {
          for (int j = 0; j < c; ++j) gg[j] += g[i * c + j] * pn2[i * c + j];
        }
      }
      if (bias.requires_grad()) {
        T* gb = bias.grad_data();
        for (int i = 0; i < r; ++i) {
          for (int j = 0; j < c; ++j) gb[j] += g[i * c + j];
        }
      }
      if (x.requires_grad()) {
        T* gx = x.grad_data();
        for (int i = 0; i < r; ++i) {
          T gmean = T(0);
          T gydot = T(0);
          for (int j = 0; j < c; ++j) {
            const T gy = g[i * c + j] * pg2[j];
            gmean += gy;
            gydot += gy * pn2[i * c + j];
          }
          gmean /= c;
          gydot /= c;
          for (int j = 0; j < c; ++j) {
            const T gy = g[i * c + j] * pg2[j];
            gx[i * c + j] += pis2[i] * (gy - gmean - pn2[i * c + j] * gydot);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Axis wrappers (2-D): axis 1 = within each row, axis 0 = within each column
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax(Tensor<T> x, int axis) {
  if (axis == 1) return softmax_rows(x);
  if (axis == 0) return transpose(softmax_rows(transpose(x)));
  throw std::invalid_argument("softmax: axis must be 0 or 1");
}

template <class T>
Tensor<T> layernorm(Tensor<T> x, int axis, T eps = T(1e-5)) {
  if (axis == 1) return layernorm_rows(x, eps);
  if (axis == 0) return transpose(layernorm_rows(transpose(x), eps));
  throw std::invalid_argument("layernorm: axis must be 0 or 1");
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(Tensor<T> x) {
  Tensor<T> out = Tensor<T>::zeros({1});
  T acc = T(0);
  const T* px = x.data();
  for (int64_t i = 0; i < x.numel(); ++i) acc += px[i];
  out.data()[0] = acc;
  if (detail::tracing<T>({x})) {
    detail::mark_and_record(out, [x, out]() mutable {
      const T g = out.grad_data()[0];
      T* gx = x.grad_data();
      for (int64_t i = 0; i < x.numel(); ++i) gx[i] += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(Tensor<T> x) {
  const T scale = T(1) / static_cast<T>(x.numel());
  return mul_scalar(sum(x), scale);
}

// Sum along axis 1: [r x c] -> [r]
template <class T>
Tensor<T> sum_rows(Tensor<T> x) {
  const int r = x.rows();
  const int c = x.cols();
  Tensor<T> out = Tensor<T>::zeros({r});
  const T* px = x.data();
  T* po = out.data();
  for (int i = 0; i < r; ++i) {
    T acc = T(0);
    for (int j = 0; j < c; ++j) acc += px[i * c + j];
    po[i] = acc;
  }
  if (detail::tracing<T>({x})) {
    detail::mark_and_record(out, [x, out, r, c]() mutable {
      const T* g = out.grad_data();
      T* gx = x.grad_data();
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) gx[i * c + j] += g[i];
      }
    });
  }
  return out;
}

// Sum along axis 0: [r x c] -> [c]
template <class T>
Tensor<T> sum_cols(Tensor<T> x) {
  const int r = x.rows();
  const int c = x.cols();
  Tensor<T> out = Tensor<T>::zeros({c});
  const T* px = x.data();
  T* po = out.data();
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) po[j] += px[i * c + j];
  }
  if (detail::tracing<T>({x})) {
    detail::mark_and_record(out, [x, out, r, c]() mutable {
      const T* g = out.grad_data();
      T* gx = x.grad_data();
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) gx[i * c + j] += g[j];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sum_axis(Tensor<T> x, int axis) {
  if (axis == 1) return sum_rows(x);
  if (axis == 0) return sum_cols(x);
  throw std::invalid_argument("sum_axis: axis must be 0 or 1");
}

template <class T>
Tensor<T> mean_axis(Tensor<T> x, int axis) {
  const int denom = axis == 1 ? x.cols() : x.rows();
  return mul_scalar(sum_axis(x, axis), T(1) / static_cast<T>(denom));
}

// ---------------------------------------------------------------------------
// Index ops
// ---------------------------------------------------------------------------

// out[p, :] = table[ids[p], :]
template <class T>
Tensor<T> embedding_lookup(Tensor<T> table, const std::vector<int>& ids) {
  const int v = table.rows();
  const int d = table.cols();
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw std::invalid_argument("embedding_lookup: id " + std::to_string(id) +
                                  " out of range [0," + std::to_string(v) + ")");
    }
  }
  Tensor<T> out = Tensor<T>::zeros({static_cast<int>(ids.size()), d});
  const T* pt = table.data();
  T* po = out.data();
  for (size_t p = 0; p < ids.size(); ++p) {
    std::copy(pt + static_cast<int64_t>(ids[p]) * d, pt + static_cast<int64_t>(ids[p] + 1) * d,
              po + static_cast<int64_t>(p) * d);
  }
  if (detail::tracing<T>({table})) {
    detail::mark_and_record(out, [table, out, ids, d]() mutable {
      const T* g = out.grad_data();
      T* gt = table.grad_data();
      for (size_t p = 0; p < ids.size(); ++p) {
        for (int j = 0; j < d; ++j) {
          gt[static_cast<int64_t>(ids[p]) * d + j] += g[static_cast<int64_t>(p) * d + j];
        }
      }
    });
  }
  return out;
}

// out[p, :] = x[row_ids[p], :] (rows may repeat)
template <class T>
Tensor<T> gather_rows(Tensor<T> x, const std::vector<int>& row_ids) {
  return embedding_lookup(x, row_ids);
}

// out[i] = x[i, cols[i]]
template <class T>
Tensor<T> pick_per_row(Tensor<T> x, const std::vector<int>& cols) {
  const int r = x.rows();
  const int c = x.cols();
  if (static_cast<int>(cols.size()) != r) {
    throw std::invalid_argument("pick_per_row: need one column per row");
  }
  for (int j : cols) {
    if (j < 0 || j >= c) {
      throw std::invalid_argument("pick_per_row: column " + std::to_string(j) +
                                  " out of range [0," + std::to_string(c) + ")");
    }
  }
  Tensor<T> out = Tensor<T>::zeros({r});
  const T* px = x.data();
  T* po = out.data();
  for (int i = 0; i < r; ++i) po[i] = px[static_cast<int64_t>(i) * c + cols[i]];
  if (detail::tracing<T>({x})) {
    detail::mark_and_record(out, [x, out, cols, c]() mutable {
      const T* g = out.grad_data();
      T* gx = x.grad_data();
      for (size_t i = 0; i < cols.size(); ++i) {
        gx[static_cast<int64_t>(i) * c + cols[i]] += g[i];
      }
    });
  }
  return out;
}

// out[p] = x[row_ids[p], col_ids[p]]
template <class T>
Tensor<T> gather_elems(Tensor<T> x, const std::vector<int>& row_ids,
                       const std::vector<int>& col_ids) {
  if (row_ids.size() != col_ids.size()) {
    throw std::invalid_argument("gather_elems: index list size mismatch");
  }
  const int r = x.rows();
  const int c = x.cols();
  const int n = static_cast<int>(row_ids.size());
  for (int i = 0; i < n; ++i) {
    if (row_ids[i] < 0 || row_ids[i] >= r || col_ids[i] < 0 || col_ids[i] >= c) {
      throw std::invalid_argument("gather_elems: index out of range");
    }
  }
  Tensor<T> out = Tensor<T>::zeros({n});
  const T* px = x.data();
  T* po = out.data();
  for (int i = 0; i < n; ++i) po[i] = px[static_cast<int64_t>(row_ids[i]) * c + col_ids[i]];
  if (detail::tracing<T>({x})) {
    detail::mark_and_record(out, [x, out, row_ids, col_ids, c]() mutable {
      const T* g = out.grad_data();
      T* gx = x.grad_data();
      for (size_t i = 0; i < row_ids.size(); ++i) {
        gx[static_cast<int64_t>(row_ids[i]) * c + col_ids[i]] += g[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> uniform_init(std::vector<int> shape, Rng& rng, double lo, double hi) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  T* p = t.data();
  for (int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <class T>
Tensor<T> normal_init(std::vector<int> shape, Rng& rng, double mean, double stddev) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  T* p = t.data();
  for (int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<T>(mean + stddev * rng.normal());
  return t;
}

// ---------------------------------------------------------------------------
// AdamW and learning-rate schedule
// ---------------------------------------------------------------------------

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <class T>
class AdamW {
 public:
  AdamW(const std::vector<Tensor<T>>& params, AdamWConfig cfg) : cfg_(cfg) {
    slots_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      slots_[i].m.assign(params[i].numel(), T(0));
      slots_[i].v.assign(params[i].numel(), T(0));
    }
  }

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  int64_t step_count() const { return step_; }

  void zero_grad(std::vector<Tensor<T>>& params) {
    for (auto& p : params) p.zero_grad();
  }

  // Decoupled weight decay; bias-corrected moments.
  void step(std::vector<Tensor<T>>& params) {
    if (params.size() != slots_.size()) {
      throw std::invalid_argument("adamw: parameter count changed");
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (size_t pi = 0; pi < params.size(); ++pi) {
      auto& p = params[pi];
      if (static_cast<int64_t>(slots_[pi].m.size()) != p.numel()) {
        throw std::invalid_argument("adamw: parameter shape changed");
      }
      p.ensure_grad();
      const T* g = p.grad_data();
      T* w = p.data();
      T* m = slots_[pi].m.data();
      T* v = slots_[pi].v.data();
      for (int64_t i = 0; i < p.numel(); ++i) {
        m[i] = static_cast<T>(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i]);
        v[i] = static_cast<T>(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i]);
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        const double update = mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i];
        w[i] -= static_cast<T>(cfg_.lr * update);
      }
    }
  }

 private:
  struct Slot {
    std::vector<T> m, v;
  };
  std::vector<Slot> slots_;
  AdamWConfig cfg_;
  int64_t step_ = 0;
};

// Linear warmup to base_lr, then cosine decay to min_lr at `total`.
inline double cosine_lr(int64_t step, int64_t total, double base_lr, double min_lr,
                        int64_t warmup) {
  if (step < 0 || warmup < 0 || warmup >= total) {
    throw std::invalid_argument("cosine_lr: need 0 <= step, 0 <= warmup < total");
  }
  if (step < warmup) {
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  }
  if (step >= total) return min_lr;
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(M_PI * progress));
}

// ---------------------------------------------------------------------------
// Named parameter registry
// ---------------------------------------------------------------------------

template <class T>
struct ParamMap {
  std::vector<std::pair<std::string, Tensor<T>>> items;

  void add(const std::string& name, Tensor<T> t) {
    for (const auto& [n, _] : items) {
      if (n == name) throw std::invalid_argument("duplicate parameter name: " + name);
    }
    items.emplace_back(name, std::move(t));
  }

  Tensor<T>* find(const std::string& name) {
    for (auto& [n, t] : items) {
      if (n == name) return &t;
    }
    return nullptr;
  }

  std::vector<Tensor<T>> tensors() const {
    std::vector<Tensor<T>> out;
    out.reserve(items.size());
    for (const auto& [n, t] : items) out.push_back(t);
    return out;
  }

  void set_requires_grad(bool v) {
    for (auto& [n, t] : items) t.set_requires_grad(v);
  }
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

// Runs `loss_fn` under a fresh tape, backpropagates, then compares each
// input's analytic gradient against central finite differences computed
// with no tape. Returns the maximum relative error observed.
template <class T>
double gradcheck_max_rel_err(const std::function<Tensor<T>()>& loss_fn,
                             std::vector<Tensor<T>> inputs, double step = 1e-5) {
  for (auto& t : inputs) t.set_requires_grad(true);
  std::vector<std::vector<T>> analytic;
  {
    Tape<T> tape;
    typename Tape<T>::Scope scope(tape);
    Tensor<T> loss = loss_fn();
    for (auto& t : inputs) {
      t.ensure_grad();
      t.zero_grad();
    }
    tape.backward(loss);
    for (auto& t : inputs) analytic.push_back(t.grad());
  }
  double max_err = 0.0;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = inputs[ti];
    for (int64_t i = 0; i < t.numel(); ++i) {
      const T saved = t.data()[i];
      t.data()[i] = saved + static_cast<T>(step);
      const double up = static_cast<double>(loss_fn().item());
      t.data()[i] = saved - static_cast<T>(step);
      const double down = static_cast<double>(loss_fn().item());
      t.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = static_cast<double>(analytic[ti][i]);
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      max_err = std::max(max_err, std::abs(a - numeric) / denom);
    }
  }
  return max_err;
}

}  // namespace moltok::ndt
