#pragma once

// Dense row-major tensors with reverse-mode autodiff on an explicit tape.
//
// The tape doubles as a cost instrument. Counting rules are a fixed cost
// model, not a hardware profile:
//   - matmul counts m*k*p multiply-accumulates
//   - softmax counts one unit per normalized element
//   - bilinear sampling counts 4 corner MACs per channel per sampled point,
//     in and out of range alike
//   - rowdot / rowcombine count one MAC per scalar product term
//   - everything else (elementwise ops, layer norm, GELU, reshapes) is free
// These rules make the instrumented totals of the attention forwards equal
// their closed-form complexity expressions exactly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "hsvit/errors.hpp"
#include "hsvit/rng.hpp"

namespace hsvit {

struct FlopCount {
  std::uint64_t macs = 0;     // multiply-accumulates
  std::uint64_t softmax = 0;  // normalized elements
  std::uint64_t total() const { return macs + softmax; }
};

template <class S>
class Tape;

namespace detail {

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::int64_t shape_numel(const std::vector<int>& s) {
  std::int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("non-positive dimension in " + shape_str(s));
    n *= d;
  }
  return n;
}

template <class S>
struct Storage {
  std::vector<int> shape;
  std::vector<S> val;
  std::vector<S> grad;  // lazily sized to val
  bool requires_grad = false;
  Tape<S>* tape = nullptr;
  int node = -1;

  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), S(0));
  }
};

}  // namespace detail

// Value-semantic handle onto shared storage. Copies alias the same buffer.
template <class S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape) {
    Tensor t;
    t.st_ = std::make_shared<detail::Storage<S>>();
    t.st_->shape = std::move(shape);
    t.st_->val.assign(detail::shape_numel(t.st_->shape), S(0));
    return t;
  }

  static Tensor full(std::vector<int> shape, S v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.st_->val.begin(), t.st_->val.end(), v);
    return t;
  }

  static Tensor from_vec(std::vector<int> shape, std::vector<S> v) {
    Tensor t;
    t.st_ = std::make_shared<detail::Storage<S>>();
    t.st_->shape = std::move(shape);
    if (static_cast<std::int64_t>(v.size()) != detail::shape_numel(t.st_->shape))
      throw ShapeError("from_vec: " + std::to_string(v.size()) + " values for shape " +
                       detail::shape_str(t.st_->shape));
    t.st_->val = std::move(v);
    return t;
  }

  static Tensor scalar(S v) { return full({1}, v); }

  bool defined() const { return st_ != nullptr; }
  const std::vector<int>& shape() const { return st_->shape; }
  int ndim() const { return static_cast<int>(st_->shape.size()); }
  int dim(int i) const { return st_->shape[static_cast<size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(st_->val.size()); }

  S* data() { return st_->val.data(); }
  const S* data() const { return st_->val.data(); }
  std::vector<S>& vec() { return st_->val; }
  const std::vector<S>& vec() const { return st_->val; }

  S item() const {
    if (numel() != 1)
      throw ContractError("item: tensor has shape " + detail::shape_str(st_->shape));
    return st_->val[0];
  }

  // Gradient buffer; allocated on demand.
  S* grad() {
    st_->ensure_grad();
    return st_->grad.data();
  }
  const std::vector<S>& grad_vec() {
    st_->ensure_grad();
    return st_->grad;
  }
  bool has_grad() const { return st_->grad.size() == st_->val.size(); }
  void zero_grad() {
    if (has_grad()) std::fill(st_->grad.begin(), st_->grad.end(), S(0));
  }

  bool requires_grad() const { return st_->requires_grad; }
  bool on_tape() const { return st_->tape != nullptr; }
  Tape<S>* tape() const { return st_ ? st_->tape : nullptr; }
  int node() const { return st_->node; }

  Tensor clone() const {
    Tensor t;
    t.st_ = std::make_shared<detail::Storage<S>>();
    t.st_->shape = st_->shape;
    t.st_->val = st_->val;
    return t;
  }

  bool all_finite() const {
    for (S v : st_->val)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::shared_ptr<detail::Storage<S>> storage() const { return st_; }

 private:
  template <class T>
  friend class Tape;
  std::shared_ptr<detail::Storage<S>> st_;
};

// Records operations in construction order (topological by construction) and
// replays them backwards. Single-threaded per tape; destroying the tape
// unbinds all storages, so parameters outlive the tapes that used them.
template <class S>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  ~Tape() {
    for (auto& st : bound_) {
      st->tape = nullptr;
      st->node = -1;
    }
  }

  Tensor<S> leaf(std::vector<int> shape, bool requires_grad = true) {
    Tensor<S> t = Tensor<S>::zeros(std::move(shape));
    watch(t, requires_grad);
    return t;
  }

  // Binds an existing tensor to this tape as a leaf.
  void watch(Tensor<S>& t, bool requires_grad = true) {
    auto st = t.storage();
    if (st->tape == this) return;
    if (st->tape != nullptr)
      throw ContractError("watch: tensor already bound to another tape");
    st->requires_grad = requires_grad;
    bind(st, nullptr);
  }

  void backward(const Tensor<S>& loss) {
    auto st = loss.storage();
    if (st->tape != this)
      throw ContractError("backward: loss is not on this tape");
    if (loss.numel() != 1)
      throw ContractError("backward: loss must be scalar, got shape " +
                          detail::shape_str(st->shape));
    st->ensure_grad();
    st->grad[0] += S(1);
    for (int i = st->node; i >= 0; --i)
      if (nodes_[static_cast<size_t>(i)]) nodes_[static_cast<size_t>(i)]();
  }

  void zero_grad() {
    for (auto& st : bound_)
      if (st->grad.size() == st->val.size())
        std::fill(st->grad.begin(), st->grad.end(), S(0));
  }

  FlopCount& flops() { return flops_; }
  const FlopCount& flops() const { return flops_; }

  // Analytic footprint: value-buffer bytes of every tensor bound to the tape.
  std::uint64_t bytes_reserved() const { return bytes_; }

  int num_nodes() const { return static_cast<int>(nodes_.size()); }

  // Internal: register a storage, optionally with a backward rule.
  void bind(const std::shared_ptr<detail::Storage<S>>& st, std::function<void()> bwd) {
    st->tape = this;
    st->node = static_cast<int>(nodes_.size());
    nodes_.push_back(std::move(bwd));
    bound_.push_back(st);
    bytes_ += st->val.size() * sizeof(S);
  }

 private:
  std::vector<std::function<void()>> nodes_;
  std::vector<std::shared_ptr<detail::Storage<S>>> bound_;
  FlopCount flops_;
  std::uint64_t bytes_ = 0;
};

namespace detail {

// Common tape of the operands; null when all are constants.
template <class S>
Tape<S>* common_tape(std::initializer_list<const Tensor<S>*> xs) {
  Tape<S>* t = nullptr;
  for (const Tensor<S>* x : xs) {
    if (!x->defined() || !x->on_tape()) continue;
    if (t == nullptr) t = x->tape();
    else if (t != x->tape())
      throw ContractError("operands live on different tapes");
  }
  return t;
}

template <class S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "add");
  Tape<S>* tp = detail::common_tape<S>({&a, &b});
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
  if (tp) {
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    tp->bind(out.storage(), [sa, sb, so]() {
      sa->ensure_grad();
      sb->ensure_grad();
      for (size_t i = 0; i < so->grad.size(); ++i) {
        sa->grad[i] += so->grad[i];
        sb->grad[i] += so->grad[i];
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "sub");
  Tape<S>* tp = detail::common_tape<S>({&a, &b});
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
  if (tp) {
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    tp->bind(out.storage(), [sa, sb, so]() {
      sa->ensure_grad();
      sb->ensure_grad();
      for (size_t i = 0; i < so->grad.size(); ++i) {
        sa->grad[i] += so->grad[i];
        sb->grad[i] -= so->grad[i];
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "mul");
  Tape<S>* tp = detail::common_tape<S>({&a, &b});
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
  if (tp) {
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    tp->bind(out.storage(), [sa, sb, so]() {
      sa->ensure_grad();
      sb->ensure_grad();
      for (size_t i = 0; i < so->grad.size(); ++i) {
        sa->grad[i] += so->grad[i] * sb->val[i];
        sb->grad[i] += so->grad[i] * sa->val[i];
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, double c) {
  Tape<S>* tp = detail::common_tape<S>({&a});
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  const S cs = static_cast<S>(c);
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * cs;
  if (tp) {
    auto sa = a.storage(), so = out.storage();
    tp->bind(out.storage(), [sa, so, cs]() {
      sa->ensure_grad();
      for (size_t i = 0; i < so->grad.size(); ++i) sa->grad[i] += so->grad[i] * cs;
    });
  }
  return out;
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& a, double c) {
  Tape<S>* tp = detail::common_tape<S>({&a});
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  const S cs = static_cast<S>(c);
  for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + cs;
  if (tp) {
    auto sa = a.storage(), so = out.storage();
    tp->bind(out.storage(), [sa, so]() {
      sa->ensure_grad();
      for (size_t i = 0; i < so->grad.size(); ++i) sa->grad[i] += so->grad[i];
    });
  }
  return out;
}

// x[...xD] + b[D], broadcast over leading dims.
template <class S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& b) {
  if (b.ndim() != 1 || x.dim(x.ndim() - 1) != b.dim(0))
    throw ShapeError("add_bias: " + detail::shape_str(x.shape()) + " + " +
                     detail::shape_str(b.shape()));
  Tape<S>* tp = detail::common_tape<S>({&x, &b});
  const std::int64_t d = b.dim(0), rows = x.numel() / d;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S* px = x.data();
  const S* pb = b.data();
  S* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] + pb[j];
  if (tp) {
    auto sx = x.storage(), sb = b.storage(), so = out.storage();
    tp->bind(out.storage(), [sx, sb, so, rows, d]() {
      sx->ensure_grad();
      sb->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < d; ++j) {
          sx->grad[static_cast<size_t>(r * d + j)] += so->grad[static_cast<size_t>(r * d + j)];
          sb->grad[static_cast<size_t>(j)] += so->grad[static_cast<size_t>(r * d + j)];
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: " + detail::shape_str(a.shape()) + " x " +
                     detail::shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), p = b.dim(1);
  Tape<S>* tp = detail::common_tape<S>({&a, &b});
  Tensor<S> out = Tensor<S>::zeros({m, p});
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (int i = 0; i < m; ++i)
    for (int l = 0; l < k; ++l) {
      const S ail = pa[i * k + l];
      const S* brow = pb + static_cast<std::int64_t>(l) * p;
      S* orow = po + static_cast<std::int64_t>(i) * p;
      for (int j = 0; j < p; ++j) orow[j] += ail * brow[j];
    }
  if (tp) {
    tp->flops().macs += static_cast<std::uint64_t>(m) * k * p;
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    tp->bind(out.storage(), [sa, sb, so, m, k, p]() {
      sa->ensure_grad();
      sb->ensure_grad();
      // dA += dOut * B^T ; dB += A^T * dOut
      for (int i = 0; i < m; ++i)
        for (int l = 0; l < k; ++l) {
          S acc = 0;
          const S* grow = so->grad.data() + static_cast<std::int64_t>(i) * p;
          const S* brow = sb->val.data() + static_cast<std::int64_t>(l) * p;
          for (int j = 0; j < p; ++j) acc += grow[j] * brow[j];
          sa->grad[static_cast<size_t>(i * k + l)] += acc;
        }
      for (int i = 0; i < m; ++i)
        for (int l = 0; l < k; ++l) {
          const S ail = sa->val[static_cast<size_t>(i * k + l)];
          const S* grow = so->grad.data() + static_cast<std::int64_t>(i) * p;
          S* brow = sb->grad.data() + static_cast<std::int64_t>(l) * p;
          for (int j = 0; j < p; ++j) brow[j] += ail * grow[j];
        }
    });
  }
  return out;
}

template <class S>
Tensor<S> transpose2d(const Tensor<S>& a) {
  if (a.ndim() != 2) throw ShapeError("transpose2d: need 2-D, got " + detail::shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  Tape<S>* tp = detail::common_tape<S>({&a});
  Tensor<S> out = Tensor<S>::zeros({n, m});
  const S* pa = a.data();
  S* po = out.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];
  if (tp) {
    auto sa = a.storage(), so = out.storage();
    tp->bind(out.storage(), [sa, so, m, n]() {
      sa->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          sa->grad[static_cast<size_t>(i * n + j)] += so->grad[static_cast<size_t>(j * m + i)];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions & shape
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> sum(const Tensor<S>& x) {
  Tape<S>* tp = detail::common_tape<S>({&x});
  Tensor<S> out = Tensor<S>::zeros({1});
  S acc = 0;
  const S* px = x.data();
  for (std::int64_t i = 0; i < x.numel(); ++i) acc += px[i];
  out.data()[0] = acc;
  if (tp) {
    auto sx = x.storage(), so = out.storage();
    tp->bind(out.storage(), [sx, so]() {
      sx->ensure_grad();
      for (size_t i = 0; i < sx->grad.size(); ++i) sx->grad[i] += so->grad[0];
    });
  }
  return out;
}

template <class S>
Tensor<S> mean(const Tensor<S>& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// x[...xD] -> [...], mean over the last axis.
template <class S>
Tensor<S> mean_lastdim(const Tensor<S>& x) {
  if (x.ndim() < 1) throw ShapeError("mean_lastdim: scalar input");
  const int d = x.dim(x.ndim() - 1);
  std::vector<int> oshape(x.shape().begin(), x.shape().end() - 1);
  if (oshape.empty()) oshape = {1};
  Tape<S>* tp = detail::common_tape<S>({&x});
  Tensor<S> out = Tensor<S>::zeros(oshape);
  const std::int64_t rows = x.numel() / d;
  const S* px = x.data();
  S* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    S acc = 0;
    for (int j = 0; j < d; ++j) acc += px[r * d + j];
    po[r] = acc / static_cast<S>(d);
  }
  if (tp) {
    auto sx = x.storage(), so = out.storage();
    tp->bind(out.storage(), [sx, so, rows, d]() {
      sx->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j)
          sx->grad[static_cast<size_t>(r * d + j)] += so->grad[static_cast<size_t>(r)] / static_cast<S>(d);
    });
  }
  return out;
}

template <class S>
Tensor<S> reshape(const Tensor<S>& x, std::vector<int> shape) {
  if (detail::shape_numel(shape) != x.numel())
    throw ShapeError("reshape: " + detail::shape_str(x.shape()) + " -> " +
                     detail::shape_str(shape));
  Tape<S>* tp = detail::common_tape<S>({&x});
  Tensor<S> out = Tensor<S>::from_vec(std::move(shape), x.vec());
  if (tp) {
    auto sx = x.storage(), so = out.storage();
    tp->bind(out.storage(), [sx, so]() {
      sx->ensure_grad();
      for (size_t i = 0; i < so->grad.size(); ++i) sx->grad[i] += so->grad[i];
    });
  }
  return out;
}

template <class S>
Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<int>& idx) {
  if (x.ndim() != 2) throw ShapeError("gather_rows: need 2-D, got " + detail::shape_str(x.shape()));
  const int n = x.dim(0), d = x.dim(1);
  for (int i : idx)
    if (i < 0 || i >= n) throw ContractError("gather_rows: index " + std::to_string(i) + " out of " + std::to_string(n));
  Tape<S>* tp = detail::common_tape<S>({&x});
  Tensor<S> out = Tensor<S>::zeros({static_cast<int>(idx.size()), d});
  const S* px = x.data();
  S* po = out.data();
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy(px + static_cast<std::int64_t>(idx[r]) * d, px + static_cast<std::int64_t>(idx[r] + 1) * d,
              po + static_cast<std::int64_t>(r) * d);
  if (tp) {
    auto sx = x.storage(), so = out.storage();
    std::vector<int> ix = idx;
    tp->bind(out.storage(), [sx, so, ix, d]() {
      sx->ensure_grad();
      for (size_t r = 0; r < ix.size(); ++r)
        for (int j = 0; j < d; ++j)
          sx->grad[static_cast<size_t>(ix[r]) * d + j] += so->grad[r * d + j];
    });
  }
  return out;
}

template <class S>
Tensor<S> concat_lastdim(const std::vector<Tensor<S>>& xs) {
  if (xs.empty()) throw ContractError("concat_lastdim: no inputs");
  const int nd = xs[0].ndim();
  std::int64_t rows = xs[0].numel() / xs[0].dim(nd - 1);
  int dtot = 0;
  for (const auto& x : xs) {
    if (x.ndim() != nd || x.numel() / x.dim(nd - 1) != rows)
      throw ShapeError("concat_lastdim: incompatible " + detail::shape_str(x.shape()));
    dtot += x.dim(nd - 1);
  }
  std::vector<int> oshape = xs[0].shape();
  oshape[static_cast<size_t>(nd - 1)] = dtot;
  std::vector<const Tensor<S>*> ptrs;
  for (const auto& x : xs) ptrs.push_back(&x);
  Tape<S>* tp = nullptr;
  for (const auto& x : xs)
    if (x.on_tape()) {
      if (tp && tp != x.tape()) throw ContractError("operands live on different tapes");
      tp = x.tape();
    }
  Tensor<S> out = Tensor<S>::zeros(oshape);
  S* po = out.data();
  int off = 0;
  for (const auto& x : xs) {
    const int d = x.dim(nd - 1);
    const S* px = x.data();
    for (std::int64_t r = 0; r < rows; ++r)
      std::copy(px + r * d, px + (r + 1) * d, po + r * dtot + off);
    off += d;
  }
  if (tp) {
    std::vector<std::shared_ptr<detail::Storage<S>>> srcs;
    std::vector<int> widths;
    for (const auto& x : xs) {
      srcs.push_back(x.storage());
      widths.push_back(x.dim(nd - 1));
    }
    auto so = out.storage();
    tp->bind(out.storage(), [srcs, widths, so, rows, dtot]() {
      int off2 = 0;
      for (size_t s = 0; s < srcs.size(); ++s) {
        srcs[s]->ensure_grad();
        const int d = widths[s];
        for (std::int64_t r = 0; r < rows; ++r)
          for (int j = 0; j < d; ++j)
            srcs[s]->grad[static_cast<size_t>(r * d + j)] +=
                so->grad[static_cast<size_t>(r * dtot + off2 + j)];
        off2 += d;
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> slice_lastdim(const Tensor<S>& x, int start, int len) {
  const int nd = x.ndim();
  const int d = x.dim(nd - 1);
  if (start < 0 || len <= 0 || start + len > d)
    throw ShapeError("slice_lastdim: [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") of width " + std::to_string(d));
  std::vector<int> oshape = x.shape();
  oshape[static_cast<size_t>(nd - 1)] = len;
  const std::int64_t rows = x.numel() / d;
  Tape<S>* tp = detail::common_tape<S>({&x});
  Tensor<S> out = Tensor<S>::zeros(oshape);
  const S* px = x.data();
  S* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r)
    std::copy(px + r * d + start, px + r * d + start + len, po + r * len);
  if (tp) {
    auto sx = x.storage(), so = out.storage();
    tp->bind(out.storage(), [sx, so, rows, d, start, len]() {
      sx->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < len; ++j)
          sx->grad[static_cast<size_t>(r * d + start + j)] += so->grad[static_cast<size_t>(r * len + j)];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// nonlinearities
// ---------------------------------------------------------------------------

// Stabilized by max-subtraction; counts one softmax unit per element.
template <class S>
Tensor<S> softmax_lastdim(const Tensor<S>& x) {
  if (x.ndim() < 1 || x.dim(x.ndim() - 1) < 1)
    throw ShapeError("softmax_lastdim: bad shape " + detail::shape_str(x.shape()));
  const int n = x.dim(x.ndim() - 1);
  const std::int64_t rows = x.numel() / n;
  Tape<S>* tp = detail::common_tape<S>({&x});
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S* px = x.data();
  S* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* xi = px + r * n;
    S* yi = po + r * n;
    S mx = xi[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
    S z = 0;
    for (int j = 0; j < n; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      z += yi[j];
    }
    for (int j = 0; j < n; ++j) yi[j] /= z;
  }
  if (tp) {
    tp->flops().softmax += static_cast<std::uint64_t>(x.numel());
    auto sx = x.storage(), so = out.storage();
    tp->bind(out.storage(), [sx, so, rows, n]() {
      sx->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const S* y = so->val.data() + r * n;
        const S* gy = so->grad.data() + r * n;
        S dot = 0;
        for (int j = 0; j < n; ++j) dot += gy[j] * y[j];
        for (int j = 0; j < n; ++j)
          sx->grad[static_cast<size_t>(r * n + j)] += y[j] * (gy[j] - dot);
      }
    });
  }
  return out;
}

// Per-slice normalization over the last axis, then affine with gamma/beta.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     double eps) {
  if (eps <= 0) throw ContractError("layer_norm: eps must be positive");
  const int d = x.dim(x.ndim() - 1);
  if (gamma.ndim() != 1 || beta.ndim() != 1 || gamma.dim(0) != d || beta.dim(0) != d)
    throw ShapeError("layer_norm: x " + detail::shape_str(x.shape()) + ", gamma " +
                     detail::shape_str(gamma.shape()) + ", beta " + detail::shape_str(beta.shape()));
  const std::int64_t rows = x.numel() / d;
  Tape<S>* tp = detail::common_tape<S>({&x, &gamma, &beta});
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  // store per-row (mean, inv_std) for the backward pass
  auto stats = std::make_shared<std::vector<S>>(static_cast<size_t>(rows) * 2);
  const S* px = x.data();
  const S* pg = gamma.data();
  const S* pbv = beta.data();
  S* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* xi = px + r * d;
    S mu = 0;
    for (int j = 0; j < d; ++j) mu += xi[j];
    mu /= static_cast<S>(d);
    S var = 0;
    for (int j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<S>(d);
    const S istd = S(1) / std::sqrt(var + static_cast<S>(eps));
    (*stats)[static_cast<size_t>(r) * 2] = mu;
    (*stats)[static_cast<size_t>(r) * 2 + 1] = istd;
    for (int j = 0; j < d; ++j)
      po[r * d + j] = pg[j] * ((xi[j] - mu) * istd) + pbv[j];
  }
  if (tp) {
    auto sx = x.storage(), sg = gamma.storage(), sb = beta.storage(), so = out.storage();
    tp->bind(out.storage(), [sx, sg, sb, so, stats, rows, d]() {
      sx->ensure_grad();
      sg->ensure_grad();
      sb->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const S mu = (*stats)[static_cast<size_t>(r) * 2];
        const S istd = (*stats)[static_cast<size_t>(r) * 2 + 1];
        const S* xi = sx->val.data() + r * d;
        const S* gy = so->grad.data() + r * d;
        S mean_g = 0, mean_gx = 0;
        for (int j = 0; j < d; ++j) {
          const S xh = (xi[j] - mu) * istd;
          const S g = gy[j] * sg->val[static_cast<size_t>(j)];
          mean_g += g;
          mean_gx += g * xh;
          sg->grad[static_cast<size_t>(j)] += gy[j] * xh;
          sb->grad[static_cast<size_t>(j)] += gy[j];
        }
        mean_g /= static_cast<S>(d);
        mean_gx /= static_cast<S>(d);
        for (int j = 0; j < d; ++j) {
          const S xh = (xi[j] - mu) * istd;
          const S g = gy[j] * sg->val[static_cast<size_t>(j)];
          sx->grad[static_cast<size_t>(r * d + j)] += istd * (g - mean_g - xh * mean_gx);
        }
      }
    });
  }
  return out;
}

// tanh-approximation GELU.
template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
  static constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  static constexpr double kA = 0.044715;
  Tape<S>* tp = detail::common_tape<S>({&x});
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S* px = x.data();
  S* po = out.data();
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double v = static_cast<double>(px[i]);
    po[i] = static_cast<S>(0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v))));
  }
  if (tp) {
    auto sx = x.storage(), so = out.storage();
    tp->bind(out.storage(), [sx, so]() {
      sx->ensure_grad();
      for (size_t i = 0; i < so->grad.size(); ++i) {
        const double v = static_cast<double>(sx->val[i]);
        const double t = std::tanh(kC * (v + kA * v * v * v));
        const double du = kC * (1.0 + 3.0 * kA * v * v);
        const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
        sx->grad[i] += so->grad[i] * static_cast<S>(d);
      }
    });
  }
  return out;
}

// Elementwise sqrt(max(x, 0)) with subgradient 0 at the origin.
template <class S>
Tensor<S> sqrt_nonneg(const Tensor<S>& x) {
  Tape<S>* tp = detail::common_tape<S>({&x});
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S* px = x.data();
  S* po = out.data();
  for (std::int64_t i = 0; i < x.numel(); ++i)
    po[i] = px[i] > S(0) ? std::sqrt(px[i]) : S(0);
  if (tp) {
    auto sx = x.storage(), so = out.storage();
    tp->bind(out.storage(), [sx, so]() {
      sx->ensure_grad();
      for (size_t i = 0; i < so->grad.size(); ++i)
        if (so->val[i] > S(0)) sx->grad[i] += so->grad[i] * S(0.5) / so->val[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// bilinear sampling
// ---------------------------------------------------------------------------

namespace detail {

// The two integer grid lines with possibly nonzero hat weight around c.
// Weight of line o is max(0, 1 - |o - c|).
struct HatSupport {
  int o0, o1;
  double w0, w1;
};

inline HatSupport hat_support(double c) {
  const double f = std::floor(c);
  HatSupport h;
  h.o0 = static_cast<int>(f);
  h.o1 = h.o0 + 1;
  h.w0 = 1.0 - (c - f);
  h.w1 = c - f;
  return h;
}

}  // namespace detail

// Literal evaluation of the hat-weighted double sum: contributions from all
// grid points weighted by max(0, 1-|ox-x|) * max(0, 1-|oy-y|). Coordinates a
// full cell outside the grid yield the zero vector. Differentiable w.r.t. the
// map and w.r.t. (x, y); the coordinate subgradient at integer points takes
// the interior value of the hat slope.
template <class S>
Tensor<S> bilinear_sample(const Tensor<S>& map, const Tensor<S>& x, const Tensor<S>& y) {
  if (map.ndim() != 3) throw ShapeError("bilinear_sample: map must be HxWxD, got " + detail::shape_str(map.shape()));
  if (x.numel() != 1 || y.numel() != 1)
    throw ContractError("bilinear_sample: coordinates must be scalars");
  const int gh = map.dim(0), gw = map.dim(1), d = map.dim(2);
  Tape<S>* tp = detail::common_tape<S>({&map, &x, &y});
  Tensor<S> out = Tensor<S>::zeros({d});
  const double cx = static_cast<double>(x.data()[0]);
  const double cy = static_cast<double>(y.data()[0]);
  const auto hx = detail::hat_support(cx);
  const auto hy = detail::hat_support(cy);
  const S* pm = map.data();
  S* po = out.data();
  const int oxs[2] = {hx.o0, hx.o1};
  const double wxs[2] = {hx.w0, hx.w1};
  const int oys[2] = {hy.o0, hy.o1};
  const double wys[2] = {hy.w0, hy.w1};
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) {
      const int ox = oxs[a], oy = oys[b];
      const double w = wxs[a] * wys[b];
      if (w == 0.0 || ox < 0 || ox >= gw || oy < 0 || oy >= gh) continue;
      const S* row = pm + (static_cast<std::int64_t>(oy) * gw + ox) * d;
      for (int j = 0; j < d; ++j) po[j] += static_cast<S>(w) * row[j];
    }
  if (tp) {
    tp->flops().macs += 4ull * static_cast<std::uint64_t>(d);
    auto sm = map.storage(), sx = x.storage(), sy = y.storage(), so = out.storage();
    tp->bind(out.storage(), [sm, sx, sy, so, gh, gw, d]() {
      sm->ensure_grad();
      sx->ensure_grad();
      sy->ensure_grad();
      const double cx2 = static_cast<double>(sx->val[0]);
      const double cy2 = static_cast<double>(sy->val[0]);
      const auto hx2 = detail::hat_support(cx2);
      const auto hy2 = detail::hat_support(cy2);
      const int oxs2[2] = {hx2.o0, hx2.o1};
      const double wxs2[2] = {hx2.w0, hx2.w1};
      // d/dc of max(0, 1-|o-c|) on the support: +1 on the left line, -1 on the right
      const double dwx[2] = {-1.0, 1.0};
      const int oys2[2] = {hy2.o0, hy2.o1};
      const double wys2[2] = {hy2.w0, hy2.w1};
      const double dwy[2] = {-1.0, 1.0};
      double gx = 0, gy = 0;
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) {
          const int ox = oxs2[a], oy = oys2[b];
          if (ox < 0 || ox >= gw || oy < 0 || oy >= gh) continue;
          const std::int64_t base = (static_cast<std::int64_t>(oy) * gw + ox) * d;
          const double w = wxs2[a] * wys2[b];
          for (int j = 0; j < d; ++j) {
            const double g = static_cast<double>(so->grad[static_cast<size_t>(j)]);
            const double v = static_cast<double>(sm->val[static_cast<size_t>(base + j)]);
            sm->grad[static_cast<size_t>(base + j)] += static_cast<S>(w * g);
            gx += g * v * dwx[a] * wys2[b];
            gy += g * v * wxs2[a] * dwy[b];
          }
        }
      sx->grad[0] += static_cast<S>(gx);
      sy->grad[0] += static_cast<S>(gy);
    });
  }
  return out;
}

template <class S>
Tensor<S> bilinear_sample(const Tensor<S>& map, double x, double y) {
  return bilinear_sample(map, Tensor<S>::scalar(static_cast<S>(x)),
                         Tensor<S>::scalar(static_cast<S>(y)));
}

// Batched bilinear resampling for attention: tokens[N x D] viewed as an
// gh x gw x D map; query q sits at (q mod gw, q div gw) and reads point j at
// that coordinate plus coords[q, j, :] = (dx, dy). Counts 4*D MACs per
// sampled point (the four-corner cost model), in or out of range.
template <class S>
Tensor<S> sample_grid(const Tensor<S>& tokens, const Tensor<S>& coords, int gh, int gw) {
  if (tokens.ndim() != 2) throw ShapeError("sample_grid: tokens must be NxD, got " + detail::shape_str(tokens.shape()));
  if (coords.ndim() != 3 || coords.dim(2) != 2)
    throw ShapeError("sample_grid: coords must be NxPx2, got " + detail::shape_str(coords.shape()));
  const int n = tokens.dim(0), d = tokens.dim(1), np = coords.dim(1);
  if (coords.dim(0) != n || gh * gw != n)
    throw ShapeError("sample_grid: N=" + std::to_string(n) + " vs coords " +
                     detail::shape_str(coords.shape()) + " and grid " + std::to_string(gh) + "x" +
                     std::to_string(gw));
  Tape<S>* tp = detail::common_tape<S>({&tokens, &coords});
  Tensor<S> out = Tensor<S>::zeros({n, np, d});
  const S* pt = tokens.data();
  const S* pc = coords.data();
  S* po = out.data();
  for (int q = 0; q < n; ++q) {
    const int cxq = q % gw, cyq = q / gw;
    for (int j = 0; j < np; ++j) {
      const double sx2 = cxq + static_cast<double>(pc[(static_cast<std::int64_t>(q) * np + j) * 2]);
      const double sy2 = cyq + static_cast<double>(pc[(static_cast<std::int64_t>(q) * np + j) * 2 + 1]);
      const auto hx = detail::hat_support(sx2);
      const auto hy = detail::hat_support(sy2);
      const int oxs[2] = {hx.o0, hx.o1};
      const double wxs[2] = {hx.w0, hx.w1};
      const int oys[2] = {hy.o0, hy.o1};
      const double wys[2] = {hy.w0, hy.w1};
      S* orow = po + (static_cast<std::int64_t>(q) * np + j) * d;
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) {
          const int ox = oxs[a], oy = oys[b];
          const double w = wxs[a] * wys[b];
          if (w == 0.0 || ox < 0 || ox >= gw || oy < 0 || oy >= gh) continue;
          const S* trow = pt + (static_cast<std::int64_t>(oy) * gw + ox) * d;
          for (int c = 0; c < d; ++c) orow[c] += static_cast<S>(w) * trow[c];
        }
    }
  }
  if (tp) {
    tp->flops().macs += 4ull * static_cast<std::uint64_t>(n) * np * d;
    auto st = tokens.storage(), sc = coords.storage(), so = out.storage();
    tp->bind(out.storage(), [st, sc, so, n, np, d, gh, gw]() {
      st->ensure_grad();
      sc->ensure_grad();
      for (int q = 0; q < n; ++q) {
        const int cxq = q % gw, cyq = q / gw;
        for (int j = 0; j < np; ++j) {
          const std::int64_t cbase = (static_cast<std::int64_t>(q) * np + j) * 2;
          const double sx2 = cxq + static_cast<double>(sc->val[static_cast<size_t>(cbase)]);
          const double sy2 = cyq + static_cast<double>(sc->val[static_cast<size_t>(cbase + 1)]);
          const auto hx = detail::hat_support(sx2);
          const auto hy = detail::hat_support(sy2);
          const int oxs[2] = {hx.o0, hx.o1};
          const double wxs[2] = {hx.w0, hx.w1};
          const double dwx[2] = {-1.0, 1.0};
          const int oys[2] = {hy.o0, hy.o1};
          const double wys[2] = {hy.w0, hy.w1};
          const double dwy[2] = {-1.0, 1.0};
          const S* grow = so->grad.data() + (static_cast<std::int64_t>(q) * np + j) * d;
          double gx = 0, gy = 0;
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b) {
              const int ox = oxs[a], oy = oys[b];
              if (ox < 0 || ox >= gw || oy < 0 || oy >= gh) continue;
              const std::int64_t tbase = (static_cast<std::int64_t>(oy) * gw + ox) * d;
              const double w = wxs[a] * wys[b];
              for (int c = 0; c < d; ++c) {
                const double g = static_cast<double>(grow[c]);
                const double v = static_cast<double>(st->val[static_cast<size_t>(tbase + c)]);
                st->grad[static_cast<size_t>(tbase + c)] += static_cast<S>(w * g);
                gx += g * v * dwx[a] * wys[b];
                gy += g * v * wxs[a] * dwy[b];
              }
            }
          sc->grad[static_cast<size_t>(cbase)] += static_cast<S>(gx);
          sc->grad[static_cast<size_t>(cbase + 1)] += static_cast<S>(gy);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// attention helpers
// ---------------------------------------------------------------------------

// out[q, j] = scl * <q_row, k[q, j, :]>. Counts N*P*D MACs.
template <class S>
Tensor<S> rowdot_scaled(const Tensor<S>& q, const Tensor<S>& k, double scl) {
  if (q.ndim() != 2 || k.ndim() != 3 || k.dim(0) != q.dim(0) || k.dim(2) != q.dim(1))
    throw ShapeError("rowdot_scaled: q " + detail::shape_str(q.shape()) + " vs k " +
                     detail::shape_str(k.shape()));
  const int n = q.dim(0), d = q.dim(1), np = k.dim(1);
  Tape<S>* tp = detail::common_tape<S>({&q, &k});
  Tensor<S> out = Tensor<S>::zeros({n, np});
  const S* pq = q.data();
  const S* pk = k.data();
  S* po = out.data();
  const S sc = static_cast<S>(scl);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < np; ++j) {
      const S* qr = pq + static_cast<std::int64_t>(i) * d;
      const S* kr = pk + (static_cast<std::int64_t>(i) * np + j) * d;
      S acc = 0;
      for (int c = 0; c < d; ++c) acc += qr[c] * kr[c];
      po[static_cast<std::int64_t>(i) * np + j] = sc * acc;
    }
  if (tp) {
    tp->flops().macs += static_cast<std::uint64_t>(n) * np * d;
    auto sq = q.storage(), sk = k.storage(), so = out.storage();
    tp->bind(out.storage(), [sq, sk, so, n, d, np, sc]() {
      sq->ensure_grad();
      sk->ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < np; ++j) {
          const S g = sc * so->grad[static_cast<size_t>(i) * np + j];
          for (int c = 0; c < d; ++c) {
            sq->grad[static_cast<size_t>(i) * d + c] +=
                g * sk->val[(static_cast<size_t>(i) * np + j) * d + c];
            sk->grad[(static_cast<size_t>(i) * np + j) * d + c] +=
                g * sq->val[static_cast<size_t>(i) * d + c];
          }
        }
    });
  }
  return out;
}

// out[q, :] = sum_j w[q, j] * v[q, j, :]. Counts N*P*D MACs.
template <class S>
Tensor<S> rowcombine(const Tensor<S>& w, const Tensor<S>& v) {
  if (w.ndim() != 2 || v.ndim() != 3 || v.dim(0) != w.dim(0) || v.dim(1) != w.dim(1))
    throw ShapeError("rowcombine: w " + detail::shape_str(w.shape()) + " vs v " +
                     detail::shape_str(v.shape()));
  const int n = w.dim(0), np = w.dim(1), d = v.dim(2);
  Tape<S>* tp = detail::common_tape<S>({&w, &v});
  Tensor<S> out = Tensor<S>::zeros({n, d});
  const S* pw = w.data();
  const S* pv = v.data();
  S* po = out.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < np; ++j) {
      const S wij = pw[static_cast<std::int64_t>(i) * np + j];
      const S* vr = pv + (static_cast<std::int64_t>(i) * np + j) * d;
      S* orow = po + static_cast<std::int64_t>(i) * d;
      for (int c = 0; c < d; ++c) orow[c] += wij * vr[c];
    }
  if (tp) {
    tp->flops().macs += static_cast<std::uint64_t>(n) * np * d;
    auto sw = w.storage(), sv = v.storage(), so = out.storage();
    tp->bind(out.storage(), [sw, sv, so, n, np, d]() {
      sw->ensure_grad();
      sv->ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < np; ++j) {
          const S wij = sw->val[static_cast<size_t>(i) * np + j];
          S acc = 0;
          for (int c = 0; c < d; ++c) {
            const S g = so->grad[static_cast<size_t>(i) * d + c];
            acc += g * sv->val[(static_cast<size_t>(i) * np + j) * d + c];
            sv->grad[(static_cast<size_t>(i) * np + j) * d + c] += wij * g;
          }
          sw->grad[static_cast<size_t>(i) * np + j] += acc;
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

// Align-corner bilinear resize of an HxWxD map. Identity when sizes match.
template <class S>
Tensor<S> upsample_bilinear2d(const Tensor<S>& x, int h2, int w2) {
  if (x.ndim() != 3) throw ShapeError("upsample_bilinear2d: need HxWxD, got " + detail::shape_str(x.shape()));
  if (h2 < 1 || w2 < 1) throw ContractError("upsample_bilinear2d: bad target size");
  const int h = x.dim(0), w = x.dim(1), d = x.dim(2);
  Tape<S>* tp = detail::common_tape<S>({&x});
  Tensor<S> out = Tensor<S>::zeros({h2, w2, d});
  const double fy = (h2 > 1 && h > 1) ? static_cast<double>(h - 1) / (h2 - 1) : 0.0;
  const double fx = (w2 > 1 && w > 1) ? static_cast<double>(w - 1) / (w2 - 1) : 0.0;
  const S* px = x.data();
  S* po = out.data();
  auto corners = [](double c, int lim, int& c0, int& c1, double& w1) {
    c0 = static_cast<int>(std::floor(c));
    if (c0 > lim - 1) c0 = lim - 1;
    if (c0 < 0) c0 = 0;
    c1 = std::min(c0 + 1, lim - 1);
    w1 = c - c0;
  };
  for (int i = 0; i < h2; ++i)
    for (int j = 0; j < w2; ++j) {
      int y0, y1, x0, x1;
      double wy1, wx1;
      corners(i * fy, h, y0, y1, wy1);
      corners(j * fx, w, x0, x1, wx1);
      S* orow = po + (static_cast<std::int64_t>(i) * w2 + j) * d;
      const double w00 = (1 - wy1) * (1 - wx1), w01 = (1 - wy1) * wx1;
      const double w10 = wy1 * (1 - wx1), w11 = wy1 * wx1;
      const S* r00 = px + (static_cast<std::int64_t>(y0) * w + x0) * d;
      const S* r01 = px + (static_cast<std::int64_t>(y0) * w + x1) * d;
      const S* r10 = px + (static_cast<std::int64_t>(y1) * w + x0) * d;
      const S* r11 = px + (static_cast<std::int64_t>(y1) * w + x1) * d;
      for (int c = 0; c < d; ++c)
        orow[c] = static_cast<S>(w00 * r00[c] + w01 * r01[c] + w10 * r10[c] + w11 * r11[c]);
    }
  if (tp) {
    auto sx = x.storage(), so = out.storage();
    tp->bind(out.storage(), [sx, so, h, w, d, h2, w2, fy, fx, corners]() {
      sx->ensure_grad();
      for (int i = 0; i < h2; ++i)
        for (int j = 0; j < w2; ++j) {
          int y0, y1, x0, x1;
          double wy1, wx1;
          corners(i * fy, h, y0, y1, wy1);
          corners(j * fx, w, x0, x1, wx1);
          const S* grow = so->grad.data() + (static_cast<std::int64_t>(i) * w2 + j) * d;
          const double ws[4] = {(1 - wy1) * (1 - wx1), (1 - wy1) * wx1, wy1 * (1 - wx1), wy1 * wx1};
          const std::int64_t bases[4] = {
              (static_cast<std::int64_t>(y0) * w + x0) * d, (static_cast<std::int64_t>(y0) * w + x1) * d,
              (static_cast<std::int64_t>(y1) * w + x0) * d, (static_cast<std::int64_t>(y1) * w + x1) * d};
          for (int k = 0; k < 4; ++k)
            for (int c = 0; c < d; ++c)
              sx->grad[static_cast<size_t>(bases[k] + c)] += static_cast<S>(ws[k] * grow[c]);
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  bool pass = true;
  // index of the worst element as (input, flat offset)
  int worst_input = -1;
  std::int64_t worst_offset = -1;
};

// Central finite differences against tape gradients. Relative error uses a
// floor of 1e-3 in the denominator so that fp noise around zero gradients
// does not register as failure.
template <class S, class F>
GradCheckReport grad_check(F&& f, std::vector<Tensor<S>> inputs, double step = 1e-5,
                           double tol = 1e-4) {
  GradCheckReport rep;
  std::vector<std::vector<S>> analytic;
  {
    Tape<S> tape;
    std::vector<Tensor<S>> bound;
    bound.reserve(inputs.size());
    for (auto& in : inputs) {
      Tensor<S> c = in.clone();
      tape.watch(c, true);
      bound.push_back(c);
    }
    Tensor<S> loss = f(tape, bound);
    if (loss.numel() != 1) throw ContractError("grad_check: f must be scalar-valued");
    tape.backward(loss);
    for (auto& b : bound) analytic.push_back(b.grad_vec());
  }
  auto eval = [&](const std::vector<Tensor<S>>& xs) -> double {
    Tape<S> tape;
    std::vector<Tensor<S>> bound;
    for (const auto& in : xs) {
      Tensor<S> c = in.clone();
      tape.watch(c, false);
      bound.push_back(c);
    }
    Tensor<S> loss = f(tape, bound);
    return static_cast<double>(loss.item());
  };
  for (size_t which = 0; which < inputs.size(); ++which) {
    for (std::int64_t i = 0; i < inputs[which].numel(); ++i) {
      std::vector<Tensor<S>> xs;
      for (const auto& in : inputs) xs.push_back(in.clone());
      const S keep = xs[which].data()[i];
      xs[which].data()[i] = keep + static_cast<S>(step);
      const double fp = eval(xs);
      xs[which].data()[i] = keep - static_cast<S>(step);
      const double fm = eval(xs);
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = static_cast<double>(analytic[which][static_cast<size_t>(i)]);
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({1e-3, std::abs(a), std::abs(numeric)});
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_input = static_cast<int>(which);
        rep.worst_offset = i;
      }
      rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
    }
  }
  rep.pass = rep.max_rel_err < tol;
  return rep;
}

// ---------------------------------------------------------------------------
// fills
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> randn(std::vector<int> shape, Rng& rng, double sigma = 1.0) {
  Tensor<S> t = Tensor<S>::zeros(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<S>(rng.normal() * sigma);
  return t;
}

template <class S>
Tensor<S> trunc_normal(std::vector<int> shape, Rng& rng, double sigma) {
  Tensor<S> t = Tensor<S>::zeros(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<S>(rng.trunc_normal(sigma));
  return t;
}

}  // namespace hsvit
