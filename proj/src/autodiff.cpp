#include "qst/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "qst/errors.hpp"

namespace qst::ad {

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

bool should_track(std::initializer_list<const Tensor*> inputs) {
  if (!g_grad_enabled) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

std::shared_ptr<TensorImpl> make_impl(Shape shape, std::vector<double> data) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatch(std::string(op) + ": " + shape_str(a.shape()) +
                        " vs " + shape_str(b.shape()));
  }
}

Eigen::Index last_dim(const Tensor& t) {
  if (t.ndim() == 0) throw ShapeMismatch("operation needs at least 1 dim");
  return t.shape().back();
}

}  // namespace

Eigen::Index numel(const Shape& shape) {
  Eigen::Index n = 1;
  for (Eigen::Index d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto impl = make_impl(std::move(shape), {});
  impl->data.assign(std::size_t(ad::numel(impl->shape)), 0.0);
  impl->requires_grad = requires_grad;
  return Tensor(impl);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.data().begin(), t.data().end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  if (Eigen::Index(data.size()) != ad::numel(shape)) {
    throw ShapeMismatch("from_data: " + std::to_string(data.size()) +
                        " values for shape " + shape_str(shape));
  }
  auto impl = make_impl(std::move(shape), std::move(data));
  impl->requires_grad = requires_grad;
  return Tensor(impl);
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

std::vector<double>& Tensor::grad() {
  impl_->ensure_grad();
  return impl_->grad;
}

double Tensor::value() const {
  if (numel() != 1) {
    throw ShapeMismatch("value() on tensor of shape " + shape_str(shape()));
  }
  return impl_->data[0];
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }
}

void Tensor::backward() {
  if (numel() != 1) {
    throw ShapeMismatch("backward() needs a single-element root, got " +
                        shape_str(shape()));
  }
  // Iterative postorder DFS over parent links; reversing it yields a
  // topological order with every consumer before its inputs.
  struct Frame {
    TensorImpl* node;
    std::size_t next;
  };
  std::vector<TensorImpl*> order;
  std::vector<Frame> stack;
  impl_->visited = true;
  stack.push_back({impl_.get(), 0});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.node->parents.size()) {
      TensorImpl* p = f.node->parents[f.next++].get();
      if (!p->visited) {
        p->visited = true;
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  impl_->ensure_grad();
  impl_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn();
  }
  // Free the walked graph; leaves keep their grads, intermediates die once
  // the caller drops their handles.
  for (TensorImpl* node : order) {
    node->visited = false;
    node->parents.clear();
    node->backward_fn = nullptr;
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

namespace {

/// Wires the tape: records parents and the pull-back closure on the result
/// when tracking applies. The closure sees impls directly.
void attach(const std::shared_ptr<TensorImpl>& out,
            std::initializer_list<Tensor> inputs,
            std::function<void()> backward_fn) {
  out->requires_grad = true;
  out->parents.reserve(inputs.size());
  for (const Tensor& t : inputs) out->parents.push_back(t.impl());
  out->backward_fn = std::move(backward_fn);
}

struct MatDims {
  Eigen::Index batch;  // 0 marks a plain 2D operand
  Eigen::Index rows;
  Eigen::Index cols;
};

MatDims mat_dims(const Tensor& t, const char* op) {
  if (t.ndim() == 2) return {0, t.dim(0), t.dim(1)};
  if (t.ndim() == 3) return {t.dim(0), t.dim(1), t.dim(2)};
  throw ShapeMismatch(std::string(op) + ": need 2D or 3D, got " +
                      shape_str(t.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  MatDims da = mat_dims(a, "matmul");
  MatDims db = mat_dims(b, "matmul");
  if (da.cols != db.rows ||
      (da.batch > 0 && db.batch > 0 && da.batch != db.batch)) {
    throw ShapeMismatch("matmul: " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
  }
  const Eigen::Index m = da.rows, k = da.cols, n = db.cols;
  const Eigen::Index batch = std::max(da.batch, db.batch);

  Shape out_shape =
      batch == 0 ? Shape{m, n} : Shape{batch, m, n};
  auto out = make_impl(out_shape,
                       std::vector<double>(std::size_t(ad::numel(out_shape))));

  const double* ap = a.data().data();
  const double* bp = b.data().data();
  double* op = out->data.data();
  if (batch == 0) {
    MapMat(op, m, n).noalias() = CMapMat(ap, m, k) * CMapMat(bp, k, n);
  } else if (da.batch > 0 && db.batch == 0) {
    // Fold the batch into rows: one GEMM.
    MapMat(op, batch * m, n).noalias() =
        CMapMat(ap, batch * m, k) * CMapMat(bp, k, n);
  } else {
    for (Eigen::Index i = 0; i < batch; ++i) {
      CMapMat ai(da.batch > 0 ? ap + i * m * k : ap, m, k);
      CMapMat bi(db.batch > 0 ? bp + i * k * n : bp, k, n);
      MapMat(op + i * m * n, m, n).noalias() = ai * bi;
    }
  }

  if (should_track({&a, &b})) {
    auto ai = a.impl();
    auto bi = b.impl();
    TensorImpl* self = out.get();
    attach(out, {a, b}, [self, ai, bi, da, db, m, k, n, batch] {
      const double* g = self->grad.data();
      if (ai->requires_grad) {
        ai->ensure_grad();
        double* ga = ai->grad.data();
        if (batch == 0) {
          MapMat(ga, m, k).noalias() +=
              CMapMat(g, m, n) * CMapMat(bi->data.data(), k, n).transpose();
        } else if (da.batch > 0 && db.batch == 0) {
          MapMat(ga, batch * m, k).noalias() +=
              CMapMat(g, batch * m, n) *
              CMapMat(bi->data.data(), k, n).transpose();
        } else {
          for (Eigen::Index i = 0; i < batch; ++i) {
            CMapMat gi(g + i * m * n, m, n);
            CMapMat bmat(db.batch > 0 ? bi->data.data() + i * k * n
                                      : bi->data.data(),
                         k, n);
            MapMat(da.batch > 0 ? ga + i * m * k : ga, m, k).noalias() +=
                gi * bmat.transpose();
          }
        }
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        double* gb = bi->grad.data();
        if (batch == 0) {
          MapMat(gb, k, n).noalias() +=
              CMapMat(ai->data.data(), m, k).transpose() * CMapMat(g, m, n);
        } else if (da.batch > 0 && db.batch == 0) {
          MapMat(gb, k, n).noalias() +=
              CMapMat(ai->data.data(), batch * m, k).transpose() *
              CMapMat(g, batch * m, n);
        } else {
          for (Eigen::Index i = 0; i < batch; ++i) {
            CMapMat gi(g + i * m * n, m, n);
            CMapMat amat(da.batch > 0 ? ai->data.data() + i * m * k
                                      : ai->data.data(),
                         m, k);
            MapMat(db.batch > 0 ? gb + i * k * n : gb, k, n).noalias() +=
                amat.transpose() * gi;
          }
        }
      }
    });
  }
  return Tensor(out);
}

Tensor add(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool same = sa == sb;
  if (!same) {
    // Bias-style broadcast: b's shape must be a suffix of a's.
    if (sb.size() >= sa.size() ||
        !std::equal(sb.begin(), sb.end(), sa.end() - Eigen::Index(sb.size()))) {
      throw ShapeMismatch("add: " + shape_str(sa) + " vs " + shape_str(sb));
    }
  }
  const Eigen::Index na = a.numel(), nb = b.numel();
  std::vector<double> data(static_cast<std::size_t>(na));
  const double* ap = a.data().data();
  const double* bp = b.data().data();
  for (Eigen::Index i = 0; i < na; ++i) data[std::size_t(i)] = ap[i] + bp[i % nb];

  auto out = make_impl(sa, std::move(data));
  if (should_track({&a, &b})) {
    auto aimpl = a.impl();
    auto bimpl = b.impl();
    TensorImpl* self = out.get();
    attach(out, {a, b}, [self, aimpl, bimpl, na, nb] {
      const double* g = self->grad.data();
      if (aimpl->requires_grad) {
        aimpl->ensure_grad();
        for (Eigen::Index i = 0; i < na; ++i) aimpl->grad[std::size_t(i)] += g[i];
      }
      if (bimpl->requires_grad) {
        bimpl->ensure_grad();
        for (Eigen::Index i = 0; i < na; ++i)
          bimpl->grad[std::size_t(i % nb)] += g[i];
      }
    });
  }
  return Tensor(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  const Eigen::Index n = a.numel();
  std::vector<double> data(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i)
    data[std::size_t(i)] = a.data()[std::size_t(i)] - b.data()[std::size_t(i)];
  auto out = make_impl(a.shape(), std::move(data));
  if (should_track({&a, &b})) {
    auto aimpl = a.impl();
    auto bimpl = b.impl();
    TensorImpl* self = out.get();
    attach(out, {a, b}, [self, aimpl, bimpl, n] {
      const double* g = self->grad.data();
      if (aimpl->requires_grad) {
        aimpl->ensure_grad();
        for (Eigen::Index i = 0; i < n; ++i) aimpl->grad[std::size_t(i)] += g[i];
      }
      if (bimpl->requires_grad) {
        bimpl->ensure_grad();
        for (Eigen::Index i = 0; i < n; ++i) bimpl->grad[std::size_t(i)] -= g[i];
      }
    });
  }
  return Tensor(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  const Eigen::Index n = a.numel();
  std::vector<double> data(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i)
    data[std::size_t(i)] = a.data()[std::size_t(i)] * b.data()[std::size_t(i)];
  auto out = make_impl(a.shape(), std::move(data));
  if (should_track({&a, &b})) {
    auto aimpl = a.impl();
    auto bimpl = b.impl();
    TensorImpl* self = out.get();
    attach(out, {a, b}, [self, aimpl, bimpl, n] {
      const double* g = self->grad.data();
      if (aimpl->requires_grad) {
        aimpl->ensure_grad();
        for (Eigen::Index i = 0; i < n; ++i)
          aimpl->grad[std::size_t(i)] += g[i] * bimpl->data[std::size_t(i)];
      }
      if (bimpl->requires_grad) {
        bimpl->ensure_grad();
        for (Eigen::Index i = 0; i < n; ++i)
          bimpl->grad[std::size_t(i)] += g[i] * aimpl->data[std::size_t(i)];
      }
    });
  }
  return Tensor(out);
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape("div", a, b);
  const Eigen::Index n = a.numel();
  std::vector<double> data(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i)
    data[std::size_t(i)] = a.data()[std::size_t(i)] / b.data()[std::size_t(i)];
  auto out = make_impl(a.shape(), std::move(data));
  if (should_track({&a, &b})) {
    auto aimpl = a.impl();
    auto bimpl = b.impl();
    TensorImpl* self = out.get();
    attach(out, {a, b}, [self, aimpl, bimpl, n] {
      const double* g = self->grad.data();
      if (aimpl->requires_grad) {
        aimpl->ensure_grad();
        for (Eigen::Index i = 0; i < n; ++i)
          aimpl->grad[std::size_t(i)] += g[i] / bimpl->data[std::size_t(i)];
      }
      if (bimpl->requires_grad) {
        bimpl->ensure_grad();
        for (Eigen::Index i = 0; i < n; ++i) {
          double bv = bimpl->data[std::size_t(i)];
          bimpl->grad[std::size_t(i)] -=
              g[i] * aimpl->data[std::size_t(i)] / (bv * bv);
        }
      }
    });
  }
  return Tensor(out);
}

namespace {

/// Shared body for elementwise unary ops: y = f(x), dx += g * dfdx(x, y).
template <typename F, typename DF>
Tensor unary_op(const Tensor& a, F f, DF dfdx) {
  const Eigen::Index n = a.numel();
  std::vector<double> data(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i)
    data[std::size_t(i)] = f(a.data()[std::size_t(i)]);
  auto out = make_impl(a.shape(), std::move(data));
  if (should_track({&a})) {
    auto aimpl = a.impl();
    TensorImpl* self = out.get();
    attach(out, {a}, [self, aimpl, dfdx, n] {
      aimpl->ensure_grad();
      for (Eigen::Index i = 0; i < n; ++i) {
        aimpl->grad[std::size_t(i)] +=
            self->grad[std::size_t(i)] *
            dfdx(aimpl->data[std::size_t(i)], self->data[std::size_t(i)]);
      }
    });
  }
  return Tensor(out);
}

}  // namespace

Tensor scale(const Tensor& a, double c) {
  return unary_op(
      a, [c](double x) { return x * c; },
      [c](double, double) { return c; });
}

Tensor add_const(const Tensor& a, double c) {
  return unary_op(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return unary_op(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) +
               x * inv_sqrt2pi * std::exp(-0.5 * x * x);
      });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sqrt_elem(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

Tensor max_const(const Tensor& a, double c) {
  return unary_op(
      a, [c](double x) { return x > c ? x : c; },
      [c](double x, double) { return x > c ? 1.0 : 0.0; });
}

Tensor transpose_last2(const Tensor& a) {
  MatDims dims = mat_dims(a, "transpose_last2");
  const Eigen::Index batch = std::max<Eigen::Index>(dims.batch, 1);
  const Eigen::Index m = dims.rows, n = dims.cols;
  Shape out_shape = a.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  std::vector<double> data(std::size_t(a.numel()));
  const double* ap = a.data().data();
  for (Eigen::Index i = 0; i < batch; ++i) {
    MapMat(data.data() + i * m * n, n, m) =
        CMapMat(ap + i * m * n, m, n).transpose();
  }
  auto out = make_impl(std::move(out_shape), std::move(data));
  if (should_track({&a})) {
    auto aimpl = a.impl();
    TensorImpl* self = out.get();
    attach(out, {a}, [self, aimpl, batch, m, n] {
      aimpl->ensure_grad();
      for (Eigen::Index i = 0; i < batch; ++i) {
        MapMat(aimpl->grad.data() + i * m * n, m, n) +=
            CMapMat(self->grad.data() + i * m * n, n, m).transpose();
      }
    });
  }
  return Tensor(out);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (ad::numel(shape) != a.numel()) {
    throw ShapeMismatch("reshape: " + shape_str(a.shape()) + " to " +
                        shape_str(shape));
  }
  auto out = make_impl(std::move(shape), a.data());
  if (should_track({&a})) {
    auto aimpl = a.impl();
    TensorImpl* self = out.get();
    attach(out, {a}, [self, aimpl] {
      aimpl->ensure_grad();
      for (std::size_t i = 0; i < self->grad.size(); ++i)
        aimpl->grad[i] += self->grad[i];
    });
  }
  return Tensor(out);
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_last: no inputs");
  Shape lead = parts.front().shape();
  lead.pop_back();
  Eigen::Index total_last = 0;
  for (const Tensor& p : parts) {
    Shape pl = p.shape();
    Eigen::Index pn = pl.back();
    pl.pop_back();
    if (pl != lead) {
      throw ShapeMismatch("concat_last: leading dims differ");
    }
    total_last += pn;
  }
  const Eigen::Index rows = ad::numel(lead);
  Shape out_shape = lead;
  out_shape.push_back(total_last);
  std::vector<double> data(std::size_t(rows * total_last));
  Eigen::Index offset = 0;
  for (const Tensor& p : parts) {
    const Eigen::Index pn = p.shape().back();
    const double* pp = p.data().data();
    for (Eigen::Index r = 0; r < rows; ++r) {
      std::copy(pp + r * pn, pp + (r + 1) * pn,
                data.begin() + r * total_last + offset);
    }
    offset += pn;
  }

  bool track = false;
  if (g_grad_enabled) {
    for (const Tensor& p : parts) track = track || p.requires_grad();
  }
  auto out = make_impl(std::move(out_shape), std::move(data));
  if (track) {
    out->requires_grad = true;
    std::vector<std::shared_ptr<TensorImpl>> impls;
    for (const Tensor& p : parts) {
      out->parents.push_back(p.impl());
      impls.push_back(p.impl());
    }
    TensorImpl* self = out.get();
    out->backward_fn = [self, impls, rows, total_last] {
      Eigen::Index offset = 0;
      for (const auto& impl : impls) {
        const Eigen::Index pn = impl->shape.back();
        if (impl->requires_grad) {
          impl->ensure_grad();
          for (Eigen::Index r = 0; r < rows; ++r) {
            for (Eigen::Index j = 0; j < pn; ++j) {
              impl->grad[std::size_t(r * pn + j)] +=
                  self->grad[std::size_t(r * total_last + offset + j)];
            }
          }
        }
        offset += pn;
      }
    };
  }
  return Tensor(out);
}

Tensor slice_last(const Tensor& a, Eigen::Index start, Eigen::Index len) {
  const Eigen::Index n = last_dim(a);
  if (start < 0 || len < 1 || start + len > n) {
    throw ShapeMismatch("slice_last: [" + std::to_string(start) + ", " +
                        std::to_string(start + len) + ") of last dim " +
                        std::to_string(n));
  }
  const Eigen::Index rows = a.numel() / n;
  Shape out_shape = a.shape();
  out_shape.back() = len;
  std::vector<double> data(std::size_t(rows * len));
  const double* ap = a.data().data();
  for (Eigen::Index r = 0; r < rows; ++r) {
    std::copy(ap + r * n + start, ap + r * n + start + len,
              data.begin() + r * len);
  }
  auto out = make_impl(std::move(out_shape), std::move(data));
  if (should_track({&a})) {
    auto aimpl = a.impl();
    TensorImpl* self = out.get();
    attach(out, {a}, [self, aimpl, start, len, n, rows] {
      aimpl->ensure_grad();
      for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index j = 0; j < len; ++j) {
          aimpl->grad[std::size_t(r * n + start + j)] +=
              self->grad[std::size_t(r * len + j)];
        }
      }
    });
  }
  return Tensor(out);
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  auto out = make_impl({1}, {total});
  if (should_track({&a})) {
    auto aimpl = a.impl();
    TensorImpl* self = out.get();
    attach(out, {a}, [self, aimpl] {
      aimpl->ensure_grad();
      for (double& g : aimpl->grad) g += self->grad[0];
    });
  }
  return Tensor(out);
}

Tensor mean(const Tensor& a) {
  const double inv_n = 1.0 / double(a.numel());
  double total = 0.0;
  for (double v : a.data()) total += v;
  auto out = make_impl({1}, {total * inv_n});
  if (should_track({&a})) {
    auto aimpl = a.impl();
    TensorImpl* self = out.get();
    attach(out, {a}, [self, aimpl, inv_n] {
      aimpl->ensure_grad();
      for (double& g : aimpl->grad) g += self->grad[0] * inv_n;
    });
  }
  return Tensor(out);
}

Tensor sum_last(const Tensor& a) {
  const Eigen::Index n = last_dim(a);
  const Eigen::Index rows = a.numel() / n;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> data(std::size_t(rows), 0.0);
  const double* ap = a.data().data();
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index j = 0; j < n; ++j) data[std::size_t(r)] += ap[r * n + j];
  }
  auto out = make_impl(std::move(out_shape), std::move(data));
  if (should_track({&a})) {
    auto aimpl = a.impl();
    TensorImpl* self = out.get();
    attach(out, {a}, [self, aimpl, rows, n] {
      aimpl->ensure_grad();
      for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index j = 0; j < n; ++j)
          aimpl->grad[std::size_t(r * n + j)] += self->grad[std::size_t(r)];
      }
    });
  }
  return Tensor(out);
}

Tensor softmax_last(const Tensor& a) {
  const Eigen::Index n = last_dim(a);
  const Eigen::Index rows = a.numel() / n;
  std::vector<double> data(std::size_t(a.numel()));
  const double* ap = a.data().data();
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double* row = ap + r * n;
    double mx = row[0];
    for (Eigen::Index j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      double e = std::exp(row[j] - mx);
      data[std::size_t(r * n + j)] = e;
      denom += e;
    }
    for (Eigen::Index j = 0; j < n; ++j) data[std::size_t(r * n + j)] /= denom;
  }
  auto out = make_impl(a.shape(), std::move(data));
  if (should_track({&a})) {
    auto aimpl = a.impl();
    TensorImpl* self = out.get();
    attach(out, {a}, [self, aimpl, rows, n] {
      aimpl->ensure_grad();
      for (Eigen::Index r = 0; r < rows; ++r) {
        const double* y = self->data.data() + r * n;
        const double* g = self->grad.data() + r * n;
        double dot = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) dot += g[j] * y[j];
        for (Eigen::Index j = 0; j < n; ++j)
          aimpl->grad[std::size_t(r * n + j)] += y[j] * (g[j] - dot);
      }
    });
  }
  return Tensor(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  const Eigen::Index n = last_dim(x);
  if (gain.ndim() != 1 || gain.dim(0) != n || bias.ndim() != 1 ||
      bias.dim(0) != n) {
    throw ShapeMismatch("layer_norm: gain/bias must be shaped (" +
                        std::to_string(n) + ")");
  }
  const Eigen::Index rows = x.numel() / n;
  std::vector<double> data(std::size_t(x.numel()));
  std::vector<double> xhat(std::size_t(x.numel()));
  std::vector<double> inv_std(static_cast<std::size_t>(rows));
  const double* xp = x.data().data();
  const double* gp = gain.data().data();
  const double* bp = bias.data().data();
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double* row = xp + r * n;
    double mu = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) mu += row[j];
    mu /= double(n);
    double var = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      double c = row[j] - mu;
      var += c * c;
    }
    var /= double(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[std::size_t(r)] = is;
    for (Eigen::Index j = 0; j < n; ++j) {
      double xh = (row[j] - mu) * is;
      xhat[std::size_t(r * n + j)] = xh;
      data[std::size_t(r * n + j)] = xh * gp[j] + bp[j];
    }
  }
  auto out = make_impl(x.shape(), std::move(data));
  if (should_track({&x, &gain, &bias})) {
    auto xi = x.impl();
    auto gi = gain.impl();
    auto bi = bias.impl();
    TensorImpl* self = out.get();
    attach(out, {x, gain, bias},
           [self, xi, gi, bi, rows, n, xhat = std::move(xhat),
            inv_std = std::move(inv_std)] {
             if (gi->requires_grad) gi->ensure_grad();
             if (bi->requires_grad) bi->ensure_grad();
             if (xi->requires_grad) xi->ensure_grad();
             for (Eigen::Index r = 0; r < rows; ++r) {
               const double* g = self->grad.data() + r * n;
               const double* xh = xhat.data() + r * n;
               if (gi->requires_grad || bi->requires_grad) {
                 for (Eigen::Index j = 0; j < n; ++j) {
                   if (gi->requires_grad)
                     gi->grad[std::size_t(j)] += g[j] * xh[j];
                   if (bi->requires_grad) bi->grad[std::size_t(j)] += g[j];
                 }
               }
               if (xi->requires_grad) {
                 // dxhat = g * gain; dx = (dxhat - mean(dxhat)
                 //        - xhat * mean(dxhat * xhat)) * inv_std
                 double m1 = 0.0, m2 = 0.0;
                 for (Eigen::Index j = 0; j < n; ++j) {
                   double dxh = g[j] * gi->data[std::size_t(j)];
                   m1 += dxh;
                   m2 += dxh * xh[j];
                 }
                 m1 /= double(n);
                 m2 /= double(n);
                 const double is = inv_std[std::size_t(r)];
                 for (Eigen::Index j = 0; j < n; ++j) {
                   double dxh = g[j] * gi->data[std::size_t(j)];
                   xi->grad[std::size_t(r * n + j)] +=
                       (dxh - m1 - xh[j] * m2) * is;
                 }
               }
             }
           });
  }
  return Tensor(out);
}

}  // namespace qst::ad
