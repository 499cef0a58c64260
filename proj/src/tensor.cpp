#include "gbtl/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

namespace gbtl {

using MatRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const MatRM>;
using MutMap = Eigen::Map<MatRM>;

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    require(d >= 0, "shape dimensions must be non-negative");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace {

void check_finite(std::span<const Scalar> v, const char* op) {
  for (Scalar x : v) {
    if (!std::isfinite(x)) fail_runtime(std::string("non-finite value produced by ") + op);
  }
}

thread_local std::vector<Tape*> g_tape_stack;

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::leaf(Shape shape, std::vector<Scalar> values, bool requires_grad) {
  require(shape_size(shape) == values.size(),
          "leaf: shape " + shape_str(shape) + " does not match value count " +
              std::to_string(values.size()));
  check_finite(values, "leaf");
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<Scalar> v(shape_size(shape), 0.0);
  return leaf(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::full(Shape shape, Scalar value, bool requires_grad) {
  std::vector<Scalar> v(shape_size(shape), value);
  return leaf(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::scalar(Scalar value, bool requires_grad) {
  return leaf(Shape{}, {value}, requires_grad);
}

const Shape& Tensor::shape() const& {
  require(defined(), "undefined tensor");
  return node_->shape;
}

int Tensor::dim(int i) const {
  const Shape& s = shape();
  require(i >= 0 && i < static_cast<int>(s.size()), "dim index out of range");
  return s[i];
}

std::size_t Tensor::size() const {
  require(defined(), "undefined tensor");
  return node_->values.size();
}

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }

std::span<const Scalar> Tensor::values() const& {
  require(defined(), "undefined tensor");
  return node_->values;
}

std::span<Scalar> Tensor::mutable_values() & {
  require(defined(), "undefined tensor");
  require(node_->is_leaf(), "mutable_values: only leaf tensors may be mutated");
  return node_->values;
}

bool Tensor::has_grad() const { return defined() && !node_->grad.empty(); }

std::span<const Scalar> Tensor::grad() const& {
  require(defined(), "undefined tensor");
  require(!node_->grad.empty(), "grad: tensor has no gradient (run backward first)");
  return node_->grad;
}

void Tensor::zero_grad() {
  require(defined(), "undefined tensor");
  node_->grad.clear();
}

void Tensor::accumulate_grad(std::span<const Scalar> g) {
  require(defined(), "undefined tensor");
  require(g.size() == node_->values.size(), "accumulate_grad: size mismatch");
  node_->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) node_->grad[i] += g[i];
}

Scalar Tensor::item() const {
  require(defined() && size() == 1, "item: tensor is not a scalar");
  return node_->values[0];
}

Tensor Tensor::clone() const {
  require(defined(), "undefined tensor");
  return leaf(node_->shape, node_->values, node_->requires_grad);
}

// ---- Tape ------------------------------------------------------------------

Tape::Tape() { g_tape_stack.push_back(this); }

Tape::~Tape() {
  for (auto& n : nodes_) n->tape = nullptr;
  g_tape_stack.pop_back();
}

Tape* Tape::current() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back(); }

void Tape::record(const std::shared_ptr<detail::Node>& node) {
  node->tape = this;
  node->tape_index = nodes_.size();
  nodes_.push_back(node);
}

void Tape::backward(const Tensor& loss) {
  require(loss.defined(), "backward: undefined loss");
  require(!backward_run_, "backward: tape already swept");
  backward_run_ = true;
  auto n = loss.node();
  require(n->tape == this, "backward: loss is not recorded on this tape");
  require(n->values.size() == 1, "backward: loss must be a scalar");
  n->ensure_grad();
  n->grad[0] = 1.0;
  for (std::size_t i = n->tape_index + 1; i-- > 0;) {
    detail::Node* nd = nodes_[i].get();
    if (!nd->grad.empty() && nd->backward_fn) nd->backward_fn();
  }
}

void backward(const Tensor& loss) {
  require(loss.defined(), "backward: undefined loss");
  Tape* t = loss.node()->tape;
  require(t != nullptr, "backward: loss is not recorded on a live tape");
  t->backward(loss);
}

// ---- Op plumbing -----------------------------------------------------------

class OpBuilder {
 public:
  static Tensor make(Shape shape, std::vector<Scalar> values,
                     std::vector<Tensor> inputs,
                     std::function<void(detail::Node*)> backward, const char* op) {
    check_finite(values, op);
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->values = std::move(values);

    Tape* tape = Tape::current();
    bool needs = false;
    for (const Tensor& t : inputs) needs = needs || t.requires_grad();
    if (tape && needs && backward) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (const Tensor& t : inputs) node->parents.push_back(t.node());
      detail::Node* self = node.get();
      node->backward_fn = [self, bw = std::move(backward)] { bw(self); };
      tape->record(node);
    }
    return Tensor(std::move(node));
  }
};

namespace {

detail::Node* parent(detail::Node* self, std::size_t i) { return self->parents[i].get(); }

bool wants_grad(detail::Node* p) { return p->requires_grad; }

void add_into(detail::Node* p, std::span<const Scalar> g) {
  p->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
}

void check_defined(const Tensor& t, const char* op) {
  require(t.defined(), std::string(op) + ": undefined input tensor");
}

}  // namespace

// ---- Elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_defined(a, "add");
  check_defined(b, "add");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool same = sa == sb;
  bool suffix = !same && sb.size() < sa.size() &&
                std::equal(sb.begin(), sb.end(), sa.end() - sb.size());
  require(same || suffix, "add: shape mismatch " + shape_str(sa) + " vs " + shape_str(sb) +
                              " (only leading-dimension broadcast of the second "
                              "operand is supported)");
  const std::size_t nb = b.size() == 0 ? 1 : b.size();
  const std::size_t outer = same ? 1 : a.size() / nb;

  std::vector<Scalar> out(a.size());
  auto av = a.values();
  auto bv = b.values();
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  } else {
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < nb; ++i) out[o * nb + i] = av[o * nb + i] + bv[i];
  }

  return OpBuilder::make(
      sa, std::move(out), {a, b},
      [same, outer, nb](detail::Node* self) {
        detail::Node* pa = parent(self, 0);
        detail::Node* pb = parent(self, 1);
        const auto& g = self->grad;
        if (wants_grad(pa)) add_into(pa, g);
        if (wants_grad(pb)) {
          pb->ensure_grad();
          if (same) {
            for (std::size_t i = 0; i < g.size(); ++i) pb->grad[i] += g[i];
          } else {
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t i = 0; i < nb; ++i) pb->grad[i] += g[o * nb + i];
          }
        }
      },
      "add");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_defined(a, "mul");
  check_defined(b, "mul");
  require(a.shape() == b.shape(),
          "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<Scalar> out(a.size());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];

  return OpBuilder::make(
      a.shape(), std::move(out), {a, b},
      [](detail::Node* self) {
        detail::Node* pa = parent(self, 0);
        detail::Node* pb = parent(self, 1);
        const auto& g = self->grad;
        if (wants_grad(pa)) {
          pa->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) pa->grad[i] += g[i] * pb->values[i];
        }
        if (wants_grad(pb)) {
          pb->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) pb->grad[i] += g[i] * pa->values[i];
        }
      },
      "mul");
}

Tensor scale(const Tensor& a, Scalar c) {
  check_defined(a, "scale");
  std::vector<Scalar> out(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  return OpBuilder::make(
      a.shape(), std::move(out), {a},
      [c](detail::Node* self) {
        detail::Node* pa = parent(self, 0);
        if (!wants_grad(pa)) return;
        pa->ensure_grad();
        for (std::size_t i = 0; i < self->grad.size(); ++i) pa->grad[i] += c * self->grad[i];
      },
      "scale");
}

Tensor relu(const Tensor& a) {
  check_defined(a, "relu");
  std::vector<Scalar> out(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  return OpBuilder::make(
      a.shape(), std::move(out), {a},
      [](detail::Node* self) {
        detail::Node* pa = parent(self, 0);
        if (!wants_grad(pa)) return;
        pa->ensure_grad();
        for (std::size_t i = 0; i < self->grad.size(); ++i)
          if (pa->values[i] > 0.0) pa->grad[i] += self->grad[i];
      },
      "relu");
}

// ---- Linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  require(b.ndim() == 2, "matmul: second operand must be 2-D, got " + shape_str(b.shape()));
  const bool vec = a.ndim() == 1;
  require(vec || a.ndim() == 2,
          "matmul: first operand must be 1-D or 2-D, got " + shape_str(a.shape()));
  const int m = vec ? 1 : a.dim(0);
  const int k = vec ? a.dim(0) : a.dim(1);
  const int n = b.dim(1);
  require(b.dim(0) == k, "matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));

  std::vector<Scalar> out(static_cast<std::size_t>(m) * n);
  {
    ConstMap A(a.values().data(), m, k);
    ConstMap B(b.values().data(), k, n);
    MutMap O(out.data(), m, n);
    O.noalias() = A * B;
  }

  Shape out_shape = vec ? Shape{n} : Shape{m, n};
  return OpBuilder::make(
      std::move(out_shape), std::move(out), {a, b},
      [m, k, n](detail::Node* self) {
        detail::Node* pa = parent(self, 0);
        detail::Node* pb = parent(self, 1);
        ConstMap G(self->grad.data(), m, n);
        if (wants_grad(pa)) {
          pa->ensure_grad();
          ConstMap B(pb->values.data(), k, n);
          MutMap GA(pa->grad.data(), m, k);
          GA.noalias() += G * B.transpose();
        }
        if (wants_grad(pb)) {
          pb->ensure_grad();
          ConstMap A(pa->values.data(), m, k);
          MutMap GB(pb->grad.data(), k, n);
          GB.noalias() += A.transpose() * G;
        }
      },
      "matmul");
}

Tensor transpose(const Tensor& a) {
  check_defined(a, "transpose");
  require(a.ndim() == 2, "transpose: expects 2-D, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  std::vector<Scalar> out(a.size());
  auto av = a.values();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j) * m + i] = av[static_cast<std::size_t>(i) * n + j];
  return OpBuilder::make(
      Shape{n, m}, std::move(out), {a},
      [m, n](detail::Node* self) {
        detail::Node* pa = parent(self, 0);
        if (!wants_grad(pa)) return;
        pa->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            pa->grad[static_cast<std::size_t>(i) * n + j] +=
                self->grad[static_cast<std::size_t>(j) * m + i];
      },
      "transpose");
}

Tensor reshape(const Tensor& a, Shape new_shape) {
  check_defined(a, "reshape");
  require(shape_size(new_shape) == a.size(),
          "reshape: element count mismatch, " + shape_str(a.shape()) + " -> " +
              shape_str(new_shape));
  std::vector<Scalar> out(a.values().begin(), a.values().end());
  return OpBuilder::make(
      std::move(new_shape), std::move(out), {a},
      [](detail::Node* self) {
        detail::Node* pa = parent(self, 0);
        if (wants_grad(pa)) add_into(pa, self->grad);
      },
      "reshape");
}

Tensor slice_cols(const Tensor& a, int col_begin, int col_end) {
  check_defined(a, "slice_cols");
  require(a.ndim() == 2, "slice_cols: expects 2-D, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  require(0 <= col_begin && col_begin < col_end && col_end <= n,
          "slice_cols: invalid column range");
  const int w = col_end - col_begin;
  std::vector<Scalar> out(static_cast<std::size_t>(m) * w);
  auto av = a.values();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j)
      out[static_cast<std::size_t>(i) * w + j] = av[static_cast<std::size_t>(i) * n + col_begin + j];
  return OpBuilder::make(
      Shape{m, w}, std::move(out), {a},
      [m, n, w, col_begin](detail::Node* self) {
        detail::Node* pa = parent(self, 0);
        if (!wants_grad(pa)) return;
        pa->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < w; ++j)
            pa->grad[static_cast<std::size_t>(i) * n + col_begin + j] +=
                self->grad[static_cast<std::size_t>(i) * w + j];
      },
      "slice_cols");
}

Tensor slice_rows(const Tensor& a, int row_begin, int row_end) {
  check_defined(a, "slice_rows");
  require(a.ndim() == 2, "slice_rows: expects 2-D, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  require(0 <= row_begin && row_begin < row_end && row_end <= m,
          "slice_rows: invalid row range");
  const int h = row_end - row_begin;
  auto av = a.values();
  std::vector<Scalar> out(av.begin() + static_cast<std::ptrdiff_t>(row_begin) * n,
                          av.begin() + static_cast<std::ptrdiff_t>(row_end) * n);
  return OpBuilder::make(
      Shape{h, n}, std::move(out), {a},
      [n, h, row_begin](detail::Node* self) {
        detail::Node* pa = parent(self, 0);
        if (!wants_grad(pa)) return;
        pa->ensure_grad();
        const std::size_t off = static_cast<std::size_t>(row_begin) * n;
        for (std::size_t i = 0; i < static_cast<std::size_t>(h) * n; ++i)
          pa->grad[off + i] += self->grad[i];
      },
      "slice_rows");
}

Tensor concat_cols(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  for (const Tensor& t : parts) {
    check_defined(t, "concat_cols");
    require(t.ndim() == 2, "concat_cols: expects 2-D parts");
  }
  const int m = parts[0].dim(0);
  int total = 0;
  for (const Tensor& t : parts) {
    require(t.dim(0) == m, "concat_cols: row count mismatch");
    total += t.dim(1);
  }
  std::vector<Scalar> out(static_cast<std::size_t>(m) * total);
  std::vector<int> offsets;
  int off = 0;
  for (const Tensor& t : parts) {
    offsets.push_back(off);
    const int w = t.dim(1);
    auto tv = t.values();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        out[static_cast<std::size_t>(i) * total + off + j] = tv[static_cast<std::size_t>(i) * w + j];
    off += w;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return OpBuilder::make(
      Shape{m, total}, std::move(out), std::move(inputs),
      [m, total, offsets](detail::Node* self) {
        for (std::size_t p = 0; p < self->parents.size(); ++p) {
          detail::Node* pp = parent(self, p);
          if (!wants_grad(pp)) continue;
          pp->ensure_grad();
          const int w = pp->shape[1];
          const int off = offsets[p];
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
              pp->grad[static_cast<std::size_t>(i) * w + j] +=
                  self->grad[static_cast<std::size_t>(i) * total + off + j];
        }
      },
      "concat_cols");
}

Tensor take_row(const Tensor& a, int row) {
  check_defined(a, "take_row");
  require(a.ndim() == 2, "take_row: expects 2-D, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  require(0 <= row && row < m, "take_row: row index out of range");
  auto av = a.values();
  std::vector<Scalar> out(av.begin() + static_cast<std::size_t>(row) * n,
                          av.begin() + static_cast<std::size_t>(row + 1) * n);
  return OpBuilder::make(
      Shape{n}, std::move(out), {a},
      [n, row](detail::Node* self) {
        detail::Node* pa = parent(self, 0);
        if (!wants_grad(pa)) return;
        pa->ensure_grad();
        for (int j = 0; j < n; ++j)
          pa->grad[static_cast<std::size_t>(row) * n + j] += self->grad[j];
      },
      "take_row");
}

// ---- Normalization and reductions -------------------------------------------

Tensor softmax(const Tensor& a, int axis) {
  check_defined(a, "softmax");
  const Shape& s = a.shape();
  require(!s.empty(), "softmax: scalar input");
  if (axis < 0) axis += static_cast<int>(s.size());
  require(axis >= 0 && axis < static_cast<int>(s.size()), "softmax: invalid axis");
  const int n = s[axis];
  std::size_t inner = 1, outer = 1;
  for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) inner *= s[i];
  for (int i = 0; i < axis; ++i) outer *= s[i];

  std::vector<Scalar> out(a.size());
  auto av = a.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      Scalar mx = av[base];
      for (int j = 1; j < n; ++j) mx = std::max(mx, av[base + j * inner]);
      Scalar z = 0.0;
      for (int j = 0; j < n; ++j) {
        const Scalar e = std::exp(av[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (int j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  }

  return OpBuilder::make(
      s, std::move(out), {a},
      [n, inner, outer](detail::Node* self) {
        detail::Node* pa = parent(self, 0);
        if (!wants_grad(pa)) return;
        pa->ensure_grad();
        const auto& y = self->values;
        const auto& g = self->grad;
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            Scalar dot = 0.0;
            for (int j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
            for (int j = 0; j < n; ++j)
              pa->grad[base + j * inner] += y[base + j * inner] * (g[base + j * inner] - dot);
          }
        }
      },
      "softmax");
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, Scalar eps) {
  check_defined(x, "layernorm");
  check_defined(gain, "layernorm");
  check_defined(bias, "layernorm");
  const Shape& s = x.shape();
  require(!s.empty(), "layernorm: scalar input");
  const int d = s.back();
  require(gain.shape() == Shape{d} && bias.shape() == Shape{d},
          "layernorm: gain/bias must be 1-D of the normalized size");
  const std::size_t rows = x.size() / d;

  std::vector<Scalar> out(x.size());
  auto xhat = std::make_shared<std::vector<Scalar>>(x.size());
  auto inv_std = std::make_shared<std::vector<Scalar>>(rows);
  auto xv = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * d;
    Scalar mu = 0.0;
    for (int j = 0; j < d; ++j) mu += xv[base + j];
    mu /= d;
    Scalar var = 0.0;
    for (int j = 0; j < d; ++j) {
      const Scalar c = xv[base + j] - mu;
      var += c * c;
    }
    var /= d;
    const Scalar inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (int j = 0; j < d; ++j) {
      const Scalar h = (xv[base + j] - mu) * inv;
      (*xhat)[base + j] = h;
      out[base + j] = gv[j] * h + bv[j];
    }
  }

  return OpBuilder::make(
      s, std::move(out), {x, gain, bias},
      [d, rows, xhat, inv_std](detail::Node* self) {
        detail::Node* px = parent(self, 0);
        detail::Node* pg = parent(self, 1);
        detail::Node* pb = parent(self, 2);
        const auto& g = self->grad;
        if (wants_grad(pg)) {
          pg->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (int j = 0; j < d; ++j) pg->grad[j] += g[r * d + j] * (*xhat)[r * d + j];
        }
        if (wants_grad(pb)) {
          pb->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (int j = 0; j < d; ++j) pb->grad[j] += g[r * d + j];
        }
        if (wants_grad(px)) {
          px->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t base = r * d;
            Scalar m1 = 0.0, m2 = 0.0;
            for (int j = 0; j < d; ++j) {
              const Scalar dh = g[base + j] * pg->values[j];
              m1 += dh;
              m2 += dh * (*xhat)[base + j];
            }
            m1 /= d;
            m2 /= d;
            for (int j = 0; j < d; ++j) {
              const Scalar dh = g[base + j] * pg->values[j];
              px->grad[base + j] += (*inv_std)[r] * (dh - m1 - (*xhat)[base + j] * m2);
            }
          }
        }
      },
      "layernorm");
}

Tensor embedding_gather(const Tensor& table, std::span<const int> ids) {
  check_defined(table, "embedding_gather");
  require(table.ndim() == 2, "embedding_gather: table must be 2-D");
  const int v = table.dim(0), d = table.dim(1);
  require(!ids.empty(), "embedding_gather: empty id list");
  for (int id : ids)
    require(0 <= id && id < v,
            "embedding_gather: token id " + std::to_string(id) + " outside vocabulary of " +
                std::to_string(v));
  const int t = static_cast<int>(ids.size());
  std::vector<Scalar> out(static_cast<std::size_t>(t) * d);
  auto tv = table.values();
  for (int i = 0; i < t; ++i)
    std::copy_n(tv.begin() + static_cast<std::size_t>(ids[i]) * d, d,
                out.begin() + static_cast<std::size_t>(i) * d);
  std::vector<int> ids_copy(ids.begin(), ids.end());
  return OpBuilder::make(
      Shape{t, d}, std::move(out), {table},
      [d, ids_copy](detail::Node* self) {
        detail::Node* pt = parent(self, 0);
        if (!wants_grad(pt)) return;
        pt->ensure_grad();
        for (std::size_t i = 0; i < ids_copy.size(); ++i)
          for (int j = 0; j < d; ++j)
            pt->grad[static_cast<std::size_t>(ids_copy[i]) * d + j] += self->grad[i * d + j];
      },
      "embedding_gather");
}

Tensor sum(const Tensor& a) {
  check_defined(a, "sum");
  Scalar s = 0.0;
  for (Scalar x : a.values()) s += x;
  return OpBuilder::make(
      Shape{}, {s}, {a},
      [](detail::Node* self) {
        detail::Node* pa = parent(self, 0);
        if (!wants_grad(pa)) return;
        pa->ensure_grad();
        for (auto& g : pa->grad) g += self->grad[0];
      },
      "sum");
}

Tensor mean(const Tensor& a) {
  check_defined(a, "mean");
  require(a.size() > 0, "mean: empty tensor");
  Scalar s = 0.0;
  for (Scalar x : a.values()) s += x;
  const Scalar n = static_cast<Scalar>(a.size());
  return OpBuilder::make(
      Shape{}, {s / n}, {a},
      [n](detail::Node* self) {
        detail::Node* pa = parent(self, 0);
        if (!wants_grad(pa)) return;
        pa->ensure_grad();
        for (auto& g : pa->grad) g += self->grad[0] / n;
      },
      "mean");
}

// ---- Losses ----------------------------------------------------------------

namespace {

// log(sum(exp(row))) with max subtraction; row given by base/stride layout.
Scalar log_sum_exp(std::span<const Scalar> v, std::size_t base, int n) {
  Scalar mx = v[base];
  for (int j = 1; j < n; ++j) mx = std::max(mx, v[base + j]);
  Scalar z = 0.0;
  for (int j = 0; j < n; ++j) z += std::exp(v[base + j] - mx);
  return mx + std::log(z);
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, int target) {
  check_defined(logits, "cross_entropy");
  require(logits.ndim() == 1, "cross_entropy: logits must be 1-D");
  const int v = logits.dim(0);
  require(0 <= target && target < v,
          "cross_entropy: target " + std::to_string(target) + " outside vocabulary of " +
              std::to_string(v));
  auto lv = logits.values();
  const Scalar lse = log_sum_exp(lv, 0, v);
  const Scalar loss = lse - lv[target];
  return OpBuilder::make(
      Shape{}, {loss}, {logits},
      [v, target, lse](detail::Node* self) {
        detail::Node* pl = parent(self, 0);
        if (!wants_grad(pl)) return;
        pl->ensure_grad();
        const Scalar g0 = self->grad[0];
        for (int j = 0; j < v; ++j) {
          const Scalar p = std::exp(pl->values[j] - lse);
          pl->grad[j] += g0 * (p - (j == target ? 1.0 : 0.0));
        }
      },
      "cross_entropy");
}

Tensor sequence_cross_entropy(const Tensor& logits, std::span<const int> targets) {
  check_defined(logits, "sequence_cross_entropy");
  require(logits.ndim() == 2, "sequence_cross_entropy: logits must be 2-D");
  const int t = logits.dim(0), v = logits.dim(1);
  require(static_cast<int>(targets.size()) == t,
          "sequence_cross_entropy: target count mismatch");
  auto lv = logits.values();
  auto lse = std::make_shared<std::vector<Scalar>>(t);
  Scalar total = 0.0;
  for (int r = 0; r < t; ++r) {
    require(0 <= targets[r] && targets[r] < v,
            "sequence_cross_entropy: target outside vocabulary");
    (*lse)[r] = log_sum_exp(lv, static_cast<std::size_t>(r) * v, v);
    total += (*lse)[r] - lv[static_cast<std::size_t>(r) * v + targets[r]];
  }
  std::vector<int> tg(targets.begin(), targets.end());
  return OpBuilder::make(
      Shape{}, {total / t}, {logits},
      [t, v, tg, lse](detail::Node* self) {
        detail::Node* pl = parent(self, 0);
        if (!wants_grad(pl)) return;
        pl->ensure_grad();
        const Scalar g0 = self->grad[0] / t;
        for (int r = 0; r < t; ++r) {
          const std::size_t base = static_cast<std::size_t>(r) * v;
          for (int j = 0; j < v; ++j) {
            const Scalar p = std::exp(pl->values[base + j] - (*lse)[r]);
            pl->grad[base + j] += g0 * (p - (j == tg[r] ? 1.0 : 0.0));
          }
        }
      },
      "sequence_cross_entropy");
}

}  // namespace gbtl
