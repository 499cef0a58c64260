#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gbtl/common.hpp"

namespace gbtl {

using Shape = std::vector<int>;

std::size_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

namespace detail {

// One recorded value in the computation graph. Non-leaf nodes carry a
// backward closure that routes the node's gradient to its parents.
struct Node {
  Shape shape;
  std::vector<Scalar> values;
  std::vector<Scalar> grad;  // empty until touched by backward / accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward_fn;
  Tape* tape = nullptr;       // set while recorded on a live tape
  std::size_t tape_index = 0;

  bool is_leaf() const { return parents.empty() && !backward_fn; }
  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
  }
};

}  // namespace detail

// Dense real array participating in reverse-mode differentiation. Copies are
// shallow handles onto the same node, like the usual dynamic-graph idiom.
class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Shape shape, std::vector<Scalar> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const&;
  const Shape& shape() const&& = delete;  // would dangle past the temporary
  int ndim() const { return static_cast<int>(shape().size()); }
  int dim(int i) const;
  std::size_t size() const;
  bool requires_grad() const;

  std::span<const Scalar> values() const&;
  std::span<const Scalar> values() const&& = delete;
  // In-place mutation is reserved for leaves (parameter updates); recorded
  // intermediates are immutable.
  std::span<Scalar> mutable_values() &;

  bool has_grad() const;
  std::span<const Scalar> grad() const&;
  std::span<const Scalar> grad() const&& = delete;
  void zero_grad();
  void accumulate_grad(std::span<const Scalar> g);

  Scalar item() const;
  Tensor clone() const;  // deep copy, detached leaf

  std::shared_ptr<detail::Node> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;

  friend class Tape;
  friend class OpBuilder;
};

// Records operations in execution order, which is already a topological
// order: a node is appended only after all of its parents exist. Construction
// makes the tape current for ops on this thread; destruction restores the
// previous one. Independent tapes on different threads do not interact.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from `loss` (must be a scalar recorded on this tape).
  // Each recorded node is visited exactly once, so a tape supports a single
  // backward call; leaf gradients accumulate additively across tapes.
  void backward(const Tensor& loss);

  void record(const std::shared_ptr<detail::Node>& node);

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
  bool backward_run_ = false;
};

// Convenience wrapper: runs backward on the tape `loss` was recorded on.
void backward(const Tensor& loss);

// ---- Operations ------------------------------------------------------------
// All ops validate shapes, reject non-finite results, and support gradient
// flow to every differentiable input when a tape is active. Without an active
// tape they compute values only.

// Elementwise sum. `b` may have a shape equal to a trailing suffix of `a`'s
// (broadcast over the leading dimensions); any other mismatch is an error.
Tensor add(const Tensor& a, const Tensor& b);
// Elementwise product; shapes must match exactly.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Scalar c);
Tensor relu(const Tensor& a);

// a: [m,k] or [k] (treated as a row vector), b: [k,n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);  // 2-D
Tensor reshape(const Tensor& a, Shape new_shape);
Tensor slice_cols(const Tensor& a, int col_begin, int col_end);  // 2-D
Tensor slice_rows(const Tensor& a, int row_begin, int row_end);  // 2-D
Tensor concat_cols(std::span<const Tensor> parts);               // 2-D
Tensor take_row(const Tensor& a, int row);                       // 2-D -> 1-D

// Numerically stabilized by max subtraction; slices along `axis` sum to 1.
Tensor softmax(const Tensor& a, int axis);
// Normalization over the last dimension; gain/bias are 1-D of that size.
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 Scalar eps = 1e-5);
// table: [V,D], ids in [0,V); result [ids.size(), D]. Gradients scatter-add
// into the table rows.
Tensor embedding_gather(const Tensor& table, std::span<const int> ids);

Tensor sum(const Tensor& a);   // -> scalar
Tensor mean(const Tensor& a);  // -> scalar

// -log softmax(logits)[target]; logits 1-D. Gradient is softmax - onehot.
Tensor cross_entropy(const Tensor& logits, int target);
// Mean of per-row cross entropies; logits [T,V], targets.size() == T.
Tensor sequence_cross_entropy(const Tensor& logits, std::span<const int> targets);

}  // namespace gbtl
