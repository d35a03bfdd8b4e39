#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace sani {

/// 64-byte aligned storage. Eigen's vectorized reductions peel to the
/// first aligned element, so unaligned buffers would make rounding depend on
/// where malloc happened to place them.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

/// Dense row-major array of doubles.
struct Tensor {
  std::vector<std::size_t> shape;
  Buffer data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape_, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape_, std::vector<double> data_);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  /// 2-D view: rank-1 tensors are a single row.
  std::size_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
  void fill(double v);

  bool operator==(const Tensor&) const = default;
};

std::string shape_string(const std::vector<std::size_t>& shape);

/// Gradients aligned with a model's parameter enumeration.
class GradientSet {
 public:
  GradientSet() = default;
  explicit GradientSet(std::span<const Tensor> like);

  std::size_t size() const { return grads_.size(); }
  Tensor& operator[](std::size_t i) { return grads_[i]; }
  const Tensor& operator[](std::size_t i) const { return grads_[i]; }

  void zero();
  /// this += other (shapes must match).
  void add(const GradientSet& other);
  void scale(double s);

 private:
  std::vector<Tensor> grads_;
};

/// Handle to a value recorded on a Tape.
struct Var {
  std::uint32_t id = 0;
};

/// Records primitive ops in execution order; backward replays them once in
/// reverse. Parameters are borrowed, not copied, so a tape must not outlive
/// the tensors bound with param().
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, Var out)>;

  /// record=false skips saving backward closures (inference).
  explicit Tape(bool record = true) : record_(record) { nodes_.reserve(256); }

  Var constant(Tensor value);
  Var param(const Tensor& value, std::size_t index);

  const Tensor& value(Var v) const;
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool recording() const { return record_; }

  /// Appends an op result. fn runs during backward when the result received
  /// a gradient; it reads grad(out) and accumulates into its inputs.
  Var push(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);

  /// Gradient buffer for v, allocated as zeros on first use. For parameters
  /// this is the slot in the GradientSet passed to backward().
  Tensor& grad(Var v);
  bool has_grad(Var v) const;

  /// Accumulates scale * d(loss)/d(param) into grads.
  void backward(Var loss, GradientSet& grads, double scale = 1.0);

 private:
  struct Node {
    Tensor value;
    const Tensor* borrowed = nullptr;
    Tensor grad;
    BackwardFn backward;
    std::int64_t param = -1;
    bool needs_grad = false;
  };

  std::vector<Node> nodes_;
  GradientSet* sink_ = nullptr;
  bool record_;
};

/// Gradients of a scalar loss for every parameter in params (zeros for
/// parameters the loss does not reach).
GradientSet backward(Tape& tape, Var loss, std::span<const Tensor> params);

// Forward primitives. All inputs are Vars on the same tape. Shapes are
// checked (ShapeMismatch) and outputs must stay finite (NonFiniteValue).

Var matmul(Tape& t, Var a, Var b);     // [n,k] x [k,m]
Var matmul_nt(Tape& t, Var a, Var b);  // [n,k] x [m,k]^T
Var add(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double c);
Var add_bias(Tape& t, Var x, Var bias);                 // row-wise
Var linear(Tape& t, Var x, Var weight, Var bias);       // x W^T + b, W is [out,in]
Var gelu(Tape& t, Var x);
Var softmax_rows(Tape& t, Var x, bool causal = false);  // causal: column j > row i gets 0
Var layer_norm(Tape& t, Var x, Var gain, Var bias);
Var embed(Tape& t, std::span<const std::int32_t> ids, Var table);
Var gather_rows(Tape& t, Var x, std::span<const std::size_t> rows);
/// Multi-head scaled dot-product attention over [n,d] q/k/v.
Var attention(Tape& t, Var q, Var k, Var v, std::size_t n_heads, bool causal);
/// Mean NLL over rows whose target != ignore_id; 0 when every row is ignored.
Var cross_entropy(Tape& t, Var logits, std::span<const std::int32_t> targets, std::int32_t ignore_id);
Var sum(Tape& t, Var x);

inline constexpr double kLayerNormEps = 1e-10;

}  // namespace sani
