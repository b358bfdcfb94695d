#pragma once

// Reverse-mode differentiation over dense row-major double arrays.
//
// A Tape records every primitive applied during a forward evaluation. Calling
// Tape::backward on a scalar node walks the record once in reverse order and
// accumulates gradients into every node that requires them, and into the
// grad buffer of any Parameter reached through Tape::param.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mapkd::diff {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  // Negative axes count from the back.
  std::size_t dim(int axis) const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double item() const;

  bool trainable() const { return trainable_; }
  void set_trainable(bool t) { trainable_ = t; }

  void reshape(Shape shape);
  void fill(double v);
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  bool trainable_ = false;
};

class DiffError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public DiffError {
 public:
  using DiffError::DiffError;
};

class NonFiniteError : public DiffError {
 public:
  NonFiniteError(int op_id, std::string op_name, bool in_backward);
  int op_id() const { return op_id_; }
  const std::string& op_name() const { return op_name_; }
  bool in_backward() const { return in_backward_; }

 private:
  int op_id_;
  std::string op_name_;
  bool in_backward_;
};

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

// Named parameters with stable addresses, iterated in name order.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Tensor value);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Parameter> params_;
};

class Tape;

// Handle to a node on a tape. Cheap to copy.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const;
  std::size_t size() const { return value().size(); }
  double item() const { return value().item(); }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// The computation record. Single-use and single-threaded; distinct tapes may
// live on distinct threads.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var input(Tensor value);
  Var param(Parameter& p);

  // Backpropagates from a scalar node. May be called once per tape.
  void backward(Var output);

  // Gradient of the last backward output wrt v; zeros when unreachable.
  Tensor grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }
  const std::string& op_name(int id) const { return nodes_[id].op; }

  // Smallest distance of any abs/relu/clamp/max argument to its kink.
  double min_kink_distance() const { return min_kink_; }
  void note_kink(double distance);

  // Internal API used by the primitive implementations.
  using BackwardFn = std::function<void(Tape&, int self)>;
  Var record(std::string op, Tensor value, std::vector<int> inputs, BackwardFn fn);
  const Tensor& value(int id) const { return nodes_[id].value; }
  const Tensor& out_grad(int id) const { return nodes_[id].grad; }
  Tensor& grad_buffer(int id);
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    std::vector<int> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  bool backward_done_ = false;
  double min_kink_ = std::numeric_limits<double>::infinity();
};

// ---- primitives --------------------------------------------------------

// Elementwise binary ops. b may have the same shape as a, be a single value,
// or match a trailing sub-shape of a (repeated over the leading axes).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);

Var add_scalar(Var a, double c);
Var scale(Var a, double c);
Var neg(Var a);

Var exp(Var a);
Var log(Var a);
Var abs(Var a);  // subgradient 0 at 0
Var square(Var a);
Var relu(Var a);
Var tanh(Var a);
Var clamp(Var a, double lo, double hi);  // zero gradient outside [lo, hi]

// a: [..., k], w: [k, n] -> [..., n]
Var matmul(Var a, Var w);

// Softmax over the last axis. With a mask (same shape, 1 = keep), masked
// entries get probability 0; a fully masked row yields all zeros.
Var softmax(Var a, const Tensor* mask = nullptr);
Var log_softmax(Var a);

Var concat(std::span<const Var> parts, int axis);
Var reshape(Var a, Shape shape);
Var slice(Var a, int axis, std::size_t begin, std::size_t end);
// Inserts a new axis of length n at position axis by repetition.
Var expand(Var a, int axis, std::size_t n);

Var sum(Var a);
Var mean(Var a);
Var sum_axis(Var a, int axis);
Var mean_axis(Var a, int axis);
Var max_axis(Var a, int axis);

// keys: [..., A, H], query: [..., H] -> [..., A]
Var batched_dot(Var keys, Var query);
// weights: [..., A], values: [..., A, H] -> [..., H]
Var weighted_sum(Var weights, Var values);
// Masked attention pooling: softmax(scores, mask) then weighted_sum.
Var attention_pool(Var scores, const Tensor& mask, Var values);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator+(Var a, double c) { return add_scalar(a, c); }
inline Var operator-(Var a) { return neg(a); }

// ---- finite-difference checking ----------------------------------------

using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

struct GradcheckOptions {
  double step = 1e-5;
  // Inputs are jittered and re-evaluated when any kink lies within
  // kink_margin * step of its argument.
  double kink_margin = 10.0;
  int max_resamples = 32;
  double resample_scale = 1e-2;
  std::uint64_t seed = 0x5eed;
};

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  int resamples = 0;
};

// max over coordinates of |analytic - central| / max(1, |central|)
GradcheckResult gradcheck(const ScalarFn& fn, std::vector<Tensor> inputs,
                          const GradcheckOptions& options = {});

}  // namespace mapkd::diff
