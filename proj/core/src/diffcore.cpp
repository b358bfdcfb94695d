#include "mapkd/diffcore.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace mapkd::diff {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + shape_str(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
}

std::size_t Tensor::dim(int axis) const {
  const int r = static_cast<int>(shape_.size());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  return shape_[a];
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

void Tensor::reshape(Shape shape) {
  if (shape_size(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  shape_ = std::move(shape);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  // Exponent bits all set means inf or nan; an integer OR reduction vectorises.
  constexpr std::uint64_t kExp = 0x7ff0000000000000ULL;
  std::uint64_t bad = 0;
  for (double v : data_) bad |= static_cast<std::uint64_t>((std::bit_cast<std::uint64_t>(v) & kExp) == kExp);
  return bad == 0;
}

NonFiniteError::NonFiniteError(int op_id, std::string op_name, bool in_backward)
    : DiffError("non-finite " + std::string(in_backward ? "gradient" : "value") + " at op " +
                std::to_string(op_id) + " (" + op_name + ")"),
      op_id_(op_id),
      op_name_(std::move(op_name)),
      in_backward_(in_backward) {}

Parameter& ParameterStore::add(const std::string& name, Tensor value) {
  auto [it, inserted] = params_.try_emplace(name);
  if (!inserted) throw DiffError("duplicate parameter " + name);
  it->second.name = name;
  it->second.grad = Tensor(value.shape());
  it->second.value = std::move(value);
  it->second.value.set_trainable(true);
  return it->second;
}

Parameter& ParameterStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw DiffError("unknown parameter " + name);
  return it->second;
}

const Parameter& ParameterStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw DiffError("unknown parameter " + name);
  return it->second;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [_, p] : params_) {
    if (p.grad.shape() != p.value.shape()) p.grad = Tensor(p.value.shape());
    p.grad.fill(0.0);
  }
}

const Tensor& Var::value() const { return tape_->value(id_); }
const Shape& Var::shape() const { return tape_->value(id_).shape(); }

// ---- tape --------------------------------------------------------------

Var Tape::record(std::string op, Tensor value, std::vector<int> inputs, BackwardFn fn) {
  const int id = static_cast<int>(nodes_.size());
  if (!value.all_finite()) throw NonFiniteError(id, op, false);
  Node node;
  node.op = std::move(op);
  node.value = std::move(value);
  node.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                   [&](int i) { return nodes_[i].requires_grad; });
  if (node.requires_grad) node.backward = std::move(fn);
  node.inputs = std::move(inputs);
  nodes_.push_back(std::move(node));
  return Var(this, id);
}

Var Tape::constant(Tensor value) { return record("constant", std::move(value), {}, nullptr); }

Var Tape::input(Tensor value) {
  Var v = record("input", std::move(value), {}, nullptr);
  nodes_[v.id()].requires_grad = true;
  return v;
}

Var Tape::param(Parameter& p) {
  Var v = record("param:" + p.name, p.value, {}, nullptr);
  nodes_[v.id()].requires_grad = true;
  nodes_[v.id()].param = &p;
  return v;
}

Tensor& Tape::grad_buffer(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::note_kink(double distance) { min_kink_ = std::min(min_kink_, distance); }

void Tape::backward(Var output) {
  if (&output.tape() != this) throw DiffError("backward on a foreign tape");
  if (backward_done_) throw DiffError("tape already differentiated");
  if (output.value().size() != 1) {
    throw ShapeError("backward requires a scalar output, got " + shape_str(output.shape()));
  }
  backward_done_ = true;
  grad_buffer(output.id()).fill(1.0);
  for (int id = output.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (!n.grad.all_finite()) throw NonFiniteError(id, n.op, true);
    if (n.backward) n.backward(*this, id);
    if (n.param != nullptr) {
      Tensor& g = n.param->grad;
      if (g.shape() != n.value.shape()) g = Tensor(n.value.shape());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.size() == 0) return Tensor(n.value.shape());
  return n.grad;
}

// ---- helpers -----------------------------------------------------------

namespace {

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

int norm_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError(std::string(op) + ": axis out of range");
  return a;
}

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit sp;
  for (int i = 0; i < axis; ++i) sp.outer *= s[i];
  sp.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

// b broadcasts against a when it is a single value or a trailing sub-shape.
void check_broadcast(const Shape& a, const Shape& b, const char* op) {
  if (a == b || shape_size(b) == 1) return;
  if (b.size() <= a.size() && std::equal(b.rbegin(), b.rend(), a.rbegin())) return;
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
}

template <class F, class GA, class GB>
Var binary(const char* name, Var a, Var b, F f, GA ga, GB gb) {
  if (&a.tape() != &b.tape()) throw DiffError(std::string(name) + ": operands on different tapes");
  check_broadcast(a.shape(), b.shape(), name);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  const std::size_t nb = bv.size();
  for (std::size_t base = 0; base < out.size(); base += nb)
    for (std::size_t j = 0; j < nb; ++j) out[base + j] = f(av[base + j], bv[j]);
  const int ia = a.id(), ib = b.id();
  return a.tape().record(name, std::move(out), {ia, ib}, [ia, ib, ga, gb](Tape& t, int self) {
    const Tensor& g = t.out_grad(self);
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(ib);
    const Tensor& z = t.value(self);
    const std::size_t nb = y.size();
    if (t.requires_grad(ia)) {
      Tensor& gx = t.grad_buffer(ia);
      for (std::size_t base = 0; base < g.size(); base += nb)
        for (std::size_t j = 0; j < nb; ++j) gx[base + j] += g[base + j] * ga(x[base + j], y[j], z[base + j]);
    }
    if (t.requires_grad(ib)) {
      Tensor& gy = t.grad_buffer(ib);
      for (std::size_t base = 0; base < g.size(); base += nb)
        for (std::size_t j = 0; j < nb; ++j) gy[j] += g[base + j] * gb(x[base + j], y[j], z[base + j]);
    }
  });
}

// Elementwise unary op with derivative df(x, y) where y = f(x).
template <class F, class D>
Var unary(std::string name, Var a, F f, D df) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  const int ia = a.id();
  return a.tape().record(std::move(name), std::move(out), {ia}, [ia, df](Tape& t, int self) {
    const Tensor& g = t.out_grad(self);
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(x[i], y[i]);
  });
}

}  // namespace

// ---- elementwise -------------------------------------------------------

Var add(Var a, Var b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Var div(Var a, Var b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double z) { return -z / y; });
}

Var add_scalar(Var a, double c) {
  return unary("add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var scale(Var a, double c) {
  return unary("scale", a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var exp(Var a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var abs(Var a) {
  for (double v : a.value().data()) a.tape().note_kink(std::fabs(v));
  return unary(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var square(Var a) {
  return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var relu(Var a) {
  for (double v : a.value().data()) a.tape().note_kink(std::fabs(v));
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var tanh(Var a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var clamp(Var a, double lo, double hi) {
  for (double v : a.value().data()) a.tape().note_kink(std::min(std::fabs(v - lo), std::fabs(v - hi)));
  return unary(
      "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---- matmul ------------------------------------------------------------

Var matmul(Var a, Var w) {
  const Tensor& av = a.value();
  const Tensor& wv = w.value();
  if (wv.rank() != 2 || av.rank() < 1 || av.dim(-1) != wv.dim(0)) {
    throw ShapeError("matmul: " + shape_str(av.shape()) + " x " + shape_str(wv.shape()));
  }
  const std::size_t k = wv.dim(0), n = wv.dim(1), m = av.size() / k;
  Shape os = av.shape();
  os.back() = n;
  Tensor out(os);
  const double* A = av.data().data();
  const double* W = wv.data().data();
  double* O = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = O + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      const double* wrow = W + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * wrow[j];
    }
  }
  const int ia = a.id(), iw = w.id();
  return a.tape().record("matmul", std::move(out), {ia, iw}, [ia, iw, m, k, n](Tape& t, int self) {
    const double* G = t.out_grad(self).data().data();
    const double* A = t.value(ia).data().data();
    const double* W = t.value(iw).data().data();
    if (t.requires_grad(ia)) {
      double* GA = t.grad_buffer(ia).data().data();
      std::vector<double> WT(k * n);
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) WT[j * k + p] = W[p * n + j];
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = G + i * n;
        double* garow = GA + i * k;
        for (std::size_t j = 0; j < n; ++j) {
          const double g = grow[j];
          if (g == 0.0) continue;
          const double* wtrow = WT.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) garow[p] += g * wtrow[p];
        }
      }
    }
    if (t.requires_grad(iw)) {
      double* GW = t.grad_buffer(iw).data().data();
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = G + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          if (aip == 0.0) continue;
          double* gwrow = GW + p * n;
          for (std::size_t j = 0; j < n; ++j) gwrow[j] += aip * grow[j];
        }
      }
    }
  });
}

// ---- softmax -----------------------------------------------------------

Var softmax(Var a, const Tensor* mask) {
  const Tensor& av = a.value();
  if (av.rank() < 1) throw ShapeError("softmax: scalar input");
  if (mask != nullptr && mask->shape() != av.shape()) {
    throw ShapeError("softmax: mask " + shape_str(mask->shape()) + " vs " + shape_str(av.shape()));
  }
  const std::size_t n = av.dim(-1), rows = av.size() / n;
  Tensor out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data().data() + r * n;
    double* y = out.data().data() + r * n;
    const double* m = mask ? mask->data().data() + r * n : nullptr;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (!m || m[j] > 0.0) mx = std::max(mx, x[j]);
    if (!std::isfinite(mx)) continue;  // fully masked row
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = (!m || m[j] > 0.0) ? std::exp(x[j] - mx) : 0.0;
      z += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  const int ia = a.id();
  return a.tape().record("softmax", std::move(out), {ia}, [ia, n, rows](Tape& t, int self) {
    const Tensor& g = t.out_grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
    }
  });
}

Var log_softmax(Var a) {
  const Tensor& av = a.value();
  if (av.rank() < 1) throw ShapeError("log_softmax: scalar input");
  const std::size_t n = av.dim(-1), rows = av.size() / n;
  Tensor out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data().data() + r * n;
    double* y = out.data().data() + r * n;
    const double mx = *std::max_element(x, x + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(x[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) y[j] = x[j] - lz;
  }
  const int ia = a.id();
  return a.tape().record("log_softmax", std::move(out), {ia}, [ia, n, rows](Tape& t, int self) {
    const Tensor& g = t.out_grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad_buffer(ia);
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t j = 0; j < n; ++j) gs += g[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += g[r * n + j] - std::exp(y[r * n + j]) * gs;
    }
  });
}

// ---- structural --------------------------------------------------------

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const int ax = norm_axis(axis, s0.size(), "concat");
  Shape os = s0;
  os[ax] = 0;
  std::vector<int> ids;
  std::vector<std::size_t> widths;  // n * inner per part
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (static_cast<int>(i) != ax && s[i] != s0[i]) {
        throw ShapeError("concat: " + shape_str(s) + " vs " + shape_str(s0));
      }
    }
    os[ax] += s[ax];
    ids.push_back(p.id());
    widths.push_back(split_at(s, ax).n * split_at(s, ax).inner);
  }
  const std::size_t outer = split_at(os, ax).outer;
  const std::size_t total = std::accumulate(widths.begin(), widths.end(), std::size_t{0});
  Tensor out(os);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.data().data() + o * widths[k], widths[k], out.data().data() + o * total + off);
    off += widths[k];
  }
  return parts[0].tape().record("concat", std::move(out), ids, [ids, widths, outer, total](Tape& t, int self) {
    const Tensor& g = t.out_grad(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) {
        Tensor& gx = t.grad_buffer(ids[k]);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < widths[k]; ++j) gx[o * widths[k] + j] += g[o * total + off + j];
      }
      off += widths[k];
    }
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value();
  out.reshape(std::move(shape));
  const int ia = a.id();
  return a.tape().record("reshape", std::move(out), {ia}, [ia](Tape& t, int self) {
    const Tensor& g = t.out_grad(self);
    Tensor& gx = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var slice(Var a, int axis, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  const int ax = norm_axis(axis, s.size(), "slice");
  if (begin >= end || end > s[ax]) throw ShapeError("slice: bad range for " + shape_str(s));
  const AxisSplit sp = split_at(s, ax);
  Shape os = s;
  os[ax] = end - begin;
  const std::size_t w = (end - begin) * sp.inner;
  Tensor out(os);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(a.value().data().data() + (o * sp.n + begin) * sp.inner, w, out.data().data() + o * w);
  const int ia = a.id();
  return a.tape().record("slice", std::move(out), {ia}, [ia, sp, begin, w](Tape& t, int self) {
    const Tensor& g = t.out_grad(self);
    Tensor& gx = t.grad_buffer(ia);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < w; ++j) gx[(o * sp.n + begin) * sp.inner + j] += g[o * w + j];
  });
}

Var expand(Var a, int axis, std::size_t n) {
  Shape os = a.shape();
  const int r = static_cast<int>(os.size()) + 1;
  const int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) throw ShapeError("expand: axis out of range");
  os.insert(os.begin() + ax, n);
  const AxisSplit sp = split_at(os, ax);
  Tensor out(os);
  const double* x = a.value().data().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < n; ++j)
      std::copy_n(x + o * sp.inner, sp.inner, out.data().data() + (o * n + j) * sp.inner);
  const int ia = a.id();
  return a.tape().record("expand", std::move(out), {ia}, [ia, sp](Tape& t, int self) {
    const Tensor& g = t.out_grad(self);
    Tensor& gx = t.grad_buffer(ia);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < sp.n; ++j)
        for (std::size_t i = 0; i < sp.inner; ++i) gx[o * sp.inner + i] += g[(o * sp.n + j) * sp.inner + i];
  });
}

// ---- reductions --------------------------------------------------------

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const int ia = a.id();
  return a.tape().record("sum", Tensor::scalar(s), {ia}, [ia](Tape& t, int self) {
    const double g = t.out_grad(self)[0];
    Tensor& gx = t.grad_buffer(ia);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

Var mean(Var a) {
  const std::size_t n = a.size();
  if (n == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var sum_axis(Var a, int axis) {
  const Shape& s = a.shape();
  const int ax = norm_axis(axis, s.size(), "sum_axis");
  const AxisSplit sp = split_at(s, ax);
  Shape os = s;
  os.erase(os.begin() + ax);
  Tensor out(os);
  const double* x = a.value().data().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.n; ++j)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += x[(o * sp.n + j) * sp.inner + i];
  const int ia = a.id();
  return a.tape().record("sum_axis", std::move(out), {ia}, [ia, sp](Tape& t, int self) {
    const Tensor& g = t.out_grad(self);
    Tensor& gx = t.grad_buffer(ia);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < sp.n; ++j)
        for (std::size_t i = 0; i < sp.inner; ++i) gx[(o * sp.n + j) * sp.inner + i] += g[o * sp.inner + i];
  });
}

Var mean_axis(Var a, int axis) {
  const std::size_t n = a.value().dim(axis);
  return scale(sum_axis(a, axis), 1.0 / static_cast<double>(n));
}

Var max_axis(Var a, int axis) {
  const Shape& s = a.shape();
  const int ax = norm_axis(axis, s.size(), "max_axis");
  const AxisSplit sp = split_at(s, ax);
  Shape os = s;
  os.erase(os.begin() + ax);
  Tensor out(os);
  std::vector<std::size_t> arg(out.size());
  const double* x = a.value().data().data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = 0;
      double bv = x[o * sp.n * sp.inner + i];
      double second = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 1; j < sp.n; ++j) {
        const double v = x[(o * sp.n + j) * sp.inner + i];
        if (v > bv) {
          second = bv;
          bv = v;
          best = j;
        } else {
          second = std::max(second, v);
        }
      }
      if (sp.n > 1) a.tape().note_kink(bv - second);
      out[o * sp.inner + i] = bv;
      arg[o * sp.inner + i] = best;
    }
  }
  const int ia = a.id();
  return a.tape().record("max_axis", std::move(out), {ia}, [ia, sp, arg](Tape& t, int self) {
    const Tensor& g = t.out_grad(self);
    Tensor& gx = t.grad_buffer(ia);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i)
        gx[(o * sp.n + arg[o * sp.inner + i]) * sp.inner + i] += g[o * sp.inner + i];
  });
}

// ---- attention ---------------------------------------------------------

Var batched_dot(Var keys, Var query) {
  const Shape& ks = keys.shape();
  const Shape& qs = query.shape();
  if (ks.size() < 2 || qs.size() != ks.size() - 1 || ks.back() != qs.back() ||
      !std::equal(qs.begin(), qs.end() - 1, ks.begin())) {
    throw ShapeError("batched_dot: keys " + shape_str(ks) + " query " + shape_str(qs));
  }
  const std::size_t h = ks.back(), na = ks[ks.size() - 2], outer = query.size() / h;
  Shape os(ks.begin(), ks.end() - 1);
  Tensor out(os);
  const double* K = keys.value().data().data();
  const double* Q = query.value().data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < na; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < h; ++i) s += K[(o * na + j) * h + i] * Q[o * h + i];
      out[o * na + j] = s;
    }
  const int ik = keys.id(), iq = query.id();
  return keys.tape().record("batched_dot", std::move(out), {ik, iq}, [ik, iq, h, na, outer](Tape& t, int self) {
    const Tensor& g = t.out_grad(self);
    const double* K = t.value(ik).data().data();
    const double* Q = t.value(iq).data().data();
    if (t.requires_grad(ik)) {
      Tensor& gk = t.grad_buffer(ik);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < na; ++j)
          for (std::size_t i = 0; i < h; ++i) gk[(o * na + j) * h + i] += g[o * na + j] * Q[o * h + i];
    }
    if (t.requires_grad(iq)) {
      Tensor& gq = t.grad_buffer(iq);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < na; ++j)
          for (std::size_t i = 0; i < h; ++i) gq[o * h + i] += g[o * na + j] * K[(o * na + j) * h + i];
    }
  });
}

Var weighted_sum(Var weights, Var values) {
  const Shape& ws = weights.shape();
  const Shape& vs = values.shape();
  if (vs.size() < 2 || ws.size() != vs.size() - 1 || !std::equal(ws.begin(), ws.end(), vs.begin())) {
    throw ShapeError("weighted_sum: weights " + shape_str(ws) + " values " + shape_str(vs));
  }
  const std::size_t h = vs.back(), na = vs[vs.size() - 2], outer = weights.size() / na;
  Shape os(vs.begin(), vs.end() - 2);
  os.push_back(h);
  Tensor out(os);
  const double* W = weights.value().data().data();
  const double* V = values.value().data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < na; ++j) {
      const double w = W[o * na + j];
      if (w == 0.0) continue;
      for (std::size_t i = 0; i < h; ++i) out[o * h + i] += w * V[(o * na + j) * h + i];
    }
  const int iw = weights.id(), iv = values.id();
  return weights.tape().record("weighted_sum", std::move(out), {iw, iv}, [iw, iv, h, na, outer](Tape& t, int self) {
    const Tensor& g = t.out_grad(self);
    const double* W = t.value(iw).data().data();
    const double* V = t.value(iv).data().data();
    if (t.requires_grad(iw)) {
      Tensor& gw = t.grad_buffer(iw);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < na; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < h; ++i) s += g[o * h + i] * V[(o * na + j) * h + i];
          gw[o * na + j] += s;
        }
    }
    if (t.requires_grad(iv)) {
      Tensor& gv = t.grad_buffer(iv);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < na; ++j) {
          const double w = W[o * na + j];
          for (std::size_t i = 0; i < h; ++i) gv[(o * na + j) * h + i] += w * g[o * h + i];
        }
    }
  });
}

Var attention_pool(Var scores, const Tensor& mask, Var values) {
  return weighted_sum(softmax(scores, &mask), values);
}

// ---- gradcheck ---------------------------------------------------------

GradcheckResult gradcheck(const ScalarFn& fn, std::vector<Tensor> inputs, const GradcheckOptions& options) {
  if (!(options.step > 0.0)) throw DiffError("gradcheck: step must be positive");
  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> jitter(-1.0, 1.0);

  auto evaluate = [&](const std::vector<Tensor>& xs, double* kink) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(xs.size());
    for (const Tensor& x : xs) vars.push_back(tape.constant(x));
    Var out = fn(tape, vars);
    if (out.size() != 1) throw ShapeError("gradcheck: function must return a scalar");
    if (kink) *kink = tape.min_kink_distance();
    return out.item();
  };

  GradcheckResult result;
  std::vector<Tensor> grads;
  for (;;) {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& x : inputs) vars.push_back(tape.input(x));
    Var out = fn(tape, vars);
    if (tape.min_kink_distance() < options.kink_margin * options.step) {
      if (result.resamples >= options.max_resamples) {
        throw DiffError("gradcheck: could not move inputs away from a kink");
      }
      ++result.resamples;
      for (Tensor& x : inputs)
        for (double& v : x.data()) v += options.resample_scale * jitter(rng);
      continue;
    }
    tape.backward(out);
    grads.clear();
    for (const Var& v : vars) grads.push_back(tape.grad(v));
    break;
  }

  const double h = options.step;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double x0 = inputs[k][i];
      inputs[k][i] = x0 + h;
      const double fp = evaluate(inputs, nullptr);
      inputs[k][i] = x0 - h;
      const double fm = evaluate(inputs, nullptr);
      inputs[k][i] = x0;
      const double central = (fp - fm) / (2.0 * h);
      if (!std::isfinite(central)) throw DiffError("gradcheck: non-finite evaluation");
      const double err = std::fabs(grads[k][i] - central) / std::max(1.0, std::fabs(central));
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_input = k;
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace mapkd::diff
