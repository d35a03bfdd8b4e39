#include "sani/tensor.hpp"

#include <cmath>
#include <memory>
#include <numbers>
#include <sstream>

#include <Eigen/Dense>

#include "sani/errors.hpp"

namespace sani {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<MatRM>;
using CMap = Eigen::Map<const MatRM>;

Map as_mat(Tensor& t) {
  return {t.data.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}
CMap as_mat(const Tensor& t) {
  return {t.data.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw Error(ErrorCode::ShapeMismatch,
              std::string(op) + ": " + shape_string(a.shape) + " vs " + shape_string(b.shape));
}

void require_2d(const char* op, const Tensor& a) {
  if (a.rank() != 2) throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": expected rank 2, got " + shape_string(a.shape));
}

Tensor checked(Tensor t, const char* op) {
  if (!t.all_finite()) throw Error(ErrorCode::NonFiniteValue, std::string(op) + " produced a non-finite value");
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor / GradientSet

Tensor::Tensor(std::vector<std::size_t> shape_, double fill) : shape(std::move(shape_)) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  data.assign(n, fill);
}

Tensor::Tensor(std::vector<std::size_t> shape_, std::vector<double> data_)
    : shape(std::move(shape_)), data(data_.begin(), data_.end()) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  if (n != data.size()) {
    throw Error(ErrorCode::ShapeMismatch,
                "data length " + std::to_string(data.size()) + " does not match shape " + shape_string(shape));
  }
}

bool Tensor::all_finite() const {
  for (double x : data) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

GradientSet::GradientSet(std::span<const Tensor> like) {
  grads_.reserve(like.size());
  for (const auto& t : like) grads_.emplace_back(t.shape);
}

void GradientSet::zero() {
  for (auto& g : grads_) g.fill(0.0);
}

void GradientSet::add(const GradientSet& other) {
  if (other.size() != size()) throw Error(ErrorCode::ShapeMismatch, "gradient set sizes differ");
  for (std::size_t i = 0; i < grads_.size(); ++i) {
    auto& a = grads_[i].data;
    const auto& b = other.grads_[i].data;
    if (a.size() != b.size()) throw Error(ErrorCode::ShapeMismatch, "gradient shapes differ");
    for (std::size_t j = 0; j < a.size(); ++j) a[j] += b[j];
  }
}

void GradientSet::scale(double s) {
  for (auto& g : grads_) {
    for (auto& x : g.data) x *= s;
  }
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::param(const Tensor& value, std::size_t index) {
  Node n;
  n.borrowed = &value;
  n.param = static_cast<std::int64_t>(index);
  n.needs_grad = record_;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tensor& Tape::value(Var v) const {
  const Node& n = nodes_[v.id];
  return n.borrowed ? *n.borrowed : n.value;
}

Var Tape::push(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (Var in : inputs) n.needs_grad = n.needs_grad || nodes_[in.id].needs_grad;
    if (n.needs_grad) n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tensor& Tape::grad(Var v) {
  Node& n = nodes_[v.id];
  if (n.param >= 0) {
    if (!sink_) throw Error(ErrorCode::ConfigError, "parameter gradient requested outside backward");
    return (*sink_)[static_cast<std::size_t>(n.param)];
  }
  if (n.grad.data.empty()) n.grad = Tensor(value(v).shape);
  return n.grad;
}

bool Tape::has_grad(Var v) const { return !nodes_[v.id].grad.data.empty(); }

void Tape::backward(Var loss, GradientSet& grads, double scale_factor) {
  if (value(loss).size() != 1) {
    throw Error(ErrorCode::NotScalarLoss, "loss has shape " + shape_string(value(loss).shape));
  }
  if (!nodes_[loss.id].needs_grad) return;
  sink_ = &grads;
  if (nodes_[loss.id].param >= 0) {
    grad(loss).data[0] += scale_factor;
  } else {
    grad(loss).data[0] = scale_factor;
  }
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.data.empty()) continue;
    n.backward(*this, Var{static_cast<std::uint32_t>(i)});
  }
  sink_ = nullptr;
}

GradientSet backward(Tape& tape, Var loss, std::span<const Tensor> params) {
  GradientSet grads(params);
  tape.backward(loss, grads);
  return grads;
}

// ---------------------------------------------------------------------------
// Ops

Var matmul(Tape& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  require_2d("matmul", A);
  require_2d("matmul", B);
  if (A.cols() != B.rows()) shape_error("matmul", A, B);
  Tensor C({A.rows(), B.cols()});
  as_mat(C).noalias() = as_mat(A) * as_mat(B);
  return t.push(checked(std::move(C), "matmul"), {a, b}, [a, b](Tape& tp, Var out) {
    const auto G = as_mat(tp.grad(out));
    if (tp.needs_grad(a)) as_mat(tp.grad(a)).noalias() += G * as_mat(tp.value(b)).transpose();
    if (tp.needs_grad(b)) as_mat(tp.grad(b)).noalias() += as_mat(tp.value(a)).transpose() * G;
  });
}

Var matmul_nt(Tape& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  require_2d("matmul_nt", A);
  require_2d("matmul_nt", B);
  if (A.cols() != B.cols()) shape_error("matmul_nt", A, B);
  Tensor C({A.rows(), B.rows()});
  as_mat(C).noalias() = as_mat(A) * as_mat(B).transpose();
  return t.push(checked(std::move(C), "matmul_nt"), {a, b}, [a, b](Tape& tp, Var out) {
    const auto G = as_mat(tp.grad(out));
    if (tp.needs_grad(a)) as_mat(tp.grad(a)).noalias() += G * as_mat(tp.value(b));
    if (tp.needs_grad(b)) as_mat(tp.grad(b)).noalias() += G.transpose() * as_mat(tp.value(a));
  });
}

Var add(Tape& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  if (!A.same_shape(B)) shape_error("add", A, B);
  Tensor C(A.shape);
  for (std::size_t i = 0; i < C.size(); ++i) C.data[i] = A.data[i] + B.data[i];
  return t.push(checked(std::move(C), "add"), {a, b}, [a, b](Tape& tp, Var out) {
    const auto& g = tp.grad(out).data;
    for (Var in : {a, b}) {
      if (!tp.needs_grad(in)) continue;
      auto& gi = tp.grad(in).data;
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

Var mul(Tape& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  if (!A.same_shape(B)) shape_error("mul", A, B);
  Tensor C(A.shape);
  for (std::size_t i = 0; i < C.size(); ++i) C.data[i] = A.data[i] * B.data[i];
  return t.push(checked(std::move(C), "mul"), {a, b}, [a, b](Tape& tp, Var out) {
    const auto& g = tp.grad(out).data;
    if (tp.needs_grad(a)) {
      auto& ga = tp.grad(a).data;
      const auto& vb = tp.value(b).data;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (tp.needs_grad(b)) {
      auto& gb = tp.grad(b).data;
      const auto& va = tp.value(a).data;
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
    }
  });
}

Var scale(Tape& t, Var a, double c) {
  const Tensor& A = t.value(a);
  Tensor C(A.shape);
  for (std::size_t i = 0; i < C.size(); ++i) C.data[i] = A.data[i] * c;
  return t.push(checked(std::move(C), "scale"), {a}, [a, c](Tape& tp, Var out) {
    const auto& g = tp.grad(out).data;
    auto& ga = tp.grad(a).data;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
  });
}

Var add_bias(Tape& t, Var x, Var bias) {
  const Tensor& X = t.value(x);
  const Tensor& B = t.value(bias);
  require_2d("add_bias", X);
  if (B.size() != X.cols()) shape_error("add_bias", X, B);
  Tensor Y = X;
  const std::size_t m = X.cols();
  for (std::size_t r = 0; r < X.rows(); ++r) {
    for (std::size_t c = 0; c < m; ++c) Y.data[r * m + c] += B.data[c];
  }
  return t.push(checked(std::move(Y), "add_bias"), {x, bias}, [x, bias](Tape& tp, Var out) {
    const Tensor& G = tp.grad(out);
    if (tp.needs_grad(x)) {
      auto& gx = tp.grad(x).data;
      for (std::size_t i = 0; i < G.size(); ++i) gx[i] += G.data[i];
    }
    if (tp.needs_grad(bias)) {
      auto& gb = tp.grad(bias).data;
      const std::size_t m = G.cols();
      for (std::size_t r = 0; r < G.rows(); ++r) {
        for (std::size_t c = 0; c < m; ++c) gb[c] += G.data[r * m + c];
      }
    }
  });
}

Var linear(Tape& t, Var x, Var weight, Var bias) {
  const Tensor& X = t.value(x);
  const Tensor& W = t.value(weight);
  const Tensor& B = t.value(bias);
  require_2d("linear", X);
  require_2d("linear", W);
  if (X.cols() != W.cols()) shape_error("linear", X, W);
  if (B.size() != W.rows()) shape_error("linear(bias)", W, B);
  Tensor Y({X.rows(), W.rows()});
  auto y = as_mat(Y);
  y.noalias() = as_mat(X) * as_mat(W).transpose();
  const Eigen::Map<const Eigen::RowVectorXd> b(B.data.data(), static_cast<Eigen::Index>(B.size()));
  y.rowwise() += b;
  return t.push(checked(std::move(Y), "linear"), {x, weight, bias}, [x, weight, bias](Tape& tp, Var out) {
    const auto G = as_mat(tp.grad(out));
    if (tp.needs_grad(x)) as_mat(tp.grad(x)).noalias() += G * as_mat(tp.value(weight));
    if (tp.needs_grad(weight)) as_mat(tp.grad(weight)).noalias() += G.transpose() * as_mat(tp.value(x));
    if (tp.needs_grad(bias)) {
      Tensor& gb = tp.grad(bias);
      Eigen::Map<Eigen::RowVectorXd>(gb.data.data(), static_cast<Eigen::Index>(gb.size())) += G.colwise().sum();
    }
  });
}

Var gelu(Tape& t, Var x) {
  const Tensor& X = t.value(x);
  Tensor Y(X.shape);
  constexpr double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  for (std::size_t i = 0; i < X.size(); ++i) {
    const double v = X.data[i];
    Y.data[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  }
  return t.push(checked(std::move(Y), "gelu"), {x}, [x](Tape& tp, Var out) {
    const auto& g = tp.grad(out).data;
    const auto& xv = tp.value(x).data;
    auto& gx = tp.grad(x).data;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

namespace {

void softmax_row(const double* in, double* out, std::size_t n) {
  double mx = in[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = std::exp(in[j] - mx);
    s += out[j];
  }
  const double inv = 1.0 / s;
  for (std::size_t j = 0; j < n; ++j) out[j] *= inv;
}

// Row-wise softmax with optional causal masking, in place on P (which
// already holds the scores). Masked entries become exactly 0.
void softmax_inplace(MatRM& P, bool causal) {
  const auto n = static_cast<std::size_t>(P.cols());
  for (Eigen::Index r = 0; r < P.rows(); ++r) {
    double* row = P.data() + r * P.cols();
    const std::size_t live = causal ? std::min<std::size_t>(static_cast<std::size_t>(r) + 1, n) : n;
    softmax_row(row, row, live);
    for (std::size_t j = live; j < n; ++j) row[j] = 0.0;
  }
}

// dS = P * (dP - rowsum(dP * P))
void softmax_backward(const double* p, const double* dp, double* ds, std::size_t n) {
  double dot = 0.0;
  for (std::size_t j = 0; j < n; ++j) dot += dp[j] * p[j];
  for (std::size_t j = 0; j < n; ++j) ds[j] += p[j] * (dp[j] - dot);
}

}  // namespace

Var softmax_rows(Tape& t, Var x, bool causal) {
  const Tensor& X = t.value(x);
  require_2d("softmax_rows", X);
  Tensor Y(X.shape);
  const std::size_t n = X.cols();
  for (std::size_t r = 0; r < X.rows(); ++r) {
    const std::size_t live = causal ? std::min(r + 1, n) : n;
    softmax_row(X.data.data() + r * n, Y.data.data() + r * n, live);
  }
  return t.push(checked(std::move(Y), "softmax_rows"), {x}, [x](Tape& tp, Var out) {
    const Tensor& P = tp.value(out);
    const Tensor& G = tp.grad(out);
    Tensor& gx = tp.grad(x);
    const std::size_t n = P.cols();
    for (std::size_t r = 0; r < P.rows(); ++r) {
      softmax_backward(P.data.data() + r * n, G.data.data() + r * n, gx.data.data() + r * n, n);
    }
  });
}

Var layer_norm(Tape& t, Var x, Var gain, Var bias) {
  const Tensor& X = t.value(x);
  const Tensor& Gn = t.value(gain);
  const Tensor& Bs = t.value(bias);
  require_2d("layer_norm", X);
  if (Gn.size() != X.cols()) shape_error("layer_norm(gain)", X, Gn);
  if (Bs.size() != X.cols()) shape_error("layer_norm(bias)", X, Bs);
  const std::size_t n = X.rows();
  const std::size_t m = X.cols();
  Tensor Y(X.shape);
  // Saved per row: normalized values and inverse std.
  auto xhat = std::make_shared<std::vector<double>>(X.size());
  auto inv_std = std::make_shared<std::vector<double>>(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* in = X.data.data() + r * m;
    double mean = 0.0;
    for (std::size_t c = 0; c < m; ++c) mean += in[c];
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t c = 0; c < m; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= static_cast<double>(m);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    (*inv_std)[r] = inv;
    for (std::size_t c = 0; c < m; ++c) {
      const double h = (in[c] - mean) * inv;
      (*xhat)[r * m + c] = h;
      Y.data[r * m + c] = h * Gn.data[c] + Bs.data[c];
    }
  }
  return t.push(checked(std::move(Y), "layer_norm"), {x, gain, bias},
                [x, gain, bias, xhat, inv_std](Tape& tp, Var out) {
                  const Tensor& G = tp.grad(out);
                  const Tensor& Gn = tp.value(gain);
                  const std::size_t m = G.cols();
                  const std::size_t n = G.rows();
                  if (tp.needs_grad(gain) || tp.needs_grad(bias)) {
                    const bool wg = tp.needs_grad(gain);
                    const bool wb = tp.needs_grad(bias);
                    double* gg = wg ? tp.grad(gain).data.data() : nullptr;
                    double* gb = wb ? tp.grad(bias).data.data() : nullptr;
                    for (std::size_t r = 0; r < n; ++r) {
                      for (std::size_t c = 0; c < m; ++c) {
                        const double g = G.data[r * m + c];
                        if (wg) gg[c] += g * (*xhat)[r * m + c];
                        if (wb) gb[c] += g;
                      }
                    }
                  }
                  if (!tp.needs_grad(x)) return;
                  auto& gx = tp.grad(x).data;
                  std::vector<double> dxhat(m);
                  for (std::size_t r = 0; r < n; ++r) {
                    double mean_d = 0.0, mean_dx = 0.0;
                    for (std::size_t c = 0; c < m; ++c) {
                      dxhat[c] = G.data[r * m + c] * Gn.data[c];
                      mean_d += dxhat[c];
                      mean_dx += dxhat[c] * (*xhat)[r * m + c];
                    }
                    mean_d /= static_cast<double>(m);
                    mean_dx /= static_cast<double>(m);
                    const double inv = (*inv_std)[r];
                    for (std::size_t c = 0; c < m; ++c) {
                      gx[r * m + c] += inv * (dxhat[c] - mean_d - (*xhat)[r * m + c] * mean_dx);
                    }
                  }
                });
}

Var embed(Tape& t, std::span<const std::int32_t> ids, Var table) {
  const Tensor& T = t.value(table);
  require_2d("embed", T);
  const std::size_t d = T.cols();
  Tensor Y({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= T.rows()) {
      throw Error(ErrorCode::ShapeMismatch, "embed: id " + std::to_string(ids[i]) + " outside table of " +
                                                std::to_string(T.rows()) + " rows");
    }
    std::copy_n(T.data.data() + static_cast<std::size_t>(ids[i]) * d, d, Y.data.data() + i * d);
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return t.push(checked(std::move(Y), "embed"), {table}, [table, saved = std::move(saved)](Tape& tp, Var out) {
    const Tensor& G = tp.grad(out);
    Tensor& gt = tp.grad(table);
    const std::size_t d = G.cols();
    for (std::size_t i = 0; i < saved.size(); ++i) {
      double* dst = gt.data.data() + static_cast<std::size_t>(saved[i]) * d;
      const double* src = G.data.data() + i * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  });
}

Var gather_rows(Tape& t, Var x, std::span<const std::size_t> rows) {
  const Tensor& X = t.value(x);
  require_2d("gather_rows", X);
  const std::size_t d = X.cols();
  Tensor Y({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= X.rows()) throw Error(ErrorCode::ShapeMismatch, "gather_rows: row out of range");
    std::copy_n(X.data.data() + rows[i] * d, d, Y.data.data() + i * d);
  }
  std::vector<std::size_t> saved(rows.begin(), rows.end());
  return t.push(std::move(Y), {x}, [x, saved = std::move(saved)](Tape& tp, Var out) {
    const Tensor& G = tp.grad(out);
    Tensor& gx = tp.grad(x);
    const std::size_t d = G.cols();
    for (std::size_t i = 0; i < saved.size(); ++i) {
      double* dst = gx.data.data() + saved[i] * d;
      const double* src = G.data.data() + i * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  });
}

Var attention(Tape& t, Var q, Var k, Var v, std::size_t n_heads, bool causal) {
  const Tensor& Q = t.value(q);
  const Tensor& K = t.value(k);
  const Tensor& V = t.value(v);
  require_2d("attention", Q);
  if (!Q.same_shape(K)) shape_error("attention", Q, K);
  if (!Q.same_shape(V)) shape_error("attention", Q, V);
  const std::size_t n = Q.rows();
  const std::size_t d = Q.cols();
  if (n_heads == 0 || d % n_heads != 0) {
    throw Error(ErrorCode::ShapeMismatch, "attention: width " + std::to_string(d) + " not divisible by heads");
  }
  const auto dh = static_cast<Eigen::Index>(d / n_heads);
  const auto N = static_cast<Eigen::Index>(n);
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));
  auto probs = std::make_shared<std::vector<MatRM>>(n_heads);
  Tensor O({n, d});
  auto o = as_mat(O);
  const auto qm = as_mat(Q), km = as_mat(K), vm = as_mat(V);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dh;
    MatRM& P = (*probs)[h];
    P.noalias() = (qm.middleCols(c0, dh) * km.middleCols(c0, dh).transpose()) * scale_factor;
    softmax_inplace(P, causal);
    o.middleCols(c0, dh).noalias() = P * vm.middleCols(c0, dh);
  }
  (void)N;
  return t.push(checked(std::move(O), "attention"), {q, k, v},
                [q, k, v, probs, dh, scale_factor](Tape& tp, Var out) {
                  const auto G = as_mat(tp.grad(out));
                  const auto qm = as_mat(tp.value(q)), km = as_mat(tp.value(k)), vm = as_mat(tp.value(v));
                  const bool wq = tp.needs_grad(q), wk = tp.needs_grad(k), wv = tp.needs_grad(v);
                  MatRM dP, dS;
                  for (std::size_t h = 0; h < probs->size(); ++h) {
                    const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dh;
                    const MatRM& P = (*probs)[h];
                    const auto Gh = G.middleCols(c0, dh);
                    if (wv) as_mat(tp.grad(v)).middleCols(c0, dh).noalias() += P.transpose() * Gh;
                    if (!wq && !wk) continue;
                    dP.noalias() = Gh * vm.middleCols(c0, dh).transpose();
                    dS.setZero(P.rows(), P.cols());
                    const auto cols = static_cast<std::size_t>(P.cols());
                    for (Eigen::Index r = 0; r < P.rows(); ++r) {
                      softmax_backward(P.data() + r * P.cols(), dP.data() + r * dP.cols(), dS.data() + r * dS.cols(),
                                       cols);
                    }
                    dS *= scale_factor;
                    if (wq) as_mat(tp.grad(q)).middleCols(c0, dh).noalias() += dS * km.middleCols(c0, dh);
                    if (wk) as_mat(tp.grad(k)).middleCols(c0, dh).noalias() += dS.transpose() * qm.middleCols(c0, dh);
                  }
                });
}

Var cross_entropy(Tape& t, Var logits, std::span<const std::int32_t> targets, std::int32_t ignore_id) {
  const Tensor& L = t.value(logits);
  require_2d("cross_entropy", L);
  if (targets.size() != L.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                              std::to_string(L.rows()) + " rows");
  }
  const std::size_t v = L.cols();
  std::size_t count = 0;
  double total = 0.0;
  for (std::size_t r = 0; r < L.rows(); ++r) {
    const std::int32_t y = targets[r];
    if (y == ignore_id) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= v) {
      throw Error(ErrorCode::ShapeMismatch, "cross_entropy: target " + std::to_string(y) + " out of range");
    }
    const double* row = L.data.data() + r * v;
    double mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(row[j] - mx);
    total += mx + std::log(s) - row[y];
    ++count;
  }
  const double loss = count ? total / static_cast<double>(count) : 0.0;
  std::vector<std::int32_t> saved(targets.begin(), targets.end());
  return t.push(checked(Tensor({1}, std::vector<double>{loss}), "cross_entropy"), {logits},
                [logits, saved = std::move(saved), ignore_id, count](Tape& tp, Var out) {
                  if (count == 0) return;
                  const double g = tp.grad(out).data[0] / static_cast<double>(count);
                  const Tensor& L = tp.value(logits);
                  Tensor& gl = tp.grad(logits);
                  const std::size_t v = L.cols();
                  std::vector<double> p(v);
                  for (std::size_t r = 0; r < L.rows(); ++r) {
                    if (saved[r] == ignore_id) continue;
                    softmax_row(L.data.data() + r * v, p.data(), v);
                    p[static_cast<std::size_t>(saved[r])] -= 1.0;
                    double* dst = gl.data.data() + r * v;
                    for (std::size_t j = 0; j < v; ++j) dst[j] += g * p[j];
                  }
                });
}

Var sum(Tape& t, Var x) {
  const Tensor& X = t.value(x);
  double s = 0.0;
  for (double v : X.data) s += v;
  return t.push(checked(Tensor({1}, std::vector<double>{s}), "sum"), {x}, [x](Tape& tp, Var out) {
    const double g = tp.grad(out).data[0];
    for (auto& gx : tp.grad(x).data) gx += g;
  });
}

}  // namespace sani
