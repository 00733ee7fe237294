#include "reltr/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace reltr {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

thread_local Tape* g_active_tape = nullptr;
std::atomic<BackwardFault> g_fault{BackwardFault::none};

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

bool tracking(const std::vector<Tensor>& inputs) {
  if (g_active_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.requires_grad(); });
}

void record(const Tensor& out, Tape::Rule rule) { g_active_tape->push(out.impl(), std::move(rule)); }

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << shape_string(a) << " and " << shape_string(b);
  throw std::invalid_argument(os.str());
}

void require_matrix(const char* op, const Tensor& t) {
  if (t.rank() != 2) {
    std::ostringstream os;
    os << op << ": expected a matrix, got shape " << shape_string(t.shape());
    throw std::invalid_argument(os.str());
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size())
    throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for shape " +
                                shape_string(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <class Fwd, class Bwd>
Tensor unary(const Tensor& x, Fwd fwd, Bwd dfdx) {
  std::vector<double> out(x.size());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  const bool track = tracking({&x});
  Tensor y(x.shape(), std::move(out), track);
  if (track) {
    record(y, [xi = x.impl(), yi = y.impl(), dfdx] {
      if (!xi->requires_grad) return;
      auto& gx = xi->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i)
        gx[i] += yi->grad[i] * dfdx(xi->data[i], yi->data[i]);
    });
  }
  return y;
}

template <class Fwd, class Bwd>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd partials) {
  if (a.shape() != b.shape()) shape_error(name, a.shape(), b.shape());
  std::vector<double> out(a.size());
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(da[i], db[i]);
  const bool track = tracking({&a, &b});
  Tensor y(a.shape(), std::move(out), track);
  if (track) {
    record(y, [ai = a.impl(), bi = b.impl(), yi = y.impl(), partials] {
      const std::size_t n = yi->data.size();
      // Same storage on both sides (x op x) accumulates twice, as it should.
      if (ai->requires_grad) {
        auto& ga = ai->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          ga[i] += yi->grad[i] * partials(ai->data[i], bi->data[i]).first;
      }
      if (bi->requires_grad) {
        auto& gb = bi->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          gb[i] += yi->grad[i] * partials(ai->data[i], bi->data[i]).second;
      }
    });
  }
  return y;
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---- Tensor ------------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  if (shape_numel(shape) != data.size())
    throw std::invalid_argument("tensor shape " + shape_string(shape) + " does not hold " +
                                std::to_string(data.size()) + " values");
  for (std::size_t e : shape)
    if (e == 0) throw std::invalid_argument("tensor extents must be positive");
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows, bool requires_grad) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw std::invalid_argument("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data), requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw std::out_of_range("axis out of range for " + shape_string(shape()));
  return impl_->shape[axis];
}

std::size_t Tensor::rows() const { return rank() == 2 ? impl_->shape[0] : 1; }
std::size_t Tensor::cols() const { return impl_->shape.back(); }

double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_string(shape()));
  return impl_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }

void Tensor::zero_grad() {
  if (impl_->has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data, false); }

// ---- Tape --------------------------------------------------------------------

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

Tape::Recording::Recording(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
Tape::Recording::~Recording() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::push(std::shared_ptr<detail::TensorImpl> output, Rule rule) {
  entries_.push_back({std::move(output), std::move(rule)});
}

void Tape::backward(const Tensor& root) {
  if (!root.requires_grad()) throw std::logic_error("backward: root does not require grad");
  auto& g = root.impl()->grad_buffer();
  std::fill(g.begin(), g.end(), 1.0);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!it->output->has_grad()) continue;
    it->rule();
  }
}

void set_backward_fault(BackwardFault fault) { g_fault.store(fault); }
BackwardFault backward_fault() { return g_fault.load(); }

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  if (a.dim(1) != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  const bool track = tracking({&a, &b});
  Tensor y({m, n}, std::move(out), track);
  if (track) {
    record(y, [ai = a.impl(), bi = b.impl(), yi = y.impl(), m, k, n] {
      ConstMap gy(yi->grad.data(), m, n);
      if (ai->requires_grad)
        MutMap(ai->grad_buffer().data(), m, k).noalias() += gy * ConstMap(bi->data.data(), k, n).transpose();
      if (bi->requires_grad)
        MutMap(bi->grad_buffer().data(), k, n).noalias() += ConstMap(ai->data.data(), m, k).transpose() * gy;
    });
  }
  return y;
}

SparseColumns SparseColumns::from_dense(const Tensor& m) {
  require_matrix("SparseColumns", m);
  SparseColumns s;
  s.rows = m.dim(0);
  s.taps.resize(m.dim(1));
  for (std::size_t r = 0; r < m.dim(0); ++r)
    for (std::size_t c = 0; c < m.dim(1); ++c)
      if (m.at(r, c) != 0.0) s.taps[c].emplace_back(r, m.at(r, c));
  return s;
}

Tensor matmul_sparse(const Tensor& a, std::shared_ptr<const SparseColumns> m) {
  require_matrix("matmul_sparse", a);
  if (a.dim(1) != m->rows) shape_error("matmul_sparse", a.shape(), {m->rows, m->cols()});
  const std::size_t rows = a.dim(0), k = a.dim(1), n = m->cols();
  std::vector<double> out(rows * n);
  auto da = a.data();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (const auto& [r, v] : m->taps[j]) acc += da[i * k + r] * v;
      out[i * n + j] = acc;
    }
  const bool track = tracking({&a});
  Tensor y({rows, n}, std::move(out), track);
  if (track) {
    record(y, [ai = a.impl(), yi = y.impl(), m, rows, k, n] {
      auto& ga = ai->grad_buffer();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double g = yi->grad[i * n + j];
          for (const auto& [r, v] : m->taps[j]) ga[i * k + r] += g * v;
        }
    });
  }
  return y;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix("matmul_nt", a);
  require_matrix("matmul_nt", b);
  if (a.dim(1) != b.dim(1)) shape_error("matmul_nt", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() =
      ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), n, k).transpose();
  const bool track = tracking({&a, &b});
  Tensor y({m, n}, std::move(out), track);
  if (track) {
    record(y, [ai = a.impl(), bi = b.impl(), yi = y.impl(), m, k, n] {
      ConstMap gy(yi->grad.data(), m, n);
      if (ai->requires_grad)
        MutMap(ai->grad_buffer().data(), m, k).noalias() += gy * ConstMap(bi->data.data(), n, k);
      if (bi->requires_grad)
        MutMap(bi->grad_buffer().data(), n, k).noalias() += gy.transpose() * ConstMap(ai->data.data(), m, k);
    });
  }
  return y;
}

Tensor transpose(const Tensor& a) {
  require_matrix("transpose", a);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  MutMap(out.data(), n, m) = ConstMap(a.data().data(), m, n).transpose();
  const bool track = tracking({&a});
  Tensor y({n, m}, std::move(out), track);
  if (track) {
    record(y, [ai = a.impl(), yi = y.impl(), m, n] {
      if (!ai->requires_grad) return;
      MutMap(ai->grad_buffer().data(), m, n) += ConstMap(yi->grad.data(), n, m).transpose();
    });
  }
  return y;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_row(matmul(x, weight), bias);
}

// ---- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary("add", a, b, [](double x, double y) { return x + y; },
                [](double, double) { return std::pair{1.0, 1.0}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary("sub", a, b, [](double x, double y) { return x - y; },
                [](double, double) { return std::pair{1.0, -1.0}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary("mul", a, b, [](double x, double y) { return x * y; },
                [](double x, double y) { return std::pair{y, x}; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary("div", a, b, [](double x, double y) { return x / y; },
                [](double x, double y) { return std::pair{1.0 / y, -x / (y * y)}; });
}

// Ties route the whole gradient to the first argument.
Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary("minimum", a, b, [](double x, double y) { return std::min(x, y); },
                [](double x, double y) { return x <= y ? std::pair{1.0, 0.0} : std::pair{0.0, 1.0}; });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary("maximum", a, b, [](double x, double y) { return std::max(x, y); },
                [](double x, double y) { return x >= y ? std::pair{1.0, 0.0} : std::pair{0.0, 1.0}; });
}

Tensor add_row(const Tensor& x, const Tensor& v) {
  const std::size_t n = x.cols();
  if (v.size() != n) shape_error("add_row", x.shape(), v.shape());
  std::vector<double> out(x.data().begin(), x.data().end());
  auto dv = v.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += dv[i % n];
  const bool track = tracking({&x, &v});
  Tensor y(x.shape(), std::move(out), track);
  if (track) {
    record(y, [xi = x.impl(), vi = v.impl(), yi = y.impl(), n] {
      const auto& gy = yi->grad;
      if (xi->requires_grad) {
        auto& gx = xi->grad_buffer();
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
      }
      if (vi->requires_grad) {
        auto& gv = vi->grad_buffer();
        for (std::size_t i = 0; i < gy.size(); ++i) gv[i % n] += gy[i];
      }
    });
  }
  return y;
}

Tensor scale(const Tensor& x, double factor) {
  return unary(x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor shift(const Tensor& x, double offset) {
  return unary(x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x,
               [](double v) {
                 if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
                 const double e = std::exp(v);
                 return e / (1.0 + e);
               },
               [](double, double out) { return out * (1.0 - out); });
}

Tensor log(const Tensor& x) {
  return unary(x, [](double v) { return std::log(v); }, [](double in, double) { return 1.0 / in; });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double out) { return out; });
}

Tensor abs(const Tensor& x) {
  return unary(x, [](double v) { return std::fabs(v); },
               [](double in, double) { return in > 0.0 ? 1.0 : (in < 0.0 ? -1.0 : 0.0); });
}

// ---- normalization -----------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<double> out(x.size());
  auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.inner; ++j) {
      const std::size_t base = o * s.extent * s.inner + j;
      double hi = in[base];
      for (std::size_t i = 1; i < s.extent; ++i) hi = std::max(hi, in[base + i * s.inner]);
      double total = 0.0;
      for (std::size_t i = 0; i < s.extent; ++i) {
        const double e = std::exp(in[base + i * s.inner] - hi);
        out[base + i * s.inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < s.extent; ++i) out[base + i * s.inner] /= total;
    }
  }
  const bool track = tracking({&x});
  Tensor y(x.shape(), std::move(out), track);
  if (track) {
    record(y, [xi = x.impl(), yi = y.impl(), s] {
      if (!xi->requires_grad) return;
      const bool faulty = backward_fault() == BackwardFault::softmax;
      auto& gx = xi->grad_buffer();
      const auto& gy = yi->grad;
      const auto& sm = yi->data;
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t j = 0; j < s.inner; ++j) {
          const std::size_t base = o * s.extent * s.inner + j;
          double dot = 0.0;
          for (std::size_t i = 0; i < s.extent; ++i) dot += gy[base + i * s.inner] * sm[base + i * s.inner];
          if (faulty) dot = 0.0;
          for (std::size_t i = 0; i < s.extent; ++i) {
            const std::size_t k = base + i * s.inner;
            gx[k] += sm[k] * (gy[k] - dot);
          }
        }
      }
    });
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t n = x.cols();
  if (gain.size() != n || bias.size() != n) shape_error("layer_norm", x.shape(), gain.shape());
  const std::size_t slices = x.size() / n;
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(slices);
  auto in = x.data();
  auto g = gain.data();
  auto b = bias.data();
  for (std::size_t r = 0; r < slices; ++r) {
    const double* row = in.data() + r * n;
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += row[i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) {
      xhat[r * n + i] = (row[i] - mu) * inv_std[r];
      out[r * n + i] = g[i] * xhat[r * n + i] + b[i];
    }
  }
  const bool track = tracking({&x, &gain, &bias});
  Tensor y(x.shape(), std::move(out), track);
  if (track) {
    record(y, [xi = x.impl(), gi = gain.impl(), bi = bias.impl(), yi = y.impl(), xhat = std::move(xhat),
               inv_std = std::move(inv_std), n, slices] {
      const auto& gy = yi->grad;
      if (gi->requires_grad) {
        auto& gg = gi->grad_buffer();
        for (std::size_t k = 0; k < gy.size(); ++k) gg[k % n] += gy[k] * xhat[k];
      }
      if (bi->requires_grad) {
        auto& gb = bi->grad_buffer();
        for (std::size_t k = 0; k < gy.size(); ++k) gb[k % n] += gy[k];
      }
      if (!xi->requires_grad) return;
      auto& gx = xi->grad_buffer();
      std::vector<double> dxhat(n);
      for (std::size_t r = 0; r < slices; ++r) {
        double mean_d = 0.0, mean_dx = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          dxhat[i] = gy[r * n + i] * gi->data[i];
          mean_d += dxhat[i];
          mean_dx += dxhat[i] * xhat[r * n + i];
        }
        mean_d /= static_cast<double>(n);
        mean_dx /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
          gx[r * n + i] += inv_std[r] * (dxhat[i] - mean_d - xhat[r * n + i] * mean_dx);
      }
    });
  }
  return y;
}

// ---- structural --------------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& first = parts.front().shape();
  Shape shape = first;
  shape.at(axis) = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.size()) shape_error("concat", first, p.shape());
    for (std::size_t d = 0; d < first.size(); ++d)
      if (d != axis && p.dim(d) != first[d]) shape_error("concat", first, p.shape());
    shape[axis] += p.dim(axis);
  }
  const AxisSplit s = split_axis(shape, axis);
  std::vector<double> out(shape_numel(shape));
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t chunk = p.dim(axis) * s.inner;
    auto src = p.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(src.begin() + o * chunk, chunk, out.begin() + o * s.extent * s.inner + offset);
    offset += chunk;
  }
  const bool track = tracking(parts);
  Tensor y(shape, std::move(out), track);
  if (track) {
    std::vector<std::shared_ptr<detail::TensorImpl>> impls;
    for (const Tensor& p : parts) impls.push_back(p.impl());
    record(y, [impls = std::move(impls), yi = y.impl(), s, axis] {
      std::size_t off = 0;
      for (const auto& pi : impls) {
        const std::size_t chunk = pi->shape[axis] * s.inner;
        if (pi->requires_grad) {
          auto& gp = pi->grad_buffer();
          for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += yi->grad[o * s.extent * s.inner + off + i];
        }
        off += chunk;
      }
    });
  }
  return y;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const AxisSplit s = split_axis(x.shape(), axis);
  if (begin >= end || end > s.extent)
    throw std::invalid_argument("slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                                ") out of range for shape " + shape_string(x.shape()));
  Shape shape = x.shape();
  shape[axis] = end - begin;
  const std::size_t chunk = (end - begin) * s.inner;
  std::vector<double> out(s.outer * chunk);
  auto src = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(src.begin() + o * s.extent * s.inner + begin * s.inner, chunk, out.begin() + o * chunk);
  const bool track = tracking({&x});
  Tensor y(std::move(shape), std::move(out), track);
  if (track) {
    record(y, [xi = x.impl(), yi = y.impl(), s, chunk, begin] {
      if (!xi->requires_grad) return;
      auto& gx = xi->grad_buffer();
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < chunk; ++i) gx[o * s.extent * s.inner + begin * s.inner + i] += yi->grad[o * chunk + i];
    });
  }
  return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size()) shape_error("reshape", x.shape(), shape);
  const bool track = tracking({&x});
  Tensor y(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()), track);
  if (track) {
    record(y, [xi = x.impl(), yi = y.impl()] {
      if (!xi->requires_grad) return;
      auto& gx = xi->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += yi->grad[i];
    });
  }
  return y;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_matrix("gather_rows", x);
  if (rows.empty()) throw std::invalid_argument("gather_rows: empty row list");
  const std::size_t n = x.cols();
  std::vector<double> out(rows.size() * n);
  auto src = x.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= x.rows()) throw std::out_of_range("gather_rows: row index out of range");
    std::copy_n(src.begin() + rows[r] * n, n, out.begin() + r * n);
  }
  const bool track = tracking({&x});
  Tensor y({rows.size(), n}, std::move(out), track);
  if (track) {
    record(y, [xi = x.impl(), yi = y.impl(), idx = std::vector<std::size_t>(rows.begin(), rows.end()), n] {
      if (!xi->requires_grad) return;
      auto& gx = xi->grad_buffer();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t c = 0; c < n; ++c) gx[idx[r] * n + c] += yi->grad[r * n + c];
    });
  }
  return y;
}

// ---- reductions --------------------------------------------------------------

Tensor sum(const Tensor& x) {
  auto d = x.data();
  const double total = std::accumulate(d.begin(), d.end(), 0.0);
  const bool track = tracking({&x});
  Tensor y({1}, {total}, track);
  if (track) {
    record(y, [xi = x.impl(), yi = y.impl()] {
      if (!xi->requires_grad) return;
      auto& gx = xi->grad_buffer();
      for (double& g : gx) g += yi->grad[0];
    });
  }
  return y;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets, std::span<const double> weights) {
  require_matrix("cross_entropy", logits);
  const std::size_t rows = logits.rows(), classes = logits.cols();
  if (targets.size() != rows || (!weights.empty() && weights.size() != rows))
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                shape_string(logits.shape()) + " logits");
  std::vector<double> probs(logits.size());
  std::vector<double> w(rows, 1.0);
  if (!weights.empty()) std::copy(weights.begin(), weights.end(), w.begin());
  auto in = logits.data();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= classes) throw std::out_of_range("cross_entropy: target class out of range");
    const double* row = in.data() + r * classes;
    const double hi = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - hi);
    const double log_z = hi + std::log(z);
    for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] = std::exp(row[c] - log_z);
    if (w[r] != 0.0) total += w[r] * (log_z - row[targets[r]]);
  }
  const bool track = tracking({&logits});
  Tensor y({1}, {total}, track);
  if (track) {
    record(y, [li = logits.impl(), yi = y.impl(), probs = std::move(probs), w = std::move(w),
               t = std::vector<std::size_t>(targets.begin(), targets.end()), classes] {
      if (!li->requires_grad) return;
      auto& gl = li->grad_buffer();
      const double g = yi->grad[0];
      for (std::size_t r = 0; r < t.size(); ++r) {
        if (w[r] == 0.0) continue;
        for (std::size_t c = 0; c < classes; ++c) {
          const double onehot = c == t[r] ? 1.0 : 0.0;
          gl[r * classes + c] += g * w[r] * (probs[r * classes + c] - onehot);
        }
      }
    });
  }
  return y;
}

Tensor cross_entropy(const Tensor& logits, std::size_t target) {
  const std::size_t t[1] = {target};
  return cross_entropy(reshape(logits, {1, logits.size()}), t);
}

// ---- convolution -------------------------------------------------------------

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, o, k, stride, pad, ho, wo;
  std::size_t patch() const { return c * k * k; }
  std::size_t pixels() const { return ho * wo; }
};

void im2col(const double* img, const ConvGeometry& g, double* cols) {
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* dst = cols + ((ch * g.k + ky) * g.k + kx) * g.pixels();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) && ix < static_cast<long>(g.w);
            dst[oy * g.wo + ox] = inside ? img[(ch * g.h + iy) * g.w + ix] : 0.0;
          }
        }
      }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* img) {
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* src = cols + ((ch * g.k + ky) * g.k + kx) * g.pixels();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            img[(ch * g.h + iy) * g.w + ix] += src[oy * g.wo + ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t padding) {
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(1) != x.dim(1) || weight.dim(2) != weight.dim(3) ||
      bias.size() != weight.dim(0))
    shape_error("conv2d", x.shape(), weight.shape());
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), stride, padding, 0, 0};
  if (g.h + 2 * padding < g.k || g.w + 2 * padding < g.k) shape_error("conv2d", x.shape(), weight.shape());
  g.ho = (g.h + 2 * padding - g.k) / stride + 1;
  g.wo = (g.w + 2 * padding - g.k) / stride + 1;

  std::vector<double> cols(g.n * g.patch() * g.pixels());
  std::vector<double> out(g.n * g.o * g.pixels());
  ConstMap wmat(weight.data().data(), g.o, g.patch());
  auto bvals = bias.data();
  for (std::size_t b = 0; b < g.n; ++b) {
    double* col = cols.data() + b * g.patch() * g.pixels();
    im2col(x.data().data() + b * g.c * g.h * g.w, g, col);
    MutMap res(out.data() + b * g.o * g.pixels(), g.o, g.pixels());
    res.noalias() = wmat * ConstMap(col, g.patch(), g.pixels());
    for (std::size_t oc = 0; oc < g.o; ++oc) res.row(oc).array() += bvals[oc];
  }
  const bool track = tracking({&x, &weight, &bias});
  Tensor y({g.n, g.o, g.ho, g.wo}, std::move(out), track);
  if (track) {
    record(y, [xi = x.impl(), wi = weight.impl(), bi = bias.impl(), yi = y.impl(), cols = std::move(cols), g] {
      for (std::size_t b = 0; b < g.n; ++b) {
        ConstMap gy(yi->grad.data() + b * g.o * g.pixels(), g.o, g.pixels());
        ConstMap col(cols.data() + b * g.patch() * g.pixels(), g.patch(), g.pixels());
        if (wi->requires_grad) MutMap(wi->grad_buffer().data(), g.o, g.patch()).noalias() += gy * col.transpose();
        if (bi->requires_grad) {
          auto& gb = bi->grad_buffer();
          for (std::size_t oc = 0; oc < g.o; ++oc) gb[oc] += gy.row(oc).sum();
        }
        if (xi->requires_grad) {
          RowMat dcol = ConstMap(wi->data.data(), g.o, g.patch()).transpose() * gy;
          col2im_add(dcol.data(), g, xi->grad_buffer().data() + b * g.c * g.h * g.w);
        }
      }
    });
  }
  return y;
}

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw std::invalid_argument("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  Shape shape = x.shape();
  std::vector<double> mask(x.size());
  for (double& m : mask) m = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
  return mul(x, Tensor(std::move(shape), std::move(mask)));
}

// ---- gradient check ----------------------------------------------------------

namespace {
constexpr double kKinkJump = 5e-5;
constexpr int kMaxRefinements = 2;
}  // namespace

GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double eps) {
  for (Tensor& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss;
    {
      auto rec = tape.record();
      loss = f();
    }
    tape.backward(loss);
    for (Tensor& p : params)
      analytic.emplace_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                         : std::vector<double>(p.size(), 0.0));
  }

  GradCheckReport report;
  const double base = f().item();
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      ++report.checked;
      double numeric = 0.0;
      bool finite = true;
      for (int level = 0;; ++level) {
        const double h = eps * std::pow(0.1, level);
        values[i] = saved + h;
        const double up = f().item();
        values[i] = saved - h;
        const double down = f().item();
        values[i] = saved;
        if (!std::isfinite(up) || !std::isfinite(down)) {
          finite = false;
          break;
        }
        numeric = (up - down) / (2.0 * h);
        // One-sided slopes that disagree mean a kink (relu, min/max) inside
        // the stencil; shrink the step until it no longer straddles it.
        const double forward = (up - base) / h, backward = (base - down) / h;
        const double jump = std::fabs(forward - backward) / std::max({1.0, std::fabs(forward), std::fabs(backward)});
        if (jump <= kKinkJump || level == kMaxRefinements) break;
        if (level == 0) ++report.refined;
      }
      if (!finite) {
        report.non_finite.emplace_back(pi, i);
        continue;
      }
      const double a = analytic[pi][i];
      const double err = std::fabs(a - numeric) / std::max({1.0, std::fabs(a), std::fabs(numeric)});
      if (err > report.max_rel_error || report.checked == 1) {
        report.max_rel_error = std::max(report.max_rel_error, err);
        report.worst_param = pi;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  for (Tensor& p : params) p.zero_grad();
  return report;
}

}  // namespace reltr
