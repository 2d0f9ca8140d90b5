#include "dvps/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "dvps/common.hpp"
#include "dvps/rng.hpp"

namespace dvps {

namespace {

thread_local GradTape* g_active_tape = nullptr;

std::size_t shape_product(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw std::invalid_argument("Tensor: extents must be positive");
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

void check_finite(const char* op, std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string(op) + ": produced a non-finite value");
    }
  }
}

std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                              shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

bool tape_wants(const Tensor& t) {
  return g_active_tape != nullptr && t.requires_grad();
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.storage_ = std::make_shared<Storage>();
  t.storage_->data.assign(shape_product(t.shape_), 0.0);
  t.requires_grad_ = requires_grad;
  if (requires_grad) t.ensure_grad();
  return t;
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.storage_->data.begin(), t.storage_->data.end(), value);
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values,
                    bool requires_grad) {
  Tensor t;
  t.shape_ = std::move(shape);
  if (shape_product(t.shape_) != values.size()) {
    throw std::invalid_argument("Tensor::from: data length does not match shape");
  }
  t.storage_ = std::make_shared<Storage>();
  t.storage_->data = std::move(values);
  t.requires_grad_ = requires_grad;
  if (requires_grad) t.ensure_grad();
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev,
                     bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& x : t.storage_->data) x = rng.normal(0.0, stddev);
  return t;
}

int Tensor::extent(int axis) const {
  if (axis < 0 || axis >= rank()) throw std::invalid_argument("Tensor::extent: bad axis");
  return shape_[static_cast<std::size_t>(axis)];
}

std::size_t Tensor::size() const { return storage_ ? storage_->data.size() : 0; }

double Tensor::operator()(int i) const { return storage_->data[static_cast<std::size_t>(i)]; }

double Tensor::operator()(int i, int j) const {
  return storage_->data[static_cast<std::size_t>(i) * static_cast<std::size_t>(shape_[1]) +
                        static_cast<std::size_t>(j)];
}

double Tensor::operator()(int i, int j, int k) const {
  const std::size_t s1 = static_cast<std::size_t>(shape_[1]);
  const std::size_t s2 = static_cast<std::size_t>(shape_[2]);
  return storage_->data[(static_cast<std::size_t>(i) * s1 + static_cast<std::size_t>(j)) * s2 +
                        static_cast<std::size_t>(k)];
}

std::span<const double> Tensor::values() const {
  return {storage_->data.data(), storage_->data.size()};
}

std::span<double> Tensor::mutable_values() {
  return {storage_->data.data(), storage_->data.size()};
}

std::span<const double> Tensor::grad() const {
  if (!storage_ || storage_->grad.size() != storage_->data.size()) {
    throw std::logic_error("Tensor::grad: no gradient buffer");
  }
  return {storage_->grad.data(), storage_->grad.size()};
}

void Tensor::zero_grad() {
  ensure_grad();
  std::fill(storage_->grad.begin(), storage_->grad.end(), 0.0);
}

void Tensor::accumulate_grad(std::size_t flat_index, double v) {
  storage_->grad[flat_index] += v;
}

void Tensor::ensure_grad() {
  if (storage_->grad.size() != storage_->data.size()) {
    storage_->grad.assign(storage_->data.size(), 0.0);
  }
}

Tensor Tensor::clone(bool requires_grad) const {
  Tensor t;
  t.shape_ = shape_;
  t.storage_ = std::make_shared<Storage>();
  t.storage_->data = storage_->data;
  t.requires_grad_ = requires_grad;
  if (requires_grad) t.ensure_grad();
  return t;
}

Tensor Tensor::detach() const {
  Tensor t = *this;
  t.requires_grad_ = false;
  return t;
}

Tensor Tensor::view(std::vector<int> new_shape) const {
  if (shape_product(new_shape) != size()) {
    throw std::invalid_argument("Tensor::view: element count mismatch");
  }
  Tensor t = *this;
  t.shape_ = std::move(new_shape);
  return t;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  const auto va = a.values();
  const auto vb = b.values();
  return std::memcmp(va.data(), vb.data(), va.size() * sizeof(double)) == 0;
}

// Output tensor of an op: gets a grad buffer when it participates in a tape.
Tensor make_op_output(std::vector<int> shape, bool requires_grad) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  return t;
}

// ---- GradTape ---------------------------------------------------------------

void GradTape::record(std::function<void()> adjoint_step) {
  steps_.push_back(std::move(adjoint_step));
}

GradTape* GradTape::active() { return g_active_tape; }

GradTape::Scope::Scope(GradTape& tape) : previous_(g_active_tape) {
  g_active_tape = &tape;
}

GradTape::Scope::~Scope() { g_active_tape = previous_; }

void backward(const Tensor& loss, GradTape& tape) {
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar tensor");
  }
  if (!loss.requires_grad()) {
    throw std::invalid_argument("backward: loss was not computed under the tape");
  }
  Tensor seed = loss;  // shares storage
  seed.accumulate_grad(0, 1.0);
  for (auto it = tape.steps_.rbegin(); it != tape.steps_.rend(); ++it) (*it)();
}

// ---- elementwise ------------------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  if (a.shape() != b.shape()) shape_error(name, a, b);
  const bool rg = tape_wants(a) || tape_wants(b);
  Tensor out = make_op_output(a.shape(), rg);
  const auto va = a.values();
  const auto vb = b.values();
  auto vo = out.mutable_values();
  for (std::size_t i = 0; i < vo.size(); ++i) vo[i] = fwd(va[i], vb[i]);
  check_finite(name, out.values());
  if (rg) {
    GradTape::active()->record([a, b, out, bwd]() {
      const auto go = out.grad();
      const auto va2 = a.values();
      const auto vb2 = b.values();
      Tensor am = a, bm = b;
      for (std::size_t i = 0; i < go.size(); ++i) {
        const auto [da, db] = bwd(va2[i], vb2[i], go[i]);
        if (am.requires_grad()) am.accumulate_grad(i, da);
        if (bm.requires_grad()) bm.accumulate_grad(i, db);
      }
    });
  }
  return out;
}

template <typename Fwd, typename Bwd>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Bwd bwd) {
  const bool rg = tape_wants(a);
  Tensor out = make_op_output(a.shape(), rg);
  const auto va = a.values();
  auto vo = out.mutable_values();
  for (std::size_t i = 0; i < vo.size(); ++i) vo[i] = fwd(va[i]);
  check_finite(name, out.values());
  if (rg) {
    GradTape::active()->record([a, out, bwd]() {
      const auto go = out.grad();
      const auto va2 = a.values();
      const auto vo2 = out.values();
      Tensor am = a;
      for (std::size_t i = 0; i < go.size(); ++i) {
        am.accumulate_grad(i, bwd(va2[i], vo2[i], go[i]));
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op("add", a, b, [](double x, double y) { return x + y; },
                   [](double, double, double g) { return std::pair{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op("sub", a, b, [](double x, double y) { return x - y; },
                   [](double, double, double g) { return std::pair{g, -g}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op("mul", a, b, [](double x, double y) { return x * y; },
                   [](double x, double y, double g) { return std::pair{g * y, g * x}; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op("div", a, b, [](double x, double y) { return x / y; },
                   [](double x, double y, double g) {
                     return std::pair{g / y, -g * x / (y * y)};
                   });
}

Tensor neg(const Tensor& a) {
  return unary_op("neg", a, [](double x) { return -x; },
                  [](double, double, double g) { return -g; });
}

Tensor scale(const Tensor& a, double c) {
  return unary_op("scale", a, [c](double x) { return c * x; },
                  [c](double, double, double g) { return c * g; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op("add_scalar", a, [c](double x) { return x + c; },
                  [](double, double, double g) { return g; });
}

Tensor relu(const Tensor& a) {
  return unary_op("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x, double, double g) { return x > 0.0 ? g : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  auto sig = [](double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  };
  return unary_op("sigmoid", a, sig,
                  [](double, double y, double g) { return g * y * (1.0 - y); });
}

Tensor sum_all(const Tensor& a) {
  const bool rg = tape_wants(a);
  Tensor out = make_op_output({1}, rg);
  double s = 0.0;
  for (double x : a.values()) s += x;
  out.mutable_values()[0] = s;
  check_finite("sum_all", out.values());
  if (rg) {
    GradTape::active()->record([a, out]() {
      const double g = out.grad()[0];
      Tensor am = a;
      for (std::size_t i = 0; i < am.size(); ++i) am.accumulate_grad(i, g);
    });
  }
  return out;
}

Tensor mean_all(const Tensor& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

// ---- rank-2 structure --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    shape_error("matmul", a, b);
  }
  const int m = a.extent(0), k = a.extent(1), n = b.extent(1);
  const bool rg = tape_wants(a) || tape_wants(b);
  Tensor out = make_op_output({m, n}, rg);
  const auto va = a.values();
  const auto vb = b.values();
  auto vo = out.mutable_values();
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const double aip = va[static_cast<std::size_t>(i) * k + p];
      const std::size_t arow = static_cast<std::size_t>(i) * n;
      const std::size_t brow = static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) vo[arow + j] += aip * vb[brow + j];
    }
  }
  check_finite("matmul", out.values());
  if (rg) {
    GradTape::active()->record([a, b, out, m, k, n]() {
      const auto go = out.grad();
      const auto va2 = a.values();
      const auto vb2 = b.values();
      Tensor am = a, bm = b;
      if (am.requires_grad()) {
        // dA = G B^T
        for (int i = 0; i < m; ++i) {
          for (int p = 0; p < k; ++p) {
            double s = 0.0;
            for (int j = 0; j < n; ++j) {
              s += go[static_cast<std::size_t>(i) * n + j] * vb2[static_cast<std::size_t>(p) * n + j];
            }
            am.accumulate_grad(static_cast<std::size_t>(i) * k + p, s);
          }
        }
      }
      if (bm.requires_grad()) {
        // dB = A^T G
        for (int p = 0; p < k; ++p) {
          for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int i = 0; i < m; ++i) {
              s += va2[static_cast<std::size_t>(i) * k + p] * go[static_cast<std::size_t>(i) * n + j];
            }
            bm.accumulate_grad(static_cast<std::size_t>(p) * n + j, s);
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose: rank-2 tensor required");
  const int m = a.extent(0), n = a.extent(1);
  const bool rg = tape_wants(a);
  Tensor out = make_op_output({n, m}, rg);
  const auto va = a.values();
  auto vo = out.mutable_values();
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      vo[static_cast<std::size_t>(j) * m + i] = va[static_cast<std::size_t>(i) * n + j];
    }
  }
  if (rg) {
    GradTape::active()->record([a, out, m, n]() {
      const auto go = out.grad();
      Tensor am = a;
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
          am.accumulate_grad(static_cast<std::size_t>(i) * n + j,
                             go[static_cast<std::size_t>(j) * m + i]);
        }
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& a, int begin, int count) {
  if (a.rank() != 2) throw std::invalid_argument("slice_rows: rank-2 tensor required");
  if (begin < 0 || count <= 0 || begin + count > a.extent(0)) {
    throw std::invalid_argument("slice_rows: range out of bounds");
  }
  const int n = a.extent(1);
  const bool rg = tape_wants(a);
  Tensor out = make_op_output({count, n}, rg);
  const auto va = a.values();
  auto vo = out.mutable_values();
  std::memcpy(vo.data(), va.data() + static_cast<std::size_t>(begin) * n,
              static_cast<std::size_t>(count) * n * sizeof(double));
  if (rg) {
    GradTape::active()->record([a, out, begin, count, n]() {
      const auto go = out.grad();
      Tensor am = a;
      for (std::size_t i = 0; i < static_cast<std::size_t>(count) * n; ++i) {
        am.accumulate_grad(static_cast<std::size_t>(begin) * n + i, go[i]);
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& a, int begin, int count) {
  if (a.rank() != 2) throw std::invalid_argument("slice_cols: rank-2 tensor required");
  if (begin < 0 || count <= 0 || begin + count > a.extent(1)) {
    throw std::invalid_argument("slice_cols: range out of bounds");
  }
  const int m = a.extent(0), n = a.extent(1);
  const bool rg = tape_wants(a);
  Tensor out = make_op_output({m, count}, rg);
  const auto va = a.values();
  auto vo = out.mutable_values();
  for (int i = 0; i < m; ++i) {
    std::memcpy(vo.data() + static_cast<std::size_t>(i) * count,
                va.data() + static_cast<std::size_t>(i) * n + begin,
                static_cast<std::size_t>(count) * sizeof(double));
  }
  if (rg) {
    GradTape::active()->record([a, out, begin, count, m, n]() {
      const auto go = out.grad();
      Tensor am = a;
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < count; ++j) {
          am.accumulate_grad(static_cast<std::size_t>(i) * n + begin + j,
                             go[static_cast<std::size_t>(i) * count + j]);
        }
      }
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  const int n = parts.front().extent(1);
  int total = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.extent(1) != n) {
      throw std::invalid_argument("concat_rows: column extents differ");
    }
    total += p.extent(0);
    rg = rg || tape_wants(p);
  }
  Tensor out = make_op_output({total, n}, rg);
  auto vo = out.mutable_values();
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const auto vp = p.values();
    std::memcpy(vo.data() + offset, vp.data(), vp.size() * sizeof(double));
    offset += vp.size();
  }
  if (rg) {
    GradTape::active()->record([parts, out]() {
      const auto go = out.grad();
      std::size_t off = 0;
      for (Tensor p : parts) {
        const std::size_t len = p.size();
        if (p.requires_grad()) {
          for (std::size_t i = 0; i < len; ++i) p.accumulate_grad(i, go[off + i]);
        }
        off += len;
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const int m = parts.front().extent(0);
  int total = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.extent(0) != m) {
      throw std::invalid_argument("concat_cols: row extents differ");
    }
    total += p.extent(1);
    rg = rg || tape_wants(p);
  }
  Tensor out = make_op_output({m, total}, rg);
  auto vo = out.mutable_values();
  int col = 0;
  for (const Tensor& p : parts) {
    const int w = p.extent(1);
    const auto vp = p.values();
    for (int i = 0; i < m; ++i) {
      std::memcpy(vo.data() + static_cast<std::size_t>(i) * total + col,
                  vp.data() + static_cast<std::size_t>(i) * w,
                  static_cast<std::size_t>(w) * sizeof(double));
    }
    col += w;
  }
  if (rg) {
    GradTape::active()->record([parts, out, m, total]() {
      const auto go = out.grad();
      int col2 = 0;
      for (Tensor p : parts) {
        const int w = p.extent(1);
        if (p.requires_grad()) {
          for (int i = 0; i < m; ++i) {
            for (int j = 0; j < w; ++j) {
              p.accumulate_grad(static_cast<std::size_t>(i) * w + j,
                                go[static_cast<std::size_t>(i) * total + col2 + j]);
            }
          }
        }
        col2 += w;
      }
    });
  }
  return out;
}

Tensor swap_axes01(const Tensor& a) {
  if (a.rank() != 3) throw std::invalid_argument("swap_axes01: rank-3 tensor required");
  const int A = a.extent(0), B = a.extent(1), C = a.extent(2);
  const bool rg = tape_wants(a);
  Tensor out = make_op_output({B, A, C}, rg);
  const auto va = a.values();
  auto vo = out.mutable_values();
  for (int i = 0; i < A; ++i) {
    for (int j = 0; j < B; ++j) {
      std::memcpy(vo.data() + (static_cast<std::size_t>(j) * A + i) * C,
                  va.data() + (static_cast<std::size_t>(i) * B + j) * C,
                  static_cast<std::size_t>(C) * sizeof(double));
    }
  }
  if (rg) {
    GradTape::active()->record([a, out, A, B, C]() {
      const auto go = out.grad();
      Tensor am = a;
      for (int i = 0; i < A; ++i) {
        for (int j = 0; j < B; ++j) {
          for (int c = 0; c < C; ++c) {
            am.accumulate_grad((static_cast<std::size_t>(i) * B + j) * C + c,
                               go[(static_cast<std::size_t>(j) * A + i) * C + c]);
          }
        }
      }
    });
  }
  return out;
}

// ---- softmax family -----------------------------------------------------------

namespace {

struct AxisSpan {
  std::size_t outer, extent, inner;
};

AxisSpan axis_span(const Tensor& a, int axis) {
  if (axis < 0 || axis >= a.rank()) throw std::invalid_argument("softmax: bad axis");
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(a.extent(i));
  for (int i = axis + 1; i < a.rank(); ++i) inner *= static_cast<std::size_t>(a.extent(i));
  return {outer, static_cast<std::size_t>(a.extent(axis)), inner};
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
  const AxisSpan sp = axis_span(a, axis);
  const bool rg = tape_wants(a);
  Tensor out = make_op_output(a.shape(), rg);
  const auto va = a.values();
  auto vo = out.mutable_values();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.extent * sp.inner + in;
      double mx = va[base];
      for (std::size_t e = 1; e < sp.extent; ++e) {
        mx = std::max(mx, va[base + e * sp.inner]);
      }
      double denom = 0.0;
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const double ex = std::exp(va[base + e * sp.inner] - mx);
        vo[base + e * sp.inner] = ex;
        denom += ex;
      }
      for (std::size_t e = 0; e < sp.extent; ++e) vo[base + e * sp.inner] /= denom;
    }
  }
  check_finite("softmax", out.values());
  if (rg) {
    GradTape::active()->record([a, out, sp]() {
      const auto go = out.grad();
      const auto vy = out.values();
      Tensor am = a;
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const std::size_t base = o * sp.extent * sp.inner + in;
          double dot = 0.0;
          for (std::size_t e = 0; e < sp.extent; ++e) {
            dot += go[base + e * sp.inner] * vy[base + e * sp.inner];
          }
          for (std::size_t e = 0; e < sp.extent; ++e) {
            const std::size_t idx = base + e * sp.inner;
            am.accumulate_grad(idx, vy[idx] * (go[idx] - dot));
          }
        }
      }
    });
  }
  return out;
}

Tensor log_softmax(const Tensor& a, int axis) {
  const AxisSpan sp = axis_span(a, axis);
  const bool rg = tape_wants(a);
  Tensor out = make_op_output(a.shape(), rg);
  const auto va = a.values();
  auto vo = out.mutable_values();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.extent * sp.inner + in;
      double mx = va[base];
      for (std::size_t e = 1; e < sp.extent; ++e) {
        mx = std::max(mx, va[base + e * sp.inner]);
      }
      double denom = 0.0;
      for (std::size_t e = 0; e < sp.extent; ++e) denom += std::exp(va[base + e * sp.inner] - mx);
      const double lse = mx + std::log(denom);
      for (std::size_t e = 0; e < sp.extent; ++e) {
        vo[base + e * sp.inner] = va[base + e * sp.inner] - lse;
      }
    }
  }
  check_finite("log_softmax", out.values());
  if (rg) {
    GradTape::active()->record([a, out, sp]() {
      const auto go = out.grad();
      const auto vy = out.values();
      Tensor am = a;
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const std::size_t base = o * sp.extent * sp.inner + in;
          double gsum = 0.0;
          for (std::size_t e = 0; e < sp.extent; ++e) gsum += go[base + e * sp.inner];
          for (std::size_t e = 0; e < sp.extent; ++e) {
            const std::size_t idx = base + e * sp.inner;
            am.accumulate_grad(idx, go[idx] - std::exp(vy[idx]) * gsum);
          }
        }
      }
    });
  }
  return out;
}

// ---- layer norm -----------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1) throw std::invalid_argument("layer_norm: rank >= 1 required");
  const int d = x.extent(x.rank() - 1);
  if (gamma.size() != static_cast<std::size_t>(d) || beta.size() != static_cast<std::size_t>(d)) {
    throw std::invalid_argument("layer_norm: gamma/beta extent mismatch");
  }
  const std::size_t rows = x.size() / static_cast<std::size_t>(d);
  const bool rg = tape_wants(x) || tape_wants(gamma) || tape_wants(beta);
  Tensor out = make_op_output(x.shape(), rg);

  // Saved for the adjoint: normalized values and per-row inverse stddev.
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);

  const auto vx = x.values();
  const auto vg = gamma.values();
  const auto vb = beta.values();
  auto vo = out.mutable_values();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * static_cast<std::size_t>(d);
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += vx[base + j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = vx[base + j] - mean;
      var += c * c;
    }
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (int j = 0; j < d; ++j) {
      const double xh = (vx[base + j] - mean) * is;
      (*xhat)[base + j] = xh;
      vo[base + j] = vg[j] * xh + vb[j];
    }
  }
  check_finite("layer_norm", out.values());
  if (rg) {
    GradTape::active()->record([x, gamma, beta, out, xhat, inv_std, rows, d]() {
      const auto go = out.grad();
      const auto vg2 = gamma.values();
      Tensor xm = x, gm = gamma, bm = beta;
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * static_cast<std::size_t>(d);
        if (gm.requires_grad() || bm.requires_grad()) {
          for (int j = 0; j < d; ++j) {
            if (gm.requires_grad()) {
              gm.accumulate_grad(static_cast<std::size_t>(j), go[base + j] * (*xhat)[base + j]);
            }
            if (bm.requires_grad()) bm.accumulate_grad(static_cast<std::size_t>(j), go[base + j]);
          }
        }
        if (xm.requires_grad()) {
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (int j = 0; j < d; ++j) {
            const double dxh = go[base + j] * vg2[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * (*xhat)[base + j];
          }
          mean_dxhat /= d;
          mean_dxhat_xhat /= d;
          const double is = (*inv_std)[r];
          for (int j = 0; j < d; ++j) {
            const double dxh = go[base + j] * vg2[j];
            xm.accumulate_grad(base + j,
                               is * (dxh - mean_dxhat - (*xhat)[base + j] * mean_dxhat_xhat));
          }
        }
      }
    });
  }
  return out;
}

// ---- linear ------------------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() < 1 || w.rank() != 2) throw std::invalid_argument("linear: bad ranks");
  const int din = w.extent(0), dout = w.extent(1);
  if (x.extent(x.rank() - 1) != din) shape_error("linear", x, w);
  if (b.size() != static_cast<std::size_t>(dout)) {
    throw std::invalid_argument("linear: bias extent mismatch");
  }
  const std::size_t rows = x.size() / static_cast<std::size_t>(din);
  std::vector<int> out_shape = x.shape();
  out_shape.back() = dout;
  const bool rg = tape_wants(x) || tape_wants(w) || tape_wants(b);
  Tensor out = make_op_output(std::move(out_shape), rg);

  const auto vx = x.values();
  const auto vw = w.values();
  const auto vb = b.values();
  auto vo = out.mutable_values();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t xb = r * static_cast<std::size_t>(din);
    const std::size_t ob = r * static_cast<std::size_t>(dout);
    for (int j = 0; j < dout; ++j) vo[ob + j] = vb[j];
    for (int i = 0; i < din; ++i) {
      const double xv = vx[xb + i];
      const std::size_t wb = static_cast<std::size_t>(i) * dout;
      for (int j = 0; j < dout; ++j) vo[ob + j] += xv * vw[wb + j];
    }
  }
  check_finite("linear", out.values());
  if (rg) {
    GradTape::active()->record([x, w, b, out, rows, din, dout]() {
      const auto go = out.grad();
      const auto vx2 = x.values();
      const auto vw2 = w.values();
      Tensor xm = x, wm = w, bm = b;
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t xb = r * static_cast<std::size_t>(din);
        const std::size_t ob = r * static_cast<std::size_t>(dout);
        if (bm.requires_grad()) {
          for (int j = 0; j < dout; ++j) bm.accumulate_grad(static_cast<std::size_t>(j), go[ob + j]);
        }
        for (int i = 0; i < din; ++i) {
          const std::size_t wb = static_cast<std::size_t>(i) * dout;
          if (xm.requires_grad()) {
            double s = 0.0;
            for (int j = 0; j < dout; ++j) s += go[ob + j] * vw2[wb + j];
            xm.accumulate_grad(xb + i, s);
          }
          if (wm.requires_grad()) {
            const double xv = vx2[xb + i];
            for (int j = 0; j < dout; ++j) wm.accumulate_grad(wb + j, xv * go[ob + j]);
          }
        }
      }
    });
  }
  return out;
}

// ---- temporal convolution -------------------------------------------------------

Tensor conv1d_temporal(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  if (x.rank() != 2) throw std::invalid_argument("conv1d_temporal: x must be [T,D]");
  if (kernel.rank() != 3) throw std::invalid_argument("conv1d_temporal: kernel must be [k,Din,Dout]");
  const int t_len = x.extent(0), din = x.extent(1);
  const int k = kernel.extent(0), kdin = kernel.extent(1), dout = kernel.extent(2);
  if (k % 2 == 0) throw std::invalid_argument("conv1d_temporal: kernel size must be odd");
  if (kdin != din) shape_error("conv1d_temporal", x, kernel);
  if (bias.size() != static_cast<std::size_t>(dout)) {
    throw std::invalid_argument("conv1d_temporal: bias extent mismatch");
  }
  const int c = k / 2;
  const bool rg = tape_wants(x) || tape_wants(kernel) || tape_wants(bias);
  Tensor out = make_op_output({t_len, dout}, rg);

  const auto vx = x.values();
  const auto vk = kernel.values();
  const auto vb = bias.values();
  auto vo = out.mutable_values();
  for (int t = 0; t < t_len; ++t) {
    const std::size_t ob = static_cast<std::size_t>(t) * dout;
    for (int j = 0; j < dout; ++j) vo[ob + j] = vb[j];
    for (int tap = 0; tap < k; ++tap) {
      const int src = t + tap - c;
      if (src < 0 || src >= t_len) continue;  // zero padding
      const std::size_t xb = static_cast<std::size_t>(src) * din;
      const std::size_t kb = static_cast<std::size_t>(tap) * din * dout;
      for (int i = 0; i < din; ++i) {
        const double xv = vx[xb + i];
        const std::size_t kr = kb + static_cast<std::size_t>(i) * dout;
        for (int j = 0; j < dout; ++j) vo[ob + j] += xv * vk[kr + j];
      }
    }
  }
  check_finite("conv1d_temporal", out.values());
  if (rg) {
    GradTape::active()->record([x, kernel, bias, out, t_len, din, dout, k, c]() {
      const auto go = out.grad();
      const auto vx2 = x.values();
      const auto vk2 = kernel.values();
      Tensor xm = x, km = kernel, bm = bias;
      for (int t = 0; t < t_len; ++t) {
        const std::size_t ob = static_cast<std::size_t>(t) * dout;
        if (bm.requires_grad()) {
          for (int j = 0; j < dout; ++j) bm.accumulate_grad(static_cast<std::size_t>(j), go[ob + j]);
        }
        for (int tap = 0; tap < k; ++tap) {
          const int src = t + tap - c;
          if (src < 0 || src >= t_len) continue;
          const std::size_t xb = static_cast<std::size_t>(src) * din;
          const std::size_t kb = static_cast<std::size_t>(tap) * din * dout;
          for (int i = 0; i < din; ++i) {
            const std::size_t kr = kb + static_cast<std::size_t>(i) * dout;
            if (xm.requires_grad()) {
              double s = 0.0;
              for (int j = 0; j < dout; ++j) s += go[ob + j] * vk2[kr + j];
              xm.accumulate_grad(xb + i, s);
            }
            if (km.requires_grad()) {
              const double xv = vx2[xb + i];
              for (int j = 0; j < dout; ++j) km.accumulate_grad(kr + j, xv * go[ob + j]);
            }
          }
        }
      }
    });
  }
  return out;
}

// ---- binary cross entropy --------------------------------------------------------

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape()) shape_error("bce_with_logits", logits, targets);
  if (targets.requires_grad()) {
    throw std::invalid_argument("bce_with_logits: targets must be constant");
  }
  const bool rg = tape_wants(logits);
  Tensor out = make_op_output(logits.shape(), rg);
  const auto vz = logits.values();
  const auto vy = targets.values();
  auto vo = out.mutable_values();
  for (std::size_t i = 0; i < vo.size(); ++i) {
    const double z = vz[i];
    // max(z,0) - z*y + log(1 + exp(-|z|)), stable for large |z|.
    vo[i] = std::max(z, 0.0) - z * vy[i] + std::log1p(std::exp(-std::abs(z)));
  }
  check_finite("bce_with_logits", out.values());
  if (rg) {
    GradTape::active()->record([logits, targets, out]() {
      const auto go = out.grad();
      const auto vz2 = logits.values();
      const auto vy2 = targets.values();
      Tensor lm = logits;
      for (std::size_t i = 0; i < go.size(); ++i) {
        const double z = vz2[i];
        const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
        lm.accumulate_grad(i, go[i] * (s - vy2[i]));
      }
    });
  }
  return out;
}

// ---- multi-head attention ----------------------------------------------------------

MhaParams MhaParams::init(int dim, int heads, Rng& rng) {
  if (heads <= 0 || dim % heads != 0) {
    throw std::invalid_argument("MhaParams: dim must be divisible by heads");
  }
  const double std_w = 1.0 / std::sqrt(static_cast<double>(dim));
  MhaParams p;
  p.heads = heads;
  p.wq = Tensor::randn({dim, dim}, rng, std_w, true);
  p.wk = Tensor::randn({dim, dim}, rng, std_w, true);
  p.wv = Tensor::randn({dim, dim}, rng, std_w, true);
  p.wo = Tensor::randn({dim, dim}, rng, std_w, true);
  p.bq = Tensor::zeros({dim}, true);
  p.bk = Tensor::zeros({dim}, true);
  p.bv = Tensor::zeros({dim}, true);
  p.bo = Tensor::zeros({dim}, true);
  return p;
}

void MhaParams::collect(std::vector<Tensor>& out) const {
  out.insert(out.end(), {wq, bq, wk, bk, wv, bv, wo, bo});
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const MhaParams& params) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw std::invalid_argument("multi_head_attention: rank-2 inputs required");
  }
  const int d = q.extent(1);
  if (k.extent(1) != d || v.extent(1) != d || k.extent(0) != v.extent(0)) {
    shape_error("multi_head_attention", k, v);
  }
  if (params.heads <= 0 || d % params.heads != 0) {
    throw std::invalid_argument("multi_head_attention: dim not divisible by heads");
  }
  const int dh = d / params.heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  const Tensor qp = linear(q, params.wq, params.bq);
  const Tensor kp = linear(k, params.wk, params.bk);
  const Tensor vp = linear(v, params.wv, params.bv);

  std::vector<Tensor> head_outputs;
  head_outputs.reserve(static_cast<std::size_t>(params.heads));
  for (int h = 0; h < params.heads; ++h) {
    const Tensor qh = slice_cols(qp, h * dh, dh);
    const Tensor kh = slice_cols(kp, h * dh, dh);
    const Tensor vh = slice_cols(vp, h * dh, dh);
    const Tensor scores = scale(matmul(qh, transpose(kh)), att_scale);
    const Tensor weights = softmax(scores, 1);
    head_outputs.push_back(matmul(weights, vh));
  }
  return linear(concat_cols(head_outputs), params.wo, params.bo);
}

// ---- gradient verification -----------------------------------------------------------

double check_gradients(const std::function<Tensor(const Tensor&)>& fn,
                       const Tensor& x0, double eps) {
  Tensor x = x0.clone(true);
  return check_gradients([&]() { return fn(x); }, {x}, eps);
}

double check_gradients(const std::function<Tensor()>& loss_fn,
                       const std::vector<Tensor>& leaves, double eps) {
  for (Tensor leaf : leaves) {
    if (!leaf.requires_grad()) {
      throw std::invalid_argument("check_gradients: leaf without requires_grad");
    }
    leaf.zero_grad();
  }
  GradTape tape;
  {
    GradTape::Scope scope(tape);
    const Tensor loss = loss_fn();
    if (loss.size() != 1) throw std::invalid_argument("check_gradients: fn must be scalar");
    backward(loss, tape);
  }
  double max_rel = 0.0;
  for (Tensor leaf : leaves) {
    const auto analytic = leaf.grad();
    auto data = leaf.mutable_values();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + eps;
      const double f_plus = loss_fn().values()[0];
      data[i] = saved - eps;
      const double f_minus = loss_fn().values()[0];
      data[i] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * eps);
      const double rel = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

// ---- ParamSet ------------------------------------------------------------------------

Tensor& ParamSet::add(const std::string& name, Tensor t) {
  if (find(name) != nullptr) throw std::invalid_argument("ParamSet: duplicate name " + name);
  entries_.emplace_back(name, std::move(t));
  return entries_.back().second;
}

Tensor* ParamSet::find(const std::string& name) {
  for (auto& [n, t] : entries_) {
    if (n == name) return &t;
  }
  return nullptr;
}

const Tensor* ParamSet::find(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return &t;
  }
  return nullptr;
}

std::vector<Tensor> ParamSet::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& [n, t] : entries_) out.push_back(t);
  return out;
}

void ParamSet::zero_grad() {
  for (auto& [n, t] : entries_) t.zero_grad();
}

std::size_t ParamSet::total_size() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.size();
  return n;
}

}  // namespace dvps
