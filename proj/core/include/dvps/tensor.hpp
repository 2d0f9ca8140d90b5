#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dvps {

class Rng;

/// Dense row-major tensor of doubles. Handles are cheap value types sharing
/// one storage block; data is treated as immutable once an op has produced
/// it. mutable_values() exists for initialization and optimizer updates,
/// which happen outside any recorded computation.
///
/// Every primitive checks its output for NaN/Inf and throws NumericError on
/// violation; downstream code may therefore assume all tensor values finite.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor from(std::vector<int> shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false);

  bool defined() const { return storage_ != nullptr; }
  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int extent(int axis) const;
  std::size_t size() const;
  bool requires_grad() const { return requires_grad_; }

  double operator()(int i) const;
  double operator()(int i, int j) const;
  double operator()(int i, int j, int k) const;

  std::span<const double> values() const;
  /// Raw write access. Only for construction-time fills and optimizer steps.
  std::span<double> mutable_values();

  std::span<const double> grad() const;
  void zero_grad();
  void accumulate_grad(std::size_t flat_index, double v);

  /// Deep copy (fresh storage, fresh zero grad if requested).
  Tensor clone(bool requires_grad) const;
  Tensor clone() const { return clone(requires_grad_); }
  /// Same storage, gradient flow severed for downstream ops.
  Tensor detach() const;
  /// Same storage reinterpreted under a new shape of equal element count.
  /// Adjoints pass through untouched because data and grad layout is shared.
  Tensor view(std::vector<int> new_shape) const;

  bool shares_storage_with(const Tensor& other) const {
    return storage_ == other.storage_;
  }

 private:
  struct Storage {
    std::vector<double> data;
    std::vector<double> grad;  // empty until gradients are needed
  };

  void ensure_grad();

  std::vector<int> shape_;
  std::shared_ptr<Storage> storage_;
  bool requires_grad_ = false;

  friend Tensor make_op_output(std::vector<int> shape, bool requires_grad);
};

/// Exact bitwise equality of shape and data.
bool bitwise_equal(const Tensor& a, const Tensor& b);

/// Ordered record of primitive applications. Ops append one adjoint step per
/// application while a tape is in scope; backward() replays the steps in
/// reverse, which visits every node after all of its consumers and therefore
/// charges each requires-grad leaf exactly once per use.
///
/// A tape must be confined to one execution context; independent tapes on
/// separate threads are fine.
class GradTape {
 public:
  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  void record(std::function<void()> adjoint_step);
  void clear() { steps_.clear(); }
  std::size_t size() const { return steps_.size(); }

  static GradTape* active();

  /// RAII activation for the current thread.
  class Scope {
   public:
    explicit Scope(GradTape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    GradTape* previous_;
  };

 private:
  friend void backward(const Tensor& loss, GradTape& tape);
  std::vector<std::function<void()>> steps_;
};

/// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. loss must be a
/// scalar (size 1) computed while the tape was in scope.
void backward(const Tensor& loss, GradTape& tape);

// ---- primitives -----------------------------------------------------------
// Elementwise ops require identical shapes. Rank-2 ops say so.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

Tensor sum_all(const Tensor& a);   // -> shape {1}
Tensor mean_all(const Tensor& a);  // -> shape {1}

Tensor matmul(const Tensor& a, const Tensor& b);  // [M,K]x[K,N] -> [M,N]
Tensor transpose(const Tensor& a);                // rank 2
Tensor slice_rows(const Tensor& a, int begin, int count);  // rank 2
Tensor slice_cols(const Tensor& a, int begin, int count);  // rank 2
Tensor concat_rows(const std::vector<Tensor>& parts);      // rank 2
Tensor concat_cols(const std::vector<Tensor>& parts);      // rank 2
Tensor swap_axes01(const Tensor& a);  // rank 3 [A,B,C] -> [B,A,C]

/// Subtract-max stabilized; rows along `axis` sum to 1.
Tensor softmax(const Tensor& a, int axis);
Tensor log_softmax(const Tensor& a, int axis);

/// Normalizes the last axis to zero mean / unit variance, then applies the
/// per-channel affine gamma * xhat + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

/// y = x W + b over the last axis of x; leading axes broadcast.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

/// Temporal 1D convolution over axis 0 of x [T,D] with kernel [k,Din,Dout],
/// zero padded so the output is again [T,Dout]. k must be odd.
Tensor conv1d_temporal(const Tensor& x, const Tensor& kernel, const Tensor& bias);

/// Elementwise stabilized binary cross entropy on logits. targets is a
/// constant (gradient flows to logits only).
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

struct MhaParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  int heads = 1;

  static MhaParams init(int dim, int heads, Rng& rng);
  void collect(std::vector<Tensor>& out) const;
};

/// Standard multi-head attention. q [Nq,D], k and v [Nk,D]; per head
/// softmax(q_h k_h^T / sqrt(D/heads)) v_h, heads concatenated, then the
/// output projection. Composed from the primitives above, so adjoints come
/// from the tape.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const MhaParams& params);

// ---- gradient verification -------------------------------------------------

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
/// for a scalar-valued fn of one tensor.
double check_gradients(const std::function<Tensor(const Tensor&)>& fn,
                       const Tensor& x0, double eps);

/// Same, for a scalar loss over a set of requires-grad leaves (block or
/// model parameters). Grads of the leaves are clobbered.
double check_gradients(const std::function<Tensor()>& loss_fn,
                       const std::vector<Tensor>& leaves, double eps);

// ---- parameter registry -----------------------------------------------------

/// Named parameter tensors. Registration order is the canonical iteration
/// order for the optimizer and for checkpoints.
class ParamSet {
 public:
  Tensor& add(const std::string& name, Tensor t);
  Tensor* find(const std::string& name);
  const Tensor* find(const std::string& name) const;
  const std::vector<std::pair<std::string, Tensor>>& entries() const {
    return entries_;
  }
  std::vector<Tensor> tensors() const;
  void zero_grad();
  std::size_t total_size() const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

}  // namespace dvps
