#pragma once

// Tensor engine: float32 storage, dynamic reverse-mode tape, AdamW.
//
// Design notes, in brief:
//  - A Tensor is a shared handle to (shape, data, grad, requires_grad).
//    Copies alias the same storage.
//  - A Tape records backward closures for ops whose inputs participate in
//    differentiation (requires_grad parameters or tensors produced on the
//    same tape).  Ops run eagerly; with no active tape they are pure forward.
//  - Tape::backward(loss) seeds d loss/d loss = 1, walks the closures in
//    reverse with a pass-local adjoint map, then accumulates adjoints into
//    the persistent .grad of every requires_grad tensor touched.  Running
//    backward twice therefore doubles .grad exactly.
//  - Tapes are thread-confined: the active tape is thread_local and a tape
//    refuses recordings from threads other than its creator.
//  - Loss reductions and normalization sums accumulate in double; storage
//    stays float32.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "mos/rng.hpp"

namespace mos {

std::string shape_str(const std::vector<int>& shape);

struct TensorImpl {
  std::vector<int> shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
  uint64_t producer_tape = 0;  // id of the tape that recorded this tensor as an op output
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor randn(std::vector<int> shape, Pcg32& rng, float stddev = 1.0f,
                      bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  float* data() { return impl_->data.data(); }
  const float* data() const { return impl_->data.data(); }
  std::vector<float>& data_vec() { return impl_->data; }
  const std::vector<float>& data_vec() const { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  // Gradient buffer, allocated as zeros on first access.
  std::vector<float>& grad_vec();
  void zero_grad();

  // Value of a single-element tensor; errors otherwise.
  float item() const;

  // Deep copy; the copy is a fresh leaf (no grad, no tape history).
  Tensor clone() const;

  TensorImpl* impl() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  static Tensor make(std::vector<int> shape, bool requires_grad);
  std::shared_ptr<TensorImpl> impl_;
  friend class Tape;
};

class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Runs the recorded graph backward from a scalar loss and accumulates into
  // .grad of every requires_grad tensor on the path.  May be called more than
  // once; each call adds another full gradient.
  void backward(const Tensor& loss);

  static Tape* active();
  uint64_t id() const { return id_; }
  size_t node_count() const { return nodes_.size(); }

  // --- recording/backward plumbing (used by op implementations) ---
  void record(std::function<void(Tape&)> fn);
  // Pass-local adjoint of t, or nullptr if none has been created.
  float* adjoint_or_null(const Tensor& t);
  // Pass-local adjoint of t, created as zeros on demand.
  float* adjoint(const Tensor& t);
  // True if gradients should flow into t (parameter or same-tape intermediate).
  bool tracks(const Tensor& t) const;

 private:
  uint64_t id_;
  std::vector<std::function<void(Tape&)>> nodes_;
  std::unordered_map<TensorImpl*, std::vector<float>> adj_;
  Tape* prev_ = nullptr;
  size_t owner_thread_ = 0;
  friend class Tensor;
};

// Free-function form; uses the active tape, errors without one.
void backward(const Tensor& loss);

// ---- ops ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);          // [m,k]x[k,n] -> [m,n]
Tensor transpose(const Tensor& a);                        // [m,n] -> [n,m]
Tensor add(const Tensor& a, const Tensor& b);             // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);             // elementwise
Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);
Tensor add_row(const Tensor& a, const Tensor& bias);      // [m,n] + [n], row broadcast
Tensor silu(const Tensor& a);
Tensor softmax(const Tensor& a, int axis);                // axis may be negative
Tensor rms_norm(const Tensor& a, const Tensor& gain);     // over last axis; eps 1e-6
Tensor sum(const Tensor& a);                              // scalar
Tensor mean(const Tensor& a);                             // scalar
Tensor mean_squared_error(const Tensor& pred, const Tensor& target);  // scalar
Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor concat_rows(const std::vector<Tensor>& parts);     // along axis 0
Tensor slice_rows(const Tensor& a, int begin, int end);   // [m,...] -> [end-begin,...]
Tensor slice_cols(const Tensor& a, int begin, int end);   // [m,n] -> [m,end-begin]
Tensor concat_cols(const std::vector<Tensor>& parts);     // along axis 1
Tensor embedding(const Tensor& table, const std::vector<int>& ids);  // [V,d] -> [L,d]
// out.flat[i] = x.flat[map[i]]; map entries must be valid; backward scatter-adds.
Tensor gather_linear(const Tensor& x, std::vector<int64_t> map, std::vector<int> out_shape);

// Multi-head attention over row-major sequences.
//   q: [Lq,d], k,v: [Lk,d]; d divisible by heads.
//   qk_norm: RMS-normalize q and k per head before scoring, with per-head
//   gain vectors (q_gain/k_gain, each [d]) when provided, unit gains otherwise.
//   bidirectional=false applies a causal mask (requires Lq == Lk).
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                            bool qk_norm, bool bidirectional, const Tensor& q_gain = {},
                            const Tensor& k_gain = {});

namespace detail {
// Raw-buffer mirrors of forward ops, used by the untaped fast paths in the
// tower code.  Each reproduces the matching op above bit-for-bit (same kernel
// calls in the same order); none touches the tape.
void rms_rows(const float* x, float* y, int64_t rows, int d, const float* gain);  // gain nullable
void attention_rows(const float* q, const float* k, const float* v, int q_rows, int kv_rows,
                    int heads, int head_dim, bool qk_norm, bool bidirectional, const float* q_gain,
                    const float* k_gain, float* out);
}  // namespace detail

// ---- optimizer ----------------------------------------------------------

struct AdamWConfig {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.95f;
  float weight_decay = 0.01f;
  float eps = 1e-8f;
  bool operator==(const AdamWConfig&) const = default;
};

// First and second moments per parameter, parallel to the parameter list the
// state was initialized with.  step_count feeds bias correction.
struct OptimizerState {
  AdamWConfig cfg;
  int64_t step_count = 0;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  void init(const std::vector<Tensor>& params, const AdamWConfig& config);
  bool initialized() const { return !m.empty() || step_count > 0; }
};

// One decoupled-weight-decay Adam step.  lr_scale multiplies cfg.lr (warmup /
// schedules); parameters with no accumulated gradient see a zero gradient.
void adamw_step(std::vector<Tensor>& params, OptimizerState& state, float lr_scale = 1.0f);

void zero_grads(std::vector<Tensor>& params);

}  // namespace mos
