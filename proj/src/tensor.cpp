#include "mos/tensor.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <thread>

#include "mos/kernels.hpp"

namespace mos {

namespace {

thread_local Tape* t_active_tape = nullptr;
uint64_t next_tape_id() {
  static uint64_t counter = 0;
  return ++counter;
}

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("tensor: negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

size_t this_thread_key() { return std::hash<std::thread::id>{}(std::this_thread::get_id()); }

const kernels::Table& kern() { return kernels::active(); }

void require_2d(const Tensor& t, const char* op, const char* which) {
  if (t.ndim() != 2) {
    throw std::invalid_argument(std::string(op) + ": " + which + " must be 2-D, got shape " +
                                shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

// Records the closure if any input participates in differentiation, and marks
// the output as produced on the active tape.
template <typename Fn>
void record_if_tracked(std::initializer_list<Tensor> inputs, Tensor& out, Fn&& fn) {
  Tape* tape = Tape::active();
  if (tape == nullptr) return;
  bool tracked = false;
  for (const Tensor& t : inputs) {
    if (tape->tracks(t)) {
      tracked = true;
      break;
    }
  }
  if (!tracked) return;
  out.impl()->producer_tape = tape->id();
  tape->record(std::forward<Fn>(fn));
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) s += ' ';
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::make(std::vector<int> shape, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  int64_t n = shape_numel(shape);
  impl->shape = std::move(shape);
  impl->data.assign(static_cast<size_t>(n), 0.0f);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  return make(std::move(shape), requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
  Tensor t = make(std::move(shape), requires_grad);
  for (auto& x : t.impl_->data) x = value;
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data, bool requires_grad) {
  int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(data.size())) {
    throw std::invalid_argument("from_data: shape " + shape_str(shape) + " wants " +
                                std::to_string(n) + " values, got " + std::to_string(data.size()));
  }
  Tensor t = make(std::move(shape), requires_grad);
  t.impl_->data = std::move(data);
  return t;
}

Tensor Tensor::randn(std::vector<int> shape, Pcg32& rng, float stddev, bool requires_grad) {
  Tensor t = make(std::move(shape), requires_grad);
  for (auto& x : t.impl_->data) x = stddev * static_cast<float>(rng.normal());
  return t;
}

std::vector<float>& Tensor::grad_vec() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

float Tensor::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("item: tensor has shape " + shape_str(shape()) +
                                ", expected a single element");
  }
  return impl_->data[0];
}

Tensor Tensor::clone() const {
  Tensor t = make(impl_->shape, false);
  t.impl_->data = impl_->data;
  return t;
}

// ---- Tape -----------------------------------------------------------------

Tape::Tape() : id_(next_tape_id()) {
  prev_ = t_active_tape;
  owner_thread_ = this_thread_key();
  t_active_tape = this;
}

Tape::~Tape() { t_active_tape = prev_; }

Tape* Tape::active() { return t_active_tape; }

void Tape::record(std::function<void(Tape&)> fn) {
  if (this_thread_key() != owner_thread_) {
    throw std::logic_error("tape: recording from a thread other than the tape's owner");
  }
  nodes_.push_back(std::move(fn));
}

bool Tape::tracks(const Tensor& t) const {
  return t.defined() && (t.impl()->requires_grad || t.impl()->producer_tape == id_);
}

float* Tape::adjoint_or_null(const Tensor& t) {
  auto it = adj_.find(t.impl());
  return it == adj_.end() ? nullptr : it->second.data();
}

float* Tape::adjoint(const Tensor& t) {
  auto [it, inserted] = adj_.try_emplace(t.impl());
  if (inserted) it->second.assign(static_cast<size_t>(t.numel()), 0.0f);
  return it->second.data();
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be a defined scalar, got shape " +
                                (loss.defined() ? shape_str(loss.shape()) : std::string("<null>")));
  }
  if (loss.impl()->producer_tape != id_ && !loss.requires_grad()) {
    throw std::invalid_argument("backward: loss was not computed on this tape");
  }
  adj_.clear();
  adjoint(loss)[0] = 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)(*this);
  for (auto& [impl, adj] : adj_) {
    if (!impl->requires_grad) continue;
    if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0f);
    kern().axpy(1.0f, adj.data(), impl->grad.data(), static_cast<int>(adj.size()));
  }
  adj_.clear();
}

void backward(const Tensor& loss) {
  Tape* tape = Tape::active();
  if (tape == nullptr) throw std::logic_error("backward: no active tape on this thread");
  tape->backward(loss);
}

// ---- ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul", "lhs");
  require_2d(b, "matmul", "rhs");
  if (a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  }
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  kern().matmul_nn(a.data(), b.data(), out.data(), m, k, n, false);
  record_if_tracked({a, b}, out, [a, b, out, m, k, n](Tape& t) {
    const float* dout = t.adjoint_or_null(out);
    if (dout == nullptr) return;
    if (t.tracks(a)) kern().matmul_nt(dout, b.data(), t.adjoint(a), m, n, k, true);
    if (t.tracks(b)) kern().matmul_tn(a.data(), dout, t.adjoint(b), k, m, n, true);
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose", "input");
  int m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m});
  const float* src = a.data();
  float* dst = out.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  record_if_tracked({a}, out, [a, out, m, n](Tape& t) {
    const float* dout = t.adjoint_or_null(out);
    if (dout == nullptr || !t.tracks(a)) return;
    float* da = t.adjoint(a);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) da[i * n + j] += dout[j * m + i];
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  int n = static_cast<int>(a.numel());
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (int i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  record_if_tracked({a, b}, out, [a, b, out, n](Tape& t) {
    const float* dout = t.adjoint_or_null(out);
    if (dout == nullptr) return;
    if (t.tracks(a)) kern().axpy(1.0f, dout, t.adjoint(a), n);
    if (t.tracks(b)) kern().axpy(1.0f, dout, t.adjoint(b), n);
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  int n = static_cast<int>(a.numel());
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (int i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  record_if_tracked({a, b}, out, [a, b, out, n](Tape& t) {
    const float* dout = t.adjoint_or_null(out);
    if (dout == nullptr) return;
    if (t.tracks(a)) kern().axpy(1.0f, dout, t.adjoint(a), n);
    if (t.tracks(b)) kern().axpy(-1.0f, dout, t.adjoint(b), n);
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  int n = static_cast<int>(a.numel());
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (int i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  record_if_tracked({a, b}, out, [a, b, out, n](Tape& t) {
    const float* dout = t.adjoint_or_null(out);
    if (dout == nullptr) return;
    if (t.tracks(a)) {
      float* da = t.adjoint(a);
      const float* pb2 = b.data();
      for (int i = 0; i < n; ++i) da[i] += dout[i] * pb2[i];
    }
    if (t.tracks(b)) {
      float* db = t.adjoint(b);
      const float* pa2 = a.data();
      for (int i = 0; i < n; ++i) db[i] += dout[i] * pa2[i];
    }
  });
  return out;
}

Tensor scale(const Tensor& a, float s) {
  Tensor out = Tensor::zeros(a.shape());
  int n = static_cast<int>(a.numel());
  const float* pa = a.data();
  float* po = out.data();
  for (int i = 0; i < n; ++i) po[i] = pa[i] * s;
  record_if_tracked({a}, out, [a, out, s, n](Tape& t) {
    const float* dout = t.adjoint_or_null(out);
    if (dout == nullptr || !t.tracks(a)) return;
    kern().axpy(s, dout, t.adjoint(a), n);
  });
  return out;
}

Tensor add_scalar(const Tensor& a, float s) {
  Tensor out = Tensor::zeros(a.shape());
  int n = static_cast<int>(a.numel());
  const float* pa = a.data();
  float* po = out.data();
  for (int i = 0; i < n; ++i) po[i] = pa[i] + s;
  record_if_tracked({a}, out, [a, out, n](Tape& t) {
    const float* dout = t.adjoint_or_null(out);
    if (dout == nullptr || !t.tracks(a)) return;
    kern().axpy(1.0f, dout, t.adjoint(a), n);
  });
  return out;
}

Tensor add_row(const Tensor& a, const Tensor& bias) {
  require_2d(a, "add_row", "input");
  if (bias.ndim() != 1 || bias.dim(0) != a.dim(1)) {
    throw std::invalid_argument("add_row: bias shape " + shape_str(bias.shape()) +
                                " does not match row width of " + shape_str(a.shape()));
  }
  int m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.data();
  const float* pb = bias.data();
  float* po = out.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) po[i * n + j] = pa[i * n + j] + pb[j];
  record_if_tracked({a, bias}, out, [a, bias, out, m, n](Tape& t) {
    const float* dout = t.adjoint_or_null(out);
    if (dout == nullptr) return;
    if (t.tracks(a)) kern().axpy(1.0f, dout, t.adjoint(a), m * n);
    if (t.tracks(bias)) {
      float* db = t.adjoint(bias);
      for (int i = 0; i < m; ++i) kern().axpy(1.0f, dout + static_cast<int64_t>(i) * n, db, n);
    }
  });
  return out;
}

Tensor silu(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  int n = static_cast<int>(a.numel());
  kern().silu(a.data(), out.data(), n);
  record_if_tracked({a}, out, [a, out, n](Tape& t) {
    const float* dout = t.adjoint_or_null(out);
    if (dout == nullptr || !t.tracks(a)) return;
    kern().silu_grad(a.data(), dout, t.adjoint(a), n, true);
  });
  return out;
}

namespace {

struct AxisSplit {
  int64_t outer, len, inner;
};

AxisSplit split_axis(const std::vector<int>& shape, int axis, const char* op) {
  int nd = static_cast<int>(shape.size());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) {
    throw std::invalid_argument(std::string(op) + ": axis out of range for shape " +
                                shape_str(shape));
  }
  AxisSplit s{1, shape[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < nd; ++i) s.inner *= shape[static_cast<size_t>(i)];
  return s;
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
  AxisSplit s = split_axis(a.shape(), axis, "softmax");
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.data();
  float* po = out.data();
  int len = static_cast<int>(s.len);
  if (len == 0) throw std::invalid_argument("softmax: axis has zero length in " + shape_str(a.shape()));
  std::vector<float> scratch_in(len), scratch_out(len);
  for (int64_t o = 0; o < s.outer; ++o) {
    for (int64_t in = 0; in < s.inner; ++in) {
      int64_t base = o * s.len * s.inner + in;
      if (s.inner == 1) {
        kern().softmax_row(pa + base, po + base, len);
      } else {
        for (int i = 0; i < len; ++i) scratch_in[i] = pa[base + i * s.inner];
        kern().softmax_row(scratch_in.data(), scratch_out.data(), len);
        for (int i = 0; i < len; ++i) po[base + i * s.inner] = scratch_out[i];
      }
    }
  }
  record_if_tracked({a}, out, [a, out, s, len](Tape& t) {
    const float* dout = t.adjoint_or_null(out);
    if (dout == nullptr || !t.tracks(a)) return;
    float* da = t.adjoint(a);
    const float* y = out.data();
    for (int64_t o = 0; o < s.outer; ++o) {
      for (int64_t in = 0; in < s.inner; ++in) {
        int64_t base = o * s.len * s.inner + in;
        double dotp = 0.0;
        for (int i = 0; i < len; ++i) {
          int64_t idx = base + i * s.inner;
          dotp += static_cast<double>(y[idx]) * static_cast<double>(dout[idx]);
        }
        for (int i = 0; i < len; ++i) {
          int64_t idx = base + i * s.inner;
          da[idx] += y[idx] * (dout[idx] - static_cast<float>(dotp));
        }
      }
    }
  });
  return out;
}

Tensor rms_norm(const Tensor& a, const Tensor& gain) {
  if (a.ndim() < 1) throw std::invalid_argument("rms_norm: input must have at least one axis");
  int d = a.dim(a.ndim() - 1);
  if (gain.ndim() != 1 || gain.dim(0) != d) {
    throw std::invalid_argument("rms_norm: gain shape " + shape_str(gain.shape()) +
                                " does not match last axis of " + shape_str(a.shape()));
  }
  constexpr double kEps = 1e-6;
  int64_t rows = a.numel() / d;
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.data();
  const float* pg = gain.data();
  float* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const float* x = pa + r * d;
    float* y = po + r * d;
    double ss = kern().dot(x, x, d);
    float rinv = static_cast<float>(1.0 / std::sqrt(ss / d + kEps));
    for (int j = 0; j < d; ++j) y[j] = x[j] * rinv * pg[j];
  }
  record_if_tracked({a, gain}, out, [a, gain, out, d, rows](Tape& t) {
    const float* dout = t.adjoint_or_null(out);
    if (dout == nullptr) return;
    const float* pa2 = a.data();
    const float* pg2 = gain.data();
    bool track_a = t.tracks(a);
    bool track_g = t.tracks(gain);
    float* da = track_a ? t.adjoint(a) : nullptr;
    float* dg = track_g ? t.adjoint(gain) : nullptr;
    for (int64_t r = 0; r < rows; ++r) {
      const float* x = pa2 + r * d;
      const float* dy = dout + r * d;
      double ss = kern().dot(x, x, d);
      double rinv = 1.0 / std::sqrt(ss / d + kEps);
      if (track_a) {
        double proj = 0.0;  // sum dy_j * gain_j * x_j
        for (int j = 0; j < d; ++j)
          proj += static_cast<double>(dy[j]) * pg2[j] * static_cast<double>(x[j]);
        double r3 = rinv * rinv * rinv / d;
        float* dar = da + r * d;
        for (int j = 0; j < d; ++j) {
          dar[j] += static_cast<float>(rinv * pg2[j] * dy[j] - r3 * proj * x[j]);
        }
      }
      if (track_g) {
        for (int j = 0; j < d; ++j) dg[j] += static_cast<float>(rinv * x[j] * dy[j]);
      }
    }
  });
  return out;
}

Tensor sum(const Tensor& a) {
  Tensor out = Tensor::zeros({1});
  int n = static_cast<int>(a.numel());
  const float* pa = a.data();
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += pa[i];
  out.data()[0] = static_cast<float>(s);
  record_if_tracked({a}, out, [a, out, n](Tape& t) {
    const float* dout = t.adjoint_or_null(out);
    if (dout == nullptr || !t.tracks(a)) return;
    float* da = t.adjoint(a);
    for (int i = 0; i < n; ++i) da[i] += dout[0];
  });
  return out;
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(a), 1.0f / static_cast<float>(a.numel()));
}

Tensor mean_squared_error(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "mean_squared_error");
  if (pred.numel() == 0) throw std::invalid_argument("mean_squared_error: empty tensors");
  int n = static_cast<int>(pred.numel());
  const float* pp = pred.data();
  const float* pt = target.data();
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    double d = static_cast<double>(pp[i]) - static_cast<double>(pt[i]);
    s += d * d;
  }
  Tensor out = Tensor::zeros({1});
  out.data()[0] = static_cast<float>(s / n);
  record_if_tracked({pred, target}, out, [pred, target, out, n](Tape& t) {
    const float* dout = t.adjoint_or_null(out);
    if (dout == nullptr) return;
    float c = 2.0f * dout[0] / static_cast<float>(n);
    const float* pp2 = pred.data();
    const float* pt2 = target.data();
    if (t.tracks(pred)) {
      float* dp = t.adjoint(pred);
      for (int i = 0; i < n; ++i) dp[i] += c * (pp2[i] - pt2[i]);
    }
    if (t.tracks(target)) {
      float* dt = t.adjoint(target);
      for (int i = 0; i < n; ++i) dt[i] -= c * (pp2[i] - pt2[i]);
    }
  });
  return out;
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  int64_t want = 1;
  for (int d : shape) want *= d;
  if (want != a.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                shape_str(shape));
  }
  Tensor out = Tensor::zeros(shape);
  out.data_vec() = a.data_vec();
  record_if_tracked({a}, out, [a, out](Tape& t) {
    const float* dout = t.adjoint_or_null(out);
    if (dout == nullptr || !t.tracks(a)) return;
    kern().axpy(1.0f, dout, t.adjoint(a), static_cast<int>(a.numel()));
  });
  return out;
}

namespace {

int64_t row_width(const Tensor& t) {
  int64_t w = 1;
  for (int i = 1; i < t.ndim(); ++i) w *= t.dim(i);
  return w;
}

}  // namespace

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no tensors given");
  int64_t width = row_width(parts[0]);
  int rows = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != parts[0].ndim() || row_width(p) != width) {
      throw std::invalid_argument("concat_rows: incompatible shapes " +
                                  shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    }
    rows += p.dim(0);
  }
  std::vector<int> shape = parts[0].shape();
  shape[0] = rows;
  Tensor out = Tensor::zeros(shape);
  float* po = out.data();
  int64_t off = 0;
  for (const Tensor& p : parts) {
    std::memcpy(po + off, p.data(), static_cast<size_t>(p.numel()) * sizeof(float));
    off += p.numel();
  }
  Tape* tape = Tape::active();
  if (tape != nullptr) {
    bool tracked = false;
    for (const Tensor& p : parts) tracked = tracked || tape->tracks(p);
    if (tracked) {
      out.impl()->producer_tape = tape->id();
      std::vector<Tensor> held = parts;
      tape->record([held, out](Tape& t) {
        const float* dout = t.adjoint_or_null(out);
        if (dout == nullptr) return;
        int64_t pos = 0;
        for (const Tensor& p : held) {
          if (t.tracks(p)) kern().axpy(1.0f, dout + pos, t.adjoint(p), static_cast<int>(p.numel()));
          pos += p.numel();
        }
      });
    }
  }
  return out;
}

Tensor slice_rows(const Tensor& a, int begin, int end) {
  if (a.ndim() < 1) throw std::invalid_argument("slice_rows: input must have at least one axis");
  if (begin < 0 || end < begin || end > a.dim(0)) {
    throw std::out_of_range("slice_rows: range [" + std::to_string(begin) + "," +
                            std::to_string(end) + ") out of bounds for shape " +
                            shape_str(a.shape()));
  }
  int64_t width = row_width(a);
  std::vector<int> shape = a.shape();
  shape[0] = end - begin;
  Tensor out = Tensor::zeros(shape);
  std::memcpy(out.data(), a.data() + begin * width,
              static_cast<size_t>(out.numel()) * sizeof(float));
  record_if_tracked({a}, out, [a, out, begin, width](Tape& t) {
    const float* dout = t.adjoint_or_null(out);
    if (dout == nullptr || !t.tracks(a)) return;
    kern().axpy(1.0f, dout, t.adjoint(a) + begin * width, static_cast<int>(out.numel()));
  });
  return out;
}

Tensor slice_cols(const Tensor& a, int begin, int end) {
  require_2d(a, "slice_cols", "input");
  if (begin < 0 || end < begin || end > a.dim(1)) {
    throw std::out_of_range("slice_cols: range [" + std::to_string(begin) + "," +
                            std::to_string(end) + ") out of bounds for shape " +
                            shape_str(a.shape()));
  }
  int m = a.dim(0), n = a.dim(1), w = end - begin;
  Tensor out = Tensor::zeros({m, w});
  const float* pa = a.data();
  float* po = out.data();
  for (int i = 0; i < m; ++i) {
    std::memcpy(po + static_cast<int64_t>(i) * w, pa + static_cast<int64_t>(i) * n + begin,
                static_cast<size_t>(w) * sizeof(float));
  }
  record_if_tracked({a}, out, [a, out, begin, m, n, w](Tape& t) {
    const float* dout = t.adjoint_or_null(out);
    if (dout == nullptr || !t.tracks(a)) return;
    float* da = t.adjoint(a);
    for (int i = 0; i < m; ++i) {
      kern().axpy(1.0f, dout + static_cast<int64_t>(i) * w,
                  da + static_cast<int64_t>(i) * n + begin, w);
    }
  });
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no tensors given");
  int m = parts[0].dim(0);
  int total = 0;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_cols", "input");
    if (p.dim(0) != m) {
      throw std::invalid_argument("concat_cols: row count mismatch " +
                                  shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    }
    total += p.dim(1);
  }
  Tensor out = Tensor::zeros({m, total});
  float* po = out.data();
  int off = 0;
  for (const Tensor& p : parts) {
    int w = p.dim(1);
    const float* pp = p.data();
    for (int i = 0; i < m; ++i) {
      std::memcpy(po + static_cast<int64_t>(i) * total + off, pp + static_cast<int64_t>(i) * w,
                  static_cast<size_t>(w) * sizeof(float));
    }
    off += w;
  }
  Tape* tape = Tape::active();
  if (tape != nullptr) {
    bool tracked = false;
    for (const Tensor& p : parts) tracked = tracked || tape->tracks(p);
    if (tracked) {
      out.impl()->producer_tape = tape->id();
      std::vector<Tensor> held = parts;
      tape->record([held, out, m, total](Tape& t) {
        const float* dout = t.adjoint_or_null(out);
        if (dout == nullptr) return;
        int pos = 0;
        for (const Tensor& p : held) {
          int w = p.dim(1);
          if (t.tracks(p)) {
            float* dp = t.adjoint(p);
            for (int i = 0; i < m; ++i) {
              kern().axpy(1.0f, dout + static_cast<int64_t>(i) * total + pos,
                          dp + static_cast<int64_t>(i) * w, w);
            }
          }
          pos += w;
        }
      });
    }
  }
  return out;
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  require_2d(table, "embedding", "table");
  int v = table.dim(0), d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw std::out_of_range("embedding: token id " + std::to_string(id) + " out of range [0," +
                              std::to_string(v) + ")");
    }
  }
  int l = static_cast<int>(ids.size());
  Tensor out = Tensor::zeros({l, d});
  float* po = out.data();
  const float* pt = table.data();
  for (int i = 0; i < l; ++i) {
    std::memcpy(po + static_cast<int64_t>(i) * d, pt + static_cast<int64_t>(ids[i]) * d,
                static_cast<size_t>(d) * sizeof(float));
  }
  record_if_tracked({table}, out, [table, out, ids, d, l](Tape& t) {
    const float* dout = t.adjoint_or_null(out);
    if (dout == nullptr || !t.tracks(table)) return;
    float* dt = t.adjoint(table);
    for (int i = 0; i < l; ++i) {
      kern().axpy(1.0f, dout + static_cast<int64_t>(i) * d,
                  dt + static_cast<int64_t>(ids[i]) * d, d);
    }
  });
  return out;
}

Tensor gather_linear(const Tensor& x, std::vector<int64_t> map, std::vector<int> out_shape) {
  int64_t want = 1;
  for (int d : out_shape) want *= d;
  if (want != static_cast<int64_t>(map.size())) {
    throw std::invalid_argument("gather_linear: map size " + std::to_string(map.size()) +
                                " does not match output shape " + shape_str(out_shape));
  }
  int64_t n = x.numel();
  for (int64_t idx : map) {
    if (idx < 0 || idx >= n) {
      throw std::out_of_range("gather_linear: index " + std::to_string(idx) +
                              " out of range for input with " + std::to_string(n) + " elements");
    }
  }
  Tensor out = Tensor::zeros(std::move(out_shape));
  const float* px = x.data();
  float* po = out.data();
  auto shared_map = std::make_shared<std::vector<int64_t>>(std::move(map));
  const auto& mref = *shared_map;
  for (size_t i = 0; i < mref.size(); ++i) po[i] = px[mref[i]];
  record_if_tracked({x}, out, [x, out, shared_map](Tape& t) {
    const float* dout = t.adjoint_or_null(out);
    if (dout == nullptr || !t.tracks(x)) return;
    float* dx = t.adjoint(x);
    const auto& m = *shared_map;
    for (size_t i = 0; i < m.size(); ++i) dx[m[i]] += dout[i];
  });
  return out;
}

namespace {

// Per-head slice of a [d]-length gain vector as a standalone [hd] tensor.
Tensor head_gain(const Tensor& gain, int heads, int hd, int h) {
  Tensor g2 = reshape(gain, {heads, hd});
  return reshape(slice_rows(g2, h, h + 1), {hd});
}

Tensor causal_mask(int l) {
  Tensor m = Tensor::zeros({l, l});
  float* p = m.data();
  for (int i = 0; i < l; ++i)
    for (int j = i + 1; j < l; ++j) p[i * l + j] = -1e30f;
  return m;
}

// In-place row RMS norm with the same arithmetic as rms_norm (null gain = 1).
}  // namespace

// Untaped attention forward: the same kernel calls in the same order as the
// recorded path in multi_head_attention, but on reused scratch instead of
// per-head tensors, so the output is bit-identical and inference avoids the
// allocation overhead (which dominates at router-sized heads).
void detail::rms_rows(const float* x, float* y, int64_t rows, int d, const float* gain) {
  constexpr double kEps = 1e-6;
  for (int64_t r = 0; r < rows; ++r) {
    const float* row = x + r * d;
    float* out = y + r * d;
    double ss = kern().dot(row, row, d);
    float rinv = static_cast<float>(1.0 / std::sqrt(ss / d + kEps));
    if (gain) {
      for (int j = 0; j < d; ++j) out[j] = row[j] * rinv * gain[j];
    } else {
      for (int j = 0; j < d; ++j) out[j] = row[j] * rinv;
    }
  }
}

void detail::attention_rows(const float* pq, const float* pk, const float* pv, int qr, int kr,
                            int heads, int hd, bool qk_norm, bool bidirectional,
                            const float* q_gain, const float* k_gain, float* po) {
  int d = heads * hd;
  float sc = 1.0f / std::sqrt(static_cast<float>(hd));
  static thread_local std::vector<float> qh, kh, vh, knt, scores, probs, outh;
  qh.resize(static_cast<size_t>(qr) * hd);
  kh.resize(static_cast<size_t>(kr) * hd);
  vh.resize(static_cast<size_t>(kr) * hd);
  knt.resize(static_cast<size_t>(hd) * kr);
  scores.resize(static_cast<size_t>(qr) * kr);
  probs.resize(static_cast<size_t>(qr) * kr);
  outh.resize(static_cast<size_t>(qr) * hd);
  for (int h = 0; h < heads; ++h) {
    for (int r = 0; r < qr; ++r) {
      std::memcpy(&qh[static_cast<size_t>(r) * hd], pq + static_cast<int64_t>(r) * d + h * hd,
                  static_cast<size_t>(hd) * sizeof(float));
    }
    for (int r = 0; r < kr; ++r) {
      std::memcpy(&kh[static_cast<size_t>(r) * hd], pk + static_cast<int64_t>(r) * d + h * hd,
                  static_cast<size_t>(hd) * sizeof(float));
      std::memcpy(&vh[static_cast<size_t>(r) * hd], pv + static_cast<int64_t>(r) * d + h * hd,
                  static_cast<size_t>(hd) * sizeof(float));
    }
    if (qk_norm) {
      detail::rms_rows(qh.data(), qh.data(), qr, hd, q_gain ? q_gain + h * hd : nullptr);
      detail::rms_rows(kh.data(), kh.data(), kr, hd, k_gain ? k_gain + h * hd : nullptr);
    }
    for (int r = 0; r < kr; ++r) {
      for (int j = 0; j < hd; ++j) knt[static_cast<size_t>(j) * kr + r] = kh[static_cast<size_t>(r) * hd + j];
    }
    kern().matmul_nn(qh.data(), knt.data(), scores.data(), qr, hd, kr, false);
    for (float& s : scores) s = s * sc;
    if (!bidirectional) {
      for (int i = 0; i < qr; ++i) {
        for (int j = 0; j < kr; ++j) {
          scores[static_cast<size_t>(i) * kr + j] += (j > i ? -1e30f : 0.0f);
        }
      }
    }
    for (int r = 0; r < qr; ++r) {
      kern().softmax_row(&scores[static_cast<size_t>(r) * kr], &probs[static_cast<size_t>(r) * kr], kr);
    }
    kern().matmul_nn(probs.data(), vh.data(), outh.data(), qr, kr, hd, false);
    for (int r = 0; r < qr; ++r) {
      std::memcpy(po + static_cast<int64_t>(r) * d + h * hd, &outh[static_cast<size_t>(r) * hd],
                  static_cast<size_t>(hd) * sizeof(float));
    }
  }
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                            bool qk_norm, bool bidirectional, const Tensor& q_gain,
                            const Tensor& k_gain) {
  require_2d(q, "multi_head_attention", "q");
  require_2d(k, "multi_head_attention", "k");
  require_2d(v, "multi_head_attention", "v");
  int d = q.dim(1);
  if (k.dim(1) != d || v.dim(1) != d) {
    throw std::invalid_argument("multi_head_attention: width mismatch q" + shape_str(q.shape()) +
                                " k" + shape_str(k.shape()) + " v" + shape_str(v.shape()));
  }
  if (k.dim(0) != v.dim(0)) {
    throw std::invalid_argument("multi_head_attention: key/value length mismatch k" +
                                shape_str(k.shape()) + " v" + shape_str(v.shape()));
  }
  if (heads <= 0 || d % heads != 0) {
    throw std::invalid_argument("multi_head_attention: width " + std::to_string(d) +
                                " not divisible by heads " + std::to_string(heads));
  }
  if (!bidirectional && q.dim(0) != k.dim(0)) {
    throw std::invalid_argument("multi_head_attention: causal attention requires equal q/k length, got q" +
                                shape_str(q.shape()) + " k" + shape_str(k.shape()));
  }
  int hd = d / heads;
  float sc = 1.0f / std::sqrt(static_cast<float>(hd));
  Tape* tp = Tape::active();
  if (tp == nullptr || !(tp->tracks(q) || tp->tracks(k) || tp->tracks(v) || tp->tracks(q_gain) ||
                         tp->tracks(k_gain))) {
    Tensor out = Tensor::zeros({q.dim(0), d});
    detail::attention_rows(q.data(), k.data(), v.data(), q.dim(0), k.dim(0), heads, hd, qk_norm,
                           bidirectional, q_gain.defined() ? q_gain.data() : nullptr,
                           k_gain.defined() ? k_gain.data() : nullptr, out.data());
    return out;
  }
  Tensor unit_gain;
  if (qk_norm && (!q_gain.defined() || !k_gain.defined())) unit_gain = Tensor::full({hd}, 1.0f);
  Tensor mask;
  if (!bidirectional) mask = causal_mask(q.dim(0));

  std::vector<Tensor> outs;
  outs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * hd, (h + 1) * hd);
    Tensor kh = slice_cols(k, h * hd, (h + 1) * hd);
    Tensor vh = slice_cols(v, h * hd, (h + 1) * hd);
    if (qk_norm) {
      Tensor qg = q_gain.defined() ? head_gain(q_gain, heads, hd, h) : unit_gain;
      Tensor kg = k_gain.defined() ? head_gain(k_gain, heads, hd, h) : unit_gain;
      qh = rms_norm(qh, qg);
      kh = rms_norm(kh, kg);
    }
    Tensor scores = scale(matmul(qh, transpose(kh)), sc);
    if (!bidirectional) scores = add(scores, mask);
    Tensor w = softmax(scores, -1);
    outs.push_back(matmul(w, vh));
  }
  return concat_cols(outs);
}

// ---- optimizer -------------------------------------------------------------

void OptimizerState::init(const std::vector<Tensor>& params, const AdamWConfig& config) {
  cfg = config;
  step_count = 0;
  m.clear();
  v.clear();
  for (const Tensor& p : params) {
    m.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
    v.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
  }
}

void adamw_step(std::vector<Tensor>& params, OptimizerState& state, float lr_scale) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("adamw_step: state holds " + std::to_string(state.m.size()) +
                                " slots but " + std::to_string(params.size()) +
                                " parameters were given");
  }
  state.step_count += 1;
  double bc1 = 1.0 - std::pow(static_cast<double>(state.cfg.beta1), static_cast<double>(state.step_count));
  double bc2 = 1.0 - std::pow(static_cast<double>(state.cfg.beta2), static_cast<double>(state.step_count));
  float lr = state.cfg.lr * lr_scale;
  float b1 = state.cfg.beta1, b2 = state.cfg.beta2;
  float inv_bc1 = static_cast<float>(1.0 / bc1);
  float inv_bc2 = static_cast<float>(1.0 / bc2);
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (state.m[i].size() != static_cast<size_t>(p.numel())) {
      throw std::invalid_argument("adamw_step: parameter " + std::to_string(i) +
                                  " size changed since state init");
    }
    float* pd = p.data();
    float* pm = state.m[i].data();
    float* pv = state.v[i].data();
    const float* pg = p.has_grad() ? p.impl()->grad.data() : nullptr;
    int64_t n = p.numel();
    for (int64_t j = 0; j < n; ++j) {
      float g = pg ? pg[j] : 0.0f;
      pd[j] -= lr * state.cfg.weight_decay * pd[j];
      pm[j] = b1 * pm[j] + (1.0f - b1) * g;
      pv[j] = b2 * pv[j] + (1.0f - b2) * g * g;
      float mhat = pm[j] * inv_bc1;
      float vhat = pv[j] * inv_bc2;
      pd[j] -= lr * mhat / (std::sqrt(vhat) + state.cfg.eps);
    }
  }
}

void zero_grads(std::vector<Tensor>& params) {
  for (Tensor& p : params) p.zero_grad();
}

}  // namespace mos
