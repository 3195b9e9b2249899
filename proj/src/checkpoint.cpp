#include "mos/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

namespace mos {

namespace {

constexpr char kMagic[8] = {'M', 'O', 'S', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kVersion = 1;

uint64_t fnv1a(const char* data, size_t n) {
  uint64_t h = 14695981039346656037ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ull;
  }
  return h;
}

// ---- buffer writer/reader -----------------------------------------------------

struct Writer {
  std::string buf;
  void bytes(const void* p, size_t n) { buf.append(static_cast<const char*>(p), n); }
  void u32(uint32_t v) { bytes(&v, 4); }
  void u64(uint64_t v) { bytes(&v, 8); }
  void i64(int64_t v) { bytes(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void floats(const float* p, size_t n) { bytes(p, n * sizeof(float)); }
};

struct Reader {
  const char* p;
  const char* end;
  [[noreturn]] void fail() const { throw std::runtime_error("checkpoint file is truncated"); }
  void bytes(void* out, size_t n) {
    if (static_cast<size_t>(end - p) < n) fail();
    std::memcpy(out, p, n);
    p += n;
  }
  uint32_t u32() {
    uint32_t v;
    bytes(&v, 4);
    return v;
  }
  uint64_t u64() {
    uint64_t v;
    bytes(&v, 8);
    return v;
  }
  int64_t i64() {
    int64_t v;
    bytes(&v, 8);
    return v;
  }
  std::string str() {
    uint32_t n = u32();
    if (static_cast<size_t>(end - p) < n) fail();
    std::string s(p, n);
    p += n;
    return s;
  }
  std::vector<float> floats(size_t n) {
    std::vector<float> v(n);
    bytes(v.data(), n * sizeof(float));
    return v;
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const RunConfig& cfg, uint64_t step,
                     const MosModel& model, const OptimizerState& opt) {
  if (opt.m.size() != opt.v.size()) {
    throw std::runtime_error("optimizer state has mismatched moment lists");
  }
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.u32(kVersion);
  w.str(serialize_config(cfg));
  w.u64(step);

  std::vector<NamedTensor> named = model.named_params();
  w.u32(static_cast<uint32_t>(named.size()));
  for (const NamedTensor& nt : named) {
    w.str(nt.name);
    w.u32(static_cast<uint32_t>(nt.value.ndim()));
    for (int d = 0; d < nt.value.ndim(); ++d) {
      int32_t dim = nt.value.dim(d);
      w.bytes(&dim, 4);
    }
    w.floats(nt.value.data(), static_cast<size_t>(nt.value.numel()));
  }

  w.i64(opt.step_count);
  w.u32(static_cast<uint32_t>(opt.m.size()));
  for (size_t i = 0; i < opt.m.size(); ++i) {
    if (opt.m[i].size() != opt.v[i].size()) {
      throw std::runtime_error("optimizer state has mismatched moment lists");
    }
    w.u64(opt.m[i].size());
    w.floats(opt.m[i].data(), opt.m[i].size());
    w.floats(opt.v[i].data(), opt.v[i].size());
  }

  w.u64(fnv1a(w.buf.data(), w.buf.size()));

  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint file: " + tmp);
    out.write(w.buf.data(), static_cast<std::streamsize>(w.buf.size()));
    if (!out) throw std::runtime_error("short write to checkpoint file: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw std::runtime_error("cannot rename checkpoint into place: " + path);
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint file: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (buf.size() < sizeof(kMagic) + 4 + 8) throw std::runtime_error("checkpoint file is truncated");
  if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path);
  }
  uint64_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
  if (fnv1a(buf.data(), buf.size() - 8) != stored) {
    throw std::runtime_error("checkpoint checksum mismatch (corrupt file): " + path);
  }

  Reader r{buf.data() + sizeof(kMagic), buf.data() + buf.size() - 8};
  uint32_t version = r.u32();
  if (version != kVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }

  Checkpoint ckpt;
  ckpt.config = parse_config(r.str());
  ckpt.step = r.u64();

  uint32_t count = r.u32();
  ckpt.tensors.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    NamedTensor nt;
    nt.name = r.str();
    uint32_t ndim = r.u32();
    std::vector<int> shape(ndim);
    for (uint32_t d = 0; d < ndim; ++d) {
      int32_t dim;
      r.bytes(&dim, 4);
      shape[d] = dim;
    }
    nt.value = Tensor::zeros(shape);
    r.bytes(nt.value.data(), static_cast<size_t>(nt.value.numel()) * sizeof(float));
    ckpt.tensors.push_back(std::move(nt));
  }

  ckpt.opt_step_count = r.i64();
  uint32_t slots = r.u32();
  ckpt.opt_m.reserve(slots);
  ckpt.opt_v.reserve(slots);
  for (uint32_t i = 0; i < slots; ++i) {
    uint64_t n = r.u64();
    ckpt.opt_m.push_back(r.floats(n));
    ckpt.opt_v.push_back(r.floats(n));
  }
  if (r.p != r.end) throw std::runtime_error("checkpoint has trailing bytes: " + path);
  return ckpt;
}

void restore_checkpoint(const Checkpoint& ckpt, MosModel& model, OptimizerState& opt) {
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const NamedTensor& nt : ckpt.tensors) by_name[nt.name] = &nt.value;

  std::vector<NamedTensor> named = model.named_params();
  if (named.size() != ckpt.tensors.size()) {
    throw std::runtime_error("checkpoint holds " + std::to_string(ckpt.tensors.size()) +
                             " tensors, model expects " + std::to_string(named.size()));
  }
  for (NamedTensor& nt : named) {
    auto it = by_name.find(nt.name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint is missing tensor " + nt.name);
    const Tensor& src = *it->second;
    if (src.shape() != nt.value.shape()) {
      throw std::runtime_error("checkpoint tensor " + nt.name + " has the wrong shape");
    }
    std::memcpy(nt.value.data(), src.data(), static_cast<size_t>(src.numel()) * sizeof(float));
  }

  std::vector<Tensor> trainable = model.trainable_params();
  if (!ckpt.opt_m.empty() && ckpt.opt_m.size() != trainable.size()) {
    throw std::runtime_error("checkpoint optimizer state holds " +
                             std::to_string(ckpt.opt_m.size()) + " slots, model expects " +
                             std::to_string(trainable.size()));
  }
  for (size_t i = 0; i < ckpt.opt_m.size(); ++i) {
    if (ckpt.opt_m[i].size() != static_cast<size_t>(trainable[i].numel())) {
      throw std::runtime_error("checkpoint optimizer slot " + std::to_string(i) +
                               " has the wrong size");
    }
  }
  opt.cfg = ckpt.config.train.optimizer;
  opt.step_count = ckpt.opt_step_count;
  opt.m = ckpt.opt_m;
  opt.v = ckpt.opt_v;
}

MosModel model_from_checkpoint(const Checkpoint& ckpt, OptimizerState* opt) {
  MosModel model(ckpt.config.model, ckpt.config.seed);
  OptimizerState local;
  restore_checkpoint(ckpt, model, opt ? *opt : local);
  return model;
}

}  // namespace mos
