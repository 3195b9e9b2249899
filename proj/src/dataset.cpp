#include "mos/dataset.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include "mos/codec.hpp"

namespace mos {

namespace {

constexpr char kMagic[8] = {'M', 'O', 'S', 'D', 'S', 'E', 'T', '1'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const char* what) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error(std::string("dataset load: truncated while reading ") + what);
  return v;
}

}  // namespace

std::vector<Sample> make_dataset(int size, uint64_t seed) {
  if (size < 0) throw std::invalid_argument("make_dataset: negative size");
  std::vector<Sample> out;
  out.reserve(static_cast<size_t>(size));
  for (int i = 0; i < size; ++i) {
    Pcg32 rng = derive_rng(seed, rng_tag::kDataset, static_cast<uint64_t>(i));
    Sample s;
    s.scene = sample_scene(rng);
    s.caption = caption_of(s.scene);
    s.latent = encode_latent(render_scene(s.scene));
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<EditSample> make_edit_dataset(int size, uint64_t seed) {
  if (size < 0) throw std::invalid_argument("make_edit_dataset: negative size");
  std::vector<EditSample> out;
  out.reserve(static_cast<size_t>(size));
  for (int i = 0; i < size; ++i) {
    Pcg32 rng = derive_rng(seed, rng_tag::kDataset, static_cast<uint64_t>(i), 1);
    EditSample s;
    s.source = sample_scene(rng);
    s.instruction = sample_edit_instruction(s.source, rng);
    s.target = apply_edit(s.source, s.instruction);
    s.source_latent = encode_latent(render_scene(s.source));
    s.target_latent = encode_latent(render_scene(s.target));
    out.push_back(std::move(s));
  }
  return out;
}

void save_dataset(const std::string& path, const std::vector<Sample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("dataset save: cannot open '" + path + "'");
  out.write(kMagic, sizeof(kMagic));
  put(out, kVersion);
  put(out, static_cast<uint32_t>(samples.size()));
  for (const Sample& s : samples) {
    put(out, static_cast<uint32_t>(s.caption.size()));
    for (int id : s.caption) put(out, static_cast<int32_t>(id));
    put(out, static_cast<uint32_t>(s.scene.entities.size()));
    for (const Entity& e : s.scene.entities) {
      put(out, static_cast<uint8_t>(e.shape));
      put(out, static_cast<uint8_t>(e.color));
      put(out, static_cast<uint8_t>(e.row));
      put(out, static_cast<uint8_t>(e.col));
    }
    out.write(reinterpret_cast<const char*>(s.latent.data()),
              static_cast<std::streamsize>(s.latent.numel() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("dataset save: short write to '" + path + "'");
}

std::vector<Sample> load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("dataset load: cannot open '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("dataset load: '" + path + "' is not a dataset cache");
  }
  uint32_t version = get<uint32_t>(in, "version");
  if (version != kVersion) {
    throw std::runtime_error("dataset load: unsupported version " + std::to_string(version));
  }
  uint32_t count = get<uint32_t>(in, "count");
  std::vector<Sample> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    Sample s;
    uint32_t clen = get<uint32_t>(in, "caption length");
    s.caption.resize(clen);
    for (uint32_t j = 0; j < clen; ++j) s.caption[j] = get<int32_t>(in, "caption id");
    uint32_t ecount = get<uint32_t>(in, "entity count");
    for (uint32_t j = 0; j < ecount; ++j) {
      Entity e;
      e.shape = static_cast<Shape>(get<uint8_t>(in, "shape"));
      e.color = static_cast<Color>(get<uint8_t>(in, "color"));
      e.row = get<uint8_t>(in, "row");
      e.col = get<uint8_t>(in, "col");
      s.scene.entities.push_back(e);
    }
    s.latent = Tensor::zeros({kLatentSize, kLatentSize, kLatentChannels});
    in.read(reinterpret_cast<char*>(s.latent.data()),
            static_cast<std::streamsize>(s.latent.numel() * sizeof(float)));
    if (!in) throw std::runtime_error("dataset load: truncated latent in '" + path + "'");
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace mos
