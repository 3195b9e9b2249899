#include "mos/image_io.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>

namespace mos {

namespace {

uint8_t to_byte(float v) {
  float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
  return static_cast<uint8_t>(std::lround(c * 255.0f));
}

void write_pnm(const std::string& path, const Tensor& image, int channels, const char* magic) {
  int h = image.dim(0), w = image.dim(1);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("image write: cannot open '" + path + "'");
  out << magic << "\n" << w << " " << h << "\n255\n";
  const float* p = image.data();
  std::vector<uint8_t> bytes(static_cast<size_t>(h) * w * channels);
  for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = to_byte(p[i]);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("image write: short write to '" + path + "'");
}

Tensor read_pnm(const std::string& path, int channels, const char* magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("image read: cannot open '" + path + "'");
  std::string header;
  in >> header;
  if (header != magic) {
    throw std::runtime_error("image read: '" + path + "' is not a " + magic + " file (got '" +
                             header + "')");
  }
  int w = 0, h = 0, maxval = 0;
  in >> w >> h >> maxval;
  if (!in || w <= 0 || h <= 0 || maxval != 255) {
    throw std::runtime_error("image read: bad header in '" + path + "'");
  }
  in.get();  // single whitespace after maxval
  std::vector<uint8_t> bytes(static_cast<size_t>(h) * w * channels);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw std::runtime_error("image read: truncated pixel data in '" + path + "'");
  }
  Tensor img = channels == 3 ? Tensor::zeros({h, w, 3}) : Tensor::zeros({h, w});
  float* p = img.data();
  for (size_t i = 0; i < bytes.size(); ++i) p[i] = static_cast<float>(bytes[i]) / 255.0f;
  return img;
}

}  // namespace

void write_ppm(const std::string& path, const Tensor& image) {
  if (image.ndim() != 3 || image.dim(2) != 3) {
    throw std::invalid_argument("write_ppm: image shape " + shape_str(image.shape()) +
                                ", expected [H W 3]");
  }
  write_pnm(path, image, 3, "P6");
}

Tensor read_ppm(const std::string& path) { return read_pnm(path, 3, "P6"); }

void write_pgm(const std::string& path, const Tensor& image) {
  if (image.ndim() != 2) {
    throw std::invalid_argument("write_pgm: image shape " + shape_str(image.shape()) +
                                ", expected [H W]");
  }
  write_pnm(path, image, 1, "P5");
}

Tensor read_pgm(const std::string& path) { return read_pnm(path, 1, "P5"); }

}  // namespace mos
