#pragma once

// Binary netpbm codecs. Images are [3, h, w] tensors in [-1, 1]; 8-bit channel
// c maps to 2 * c / 255 - 1 on read and round((v + 1) / 2 * 255) on write.

#include <cctype>
#include <fstream>
#include <string>

#include "atx/tensor.hpp"
#include "atx/tnsr.hpp"

namespace atx {

namespace detail {

inline unsigned char quantize(double v) {
  const double c = std::round((v + 1.0) * 0.5 * 255.0);
  return static_cast<unsigned char>(std::clamp(c, 0.0, 255.0));
}

inline double dequantize(unsigned char c) { return 2.0 * (static_cast<double>(c) / 255.0) - 1.0; }

// Reads the next header integer, skipping whitespace and '#' comments.
inline long read_header_int(std::istream& is, const char* what) {
  int ch = is.peek();
  while (ch != EOF) {
    if (ch == '#') {
      std::string skip;
      std::getline(is, skip);
    } else if (std::isspace(ch)) {
      is.get();
    } else {
      break;
    }
    ch = is.peek();
  }
  long v = -1;
  if (!(is >> v) || v < 0) throw FormatError(std::string("netpbm: malformed header field '") + what + "'");
  return v;
}

struct Netpbm {
  int channels = 0;
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<unsigned char> bytes;
};

inline Netpbm read_netpbm(std::istream& is) {
  char magic[2] = {0, 0};
  if (!is.read(magic, 2) || magic[0] != 'P' || (magic[1] != '6' && magic[1] != '5')) {
    throw FormatError("netpbm: expected P6 or P5 magic");
  }
  Netpbm img;
  img.channels = magic[1] == '6' ? 3 : 1;
  img.width = static_cast<std::size_t>(read_header_int(is, "width"));
  img.height = static_cast<std::size_t>(read_header_int(is, "height"));
  const long maxval = read_header_int(is, "maxval");
  if (maxval != 255) throw FormatError("netpbm: maxval must be 255, got " + std::to_string(maxval));
  if (img.width == 0 || img.height == 0) throw FormatError("netpbm: empty image");
  if (!std::isspace(is.get())) throw FormatError("netpbm: missing whitespace after maxval");
  img.bytes.resize(img.width * img.height * static_cast<std::size_t>(img.channels));
  if (!is.read(reinterpret_cast<char*>(img.bytes.data()), static_cast<std::streamsize>(img.bytes.size()))) {
    throw FormatError("netpbm: truncated payload");
  }
  return img;
}

inline void write_netpbm(std::ostream& os, const Netpbm& img) {
  os << (img.channels == 3 ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.bytes.data()), static_cast<std::streamsize>(img.bytes.size()));
  if (!os) throw FormatError("netpbm: write failed");
}

}  // namespace detail

// Decodes P6 to [3, h, w] and P5 to [1, h, w].
inline Tensor read_image(std::istream& is) {
  const detail::Netpbm img = detail::read_netpbm(is);
  const std::size_t c = static_cast<std::size_t>(img.channels), h = img.height, w = img.width;
  std::vector<double> v(c * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) v[(ch * h + y) * w + x] = detail::dequantize(img.bytes[(y * w + x) * c + ch]);
  return Tensor(Shape{c, h, w}, std::move(v));
}

inline Tensor ppm_read(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  return read_image(is);
}

// Writes [3, h, w] as P6, or [1, h, w] / [h, w] as P5.
inline void write_image(std::ostream& os, const Tensor& image) {
  detail::Netpbm img;
  if (image.ndim() == 3 && (image.dim(0) == 3 || image.dim(0) == 1)) {
    img.channels = static_cast<int>(image.dim(0));
    img.height = image.dim(1);
    img.width = image.dim(2);
  } else if (image.ndim() == 2) {
    img.channels = 1;
    img.height = image.dim(0);
    img.width = image.dim(1);
  } else {
    throw ShapeError("write_image: expected [3, h, w], [1, h, w] or [h, w], got " + shape_str(image.shape()));
  }
  const std::size_t c = static_cast<std::size_t>(img.channels), h = img.height, w = img.width;
  img.bytes.resize(c * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) img.bytes[(y * w + x) * c + ch] = detail::quantize(image[(ch * h + y) * w + x]);
  detail::write_netpbm(os, img);
}

inline void ppm_write(const std::string& path, const Tensor& image) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  write_image(os, image);
}

// Binary masks [h, w] in {0, 1} <-> P5 with 0 = background, 255 = foreground.
inline void mask_write(const std::string& path, const Tensor& mask) {
  if (mask.ndim() != 2) throw ShapeError("mask_write: expected [h, w], got " + shape_str(mask.shape()));
  detail::Netpbm img;
  img.channels = 1;
  img.height = mask.dim(0);
  img.width = mask.dim(1);
  img.bytes.resize(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) img.bytes[i] = mask[i] >= 0.5 ? 255 : 0;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  detail::write_netpbm(os, img);
}

inline Tensor mask_read(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  const detail::Netpbm img = detail::read_netpbm(is);
  if (img.channels != 1) throw FormatError("mask_read: expected a P5 (greyscale) file");
  std::vector<double> v(img.bytes.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = img.bytes[i] >= 128 ? 1.0 : 0.0;
  return Tensor(Shape{img.height, img.width}, std::move(v));
}

}  // namespace atx
