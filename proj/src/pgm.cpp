#include "hcf/pgm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace hcf {

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

std::size_t header_number(std::istream& in, const std::string& path) {
  const std::string tok = header_token(in);
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), ::isdigit)) throw IoError(path + ": malformed PGM header");
  return std::stoul(tok);
}

}  // namespace

GrayImage read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path);
  if (header_token(in) != "P5") throw IoError(path + ": not a binary PGM (P5) file");
  GrayImage img;
  img.width = header_number(in, path);
  img.height = header_number(in, path);
  const std::size_t maxval = header_number(in, path);
  if (img.width == 0 || img.height == 0 || maxval == 0 || maxval > 65535) throw IoError(path + ": bad PGM header");
  img.maxval = static_cast<std::uint16_t>(maxval);
  const std::size_t n = img.width * img.height;
  const std::size_t bytes = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(n * bytes);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw IoError(path + ": truncated pixel data");
  img.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    img.pixels[i] = bytes == 1 ? raw[i] : static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
  return img;
}

void write_pgm(const std::string& path, const GrayImage& image) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write image " + path);
  out << "P5\n" << image.width << " " << image.height << "\n" << image.maxval << "\n";
  for (std::uint16_t p : image.pixels) {
    if (image.maxval > 255) out.put(static_cast<char>(p >> 8));
    out.put(static_cast<char>(p & 0xFF));
  }
  if (!out) throw IoError("failed while writing " + path);
}

Tensor image_to_tensor(const GrayImage& image) {
  std::vector<double> v(image.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(image.pixels[i]) / image.maxval;
  return Tensor::from_data(Shape{1, image.height, image.width}, std::move(v));
}

GrayImage tensor_to_image(const Tensor& t) {
  const Shape& s = t.shape();
  GrayImage img;
  img.height = s[s.rank() - 2];
  img.width = s[s.rank() - 1];
  img.maxval = 255;
  const auto d = t.data();
  img.pixels.resize(img.width * img.height);
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    img.pixels[i] = static_cast<std::uint16_t>(std::lround(std::clamp(d[i], 0.0, 1.0) * 255.0));
  return img;
}

}  // namespace hcf
