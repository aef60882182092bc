#include "bat/image.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace bat {

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& why) {
  throw std::runtime_error("cannot parse '" + path + "': " + why);
}

// Reads one PNM header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& in, const std::string& path) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) continue;
    tok.push_back(static_cast<char>(c));
    while ((c = in.get()) != EOF && !std::isspace(c) && c != '#') tok.push_back(static_cast<char>(c));
    if (c == '#') in.unget();
    return tok;
  }
  fail(path, "truncated header");
}

struct PnmHeader {
  std::string magic;
  int width = 0;
  int height = 0;
  int maxval = 0;
};

PnmHeader read_header(std::istream& in, const std::string& path, const char* expect_magic) {
  PnmHeader h;
  h.magic = next_token(in, path);
  if (h.magic != expect_magic) fail(path, "expected " + std::string(expect_magic) + " magic, got '" + h.magic + "'");
  try {
    h.width = std::stoi(next_token(in, path));
    h.height = std::stoi(next_token(in, path));
    h.maxval = std::stoi(next_token(in, path));
  } catch (const std::exception&) {
    fail(path, "non-numeric header field");
  }
  if (h.width <= 0 || h.height <= 0) fail(path, "non-positive dimensions");
  if (h.maxval != 255) fail(path, "only maxval 255 supported");
  return h;
}

std::vector<unsigned char> read_payload(std::istream& in, const std::string& path, std::size_t n) {
  std::vector<unsigned char> bytes(n);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) fail(path, "truncated pixel data");
  return bytes;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  return out;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
  return in;
}

}  // namespace

void write_mask_pgm(const BinaryMask& mask, const std::string& path) {
  auto out = open_out(path);
  out << "P5\n" << mask.width << " " << mask.height << "\n255\n";
  std::vector<unsigned char> bytes(mask.v.size());
  for (std::size_t i = 0; i < mask.v.size(); ++i) bytes[i] = mask.v[i] ? 255 : 0;
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

BinaryMask read_mask_pgm(const std::string& path) {
  auto in = open_in(path);
  PnmHeader h = read_header(in, path, "P5");
  auto bytes = read_payload(in, path, static_cast<std::size_t>(h.width) * h.height);
  BinaryMask mask(h.height, h.width);
  for (std::size_t i = 0; i < bytes.size(); ++i) mask.v[i] = bytes[i] >= 128 ? 1 : 0;
  return mask;
}

void write_prob_pgm(const Tensor& prob, const std::string& path) {
  if (prob.dims.size() != 2) throw std::invalid_argument("probability map must be 2-D");
  auto out = open_out(path);
  out << "P5\n" << prob.dim(1) << " " << prob.dim(0) << "\n255\n";
  std::vector<unsigned char> bytes(prob.size());
  for (std::size_t i = 0; i < prob.size(); ++i) {
    double x = prob.v[i];
    if (x < 0.0) x = 0.0;
    if (x > 1.0) x = 1.0;
    bytes[i] = static_cast<unsigned char>(std::lround(x * 255.0));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Tensor read_prob_pgm(const std::string& path) {
  auto in = open_in(path);
  PnmHeader h = read_header(in, path, "P5");
  auto bytes = read_payload(in, path, static_cast<std::size_t>(h.width) * h.height);
  Tensor prob{static_cast<std::size_t>(h.height), static_cast<std::size_t>(h.width)};
  for (std::size_t i = 0; i < bytes.size(); ++i) prob.v[i] = bytes[i] / 255.0;
  return prob;
}

void write_image_ppm(const ImageTensor& img, const std::string& path) {
  if (img.dims.size() != 3 || img.dim(2) != 3) throw std::invalid_argument("image must be HxWx3");
  auto out = open_out(path);
  out << "P6\n" << img.dim(1) << " " << img.dim(0) << "\n255\n";
  std::vector<unsigned char> bytes(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    double x = img.v[i];
    if (x < 0.0) x = 0.0;
    if (x > 1.0) x = 1.0;
    bytes[i] = static_cast<unsigned char>(std::lround(x * 255.0));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

ImageTensor read_image_ppm(const std::string& path) {
  auto in = open_in(path);
  PnmHeader h = read_header(in, path, "P6");
  auto bytes = read_payload(in, path, static_cast<std::size_t>(h.width) * h.height * 3);
  ImageTensor img{static_cast<std::size_t>(h.height), static_cast<std::size_t>(h.width), 3};
  for (std::size_t i = 0; i < bytes.size(); ++i) img.v[i] = bytes[i] / 255.0;
  return img;
}

}  // namespace bat
