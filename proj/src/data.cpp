#include "bat/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace bat::data {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kMinCoverage = 0.02;
constexpr double kMaxCoverage = 0.70;
constexpr int kMaxRetries = 100;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finalizer over (seed, index)
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

double quantize8(double v) {
  if (v < 0.0) v = 0.0;
  if (v > 1.0) v = 1.0;
  return std::nearbyint(v * 255.0) / 255.0;
}

struct Tones {
  double bg[3];
  double lesion[3];
  double noise_amp;
};

double contrast_gap(Contrast c) {
  switch (c) {
    case Contrast::low: return 0.08;
    case Contrast::medium: return 0.18;
    case Contrast::high: return 0.35;
  }
  return 0.18;
}

Tones draw_tones(Rng& rng, Contrast contrast) {
  Tones t{};
  const double base[3] = {0.78, 0.62, 0.54};  // skin-ish
  for (int c = 0; c < 3; ++c) t.bg[c] = base[c] + rng.uniform(-0.05, 0.05);
  const double gap = contrast_gap(contrast);
  const double hue[3] = {1.0, 1.15, 1.25};  // lesions skew brown
  for (int c = 0; c < 3; ++c) t.lesion[c] = t.bg[c] - gap * hue[c];
  t.noise_amp = 0.02;
  return t;
}

void draw_hair_arcs(ImageTensor& img, Rng& rng, int count, int side) {
  for (int a = 0; a < count; ++a) {
    const double cy = rng.uniform(-0.2, 1.2) * side;
    const double cx = rng.uniform(-0.2, 1.2) * side;
    const double radius = rng.uniform(0.3, 1.2) * side;
    const double start = rng.uniform(0.0, 2.0 * kPi);
    const double span = rng.uniform(0.5, 1.8);
    const double tone = rng.uniform(0.06, 0.22);
    const int steps = std::max(8, static_cast<int>(radius * span * 2.0));
    for (int s = 0; s <= steps; ++s) {
      const double th = start + span * s / steps;
      const int y = static_cast<int>(std::lround(cy + radius * std::sin(th)));
      const int x = static_cast<int>(std::lround(cx + radius * std::cos(th)));
      if (y < 0 || y >= side || x < 0 || x >= side) continue;
      for (int c = 0; c < 3; ++c)
        img(static_cast<std::size_t>(y), static_cast<std::size_t>(x), static_cast<std::size_t>(c)) = tone;
    }
  }
}

}  // namespace

Contrast contrast_from_string(const std::string& s) {
  if (s == "low") return Contrast::low;
  if (s == "medium") return Contrast::medium;
  if (s == "high") return Contrast::high;
  throw std::invalid_argument("unknown contrast '" + s + "' (expected low|medium|high)");
}

std::string contrast_to_string(Contrast c) {
  switch (c) {
    case Contrast::low: return "low";
    case Contrast::medium: return "medium";
    case Contrast::high: return "high";
  }
  return "medium";
}

ShapeParams draw_shape(Rng& rng, int side, double roughness) {
  ShapeParams p;
  p.cy = rng.uniform(0.35, 0.65) * side;
  p.cx = rng.uniform(0.35, 0.65) * side;
  p.ra = rng.uniform(0.12, 0.38) * side;
  p.rb = rng.uniform(0.12, 0.38) * side;
  p.phi = rng.uniform(0.0, kPi);
  p.roughness = roughness;
  for (int m = 2; m <= 6; ++m) {
    p.fa.push_back(rng.uniform(-1.0, 1.0) / m);
    p.fb.push_back(rng.uniform(-1.0, 1.0) / m);
  }
  return p;
}

BinaryMask rasterize_lesion(const ShapeParams& shape, int side) {
  BinaryMask mask(side, side);
  for (int row = 0; row < side; ++row) {
    for (int col = 0; col < side; ++col) {
      const double dy = row - shape.cy;
      const double dx = col - shape.cx;
      const double rho = std::hypot(dx, dy);
      const double theta = std::atan2(dy, dx);
      const double psi = theta - shape.phi;
      const double cs = std::cos(psi), sn = std::sin(psi);
      const double er = shape.ra * shape.rb / std::sqrt(shape.rb * shape.rb * cs * cs + shape.ra * shape.ra * sn * sn);
      double mod = 1.0;
      for (std::size_t m = 0; m < shape.fa.size(); ++m) {
        const double k = static_cast<double>(m + 2);
        mod += shape.roughness * (shape.fa[m] * std::cos(k * theta) + shape.fb[m] * std::sin(k * theta));
      }
      if (mod < 0.25) mod = 0.25;  // keep the radius positive
      if (rho <= er * mod) mask.at(row, col) = 1;
    }
  }
  return mask;
}

Sample generate_sample(const SyntheticSpec& spec, int index) {
  if (index < 0 || index >= spec.count) throw std::invalid_argument("sample index out of range");
  if (spec.image_side < 16 || spec.image_side % 16 != 0)
    throw std::invalid_argument("image_side must be a positive multiple of 16");
  Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(index)));

  const int side = spec.image_side;
  const double area = static_cast<double>(side) * side;
  BinaryMask mask;
  bool ok = false;
  for (int attempt = 0; attempt < kMaxRetries; ++attempt) {
    ShapeParams shape = draw_shape(rng, side, spec.boundary_roughness);
    mask = rasterize_lesion(shape, side);
    const double coverage = static_cast<double>(mask.count()) / area;
    if (coverage >= kMinCoverage && coverage <= kMaxCoverage) {
      ok = true;
      break;
    }
  }
  if (!ok)
    throw std::runtime_error("sample generation failed: no admissible mask after " + std::to_string(kMaxRetries) +
                             " attempts");

  const Tones tones = draw_tones(rng, spec.contrast);
  ImageTensor img{static_cast<std::size_t>(side), static_cast<std::size_t>(side), 3};
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const bool inside = mask.at(y, x) != 0;
      for (int c = 0; c < 3; ++c) {
        const double tone = inside ? tones.lesion[c] : tones.bg[c];
        img(static_cast<std::size_t>(y), static_cast<std::size_t>(x), static_cast<std::size_t>(c)) =
            tone + rng.uniform(-tones.noise_amp, tones.noise_amp);
      }
    }
  draw_hair_arcs(img, rng, spec.hair_density, side);
  for (double& v : img.v) v = quantize8(v);

  std::ostringstream id;
  id << "s" << std::setw(5) << std::setfill('0') << index;
  return Sample{std::move(img), std::move(mask), id.str()};
}

std::vector<Sample> generate_samples(const SyntheticSpec& spec) {
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(spec.count));
  for (int i = 0; i < spec.count; ++i) out.push_back(generate_sample(spec, i));
  return out;
}

namespace {

std::uint64_t hash_file(const fs::path& path, std::uint64_t h) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for hashing");
  char buf[4096];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
    h = fnv1a64(reinterpret_cast<const unsigned char*>(buf), static_cast<std::size_t>(in.gcount()), h);
  return h;
}

std::string hash_to_hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

nlohmann::ordered_json spec_to_json(const SyntheticSpec& spec) {
  nlohmann::ordered_json j;
  j["seed"] = spec.seed;
  j["count"] = spec.count;
  j["image_side"] = spec.image_side;
  j["contrast"] = contrast_to_string(spec.contrast);
  j["hair_density"] = spec.hair_density;
  j["boundary_roughness"] = spec.boundary_roughness;
  return j;
}

SyntheticSpec spec_from_json(const nlohmann::json& j) {
  SyntheticSpec spec;
  spec.seed = j.at("seed").get<std::uint64_t>();
  spec.count = j.at("count").get<int>();
  spec.image_side = j.at("image_side").get<int>();
  spec.contrast = contrast_from_string(j.at("contrast").get<std::string>());
  spec.hair_density = j.at("hair_density").get<int>();
  spec.boundary_roughness = j.at("boundary_roughness").get<double>();
  return spec;
}

}  // namespace

void write_dataset(const SyntheticSpec& spec, const std::string& dir) {
  const fs::path root(dir);
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");

  nlohmann::ordered_json manifest;
  manifest["spec"] = spec_to_json(spec);
  manifest["count"] = spec.count;
  auto samples = nlohmann::ordered_json::array();

  std::uint64_t h = 1469598103934665603ull;
  for (int i = 0; i < spec.count; ++i) {
    Sample s = generate_sample(spec, i);
    const std::string image_rel = "images/" + s.id + ".ppm";
    const std::string mask_rel = "masks/" + s.id + ".pgm";
    write_image_ppm(s.image, (root / image_rel).string());
    write_mask_pgm(s.mask, (root / mask_rel).string());
    h = hash_file(root / image_rel, h);
    h = hash_file(root / mask_rel, h);
    samples.push_back({{"id", s.id}, {"image", image_rel}, {"mask", mask_rel}});
  }
  manifest["samples"] = std::move(samples);
  manifest["hash"] = "fnv1a64:" + hash_to_hex(h);

  std::ofstream out(root / "manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest in '" + dir + "'");
  out << manifest.dump(2) << "\n";
}

Dataset read_dataset(const std::string& dir) {
  const fs::path root(dir);
  const fs::path manifest_path = root / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open '" + manifest_path.string() + "'");
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("cannot parse '" + manifest_path.string() + "': " + e.what());
  }

  Dataset ds;
  ds.spec = spec_from_json(manifest.at("spec"));
  const auto& samples = manifest.at("samples");
  if (manifest.at("count").get<std::size_t>() != samples.size())
    throw std::runtime_error("manifest count does not match sample list in '" + manifest_path.string() + "'");

  std::uint64_t h = 1469598103934665603ull;
  for (const auto& e : samples) {
    Sample s;
    s.id = e.at("id").get<std::string>();
    const fs::path image_path = root / e.at("image").get<std::string>();
    const fs::path mask_path = root / e.at("mask").get<std::string>();
    if (!fs::exists(image_path) || !fs::exists(mask_path))
      throw std::runtime_error("manifest names missing file for sample '" + s.id + "'");
    h = hash_file(image_path, h);
    h = hash_file(mask_path, h);
    s.image = read_image_ppm(image_path.string());
    s.mask = read_mask_pgm(mask_path.string());
    if (s.mask.height != static_cast<int>(s.image.dim(0)) || s.mask.width != static_cast<int>(s.image.dim(1)))
      throw std::runtime_error("image/mask size mismatch for sample '" + s.id + "'");
    ds.samples.push_back(std::move(s));
  }
  const std::string expect = manifest.at("hash").get<std::string>();
  const std::string got = "fnv1a64:" + hash_to_hex(h);
  if (expect != got)
    throw std::runtime_error("dataset content hash mismatch in '" + dir + "' (expected " + expect + ", got " + got +
                             ")");
  return ds;
}

Sample augment_sample(const Sample& s, bool vflip, bool hflip, double scale) {
  const int h = s.mask.height, w = s.mask.width;
  Sample out;
  out.id = s.id;
  out.image = ImageTensor{static_cast<std::size_t>(h), static_cast<std::size_t>(w), 3};
  out.mask = BinaryMask(h, w);
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int ty = vflip ? h - 1 - y : y;
      const int tx = hflip ? w - 1 - x : x;
      const int sy = static_cast<int>(std::lround((ty - cy) / scale + cy));
      const int sx = static_cast<int>(std::lround((tx - cx) / scale + cx));
      if (sy >= 0 && sy < h && sx >= 0 && sx < w) out.mask.at(y, x) = s.mask.at(sy, sx);
      const int iy = std::clamp(sy, 0, h - 1);
      const int ix = std::clamp(sx, 0, w - 1);
      for (int c = 0; c < 3; ++c)
        out.image(static_cast<std::size_t>(y), static_cast<std::size_t>(x), static_cast<std::size_t>(c)) =
            s.image(static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), static_cast<std::size_t>(c));
    }
  return out;
}

}  // namespace bat::data
