#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bat/image.hpp"
#include "bat/rng.hpp"

namespace bat::data {

enum class Contrast { low, medium, high };

Contrast contrast_from_string(const std::string& s);
std::string contrast_to_string(Contrast c);

struct SyntheticSpec {
  std::uint64_t seed = 0;
  int count = 1;
  int image_side = 64;
  Contrast contrast = Contrast::medium;
  int hair_density = 0;        // arcs per image
  double boundary_roughness = 0.0;  // Fourier perturbation amplitude
};

struct Sample {
  ImageTensor image;  // side x side x 3, values on the 1/255 grid
  BinaryMask mask;
  std::string id;
};

// Star-convex lesion: ellipse whose radial profile is modulated by a
// truncated Fourier series.
struct ShapeParams {
  double cy = 0.0, cx = 0.0;
  double ra = 0.0, rb = 0.0;  // semi-axes
  double phi = 0.0;           // rotation
  double roughness = 0.0;
  std::vector<double> fa, fb;  // harmonics 2..6
};

ShapeParams draw_shape(Rng& rng, int side, double roughness);
BinaryMask rasterize_lesion(const ShapeParams& shape, int side);

// Fully determined by (spec.seed, index). Throws after 100 rejected shapes
// (mask coverage outside [2%, 70%]).
Sample generate_sample(const SyntheticSpec& spec, int index);

std::vector<Sample> generate_samples(const SyntheticSpec& spec);

// Layout: <dir>/manifest.json, <dir>/images/<id>.ppm, <dir>/masks/<id>.pgm.
void write_dataset(const SyntheticSpec& spec, const std::string& dir);

struct Dataset {
  SyntheticSpec spec;
  std::vector<Sample> samples;
};

// Verifies the manifest sample count and content hash; throws on mismatch.
Dataset read_dataset(const std::string& dir);

// Augmentations used by the training harness. Scaling resamples nearest
// neighbor about the image center; mask pixels from outside are background.
Sample augment_sample(const Sample& s, bool vflip, bool hflip, double scale);

}  // namespace bat::data
