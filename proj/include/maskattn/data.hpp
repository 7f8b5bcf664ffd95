#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "maskattn/key_value.hpp"
#include "maskattn/rng.hpp"
#include "maskattn/tensor.hpp"

namespace maskattn {

struct AugmentationRanges {
  double translation_frac = 0.25;  // of the frame size, either direction
  double rotation_deg = 10.0;
  double shear_deg = 10.0;
  // Kept fraction of each side; 1 disables cropping.
  double crop_keep_min = 0.60;
  double crop_keep_max = 0.90;
  double hue_frac = 0.12;  // of the hue circle
  double saturation_frac = 0.12;
  double contrast_frac = 0.05;
  double brightness_frac = 0.25;

  static AugmentationRanges none();
  void validate() const;
  bool set(const std::string& key, const std::string& value);
  KeyValues to_key_values() const;
};

// Maps output pixel centres to source coordinates:
//   src = centre + shift + keep * R(rotation) * Shear(shear) * (out - centre)
struct AffineParams {
  double shift_x = 0.0, shift_y = 0.0;
  double rotation_rad = 0.0;
  double shear_rad = 0.0;
  double keep = 1.0;

  // Row-major [a b tx; c d ty] for frames of the given size.
  std::vector<double> matrix(std::size_t height, std::size_t width) const;
};

AffineParams sample_affine(const AugmentationRanges& ranges, std::size_t height, std::size_t width,
                           Rng& rng);

// Bilinear warp with zero fill outside the source. Masks are clamped to [0, 1].
std::pair<Tensor, Tensor> apply_affine(const Tensor& image, const Tensor& masks,
                                       const AffineParams& params);

struct ColorParams {
  double hue_shift = 0.0;  // fraction of the hue circle
  double saturation_scale = 1.0;
  double brightness_scale = 1.0;
  double contrast_scale = 1.0;
};

ColorParams sample_color(const AugmentationRanges& ranges, Rng& rng);
// HSV hue shift, saturation and value scaling, then linear contrast about the
// image mean; clamped to [0, 1].
Tensor apply_color(const Tensor& image, const ColorParams& params);
Tensor apply_color(const Tensor& image, const AugmentationRanges& ranges, Rng& rng);

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v);
void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b);

struct SyntheticScene {
  Tensor image;         // [3 x H x W], values k/255
  Tensor object_masks;  // [N x H x W], binary, pairwise disjoint
  std::uint64_t seed = 0;
  std::vector<std::string> warnings;
};

// Colored rectangles, disks and triangles on a smooth textured background.
SyntheticScene generate_scene(std::uint64_t seed, std::size_t height, std::size_t width,
                              std::size_t n_objects);

struct Clip {
  std::string name;
  std::vector<Tensor> frames;  // [3 x H x W]
  std::vector<Tensor> masks;   // [N x H x W] per frame; undefined when unlabeled
};

// Frame 0 is the scene itself; frames 1..T-1 are independently warped and
// recolored copies of it.
Clip make_fake_sequence(const SyntheticScene& scene, std::size_t length,
                        const AugmentationRanges& ranges, Rng& rng);

// frames/<seq>/NNNNN.ppm and masks/<seq>/NNNNN.pgm (pixel value = object id,
// 0 background). Sequences are returned in name order.
std::vector<Clip> ingest_davis_dir(const std::string& root);
void write_davis_dir(const std::string& root, const std::vector<Clip>& clips);

// Binary P6/P5 images with maxval 255; byte = floor(255 v + 0.5).
void write_ppm(const std::string& path, const Tensor& image);
Tensor read_ppm(const std::string& path);
void write_pgm(const std::string& path, std::size_t height, std::size_t width,
               const std::vector<unsigned char>& pixels);
std::vector<unsigned char> read_pgm(const std::string& path, std::size_t& height,
                                    std::size_t& width);
unsigned char to_byte(double value);

}  // namespace maskattn
