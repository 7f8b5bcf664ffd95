#include <algorithm>
#include <cmath>

#include "maskattn/data.hpp"
#include "maskattn/error.hpp"

namespace maskattn {

namespace {

constexpr int kPlacementRetries = 100;
constexpr std::size_t kMinObjectPixels = 16;

// Rasterized shape candidate, as a binary plane.
std::vector<unsigned char> draw_shape(Rng& rng, std::size_t h, std::size_t w) {
  std::vector<unsigned char> m(h * w, 0);
  const int kind = rng.uniform_int(0, 2);
  const double H = static_cast<double>(h), W = static_cast<double>(w);
  if (kind == 0) {  // rectangle
    const int bw = rng.uniform_int(10, 24), bh = rng.uniform_int(10, 24);
    const int x0 = rng.uniform_int(0, static_cast<int>(w) - bw);
    const int y0 = rng.uniform_int(0, static_cast<int>(h) - bh);
    for (int y = y0; y < y0 + bh; ++y)
      for (int x = x0; x < x0 + bw; ++x) m[static_cast<std::size_t>(y) * w + x] = 1;
  } else if (kind == 1) {  // disk
    const double r = rng.uniform(5.0, 12.0);
    const double cx = rng.uniform(r, W - r), cy = rng.uniform(r, H - r);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
        if (dx * dx + dy * dy <= r * r) m[y * w + x] = 1;
      }
  } else {  // triangle inside a random box
    const double size = rng.uniform(12.0, 24.0);
    const double bx = rng.uniform(0.0, W - size), by = rng.uniform(0.0, H - size);
    double px[3], py[3];
    px[0] = bx + rng.uniform(0.0, size), py[0] = by;
    px[1] = bx, py[1] = by + size;
    px[2] = bx + size, py[2] = by + rng.uniform(0.5 * size, size);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double qx = static_cast<double>(x) + 0.5, qy = static_cast<double>(y) + 0.5;
        double sign[3];
        for (int e = 0; e < 3; ++e) {
          const int f = (e + 1) % 3;
          sign[e] = (px[f] - px[e]) * (qy - py[e]) - (py[f] - py[e]) * (qx - px[e]);
        }
        const bool neg = sign[0] < 0 || sign[1] < 0 || sign[2] < 0;
        const bool pos = sign[0] > 0 || sign[1] > 0 || sign[2] > 0;
        if (!(neg && pos)) m[y * w + x] = 1;
      }
  }
  return m;
}

double quantize(double v) { return std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5) / 255.0; }

}  // namespace

SyntheticScene generate_scene(std::uint64_t seed, std::size_t height, std::size_t width,
                              std::size_t n_objects) {
  if (height < 24 || width < 24) throw ConfigError("scenes need frames of at least 24x24");
  Rng rng(derive_seed(seed, "scene"));
  const std::size_t plane = height * width;
  SyntheticScene scene;
  scene.seed = seed;

  // Background: muted base colour, a linear gradient and two soft blobs.
  std::vector<double> img(3 * plane);
  double base[3], grad_x[3], grad_y[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(0.3, 0.6);
    grad_x[c] = rng.symmetric(0.15);
    grad_y[c] = rng.symmetric(0.15);
  }
  double blob_x[2], blob_y[2], blob_r[2], blob_amp[2][3];
  for (int b = 0; b < 2; ++b) {
    blob_x[b] = rng.uniform(0.0, static_cast<double>(width));
    blob_y[b] = rng.uniform(0.0, static_cast<double>(height));
    blob_r[b] = rng.uniform(6.0, 16.0);
    for (int c = 0; c < 3; ++c) blob_amp[b][c] = rng.symmetric(0.12);
  }
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const double u = static_cast<double>(x) / width - 0.5, v = static_cast<double>(y) / height - 0.5;
      for (int c = 0; c < 3; ++c) {
        double val = base[c] + grad_x[c] * u + grad_y[c] * v + rng.symmetric(0.03);
        for (int b = 0; b < 2; ++b) {
          const double dx = static_cast<double>(x) - blob_x[b], dy = static_cast<double>(y) - blob_y[b];
          val += blob_amp[b][c] * std::exp(-(dx * dx + dy * dy) / (2.0 * blob_r[b] * blob_r[b]));
        }
        img[c * plane + y * width + x] = val;
      }
    }

  // Objects: saturated colours with evenly spread hues.
  std::vector<unsigned char> occupied(plane, 0);
  std::vector<std::vector<unsigned char>> placed;
  const double hue0 = rng.uniform();
  for (std::size_t i = 0; i < n_objects; ++i) {
    bool ok = false;
    std::vector<unsigned char> shape;
    for (int attempt = 0; attempt < kPlacementRetries && !ok; ++attempt) {
      shape = draw_shape(rng, height, width);
      std::size_t area = 0;
      bool overlap = false;
      for (std::size_t p = 0; p < plane; ++p) {
        area += shape[p];
        overlap = overlap || (shape[p] && occupied[p]);
      }
      ok = !overlap && area >= kMinObjectPixels;
    }
    if (!ok) {
      scene.warnings.push_back("placed " + std::to_string(placed.size()) + " of " +
                               std::to_string(n_objects) + " objects after " +
                               std::to_string(kPlacementRetries) + " retries");
      break;
    }
    double rgb[3];
    hsv_to_rgb(hue0 + static_cast<double>(i) / static_cast<double>(n_objects),
               rng.uniform(0.75, 1.0), rng.uniform(0.75, 1.0), rgb[0], rgb[1], rgb[2]);
    for (std::size_t p = 0; p < plane; ++p) {
      if (!shape[p]) continue;
      occupied[p] = 1;
      for (int c = 0; c < 3; ++c) img[c * plane + p] = rgb[c] + rng.symmetric(0.03);
    }
    placed.push_back(std::move(shape));
  }
  if (placed.empty()) throw ContractError("scene generation placed no objects");

  for (double& v : img) v = quantize(v);
  scene.image = Tensor({3, height, width}, std::move(img));
  std::vector<double> masks(placed.size() * plane);
  for (std::size_t i = 0; i < placed.size(); ++i)
    for (std::size_t p = 0; p < plane; ++p) masks[i * plane + p] = placed[i][p];
  scene.object_masks = Tensor({placed.size(), height, width}, std::move(masks));
  return scene;
}

Clip make_fake_sequence(const SyntheticScene& scene, std::size_t length,
                        const AugmentationRanges& ranges, Rng& rng) {
  if (length == 0) throw ConfigError("fake sequence length must be at least 1");
  Clip clip;
  clip.name = "scene-" + std::to_string(scene.seed);
  clip.frames.push_back(scene.image);
  clip.masks.push_back(scene.object_masks);
  for (std::size_t t = 1; t < length; ++t) {
    const AffineParams affine =
        sample_affine(ranges, scene.image.dim(1), scene.image.dim(2), rng);
    auto [image, masks] = apply_affine(scene.image, scene.object_masks, affine);
    clip.frames.push_back(apply_color(image, ranges, rng));
    clip.masks.push_back(std::move(masks));
  }
  return clip;
}

}  // namespace maskattn
