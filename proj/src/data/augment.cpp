#include <algorithm>
#include <cmath>

#include "maskattn/data.hpp"
#include "maskattn/error.hpp"

namespace maskattn {

namespace {

constexpr double kDegToRad = M_PI / 180.0;

}  // namespace

AugmentationRanges AugmentationRanges::none() {
  AugmentationRanges r;
  r.translation_frac = r.rotation_deg = r.shear_deg = 0.0;
  r.crop_keep_min = r.crop_keep_max = 1.0;
  r.hue_frac = r.saturation_frac = r.contrast_frac = r.brightness_frac = 0.0;
  return r;
}

void AugmentationRanges::validate() const {
  auto check = [](double v, double lo, double hi, const char* name) {
    if (!(v >= lo && v <= hi)) {
      throw ConfigError(std::string(name) + " must lie in [" + format_real(lo) + ", " +
                        format_real(hi) + "], got " + format_real(v));
    }
  };
  check(translation_frac, 0.0, 0.25, "aug_translation");
  check(rotation_deg, 0.0, 10.0, "aug_rotation_deg");
  check(shear_deg, 0.0, 10.0, "aug_shear_deg");
  check(crop_keep_min, 0.60, 1.0, "aug_crop_keep_min");
  check(crop_keep_max, crop_keep_min, 1.0, "aug_crop_keep_max");
  check(hue_frac, 0.0, 0.12, "aug_hue");
  check(saturation_frac, 0.0, 0.12, "aug_saturation");
  check(contrast_frac, 0.0, 0.05, "aug_contrast");
  check(brightness_frac, 0.0, 0.25, "aug_brightness");
}

bool AugmentationRanges::set(const std::string& key, const std::string& value) {
  double* field = nullptr;
  if (key == "aug_translation") field = &translation_frac;
  else if (key == "aug_rotation_deg") field = &rotation_deg;
  else if (key == "aug_shear_deg") field = &shear_deg;
  else if (key == "aug_crop_keep_min") field = &crop_keep_min;
  else if (key == "aug_crop_keep_max") field = &crop_keep_max;
  else if (key == "aug_hue") field = &hue_frac;
  else if (key == "aug_saturation") field = &saturation_frac;
  else if (key == "aug_contrast") field = &contrast_frac;
  else if (key == "aug_brightness") field = &brightness_frac;
  if (!field) return false;
  *field = parse_real(key, value);
  return true;
}

KeyValues AugmentationRanges::to_key_values() const {
  return {
      {"aug_translation", format_real(translation_frac)},
      {"aug_rotation_deg", format_real(rotation_deg)},
      {"aug_shear_deg", format_real(shear_deg)},
      {"aug_crop_keep_min", format_real(crop_keep_min)},
      {"aug_crop_keep_max", format_real(crop_keep_max)},
      {"aug_hue", format_real(hue_frac)},
      {"aug_saturation", format_real(saturation_frac)},
      {"aug_contrast", format_real(contrast_frac)},
      {"aug_brightness", format_real(brightness_frac)},
  };
}

std::vector<double> AffineParams::matrix(std::size_t height, std::size_t width) const {
  const double cx = (static_cast<double>(width) - 1.0) / 2.0;
  const double cy = (static_cast<double>(height) - 1.0) / 2.0;
  const double c = std::cos(rotation_rad), s = std::sin(rotation_rad), t = std::tan(shear_rad);
  // keep * R * [[1, t], [0, 1]]
  const double a = keep * c, b = keep * (c * t - s);
  const double d = keep * s, e = keep * (s * t + c);
  return {a, b, cx + shift_x - a * cx - b * cy, d, e, cy + shift_y - d * cx - e * cy};
}

AffineParams sample_affine(const AugmentationRanges& ranges, std::size_t height, std::size_t width,
                           Rng& rng) {
  ranges.validate();
  AffineParams p;
  const double w = static_cast<double>(width), h = static_cast<double>(height);
  p.shift_x = rng.symmetric(1.0) * ranges.translation_frac * w;
  p.shift_y = rng.symmetric(1.0) * ranges.translation_frac * h;
  p.rotation_rad = rng.symmetric(1.0) * ranges.rotation_deg * kDegToRad;
  p.shear_rad = rng.symmetric(1.0) * ranges.shear_deg * kDegToRad;
  p.keep = rng.uniform(ranges.crop_keep_min, ranges.crop_keep_max);
  // The crop window is placed anywhere inside the frame.
  p.shift_x += rng.symmetric(1.0) * (1.0 - p.keep) * w / 2.0;
  p.shift_y += rng.symmetric(1.0) * (1.0 - p.keep) * h / 2.0;
  return p;
}

namespace {

Tensor warp(const Tensor& src, const std::vector<double>& m, bool clamp_unit) {
  const std::size_t ch = src.dim(0), h = src.dim(1), w = src.dim(2), plane = h * w;
  const auto in = src.data();
  std::vector<double> out(src.numel(), 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      const double sx = m[0] * fx + m[1] * fy + m[2];
      const double sy = m[3] * fx + m[4] * fy + m[5];
      const double x0f = std::floor(sx), y0f = std::floor(sy);
      const double ax = sx - x0f, ay = sy - y0f;
      const long x0 = static_cast<long>(x0f), y0 = static_cast<long>(y0f);
      const long taps_x[2] = {x0, x0 + 1}, taps_y[2] = {y0, y0 + 1};
      const double wx[2] = {1.0 - ax, ax}, wy[2] = {1.0 - ay, ay};
      for (int j = 0; j < 2; ++j) {
        if (taps_y[j] < 0 || taps_y[j] >= static_cast<long>(h) || wy[j] == 0.0) continue;
        for (int i = 0; i < 2; ++i) {
          if (taps_x[i] < 0 || taps_x[i] >= static_cast<long>(w) || wx[i] == 0.0) continue;
          const std::size_t sp = static_cast<std::size_t>(taps_y[j]) * w +
                                 static_cast<std::size_t>(taps_x[i]);
          const double weight = wy[j] * wx[i];
          for (std::size_t c = 0; c < ch; ++c) out[c * plane + y * w + x] += weight * in[c * plane + sp];
        }
      }
    }
  if (clamp_unit)
    for (double& v : out) v = std::clamp(v, 0.0, 1.0);
  return Tensor(src.shape(), std::move(out));
}

}  // namespace

std::pair<Tensor, Tensor> apply_affine(const Tensor& image, const Tensor& masks,
                                       const AffineParams& params) {
  if (image.rank() != 3 || masks.rank() != 3 || image.dim(1) != masks.dim(1) ||
      image.dim(2) != masks.dim(2)) {
    throw DimensionError("apply_affine: image " + shape_to_string(image.shape()) + ", masks " +
                         shape_to_string(masks.shape()));
  }
  const auto m = params.matrix(image.dim(1), image.dim(2));
  return {warp(image, m, false), warp(masks, m, true)};
}

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double delta = mx - mn;
  v = mx;
  s = mx > 0.0 ? delta / mx : 0.0;
  if (delta == 0.0) {
    h = 0.0;
    return;
  }
  double sector;
  if (mx == r) sector = std::fmod((g - b) / delta, 6.0);
  else if (mx == g) sector = (b - r) / delta + 2.0;
  else sector = (r - g) / delta + 4.0;
  h = sector / 6.0;
  if (h < 0.0) h += 1.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  if (s == 0.0) {
    r = g = b = v;
    return;
  }
  h = h - std::floor(h);
  const double sector = h * 6.0;
  const int i = static_cast<int>(std::floor(sector)) % 6;
  const double f = sector - std::floor(sector);
  const double p = v * (1.0 - s), q = v * (1.0 - s * f), t = v * (1.0 - s * (1.0 - f));
  switch (i) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

ColorParams sample_color(const AugmentationRanges& ranges, Rng& rng) {
  ranges.validate();
  ColorParams p;
  p.hue_shift = rng.symmetric(1.0) * ranges.hue_frac;
  p.saturation_scale = 1.0 + rng.symmetric(1.0) * ranges.saturation_frac;
  p.brightness_scale = 1.0 + rng.symmetric(1.0) * ranges.brightness_frac;
  p.contrast_scale = 1.0 + rng.symmetric(1.0) * ranges.contrast_frac;
  return p;
}

Tensor apply_color(const Tensor& image, const ColorParams& params) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("apply_color: expected [3 x H x W], got " + shape_to_string(image.shape()));
  }
  const std::size_t plane = image.dim(1) * image.dim(2);
  std::vector<double> px(image.data().begin(), image.data().end());
  if (params.hue_shift != 0.0 || params.saturation_scale != 1.0 || params.brightness_scale != 1.0) {
    for (std::size_t p = 0; p < plane; ++p) {
      double h, s, v;
      rgb_to_hsv(px[p], px[plane + p], px[2 * plane + p], h, s, v);
      h += params.hue_shift;
      s = std::clamp(s * params.saturation_scale, 0.0, 1.0);
      v = std::clamp(v * params.brightness_scale, 0.0, 1.0);
      hsv_to_rgb(h, s, v, px[p], px[plane + p], px[2 * plane + p]);
    }
  }
  if (params.contrast_scale != 1.0) {
    double mean = 0.0;
    for (double v : px) mean += v;
    mean /= static_cast<double>(px.size());
    for (double& v : px) v = mean + params.contrast_scale * (v - mean);
  }
  for (double& v : px) v = std::clamp(v, 0.0, 1.0);
  return Tensor(image.shape(), std::move(px));
}

Tensor apply_color(const Tensor& image, const AugmentationRanges& ranges, Rng& rng) {
  return apply_color(image, sample_color(ranges, rng));
}

}  // namespace maskattn
