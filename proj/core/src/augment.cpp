#include "lbba/augment.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "lbba/errors.hpp"

namespace lbba {
inline namespace LBBA_PRECISION_NS {

namespace {

struct Image {
  int c, h, w;
  std::vector<double> v;
  double& at(int ch, int y, int x) { return v[(static_cast<size_t>(ch) * h + y) * w + x]; }
  double at(int ch, int y, int x) const { return v[(static_cast<size_t>(ch) * h + y) * w + x]; }
};

Image from_tensor(const real* p, int c, int h, int w) {
  Image im{c, h, w, std::vector<double>(static_cast<size_t>(c) * h * w)};
  for (size_t i = 0; i < im.v.size(); ++i) im.v[i] = p[i];
  return im;
}

void clamp01(Image& im) {
  for (auto& x : im.v) x = std::clamp(x, 0.0, 1.0);
}

// Crop box in source pixels, then bilinear resize to the original size.
Image resized_crop(const Image& src, double top, double left, double ch, double cw) {
  Image out{src.c, src.h, src.w, std::vector<double>(src.v.size())};
  for (int y = 0; y < src.h; ++y) {
    const double sy = std::clamp(top + (y + 0.5) * ch / src.h - 0.5, 0.0, src.h - 1.0);
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, src.h - 1);
    const double fy = sy - y0;
    for (int x = 0; x < src.w; ++x) {
      const double sx = std::clamp(left + (x + 0.5) * cw / src.w - 0.5, 0.0, src.w - 1.0);
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1 = std::min(x0 + 1, src.w - 1);
      const double fx = sx - x0;
      for (int c = 0; c < src.c; ++c) {
        out.at(c, y, x) = (1 - fy) * ((1 - fx) * src.at(c, y0, x0) + fx * src.at(c, y0, x1)) +
                          fy * ((1 - fx) * src.at(c, y1, x0) + fx * src.at(c, y1, x1));
      }
    }
  }
  return out;
}

Image random_resized_crop(const Image& src, const AugmentationPolicy& p, Rng& rng) {
  const double area = static_cast<double>(src.h) * src.w;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * uniform(rng, p.crop_scale_min, p.crop_scale_max);
    const double log_ratio = uniform(rng, std::log(p.crop_ratio_min), std::log(p.crop_ratio_max));
    const double ratio = std::exp(log_ratio);
    const double cw = std::sqrt(target * ratio);
    const double ch = std::sqrt(target / ratio);
    if (cw <= src.w && ch <= src.h && cw >= 1.0 && ch >= 1.0) {
      const double top = uniform(rng, 0.0, src.h - ch);
      const double left = uniform(rng, 0.0, src.w - cw);
      return resized_crop(src, top, left, ch, cw);
    }
  }
  // Fallback: centred crop at the clamped ratio.
  const double in_ratio = static_cast<double>(src.w) / src.h;
  double cw = src.w, ch = src.h;
  if (in_ratio < p.crop_ratio_min) {
    ch = cw / p.crop_ratio_min;
  } else if (in_ratio > p.crop_ratio_max) {
    cw = ch * p.crop_ratio_max;
  }
  return resized_crop(src, (src.h - ch) / 2, (src.w - cw) / 2, ch, cw);
}

void hflip(Image& im) {
  for (int c = 0; c < im.c; ++c)
    for (int y = 0; y < im.h; ++y)
      for (int x = 0; x < im.w / 2; ++x) std::swap(im.at(c, y, x), im.at(c, y, im.w - 1 - x));
}

double luma(const Image& im, int y, int x) {
  return 0.299 * im.at(0, y, x) + 0.587 * im.at(1, y, x) + 0.114 * im.at(2, y, x);
}

void adjust_brightness(Image& im, double f) {
  for (auto& x : im.v) x *= f;
  clamp01(im);
}

void adjust_contrast(Image& im, double f) {
  double m = 0.0;
  if (im.c == 3) {
    for (int y = 0; y < im.h; ++y)
      for (int x = 0; x < im.w; ++x) m += luma(im, y, x);
    m /= static_cast<double>(im.h) * im.w;
  } else {
    for (double x : im.v) m += x;
    m /= static_cast<double>(im.v.size());
  }
  for (auto& x : im.v) x = f * x + (1 - f) * m;
  clamp01(im);
}

void adjust_saturation(Image& im, double f) {
  for (int y = 0; y < im.h; ++y)
    for (int x = 0; x < im.w; ++x) {
      const double g = luma(im, y, x);
      for (int c = 0; c < 3; ++c) im.at(c, y, x) = std::clamp(f * im.at(c, y, x) + (1 - f) * g, 0.0, 1.0);
    }
}

void adjust_hue(Image& im, double shift) {
  for (int y = 0; y < im.h; ++y)
    for (int x = 0; x < im.w; ++x) {
      const double r = im.at(0, y, x), g = im.at(1, y, x), b = im.at(2, y, x);
      const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
      const double d = mx - mn;
      double hh = 0.0;
      if (d > 0) {
        if (mx == r) {
          hh = std::fmod((g - b) / d, 6.0);
        } else if (mx == g) {
          hh = (b - r) / d + 2.0;
        } else {
          hh = (r - g) / d + 4.0;
        }
        hh /= 6.0;
      }
      const double s = mx > 0 ? d / mx : 0.0;
      const double v = mx;
      hh = hh + shift;
      hh -= std::floor(hh);
      const double h6 = hh * 6.0;
      const int sector = static_cast<int>(std::floor(h6)) % 6;
      const double f = h6 - std::floor(h6);
      const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
      std::array<double, 3> rgb{};
      switch (sector) {
      case 0: rgb = {v, t, p}; break;
      case 1: rgb = {q, v, p}; break;
      case 2: rgb = {p, v, t}; break;
      case 3: rgb = {p, q, v}; break;
      case 4: rgb = {t, p, v}; break;
      default: rgb = {v, p, q}; break;
      }
      for (int c = 0; c < 3; ++c) im.at(c, y, x) = std::clamp(rgb[static_cast<size_t>(c)], 0.0, 1.0);
    }
}

void grayscale(Image& im) {
  for (int y = 0; y < im.h; ++y)
    for (int x = 0; x < im.w; ++x) {
      const double g = luma(im, y, x);
      for (int c = 0; c < 3; ++c) im.at(c, y, x) = g;
    }
}

void augment_into(const real* src, int c, int h, int w, const AugmentationPolicy& p, Rng& rng, real* dst) {
  const size_t n = static_cast<size_t>(c) * h * w;
  if (!p.enabled) {
    std::copy_n(src, n, dst);
    return;
  }
  Image im = random_resized_crop(from_tensor(src, c, h, w), p, rng);
  if (bernoulli(rng, p.flip_p)) hflip(im);
  const bool colour = c == 3;
  if (bernoulli(rng, p.jitter_p)) {
    std::array<int, 4> order{0, 1, 2, 3};
    shuffle(order.begin(), order.end(), rng);
    for (int step : order) {
      switch (step) {
      case 0:
        if (p.brightness > 0) adjust_brightness(im, uniform(rng, std::max(0.0, 1 - p.brightness), 1 + p.brightness));
        break;
      case 1:
        if (p.contrast > 0) adjust_contrast(im, uniform(rng, std::max(0.0, 1 - p.contrast), 1 + p.contrast));
        break;
      case 2:
        if (colour && p.saturation > 0) {
          adjust_saturation(im, uniform(rng, std::max(0.0, 1 - p.saturation), 1 + p.saturation));
        }
        break;
      default:
        if (colour && p.hue > 0) adjust_hue(im, uniform(rng, -p.hue, p.hue));
        break;
      }
    }
  }
  if (colour && bernoulli(rng, p.grayscale_p)) grayscale(im);
  clamp01(im);
  for (size_t i = 0; i < n; ++i) dst[i] = static_cast<real>(im.v[i]);
}

void require_image(const Tensor& t) {
  if (t.rank() != 3) throw DimensionError("expected a (C,H,W) image, got " + shape_str(t.shape()));
}

}  // namespace

void AugmentationPolicy::validate() const {
  auto prob = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string("augmentation ") + name + " must be in [0,1]");
  };
  prob(flip_p, "flip_p");
  prob(jitter_p, "jitter_p");
  prob(grayscale_p, "grayscale_p");
  if (!(crop_scale_min > 0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0)) {
    throw ConfigError("augmentation crop scale must satisfy 0 < min <= max <= 1");
  }
  if (!(crop_ratio_min > 0 && crop_ratio_min <= crop_ratio_max)) throw ConfigError("bad crop ratio range");
  if (brightness < 0 || contrast < 0 || saturation < 0) throw ConfigError("jitter strengths must be >= 0");
  if (hue < 0 || hue > 0.5) throw ConfigError("hue jitter must be in [0, 0.5]");
}

Tensor augment(const Tensor& image, const AugmentationPolicy& policy, Rng& rng) {
  require_image(image);
  Tensor out(image.shape());
  augment_into(image.ptr(), static_cast<int>(image.dim(0)), static_cast<int>(image.dim(1)),
               static_cast<int>(image.dim(2)), policy, rng, out.ptr());
  return out;
}

std::pair<Tensor, Tensor> two_views(const Tensor& image, const AugmentationPolicy& policy, Rng& rng) {
  Tensor a = augment(image, policy, rng);
  Tensor b = augment(image, policy, rng);
  return {a, b};
}

Tensor augment_batch(const SampleSet& set, std::span<const int64_t> idx, const AugmentationPolicy& policy,
                     uint64_t seed, uint64_t epoch, uint64_t view, uint64_t worker) {
  const int c = set.channels(), h = set.height(), w = set.width();
  const int64_t per = static_cast<int64_t>(c) * h * w;
  Tensor out({static_cast<int64_t>(idx.size()), c, h, w});
  for (size_t i = 0; i < idx.size(); ++i) {
    Rng rng = make_rng({seed, worker, epoch, static_cast<uint64_t>(idx[i]), view});
    augment_into(set.images.ptr() + idx[i] * per, c, h, w, policy, rng, out.ptr() + static_cast<int64_t>(i) * per);
  }
  return out;
}

Tensor pad_crop_flip_batch(const SampleSet& set, std::span<const int64_t> idx, int pad, uint64_t seed,
                           uint64_t epoch) {
  const int c = set.channels(), h = set.height(), w = set.width();
  const int64_t per = static_cast<int64_t>(c) * h * w;
  Tensor out({static_cast<int64_t>(idx.size()), c, h, w});
  for (size_t i = 0; i < idx.size(); ++i) {
    Rng rng = make_rng({seed, 0, epoch, static_cast<uint64_t>(idx[i]), 0xc407});
    const int dy = static_cast<int>(uniform_int(rng, -pad, pad));
    const int dx = static_cast<int>(uniform_int(rng, -pad, pad));
    const bool flip = bernoulli(rng, 0.5);
    const real* src = set.images.ptr() + idx[i] * per;
    real* dst = out.ptr() + static_cast<int64_t>(i) * per;
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const int sy = y + dy;
          const int sx0 = x + dx;
          const int sx = flip ? w - 1 - sx0 : sx0;
          const bool inside = sy >= 0 && sy < h && sx0 >= 0 && sx0 < w;
          dst[(ch * h + y) * w + x] = inside ? src[(ch * h + sy) * w + sx] : real(0);
        }
  }
  return out;
}

Tensor rotate90(const Tensor& x, int k) {
  if (x.rank() != 3 && x.rank() != 4) throw DimensionError("rotate90 expects (C,H,W) or (N,C,H,W)");
  const int64_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  if (h != w) throw DimensionError("rotate90 needs square images, got " + shape_str(x.shape()));
  k = ((k % 4) + 4) % 4;
  Tensor out(x.shape());
  const int64_t planes = x.numel() / (h * w);
  const int64_t n = h;
  for (int64_t p = 0; p < planes; ++p) {
    const real* s = x.ptr() + p * n * n;
    real* d = out.ptr() + p * n * n;
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j) {
        // Counter-clockwise: out[i][j] = in[j][n-1-i] for k = 1.
        int64_t si = i, sj = j;
        switch (k) {
        case 1: si = j; sj = n - 1 - i; break;
        case 2: si = n - 1 - i; sj = n - 1 - j; break;
        case 3: si = n - 1 - j; sj = i; break;
        default: break;
        }
        d[i * n + j] = s[si * n + sj];
      }
  }
  return out;
}

}  // namespace LBBA_PRECISION_NS
}  // namespace lbba
