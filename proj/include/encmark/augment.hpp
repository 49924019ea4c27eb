#pragma once

// Stochastic image views for contrastive pretraining: random resized crop,
// horizontal flip, color jitter, optional blur. An identity policy returns
// the input bit-for-bit, which the tests rely on.

#include <algorithm>
#include <cmath>

#include "encmark/core.hpp"

namespace encmark {

struct AugmentationPolicy {
  double crop_scale_min = 0.6;  // crop side as a fraction of the image side
  double crop_scale_max = 1.0;
  double flip_prob = 0.5;
  double brightness = 0.4;  // multiplicative factor drawn from [1-s, 1+s]
  double contrast = 0.4;
  double saturation = 0.4;
  double blur_prob = 0.2;

  void validate() const {
    auto prob_ok = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!(crop_scale_min > 0.0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0))
      throw ConfigError("crop scale range must satisfy 0 < min <= max <= 1");
    if (!prob_ok(flip_prob) || !prob_ok(blur_prob))
      throw ConfigError("flip/blur probabilities must lie in [0,1]");
    if (brightness < 0 || brightness >= 1 || contrast < 0 || contrast >= 1 || saturation < 0 ||
        saturation >= 1)
      throw ConfigError("color jitter strengths must lie in [0,1)");
  }

  static AugmentationPolicy identity() {
    AugmentationPolicy p;
    p.crop_scale_min = p.crop_scale_max = 1.0;
    p.flip_prob = 0.0;
    p.brightness = p.contrast = p.saturation = 0.0;
    p.blur_prob = 0.0;
    return p;
  }

  bool is_identity() const {
    return crop_scale_min == 1.0 && crop_scale_max == 1.0 && flip_prob == 0.0 &&
           brightness == 0.0 && contrast == 0.0 && saturation == 0.0 && blur_prob == 0.0;
  }
};

namespace detail {

// Bilinear sample of region [top,top+ch) x [left,left+cw) resized to (h,w).
template <typename T>
Tensor<T> resize_crop(const Tensor<T>& x, int64_t top, int64_t left, int64_t ch, int64_t cw) {
  int64_t h = x.shape[0], w = x.shape[1], c = x.shape[2];
  Tensor<T> out({h, w, c});
  double sy = static_cast<double>(ch) / static_cast<double>(h);
  double sx = static_cast<double>(cw) / static_cast<double>(w);
  for (int64_t y = 0; y < h; ++y) {
    double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
    double cy = std::clamp(fy, 0.0, static_cast<double>(ch - 1));
    int64_t y0 = static_cast<int64_t>(std::floor(cy));
    int64_t y1 = std::min(y0 + 1, ch - 1);
    double wy = cy - static_cast<double>(y0);
    for (int64_t xx = 0; xx < w; ++xx) {
      double fx = (static_cast<double>(xx) + 0.5) * sx - 0.5;
      double cxd = std::clamp(fx, 0.0, static_cast<double>(cw - 1));
      int64_t x0 = static_cast<int64_t>(std::floor(cxd));
      int64_t x1 = std::min(x0 + 1, cw - 1);
      double wx = cxd - static_cast<double>(x0);
      for (int64_t cc = 0; cc < c; ++cc) {
        double v00 = x.data[((top + y0) * w + (left + x0)) * c + cc];
        double v01 = x.data[((top + y0) * w + (left + x1)) * c + cc];
        double v10 = x.data[((top + y1) * w + (left + x0)) * c + cc];
        double v11 = x.data[((top + y1) * w + (left + x1)) * c + cc];
        double v = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
        out.data[(y * w + xx) * c + cc] = static_cast<T>(v);
      }
    }
  }
  return out;
}

template <typename T>
void flip_horizontal(Tensor<T>& x) {
  int64_t h = x.shape[0], w = x.shape[1], c = x.shape[2];
  for (int64_t y = 0; y < h; ++y)
    for (int64_t xx = 0; xx < w / 2; ++xx)
      for (int64_t cc = 0; cc < c; ++cc)
        std::swap(x.data[(y * w + xx) * c + cc], x.data[(y * w + (w - 1 - xx)) * c + cc]);
}

template <typename T>
void blur3(Tensor<T>& x) {
  int64_t h = x.shape[0], w = x.shape[1], c = x.shape[2];
  Tensor<T> src = x;
  auto tap = [&](int64_t y, int64_t xx, int64_t cc) {
    y = std::clamp<int64_t>(y, 0, h - 1);
    xx = std::clamp<int64_t>(xx, 0, w - 1);
    return static_cast<double>(src.data[(y * w + xx) * c + cc]);
  };
  const double k[3] = {0.25, 0.5, 0.25};
  for (int64_t y = 0; y < h; ++y)
    for (int64_t xx = 0; xx < w; ++xx)
      for (int64_t cc = 0; cc < c; ++cc) {
        double v = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) v += k[dy + 1] * k[dx + 1] * tap(y + dy, xx + dx, cc);
        x.data[(y * w + xx) * c + cc] = static_cast<T>(v);
      }
}

}  // namespace detail

// One stochastic view of a single (H,W,C) image. Draws from `rng` only for
// enabled transforms, and is an exact passthrough for the identity policy.
template <typename T>
Tensor<T> augment_view(const Tensor<T>& x, const AugmentationPolicy& p, Rng& rng) {
  if (x.rank() != 3) throw InputError("augment_view expects a (H,W,C) image");
  p.validate();
  int64_t h = x.shape[0], w = x.shape[1], c = x.shape[2];
  std::uniform_real_distribution<double> uni(0.0, 1.0);

  Tensor<T> v = x;
  if (p.crop_scale_min < 1.0 || p.crop_scale_max < 1.0) {
    double s = p.crop_scale_min + (p.crop_scale_max - p.crop_scale_min) * uni(rng);
    int64_t ch = std::max<int64_t>(2, static_cast<int64_t>(std::llround(s * static_cast<double>(h))));
    int64_t cw = std::max<int64_t>(2, static_cast<int64_t>(std::llround(s * static_cast<double>(w))));
    ch = std::min(ch, h);
    cw = std::min(cw, w);
    int64_t top = static_cast<int64_t>(uni(rng) * static_cast<double>(h - ch + 1));
    int64_t left = static_cast<int64_t>(uni(rng) * static_cast<double>(w - cw + 1));
    top = std::min(top, h - ch);
    left = std::min(left, w - cw);
    if (!(ch == h && cw == w && top == 0 && left == 0))
      v = detail::resize_crop(v, top, left, ch, cw);
  }
  if (p.flip_prob > 0.0 && uni(rng) < p.flip_prob) detail::flip_horizontal(v);
  if (p.brightness > 0.0) {
    double f = 1.0 + p.brightness * (2.0 * uni(rng) - 1.0);
    for (auto& t : v.data) t = static_cast<T>(std::clamp(static_cast<double>(t) * f, 0.0, 1.0));
  }
  if (p.contrast > 0.0) {
    double f = 1.0 + p.contrast * (2.0 * uni(rng) - 1.0);
    double mean = 0;
    for (auto t : v.data) mean += static_cast<double>(t);
    mean /= static_cast<double>(v.numel());
    for (auto& t : v.data)
      t = static_cast<T>(std::clamp(mean + f * (static_cast<double>(t) - mean), 0.0, 1.0));
  }
  if (p.saturation > 0.0 && c >= 3) {
    double f = 1.0 + p.saturation * (2.0 * uni(rng) - 1.0);
    for (int64_t i = 0; i < h * w; ++i) {
      double g = 0;
      for (int64_t cc = 0; cc < c; ++cc) g += static_cast<double>(v.data[i * c + cc]);
      g /= static_cast<double>(c);
      for (int64_t cc = 0; cc < c; ++cc) {
        double t = static_cast<double>(v.data[i * c + cc]);
        v.data[i * c + cc] = static_cast<T>(std::clamp(g + f * (t - g), 0.0, 1.0));
      }
    }
  }
  if (p.blur_prob > 0.0 && uni(rng) < p.blur_prob) detail::blur3(v);
  return v;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> augment_pair(const Tensor<T>& x, const AugmentationPolicy& p,
                                             Rng& rng) {
  Tensor<T> a = augment_view(x, p, rng);
  Tensor<T> b = augment_view(x, p, rng);
  return {std::move(a), std::move(b)};
}

// Copies image row n of a (N,H,W,C) batch into a standalone (H,W,C) tensor.
template <typename T>
Tensor<T> image_row(const Tensor<T>& batch, int64_t n) {
  if (batch.rank() != 4) throw InputError("image_row expects a (N,H,W,C) batch");
  int64_t h = batch.shape[1], w = batch.shape[2], c = batch.shape[3];
  Tensor<T> img({h, w, c});
  std::copy_n(batch.data.begin() + n * h * w * c, h * w * c, img.data.begin());
  return img;
}

// Writes (H,W,C) image into row n of a preallocated (N,H,W,C) batch.
template <typename T>
void set_image_row(Tensor<T>& batch, int64_t n, const Tensor<T>& img) {
  int64_t stride = batch.shape[1] * batch.shape[2] * batch.shape[3];
  if (img.numel() != stride) throw InputError("set_image_row shape mismatch");
  std::copy(img.data.begin(), img.data.end(), batch.data.begin() + n * stride);
}

}  // namespace encmark
