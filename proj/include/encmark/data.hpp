#pragma once

// Image corpora: a deterministic synthetic ten-class shape corpus (two visual
// styles so query-distribution-shift experiments have an off-distribution
// source), a loader for the standard 32x32 binary image-batch format, and
// split/sample helpers.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

#include "encmark/core.hpp"

namespace encmark {

struct Dataset {
  Tensor<float> images;     // (N,H,W,C), values in [0,1]
  std::vector<int> labels;  // empty when unlabeled, otherwise size N

  int64_t size() const { return images.rank() == 4 ? images.shape[0] : 0; }
  int64_t height() const { return images.shape[1]; }
  int64_t width() const { return images.shape[2]; }
  int64_t channels() const { return images.shape[3]; }
  bool labeled() const { return !labels.empty(); }

  Dataset subset(const std::vector<int64_t>& idx) const {
    Dataset out;
    out.images = gather_rows(images, idx);
    if (labeled()) {
      out.labels.reserve(idx.size());
      for (int64_t i : idx) out.labels.push_back(labels.at(static_cast<size_t>(i)));
    }
    return out;
  }
};

enum class CorpusStyle { Standard, Shifted };

constexpr int kNumShapeClasses = 10;

namespace detail {

// Rasterizers share one convention: coordinates are pixel centers in [0,1)^2
// relative to the image, cx/cy the shape center, r the half-extent.
inline bool in_shape(int cls, double x, double y, double cx, double cy, double r, double aux) {
  double dx = x - cx, dy = y - cy;
  switch (cls) {
    case 0:  // disk
      return dx * dx + dy * dy <= r * r;
    case 1:  // square
      return std::abs(dx) <= r && std::abs(dy) <= r;
    case 2:  // upward triangle
      return dy <= r && dy >= -r && std::abs(dx) <= (dy + r) / 2.0;
    case 3:  // plus
      return (std::abs(dx) <= r * 0.33 && std::abs(dy) <= r) ||
             (std::abs(dy) <= r * 0.33 && std::abs(dx) <= r);
    case 4: {  // ring
      double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r);
    }
    case 5:  // horizontal stripes
      return std::abs(dx) <= r && std::abs(dy) <= r &&
             std::fmod((dy + r) * (3.0 / r), 2.0) < 1.0;
    case 6:  // vertical stripes
      return std::abs(dx) <= r && std::abs(dy) <= r &&
             std::fmod((dx + r) * (3.0 / r), 2.0) < 1.0;
    case 7:  // diamond
      return std::abs(dx) + std::abs(dy) <= r;
    case 8:  // checkerboard patch
      if (std::abs(dx) > r || std::abs(dy) > r) return false;
      return (static_cast<int>(std::floor((dx + r) * (2.0 / r))) +
              static_cast<int>(std::floor((dy + r) * (2.0 / r)))) % 2 == 0;
    case 9: {  // three dots
      double rr = r * 0.38;
      double ox[3] = {-0.55 * r, 0.55 * r, 0.0};
      double oy[3] = {0.45 * r, 0.45 * r, -0.55 * r};
      for (int i = 0; i < 3; ++i) {
        double ddx = dx - ox[i] * (0.8 + 0.4 * aux), ddy = dy - oy[i];
        if (ddx * ddx + ddy * ddy <= rr * rr) return true;
      }
      return false;
    }
    default:
      return false;
  }
}

}  // namespace detail

inline Tensor<float> render_shape(int cls, int64_t h, int64_t w, int64_t c, CorpusStyle style,
                                  Rng& rng) {
  if (cls < 0 || cls >= kNumShapeClasses) throw InputError("shape class out of range");
  Tensor<float> img({h, w, c});
  std::uniform_real_distribution<double> uni(0.0, 1.0);

  double bg[4] = {0, 0, 0, 0}, fg[4] = {0, 0, 0, 0};
  double gx = 0, gy = 0, gscale = 0;
  if (style == CorpusStyle::Standard) {
    for (int64_t ch = 0; ch < c; ++ch) bg[ch % 4] = 0.08 + 0.30 * uni(rng);
    for (int64_t ch = 0; ch < c; ++ch) fg[ch % 4] = 0.58 + 0.38 * uni(rng);
  } else {
    // shifted style: bright gradient backgrounds, dark foregrounds
    for (int64_t ch = 0; ch < c; ++ch) bg[ch % 4] = 0.55 + 0.35 * uni(rng);
    for (int64_t ch = 0; ch < c; ++ch) fg[ch % 4] = 0.05 + 0.35 * uni(rng);
    double ang = 2.0 * M_PI * uni(rng);
    gx = std::cos(ang);
    gy = std::sin(ang);
    gscale = 0.25 + 0.2 * uni(rng);
  }
  double cx = 0.5 + (uni(rng) - 0.5) * 0.3;
  double cy = 0.5 + (uni(rng) - 0.5) * 0.3;
  double rlo = style == CorpusStyle::Standard ? 0.22 : 0.16;
  double rhi = style == CorpusStyle::Standard ? 0.38 : 0.30;
  double r = rlo + (rhi - rlo) * uni(rng);
  double aux = uni(rng);
  double noise_sd = style == CorpusStyle::Standard ? 0.05 : 0.03;
  std::normal_distribution<double> noise(0.0, noise_sd);

  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      double px = (static_cast<double>(x) + 0.5) / static_cast<double>(w);
      double py = (static_cast<double>(y) + 0.5) / static_cast<double>(h);
      bool inside = detail::in_shape(cls, px, py, cx, cy, r, aux);
      double grad = style == CorpusStyle::Shifted ? gscale * (gx * (px - 0.5) + gy * (py - 0.5)) : 0.0;
      for (int64_t ch = 0; ch < c; ++ch) {
        double v = (inside ? fg[ch % 4] : bg[ch % 4]) + grad + noise(rng);
        img.data[static_cast<size_t>((y * w + x) * c + ch)] =
            static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }

  // Occluder patches: a slice of every corpus carries small textured
  // rectangles, so models trained or queried on it see patch-structured
  // inputs instead of only smooth shape scenes.
  if (uni(rng) < 0.5) {
    int n_patch = uni(rng) < 0.3 ? 2 : 1;
    for (int p = 0; p < n_patch; ++p) {
      int64_t pw = 3 + static_cast<int64_t>(uni(rng) * static_cast<double>(w / 2 - 2));
      int64_t ph = 3 + static_cast<int64_t>(uni(rng) * static_cast<double>(h / 2 - 2));
      int64_t x0 = static_cast<int64_t>(uni(rng) * static_cast<double>(w - pw));
      int64_t y0 = static_cast<int64_t>(uni(rng) * static_cast<double>(h - ph));
      bool textured = uni(rng) < 0.5;
      double base[4] = {0, 0, 0, 0};
      for (int64_t ch = 0; ch < c; ++ch) base[ch % 4] = uni(rng);
      for (int64_t y = y0; y < y0 + ph; ++y)
        for (int64_t x = x0; x < x0 + pw; ++x)
          for (int64_t ch = 0; ch < c; ++ch) {
            double v = textured ? uni(rng) : base[ch % 4] + noise(rng);
            img.data[static_cast<size_t>((y * w + x) * c + ch)] =
                static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
    }
  }
  return img;
}

// Deterministic corpus: sample i is derived from (seed, style, i) alone, so
// corpora of different sizes share a common prefix and reruns are identical.
inline Dataset make_shape_corpus(int64_t n, int64_t h, int64_t w, int64_t c, CorpusStyle style,
                                 uint64_t seed) {
  if (n <= 0) throw InputError("corpus size must be positive");
  Dataset d;
  d.images = Tensor<float>({n, h, w, c});
  d.labels.resize(static_cast<size_t>(n));
  uint64_t style_tag = style == CorpusStyle::Standard ? 0x5354u : 0x5348u;
  for (int64_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, style_tag, static_cast<uint64_t>(i)));
    int cls = static_cast<int>(i % kNumShapeClasses);
    Tensor<float> img = render_shape(cls, h, w, c, style, rng);
    std::copy(img.data.begin(), img.data.end(), d.images.data.begin() + i * h * w * c);
    d.labels[static_cast<size_t>(i)] = cls;
  }
  return d;
}

// Reads the classic binary image-batch layout: per record one label byte then
// 3*1024 bytes, channel-planar, 32x32 row-major. Returns NHWC floats in [0,1].
inline Dataset load_binary_batch(const std::filesystem::path& path, int64_t max_records = -1) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open image batch: " + path.string());
  constexpr int64_t kH = 32, kW = 32, kC = 3, kRecord = 1 + kH * kW * kC;
  is.seekg(0, std::ios::end);
  int64_t bytes = static_cast<int64_t>(is.tellg());
  is.seekg(0, std::ios::beg);
  if (bytes % kRecord != 0) throw IntegrityError("image batch size is not a whole record count");
  int64_t n = bytes / kRecord;
  if (max_records >= 0) n = std::min(n, max_records);
  Dataset d;
  d.images = Tensor<float>({n, kH, kW, kC});
  d.labels.resize(static_cast<size_t>(n));
  std::vector<unsigned char> rec(kRecord);
  for (int64_t i = 0; i < n; ++i) {
    is.read(reinterpret_cast<char*>(rec.data()), kRecord);
    if (is.gcount() != kRecord) throw IntegrityError("image batch truncated");
    d.labels[static_cast<size_t>(i)] = rec[0];
    for (int64_t ch = 0; ch < kC; ++ch)
      for (int64_t y = 0; y < kH; ++y)
        for (int64_t x = 0; x < kW; ++x)
          d.images.at4(i, y, x, ch) =
              static_cast<float>(rec[1 + ch * kH * kW + y * kW + x]) / 255.0f;
  }
  return d;
}

inline std::pair<Dataset, Dataset> split_dataset(const Dataset& d, int64_t n_first) {
  if (n_first < 0 || n_first > d.size()) throw InputError("split point out of range");
  std::vector<int64_t> a(static_cast<size_t>(n_first)), b(static_cast<size_t>(d.size() - n_first));
  std::iota(a.begin(), a.end(), 0);
  std::iota(b.begin(), b.end(), n_first);
  return {d.subset(a), d.subset(b)};
}

// Label-stratified sample without replacement: as even a per-class split as
// n allows, deterministic given the seed.
inline Dataset stratified_sample(const Dataset& d, int64_t n, uint64_t seed) {
  if (!d.labeled()) throw InputError("stratified sampling needs labels");
  if (n <= 0 || n > d.size()) throw InputError("sample size out of range");
  std::vector<std::vector<int64_t>> by_class;
  for (int64_t i = 0; i < d.size(); ++i) {
    int cls = d.labels[static_cast<size_t>(i)];
    if (cls < 0) throw InputError("negative label in stratified sampling");
    if (static_cast<size_t>(cls) >= by_class.size()) by_class.resize(static_cast<size_t>(cls) + 1);
    by_class[static_cast<size_t>(cls)].push_back(i);
  }
  Rng rng = make_stream(seed, "stratified-sample");
  for (auto& v : by_class) {
    for (size_t i = v.size(); i > 1; --i) {
      std::uniform_int_distribution<size_t> pick(0, i - 1);
      std::swap(v[i - 1], v[pick(rng)]);
    }
  }
  std::vector<int64_t> chosen;
  size_t k = 0;
  std::vector<size_t> cursor(by_class.size(), 0);
  while (static_cast<int64_t>(chosen.size()) < n) {
    size_t cls = k % by_class.size();
    ++k;
    if (cursor[cls] < by_class[cls].size()) chosen.push_back(by_class[cls][cursor[cls]++]);
    if (k > by_class.size() * (d.images.shape[0] + 1ull)) break;  // all exhausted
  }
  if (static_cast<int64_t>(chosen.size()) < n) throw InputError("not enough samples to stratify");
  std::sort(chosen.begin(), chosen.end());
  return d.subset(chosen);
}

// Removes rows of `d` whose indices appear in `taken` (for disjoint splits).
inline Dataset drop_rows(const Dataset& d, const std::vector<int64_t>& taken) {
  std::vector<char> gone(static_cast<size_t>(d.size()), 0);
  for (int64_t i : taken) gone.at(static_cast<size_t>(i)) = 1;
  std::vector<int64_t> keep;
  for (int64_t i = 0; i < d.size(); ++i)
    if (!gone[static_cast<size_t>(i)]) keep.push_back(i);
  return d.subset(keep);
}

inline std::vector<std::vector<int64_t>> batch_indices(int64_t n, int64_t batch,
                                                       bool drop_last = false) {
  if (batch <= 0) throw InputError("batch size must be positive");
  std::vector<std::vector<int64_t>> out;
  for (int64_t s = 0; s < n; s += batch) {
    int64_t e = std::min(n, s + batch);
    if (drop_last && e - s < batch) break;
    std::vector<int64_t> b(static_cast<size_t>(e - s));
    std::iota(b.begin(), b.end(), s);
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace encmark
