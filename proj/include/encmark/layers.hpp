#pragma once

// Layer zoo with explicit forward/backward passes. Backward always produces
// the gradient w.r.t. the layer input, which is what lets trigger pixels be
// optimized through a whole encoder. Convolutions go through im2col + GEMM.

#include <Eigen/Dense>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "encmark/core.hpp"

namespace encmark {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// One named parameter tensor plus its gradient buffer and trainability flag.
template <typename T>
struct Param {
  std::string name;
  std::vector<int64_t> shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool trainable = true;
  bool is_conv_weight = false;  // magnitude pruning targets exactly these

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

// Buffers are state that persists but is not optimized (batchnorm statistics).
template <typename T>
struct Buffer {
  std::string name;
  std::vector<T> value;
};

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual const char* kind() const = 0;
  virtual Tensor<T> forward(const Tensor<T>& x, bool train) = 0;
  virtual Tensor<T> backward(const Tensor<T>& dy) = 0;
  virtual std::vector<Param<T>*> params() { return {}; }
  virtual std::vector<Buffer<T>*> buffers() { return {}; }
  // Marks normalization parameters non-trainable and statistics non-updating.
  virtual void freeze_norm() {}
  virtual bool has_norm() const { return false; }
};

// ---------------------------------------------------------------------------
// Dense: y = xW + b over (N, in) -> (N, out)

template <typename T>
class Dense : public Layer<T> {
 public:
  Dense(std::string name, int64_t in, int64_t out, Rng& rng, bool bias = true)
      : in_(in), out_(out), use_bias_(bias) {
    w_.name = name + ".weight";
    w_.shape = {in, out};
    w_.value.resize(in * out);
    w_.grad.assign(in * out, T(0));
    fill_normal(w_.value, rng, std::sqrt(2.0 / static_cast<double>(in)));
    if (use_bias_) {
      b_.name = name + ".bias";
      b_.shape = {out};
      b_.value.assign(out, T(0));
      b_.grad.assign(out, T(0));
    }
  }

  const char* kind() const override { return "dense"; }

  Tensor<T> forward(const Tensor<T>& x, bool) override {
    if (x.rank() != 2 || x.dim(1) != in_) throw InputError("dense: bad input width");
    x_ = x;
    int64_t n = x.dim(0);
    Tensor<T> y({n, out_});
    CMapMat<T> xm(x.ptr(), n, in_);
    CMapMat<T> wm(w_.value.data(), in_, out_);
    MapMat<T> ym(y.ptr(), n, out_);
    ym.noalias() = xm * wm;
    if (use_bias_)
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < out_; ++j) y.at2(i, j) += b_.value[j];
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    int64_t n = x_.dim(0);
    CMapMat<T> xm(x_.ptr(), n, in_);
    CMapMat<T> dym(dy.ptr(), n, out_);
    MapMat<T> gwm(w_.grad.data(), in_, out_);
    gwm.noalias() += xm.transpose() * dym;
    if (use_bias_)
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < out_; ++j) b_.grad[j] += dy.at2(i, j);
    Tensor<T> dx({n, in_});
    CMapMat<T> wm(w_.value.data(), in_, out_);
    MapMat<T> dxm(dx.ptr(), n, in_);
    dxm.noalias() = dym * wm.transpose();
    return dx;
  }

  std::vector<Param<T>*> params() override {
    std::vector<Param<T>*> p{&w_};
    if (use_bias_) p.push_back(&b_);
    return p;
  }

 private:
  int64_t in_, out_;
  bool use_bias_;
  Param<T> w_, b_;
  Tensor<T> x_;
};

// ---------------------------------------------------------------------------
// Conv2D: 3x3 (or KxK) stride-1 same-padding convolution, NHWC.

template <typename T>
class Conv2D : public Layer<T> {
 public:
  Conv2D(std::string name, int64_t cin, int64_t cout, int64_t k, Rng& rng)
      : cin_(cin), cout_(cout), k_(k), pad_((k - 1) / 2) {
    w_.name = name + ".weight";
    w_.shape = {k, k, cin, cout};
    w_.value.resize(k * k * cin * cout);
    w_.grad.assign(w_.value.size(), T(0));
    w_.is_conv_weight = true;
    fill_normal(w_.value, rng, std::sqrt(2.0 / static_cast<double>(k * k * cin)));
  }

  const char* kind() const override { return "conv2d"; }

  Tensor<T> forward(const Tensor<T>& x, bool) override {
    if (x.rank() != 4 || x.dim(3) != cin_) throw InputError("conv2d: bad input shape");
    x_shape_ = x.shape;
    int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2);
    im2col(x, col_);
    Tensor<T> y({n, h, w, cout_});
    CMapMat<T> cm(col_.data(), n * h * w, k_ * k_ * cin_);
    CMapMat<T> wm(w_.value.data(), k_ * k_ * cin_, cout_);
    MapMat<T> ym(y.ptr(), n * h * w, cout_);
    ym.noalias() = cm * wm;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    int64_t n = x_shape_[0], h = x_shape_[1], w = x_shape_[2];
    int64_t rows = n * h * w, kk = k_ * k_ * cin_;
    CMapMat<T> dym(dy.ptr(), rows, cout_);
    CMapMat<T> cm(col_.data(), rows, kk);
    MapMat<T> gwm(w_.grad.data(), kk, cout_);
    gwm.noalias() += cm.transpose() * dym;

    // dcol = dy * W^T, then scatter back (col2im).
    dcol_.resize(rows * kk);
    MapMat<T> dcm(dcol_.data(), rows, kk);
    CMapMat<T> wm(w_.value.data(), kk, cout_);
    dcm.noalias() = dym * wm.transpose();

    Tensor<T> dx(x_shape_, T(0));
    int64_t r = 0;
    for (int64_t ni = 0; ni < n; ++ni)
      for (int64_t hi = 0; hi < h; ++hi)
        for (int64_t wi = 0; wi < w; ++wi, ++r) {
          const T* src = dcol_.data() + r * kk;
          int64_t c = 0;
          for (int64_t ky = 0; ky < k_; ++ky) {
            int64_t yy = hi + ky - pad_;
            if (yy < 0 || yy >= h) {
              c += k_ * cin_;
              continue;
            }
            for (int64_t kx = 0; kx < k_; ++kx) {
              int64_t xx = wi + kx - pad_;
              if (xx < 0 || xx >= w) {
                c += cin_;
                continue;
              }
              T* dst = dx.ptr() + ((ni * h + yy) * w + xx) * cin_;
              for (int64_t ci = 0; ci < cin_; ++ci) dst[ci] += src[c++];
            }
          }
        }
    return dx;
  }

  std::vector<Param<T>*> params() override { return {&w_}; }

 private:
  void im2col(const Tensor<T>& x, std::vector<T>& col) const {
    int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2);
    int64_t kk = k_ * k_ * cin_;
    col.assign(n * h * w * kk, T(0));
    int64_t r = 0;
    for (int64_t ni = 0; ni < n; ++ni)
      for (int64_t hi = 0; hi < h; ++hi)
        for (int64_t wi = 0; wi < w; ++wi, ++r) {
          T* dst = col.data() + r * kk;
          int64_t c = 0;
          for (int64_t ky = 0; ky < k_; ++ky) {
            int64_t yy = hi + ky - pad_;
            if (yy < 0 || yy >= h) {
              c += k_ * cin_;
              continue;
            }
            for (int64_t kx = 0; kx < k_; ++kx) {
              int64_t xx = wi + kx - pad_;
              if (xx < 0 || xx >= w) {
                c += cin_;
                continue;
              }
              const T* src = x.ptr() + ((ni * h + yy) * w + xx) * cin_;
              for (int64_t ci = 0; ci < cin_; ++ci) dst[c++] = src[ci];
            }
          }
        }
  }

  int64_t cin_, cout_, k_, pad_;
  Param<T> w_;
  std::vector<int64_t> x_shape_;
  std::vector<T> col_, dcol_;
};

// ---------------------------------------------------------------------------
// BatchNorm2D: per-channel over (N,H,W). Training mode uses batch statistics
// and updates running stats; eval/frozen mode uses running stats only.

template <typename T>
class BatchNorm2D : public Layer<T> {
 public:
  BatchNorm2D(std::string name, int64_t channels, double momentum = 0.1, double eps = 1e-5)
      : c_(channels), momentum_(momentum), eps_(eps) {
    gamma_.name = name + ".gamma";
    gamma_.shape = {channels};
    gamma_.value.assign(channels, T(1));
    gamma_.grad.assign(channels, T(0));
    beta_.name = name + ".beta";
    beta_.shape = {channels};
    beta_.value.assign(channels, T(0));
    beta_.grad.assign(channels, T(0));
    run_mean_.name = name + ".running_mean";
    run_mean_.value.assign(channels, T(0));
    run_var_.name = name + ".running_var";
    run_var_.value.assign(channels, T(1));
  }

  const char* kind() const override { return "batchnorm2d"; }
  bool has_norm() const override { return true; }

  void freeze_norm() override {
    frozen_ = true;
    gamma_.trainable = false;
    beta_.trainable = false;
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    if (x.rank() != 4 || x.dim(3) != c_) throw InputError("batchnorm2d: bad input shape");
    x_ = x;
    train_mode_ = train && !frozen_;
    int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2);
    int64_t m = n * h * w;
    mean_.assign(c_, 0.0);
    var_.assign(c_, 0.0);
    if (train_mode_) {
      const T* p = x.ptr();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t ci = 0; ci < c_; ++ci) mean_[ci] += p[i * c_ + ci];
      for (auto& v : mean_) v /= static_cast<double>(m);
      for (int64_t i = 0; i < m; ++i)
        for (int64_t ci = 0; ci < c_; ++ci) {
          double d = p[i * c_ + ci] - mean_[ci];
          var_[ci] += d * d;
        }
      for (auto& v : var_) v /= static_cast<double>(m);
      for (int64_t ci = 0; ci < c_; ++ci) {
        run_mean_.value[ci] = static_cast<T>((1 - momentum_) * run_mean_.value[ci] + momentum_ * mean_[ci]);
        run_var_.value[ci] = static_cast<T>((1 - momentum_) * run_var_.value[ci] + momentum_ * var_[ci]);
      }
    } else {
      for (int64_t ci = 0; ci < c_; ++ci) {
        mean_[ci] = run_mean_.value[ci];
        var_[ci] = run_var_.value[ci];
      }
    }
    inv_std_.resize(c_);
    for (int64_t ci = 0; ci < c_; ++ci) inv_std_[ci] = 1.0 / std::sqrt(var_[ci] + eps_);

    Tensor<T> y(x.shape);
    xhat_.resize(x.data.size());
    const T* p = x.ptr();
    T* q = y.ptr();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t ci = 0; ci < c_; ++ci) {
        double xh = (p[i * c_ + ci] - mean_[ci]) * inv_std_[ci];
        xhat_[i * c_ + ci] = xh;
        q[i * c_ + ci] = static_cast<T>(xh * gamma_.value[ci] + beta_.value[ci]);
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    int64_t n = x_.dim(0), h = x_.dim(1), w = x_.dim(2);
    int64_t m = n * h * w;
    Tensor<T> dx(x_.shape);
    const T* dyp = dy.ptr();

    std::vector<double> sum_dy(c_, 0.0), sum_dy_xhat(c_, 0.0);
    for (int64_t i = 0; i < m; ++i)
      for (int64_t ci = 0; ci < c_; ++ci) {
        double g = dyp[i * c_ + ci];
        sum_dy[ci] += g;
        sum_dy_xhat[ci] += g * xhat_[i * c_ + ci];
      }
    for (int64_t ci = 0; ci < c_; ++ci) {
      gamma_.grad[ci] += static_cast<T>(sum_dy_xhat[ci]);
      beta_.grad[ci] += static_cast<T>(sum_dy[ci]);
    }

    T* dxp = dx.ptr();
    if (train_mode_) {
      for (int64_t i = 0; i < m; ++i)
        for (int64_t ci = 0; ci < c_; ++ci) {
          double g = dyp[i * c_ + ci];
          double t = g - sum_dy[ci] / m - xhat_[i * c_ + ci] * sum_dy_xhat[ci] / m;
          dxp[i * c_ + ci] = static_cast<T>(gamma_.value[ci] * inv_std_[ci] * t);
        }
    } else {
      for (int64_t i = 0; i < m; ++i)
        for (int64_t ci = 0; ci < c_; ++ci)
          dxp[i * c_ + ci] = static_cast<T>(gamma_.value[ci] * inv_std_[ci] * dyp[i * c_ + ci]);
    }
    return dx;
  }

  std::vector<Param<T>*> params() override { return {&gamma_, &beta_}; }
  std::vector<Buffer<T>*> buffers() override { return {&run_mean_, &run_var_}; }

 private:
  int64_t c_;
  double momentum_, eps_;
  bool frozen_ = false, train_mode_ = false;
  Param<T> gamma_, beta_;
  Buffer<T> run_mean_, run_var_;
  Tensor<T> x_;
  std::vector<double> mean_, var_, inv_std_, xhat_;
};

// ---------------------------------------------------------------------------
// ReLU

template <typename T>
class ReLU : public Layer<T> {
 public:
  const char* kind() const override { return "relu"; }

  Tensor<T> forward(const Tensor<T>& x, bool) override {
    mask_.resize(x.data.size());
    Tensor<T> y(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) {
      bool pos = x.data[i] > T(0);
      mask_[i] = pos;
      y.data[i] = pos ? x.data[i] : T(0);
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dx(dy.shape);
    for (size_t i = 0; i < dy.data.size(); ++i) dx.data[i] = mask_[i] ? dy.data[i] : T(0);
    return dx;
  }

 private:
  std::vector<char> mask_;
};

// ---------------------------------------------------------------------------
// MaxPool 2x2 stride 2 (floor on odd sizes)

template <typename T>
class MaxPool2 : public Layer<T> {
 public:
  const char* kind() const override { return "maxpool2"; }

  Tensor<T> forward(const Tensor<T>& x, bool) override {
    if (x.rank() != 4) throw InputError("maxpool2: expects NHWC");
    x_shape_ = x.shape;
    int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    int64_t ho = h / 2, wo = w / 2;
    Tensor<T> y({n, ho, wo, c});
    arg_.resize(y.data.size());
    for (int64_t ni = 0; ni < n; ++ni)
      for (int64_t hi = 0; hi < ho; ++hi)
        for (int64_t wi = 0; wi < wo; ++wi)
          for (int64_t ci = 0; ci < c; ++ci) {
            T best = x.at4(ni, 2 * hi, 2 * wi, ci);
            int64_t besti = ((ni * h + 2 * hi) * w + 2 * wi) * c + ci;
            for (int dy0 = 0; dy0 < 2; ++dy0)
              for (int dx0 = 0; dx0 < 2; ++dx0) {
                T v = x.at4(ni, 2 * hi + dy0, 2 * wi + dx0, ci);
                if (v > best) {
                  best = v;
                  besti = ((ni * h + 2 * hi + dy0) * w + 2 * wi + dx0) * c + ci;
                }
              }
            int64_t oi = ((ni * ho + hi) * wo + wi) * c + ci;
            y.data[oi] = best;
            arg_[oi] = besti;
          }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dx(x_shape_, T(0));
    for (size_t i = 0; i < dy.data.size(); ++i) dx.data[arg_[i]] += dy.data[i];
    return dx;
  }

 private:
  std::vector<int64_t> x_shape_;
  std::vector<int64_t> arg_;
};

// ---------------------------------------------------------------------------
// GlobalAvgPool: (N,H,W,C) -> (N,C)

template <typename T>
class GlobalAvgPool : public Layer<T> {
 public:
  const char* kind() const override { return "gap"; }

  Tensor<T> forward(const Tensor<T>& x, bool) override {
    if (x.rank() != 4) throw InputError("gap: expects NHWC");
    x_shape_ = x.shape;
    int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    Tensor<T> y({n, c}, T(0));
    for (int64_t ni = 0; ni < n; ++ni) {
      for (int64_t i = 0; i < h * w; ++i) {
        const T* src = x.ptr() + (ni * h * w + i) * c;
        for (int64_t ci = 0; ci < c; ++ci) y.at2(ni, ci) += src[ci];
      }
      for (int64_t ci = 0; ci < c; ++ci) y.at2(ni, ci) /= static_cast<T>(h * w);
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    int64_t n = x_shape_[0], h = x_shape_[1], w = x_shape_[2], c = x_shape_[3];
    Tensor<T> dx(x_shape_);
    for (int64_t ni = 0; ni < n; ++ni)
      for (int64_t i = 0; i < h * w; ++i) {
        T* dst = dx.ptr() + (ni * h * w + i) * c;
        for (int64_t ci = 0; ci < c; ++ci) dst[ci] = dy.at2(ni, ci) / static_cast<T>(h * w);
      }
    return dx;
  }

 private:
  std::vector<int64_t> x_shape_;
};

// ---------------------------------------------------------------------------
// Residual block: conv-bn-relu-conv-bn (+ 1x1 projection when widths differ),
// then add + relu.

template <typename T>
class ResidualBlock : public Layer<T> {
 public:
  ResidualBlock(std::string name, int64_t cin, int64_t cout, Rng& rng)
      : conv1_(name + ".conv1", cin, cout, 3, rng),
        bn1_(name + ".bn1", cout),
        conv2_(name + ".conv2", cout, cout, 3, rng),
        bn2_(name + ".bn2", cout) {
    if (cin != cout) {
      proj_ = std::make_unique<Conv2D<T>>(name + ".proj", cin, cout, 1, rng);
      proj_bn_ = std::make_unique<BatchNorm2D<T>>(name + ".proj_bn", cout);
    }
  }

  const char* kind() const override { return "residual"; }
  bool has_norm() const override { return true; }

  void freeze_norm() override {
    bn1_.freeze_norm();
    bn2_.freeze_norm();
    if (proj_bn_) proj_bn_->freeze_norm();
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    Tensor<T> h = relu1_.forward(bn1_.forward(conv1_.forward(x, train), train), train);
    Tensor<T> h2 = bn2_.forward(conv2_.forward(h, train), train);
    Tensor<T> skip = proj_ ? proj_bn_->forward(proj_->forward(x, train), train) : x;
    if (!h2.same_shape(skip)) throw InputError("residual: shape mismatch on skip path");
    Tensor<T> sum(h2.shape);
    for (size_t i = 0; i < sum.data.size(); ++i) sum.data[i] = h2.data[i] + skip.data[i];
    return relu_out_.forward(sum, train);
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dsum = relu_out_.backward(dy);
    Tensor<T> dx_main = conv1_.backward(bn1_.backward(relu1_.backward(conv2_.backward(bn2_.backward(dsum)))));
    Tensor<T> dx_skip = proj_ ? proj_->backward(proj_bn_->backward(dsum)) : dsum;
    for (size_t i = 0; i < dx_main.data.size(); ++i) dx_main.data[i] += dx_skip.data[i];
    return dx_main;
  }

  std::vector<Param<T>*> params() override {
    std::vector<Param<T>*> out;
    for (Layer<T>* l : children()) {
      auto p = l->params();
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }

  std::vector<Buffer<T>*> buffers() override {
    std::vector<Buffer<T>*> out;
    for (Layer<T>* l : children()) {
      auto b = l->buffers();
      out.insert(out.end(), b.begin(), b.end());
    }
    return out;
  }

 private:
  std::vector<Layer<T>*> children() {
    std::vector<Layer<T>*> c{&conv1_, &bn1_, &conv2_, &bn2_};
    if (proj_) {
      c.push_back(proj_.get());
      c.push_back(proj_bn_.get());
    }
    return c;
  }

  Conv2D<T> conv1_;
  BatchNorm2D<T> bn1_;
  Conv2D<T> conv2_;
  BatchNorm2D<T> bn2_;
  std::unique_ptr<Conv2D<T>> proj_;
  std::unique_ptr<BatchNorm2D<T>> proj_bn_;
  ReLU<T> relu1_, relu_out_;
};

// ---------------------------------------------------------------------------
// Net: a sequential stack.

template <typename T = float>
class Net {
 public:
  Net() = default;
  Net(Net&&) noexcept = default;
  Net& operator=(Net&&) noexcept = default;
  Net(const Net&) = delete;
  Net& operator=(const Net&) = delete;

  void add(std::unique_ptr<Layer<T>> layer) { layers_.push_back(std::move(layer)); }

  Tensor<T> forward(const Tensor<T>& x, bool train) {
    Tensor<T> h = x;
    for (auto& l : layers_) h = l->forward(h, train);
    return h;
  }

  // Returns gradient w.r.t. the net input.
  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> g = dy;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }

  std::vector<Param<T>*> params() {
    std::vector<Param<T>*> out;
    for (auto& l : layers_) {
      auto p = l->params();
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }

  std::vector<const Param<T>*> params() const {
    std::vector<const Param<T>*> out;
    for (auto& l : layers_) {
      auto p = const_cast<Layer<T>&>(*l).params();
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }

  std::vector<Buffer<T>*> buffers() {
    std::vector<Buffer<T>*> out;
    for (auto& l : layers_) {
      auto b = l->buffers();
      out.insert(out.end(), b.begin(), b.end());
    }
    return out;
  }

  void zero_grad() {
    for (auto* p : params()) p->zero_grad();
  }

  void freeze_norm() {
    for (auto& l : layers_) l->freeze_norm();
  }

  bool has_norm() const {
    for (auto& l : layers_)
      if (l->has_norm()) return true;
    return false;
  }

  size_t layer_count() const { return layers_.size(); }
  Layer<T>& layer(size_t i) { return *layers_[i]; }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

// ---------------------------------------------------------------------------
// Flat parameter view: flatten/unflatten round-trips bit-exactly and carries
// per-entry trainability. Buffers (running stats) ride along so a snapshot
// restores inference behavior exactly.

template <typename T>
struct ParamVectorEntry {
  std::string name;
  std::vector<int64_t> shape;
  int64_t offset = 0;
  int64_t count = 0;
  bool trainable = true;
  bool is_buffer = false;
};

template <typename T>
struct ParamVector {
  std::vector<ParamVectorEntry<T>> entries;
  std::vector<T> values;
};

template <typename T>
ParamVector<T> flatten(Net<T>& net) {
  ParamVector<T> pv;
  int64_t off = 0;
  for (auto* p : net.params()) {
    pv.entries.push_back({p->name, p->shape, off, p->numel(), p->trainable, false});
    pv.values.insert(pv.values.end(), p->value.begin(), p->value.end());
    off += p->numel();
  }
  for (auto* b : net.buffers()) {
    int64_t n = static_cast<int64_t>(b->value.size());
    pv.entries.push_back({b->name, {n}, off, n, false, true});
    pv.values.insert(pv.values.end(), b->value.begin(), b->value.end());
    off += n;
  }
  return pv;
}

template <typename T>
void unflatten(Net<T>& net, const ParamVector<T>& pv) {
  size_t e = 0;
  for (auto* p : net.params()) {
    if (e >= pv.entries.size() || pv.entries[e].name != p->name || pv.entries[e].count != p->numel())
      throw IntegrityError("parameter layout mismatch at " + p->name);
    std::copy_n(pv.values.begin() + pv.entries[e].offset, p->numel(), p->value.begin());
    ++e;
  }
  for (auto* b : net.buffers()) {
    if (e >= pv.entries.size() || pv.entries[e].name != b->name)
      throw IntegrityError("buffer layout mismatch at " + b->name);
    std::copy_n(pv.values.begin() + pv.entries[e].offset, static_cast<int64_t>(b->value.size()),
                b->value.begin());
    ++e;
  }
}

template <typename T>
uint64_t param_hash(Net<T>& net) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (auto* p : net.params()) h = fnv1a64(p->value.data(), p->value.size() * sizeof(T), h);
  for (auto* b : net.buffers()) h = fnv1a64(b->value.data(), b->value.size() * sizeof(T), h);
  return h;
}

// Copies parameters, buffers, and trainability from src into dst. The two
// nets must share an identical layout (same builder, same spec).
template <typename T>
void copy_state(Net<T>& dst, Net<T>& src) {
  unflatten(dst, flatten(src));
  auto sp = src.params();
  auto dp = dst.params();
  for (size_t i = 0; i < sp.size(); ++i) dp[i]->trainable = sp[i]->trainable;
}

// target <- keep * target + (1 - keep) * online, parameter-wise. Buffers are
// left alone; the target's own forward passes maintain them.
template <typename T>
void ema_update(Net<T>& target, Net<T>& online, double keep) {
  auto tp = target.params();
  auto op = online.params();
  if (tp.size() != op.size()) throw IntegrityError("ema across mismatched nets");
  for (size_t i = 0; i < tp.size(); ++i) {
    if (tp[i]->numel() != op[i]->numel()) throw IntegrityError("ema shape mismatch at " + tp[i]->name);
    for (int64_t j = 0; j < tp[i]->numel(); ++j)
      tp[i]->value[j] = static_cast<T>(keep * static_cast<double>(tp[i]->value[j]) +
                                       (1.0 - keep) * static_cast<double>(op[i]->value[j]));
  }
}

// ---------------------------------------------------------------------------
// Optimizers. Both skip non-trainable parameters.

template <typename T>
class Sgd {
 public:
  explicit Sgd(double lr) : lr_(lr) {}

  void step(Net<T>& net) {
    for (auto* p : net.params()) {
      if (!p->trainable) continue;
      for (int64_t i = 0; i < p->numel(); ++i) p->value[i] -= static_cast<T>(lr_) * p->grad[i];
    }
  }

  double lr() const { return lr_; }

 private:
  double lr_;
};

template <typename T>
class Adam {
 public:
  explicit Adam(double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(b1), b2_(b2), eps_(eps) {}

  void step(Net<T>& net) {
    ++t_;
    auto ps = net.params();
    if (m_.size() != ps.size()) {
      m_.assign(ps.size(), {});
      v_.assign(ps.size(), {});
      for (size_t i = 0; i < ps.size(); ++i) {
        m_[i].assign(ps[i]->numel(), 0.0);
        v_[i].assign(ps[i]->numel(), 0.0);
      }
    }
    double bc1 = 1.0 - std::pow(b1_, t_);
    double bc2 = 1.0 - std::pow(b2_, t_);
    for (size_t i = 0; i < ps.size(); ++i) {
      Param<T>* p = ps[i];
      if (!p->trainable) continue;
      for (int64_t j = 0; j < p->numel(); ++j) {
        double g = p->grad[j];
        m_[i][j] = b1_ * m_[i][j] + (1 - b1_) * g;
        v_[i][j] = b2_ * v_[i][j] + (1 - b2_) * g * g;
        double mh = m_[i][j] / bc1, vh = v_[i][j] / bc2;
        p->value[j] -= static_cast<T>(lr_ * mh / (std::sqrt(vh) + eps_));
      }
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace encmark
