#pragma once

// Minimal CPU layer library: single-sample CHW tensors, explicit forward
// caches and hand-written backward passes. Parameters live in a
// ParameterSet owned by the model; gradients go to a caller-owned
// Gradients buffer so forward/backward never mutate the model.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace fcam::nn {

using Rng = std::mt19937_64;

struct Tensor {
  int c = 0;
  int h = 0;
  int w = 0;
  std::vector<float> v;

  Tensor() = default;
  Tensor(int channels, int height, int width, float fill = 0.0f)
      : c(channels), h(height), w(width), v(static_cast<std::size_t>(channels) * height * width, fill) {}

  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  std::size_t size() const { return v.size(); }
  float* channel(int ch) { return v.data() + ch * plane(); }
  const float* channel(int ch) const { return v.data() + ch * plane(); }
  bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }
};

struct Param {
  std::string name;
  std::vector<int> shape;
  std::vector<float> value;
  bool decay = true;  // weight decay applies
};

class ParameterSet {
 public:
  std::size_t add(std::string name, std::vector<int> shape, std::vector<float> init, bool decay = true);

  std::size_t size() const { return params_.size(); }
  const Param& operator[](std::size_t i) const { return params_[i]; }
  Param& operator[](std::size_t i) { return params_[i]; }
  const std::vector<Param>& all() const { return params_; }

  std::size_t scalar_count() const;
  /// FNV-1a over names and raw value bytes; equal hashes for bitwise-equal sets.
  std::uint64_t hash() const;
  bool all_finite() const;

 private:
  std::vector<Param> params_;
};

class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(const ParameterSet& params);

  std::vector<float>& operator[](std::size_t i) { return g_[i]; }
  const std::vector<float>& operator[](std::size_t i) const { return g_[i]; }
  std::size_t size() const { return g_.size(); }

  void zero();
  void scale(float s);
  double squared_norm() const;

 private:
  std::vector<std::vector<float>> g_;
};

struct SgdOptions {
  float lr = 0.01f;
  float momentum = 0.9f;
  float weight_decay = 1e-4f;
};

/// Heavy-ball SGD (the PyTorch formulation: v = mu*v + g + wd*w; w -= lr*v).
class Sgd {
 public:
  Sgd(const ParameterSet& params, SgdOptions opts);
  void step(ParameterSet& params, const Gradients& grads);
  const SgdOptions& options() const { return opts_; }
  void set_lr(float lr) { opts_.lr = lr; }

 private:
  SgdOptions opts_;
  std::vector<std::vector<float>> velocity_;
};

// ---------------------------------------------------------------------------
// Layers

struct Conv2d {
  int in_ch = 0;
  int out_ch = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  std::size_t weight = 0;
  std::size_t bias = 0;

  struct Cache {
    int in_c = 0, in_h = 0, in_w = 0;
    std::vector<float> col;
  };

  static Conv2d create(ParameterSet& ps, const std::string& name, int in_ch, int out_ch, int kernel, int stride,
                       Rng& rng);

  int out_size(int in) const { return (in + 2 * pad - kernel) / stride + 1; }
  std::size_t param_count() const {
    return static_cast<std::size_t>(out_ch) * in_ch * kernel * kernel + out_ch;
  }

  Tensor forward(const ParameterSet& ps, const Tensor& x, Cache* cache) const;
  /// Accumulates weight/bias gradients; returns dx when need_dx.
  Tensor backward(const ParameterSet& ps, const Tensor& dy, const Cache& cache, Gradients& grads,
                  bool need_dx) const;
};

/// Group normalization with per-channel affine; independent of batch size.
struct GroupNorm {
  int channels = 0;
  int groups = 1;
  float eps = 1e-5f;
  std::size_t gamma = 0;
  std::size_t beta = 0;

  struct Cache {
    std::vector<float> xhat;
    std::vector<float> inv_std;
  };

  static GroupNorm create(ParameterSet& ps, const std::string& name, int channels);
  std::size_t param_count() const { return 2 * static_cast<std::size_t>(channels); }

  Tensor forward(const ParameterSet& ps, const Tensor& x, Cache* cache) const;
  Tensor backward(const ParameterSet& ps, const Tensor& dy, const Cache& cache, Gradients& grads) const;
};

/// conv -> group norm -> ReLU.
struct ConvBlock {
  Conv2d conv;
  GroupNorm norm;

  struct Cache {
    Conv2d::Cache conv;
    GroupNorm::Cache norm;
    Tensor out;
  };

  static ConvBlock create(ParameterSet& ps, const std::string& name, int in_ch, int out_ch, int stride, Rng& rng);
  std::size_t param_count() const { return conv.param_count() + norm.param_count(); }

  Tensor forward(const ParameterSet& ps, const Tensor& x, Cache* cache) const;
  Tensor backward(const ParameterSet& ps, const Tensor& dy, const Cache& cache, Gradients& grads,
                  bool need_dx) const;
};

struct Linear {
  int in_features = 0;
  int out_features = 0;
  std::size_t weight = 0;
  std::size_t bias = 0;

  static Linear create(ParameterSet& ps, const std::string& name, int in, int out, Rng& rng);
  std::size_t param_count() const { return static_cast<std::size_t>(in_features) * out_features + out_features; }

  std::vector<float> forward(const ParameterSet& ps, const std::vector<float>& x) const;
  std::vector<float> backward(const ParameterSet& ps, const std::vector<float>& dy, const std::vector<float>& x,
                              Gradients& grads) const;
};

// Stateless ops.
std::vector<float> global_average_pool(const Tensor& x);
Tensor global_average_pool_backward(const std::vector<float>& dy, int c, int h, int w);
Tensor upsample_nearest2x(const Tensor& x);
Tensor upsample_nearest2x_backward(const Tensor& dy);
Tensor concat_channels(const Tensor& a, const Tensor& b);
std::pair<Tensor, Tensor> split_channels(const Tensor& d, int first_channels);
std::vector<double> softmax(const std::vector<float>& logits);

}  // namespace fcam::nn
