#include "fcam/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

#include <Eigen/Core>

namespace fcam::nn {

namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

std::vector<float> he_normal(std::size_t n, int fan_in, Rng& rng) {
  std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
  std::vector<float> w(n);
  for (auto& v : w) v = dist(rng);
  return w;
}

void im2col(const Tensor& x, int k, int stride, int pad, int oh, int ow, std::vector<float>& col) {
  const std::size_t P = static_cast<std::size_t>(oh) * ow;
  col.assign(static_cast<std::size_t>(x.c) * k * k * P, 0.0f);
  for (int ci = 0; ci < x.c; ++ci) {
    const float* src = x.channel(ci);
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        float* dst = col.data() + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * P;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= x.h) continue;
          const float* row = src + static_cast<std::size_t>(iy) * x.w;
          float* drow = dst + static_cast<std::size_t>(oy) * ow;
          if (stride == 1) {
            const int ox_lo = std::max(0, pad - kx);
            const int ox_hi = std::min(ow, x.w + pad - kx);
            if (ox_hi > ox_lo) std::memcpy(drow + ox_lo, row + ox_lo + kx - pad, sizeof(float) * (ox_hi - ox_lo));
          } else {
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride + kx - pad;
              if (ix >= 0 && ix < x.w) drow[ox] = row[ix];
            }
          }
        }
      }
    }
  }
}

void col2im(const std::vector<float>& col, int k, int stride, int pad, int oh, int ow, Tensor& dx) {
  const std::size_t P = static_cast<std::size_t>(oh) * ow;
  for (int ci = 0; ci < dx.c; ++ci) {
    float* dst = dx.channel(ci);
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const float* src = col.data() + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * P;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= dx.h) continue;
          float* row = dst + static_cast<std::size_t>(iy) * dx.w;
          const float* srow = src + static_cast<std::size_t>(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < dx.w) row[ix] += srow[ox];
          }
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------

std::size_t ParameterSet::add(std::string name, std::vector<int> shape, std::vector<float> init, bool decay) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  if (n != init.size()) throw std::invalid_argument("parameter init does not match shape: " + name);
  params_.push_back({std::move(name), std::move(shape), std::move(init), decay});
  return params_.size() - 1;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::uint64_t ParameterSet::hash() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& p : params_) {
    mix(p.name.data(), p.name.size());
    mix(p.value.data(), p.value.size() * sizeof(float));
  }
  return h;
}

bool ParameterSet::all_finite() const {
  for (const auto& p : params_)
    for (float v : p.value)
      if (!std::isfinite(v)) return false;
  return true;
}

Gradients::Gradients(const ParameterSet& params) {
  g_.reserve(params.size());
  for (const auto& p : params.all()) g_.emplace_back(p.value.size(), 0.0f);
}

void Gradients::zero() {
  for (auto& g : g_) std::fill(g.begin(), g.end(), 0.0f);
}

void Gradients::scale(float s) {
  for (auto& g : g_)
    for (auto& v : g) v *= s;
}

double Gradients::squared_norm() const {
  double s = 0.0;
  for (const auto& g : g_)
    for (float v : g) s += static_cast<double>(v) * v;
  return s;
}

Sgd::Sgd(const ParameterSet& params, SgdOptions opts) : opts_(opts) {
  for (const auto& p : params.all()) velocity_.emplace_back(p.value.size(), 0.0f);
}

void Sgd::step(ParameterSet& params, const Gradients& grads) {
  if (grads.size() != params.size() || velocity_.size() != params.size())
    throw std::invalid_argument("optimizer/parameter mismatch");
  if (opts_.lr == 0.0f) return;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].value;
    auto& v = velocity_[i];
    const auto& g = grads[i];
    const float wd = params[i].decay ? opts_.weight_decay : 0.0f;
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = opts_.momentum * v[j] + g[j] + wd * w[j];
      w[j] -= opts_.lr * v[j];
    }
  }
}

// ---------------------------------------------------------------------------

Conv2d Conv2d::create(ParameterSet& ps, const std::string& name, int in_ch, int out_ch, int kernel, int stride,
                      Rng& rng) {
  Conv2d c;
  c.in_ch = in_ch;
  c.out_ch = out_ch;
  c.kernel = kernel;
  c.stride = stride;
  c.pad = kernel / 2;
  const int fan_in = in_ch * kernel * kernel;
  c.weight = ps.add(name + ".weight", {out_ch, in_ch, kernel, kernel},
                    he_normal(static_cast<std::size_t>(out_ch) * fan_in, fan_in, rng));
  c.bias = ps.add(name + ".bias", {out_ch}, std::vector<float>(out_ch, 0.0f), false);
  return c;
}

Tensor Conv2d::forward(const ParameterSet& ps, const Tensor& x, Cache* cache) const {
  if (x.c != in_ch) throw std::invalid_argument("conv input channel mismatch");
  const int oh = out_size(x.h), ow = out_size(x.w);
  const int K = in_ch * kernel * kernel;
  const int P = oh * ow;
  Cache local;
  Cache& cc = cache ? *cache : local;
  cc.in_c = x.c;
  cc.in_h = x.h;
  cc.in_w = x.w;
  im2col(x, kernel, stride, pad, oh, ow, cc.col);
  Tensor y(out_ch, oh, ow);
  CMapRM W(ps[weight].value.data(), out_ch, K);
  CMapRM C(cc.col.data(), K, P);
  MapRM Y(y.v.data(), out_ch, P);
  Y.noalias() = W * C;
  const auto& b = ps[bias].value;
  for (int o = 0; o < out_ch; ++o) {
    float* row = y.channel(o);
    for (int p = 0; p < P; ++p) row[p] += b[o];
  }
  return y;
}

Tensor Conv2d::backward(const ParameterSet& ps, const Tensor& dy, const Cache& cache, Gradients& grads,
                        bool need_dx) const {
  const int K = in_ch * kernel * kernel;
  const int P = dy.h * dy.w;
  CMapRM dY(dy.v.data(), out_ch, P);
  CMapRM C(cache.col.data(), K, P);
  MapRM dW(grads[weight].data(), out_ch, K);
  dW.noalias() += dY * C.transpose();
  auto& db = grads[bias];
  for (int o = 0; o < out_ch; ++o) {
    const float* row = dy.channel(o);
    db[o] += std::accumulate(row, row + P, 0.0f);
  }
  if (!need_dx) return {};
  std::vector<float> dcol(static_cast<std::size_t>(K) * P);
  CMapRM W(ps[weight].value.data(), out_ch, K);
  MapRM dC(dcol.data(), K, P);
  dC.noalias() = W.transpose() * dY;
  Tensor dx(cache.in_c, cache.in_h, cache.in_w);
  col2im(dcol, kernel, stride, pad, dy.h, dy.w, dx);
  return dx;
}

// ---------------------------------------------------------------------------

GroupNorm GroupNorm::create(ParameterSet& ps, const std::string& name, int channels) {
  GroupNorm g;
  g.channels = channels;
  g.groups = std::min(8, channels);
  while (channels % g.groups != 0) --g.groups;
  g.gamma = ps.add(name + ".gamma", {channels}, std::vector<float>(channels, 1.0f), false);
  g.beta = ps.add(name + ".beta", {channels}, std::vector<float>(channels, 0.0f), false);
  return g;
}

Tensor GroupNorm::forward(const ParameterSet& ps, const Tensor& x, Cache* cache) const {
  if (x.c != channels) throw std::invalid_argument("group norm channel mismatch");
  const int cpg = channels / groups;
  const std::size_t plane = x.plane();
  const std::size_t m = cpg * plane;
  Tensor y(x.c, x.h, x.w);
  std::vector<float> xhat(x.size());
  std::vector<float> inv(groups);
  const auto& ga = ps[gamma].value;
  const auto& be = ps[beta].value;
  for (int g = 0; g < groups; ++g) {
    const float* src = x.channel(g * cpg);
    double mean = 0.0;
    for (std::size_t i = 0; i < m; ++i) mean += src[i];
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double d = src[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(m);
    const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
    inv[g] = is;
    const float fm = static_cast<float>(mean);
    for (int cc = 0; cc < cpg; ++cc) {
      const int ch = g * cpg + cc;
      const float* s = x.channel(ch);
      float* xh = xhat.data() + ch * plane;
      float* d = y.channel(ch);
      for (std::size_t i = 0; i < plane; ++i) {
        xh[i] = (s[i] - fm) * is;
        d[i] = ga[ch] * xh[i] + be[ch];
      }
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv);
  }
  return y;
}

Tensor GroupNorm::backward(const ParameterSet& ps, const Tensor& dy, const Cache& cache, Gradients& grads) const {
  const int cpg = channels / groups;
  const std::size_t plane = dy.plane();
  const float m = static_cast<float>(cpg * plane);
  const auto& ga = ps[gamma].value;
  auto& dga = grads[gamma];
  auto& dbe = grads[beta];
  Tensor dx(dy.c, dy.h, dy.w);
  for (int g = 0; g < groups; ++g) {
    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
    for (int cc = 0; cc < cpg; ++cc) {
      const int ch = g * cpg + cc;
      const float* d = dy.channel(ch);
      const float* xh = cache.xhat.data() + ch * plane;
      double dg = 0.0, db = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        dg += static_cast<double>(d[i]) * xh[i];
        db += d[i];
        const double dxh = static_cast<double>(d[i]) * ga[ch];
        sum_dxh += dxh;
        sum_dxh_xh += dxh * xh[i];
      }
      dga[ch] += static_cast<float>(dg);
      dbe[ch] += static_cast<float>(db);
    }
    const float is = cache.inv_std[g];
    const float a = static_cast<float>(sum_dxh / m);
    const float b = static_cast<float>(sum_dxh_xh / m);
    for (int cc = 0; cc < cpg; ++cc) {
      const int ch = g * cpg + cc;
      const float* d = dy.channel(ch);
      const float* xh = cache.xhat.data() + ch * plane;
      float* o = dx.channel(ch);
      for (std::size_t i = 0; i < plane; ++i) o[i] = is * (d[i] * ga[ch] - a - xh[i] * b);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------

ConvBlock ConvBlock::create(ParameterSet& ps, const std::string& name, int in_ch, int out_ch, int stride, Rng& rng) {
  ConvBlock b;
  b.conv = Conv2d::create(ps, name + ".conv", in_ch, out_ch, 3, stride, rng);
  b.norm = GroupNorm::create(ps, name + ".norm", out_ch);
  return b;
}

Tensor ConvBlock::forward(const ParameterSet& ps, const Tensor& x, Cache* cache) const {
  Tensor y = conv.forward(ps, x, cache ? &cache->conv : nullptr);
  y = norm.forward(ps, y, cache ? &cache->norm : nullptr);
  for (auto& v : y.v) v = v > 0.0f ? v : 0.0f;
  if (cache) cache->out = y;
  return y;
}

Tensor ConvBlock::backward(const ParameterSet& ps, const Tensor& dy, const Cache& cache, Gradients& grads,
                           bool need_dx) const {
  Tensor d = dy;
  for (std::size_t i = 0; i < d.v.size(); ++i)
    if (cache.out.v[i] <= 0.0f) d.v[i] = 0.0f;
  d = norm.backward(ps, d, cache.norm, grads);
  return conv.backward(ps, d, cache.conv, grads, need_dx);
}

// ---------------------------------------------------------------------------

Linear Linear::create(ParameterSet& ps, const std::string& name, int in, int out, Rng& rng) {
  Linear l;
  l.in_features = in;
  l.out_features = out;
  std::normal_distribution<float> dist(0.0f, std::sqrt(1.0f / static_cast<float>(in)));
  std::vector<float> w(static_cast<std::size_t>(in) * out);
  for (auto& v : w) v = dist(rng);
  l.weight = ps.add(name + ".weight", {out, in}, std::move(w));
  l.bias = ps.add(name + ".bias", {out}, std::vector<float>(out, 0.0f), false);
  return l;
}

std::vector<float> Linear::forward(const ParameterSet& ps, const std::vector<float>& x) const {
  if (static_cast<int>(x.size()) != in_features) throw std::invalid_argument("linear input size mismatch");
  const auto& w = ps[weight].value;
  const auto& b = ps[bias].value;
  std::vector<float> y(out_features);
  for (int o = 0; o < out_features; ++o) {
    double s = b[o];
    const float* row = w.data() + static_cast<std::size_t>(o) * in_features;
    for (int i = 0; i < in_features; ++i) s += static_cast<double>(row[i]) * x[i];
    y[o] = static_cast<float>(s);
  }
  return y;
}

std::vector<float> Linear::backward(const ParameterSet& ps, const std::vector<float>& dy, const std::vector<float>& x,
                                    Gradients& grads) const {
  const auto& w = ps[weight].value;
  auto& dw = grads[weight];
  auto& db = grads[bias];
  std::vector<float> dx(in_features, 0.0f);
  for (int o = 0; o < out_features; ++o) {
    db[o] += dy[o];
    const float* row = w.data() + static_cast<std::size_t>(o) * in_features;
    float* drow = dw.data() + static_cast<std::size_t>(o) * in_features;
    for (int i = 0; i < in_features; ++i) {
      drow[i] += dy[o] * x[i];
      dx[i] += dy[o] * row[i];
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------

std::vector<float> global_average_pool(const Tensor& x) {
  std::vector<float> out(x.c);
  const std::size_t n = x.plane();
  for (int c = 0; c < x.c; ++c) {
    const float* p = x.channel(c);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += p[i];
    out[c] = static_cast<float>(s / static_cast<double>(n));
  }
  return out;
}

Tensor global_average_pool_backward(const std::vector<float>& dy, int c, int h, int w) {
  Tensor dx(c, h, w);
  const float inv = 1.0f / static_cast<float>(h * w);
  for (int ch = 0; ch < c; ++ch) std::fill_n(dx.channel(ch), dx.plane(), dy[ch] * inv);
  return dx;
}

Tensor upsample_nearest2x(const Tensor& x) {
  Tensor y(x.c, x.h * 2, x.w * 2);
  for (int c = 0; c < x.c; ++c) {
    const float* s = x.channel(c);
    float* d = y.channel(c);
    for (int yy = 0; yy < y.h; ++yy) {
      const float* srow = s + static_cast<std::size_t>(yy / 2) * x.w;
      float* drow = d + static_cast<std::size_t>(yy) * y.w;
      for (int xx = 0; xx < y.w; ++xx) drow[xx] = srow[xx / 2];
    }
  }
  return y;
}

Tensor upsample_nearest2x_backward(const Tensor& dy) {
  Tensor dx(dy.c, dy.h / 2, dy.w / 2);
  for (int c = 0; c < dy.c; ++c) {
    const float* s = dy.channel(c);
    float* d = dx.channel(c);
    for (int yy = 0; yy < dy.h; ++yy) {
      const float* srow = s + static_cast<std::size_t>(yy) * dy.w;
      float* drow = d + static_cast<std::size_t>(yy / 2) * dx.w;
      for (int xx = 0; xx < dy.w; ++xx) drow[xx / 2] += srow[xx];
    }
  }
  return dx;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.h != b.h || a.w != b.w) throw std::invalid_argument("concat spatial mismatch");
  Tensor y(a.c + b.c, a.h, a.w);
  std::copy(a.v.begin(), a.v.end(), y.v.begin());
  std::copy(b.v.begin(), b.v.end(), y.v.begin() + static_cast<std::ptrdiff_t>(a.v.size()));
  return y;
}

std::pair<Tensor, Tensor> split_channels(const Tensor& d, int first_channels) {
  Tensor a(first_channels, d.h, d.w);
  Tensor b(d.c - first_channels, d.h, d.w);
  std::copy(d.v.begin(), d.v.begin() + static_cast<std::ptrdiff_t>(a.v.size()), a.v.begin());
  std::copy(d.v.begin() + static_cast<std::ptrdiff_t>(a.v.size()), d.v.end(), b.v.begin());
  return {std::move(a), std::move(b)};
}

std::vector<double> softmax(const std::vector<float>& logits) {
  const float mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> e(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    e[i] = std::exp(static_cast<double>(logits[i]) - mx);
    s += e[i];
  }
  for (auto& v : e) v /= s;
  return e;
}

}  // namespace fcam::nn
