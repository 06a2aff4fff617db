#include "fcam/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fcam {

nlohmann::json LossConfig::to_json() const {
  return {{"alpha", alpha},
          {"lambda_crf", lambda_crf},
          {"barrier_t", barrier_t},
          {"t_init", t_init},
          {"t_factor", t_factor},
          {"t_max", t_max},
          {"barrier_epochs", barrier_epochs},
          {"crf_sigma_xy", crf_sigma_xy},
          {"crf_sigma_rgb", crf_sigma_rgb},
          {"crf_downsample", crf_downsample},
          {"use_sr", use_sr},
          {"use_crf", use_crf},
          {"use_asc", use_asc}};
}

LossConfig LossConfig::from_json(const nlohmann::json& j) {
  LossConfig c;
  c.alpha = j.value("alpha", c.alpha);
  c.lambda_crf = j.value("lambda_crf", c.lambda_crf);
  c.t_init = j.value("t_init", c.t_init);
  c.barrier_t = j.value("barrier_t", c.t_init);
  c.t_factor = j.value("t_factor", c.t_factor);
  c.t_max = j.value("t_max", c.t_max);
  c.barrier_epochs = j.value("barrier_epochs", c.barrier_epochs);
  c.crf_sigma_xy = j.value("crf_sigma_xy", c.crf_sigma_xy);
  c.crf_sigma_rgb = j.value("crf_sigma_rgb", c.crf_sigma_rgb);
  c.crf_downsample = j.value("crf_downsample", c.crf_downsample);
  c.use_sr = j.value("use_sr", c.use_sr);
  c.use_crf = j.value("use_crf", c.use_crf);
  c.use_asc = j.value("use_asc", c.use_asc);
  return c;
}

nlohmann::json LossBreakdown::to_json() const {
  return {{"classification", classification}, {"partial_ce", partial_ce}, {"crf", crf}, {"asc", asc}, {"total", total}};
}

TrainingStage stage_from_int(int stage) {
  if (stage == 1) return TrainingStage::classifier;
  if (stage == 2) return TrainingStage::decoder;
  throw std::invalid_argument("unknown training stage " + std::to_string(stage));
}

double classification_ce(const std::vector<double>& probs, int y) {
  if (y < 0 || y >= static_cast<int>(probs.size())) throw std::out_of_range("class id out of range");
  return -std::log(std::max(probs[y], kProbabilityFloor));
}

std::vector<float> classification_ce_logit_grad(const std::vector<double>& probs, int y) {
  if (y < 0 || y >= static_cast<int>(probs.size())) throw std::out_of_range("class id out of range");
  std::vector<float> g(probs.size());
  for (std::size_t k = 0; k < probs.size(); ++k) g[k] = static_cast<float>(probs[k] - (static_cast<int>(k) == y ? 1.0 : 0.0));
  return g;
}

double partial_cross_entropy(const SoftmaxMaps& s, const PseudoLabelMask& y, MapGradient* grad) {
  if (s.height != y.height || s.width != y.width || y.labels.size() != s.size())
    throw std::invalid_argument("partial CE: shape mismatch");
  double loss = 0.0;
  for (std::size_t p = 0; p < y.labels.size(); ++p) {
    const PixelLabel l = y.labels[p];
    if (l == PixelLabel::unknown) continue;
    const bool fg = l == PixelLabel::foreground;
    const double prob = fg ? s.foreground[p] : s.background[p];
    loss -= std::log(std::max(prob, kProbabilityFloor));
    if (grad && prob > kProbabilityFloor) {
      (fg ? grad->foreground : grad->background)[p] -= 1.0 / prob;
    }
  }
  return loss;
}

namespace {

struct CrfGrid {
  int h = 0;
  int w = 0;
  std::vector<double> s1, s2, r, g, b;
  std::vector<int> count;      // source pixels per cell
  std::vector<std::size_t> cell;  // source pixel -> cell
};

CrfGrid pool_grid(const SoftmaxMaps& s, const ImageTensor& x, int f) {
  CrfGrid g;
  g.h = (s.height + f - 1) / f;
  g.w = (s.width + f - 1) / f;
  const std::size_t n = static_cast<std::size_t>(g.h) * g.w;
  g.s1.assign(n, 0.0);
  g.s2.assign(n, 0.0);
  g.r.assign(n, 0.0);
  g.g.assign(n, 0.0);
  g.b.assign(n, 0.0);
  g.count.assign(n, 0);
  g.cell.resize(s.size());
  const auto pr = x.plane(0), pg = x.plane(1), pb = x.plane(2);
  for (int y = 0; y < s.height; ++y) {
    for (int xx = 0; xx < s.width; ++xx) {
      const std::size_t p = static_cast<std::size_t>(y) * s.width + xx;
      const std::size_t c = static_cast<std::size_t>(y / f) * g.w + xx / f;
      g.cell[p] = c;
      g.s1[c] += s.background[p];
      g.s2[c] += s.foreground[p];
      g.r[c] += pr[p];
      g.g[c] += pg[p];
      g.b[c] += pb[p];
      ++g.count[c];
    }
  }
  for (std::size_t c = 0; c < n; ++c) {
    const double inv = 1.0 / g.count[c];
    g.s1[c] *= inv;
    g.s2[c] *= inv;
    g.r[c] *= inv;
    g.g[c] *= inv;
    g.b[c] *= inv;
  }
  return g;
}

}  // namespace

double crf_loss(const SoftmaxMaps& s, const ImageTensor& x, const CrfOptions& opts, MapGradient* grad) {
  if (s.height != x.height() || s.width != x.width()) throw std::invalid_argument("CRF: shape mismatch");
  if (!(opts.sigma_xy > 0.0) || !(opts.sigma_rgb > 0.0)) throw std::invalid_argument("CRF: bandwidths must be positive");
  if (opts.downsample < 1) throw std::invalid_argument("CRF: downsample factor must be >= 1");
  const int f = opts.downsample;
  const CrfGrid grid = pool_grid(s, x, f);
  const int n = grid.h * grid.w;
  const double sxy = opts.sigma_xy / f;
  const double a_xy = 1.0 / (2.0 * sxy * sxy);
  const double a_rgb = 1.0 / (2.0 * opts.sigma_rgb * opts.sigma_rgb);

  // Spatial factor depends only on |dy|, |dx|.
  std::vector<double> spatial(static_cast<std::size_t>(grid.h) * grid.w);
  for (int dy = 0; dy < grid.h; ++dy)
    for (int dx = 0; dx < grid.w; ++dx)
      spatial[static_cast<std::size_t>(dy) * grid.w + dx] = -static_cast<double>(dx * dx + dy * dy) * a_xy;

  // W1 = W*1, WS1 = W*S1, WS2 = W*S2 with zero diagonal; W symmetric so
  // each unordered pair is visited once, in a fixed order.
  std::vector<double> w1(n, 0.0), ws1(n, 0.0), ws2(n, 0.0);
  for (int p = 0; p < n; ++p) {
    const int py = p / grid.w, px = p % grid.w;
    const double rp = grid.r[p], gp = grid.g[p], bp = grid.b[p];
    const double s1p = grid.s1[p], s2p = grid.s2[p];
    double acc1 = 0.0, accs1 = 0.0, accs2 = 0.0;
    for (int q = p + 1; q < n; ++q) {
      const int qy = q / grid.w, qx = q % grid.w;
      const double dr = grid.r[q] - rp, dg = grid.g[q] - gp, db = grid.b[q] - bp;
      const double e = spatial[static_cast<std::size_t>(qy - py) * grid.w + std::abs(qx - px)] -
                       (dr * dr + dg * dg + db * db) * a_rgb;
      const double w = std::exp(e);
      acc1 += w;
      accs1 += w * grid.s1[q];
      accs2 += w * grid.s2[q];
      w1[q] += w;
      ws1[q] += w * s1p;
      ws2[q] += w * s2p;
    }
    w1[p] += acc1;
    ws1[p] += accs1;
    ws2[p] += accs2;
  }

  double loss = 0.0;
  for (int p = 0; p < n; ++p) {
    loss += grid.s1[p] * (w1[p] - ws1[p]) + grid.s2[p] * (w1[p] - ws2[p]);
  }
  if (grad) {
    // dR/dS^c_p = (W(1 - S^c))_p - (W S^c)_p, spread uniformly over the cell.
    for (std::size_t i = 0; i < s.size(); ++i) {
      const std::size_t c = grid.cell[i];
      const double inv = 1.0 / grid.count[c];
      grad->background[i] += (w1[c] - 2.0 * ws1[c]) * inv;
      grad->foreground[i] += (w1[c] - 2.0 * ws2[c]) * inv;
    }
  }
  return loss;
}

double extended_log_barrier(double u, double t) {
  if (u <= -1.0 / (t * t)) return -std::log(-u) / t;
  return t * u - std::log(1.0 / (t * t)) / t + 1.0 / t;
}

double extended_log_barrier_derivative(double u, double t) {
  if (u <= -1.0 / (t * t)) return -1.0 / (t * u);
  return t;
}

double asc_log_barrier(const SoftmaxMaps& s, double t, MapGradient* grad) {
  if (s.size() == 0) throw std::invalid_argument("ASC: empty maps");
  const double n = static_cast<double>(s.size());
  double loss = 0.0;
  for (int r = 0; r < 2; ++r) {
    const auto& m = r == 0 ? s.background : s.foreground;
    double sum = 0.0;
    for (double v : m) sum += v;
    const double u = -sum / n;
    loss += extended_log_barrier(u, t);
    if (grad) {
      const double d = -extended_log_barrier_derivative(u, t) / n;
      auto& g = r == 0 ? grad->background : grad->foreground;
      for (auto& gv : g) gv += d;
    }
  }
  return loss;
}

double barrier_t_at_epoch(const LossConfig& config, int epoch) {
  return std::min(config.t_init * std::pow(config.t_factor, epoch), config.t_max);
}

LossConfig update_barrier_t(LossConfig config) {
  ++config.barrier_epochs;
  config.barrier_t = barrier_t_at_epoch(config, config.barrier_epochs);
  return config;
}

int effective_crf_downsample(const LossConfig& config, int height, int width) {
  if (config.crf_downsample > 0) return config.crf_downsample;
  return (height * width > 128 * 128) ? 2 : 1;
}

LossBreakdown total_loss(const std::vector<double>& probs, int y, const SoftmaxMaps& s, const PseudoLabelMask& mask,
                         const ImageTensor& x, const LossConfig& config, TrainingStage stage, MapGradient* grad) {
  if (stage != TrainingStage::classifier && stage != TrainingStage::decoder)
    throw std::invalid_argument("unknown training stage");
  LossBreakdown b;
  b.classification = classification_ce(probs, y);
  if (stage == TrainingStage::classifier) {
    b.total = b.classification;
    return b;
  }
  MapGradient local;
  if (grad) local = MapGradient::zeros(s.size());
  MapGradient* g = grad ? &local : nullptr;
  if (config.use_sr) {
    b.partial_ce = partial_cross_entropy(s, mask, g);
    if (g) {
      for (auto& v : local.background) v *= config.alpha;
      for (auto& v : local.foreground) v *= config.alpha;
    }
  }
  if (config.use_crf && config.lambda_crf != 0.0) {
    MapGradient crf_grad;
    if (g) crf_grad = MapGradient::zeros(s.size());
    const CrfOptions opts{config.crf_sigma_xy, config.crf_sigma_rgb, effective_crf_downsample(config, s.height, s.width)};
    b.crf = crf_loss(s, x, opts, g ? &crf_grad : nullptr);
    if (g) {
      for (std::size_t i = 0; i < s.size(); ++i) {
        local.background[i] += config.lambda_crf * crf_grad.background[i];
        local.foreground[i] += config.lambda_crf * crf_grad.foreground[i];
      }
    }
  }
  if (config.use_asc) b.asc = asc_log_barrier(s, config.barrier_t, g);
  b.total = config.alpha * b.partial_ce + config.lambda_crf * b.crf + b.asc;
  if (grad) {
    if (grad->background.size() != s.size()) *grad = MapGradient::zeros(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      grad->background[i] += local.background[i];
      grad->foreground[i] += local.foreground[i];
    }
  }
  return b;
}

}  // namespace fcam
