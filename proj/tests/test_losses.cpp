#include <cmath>
#include <random>

#include "doctest.h"
#include "fcam/losses.hpp"
#include "oracles.hpp"

using namespace fcam;

namespace {

SoftmaxMaps random_maps(int h, int w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 0.95);
  SoftmaxMaps s{h, w, {}, {}};
  for (int i = 0; i < h * w; ++i) {
    const double f = u(rng);
    s.foreground.push_back(f);
    s.background.push_back(1.0 - f);
  }
  return s;
}

ImageTensor random_image(int h, int w, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  ImageTensor img(h, w);
  for (auto& v : img.data()) v = u(rng);
  return img;
}

// Max floor-guarded relative error between the analytic gradient and central
// differences over every element of both channels.
double max_gradient_error(const std::function<double(const SoftmaxMaps&, MapGradient*)>& loss, const SoftmaxMaps& s) {
  MapGradient g = MapGradient::zeros(s.size());
  loss(s, &g);
  double worst = 0.0;
  for (int ch = 0; ch < 2; ++ch) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      std::vector<double> x{ch == 0 ? s.background[i] : s.foreground[i]};
      auto f = [&](const std::vector<double>& v) {
        SoftmaxMaps t = s;
        (ch == 0 ? t.background : t.foreground)[i] = v[0];
        return loss(t, nullptr);
      };
      const double fd = oracle::central_difference(f, x, 0, 1e-6);
      const double an = ch == 0 ? g.background[i] : g.foreground[i];
      worst = std::max(worst, oracle::relative_error(an, fd, 1e-3));
    }
  }
  return worst;
}

PseudoLabelMask random_mask(int h, int w, std::mt19937_64& rng) {
  PseudoLabelMask m{h, w, std::vector<PixelLabel>(static_cast<std::size_t>(h) * w, PixelLabel::unknown)};
  std::uniform_int_distribution<int> pick(0, 3);
  for (auto& l : m.labels) {
    const int r = pick(rng);
    if (r == 0) l = PixelLabel::foreground;
    if (r == 1) l = PixelLabel::background;
  }
  return m;
}

}  // namespace

TEST_CASE("classification cross-entropy values") {
  CHECK(classification_ce({0.5, 0.5}, 0) == doctest::Approx(std::log(2.0)));
  CHECK(classification_ce({1.0 / std::exp(1.0), 1.0 - 1.0 / std::exp(1.0)}, 0) == doctest::Approx(1.0));
  CHECK(classification_ce({0.0, 1.0}, 0) == doctest::Approx(-std::log(kProbabilityFloor)));
  CHECK_THROWS_AS(classification_ce({0.5, 0.5}, 2), std::out_of_range);
  const auto g = classification_ce_logit_grad({0.2, 0.8}, 1);
  CHECK(g[0] == doctest::Approx(0.2));
  CHECK(g[1] == doctest::Approx(-0.2));
}

TEST_CASE("partial cross-entropy counts labeled pixels only") {
  SoftmaxMaps s{1, 3, {0.5, 0.9, 0.3}, {0.5, 0.1, 0.7}};
  PseudoLabelMask m{1, 3, {PixelLabel::foreground, PixelLabel::unknown, PixelLabel::background}};
  CHECK(partial_cross_entropy(s, m) == doctest::Approx(-std::log(0.5) - std::log(0.3)));
  PseudoLabelMask none{1, 3, std::vector<PixelLabel>(3, PixelLabel::unknown)};
  CHECK(partial_cross_entropy(s, none) == 0.0);
}

TEST_CASE("CRF with flat kernel and identical colors") {
  // Huge bandwidths make every weight 1. With S2 = (1, 1, 0, 0) each class
  // has 4 ordered pairs with S_p = 1 and S_q = 0.
  SoftmaxMaps s{2, 2, {0.0, 0.0, 1.0, 1.0}, {1.0, 1.0, 0.0, 0.0}};
  ImageTensor img(2, 2);
  const CrfOptions opts{1e9, 1e9, 1};
  CHECK(crf_loss(s, img, opts) == doctest::Approx(8.0));
  // Uniform 0.5 everywhere: 12 ordered pairs * 0.25 * 2 classes = 6.
  SoftmaxMaps half{2, 2, std::vector<double>(4, 0.5), std::vector<double>(4, 0.5)};
  CHECK(crf_loss(half, img, opts) == doctest::Approx(6.0));
  // Hard, constant labeling pays nothing.
  SoftmaxMaps flat{2, 2, std::vector<double>(4, 0.0), std::vector<double>(4, 1.0)};
  CHECK(crf_loss(flat, img, opts) == doctest::Approx(0.0));
}

TEST_CASE("CRF matches a direct pairwise sum") {
  std::mt19937_64 rng(3);
  const SoftmaxMaps s = random_maps(5, 4, rng);
  const ImageTensor img = random_image(5, 4, rng);
  const CrfOptions opts{3.0, 0.4, 1};
  double ref = 0.0;
  for (int p = 0; p < 20; ++p)
    for (int q = 0; q < 20; ++q) {
      if (p == q) continue;
      const double dy = p / 4 - q / 4, dx = p % 4 - q % 4;
      double c2 = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double d = static_cast<double>(img.data()[c * 20 + p]) - img.data()[c * 20 + q];
        c2 += d * d;
      }
      const double w = std::exp(-(dx * dx + dy * dy) / (2 * 9.0) - c2 / (2 * 0.16));
      ref += w * (s.background[p] * (1 - s.background[q]) + s.foreground[p] * (1 - s.foreground[q]));
    }
  CHECK(crf_loss(s, img, opts) == doctest::Approx(ref).epsilon(1e-12));
}

TEST_CASE("extended log-barrier values and continuity") {
  CHECK(extended_log_barrier(-1.0, 1.0) == doctest::Approx(0.0));
  // Linear branch at t = 1: u + 1 for u > -1.
  CHECK(extended_log_barrier(-0.5, 1.0) == doctest::Approx(0.5));
  for (double t : {1.0, 2.0, 5.0, 10.0}) {
    const double k = -1.0 / (t * t);
    CHECK(extended_log_barrier(k - 1e-12, t) == doctest::Approx(extended_log_barrier(k + 1e-12, t)));
    CHECK(extended_log_barrier_derivative(k - 1e-12, t) == doctest::Approx(t));
  }
}

TEST_CASE("barrier t schedule") {
  LossConfig c;
  CHECK(c.barrier_t == 1.0);
  for (int e = 1; e <= 300; ++e) {
    c = update_barrier_t(c);
    CHECK(c.barrier_t == std::min(std::pow(1.01, e), 10.0));
  }
  CHECK(c.barrier_t == 10.0);
}

TEST_CASE("analytic gradients match central differences") {
  std::mt19937_64 rng(2026);
  double worst_ce = 0, worst_crf = 0, worst_asc = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const SoftmaxMaps s = random_maps(8, 8, rng);
    const PseudoLabelMask m = random_mask(8, 8, rng);
    const ImageTensor img = random_image(8, 8, rng);
    const double t = 1.0 + trial % 5 * 2.0;  // both barrier branches
    worst_ce = std::max(worst_ce, max_gradient_error([&](const SoftmaxMaps& x, MapGradient* g) {
                                    return partial_cross_entropy(x, m, g);
                                  }, s));
    worst_crf = std::max(worst_crf, max_gradient_error([&](const SoftmaxMaps& x, MapGradient* g) {
                                      return crf_loss(x, img, {15.0, 0.1, 1}, g);
                                    }, s));
    worst_asc = std::max(worst_asc, max_gradient_error([&](const SoftmaxMaps& x, MapGradient* g) {
                                      return asc_log_barrier(x, t, g);
                                    }, s));
  }
  CHECK(worst_ce < 1e-5);
  CHECK(worst_crf < 1e-5);
  CHECK(worst_asc < 1e-5);
}

TEST_CASE("downsampled CRF gradient matches central differences") {
  std::mt19937_64 rng(8);
  const SoftmaxMaps s = random_maps(8, 8, rng);
  const ImageTensor img = random_image(8, 8, rng);
  CHECK(max_gradient_error([&](const SoftmaxMaps& x, MapGradient* g) { return crf_loss(x, img, {15.0, 0.1, 2}, g); },
                           s) < 1e-5);
}

TEST_CASE("total loss combines terms and respects ablation flags") {
  std::mt19937_64 rng(1);
  const SoftmaxMaps s = random_maps(8, 8, rng);
  const PseudoLabelMask m = random_mask(8, 8, rng);
  const ImageTensor img = random_image(8, 8, rng);
  LossConfig c;
  c.lambda_crf = 0.01;
  c.alpha = 0.5;
  const auto b = total_loss({0.3, 0.7}, 1, s, m, img, c, TrainingStage::decoder);
  CHECK(b.total == doctest::Approx(0.5 * b.partial_ce + 0.01 * b.crf + b.asc));
  CHECK(b.classification == doctest::Approx(-std::log(0.7)));
  const auto s1 = total_loss({0.3, 0.7}, 1, s, m, img, c, TrainingStage::classifier);
  CHECK(s1.total == s1.classification);
  c.use_crf = c.use_asc = false;
  const auto sr = total_loss({0.3, 0.7}, 1, s, m, img, c, TrainingStage::decoder);
  CHECK(sr.total == doctest::Approx(0.5 * sr.partial_ce));
  // Gradient of the combination equals the weighted sum of parts.
  c.use_crf = c.use_asc = true;
  MapGradient g = MapGradient::zeros(s.size()), gp = MapGradient::zeros(s.size()), gc = MapGradient::zeros(s.size()),
              ga = MapGradient::zeros(s.size());
  total_loss({0.3, 0.7}, 1, s, m, img, c, TrainingStage::decoder, &g);
  partial_cross_entropy(s, m, &gp);
  crf_loss(s, img, {c.crf_sigma_xy, c.crf_sigma_rgb, effective_crf_downsample(c, 8, 8)}, &gc);
  asc_log_barrier(s, c.barrier_t, &ga);
  for (std::size_t i = 0; i < s.size(); ++i)
    CHECK(g.foreground[i] == doctest::Approx(0.5 * gp.foreground[i] + 0.01 * gc.foreground[i] + ga.foreground[i]));
}

TEST_CASE("loss config round-trips through json") {
  LossConfig c;
  c.alpha = 0.1;
  c.crf_downsample = 2;
  c.use_asc = false;
  const LossConfig b = LossConfig::from_json(c.to_json());
  CHECK(b.alpha == 0.1);
  CHECK(b.crf_downsample == 2);
  CHECK_FALSE(b.use_asc);
  CHECK_THROWS_AS(stage_from_int(3), std::invalid_argument);
}
