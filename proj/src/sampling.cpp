#include "fcam/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace fcam {

int otsu_bin(float v, int bins) {
  const int b = static_cast<int>(std::floor(static_cast<double>(v) * bins));
  return std::clamp(b, 0, bins - 1);
}

namespace {

// Between-class variance of a split, up to a positive constant, is
//   (n1*s0 - n0*s1)^2 / (n0*n1)
// with integer counts n and bin-index sums s. Candidates are compared by
// cross-multiplication so ties are exact.
struct Score {
  unsigned __int128 num = 0;  // (n1*s0 - n0*s1)^2
  unsigned __int128 den = 1;  // n0*n1
};

Score split_score(std::uint64_t n0, std::uint64_t s0, std::uint64_t n1, std::uint64_t s1) {
  const __int128 d = static_cast<__int128>(n1) * s0 - static_cast<__int128>(n0) * s1;
  const unsigned __int128 ad = static_cast<unsigned __int128>(d < 0 ? -d : d);
  return {ad * ad, static_cast<unsigned __int128>(n0) * n1};
}

bool greater(const Score& a, const Score& b) {
  // a.num/a.den > b.num/b.den; fall back to long double if the products
  // could overflow 128 bits.
  const long double la = static_cast<long double>(a.num) * static_cast<long double>(b.den);
  const long double lb = static_cast<long double>(b.num) * static_cast<long double>(a.den);
  if (la < 1e37L && lb < 1e37L) return a.num * b.den > b.num * a.den;
  return la > lb;
}

}  // namespace

OtsuResult otsu_threshold(const Cam& cam, int bins) {
  if (bins < 2) throw std::invalid_argument("otsu: need at least 2 bins");
  if (cam.data.empty()) throw std::invalid_argument("otsu: empty map");
  std::vector<std::uint64_t> hist(bins, 0);
  for (float v : cam.data) ++hist[otsu_bin(v, bins)];
  const auto occupied = std::count_if(hist.begin(), hist.end(), [](std::uint64_t c) { return c > 0; });
  if (occupied <= 1) return {0.0f, true};

  std::uint64_t total_n = 0, total_s = 0;
  for (int b = 0; b < bins; ++b) {
    total_n += hist[b];
    total_s += hist[b] * static_cast<std::uint64_t>(b);
  }
  std::uint64_t n0 = 0, s0 = 0;
  Score best;
  int best_k = -1;
  for (int k = 1; k < bins; ++k) {
    n0 += hist[k - 1];
    s0 += hist[k - 1] * static_cast<std::uint64_t>(k - 1);
    const std::uint64_t n1 = total_n - n0;
    if (n0 == 0 || n1 == 0) continue;
    const Score sc = split_score(n0, s0, n1, total_s - s0);
    if (best_k < 0 || greater(sc, best)) {
      best = sc;
      best_k = k;
    }
  }
  return {static_cast<float>(static_cast<double>(best_k) / bins), false};
}

std::vector<std::uint32_t> lowest_pixels(const Cam& cam, double n_minus) {
  if (!(n_minus > 0.0 && n_minus <= 1.0)) throw std::invalid_argument("n_minus must be in (0,1]");
  const std::size_t n = cam.data.size();
  const auto count = std::min<std::size_t>(n, static_cast<std::size_t>(std::ceil(n_minus * static_cast<double>(n) - 1e-9)));
  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) { return cam.data[a] < cam.data[b]; });
  order.resize(count);
  std::sort(order.begin(), order.end());
  return order;
}

SamplingRegions build_sampling_regions(const Cam& cam, double n_minus) {
  if (cam.data.empty()) throw std::invalid_argument("sampling regions: empty map");
  SamplingRegions r;
  r.height = cam.height;
  r.width = cam.width;
  r.n_minus = n_minus;
  const OtsuResult otsu = otsu_threshold(cam);
  r.otsu_threshold = otsu.threshold;
  if (!otsu.degenerate) {
    for (std::uint32_t i = 0; i < cam.data.size(); ++i)
      if (cam.data[i] > otsu.threshold) r.foreground.push_back(i);
  }
  if (r.foreground.empty()) {
    const auto it = std::max_element(cam.data.begin(), cam.data.end());
    r.foreground.push_back(static_cast<std::uint32_t>(it - cam.data.begin()));
    r.fallback = true;
  }
  const auto low = lowest_pixels(cam, n_minus);
  std::set_difference(low.begin(), low.end(), r.foreground.begin(), r.foreground.end(),
                      std::back_inserter(r.background));
  return r;
}

namespace {

std::vector<std::uint32_t> draw(const std::vector<std::uint32_t>& region, int k, std::mt19937_64& rng) {
  const std::size_t take = std::min<std::size_t>(region.size(), static_cast<std::size_t>(std::max(k, 0)));
  std::vector<std::uint32_t> pool = region;
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < take; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(take);
  return pool;
}

}  // namespace

StochasticPixelSet sample_pixels(const SamplingRegions& regions, int k_fg, int k_bg, std::mt19937_64& rng) {
  if (k_fg > 0 && regions.foreground.empty()) throw std::logic_error("empty foreground region");
  StochasticPixelSet s;
  for (auto i : draw(regions.foreground, k_fg, rng)) s.pixels.push_back({i, PixelLabel::foreground});
  for (auto i : draw(regions.background, k_bg, rng)) s.pixels.push_back({i, PixelLabel::background});
  return s;
}

StochasticPixelSet sample_pixels(const SamplingRegions& regions, int k_fg, int k_bg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto s = sample_pixels(regions, k_fg, k_bg, rng);
  s.rng_seed = seed;
  return s;
}

std::size_t PseudoLabelMask::labeled_count() const {
  return static_cast<std::size_t>(
      std::count_if(labels.begin(), labels.end(), [](PixelLabel l) { return l != PixelLabel::unknown; }));
}

PseudoLabelMask build_pseudo_mask(int height, int width, const StochasticPixelSet& sampled) {
  PseudoLabelMask m{height, width,
                    std::vector<PixelLabel>(static_cast<std::size_t>(height) * width, PixelLabel::unknown)};
  for (const auto& p : sampled.pixels) {
    if (p.index >= m.labels.size()) throw std::out_of_range("sampled pixel outside the mask");
    auto& slot = m.labels[p.index];
    if (slot != PixelLabel::unknown && slot != p.label)
      throw std::invalid_argument("pixel drawn with conflicting labels");
    slot = p.label;
  }
  return m;
}

Raster to_raster(const PseudoLabelMask& mask) {
  Raster r{1, static_cast<std::uint32_t>(mask.height), static_cast<std::uint32_t>(mask.width), {}, nlohmann::json::object()};
  r.payload.reserve(mask.labels.size());
  for (auto l : mask.labels) r.payload.push_back(static_cast<float>(static_cast<std::uint8_t>(l)));
  r.sidecar["kind"] = "pseudo_label_mask";
  r.sidecar["encoding"] = {{"background", 0}, {"foreground", 1}, {"unknown", 255}};
  return r;
}

}  // namespace fcam
