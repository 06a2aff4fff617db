#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "fcam/data_model.hpp"

namespace fcam {

struct OtsuResult {
  float threshold = 0.0f;
  bool degenerate = false;
};

/// Otsu threshold over `bins` uniform bins on [0,1]. The returned value is
/// the bin edge k/bins that maximizes the between-class variance (lowest
/// edge on ties). A map whose mass sits in one bin returns 0 + degenerate.
OtsuResult otsu_threshold(const Cam& cam, int bins = 256);

/// Bin index used by the Otsu histogram for a value in [0,1].
int otsu_bin(float v, int bins);

/// Foreground / background candidate pixels (raster indices, ascending).
struct SamplingRegions {
  int height = 0;
  int width = 0;
  std::vector<std::uint32_t> foreground;
  std::vector<std::uint32_t> background;
  float otsu_threshold = 0.0f;
  double n_minus = 0.0;
  bool fallback = false;  // foreground replaced by the argmax pixel
};

/// Foreground = pixels strictly above Otsu (argmax pixel if none or the
/// map is degenerate); background = the ceil(n_minus*N) lowest pixels in
/// (value, raster index) order, minus the foreground.
SamplingRegions build_sampling_regions(const Cam& cam, double n_minus);

/// Raw lowest-activation set before the disjointness subtraction.
std::vector<std::uint32_t> lowest_pixels(const Cam& cam, double n_minus);

enum class PixelLabel : std::uint8_t { background = 0, foreground = 1, unknown = 255 };

struct LabeledPixel {
  std::uint32_t index = 0;
  PixelLabel label = PixelLabel::unknown;
};

struct StochasticPixelSet {
  std::vector<LabeledPixel> pixels;
  std::uint64_t rng_seed = 0;
};

/// Uniform draws without replacement: k_fg from the foreground region and
/// k_bg from the background region (counts clamped to region sizes).
StochasticPixelSet sample_pixels(const SamplingRegions& regions, int k_fg, int k_bg, std::mt19937_64& rng);
StochasticPixelSet sample_pixels(const SamplingRegions& regions, int k_fg, int k_bg, std::uint64_t seed);

struct PseudoLabelMask {
  int height = 0;
  int width = 0;
  std::vector<PixelLabel> labels;

  std::size_t labeled_count() const;
};

PseudoLabelMask build_pseudo_mask(int height, int width, const StochasticPixelSet& sampled);

/// Single-channel raster: 0 background, 1 foreground, 255 unknown.
Raster to_raster(const PseudoLabelMask& mask);

}  // namespace fcam
