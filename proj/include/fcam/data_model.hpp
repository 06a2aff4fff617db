#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace fcam {

/// Color image, planar channel-major storage (3 planes of height*width,
/// each plane row-major). Values are finite and in [0,1].
class ImageTensor {
 public:
  static constexpr int kChannels = 3;

  ImageTensor() = default;
  ImageTensor(int height, int width);
  ImageTensor(int height, int width, std::vector<float> data);

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t plane_size() const { return static_cast<std::size_t>(height_) * width_; }

  float at(int c, int y, int x) const { return data_[c * plane_size() + y * width_ + x]; }
  float& at(int c, int y, int x) { return data_[c * plane_size() + y * width_ + x]; }

  std::span<const float> plane(int c) const { return {data_.data() + c * plane_size(), plane_size()}; }
  const std::vector<float>& data() const { return data_; }
  std::vector<float>& data() { return data_; }

  /// Throws std::invalid_argument if any value is non-finite or outside [0,1].
  void validate() const;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<float> data_;
};

enum class CamSource { raw, interpolated, fcam_foreground };

std::string to_string(CamSource s);
CamSource cam_source_from_string(const std::string& s);

/// Single-channel activation map in [0,1].
struct Cam {
  int height = 0;
  int width = 0;
  std::vector<float> data;
  CamSource source = CamSource::raw;
  // Set when the map had zero range before normalization.
  bool degenerate = false;

  std::size_t size() const { return data.size(); }
  float at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

/// Per-pixel two-class distribution: background S1 and foreground S2.
struct SoftmaxMaps {
  int height = 0;
  int width = 0;
  std::vector<double> background;
  std::vector<double> foreground;

  std::size_t size() const { return foreground.size(); }
};

/// Gradient of a scalar loss w.r.t. both channels of a SoftmaxMaps.
struct MapGradient {
  std::vector<double> background;
  std::vector<double> foreground;

  static MapGradient zeros(std::size_t n) { return {std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)}; }
};

/// Min-max normalization to [0,1]. Constant inputs yield all zeros with
/// the degenerate flag set.
Cam normalize_cam(std::span<const float> raw, int height, int width, CamSource source = CamSource::raw);

/// Bilinear interpolation with half-pixel-center alignment. Output dims
/// must be at least the input dims.
Cam bilinear_upscale(const Cam& cam, int out_h, int out_w);

/// Upscale followed by renormalization; this is the full-size map C used
/// for sampling and evaluation.
Cam interpolate_cam(const Cam& cam, int out_h, int out_w);

/// General half-pixel bilinear resize of a single plane (up or down).
std::vector<float> resize_plane(std::span<const float> src, int in_h, int in_w, int out_h, int out_w);

ImageTensor resize_image(const ImageTensor& img, int out_h, int out_w);

// ---------------------------------------------------------------------------
// Raster files: "FCAMRAS1" | u32 channels | u32 height | u32 width | f32 LE
// payload, with a JSON sidecar at <path>.json.

struct Raster {
  std::uint32_t channels = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::vector<float> payload;
  nlohmann::json sidecar = nlohmann::json::object();
};

class RasterError : public std::runtime_error {
 public:
  RasterError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

inline constexpr char kRasterMagic[8] = {'F', 'C', 'A', 'M', 'R', 'A', 'S', '1'};

std::filesystem::path sidecar_path(const std::filesystem::path& path);

void save_raster(const std::filesystem::path& path, const Raster& raster);
Raster load_raster(const std::filesystem::path& path);

std::vector<char> encode_raster(const Raster& raster);
Raster decode_raster(std::span<const char> bytes);

Raster to_raster(const ImageTensor& img);
ImageTensor image_from_raster(const Raster& r);
Raster to_raster(const Cam& cam, int class_id = -1);
Cam cam_from_raster(const Raster& r);

}  // namespace fcam
