#include "fcam/data_model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace fcam {

ImageTensor::ImageTensor(int height, int width) : ImageTensor(height, width, {}) {}

ImageTensor::ImageTensor(int height, int width, std::vector<float> data)
    : height_(height), width_(width), data_(std::move(data)) {
  if (height < 1 || width < 1) throw std::invalid_argument("image dims must be >= 1");
  const std::size_t n = static_cast<std::size_t>(kChannels) * height * width;
  if (data_.empty()) data_.assign(n, 0.0f);
  if (data_.size() != n) throw std::invalid_argument("image payload does not match 3xHxW");
}

void ImageTensor::validate() const {
  for (float v : data_) {
    if (!std::isfinite(v) || v < 0.0f || v > 1.0f) throw std::invalid_argument("image values must be finite and in [0,1]");
  }
}

std::string to_string(CamSource s) {
  switch (s) {
    case CamSource::raw: return "raw";
    case CamSource::interpolated: return "interpolated";
    case CamSource::fcam_foreground: return "fcam_foreground";
  }
  return "raw";
}

CamSource cam_source_from_string(const std::string& s) {
  if (s == "raw") return CamSource::raw;
  if (s == "interpolated") return CamSource::interpolated;
  if (s == "fcam_foreground") return CamSource::fcam_foreground;
  throw std::invalid_argument("unknown cam source tag: " + s);
}

Cam normalize_cam(std::span<const float> raw, int height, int width, CamSource source) {
  if (raw.empty()) throw std::invalid_argument("normalize_cam: empty map");
  if (static_cast<std::size_t>(height) * width != raw.size()) throw std::invalid_argument("normalize_cam: shape mismatch");
  float lo = raw[0], hi = raw[0];
  for (float v : raw) {
    if (!std::isfinite(v)) throw std::invalid_argument("normalize_cam: non-finite activation");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  Cam out{height, width, std::vector<float>(raw.size(), 0.0f), source, false};
  if (!(hi > lo)) {
    out.degenerate = true;
    return out;
  }
  const double range = static_cast<double>(hi) - lo;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    out.data[i] = static_cast<float>((static_cast<double>(raw[i]) - lo) / range);
  }
  return out;
}

namespace {

struct Tap {
  int i0;
  int i1;
  float frac;
};

std::vector<Tap> half_pixel_taps(int in, int out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int i0 = static_cast<int>(std::floor(src));
    const int i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, static_cast<float>(src - i0)};
  }
  return taps;
}

}  // namespace

std::vector<float> resize_plane(std::span<const float> src, int in_h, int in_w, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize: zero target size");
  if (static_cast<std::size_t>(in_h) * in_w != src.size()) throw std::invalid_argument("resize: shape mismatch");
  const auto ty = half_pixel_taps(in_h, out_h);
  const auto tx = half_pixel_taps(in_w, out_w);
  std::vector<float> dst(static_cast<std::size_t>(out_h) * out_w);
  for (int y = 0; y < out_h; ++y) {
    const float* r0 = src.data() + static_cast<std::size_t>(ty[y].i0) * in_w;
    const float* r1 = src.data() + static_cast<std::size_t>(ty[y].i1) * in_w;
    const float fy = ty[y].frac;
    for (int x = 0; x < out_w; ++x) {
      const auto& t = tx[x];
      const float top = r0[t.i0] + (r0[t.i1] - r0[t.i0]) * t.frac;
      const float bot = r1[t.i0] + (r1[t.i1] - r1[t.i0]) * t.frac;
      float v = top + (bot - top) * fy;
      // Convex combination; clamp away rounding drift past the corner values.
      const float lo = std::min({r0[t.i0], r0[t.i1], r1[t.i0], r1[t.i1]});
      const float hi = std::max({r0[t.i0], r0[t.i1], r1[t.i0], r1[t.i1]});
      dst[static_cast<std::size_t>(y) * out_w + x] = std::clamp(v, lo, hi);
    }
  }
  return dst;
}

Cam bilinear_upscale(const Cam& cam, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("bilinear_upscale: zero target size");
  if (out_h < cam.height || out_w < cam.width) throw std::invalid_argument("bilinear_upscale: target smaller than input");
  Cam out{out_h, out_w, resize_plane(cam.data, cam.height, cam.width, out_h, out_w), CamSource::interpolated,
          cam.degenerate};
  return out;
}

Cam interpolate_cam(const Cam& cam, int out_h, int out_w) {
  Cam up = bilinear_upscale(cam, out_h, out_w);
  Cam out = normalize_cam(up.data, out_h, out_w, CamSource::interpolated);
  out.degenerate = out.degenerate || cam.degenerate;
  return out;
}

ImageTensor resize_image(const ImageTensor& img, int out_h, int out_w) {
  if (img.height() == out_h && img.width() == out_w) return img;
  std::vector<float> data;
  data.reserve(static_cast<std::size_t>(ImageTensor::kChannels) * out_h * out_w);
  for (int c = 0; c < ImageTensor::kChannels; ++c) {
    auto p = resize_plane(img.plane(c), img.height(), img.width(), out_h, out_w);
    data.insert(data.end(), p.begin(), p.end());
  }
  return ImageTensor(out_h, out_w, std::move(data));
}

// ---------------------------------------------------------------------------

namespace {

void put_u32(std::vector<char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(std::span<const char> in, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
  return v;
}

constexpr std::size_t kHeaderBytes = sizeof(kRasterMagic) + 12;

}  // namespace

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".json";
  return p;
}

std::vector<char> encode_raster(const Raster& r) {
  const std::uint64_t n = static_cast<std::uint64_t>(r.channels) * r.height * r.width;
  if (n != r.payload.size()) throw std::invalid_argument("raster payload length does not match shape");
  std::vector<char> out(kRasterMagic, kRasterMagic + sizeof(kRasterMagic));
  out.reserve(kHeaderBytes + n * 4);
  put_u32(out, r.channels);
  put_u32(out, r.height);
  put_u32(out, r.width);
  for (float f : r.payload) put_u32(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

Raster decode_raster(std::span<const char> bytes) {
  if (bytes.size() < sizeof(kRasterMagic)) throw RasterError("truncated magic", bytes.size());
  for (std::size_t i = 0; i < sizeof(kRasterMagic); ++i) {
    if (bytes[i] != kRasterMagic[i]) throw RasterError("bad magic", i);
  }
  if (bytes.size() < kHeaderBytes) throw RasterError("truncated shape header", bytes.size());
  Raster r;
  r.channels = get_u32(bytes, 8);
  r.height = get_u32(bytes, 12);
  r.width = get_u32(bytes, 16);
  if (r.channels == 0 || r.height == 0 || r.width == 0) throw RasterError("zero dimension in shape header", 8);
  const std::uint64_t n = static_cast<std::uint64_t>(r.channels) * r.height * r.width;
  const std::uint64_t expected = kHeaderBytes + n * 4;
  if (bytes.size() < expected) throw RasterError("truncated payload", bytes.size());
  if (bytes.size() > expected) throw RasterError("payload longer than shape header declares", expected);
  r.payload.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) r.payload[i] = std::bit_cast<float>(get_u32(bytes, kHeaderBytes + i * 4));
  return r;
}

void save_raster(const std::filesystem::path& path, const Raster& raster) {
  const auto bytes = encode_raster(raster);
  {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed: " + path.string());
  }
  std::ofstream s(sidecar_path(path));
  if (!s) throw std::runtime_error("cannot write sidecar for " + path.string());
  s << raster.sidecar.dump(2) << '\n';
}

Raster load_raster(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open raster: " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Raster r = decode_raster(bytes);
  const auto sc = sidecar_path(path);
  if (std::filesystem::exists(sc)) {
    std::ifstream s(sc);
    r.sidecar = nlohmann::json::parse(s);
  }
  return r;
}

Raster to_raster(const ImageTensor& img) {
  Raster r{ImageTensor::kChannels, static_cast<std::uint32_t>(img.height()), static_cast<std::uint32_t>(img.width()),
           img.data(), nlohmann::json::object()};
  r.sidecar["kind"] = "image";
  return r;
}

ImageTensor image_from_raster(const Raster& r) {
  if (r.channels != ImageTensor::kChannels) throw std::invalid_argument("image raster must have 3 channels");
  return ImageTensor(static_cast<int>(r.height), static_cast<int>(r.width), r.payload);
}

Raster to_raster(const Cam& cam, int class_id) {
  Raster r{1, static_cast<std::uint32_t>(cam.height), static_cast<std::uint32_t>(cam.width), cam.data,
           nlohmann::json::object()};
  r.sidecar["kind"] = "cam";
  r.sidecar["source_tag"] = to_string(cam.source);
  r.sidecar["class_id"] = class_id;
  r.sidecar["normalized"] = true;
  r.sidecar["degenerate"] = cam.degenerate;
  return r;
}

Cam cam_from_raster(const Raster& r) {
  if (r.channels != 1) throw std::invalid_argument("cam raster must have 1 channel");
  Cam c{static_cast<int>(r.height), static_cast<int>(r.width), r.payload, CamSource::raw, false};
  if (r.sidecar.contains("source_tag")) c.source = cam_source_from_string(r.sidecar.at("source_tag").get<std::string>());
  if (r.sidecar.contains("degenerate")) c.degenerate = r.sidecar.at("degenerate").get<bool>();
  return c;
}

}  // namespace fcam
