#include "fcam/cam.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fcam {

std::string to_string(CamMethodKind k) {
  switch (k) {
    case CamMethodKind::gap_cam: return "gap_cam";
    case CamMethodKind::grad_cam: return "grad_cam";
    case CamMethodKind::center_baseline: return "center_baseline";
  }
  return "gap_cam";
}

CamMethodKind cam_method_from_string(const std::string& s) {
  if (s == "gap_cam") return CamMethodKind::gap_cam;
  if (s == "grad_cam") return CamMethodKind::grad_cam;
  if (s == "center_baseline") return CamMethodKind::center_baseline;
  throw UnsupportedMethodError("unknown CAM method: " + s);
}

std::vector<float> gap_cam_raw(const ClassifierBundle& bundle, const EncoderFeatures& features, int target_class) {
  if (bundle.spec().head != HeadKind::gap_linear)
    throw UnsupportedMethodError("GAP-CAM requires a global-average-pooling linear head");
  const auto w = bundle.class_weights(target_class);
  const nn::Tensor& a = features.top;
  std::vector<double> acc(a.plane(), 0.0);
  for (int d = 0; d < a.c; ++d) {
    const float* m = a.channel(d);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += static_cast<double>(w[d]) * m[i];
  }
  return {acc.begin(), acc.end()};
}

Cam extract_cam_gap(const ClassifierBundle& bundle, const EncoderFeatures& features, int target_class) {
  const auto raw = gap_cam_raw(bundle, features, target_class);
  return normalize_cam(raw, features.top.h, features.top.w, CamSource::raw);
}

Cam extract_cam_gap(const ClassifierBundle& bundle, const ImageTensor& image, int target_class) {
  return extract_cam_gap(bundle, bundle.encode(image), target_class);
}

std::vector<float> gradcam_raw(const ClassifierBundle& bundle, const ImageTensor& image, int target_class,
                               const GradCamOptions& opts) {
  if (bundle.inference_only()) throw std::logic_error("GradCAM needs gradients; bundle is inference-only");
  if (target_class < 0 || target_class >= bundle.num_classes()) throw std::out_of_range("class id out of range");
  EncoderCache cache;
  const auto features = bundle.encode(image, &cache);
  std::vector<float> dlogits(bundle.num_classes(), 0.0f);
  dlogits[target_class] = 1.0f;
  nn::Gradients scratch(bundle.parameters());
  const nn::Tensor grad = bundle.backward(features, cache, dlogits, scratch, opts.full_backward);
  const nn::Tensor& a = features.top;
  std::vector<double> acc(a.plane(), 0.0);
  for (int d = 0; d < a.c; ++d) {
    const float* g = grad.channel(d);
    double alpha = 0.0;
    for (std::size_t i = 0; i < a.plane(); ++i) alpha += g[i];
    alpha /= static_cast<double>(a.plane());
    const float* m = a.channel(d);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += alpha * m[i];
  }
  return {acc.begin(), acc.end()};
}

Cam extract_gradcam(const ClassifierBundle& bundle, const ImageTensor& image, int target_class,
                    const GradCamOptions& opts) {
  auto raw = gradcam_raw(bundle, image, target_class, opts);
  for (auto& v : raw) v = std::max(v, 0.0f);
  const int f = bundle.spec().downsample();
  return normalize_cam(raw, image.height() / f, image.width() / f, CamSource::raw);
}

Cam center_gaussian_baseline(int height, int width) {
  if (height < 1 || width < 1) throw std::invalid_argument("center baseline needs positive dims");
  const double cy = (height - 1) / 2.0, cx = (width - 1) / 2.0;
  const double sigma = std::min(height, width) / 4.0;
  std::vector<float> g(static_cast<std::size_t>(height) * width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
      g[static_cast<std::size_t>(y) * width + x] = static_cast<float>(std::exp(-d2 / (2.0 * sigma * sigma)));
    }
  }
  return normalize_cam(g, height, width, CamSource::interpolated);
}

CamRegistry::CamRegistry() {
  add("gap_cam", [](const ClassifierBundle& b, const ImageTensor& img, int y) { return extract_cam_gap(b, img, y); });
  add("grad_cam", [](const ClassifierBundle& b, const ImageTensor& img, int y) { return extract_gradcam(b, img, y); });
  add("center_baseline",
      [](const ClassifierBundle&, const ImageTensor& img, int) { return center_gaussian_baseline(img.height(), img.width()); });
}

void CamRegistry::add(const std::string& name, CamMethod method) { methods_[name] = std::move(method); }

const CamMethod& CamRegistry::get(const std::string& name) const {
  const auto it = methods_.find(name);
  if (it == methods_.end()) throw UnsupportedMethodError("unknown CAM method: " + name);
  return it->second;
}

std::vector<std::string> CamRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& [k, _] : methods_) out.push_back(k);
  return out;
}

Cam full_resolution_cam(const CamMethod& method, const ClassifierBundle& bundle, const ImageTensor& image,
                        int target_class) {
  Cam c = method(bundle, image, target_class);
  if (c.height == image.height() && c.width == image.width()) return c;
  return interpolate_cam(c, image.height(), image.width());
}

}  // namespace fcam
