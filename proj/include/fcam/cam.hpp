#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fcam/classifier.hpp"
#include "fcam/data_model.hpp"

namespace fcam {

enum class CamMethodKind { gap_cam, grad_cam, center_baseline };

std::string to_string(CamMethodKind k);
CamMethodKind cam_method_from_string(const std::string& s);

/// Requested CAM: class ids are 0-based.
struct CamRequest {
  ImageTensor image;
  int target_class = 0;
  CamMethodKind method = CamMethodKind::gap_cam;
};

class UnsupportedMethodError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Unnormalized class activation sum_d w[y][d] * A_d at the feature resolution.
std::vector<float> gap_cam_raw(const ClassifierBundle& bundle, const EncoderFeatures& features, int target_class);

/// Low-resolution GAP-CAM, min-max normalized.
Cam extract_cam_gap(const ClassifierBundle& bundle, const EncoderFeatures& features, int target_class);
Cam extract_cam_gap(const ClassifierBundle& bundle, const ImageTensor& image, int target_class);

struct GradCamOptions {
  // Propagate the score gradient through the whole network (parameter
  // gradients included), as an autograd framework does when parameters
  // require grad. When false, backpropagation stops at the feature stack.
  bool full_backward = true;
};

/// Weighted sum of feature maps with channel weights = spatial mean of
/// d score_y / d A, before the ReLU.
std::vector<float> gradcam_raw(const ClassifierBundle& bundle, const ImageTensor& image, int target_class,
                               const GradCamOptions& opts = {});

/// ReLU(gradcam_raw), min-max normalized at feature resolution.
Cam extract_gradcam(const ClassifierBundle& bundle, const ImageTensor& image, int target_class,
                    const GradCamOptions& opts = {});

/// Isotropic Gaussian centered on the frame, sigma = min(h,w)/4, normalized.
Cam center_gaussian_baseline(int height, int width);

/// Any (bundle, image, class) -> low- or full-resolution Cam.
using CamMethod = std::function<Cam(const ClassifierBundle&, const ImageTensor&, int)>;

/// Name -> method table; builtins are "gap_cam", "grad_cam", "center_baseline".
class CamRegistry {
 public:
  CamRegistry();
  void add(const std::string& name, CamMethod method);
  const CamMethod& get(const std::string& name) const;
  bool contains(const std::string& name) const { return methods_.count(name) > 0; }
  std::vector<std::string> names() const;

 private:
  std::map<std::string, CamMethod> methods_;
};

/// Runs a method and interpolates the result to the image size.
Cam full_resolution_cam(const CamMethod& method, const ClassifierBundle& bundle, const ImageTensor& image,
                        int target_class);

}  // namespace fcam
