#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fcam/data_model.hpp"
#include "json.hpp"

namespace fcam {

/// Half-open box [x0,x1) x [y0,y1); x1 == x0 or y1 == y0 is empty.
struct BoundingBox {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  long long area() const { return static_cast<long long>(x1 - x0) * (y1 - y0); }
  bool empty() const { return x1 <= x0 || y1 <= y0; }
  bool operator==(const BoundingBox&) const = default;
};

inline constexpr int kNumTaus = 1001;

/// tau_i = i/1000 for i in [0, 1000], as stored floats.
const std::vector<float>& tau_grid();

struct SweepCurve {
  std::vector<float> taus;
  std::vector<double> scores;
};

using BinaryMask = std::vector<std::uint8_t>;

enum class Connectivity { four = 4, eight = 8 };

BinaryMask threshold_mask(const Cam& cam, float tau);

/// Tight box of the largest connected component (first in raster order on
/// ties); empty mask -> empty box.
BoundingBox mask_to_box(const BinaryMask& mask, int height, int width, Connectivity conn = Connectivity::four);

/// Tight box over all set pixels.
BoundingBox tight_box(const BinaryMask& mask, int height, int width);

double iou(const BoundingBox& a, const BoundingBox& b);

struct BoxEvalOptions {
  Connectivity connectivity = Connectivity::four;
};

/// best_iou[i][t] = max over GT boxes of IoU(box(cam_i >= tau_t), gt).
std::vector<std::vector<double>> box_iou_table(const std::vector<Cam>& cams,
                                               const std::vector<std::vector<BoundingBox>>& gt_boxes,
                                               const BoxEvalOptions& opts = {});

struct MaxBoxAccResult {
  double score = 0.0;
  int best_tau_index = 0;
  SweepCurve curve;
};

MaxBoxAccResult max_box_acc_from_table(const std::vector<std::vector<double>>& table, double sigma);
MaxBoxAccResult max_box_acc(const std::vector<Cam>& cams, const std::vector<std::vector<BoundingBox>>& gt_boxes,
                            double sigma, const BoxEvalOptions& opts = {});

inline const std::vector<double> kV2Sigmas{0.3, 0.5, 0.7};

/// Image counts when its label is in the top-k predictions and the box at
/// the operating threshold reaches IoU >= sigma.
double topk_localization(const std::vector<Cam>& cams, const std::vector<std::vector<BoundingBox>>& gt_boxes,
                         const std::vector<std::vector<double>>& class_probs, const std::vector<int>& labels, int k,
                         double sigma, float operating_tau, const BoxEvalOptions& opts = {});

struct PxapResult {
  double score = 0.0;
  std::vector<double> precision;  // per tau; 0 where nothing is predicted
  std::vector<double> recall;
};

/// Pixel AP pooled over the split: AP = sum_i (R_i - R_{i+1}) P_i over the
/// tau sweep (R_1001 = 0). Throws if the GT has no positive pixel.
PxapResult pxap(const std::vector<Cam>& cams, const std::vector<BinaryMask>& gt_masks);

/// Pooled, mass-normalized histogram on [0,1].
std::vector<double> activation_histogram(const std::vector<Cam>& cams, int bins = 256);

/// Fraction of pooled pixels with lo < value < hi.
double activation_mass_between(const std::vector<Cam>& cams, double lo, double hi);

/// Width of the contiguous tau interval around the first peak where the
/// curve stays >= fraction * peak (grid points times the tau step).
double robust_tau_width(const SweepCurve& curve, double fraction);

struct EvalReport {
  std::map<double, double> max_box_acc;  // sigma -> score
  double max_box_acc_v2 = 0.0;
  double top1_loc = 0.0;
  double top5_loc = 0.0;
  double pxap = 0.0;
  bool has_pxap = false;
  float operating_tau = 0.0f;
  std::map<double, SweepCurve> box_curves;
  PxapResult pxap_curve;
  std::vector<double> histogram;

  nlohmann::json to_json() const;
};

struct EvalInputs {
  std::vector<Cam> cams;
  std::vector<std::vector<BoundingBox>> gt_boxes;
  std::vector<BinaryMask> gt_masks;  // optional; enables PxAP when non-empty
  std::vector<std::vector<double>> class_probs;  // optional; enables top-k
  std::vector<int> labels;
};

/// operating_tau < 0 selects the tau maximizing box accuracy at sigma 0.5
/// on the evaluated set itself.
EvalReport evaluate(const EvalInputs& in, float operating_tau = -1.0f, const BoxEvalOptions& opts = {});

}  // namespace fcam
