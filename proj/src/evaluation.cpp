#include "fcam/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fcam/classifier.hpp"

namespace fcam {

const std::vector<float>& tau_grid() {
  static const std::vector<float> taus = [] {
    std::vector<float> t(kNumTaus);
    for (int i = 0; i < kNumTaus; ++i) t[i] = static_cast<float>(i / 1000.0);
    return t;
  }();
  return taus;
}

BinaryMask threshold_mask(const Cam& cam, float tau) {
  BinaryMask m(cam.data.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = cam.data[i] >= tau ? 1 : 0;
  return m;
}

BoundingBox tight_box(const BinaryMask& mask, int height, int width) {
  BoundingBox b{width, height, 0, 0};
  bool any = false;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      if (!mask[static_cast<std::size_t>(y) * width + x]) continue;
      any = true;
      b.x0 = std::min(b.x0, x);
      b.y0 = std::min(b.y0, y);
      b.x1 = std::max(b.x1, x + 1);
      b.y1 = std::max(b.y1, y + 1);
    }
  }
  return any ? b : BoundingBox{};
}

BoundingBox mask_to_box(const BinaryMask& mask, int height, int width, Connectivity conn) {
  if (mask.size() != static_cast<std::size_t>(height) * width) throw std::invalid_argument("mask_to_box: shape mismatch");
  std::vector<std::uint8_t> seen(mask.size(), 0);
  std::vector<int> stack;
  long long best_size = 0;
  BoundingBox best{};
  static constexpr int dx4[] = {1, -1, 0, 0}, dy4[] = {0, 0, 1, -1};
  static constexpr int dx8[] = {1, -1, 0, 0, 1, 1, -1, -1}, dy8[] = {0, 0, 1, -1, 1, -1, 1, -1};
  const int nn = conn == Connectivity::four ? 4 : 8;
  const int* dxs = conn == Connectivity::four ? dx4 : dx8;
  const int* dys = conn == Connectivity::four ? dy4 : dy8;
  for (int start = 0; start < static_cast<int>(mask.size()); ++start) {
    if (!mask[start] || seen[start]) continue;
    long long size = 0;
    BoundingBox b{width, height, 0, 0};
    seen[start] = 1;
    stack.push_back(start);
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      ++size;
      const int y = p / width, x = p % width;
      b.x0 = std::min(b.x0, x);
      b.y0 = std::min(b.y0, y);
      b.x1 = std::max(b.x1, x + 1);
      b.y1 = std::max(b.y1, y + 1);
      for (int k = 0; k < nn; ++k) {
        const int nx = x + dxs[k], ny = y + dys[k];
        if (nx < 0 || ny < 0 || nx >= width || ny >= height) continue;
        const int q = ny * width + nx;
        if (mask[q] && !seen[q]) {
          seen[q] = 1;
          stack.push_back(q);
        }
      }
    }
    if (size > best_size) {
      best_size = size;
      best = b;
    }
  }
  return best;
}

double iou(const BoundingBox& a, const BoundingBox& b) {
  const long long iw = std::max(0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const long long ih = std::max(0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const long long inter = iw * ih;
  const long long uni = std::max(0LL, a.area()) + std::max(0LL, b.area()) - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

std::vector<std::vector<double>> box_iou_table(const std::vector<Cam>& cams,
                                               const std::vector<std::vector<BoundingBox>>& gt_boxes,
                                               const BoxEvalOptions& opts) {
  if (cams.empty()) throw std::invalid_argument("box evaluation: empty dataset");
  if (cams.size() != gt_boxes.size()) throw std::invalid_argument("box evaluation: one GT list per CAM required");
  const auto& taus = tau_grid();
  std::vector<std::vector<double>> table(cams.size(), std::vector<double>(kNumTaus, 0.0));
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const Cam& cam = cams[i];
    if (gt_boxes[i].empty()) throw std::invalid_argument("box evaluation: image without GT box");
    std::vector<float> sorted = cam.data;
    std::sort(sorted.begin(), sorted.end());
    std::size_t prev_count = static_cast<std::size_t>(-1);
    double prev_iou = 0.0;
    for (int t = 0; t < kNumTaus; ++t) {
      // The mask only changes when the number of pixels >= tau changes.
      const std::size_t count =
          sorted.end() - std::lower_bound(sorted.begin(), sorted.end(), taus[t]);
      if (count != prev_count) {
        const BoundingBox box = mask_to_box(threshold_mask(cam, taus[t]), cam.height, cam.width, opts.connectivity);
        double best = 0.0;
        for (const auto& gt : gt_boxes[i]) best = std::max(best, iou(box, gt));
        prev_iou = best;
        prev_count = count;
      }
      table[i][t] = prev_iou;
    }
  }
  return table;
}

MaxBoxAccResult max_box_acc_from_table(const std::vector<std::vector<double>>& table, double sigma) {
  if (table.empty()) throw std::invalid_argument("MaxBoxAcc: empty dataset");
  MaxBoxAccResult r;
  r.curve.taus = tau_grid();
  r.curve.scores.assign(kNumTaus, 0.0);
  for (int t = 0; t < kNumTaus; ++t) {
    std::size_t hits = 0;
    for (const auto& row : table)
      if (row[t] >= sigma) ++hits;
    r.curve.scores[t] = static_cast<double>(hits) / static_cast<double>(table.size());
  }
  const auto it = std::max_element(r.curve.scores.begin(), r.curve.scores.end());
  r.score = *it;
  r.best_tau_index = static_cast<int>(it - r.curve.scores.begin());
  return r;
}

MaxBoxAccResult max_box_acc(const std::vector<Cam>& cams, const std::vector<std::vector<BoundingBox>>& gt_boxes,
                            double sigma, const BoxEvalOptions& opts) {
  return max_box_acc_from_table(box_iou_table(cams, gt_boxes, opts), sigma);
}

double topk_localization(const std::vector<Cam>& cams, const std::vector<std::vector<BoundingBox>>& gt_boxes,
                         const std::vector<std::vector<double>>& class_probs, const std::vector<int>& labels, int k,
                         double sigma, float operating_tau, const BoxEvalOptions& opts) {
  if (cams.empty()) throw std::invalid_argument("top-k localization: empty dataset");
  if (cams.size() != gt_boxes.size() || cams.size() != class_probs.size() || cams.size() != labels.size())
    throw std::invalid_argument("top-k localization: misaligned inputs");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const auto top = top_k(class_probs[i], k);
    if (std::find(top.begin(), top.end(), labels[i]) == top.end()) continue;
    const BoundingBox box =
        mask_to_box(threshold_mask(cams[i], operating_tau), cams[i].height, cams[i].width, opts.connectivity);
    double best = 0.0;
    for (const auto& gt : gt_boxes[i]) best = std::max(best, iou(box, gt));
    if (best >= sigma) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(cams.size());
}

PxapResult pxap(const std::vector<Cam>& cams, const std::vector<BinaryMask>& gt_masks) {
  if (cams.size() != gt_masks.size() || cams.empty()) throw std::invalid_argument("PxAP: one GT mask per CAM required");
  const auto& taus = tau_grid();
  // Per-tau-index counts of pixels whose highest satisfied tau is that index.
  std::vector<long long> pos_at(kNumTaus, 0), neg_at(kNumTaus, 0);
  long long total_pos = 0;
  for (std::size_t i = 0; i < cams.size(); ++i) {
    if (cams[i].data.size() != gt_masks[i].size()) throw std::invalid_argument("PxAP: mask/CAM size mismatch");
    for (std::size_t p = 0; p < gt_masks[i].size(); ++p) {
      const float s = cams[i].data[p];
      const auto idx = static_cast<int>(std::upper_bound(taus.begin(), taus.end(), s) - taus.begin()) - 1;
      const bool gt = gt_masks[i][p] != 0;
      total_pos += gt;
      if (idx < 0) continue;  // below every threshold
      (gt ? pos_at : neg_at)[idx]++;
    }
  }
  if (total_pos == 0) throw std::invalid_argument("PxAP: ground truth has no positive pixel");
  PxapResult r;
  r.precision.assign(kNumTaus, 0.0);
  r.recall.assign(kNumTaus, 0.0);
  long long tp = 0, fp = 0;
  for (int t = kNumTaus - 1; t >= 0; --t) {
    tp += pos_at[t];
    fp += neg_at[t];
    r.recall[t] = static_cast<double>(tp) / static_cast<double>(total_pos);
    r.precision[t] = (tp + fp) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  }
  double ap = 0.0;
  for (int t = 0; t < kNumTaus; ++t) {
    const double next = t + 1 < kNumTaus ? r.recall[t + 1] : 0.0;
    ap += (r.recall[t] - next) * r.precision[t];
  }
  r.score = ap;
  return r;
}

std::vector<double> activation_histogram(const std::vector<Cam>& cams, int bins) {
  if (bins < 1) throw std::invalid_argument("histogram needs at least one bin");
  std::vector<double> h(bins, 0.0);
  std::size_t n = 0;
  for (const auto& c : cams) {
    for (float v : c.data) {
      const int b = std::clamp(static_cast<int>(std::floor(static_cast<double>(v) * bins)), 0, bins - 1);
      h[b] += 1.0;
      ++n;
    }
  }
  if (n > 0)
    for (auto& v : h) v /= static_cast<double>(n);
  return h;
}

double activation_mass_between(const std::vector<Cam>& cams, double lo, double hi) {
  std::size_t in = 0, n = 0;
  for (const auto& c : cams) {
    for (float v : c.data) {
      if (v > lo && v < hi) ++in;
      ++n;
    }
  }
  return n ? static_cast<double>(in) / static_cast<double>(n) : 0.0;
}

double robust_tau_width(const SweepCurve& curve, double fraction) {
  if (curve.scores.empty()) return 0.0;
  const auto peak_it = std::max_element(curve.scores.begin(), curve.scores.end());
  const double bar = fraction * *peak_it;
  int lo = static_cast<int>(peak_it - curve.scores.begin());
  int hi = lo;
  while (lo > 0 && curve.scores[lo - 1] >= bar) --lo;
  while (hi + 1 < static_cast<int>(curve.scores.size()) && curve.scores[hi + 1] >= bar) ++hi;
  return static_cast<double>(curve.taus[hi]) - static_cast<double>(curve.taus[lo]);
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  nlohmann::json mba = nlohmann::json::object();
  for (const auto& [s, v] : max_box_acc) mba[std::to_string(static_cast<int>(std::lround(s * 100)))] = v;
  j["max_box_acc"] = mba;
  j["max_box_acc_v2"] = max_box_acc_v2;
  j["top1_loc"] = top1_loc;
  j["top5_loc"] = top5_loc;
  j["pxap"] = has_pxap ? nlohmann::json(pxap) : nlohmann::json(nullptr);
  j["operating_tau"] = operating_tau;
  nlohmann::json curves = nlohmann::json::object();
  for (const auto& [s, c] : box_curves) curves[std::to_string(static_cast<int>(std::lround(s * 100)))] = c.scores;
  j["box_acc_curves"] = curves;
  if (has_pxap) j["pr_curve"] = {{"precision", pxap_curve.precision}, {"recall", pxap_curve.recall}};
  j["histogram"] = histogram;
  return j;
}

EvalReport evaluate(const EvalInputs& in, float operating_tau, const BoxEvalOptions& opts) {
  EvalReport r;
  const auto table = box_iou_table(in.cams, in.gt_boxes, opts);
  double v2 = 0.0;
  for (double sigma : kV2Sigmas) {
    auto res = max_box_acc_from_table(table, sigma);
    r.max_box_acc[sigma] = res.score;
    v2 += res.score;
    if (sigma == 0.5 && operating_tau < 0.0f) operating_tau = tau_grid()[res.best_tau_index];
    r.box_curves[sigma] = std::move(res.curve);
  }
  r.max_box_acc_v2 = v2 / static_cast<double>(kV2Sigmas.size());
  r.operating_tau = operating_tau;
  if (!in.class_probs.empty()) {
    const int k5 = std::min<int>(5, static_cast<int>(in.class_probs.front().size()));
    r.top1_loc = topk_localization(in.cams, in.gt_boxes, in.class_probs, in.labels, 1, 0.5, operating_tau, opts);
    r.top5_loc = topk_localization(in.cams, in.gt_boxes, in.class_probs, in.labels, k5, 0.5, operating_tau, opts);
  }
  if (!in.gt_masks.empty()) {
    r.pxap_curve = pxap(in.cams, in.gt_masks);
    r.pxap = r.pxap_curve.score;
    r.has_pxap = true;
  }
  r.histogram = activation_histogram(in.cams);
  return r;
}

}  // namespace fcam
